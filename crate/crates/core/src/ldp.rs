//! Label distribution projection: kernel PCA targets plus a small
//! projection head on top of the network output.
//!
//! The true label rows are projected to `p < t` dimensions with kernel PCA
//! (RBF kernel by default, bandwidth from the median heuristic) and pushed
//! through a softmax so they form distributions again. A one-layer head
//! `low = softmax(sigmoid(pred W + b))` maps the network's predictions into
//! the same space, and the L1 gap between the two is the projection loss.
//! The eigen-decompositions run on a from-scratch cyclic Jacobi solver.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{
    l1_loss, l1_loss_grad, row_softmax, sigmoid, softmax_backward, uniform_matrix, TensorDoc,
};

/// Maximum cyclic Jacobi sweeps before giving up.
const JACOBI_MAX_SWEEPS: usize = 100;
/// Convergence threshold on the off-diagonal Frobenius norm, relative to
/// the Frobenius norm of the input.
const JACOBI_REL_TOL: f64 = 1e-12;
/// Eigenvalues below `1e-9 * lambda_max` are treated as numerically zero.
const EIGVAL_REL_TOL: f64 = 1e-9;

/// Kernel choice passed to [`kpca_fit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    /// `exp(-gamma * ||x - y||^2)`. With `gamma: None` the bandwidth comes
    /// from the median heuristic: `gamma = 1 / median(pairwise squared
    /// distances)`, falling back to `1.0` when the median is zero.
    Rbf { gamma: Option<f64> },
    /// Plain dot product. Centered linear-kernel scores coincide with PCA
    /// scores, which makes this variant a convenient cross-check.
    Linear,
}

/// Kernel with all parameters fixed, as stored in a fitted model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResolvedKernel {
    Rbf { gamma: f64 },
    Linear,
}

impl ResolvedKernel {
    fn value(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        match self {
            ResolvedKernel::Rbf { gamma } => {
                let sq: f64 = a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                (-gamma * sq).exp()
            }
            ResolvedKernel::Linear => a.dot(&b),
        }
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order with the matching orthonormal
/// eigenvectors as columns. Fails if the off-diagonal mass has not dropped
/// below `1e-12` times the input norm after 100 sweeps.
pub fn sym_eigen(matrix: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = matrix.nrows();
    assert_eq!(matrix.ncols(), n, "sym_eigen needs a square matrix");
    let scale = matrix.iter().map(|x| x * x).sum::<f64>().sqrt();
    for i in 0..n {
        for j in 0..i {
            assert!(
                (matrix[[i, j]] - matrix[[j, i]]).abs() <= 1e-8 * scale.max(1.0),
                "sym_eigen needs a symmetric matrix"
            );
        }
    }

    // flat row-major working copy; rotations touch rows p and q
    // contiguously and mirror them into the columns to keep symmetry
    let mut a: Vec<f64> = matrix.iter().cloned().collect();
    // eigenvector accumulator stored transposed, one eigenvector per row,
    // so the plane rotation updates run over contiguous memory too
    let mut vt = vec![0.0f64; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }

    let off_frobenius = |a: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        acc.sqrt()
    };

    let tol = JACOBI_REL_TOL * scale;
    let mut converged = scale == 0.0 || n < 2;
    let mut sweep = 0usize;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        if off_frobenius(&a) <= tol {
            converged = true;
            break;
        }
        // during the first sweeps only rotate the dominant entries; later
        // sweeps rotate everything that survives the zeroing device below
        let thresh = if sweep < 3 {
            let mut sm = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    sm += a[i * n + j].abs();
                }
            }
            0.2 * sm / ((n * n) as f64)
        } else {
            0.0
        };
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                // an off-diagonal entry that no longer affects either
                // diagonal at working precision is dead: zero it outright
                let g = 100.0 * apq.abs();
                if sweep > 3
                    && a[p * n + p].abs() + g == a[p * n + p].abs()
                    && a[q * n + q].abs() + g == a[q * n + q].abs()
                {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                if apq.abs() <= thresh {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                // tan of the rotation angle; the asymptotic form avoids
                // overflow of theta^2 for tiny off-diagonal entries
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sgn / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                let app = a[p * n + p];
                let aqq = a[q * n + q];
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;

                let (head, tail) = a.split_at_mut(q * n);
                let row_p = &mut head[p * n..p * n + n];
                let row_q = &mut tail[..n];
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = row_p[i];
                    let aiq = row_q[i];
                    row_p[i] = aip - s * (aiq + tau * aip);
                    row_q[i] = aiq + s * (aip - tau * aiq);
                }
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    a[i * n + p] = a[p * n + i];
                    a[i * n + q] = a[q * n + i];
                }

                let (vhead, vtail) = vt.split_at_mut(q * n);
                let vrow_p = &mut vhead[p * n..p * n + n];
                let vrow_q = &mut vtail[..n];
                for i in 0..n {
                    let vip = vrow_p[i];
                    let viq = vrow_q[i];
                    vrow_p[i] = vip - s * (viq + tau * vip);
                    vrow_q[i] = viq + s * (vip - tau * viq);
                }
            }
        }
        sweep += 1;
    }
    if !converged && off_frobenius(&a) > tol {
        // the sweep loop may have exhausted its budget right after
        // reaching the tolerance, hence the recheck
        return Err(Error::Numerical(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .expect("eigenvalues are finite")
    });
    let eigvals = Array1::from_iter(order.iter().map(|&i| a[i * n + i]));
    let mut eigvecs = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            eigvecs[[i, dst]] = vt[src * n + i];
        }
    }
    Ok((eigvals, eigvecs))
}

/// A fitted kernel PCA projection of label rows.
#[derive(Debug, Clone)]
pub struct KpcaModel {
    pub kernel: ResolvedKernel,
    train_labels: Array2<f64>,
    row_means: Array1<f64>,
    grand_mean: f64,
    /// Eigenvectors scaled by `1/sqrt(lambda)`, one column per component.
    alphas: Array2<f64>,
    /// Kept eigenvalues of the centered kernel matrix, descending.
    pub eigvals: Array1<f64>,
    train_scores: Array2<f64>,
}

impl KpcaModel {
    /// Projection dimension `p`.
    pub fn out_dim(&self) -> usize {
        self.alphas.ncols()
    }

    /// Scores of the training rows, `m x p`.
    pub fn train_scores(&self) -> &Array2<f64> {
        &self.train_scores
    }

    /// Projects new label rows into the component space (`b x p`).
    ///
    /// Kernel values against every training row are centered with the
    /// training statistics and contracted with the scaled eigenvectors.
    /// Projecting the training rows themselves reproduces
    /// [`KpcaModel::train_scores`].
    pub fn project(&self, labels: &Array2<f64>) -> Array2<f64> {
        assert_eq!(
            labels.ncols(),
            self.train_labels.ncols(),
            "label dimension does not match the fitted model"
        );
        let b = labels.nrows();
        let m = self.train_labels.nrows();
        let mut k = Array2::zeros((b, m));
        for r in 0..b {
            for i in 0..m {
                k[[r, i]] = self
                    .kernel
                    .value(labels.row(r), self.train_labels.row(i));
            }
        }
        for r in 0..b {
            let row_mean = k.row(r).sum() / m as f64;
            for i in 0..m {
                k[[r, i]] = k[[r, i]] - row_mean - self.row_means[i] + self.grand_mean;
            }
        }
        k.dot(&self.alphas)
    }
}

/// Fits kernel PCA on label rows and keeps the top `p` components.
///
/// The kernel matrix is double-centered, decomposed with [`sym_eigen`], and
/// eigenvalues below `1e-9` of the largest are discarded as numerical zeros.
/// Requires `1 <= p < t`; fails when fewer than `p` usable components exist.
pub fn kpca_fit(labels: &Array2<f64>, p: usize, kernel: Kernel) -> Result<KpcaModel> {
    let m = labels.nrows();
    let t = labels.ncols();
    if p < 1 || p >= t {
        return Err(Error::Config(format!(
            "projection dimension must satisfy 1 <= p < t, got p = {p} with t = {t}"
        )));
    }
    if m < 2 {
        return Err(Error::Data("kernel PCA needs at least 2 rows".into()));
    }
    let kernel = match kernel {
        Kernel::Rbf { gamma: Some(g) } => {
            if !g.is_finite() || g <= 0.0 {
                return Err(Error::Config(format!("kernel bandwidth gamma = {g} is invalid")));
            }
            ResolvedKernel::Rbf { gamma: g }
        }
        Kernel::Rbf { gamma: None } => ResolvedKernel::Rbf {
            gamma: median_heuristic_gamma(labels),
        },
        Kernel::Linear => ResolvedKernel::Linear,
    };

    let mut k = Array2::zeros((m, m));
    for i in 0..m {
        for j in i..m {
            let v = kernel.value(labels.row(i), labels.row(j));
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    let row_means = k.mean_axis(Axis(1)).expect("at least one column");
    let grand_mean = row_means.sum() / m as f64;
    let mut centered = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            centered[[i, j]] = k[[i, j]] - row_means[i] - row_means[j] + grand_mean;
        }
    }

    let (eigvals_all, eigvecs_all) = sym_eigen(&centered)?;
    let lambda_max = eigvals_all[0];
    let tol = EIGVAL_REL_TOL * lambda_max.max(0.0);
    let usable = eigvals_all.iter().take_while(|&&l| l > tol && l > 0.0).count();
    if usable < p {
        return Err(Error::Numerical(format!(
            "kernel PCA found only {usable} usable component(s), {p} requested"
        )));
    }

    let mut alphas = Array2::zeros((m, p));
    let mut train_scores = Array2::zeros((m, p));
    let mut eigvals = Array1::zeros(p);
    for c in 0..p {
        let lambda = eigvals_all[c];
        let sqrt_lambda = lambda.sqrt();
        eigvals[c] = lambda;
        for i in 0..m {
            alphas[[i, c]] = eigvecs_all[[i, c]] / sqrt_lambda;
            train_scores[[i, c]] = eigvecs_all[[i, c]] * sqrt_lambda;
        }
    }

    Ok(KpcaModel {
        kernel,
        train_labels: labels.clone(),
        row_means,
        grand_mean,
        alphas,
        eigvals,
        train_scores,
    })
}

fn median_heuristic_gamma(labels: &Array2<f64>) -> f64 {
    let m = labels.nrows();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            let sq: f64 = labels
                .row(i)
                .iter()
                .zip(labels.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(sq);
        }
    }
    dists.sort_unstable_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if median <= 1e-12 {
        1.0
    } else {
        1.0 / median
    }
}

/// Projects label rows and renormalizes each score row into a distribution
/// with the softmax, producing targets for the projection head.
pub fn project_targets(model: &KpcaModel, labels: &Array2<f64>) -> Array2<f64> {
    row_softmax(model.project(labels))
}

/// Weights of the projection head: `w` is `t x p`, `b` is `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubMlpParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl SubMlpParams {
    pub fn in_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Flat views in the fixed order `[w, b]`.
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.w.as_slice_mut().expect("w is contiguous"),
            self.b.as_slice_mut().expect("b is contiguous"),
        ]
    }

    pub fn to_doc(&self) -> SubMlpDoc {
        SubMlpDoc {
            w: TensorDoc::from_matrix(&self.w),
            b: TensorDoc::from_vector(&self.b),
        }
    }

    pub fn from_doc(doc: &SubMlpDoc) -> Result<Self> {
        let w = doc.w.to_matrix()?;
        let b = doc.b.to_vector()?;
        if w.ncols() != b.len() {
            return Err(Error::Data(format!(
                "projection head shapes disagree: w is {}x{}, b has {} entries",
                w.nrows(),
                w.ncols(),
                b.len()
            )));
        }
        Ok(SubMlpParams { w, b })
    }
}

/// Serialized form of [`SubMlpParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubMlpDoc {
    pub w: TensorDoc,
    pub b: TensorDoc,
}

/// Gradients for [`SubMlpParams`].
#[derive(Debug, Clone)]
pub struct SubMlpGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl SubMlpGrads {
    pub fn tensors(&self) -> [&[f64]; 2] {
        [
            self.w.as_slice().expect("w is contiguous"),
            self.b.as_slice().expect("b is contiguous"),
        ]
    }
}

/// Uniform `[-1/sqrt(t), 1/sqrt(t)]` weights, zero bias.
pub fn init_sub_params(t: usize, p: usize, seed: u64) -> SubMlpParams {
    assert!(t > 0 && p > 0, "projection head sizes must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SubMlpParams {
        w: uniform_matrix(t, p, 1.0 / (t as f64).sqrt(), &mut rng),
        b: Array1::zeros(p),
    }
}

/// Projection head forward pass: `softmax(sigmoid(pred W + b))` row-wise.
pub fn sub_mlp_forward(params: &SubMlpParams, pred: &Array2<f64>) -> Array2<f64> {
    assert_eq!(pred.ncols(), params.in_dim(), "projection head input mismatch");
    let pre = pred.dot(&params.w) + &params.b;
    row_softmax(pre.mapv(sigmoid))
}

/// L1 gap between projected predictions and projected targets, summed over
/// components and averaged over the batch.
pub fn ldp_loss(pred_low: &Array2<f64>, target_low: &Array2<f64>) -> f64 {
    l1_loss(pred_low, target_low)
}

/// Gradient of [`ldp_loss`] with respect to the projected predictions.
pub fn ldp_loss_grad(pred_low: &Array2<f64>, target_low: &Array2<f64>) -> Array2<f64> {
    l1_loss_grad(pred_low, target_low)
}

/// Backward pass of the projection head. Takes the gradient at the head
/// output and returns the gradient at the head input together with the
/// weight gradients. The forward intermediates are recomputed; the head is
/// small enough that this costs nothing noticeable.
pub fn sub_mlp_backward(
    pred: &Array2<f64>,
    params: &SubMlpParams,
    grad_low: &Array2<f64>,
) -> (Array2<f64>, SubMlpGrads) {
    let pre = pred.dot(&params.w) + &params.b;
    let act = pre.mapv(sigmoid);
    let low = row_softmax(act.clone());
    let grad_act = softmax_backward(&low, grad_low);
    let sig_deriv = &act * &act.mapv(|s| 1.0 - s);
    let grad_pre = &grad_act * &sig_deriv;
    let grad_w = pred.t().dot(&grad_pre);
    let grad_b = grad_pre.sum_axis(Axis(0));
    let grad_pred = grad_pre.dot(&params.w.t());
    (grad_pred, SubMlpGrads { w: grad_w, b: grad_b })
}
