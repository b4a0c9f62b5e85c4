//! Single-hidden-layer network with a softmax output row.
//!
//! The forward pass is `pred = softmax(sigmoid(x W1 + b1) W2 + b2)` applied
//! row-wise over a mini-batch. Gradients are derived by hand: the caller
//! supplies `dL/dpred` and [`backward`] pushes it through the softmax
//! Jacobian, the output layer, the sigmoid, and the input layer. Updates go
//! through a from-scratch [`AdamW`] optimizer so the whole training path is
//! free of external autodiff or optimizer dependencies.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights and biases of the network.
///
/// `w1` is `n x h`, `b1` is `h`, `w2` is `h x t`, `b2` is `t`, where `n` is
/// the feature count, `h` the hidden width and `t` the label count.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpParams {
    pub fn feature_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn label_dim(&self) -> usize {
        self.w2.ncols()
    }

    /// Mutable flat views over all four tensors, in the fixed order
    /// `[w1, b1, w2, b2]` expected by [`AdamW::step`].
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("w1 is contiguous"),
            self.b1.as_slice_mut().expect("b1 is contiguous"),
            self.w2.as_slice_mut().expect("w2 is contiguous"),
            self.b2.as_slice_mut().expect("b2 is contiguous"),
        ]
    }

    pub fn to_doc(&self) -> MlpDoc {
        MlpDoc {
            w1: TensorDoc::from_matrix(&self.w1),
            b1: TensorDoc::from_vector(&self.b1),
            w2: TensorDoc::from_matrix(&self.w2),
            b2: TensorDoc::from_vector(&self.b2),
        }
    }

    pub fn from_doc(doc: &MlpDoc) -> Result<Self> {
        let params = MlpParams {
            w1: doc.w1.to_matrix()?,
            b1: doc.b1.to_vector()?,
            w2: doc.w2.to_matrix()?,
            b2: doc.b2.to_vector()?,
        };
        if params.w1.ncols() != params.b1.len()
            || params.w1.ncols() != params.w2.nrows()
            || params.w2.ncols() != params.b2.len()
        {
            return Err(Error::Data("inconsistent tensor shapes in checkpoint".into()));
        }
        Ok(params)
    }
}

/// Gradients with the same shapes as [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpGrads {
    /// Flat views in the same order as [`MlpParams::tensors_mut`].
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("w1 is contiguous"),
            self.b1.as_slice().expect("b1 is contiguous"),
            self.w2.as_slice().expect("w2 is contiguous"),
            self.b2.as_slice().expect("b2 is contiguous"),
        ]
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub inputs: Array2<f64>,
    pub hidden_pre: Array2<f64>,
    pub hidden_act: Array2<f64>,
    pub logits: Array2<f64>,
    pub pred: Array2<f64>,
}

/// One tensor of a JSON checkpoint: a shape header plus row-major entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorDoc {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorDoc {
    pub fn from_matrix(a: &Array2<f64>) -> Self {
        TensorDoc {
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        }
    }

    pub fn from_vector(a: &Array1<f64>) -> Self {
        TensorDoc {
            shape: vec![a.len()],
            data: a.to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::Data(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| Error::Data(format!("bad tensor payload: {e}")))
    }

    pub fn to_vector(&self) -> Result<Array1<f64>> {
        if self.shape.len() != 1 || self.shape[0] != self.data.len() {
            return Err(Error::Data(format!(
                "expected a rank-1 tensor, got shape {:?} with {} entries",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Array1::from_vec(self.data.clone()))
    }
}

/// Serialized form of [`MlpParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpDoc {
    pub w1: TensorDoc,
    pub b1: TensorDoc,
    pub w2: TensorDoc,
    pub b2: TensorDoc,
}

/// Initializes weights uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
/// and biases to zero. `w1` is filled row-major first, then `w2`.
///
/// Panics if `h` is not a power of two; the hidden width is constrained to
/// powers of two everywhere in this crate.
pub fn init_params(n: usize, h: usize, t: usize, seed: u64) -> MlpParams {
    assert!(n > 0 && h > 0 && t > 0, "layer sizes must be positive");
    assert!(h.is_power_of_two(), "hidden width must be a power of two");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = uniform_matrix(n, h, 1.0 / (n as f64).sqrt(), &mut rng);
    let w2 = uniform_matrix(h, t, 1.0 / (h as f64).sqrt(), &mut rng);
    MlpParams {
        w1,
        b1: Array1::zeros(h),
        w2,
        b2: Array1::zeros(t),
    }
}

pub(crate) fn uniform_matrix(
    rows: usize,
    cols: usize,
    bound: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
        .collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax of one row, in place. The row maximum is
/// subtracted before exponentiation, so arbitrarily shifted inputs map to
/// identical outputs.
pub fn softmax_inplace(row: &mut [f64]) {
    assert!(!row.is_empty(), "softmax of an empty row");
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Softmax of a single vector.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_inplace(&mut out);
    out
}

/// Applies the softmax to every row of a matrix.
pub fn row_softmax(mut a: Array2<f64>) -> Array2<f64> {
    for mut row in a.rows_mut() {
        softmax_inplace(row.as_slice_mut().expect("row is contiguous"));
    }
    a
}

/// Forward pass over a mini-batch (`inputs` is `b x n`).
///
/// Panics on a feature-dimension mismatch; shape errors are programming
/// errors here, not recoverable conditions.
pub fn forward(params: &MlpParams, inputs: &Array2<f64>) -> ForwardTrace {
    assert_eq!(
        inputs.ncols(),
        params.feature_dim(),
        "input feature dimension does not match w1"
    );
    let hidden_pre = inputs.dot(&params.w1) + &params.b1;
    let hidden_act = hidden_pre.mapv(sigmoid);
    let logits = hidden_act.dot(&params.w2) + &params.b2;
    let pred = row_softmax(logits.clone());
    ForwardTrace {
        inputs: inputs.clone(),
        hidden_pre,
        hidden_act,
        logits,
        pred,
    }
}

/// L1 distance between predictions and targets, summed over labels and
/// averaged over the batch.
pub fn l1_loss(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    assert_eq!(pred.dim(), target.dim(), "l1_loss shape mismatch");
    let b = pred.nrows() as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / b
}

/// Gradient of [`l1_loss`] with respect to the predictions:
/// `sign(pred - target) / b`, with `sign(0) = 0`.
pub fn l1_loss_grad(pred: &Array2<f64>, target: &Array2<f64>) -> Array2<f64> {
    assert_eq!(pred.dim(), target.dim(), "l1_loss_grad shape mismatch");
    let b = pred.nrows() as f64;
    let mut grad = pred - target;
    grad.mapv_inplace(|d| {
        if d > 0.0 {
            1.0 / b
        } else if d < 0.0 {
            -1.0 / b
        } else {
            0.0
        }
    });
    grad
}

/// Pushes a gradient w.r.t. softmax outputs back to the logits.
///
/// For each row with output `p` and upstream gradient `g`, the result is
/// `p * (g - <g, p>)`, which is the product with the softmax Jacobian
/// `diag(p) - p p^T` written without forming the matrix.
pub fn softmax_backward(pred: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    assert_eq!(pred.dim(), grad_out.dim(), "softmax_backward shape mismatch");
    let mut grad = Array2::zeros(pred.dim());
    for ((mut gz, p), g) in grad
        .rows_mut()
        .into_iter()
        .zip(pred.rows())
        .zip(grad_out.rows())
    {
        let dot = g.dot(&p);
        for ((gz_j, &p_j), &g_j) in gz.iter_mut().zip(p.iter()).zip(g.iter()) {
            *gz_j = p_j * (g_j - dot);
        }
    }
    grad
}

/// Backward pass: converts `dL/dpred` into gradients for every tensor.
pub fn backward(trace: &ForwardTrace, params: &MlpParams, grad_pred: &Array2<f64>) -> MlpGrads {
    let grad_logits = softmax_backward(&trace.pred, grad_pred);
    let grad_w2 = trace.hidden_act.t().dot(&grad_logits);
    let grad_b2 = grad_logits.sum_axis(Axis(0));
    let grad_hidden = grad_logits.dot(&params.w2.t());
    let sig_deriv = &trace.hidden_act * &trace.hidden_act.mapv(|s| 1.0 - s);
    let grad_pre = &grad_hidden * &sig_deriv;
    let grad_w1 = trace.inputs.t().dot(&grad_pre);
    let grad_b1 = grad_pre.sum_axis(Axis(0));
    MlpGrads {
        w1: grad_w1,
        b1: grad_b1,
        w2: grad_w2,
        b2: grad_b2,
    }
}

/// AdamW with decoupled weight decay.
///
/// Per update: `m = b1*m + (1-b1)*g`, `v = b2*v + (1-b2)*g^2`, bias-corrected
/// `mh = m/(1-b1^t)`, `vh = v/(1-b2^t)`, then
/// `theta -= lr*mh/(sqrt(vh)+eps) + lr*wd*theta`. The decay term uses the
/// pre-update parameter value and is applied to every tensor.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Optimizer with the usual defaults: `beta1 = 0.9`, `beta2 = 0.999`,
    /// `eps = 1e-8`, `weight_decay = 0.01`.
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn update_count(&self) -> u64 {
        self.t
    }

    /// Applies one update to a list of flat tensors. Moment buffers are
    /// allocated on the first call; the tensor list must keep the same
    /// lengths and order on every call.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "tensor/gradient count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "tensor count changed between steps");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            assert_eq!(p.len(), g.len(), "tensor/gradient length mismatch");
            assert_eq!(self.m[slot].len(), p.len(), "tensor length changed between steps");
            for i in 0..p.len() {
                self.m[slot][i] = self.beta1 * self.m[slot][i] + (1.0 - self.beta1) * g[i];
                self.v[slot][i] = self.beta2 * self.v[slot][i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = self.m[slot][i] / bc1;
                let vh = self.v[slot][i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps) + self.lr * self.weight_decay * p[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn softmax_matches_hand_computed_values() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(p[0], 0.09003057317038046, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.24472847105479767, epsilon = 1e-12);
        assert_abs_diff_eq!(p[2], 0.66524095577482190, epsilon = 1e-12);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[1001.0, 1002.0, 1003.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_survives_large_magnitudes() {
        let p = softmax(&[700.0, -700.0, 0.0]);
        assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_output_layer_predicts_uniform_rows() {
        let mut params = init_params(5, 8, 4, 7);
        params.w2.fill(0.0);
        params.b2.fill(0.0);
        let x = array![[0.3, -0.2, 0.9, 0.0, 1.4], [1.0, 1.0, -1.0, 0.5, 0.2]];
        let trace = forward(&params, &x);
        for row in trace.pred.rows() {
            for &p in row {
                assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn l1_loss_single_row() {
        let pred = array![[0.2, 0.8]];
        let target = array![[0.3, 0.7]];
        assert_abs_diff_eq!(l1_loss(&pred, &target), 0.2, epsilon = 1e-15);
        let grad = l1_loss_grad(&pred, &target);
        assert_eq!(grad, array![[-1.0, 1.0]]);
    }

    #[test]
    fn l1_loss_grad_is_zero_on_ties() {
        let pred = array![[0.5, 0.5]];
        let grad = l1_loss_grad(&pred, &pred.clone());
        assert_eq!(grad, array![[0.0, 0.0]]);
    }

    #[test]
    fn l1_loss_averages_over_batch() {
        let pred = array![[0.2, 0.8], [0.6, 0.4]];
        let target = array![[0.3, 0.7], [0.5, 0.5]];
        // rows contribute 0.2 and 0.2; mean over the two rows
        assert_abs_diff_eq!(l1_loss(&pred, &target), 0.2, epsilon = 1e-15);
        let grad = l1_loss_grad(&pred, &target);
        assert_eq!(grad, array![[-0.5, 0.5], [0.5, -0.5]]);
    }

    #[test]
    fn init_params_respects_bounds_and_seeding() {
        let a = init_params(9, 16, 4, 42);
        let b = init_params(9, 16, 4, 42);
        let c = init_params(9, 16, 4, 43);
        assert_eq!(a.w1, b.w1);
        assert_eq!(a.w2, b.w2);
        assert_ne!(a.w1, c.w1);
        let bound1 = 1.0 / 3.0;
        assert!(a.w1.iter().all(|w| w.abs() <= bound1));
        let bound2 = 1.0 / 4.0;
        assert!(a.w2.iter().all(|w| w.abs() <= bound2));
        assert!(a.b1.iter().all(|b| *b == 0.0));
        assert!(a.b2.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z = array![[0.4, -1.2, 0.7, 0.1]];
        let g = array![[0.3, -0.8, 0.5, 0.9]];
        let pred = row_softmax(z.clone());
        let analytic = softmax_backward(&pred, &g);
        let step = 1e-6;
        for j in 0..4 {
            let mut zp = z.clone();
            zp[[0, j]] += step;
            let mut zm = z.clone();
            zm[[0, j]] -= step;
            let fp: f64 = row_softmax(zp).row(0).dot(&g.row(0));
            let fm: f64 = row_softmax(zm).row(0).dot(&g.row(0));
            let fd = (fp - fm) / (2.0 * step);
            assert_abs_diff_eq!(analytic[[0, j]], fd, epsilon = 1e-8);
        }
    }

    // Full-network gradient check for the plain L1 objective. Targets are
    // pushed away from the predictions so no residual sits near the kink of
    // |.| during the finite-difference probes.
    #[test]
    fn backward_matches_finite_differences() {
        let n = 5;
        let h = 8;
        let t = 4;
        let x = {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            uniform_matrix(3, n, 1.0, &mut rng)
        };
        let target = array![
            [0.7, 0.1, 0.1, 0.1],
            [0.05, 0.85, 0.05, 0.05],
            [0.1, 0.1, 0.05, 0.75]
        ];
        let params = init_params(n, h, t, 3);
        let trace = forward(&params, &x);
        let min_resid = trace
            .pred
            .iter()
            .zip(target.iter())
            .map(|(p, y)| (p - y).abs())
            .fold(f64::INFINITY, f64::min);
        assert!(min_resid > 1e-3, "fixture residuals sit too close to the kink");

        let analytic = backward(&trace, &params, &l1_loss_grad(&trace.pred, &target));
        let step = 1e-5;
        let mut flat = params.clone();
        let loss_at = |p: &MlpParams| l1_loss(&forward(p, &x).pred, &target);
        let mut max_rel: f64 = 0.0;
        {
            let tensors = flat.tensors_mut();
            let grads = analytic.tensors();
            for (slot, grad) in grads.iter().enumerate() {
                for i in 0..grad.len() {
                    let orig = tensors[slot][i];
                    tensors[slot][i] = orig + step;
                    let fp = {
                        let p = reconstruct(&tensors, n, h, t);
                        loss_at(&p)
                    };
                    tensors[slot][i] = orig - step;
                    let fm = {
                        let p = reconstruct(&tensors, n, h, t);
                        loss_at(&p)
                    };
                    tensors[slot][i] = orig;
                    let fd = (fp - fm) / (2.0 * step);
                    let a = grad[i];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    max_rel = max_rel.max(rel);
                }
            }
        }
        assert!(max_rel < 1e-6, "max relative error {max_rel}");
    }

    fn reconstruct(tensors: &[&mut [f64]; 4], n: usize, h: usize, t: usize) -> MlpParams {
        MlpParams {
            w1: Array2::from_shape_vec((n, h), tensors[0].to_vec()).unwrap(),
            b1: Array1::from_vec(tensors[1].to_vec()),
            w2: Array2::from_shape_vec((h, t), tensors[2].to_vec()).unwrap(),
            b2: Array1::from_vec(tensors[3].to_vec()),
        }
    }

    // Scalar oracle evaluated straight from the published recurrences.
    #[test]
    fn adamw_matches_scalar_recurrence() {
        let lr = 0.0005;
        let grads_per_step = [1.0, 0.5, 0.25];
        let mut opt = AdamW::new(lr);
        let mut theta = [1.0f64];

        let (beta1, beta2, eps, wd) = (0.9, 0.999, 1e-8, 0.01);
        let mut expected = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (k, &g) in grads_per_step.iter().enumerate() {
            let mut slices: [&mut [f64]; 1] = [&mut theta];
            opt.step(&mut slices, &[&[g]]);

            let t = (k + 1) as i32;
            m = beta1 * m + (1.0 - beta1) * g;
            v = beta2 * v + (1.0 - beta2) * g * g;
            let mh = m / (1.0 - beta1.powi(t));
            let vh = v / (1.0 - beta2.powi(t));
            expected -= lr * mh / (vh.sqrt() + eps) + lr * wd * expected;
            assert_abs_diff_eq!(theta[0], expected, epsilon = 1e-15);
        }
        // First step lands at 1 - lr/(1+eps) - lr*wd.
        let mut opt1 = AdamW::new(lr);
        let mut w = [1.0f64];
        let mut slices: [&mut [f64]; 1] = [&mut w];
        opt1.step(&mut slices, &[&[1.0]]);
        assert_abs_diff_eq!(w[0], 0.999495000005, epsilon = 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let params = init_params(7, 16, 5, 99);
        let json = serde_json::to_string(&params.to_doc()).unwrap();
        let doc: MlpDoc = serde_json::from_str(&json).unwrap();
        let back = MlpParams::from_doc(&doc).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn checkpoint_rejects_inconsistent_shapes() {
        let params = init_params(7, 16, 5, 99);
        let mut doc = params.to_doc();
        doc.b2.shape = vec![4];
        doc.b2.data.truncate(4);
        assert!(MlpParams::from_doc(&doc).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let p = softmax(&v);
            prop_assert!(p.iter().all(|x| *x > 0.0 && *x <= 1.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn l1_loss_is_nonnegative_and_bounded(
            a in proptest::collection::vec(0.0f64..1.0, 6),
            b in proptest::collection::vec(0.0f64..1.0, 6),
        ) {
            let pa = Array2::from_shape_vec((2, 3), a).unwrap();
            let pb = Array2::from_shape_vec((2, 3), b).unwrap();
            let loss = l1_loss(&pa, &pb);
            prop_assert!(loss >= 0.0);
            prop_assert!(loss <= 3.0);
            prop_assert!((l1_loss(&pa, &pa) - 0.0).abs() < 1e-15);
        }
    }
}
