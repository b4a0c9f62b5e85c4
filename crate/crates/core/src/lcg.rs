//! Label correlation grid: a noisy, repeated view of the label covariance.
//!
//! The grid stacks `l` copies of a `t x t` covariance matrix and perturbs
//! every cell with independent Gaussian noise of fixed variance, via the
//! reparameterization `cell = cov[i][j] + sqrt(sigma2) * eps`. The training
//! loss compares a grid built from the covariance of the predicted label
//! rows against one built from the training-label covariance, cell by cell
//! with the absolute difference, and the gradient flows through the
//! predicted covariance back to the predictions.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A materialized grid together with the covariance it was built from.
#[derive(Debug, Clone)]
pub struct LabelCorrelationGrid {
    pub grid: Array3<f64>,
    pub source_cov: Array2<f64>,
    pub sigma2: f64,
}

impl LabelCorrelationGrid {
    /// Grid depth (number of noisy copies per covariance cell).
    pub fn depth(&self) -> usize {
        self.grid.dim().2
    }
}

/// One pair of noise tensors, one for the prediction grid and one for the
/// target grid, resampled every training step.
#[derive(Debug, Clone)]
pub struct NoiseDraws {
    pub pred: Array3<f64>,
    pub target: Array3<f64>,
}

impl NoiseDraws {
    /// Draws the prediction noise block first, then the target block, both
    /// row-major, from the caller's stream.
    pub fn sample_pair(t: usize, l: usize, rng: &mut ChaCha8Rng) -> Self {
        NoiseDraws {
            pred: sample_noise(t, l, rng),
            target: sample_noise(t, l, rng),
        }
    }
}

/// A `t x t x l` tensor of standard normal draws in row-major order.
pub fn sample_noise(t: usize, l: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let data: Vec<f64> = (0..t * t * l).map(|_| rng.sample(StandardNormal)).collect();
    Array3::from_shape_vec((t, t, l), data).expect("shape matches data length")
}

/// Sample covariance of the label rows: columns are centered and the outer
/// product is normalized by `m - 1`.
pub fn covariance(labels: &Array2<f64>) -> Array2<f64> {
    let m = labels.nrows();
    assert!(m >= 2, "covariance needs at least 2 rows");
    let means = labels.mean_axis(Axis(0)).expect("at least one row");
    let centered = labels - &means;
    centered.t().dot(&centered) / (m as f64 - 1.0)
}

/// Materializes a grid from a covariance matrix with fresh seeded noise.
/// Rejects matrices that are asymmetric beyond `1e-6`.
pub fn build_grid(
    cov: &Array2<f64>,
    l: usize,
    sigma2: f64,
    seed: u64,
) -> Result<LabelCorrelationGrid> {
    let t = cov.nrows();
    if cov.ncols() != t {
        return Err(Error::Numerical("covariance matrix is not square".into()));
    }
    for i in 0..t {
        for j in 0..i {
            if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-6 {
                return Err(Error::Numerical(format!(
                    "covariance is asymmetric at ({i}, {j})"
                )));
            }
        }
    }
    if l == 0 {
        return Err(Error::Config("grid depth must be positive".into()));
    }
    if !sigma2.is_finite() || sigma2 < 0.0 {
        return Err(Error::Config(format!("grid noise variance {sigma2} is invalid")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = sample_noise(t, l, &mut rng);
    let s = sigma2.sqrt();
    let mut grid = Array3::zeros((t, t, l));
    for i in 0..t {
        for j in 0..t {
            for k in 0..l {
                grid[[i, j, k]] = cov[[i, j]] + s * eps[[i, j, k]];
            }
        }
    }
    Ok(LabelCorrelationGrid {
        grid,
        source_cov: cov.clone(),
        sigma2,
    })
}

/// Mean absolute cell difference between the grid of the predicted labels'
/// covariance and the grid of the target covariance, under the given noise.
pub fn lcg_loss(
    pred_labels: &Array2<f64>,
    target_cov: &Array2<f64>,
    sigma2: f64,
    draws: &NoiseDraws,
) -> f64 {
    let (t, _, l) = check_dims(pred_labels, target_cov, draws);
    let c_pred = covariance(pred_labels);
    let s = sigma2.sqrt();
    let mut sum = 0.0;
    for i in 0..t {
        for j in 0..t {
            let base = c_pred[[i, j]] - target_cov[[i, j]];
            for k in 0..l {
                sum += (base + s * (draws.pred[[i, j, k]] - draws.target[[i, j, k]])).abs();
            }
        }
    }
    sum / (t * t * l) as f64
}

/// Gradient of [`lcg_loss`] with respect to the predicted label rows.
///
/// With `G[i][j] = mean_k sign(grid difference)`, the chain rule through
/// the sample covariance gives `Yc (G + G^T) / (b - 1)` for the centered
/// predictions `Yc`; centering contributes nothing extra because the
/// columns of `Yc` already sum to zero.
pub fn lcg_loss_backward(
    pred_labels: &Array2<f64>,
    target_cov: &Array2<f64>,
    sigma2: f64,
    draws: &NoiseDraws,
) -> Array2<f64> {
    let (t, _, l) = check_dims(pred_labels, target_cov, draws);
    let b = pred_labels.nrows();
    assert!(b >= 2, "gradient needs at least 2 rows");
    let c_pred = covariance(pred_labels);
    let s = sigma2.sqrt();
    let cells = (t * t * l) as f64;
    let mut g = Array2::zeros((t, t));
    for i in 0..t {
        for j in 0..t {
            let base = c_pred[[i, j]] - target_cov[[i, j]];
            let mut acc = 0.0;
            for k in 0..l {
                let d = base + s * (draws.pred[[i, j, k]] - draws.target[[i, j, k]]);
                acc += if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
            g[[i, j]] = acc / cells;
        }
    }
    let means = pred_labels.mean_axis(Axis(0)).expect("at least one row");
    let centered = pred_labels - &means;
    let sym = &g + &g.t();
    centered.dot(&sym) / (b as f64 - 1.0)
}

fn check_dims(
    pred_labels: &Array2<f64>,
    target_cov: &Array2<f64>,
    draws: &NoiseDraws,
) -> (usize, usize, usize) {
    let t = pred_labels.ncols();
    assert_eq!(target_cov.dim(), (t, t), "target covariance shape mismatch");
    assert_eq!(draws.pred.dim().0, t, "noise tensor shape mismatch");
    assert_eq!(draws.pred.dim(), draws.target.dim(), "noise pair shape mismatch");
    (t, t, draws.pred.dim().2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn covariance_of_two_complementary_rows() {
        let labels = array![[0.0, 1.0], [1.0, 0.0]];
        let cov = covariance(&labels);
        let expected = array![[0.5, -0.5], [-0.5, 0.5]];
        for (a, b) in cov.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn covariance_matches_naive_double_loop() {
        let labels = crate::data::synth_dataset(13, 3, 5, 8).unwrap().labels().clone();
        let cov = covariance(&labels);
        let m = labels.nrows();
        let t = labels.ncols();
        let means: Vec<f64> = (0..t).map(|j| labels.column(j).sum() / m as f64).collect();
        for i in 0..t {
            for j in 0..t {
                let mut acc = 0.0;
                for r in 0..m {
                    acc += (labels[[r, i]] - means[i]) * (labels[[r, j]] - means[j]);
                }
                acc /= (m - 1) as f64;
                assert_abs_diff_eq!(cov[[i, j]], acc, epsilon = 1e-12);
                assert_abs_diff_eq!(cov[[i, j]], cov[[j, i]], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn covariance_of_constant_columns_is_zero() {
        let labels = array![[0.3, 0.7], [0.3, 0.7], [0.3, 0.7]];
        let cov = covariance(&labels);
        assert!(cov.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn covariance_is_positive_semidefinite_in_quadratic_probes() {
        let labels = crate::data::synth_dataset(30, 4, 6, 15).unwrap().labels().clone();
        let cov = covariance(&labels);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let z: Vec<f64> = (0..6).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            let mut quad = 0.0;
            for i in 0..6 {
                for j in 0..6 {
                    quad += z[i] * cov[[i, j]] * z[j];
                }
            }
            assert!(quad >= -1e-12, "z^T C z = {quad}");
        }
    }

    #[test]
    fn build_grid_without_noise_repeats_the_covariance() {
        let cov = array![[0.5, -0.5], [-0.5, 0.5]];
        let grid = build_grid(&cov, 4, 0.0, 3).unwrap();
        assert_eq!(grid.depth(), 4);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..4 {
                    assert_eq!(grid.grid[[i, j, k]], cov[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn build_grid_is_seeded_and_rejects_asymmetry() {
        let cov = array![[0.5, -0.5], [-0.5, 0.5]];
        let a = build_grid(&cov, 8, 0.5, 3).unwrap();
        let b = build_grid(&cov, 8, 0.5, 3).unwrap();
        let c = build_grid(&cov, 8, 0.5, 4).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_ne!(a.grid, c.grid);

        let bad = array![[0.5, 0.1], [-0.1, 0.5]];
        assert!(build_grid(&bad, 8, 0.5, 3).is_err());
        assert!(build_grid(&cov, 0, 0.5, 3).is_err());
        assert!(build_grid(&cov, 8, -1.0, 3).is_err());
    }

    #[test]
    fn grid_cell_means_concentrate_around_the_covariance() {
        let cov = array![[0.4, -0.2], [-0.2, 0.3]];
        let l = 5000;
        let sigma2 = 0.5;
        let grid = build_grid(&cov, l, sigma2, 123).unwrap();
        let bound = 4.0 * (sigma2 / l as f64).sqrt();
        for i in 0..2 {
            for j in 0..2 {
                let mean: f64 = (0..l).map(|k| grid.grid[[i, j, k]]).sum::<f64>() / l as f64;
                assert!(
                    (mean - cov[[i, j]]).abs() < bound,
                    "cell ({i}, {j}) mean {mean} strays from {}",
                    cov[[i, j]]
                );
            }
        }
    }

    #[test]
    fn zero_variance_loss_equals_mean_absolute_covariance_gap() {
        let pred = crate::data::synth_dataset(12, 3, 4, 30).unwrap().labels().clone();
        let target = crate::data::synth_dataset(12, 3, 4, 31).unwrap().labels().clone();
        let target_cov = covariance(&target);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = NoiseDraws::sample_pair(4, 3, &mut rng);
        let loss = lcg_loss(&pred, &target_cov, 0.0, &draws);

        let c_pred = covariance(&pred);
        let mut expected = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                expected += (c_pred[[i, j]] - target_cov[[i, j]]).abs();
            }
        }
        expected /= 16.0;
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn identical_grids_give_zero_loss() {
        let pred = crate::data::synth_dataset(10, 3, 3, 5).unwrap().labels().clone();
        let target_cov = covariance(&pred);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps = sample_noise(3, 6, &mut rng);
        let draws = NoiseDraws {
            pred: eps.clone(),
            target: eps,
        };
        assert_abs_diff_eq!(lcg_loss(&pred, &target_cov, 0.5, &draws), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let b = 4;
        let t = 3;
        let l = 3;
        let pred = crate::data::synth_dataset(b, 2, t, 40).unwrap().labels().clone();
        let target = crate::data::synth_dataset(b, 2, t, 41).unwrap().labels().clone();
        let target_cov = covariance(&target);
        let sigma2 = 0.5f64;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = NoiseDraws::sample_pair(t, l, &mut rng);

        // keep all |grid difference| cells away from the kink of |.|
        let c_pred = covariance(&pred);
        let s = sigma2.sqrt();
        let mut min_cell = f64::INFINITY;
        for i in 0..t {
            for j in 0..t {
                for k in 0..l {
                    let d = c_pred[[i, j]] - target_cov[[i, j]]
                        + s * (draws.pred[[i, j, k]] - draws.target[[i, j, k]]);
                    min_cell = min_cell.min(d.abs());
                }
            }
        }
        assert!(min_cell > 1e-3, "fixture cells sit too close to the kink");

        let analytic = lcg_loss_backward(&pred, &target_cov, sigma2, &draws);
        let step = 1e-5;
        let mut max_rel: f64 = 0.0;
        for r in 0..b {
            for c in 0..t {
                let mut plus = pred.clone();
                plus[[r, c]] += step;
                let mut minus = pred.clone();
                minus[[r, c]] -= step;
                let fd = (lcg_loss(&plus, &target_cov, sigma2, &draws)
                    - lcg_loss(&minus, &target_cov, sigma2, &draws))
                    / (2.0 * step);
                let a = analytic[[r, c]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-6, "max relative error {max_rel}");
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative(seed in 0u64..200, sigma2 in 0.0f64..1.0) {
            let pred = crate::data::synth_dataset(6, 2, 3, seed).unwrap().labels().clone();
            let target = crate::data::synth_dataset(6, 2, 3, seed + 1000).unwrap().labels().clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draws = NoiseDraws::sample_pair(3, 4, &mut rng);
            prop_assert!(lcg_loss(&pred, &covariance(&target), sigma2, &draws) >= 0.0);
        }
    }
}
