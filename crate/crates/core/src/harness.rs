//! Training and experiment orchestration.
//!
//! [`train`] runs mini-batch AdamW over the composite objective
//! `lambda1 * L1 + lambda2 * projection + lambda3 * grid`, resampling the
//! grid noise every step. On top of it sit repeated k-fold
//! cross-validation (fold-parallel via rayon, with results independent of
//! the worker count), the ablation and label-noise experiments, and a
//! central finite-difference gradient checker. Everything is seeded: one
//! master seed expands into per-fold, per-variance and shuffle streams
//! through a splitmix64 chain, so runs repeat bit-for-bit.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{inject_gaussian_noise, make_fold_plan, Dataset};
use crate::error::{Error, Result};
use crate::lcg::{covariance, lcg_loss, lcg_loss_backward, sample_noise, NoiseDraws};
use crate::ldp::{
    init_sub_params, kpca_fit, ldp_loss, ldp_loss_grad, project_targets, sub_mlp_backward,
    sub_mlp_forward, Kernel, KpcaModel, SubMlpDoc, SubMlpParams,
};
use crate::metrics::{aggregate, evaluate_dataset, AggregateReport, MetricsReport};
use crate::net::{
    backward, forward, init_params, l1_loss, l1_loss_grad, AdamW, MlpDoc, MlpParams,
};

/// Reserved stream id for deriving the fold-plan seed.
const STREAM_FOLD_PLAN: u64 = u64::MAX;
/// Reserved stream id for deriving per-variance noise seeds.
const STREAM_NOISE: u64 = u64::MAX - 1;

/// All knobs of one training run. A config file is JSON with these exact
/// field names; omitted fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Mini-batch size.
    pub batch_size: usize,
    /// AdamW learning rate.
    pub lr: f64,
    pub epochs: usize,
    /// Weight of the per-batch L1 term.
    pub lambda1: f64,
    /// Weight of the projection term.
    pub lambda2: f64,
    /// Weight of the grid term.
    pub lambda3: f64,
    /// Hidden width; must be a power of two.
    pub hidden: usize,
    pub enable_lcg: bool,
    /// Grid noise variance.
    pub lcg_sigma2: f64,
    /// Grid depth; defaults to the label count when absent.
    pub lcg_l: Option<usize>,
    /// Resample the target grid's noise every step (the default) instead of
    /// freezing one draw per run.
    pub lcg_resample_target: bool,
    pub enable_ldp: bool,
    /// Projection dimension `p < t`; required when `enable_ldp` is set.
    pub ldp_dim: Option<usize>,
    /// Standardize features to zero mean and unit variance using training
    /// statistics.
    pub standardize_features: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 500,
            lr: 0.0005,
            epochs: 100,
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.05,
            hidden: 256,
            enable_lcg: true,
            lcg_sigma2: 0.5,
            lcg_l: None,
            lcg_resample_target: true,
            enable_ldp: false,
            ldp_dim: None,
            standardize_features: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks the config against a dataset with `t` labels.
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.enable_lcg && self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 when the grid term is enabled".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} is invalid")));
            }
        }
        if self.hidden == 0 || !self.hidden.is_power_of_two() {
            return Err(Error::Config(format!(
                "hidden width {} is not a power of two",
                self.hidden
            )));
        }
        if !self.lcg_sigma2.is_finite() || self.lcg_sigma2 < 0.0 {
            return Err(Error::Config(format!(
                "lcg_sigma2 = {} is invalid",
                self.lcg_sigma2
            )));
        }
        if self.lcg_l == Some(0) {
            return Err(Error::Config("lcg_l must be positive".into()));
        }
        if self.enable_ldp {
            match self.ldp_dim {
                None => {
                    return Err(Error::Config(
                        "enable_ldp requires ldp_dim to be set".into(),
                    ))
                }
                Some(p) if p < 1 || p >= t => {
                    return Err(Error::Config(format!(
                        "ldp_dim must satisfy 1 <= p < t, got p = {p} with t = {t}"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent seed from a master seed, a stream id and an
/// index within the stream, via a splitmix64 chain. Streams `u64::MAX` and
/// `u64::MAX - 1` are reserved internally for the fold plan and the noise
/// experiment; cross-validation uses the repeat number as the stream and
/// the fold number as the index.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let a = splitmix64(master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    splitmix64(a ^ index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Per-feature standardization statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    /// Column means and sample standard deviations; near-constant columns
    /// (std below `1e-12`) divide by 1 instead.
    pub fn fit(features: &Array2<f64>) -> Self {
        let m = features.nrows() as f64;
        let mean: Vec<f64> = features
            .mean_axis(Axis(0))
            .expect("at least one row")
            .to_vec();
        let std: Vec<f64> = (0..features.ncols())
            .map(|j| {
                let mu = mean[j];
                let var = features
                    .column(j)
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>()
                    / (m - 1.0);
                let s = var.sqrt();
                if s < 1e-12 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        FeatureScaler { mean, std }
    }

    pub fn apply(&self, features: &Array2<f64>) -> Array2<f64> {
        assert_eq!(features.ncols(), self.mean.len(), "feature count mismatch");
        let mut out = features.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// Mean per-batch loss terms of one epoch plus its wall-clock time.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub l1: f64,
    pub lcg: f64,
    pub ldp: f64,
    /// Weighted total `lambda1*l1 + lambda2*ldp + lambda3*lcg`.
    pub total: f64,
    pub seconds: f64,
}

/// Loss trajectory of a training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// A trained model: the network, the optional projection head with its
/// kernel PCA model, the optional feature scaler, and the loss history.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub mlp: MlpParams,
    pub sub: Option<SubMlpParams>,
    pub kpca: Option<KpcaModel>,
    pub scaler: Option<FeatureScaler>,
    pub history: TrainHistory,
}

/// Trains on one split.
///
/// The RNG stream is consumed in a fixed order: network init seed, then
/// (only when the projection head is enabled) head init seed, then (only
/// when the grid target noise is frozen) that one noise block, then per
/// epoch one shuffle and per batch one grid noise pair. Disabled terms
/// consume nothing, so e.g. a run with both extras off follows exactly the
/// trajectory of a plain L1 regressor with the same seed.
pub fn train(config: &TrainConfig, train_split: &Dataset) -> Result<TrainedModel> {
    let t = train_split.t();
    let n = train_split.n();
    let m = train_split.m();
    config.validate(t)?;
    if config.enable_lcg && m < 2 {
        return Err(Error::Data(
            "the grid term needs at least 2 training rows".into(),
        ));
    }
    let labels = train_split.labels();

    let scaler = config
        .standardize_features
        .then(|| FeatureScaler::fit(train_split.features()));
    let features = match &scaler {
        Some(s) => s.apply(train_split.features()),
        None => train_split.features().clone(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mlp_seed = rng.next_u64();
    let mut mlp = init_params(n, config.hidden, t, mlp_seed);

    let mut sub: Option<SubMlpParams> = None;
    let mut kpca: Option<KpcaModel> = None;
    let mut ldp_targets: Option<Array2<f64>> = None;
    if config.enable_ldp {
        let p = config.ldp_dim.expect("validated above");
        let sub_seed = rng.next_u64();
        sub = Some(init_sub_params(t, p, sub_seed));
        let model = kpca_fit(labels, p, Kernel::Rbf { gamma: None })?;
        ldp_targets = Some(project_targets(&model, labels));
        kpca = Some(model);
    }

    let lcg_l = config.lcg_l.unwrap_or(t);
    let target_cov = config.enable_lcg.then(|| covariance(labels));
    let mut frozen_target_noise: Option<Array3<f64>> = None;
    if config.enable_lcg && !config.lcg_resample_target {
        frozen_target_noise = Some(sample_noise(t, lcg_l, &mut rng));
    }

    let mut opt_mlp = AdamW::new(config.lr);
    let mut opt_sub = AdamW::new(config.lr);

    let mut history = TrainHistory {
        epochs: Vec::with_capacity(config.epochs),
    };
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for batch_idx in order.chunks(config.batch_size) {
            // a stray single-row batch cannot feed the covariance
            if config.enable_lcg && batch_idx.len() < 2 {
                continue;
            }
            let xb = features.select(Axis(0), batch_idx);
            let yb = labels.select(Axis(0), batch_idx);
            let trace = forward(&mlp, &xb);

            let l1 = l1_loss(&trace.pred, &yb);
            let mut grad_pred = l1_loss_grad(&trace.pred, &yb);
            grad_pred *= config.lambda1;

            let mut lcg_val = 0.0;
            if let Some(cov) = &target_cov {
                let draws = if config.lcg_resample_target {
                    NoiseDraws::sample_pair(t, lcg_l, &mut rng)
                } else {
                    NoiseDraws {
                        pred: sample_noise(t, lcg_l, &mut rng),
                        target: frozen_target_noise.clone().expect("frozen above"),
                    }
                };
                lcg_val = lcg_loss(&trace.pred, cov, config.lcg_sigma2, &draws);
                let g = lcg_loss_backward(&trace.pred, cov, config.lcg_sigma2, &draws);
                grad_pred.scaled_add(config.lambda3, &g);
            }

            let mut ldp_val = 0.0;
            let mut sub_grads = None;
            if let (Some(head), Some(targets)) = (&sub, &ldp_targets) {
                let tb = targets.select(Axis(0), batch_idx);
                let low = sub_mlp_forward(head, &trace.pred);
                ldp_val = ldp_loss(&low, &tb);
                let mut grad_low = ldp_loss_grad(&low, &tb);
                grad_low *= config.lambda2;
                let (g_pred, grads) = sub_mlp_backward(&trace.pred, head, &grad_low);
                grad_pred += &g_pred;
                sub_grads = Some(grads);
            }

            let total =
                config.lambda1 * l1 + config.lambda2 * ldp_val + config.lambda3 * lcg_val;
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss in epoch {epoch}, batch {batches}"
                )));
            }

            let grads = backward(&trace, &mlp, &grad_pred);
            opt_mlp.step(&mut mlp.tensors_mut(), &grads.tensors());
            if let (Some(head), Some(grads)) = (&mut sub, sub_grads) {
                opt_sub.step(&mut head.tensors_mut(), &grads.tensors());
            }

            sums[0] += l1;
            sums[1] += lcg_val;
            sums[2] += ldp_val;
            sums[3] += total;
            batches += 1;
        }
        debug_assert!(batches > 0);
        let denom = batches as f64;
        history.epochs.push(EpochStats {
            l1: sums[0] / denom,
            lcg: sums[1] / denom,
            ldp: sums[2] / denom,
            total: sums[3] / denom,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainedModel {
        mlp,
        sub,
        kpca,
        scaler,
        history,
    })
}

/// Evaluates a model on a split, applying the model's feature scaler when
/// one was fitted.
pub fn evaluate(model: &TrainedModel, split: &Dataset) -> MetricsReport {
    let features = match &model.scaler {
        Some(s) => s.apply(split.features()),
        None => split.features().clone(),
    };
    let trace = forward(&model.mlp, &features);
    evaluate_dataset(split.labels(), &trace.pred)
}

/// Metrics of one (repeat, fold) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub repeat: usize,
    pub fold: usize,
    pub metrics: MetricsReport,
}

/// All fold reports of a cross-validation run plus their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub fold_reports: Vec<FoldReport>,
    pub aggregate: AggregateReport,
}

/// Repeated k-fold cross-validation.
///
/// Folds run in parallel on the current rayon pool; reports come back in
/// (repeat, fold) order regardless of scheduling, and every fold trains
/// from its own derived seed, so the outcome does not depend on the worker
/// count.
pub fn cross_validate(
    config: &TrainConfig,
    dataset: &Dataset,
    repeats: usize,
    folds: usize,
) -> Result<CvResult> {
    cross_validate_with(config, dataset, dataset, repeats, folds)
}

/// Cross-validation with distinct training and evaluation label sources.
///
/// Both datasets must describe the same instances (same shapes, row for
/// row); folds are cut once and applied to both. The label-noise
/// experiment trains on perturbed labels while scoring against clean ones
/// through this entry point.
pub fn cross_validate_with(
    config: &TrainConfig,
    train_source: &Dataset,
    eval_source: &Dataset,
    repeats: usize,
    folds: usize,
) -> Result<CvResult> {
    if train_source.m() != eval_source.m()
        || train_source.n() != eval_source.n()
        || train_source.t() != eval_source.t()
    {
        return Err(Error::Config(
            "training and evaluation datasets have different shapes".into(),
        ));
    }
    config.validate(train_source.t())?;
    let plan = make_fold_plan(
        train_source.m(),
        repeats,
        folds,
        derive_seed(config.seed, STREAM_FOLD_PLAN, 0),
    )?;

    let pairs: Vec<(usize, usize)> = (0..repeats)
        .flat_map(|r| (0..folds).map(move |f| (r, f)))
        .collect();
    let fold_reports: Vec<FoldReport> = pairs
        .par_iter()
        .map(|&(repeat, fold)| -> Result<FoldReport> {
            let (train_idx, test_idx) = plan.train_test(repeat, fold);
            let train_split = train_source.subset(&train_idx);
            let test_split = eval_source.subset(&test_idx);
            let mut fold_config = config.clone();
            fold_config.seed = derive_seed(config.seed, repeat as u64, fold as u64);
            let model = train(&fold_config, &train_split)?;
            Ok(FoldReport {
                repeat,
                fold,
                metrics: evaluate(&model, &test_split),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let reports: Vec<MetricsReport> = fold_reports.iter().map(|f| f.metrics).collect();
    Ok(CvResult {
        fold_reports,
        aggregate: aggregate(&reports)?,
    })
}

/// Cross-validation of the full objective against the two single-term
/// removals, all on identical fold plans and per-fold seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub full: CvResult,
    pub without_lcg: CvResult,
    pub without_ldp: CvResult,
}

/// Runs the ablation: the configured objective, the same without the grid
/// term, and the same without the projection term. The master seed is
/// shared, so all three see identical partitions and initializations.
pub fn ablation(
    config: &TrainConfig,
    dataset: &Dataset,
    repeats: usize,
    folds: usize,
) -> Result<AblationResult> {
    let full = cross_validate(config, dataset, repeats, folds)?;
    let mut no_grid = config.clone();
    no_grid.enable_lcg = false;
    let without_lcg = cross_validate(&no_grid, dataset, repeats, folds)?;
    let mut no_proj = config.clone();
    no_proj.enable_ldp = false;
    let without_ldp = cross_validate(&no_proj, dataset, repeats, folds)?;
    Ok(AblationResult {
        full,
        without_lcg,
        without_ldp,
    })
}

/// Cross-validation outcome at one noise variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseRun {
    pub variance: f64,
    pub result: CvResult,
}

/// The default variance sweep `0.1, 0.2, ..., 1.0`.
pub fn default_noise_variances() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// Label-noise experiment: perturbs the labels at each variance (fresh
/// derived seed per variance) and cross-validates. With `train_only` the
/// perturbed labels are used for training while evaluation stays on the
/// clean ones; otherwise both sides see the noisy labels.
pub fn noise_experiment(
    config: &TrainConfig,
    dataset: &Dataset,
    variances: &[f64],
    train_only: bool,
    repeats: usize,
    folds: usize,
) -> Result<Vec<NoiseRun>> {
    if variances.is_empty() {
        return Err(Error::Config("no noise variances given".into()));
    }
    let mut runs = Vec::with_capacity(variances.len());
    for (i, &variance) in variances.iter().enumerate() {
        let noisy_labels = inject_gaussian_noise(
            dataset.labels(),
            variance,
            derive_seed(config.seed, STREAM_NOISE, i as u64),
        )?;
        let noisy = dataset.with_labels(noisy_labels)?;
        let result = if train_only {
            cross_validate_with(config, &noisy, dataset, repeats, folds)?
        } else {
            cross_validate(config, &noisy, repeats, folds)?
        };
        runs.push(NoiseRun { variance, result });
    }
    Ok(runs)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FdCheck {
    /// Largest relative error over the checked coordinates, with the
    /// relative error defined as `|a - fd| / max(|a|, |fd|, 1e-6)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a probe moved a residual too close to a
    /// kink of the absolute value.
    pub excluded: usize,
}

/// Central finite differences over a flat parameter vector.
///
/// `eval` returns the loss and a kink margin: the smallest magnitude among
/// the residuals that pass through an absolute value inside the loss. A
/// coordinate is excluded when either probe's margin drops below
/// `kink_tol`, since the two-sided difference straddles a nondifferentiable
/// point there.
pub fn fd_check(
    theta: &mut [f64],
    analytic: &[f64],
    step: f64,
    kink_tol: f64,
    mut eval: impl FnMut(&[f64]) -> (f64, f64),
) -> FdCheck {
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    let mut excluded = 0usize;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        let (f_plus, margin_plus) = eval(theta);
        theta[i] = orig - step;
        let (f_minus, margin_minus) = eval(theta);
        theta[i] = orig;
        if margin_plus < kink_tol || margin_minus < kink_tol {
            excluded += 1;
            continue;
        }
        let fd = (f_plus - f_minus) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    FdCheck {
        max_rel_error: max_rel,
        checked,
        excluded,
    }
}

/// Checks the analytic gradient of the full composite objective on one
/// frozen batch against central finite differences (step `1e-5`).
///
/// The batch is the first `batch_size` rows of `sample`; grid noise is
/// drawn once and reused by every probe. Returns the error summary without
/// judging it, so callers pick their own threshold.
pub fn grad_check(config: &TrainConfig, sample: &Dataset) -> Result<FdCheck> {
    let t = sample.t();
    let n = sample.n();
    config.validate(t)?;
    let b = config.batch_size.min(sample.m());

    let scaler = config
        .standardize_features
        .then(|| FeatureScaler::fit(sample.features()));
    let features = match &scaler {
        Some(s) => s.apply(sample.features()),
        None => sample.features().clone(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mlp = init_params(n, config.hidden, t, rng.next_u64());
    let sub = config
        .enable_ldp
        .then(|| init_sub_params(t, config.ldp_dim.expect("validated above"), rng.next_u64()));

    let lcg_l = config.lcg_l.unwrap_or(t);
    let target_cov = config.enable_lcg.then(|| covariance(sample.labels()));
    let draws = config
        .enable_lcg
        .then(|| NoiseDraws::sample_pair(t, lcg_l, &mut rng));

    let ldp_targets = match (&sub, config.ldp_dim) {
        (Some(_), Some(p)) => {
            let model = kpca_fit(sample.labels(), p, Kernel::Rbf { gamma: None })?;
            Some(project_targets(&model, sample.labels()))
        }
        _ => None,
    };

    let batch: Vec<usize> = (0..b).collect();
    let xb = features.select(Axis(0), &batch);
    let yb = sample.labels().select(Axis(0), &batch);
    let tb = ldp_targets.as_ref().map(|t| t.select(Axis(0), &batch));

    // analytic gradient, assembled exactly like one training step
    let trace = forward(&mlp, &xb);
    let mut grad_pred = l1_loss_grad(&trace.pred, &yb);
    grad_pred *= config.lambda1;
    if let (Some(cov), Some(draws)) = (&target_cov, &draws) {
        let g = lcg_loss_backward(&trace.pred, cov, config.lcg_sigma2, draws);
        grad_pred.scaled_add(config.lambda3, &g);
    }
    let mut sub_grads = None;
    if let (Some(head), Some(tb)) = (&sub, &tb) {
        let low = sub_mlp_forward(head, &trace.pred);
        let mut grad_low = ldp_loss_grad(&low, tb);
        grad_low *= config.lambda2;
        let (g_pred, grads) = sub_mlp_backward(&trace.pred, head, &grad_low);
        grad_pred += &g_pred;
        sub_grads = Some(grads);
    }
    let mlp_grads = backward(&trace, &mlp, &grad_pred);

    let mut analytic: Vec<f64> = Vec::new();
    for tensor in mlp_grads.tensors() {
        analytic.extend_from_slice(tensor);
    }
    if let Some(grads) = &sub_grads {
        for tensor in grads.tensors() {
            analytic.extend_from_slice(tensor);
        }
    }

    let mut theta = flatten_params(&mlp, sub.as_ref());
    let shapes = (n, config.hidden, t, sub.as_ref().map(|s| s.out_dim()));
    let eval = |theta: &[f64]| -> (f64, f64) {
        let (mlp, sub) = unflatten_params(theta, shapes);
        let trace = forward(&mlp, &xb);
        let mut margin = trace
            .pred
            .iter()
            .zip(yb.iter())
            .map(|(p, y)| (p - y).abs())
            .fold(f64::INFINITY, f64::min);
        let mut total = config.lambda1 * l1_loss(&trace.pred, &yb);
        if let (Some(cov), Some(draws)) = (&target_cov, &draws) {
            total += config.lambda3 * lcg_loss(&trace.pred, cov, config.lcg_sigma2, draws);
            margin = margin.min(lcg_cell_margin(&trace.pred, cov, config.lcg_sigma2, draws));
        }
        if let (Some(head), Some(tb)) = (&sub, &tb) {
            let low = sub_mlp_forward(head, &trace.pred);
            total += config.lambda2 * ldp_loss(&low, tb);
            margin = margin.min(
                low.iter()
                    .zip(tb.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(f64::INFINITY, f64::min),
            );
        }
        (total, margin)
    };

    Ok(fd_check(&mut theta, &analytic, 1e-5, 1e-3, eval))
}

/// Smallest absolute grid-cell difference, i.e. the distance of the grid
/// term from its nearest kink.
fn lcg_cell_margin(
    pred: &Array2<f64>,
    target_cov: &Array2<f64>,
    sigma2: f64,
    draws: &NoiseDraws,
) -> f64 {
    let c_pred = covariance(pred);
    let s = sigma2.sqrt();
    let (t, _, l) = draws.pred.dim();
    let mut margin = f64::INFINITY;
    for i in 0..t {
        for j in 0..t {
            let base = c_pred[[i, j]] - target_cov[[i, j]];
            for k in 0..l {
                let cell = base + s * (draws.pred[[i, j, k]] - draws.target[[i, j, k]]);
                margin = margin.min(cell.abs());
            }
        }
    }
    margin
}

fn flatten_params(mlp: &MlpParams, sub: Option<&SubMlpParams>) -> Vec<f64> {
    let mut theta: Vec<f64> = Vec::new();
    theta.extend(mlp.w1.iter());
    theta.extend(mlp.b1.iter());
    theta.extend(mlp.w2.iter());
    theta.extend(mlp.b2.iter());
    if let Some(s) = sub {
        theta.extend(s.w.iter());
        theta.extend(s.b.iter());
    }
    theta
}

fn unflatten_params(
    theta: &[f64],
    (n, h, t, p): (usize, usize, usize, Option<usize>),
) -> (MlpParams, Option<SubMlpParams>) {
    let mut at = 0usize;
    let mut take = |count: usize| {
        let slice = &theta[at..at + count];
        at += count;
        slice.to_vec()
    };
    let mlp = MlpParams {
        w1: Array2::from_shape_vec((n, h), take(n * h)).expect("shape matches"),
        b1: take(h).into(),
        w2: Array2::from_shape_vec((h, t), take(h * t)).expect("shape matches"),
        b2: take(t).into(),
    };
    let sub = p.map(|p| SubMlpParams {
        w: Array2::from_shape_vec((t, p), take(t * p)).expect("shape matches"),
        b: take(p).into(),
    });
    assert_eq!(at, theta.len(), "parameter vector length mismatch");
    (mlp, sub)
}

/// On-disk model format: a versioned JSON document of shape-tagged tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointDoc {
    pub format_version: u32,
    pub mlp: MlpDoc,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sub: Option<SubMlpDoc>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scaler: Option<FeatureScaler>,
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let doc = CheckpointDoc {
        format_version: 1,
        mlp: model.mlp.to_doc(),
        sub: model.sub.as_ref().map(|s| s.to_doc()),
        scaler: model.scaler.clone(),
    };
    let json = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path.as_ref(), json)?;
    Ok(())
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(MlpParams, Option<SubMlpParams>, Option<FeatureScaler>)> {
    let json = std::fs::read_to_string(path.as_ref())?;
    let doc: CheckpointDoc = serde_json::from_str(&json)?;
    if doc.format_version != 1 {
        return Err(Error::Data(format!(
            "unsupported checkpoint format version {}",
            doc.format_version
        )));
    }
    let mlp = MlpParams::from_doc(&doc.mlp)?;
    let sub = doc.sub.as_ref().map(SubMlpParams::from_doc).transpose()?;
    Ok((mlp, sub, doc.scaler))
}

/// Shared header of every results document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub dataset: DatasetInfo,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub repeats: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub folds: Option<usize>,
    /// Unix seconds; omitted entirely when reproducible byte-identical
    /// output is wanted.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timestamp: Option<u64>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub instances: usize,
    pub features: usize,
    pub labels: usize,
}

impl DatasetInfo {
    pub fn describe(dataset: &Dataset) -> Self {
        DatasetInfo {
            name: dataset.name().to_string(),
            instances: dataset.m(),
            features: dataset.n(),
            labels: dataset.t(),
        }
    }
}

/// Renders aggregates as an aligned table: one row per setting, one column
/// per measure, cells as `mean±std` with an arrow marking the better
/// direction.
pub fn format_table(rows: &[(String, AggregateReport)]) -> String {
    use crate::metrics::METRIC_HIGHER_IS_BETTER;

    let headers: Vec<String> = crate::metrics::METRIC_NAMES
        .iter()
        .zip(METRIC_HIGHER_IS_BETTER)
        .map(|(name, higher)| {
            let mut title = name.to_string();
            if *name == "kl" {
                title = "k-l".into();
            }
            // capitalize the first letter
            let mut chars = title.chars();
            let cap: String = chars
                .next()
                .map(|c| c.to_uppercase().chain(chars).collect())
                .unwrap_or_default();
            format!("{cap}{}", if higher { "\u{2191}" } else { "\u{2193}" })
        })
        .collect();

    let mut cells: Vec<Vec<String>> = Vec::with_capacity(rows.len() + 1);
    let mut first_col = vec!["setting".to_string()];
    first_col.extend(rows.iter().map(|(name, _)| name.clone()));
    cells.push(headers.clone());
    for (_, agg) in rows {
        cells.push(
            agg.fields()
                .iter()
                .map(|(_, stats)| format!("{:.4}\u{00b1}{:.4}", stats.mean, stats.std))
                .collect(),
        );
    }

    let name_width = first_col.iter().map(|s| s.chars().count()).max().unwrap_or(0);
    let col_widths: Vec<usize> = (0..6)
        .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();

    let mut out = String::new();
    for (r, row) in cells.iter().enumerate() {
        out.push_str(&format!("{:<name_width$}", first_col[r]));
        for (c, cell) in row.iter().enumerate() {
            let pad = col_widths[c].saturating_sub(cell.chars().count());
            out.push_str("  ");
            out.push_str(cell);
            out.push_str(&" ".repeat(pad));
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    }
    out
}
