//! Datasets of (feature vector, label distribution) pairs.
//!
//! A dataset holds an `m x n` feature matrix and an `m x t` label matrix in
//! which every row is a probability distribution over the `t` labels. The
//! on-disk format is a plain CSV file with header `f0..f{n-1},l0..l{t-1}`.
//! This module also builds repeated k-fold partitions, perturbs labels with
//! Gaussian noise, and generates a synthetic dataset for experiments.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::net::row_softmax;

/// Row sums may drift this far from 1 before a dataset is rejected outright.
const ROW_SUM_HARD_TOL: f64 = 1e-3;
/// Row sums within this tolerance are accepted as-is.
const ROW_SUM_SOFT_TOL: f64 = 1e-6;

/// An in-memory dataset. Construction validates the label invariants, so a
/// `Dataset` always carries well-formed distribution rows.
#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    features: Array2<f64>,
    labels: Array2<f64>,
}

impl Dataset {
    /// Builds a dataset after checking shapes, finiteness, label ranges and
    /// label row sums (tolerance `1e-6`).
    pub fn new(
        name: impl Into<String>,
        features: Array2<f64>,
        labels: Array2<f64>,
    ) -> Result<Self> {
        if features.nrows() != labels.nrows() {
            return Err(Error::Data(format!(
                "feature rows ({}) and label rows ({}) differ",
                features.nrows(),
                labels.nrows()
            )));
        }
        if features.nrows() < 2 {
            return Err(Error::Data("a dataset needs at least 2 instances".into()));
        }
        if features.ncols() < 1 {
            return Err(Error::Data("a dataset needs at least 1 feature".into()));
        }
        if labels.ncols() < 2 {
            return Err(Error::Data("a dataset needs at least 2 labels".into()));
        }
        if let Some(bad) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite feature value at row {}",
                bad / features.ncols() + 1
            )));
        }
        validate_label_rows(&labels, ROW_SUM_SOFT_TOL)?;
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Array2<f64> {
        &self.labels
    }

    /// Instance count.
    pub fn m(&self) -> usize {
        self.features.nrows()
    }

    /// Feature count.
    pub fn n(&self) -> usize {
        self.features.ncols()
    }

    /// Label count.
    pub fn t(&self) -> usize {
        self.labels.ncols()
    }

    /// Same instances with a replacement label matrix, revalidated.
    pub fn with_labels(&self, labels: Array2<f64>) -> Result<Dataset> {
        if labels.dim() != self.labels.dim() {
            return Err(Error::Data("replacement labels have a different shape".into()));
        }
        validate_label_rows(&labels, ROW_SUM_SOFT_TOL)?;
        Ok(Dataset {
            name: self.name.clone(),
            features: self.features.clone(),
            labels,
        })
    }

    /// Row subset in the given index order. Rows of a valid dataset stay
    /// valid, so no revalidation happens; unlike [`Dataset::new`] this
    /// permits single-row subsets, which occur as tiny test folds.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select(Axis(0), indices),
            labels: self.labels.select(Axis(0), indices),
        }
    }
}

fn validate_label_rows(labels: &Array2<f64>, sum_tol: f64) -> Result<()> {
    for (r, row) in labels.rows().into_iter().enumerate() {
        let mut sum = 0.0;
        for &v in row {
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite label value in row {}", r + 1)));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!(
                    "label value {v} in row {} is outside [0, 1]",
                    r + 1
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > sum_tol {
            return Err(Error::Data(format!(
                "label row {} sums to {sum}, not 1",
                r + 1
            )));
        }
    }
    Ok(())
}

/// Reads a dataset from CSV. The header must be `f0..f{n-1},l0..l{t-1}`.
/// Label rows whose sum drifts from 1 by more than `1e-6` but at most
/// `1e-3` are renormalized; larger deviations are rejected.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let (n, t) = parse_header(&headers)?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != n + t {
            return Err(Error::Data(format!(
                "row {} has {} cells, expected {}",
                idx + 1,
                record.len(),
                n + t
            )));
        }
        for (c, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!("row {}, column {}: cannot parse {cell:?}", idx + 1, c + 1))
            })?;
            if !value.is_finite() {
                return Err(Error::Data(format!(
                    "row {}, column {}: non-finite value",
                    idx + 1,
                    c + 1
                )));
            }
            if c < n {
                features.push(value);
            } else {
                labels.push(value);
            }
        }
        rows += 1;
    }

    let features = Array2::from_shape_vec((rows, n), features)
        .map_err(|e| Error::Data(format!("bad feature block: {e}")))?;
    let mut labels = Array2::from_shape_vec((rows, t), labels)
        .map_err(|e| Error::Data(format!("bad label block: {e}")))?;

    for (r, mut row) in labels.rows_mut().into_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() <= ROW_SUM_SOFT_TOL {
            continue;
        }
        if (sum - 1.0).abs() <= ROW_SUM_HARD_TOL {
            row.mapv_inplace(|v| v / sum);
        } else {
            return Err(Error::Data(format!(
                "label row {} sums to {sum}, outside the renormalization tolerance",
                r + 1
            )));
        }
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Dataset::new(name, features, labels)
}

fn parse_header(headers: &csv::StringRecord) -> Result<(usize, usize)> {
    let mut n = 0usize;
    let mut t = 0usize;
    for (i, name) in headers.iter().enumerate() {
        let name = name.trim();
        if t == 0 {
            if name == format!("f{n}") {
                n += 1;
                continue;
            }
        }
        if name == format!("l{t}") {
            t += 1;
        } else {
            return Err(Error::Data(format!(
                "unexpected header column {} ({name:?}); expected f0..f{{n-1}},l0..l{{t-1}}",
                i + 1
            )));
        }
    }
    if n == 0 {
        return Err(Error::Data("header declares no feature columns".into()));
    }
    if t < 2 {
        return Err(Error::Data("header declares fewer than 2 label columns".into()));
    }
    Ok((n, t))
}

/// Writes a dataset as CSV with the standard header. Values print in the
/// shortest form that parses back to the same float, so a save/load pair
/// reproduces the matrices exactly.
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let header: Vec<String> = (0..dataset.n())
        .map(|i| format!("f{i}"))
        .chain((0..dataset.t()).map(|i| format!("l{i}")))
        .collect();
    writer.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(dataset.n() + dataset.t());
    for r in 0..dataset.m() {
        record.clear();
        record.extend(dataset.features.row(r).iter().map(|v| v.to_string()));
        record.extend(dataset.labels.row(r).iter().map(|v| v.to_string()));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Test-set assignments for repeated k-fold cross-validation.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    m: usize,
    assignments: Vec<Vec<Vec<usize>>>,
}

impl FoldPlan {
    pub fn repeats(&self) -> usize {
        self.assignments.len()
    }

    pub fn folds(&self) -> usize {
        self.assignments[0].len()
    }

    pub fn test_indices(&self, repeat: usize, fold: usize) -> &[usize] {
        &self.assignments[repeat][fold]
    }

    /// Training and test index lists for one (repeat, fold) pair. The
    /// training list concatenates the other folds of the same repeat.
    pub fn train_test(&self, repeat: usize, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let test = self.assignments[repeat][fold].clone();
        let mut train = Vec::with_capacity(self.m - test.len());
        for (f, block) in self.assignments[repeat].iter().enumerate() {
            if f != fold {
                train.extend_from_slice(block);
            }
        }
        (train, test)
    }
}

/// Partitions `0..m` into `folds` disjoint test sets, `repeats` times, each
/// repeat from a fresh shuffle. Fold sizes differ by at most one; when
/// `m % folds != 0` the first `m % folds` folds receive the extra row.
pub fn make_fold_plan(m: usize, repeats: usize, folds: usize, seed: u64) -> Result<FoldPlan> {
    if folds < 2 {
        return Err(Error::Config("fold count must be at least 2".into()));
    }
    if folds > m {
        return Err(Error::Config(format!(
            "cannot split {m} instances into {folds} folds"
        )));
    }
    if repeats < 1 {
        return Err(Error::Config("repeat count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = m / folds;
    let extra = m % folds;
    let mut assignments = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let mut folds_here = Vec::with_capacity(folds);
        let mut cursor = 0usize;
        for f in 0..folds {
            let size = base + usize::from(f < extra);
            folds_here.push(order[cursor..cursor + size].to_vec());
            cursor += size;
        }
        assignments.push(folds_here);
    }
    Ok(FoldPlan { m, assignments })
}

/// Adds i.i.d. Gaussian noise of the given variance to every label entry
/// (drawn row-major from a ChaCha stream), then maps each row back to a
/// distribution with the softmax.
pub fn inject_gaussian_noise(labels: &Array2<f64>, variance: f64, seed: u64) -> Result<Array2<f64>> {
    if !variance.is_finite() || variance < 0.0 {
        return Err(Error::Config(format!("noise variance {variance} is invalid")));
    }
    let std = variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = labels.clone();
    for v in noisy.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += std * z;
    }
    Ok(row_softmax(noisy))
}

/// Generates a synthetic dataset: features uniform in `[-1, 1]`, labels
/// `softmax(X G)` for a mixing matrix `G` with uniform `[-1, 1]` entries.
/// `X` is drawn row-major first, then `G`, from one seeded stream.
pub fn synth_dataset(m: usize, n: usize, t: usize, seed: u64) -> Result<Dataset> {
    if m < 2 || n < 1 || t < 2 {
        return Err(Error::Config(format!(
            "synthetic dataset shape {m}x{n}x{t} is too small"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |count: usize| -> Vec<f64> {
        (0..count).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect()
    };
    let features = Array2::from_shape_vec((m, n), draw(m * n)).expect("shape matches");
    let mixing = Array2::from_shape_vec((n, t), draw(n * t)).expect("shape matches");
    let labels = row_softmax(features.dot(&mixing));
    Dataset::new(format!("synth-{m}x{n}x{t}-seed{seed}"), features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use std::io::Write;

    fn tiny() -> Dataset {
        Dataset::new(
            "tiny",
            array![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]],
            array![[0.25, 0.75], [0.5, 0.5], [1.0, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn new_rejects_bad_shapes_and_rows() {
        let feats = array![[0.0, 1.0], [1.0, 0.0]];
        assert!(Dataset::new("x", feats.clone(), array![[0.5, 0.5]]).is_err());
        assert!(Dataset::new("x", feats.clone(), array![[0.5, 0.5], [0.4, 0.4]]).is_err());
        assert!(Dataset::new("x", feats.clone(), array![[0.5, 0.5], [-0.1, 1.1]]).is_err());
        assert!(Dataset::new("x", feats.clone(), array![[0.5, 0.5], [f64::NAN, 1.0]]).is_err());
        // sum off by 2e-6 exceeds the constructor tolerance
        assert!(Dataset::new("x", feats.clone(), array![[0.5, 0.500002], [0.5, 0.5]]).is_err());
        // single instance and single label are both rejected
        assert!(Dataset::new("x", array![[1.0]], array![[0.5, 0.5]]).is_err());
        assert!(Dataset::new("x", feats, array![[1.0], [1.0]]).is_err());
    }

    #[test]
    fn csv_roundtrip_reproduces_matrices_exactly() {
        let ds = synth_dataset(25, 4, 3, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(ds.features(), back.features());
        assert_eq!(ds.labels(), back.labels());
        assert_eq!(back.name(), "ds");
    }

    #[test]
    fn load_renormalizes_mild_drift_and_rejects_large_drift() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.csv");
        let mut f = std::fs::File::create(&ok).unwrap();
        writeln!(f, "f0,l0,l1").unwrap();
        writeln!(f, "0.5,0.2501,0.7504").unwrap(); // sums to 1.0005
        writeln!(f, "1.5,0.5,0.5").unwrap();
        drop(f);
        let ds = load_csv(&ok).unwrap();
        let row = ds.labels().row(0);
        assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(row[0], 0.2501 / 1.0005, epsilon = 1e-15);

        let bad = dir.path().join("bad.csv");
        let mut f = std::fs::File::create(&bad).unwrap();
        writeln!(f, "f0,l0,l1").unwrap();
        writeln!(f, "0.5,0.4,0.4").unwrap(); // sums to 0.8
        writeln!(f, "1.5,0.5,0.5").unwrap();
        drop(f);
        let err = load_csv(&bad).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn load_rejects_malformed_headers_and_cells() {
        let dir = tempfile::tempdir().unwrap();
        for (name, header, row) in [
            ("h1.csv", "f0,f1,x0,l0", "1,2,3,4"),
            ("h2.csv", "l0,l1,f0", "0.5,0.5,1"),
            ("h3.csv", "f0,l0", "1,1"),
            ("h4.csv", "f0,f2,l0,l1", "1,2,0.5,0.5"),
        ] {
            let path = dir.path().join(name);
            let mut f = std::fs::File::create(&path).unwrap();
            writeln!(f, "{header}").unwrap();
            writeln!(f, "{row}").unwrap();
            drop(f);
            assert!(load_csv(&path).is_err(), "{name} should be rejected");
        }

        let path = dir.path().join("cell.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "f0,l0,l1").unwrap();
        writeln!(f, "abc,0.5,0.5").unwrap();
        drop(f);
        let err = load_csv(&path).unwrap_err();
        assert!(err.to_string().contains("column 1"));
    }

    #[test]
    fn loads_a_gene_expression_scale_file() {
        let ds = synth_dataset(17892, 36, 68, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.csv");
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!((back.m(), back.n(), back.t()), (17892, 36, 68));
        assert_eq!(ds.labels(), back.labels());
    }

    #[test]
    fn subset_preserves_row_order() {
        let ds = tiny();
        let sub = ds.subset(&[2, 0]);
        assert_eq!(sub.features().row(0), ds.features().row(2));
        assert_eq!(sub.features().row(1), ds.features().row(0));
        assert_eq!(sub.labels().row(0), ds.labels().row(2));
    }

    #[test]
    fn fold_plan_partitions_each_repeat() {
        let plan = make_fold_plan(7, 3, 3, 11).unwrap();
        assert_eq!(plan.repeats(), 3);
        assert_eq!(plan.folds(), 3);
        for r in 0..3 {
            let sizes: Vec<usize> = (0..3).map(|f| plan.test_indices(r, f).len()).collect();
            assert_eq!(sizes, vec![3, 2, 2]);
            let mut seen: Vec<usize> = (0..3).flat_map(|f| plan.test_indices(r, f).to_vec()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
        // repeats are different shuffles (with overwhelming probability)
        assert_ne!(plan.test_indices(0, 0), plan.test_indices(1, 0));
        // train/test are complementary
        let (train, test) = plan.train_test(1, 2);
        let mut all: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn fold_plan_is_deterministic_and_matches_paper_scale() {
        let a = make_fold_plan(7755, 10, 5, 3).unwrap();
        let b = make_fold_plan(7755, 10, 5, 3).unwrap();
        for r in 0..10 {
            for f in 0..5 {
                assert_eq!(a.test_indices(r, f), b.test_indices(r, f));
                assert_eq!(a.test_indices(r, f).len(), 1551);
            }
        }
    }

    #[test]
    fn fold_plan_rejects_bad_counts() {
        assert!(make_fold_plan(3, 1, 5, 0).is_err());
        assert!(make_fold_plan(10, 1, 1, 0).is_err());
        assert!(make_fold_plan(10, 0, 2, 0).is_err());
    }

    #[test]
    fn noise_matches_a_direct_reimplementation() {
        let ds = tiny();
        let variance = 1.0;
        let seed = 21;
        let noisy = inject_gaussian_noise(ds.labels(), variance, seed).unwrap();

        // oracle: identical stream, scalar softmax written out longhand
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (r, row) in ds.labels().rows().into_iter().enumerate() {
            let shifted: Vec<f64> = row
                .iter()
                .map(|&v| {
                    let z: f64 = rng.sample(StandardNormal);
                    v + variance.sqrt() * z
                })
                .collect();
            let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = shifted.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (c, e) in exps.iter().enumerate() {
                assert_abs_diff_eq!(noisy[[r, c]], e / sum, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_variance_noise_is_softmax_of_labels() {
        let ds = tiny();
        let noisy = inject_gaussian_noise(ds.labels(), 0.0, 4).unwrap();
        let expected = row_softmax(ds.labels().clone());
        assert_abs_diff_eq!(
            noisy.iter().zip(expected.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
            0.0,
            epsilon = 1e-15
        );
        assert!(inject_gaussian_noise(ds.labels(), -0.5, 4).is_err());
    }

    #[test]
    fn synth_dataset_is_deterministic_and_valid() {
        let a = synth_dataset(40, 6, 5, 77).unwrap();
        let b = synth_dataset(40, 6, 5, 77).unwrap();
        let c = synth_dataset(40, 6, 5, 78).unwrap();
        assert_eq!(a.features(), b.features());
        assert_eq!(a.labels(), b.labels());
        assert_ne!(a.features(), c.features());
        assert!(a.features().iter().all(|x| (-1.0..=1.0).contains(x)));
        for row in a.labels().rows() {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn fold_plan_sizes_differ_by_at_most_one(
            m in 4usize..60,
            folds in 2usize..5,
            seed in 0u64..1000,
        ) {
            prop_assume!(folds <= m);
            let plan = make_fold_plan(m, 2, folds, seed).unwrap();
            for r in 0..2 {
                let sizes: Vec<usize> = (0..folds).map(|f| plan.test_indices(r, f).len()).collect();
                let min = *sizes.iter().min().unwrap();
                let max = *sizes.iter().max().unwrap();
                prop_assert!(max - min <= 1);
                prop_assert_eq!(sizes.iter().sum::<usize>(), m);
            }
        }

        #[test]
        fn noisy_labels_are_distribution_rows(variance in 0.0f64..2.0, seed in 0u64..500) {
            let ds = synth_dataset(8, 3, 4, 1).unwrap();
            let noisy = inject_gaussian_noise(ds.labels(), variance, seed).unwrap();
            for row in noisy.rows() {
                prop_assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
