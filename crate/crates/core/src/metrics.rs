//! Evaluation metrics and the key-value metrics report.

use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Mean squared difference of two equal-length sequences.
pub fn mse(predicted: &[f64], observed: &[f64]) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(Error::Dimension(format!(
            "mse inputs have lengths {} and {}",
            predicted.len(),
            observed.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Dimension("mse needs at least one entry".into()));
    }
    let sum: f64 = predicted.iter().zip(observed).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / predicted.len() as f64)
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnSummary {
    pub mean: f64,
    pub sd: f64,
    /// Accuracy of each repeated fold assignment.
    pub repeats: Vec<f64>,
}

/// Fold index of each of `n` items: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

fn squared_distance(x: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    (0..x.ncols()).map(|k| (x[(a, k)] - x[(b, k)]).powi(2)).sum()
}

/// Accuracy of 1-nearest-neighbour prediction under a fold assignment.
/// Ties go to the lowest training index.
pub fn knn_fold_accuracy(x: &DMatrix<f64>, labels: &[i64], fold: &[usize]) -> f64 {
    let n = x.nrows();
    let mut correct = 0usize;
    for i in 0..n {
        let mut best = f64::INFINITY;
        let mut label = None;
        for t in 0..n {
            if fold[t] == fold[i] {
                continue;
            }
            let d = squared_distance(x, i, t);
            if d < best {
                best = d;
                label = Some(labels[t]);
            }
        }
        if label == Some(labels[i]) {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// 1-NN accuracy with `folds`-fold cross validation, repeated over
/// `repeats` seeded fold assignments.
pub fn knn_accuracy(x: &DMatrix<f64>, labels: &[i64], folds: usize, repeats: usize, seed: u64) -> Result<KnnSummary> {
    if labels.len() != x.nrows() {
        return Err(Error::Dimension(format!("{} labels for {} rows", labels.len(), x.nrows())));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data("KNN accuracy needs at least two classes".into()));
    }
    if folds < 2 || x.nrows() < folds || repeats == 0 {
        return Err(Error::Config(format!("cannot run {folds}-fold CV on {} rows", x.nrows())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let accs: Vec<f64> = (0..repeats)
        .map(|_| {
            let fold = fold_assignment(x.nrows(), folds, &mut rng);
            knn_fold_accuracy(x, labels, &fold)
        })
        .collect();
    let (mean, sd) = mean_sd(&accs);
    Ok(KnnSummary { mean, sd, repeats: accs })
}

fn distance_matrix(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in (a + 1)..n {
            let v = squared_distance(x, a, b).sqrt();
            d[(a, b)] = v;
            d[(b, a)] = v;
        }
    }
    d
}

/// ‖D̂/‖D̂‖ − D/‖D‖‖_F for the pairwise Euclidean distance matrices.
pub fn distance_matrix_error(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.nrows() != truth.nrows() {
        return Err(Error::Dimension(format!("{} rows vs {} rows", estimate.nrows(), truth.nrows())));
    }
    let normalize = |x: &DMatrix<f64>| {
        let d = distance_matrix(x);
        let norm = d.norm();
        if norm > 0.0 {
            d / norm
        } else {
            d
        }
    };
    Ok((normalize(estimate) - normalize(truth)).norm())
}

/// Self-describing metrics, rendered as `key = value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub mse: Option<f64>,
    pub knn_accuracy: Option<KnnSummary>,
    pub distance_matrix_error: Option<f64>,
    pub wall_time_seconds: Option<f64>,
    /// Additional entries in insertion order.
    pub extra: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn push(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        self.extra.push((key.into(), value.to_string()));
    }

    pub fn validate(&self) -> Result<()> {
        let mut values = vec![self.mse, self.distance_matrix_error, self.wall_time_seconds];
        if let Some(k) = &self.knn_accuracy {
            values.push(Some(k.mean));
            values.push(Some(k.sd));
        }
        if values.into_iter().flatten().any(|v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::Data("metrics must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(v) = self.mse {
            writeln!(f, "mse = {v}")?;
        }
        if let Some(k) = &self.knn_accuracy {
            writeln!(f, "knn_accuracy_mean = {}", k.mean)?;
            writeln!(f, "knn_accuracy_sd = {}", k.sd)?;
        }
        if let Some(v) = self.distance_matrix_error {
            writeln!(f, "distance_matrix_error = {v}")?;
        }
        if let Some(v) = self.wall_time_seconds {
            writeln!(f, "wall_time_seconds = {v}")?;
        }
        for (k, v) in &self.extra {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Parse `key = value` lines, skipping blanks and `#` comments.
pub fn parse_report(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, l)| {
            l.split_once(" = ")
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Data(format!("line {}: expected `key = value`", n + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(mse(&[3.0, 0.0, 1.0], &[1.0, 0.5, 1.0]).unwrap(), mse(&[1.0, 0.0, 3.0], &[1.0, 0.5, 1.0]).unwrap());
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn separated_clouds_are_perfectly_classified() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(40, 2, |i, _| if i < 20 { 0.0 } else { 10.0 } + rng.random::<f64>());
        let labels: Vec<i64> = (0..40).map(|i| (i >= 20) as i64).collect();
        let s = knn_accuracy(&x, &labels, 5, 5, 3).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.sd, 0.0);
    }

    #[test]
    fn permuted_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(400, 2, |_, _| rng.random::<f64>());
        let mut labels: Vec<i64> = (0..400).map(|i| (i % 2) as i64).collect();
        labels.shuffle(&mut rng);
        let s = knn_accuracy(&x, &labels, 5, 5, 4).unwrap();
        // binomial sd of a 400-point accuracy is 0.025
        assert!((s.mean - 0.5).abs() < 0.075, "{}", s.mean);
    }

    #[test]
    fn matches_brute_force_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(30, 3, |_, _| rng.random::<f64>());
        let labels: Vec<i64> = (0..30).map(|_| rng.random_range(0..3)).collect();
        let fold = fold_assignment(30, 5, &mut rng);
        // oracle: sort every candidate by (distance, index) and read the first label
        let mut correct = 0;
        for i in 0..30 {
            let mut cands: Vec<(f64, usize)> = (0..30)
                .filter(|&t| fold[t] != fold[i])
                .map(|t| ((x.row(i) - x.row(t)).norm(), t))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if labels[cands[0].1] == labels[i] {
                correct += 1;
            }
        }
        assert_eq!(knn_fold_accuracy(&x, &labels, &fold), correct as f64 / 30.0);
    }

    #[test]
    fn folds_are_seeded_disjoint_and_exhaustive() {
        let a = fold_assignment(23, 5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = fold_assignment(23, 5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let mut sizes = [0; 5];
        for &f in &a {
            sizes[f] += 1;
        }
        assert_eq!(sizes.iter().sum::<usize>(), 23);
        assert!(sizes.iter().all(|&s| s == 4 || s == 5));
    }

    #[test]
    fn single_class_is_an_error() {
        let x = DMatrix::zeros(10, 2);
        assert!(knn_accuracy(&x, &[1; 10], 5, 5, 0).is_err());
    }

    #[test]
    fn distance_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(50, 2, |_, _| rng.random::<f64>());
        assert_eq!(distance_matrix_error(&x, &x).unwrap(), 0.0);
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let mut moved = &x * rot * 4.5;
        for mut row in moved.row_iter_mut() {
            row[0] += 2.0;
            row[1] -= 7.0;
        }
        assert!(distance_matrix_error(&moved, &x).unwrap() < 1e-10);
        assert!(distance_matrix_error(&x, &DMatrix::zeros(49, 2)).is_err());
    }

    #[test]
    fn report_round_trips_through_text() {
        let mut r = MetricsReport {
            mse: Some(0.25),
            knn_accuracy: Some(KnnSummary { mean: 0.9, sd: 0.01, repeats: vec![] }),
            ..Default::default()
        };
        r.push("seed", 3);
        r.validate().unwrap();
        let parsed = parse_report(&r.to_string()).unwrap();
        assert_eq!(parsed[0], ("mse".into(), "0.25".into()));
        assert_eq!(parsed.last().unwrap(), &("seed".into(), "3".into()));
        r.mse = Some(-1.0);
        assert!(r.validate().is_err());
    }

    fn rotation(angles: &[f64], dim: usize) -> DMatrix<f64> {
        // product of Givens rotations in every coordinate plane
        let mut q = DMatrix::identity(dim, dim);
        let mut k = 0;
        for a in 0..dim {
            for b in (a + 1)..dim {
                let mut g = DMatrix::identity(dim, dim);
                let (c, s) = (angles[k].cos(), angles[k].sin());
                g[(a, a)] = c;
                g[(b, b)] = c;
                g[(a, b)] = -s;
                g[(b, a)] = s;
                q = q * g;
                k += 1;
            }
        }
        q
    }

    proptest! {
        #[test]
        fn distance_error_is_rotation_invariant(
            seed in 0u64..1000,
            angles in proptest::collection::vec(-3.2f64..3.2, 3),
            reflect in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(20, 3, |_, _| rng.random::<f64>());
            let b = DMatrix::from_fn(20, 3, |_, _| rng.random::<f64>());
            let mut q = rotation(&angles, 3);
            if reflect {
                q.column_mut(0).neg_mut();
            }
            let base = distance_matrix_error(&a, &b).unwrap();
            let ra = distance_matrix_error(&(&a * &q), &b).unwrap();
            let rb = distance_matrix_error(&a, &(&b * &q)).unwrap();
            prop_assert!((ra - base).abs() < 1e-12);
            prop_assert!((rb - base).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_sd_matches_hand_computation() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let v = DVector::from_vec(vec![2.0]);
        assert_eq!(mean_sd(v.as_slice()), (2.0, 0.0));
    }
}
