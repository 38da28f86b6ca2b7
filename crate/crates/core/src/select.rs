//! Feature selection over the fused representation: mutual-information
//! ranking with equal-frequency binning, or L1-regularized logistic
//! selection via proximal gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMethod {
    Mi,
    L1,
    None,
}

impl std::fmt::Display for SelectMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectMethod::Mi => "mi",
            SelectMethod::L1 => "l1",
            SelectMethod::None => "none",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelectorConfig {
    pub method: SelectMethod,
    /// Number of features kept by MI ranking; `None` means half the input dim.
    pub keep_k: Option<usize>,
    /// Discretization bins for the MI estimator.
    pub bins: usize,
    pub l1_lambda: f64,
    /// |w| threshold for L1 retention.
    pub weight_threshold: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            method: SelectMethod::Mi,
            keep_k: None,
            bins: 10,
            l1_lambda: 1e-3,
            weight_threshold: 1e-4,
        }
    }
}

impl SelectorConfig {
    /// keep_k of `None` means half the input width, at least 1.
    pub fn resolve_keep_k(&self, dim: usize) -> usize {
        self.keep_k.unwrap_or((dim / 2).max(1))
    }

    pub fn validate(&self) -> Result<(), SelectError> {
        if self.bins < 2 {
            return Err(SelectError::BadBins(self.bins));
        }
        if self.keep_k == Some(0) {
            return Err(SelectError::BadKeepK { keep_k: 0, dim: 0 });
        }
        if self.l1_lambda < 0.0 || self.weight_threshold < 0.0 {
            return Err(SelectError::BadMask("negative lambda or threshold".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("bins must be >= 2, got {0}")]
    BadBins(usize),
    #[error("keep_k {keep_k} outside 1..={dim}")]
    BadKeepK { keep_k: usize, dim: usize },
    #[error("selection mask invalid: {0}")]
    BadMask(String),
    #[error("feature matrix is empty or ragged")]
    BadMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelectionMask {
    /// Retained feature indices, strictly increasing.
    pub indices: Vec<usize>,
    /// Score per input feature (MI bits, or |w| for L1), length = input dim.
    pub scores: Vec<f64>,
}

impl SelectionMask {
    pub fn identity(dim: usize) -> Self {
        SelectionMask { indices: (0..dim).collect(), scores: vec![0.0; dim] }
    }

    pub fn validate(&self, dim: usize) -> Result<(), SelectError> {
        if self.indices.is_empty() {
            return Err(SelectError::BadMask("no retained indices".into()));
        }
        for pair in self.indices.windows(2) {
            if pair[0] >= pair[1] {
                return Err(SelectError::BadMask(format!(
                    "indices not strictly increasing at {:?}",
                    pair
                )));
            }
        }
        if *self.indices.last().unwrap() >= dim {
            return Err(SelectError::BadMask(format!(
                "index {} out of range for dim {dim}",
                self.indices.last().unwrap()
            )));
        }
        Ok(())
    }
}

fn check_labels(labels: &[u8]) -> Result<(), SelectError> {
    if labels.len() < 2 {
        return Err(SelectError::TooFewSamples(labels.len()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(SelectError::SingleClass);
    }
    Ok(())
}

/// Equal-frequency bin assignment. Samples are ranked by (value, index); a
/// sample's provisional bin is rank*B/n, and ties on value all share the bin
/// of the first occurrence, so a constant column collapses to one bin.
fn equal_frequency_bins(column: &[f64], bins: usize) -> Vec<usize> {
    let n = column.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        column[a]
            .partial_cmp(&column[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut assignment = vec![0usize; n];
    for (rank, &idx) in order.iter().enumerate() {
        let provisional = rank * bins / n;
        let bin = if rank > 0 && column[idx] == column[order[rank - 1]] {
            assignment[order[rank - 1]]
        } else {
            provisional
        };
        assignment[idx] = bin;
    }
    assignment
}

/// MI between a discretized real column and binary labels, in bits.
pub fn mutual_information(column: &[f64], labels: &[u8], bins: usize) -> Result<f64, SelectError> {
    if column.len() != labels.len() {
        return Err(SelectError::BadMatrix);
    }
    check_labels(labels)?;
    if bins < 2 {
        return Err(SelectError::BadBins(bins));
    }
    let assignment = equal_frequency_bins(column, bins);
    let n = labels.len() as f64;
    let mut joint = vec![[0.0f64; 2]; bins];
    for (&b, &y) in assignment.iter().zip(labels) {
        joint[b][y as usize] += 1.0;
    }
    let mut mi = 0.0;
    for b in 0..bins {
        let pb = (joint[b][0] + joint[b][1]) / n;
        if pb == 0.0 {
            continue;
        }
        for y in 0..2 {
            let pby = joint[b][y] / n;
            if pby == 0.0 {
                continue;
            }
            let py = labels.iter().filter(|&&l| l as usize == y).count() as f64 / n;
            mi += pby * (pby / (pb * py)).log2();
        }
    }
    Ok(mi.max(0.0))
}

/// Top-k columns by MI, ties to the lower index; mask indices ascending.
pub fn select_mi(
    features: &[Vec<f64>],
    labels: &[u8],
    keep_k: usize,
    bins: usize,
) -> Result<SelectionMask, SelectError> {
    let dim = features.first().map(|r| r.len()).ok_or(SelectError::BadMatrix)?;
    if dim == 0 || features.iter().any(|r| r.len() != dim) {
        return Err(SelectError::BadMatrix);
    }
    if keep_k == 0 || keep_k > dim {
        return Err(SelectError::BadKeepK { keep_k, dim });
    }
    let mut scores = Vec::with_capacity(dim);
    for j in 0..dim {
        let column: Vec<f64> = features.iter().map(|r| r[j]).collect();
        scores.push(mutual_information(&column, labels, bins)?);
    }
    let mut ranked: Vec<usize> = (0..dim).collect();
    ranked.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut indices: Vec<usize> = ranked[..keep_k].to_vec();
    indices.sort_unstable();
    Ok(SelectionMask { indices, scores })
}

#[derive(Debug, Clone)]
pub struct L1Outcome {
    pub mask: SelectionMask,
    pub converged: bool,
    pub epochs_run: usize,
}

/// L1-regularized logistic selection (no intercept) on internally
/// standardized columns: proximal gradient with soft-thresholding, fixed 500
/// epochs or proximal-residual norm < 1e-6. Retains |w_i| > threshold.
pub fn select_l1(
    features: &[Vec<f64>],
    labels: &[u8],
    l1_lambda: f64,
    weight_threshold: f64,
) -> Result<L1Outcome, SelectError> {
    let dim = features.first().map(|r| r.len()).ok_or(SelectError::BadMatrix)?;
    if dim == 0 || features.iter().any(|r| r.len() != dim) {
        return Err(SelectError::BadMatrix);
    }
    check_labels(labels)?;
    let n = features.len();
    let nf = n as f64;

    // column standardization (constant columns get unit scale, weight stays 0)
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for j in 0..dim {
        let m: f64 = features.iter().map(|r| r[j]).sum::<f64>() / nf;
        let v: f64 = features.iter().map(|r| (r[j] - m) * (r[j] - m)).sum::<f64>() / nf;
        mean[j] = m;
        std[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
    }
    let x = |i: usize, j: usize| (features[i][j] - mean[j]) / std[j];

    // step size from the Lipschitz bound L <= trace(X^T X)/(4n) = dim/4
    let lr = 4.0 / dim as f64;
    let max_epochs = 500;
    let mut w = vec![0.0f64; dim];
    let mut converged = false;
    let mut epochs_run = max_epochs;
    for epoch in 0..max_epochs {
        let mut grad = vec![0.0f64; dim];
        for i in 0..n {
            let mut z = 0.0;
            for j in 0..dim {
                z += w[j] * x(i, j);
            }
            let err = crate::tensor::sigmoid_scalar(z) - labels[i] as f64;
            for j in 0..dim {
                grad[j] += err * x(i, j);
            }
        }
        for g in grad.iter_mut() {
            *g /= nf;
        }
        let mut residual = 0.0;
        for j in 0..dim {
            let stepped = w[j] - lr * grad[j];
            let thresh = lr * l1_lambda;
            let next = if stepped > thresh {
                stepped - thresh
            } else if stepped < -thresh {
                stepped + thresh
            } else {
                0.0
            };
            residual += (next - w[j]) * (next - w[j]);
            w[j] = next;
        }
        if (residual.sqrt() / lr) < 1e-6 {
            converged = true;
            epochs_run = epoch + 1;
            break;
        }
    }
    let indices: Vec<usize> = (0..dim).filter(|&j| w[j].abs() > weight_threshold).collect();
    let scores = w.iter().map(|v| v.abs()).collect();
    Ok(L1Outcome { mask: SelectionMask { indices, scores }, converged, epochs_run })
}

/// Column gather in mask order.
pub fn apply_mask(features: &[Vec<f64>], mask: &SelectionMask) -> Result<Vec<Vec<f64>>, SelectError> {
    let dim = features.first().map(|r| r.len()).ok_or(SelectError::BadMatrix)?;
    mask.validate(dim)?;
    Ok(features
        .iter()
        .map(|row| mask.indices.iter().map(|&j| row[j]).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Brute-force MI from explicit joint counts over (bin, label) pairs.
    fn mi_oracle(bins_assignment: &[usize], labels: &[u8], bins: usize) -> f64 {
        let n = labels.len() as f64;
        let mut joint = std::collections::HashMap::new();
        for (&b, &y) in bins_assignment.iter().zip(labels) {
            *joint.entry((b, y)).or_insert(0.0) += 1.0;
        }
        let mut mi = 0.0;
        for b in 0..bins {
            for y in 0..2u8 {
                let c = joint.get(&(b, y)).copied().unwrap_or(0.0);
                if c == 0.0 {
                    continue;
                }
                let pby = c / n;
                let pb = bins_assignment.iter().filter(|&&bb| bb == b).count() as f64 / n;
                let py = labels.iter().filter(|&&l| l == y).count() as f64 / n;
                mi += pby * (pby / (pb * py)).log2();
            }
        }
        mi
    }

    #[test]
    fn label_copy_feature_is_one_bit() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let column: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
        let mi = mutual_information(&column, &labels, 2).unwrap();
        assert!((mi - 1.0).abs() < 1e-12, "{mi}");
    }

    #[test]
    fn constant_feature_is_zero_bits() {
        let labels: Vec<u8> = (0..50).map(|i| (i % 2) as u8).collect();
        let column = vec![3.7; 50];
        let mi = mutual_information(&column, &labels, 10).unwrap();
        assert_eq!(mi, 0.0);
    }

    #[test]
    fn independent_feature_is_near_zero() {
        let mut rng = crate::tensor::Prng::seed_from_u64(99);
        let n = 1000;
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let column: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let mi = mutual_information(&column, &labels, 10).unwrap();
        assert!(mi < 0.05, "{mi}");
    }

    #[test]
    fn estimator_matches_brute_force_joint_counts() {
        let mut rng = crate::tensor::Prng::seed_from_u64(7);
        for bins in [2usize, 3, 5, 10] {
            for _ in 0..10 {
                let n = 64;
                let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() > 0.4)).collect();
                if labels.iter().all(|&y| y == 1) || labels.iter().all(|&y| y == 0) {
                    continue;
                }
                // discrete values with heavy ties
                let column: Vec<f64> =
                    (0..n).map(|_| (rng.random::<f64>() * 4.0).floor()).collect();
                let got = mutual_information(&column, &labels, bins).unwrap();
                let assignment = super::equal_frequency_bins(&column, bins);
                let want = mi_oracle(&assignment, &labels, bins);
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn mi_errors_on_degenerate_inputs() {
        assert!(matches!(
            mutual_information(&[1.0, 2.0], &[1, 1], 2),
            Err(SelectError::SingleClass)
        ));
        assert!(matches!(
            mutual_information(&[1.0], &[1], 2),
            Err(SelectError::TooFewSamples(1))
        ));
        assert!(matches!(
            mutual_information(&[1.0, 2.0], &[0, 1], 1),
            Err(SelectError::BadBins(1))
        ));
    }

    fn mk_features(labels: &[u8], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = crate::tensor::Prng::seed_from_u64(seed);
        labels
            .iter()
            .map(|&y| {
                vec![
                    y as f64,                       // label copy
                    rng.random::<f64>(),            // noise
                    0.5,                            // constant
                ]
            })
            .collect()
    }

    #[test]
    fn select_mi_ranks_informative_columns_first() {
        let labels: Vec<u8> = (0..60).map(|i| (i % 2) as u8).collect();
        let features = mk_features(&labels, 3);
        let mask = select_mi(&features, &labels, 1, 5).unwrap();
        assert_eq!(mask.indices, vec![0]);
        assert_eq!(mask.scores.len(), 3);
        assert!(mask.scores[0] > mask.scores[1]);

        let identity = select_mi(&features, &labels, 3, 5).unwrap();
        assert_eq!(identity.indices, vec![0, 1, 2]);

        // identical columns tie, lower index wins
        let dup: Vec<Vec<f64>> = labels.iter().map(|&y| vec![y as f64, y as f64]).collect();
        let mask = select_mi(&dup, &labels, 1, 2).unwrap();
        assert_eq!(mask.indices, vec![0]);
    }

    #[test]
    fn select_mi_is_invariant_to_monotone_transforms() {
        let labels: Vec<u8> = (0..80).map(|i| u8::from(i % 3 == 0)).collect();
        let mut rng = crate::tensor::Prng::seed_from_u64(17);
        let base: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| vec![y as f64 + 0.2 * rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let transformed: Vec<Vec<f64>> = base
            .iter()
            .map(|r| vec![(3.0 * r[0] - 1.0).exp(), r[1]])
            .collect();
        let a = select_mi(&base, &labels, 1, 4).unwrap();
        let b = select_mi(&transformed, &labels, 1, 4).unwrap();
        assert_eq!(a.indices, b.indices);
        assert!((a.scores[0] - b.scores[0]).abs() < 1e-12);
    }

    #[test]
    fn l1_kill_condition_empties_the_mask() {
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let features = mk_features(&labels, 5);
        // gradient of BCE at w=0 on standardized columns is bounded by 0.5
        let out = select_l1(&features, &labels, 0.6, 1e-4).unwrap();
        assert!(out.mask.indices.is_empty());
        assert!(out.converged);
    }

    #[test]
    fn l1_keeps_the_informative_feature_and_kills_the_mirrored_one() {
        // feature 0 separates; feature 1 is an exactly mirrored pair per class,
        // so its BCE gradient stays 0 under symmetric updates
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..16 {
            let noise = 0.5 + 0.1 * (i % 4) as f64;
            features.push(vec![1.0 + 0.01 * i as f64, noise]);
            labels.push(1u8);
            features.push(vec![-1.0 - 0.01 * i as f64, noise]);
            labels.push(0u8);
        }
        let out = select_l1(&features, &labels, 0.0, 1e-4).unwrap();
        assert!(out.mask.indices.contains(&0));
        assert!(!out.mask.indices.contains(&1), "scores {:?}", out.mask.scores);
        assert!(out.mask.scores[1].abs() < 1e-4);
    }

    #[test]
    fn l1_path_is_monotone_in_lambda() {
        let labels: Vec<u8> = (0..60).map(|i| (i % 2) as u8).collect();
        let mut rng = crate::tensor::Prng::seed_from_u64(23);
        let features: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| {
                vec![
                    y as f64 + 0.3 * rng.random::<f64>(),
                    0.7 * y as f64 + 0.6 * rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random::<f64>() * 0.2,
                ]
            })
            .collect();
        let mut last = usize::MAX;
        for lambda in [0.0, 0.01, 0.05, 0.1, 0.3, 0.7] {
            let out = select_l1(&features, &labels, lambda, 1e-4).unwrap();
            assert!(out.mask.indices.len() <= last, "lambda {lambda}");
            last = out.mask.indices.len();
        }
    }

    #[test]
    fn apply_mask_gathers_and_validates() {
        let features = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let mask = SelectionMask { indices: vec![0, 2], scores: vec![0.0; 3] };
        let out = apply_mask(&features, &mask).unwrap();
        assert_eq!(out, vec![vec![1.0, 3.0], vec![4.0, 6.0]]);

        let identity = SelectionMask::identity(3);
        assert_eq!(apply_mask(&features, &identity).unwrap(), features);

        let bad = SelectionMask { indices: vec![2, 0], scores: vec![0.0; 3] };
        assert!(apply_mask(&features, &bad).is_err());
        let oob = SelectionMask { indices: vec![5], scores: vec![0.0; 3] };
        assert!(apply_mask(&features, &oob).is_err());
        let single = SelectionMask { indices: vec![1], scores: vec![0.0; 3] };
        assert_eq!(apply_mask(&features, &single).unwrap(), vec![vec![2.0], vec![5.0]]);
    }

    proptest! {
        #[test]
        fn mi_is_nonnegative_and_tie_consistent(
            vals in proptest::collection::vec(0u8..6, 8..64),
            flip in proptest::collection::vec(proptest::bool::ANY, 64),
        ) {
            let n = vals.len();
            let labels: Vec<u8> = flip.iter().take(n).map(|&b| u8::from(b)).collect();
            prop_assume!(labels.iter().any(|&y| y == 0) && labels.iter().any(|&y| y == 1));
            let column: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            let mi = mutual_information(&column, &labels, 4).unwrap();
            prop_assert!(mi >= 0.0);
            prop_assert!(mi <= 1.0 + 1e-12); // binary labels cap MI at 1 bit
        }
    }
}
