//! Classification metrics: thresholded confusion counts, Mann-Whitney AUC
//! with midranks, F1-optimal threshold search, and subgroup bias summary via
//! a generalized power mean.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("probabilities and labels have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("no subgroup has a defined AUC for setting {0}")]
    NoValidSubgroups(&'static str),
    #[error("no subgroup annotations present")]
    NoSubgroups,
}

fn check_inputs(probs: &[f64], labels: &[u8]) -> Result<(), MetricsError> {
    if probs.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(MetricsError::Empty);
    }
    for &p in probs {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(MetricsError::BadProbability(p));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Counts with the decision rule p >= threshold.
pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion, MetricsError> {
    check_inputs(probs, labels)?;
    let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&p, &y) in probs.iter().zip(labels) {
        let pred = p >= threshold;
        match (pred, y) {
            (true, 1) => c.tp += 1,
            (true, 0) => c.fp += 1,
            (false, 0) => c.tn += 1,
            (false, 1) => c.fn_ += 1,
            _ => unreachable!("labels are validated binary"),
        }
    }
    Ok(c)
}

impl Confusion {
    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.fn_;
        (self.tp + self.tn) as f64 / n as f64
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Mann-Whitney AUC with midranks for ties. `None` when only one class is
/// present, so callers surface absence instead of a fake 0.
pub fn roc_auc(probs: &[f64], labels: &[u8]) -> Result<Option<f64>, MetricsError> {
    check_inputs(probs, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap());
    let mut ranks = vec![0.0f64; probs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie block shares the midrank
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(&r, _)| r)
        .sum();
    let auc = (rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0)
        / (n_pos as f64 * n_neg as f64);
    Ok(Some(auc))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub threshold: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc_auc: Option<f64>,
    pub confusion: Confusion,
}

pub fn metrics_report(
    probs: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<MetricsReport, MetricsError> {
    let c = confusion(probs, labels, threshold)?;
    Ok(MetricsReport {
        n: labels.len(),
        threshold,
        accuracy: c.accuracy(),
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        roc_auc: roc_auc(probs, labels)?,
        confusion: c,
    })
}

/// F1-optimal threshold over the grid {0.01, 0.02, ..., 0.99}. Ties prefer
/// the threshold closest to 0.5, then the smaller one.
pub fn select_threshold(probs: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    check_inputs(probs, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(MetricsError::SingleClass);
    }
    let mut best = (f64::NEG_INFINITY, f64::INFINITY, f64::NAN);
    for i in 1..=99 {
        let theta = i as f64 / 100.0;
        let f1 = confusion(probs, labels, theta)?.f1();
        let dist = (theta - 0.5).abs();
        let better = f1 > best.0
            || (f1 == best.0 && dist < best.1)
            || (f1 == best.0 && dist == best.1 && theta < best.2);
        if better {
            best = (f1, dist, theta);
        }
    }
    Ok(best.2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupAucs {
    pub name: String,
    pub n_tagged: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subgroup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bpsn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bnsp: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    pub per_subgroup: Vec<SubgroupAucs>,
    pub gmb_sub: f64,
    pub gmb_bpsn: f64,
    pub gmb_bnsp: f64,
    pub power: f64,
    pub warnings: Vec<String>,
}

/// Power-mean exponent for the bias aggregates; strongly negative so the
/// worst subgroup dominates.
pub const GMB_POWER: f64 = -5.0;

/// Generalized power mean with exponent p < 0; any zero member drives the
/// mean to 0 (the limit value), avoiding a division blow-up.
pub fn power_mean(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty() && p < 0.0);
    if values.iter().any(|&v| v == 0.0) {
        return 0.0;
    }
    let s: f64 = values.iter().map(|&v| v.powf(p)).sum::<f64>() / values.len() as f64;
    s.powf(1.0 / p)
}

fn pool_auc(
    probs: &[f64],
    labels: &[u8],
    keep: impl Fn(usize) -> bool,
) -> Result<Option<f64>, MetricsError> {
    let mut p = Vec::new();
    let mut y = Vec::new();
    for i in 0..probs.len() {
        if keep(i) {
            p.push(probs[i]);
            y.push(labels[i]);
        }
    }
    if p.is_empty() {
        return Ok(None);
    }
    roc_auc(&p, &y)
}

/// Subgroup bias summary. For each tag: AUC within the tagged pool, AUC over
/// background-positive + tagged-negative (BPSN), and background-negative +
/// tagged-positive (BNSP). Undefined pools are excluded with a warning; each
/// setting needs at least one defined subgroup AUC.
pub fn compute_gmb(
    probs: &[f64],
    labels: &[u8],
    subgroups: &[Vec<String>],
    power: f64,
) -> Result<BiasReport, MetricsError> {
    check_inputs(probs, labels)?;
    if subgroups.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(subgroups.len(), labels.len()));
    }
    let names: BTreeSet<&String> = subgroups.iter().flatten().collect();
    if names.is_empty() {
        return Err(MetricsError::NoSubgroups);
    }
    let mut per_subgroup = Vec::new();
    let mut warnings = Vec::new();
    let mut pools: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for name in names {
        let tagged: Vec<bool> = subgroups.iter().map(|tags| tags.contains(name)).collect();
        let sub = pool_auc(probs, labels, |i| tagged[i])?;
        let bpsn = pool_auc(probs, labels, |i| {
            (!tagged[i] && labels[i] == 1) || (tagged[i] && labels[i] == 0)
        })?;
        let bnsp = pool_auc(probs, labels, |i| {
            (!tagged[i] && labels[i] == 0) || (tagged[i] && labels[i] == 1)
        })?;
        for (setting, value) in [("subgroup", sub), ("bpsn", bpsn), ("bnsp", bnsp)] {
            match value {
                Some(v) => match setting {
                    "subgroup" => pools[0].push(v),
                    "bpsn" => pools[1].push(v),
                    _ => pools[2].push(v),
                },
                None => warnings.push(format!("{setting} AUC undefined for subgroup {name}")),
            }
        }
        per_subgroup.push(SubgroupAucs {
            name: name.clone(),
            n_tagged: tagged.iter().filter(|&&t| t).count(),
            subgroup: sub,
            bpsn,
            bnsp,
        });
    }
    let [sub_pool, bpsn_pool, bnsp_pool] = pools;
    if sub_pool.is_empty() {
        return Err(MetricsError::NoValidSubgroups("subgroup"));
    }
    if bpsn_pool.is_empty() {
        return Err(MetricsError::NoValidSubgroups("bpsn"));
    }
    if bnsp_pool.is_empty() {
        return Err(MetricsError::NoValidSubgroups("bnsp"));
    }
    Ok(BiasReport {
        per_subgroup,
        gmb_sub: power_mean(&sub_pool, power),
        gmb_bpsn: power_mean(&bpsn_pool, power),
        gmb_bnsp: power_mean(&bnsp_pool, power),
        power,
        warnings,
    })
}
