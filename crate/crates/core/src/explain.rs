//! Explainability: integrated-gradients token attribution, corpus-level
//! attribution aggregation, LIME local surrogates, and calibration
//! diagnostics.

use crate::gbls::gbls_core;
use crate::sentiment::{score, SentimentLexicon};
use crate::tensor::{Mode, Prng, Tape, Tensor, TensorError, Var};
use crate::train::{TrainedModel, TrainError};
use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("input: {0}")]
    Input(String),
    #[error("gradients are not finite at path step {0}")]
    NonFinite(usize),
    #[error("degenerate perturbation design: every sampled mask is identical")]
    DegenerateDesign,
    #[error("model: {0}")]
    Model(String),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
}

fn model_err(e: TrainError) -> ExplainError {
    ExplainError::Model(e.to_string())
}

/// Probability of the positive class as a differentiable scalar, starting
/// from an embedding matrix already on the tape. Sentiment scores enter as
/// constants: they are a function of the raw text, not of the embeddings.
pub fn model_probability(
    tape: &mut Tape,
    model: &TrainedModel,
    embeds: Var,
    mask: &[bool],
    sentiment: &[f64],
) -> Result<Var, ExplainError> {
    let bound = model.encoder.bind(tape);
    let mut stats = model.stats.clone();
    let mut rng = Prng::seed_from_u64(0);
    let reduced = crate::encoder::encode_from_embeds(
        tape,
        &bound,
        &model.encoder_config,
        &mut stats,
        &[embeds],
        &[mask.to_vec()],
        Mode::Eval,
        &mut rng,
    )
    .map_err(|e| ExplainError::Model(e.to_string()))?;
    let fused = if model.use_sentiment {
        let s = tape.constant(Tensor::matrix(1, sentiment.len(), sentiment.to_vec())?);
        tape.concat_cols(&[reduced, s])?
    } else {
        reduced
    };
    let k = model.mask.indices.len();
    let selected = tape.gather_pairs(fused, &vec![0; k], &model.mask.indices, 1, k)?;
    let gbound = model.gbls.bind(tape);
    let (logits, _) = gbls_core(
        tape,
        &gbound,
        &model.gbls.config,
        selected,
        Mode::Eval,
        &mut rng,
        false,
    )
    .map_err(|e| ExplainError::Model(e.to_string()))?;
    let prob = tape.sigmoid(logits)?;
    Ok(tape.sum_all(prob)?)
}

/// Midpoint-rule integrated gradients for an arbitrary scalar-valued forward.
/// Returns per-coordinate attributions, the endpoint values, and the
/// completeness gap |sum(attr) - (F(x) - F(baseline))|.
pub fn integrated_gradients<F>(
    mut forward: F,
    x: &Tensor,
    baseline: &Tensor,
    m: usize,
) -> Result<(Vec<f64>, f64, f64, f64), ExplainError>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, ExplainError>,
{
    if m < 2 {
        return Err(ExplainError::Input("integration steps must be >= 2".into()));
    }
    if x.shape() != baseline.shape() {
        return Err(ExplainError::Input("baseline shape differs from input".into()));
    }
    let n = x.numel();
    let diff: Vec<f64> = x.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect();

    let eval_at = |forward: &mut F, data: Vec<f64>| -> Result<(Tape, Var, Var), ExplainError> {
        let point = Tensor::new(x.shape().to_vec(), data)?.with_grad();
        let mut tape = Tape::new();
        let v = tape.leaf(&point);
        let out = forward(&mut tape, v)?;
        if tape.value(out).numel() != 1 {
            return Err(ExplainError::Input("forward must produce a scalar".into()));
        }
        Ok((tape, v, out))
    };

    let mut grad_sum = vec![0.0; n];
    for t in 1..=m {
        let alpha = (t as f64 - 0.5) / m as f64;
        let data: Vec<f64> =
            baseline.data().iter().zip(&diff).map(|(b, d)| b + alpha * d).collect();
        let (mut tape, v, out) = eval_at(&mut forward, data)?;
        tape.backward(out)?;
        let g = tape.grad(v).ok_or(ExplainError::NonFinite(t))?;
        if !g.iter().all(|v| v.is_finite()) {
            return Err(ExplainError::NonFinite(t));
        }
        for (acc, gi) in grad_sum.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    let attributions: Vec<f64> =
        diff.iter().zip(&grad_sum).map(|(d, g)| d * g / m as f64).collect();

    let (tape, _, out) = eval_at(&mut forward, x.data().to_vec())?;
    let fx = tape.value(out).item();
    let (tape, _, out) = eval_at(&mut forward, baseline.data().to_vec())?;
    let f0 = tape.value(out).item();
    let gap = (attributions.iter().sum::<f64>() - (fx - f0)).abs();
    Ok((attributions, fx, f0, gap))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionReport {
    pub tokens: Vec<String>,
    /// Per-token attribution: the token's embedding-row attributions summed.
    pub scores: Vec<f64>,
    pub prediction: f64,
    pub baseline_value: f64,
    pub completeness_gap: f64,
    pub steps: usize,
    pub baseline: String,
}

/// Integrated-gradients attribution of a single text against the
/// zero-embedding baseline (original attention mask retained).
pub fn ig_explain(
    model: &TrainedModel,
    lexicon: &SentimentLexicon,
    text: &str,
    m: usize,
) -> Result<AttributionReport, ExplainError> {
    let ex = model.prepare_text(text).map_err(model_err)?;
    let d = model.encoder_config.d_model;
    let table = model.encoder.embed.data();
    let mut data = Vec::with_capacity(ex.ids.len() * d);
    for &id in &ex.ids {
        data.extend_from_slice(&table[id * d..(id + 1) * d]);
    }
    let x = Tensor::matrix(ex.ids.len(), d, data)?;
    let baseline = Tensor::zeros(vec![ex.ids.len(), d]);
    let sentiment: Vec<f64> = if model.use_sentiment {
        score(&ex.tokens, lexicon).features().to_vec()
    } else {
        Vec::new()
    };

    let (attr, fx, f0, gap) = integrated_gradients(
        |tape, v| model_probability(tape, model, v, &ex.mask, &sentiment),
        &x,
        &baseline,
        m,
    )?;

    let used = ex.mask.iter().filter(|&&b| b).count();
    let scores: Vec<f64> =
        (0..used).map(|row| attr[row * d..(row + 1) * d].iter().sum()).collect();
    let mut tokens = vec!["<cls>".to_string()];
    tokens.extend(ex.tokens.iter().take(used - 1).cloned());
    Ok(AttributionReport {
        tokens,
        scores,
        prediction: fx,
        baseline_value: f0,
        completeness_gap: gap,
        steps: m,
        baseline: "zero embeddings, original mask".into(),
    })
}

/// One attributed corpus text, as consumed by the aggregation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextAttribution {
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub probability: f64,
    pub label: u8,
}

/// Word lists defining the attribution categories.
#[derive(Debug, Clone)]
pub struct CategoryLexicon {
    pub categories: Vec<(String, Vec<String>)>,
}

impl CategoryLexicon {
    pub fn bundled() -> Self {
        let cat = |name: &str, words: &[&str]| {
            (name.to_string(), words.iter().map(|w| w.to_string()).collect::<Vec<_>>())
        };
        CategoryLexicon {
            categories: vec![
                cat(
                    "Explicit Offensive",
                    &[
                        "idiot", "stupid", "dumb", "loser", "trash", "ugly", "pathetic",
                        "worthless", "moron", "disgusting", "hate", "freak",
                    ],
                ),
                cat("Implicit Bias", &["those", "these", "typical", "kind", "sort"]),
                cat(
                    "Context Modifiers",
                    &["so", "really", "very", "totally", "always", "never", "completely"],
                ),
                cat(
                    "Targeting Pronouns",
                    &["you", "your", "yours", "he", "she", "they", "them", "him", "her"],
                ),
                cat(
                    "Negative Sentiment",
                    &[
                        "awful", "horrible", "terrible", "bad", "sad", "angry", "nasty",
                        "gross", "mean", "cruel",
                    ],
                ),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub category: String,
    pub token: String,
    pub avg_attribution: f64,
    pub occurrences: usize,
    pub frequency: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionTable {
    /// Aggregated over every attributed text.
    pub all_texts: Vec<CategoryEntry>,
    /// Aggregated over texts labeled positive and predicted positive.
    pub true_positives: Vec<CategoryEntry>,
}

fn frequency_bucket(count: usize, quartiles: &[usize; 3]) -> &'static str {
    if count <= quartiles[0] {
        "Low"
    } else if count <= quartiles[1] {
        "Medium"
    } else if count <= quartiles[2] {
        "High"
    } else {
        "Very High"
    }
}

fn aggregate_rows(texts: &[&TextAttribution], lexicon: &CategoryLexicon) -> Vec<CategoryEntry> {
    use std::collections::BTreeMap;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for t in texts {
        for (tok, &s) in t.tokens.iter().zip(&t.scores) {
            *counts.entry(tok.as_str()).or_default() += 1;
            let e = sums.entry(tok.as_str()).or_default();
            e.0 += s;
            e.1 += 1;
        }
    }
    if counts.is_empty() {
        return Vec::new();
    }
    // corpus-frequency quartiles over distinct tokens
    let mut freqs: Vec<usize> = counts.values().copied().collect();
    freqs.sort_unstable();
    let q = |p: f64| {
        let idx = ((freqs.len() as f64 * p).ceil() as usize).clamp(1, freqs.len()) - 1;
        freqs[idx]
    };
    let quartiles = [q(0.25), q(0.5), q(0.75)];

    let mut out = Vec::new();
    for (category, words) in &lexicon.categories {
        for word in words {
            let Some(&(sum, n)) = sums.get(word.as_str()) else { continue };
            let count = counts[word.as_str()];
            out.push(CategoryEntry {
                category: category.clone(),
                token: word.clone(),
                avg_attribution: sum / n as f64,
                occurrences: count,
                frequency: frequency_bucket(count, &quartiles).to_string(),
            });
        }
    }
    out
}

/// Table-style aggregation: per category word, the average attribution and a
/// corpus-frequency bucket, over all texts and over true positives.
pub fn aggregate_attributions(
    texts: &[TextAttribution],
    lexicon: &CategoryLexicon,
    threshold: f64,
) -> AttributionTable {
    let all: Vec<&TextAttribution> = texts.iter().collect();
    let tp: Vec<&TextAttribution> =
        texts.iter().filter(|t| t.label == 1 && t.probability >= threshold).collect();
    AttributionTable {
        all_texts: aggregate_rows(&all, lexicon),
        true_positives: aggregate_rows(&tp, lexicon),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimeExplanation {
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_samples: usize,
    pub kernel_width: f64,
    pub seed: u64,
}

/// Gaussian elimination with partial pivoting; None when singular.
pub(crate) fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).expect("finite")
        })?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut v = b[col];
        for k in (col + 1)..n {
            v -= a[col][k] * x[k];
        }
        x[col] = v / a[col][col];
    }
    Some(x)
}

/// Weighted ridge regression of y on [1 | mask bits]; the intercept is not
/// penalized. Returns (intercept, weights, weighted R^2).
pub(crate) fn ridge_fit(
    masks: &[Vec<bool>],
    sample_weights: &[f64],
    y: &[f64],
    lambda: f64,
) -> Result<(f64, Vec<f64>, f64), ExplainError> {
    let n_tokens = masks.first().map(|m| m.len()).unwrap_or(0);
    let dim = n_tokens + 1;
    let mut xtx = vec![vec![0.0; dim]; dim];
    let mut xty = vec![0.0; dim];
    for ((mask, &w), &yi) in masks.iter().zip(sample_weights).zip(y) {
        let mut row = Vec::with_capacity(dim);
        row.push(1.0);
        row.extend(mask.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        for i in 0..dim {
            for j in 0..dim {
                xtx[i][j] += w * row[i] * row[j];
            }
            xty[i] += w * row[i] * yi;
        }
    }
    for (i, row) in xtx.iter_mut().enumerate().skip(1) {
        row[i] += lambda;
    }
    let beta = solve_linear(xtx, xty).ok_or(ExplainError::DegenerateDesign)?;

    let w_sum: f64 = sample_weights.iter().sum();
    let y_mean: f64 =
        y.iter().zip(sample_weights).map(|(&yi, &w)| w * yi).sum::<f64>() / w_sum;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for ((mask, &w), &yi) in masks.iter().zip(sample_weights).zip(y) {
        let mut pred = beta[0];
        for (k, &b) in mask.iter().enumerate() {
            if b {
                pred += beta[k + 1];
            }
        }
        ss_res += w * (yi - pred) * (yi - pred);
        ss_tot += w * (yi - y_mean) * (yi - y_mean);
    }
    let r_squared = if ss_tot <= f64::MIN_POSITIVE { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((beta[0], beta[1..].to_vec(), r_squared))
}

pub const LIME_RIDGE: f64 = 1e-3;
pub const LIME_SIGMA: f64 = 0.25;

/// LIME over keep/drop token masks. `predict` maps each sampled mask to the
/// model probability of the masked text; the all-ones mask is always sample 0.
pub fn lime_explain<F>(
    mut predict: F,
    n_tokens: usize,
    n_samples: usize,
    sigma: f64,
    seed: u64,
) -> Result<(Vec<f64>, f64, f64), ExplainError>
where
    F: FnMut(&[Vec<bool>]) -> Result<Vec<f64>, ExplainError>,
{
    if n_tokens == 0 {
        return Err(ExplainError::Input("nothing to explain: no tokens".into()));
    }
    if n_samples < 10 {
        return Err(ExplainError::Input("n_samples must be >= 10".into()));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(ExplainError::Input("kernel width must be > 0".into()));
    }
    let mut rng = Prng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(n_samples);
    masks.push(vec![true; n_tokens]);
    for _ in 1..n_samples {
        masks.push((0..n_tokens).map(|_| rng.random::<f64>() < 0.5).collect());
    }
    if masks.iter().all(|m| m == &masks[0]) {
        return Err(ExplainError::DegenerateDesign);
    }
    let weights: Vec<f64> = masks
        .iter()
        .map(|m| {
            let dropped = m.iter().filter(|&&b| !b).count() as f64;
            let d = dropped / n_tokens as f64;
            (-d * d / (sigma * sigma)).exp()
        })
        .collect();
    let y = predict(&masks)?;
    if y.len() != masks.len() {
        return Err(ExplainError::Model("prediction count mismatch".into()));
    }
    let (intercept, coef, r2) = ridge_fit(&masks, &weights, &y, LIME_RIDGE)?;
    Ok((coef, intercept, r2))
}

/// LIME for a trained model on one text: dropped tokens become `<pad>` both
/// for the encoder and for sentiment scoring.
pub fn lime_explain_model(
    model: &TrainedModel,
    lexicon: &SentimentLexicon,
    text: &str,
    n_samples: usize,
    sigma: f64,
    seed: u64,
) -> Result<LimeExplanation, ExplainError> {
    let ex = model.prepare_text(text).map_err(model_err)?;
    let window = ex.tokens.len().min(model.max_len - 1);
    let tokens: Vec<String> = ex.tokens[..window].to_vec();
    if tokens.is_empty() {
        return Err(ExplainError::Input("nothing to explain: no tokens".into()));
    }
    let predict = |masks: &[Vec<bool>]| -> Result<Vec<f64>, ExplainError> {
        let mut texts = Vec::with_capacity(masks.len());
        for mask in masks {
            let perturbed: Vec<String> = tokens
                .iter()
                .zip(mask)
                .map(|(t, &keep)| if keep { t.clone() } else { "<pad>".to_string() })
                .collect();
            texts.push(perturbed.join(" "));
        }
        model.probabilities(&texts, lexicon).map_err(model_err)
    };
    let (weights, intercept, r_squared) =
        lime_explain(predict, tokens.len(), n_samples, sigma, seed)?;
    Ok(LimeExplanation {
        tokens,
        weights,
        intercept,
        r_squared,
        n_samples,
        kernel_width: sigma,
        seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    /// Empirical positive rate among the bin's examples.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub n: usize,
    pub n_bins: usize,
}

/// Reliability statistics over equal-width, right-inclusive bins on [0, 1]
/// (probability 0 falls into the first bin). Empty bins are recorded with
/// count 0 and skipped by the ECE sum.
pub fn calibration(
    probs: &[f64],
    labels: &[u8],
    n_bins: usize,
) -> Result<CalibrationReport, ExplainError> {
    if n_bins == 0 {
        return Err(ExplainError::Input("n_bins must be >= 1".into()));
    }
    if probs.len() != labels.len() {
        return Err(ExplainError::Input("probability/label length mismatch".into()));
    }
    if probs.len() < n_bins {
        return Err(ExplainError::Input(format!(
            "need at least {} examples for {} bins, got {}",
            n_bins,
            n_bins,
            probs.len()
        )));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(ExplainError::Input("probabilities must lie in [0, 1]".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut pos_sum = vec![0usize; n_bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let idx = if p <= 0.0 {
            0
        } else {
            ((p * n_bins as f64).ceil() as usize - 1).min(n_bins - 1)
        };
        count[idx] += 1;
        conf_sum[idx] += p;
        pos_sum[idx] += (y == 1) as usize;
    }
    let n = probs.len();
    let mut bins = Vec::with_capacity(n_bins);
    let mut ece = 0.0;
    for k in 0..n_bins {
        let (conf, acc) = if count[k] > 0 {
            (conf_sum[k] / count[k] as f64, pos_sum[k] as f64 / count[k] as f64)
        } else {
            (0.0, 0.0)
        };
        if count[k] > 0 {
            ece += count[k] as f64 / n as f64 * (conf - acc).abs();
        }
        bins.push(CalibrationBin {
            lower: k as f64 / n_bins as f64,
            upper: (k + 1) as f64 / n_bins as f64,
            count: count[k],
            mean_confidence: conf,
            accuracy: acc,
        });
    }
    Ok(CalibrationReport { bins, ece, n, n_bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, EncoderParams, EncoderStats};
    use crate::gbls::{GblsConfig, GblsParams};
    use crate::select::SelectionMask;
    use crate::text::{build_vocab, normalize, tokenize, Vocabulary};

    fn linear_forward(w: Vec<f64>) -> impl FnMut(&mut Tape, Var) -> Result<Var, ExplainError> {
        move |tape, v| Ok(tape.weighted_sum(v, &w)?)
    }

    #[test]
    fn ig_is_exact_on_linear_models() {
        let w = vec![0.7, -1.3, 0.4, 2.2, -0.6];
        let x = Tensor::vector(vec![1.0, 2.0, -0.5, 0.3, 1.7]).unwrap();
        let baseline = Tensor::zeros(vec![5]);
        for m in [2usize, 3, 17, 64] {
            let (attr, fx, f0, gap) =
                integrated_gradients(linear_forward(w.clone()), &x, &baseline, m).unwrap();
            for i in 0..5 {
                let expected = w[i] * x.data()[i];
                assert!((attr[i] - expected).abs() <= 1e-12, "m={m} i={i}");
            }
            assert!(gap <= 1e-8, "m={m} gap={gap}");
            assert!((fx - f0 - attr.iter().sum::<f64>()).abs() <= 1e-8);
        }
    }

    #[test]
    fn ig_vanishes_when_input_equals_baseline() {
        let x = Tensor::vector(vec![0.4, -0.2, 0.9]).unwrap();
        let (attr, _, _, gap) =
            integrated_gradients(linear_forward(vec![1.0, 2.0, 3.0]), &x, &x, 8).unwrap();
        assert!(attr.iter().all(|&a| a == 0.0));
        assert!(gap <= 1e-15);
        assert!(matches!(
            integrated_gradients(linear_forward(vec![1.0]), &x, &x, 1),
            Err(ExplainError::Input(_))
        ));
    }

    #[test]
    fn ig_gap_shrinks_as_steps_double() {
        // smooth nonlinear scalar: sum of gelu of a fixed linear map
        let w = Tensor::matrix(
            4,
            3,
            vec![0.5, -0.3, 0.8, 0.2, 0.9, -0.7, -0.4, 0.6, 0.1, 0.3, -0.2, 0.5],
        )
        .unwrap();
        let forward = |tape: &mut Tape, v: Var| -> Result<Var, ExplainError> {
            let wv = tape.constant(w.clone());
            let h = tape.matmul(v, wv)?;
            let a = tape.gelu(h)?;
            Ok(tape.sum_all(a)?)
        };
        let x = Tensor::matrix(1, 4, vec![1.2, -0.8, 0.5, 1.6]).unwrap();
        let baseline = Tensor::zeros(vec![1, 4]);
        let gap_at = |m: usize| {
            let (_, _, _, gap) = integrated_gradients(forward, &x, &baseline, m).unwrap();
            gap
        };
        let g4 = gap_at(4);
        let g64 = gap_at(64);
        assert!(g64 < g4 / 4.0, "midpoint rule should converge: {g4} -> {g64}");
    }

    /// An untrained but fully wired model; explanations only need a forward.
    fn random_model(seed: u64) -> TrainedModel {
        let texts = [
            "you are a stupid idiot and everyone hates you",
            "the weather is lovely and the garden looks great",
            "shut up you worthless ugly loser",
            "thanks for the wonderful help today friend",
        ];
        let corpus: Vec<Vec<String>> = texts.iter().map(|t| tokenize(&normalize(t))).collect();
        let vocab = build_vocab(&corpus, 1).unwrap();
        let encoder_config = EncoderConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_relative_distance: 4,
            max_len: 12,
            reductions: vec![8],
            se_ratio: 2,
            dropout: 0.0,
            use_se: true,
        };
        let mut rng = Prng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&encoder_config, &mut rng).unwrap();
        let stats = EncoderStats::new(&encoder_config);
        let fused = encoder_config.output_dim() + 4;
        let gbls_config = GblsConfig {
            input_dim: fused,
            hidden_dim: 12,
            n_heads: 2,
            n_groups: 3,
            dropout: 0.0,
            ..GblsConfig::new(fused)
        };
        let gbls = GblsParams::init(&gbls_config, &mut rng).unwrap();
        TrainedModel {
            vocab,
            encoder_config,
            encoder,
            stats,
            gbls,
            mask: SelectionMask::identity(fused),
            threshold: 0.5,
            use_sentiment: true,
            max_len: 12,
        }
    }

    #[test]
    fn ig_on_the_full_model_satisfies_completeness() {
        let model = random_model(3);
        let lexicon = SentimentLexicon::bundled();
        let text = "you are a stupid idiot and everyone hates you";
        let report = ig_explain(&model, &lexicon, text, 512).unwrap();

        let used = 1 + tokenize(&normalize(text)).len().min(11);
        assert_eq!(report.tokens.len(), used);
        assert_eq!(report.scores.len(), used);
        assert_eq!(report.tokens[0], "<cls>");

        let bound = 1e-3 * (report.prediction - report.baseline_value).abs() + 1e-6;
        assert!(
            report.completeness_gap <= bound,
            "gap {} exceeds {}",
            report.completeness_gap,
            bound
        );
        // the per-token sums preserve the total attribution
        let token_sum: f64 = report.scores.iter().sum();
        let delta = report.prediction - report.baseline_value;
        assert!((token_sum - delta).abs() <= bound);
    }

    #[test]
    fn aggregation_buckets_and_filters() {
        let t = |tokens: &[&str], scores: &[f64], prob: f64, label: u8| TextAttribution {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            scores: scores.to_vec(),
            probability: prob,
            label,
        };
        let texts = vec![
            t(&["you", "stupid", "idiot"], &[0.1, 0.8, 0.6], 0.9, 1),
            t(&["you", "stupid", "garden"], &[0.3, 0.4, -0.2], 0.2, 1),
            t(&["lovely", "garden"], &[-0.1, -0.3], 0.1, 0),
        ];
        let lexicon = CategoryLexicon::bundled();
        let table = aggregate_attributions(&texts, &lexicon, 0.5);

        let find = |rows: &[CategoryEntry], tok: &str| {
            rows.iter().find(|e| e.token == tok).cloned()
        };
        let stupid = find(&table.all_texts, "stupid").expect("stupid present");
        assert_eq!(stupid.category, "Explicit Offensive");
        assert!((stupid.avg_attribution - 0.6).abs() < 1e-12);
        assert_eq!(stupid.occurrences, 2);
        let you = find(&table.all_texts, "you").expect("you present");
        assert_eq!(you.category, "Targeting Pronouns");
        assert!((you.avg_attribution - 0.2).abs() < 1e-12);
        assert!(find(&table.all_texts, "moron").is_none(), "absent tokens are excluded");
        // frequencies: counts are you=2, stupid=2, idiot=1, garden=2, lovely=1
        assert_eq!(find(&table.all_texts, "idiot").unwrap().frequency, "Low");
        assert_eq!(stupid.frequency, "Very High");

        // true positives keep only the first text
        let tp_stupid = find(&table.true_positives, "stupid").unwrap();
        assert!((tp_stupid.avg_attribution - 0.8).abs() < 1e-12);
        assert_eq!(tp_stupid.occurrences, 1);
        assert!(find(&table.true_positives, "garden").is_none());

        // single-token corpus: the average is the token's own score
        let solo = aggregate_attributions(&[t(&["idiot"], &[0.42], 0.9, 1)], &lexicon, 0.5);
        let row = find(&solo.all_texts, "idiot").unwrap();
        assert!((row.avg_attribution - 0.42).abs() < 1e-15);
    }

    #[test]
    fn lime_recovers_an_additive_oracle() {
        let c = [0.08, -0.05, 0.1, 0.02, 0.0, 0.04];
        let base = 0.3;
        let predict = |masks: &[Vec<bool>]| -> Result<Vec<f64>, ExplainError> {
            Ok(masks
                .iter()
                .map(|m| {
                    base + m.iter().zip(&c).map(|(&b, &ci)| if b { ci } else { 0.0 }).sum::<f64>()
                })
                .collect())
        };
        let (w, intercept, r2) = lime_explain(predict, 6, 600, LIME_SIGMA, 42).unwrap();
        for (i, (&wi, &ci)) in w.iter().zip(&c).enumerate() {
            if ci != 0.0 {
                assert!(
                    (wi - ci).abs() <= 0.1 * ci.abs(),
                    "token {i}: recovered {wi}, true {ci}"
                );
            } else {
                assert!(wi.abs() <= 1e-6, "ignored token picked up weight {wi}");
            }
        }
        assert!((intercept - base).abs() <= 0.02);
        assert!(r2 > 0.999, "exact additive target, got R2 {r2}");

        // determinism under seed
        let (w2, i2, r2b) = lime_explain(predict, 6, 600, LIME_SIGMA, 42).unwrap();
        assert_eq!(w, w2);
        assert_eq!(intercept, i2);
        assert_eq!(r2, r2b);
        let (w3, ..) = lime_explain(predict, 6, 600, LIME_SIGMA, 43).unwrap();
        assert_ne!(w, w3, "different seed, different sample");
    }

    #[test]
    fn lime_weights_depend_on_weighting_not_duplication() {
        let masks = vec![
            vec![true, true, true],
            vec![true, false, true],
            vec![false, true, false],
            vec![true, true, false],
            vec![false, false, true],
        ];
        let y = vec![0.9, 0.6, 0.3, 0.7, 0.4];
        let weights = vec![1.0, 0.8, 0.5, 0.8, 0.5];
        let (b0, w, _) = ridge_fit(&masks, &weights, &y, LIME_RIDGE).unwrap();

        // duplicate the second sample; halve its weight across the two copies
        let mut masks2 = masks.clone();
        masks2.push(masks[1].clone());
        let mut y2 = y.clone();
        y2.push(y[1]);
        let mut weights2 = weights.clone();
        weights2[1] = 0.4;
        weights2.push(0.4);
        let (b0d, wd, _) = ridge_fit(&masks2, &weights2, &y2, LIME_RIDGE).unwrap();
        assert!((b0 - b0d).abs() < 1e-10);
        for (a, b) in w.iter().zip(&wd) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn lime_rejects_degenerate_inputs() {
        let constant = |masks: &[Vec<bool>]| Ok(vec![0.5; masks.len()]);
        assert!(matches!(
            lime_explain(constant, 0, 100, LIME_SIGMA, 1),
            Err(ExplainError::Input(_))
        ));
        assert!(matches!(
            lime_explain(constant, 3, 9, LIME_SIGMA, 1),
            Err(ExplainError::Input(_))
        ));
        // a seed whose 9 single-bit draws all keep the token exists; find one
        let mut hit = None;
        for seed in 0..100_000u64 {
            match lime_explain(constant, 1, 10, LIME_SIGMA, seed) {
                Err(ExplainError::DegenerateDesign) => {
                    hit = Some(seed);
                    break;
                }
                _ => continue,
            }
        }
        assert!(hit.is_some(), "no degenerate seed found in range");
    }

    #[test]
    fn lime_on_the_full_model_is_seeded_and_reports_fit() {
        let model = random_model(9);
        let lexicon = SentimentLexicon::bundled();
        let text = "you are a stupid idiot and everyone hates you";
        let a = lime_explain_model(&model, &lexicon, text, 60, LIME_SIGMA, 7).unwrap();
        let b = lime_explain_model(&model, &lexicon, text, 60, LIME_SIGMA, 7).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.r_squared, b.r_squared);
        assert!(a.r_squared <= 1.0 && a.r_squared.is_finite());
        assert_eq!(a.tokens.len(), a.weights.len());
        assert_eq!(a.n_samples, 60);
        assert!(matches!(
            lime_explain_model(&model, &lexicon, "", 60, LIME_SIGMA, 7),
            Err(ExplainError::Input(_))
        ));
    }

    #[test]
    fn calibration_matches_hand_built_fixtures() {
        // constant 0.9 on a balanced ground truth: ECE = |0.9 - 0.5| = 0.4
        let probs = vec![0.9; 1000];
        let labels: Vec<u8> = (0..1000).map(|i| (i % 2) as u8).collect();
        let report = calibration(&probs, &labels, 10).unwrap();
        assert!((report.ece - 0.4).abs() <= 1e-12);
        assert_eq!(report.bins.iter().map(|b| b.count).sum::<usize>(), 1000);
        let occupied: Vec<_> = report.bins.iter().filter(|b| b.count > 0).collect();
        assert_eq!(occupied.len(), 1);
        assert_eq!(occupied[0].count, 1000);
        assert!((occupied[0].mean_confidence - 0.9).abs() <= 1e-12);
        assert!((occupied[0].accuracy - 0.5).abs() <= 1e-12);

        // per-bin frequency-matched predictor: ECE exactly 0
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for k in 0..10 {
            let conf = (k as f64 + 1.0) / 20.0; // 0.05, 0.10, ..., 0.50 area; keep in-bin
            let conf = conf + 0.5 * (k as f64 / 10.0); // spread over (0,1)
            let conf = (conf * 20.0).round() / 20.0; // multiples of 0.05
            let positives = (conf * 20.0).round() as usize;
            for i in 0..20 {
                probs.push(conf);
                labels.push((i < positives) as u8);
            }
        }
        let report = calibration(&probs, &labels, 10).unwrap();
        assert!(report.ece <= 1e-12, "frequency-matched, got {}", report.ece);

        // permutation invariance
        let mut pairs: Vec<(f64, u8)> = probs.iter().copied().zip(labels.clone()).collect();
        pairs.reverse();
        pairs.swap(3, 170);
        let (p2, l2): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        let report2 = calibration(&p2, &l2, 10).unwrap();
        assert_eq!(report.ece, report2.ece);
    }

    #[test]
    fn calibration_bins_are_right_inclusive_and_sized() {
        let probs = vec![0.0, 0.1, 0.10000001, 1.0, 0.95, 0.2];
        let labels = vec![0, 0, 1, 1, 1, 0];
        let report = calibration(&probs, &labels, 10).unwrap();
        assert_eq!(report.bins[0].count, 2, "0.0 and 0.1 share the first bin");
        assert_eq!(report.bins[1].count, 2, "(0.1, 0.2] holds the nudge and 0.2");
        assert_eq!(report.bins[9].count, 2, "0.95 and 1.0 in the last bin");

        assert!(matches!(calibration(&probs[..3], &labels[..3], 10), Err(ExplainError::Input(_))));
        assert!(matches!(calibration(&[1.5], &[1], 1), Err(ExplainError::Input(_))));
        assert!(matches!(calibration(&[0.5, 0.5], &[1], 2), Err(ExplainError::Input(_))));
    }

    #[test]
    fn vocabulary_keeps_pad_for_lime_replacement() {
        let vocab = Vocabulary::from_tsv("<pad>\t0\n<unk>\t1\n<cls>\t2\nword\t3\n").unwrap();
        assert_eq!(vocab.id_of("<pad>"), crate::text::PAD_ID);
    }
}
