//! Two-stage training: encoder fine-tuning under a joint classification and
//! contrastive objective, fused feature extraction, selection, classifier
//! training, validation-side threshold search, and final test scoring.

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::data::{split, RawRecord};
use crate::encoder::{
    encode_batch, EncoderConfig, EncoderParams, EncoderStats,
};
use crate::gbls::{gbls_predict_batch, gbls_train, GblsEpoch, GblsError, GblsParams};
use crate::metrics::{
    compute_gmb, metrics_report, select_threshold, BiasReport, MetricsError, MetricsReport,
    GMB_POWER,
};
use crate::optim::{xavier_uniform, zeros_param, Adam};
use crate::select::{
    apply_mask, select_l1, select_mi, SelectError, SelectMethod, SelectionMask, SelectorConfig,
};
use crate::sentiment::{score, SentimentLexicon};
use crate::tensor::{Mode, Prng, Tape, Tensor, TensorError, Var};
use crate::text::{build_vocab, encode, normalize, tokenize, Vocabulary};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("stage 1: {0}")]
    Stage1(String),
    #[error("feature extraction: {0}")]
    Extract(String),
    #[error("feature selection: {0}")]
    Select(#[from] SelectError),
    #[error("stage 2: {0}")]
    Stage2(#[from] GblsError),
    #[error("scoring: {0}")]
    Metrics(#[from] MetricsError),
}

fn stage1_err(e: impl std::fmt::Display) -> TrainError {
    TrainError::Stage1(e.to_string())
}

/// Hyperparameters for encoder fine-tuning.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight on the contrastive term; 0 trains on BCE alone.
    pub contrastive_weight: f64,
    pub contrastive_temperature: f64,
    pub patience: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 4,
            batch_size: 16,
            learning_rate: 1e-3,
            contrastive_weight: 0.5,
            contrastive_temperature: 0.1,
            patience: 3,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(TrainError::Config(
                "stage1 epochs, batch_size, and patience must be >= 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config("stage1 learning_rate must be > 0".into()));
        }
        if !(self.contrastive_weight.is_finite() && self.contrastive_weight >= 0.0) {
            return Err(TrainError::Config("contrastive_weight must be >= 0".into()));
        }
        if self.contrastive_weight > 0.0 && self.batch_size < 2 {
            return Err(TrainError::Config(
                "batch_size must be >= 2 when the contrastive loss is active".into(),
            ));
        }
        if !(self.contrastive_temperature.is_finite() && self.contrastive_temperature > 0.0) {
            return Err(TrainError::Config("contrastive_temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Everything the two-stage pipeline needs besides the data itself. The
/// classifier's `input_dim` is a placeholder until selection fixes the width.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage1: Stage1Config,
    pub stage2: crate::gbls::GblsConfig,
    pub selector: SelectorConfig,
    pub seed: u64,
}

/// A record after text preprocessing: normalized tokens plus the padded id
/// sequence fed to the encoder.
#[derive(Debug, Clone)]
pub struct Example {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub label: u8,
    pub subgroups: Vec<String>,
}

pub fn prepare(
    records: &[RawRecord],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Example>, TrainError> {
    records
        .iter()
        .map(|r| {
            let tokens = tokenize(&normalize(&r.text));
            let (ids, mask) =
                encode(&tokens, vocab, max_len).map_err(|e| TrainError::Data(e.to_string()))?;
            Ok(Example {
                tokens,
                ids,
                mask,
                label: r.label,
                subgroups: r.subgroups.clone(),
            })
        })
        .collect()
}

/// Index batches in order; a trailing singleton is merged into the previous
/// batch so batch-level losses never see a lone example unless the split
/// itself has only one.
fn batched(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(tail);
    }
    out
}

/// In-batch supervised contrastive loss over L2-normalized rows of `reduced`:
/// mean over anchors of -1/|P(i)| * sum_p log(exp(s_ip) / sum_{a!=i} exp(s_ia))
/// with s scaled by 1/temperature. An anchor needs a same-label partner to
/// contribute, and a batch with a single distinct label has nothing to
/// contrast against, so both cases are zero; `None` means no graph was built.
fn supcon_loss(
    tape: &mut Tape,
    reduced: Var,
    labels: &[u8],
    temperature: f64,
) -> Result<Option<Var>, TensorError> {
    let b = labels.len();
    if b < 2 || labels.iter().all(|&y| y == labels[0]) {
        return Ok(None);
    }
    let mut pos_count = vec![0usize; b];
    for i in 0..b {
        pos_count[i] = (0..b).filter(|&p| p != i && labels[p] == labels[i]).count();
    }
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut pair_w = Vec::new();
    for i in 0..b {
        if pos_count[i] == 0 {
            continue;
        }
        for p in 0..b {
            if p != i && labels[p] == labels[i] {
                rows.push(i);
                cols.push(p);
                pair_w.push(-1.0 / (b as f64 * pos_count[i] as f64));
            }
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let z = tape.l2_normalize_rows(reduced, 1e-12)?;
    let zt = tape.transpose(z)?;
    let sims = tape.matmul(z, zt)?;
    let scaled = tape.scale(sims, 1.0 / temperature)?;
    let lse = tape.row_logsumexp_offdiag(scaled)?;
    let pairs = tape.gather_pairs(scaled, &rows, &cols, rows.len(), 1)?;
    let pulled = tape.weighted_sum(pairs, &pair_w)?;
    let anchor_w: Vec<f64> =
        pos_count.iter().map(|&c| if c > 0 { 1.0 / b as f64 } else { 0.0 }).collect();
    let pushed = tape.weighted_sum(lse, &anchor_w)?;
    Ok(Some(tape.add(pulled, pushed)?))
}

fn absorb_var(t: &mut Tensor, tape: &Tape, v: Var) {
    let Some(g) = tape.grad(v) else { return };
    match &mut t.grad {
        Some(acc) => {
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += gi;
            }
        }
        None => t.grad = Some(g.to_vec()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    /// Mean per-example total loss; equals cls + weight * con.
    pub train_loss: f64,
    pub train_cls: f64,
    pub train_con: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub params: EncoderParams,
    pub stats: EncoderStats,
    pub history: Vec<Stage1Epoch>,
    /// Epoch whose weights were kept (best val loss).
    pub best_epoch: usize,
}

struct BatchValues {
    total: f64,
    cls: f64,
    con: f64,
}

/// Fine-tunes the encoder with a throwaway linear head on BCE plus the
/// weighted contrastive term; early stopping tracks the same composite on the
/// validation split. The head is dropped, the best-validation encoder kept.
pub fn stage1_finetune(
    train: &[Example],
    val: &[Example],
    encoder_config: &EncoderConfig,
    config: &Stage1Config,
    seed: u64,
) -> Result<Stage1Outcome, TrainError> {
    config.validate()?;
    encoder_config.validate().map_err(stage1_err)?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Stage1("train and val splits must be nonempty".into()));
    }

    let mut rng = Prng::seed_from_u64(seed);
    let mut params = EncoderParams::init(encoder_config, &mut rng).map_err(stage1_err)?;
    let mut stats = EncoderStats::new(encoder_config);
    let mut head_w = xavier_uniform(encoder_config.output_dim(), 1, &mut rng);
    let mut head_b = zeros_param(vec![1, 1]);
    let mut adam = Adam::new(config.learning_rate);

    let mut history = Vec::new();
    let mut best = (params.clone(), stats.clone());
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let val_order: Vec<usize> = (0..val.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = BatchValues { total: 0.0, cls: 0.0, con: 0.0 };
        let mut seen = 0usize;
        for batch in batched(&order, config.batch_size) {
            if batch.len() == 1 && config.contrastive_weight > 0.0 {
                return Err(TrainError::Stage1(
                    "batch of size 1 cannot carry an active contrastive loss".into(),
                ));
            }
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let hw = tape.leaf(&head_w);
            let hb = tape.leaf(&head_b);
            let (loss, values) = batch_objective(
                &mut tape, &bound, hw, hb, encoder_config, &mut stats, train, &batch, config,
                Mode::Train, &mut rng,
            )?;
            tape.backward(loss).map_err(stage1_err)?;
            params.absorb_grads(&tape, &bound);
            absorb_var(&mut head_w, &tape, hw);
            absorb_var(&mut head_b, &tape, hb);
            let mut tensors = params.tensors_mut();
            tensors.push(&mut head_w);
            tensors.push(&mut head_b);
            adam.step(&mut tensors);
            let n = batch.len() as f64;
            sums.total += values.total * n;
            sums.cls += values.cls * n;
            sums.con += values.con * n;
            seen += batch.len();
        }

        let mut val_sum = 0.0;
        let mut val_seen = 0usize;
        for batch in batched(&val_order, config.batch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let hw = tape.leaf(&head_w);
            let hb = tape.leaf(&head_b);
            let (_, values) = batch_objective(
                &mut tape, &bound, hw, hb, encoder_config, &mut stats, val, &batch, config,
                Mode::Eval, &mut rng,
            )?;
            val_sum += values.total * batch.len() as f64;
            val_seen += batch.len();
        }
        let val_loss = val_sum / val_seen as f64;

        history.push(Stage1Epoch {
            epoch,
            train_loss: sums.total / seen as f64,
            train_cls: sums.cls / seen as f64,
            train_con: sums.con / seen as f64,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = (params.clone(), stats.clone());
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (params, stats) = best;
    Ok(Stage1Outcome { params, stats, history, best_epoch })
}

/// Builds the composite loss for one batch and reports its logged components.
#[allow(clippy::too_many_arguments)]
fn batch_objective(
    tape: &mut Tape,
    bound: &crate::encoder::BoundEncoder,
    hw: Var,
    hb: Var,
    encoder_config: &EncoderConfig,
    stats: &mut EncoderStats,
    examples: &[Example],
    batch: &[usize],
    config: &Stage1Config,
    mode: Mode,
    rng: &mut Prng,
) -> Result<(Var, BatchValues), TrainError> {
    let seqs: Vec<(Vec<usize>, Vec<bool>)> =
        batch.iter().map(|&i| (examples[i].ids.clone(), examples[i].mask.clone())).collect();
    let labels: Vec<u8> = batch.iter().map(|&i| examples[i].label).collect();
    let reduced = encode_batch(tape, bound, encoder_config, stats, &seqs, mode, rng)
        .map_err(stage1_err)?;
    let logits = tape.matmul(reduced, hw).map_err(stage1_err)?;
    let logits = tape.add_rowvec(logits, hb).map_err(stage1_err)?;
    let targets: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
    let l_cls = tape.bce_with_logits_mean(logits, &targets).map_err(stage1_err)?;
    let cls = tape.value(l_cls).item();
    if config.contrastive_weight > 0.0 {
        if let Some(l_con) =
            supcon_loss(tape, reduced, &labels, config.contrastive_temperature)
                .map_err(stage1_err)?
        {
            let con = tape.value(l_con).item();
            let weighted = tape.scale(l_con, config.contrastive_weight).map_err(stage1_err)?;
            let total = tape.add(l_cls, weighted).map_err(stage1_err)?;
            let total_value = tape.value(total).item();
            return Ok((total, BatchValues { total: total_value, cls, con }));
        }
    }
    Ok((l_cls, BatchValues { total: cls, cls, con: 0.0 }))
}

/// Fused per-example vectors: the reduced encoder output, optionally followed
/// by the 4 sentiment scores.
pub fn extract_features(
    examples: &[Example],
    params: &EncoderParams,
    stats: &EncoderStats,
    lexicon: &SentimentLexicon,
    use_sentiment: bool,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(examples.len());
    let out_dim = params.config.output_dim();
    for chunk in examples.chunks(64) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut stats = stats.clone();
        let mut rng = Prng::seed_from_u64(0);
        let seqs: Vec<(Vec<usize>, Vec<bool>)> =
            chunk.iter().map(|ex| (ex.ids.clone(), ex.mask.clone())).collect();
        let reduced =
            encode_batch(&mut tape, &bound, &params.config, &mut stats, &seqs, Mode::Eval, &mut rng)
                .map_err(|e| TrainError::Extract(e.to_string()))?;
        let data = tape.value(reduced).data();
        for (row, ex) in chunk.iter().enumerate() {
            let mut v: Vec<f64> = data[row * out_dim..(row + 1) * out_dim].to_vec();
            if use_sentiment {
                v.extend_from_slice(&score(&ex.tokens, lexicon).features());
            }
            out.push(v);
        }
    }
    Ok(out)
}

fn select_features(
    train_x: &[Vec<f64>],
    train_y: &[u8],
    cfg: &SelectorConfig,
) -> Result<SelectionMask, TrainError> {
    let dim = train_x.first().map(|r| r.len()).unwrap_or(0);
    let mask = match cfg.method {
        SelectMethod::None => SelectionMask::identity(dim),
        SelectMethod::Mi => select_mi(train_x, train_y, cfg.resolve_keep_k(dim), cfg.bins)?,
        SelectMethod::L1 => select_l1(train_x, train_y, cfg.l1_lambda, cfg.weight_threshold)?.mask,
    };
    if mask.indices.is_empty() {
        return Err(TrainError::Select(SelectError::BadMask(
            "selection kept no features; relax the selector".into(),
        )));
    }
    Ok(mask)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub vocab: Vocabulary,
    pub encoder_config: EncoderConfig,
    pub encoder: EncoderParams,
    pub encoder_stats: EncoderStats,
    pub gbls: GblsParams,
    pub mask: SelectionMask,
    pub threshold: f64,
    pub stage1_history: Vec<Stage1Epoch>,
    pub stage1_best_epoch: usize,
    pub stage2_history: Vec<GblsEpoch>,
    pub stage2_best_epoch: usize,
    pub metrics: MetricsReport,
    pub bias: Option<BiasReport>,
    pub fused_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// The full two-stage pipeline: split, fit the encoder, extract fused
/// features, select, fit the classifier, pick the threshold on validation,
/// and score the test split once at the end.
pub fn run_pipeline(
    records: &[RawRecord],
    run: &RunConfig,
    lexicon: &SentimentLexicon,
) -> Result<PipelineOutcome, TrainError> {
    let stage1_cfg = run.stage1.to_config();
    stage1_cfg.validate()?;
    run.selector.validate()?;

    let splits = split(records, run.dataset.split, run.seed, run.dataset.stratified)
        .map_err(|e| TrainError::Data(e.to_string()))?;
    for (name, part) in
        [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)]
    {
        if part.is_empty() {
            return Err(TrainError::Data(format!("{name} split is empty; adjust ratios")));
        }
    }

    let corpus: Vec<Vec<String>> =
        splits.train.iter().map(|r| tokenize(&normalize(&r.text))).collect();
    let vocab = build_vocab(&corpus, run.dataset.min_frequency)
        .map_err(|e| TrainError::Data(e.to_string()))?;
    let encoder_config = run.encoder.to_config(vocab.len(), run.dataset.max_len);
    encoder_config.validate().map_err(|e| TrainError::Config(e.to_string()))?;

    let train = prepare(&splits.train, &vocab, run.dataset.max_len)?;
    let val = prepare(&splits.val, &vocab, run.dataset.max_len)?;
    let test = prepare(&splits.test, &vocab, run.dataset.max_len)?;

    let stage1 = stage1_finetune(&train, &val, &encoder_config, &stage1_cfg, run.seed)?;

    let train_x =
        extract_features(&train, &stage1.params, &stage1.stats, lexicon, run.use_sentiment)?;
    let val_x = extract_features(&val, &stage1.params, &stage1.stats, lexicon, run.use_sentiment)?;
    let test_x =
        extract_features(&test, &stage1.params, &stage1.stats, lexicon, run.use_sentiment)?;
    let fused_dim = train_x.first().map(|r| r.len()).unwrap_or(0);

    let train_y: Vec<u8> = train.iter().map(|e| e.label).collect();
    let val_y: Vec<u8> = val.iter().map(|e| e.label).collect();
    let test_y: Vec<u8> = test.iter().map(|e| e.label).collect();

    let mask = select_features(&train_x, &train_y, &run.selector)?;
    let train_x = apply_mask(&train_x, &mask)?;
    let val_x = apply_mask(&val_x, &mask)?;
    let test_x = apply_mask(&test_x, &mask)?;

    let gbls_config = run.gbls.to_config(mask.indices.len());
    let stage2 = gbls_train(
        &train_x,
        &train_y,
        &val_x,
        &val_y,
        &gbls_config,
        run.seed.wrapping_add(1),
    )?;

    let val_probs = gbls_predict_batch(&stage2.params, &val_x)?;
    let threshold = select_threshold(&val_probs, &val_y)?;

    let test_probs = gbls_predict_batch(&stage2.params, &test_x)?;
    let metrics = metrics_report(&test_probs, &test_y, threshold)?;
    let bias = if test.iter().any(|e| !e.subgroups.is_empty()) {
        let subgroups: Vec<Vec<String>> = test.iter().map(|e| e.subgroups.clone()).collect();
        Some(compute_gmb(&test_probs, &test_y, &subgroups, GMB_POWER)?)
    } else {
        None
    };

    Ok(PipelineOutcome {
        vocab,
        encoder_config,
        encoder: stage1.params,
        encoder_stats: stage1.stats,
        gbls: stage2.params,
        mask,
        threshold,
        stage1_history: stage1.history,
        stage1_best_epoch: stage1.best_epoch,
        stage2_history: stage2.history,
        stage2_best_epoch: stage2.best_epoch,
        metrics,
        bias,
        fused_dim,
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
    })
}

/// Checkpoint records for a finished pipeline: both networks, the selection
/// mask and its scores, and the decision threshold.
pub fn model_records(out: &PipelineOutcome) -> Vec<(String, Tensor)> {
    let mut records = checkpoint::encoder_records(&out.encoder, &out.encoder_stats);
    records.extend(checkpoint::gbls_records(&out.gbls));
    let indices: Vec<f64> = out.mask.indices.iter().map(|&i| i as f64).collect();
    records.push(("select.indices".into(), Tensor::vector(indices).expect("finite indices")));
    records.push((
        "select.scores".into(),
        Tensor::vector(out.mask.scores.clone()).expect("finite scores"),
    ));
    records.push((
        "train.threshold".into(),
        Tensor::vector(vec![out.threshold]).expect("finite threshold"),
    ));
    records
}

/// A frozen model ready for inference: everything needed to map raw text to a
/// probability and a decision.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub vocab: Vocabulary,
    pub encoder_config: EncoderConfig,
    pub encoder: EncoderParams,
    pub stats: EncoderStats,
    pub gbls: GblsParams,
    pub mask: SelectionMask,
    pub threshold: f64,
    pub use_sentiment: bool,
    pub max_len: usize,
}

impl PipelineOutcome {
    pub fn model(&self, run: &RunConfig) -> TrainedModel {
        TrainedModel {
            vocab: self.vocab.clone(),
            encoder_config: self.encoder_config.clone(),
            encoder: self.encoder.clone(),
            stats: self.encoder_stats.clone(),
            gbls: self.gbls.clone(),
            mask: self.mask.clone(),
            threshold: self.threshold,
            use_sentiment: run.use_sentiment,
            max_len: run.dataset.max_len,
        }
    }
}

impl TrainedModel {
    /// Rebuilds a model from a checkpoint plus its sidecar config and
    /// vocabulary. Shapes are dictated by the config; mismatches are refused.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        run: &RunConfig,
        vocab: Vocabulary,
    ) -> Result<TrainedModel, TrainError> {
        let encoder_config = run.encoder.to_config(vocab.len(), run.dataset.max_len);
        encoder_config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let mut rng = Prng::seed_from_u64(0);
        let mut encoder =
            EncoderParams::init(&encoder_config, &mut rng).map_err(|e| TrainError::Config(e.to_string()))?;
        let mut stats = EncoderStats::new(&encoder_config);
        checkpoint::fill_encoder(&mut encoder, &mut stats, ckpt)
            .map_err(|e| TrainError::Data(e.to_string()))?;

        let fused_dim = encoder_config.output_dim() + if run.use_sentiment { 4 } else { 0 };
        let indices = ckpt.require("select.indices").map_err(|e| TrainError::Data(e.to_string()))?;
        let scores = ckpt.require("select.scores").map_err(|e| TrainError::Data(e.to_string()))?;
        let mask = SelectionMask {
            indices: indices.data().iter().map(|&v| v as usize).collect(),
            scores: scores.data().to_vec(),
        };
        mask.validate(fused_dim).map_err(TrainError::Select)?;

        let gbls_config = run.gbls.to_config(mask.indices.len());
        let mut gbls =
            GblsParams::init(&gbls_config, &mut rng).map_err(TrainError::Stage2)?;
        checkpoint::fill_gbls(&mut gbls, ckpt).map_err(|e| TrainError::Data(e.to_string()))?;

        let threshold = ckpt
            .require("train.threshold")
            .map_err(|e| TrainError::Data(e.to_string()))?
            .item();
        if !(0.0 < threshold && threshold < 1.0) {
            return Err(TrainError::Data(format!("stored threshold {threshold} out of range")));
        }
        Ok(TrainedModel {
            vocab,
            encoder_config,
            encoder,
            stats,
            gbls,
            mask,
            threshold,
            use_sentiment: run.use_sentiment,
            max_len: run.dataset.max_len,
        })
    }

    pub fn prepare_text(&self, text: &str) -> Result<Example, TrainError> {
        let tokens = tokenize(&normalize(text));
        let (ids, mask) = encode(&tokens, &self.vocab, self.max_len)
            .map_err(|e| TrainError::Data(e.to_string()))?;
        Ok(Example { tokens, ids, mask, label: 0, subgroups: Vec::new() })
    }

    pub fn features(
        &self,
        examples: &[Example],
        lexicon: &SentimentLexicon,
    ) -> Result<Vec<Vec<f64>>, TrainError> {
        let fused =
            extract_features(examples, &self.encoder, &self.stats, lexicon, self.use_sentiment)?;
        Ok(apply_mask(&fused, &self.mask)?)
    }

    pub fn probabilities(
        &self,
        texts: &[String],
        lexicon: &SentimentLexicon,
    ) -> Result<Vec<f64>, TrainError> {
        let examples: Vec<Example> =
            texts.iter().map(|t| self.prepare_text(t)).collect::<Result<_, _>>()?;
        let x = self.features(&examples, lexicon)?;
        Ok(gbls_predict_batch(&self.gbls, &x)?)
    }

    pub fn probability(
        &self,
        text: &str,
        lexicon: &SentimentLexicon,
    ) -> Result<f64, TrainError> {
        Ok(self.probabilities(&[text.to_string()], lexicon)?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::select::SelectMethod;

    fn tiny_encoder(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            max_relative_distance: 4,
            max_len: 12,
            reductions: vec![8],
            se_ratio: 2,
            dropout: 0.1,
            use_se: true,
        }
    }

    fn tiny_corpus(n_each: usize, tagged: bool) -> Vec<RawRecord> {
        let nasty = [
            "you are a stupid idiot and everyone hates you",
            "shut up you worthless ugly loser",
            "nobody likes you pathetic trash go away",
            "you are dumb and awful and disgusting",
        ];
        let kind = [
            "the weather is lovely and the garden looks great",
            "thanks for the wonderful help today my friend",
            "this recipe is fantastic and easy to follow",
            "what a beautiful morning for a calm walk",
        ];
        let tags = ["group_a", "group_b"];
        let mut out = Vec::new();
        for i in 0..n_each {
            let subgroups = if tagged && i % 2 == 0 {
                vec![tags[i % tags.len()].to_string()]
            } else {
                Vec::new()
            };
            out.push(RawRecord {
                text: format!("{} {}", nasty[i % nasty.len()], i % 7),
                label: 1,
                subgroups: subgroups.clone(),
            });
            out.push(RawRecord {
                text: format!("{} {}", kind[i % kind.len()], i % 7),
                label: 0,
                subgroups,
            });
        }
        out
    }

    fn prepared(records: &[RawRecord], max_len: usize) -> (Vec<Example>, Vocabulary) {
        let corpus: Vec<Vec<String>> =
            records.iter().map(|r| tokenize(&normalize(&r.text))).collect();
        let vocab = build_vocab(&corpus, 1).unwrap();
        let examples = prepare(records, &vocab, max_len).unwrap();
        (examples, vocab)
    }

    #[test]
    fn batching_merges_trailing_singleton() {
        let order: Vec<usize> = (0..5).collect();
        assert_eq!(batched(&order, 2), vec![vec![0, 1], vec![2, 3, 4]]);
        let order: Vec<usize> = (0..4).collect();
        assert_eq!(batched(&order, 2), vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(batched(&[7], 2), vec![vec![7]]);
        let order: Vec<usize> = (0..3).collect();
        assert_eq!(batched(&order, 3), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn supcon_matches_plain_loop_oracle() {
        // 3 rows, labels {0, 0, 1}: anchors 0 and 1 pair with each other,
        // anchor 2 has no partner and contributes nothing.
        let raw = vec![0.8, -0.2, 0.4, 0.1, 0.9, -0.5, -0.3, 0.2, 0.7, 0.6, -0.1, 0.2];
        let x = Tensor::matrix(3, 4, raw.clone()).unwrap();
        let labels = [0u8, 0, 1];
        let tau = 0.1;

        let mut z = vec![[0.0; 4]; 3];
        for i in 0..3 {
            let row = &raw[i * 4..(i + 1) * 4];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for j in 0..4 {
                z[i][j] = row[j] / norm;
            }
        }
        let sim = |a: usize, b: usize| {
            (0..4).map(|j| z[a][j] * z[b][j]).sum::<f64>() / tau
        };
        let mut expected = 0.0;
        for (i, p) in [(0usize, 1usize), (1, 0)] {
            let mut denom = 0.0;
            for a in 0..3 {
                if a != i {
                    denom += sim(i, a).exp();
                }
            }
            expected += -(sim(i, p).exp() / denom).ln() / 1.0;
        }
        expected /= 3.0;

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let loss = supcon_loss(&mut tape, xv, &labels, tau).unwrap().unwrap();
        let got = tape.value(loss).item();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

        // gradient of the composite against finite differences
        let err = crate::tensor::grad_check(
            |tape, v| {
                let l = supcon_loss(tape, v, &labels, tau)?.expect("pairs exist");
                Ok(l)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "supcon grad err {err}");
    }

    #[test]
    fn supcon_degenerate_batches_are_zero() {
        let x = Tensor::matrix(2, 3, vec![0.5, -0.1, 0.8, 0.3, 0.9, -0.4]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        // same label everywhere: nothing to contrast against
        assert!(supcon_loss(&mut tape, xv, &[1, 1], 0.1).unwrap().is_none());
        assert!(supcon_loss(&mut tape, xv, &[0, 0], 0.1).unwrap().is_none());
        // singleton
        let one = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        assert!(supcon_loss(&mut tape, one, &[1], 0.1).unwrap().is_none());
    }

    #[test]
    fn stage1_history_composes_and_tracks_best_epoch() {
        let records = tiny_corpus(8, false);
        let (examples, vocab) = prepared(&records, 12);
        let (train, val) = examples.split_at(12);
        let cfg = Stage1Config { epochs: 3, batch_size: 4, ..Stage1Config::default() };
        let out =
            stage1_finetune(train, val, &tiny_encoder(vocab.len()), &cfg, 7).unwrap();
        assert!(!out.history.is_empty() && out.history.len() <= 3);
        for row in &out.history {
            let recomposed = row.train_cls + cfg.contrastive_weight * row.train_con;
            assert!(
                (row.train_loss - recomposed).abs() <= 1e-12,
                "epoch {}: {} vs {}",
                row.epoch,
                row.train_loss,
                recomposed
            );
            assert!(row.train_con.is_finite() && row.val_loss.is_finite());
        }
        let min_epoch = out
            .history
            .iter()
            .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
            .unwrap()
            .epoch;
        assert_eq!(out.best_epoch, min_epoch);
        for (_, t) in out.params.tensors() {
            assert!(t.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_weight_reproduces_a_pure_bce_loop_bitwise() {
        let records = tiny_corpus(6, false);
        let (examples, vocab) = prepared(&records, 12);
        let (train, val) = examples.split_at(8);
        let enc_cfg = tiny_encoder(vocab.len());
        let cfg = Stage1Config {
            epochs: 2,
            batch_size: 4,
            contrastive_weight: 0.0,
            ..Stage1Config::default()
        };
        let out = stage1_finetune(train, val, &enc_cfg, &cfg, 11).unwrap();

        // reference loop: BCE only, written independently of the batch helper
        let mut rng = Prng::seed_from_u64(11);
        let mut params = EncoderParams::init(&enc_cfg, &mut rng).unwrap();
        let mut stats = EncoderStats::new(&enc_cfg);
        let mut head_w = xavier_uniform(enc_cfg.output_dim(), 1, &mut rng);
        let mut head_b = zeros_param(vec![1, 1]);
        let mut adam = Adam::new(cfg.learning_rate);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut ref_history = Vec::new();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let seqs: Vec<(Vec<usize>, Vec<bool>)> =
                    chunk.iter().map(|&i| (train[i].ids.clone(), train[i].mask.clone())).collect();
                let targets: Vec<f64> = chunk.iter().map(|&i| train[i].label as f64).collect();
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let hw = tape.leaf(&head_w);
                let hb = tape.leaf(&head_b);
                let reduced = encode_batch(
                    &mut tape, &bound, &enc_cfg, &mut stats, &seqs, Mode::Train, &mut rng,
                )
                .unwrap();
                let logits = tape.matmul(reduced, hw).unwrap();
                let logits = tape.add_rowvec(logits, hb).unwrap();
                let loss = tape.bce_with_logits_mean(logits, &targets).unwrap();
                tape.backward(loss).unwrap();
                params.absorb_grads(&tape, &bound);
                absorb_var(&mut head_w, &tape, hw);
                absorb_var(&mut head_b, &tape, hb);
                let mut tensors = params.tensors_mut();
                tensors.push(&mut head_w);
                tensors.push(&mut head_b);
                adam.step(&mut tensors);
                sum += tape.value(loss).item() * chunk.len() as f64;
            }
            // eval pass consumes no randomness; mirror it for the rng stream
            let mut val_sum = 0.0;
            for chunk in (0..val.len()).collect::<Vec<_>>().chunks(cfg.batch_size) {
                let seqs: Vec<(Vec<usize>, Vec<bool>)> =
                    chunk.iter().map(|&i| (val[i].ids.clone(), val[i].mask.clone())).collect();
                let targets: Vec<f64> = chunk.iter().map(|&i| val[i].label as f64).collect();
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let hw = tape.leaf(&head_w);
                let hb = tape.leaf(&head_b);
                let reduced = encode_batch(
                    &mut tape, &bound, &enc_cfg, &mut stats, &seqs, Mode::Eval, &mut rng,
                )
                .unwrap();
                let logits = tape.matmul(reduced, hw).unwrap();
                let logits = tape.add_rowvec(logits, hb).unwrap();
                let loss = tape.bce_with_logits_mean(logits, &targets).unwrap();
                val_sum += tape.value(loss).item() * chunk.len() as f64;
            }
            ref_history.push((sum / train.len() as f64, val_sum / val.len() as f64));
        }
        assert_eq!(out.history.len(), ref_history.len());
        for (row, (train_loss, val_loss)) in out.history.iter().zip(&ref_history) {
            assert_eq!(row.train_loss.to_bits(), train_loss.to_bits());
            assert_eq!(row.val_loss.to_bits(), val_loss.to_bits());
            assert_eq!(row.train_con, 0.0);
        }
    }

    #[test]
    fn singleton_and_single_label_rules() {
        let records = tiny_corpus(4, false);
        let (examples, vocab) = prepared(&records, 12);
        let enc_cfg = tiny_encoder(vocab.len());
        let cfg = Stage1Config { epochs: 1, batch_size: 4, ..Stage1Config::default() };

        // one-example train split cannot host the contrastive term, and even
        // without it batch norm needs two examples per training batch
        let err = stage1_finetune(&examples[..1], &examples[..2], &enc_cfg, &cfg, 1);
        assert!(matches!(err, Err(TrainError::Stage1(_))));
        let cfg0 = Stage1Config { contrastive_weight: 0.0, ..cfg.clone() };
        let err = stage1_finetune(&examples[..1], &examples[..2], &enc_cfg, &cfg0, 1);
        assert!(matches!(err, Err(TrainError::Stage1(_))));
        assert!(stage1_finetune(&examples[..2], &examples[..2], &enc_cfg, &cfg0, 1).is_ok());

        // all-positive split: every batch is single-label, so con stays 0
        let positives: Vec<Example> =
            examples.iter().filter(|e| e.label == 1).cloned().collect();
        let out = stage1_finetune(&positives, &positives, &enc_cfg, &cfg, 2).unwrap();
        for row in &out.history {
            assert_eq!(row.train_con, 0.0);
            assert_eq!(row.train_loss, row.train_cls);
        }

        // invalid configs are refused up front
        let bad = Stage1Config { batch_size: 1, ..Stage1Config::default() };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let bad = Stage1Config { contrastive_temperature: 0.0, ..Stage1Config::default() };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn features_fuse_sentiment_when_asked() {
        let records = tiny_corpus(3, false);
        let (examples, vocab) = prepared(&records, 12);
        let enc_cfg = tiny_encoder(vocab.len());
        let mut rng = Prng::seed_from_u64(5);
        let params = EncoderParams::init(&enc_cfg, &mut rng).unwrap();
        let stats = EncoderStats::new(&enc_cfg);
        let lexicon = SentimentLexicon::bundled();

        let with = extract_features(&examples, &params, &stats, &lexicon, true).unwrap();
        let without = extract_features(&examples, &params, &stats, &lexicon, false).unwrap();
        assert!(with.iter().all(|v| v.len() == enc_cfg.output_dim() + 4));
        assert!(without.iter().all(|v| v.len() == enc_cfg.output_dim()));
        for (a, b) in with.iter().zip(&without) {
            assert_eq!(&a[..b.len()], &b[..], "sentiment only appends");
        }

        // a text with no lexicon hits carries the neutral profile
        let neutral_rec = vec![RawRecord {
            text: "the the the".into(),
            label: 0,
            subgroups: Vec::new(),
        }];
        let neutral = prepare(&neutral_rec, &vocab, 12).unwrap();
        let v = extract_features(&neutral, &params, &stats, &lexicon, true).unwrap();
        let tail = &v[0][enc_cfg.output_dim()..];
        assert_eq!(tail, &[0.0, 0.0, 1.0, 0.0]);
    }

    fn tiny_run_config() -> RunConfig {
        let mut run = RunConfig::default();
        run.seed = 13;
        run.dataset.max_len = 12;
        run.dataset.split = [0.6, 0.2, 0.2];
        run.encoder.d_model = 16;
        run.encoder.n_layers = 1;
        run.encoder.n_heads = 2;
        run.encoder.max_relative_distance = 4;
        run.encoder.reductions = vec![8];
        run.encoder.se_ratio = 2;
        run.stage1.epochs = 2;
        run.stage1.batch_size = 8;
        run.selector.method = SelectMethod::Mi;
        run.selector.keep_k = Some(8);
        run.gbls.hidden_dim = 24;
        run.gbls.n_heads = 2;
        run.gbls.n_groups = 4;
        run.gbls.max_epochs = 30;
        run.gbls.batch_size = 16;
        run
    }

    #[test]
    fn pipeline_runs_deterministically_and_reports_bias_only_with_tags() {
        let lexicon = SentimentLexicon::bundled();
        let run = tiny_run_config();

        let tagged = tiny_corpus(40, true);
        let out1 = run_pipeline(&tagged, &run, &lexicon).unwrap();
        let out2 = run_pipeline(&tagged, &run, &lexicon).unwrap();
        assert_eq!(
            serde_json::to_string(&out1.metrics).unwrap(),
            serde_json::to_string(&out2.metrics).unwrap()
        );
        assert_eq!(out1.threshold, out2.threshold);
        assert_eq!(out1.mask.indices, out2.mask.indices);
        assert_eq!(out1.stage1_history.len(), out2.stage1_history.len());
        for ((_, a), (_, b)) in out1.gbls.tensors().iter().zip(out2.gbls.tensors().iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(out1.bias.is_some(), "tags present, bias expected");
        assert_eq!(out1.fused_dim, 8 + 4);
        assert_eq!(out1.mask.indices.len(), 8);
        assert!(out1.metrics.accuracy >= 0.75, "separable fixture, got {}", out1.metrics.accuracy);

        let untagged = tiny_corpus(20, false);
        let out3 = run_pipeline(&untagged, &run, &lexicon).unwrap();
        assert!(out3.bias.is_none());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let lexicon = SentimentLexicon::bundled();
        let run = tiny_run_config();
        let records = tiny_corpus(25, false);
        let out = run_pipeline(&records, &run, &lexicon).unwrap();

        let dir = std::env::temp_dir().join("gbls-train-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        checkpoint::save(&path, &run.digest(), &model_records(&out)).unwrap();
        let ckpt = checkpoint::load(&path).unwrap();
        ckpt.check_digest(&run.digest()).unwrap();

        let restored = TrainedModel::from_checkpoint(&ckpt, &run, out.vocab.clone()).unwrap();
        let live = out.model(&run);
        let texts: Vec<String> = records.iter().take(10).map(|r| r.text.clone()).collect();
        let a = live.probabilities(&texts, &lexicon).unwrap();
        let b = restored.probabilities(&texts, &lexicon).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits(), "restored model must match exactly");
        }
        assert_eq!(restored.threshold, out.threshold);
    }
}
