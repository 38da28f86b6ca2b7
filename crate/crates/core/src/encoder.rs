//! Content/position-disentangled transformer encoder with squeeze-excitation
//! recalibration and a batch-normalized reduction head. Produces the per-text
//! contextual feature vector.

use crate::optim::{ones_param, xavier_uniform, zeros_param};
use crate::tensor::{BnState, Mode, Prng, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("bad encoder config: {0}")]
    Config(String),
    #[error("bad sequence: {0}")]
    Sequence(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Relative-distance clamp; buckets cover [-k, k].
    pub max_relative_distance: usize,
    pub max_len: usize,
    /// Widths after each reduction block, strictly decreasing from d_model.
    pub reductions: Vec<usize>,
    pub se_ratio: usize,
    pub dropout: f64,
    pub use_se: bool,
}

impl EncoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 96,
            n_layers: 2,
            n_heads: 4,
            max_relative_distance: 16,
            max_len: 64,
            reductions: vec![48, 24],
            se_ratio: 4,
            dropout: 0.1,
            use_se: true,
        }
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_buckets(&self) -> usize {
        2 * self.max_relative_distance + 1
    }

    /// Width of the contextual feature vector.
    pub fn output_dim(&self) -> usize {
        *self.reductions.last().unwrap()
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.vocab_size < 3 {
            return Err(EncoderError::Config("vocab_size must cover the reserved ids".into()));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(EncoderError::Config("zero-sized dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EncoderError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.reductions.is_empty() {
            return Err(EncoderError::Config("reductions must not be empty".into()));
        }
        let mut prev = self.d_model;
        for &r in &self.reductions {
            if r == 0 || r >= prev {
                return Err(EncoderError::Config(format!(
                    "reductions {:?} not strictly decreasing from d_model {}",
                    self.reductions, self.d_model
                )));
            }
            prev = r;
        }
        if self.se_ratio == 0 || self.d_model % self.se_ratio != 0 {
            return Err(EncoderError::Config(format!(
                "se_ratio {} must divide d_model {}",
                self.se_ratio, self.d_model
            )));
        }
        if self.max_relative_distance == 0 {
            return Err(EncoderError::Config("max_relative_distance must be >= 1".into()));
        }
        if self.max_len < 2 {
            return Err(EncoderError::Config("max_len must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ReduceParams {
    pub w: Tensor,
    pub b: Tensor,
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub embed: Tensor,
    pub relpos: Tensor,
    pub layers: Vec<LayerParams>,
    pub se_w1: Tensor,
    pub se_b1: Tensor,
    pub se_w2: Tensor,
    pub se_b2: Tensor,
    pub reduce: Vec<ReduceParams>,
}

/// Batch-norm running statistics, one slot per reduction block. Mutated by
/// train-mode forwards only; checkpointed alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStats {
    pub bn: Vec<BnState>,
}

impl EncoderStats {
    pub fn new(config: &EncoderConfig) -> Self {
        EncoderStats { bn: config.reductions.iter().map(|&d| BnState::new(d)).collect() }
    }
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, rng: &mut Prng) -> Result<Self, EncoderError> {
        config.validate()?;
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: xavier_uniform(d, d, rng),
                bq: zeros_param(vec![d]),
                wk: xavier_uniform(d, d, rng),
                bk: zeros_param(vec![d]),
                wv: xavier_uniform(d, d, rng),
                bv: zeros_param(vec![d]),
                wo: xavier_uniform(d, d, rng),
                bo: zeros_param(vec![d]),
                ln1_gain: ones_param(d),
                ln1_bias: zeros_param(vec![d]),
                ff_w1: xavier_uniform(d, config.d_ff(), rng),
                ff_b1: zeros_param(vec![config.d_ff()]),
                ff_w2: xavier_uniform(config.d_ff(), d, rng),
                ff_b2: zeros_param(vec![d]),
                ln2_gain: ones_param(d),
                ln2_bias: zeros_param(vec![d]),
            })
            .collect();
        let se_hidden = d / config.se_ratio;
        let mut reduce = Vec::new();
        let mut prev = d;
        for &dim in &config.reductions {
            reduce.push(ReduceParams {
                w: xavier_uniform(prev, dim, rng),
                b: zeros_param(vec![dim]),
                gain: ones_param(dim),
                bias: zeros_param(vec![dim]),
            });
            prev = dim;
        }
        Ok(EncoderParams {
            config: config.clone(),
            embed: xavier_uniform(config.vocab_size, d, rng),
            relpos: xavier_uniform(config.n_buckets(), d, rng),
            layers,
            se_w1: xavier_uniform(d, se_hidden, rng),
            se_b1: zeros_param(vec![se_hidden]),
            se_w2: xavier_uniform(se_hidden, d, rng),
            se_b2: zeros_param(vec![d]),
            reduce,
        })
    }

    /// Canonical (name, tensor) enumeration; bind, absorb, the optimizer and
    /// the checkpoint all walk this order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("encoder.embed".into(), &self.embed),
            ("encoder.relpos".into(), &self.relpos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("encoder.layer{i}");
            out.push((format!("{p}.attn.wq"), &l.wq));
            out.push((format!("{p}.attn.bq"), &l.bq));
            out.push((format!("{p}.attn.wk"), &l.wk));
            out.push((format!("{p}.attn.bk"), &l.bk));
            out.push((format!("{p}.attn.wv"), &l.wv));
            out.push((format!("{p}.attn.bv"), &l.bv));
            out.push((format!("{p}.attn.wo"), &l.wo));
            out.push((format!("{p}.attn.bo"), &l.bo));
            out.push((format!("{p}.ln1.gain"), &l.ln1_gain));
            out.push((format!("{p}.ln1.bias"), &l.ln1_bias));
            out.push((format!("{p}.ffn.w1"), &l.ff_w1));
            out.push((format!("{p}.ffn.b1"), &l.ff_b1));
            out.push((format!("{p}.ffn.w2"), &l.ff_w2));
            out.push((format!("{p}.ffn.b2"), &l.ff_b2));
            out.push((format!("{p}.ln2.gain"), &l.ln2_gain));
            out.push((format!("{p}.ln2.bias"), &l.ln2_bias));
        }
        out.push(("encoder.se.w1".into(), &self.se_w1));
        out.push(("encoder.se.b1".into(), &self.se_b1));
        out.push(("encoder.se.w2".into(), &self.se_w2));
        out.push(("encoder.se.b2".into(), &self.se_b2));
        for (i, r) in self.reduce.iter().enumerate() {
            let p = format!("encoder.reduce{i}");
            out.push((format!("{p}.w"), &r.w));
            out.push((format!("{p}.b"), &r.b));
            out.push((format!("{p}.gain"), &r.gain));
            out.push((format!("{p}.bias"), &r.bias));
        }
        out
    }

    /// Mutable view in the exact order of `tensors`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed, &mut self.relpos];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.ff_w1,
                &mut l.ff_b1,
                &mut l.ff_w2,
                &mut l.ff_b2,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
            ]);
        }
        out.extend([&mut self.se_w1, &mut self.se_b1, &mut self.se_w2, &mut self.se_b2]);
        for r in self.reduce.iter_mut() {
            out.extend([&mut r.w, &mut r.b, &mut r.gain, &mut r.bias]);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        let named = self.tensors();
        let all: Vec<Var> = named.iter().map(|(_, t)| tape.leaf(t)).collect();
        BoundEncoder::from_vars(&self.config, &all)
    }

    /// Pulls gradients off the tape into the parameter tensors, accumulating
    /// over calls until the optimizer consumes them.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundEncoder) {
        for (t, &v) in self.tensors_mut().into_iter().zip(bound.all.iter()) {
            let Some(g) = tape.grad(v) else { continue };
            match &mut t.grad {
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(g) {
                        *a += gi;
                    }
                }
                None => t.grad = Some(g.to_vec()),
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundReduce {
    pub w: Var,
    pub b: Var,
    pub gain: Var,
    pub bias: Var,
}

/// Tape handles for every encoder parameter, in `tensors` order.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub embed: Var,
    pub relpos: Var,
    pub layers: Vec<BoundLayer>,
    pub se_w1: Var,
    pub se_b1: Var,
    pub se_w2: Var,
    pub se_b2: Var,
    pub reduce: Vec<BoundReduce>,
    pub all: Vec<Var>,
}

impl BoundEncoder {
    /// Consumes vars in the exact order `EncoderParams::tensors` emits them.
    pub fn from_vars(config: &EncoderConfig, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("var list shorter than the parameter walk");
        let embed = next();
        let relpos = next();
        let layers = (0..config.n_layers)
            .map(|_| BoundLayer {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                ff_w1: next(),
                ff_b1: next(),
                ff_w2: next(),
                ff_b2: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            })
            .collect();
        let se_w1 = next();
        let se_b1 = next();
        let se_w2 = next();
        let se_b2 = next();
        let reduce = (0..config.reductions.len())
            .map(|_| BoundReduce { w: next(), b: next(), gain: next(), bias: next() })
            .collect();
        assert!(it.next().is_none(), "var list longer than the parameter walk");
        BoundEncoder {
            embed,
            relpos,
            layers,
            se_w1,
            se_b1,
            se_w2,
            se_b2,
            reduce,
            all: vars.to_vec(),
        }
    }
}

fn bucket(from: usize, to: usize, k: usize) -> usize {
    let delta = (from as isize - to as isize).clamp(-(k as isize), k as isize);
    (delta + k as isize) as usize
}

/// Multi-head disentangled attention, pre-residual: per head the raw score is
/// Qc_i.Kc_j + Qc_i.Kr[d(i,j)] + Kc_j.Qr[d(j,i)] with the relative distance
/// clamped to [-k, k] and the sum scaled by 1/sqrt(3*d_head). Returns the
/// projected context and the per-head attention rows.
pub(crate) fn attention_block(
    tape: &mut Tape,
    h: Var,
    keep: &[bool],
    layer: &BoundLayer,
    relpos: Var,
    config: &EncoderConfig,
) -> Result<(Var, Vec<Var>), TensorError> {
    let n = keep.len();
    let dh = config.d_head();
    let k = config.max_relative_distance;

    let qc = tape.matmul(h, layer.wq)?;
    let qc = tape.add_rowvec(qc, layer.bq)?;
    let kc = tape.matmul(h, layer.wk)?;
    let kc = tape.add_rowvec(kc, layer.bk)?;
    let vc = tape.matmul(h, layer.wv)?;
    let vc = tape.add_rowvec(vc, layer.bv)?;
    // position keys and queries share the content projections
    let kr = tape.matmul(relpos, layer.wk)?;
    let qr = tape.matmul(relpos, layer.wq)?;

    let mut c2p_rows = Vec::with_capacity(n * n);
    let mut c2p_cols = Vec::with_capacity(n * n);
    let mut p2c_rows = Vec::with_capacity(n * n);
    let mut p2c_cols = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            c2p_rows.push(i);
            c2p_cols.push(bucket(i, j, k));
            p2c_rows.push(j);
            p2c_cols.push(bucket(j, i, k));
        }
    }

    let scale = 1.0 / (3.0 * dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.n_heads);
    let mut probs_per_head = Vec::with_capacity(config.n_heads);
    for head in 0..config.n_heads {
        let qch = tape.slice_cols(qc, head * dh, dh)?;
        let kch = tape.slice_cols(kc, head * dh, dh)?;
        let vch = tape.slice_cols(vc, head * dh, dh)?;
        let krh = tape.slice_cols(kr, head * dh, dh)?;
        let qrh = tape.slice_cols(qr, head * dh, dh)?;

        let kct = tape.transpose(kch)?;
        let c2c = tape.matmul(qch, kct)?;
        let krt = tape.transpose(krh)?;
        let qkr = tape.matmul(qch, krt)?;
        let c2p = tape.gather_pairs(qkr, &c2p_rows, &c2p_cols, n, n)?;
        let qrt = tape.transpose(qrh)?;
        let kqr = tape.matmul(kch, qrt)?;
        let p2c = tape.gather_pairs(kqr, &p2c_rows, &p2c_cols, n, n)?;

        let sum = tape.add(c2c, c2p)?;
        let sum = tape.add(sum, p2c)?;
        let scores = tape.scale(sum, scale)?;
        let probs = tape.masked_softmax_rows(scores, keep)?;
        let ctx = tape.matmul(probs, vch)?;
        heads.push(ctx);
        probs_per_head.push(probs);
    }
    let ctx = tape.concat_cols(&heads)?;
    let proj = tape.matmul(ctx, layer.wo)?;
    let proj = tape.add_rowvec(proj, layer.bo)?;
    Ok((proj, probs_per_head))
}

/// One transformer layer: attention and feed-forward sublayers, each with
/// dropout, residual connection, then layer norm. Also returns the post-
/// attention hidden state and the attention rows for inspection.
pub(crate) fn layer_forward(
    tape: &mut Tape,
    h: Var,
    keep: &[bool],
    layer: &BoundLayer,
    relpos: Var,
    config: &EncoderConfig,
    mode: Mode,
    rng: &mut Prng,
) -> Result<(Var, Var, Vec<Var>), TensorError> {
    let (proj, probs) = attention_block(tape, h, keep, layer, relpos, config)?;
    let proj = tape.dropout(proj, config.dropout, rng, mode)?;
    let sum1 = tape.add(h, proj)?;
    let a1 = tape.layer_norm(sum1, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;

    let ff = tape.matmul(a1, layer.ff_w1)?;
    let ff = tape.add_rowvec(ff, layer.ff_b1)?;
    let ff = tape.gelu(ff)?;
    let ff = tape.matmul(ff, layer.ff_w2)?;
    let ff = tape.add_rowvec(ff, layer.ff_b2)?;
    let ff = tape.dropout(ff, config.dropout, rng, mode)?;
    let sum2 = tape.add(a1, ff)?;
    let out = tape.layer_norm(sum2, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
    Ok((out, a1, probs))
}

/// Channel recalibration: s = sigmoid(W2.relu(W1.z)), output = pooled * s.
pub(crate) fn se_block(
    tape: &mut Tape,
    pooled: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var, TensorError> {
    let z = tape.matmul(pooled, w1)?;
    let z = tape.add_rowvec(z, b1)?;
    let z = tape.relu(z)?;
    let s = tape.matmul(z, w2)?;
    let s = tape.add_rowvec(s, b2)?;
    let s = tape.sigmoid(s)?;
    tape.mul(pooled, s)
}

fn check_sequence(config: &EncoderConfig, ids: &[usize], mask: &[bool]) -> Result<(), EncoderError> {
    if ids.is_empty() || ids.len() > config.max_len {
        return Err(EncoderError::Sequence(format!(
            "length {} outside 1..={}",
            ids.len(),
            config.max_len
        )));
    }
    if ids.len() != mask.len() {
        return Err(EncoderError::Sequence(format!(
            "ids length {} != mask length {}",
            ids.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(EncoderError::Sequence("mask keeps no position".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(EncoderError::Sequence(format!(
            "token id {bad} outside vocab of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Encoder trunk from per-example embedding matrices: transformer layers,
/// masked mean-pool, optional SE recalibration, then the reduction head.
/// Output is [batch, reductions.last()].
pub fn encode_from_embeds(
    tape: &mut Tape,
    bound: &BoundEncoder,
    config: &EncoderConfig,
    stats: &mut EncoderStats,
    embeds: &[Var],
    masks: &[Vec<bool>],
    mode: Mode,
    rng: &mut Prng,
) -> Result<Var, EncoderError> {
    if embeds.is_empty() || embeds.len() != masks.len() {
        return Err(EncoderError::Sequence("empty batch or mask count mismatch".into()));
    }
    if stats.bn.len() != config.reductions.len() {
        return Err(EncoderError::Config("stats do not match reduction blocks".into()));
    }
    let mut pooled_rows = Vec::with_capacity(embeds.len());
    for (&e, mask) in embeds.iter().zip(masks) {
        if !mask.iter().any(|&m| m) {
            return Err(EncoderError::Sequence("mask keeps no position".into()));
        }
        let mut h = e;
        for layer in &bound.layers {
            let (out, _, _) = layer_forward(tape, h, mask, layer, bound.relpos, config, mode, rng)?;
            h = out;
        }
        pooled_rows.push(tape.masked_mean_rows(h, mask)?);
    }
    let mut pooled = tape.concat_rows(&pooled_rows)?;
    if config.use_se {
        pooled = se_block(tape, pooled, bound.se_w1, bound.se_b1, bound.se_w2, bound.se_b2)?;
    }
    let mut x = pooled;
    for (block, state) in bound.reduce.iter().zip(stats.bn.iter_mut()) {
        let lin = tape.matmul(x, block.w)?;
        let lin = tape.add_rowvec(lin, block.b)?;
        let bn = tape.batch_norm(lin, block.gain, block.bias, state, BN_MOMENTUM, BN_EPS, mode)?;
        x = tape.gelu(bn)?;
    }
    Ok(x)
}

/// Full batch forward from token ids. Mask semantics follow `text::encode`:
/// true marks a real token, false marks padding.
#[allow(clippy::too_many_arguments)]
pub fn encode_batch(
    tape: &mut Tape,
    bound: &BoundEncoder,
    config: &EncoderConfig,
    stats: &mut EncoderStats,
    batch: &[(Vec<usize>, Vec<bool>)],
    mode: Mode,
    rng: &mut Prng,
) -> Result<Var, EncoderError> {
    let mut embeds = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    for (ids, mask) in batch {
        check_sequence(config, ids, mask)?;
        embeds.push(tape.gather_rows(bound.embed, ids)?);
        masks.push(mask.clone());
    }
    encode_from_embeds(tape, bound, config, stats, &embeds, &masks, mode, rng)
}

/// Eval-mode convenience for a single text; running stats are read, not
/// updated.
pub fn encode_text(
    params: &EncoderParams,
    stats: &EncoderStats,
    ids: &[usize],
    mask: &[bool],
) -> Result<Vec<f64>, EncoderError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut stats = stats.clone();
    let mut rng = Prng::seed_from_u64(0);
    let batch = vec![(ids.to_vec(), mask.to_vec())];
    let out = encode_batch(
        &mut tape,
        &bound,
        &params.config,
        &mut stats,
        &batch,
        Mode::Eval,
        &mut rng,
    )?;
    Ok(tape.value(out).data().to_vec())
}
