//! Gated broad classification head: wide projection into group tokens,
//! multi-head attention across the groups, sigmoid-gated highway mixing,
//! layer norm, and a scalar sigmoid output.

use crate::metrics;
use crate::optim::{ones_param, xavier_uniform, zeros_param, Adam};
use crate::tensor::{Mode, Prng, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GBLS_LN_EPS: f64 = 1e-5;
/// Probabilities leaving public predict paths stay inside (0,1) by this margin.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GblsError {
    #[error("bad head config: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("training labels contain a single class")]
    SingleClass,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GblsConfig {
    /// Post-selection feature width.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_groups: usize,
    pub dropout: f64,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl GblsConfig {
    pub fn new(input_dim: usize) -> Self {
        GblsConfig {
            input_dim,
            hidden_dim: 216,
            n_heads: 8,
            n_groups: 8,
            dropout: 0.1,
            l2_lambda: 1e-4,
            learning_rate: 1e-3,
            max_epochs: 100,
            patience: 10,
            batch_size: 32,
        }
    }

    /// Width of one group token.
    pub fn d_group(&self) -> usize {
        self.hidden_dim / self.n_groups
    }

    pub fn validate(&self) -> Result<(), GblsError> {
        if self.input_dim == 0 {
            return Err(GblsError::Config("input_dim must be >= 1".into()));
        }
        if self.hidden_dim == 0 || self.n_groups == 0 || self.n_heads == 0 {
            return Err(GblsError::Config("zero-sized dimension".into()));
        }
        if self.hidden_dim % self.n_groups != 0 {
            return Err(GblsError::Config(format!(
                "hidden_dim {} not divisible by n_groups {}",
                self.hidden_dim, self.n_groups
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GblsError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.learning_rate <= 0.0 || self.l2_lambda < 0.0 {
            return Err(GblsError::Config("bad learning rate or l2_lambda".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(GblsError::Config("max_epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GblsParams {
    pub config: GblsConfig,
    pub w_in: Tensor,
    /// Per-head projections over group tokens, each [d_group, d_group].
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    /// Concatenated heads back to one token: [n_heads*d_group, d_group].
    pub wo: Tensor,
    pub bo: Tensor,
    pub gate_w: Tensor,
    pub gate_b: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl GblsParams {
    pub fn init(config: &GblsConfig, rng: &mut Prng) -> Result<Self, GblsError> {
        config.validate()?;
        let dg = config.d_group();
        let hidden = config.hidden_dim;
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for _ in 0..config.n_heads {
            wq.push(xavier_uniform(dg, dg, rng));
            wk.push(xavier_uniform(dg, dg, rng));
            wv.push(xavier_uniform(dg, dg, rng));
        }
        Ok(GblsParams {
            config: config.clone(),
            w_in: xavier_uniform(config.input_dim, hidden, rng),
            wq,
            wk,
            wv,
            wo: xavier_uniform(config.n_heads * dg, dg, rng),
            bo: zeros_param(vec![dg]),
            gate_w: xavier_uniform(2 * hidden, hidden, rng),
            gate_b: zeros_param(vec![hidden]),
            ln_gain: ones_param(hidden),
            ln_bias: zeros_param(vec![hidden]),
            w_out: xavier_uniform(hidden, 1, rng),
            b_out: zeros_param(vec![1]),
        })
    }

    /// Canonical (name, tensor) walk; bind, absorb, optimizer and checkpoint
    /// all follow this order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("gbls.w_in".into(), &self.w_in)];
        for i in 0..self.wq.len() {
            out.push((format!("gbls.head{i}.wq"), &self.wq[i]));
            out.push((format!("gbls.head{i}.wk"), &self.wk[i]));
            out.push((format!("gbls.head{i}.wv"), &self.wv[i]));
        }
        out.push(("gbls.attn.wo".into(), &self.wo));
        out.push(("gbls.attn.bo".into(), &self.bo));
        out.push(("gbls.gate.w".into(), &self.gate_w));
        out.push(("gbls.gate.b".into(), &self.gate_b));
        out.push(("gbls.ln.gain".into(), &self.ln_gain));
        out.push(("gbls.ln.bias".into(), &self.ln_bias));
        out.push(("gbls.out.w".into(), &self.w_out));
        out.push(("gbls.out.b".into(), &self.b_out));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.w_in];
        for ((q, k), v) in self.wq.iter_mut().zip(self.wk.iter_mut()).zip(self.wv.iter_mut()) {
            out.push(q);
            out.push(k);
            out.push(v);
        }
        out.extend([
            &mut self.wo,
            &mut self.bo,
            &mut self.gate_w,
            &mut self.gate_b,
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.w_out,
            &mut self.b_out,
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundGbls {
        let all: Vec<Var> = self.tensors().iter().map(|(_, t)| tape.leaf(t)).collect();
        BoundGbls::from_vars(&self.config, &all)
    }

    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundGbls) {
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

#[derive(Debug, Clone)]
pub struct BoundGbls {
    pub w_in: Var,
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
    pub bo: Var,
    pub gate_w: Var,
    pub gate_b: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub w_out: Var,
    pub b_out: Var,
    pub all: Vec<Var>,
}

impl BoundGbls {
    /// Consumes vars in the exact order `GblsParams::tensors` emits them.
    pub fn from_vars(config: &GblsConfig, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("var list shorter than the parameter walk");
        let w_in = next();
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for _ in 0..config.n_heads {
            wq.push(next());
            wk.push(next());
            wv.push(next());
        }
        let out = BoundGbls {
            w_in,
            wq,
            wk,
            wv,
            wo: next(),
            bo: next(),
            gate_w: next(),
            gate_b: next(),
            ln_gain: next(),
            ln_bias: next(),
            w_out: next(),
            b_out: next(),
            all: vars.to_vec(),
        };
        assert!(it.next().is_none(), "var list longer than the parameter walk");
        out
    }
}

/// Intermediate stages exposed for inspection.
pub(crate) struct GblsParts {
    pub h: Var,
    pub a: Var,
    pub g: Var,
    pub mixed: Var,
}

/// Head forward producing raw logits [batch, 1]. `zero_gate` replaces the
/// gate with exact zeros so mixed falls back to h bit-for-bit.
pub(crate) fn gbls_core(
    tape: &mut Tape,
    bound: &BoundGbls,
    config: &GblsConfig,
    x: Var,
    mode: Mode,
    rng: &mut Prng,
    zero_gate: bool,
) -> Result<(Var, GblsParts), GblsError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != config.input_dim {
        return Err(GblsError::Input(format!(
            "expected [batch, {}], got {:?}",
            config.input_dim, shape
        )));
    }
    let batch = shape[0];
    let dg = config.d_group();
    let scale = 1.0 / (dg as f64).sqrt();

    let hp = tape.matmul(x, bound.w_in)?;
    let h = tape.gelu(hp)?;

    // attention runs per example over its G group tokens
    let mut attn_rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = tape.slice_rows(h, b, 1)?;
        let tokens = tape.reshape(row, vec![config.n_groups, dg])?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for i in 0..config.n_heads {
            let q = tape.matmul(tokens, bound.wq[i])?;
            let k = tape.matmul(tokens, bound.wk[i])?;
            let v = tape.matmul(tokens, bound.wv[i])?;
            let kt = tape.transpose(k)?;
            let raw = tape.matmul(q, kt)?;
            let scores = tape.scale(raw, scale)?;
            let probs = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(probs, v)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let proj = tape.matmul(cat, bound.wo)?;
        let proj = tape.add_rowvec(proj, bound.bo)?;
        attn_rows.push(tape.reshape(proj, vec![1, config.hidden_dim])?);
    }
    let a = tape.concat_rows(&attn_rows)?;

    let g = if zero_gate {
        tape.constant(Tensor::zeros(vec![batch, config.hidden_dim]))
    } else {
        let cat = tape.concat_cols(&[h, a])?;
        let pre = tape.matmul(cat, bound.gate_w)?;
        let pre = tape.add_rowvec(pre, bound.gate_b)?;
        tape.sigmoid(pre)?
    };
    let ones = tape.constant(Tensor::new(
        vec![batch, config.hidden_dim],
        vec![1.0; batch * config.hidden_dim],
    )?);
    let inv = tape.sub(ones, g)?;
    let ga = tape.mul(g, a)?;
    let gh = tape.mul(inv, h)?;
    let mixed = tape.add(ga, gh)?;

    let normed = tape.layer_norm(mixed, bound.ln_gain, bound.ln_bias, GBLS_LN_EPS)?;
    let dropped = tape.dropout(normed, config.dropout, rng, mode)?;
    let logit = tape.matmul(dropped, bound.w_out)?;
    let logits = tape.add_rowvec(logit, bound.b_out)?;
    Ok((logits, GblsParts { h, a, g, mixed }))
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Eval-mode probabilities for a feature batch, strictly inside (0,1).
pub fn gbls_predict_batch(params: &GblsParams, xs: &[Vec<f64>]) -> Result<Vec<f64>, GblsError> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let dim = params.config.input_dim;
    if xs.iter().any(|r| r.len() != dim) {
        return Err(GblsError::Input("feature row width mismatch".into()));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let data: Vec<f64> = xs.iter().flatten().copied().collect();
    let x = tape.constant(Tensor::matrix(xs.len(), dim, data)?);
    let mut rng = Prng::seed_from_u64(0);
    let (logits, _) =
        gbls_core(&mut tape, &bound, &params.config, x, Mode::Eval, &mut rng, false)?;
    Ok(tape
        .value(logits)
        .data()
        .iter()
        .map(|&z| clamp_prob(crate::tensor::sigmoid_scalar(z)))
        .collect())
}

/// Single-example probability.
pub fn gbls_forward(params: &GblsParams, x: &[f64]) -> Result<f64, GblsError> {
    Ok(gbls_predict_batch(params, &[x.to_vec()])?[0])
}

/// Decision rule: label 1 iff probability >= theta.
pub fn predict_with_threshold(p: f64, theta: f64) -> u8 {
    debug_assert!((0.0..=1.0).contains(&p) && theta > 0.0 && theta < 1.0);
    u8::from(p >= theta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GblsEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct GblsTrainOutcome {
    pub params: GblsParams,
    pub history: Vec<GblsEpoch>,
    /// Epoch whose weights were kept (best val loss).
    pub best_epoch: usize,
}

fn l2_penalty(tape: &mut Tape, bound: &BoundGbls, lambda: f64) -> Result<Var, TensorError> {
    let mut acc: Option<Var> = None;
    for &v in &bound.all {
        let sq = tape.sum_squares(v)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    tape.scale(acc.unwrap(), lambda)
}

fn l2_value(params: &GblsParams) -> f64 {
    params
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum()
}

fn eval_loss_and_probs(
    params: &GblsParams,
    xs: &[Vec<f64>],
    ys: &[u8],
) -> Result<(f64, Vec<f64>), GblsError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let data: Vec<f64> = xs.iter().flatten().copied().collect();
    let x = tape.constant(Tensor::matrix(xs.len(), params.config.input_dim, data)?);
    let mut rng = Prng::seed_from_u64(0);
    let (logits, _) =
        gbls_core(&mut tape, &bound, &params.config, x, Mode::Eval, &mut rng, false)?;
    let targets: Vec<f64> = ys.iter().map(|&y| y as f64).collect();
    let loss = tape.bce_with_logits_mean(logits, &targets)?;
    let probs = tape
        .value(logits)
        .data()
        .iter()
        .map(|&z| clamp_prob(crate::tensor::sigmoid_scalar(z)))
        .collect();
    Ok((tape.value(loss).item(), probs))
}

/// Mini-batch Adam on BCE + l2_lambda * sum of squared parameters. Early
/// stopping tracks the same objective on the validation split (so the
/// regularizer keeps counting when comparing epochs), with the configured
/// patience. Returns the best-validation parameters and per-epoch history.
pub fn gbls_train(
    train_x: &[Vec<f64>],
    train_y: &[u8],
    val_x: &[Vec<f64>],
    val_y: &[u8],
    config: &GblsConfig,
    seed: u64,
) -> Result<GblsTrainOutcome, GblsError> {
    config.validate()?;
    if train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(GblsError::Input("feature/label length mismatch".into()));
    }
    if train_x.is_empty() || val_x.is_empty() {
        return Err(GblsError::Input("empty split".into()));
    }
    let pos = train_y.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == train_y.len() {
        return Err(GblsError::SingleClass);
    }

    let mut rng = Prng::seed_from_u64(seed);
    let mut params = GblsParams::init(config, &mut rng)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut history = Vec::new();
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train_x.len()).collect();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<f64> =
                chunk.iter().flat_map(|&i| train_x[i].iter().copied()).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| train_y[i] as f64).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.constant(Tensor::matrix(chunk.len(), config.input_dim, xs)?);
            let (logits, _) =
                gbls_core(&mut tape, &bound, config, x, Mode::Train, &mut rng, false)?;
            let bce = tape.bce_with_logits_mean(logits, &targets)?;
            let loss = if config.l2_lambda > 0.0 {
                let l2 = l2_penalty(&mut tape, &bound, config.l2_lambda)?;
                tape.add(bce, l2)?
            } else {
                bce
            };
            tape.backward(loss)?;
            params.absorb_grads(&tape, &bound);
            adam.step(&mut params.tensors_mut());
            train_loss_sum += tape.value(loss).item() * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = train_loss_sum / seen as f64;
        let (val_bce, val_probs) = eval_loss_and_probs(&params, val_x, val_y)?;
        let val_loss = val_bce + config.l2_lambda * l2_value(&params);
        let val_f1 = metrics::confusion(&val_probs, val_y, 0.5)
            .map(|c| c.f1())
            .unwrap_or(0.0);
        history.push(GblsEpoch { epoch, train_loss, val_loss, val_f1 });
        if val_loss < best_val {
            best_val = val_loss;
            best = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(GblsTrainOutcome { params: best, history, best_epoch })
}
