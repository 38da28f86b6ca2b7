//! Dense f64 tensors and reverse-mode autodiff on an arena tape.
//!
//! Tensors are rank-0..2 in practice (scalars stored as shape `[1]`, vectors
//! `[n]`, matrices `[m, n]`, row-major). Every op validates shapes, runs
//! sequentially in deterministic order, and rejects non-finite outputs.
//! Gradients accumulate additively across consumers; the backward sweep visits
//! each tape node exactly once in reverse insertion order.

use rand::Rng;
use thiserror::Error;

/// Seeded RNG used everywhere randomness is needed.
pub type Prng = rand_chacha::ChaCha12Rng;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar with a gradient path to at least one grad-requiring leaf")]
    Detached,
    #[error("function is not deterministic under repeated evaluation ({0} vs {1})")]
    NonDeterministic(f64, f64),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                detail: format!("shape {:?} does not describe {} elements", shape, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutation for optimizers; callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 { self.shape[1] } else { 1 }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<(usize, Vec<f64>)>>;

struct Node {
    value: Tensor,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Arena holding the forward values of one computation; insertion order is the
/// topological order, so one reverse sweep propagates all gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn col_of(shape: &[usize]) -> usize {
    if shape.len() == 2 { shape[1] } else { 1 }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad;
        self.push_unchecked(t.clone(), needs, None)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, false, None)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<Var> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    fn push_unchecked(&mut self, value: Tensor, needs_grad: bool, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node { value, needs_grad, backward });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[Var],
        backward: Option<BackwardFn>,
    ) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let numel: usize = shape.iter().product();
        debug_assert_eq!(numel, data.len());
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let t = Tensor { shape, data, requires_grad: false, grad: None };
        Ok(self.push_unchecked(t, needs, if needs { backward } else { None }))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, bool, bool)> {
        let sa = &self.nodes[a.0].value;
        let sb = &self.nodes[b.0].value;
        if sa.shape == sb.shape {
            Ok((sa.shape.clone(), false, false))
        } else if sb.numel() == 1 {
            Ok((sa.shape.clone(), false, true))
        } else if sa.numel() == 1 {
            Ok((sb.shape.clone(), true, false))
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", sa.shape, sb.shape),
            })
        }
    }

    /// Elementwise add; one side may be a scalar, which broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, a_sc, b_sc) = self.binary_shapes("add", a, b)?;
        let ad = &self.nodes[a.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| ad[if a_sc { 0 } else { i }] + bd[if b_sc { 0 } else { i }])
            .collect();
        let (ai, bi) = (a.0, b.0);
        self.push(
            "add",
            shape,
            data,
            &[a, b],
            Some(Box::new(move |g| {
                let ga = if a_sc { vec![g.iter().sum()] } else { g.to_vec() };
                let gb = if b_sc { vec![g.iter().sum()] } else { g.to_vec() };
                vec![(ai, ga), (bi, gb)]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, a_sc, b_sc) = self.binary_shapes("sub", a, b)?;
        let ad = &self.nodes[a.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| ad[if a_sc { 0 } else { i }] - bd[if b_sc { 0 } else { i }])
            .collect();
        let (ai, bi) = (a.0, b.0);
        self.push(
            "sub",
            shape,
            data,
            &[a, b],
            Some(Box::new(move |g| {
                let ga = if a_sc { vec![g.iter().sum()] } else { g.to_vec() };
                let gb = if b_sc {
                    vec![-g.iter().sum::<f64>()]
                } else {
                    g.iter().map(|v| -v).collect()
                };
                vec![(ai, ga), (bi, gb)]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, a_sc, b_sc) = self.binary_shapes("mul", a, b)?;
        let ad = self.nodes[a.0].value.data.clone();
        let bd = self.nodes[b.0].value.data.clone();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| ad[if a_sc { 0 } else { i }] * bd[if b_sc { 0 } else { i }])
            .collect();
        let (ai, bi) = (a.0, b.0);
        self.push(
            "mul",
            shape,
            data,
            &[a, b],
            Some(Box::new(move |g| {
                let ga = if a_sc {
                    vec![g.iter().zip(&bd).map(|(gi, bi)| gi * bi).sum()]
                } else {
                    g.iter()
                        .enumerate()
                        .map(|(i, gi)| gi * bd[if b_sc { 0 } else { i }])
                        .collect()
                };
                let gb = if b_sc {
                    vec![g.iter().zip(&ad).map(|(gi, ai)| gi * ai).sum()]
                } else {
                    g.iter()
                        .enumerate()
                        .map(|(i, gi)| gi * ad[if a_sc { 0 } else { i }])
                        .collect()
                };
                vec![(ai, ga), (bi, gb)]
            })),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let t = &self.nodes[x.0].value;
        let shape = t.shape.clone();
        let data: Vec<f64> = t.data.iter().map(|v| v * c).collect();
        let xi = x.0;
        self.push(
            "scale",
            shape,
            data,
            &[x],
            Some(Box::new(move |g| vec![(xi, g.iter().map(|v| v * c).collect())])),
        )
    }

    fn unary<F, G>(&mut self, op: &'static str, x: Var, f: F, dback: G) -> Result<Var>
    where
        F: Fn(f64) -> f64,
        G: Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + 'static,
    {
        let t = &self.nodes[x.0].value;
        let shape = t.shape.clone();
        let xd = t.data.clone();
        let data: Vec<f64> = xd.iter().map(|&v| f(v)).collect();
        let yd = data.clone();
        let xi = x.0;
        self.push(
            op,
            shape,
            data,
            &[x],
            Some(Box::new(move |g| vec![(xi, dback(g, &xd, &yd))])),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            x,
            sigmoid_scalar,
            |g, _x, y| g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect(),
        )
    }

    pub fn tanh_act(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, |g, _x, y| {
            g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect()
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, |g, x, _y| {
            g.iter()
                .zip(x)
                .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                .collect()
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        self.unary(
            "gelu",
            x,
            |v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()),
            |g, x, _y| {
                g.iter()
                    .zip(x)
                    .map(|(gi, &xi)| {
                        let u = C * (xi + A * xi * xi * xi);
                        let t = u.tanh();
                        let du = C * (1.0 + 3.0 * A * xi * xi);
                        gi * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
                    })
                    .collect()
            },
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, |g, _x, y| {
            g.iter().zip(y).map(|(gi, yi)| gi * yi).collect()
        })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, |g, x, _y| {
            g.iter().zip(x).map(|(gi, xi)| gi / xi).collect()
        })
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`, plain triple loop with a
    /// fixed accumulation order for reproducibility.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape, tb.shape),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let ad = ta.data.clone();
        let bd = tb.data.clone();
        let data = matmul_raw(&ad, &bd, m, k, n);
        let (ai, bi) = (a.0, b.0);
        self.push(
            "matmul",
            vec![m, n],
            data,
            &[a, b],
            Some(Box::new(move |g| {
                // dA = g . B^T, dB = A^T . g
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for l in 0..n {
                            acc += g[i * n + l] * bd[j * n + l];
                        }
                        ga[i * k + j] = acc;
                    }
                }
                let mut gb = vec![0.0; k * n];
                for i in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for l in 0..m {
                            acc += ad[l * k + i] * g[l * n + j];
                        }
                        gb[i * n + j] = acc;
                    }
                }
                vec![(ai, ga), (bi, gb)]
            })),
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}", t.shape),
            });
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data[i * n + j];
            }
        }
        let xi = x.0;
        self.push(
            "transpose",
            vec![n, m],
            data,
            &[x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                vec![(xi, gx)]
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != t.numel() || shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", t.shape, shape),
            });
        }
        let data = t.data.clone();
        let xi = x.0;
        self.push(
            "reshape",
            shape,
            data,
            &[x],
            Some(Box::new(move |g| vec![(xi, g.to_vec())])),
        )
    }

    /// Row-wise softmax with the max-subtraction trick.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_rows",
                detail: format!("needs a matrix, got {:?}", t.shape),
            });
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let shape = t.shape.clone();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &t.data[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[r * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[r * n + j] /= sum;
            }
        }
        let yd = data.clone();
        let xi = x.0;
        self.push(
            "softmax_rows",
            shape,
            data,
            &[x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g[r * n + j] * yd[r * n + j];
                    }
                    for j in 0..n {
                        gx[r * n + j] = yd[r * n + j] * (g[r * n + j] - dot);
                    }
                }
                vec![(xi, gx)]
            })),
        )
    }

    /// Row-wise softmax over the key positions where `keep[j]` is true.
    /// Masked positions are excluded from the max/sum and get exactly zero
    /// weight and zero gradient (the exact limit of the -inf formulation,
    /// without storing non-finite values).
    pub fn masked_softmax_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 || t.shape[1] != keep.len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax_rows",
                detail: format!("{:?} with mask of {}", t.shape, keep.len()),
            });
        }
        if !keep.iter().any(|k| *k) {
            return Err(TensorError::InvalidArgument {
                op: "masked_softmax_rows",
                detail: "all positions masked".into(),
            });
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let keep: Vec<bool> = keep.to_vec();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &t.data[r * n..(r + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if keep[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut sum = 0.0;
            for j in 0..n {
                if keep[j] {
                    let e = (row[j] - mx).exp();
                    data[r * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                if keep[j] {
                    data[r * n + j] /= sum;
                }
            }
        }
        let yd = data.clone();
        let xi = x.0;
        self.push(
            "masked_softmax_rows",
            vec![m, n],
            data,
            &[x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        if keep[j] {
                            dot += g[r * n + j] * yd[r * n + j];
                        }
                    }
                    for j in 0..n {
                        if keep[j] {
                            gx[r * n + j] = yd[r * n + j] * (g[r * n + j] - dot);
                        }
                    }
                }
                vec![(xi, gx)]
            })),
        )
    }

    /// Per-row normalization: `y = gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("needs a matrix, got {:?}", t.shape),
            });
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let tg = &self.nodes[gain.0].value;
        let tb = &self.nodes[bias.0].value;
        if tg.numel() != n || tb.numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {:?}, gain {:?}, bias {:?}", t.shape, tg.shape, tb.shape),
            });
        }
        let shape = t.shape.clone();
        let gd = tg.data.clone();
        let bd = tb.data.clone();
        let mut xhat = vec![0.0; m * n];
        let mut inv_sigma = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &t.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma[r] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                xhat[r * n + j] = xh;
                data[r * n + j] = gd[j] * xh + bd[j];
            }
        }
        let (xi, gi_, bi_) = (x.0, gain.0, bias.0);
        self.push(
            "layer_norm",
            shape,
            data,
            &[x, gain, bias],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for r in 0..m {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..n {
                        let dy = g[r * n + j];
                        let xh = xhat[r * n + j];
                        ggain[j] += dy * xh;
                        gbias[j] += dy;
                        let dxh = dy * gd[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                    }
                    mean_dxh /= n as f64;
                    mean_dxh_xh /= n as f64;
                    for j in 0..n {
                        let dxh = g[r * n + j] * gd[j];
                        gx[r * n + j] =
                            inv_sigma[r] * (dxh - mean_dxh - xhat[r * n + j] * mean_dxh_xh);
                    }
                }
                vec![(xi, gx), (gi_, ggain), (bi_, gbias)]
            })),
        )
    }

    /// Column-wise batch normalization. Train mode uses batch statistics
    /// (biased variance) and updates the running stats in place with
    /// `running = (1 - momentum) * running + momentum * batch`; eval mode
    /// normalizes with the running stats. Train mode requires batch size >= 2.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        state: &mut BnState,
        momentum: f64,
        eps: f64,
        mode: Mode,
    ) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("{:?}", t.shape),
            });
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let tg = &self.nodes[gain.0].value;
        let tb = &self.nodes[bias.0].value;
        if tg.numel() != n || tb.numel() != n || state.mean.len() != n || state.var.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("feature dim {} vs gain {} / state {}", n, tg.numel(), state.mean.len()),
            });
        }
        if mode == Mode::Train && m < 2 {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm",
                detail: "train mode needs batch size >= 2".into(),
            });
        }
        let gd = tg.data.clone();
        let bd = tb.data.clone();
        let (xi, gvar, bvar) = (x.0, gain.0, bias.0);
        match mode {
            Mode::Train => {
                let mut mean = vec![0.0; n];
                let mut var = vec![0.0; n];
                for j in 0..n {
                    let mut s = 0.0;
                    for r in 0..m {
                        s += t.data[r * n + j];
                    }
                    mean[j] = s / m as f64;
                    let mut v = 0.0;
                    for r in 0..m {
                        let d = t.data[r * n + j] - mean[j];
                        v += d * d;
                    }
                    var[j] = v / m as f64;
                }
                let mut inv = vec![0.0; n];
                let mut xhat = vec![0.0; m * n];
                let mut data = vec![0.0; m * n];
                for j in 0..n {
                    inv[j] = 1.0 / (var[j] + eps).sqrt();
                }
                for r in 0..m {
                    for j in 0..n {
                        let xh = (t.data[r * n + j] - mean[j]) * inv[j];
                        xhat[r * n + j] = xh;
                        data[r * n + j] = gd[j] * xh + bd[j];
                    }
                }
                for j in 0..n {
                    state.mean[j] = (1.0 - momentum) * state.mean[j] + momentum * mean[j];
                    state.var[j] = (1.0 - momentum) * state.var[j] + momentum * var[j];
                }
                self.push(
                    "batch_norm",
                    vec![m, n],
                    data,
                    &[x, gain, bias],
                    Some(Box::new(move |g| {
                        let mut gx = vec![0.0; m * n];
                        let mut ggain = vec![0.0; n];
                        let mut gbias = vec![0.0; n];
                        for j in 0..n {
                            let mut mean_dxh = 0.0;
                            let mut mean_dxh_xh = 0.0;
                            for r in 0..m {
                                let dy = g[r * n + j];
                                let xh = xhat[r * n + j];
                                ggain[j] += dy * xh;
                                gbias[j] += dy;
                                let dxh = dy * gd[j];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xh;
                            }
                            mean_dxh /= m as f64;
                            mean_dxh_xh /= m as f64;
                            for r in 0..m {
                                let dxh = g[r * n + j] * gd[j];
                                gx[r * n + j] =
                                    inv[j] * (dxh - mean_dxh - xhat[r * n + j] * mean_dxh_xh);
                            }
                        }
                        vec![(xi, gx), (gvar, ggain), (bvar, gbias)]
                    })),
                )
            }
            Mode::Eval => {
                let mut inv = vec![0.0; n];
                for j in 0..n {
                    inv[j] = 1.0 / (state.var[j] + eps).sqrt();
                }
                let rm = state.mean.clone();
                let mut data = vec![0.0; m * n];
                let mut xhat = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..n {
                        let xh = (t.data[r * n + j] - rm[j]) * inv[j];
                        xhat[r * n + j] = xh;
                        data[r * n + j] = gd[j] * xh + bd[j];
                    }
                }
                self.push(
                    "batch_norm",
                    vec![m, n],
                    data,
                    &[x, gain, bias],
                    Some(Box::new(move |g| {
                        let mut gx = vec![0.0; m * n];
                        let mut ggain = vec![0.0; n];
                        let mut gbias = vec![0.0; n];
                        for r in 0..m {
                            for j in 0..n {
                                let dy = g[r * n + j];
                                ggain[j] += dy * xhat[r * n + j];
                                gbias[j] += dy;
                                gx[r * n + j] = dy * gd[j] * inv[j];
                            }
                        }
                        vec![(xi, gx), (gvar, ggain), (bvar, gbias)]
                    })),
                )
            }
        }
    }

    /// Inverted dropout. Identity (and no RNG draws) in eval mode or at p = 0,
    /// so seeded streams are unchanged by disabling it.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Prng, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                detail: format!("p = {p} outside [0, 1)"),
            });
        }
        if mode == Mode::Eval || p == 0.0 {
            let t = &self.nodes[x.0].value;
            let shape = t.shape.clone();
            let data = t.data.clone();
            let xi = x.0;
            return self.push(
                "dropout",
                shape,
                data,
                &[x],
                Some(Box::new(move |g| vec![(xi, g.to_vec())])),
            );
        }
        let t = &self.nodes[x.0].value;
        let shape = t.shape.clone();
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<bool> = (0..t.numel()).map(|_| rng.random::<f64>() >= p).collect();
        let data: Vec<f64> = t
            .data
            .iter()
            .zip(&mask)
            .map(|(v, k)| if *k { v * keep_scale } else { 0.0 })
            .collect();
        let xi = x.0;
        self.push(
            "dropout",
            shape,
            data,
            &[x],
            Some(Box::new(move |g| {
                vec![(
                    xi,
                    g.iter()
                        .zip(&mask)
                        .map(|(gi, k)| if *k { gi * keep_scale } else { 0.0 })
                        .collect(),
                )]
            })),
        )
    }

    /// Row lookup: `y[i, :] = table[ids[i], :]`; gradients scatter-add back.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("{:?}", t.shape),
            });
        }
        let (v, d) = (t.shape[0], t.shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                detail: format!("row id {bad} out of range {v}"),
            });
        }
        let m = ids.len();
        let mut data = vec![0.0; m * d];
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&t.data[id * d..(id + 1) * d]);
        }
        let ids: Vec<usize> = ids.to_vec();
        let ti = table.0;
        self.push(
            "gather_rows",
            vec![m, d],
            data,
            &[table],
            Some(Box::new(move |g| {
                let mut gt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[i * d + j];
                    }
                }
                vec![(ti, gt)]
            })),
        )
    }

    /// Element lookup into shape `[out_rows, out_cols]`:
    /// `y[p] = x[rows[p], cols[p]]` in row-major order of `p`.
    pub fn gather_pairs(
        &mut self,
        x: Var,
        rows: &[usize],
        cols: &[usize],
        out_rows: usize,
        out_cols: usize,
    ) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_pairs",
                detail: format!("{:?}", t.shape),
            });
        }
        let (r_max, c_max) = (t.shape[0], t.shape[1]);
        if rows.len() != cols.len() || rows.len() != out_rows * out_cols {
            return Err(TensorError::InvalidArgument {
                op: "gather_pairs",
                detail: "index count does not match output shape".into(),
            });
        }
        if rows.iter().any(|&r| r >= r_max) || cols.iter().any(|&c| c >= c_max) {
            return Err(TensorError::InvalidArgument {
                op: "gather_pairs",
                detail: "index out of range".into(),
            });
        }
        let data: Vec<f64> = rows
            .iter()
            .zip(cols)
            .map(|(&r, &c)| t.data[r * c_max + c])
            .collect();
        let rows: Vec<usize> = rows.to_vec();
        let cols: Vec<usize> = cols.to_vec();
        let xi = x.0;
        self.push(
            "gather_pairs",
            vec![out_rows, out_cols],
            data,
            &[x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; r_max * c_max];
                for (p, (&r, &c)) in rows.iter().zip(&cols).enumerate() {
                    gx[r * c_max + c] += g[p];
                }
                vec![(xi, gx)]
            })),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 || start + len > t.shape[0] || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                detail: format!("rows {}..{} of {:?}", start, start + len, t.shape),
            });
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let data = t.data[start * n..(start + len) * n].to_vec();
        let xi = x.0;
        self.push(
            "slice_rows",
            vec![len, n],
            data,
            &[x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                gx[start * n..(start + len) * n].copy_from_slice(g);
                vec![(xi, gx)]
            })),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 || start + len > t.shape[1] || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "slice_cols",
                detail: format!("cols {}..{} of {:?}", start, start + len, t.shape),
            });
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; m * len];
        for r in 0..m {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&t.data[r * n + start..r * n + start + len]);
        }
        let xi = x.0;
        self.push(
            "slice_cols",
            vec![m, len],
            data,
            &[x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(xi, gx)]
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat_rows",
                detail: "no parts".into(),
            });
        }
        let n = col_of(&self.nodes[parts[0].0].value.shape);
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.nodes[p.0].value;
            if col_of(&t.shape) != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column count {} vs {}", col_of(&t.shape), n),
                });
            }
            row_counts.push(t.rows());
            data.extend_from_slice(&t.data);
        }
        let m: usize = row_counts.iter().sum();
        let idxs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            "concat_rows",
            vec![m, n],
            data,
            parts,
            Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(idxs.len());
                let mut offset = 0;
                for (pi, &rc) in idxs.iter().zip(&row_counts) {
                    out.push((*pi, g[offset..offset + rc * n].to_vec()));
                    offset += rc * n;
                }
                out
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let m = self.nodes[parts[0].0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row count {} vs {}", t.rows(), m),
                });
            }
            widths.push(col_of(&t.shape));
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.0].value;
            for r in 0..m {
                data[r * n + offset..r * n + offset + w].copy_from_slice(&t.data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let idxs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            "concat_cols",
            vec![m, n],
            data,
            parts,
            Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(idxs.len());
                let mut offset = 0;
                for (pi, &w) in idxs.iter().zip(&widths) {
                    let mut gp = vec![0.0; m * w];
                    for r in 0..m {
                        gp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * n + offset..r * n + offset + w]);
                    }
                    out.push((*pi, gp));
                    offset += w;
                }
                out
            })),
        )
    }

    /// Broadcast-add a length-n vector to every row of an `[m, n]` matrix.
    pub fn add_rowvec(&mut self, x: Var, v: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let tv = &self.nodes[v.0].value;
        if t.shape.len() != 2 || tv.numel() != t.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_rowvec",
                detail: format!("{:?} + {:?}", t.shape, tv.shape),
            });
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for j in 0..n {
                data[r * n + j] = t.data[r * n + j] + tv.data[j];
            }
        }
        let (xi, vi) = (x.0, v.0);
        self.push(
            "add_rowvec",
            vec![m, n],
            data,
            &[x, v],
            Some(Box::new(move |g| {
                let mut gv = vec![0.0; n];
                for r in 0..m {
                    for j in 0..n {
                        gv[j] += g[r * n + j];
                    }
                }
                vec![(xi, g.to_vec()), (vi, gv)]
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let s: f64 = t.data.iter().sum();
        let numel = t.numel();
        let xi = x.0;
        self.push(
            "sum_all",
            vec![1],
            vec![s],
            &[x],
            Some(Box::new(move |g| vec![(xi, vec![g[0]; numel])])),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let numel = t.numel();
        let s: f64 = t.data.iter().sum::<f64>() / numel as f64;
        let xi = x.0;
        self.push(
            "mean_all",
            vec![1],
            vec![s],
            &[x],
            Some(Box::new(move |g| vec![(xi, vec![g[0] / numel as f64; numel])])),
        )
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let xd = t.data.clone();
        let s: f64 = xd.iter().map(|v| v * v).sum();
        let xi = x.0;
        self.push(
            "sum_squares",
            vec![1],
            vec![s],
            &[x],
            Some(Box::new(move |g| {
                vec![(xi, xd.iter().map(|v| 2.0 * v * g[0]).collect())]
            })),
        )
    }

    /// Mean over the rows of `[n, d]` where `keep[i]`, producing `[1, d]`.
    pub fn masked_mean_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 || t.shape[0] != keep.len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mean_rows",
                detail: format!("{:?} with mask of {}", t.shape, keep.len()),
            });
        }
        let kcount = keep.iter().filter(|k| **k).count();
        if kcount == 0 {
            return Err(TensorError::InvalidArgument {
                op: "masked_mean_rows",
                detail: "all rows masked".into(),
            });
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; n];
        for r in 0..m {
            if keep[r] {
                for j in 0..n {
                    data[j] += t.data[r * n + j];
                }
            }
        }
        for v in data.iter_mut() {
            *v /= kcount as f64;
        }
        let keep: Vec<bool> = keep.to_vec();
        let xi = x.0;
        self.push(
            "masked_mean_rows",
            vec![1, n],
            data,
            &[x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    if keep[r] {
                        for j in 0..n {
                            gx[r * n + j] = g[j] / kcount as f64;
                        }
                    }
                }
                vec![(xi, gx)]
            })),
        )
    }

    /// Scalar `sum_i coeffs[i] * x[i]` with fixed coefficients.
    pub fn weighted_sum(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.numel() != coeffs.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{} elements vs {} coefficients", t.numel(), coeffs.len()),
            });
        }
        if !coeffs.iter().all(|c| c.is_finite()) {
            return Err(TensorError::NonFinite { op: "weighted_sum" });
        }
        let s: f64 = t.data.iter().zip(coeffs).map(|(a, b)| a * b).sum();
        let coeffs: Vec<f64> = coeffs.to_vec();
        let xi = x.0;
        self.push(
            "weighted_sum",
            vec![1],
            vec![s],
            &[x],
            Some(Box::new(move |g| {
                vec![(xi, coeffs.iter().map(|c| c * g[0]).collect())]
            })),
        )
    }

    /// Per-row `log(sum_{j != i} exp(x[i, j]))` for a square `[b, b]` input,
    /// computed with max-subtraction over the off-diagonal entries.
    pub fn row_logsumexp_offdiag(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 || t.shape[0] != t.shape[1] || t.shape[0] < 2 {
            return Err(TensorError::InvalidArgument {
                op: "row_logsumexp_offdiag",
                detail: format!("needs a square matrix of order >= 2, got {:?}", t.shape),
            });
        }
        let b = t.shape[0];
        let mut out = vec![0.0; b];
        let mut weights = vec![0.0; b * b];
        for i in 0..b {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..b {
                if j != i && t.data[i * b + j] > mx {
                    mx = t.data[i * b + j];
                }
            }
            let mut sum = 0.0;
            for j in 0..b {
                if j != i {
                    sum += (t.data[i * b + j] - mx).exp();
                }
            }
            out[i] = mx + sum.ln();
            for j in 0..b {
                if j != i {
                    weights[i * b + j] = (t.data[i * b + j] - mx).exp() / sum;
                }
            }
        }
        let xi = x.0;
        self.push(
            "row_logsumexp_offdiag",
            vec![b],
            out,
            &[x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; b * b];
                for i in 0..b {
                    for j in 0..b {
                        if j != i {
                            gx[i * b + j] = g[i] * weights[i * b + j];
                        }
                    }
                }
                vec![(xi, gx)]
            })),
        )
    }

    /// Row-wise `x / sqrt(|x|^2 + eps)`; eps keeps the zero row differentiable.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "l2_normalize_rows",
                detail: format!("needs a matrix, got {:?}", t.shape),
            });
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let shape = t.shape.clone();
        let xd = t.data.clone();
        let mut inv_norm = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let sq: f64 = row.iter().map(|v| v * v).sum::<f64>() + eps;
            let inv = 1.0 / sq.sqrt();
            inv_norm[r] = inv;
            for j in 0..n {
                data[r * n + j] = row[j] * inv;
            }
        }
        let xi = x.0;
        self.push(
            "l2_normalize_rows",
            shape,
            data,
            &[x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let row = &xd[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let dot: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                    let inv = inv_norm[r];
                    let inv3 = inv * inv * inv;
                    for j in 0..n {
                        gx[r * n + j] = grow[j] * inv - row[j] * dot * inv3;
                    }
                }
                vec![(xi, gx)]
            })),
        )
    }

    /// Mean binary cross-entropy over logits, computed in the numerically
    /// stable form `max(z, 0) - z*t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits_mean",
                detail: format!("{} logits vs {} targets", t.numel(), targets.len()),
            });
        }
        if !targets.iter().all(|y| (0.0..=1.0).contains(y)) {
            return Err(TensorError::InvalidArgument {
                op: "bce_with_logits_mean",
                detail: "targets must lie in [0, 1]".into(),
            });
        }
        let n = targets.len();
        let mut loss = 0.0;
        let mut dz = vec![0.0; n];
        for (i, (&z, &y)) in t.data.iter().zip(targets).enumerate() {
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            dz[i] = (sigmoid_scalar(z) - y) / n as f64;
        }
        loss /= n as f64;
        let xi = logits.0;
        self.push(
            "bce_with_logits_mean",
            vec![1],
            vec![loss],
            &[logits],
            Some(Box::new(move |g| {
                vec![(xi, dz.iter().map(|d| d * g[0]).collect())]
            })),
        )
    }

    /// Reverse sweep from a scalar node; gradients accumulate additively where
    /// the graph fans out and each node is visited exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes.len();
        if loss.0 >= n || self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                detail: "target must be a scalar on this tape".into(),
            });
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(TensorError::Detached);
        }
        self.grads = vec![None; n];
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; n];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Some(back) = self.nodes[i].backward.as_ref() {
                for (p, contrib) in back(&g) {
                    if !self.nodes[p].needs_grad {
                        continue;
                    }
                    match pending[p].as_mut() {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(&contrib) {
                                *a += c;
                            }
                        }
                        None => pending[p] = Some(contrib),
                    }
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain `[m,k] x [k,n]` product used by the matmul op and its backward.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

/// Compares analytic gradients of a scalar-valued function against central
/// finite differences and returns the max relative error over coordinates.
/// The function is evaluated twice up front; differing values mean it is not
/// deterministic and gradient checking is refused. Coordinates far below the
/// gradient's own magnitude are compared against a floor scaled to that
/// magnitude: central differences carry absolute noise around |f|*1e-11/eps,
/// so a fixed tiny floor would fail exactly-zero gradients on roundoff alone.
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let eval = |f: &mut F, t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let y = f(&mut tape, v)?;
        if tape.value(y).numel() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "grad_check",
                detail: "function must produce a scalar".into(),
            });
        }
        Ok(tape.value(y).item())
    };

    let mut base = x.clone();
    base.requires_grad = true;

    let y0 = eval(&mut f, &base)?;
    let y1 = eval(&mut f, &base)?;
    if y0 != y1 {
        return Err(TensorError::NonDeterministic(y0, y1));
    }

    let mut tape = Tape::new();
    let v = tape.leaf(&base);
    let y = f(&mut tape, v)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(v)
        .ok_or(TensorError::Detached)?
        .to_vec();

    let mut numeric = vec![0.0f64; base.numel()];
    for i in 0..base.numel() {
        let orig = base.data()[i];
        base.data_mut()[i] = orig + eps;
        let fp = eval(&mut f, &base)?;
        base.data_mut()[i] = orig - eps;
        let fm = eval(&mut f, &base)?;
        base.data_mut()[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * eps);
    }
    let inf_norm = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-3 * inf_norm.max(1.0)).max(1e-8);
    let mut max_rel = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(floor);
        let rel = (a - n).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnState {
    pub fn new(dim: usize) -> Self {
        BnState { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }
}
