//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and the
//! information its backward rule needs. Node indices are assigned in
//! recording order, so the tape is already topologically sorted and
//! `backward` is a single reverse sweep. Nothing here is shared or
//! mutated behind a reference, which makes repeated runs bit-identical.

use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::ParamTensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, rows: usize, inner: usize, cols: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddBroadcast { x: Var, y: Var },
    MulBroadcast { x: Var, y: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Sigmoid { x: Var },
    Gelu { x: Var },
    Sqrt { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<f64>, xhat: Vec<f64> },
    ConvDepthwise { x: Var, kernel: Var, bias: Var, frames: usize, channels: usize, k: usize },
    ConvFull { x: Var, kernel: Var, bias: Var, frames: usize, c_in: usize, c_out: usize, k: usize },
    MulConst { x: Var, c: Vec<f64> },
    Slice { x: Var, start: usize, width: usize, src_width: usize },
    Concat { parts: Vec<(Var, usize)> },
    Reshape { x: Var },
    SumAxis { x: Var, outer: usize, n: usize, inner: usize },
    ExpandAxis { x: Var, outer: usize, n: usize, inner: usize },
    SumAll { x: Var },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LogSoftmax { x: Var, cols: usize },
    GatherRows { x: Var, idx: Vec<usize>, cols: usize },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// The recorded computation graph of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<u64, Var>,
    seed: u64,
    step: u64,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform in [0, 1) from a pure function of its counters.
pub(crate) fn counter_uniform(seed: u64, step: u64, node: u64, index: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(step ^ splitmix64(node ^ splitmix64(index))));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose dropout masks are drawn from `(seed, step, node index)`.
    pub fn with_seed(seed: u64, step: u64) -> Self {
        Self {
            seed,
            step,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a parameter as a leaf. Binding the same parameter twice
    /// returns the same node so its gradient accumulates in one place.
    pub fn param(&mut self, p: &ParamTensor) -> Var {
        if let Some(&v) = self.params.get(&p.node_id()) {
            return v;
        }
        let v = self.push(p.data().to_vec(), p.shape().to_vec(), Op::Leaf, p.requires_grad());
        self.params.insert(p.node_id(), v);
        v
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push(data, shape, Op::Leaf, false))
    }

    /// A leaf that receives gradients but is not tied to a [`ParamTensor`].
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let v = self.constant(shape, data)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `a[.., m, n] × b[n, p]`. Leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let inner = sb[0];
        let cols = sb[1];
        let rows = numel(&sa) / inner.max(1);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let orow = &mut out[r * cols..(r + 1) * cols];
            for i in 0..inner {
                let x = av[r * inner + i];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[i * cols..(i + 1) * cols];
                for (o, w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = cols;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::MatMul { a, b, rows, inner, cols }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xv[r * cols + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![cols, rows], Op::Transpose { x, rows, cols }, rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    fn check_suffix(&self, x: Var, y: Var, what: &str) -> Result<usize> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::shape(format!(
                "{what}: {sy:?} is not a trailing shape of {sx:?}"
            )));
        }
        Ok(numel(sy))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s (bias addition).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let n = self.check_suffix(x, y, "add_broadcast")?;
        let yv = self.value(y);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + yv[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(out, shape, Op::AddBroadcast { x, y }, rg))
    }

    /// `x ⊙ y` where `y`'s shape is a suffix of `x`'s.
    pub fn mul_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let n = self.check_suffix(x, y, "mul_broadcast")?;
        let yv = self.value(y);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * yv[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(out, shape, Op::MulBroadcast { x, y }, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid_scalar, Op::Sigmoid { x })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu_scalar, Op::Gelu { x })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, f64::sqrt, Op::Sqrt { x })
    }

    /// Layer normalization over the last axis, then `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        if c == 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "layer_norm of {s:?} with gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = numel(&s) / c;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, s, Op::LayerNorm { x, gamma, beta, rstd, xhat }, rg))
    }

    fn conv_geometry(&self, x: Var, k: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape(format!("conv1d input must be [.., T, C], got {s:?}")));
        }
        if k % 2 == 0 {
            return Err(Error::config(format!("convolution kernel size {k} must be odd")));
        }
        let c = s[s.len() - 1];
        let t = s[s.len() - 2];
        Ok((numel(s) / (t * c).max(1), t, c))
    }

    /// Channel-wise 1-D convolution along the frame axis with zero "same"
    /// padding: `out[t, c] = bias[c] + Σ_i kernel[i, c]·x[t + i − k/2, c]`.
    pub fn conv1d_depthwise(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 2 {
            return Err(Error::shape(format!("depthwise kernel must be [k, C], got {ks:?}")));
        }
        let k = ks[0];
        let (batch, frames, c) = self.conv_geometry(x, k)?;
        if ks[1] != c || self.shape(bias) != [c] {
            return Err(Error::shape(format!(
                "depthwise conv of {:?} with kernel {ks:?} and bias {:?}",
                self.shape(x),
                self.shape(bias)
            )));
        }
        let half = k / 2;
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            let base = b * frames * c;
            for t in 0..frames {
                let orow = &mut out[base + t * c..base + (t + 1) * c];
                orow.copy_from_slice(bv);
                for i in 0..k {
                    let src = t + i;
                    if src < half || src - half >= frames {
                        continue;
                    }
                    let xrow = &xv[base + (src - half) * c..base + (src - half + 1) * c];
                    let krow = &kv[i * c..(i + 1) * c];
                    for ch in 0..c {
                        orow[ch] += krow[ch] * xrow[ch];
                    }
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            out,
            shape,
            Op::ConvDepthwise { x, kernel, bias, frames, channels: c, k },
            rg,
        ))
    }

    /// Dense 1-D convolution, kernel `[k, C_in, C_out]`, same padding rule as
    /// [`Tape::conv1d_depthwise`].
    pub fn conv1d_full(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 {
            return Err(Error::shape(format!("full kernel must be [k, C_in, C_out], got {ks:?}")));
        }
        let (k, c_in, c_out) = (ks[0], ks[1], ks[2]);
        let (batch, frames, c) = self.conv_geometry(x, k)?;
        if c != c_in || self.shape(bias) != [c_out] {
            return Err(Error::shape(format!(
                "full conv of {:?} with kernel {ks:?} and bias {:?}",
                self.shape(x),
                self.shape(bias)
            )));
        }
        let half = k / 2;
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let mut out = vec![0.0; batch * frames * c_out];
        for b in 0..batch {
            for t in 0..frames {
                let orow = &mut out[(b * frames + t) * c_out..(b * frames + t + 1) * c_out];
                orow.copy_from_slice(bv);
                for i in 0..k {
                    let src = t + i;
                    if src < half || src - half >= frames {
                        continue;
                    }
                    let xrow = &xv[(b * frames + src - half) * c_in..(b * frames + src - half + 1) * c_in];
                    for (ci, &xval) in xrow.iter().enumerate() {
                        let krow = &kv[(i * c_in + ci) * c_out..(i * c_in + ci + 1) * c_out];
                        for (o, w) in orow.iter_mut().zip(krow) {
                            *o += w * xval;
                        }
                    }
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = c_out;
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            out,
            shape,
            Op::ConvFull { x, kernel, bias, frames, c_in, c_out, k },
            rg,
        ))
    }

    /// Element-wise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::shape(format!(
                "mul_const: {} constants for shape {:?}",
                c.len(),
                self.shape(x)
            )));
        }
        let out = self.value(x).iter().zip(&c).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::MulConst { x, c }, rg))
    }

    /// Zeroes whole frames. `x` is `[B, T, ..]` and `mask` holds `B·T` 0/1 values.
    pub fn mask_frames(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let n = self.value(x).len();
        if mask.is_empty() || n % mask.len() != 0 {
            return Err(Error::shape(format!(
                "mask of {} frames for tensor {:?}",
                mask.len(),
                self.shape(x)
            )));
        }
        let per = n / mask.len();
        let c = mask.iter().flat_map(|&m| std::iter::repeat(m).take(per)).collect();
        self.mul_const(x, c)
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let node = self.nodes.len() as u64;
        let keep = 1.0 / (1.0 - p);
        let c = (0..self.value(x).len() as u64)
            .map(|i| {
                if counter_uniform(self.seed, self.step, node, i) < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(x, c)
    }

    /// `x[.., start..end]` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().ok_or_else(|| Error::shape("slice of a scalar"))?;
        if start >= end || end > w {
            return Err(Error::shape(format!("slice {start}..{end} of last axis {w}")));
        }
        let width = end - start;
        let out = self
            .value(x)
            .chunks(w)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = width;
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Slice { x, start, width, src_width: w }, rg))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape(format!(
                    "concat of {:?} with {s:?}",
                    self.shape(first)
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows = numel(&lead);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(out, shape, Op::Concat { parts }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Reshape { x }, rg))
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("sum over axis {axis} of {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..n {
                let src = &xv[(o * n + t) * inner..(o * n + t + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::SumAxis { x, outer, n, inner }, rg))
    }

    /// Inserts a new axis of length `n` at `axis`, repeating values along it.
    pub fn expand_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis > s.len() {
            return Err(Error::shape(format!("expand at axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xv[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape.insert(axis, n);
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::ExpandAxis { x, outer, n, inner }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![total], vec![], Op::SumAll { x }, rg)
    }

    /// Softmax along `axis` with masked positions excluded: they receive
    /// exactly zero weight. `mask` has one flag per element of `x`
    /// (`true` = valid). Every softmax slice needs at least one valid entry.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool], axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || mask.len() != numel(&s) {
            return Err(Error::shape(format!(
                "softmax over axis {axis} of {s:?} with {} mask flags",
                mask.len()
            )));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * n + t) * inner + i;
                if !(0..n).any(|t| mask[at(t)]) {
                    return Err(Error::data("softmax slice with every position masked"));
                }
                let mut max = f64::NEG_INFINITY;
                for t in (0..n).filter(|&t| mask[at(t)]) {
                    if xv[at(t)].is_nan() {
                        max = f64::NAN;
                        break;
                    }
                    max = max.max(xv[at(t)]);
                }
                let mut z = 0.0;
                for t in 0..n {
                    if mask[at(t)] {
                        let e = (xv[at(t)] - max).exp();
                        out[at(t)] = e;
                        z += e;
                    }
                }
                for t in 0..n {
                    out[at(t)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, s, Op::Softmax { x, outer, n, inner }, rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| Error::shape("log_softmax of a scalar"))?;
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter().map(move |v| v - lse)
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(out, s, Op::LogSoftmax { x, cols }, rg))
    }

    /// Selects rows of `x` viewed as `[R, C]` with `C` its last extent.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| Error::shape("gather_rows of a scalar"))?;
        let rows = numel(&s) / cols.max(1);
        if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
            return Err(Error::shape(format!("row {bad} out of range for {rows} rows")));
        }
        let xv = self.value(x);
        let out = idx
            .iter()
            .flat_map(|&r| xv[r * cols..(r + 1) * cols].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            out,
            vec![idx.len(), cols],
            Op::GatherRows { x, idx: idx.to_vec(), cols },
            rg,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(out) {
            grads[out.0] = Some(vec![1.0]);
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let y = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, rows, inner, cols } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |da| {
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        for k in 0..inner {
                            let brow = &bv[k * cols..(k + 1) * cols];
                            da[r * inner + k] += grow.iter().zip(brow).map(|(x, w)| x * w).sum::<f64>();
                        }
                    }
                });
                acc(b, &mut |db| {
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        for k in 0..inner {
                            let x = av[r * inner + k];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[k * cols..(k + 1) * cols].iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                });
            }
            &Op::Transpose { x, rows, cols } => acc(x, &mut |dx| {
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            &Op::Add { a, b } => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                });
                acc(b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                });
            }
            &Op::Div { a, b } => {
                let bv = &nodes[b.0].value;
                acc(a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / bv[j];
                    }
                });
                acc(b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] -= g[j] * y[j] / bv[j];
                    }
                });
            }
            &Op::AddBroadcast { x, y: bias } => {
                let n = nodes[bias.0].value.len();
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(bias, &mut |d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[j % n] += gv;
                    }
                });
            }
            &Op::MulBroadcast { x, y: w } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let n = wv.len();
                acc(x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * wv[j % n];
                    }
                });
                acc(w, &mut |d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[j % n] += gv * xv[j];
                    }
                });
            }
            &Op::Scale { x, c } => acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            &Op::AddScalar { x } | &Op::Reshape { x } => {
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g))
            }
            &Op::Sigmoid { x } => acc(x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }),
            &Op::Gelu { x } => {
                let xv = &nodes[x.0].value;
                acc(x, &mut |d| {
                    for j in 0..d.len() {
                        let v = xv[j];
                        d[j] += g[j] * (std_normal_cdf(v) + v * std_normal_pdf(v));
                    }
                })
            }
            &Op::Sqrt { x } => acc(x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * 0.5 / y[j];
                }
            }),
            Op::LayerNorm { x, gamma, beta, rstd, xhat } => {
                let c = nodes[gamma.0].value.len();
                let gv = &nodes[gamma.0].value;
                acc(*x, &mut |dx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * c;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            let dh = g[base + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[base + j];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for j in 0..c {
                            let dh = g[base + j] * gv[j];
                            dx[base + j] += rs * (dh - mean_dh - xhat[base + j] * mean_dh_h);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (j, gv) in g.iter().enumerate() {
                        dg[j % c] += gv * xhat[j];
                    }
                });
                acc(*beta, &mut |db| {
                    for (j, gv) in g.iter().enumerate() {
                        db[j % c] += gv;
                    }
                });
            }
            &Op::ConvDepthwise { x, kernel, bias, frames, channels: c, k } => {
                let (xv, kv) = (&nodes[x.0].value, &nodes[kernel.0].value);
                let batch = xv.len() / (frames * c).max(1);
                let half = k / 2;
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for b in 0..batch {
                        for t in 0..frames {
                            for i in 0..k {
                                let src = t + i;
                                if src < half || src - half >= frames {
                                    continue;
                                }
                                f((b * frames + t) * c, (b * frames + src - half) * c, i * c);
                            }
                        }
                    }
                };
                acc(x, &mut |dx| {
                    taps(&mut |out, inp, kr| {
                        for ch in 0..c {
                            dx[inp + ch] += g[out + ch] * kv[kr + ch];
                        }
                    })
                });
                acc(kernel, &mut |dk| {
                    taps(&mut |out, inp, kr| {
                        for ch in 0..c {
                            dk[kr + ch] += g[out + ch] * xv[inp + ch];
                        }
                    })
                });
                acc(bias, &mut |db| {
                    for (j, gv) in g.iter().enumerate() {
                        db[j % c] += gv;
                    }
                });
            }
            &Op::ConvFull { x, kernel, bias, frames, c_in, c_out, k } => {
                let (xv, kv) = (&nodes[x.0].value, &nodes[kernel.0].value);
                let batch = xv.len() / (frames * c_in).max(1);
                let half = k / 2;
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for b in 0..batch {
                        for t in 0..frames {
                            for i in 0..k {
                                let src = t + i;
                                if src < half || src - half >= frames {
                                    continue;
                                }
                                f((b * frames + t) * c_out, (b * frames + src - half) * c_in, i);
                            }
                        }
                    }
                };
                acc(x, &mut |dx| {
                    taps(&mut |out, inp, i| {
                        for ci in 0..c_in {
                            let krow = &kv[(i * c_in + ci) * c_out..(i * c_in + ci + 1) * c_out];
                            dx[inp + ci] += krow.iter().zip(&g[out..out + c_out]).map(|(w, gv)| w * gv).sum::<f64>();
                        }
                    })
                });
                acc(kernel, &mut |dk| {
                    taps(&mut |out, inp, i| {
                        for ci in 0..c_in {
                            let xval = xv[inp + ci];
                            let base = (i * c_in + ci) * c_out;
                            for o in 0..c_out {
                                dk[base + o] += g[out + o] * xval;
                            }
                        }
                    })
                });
                acc(bias, &mut |db| {
                    for (j, gv) in g.iter().enumerate() {
                        db[j % c_out] += gv;
                    }
                });
            }
            Op::MulConst { x, c } => acc(*x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * c[j];
                }
            }),
            &Op::Slice { x, start, width, src_width } => acc(x, &mut |d| {
                for (r, grow) in g.chunks(width).enumerate() {
                    let base = r * src_width + start;
                    for (j, gv) in grow.iter().enumerate() {
                        d[base + j] += gv;
                    }
                }
            }),
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    acc(p, &mut |d| {
                        for (r, drow) in d.chunks_mut(w).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + w];
                            drow.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    });
                    offset += w;
                }
            }
            &Op::SumAxis { x, outer, n, inner } => acc(x, &mut |d| {
                for o in 0..outer {
                    let grow = &g[o * inner..(o + 1) * inner];
                    for t in 0..n {
                        let dst = &mut d[(o * n + t) * inner..(o * n + t + 1) * inner];
                        dst.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                }
            }),
            &Op::ExpandAxis { x, outer, n, inner } => acc(x, &mut |d| {
                for o in 0..outer {
                    for t in 0..n {
                        let src = &g[(o * n + t) * inner..(o * n + t + 1) * inner];
                        d[o * inner..(o + 1) * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }),
            &Op::SumAll { x } => acc(x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            &Op::Softmax { x, outer, n, inner } => acc(x, &mut |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * n + t) * inner + i;
                        let dot: f64 = (0..n).map(|t| y[at(t)] * g[at(t)]).sum();
                        for t in 0..n {
                            d[at(t)] += y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
            }),
            &Op::LogSoftmax { x, cols } => acc(x, &mut |d| {
                for (r, grow) in g.chunks(cols).enumerate() {
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..cols {
                        d[r * cols + j] += grow[j] - y[r * cols + j].exp() * gsum;
                    }
                }
            }),
            Op::GatherRows { x, idx, cols } => {
                let cols = *cols;
                acc(*x, &mut |d| {
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..cols {
                            d[r * cols + j] += g[k * cols + j];
                        }
                    }
                })
            }
        }
    }
}

/// Gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<u64, Var>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if any flowed there.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to a parameter bound on the tape.
    pub fn wrt(&self, p: &ParamTensor) -> Option<&[f64]> {
        self.params.get(&p.node_id()).and_then(|&v| self.of(v))
    }

    /// Adds every parameter's gradient into its slot.
    pub fn accumulate_into<P: super::Parameters + ?Sized>(&self, params: &mut P) -> Result<()> {
        let mut res = Ok(());
        params.visit_mut(&mut |_, p| {
            if res.is_err() {
                return;
            }
            if let Some(g) = self.wrt(p) {
                res = p.accumulate_grad(g);
            }
        });
        res
    }
}
