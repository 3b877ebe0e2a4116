//! Multi-head attentive pooling and the classification head.

use super::init::Init;
use crate::config::{HeadConfig, PoolMode, POOL_STD_EPS};
use crate::error::{Error, Result};
use crate::tensor::{ParamTensor, Tape, Var};

/// One learnable query `u_j` per head, stored as `[k, Q/k]`.
#[derive(Debug, Clone)]
pub struct MhapParams {
    pub queries: ParamTensor,
    pub mode: PoolMode,
}

impl MhapParams {
    pub fn init(q: usize, heads: usize, mode: PoolMode, init: &mut Init) -> Result<Self> {
        if heads == 0 || q % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide width {q}")));
        }
        Ok(Self {
            queries: init.xavier(vec![heads, q / heads], q / heads, 1),
            mode,
        })
    }

    pub fn heads(&self) -> usize {
        self.queries.shape()[0]
    }
}

/// Attention weights `[B, T, k]` and per-head weighted means `[B, k, Q/k]`.
struct Attended {
    grouped: Var,
    weights4: Var,
    means: Var,
}

fn attend(tape: &mut Tape, g: Var, mask: &[f64], params: &MhapParams) -> Result<Attended> {
    let s = tape.shape(g).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("pooling input must be [B, T, Q], got {s:?}")));
    }
    let (b, t, q) = (s[0], s[1], s[2]);
    let k = params.heads();
    if q % k != 0 || params.queries.shape()[1] * k != q {
        return Err(Error::shape(format!(
            "queries {:?} do not split width {q}",
            params.queries.shape()
        )));
    }
    if mask.len() != b * t {
        return Err(Error::shape(format!("mask of {} frames for [B={b}, T={t}]", mask.len())));
    }
    for (bi, frames) in mask.chunks(t).enumerate() {
        if frames.iter().all(|&m| m == 0.0) {
            return Err(Error::data(format!("utterance {bi} in batch has no valid frames")));
        }
    }
    let h = q / k;
    let grouped = tape.reshape(g, vec![b, t, k, h])?;
    let u = tape.param(&params.queries);
    let scores = tape.mul_broadcast(grouped, u)?;
    let scores = tape.sum_axis(scores, 3)?;
    let head_mask: Vec<bool> = mask
        .iter()
        .flat_map(|&m| std::iter::repeat(m != 0.0).take(k))
        .collect();
    let weights = tape.softmax_masked(scores, &head_mask, 1)?;
    let weights4 = tape.expand_axis(weights, 3, h)?;
    let weighted = tape.mul(grouped, weights4)?;
    let means = tape.sum_axis(weighted, 1)?;
    Ok(Attended {
        grouped,
        weights4,
        means,
    })
}

/// Attentive statistics pooling over `G: [B, T, Q]`.
///
/// In `stats` mode returns `[B, 2Q]` = `(c_1, …, c_k, s_1, …, s_k)` where
/// `c_j` is the attention-weighted mean of head `j` over time and `s_j`
/// the matching weighted standard deviation, `sqrt(var + 1e-6)`.
/// In `literal` mode returns `[B, 2]`: the mean and standard deviation
/// over the components of `r = (c_1, …, c_k)`.
pub fn mhap(tape: &mut Tape, g: Var, mask: &[f64], params: &MhapParams) -> Result<Var> {
    let s = tape.shape(g).to_vec();
    let att = attend(tape, g, mask, params)?;
    let (b, t, q) = (s[0], s[1], s[2]);
    match params.mode {
        PoolMode::Stats => {
            let centre = tape.expand_axis(att.means, 1, t)?;
            let diff = tape.sub(att.grouped, centre)?;
            let sq = tape.mul(diff, diff)?;
            let wsq = tape.mul(att.weights4, sq)?;
            let var = tape.sum_axis(wsq, 1)?;
            let var = tape.add_scalar(var, POOL_STD_EPS);
            let std = tape.sqrt(var);
            let mean = tape.reshape(att.means, vec![b, q])?;
            let std = tape.reshape(std, vec![b, q])?;
            tape.concat_last(&[mean, std])
        }
        PoolMode::Literal => {
            let r = tape.reshape(att.means, vec![b, q])?;
            let mu = tape.sum_axis(r, 1)?;
            let mu = tape.scale(mu, 1.0 / q as f64);
            let centre = tape.expand_axis(mu, 1, q)?;
            let diff = tape.sub(r, centre)?;
            let sq = tape.mul(diff, diff)?;
            let var = tape.sum_axis(sq, 1)?;
            let var = tape.scale(var, 1.0 / q as f64);
            let var = tape.add_scalar(var, POOL_STD_EPS);
            let sigma = tape.sqrt(var);
            let mu = tape.reshape(mu, vec![b, 1])?;
            let sigma = tape.reshape(sigma, vec![b, 1])?;
            tape.concat_last(&[mu, sigma])
        }
    }
}

/// Affine map to two logits (index 0 bona fide, 1 spoof), optionally with a
/// GELU hidden layer.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub hidden: Option<(ParamTensor, ParamTensor)>,
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl HeadParams {
    pub fn init(input: usize, cfg: &HeadConfig, init: &mut Init) -> Self {
        if cfg.hidden == 0 {
            return Self {
                hidden: None,
                weight: init.xavier(vec![input, 2], input, 2),
                bias: ParamTensor::zeros(vec![2]),
            };
        }
        let n = cfg.hidden;
        Self {
            hidden: Some((init.xavier(vec![input, n], input, n), ParamTensor::zeros(vec![n]))),
            weight: init.xavier(vec![n, 2], n, 2),
            bias: ParamTensor::zeros(vec![2]),
        }
    }
}

pub fn classify(tape: &mut Tape, pooled: Var, params: &HeadParams) -> Result<Var> {
    let mut x = pooled;
    if let Some((w, b)) = &params.hidden {
        let w = tape.param(w);
        let b = tape.param(b);
        x = tape.matmul(x, w)?;
        x = tape.add_broadcast(x, b)?;
        x = tape.gelu(x);
    }
    let w = tape.param(&params.weight);
    let b = tape.param(&params.bias);
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}
