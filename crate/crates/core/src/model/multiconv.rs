//! Multi-kernel gated convolution blocks.
//!
//! One block: `Ê = GELU(expand(LN(x)))`, split `Ê` into `Z_l | Z_r`,
//! normalize `Z_r`, run one convolution per kernel size over it, fuse the
//! branches, gate with `Z_l`, project back to `U` and (optionally) add the
//! residual. Padded frames are zeroed after every frame-wise step and
//! before each convolution, so outputs on valid frames never depend on how
//! much padding follows them.

use super::init::Init;
use crate::config::{ConvKind, Fusion, MultiConvConfig, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{ParamTensor, Tape, Var};

#[derive(Debug, Clone)]
pub struct ConvBranch {
    /// `[k, d']` for depthwise, `[k, d', d']` for full convolution.
    pub kernel: ParamTensor,
    pub bias: ParamTensor,
}

impl ConvBranch {
    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct MultiConvBlockParams {
    pub ln_in_gamma: ParamTensor,
    pub ln_in_beta: ParamTensor,
    pub expand: ParamTensor,
    pub expand_bias: ParamTensor,
    pub ln_split_gamma: ParamTensor,
    pub ln_split_beta: ParamTensor,
    pub branches: Vec<ConvBranch>,
    /// Present only for learned fusion; softmax-normalized branch weights.
    pub fusion_logits: Option<ParamTensor>,
    pub out_proj: ParamTensor,
    pub out_bias: ParamTensor,
    pub dropout: f64,
    pub residual: bool,
    pub conv: ConvKind,
}

impl MultiConvBlockParams {
    pub fn init(u: usize, cfg: &MultiConvConfig, init: &mut Init) -> Result<Self> {
        if cfg.d_inter == 0 || cfg.d_inter % 2 != 0 {
            return Err(Error::config(format!("d_inter must be even, got {}", cfg.d_inter)));
        }
        if cfg.kernels.is_empty() {
            return Err(Error::config("a block needs at least one kernel"));
        }
        let half = cfg.d_inter / 2;
        let expand = init.xavier(vec![u, cfg.d_inter], u, cfg.d_inter);
        let mut branches = Vec::with_capacity(cfg.kernels.len());
        for &k in &cfg.kernels {
            if k % 2 == 0 {
                return Err(Error::config(format!("kernel size {k} must be odd")));
            }
            let kernel = match cfg.conv {
                ConvKind::Depthwise => init.xavier(vec![k, half], k, k),
                ConvKind::Full => init.xavier(vec![k, half, half], k * half, k * half),
            };
            branches.push(ConvBranch {
                kernel,
                bias: ParamTensor::zeros(vec![half]),
            });
        }
        let out_proj = init.xavier(vec![half, u], half, u);
        Ok(Self {
            ln_in_gamma: ParamTensor::filled(vec![u], 1.0),
            ln_in_beta: ParamTensor::zeros(vec![u]),
            expand,
            expand_bias: ParamTensor::zeros(vec![cfg.d_inter]),
            ln_split_gamma: ParamTensor::filled(vec![half], 1.0),
            ln_split_beta: ParamTensor::zeros(vec![half]),
            branches,
            fusion_logits: match cfg.fusion {
                Fusion::Mean => None,
                Fusion::Learned => Some(ParamTensor::zeros(vec![cfg.kernels.len()])),
            },
            out_proj,
            out_bias: ParamTensor::zeros(vec![u]),
            dropout: cfg.dropout,
            residual: cfg.residual,
            conv: cfg.conv,
        })
    }

    pub fn d_inter(&self) -> usize {
        self.expand.shape()[1]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a ParamTensor)) {
        f(&format!("{prefix}.ln_in.gamma"), &self.ln_in_gamma);
        f(&format!("{prefix}.ln_in.beta"), &self.ln_in_beta);
        f(&format!("{prefix}.expand"), &self.expand);
        f(&format!("{prefix}.expand_bias"), &self.expand_bias);
        f(&format!("{prefix}.ln_split.gamma"), &self.ln_split_gamma);
        f(&format!("{prefix}.ln_split.beta"), &self.ln_split_beta);
        for (j, b) in self.branches.iter().enumerate() {
            f(&format!("{prefix}.conv{j}.kernel"), &b.kernel);
            f(&format!("{prefix}.conv{j}.bias"), &b.bias);
        }
        if let Some(w) = &self.fusion_logits {
            f(&format!("{prefix}.fusion_logits"), w);
        }
        f(&format!("{prefix}.out_proj"), &self.out_proj);
        f(&format!("{prefix}.out_bias"), &self.out_bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}.ln_in.gamma"), &mut self.ln_in_gamma);
        f(&format!("{prefix}.ln_in.beta"), &mut self.ln_in_beta);
        f(&format!("{prefix}.expand"), &mut self.expand);
        f(&format!("{prefix}.expand_bias"), &mut self.expand_bias);
        f(&format!("{prefix}.ln_split.gamma"), &mut self.ln_split_gamma);
        f(&format!("{prefix}.ln_split.beta"), &mut self.ln_split_beta);
        for (j, b) in self.branches.iter_mut().enumerate() {
            f(&format!("{prefix}.conv{j}.kernel"), &mut b.kernel);
            f(&format!("{prefix}.conv{j}.bias"), &mut b.bias);
        }
        if let Some(w) = &mut self.fusion_logits {
            f(&format!("{prefix}.fusion_logits"), w);
        }
        f(&format!("{prefix}.out_proj"), &mut self.out_proj);
        f(&format!("{prefix}.out_bias"), &mut self.out_bias);
    }
}

/// Combines the convolution branches into one `[B, T, d']` tensor. With no
/// weights this is the element-wise mean; with `logits` the branches are
/// weighted by `softmax(logits)`.
pub fn fusion(tape: &mut Tape, branches: &[Var], logits: Option<Var>) -> Result<Var> {
    let (&first, rest) = branches
        .split_first()
        .ok_or_else(|| Error::config("fusion of an empty branch list"))?;
    match logits {
        None => {
            let mut acc = first;
            for &b in rest {
                acc = tape.add(acc, b)?;
            }
            if branches.len() == 1 {
                return Ok(acc);
            }
            Ok(tape.scale(acc, 1.0 / branches.len() as f64))
        }
        Some(logits) => {
            if tape.shape(logits) != [branches.len()] {
                return Err(Error::shape(format!(
                    "{} fusion weights for {} branches",
                    tape.shape(logits).iter().product::<usize>(),
                    branches.len()
                )));
            }
            let w = tape.softmax_masked(logits, &vec![true; branches.len()], 0)?;
            let mut acc: Option<Var> = None;
            for (j, &b) in branches.iter().enumerate() {
                let wj = tape.slice_last(w, j, j + 1)?;
                let wj = tape.reshape(wj, vec![])?;
                let term = tape.mul_broadcast(b, wj)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            Ok(acc.unwrap())
        }
    }
}

/// One gated block on `x: [B, T, U]`. `train` enables dropout.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    mask: &[f64],
    params: &MultiConvBlockParams,
    train: bool,
) -> Result<Var> {
    let d_inter = params.d_inter();
    if d_inter % 2 != 0 {
        return Err(Error::config(format!("d_inter must be even, got {d_inter}")));
    }
    let half = d_inter / 2;

    let g_in = tape.param(&params.ln_in_gamma);
    let b_in = tape.param(&params.ln_in_beta);
    let h = tape.layer_norm(x, g_in, b_in, LAYER_NORM_EPS)?;
    let h = tape.mask_frames(h, mask)?;

    let w = tape.param(&params.expand);
    let wb = tape.param(&params.expand_bias);
    let e = tape.matmul(h, w)?;
    let e = tape.add_broadcast(e, wb)?;
    let e = tape.gelu(e);
    let e = tape.mask_frames(e, mask)?;

    let z_l = tape.slice_last(e, 0, half)?;
    let z_r = tape.slice_last(e, half, d_inter)?;
    let g_s = tape.param(&params.ln_split_gamma);
    let b_s = tape.param(&params.ln_split_beta);
    let z_r = tape.layer_norm(z_r, g_s, b_s, LAYER_NORM_EPS)?;
    let z_r = tape.mask_frames(z_r, mask)?;

    let mut outs = Vec::with_capacity(params.branches.len());
    for br in &params.branches {
        let k = tape.param(&br.kernel);
        let b = tape.param(&br.bias);
        let v = match params.conv {
            ConvKind::Depthwise => tape.conv1d_depthwise(z_r, k, b)?,
            ConvKind::Full => tape.conv1d_full(z_r, k, b)?,
        };
        outs.push(tape.mask_frames(v, mask)?);
    }
    let logits = params.fusion_logits.as_ref().map(|p| tape.param(p));
    let fused = fusion(tape, &outs, logits)?;

    let gated = tape.mul(fused, z_l)?;
    let wo = tape.param(&params.out_proj);
    let bo = tape.param(&params.out_bias);
    let o = tape.matmul(gated, wo)?;
    let o = tape.add_broadcast(o, bo)?;
    let o = tape.dropout(o, params.dropout, train)?;
    let o = tape.mask_frames(o, mask)?;
    if params.residual {
        tape.add(x, o)
    } else {
        Ok(o)
    }
}

/// Outputs of every block plus their concatenation `G = (F¹, …, F^M)`.
#[derive(Debug, Clone)]
pub struct StackOutput {
    pub per_layer: Vec<Var>,
    pub concat: Var,
}

pub fn stack_forward(
    tape: &mut Tape,
    x: Var,
    mask: &[f64],
    blocks: &[MultiConvBlockParams],
    train: bool,
) -> Result<StackOutput> {
    if blocks.is_empty() {
        return Err(Error::config("the MultiConv stack needs at least one block"));
    }
    let mut per_layer = Vec::with_capacity(blocks.len());
    let mut h = x;
    for b in blocks {
        h = block_forward(tape, h, mask, b, train)?;
        per_layer.push(h);
    }
    let concat = if per_layer.len() == 1 {
        per_layer[0]
    } else {
        tape.concat_last(&per_layer)?
    };
    Ok(StackOutput { per_layer, concat })
}
