//! Layer aggregation: shared projection, SwiGLU self-gating per layer, sum
//! over layers.

use super::init::Init;
use crate::config::{AggregatorConfig, GateForm};
use crate::error::{Error, Result};
use crate::features::Batch;
use crate::tensor::{ParamTensor, Tape, Var};

#[derive(Debug, Clone)]
pub struct AggregatorParams {
    pub proj: ParamTensor,
    pub proj_bias: ParamTensor,
    pub w1: ParamTensor,
    pub w2: ParamTensor,
    pub gate: GateForm,
}

impl AggregatorParams {
    pub fn init(cfg: &AggregatorConfig, init: &mut Init) -> Self {
        let (d, u) = (cfg.feat_dim, cfg.proj_dim);
        let proj = init.xavier(vec![d, u], d, u);
        let proj_bias = ParamTensor::zeros(vec![u]);
        let (w1, w2) = match cfg.gate {
            GateForm::Matrix => (init.xavier(vec![u, u], u, u), init.xavier(vec![u, u], u, u)),
            GateForm::Vector => (init.xavier(vec![u], u, 1), init.xavier(vec![u], u, 1)),
        };
        Self {
            proj,
            proj_bias,
            w1,
            w2,
            gate: cfg.gate,
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.proj.shape()[1]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a ParamTensor)) {
        f(&format!("{prefix}.proj"), &self.proj);
        f(&format!("{prefix}.proj_bias"), &self.proj_bias);
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.w2"), &self.w2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}.proj"), &mut self.proj);
        f(&format!("{prefix}.proj_bias"), &mut self.proj_bias);
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.w2"), &mut self.w2);
    }
}

/// `H_agg` for a batch, `[B, T, U]`, plus the frame mask it was built with.
#[derive(Debug, Clone)]
pub struct AggregatedFeatures {
    pub values: Var,
    pub mask: Vec<f64>,
    pub batch: usize,
    pub frames: usize,
}

/// Applies the gated aggregation to a `[B, L, T, D]` tensor already on the tape.
pub fn aggregate_var(
    tape: &mut Tape,
    hidden: Var,
    mask: &[f64],
    params: &AggregatorParams,
) -> Result<Var> {
    let shape = tape.shape(hidden).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("hidden states must be [B, L, T, D], got {shape:?}")));
    }
    if shape[3] != params.proj.shape()[0] {
        return Err(Error::shape(format!(
            "feature dim {} does not match projection {:?}",
            shape[3],
            params.proj.shape()
        )));
    }
    let u = params.proj_dim();
    let proj = tape.param(&params.proj);
    let bias = tape.param(&params.proj_bias);
    let w1 = tape.param(&params.w1);
    let w2 = tape.param(&params.w2);

    let p = tape.matmul(hidden, proj)?;
    let p = tape.add_broadcast(p, bias)?;
    let gated = match params.gate {
        GateForm::Matrix => {
            let a = tape.matmul(p, w1)?;
            let a = tape.sigmoid(a);
            let b = tape.matmul(p, w2)?;
            tape.mul(a, b)?
        }
        GateForm::Vector => {
            let w1 = tape.reshape(w1, vec![u, 1])?;
            let s = tape.matmul(p, w1)?;
            let s = tape.sigmoid(s);
            let s = tape.reshape(s, shape[..3].to_vec())?;
            let s = tape.expand_axis(s, 3, u)?;
            let v = tape.mul_broadcast(p, w2)?;
            tape.mul(s, v)?
        }
    };
    let summed = tape.sum_axis(gated, 1)?;
    tape.mask_frames(summed, mask)
}

pub fn aggregate(tape: &mut Tape, batch: &Batch, params: &AggregatorParams) -> Result<AggregatedFeatures> {
    let hidden = tape.constant(batch.shape().to_vec(), batch.features.clone())?;
    let values = aggregate_var(tape, hidden, &batch.mask, params)?;
    Ok(AggregatedFeatures {
        values,
        mask: batch.mask.clone(),
        batch: batch.size(),
        frames: batch.max_frames,
    })
}
