//! The full countermeasure graph: aggregation → MultiConv stack → pooling →
//! two-way head.

mod aggregator;
mod init;
mod multiconv;
mod pooling;

pub use aggregator::{aggregate, aggregate_var, AggregatedFeatures, AggregatorParams};
pub use init::Init;
pub use multiconv::{block_forward, fusion, stack_forward, ConvBranch, MultiConvBlockParams, StackOutput};
pub use pooling::{classify, mhap, HeadParams, MhapParams};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::features::{make_batch, Batch, HiddenStack, Label};
use crate::tensor::{ParamTensor, Parameters, Tape, Var};

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub aggregator: AggregatorParams,
    pub blocks: Vec<MultiConvBlockParams>,
    pub pool: MhapParams,
    pub head: HeadParams,
}

/// Handles into the tape for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub layer_outputs: Vec<Var>,
    pub pooled: Var,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let aggregator = AggregatorParams::init(&config.aggregator, &mut init);
        let u = config.aggregator.proj_dim;
        let blocks = (0..config.multiconv.layers)
            .map(|_| MultiConvBlockParams::init(u, &config.multiconv, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let pool = MhapParams::init(config.stack_width(), config.pool.heads, config.pool.mode, &mut init)?;
        let head = HeadParams::init(config.pooled_width(), &config.head, &mut init);
        Ok(Self {
            config: config.clone(),
            aggregator,
            blocks,
            pool,
            head,
        })
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch, train: bool) -> Result<ForwardOutput> {
        let agg = self.config.aggregator.layers;
        if batch.layers != agg || batch.dim != self.config.aggregator.feat_dim {
            return Err(Error::shape(format!(
                "batch has L={} D={} but the model expects L={agg} D={}",
                batch.layers, batch.dim, self.config.aggregator.feat_dim
            )));
        }
        let h = aggregate(tape, batch, &self.aggregator)?;
        let stack = stack_forward(tape, h.values, &h.mask, &self.blocks, train)?;
        let pooled = mhap(tape, stack.concat, &h.mask, &self.pool)?;
        let logits = classify(tape, pooled, &self.head)?;
        Ok(ForwardOutput {
            logits,
            layer_outputs: stack.per_layer,
            pooled,
        })
    }

    /// Evaluation-mode logits for one utterance, `[logit_bona, logit_spoof]`.
    pub fn logits_one(&self, stack: &HiddenStack) -> Result<[f64; 2]> {
        let batch = make_batch(&[stack], &[Label::Bonafide])?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &batch, false)?;
        let v = tape.value(out.logits);
        Ok([v[0], v[1]])
    }
}

impl Parameters for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.aggregator.visit("aggregator", &mut |n, p| f(n, p));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}"), &mut |n, p| f(n, p));
        }
        f("pool.queries", &self.pool.queries);
        if let Some((w, b)) = &self.head.hidden {
            f("head.hidden.weight", w);
            f("head.hidden.bias", b);
        }
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.aggregator.visit_mut("aggregator", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{i}"), f);
        }
        f("pool.queries", &mut self.pool.queries);
        if let Some((w, b)) = &mut self.head.hidden {
            f("head.hidden.weight", w);
            f("head.hidden.bias", b);
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }
}
