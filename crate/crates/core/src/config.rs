//! Model and training configuration.
//!
//! Configs are TOML files with one table per component:
//!
//! ```toml
//! [aggregator]
//! layers = 25        # L, stacked hidden states per utterance
//! feat_dim = 1024    # D
//! proj_dim = 128     # U
//! gate = "matrix"    # or "vector"
//!
//! [multiconv]
//! layers = 4
//! kernels = [3, 7, 11, 15]
//! d_inter = 512
//! dropout = 0.1
//! residual = true
//! fusion = "mean"    # or "learned"
//! conv = "depthwise" # or "full"
//!
//! [pool]
//! heads = 4
//! mode = "stats"     # or "literal"
//!
//! [head]
//! hidden = 0
//!
//! [train]
//! lr = 3e-6
//! ...
//! ```
//!
//! Any key can be overridden with a dotted `key=value` pair, e.g.
//! `multiconv.kernels=[3,5]` or `train.lr=1e-3`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const POOL_STD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateForm {
    /// `sigmoid(P·W1) ⊙ (P·W2)` with `W1, W2 ∈ ℝ^{U×U}`.
    Matrix,
    /// `W1, W2 ∈ ℝ^U`: a scalar gate `sigmoid(P·w1)` per frame times `P ⊙ w2`.
    Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Mean,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Depthwise,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Stats,
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightDecay {
    Decoupled,
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub layers: usize,
    pub feat_dim: usize,
    pub proj_dim: usize,
    pub gate: GateForm,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            layers: 25,
            feat_dim: 1024,
            proj_dim: 128,
            gate: GateForm::Matrix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiConvConfig {
    pub layers: usize,
    pub kernels: Vec<usize>,
    pub d_inter: usize,
    pub dropout: f64,
    pub residual: bool,
    pub fusion: Fusion,
    pub conv: ConvKind,
}

impl Default for MultiConvConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            kernels: vec![3, 7, 11, 15],
            d_inter: 512,
            dropout: 0.1,
            residual: true,
            fusion: Fusion::Mean,
            conv: ConvKind::Depthwise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub heads: usize,
    pub mode: PoolMode,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            mode: PoolMode::Stats,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Width of an optional GELU hidden layer; 0 means a single affine map.
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub aggregator: AggregatorConfig,
    pub multiconv: MultiConvConfig,
    pub pool: PoolConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Width of the concatenated stack output, `M·U`.
    pub fn stack_width(&self) -> usize {
        self.multiconv.layers * self.aggregator.proj_dim
    }

    pub fn pooled_width(&self) -> usize {
        match self.pool.mode {
            PoolMode::Stats => 2 * self.stack_width(),
            PoolMode::Literal => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.aggregator;
        if a.layers == 0 || a.feat_dim == 0 || a.proj_dim == 0 {
            return Err(Error::config("aggregator layers, feat_dim and proj_dim must be positive"));
        }
        let m = &self.multiconv;
        if m.layers == 0 {
            return Err(Error::config("multiconv.layers must be at least 1"));
        }
        if m.d_inter == 0 || m.d_inter % 2 != 0 {
            return Err(Error::config(format!("multiconv.d_inter must be even and positive, got {}", m.d_inter)));
        }
        if m.kernels.is_empty() {
            return Err(Error::config("multiconv.kernels must not be empty"));
        }
        if let Some(k) = m.kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::config(format!("kernel size {k} must be odd")));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::config(format!("multiconv.dropout {} outside [0, 1)", m.dropout)));
        }
        if self.pool.heads == 0 || self.stack_width() % self.pool.heads != 0 {
            return Err(Error::config(format!(
                "pool.heads = {} must divide M·U = {}",
                self.pool.heads,
                self.stack_width()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub decay: WeightDecay,
    pub batch_size: usize,
    /// (bona fide, spoof)
    pub class_weights: [f64; 2],
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub cka: bool,
    pub m_max: usize,
    /// Global-norm gradient clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-6,
            weight_decay: 1e-4,
            decay: WeightDecay::Decoupled,
            batch_size: 5,
            class_weights: [0.9, 0.1],
            patience: 3,
            max_epochs: 30,
            seed: 0,
            betas: [0.9, 0.999],
            eps: 1e-8,
            cka: true,
            m_max: 256,
            clip_norm: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::config(format!("train.lr must be ≥ 0, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::config("class weights must be positive"));
        }
        if self.m_max < 2 {
            return Err(Error::config("train.m_max must be at least 2"));
        }
        Ok(())
    }
}

/// The whole config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub aggregator: AggregatorConfig,
    pub multiconv: MultiConvConfig,
    pub pool: PoolConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            aggregator: self.aggregator.clone(),
            multiconv: self.multiconv.clone(),
            pool: self.pool.clone(),
            head: self.head.clone(),
        }
    }

    pub fn set_model(&mut self, m: ModelConfig) {
        self.aggregator = m.aggregator;
        self.multiconv = m.multiconv;
        self.pool = m.pool;
        self.head = m.head;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()
    }

    /// Applies `table.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Toml(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {item:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            let mut slot = &mut root;
            for part in key.trim().split('.') {
                slot = slot
                    .get_mut(part)
                    .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
            }
            *slot = coerce(slot, value);
        }
        let cfg: Config = root.try_into().map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Integers given where floats are expected (`lr=1`) become floats.
fn coerce(old: &toml::Value, new: toml::Value) -> toml::Value {
    match (old, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (toml::Value::Array(a), toml::Value::Array(b)) if a.first().is_some_and(|v| v.is_float()) => {
            toml::Value::Array(b.into_iter().map(|v| coerce(&toml::Value::Float(0.0), v)).collect())
        }
        (_, v) => v,
    }
}
