#![allow(dead_code)]

pub mod checks;
pub mod oracle;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mgsd_core::config::{ConvKind, Fusion, GateForm, ModelConfig, PoolMode};
use mgsd_core::features::{HiddenStack, Label};
use mgsd_core::model::Model;
use mgsd_core::tensor::Parameters;

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

/// Mask `[B][T]` with each utterance at least one frame long and one of them
/// full length.
pub fn random_mask(rng: &mut ChaCha8Rng, b: usize, t: usize) -> Vec<f64> {
    let full = rng.random_range(0..b);
    let mut mask = vec![0.0; b * t];
    for bi in 0..b {
        let len = if bi == full { t } else { rng.random_range(1..=t) };
        for ti in 0..len {
            mask[bi * t + ti] = 1.0;
        }
    }
    mask
}

pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.aggregator.layers = rng.random_range(1..=3);
    c.aggregator.feat_dim = rng.random_range(1..=5);
    c.aggregator.proj_dim = rng.random_range(2..=6);
    c.aggregator.gate = if rng.random_bool(0.5) { GateForm::Matrix } else { GateForm::Vector };
    c.multiconv.layers = rng.random_range(1..=3);
    let n_k = rng.random_range(1..=3);
    c.multiconv.kernels = (0..n_k).map(|_| [1, 3, 5, 7][rng.random_range(0..4)]).collect();
    c.multiconv.d_inter = 2 * rng.random_range(1..=4);
    c.multiconv.residual = rng.random_bool(0.5);
    c.multiconv.fusion = if rng.random_bool(0.5) { Fusion::Mean } else { Fusion::Learned };
    c.multiconv.conv = if rng.random_bool(0.7) { ConvKind::Depthwise } else { ConvKind::Full };
    let q = c.multiconv.layers * c.aggregator.proj_dim;
    let divisors: Vec<usize> = (1..=q).filter(|k| q % k == 0 && *k <= 4).collect();
    c.pool.heads = divisors[rng.random_range(0..divisors.len())];
    c.pool.mode = if rng.random_bool(0.7) { PoolMode::Stats } else { PoolMode::Literal };
    c.head.hidden = if rng.random_bool(0.5) { 0 } else { rng.random_range(1..=4) };
    c
}

/// A model whose every parameter, biases and norms included, is random.
pub fn random_model(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Model {
    let mut m = Model::init(cfg, rng.random()).unwrap();
    m.visit_mut(&mut |_, p| {
        for v in p.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    });
    m
}

pub fn random_stack(rng: &mut ChaCha8Rng, id: String, l: usize, t: usize, d: usize) -> HiddenStack {
    let values = (0..l * t * d).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect();
    HiddenStack::new(id, l, t, d, values).unwrap()
}

pub fn label(i: usize) -> Label {
    if i % 2 == 0 {
        Label::Bonafide
    } else {
        Label::Spoof
    }
}

/// `|a − b| / max(1, |b|)`, maximised over both slices.
pub fn max_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| if x.is_nan() && y.is_nan() { 0.0 } else { (x - y).abs() / y.abs().max(1.0) })
        .fold(0.0, f64::max)
}
