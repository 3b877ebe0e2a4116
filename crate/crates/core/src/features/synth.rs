//! Synthetic stand-in for dumped SSL hidden states.
//!
//! Each layer gets a random unit direction; bona fide frames are drawn
//! around `+sep/2` along it and spoof frames around `−sep/2`, with unit
//! isotropic Gaussian noise. Every split shares the same directions, so a
//! model fitted on one split transfers to the others.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{write_features, HiddenStack, Label, Manifest, ManifestRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_utts: usize,
    /// Utterances in an additional `dev` split; 0 writes only `train`.
    pub n_dev: usize,
    pub layers: usize,
    pub dim: usize,
    /// Inclusive frame-count range.
    pub t_min: usize,
    pub t_max: usize,
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_utts: 200,
            n_dev: 100,
            layers: 4,
            dim: 16,
            t_min: 16,
            t_max: 32,
            class_separation: 6.0,
            seed: 7,
        }
    }
}

pub const CONDITION_KEY: &str = "condition";
pub const CHANNEL_KEY: &str = "channel";

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ a.wrapping_mul(0xc2b2_ae3d_27d4_eb4f).rotate_left(17)
        ^ b.wrapping_mul(0x1656_67b1_9e37_79f9).rotate_left(41)
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t_min == 0 || self.t_min > self.t_max {
            return Err(Error::config(format!(
                "empty frame range {}..={}",
                self.t_min, self.t_max
            )));
        }
        if !(self.class_separation >= 0.0) || !self.class_separation.is_finite() {
            return Err(Error::config(format!(
                "class separation must be a finite value ≥ 0, got {}",
                self.class_separation
            )));
        }
        if self.layers == 0 || self.dim == 0 {
            return Err(Error::config("layers and dim must be positive"));
        }
        Ok(())
    }

    /// One unit direction per layer, shared by every split.
    pub fn directions(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0, 0));
        (0..self.layers)
            .map(|_| loop {
                let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-8 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            })
            .collect()
    }

    /// Generates the `i`-th utterance of a split in memory.
    pub fn utterance(&self, split: &str, split_id: u64, i: usize, directions: &[Vec<f64>]) -> (HiddenStack, Label) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, split_id, i as u64 + 1));
        let label = if i % 2 == 0 { Label::Bonafide } else { Label::Spoof };
        let sign = if label == Label::Bonafide { 0.5 } else { -0.5 };
        let frames = rng.random_range(self.t_min..=self.t_max);
        let mut values = Vec::with_capacity(self.layers * frames * self.dim);
        for dir in directions {
            for _ in 0..frames {
                for &d in dir {
                    let noise: f64 = rng.sample(StandardNormal);
                    values.push((sign * self.class_separation * d + noise) as f32);
                }
            }
        }
        let stack = HiddenStack {
            utt_id: format!("{split}_{i:05}"),
            layers: self.layers,
            frames,
            dim: self.dim,
            values,
        };
        (stack, label)
    }
}

/// Manifests written by [`synth_generate`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: Manifest,
    pub dev: Option<Manifest>,
}

/// Condition tags of the `i`-th utterance: both classes appear under
/// every tag value.
pub fn synth_conditions(i: usize) -> BTreeMap<String, String> {
    let cond = if (i / 2) % 2 == 0 { "synthA" } else { "synthB" };
    let chan = if (i / 4) % 2 == 0 { "ch0" } else { "ch1" };
    BTreeMap::from([
        (CONDITION_KEY.to_string(), cond.to_string()),
        (CHANNEL_KEY.to_string(), chan.to_string()),
    ])
}

/// Split names and their stream ids.
pub const SYNTH_SPLITS: [(&str, u64); 2] = [("train", 1), ("dev", 2)];

fn write_split(spec: &SynthSpec, out: &Path, split: &str, split_id: u64, n: usize, dirs: &[Vec<f64>]) -> Result<Manifest> {
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let (stack, label) = spec.utterance(split, split_id, i, dirs);
        let rel = format!("feats/{}.mgsd", stack.utt_id);
        write_features(&stack, &out.join(&rel))?;
        rows.push(ManifestRow {
            utt_id: stack.utt_id,
            path: rel,
            label,
            conditions: synth_conditions(i),
        });
    }
    let manifest = Manifest::new(out, rows)?;
    manifest.save(&out.join(format!("{split}.jsonl")))?;
    Ok(manifest)
}

/// Writes `train.jsonl` (and `dev.jsonl` when `n_dev > 0`) plus one feature
/// file per utterance under `out/feats/`. Output is byte-deterministic in
/// the seed.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dirs = spec.directions();
    let train = write_split(spec, out, SYNTH_SPLITS[0].0, SYNTH_SPLITS[0].1, spec.n_utts, &dirs)?;
    let dev = if spec.n_dev > 0 {
        Some(write_split(spec, out, SYNTH_SPLITS[1].0, SYNTH_SPLITS[1].1, spec.n_dev, &dirs)?)
    } else {
        None
    };
    Ok(SynthOutput { train, dev })
}
