use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::features::{make_batch, Batch, HiddenStack, Label};
use crate::model::Model;
use crate::objectives::{cka_loss, weighted_ce};
use crate::tensor::{grad_check, GradCheckReport};

/// A random padded batch matching the config's `(L, D)`. Utterance `b` has
/// `max_frames − b` frames (at least 1), and labels alternate.
pub fn random_batch(cfg: &Config, batch_size: usize, max_frames: usize, seed: u64) -> Result<Batch> {
    if batch_size == 0 || max_frames == 0 {
        return Err(Error::config("gradient check needs at least one utterance and one frame"));
    }
    let (l, d) = (cfg.aggregator.layers, cfg.aggregator.feat_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stacks = (0..batch_size)
        .map(|b| {
            let t = max_frames.saturating_sub(b).max(1);
            let values = (0..l * t * d)
                .map(|_| StandardNormal.sample(&mut rng))
                .map(|v: f64| v as f32)
                .collect();
            HiddenStack::new(format!("gc{b}"), l, t, d, values)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Label> = (0..batch_size)
        .map(|b| if b % 2 == 0 { Label::Bonafide } else { Label::Spoof })
        .collect();
    make_batch(&stacks.iter().collect::<Vec<_>>(), &labels)
}

/// Finite-difference check of the full training objective (aggregation
/// through the head, weighted CE, plus the CKA term when enabled) with
/// dropout active under a fixed mask.
pub fn full_graph_grad_check(cfg: &Config, batch_size: usize, max_frames: usize, seed: u64, h: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut model = Model::init(&cfg.model(), seed)?;
    let batch = random_batch(cfg, batch_size, max_frames, seed ^ 0x5eed)?;
    let labels: Vec<usize> = batch.labels.iter().map(|l| l.index()).collect();
    let tc = cfg.train.clone();
    let use_cka = tc.cka && cfg.multiconv.layers >= 2;
    grad_check(
        &mut model,
        |tape, m| {
            let out = m.forward(tape, &batch, true)?;
            let ce = weighted_ce(tape, out.logits, &labels, tc.class_weights)?;
            if use_cka {
                let c = cka_loss(tape, &out.layer_outputs, &batch.mask, tc.m_max, tc.seed, 0)?;
                tape.add(ce, c.loss)
            } else {
                Ok(ce)
            }
        },
        h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_graph_passes() {
        let cfg = Config::parse(
            "[aggregator]\nlayers = 2\nfeat_dim = 3\nproj_dim = 4\n\
             [multiconv]\nlayers = 2\nkernels = [3]\nd_inter = 4\n\
             [pool]\nheads = 2\n",
        )
        .unwrap();
        let r = full_graph_grad_check(&cfg, 2, 4, 1, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        assert!(r.checked > 100);
    }

    #[test]
    fn random_batch_pads_shorter_utterances() {
        let cfg = Config::parse("[aggregator]\nlayers = 2\nfeat_dim = 3\nproj_dim = 4\n[pool]\nheads = 2\n").unwrap();
        let b = random_batch(&cfg, 3, 5, 0).unwrap();
        assert_eq!(b.lengths, vec![5, 4, 3]);
        assert_eq!(b.mask[5..10], [1.0, 1.0, 1.0, 1.0, 0.0]);
    }
}
