use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::{Adam, AdamConfig};
use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::evaluate::{evaluate, Dataset, Evaluation};
use crate::config::{Config, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{make_batch, Label, Manifest};
use crate::model::Model;
use crate::objectives::{cka_loss, weighted_ce, LossBreakdown};
use crate::tensor::{Parameters, Tape};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub train_ce: f64,
    pub train_cka: f64,
    pub train_total: f64,
    pub train_eer: f64,
    pub dev_eer: f64,
    pub dev_ce: f64,
    /// Mean strict-pair CKA between block outputs on the dev set.
    pub dev_cka: Option<f64>,
    pub improved: bool,
    pub best_epoch: usize,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev EER.
    pub best: Model,
    pub best_epoch: usize,
    pub best_dev: Evaluation,
    pub best_step: u64,
    pub log: Vec<EpochLog>,
    /// Per-step losses in order.
    pub steps: Vec<LossBreakdown>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn checkpoint(&self, train: &TrainConfig) -> Checkpoint {
        Checkpoint::from_model(
            &self.best,
            CheckpointMeta {
                model: self.best.config.clone(),
                train: train.clone(),
                epoch: self.best_epoch,
                dev_eer: Some(self.best_dev.eer.eer),
                seed: train.seed,
                step: self.best_step,
            },
        )
    }

    pub fn log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn check_data(cfg: &ModelConfig, name: &str, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::data(format!("{name} set is empty")));
    }
    if data.count(Label::Bonafide) == 0 || data.count(Label::Spoof) == 0 {
        return Err(Error::data(format!("{name} set needs both classes")));
    }
    let a = &cfg.aggregator;
    if data.dims() != Some((a.layers, a.feat_dim)) {
        let (l, d) = data.dims().unwrap();
        return Err(Error::data(format!(
            "{name} features have L={l} D={d} but the model expects L={} D={}",
            a.layers, a.feat_dim
        )));
    }
    Ok(())
}

/// Trains from scratch with early stopping on dev EER. Ties in dev EER go
/// to the lower dev cross-entropy, so a selected epoch never has a worse
/// EER than any earlier one.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    dev_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    check_data(model_cfg, "training", train_set)?;
    check_data(model_cfg, "dev", dev_set)?;
    if cfg.cka && model_cfg.multiconv.layers < 2 {
        return Err(Error::config("the CKA loss needs at least two MultiConv layers"));
    }

    let mut model = Model::init(model_cfg, cfg.seed)?;
    let mut opt = Adam::new(AdamConfig::from(cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best: Option<(Model, usize, Evaluation, u64)> = None;
    let mut log = Vec::new();
    let mut steps = Vec::new();
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum_ce, mut sum_cka) = (0.0, 0.0);
        let mut n_batches = 0usize;
        let mut max_abs_grad: f64 = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let stacks: Vec<_> = chunk.iter().map(|&i| &train_set.examples[i].stack).collect();
            let labels: Vec<Label> = chunk.iter().map(|&i| train_set.examples[i].label).collect();
            let batch = make_batch(&stacks, &labels)?;
            let step = opt.steps();
            let mut tape = Tape::with_seed(cfg.seed, step);
            let out = model.forward(&mut tape, &batch, true)?;
            let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
            let ce = weighted_ce(&mut tape, out.logits, &idx, cfg.class_weights)?;
            let ce_v = tape.value(ce)[0];
            let (total, cka_v, pairwise) = if cfg.cka {
                let c = cka_loss(&mut tape, &out.layer_outputs, &batch.mask, cfg.m_max, cfg.seed, step)?;
                let v = tape.value(c.loss)[0];
                (tape.add(ce, c.loss)?, v, c.pairwise)
            } else {
                (ce, 0.0, Vec::new())
            };
            let total_v = tape.value(total)[0];
            if !total_v.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {bi}: loss {total_v} (ce {ce_v}, cka {cka_v}), max |grad| so far {max_abs_grad}"
                )));
            }
            let grads = tape.backward(total)?;
            model.zero_grad();
            grads.accumulate_into(&mut model)?;
            let stats = Adam::grad_stats(&model);
            if !stats.max_abs_grad.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {bi}: non-finite gradient (loss {total_v})"
                )));
            }
            max_abs_grad = max_abs_grad.max(stats.max_abs_grad);
            opt.step(&mut model);
            let mut finite = true;
            model.visit(&mut |_, p| finite &= p.data().iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {bi}: parameters became non-finite (loss {total_v}, max |grad| {})",
                    stats.max_abs_grad
                )));
            }
            steps.push(LossBreakdown {
                ce: ce_v,
                cka: cka_v,
                total: total_v,
                pairwise_cka: pairwise,
            });
            sum_ce += ce_v;
            sum_cka += cka_v;
            n_batches += 1;
        }

        let train_eval = evaluate(&model, train_set, cfg.class_weights, false)?;
        let dev_eval = evaluate(&model, dev_set, cfg.class_weights, model_cfg.multiconv.layers >= 2)?;
        let improved = match &best {
            None => true,
            Some((_, _, b, _)) => {
                dev_eval.eer.eer < b.eer.eer || (dev_eval.eer.eer == b.eer.eer && dev_eval.ce < b.ce)
            }
        };
        let nb = n_batches as f64;
        let entry = EpochLog {
            epoch,
            steps: opt.steps(),
            train_ce: sum_ce / nb,
            train_cka: sum_cka / nb,
            train_total: sum_ce / nb + sum_cka / nb,
            train_eer: train_eval.eer.eer,
            dev_eer: dev_eval.eer.eer,
            dev_ce: dev_eval.ce,
            dev_cka: dev_eval.mean_cka(),
            improved,
            best_epoch: if improved { epoch } else { best.as_ref().unwrap().1 },
            max_abs_grad,
        };
        on_epoch(&entry);
        log.push(entry);
        if improved {
            best = Some((model.clone(), epoch, dev_eval, opt.steps()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best, best_epoch, best_dev, best_step) =
        best.ok_or_else(|| Error::config("train.max_epochs must be at least 1"))?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_dev,
        best_step,
        log,
        steps,
        stopped_early,
    })
}

/// Files written by [`train_to_dir`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub dev_scores: PathBuf,
    pub config: PathBuf,
}

/// Trains from manifests and writes `best.mgck`, `train_log.jsonl`,
/// `dev_scores.tsv` and the resolved `config.toml` into `out`. Existing
/// files are never overwritten.
pub fn train_to_dir(
    cfg: &Config,
    train_manifest: &Manifest,
    dev_manifest: &Manifest,
    out: &Path,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(TrainOutcome, TrainArtifacts)> {
    cfg.validate()?;
    let train_set = Dataset::load(train_manifest)?;
    let dev_set = Dataset::load(dev_manifest)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let art = TrainArtifacts {
        checkpoint: out.join("best.mgck"),
        log: out.join("train_log.jsonl"),
        dev_scores: out.join("dev_scores.tsv"),
        config: out.join("config.toml"),
    };
    for p in [&art.checkpoint, &art.log, &art.dev_scores, &art.config] {
        if p.exists() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "refusing to overwrite"),
            ));
        }
    }
    let outcome = train(&cfg.model(), &cfg.train, &train_set, &dev_set, on_epoch)?;
    crate::io::write_new(&art.config, cfg.to_toml()?.as_bytes())?;
    crate::io::write_new(&art.log, outcome.log_jsonl()?.as_bytes())?;
    outcome.checkpoint(&cfg.train).save(&art.checkpoint)?;
    crate::objectives::write_scores(&art.dev_scores, &outcome.best_dev.records)?;
    Ok((outcome, art))
}
