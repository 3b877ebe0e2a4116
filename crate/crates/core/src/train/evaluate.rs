use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::features::{make_batch, synth_conditions, HiddenStack, Label, Manifest, SynthSpec, SYNTH_SPLITS};
use crate::model::Model;
use crate::objectives::{eer, llr, mean_off_diagonal, pairwise_cka, EerResult, Matrix, ScoreRecord};
use crate::tensor::Tape;

#[derive(Debug, Clone)]
pub struct Example {
    pub stack: HiddenStack,
    pub label: Label,
    pub conditions: BTreeMap<String, String>,
}

/// Utterances held in memory, all with the same `(L, D)`.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        if let Some(first) = examples.first() {
            let (l, d) = (first.stack.layers, first.stack.dim);
            if let Some(bad) = examples.iter().find(|e| e.stack.layers != l || e.stack.dim != d) {
                return Err(Error::data(format!(
                    "utterance {:?} has L={} D={}, expected L={l} D={d}",
                    bad.stack.utt_id, bad.stack.layers, bad.stack.dim
                )));
            }
        }
        Ok(Self { examples })
    }

    pub fn load(manifest: &Manifest) -> Result<Self> {
        let examples = manifest
            .rows
            .iter()
            .map(|row| {
                let mut stack = manifest
                    .load_stack(row)
                    .map_err(|e| Error::data(format!("utterance {:?}: {e}", row.utt_id)))?;
                stack.utt_id = row.utt_id.clone();
                Ok(Example {
                    stack,
                    label: row.label,
                    conditions: row.conditions.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(examples)
    }

    /// The in-memory equivalent of a split written by `synth_generate`
    /// (`"train"` with `n_utts` utterances or `"dev"` with `n_dev`).
    pub fn synth(spec: &SynthSpec, split: &str) -> Result<Self> {
        spec.validate()?;
        let (name, id) = *SYNTH_SPLITS
            .iter()
            .find(|(n, _)| *n == split)
            .ok_or_else(|| Error::config(format!("unknown synthetic split {split:?}")))?;
        let n = if id == SYNTH_SPLITS[0].1 { spec.n_utts } else { spec.n_dev };
        let dirs = spec.directions();
        let examples = (0..n)
            .map(|i| {
                let (stack, label) = spec.utterance(name, id, i, &dirs);
                Example {
                    stack,
                    label,
                    conditions: synth_conditions(i),
                }
            })
            .collect();
        Self::new(examples)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.examples.iter().filter(|e| e.label == label).count()
    }

    /// `(L, D)` of the stored utterances.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.examples.first().map(|e| (e.stack.layers, e.stack.dim))
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<ScoreRecord>,
    pub eer: EerResult,
    /// Class-weighted cross-entropy over all utterances.
    pub ce: f64,
    /// Linear CKA between block outputs over every valid frame, when requested.
    pub pairwise_cka: Option<Vec<Vec<f64>>>,
}

impl Evaluation {
    pub fn mean_cka(&self) -> Option<f64> {
        self.pairwise_cka.as_deref().map(mean_off_diagonal)
    }
}

fn check_dims(model: &Model, data: &Dataset) -> Result<()> {
    let a = &model.config.aggregator;
    for e in &data.examples {
        if e.stack.layers != a.layers || e.stack.dim != a.feat_dim {
            return Err(Error::data(format!(
                "utterance {:?} has L={} D={} but the model expects L={} D={}",
                e.stack.utt_id, e.stack.layers, e.stack.dim, a.layers, a.feat_dim
            )));
        }
    }
    Ok(())
}

/// Scores every utterance alone, in evaluation mode.
pub fn score(model: &Model, data: &Dataset) -> Result<Vec<ScoreRecord>> {
    check_dims(model, data)?;
    data.examples
        .iter()
        .map(|e| {
            let logits = model.logits_one(&e.stack)?;
            Ok(ScoreRecord {
                utt_id: e.stack.utt_id.clone(),
                llr: llr(&logits)[0],
                label: e.label,
                conditions: e.conditions.clone(),
            })
        })
        .collect()
}

fn log_softmax_pair(l: &[f64]) -> [f64; 2] {
    let m = l[0].max(l[1]);
    let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
    [l[0] - lse, l[1] - lse]
}

/// Scores, EER, weighted CE and optionally the block-output CKA matrix, one
/// utterance per forward pass with dropout off.
pub fn evaluate(model: &Model, data: &Dataset, class_weights: [f64; 2], with_cka: bool) -> Result<Evaluation> {
    check_dims(model, data)?;
    let n_blocks = model.blocks.len();
    let u = model.config.aggregator.proj_dim;
    let mut acts: Vec<Vec<f64>> = vec![Vec::new(); n_blocks];
    let mut records = Vec::with_capacity(data.len());
    let (mut ce_num, mut ce_den) = (0.0, 0.0);
    for e in &data.examples {
        let batch = make_batch(&[&e.stack], &[e.label])?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, false)?;
        let logits = tape.value(out.logits);
        let w = class_weights[e.label.index()];
        ce_num -= w * log_softmax_pair(logits)[e.label.index()];
        ce_den += w;
        records.push(ScoreRecord {
            utt_id: e.stack.utt_id.clone(),
            llr: llr(logits)[0],
            label: e.label,
            conditions: e.conditions.clone(),
        });
        if with_cka {
            for (a, &v) in acts.iter_mut().zip(&out.layer_outputs) {
                a.extend_from_slice(tape.value(v));
            }
        }
    }
    let pairwise_cka = if with_cka && n_blocks >= 2 {
        let mats = acts
            .into_iter()
            .map(|a| Matrix::new(a.len() / u, u, a))
            .collect::<Result<Vec<_>>>()?;
        match pairwise_cka(&mats) {
            Ok(m) => Some(m),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(Evaluation {
        eer: eer(&records)?,
        records,
        ce: ce_num / ce_den,
        pairwise_cka,
    })
}
