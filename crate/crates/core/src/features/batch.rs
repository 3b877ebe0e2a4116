use super::{HiddenStack, Label};
use crate::error::{Error, Result};

/// Utterances padded to the longest one, `[B][L][T_max][D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<f64>,
    /// `[B][T_max]`, 1.0 for real frames and 0.0 for padding.
    pub mask: Vec<f64>,
    pub labels: Vec<Label>,
    pub utt_ids: Vec<String>,
    pub lengths: Vec<usize>,
    pub layers: usize,
    pub max_frames: usize,
    pub dim: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn mask_bool(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m != 0.0).collect()
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.size(), self.layers, self.max_frames, self.dim]
    }

    /// Recovers utterance `b` without its padding.
    pub fn unpad(&self, b: usize) -> HiddenStack {
        let (l, tm, d) = (self.layers, self.max_frames, self.dim);
        let t = self.lengths[b];
        let mut values = Vec::with_capacity(l * t * d);
        for layer in 0..l {
            let base = ((b * l + layer) * tm) * d;
            values.extend(self.features[base..base + t * d].iter().map(|&v| v as f32));
        }
        HiddenStack {
            utt_id: self.utt_ids[b].clone(),
            layers: l,
            frames: t,
            dim: d,
            values,
        }
    }
}

/// Pads to the longest utterance with zeros and builds the frame mask.
pub fn make_batch(stacks: &[&HiddenStack], labels: &[Label]) -> Result<Batch> {
    let first = stacks.first().ok_or_else(|| Error::data("empty batch"))?;
    if stacks.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} utterances but {} labels",
            stacks.len(),
            labels.len()
        )));
    }
    let (l, d) = (first.layers, first.dim);
    if let Some(bad) = stacks.iter().find(|s| s.layers != l || s.dim != d) {
        return Err(Error::shape(format!(
            "utterance {:?} has L={} D={} but the batch has L={l} D={d}",
            bad.utt_id, bad.layers, bad.dim
        )));
    }
    let tm = stacks.iter().map(|s| s.frames).max().unwrap();
    let b = stacks.len();
    let mut features = vec![0.0; b * l * tm * d];
    let mut mask = vec![0.0; b * tm];
    for (bi, s) in stacks.iter().enumerate() {
        for layer in 0..l {
            let dst = ((bi * l + layer) * tm) * d;
            let src = layer * s.frames * d;
            for (o, &v) in features[dst..dst + s.frames * d]
                .iter_mut()
                .zip(&s.values[src..src + s.frames * d])
            {
                *o = v as f64;
            }
        }
        mask[bi * tm..bi * tm + s.frames].iter_mut().for_each(|m| *m = 1.0);
    }
    Ok(Batch {
        features,
        mask,
        labels: labels.to_vec(),
        utt_ids: stacks.iter().map(|s| s.utt_id.clone()).collect(),
        lengths: stacks.iter().map(|s| s.frames).collect(),
        layers: l,
        max_frames: tm,
        dim: d,
    })
}
