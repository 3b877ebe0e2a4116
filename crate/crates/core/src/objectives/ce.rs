use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Class-weighted cross-entropy over `logits: [B, 2]`.
///
/// Each sample's `−log softmax(logits)[label]` is weighted by its class
/// weight and the sum is divided by the total applied weight, so equal
/// weights reduce to the plain batch mean.
pub fn weighted_ce(tape: &mut Tape, logits: Var, labels: &[usize], class_weights: [f64; 2]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[1] != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!(
            "cross-entropy of logits {s:?} against {} labels",
            labels.len()
        )));
    }
    if class_weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::config(format!("class weights must be positive, got {class_weights:?}")));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::data(format!("label {bad} outside {{0, 1}}")));
    }
    let total: f64 = labels.iter().map(|&l| class_weights[l]).sum();
    let mut coef = vec![0.0; 2 * labels.len()];
    for (i, &l) in labels.iter().enumerate() {
        coef[2 * i + l] = -class_weights[l] / total;
    }
    let logp = tape.log_softmax_last(logits)?;
    let picked = tape.mul_const(logp, coef)?;
    Ok(tape.sum_all(picked))
}
