//! Linear CKA, as a metric on plain matrices and as a differentiable loss
//! over the MultiConv layer outputs.
//!
//! Both paths use the feature-space identity
//! `trace(K J N J) = ‖(JS)ᵀ(JY)‖²_F` for `K = SSᵀ`, `N = YYᵀ`, which costs
//! `O(m·p₁·p₂)` instead of `O(m²)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// HSIC values below this are treated as constant activations.
pub const HSIC_FLOOR: f64 = 1e-12;

/// Dense row-major matrix, `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(format!(
                "{rows}×{cols} matrix given {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    fn centered(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.rows as f64);
        let mut out = self.data.clone();
        for row in out.chunks_mut(self.cols) {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        out
    }
}

fn cross_frobenius_sq(a: &[f64], pa: usize, b: &[f64], pb: usize, m: usize) -> f64 {
    let mut c = vec![0.0; pa * pb];
    for r in 0..m {
        let ar = &a[r * pa..(r + 1) * pa];
        let br = &b[r * pb..(r + 1) * pb];
        for (i, &x) in ar.iter().enumerate() {
            let crow = &mut c[i * pb..(i + 1) * pb];
            for (cv, &y) in crow.iter_mut().zip(br) {
                *cv += x * y;
            }
        }
    }
    c.iter().map(|v| v * v).sum()
}

/// `HSIC(SSᵀ, YYᵀ) = trace(K J N J) / (m − 1)²`.
pub fn hsic(s: &Matrix, y: &Matrix) -> Result<f64> {
    if s.rows != y.rows || s.rows < 2 {
        return Err(Error::shape(format!(
            "HSIC needs two matrices with the same m ≥ 2 rows, got {} and {}",
            s.rows, y.rows
        )));
    }
    let m = s.rows;
    let v = cross_frobenius_sq(&s.centered(), s.cols, &y.centered(), y.cols, m);
    Ok(v / ((m - 1) * (m - 1)) as f64)
}

/// `HSIC(K, N) / sqrt(HSIC(K, K)·HSIC(N, N))`. Constant activations on
/// either side are a [`Error::Degenerate`] error.
pub fn linear_cka(s: &Matrix, y: &Matrix) -> Result<f64> {
    let kk = hsic(s, s)?;
    let nn = hsic(y, y)?;
    if kk < HSIC_FLOOR || nn < HSIC_FLOOR {
        return Err(Error::Degenerate(format!(
            "HSIC(K,K) = {kk:e}, HSIC(N,N) = {nn:e}; activations are constant"
        )));
    }
    Ok(hsic(s, y)? / (kk * nn).sqrt())
}

/// A layer prepared for CKA on the tape: centered rows and self-HSIC.
struct Centered {
    x: Var,
    self_hsic: Var,
    m: usize,
}

fn center_on_tape(tape: &mut Tape, x: Var) -> Result<Centered> {
    let m = tape.shape(x)[0];
    let mean = tape.sum_axis(x, 0)?;
    let mean = tape.scale(mean, 1.0 / m as f64);
    let mean = tape.expand_axis(mean, 0, m)?;
    let x = tape.sub(x, mean)?;
    let self_hsic = hsic_on_tape(tape, x, x, m)?;
    Ok(Centered { x, self_hsic, m })
}

fn hsic_on_tape(tape: &mut Tape, a: Var, b: Var, m: usize) -> Result<Var> {
    let at = tape.transpose(a)?;
    let c = tape.matmul(at, b)?;
    let sq = tape.mul(c, c)?;
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / ((m - 1) * (m - 1)) as f64))
}

fn cka_from_parts(tape: &mut Tape, a: &Centered, b: &Centered) -> Result<Var> {
    let cross = hsic_on_tape(tape, a.x, b.x, a.m)?;
    let prod = tape.mul(a.self_hsic, b.self_hsic)?;
    let denom = tape.sqrt(prod);
    tape.div(cross, denom)
}

/// Differentiable linear CKA between `s: [m, p1]` and `y: [m, p2]`.
/// Returns `None` when either side is degenerate.
pub fn linear_cka_on_tape(tape: &mut Tape, s: Var, y: Var) -> Result<Option<Var>> {
    let (ss, ys) = (tape.shape(s).to_vec(), tape.shape(y).to_vec());
    if ss.len() != 2 || ys.len() != 2 || ss[0] != ys[0] || ss[0] < 2 {
        return Err(Error::shape(format!("CKA of {ss:?} and {ys:?}")));
    }
    let a = center_on_tape(tape, s)?;
    let b = center_on_tape(tape, y)?;
    if tape.value(a.self_hsic)[0] < HSIC_FLOOR || tape.value(b.self_hsic)[0] < HSIC_FLOOR {
        return Ok(None);
    }
    cka_from_parts(tape, &a, &b).map(Some)
}

/// Picks the sample rows for CKA: the valid `(batch, frame)` positions,
/// flattened, subsampled to at most `m_max` by an RNG seeded from
/// `(seed, step)`, in ascending order.
pub fn select_rows(mask: &[f64], m_max: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    let valid: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0.0)
        .map(|(i, _)| i)
        .collect();
    if valid.len() < 2 {
        return Err(Error::data(format!(
            "CKA needs at least 2 valid frames, batch has {}",
            valid.len()
        )));
    }
    if valid.len() <= m_max {
        return Ok(valid);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x2545_f491_4f6c_dd1d));
    let mut picked: Vec<usize> = sample(&mut rng, valid.len(), m_max)
        .into_iter()
        .map(|i| valid[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone)]
pub struct CkaLoss {
    /// Mean strict-pair CKA; a constant 0 if every pair was degenerate.
    pub loss: Var,
    /// `M × M`, diagonal 1, `NaN` for skipped pairs.
    pub pairwise: Vec<Vec<f64>>,
    pub skipped: usize,
    pub rows: usize,
}

/// Pairwise CKA dissimilarity loss over the block outputs `[B, T, U]`.
///
/// Averages `CKA(p, q)` over strict pairs `p < q`. Degenerate pairs are
/// skipped and counted; the average is over the pairs that remain.
pub fn cka_loss(tape: &mut Tape, layers: &[Var], mask: &[f64], m_max: usize, seed: u64, step: u64) -> Result<CkaLoss> {
    if layers.len() < 2 {
        return Err(Error::config("the CKA loss needs at least two layers"));
    }
    let rows = select_rows(mask, m_max, seed, step)?;
    let mut prepared = Vec::with_capacity(layers.len());
    for &l in layers {
        let g = tape.gather_rows(l, &rows)?;
        if tape.value(g).len() / rows.len() * mask.len() != tape.value(l).len() {
            return Err(Error::shape(format!(
                "layer output {:?} does not match a mask of {} frames",
                tape.shape(l),
                mask.len()
            )));
        }
        prepared.push(center_on_tape(tape, g)?);
    }
    let n = layers.len();
    let mut pairwise = vec![vec![f64::NAN; n]; n];
    let mut total: Option<Var> = None;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for p in 0..n {
        pairwise[p][p] = 1.0;
        for q in p + 1..n {
            let (a, b) = (&prepared[p], &prepared[q]);
            if tape.value(a.self_hsic)[0] < HSIC_FLOOR || tape.value(b.self_hsic)[0] < HSIC_FLOOR {
                skipped += 1;
                continue;
            }
            let c = cka_from_parts(tape, a, b)?;
            let v = tape.value(c)[0];
            pairwise[p][q] = v;
            pairwise[q][p] = v;
            total = Some(match total {
                None => c,
                Some(t) => tape.add(t, c)?,
            });
            used += 1;
        }
    }
    let loss = match total {
        Some(t) => tape.scale(t, 1.0 / used as f64),
        None => tape.constant(vec![], vec![0.0])?,
    };
    Ok(CkaLoss {
        loss,
        pairwise,
        skipped,
        rows: rows.len(),
    })
}

/// Mean of the strict upper triangle, ignoring `NaN` entries.
pub fn mean_off_diagonal(pairwise: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, row) in pairwise.iter().enumerate() {
        for &v in &row[p + 1..] {
            if !v.is_nan() {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Pairwise CKA between full layer activations (metric mode, no tape).
pub fn pairwise_cka(layers: &[Matrix]) -> Result<Vec<Vec<f64>>> {
    let n = layers.len();
    let mut out = vec![vec![1.0; n]; n];
    for p in 0..n {
        for q in p + 1..n {
            let v = linear_cka(&layers[p], &layers[q])?;
            out[p][q] = v;
            out[q][p] = v;
        }
    }
    Ok(out)
}
