//! Randomised comparisons between the library and the loop oracles. Each
//! returns the largest error seen over `n` instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mgsd_core::config::PoolMode;
use mgsd_core::model::{aggregate_var, block_forward, classify, fusion, mhap, HeadParams, MhapParams};
use mgsd_core::objectives::{cka_loss, eer_from_scores, linear_cka, llr, select_rows, weighted_ce, Matrix};
use mgsd_core::tensor::{ParamTensor, Tape};

use super::{max_err, normal_vec, oracle, random_config, random_mask, random_model};

pub fn aggregate(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let cfg = random_config(&mut rng);
        let m = random_model(&cfg, &mut rng);
        let (l, d) = (cfg.aggregator.layers, cfg.aggregator.feat_dim);
        let (b, t) = (rng.random_range(1..=3), rng.random_range(1..=6));
        let h = normal_vec(&mut rng, b * l * t * d);
        let mask = random_mask(&mut rng, b, t);
        let mut tape = Tape::new();
        let hv = tape.constant(vec![b, l, t, d], h.clone()).unwrap();
        let out = aggregate_var(&mut tape, hv, &mask, &m.aggregator).unwrap();
        worst = worst.max(max_err(tape.value(out), &oracle::aggregate(&h, [b, l, t, d], &mask, &m.aggregator)));
    }
    worst
}

pub fn block(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let cfg = random_config(&mut rng);
        let m = random_model(&cfg, &mut rng);
        let u = cfg.aggregator.proj_dim;
        let (b, t) = (rng.random_range(1..=3), rng.random_range(1..=9));
        let x = normal_vec(&mut rng, b * t * u);
        let mask = random_mask(&mut rng, b, t);
        let p = &m.blocks[0];
        let mut tape = Tape::new();
        let xv = tape.constant(vec![b, t, u], x.clone()).unwrap();
        let out = block_forward(&mut tape, xv, &mask, p, false).unwrap();
        worst = worst.max(max_err(tape.value(out), &oracle::block(&x, b, t, &mask, p)));
    }
    worst
}

pub fn fusion_op(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let nb = rng.random_range(1..=4);
        let shape = vec![rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=4)];
        let len: usize = shape.iter().product();
        let branches: Vec<Vec<f64>> = (0..nb).map(|_| normal_vec(&mut rng, len)).collect();
        let logits = rng.random_bool(0.5).then(|| normal_vec(&mut rng, nb));
        let mut tape = Tape::new();
        let vars: Vec<_> = branches.iter().map(|b| tape.constant(shape.clone(), b.clone()).unwrap()).collect();
        let lv = logits.as_ref().map(|l| tape.constant(vec![nb], l.clone()).unwrap());
        let out = fusion(&mut tape, &vars, lv).unwrap();
        worst = worst.max(max_err(tape.value(out), &oracle::fusion(&branches, logits.as_deref())));
    }
    worst
}

pub fn mhap_op(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let heads = rng.random_range(1..=4);
        let q = heads * rng.random_range(1..=4);
        let (b, t) = (rng.random_range(1..=3), rng.random_range(1..=8));
        let mode = if rng.random_bool(0.5) { PoolMode::Stats } else { PoolMode::Literal };
        let params = MhapParams {
            queries: ParamTensor::new(vec![heads, q / heads], normal_vec(&mut rng, q)).unwrap(),
            mode,
        };
        let g = normal_vec(&mut rng, b * t * q);
        let mask = random_mask(&mut rng, b, t);
        let mut tape = Tape::new();
        let gv = tape.constant(vec![b, t, q], g.clone()).unwrap();
        let out = mhap(&mut tape, gv, &mask, &params).unwrap();
        worst = worst.max(max_err(tape.value(out), &oracle::mhap(&g, b, t, q, &mask, &params)));
    }
    worst
}

pub fn classify_op(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (b, n_in) = (rng.random_range(1..=4), rng.random_range(1..=8));
        let hidden = rng.random_range(0..=4);
        let width = if hidden == 0 { n_in } else { hidden };
        let params = HeadParams {
            hidden: (hidden > 0).then(|| {
                (
                    ParamTensor::new(vec![n_in, hidden], normal_vec(&mut rng, n_in * hidden)).unwrap(),
                    ParamTensor::new(vec![hidden], normal_vec(&mut rng, hidden)).unwrap(),
                )
            }),
            weight: ParamTensor::new(vec![width, 2], normal_vec(&mut rng, width * 2)).unwrap(),
            bias: ParamTensor::new(vec![2], normal_vec(&mut rng, 2)).unwrap(),
        };
        let x = normal_vec(&mut rng, b * n_in);
        let mut tape = Tape::new();
        let xv = tape.constant(vec![b, n_in], x.clone()).unwrap();
        let out = classify(&mut tape, xv, &params).unwrap();
        worst = worst.max(max_err(tape.value(out), &oracle::classify(&x, b, &params)));
    }
    worst
}

pub fn weighted_ce_op(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let b = rng.random_range(1..=8);
        let logits: Vec<f64> = normal_vec(&mut rng, 2 * b).iter().map(|v| 3.0 * v).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
        let w = [rng.random_range(0.05..2.0), rng.random_range(0.05..2.0)];
        let mut tape = Tape::new();
        let lv = tape.constant(vec![b, 2], logits.clone()).unwrap();
        let out = weighted_ce(&mut tape, lv, &labels, w).unwrap();
        worst = worst.max(max_err(tape.value(out), &[oracle::weighted_ce(&logits, &labels, w)]));
    }
    worst
}

pub fn linear_cka_op(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let m = rng.random_range(2..=16);
        let (p1, p2) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let s = normal_vec(&mut rng, m * p1);
        let y = normal_vec(&mut rng, m * p2);
        let got = linear_cka(&Matrix::new(m, p1, s.clone()).unwrap(), &Matrix::new(m, p2, y.clone()).unwrap()).unwrap();
        worst = worst.max(max_err(&[got], &[oracle::linear_cka(&s, &y, m, p1, p2).unwrap()]));
    }
    worst
}

pub fn cka_loss_op(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let n_layers = rng.random_range(2..=4);
        let (b, t, u) = (rng.random_range(1..=3), rng.random_range(2..=8), rng.random_range(1..=5));
        let mask = random_mask(&mut rng, b, t);
        let layers: Vec<Vec<f64>> = (0..n_layers).map(|_| normal_vec(&mut rng, b * t * u)).collect();
        let valid = mask.iter().filter(|&&m| m != 0.0).count();
        let m_max = rng.random_range(2..=valid.max(2) + 2);
        let mut tape = Tape::new();
        let vars: Vec<_> = layers.iter().map(|l| tape.constant(vec![b, t, u], l.clone()).unwrap()).collect();
        let got = cka_loss(&mut tape, &vars, &mask, m_max, seed, i as u64).unwrap();
        let rows = select_rows(&mask, m_max, seed, i as u64).unwrap();
        worst = worst.max(max_err(tape.value(got.loss), &[oracle::cka_loss(&layers, u, &rows)]));
    }
    worst
}

pub fn llr_op(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let b = rng.random_range(1..=8);
        let logits: Vec<f64> = normal_vec(&mut rng, 2 * b).iter().map(|v| 4.0 * v).collect();
        let want: Vec<f64> = (0..b).map(|i| oracle::llr(logits[2 * i], logits[2 * i + 1])).collect();
        worst = worst.max(max_err(&llr(&logits), &want));
    }
    worst
}

/// Score lists with heavy ties: values drawn from a small grid half the time.
pub fn random_score_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nb = rng.random_range(1..=100);
    let ns = rng.random_range(1..=100);
    let grid = rng.random_bool(0.5);
    let levels = rng.random_range(1..=10);
    let shift = rng.random_range(-1.0..2.0);
    let draw = |rng: &mut ChaCha8Rng, mu: f64| -> f64 {
        if grid {
            rng.random_range(0..levels) as f64 / 4.0 + mu * 0.25
        } else {
            rng.sample::<f64, _>(rand_distr::StandardNormal) + mu
        }
    };
    let bona: Vec<f64> = (0..nb).map(|_| draw(rng, shift)).collect();
    let mut spoof: Vec<f64> = (0..ns).map(|_| draw(rng, 0.0)).collect();
    if rng.random_bool(0.3) {
        // Duplicate a bona fide score into the spoof list.
        spoof[0] = bona[0];
    }
    (bona, spoof)
}

pub fn eer(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (bona, spoof) = random_score_set(&mut rng);
        let got = eer_from_scores(&bona, &spoof).unwrap().eer;
        worst = worst.max((got - oracle::brute_force_eer(&bona, &spoof)).abs());
    }
    worst
}

/// Haar-ish random orthogonal matrix by Gram–Schmidt.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    loop {
        let mut q: Vec<Vec<f64>> = Vec::new();
        for _ in 0..p {
            let mut v = normal_vec(rng, p);
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= dot * b;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-6 {
                break;
            }
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
        if q.len() == p {
            return q.concat();
        }
    }
}

fn right_multiply(x: &[f64], m: usize, p: usize, q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            out[i * p + j] = (0..p).map(|k| x[i * p + k] * q[k * p + j]).sum();
        }
    }
    out
}

/// Largest violation of self-similarity, orthogonal and scale invariance
/// and symmetry.
pub fn cka_invariances(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let m = rng.random_range(3..=30);
        let (p1, p2) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let s = normal_vec(&mut rng, m * p1);
        let y = normal_vec(&mut rng, m * p2);
        let mat = |d: Vec<f64>, p| Matrix::new(m, p, d).unwrap();
        let base = linear_cka(&mat(s.clone(), p1), &mat(y.clone(), p2)).unwrap();
        let self_sim = linear_cka(&mat(s.clone(), p1), &mat(s.clone(), p1)).unwrap();
        let q = random_orthogonal(&mut rng, p1);
        let rotated = linear_cka(&mat(right_multiply(&s, m, p1, &q), p1), &mat(y.clone(), p2)).unwrap();
        let c = rng.random_range(0.01..100.0);
        let scaled = linear_cka(&mat(s.iter().map(|v| c * v).collect(), p1), &mat(y.clone(), p2)).unwrap();
        let swapped = linear_cka(&mat(y, p2), &mat(s, p1)).unwrap();
        for v in [(self_sim - 1.0).abs(), (rotated - base).abs(), (scaled - base).abs(), (swapped - base).abs()] {
            worst = worst.max(v);
        }
    }
    worst
}

/// Largest LLR difference between scoring each of `n` utterances alone and
/// inside a padded batch of up to five, in evaluation mode.
pub fn padding_invariance(model: &mgsd_core::model::Model, n: usize, seed: u64) -> f64 {
    use mgsd_core::features::make_batch;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d) = (model.config.aggregator.layers, model.config.aggregator.feat_dim);
    let stacks: Vec<_> = (0..n)
        .map(|i| {
            let t = rng.random_range(1..=40);
            super::random_stack(&mut rng, format!("u{i}"), l, t, d)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for chunk in stacks.chunks(5) {
        let refs: Vec<_> = chunk.iter().collect();
        let labels: Vec<_> = (0..chunk.len()).map(super::label).collect();
        let batch = make_batch(&refs, &labels).unwrap();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, false).unwrap();
        let batched = llr(tape.value(out.logits));
        for (s, b) in chunk.iter().zip(batched) {
            let alone = llr(&model.logits_one(s).unwrap())[0];
            worst = worst.max((alone - b).abs());
        }
    }
    worst
}
