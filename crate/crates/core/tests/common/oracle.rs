//! Straight-line loop versions of each forward computation. They share no
//! code with the library beyond reading parameter values.

use std::f64::consts::SQRT_2;

use mgsd_core::config::{ConvKind, GateForm, PoolMode};
use mgsd_core::model::{AggregatorParams, HeadParams, MhapParams, MultiConvBlockParams};

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn layer_norm(row: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = (var + 1e-5).sqrt();
    (0..row.len()).map(|i| gamma[i] * (row[i] - mean) / sd + beta[i]).collect()
}

/// `hidden: [B][L][T][D]`, `mask: [B][T]` → `[B][T][U]`.
pub fn aggregate(hidden: &[f64], dims: [usize; 4], mask: &[f64], p: &AggregatorParams) -> Vec<f64> {
    let [b, l, t, d] = dims;
    let u = p.proj.shape()[1];
    let (proj, bias, w1, w2) = (p.proj.data(), p.proj_bias.data(), p.w1.data(), p.w2.data());
    let mut out = vec![0.0; b * t * u];
    for bi in 0..b {
        for ti in 0..t {
            if mask[bi * t + ti] == 0.0 {
                continue;
            }
            for li in 0..l {
                let x = &hidden[((bi * l + li) * t + ti) * d..((bi * l + li) * t + ti + 1) * d];
                let mut pr = vec![0.0; u];
                for j in 0..u {
                    pr[j] = bias[j];
                    for k in 0..d {
                        pr[j] += x[k] * proj[k * u + j];
                    }
                }
                match p.gate {
                    GateForm::Matrix => {
                        for j in 0..u {
                            let mut a = 0.0;
                            let mut g = 0.0;
                            for v in 0..u {
                                a += pr[v] * w1[v * u + j];
                                g += pr[v] * w2[v * u + j];
                            }
                            out[(bi * t + ti) * u + j] += sigmoid(a) * g;
                        }
                    }
                    GateForm::Vector => {
                        let mut s = 0.0;
                        for v in 0..u {
                            s += pr[v] * w1[v];
                        }
                        let s = sigmoid(s);
                        for j in 0..u {
                            out[(bi * t + ti) * u + j] += s * pr[j] * w2[j];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn fusion(branches: &[Vec<f64>], logits: Option<&[f64]>) -> Vec<f64> {
    let n = branches.len();
    let w: Vec<f64> = match logits {
        None => vec![1.0 / n as f64; n],
        Some(z) => {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        }
    };
    let mut out = vec![0.0; branches[0].len()];
    for (j, br) in branches.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(br) {
            *o += w[j] * v;
        }
    }
    out
}

/// One block in evaluation mode on `x: [B][T][U]`.
pub fn block(x: &[f64], b: usize, t: usize, mask: &[f64], p: &MultiConvBlockParams) -> Vec<f64> {
    let u = p.ln_in_gamma.numel();
    let di = p.expand.shape()[1];
    let half = di / 2;
    let (we, be, wo, bo) = (p.expand.data(), p.expand_bias.data(), p.out_proj.data(), p.out_bias.data());
    let mut out = vec![0.0; b * t * u];
    for bi in 0..b {
        let mut zl = vec![vec![0.0; half]; t];
        let mut zr = vec![vec![0.0; half]; t];
        for ti in 0..t {
            if mask[bi * t + ti] == 0.0 {
                continue;
            }
            let row = &x[(bi * t + ti) * u..(bi * t + ti + 1) * u];
            let h = layer_norm(row, p.ln_in_gamma.data(), p.ln_in_beta.data());
            let mut e = vec![0.0; di];
            for j in 0..di {
                let mut s = be[j];
                for k in 0..u {
                    s += h[k] * we[k * di + j];
                }
                e[j] = gelu(s);
            }
            zl[ti] = e[..half].to_vec();
            zr[ti] = layer_norm(&e[half..], p.ln_split_gamma.data(), p.ln_split_beta.data());
        }
        let mut outs = Vec::new();
        for br in &p.branches {
            let k = br.kernel.shape()[0];
            let kv = br.kernel.data();
            let mut y = vec![0.0; t * half];
            for ti in 0..t {
                if mask[bi * t + ti] == 0.0 {
                    continue;
                }
                for co in 0..half {
                    let mut s = br.bias.data()[co];
                    for i in 0..k {
                        let src = ti as isize + i as isize - (k / 2) as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        match p.conv {
                            ConvKind::Depthwise => s += kv[i * half + co] * zr[src][co],
                            ConvKind::Full => {
                                for ci in 0..half {
                                    s += kv[(i * half + ci) * half + co] * zr[src][ci];
                                }
                            }
                        }
                    }
                    y[ti * half + co] = s;
                }
            }
            outs.push(y);
        }
        let fused = fusion(&outs, p.fusion_logits.as_ref().map(|f| f.data()));
        for ti in 0..t {
            let base = (bi * t + ti) * u;
            if mask[bi * t + ti] != 0.0 {
                for j in 0..u {
                    let mut s = bo[j];
                    for c in 0..half {
                        s += fused[ti * half + c] * zl[ti][c] * wo[c * u + j];
                    }
                    out[base + j] = s;
                }
            }
            if p.residual {
                for j in 0..u {
                    out[base + j] += x[base + j];
                }
            }
        }
    }
    out
}

/// `g: [B][T][Q]` → `[B][2Q]` (stats) or `[B][2]` (literal).
pub fn mhap(g: &[f64], b: usize, t: usize, q: usize, mask: &[f64], p: &MhapParams) -> Vec<f64> {
    let k = p.queries.shape()[0];
    let h = q / k;
    let u = p.queries.data();
    let mut out = Vec::new();
    for bi in 0..b {
        let mut c = vec![0.0; q];
        let mut s = vec![0.0; q];
        for j in 0..k {
            let score: Vec<Option<f64>> = (0..t)
                .map(|ti| {
                    (mask[bi * t + ti] != 0.0).then(|| (0..h).map(|e| g[(bi * t + ti) * q + j * h + e] * u[j * h + e]).sum())
                })
                .collect();
            let m = score.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = score.iter().flatten().map(|v| (v - m).exp()).sum();
            let a: Vec<f64> = score.iter().map(|v| v.map_or(0.0, |v| (v - m).exp() / z)).collect();
            for e in 0..h {
                let idx = j * h + e;
                let mean: f64 = (0..t).map(|ti| a[ti] * g[(bi * t + ti) * q + idx]).sum();
                let var: f64 = (0..t).map(|ti| a[ti] * (g[(bi * t + ti) * q + idx] - mean).powi(2)).sum();
                c[idx] = mean;
                s[idx] = (var + 1e-6).sqrt();
            }
        }
        match p.mode {
            PoolMode::Stats => {
                out.extend(c);
                out.extend(s);
            }
            PoolMode::Literal => {
                let mu = c.iter().sum::<f64>() / q as f64;
                let var = c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / q as f64;
                out.push(mu);
                out.push((var + 1e-6).sqrt());
            }
        }
    }
    out
}

pub fn classify(x: &[f64], b: usize, p: &HeadParams) -> Vec<f64> {
    let n_in = x.len() / b;
    let mut out = Vec::new();
    for bi in 0..b {
        let mut v = x[bi * n_in..(bi + 1) * n_in].to_vec();
        if let Some((w, bias)) = &p.hidden {
            let n = bias.numel();
            v = (0..n)
                .map(|j| gelu(bias.data()[j] + (0..v.len()).map(|i| v[i] * w.data()[i * n + j]).sum::<f64>()))
                .collect();
        }
        for j in 0..2 {
            out.push(p.bias.data()[j] + (0..v.len()).map(|i| v[i] * p.weight.data()[i * 2 + j]).sum::<f64>());
        }
    }
    out
}

fn log_softmax2(l0: f64, l1: f64) -> [f64; 2] {
    let z = (l0.exp() + l1.exp()).ln();
    [l0 - z, l1 - z]
}

pub fn weighted_ce(logits: &[f64], labels: &[usize], w: [f64; 2]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let lp = log_softmax2(logits[2 * i], logits[2 * i + 1]);
        num -= w[y] * lp[y];
        den += w[y];
    }
    num / den
}

pub fn llr(l0: f64, l1: f64) -> f64 {
    let lp = log_softmax2(l0, l1);
    lp[0] - lp[1]
}

fn gram(x: &[f64], m: usize, p: usize) -> Vec<f64> {
    let mut k = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            k[i * m + j] = (0..p).map(|c| x[i * p + c] * x[j * p + c]).sum();
        }
    }
    k
}

fn matmul_sq(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            c[i * m + j] = (0..m).map(|k| a[i * m + k] * b[k * m + j]).sum();
        }
    }
    c
}

/// `trace(K J N J) / (m − 1)²` with the explicit centering matrix.
pub fn hsic_gram(k: &[f64], n: &[f64], m: usize) -> f64 {
    let mut j = vec![-1.0 / m as f64; m * m];
    for i in 0..m {
        j[i * m + i] += 1.0;
    }
    let p = matmul_sq(&matmul_sq(&matmul_sq(k, &j, m), n, m), &j, m);
    (0..m).map(|i| p[i * m + i]).sum::<f64>() / ((m - 1) as f64).powi(2)
}

/// `None` when either self-HSIC falls below the degeneracy floor.
pub fn linear_cka(s: &[f64], y: &[f64], m: usize, p1: usize, p2: usize) -> Option<f64> {
    let k = gram(s, m, p1);
    let n = gram(y, m, p2);
    let kk = hsic_gram(&k, &k, m);
    let nn = hsic_gram(&n, &n, m);
    if kk < 1e-12 || nn < 1e-12 {
        return None;
    }
    Some(hsic_gram(&k, &n, m) / (kk * nn).sqrt())
}

/// Mean strict-pair CKA over layer outputs `[B][T][U]` restricted to the
/// flattened frame indices `rows`.
pub fn cka_loss(layers: &[Vec<f64>], u: usize, rows: &[usize]) -> f64 {
    let pick = |l: &Vec<f64>| -> Vec<f64> { rows.iter().flat_map(|&r| l[r * u..(r + 1) * u].to_vec()).collect() };
    let mats: Vec<Vec<f64>> = layers.iter().map(pick).collect();
    let mut sum = 0.0;
    let mut n = 0;
    for p in 0..mats.len() {
        for q in p + 1..mats.len() {
            if let Some(v) = linear_cka(&mats[p], &mats[q], rows.len(), u, u) {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Threshold sweep by direct counting at every candidate, `O(n²)`.
pub fn brute_force_eer(bona: &[f64], spoof: &[f64]) -> f64 {
    let mut taus: Vec<f64> = bona.iter().chain(spoof).cloned().collect();
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    taus.dedup();
    let mut pts = vec![(1.0, 0.0)];
    for &tau in &taus {
        let fa = spoof.iter().filter(|&&s| s > tau).count() as f64 / spoof.len() as f64;
        let miss = bona.iter().filter(|&&s| s <= tau).count() as f64 / bona.len() as f64;
        pts.push((fa, miss));
    }
    for i in 1..pts.len() {
        let (fa, miss) = pts[i];
        if miss >= fa {
            if miss == fa {
                return fa;
            }
            let (fa0, miss0) = pts[i - 1];
            let d0 = fa0 - miss0;
            let d1 = fa - miss;
            return fa0 + d0 / (d0 - d1) * (fa - fa0);
        }
    }
    unreachable!()
}
