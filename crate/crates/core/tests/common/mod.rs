//! Brute-force reference implementations shared by the integration tests
//! and the acceptance suite. Everything here is written as plain loops over
//! flat buffers and deliberately avoids the library's kernels.

#![allow(dead_code)]

pub mod checks;

use lvqa_core::attention::SoftmaxAxis;
use rand::Rng;

pub fn uniform<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Glimpse maps `[B, G, H, W]` from loops.
///
/// `wx: [P, C]`, `wq: [Q, P]`, `wg: [G, P]`, `features: [B, C, H, W]`,
/// `question: [B, Q]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_oracle(
    wx: &[f64],
    wq: &[f64],
    wg: &[f64],
    features: &[f64],
    question: &[f64],
    dims: (usize, usize, usize, usize, usize, usize, usize),
    axis: SoftmaxAxis,
) -> Vec<f64> {
    let (b, c, h, w, p, q, g) = dims;
    let hw = h * w;
    let mut logits = vec![0.0; b * g * hw];
    for bi in 0..b {
        let mut qp = vec![0.0; p];
        for (pi, v) in qp.iter_mut().enumerate() {
            for k in 0..q {
                *v += question[bi * q + k] * wq[k * p + pi];
            }
        }
        for loc in 0..hw {
            let mut joint = vec![0.0; p];
            for pi in 0..p {
                let mut xp = 0.0;
                for ci in 0..c {
                    xp += wx[pi * c + ci] * features[(bi * c + ci) * hw + loc];
                }
                joint[pi] = (xp * qp[pi]).max(0.0);
            }
            for gi in 0..g {
                let mut s = 0.0;
                for pi in 0..p {
                    s += wg[gi * p + pi] * joint[pi];
                }
                logits[(bi * g + gi) * hw + loc] = s;
            }
        }
    }
    let mut out = vec![0.0; logits.len()];
    for bi in 0..b {
        match axis {
            SoftmaxAxis::Spatial => {
                for gi in 0..g {
                    let base = (bi * g + gi) * hw;
                    let row = &logits[base..base + hw];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for loc in 0..hw {
                        out[base + loc] = (row[loc] - m).exp() / z;
                    }
                }
            }
            SoftmaxAxis::Glimpse => {
                for loc in 0..hw {
                    let at = |gi: usize| (bi * g + gi) * hw + loc;
                    let m = (0..g).map(|gi| logits[at(gi)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..g).map(|gi| (logits[at(gi)] - m).exp()).sum();
                    for gi in 0..g {
                        out[at(gi)] = (logits[at(gi)] - m).exp() / z;
                    }
                }
            }
        }
    }
    out
}

/// Any-pixel downsampling of an `s x s` 0/1 mask onto an `h x w` grid.
pub fn downsample_oracle(bits: &[u8], s: usize, h: usize, w: usize) -> Vec<f64> {
    let (bh, bw) = (s / h, s / w);
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut any = false;
            for r in i * bh..(i + 1) * bh {
                for c in j * bw..(j + 1) * bw {
                    any |= bits[r * s + c] != 0;
                }
            }
            out[i * w + j] = if any { 1.0 } else { 0.0 };
        }
    }
    out
}

/// `v[b, g*C + c] = sum_loc att[b,g,loc] * f[b,c,loc] * m[b,loc]`.
pub fn masked_pool_oracle(att: &[f64], features: &[f64], mask: &[f64], b: usize, g: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * g * c];
    for bi in 0..b {
        for gi in 0..g {
            for ci in 0..c {
                let mut s = 0.0;
                for loc in 0..hw {
                    s += att[(bi * g + gi) * hw + loc] * features[(bi * c + ci) * hw + loc] * mask[bi * hw + loc];
                }
                out[bi * g * c + gi * c + ci] = s;
            }
        }
    }
    out
}

/// Pairwise AUC: wins plus half the ties over all positive/negative pairs.
pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Threshold sweep: cut after every position of the descending order (ties
/// kept in input order) and accumulate recall gain times precision.
pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    // selection sort on (score desc, index asc)
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if used[i] {
                continue;
            }
            best = match best {
                Some(bi) if scores[bi] >= scores[i] => Some(bi),
                _ => Some(i),
            };
        }
        let bi = best.unwrap();
        used[bi] = true;
        order.push(bi);
    }
    let total = labels.iter().filter(|&&l| l).count() as f64;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 1..=n {
        let tp = order[..k].iter().filter(|&&i| labels[i]).count() as f64;
        let recall = tp / total;
        ap += (recall - prev_recall) * (tp / k as f64);
        prev_recall = recall;
    }
    ap
}
