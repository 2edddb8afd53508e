//! Brute-force references for the integration tests. Nothing here calls
//! into the production kernels or metric code.
#![allow(dead_code)]

use mugennet::gradcheck::{rel_error, Case};
use mugennet::nn::ParamStore;
use mugennet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Direct sextuple-loop cross-correlation of an `N×C×H×W` input with an
/// `F×C×KH×KW` kernel. Padding is `(top, bottom, left, right)`; trailing
/// positions that do not fit a whole window are dropped.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    xd: [usize; 4],
    w: &[f64],
    wd: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: (usize, usize, usize, usize),
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wi] = xd;
    let [f, c2, kh, kw] = wd;
    assert_eq!(c, c2);
    let (pt, pb, pl, pr) = pad;
    let ho = (h + pt + pb - kh) / stride + 1;
    let wo = (wi + pl + pr - kw) / stride + 1;
    let mut out = vec![0.0; n * f * ho * wo];
    for b in 0..n {
        for o in 0..f {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pt as isize;
                                let ix = (ox * stride + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                    continue;
                                }
                                let xi = ((b * c + ch) * h + iy as usize) * wi + ix as usize;
                                let wk = ((o * c + ch) * kh + ky) * kw + kx;
                                acc += x[xi] * w[wk];
                            }
                        }
                    }
                    out[((b * f + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [n, f, ho, wo])
}

#[derive(Debug, Clone, Copy)]
pub struct LoopReport {
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
    pub wfbeta: f64,
    pub smeasure: f64,
    pub emeasure: f64,
}

/// `(tp, tn, fp, fn)` of `d` against `g`, with `d` used as is.
pub fn loop_confusion(d: &[f64], g: &[f64]) -> (f64, f64, f64, f64) {
    let (mut tp, mut tn, mut fp, mut fnn) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..d.len() {
        tp += d[i] * g[i];
        tn += (1.0 - d[i]) * (1.0 - g[i]);
        fp += d[i] * (1.0 - g[i]);
        fnn += (1.0 - d[i]) * g[i];
    }
    (tp, tn, fp, fnn)
}

pub fn loop_iou_dice(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for i in 0..pred.len() {
        let p = pred[i] >= 0.5;
        let g = gt[i] == 1.0;
        if p && g {
            inter += 1;
        }
        if p {
            a += 1;
        }
        if g {
            b += 1;
        }
    }
    let union = a + b - inter;
    if union == 0 {
        (1.0, 1.0)
    } else {
        (inter as f64 / union as f64, 2.0 * inter as f64 / (a + b) as f64)
    }
}

fn loop_object(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    let mut mean = 0.0;
    for v in vals {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in vals {
        var += (v - mean) * (v - mean);
    }
    let sigma = (var / n).sqrt();
    2.0 * mean / (mean * mean + 1.0 + 2.0 * sigma)
}

fn loop_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for i in 0..p.len() {
        mx += p[i];
        my += g[i];
    }
    mx /= n;
    my /= n;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        sx += (p[i] - mx) * (p[i] - mx);
        sy += (g[i] - my) * (g[i] - my);
        sxy += (p[i] - mx) * (g[i] - my);
    }
    let d = n - 1.0 + f64::EPSILON;
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn loop_s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for i in 0..pred.len() {
        if gt[i] == 1.0 {
            fg.push(pred[i]);
        } else {
            bg.push(1.0 - pred[i]);
        }
    }
    if fg.is_empty() {
        return loop_object(&bg);
    }
    if bg.is_empty() {
        return loop_object(&fg);
    }
    let s0 = 0.5 * loop_object(&fg) + 0.5 * loop_object(&bg);
    // Foreground centroid in 1-based pixel coordinates marks the split.
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if gt[y * w + x] == 1.0 {
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
    }
    let cx = ((sx / fg.len() as f64).round() as usize).min(w);
    let cy = ((sy / fg.len() as f64).round() as usize).min(h);
    let mut sr = 0.0;
    for (y0, y1) in [(0, cy), (cy, h)] {
        for (x0, x1) in [(0, cx), (cx, w)] {
            let (mut p, mut g) = (Vec::new(), Vec::new());
            for y in y0..y1 {
                for x in x0..x1 {
                    p.push(pred[y * w + x]);
                    g.push(gt[y * w + x]);
                }
            }
            if !p.is_empty() {
                sr += p.len() as f64 / (h * w) as f64 * loop_ssim(&p, &g);
            }
        }
    }
    let s = 0.5 * s0 + 0.5 * sr;
    if s < 0.0 {
        0.0
    } else {
        s
    }
}

pub fn loop_e_measure(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let mut mg = 0.0;
    for g in gt {
        mg += g;
    }
    mg /= n;
    let mut total = 0.0;
    for k in 0..256 {
        let tau = (2 * k + 1) as f64 / 512.0;
        let fm: Vec<f64> = pred.iter().map(|&p| if p >= tau { 1.0 } else { 0.0 }).collect();
        let mut mf = 0.0;
        for f in &fm {
            mf += f;
        }
        mf /= n;
        let mut level = 0.0;
        for i in 0..fm.len() {
            let (a, b) = (gt[i] - mg, fm[i] - mf);
            let xi = if a * a + b * b == 0.0 { 1.0 } else { 2.0 * a * b / (a * a + b * b) };
            level += (1.0 + xi) * (1.0 + xi) / 4.0;
        }
        total += level / n;
    }
    total / 256.0
}

/// Every measure of one prediction/ground-truth pair by explicit loops.
pub fn loop_metrics(pred: &[f64], gt: &[f64], h: usize, w: usize) -> LoopReport {
    let (iou, dice) = loop_iou_dice(pred, gt);
    let mut mae = 0.0;
    for i in 0..pred.len() {
        mae += (pred[i] - gt[i]).abs();
    }
    mae /= pred.len() as f64;
    let (tp, _, fp, fnn) = loop_confusion(pred, gt);
    let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
    let recall = if tp + fnn == 0.0 { 1.0 } else { tp / (tp + fnn) };
    let den = 0.25 * precision + recall;
    let wfbeta = if den == 0.0 { 0.0 } else { 1.25 * precision * recall / den };
    LoopReport {
        dice,
        iou,
        mae,
        wfbeta,
        smeasure: loop_s_measure(pred, gt, h, w),
        emeasure: loop_e_measure(pred, gt),
    }
}

/// Unweighted per-pixel BCE mean, for sanity references.
pub fn loop_bce(pred: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s -= gt[i] * pred[i].ln() + (1.0 - gt[i]) * (1.0 - pred[i]).ln();
    }
    s / pred.len() as f64
}

/// `1 + 5·|avg_k(G) − G|` with a zero-padded `k×k` box average.
pub fn loop_pixel_weights(mask: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        s += mask[(yy * w as isize + xx) as usize];
                    }
                }
            }
            let i = (y * w as isize + x) as usize;
            out[i] = 1.0 + 5.0 * (s / (k * k) as f64 - mask[i]).abs();
        }
    }
    out
}

pub fn loop_weighted_bce(p: &[f64], g: &[f64], wt: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..p.len() {
        let q = p[i].clamp(1e-7, 1.0 - 1e-7);
        num += wt[i] * -(g[i] * q.ln() + (1.0 - g[i]) * (1.0 - q).ln());
        den += wt[i];
    }
    num / den
}

pub fn loop_weighted_iou(p: &[f64], g: &[f64], wt: &[f64]) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for i in 0..p.len() {
        inter += wt[i] * p[i] * g[i];
        union += wt[i] * (p[i] + g[i] - p[i] * g[i]);
    }
    if union == 0.0 {
        0.0
    } else {
        1.0 - inter / union
    }
}

pub const H: f64 = 1e-5;

/// Worst relative error over every input and parameter tensor of `case`,
/// with the numeric side taken from the test oracle.
pub fn worst_error(case: &Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = case.output(&case.inputs, &case.store).unwrap();
    let c = Tensor::uniform(out.dims(), -1.0, 1.0, &mut rng);
    let analytic = case.analytic(&c).unwrap();
    let project = |t: &Tensor<f64>| -> f64 { t.data().iter().zip(c.data()).map(|(a, b)| a * b).sum() };
    let param_ids: Vec<_> = case.store.trainable_ids().collect();
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        let numeric = if k < case.inputs.len() {
            fd_gradient(
                |x| {
                    let mut inputs = case.inputs.clone();
                    inputs[k].data_mut().copy_from_slice(x);
                    project(&case.output(&inputs, &case.store).unwrap())
                },
                case.inputs[k].data(),
                H,
            )
        } else {
            let id = param_ids[k - case.inputs.len()];
            fd_gradient(
                |x| {
                    let mut store: ParamStore<f64> = case.store.clone();
                    store.get_mut(id).data_mut().copy_from_slice(x);
                    project(&case.output(&case.inputs, &store).unwrap())
                },
                case.store.get(id).data(),
                H,
            )
        };
        worst = worst.max(rel_error(grad, &numeric));
    }
    worst
}

pub const SIDE: usize = 16;

/// Soft prediction and a blob-shaped binary ground truth. Every tenth pair
/// has an empty ground truth and every 25th a full one.
pub fn random_pair(rng: &mut ChaCha8Rng, i: usize) -> (Vec<f64>, Vec<f64>) {
    let n = SIDE * SIDE;
    let gt: Vec<f64> = if i % 10 == 0 {
        vec![0.0; n]
    } else if i % 25 == 1 {
        vec![1.0; n]
    } else {
        let (cx, cy) = (rng.random_range(2.0..14.0), rng.random_range(2.0..14.0));
        let (a, b) = (rng.random_range(1.5..6.0), rng.random_range(1.5..6.0));
        (0..n)
            .map(|p| {
                let (x, y) = ((p % SIDE) as f64, (p / SIDE) as f64);
                let inside = ((x - cx) / a).powi(2) + ((y - cy) / b).powi(2) <= 1.0;
                if inside ^ rng.random_bool(0.05) { 1.0 } else { 0.0 }
            })
            .collect()
    };
    let pred = gt
        .iter()
        .map(|&g| {
            let noisy: f64 = 0.6 * g + rng.random_range(0.0..0.4) + rng.random_range(-0.2..0.2);
            noisy.clamp(0.0, 1.0)
        })
        .collect();
    (pred, gt)
}
