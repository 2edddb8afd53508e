//! Segmentation quality measures: Dice, IoU, MAE, soft Fβ, S-measure and
//! E-measure, plus per-dataset aggregation into a [`MetricReport`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::pairwise_sum_f64 as psum;

/// Binarization threshold for overlap measures.
pub const THRESHOLD: f64 = 0.5;
/// `β²` of the F-measure.
pub const BETA2: f64 = 0.25;
/// Number of thresholds swept by the E-measure.
pub const E_LEVELS: usize = 256;

const S_ALPHA: f64 = 0.5;
const S_MU: f64 = 0.5;
const S_LAMBDA: f64 = 1.0;

/// A soft prediction in `[0, 1]` and a binary ground truth of equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub pred: Vec<f64>,
    pub gt: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl MaskPair {
    pub fn new(pred: Vec<f64>, gt: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        if pred.len() != height * width || gt.len() != height * width || pred.is_empty() {
            return Err(shape_err!(
                "mask pair of {}×{} needs {} pixels, got pred {} / gt {}",
                height,
                width,
                height * width,
                pred.len(),
                gt.len()
            ));
        }
        if gt.iter().any(|&g| g != 0.0 && g != 1.0) {
            return Err(Error::Data("ground truth must be binary".into()));
        }
        Ok(Self { pred, gt, height, width })
    }

    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }
}

pub fn binarize(pred: &[f64]) -> Vec<f64> {
    pred.iter().map(|&p| if p >= THRESHOLD { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Confusion {
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    pub fn_: f64,
}

/// Pixel counts of `D` against `G`. Real-valued `D` gives the soft variant.
pub fn confusion(d: &[f64], g: &[f64]) -> Confusion {
    let mut tp = Vec::with_capacity(d.len());
    let mut tn = Vec::with_capacity(d.len());
    let mut fp = Vec::with_capacity(d.len());
    let mut fn_ = Vec::with_capacity(d.len());
    for (&di, &gi) in d.iter().zip(g) {
        tp.push(di * gi);
        tn.push((1.0 - di) * (1.0 - gi));
        fp.push(di * (1.0 - gi));
        fn_.push((1.0 - di) * gi);
    }
    Confusion { tp: psum(&tp), tn: psum(&tn), fp: psum(&fp), fn_: psum(&fn_) }
}

fn ratio_or_one(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Precision and recall; `0/0` counts as 1.
pub fn precision_recall(c: &Confusion) -> (f64, f64) {
    (ratio_or_one(c.tp, c.tp + c.fp), ratio_or_one(c.tp, c.tp + c.fn_))
}

/// `(1+β²)·P·R / (β²·P + R)`, 0 when the denominator vanishes.
pub fn fbeta(precision: f64, recall: f64, beta2: f64) -> f64 {
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

/// IoU of the binarized prediction; empty ∪ empty is 1.
pub fn iou(pred: &[f64], gt: &[f64]) -> f64 {
    let c = confusion(&binarize(pred), gt);
    ratio_or_one(c.tp, c.tp + c.fp + c.fn_)
}

/// Dice of the binarized prediction; empty/empty is 1.
pub fn dice(pred: &[f64], gt: &[f64]) -> f64 {
    let c = confusion(&binarize(pred), gt);
    ratio_or_one(2.0 * c.tp, 2.0 * c.tp + c.fp + c.fn_)
}

pub fn mae(pred: &[f64], gt: &[f64]) -> f64 {
    let d: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).collect();
    psum(&d) / d.len() as f64
}

/// Soft Fβ with uniform pixel weights and `β² = 1/4`.
pub fn weighted_fbeta(pred: &[f64], gt: &[f64]) -> f64 {
    let (p, r) = precision_recall(&confusion(pred, gt));
    fbeta(p, r, BETA2)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = psum(xs) / n;
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (psum(&dev) / n).sqrt())
}

fn object_score(xs: &[f64]) -> f64 {
    let (mean, std) = mean_std(xs);
    2.0 * mean / (mean * mean + 1.0 + 2.0 * S_LAMBDA * std)
}

/// Foreground and background object scores `(S_FG, S_BG)`; `None` for an
/// absent region.
pub fn object_scores(pred: &[f64], gt: &[f64]) -> (Option<f64>, Option<f64>) {
    let fg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(gt).filter(|(_, &g)| g == 0.0).map(|(&p, _)| 1.0 - p).collect();
    (
        (!fg.is_empty()).then(|| object_score(&fg)),
        (!bg.is_empty()).then(|| object_score(&bg)),
    )
}

/// SSIM-style similarity of one rectangular region.
fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let (mx, my) = (psum(pred) / n, psum(gt) / n);
    let mut vx = Vec::with_capacity(pred.len());
    let mut vy = Vec::with_capacity(pred.len());
    let mut cxy = Vec::with_capacity(pred.len());
    for (&x, &y) in pred.iter().zip(gt) {
        vx.push((x - mx) * (x - mx));
        vy.push((y - my) * (y - my));
        cxy.push((x - mx) * (y - my));
    }
    let norm = n - 1.0 + f64::EPSILON;
    let (sx, sy, sxy) = (psum(&vx) / norm, psum(&vy) / norm, psum(&cxy) / norm);
    let a = 4.0 * mx * my * sxy;
    let b = (mx * mx + my * my) * (sx + sy);
    if a != 0.0 {
        a / (b + f64::EPSILON)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Region term: split at the foreground centroid into four quadrants and
/// average their SSIM scores weighted by area.
pub fn region_score(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let (mut sx, mut sy, mut cnt) = (Vec::new(), Vec::new(), 0usize);
    for (i, &g) in gt.iter().enumerate() {
        if g == 1.0 {
            sx.push((i % w) as f64);
            sy.push((i / w) as f64);
            cnt += 1;
        }
    }
    let (cx, cy) = if cnt == 0 {
        ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize)
    } else {
        (
            (psum(&sx) / cnt as f64).round() as usize + 1,
            (psum(&sy) / cnt as f64).round() as usize + 1,
        )
    };
    let (cx, cy) = (cx.min(w), cy.min(h));
    let total = (h * w) as f64;
    let mut score = 0.0;
    for (y0, y1) in [(0, cy), (cy, h)] {
        for (x0, x1) in [(0, cx), (cx, w)] {
            let area = (y1 - y0) * (x1 - x0);
            if area == 0 {
                continue;
            }
            let mut p = Vec::with_capacity(area);
            let mut g = Vec::with_capacity(area);
            for y in y0..y1 {
                p.extend_from_slice(&pred[y * w + x0..y * w + x1]);
                g.extend_from_slice(&gt[y * w + x0..y * w + x1]);
            }
            score += area as f64 / total * region_ssim(&p, &g);
        }
    }
    score
}

/// Structure measure `α·S₀ + (1−α)·S_r`, clamped at 0. A ground truth
/// with only one class reduces to that class's object score.
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    match object_scores(pred, gt) {
        (None, Some(bg)) => bg,
        (Some(fg), None) => fg,
        (Some(fg), Some(bg)) => {
            let s0 = S_MU * fg + (1.0 - S_MU) * bg;
            (S_ALPHA * s0 + (1.0 - S_ALPHA) * region_score(pred, gt, h, w)).max(0.0)
        }
        (None, None) => unreachable!("non-empty mask has some class"),
    }
}

/// Enhanced alignment of one binary foreground map against the ground
/// truth, mapped to `[0, 1]` by `(1+ξ)²/4`.
pub fn enhanced_alignment(fm: &[f64], gt: &[f64]) -> f64 {
    let n = fm.len() as f64;
    let (mf, mg) = (psum(fm) / n, psum(gt) / n);
    let scores: Vec<f64> = fm
        .iter()
        .zip(gt)
        .map(|(&f, &g)| {
            let (pf, pg) = (f - mf, g - mg);
            let den = pg * pg + pf * pf;
            let xi = if den == 0.0 { 1.0 } else { 2.0 * pg * pf / den };
            (1.0 + xi) * (1.0 + xi) / 4.0
        })
        .collect();
    psum(&scores) / n
}

/// Mean enhanced alignment over [`E_LEVELS`] thresholds placed at the
/// midpoints `(k + ½)/E_LEVELS`.
pub fn e_measure(pred: &[f64], gt: &[f64]) -> f64 {
    let mut fm = vec![0.0; pred.len()];
    let per_level: Vec<f64> = (0..E_LEVELS)
        .map(|k| {
            let tau = (k as f64 + 0.5) / E_LEVELS as f64;
            for (f, &p) in fm.iter_mut().zip(pred) {
                *f = if p >= tau { 1.0 } else { 0.0 };
            }
            enhanced_alignment(&fm, gt)
        })
        .collect();
    psum(&per_level) / E_LEVELS as f64
}

/// All per-sample scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub dice: f64,
    pub iou: f64,
    pub mae: f64,
    pub wfbeta: f64,
    pub smeasure: f64,
    pub emeasure: f64,
}

impl SampleScores {
    /// A prediction counts as valid when its IoU exceeds ½.
    pub fn valid(&self) -> bool {
        self.iou > 0.5
    }
}

pub fn score(pair: &MaskPair) -> SampleScores {
    let (p, g) = (&pair.pred[..], &pair.gt[..]);
    SampleScores {
        dice: dice(p, g),
        iou: iou(p, g),
        mae: mae(p, g),
        wfbeta: weighted_fbeta(p, g),
        smeasure: s_measure(p, g, pair.height, pair.width),
        emeasure: e_measure(p, g),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub mdice: f64,
    pub miou: f64,
    pub mae: f64,
    pub wfbeta: f64,
    pub smeasure: f64,
    pub emeasure: f64,
}

pub const CSV_HEADER: &str = "dataset,model,n,mDice,mIoU,MAE,wFbeta,Smeasure,Emeasure";

impl MetricReport {
    /// Means of per-sample scores, summed pairwise in sample order.
    pub fn from_scores(scores: &[SampleScores]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("no samples to evaluate".into()));
        }
        let n = scores.len() as f64;
        let mean = |f: fn(&SampleScores) -> f64| psum(&scores.iter().map(f).collect::<Vec<_>>()) / n;
        Ok(Self {
            n_samples: scores.len(),
            mdice: mean(|s| s.dice),
            miou: mean(|s| s.iou),
            mae: mean(|s| s.mae),
            wfbeta: mean(|s| s.wfbeta),
            smeasure: mean(|s| s.smeasure),
            emeasure: mean(|s| s.emeasure),
        })
    }

    pub fn csv_row(&self, dataset: &str, model: &str) -> String {
        let mut row = format!("{dataset},{model},{}", self.n_samples);
        for v in [self.mdice, self.miou, self.mae, self.wfbeta, self.smeasure, self.emeasure] {
            let _ = write!(row, ",{v:.6}");
        }
        row
    }
}

/// Scores every pair and aggregates them.
pub fn evaluate_pairs(pairs: &[MaskPair]) -> Result<MetricReport> {
    let scores: Vec<SampleScores> = pairs.iter().map(score).collect();
    MetricReport::from_scores(&scores)
}

pub fn miou(pairs: &[MaskPair]) -> Result<f64> {
    evaluate_pairs(pairs).map(|r| r.miou)
}

pub fn mdice(pairs: &[MaskPair]) -> Result<f64> {
    evaluate_pairs(pairs).map(|r| r.mdice)
}
