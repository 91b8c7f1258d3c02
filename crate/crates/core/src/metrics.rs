//! Loss values (diagnostics only, no gradients) and class-agnostic AP.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{aabb_iou, Aabb};

/// Loss weighting and contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.5,
            tau: 0.02,
        }
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Precondition(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// `log(1 + e^x)` without overflow.
fn log1p_exp(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy of logits against targets in `[0, 1]`.
pub fn bce_loss(logits: &[f64], targets: &[f64]) -> Result<f64> {
    same_len(logits.len(), targets.len(), "bce_loss")?;
    if logits.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logits.iter().zip(targets).map(|(&x, &t)| log1p_exp(x) - x * t).sum();
    Ok((sum / logits.len() as f64).max(0.0))
}

pub const DICE_SMOOTHING: f64 = 1.0;

/// `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)`.
pub fn dice_loss(probs: &[f64], targets: &[f64]) -> Result<f64> {
    same_len(probs.len(), targets.len(), "dice_loss")?;
    if probs.iter().chain(targets).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Precondition("dice_loss takes values in [0, 1]".into()));
    }
    let inter: f64 = probs.iter().zip(targets).map(|(p, t)| p * t).sum();
    let total: f64 = probs.iter().sum::<f64>() + targets.iter().sum::<f64>();
    Ok((1.0 - (2.0 * inter + DICE_SMOOTHING) / (total + DICE_SMOOTHING)).clamp(0.0, 1.0))
}

pub fn iou_loss(pred: &Aabb, gt: &Aabb) -> f64 {
    1.0 - aabb_iou(pred, gt)
}

/// Foreground/background classification loss on confidence logits.
pub fn cls_loss(logits: &[f64], foreground: &[bool]) -> Result<f64> {
    let t: Vec<f64> = foreground.iter().map(|&f| f as u8 as f64).collect();
    bce_loss(logits, &t)
}

/// Binary cross-entropy of per-category logits (`rows x K`) against one-hot
/// labels.
pub fn sem_loss(logits: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    same_len(logits.nrows(), labels.len(), "sem_loss")?;
    let k = logits.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Precondition(format!("label {bad} outside {k} categories")));
    }
    let flat: Vec<f64> = logits.transpose().iter().copied().collect();
    let mut targets = vec![0.0; flat.len()];
    for (r, &l) in labels.iter().enumerate() {
        targets[r * k + l] = 1.0;
    }
    bce_loss(&flat, &targets)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// InfoNCE between matched rows of two frames: row `i` of `f_t` is the
/// positive of row `i` of `f_next`, every other row a negative.
pub fn contrastive_loss(f_t: &DMatrix<f64>, f_next: &DMatrix<f64>, tau: f64) -> Result<f64> {
    if f_t.shape() != f_next.shape() {
        return Err(Error::Precondition(format!(
            "contrastive_loss: shapes {:?} and {:?} differ",
            f_t.shape(),
            f_next.shape()
        )));
    }
    let z = f_t.nrows();
    if z < 2 {
        return Err(Error::Precondition("contrastive_loss needs at least two instances".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Precondition("temperature must be positive".into()));
    }
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    };
    let (a, b) = (rows(f_t), rows(f_next));
    let mut total = 0.0;
    for i in 0..z {
        let logits: Vec<f64> = b.iter().map(|bj| cosine(&a[i], bj) / tau).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total / z as f64)
}

/// Per-frame mask and record losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameLosses {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub iou: f64,
    pub sem: f64,
}

/// Averaged total over `T` frames. `forward[t]` is the contrastive term from
/// frame `t` to `t + 1` and `backward[t]` the one from `t + 1` back to `t`;
/// both have `T - 1` entries, and the missing terms at the sequence ends
/// count as zero.
pub fn total_loss(frames: &[FrameLosses], forward: &[f64], backward: &[f64], w: LossWeights) -> Result<f64> {
    let t = frames.len();
    if t == 0 {
        return Err(Error::Precondition("total_loss needs at least one frame".into()));
    }
    same_len(forward.len(), t - 1, "total_loss forward terms")?;
    same_len(backward.len(), t - 1, "total_loss backward terms")?;
    let mut sum = 0.0;
    for (i, f) in frames.iter().enumerate() {
        let fwd = forward.get(i).copied().unwrap_or(0.0);
        let bwd = if i > 0 { backward[i - 1] } else { 0.0 };
        sum += w.alpha * f.cls + f.bce + f.dice + w.beta * f.iou + f.sem + fwd + bwd;
    }
    Ok(sum / t as f64)
}

/// A predicted instance for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub point_ids: Vec<usize>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub iou_threshold: f64,
    pub ap: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP25")]
    pub ap25: f64,
    pub curves: Vec<PrCurve>,
}

/// IoU thresholds averaged into AP: 0.50, 0.55, ..., 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn sorted_set(ids: &[usize]) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// IoU of two sorted, duplicate-free id lists.
pub fn set_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Area under the precision/recall points using the monotone upper envelope.
fn interpolated_area(precision: &[f64], recall: &[f64]) -> f64 {
    let mut env = precision.to_vec();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    let mut area = 0.0;
    let mut prev_r = 0.0;
    for (p, &r) in env.iter().zip(recall) {
        area += (r - prev_r) * p;
        prev_r = r;
    }
    area
}

struct Ranked {
    order: Vec<usize>,
    iou: Vec<Vec<f64>>,
}

/// Predictions are ranked by confidence, then by their best IoU against any
/// ground truth, then by content, so equal-confidence predictions rank the
/// same whatever order they arrive in; remaining ties (identical predictions)
/// fall back to input position.
fn rank(pred: &[Vec<usize>], conf: &[f64], gt: &[Vec<usize>]) -> Ranked {
    let iou: Vec<Vec<f64>> = pred.iter().map(|p| gt.iter().map(|g| set_iou(p, g)).collect()).collect();
    let best: Vec<f64> = iou.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| {
        conf[b]
            .total_cmp(&conf[a])
            .then(best[b].total_cmp(&best[a]))
            .then_with(|| pred[a].cmp(&pred[b]))
            .then(a.cmp(&b))
    });
    Ranked { order, iou }
}

fn curve_at(r: &Ranked, num_gt: usize, threshold: f64) -> PrCurve {
    let mut taken = vec![false; num_gt];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(r.order.len());
    let mut recall = Vec::with_capacity(r.order.len());
    for (k, &p) in r.order.iter().enumerate() {
        let mut hit: Option<usize> = None;
        for (g, &v) in r.iou[p].iter().enumerate() {
            if !taken[g] && v >= threshold && hit.is_none_or(|h| v > r.iou[p][h]) {
                hit = Some(g);
            }
        }
        if let Some(g) = hit {
            taken[g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    let ap = interpolated_area(&precision, &recall);
    PrCurve {
        iou_threshold: threshold,
        ap,
        precision,
        recall,
    }
}

/// Class-agnostic average precision over point-id instance sets.
///
/// Each prediction, best first, claims the unclaimed ground truth with the
/// highest mask IoU at or above the threshold (ties to the lower ground-truth
/// index). With no ground truth the score is 1 if there are also no
/// predictions and 0 otherwise.
pub fn evaluate_ap(pred: &[Prediction], gt: &[Vec<usize>]) -> EvalResult {
    let mut thresholds = ap_thresholds();
    thresholds.extend([0.25]);
    if gt.is_empty() {
        let v = if pred.is_empty() { 1.0 } else { 0.0 };
        let curves = thresholds
            .iter()
            .map(|&t| PrCurve {
                iou_threshold: t,
                ap: v,
                precision: Vec::new(),
                recall: Vec::new(),
            })
            .collect();
        return EvalResult {
            ap: v,
            ap50: v,
            ap25: v,
            curves,
        };
    }
    let sets: Vec<Vec<usize>> = pred.iter().map(|p| sorted_set(&p.point_ids)).collect();
    let conf: Vec<f64> = pred.iter().map(|p| p.confidence).collect();
    let gts: Vec<Vec<usize>> = gt.iter().map(|g| sorted_set(g)).collect();
    let ranked = rank(&sets, &conf, &gts);
    let curves: Vec<PrCurve> = thresholds.iter().map(|&t| curve_at(&ranked, gts.len(), t)).collect();
    let ap = curves[..10].iter().map(|c| c.ap).sum::<f64>() / 10.0;
    EvalResult {
        ap,
        ap50: curves[0].ap,
        ap25: curves[10].ap,
        curves,
    }
}
