//! Proposal and RoI objectives: IoU-based assignment, balanced sampling,
//! binary cross-entropy and smooth-L1, with analytic gradients.

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, BoxCoder};
use crate::detector::{outside_image, RpnOutput};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_beta: f64,
    pub roi_positive_iou: f64,
    pub roi_negative_iou: f64,
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    pub roi_beta: f64,
    /// A would-be negative overlapping an ignored box at least this much is
    /// left out of the loss.
    pub ignore_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            rpn_batch: 64,
            rpn_positive_fraction: 0.5,
            rpn_beta: 1.0 / 9.0,
            roi_positive_iou: 0.5,
            roi_negative_iou: 0.5,
            roi_batch: 32,
            roi_positive_fraction: 0.25,
            roi_beta: 1.0,
            ignore_iou: 0.3,
        }
    }
}

/// Four loss terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(rpn_cls: f64, rpn_reg: f64, roi_cls: f64, roi_reg: f64) -> Self {
        Self {
            rpn_cls,
            rpn_reg,
            roi_cls,
            roi_reg,
            total: rpn_cls + rpn_reg + roi_cls + roi_reg,
        }
    }

    pub fn components(&self) -> [f64; 4] {
        [self.rpn_cls, self.rpn_reg, self.roi_cls, self.roi_reg]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> Self {
        if reports.is_empty() {
            return Self::default();
        }
        let n = reports.len() as f64;
        let mut c = [0.0; 4];
        for r in reports {
            for (a, b) in c.iter_mut().zip(r.components()) {
                *a += b;
            }
        }
        Self::new(c[0] / n, c[1] / n, c[2] / n, c[3] / n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Matched to the ground-truth box at this index.
    Positive(usize),
    Negative,
    Ignored,
}

/// IoU-based labelling of reference boxes (anchors or RoIs).
///
/// With `low_quality` set, each ground-truth box also claims the references
/// that overlap it best, so every object gets at least one positive.
pub fn assign(
    references: &[BBox],
    gt: &[BBox],
    ignore: &[BBox],
    positive_iou: f64,
    negative_iou: f64,
    ignore_iou: f64,
    low_quality: bool,
) -> Vec<Assignment> {
    let mut out = Vec::with_capacity(references.len());
    let mut best_per_gt = vec![0.0f64; gt.len()];
    let mut ious = vec![0.0; gt.len()];
    let mut all: Vec<Vec<f64>> = if low_quality { Vec::with_capacity(references.len()) } else { Vec::new() };
    for r in references {
        let (mut best, mut best_j) = (0.0, usize::MAX);
        for (j, g) in gt.iter().enumerate() {
            ious[j] = r.iou(g);
            if ious[j] > best {
                best = ious[j];
                best_j = j;
            }
            best_per_gt[j] = best_per_gt[j].max(ious[j]);
        }
        let a = if best_j != usize::MAX && best >= positive_iou {
            Assignment::Positive(best_j)
        } else if best >= negative_iou || ignore.iter().any(|b| r.iou(b) >= ignore_iou) {
            Assignment::Ignored
        } else {
            Assignment::Negative
        };
        out.push(a);
        if low_quality {
            all.push(ious.clone());
        }
    }
    if low_quality {
        for (i, row) in all.iter().enumerate() {
            if matches!(out[i], Assignment::Positive(_)) {
                continue;
            }
            // the highest-IoU object this reference is a best match for
            let mut pick: Option<(usize, f64)> = None;
            for (j, &v) in row.iter().enumerate() {
                if v > 0.0 && v == best_per_gt[j] && pick.is_none_or(|(_, pv)| v > pv) {
                    pick = Some((j, v));
                }
            }
            if let Some((j, _)) = pick {
                out[i] = Assignment::Positive(j);
            }
        }
    }
    out
}

/// Picks at most `batch` labelled references with at most
/// `positive_fraction·batch` positives. Without an rng the earliest indices
/// are taken. Returned indices are sorted.
pub fn subsample(
    assignment: &[Assignment],
    batch: usize,
    positive_fraction: f64,
    rng: Option<&mut dyn RngCore>,
) -> Vec<usize> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, a) in assignment.iter().enumerate() {
        match a {
            Assignment::Positive(_) => pos.push(i),
            Assignment::Negative => neg.push(i),
            Assignment::Ignored => {}
        }
    }
    if let Some(rng) = rng {
        pos.shuffle(rng);
        neg.shuffle(rng);
    }
    let n_pos = pos.len().min((batch as f64 * positive_fraction).floor() as usize);
    let n_neg = neg.len().min(batch - n_pos);
    let mut picked: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    picked.sort_unstable();
    picked
}

/// Numerically stable binary cross-entropy with logits and its derivative.
pub fn bce_with_logits(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    let grad = crate::nn::sigmoid(logit) - target;
    (loss, grad)
}

pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

/// Targets for one image (or one class branch of an image).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    /// Logit column of each box's class.
    pub columns: Vec<usize>,
    /// Regions excluded from the loss (masked annotations).
    pub ignore: Vec<BBox>,
    /// Logit columns that take part in the classification loss.
    pub active_columns: Vec<usize>,
    /// Annotated objects of classes outside `active_columns`. They join the
    /// RoI candidates and are always sampled when they label negative.
    pub background: Vec<BBox>,
}

impl GroundTruth {
    /// Single-column target set: the given boxes are positives.
    pub fn binary(boxes: Vec<BBox>, ignore: Vec<BBox>) -> Self {
        let columns = vec![0; boxes.len()];
        Self {
            boxes,
            columns,
            ignore,
            active_columns: vec![0],
            background: Vec::new(),
        }
    }

    pub fn with_background(mut self, background: Vec<BBox>) -> Self {
        self.background = background;
        self
    }
}

/// Raw network outputs needed by the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub image_size: (u32, u32),
    pub anchors: Vec<BBox>,
    pub rpn: RpnOutput,
    /// Sampled RoIs the head was run on.
    pub rois: Vec<BBox>,
    /// `rois.len() × n_logits`, row-major.
    pub roi_logits: Vec<f64>,
    pub roi_deltas: Vec<[f64; 4]>,
    pub n_logits: usize,
}

/// d loss / d output for every network output in [`ModelOutputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub rpn_logits: Vec<f64>,
    pub rpn_deltas: Vec<[f64; 4]>,
    pub roi_logits: Vec<f64>,
    pub roi_deltas: Vec<[f64; 4]>,
}

impl LossGradients {
    fn zeros(outputs: &ModelOutputs) -> Self {
        Self {
            rpn_logits: vec![0.0; outputs.rpn.logits.len()],
            rpn_deltas: vec![[0.0; 4]; outputs.rpn.deltas.len()],
            roi_logits: vec![0.0; outputs.roi_logits.len()],
            roi_deltas: vec![[0.0; 4]; outputs.roi_deltas.len()],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.rpn_logits.iter_mut().for_each(|g| *g *= factor);
        self.roi_logits.iter_mut().for_each(|g| *g *= factor);
        for d in self.rpn_deltas.iter_mut().chain(self.roi_deltas.iter_mut()) {
            d.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

fn rpn_coder() -> BoxCoder {
    BoxCoder::default()
}

pub fn roi_coder() -> BoxCoder {
    BoxCoder::new([10.0, 10.0, 5.0, 5.0])
}

/// RoI assignment with the RoI thresholds.
pub fn assign_rois(rois: &[BBox], gt: &GroundTruth, cfg: &LossConfig) -> Vec<Assignment> {
    assign(
        rois,
        &gt.boxes,
        &gt.ignore,
        cfg.roi_positive_iou,
        cfg.roi_negative_iou,
        cfg.ignore_iou,
        false,
    )
}

/// Training RoIs: proposals plus the ground-truth boxes, labelled and
/// subsampled. Background objects that label negative are always kept and
/// take their slots out of the batch.
pub fn sample_rois(
    proposals: &[BBox],
    gt: &GroundTruth,
    cfg: &LossConfig,
    rng: Option<&mut dyn RngCore>,
) -> Vec<BBox> {
    let candidates: Vec<BBox> = proposals.iter().chain(&gt.boxes).copied().collect();
    let labels = assign_rois(&candidates, gt, cfg);
    let hard: Vec<BBox> = gt
        .background
        .iter()
        .zip(assign_rois(&gt.background, gt, cfg))
        .filter(|(_, l)| *l == Assignment::Negative)
        .map(|(b, _)| *b)
        .take(cfg.roi_batch / 2)
        .collect();
    subsample(&labels, cfg.roi_batch - hard.len(), cfg.roi_positive_fraction, rng)
        .into_iter()
        .map(|i| candidates[i])
        .chain(hard)
        .collect()
}

/// All four objectives with gradients. Anchors are subsampled with `rng`
/// (or deterministically without one); RoIs are used as given.
pub fn compute_loss(
    outputs: &ModelOutputs,
    gt: &GroundTruth,
    cfg: &LossConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<(LossReport, LossGradients)> {
    let n_anchors = outputs.anchors.len();
    if outputs.rpn.logits.len() != n_anchors || outputs.rpn.deltas.len() != n_anchors {
        return Err(Error::Shape("RPN outputs do not match anchors".into()));
    }
    let n_rois = outputs.rois.len();
    if outputs.roi_logits.len() != n_rois * outputs.n_logits || outputs.roi_deltas.len() != n_rois {
        return Err(Error::Shape("RoI outputs do not match RoIs".into()));
    }
    if gt.columns.len() != gt.boxes.len() {
        return Err(Error::Shape("one column per ground-truth box required".into()));
    }
    if let Some(&c) = gt.columns.iter().chain(&gt.active_columns).find(|&&c| c >= outputs.n_logits) {
        return Err(Error::Shape(format!("logit column {c} out of {}", outputs.n_logits)));
    }
    let mut grads = LossGradients::zeros(outputs);

    let mut labels = assign(
        &outputs.anchors,
        &gt.boxes,
        &gt.ignore,
        cfg.rpn_positive_iou,
        cfg.rpn_negative_iou,
        cfg.ignore_iou,
        true,
    );
    for (l, a) in labels.iter_mut().zip(&outputs.anchors) {
        if outside_image(a, outputs.image_size) {
            *l = Assignment::Ignored;
        }
    }
    let sampled = subsample(&labels, cfg.rpn_batch, cfg.rpn_positive_fraction, rng);
    if sampled.is_empty() {
        log::warn!("no valid anchors for this image; loss is zero");
        return Ok((LossReport::default(), grads));
    }

    let coder = rpn_coder();
    let norm = 1.0 / sampled.len() as f64;
    let (mut rpn_cls, mut rpn_reg) = (0.0, 0.0);
    for &i in &sampled {
        let target = matches!(labels[i], Assignment::Positive(_)) as u8 as f64;
        let (l, g) = bce_with_logits(outputs.rpn.logits[i], target);
        rpn_cls += l * norm;
        grads.rpn_logits[i] = g * norm;
        if let Assignment::Positive(j) = labels[i] {
            let t = coder.encode(&gt.boxes[j], &outputs.anchors[i]);
            for k in 0..4 {
                let (l, g) = smooth_l1(outputs.rpn.deltas[i][k] - t[k], cfg.rpn_beta);
                rpn_reg += l * norm;
                grads.rpn_deltas[i][k] = g * norm;
            }
        }
    }

    let roi_labels = assign_rois(&outputs.rois, gt, cfg);
    let used: Vec<usize> = (0..n_rois)
        .filter(|&i| roi_labels[i] != Assignment::Ignored)
        .collect();
    let (mut roi_cls, mut roi_reg) = (0.0, 0.0);
    if !used.is_empty() && !gt.active_columns.is_empty() {
        let coder = roi_coder();
        let l_n = outputs.n_logits;
        let cls_norm = 1.0 / (used.len() * gt.active_columns.len()) as f64;
        let reg_norm = 1.0 / used.len() as f64;
        for &i in &used {
            let matched = match roi_labels[i] {
                Assignment::Positive(j) => Some(j),
                _ => None,
            };
            for &col in &gt.active_columns {
                let target = matched.is_some_and(|j| gt.columns[j] == col) as u8 as f64;
                let (l, g) = bce_with_logits(outputs.roi_logits[i * l_n + col], target);
                roi_cls += l * cls_norm;
                grads.roi_logits[i * l_n + col] = g * cls_norm;
            }
            if let Some(j) = matched {
                let t = coder.encode(&gt.boxes[j], &outputs.rois[i]);
                for k in 0..4 {
                    let (l, g) = smooth_l1(outputs.roi_deltas[i][k] - t[k], cfg.roi_beta);
                    roi_reg += l * reg_norm;
                    grads.roi_deltas[i][k] = g * reg_norm;
                }
            }
        }
    }
    Ok((LossReport::new(rpn_cls, rpn_reg, roi_cls, roi_reg), grads))
}
