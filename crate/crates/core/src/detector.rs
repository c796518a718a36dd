//! Two-stage detection backend: a region proposal network and an RoI head,
//! plus cross-class fusion of per-class results.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::boxes::{nms, BBox, BoxCoder};
use crate::nn::{join, relu_backward_in_place, relu_in_place, sigmoid, Conv2d, Linear, Module, Param};
use crate::tensor::Tensor3;
use crate::{ClassId, Error, Result};

/// Single-level anchor grid: every size × every aspect ratio (h/w) at each
/// feature cell centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub sizes: Vec<f64>,
    pub ratios: Vec<f64>,
    pub stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            sizes: vec![24.0, 40.0, 64.0],
            ratios: vec![0.5, 1.0, 2.0],
            stride: 16,
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }
}

/// Anchors in `(y, x, anchor)` order.
pub fn generate_anchors(feat_h: usize, feat_w: usize, cfg: &AnchorConfig) -> Vec<BBox> {
    let s = cfg.stride as f64;
    let mut out = Vec::with_capacity(feat_h * feat_w * cfg.per_cell());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            for &size in &cfg.sizes {
                for &r in &cfg.ratios {
                    let w = size / r.sqrt();
                    let h = size * r.sqrt();
                    out.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub nms_iou: f64,
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            pre_nms_top_n: 300,
            post_nms_top_n: 100,
            nms_iou: 0.7,
            min_size: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// A scored, class-labelled box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: ClassId,
}

/// Per-anchor objectness logits and box deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    pub logits: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

#[derive(Debug, Clone)]
pub struct RpnTrace {
    input: Tensor3,
    hidden: Tensor3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rpn {
    conv: Conv2d,
    cls: Conv2d,
    reg: Conv2d,
    anchors_per_cell: usize,
}

impl Rpn {
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, anchors_per_cell: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(channels, hidden, 3, 1, 1, rng),
            cls: Conv2d::with_std(hidden, anchors_per_cell, 1, 1, 0, 0.01, rng),
            reg: Conv2d::with_std(hidden, 4 * anchors_per_cell, 1, 1, 0, 0.01, rng),
            anchors_per_cell,
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors_per_cell
    }

    fn gather(&self, cls: &Tensor3, reg: &Tensor3) -> RpnOutput {
        let (h, w) = (cls.height(), cls.width());
        let a_n = self.anchors_per_cell;
        let mut logits = Vec::with_capacity(h * w * a_n);
        let mut deltas = Vec::with_capacity(h * w * a_n);
        for y in 0..h {
            for x in 0..w {
                for a in 0..a_n {
                    logits.push(cls.at(a, y, x));
                    deltas.push([
                        reg.at(4 * a, y, x),
                        reg.at(4 * a + 1, y, x),
                        reg.at(4 * a + 2, y, x),
                        reg.at(4 * a + 3, y, x),
                    ]);
                }
            }
        }
        RpnOutput { logits, deltas }
    }

    pub fn forward_traced(&self, features: &Tensor3) -> Result<(RpnOutput, RpnTrace)> {
        let mut hidden = self.conv.forward(features)?;
        relu_in_place(hidden.data_mut());
        let cls = self.cls.forward(&hidden)?;
        let reg = self.reg.forward(&hidden)?;
        Ok((
            self.gather(&cls, &reg),
            RpnTrace {
                input: features.clone(),
                hidden,
            },
        ))
    }

    pub fn forward(&self, features: &Tensor3) -> Result<RpnOutput> {
        Ok(self.forward_traced(features)?.0)
    }

    /// Accumulates gradients and returns the feature gradient.
    pub fn backward(&mut self, trace: &RpnTrace, grad_logits: &[f64], grad_deltas: &[[f64; 4]]) -> Tensor3 {
        let (h, w) = (trace.hidden.height(), trace.hidden.width());
        let a_n = self.anchors_per_cell;
        let mut g_cls = Tensor3::zeros(a_n, h, w);
        let mut g_reg = Tensor3::zeros(4 * a_n, h, w);
        let mut i = 0;
        for y in 0..h {
            for x in 0..w {
                for a in 0..a_n {
                    *g_cls.at_mut(a, y, x) = grad_logits[i];
                    for j in 0..4 {
                        *g_reg.at_mut(4 * a + j, y, x) = grad_deltas[i][j];
                    }
                    i += 1;
                }
            }
        }
        let mut g_hidden = self.cls.backward(&trace.hidden, &g_cls);
        g_hidden.add_assign(&self.reg.backward(&trace.hidden, &g_reg));
        relu_backward_in_place(trace.hidden.data(), g_hidden.data_mut());
        self.conv.backward(&trace.input, &g_hidden)
    }

    /// Scores anchors, decodes, clips, runs NMS and keeps the top proposals.
    pub fn propose(
        &self,
        features: &FeatureMap,
        image_size: (u32, u32),
        anchors: &AnchorConfig,
        cfg: &ProposalConfig,
    ) -> Result<Vec<Proposal>> {
        if anchors.per_cell() != self.anchors_per_cell {
            return Err(Error::Shape(format!(
                "anchor config yields {} anchors per cell, RPN predicts {}",
                anchors.per_cell(),
                self.anchors_per_cell
            )));
        }
        let out = self.forward(&features.values)?;
        let grid = generate_anchors(features.values.height(), features.values.width(), anchors);
        Ok(select_proposals(&grid, &out, image_size, &BoxCoder::default(), cfg))
    }
}

impl Module for Rpn {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv.params(&join(prefix, "conv"), out);
        self.cls.params(&join(prefix, "cls"), out);
        self.reg.params(&join(prefix, "reg"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        self.cls.params_mut(&join(prefix, "cls"), out);
        self.reg.params_mut(&join(prefix, "reg"), out);
    }
}

/// True when the anchor shares no area with the image.
pub fn outside_image(anchor: &BBox, image_size: (u32, u32)) -> bool {
    let (w, h) = (f64::from(image_size.0), f64::from(image_size.1));
    anchor.x2 <= 0.0 || anchor.y2 <= 0.0 || anchor.x1 >= w || anchor.y1 >= h
}

/// Proposal selection from raw RPN outputs.
pub fn select_proposals(
    anchors: &[BBox],
    output: &RpnOutput,
    image_size: (u32, u32),
    coder: &BoxCoder,
    cfg: &ProposalConfig,
) -> Vec<Proposal> {
    let (w, h) = (f64::from(image_size.0), f64::from(image_size.1));
    let mut order: Vec<usize> = (0..anchors.len())
        .filter(|&i| !outside_image(&anchors[i], image_size))
        .collect();
    order.sort_by(|&a, &b| output.logits[b].total_cmp(&output.logits[a]).then(a.cmp(&b)));
    order.truncate(cfg.pre_nms_top_n);
    let mut boxes = Vec::with_capacity(order.len());
    let mut scores = Vec::with_capacity(order.len());
    for &i in &order {
        let b = coder.decode(&output.deltas[i], &anchors[i]).clip(w, h);
        if b.width() >= cfg.min_size && b.height() >= cfg.min_size && b.is_valid() {
            boxes.push(b);
            scores.push(sigmoid(output.logits[i]));
        }
    }
    let keep = nms(&boxes, &scores, cfg.nms_iou);
    keep.into_iter()
        .take(cfg.post_nms_top_n)
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: scores[i],
        })
        .collect()
}

/// Bilinear sampling taps `(flat index, weight)` for each output bin of one
/// RoI, averaged over `sampling × sampling` points per bin.
fn roi_taps(roi: &BBox, stride: f64, fh: usize, fw: usize, pool: usize, sampling: usize) -> Vec<Vec<(usize, f64)>> {
    // half-pixel offset: cell i covers [i, i+1) with its centre at i + 0.5
    let x0 = roi.x1 / stride - 0.5;
    let y0 = roi.y1 / stride - 0.5;
    let bw = (roi.width() / stride) / pool as f64;
    let bh = (roi.height() / stride) / pool as f64;
    let norm = 1.0 / (sampling * sampling) as f64;
    let mut bins = Vec::with_capacity(pool * pool);
    for py in 0..pool {
        for px in 0..pool {
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4 * sampling * sampling);
            for sy in 0..sampling {
                let y = y0 + bh * (py as f64 + (sy as f64 + 0.5) / sampling as f64);
                for sx in 0..sampling {
                    let x = x0 + bw * (px as f64 + (sx as f64 + 0.5) / sampling as f64);
                    if y < -1.0 || y > fh as f64 || x < -1.0 || x > fw as f64 {
                        continue;
                    }
                    let y = y.clamp(0.0, (fh - 1) as f64);
                    let x = x.clamp(0.0, (fw - 1) as f64);
                    let (yl, xl) = (y.floor() as usize, x.floor() as usize);
                    let (yh, xh) = ((yl + 1).min(fh - 1), (xl + 1).min(fw - 1));
                    let (ly, lx) = (y - yl as f64, x - xl as f64);
                    let (hy, hx) = (1.0 - ly, 1.0 - lx);
                    taps.push((yl * fw + xl, hy * hx * norm));
                    taps.push((yl * fw + xh, hy * lx * norm));
                    taps.push((yh * fw + xl, ly * hx * norm));
                    taps.push((yh * fw + xh, ly * lx * norm));
                }
            }
            bins.push(taps);
        }
    }
    bins
}

/// RoIAlign: `n × (C·pool·pool)` row-major, channel-major within a row.
pub fn roi_align(features: &Tensor3, rois: &[BBox], stride: usize, pool: usize, sampling: usize) -> Vec<f64> {
    let (c, fh, fw) = features.shape();
    let row = c * pool * pool;
    let mut out = vec![0.0; rois.len() * row];
    for (r, roi) in rois.iter().enumerate() {
        let bins = roi_taps(roi, stride as f64, fh, fw, pool, sampling);
        let dst = &mut out[r * row..(r + 1) * row];
        for ch in 0..c {
            let plane = features.plane(ch);
            for (b, taps) in bins.iter().enumerate() {
                dst[ch * pool * pool + b] = taps.iter().map(|&(i, wt)| plane[i] * wt).sum();
            }
        }
    }
    out
}

pub fn roi_align_backward(
    shape: (usize, usize, usize),
    rois: &[BBox],
    stride: usize,
    pool: usize,
    sampling: usize,
    grad: &[f64],
) -> Tensor3 {
    let (c, fh, fw) = shape;
    let row = c * pool * pool;
    let mut out = Tensor3::zeros(c, fh, fw);
    for (r, roi) in rois.iter().enumerate() {
        let bins = roi_taps(roi, stride as f64, fh, fw, pool, sampling);
        let src = &grad[r * row..(r + 1) * row];
        for ch in 0..c {
            let plane = out.plane_mut(ch);
            for (b, taps) in bins.iter().enumerate() {
                let g = src[ch * pool * pool + b];
                if g != 0.0 {
                    for &(i, wt) in taps {
                        plane[i] += g * wt;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiHeadConfig {
    pub pool: usize,
    pub sampling: usize,
    pub hidden: usize,
}

impl Default for RoiHeadConfig {
    fn default() -> Self {
        Self {
            pool: 4,
            sampling: 2,
            hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiOutput {
    /// `n × n_logits`, row-major.
    pub logits: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

#[derive(Debug, Clone)]
pub struct RoiTrace {
    feature_shape: (usize, usize, usize),
    rois: Vec<BBox>,
    pooled: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

/// Shared-MLP RoI head with `n_logits` sigmoid scores and class-agnostic box
/// refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiHead {
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
    config: RoiHeadConfig,
    stride: usize,
    coder: BoxCoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_per_class: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_per_class: 100,
        }
    }
}

impl RoiHead {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        n_logits: usize,
        stride: usize,
        config: &RoiHeadConfig,
        rng: &mut R,
    ) -> Self {
        let inp = channels * config.pool * config.pool;
        Self {
            fc1: Linear::new(inp, config.hidden, rng),
            fc2: Linear::new(config.hidden, config.hidden, rng),
            cls: Linear::with_std(config.hidden, n_logits, 0.01, rng),
            reg: Linear::with_std(config.hidden, 4, 0.001, rng),
            config: config.clone(),
            stride,
            coder: BoxCoder::new([10.0, 10.0, 5.0, 5.0]),
        }
    }

    pub fn n_logits(&self) -> usize {
        self.cls.out_features()
    }

    pub fn coder(&self) -> &BoxCoder {
        &self.coder
    }

    /// Mutable access to the classification layer.
    pub fn classifier_mut(&mut self) -> &mut Linear {
        &mut self.cls
    }

    pub fn forward_traced(&self, features: &Tensor3, rois: &[BBox]) -> Result<(RoiOutput, RoiTrace)> {
        let expected = self.fc1.in_features() / (self.config.pool * self.config.pool);
        if features.channels() != expected {
            return Err(Error::Shape(format!(
                "RoI head expects {expected} channels, got {}",
                features.channels()
            )));
        }
        let n = rois.len();
        let pooled = roi_align(features, rois, self.stride, self.config.pool, self.config.sampling);
        let mut h1 = self.fc1.forward(&pooled, n)?;
        relu_in_place(&mut h1);
        let mut h2 = self.fc2.forward(&h1, n)?;
        relu_in_place(&mut h2);
        let logits = self.cls.forward(&h2, n)?;
        let raw = self.reg.forward(&h2, n)?;
        let deltas = raw.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        Ok((
            RoiOutput { logits, deltas },
            RoiTrace {
                feature_shape: features.shape(),
                rois: rois.to_vec(),
                pooled,
                h1,
                h2,
            },
        ))
    }

    pub fn backward(&mut self, trace: &RoiTrace, grad_logits: &[f64], grad_deltas: &[[f64; 4]]) -> Tensor3 {
        let n = trace.rois.len();
        let g_reg: Vec<f64> = grad_deltas.iter().flatten().copied().collect();
        let mut g_h2 = self.cls.backward(&trace.h2, grad_logits, n);
        let g_from_reg = self.reg.backward(&trace.h2, &g_reg, n);
        g_h2.iter_mut().zip(&g_from_reg).for_each(|(a, b)| *a += b);
        relu_backward_in_place(&trace.h2, &mut g_h2);
        let mut g_h1 = self.fc2.backward(&trace.h1, &g_h2, n);
        relu_backward_in_place(&trace.h1, &mut g_h1);
        let g_pooled = self.fc1.backward(&trace.pooled, &g_h1, n);
        roi_align_backward(
            trace.feature_shape,
            &trace.rois,
            self.stride,
            self.config.pool,
            self.config.sampling,
            &g_pooled,
        )
    }

    /// Scores every proposal on the given logit columns, refines boxes and
    /// applies per-class NMS.
    pub fn detect(
        &self,
        features: &FeatureMap,
        proposals: &[Proposal],
        columns: &[(usize, ClassId)],
        image_size: (u32, u32),
        cfg: &DetectConfig,
    ) -> Result<BTreeMap<ClassId, Vec<Detection>>> {
        let mut out: BTreeMap<ClassId, Vec<Detection>> = columns.iter().map(|&(_, c)| (c, Vec::new())).collect();
        if proposals.is_empty() {
            return Ok(out);
        }
        let rois: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let (res, _) = self.forward_traced(&features.values, &rois)?;
        let l = self.n_logits();
        let (w, h) = (f64::from(image_size.0), f64::from(image_size.1));
        let refined: Vec<BBox> = rois
            .iter()
            .zip(&res.deltas)
            .map(|(r, d)| self.coder.decode(d, r).clip(w, h))
            .collect();
        for &(col, class_id) in columns {
            if col >= l {
                return Err(Error::Shape(format!("logit column {col} out of {l}")));
            }
            let mut boxes = Vec::new();
            let mut scores = Vec::new();
            for (i, b) in refined.iter().enumerate() {
                let s = sigmoid(res.logits[i * l + col]);
                if s >= cfg.score_threshold && b.is_valid() && b.width() >= 1.0 && b.height() >= 1.0 {
                    boxes.push(*b);
                    scores.push(s);
                }
            }
            let keep = nms(&boxes, &scores, cfg.nms_iou);
            out.insert(
                class_id,
                keep.into_iter()
                    .take(cfg.max_per_class)
                    .map(|i| Detection {
                        bbox: boxes[i],
                        score: scores[i],
                        class_id,
                    })
                    .collect(),
            );
        }
        Ok(out)
    }
}

impl Module for RoiHead {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.fc1.params(&join(prefix, "fc1"), out);
        self.fc2.params(&join(prefix, "fc2"), out);
        self.cls.params(&join(prefix, "cls"), out);
        self.reg.params(&join(prefix, "reg"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.fc1.params_mut(&join(prefix, "fc1"), out);
        self.fc2.params_mut(&join(prefix, "fc2"), out);
        self.cls.params_mut(&join(prefix, "cls"), out);
        self.reg.params_mut(&join(prefix, "reg"), out);
    }
}

/// Binary class-vs-background scoring of proposals on a class-specific map.
pub fn roi_head(
    head: &RoiHead,
    features: &FeatureMap,
    proposals: &[Proposal],
    class_id: ClassId,
    image_size: (u32, u32),
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let mut per = head.detect(features, proposals, &[(0, class_id)], image_size, cfg)?;
    Ok(per.remove(&class_id).unwrap_or_default())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    #[default]
    CrossClassNms,
    ConcatOnly,
}

fn fusion_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| a.bbox.lexicographic_cmp(&b.bbox))
}

/// Concatenates per-class detections and suppresses overlaps across classes:
/// visiting by (score desc, class id, box), a detection survives unless a
/// survivor overlaps it with IoU above `iou_thresh`.
pub fn fuse_results(per_class: &BTreeMap<ClassId, Vec<Detection>>, iou_thresh: f64) -> Vec<Detection> {
    fuse_with(per_class, iou_thresh, FusionRule::CrossClassNms)
}

pub fn fuse_with(per_class: &BTreeMap<ClassId, Vec<Detection>>, iou_thresh: f64, rule: FusionRule) -> Vec<Detection> {
    let mut all: Vec<Detection> = per_class.values().flatten().copied().collect();
    all.sort_by(fusion_order);
    if rule == FusionRule::ConcatOnly {
        return all;
    }
    let mut kept: Vec<Detection> = Vec::with_capacity(all.len());
    for d in all {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}
