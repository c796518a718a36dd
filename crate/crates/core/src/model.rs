//! The full detector: shared backbone, optional highlight module, RPN and RoI
//! head, with training steps, inference and checkpoint I/O.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::RgbImage;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_crop, Backbone, BackboneConfig, FeatureMap, SupportEmbedding};
use crate::boxes::{BBox, BoxCoder};
use crate::dataset::{AnnotatedImage, SupportCrop};
use crate::detector::{
    fuse_with, generate_anchors, roi_head, select_proposals, AnchorConfig, DetectConfig, Detection, FusionRule,
    Proposal, ProposalConfig, RoiHead, RoiHeadConfig, Rpn,
};
use crate::highlight::{apply_highlight, correlate_channels, correlate_channels_backward, HighlighterConfig, HighlighterParams};
use crate::loss::{compute_loss, sample_rois, GroundTruth, LossConfig, LossReport, ModelOutputs};
use crate::nn::{join, Module, Param};
use crate::tensor::Tensor3;
use crate::{ClassId, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// `None` sends general features straight to the backend, which then
    /// uses a multi-class RoI head (the FRCN baselines).
    pub highlight: Option<HighlighterConfig>,
    pub anchors: AnchorConfig,
    pub rpn_hidden: usize,
    pub roi: RoiHeadConfig,
    pub train_proposals: ProposalConfig,
    pub test_proposals: ProposalConfig,
    pub detect: DetectConfig,
    pub fusion: FusionRule,
    pub fusion_iou: f64,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            highlight: Some(HighlighterConfig::default()),
            anchors: AnchorConfig::default(),
            rpn_hidden: 128,
            roi: RoiHeadConfig::default(),
            train_proposals: ProposalConfig {
                post_nms_top_n: 64,
                ..Default::default()
            },
            test_proposals: ProposalConfig::default(),
            detect: DetectConfig::default(),
            fusion: FusionRule::CrossClassNms,
            fusion_iou: 0.5,
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Same backend without the highlight module.
    pub fn baseline() -> Self {
        Self {
            highlight: None,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsDetector {
    config: ModelConfig,
    backbone: Backbone,
    highlighter: Option<HighlighterParams>,
    rpn: Rpn,
    roi_head: RoiHead,
    /// Class names indexed by class id.
    vocabulary: Vec<String>,
    /// Classes the model currently detects.
    classes: Vec<ClassId>,
    /// Mean support embedding per class, used at inference.
    prototypes: BTreeMap<ClassId, Vec<f64>>,
}

const MAGIC: &[u8; 8] = b"FSDETCK\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// JSON header stored in front of the raw parameter values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub classes: Vec<ClassId>,
    pub prototypes: BTreeMap<ClassId, Vec<f64>>,
    params: Vec<ParamEntry>,
    /// Free-form training metadata (train config, phase).
    pub train: serde_json::Value,
}

impl FsDetector {
    pub fn new(config: &ModelConfig, vocabulary: &[String], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&config.backbone, &mut rng);
        let c = backbone.feature_channels();
        let highlighter = config
            .highlight
            .as_ref()
            .map(|h| HighlighterParams::new(c, c, h, &mut rng));
        let rpn = Rpn::new(c, config.rpn_hidden, config.anchors.per_cell(), &mut rng);
        let n_logits = if highlighter.is_some() { 1 } else { vocabulary.len().max(1) };
        let roi_head = RoiHead::new(c, n_logits, backbone.stride(), &config.roi, &mut rng);
        Self {
            config: config.clone(),
            backbone,
            highlighter,
            rpn,
            roi_head,
            vocabulary: vocabulary.to_vec(),
            classes: Vec::new(),
            prototypes: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Backbone {
        &mut self.backbone
    }

    pub fn highlighter(&self) -> Option<&HighlighterParams> {
        self.highlighter.as_ref()
    }

    pub fn uses_highlight(&self) -> bool {
        self.highlighter.is_some()
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn set_classes(&mut self, classes: &[ClassId]) {
        self.classes = classes.to_vec();
    }

    pub fn prototypes(&self) -> &BTreeMap<ClassId, Vec<f64>> {
        &self.prototypes
    }

    /// Stores the mean embedding of each class's crops in `pool`.
    pub fn compute_prototypes(&mut self, pool: &[SupportCrop]) -> Result<()> {
        let mut sums: BTreeMap<ClassId, (Vec<f64>, usize)> = BTreeMap::new();
        for crop in pool {
            let e = self.backbone.embed_support(crop)?;
            let entry = sums
                .entry(crop.class_id)
                .or_insert_with(|| (vec![0.0; e.values.len()], 0));
            entry.0.iter_mut().zip(&e.values).for_each(|(a, b)| *a += b);
            entry.1 += 1;
        }
        self.prototypes = sums
            .into_iter()
            .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        Ok(())
    }

    fn logit_column(&self, class: ClassId) -> usize {
        if self.highlighter.is_some() {
            0
        } else {
            class.index()
        }
    }

    /// Forward/backward on the backend for one feature map; returns the
    /// feature gradient. Gradients are scaled by `scale` before backprop.
    fn backend_step(
        &mut self,
        features: &Tensor3,
        image_size: (u32, u32),
        gt: &GroundTruth,
        scale: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor3, LossReport)> {
        let anchors = generate_anchors(features.height(), features.width(), &self.config.anchors);
        let (rpn_out, rpn_trace) = self.rpn.forward_traced(features)?;
        let proposals = select_proposals(
            &anchors,
            &rpn_out,
            image_size,
            &BoxCoder::default(),
            &self.config.train_proposals,
        );
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let rois = sample_rois(&boxes, gt, &self.config.loss, Some(&mut *rng));
        let (roi_out, roi_trace) = if rois.is_empty() {
            (None, None)
        } else {
            let (o, t) = self.roi_head.forward_traced(features, &rois)?;
            (Some(o), Some(t))
        };
        let n_logits = self.roi_head.n_logits();
        let (roi_logits, roi_deltas) = roi_out.map(|o| (o.logits, o.deltas)).unwrap_or_default();
        let outputs = ModelOutputs {
            image_size,
            anchors,
            rpn: rpn_out,
            rois,
            roi_logits,
            roi_deltas,
            n_logits,
        };
        let (report, mut grads) = compute_loss(&outputs, gt, &self.config.loss, Some(&mut *rng))?;
        grads.scale(scale);
        let mut g = self.rpn.backward(&rpn_trace, &grads.rpn_logits, &grads.rpn_deltas);
        if let Some(t) = roi_trace {
            g.add_assign(&self.roi_head.backward(&t, &grads.roi_logits, &grads.roi_deltas));
        }
        Ok((g, report))
    }

    /// One episode: accumulates parameter gradients of the per-class mean
    /// loss and returns that loss.
    ///
    /// `query` carries the annotated (kept) boxes; `ignore` lists regions
    /// excluded from the loss. Supports are only read when the highlight
    /// module is enabled.
    pub fn train_step(
        &mut self,
        query: &AnnotatedImage,
        ignore: &[BBox],
        task_classes: &[ClassId],
        supports: &BTreeMap<ClassId, SupportCrop>,
        rng: &mut dyn RngCore,
    ) -> Result<LossReport> {
        if task_classes.is_empty() {
            return Err(Error::Usage("episode without task classes".into()));
        }
        let image_size = query.pixels.dimensions();
        let (features, q_trace) = self.backbone.forward_traced(Tensor3::from_image(&query.pixels))?;
        if self.highlighter.is_none() {
            let mut columns = Vec::new();
            let mut boxes = Vec::new();
            for (b, l) in query.boxes.iter().zip(&query.labels) {
                if task_classes.contains(l) {
                    boxes.push(*b);
                    columns.push(self.logit_column(*l));
                }
            }
            let gt = GroundTruth {
                boxes,
                columns,
                ignore: ignore.to_vec(),
                active_columns: task_classes.iter().map(|&c| self.logit_column(c)).collect(),
                background: Vec::new(),
            };
            let (g, report) = self.backend_step(&features, image_size, &gt, 1.0, rng)?;
            self.backbone.backward(&q_trace, g);
            return Ok(report);
        }

        let scale = 1.0 / task_classes.len() as f64;
        let mut g_features = Tensor3::zeros(features.channels(), features.height(), features.width());
        let mut reports = Vec::with_capacity(task_classes.len());
        for &c in task_classes {
            let crop = supports.get(&c).ok_or(Error::Sampling(c))?;
            if crop.class_id != c {
                return Err(Error::Usage(format!("support for class {c} is labelled {}", crop.class_id)));
            }
            check_crop(crop)?;
            let (s_features, s_trace) = self.backbone.forward_traced(Tensor3::from_image(&crop.patch))?;
            let embedding = s_features.global_average();
            let hl = self.highlighter.as_ref().expect("highlight enabled");
            let (coarse, fine, h_trace) = hl.forward_traced(&embedding)?;
            let kc = Tensor3::from_vec(coarse.len(), 1, 1, coarse)?;
            let kf = Tensor3::from_vec(fine.len(), 1, 1, fine)?;
            let once = correlate_channels(&features, &kc)?;
            let specific = correlate_channels(&once, &kf)?;

            let (boxes, others): (Vec<(&BBox, &ClassId)>, Vec<_>) =
                query.boxes.iter().zip(&query.labels).partition(|(_, &l)| l == c);
            let gt = GroundTruth::binary(boxes.into_iter().map(|(b, _)| *b).collect(), ignore.to_vec())
                .with_background(others.into_iter().map(|(b, _)| *b).collect());
            let (g_specific, report) = self.backend_step(&specific, image_size, &gt, scale, rng)?;
            reports.push(report);

            let (g_once, g_kf) = correlate_channels_backward(&once, &kf, &g_specific)?;
            let (g_f, g_kc) = correlate_channels_backward(&features, &kc, &g_once)?;
            g_features.add_assign(&g_f);
            let g_embedding = self
                .highlighter
                .as_mut()
                .expect("highlight enabled")
                .backward(&h_trace, g_kc.data(), g_kf.data());
            let (sc, sh, sw) = s_features.shape();
            let mut g_support = Tensor3::zeros(sc, sh, sw);
            let inv = 1.0 / (sh * sw) as f64;
            for (ch, g) in g_embedding.iter().enumerate() {
                g_support.plane_mut(ch).iter_mut().for_each(|v| *v = g * inv);
            }
            self.backbone.backward(&s_trace, g_support);
        }
        self.backbone.backward(&q_trace, g_features);
        Ok(LossReport::mean(&reports))
    }

    /// Per-class detections for the given support embeddings (ignored by the
    /// baseline, which scores `classes` directly).
    pub fn detect_with_embeddings(
        &self,
        image: &RgbImage,
        embeddings: &[SupportEmbedding],
        classes: &[ClassId],
    ) -> Result<BTreeMap<ClassId, Vec<Detection>>> {
        let features = self.backbone.extract_features(image)?;
        let size = image.dimensions();
        let cfg = &self.config;
        match &self.highlighter {
            Some(hl) => {
                let maps = apply_highlight(&features, embeddings, hl)?;
                let mut out = BTreeMap::new();
                for (c, map) in maps {
                    let proposals = self.rpn.propose(&map, size, &cfg.anchors, &cfg.test_proposals)?;
                    out.insert(c, roi_head(&self.roi_head, &map, &proposals, c, size, &cfg.detect)?);
                }
                Ok(out)
            }
            None => {
                let proposals = self.rpn.propose(&features, size, &cfg.anchors, &cfg.test_proposals)?;
                let columns: Vec<(usize, ClassId)> = classes.iter().map(|&c| (self.logit_column(c), c)).collect();
                self.roi_head.detect(&features, &proposals, &columns, size, &cfg.detect)
            }
        }
    }

    fn prototype_embeddings(&self) -> Result<Vec<SupportEmbedding>> {
        if self.highlighter.is_none() {
            return Ok(Vec::new());
        }
        self.classes
            .iter()
            .map(|c| {
                self.prototypes
                    .get(c)
                    .map(|v| SupportEmbedding {
                        values: v.clone(),
                        class_id: *c,
                    })
                    .ok_or(Error::Sampling(*c))
            })
            .collect()
    }

    /// Per-class detections using the stored prototypes.
    pub fn detect_per_class(&self, image: &RgbImage) -> Result<BTreeMap<ClassId, Vec<Detection>>> {
        self.detect_with_embeddings(image, &self.prototype_embeddings()?, &self.classes)
    }

    /// Test-time proposals on the map each class is detected from. The
    /// baseline shares one general map, so every class gets the same list.
    pub fn proposals_per_class(&self, image: &RgbImage) -> Result<BTreeMap<ClassId, Vec<Proposal>>> {
        let features = self.backbone.extract_features(image)?;
        let size = image.dimensions();
        let cfg = &self.config;
        match &self.highlighter {
            Some(hl) => apply_highlight(&features, &self.prototype_embeddings()?, hl)?
                .into_iter()
                .map(|(c, map)| Ok((c, self.rpn.propose(&map, size, &cfg.anchors, &cfg.test_proposals)?)))
                .collect(),
            None => {
                let proposals = self.rpn.propose(&features, size, &cfg.anchors, &cfg.test_proposals)?;
                Ok(self.classes.iter().map(|&c| (c, proposals.clone())).collect())
            }
        }
    }

    /// Fused detections over all model classes.
    pub fn detect(&self, image: &RgbImage) -> Result<Vec<Detection>> {
        let per_class = self.detect_per_class(image)?;
        Ok(fuse_with(&per_class, self.config.fusion_iou, self.config.fusion))
    }

    pub fn general_features(&self, image: &RgbImage) -> Result<FeatureMap> {
        self.backbone.extract_features(image)
    }

    /// Flat copy of every parameter value, in parameter order.
    pub fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        self.named_params()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect()
    }

    pub fn save(&self, path: &Path, train: serde_json::Value) -> Result<()> {
        let params = self.named_params();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            model_config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            classes: self.classes.clone(),
            prototypes: self.prototypes.clone(),
            params: params
                .iter()
                .map(|(n, p)| ParamEntry {
                    name: n.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            train,
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + json.len() + 8 * self.param_count());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, p) in &params {
            for v in &p.value {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
        }
        let raw = &bytes[16 + len..];
        if raw.len() % 8 != 0 {
            return Err(Error::Checkpoint("parameter block is not a whole number of f64".into()));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((header, values))
    }

    /// Copies values into parameters whose names pass `filter`.
    fn assign_values(&mut self, header: &CheckpointHeader, values: &[f64], filter: impl Fn(&str) -> bool) -> Result<()> {
        let mut by_name: BTreeMap<&str, (&[usize], &[f64])> = BTreeMap::new();
        let mut offset = 0;
        for e in &header.params {
            let n: usize = e.shape.iter().product();
            let v = values
                .get(offset..offset + n)
                .ok_or_else(|| Error::Checkpoint("parameter block too short".into()))?;
            by_name.insert(&e.name, (&e.shape, v));
            offset += n;
        }
        if offset != values.len() {
            return Err(Error::Checkpoint("parameter block has trailing values".into()));
        }
        for (name, p) in self.named_params_mut() {
            if !filter(&name) {
                continue;
            }
            let (shape, v) = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} missing")))?;
            if *shape != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!("parameter {name} has shape {shape:?}, expected {:?}", p.shape)));
            }
            p.value.copy_from_slice(v);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (header, values) = Self::read_checkpoint(path)?;
        let mut model = Self::new(&header.model_config, &header.vocabulary, 0);
        model.assign_values(&header, &values, |_| true)?;
        model.classes = header.classes.clone();
        model.prototypes = header.prototypes.clone();
        Ok((model, header))
    }

    /// Initializes the backbone from another checkpoint (pretrained weights).
    pub fn load_backbone(&mut self, path: &Path) -> Result<()> {
        let (header, values) = Self::read_checkpoint(path)?;
        self.assign_values(&header, &values, |n| n.starts_with("backbone."))
    }
}

impl Module for FsDetector {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.backbone.params(&join(prefix, "backbone"), out);
        if let Some(h) = &self.highlighter {
            h.params(&join(prefix, "highlighter"), out);
        }
        self.rpn.params(&join(prefix, "rpn"), out);
        self.roi_head.params(&join(prefix, "roi"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.backbone.params_mut(&join(prefix, "backbone"), out);
        if let Some(h) = &mut self.highlighter {
            h.params_mut(&join(prefix, "highlighter"), out);
        }
        self.rpn.params_mut(&join(prefix, "rpn"), out);
        self.roi_head.params_mut(&join(prefix, "roi"), out);
    }
}
