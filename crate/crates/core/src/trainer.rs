//! Two-phase training (base, then k-shot fine-tuning) and the FRCN baseline
//! modes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotatedImage, ClassSplit, SupportCrop};
use crate::episode::{build_episode, joint_set, sample_kshot, KShotSet, TrainingSet};
use crate::loss::LossReport;
use crate::model::{FsDetector, ModelConfig};
use crate::nn::Module;
use crate::{ClassId, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Ours,
    FrcnFew,
    FrcnJoint,
    FrcnFt,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Ours, Mode::FrcnFew, Mode::FrcnJoint, Mode::FrcnFt];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ours => "ours",
            Mode::FrcnFew => "frcn_few",
            Mode::FrcnJoint => "frcn_joint",
            Mode::FrcnFt => "frcn_ft",
        }
    }

    pub fn uses_highlight(self) -> bool {
        self == Mode::Ours
    }

    /// Modes trained in a single phase.
    pub fn single_phase(self) -> bool {
        matches!(self, Mode::FrcnFew | Mode::FrcnJoint)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Base => "base",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub mode: Mode,
    pub k: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub batch_episodes: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Parameter-name prefixes excluded from updates.
    pub frozen: Vec<String>,
}

impl TrainConfig {
    pub fn base(mode: Mode, seed: u64) -> Self {
        Self {
            phase: Phase::Base,
            mode,
            k: None,
            learning_rate: 1e-3,
            momentum: 0.9,
            iterations: 300,
            batch_episodes: 1,
            seed,
            grad_clip: None,
            frozen: Vec::new(),
        }
    }

    pub fn finetune(mode: Mode, k: usize, seed: u64) -> Self {
        Self {
            phase: Phase::Finetune,
            k: Some(k),
            learning_rate: 1e-4,
            ..Self::base(mode, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let needs_k = self.phase == Phase::Finetune || self.mode.single_phase();
        match (needs_k, self.k) {
            (true, None) => return Err(Error::Config(format!("{} {} training needs k", self.mode, self.phase))),
            (false, Some(_)) => return Err(Error::Config("k is only meaningful for k-shot training".into())),
            (_, Some(0)) => return Err(Error::Config("k must be at least 1".into())),
            _ => {}
        }
        if self.mode.single_phase() && self.phase == Phase::Base {
            return Err(Error::Config(format!("{} has no base phase", self.mode)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if self.batch_episodes == 0 {
            return Err(Error::Config("batch_episodes must be at least 1".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub report: LossReport,
}

/// Writes `iteration,rpn_cls,rpn_reg,roi_cls,roi_reg,total`.
pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,rpn_cls,rpn_reg,roi_cls,roi_reg,total")?;
    for r in history {
        let p = &r.report;
        writeln!(
            f,
            "{},{:?},{:?},{:?},{:?},{:?}",
            r.iteration, p.rpn_cls, p.rpn_reg, p.roi_cls, p.roi_reg, p.total
        )?;
    }
    f.flush()?;
    Ok(())
}

/// SGD with classical momentum: `v ← μv + g; p ← p − lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn step(&mut self, model: &mut FsDetector, lr: f64, momentum: f64, frozen: &[String]) {
        for (name, p) in model.named_params_mut() {
            if frozen.iter().any(|f| name.starts_with(f.as_str())) {
                continue;
            }
            let v = self.velocity.entry(name).or_insert_with(|| vec![0.0; p.len()]);
            for ((v, g), w) in v.iter_mut().zip(&p.grad).zip(p.value.iter_mut()) {
                *v = momentum * *v + g;
                *w -= lr * *v;
            }
        }
    }
}

fn clip_gradients(model: &mut FsDetector, max_norm: f64) {
    let mut params = model.named_params_mut();
    let norm = params
        .iter()
        .flat_map(|(_, p)| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
}

fn check_mode(model: &FsDetector, mode: Mode) -> Result<()> {
    if model.uses_highlight() != mode.uses_highlight() {
        return Err(Error::Config(format!(
            "mode {mode} {} the highlight module but the model {} it",
            if mode.uses_highlight() { "needs" } else { "disables" },
            if model.uses_highlight() { "has" } else { "lacks" }
        )));
    }
    Ok(())
}

/// The episodic optimization loop shared by every phase and mode.
fn fit(
    model: &mut FsDetector,
    set: &TrainingSet,
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<Vec<LossRecord>> {
    if config.iterations == 0 {
        return Ok(Vec::new());
    }
    let classes: Vec<ClassId> = set.classes.clone();
    let eligible: Vec<usize> = (0..set.images.len())
        .filter(|&i| {
            let (_, labels) = set.kept_boxes(i);
            labels.iter().any(|l| classes.contains(l))
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::Domain("training set has no annotated image".into()));
    }
    let pool: Vec<SupportCrop> = if model.uses_highlight() { set.support_pool() } else { Vec::new() };
    if model.uses_highlight() {
        for &c in &classes {
            if !pool.iter().any(|s| s.class_id == c) {
                return Err(Error::Sampling(c));
            }
        }
    }
    model.set_classes(&classes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::default();
    let mut history = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        model.zero_grad();
        let mut reports = Vec::with_capacity(config.batch_episodes);
        for _ in 0..config.batch_episodes {
            let i = eligible[rng.random_range(0..eligible.len())];
            let (boxes, labels) = set.kept_boxes(i);
            let src = &set.images[i];
            let query = AnnotatedImage {
                image_id: src.image_id.clone(),
                pixels: src.pixels.clone(),
                boxes,
                labels,
            };
            let ignore = set.masked_boxes(i);
            let episode_seed = rng.next_u64();
            let supports = if model.uses_highlight() {
                build_episode(&query, &pool, &classes, episode_seed)?.supports
            } else {
                BTreeMap::new()
            };
            reports.push(model.train_step(&query, &ignore, &classes, &supports, &mut rng)?);
        }
        let report = LossReport::mean(&reports);
        if !report.is_finite() {
            if let Some(path) = checkpoint {
                let diag = diagnostic_path(path);
                model.save(&diag, serde_json::json!({"config": config, "failed_iteration": iteration}))?;
                log::error!("non-finite loss; diagnostic checkpoint at {}", diag.display());
            }
            return Err(Error::NonFiniteLoss { iteration });
        }
        if config.batch_episodes > 1 {
            let s = 1.0 / config.batch_episodes as f64;
            for (_, p) in model.named_params_mut() {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        if let Some(c) = config.grad_clip {
            clip_gradients(model, c);
        }
        sgd.step(model, config.learning_rate, config.momentum, &config.frozen);
        history.push(LossRecord { iteration, report });
        if iteration % 50 == 0 {
            log::debug!("{} {} iter {iteration}: total {:.4}", config.mode, config.phase, report.total);
        }
    }
    if model.uses_highlight() {
        model.compute_prototypes(&pool)?;
    }
    if let Some(path) = checkpoint {
        model.save(path, serde_json::json!({"config": config}))?;
    }
    Ok(history)
}

pub fn diagnostic_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".nonfinite");
    checkpoint.with_file_name(name)
}

/// Base-phase data: the given images with every non-base annotation removed.
/// Objects of other classes stay in the pixels and count as background.
pub fn base_training_set(images: &[AnnotatedImage], split: &ClassSplit) -> TrainingSet {
    let restricted: Vec<AnnotatedImage> = images.iter().map(|im| im.restricted_to(&split.base_classes)).collect();
    TrainingSet::full(&restricted, &split.base_classes)
}

/// Phase one. `base_data` must only carry base-class annotations.
pub fn train_base(
    model: &mut FsDetector,
    base_data: &TrainingSet,
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    if config.phase != Phase::Base {
        return Err(Error::Config("train_base needs phase = base".into()));
    }
    check_mode(model, config.mode)?;
    let classes: BTreeSet<ClassId> = base_data.classes.iter().copied().collect();
    for (i, im) in base_data.images.iter().enumerate() {
        for (l, &k) in im.labels.iter().zip(&base_data.kept[i]) {
            if k && !classes.contains(l) {
                return Err(Error::Usage(format!(
                    "base data image {} is annotated with non-base class {l}",
                    im.image_id
                )));
            }
        }
    }
    fit(model, base_data, config, checkpoint)
}

/// Phase two on a k-shot set over base ∪ novel classes. No parameter is
/// frozen unless the config says so.
pub fn finetune_novel(
    model: &mut FsDetector,
    kshot: &KShotSet,
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    if config.phase != Phase::Finetune {
        return Err(Error::Config("finetune_novel needs phase = finetune".into()));
    }
    check_mode(model, config.mode)?;
    if config.k != Some(kshot.k) {
        return Err(Error::Config(format!("config k {:?} does not match k-shot set k={}", config.k, kshot.k)));
    }
    kshot.check()?;
    fit(model, &kshot.set, config, checkpoint)
}

/// Inputs shared by the baseline modes.
#[derive(Debug, Clone)]
pub struct BaselineData<'a> {
    /// Training partition, fully annotated.
    pub images: &'a [AnnotatedImage],
    pub split: &'a ClassSplit,
    pub vocabulary: &'a [String],
}

#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub model: ModelConfig,
    /// Used by frcn_ft's first phase.
    pub base: TrainConfig,
    /// The single phase of frcn_few / frcn_joint, or frcn_ft's second phase.
    pub finetune: TrainConfig,
    /// Seed of the k-shot draw.
    pub kshot_seed: u64,
    pub init_seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub model: FsDetector,
    /// One entry per phase actually run.
    pub histories: Vec<(Phase, Vec<LossRecord>)>,
    pub checkpoints: Vec<PathBuf>,
}

/// frcn_few: k boxes for every class, one phase. frcn_joint: all base boxes
/// plus k novel boxes, one phase. frcn_ft: base phase then k-shot phase.
pub fn run_baseline(mode: Mode, data: &BaselineData<'_>, config: &BaselineConfig) -> Result<BaselineOutcome> {
    if mode == Mode::Ours {
        return Err(Error::Config("run_baseline covers the frcn modes only".into()));
    }
    if config.model.highlight.is_some() {
        return Err(Error::Config("baselines run without the highlight module".into()));
    }
    if config.base.mode != mode || config.finetune.mode != mode {
        return Err(Error::Config(format!("train configs do not match mode {mode}")));
    }
    let k = config
        .finetune
        .k
        .ok_or_else(|| Error::Config(format!("{mode} needs k")))?;
    let ckpt = |name: &str| config.checkpoint_dir.as_ref().map(|d| d.join(name));
    let mut model = FsDetector::new(&config.model, data.vocabulary, config.init_seed);
    let all: Vec<ClassId> = data.split.all_classes().into_iter().collect();
    let mut histories = Vec::new();
    let mut checkpoints = Vec::new();
    match mode {
        Mode::FrcnFew => {
            let kshot = sample_kshot(data.images, &all, k, config.kshot_seed)?;
            let path = ckpt("finetune.ckpt");
            histories.push((Phase::Finetune, finetune_novel(&mut model, &kshot, &config.finetune, path.as_deref())?));
            checkpoints.extend(path);
        }
        Mode::FrcnJoint => {
            config.finetune.validate()?;
            let set = joint_set(
                data.images,
                &data.split.base_classes,
                &data.split.novel_classes,
                k,
                config.kshot_seed,
            )?;
            let path = ckpt("finetune.ckpt");
            check_mode(&model, mode)?;
            histories.push((Phase::Finetune, fit(&mut model, &set, &config.finetune, path.as_deref())?));
            checkpoints.extend(path);
        }
        Mode::FrcnFt => {
            let base = base_training_set(data.images, data.split);
            let path = ckpt("base.ckpt");
            histories.push((Phase::Base, train_base(&mut model, &base, &config.base, path.as_deref())?));
            checkpoints.extend(path);
            let kshot = sample_kshot(data.images, &all, k, config.kshot_seed)?;
            let path = ckpt("finetune.ckpt");
            histories.push((Phase::Finetune, finetune_novel(&mut model, &kshot, &config.finetune, path.as_deref())?));
            checkpoints.extend(path);
        }
        Mode::Ours => unreachable!(),
    }
    Ok(BaselineOutcome {
        model,
        histories,
        checkpoints,
    })
}
