use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fsdet_core::dataset::{
    make_split, parse_annotations, partition_train_test, random_split, AnnotatedImage, ClassSplit, Dataset,
    SplitManifest,
};
use fsdet_core::episode::{sample_kshot, KShotManifest};
use fsdet_core::eval::{detect_all, plot_results, run_benchmark, write_detections_jsonl, BenchmarkGrid, BenchmarkSplit};
use fsdet_core::fixtures::{generate_fixture, FixtureSpec};
use fsdet_core::model::{FsDetector, ModelConfig};
use fsdet_core::trainer::{
    base_training_set, finetune_novel, run_baseline, write_loss_csv, BaselineConfig, BaselineData, Mode, TrainConfig,
};
use fsdet_core::{ClassId, Error};

use crate::config::{PhaseSettings, RunConfig};
use crate::record::write_run_record;
use crate::CliError;

const CHECKPOINT: &str = "model.ckpt";
const LOSS_CSV: &str = "loss.csv";

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()).into())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    require(path)?;
    serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    cfg.check_data_root()?;
    let ds = parse_annotations(&cfg.data_root).map_err(|e| match e {
        Error::MissingArtifact(p) => CliError::input(format!(
            "{} is not a dataset root: {} is missing",
            cfg.data_root.display(),
            p.display()
        )),
        e => e.into(),
    })?;
    for f in &ds.failures {
        log::warn!("skipped annotation: {f}");
    }
    if ds.images.is_empty() {
        return Err(CliError::input(format!(
            "no usable annotated images under {}",
            cfg.data_root.display()
        )));
    }
    Ok(ds)
}

/// Dataset plus the partition and class split recorded by `prepare`.
struct Prepared {
    dataset: Dataset,
    split: ClassSplit,
    train: Vec<AnnotatedImage>,
    test: Vec<AnnotatedImage>,
}

fn load_prepared(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let manifest: SplitManifest = read_json(&cfg.split_manifest())?;
    let dataset = load_dataset(cfg)?;
    if manifest.classes != dataset.vocabulary.names() {
        return Err(CliError::input(format!(
            "dataset classes {:?} differ from the split manifest's {:?}",
            dataset.vocabulary.names(),
            manifest.classes
        )));
    }
    let split = manifest.class_split(&dataset.vocabulary)?;
    let pick = |ids: &[String]| -> Result<Vec<AnnotatedImage>, CliError> {
        ids.iter()
            .map(|id| {
                dataset
                    .image(id)
                    .cloned()
                    .ok_or_else(|| CliError::input(format!("image `{id}` from the split manifest is not in the dataset")))
            })
            .collect()
    };
    let train = pick(&manifest.train)?;
    let test = pick(&manifest.test)?;
    Ok(Prepared {
        dataset,
        split,
        train,
        test,
    })
}

fn model_config(mode: Mode) -> ModelConfig {
    if mode.uses_highlight() {
        ModelConfig::default()
    } else {
        ModelConfig::baseline()
    }
}

fn apply(mut tc: TrainConfig, p: &PhaseSettings) -> TrainConfig {
    tc.iterations = p.iterations;
    tc.learning_rate = p.learning_rate;
    tc.momentum = p.momentum;
    tc
}

pub fn fixture(cfg: &RunConfig) -> Result<(), CliError> {
    let f = &cfg.fixture;
    let spec = FixtureSpec {
        n_classes: f.classes,
        n_images: f.images,
        image_size: f.size,
        objects_per_image: f.objects,
        seed: f.seed,
    };
    let data = generate_fixture(&spec, &cfg.data_root)?;
    log::info!(
        "wrote {} images over classes {:?} to {}",
        data.images.len(),
        data.vocabulary.names(),
        cfg.data_root.display()
    );
    write_run_record(
        &cfg.out.join("fixture"),
        "fixture",
        cfg,
        &[],
        &[cfg.data_root.clone()],
    )?;
    Ok(())
}

pub fn prepare(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let ids = ds.vocabulary.ids();
    let split = match &cfg.novel {
        Some(name) => {
            let id = ds
                .vocabulary
                .id_of(name)
                .ok_or_else(|| CliError::input(format!("split.novel `{name}` is not a dataset class")))?;
            make_split(&ids, id)?
        }
        None => random_split(&ids, cfg.split_seed)?,
    };
    let (train, test) = partition_train_test(&ds.images, cfg.train_ratio, cfg.split_seed)?;
    let dir = cfg.prepare_dir();
    std::fs::create_dir_all(&dir)?;
    let manifest = SplitManifest::build(&ds.vocabulary, &split, &train, &test, cfg.train_ratio, cfg.split_seed);
    let mut outputs = vec![cfg.split_manifest()];
    let all: Vec<ClassId> = split.all_classes().into_iter().collect();
    // draw every k-shot set before writing anything so a capacity failure
    // leaves no partial manifests behind
    let mut kshots = Vec::new();
    for &k in &cfg.ks {
        kshots.push((k, sample_kshot(&train, &all, k, cfg.kshot_seed)?.manifest(&ds.vocabulary)));
    }
    write_json(&cfg.split_manifest(), &manifest)?;
    for (k, m) in &kshots {
        write_json(&cfg.kshot_manifest(*k), m)?;
        outputs.push(cfg.kshot_manifest(*k));
    }
    log::info!(
        "novel {:?}, base {:?}; {} train / {} test images",
        manifest.novel_classes,
        manifest.base_classes,
        train.len(),
        test.len()
    );
    write_run_record(&dir, "prepare", cfg, &[cfg.data_root.clone()], &outputs)?;
    Ok(())
}

pub fn train_base(cfg: &RunConfig) -> Result<(), CliError> {
    let mode = cfg.mode;
    if matches!(mode, Mode::FrcnFew | Mode::FrcnJoint) {
        return Err(CliError::input(format!(
            "mode {mode} trains in a single phase; run `fsdet finetune`"
        )));
    }
    let p = load_prepared(cfg)?;
    let dir = cfg.base_dir(mode);
    std::fs::create_dir_all(&dir)?;
    let mut model = FsDetector::new(&model_config(mode), p.dataset.vocabulary.names(), cfg.seed);
    let tc = apply(TrainConfig::base(mode, cfg.seed), &cfg.base);
    let ckpt = dir.join(CHECKPOINT);
    let history = fsdet_core::trainer::train_base(
        &mut model,
        &base_training_set(&p.train, &p.split),
        &tc,
        Some(&ckpt),
    )?;
    write_loss_csv(&dir.join(LOSS_CSV), &history)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        log::info!("base loss {:.4} -> {:.4}", first.report.total, last.report.total);
    }
    write_run_record(
        &dir,
        "train-base",
        cfg,
        &[cfg.data_root.clone(), cfg.split_manifest()],
        &[ckpt, dir.join(LOSS_CSV)],
    )?;
    Ok(())
}

pub fn finetune(cfg: &RunConfig) -> Result<(), CliError> {
    let (mode, k) = (cfg.mode, cfg.k);
    let base_ckpt = cfg.base_dir(mode).join(CHECKPOINT);
    let kshot_path = cfg.kshot_manifest(k);
    if matches!(mode, Mode::Ours | Mode::FrcnFt) {
        require(&base_ckpt)?;
    }
    if mode != Mode::FrcnJoint {
        require(&kshot_path)?;
    }
    let p = load_prepared(cfg)?;
    let vocab = p.dataset.vocabulary.names().to_vec();
    let dir = cfg.finetune_dir(mode, k);
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join(CHECKPOINT);
    let tc = apply(TrainConfig::finetune(mode, k, cfg.seed), &cfg.finetune);
    let mut inputs = vec![cfg.data_root.clone(), cfg.split_manifest()];
    let history = match mode {
        Mode::FrcnJoint => {
            let data = BaselineData {
                images: &p.train,
                split: &p.split,
                vocabulary: &vocab,
            };
            let bc = BaselineConfig {
                model: model_config(mode),
                base: TrainConfig::base(mode, cfg.seed),
                finetune: tc.clone(),
                kshot_seed: cfg.kshot_seed,
                init_seed: cfg.seed,
                checkpoint_dir: None,
            };
            let out = run_baseline(mode, &data, &bc)?;
            out.model.save(&ckpt, serde_json::json!({ "config": tc }))?;
            out.histories.into_iter().flat_map(|(_, h)| h).collect()
        }
        _ => {
            let manifest: KShotManifest = read_json(&kshot_path)?;
            if manifest.k != k {
                return Err(CliError::input(format!(
                    "{} holds k={}, expected {k}",
                    kshot_path.display(),
                    manifest.k
                )));
            }
            let kshot = manifest.resolve(&p.train, &p.dataset.vocabulary)?;
            inputs.push(kshot_path);
            let mut model = if mode == Mode::FrcnFew {
                FsDetector::new(&model_config(mode), &vocab, cfg.seed)
            } else {
                inputs.push(base_ckpt.clone());
                FsDetector::load(&base_ckpt)?.0
            };
            finetune_novel(&mut model, &kshot, &tc, Some(&ckpt))?
        }
    };
    write_loss_csv(&dir.join(LOSS_CSV), &history)?;
    write_run_record(&dir, "finetune", cfg, &inputs, &[ckpt, dir.join(LOSS_CSV)])?;
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    require(&cfg.split_manifest())?;
    let mut checkpoints = BTreeMap::new();
    for &mode in &cfg.eval_modes {
        for &k in &cfg.eval_ks {
            let path = cfg.finetune_dir(mode, k).join(CHECKPOINT);
            require(&path)?;
            checkpoints.insert((mode, k), path);
        }
    }
    let p = load_prepared(cfg)?;
    let vocab = p.dataset.vocabulary.names().to_vec();
    let dir = cfg.eval_dir();
    std::fs::create_dir_all(&dir)?;
    let bench = [BenchmarkSplit {
        id: 0,
        split: p.split.clone(),
        test: &p.test,
    }];
    let grid = run_benchmark(
        |key, _| FsDetector::load(&checkpoints[&(key.mode, key.k)]).map(|(m, _)| m),
        &bench,
        &cfg.eval_ks,
        &cfg.eval_modes,
    );
    let mut outputs: Vec<PathBuf> = ["results.csv", "table.csv", "summary.json", "grid.json"]
        .iter()
        .map(|n| dir.join(n))
        .collect();
    grid.write_results_csv(&outputs[0], &vocab)?;
    grid.write_table_csv(&outputs[1])?;
    grid.write_summary_json(&outputs[2])?;
    write_json(&outputs[3], &grid)?;
    if cfg.export_detections {
        let det_dir = dir.join("detections");
        std::fs::create_dir_all(&det_dir)?;
        for ((mode, k), path) in &checkpoints {
            let (model, _) = FsDetector::load(path)?;
            let out = det_dir.join(format!("{mode}_k{k}.jsonl"));
            write_detections_jsonl(&out, &detect_all(&model, &p.test)?, &vocab)?;
            outputs.push(out);
        }
    }
    let mut failed = Vec::new();
    for c in &grid.cells {
        match &c.result {
            Ok(r) => println!("{} k={} novel AP {:.4}", c.key.mode, c.key.k, r.novel_ap),
            Err(e) => failed.push(format!("{} k={}: {e}", c.key.mode, c.key.k)),
        }
    }
    let mut inputs = vec![cfg.data_root.clone(), cfg.split_manifest()];
    inputs.extend(checkpoints.into_values());
    write_run_record(&dir, "eval", cfg, &inputs, &outputs)?;
    if !failed.is_empty() {
        return Err(CliError::other(format!("failed cells: {}", failed.join("; "))));
    }
    Ok(())
}

pub fn plot(cfg: &RunConfig) -> Result<(), CliError> {
    let grid_path = cfg.eval_dir().join("grid.json");
    let grid: BenchmarkGrid = read_json(&grid_path)?;
    let dir = cfg.plot_dir();
    let pngs = plot_results(&grid, &dir)?;
    if pngs.is_empty() {
        return Err(CliError::input(format!("{} holds no cells to plot", grid_path.display())));
    }
    for p in &pngs {
        println!("{}", p.display());
    }
    write_run_record(&dir, "plot", cfg, &[grid_path], &pngs)?;
    Ok(())
}
