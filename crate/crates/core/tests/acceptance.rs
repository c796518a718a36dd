//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p fsdet-core --test acceptance`. The fixture
//! experiments (criteria 6 and 7) dominate the runtime.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use fsdet_core::backbone::{Backbone, BackboneConfig, FeatureMap, SupportEmbedding};
use fsdet_core::boxes::{nms, BBox};
use fsdet_core::dataset::{
    crop_supports, make_split, parse_annotations, partition_train_test, AnnotatedImage, ClassSplit, SplitManifest,
    Vocabulary,
};
use fsdet_core::detector::{fuse_results, Detection};
use fsdet_core::episode::{build_episode, sample_kshot, TrainingSet};
use fsdet_core::eval::{compute_ap, run_benchmark, BenchmarkGrid, BenchmarkSplit, CellKey, GtBox, ScoredBox};
use fsdet_core::fixtures::{generate_fixture, render_fixture, FixtureSpec};
use fsdet_core::highlight::{
    coarse_highlight, correlate_channels_backward, dw_cross_correlate, HighlighterConfig, HighlighterParams,
};
use fsdet_core::model::{FsDetector, ModelConfig};
use fsdet_core::nn::Module;
use fsdet_core::tensor::Tensor3;
use fsdet_core::trainer::{
    base_training_set, finetune_novel, run_baseline, train_base, write_loss_csv, BaselineConfig, BaselineData,
    LossRecord, Mode, TrainConfig,
};
use fsdet_core::{ClassId, Result};

// Tolerances and budgets.
const CORRELATION_MAX_ABS: f64 = 1e-6;
const CORRELATION_BUDGET: Duration = Duration::from_secs(10);
const GRADIENT_MAX_REL: f64 = 1e-4;
const AP_TOL: f64 = 1e-6;
const NOVEL_AP_K10_MIN: f64 = 0.5;
const BENCHMARK_BUDGET: Duration = Duration::from_secs(20 * 60);
const KS: [usize; 5] = [1, 2, 3, 5, 10];
const SEEDS: [u64; 3] = [0, 1, 2];
const MAX_INVERSIONS: usize = 1;

// Fixture experiment settings.
const BASE_ITERATIONS: usize = 1000;
const FINETUNE_ITERATIONS: usize = 300;
const LEARNING_RATE: f64 = 1e-2;

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn report(id: usize, title: &'static str, result: Result<(bool, String)>) -> Outcome {
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    let line = format!(
        "[{}] criterion {id}: {title} ({detail})",
        if passed { "PASS" } else { "FAIL" }
    );
    println!("{line}");
    Outcome {
        id,
        title,
        passed,
        detail,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
    let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor3::from_vec(c, h, w, data).unwrap()
}

fn brute_force_correlation(f: &Tensor3, k: &Tensor3) -> Vec<Vec<Vec<f64>>> {
    let (c, h, w) = f.shape();
    let (kh, kw) = (k.height(), k.width());
    (0..c)
        .map(|ch| {
            (0..=h - kh)
                .map(|y| {
                    (0..=w - kw)
                        .map(|x| {
                            let mut s = 0.0;
                            for i in 0..kh {
                                for j in 0..kw {
                                    s += f.at(ch, y + i, x + j) * k.at(ch, i, j);
                                }
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn criterion_1() -> Result<(bool, String)> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = rng.random_range(1..=8);
        let h = rng.random_range(3..=16);
        let w = rng.random_range(3..=16);
        let kh = rng.random_range(1..=3);
        let kw = rng.random_range(1..=3);
        let f = random_tensor(&mut rng, c, h, w);
        let k = random_tensor(&mut rng, c, kh, kw);
        let fm = FeatureMap { values: f.clone(), stride: 16 };
        let out = dw_cross_correlate(&fm, &k)?.values;
        let oracle = brute_force_correlation(&f, &k);
        if out.shape() != (c, h - kh + 1, w - kw + 1) {
            return Ok((false, format!("output shape {:?}", out.shape())));
        }
        for (ch, plane) in oracle.iter().enumerate() {
            for (y, row) in plane.iter().enumerate() {
                for (x, v) in row.iter().enumerate() {
                    worst = worst.max((out.at(ch, y, x) - v).abs());
                }
            }
        }
    }
    let took = start.elapsed();
    Ok((
        worst <= CORRELATION_MAX_ABS && took < CORRELATION_BUDGET,
        format!("max abs error {worst:.2e}, {:.2}s", took.as_secs_f64()),
    ))
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Worst relative error of the highlighter's analytic gradients (parameters
/// and embedding) against central differences of `L = w·coarse + v·fine`.
fn highlighter_grad_error(params: &mut HighlighterParams, emb: &[f64], w: &[f64], v: &[f64]) -> f64 {
    let loss = |p: &HighlighterParams, e: &[f64]| {
        let (c, f, _) = p.forward_traced(e).unwrap();
        c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + f.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
    };
    params.zero_grad();
    let (_, _, trace) = params.forward_traced(emb).unwrap();
    let g_emb = params.backward(&trace, w, v);
    let analytic: Vec<Vec<f64>> = params.named_params().iter().map(|(_, p)| p.grad.clone()).collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let n_params = analytic.len();
    for pi in 0..n_params {
        for i in 0..analytic[pi].len() {
            let orig = params.named_params()[pi].1.value[i];
            params.named_params_mut()[pi].1.value[i] = orig + h;
            let lp = loss(params, emb);
            params.named_params_mut()[pi].1.value[i] = orig - h;
            let lm = loss(params, emb);
            params.named_params_mut()[pi].1.value[i] = orig;
            worst = worst.max(rel_err(analytic[pi][i], (lp - lm) / (2.0 * h)));
        }
    }
    for i in 0..emb.len() {
        let mut ep = emb.to_vec();
        ep[i] += h;
        let mut em = emb.to_vec();
        em[i] -= h;
        worst = worst.max(rel_err(g_emb[i], (loss(params, &ep) - loss(params, &em)) / (2.0 * h)));
    }
    worst
}

fn correlation_grad_error(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, kh: usize, kw: usize) -> f64 {
    let f = random_tensor(rng, c, h, w);
    let k = random_tensor(rng, c, kh, kw);
    let out_shape = (c, h - kh + 1, w - kw + 1);
    let g = random_tensor(rng, out_shape.0, out_shape.1, out_shape.2);
    let loss = |f: &Tensor3, k: &Tensor3| -> f64 {
        let fm = FeatureMap { values: f.clone(), stride: 1 };
        let o = dw_cross_correlate(&fm, k).unwrap().values;
        o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
    };
    let (gf, gk) = correlate_channels_backward(&f, &k, &g).unwrap();
    let hstep = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..f.data().len() {
        let mut p = f.clone();
        p.data_mut()[i] += hstep;
        let mut m = f.clone();
        m.data_mut()[i] -= hstep;
        worst = worst.max(rel_err(gf.data()[i], (loss(&p, &k) - loss(&m, &k)) / (2.0 * hstep)));
    }
    for i in 0..k.data().len() {
        let mut p = k.clone();
        p.data_mut()[i] += hstep;
        let mut m = k.clone();
        m.data_mut()[i] -= hstep;
        worst = worst.max(rel_err(gk.data()[i], (loss(&f, &p) - loss(&f, &m)) / (2.0 * hstep)));
    }
    worst
}

fn criterion_2() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (d, c) = (6, 5);
    let mut coarse_worst = 0.0f64;
    let mut fine_worst = 0.0f64;
    for trial in 0..3 {
        let mut params = HighlighterParams::new(
            d,
            c,
            &HighlighterConfig {
                hidden: (7, 6),
                ..Default::default()
            },
            &mut rng,
        );
        let emb: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        let w: Vec<f64> = (0..c).map(|_| normal.sample(&mut rng)).collect();
        let v: Vec<f64> = (0..c).map(|_| normal.sample(&mut rng)).collect();
        // coarse stage alone: the fine factor carries no loss
        coarse_worst = coarse_worst.max(highlighter_grad_error(&mut params, &emb, &w, &vec![0.0; c]));
        // fine stage alone, plus its path back through the coarse factor
        fine_worst = fine_worst.max(highlighter_grad_error(&mut params, &emb, &vec![0.0; c], &v));
        if trial == 0 {
            fine_worst = fine_worst.max(highlighter_grad_error(&mut params, &emb, &w, &v));
        }
    }
    let mut corr_worst = 0.0f64;
    for _ in 0..4 {
        let ch = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        corr_worst = corr_worst.max(correlation_grad_error(&mut rng, ch, h, w, kh, kw));
    }
    corr_worst = corr_worst.max(correlation_grad_error(&mut rng, 4, 5, 5, 1, 1));
    let worst = coarse_worst.max(fine_worst).max(corr_worst);
    Ok((
        worst <= GRADIENT_MAX_REL,
        format!("max rel error coarse {coarse_worst:.1e}, fine {fine_worst:.1e}, correlation {corr_worst:.1e}"),
    ))
}

fn small_fixture() -> Result<fsdet_core::fixtures::FixtureDataset> {
    render_fixture(&FixtureSpec {
        n_classes: 4,
        n_images: 60,
        image_size: 128,
        objects_per_image: (1, 3),
        seed: 3,
    })
}

fn criterion_3() -> Result<(bool, String)> {
    let fx = small_fixture()?;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let backbone = Backbone::new(&BackboneConfig::default(), &mut rng);
    let params = HighlighterParams::new(128, 128, &HighlighterConfig::default(), &mut rng);
    let mut problems = Vec::new();

    // coarse factors strictly inside (0,1), for real and random embeddings
    let mut n_factors = 0;
    let mut crops = Vec::new();
    for im in &fx.images[..12] {
        crops.extend(crop_supports(im).crops);
    }
    let normal = Normal::new(0.0, 3.0).unwrap();
    let mut embeddings: Vec<SupportEmbedding> = crops
        .iter()
        .map(|c| backbone.embed_support(c))
        .collect::<Result<_>>()?;
    for i in 0..50 {
        embeddings.push(SupportEmbedding {
            values: (0..128).map(|_| normal.sample(&mut rng)).collect(),
            class_id: ClassId(i % 4),
        });
    }
    for e in &embeddings {
        let f = coarse_highlight(e, &params)?;
        n_factors += 1;
        if !f.values.iter().all(|&v| v > 0.0 && v < 1.0) || f.values.len() != 128 {
            problems.push("coarse factor outside (0,1)".to_string());
            break;
        }
    }

    // every support crop is 224x224
    let mut n_crops = 0;
    for im in &fx.images {
        for c in crop_supports(im).crops {
            n_crops += 1;
            if c.patch.dimensions() != (224, 224) || c.class_id != im.labels[c.source.box_index] {
                problems.push(format!("bad crop from {}", c.source.image_id));
            }
        }
    }

    // one support per task class per episode
    let pool = TrainingSet::full(&fx.images, &fx.vocabulary.ids()).support_pool();
    let task: Vec<ClassId> = fx.vocabulary.ids().into_iter().collect();
    for (i, q) in fx.images.iter().enumerate() {
        let ep = build_episode(q, &pool, &task, i as u64)?;
        let ok = ep.supports.len() == task.len()
            && ep.supports.iter().all(|(c, s)| s.class_id == *c)
            && task.iter().all(|c| ep.supports.contains_key(c));
        if !ok {
            problems.push(format!("episode {i} does not hold one support per class"));
        }
    }

    // exactly k unmasked boxes per class
    for k in KS {
        for seed in 0..3 {
            let ks = sample_kshot(&fx.images, &task, k, seed)?;
            if ks.set.unmasked_counts().values().any(|&n| n != k) || ks.set.unmasked_counts().len() != task.len() {
                problems.push(format!("k={k} seed={seed}: counts {:?}", ks.set.unmasked_counts()));
            }
        }
    }
    Ok((
        problems.is_empty(),
        if problems.is_empty() {
            format!("{n_factors} factors, {n_crops} crops, {} episodes, 15 k-shot draws", fx.images.len())
        } else {
            problems.join("; ")
        },
    ))
}

fn sq(x: f64, y: f64, s: f64) -> BBox {
    BBox::new(x, y, x + s, y + s)
}

fn criterion_4() -> Result<(bool, String)> {
    let det = |id: &str, b: BBox, s: f64| ScoredBox {
        image_id: id.into(),
        bbox: b,
        score: s,
    };
    let gt = |id: &str, b: BBox| GtBox {
        image_id: id.into(),
        bbox: b,
    };
    let mut cases: Vec<(&str, Vec<ScoredBox>, Vec<GtBox>, f64)> = Vec::new();

    // TP, FP, TP, TP over 3 objects.
    // precision 1, 1/2, 2/3, 3/4 at recall 1/3, 1/3, 2/3, 1.
    // interpolated precision at each new recall: 1, 3/4, 3/4.
    cases.push((
        "tp-fp-tp-tp",
        vec![
            det("a", sq(0.0, 0.0, 10.0), 0.9),
            det("a", sq(50.0, 50.0, 10.0), 0.8),
            det("a", sq(20.0, 0.0, 10.0), 0.7),
            det("b", sq(0.0, 0.0, 10.0), 0.6),
        ],
        vec![gt("a", sq(0.0, 0.0, 10.0)), gt("a", sq(20.0, 0.0, 10.0)), gt("b", sq(0.0, 0.0, 10.0))],
        (1.0 + 0.75 + 0.75) / 3.0,
    ));
    // FP then TP over 2 objects: recall reaches 1/2 at precision 1/2.
    cases.push((
        "fp-tp",
        vec![det("a", sq(40.0, 40.0, 10.0), 0.9), det("a", sq(0.0, 0.0, 10.0), 0.5)],
        vec![gt("a", sq(0.0, 0.0, 10.0)), gt("b", sq(0.0, 0.0, 10.0))],
        0.25,
    ));
    // TP, TP, FP, FP, TP over 4 objects: 1/4·1 + 1/4·1 + 1/4·3/5.
    cases.push((
        "tp-tp-fp-fp-tp",
        vec![
            det("a", sq(0.0, 0.0, 10.0), 0.95),
            det("a", sq(20.0, 0.0, 10.0), 0.9),
            det("a", sq(60.0, 60.0, 10.0), 0.8),
            det("b", sq(60.0, 60.0, 10.0), 0.7),
            det("b", sq(0.0, 0.0, 10.0), 0.6),
        ],
        vec![
            gt("a", sq(0.0, 0.0, 10.0)),
            gt("a", sq(20.0, 0.0, 10.0)),
            gt("b", sq(0.0, 0.0, 10.0)),
            gt("b", sq(30.0, 30.0, 10.0)),
        ],
        0.25 + 0.25 + 0.25 * 0.6,
    ));
    // A duplicate of a matched box is a false positive after the only TP.
    cases.push((
        "duplicate",
        vec![det("a", sq(0.0, 0.0, 10.0), 0.9), det("a", sq(0.0, 0.0, 10.0), 0.8)],
        vec![gt("a", sq(0.0, 0.0, 10.0))],
        1.0,
    ));
    // Right box, wrong image: FP, TP, TP -> 1/2·2/3 + 1/2·2/3.
    cases.push((
        "wrong-image",
        vec![
            det("b", sq(50.0, 50.0, 10.0), 0.9),
            det("a", sq(0.0, 0.0, 10.0), 0.8),
            det("b", sq(0.0, 0.0, 10.0), 0.7),
        ],
        vec![gt("a", sq(0.0, 0.0, 10.0)), gt("b", sq(0.0, 0.0, 10.0))],
        2.0 / 3.0,
    ));
    // IoU 0.45 misses the threshold: FP, TP over 1 object -> 1·1/2.
    // [0,10]x[0,10] vs [0,10]x[0,4.5]: IoU = 45/100.
    cases.push((
        "below-threshold",
        vec![det("a", BBox::new(0.0, 0.0, 10.0, 4.5), 0.9), det("a", sq(0.0, 0.0, 10.0), 0.5)],
        vec![gt("a", sq(0.0, 0.0, 10.0))],
        0.5,
    ));
    // The second detection's best match is already taken, so it is an FP
    // even though it overlaps the other object above threshold:
    // TP, FP, TP over 2 objects -> 1/2·1 + 1/2·2/3.
    cases.push((
        "taken-best-match",
        vec![
            det("a", BBox::new(0.0, 0.0, 10.0, 10.0), 0.9),
            det("a", BBox::new(0.5, 0.0, 10.5, 10.0), 0.8),
            det("a", BBox::new(2.0, 0.0, 12.0, 10.0), 0.7),
        ],
        vec![gt("a", BBox::new(0.0, 0.0, 10.0, 10.0)), gt("a", BBox::new(2.0, 0.0, 12.0, 10.0))],
        0.5 + 0.5 * 2.0 / 3.0,
    ));

    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for (name, d, g, expected) in &cases {
        let ap = compute_ap(d, g, 0.5).unwrap_or(f64::NAN);
        let err = (ap - expected).abs();
        worst = worst.max(err);
        if !(err <= AP_TOL) {
            bad.push(format!("{name}: {ap} vs {expected}"));
        }
    }
    let objects = vec![gt("a", sq(0.0, 0.0, 10.0)), gt("b", sq(5.0, 5.0, 20.0)), gt("b", sq(40.0, 40.0, 8.0))];
    let perfect: Vec<ScoredBox> = objects.iter().map(|g| det(&g.image_id, g.bbox, 1.0)).collect();
    let p = compute_ap(&perfect, &objects, 0.5);
    let e = compute_ap(&[], &objects, 0.5);
    if p != Some(1.0) {
        bad.push(format!("perfect detector AP {p:?}"));
    }
    if e != Some(0.0) {
        bad.push(format!("empty detector AP {e:?}"));
    }
    Ok((
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} scenarios, max error {worst:.1e}; perfect = 1, empty = 0", cases.len())
        } else {
            bad.join("; ")
        },
    ))
}

fn pooled(f: &Tensor3) -> Vec<f64> {
    f.global_average()
}

fn criterion_5() -> Result<(bool, String)> {
    let fx = small_fixture()?;
    let crop = crop_supports(&fx.images[0]).crops.remove(0);
    let query = &fx.images[1].pixels;
    let vocab: Vec<String> = fx.vocabulary.names().to_vec();
    let mut model = FsDetector::new(&ModelConfig::default(), &vocab, 5);

    let e0 = model.backbone().embed_support(&crop)?;
    let f0 = model.general_features(query)?;
    let g0 = pooled(&model.general_features(&crop.patch)?.values);
    let same_before = e0.values == g0;

    // perturb every backbone parameter as a training step would
    for (_, p) in model.backbone_mut().named_params_mut() {
        for (i, v) in p.value.iter_mut().enumerate() {
            *v += 1e-2 * ((i % 7) as f64 - 3.0);
        }
    }
    let e1 = model.backbone().embed_support(&crop)?;
    let f1 = model.general_features(query)?;
    let g1 = pooled(&model.general_features(&crop.patch)?.values);
    let same_after = e1.values == g1;
    let both_moved = e1.values != e0.values && f1.values != f0.values;

    // the support path owns no parameter: the model is exactly backbone +
    // highlighter + RPN + RoI head, with no name outside those groups
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let groups = ["backbone.", "highlighter.", "rpn.", "roi."];
    let stray: Vec<&String> = names.iter().filter(|n| !groups.iter().any(|g| n.starts_with(g))).collect();
    let backbone_count = model.backbone().param_count();
    let highlight_count = model.highlighter().map(|h| h.param_count()).unwrap_or(0);
    let baseline = FsDetector::new(&ModelConfig::baseline(), &vocab, 5);
    // the baseline differs only by the highlighter and its (multi-class) head
    let head_delta = (vocab.len() - 1) * (128 + 1);
    let support_extra =
        model.param_count() as i64 - baseline.param_count() as i64 - highlight_count as i64 + head_delta as i64;

    let ok = same_before && same_after && both_moved && stray.is_empty() && support_extra == 0;
    Ok((
        ok,
        format!(
            "embedding == pooled features before/after: {same_before}/{same_after}; both outputs changed: {both_moved}; \
             backbone params {backbone_count}; support-path extra params {support_extra}"
        ),
    ))
}

/// Trained models and benchmark grids shared by criteria 6 and 7.
struct Experiments {
    grids: BTreeMap<u64, BenchmarkGrid>,
    criterion6_time: Duration,
}

fn fixture_on_disk(dir: &Path) -> Result<(Vocabulary, Vec<AnnotatedImage>)> {
    let spec = FixtureSpec {
        n_classes: 4,
        n_images: 160,
        image_size: 128,
        objects_per_image: (1, 3),
        seed: 1,
    };
    generate_fixture(&spec, dir)?;
    let ds = parse_annotations(dir)?;
    assert!(ds.failures.is_empty(), "fixture parse failures: {:?}", ds.failures);
    Ok((ds.vocabulary, ds.images))
}

fn run_experiments(dir: &Path) -> Result<Experiments> {
    let (vocabulary, images) = fixture_on_disk(dir)?;
    let vocab: Vec<String> = vocabulary.names().to_vec();
    let (train, test) = partition_train_test(&images, 0.6, 0)?;
    let split = make_split(&vocabulary.ids(), vocabulary.id_of("oiltank").expect("fixture class"))?;
    let all: Vec<ClassId> = split.all_classes().into_iter().collect();
    let clock = Instant::now();

    let mut base_cfg = TrainConfig::base(Mode::Ours, 0);
    base_cfg.iterations = BASE_ITERATIONS;
    base_cfg.learning_rate = LEARNING_RATE;
    let mut base_model = FsDetector::new(&ModelConfig::default(), &vocab, 0);
    train_base(&mut base_model, &base_training_set(&train, &split), &base_cfg, None)?;
    let base_time = clock.elapsed();

    let finetune_cfg = |mode: Mode, k: usize, seed: u64| {
        let mut c = TrainConfig::finetune(mode, k, seed);
        c.iterations = FINETUNE_ITERATIONS;
        c.learning_rate = LEARNING_RATE;
        c
    };
    let mut cell_time: BTreeMap<(Mode, u64, usize), Duration> = BTreeMap::new();
    let mut grids = BTreeMap::new();
    for seed in SEEDS {
        let bench = [BenchmarkSplit {
            id: 0,
            split: split.clone(),
            test: &test,
        }];
        let modes: &[Mode] = if seed == 0 { &[Mode::Ours, Mode::FrcnFew] } else { &[Mode::Ours] };
        let grid = run_benchmark(
            |key: &CellKey, split: &ClassSplit| {
                let t = Instant::now();
                let kshot_seed = 1000 * seed + key.k as u64;
                let model = match key.mode {
                    Mode::Ours => {
                        let mut m = base_model.clone();
                        let ks = sample_kshot(&train, &all, key.k, kshot_seed)?;
                        finetune_novel(&mut m, &ks, &finetune_cfg(Mode::Ours, key.k, seed), None)?;
                        m
                    }
                    mode => {
                        // the single-phase baseline gets the same total
                        // iteration budget as both phases of ours
                        let mut single = finetune_cfg(mode, key.k, seed);
                        single.iterations = BASE_ITERATIONS + FINETUNE_ITERATIONS;
                        let cfg = BaselineConfig {
                            model: ModelConfig::baseline(),
                            base: TrainConfig { k: None, ..TrainConfig::base(mode, seed) },
                            finetune: single,
                            kshot_seed,
                            init_seed: 0,
                            checkpoint_dir: None,
                        };
                        let data = BaselineData {
                            images: &train,
                            split,
                            vocabulary: &vocab,
                        };
                        run_baseline(mode, &data, &cfg)?.model
                    }
                };
                cell_time.insert((key.mode, seed, key.k), t.elapsed());
                Ok(model)
            },
            &bench,
            &KS,
            modes,
        );
        grids.insert(seed, grid);
    }
    let criterion6_time = base_time
        + [(Mode::Ours, 0, 10), (Mode::Ours, 0, 1), (Mode::FrcnFew, 0, 1)]
            .iter()
            .map(|k| cell_time.get(k).copied().unwrap_or_default())
            .sum::<Duration>();
    Ok(Experiments { grids, criterion6_time })
}

fn novel(grid: &BenchmarkGrid, mode: Mode, k: usize) -> Option<f64> {
    grid.novel_ap(&CellKey { mode, split_id: 0, k })
}

fn criterion_6(ex: &Experiments) -> Result<(bool, String)> {
    let g = &ex.grids[&0];
    let (Some(k10), Some(ours1), Some(few1)) = (
        novel(g, Mode::Ours, 10),
        novel(g, Mode::Ours, 1),
        novel(g, Mode::FrcnFew, 1),
    ) else {
        let failed: Vec<String> = g
            .cells
            .iter()
            .filter_map(|c| c.result.as_ref().err().map(|e| format!("{:?}: {e}", c.key)))
            .collect();
        return Ok((false, format!("missing cells: {}", failed.join("; "))));
    };
    let ok = k10 >= NOVEL_AP_K10_MIN && ours1 >= few1 && ex.criterion6_time <= BENCHMARK_BUDGET;
    Ok((
        ok,
        format!(
            "novel AP k=10 {k10:.3} (>= {NOVEL_AP_K10_MIN}); k=1 ours {ours1:.3} vs frcn_few {few1:.3}; {:.0}s",
            ex.criterion6_time.as_secs_f64()
        ),
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion_7(ex: &Experiments) -> Result<(bool, String)> {
    let mut medians = Vec::new();
    for k in KS {
        let values: Option<Vec<f64>> = SEEDS.iter().map(|s| novel(&ex.grids[s], Mode::Ours, k)).collect();
        let Some(values) = values else {
            return Ok((false, format!("a k={k} cell failed")));
        };
        medians.push(median(values));
    }
    let inversions = medians.windows(2).filter(|w| w[1] < w[0]).count();
    let shown: Vec<String> = KS.iter().zip(&medians).map(|(k, m)| format!("k{k}={m:.3}")).collect();
    Ok((
        inversions <= MAX_INVERSIONS,
        format!("median novel AP {}; {inversions} inversion(s)", shown.join(" ")),
    ))
}

fn random_detections(rng: &mut ChaCha8Rng, classes: usize, per_class: usize) -> BTreeMap<ClassId, Vec<Detection>> {
    let mut out = BTreeMap::new();
    for c in 0..classes {
        let v = (0..per_class)
            .map(|_| {
                let x = rng.random_range(0.0..40.0);
                let y = rng.random_range(0.0..40.0);
                let s = rng.random_range(5.0..20.0);
                Detection {
                    bbox: BBox::new(x, y, x + s, y + s * rng.random_range(0.5..1.5)),
                    // coarse scores so ties occur
                    score: (rng.random_range(1..=10) as f64) / 10.0,
                    class_id: ClassId(c),
                }
            })
            .collect();
        out.insert(ClassId(c), v);
    }
    out
}

fn criterion_8() -> Result<(bool, String)> {
    let mut problems = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for trial in 0..200 {
        let (classes, per_class) = (rng.random_range(1..=4), rng.random_range(0..=8));
        let per = random_detections(&mut rng, classes, per_class);
        let once = fuse_results(&per, 0.5);
        let mut regrouped: BTreeMap<ClassId, Vec<Detection>> = BTreeMap::new();
        for d in &once {
            regrouped.entry(d.class_id).or_default().push(*d);
        }
        if fuse_results(&regrouped, 0.5) != once {
            problems.push(format!("fusion not idempotent in trial {trial}"));
            break;
        }
        for (i, a) in once.iter().enumerate() {
            if once[i + 1..].iter().any(|b| a.bbox.iou(&b.bbox) > 0.5) {
                problems.push(format!("overlapping survivors in trial {trial}"));
            }
        }
        let flat: Vec<BBox> = per.values().flatten().map(|d| d.bbox).collect();
        let scores: Vec<f64> = per.values().flatten().map(|d| d.score).collect();
        let kept = nms(&flat, &scores, 0.5);
        let again: Vec<BBox> = kept.iter().map(|&i| flat[i]).collect();
        let again_scores: Vec<f64> = kept.iter().map(|&i| scores[i]).collect();
        if nms(&again, &again_scores, 0.5).len() != again.len() {
            problems.push(format!("nms not idempotent in trial {trial}"));
        }
    }

    // dominance: identical boxes, class 0 at 0.9 and class 1 at 0.4
    let b = sq(10.0, 10.0, 20.0);
    let d = |c: usize, s: f64, bbox: BBox| Detection {
        bbox,
        score: s,
        class_id: ClassId(c),
    };
    let per = BTreeMap::from([(ClassId(0), vec![d(0, 0.9, b)]), (ClassId(1), vec![d(1, 0.4, b)])]);
    if fuse_results(&per, 0.5) != vec![d(0, 0.9, b)] {
        problems.push("dominance".into());
    }

    // hand trace, threshold 0.5:
    //   A = [0,0,10,10] 0.9 (class 0), B = [3,0,13,10] 0.8 (class 1),
    //   C = [6,0,16,10] 0.7 (class 2)
    //   IoU(A,B) = 70/130 = 0.538 > 0.5, IoU(B,C) = 0.538, IoU(A,C) = 40/160 = 0.25
    //   visit A: keep. visit B: overlaps A above 0.5, drop.
    //   visit C: only A is kept, 0.25 <= 0.5, keep.  -> [A, C]
    let a_ = d(0, 0.9, BBox::new(0.0, 0.0, 10.0, 10.0));
    let b_ = d(1, 0.8, BBox::new(3.0, 0.0, 13.0, 10.0));
    let c_ = d(2, 0.7, BBox::new(6.0, 0.0, 16.0, 10.0));
    let per = BTreeMap::from([(ClassId(0), vec![a_]), (ClassId(1), vec![b_]), (ClassId(2), vec![c_])]);
    if fuse_results(&per, 0.5) != vec![a_, c_] {
        problems.push("fusion hand trace".into());
    }
    if nms(&[a_.bbox, b_.bbox, c_.bbox], &[0.9, 0.8, 0.7], 0.5) != vec![0, 2] {
        problems.push("nms hand trace".into());
    }
    // ties broken by lower class id
    let per = BTreeMap::from([(ClassId(3), vec![d(3, 0.6, b)]), (ClassId(1), vec![d(1, 0.6, b)])]);
    if fuse_results(&per, 0.5) != vec![d(1, 0.6, b)] {
        problems.push("tie-break".into());
    }
    Ok((
        problems.is_empty(),
        if problems.is_empty() {
            "200 random idempotence trials, dominance, hand trace, tie-break".to_string()
        } else {
            problems.join("; ")
        },
    ))
}

/// A short prepare → train → evaluate cycle writing every artifact.
fn determinism_run(out: &Path) -> Result<()> {
    let fx = render_fixture(&FixtureSpec {
        n_classes: 3,
        n_images: 30,
        image_size: 96,
        objects_per_image: (1, 2),
        seed: 9,
    })?;
    let vocab: Vec<String> = fx.vocabulary.names().to_vec();
    let (train, test) = partition_train_test(&fx.images, 0.6, 4)?;
    let split = make_split(&fx.vocabulary.ids(), ClassId(2))?;
    let manifest = SplitManifest::build(&fx.vocabulary, &split, &train, &test, 0.6, 4);
    std::fs::write(out.join("split.json"), serde_json::to_string_pretty(&manifest)?)?;
    let all: Vec<ClassId> = split.all_classes().into_iter().collect();
    let ks = sample_kshot(&train, &all, 2, 11)?;
    std::fs::write(
        out.join("kshot.json"),
        serde_json::to_string_pretty(&ks.manifest(&fx.vocabulary))?,
    )?;

    let mut model = FsDetector::new(&ModelConfig::default(), &vocab, 21);
    let mut cfg = TrainConfig::base(Mode::Ours, 5);
    cfg.iterations = 12;
    cfg.learning_rate = LEARNING_RATE;
    let mut history: Vec<LossRecord> = train_base(&mut model, &base_training_set(&train, &split), &cfg, None)?;
    let mut ft = TrainConfig::finetune(Mode::Ours, 2, 6);
    ft.iterations = 8;
    ft.learning_rate = LEARNING_RATE;
    history.extend(finetune_novel(&mut model, &ks, &ft, None)?);
    write_loss_csv(&out.join("loss.csv"), &history)?;

    let bench = [BenchmarkSplit {
        id: 0,
        split: split.clone(),
        test: &test,
    }];
    let grid = run_benchmark(|_, _| Ok(model.clone()), &bench, &[2], &[Mode::Ours]);
    grid.write_results_csv(&out.join("results.csv"), &vocab)?;
    Ok(())
}

fn criterion_9() -> Result<(bool, String)> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    determinism_run(a.path())?;
    determinism_run(b.path())?;
    let mut differing = Vec::new();
    for name in ["split.json", "kshot.json", "loss.csv", "results.csv"] {
        let x = std::fs::read(a.path().join(name))?;
        let y = std::fs::read(b.path().join(name))?;
        if x != y || x.is_empty() {
            differing.push(name);
        }
    }
    Ok((
        differing.is_empty(),
        if differing.is_empty() {
            "manifests, loss curve and results.csv byte-identical across two runs".to_string()
        } else {
            format!("differs: {}", differing.join(", "))
        },
    ))
}

fn main() {
    // the libtest harness is off for this target; honour `--list` so
    // tooling that enumerates tests does not trigger the full run
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut outcomes = vec![
        report(1, "correlation matches brute force", criterion_1()),
        report(2, "analytic gradients match finite differences", criterion_2()),
        report(3, "factor range, crop shape, episode and k-shot structure", criterion_3()),
        report(4, "AP matches hand-computed PR integrals", criterion_4()),
        report(5, "backbone weights are shared by both paths", criterion_5()),
        report(8, "NMS and fusion properties", criterion_8()),
        report(9, "fixed seeds give byte-identical artifacts", criterion_9()),
    ];
    let dir = tempfile::tempdir().expect("tempdir");
    match run_experiments(dir.path()) {
        Ok(ex) => {
            outcomes.push(report(6, "fixture benchmark: novel AP and baseline ordering", criterion_6(&ex)));
            outcomes.push(report(7, "novel AP trend over k", criterion_7(&ex)));
        }
        Err(e) => {
            let msg = e.to_string();
            outcomes.push(report(6, "fixture benchmark: novel AP and baseline ordering", Err(e)));
            outcomes.push(report(7, "novel AP trend over k", Ok((false, format!("experiments failed: {msg}")))));
        }
    }
    outcomes.sort_by_key(|o| o.id);
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.passed).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if !failed.is_empty() {
        for o in &failed {
            eprintln!("failed: criterion {} ({}): {}", o.id, o.title, o.detail);
        }
        std::process::exit(1);
    }
}
