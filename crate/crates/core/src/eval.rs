//! Average precision, benchmark grids and bar-chart output.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::dataset::{AnnotatedImage, ClassSplit};
use crate::detector::Detection;
use crate::model::FsDetector;
use crate::trainer::Mode;
use crate::{ClassId, Error, Result};

pub const AP_VARIANT: &str = "voc_all_points";
pub const EVAL_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image_id: String,
    pub bbox: BBox,
}

/// Matching order: descending score, then box lexicographic, then image id.
fn match_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.lexicographic_cmp(&b.bbox))
        .then_with(|| a.image_id.cmp(&b.image_id))
}

/// True/false-positive flag of each detection, in matching order. A
/// detection takes its highest-IoU ground truth in the same image; if that
/// box is already taken or the IoU is below threshold it is a false positive.
pub fn match_detections(detections: &[ScoredBox], ground_truth: &[GtBox], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<&ScoredBox> = detections.iter().collect();
    order.sort_by(|a, b| match_order(a, b));
    let mut by_image: BTreeMap<&str, Vec<(BBox, bool)>> = BTreeMap::new();
    for g in ground_truth {
        by_image.entry(g.image_id.as_str()).or_default().push((g.bbox, false));
    }
    order
        .iter()
        .map(|d| {
            let Some(gts) = by_image.get_mut(d.image_id.as_str()) else {
                return false;
            };
            let mut best = (-1.0, usize::MAX);
            for (j, (g, _)) in gts.iter().enumerate() {
                let iou = d.bbox.iou(g);
                if iou > best.0 {
                    best = (iou, j);
                }
            }
            if best.1 != usize::MAX && best.0 >= iou_thresh && !gts[best.1].1 {
                gts[best.1].1 = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Area under the interpolated precision-recall curve (all points).
pub fn ap_from_flags(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

/// VOC-style AP of one class; `None` when there is no ground truth.
pub fn compute_ap(detections: &[ScoredBox], ground_truth: &[GtBox], iou_thresh: f64) -> Option<f64> {
    let flags = match_detections(detections, ground_truth, iou_thresh);
    ap_from_flags(&flags, ground_truth.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Classes without test ground truth are absent.
    pub per_class_ap: BTreeMap<ClassId, f64>,
    pub novel_ap: f64,
    pub split_id: usize,
    pub k: usize,
    pub mode: Mode,
}

/// Fused detections of `model` on every image.
pub fn detect_all(model: &FsDetector, images: &[AnnotatedImage]) -> Result<Vec<(String, Vec<Detection>)>> {
    images
        .iter()
        .map(|im| Ok((im.image_id.clone(), model.detect(&im.pixels)?)))
        .collect()
}

/// Per-class AP over `classes` from precomputed detections.
pub fn per_class_ap(
    detections: &[(String, Vec<Detection>)],
    images: &[AnnotatedImage],
    classes: &[ClassId],
    iou_thresh: f64,
) -> BTreeMap<ClassId, f64> {
    let mut out = BTreeMap::new();
    for &c in classes {
        let dets: Vec<ScoredBox> = detections
            .iter()
            .flat_map(|(id, ds)| {
                ds.iter().filter(|d| d.class_id == c).map(move |d| ScoredBox {
                    image_id: id.clone(),
                    bbox: d.bbox,
                    score: d.score,
                })
            })
            .collect();
        let gts: Vec<GtBox> = images
            .iter()
            .flat_map(|im| {
                im.boxes
                    .iter()
                    .zip(&im.labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(b, _)| GtBox {
                        image_id: im.image_id.clone(),
                        bbox: *b,
                    })
            })
            .collect();
        if let Some(ap) = compute_ap(&dets, &gts, iou_thresh) {
            out.insert(c, ap);
        }
    }
    out
}

/// Runs `model` over the test images and scores every split class.
pub fn evaluate(
    model: &FsDetector,
    test: &[AnnotatedImage],
    split: &ClassSplit,
    split_id: usize,
    k: usize,
    mode: Mode,
) -> Result<EvalResult> {
    let detections = detect_all(model, test)?;
    let classes: Vec<ClassId> = split.all_classes().into_iter().collect();
    let per_class_ap = per_class_ap(&detections, test, &classes, EVAL_IOU);
    let novel: Vec<f64> = split
        .novel_classes
        .iter()
        .filter_map(|c| per_class_ap.get(c).copied())
        .collect();
    if novel.len() != split.novel_classes.len() {
        return Err(Error::Domain("test images hold no ground truth for a novel class".into()));
    }
    Ok(EvalResult {
        per_class_ap,
        novel_ap: novel.iter().sum::<f64>() / novel.len() as f64,
        split_id,
        k,
        mode,
    })
}

/// Writes detections as JSON lines `{image_id, class_name, score, box}`.
pub fn write_detections_jsonl(path: &Path, detections: &[(String, Vec<Detection>)], vocabulary: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (id, ds) in detections {
        for d in ds {
            let line = serde_json::json!({
                "image_id": id,
                "class_name": vocabulary.get(d.class_id.index()).map(String::as_str).unwrap_or("?"),
                "score": d.score,
                "box": d.bbox.as_array(),
            });
            writeln!(f, "{line}")?;
        }
    }
    f.flush()?;
    Ok(())
}

/// A split to benchmark and the test images to score it on.
#[derive(Debug, Clone)]
pub struct BenchmarkSplit<'a> {
    pub id: usize,
    pub split: ClassSplit,
    pub test: &'a [AnnotatedImage],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub mode: Mode,
    pub split_id: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub key: CellKey,
    pub result: std::result::Result<EvalResult, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkGrid {
    pub cells: Vec<Cell>,
}

/// Evaluates one model per (mode, split, k). A factory failure marks the
/// cell failed and the sweep continues.
pub fn run_benchmark<F>(mut model_factory: F, splits: &[BenchmarkSplit<'_>], ks: &[usize], modes: &[Mode]) -> BenchmarkGrid
where
    F: FnMut(&CellKey, &ClassSplit) -> Result<FsDetector>,
{
    let mut cells = Vec::new();
    for &mode in modes {
        for s in splits {
            for &k in ks {
                let key = CellKey { mode, split_id: s.id, k };
                let result = model_factory(&key, &s.split)
                    .and_then(|m| evaluate(&m, s.test, &s.split, s.id, k, mode))
                    .map_err(|e| {
                        log::warn!("cell {mode}/split{}/k{k} failed: {e}", s.id);
                        e.to_string()
                    });
                cells.push(Cell { key, result });
            }
        }
    }
    BenchmarkGrid { cells }
}

impl BenchmarkGrid {
    pub fn get(&self, key: &CellKey) -> Option<&Cell> {
        self.cells.iter().find(|c| c.key == *key)
    }

    pub fn novel_ap(&self, key: &CellKey) -> Option<f64> {
        self.get(key).and_then(|c| c.result.as_ref().ok()).map(|r| r.novel_ap)
    }

    fn axes(&self) -> (Vec<Mode>, Vec<usize>, Vec<usize>) {
        let mut modes: Vec<Mode> = self.cells.iter().map(|c| c.key.mode).collect();
        let mut splits: Vec<usize> = self.cells.iter().map(|c| c.key.split_id).collect();
        let mut ks: Vec<usize> = self.cells.iter().map(|c| c.key.k).collect();
        for v in [&mut splits, &mut ks] {
            v.sort_unstable();
            v.dedup();
        }
        modes.sort_unstable();
        modes.dedup();
        (modes, splits, ks)
    }

    /// `mode,split,k,class,ap`, one row per class per successful cell.
    pub fn write_results_csv(&self, path: &Path, vocabulary: &[String]) -> Result<()> {
        let mut f = std::io::BufWriter::new(create(path)?);
        writeln!(f, "mode,split,k,class,ap")?;
        for c in &self.cells {
            if let Ok(r) = &c.result {
                for (cls, ap) in &r.per_class_ap {
                    let name = vocabulary.get(cls.index()).cloned().unwrap_or_else(|| cls.to_string());
                    writeln!(f, "{},{},{},{},{}", c.key.mode, c.key.split_id, c.key.k, name, ap)?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Novel AP with rows = modes and columns = split × k; failed cells
    /// read `failed`, missing ones are empty.
    pub fn write_table_csv(&self, path: &Path) -> Result<()> {
        let (modes, splits, ks) = self.axes();
        let mut f = std::io::BufWriter::new(create(path)?);
        let mut header = vec!["mode".to_string()];
        for s in &splits {
            for k in &ks {
                header.push(format!("split{s}_k{k}"));
            }
        }
        writeln!(f, "{}", header.join(","))?;
        for m in modes {
            let mut row = vec![m.to_string()];
            for &s in &splits {
                for &k in &ks {
                    row.push(match self.get(&CellKey { mode: m, split_id: s, k }) {
                        Some(Cell { result: Ok(r), .. }) => r.novel_ap.to_string(),
                        Some(_) => "failed".into(),
                        None => String::new(),
                    });
                }
            }
            writeln!(f, "{}", row.join(","))?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let cells: Vec<serde_json::Value> = self
            .cells
            .iter()
            .map(|c| {
                let (status, ap, err) = match &c.result {
                    Ok(r) => ("ok", Some(r.novel_ap), None),
                    Err(e) => ("failed", None, Some(e.clone())),
                };
                serde_json::json!({
                    "mode": c.key.mode,
                    "split": c.key.split_id,
                    "k": c.key.k,
                    "status": status,
                    "novel_ap": ap,
                    "error": err,
                })
            })
            .collect();
        let doc = serde_json::json!({
            "ap_variant": AP_VARIANT,
            "iou_threshold": EVAL_IOU,
            "cells": cells,
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(std::fs::File::create(path)?)
}

const PALETTE: [[u8; 3]; 4] = [[214, 39, 40], [31, 119, 180], [44, 160, 44], [255, 127, 14]];

// 3×5 bitmap glyphs, rows top to bottom, `#` = ink.
fn glyph(ch: char) -> Option<[&'static str; 5]> {
    Some(match ch {
        '0' => ["###", "#.#", "#.#", "#.#", "###"],
        '1' => [".#.", "##.", ".#.", ".#.", "###"],
        '2' => ["###", "..#", "###", "#..", "###"],
        '3' => ["###", "..#", "###", "..#", "###"],
        '4' => ["#.#", "#.#", "###", "..#", "..#"],
        '5' => ["###", "#..", "###", "..#", "###"],
        '6' => ["###", "#..", "###", "#.#", "###"],
        '7' => ["###", "..#", ".#.", ".#.", ".#."],
        '8' => ["###", "#.#", "###", "#.#", "###"],
        '9' => ["###", "#.#", "###", "..#", "###"],
        '.' => ["...", "...", "...", "...", ".#."],
        '=' => ["...", "###", "...", "###", "..."],
        '_' => ["...", "...", "...", "...", "###"],
        'a' => ["...", "##.", "..#", "###", "###"],
        'c' => ["...", "###", "#..", "#..", "###"],
        'e' => ["###", "#.#", "###", "#..", "###"],
        'f' => [".##", "#..", "###", "#..", "#.."],
        'i' => [".#.", "...", ".#.", ".#.", ".#."],
        'j' => ["..#", "...", "..#", "#.#", "###"],
        'k' => ["#..", "#.#", "##.", "#.#", "#.#"],
        'l' => ["#..", "#..", "#..", "#..", "###"],
        'n' => ["...", "##.", "#.#", "#.#", "#.#"],
        'o' => ["...", "###", "#.#", "#.#", "###"],
        'p' => ["...", "###", "#.#", "###", "#.."],
        'r' => ["...", "###", "#..", "#..", "#.."],
        's' => ["...", "###", "##.", "..#", "###"],
        't' => [".#.", "###", ".#.", ".#.", ".##"],
        'u' => ["...", "#.#", "#.#", "#.#", "###"],
        'w' => ["...", "#.#", "#.#", "###", "###"],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: i64, color: Rgb<u8>) {
    for (n, ch) in text.chars().enumerate() {
        let Some(g) = glyph(ch) else { continue };
        for (r, row) in g.iter().enumerate() {
            for (c, px) in row.chars().enumerate() {
                if px == '#' {
                    let x0 = x + (n as i64 * 4 + c as i64) * scale;
                    let y0 = y + r as i64 * scale;
                    fill_rect(img, x0, y0, x0 + scale, y0 + scale, color);
                }
            }
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Grouped bar chart per split (x = k, bars = modes), each as PNG plus the
/// CSV it was drawn from (`k,mode,novel_ap`). Returns the PNG paths.
pub fn plot_results(grid: &BenchmarkGrid, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if grid.cells.is_empty() {
        log::warn!("empty benchmark grid; nothing to plot");
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir)?;
    let (modes, splits, ks) = grid.axes();
    let mut written = Vec::new();
    for s in splits {
        let mut csv = String::from("k,mode,novel_ap\n");
        let (width, height) = (120 + 90 * ks.len() as i64 * modes.len().max(1) as i64 / 2 + 60, 360i64);
        let mut img = RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));
        let (left, right, top, bottom) = (50i64, width - 20, 40i64, height - 50);
        let grey = Rgb([210, 210, 210]);
        let black = Rgb([0, 0, 0]);
        for t in 0..=4 {
            let y = bottom - (bottom - top) * t / 4;
            fill_rect(&mut img, left, y, right, y + 1, grey);
            draw_text(&mut img, 8, y - 5, &format!("{:.2}", t as f64 / 4.0), 2, black);
        }
        fill_rect(&mut img, left, top, left + 2, bottom + 1, black);
        fill_rect(&mut img, left, bottom, right, bottom + 2, black);
        let group_w = (right - left) / ks.len() as i64;
        let bar_w = ((group_w - 16) / modes.len() as i64).max(2);
        for (gi, &k) in ks.iter().enumerate() {
            let gx = left + gi as i64 * group_w + 8;
            for (mi, &m) in modes.iter().enumerate() {
                let key = CellKey { mode: m, split_id: s, k };
                let Some(cell) = grid.get(&key) else { continue };
                let Ok(r) = &cell.result else {
                    csv.push_str(&format!("{k},{m},failed\n"));
                    continue;
                };
                csv.push_str(&format!("{k},{m},{}\n", r.novel_ap));
                let hgt = ((bottom - top) as f64 * r.novel_ap.clamp(0.0, 1.0)).round() as i64;
                let x = gx + mi as i64 * bar_w;
                fill_rect(&mut img, x, bottom - hgt, x + bar_w - 1, bottom, Rgb(PALETTE[mi % PALETTE.len()]));
            }
            draw_text(&mut img, gx + group_w / 2 - 20, bottom + 10, &format!("k={k}"), 2, black);
        }
        let mut lx = left + 10;
        for (mi, m) in modes.iter().enumerate() {
            fill_rect(&mut img, lx, 12, lx + 10, 22, Rgb(PALETTE[mi % PALETTE.len()]));
            draw_text(&mut img, lx + 14, 10, m.as_str(), 2, black);
            lx += 14 + 8 * m.as_str().len() as i64 + 16;
        }
        draw_text(&mut img, right - 60, bottom + 30, &format!("split{s}"), 2, black);
        let png = out_dir.join(format!("split{s}.png"));
        img.save(&png)?;
        std::fs::write(out_dir.join(format!("split{s}.csv")), csv)?;
        written.push(png);
    }
    Ok(written)
}

/// Reads a chart CSV back as `(k, mode) → novel AP`.
pub fn read_plot_csv(path: &Path) -> Result<BTreeMap<(usize, Mode), f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: `{line}`", n + 1),
        };
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        if parts[2] == "failed" {
            continue;
        }
        let k: usize = parts[0].parse().map_err(|_| bad())?;
        let m: Mode = parts[1].parse()?;
        let ap: f64 = parts[2].parse().map_err(|_| bad())?;
        out.insert((k, m), ap);
    }
    Ok(out)
}
