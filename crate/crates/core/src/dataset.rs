//! Dataset ingest: Pascal-VOC parsing, base/novel class splits, train/test
//! partitions and support-crop extraction.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/images/<file>.png|jpg
//! <root>/annotations/<image_id>.xml
//! <root>/manifest.json          (optional; "classes" pins the vocabulary)
//! ```
//!
//! VOC coordinates are 1-based and inclusive; they are converted to
//! continuous pixel coordinates `[xmin - 1, xmax]` and clamped to the image.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::{ClassId, Error, Result};

/// Side length of every support crop.
pub const SUPPORT_SIZE: u32 = 224;

/// Minimum crop extent in pixels (after clamping) for a support crop.
pub const MIN_CROP_EXTENT: u32 = 2;

/// Class names indexed by [`ClassId`], sorted alphabetically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = names.into_iter().map(Into::into).collect();
        Self {
            names: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .ok()
            .map(ClassId)
    }

    pub fn name_of(&self, id: ClassId) -> Option<&str> {
        self.names.get(id.0).map(String::as_str)
    }

    pub fn ids(&self) -> BTreeSet<ClassId> {
        (0..self.names.len()).map(ClassId).collect()
    }

    pub(crate) fn names_of<'a>(&self, ids: impl IntoIterator<Item = &'a ClassId>) -> Vec<String> {
        ids.into_iter()
            .filter_map(|&c| self.name_of(c).map(str::to_string))
            .collect()
    }
}

/// An image with its ground-truth boxes and parallel class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub pixels: RgbImage,
    pub boxes: Vec<BBox>,
    pub labels: Vec<ClassId>,
}

impl AnnotatedImage {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// Checks box bounds, label/box parity and label membership.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::Domain(format!(
                "{}: {} boxes but {} labels",
                self.image_id,
                self.boxes.len(),
                self.labels.len()
            )));
        }
        let (w, h) = (f64::from(self.width()), f64::from(self.height()));
        for (i, b) in self.boxes.iter().enumerate() {
            let ok = 0.0 <= b.x1 && b.x1 < b.x2 && b.x2 <= w && 0.0 <= b.y1 && b.y1 < b.y2 && b.y2 <= h;
            if !ok {
                return Err(Error::Domain(format!(
                    "{}: box {i} {:?} outside {w}x{h}",
                    self.image_id,
                    b.as_array()
                )));
            }
        }
        if let Some(l) = self.labels.iter().find(|l| l.0 >= n_classes) {
            return Err(Error::Domain(format!(
                "{}: label {l} outside vocabulary of {n_classes}",
                self.image_id
            )));
        }
        Ok(())
    }

    /// Copy keeping only the boxes whose label is in `classes`.
    pub fn restricted_to(&self, classes: &BTreeSet<ClassId>) -> AnnotatedImage {
        let (boxes, labels) = self
            .boxes
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| classes.contains(l))
            .map(|(b, l)| (*b, *l))
            .unzip();
        AnnotatedImage {
            image_id: self.image_id.clone(),
            pixels: self.pixels.clone(),
            boxes,
            labels,
        }
    }
}

/// A parsed dataset. `failures` holds per-file problems (malformed XML,
/// missing images) that did not stop the rest of the ingest.
#[derive(Debug)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub images: Vec<AnnotatedImage>,
    pub failures: Vec<Error>,
}

impl Dataset {
    pub fn image(&self, image_id: &str) -> Option<&AnnotatedImage> {
        self.images.iter().find(|im| im.image_id == image_id)
    }
}

#[derive(Debug, Deserialize)]
struct ManifestClasses {
    classes: Vec<String>,
}

struct RawObject {
    name: String,
    coords: [f64; 4],
}

struct RawAnnotation {
    xml_path: PathBuf,
    image_id: String,
    filename: String,
    objects: Vec<RawObject>,
}

fn parse_voc(xml_path: &Path) -> Result<RawAnnotation> {
    let parse_err = |message: String| Error::Parse {
        path: xml_path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(xml_path)?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| parse_err(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "annotation" {
        return Err(parse_err(format!(
            "root element is <{}>, expected <annotation>",
            root.tag_name().name()
        )));
    }
    let child_text = |node: roxmltree::Node, tag: &str| -> Option<String> {
        node.children()
            .find(|n| n.has_tag_name(tag))
            .and_then(|n| n.text())
            .map(|t| t.trim().to_string())
    };
    let filename = child_text(root, "filename").ok_or_else(|| parse_err("missing <filename>".into()))?;
    let mut objects = Vec::new();
    for obj in root.children().filter(|n| n.has_tag_name("object")) {
        let name = child_text(obj, "name").ok_or_else(|| parse_err("object without <name>".into()))?;
        let bnd = obj
            .children()
            .find(|n| n.has_tag_name("bndbox"))
            .ok_or_else(|| parse_err(format!("object `{name}` without <bndbox>")))?;
        let mut coords = [0.0; 4];
        for (slot, tag) in coords.iter_mut().zip(["xmin", "ymin", "xmax", "ymax"]) {
            let raw = child_text(bnd, tag).ok_or_else(|| parse_err(format!("bndbox without <{tag}>")))?;
            *slot = raw
                .parse::<f64>()
                .map_err(|_| parse_err(format!("<{tag}> is not a number: `{raw}`")))?;
        }
        objects.push(RawObject { name, coords });
    }
    let image_id = xml_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(RawAnnotation {
        xml_path: xml_path.to_path_buf(),
        image_id,
        filename,
        objects,
    })
}

/// Parses every `annotations/*.xml` under `dataset_root`.
///
/// Class ids follow the sorted class names. When `manifest.json` carries a
/// `classes` list it fixes the vocabulary and any other name is an error.
pub fn parse_annotations(dataset_root: &Path) -> Result<Dataset> {
    let ann_dir = dataset_root.join("annotations");
    let img_dir = dataset_root.join("images");
    if !ann_dir.is_dir() {
        return Err(Error::MissingArtifact(ann_dir));
    }
    let mut xml_paths: Vec<PathBuf> = fs::read_dir(&ann_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")))
        .collect();
    xml_paths.sort();

    let mut failures = Vec::new();
    let mut raws = Vec::new();
    for path in &xml_paths {
        match parse_voc(path) {
            Ok(raw) => raws.push(raw),
            Err(e) => failures.push(e),
        }
    }

    let manifest_path = dataset_root.join("manifest.json");
    let pinned = if manifest_path.is_file() {
        let m: ManifestClasses = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        Some(Vocabulary::new(m.classes))
    } else {
        None
    };
    let vocabulary = match pinned {
        Some(v) => {
            for raw in &raws {
                if let Some(obj) = raw.objects.iter().find(|o| v.id_of(&o.name).is_none()) {
                    return Err(Error::Vocabulary {
                        path: raw.xml_path.clone(),
                        name: obj.name.clone(),
                    });
                }
            }
            v
        }
        None => Vocabulary::new(raws.iter().flat_map(|r| r.objects.iter().map(|o| o.name.clone()))),
    };

    let mut images = Vec::with_capacity(raws.len());
    for raw in raws {
        let img_path = img_dir.join(&raw.filename);
        if !img_path.is_file() {
            failures.push(Error::MissingArtifact(img_path));
            continue;
        }
        let pixels = match image::open(&img_path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                failures.push(Error::Parse {
                    path: img_path,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let (w, h) = (f64::from(pixels.width()), f64::from(pixels.height()));
        let mut boxes = Vec::new();
        let mut labels = Vec::new();
        for obj in &raw.objects {
            let [xmin, ymin, xmax, ymax] = obj.coords;
            let b = BBox::new(xmin - 1.0, ymin - 1.0, xmax, ymax).clip(w, h);
            if !b.is_valid() {
                log::warn!("{}: dropping empty box for `{}`", raw.xml_path.display(), obj.name);
                continue;
            }
            boxes.push(b);
            labels.push(vocabulary.id_of(&obj.name).expect("vocabulary covers names"));
        }
        images.push(AnnotatedImage {
            image_id: raw.image_id,
            pixels,
            boxes,
            labels,
        });
    }
    Ok(Dataset {
        vocabulary,
        images,
        failures,
    })
}

/// Disjoint base/novel partition of the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base_classes: BTreeSet<ClassId>,
    pub novel_classes: BTreeSet<ClassId>,
    /// Seed used when the novel class was drawn at random.
    pub seed: Option<u64>,
}

impl ClassSplit {
    pub fn all_classes(&self) -> BTreeSet<ClassId> {
        self.base_classes.union(&self.novel_classes).copied().collect()
    }
}

/// One novel class, every other class is base.
pub fn make_split(vocabulary: &BTreeSet<ClassId>, novel_class: ClassId) -> Result<ClassSplit> {
    if vocabulary.len() < 2 {
        return Err(Error::Domain(format!(
            "a split needs at least 2 classes, vocabulary has {}",
            vocabulary.len()
        )));
    }
    if !vocabulary.contains(&novel_class) {
        return Err(Error::Domain(format!("novel class {novel_class} not in vocabulary")));
    }
    let mut base = vocabulary.clone();
    base.remove(&novel_class);
    Ok(ClassSplit {
        base_classes: base,
        novel_classes: BTreeSet::from([novel_class]),
        seed: None,
    })
}

/// Draws the novel class uniformly at random.
pub fn random_split(vocabulary: &BTreeSet<ClassId>, seed: u64) -> Result<ClassSplit> {
    let ids: Vec<ClassId> = vocabulary.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let novel = *ids
        .choose(&mut rng)
        .ok_or_else(|| Error::Domain("empty vocabulary".into()))?;
    let mut split = make_split(vocabulary, novel)?;
    split.seed = Some(seed);
    Ok(split)
}

/// Index form of [`partition_train_test`]; both halves sorted ascending.
pub fn partition_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Domain(format!("train ratio must lie in (0,1), got {ratio}")));
    }
    if n == 0 {
        return Err(Error::Domain("cannot partition an empty image list".into()));
    }
    let n_train = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Global random partition; `|train| = round(ratio·N)`.
pub fn partition_train_test(
    images: &[AnnotatedImage],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<AnnotatedImage>, Vec<AnnotatedImage>)> {
    let (train, test) = partition_indices(images.len(), ratio, seed)?;
    Ok((
        train.into_iter().map(|i| images[i].clone()).collect(),
        test.into_iter().map(|i| images[i].clone()).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CropSource {
    pub image_id: String,
    pub box_index: usize,
}

/// A 224×224 patch cut from an annotated box.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportCrop {
    pub class_id: ClassId,
    pub patch: RgbImage,
    pub source: CropSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedBox {
    pub source: CropSource,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct CropOutcome {
    pub crops: Vec<SupportCrop>,
    pub skipped: Vec<SkippedBox>,
}

/// Bilinear resize of the pixel region `[x0, x0+w) × [y0, y0+h)` with the
/// region's corner pixels mapped onto the output corners.
pub fn resize_region_bilinear(
    src: &RgbImage,
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
    out_w: u32,
    out_h: u32,
) -> RgbImage {
    let scale = |n: u32, out: u32| {
        if out > 1 {
            (f64::from(n) - 1.0) / (f64::from(out) - 1.0)
        } else {
            0.0
        }
    };
    let (sx, sy) = (scale(w, out_w), scale(h, out_h));
    let mut out = RgbImage::new(out_w, out_h);
    for oy in 0..out_h {
        let fy = f64::from(oy) * sy;
        let iy = (fy.floor() as u32).min(h - 1);
        let iy1 = (iy + 1).min(h - 1);
        let ty = fy - f64::from(iy);
        for ox in 0..out_w {
            let fx = f64::from(ox) * sx;
            let ix = (fx.floor() as u32).min(w - 1);
            let ix1 = (ix + 1).min(w - 1);
            let tx = fx - f64::from(ix);
            let p00 = src.get_pixel(x0 + ix, y0 + iy);
            let p01 = src.get_pixel(x0 + ix1, y0 + iy);
            let p10 = src.get_pixel(x0 + ix, y0 + iy1);
            let p11 = src.get_pixel(x0 + ix1, y0 + iy1);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - tx) + f64::from(p01[c]) * tx;
                let bottom = f64::from(p10[c]) * (1.0 - tx) + f64::from(p11[c]) * tx;
                px[c] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(ox, oy, Rgb(px));
        }
    }
    out
}

/// Pixel extent `(x0, y0, w, h)` covered by a continuous box.
fn pixel_region(b: &BBox, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let x0 = b.x1.floor().clamp(0.0, f64::from(width)) as u32;
    let y0 = b.y1.floor().clamp(0.0, f64::from(height)) as u32;
    let x1 = b.x2.ceil().clamp(0.0, f64::from(width)) as u32;
    let y1 = b.y2.ceil().clamp(0.0, f64::from(height)) as u32;
    (x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
}

/// Crop of a single box; `None` when the box is narrower than 2 px.
pub fn crop_box(image: &AnnotatedImage, box_index: usize) -> Option<SupportCrop> {
    let b = image.boxes.get(box_index)?;
    let (x0, y0, w, h) = pixel_region(b, image.width(), image.height());
    if w < MIN_CROP_EXTENT || h < MIN_CROP_EXTENT {
        return None;
    }
    Some(SupportCrop {
        class_id: image.labels[box_index],
        patch: resize_region_bilinear(&image.pixels, x0, y0, w, h, SUPPORT_SIZE, SUPPORT_SIZE),
        source: CropSource {
            image_id: image.image_id.clone(),
            box_index,
        },
    })
}

/// One support crop per annotated box; degenerate boxes are skipped and
/// reported.
pub fn crop_supports(image: &AnnotatedImage) -> CropOutcome {
    let mut out = CropOutcome::default();
    for i in 0..image.boxes.len() {
        match crop_box(image, i) {
            Some(crop) => out.crops.push(crop),
            None => {
                log::warn!("{}: box {i} too small for a support crop", image.image_id);
                out.skipped.push(SkippedBox {
                    source: CropSource {
                        image_id: image.image_id.clone(),
                        box_index: i,
                    },
                    reason: format!("extent below {MIN_CROP_EXTENT} px"),
                });
            }
        }
    }
    out
}

/// JSON split manifest: class names, partition ids and support provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub classes: Vec<String>,
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub train_ratio: f64,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub supports: BTreeMap<String, Vec<CropSource>>,
}

impl SplitManifest {
    pub fn build(
        vocabulary: &Vocabulary,
        split: &ClassSplit,
        train: &[AnnotatedImage],
        test: &[AnnotatedImage],
        train_ratio: f64,
        seed: u64,
    ) -> Self {
        let mut supports: BTreeMap<String, Vec<CropSource>> = BTreeMap::new();
        for name in vocabulary.names() {
            supports.insert(name.clone(), Vec::new());
        }
        for im in train {
            let crops = crop_sources(im);
            for (src, label) in crops {
                if let Some(name) = vocabulary.name_of(label) {
                    supports.entry(name.to_string()).or_default().push(src);
                }
            }
        }
        Self {
            classes: vocabulary.names().to_vec(),
            base_classes: vocabulary.names_of(&split.base_classes),
            novel_classes: vocabulary.names_of(&split.novel_classes),
            train_ratio,
            seed,
            train: train.iter().map(|i| i.image_id.clone()).collect(),
            test: test.iter().map(|i| i.image_id.clone()).collect(),
            supports,
        }
    }

    pub fn class_split(&self, vocabulary: &Vocabulary) -> Result<ClassSplit> {
        let resolve = |names: &[String]| -> Result<BTreeSet<ClassId>> {
            names
                .iter()
                .map(|n| {
                    vocabulary
                        .id_of(n)
                        .ok_or_else(|| Error::Domain(format!("manifest class `{n}` not in dataset")))
                })
                .collect()
        };
        Ok(ClassSplit {
            base_classes: resolve(&self.base_classes)?,
            novel_classes: resolve(&self.novel_classes)?,
            seed: None,
        })
    }
}

/// Provenance of the crops `crop_supports` would produce, without resizing.
fn crop_sources(image: &AnnotatedImage) -> Vec<(CropSource, ClassId)> {
    image
        .boxes
        .iter()
        .enumerate()
        .filter(|(_, b)| {
            let (_, _, w, h) = pixel_region(b, image.width(), image.height());
            w >= MIN_CROP_EXTENT && h >= MIN_CROP_EXTENT
        })
        .map(|(i, _)| {
            (
                CropSource {
                    image_id: image.image_id.clone(),
                    box_index: i,
                },
                image.labels[i],
            )
        })
        .collect()
}
