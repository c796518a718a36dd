//! Deterministic synthetic-shapes detection datasets.
//!
//! Every class is one shape family drawn in one colour family on a textured
//! grey background. Background channels stay inside `[60, 160]`; every object
//! colour has at least one channel outside that band, so an object's pixels
//! are exactly those equal to its recorded colour. Shapes are rasterized
//! without anti-aliasing, objects never touch, and each box is the tight
//! extent of its drawn pixels.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::dataset::{AnnotatedImage, Vocabulary};
use crate::{ClassId, Error, Result};

/// Inclusive background channel band.
pub const BACKGROUND_BAND: (u8, u8) = (60, 160);

/// Minimum free gap between object boxes, in pixels.
const OBJECT_GAP: f64 = 2.0;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_classes: usize,
    pub n_images: usize,
    pub image_size: u32,
    /// Inclusive `(min, max)` objects per image.
    pub objects_per_image: (usize, usize),
    pub seed: u64,
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > FAMILIES.len() {
            return Err(Error::Domain(format!(
                "n_classes must lie in 2..={}, got {}",
                FAMILIES.len(),
                self.n_classes
            )));
        }
        if self.image_size < 64 {
            return Err(Error::Domain(format!("image_size must be >= 64, got {}", self.image_size)));
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Domain(format!("bad objects_per_image range {lo}..={hi}")));
        }
        Ok(())
    }

    /// Smallest and largest object side length in pixels.
    pub fn object_size_range(&self) -> (f64, f64) {
        let s = f64::from(self.image_size);
        ((0.16 * s).max(12.0), 0.40 * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Cross,
    Disk,
    Bar,
    Ellipse,
    Triangle,
    Diamond,
    Ring,
    Frame,
}

struct Family {
    name: &'static str,
    shape: Shape,
    /// Inclusive per-channel colour ranges.
    color: [(u8, u8); 3],
}

const FAMILIES: [Family; 8] = [
    Family { name: "aircraft", shape: Shape::Cross, color: [(225, 255), (225, 255), (225, 255)] },
    Family { name: "oiltank", shape: Shape::Disk, color: [(220, 255), (110, 150), (0, 35)] },
    Family { name: "overpass", shape: Shape::Bar, color: [(0, 35), (60, 110), (210, 255)] },
    Family { name: "playground", shape: Shape::Ellipse, color: [(0, 40), (190, 235), (0, 40)] },
    Family { name: "harbor", shape: Shape::Triangle, color: [(200, 240), (0, 30), (0, 30)] },
    Family { name: "bridge", shape: Shape::Diamond, color: [(0, 30), (200, 240), (200, 240)] },
    Family { name: "stadium", shape: Shape::Ring, color: [(220, 255), (210, 250), (0, 30)] },
    Family { name: "tower", shape: Shape::Frame, color: [(170, 200), (0, 30), (200, 240)] },
];

/// Ground-truth record of one drawn object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub class_name: String,
    pub shape: Shape,
    pub color: [u8; 3],
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub file_name: String,
    pub objects: Vec<ObjectRecord>,
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub classes: Vec<String>,
    pub spec: FixtureSpec,
    pub images: Vec<ImageRecord>,
}

/// An in-memory fixture.
#[derive(Debug, Clone)]
pub struct FixtureDataset {
    pub vocabulary: Vocabulary,
    pub images: Vec<AnnotatedImage>,
    pub manifest: FixtureManifest,
}

struct Placed {
    family: usize,
    cx: f64,
    cy: f64,
    size: f64,
    rotated: bool,
}

fn inside(shape: Shape, dx: f64, dy: f64, s: f64, rotated: bool) -> bool {
    let h = 0.5 * s;
    let (dx, dy) = if rotated { (dy, dx) } else { (dx, dy) };
    match shape {
        Shape::Cross => {
            let t = s / 7.0;
            (dx.abs() <= h && dy.abs() <= t) || (dx.abs() <= t && dy.abs() <= h)
        }
        Shape::Disk => dx * dx + dy * dy <= h * h,
        Shape::Bar => dx.abs() <= h && dy.abs() <= s / 6.0,
        Shape::Ellipse => {
            let (a, b) = (h, s / 3.2);
            (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
        }
        Shape::Triangle => dy >= -h && dy <= h && dx.abs() <= 0.5 * (dy + h),
        Shape::Diamond => dx.abs() + dy.abs() <= h,
        Shape::Ring => {
            let r2 = dx * dx + dy * dy;
            r2 <= h * h && r2 >= (0.5 * h) * (0.5 * h)
        }
        Shape::Frame => {
            let m = dx.abs().max(dy.abs());
            m <= h && m >= h - s / 6.0
        }
    }
}

/// Pixels covered by a placed shape, clipped to the image.
fn rasterize(p: &Placed, image_size: u32) -> Vec<(u32, u32)> {
    let shape = FAMILIES[p.family].shape;
    let r = 0.5 * p.size + 1.0;
    let lo = |c: f64| (c - r).floor().max(0.0) as u32;
    let hi = |c: f64| ((c + r).ceil() as u32).min(image_size);
    let mut px = Vec::new();
    for y in lo(p.cy)..hi(p.cy) {
        for x in lo(p.cx)..hi(p.cx) {
            let dx = f64::from(x) + 0.5 - p.cx;
            let dy = f64::from(y) + 0.5 - p.cy;
            if inside(shape, dx, dy, p.size, p.rotated) {
                px.push((x, y));
            }
        }
    }
    px
}

fn tight_box(pixels: &[(u32, u32)]) -> Option<BBox> {
    let x0 = pixels.iter().map(|p| p.0).min()?;
    let y0 = pixels.iter().map(|p| p.1).min()?;
    let x1 = pixels.iter().map(|p| p.0).max()?;
    let y1 = pixels.iter().map(|p| p.1).max()?;
    Some(BBox::new(f64::from(x0), f64::from(y0), f64::from(x1 + 1), f64::from(y1 + 1)))
}

fn background(rng: &mut ChaCha8Rng, size: u32) -> RgbImage {
    let (lo, hi) = (f64::from(BACKGROUND_BAND.0), f64::from(BACKGROUND_BAND.1));
    let base = rng.random_range(85.0..135.0);
    let tint: [f64; 3] = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];
    let (gx, gy) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let (fx, fy) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
    let amp = rng.random_range(4.0..12.0);
    let mut img = RgbImage::new(size, size);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (xf, yf) = (f64::from(x), f64::from(y));
        let wave = amp * (xf * fx).sin() * (yf * fy).cos();
        let ramp = gx * xf + gy * yf;
        let mut px = [0u8; 3];
        for c in 0..3 {
            let noise = rng.random_range(-12.0..12.0);
            px[c] = (base + tint[c] + wave + ramp + noise).round().clamp(lo, hi) as u8;
        }
        *p = Rgb(px);
    }
    img
}

fn render_one(spec: &FixtureSpec, index: usize) -> Result<(AnnotatedImage, ImageRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let size = spec.image_size;
    let mut img = background(&mut rng, size);
    let n_obj = rng.random_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let (smin, smax) = spec.object_size_range();
    let image_id = format!("img_{index:05}");

    let mut placed_boxes: Vec<BBox> = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..n_obj {
        let family = rng.random_range(0..spec.n_classes);
        let fam = &FAMILIES[family];
        let color = [
            rng.random_range(fam.color[0].0..=fam.color[0].1),
            rng.random_range(fam.color[1].0..=fam.color[1].1),
            rng.random_range(fam.color[2].0..=fam.color[2].1),
        ];
        let mut done = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let s = rng.random_range(smin..=smax);
            let margin = 0.5 * s + 1.0;
            if 2.0 * margin >= f64::from(size) {
                break;
            }
            let p = Placed {
                family,
                cx: rng.random_range(margin..f64::from(size) - margin),
                cy: rng.random_range(margin..f64::from(size) - margin),
                size: s,
                rotated: rng.random_bool(0.5),
            };
            let pixels = rasterize(&p, size);
            let Some(bbox) = tight_box(&pixels) else { continue };
            let padded = BBox::new(bbox.x1 - OBJECT_GAP, bbox.y1 - OBJECT_GAP, bbox.x2 + OBJECT_GAP, bbox.y2 + OBJECT_GAP);
            if placed_boxes.iter().any(|b| b.intersection(&padded) > 0.0) {
                continue;
            }
            for (x, y) in pixels {
                img.put_pixel(x, y, Rgb(color));
            }
            placed_boxes.push(bbox);
            objects.push((ClassId(family), ObjectRecord {
                class_name: fam.name.to_string(),
                shape: fam.shape,
                color,
                bbox,
            }));
            done = true;
            break;
        }
        if !done {
            return Err(Error::Domain(format!(
                "image_size {size} too small to place {n_obj} non-overlapping objects in {image_id}"
            )));
        }
    }
    let file_name = format!("{image_id}.png");
    let record = ImageRecord {
        image_id: image_id.clone(),
        file_name,
        objects: objects.iter().map(|(_, o)| o.clone()).collect(),
    };
    let annotated = AnnotatedImage {
        image_id,
        pixels: img,
        boxes: objects.iter().map(|(_, o)| o.bbox).collect(),
        labels: objects.iter().map(|(c, _)| *c).collect(),
    };
    Ok((annotated, record))
}

/// Renders the whole fixture in memory. Labels index the sorted vocabulary.
pub fn render_fixture(spec: &FixtureSpec) -> Result<FixtureDataset> {
    spec.validate()?;
    let vocabulary = Vocabulary::new(FAMILIES[..spec.n_classes].iter().map(|f| f.name));
    let remap: Vec<ClassId> = FAMILIES[..spec.n_classes]
        .iter()
        .map(|f| vocabulary.id_of(f.name).expect("family in vocabulary"))
        .collect();
    let mut images = Vec::with_capacity(spec.n_images);
    let mut records = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let (mut im, rec) = render_one(spec, i)?;
        for l in &mut im.labels {
            *l = remap[l.0];
        }
        images.push(im);
        records.push(rec);
    }
    Ok(FixtureDataset {
        manifest: FixtureManifest {
            classes: vocabulary.names().to_vec(),
            spec: spec.clone(),
            images: records,
        },
        vocabulary,
        images,
    })
}

fn voc_xml(im: &AnnotatedImage, file_name: &str, vocabulary: &Vocabulary) -> String {
    let mut s = String::new();
    s.push_str("<annotation>\n");
    s.push_str("  <folder>images</folder>\n");
    s.push_str(&format!("  <filename>{file_name}</filename>\n"));
    s.push_str(&format!(
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>\n",
        im.width(),
        im.height()
    ));
    for (b, l) in im.boxes.iter().zip(&im.labels) {
        let name = vocabulary.name_of(*l).unwrap_or("unknown");
        // 1-based inclusive VOC corners
        s.push_str(&format!(
            "  <object>\n    <name>{name}</name>\n    <difficult>0</difficult>\n    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>\n  </object>\n",
            b.x1 as i64 + 1,
            b.y1 as i64 + 1,
            b.x2 as i64,
            b.y2 as i64
        ));
    }
    s.push_str("</annotation>\n");
    s
}

/// Writes `images/`, `annotations/` and `manifest.json` under `out_dir`.
pub fn generate_fixture(spec: &FixtureSpec, out_dir: &Path) -> Result<FixtureDataset> {
    let data = render_fixture(spec)?;
    let img_dir = out_dir.join("images");
    let ann_dir = out_dir.join("annotations");
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&ann_dir)?;
    for (im, rec) in data.images.iter().zip(&data.manifest.images) {
        im.pixels.save(img_dir.join(&rec.file_name))?;
        fs::write(
            ann_dir.join(format!("{}.xml", im.image_id)),
            voc_xml(im, &rec.file_name, &data.vocabulary),
        )?;
    }
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&data.manifest)?,
    )?;
    Ok(data)
}
