//! Episode assembly and k-shot balanced annotation sets.
//!
//! k-shot is enforced per annotation: surplus boxes stay in their images but
//! are masked. Masked boxes never enter a support pool and act as ignored
//! regions in the loss.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::dataset::{crop_box, AnnotatedImage, CropSource, SupportCrop, Vocabulary};
use crate::{ClassId, Error, Result};

/// One query image plus exactly one support crop per task class.
#[derive(Debug, Clone)]
pub struct Episode {
    pub query: AnnotatedImage,
    pub supports: BTreeMap<ClassId, SupportCrop>,
    pub task_classes: Vec<ClassId>,
    /// Classes whose support had to come from the query image itself.
    pub self_sourced: Vec<ClassId>,
}

/// Draws one support per task class, avoiding crops cut from the query image
/// whenever another crop of that class exists.
pub fn build_episode(
    query: &AnnotatedImage,
    support_pool: &[SupportCrop],
    task_classes: &[ClassId],
    seed: u64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut supports = BTreeMap::new();
    let mut self_sourced = Vec::new();
    for &c in task_classes {
        if supports.contains_key(&c) {
            return Err(Error::Usage(format!("task class {c} listed twice")));
        }
        let foreign: Vec<&SupportCrop> = support_pool
            .iter()
            .filter(|s| s.class_id == c && s.source.image_id != query.image_id)
            .collect();
        let chosen = if foreign.is_empty() {
            let own: Vec<&SupportCrop> = support_pool.iter().filter(|s| s.class_id == c).collect();
            let pick = own.choose(&mut rng).ok_or(Error::Sampling(c))?;
            self_sourced.push(c);
            *pick
        } else {
            *foreign.choose(&mut rng).expect("non-empty")
        };
        supports.insert(c, chosen.clone());
    }
    Ok(Episode {
        query: query.clone(),
        supports,
        task_classes: task_classes.to_vec(),
        self_sourced,
    })
}

/// Images with a keep-mask over their boxes.
///
/// Boxes with `kept == false` are excluded from support pools and from both
/// positive and negative loss targets.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub images: Vec<AnnotatedImage>,
    pub kept: Vec<Vec<bool>>,
    pub classes: Vec<ClassId>,
}

impl TrainingSet {
    /// Every box of `classes` kept; boxes of other classes are dropped.
    pub fn full(images: &[AnnotatedImage], classes: &BTreeSet<ClassId>) -> Self {
        let images: Vec<AnnotatedImage> = images.iter().map(|im| im.restricted_to(classes)).collect();
        let kept = images.iter().map(|im| vec![true; im.boxes.len()]).collect();
        Self {
            images,
            kept,
            classes: classes.iter().copied().collect(),
        }
    }

    pub fn unmasked_count(&self, class: ClassId) -> usize {
        self.images
            .iter()
            .zip(&self.kept)
            .map(|(im, k)| im.labels.iter().zip(k).filter(|(l, &k)| **l == class && k).count())
            .sum()
    }

    pub fn unmasked_counts(&self) -> BTreeMap<ClassId, usize> {
        self.classes.iter().map(|&c| (c, self.unmasked_count(c))).collect()
    }

    /// Kept boxes and labels of image `i`.
    pub fn kept_boxes(&self, i: usize) -> (Vec<BBox>, Vec<ClassId>) {
        let im = &self.images[i];
        im.boxes
            .iter()
            .zip(&im.labels)
            .zip(&self.kept[i])
            .filter(|(_, &k)| k)
            .map(|((b, l), _)| (*b, *l))
            .unzip()
    }

    /// Masked boxes of image `i`.
    pub fn masked_boxes(&self, i: usize) -> Vec<BBox> {
        self.images[i]
            .boxes
            .iter()
            .zip(&self.kept[i])
            .filter(|(_, &k)| !k)
            .map(|(b, _)| *b)
            .collect()
    }

    /// Support crops of every kept box, in image then box order.
    pub fn support_pool(&self) -> Vec<SupportCrop> {
        let mut pool = Vec::new();
        for (im, kept) in self.images.iter().zip(&self.kept) {
            for (j, &k) in kept.iter().enumerate() {
                if k && self.classes.contains(&im.labels[j]) {
                    if let Some(c) = crop_box(im, j) {
                        pool.push(c);
                    }
                }
            }
        }
        pool
    }
}

/// A training set holding exactly `k` unmasked boxes per class.
#[derive(Debug, Clone)]
pub struct KShotSet {
    pub set: TrainingSet,
    pub k: usize,
    pub seed: u64,
}

impl KShotSet {
    pub fn classes(&self) -> &[ClassId] {
        &self.set.classes
    }

    pub fn check(&self) -> Result<()> {
        for (c, n) in self.set.unmasked_counts() {
            if n != self.k {
                return Err(Error::Domain(format!(
                    "k-shot set holds {n} unmasked boxes of class {c}, expected {}",
                    self.k
                )));
            }
        }
        Ok(())
    }

    pub fn manifest(&self, vocabulary: &Vocabulary) -> KShotManifest {
        let mut kept: BTreeMap<String, Vec<CropSource>> = BTreeMap::new();
        for &c in &self.set.classes {
            kept.insert(vocabulary.name_of(c).unwrap_or("?").to_string(), Vec::new());
        }
        for (im, mask) in self.set.images.iter().zip(&self.set.kept) {
            for (j, &k) in mask.iter().enumerate() {
                if k {
                    if let Some(name) = vocabulary.name_of(im.labels[j]) {
                        kept.entry(name.to_string()).or_default().push(CropSource {
                            image_id: im.image_id.clone(),
                            box_index: j,
                        });
                    }
                }
            }
        }
        KShotManifest {
            k: self.k,
            seed: self.seed,
            classes: vocabulary.names_of(&self.set.classes),
            kept,
        }
    }
}

/// Reproducible record of a k-shot selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotManifest {
    pub k: usize,
    pub seed: u64,
    pub classes: Vec<String>,
    pub kept: BTreeMap<String, Vec<CropSource>>,
}

impl KShotManifest {
    /// Rebuilds the k-shot set from the images it was drawn from.
    pub fn resolve(&self, images: &[AnnotatedImage], vocabulary: &Vocabulary) -> Result<KShotSet> {
        let mut classes = Vec::new();
        for n in &self.classes {
            classes.push(
                vocabulary
                    .id_of(n)
                    .ok_or_else(|| Error::Domain(format!("k-shot class `{n}` not in vocabulary")))?,
            );
        }
        let mut wanted: BTreeSet<(&str, usize)> = BTreeSet::new();
        for refs in self.kept.values() {
            for r in refs {
                wanted.insert((r.image_id.as_str(), r.box_index));
            }
        }
        let mut set_images = Vec::new();
        let mut kept = Vec::new();
        for im in images {
            let mask: Vec<bool> = (0..im.boxes.len())
                .map(|j| wanted.contains(&(im.image_id.as_str(), j)))
                .collect();
            if mask.iter().any(|&k| k) {
                set_images.push(im.clone());
                kept.push(mask);
            }
        }
        let out = KShotSet {
            set: TrainingSet {
                images: set_images,
                kept,
                classes,
            },
            k: self.k,
            seed: self.seed,
        };
        out.check()?;
        Ok(out)
    }
}

fn sample_boxes(
    images: &[AnnotatedImage],
    classes: &[ClassId],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeSet<(usize, usize)>> {
    let mut by_class: BTreeMap<ClassId, Vec<(usize, usize)>> = classes.iter().map(|&c| (c, Vec::new())).collect();
    for (i, im) in images.iter().enumerate() {
        for (j, l) in im.labels.iter().enumerate() {
            if let Some(v) = by_class.get_mut(l) {
                v.push((i, j));
            }
        }
    }
    if by_class.values().any(|v| v.len() < k) {
        return Err(Error::Capacity {
            k,
            available: by_class.iter().map(|(c, v)| (*c, v.len())).collect(),
        });
    }
    let mut chosen = BTreeSet::new();
    for v in by_class.values_mut() {
        v.shuffle(rng);
        chosen.extend(v.iter().take(k).copied());
    }
    Ok(chosen)
}

/// Keeps exactly `k` boxes per class in `classes`; every other box is masked.
/// Images without any kept box are dropped.
pub fn sample_kshot(images: &[AnnotatedImage], classes: &[ClassId], k: usize, seed: u64) -> Result<KShotSet> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let classes: Vec<ClassId> = classes.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample_boxes(images, &classes, k, &mut rng)?;
    let mut set_images = Vec::new();
    let mut kept = Vec::new();
    for (i, im) in images.iter().enumerate() {
        let mask: Vec<bool> = (0..im.boxes.len()).map(|j| chosen.contains(&(i, j))).collect();
        if mask.iter().any(|&m| m) {
            set_images.push(im.clone());
            kept.push(mask);
        }
    }
    Ok(KShotSet {
        set: TrainingSet {
            images: set_images,
            kept,
            classes,
        },
        k,
        seed,
    })
}

/// Every base box kept plus `k` sampled novel boxes (surplus novel boxes
/// masked), over all images.
pub fn joint_set(
    images: &[AnnotatedImage],
    base: &BTreeSet<ClassId>,
    novel: &BTreeSet<ClassId>,
    k: usize,
    seed: u64,
) -> Result<TrainingSet> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let novel_list: Vec<ClassId> = novel.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample_boxes(images, &novel_list, k, &mut rng)?;
    let all: BTreeSet<ClassId> = base.union(novel).copied().collect();
    let mut kept = Vec::with_capacity(images.len());
    let mut out_images = Vec::with_capacity(images.len());
    for (i, im) in images.iter().enumerate() {
        let restricted = im.restricted_to(&all);
        // restricted_to preserves box order among retained labels
        let mut original = im.labels.iter().enumerate().filter(|(_, l)| all.contains(l)).map(|(j, _)| j);
        let mask: Vec<bool> = restricted
            .labels
            .iter()
            .map(|l| {
                let j = original.next().expect("parallel iteration");
                base.contains(l) || chosen.contains(&(i, j))
            })
            .collect();
        out_images.push(restricted);
        kept.push(mask);
    }
    Ok(TrainingSet {
        images: out_images,
        kept,
        classes: all.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn image(id: &str, labels: &[usize]) -> AnnotatedImage {
        let boxes = (0..labels.len())
            .map(|i| {
                let x = 2.0 + 10.0 * i as f64;
                BBox::new(x, 2.0, x + 8.0, 10.0)
            })
            .collect();
        AnnotatedImage {
            image_id: id.into(),
            pixels: RgbImage::new(64, 16),
            boxes,
            labels: labels.iter().map(|&l| ClassId(l)).collect(),
        }
    }

    fn pool(spec: &[(usize, &str)]) -> Vec<SupportCrop> {
        spec.iter()
            .enumerate()
            .map(|(i, &(c, src))| SupportCrop {
                class_id: ClassId(c),
                patch: RgbImage::new(1, 1),
                source: CropSource {
                    image_id: src.into(),
                    box_index: i,
                },
            })
            .collect()
    }

    #[test]
    fn one_support_per_task_class() {
        let mut spec = Vec::new();
        for c in 0..3 {
            for j in 0..5 {
                spec.push((c, ["a", "b", "c", "d", "e"][j]));
            }
        }
        let ep = build_episode(&image("q", &[0]), &pool(&spec), &[ClassId(0), ClassId(1), ClassId(2)], 3).unwrap();
        assert_eq!(ep.supports.len(), 3);
        for (c, s) in &ep.supports {
            assert_eq!(s.class_id, *c);
        }
        assert!(ep.self_sourced.is_empty());
    }

    #[test]
    fn forced_single_crop() {
        let ep = build_episode(&image("q", &[0]), &pool(&[(0, "x")]), &[ClassId(0)], 9).unwrap();
        assert_eq!(ep.supports[&ClassId(0)].source.image_id, "x");
    }

    #[test]
    fn falls_back_to_query_crop_and_records_it() {
        let p = pool(&[(0, "a"), (0, "q"), (1, "q"), (1, "q")]);
        let ep = build_episode(&image("q", &[0, 1]), &p, &[ClassId(0), ClassId(1)], 1).unwrap();
        assert_eq!(ep.supports[&ClassId(0)].source.image_id, "a");
        assert_eq!(ep.supports[&ClassId(1)].source.image_id, "q");
        assert_eq!(ep.self_sourced, vec![ClassId(1)]);
    }

    #[test]
    fn never_picks_query_crop_when_alternative_exists() {
        let p = pool(&[(0, "q"), (0, "q"), (0, "z")]);
        for seed in 0..50 {
            let ep = build_episode(&image("q", &[0]), &p, &[ClassId(0)], seed).unwrap();
            assert_eq!(ep.supports[&ClassId(0)].source.image_id, "z");
        }
    }

    #[test]
    fn missing_class_is_a_sampling_error() {
        let err = build_episode(&image("q", &[0]), &pool(&[(0, "a")]), &[ClassId(0), ClassId(4)], 0).unwrap_err();
        assert!(matches!(err, Error::Sampling(ClassId(4))));
    }

    #[test]
    fn episode_is_seed_deterministic() {
        let p = pool(&[(0, "a"), (0, "b"), (0, "c"), (1, "d"), (1, "e")]);
        let q = image("q", &[0]);
        let a = build_episode(&q, &p, &[ClassId(0), ClassId(1)], 42).unwrap();
        let b = build_episode(&q, &p, &[ClassId(0), ClassId(1)], 42).unwrap();
        assert_eq!(a.supports, b.supports);
    }

    #[test]
    fn kshot_forced_single_annotation() {
        let images = vec![image("a", &[0, 1, 1]), image("b", &[1])];
        let ks = sample_kshot(&images, &[ClassId(0)], 1, 5).unwrap();
        assert_eq!(ks.set.unmasked_count(ClassId(0)), 1);
        assert_eq!(ks.set.images.len(), 1);
        assert_eq!(ks.set.kept[0], vec![true, false, false]);
    }

    #[test]
    fn kshot_two_of_five_per_class() {
        // 5 boxes for each of classes 0..3 spread over 5 images
        let images: Vec<_> = (0..5).map(|i| image(&format!("i{i}"), &[0, 1, 2])).collect();
        let classes = [ClassId(0), ClassId(1), ClassId(2)];
        let ks = sample_kshot(&images, &classes, 2, 17).unwrap();
        for c in classes {
            assert_eq!(ks.set.unmasked_count(c), 2);
        }
        let again = sample_kshot(&images, &classes, 2, 17).unwrap();
        assert_eq!(ks.set.kept, again.set.kept);
        ks.check().unwrap();
    }

    #[test]
    fn kshot_capacity_error_reports_counts() {
        let images = vec![image("a", &[0, 1]), image("b", &[1])];
        match sample_kshot(&images, &[ClassId(0), ClassId(1)], 2, 0) {
            Err(Error::Capacity { k, available }) => {
                assert_eq!(k, 2);
                assert_eq!(available[&ClassId(0)], 1);
                assert_eq!(available[&ClassId(1)], 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn support_pool_excludes_masked_boxes() {
        let images = vec![image("a", &[0, 0, 0])];
        let ks = sample_kshot(&images, &[ClassId(0)], 1, 2).unwrap();
        let pool = ks.set.support_pool();
        assert_eq!(pool.len(), 1);
        assert!(ks.set.kept[0][pool[0].source.box_index]);
        assert_eq!(ks.set.masked_boxes(0).len(), 2);
    }

    #[test]
    fn manifest_round_trip() {
        let vocab = Vocabulary::new(["a", "b"]);
        let images: Vec<_> = (0..4).map(|i| image(&format!("i{i}"), &[0, 1])).collect();
        let ks = sample_kshot(&images, &[ClassId(0), ClassId(1)], 3, 8).unwrap();
        let m = ks.manifest(&vocab);
        let json = serde_json::to_string(&m).unwrap();
        let back: KShotManifest = serde_json::from_str(&json).unwrap();
        let rebuilt = back.resolve(&images, &vocab).unwrap();
        assert_eq!(rebuilt.set.kept, ks.set.kept);
    }

    #[test]
    fn joint_keeps_all_base_boxes() {
        let images = vec![image("a", &[0, 1, 1]), image("b", &[0, 1]), image("c", &[2])];
        let base = BTreeSet::from([ClassId(1), ClassId(2)]);
        let novel = BTreeSet::from([ClassId(0)]);
        let set = joint_set(&images, &base, &novel, 1, 3).unwrap();
        assert_eq!(set.unmasked_count(ClassId(0)), 1);
        assert_eq!(set.unmasked_count(ClassId(1)), 3);
        assert_eq!(set.unmasked_count(ClassId(2)), 1);
    }
}
