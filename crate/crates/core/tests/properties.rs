use std::collections::BTreeMap;

use proptest::prelude::*;

use fsdet_core::boxes::{nms, BBox};
use fsdet_core::detector::{fuse_results, Detection};
use fsdet_core::eval::{compute_ap, GtBox, ScoredBox};
use fsdet_core::ClassId;

fn grid_box() -> impl Strategy<Value = BBox> {
    (0u8..6, 0u8..6, 1u8..5, 1u8..5)
        .prop_map(|(x, y, w, h)| BBox::new(f64::from(x) * 4.0, f64::from(y) * 4.0, f64::from(x + w) * 4.0, f64::from(y + h) * 4.0))
}

fn image_id() -> impl Strategy<Value = String> {
    (0u8..3).prop_map(|i| format!("im{i}"))
}

/// Straight from the definition: walk detections by falling score, mark
/// each as hit or miss, then add up the best precision reachable at or
/// after every hit, divided by the number of objects.
fn reference_ap(dets: &[ScoredBox], gts: &[GtBox]) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<&ScoredBox> = dets.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut hit = Vec::new();
    for d in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.image_id == d.image_id)
            .map(|(j, g)| (j, d.bbox.iou(&g.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, (j, iou)| match acc {
                Some((_, b)) if b >= iou => acc,
                _ => Some((j, iou)),
            });
        let tp = matches!(best, Some((j, iou)) if iou >= 0.5 && !taken[j]);
        if tp {
            taken[best.unwrap().0] = true;
        }
        hit.push(tp);
    }
    let mut ap = 0.0;
    for i in 0..hit.len() {
        if !hit[i] {
            continue;
        }
        let best_precision = (i..hit.len())
            .map(|j| hit[..=j].iter().filter(|&&h| h).count() as f64 / (j + 1) as f64)
            .fold(0.0, f64::max);
        ap += best_precision / gts.len() as f64;
    }
    Some(ap)
}

fn distinct_scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
    Just((1..=n).map(|i| i as f64 / (n + 1) as f64).collect::<Vec<_>>()).prop_shuffle()
}

fn scenario() -> impl Strategy<Value = (Vec<ScoredBox>, Vec<GtBox>)> {
    let gts = prop::collection::vec((image_id(), grid_box()), 0..6)
        .prop_map(|v| v.into_iter().map(|(image_id, bbox)| GtBox { image_id, bbox }).collect::<Vec<_>>());
    let dets = prop::collection::vec((image_id(), grid_box()), 0..10).prop_flat_map(|v| {
        let n = v.len();
        distinct_scores(n).prop_map(move |s| {
            v.iter()
                .zip(s)
                .map(|((image_id, bbox), score)| ScoredBox {
                    image_id: image_id.clone(),
                    bbox: *bbox,
                    score,
                })
                .collect::<Vec<_>>()
        })
    });
    (dets, gts)
}

fn detections() -> impl Strategy<Value = BTreeMap<ClassId, Vec<Detection>>> {
    prop::collection::vec((0usize..3, grid_box(), 1u8..6), 0..12).prop_map(|v| {
        let mut per: BTreeMap<ClassId, Vec<Detection>> = BTreeMap::new();
        for (c, bbox, s) in v {
            per.entry(ClassId(c)).or_default().push(Detection {
                bbox,
                score: f64::from(s) / 5.0,
                class_id: ClassId(c),
            });
        }
        per
    })
}

proptest! {
    #[test]
    fn ap_matches_the_reference((dets, gts) in scenario()) {
        let got = compute_ap(&dets, &gts, 0.5);
        let want = reference_ap(&dets, &gts);
        match (got, want) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                prop_assert!((0.0..=1.0).contains(&a));
            }
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn ap_ignores_input_order((dets, gts) in scenario()) {
        let mut rev = dets.clone();
        rev.reverse();
        prop_assert_eq!(compute_ap(&dets, &gts, 0.5), compute_ap(&rev, &gts, 0.5));
    }

    #[test]
    fn fusion_is_idempotent(per in detections()) {
        let once = fuse_results(&per, 0.5);
        let mut regrouped: BTreeMap<ClassId, Vec<Detection>> = BTreeMap::new();
        for d in &once {
            regrouped.entry(d.class_id).or_default().push(*d);
        }
        prop_assert_eq!(fuse_results(&regrouped, 0.5), once.clone());
        // survivors are sorted by score and pairwise below threshold
        for w in once.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for (i, a) in once.iter().enumerate() {
            for b in &once[i + 1..] {
                prop_assert!(a.bbox.iou(&b.bbox) <= 0.5);
            }
        }
    }

    #[test]
    fn every_suppressed_box_has_a_stronger_overlapping_survivor(per in detections()) {
        let all: Vec<Detection> = per.values().flatten().copied().collect();
        let boxes: Vec<BBox> = all.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = all.iter().map(|d| d.score).collect();
        let keep = nms(&boxes, &scores, 0.5);
        for i in 0..all.len() {
            if !keep.contains(&i) {
                prop_assert!(keep.iter().any(|&j| scores[j] >= scores[i] && boxes[j].iou(&boxes[i]) > 0.5));
            }
        }
    }
}
