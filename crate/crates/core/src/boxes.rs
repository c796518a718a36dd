//! Axis-aligned boxes, IoU, the center/size box parameterization and greedy
//! non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Box in continuous pixel coordinates, `x1 < x2`, `y1 < y2` when valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// Total order used for deterministic tie-breaks.
    pub fn lexicographic_cmp(&self, other: &BBox) -> Ordering {
        self.as_array()
            .iter()
            .zip(other.as_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

/// Encodes boxes relative to a reference box as
/// `(wx·dx/w, wy·dy/h, ww·ln(w'/w), wh·ln(h'/h))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    /// Upper bound on decoded log-scale deltas.
    pub scale_clamp: f64,
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self::new([1.0, 1.0, 1.0, 1.0])
    }
}

impl BoxCoder {
    pub fn new(weights: [f64; 4]) -> Self {
        Self {
            weights,
            scale_clamp: (1000.0f64 / 16.0).ln(),
        }
    }

    pub fn encode(&self, target: &BBox, reference: &BBox) -> [f64; 4] {
        let (rcx, rcy) = reference.center();
        let (rw, rh) = (reference.width(), reference.height());
        let (tcx, tcy) = target.center();
        let (tw, th) = (target.width(), target.height());
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tcx - rcx) / rw,
            wy * (tcy - rcy) / rh,
            ww * (tw / rw).ln(),
            wh * (th / rh).ln(),
        ]
    }

    pub fn decode(&self, deltas: &[f64; 4], reference: &BBox) -> BBox {
        let (rcx, rcy) = reference.center();
        let (rw, rh) = (reference.width(), reference.height());
        let [wx, wy, ww, wh] = self.weights;
        let dx = deltas[0] / wx;
        let dy = deltas[1] / wy;
        let dw = (deltas[2] / ww).min(self.scale_clamp);
        let dh = (deltas[3] / wh).min(self.scale_clamp);
        BBox::from_center(rcx + dx * rw, rcy + dy * rh, rw * dw.exp(), rh * dh.exp())
    }
}

/// Greedy hard NMS. Visits boxes by descending score (ties broken by the
/// lexicographic box order, then index) and keeps a box unless it overlaps an
/// already kept box with IoU strictly above `iou_threshold`. Returns kept
/// indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| boxes[a].lexicographic_cmp(&boxes[b]))
            .then_with(|| a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for idx in order {
        if keep
            .iter()
            .all(|&k| boxes[k].iou(&boxes[idx]) <= iou_threshold)
        {
            keep.push(idx);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = a.iou(&b);
            prop_assert!((ab - b.iou(&a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn encode_inverts_decode(
            anchor in arb_box(),
            t in prop::array::uniform4(-2.0..2.0f64),
        ) {
            let coder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
            let deltas = [t[0] * 10.0, t[1] * 10.0, t[2] * 5.0, t[3] * 5.0];
            let back = coder.encode(&coder.decode(&deltas, &anchor), &anchor);
            for i in 0..4 {
                prop_assert!((back[i] - deltas[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn nms_is_idempotent(
            boxes in prop::collection::vec(arb_box(), 0..12),
            seed in 0u64..1000,
        ) {
            let scores: Vec<f64> = (0..boxes.len())
                .map(|i| ((i as u64 * 7919 + seed) % 97) as f64 / 97.0)
                .collect();
            let keep = nms(&boxes, &scores, 0.5);
            let kb: Vec<BBox> = keep.iter().map(|&i| boxes[i]).collect();
            let ks: Vec<f64> = keep.iter().map(|&i| scores[i]).collect();
            let again = nms(&kb, &ks, 0.5);
            prop_assert_eq!(again, (0..kb.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(2.0, 2.0, 3.0, 3.0);
        assert_eq!(a.iou(&b), 0.0);
        // touching edges share no area
        assert_eq!(a.iou(&BBox::new(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn half_overlap_iou() {
        let a = BBox::new(0.0, 0.0, 2.0, 1.0);
        let b = BBox::new(1.0, 0.0, 3.0, 1.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_highest_of_overlapping_pair() {
        let boxes = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(1.0, 1.0, 10.0, 10.0)];
        assert_eq!(nms(&boxes, &[0.4, 0.9], 0.5), vec![1]);
    }

    #[test]
    fn nms_suppression_is_not_transitive() {
        // A (0.9) suppresses B (0.8); C (0.7) overlaps B but not A, so C survives.
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(4.0, 0.0, 14.0, 10.0);
        let c = BBox::new(8.0, 0.0, 18.0, 10.0);
        assert!(a.iou(&b) > 0.4 && b.iou(&c) > 0.4 && a.iou(&c) < 0.4);
        assert_eq!(nms(&[a, b, c], &[0.9, 0.8, 0.7], 0.4), vec![0, 2]);
    }
}
