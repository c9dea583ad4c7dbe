//! Box and point arithmetic shared by every pipeline stage: IoU, centers,
//! clamping, non-maximum suppression, center-distance computation.
//!
//! Coordinates are continuous pixels, origin top-left, x right, y down.
//! Areas use `(x2 - x1) * (y2 - y1)` directly; no half-open pixel semantics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned bounding box with `x1 <= x2`, `y1 <= y2`, all finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::InvalidBox(format!(
                "unordered coordinates ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Box of `size` x `size` pixels centered on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, size: f64) -> Result<Self> {
        let half = size / 2.0;
        BBox::new(cx - half, cy - half, cx + half, cy + half)
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Midpoint `((x1 + x2) / 2, (y1 + y2) / 2)`.
    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Translate by `(dx, dy)`; width and height are preserved exactly.
    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

/// One predicted object: box, class label and confidence score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    bbox: BBox,
    class_id: u32,
    score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: u32, score: f64) -> Result<Self> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidDetection(format!("score {score} outside [0, 1]")));
        }
        Ok(Detection { bbox, class_id, score })
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn class_id(&self) -> u32 {
        self.class_id
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn center(&self) -> (f64, f64) {
        self.bbox.center()
    }

    pub fn with_bbox(&self, bbox: BBox) -> Self {
        Detection { bbox, ..*self }
    }

    pub fn with_score(&self, score: f64) -> Result<Self> {
        Detection::new(self.bbox, self.class_id, score)
    }
}

/// Intersection over union.
///
/// When the union is zero (two degenerate zero-area boxes) the result is 1
/// for identical boxes and 0 otherwise, so the function is total and NaN-free.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else if a == b {
        1.0
    } else {
        0.0
    }
}

/// Euclidean distance between a detection's box center and a ground-truth point.
pub fn center_distance(det: &Detection, gt: (f64, f64)) -> f64 {
    let (cx, cy) = det.center();
    ((cx - gt.0).powi(2) + (cy - gt.1).powi(2)).sqrt()
}

/// Canonical detection order: descending score, ties broken by ascending
/// `(y1, x1, original index)`. Every stage that emits detection lists uses
/// this order so that reruns and round-trips are bit-stable.
pub fn sort_detections(dets: &mut Vec<Detection>) {
    let mut indexed: Vec<(usize, Detection)> = dets.drain(..).enumerate().collect();
    indexed.sort_by(|(ia, a), (ib, b)| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.bbox.y1.partial_cmp(&b.bbox.y1).unwrap())
            .then(a.bbox.x1.partial_cmp(&b.bbox.x1).unwrap())
            .then(ia.cmp(ib))
    });
    dets.extend(indexed.into_iter().map(|(_, d)| d));
}

/// Greedy non-maximum suppression.
///
/// Detections are visited in the canonical order; one is kept iff its IoU
/// with every already-kept detection of the same class is below
/// `iou_threshold`. The output is in canonical order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    debug_assert!((0.0..=1.0).contains(&iou_threshold));
    let mut ordered = dets.to_vec();
    sort_detections(&mut ordered);
    let mut kept: Vec<Detection> = Vec::new();
    for det in ordered {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == det.class_id && iou(k.bbox(), det.bbox()) >= iou_threshold);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// Clamp every coordinate into `[0, width] x [0, height]`. Ordering
/// invariants are preserved because clamping is monotone.
pub fn clamp_box(b: &BBox, width: usize, height: usize) -> BBox {
    let w = width as f64;
    let h = height as f64;
    BBox {
        x1: b.x1.clamp(0.0, w),
        y1: b.y1.clamp(0.0, h),
        x2: b.x2.clamp(0.0, w),
        y2: b.y2.clamp(0.0, h),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection::new(b, 0, score).unwrap()
    }

    #[test]
    fn bbox_rejects_unordered_and_non_finite() {
        assert!(BBox::new(5.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 5.0, 1.0, 1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn iou_identity() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_zero_area_intersection() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(10.0, 10.0, 20.0, 20.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        // intersection 50, union 150
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_degenerate_boxes() {
        let p = bx(3.0, 4.0, 3.0, 4.0);
        let q = bx(5.0, 4.0, 5.0, 4.0);
        assert_eq!(iou(&p, &p), 1.0);
        assert_eq!(iou(&p, &q), 0.0);
        // zero-area against a normal box
        assert_eq!(iou(&p, &bx(0.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn centers() {
        assert_eq!(bx(0.0, 0.0, 10.0, 10.0).center(), (5.0, 5.0));
        assert_eq!(bx(2.0, 4.0, 2.0, 4.0).center(), (2.0, 4.0));
        assert_eq!(bx(10.0, 20.0, 60.0, 70.0).center(), (35.0, 45.0));
    }

    #[test]
    fn center_distances() {
        let d = det(bx(0.0, 0.0, 10.0, 10.0), 0.5);
        assert_eq!(center_distance(&d, (5.0, 5.0)), 0.0);
        let d = det(bx(-1.0, -1.0, 1.0, 1.0), 0.5);
        assert_eq!(center_distance(&d, (3.0, 4.0)), 5.0);
        let d = det(bx(0.0, 0.0, 2.0, 2.0), 0.5);
        assert_eq!(center_distance(&d, (1.0, 2.0)), 1.0);
    }

    #[test]
    fn nms_empty() {
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_suppresses_duplicates() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let out = nms(&[det(b, 0.9), det(b, 0.8)], 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score(), 0.9);
    }

    #[test]
    fn nms_keeps_disjoint() {
        let out = nms(
            &[det(bx(0.0, 0.0, 10.0, 10.0), 0.9), det(bx(50.0, 50.0, 60.0, 60.0), 0.8)],
            0.5,
        );
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score(), 0.9);
        assert_eq!(out[1].score(), 0.8);
    }

    #[test]
    fn nms_class_aware() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let a = Detection::new(b, 0, 0.9).unwrap();
        let c = Detection::new(b, 1, 0.8).unwrap();
        assert_eq!(nms(&[a, c], 0.5).len(), 2);
    }

    #[test]
    fn clamp_box_cases() {
        assert_eq!(clamp_box(&bx(-5.0, -5.0, 10.0, 10.0), 224, 224), bx(0.0, 0.0, 10.0, 10.0));
        assert_eq!(clamp_box(&bx(0.0, 0.0, 300.0, 300.0), 224, 224), bx(0.0, 0.0, 224.0, 224.0));
        assert_eq!(clamp_box(&bx(10.0, 10.0, 20.0, 20.0), 224, 224), bx(10.0, 10.0, 20.0, 20.0));
    }

    #[test]
    fn detection_score_bounds() {
        let b = bx(0.0, 0.0, 1.0, 1.0);
        assert!(Detection::new(b, 0, -0.1).is_err());
        assert!(Detection::new(b, 0, 1.1).is_err());
        assert!(Detection::new(b, 0, f64::NAN).is_err());
    }
}
