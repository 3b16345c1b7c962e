//! Normalized bounding boxes, overlap measures and box co-transforms for the
//! geometric augmentations used during RL training.
//!
//! All boxes live in normalized corner coordinates `(x1, y1, x2, y2)` within
//! the unit square. Pixel-space boxes (COCO `[x, y, w, h]`) are converted at
//! ingestion, so nothing in here depends on image resolution.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coordinates are snapped to multiples of 2^-53 (a shift of at most one
/// ulp). Every snapped value `x` in `[0, 1]` has an exactly representable
/// mirror `1 - x`, which makes horizontal flips exact involutions.
const SNAP_SCALE: f64 = (1u64 << 53) as f64;

/// Default fraction of a box's area that must survive a crop.
pub const DEFAULT_CROP_MIN_RETAINED: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("non-finite box coordinate in ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("box ({0}, {1}, {2}, {3}) leaves the unit square")]
    OutOfRange(f64, f64, f64, f64),
    #[error("box ({0}, {1}, {2}, {3}) has zero or negative area")]
    Degenerate(f64, f64, f64, f64),
    #[error("invalid augmentation: {0}")]
    InvalidAugmentation(String),
}

#[inline]
fn snap(v: f64) -> f64 {
    (v * SNAP_SCALE).round() / SNAP_SCALE
}

/// Axis-aligned box in normalized corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    /// Builds a box, rejecting anything outside `[0,1]²` or with zero area.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite(x1, y1, x2, y2));
        }
        if x1 < 0.0 || y1 < 0.0 || x2 > 1.0 || y2 > 1.0 {
            return Err(GeometryError::OutOfRange(x1, y1, x2, y2));
        }
        let (sx1, sy1, sx2, sy2) = (snap(x1), snap(y1), snap(x2), snap(y2));
        if sx1 >= sx2 || sy1 >= sy2 {
            return Err(GeometryError::Degenerate(x1, y1, x2, y2));
        }
        Ok(Self {
            x1: sx1,
            y1: sy1,
            x2: sx2,
            y2: sy2,
        })
    }

    /// Clips arbitrary corners into the unit square, reorders them, and
    /// returns `None` if nothing with positive area is left.
    pub fn from_clipped(xa: f64, ya: f64, xb: f64, yb: f64) -> Option<Self> {
        let (x1, x2) = if xa <= xb { (xa, xb) } else { (xb, xa) };
        let (y1, y2) = if ya <= yb { (ya, yb) } else { (yb, ya) };
        Self::new(
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
            x2.clamp(0.0, 1.0),
            y2.clamp(0.0, 1.0),
        )
        .ok()
    }

    /// Box from its center and size, clipped to the unit square.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Option<Self> {
        Self::from_clipped(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
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

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
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

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Area of the overlap with `other` (0 when disjoint).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Lexicographic corner order, used as the last tie-break when sorting
    /// detections.
    pub fn lex_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }

    /// Mirror about the vertical center line.
    pub fn hflip(&self) -> BBox {
        BBox {
            x1: 1.0 - self.x2,
            y1: self.y1,
            x2: 1.0 - self.x1,
            y2: self.y2,
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.corners()
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Smallest axis-aligned box containing both inputs.
pub fn enclosing_box(a: &BBox, b: &BBox) -> BBox {
    // Both inputs are valid, so the hull is valid and already on the grid.
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Distance-IoU: `iou - ρ²/c²` where ρ is the distance between box centers
/// and c the diagonal of the enclosing box. Lies in `(-1, 1]`.
pub fn diou(a: &BBox, b: &BBox) -> f64 {
    let (acx, acy) = a.center();
    let (bcx, bcy) = b.center();
    let rho2 = (acx - bcx).powi(2) + (acy - bcy).powi(2);
    let hull = enclosing_box(a, b);
    let c2 = hull.width().powi(2) + hull.height().powi(2);
    iou(a, b) - rho2 / c2
}

/// Pixel dimensions of the (nominal) image a scene lives on. Boxes stay in
/// normalized coordinates; the canvas records what the augmentations did to
/// the aspect ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: f64,
    pub height: f64,
}

impl Canvas {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    pub fn aspect(&self) -> f64 {
        self.width / self.height
    }

    /// Offsets (in pixels) of the original image inside the centered
    /// pad-to-square canvas, and the square side.
    pub fn square_padding(&self) -> (f64, f64, f64) {
        let side = self.width.max(self.height);
        ((side - self.width) / 2.0, (side - self.height) / 2.0, side)
    }
}

/// Geometric augmentations applied to scenes during RL rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Augmentation {
    HFlip,
    Resize { sx: f64, sy: f64 },
    Crop { window: BBox, min_retained: f64 },
    SquareResize,
}

/// Result of co-transforming a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transformed {
    Kept(BBox),
    Dropped,
}

impl Transformed {
    pub fn kept(self) -> Option<BBox> {
        match self {
            Transformed::Kept(b) => Some(b),
            Transformed::Dropped => None,
        }
    }
}

impl Augmentation {
    pub fn crop(window: BBox) -> Self {
        Augmentation::Crop {
            window,
            min_retained: DEFAULT_CROP_MIN_RETAINED,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        match *self {
            Augmentation::Resize { sx, sy } => {
                if !(sx.is_finite() && sy.is_finite() && sx > 0.0 && sy > 0.0) {
                    return Err(GeometryError::InvalidAugmentation(format!(
                        "resize scales must be positive, got ({sx}, {sy})"
                    )));
                }
            }
            Augmentation::Crop { min_retained, .. } => {
                if !(min_retained > 0.0 && min_retained <= 1.0) {
                    return Err(GeometryError::InvalidAugmentation(format!(
                        "crop retention threshold must be in (0, 1], got {min_retained}"
                    )));
                }
            }
            Augmentation::HFlip | Augmentation::SquareResize => {}
        }
        Ok(())
    }

    /// Canvas after the augmentation.
    pub fn transform_canvas(&self, canvas: &Canvas) -> Canvas {
        match *self {
            Augmentation::HFlip => *canvas,
            Augmentation::Resize { sx, sy } => Canvas::new(canvas.width * sx, canvas.height * sy),
            Augmentation::Crop { window, .. } => Canvas::new(
                canvas.width * window.width(),
                canvas.height * window.height(),
            ),
            Augmentation::SquareResize => {
                let (_, _, side) = canvas.square_padding();
                Canvas::new(side, side)
            }
        }
    }

    /// Maps a box into the augmented frame, clipping to the new canvas.
    /// Unlike [`apply_augmentation`] this ignores the crop retention rule
    /// and only fails when nothing of the box is left.
    pub fn transform_box(&self, b: &BBox, canvas: &Canvas) -> Option<BBox> {
        match *self {
            Augmentation::HFlip => Some(b.hflip()),
            Augmentation::Resize { .. } => Some(*b),
            Augmentation::Crop { window, .. } => {
                let (ww, wh) = (window.width(), window.height());
                BBox::from_clipped(
                    (b.x1 - window.x1) / ww,
                    (b.y1 - window.y1) / wh,
                    (b.x2 - window.x1) / ww,
                    (b.y2 - window.y1) / wh,
                )
            }
            Augmentation::SquareResize => {
                let (ox, oy, side) = canvas.square_padding();
                let (w, h) = (canvas.width, canvas.height);
                BBox::from_clipped(
                    (b.x1 * w + ox) / side,
                    (b.y1 * h + oy) / side,
                    (b.x2 * w + ox) / side,
                    (b.y2 * h + oy) / side,
                )
            }
        }
    }
}

/// Co-transforms a box under an augmentation. Crops drop the box when less
/// than `min_retained` of its area stays inside the window.
pub fn apply_augmentation(aug: &Augmentation, b: &BBox, canvas: &Canvas) -> Transformed {
    if let Augmentation::Crop {
        window,
        min_retained,
    } = aug
    {
        let retained = b.intersection_area(window) / b.area();
        if retained < *min_retained {
            return Transformed::Dropped;
        }
    }
    match aug.transform_box(b, canvas) {
        Some(out) => Transformed::Kept(out),
        None => Transformed::Dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rejects_degenerate_and_out_of_range() {
        assert!(matches!(
            BBox::new(0.2, 0.2, 0.2, 0.5),
            Err(GeometryError::Degenerate(..))
        ));
        assert!(matches!(
            BBox::new(0.5, 0.2, 0.1, 0.5),
            Err(GeometryError::Degenerate(..))
        ));
        assert!(matches!(
            BBox::new(-0.1, 0.2, 0.3, 0.5),
            Err(GeometryError::OutOfRange(..))
        ));
        assert!(matches!(
            BBox::new(0.1, 0.2, 0.3, f64::NAN),
            Err(GeometryError::NonFinite(..))
        ));
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.1, 0.1, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bb(0.0, 0.0, 0.2, 0.2), &bb(0.5, 0.5, 0.9, 0.9)), 0.0);
        let v = iou(&bb(0.0, 0.0, 0.2, 0.2), &bb(0.1, 0.1, 0.3, 0.3));
        assert!(close(v, 0.01 / 0.07, 1e-12));
    }

    #[test]
    fn diou_examples() {
        let a = bb(0.13, 0.2, 0.61, 0.77);
        assert!(close(diou(&a, &a), 1.0, 1e-15));
        let v = diou(&bb(0.0, 0.0, 0.1, 0.1), &bb(0.2, 0.0, 0.3, 0.1));
        assert!(close(v, -0.4, 1e-12));
        let outer = bb(0.2, 0.2, 0.8, 0.8);
        let inner = bb(0.3, 0.3, 0.7, 0.7);
        assert!(close(diou(&outer, &inner), iou(&outer, &inner), 1e-15));
    }

    #[test]
    fn enclosing_examples() {
        let a = bb(0.0, 0.0, 0.1, 0.1);
        assert_eq!(enclosing_box(&a, &a), a);
        assert_eq!(
            enclosing_box(&a, &bb(0.5, 0.5, 0.6, 0.6)),
            bb(0.0, 0.0, 0.6, 0.6)
        );
    }

    #[test]
    fn augmentation_examples() {
        let canvas = Canvas::new(1000.0, 1000.0);
        let flipped = apply_augmentation(&Augmentation::HFlip, &bb(0.1, 0.2, 0.3, 0.4), &canvas)
            .kept()
            .unwrap();
        for (got, want) in flipped.corners().iter().zip([0.7, 0.2, 0.9, 0.4]) {
            assert!(close(*got, want, 1e-12));
        }

        let crop = Augmentation::crop(bb(0.0, 0.0, 0.5, 0.5));
        assert_eq!(
            apply_augmentation(&crop, &bb(0.6, 0.6, 0.8, 0.8), &canvas),
            Transformed::Dropped
        );
        let kept = apply_augmentation(&crop, &bb(0.1, 0.1, 0.2, 0.2), &canvas)
            .kept()
            .unwrap();
        for (got, want) in kept.corners().iter().zip([0.2, 0.2, 0.4, 0.4]) {
            assert!(close(*got, want, 1e-12));
        }
    }

    #[test]
    fn crop_threshold_boundary() {
        let canvas = Canvas::new(1000.0, 1000.0);
        // Exactly 25% of the box survives: kept.
        let crop = Augmentation::crop(bb(0.0, 0.0, 0.5, 1.0));
        let b = bb(0.375, 0.125, 0.875, 0.25);
        assert!(apply_augmentation(&crop, &b, &canvas).kept().is_some());
        let b = bb(0.376, 0.125, 0.876, 0.25);
        assert_eq!(apply_augmentation(&crop, &b, &canvas), Transformed::Dropped);
    }

    #[test]
    fn square_resize_pads_short_side() {
        let canvas = Canvas::new(1000.0, 500.0);
        let out = Augmentation::SquareResize
            .transform_box(&bb(0.0, 0.0, 1.0, 1.0), &canvas)
            .unwrap();
        for (got, want) in out.corners().iter().zip([0.0, 0.25, 1.0, 0.75]) {
            assert!(close(*got, want, 1e-12));
        }
        assert_eq!(
            Augmentation::SquareResize.transform_canvas(&canvas),
            Canvas::new(1000.0, 1000.0)
        );
    }

    #[test]
    fn invalid_augmentations() {
        assert!(Augmentation::Resize { sx: 0.0, sy: 1.0 }.validate().is_err());
        assert!(Augmentation::Crop {
            window: bb(0.0, 0.0, 0.5, 0.5),
            min_retained: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn serde_uses_corner_arrays() {
        let b = bb(0.25, 0.5, 0.75, 1.0);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[0.25,0.5,0.75,1.0]");
        let back: BBox = serde_json::from_str("[0.25,0.5,0.75,1.0]").unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BBox>("[0.5,0.5,0.5,1.0]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64).prop_filter_map(
            "valid box",
            |(x, y, w, h)| BBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).ok(),
        )
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn diou_never_exceeds_iou(a in arb_box(), b in arb_box()) {
            let d = diou(&a, &b);
            prop_assert!(d <= iou(&a, &b) + 1e-15);
            prop_assert!(d > -1.0 && d <= 1.0);
        }

        #[test]
        fn enclosing_is_tight(a in arb_box(), b in arb_box()) {
            let e = enclosing_box(&a, &b);
            prop_assert!(e.contains(&a) && e.contains(&b));
            // Every edge touches one of the inputs.
            prop_assert!(e.x1() == a.x1() || e.x1() == b.x1());
            prop_assert!(e.y1() == a.y1() || e.y1() == b.y1());
            prop_assert!(e.x2() == a.x2() || e.x2() == b.x2());
            prop_assert!(e.y2() == a.y2() || e.y2() == b.y2());
        }

        #[test]
        fn hflip_is_involution(a in arb_box()) {
            prop_assert_eq!(a.hflip().hflip(), a);
        }

        #[test]
        fn diou_decreases_with_center_distance(
            w in 0.05..0.2f64, h in 0.05..0.2f64, d1 in 0.0..0.3f64, gap in 0.001..0.3f64,
        ) {
            let fixed = BBox::new(0.1, 0.4, 0.1 + w, 0.4 + h).unwrap();
            let near = BBox::new(0.1 + d1, 0.4, 0.1 + d1 + w, 0.4 + h).unwrap();
            let far = BBox::new(0.1 + d1 + gap, 0.4, 0.1 + d1 + gap + w, 0.4 + h).unwrap();
            prop_assert!(diou(&fixed, &far) < diou(&fixed, &near));
        }
    }
}
