//! Composite episode reward: a smoothed localization term, a localization-gated
//! classification term, a DIoU shape term, and a fixed cost per tool call.
//!
//! The grounding and diagnosis profiles use the same terms with different
//! weights. Weights are normalized, so before tool cost the composite lies in
//! `[0, 1]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{diou, iou, BBox};
use crate::label::Category;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("reward weights must be nonnegative and sum to 1, got ({0}, {1}, {2})")]
    Weights(f64, f64, f64),
    #[error("tool cost must be a finite nonnegative number, got {0}")]
    ToolCost(f64),
    #[error("thresholds must satisfy 0 < iou_floor < cls_gate < 1, got iou_floor={0}, cls_gate={1}")]
    Thresholds(f64, f64),
    #[error("base score must lie in (0, 1), got {0}")]
    BaseScore(f64),
    #[error("smoothing exponent must be positive, got {0}")]
    Exponent(f64),
}

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Weights, thresholds and tool cost for one optimization phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardProfile {
    pub name: String,
    pub w_loc: f64,
    pub w_cls: f64,
    pub w_shape: f64,
    /// Cost charged per tool invocation.
    pub tool_cost: f64,
    /// Minimum IoU for a nonzero localization reward.
    pub iou_floor: f64,
    /// Localization reward at exactly `iou_floor`.
    pub base_score: f64,
    /// IoU needed before a correct label earns the classification reward.
    pub cls_gate: f64,
    /// Shape of the ramp above `iou_floor`; 1 is linear.
    #[serde(default = "default_exponent")]
    pub smoothing_exponent: f64,
}

fn default_exponent() -> f64 {
    1.0
}

impl RewardProfile {
    fn with_weights(name: &str, w_loc: f64, w_cls: f64, w_shape: f64) -> Self {
        Self {
            name: name.to_string(),
            w_loc,
            w_cls,
            w_shape,
            tool_cost: 0.05,
            iou_floor: 0.1,
            base_score: 0.2,
            cls_gate: 0.5,
            smoothing_exponent: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let ws = [self.w_loc, self.w_cls, self.w_shape];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0)
            || (ws.iter().sum::<f64>() - 1.0).abs() > WEIGHT_SUM_TOL
        {
            return Err(RewardError::Weights(self.w_loc, self.w_cls, self.w_shape));
        }
        if !(self.tool_cost.is_finite() && self.tool_cost >= 0.0) {
            return Err(RewardError::ToolCost(self.tool_cost));
        }
        if !(0.0 < self.iou_floor && self.iou_floor < self.cls_gate && self.cls_gate < 1.0) {
            return Err(RewardError::Thresholds(self.iou_floor, self.cls_gate));
        }
        if !(0.0 < self.base_score && self.base_score < 1.0) {
            return Err(RewardError::BaseScore(self.base_score));
        }
        if !(self.smoothing_exponent.is_finite() && self.smoothing_exponent > 0.0) {
            return Err(RewardError::Exponent(self.smoothing_exponent));
        }
        Ok(())
    }
}

/// Localization- and shape-heavy weights for the first phase.
pub fn grounding_profile() -> RewardProfile {
    RewardProfile::with_weights("grounding", 0.5, 0.2, 0.3)
}

/// Classification-heavy weights for the second phase; the box terms keep a
/// nonzero share.
pub fn diagnosis_profile() -> RewardProfile {
    RewardProfile::with_weights("diagnosis", 0.2, 0.6, 0.2)
}

/// Zero below `iou_floor`, then a ramp from `base_score` up to 1 at IoU 1.
pub fn localization_reward(iou_val: f64, profile: &RewardProfile) -> f64 {
    if iou_val < profile.iou_floor {
        return 0.0;
    }
    let t = ((iou_val - profile.iou_floor) / (1.0 - profile.iou_floor)).clamp(0.0, 1.0);
    profile.base_score + (1.0 - profile.base_score) * t.powf(profile.smoothing_exponent)
}

/// 1 when the label is right and, for positive scenes, the box clears the
/// gate. On negative scenes only the label counts.
pub fn classification_reward(
    iou_val: f64,
    label_pred: Category,
    label_gt: Category,
    profile: &RewardProfile,
) -> f64 {
    let localized = label_gt.is_negative() || iou_val >= profile.cls_gate;
    if localized && label_pred == label_gt {
        1.0
    } else {
        0.0
    }
}

/// DIoU mapped from `(-1, 1]` onto `(0, 1]`.
pub fn shape_reward(pred: &BBox, gt: &BBox) -> f64 {
    (diou(pred, gt) + 1.0) / 2.0
}

/// Per-term rewards and the weighted total for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_loc: f64,
    pub r_cls: f64,
    pub r_shape: f64,
    pub tool_calls: u32,
    pub tool_cost_total: f64,
    pub composite: f64,
}

impl RewardBreakdown {
    /// Recomputes the composite from the stored terms.
    pub fn recompute(&self, profile: &RewardProfile) -> f64 {
        profile.w_loc * self.r_loc + profile.w_cls * self.r_cls + profile.w_shape * self.r_shape
            - self.tool_cost_total
    }
}

pub fn compose(
    r_loc: f64,
    r_cls: f64,
    r_shape: f64,
    tool_calls: u32,
    profile: &RewardProfile,
) -> RewardBreakdown {
    let tool_cost_total = f64::from(tool_calls) * profile.tool_cost;
    let composite = profile.w_loc * r_loc + profile.w_cls * r_cls + profile.w_shape * r_shape
        - tool_cost_total;
    RewardBreakdown {
        r_loc,
        r_cls,
        r_shape,
        tool_calls,
        tool_cost_total,
        composite,
    }
}

/// What the agent finally committed to. A negative category carries no box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundedOutput {
    pub bbox: Option<BBox>,
    pub category: Category,
}

impl GroundedOutput {
    pub fn new(bbox: BBox, category: Category) -> Self {
        if category.is_negative() {
            Self::negative()
        } else {
            Self {
                bbox: Some(bbox),
                category,
            }
        }
    }

    pub fn negative() -> Self {
        Self {
            bbox: None,
            category: Category::NEGATIVE,
        }
    }
}

/// IoU of the output against the lesion, 0 when either side has no box.
pub fn output_iou(gt: Option<&(BBox, Category)>, out: &GroundedOutput) -> f64 {
    match (gt, out.bbox) {
        (Some((gt_box, _)), Some(b)) => iou(&b, gt_box),
        _ => 0.0,
    }
}

/// Scores one episode. On negative scenes, and whenever the agent answers
/// "no lesion", the box terms are 0.
pub fn score_episode(
    gt: Option<&(BBox, Category)>,
    out: &GroundedOutput,
    tool_calls: u32,
    profile: &RewardProfile,
) -> RewardBreakdown {
    match (gt, out.bbox) {
        (Some((gt_box, gt_cat)), Some(pred_box)) => {
            let v = iou(&pred_box, gt_box);
            compose(
                localization_reward(v, profile),
                classification_reward(v, out.category, *gt_cat, profile),
                shape_reward(&pred_box, gt_box),
                tool_calls,
                profile,
            )
        }
        (Some(_), None) => compose(0.0, 0.0, 0.0, tool_calls, profile),
        (None, _) => compose(
            0.0,
            classification_reward(0.0, out.category, Category::NEGATIVE, profile),
            0.0,
            tool_calls,
            profile,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn localization_examples() {
        let p = grounding_profile();
        assert_eq!(localization_reward(0.0, &p), 0.0);
        assert_eq!(localization_reward(1.0, &p), 1.0);
        // 0.2 + 0.8 * (0.45 / 0.9), evaluated independently.
        let expected = 0.2 + 0.8 * 0.5;
        assert!((localization_reward(0.55, &p) - expected).abs() < 1e-12);
        assert_eq!(localization_reward(0.1, &p), 0.2);
        assert_eq!(localization_reward(0.0999, &p), 0.0);
    }

    #[test]
    fn exponent_variant_keeps_endpoints() {
        let mut p = grounding_profile();
        p.smoothing_exponent = 2.0;
        assert_eq!(localization_reward(p.iou_floor, &p), p.base_score);
        assert_eq!(localization_reward(1.0, &p), 1.0);
        assert!((localization_reward(0.55, &p) - (0.2 + 0.8 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn classification_gate() {
        let p = grounding_profile();
        let (a, b) = (Category(2), Category(3));
        assert_eq!(classification_reward(0.8, a, a, &p), 1.0);
        assert_eq!(classification_reward(0.8, a, b, &p), 0.0);
        assert_eq!(classification_reward(0.3, a, a, &p), 0.0);
        assert_eq!(classification_reward(0.5, a, a, &p), 1.0);
        // Negative scenes ignore the gate.
        assert_eq!(
            classification_reward(0.0, Category::NEGATIVE, Category::NEGATIVE, &p),
            1.0
        );
        assert_eq!(classification_reward(0.0, a, Category::NEGATIVE, &p), 0.0);
    }

    #[test]
    fn shape_examples() {
        let g = bb(0.3, 0.3, 0.6, 0.7);
        assert_eq!(shape_reward(&g, &g), 1.0);
        let v = shape_reward(&bb(0.0, 0.0, 0.1, 0.1), &bb(0.2, 0.0, 0.3, 0.1));
        assert!((v - 0.3).abs() < 1e-12);
        let tiny = bb(0.0, 0.0, 0.001, 0.001);
        let near = shape_reward(&tiny, &bb(0.1, 0.1, 0.101, 0.101));
        let far = shape_reward(&tiny, &bb(0.999, 0.999, 1.0, 1.0));
        assert!(far > 0.0 && far < near && far < 5e-3);
    }

    #[test]
    fn compose_examples() {
        let p = grounding_profile();
        assert!((compose(1.0, 1.0, 1.0, 0, &p).composite - 1.0).abs() < 1e-12);
        assert!((compose(1.0, 1.0, 1.0, 2, &p).composite - 0.9).abs() < 1e-12);
        assert!(compose(0.0, 0.0, 1e-6, 1, &p).composite < 0.0);
        let b = compose(0.3, 1.0, 0.7, 3, &p);
        assert_eq!(b.recompute(&p), b.composite);
    }

    #[test]
    fn profiles_are_valid_and_ordered() {
        let g = grounding_profile();
        let d = diagnosis_profile();
        g.validate().unwrap();
        d.validate().unwrap();
        assert!(d.w_cls > g.w_cls);
        assert!(d.w_loc > 0.0 && d.w_shape > 0.0);
        assert!(g.w_loc + g.w_shape > d.w_loc + d.w_shape);
    }

    #[test]
    fn validation_rejects_bad_profiles() {
        let mut p = grounding_profile();
        p.w_cls = 0.3;
        assert!(matches!(p.validate(), Err(RewardError::Weights(..))));
        let mut p = grounding_profile();
        p.cls_gate = 0.05;
        assert!(matches!(p.validate(), Err(RewardError::Thresholds(..))));
        let mut p = grounding_profile();
        p.tool_cost = -0.1;
        assert!(matches!(p.validate(), Err(RewardError::ToolCost(..))));
        let mut p = grounding_profile();
        p.base_score = 1.0;
        assert!(matches!(p.validate(), Err(RewardError::BaseScore(..))));
    }

    #[test]
    fn negative_answers_get_no_box_credit() {
        let p = diagnosis_profile();
        let gt = (bb(0.2, 0.2, 0.4, 0.4), Category(1));
        let out = GroundedOutput::new(bb(0.2, 0.2, 0.4, 0.4), Category::NEGATIVE);
        assert_eq!(out.bbox, None);
        let r = score_episode(Some(&gt), &out, 0, &p);
        assert_eq!((r.r_loc, r.r_cls, r.r_shape), (0.0, 0.0, 0.0));

        let r = score_episode(None, &GroundedOutput::negative(), 1, &p);
        assert_eq!(r.r_cls, 1.0);
        assert!((r.composite - (p.w_cls - p.tool_cost)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn localization_is_monotone(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let p = grounding_profile();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(localization_reward(lo, &p) <= localization_reward(hi, &p));
        }

        #[test]
        fn compose_is_linear_and_cost_affine(
            l in 0.0..=1.0f64, c in 0.0..=1.0f64, s in 0.0..=1.0f64, n in 0u32..10,
        ) {
            let p = diagnosis_profile();
            let base = compose(l, c, s, n, &p).composite;
            let more = compose(l, c, s, n + 1, &p).composite;
            prop_assert!(more < base);
            prop_assert!((base - more - p.tool_cost).abs() < 1e-12);
        }
    }
}
