//! Simulated detector tools behind a single function-calling interface.
//!
//! A [`ToolProfile`] is a parametric error model of a detector: how often it
//! fires on a lesion, how many candidates it returns, how noisy the boxes
//! are, how often the label is right, and how its confidences are
//! calibrated. The two stock profiles reproduce a sparse, selective
//! detector and a dense, ambiguous one.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{jitter_box, Scene};
use crate::geometry::{iou, BBox};
use crate::label::Category;
use crate::seed::Rng;

/// Distractors must overlap the lesion less than this.
const DISTRACTOR_MAX_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToolError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("tool `{0}` is already registered")]
    Duplicate(String),
    #[error("invalid tool profile `{name}`: {reason}")]
    InvalidProfile { name: String, reason: String },
}

/// One candidate returned by a detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub label: Category,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRequest {
    pub tool: String,
    pub scene_id: String,
    pub query: Option<u32>,
}

/// Detections in strictly descending confidence order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ToolResponse {
    pub detections: Vec<Detection>,
    pub seq: u32,
}

impl ToolResponse {
    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn top(&self) -> Option<&Detection> {
        self.detections.first()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("responses always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Total order used for responses: confidence descending, then label id,
/// then corners lexicographically.
pub fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.label.cmp(&b.label))
        .then(a.bbox.lex_cmp(&b.bbox))
}

/// Beta(α, β) parameters of a confidence distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolProfile {
    pub name: String,
    /// Probability of at least one candidate on a positive scene.
    pub coverage: f64,
    /// Mean candidates per covered scene (zero-truncated Poisson).
    pub candidate_count_mean: f64,
    /// Per-corner Gaussian noise on the lesion-anchored candidate.
    pub box_noise_sigma: f64,
    /// Probability that the lesion-anchored candidate has the right label.
    pub label_accuracy: f64,
    /// Probability of any output on a negative scene.
    pub false_positive_rate: f64,
    pub confidence_correct: BetaParams,
    pub confidence_incorrect: BetaParams,
}

impl ToolProfile {
    /// Low coverage, about one high-confidence candidate when it fires.
    pub fn sparse() -> Self {
        Self {
            name: "sparse".into(),
            coverage: 0.314,
            candidate_count_mean: 1.0,
            box_noise_sigma: 0.01,
            label_accuracy: 0.92,
            false_positive_rate: 0.02,
            confidence_correct: BetaParams {
                alpha: 8.0,
                beta: 2.0,
            },
            confidence_incorrect: BetaParams {
                alpha: 2.0,
                beta: 4.0,
            },
        }
    }

    /// High coverage with several competing candidates.
    pub fn dense() -> Self {
        Self {
            name: "dense".into(),
            coverage: 0.952,
            candidate_count_mean: 2.16,
            box_noise_sigma: 0.02,
            label_accuracy: 0.75,
            false_positive_rate: 0.3,
            ..Self::sparse()
        }
    }

    pub fn validate(&self) -> Result<(), ToolError> {
        let fail = |reason: String| {
            Err(ToolError::InvalidProfile {
                name: self.name.clone(),
                reason,
            })
        };
        for (field, p) in [
            ("coverage", self.coverage),
            ("label_accuracy", self.label_accuracy),
            ("false_positive_rate", self.false_positive_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{field} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.candidate_count_mean.is_finite() && self.candidate_count_mean >= 1.0) {
            return fail(format!(
                "candidate_count_mean must be >= 1, got {}",
                self.candidate_count_mean
            ));
        }
        if !(self.box_noise_sigma.is_finite() && self.box_noise_sigma >= 0.0) {
            return fail(format!(
                "box_noise_sigma must be nonnegative, got {}",
                self.box_noise_sigma
            ));
        }
        for p in [self.confidence_correct, self.confidence_incorrect] {
            if !(p.alpha > 0.0 && p.beta > 0.0 && p.alpha.is_finite() && p.beta.is_finite()) {
                return fail(format!(
                    "beta parameters must be positive, got ({}, {})",
                    p.alpha, p.beta
                ));
            }
        }
        Ok(())
    }
}

/// Rate λ of a Poisson whose zero-truncated mean is `mean`.
fn truncated_poisson_rate(mean: f64) -> f64 {
    if mean <= 1.0 {
        return 0.0;
    }
    let truncated_mean = |l: f64| l / (1.0 - (-l).exp());
    let (mut lo, mut hi) = (1e-12, mean);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if truncated_mean(mid) < mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Inverse-CDF draw from a zero-truncated Poisson with rate `rate`.
fn sample_truncated_poisson(rate: f64, rng: &mut Rng) -> usize {
    if rate <= 0.0 {
        return 1;
    }
    let u: f64 = rng.random();
    let mut p = rate * (-rate).exp() / (1.0 - (-rate).exp());
    let mut cdf = p;
    let mut k = 1;
    while u > cdf && k < 1000 {
        k += 1;
        p *= rate / k as f64;
        cdf += p;
    }
    k
}

fn beta(p: BetaParams) -> Beta<f64> {
    Beta::new(p.alpha, p.beta).expect("validated beta parameters")
}

fn random_box(rng: &mut Rng) -> BBox {
    loop {
        let w = rng.random_range(0.05..=0.5);
        let h = rng.random_range(0.05..=0.5);
        let x = rng.random_range(0.0..=1.0 - w);
        let y = rng.random_range(0.0..=1.0 - h);
        if let Some(b) = BBox::from_clipped(x, y, x + w, y + h) {
            return b;
        }
    }
}

fn distractor_box(rng: &mut Rng, lesion: Option<&BBox>) -> BBox {
    let mut b = random_box(rng);
    if let Some(lesion) = lesion {
        while iou(&b, lesion) >= DISTRACTOR_MAX_IOU {
            b = random_box(rng);
        }
    }
    b
}

/// Runs the simulated detector on the latent scene. The response depends
/// only on `(profile, scene, rng state)`.
pub fn invoke(profile: &ToolProfile, scene: &Scene, seq: u32, rng: &mut Rng) -> ToolResponse {
    let k = scene.num_categories;
    let rate = truncated_poisson_rate(profile.candidate_count_mean);
    let wrong = beta(profile.confidence_incorrect);
    let right = beta(profile.confidence_correct);
    let mut detections = Vec::new();

    match &scene.gt {
        Some((lesion, truth)) => {
            if rng.random::<f64>() < profile.coverage {
                let count = sample_truncated_poisson(rate, rng);
                let sigma = profile.box_noise_sigma * scene.tool_noise_mult;
                let bbox = jitter_box(rng, lesion, sigma);
                let (label, confidence) = if rng.random::<f64>() < profile.label_accuracy {
                    (*truth, right.sample(rng))
                } else {
                    let other = rng.random_range(1..k);
                    let label = if other >= truth.0 { other + 1 } else { other };
                    (Category(label), wrong.sample(rng))
                };
                detections.push(Detection {
                    bbox,
                    label,
                    confidence,
                });
                for _ in 1..count {
                    detections.push(Detection {
                        bbox: distractor_box(rng, Some(lesion)),
                        label: Category(rng.random_range(1..=k)),
                        confidence: wrong.sample(rng),
                    });
                }
            }
        }
        None => {
            if rng.random::<f64>() < profile.false_positive_rate {
                let count = sample_truncated_poisson(rate, rng);
                for _ in 0..count {
                    detections.push(Detection {
                        bbox: distractor_box(rng, None),
                        label: Category(rng.random_range(1..=k)),
                        confidence: wrong.sample(rng),
                    });
                }
            }
        }
    }
    detections.sort_by(detection_order);
    ToolResponse { detections, seq }
}

/// Detector-only diagnosis: the top-ranked label, or "no lesion" when the
/// tool returned nothing.
pub fn top1_diagnosis(resp: &ToolResponse) -> Category {
    resp.top().map_or(Category::NEGATIVE, |d| d.label)
}

/// Named tool profiles. Callers refer to tools by name only, so swapping a
/// detector means registering a different profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolRegistry {
    profiles: BTreeMap<String, ToolProfile>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_defaults() -> Self {
        let mut reg = Self::new();
        reg.register(ToolProfile::sparse()).expect("fresh registry");
        reg.register(ToolProfile::dense()).expect("fresh registry");
        reg
    }

    pub fn register(&mut self, profile: ToolProfile) -> Result<(), ToolError> {
        profile.validate()?;
        if self.profiles.contains_key(&profile.name) {
            return Err(ToolError::Duplicate(profile.name));
        }
        self.profiles.insert(profile.name.clone(), profile);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ToolProfile, ToolError> {
        self.profiles
            .get(name)
            .ok_or_else(|| ToolError::UnknownTool(name.to_string()))
    }

    /// Names in sorted order.
    pub fn names(&self) -> Vec<&str> {
        self.profiles.keys().map(String::as_str).collect()
    }

    pub fn profiles(&self) -> impl Iterator<Item = &ToolProfile> {
        self.profiles.values()
    }

    /// Serves a structured request. The query category is accepted but the
    /// stock profiles ignore it.
    pub fn call(
        &self,
        request: &ToolRequest,
        scene: &Scene,
        seq: u32,
        rng: &mut Rng,
    ) -> Result<ToolResponse, ToolError> {
        let profile = self.get(&request.tool)?;
        Ok(invoke(profile, scene, seq, rng))
    }
}

/// Aggregate behavior of a tool over many positive scenes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolStats {
    pub profile: String,
    pub n: usize,
    pub coverage: f64,
    pub mean_candidates_per_covered: f64,
    pub top1_label_accuracy: f64,
    pub anchor_label_accuracy: f64,
    /// Counts of candidate confidences in ten equal bins over `[0, 1]`.
    pub confidence_histogram: [u64; 10],
}

/// Empirical statistics of `invoke` over the given positive scenes, each
/// with its own substream from `rng_for`.
pub fn tool_stats(
    profile: &ToolProfile,
    scenes: &[Scene],
    mut rng_for: impl FnMut(usize) -> Rng,
) -> ToolStats {
    let mut covered = 0usize;
    let mut candidates = 0usize;
    let mut top1_right = 0usize;
    let mut anchor_right = 0usize;
    let mut hist = [0u64; 10];
    for (i, scene) in scenes.iter().enumerate() {
        let mut rng = rng_for(i);
        let resp = invoke(profile, scene, 0, &mut rng);
        for d in &resp.detections {
            let bin = ((d.confidence * 10.0) as usize).min(9);
            hist[bin] += 1;
        }
        if resp.is_empty() {
            continue;
        }
        covered += 1;
        candidates += resp.detections.len();
        if let Some((lesion, truth)) = &scene.gt {
            if top1_diagnosis(&resp) == *truth {
                top1_right += 1;
            }
            // The anchor is the candidate that overlaps the lesion.
            let anchor = resp
                .detections
                .iter()
                .max_by(|a, b| iou(&a.bbox, lesion).total_cmp(&iou(&b.bbox, lesion)));
            if anchor.is_some_and(|a| a.label == *truth) {
                anchor_right += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    ToolStats {
        profile: profile.name.clone(),
        n: scenes.len(),
        coverage: ratio(covered, scenes.len()),
        mean_candidates_per_covered: ratio(candidates, covered),
        top1_label_accuracy: ratio(top1_right, covered),
        anchor_label_accuracy: ratio(anchor_right, covered),
        confidence_histogram: hist,
    }
}
