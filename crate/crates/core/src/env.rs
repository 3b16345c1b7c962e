//! Synthetic lesion scenes and the agent's noisy view of them.
//!
//! A scene is a latent state (ground-truth lesion or none, canvas size,
//! acquisition center). The agent never sees it directly: it receives an
//! [`Observation`] with a perturbed box, pseudo-logits over the diagnosis
//! classes and a small clinical-context vector. Detector tools read the
//! latent scene.

use std::fmt;

use rand::Rng as _;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_augmentation, Augmentation, BBox, Canvas, Transformed};
use crate::label::Category;
use crate::seed::{self, Rng};

pub const CONTEXT_DIM: usize = 4;

/// Nominal canvas used when exporting scenes as COCO annotations.
pub const EXPORT_CANVAS: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("seed ranges for {0} and {1} overlap")]
    OverlappingSeeds(Split, Split),
    #[error("{split} split holds {capacity} scenes, requested {requested}")]
    SplitExhausted {
        split: Split,
        capacity: u64,
        requested: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Center {
    A,
    B,
}

impl fmt::Display for Center {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Center::A => f.write_str("A"),
            Center::B => f.write_str("B"),
        }
    }
}

/// Executable scenario kinds, a coarse mapping of the supervised curriculum
/// tiers onto environment behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Always positive.
    Grounding,
    /// Always positive, with a degraded perceived box and label.
    Refinement,
    /// Positive or negative at the configured negative rate.
    Diagnosis,
}

/// Per-center distribution shift. Center A is the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterShift {
    pub obs_noise_mult: f64,
    /// Lesion category weights; empty means uniform.
    #[serde(default)]
    pub category_prior: Vec<f64>,
    /// Overrides the lesion area range when set.
    #[serde(default)]
    pub area_range: Option<[f64; 2]>,
    pub tool_noise_mult: f64,
}

impl CenterShift {
    pub fn identity() -> Self {
        Self {
            obs_noise_mult: 1.0,
            category_prior: Vec::new(),
            area_range: None,
            tool_noise_mult: 1.0,
        }
    }

    fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Number of lesion categories K; class 0 is "no lesion".
    pub num_categories: u32,
    /// Fraction of negative scenes in the Diagnosis kind.
    pub negative_rate: f64,
    /// Lesion area range, as a fraction of the canvas.
    pub area_range: [f64; 2],
    /// Lesion width/height ratio range (sampled log-uniformly).
    pub aspect_range: [f64; 2],
    /// Canvas height range in pixels; width is fixed at 1000.
    pub canvas_height_range: [f64; 2],
    /// Per-corner Gaussian noise of the perceived box, normalized units.
    pub perceived_box_sigma: f64,
    /// Probability that the perceived logits peak on the true class.
    pub perceived_label_accuracy: f64,
    pub logit_margin: f64,
    pub logit_noise: f64,
    /// Extra logit mass on the true class, whether or not it is the peak.
    pub true_class_bump: f64,
    pub context_noise: f64,
    /// Noise multiplier for the Refinement kind.
    pub refinement_noise_mult: f64,
    /// Perceived-label accuracy for the Refinement kind.
    pub refinement_label_accuracy: f64,
    pub center_a: CenterShift,
    pub center_b: CenterShift,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_categories: 6,
            negative_rate: 0.3,
            area_range: [0.01, 0.25],
            aspect_range: [0.5, 2.0],
            canvas_height_range: [700.0, 1000.0],
            perceived_box_sigma: 0.08,
            perceived_label_accuracy: 0.6,
            logit_margin: 1.0,
            logit_noise: 1.0,
            true_class_bump: 0.5,
            context_noise: 0.5,
            refinement_noise_mult: 2.0,
            refinement_label_accuracy: 0.45,
            center_a: CenterShift::identity(),
            center_b: CenterShift {
                obs_noise_mult: 1.5,
                category_prior: vec![0.3, 0.25, 0.15, 0.1, 0.1, 0.1],
                area_range: Some([0.01, 0.16]),
                tool_noise_mult: 1.5,
            },
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), EnvError> {
    if cond {
        Ok(())
    } else {
        Err(EnvError::Config(msg()))
    }
}

fn unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        check(self.num_categories >= 2, || {
            format!("need at least 2 categories, got {}", self.num_categories)
        })?;
        check(
            unit(self.negative_rate) && self.negative_rate < 1.0,
            || format!("negative_rate must lie in [0, 1), got {}", self.negative_rate),
        )?;
        check_area_range(self.area_range)?;
        check(
            self.aspect_range[0] > 0.0 && self.aspect_range[0] <= self.aspect_range[1],
            || format!("bad aspect_range {:?}", self.aspect_range),
        )?;
        check(
            self.canvas_height_range[0] >= 1.0
                && self.canvas_height_range[0] <= self.canvas_height_range[1],
            || format!("bad canvas_height_range {:?}", self.canvas_height_range),
        )?;
        for (name, v) in [
            ("perceived_box_sigma", self.perceived_box_sigma),
            ("logit_margin", self.logit_margin),
            ("logit_noise", self.logit_noise),
            ("true_class_bump", self.true_class_bump),
            ("context_noise", self.context_noise),
            ("refinement_noise_mult", self.refinement_noise_mult),
        ] {
            check(v.is_finite() && v >= 0.0, || {
                format!("{name} must be finite and nonnegative, got {v}")
            })?;
        }
        check(self.logit_margin > 0.0, || "logit_margin must be positive".into())?;
        for (name, v) in [
            ("perceived_label_accuracy", self.perceived_label_accuracy),
            ("refinement_label_accuracy", self.refinement_label_accuracy),
        ] {
            check(unit(v), || format!("{name} must lie in [0, 1], got {v}"))?;
        }
        check(self.center_a.is_identity(), || {
            "center A must be the identity shift".into()
        })?;
        self.validate_shift(&self.center_b)
    }

    fn validate_shift(&self, s: &CenterShift) -> Result<(), EnvError> {
        check(
            s.obs_noise_mult.is_finite() && s.obs_noise_mult >= 0.0,
            || format!("obs_noise_mult must be nonnegative, got {}", s.obs_noise_mult),
        )?;
        check(
            s.tool_noise_mult.is_finite() && s.tool_noise_mult >= 0.0,
            || format!("tool_noise_mult must be nonnegative, got {}", s.tool_noise_mult),
        )?;
        if !s.category_prior.is_empty() {
            check(
                s.category_prior.len() == self.num_categories as usize,
                || {
                    format!(
                        "category_prior has {} entries for {} categories",
                        s.category_prior.len(),
                        self.num_categories
                    )
                },
            )?;
            check(
                s.category_prior.iter().all(|w| w.is_finite() && *w >= 0.0)
                    && s.category_prior.iter().sum::<f64>() > 0.0,
                || "category_prior must be nonnegative with positive mass".into(),
            )?;
        }
        if let Some(r) = s.area_range {
            check_area_range(r)?;
        }
        Ok(())
    }

    pub fn shift(&self, center: Center) -> &CenterShift {
        match center {
            Center::A => &self.center_a,
            Center::B => &self.center_b,
        }
    }

    /// Number of diagnosis classes including "no lesion".
    pub fn num_classes(&self) -> usize {
        self.num_categories as usize + 1
    }
}

fn check_area_range(r: [f64; 2]) -> Result<(), EnvError> {
    check(r[0] > 0.0 && r[0] <= r[1] && r[1] < 1.0, || {
        format!("area range must satisfy 0 < lo <= hi < 1, got {r:?}")
    })
}

/// Latent scene state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    /// 1-based id used when exporting a split as COCO images.
    pub image_id: u64,
    pub gt: Option<(BBox, Category)>,
    pub canvas: Canvas,
    pub center: Center,
    pub kind: ScenarioKind,
    pub num_categories: u32,
    /// Box-noise multiplier applied by detector tools at this center.
    pub tool_noise_mult: f64,
}

impl Scene {
    pub fn is_positive(&self) -> bool {
        self.gt.is_some()
    }

    /// Image-level diagnosis class.
    pub fn label(&self) -> Category {
        self.gt.map_or(Category::NEGATIVE, |(_, c)| c)
    }
}

/// What the agent perceives on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub perceived_box: BBox,
    /// K+1 pseudo-logits, index 0 being "no lesion".
    pub perceived_logits: Vec<f64>,
    pub context: [f64; CONTEXT_DIM],
}

impl Observation {
    pub fn perceived_label(&self) -> Category {
        Category(argmax(&self.perceived_logits) as u32)
    }
}

/// Index of the largest element, first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_lesion_box(rng: &mut Rng, area_range: [f64; 2], aspect_range: [f64; 2]) -> BBox {
    loop {
        let area = rng.random_range(area_range[0]..=area_range[1]);
        let log_aspect = rng.random_range(aspect_range[0].ln()..=aspect_range[1].ln());
        let aspect = log_aspect.exp();
        let w = (area * aspect).sqrt().min(0.95);
        let h = (area / aspect).sqrt().min(0.95);
        let x1 = rng.random_range(0.0..=1.0 - w);
        let y1 = rng.random_range(0.0..=1.0 - h);
        if let Ok(b) = BBox::new(x1, y1, (x1 + w).min(1.0), (y1 + h).min(1.0)) {
            return b;
        }
    }
}

/// Corner-wise Gaussian perturbation, clipped; falls back to the input box
/// when repeated draws collapse.
pub fn jitter_box(rng: &mut Rng, b: &BBox, sigma: f64) -> BBox {
    if sigma <= 0.0 {
        return *b;
    }
    let noise = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    for _ in 0..32 {
        let c = b.corners();
        let out = BBox::from_clipped(
            c[0] + noise.sample(rng),
            c[1] + noise.sample(rng),
            c[2] + noise.sample(rng),
            c[3] + noise.sample(rng),
        );
        if let Some(out) = out {
            return out;
        }
    }
    *b
}

fn perceived_logits(
    rng: &mut Rng,
    cfg: &EnvConfig,
    truth: Category,
    label_accuracy: f64,
) -> Vec<f64> {
    let n = cfg.num_classes();
    let mut logits: Vec<f64> = (0..n)
        .map(|_| {
            if cfg.logit_noise > 0.0 {
                Normal::new(0.0, cfg.logit_noise)
                    .expect("finite noise")
                    .sample(rng)
            } else {
                0.0
            }
        })
        .collect();
    logits[truth.index()] += cfg.true_class_bump;
    let peak = if rng.random::<f64>() < label_accuracy {
        truth.index()
    } else {
        let other = rng.random_range(0..n - 1);
        if other >= truth.index() {
            other + 1
        } else {
            other
        }
    };
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != peak)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[peak] = runner_up + cfg.logit_margin * rng.random_range(0.25..=1.25);
    logits
}

fn context_vector(rng: &mut Rng, cfg: &EnvConfig, truth: Category) -> [f64; CONTEXT_DIM] {
    let signal = if truth.is_negative() {
        0.0
    } else if truth.0 <= cfg.num_categories / 2 {
        1.0
    } else {
        -1.0
    };
    let mut ctx = [0.0; CONTEXT_DIM];
    for (i, c) in ctx.iter_mut().enumerate() {
        let noise = if cfg.context_noise > 0.0 {
            Normal::new(0.0, cfg.context_noise)
                .expect("finite noise")
                .sample(rng)
        } else {
            0.0
        };
        *c = if i == 0 { signal + noise } else { noise };
    }
    ctx
}

/// Draws one scene and its observation. Deterministic in `rng`.
pub fn generate_scene(
    cfg: &EnvConfig,
    kind: ScenarioKind,
    center: Center,
    scene_id: String,
    image_id: u64,
    rng: &mut Rng,
) -> (Scene, Observation) {
    let shift = cfg.shift(center);
    let positive = match kind {
        ScenarioKind::Grounding | ScenarioKind::Refinement => true,
        ScenarioKind::Diagnosis => rng.random::<f64>() >= cfg.negative_rate,
    };
    let height = rng
        .random_range(cfg.canvas_height_range[0]..=cfg.canvas_height_range[1])
        .round();
    let canvas = Canvas::new(EXPORT_CANVAS, height);
    let area_range = shift.area_range.unwrap_or(cfg.area_range);

    let gt = positive.then(|| {
        let b = sample_lesion_box(rng, area_range, cfg.aspect_range);
        let k = cfg.num_categories as usize;
        let idx = if shift.category_prior.is_empty() {
            rng.random_range(0..k)
        } else {
            WeightedIndex::new(&shift.category_prior)
                .expect("validated prior")
                .sample(rng)
        };
        (b, Category(idx as u32 + 1))
    });
    let truth = gt.map_or(Category::NEGATIVE, |(_, c)| c);

    let (noise_mult, label_accuracy) = match kind {
        ScenarioKind::Refinement => (cfg.refinement_noise_mult, cfg.refinement_label_accuracy),
        _ => (1.0, cfg.perceived_label_accuracy),
    };
    let perceived_box = match &gt {
        Some((b, _)) => jitter_box(
            rng,
            b,
            cfg.perceived_box_sigma * shift.obs_noise_mult * noise_mult,
        ),
        None => sample_lesion_box(rng, cfg.area_range, cfg.aspect_range),
    };
    let perceived_logits = perceived_logits(rng, cfg, truth, label_accuracy);
    let context = context_vector(rng, cfg, truth);

    let scene = Scene {
        scene_id,
        image_id,
        gt,
        canvas,
        center,
        kind,
        num_categories: cfg.num_categories,
        tool_noise_mult: shift.tool_noise_mult,
    };
    let obs = Observation {
        perceived_box,
        perceived_logits,
        context,
    };
    (scene, obs)
}

/// Applies an augmentation to the scene and the observation together.
/// Returns `None` when the lesion is cropped away or the perceived box
/// leaves the crop window entirely.
pub fn augment_scene(
    scene: &Scene,
    obs: &Observation,
    aug: &Augmentation,
) -> Option<(Scene, Observation)> {
    let gt = match scene.gt {
        Some((b, c)) => match apply_augmentation(aug, &b, &scene.canvas) {
            Transformed::Kept(nb) => Some((nb, c)),
            Transformed::Dropped => return None,
        },
        None => None,
    };
    let perceived_box = aug.transform_box(&obs.perceived_box, &scene.canvas)?;
    let mut out_scene = scene.clone();
    out_scene.gt = gt;
    out_scene.canvas = aug.transform_canvas(&scene.canvas);
    let mut out_obs = obs.clone();
    out_obs.perceived_box = perceived_box;
    Some((out_scene, out_obs))
}

/// RL-stage augmentation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub resize_prob: f64,
    pub resize_range: [f64; 2],
    pub crop_prob: f64,
    /// Minimum crop window side, as a fraction of the canvas.
    pub crop_min_side: f64,
    pub crop_min_retained: f64,
    pub square_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip_prob: 0.5,
            resize_prob: 0.5,
            resize_range: [0.75, 1.25],
            crop_prob: 0.3,
            crop_min_side: 0.6,
            crop_min_retained: crate::geometry::DEFAULT_CROP_MIN_RETAINED,
            square_prob: 0.3,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        for (name, p) in [
            ("hflip_prob", self.hflip_prob),
            ("resize_prob", self.resize_prob),
            ("crop_prob", self.crop_prob),
            ("square_prob", self.square_prob),
        ] {
            check(unit(p), || format!("{name} must lie in [0, 1], got {p}"))?;
        }
        check(
            self.resize_range[0] > 0.0 && self.resize_range[0] <= self.resize_range[1],
            || format!("bad resize_range {:?}", self.resize_range),
        )?;
        check(
            self.crop_min_side > 0.0 && self.crop_min_side <= 1.0,
            || format!("crop_min_side must lie in (0, 1], got {}", self.crop_min_side),
        )?;
        check(
            self.crop_min_retained > 0.0 && self.crop_min_retained <= 1.0,
            || {
                format!(
                    "crop_min_retained must lie in (0, 1], got {}",
                    self.crop_min_retained
                )
            },
        )
    }

    /// Draws the augmentation chain for one rollout wave, in the order
    /// flip, resize, crop, square.
    pub fn sample(&self, rng: &mut Rng) -> Vec<Augmentation> {
        let mut chain = Vec::new();
        if !self.enabled {
            return chain;
        }
        if rng.random::<f64>() < self.hflip_prob {
            chain.push(Augmentation::HFlip);
        }
        if rng.random::<f64>() < self.resize_prob {
            let [lo, hi] = self.resize_range;
            chain.push(Augmentation::Resize {
                sx: rng.random_range(lo..=hi),
                sy: rng.random_range(lo..=hi),
            });
        }
        if rng.random::<f64>() < self.crop_prob {
            let w = rng.random_range(self.crop_min_side..=1.0);
            let h = rng.random_range(self.crop_min_side..=1.0);
            let x = rng.random_range(0.0..=1.0 - w);
            let y = rng.random_range(0.0..=1.0 - h);
            if let Some(window) = BBox::from_clipped(x, y, x + w, y + h) {
                chain.push(Augmentation::Crop {
                    window,
                    min_retained: self.crop_min_retained,
                });
            }
        }
        if rng.random::<f64>() < self.square_prob {
            chain.push(Augmentation::SquareResize);
        }
        chain
    }
}

/// Applies a chain of augmentations; if any step drops the lesion, the
/// original scene is kept unchanged.
pub fn augment_chain(
    scene: &Scene,
    obs: &Observation,
    chain: &[Augmentation],
) -> (Scene, Observation, bool) {
    let mut cur = (scene.clone(), obs.clone());
    for aug in chain {
        match augment_scene(&cur.0, &cur.1, aug) {
            Some(next) => cur = next,
            None => return (scene.clone(), obs.clone(), false),
        }
    }
    (cur.0, cur.1, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl Split {
    /// In-center splits come from A, the test split from B.
    pub fn center(self) -> Center {
        match self {
            Split::Train | Split::Val => Center::A,
            Split::Test => Center::B,
        }
    }
}

/// Half-open range `[start, start + len)` of scene indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub len: u64,
}

impl SeedRange {
    fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.start.saturating_add(other.len)
            && other.start < self.start.saturating_add(self.len)
    }
}

/// Disjoint index ranges for the three splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPlan {
    pub train: SeedRange,
    pub val: SeedRange,
    pub test: SeedRange,
}

impl Default for SplitPlan {
    fn default() -> Self {
        const SPAN: u64 = 1 << 40;
        Self {
            train: SeedRange { start: 0, len: SPAN },
            val: SeedRange {
                start: SPAN,
                len: SPAN,
            },
            test: SeedRange {
                start: 2 * SPAN,
                len: SPAN,
            },
        }
    }
}

impl SplitPlan {
    pub fn validate(&self) -> Result<(), EnvError> {
        let all = [
            (Split::Train, self.train),
            (Split::Val, self.val),
            (Split::Test, self.test),
        ];
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if all[i].1.overlaps(&all[j].1) {
                    return Err(EnvError::OverlappingSeeds(all[i].0, all[j].0));
                }
            }
        }
        Ok(())
    }

    pub fn range(&self, split: Split) -> SeedRange {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Reproducible enumeration of the scenes of one split.
#[derive(Debug, Clone)]
pub struct SceneStream {
    cfg: EnvConfig,
    split: Split,
    kind: ScenarioKind,
    range: SeedRange,
    base_seed: u64,
}

impl SceneStream {
    /// Scene at `offset` within the split.
    pub fn scene(&self, offset: u64) -> (Scene, Observation) {
        assert!(offset < self.range.len, "offset beyond split capacity");
        let index = self.range.start + offset;
        let mut rng = seed::substream(self.base_seed, "scene", index);
        generate_scene(
            &self.cfg,
            self.kind,
            self.split.center(),
            format!("{}-{}-{:06}", self.split.center(), self.split, offset),
            offset + 1,
            &mut rng,
        )
    }

    pub fn take(&self, start: u64, n: u64) -> Result<Vec<(Scene, Observation)>, EnvError> {
        let end = start.saturating_add(n);
        if end > self.range.len {
            return Err(EnvError::SplitExhausted {
                split: self.split,
                capacity: self.range.len,
                requested: end,
            });
        }
        Ok((start..end).map(|i| self.scene(i)).collect())
    }

    pub fn split(&self) -> Split {
        self.split
    }
}

pub fn make_split(
    cfg: &EnvConfig,
    plan: &SplitPlan,
    split: Split,
    kind: ScenarioKind,
    base_seed: u64,
) -> Result<SceneStream, EnvError> {
    cfg.validate()?;
    plan.validate()?;
    Ok(SceneStream {
        cfg: cfg.clone(),
        split,
        kind,
        range: plan.range(split),
        base_seed,
    })
}
