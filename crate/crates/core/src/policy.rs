//! Factorized stochastic tool-using policy.
//!
//! One episode is four decisions, each a linear-softmax (or logistic) head:
//!
//! 1. **invoke**: call the detector or not (logistic over global features);
//! 2. **source**: which box to build on, the agent's own perceived box or
//!    one of the returned candidates (shared linear scorer per candidate);
//!    only active when the tool was called and returned something;
//! 3. **refine**: one of nine discrete box adjustments;
//! 4. **category**: the diagnosis class, including "no lesion".
//!
//! The action space is finite, so log-probabilities are exact and the
//! normalization can be checked by enumeration.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{argmax, Observation, CONTEXT_DIM};
use crate::geometry::{iou, BBox};
use crate::label::Category;
use crate::reward::{GroundedOutput, RewardBreakdown};
use crate::seed::Rng;
use crate::toolsim::ToolResponse;

/// Global features: top perceived logit, top-2 logit margin, perceived box
/// area, context vector, bias.
pub const GLOBAL_DIM: usize = 3 + CONTEXT_DIM + 1;
/// Per-candidate features: confidence, IoU with the perceived box, label
/// agreement with the perceived label, area, rank position (1 for the top
/// tool candidate falling to 1/m, 0 for the perceived box), bias.
pub const CANDIDATE_DIM: usize = 6;
/// Refinement head input: global features followed by the selected
/// candidate's features.
pub const REFINE_INPUT_DIM: usize = GLOBAL_DIM + CANDIDATE_DIM;
pub const NUM_REFINE: usize = 9;

/// Shift step for refinement moves, normalized units.
pub const REFINE_STEP: f64 = 0.05;
/// Scale factor for refinement grow/shrink/widen/tallen.
pub const REFINE_SCALE: f64 = 1.15;

/// Category-head input size for `k` lesion categories: perceived logits
/// (k+1), confidence-scaled one-hot of the selected label (k), then invoke
/// flag, selected IoU and bias.
pub fn category_input_dim(k: usize) -> usize {
    (k + 1) + k + 3
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("infeasible action: {0}")]
    Infeasible(String),
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

/// Discrete box adjustments applied after source selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Refine {
    Noop,
    ShiftRight,
    ShiftLeft,
    ShiftDown,
    ShiftUp,
    Grow,
    Shrink,
    Widen,
    Tallen,
}

impl Refine {
    pub const ALL: [Refine; NUM_REFINE] = [
        Refine::Noop,
        Refine::ShiftRight,
        Refine::ShiftLeft,
        Refine::ShiftDown,
        Refine::ShiftUp,
        Refine::Grow,
        Refine::Shrink,
        Refine::Widen,
        Refine::Tallen,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|r| *r == self).expect("listed")
    }

    /// Applies the move. Moves that would leave no area on the canvas keep
    /// the input box.
    pub fn apply(self, b: &BBox) -> BBox {
        let (cx, cy) = b.center();
        let (w, h) = (b.width(), b.height());
        let d = REFINE_STEP;
        let s = REFINE_SCALE;
        let moved = match self {
            Refine::Noop => return *b,
            Refine::ShiftRight => BBox::from_clipped(b.x1() + d, b.y1(), b.x2() + d, b.y2()),
            Refine::ShiftLeft => BBox::from_clipped(b.x1() - d, b.y1(), b.x2() - d, b.y2()),
            Refine::ShiftDown => BBox::from_clipped(b.x1(), b.y1() + d, b.x2(), b.y2() + d),
            Refine::ShiftUp => BBox::from_clipped(b.x1(), b.y1() - d, b.x2(), b.y2() - d),
            Refine::Grow => BBox::from_center(cx, cy, w * s, h * s),
            Refine::Shrink => BBox::from_center(cx, cy, w / s, h / s),
            Refine::Widen => BBox::from_center(cx, cy, w * s, h),
            Refine::Tallen => BBox::from_center(cx, cy, w, h * s),
        };
        moved.unwrap_or(*b)
    }
}

/// Policy weights. Matrices are row-major, one row per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub num_categories: usize,
    pub invoke: Vec<f64>,
    pub source: Vec<f64>,
    pub refine: Vec<f64>,
    pub category: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(num_categories: usize) -> Self {
        let k = num_categories;
        Self {
            num_categories: k,
            invoke: vec![0.0; GLOBAL_DIM],
            source: vec![0.0; CANDIDATE_DIM],
            refine: vec![0.0; NUM_REFINE * REFINE_INPUT_DIM],
            category: vec![0.0; (k + 1) * category_input_dim(k)],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_categories + 1
    }

    pub fn len(&self) -> usize {
        self.invoke.len() + self.source.len() + self.refine.len() + self.category.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn blocks(&self) -> [&Vec<f64>; 4] {
        [&self.invoke, &self.source, &self.refine, &self.category]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.invoke,
            &mut self.source,
            &mut self.refine,
            &mut self.category,
        ]
    }

    /// All weights as one vector, blocks in order invoke, source, refine,
    /// category.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().into_iter().flatten().copied().collect()
    }

    pub fn from_flat(num_categories: usize, flat: &[f64]) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(num_categories);
        if flat.len() != p.len() {
            return Err(PolicyError::Shape(format!(
                "expected {} weights, got {}",
                p.len(),
                flat.len()
            )));
        }
        let mut off = 0;
        for block in p.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(p)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .into_iter()
            .flatten()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().into_iter().flatten().all(|v| v.is_finite())
    }

    fn check_shape(&self) -> Result<(), PolicyError> {
        let want = Self::zeros(self.num_categories);
        for (name, (got, exp)) in ["invoke", "source", "refine", "category"]
            .into_iter()
            .zip(self.blocks().into_iter().zip(want.blocks()))
        {
            if got.len() != exp.len() {
                return Err(PolicyError::Shape(format!(
                    "{name} block has {} weights, expected {}",
                    got.len(),
                    exp.len()
                )));
            }
        }
        Ok(())
    }
}

/// Starting weights for training.
///
/// `FormatPrior` stands in for a model that already knows the tool-call
/// format: it tends to call the tool, prefers confident top-ranked
/// detections and keeps boxes as returned. It carries no diagnostic
/// knowledge; the category head starts uniform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyInit {
    Zeros,
    FormatPrior {
        invoke_bias: f64,
        source_confidence: f64,
        source_rank: f64,
        refine_noop_bias: f64,
    },
}

impl Default for PolicyInit {
    fn default() -> Self {
        PolicyInit::FormatPrior {
            invoke_bias: 2.0,
            source_confidence: 3.0,
            source_rank: 3.0,
            refine_noop_bias: 3.0,
        }
    }
}

impl PolicyInit {
    pub fn build(&self, num_categories: usize) -> PolicyParams {
        let mut p = PolicyParams::zeros(num_categories);
        if let PolicyInit::FormatPrior {
            invoke_bias,
            source_confidence,
            source_rank,
            refine_noop_bias,
        } = *self
        {
            p.invoke[GLOBAL_DIM - 1] = invoke_bias;
            p.source[0] = source_confidence;
            p.source[4] = source_rank;
            let noop = Refine::Noop.index();
            p.refine[noop * REFINE_INPUT_DIM + GLOBAL_DIM - 1] = refine_noop_bias;
        }
        p
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if let PolicyInit::FormatPrior {
            invoke_bias,
            source_confidence,
            source_rank,
            refine_noop_bias,
        } = *self
        {
            if ![invoke_bias, source_confidence, source_rank, refine_noop_bias]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(PolicyError::Shape("init weights must be finite".into()));
            }
        }
        Ok(())
    }
}

/// A box the agent can build on: its own perceived box (index 0) or a tool
/// candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    pub label: Category,
    pub confidence: f64,
    pub features: [f64; CANDIDATE_DIM],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub global: [f64; GLOBAL_DIM],
    /// Perceived pseudo-candidate first, then tool candidates in rank order.
    pub candidates: Vec<Candidate>,
    perceived_logits: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z)`, stable for large |z|.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn top_two(xs: &[f64]) -> (f64, f64) {
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &x in xs {
        if x > best {
            second = best;
            best = x;
        } else if x > second {
            second = x;
        }
    }
    (best, second)
}

/// Builds the feature bundle for an observation and, if the tool was
/// called, its response.
pub fn featurize(obs: &Observation, response: Option<&ToolResponse>) -> Features {
    let probs = softmax(&obs.perceived_logits);
    let (p1, p2) = top_two(&probs);
    let (l1, l2) = top_two(&obs.perceived_logits);
    let perceived_area = obs.perceived_box.area();

    let mut global = [0.0; GLOBAL_DIM];
    global[0] = l1;
    global[1] = l1 - l2;
    global[2] = perceived_area;
    global[3..3 + CONTEXT_DIM].copy_from_slice(&obs.context);
    global[GLOBAL_DIM - 1] = 1.0;

    let perceived_label = Category(argmax(&obs.perceived_logits) as u32);
    let margin = p1 - p2;
    let mut candidates = vec![Candidate {
        bbox: obs.perceived_box,
        label: perceived_label,
        confidence: margin,
        features: [margin, 1.0, 1.0, perceived_area, 0.0, 1.0],
    }];
    if let Some(resp) = response {
        let m = resp.detections.len() as f64;
        for (rank, d) in resp.detections.iter().enumerate() {
            let agree = if d.label == perceived_label { 1.0 } else { 0.0 };
            candidates.push(Candidate {
                bbox: d.bbox,
                label: d.label,
                confidence: d.confidence,
                features: [
                    d.confidence,
                    iou(&d.bbox, &obs.perceived_box),
                    agree,
                    d.bbox.area(),
                    1.0 - rank as f64 / m,
                    1.0,
                ],
            });
        }
    }
    Features {
        global,
        candidates,
        perceived_logits: obs.perceived_logits.clone(),
    }
}

impl Features {
    fn refine_input(&self, selected: usize) -> [f64; REFINE_INPUT_DIM] {
        let mut x = [0.0; REFINE_INPUT_DIM];
        x[..GLOBAL_DIM].copy_from_slice(&self.global);
        x[GLOBAL_DIM..].copy_from_slice(&self.candidates[selected].features);
        x
    }

    /// Fused category-head input for the selected source.
    pub fn category_input(&self, k: usize, invoked: bool, selected: usize) -> Vec<f64> {
        let cand = &self.candidates[selected];
        let mut x = Vec::with_capacity(category_input_dim(k));
        x.extend_from_slice(&self.perceived_logits);
        let mut onehot = vec![0.0; k];
        if !cand.label.is_negative() && cand.label.index() <= k {
            onehot[cand.label.index() - 1] = cand.confidence;
        }
        x.extend(onehot);
        x.push(if invoked { 1.0 } else { 0.0 });
        x.push(cand.features[1]);
        x.push(1.0);
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub invoke: bool,
    /// Index into `[perceived, candidates...]`; present iff the tool was
    /// invoked and returned at least one candidate.
    pub source: Option<usize>,
    pub refine: Refine,
    pub category: Category,
}

impl Action {
    pub fn selected(&self) -> usize {
        self.source.unwrap_or(0)
    }
}

/// Log-probability of each decision; inactive heads are exactly 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HeadLogProbs {
    pub invoke: f64,
    pub source: f64,
    pub refine: f64,
    pub category: f64,
}

impl HeadLogProbs {
    pub fn total(&self) -> f64 {
        self.invoke + self.source + self.refine + self.category
    }
}

/// One full invoke-and-reason rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scene_id: String,
    pub observation: Observation,
    /// Present iff the tool was invoked.
    pub response: Option<ToolResponse>,
    pub action: Action,
    pub head_log_probs: HeadLogProbs,
    pub log_prob: f64,
    /// Box after refinement, kept even when the answer is "no lesion".
    pub final_box: BBox,
    pub output: GroundedOutput,
    pub reward: Option<RewardBreakdown>,
}

impl Trajectory {
    pub fn tool_calls(&self) -> u32 {
        u32::from(self.action.invoke)
    }
}

/// Head distributions for a fixed observation, response and selected
/// source.
struct HeadDists {
    invoke_logit: f64,
    source_logp: Option<Vec<f64>>,
    refine_logp: Vec<f64>,
    category_logp: Vec<f64>,
}

fn matvec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| dot(&w[r * cols..(r + 1) * cols], x)).collect()
}

fn source_scores(params: &PolicyParams, feats: &Features) -> Vec<f64> {
    feats
        .candidates
        .iter()
        .map(|c| dot(&params.source, &c.features))
        .collect()
}

fn refine_logits(params: &PolicyParams, feats: &Features, selected: usize) -> Vec<f64> {
    matvec(&params.refine, NUM_REFINE, &feats.refine_input(selected))
}

fn category_logits(params: &PolicyParams, feats: &Features, invoked: bool, selected: usize) -> Vec<f64> {
    let x = feats.category_input(params.num_categories, invoked, selected);
    matvec(&params.category, params.num_classes(), &x)
}

fn check_feasible(
    params: &PolicyParams,
    obs: &Observation,
    response: Option<&ToolResponse>,
    action: &Action,
) -> Result<(), PolicyError> {
    if obs.perceived_logits.len() != params.num_classes() {
        return Err(PolicyError::Shape(format!(
            "observation has {} logits, policy expects {}",
            obs.perceived_logits.len(),
            params.num_classes()
        )));
    }
    if action.invoke != response.is_some() {
        return Err(PolicyError::Infeasible(
            "a response is recorded iff the tool was invoked".into(),
        ));
    }
    let m = response.map_or(0, |r| r.detections.len());
    match action.source {
        Some(_) if m == 0 => {
            return Err(PolicyError::Infeasible(
                "source selected without any tool candidates".into(),
            ))
        }
        None if m > 0 => {
            return Err(PolicyError::Infeasible(
                "tool returned candidates but no source was selected".into(),
            ))
        }
        Some(s) if s > m => {
            return Err(PolicyError::Infeasible(format!(
                "source index {s} beyond {m} candidates"
            )))
        }
        _ => {}
    }
    if action.category.index() > params.num_categories {
        return Err(PolicyError::Infeasible(format!(
            "category {} outside 0..={}",
            action.category, params.num_categories
        )));
    }
    Ok(())
}

fn head_dists(
    params: &PolicyParams,
    feats: &Features,
    invoked: bool,
    has_source: bool,
    selected: usize,
) -> HeadDists {
    HeadDists {
        invoke_logit: dot(&params.invoke, &feats.global),
        source_logp: has_source.then(|| log_softmax(&source_scores(params, feats))),
        refine_logp: log_softmax(&refine_logits(params, feats, selected)),
        category_logp: log_softmax(&category_logits(params, feats, invoked, selected)),
    }
}

/// Per-head log-probabilities of `action` given the observation and the
/// response it saw.
pub fn action_log_probs(
    params: &PolicyParams,
    obs: &Observation,
    response: Option<&ToolResponse>,
    action: &Action,
) -> Result<HeadLogProbs, PolicyError> {
    check_feasible(params, obs, response, action)?;
    let feats = featurize(obs, response);
    let d = head_dists(
        params,
        &feats,
        action.invoke,
        action.source.is_some(),
        action.selected(),
    );
    let invoke = if action.invoke {
        log_sigmoid(d.invoke_logit)
    } else {
        log_sigmoid(-d.invoke_logit)
    };
    Ok(HeadLogProbs {
        invoke,
        source: match (&d.source_logp, action.source) {
            (Some(lp), Some(s)) => lp[s],
            _ => 0.0,
        },
        refine: d.refine_logp[action.refine.index()],
        category: d.category_logp[action.category.index()],
    })
}

/// Recomputes a trajectory's total log-probability under `params`.
pub fn log_prob(params: &PolicyParams, traj: &Trajectory) -> Result<f64, PolicyError> {
    action_log_probs(params, &traj.observation, traj.response.as_ref(), &traj.action)
        .map(|h| h.total())
}

/// Gradient of the trajectory log-probability with respect to every weight.
pub fn grad_log_prob(params: &PolicyParams, traj: &Trajectory) -> Result<PolicyParams, PolicyError> {
    let mut grad = PolicyParams::zeros(params.num_categories);
    accumulate_grad_log_prob(params, traj, 1.0, &mut grad)?;
    Ok(grad)
}

/// `grad += scale * ∇ log π(traj)`.
pub fn accumulate_grad_log_prob(
    params: &PolicyParams,
    traj: &Trajectory,
    scale: f64,
    grad: &mut PolicyParams,
) -> Result<(), PolicyError> {
    let obs = &traj.observation;
    let response = traj.response.as_ref();
    let action = &traj.action;
    check_feasible(params, obs, response, action)?;
    let feats = featurize(obs, response);
    let selected = action.selected();

    // Invoke: d/dθ log Bernoulli(a; σ(θ·φ)) = (a - σ(θ·φ)) φ.
    let p_inv = sigmoid(dot(&params.invoke, &feats.global));
    let a = if action.invoke { 1.0 } else { 0.0 };
    for (g, x) in grad.invoke.iter_mut().zip(&feats.global) {
        *g += scale * (a - p_inv) * x;
    }

    // Source: shared scorer, gradient x_a - Σ p_j x_j.
    if let Some(s) = action.source {
        let probs = softmax(&source_scores(params, &feats));
        for (j, c) in feats.candidates.iter().enumerate() {
            let coef = if j == s { 1.0 } else { 0.0 } - probs[j];
            for (g, x) in grad.source.iter_mut().zip(&c.features) {
                *g += scale * coef * x;
            }
        }
    }

    // Refine and category: per-row weights, gradient (onehot - p) ⊗ x.
    let x_ref = feats.refine_input(selected);
    let p_ref = softmax(&refine_logits(params, &feats, selected));
    let r_idx = action.refine.index();
    for (row, p) in p_ref.iter().enumerate() {
        let coef = if row == r_idx { 1.0 } else { 0.0 } - p;
        let g = &mut grad.refine[row * REFINE_INPUT_DIM..(row + 1) * REFINE_INPUT_DIM];
        for (gi, xi) in g.iter_mut().zip(&x_ref) {
            *gi += scale * coef * xi;
        }
    }

    let x_cat = feats.category_input(params.num_categories, action.invoke, selected);
    let cols = x_cat.len();
    let p_cat = softmax(&category_logits(params, &feats, action.invoke, selected));
    let c_idx = action.category.index();
    for (row, p) in p_cat.iter().enumerate() {
        let coef = if row == c_idx { 1.0 } else { 0.0 } - p;
        let g = &mut grad.category[row * cols..(row + 1) * cols];
        for (gi, xi) in g.iter_mut().zip(&x_cat) {
            *gi += scale * coef * xi;
        }
    }
    Ok(())
}

/// How actions are chosen from the head distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Sample,
    /// Most likely choice per head; invoke iff σ ≥ 0.5; first index on ties.
    Greedy,
}

fn draw(logp: &[f64], decode: Decode, rng: &mut Rng) -> usize {
    match decode {
        Decode::Greedy => argmax(logp),
        Decode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, lp) in logp.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    return i;
                }
            }
            logp.len() - 1
        }
    }
}

/// Runs one episode: decide whether to call the tool (calling `invoke_tool`
/// at most once), pick a source box, refine it, and pick a category.
pub fn sample(
    params: &PolicyParams,
    scene_id: &str,
    obs: &Observation,
    invoke_tool: impl FnOnce() -> ToolResponse,
    decode: Decode,
    rng: &mut Rng,
) -> Trajectory {
    let base = featurize(obs, None);
    let z = dot(&params.invoke, &base.global);
    let invoke = match decode {
        Decode::Sample => rng.random::<f64>() < sigmoid(z),
        Decode::Greedy => z >= 0.0,
    };
    let response = invoke.then(invoke_tool);
    let feats = match &response {
        Some(r) => featurize(obs, Some(r)),
        None => base,
    };
    let has_source = feats.candidates.len() > 1;
    let source = has_source.then(|| draw(&log_softmax(&source_scores(params, &feats)), decode, rng));
    let selected = source.unwrap_or(0);
    let d = head_dists(params, &feats, invoke, has_source, selected);
    let refine = Refine::ALL[draw(&d.refine_logp, decode, rng)];
    let category = Category(draw(&d.category_logp, decode, rng) as u32);

    let head_log_probs = HeadLogProbs {
        invoke: if invoke { log_sigmoid(z) } else { log_sigmoid(-z) },
        source: match (&d.source_logp, source) {
            (Some(lp), Some(s)) => lp[s],
            _ => 0.0,
        },
        refine: d.refine_logp[refine.index()],
        category: d.category_logp[category.index()],
    };
    let final_box = refine.apply(&feats.candidates[selected].bbox);
    Trajectory {
        scene_id: scene_id.to_string(),
        observation: obs.clone(),
        response,
        action: Action {
            invoke,
            source,
            refine,
            category,
        },
        head_log_probs,
        log_prob: head_log_probs.total(),
        final_box,
        output: GroundedOutput::new(final_box, category),
        reward: None,
    }
}

/// Every feasible action for an observation, given the response the tool
/// would return if called. Not-invoked actions come first.
pub fn feasible_actions(k: usize, response_len: usize) -> Vec<Action> {
    let mut out = Vec::new();
    let sources: Vec<Option<usize>> = if response_len == 0 {
        vec![None]
    } else {
        (0..=response_len).map(Some).collect()
    };
    for invoke in [false, true] {
        let srcs: &[Option<usize>] = if invoke { &sources } else { &[None] };
        for &source in srcs {
            for refine in Refine::ALL {
                for c in 0..=k {
                    out.push(Action {
                        invoke,
                        source,
                        refine,
                        category: Category(c as u32),
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDims {
    pub num_categories: usize,
    pub global: usize,
    pub candidate: usize,
    pub refine_actions: usize,
    pub category_input: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTheta {
    pub invoke: Vec<f64>,
    pub source: Vec<f64>,
    pub refine: Vec<f64>,
    pub category: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Gradient steps taken to reach these weights.
    pub trained_iterations: u64,
    pub phase: Option<String>,
}

/// Versioned JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: CheckpointDims,
    pub theta: CheckpointTheta,
    pub meta: CheckpointMeta,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(params: &PolicyParams, meta: CheckpointMeta) -> Self {
        let k = params.num_categories;
        Self {
            version: CHECKPOINT_VERSION,
            dims: CheckpointDims {
                num_categories: k,
                global: GLOBAL_DIM,
                candidate: CANDIDATE_DIM,
                refine_actions: NUM_REFINE,
                category_input: category_input_dim(k),
            },
            theta: CheckpointTheta {
                invoke: params.invoke.clone(),
                source: params.source.clone(),
                refine: params.refine.clone(),
                category: params.category.clone(),
            },
            meta,
        }
    }

    pub fn params(&self) -> Result<PolicyParams, PolicyError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Version(self.version));
        }
        let k = self.dims.num_categories;
        let expected = CheckpointDims {
            num_categories: k,
            global: GLOBAL_DIM,
            candidate: CANDIDATE_DIM,
            refine_actions: NUM_REFINE,
            category_input: category_input_dim(k),
        };
        if self.dims != expected {
            return Err(PolicyError::Shape(format!(
                "checkpoint dims {:?} do not match {:?}",
                self.dims, expected
            )));
        }
        let p = PolicyParams {
            num_categories: k,
            invoke: self.theta.invoke.clone(),
            source: self.theta.source.clone(),
            refine: self.theta.refine.clone(),
            category: self.theta.category.clone(),
        };
        p.check_shape()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_scene, Center, EnvConfig, ScenarioKind};
    use crate::seed::substream;
    use crate::toolsim::{invoke as tool_invoke, ToolProfile};
    use rand_distr::{Distribution, Normal};

    fn episode(i: u64) -> (crate::env::Scene, Observation) {
        let cfg = EnvConfig::default();
        let mut rng = substream(21, "scene", i);
        generate_scene(&cfg, ScenarioKind::Diagnosis, Center::A, format!("s{i}"), i + 1, &mut rng)
    }

    fn random_params(seed: u64, scale: f64) -> PolicyParams {
        let mut rng = substream(seed, "params", 0);
        let n = Normal::new(0.0, scale).unwrap();
        let len = PolicyParams::zeros(6).len();
        let flat: Vec<f64> = (0..len).map(|_| n.sample(&mut rng)).collect();
        PolicyParams::from_flat(6, &flat).unwrap()
    }

    #[test]
    fn feature_dims() {
        let (_, obs) = episode(0);
        let f = featurize(&obs, None);
        assert_eq!(f.candidates.len(), 1);
        assert_eq!(f.global.len(), 8);
        assert_eq!(f.category_input(6, false, 0).len(), category_input_dim(6));
        assert_eq!(category_input_dim(6), 16);
        let empty = featurize(&obs, Some(&ToolResponse::default()));
        assert_eq!(empty.candidates.len(), 1);
        assert_eq!(featurize(&obs, None), featurize(&obs, None));
    }

    #[test]
    fn refine_moves() {
        let b = BBox::new(0.2, 0.2, 0.4, 0.4).unwrap();
        assert_eq!(Refine::Noop.apply(&b), b);
        let r = Refine::ShiftRight.apply(&b);
        assert!((r.x1() - 0.25).abs() < 1e-12 && (r.x2() - 0.45).abs() < 1e-12);
        let g = Refine::Grow.apply(&b);
        assert!((g.width() - 0.2 * 1.15).abs() < 1e-12);
        assert_eq!(g.center(), b.center());
        let edge = BBox::new(0.97, 0.1, 1.0, 0.2).unwrap();
        assert_eq!(Refine::ShiftRight.apply(&edge), edge);
    }

    #[test]
    fn saturated_invoke_bias_rarely_calls() {
        let mut p = PolicyParams::zeros(6);
        p.invoke[GLOBAL_DIM - 1] = -10.0;
        let (_, obs) = episode(1);
        let mut rng = substream(0, "policy", 0);
        let calls = (0..1000)
            .filter(|_| sample(&p, "s", &obs, ToolResponse::default, Decode::Sample, &mut rng).action.invoke)
            .count();
        assert!(calls < 10);
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::zeros(6);
        let (scene, obs) = episode(2);
        let resp = tool_invoke(&ToolProfile::dense(), &scene, 1, &mut substream(1, "tool", 0));
        let mut rng = substream(0, "policy", 1);
        let n = 4000;
        let mut calls = 0;
        let mut src_counts = vec![0usize; resp.detections.len() + 1];
        for _ in 0..n {
            let t = sample(&p, "s", &obs, || resp.clone(), Decode::Sample, &mut rng);
            if t.action.invoke {
                calls += 1;
                if let Some(s) = t.action.source {
                    src_counts[s] += 1;
                }
            }
        }
        let rate = calls as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.03, "invoke rate {rate}");
        if !resp.is_empty() {
            let expect = calls as f64 / src_counts.len() as f64;
            for c in src_counts {
                assert!((c as f64 - expect).abs() < 5.0 * expect.sqrt());
            }
        }
    }

    #[test]
    fn sampling_is_reproducible_and_consistent() {
        let p = random_params(5, 0.5);
        let (scene, obs) = episode(3);
        let tool = || tool_invoke(&ToolProfile::dense(), &scene, 1, &mut substream(2, "tool", 3));
        let a = sample(&p, "s", &obs, tool, Decode::Sample, &mut substream(9, "policy", 0));
        let b = sample(&p, "s", &obs, tool, Decode::Sample, &mut substream(9, "policy", 0));
        assert_eq!(a, b);
        assert_eq!(a.log_prob, a.head_log_probs.total());
        assert!((log_prob(&p, &a).unwrap() - a.log_prob).abs() < 1e-12);
    }

    #[test]
    fn inactive_source_head_has_zero_gradient() {
        let p = random_params(6, 0.5);
        let (_, obs) = episode(4);
        let mut rng = substream(3, "policy", 0);
        let mut seen = false;
        for _ in 0..50 {
            let t = sample(&p, "s", &obs, ToolResponse::default, Decode::Sample, &mut rng);
            if !t.action.invoke {
                let g = grad_log_prob(&p, &t).unwrap();
                assert!(g.source.iter().all(|v| *v == 0.0));
                assert_eq!(t.head_log_probs.source, 0.0);
                seen = true;
            }
        }
        assert!(seen);
    }

    #[test]
    fn infeasible_actions_are_rejected() {
        let p = PolicyParams::zeros(6);
        let (_, obs) = episode(5);
        let mut t = sample(&p, "s", &obs, ToolResponse::default, Decode::Greedy, &mut substream(0, "p", 0));
        assert!(t.action.invoke);
        t.action.source = Some(3);
        assert!(matches!(log_prob(&p, &t), Err(PolicyError::Infeasible(_))));
        t.action.source = None;
        t.action.category = Category(9);
        assert!(matches!(log_prob(&p, &t), Err(PolicyError::Infeasible(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = random_params(8, 1.0);
        let ck = Checkpoint::new(&p, CheckpointMeta { trained_iterations: 3, phase: None });
        let json = serde_json::to_string(&ck).unwrap();
        assert!(json.starts_with(r#"{"version":1,"dims":{"#));
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back.params().unwrap(), p);
        let mut wrong = back.clone();
        wrong.version = 2;
        assert!(matches!(wrong.params(), Err(PolicyError::Version(2))));
        wrong.version = 1;
        wrong.theta.source.pop();
        assert!(wrong.params().is_err());
    }

    #[test]
    fn feasible_action_count() {
        assert_eq!(feasible_actions(6, 0).len(), 2 * 9 * 7);
        assert_eq!(feasible_actions(6, 3).len(), 9 * 7 + 4 * 9 * 7);
    }
}
