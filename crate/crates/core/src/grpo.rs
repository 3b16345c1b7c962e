//! Group Relative Policy Optimization over simulated episodes.
//!
//! Each iteration draws a wave of scenes, rolls `G` trajectories per scene
//! under frozen parameters, normalizes rewards within each group and takes a
//! clipped-surrogate ascent step. Phases run in order, each starting from the
//! previous phase's final parameters and using its own reward profile.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    augment_chain, make_split, AugmentConfig, EnvConfig, EnvError, Observation, ScenarioKind,
    Scene, SceneStream, Split, SplitPlan,
};
use crate::geometry::iou;
use crate::policy::{self, Decode, PolicyError, PolicyParams, Trajectory};
use crate::reward::{diagnosis_profile, grounding_profile, score_episode, RewardError, RewardProfile};
use crate::seed::substream;
use crate::toolsim::{invoke, top1_diagnosis, ToolError, ToolProfile, ToolResponse};

/// Parameter magnitude beyond which training is aborted.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("invalid GRPO config: {0}")]
    Config(String),
    #[error("{trajectories} trajectories but {advantages} advantages")]
    LengthMismatch {
        trajectories: usize,
        advantages: usize,
    },
    #[error("training diverged at iteration {iteration}: |theta| reached {magnitude:e}")]
    Diverged { iteration: u64, magnitude: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Tool(#[from] ToolError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub kl_coeff: f64,
    pub scenes_per_iter: usize,
    pub advantage_epsilon: f64,
    /// Gradient steps per rollout wave.
    pub inner_epochs: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            learning_rate: 0.05,
            clip_epsilon: 0.2,
            kl_coeff: 0.0,
            scenes_per_iter: 64,
            advantage_epsilon: 1e-8,
            inner_epochs: 1,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let fail = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return fail("group_size must be at least 2");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return fail("clip_epsilon must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return fail("kl_coeff must be non-negative");
        }
        if self.scenes_per_iter == 0 {
            return fail("scenes_per_iter must be positive");
        }
        if !(self.advantage_epsilon > 0.0 && self.advantage_epsilon.is_finite()) {
            return fail("advantage_epsilon must be positive");
        }
        if self.inner_epochs == 0 {
            return fail("inner_epochs must be positive");
        }
        Ok(())
    }
}

fn default_kind() -> ScenarioKind {
    ScenarioKind::Diagnosis
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub profile: RewardProfile,
    pub iterations: u64,
    #[serde(default = "default_kind")]
    pub kind: ScenarioKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
}

impl PhasePlan {
    /// Grounding for `grounding_iters`, then diagnosis for `diagnosis_iters`.
    pub fn two_phase(grounding_iters: u64, diagnosis_iters: u64) -> Self {
        Self {
            phases: vec![
                Phase {
                    profile: grounding_profile(),
                    iterations: grounding_iters,
                    kind: ScenarioKind::Diagnosis,
                },
                Phase {
                    profile: diagnosis_profile(),
                    iterations: diagnosis_iters,
                    kind: ScenarioKind::Diagnosis,
                },
            ],
        }
    }

    pub fn diagnosis_only(iterations: u64) -> Self {
        Self {
            phases: vec![Phase {
                profile: diagnosis_profile(),
                iterations,
                kind: ScenarioKind::Diagnosis,
            }],
        }
    }

    pub fn total_iterations(&self) -> u64 {
        self.phases.iter().map(|p| p.iterations).sum()
    }

    /// Profile of the last phase, used to score held-out evaluations.
    pub fn final_profile(&self) -> &RewardProfile {
        &self.phases.last().expect("validated plan is nonempty").profile
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.phases.is_empty() {
            return Err(GrpoError::Config("phase plan is empty".into()));
        }
        for p in &self.phases {
            p.profile.validate()?;
        }
        Ok(())
    }
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self::two_phase(150, 150)
    }
}

/// Population mean and standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(r - mean) / (std + eps)` with the population standard deviation. A
/// group with identical rewards gets all-zero advantages.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    assert!(rewards.len() >= 2, "a group needs at least two members");
    let (mean, std) = mean_std(rewards);
    if rewards.iter().all(|r| *r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    // Re-center so rounding in `mean` cannot leave a residual offset.
    let (c_mean, _) = mean_std(&centered);
    centered.iter().map(|c| (c - c_mean) / (std + eps)).collect()
}

/// Clipped surrogate, averaged over the group, with an optional penalty on
/// the log-ratio against `reference`. Returns the objective and its gradient
/// with respect to `params`.
pub fn surrogate_and_grad(
    params: &PolicyParams,
    old_params: &PolicyParams,
    reference: Option<&PolicyParams>,
    trajectories: &[Trajectory],
    advantages: &[f64],
    cfg: &GrpoConfig,
) -> Result<(f64, PolicyParams), GrpoError> {
    if trajectories.len() != advantages.len() {
        return Err(GrpoError::LengthMismatch {
            trajectories: trajectories.len(),
            advantages: advantages.len(),
        });
    }
    let mut grad = PolicyParams::zeros(params.num_categories);
    if trajectories.is_empty() {
        return Ok((0.0, grad));
    }
    let n = trajectories.len() as f64;
    let (lo, hi) = (1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    let mut objective = 0.0;
    for (traj, &adv) in trajectories.iter().zip(advantages) {
        let lp = policy::log_prob(params, traj)?;
        let lp_old = policy::log_prob(old_params, traj)?;
        let ratio = (lp - lp_old).exp();
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(lo, hi) * adv;
        objective += unclipped.min(clipped);
        let mut coef = if unclipped <= clipped { adv * ratio } else { 0.0 };
        if cfg.kl_coeff > 0.0 {
            if let Some(reference) = reference {
                let lp_ref = policy::log_prob(reference, traj)?;
                objective -= cfg.kl_coeff * (lp - lp_ref);
                coef -= cfg.kl_coeff;
            }
        }
        if coef != 0.0 {
            policy::accumulate_grad_log_prob(params, traj, coef / n, &mut grad)?;
        }
    }
    Ok((objective / n, grad))
}

/// Scene source and tool for training and evaluation.
#[derive(Debug, Clone)]
pub struct Workload {
    pub env: EnvConfig,
    pub splits: SplitPlan,
    pub augment: AugmentConfig,
    pub tool: ToolProfile,
    pub env_seed: u64,
}

impl Workload {
    pub fn new(env: EnvConfig, tool: ToolProfile, env_seed: u64) -> Self {
        Self {
            env,
            splits: SplitPlan::default(),
            augment: AugmentConfig::default(),
            tool,
            env_seed,
        }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        self.env.validate()?;
        self.splits.validate()?;
        self.augment.validate()?;
        self.tool.validate()?;
        Ok(())
    }

    pub fn stream(&self, split: Split, kind: ScenarioKind) -> Result<SceneStream, GrpoError> {
        Ok(make_split(&self.env, &self.splits, split, kind, self.env_seed)?)
    }

    /// The response the tool gives for this scene. Fixed per scene, so every
    /// member of a group that calls the tool sees the same evidence.
    pub fn tool_response(&self, scene: &Scene, stream_tag: &str, index: u64) -> ToolResponse {
        let mut rng = substream(self.env_seed, stream_tag, index);
        invoke(&self.tool, scene, 0, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub phase: usize,
    pub mean_reward: f64,
    pub mean_iou: f64,
    pub diag_acc: f64,
    pub invoke_rate: f64,
}

pub const LOG_HEADER: &str = "iteration,phase,mean_reward,mean_iou,diag_acc,invoke_rate";

impl IterationLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.phase, self.mean_reward, self.mean_iou, self.diag_acc, self.invoke_rate
        )
    }
}

/// Renders a training log as CSV with a header line.
pub fn log_csv(log: &[IterationLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    /// Parameters at the end of each phase.
    pub phase_params: Vec<PolicyParams>,
    pub log: Vec<IterationLog>,
}

/// Running means over a batch of scored trajectories.
#[derive(Default)]
struct Tally {
    n: usize,
    reward: f64,
    positives: usize,
    iou: f64,
    correct: usize,
    invoked: usize,
}

impl Tally {
    fn add(&mut self, scene: &Scene, traj: &Trajectory) {
        self.n += 1;
        self.reward += traj.reward.map_or(0.0, |r| r.composite);
        if let Some((gt_box, _)) = &scene.gt {
            self.positives += 1;
            self.iou += iou(&traj.final_box, gt_box);
        }
        if traj.action.category == scene.label() {
            self.correct += 1;
        }
        if traj.action.invoke {
            self.invoked += 1;
        }
    }

    fn mean(sum: f64, n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Runs one episode of `params` on a scene and scores it.
fn rollout(
    params: &PolicyParams,
    scene: &Scene,
    obs: &Observation,
    response: &ToolResponse,
    profile: &RewardProfile,
    decode: Decode,
    rng: &mut crate::seed::Rng,
) -> Trajectory {
    let mut traj = policy::sample(params, &scene.scene_id, obs, || response.clone(), decode, rng);
    traj.reward = Some(score_episode(
        scene.gt.as_ref(),
        &traj.output,
        traj.tool_calls(),
        profile,
    ));
    traj
}

/// Trains `init` through every phase of `plan`. Each scene's group
/// contributes its own surrogate; a wave's step is the sum of the group
/// gradients scaled by the learning rate.
pub fn train(
    init: &PolicyParams,
    work: &Workload,
    plan: &PhasePlan,
    cfg: &GrpoConfig,
) -> Result<TrainOutcome, GrpoError> {
    cfg.validate()?;
    plan.validate()?;
    work.validate()?;
    if init.num_categories != work.env.num_categories as usize {
        return Err(GrpoError::Config(format!(
            "policy has {} categories, environment has {}",
            init.num_categories, work.env.num_categories
        )));
    }
    let mut params = init.clone();
    let mut phase_params = Vec::with_capacity(plan.phases.len());
    let mut log = Vec::new();
    let mut iteration = 0u64;
    let spi = cfg.scenes_per_iter as u64;

    for (phase_idx, phase) in plan.phases.iter().enumerate() {
        let stream = work.stream(Split::Train, phase.kind)?;
        let reference = params.clone();
        for _ in 0..phase.iterations {
            let old = params.clone();
            let mut wave: Vec<(Vec<Trajectory>, Vec<f64>)> = Vec::with_capacity(cfg.scenes_per_iter);
            let mut tally = Tally::default();
            for (j, (scene, obs)) in stream.take(iteration * spi, spi)?.into_iter().enumerate() {
                let index = iteration * spi + j as u64;
                let chain = work.augment.sample(&mut substream(cfg.seed, "augment", index));
                let (scene, obs, _) = augment_chain(&scene, &obs, &chain);
                let response = work.tool_response(&scene, "train-tool", index);
                let mut rng = substream(cfg.seed, "rollout", index);
                let group: Vec<Trajectory> = (0..cfg.group_size)
                    .map(|_| rollout(&old, &scene, &obs, &response, &phase.profile, Decode::Sample, &mut rng))
                    .collect();
                for t in &group {
                    tally.add(&scene, t);
                }
                let rewards: Vec<f64> = group
                    .iter()
                    .map(|t| t.reward.expect("scored").composite)
                    .collect();
                let adv = group_advantages(&rewards, cfg.advantage_epsilon);
                wave.push((group, adv));
            }
            for _ in 0..cfg.inner_epochs {
                let mut step = PolicyParams::zeros(params.num_categories);
                for (group, adv) in &wave {
                    let (_, g) = surrogate_and_grad(&params, &old, Some(&reference), group, adv, cfg)?;
                    step.add_scaled(&g, 1.0);
                }
                params.add_scaled(&step, cfg.learning_rate);
            }
            let magnitude = params.max_abs();
            if magnitude.is_nan() || magnitude > DIVERGENCE_LIMIT {
                return Err(GrpoError::Diverged {
                    iteration,
                    magnitude,
                });
            }
            log.push(IterationLog {
                iteration,
                phase: phase_idx,
                mean_reward: Tally::mean(tally.reward, tally.n),
                mean_iou: Tally::mean(tally.iou, tally.positives),
                diag_acc: Tally::mean(tally.correct as f64, tally.n),
                invoke_rate: Tally::mean(tally.invoked as f64, tally.n),
            });
            iteration += 1;
        }
        phase_params.push(params.clone());
    }
    Ok(TrainOutcome {
        params,
        phase_params,
        log,
    })
}

/// Held-out results for one policy on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub split: Split,
    pub episodes: usize,
    pub mean_reward: f64,
    pub mean_iou: f64,
    pub diag_acc: f64,
    pub invoke_rate: f64,
    /// Diagnosis accuracy of the tool's top-ranked detection alone, an empty
    /// response counting as "no lesion".
    pub tool_top1_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: u64,
    pub seed: u64,
    pub decode: Decode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            seed: 1_000_003,
            decode: Decode::Greedy,
        }
    }
}

/// Per-episode record from a held-out run.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scene: Scene,
    pub trajectory: Trajectory,
    /// What the tool returns for this scene, whether or not it was called.
    pub response: ToolResponse,
    pub tool_top1: crate::label::Category,
}

/// Evaluates `params` on the first `episodes` scenes of a split. The tool
/// response per scene and the policy stream depend only on the eval seed,
/// so different policies face identical evidence.
pub fn evaluate_episodes(
    params: &PolicyParams,
    work: &Workload,
    split: Split,
    profile: &RewardProfile,
    eval: &EvalConfig,
) -> Result<Vec<Episode>, GrpoError> {
    let stream = work.stream(split, ScenarioKind::Diagnosis)?;
    let tag = format!("eval-tool-{split}");
    let mut out = Vec::with_capacity(eval.episodes as usize);
    for (i, (scene, obs)) in stream.take(0, eval.episodes)?.into_iter().enumerate() {
        let index = i as u64;
        let mut tool_rng = substream(eval.seed, &tag, index);
        let response = invoke(&work.tool, &scene, 0, &mut tool_rng);
        let mut rng = substream(eval.seed, &format!("eval-policy-{split}"), index);
        let trajectory = rollout(params, &scene, &obs, &response, profile, eval.decode, &mut rng);
        out.push(Episode {
            tool_top1: top1_diagnosis(&response),
            scene,
            trajectory,
            response,
        });
    }
    Ok(out)
}

pub fn summarize(split: Split, episodes: &[Episode]) -> HeldOut {
    let mut tally = Tally::default();
    let mut top1 = 0usize;
    for e in episodes {
        tally.add(&e.scene, &e.trajectory);
        if e.tool_top1 == e.scene.label() {
            top1 += 1;
        }
    }
    HeldOut {
        split,
        episodes: tally.n,
        mean_reward: Tally::mean(tally.reward, tally.n),
        mean_iou: Tally::mean(tally.iou, tally.positives),
        diag_acc: Tally::mean(tally.correct as f64, tally.n),
        invoke_rate: Tally::mean(tally.invoked as f64, tally.n),
        tool_top1_acc: Tally::mean(top1 as f64, tally.n),
    }
}

pub fn evaluate(
    params: &PolicyParams,
    work: &Workload,
    split: Split,
    profile: &RewardProfile,
    eval: &EvalConfig,
) -> Result<HeldOut, GrpoError> {
    Ok(summarize(split, &evaluate_episodes(params, work, split, profile, eval)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_examples() {
        assert_eq!(group_advantages(&[1.0, 0.0, 1.0, 0.0], 0.0), vec![1.0, -1.0, 1.0, -1.0]);
        let a = group_advantages(&[1.0, 0.0, 1.0, 0.0], 1e-8);
        for (x, y) in a.iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((x - y).abs() < 1e-7);
        }
        assert_eq!(group_advantages(&[0.7; 5], 1e-8), vec![0.0; 5]);
    }

    #[test]
    fn advantages_are_shift_and_scale_invariant() {
        let r = [0.3, -1.2, 0.9, 0.1, 0.5];
        let base = group_advantages(&r, 1e-8);
        let shifted: Vec<f64> = r.iter().map(|x| x + 4.0).collect();
        let scaled: Vec<f64> = r.iter().map(|x| x * 3.0).collect();
        for other in [group_advantages(&shifted, 1e-8), group_advantages(&scaled, 1e-8)] {
            for (a, b) in base.iter().zip(&other) {
                assert!((a - b).abs() < 1e-7);
            }
        }
        let (m, s) = mean_std(&base);
        assert!(m.abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        for bad in [
            GrpoConfig { group_size: 1, ..Default::default() },
            GrpoConfig { clip_epsilon: 1.0, ..Default::default() },
            GrpoConfig { learning_rate: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(PhasePlan { phases: vec![] }.validate().is_err());
        assert_eq!(PhasePlan::default().total_iterations(), 300);
    }

    #[test]
    fn zero_iterations_leave_params_unchanged() {
        let init = PolicyParams::zeros(6);
        let work = Workload::new(EnvConfig::default(), ToolProfile::sparse(), 1);
        let out = train(&init, &work, &PhasePlan::two_phase(0, 0), &GrpoConfig::default()).unwrap();
        assert_eq!(out.params, init);
        assert!(out.log.is_empty());
        assert_eq!(out.phase_params.len(), 2);
    }

    #[test]
    fn length_mismatch_rejected() {
        let p = PolicyParams::zeros(6);
        let err = surrogate_and_grad(&p, &p, None, &[], &[1.0], &GrpoConfig::default());
        assert!(matches!(err, Err(GrpoError::LengthMismatch { .. })));
    }

    #[test]
    fn log_csv_layout() {
        let row = IterationLog {
            iteration: 0,
            phase: 1,
            mean_reward: 0.5,
            mean_iou: 0.25,
            diag_acc: 0.125,
            invoke_rate: 1.0,
        };
        assert_eq!(log_csv(&[row]), format!("{LOG_HEADER}\n0,1,0.5,0.25,0.125,1\n"));
    }
}
