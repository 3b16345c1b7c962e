//! Command-line entry point. Every command is a pure function of its config
//! and seed; artifacts carry no timestamps or absolute paths.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::env::{make_split, ScenarioKind, Split};
use crate::eval::{self, Mode};
use crate::grpo::{self, Episode, HeldOut, PhasePlan, TrainOutcome, Workload};
use crate::policy::{Checkpoint, CheckpointMeta, PolicyParams};
use crate::seed::substream;
use crate::toolsim::tool_stats;

const DEFAULT_OUT: &str = "runs";

/// Bad invocation: missing files, conflicting arguments.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Exit status for an error: 2 for usage and config problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() || err.downcast_ref::<ConfigError>().is_some() {
        2
    } else {
        1
    }
}

#[derive(Debug, Parser)]
#[command(name = "echoloop", version, about = "Invoke-and-reason agent simulator with GRPO training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Seed for scenes and rollouts.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config value, e.g. `--set rewards.diagnosis.tool_cost=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Total training iterations, spread over the phases.
    #[arg(long)]
    pub iterations: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "ECHOLOOP_OUT_DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Agent,
    Detector,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Agent => Mode::Agent,
            ModeArg::Detector => Mode::Detector,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train through the phase plan and evaluate on held-out splits.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Score prediction files against COCO ground truth.
    Eval {
        /// Ground truth, COCO subset.
        #[arg(long)]
        gt: PathBuf,
        /// Predictions: JSON lines (agent) or a COCO-results list (detector).
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum, default_value = "agent")]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',', default_values_t = eval::DEFAULT_THRESHOLDS.to_vec())]
        thresholds: Vec<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Empirical statistics of a tool profile on positive scenes.
    SimulateTool {
        #[arg(long)]
        profile: String,
        #[arg(short, long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Config providing the environment and tool profiles.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Agent versus tool top-1 diagnosis accuracy for every tool profile.
    AblateDetectors {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Evaluate this trained checkpoint instead of training per profile.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Repeat over these seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Configured phase plan versus diagnosis-only with equal iterations.
    AblateSchedule {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Summarize the CSV artifacts of an output directory.
    Report {
        #[command(flatten)]
        out: OutArgs,
    },
    /// Print the default config in canonical form.
    DefaultConfig,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { exp, out } => {
            let cfg = load_experiment(&exp)?;
            let dir = out_dir(out, Some(&cfg))?;
            let summary = cmd_train(&cfg, &dir)?;
            print!("{summary}");
        }
        Command::Eval {
            gt,
            pred,
            mode,
            thresholds,
            out,
        } => {
            let dir = out_dir(out, None)?;
            let report = cmd_eval(&gt, &pred, mode.into(), &thresholds, &dir)?;
            print!("{}", report.to_table());
        }
        Command::SimulateTool {
            profile,
            n,
            seed,
            config,
            set,
            out,
        } => {
            let cfg = match config {
                Some(path) => load_config(&path, &set)?,
                None => ExperimentConfig::load_str("", &set)?,
            };
            let dir = out_dir(out, Some(&cfg))?;
            print!("{}", cmd_simulate_tool(&cfg, &profile, n, seed, &dir)?);
        }
        Command::AblateDetectors {
            exp,
            checkpoint,
            seeds,
            out,
        } => {
            let cfg = load_experiment(&exp)?;
            let dir = out_dir(out, Some(&cfg))?;
            let seeds = seeds_or(&seeds, &cfg);
            print!("{}", cmd_ablate_detectors(&cfg, checkpoint.as_deref(), &seeds, &dir)?);
        }
        Command::AblateSchedule { exp, seeds, out } => {
            let cfg = load_experiment(&exp)?;
            let dir = out_dir(out, Some(&cfg))?;
            let seeds = seeds_or(&seeds, &cfg);
            print!("{}", cmd_ablate_schedule(&cfg, &seeds, &dir)?);
        }
        Command::Report { out } => {
            let dir = out_dir(out, None)?;
            print!("{}", cmd_report(&dir)?);
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().canonical()),
    }
    Ok(())
}

fn seeds_or(seeds: &[u64], cfg: &ExperimentConfig) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    }
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    if !path.is_file() {
        return Err(UsageError(format!("config file {} not found", path.display())).into());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::load_str(&text, overrides)
        .map_err(anyhow::Error::new)
        .with_context(|| format!("loading {}", path.display()))
}

pub fn load_experiment(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&args.config, &args.set)?;
    if let Some(seed) = args.seed {
        cfg.reseed(seed);
    }
    if let Some(n) = args.iterations {
        cfg.set_total_iterations(n);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(out: OutArgs, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    let dir = out
        .out
        .or_else(|| cfg.and_then(|c| c.out_dir.as_ref()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write(dir, "config.toml", &cfg.canonical())
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams, meta: CheckpointMeta) -> Result<()> {
    fs::write(path, to_json(&Checkpoint::new(params, meta)))
        .with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, CheckpointMeta)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ck: Checkpoint =
        serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))?;
    let params = ck
        .params()
        .with_context(|| format!("checkpoint {}", path.display()))?;
    Ok((params, ck.meta))
}

const HELDOUT_HEADER: &str =
    "policy,split,episodes,mean_reward,mean_iou,diag_acc,invoke_rate,tool_top1_acc";

fn heldout_row(policy: &str, h: &HeldOut) -> String {
    format!(
        "{policy},{},{},{},{},{},{},{}\n",
        h.split, h.episodes, h.mean_reward, h.mean_iou, h.diag_acc, h.invoke_rate, h.tool_top1_acc
    )
}

fn train_outcome(cfg: &ExperimentConfig, work: &Workload, plan: &PhasePlan) -> Result<(PolicyParams, TrainOutcome)> {
    let init = cfg.init.build(cfg.env.num_categories as usize);
    let outcome = grpo::train(&init, work, plan, &cfg.grpo).context("training")?;
    Ok((init, outcome))
}

/// Writes GT and both prediction formats for a batch of held-out episodes.
fn export_episodes(dir: &Path, prefix: &str, episodes: &[Episode]) -> Result<()> {
    let scenes: Vec<_> = episodes.iter().map(|e| e.scene.clone()).collect();
    write(dir, &format!("{prefix}_gt.json"), &to_json(&eval::export_coco(&scenes)))?;
    let agent: Vec<_> = episodes
        .iter()
        .map(|e| (e.scene.image_id, e.trajectory.output))
        .collect();
    write(dir, &format!("{prefix}_agent.jsonl"), &eval::export_agent(&agent))?;
    let det: Vec<_> = episodes
        .iter()
        .map(|e| (e.scene.image_id, e.response.detections.clone()))
        .collect();
    write(dir, &format!("{prefix}_detector.json"), &to_json(&eval::export_detector(&det)))
}

/// Trains, checkpoints every phase, and evaluates the initial and trained
/// policies on the validation (center A) and test (center B) splits.
pub fn cmd_train(cfg: &ExperimentConfig, dir: &Path) -> Result<String> {
    write_config(dir, cfg)?;
    let work = cfg.workload(&cfg.train_tool)?;
    let plan = cfg.phase_plan()?;
    let (init, outcome) = train_outcome(cfg, &work, &plan)?;
    write(dir, "train_log.csv", &grpo::log_csv(&outcome.log))?;
    save_checkpoint(
        &dir.join("checkpoint_init.json"),
        &init,
        CheckpointMeta {
            trained_iterations: 0,
            phase: None,
        },
    )?;
    let mut done = 0;
    for (i, (spec, params)) in cfg.phases.iter().zip(&outcome.phase_params).enumerate() {
        done += spec.iterations;
        save_checkpoint(
            &dir.join(format!("checkpoint_phase{i}_{}.json", spec.reward)),
            params,
            CheckpointMeta {
                trained_iterations: done,
                phase: Some(spec.reward.clone()),
            },
        )?;
    }

    let profile = plan.final_profile();
    let mut csv = format!("{HELDOUT_HEADER}\n");
    let mut summary = String::new();
    for split in [Split::Val, Split::Test] {
        let before = grpo::evaluate(&init, &work, split, profile, &cfg.eval)?;
        let episodes = grpo::evaluate_episodes(&outcome.params, &work, split, profile, &cfg.eval)?;
        let after = grpo::summarize(split, &episodes);
        export_episodes(dir, &split.to_string(), &episodes)?;
        csv.push_str(&heldout_row("initial", &before));
        csv.push_str(&heldout_row("trained", &after));
        let _ = writeln!(
            summary,
            "{split} (center {}): reward {:.4} -> {:.4}, diagnosis {:.4} -> {:.4}, tool top-1 {:.4}, invoke rate {:.3}",
            split.center(),
            before.mean_reward,
            after.mean_reward,
            before.diag_acc,
            after.diag_acc,
            after.tool_top1_acc,
            after.invoke_rate
        );
    }
    write(dir, "heldout.csv", &csv)?;
    let _ = writeln!(summary, "artifacts in {}", dir.display());
    Ok(summary)
}

#[derive(Serialize)]
struct EvalArgsRecord<'a> {
    gt: &'a str,
    pred: &'a str,
    mode: Mode,
    thresholds: &'a [f64],
}

pub fn cmd_eval(gt: &Path, pred: &Path, mode: Mode, thresholds: &[f64], dir: &Path) -> Result<eval::MetricsReport> {
    for p in [gt, pred] {
        if !p.is_file() {
            return Err(UsageError(format!("{} not found", p.display())).into());
        }
    }
    let gt_text = fs::read_to_string(gt).with_context(|| format!("reading {}", gt.display()))?;
    let (truth, frame) = eval::ingest_coco_str(&gt_text).with_context(|| format!("ingesting {}", gt.display()))?;
    let pred_text = fs::read_to_string(pred).with_context(|| format!("reading {}", pred.display()))?;
    let preds = match mode {
        Mode::Agent => eval::ingest_agent_str(&pred_text, truth.num_categories),
        Mode::Detector => eval::ingest_detector_str(&pred_text, &frame),
    }
    .with_context(|| format!("ingesting {}", pred.display()))?;
    let report = eval::evaluate(&truth, &preds, mode, thresholds)?;
    let record = EvalArgsRecord {
        gt: &gt.to_string_lossy(),
        pred: &pred.to_string_lossy(),
        mode,
        thresholds,
    };
    write(dir, "eval.toml", &toml::to_string(&record).expect("representable in TOML"))?;
    write(dir, "metrics.csv", &report.to_csv())?;
    write(dir, "metrics.txt", &report.to_table())?;
    Ok(report)
}

pub const TOOL_STATS_HEADER: &str = "profile,n,coverage,mean_candidates_per_covered,top1_label_accuracy,anchor_label_accuracy,conf_0.0,conf_0.1,conf_0.2,conf_0.3,conf_0.4,conf_0.5,conf_0.6,conf_0.7,conf_0.8,conf_0.9";

/// Tool statistics over `n` positive scenes. With `n = 0` only the header
/// is written.
pub fn cmd_simulate_tool(cfg: &ExperimentConfig, profile: &str, n: usize, seed: u64, dir: &Path) -> Result<String> {
    let tool = cfg.tool(profile)?;
    write_config(dir, cfg)?;
    let mut csv = format!("{TOOL_STATS_HEADER}\n");
    if n > 0 {
        let stream = make_split(&cfg.env, &cfg.splits, Split::Train, ScenarioKind::Grounding, seed)?;
        let scenes: Vec<_> = stream.take(0, n as u64)?.into_iter().map(|(s, _)| s).collect();
        let stats = tool_stats(tool, &scenes, |i| substream(seed, "simulate-tool", i as u64));
        let hist: Vec<String> = stats.confidence_histogram.iter().map(u64::to_string).collect();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            stats.profile,
            stats.n,
            stats.coverage,
            stats.mean_candidates_per_covered,
            stats.top1_label_accuracy,
            stats.anchor_label_accuracy,
            hist.join(",")
        );
    }
    write(dir, &format!("tool_stats_{profile}.csv"), &csv)?;
    Ok(csv)
}

pub const ABLATE_DETECTORS_HEADER: &str =
    "seed,profile,coverage,tool_top1_acc,agent_acc,gain,agent_invoke_rate,agent_mean_reward";

/// For each tool profile: tool top-1 accuracy alone, the agent's accuracy
/// with that tool, and the gain, all on the validation split under the
/// fixed eval seed. Without a checkpoint, one policy is trained per profile
/// with the configured plan.
pub fn cmd_ablate_detectors(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    seeds: &[u64],
    dir: &Path,
) -> Result<String> {
    let loaded = match checkpoint {
        Some(path) => {
            let (params, meta) = load_checkpoint(path)?;
            if meta.trained_iterations == 0 {
                return Err(UsageError(format!(
                    "checkpoint {} is untrained (trained_iterations = 0)",
                    path.display()
                ))
                .into());
            }
            if params.num_categories != cfg.env.num_categories as usize {
                bail!(
                    "checkpoint has {} categories, config has {}",
                    params.num_categories,
                    cfg.env.num_categories
                );
            }
            Some(params)
        }
        None => None,
    };
    write_config(dir, cfg)?;
    let plan = cfg.phase_plan()?;
    let mut csv = format!("{ABLATE_DETECTORS_HEADER}\n");
    for &seed in seeds {
        let mut run = cfg.clone();
        run.reseed(seed);
        for tool in &cfg.tools {
            let work = run.workload(&tool.name)?;
            let params = match &loaded {
                Some(p) => p.clone(),
                None => {
                    let (_, outcome) = train_outcome(&run, &work, &plan)?;
                    save_checkpoint(
                        &dir.join(format!("checkpoint_seed{seed}_{}.json", tool.name)),
                        &outcome.params,
                        CheckpointMeta {
                            trained_iterations: plan.total_iterations(),
                            phase: cfg.phases.last().map(|p| p.reward.clone()),
                        },
                    )?;
                    outcome.params
                }
            };
            let h = grpo::evaluate(&params, &work, Split::Val, plan.final_profile(), &run.eval)?;
            let _ = writeln!(
                csv,
                "{seed},{},{},{},{},{},{},{}",
                tool.name,
                tool.coverage,
                h.tool_top1_acc,
                h.diag_acc,
                h.diag_acc - h.tool_top1_acc,
                h.invoke_rate,
                h.mean_reward
            );
        }
    }
    write(dir, "ablate_detectors.csv", &csv)?;
    Ok(csv)
}

pub const ABLATE_SCHEDULE_HEADER: &str =
    "seed,schedule,iterations,val_diag_acc,val_mean_reward,test_diag_acc,test_mean_reward";

/// Runs the configured plan and a diagnosis-only plan with the same total
/// iterations (using the last phase's reward), from the same init and seed.
pub fn cmd_ablate_schedule(cfg: &ExperimentConfig, seeds: &[u64], dir: &Path) -> Result<String> {
    write_config(dir, cfg)?;
    let configured = cfg.phase_plan()?;
    let total = configured.total_iterations();
    let last = configured.phases.last().expect("validated plan is nonempty");
    let single = PhasePlan {
        phases: vec![grpo::Phase {
            profile: last.profile.clone(),
            iterations: total,
            kind: last.kind,
        }],
    };
    let mut csv = format!("{ABLATE_SCHEDULE_HEADER}\n");
    let mut summary = String::new();
    let mut wins = 0;
    for &seed in seeds {
        let mut run = cfg.clone();
        run.reseed(seed);
        let work = run.workload(&run.train_tool)?;
        let mut accs = Vec::new();
        for (name, plan) in [("phased", &configured), ("single", &single)] {
            let (_, outcome) = train_outcome(&run, &work, plan)?;
            write(dir, &format!("ablate_schedule_seed{seed}_{name}_log.csv"), &grpo::log_csv(&outcome.log))?;
            let profile = configured.final_profile();
            let val = grpo::evaluate(&outcome.params, &work, Split::Val, profile, &run.eval)?;
            let test = grpo::evaluate(&outcome.params, &work, Split::Test, profile, &run.eval)?;
            let _ = writeln!(
                csv,
                "{seed},{name},{total},{},{},{},{}",
                val.diag_acc, val.mean_reward, test.diag_acc, test.mean_reward
            );
            accs.push(val.diag_acc);
        }
        if accs[0] >= accs[1] {
            wins += 1;
        }
        let _ = writeln!(summary, "seed {seed}: phased {:.4} vs single {:.4}", accs[0], accs[1]);
    }
    write(dir, "ablate_schedule.csv", &csv)?;
    let _ = writeln!(summary, "phased >= single in {wins} of {} seeds", seeds.len());
    Ok(format!("{csv}{summary}"))
}

const REPORT_FILES: [&str; 4] = ["heldout.csv", "ablate_detectors.csv", "ablate_schedule.csv", "metrics.csv"];

fn markdown_table(csv: &str) -> String {
    let mut lines = csv.lines().filter(|l| !l.is_empty());
    let Some(header) = lines.next() else {
        return String::new();
    };
    let cols = header.split(',').count();
    let mut s = format!("| {} |\n|{}\n", header.replace(',', " | "), "---|".repeat(cols));
    for line in lines {
        let cells: Vec<String> = line
            .split(',')
            .map(|c| match c.parse::<f64>() {
                Ok(v) if c.contains('.') => format!("{v:.4}"),
                _ => c.to_string(),
            })
            .collect();
        let _ = writeln!(s, "| {} |", cells.join(" | "));
    }
    s
}

/// Per-phase first and last ten-iteration means of the training log.
fn curve_summary(log: &str) -> String {
    let rows: Vec<Vec<f64>> = log
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').map(|c| c.parse().ok()).collect())
        .collect();
    let mut s = String::from("| phase | iterations | reward first 10 | reward last 10 | diag first 10 | diag last 10 |\n|---|---|---|---|---|---|\n");
    let mean = |rs: &[&Vec<f64>], col: usize| rs.iter().map(|r| r[col]).sum::<f64>() / rs.len().max(1) as f64;
    let mut phase = 0.0;
    loop {
        let rs: Vec<&Vec<f64>> = rows.iter().filter(|r| r.len() == 6 && r[1] == phase).collect();
        if rs.is_empty() {
            break;
        }
        let k = rs.len().min(10);
        let (head, tail) = (&rs[..k], &rs[rs.len() - k..]);
        let _ = writeln!(
            s,
            "| {phase} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
            rs.len(),
            mean(head, 2),
            mean(tail, 2),
            mean(head, 4),
            mean(tail, 4)
        );
        phase += 1.0;
    }
    s
}

/// Collects whatever known artifacts exist in `dir` into `report.md`.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let mut report = String::from("# Run report\n");
    let mut found = 0;
    if let Ok(log) = fs::read_to_string(dir.join("train_log.csv")) {
        found += 1;
        let _ = write!(report, "\n## Training curve\n\n{}", curve_summary(&log));
    }
    for name in REPORT_FILES {
        if let Ok(csv) = fs::read_to_string(dir.join(name)) {
            found += 1;
            let _ = write!(report, "\n## {name}\n\n{}", markdown_table(&csv));
        }
    }
    let mut stats: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("tool_stats_") && n.ends_with(".csv"))
        })
        .collect();
    stats.sort();
    for p in stats {
        found += 1;
        let csv = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let _ = write!(report, "\n## {name}\n\n{}", markdown_table(&csv));
    }
    if found == 0 {
        return Err(UsageError(format!("no artifacts found in {}", dir.display())).into());
    }
    write(dir, "report.md", &report)?;
    Ok(report)
}
