//! Experiment orchestration behind the CLI: reward-model training, RL runs,
//! evaluation, reliability analysis and multi-variant comparison. Every
//! command is a pure function of (config, seed) and writes its outputs
//! under the given directory.

mod config;

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    parse_strategy, parse_variant, AnalyzeConfig, CompareConfig, EvalConfig, ExperimentConfig,
    FilterConfig, RewardConfig, RewardKind, RmConfig,
};

use crate::checkpoint;
use crate::diagnostics::{
    compute_accounting, reliability_report, spearman, ComputeLedger, ReliabilityReport,
};
use crate::error::{Error, Result};
use crate::policy::{train_reference, PolicyParams, ReferencePolicy};
use crate::ppo::{evaluate, run_iteration, EvalReport, IterationMetrics, TrainState};
use crate::reward_model::{
    build_preference_pairs, train_reward_model, NoisyOracleConfig, RewardModel, RewardSource,
};
use crate::rng::derive_seed;
use crate::tasks::{build_task, Prompt, TaskSpec};

// Stream labels for seeds derived from a run seed.
const RM_PROMPTS: u64 = 1;
const RM_PAIRS: u64 = 2;
const ORACLE: u64 = 3;
const EVAL_PROMPTS: u64 = 4;
const ANALYZE: u64 = 5;

fn to_json<S: Serialize>(value: &S) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn reference_policy(cfg: &ExperimentConfig, task: &dyn TaskSpec) -> ReferencePolicy<f64> {
    train_reference(task, &cfg.sft)
}

/// Reward source named by the config. The noisy oracle's noise stream is
/// derived from the run seed.
pub fn reward_source(
    cfg: &ExperimentConfig,
    task: &dyn TaskSpec,
    seed: u64,
) -> Result<RewardSource<f64>> {
    match cfg.reward.source {
        RewardKind::NoisyOracle => Ok(RewardSource::NoisyOracle(NoisyOracleConfig {
            sigma_max: cfg.reward.sigma_max,
            seed: derive_seed(&[seed, ORACLE]),
            frozen: cfg.reward.frozen_noise,
        })),
        RewardKind::TrainedBt => {
            let path = cfg
                .reward
                .model
                .as_ref()
                .ok_or(Error::MissingField("reward.model"))?;
            let rm: RewardModel<f64> = checkpoint::load_reward_model(path)?;
            if rm.dim() != task.feature_dim() {
                return Err(Error::Config(format!(
                    "reward model {} has {} features, task {} has {}",
                    path.display(),
                    rm.dim(),
                    task.id(),
                    task.feature_dim()
                )));
            }
            Ok(RewardSource::Learned(rm))
        }
    }
}

fn prompts(task: &dyn TaskSpec, n: usize, seed: u64) -> Vec<Prompt> {
    (0..n as u64)
        .map(|i| task.sample_prompt(derive_seed(&[seed, i])))
        .collect()
}

/// The fixed evaluation set shared by every run of a config.
pub fn eval_prompts(cfg: &ExperimentConfig, task: &dyn TaskSpec) -> Vec<Prompt> {
    prompts(
        task,
        cfg.eval.prompts,
        derive_seed(&[cfg.eval.seed, EVAL_PROMPTS]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmReport {
    pub config_hash: String,
    pub seed: u64,
    pub pairs: usize,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub final_loss: f64,
    pub train_accuracy: Option<f64>,
    pub heldout_accuracy: Option<f64>,
}

/// Fraction of pairs ranked correctly; ties count half.
fn pairwise_accuracy(
    rm: &RewardModel<f64>,
    task: &dyn TaskSpec,
    pairs: &[crate::reward_model::PreferencePair],
) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut correct = 0.0;
    for p in pairs {
        let (w, l) = (
            rm.reward_of(task, &p.prompt, &p.winner)?,
            rm.reward_of(task, &p.prompt, &p.loser)?,
        );
        correct += if w > l {
            1.0
        } else if w == l {
            0.5
        } else {
            0.0
        };
    }
    Ok(Some(correct / pairs.len() as f64))
}

/// Builds preference pairs from the reference policy, trains the reward
/// model on the first `1 - holdout` of them and scores the rest.
///
/// Writes `reward_model.txt`, `rm_loss.jsonl`, `preferences.jsonl` and
/// `rm_report.json`.
pub fn cmd_train_rm(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<RmReport> {
    let task = build_task(&cfg.task)?;
    let reference = reference_policy(cfg, task.as_ref());
    let prompts = prompts(
        task.as_ref(),
        cfg.rm.prompts,
        derive_seed(&[seed, RM_PROMPTS]),
    );
    let pairs = build_preference_pairs(
        task.as_ref(),
        reference.params(),
        &prompts,
        cfg.rm.responses,
        cfg.rm.flip_rate,
        derive_seed(&[seed, RM_PAIRS]),
    )?;
    let heldout = (pairs.len() as f64 * cfg.rm.holdout).round() as usize;
    let (train, test) = pairs.split_at(pairs.len() - heldout);
    let (rm, losses) = train_reward_model::<f64>(train, task.as_ref(), &cfg.rm.train())?;

    checkpoint::save_reward_model(&out.join("reward_model.txt"), &rm)?;
    let mut log = String::new();
    for (epoch, loss) in losses.iter().enumerate() {
        writeln!(
            log,
            "{}",
            serde_json::json!({ "epoch": epoch, "loss": loss })
        )
        .unwrap();
    }
    checkpoint::write_file(&out.join("rm_loss.jsonl"), &log)?;
    let mut data = String::new();
    for p in &pairs {
        writeln!(data, "{}", serde_json::to_string(p)?).unwrap();
    }
    checkpoint::write_file(&out.join("preferences.jsonl"), &data)?;

    let report = RmReport {
        config_hash: cfg.hash(),
        seed,
        pairs: pairs.len(),
        train_pairs: train.len(),
        heldout_pairs: test.len(),
        final_loss: *losses.last().expect("epochs + 1 losses"),
        train_accuracy: pairwise_accuracy(&rm, task.as_ref(), train)?,
        heldout_accuracy: pairwise_accuracy(&rm, task.as_ref(), test)?,
    };
    checkpoint::write_file(&out.join("rm_report.json"), &to_json(&report))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub metrics: Vec<IterationMetrics>,
    /// `iter_NNNN` of the iteration with the highest evaluation score; the
    /// earliest such iteration on ties.
    pub best_checkpoint: Option<String>,
    pub best_iteration: Option<usize>,
    /// Greedy evaluation of the best checkpoint (the reference policy when
    /// no iteration ran).
    pub final_eval: EvalReport,
    pub ledger: Option<ComputeLedger>,
}

impl RunRecord {
    pub fn best_score(&self) -> f64 {
        self.final_eval.mean_score
    }
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    metrics: &'a IterationMetrics,
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration:04}")
}

/// Runs one variant end to end. Writes `metrics.jsonl` (one line per
/// iteration), `best.policy`, `run.json` and, when `checkpoints` is set,
/// `checkpoints/iter_NNNN.{policy,value}` after every iteration.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    variant_name: &str,
    seed: u64,
    out: &Path,
    checkpoints: bool,
) -> Result<RunRecord> {
    let variant = parse_variant::<f64>(variant_name, cfg)?;
    let task = build_task(&cfg.task)?;
    let task = task.as_ref();
    let reward = reward_source(cfg, task, seed)?;
    let eval_set = eval_prompts(cfg, task);
    let hash = cfg.hash();

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut sink =
        BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);

    let mut state = TrainState::from_reference(reference_policy(cfg, task));
    let mut best: Option<(usize, EvalReport, PolicyParams<f64>)> = None;
    let mut metrics = Vec::with_capacity(cfg.ppo.iterations);
    for it in 1..=cfg.ppo.iterations {
        let (next, m) = run_iteration(
            &variant,
            &state,
            task,
            &reward,
            &cfg.ppo,
            &eval_set,
            cfg.eval.seed,
            seed,
            it,
        )?;
        let line = serde_json::to_string(&MetricsLine {
            config_hash: &hash,
            seed,
            metrics: &m,
        })?;
        writeln!(sink, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        if checkpoints {
            let stem = out.join("checkpoints").join(checkpoint_name(it));
            checkpoint::save_policy(&stem.with_extension("policy"), &next.policy)?;
            checkpoint::save_value(&stem.with_extension("value"), &next.value)?;
        }
        if best
            .as_ref()
            .is_none_or(|(_, e, _)| m.eval_true_score > e.mean_score)
        {
            let eval = EvalReport {
                mean_score: m.eval_true_score,
                mean_reward: m.eval_reward_mean,
                prompts: eval_set.len(),
            };
            best = Some((it, eval, next.policy.clone()));
        }
        metrics.push(m);
        state = next;
    }
    sink.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let (best_iteration, final_eval, best_policy) = match best {
        Some((it, eval, p)) => (Some(it), eval, p),
        None => {
            let p = state.policy.clone();
            (
                None,
                evaluate(&p, task, &reward, &eval_set, cfg.eval.seed)?,
                p,
            )
        }
    };
    checkpoint::save_policy(&out.join("best.policy"), &best_policy)?;
    let ledger = if metrics.is_empty() {
        None
    } else {
        Some(compute_accounting(&metrics, &cfg.ppo)?)
    };
    let record = RunRecord {
        config_hash: hash,
        variant: variant.name(),
        seed,
        metrics,
        best_checkpoint: best_iteration.map(checkpoint_name),
        best_iteration,
        final_eval,
        ledger,
    };
    checkpoint::write_file(&out.join("run.json"), &to_json(&record))?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub config_hash: String,
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub report: EvalReport,
}

/// Greedy evaluation of a saved policy on `n_prompts` prompts drawn from
/// `seed`. Writes `eval.json`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    policy_path: &Path,
    n_prompts: usize,
    seed: u64,
    out: &Path,
) -> Result<EvalOutput> {
    let task = build_task(&cfg.task)?;
    let task = task.as_ref();
    let policy: PolicyParams<f64> = checkpoint::load_policy(policy_path)?;
    if policy.num_observations() != task.num_observations()
        || policy.vocab_size() != task.vocab().size
    {
        return Err(Error::Config(format!(
            "checkpoint {} is {}x{}, task {} needs {}x{}",
            policy_path.display(),
            policy.num_observations(),
            policy.vocab_size(),
            task.id(),
            task.num_observations(),
            task.vocab().size
        )));
    }
    let reward = reward_source(cfg, task, seed)?;
    let set = prompts(task, n_prompts, derive_seed(&[seed, EVAL_PROMPTS]));
    let report = evaluate(&policy, task, &reward, &set, seed)?;
    let output = EvalOutput {
        config_hash: cfg.hash(),
        checkpoint: policy_path.to_path_buf(),
        seed,
        report,
    };
    checkpoint::write_file(&out.join("eval.json"), &to_json(&output))?;
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOutput {
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub report: ReliabilityReport,
}

/// Reliability report without touching the filesystem (beyond loading the
/// configured policy checkpoint, if any).
pub fn analyze(cfg: &ExperimentConfig, variant_name: &str, seed: u64) -> Result<ReliabilityReport> {
    let variant = parse_variant::<f64>(variant_name, cfg)?;
    let task = build_task(&cfg.task)?;
    let task = task.as_ref();
    let policy = match &cfg.analyze.policy {
        Some(path) => checkpoint::load_policy(path)?,
        None => reference_policy(cfg, task).params().clone(),
    };
    let reward = reward_source(cfg, task, seed)?;
    let (_, n) = variant.sampling_shape(&cfg.ppo);
    reliability_report(
        &variant.strategy(),
        &policy,
        &reward,
        task,
        cfg.analyze.prompts,
        n,
        cfg.ppo.m_kept,
        cfg.analyze.binning(),
        derive_seed(&[seed, ANALYZE]),
    )
}

/// Writes `reliability.csv` and `reliability.json`.
pub fn cmd_analyze(
    cfg: &ExperimentConfig,
    variant_name: &str,
    seed: u64,
    out: &Path,
) -> Result<AnalyzeOutput> {
    let report = analyze(cfg, variant_name, seed)?;
    checkpoint::write_file(&out.join("reliability.csv"), &report.to_csv())?;
    let output = AnalyzeOutput {
        config_hash: cfg.hash(),
        variant: variant_name.to_string(),
        seed,
        report,
    };
    checkpoint::write_file(&out.join("reliability.json"), &to_json(&output))?;
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    /// Mean and sample standard deviation of the best evaluation score over
    /// the completed seeds.
    pub mean_score: Option<f64>,
    pub sd_score: Option<f64>,
    /// Per seed, `None` where the sub-run failed.
    pub scores: Vec<Option<f64>>,
    pub mean_r2: Option<f64>,
    pub r2: Vec<Option<f64>>,
    /// Ledger of the first completed seed, divided per iteration.
    pub ledger_per_iteration: Option<ComputeLedger>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
    /// Spearman correlation of `mean_r2` against `mean_score` over the rows
    /// where both are defined.
    pub spearman_r2_score: Option<f64>,
    pub failures: Vec<String>,
}

fn mean_sd(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        Some((xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    } else {
        None
    };
    (Some(mean), sd)
}

fn per_iteration(l: &ComputeLedger) -> ComputeLedger {
    let k = l.iterations.max(1);
    ComputeLedger {
        iterations: 1,
        queries_sampled: l.queries_sampled / k,
        responses_per_query: l.responses_per_query,
        rm_forward: l.rm_forward / k,
        candidates_generated: l.candidates_generated / k,
        policy_updates: l.policy_updates / k,
        value_updates: l.value_updates / k,
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

impl Comparison {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>8} {:>8} {:>8} {:>9} {:>9} {:>8}\n",
            "variant", "score", "sd", "r2", "queries", "updates", "rm_fwd"
        );
        for r in &self.rows {
            let l = r.ledger_per_iteration.as_ref();
            let col =
                |f: fn(&ComputeLedger) -> usize| l.map_or_else(|| "-".into(), |l| f(l).to_string());
            writeln!(
                out,
                "{:<12} {:>8} {:>8} {:>8} {:>9} {:>9} {:>8}",
                r.variant,
                fmt_opt(r.mean_score),
                fmt_opt(r.sd_score),
                fmt_opt(r.mean_r2),
                col(|l| l.queries_sampled),
                col(|l| l.policy_updates),
                col(|l| l.rm_forward),
            )
            .unwrap();
        }
        writeln!(
            out,
            "spearman(r2, score) = {}",
            fmt_opt(self.spearman_r2_score)
        )
        .unwrap();
        out
    }
}

/// Runs every configured variant for every seed (concurrently), attaches a
/// reliability report per variant and seed, and writes `comparison.json`
/// and `comparison.txt`. Sub-run outputs go to `runs/<variant>/seed_<s>/`.
/// Failed sub-runs leave empty cells; the comparison is still written and
/// the command then fails.
pub fn cmd_compare(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<Comparison> {
    let variants = &cfg.compare.variants;
    if variants.len() < 2 {
        return Err(Error::Config(format!(
            "compare needs at least 2 variants, got {}",
            variants.len()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    let jobs: Vec<(&String, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<(Result<RunRecord>, Result<ReliabilityReport>)> = jobs
        .par_iter()
        .map(|&(v, s)| {
            let dir = out.join("runs").join(v).join(format!("seed_{s}"));
            (
                cmd_train(cfg, v, s, &dir, cfg.compare.checkpoints),
                analyze(cfg, v, s),
            )
        })
        .collect();

    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        let mut scores = Vec::new();
        let mut r2 = Vec::new();
        let mut ledger = None;
        for (si, &s) in seeds.iter().enumerate() {
            let (run, rel) = &results[vi * seeds.len() + si];
            match run {
                Ok(rec) => {
                    scores.push(Some(rec.best_score()));
                    if ledger.is_none() {
                        ledger = rec.ledger.as_ref().map(per_iteration);
                    }
                }
                Err(e) => {
                    scores.push(None);
                    failures.push(format!("{v} seed {s}: {e}"));
                }
            }
            match rel {
                Ok(rep) => r2.push(rep.r2),
                Err(e) => {
                    r2.push(None);
                    failures.push(format!("{v} seed {s} reliability: {e}"));
                }
            }
        }
        let done: Vec<f64> = scores.iter().flatten().copied().collect();
        let (mean_score, sd_score) = mean_sd(&done);
        let defined: Vec<f64> = r2.iter().flatten().copied().collect();
        rows.push(CompareRow {
            variant: v.clone(),
            mean_score,
            sd_score,
            scores,
            mean_r2: mean_sd(&defined).0,
            r2,
            ledger_per_iteration: ledger,
        });
    }
    rows.sort_by(|a, b| {
        let key = |r: &CompareRow| r.mean_score.unwrap_or(f64::NEG_INFINITY);
        key(b)
            .total_cmp(&key(a))
            .then_with(|| a.variant.cmp(&b.variant))
    });
    let paired: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r.mean_r2?, r.mean_score?)))
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
    let comparison = Comparison {
        config_hash: cfg.hash(),
        seeds: seeds.to_vec(),
        rows,
        spearman_r2_score: spearman(&xs, &ys),
        failures,
    };
    checkpoint::write_file(&out.join("comparison.json"), &to_json(&comparison))?;
    checkpoint::write_file(&out.join("comparison.txt"), &comparison.to_text())?;
    if !comparison.failures.is_empty() {
        return Err(Error::SubRun(comparison.failures.join("; ")));
    }
    Ok(comparison)
}
