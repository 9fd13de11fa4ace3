use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use pfppo::checkpoint::{load_reward_model, save_policy, save_reward_model};
use pfppo::harness::{
    analyze, cmd_compare, cmd_eval, cmd_train, cmd_train_rm, ExperimentConfig, RewardKind,
};
use pfppo::policy::PolicyParams;
use pfppo::reward_model::RewardModel;
use pfppo::tasks::{build_task, TaskConfig, TaskSpec};
use tempfile::tempdir;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
        [ppo]
        iterations = 3
        prompts_per_iter = 16
        [eval]
        prompts = 64
        [analyze]
        prompts = 300
        "#,
    )
    .unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn train_rm_beats_chance_and_replays() {
    let cfg = ExperimentConfig::default();
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let report = cmd_train_rm(&cfg, 0, a.path()).unwrap();
    assert!(report.heldout_accuracy.unwrap() > 0.7, "{report:?}");
    assert!(report.heldout_pairs > 0 && report.train_pairs > report.heldout_pairs);
    cmd_train_rm(&cfg, 0, b.path()).unwrap();
    for f in [
        "reward_model.txt",
        "rm_loss.jsonl",
        "preferences.jsonl",
        "rm_report.json",
    ] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn zero_epoch_reward_model_scores_zero() {
    let mut cfg = ExperimentConfig::default();
    cfg.rm.epochs = 0;
    cfg.rm.prompts = 50;
    let dir = tempdir().unwrap();
    cmd_train_rm(&cfg, 1, dir.path()).unwrap();
    let rm: RewardModel<f64> = load_reward_model(&dir.path().join("reward_model.txt")).unwrap();
    let task = build_task(&cfg.task).unwrap();
    for s in 0..50 {
        let p = task.sample_prompt(s);
        assert_eq!(
            rm.reward_of(task.as_ref(), &p, &task.oracle_response(&p))
                .unwrap(),
            0.0
        );
        assert_eq!(rm.reward_of(task.as_ref(), &p, &[0, 0]).unwrap(), 0.0);
    }
}

#[test]
fn train_replays_and_keeps_best_checkpoint() {
    let cfg = small();
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let rec = cmd_train(&cfg, "pf_br", 5, a.path(), true).unwrap();
    cmd_train(&cfg, "pf_br", 5, b.path(), true).unwrap();
    assert_eq!(
        read(&a.path().join("metrics.jsonl")),
        read(&b.path().join("metrics.jsonl"))
    );
    assert_eq!(
        read(&a.path().join("run.json")),
        read(&b.path().join("run.json"))
    );
    assert_eq!(rec.metrics.len(), 3);
    for m in &rec.metrics {
        assert!(rec.final_eval.mean_score >= m.eval_true_score);
    }
    let best = rec.best_checkpoint.clone().unwrap();
    assert_eq!(
        read(&a.path().join("checkpoints").join(format!("{best}.policy"))),
        read(&a.path().join("best.policy"))
    );
    let lines = String::from_utf8(read(&a.path().join("metrics.jsonl"))).unwrap();
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["config_hash"], cfg.hash());
        assert!(v["candidates_generated"].as_u64().unwrap() > 0);
    }
    let ledger = rec.ledger.unwrap();
    assert_eq!(ledger.policy_updates, 3 * 2 * 16 * 3);
}

#[test]
fn kl_anchor_shows_from_the_second_iteration() {
    let mut cfg = small();
    cfg.ppo.iterations = 2;
    let kl = |beta: f64| {
        let mut c = cfg.clone();
        c.ppo.beta = beta;
        let dir = tempdir().unwrap();
        let rec = cmd_train(&c, "none", 3, dir.path(), false).unwrap();
        (rec.metrics[0].kl_to_ref, rec.metrics[1].kl_to_ref)
    };
    let (free, anchored) = (kl(0.0), kl(0.1));
    // the first batch is sampled from the reference itself, so the penalty is zero there
    assert_eq!(free.0, anchored.0);
    assert!(free.0 > 0.0);
    assert!(free.1 > anchored.1, "{free:?} vs {anchored:?}");
}

#[test]
fn default_training_fits_the_time_budget() {
    let cfg = ExperimentConfig::default();
    for seed in 0..3 {
        let dir = tempdir().unwrap();
        let t = Instant::now();
        cmd_train(&cfg, "pf_br", seed, dir.path(), false).unwrap();
        assert!(t.elapsed() < Duration::from_secs(300), "{:?}", t.elapsed());
    }
}

fn optimal_table(task: &dyn TaskSpec) -> PolicyParams<f64> {
    let mut p = PolicyParams::for_task(task);
    for seed in 0..50_000 {
        let prompt = task.sample_prompt(seed);
        let mut prefix = Vec::new();
        while prefix.len() < task.max_response_len(&prompt) {
            let o = task.observation(&prompt, &prefix).unwrap();
            let a = task.oracle_action(&prompt, &prefix);
            p.row_mut(o).unwrap()[a] = 10.0;
            prefix.push(a);
            if a == task.vocab().eos {
                break;
            }
        }
    }
    p
}

#[test]
fn eval_of_saved_policies() {
    let dir = tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let task = build_task(&cfg.task).unwrap();
    let path = dir.path().join("optimal.policy");
    save_policy(&path, &optimal_table(task.as_ref())).unwrap();
    let out = cmd_eval(&cfg, &path, 500, 3, dir.path()).unwrap();
    assert_eq!(out.report.mean_score, 1.0);
    let again = cmd_eval(&cfg, &path, 500, 3, dir.path()).unwrap();
    assert_eq!(out, again);

    // modsum with a single modulus of 5: a flat table always answers 0
    let mut cfg = ExperimentConfig::default();
    cfg.task = TaskConfig {
        min_modulus: 5,
        max_modulus: 5,
        ..TaskConfig::named("modsum")
    };
    let task = build_task(&cfg.task).unwrap();
    let path = dir.path().join("uniform.policy");
    save_policy(&path, &PolicyParams::<f64>::for_task(task.as_ref())).unwrap();
    let out = cmd_eval(&cfg, &path, 2000, 3, dir.path()).unwrap();
    assert!(
        (out.report.mean_score - 0.2).abs() <= 0.03,
        "{}",
        out.report.mean_score
    );

    assert!(cmd_eval(&cfg, &dir.path().join("missing.policy"), 10, 0, dir.path()).is_err());
    let sortseq_path = dir.path().join("optimal.policy");
    assert!(cmd_eval(&cfg, &sortseq_path, 10, 0, dir.path()).is_err());
}

#[test]
fn trained_reward_model_must_match_the_task() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("rm.txt");
    save_reward_model(&path, &RewardModel::<f64>::zeros(3)).unwrap();
    let mut cfg = small();
    cfg.reward.source = RewardKind::TrainedBt;
    cfg.reward.model = Some(path.clone());
    let err = cmd_train(&cfg, "ppo_m", 0, dir.path(), false).unwrap_err();
    assert_eq!(err.kind(), "invalid_config");

    save_reward_model(&path, &RewardModel::<f64>::zeros(5)).unwrap();
    assert!(cmd_train(&cfg, "ppo_m", 0, &dir.path().join("ok"), false).is_ok());
}

#[test]
fn compare_writes_table_and_checks_ledgers() {
    let mut cfg = small();
    cfg.compare.variants = vec!["ppo_s".into(), "ppo_m".into(), "pf_br".into()];
    let dir = tempdir().unwrap();
    let cmp = cmd_compare(&cfg, &[0, 1], dir.path()).unwrap();
    assert_eq!(cmp.rows.len(), 3);
    assert!(cmp.failures.is_empty());
    for w in cmp.rows.windows(2) {
        assert!(w[0].mean_score.unwrap() >= w[1].mean_score.unwrap());
    }
    let n = cfg.ppo.prompts_per_iter;
    for r in &cmp.rows {
        let l = r.ledger_per_iteration.as_ref().unwrap();
        assert_eq!(l.rm_forward, 5 * n);
        let kept = if r.variant == "pf_br" { 2 } else { 5 };
        assert_eq!(l.policy_updates, kept * n * cfg.ppo.ppo_epochs);
        assert_eq!(r.scores.len(), 2);
        assert!(Path::new(
            &dir.path()
                .join("runs")
                .join(&r.variant)
                .join("seed_1")
                .join("metrics.jsonl")
        )
        .exists());
    }
    let json: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join("comparison.json"))).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
    assert!(String::from_utf8(read(&dir.path().join("comparison.txt")))
        .unwrap()
        .starts_with("variant"));

    cfg.compare.variants.truncate(1);
    assert!(cmd_compare(&cfg, &[0], dir.path()).is_err());
}

#[test]
fn compare_keeps_partial_results() {
    let dir = tempdir().unwrap();
    let mut cfg = small();
    cfg.compare.variants = vec!["ppo_m".into(), "pf_br".into()];
    cfg.reward.source = RewardKind::TrainedBt;
    cfg.reward.model = Some(dir.path().join("no_such_model.txt"));
    let err = cmd_compare(&cfg, &[0], dir.path()).unwrap_err();
    assert_eq!(err.kind(), "sub_run_failed");
    let json: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join("comparison.json"))).unwrap();
    assert!(!json["failures"].as_array().unwrap().is_empty());
    assert!(json["rows"][0]["scores"][0].is_null());
}

#[test]
fn noiseless_filtration_tracks_ppo_m() {
    let mut cfg = ExperimentConfig::default();
    cfg.reward.sigma_max = 0.0;
    cfg.ppo.iterations = 20;
    cfg.compare.variants = vec![
        "ppo_m".into(),
        "pf_br".into(),
        "pf_bw".into(),
        "pf_bon".into(),
    ];
    let dir = tempdir().unwrap();
    let cmp = cmd_compare(&cfg, &[0, 1, 2, 3, 4], dir.path()).unwrap();
    let row = |v: &str| cmp.rows.iter().find(|r| r.variant == v).unwrap();
    let base = row("ppo_m");
    for v in ["pf_br", "pf_bw", "pf_bon"] {
        let r = row(v);
        let sd = base.sd_score.unwrap().max(r.sd_score.unwrap());
        let gap = (r.mean_score.unwrap() - base.mean_score.unwrap()).abs();
        assert!(gap <= 2.0 * sd + 1e-12, "{v}: gap {gap}, sd {sd}");
    }
}

#[test]
fn analyze_is_deterministic() {
    let cfg = small();
    let a = analyze(&cfg, "pf_bw", 4).unwrap();
    assert_eq!(a, analyze(&cfg, "pf_bw", 4).unwrap());
    assert!(a.samples > 0);
    assert!(analyze(&cfg, "no_such_variant", 4).is_err());
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pfppo"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_reports_errors_as_json() {
    let dir = tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let out = cli(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("missing.toml"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[ppo]\nclip_eps = -1.0\n").unwrap();
    let out = cli(&["analyze", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid_config");

    let out = cli(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");
}

#[test]
fn cli_runs_analyze_and_train() {
    let dir = tempdir().unwrap();
    let cfg_path = dir.path().join("small.toml");
    std::fs::write(&cfg_path, "[ppo]\niterations = 2\nprompts_per_iter = 8\n[eval]\nprompts = 32\n[analyze]\nprompts = 200\n")
        .unwrap();
    let c = cfg_path.to_str().unwrap();
    let out_dir = dir.path().join("an");
    let out = cli(&[
        "analyze",
        "--config",
        c,
        "--variant",
        "pf_bw",
        "--seed",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(out_dir.join("reliability.csv")).unwrap();
    assert!(csv.starts_with("bin_lo,bin_hi,mean_reward,mean_score,count"));

    let train_dir = dir.path().join("tr");
    let out = cli(&[
        "train",
        "--config",
        c,
        "--variant",
        "ppo_s",
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(train_dir
        .join("checkpoints")
        .join("iter_0002.policy")
        .exists());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["variant"], "ppo_s");
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = ExperimentConfig::load(&dir.join("default.toml")).unwrap();
    assert_eq!(default, ExperimentConfig::default());
    assert_eq!(default.hash(), ExperimentConfig::default().hash());
    for name in ["noiseless.toml", "brackets.toml"] {
        ExperimentConfig::load(&dir.join(name)).unwrap();
    }
    let bt = std::fs::read_to_string(dir.join("trained-bt.toml")).unwrap();
    let cfg: ExperimentConfig = toml::from_str(&bt).unwrap();
    assert!(cfg.reward.model.is_some());
}
