use std::collections::BTreeMap;

use pfppo::diagnostics::{
    compute_accounting, compute_r2, group_by_reward, reliability_report, spearman, Binning,
    ReliabilityBin, RewardScore,
};
use pfppo::filtration::{FilterStrategy, RankWeights};
use pfppo::policy::{train_reference, SftConfig};
use pfppo::ppo::{IterationMetrics, PpoConfig};
use pfppo::reward_model::{noisy_oracle_reward, NoisyOracleConfig, RewardSource};
use pfppo::rng::stream;
use pfppo::tasks::{build_task, TaskConfig};
use proptest::prelude::*;
use rand::Rng;

fn sample(reward: f64, score: f64) -> RewardScore<f64> {
    RewardScore {
        reward,
        score,
        weight: 1.0,
    }
}

fn bin(x: f64, y: f64) -> ReliabilityBin<f64> {
    ReliabilityBin {
        reward_lo: x - 0.01,
        reward_hi: x + 0.01,
        mean_reward: x,
        mean_actual_score: y,
        count: 5,
    }
}

#[test]
fn grouping_examples() {
    let same: Vec<_> = (0..7).map(|i| sample(0.5, i as f64 / 10.0)).collect();
    let g = group_by_reward(&same, Binning::default()).unwrap();
    assert_eq!(g.bins.len(), 1);
    assert_eq!(g.bins[0].mean_reward, 0.5);
    assert_eq!(g.bins[0].count, 7);

    let two: Vec<_> = [-0.9, 0.9, 0.9, -0.9, 0.9]
        .iter()
        .map(|&r| sample(r, 0.0))
        .collect();
    let g = group_by_reward(
        &two,
        Binning {
            bin_width: 0.1,
            min_bin_count: 1,
        },
    )
    .unwrap();
    assert_eq!(
        g.bins.iter().map(|b| b.count).collect::<Vec<_>>(),
        vec![2, 3]
    );
    assert!(g.bins[1].reward_lo <= 0.9 && 0.9 < g.bins[1].reward_hi);

    assert!(group_by_reward::<f64>(&[], Binning::default()).is_err());
    assert!(group_by_reward(
        &same,
        Binning {
            bin_width: 0.0,
            min_bin_count: 1
        }
    )
    .is_err());
}

#[test]
fn grouping_matches_reference_group_by() {
    let cfg = NoisyOracleConfig {
        sigma_max: 0.5,
        seed: 0,
        frozen: false,
    };
    let mut rng = stream(&[21]);
    let samples: Vec<_> = (0..10_000)
        .map(|_| {
            let s = (rng.random_range(0..=6) as f64) / 6.0;
            sample(noisy_oracle_reward(&cfg, s, &mut rng), s)
        })
        .collect();
    let binning = Binning {
        bin_width: 0.05,
        min_bin_count: 5,
    };
    let g = group_by_reward(&samples, binning).unwrap();

    // bins keyed by the integer index of the lower edge, with ±1 exact values pinned into the end bins
    let mut reference: BTreeMap<i64, (f64, f64, usize)> = BTreeMap::new();
    for s in &samples {
        let k = ((s.reward + 1.0) * 20.0 + 1e-9).floor().min(39.0) as i64;
        let e = reference.entry(k).or_default();
        e.0 += s.reward;
        e.1 += s.score;
        e.2 += 1;
    }
    let kept: Vec<_> = reference.into_iter().filter(|(_, v)| v.2 >= 5).collect();
    assert_eq!(g.bins.len(), kept.len());
    for (b, (k, (sr, ss, c))) in g.bins.iter().zip(kept) {
        assert!((b.reward_lo - (-1.0 + k as f64 * 0.05)).abs() < 1e-12);
        assert_eq!(b.count, c);
        assert!((b.mean_reward - sr / c as f64).abs() < 1e-12);
        assert!((b.mean_actual_score - ss / c as f64).abs() < 1e-12);
    }
}

#[test]
fn r2_examples() {
    let fit = compute_r2(&[bin(0.0, 0.0), bin(0.5, 0.3), bin(1.0, 0.4)]).unwrap();
    assert!((fit.r2.unwrap() - 0.92308).abs() < 1e-4);
    assert!((fit.slope.unwrap() - 0.4).abs() < 1e-12);

    let line: Vec<_> = [-0.8, -0.3, 0.1, 0.6]
        .iter()
        .map(|&x| bin(x, 0.5 * x + 0.5))
        .collect();
    assert!((compute_r2(&line).unwrap().r2.unwrap() - 1.0).abs() < 1e-12);

    let flat: Vec<_> = [-0.8, -0.3, 0.1].iter().map(|&x| bin(x, 0.3)).collect();
    assert_eq!(compute_r2(&flat).unwrap().r2, None);
    assert!(compute_r2(&flat[..2]).is_err());
}

#[test]
fn zero_noise_reports_are_linear() {
    let task = build_task(&TaskConfig::named("sortseq")).unwrap();
    let reference = train_reference::<f64>(task.as_ref(), &SftConfig::default());
    let reward = RewardSource::NoisyOracle(NoisyOracleConfig {
        sigma_max: 0.0,
        seed: 0,
        frozen: false,
    });
    let strategies = [
        FilterStrategy::NoFilter,
        FilterStrategy::RankBased(RankWeights::br(5).unwrap()),
        FilterStrategy::RankBased(RankWeights::bw(5).unwrap()),
        FilterStrategy::TopRandom {
            tau_hi: 0.8,
            p_keep: 0.5,
        },
    ];
    let binning = Binning {
        bin_width: 0.05,
        min_bin_count: 5,
    };
    for s in &strategies {
        let r = reliability_report(
            s,
            reference.params(),
            &reward,
            task.as_ref(),
            500,
            5,
            2,
            binning,
            3,
        )
        .unwrap();
        assert!(r.r2.unwrap() >= 0.999, "{}: {:?}", s.label(), r.r2);
        let again = reliability_report(
            s,
            reference.params(),
            &reward,
            task.as_ref(),
            500,
            5,
            2,
            binning,
            3,
        )
        .unwrap();
        assert_eq!(r, again);
        assert_eq!(
            r.bins.iter().map(|b| b.count).sum::<usize>() + r.dropped,
            r.samples
        );
        assert!(r
            .to_csv()
            .starts_with("bin_lo,bin_hi,mean_reward,mean_score,count\n"));
    }
}

#[test]
fn too_few_bins_is_reported_not_fatal() {
    let task = build_task(&TaskConfig::named("sortseq")).unwrap();
    let reference = train_reference::<f64>(task.as_ref(), &SftConfig::default());
    let reward = RewardSource::NoisyOracle(NoisyOracleConfig {
        sigma_max: 0.0,
        seed: 0,
        frozen: false,
    });
    let s = FilterStrategy::Top { tau_hi: 1.0 };
    let r = reliability_report(
        &s,
        reference.params(),
        &reward,
        task.as_ref(),
        50,
        5,
        1,
        Binning::default(),
        0,
    )
    .unwrap();
    assert_eq!(r.r2, None);
    assert!(r.diagnostic.is_some());
}

fn metrics(
    variant: &str,
    iterations: usize,
    cfg: &PpoConfig,
    entries: usize,
) -> Vec<IterationMetrics> {
    let (n, big_n) = (cfg.prompts_per_iter, cfg.n_responses);
    (1..=iterations)
        .map(|iteration| IterationMetrics {
            iteration,
            variant: variant.into(),
            train_reward_mean: 0.0,
            train_true_score: 0.0,
            eval_reward_mean: 0.0,
            eval_true_score: 0.0,
            kl_to_ref: 0.0,
            queries_sampled: if variant == "ppo_s" { big_n * n } else { n },
            responses_per_query: if variant == "ppo_s" { 1 } else { big_n },
            candidates_generated: big_n * n,
            rm_forward: big_n * n,
            buffer_entries: entries,
            policy_updates: entries * cfg.ppo_epochs,
            value_updates: entries * cfg.ppo_epochs,
            surrogate: 0.0,
        })
        .collect()
}

#[test]
fn accounting_examples() {
    let cfg = PpoConfig {
        prompts_per_iter: 64,
        ppo_epochs: 3,
        ..PpoConfig::default()
    };
    let br = compute_accounting(&metrics("pf_br", 10, &cfg, 128), &cfg).unwrap();
    assert_eq!(br.policy_updates, 3840);
    let m = compute_accounting(&metrics("ppo_m", 10, &cfg, 320), &cfg).unwrap();
    assert_eq!(m.policy_updates, 9600);
    let s = compute_accounting(&metrics("ppo_s", 10, &cfg, 320), &cfg).unwrap();
    assert_eq!(s.policy_updates, 9600);
    assert_eq!(s.queries_sampled, 3200);
    assert_eq!(br.rm_forward, 3200);
    assert_eq!(m.rm_forward, 3200);
    assert_eq!(s.rm_forward, 3200);

    assert!(compute_accounting(&metrics("pf_br", 2, &cfg, 320), &cfg).is_err());
    let mut bad = metrics("ppo_m", 3, &cfg, 320);
    bad[2].iteration = 1;
    assert!(compute_accounting(&bad, &cfg).is_err());
    assert!(compute_accounting(&[], &cfg).is_err());
}

#[test]
fn spearman_examples() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn r2_affine_invariant_and_bounded(
        pts in prop::collection::vec((-1.0f64..1.0, 0.0f64..1.0), 3..12),
        a in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0],
        b in -2.0f64..2.0,
    ) {
        let bins: Vec<_> = pts.iter().map(|&(x, y)| bin(x, y)).collect();
        let moved: Vec<_> = pts.iter().map(|&(x, y)| bin(a * x + b, y)).collect();
        let (r, s) = (compute_r2(&bins).unwrap().r2, compute_r2(&moved).unwrap().r2);
        if let (Some(r), Some(s)) = (r, s) {
            prop_assert!(r <= 1.0 + 1e-12);
            prop_assert!((r - s).abs() < 1e-10, "{} vs {}", r, s);
        }
    }

    #[test]
    fn grouping_conserves_counts(rewards in prop::collection::vec(-1.0f64..=1.0, 1..200), min in 1usize..8) {
        let samples: Vec<_> = rewards.iter().map(|&r| sample(r, 0.5)).collect();
        let g = group_by_reward(&samples, Binning { bin_width: 0.1, min_bin_count: min }).unwrap();
        prop_assert_eq!(g.bins.iter().map(|b| b.count).sum::<usize>() + g.dropped, samples.len());
        for b in &g.bins {
            prop_assert!(b.count >= min);
            prop_assert!(b.reward_lo < b.reward_hi);
            prop_assert!(b.mean_reward >= b.reward_lo - 1e-12 && b.mean_reward <= b.reward_hi + 1e-12);
        }
    }
}
