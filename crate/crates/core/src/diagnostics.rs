//! Reward-reliability diagnostics: reward-binned reliability curves, the R²
//! of a line fitted through the bin means, and compute accounting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtration::{filter_sample, FilterStrategy};
use crate::policy::PolicyParams;
use crate::ppo::{IterationMetrics, PpoConfig};
use crate::reward_model::RewardSource;
use crate::rng;
use crate::scalar::Scalar;
use crate::tasks::{ScoredResponse, TaskSpec};

/// One pooled sample: reward, actual score and sample weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardScore<T> {
    pub reward: T,
    pub score: T,
    pub weight: T,
}

impl<T: Scalar> From<&ScoredResponse<T>> for RewardScore<T> {
    fn from(s: &ScoredResponse<T>) -> Self {
        Self {
            reward: s.reward,
            score: T::lit(s.actual_score),
            weight: T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin<T> {
    pub reward_lo: T,
    pub reward_hi: T,
    pub mean_reward: T,
    pub mean_actual_score: T,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub bin_width: f64,
    pub min_bin_count: usize,
}

impl Default for Binning {
    fn default() -> Self {
        Self {
            bin_width: 0.05,
            min_bin_count: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grouped<T> {
    pub bins: Vec<ReliabilityBin<T>>,
    /// Samples in bins below `min_bin_count`.
    pub dropped: usize,
}

/// Fixed-width bins over `[-1, 1]`; the top edge belongs to the last bin.
/// Bin means are weighted by the sample weights.
pub fn group_by_reward<T: Scalar>(
    samples: &[RewardScore<T>],
    binning: Binning,
) -> Result<Grouped<T>> {
    if samples.is_empty() {
        return Err(Error::Empty("reliability samples"));
    }
    if !(binning.bin_width > 0.0) {
        return Err(Error::Config(format!(
            "bin width {} must be > 0",
            binning.bin_width
        )));
    }
    let width = binning.bin_width;
    let nbins = ((2.0 / width) - 1e-9).ceil().max(1.0) as usize;
    // (Σw, Σw·r, Σw·s, count)
    let mut acc = vec![(T::zero(), T::zero(), T::zero(), 0usize); nbins];
    for s in samples {
        let x = s.reward.as_f64().clamp(-1.0, 1.0);
        // tolerance so that values on a bin edge land in the bin they open
        let idx = (((x + 1.0) / width + 1e-9).floor() as usize).min(nbins - 1);
        let a = &mut acc[idx];
        a.0 = a.0 + s.weight;
        a.1 = a.1 + s.weight * s.reward;
        a.2 = a.2 + s.weight * s.score;
        a.3 += 1;
    }
    let mut bins = Vec::new();
    let mut dropped = 0;
    for (i, (w, wr, ws, count)) in acc.into_iter().enumerate() {
        if count == 0 {
            continue;
        }
        if count < binning.min_bin_count || w <= T::zero() {
            dropped += count;
            continue;
        }
        bins.push(ReliabilityBin {
            reward_lo: T::lit(edge(i, width)),
            reward_hi: T::lit(edge(i + 1, width).min(1.0)),
            mean_reward: wr / w,
            mean_actual_score: ws / w,
            count,
        });
    }
    Ok(Grouped { bins, dropped })
}

/// `−1 + i·width`, rounded to 12 decimals so printed edges stay short.
fn edge(i: usize, width: f64) -> f64 {
    ((-1.0 + i as f64 * width) * 1e12).round() / 1e12
}

/// Least-squares line through the bin means and its coefficient of
/// determination. `r2` is `None` when the scores (or rewards) have no spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit<T> {
    pub r2: Option<T>,
    pub slope: Option<T>,
    pub intercept: Option<T>,
}

/// Unweighted OLS of `mean_actual_score` on `mean_reward`, one point per bin;
/// `R² = 1 − SS_res / SS_tot`.
pub fn compute_r2<T: Scalar>(bins: &[ReliabilityBin<T>]) -> Result<LineFit<T>> {
    if bins.len() < 3 {
        return Err(Error::Empty("R² needs at least 3 bins"));
    }
    let n = T::lit(bins.len() as f64);
    let mx = bins.iter().map(|b| b.mean_reward).sum::<T>() / n;
    let my = bins.iter().map(|b| b.mean_actual_score).sum::<T>() / n;
    let sxx: T = bins.iter().map(|b| (b.mean_reward - mx).powi(2)).sum();
    let sxy: T = bins
        .iter()
        .map(|b| (b.mean_reward - mx) * (b.mean_actual_score - my))
        .sum();
    let ss_tot: T = bins
        .iter()
        .map(|b| (b.mean_actual_score - my).powi(2))
        .sum();
    let xscale = bins
        .iter()
        .map(|b| b.mean_reward.abs())
        .fold(T::zero(), T::max);
    if sxx <= (T::epsilon() * xscale).powi(2) * n * T::lit(16.0) {
        return Ok(LineFit {
            r2: None,
            slope: None,
            intercept: None,
        });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let scale = bins
        .iter()
        .map(|b| b.mean_actual_score.abs())
        .fold(T::zero(), T::max);
    if ss_tot <= (T::epsilon() * scale).powi(2) * n * T::lit(16.0) {
        return Ok(LineFit {
            r2: None,
            slope: Some(slope),
            intercept: Some(intercept),
        });
    }
    let ss_res: T = bins
        .iter()
        .map(|b| (b.mean_actual_score - (intercept + slope * b.mean_reward)).powi(2))
        .sum();
    Ok(LineFit {
        r2: Some(T::one() - ss_res / ss_tot),
        slope: Some(slope),
        intercept: Some(intercept),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub strategy: String,
    pub bins: Vec<ReliabilityBin<f64>>,
    pub r2: Option<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub samples: usize,
    pub dropped: usize,
    /// Why `r2` is undefined, if it is.
    pub diagnostic: Option<String>,
}

impl ReliabilityReport {
    /// CSV with header `bin_lo,bin_hi,mean_reward,mean_score,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,mean_reward,mean_score,count\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.reward_lo, b.reward_hi, b.mean_reward, b.mean_actual_score, b.count
            ));
        }
        out
    }
}

/// Pools the kept samples of `strategy` over `n_prompts` fresh prompts and
/// fits the reliability line.
#[allow(clippy::too_many_arguments)]
pub fn reliability_report<T: Scalar>(
    strategy: &FilterStrategy<T>,
    policy: &PolicyParams<T>,
    reward: &RewardSource<T>,
    task: &dyn TaskSpec,
    n_prompts: usize,
    n: usize,
    m: usize,
    binning: Binning,
    seed: u64,
) -> Result<ReliabilityReport> {
    strategy.validate(n, m)?;
    let per_prompt: Vec<Vec<RewardScore<f64>>> = (0..n_prompts as u64)
        .into_par_iter()
        .map(|i| {
            let prompt = task.sample_prompt(rng::derive_seed(&[seed, i, 0]));
            let batch = filter_sample(
                strategy,
                task,
                &prompt,
                policy,
                reward,
                n,
                m,
                rng::derive_seed(&[seed, i, 1]),
            )?;
            Ok(batch
                .kept
                .iter()
                .map(|k| RewardScore {
                    reward: k.trajectory.scalar_reward.expect("scored").as_f64(),
                    score: k.actual_score,
                    weight: k.weight.as_f64(),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let pooled: Vec<RewardScore<f64>> = per_prompt.into_iter().flatten().collect();
    let mut report = ReliabilityReport {
        strategy: strategy.label(),
        bins: Vec::new(),
        r2: None,
        slope: None,
        intercept: None,
        samples: pooled.len(),
        dropped: 0,
        diagnostic: None,
    };
    if pooled.is_empty() {
        report.diagnostic = Some("strategy kept no samples".into());
        return Ok(report);
    }
    let grouped = group_by_reward(&pooled, binning)?;
    report.dropped = grouped.dropped;
    report.bins = grouped.bins;
    if report.bins.len() < 3 {
        report.diagnostic = Some(format!(
            "only {} bins reach the minimum count",
            report.bins.len()
        ));
        return Ok(report);
    }
    let fit = compute_r2(&report.bins)?;
    report.r2 = fit.r2;
    report.slope = fit.slope;
    report.intercept = fit.intercept;
    if fit.r2.is_none() {
        report.diagnostic = Some("no spread in bin means".into());
    }
    Ok(report)
}

/// Aggregated compute counters of a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeLedger {
    pub iterations: usize,
    pub queries_sampled: usize,
    pub responses_per_query: usize,
    pub rm_forward: usize,
    pub candidates_generated: usize,
    pub policy_updates: usize,
    pub value_updates: usize,
}

/// Sums the per-iteration counters and checks each iteration against the
/// sampling contract of its variant: `N·n` reward-model calls for every
/// variant, `N·n` queries of one response for PPO-S, `n` queries of `N`
/// responses otherwise, `N·n·m` update contributions for unfiltered variants
/// and `M·n·m` for rank-based filtration.
pub fn compute_accounting(metrics: &[IterationMetrics], cfg: &PpoConfig) -> Result<ComputeLedger> {
    if metrics.is_empty() {
        return Err(Error::Empty("metrics stream"));
    }
    let (n, big_n, m, epochs) = (
        cfg.prompts_per_iter,
        cfg.n_responses,
        cfg.m_kept,
        cfg.ppo_epochs,
    );
    let mut ledger = ComputeLedger::default();
    let variant = &metrics[0].variant;
    for (i, rec) in metrics.iter().enumerate() {
        let fail = |what: String| {
            Err(Error::Accounting(format!(
                "iteration {}: {what}",
                rec.iteration
            )))
        };
        if rec.variant != *variant {
            return fail(format!("variant changed from {variant} to {}", rec.variant));
        }
        if i > 0 && rec.iteration <= metrics[i - 1].iteration {
            return fail("iterations not increasing".into());
        }
        let (q, r) = if variant == "ppo_s" {
            (big_n * n, 1)
        } else {
            (n, big_n)
        };
        if rec.queries_sampled != q || rec.responses_per_query != r {
            return fail(format!(
                "sampled {} queries x {} responses, expected {q} x {r}",
                rec.queries_sampled, rec.responses_per_query
            ));
        }
        if rec.rm_forward != big_n * n || rec.candidates_generated != big_n * n {
            return fail(format!(
                "{} reward-model calls, expected {}",
                rec.rm_forward,
                big_n * n
            ));
        }
        let expected_updates = match variant.as_str() {
            "ppo_s" | "ppo_m" => Some(big_n * n * epochs),
            v if v.starts_with("pow_") => Some(big_n * n * epochs),
            v if v.starts_with("pf_") => Some(m * n * epochs),
            _ => None,
        };
        match expected_updates {
            Some(u) if rec.policy_updates != u => {
                return fail(format!(
                    "{} policy updates, expected {u}",
                    rec.policy_updates
                ));
            }
            None if rec.policy_updates > big_n * n * epochs => {
                return fail(format!(
                    "{} policy updates exceed N·n·m",
                    rec.policy_updates
                ));
            }
            _ => {}
        }
        if rec.policy_updates != rec.buffer_entries * epochs {
            return fail("policy updates differ from buffer entries x epochs".into());
        }
        ledger.iterations += 1;
        ledger.queries_sampled += rec.queries_sampled;
        ledger.responses_per_query = rec.responses_per_query;
        ledger.rm_forward += rec.rm_forward;
        ledger.candidates_generated += rec.candidates_generated;
        ledger.policy_updates += rec.policy_updates;
        ledger.value_updates += rec.value_updates;
    }
    Ok(ledger)
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bin(x: f64, y: f64) -> ReliabilityBin<f64> {
        ReliabilityBin {
            reward_lo: x,
            reward_hi: x + 0.05,
            mean_reward: x,
            mean_actual_score: y,
            count: 5,
        }
    }

    fn sample(r: f64, s: f64) -> RewardScore<f64> {
        RewardScore {
            reward: r,
            score: s,
            weight: 1.0,
        }
    }

    #[test]
    fn identical_rewards_single_bin() {
        let s: Vec<_> = (0..7).map(|i| sample(0.5, i as f64 / 7.0)).collect();
        let g = group_by_reward(&s, Binning::default()).unwrap();
        assert_eq!(g.bins.len(), 1);
        assert_eq!(g.bins[0].mean_reward, 0.5);
        assert_eq!(g.bins[0].count, 7);
    }

    #[test]
    fn two_extreme_bins_and_edges() {
        let mut s: Vec<_> = (0..5).map(|_| sample(-0.9, 0.0)).collect();
        s.extend((0..6).map(|_| sample(0.9, 1.0)));
        s.push(sample(1.0, 1.0));
        let g = group_by_reward(
            &s,
            Binning {
                bin_width: 0.1,
                min_bin_count: 1,
            },
        )
        .unwrap();
        assert_eq!(
            g.bins.iter().map(|b| b.count).collect::<Vec<_>>(),
            vec![5, 7]
        );
        assert!(group_by_reward::<f64>(&[], Binning::default()).is_err());
    }

    #[test]
    fn r2_cases() {
        let line: Vec<_> = [-0.6, -0.1, 0.3, 0.8]
            .iter()
            .map(|&x| bin(x, 0.5 * x + 0.5))
            .collect();
        assert!((compute_r2(&line).unwrap().r2.unwrap() - 1.0).abs() < 1e-12);
        let flat: Vec<_> = [-0.6, -0.1, 0.3].iter().map(|&x| bin(x, 0.4)).collect();
        assert_eq!(compute_r2(&flat).unwrap().r2, None);
        assert!(compute_r2(&line[..2]).is_err());
        let three = [bin(0.0, 0.0), bin(0.5, 0.3), bin(1.0, 0.4)];
        let fit = compute_r2(&three).unwrap();
        assert!((fit.r2.unwrap() - 0.92308).abs() < 1e-4);
        assert!((fit.slope.unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 2.0]), None);
    }
}
