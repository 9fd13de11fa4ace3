//! Policy filtration: sample `N` responses, rank them by reward and keep a
//! strategy-defined subset (optionally reweighted) for the PPO buffer.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Trajectory};
use crate::reward_model::RewardSource;
use crate::rng;
use crate::scalar::Scalar;
use crate::tasks::{Prompt, TaskSpec};

/// Categorical weights over reward ranks (rank 0 = highest reward).
#[derive(Debug, Clone, PartialEq)]
pub struct RankWeights<T>(Vec<T>);

impl<T: Scalar> RankWeights<T> {
    pub fn new(w: Vec<T>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidStrategy("empty rank weights".into()));
        }
        if w.iter().any(|&x| !(x >= T::zero()) || !x.is_finite()) {
            return Err(Error::InvalidStrategy(
                "rank weights must be finite and non-negative".into(),
            ));
        }
        let total: T = w.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::InvalidStrategy(format!(
                "rank weights sum to {total}, not 1"
            )));
        }
        Ok(Self(w))
    }

    /// `(1, 0, …, 0)`
    pub fn bon(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidStrategy("best-of-N needs N >= 1".into()));
        }
        let mut w = vec![T::zero(); n];
        w[0] = T::one();
        Ok(Self(w))
    }

    /// `(1/2, 1/(2(N−1)), …, 1/(2(N−1)))`
    pub fn br(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidStrategy("best-random needs N >= 2".into()));
        }
        let half = T::lit(0.5);
        let rest = T::one() / T::lit(2.0 * (n - 1) as f64);
        let mut w = vec![rest; n];
        w[0] = half;
        Ok(Self(w))
    }

    /// `(1/2, 0, …, 0, 1/2)`
    pub fn bw(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidStrategy("best-worst needs N >= 2".into()));
        }
        let mut w = vec![T::zero(); n];
        w[0] = T::lit(0.5);
        w[n - 1] = T::lit(0.5);
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// One categorical draw over ranks.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, w) in self.0.iter().enumerate() {
            let w = w.as_f64();
            if w > 0.0 {
                last_positive = i;
                acc += w;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterStrategy<T> {
    RankBased(RankWeights<T>),
    /// Keep responses with reward `>= tau_hi`.
    Top {
        tau_hi: T,
    },
    /// Keep the top set plus every other response with probability `p_keep`.
    TopRandom {
        tau_hi: T,
        p_keep: T,
    },
    /// Keep responses with reward `>= tau_hi` or `<= tau_lo`.
    TopBottom {
        tau_hi: T,
        tau_lo: T,
    },
    /// Keep everything, weighted by `|r|^k` normalized to mean 1.
    PowK {
        k: T,
    },
    NoFilter,
}

impl<T: Scalar> FilterStrategy<T> {
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        let in_range = |x: T| x >= -T::one() && x <= T::one();
        if n < 1 || m < 1 {
            return Err(Error::InvalidStrategy(format!(
                "need N >= 1 and M >= 1 (N={n}, M={m})"
            )));
        }
        match self {
            FilterStrategy::RankBased(w) if w.len() != n => Err(Error::InvalidStrategy(format!(
                "rank weights have length {}, N = {n}",
                w.len()
            ))),
            FilterStrategy::Top { tau_hi } if !in_range(*tau_hi) => Err(Error::InvalidStrategy(
                format!("threshold {tau_hi} outside [-1, 1]"),
            )),
            FilterStrategy::TopRandom { tau_hi, p_keep } => {
                if !in_range(*tau_hi) {
                    Err(Error::InvalidStrategy(format!(
                        "threshold {tau_hi} outside [-1, 1]"
                    )))
                } else if !(*p_keep >= T::zero() && *p_keep <= T::one()) {
                    Err(Error::InvalidStrategy(format!(
                        "keep probability {p_keep} outside [0, 1]"
                    )))
                } else {
                    Ok(())
                }
            }
            FilterStrategy::TopBottom { tau_hi, tau_lo }
                if !in_range(*tau_hi) || !in_range(*tau_lo) =>
            {
                Err(Error::InvalidStrategy(
                    "thresholds must lie in [-1, 1]".into(),
                ))
            }
            FilterStrategy::PowK { k } if !(*k >= T::zero()) || !k.is_finite() => Err(
                Error::InvalidStrategy(format!("pow-k exponent {k} must be >= 0")),
            ),
            _ => Ok(()),
        }
    }

    /// Chooses kept candidates given their rewards (in sample order).
    /// Returns `(sample index, rank, sample weight)` triples.
    pub fn select<R: Rng + ?Sized>(
        &self,
        rewards: &[T],
        m: usize,
        rng: &mut R,
    ) -> Vec<(usize, usize, T)> {
        let order = rank_responses(rewards).expect("rewards only");
        let one = T::one();
        match self {
            FilterStrategy::RankBased(w) => (0..m)
                .map(|_| {
                    let rank = w.draw(rng);
                    (order[rank], rank, one)
                })
                .collect(),
            FilterStrategy::Top { tau_hi } => keep_ranked(&order, rewards, |r| r >= *tau_hi),
            FilterStrategy::TopRandom { tau_hi, p_keep } => {
                let p = p_keep.as_f64();
                order
                    .iter()
                    .enumerate()
                    .filter(|&(_, &i)| rewards[i] >= *tau_hi || rng.random::<f64>() < p)
                    .map(|(rank, &i)| (i, rank, one))
                    .collect()
            }
            FilterStrategy::TopBottom { tau_hi, tau_lo } => {
                keep_ranked(&order, rewards, |r| r >= *tau_hi || r <= *tau_lo)
            }
            FilterStrategy::PowK { k } => {
                let raw: Vec<T> = rewards.iter().map(|r| r.abs().powf(*k)).collect();
                let total: T = raw.iter().copied().sum();
                let n = T::lit(rewards.len() as f64);
                order
                    .iter()
                    .enumerate()
                    .map(|(rank, &i)| {
                        let w = if total > T::zero() {
                            n * raw[i] / total
                        } else {
                            one
                        };
                        (i, rank, w)
                    })
                    .filter(|&(_, _, w)| w > T::zero())
                    .collect()
            }
            FilterStrategy::NoFilter => order
                .iter()
                .enumerate()
                .map(|(rank, &i)| (i, rank, one))
                .collect(),
        }
    }

    /// Short label used in configs and reports.
    pub fn label(&self) -> String {
        match self {
            FilterStrategy::RankBased(w) => {
                let n = w.len();
                if let Ok(b) = RankWeights::<T>::bon(n) {
                    if b == *w {
                        return "bon".into();
                    }
                }
                if let Ok(b) = RankWeights::<T>::br(n) {
                    if b == *w {
                        return "br".into();
                    }
                }
                if let Ok(b) = RankWeights::<T>::bw(n) {
                    if b == *w {
                        return "bw".into();
                    }
                }
                "rank-custom".into()
            }
            FilterStrategy::Top { .. } => "top".into(),
            FilterStrategy::TopRandom { .. } => "top-random".into(),
            FilterStrategy::TopBottom { .. } => "top-bottom".into(),
            FilterStrategy::PowK { k } => format!("pow:{k}"),
            FilterStrategy::NoFilter => "none".into(),
        }
    }
}

impl<T: Scalar> fmt::Display for FilterStrategy<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn keep_ranked<T: Scalar>(
    order: &[usize],
    rewards: &[T],
    keep: impl Fn(T) -> bool,
) -> Vec<(usize, usize, T)> {
    order
        .iter()
        .enumerate()
        .filter(|&(_, &i)| keep(rewards[i]))
        .map(|(rank, &i)| (i, rank, T::one()))
        .collect()
}

/// Stable descending sort by reward: `order[rank] = sample index`.
pub fn rank_responses<T: Scalar>(rewards: &[T]) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    if rewards.iter().any(|r| r.is_nan()) {
        return Err(Error::InvalidStrategy("NaN reward".into()));
    }
    order.sort_by(|&a, &b| rewards[b].partial_cmp(&rewards[a]).expect("no NaN"));
    Ok(order)
}

/// Ranking with an explicit trajectory list; the lengths must agree.
pub fn rank_trajectories<T: Scalar>(trajs: &[Trajectory<T>], rewards: &[T]) -> Result<Vec<usize>> {
    if trajs.len() != rewards.len() {
        return Err(Error::LengthMismatch(format!(
            "{} trajectories, {} rewards",
            trajs.len(),
            rewards.len()
        )));
    }
    rank_responses(rewards)
}

#[derive(Debug, Clone)]
pub struct KeptSample<T> {
    pub trajectory: Trajectory<T>,
    pub weight: T,
    pub rank: usize,
    pub actual_score: f64,
}

/// Filtered buffer contribution of one prompt.
#[derive(Debug, Clone)]
pub struct FilteredBatch<T> {
    pub kept: Vec<KeptSample<T>>,
    /// All `N` generated candidates in sample order, rewards filled.
    pub candidates: Vec<Trajectory<T>>,
    pub candidate_scores: Vec<f64>,
    pub candidates_generated: usize,
}

/// Samples `n` responses from `policy`, scores them with `reward`, and keeps
/// a subset according to `strategy`. `m` is the number of categorical draws
/// for rank-based strategies and is ignored by the others.
#[allow(clippy::too_many_arguments)]
pub fn filter_sample<T: Scalar>(
    strategy: &FilterStrategy<T>,
    task: &dyn TaskSpec,
    prompt: &Prompt,
    policy: &PolicyParams<T>,
    reward: &RewardSource<T>,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<FilteredBatch<T>> {
    strategy.validate(n, m)?;
    let mut candidates = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for j in 0..n as u64 {
        let mut traj = policy.sample_response(task, prompt, rng::derive_seed(&[seed, 0, j]));
        let r = reward.reward(task, prompt, &traj.tokens, rng::derive_seed(&[seed, 1, j]))?;
        traj.scalar_reward = Some(r);
        scores.push(task.score(prompt, &traj.tokens));
        rewards.push(r);
        candidates.push(traj);
    }
    let mut pick = rng::stream(&[seed, 2]);
    let kept = strategy
        .select(&rewards, m, &mut pick)
        .into_iter()
        .map(|(i, rank, weight)| KeptSample {
            trajectory: candidates[i].clone(),
            weight,
            rank,
            actual_score: scores[i],
        })
        .collect();
    Ok(FilteredBatch {
        kept,
        candidates,
        candidate_scores: scores,
        candidates_generated: n,
    })
}
