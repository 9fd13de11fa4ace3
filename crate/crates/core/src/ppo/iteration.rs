use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::advantage::{compute_gae, normalize_batch, shape_rewards, NormMode, NormalizerState};
use super::update::{clipped_policy_update, value_update, RolloutBuffer};
use super::PpoConfig;
use crate::error::{Error, Result};
use crate::filtration::{filter_sample, FilterStrategy, FilteredBatch, RankWeights};
use crate::policy::{PolicyParams, ReferencePolicy, Trajectory, ValueParams};
use crate::reward_model::RewardSource;
use crate::rng;
use crate::scalar::{softmax, Scalar};
use crate::tasks::{Prompt, TaskSpec};

/// Which sampling scheme fills the buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant<T> {
    /// One response for each of `N · n` prompts.
    PpoS,
    /// All `N` responses for each of `n` prompts.
    PpoM,
    /// `N` responses for each of `n` prompts, filtered by the strategy.
    Filtered(FilterStrategy<T>),
}

impl<T: Scalar> Variant<T> {
    pub fn name(&self) -> String {
        match self {
            Variant::PpoS => "ppo_s".into(),
            Variant::PpoM => "ppo_m".into(),
            Variant::Filtered(s) => match s {
                FilterStrategy::RankBased(_) => format!("pf_{}", s.label()).replace('-', "_"),
                FilterStrategy::PowK { k } => format!("pow_{k}"),
                other => other.label().replace('-', "_"),
            },
        }
    }

    pub fn strategy(&self) -> FilterStrategy<T> {
        match self {
            Variant::PpoS | Variant::PpoM => FilterStrategy::NoFilter,
            Variant::Filtered(s) => s.clone(),
        }
    }

    /// `(queries per iteration, responses per query)`.
    pub fn sampling_shape(&self, cfg: &PpoConfig) -> (usize, usize) {
        match self {
            Variant::PpoS => (cfg.n_responses * cfg.prompts_per_iter, 1),
            _ => (cfg.prompts_per_iter, cfg.n_responses),
        }
    }

    pub fn validate(&self, cfg: &PpoConfig) -> Result<()> {
        cfg.validate()?;
        if let Variant::Filtered(s) = self {
            if cfg.n_responses < 2 {
                return Err(Error::Config(format!(
                    "filtered variant {} needs n_responses >= 2",
                    self.name()
                )));
            }
            s.validate(cfg.n_responses, cfg.m_kept)?;
        }
        Ok(())
    }

    /// Rank-based variant from its short name (`bon`, `br`, `bw`).
    pub fn rank_based(name: &str, n: usize) -> Result<Self> {
        let w = match name {
            "bon" => RankWeights::bon(n)?,
            "br" => RankWeights::br(n)?,
            "bw" => RankWeights::bw(n)?,
            other => {
                return Err(Error::InvalidStrategy(format!(
                    "unknown rank strategy `{other}`"
                )))
            }
        };
        Ok(Variant::Filtered(FilterStrategy::RankBased(w)))
    }
}

/// Everything that evolves across iterations.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub policy: PolicyParams<T>,
    pub value: ValueParams<T>,
    pub reference: ReferencePolicy<T>,
    pub reward_norm: NormalizerState<T>,
}

impl<T: Scalar> TrainState<T> {
    /// Starts RL from the reference policy with a zero critic.
    pub fn from_reference(reference: ReferencePolicy<T>) -> Self {
        let policy = reference.params().clone();
        let value = ValueParams::zeros(policy.num_observations());
        Self {
            policy,
            value,
            reference,
            reward_norm: NormalizerState::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub variant: String,
    pub train_reward_mean: f64,
    pub train_true_score: f64,
    pub eval_reward_mean: f64,
    pub eval_true_score: f64,
    pub kl_to_ref: f64,
    pub queries_sampled: usize,
    pub responses_per_query: usize,
    pub candidates_generated: usize,
    pub rm_forward: usize,
    pub buffer_entries: usize,
    pub policy_updates: usize,
    pub value_updates: usize,
    pub surrogate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_score: f64,
    pub mean_reward: f64,
    pub prompts: usize,
}

/// Greedy decoding on `prompts`: mean true score (pass@1 analog) and mean
/// reward. Reward noise for prompt `i` is drawn from `(seed, i)`.
pub fn evaluate<T: Scalar>(
    policy: &PolicyParams<T>,
    task: &dyn TaskSpec,
    reward: &RewardSource<T>,
    prompts: &[Prompt],
    seed: u64,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("evaluation prompts"));
    }
    let per_prompt: Vec<(f64, f64)> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let y = policy.greedy_decode(task, p);
            let r = reward.reward(task, p, &y, rng::derive_seed(&[seed, i as u64]))?;
            Ok((task.score(p, &y), r.as_f64()))
        })
        .collect::<Result<_>>()?;
    let n = prompts.len() as f64;
    Ok(EvalReport {
        mean_score: per_prompt.iter().map(|x| x.0).sum::<f64>() / n,
        mean_reward: per_prompt.iter().map(|x| x.1).sum::<f64>() / n,
        prompts: prompts.len(),
    })
}

/// Mean exact categorical KL(π_θ(·|o) ‖ π^SFT(·|o)) over the observations
/// visited by greedy rollouts of `params` on `prompts`.
pub fn kl_to_ref<T: Scalar>(
    params: &PolicyParams<T>,
    reference: &ReferencePolicy<T>,
    task: &dyn TaskSpec,
    prompts: &[Prompt],
) -> Result<T> {
    let r = reference.params();
    if (r.num_observations(), r.vocab_size()) != (params.num_observations(), params.vocab_size()) {
        return Err(Error::ShapeMismatch(
            "policy and reference tables differ in shape".into(),
        ));
    }
    let mut total = T::zero();
    let mut visits = 0usize;
    for p in prompts {
        let y = params.greedy_decode(task, p);
        for t in 0..y.len() {
            let obs = task.observation(p, &y[..t])?;
            total = total + categorical_kl(&softmax(params.row(obs)?), &softmax(r.row(obs)?));
            visits += 1;
        }
    }
    if visits == 0 {
        return Ok(T::zero());
    }
    Ok((total / T::lit(visits as f64)).max(T::zero()))
}

pub(crate) fn categorical_kl<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > T::zero())
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

fn prepare<T: Scalar>(
    traj: &mut Trajectory<T>,
    normalized_reward: T,
    state: &TrainState<T>,
    cfg: &PpoConfig,
) -> Result<()> {
    let refp = state.reference.params();
    traj.ref_logprobs = traj
        .obs_ids
        .iter()
        .zip(traj.tokens.iter())
        .map(|(&o, &tok)| Ok(refp.log_probs(o)?[tok]))
        .collect::<Result<_>>()?;
    traj.values = traj.obs_ids.iter().map(|&o| state.value.get(o)).collect();
    traj.scalar_reward = Some(normalized_reward);
    traj.shaped_rewards = shape_rewards(traj, T::lit(cfg.beta))?;
    let (adv, ret) = compute_gae(
        &traj.shaped_rewards,
        &traj.values,
        T::lit(cfg.gamma),
        T::lit(cfg.gae_lambda),
    )?;
    traj.advantages = adv;
    traj.returns = ret;
    Ok(())
}

fn normalize_advantages<T: Scalar>(buffer: &mut RolloutBuffer<T>) -> Result<()> {
    let flat: Vec<T> = buffer
        .entries
        .iter()
        .flat_map(|e| e.trajectory.advantages.iter().copied())
        .collect();
    let mut scratch = NormalizerState::new();
    let normed = normalize_batch(&flat, &mut scratch, NormMode::PerBatch)?;
    let mut it = normed.into_iter();
    for e in &mut buffer.entries {
        for a in &mut e.trajectory.advantages {
            *a = it.next().expect("same length");
        }
    }
    Ok(())
}

/// Prompts and sampling seeds for one iteration.
fn collect<T: Scalar>(
    variant: &Variant<T>,
    policy: &PolicyParams<T>,
    task: &dyn TaskSpec,
    reward: &RewardSource<T>,
    cfg: &PpoConfig,
    seed: u64,
    iteration: usize,
) -> Result<Vec<FilteredBatch<T>>> {
    let (queries, per_query) = variant.sampling_shape(cfg);
    let strategy = variant.strategy();
    let it = iteration as u64;
    (0..queries as u64)
        .into_par_iter()
        .map(|q| {
            let prompt = task.sample_prompt(rng::derive_seed(&[seed, it, q, 0]));
            filter_sample(
                &strategy,
                task,
                &prompt,
                policy,
                reward,
                per_query,
                cfg.m_kept,
                rng::derive_seed(&[seed, it, q, 1]),
            )
        })
        .collect()
}

/// One iteration: fill the buffer, shape rewards, estimate advantages, run
/// the PPO passes and evaluate the updated policy greedily on
/// `eval_prompts`.
#[allow(clippy::too_many_arguments)]
pub fn run_iteration<T: Scalar>(
    variant: &Variant<T>,
    state: &TrainState<T>,
    task: &dyn TaskSpec,
    reward: &RewardSource<T>,
    cfg: &PpoConfig,
    eval_prompts: &[Prompt],
    eval_seed: u64,
    seed: u64,
    iteration: usize,
) -> Result<(TrainState<T>, IterationMetrics)> {
    variant.validate(cfg)?;
    let (queries, per_query) = variant.sampling_shape(cfg);
    let batches = collect(variant, &state.policy, task, reward, cfg, seed, iteration)?;
    let mut next = state.clone();

    let kept: Vec<_> = batches.iter().flat_map(|b| b.kept.iter()).collect();
    let raw: Vec<T> = kept
        .iter()
        .map(|k| {
            k.trajectory
                .scalar_reward
                .ok_or(Error::MissingField("scalar_reward"))
        })
        .collect::<Result<_>>()?;
    let (train_reward_mean, train_true_score) = if kept.is_empty() {
        (0.0, 0.0)
    } else {
        let n = kept.len() as f64;
        (
            raw.iter().map(|r| r.as_f64()).sum::<f64>() / n,
            kept.iter().map(|k| k.actual_score).sum::<f64>() / n,
        )
    };
    let rewards = if cfg.normalize_rewards && !raw.is_empty() {
        normalize_batch(&raw, &mut next.reward_norm, NormMode::Running)?
    } else {
        raw.clone()
    };

    let mut buffer = RolloutBuffer::new();
    for (k, &r) in kept.iter().zip(&rewards) {
        let mut traj = k.trajectory.clone();
        prepare(&mut traj, r, state, cfg)?;
        buffer.push(traj, k.weight);
    }

    let update_seed = rng::derive_seed(&[seed, iteration as u64, u64::MAX]);
    let mut surrogate = 0.0;
    let mut value_entries = buffer.len();
    if !buffer.is_empty() {
        if cfg.normalize_advantages {
            normalize_advantages(&mut buffer)?;
        }
        let (policy, s) = clipped_policy_update(&buffer, &state.policy, cfg, update_seed)?;
        next.policy = policy;
        surrogate = s.as_f64();
        let critic_buffer = if cfg.critic_on_all_candidates {
            let mut all = RolloutBuffer::new();
            for b in &batches {
                let cand_raw: Vec<T> = b
                    .candidates
                    .iter()
                    .map(|c| c.scalar_reward.expect("scored"))
                    .collect();
                let cand_r = if cfg.normalize_rewards {
                    next.reward_norm.apply(&cand_raw)
                } else {
                    cand_raw
                };
                for (c, r) in b.candidates.iter().zip(cand_r) {
                    let mut traj = c.clone();
                    prepare(&mut traj, r, state, cfg)?;
                    all.push(traj, T::one());
                }
            }
            value_entries = all.len();
            all
        } else {
            buffer.clone()
        };
        next.value = value_update(&critic_buffer, &state.value, cfg, update_seed ^ 1)?;
    } else {
        value_entries = 0;
    }

    let eval = evaluate(&next.policy, task, reward, eval_prompts, eval_seed)?;
    let kl = kl_to_ref(&next.policy, &next.reference, task, eval_prompts)?;
    let metrics = IterationMetrics {
        iteration,
        variant: variant.name(),
        train_reward_mean,
        train_true_score,
        eval_reward_mean: eval.mean_reward,
        eval_true_score: eval.mean_score,
        kl_to_ref: kl.as_f64(),
        queries_sampled: queries,
        responses_per_query: per_query,
        candidates_generated: batches.iter().map(|b| b.candidates_generated).sum(),
        rm_forward: batches.iter().map(|b| b.candidates.len()).sum(),
        buffer_entries: buffer.len(),
        policy_updates: buffer.len() * cfg.ppo_epochs,
        value_updates: value_entries * cfg.ppo_epochs,
        surrogate,
    };
    Ok((next, metrics))
}
