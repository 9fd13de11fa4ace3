//! Clipped-surrogate policy updates and value regression on a rollout buffer.
//!
//! Both objectives average per observation: every token term is scaled by
//! `1 / Σ w` over the visits of its observation within the minibatch, so a
//! table row moves by the same step regardless of how often it was visited.

use rand::seq::SliceRandom;

use super::PpoConfig;
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, Trajectory, ValueParams};
use crate::rng;
use crate::scalar::{softmax, Scalar};

/// One buffer sample. Behavior log-probabilities are copied from the
/// trajectory at construction and never change afterwards.
#[derive(Debug, Clone)]
pub struct BufferEntry<T> {
    pub trajectory: Trajectory<T>,
    pub weight: T,
    behavior_logprobs: Vec<T>,
}

impl<T: Scalar> BufferEntry<T> {
    pub fn new(trajectory: Trajectory<T>, weight: T) -> Self {
        let behavior_logprobs = trajectory.logprobs.clone();
        Self {
            trajectory,
            weight,
            behavior_logprobs,
        }
    }

    pub fn behavior_logprobs(&self) -> &[T] {
        &self.behavior_logprobs
    }
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer<T> {
    pub entries: Vec<BufferEntry<T>>,
}

impl<T: Scalar> RolloutBuffer<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, trajectory: Trajectory<T>, weight: T) {
        self.entries.push(BufferEntry::new(trajectory, weight));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.entries.iter().map(|e| e.trajectory.len()).sum()
    }
}

/// `1 / Σ w` per observation over the given entries (0 for unvisited rows).
fn visit_scale<T: Scalar>(entries: &[&BufferEntry<T>], rows: usize) -> Vec<T> {
    let mut mass = vec![T::zero(); rows];
    for e in entries {
        for &o in &e.trajectory.obs_ids {
            mass[o] = mass[o] + e.weight;
        }
    }
    mass.into_iter()
        .map(|m| {
            if m > T::zero() {
                T::one() / m
            } else {
                T::zero()
            }
        })
        .collect()
}

fn check_filled<T: Scalar>(e: &BufferEntry<T>, need_returns: bool) -> Result<()> {
    let n = e.trajectory.len();
    if e.trajectory.obs_ids.len() != n || e.behavior_logprobs.len() != n {
        return Err(Error::MissingField("obs_ids/logprobs"));
    }
    if need_returns {
        if e.trajectory.returns.len() != n {
            return Err(Error::MissingField("returns"));
        }
    } else if e.trajectory.advantages.len() != n {
        return Err(Error::MissingField("advantages"));
    }
    Ok(())
}

fn ratio_and_row<T: Scalar>(
    params: &PolicyParams<T>,
    obs: usize,
    tok: usize,
    behavior: T,
) -> (T, Vec<T>) {
    let probs = softmax(params.row(obs).expect("obs in range"));
    let ratio = (probs[tok].ln() - behavior).exp();
    (ratio, probs)
}

/// `Σ_e Σ_t w_e c_o min(ρ_t A_t, clip(ρ_t, 1−ε, 1+ε) A_t)` with
/// `c_o = 1 / Σ w` over the visits of observation `o`.
pub fn surrogate_objective<T: Scalar>(
    entries: &[BufferEntry<T>],
    params: &PolicyParams<T>,
    clip_eps: T,
) -> Result<T> {
    let refs: Vec<&BufferEntry<T>> = entries.iter().collect();
    Ok(surrogate_pass(&refs, params, clip_eps)?.objective)
}

struct SurrogatePass<T> {
    objective: T,
    grad: Vec<T>,
    /// Σ w · min(…) over all terms and the number of terms.
    weighted_sum: T,
    terms: usize,
}

fn surrogate_pass<T: Scalar>(
    entries: &[&BufferEntry<T>],
    params: &PolicyParams<T>,
    clip_eps: T,
) -> Result<SurrogatePass<T>> {
    let v = params.vocab_size();
    let mut grad = vec![T::zero(); params.logits().len()];
    let mut objective = T::zero();
    let mut term_sum = T::zero();
    let mut terms = 0usize;
    let (lo, hi) = (T::one() - clip_eps, T::one() + clip_eps);
    let scale = visit_scale(entries, params.num_observations());
    for e in entries {
        check_filled(e, false)?;
        let tr = &e.trajectory;
        for t in 0..tr.len() {
            let (obs, tok, adv) = (tr.obs_ids[t], tr.tokens[t], tr.advantages[t]);
            let (ratio, probs) = ratio_and_row(params, obs, tok, e.behavior_logprobs[t]);
            let clipped = ratio.max(lo).min(hi) * adv;
            let term = (ratio * adv).min(clipped);
            objective = objective + e.weight * scale[obs] * term;
            term_sum = term_sum + e.weight * term;
            terms += 1;
            let inactive = (adv > T::zero() && ratio > hi) || (adv < T::zero() && ratio < lo);
            if inactive {
                continue;
            }
            // ∂(ρA)/∂logits = ρA (e_tok − π)
            let c = e.weight * scale[obs] * ratio * adv;
            let row = &mut grad[obs * v..(obs + 1) * v];
            for (g, p) in row.iter_mut().zip(&probs) {
                *g = *g - c * *p;
            }
            row[tok] = row[tok] + c;
        }
    }
    Ok(SurrogatePass {
        objective,
        grad,
        weighted_sum: term_sum,
        terms,
    })
}

/// Gradient of [`surrogate_objective`] with respect to the logit table
/// (zero on terms where clipping is active).
pub fn surrogate_gradient<T: Scalar>(
    entries: &[BufferEntry<T>],
    params: &PolicyParams<T>,
    clip_eps: T,
) -> Result<Vec<T>> {
    let refs: Vec<&BufferEntry<T>> = entries.iter().collect();
    Ok(surrogate_pass(&refs, params, clip_eps)?.grad)
}

fn minibatches<'a, T>(
    buffer: &'a RolloutBuffer<T>,
    cfg: &PpoConfig,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<&'a BufferEntry<T>>> {
    let mut order: Vec<usize> = (0..buffer.entries.len()).collect();
    order.shuffle(&mut rng::stream(&[seed, epoch as u64]));
    order
        .chunks(cfg.minibatch_size.unwrap_or(usize::MAX))
        .map(|c| c.iter().map(|&i| &buffer.entries[i]).collect())
        .collect()
}

/// Runs `ppo_epochs` shuffled passes of minibatch gradient ascent on the
/// clipped surrogate. Returns the updated table and the mean weighted
/// surrogate term seen during the passes.
pub fn clipped_policy_update<T: Scalar>(
    buffer: &RolloutBuffer<T>,
    params: &PolicyParams<T>,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<(PolicyParams<T>, T)> {
    if buffer.is_empty() {
        return Err(Error::Empty("rollout buffer"));
    }
    let mut params = params.clone();
    let step = T::lit(cfg.policy_step);
    let eps = T::lit(cfg.clip_eps);
    let mut sum = T::zero();
    let mut count = 0usize;
    for epoch in 0..cfg.ppo_epochs {
        for batch in minibatches(buffer, cfg, seed, epoch) {
            let pass = surrogate_pass(&batch, &params, eps)?;
            sum = sum + pass.weighted_sum;
            count += pass.terms;
            for (x, g) in params.logits_mut().iter_mut().zip(&pass.grad) {
                *x = *x + step * *g;
            }
        }
    }
    let mean = if count > 0 {
        sum / T::lit(count as f64)
    } else {
        T::zero()
    };
    Ok((params, mean))
}

fn value_terms<T: Scalar>(
    entries: &[&BufferEntry<T>],
    values: &ValueParams<T>,
) -> Result<(T, Vec<T>)> {
    let scale = visit_scale(entries, values.len());
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); values.len()];
    let half = T::lit(0.5);
    for e in entries {
        check_filled(e, true)?;
        let tr = &e.trajectory;
        for (&obs, &target) in tr.obs_ids.iter().zip(&tr.returns) {
            let err = values.get(obs) - target;
            let c = e.weight * scale[obs];
            loss = loss + c * half * err * err;
            grad[obs] = grad[obs] + c * err;
        }
    }
    Ok((loss, grad))
}

/// `Σ w c_o ½ (V(s_t) − R_t)²`, normalized per observation like the
/// surrogate.
pub fn value_loss<T: Scalar>(entries: &[BufferEntry<T>], values: &ValueParams<T>) -> Result<T> {
    let refs: Vec<&BufferEntry<T>> = entries.iter().collect();
    Ok(value_terms(&refs, values)?.0)
}

pub fn value_gradient<T: Scalar>(
    entries: &[BufferEntry<T>],
    values: &ValueParams<T>,
) -> Result<Vec<T>> {
    let refs: Vec<&BufferEntry<T>> = entries.iter().collect();
    Ok(value_terms(&refs, values)?.1)
}

/// `ppo_epochs` shuffled passes of minibatch gradient descent on the value
/// loss.
pub fn value_update<T: Scalar>(
    buffer: &RolloutBuffer<T>,
    values: &ValueParams<T>,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<ValueParams<T>> {
    if buffer.is_empty() {
        return Err(Error::Empty("rollout buffer"));
    }
    let mut values = values.clone();
    let step = T::lit(cfg.value_step);
    for epoch in 0..cfg.ppo_epochs {
        for batch in minibatches(buffer, cfg, seed, epoch) {
            let (_, grad) = value_terms(&batch, &values)?;
            for (v, g) in values.values_mut().iter_mut().zip(&grad) {
                *v = *v - step * *g;
            }
        }
    }
    Ok(values)
}
