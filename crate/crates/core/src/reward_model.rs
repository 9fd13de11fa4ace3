//! Reward models: a Bradley-Terry trained linear scorer squashed by `tanh`,
//! preference-pair construction, and a heteroscedastic noisy oracle whose
//! noise peaks at mid scores and vanishes at 0 and 1.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rng;
use crate::scalar::{log_sigmoid, sigmoid, Scalar};
use crate::tasks::{Prompt, ResponseTokens, TaskSpec, Token};

/// `r(y|c) = tanh(w · ψ(c, y) + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel<T> {
    pub weights: Vec<T>,
    pub bias: T,
}

/// Gradient of a loss with respect to `(weights, bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmGradient<T> {
    pub weights: Vec<T>,
    pub bias: T,
}

impl<T: Scalar> RewardModel<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![T::zero(); dim],
            bias: T::zero(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Pre-squash logit `w · ψ + b`.
    pub fn logit(&self, features: &[f64]) -> Result<T> {
        if features.len() != self.weights.len() {
            return Err(Error::FeatureDim {
                expected: self.weights.len(),
                actual: features.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(features)
            .fold(self.bias, |acc, (&w, &f)| acc + w * T::lit(f)))
    }

    pub fn reward_of_features(&self, features: &[f64]) -> Result<T> {
        Ok(self.logit(features)?.tanh())
    }

    /// Reward in `[-1, 1]` of a complete response.
    pub fn reward_of(&self, task: &dyn TaskSpec, prompt: &Prompt, response: &[Token]) -> Result<T> {
        self.reward_of_features(&task.reward_features(prompt, response))
    }

    /// `P(winner ≻ loser) = σ(r(winner) − r(loser))`.
    pub fn preference_probability(&self, pair: &PreferencePair, task: &dyn TaskSpec) -> Result<T> {
        let rw = self.reward_of(task, &pair.prompt, &pair.winner)?;
        let rl = self.reward_of(task, &pair.prompt, &pair.loser)?;
        Ok(sigmoid(rw - rl))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Prompt,
    #[serde(rename = "winner_tokens")]
    pub winner: ResponseTokens,
    #[serde(rename = "loser_tokens")]
    pub loser: ResponseTokens,
}

impl PreferencePair {
    pub fn swapped(&self) -> Self {
        Self {
            prompt: self.prompt.clone(),
            winner: self.loser.clone(),
            loser: self.winner.clone(),
        }
    }
}

/// Features of both sides of a pair, computed once.
struct PairFeatures {
    winner: Vec<f64>,
    loser: Vec<f64>,
}

fn pair_features(task: &dyn TaskSpec, batch: &[PreferencePair]) -> Vec<PairFeatures> {
    batch
        .iter()
        .map(|p| PairFeatures {
            winner: task.reward_features(&p.prompt, &p.winner),
            loser: task.reward_features(&p.prompt, &p.loser),
        })
        .collect()
}

fn bt_loss_and_grad_cached<T: Scalar>(
    rm: &RewardModel<T>,
    feats: &[PairFeatures],
) -> Result<(T, RmGradient<T>)> {
    if feats.is_empty() {
        return Err(Error::Empty("preference batch"));
    }
    let n = T::lit(feats.len() as f64);
    let mut loss = T::zero();
    let mut grad = RmGradient {
        weights: vec![T::zero(); rm.dim()],
        bias: T::zero(),
    };
    for pf in feats {
        let rw = rm.reward_of_features(&pf.winner)?;
        let rl = rm.reward_of_features(&pf.loser)?;
        let delta = rw - rl;
        loss = loss - log_sigmoid(delta);
        // d/dΔ of −log σ(Δ) is −(1 − σ(Δ)) = −σ(−Δ)
        let outer = -sigmoid(-delta) / n;
        let dw = outer * (T::one() - rw * rw);
        let dl = -outer * (T::one() - rl * rl);
        for ((g, &fw), &fl) in grad.weights.iter_mut().zip(&pf.winner).zip(&pf.loser) {
            *g = *g + dw * T::lit(fw) + dl * T::lit(fl);
        }
        grad.bias = grad.bias + dw + dl;
    }
    Ok((loss / n, grad))
}

/// Mean Bradley-Terry negative log-likelihood `mean −log σ(Δr)` and its exact
/// gradient through the `tanh` squash.
pub fn bt_loss_and_grad<T: Scalar>(
    rm: &RewardModel<T>,
    batch: &[PreferencePair],
    task: &dyn TaskSpec,
) -> Result<(T, RmGradient<T>)> {
    bt_loss_and_grad_cached(rm, &pair_features(task, batch))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmTrainConfig {
    pub epochs: usize,
    pub step: f64,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            step: 0.05,
        }
    }
}

/// Full-batch gradient descent from the zero model. Returns the model and the
/// loss before each epoch followed by the final loss (`epochs + 1` values).
pub fn train_reward_model<T: Scalar>(
    pairs: &[PreferencePair],
    task: &dyn TaskSpec,
    cfg: &RmTrainConfig,
) -> Result<(RewardModel<T>, Vec<T>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("preference dataset"));
    }
    let feats = pair_features(task, pairs);
    let mut rm = RewardModel::zeros(task.feature_dim());
    let step = T::lit(cfg.step);
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for _ in 0..cfg.epochs {
        let (loss, grad) = bt_loss_and_grad_cached(&rm, &feats)?;
        history.push(loss);
        for (w, g) in rm.weights.iter_mut().zip(&grad.weights) {
            *w = *w - step * *g;
        }
        rm.bias = rm.bias - step * grad.bias;
    }
    history.push(bt_loss_and_grad_cached(&rm, &feats)?.0);
    Ok((rm, history))
}

/// Token-level Levenshtein distance with unit costs.
pub fn edit_distance(a: &[Token], b: &[Token]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Index pair `(i, j)`, `i < j`, of maximal edit distance; the
/// lexicographically smallest pair wins ties.
pub fn max_edit_distance_pair(responses: &[ResponseTokens]) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), usize)> = None;
    for i in 0..responses.len() {
        for j in i + 1..responses.len() {
            let d = edit_distance(&responses[i], &responses[j]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some(((i, j), d));
            }
        }
    }
    best.map(|(p, _)| p)
}

/// Samples `n_responses` per prompt from `policy`, keeps the max-edit-distance
/// pair and orients it by the task scorer. Equal scores drop the prompt. Each
/// kept pair is flipped with probability `flip_rate`.
pub fn build_preference_pairs<T: Scalar>(
    task: &dyn TaskSpec,
    policy: &PolicyParams<T>,
    prompts: &[Prompt],
    n_responses: usize,
    flip_rate: f64,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    if n_responses < 2 {
        return Err(Error::Config(format!(
            "need at least 2 responses per prompt, got {n_responses}"
        )));
    }
    let mut pairs = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let i = i as u64;
        let responses: Vec<ResponseTokens> = (0..n_responses as u64)
            .map(|j| {
                policy
                    .sample_response(task, prompt, rng::derive_seed(&[seed, 0, i, j]))
                    .tokens
            })
            .collect();
        let (a, b) = max_edit_distance_pair(&responses).expect("at least two responses");
        let (sa, sb) = (
            task.score(prompt, &responses[a]),
            task.score(prompt, &responses[b]),
        );
        if sa == sb {
            continue;
        }
        let (w, l) = if sa > sb { (a, b) } else { (b, a) };
        let mut pair = PreferencePair {
            prompt: prompt.clone(),
            winner: responses[w].clone(),
            loser: responses[l].clone(),
        };
        if rng::stream(&[seed, 1, i]).random::<f64>() < flip_rate {
            pair = pair.swapped();
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Synthetic reward `clamp(2s − 1 + ε, −1, 1)` with
/// `ε ~ N(0, (sigma_max · 4s(1 − s))²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyOracleConfig {
    pub sigma_max: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fix the noise per (prompt, response) instead of redrawing it on
    /// every query, like a trained scorer whose errors do not change.
    #[serde(default)]
    pub frozen: bool,
}

impl NoisyOracleConfig {
    pub fn noise_std(&self, score: f64) -> f64 {
        self.sigma_max * 4.0 * score * (1.0 - score)
    }
}

pub fn noisy_oracle_reward<R: Rng + ?Sized>(
    cfg: &NoisyOracleConfig,
    actual_score: f64,
    draw: &mut R,
) -> f64 {
    let z: f64 = draw.sample(StandardNormal);
    (2.0 * actual_score - 1.0 + cfg.noise_std(actual_score) * z).clamp(-1.0, 1.0)
}

/// Where rewards come from during RL and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardSource<T> {
    Learned(RewardModel<T>),
    NoisyOracle(NoisyOracleConfig),
}

impl<T: Scalar> RewardSource<T> {
    /// Reward of a complete response. `draw` selects the noise stream for the
    /// oracle and is ignored by learned models.
    pub fn reward(
        &self,
        task: &dyn TaskSpec,
        prompt: &Prompt,
        response: &[Token],
        draw: u64,
    ) -> Result<T> {
        match self {
            RewardSource::Learned(rm) => rm.reward_of(task, prompt, response),
            RewardSource::NoisyOracle(cfg) => {
                let score = task.score(prompt, response);
                let mut s = if cfg.frozen {
                    let mut path = Vec::with_capacity(prompt.context.len() + response.len() + 3);
                    path.push(cfg.seed);
                    path.extend(prompt.context.iter().map(|&t| t as u64));
                    path.push(u64::MAX);
                    path.extend(response.iter().map(|&t| t as u64));
                    rng::stream(&path)
                } else {
                    rng::stream(&[cfg.seed, draw])
                };
                Ok(T::lit(noisy_oracle_reward(cfg, score, &mut s)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{SortSeq, TaskId};

    fn sortseq() -> SortSeq {
        SortSeq::new(3, 6, 5).unwrap()
    }

    #[test]
    fn zero_model_and_tanh_value() {
        let task = sortseq();
        let p = task.sample_prompt(3);
        let rm = RewardModel::<f64>::zeros(5);
        assert_eq!(rm.reward_of(&task, &p, &[1, 5]).unwrap(), 0.0);
        let rm = RewardModel {
            weights: vec![0.0; 5],
            bias: 1.2f64,
        };
        assert!((rm.reward_of(&task, &p, &[5]).unwrap() - 0.833_654_607_012_155).abs() < 1e-12);
        let short = RewardModel::<f64>::zeros(4);
        assert!(matches!(
            short.reward_of(&task, &p, &[5]),
            Err(Error::FeatureDim { .. })
        ));
    }

    #[test]
    fn preference_probability_values() {
        let task = sortseq();
        let prompt = Prompt {
            task_id: TaskId::SortSeq,
            context: vec![3, 1, 2],
        };
        let pair = PreferencePair {
            prompt,
            winner: ResponseTokens(vec![1, 2, 3, 5]),
            loser: ResponseTokens(vec![5]),
        };
        let rm = RewardModel::<f64>::zeros(5);
        assert_eq!(rm.preference_probability(&pair, &task).unwrap(), 0.5);
        let rm = RewardModel::<f64> {
            weights: vec![0.3, -0.2, 0.1, 0.4, 0.05],
            bias: -0.1,
        };
        let p = rm.preference_probability(&pair, &task).unwrap();
        let q = rm.preference_probability(&pair.swapped(), &task).unwrap();
        assert!((p + q - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bt_loss_at_zero_is_ln2_and_empty_batch_errors() {
        let task = sortseq();
        let prompt = task.sample_prompt(0);
        let pair = PreferencePair {
            prompt,
            winner: vec![0, 5].into(),
            loser: vec![5].into(),
        };
        let (loss, _) = bt_loss_and_grad(&RewardModel::<f64>::zeros(5), &[pair], &task).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bt_loss_and_grad(&RewardModel::<f64>::zeros(5), &[], &task).is_err());
    }

    #[test]
    fn kitten_sitting() {
        let a: Vec<Token> = "kitten".bytes().map(usize::from).collect();
        let b: Vec<Token> = "sitting".bytes().map(usize::from).collect();
        assert_eq!(edit_distance(&a, &b), 3);
        assert_eq!(edit_distance(&a, &a), 0);
        assert_eq!(edit_distance(&[], &b), 7);
    }

    #[test]
    fn oracle_endpoints_are_exact() {
        let cfg = NoisyOracleConfig {
            sigma_max: 0.5,
            seed: 0,
            frozen: false,
        };
        let mut s = rng::stream(&[1]);
        assert_eq!(noisy_oracle_reward(&cfg, 1.0, &mut s), 1.0);
        assert_eq!(noisy_oracle_reward(&cfg, 0.0, &mut s), -1.0);
    }

    #[test]
    fn epochs_zero_returns_zero_model() {
        let task = sortseq();
        let prompt = task.sample_prompt(0);
        let pair = PreferencePair {
            prompt,
            winner: vec![0, 5].into(),
            loser: vec![5].into(),
        };
        let (rm, hist) = train_reward_model::<f64>(
            &[pair],
            &task,
            &RmTrainConfig {
                epochs: 0,
                step: 0.1,
            },
        )
        .unwrap();
        assert_eq!(rm, RewardModel::zeros(5));
        assert_eq!(hist.len(), 1);
    }
}
