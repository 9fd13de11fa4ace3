//! The PPO engine: KL-shaped rewards, GAE, normalization, clipped surrogate
//! updates, value regression, and the per-iteration driver used by PPO-S,
//! PPO-M and the policy-filtered variants.

mod advantage;
mod iteration;
mod update;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use advantage::{compute_gae, normalize_batch, shape_rewards, NormMode, NormalizerState};
pub use iteration::{
    evaluate, kl_to_ref, run_iteration, EvalReport, IterationMetrics, TrainState, Variant,
};
pub use update::{
    clipped_policy_update, surrogate_gradient, surrogate_objective, value_gradient, value_loss,
    value_update, BufferEntry, RolloutBuffer,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    /// KL coefficient β.
    pub beta: f64,
    /// Clip range ε.
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub policy_step: f64,
    pub value_step: f64,
    /// Responses sampled per prompt.
    pub n_responses: usize,
    /// Categorical draws per prompt for rank-based filtration.
    pub m_kept: usize,
    /// Passes over each buffer.
    pub ppo_epochs: usize,
    /// Buffer entries per gradient step; the whole buffer when absent.
    pub minibatch_size: Option<usize>,
    pub prompts_per_iter: usize,
    pub iterations: usize,
    pub normalize_rewards: bool,
    pub normalize_advantages: bool,
    /// Fit the critic on all `N` candidates instead of the filtered buffer.
    pub critic_on_all_candidates: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            clip_eps: 0.2,
            gamma: 1.0,
            gae_lambda: 0.95,
            policy_step: 0.05,
            value_step: 0.1,
            n_responses: 5,
            m_kept: 2,
            ppo_epochs: 3,
            minibatch_size: None,
            prompts_per_iter: 64,
            iterations: 50,
            normalize_rewards: true,
            normalize_advantages: true,
            critic_on_all_candidates: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.beta >= 0.0) {
            return bad(format!("beta = {} must be >= 0", self.beta));
        }
        if !(self.clip_eps > 0.0) {
            return bad(format!("clip_eps = {} must be > 0", self.clip_eps));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma = {} must lie in (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!(
                "gae_lambda = {} must lie in [0, 1]",
                self.gae_lambda
            ));
        }
        if !(self.policy_step >= 0.0 && self.value_step >= 0.0) {
            return bad("step sizes must be >= 0".into());
        }
        if self.n_responses == 0
            || self.m_kept == 0
            || self.prompts_per_iter == 0
            || self.minibatch_size == Some(0)
        {
            return bad(
                "n_responses, m_kept, prompts_per_iter and minibatch_size must be positive".into(),
            );
        }
        Ok(())
    }
}
