//! Tabular softmax policy, tabular value function and trajectories.

mod sft;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{argmax, log_softmax, softmax, Scalar};
use crate::tasks::{Prompt, ResponseTokens, TaskSpec, Token};

pub use sft::{train_reference, SftConfig};

/// Logit table `[O × V]`, row-major by observation id.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T> {
    num_obs: usize,
    vocab: usize,
    logits: Vec<T>,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(num_obs: usize, vocab: usize) -> Self {
        Self {
            num_obs,
            vocab,
            logits: vec![T::zero(); num_obs * vocab],
        }
    }

    /// Zero table shaped for `task`.
    pub fn for_task(task: &dyn TaskSpec) -> Self {
        Self::zeros(task.num_observations(), task.vocab().size)
    }

    pub fn from_logits(num_obs: usize, vocab: usize, logits: Vec<T>) -> Result<Self> {
        if logits.len() != num_obs * vocab {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for a {num_obs}x{vocab} table",
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite logit".into()));
        }
        Ok(Self {
            num_obs,
            vocab,
            logits,
        })
    }

    pub fn num_observations(&self) -> usize {
        self.num_obs
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [T] {
        &mut self.logits
    }

    pub fn row(&self, obs: usize) -> Result<&[T]> {
        if obs >= self.num_obs {
            return Err(Error::ObservationOutOfRange {
                obs,
                rows: self.num_obs,
            });
        }
        Ok(&self.logits[obs * self.vocab..(obs + 1) * self.vocab])
    }

    pub fn row_mut(&mut self, obs: usize) -> Result<&mut [T]> {
        if obs >= self.num_obs {
            return Err(Error::ObservationOutOfRange {
                obs,
                rows: self.num_obs,
            });
        }
        Ok(&mut self.logits[obs * self.vocab..(obs + 1) * self.vocab])
    }

    /// `π(·|obs)`: softmax of the logit row.
    pub fn action_distribution(&self, obs: usize) -> Result<Vec<T>> {
        Ok(softmax(self.row(obs)?))
    }

    pub fn log_probs(&self, obs: usize) -> Result<Vec<T>> {
        Ok(log_softmax(self.row(obs)?))
    }

    /// Gradient of `log π(token|obs)` with respect to the `obs` row:
    /// `e_token − π(·|obs)`. All other rows have zero gradient.
    pub fn grad_logprob(&self, obs: usize, token: Token) -> Result<Vec<T>> {
        if token >= self.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.vocab,
            });
        }
        let mut g: Vec<T> = self
            .action_distribution(obs)?
            .into_iter()
            .map(|p| -p)
            .collect();
        g[token] = g[token] + T::one();
        Ok(g)
    }

    fn check_task(&self, task: &dyn TaskSpec) {
        assert_eq!(
            (self.num_obs, self.vocab),
            (task.num_observations(), task.vocab().size),
            "policy table shape does not match task"
        );
    }

    /// Samples `y ~ π(·|prompt)` from the stream seeded by `seed`.
    pub fn sample_response(
        &self,
        task: &dyn TaskSpec,
        prompt: &Prompt,
        seed: u64,
    ) -> Trajectory<T> {
        self.check_task(task);
        let mut draws = rng::stream(&[seed]);
        let eos = task.vocab().eos;
        let cap = task.max_response_len(prompt);
        let mut tokens = Vec::with_capacity(cap);
        let mut obs_ids = Vec::with_capacity(cap);
        let mut logprobs = Vec::with_capacity(cap);
        while tokens.len() < cap {
            let obs = task.observation(prompt, &tokens).expect("prefix below cap");
            let row = &self.logits[obs * self.vocab..(obs + 1) * self.vocab];
            let probs = softmax(row);
            let u: f64 = draws.random();
            let mut acc = 0.0;
            let mut tok = self.vocab - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p.as_f64();
                if u < acc {
                    tok = i;
                    break;
                }
            }
            obs_ids.push(obs);
            logprobs.push(log_softmax(row)[tok]);
            tokens.push(tok);
            if tok == eos {
                break;
            }
        }
        Trajectory::new(prompt.clone(), ResponseTokens(tokens), obs_ids, logprobs)
    }

    /// Argmax decoding; ties go to the lowest token id.
    pub fn greedy_decode(&self, task: &dyn TaskSpec, prompt: &Prompt) -> ResponseTokens {
        self.check_task(task);
        let eos = task.vocab().eos;
        let cap = task.max_response_len(prompt);
        let mut tokens = Vec::with_capacity(cap);
        while tokens.len() < cap {
            let obs = task.observation(prompt, &tokens).expect("prefix below cap");
            let tok = argmax(&self.logits[obs * self.vocab..(obs + 1) * self.vocab]);
            tokens.push(tok);
            if tok == eos {
                break;
            }
        }
        ResponseTokens(tokens)
    }

    /// Per-step `log π(y_t | prompt ⊕ y_{<t})`.
    pub fn logprob_response(
        &self,
        task: &dyn TaskSpec,
        prompt: &Prompt,
        response: &[Token],
    ) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(response.len());
        for (t, &tok) in response.iter().enumerate() {
            if tok >= self.vocab {
                return Err(Error::TokenOutOfRange {
                    token: tok,
                    vocab: self.vocab,
                });
            }
            let obs = task.observation(prompt, &response[..t])?;
            out.push(log_softmax(self.row(obs)?)[tok]);
        }
        Ok(out)
    }
}

/// The frozen reference policy `π^SFT`. Exposes read access only.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy<T>(PolicyParams<T>);

impl<T: Scalar> ReferencePolicy<T> {
    pub fn new(params: PolicyParams<T>) -> Self {
        Self(params)
    }

    pub fn params(&self) -> &PolicyParams<T> {
        &self.0
    }
}

/// Tabular state values `V(obs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueParams<T> {
    values: Vec<T>,
}

impl<T: Scalar> ValueParams<T> {
    pub fn zeros(num_obs: usize) -> Self {
        Self {
            values: vec![T::zero(); num_obs],
        }
    }

    pub fn from_values(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite value".into()));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, obs: usize) -> T {
        self.values[obs]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
}

/// One sampled response with its per-step bookkeeping. Per-step vectors other
/// than `obs_ids` and `logprobs` stay empty until the PPO engine fills them.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub prompt: Prompt,
    pub tokens: ResponseTokens,
    pub obs_ids: Vec<usize>,
    pub logprobs: Vec<T>,
    pub ref_logprobs: Vec<T>,
    pub scalar_reward: Option<T>,
    pub shaped_rewards: Vec<T>,
    pub values: Vec<T>,
    pub advantages: Vec<T>,
    pub returns: Vec<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(
        prompt: Prompt,
        tokens: ResponseTokens,
        obs_ids: Vec<usize>,
        logprobs: Vec<T>,
    ) -> Self {
        Self {
            prompt,
            tokens,
            obs_ids,
            logprobs,
            ref_logprobs: Vec::new(),
            scalar_reward: None,
            shaped_rewards: Vec::new(),
            values: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
