//! Synthetic generation tasks with exact scorers.
//!
//! Each task supplies a vocabulary, a seeded prompt sampler, a ground-truth
//! scorer in `[0, 1]`, a discrete observation encoder for tabular policies and
//! a deliberately lossy feature map for reward models.

mod brackets;
mod modsum;
mod sortseq;

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use brackets::Brackets;
pub use modsum::ModSum;
pub use sortseq::SortSeq;

pub type Token = usize;

/// Dense token ids `0..size`; `eos` is one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
    pub eos: Token,
}

impl Vocab {
    pub fn new(size: usize, eos: Token) -> Self {
        assert!(eos < size, "eos must be a vocabulary member");
        Self { size, eos }
    }

    pub fn contains(&self, token: Token) -> bool {
        token < self.size
    }

    pub fn tokens(&self) -> std::ops::Range<Token> {
        0..self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    SortSeq,
    Brackets,
    ModSum,
}

impl TaskId {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::SortSeq => "sortseq",
            TaskId::Brackets => "brackets",
            TaskId::ModSum => "modsum",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sortseq" => Ok(TaskId::SortSeq),
            "brackets" => Ok(TaskId::Brackets),
            "modsum" => Ok(TaskId::ModSum),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }
}

/// The context `c` handed to the policy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub task_id: TaskId,
    pub context: Vec<Token>,
}

/// A generated response. By convention the final token is `eos` unless the
/// length cap was hit first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResponseTokens(pub Vec<Token>);

impl ResponseTokens {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    /// Tokens before the first `eos` (all tokens if there is none).
    pub fn body(&self, eos: Token) -> &[Token] {
        let end = self
            .0
            .iter()
            .position(|&t| t == eos)
            .unwrap_or(self.0.len());
        &self.0[..end]
    }

    pub fn ends_with_eos(&self, eos: Token) -> bool {
        self.0.last() == Some(&eos)
    }
}

impl Deref for ResponseTokens {
    type Target = [Token];

    fn deref(&self) -> &[Token] {
        &self.0
    }
}

impl From<Vec<Token>> for ResponseTokens {
    fn from(v: Vec<Token>) -> Self {
        Self(v)
    }
}

/// A response paired with its reward and its ground-truth score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredResponse<T> {
    pub prompt: Prompt,
    pub response: ResponseTokens,
    pub reward: T,
    pub actual_score: f64,
}

pub trait TaskSpec: Send + Sync {
    fn id(&self) -> TaskId;

    fn vocab(&self) -> Vocab;

    /// Number of distinct observation ids `O`.
    fn num_observations(&self) -> usize;

    /// Dimension `d` of [`TaskSpec::reward_features`].
    fn feature_dim(&self) -> usize;

    /// Maximum number of response tokens (eos included) for this prompt.
    fn max_response_len(&self, prompt: &Prompt) -> usize;

    /// Deterministic function of `seed`.
    fn sample_prompt(&self, seed: u64) -> Prompt;

    /// Ground-truth score in `[0, 1]`; malformed responses score 0.
    fn score(&self, prompt: &Prompt, response: &[Token]) -> f64;

    /// Observation id of the state `prompt ⊕ prefix`.
    fn observation(&self, prompt: &Prompt, prefix: &[Token]) -> Result<usize>;

    /// Lossy feature vector of a complete response.
    fn reward_features(&self, prompt: &Prompt, response: &[Token]) -> Vec<f64>;

    /// An optimal next token from the state `prompt ⊕ prefix`. Used to
    /// generate demonstrations and as the reference solution in tests.
    fn oracle_action(&self, prompt: &Prompt, prefix: &[Token]) -> Token;

    /// Rolls out [`TaskSpec::oracle_action`] until eos or the length cap.
    fn oracle_response(&self, prompt: &Prompt) -> ResponseTokens {
        let cap = self.max_response_len(prompt);
        let eos = self.vocab().eos;
        let mut out = Vec::with_capacity(cap);
        while out.len() < cap {
            let tok = self.oracle_action(prompt, &out);
            out.push(tok);
            if tok == eos {
                break;
            }
        }
        ResponseTokens(out)
    }
}

fn default_min_len() -> usize {
    3
}
fn default_max_len() -> usize {
    6
}
fn default_digits() -> usize {
    5
}
fn default_min_pairs() -> usize {
    1
}
fn default_max_pairs() -> usize {
    5
}
fn default_min_modulus() -> usize {
    2
}
fn default_max_modulus() -> usize {
    7
}

/// Task selection and size parameters, as they appear in the `[task]`
/// section of an experiment config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    /// sortseq: prompt length range and digit alphabet size.
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_digits")]
    pub digits: usize,
    /// brackets: target length is `2 * pairs`.
    #[serde(default = "default_min_pairs")]
    pub min_pairs: usize,
    #[serde(default = "default_max_pairs")]
    pub max_pairs: usize,
    /// modsum: modulus range.
    #[serde(default = "default_min_modulus")]
    pub min_modulus: usize,
    #[serde(default = "default_max_modulus")]
    pub max_modulus: usize,
}

impl TaskConfig {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            min_len: default_min_len(),
            max_len: default_max_len(),
            digits: default_digits(),
            min_pairs: default_min_pairs(),
            max_pairs: default_max_pairs(),
            min_modulus: default_min_modulus(),
            max_modulus: default_max_modulus(),
        }
    }
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self::named("sortseq")
    }
}

/// Instantiates the task named in `cfg`.
pub fn build_task(cfg: &TaskConfig) -> Result<Box<dyn TaskSpec>> {
    Ok(match cfg.name.parse::<TaskId>()? {
        TaskId::SortSeq => Box::new(SortSeq::new(cfg.min_len, cfg.max_len, cfg.digits)?),
        TaskId::Brackets => Box::new(Brackets::new(cfg.min_pairs, cfg.max_pairs)?),
        TaskId::ModSum => Box::new(ModSum::new(cfg.min_modulus, cfg.max_modulus)?),
    })
}

pub(crate) fn check_prefix(prefix: &[Token], cap: usize) -> Result<()> {
    if prefix.len() >= cap {
        Err(Error::PrefixTooLong {
            len: prefix.len(),
            cap,
        })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_task_is_rejected() {
        let cfg = TaskConfig::named("haiku");
        assert!(matches!(build_task(&cfg), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn body_strips_eos() {
        let r = ResponseTokens(vec![1, 2, 9]);
        assert_eq!(r.body(9), &[1, 2]);
        assert_eq!(r.body(7), &[1, 2, 9]);
    }
}
