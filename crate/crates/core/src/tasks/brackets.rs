//! `brackets`: emit a balanced bracket string of the prompted length.
//!
//! The prompt is `L` copies of a marker token. A response that ever closes an
//! unopened bracket (or emits a non-bracket token) scores 0. Otherwise the
//! score is `min(b, L) / max(len, L)` where `b` is the longest balanced
//! prefix; this is 1 exactly for a balanced string of length `L`.
//!
//! Observations are (open depth, remaining length), plus one absorbing id for
//! prefixes that already violated the rules.

use rand::Rng;

use super::{check_prefix, Prompt, TaskId, TaskSpec, Token, Vocab};
use crate::error::{Error, Result};
use crate::rng;

pub const OPEN: Token = 0;
pub const CLOSE: Token = 1;
pub const MARKER: Token = 2;
pub const EOS: Token = 3;

/// Feature layout: length, |length − L|, opens, closes, adjacent "()" pairs,
/// maximum running depth, |final depth|.
pub const BRACKETS_FEATURES: usize = 7;

#[derive(Debug, Clone)]
pub struct Brackets {
    min_pairs: usize,
    max_pairs: usize,
}

/// Running depth walk; `None` once the prefix is invalid.
fn walk(prefix: &[Token]) -> Option<usize> {
    let mut depth = 0usize;
    for &t in prefix {
        match t {
            OPEN => depth += 1,
            CLOSE if depth > 0 => depth -= 1,
            _ => return None,
        }
    }
    Some(depth)
}

impl Brackets {
    pub fn new(min_pairs: usize, max_pairs: usize) -> Result<Self> {
        if min_pairs == 0 || min_pairs > max_pairs || max_pairs > 30 {
            return Err(Error::Config(format!(
                "brackets pair range [{min_pairs}, {max_pairs}] invalid"
            )));
        }
        Ok(Self {
            min_pairs,
            max_pairs,
        })
    }

    fn side(&self) -> usize {
        2 * self.max_pairs + 2
    }
}

impl TaskSpec for Brackets {
    fn id(&self) -> TaskId {
        TaskId::Brackets
    }

    fn vocab(&self) -> Vocab {
        Vocab::new(4, EOS)
    }

    fn num_observations(&self) -> usize {
        self.side() * self.side() + 1
    }

    fn feature_dim(&self) -> usize {
        BRACKETS_FEATURES
    }

    fn max_response_len(&self, prompt: &Prompt) -> usize {
        prompt.context.len() + 2
    }

    fn sample_prompt(&self, seed: u64) -> Prompt {
        let mut s = rng::stream(&[seed]);
        let pairs = s.random_range(self.min_pairs..=self.max_pairs);
        Prompt {
            task_id: TaskId::Brackets,
            context: vec![MARKER; 2 * pairs],
        }
    }

    fn score(&self, prompt: &Prompt, response: &[Token]) -> f64 {
        let target = prompt.context.len();
        let end = response
            .iter()
            .position(|&t| t == EOS)
            .unwrap_or(response.len());
        let body = &response[..end];
        let mut depth = 0usize;
        let mut balanced = 0usize;
        for (i, &t) in body.iter().enumerate() {
            match t {
                OPEN => depth += 1,
                CLOSE if depth > 0 => depth -= 1,
                _ => return 0.0,
            }
            if depth == 0 {
                balanced = i + 1;
            }
        }
        balanced.min(target) as f64 / body.len().max(target) as f64
    }

    fn observation(&self, prompt: &Prompt, prefix: &[Token]) -> Result<usize> {
        check_prefix(prefix, self.max_response_len(prompt))?;
        let side = self.side();
        Ok(match walk(prefix) {
            None => side * side,
            Some(depth) => {
                // remaining + 1 lies in 0..side because prefix < L + 2
                let rem = prompt.context.len() + 1 - prefix.len();
                depth.min(side - 1) * side + rem
            }
        })
    }

    fn reward_features(&self, prompt: &Prompt, response: &[Token]) -> Vec<f64> {
        let end = response
            .iter()
            .position(|&t| t == EOS)
            .unwrap_or(response.len());
        let body = &response[..end];
        let opens = body.iter().filter(|&&t| t == OPEN).count();
        let closes = body.iter().filter(|&&t| t == CLOSE).count();
        let pairs = body
            .windows(2)
            .filter(|w| w[0] == OPEN && w[1] == CLOSE)
            .count();
        let mut running = 0i64;
        let mut max_depth = 0i64;
        for &t in body {
            match t {
                OPEN => running += 1,
                CLOSE => running -= 1,
                _ => {}
            }
            max_depth = max_depth.max(running);
        }
        vec![
            body.len() as f64,
            body.len().abs_diff(prompt.context.len()) as f64,
            opens as f64,
            closes as f64,
            pairs as f64,
            max_depth as f64,
            running.unsigned_abs() as f64,
        ]
    }

    fn oracle_action(&self, prompt: &Prompt, prefix: &[Token]) -> Token {
        let Some(depth) = walk(prefix) else {
            return EOS;
        };
        let target = prompt.context.len();
        let remaining = target.saturating_sub(prefix.len());
        if depth == 0 && remaining == 0 {
            EOS
        } else if depth > 0 && depth >= remaining {
            CLOSE
        } else if depth < remaining {
            OPEN
        } else {
            EOS
        }
    }
}
