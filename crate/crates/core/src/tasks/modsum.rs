//! `modsum`: answer `(a + b) mod m` for a prompt `(a, b, m)`.
//!
//! The answer is read from the first response token; later tokens are
//! ignored. Score is binary.

use rand::Rng;

use super::{check_prefix, Prompt, TaskId, TaskSpec, Token, Vocab};
use crate::error::{Error, Result};
use crate::rng;

/// Feature layout: body length, first token is a residue of `m`,
/// first token equals `a`, first token equals `b`, eos right after one token.
pub const MODSUM_FEATURES: usize = 5;

#[derive(Debug, Clone)]
pub struct ModSum {
    min_modulus: usize,
    max_modulus: usize,
}

impl ModSum {
    pub fn new(min_modulus: usize, max_modulus: usize) -> Result<Self> {
        if min_modulus == 0 || min_modulus > max_modulus || max_modulus > 14 {
            return Err(Error::Config(format!(
                "modsum modulus range [{min_modulus}, {max_modulus}] invalid"
            )));
        }
        Ok(Self {
            min_modulus,
            max_modulus,
        })
    }

    fn radix(&self) -> usize {
        self.max_modulus + 1
    }

    pub fn answer(prompt: &Prompt) -> Token {
        let (a, b, m) = (prompt.context[0], prompt.context[1], prompt.context[2]);
        (a + b) % m
    }
}

impl TaskSpec for ModSum {
    fn id(&self) -> TaskId {
        TaskId::ModSum
    }

    fn vocab(&self) -> Vocab {
        Vocab::new(self.max_modulus + 2, self.max_modulus + 1)
    }

    fn num_observations(&self) -> usize {
        self.radix().pow(3) + 1
    }

    fn feature_dim(&self) -> usize {
        MODSUM_FEATURES
    }

    fn max_response_len(&self, _prompt: &Prompt) -> usize {
        3
    }

    fn sample_prompt(&self, seed: u64) -> Prompt {
        let mut s = rng::stream(&[seed]);
        let m = s.random_range(self.min_modulus..=self.max_modulus);
        let a = s.random_range(0..m);
        let b = s.random_range(0..m);
        Prompt {
            task_id: TaskId::ModSum,
            context: vec![a, b, m],
        }
    }

    fn score(&self, prompt: &Prompt, response: &[Token]) -> f64 {
        match response.first() {
            Some(&t) if t == Self::answer(prompt) => 1.0,
            _ => 0.0,
        }
    }

    fn observation(&self, prompt: &Prompt, prefix: &[Token]) -> Result<usize> {
        check_prefix(prefix, self.max_response_len(prompt))?;
        if prefix.is_empty() {
            let r = self.radix();
            let (a, b, m) = (prompt.context[0], prompt.context[1], prompt.context[2]);
            Ok((a * r + b) * r + m)
        } else {
            Ok(self.radix().pow(3))
        }
    }

    fn reward_features(&self, prompt: &Prompt, response: &[Token]) -> Vec<f64> {
        let eos = self.max_modulus + 1;
        let end = response
            .iter()
            .position(|&t| t == eos)
            .unwrap_or(response.len());
        let (a, b, m) = (prompt.context[0], prompt.context[1], prompt.context[2]);
        let first = response.first().copied().filter(|&t| t != eos);
        let flag = |c: bool| if c { 1.0 } else { 0.0 };
        vec![
            end as f64,
            flag(first.is_some_and(|t| t < m)),
            flag(first == Some(a)),
            flag(first == Some(b)),
            flag(end == 1 && response.len() == 2),
        ]
    }

    fn oracle_action(&self, prompt: &Prompt, prefix: &[Token]) -> Token {
        if prefix.is_empty() {
            Self::answer(prompt)
        } else {
            self.max_modulus + 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_42_prompt() {
        let t = ModSum::new(2, 7).unwrap();
        let p = t.sample_prompt(42);
        let (a, b, m) = (p.context[0], p.context[1], p.context[2]);
        assert!(a < m && b < m && m <= 7);
    }

    #[test]
    fn binary_score_reads_first_token() {
        let t = ModSum::new(2, 7).unwrap();
        let p = Prompt {
            task_id: TaskId::ModSum,
            context: vec![4, 5, 6],
        };
        assert_eq!(t.score(&p, &[3, 8]), 1.0);
        assert_eq!(t.score(&p, &[2, 8]), 0.0);
        assert_eq!(t.score(&p, &[8]), 0.0);
        assert_eq!(t.score(&p, &[3, 3, 3]), 1.0);
    }
}
