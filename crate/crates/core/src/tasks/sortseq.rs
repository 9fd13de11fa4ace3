//! `sortseq`: emit the prompt digits in ascending order.
//!
//! Score is the number of positions agreeing with the sorted target divided by
//! `max(target length, response length)`, so extra tokens cost credit and
//! only the exact answer scores 1.
//!
//! The observation is the multiset of target digits not yet due, i.e.
//! `sorted(prompt)[t..]` at step `t`. Its minimum (or eos when empty) is the
//! optimal next token, and prompts with the same digit multiset share ids.

use std::collections::HashMap;

use rand::Rng;

use super::{check_prefix, Prompt, TaskId, TaskSpec, Token, Vocab};
use crate::error::{Error, Result};
use crate::rng;

/// Feature layout: digit count, adjacent non-decreasing pairs,
/// |length − target length|, multiset overlap with the prompt, eos flag.
pub const SORTSEQ_FEATURES: usize = 5;

#[derive(Debug, Clone)]
pub struct SortSeq {
    min_len: usize,
    max_len: usize,
    digits: usize,
    multiset_ids: HashMap<Vec<u8>, usize>,
}

impl SortSeq {
    pub fn new(min_len: usize, max_len: usize, digits: usize) -> Result<Self> {
        if min_len == 0 || min_len > max_len {
            return Err(Error::Config(format!(
                "sortseq length range [{min_len}, {max_len}] is empty"
            )));
        }
        if !(2..=15).contains(&digits) {
            return Err(Error::Config(format!(
                "sortseq digits must be in 2..=15, got {digits}"
            )));
        }
        let mut multiset_ids = HashMap::new();
        let mut counts = vec![0u8; digits];
        enumerate_multisets(&mut counts, 0, max_len, &mut multiset_ids);
        let task = Self {
            min_len,
            max_len,
            digits,
            multiset_ids,
        };
        if task.num_observations() > 4096 {
            return Err(Error::Config(format!(
                "sortseq observation space {} exceeds 4096",
                task.num_observations()
            )));
        }
        Ok(task)
    }

    fn sorted_target(prompt: &Prompt) -> Vec<Token> {
        let mut t = prompt.context.clone();
        t.sort_unstable();
        t
    }

    fn multiset_id(&self, digits: &[Token]) -> usize {
        let mut counts = vec![0u8; self.digits];
        for &d in digits {
            counts[d] += 1;
        }
        self.multiset_ids[&counts]
    }
}

fn enumerate_multisets(
    counts: &mut [u8],
    pos: usize,
    budget: usize,
    out: &mut HashMap<Vec<u8>, usize>,
) {
    if pos == counts.len() {
        let next = out.len();
        out.insert(counts.to_vec(), next);
        return;
    }
    for c in 0..=budget {
        counts[pos] = c as u8;
        enumerate_multisets(counts, pos + 1, budget - c, out);
    }
    counts[pos] = 0;
}

impl TaskSpec for SortSeq {
    fn id(&self) -> TaskId {
        TaskId::SortSeq
    }

    fn vocab(&self) -> Vocab {
        Vocab::new(self.digits + 1, self.digits)
    }

    fn num_observations(&self) -> usize {
        self.multiset_ids.len()
    }

    fn feature_dim(&self) -> usize {
        SORTSEQ_FEATURES
    }

    fn max_response_len(&self, prompt: &Prompt) -> usize {
        prompt.context.len() + 2
    }

    fn sample_prompt(&self, seed: u64) -> Prompt {
        let mut s = rng::stream(&[seed]);
        let len = s.random_range(self.min_len..=self.max_len);
        let context = (0..len).map(|_| s.random_range(0..self.digits)).collect();
        Prompt {
            task_id: TaskId::SortSeq,
            context,
        }
    }

    fn score(&self, prompt: &Prompt, response: &[Token]) -> f64 {
        let eos = self.digits;
        let target = Self::sorted_target(prompt);
        let end = response
            .iter()
            .position(|&t| t == eos)
            .unwrap_or(response.len());
        let body = &response[..end];
        let hits = body.iter().zip(&target).filter(|(a, b)| a == b).count();
        hits as f64 / target.len().max(body.len()) as f64
    }

    fn observation(&self, prompt: &Prompt, prefix: &[Token]) -> Result<usize> {
        check_prefix(prefix, self.max_response_len(prompt))?;
        let target = Self::sorted_target(prompt);
        let t = prefix.len().min(target.len());
        Ok(self.multiset_id(&target[t..]))
    }

    fn reward_features(&self, prompt: &Prompt, response: &[Token]) -> Vec<f64> {
        let eos = self.digits;
        let end = response
            .iter()
            .position(|&t| t == eos)
            .unwrap_or(response.len());
        let body = &response[..end];
        let ascending = body.windows(2).filter(|w| w[0] <= w[1]).count();
        let len_gap = body.len().abs_diff(prompt.context.len());
        let mut available = vec![0usize; self.digits];
        for &d in &prompt.context {
            available[d] += 1;
        }
        let mut overlap = 0;
        for &d in body {
            if d < self.digits && available[d] > 0 {
                available[d] -= 1;
                overlap += 1;
            }
        }
        let eos_flag = if end < response.len() { 1.0 } else { 0.0 };
        vec![
            body.len() as f64,
            ascending as f64,
            len_gap as f64,
            overlap as f64,
            eos_flag,
        ]
    }

    fn oracle_action(&self, prompt: &Prompt, prefix: &[Token]) -> Token {
        let target = Self::sorted_target(prompt);
        target.get(prefix.len()).copied().unwrap_or(self.digits)
    }
}
