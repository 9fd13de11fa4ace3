//! Supervised pre-training of the reference policy.
//!
//! Demonstrations roll out the task's oracle action, replacing each token by
//! a uniformly random one with probability `corruption`. Training is
//! full-batch gradient ascent on the per-demonstration log-likelihood.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PolicyParams, ReferencePolicy};
use crate::rng;
use crate::scalar::{softmax, Scalar};
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub demos: usize,
    pub corruption: f64,
    pub epochs: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            demos: 1000,
            corruption: 0.2,
            epochs: 200,
            step: 0.1,
            seed: 0,
        }
    }
}

/// (observation, token) pairs of one corrupted demonstration.
fn demonstration(task: &dyn TaskSpec, cfg: &SftConfig, index: u64) -> Vec<(usize, usize)> {
    let prompt = task.sample_prompt(rng::derive_seed(&[cfg.seed, 0, index]));
    let mut noise = rng::stream(&[cfg.seed, 1, index]);
    let vocab = task.vocab();
    let cap = task.max_response_len(&prompt);
    let mut prefix = Vec::with_capacity(cap);
    let mut steps = Vec::with_capacity(cap);
    while prefix.len() < cap {
        let obs = task
            .observation(&prompt, &prefix)
            .expect("prefix below cap");
        let mut tok = task.oracle_action(&prompt, &prefix);
        if noise.random::<f64>() < cfg.corruption {
            tok = noise.random_range(0..vocab.size);
        }
        steps.push((obs, tok));
        prefix.push(tok);
        if tok == vocab.eos {
            break;
        }
    }
    steps
}

/// Trains `π^SFT` from a zero table.
pub fn train_reference<T: Scalar>(task: &dyn TaskSpec, cfg: &SftConfig) -> ReferencePolicy<T> {
    let mut params = PolicyParams::<T>::for_task(task);
    let v = params.vocab_size();
    // visit counts per (obs, token) are all the gradient needs
    let mut counts = vec![0u32; params.num_observations() * v];
    for i in 0..cfg.demos as u64 {
        for (obs, tok) in demonstration(task, cfg, i) {
            counts[obs * v + tok] += 1;
        }
    }
    let rows: Vec<(usize, T, Vec<T>)> = (0..params.num_observations())
        .filter_map(|o| {
            let row = &counts[o * v..(o + 1) * v];
            let total: u32 = row.iter().sum();
            (total > 0).then(|| {
                (
                    o,
                    T::lit(total as f64),
                    row.iter().map(|&c| T::lit(c as f64)).collect(),
                )
            })
        })
        .collect();
    if cfg.demos == 0 {
        return ReferencePolicy::new(params);
    }
    let scale = T::lit(cfg.step / cfg.demos as f64);
    for _ in 0..cfg.epochs {
        for (obs, total, tok_counts) in &rows {
            let row = params.row_mut(*obs).expect("row in range");
            let probs = softmax(row);
            for ((x, p), c) in row.iter_mut().zip(probs).zip(tok_counts) {
                *x = *x + scale * (*c - *total * p);
            }
        }
    }
    ReferencePolicy::new(params)
}
