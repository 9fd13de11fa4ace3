use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Trajectory;
use crate::scalar::Scalar;

/// Per-step rewards `−β(log π − log π^SFT)` with the sequence reward added
/// at the final step.
pub fn shape_rewards<T: Scalar>(traj: &Trajectory<T>, beta: T) -> Result<Vec<T>> {
    let reward = traj
        .scalar_reward
        .ok_or(Error::MissingField("scalar_reward"))?;
    if traj.logprobs.len() != traj.len() || traj.logprobs.is_empty() {
        return Err(Error::MissingField("logprobs"));
    }
    if traj.ref_logprobs.len() != traj.len() {
        return Err(Error::MissingField("ref_logprobs"));
    }
    let mut shaped: Vec<T> = traj
        .logprobs
        .iter()
        .zip(&traj.ref_logprobs)
        .map(|(&lp, &rp)| -beta * (lp - rp))
        .collect();
    let last = shaped.len() - 1;
    shaped[last] = shaped[last] + reward;
    Ok(shaped)
}

/// Generalized advantage estimation with a zero terminal bootstrap.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae<T: Scalar>(
    rewards: &[T],
    values: &[T],
    gamma: T,
    lambda: T,
) -> Result<(Vec<T>, Vec<T>)> {
    if rewards.len() != values.len() {
        return Err(Error::LengthMismatch(format!(
            "{} rewards, {} values",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![T::zero(); n];
    let mut running = T::zero();
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { T::zero() };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(&a, &v)| a + v).collect();
    Ok((adv, ret))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    PerBatch,
    Running,
}

/// Running mean / variance (population) of a scalar stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NormalizerState<T> {
    pub mean: T,
    pub var: T,
    pub count: u64,
}

impl<T: Scalar> NormalizerState<T> {
    pub fn new() -> Self {
        Self {
            mean: T::zero(),
            var: T::zero(),
            count: 0,
        }
    }

    /// Chan et al. parallel merge of a batch into the running statistics.
    pub fn update(&mut self, xs: &[T]) {
        if xs.is_empty() {
            return;
        }
        let (bm, bv) = moments(xs);
        let nb = T::lit(xs.len() as f64);
        let na = T::lit(self.count as f64);
        let total = na + nb;
        let delta = bm - self.mean;
        self.mean = self.mean + delta * nb / total;
        let m2 = self.var * na + bv * nb + delta * delta * na * nb / total;
        self.var = (m2 / total).max(T::zero());
        self.count += xs.len() as u64;
    }

    /// Standardizes `xs` with the current statistics without updating them.
    pub fn apply(&self, xs: &[T]) -> Vec<T> {
        if self.count <= 1 {
            return vec![T::zero(); xs.len()];
        }
        standardize(xs, self.mean, self.var)
    }
}

fn moments<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::lit(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, var)
}

/// Guard inside the square root: `sqrt(var + 1e-16)` differs from
/// `std + 1e-8` by at most 1e-8 but keeps a second pass idempotent.
fn standardize<T: Scalar>(xs: &[T], mean: T, var: T) -> Vec<T> {
    let scale = mean.abs().max(T::one());
    if var.sqrt() <= T::lit(1e-12) * scale {
        return vec![T::zero(); xs.len()];
    }
    let denom = (var + T::lit(1e-16)).sqrt();
    xs.iter().map(|&x| (x - mean) / denom).collect()
}

/// `(x − mean) / std` (guarded by 1e-8) using batch statistics or the running
/// statistics after merging the batch. Degenerate variance and single-sample
/// inputs give zeros.
pub fn normalize_batch<T: Scalar>(
    xs: &[T],
    state: &mut NormalizerState<T>,
    mode: NormMode,
) -> Result<Vec<T>> {
    if xs.is_empty() {
        return Err(Error::Empty("normalization batch"));
    }
    match mode {
        NormMode::PerBatch => {
            if xs.len() == 1 {
                return Ok(vec![T::zero()]);
            }
            let (m, v) = moments(xs);
            Ok(standardize(xs, m, v))
        }
        NormMode::Running => {
            state.update(xs);
            Ok(state.apply(xs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_batch_examples() {
        let mut s = NormalizerState::<f64>::new();
        let out = normalize_batch(&[1.0, 2.0, 3.0], &mut s, NormMode::PerBatch).unwrap();
        assert!(
            (out[0] + 1.2247).abs() < 1e-3
                && out[1].abs() < 1e-12
                && (out[2] - 1.2247).abs() < 1e-3
        );
        let c = normalize_batch(&[0.1, 0.1, 0.1], &mut s, NormMode::PerBatch).unwrap();
        assert_eq!(c, vec![0.0; 3]);
        assert_eq!(
            normalize_batch(&[4.0], &mut s, NormMode::PerBatch).unwrap(),
            vec![0.0]
        );
        let again = normalize_batch(&out, &mut s, NormMode::PerBatch).unwrap();
        for (a, b) in out.iter().zip(&again) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn running_matches_pooled_moments() {
        let mut s = NormalizerState::<f64>::new();
        s.update(&[1.0, 2.0]);
        s.update(&[3.0, 4.0, 5.0]);
        assert_eq!(s.count, 5);
        assert!((s.mean - 3.0).abs() < 1e-12);
        assert!((s.var - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gae_zero_case_and_mismatch() {
        let (a, r) = compute_gae(&[0.0f64; 3], &[0.0; 3], 1.0, 0.95).unwrap();
        assert_eq!(a, vec![0.0; 3]);
        assert_eq!(r, vec![0.0; 3]);
        assert!(compute_gae(&[0.0f64; 3], &[0.0; 2], 1.0, 0.95).is_err());
    }
}
