use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::Binning;
use crate::error::{Error, Result};
use crate::filtration::{FilterStrategy, RankWeights};
use crate::policy::SftConfig;
use crate::ppo::{PpoConfig, Variant};
use crate::reward_model::RmTrainConfig;
use crate::scalar::Scalar;
use crate::tasks::{build_task, TaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    NoisyOracle,
    TrainedBt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub source: RewardKind,
    pub sigma_max: f64,
    /// Noise fixed per (prompt, response) rather than fresh per query.
    pub frozen_noise: bool,
    /// Reward model file for `trained-bt`.
    pub model: Option<PathBuf>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            source: RewardKind::NoisyOracle,
            sigma_max: 0.5,
            frozen_noise: false,
            model: None,
        }
    }
}

/// Preference data and Bradley-Terry training for `train-rm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmConfig {
    pub prompts: usize,
    pub responses: usize,
    pub flip_rate: f64,
    pub holdout: f64,
    pub epochs: usize,
    pub step: f64,
}

impl RmConfig {
    pub fn train(&self) -> RmTrainConfig {
        RmTrainConfig {
            epochs: self.epochs,
            step: self.step,
        }
    }
}

impl Default for RmConfig {
    fn default() -> Self {
        let t = RmTrainConfig::default();
        Self {
            prompts: 500,
            responses: 5,
            flip_rate: 0.05,
            holdout: 0.2,
            epochs: t.epochs,
            step: t.step,
        }
    }
}

/// Thresholds and exponents used by the non-rank strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub tau_hi: f64,
    pub tau_lo: f64,
    pub p_keep: f64,
    pub pow_k: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            tau_hi: 0.8,
            tau_lo: -0.8,
            p_keep: 0.5,
            pow_k: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub prompts: usize,
    /// Fixed across runs so every variant is scored on the same prompts.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: 256,
            seed: 7919,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub prompts: usize,
    pub bin_width: f64,
    pub min_bin_count: usize,
    /// Policy checkpoint to sample from; the reference policy when absent.
    pub policy: Option<PathBuf>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        let b = Binning::default();
        Self {
            prompts: 2000,
            bin_width: b.bin_width,
            min_bin_count: b.min_bin_count,
            policy: None,
        }
    }
}

impl AnalyzeConfig {
    pub fn binning(&self) -> Binning {
        Binning {
            bin_width: self.bin_width,
            min_bin_count: self.min_bin_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub variants: Vec<String>,
    /// Write per-iteration checkpoints for every sub-run.
    pub checkpoints: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let variants = [
            "ppo_s",
            "ppo_m",
            "pf_bon",
            "pf_br",
            "pf_bw",
            "top",
            "top_random",
            "top_bottom",
            "pow_k",
        ];
        Self {
            variants: variants.iter().map(|s| s.to_string()).collect(),
            checkpoints: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default)]
    pub rm: RmConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub analyze: AnalyzeConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_variant() -> String {
    "pf_br".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields default")
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Checks every id and range the commands will use.
    pub fn validate(&self) -> Result<()> {
        build_task(&self.task)?;
        self.ppo.validate()?;
        if !(self.reward.sigma_max >= 0.0 && self.reward.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_max = {} must be >= 0",
                self.reward.sigma_max
            )));
        }
        if self.reward.source == RewardKind::TrainedBt && self.reward.model.is_none() {
            return Err(Error::Config(
                "reward source trained-bt needs reward.model".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.rm.holdout) {
            return Err(Error::Config(format!(
                "rm.holdout = {} must lie in [0, 1)",
                self.rm.holdout
            )));
        }
        if !(0.0..=1.0).contains(&self.rm.flip_rate) {
            return Err(Error::Config(format!(
                "rm.flip_rate = {} must lie in [0, 1]",
                self.rm.flip_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.sft.corruption) {
            return Err(Error::Config(format!(
                "sft.corruption = {} must lie in [0, 1]",
                self.sft.corruption
            )));
        }
        if self.eval.prompts == 0 {
            return Err(Error::Config("eval.prompts must be > 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !(self.analyze.bin_width > 0.0) {
            return Err(Error::Config(format!(
                "analyze.bin_width = {} must be > 0",
                self.analyze.bin_width
            )));
        }
        parse_variant::<f64>(&self.variant, self)?;
        for v in &self.compare.variants {
            parse_variant::<f64>(v, self)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Filter strategy from its config spelling: `bon`, `br`, `bw`, `top`,
/// `top-random`, `top-bottom`, `pow:<k>` or `none`.
pub fn parse_strategy<T: Scalar>(
    spec: &str,
    filter: &FilterConfig,
    n: usize,
) -> Result<FilterStrategy<T>> {
    let s = match spec {
        "bon" => FilterStrategy::RankBased(RankWeights::bon(n)?),
        "br" => FilterStrategy::RankBased(RankWeights::br(n)?),
        "bw" => FilterStrategy::RankBased(RankWeights::bw(n)?),
        "top" => FilterStrategy::Top {
            tau_hi: T::lit(filter.tau_hi),
        },
        "top-random" => FilterStrategy::TopRandom {
            tau_hi: T::lit(filter.tau_hi),
            p_keep: T::lit(filter.p_keep),
        },
        "top-bottom" => FilterStrategy::TopBottom {
            tau_hi: T::lit(filter.tau_hi),
            tau_lo: T::lit(filter.tau_lo),
        },
        "none" => FilterStrategy::NoFilter,
        other => match other.strip_prefix("pow:") {
            Some(k) => {
                let k: f64 = k
                    .parse()
                    .map_err(|_| Error::InvalidStrategy(format!("bad exponent in `{other}`")))?;
                FilterStrategy::PowK { k: T::lit(k) }
            }
            None => {
                return Err(Error::InvalidStrategy(format!(
                    "unknown strategy `{other}`"
                )))
            }
        },
    };
    s.validate(n, 1)?;
    Ok(s)
}

/// Training variant from its run name: `ppo_s`, `ppo_m`, `pf_<rank>`,
/// `top`, `top_random`, `top_bottom`, `pow_k` (exponent from the filter
/// section), `pow_<k>` or `none`.
pub fn parse_variant<T: Scalar>(name: &str, cfg: &ExperimentConfig) -> Result<Variant<T>> {
    let n = cfg.ppo.n_responses;
    let spec = match name {
        "ppo_s" => return Ok(Variant::PpoS),
        "ppo_m" => return Ok(Variant::PpoM),
        "pow_k" => format!("pow:{}", cfg.filter.pow_k),
        other => match other.strip_prefix("pf_") {
            Some(rank @ ("bon" | "br" | "bw")) => rank.to_string(),
            _ => match other.strip_prefix("pow_") {
                Some(k) => format!("pow:{k}"),
                None => other.replace('_', "-"),
            },
        },
    };
    let variant = Variant::Filtered(parse_strategy(&spec, &cfg.filter, n)?);
    variant.validate(&cfg.ppo)?;
    Ok(variant)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ExperimentConfig::from_toml(
            "variant = \"pf_bw\"\n[ppo]\niterations = 3\n[task]\nname = \"modsum\"\n",
        )
        .unwrap();
        assert_eq!(cfg.ppo.iterations, 3);
        assert_eq!(cfg.ppo.n_responses, 5);
        assert_eq!(cfg.task.name, "modsum");
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
        assert_eq!(cfg.hash(), cfg.clone().hash());
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            "[task]\nname = \"chess\"\n",
            "[ppo]\nunknown_key = 1\n",
            "variant = \"pf_best\"\n",
            "[reward]\nsource = \"trained-bt\"\n",
            "[ppo]\nn_responses = 1\n",
        ] {
            assert!(ExperimentConfig::from_toml(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn variant_names_round_trip() {
        let cfg = ExperimentConfig::default();
        for name in [
            "ppo_s",
            "ppo_m",
            "pf_bon",
            "pf_br",
            "pf_bw",
            "top",
            "top_random",
            "top_bottom",
            "pow_2",
        ] {
            assert_eq!(parse_variant::<f64>(name, &cfg).unwrap().name(), name);
        }
        assert_eq!(parse_variant::<f64>("pow_k", &cfg).unwrap().name(), "pow_2");
        assert!(parse_strategy::<f64>("pow:x", &cfg.filter, 5).is_err());
    }
}
