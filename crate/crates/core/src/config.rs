//! Run configuration. The JSON form uses these field names verbatim
//! (`N`, `M`, `I` are upper-case to match the usual notation).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluators::OracleSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Feature dimension.
    pub d: usize,
    /// Number of real data points.
    #[serde(rename = "N")]
    pub n_real: usize,
    /// Periphery points per real point.
    #[serde(rename = "M")]
    pub n_periphery: usize,
    /// Perturbation pairs per periphery point.
    #[serde(rename = "I")]
    pub n_perturb: usize,
    pub sigma_nes: f64,
    pub sigma_per: f64,
    /// Weight of the pull toward the anchoring real datum.
    pub b: f64,
    pub train_iters: usize,
    pub lr: f64,
    /// Langevin step size.
    pub eps: f64,
    pub langevin_iters: usize,
    pub n_chains: usize,
    pub seed: u64,
    /// `+1` pulls periphery gradients toward their anchor, `-1` away from it.
    pub regularization_sign: i8,
    /// Lower bound on the value head when forming `grad / value`.
    pub value_floor: f64,

    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub gan: GanConfig,
    /// Evaluator selector, e.g. `plateau` or `replay:responses.jsonl`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluator: Option<String>,
    /// Synthetic oracle parameters; kind-specific defaults when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `x_0 ~ N(0, I)`.
    #[default]
    Gaussian,
    /// `x_0` drawn (with replacement) from the real dataset.
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Steps between recorded variance snapshots.
    pub thin: usize,
    pub init: InitMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            thin: 100,
            init: InitMode::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub iters: usize,
    pub lr: f64,
    pub batch: usize,
    pub pretrain_iters: usize,
    pub pretrain_lr: f64,
    pub n_samples: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            iters: 10_000,
            lr: 0.01,
            batch: 64,
            pretrain_iters: 2_000,
            pretrain_lr: 0.001,
            n_samples: 200,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 2,
            n_real: 100,
            n_periphery: 3,
            n_perturb: 20,
            sigma_nes: 1.0,
            sigma_per: 10.0,
            b: 0.05,
            train_iters: 10_000,
            lr: 0.001,
            eps: 1e-4,
            langevin_iters: 100_000,
            n_chains: 200,
            seed: 0,
            regularization_sign: 1,
            value_floor: 0.05,
            hidden: default_hidden(),
            sampler: SamplerConfig::default(),
            gan: GanConfig::default(),
            evaluator: None,
            oracle: None,
            dataset: None,
        }
    }
}

impl RunConfig {
    /// Same as the default but with `eps = 0.01`. With `eps = 1e-4` the
    /// drift term moves a chain by ~`5e-9 * |score|` per step, so 1e5 steps
    /// are dominated by the noise term.
    pub fn tuned() -> Self {
        RunConfig {
            eps: 0.01,
            ..RunConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("d", self.d),
            ("N", self.n_real),
            ("M", self.n_periphery),
            ("I", self.n_perturb),
            ("n_chains", self.n_chains),
            ("sampler.thin", self.sampler.thin),
            ("gan.batch", self.gan.batch),
            ("gan.n_samples", self.gan.n_samples),
        ] {
            if v == 0 {
                return fail(format!("{name} must be >= 1"));
            }
        }
        for (name, v) in [
            ("sigma_nes", self.sigma_nes),
            ("sigma_per", self.sigma_per),
            ("eps", self.eps),
            ("lr", self.lr),
            ("gan.lr", self.gan.lr),
            ("gan.pretrain_lr", self.gan.pretrain_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return fail(format!("b must be >= 0, got {}", self.b));
        }
        if self.regularization_sign != 1 && self.regularization_sign != -1 {
            return fail(format!(
                "regularization_sign must be +1 or -1, got {}",
                self.regularization_sign
            ));
        }
        if !(self.value_floor > 0.0 && self.value_floor < 1.0) {
            return fail(format!("value_floor must lie in (0, 1), got {}", self.value_floor));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden layer sizes must be non-empty and >= 1".into());
        }
        if let Some(oracle) = &self.oracle {
            oracle.validate(self.d)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_use_upper_case_counts() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_value(&cfg).unwrap();
        assert_eq!(json["N"], 100);
        assert_eq!(json["M"], 3);
        assert_eq!(json["I"], 20);
        assert_eq!(json["sigma_per"], 10.0);
        assert_eq!(json["eps"], 0.0001);
        assert_eq!(json["langevin_iters"], 100_000);
        assert_eq!(json["n_chains"], 200);
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::tuned();
        let back = RunConfig::from_json(&cfg.to_json_pretty()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn minimal_document_fills_extras() {
        let text = r#"{"d":2,"N":10,"M":1,"I":4,"sigma_nes":1.0,"sigma_per":2.0,"b":0.05,
            "train_iters":5,"lr":0.001,"eps":0.01,"langevin_iters":10,"n_chains":4,
            "seed":9,"regularization_sign":-1,"value_floor":0.05}"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.hidden, vec![128, 128, 128]);
        assert_eq!(cfg.gan.iters, 10_000);
        assert_eq!(cfg.regularization_sign, -1);
    }

    #[test]
    fn rejects_invalid_values() {
        let bad = [
            RunConfig { sigma_nes: 0.0, ..Default::default() },
            RunConfig { eps: -1.0, ..Default::default() },
            RunConfig { n_perturb: 0, ..Default::default() },
            RunConfig { value_floor: 1.0, ..Default::default() },
            RunConfig { regularization_sign: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        assert!(RunConfig::from_json(r#"{"d": 2, "bogus": 1}"#).is_err());
    }
}
