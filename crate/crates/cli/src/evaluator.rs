//! Parsing of `--evaluator` selectors and construction of the evaluator.

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use perceptscore_core::evaluators::{replay_evaluator, Evaluator, OracleShape, OracleSpec};
use perceptscore_core::rng::{self, RngStream};
use perceptscore_core::RunConfig;
use perceptscore_rating::RemoteEvaluator;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub enum EvaluatorSpec {
    Plateau,
    Bump,
    Bimodal,
    Flat,
    Replay(PathBuf),
    Remote(String),
}

impl FromStr for EvaluatorSpec {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        if let Some(path) = s.strip_prefix("replay:") {
            return Ok(EvaluatorSpec::Replay(PathBuf::from(path)));
        }
        if let Some(url) = s.strip_prefix("remote:") {
            return Ok(EvaluatorSpec::Remote(url.to_string()));
        }
        match s {
            "plateau" => Ok(EvaluatorSpec::Plateau),
            "bump" | "gaussian_bump" => Ok(EvaluatorSpec::Bump),
            "bimodal" | "bimodal_bump" => Ok(EvaluatorSpec::Bimodal),
            "flat" => Ok(EvaluatorSpec::Flat),
            other => Err(CliError::Config(format!(
                "unknown evaluator {other:?}; expected plateau, bump, bimodal, flat, replay:PATH or remote:URL"
            ))),
        }
    }
}

impl EvaluatorSpec {
    /// `--evaluator` wins over the config's `evaluator`; plateau otherwise.
    pub fn resolve(flag: Option<&str>, cfg: &RunConfig) -> CliResult<Self> {
        match flag.or(cfg.evaluator.as_deref()) {
            Some(s) => s.parse(),
            None => Ok(EvaluatorSpec::Plateau),
        }
    }

    fn default_shape(&self, d: usize) -> Option<OracleShape> {
        match self {
            EvaluatorSpec::Plateau => Some(OracleShape::plateau(d)),
            EvaluatorSpec::Bump => Some(OracleShape::gaussian_bump(d)),
            EvaluatorSpec::Bimodal => Some(OracleShape::bimodal_bump(d)),
            EvaluatorSpec::Flat => Some(OracleShape::Flat { value: 0.5 }),
            _ => None,
        }
    }

    /// The synthetic oracle for this selector: the config's `oracle` block
    /// when its kind matches, the kind's defaults otherwise.
    pub fn oracle_spec(&self, cfg: &RunConfig) -> Option<OracleSpec> {
        let default = self.default_shape(cfg.d)?;
        match &cfg.oracle {
            Some(spec) if spec.shape.kind() == default.kind() => Some(spec.clone()),
            _ => Some(OracleSpec::noiseless(default)),
        }
    }

    pub fn build(&self, cfg: &RunConfig) -> CliResult<Box<dyn Evaluator>> {
        if let Some(spec) = self.oracle_spec(cfg) {
            spec.validate(cfg.d)?;
            return Ok(Box::new(spec.build(RngStream::new(cfg.seed, rng::NOISE))));
        }
        match self {
            EvaluatorSpec::Replay(path) => Ok(Box::new(replay_evaluator(path).map_err(|e| match e {
                perceptscore_core::Error::Io { .. } => CliError::MissingPrerequisite {
                    file: path.display().to_string(),
                    command: "estimate with a recording evaluator",
                },
                other => CliError::Evaluator(other.to_string()),
            })?)),
            EvaluatorSpec::Remote(url) => Ok(Box::new(
                RemoteEvaluator::new(url.clone()).with_poll_interval(Duration::from_secs(2)),
            )),
            _ => unreachable!("oracle selectors handled above"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_selectors() {
        assert_eq!("plateau".parse::<EvaluatorSpec>().unwrap(), EvaluatorSpec::Plateau);
        assert_eq!(
            "replay:out/r.jsonl".parse::<EvaluatorSpec>().unwrap(),
            EvaluatorSpec::Replay("out/r.jsonl".into())
        );
        assert_eq!(
            "remote:http://localhost:8080".parse::<EvaluatorSpec>().unwrap(),
            EvaluatorSpec::Remote("http://localhost:8080".into())
        );
        assert_eq!("wobble".parse::<EvaluatorSpec>().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn config_oracle_block_applies_to_matching_kind_only() {
        let mut cfg = RunConfig::default();
        let mut spec = OracleSpec::noiseless(OracleShape::plateau(2));
        spec.noise_std = 0.1;
        cfg.oracle = Some(spec.clone());
        assert_eq!(EvaluatorSpec::Plateau.oracle_spec(&cfg), Some(spec));
        assert_eq!(
            EvaluatorSpec::Bump.oracle_spec(&cfg).unwrap().shape,
            OracleShape::gaussian_bump(2)
        );
        assert_eq!(EvaluatorSpec::Remote("x".into()).oracle_spec(&cfg), None);
        cfg.evaluator = Some("bimodal".into());
        assert_eq!(EvaluatorSpec::resolve(None, &cfg).unwrap(), EvaluatorSpec::Bimodal);
        assert_eq!(EvaluatorSpec::resolve(Some("flat"), &cfg).unwrap(), EvaluatorSpec::Flat);
    }
}
