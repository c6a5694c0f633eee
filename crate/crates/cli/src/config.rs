use std::path::{Path, PathBuf};

use fastfit_core::benchkit::BenchConfig;
use fastfit_core::denoiser::ModelConfig;
use fastfit_core::sampler::SamplerConfig;
use fastfit_core::traindemo::TrainConfig;
use fastfit_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "FASTFIT_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Weights to load (`sample`, resumed `train-demo`).
    pub weights_in: Option<PathBuf>,
    /// Where `train-demo` writes weights; the loss curve goes beside it.
    pub weights_out: Option<PathBuf>,
    /// Bench report; the extension picks the format.
    pub report_out: Option<PathBuf>,
    /// Prefix of the `sample` outputs.
    pub sample_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub bench: BenchConfig,
    pub train: TrainConfig,
    /// Overrides the seeds of every section.
    pub seed: Option<u64>,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `FASTFIT_SEED` (if set) over `seed`, then `seed` over the
    /// section seeds.
    pub fn with_env_seed(mut self, env: Option<&str>) -> Result<Self> {
        if let Some(v) = env {
            let s = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.sampler.seed = s;
            self.bench.seed = s;
            self.train.seed = s;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate(self.model.t_max)?;
        self.train.validate(&self.model)?;
        self.bench.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_value_identical() {
        let mut c = RunConfig {
            seed: Some(9),
            ..RunConfig::default()
        };
        c.paths.report_out = Some("r.md".into());
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), c.to_json());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sead": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"widht": 8}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"width": 32}}"#).is_ok());
    }

    #[test]
    fn env_seed_wins() {
        let c = RunConfig {
            seed: Some(1),
            ..RunConfig::default()
        };
        let c = c.with_env_seed(Some("42")).unwrap();
        assert_eq!((c.sampler.seed, c.bench.seed, c.train.seed), (42, 42, 42));
        assert!(RunConfig::default().with_env_seed(Some("x")).is_err());
        assert_eq!(RunConfig::default().with_env_seed(None).unwrap().sampler.seed, 0);
    }
}
