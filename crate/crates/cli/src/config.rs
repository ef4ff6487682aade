use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uatta_core::adapt::AdaptationConfig;
use uatta_core::diagnostics::DEFAULT_BINS;
use uatta_core::simulator::SyntheticSpec;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub bins: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig { bins: DEFAULT_BINS }
    }
}

/// The single run document. A top-level `seed` overrides the section seeds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub simulate: SyntheticSpec,
    pub adapt: AdaptationConfig,
    pub diagnose: DiagnoseConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|message| CliError::ConfigParse {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        if let Some(seed) = config.seed {
            config.set_seed(seed);
        }
        Ok(config)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.simulate.seed = seed;
        self.adapt.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn top_level_seed_reaches_every_section() {
        let c = RunConfig::parse("seed = 9\n[adapt]\nk = 3\n").unwrap();
        assert_eq!((c.simulate.seed, c.adapt.seed, c.adapt.k), (9, 9, 3));
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::parse("[simulate]\nn_identities = \"many\"\n").unwrap_err();
        assert!(err.contains("n_identities"), "{err}");
        let err = RunConfig::parse("[adapt]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.contains("learning_rat"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.set_seed(4);
        c.adapt.rounds = Some(7);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
