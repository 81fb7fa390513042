use std::path::Path;

use rdn_core::data::GeneratorConfig;
use rdn_core::train::TrainConfig;
use rdn_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a subcommand may read, in one JSON document. Missing sections
/// and fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub data: GeneratorConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Decoding steps, `<eos>` included.
    pub max_len: usize,
    pub length_norm: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_len: 20,
            length_norm: false,
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(CliConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.decode.beam_size == 0 {
            return Err(Error::Config("decode.beam_size must be at least 1".into()));
        }
        if self.decode.max_len == 0 {
            return Err(Error::Config("decode.max_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Single-line JSON, for the startup banner.
    pub fn summary(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
