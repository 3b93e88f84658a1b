//! Guidance and model configuration from a key = value file plus `--set`
//! overrides. Model keys carry a `model.` prefix.

use std::path::Path;

use motionguide::config::parse_kv;
use motionguide::guidance::GuidanceConfig;
use motionguide::model::ToyModelConfig;
use motionguide::Error;
use serde::Serialize;

use crate::failure::{CliResult, Failure, EXIT_PARSE};
use crate::manifest::InputDigest;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub guidance: GuidanceConfig,
    pub model: ToyModelConfig,
}

impl Settings {
    fn set(&mut self, key: &str, value: &str) -> motionguide::Result<()> {
        match key.strip_prefix("model.") {
            Some(model_key) => self.model.set(model_key, value),
            None => self.guidance.set(key, value),
        }
    }

    /// Defaults, then the config file, then overrides; validated at the end.
    pub fn load(config: Option<&Path>, overrides: &[String], inputs: &mut Vec<InputDigest>) -> CliResult<Self> {
        let mut s = Self {
            guidance: GuidanceConfig::default(),
            model: ToyModelConfig::default(),
        };
        if let Some(path) = config {
            let text = crate::read_input(path, inputs)?;
            for (line, key, value) in parse_kv(&text)? {
                s.set(&key, &value).map_err(|e| {
                    Failure::from(Error::Parse {
                        line,
                        msg: format!("{}: {e}", path.display()),
                    })
                })?;
            }
        }
        for kv in overrides {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Failure::new(EXIT_PARSE, "input", format!("--set expects KEY=VALUE, got {kv:?}")))?;
            s.set(key.trim(), value.trim())?;
        }
        s.guidance.validate()?;
        s.model.validate()?;
        Ok(s)
    }
}
