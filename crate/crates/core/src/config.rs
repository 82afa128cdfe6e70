//! Runtime settings loaded from a `key = value` file.
//!
//! Pipeline keys (`chunk_frames`, `overlap_frames`, ...) and cost keys
//! (`cost.decoder.base_ms`, ...) sit next to the engine keys below. Unknown
//! keys are errors.

use std::path::Path;
use std::time::Duration;

use crate::baseline::DEFAULT_MAX_BATCH;
use crate::cost::CostModel;
use crate::domain::{parse_key_values, ConfigError, PipelineConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub pipeline: PipelineConfig,
    pub cost: CostModel,
    /// Idle wait of the engine loops.
    pub poll_interval: Duration,
    /// Round size cap of the baseline.
    pub max_batch: usize,
    /// Virtual clients used by the load driver.
    pub clients: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            cost: CostModel::default(),
            poll_interval: Duration::from_millis(1),
            max_batch: DEFAULT_MAX_BATCH,
            clients: 8,
        }
    }
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut s = Self::default();
        for (line, key, value) in parse_key_values(text)? {
            if s.pipeline.apply(&key, &value, line)? || s.cost.apply(&key, &value, line)? {
                continue;
            }
            let bad = || ConfigError::InvalidValue {
                line,
                key: key.clone(),
                value: value.clone(),
            };
            match key.as_str() {
                "poll_interval_ms" => {
                    let ms: f64 = value.parse().map_err(|_| bad())?;
                    if !(ms > 0.0 && ms.is_finite()) {
                        return Err(bad());
                    }
                    s.poll_interval = Duration::from_secs_f64(ms / 1000.0);
                }
                "max_batch" => {
                    s.max_batch = value.parse().map_err(|_| bad())?;
                    if s.max_batch == 0 {
                        return Err(bad());
                    }
                }
                "clients" => {
                    s.clients = value.parse().map_err(|_| bad())?;
                    if s.clients == 0 {
                        return Err(bad());
                    }
                }
                _ => return Err(ConfigError::UnknownKey { line, key }),
            }
        }
        s.pipeline = s.pipeline.validate()?;
        s.cost = s.cost.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
