//! Synthetic batch cost model.
//!
//! Each module's call costs `base + per_item * batch_size` seconds per unit
//! of work: once per call for the frontend and encoder, once per decoder
//! step for the decoder, and once per generated mel frame for the vocoder.
//! Engines realize the cost by holding the module until
//! `module_start + cost`, so measured latencies follow the batch economics
//! of an accelerator even though the stand-in arithmetic is nearly free.

use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::domain::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineCost {
    pub base_seconds: f64,
    pub per_item_seconds: f64,
}

impl AffineCost {
    pub const ZERO: AffineCost = AffineCost {
        base_seconds: 0.0,
        per_item_seconds: 0.0,
    };

    pub fn new(base_seconds: f64, per_item_seconds: f64) -> Self {
        Self {
            base_seconds,
            per_item_seconds,
        }
    }

    pub fn cost(&self, batch: usize) -> f64 {
        if batch == 0 {
            return 0.0;
        }
        self.base_seconds + self.per_item_seconds * batch as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub frontend: AffineCost,
    pub encoder: AffineCost,
    /// Charged per decoder step.
    pub decoder: AffineCost,
    /// Charged per generated mel frame.
    pub vocoder: AffineCost,
}

impl Default for CostModel {
    /// Desk-scale calibration: a few in-flight requests give 10 to 20 ms
    /// iterations at the default chunk size.
    fn default() -> Self {
        Self {
            frontend: AffineCost::new(1.0e-3, 0.1e-3),
            encoder: AffineCost::new(0.5e-3, 0.05e-3),
            decoder: AffineCost::new(0.15e-3, 0.03e-3),
            vocoder: AffineCost::new(0.04e-3, 0.01e-3),
        }
    }
}

impl CostModel {
    /// No synthetic cost; modules run as fast as the host allows.
    pub fn zero() -> Self {
        Self {
            frontend: AffineCost::ZERO,
            encoder: AffineCost::ZERO,
            decoder: AffineCost::ZERO,
            vocoder: AffineCost::ZERO,
        }
    }

    /// Every iteration that decodes a full chunk takes `step_seconds`,
    /// independent of batch size.
    pub fn constant_step(step_seconds: f64, chunk_frames: usize) -> Self {
        Self {
            decoder: AffineCost::new(step_seconds / chunk_frames as f64, 0.0),
            ..Self::zero()
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::zero()
    }

    pub fn frontend_cost(&self, batch: usize) -> f64 {
        self.frontend.cost(batch)
    }

    pub fn encoder_cost(&self, batch: usize) -> f64 {
        self.encoder.cost(batch)
    }

    pub fn decoder_cost(&self, batch: usize, steps: usize) -> f64 {
        self.decoder.cost(batch) * steps as f64
    }

    pub fn vocoder_cost(&self, batch: usize, frames: usize) -> f64 {
        self.vocoder.cost(batch) * frames as f64
    }

    pub fn validate(self) -> Result<Self, ConfigError> {
        for (name, c) in [
            ("frontend", self.frontend),
            ("encoder", self.encoder),
            ("decoder", self.decoder),
            ("vocoder", self.vocoder),
        ] {
            if !(c.base_seconds >= 0.0 && c.per_item_seconds >= 0.0) {
                return Err(ConfigError::InvalidValue {
                    line: 0,
                    key: format!("cost.{name}"),
                    value: format!("{} + {}·B", c.base_seconds, c.per_item_seconds),
                });
            }
        }
        Ok(self)
    }

    /// Applies a `cost.<module>.base_ms` / `cost.<module>.per_item_ms` key.
    /// Returns `Ok(false)` for keys outside the `cost.` namespace.
    pub fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<bool, ConfigError> {
        let Some(rest) = key.strip_prefix("cost.") else {
            return Ok(false);
        };
        let unknown = || ConfigError::UnknownKey {
            line,
            key: key.to_string(),
        };
        let (module, field) = rest.split_once('.').ok_or_else(unknown)?;
        let target = match module {
            "frontend" => &mut self.frontend,
            "encoder" => &mut self.encoder,
            "decoder" => &mut self.decoder,
            "vocoder" => &mut self.vocoder,
            _ => return Err(unknown()),
        };
        let ms: f64 = value.parse().map_err(|_| ConfigError::InvalidValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
        })?;
        match field {
            "base_ms" => target.base_seconds = ms / 1000.0,
            "per_item_ms" => target.per_item_seconds = ms / 1000.0,
            _ => return Err(unknown()),
        }
        Ok(true)
    }
}

/// Blocks until `deadline`. Sleeps for the bulk of the wait and yields for
/// the last stretch, so other threads keep the CPU.
pub fn wait_until(deadline: Instant) {
    const SLACK: Duration = Duration::from_micros(200);
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let remaining = deadline - now;
        if remaining > SLACK {
            thread::sleep(remaining - SLACK);
        } else {
            thread::yield_now();
        }
    }
}

/// Holds a module until its charged cost has elapsed since `start`.
pub fn charge(start: Instant, seconds: f64) {
    if seconds > 0.0 {
        wait_until(start + Duration::from_secs_f64(seconds));
    }
}
