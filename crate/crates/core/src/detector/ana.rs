//! Per-(layer, location) running statistics and the three-part test applied
//! to every observed tensor.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::probes::Location;
use crate::tensor::Tensor;

/// Parameters of [`AnaState::ana`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnaLimits {
    /// Length of the constant-mean window.
    pub window_n: usize,
    /// Number of exactly-zero means that triggers. `None` disables the zero
    /// test (the run length is not known).
    pub zero_threshold: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyStats {
    pub mean_history: Vec<f64>,
    pub zero_count: usize,
    pub calls: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnaState {
    keys: BTreeMap<(usize, Location), KeyStats>,
}

impl AnaState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self, layer: usize, location: Location) -> Option<&KeyStats> {
        self.keys.get(&(layer, location))
    }

    /// Returns `true` when `values` look faulty:
    ///
    /// 1. the mean is NaN or infinite;
    /// 2. the mean is exactly zero and has been so at least
    ///    `zero_threshold` times for this key;
    /// 3. the last `window_n` recorded means are all bit-identical.
    ///
    /// The mean is recorded (for test 3) only when tests 1 and 2 pass.
    pub fn ana(&mut self, values: &Tensor, layer: usize, location: Location, limits: AnaLimits) -> Result<bool> {
        let mean = values.mean()?;
        let entry = self.keys.entry((layer, location)).or_default();
        entry.calls += 1;
        if !mean.is_finite() {
            return Ok(true);
        }
        if mean == 0.0 {
            entry.zero_count += 1;
            if limits.zero_threshold.is_some_and(|t| entry.zero_count >= t) {
                return Ok(true);
            }
        }
        entry.mean_history.push(mean);
        let history = &entry.mean_history;
        if history.len() >= limits.window_n {
            let window = &history[history.len() - limits.window_n..];
            let first = window[0].to_bits();
            if window.iter().all(|m| m.to_bits() == first) {
                return Ok(true);
            }
        }
        Ok(false)
    }
}
