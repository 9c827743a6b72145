//! The per-batch fault localization procedure.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::probes::{BatchSnapshot, Location, Observer, TrainPlan};
use crate::tensor::Tensor;

use super::ana::{AnaLimits, AnaState};
use super::verdict::{Verdict, VerdictCode};

/// Which tensor the EBDW check analyzes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DeltaSource {
    /// The gradient the layer propagates upstream.
    #[default]
    PropagatedGradient,
    /// The raw kernel and bias gradients.
    ParameterGradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub window_n: usize,
    /// Fraction of the planned iterations after which chronic zero means trigger.
    pub zero_threshold_fraction: f64,
    /// Planned iterations (epochs x batches per epoch). Filled in from the
    /// training plan when left unset.
    pub total_iterations: Option<usize>,
    pub stagnation_steps: usize,
    pub stagnation_tolerance: f64,
    pub eaf_zero_consecutive: usize,
    pub delta_source: DeltaSource,
    pub disabled: BTreeSet<VerdictCode>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window_n: 50,
            zero_threshold_fraction: 0.25,
            total_iterations: None,
            stagnation_steps: 50,
            stagnation_tolerance: 1e-4,
            eaf_zero_consecutive: 1,
            delta_source: DeltaSource::PropagatedGradient,
            disabled: BTreeSet::new(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_n < 2 {
            return Err(Error::Config(format!("window_n must be >= 2, got {}", self.window_n)));
        }
        if self.stagnation_steps < 1 {
            return Err(Error::Config("stagnation lookback must be >= 1".into()));
        }
        if !(self.zero_threshold_fraction > 0.0 && self.zero_threshold_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "zero threshold fraction {} outside (0, 1]",
                self.zero_threshold_fraction
            )));
        }
        if self.eaf_zero_consecutive < 1 {
            return Err(Error::Config("eaf_zero_consecutive must be >= 1".into()));
        }
        if self.stagnation_tolerance.is_nan() || self.stagnation_tolerance < 0.0 {
            return Err(Error::Config("stagnation tolerance must be >= 0".into()));
        }
        Ok(())
    }

    pub fn enabled(&self, code: VerdictCode) -> bool {
        !self.disabled.contains(&code)
    }

    /// `ceil(fraction * total_iterations)`, at least 1.
    pub fn zero_threshold(&self) -> Option<usize> {
        self.total_iterations
            .map(|total| ((self.zero_threshold_fraction * total as f64).ceil() as usize).max(1))
    }

    fn limits(&self) -> AnaLimits {
        AnaLimits {
            window_n: self.window_n,
            zero_threshold: self.zero_threshold(),
        }
    }
}

/// Slope over the last `steps` entries: `(m[t] - m[t - steps]) / steps`.
pub fn slope(history: &[f64], steps: usize) -> Option<f64> {
    if history.len() <= steps {
        return None;
    }
    let t = history.len() - 1;
    Some((history[t] - history[t - steps]) / steps as f64)
}

/// Fault localization monitor. Checks every batch snapshot in a fixed order
/// and reports the first failing check.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    ana: AnaState,
    loss_history: Vec<f64>,
    accuracy_history: Vec<f64>,
    zero_accuracy_run: usize,
    started: Instant,
    last_batch: Option<(usize, usize, usize)>,
    fired: bool,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            ana: AnaState::new(),
            loss_history: Vec::new(),
            accuracy_history: Vec::new(),
            zero_accuracy_run: 0,
            started: Instant::now(),
            last_batch: None,
            fired: false,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn ana_state(&self) -> &AnaState {
        &self.ana
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn accuracy_history(&self) -> &[f64] {
        &self.accuracy_history
    }

    fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn ana(&mut self, values: &Tensor, layer: usize, location: Location) -> Result<bool> {
        let limits = self.config.limits();
        self.ana.ana(values, layer, location, limits)
    }

    /// Runs all checks for one batch; returns the first failure.
    ///
    /// Order: forward layers (FW then AF, input to output), loss, accuracy,
    /// stagnation, backward layers (BW then WT, output to input).
    pub fn check_batch(&mut self, snap: &BatchSnapshot) -> Result<Option<Verdict>> {
        if self.fired {
            return Err(Error::Protocol("detector already reported a fault".into()));
        }
        if snap.forward.is_empty() {
            return Err(Error::Protocol(format!(
                "malformed snapshot at iteration {}: no forward records",
                snap.global_iteration
            )));
        }
        self.last_batch = Some((snap.epoch, snap.batch, snap.global_iteration));
        let verdict = self.run_checks(snap)?;
        self.fired = verdict.is_some();
        Ok(verdict)
    }

    fn run_checks(&mut self, snap: &BatchSnapshot) -> Result<Option<Verdict>> {
        let cfg = self.config.clone();
        let fault = |this: &Self, code: VerdictCode, layer: Option<usize>, detail: String| {
            let message = match layer {
                Some(l) => format!("{} in layer {l}: {detail}", code.description()),
                None => format!("{}: {detail}", code.description()),
            };
            Some(Verdict::at(code, layer, snap, this.elapsed(), message))
        };

        for rec in &snap.forward {
            let layer = rec.user_index;
            if cfg.enabled(VerdictCode::EBA) && self.ana(&rec.pre_activation, layer, Location::FW)? {
                return Ok(fault(self, VerdictCode::EBA, Some(layer), self.describe(layer, Location::FW, &rec.pre_activation)));
            }
            if cfg.enabled(VerdictCode::EAA) && self.ana(&rec.post_activation, layer, Location::AF)? {
                return Ok(fault(self, VerdictCode::EAA, Some(layer), self.describe(layer, Location::AF, &rec.post_activation)));
            }
        }

        if cfg.enabled(VerdictCode::ELF) && !snap.loss.is_finite() {
            return Ok(fault(self, VerdictCode::ELF, None, format!("loss is {}", snap.loss)));
        }

        if let Some(acc) = snap.accuracy {
            if acc == 0.0 {
                self.zero_accuracy_run += 1;
            } else {
                self.zero_accuracy_run = 0;
            }
            if cfg.enabled(VerdictCode::EAF) {
                if !acc.is_finite() {
                    return Ok(fault(self, VerdictCode::EAF, None, format!("accuracy is {acc}")));
                }
                if self.zero_accuracy_run >= cfg.eaf_zero_consecutive {
                    return Ok(fault(
                        self,
                        VerdictCode::EAF,
                        None,
                        format!("accuracy is 0 for {} consecutive batch(es)", self.zero_accuracy_run),
                    ));
                }
            }
        }

        self.loss_history.push(snap.loss);
        if let Some(acc) = snap.accuracy {
            self.accuracy_history.push(acc);
        }
        if cfg.enabled(VerdictCode::MDL) {
            if let Some(detail) = self.stagnation() {
                return Ok(fault(self, VerdictCode::MDL, None, detail));
            }
        }

        for rec in &snap.backward {
            let layer = rec.user_index;
            if cfg.enabled(VerdictCode::EBDW) {
                let delta = match cfg.delta_source {
                    DeltaSource::PropagatedGradient => Some(&rec.propagated_gradient),
                    DeltaSource::ParameterGradient => rec.has_params().then_some(&rec.delta_params_flat),
                };
                if let Some(delta) = delta {
                    if self.ana(delta, layer, Location::BW)? {
                        return Ok(fault(self, VerdictCode::EBDW, Some(layer), self.describe(layer, Location::BW, delta)));
                    }
                }
            }
            if cfg.enabled(VerdictCode::EBW)
                && rec.has_params()
                && self.ana(&rec.updated_params_flat, layer, Location::WT)?
            {
                return Ok(fault(
                    self,
                    VerdictCode::EBW,
                    Some(layer),
                    self.describe(layer, Location::WT, &rec.updated_params_flat),
                ));
            }
        }
        Ok(None)
    }

    fn stagnation(&self) -> Option<String> {
        let steps = self.config.stagnation_steps;
        let tol = self.config.stagnation_tolerance;
        let loss_slope = slope(&self.loss_history, steps)?;
        // A NaN slope never counts as stagnation.
        if loss_slope.is_nan() || loss_slope < -tol {
            return None;
        }
        if self.accuracy_history.is_empty() {
            return Some(format!("loss slope {loss_slope:.3e} over {steps} steps is not decreasing"));
        }
        let acc_slope = slope(&self.accuracy_history, steps)?;
        (acc_slope <= tol).then(|| {
            format!(
                "loss slope {loss_slope:.3e} not decreasing and accuracy slope {acc_slope:.3e} not increasing over {steps} steps"
            )
        })
    }

    fn describe(&self, layer: usize, location: Location, values: &Tensor) -> String {
        let mean = values.mean().unwrap_or(f64::NAN);
        if !mean.is_finite() {
            return format!("mean of {location:?} values is {mean}");
        }
        let stats = self.ana.stats(layer, location);
        let zeros = stats.map_or(0, |s| s.zero_count);
        if mean == 0.0 && self.config.zero_threshold().is_some_and(|t| zeros >= t) {
            return format!("mean of {location:?} values was exactly zero in {zeros} iterations");
        }
        format!(
            "mean of {location:?} values ({mean:e}) unchanged for {} iterations",
            self.config.window_n
        )
    }

    /// Terminal verdict once training finished without a fault.
    pub fn finish(&mut self) -> Result<Verdict> {
        if self.fired {
            return Err(Error::Protocol(
                "finish called after the detector reported a fault".into(),
            ));
        }
        self.fired = true;
        Ok(Verdict::correct_model(self.last_batch, self.elapsed()))
    }
}

impl Observer for Detector {
    fn name(&self) -> &str {
        "deeplocalize"
    }

    fn on_train_begin(&mut self, plan: &TrainPlan) {
        self.started = plan.started;
        if self.config.total_iterations.is_none() {
            self.config.total_iterations = Some(plan.total_iterations());
        }
    }

    fn on_batch_end(&mut self, snapshot: &BatchSnapshot) -> Option<Verdict> {
        self.check_batch(snapshot)
            .expect("engine snapshots are well-formed and the detector stops at its first verdict")
    }

    fn on_train_end(&mut self) -> Option<Verdict> {
        self.finish().ok()
    }
}
