//! Mutation operators that seed a known bug into a model spec, each with a
//! ground-truth record describing where the bug lives.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::detector::{Phase, VerdictCode};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::objectives::LossKind;

use super::spec::ModelSpec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mutation {
    WrongLoss { to: LossKind },
    /// Removes the activation of the given parameterized layer (1-based).
    DropActivation { layer: usize },
    WrongFinalActivation { to: Activation },
    ScaleLr { factor: f64 },
    ZeroLr,
    /// Multiplies the input features, as if normalization had been skipped.
    DenormalizeInput { factor: f64 },
}

/// Where a seeded bug is expected to be reported.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroundTruth {
    pub buggy: bool,
    /// Any of these phases counts as a correct localization.
    pub phases: Vec<Phase>,
    /// Expected layer, when the bug is tied to one.
    pub layer: Option<usize>,
    /// Expected code, when construction pins it down exactly.
    pub code: Option<VerdictCode>,
}

impl GroundTruth {
    pub fn correct() -> Self {
        Self {
            buggy: false,
            phases: Vec::new(),
            layer: None,
            code: None,
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mutation::WrongLoss { to } => write!(f, "wrong_loss={}", to.name()),
            Mutation::DropActivation { layer } => write!(f, "drop_activation={layer}"),
            Mutation::WrongFinalActivation { to } => write!(f, "wrong_final_activation={}", to.name()),
            Mutation::ScaleLr { factor } => write!(f, "scale_lr={factor}"),
            Mutation::ZeroLr => write!(f, "zero_lr"),
            Mutation::DenormalizeInput { factor } => write!(f, "denormalize_input={factor}"),
        }
    }
}

impl FromStr for Mutation {
    type Err = Error;

    /// Parses `<op>[=arg]`, e.g. `wrong_loss=mse`, `scale_lr=100`, `zero_lr`.
    fn from_str(s: &str) -> Result<Self> {
        let (op, arg) = match s.split_once('=') {
            Some((op, arg)) => (op.trim(), Some(arg.trim())),
            None => (s.trim(), None),
        };
        let need = |what: &str| {
            arg.ok_or_else(|| Error::Config(format!("mutation `{op}` needs an argument ({what})")))
        };
        let number = |what: &str| -> Result<f64> {
            let raw = need(what)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(|| Error::Config(format!("`{raw}` is not a positive number")))
        };
        let m = match op {
            "wrong_loss" => {
                let raw = need("loss name")?;
                Mutation::WrongLoss {
                    to: LossKind::parse(raw).ok_or_else(|| Error::Config(format!("unknown loss `{raw}`")))?,
                }
            }
            "drop_activation" => {
                let raw = need("layer index")?;
                Mutation::DropActivation {
                    layer: raw
                        .parse()
                        .ok()
                        .filter(|&l| l >= 1)
                        .ok_or_else(|| Error::Config(format!("`{raw}` is not a 1-based layer index")))?,
                }
            }
            "wrong_final_activation" => {
                let raw = need("activation name")?;
                Mutation::WrongFinalActivation {
                    to: Activation::parse(raw).ok_or_else(|| Error::Config(format!("unknown activation `{raw}`")))?,
                }
            }
            "scale_lr" => Mutation::ScaleLr {
                factor: number("factor")?,
            },
            "zero_lr" => {
                if arg.is_some() {
                    return Err(Error::Config("zero_lr takes no argument".into()));
                }
                Mutation::ZeroLr
            }
            "denormalize_input" => Mutation::DenormalizeInput {
                factor: arg.map_or(Ok(255.0), |_| number("factor"))?,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown mutation `{other}` (expected wrong_loss, drop_activation, wrong_final_activation, \
                     scale_lr, zero_lr or denormalize_input)"
                )))
            }
        };
        Ok(m)
    }
}

fn parameterized_count(spec: &ModelSpec) -> usize {
    spec.parameterized_positions().len()
}

/// Applies `m` to a copy of `spec`. The input is left unchanged.
pub fn mutate(spec: &ModelSpec, m: &Mutation) -> Result<(ModelSpec, GroundTruth)> {
    let mut out = spec.clone();
    let last = parameterized_count(spec);
    let truth = |phases: Vec<Phase>, layer: Option<usize>, code: Option<VerdictCode>| GroundTruth {
        buggy: true,
        phases,
        layer,
        code,
    };
    let gt = match *m {
        Mutation::WrongLoss { to } => {
            if spec.compile.loss == to {
                return Err(Error::Mutation(format!("model already uses loss `{}`", to.name())));
            }
            out.compile.loss = to;
            truth(vec![Phase::Backward, Phase::Metric], None, None)
        }
        Mutation::DropActivation { layer } => {
            let positions = spec.parameterized_positions();
            let pos = *positions.get(layer - 1).ok_or_else(|| {
                Error::Mutation(format!("model has {last} parameterized layer(s); there is no layer {layer}"))
            })?;
            match spec.activation_after(pos) {
                None | Some((Activation::Linear, _)) => {
                    return Err(Error::Mutation(format!("layer {layer} has no activation to drop")));
                }
                Some((_, None)) => out.layers[pos].activation = None,
                Some((_, Some(follower))) => {
                    out.layers.remove(follower);
                }
            }
            truth(vec![Phase::Forward], Some(layer), None)
        }
        Mutation::WrongFinalActivation { to } => {
            let pos = *spec.parameterized_positions().last().expect("validated spec has a parameterized layer");
            let current = spec.activation_after(pos);
            if current.map(|(a, _)| a).unwrap_or(Activation::Linear) == to {
                return Err(Error::Mutation(format!("final activation is already `{}`", to.name())));
            }
            match current {
                Some((_, Some(follower))) => out.layers[follower].activation = Some(to),
                _ => out.layers[pos].activation = Some(to),
            }
            truth(vec![Phase::Forward], Some(last), None)
        }
        Mutation::ScaleLr { factor } => {
            if factor == 1.0 {
                return Err(Error::Mutation("scaling the learning rate by 1 changes nothing".into()));
            }
            if spec.compile.optimizer.lr() == 0.0 {
                return Err(Error::Mutation("learning rate is 0; scaling has no effect".into()));
            }
            out.compile.optimizer.set_lr(spec.compile.optimizer.lr() * factor);
            truth(vec![Phase::Backward], None, None)
        }
        Mutation::ZeroLr => {
            if spec.compile.optimizer.lr() == 0.0 {
                return Err(Error::Mutation("learning rate is already 0".into()));
            }
            out.compile.optimizer.set_lr(0.0);
            truth(vec![Phase::Backward], Some(last), Some(VerdictCode::EBW))
        }
        Mutation::DenormalizeInput { factor } => {
            if factor == 1.0 {
                return Err(Error::Mutation("an input scale of 1 changes nothing".into()));
            }
            out.fit.input_scale = spec.fit.input_scale * factor;
            truth(vec![Phase::Forward, Phase::Metric], None, None)
        }
    };
    // Re-validate through the parser so a mutant is always a loadable spec.
    let reparsed = ModelSpec::from_json(&out.to_json_pretty())?;
    Ok((reparsed, gt))
}
