//! Benchmark harness: runs each (case, monitor) pair, scores detection (IB)
//! and localization (FL) against the case's ground truth, and renders CSV and
//! text reports.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::detector::{DetectorConfig, Verdict};
use crate::error::{Error, Result};

use super::dataset::{load_dataset, LoadOptions, NormalizeMethod};
use super::monitor::{train_spec, MonitorKind};
use super::mutate::{mutate, GroundTruth, Mutation};
use super::spec::ModelSpec;

const XOR_MLP: &str = include_str!("../../assets/models/xor_mlp.json");
const BLOBS_CLASSIFIER: &str = include_str!("../../assets/models/blobs_classifier.json");
const LINREG_REGRESSOR: &str = include_str!("../../assets/models/linreg_regressor.json");
const MOTIVATING_EXAMPLE: &str = include_str!("../../assets/models/motivating_example.json");
const CANONICAL_SUITE: &str = include_str!("../../assets/suites/canonical.json");

/// Model specs shipped with the crate, addressable as `builtin:<name>`.
pub fn builtin_model(name: &str) -> Option<&'static str> {
    match name {
        "xor_mlp" => Some(XOR_MLP),
        "blobs_classifier" => Some(BLOBS_CLASSIFIER),
        "linreg_regressor" => Some(LINREG_REGRESSOR),
        "motivating_example" => Some(MOTIVATING_EXAMPLE),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelRef {
    Inline(Value),
    Path(PathBuf),
    Builtin(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub model: ModelRef,
    pub data: String,
    pub load: LoadOptions,
    pub mutation: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub cases: Vec<Case>,
    pub monitors: Vec<MonitorKind>,
    pub detector: DetectorConfig,
}

impl Suite {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, path.parent())
    }

    /// The shipped 12-case suite: three healthy models and nine mutants.
    pub fn canonical() -> Self {
        Self::from_json(CANONICAL_SUITE, None).expect("shipped suite is valid")
    }

    /// Parses a suite document. Relative model paths resolve against `base`.
    pub fn from_json(text: &str, base: Option<&Path>) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let root = v.as_object().ok_or_else(|| Error::schema("/", "expected an object"))?;
        if let Some(k) = root.keys().find(|k| !["cases", "monitors"].contains(&k.as_str())) {
            return Err(Error::schema(format!("/{k}"), format!("unknown field `{k}`")));
        }
        let monitors = match root.get("monitors") {
            None => MonitorKind::ALL.to_vec(),
            Some(m) => m
                .as_array()
                .ok_or_else(|| Error::schema("/monitors", "expected a list"))?
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    v.as_str()
                        .ok_or_else(|| Error::schema(format!("/monitors/{i}"), "expected a monitor name"))?
                        .parse()
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let cases = root
            .get("cases")
            .map(|c| c.as_array().ok_or_else(|| Error::schema("/cases", "expected a list")))
            .transpose()?
            .map(|items| {
                items
                    .iter()
                    .enumerate()
                    .map(|(i, c)| parse_case(c, &format!("/cases/{i}"), base))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?
            .unwrap_or_default();
        Ok(Self {
            cases,
            monitors,
            detector: DetectorConfig::default(),
        })
    }
}

fn parse_case(v: &Value, ptr: &str, base: Option<&Path>) -> Result<Case> {
    let o = v.as_object().ok_or_else(|| Error::schema(ptr, "expected an object"))?;
    const FIELDS: [&str; 7] = ["id", "model", "data", "label_cols", "one_hot", "normalize", "mutation"];
    if let Some(k) = o.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(Error::schema(format!("{ptr}/{k}"), format!("unknown field `{k}`")));
    }
    let string = |key: &str| -> Result<Option<String>> {
        o.get(key)
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::schema(format!("{ptr}/{key}"), "expected a string"))
            })
            .transpose()
    };
    let id = string("id")?.ok_or_else(|| Error::schema(ptr, "missing required field `id`"))?;
    let data = string("data")?.ok_or_else(|| Error::schema(ptr, "missing required field `data`"))?;
    let model = match o.get("model") {
        Some(Value::String(s)) => match s.strip_prefix("builtin:") {
            Some(name) => ModelRef::Builtin(name.to_string()),
            None => ModelRef::Path(base.map_or_else(|| PathBuf::from(s), |b| b.join(s))),
        },
        Some(obj @ Value::Object(_)) => ModelRef::Inline(obj.clone()),
        _ => return Err(Error::schema(format!("{ptr}/model"), "expected a path or an inline model spec")),
    };
    let data = match data.strip_prefix("builtin:") {
        Some(_) => data,
        None => base.map_or(data.clone(), |b| b.join(&data).to_string_lossy().into_owned()),
    };
    let normalize = match string("normalize")? {
        None => NormalizeMethod::None,
        Some(n) => NormalizeMethod::parse(&n)
            .ok_or_else(|| Error::schema(format!("{ptr}/normalize"), format!("unknown normalization `{n}`")))?,
    };
    let one_hot = match o.get("one_hot") {
        None => false,
        Some(b) => b
            .as_bool()
            .ok_or_else(|| Error::schema(format!("{ptr}/one_hot"), "expected true or false"))?,
    };
    let label_cols = o
        .get("label_cols")
        .map(|v| {
            v.as_array()
                .and_then(|a| a.iter().map(|c| c.as_u64().map(|c| c as usize)).collect::<Option<Vec<_>>>())
                .ok_or_else(|| Error::schema(format!("{ptr}/label_cols"), "expected a list of column indices"))
        })
        .transpose()?;
    Ok(Case {
        id,
        model,
        data,
        load: LoadOptions {
            label_cols,
            one_hot,
            normalize,
        },
        mutation: string("mutation")?,
    })
}

impl Case {
    /// Loads the spec, applies the mutation, and returns it with ground truth.
    pub fn resolve(&self) -> Result<(ModelSpec, GroundTruth)> {
        let spec = match &self.model {
            ModelRef::Inline(v) => ModelSpec::from_value(v)?,
            ModelRef::Path(p) => ModelSpec::from_json(&std::fs::read_to_string(p).map_err(|e| {
                Error::Data(format!("cannot read model {}: {e}", p.display()))
            })?)?,
            ModelRef::Builtin(name) => ModelSpec::from_json(
                builtin_model(name).ok_or_else(|| Error::Data(format!("unknown builtin model `{name}`")))?,
            )?,
        };
        match &self.mutation {
            None => Ok((spec, GroundTruth::correct())),
            Some(m) => mutate(&spec, &m.parse::<Mutation>()?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub case_id: String,
    pub mutation: String,
    pub monitor: String,
    /// Identified the bug: a fault verdict on a buggy case, CM on a correct one.
    pub detected: bool,
    /// Localized the bug; not applicable to correct cases.
    pub localized: Option<bool>,
    pub code: Option<String>,
    pub layer: Option<usize>,
    pub phase: Option<String>,
    pub epoch: Option<usize>,
    pub iteration: Option<usize>,
    #[serde(skip)]
    pub elapsed_seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonitorSummary {
    pub monitor: String,
    pub cases: usize,
    pub buggy_cases: usize,
    pub detected: usize,
    pub localized: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

/// Scores one verdict against ground truth.
pub fn score(verdict: &Verdict, truth: &GroundTruth, monitor: MonitorKind) -> (bool, Option<bool>) {
    if !truth.buggy {
        return (!verdict.is_fault(), None);
    }
    let detected = verdict.is_fault();
    let localized = detected
        && monitor.localizes()
        && truth.phases.contains(&verdict.phase)
        && truth.layer.is_none_or(|l| verdict.layer == Some(l));
    (detected, Some(localized))
}

pub fn run_bench(suite: &Suite) -> BenchReport {
    let mut rows = Vec::new();
    for case in &suite.cases {
        let mutation = case.mutation.clone().unwrap_or_else(|| "none".into());
        let prepared = case
            .resolve()
            .and_then(|(spec, truth)| load_dataset(&case.data, &case.load).map(|ds| (spec, truth, ds)));
        for &monitor in &suite.monitors {
            let mut row = BenchRow {
                case_id: case.id.clone(),
                mutation: mutation.clone(),
                monitor: monitor.to_string(),
                detected: false,
                localized: None,
                code: None,
                layer: None,
                phase: None,
                epoch: None,
                iteration: None,
                elapsed_seconds: 0.0,
                error: None,
            };
            let result = prepared
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|(spec, truth, ds)| {
                    train_spec(spec, ds, &[monitor], &suite.detector)
                        .map(|outcome| (outcome, truth))
                        .map_err(|e| e.to_string())
                });
            match result {
                Ok((outcome, truth)) => {
                    let v = &outcome.verdict;
                    let (detected, localized) = score(v, truth, monitor);
                    row.detected = detected;
                    row.localized = localized;
                    row.code = Some(v.code.to_string());
                    row.layer = v.layer;
                    row.phase = Some(v.phase.to_string());
                    row.epoch = v.epoch;
                    row.iteration = v.iteration;
                    row.elapsed_seconds = outcome.elapsed_seconds;
                }
                Err(e) => row.error = Some(e),
            }
            rows.push(row);
        }
    }
    let order = |m: &str| MonitorKind::ALL.iter().position(|k| k.as_str() == m);
    rows.sort_by(|a, b| {
        a.case_id
            .cmp(&b.case_id)
            .then_with(|| order(&a.monitor).cmp(&order(&b.monitor)))
    });
    BenchReport { rows }
}

impl BenchReport {
    pub fn summaries(&self) -> Vec<MonitorSummary> {
        let mut out: Vec<MonitorSummary> = Vec::new();
        for row in &self.rows {
            let idx = match out.iter().position(|s| s.monitor == row.monitor) {
                Some(i) => i,
                None => {
                    out.push(MonitorSummary {
                        monitor: row.monitor.clone(),
                        cases: 0,
                        buggy_cases: 0,
                        detected: 0,
                        localized: 0,
                    });
                    out.len() - 1
                }
            };
            let s = &mut out[idx];
            s.cases += 1;
            s.buggy_cases += row.localized.is_some() as usize;
            s.detected += row.detected as usize;
            s.localized += (row.localized == Some(true)) as usize;
        }
        let order = |m: &str| MonitorKind::ALL.iter().position(|k| k.as_str() == m);
        out.sort_by_key(|s| order(&s.monitor));
        out
    }

    /// CSV without timings, so repeated runs are byte-identical.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record([
                "case_id", "mutation", "monitor", "detected", "localized", "code", "layer", "phase", "epoch",
                "iteration", "error",
            ])
            .map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_table(&self) -> String {
        let header = [
            "case", "mutation", "monitor", "IB", "FL", "verdict", "layer", "phase", "epoch", "iter", "secs",
        ];
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
        let flag = |b: bool| if b { "yes" } else { "no" }.to_string();
        let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            lines.push(vec![
                r.case_id.clone(),
                r.mutation.clone(),
                r.monitor.clone(),
                flag(r.detected),
                r.localized.map_or("n/a".into(), flag),
                r.error.as_ref().map_or_else(|| r.code.clone().unwrap_or_default(), |_| "ERROR".into()),
                opt(r.layer),
                r.phase.clone().unwrap_or_else(|| "-".into()),
                opt(r.epoch),
                opt(r.iteration),
                format!("{:.3}", r.elapsed_seconds),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
                out.push('\n');
            }
        }
        for r in self.rows.iter().filter(|r| r.error.is_some()) {
            out.push_str(&format!("error in {} / {}: {}\n", r.case_id, r.monitor, r.error.as_deref().unwrap_or("")));
        }
        out.push('\n');
        for s in self.summaries() {
            out.push_str(&format!(
                "{:<18} IB {:>2}/{:<2}  FL {:>2}/{:<2}\n",
                s.monitor, s.detected, s.cases, s.localized, s.buggy_cases
            ));
        }
        out
    }
}
