//! Dataset ingestion: CSV files and small deterministic builtin datasets,
//! with optional one-hot labels and feature normalization.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BUILTIN_NAMES: [&str; 4] = ["xor", "blobs", "blobs255", "linreg"];
const BUILTIN_SEED: u64 = 0x5EED_DA7A;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMethod {
    #[default]
    None,
    /// Per-feature rescale to [-1, 1].
    Minmax,
    /// Per-feature zero mean, unit variance.
    Standardize,
}

impl NormalizeMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "minmax" => Some(Self::Minmax),
            "standardize" => Some(Self::Standardize),
            _ => None,
        }
    }
}

/// Per-feature statistics used by a normalization: (min, max) for minmax,
/// (mean, std) for standardize.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Normalization {
    pub method: NormalizeMethod,
    pub stats: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    pub feature_names: Vec<String>,
    pub normalization: Normalization,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadOptions {
    /// 0-based label column indices (CSV only). Defaults to the last column.
    pub label_cols: Option<Vec<usize>>,
    pub one_hot: bool,
    pub normalize: NormalizeMethod,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor, feature_names: Vec<String>) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::Data(format!("x has {} rows but y has {}", x.rows(), y.rows())));
        }
        Ok(Self {
            x,
            y,
            feature_names,
            normalization: Normalization::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn normalize(&mut self, method: NormalizeMethod) -> Result<()> {
        if method == NormalizeMethod::None {
            return Ok(());
        }
        if self.normalization.method != NormalizeMethod::None {
            return Err(Error::Data("dataset is already normalized".into()));
        }
        let rows = self.x.rows();
        let width = self.x.row_len();
        let mut stats = Vec::with_capacity(width);
        for c in 0..width {
            let column = (0..rows).map(|r| self.x.data()[r * width + c]);
            stats.push(match method {
                NormalizeMethod::Minmax => column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v))),
                _ => {
                    let values: Vec<f64> = column.collect();
                    let t = Tensor::vector(values);
                    (t.mean()?, t.std()?)
                }
            });
        }
        for (i, v) in self.x.data_mut().iter_mut().enumerate() {
            let (a, b) = stats[i % width];
            *v = match method {
                NormalizeMethod::Minmax if b > a => 2.0 * (*v - a) / (b - a) - 1.0,
                NormalizeMethod::Standardize if b > 0.0 => (*v - a) / b,
                _ => 0.0,
            };
        }
        self.normalization = Normalization { method, stats };
        Ok(())
    }

    /// Replaces a single column of non-negative integer class ids with one-hot rows.
    pub fn one_hot(&mut self) -> Result<()> {
        if self.y.rank() != 2 || self.y.shape()[1] != 1 {
            return Err(Error::Data(format!(
                "one-hot encoding needs a single label column, labels have shape {:?}",
                self.y.shape()
            )));
        }
        let mut classes = 0usize;
        for (row, &v) in self.y.data().iter().enumerate() {
            if !(v >= 0.0 && v.fract() == 0.0) {
                return Err(Error::Data(format!("label {v} in row {row} is not a class id")));
            }
            classes = classes.max(v as usize + 1);
        }
        let rows = self.y.rows();
        let mut data = vec![0.0; rows * classes];
        for (row, &v) in self.y.data().iter().enumerate() {
            data[row * classes + v as usize] = 1.0;
        }
        self.y = Tensor::new(vec![rows, classes], data)?;
        Ok(())
    }

    pub fn scale_inputs(&mut self, factor: f64) {
        self.x = self.x.scale(factor);
    }
}

/// Loads `builtin:<name>` or a CSV path, then applies the options.
pub fn load_dataset(source: &str, options: &LoadOptions) -> Result<Dataset> {
    let mut ds = match source.strip_prefix("builtin:") {
        Some(name) => builtin(name)?,
        None => load_csv(Path::new(source), options.label_cols.as_deref())?,
    };
    if options.one_hot {
        ds.one_hot()?;
    }
    ds.normalize(options.normalize)?;
    Ok(ds)
}

pub fn builtin(name: &str) -> Result<Dataset> {
    let names = |n: usize| (0..n).map(|i| format!("x{i}")).collect::<Vec<_>>();
    match name {
        "xor" => Dataset::new(
            Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]])?,
            Tensor::new(vec![4, 1], vec![0.0, 1.0, 1.0, 0.0])?,
            names(2),
        ),
        "blobs" | "blobs255" => {
            // Two clusters centered at (-1, -1) and (1, 1); labels alternate.
            let n = 200;
            let sigma = 0.5;
            let mut rng = Rng::new(BUILTIN_SEED);
            let mut x = Vec::with_capacity(n * 2);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % 2;
                let center = if class == 0 { -1.0 } else { 1.0 };
                x.push(rng.normal(center, sigma));
                x.push(rng.normal(center, sigma));
                y.push(class as f64);
            }
            let mut ds = Dataset::new(Tensor::new(vec![n, 2], x)?, Tensor::new(vec![n, 1], y)?, names(2))?;
            if name == "blobs255" {
                ds.scale_inputs(255.0);
            }
            Ok(ds)
        }
        "linreg" => {
            let n = 200;
            let mut rng = Rng::new(BUILTIN_SEED ^ 0x11);
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let v = rng.uniform_range(-1.0, 1.0);
                x.push(v);
                y.push(3.0 * v + rng.normal(0.0, 0.1));
            }
            Dataset::new(Tensor::new(vec![n, 1], x)?, Tensor::new(vec![n, 1], y)?, names(1))
        }
        other => Err(Error::Data(format!(
            "unknown builtin dataset `{other}` (expected one of {})",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}

/// Reads a CSV with a header row. Every cell must be numeric. Row and column
/// numbers in errors are 1-based and count the header as row 1.
pub fn load_csv(path: &Path, label_cols: Option<&[usize]>) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header of {}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let width = headers.len();
    if width < 2 {
        return Err(Error::Data("CSV needs at least one feature and one label column".into()));
    }
    let labels: Vec<usize> = label_cols.map_or_else(|| vec![width - 1], <[usize]>::to_vec);
    if labels.is_empty() {
        return Err(Error::Data("no label columns given".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= width) {
        return Err(Error::Data(format!("label column {bad} out of range for {width} columns")));
    }
    if labels.len() >= width {
        return Err(Error::Data("every column is a label; no features left".into()));
    }
    let features: Vec<usize> = (0..width).filter(|c| !labels.contains(c)).collect();

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(rows + 2, |p| p.line() as usize);
        if record.len() != width {
            return Err(Error::Parse {
                row: line,
                col: record.len().min(width) + 1,
                message: format!("expected {width} cells, found {}", record.len()),
            });
        }
        let cell = |c: usize| -> Result<f64> {
            let raw = &record[c];
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row: line,
                col: c + 1,
                message: format!("`{raw}` is not a number"),
            })
        };
        for &c in &features {
            x.push(cell(c)?);
        }
        for &c in &labels {
            y.push(cell(c)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    Dataset::new(
        Tensor::new(vec![rows, features.len()], x)?,
        Tensor::new(vec![rows, labels.len()], y)?,
        features.iter().map(|&c| headers[c].clone()).collect(),
    )
}
