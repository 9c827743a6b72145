//! JSON model specification: parsing with pointer-addressed errors,
//! serialization, and building into a trainable [`Model`].
//!
//! ```json
//! {
//!   "seed": 7,
//!   "layers": [
//!     {"type": "Dense", "units": 4, "input_dim": 2, "activation": "relu"},
//!     {"type": "Dense", "units": 1, "activation": "sigmoid"}
//!   ],
//!   "compile": {"loss": "binary_crossentropy",
//!               "optimizer": {"type": "sgd", "lr": 0.5},
//!               "metrics": ["accuracy"]},
//!   "fit": {"batch_size": 4, "epochs": 2000}
//! }
//! ```

use serde::Serialize;
use serde_json::{Map, Value};

use crate::engine::{Model, TrainConfig};
use crate::error::{Error, Result};
use crate::layers::{Activation, LayerKind, LayerState, Padding};
use crate::objectives::{initialize, InitializerKind, LossKind, OptimizerKind, Task};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SUPPORTED_LAYERS: [&str; 6] = ["Dense", "Conv2D", "MaxPooling2D", "Dropout", "Flatten", "Activation"];

/// Layer types known from Keras programs that this engine does not model.
pub const UNSUPPORTED_LAYERS: [&str; 10] = [
    "BatchNormalization",
    "ZeroPadding2D",
    "ZeroPadding1D",
    "Padding",
    "LSTM",
    "GRU",
    "SimpleRNN",
    "Conv3D",
    "ConvLSTM2D",
    "Embedding",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSpec {
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
    pub compile: CompileSpec,
    pub fit: FitSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpec {
    #[serde(rename = "type")]
    pub layer_type: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub units: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strides: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_size: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_initializer: Option<InitializerKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_initializer: Option<InitializerKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
}

impl LayerSpec {
    pub fn new(layer_type: &str) -> Self {
        Self {
            layer_type: layer_type.to_string(),
            units: None,
            filters: None,
            kernel_size: None,
            strides: None,
            padding: None,
            pool_size: None,
            rate: None,
            activation: None,
            kernel_initializer: None,
            bias_initializer: None,
            input_dim: None,
            input_shape: None,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self.layer_type.as_str(), "Dense" | "Conv2D")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompileSpec {
    pub loss: LossKind,
    pub optimizer: OptimizerSpec,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Sgd {
        lr: f64,
        #[serde(skip_serializing_if = "is_zero")]
        momentum: f64,
    },
    Adam { lr: f64 },
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl OptimizerSpec {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { lr, .. } | OptimizerSpec::Adam { lr } => lr,
        }
    }

    pub fn set_lr(&mut self, value: f64) {
        match self {
            OptimizerSpec::Sgd { lr, .. } | OptimizerSpec::Adam { lr } => *lr = value,
        }
    }

    pub fn to_kind(self) -> OptimizerKind {
        match self {
            OptimizerSpec::Sgd { lr, momentum } => OptimizerKind::Sgd { lr, momentum },
            OptimizerSpec::Adam { lr } => OptimizerKind::adam(lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitSpec {
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub shuffle: bool,
    /// Multiplier applied to the input features before training.
    #[serde(skip_serializing_if = "is_one")]
    pub input_scale: f64,
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

fn child(ptr: &str, key: impl std::fmt::Display) -> String {
    let key = key.to_string().replace('~', "~0").replace('/', "~1");
    format!("{ptr}/{key}")
}

struct Obj<'a> {
    map: &'a Map<String, Value>,
    ptr: String,
}

impl<'a> Obj<'a> {
    fn from(value: &'a Value, ptr: &str) -> Result<Self> {
        match value {
            Value::Object(map) => Ok(Self {
                map,
                ptr: ptr.to_string(),
            }),
            _ => Err(Error::schema(display_ptr(ptr), "expected an object")),
        }
    }

    fn ptr(&self, key: &str) -> String {
        child(&self.ptr, key)
    }

    fn allow(&self, keys: &[&str]) -> Result<()> {
        match self.map.keys().find(|k| !keys.contains(&k.as_str())) {
            Some(k) => Err(Error::schema(self.ptr(k), format!("unknown field `{k}`"))),
            None => Ok(()),
        }
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key).filter(|v| !v.is_null())
    }

    fn required(&self, key: &str) -> Result<&'a Value> {
        self.get(key)
            .ok_or_else(|| Error::schema(display_ptr(&self.ptr), format!("missing required field `{key}`")))
    }

    fn positive(&self, key: &str) -> Result<Option<usize>> {
        self.get(key).map(|v| positive_int(v, &self.ptr(key))).transpose()
    }

    fn require_positive(&self, key: &str) -> Result<usize> {
        positive_int(self.required(key)?, &self.ptr(key))
    }

    fn number(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| {
                v.as_f64()
                    .filter(|f| f.is_finite())
                    .ok_or_else(|| Error::schema(self.ptr(key), "expected a finite number"))
            })
            .transpose()
    }

    fn string(&self, key: &str) -> Result<Option<&'a str>> {
        self.get(key)
            .map(|v| v.as_str().ok_or_else(|| Error::schema(self.ptr(key), "expected a string")))
            .transpose()
    }
}

fn display_ptr(ptr: &str) -> String {
    if ptr.is_empty() {
        "/".into()
    } else {
        ptr.to_string()
    }
}

fn positive_int(v: &Value, ptr: &str) -> Result<usize> {
    match v.as_u64() {
        Some(0) => Err(Error::schema(ptr, "must be >= 1")),
        Some(n) => Ok(n as usize),
        None if v.as_i64().is_some_and(|i| i <= 0) => Err(Error::schema(ptr, "must be >= 1")),
        None => Err(Error::schema(ptr, "expected a positive integer")),
    }
}

fn pair(v: &Value, ptr: &str) -> Result<[usize; 2]> {
    match v {
        Value::Array(items) if items.len() == 2 => Ok([
            positive_int(&items[0], &child(ptr, 0))?,
            positive_int(&items[1], &child(ptr, 1))?,
        ]),
        Value::Array(_) => Err(Error::schema(ptr, "expected two integers")),
        other => {
            let n = positive_int(other, ptr)?;
            Ok([n, n])
        }
    }
}

fn parse_activation(v: &Value, ptr: &str) -> Result<Activation> {
    let name = v.as_str().ok_or_else(|| Error::schema(ptr, "expected an activation name"))?;
    Activation::parse(name).ok_or_else(|| {
        Error::schema(
            ptr,
            format!("unknown activation `{name}` (expected relu, sigmoid, tanh, softmax or linear)"),
        )
    })
}

fn parse_initializer(v: &Value, ptr: &str) -> Result<InitializerKind> {
    let (name, stddev) = match v {
        Value::String(s) => (s.as_str(), None),
        Value::Object(_) => {
            let o = Obj::from(v, ptr)?;
            o.allow(&["type", "stddev"])?;
            let name = o
                .string("type")?
                .ok_or_else(|| Error::schema(display_ptr(ptr), "missing required field `type`"))?;
            (name, o.number("stddev")?)
        }
        _ => return Err(Error::schema(ptr, "expected an initializer name or object")),
    };
    let normalized: String = name.chars().filter(|c| *c != '_').collect::<String>().to_lowercase();
    let kind = match normalized.as_str() {
        "randomnormal" => {
            let stddev = stddev.unwrap_or(0.05);
            if stddev < 0.0 {
                return Err(Error::schema(child(ptr, "stddev"), "must be >= 0"));
            }
            InitializerKind::RandomNormal { stddev }
        }
        "glorotuniform" => InitializerKind::GlorotUniform,
        "zeros" => InitializerKind::Zeros,
        _ => {
            return Err(Error::schema(
                ptr,
                format!("unknown initializer `{name}` (expected random_normal, glorot_uniform or zeros)"),
            ))
        }
    };
    if stddev.is_some() && !matches!(kind, InitializerKind::RandomNormal { .. }) {
        return Err(Error::schema(child(ptr, "stddev"), "only random_normal takes a stddev"));
    }
    Ok(kind)
}

fn parse_layer(v: &Value, ptr: &str) -> Result<LayerSpec> {
    let o = Obj::from(v, ptr)?;
    let layer_type = o
        .string("type")?
        .ok_or_else(|| Error::schema(display_ptr(ptr), "missing required field `type`"))?;
    if !SUPPORTED_LAYERS.contains(&layer_type) {
        return Err(Error::Unsupported {
            pointer: o.ptr("type"),
            message: format!(
                "layer type `{layer_type}` is not supported; supported: {}; known unsupported: {}",
                SUPPORTED_LAYERS.join(", "),
                UNSUPPORTED_LAYERS.join(", ")
            ),
        });
    }
    let input_fields = ["input_dim", "input_shape"];
    let fields: Vec<&str> = match layer_type {
        "Dense" => vec!["units", "activation", "kernel_initializer", "bias_initializer"],
        "Conv2D" => vec![
            "filters",
            "kernel_size",
            "strides",
            "padding",
            "activation",
            "kernel_initializer",
            "bias_initializer",
        ],
        "MaxPooling2D" => vec!["pool_size", "strides"],
        "Dropout" => vec!["rate"],
        "Activation" => vec!["activation"],
        _ => vec![],
    };
    let allowed: Vec<&str> = ["type"].into_iter().chain(fields).chain(input_fields).collect();
    o.allow(&allowed)?;

    let mut spec = LayerSpec::new(layer_type);
    spec.units = o.positive("units")?;
    spec.filters = o.positive("filters")?;
    spec.strides = o.positive("strides")?;
    spec.input_dim = o.positive("input_dim")?;
    spec.kernel_size = o.get("kernel_size").map(|v| pair(v, &o.ptr("kernel_size"))).transpose()?;
    spec.pool_size = o.get("pool_size").map(|v| pair(v, &o.ptr("pool_size"))).transpose()?;
    spec.activation = o.get("activation").map(|v| parse_activation(v, &o.ptr("activation"))).transpose()?;
    spec.kernel_initializer = o
        .get("kernel_initializer")
        .map(|v| parse_initializer(v, &o.ptr("kernel_initializer")))
        .transpose()?;
    spec.bias_initializer = o
        .get("bias_initializer")
        .map(|v| parse_initializer(v, &o.ptr("bias_initializer")))
        .transpose()?;
    if let Some(p) = o.string("padding")? {
        spec.padding = Some(match p {
            "valid" => Padding::Valid,
            "same" => Padding::Same,
            _ => return Err(Error::schema(o.ptr("padding"), "expected `valid` or `same`")),
        });
    }
    if let Some(rate) = o.number("rate")? {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::schema(o.ptr("rate"), "dropout rate must be in [0, 1)"));
        }
        spec.rate = Some(rate);
    }
    if let Some(shape) = o.get("input_shape") {
        let ptr = o.ptr("input_shape");
        let items = shape
            .as_array()
            .filter(|a| !a.is_empty() && a.len() <= 3)
            .ok_or_else(|| Error::schema(&ptr, "expected a list of 1 to 3 positive integers"))?;
        spec.input_shape = Some(
            items
                .iter()
                .enumerate()
                .map(|(i, v)| positive_int(v, &child(&ptr, i)))
                .collect::<Result<_>>()?,
        );
    }

    let require = |key: &str, present: bool| {
        if present {
            Ok(())
        } else {
            Err(Error::schema(display_ptr(ptr), format!("{layer_type} requires `{key}`")))
        }
    };
    match layer_type {
        "Dense" => require("units", spec.units.is_some())?,
        "Conv2D" => {
            require("filters", spec.filters.is_some())?;
            require("kernel_size", spec.kernel_size.is_some())?;
        }
        "MaxPooling2D" => require("pool_size", spec.pool_size.is_some())?,
        "Dropout" => require("rate", spec.rate.is_some())?,
        "Activation" => require("activation", spec.activation.is_some())?,
        _ => {}
    }
    Ok(spec)
}

fn parse_optimizer(v: &Value, ptr: &str) -> Result<OptimizerSpec> {
    let (name, lr, momentum) = match v {
        Value::String(s) => (s.as_str(), None, None),
        _ => {
            let o = Obj::from(v, ptr)?;
            o.allow(&["type", "lr", "learning_rate", "momentum"])?;
            let name = o
                .string("type")?
                .ok_or_else(|| Error::schema(display_ptr(ptr), "missing required field `type`"))?;
            let lr = match (o.number("lr")?, o.number("learning_rate")?) {
                (Some(_), Some(_)) => {
                    return Err(Error::schema(o.ptr("learning_rate"), "give either `lr` or `learning_rate`"))
                }
                (a, b) => a.or(b),
            };
            (name, lr, o.number("momentum")?)
        }
    };
    if let Some(lr) = lr {
        if lr < 0.0 {
            return Err(Error::schema(child(ptr, "lr"), "learning rate must be >= 0"));
        }
    }
    match name.to_lowercase().as_str() {
        "sgd" => {
            let momentum = momentum.unwrap_or(0.0);
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::schema(child(ptr, "momentum"), "momentum must be in [0, 1)"));
            }
            Ok(OptimizerSpec::Sgd {
                lr: lr.unwrap_or(0.01),
                momentum,
            })
        }
        "adam" => {
            if momentum.is_some() {
                return Err(Error::schema(child(ptr, "momentum"), "adam does not take `momentum`"));
            }
            Ok(OptimizerSpec::Adam { lr: lr.unwrap_or(0.001) })
        }
        other => Err(Error::schema(
            child(ptr, "type"),
            format!("unknown optimizer `{other}` (expected sgd or adam)"),
        )),
    }
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        Self::from_value(&value)
    }

    pub fn from_value(v: &Value) -> Result<Self> {
        let root = Obj::from(v, "")?;
        root.allow(&["seed", "layers", "compile", "fit"])?;
        let seed = match root.get("seed") {
            None => 0,
            Some(s) => s
                .as_u64()
                .ok_or_else(|| Error::schema("/seed", "expected a non-negative integer"))?,
        };

        let layers_value = root.required("layers")?;
        let items = layers_value
            .as_array()
            .ok_or_else(|| Error::schema("/layers", "expected a list of layers"))?;
        if items.is_empty() {
            return Err(Error::schema("/layers", "model has no layers"));
        }
        let layers = items
            .iter()
            .enumerate()
            .map(|(i, l)| parse_layer(l, &format!("/layers/{i}")))
            .collect::<Result<Vec<_>>>()?;

        let compile = Obj::from(root.required("compile")?, "/compile")?;
        compile.allow(&["loss", "optimizer", "metrics"])?;
        let loss_name = compile
            .string("loss")?
            .ok_or_else(|| Error::schema("/compile", "missing required field `loss`"))?;
        let loss = LossKind::parse(loss_name)
            .ok_or_else(|| Error::schema("/compile/loss", format!("unknown loss `{loss_name}`")))?;
        let optimizer = parse_optimizer(compile.required("optimizer")?, "/compile/optimizer")?;
        let metrics = match compile.get("metrics") {
            None => Vec::new(),
            Some(m) => {
                let list = m
                    .as_array()
                    .ok_or_else(|| Error::schema("/compile/metrics", "expected a list"))?;
                list.iter()
                    .enumerate()
                    .map(|(i, item)| match item.as_str() {
                        Some("accuracy") | Some("acc") => Ok("accuracy".to_string()),
                        _ => Err(Error::schema(
                            format!("/compile/metrics/{i}"),
                            "only `accuracy` is supported",
                        )),
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };

        let fit = Obj::from(root.required("fit")?, "/fit")?;
        fit.allow(&["batch_size", "epochs", "shuffle", "input_scale"])?;
        let shuffle = match fit.get("shuffle") {
            None => false,
            Some(b) => b
                .as_bool()
                .ok_or_else(|| Error::schema("/fit/shuffle", "expected true or false"))?,
        };
        let input_scale = fit.number("input_scale")?.unwrap_or(1.0);
        if input_scale <= 0.0 {
            return Err(Error::schema("/fit/input_scale", "must be > 0"));
        }
        let spec = ModelSpec {
            seed,
            layers,
            compile: CompileSpec {
                loss,
                optimizer,
                metrics,
            },
            fit: FitSpec {
                batch_size: fit.require_positive("batch_size")?,
                epochs: fit.require_positive("epochs")?,
                shuffle,
                input_scale,
            },
        };
        spec.check_shapes()?;
        Ok(spec)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn task(&self) -> Task {
        if !self.compile.metrics.iter().any(|m| m == "accuracy") {
            return Task::None;
        }
        match self.output_width() {
            Some(1) => Task::Binary,
            _ => Task::Categorical,
        }
    }

    fn output_width(&self) -> Option<usize> {
        self.walk_shapes().ok().map(|shapes| shapes.last().map_or(0, |s| s.iter().product()))
    }

    /// Input shape (batch dimension excluded) declared by the first layer.
    pub fn input_shape(&self) -> Result<Vec<usize>> {
        let first = &self.layers[0];
        match (&first.input_dim, &first.input_shape) {
            (Some(_), Some(_)) => Err(Error::schema(
                "/layers/0",
                "give either `input_dim` or `input_shape`, not both",
            )),
            (Some(d), None) => Ok(vec![*d]),
            (None, Some(s)) => Ok(s.clone()),
            (None, None) => Err(Error::schema(
                "/layers/0",
                "the first layer must declare `input_dim` or `input_shape`",
            )),
        }
    }

    /// Output shape after every layer (batch dimension excluded).
    fn walk_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape()?;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let ptr = format!("/layers/{i}");
            if i > 0 && (l.input_dim.is_some() || l.input_shape.is_some()) {
                return Err(Error::schema(ptr, "only the first layer may declare an input shape"));
            }
            let bad = |message: String| Error::ModelShape {
                pointer: ptr.clone(),
                message,
            };
            shape = match l.layer_type.as_str() {
                "Dense" => {
                    if shape.len() != 1 {
                        return Err(bad(format!("Dense needs a flat input, got {shape:?}; add a Flatten layer")));
                    }
                    vec![l.units.unwrap_or(0)]
                }
                "Conv2D" => {
                    let [kh, kw] = l.kernel_size.unwrap_or([1, 1]);
                    if shape.len() != 3 {
                        return Err(bad(format!("Conv2D needs an [h, w, c] input, got {shape:?}")));
                    }
                    let stride = l.strides.unwrap_or(1);
                    match l.padding.unwrap_or(Padding::Valid) {
                        Padding::Valid => {
                            if kh > shape[0] || kw > shape[1] {
                                return Err(bad(format!("kernel {kh}x{kw} larger than input {shape:?}")));
                            }
                            vec![(shape[0] - kh) / stride + 1, (shape[1] - kw) / stride + 1, l.filters.unwrap_or(0)]
                        }
                        Padding::Same => vec![
                            shape[0].div_ceil(stride),
                            shape[1].div_ceil(stride),
                            l.filters.unwrap_or(0),
                        ],
                    }
                }
                "MaxPooling2D" => {
                    let [ph, pw] = l.pool_size.unwrap_or([1, 1]);
                    if shape.len() != 3 || ph > shape[0] || pw > shape[1] {
                        return Err(bad(format!("pool {ph}x{pw} does not fit input {shape:?}")));
                    }
                    let stride = l.strides.unwrap_or(ph);
                    vec![(shape[0] - ph) / stride + 1, (shape[1] - pw) / stride + 1, shape[2]]
                }
                "Flatten" => vec![shape.iter().product()],
                _ => shape,
            };
            shapes.push(shape.clone());
        }
        if !self.layers.iter().any(LayerSpec::is_parameterized) {
            return Err(Error::schema("/layers", "model needs at least one Dense or Conv2D layer"));
        }
        Ok(shapes)
    }

    fn check_shapes(&self) -> Result<()> {
        self.walk_shapes().map(|_| ())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.fit.batch_size,
            epochs: self.fit.epochs,
            shuffle: self.fit.shuffle,
            seed: self.seed,
        }
    }

    /// 1-based indices of the parameterized layers, paired with their
    /// position in `layers`.
    pub fn parameterized_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    /// The activation applied after the layer at `pos`: its own `activation`
    /// field, or a directly following Activation layer.
    pub fn activation_after(&self, pos: usize) -> Option<(Activation, Option<usize>)> {
        if let Some(a) = self.layers[pos].activation {
            return Some((a, None));
        }
        match self.layers.get(pos + 1) {
            Some(next) if next.layer_type == "Activation" => next.activation.map(|a| (a, Some(pos + 1))),
            _ => None,
        }
    }

    /// Builds the model with freshly initialized parameters. Activations
    /// declared on Dense/Conv2D become separate Activation layers; a
    /// parameterized layer without one gets an identity activation.
    pub fn build(&self) -> Result<(Model, TrainConfig)> {
        let shapes = self.walk_shapes()?;
        let input_shape = self.input_shape()?;
        let mut rng = Rng::new(self.seed);
        let mut layers = Vec::new();
        let mut user_index = 0usize;
        let mut prev = input_shape.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let report_index = user_index.max(1);
            match l.layer_type.as_str() {
                "Dense" | "Conv2D" => {
                    user_index += 1;
                    let kernel_init = l.kernel_initializer.unwrap_or(InitializerKind::GlorotUniform);
                    let bias_init = l.bias_initializer.unwrap_or(InitializerKind::Zeros);
                    let (kind, kshape, fans, width) = if l.layer_type == "Dense" {
                        let units = l.units.expect("validated");
                        let input_dim = prev[0];
                        (
                            LayerKind::Dense { units, input_dim },
                            vec![input_dim, units],
                            (input_dim, units),
                            units,
                        )
                    } else {
                        let [kh, kw] = l.kernel_size.expect("validated");
                        let filters = l.filters.expect("validated");
                        let in_ch = prev[2];
                        (
                            LayerKind::Conv2D {
                                filters,
                                kernel_h: kh,
                                kernel_w: kw,
                                stride: l.strides.unwrap_or(1),
                                padding: l.padding.unwrap_or(Padding::Valid),
                            },
                            vec![kh, kw, in_ch, filters],
                            (kh * kw * in_ch, kh * kw * filters),
                            filters,
                        )
                    };
                    let kernel = initialize(kernel_init, &kshape, fans, &mut rng);
                    let bias = initialize(bias_init, &[width], fans, &mut rng);
                    layers.push(LayerState::with_params(kind, kernel, bias, user_index)?);
                    let followed_by_activation =
                        matches!(self.layers.get(i + 1), Some(next) if next.layer_type == "Activation");
                    match l.activation {
                        Some(a) => layers.push(LayerState::new(LayerKind::Activation(a), user_index)?),
                        None if !followed_by_activation => {
                            layers.push(LayerState::new(LayerKind::Activation(Activation::Linear), user_index)?)
                        }
                        None => {}
                    }
                }
                "Activation" => layers.push(LayerState::new(
                    LayerKind::Activation(l.activation.expect("validated")),
                    report_index,
                )?),
                "Dropout" => layers.push(LayerState::new(
                    LayerKind::Dropout {
                        rate: l.rate.expect("validated"),
                    },
                    report_index,
                )?),
                "MaxPooling2D" => {
                    let [ph, pw] = l.pool_size.expect("validated");
                    layers.push(LayerState::new(
                        LayerKind::MaxPool2D {
                            pool_h: ph,
                            pool_w: pw,
                            stride: l.strides.unwrap_or(ph),
                        },
                        report_index,
                    )?)
                }
                "Flatten" => layers.push(LayerState::new(LayerKind::Flatten, report_index)?),
                other => unreachable!("unsupported layer `{other}` passed validation"),
            }
            prev = shapes[i].clone();
        }
        let model = Model::new(
            input_shape,
            layers,
            self.compile.loss,
            self.compile.optimizer.to_kind(),
            self.task(),
            rng,
        )?;
        Ok((model, self.train_config()))
    }
}

/// Flattened parameters of every parameterized layer, in order. Used to
/// compare models bit for bit.
pub fn parameter_fingerprint(model: &Model) -> Vec<u64> {
    model
        .parameterized_layers()
        .flat_map(|l| {
            let flat: Tensor = l.params_flat();
            flat.into_data().into_iter().map(f64::to_bits)
        })
        .collect()
}
