//! Small feed-forward ReLU classifiers: forward pass with per-layer taps,
//! mini-batch SGD training, and the JSON / CSV file formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn parse_err(context: impl Into<String>, message: impl Into<String>) -> ModelError {
    ModelError::Parse {
        context: context.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected classifier. Layer `k` (zero-based) maps width
/// `layer_dims[k]` to `layer_dims[k + 1]`; the final layer is affine and
/// feeds a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    pub meta: BTreeMap<String, String>,
}

/// Outputs of every layer for a batch of inputs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `activations[k]` is the output of layer `k + 1` (post-activation for
    /// hidden layers, pre-softmax for the last one).
    pub activations: Vec<Matrix>,
    pub logits: Matrix,
    pub probs: Matrix,
}

impl MlpModel {
    pub fn new(
        layer_dims: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        let model = MlpModel {
            layer_dims,
            weights,
            biases,
            activation: Activation::Relu,
            meta,
        };
        model.validate()?;
        Ok(model)
    }

    /// Glorot-uniform weights and zero biases from a seeded generator.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_dims.windows(2) {
            weights.push(glorot(pair[1], pair[0], &mut rng));
            biases.push(vec![0.0; pair[1]]);
        }
        Self::new(layer_dims.to_vec(), weights, biases, BTreeMap::new())
    }

    fn validate(&self) -> Result<()> {
        check_dims(&self.layer_dims)?;
        let layers = self.num_layers();
        if self.weights.len() != layers || self.biases.len() != layers {
            return Err(ModelError::Dimension(format!(
                "{} layers declared but {} weight matrices and {} bias vectors",
                layers,
                self.weights.len(),
                self.biases.len()
            )));
        }
        for k in 0..layers {
            let expect = (self.layer_dims[k + 1], self.layer_dims[k]);
            if self.weights[k].shape() != expect {
                return Err(ModelError::Dimension(format!(
                    "layer {} weight is {:?}, expected {:?}",
                    k + 1,
                    self.weights[k].shape(),
                    expect
                )));
            }
            if self.biases[k].len() != expect.0 {
                return Err(ModelError::Dimension(format!(
                    "layer {} bias has {} entries, expected {}",
                    k + 1,
                    self.biases[k].len(),
                    expect.0
                )));
            }
            if !self.weights[k].is_finite() || self.biases[k].iter().any(|b| !b.is_finite()) {
                return Err(ModelError::Dimension(format!(
                    "layer {} has non-finite parameters",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    /// Number of affine layers `L`.
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated dims")
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    /// Identifier stored under the `id` meta key, if any.
    pub fn id(&self) -> &str {
        self.meta.get("id").map_or("unnamed", String::as_str)
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    /// Replaces layer `k` (one-based) with a fresh Glorot initialization.
    pub fn reinit_layer(&mut self, k: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, inp) = (self.layer_dims[k], self.layer_dims[k - 1]);
        self.weights[k - 1] = glorot(out, inp, &mut rng);
        self.biases[k - 1] = vec![0.0; out];
    }

    /// Replaces the last layer with a fresh one of `num_classes` outputs.
    pub fn replace_head(&mut self, num_classes: usize, seed: u64) {
        let last = self.num_layers();
        self.layer_dims[last] = num_classes;
        self.reinit_layer(last, seed);
    }

    /// Frobenius distance between all parameters of two models with
    /// identical shapes.
    pub fn parameter_distance(&self, other: &MlpModel) -> Result<f64> {
        if self.layer_dims != other.layer_dims {
            return Err(ModelError::Dimension(
                "parameter distance needs identical architectures".into(),
            ));
        }
        let mut total = 0.0;
        for k in 0..self.num_layers() {
            total += self.weights[k].sub(&other.weights[k])?.frobenius_norm().powi(2);
            total += self.biases[k]
                .iter()
                .zip(&other.biases[k])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        }
        Ok(total.sqrt())
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass> {
        if x.cols() != self.input_dim() {
            return Err(ModelError::Dimension(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let layers = self.num_layers();
        let mut activations = Vec::with_capacity(layers);
        let mut current = x.clone();
        for k in 0..layers {
            let mut z = self.affine(k, &current)?;
            if k + 1 < layers {
                z.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = self.activation.apply(*v));
            }
            activations.push(z.clone());
            current = z;
        }
        let probs = softmax_rows(&current, 1.0);
        Ok(ForwardPass {
            activations,
            logits: current,
            probs,
        })
    }

    fn affine(&self, k: usize, input: &Matrix) -> Result<Matrix> {
        let mut z = input.matmul_transposed(&self.weights[k])?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.biases[k]) {
                *v += b;
            }
        }
        Ok(z)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let pass = self.forward(x)?;
        Ok((0..pass.logits.rows()).map(|r| argmax(pass.logits.row(r))).collect())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let pred = self.predict(&data.features)?;
        let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / data.len().max(1) as f64)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            weights: self.weights.iter().map(|w| w.data().to_vec()).collect(),
            biases: self.biases.clone(),
            meta: self.meta.clone(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| {
            parse_err(
                format!("model json (line {}, column {})", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        check_dims(&file.layer_dims).map_err(|e| parse_err("layer_dims", e.to_string()))?;
        let layers = file.layer_dims.len() - 1;
        if file.weights.len() != layers {
            return Err(parse_err(
                "weights",
                format!("{} layers declared, {} weight arrays", layers, file.weights.len()),
            ));
        }
        if file.biases.len() != layers {
            return Err(parse_err(
                "biases",
                format!("{} layers declared, {} bias arrays", layers, file.biases.len()),
            ));
        }
        let mut weights = Vec::with_capacity(layers);
        for (k, w) in file.weights.into_iter().enumerate() {
            let (rows, cols) = (file.layer_dims[k + 1], file.layer_dims[k]);
            if w.len() != rows * cols {
                return Err(parse_err(
                    format!("weights[{k}]"),
                    format!("expected {} values ({rows}x{cols}), found {}", rows * cols, w.len()),
                ));
            }
            weights.push(Matrix::new(rows, cols, w).map_err(|e| parse_err(format!("weights[{k}]"), e.to_string()))?);
        }
        for (k, b) in file.biases.iter().enumerate() {
            if b.len() != file.layer_dims[k + 1] {
                return Err(parse_err(
                    format!("biases[{k}]"),
                    format!("expected {} values, found {}", file.layer_dims[k + 1], b.len()),
                ));
            }
        }
        let mut model = MlpModel::new(file.layer_dims, weights, file.biases, file.meta)
            .map_err(|e| parse_err("model", e.to_string()))?;
        model.activation = file.activation;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(ModelError::Dimension(format!(
            "need at least input and output widths, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(ModelError::Dimension(format!("zero-width layer in {dims:?}")));
    }
    Ok(())
}

fn glorot(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let limit = (6.0 / (inp + out) as f64).sqrt();
    Matrix::from_fn(out, inp, |_, _| rng.gen_range(-limit..=limit))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
            if *v > best.1 {
                (i, *v)
            } else {
                best
            }
        })
        .0
}

/// Row-wise softmax of `logits / temperature` with max subtraction.
pub fn softmax_rows(logits: &Matrix, temperature: f64) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Labeled samples for a classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(ModelError::Dimension(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(ModelError::Dimension(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|i| self.labels[*i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# n={} d={} classes={}\n",
            self.len(),
            self.input_dim(),
            self.num_classes
        );
        for (r, label) in self.labels.iter().enumerate() {
            for v in self.features.row(r) {
                write!(out, "{},", fmt_f64(*v)).unwrap();
            }
            writeln!(out, "{label}").unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err("dataset line 1", "empty file"))?;
        let (n, d, classes) = parse_dataset_header(header)?;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let ctx = || format!("dataset line {}", idx + 1);
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(parse_err(
                    ctx(),
                    format!("expected {} fields, found {}", d + 1, fields.len()),
                ));
            }
            for (c, f) in fields[..d].iter().enumerate() {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(ctx(), format!("feature {c}: bad float {f:?}")))?;
                data.push(v);
            }
            let label: usize = fields[d]
                .trim()
                .parse()
                .map_err(|_| parse_err(ctx(), format!("bad label {:?}", fields[d])))?;
            labels.push(label);
        }
        if labels.len() != n {
            return Err(parse_err(
                "dataset header",
                format!("declares n={n} but {} rows follow", labels.len()),
            ));
        }
        let features = Matrix::new(n, d, data).map_err(|e| parse_err("dataset", e.to_string()))?;
        Dataset::new(features, labels, classes).map_err(|e| parse_err("dataset", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&read_file(path)?)
    }
}

fn parse_dataset_header(line: &str) -> Result<(usize, usize, usize)> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| parse_err("dataset line 1", "header must start with '#'"))?;
    let (mut n, mut d, mut c) = (None, None, None);
    for tok in body.split_whitespace() {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| parse_err("dataset line 1", format!("bad token {tok:?}")))?;
        let val: usize = val
            .parse()
            .map_err(|_| parse_err("dataset line 1", format!("bad value in {tok:?}")))?;
        match key {
            "n" => n = Some(val),
            "d" => d = Some(val),
            "classes" => c = Some(val),
            _ => return Err(parse_err("dataset line 1", format!("unknown key {key:?}"))),
        }
    }
    match (n, d, c) {
        (Some(n), Some(d), Some(c)) => Ok((n, d, c)),
        _ => Err(parse_err("dataset line 1", "header needs n=, d= and classes=")),
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    write_file(path, &model.to_json())
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    MlpModel::from_json(&read_file(path)?).map_err(|e| match e {
        ModelError::Parse { context, message } => ModelError::Parse {
            context: format!("{}: {context}", path.display()),
            message,
        },
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-layer flag; `true` keeps that layer at its initial values.
    #[serde(default)]
    pub freeze_mask: Option<Vec<bool>>,
    #[serde(default)]
    pub l2: f64,
}

impl TrainConfig {
    fn validate(&self, layers: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch size must be at least 1".into()));
        }
        if let Some(mask) = &self.freeze_mask {
            if mask.len() != layers {
                return Err(ModelError::InvalidConfig(format!(
                    "freeze mask has {} entries for {layers} layers",
                    mask.len()
                )));
            }
        }
        Ok(())
    }
}

/// What the output layer is trained against.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Hard class labels, cross-entropy loss.
    Labels(&'a [usize]),
    /// Teacher probabilities. Loss is `T^2 * KL(teacher || softmax(z / T))`;
    /// with `T = 1` this is soft-label cross-entropy up to a constant.
    Soft { probs: &'a Matrix, temperature: f64 },
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Soft { probs, .. } => probs.rows(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Mean loss over the rows of `x` and its gradient with respect to every
/// parameter (L2 excluded).
pub fn loss_and_gradients(model: &MlpModel, x: &Matrix, targets: Targets<'_>) -> Result<(f64, Gradients)> {
    let rows: Vec<usize> = (0..x.rows()).collect();
    batch_gradients(model, x, targets, &rows)
}

fn batch_gradients(
    model: &MlpModel,
    x: &Matrix,
    targets: Targets<'_>,
    rows: &[usize],
) -> Result<(f64, Gradients)> {
    if targets.len() != x.rows() {
        return Err(ModelError::Dimension(format!(
            "{} targets for {} samples",
            targets.len(),
            x.rows()
        )));
    }
    if x.cols() != model.input_dim() {
        return Err(ModelError::Dimension(format!(
            "input has {} features, model expects {}",
            x.cols(),
            model.input_dim()
        )));
    }
    let layers = model.num_layers();
    let batch = rows.len() as f64;
    let xb = x.select_rows(rows);

    // pre[k] is the pre-activation of layer k, inputs[k] its input.
    let mut inputs = vec![xb];
    let mut pre = Vec::with_capacity(layers);
    for k in 0..layers {
        let z = model.affine(k, &inputs[k])?;
        if k + 1 < layers {
            inputs.push(z.map(|v| model.activation.apply(v)));
        }
        pre.push(z);
    }
    let logits = &pre[layers - 1];
    let classes = model.num_classes();

    let mut loss = 0.0;
    let mut delta = Matrix::zeros(rows.len(), classes);
    match targets {
        Targets::Labels(labels) => {
            let probs = softmax_rows(logits, 1.0);
            for (b, &r) in rows.iter().enumerate() {
                let y = labels[r];
                if y >= classes {
                    return Err(ModelError::Dimension(format!(
                        "label {y} out of range for {classes} classes"
                    )));
                }
                loss -= probs[(b, y)].max(f64::MIN_POSITIVE).ln();
                for c in 0..classes {
                    let target = if c == y { 1.0 } else { 0.0 };
                    delta[(b, c)] = (probs[(b, c)] - target) / batch;
                }
            }
        }
        Targets::Soft { probs: teacher, temperature } => {
            if teacher.cols() != classes {
                return Err(ModelError::Dimension(format!(
                    "teacher has {} classes, student {classes}",
                    teacher.cols()
                )));
            }
            let t = temperature;
            let student = softmax_rows(logits, t);
            for (b, &r) in rows.iter().enumerate() {
                let teacher_row = teacher.row(r);
                for c in 0..classes {
                    let p = teacher_row[c];
                    let q = student[(b, c)];
                    if p > 0.0 {
                        loss += t * t * p * (p.ln() - q.max(f64::MIN_POSITIVE).ln());
                    }
                    delta[(b, c)] = t * (q - p) / batch;
                }
            }
        }
    }
    loss /= batch;

    let mut grad_w = vec![Matrix::zeros(0, 0); layers];
    let mut grad_b = vec![Vec::new(); layers];
    for k in (0..layers).rev() {
        grad_w[k] = delta.transpose().matmul(&inputs[k])?;
        grad_b[k] = (0..delta.cols())
            .map(|c| (0..delta.rows()).map(|r| delta[(r, c)]).sum())
            .collect();
        if k > 0 {
            let mut back = delta.matmul(&model.weights[k])?;
            for (v, z) in back.data_mut().iter_mut().zip(pre[k - 1].data()) {
                *v *= model.activation.derivative(*z);
            }
            delta = back;
        }
    }
    Ok((
        loss,
        Gradients {
            weights: grad_w,
            biases: grad_b,
        },
    ))
}

/// Per-layer weight masks; `false` entries are pinned at zero.
pub type WeightMask = Vec<Vec<bool>>;

/// Initializes a model from `cfg.seed` and trains it on labeled data.
pub fn train(data: &Dataset, layer_dims: &[usize], cfg: &TrainConfig) -> Result<MlpModel> {
    if layer_dims.first() != Some(&data.input_dim()) {
        return Err(ModelError::Dimension(format!(
            "model input width {:?} does not match data width {}",
            layer_dims.first(),
            data.input_dim()
        )));
    }
    if layer_dims.last() != Some(&data.num_classes) {
        return Err(ModelError::Dimension(format!(
            "model output width {:?} does not match {} classes",
            layer_dims.last(),
            data.num_classes
        )));
    }
    let model = MlpModel::init(layer_dims, cfg.seed)?;
    fit(model, &data.features, Targets::Labels(&data.labels), cfg, None)
}

/// Runs mini-batch SGD from the given starting point.
pub fn fit(
    mut model: MlpModel,
    x: &Matrix,
    targets: Targets<'_>,
    cfg: &TrainConfig,
    mask: Option<&WeightMask>,
) -> Result<MlpModel> {
    let layers = model.num_layers();
    cfg.validate(layers)?;
    if x.rows() == 0 && cfg.epochs > 0 {
        return Err(ModelError::InvalidConfig("training set is empty".into()));
    }
    if let Some(mask) = mask {
        for (k, m) in mask.iter().enumerate() {
            if m.len() != model.weights[k].data().len() {
                return Err(ModelError::Dimension(format!("weight mask for layer {} has wrong size", k + 1)));
            }
            apply_mask(&mut model.weights[k], m);
        }
    }
    let frozen = |k: usize| cfg.freeze_mask.as_ref().is_some_and(|m| m[k]);
    // Distinct stream from the one used for initialization.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_5A4D_u64);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradients(&model, x, targets, chunk)?;
            epoch_loss += loss * chunk.len() as f64;
            for k in 0..layers {
                if frozen(k) {
                    continue;
                }
                let w = model.weights[k].data_mut();
                for (p, g) in w.iter_mut().zip(grads.weights[k].data()) {
                    *p -= cfg.learning_rate * (g + cfg.l2 * *p);
                }
                for (p, g) in model.biases[k].iter_mut().zip(&grads.biases[k]) {
                    *p -= cfg.learning_rate * g;
                }
                if let Some(mask) = mask {
                    apply_mask(&mut model.weights[k], &mask[k]);
                }
            }
        }
        let mean = epoch_loss / x.rows() as f64;
        if !mean.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::Diverged { epoch, loss: mean });
        }
    }
    Ok(model)
}

fn apply_mask(w: &mut Matrix, keep: &[bool]) {
    for (v, k) in w.data_mut().iter_mut().zip(keep) {
        if !k {
            *v = 0.0;
        }
    }
}
