//! Neuron matrices and the distances between them.
//!
//! A neuron matrix has one row per probe sample and one column per neuron;
//! column `i` is that neuron's response over the whole probe set.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, norm2, Matrix};
use crate::model::{fmt_f64, read_file, write_file, MlpModel, ModelError};

/// Default floor applied to probabilities before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Columns with a norm below this count as zero vectors for cosine distance.
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("layer {layer} out of range for a {layers}-layer model")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("row {row} is not a probability vector (sum {sum})")]
    InvalidProbabilities { row: usize, sum: f64 },
    #[error("neuron matrix must have at least one row and column")]
    Empty,
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronSource {
    /// Tapped output of an internal (or the pre-softmax final) layer.
    WhiteboxLayer(usize),
    /// Log of floored output probabilities.
    BlackboxLogprob,
    /// Raw output probabilities, no logarithm.
    BlackboxProb,
}

impl fmt::Display for NeuronSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NeuronSource::WhiteboxLayer(_) => f.write_str("whitebox"),
            NeuronSource::BlackboxLogprob => f.write_str("blackbox_logprob"),
            NeuronSource::BlackboxProb => f.write_str("blackbox_prob"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronMatrix {
    pub values: Matrix,
    pub source: NeuronSource,
    pub model_id: String,
    pub layer_index: Option<usize>,
}

impl AsRef<Matrix> for NeuronMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.values
    }
}

impl NeuronMatrix {
    pub fn new(values: Matrix, source: NeuronSource, model_id: impl Into<String>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(MetricsError::Empty);
        }
        let layer_index = match source {
            NeuronSource::WhiteboxLayer(k) => Some(k),
            _ => None,
        };
        Ok(NeuronMatrix {
            values,
            source,
            model_id: model_id.into(),
            layer_index,
        })
    }

    pub fn samples(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    /// Same provenance, new values (used after alignment).
    pub fn with_values(&self, values: Matrix) -> NeuronMatrix {
        NeuronMatrix {
            values,
            ..self.clone()
        }
    }

    /// CSV form: a `n,m,source,layer` line, then `n` rows of `m` floats.
    pub fn to_csv(&self) -> String {
        let layer = self.layer_index.map(|k| k.to_string()).unwrap_or_default();
        let mut out = format!("{},{},{},{}\n", self.samples(), self.width(), self.source, layer);
        for r in 0..self.samples() {
            let row: Vec<String> = self.values.row(r).iter().map(|v| fmt_f64(*v)).collect();
            writeln!(out, "{}", row.join(",")).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str, model_id: &str) -> Result<Self> {
        let perr = |context: String, message: String| MetricsError::Parse { context, message };
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| perr("line 1".into(), "empty file".into()))?;
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() != 4 {
            return Err(perr("line 1".into(), format!("expected n,m,source,layer, got {header:?}")));
        }
        let n: usize = fields[0]
            .parse()
            .map_err(|_| perr("line 1".into(), format!("bad row count {:?}", fields[0])))?;
        let m: usize = fields[1]
            .parse()
            .map_err(|_| perr("line 1".into(), format!("bad column count {:?}", fields[1])))?;
        let layer: Option<usize> = if fields[3].is_empty() {
            None
        } else {
            Some(
                fields[3]
                    .parse()
                    .map_err(|_| perr("line 1".into(), format!("bad layer {:?}", fields[3])))?,
            )
        };
        let source = match (fields[2], layer) {
            ("whitebox", Some(k)) => NeuronSource::WhiteboxLayer(k),
            ("whitebox", None) => {
                return Err(perr("line 1".into(), "whitebox matrix needs a layer".into()))
            }
            (other, _) => other
                .parse()
                .map_err(|e: String| perr("line 1".into(), e))?,
        };
        let mut data = Vec::with_capacity(n * m);
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != m {
                return Err(perr(
                    format!("line {}", i + 2),
                    format!("expected {m} values, found {}", vals.len()),
                ));
            }
            for v in vals {
                data.push(v.trim().parse::<f64>().map_err(|_| {
                    perr(format!("line {}", i + 2), format!("bad float {v:?}"))
                })?);
            }
            rows += 1;
        }
        if rows != n {
            return Err(perr("line 1".into(), format!("declares {n} rows, found {rows}")));
        }
        let values = Matrix::new(n, m, data).map_err(|e| perr("matrix".into(), e.to_string()))?;
        let mut out = NeuronMatrix::new(values, source, model_id)?;
        out.layer_index = layer;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_file(path, &self.to_csv())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_csv(&read_file(path)?, &id)
    }
}

impl FromStr for NeuronSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "blackbox_logprob" => Ok(NeuronSource::BlackboxLogprob),
            "blackbox_prob" => Ok(NeuronSource::BlackboxProb),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

/// Output of layer `layer` (one-based; `L` is the pre-softmax output) on
/// every row of `x`.
pub fn extract_neuron_matrix(model: &MlpModel, x: &Matrix, layer: usize) -> Result<NeuronMatrix> {
    let layers = model.num_layers();
    if layer == 0 || layer > layers {
        return Err(MetricsError::LayerOutOfRange { layer, layers });
    }
    let mut pass = model.forward(x)?;
    let values = pass.activations.swap_remove(layer - 1);
    NeuronMatrix::new(values, NeuronSource::WhiteboxLayer(layer), model.id())
}

fn check_probabilities(probs: &Matrix) -> Result<()> {
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| *p < 0.0) {
            return Err(MetricsError::InvalidProbabilities { row: r, sum });
        }
    }
    Ok(())
}

/// Elementwise `ln(max(p, floor))` of a probability matrix.
pub fn approx_neuron_matrix(probs: &Matrix, floor: f64) -> Result<NeuronMatrix> {
    check_probabilities(probs)?;
    NeuronMatrix::new(probs.map(|p| p.max(floor).ln()), NeuronSource::BlackboxLogprob, "")
}

/// Raw probabilities as a neuron matrix, for comparisons without the log.
pub fn probability_matrix(probs: &Matrix) -> Result<NeuronMatrix> {
    check_probabilities(probs)?;
    NeuronMatrix::new(probs.clone(), NeuronSource::BlackboxProb, "")
}

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape(), b.shape()));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Mean over columns of the Euclidean distance between matching columns.
pub fn dist_eu(a: impl AsRef<Matrix>, b: impl AsRef<Matrix>) -> Result<f64> {
    let (a, b) = (a.as_ref(), b.as_ref());
    same_shape(a, b)?;
    let total: f64 = (0..a.cols())
        .map(|c| {
            let diff: Vec<f64> = (0..a.rows()).map(|r| a[(r, c)] - b[(r, c)]).collect();
            norm2(&diff)
        })
        .sum();
    Ok(total / a.cols() as f64)
}

/// Mean over columns of the cosine distance between matching columns.
///
/// A pair of zero columns contributes 0; a single zero column contributes 1.
pub fn dist_ac(a: impl AsRef<Matrix>, b: impl AsRef<Matrix>) -> Result<f64> {
    let (a, b) = (a.as_ref(), b.as_ref());
    same_shape(a, b)?;
    let total: f64 = (0..a.cols())
        .map(|c| cosine_distance(&a.col(c), &b.col(c)))
        .sum();
    Ok(total / a.cols() as f64)
}

pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (norm2(u), norm2(v));
    match (nu < ZERO_NORM, nv < ZERO_NORM) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ if u == v => 0.0,
        // Divide by one norm at a time so the ratio cannot overflow; the
        // order depends only on the norms, keeping the result symmetric.
        _ => {
            let cos = dot(u, v) / nu.max(nv) / nu.min(nv);
            (1.0 - cos.clamp(-1.0, 1.0)).clamp(0.0, 2.0)
        }
    }
}
