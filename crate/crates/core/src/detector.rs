//! The reuse detection pipeline.
//!
//! For a victim, a suspect and a handful of independently trained
//! reference models: pick the victim's least confident samples as the
//! probe set, compare the neuron matrices of the suspect and of every
//! reference against the victim's, and flag the suspect when its distance
//! sits far enough below the pooled median (an IQR rule with tunable
//! width `alpha`). Per-metric decisions are combined by a weighted sum.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{hetero_align, AlignError};
use crate::linalg::Matrix;
use crate::metrics::{
    approx_neuron_matrix, dist_ac, dist_eu, extract_neuron_matrix, probability_matrix,
    MetricsError, NeuronMatrix, PROB_FLOOR,
};
use crate::model::{Dataset, MlpModel, ModelError};

pub const DEFAULT_ALPHA_BLACKBOX: f64 = 0.85;
pub const DEFAULT_ALPHA_WHITEBOX: f64 = 3.5;
pub const DEFAULT_WEIGHT_EU: f64 = 1.0;
pub const DEFAULT_WEIGHT_AC: f64 = 120.0;
pub const DEFAULT_SUITE_SIZE: usize = 1000;
pub const DEFAULT_LAYER_FRACTION: f64 = 0.25;

/// Metric names accepted in weight maps, in evaluation order.
pub const METRICS: [&str; 2] = ["eu", "ac"];

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("need at least 2 reference models, got {0}")]
    TooFewReferences(usize),
    #[error("quartiles need at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("test suite is empty")]
    EmptySuite,
    #[error("test suite of {requested} samples requested from a dataset of {available}")]
    SuiteTooLarge { requested: usize, available: usize },
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("invalid decision config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DetectError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Whitebox,
    Blackbox,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Whitebox => "white",
            Mode::Blackbox => "black",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "white" | "whitebox" => Ok(Mode::Whitebox),
            "black" | "blackbox" => Ok(Mode::Blackbox),
            other => Err(format!("unknown mode {other:?} (expected black or white)")),
        }
    }
}

/// Which layer white-box homogeneous detection taps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPolicy {
    /// `round(f * L)` clamped to `[1, L - 1]`.
    Fraction(f64),
    SecondLast,
    /// One-based layer index.
    Explicit(usize),
}

impl LayerPolicy {
    pub fn resolve(&self, layers: usize) -> Result<usize> {
        let upper = layers.saturating_sub(1).max(1);
        match *self {
            LayerPolicy::Fraction(f) => Ok(((f * layers as f64).round() as usize).clamp(1, upper)),
            LayerPolicy::SecondLast => {
                if layers < 2 {
                    Err(DetectError::ArchitectureMismatch(
                        "single-layer model has no second-last layer".into(),
                    ))
                } else {
                    Ok(layers - 1)
                }
            }
            LayerPolicy::Explicit(k) if (1..=layers).contains(&k) => Ok(k),
            LayerPolicy::Explicit(k) => Err(DetectError::InvalidConfig(format!(
                "layer {k} out of range for a {layers}-layer model"
            ))),
        }
    }
}

impl fmt::Display for LayerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerPolicy::Fraction(x) => write!(f, "frac:{x}"),
            LayerPolicy::SecondLast => f.write_str("second-last"),
            LayerPolicy::Explicit(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for LayerPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "second-last" {
            return Ok(LayerPolicy::SecondLast);
        }
        if let Some(frac) = s.strip_prefix("frac:") {
            return frac
                .parse()
                .ok()
                .filter(|f: &f64| f.is_finite() && *f >= 0.0)
                .map(LayerPolicy::Fraction)
                .ok_or_else(|| format!("bad layer fraction {frac:?}"));
        }
        s.parse()
            .map(LayerPolicy::Explicit)
            .map_err(|_| format!("bad layer {s:?} (expected frac:F, second-last or an index)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    pub alpha: f64,
    pub weights: BTreeMap<String, f64>,
    pub mode: Mode,
    pub suite_size: usize,
    pub layer_policy: LayerPolicy,
    /// Black-box only: compare log-probabilities (default) or raw
    /// probabilities.
    #[serde(default = "default_true")]
    pub log_approx: bool,
}

fn default_true() -> bool {
    true
}

impl DecisionConfig {
    pub fn default_for(mode: Mode) -> Self {
        DecisionConfig {
            alpha: match mode {
                Mode::Blackbox => DEFAULT_ALPHA_BLACKBOX,
                Mode::Whitebox => DEFAULT_ALPHA_WHITEBOX,
            },
            weights: default_weights(),
            mode,
            suite_size: DEFAULT_SUITE_SIZE,
            layer_policy: LayerPolicy::Fraction(DEFAULT_LAYER_FRACTION),
            log_approx: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(DetectError::InvalidConfig("alpha must be finite".into()));
        }
        if self.suite_size == 0 {
            return Err(DetectError::EmptySuite);
        }
        for (name, w) in &self.weights {
            if !METRICS.contains(&name.as_str()) {
                return Err(DetectError::InvalidConfig(format!("unknown metric {name:?}")));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(DetectError::InvalidConfig(format!(
                    "weight for {name} must be non-negative, got {w}"
                )));
            }
        }
        if !self.weights.values().any(|w| *w > 0.0) {
            return Err(DetectError::InvalidConfig("at least one weight must be positive".into()));
        }
        Ok(())
    }
}

pub fn default_weights() -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("eu".to_string(), DEFAULT_WEIGHT_EU),
        ("ac".to_string(), DEFAULT_WEIGHT_AC),
    ])
}

/// Parses `eu=1,ac=120`.
pub fn parse_weights(s: &str) -> std::result::Result<BTreeMap<String, f64>, String> {
    let mut out = BTreeMap::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("bad weight {part:?} (expected name=value)"))?;
        let k = k.trim();
        if !METRICS.contains(&k) {
            return Err(format!("unknown metric {k:?}"));
        }
        let v: f64 = v.trim().parse().map_err(|_| format!("bad weight value {v:?}"))?;
        out.insert(k.to_string(), v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: String,
    pub suspect_distance: f64,
    pub reference_distances: Vec<f64>,
    pub decision_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub suspect_id: String,
    pub victim_id: String,
    pub reference_ids: Vec<String>,
    pub metrics: Vec<MetricResult>,
    pub weighted_sum: f64,
    pub verdict: bool,
    pub mode: Mode,
    pub alpha: f64,
    pub weights: BTreeMap<String, f64>,
    pub layer_used: Option<usize>,
    pub hetero: bool,
    pub suite_size: usize,
    pub warnings: Vec<String>,
}

impl DetectionReport {
    /// Weighted decision for a different `alpha`, reusing the distances.
    pub fn weighted_sum_at(&self, alpha: f64) -> f64 {
        self.metrics
            .iter()
            .map(|m| {
                let w = self.weights.get(&m.metric).copied().unwrap_or(0.0);
                if w == 0.0 {
                    return 0.0;
                }
                let d = decision_value(m.suspect_distance, &m.reference_distances, alpha)
                    .expect("report holds at least 2 references");
                w * d
            })
            .sum()
    }

    pub fn verdict_at(&self, alpha: f64) -> bool {
        self.weighted_sum_at(alpha) > 0.0
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Indices of the `n` samples on which the victim is least confident,
/// by descending prediction entropy, ties by ascending index.
pub fn select_test_suite(victim: &MlpModel, data: &Dataset, n: usize) -> Result<Vec<usize>> {
    if n > data.len() {
        return Err(DetectError::SuiteTooLarge {
            requested: n,
            available: data.len(),
        });
    }
    let probs = victim.forward(&data.features)?.probs;
    let ent: Vec<f64> = (0..probs.rows()).map(|r| entropy(probs.row(r))).collect();
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by(|&a, &b| ent[b].total_cmp(&ent[a]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

/// First quartile, median and third quartile, linearly interpolated at
/// position `q * (len - 1)` of the sorted values.
pub fn quartiles(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.len() < 2 {
        return Err(DetectError::TooFewValues(values.len()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    };
    Ok((at(0.25), at(0.5), at(0.75)))
}

/// `median - alpha * IQR - x` over the pooled set `{x} + ys`. Positive
/// values mean the suspect is unusually close to the victim.
pub fn decision_value(x: f64, ys: &[f64], alpha: f64) -> Result<f64> {
    if ys.len() < 2 {
        return Err(DetectError::TooFewReferences(ys.len()));
    }
    let mut pool = Vec::with_capacity(ys.len() + 1);
    pool.push(x);
    pool.extend_from_slice(ys);
    let (q1, median, q3) = quartiles(&pool)?;
    Ok(median - alpha * (q3 - q1) - x)
}

/// Shared state for judging many suspects against one victim: the probe
/// set, the victim's matrices and the reference distances are computed
/// once per route.
pub struct Detector<'a> {
    victim: &'a MlpModel,
    references: &'a [MlpModel],
    cfg: DecisionConfig,
    probe: Matrix,
    homo_refs: OnceLock<std::result::Result<RouteDistances, String>>,
    hetero_refs: OnceLock<std::result::Result<RouteDistances, String>>,
}

#[derive(Debug, Clone)]
struct RouteDistances {
    per_metric: Vec<Vec<f64>>,
    warnings: Vec<String>,
}

impl<'a> Detector<'a> {
    pub fn new(
        victim: &'a MlpModel,
        references: &'a [MlpModel],
        data: &Dataset,
        cfg: DecisionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if references.len() < 2 {
            return Err(DetectError::TooFewReferences(references.len()));
        }
        let suite = select_test_suite(victim, data, cfg.suite_size)?;
        let probe = data.features.select_rows(&suite);
        Ok(Detector {
            victim,
            references,
            cfg,
            probe,
            homo_refs: OnceLock::new(),
            hetero_refs: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &DecisionConfig {
        &self.cfg
    }

    pub fn probe(&self) -> &Matrix {
        &self.probe
    }

    fn is_hetero(&self, other: &MlpModel) -> bool {
        match self.cfg.mode {
            Mode::Whitebox => other.layer_dims() != self.victim.layer_dims(),
            Mode::Blackbox => other.num_classes() != self.victim.num_classes(),
        }
    }

    fn layer_for(&self, model: &MlpModel, hetero: bool) -> Result<Option<usize>> {
        match (self.cfg.mode, hetero) {
            (Mode::Blackbox, _) => Ok(None),
            (Mode::Whitebox, false) => self.cfg.layer_policy.resolve(model.num_layers()).map(Some),
            (Mode::Whitebox, true) => LayerPolicy::SecondLast.resolve(model.num_layers()).map(Some),
        }
    }

    fn neuron_matrix(&self, model: &MlpModel, hetero: bool) -> Result<NeuronMatrix> {
        let mut h = match self.layer_for(model, hetero)? {
            Some(k) => extract_neuron_matrix(model, &self.probe, k)?,
            None => {
                let probs = model.forward(&self.probe)?.probs;
                if self.cfg.log_approx {
                    approx_neuron_matrix(&probs, PROB_FLOOR)?
                } else {
                    probability_matrix(&probs)?
                }
            }
        };
        h.model_id = model.id().to_string();
        Ok(h)
    }

    /// Per-metric distances between the victim and `other`, aligning
    /// first on the heterogeneous route.
    fn distances(&self, victim_h: &NeuronMatrix, other: &MlpModel, hetero: bool) -> Result<(Vec<f64>, Option<String>)> {
        let other_h = self.neuron_matrix(other, hetero)?;
        let (a, b, warning) = if hetero {
            let al = hetero_align(victim_h, &other_h)?;
            (al.victim, al.other, al.warning)
        } else {
            if victim_h.values.shape() != other_h.values.shape() {
                return Err(DetectError::ArchitectureMismatch(format!(
                    "{} and {} produce matrices of shape {:?} and {:?}",
                    self.victim.id(),
                    other.id(),
                    victim_h.values.shape(),
                    other_h.values.shape()
                )));
            }
            (victim_h.clone(), other_h, None)
        };
        Ok((vec![dist_eu(&a, &b)?, dist_ac(&a, &b)?], warning))
    }

    fn reference_distances(&self, hetero: bool) -> Result<&RouteDistances> {
        let cell = if hetero { &self.hetero_refs } else { &self.homo_refs };
        let computed = cell.get_or_init(|| {
            self.compute_reference_distances(hetero).map_err(|e| e.to_string())
        });
        computed
            .as_ref()
            .map_err(|e| DetectError::ArchitectureMismatch(e.clone()))
    }

    fn compute_reference_distances(&self, hetero: bool) -> Result<RouteDistances> {
        let victim_h = self.neuron_matrix(self.victim, hetero)?;
        let mut per_metric = vec![Vec::with_capacity(self.references.len()); METRICS.len()];
        let mut warnings = Vec::new();
        for r in self.references {
            if !hetero && self.is_hetero(r) {
                return Err(DetectError::ArchitectureMismatch(format!(
                    "reference {} does not match victim {} in {} mode",
                    r.id(),
                    self.victim.id(),
                    self.cfg.mode
                )));
            }
            let (d, w) = self.distances(&victim_h, r, hetero)?;
            for (slot, v) in per_metric.iter_mut().zip(d) {
                slot.push(v);
            }
            warnings.extend(w);
        }
        Ok(RouteDistances { per_metric, warnings })
    }

    pub fn detect(&self, suspect: &MlpModel) -> Result<DetectionReport> {
        let hetero = self.is_hetero(suspect);
        let refs = self.reference_distances(hetero)?;
        let victim_h = self.neuron_matrix(self.victim, hetero)?;
        let (xs, warning) = self.distances(&victim_h, suspect, hetero)?;

        let mut metrics = Vec::with_capacity(METRICS.len());
        let mut weighted_sum = 0.0;
        for (i, name) in METRICS.iter().enumerate() {
            let d = decision_value(xs[i], &refs.per_metric[i], self.cfg.alpha)?;
            let w = self.cfg.weights.get(*name).copied().unwrap_or(0.0);
            if w != 0.0 {
                weighted_sum += w * d;
            }
            metrics.push(MetricResult {
                metric: name.to_string(),
                suspect_distance: xs[i],
                reference_distances: refs.per_metric[i].clone(),
                decision_value: d,
            });
        }
        let mut warnings: Vec<String> = warning.into_iter().chain(refs.warnings.iter().cloned()).collect();
        warnings.dedup();
        Ok(DetectionReport {
            suspect_id: suspect.id().to_string(),
            victim_id: self.victim.id().to_string(),
            reference_ids: self.references.iter().map(|r| r.id().to_string()).collect(),
            metrics,
            weighted_sum,
            verdict: weighted_sum > 0.0,
            mode: self.cfg.mode,
            alpha: self.cfg.alpha,
            weights: self.cfg.weights.clone(),
            layer_used: victim_h.layer_index,
            hetero,
            suite_size: self.probe.rows(),
            warnings,
        })
    }
}

/// Runs the full pipeline for one suspect.
pub fn detect(
    victim: &MlpModel,
    suspect: &MlpModel,
    references: &[MlpModel],
    data: &Dataset,
    cfg: &DecisionConfig,
) -> Result<DetectionReport> {
    Detector::new(victim, references, data, cfg.clone())?.detect(suspect)
}

/// [`detect`] for many suspects sharing one probe set. Reports come back
/// in suspect order.
pub fn detect_batch(
    victim: &MlpModel,
    suspects: &[MlpModel],
    references: &[MlpModel],
    data: &Dataset,
    cfg: &DecisionConfig,
) -> Result<Vec<DetectionReport>> {
    let detector = Detector::new(victim, references, data, cfg.clone())?;
    suspects.par_iter().map(|s| detector.detect(s)).collect()
}
