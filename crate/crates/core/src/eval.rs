//! Zoo-wide evaluation: detection tables, ROC sweeps over alpha and
//! test-suite size sweeps.
//!
//! Protocol: references of every (arch, task) group are split into two
//! folds. Fold-1 models serve as decision references, fold-2 models are
//! negative suspects, each judged once. Every suspect is compared against
//! the fold-1 models of its own group.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{DecisionConfig, DetectError, DetectionReport, Detector, Mode};
use crate::model::MlpModel;
use crate::zoo::{Role, Zoo};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid zoo: {0}")]
    Zoo(String),
    #[error("need at least 2 alpha values, got {0}")]
    TooFewAlphas(usize),
    #[error("no suspects to evaluate")]
    Empty,
    #[error(transparent)]
    Detect(#[from] DetectError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Label used for independently trained suspects.
pub const INDEPENDENT: &str = "independent";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspectOutcome {
    pub victim_id: String,
    pub suspect_id: String,
    /// Reuse technique, or [`INDEPENDENT`].
    pub kind: String,
    /// Ground truth: derived from the victim.
    pub reused: bool,
    pub report: DetectionReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; `0 +- 0` for an empty slice.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeRow {
    pub kind: String,
    pub detected: usize,
    pub total: usize,
    pub eu: MeanStd,
    pub ac: MeanStd,
    pub decision: MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean with `0/0 = 0`.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: Mode,
    pub config: DecisionConfig,
    pub rows: Vec<TypeRow>,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub outcomes: Vec<SuspectOutcome>,
}

impl EvalSummary {
    pub fn from_outcomes(config: DecisionConfig, outcomes: Vec<SuspectOutcome>) -> Self {
        Self::at_alpha(config.alpha, config, outcomes)
    }

    /// Re-scores stored outcomes with another alpha.
    pub fn rescore(&self, alpha: f64) -> Self {
        let config = DecisionConfig {
            alpha,
            ..self.config.clone()
        };
        Self::at_alpha(alpha, config, self.outcomes.clone())
    }

    fn at_alpha(alpha: f64, config: DecisionConfig, mut outcomes: Vec<SuspectOutcome>) -> Self {
        for o in &mut outcomes {
            if o.report.alpha != alpha {
                o.report.weighted_sum = o.report.weighted_sum_at(alpha);
                o.report.verdict = o.report.weighted_sum > 0.0;
                o.report.alpha = alpha;
                for m in &mut o.report.metrics {
                    m.decision_value = crate::detector::decision_value(m.suspect_distance, &m.reference_distances, alpha)
                        .expect("reports hold at least 2 references");
                }
            }
        }
        let mut confusion = Confusion::default();
        let mut by_kind: BTreeMap<&str, Vec<&SuspectOutcome>> = BTreeMap::new();
        for o in &outcomes {
            match (o.reused, o.report.verdict) {
                (true, true) => confusion.tp += 1,
                (true, false) => confusion.fn_ += 1,
                (false, true) => confusion.fp += 1,
                (false, false) => confusion.tn += 1,
            }
            by_kind.entry(o.kind.as_str()).or_default().push(o);
        }
        let metric = |os: &[&SuspectOutcome], name: &str| -> MeanStd {
            let v: Vec<f64> = os
                .iter()
                .filter_map(|o| o.report.metrics.iter().find(|m| m.metric == name))
                .map(|m| m.suspect_distance)
                .collect();
            MeanStd::of(&v)
        };
        let mut rows: Vec<TypeRow> = by_kind
            .iter()
            .map(|(kind, os)| TypeRow {
                kind: kind.to_string(),
                detected: os.iter().filter(|o| o.report.verdict).count(),
                total: os.len(),
                eu: metric(os, "eu"),
                ac: metric(os, "ac"),
                decision: MeanStd::of(&os.iter().map(|o| o.report.weighted_sum).collect::<Vec<_>>()),
            })
            .collect();
        // Reuse types in technique order, independents last.
        rows.sort_by_key(|r| (r.kind == INDEPENDENT, technique_rank(&r.kind), r.kind.clone()));
        let (precision, recall) = (confusion.precision(), confusion.recall());
        EvalSummary {
            mode: config.mode,
            config,
            rows,
            confusion,
            precision,
            recall,
            f1: f1(precision, recall),
            outcomes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mode={} alpha={} n={} weights={} log={}",
            self.mode,
            self.config.alpha,
            self.config.suite_size,
            self.config
                .weights
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(","),
            self.config.log_approx
        );
        let _ = writeln!(
            s,
            "{:<14} {:>9} {:>24} {:>24} {:>24}",
            "type", "detected", "dist_eu", "dist_ac", "decision"
        );
        let ms = |m: &MeanStd| format!("{:.4e} +- {:.2e}", m.mean, m.std);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>9} {:>24} {:>24} {:>24}",
                r.kind,
                format!("{}/{}", r.detected, r.total),
                ms(&r.eu),
                ms(&r.ac),
                ms(&r.decision)
            );
        }
        let c = &self.confusion;
        let _ = writeln!(
            s,
            "TP={} FP={} TN={} FN={}  precision={:.4} recall={:.4} F1={:.4}",
            c.tp, c.fp, c.tn, c.fn_, self.precision, self.recall, self.f1
        );
        s
    }
}

fn technique_rank(kind: &str) -> usize {
    crate::zoo::Technique::ALL
        .iter()
        .position(|t| t.name() == kind)
        .unwrap_or(usize::MAX)
}

/// One victim/suspect pairing with its reference group.
#[derive(Debug, Clone)]
struct Trial<'z> {
    victim: &'z str,
    suspect: &'z str,
    kind: String,
    reused: bool,
    group: (&'z str, &'z str),
}

fn trials(zoo: &Zoo) -> Result<Vec<Trial<'_>>> {
    let models = &zoo.manifest.models;
    let victims: Vec<_> = models.iter().filter(|m| m.role == Role::Victim).collect();
    let Some(first) = victims.first() else {
        return Err(EvalError::Zoo("no victims in manifest".into()));
    };
    let mut out = Vec::new();
    for m in models {
        let (victim, kind, reused) = match m.role {
            Role::Surrogate => {
                let lineage = m.lineage.as_deref().unwrap_or_default();
                let kind = m.technique.map(|t| t.name().to_string()).unwrap_or_default();
                (lineage, kind, true)
            }
            // Each negative is judged once, against the victim sharing its
            // architecture when there is one.
            Role::Reference if m.fold == Some(2) => {
                let v = victims.iter().find(|v| v.arch == m.arch).unwrap_or(first);
                (v.id.as_str(), INDEPENDENT.to_string(), false)
            }
            _ => continue,
        };
        out.push(Trial {
            victim,
            suspect: &m.id,
            kind,
            reused,
            group: (&m.arch, &m.task),
        });
    }
    if out.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(out)
}

/// Fold-1 references per (arch, task) group, in manifest order.
fn reference_groups(zoo: &Zoo) -> BTreeMap<(&str, &str), Vec<MlpModel>> {
    let mut groups: BTreeMap<(&str, &str), Vec<MlpModel>> = BTreeMap::new();
    for m in &zoo.manifest.models {
        if m.role == Role::Reference && m.fold == Some(1) {
            groups
                .entry((m.arch.as_str(), m.task.as_str()))
                .or_default()
                .push(zoo.model(&m.id).clone());
        }
    }
    groups
}

/// Runs detection for every (victim, suspect) pair in the zoo.
pub fn evaluate(zoo: &Zoo, cfg: &DecisionConfig) -> Result<EvalSummary> {
    cfg.validate()?;
    let trials = trials(zoo)?;
    let groups = reference_groups(zoo);
    let fold2: BTreeSet<&str> = zoo
        .manifest
        .models
        .iter()
        .filter(|m| m.fold == Some(2))
        .map(|m| m.id.as_str())
        .collect();

    let victim_ids: BTreeSet<&str> = trials.iter().map(|t| t.victim).collect();
    let mut detectors = BTreeMap::new();
    for v in &victim_ids {
        let victim = zoo.model(v);
        let data = zoo
            .data
            .get(&zoo.record(v).expect("victim has a record").task)
            .ok_or_else(|| EvalError::Zoo(format!("no data for victim {v}")))?;
        for (key, refs) in &groups {
            if refs.iter().any(|r| fold2.contains(r.id())) {
                return Err(EvalError::Zoo(format!("fold-2 model among references of {key:?}")));
            }
            detectors.insert((*v, *key), Detector::new(victim, refs, data, cfg.clone())?);
        }
    }

    let outcomes = trials
        .par_iter()
        .map(|t| {
            let det = detectors
                .get(&(t.victim, t.group))
                .ok_or_else(|| EvalError::Zoo(format!("no fold-1 references for group {:?}", t.group)))?;
            Ok(SuspectOutcome {
                victim_id: t.victim.to_string(),
                suspect_id: t.suspect.to_string(),
                kind: t.kind.clone(),
                reused: t.reused,
                report: det.detect(zoo.model(t.suspect))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary::from_outcomes(cfg.clone(), outcomes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub alpha: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub mode: Mode,
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,tpr,fpr\n");
        for p in &self.points {
            let _ = writeln!(s, "{:?},{:?},{:?}", p.alpha, p.tpr, p.fpr);
        }
        s
    }
}

/// The default alpha grid: both extremes plus a fine sweep around the
/// operating points.
pub fn default_alphas() -> Vec<f64> {
    let mut a = vec![-1e6, -100.0, -50.0, -20.0, -10.0];
    a.extend((-20..=60).map(|i| i as f64 * 0.25));
    a.extend([0.85, 20.0, 50.0, 100.0, 1e6]);
    a.sort_by(f64::total_cmp);
    a
}

/// Trapezoidal area under (fpr, tpr) points, anchored at (0,0) and (1,1).
pub fn auc(points: &[RocPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.push((0.0, 0.0));
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// TPR/FPR per alpha from one evaluation's stored distances.
pub fn roc_from(summary: &EvalSummary, alphas: &[f64]) -> Result<RocCurve> {
    if alphas.len() < 2 {
        return Err(EvalError::TooFewAlphas(alphas.len()));
    }
    if summary.outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    let points: Vec<RocPoint> = alphas
        .iter()
        .map(|&alpha| {
            let mut c = Confusion::default();
            for o in &summary.outcomes {
                match (o.reused, o.report.verdict_at(alpha)) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fn_ += 1,
                    (false, true) => c.fp += 1,
                    (false, false) => c.tn += 1,
                }
            }
            RocPoint {
                alpha,
                tpr: c.recall(),
                fpr: c.fpr(),
            }
        })
        .collect();
    Ok(RocCurve {
        mode: summary.mode,
        auc: auc(&points),
        points,
    })
}

pub fn roc(zoo: &Zoo, cfg: &DecisionConfig, alphas: &[f64]) -> Result<RocCurve> {
    if alphas.len() < 2 {
        return Err(EvalError::TooFewAlphas(alphas.len()));
    }
    roc_from(&evaluate(zoo, cfg)?, alphas)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub mode: Mode,
    pub f1: f64,
}

pub const DEFAULT_SWEEP_SIZES: [usize; 6] = [50, 100, 200, 400, 800, 1000];

pub fn suite_size_sweep(zoo: &Zoo, cfg: &DecisionConfig, sizes: &[usize]) -> Result<Vec<SweepPoint>> {
    sizes
        .iter()
        .map(|&n| {
            let cfg = DecisionConfig {
                suite_size: n,
                ..cfg.clone()
            };
            Ok(SweepPoint {
                n,
                mode: cfg.mode,
                f1: evaluate(zoo, &cfg)?.f1,
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("n,mode,f1\n");
    for p in points {
        let _ = writeln!(s, "{},{},{:?}", p.n, p.mode, p.f1);
    }
    s
}
