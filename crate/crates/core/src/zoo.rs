//! A desk-sized model zoo: victims, surrogates derived from them by seven
//! reuse techniques, and independently trained reference models.
//!
//! Everything is a pure function of the master seed. Each model gets its
//! own seed derived from the master seed and the model id, so models can
//! be trained in parallel without changing the result.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::model::{
    fit, load_model, read_file, save_model, softmax_rows, write_file, Dataset, MlpModel,
    ModelError, Targets, TrainConfig, WeightMask,
};

const DEFAULT_CONFIG: &str = include_str!("../defaults/zoo.json");

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("task mismatch: {0}")]
    TaskMismatch(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ZooError>;

/// Hyperparameters shared by every training stage; the seed is filled in
/// per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub l2: f64,
}

impl StageConfig {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
            freeze_mask: None,
            l2: self.l2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Standard deviation of cluster centres; samples have unit spread.
    pub cluster_scale: f64,
    pub clusters_per_class: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        ZooConfig::default().synth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub id: String,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub id: String,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    pub d_in: usize,
    pub train_samples: usize,
    pub query_samples: usize,
    pub synth: SynthParams,
    pub tasks: Vec<TaskConfig>,
    pub victim_task: String,
    pub transfer_task: String,
    pub archs: Vec<ArchConfig>,
    pub references_per_group: usize,
    pub train: StageConfig,
    pub finetune: StageConfig,
    pub retrain: StageConfig,
    pub prune: StageConfig,
    /// Head-only warm-up for the re-initialized layer before `retrain`.
    #[serde(default)]
    pub retrain_head: Option<StageConfig>,
    /// Head-only warm-up before `transfer` unfreezes all layers.
    #[serde(default)]
    pub transfer_head: Option<StageConfig>,
    pub transfer: StageConfig,
    pub distill: StageConfig,
    pub extract: StageConfig,
    pub temperature: f64,
}

impl Default for ZooConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_CONFIG).expect("bundled zoo config parses")
    }
}

impl ZooConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ZooError::InvalidArgument(format!("zoo config: {e}")))
    }

    /// Shrunk variant for quick checks: fewer references, samples and
    /// epochs, same structure.
    pub fn smoke() -> Self {
        let mut cfg = Self::default();
        cfg.train_samples = 400;
        cfg.query_samples = 400;
        cfg.references_per_group = 4;
        for stage in [
            &mut cfg.train,
            &mut cfg.finetune,
            &mut cfg.retrain,
            &mut cfg.prune,
            &mut cfg.transfer,
            &mut cfg.distill,
            &mut cfg.extract,
        ] {
            stage.epochs = stage.epochs.div_ceil(4);
        }
        for head in [&mut cfg.retrain_head, &mut cfg.transfer_head].into_iter().flatten() {
            head.epochs = head.epochs.div_ceil(4);
        }
        cfg
    }

    fn task(&self, id: &str) -> Result<&TaskConfig> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| ZooError::InvalidArgument(format!("unknown task {id:?}")))
    }

    pub fn layer_dims(&self, arch: &ArchConfig, classes: usize) -> Vec<usize> {
        let mut dims = vec![self.d_in];
        dims.extend(&arch.hidden);
        dims.push(classes);
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZooScale {
    Default,
    Smoke,
}

impl ZooScale {
    pub fn config(self) -> ZooConfig {
        match self {
            ZooScale::Default => ZooConfig::default(),
            ZooScale::Smoke => ZooConfig::smoke(),
        }
    }
}

impl FromStr for ZooScale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "default" => Ok(ZooScale::Default),
            "smoke" => Ok(ZooScale::Smoke),
            other => Err(format!("unknown scale {other:?} (expected default or smoke)")),
        }
    }
}

impl fmt::Display for ZooScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZooScale::Default => "default",
            ZooScale::Smoke => "smoke",
        })
    }
}

/// 64-bit FNV-1a.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Master seed used when none is given.
pub const DEFAULT_MASTER_SEED: u64 = 2023;

/// SplitMix64 finalizer over the master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut z = master ^ fnv1a(label);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian-cluster classification data. Cluster centres come from
/// `task_seed`, sample noise from `sample_seed`, so two calls with the same
/// task seed draw from the same distribution. Labels cycle through the
/// classes, so class counts differ by at most one.
pub fn synth_samples(
    params: &SynthParams,
    task_seed: u64,
    sample_seed: u64,
    num_classes: usize,
    d_in: usize,
    n: usize,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(ZooError::InvalidArgument(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if params.clusters_per_class == 0 {
        return Err(ZooError::InvalidArgument("clusters_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    let centres: Vec<Vec<f64>> = (0..num_classes * params.clusters_per_class)
        .map(|_| (0..d_in).map(|_| params.cluster_scale * gaussian(&mut rng)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut data = Vec::with_capacity(n * d_in);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let sub = (i / num_classes) % params.clusters_per_class;
        let centre = &centres[class * params.clusters_per_class + sub];
        data.extend(centre.iter().map(|c| c + gaussian(&mut rng)));
        labels.push(class);
    }
    let features = Matrix::new(n, d_in, data).map_err(ModelError::from)?;
    Ok(Dataset::new(features, labels, num_classes)?)
}

/// [`synth_samples`] with default cluster parameters and one seed.
pub fn synth_dataset(seed: u64, num_classes: usize, d_in: usize, n: usize) -> Result<Dataset> {
    synth_samples(
        &SynthParams::default(),
        seed,
        derive_seed(seed, "samples"),
        num_classes,
        d_in,
        n,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Last,
    All,
}

fn check_task(model: &MlpModel, data: &Dataset) -> Result<()> {
    if data.input_dim() != model.input_dim() {
        return Err(ZooError::TaskMismatch(format!(
            "data has {} features, model expects {}",
            data.input_dim(),
            model.input_dim()
        )));
    }
    if data.num_classes != model.num_classes() {
        return Err(ZooError::TaskMismatch(format!(
            "data has {} classes, model outputs {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    Ok(())
}

fn scoped(cfg: &TrainConfig, model: &MlpModel, scope: Scope) -> TrainConfig {
    let layers = model.num_layers();
    TrainConfig {
        freeze_mask: match scope {
            Scope::Last => Some((0..layers).map(|k| k + 1 < layers).collect()),
            Scope::All => None,
        },
        ..cfg.clone()
    }
}

/// Continues training the victim on labeled data.
pub fn finetune(victim: &MlpModel, data: &Dataset, scope: Scope, cfg: &TrainConfig) -> Result<MlpModel> {
    check_task(victim, data)?;
    let cfg = scoped(cfg, victim, scope);
    Ok(fit(victim.clone(), &data.features, Targets::Labels(&data.labels), &cfg, None)?)
}

/// Re-initializes the last layer from `cfg.seed`, then fine-tunes.
///
/// With `head`, the fresh layer is first trained alone with that schedule.
pub fn retrain(
    victim: &MlpModel,
    data: &Dataset,
    scope: Scope,
    head: Option<&TrainConfig>,
    cfg: &TrainConfig,
) -> Result<MlpModel> {
    check_task(victim, data)?;
    let mut start = victim.clone();
    start.reinit_layer(start.num_layers(), derive_seed(cfg.seed, "head"));
    let start = warm_head(start, data, head)?;
    let cfg = scoped(cfg, &start, scope);
    Ok(fit(start, &data.features, Targets::Labels(&data.labels), &cfg, None)?)
}

fn warm_head(model: MlpModel, data: &Dataset, head: Option<&TrainConfig>) -> Result<MlpModel> {
    match head {
        Some(h) => {
            let h = scoped(h, &model, Scope::Last);
            Ok(fit(model, &data.features, Targets::Labels(&data.labels), &h, None)?)
        }
        None => Ok(model),
    }
}

/// Zeroes the `ratio` fraction of smallest-magnitude weights across all
/// layers (biases untouched). Returns the pruned model and its keep-mask.
pub fn prune_weights(model: &MlpModel, ratio: f64) -> Result<(MlpModel, WeightMask)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(ZooError::InvalidArgument(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    let mut all: Vec<(f64, usize, usize)> = model
        .weights()
        .iter()
        .enumerate()
        .flat_map(|(k, w)| w.data().iter().enumerate().map(move |(i, v)| (v.abs(), k, i)))
        .collect();
    let cut = (ratio * all.len() as f64).ceil() as usize;
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut mask: WeightMask = model.weights().iter().map(|w| vec![true; w.data().len()]).collect();
    for &(_, k, i) in &all[..cut] {
        mask[k][i] = false;
    }
    let mut pruned = model.clone();
    for (w, m) in pruned.weights_mut().iter_mut().zip(&mask) {
        for (v, keep) in w.data_mut().iter_mut().zip(m) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok((pruned, mask))
}

/// Global magnitude pruning followed by masked fine-tuning of all layers.
pub fn prune(victim: &MlpModel, data: &Dataset, ratio: f64, cfg: &TrainConfig) -> Result<MlpModel> {
    check_task(victim, data)?;
    let (pruned, mask) = prune_weights(victim, ratio)?;
    Ok(fit(pruned, &data.features, Targets::Labels(&data.labels), cfg, Some(&mask))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    F16,
    Q8,
}

/// Simulated post-training quantization; parameters stay `f64` but only
/// take values the quantized format can represent.
pub fn quantize(victim: &MlpModel, mode: QuantMode) -> MlpModel {
    let mut out = victim.clone();
    match mode {
        QuantMode::F16 => {
            let round = |v: &mut f64| *v = f16::from_f64(*v).to_f64();
            for w in out.weights_mut() {
                w.data_mut().iter_mut().for_each(round);
            }
            for b in out.biases_mut() {
                b.iter_mut().for_each(round);
            }
        }
        QuantMode::Q8 => {
            for w in out.weights_mut() {
                quantize_q8(w.data_mut());
            }
        }
    }
    out
}

/// Per-tensor affine 8-bit quantization with `min` mapped to level 0.
fn quantize_q8(values: &mut [f64]) {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !(max > min) {
        return;
    }
    let scale = (max - min) / 255.0;
    for v in values.iter_mut() {
        let level = ((*v - min) / scale).round().clamp(0.0, 255.0);
        *v = min + level * scale;
    }
}

/// Keeps the victim's hidden layers, attaches a fresh head for the new
/// task and trains everything on it. With `head`, the new layer is first
/// trained alone so the copied layers start from a fitted head.
pub fn transfer(
    victim: &MlpModel,
    new_data: &Dataset,
    head: Option<&TrainConfig>,
    cfg: &TrainConfig,
) -> Result<MlpModel> {
    if new_data.input_dim() != victim.input_dim() {
        return Err(ZooError::TaskMismatch(format!(
            "new task has {} features, victim expects {}",
            new_data.input_dim(),
            victim.input_dim()
        )));
    }
    let mut start = victim.clone();
    start.replace_head(new_data.num_classes, derive_seed(cfg.seed, "head"));
    let start = warm_head(start, new_data, head)?;
    Ok(fit(start, &new_data.features, Targets::Labels(&new_data.labels), cfg, None)?)
}

fn check_student(victim: &MlpModel, student_dims: &[usize], inputs: &Matrix) -> Result<()> {
    if student_dims.last() != Some(&victim.num_classes()) {
        return Err(ZooError::Dimension(format!(
            "student outputs {:?}, victim {}",
            student_dims.last(),
            victim.num_classes()
        )));
    }
    if student_dims.first() != Some(&victim.input_dim()) || inputs.cols() != victim.input_dim() {
        return Err(ZooError::Dimension(format!(
            "student input {:?}, victim input {}, data width {}",
            student_dims.first(),
            victim.input_dim(),
            inputs.cols()
        )));
    }
    Ok(())
}

/// Soft-label distillation: the student matches the victim's
/// temperature-softened outputs (no ground-truth labels).
pub fn distill(
    victim: &MlpModel,
    student_dims: &[usize],
    data: &Dataset,
    temperature: f64,
    cfg: &TrainConfig,
) -> Result<MlpModel> {
    check_student(victim, student_dims, &data.features)?;
    if !(temperature > 0.0) {
        return Err(ZooError::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let teacher = softmax_rows(&victim.forward(&data.features)?.logits, temperature);
    let student = MlpModel::init(student_dims, cfg.seed)?;
    Ok(fit(
        student,
        &data.features,
        Targets::Soft {
            probs: &teacher,
            temperature,
        },
        cfg,
        None,
    )?)
}

/// Model stealing from query access: the student is trained on the
/// victim's output probabilities over attacker-chosen inputs.
pub fn extract_steal(
    victim: &MlpModel,
    student_dims: &[usize],
    queries: &Matrix,
    cfg: &TrainConfig,
) -> Result<MlpModel> {
    if queries.rows() == 0 {
        return Err(ZooError::InvalidArgument("empty query set".into()));
    }
    check_student(victim, student_dims, queries)?;
    let answers = victim.forward(queries)?.probs;
    let student = MlpModel::init(student_dims, cfg.seed)?;
    Ok(fit(
        student,
        queries,
        Targets::Soft {
            probs: &answers,
            temperature: 1.0,
        },
        cfg,
        None,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Victim,
    Surrogate,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Technique {
    FinetuneLast,
    FinetuneAll,
    RetrainLast,
    RetrainAll,
    Prune03,
    Prune06,
    QuantF16,
    QuantQ8,
    Transfer,
    Distill,
    Extract,
}

impl Technique {
    pub const ALL: [Technique; 11] = [
        Technique::FinetuneLast,
        Technique::FinetuneAll,
        Technique::RetrainLast,
        Technique::RetrainAll,
        Technique::Prune03,
        Technique::Prune06,
        Technique::QuantF16,
        Technique::QuantQ8,
        Technique::Transfer,
        Technique::Distill,
        Technique::Extract,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Technique::FinetuneLast => "finetune-last",
            Technique::FinetuneAll => "finetune-all",
            Technique::RetrainLast => "retrain-last",
            Technique::RetrainAll => "retrain-all",
            Technique::Prune03 => "prune-0.3",
            Technique::Prune06 => "prune-0.6",
            Technique::QuantF16 => "quant-f16",
            Technique::QuantQ8 => "quant-q8",
            Technique::Transfer => "transfer",
            Technique::Distill => "distill",
            Technique::Extract => "extract",
        }
    }

    /// Keeps the victim's architecture and task.
    pub fn is_homogeneous(self) -> bool {
        !matches!(self, Technique::Transfer | Technique::Distill | Technique::Extract)
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub path: String,
    pub role: Role,
    pub lineage: Option<String>,
    pub technique: Option<Technique>,
    pub arch: String,
    pub task: String,
    pub seed: u64,
    /// References only: 1 = decision references, 2 = negative suspects.
    pub fold: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub generator_seed: u64,
    pub num_classes: usize,
    pub d_in: usize,
    pub samples: usize,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    pub master_seed: u64,
    pub scale: ZooScale,
    pub tasks: Vec<TaskRecord>,
    pub models: Vec<ModelRecord>,
}

impl ZooManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeMap::new();
        for m in &self.models {
            if ids.insert(m.id.as_str(), m).is_some() {
                return Err(ZooError::Manifest(format!("duplicate id {:?}", m.id)));
            }
        }
        let task_ids: Vec<&str> = self.tasks.iter().map(|t| t.id.as_str()).collect();
        for m in &self.models {
            if !task_ids.contains(&m.task.as_str()) {
                return Err(ZooError::Manifest(format!("{} uses unknown task {:?}", m.id, m.task)));
            }
            match m.role {
                Role::Surrogate => {
                    let lineage = m
                        .lineage
                        .as_deref()
                        .ok_or_else(|| ZooError::Manifest(format!("surrogate {} has no lineage", m.id)))?;
                    match ids.get(lineage) {
                        Some(v) if v.role == Role::Victim => {}
                        _ => {
                            return Err(ZooError::Manifest(format!(
                                "surrogate {} has lineage {lineage:?} which is not a victim",
                                m.id
                            )))
                        }
                    }
                    if m.technique.is_none() {
                        return Err(ZooError::Manifest(format!("surrogate {} has no technique", m.id)));
                    }
                }
                Role::Reference => {
                    if m.lineage.is_some() {
                        return Err(ZooError::Manifest(format!("reference {} has a lineage", m.id)));
                    }
                    if !matches!(m.fold, Some(1) | Some(2)) {
                        return Err(ZooError::Manifest(format!("reference {} has no fold", m.id)));
                    }
                }
                Role::Victim => {
                    if m.lineage.is_some() {
                        return Err(ZooError::Manifest(format!("victim {} has a lineage", m.id)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn count(&self, role: Role) -> usize {
        self.models.iter().filter(|m| m.role == role).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ZooManifest =
            serde_json::from_str(text).map_err(|e| ZooError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// A loaded zoo: manifest, every model and every task dataset.
#[derive(Debug, Clone)]
pub struct Zoo {
    pub manifest: ZooManifest,
    pub models: BTreeMap<String, MlpModel>,
    pub data: BTreeMap<String, Dataset>,
}

impl Zoo {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = ZooManifest::from_json(&read_file(&dir.join("manifest.json"))?)?;
        let models = manifest
            .models
            .par_iter()
            .map(|r| load_model(&dir.join(&r.path)).map(|m| (r.id.clone(), m)))
            .collect::<std::result::Result<BTreeMap<_, _>, _>>()?;
        let mut data = BTreeMap::new();
        for t in &manifest.tasks {
            data.insert(t.id.clone(), Dataset::load(&dir.join(&t.path))?);
        }
        Ok(Zoo { manifest, models, data })
    }

    pub fn record(&self, id: &str) -> Option<&ModelRecord> {
        self.manifest.models.iter().find(|m| m.id == id)
    }

    pub fn model(&self, id: &str) -> &MlpModel {
        &self.models[id]
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ZooError + '_ {
    move |source| ZooError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One model to build, in manifest order.
struct Job {
    record: ModelRecord,
    build: Build,
}

enum Build {
    Victim { dims: Vec<usize> },
    Reference { dims: Vec<usize> },
    Surrogate { victim: String, technique: Technique, other_dims: Vec<usize>, transfer_dims: Vec<usize> },
}

/// Trains the whole zoo and writes it under `out_dir`.
pub fn build_zoo(out_dir: &Path, master_seed: u64, scale: ZooScale) -> Result<ZooManifest> {
    build_zoo_with(out_dir, master_seed, scale, &scale.config())
}

pub fn build_zoo_with(out_dir: &Path, master_seed: u64, scale: ZooScale, cfg: &ZooConfig) -> Result<ZooManifest> {
    fs::create_dir_all(out_dir.join("models")).map_err(io_err(out_dir))?;
    fs::create_dir_all(out_dir.join("data")).map_err(io_err(out_dir))?;
    let (manifest, models, data) = generate(master_seed, scale, cfg)?;
    for t in &manifest.tasks {
        data[&t.id].save(&out_dir.join(&t.path))?;
    }
    for r in &manifest.models {
        save_model(&models[&r.id], &out_dir.join(&r.path))?;
    }
    write_file(&out_dir.join("manifest.json"), &manifest.to_json())?;
    Ok(manifest)
}

/// Builds the zoo in memory.
pub fn generate(
    master_seed: u64,
    scale: ZooScale,
    cfg: &ZooConfig,
) -> Result<(ZooManifest, BTreeMap<String, MlpModel>, BTreeMap<String, Dataset>)> {
    if cfg.archs.len() < 2 {
        return Err(ZooError::InvalidArgument("need two architectures for cross-arch reuse".into()));
    }
    if cfg.references_per_group < 2 {
        return Err(ZooError::InvalidArgument("need at least 2 references per group".into()));
    }
    let victim_task = cfg.task(&cfg.victim_task)?.clone();
    let transfer_task = cfg.task(&cfg.transfer_task)?.clone();

    let mut tasks = Vec::new();
    let mut data = BTreeMap::new();
    for t in &cfg.tasks {
        let seed = derive_seed(master_seed, &format!("task/{}", t.id));
        let ds = synth_samples(&cfg.synth, seed, derive_seed(seed, "train"), t.num_classes, cfg.d_in, cfg.train_samples)?;
        tasks.push(TaskRecord {
            id: t.id.clone(),
            generator_seed: seed,
            num_classes: t.num_classes,
            d_in: cfg.d_in,
            samples: cfg.train_samples,
            path: format!("data/{}.csv", t.id),
        });
        data.insert(t.id.clone(), ds);
    }
    // Attacker queries: same input distribution as the victim's task, fresh draws.
    let victim_task_seed = derive_seed(master_seed, &format!("task/{}", victim_task.id));
    let queries = synth_samples(
        &cfg.synth,
        victim_task_seed,
        derive_seed(victim_task_seed, "queries"),
        victim_task.num_classes,
        cfg.d_in,
        cfg.query_samples,
    )?
    .features;

    let record = |id: String, role: Role, arch: &str, task: &str| ModelRecord {
        path: format!("models/{id}.json"),
        seed: derive_seed(master_seed, &id),
        id,
        role,
        lineage: None,
        technique: None,
        arch: arch.to_string(),
        task: task.to_string(),
        fold: None,
    };

    let mut victims = Vec::new();
    let mut surrogates = Vec::new();
    for (ai, arch) in cfg.archs.iter().enumerate() {
        let vid = format!("{}-victim", arch.id);
        victims.push(Job {
            record: record(vid.clone(), Role::Victim, &arch.id, &victim_task.id),
            build: Build::Victim {
                dims: cfg.layer_dims(arch, victim_task.num_classes),
            },
        });
        let other = &cfg.archs[(ai + 1) % cfg.archs.len()];
        for t in Technique::ALL {
            let task = if t == Technique::Transfer { &transfer_task.id } else { &victim_task.id };
            let surrogate_arch = if matches!(t, Technique::Distill | Technique::Extract) {
                &other.id
            } else {
                &arch.id
            };
            let mut rec = record(format!("{}-{}", arch.id, t.name()), Role::Surrogate, surrogate_arch, task);
            rec.lineage = Some(vid.clone());
            rec.technique = Some(t);
            surrogates.push(Job {
                record: rec,
                build: Build::Surrogate {
                    victim: vid.clone(),
                    technique: t,
                    other_dims: cfg.layer_dims(other, victim_task.num_classes),
                    transfer_dims: cfg.layer_dims(arch, transfer_task.num_classes),
                },
            });
        }
    }
    let mut references = Vec::new();
    for arch in &cfg.archs {
        for t in &cfg.tasks {
            for i in 0..cfg.references_per_group {
                let mut rec = record(format!("ref-{}-{}-{i:02}", arch.id, t.id), Role::Reference, &arch.id, &t.id);
                rec.fold = Some(if i < cfg.references_per_group.div_ceil(2) { 1 } else { 2 });
                references.push(Job {
                    record: rec,
                    build: Build::Reference {
                        dims: cfg.layer_dims(arch, t.num_classes),
                    },
                });
            }
        }
    }

    let train_plain = |job: &Job, dims: &[usize]| -> Result<MlpModel> {
        let ds = &data[&job.record.task];
        Ok(crate::model::train(ds, dims, &cfg.train.with_seed(job.record.seed))?)
    };
    let tag = |m: MlpModel, r: &ModelRecord| -> MlpModel {
        let mut m = m
            .with_meta("id", r.id.clone())
            .with_meta("role", format!("{:?}", r.role).to_lowercase())
            .with_meta("arch", r.arch.clone())
            .with_meta("task", r.task.clone())
            .with_meta("seed", r.seed.to_string());
        if let Some(t) = r.technique {
            m = m.with_meta("technique", t.name());
        }
        if let Some(l) = &r.lineage {
            m = m.with_meta("lineage", l.clone());
        }
        m
    };

    let mut models: BTreeMap<String, MlpModel> = victims
        .par_iter()
        .chain(references.par_iter())
        .map(|job| {
            let dims = match &job.build {
                Build::Victim { dims } | Build::Reference { dims } => dims,
                Build::Surrogate { .. } => unreachable!("surrogates are built from victims"),
            };
            Ok((job.record.id.clone(), tag(train_plain(job, dims)?, &job.record)))
        })
        .collect::<Result<_>>()?;

    let built: Vec<(String, MlpModel)> = surrogates
        .par_iter()
        .map(|job| {
            let Build::Surrogate { victim, technique, other_dims, transfer_dims } = &job.build else {
                unreachable!("only surrogate jobs here")
            };
            let v = &models[victim];
            let ds = &data[&victim_task.id];
            let seed = job.record.seed;
            let retrain_head = cfg.retrain_head.as_ref().map(|h| h.with_seed(seed));
            let m = match technique {
                Technique::FinetuneLast => finetune(v, ds, Scope::Last, &cfg.finetune.with_seed(seed))?,
                Technique::FinetuneAll => finetune(v, ds, Scope::All, &cfg.finetune.with_seed(seed))?,
                Technique::RetrainLast => retrain(v, ds, Scope::Last, retrain_head.as_ref(), &cfg.retrain.with_seed(seed))?,
                Technique::RetrainAll => retrain(v, ds, Scope::All, retrain_head.as_ref(), &cfg.retrain.with_seed(seed))?,
                Technique::Prune03 => prune(v, ds, 0.3, &cfg.prune.with_seed(seed))?,
                Technique::Prune06 => prune(v, ds, 0.6, &cfg.prune.with_seed(seed))?,
                Technique::QuantF16 => quantize(v, QuantMode::F16),
                Technique::QuantQ8 => quantize(v, QuantMode::Q8),
                Technique::Transfer => {
                    let head = cfg.transfer_head.as_ref().map(|h| h.with_seed(seed));
                    let m = transfer(v, &data[&transfer_task.id], head.as_ref(), &cfg.transfer.with_seed(seed))?;
                    debug_assert_eq!(m.layer_dims(), transfer_dims.as_slice());
                    m
                }
                Technique::Distill => distill(v, other_dims, ds, cfg.temperature, &cfg.distill.with_seed(seed))?,
                Technique::Extract => extract_steal(v, other_dims, &queries, &cfg.extract.with_seed(seed))?,
            };
            Ok((job.record.id.clone(), tag(m, &job.record)))
        })
        .collect::<Result<_>>()?;
    models.extend(built);

    let records: Vec<ModelRecord> = victims
        .into_iter()
        .chain(surrogates)
        .chain(references)
        .map(|j| j.record)
        .collect();
    let manifest = ZooManifest {
        master_seed,
        scale,
        tasks,
        models: records,
    };
    manifest.validate()?;
    Ok((manifest, models, data))
}

pub fn default_out_dir() -> PathBuf {
    PathBuf::from("zoo")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::train;

    fn small_task(seed: u64) -> Dataset {
        synth_dataset(seed, 4, 6, 200).unwrap()
    }

    fn stage(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
        StageConfig {
            epochs,
            learning_rate: lr,
            batch_size: 16,
            l2: 0.0,
        }
        .with_seed(seed)
    }

    fn victim(data: &Dataset) -> MlpModel {
        train(data, &[6, 12, 8, 4], &stage(30, 0.05, 1)).unwrap()
    }

    #[test]
    fn bundled_config_matches_declared_zoo() {
        let cfg = ZooConfig::default();
        assert_eq!(cfg.d_in, 20);
        assert_eq!(cfg.task("task-a").unwrap().num_classes, 8);
        assert_eq!(cfg.task("task-b").unwrap().num_classes, 5);
        assert_eq!(cfg.layer_dims(&cfg.archs[0], 8), vec![20, 32, 16, 8]);
        assert_eq!(cfg.layer_dims(&cfg.archs[1], 8), vec![20, 64, 32, 8]);
        assert_eq!(cfg.references_per_group, 10);
        assert_eq!(cfg.temperature, 4.0);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_dataset(5, 4, 10, 100).unwrap();
        assert_eq!(a, synth_dataset(5, 4, 10, 100).unwrap());
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|l| **l == c).count(), 25);
        }
        let b = synth_dataset(5, 3, 10, 100).unwrap();
        let counts: Vec<usize> = (0..3).map(|c| b.labels.iter().filter(|l| **l == c).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(synth_dataset(5, 1, 10, 10).is_err());
    }

    #[test]
    fn finetune_contracts() {
        let data = small_task(1);
        let v = victim(&data);
        assert_eq!(finetune(&v, &data, Scope::Last, &stage(0, 0.01, 2)).unwrap(), v);
        let ft = finetune(&v, &data, Scope::Last, &stage(3, 0.01, 2)).unwrap();
        assert_eq!(ft.weights()[..2], v.weights()[..2]);
        assert_eq!(ft.biases()[..2], v.biases()[..2]);
        assert_ne!(ft.weights()[2], v.weights()[2]);
        let other = synth_dataset(1, 3, 6, 30).unwrap();
        assert!(matches!(
            finetune(&v, &other, Scope::All, &stage(1, 0.01, 2)),
            Err(ZooError::TaskMismatch(_))
        ));
    }

    #[test]
    fn retrain_reinitializes_head() {
        let data = small_task(2);
        let v = victim(&data);
        let cfg = stage(0, 0.01, 3);
        let r = retrain(&v, &data, Scope::Last, None, &cfg).unwrap();
        assert_eq!(r.weights()[..2], v.weights()[..2]);
        let mut fresh = v.clone();
        fresh.reinit_layer(3, derive_seed(3, "head"));
        assert_eq!(r, fresh);
        assert_ne!(r.weights()[2], v.weights()[2]);
    }

    #[test]
    fn pruning_masks_and_ratios() {
        let data = small_task(3);
        let v = victim(&data);
        let (same, _) = prune_weights(&v, 0.0).unwrap();
        assert_eq!(same, v);
        let total: usize = v.weights().iter().map(|w| w.data().len()).sum();
        let p = prune(&v, &data, 0.6, &stage(5, 0.01, 4)).unwrap();
        let zeros: usize = p
            .weights()
            .iter()
            .map(|w| w.data().iter().filter(|x| **x == 0.0).count())
            .sum();
        assert!(zeros as f64 >= 0.6 * total as f64, "{zeros}/{total}");
        assert!(prune_weights(&v, 1.0).is_err());
        assert!(prune_weights(&v, -0.1).is_err());
    }

    #[test]
    fn pruning_uses_a_global_threshold() {
        let w1 = Matrix::new(2, 2, vec![0.1, -5.0, 0.2, 4.0]).unwrap();
        let w2 = Matrix::new(1, 2, vec![-0.05, 3.0]).unwrap();
        let m = MlpModel::new(vec![2, 2, 1], vec![w1, w2], vec![vec![0.0; 2], vec![0.0]], BTreeMap::new()).unwrap();
        let (p, mask) = prune_weights(&m, 0.5).unwrap();
        assert_eq!(p.weights()[0].data(), &[0.0, -5.0, 0.0, 4.0]);
        assert_eq!(p.weights()[1].data(), &[0.0, 3.0]);
        assert_eq!(mask[1], vec![false, true]);
    }

    #[test]
    fn quantization_examples() {
        let w = Matrix::new(1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        let m = MlpModel::new(vec![3, 1], vec![w], vec![vec![0.25]], BTreeMap::new()).unwrap();
        assert_eq!(quantize(&m, QuantMode::F16), m);
        assert_eq!(quantize(&m, QuantMode::Q8), m);

        let v = victim(&small_task(4));
        let f16m = quantize(&v, QuantMode::F16);
        for (a, b) in f16m.weights().iter().zip(v.weights()) {
            assert!(a.max_abs_diff(b) <= 1e-3);
            assert!(a.data().iter().all(|x| f16::from_f64(*x).to_f64() == *x));
        }
        let q = quantize(&v, QuantMode::Q8);
        for (a, b) in q.weights().iter().zip(v.weights()) {
            let (lo, hi) = b.data().iter().fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(*x), h.max(*x)));
            let scale = (hi - lo) / 255.0;
            assert!(a.max_abs_diff(b) <= scale / 2.0 * (1.0 + 1e-9));
            let levels: std::collections::BTreeSet<u64> = a.data().iter().map(|x| ((x - lo) / scale).round() as u64).collect();
            assert!(levels.len() <= 256);
        }
        assert_eq!(q.biases(), v.biases());
    }

    #[test]
    fn transfer_contracts() {
        let data = small_task(5);
        let v = victim(&data);
        let new_task = synth_dataset(77, 3, 6, 90).unwrap();
        let t0 = transfer(&v, &new_task, None, &stage(0, 0.01, 5)).unwrap();
        assert_eq!(t0.weights()[..2], v.weights()[..2]);
        assert_eq!(t0.num_classes(), 3);
        let bad = synth_dataset(77, 3, 5, 30).unwrap();
        assert!(matches!(transfer(&v, &bad, None, &stage(1, 0.01, 5)), Err(ZooError::TaskMismatch(_))));
    }

    #[test]
    fn distill_contracts() {
        let data = small_task(6);
        let v = victim(&data);
        assert!(matches!(
            distill(&v, &[6, 5, 3], &data, 4.0, &stage(1, 0.05, 6)),
            Err(ZooError::Dimension(_))
        ));
        let s = distill(&v, &[6, 5, 4], &data, 4.0, &stage(2, 0.05, 6)).unwrap();
        assert_eq!(s.layer_dims(), &[6, 5, 4]);
    }

    #[test]
    fn extraction_needs_queries() {
        let data = small_task(7);
        let v = victim(&data);
        assert!(matches!(
            extract_steal(&v, &[6, 5, 4], &Matrix::zeros(0, 6), &stage(1, 0.05, 7)),
            Err(ZooError::InvalidArgument(_))
        ));
        let s = extract_steal(&v, &[6, 5, 4], &data.features, &stage(2, 0.05, 7)).unwrap();
        assert_eq!(s.num_classes(), 4);
    }

    #[test]
    fn manifest_validation_catches_bad_lineage() {
        let (mut manifest, _, _) = generate(3, ZooScale::Smoke, &tiny_config()).unwrap();
        manifest.validate().unwrap();
        let idx = manifest.models.iter().position(|m| m.role == Role::Surrogate).unwrap();
        manifest.models[idx].lineage = Some("nobody".into());
        assert!(manifest.validate().is_err());
        manifest.models[idx].lineage = Some(manifest.models[0].id.clone());
        let dup = manifest.models[0].clone();
        manifest.models.push(dup);
        assert!(manifest.validate().is_err());
    }

    fn tiny_config() -> ZooConfig {
        let mut cfg = ZooConfig::smoke();
        cfg.train_samples = 60;
        cfg.query_samples = 60;
        cfg.references_per_group = 2;
        for s in [
            &mut cfg.train,
            &mut cfg.finetune,
            &mut cfg.retrain,
            &mut cfg.prune,
            &mut cfg.transfer,
            &mut cfg.distill,
            &mut cfg.extract,
        ] {
            s.epochs = 1;
        }
        cfg
    }

    #[test]
    fn generation_counts_and_determinism() {
        let cfg = tiny_config();
        let (m1, models1, data1) = generate(9, ZooScale::Smoke, &cfg).unwrap();
        assert_eq!(m1.count(Role::Victim), 2);
        assert_eq!(m1.count(Role::Surrogate), 22);
        assert_eq!(m1.count(Role::Reference), 8);
        let (m2, models2, data2) = generate(9, ZooScale::Smoke, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(models1, models2);
        assert_eq!(data1, data2);
        let distill = models1.get("mlp-s-distill").unwrap();
        assert_eq!(distill.layer_dims(), &[20, 64, 32, 8]);
        assert_eq!(models1["mlp-l-transfer"].layer_dims(), &[20, 64, 32, 5]);
    }
}
