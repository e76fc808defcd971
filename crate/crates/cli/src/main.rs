//! `nfard`: build model zoos, extract neuron matrices, detect reuse and
//! run zoo-wide evaluations.
//!
//! Exit status: 0 on success (and a negative `detect` verdict), 2 when
//! `detect` reports reuse, 1 on any error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nfard::detector::{self, parse_weights, DecisionConfig, LayerPolicy, Mode};
use nfard::eval::{self, default_alphas, DEFAULT_SWEEP_SIZES};
use nfard::metrics::{approx_neuron_matrix, extract_neuron_matrix, PROB_FLOOR};
use nfard::model::{load_model, Dataset};
use nfard::zoo::{self, Zoo, ZooConfig, ZooScale};

#[derive(Parser, Debug)]
#[command(name = "nfard", version, about = "Neuron-functionality based model reuse detection")]
struct Cli {
    /// File of `key = value` lines setting any long flag (e.g. `alpha = 1.2`,
    /// `no-log = true`). Flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model zoo and write it with its manifest.
    ZooBuild {
        #[arg(long, default_value = "zoo")]
        out: PathBuf,
        /// Master seed.
        #[arg(long, env = "NFARD_SEED")]
        seed: Option<u64>,
        /// default or smoke
        #[arg(long)]
        scale: Option<ZooScale>,
        /// JSON zoo configuration replacing the bundled one.
        #[arg(long, value_name = "FILE")]
        zoo_config: Option<PathBuf>,
    },
    /// Decide whether one suspect model reuses a victim.
    Detect {
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        suspect: PathBuf,
        /// Reference models (at least two).
        #[arg(long = "refs", num_args = 1.., required = true)]
        refs: Vec<PathBuf>,
        /// Dataset CSV the test suite is drawn from.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        decision: DecisionArgs,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate detection over a whole zoo.
    Evaluate {
        #[arg(long, default_value = "zoo")]
        zoo: PathBuf,
        #[command(flatten)]
        decision: DecisionArgs,
        /// Write the JSON summary here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// TPR/FPR over a sweep of alpha values.
    Roc {
        #[arg(long, default_value = "zoo")]
        zoo: PathBuf,
        #[command(flatten)]
        decision: DecisionArgs,
        /// Comma separated; defaults to a grid from -1e6 to 1e6.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alphas: Option<Vec<f64>>,
        /// CSV output (`alpha,tpr,fpr`); stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a model's neuron matrix on a dataset as CSV.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// frac:F, second-last or a one-based layer index.
        #[arg(long)]
        layer: Option<LayerPolicy>,
        /// Emit log-probabilities instead of a hidden layer.
        #[arg(long)]
        blackbox: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// F1 as a function of the test-suite size.
    Sweep {
        #[arg(long, default_value = "zoo")]
        zoo: PathBuf,
        #[command(flatten)]
        decision: DecisionArgs,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// CSV output (`n,mode,f1`); stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct DecisionArgs {
    /// black or white [default: black]
    #[arg(long)]
    mode: Option<Mode>,
    /// [default: 0.85 black, 3.5 white]
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Test-suite size [default: 1000].
    #[arg(long)]
    n: Option<usize>,
    /// frac:F, second-last or K [default: frac:0.25]
    #[arg(long)]
    layer: Option<LayerPolicy>,
    /// e.g. eu=1,ac=120 [default]
    #[arg(long)]
    weights: Option<String>,
    /// Black-box: compare probabilities instead of log-probabilities.
    #[arg(long)]
    no_log: bool,
}

/// `key = value` settings from `--config`.
#[derive(Debug, Default)]
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("{}:{}: expected key = value", path.display(), i + 1);
            };
            map.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.0
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow::anyhow!("config key {key}: {e}")))
            .transpose()
    }
}

impl DecisionArgs {
    fn resolve(&self, file: &FileConfig) -> Result<DecisionConfig> {
        let mode = match self.mode {
            Some(m) => m,
            None => file.get("mode")?.unwrap_or(Mode::Blackbox),
        };
        let mut cfg = DecisionConfig::default_for(mode);
        if let Some(a) = self.alpha.or(file.get("alpha")?) {
            cfg.alpha = a;
        }
        if let Some(n) = self.n.or(file.get("n")?) {
            cfg.suite_size = n;
        }
        if let Some(l) = self.layer.or(file.get("layer")?) {
            cfg.layer_policy = l;
        }
        if let Some(w) = self.weights.clone().or(file.get("weights")?) {
            cfg.weights = parse_weights(&w).map_err(anyhow::Error::msg)?;
        }
        let no_log = self.no_log || file.get::<bool>("no-log")?.unwrap_or(false);
        cfg.log_approx = !no_log;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_zoo(dir: &Path) -> Result<Zoo> {
    Zoo::load(dir).with_context(|| format!("loading zoo from {}", dir.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::ZooBuild {
            out,
            seed,
            scale,
            zoo_config,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => file.get("seed")?.unwrap_or(zoo::DEFAULT_MASTER_SEED),
            };
            let scale = match scale {
                Some(s) => s,
                None => file.get("scale")?.unwrap_or(ZooScale::Default),
            };
            let cfg = match zoo_config {
                Some(p) => ZooConfig::from_json(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => scale.config(),
            };
            let manifest = zoo::build_zoo_with(&out, seed, scale, &cfg)?;
            println!(
                "wrote {} models ({} victims, {} surrogates, {} references) to {}",
                manifest.models.len(),
                manifest.count(zoo::Role::Victim),
                manifest.count(zoo::Role::Surrogate),
                manifest.count(zoo::Role::Reference),
                out.join("manifest.json").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Detect {
            victim,
            suspect,
            refs,
            data,
            decision,
            report,
        } => {
            let cfg = decision.resolve(&file)?;
            let victim = load_model(&victim)?;
            let suspect = load_model(&suspect)?;
            let refs = refs.iter().map(|p| load_model(p)).collect::<Result<Vec<_>, _>>()?;
            let data = Dataset::load(&data)?;
            let rep = detector::detect(&victim, &suspect, &refs, &data, &cfg)?;
            let json = serde_json::to_string_pretty(&rep)? + "\n";
            if let Some(p) = report {
                fs::write(&p, &json).with_context(|| format!("writing {}", p.display()))?;
            }
            println!(
                "suspect={} victim={} mode={} alpha={} weighted_sum={:.6e} verdict={}",
                rep.suspect_id,
                rep.victim_id,
                rep.mode,
                rep.alpha,
                rep.weighted_sum,
                if rep.verdict { "positive" } else { "negative" }
            );
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            Ok(if rep.verdict { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Evaluate { zoo, decision, json } => {
            let cfg = decision.resolve(&file)?;
            let summary = eval::evaluate(&load_zoo(&zoo)?, &cfg)?;
            if let Some(p) = json {
                fs::write(&p, summary.to_json()).with_context(|| format!("writing {}", p.display()))?;
            }
            print!("{}", summary.render());
            Ok(ExitCode::SUCCESS)
        }
        Command::Roc {
            zoo,
            decision,
            alphas,
            out,
        } => {
            let cfg = decision.resolve(&file)?;
            let alphas = alphas.unwrap_or_else(default_alphas);
            let curve = eval::roc(&load_zoo(&zoo)?, &cfg, &alphas)?;
            write_or_print(out.as_deref(), &curve.to_csv())?;
            eprintln!("mode={} auc={:.6}", curve.mode, curve.auc);
            Ok(ExitCode::SUCCESS)
        }
        Command::Extract {
            model,
            data,
            layer,
            blackbox,
            out,
        } => {
            let model = load_model(&model)?;
            let data = Dataset::load(&data)?;
            let mut h = if blackbox {
                approx_neuron_matrix(&model.forward(&data.features)?.probs, PROB_FLOOR)?
            } else {
                let policy = match layer {
                    Some(l) => l,
                    None => file.get("layer")?.unwrap_or(LayerPolicy::Fraction(detector::DEFAULT_LAYER_FRACTION)),
                };
                extract_neuron_matrix(&model, &data.features, policy.resolve(model.num_layers())?)?
            };
            h.model_id = model.id().to_string();
            h.save(&out)?;
            println!("wrote {}x{} {} matrix to {}", h.samples(), h.width(), h.source, out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            zoo,
            decision,
            sizes,
            out,
        } => {
            let cfg = decision.resolve(&file)?;
            let sizes = sizes.unwrap_or_else(|| DEFAULT_SWEEP_SIZES.to_vec());
            let points = eval::suite_size_sweep(&load_zoo(&zoo)?, &cfg, &sizes)?;
            write_or_print(out.as_deref(), &eval::sweep_csv(&points))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
