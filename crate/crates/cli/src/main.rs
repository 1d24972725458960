use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use clausenet::config::parse_layers;
use clausenet::data::{self, Dataset, SyntheticSpec};
use clausenet::gradcheck;
use clausenet::report::{explain, render_text, REPORT_SCHEMA_VERSION};
use clausenet::train::{self, evaluate, EpochRecord};
use clausenet::{Model, MultimodalSample, RunConfig};

#[derive(Parser)]
#[command(name = "clausenet", version, about = "Learn and explain logic clauses over text-image pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-rule dataset and its sidecar.
    Synth {
        /// Synthetic spec (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write `model.json` and `history.jsonl`.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Validation set; a seeded hold-out of the training data otherwise.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print accuracy and per-class precision, recall and F1.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the metrics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explain predictions as clause reports.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated sample ids; every sample when omitted.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// JSON lines destination; the text rendering always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a small model.
    Gradcheck {
        /// Model section is used as is; defaults to a tiny configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// GCN iterations to disjoin, e.g. `0,1,2`.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.k {
            cfg.model.k = v;
        }
        if let Some(v) = self.g {
            cfg.model.g = v;
        }
        if let Some(v) = self.beta {
            cfg.model.beta = v;
        }
        if let Some(v) = &self.layers {
            cfg.model.layers = parse_layers(v)?;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.train.weight_decay = v;
        }
        if let Some(v) = self.patience {
            cfg.train.patience = v;
        }
        Ok(())
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        bail!("data file {} does not exist", path.display());
    }
    Ok(data::load_jsonl(path)?)
}

/// Takes the grid shape, patch width and vocabulary size from the dataset
/// unless the config file pins them, in which case they must agree.
fn reconcile(cfg: &mut RunConfig, explicit: &BTreeSet<String>, ds: &Dataset) -> Result<()> {
    let pin = |key: &str, slot: &mut usize, value: usize| -> Result<()> {
        if explicit.contains(key) && *slot != value {
            bail!("config sets {key} = {} but the dataset has {value}", *slot);
        }
        *slot = value;
        Ok(())
    };
    pin("z", &mut cfg.model.z, ds.meta.z)?;
    pin("f", &mut cfg.model.f, ds.meta.f)?;
    if let Some(v) = ds.meta.vocab_size.or(ds.meta.vocab.as_ref().map(Vec::len)) {
        pin("vocab_size", &mut cfg.model.vocab_size, v)?;
    }
    Ok(())
}

fn check_compatible(model: &Model, ds: &Dataset) -> Result<()> {
    if ds.meta.z != model.config.z || ds.meta.f != model.config.f {
        bail!(
            "dataset has z={} f={} but the model expects z={} f={}",
            ds.meta.z,
            ds.meta.f,
            model.config.z,
            model.config.f
        );
    }
    for s in &ds.samples {
        model.labels.index_of(&s.label)?;
    }
    Ok(())
}

fn cmd_synth(config: Option<&Path>, out: &Path, n: usize, seed: Option<u64>) -> Result<()> {
    let mut spec = match config {
        Some(p) => SyntheticSpec::load(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let samples = data::generate_synthetic(&spec, n)?;
    data::write_dataset(
        out,
        &Dataset {
            meta: spec.meta(),
            samples,
        },
    )?;
    log::info!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn cmd_train(
    overrides: &Overrides,
    config: Option<&Path>,
    data_path: &Path,
    val_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (mut cfg, explicit) = match config {
        Some(p) => RunConfig::load_with_keys(p)?,
        None => (RunConfig::default(), BTreeSet::new()),
    };
    overrides.apply(&mut cfg)?;
    let ds = load_dataset(data_path)?;
    reconcile(&mut cfg, &explicit, &ds)?;
    cfg.validate()?;

    let (train_set, val_set): (Vec<MultimodalSample>, Vec<MultimodalSample>) = match val_path {
        Some(p) => {
            let val = load_dataset(p)?;
            if val.meta != ds.meta {
                bail!("validation sidecar differs from the training sidecar");
            }
            (ds.samples.clone(), val.samples)
        }
        None => train::split(&ds.samples, cfg.train.val_fraction, cfg.train.seed)?,
    };

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let history_path = out.join("history.jsonl");
    let mut history = BufWriter::new(File::create(&history_path)?);
    let mut write_error = None;
    let mut model = Model::new(cfg.model.clone(), ds.meta.labels.clone(), cfg.train.seed)?;
    let outcome = train::train(&mut model, &train_set, &val_set, &cfg.train, |r: &EpochRecord| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(history, "{line}") {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    history.flush()?;
    model.save(&out.join("model.json"), Some(&cfg.train))?;
    println!(
        "best epoch {} with validation accuracy {:.4}; model written to {}",
        outcome.best_epoch,
        outcome.best_val_accuracy,
        out.join("model.json").display()
    );
    Ok(())
}

fn cmd_eval(model_path: &Path, data_path: &Path, out: Option<&Path>) -> Result<()> {
    let (model, _) = Model::load(model_path)?;
    let ds = load_dataset(data_path)?;
    check_compatible(&model, &ds)?;
    let metrics = evaluate(&model, &ds.samples)?;
    print!("{}", metrics.table());
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&metrics)? + "\n")?;
    }
    Ok(())
}

fn cmd_explain(model_path: &Path, data_path: &Path, ids: &[String], out: Option<&Path>) -> Result<()> {
    let (model, _) = Model::load(model_path)?;
    let ds = load_dataset(data_path)?;
    check_compatible(&model, &ds)?;
    let (chosen, skipped): (Vec<&MultimodalSample>, Vec<String>) = if ids.is_empty() {
        (ds.samples.iter().collect(), Vec::new())
    } else {
        let mut chosen = Vec::new();
        let mut skipped = Vec::new();
        for id in ids {
            match ds.samples.iter().find(|s| &s.id == id) {
                Some(s) => chosen.push(s),
                None => skipped.push(id.clone()),
            }
        }
        (chosen, skipped)
    };
    let mut json = Vec::new();
    let stdout = std::io::stdout();
    let mut text = stdout.lock();
    for s in chosen {
        let report = explain(&model, s)?;
        json.push(serde_json::to_string(&report)?);
        write!(text, "{}", render_text(&report))?;
    }
    if !skipped.is_empty() {
        writeln!(text, "skipped unknown ids: {}", skipped.join(", "))?;
    }
    json.push(serde_json::to_string(&serde_json::json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "skipped": skipped,
    }))?);
    if let Some(p) = out {
        std::fs::write(p, json.join("\n") + "\n")?;
    }
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, probes: usize, seed: u64, out: Option<&Path>) -> Result<bool> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => gradcheck::tiny_config(),
    };
    let (mut model, samples) = gradcheck::setup(&cfg, 2, seed)?;
    let report = gradcheck::grad_check(&mut model, &samples, probes, seed)?;
    println!("{}", report.summary());
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report.passed)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { config, out, n, seed } => cmd_synth(config.as_deref(), &out, n, seed)?,
        Command::Train {
            overrides,
            config,
            data,
            val,
            out,
        } => cmd_train(&overrides, config.as_deref(), &data, val.as_deref(), &out)?,
        Command::Eval { model, data, out } => cmd_eval(&model, &data, out.as_deref())?,
        Command::Explain { model, data, ids, out } => cmd_explain(&model, &data, &ids, out.as_deref())?,
        Command::Gradcheck {
            config,
            probes,
            seed,
            out,
        } => {
            if !cmd_gradcheck(config.as_deref(), probes, seed, out.as_deref())? {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
