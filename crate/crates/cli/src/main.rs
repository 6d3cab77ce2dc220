use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sanet::checkpoint;
use sanet::config::RunConfig;
use sanet::dataset::Dataset;
use sanet::eval::{self, RunSpec};
use sanet::model::{Head, Model};
use sanet::preproc::RawFrame;
use sanet::world::{Perturbation, PerturbationKind, World};
use serde_json::json;

/// Environment variable naming the root for run directories.
const RUN_ROOT_ENV: &str = "SANET_RUN_DIR";

#[derive(Parser)]
#[command(name = "sanet", version, about = "State-action recognition on a synthetic RGB-D world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a labelled dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `data.samples`.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write the empty-scene background of every vantage as PPM/PGM images.
    CaptureBackground {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset (JSON report on stdout).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Re-render every item under this perturbation.
        #[arg(long)]
        perturbation: Option<String>,
    },
    /// Train and score the full model and each single-component ablation.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint under each standard perturbation.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Stratified k-fold cross-validation.
    Kfold {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run items one at a time and report per-frame latency (JSON lines).
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        /// Untimed frames run first to reach steady state.
        #[arg(long, default_value_t = 10)]
        warmup: usize,
    },
    /// Print the header of a dataset or checkpoint file.
    Inspect { path: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

/// `<root>/<config hash>`, created with the resolved config saved inside.
fn run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    let dir = root.join(format!("{:016x}", cfg.hash()));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

fn out_path(explicit: &Option<PathBuf>, cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.clone()),
        None => Ok(run_dir(cfg)?.join(name)),
    }
}

fn open_data(path: &Path) -> Result<Dataset> {
    Dataset::open(path).with_context(|| format!("opening dataset {}", path.display()))
}

fn open_checkpoint(path: &Path, ds: &Dataset) -> Result<Model<f32>> {
    checkpoint::load(path, Some(&ds.space)).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn parse_perturbation(s: &str) -> Result<Perturbation> {
    let (name, mag) = match s.split_once('=') {
        Some((n, m)) => (n, Some(m.parse::<f64>().with_context(|| format!("perturbation magnitude {m:?}"))?)),
        None => (s, None),
    };
    let Some(kind) = PerturbationKind::ALL.into_iter().find(|k| k.name() == name) else {
        let names: Vec<_> = PerturbationKind::ALL.iter().map(|k| k.name()).collect();
        bail!("unknown perturbation {name:?} (expected one of {})", names.join(", "));
    };
    let mut p = Perturbation::standard(kind);
    if let Some(m) = mag {
        p.magnitude = m;
    }
    p.validate()?;
    Ok(p)
}

/// Model hyper-parameters come from the checkpoint; only prep settings from the config.
fn prep_for(model: &Model<f32>, cfg: &RunConfig) -> sanet::dataset::PrepOptions {
    RunSpec {
        geometry: model.geometry,
        ablation: model.ablation,
        ..cfg.run_spec()
    }
    .opts()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out, samples } => {
            let mut cfg = load_config(&config)?;
            if let Some(n) = samples {
                cfg.data.samples = n;
                cfg.validate()?;
            }
            let path = out_path(&out, &cfg, "data.sand")?;
            let ds = Dataset::generate(&cfg.world, &cfg.data)?;
            ds.save(&path).with_context(|| format!("writing {}", path.display()))?;
            print_json(&json!({ "path": path, "report": ds.report() }))
        }
        Cmd::CaptureBackground { config, out_dir } => {
            let cfg = load_config(&config)?;
            let dir = match out_dir {
                Some(d) => d,
                None => run_dir(&cfg)?,
            };
            std::fs::create_dir_all(&dir)?;
            let world = World::new(cfg.world.clone())?;
            let mut written = Vec::new();
            for v in 0..world.vantage_count() {
                let f = world.background(v);
                let rgb = dir.join(format!("background_v{v}.ppm"));
                let depth = dir.join(format!("background_v{v}_depth.pgm"));
                std::fs::write(&rgb, ppm(f))?;
                std::fs::write(&depth, depth_pgm(f))?;
                written.push(rgb);
                written.push(depth);
            }
            print_json(&json!({ "written": written }))
        }
        Cmd::Train { config, data, out } => {
            let cfg = load_config(&config)?;
            let ds = open_data(&data)?;
            let path = out_path(&out, &cfg, "model.sanc")?;
            let idx: Vec<usize> = (0..ds.len()).collect();
            let (model, report) = cfg.run_spec().fit(&ds, &idx)?;
            checkpoint::save(&model, &path).with_context(|| format!("writing {}", path.display()))?;
            print_json(&json!({ "path": path, "report": report }))
        }
        Cmd::Eval {
            checkpoint,
            data,
            config,
            perturbation,
        } => {
            let cfg = load_config(&config)?;
            let ds = open_data(&data)?;
            let model = open_checkpoint(&checkpoint, &ds)?;
            let pert = perturbation.as_deref().map(parse_perturbation).transpose()?;
            let idx: Vec<usize> = (0..ds.len()).collect();
            let mut report = eval::evaluate(&model, &ds, &idx, pert, &prep_for(&model, &cfg), cfg.eval.batch)?;
            // Timing varies run to run; keep the report reproducible.
            report.ms_per_item = 0.0;
            print_json(&report)
        }
        Cmd::Ablate { config, data } => {
            let cfg = load_config(&config)?;
            let ds = open_data(&data)?;
            let (train_idx, test_idx) = eval::train_test_split(&ds.labels(), &ds.primary_heads(), cfg.eval.test_fraction, cfg.eval.fold_seed)?;
            let report = eval::run_ablation_suite(
                &ds,
                &train_idx,
                &test_idx,
                &cfg.run_spec(),
                &eval::standard_ablations(),
                &cfg.eval.ablation_seeds,
            )?;
            print_json(&report)
        }
        Cmd::Robustness { checkpoint, data, config } => {
            let cfg = load_config(&config)?;
            let ds = open_data(&data)?;
            let model = open_checkpoint(&checkpoint, &ds)?;
            let idx: Vec<usize> = (0..ds.len()).collect();
            let perts: Vec<Perturbation> = PerturbationKind::ALL.into_iter().map(Perturbation::standard).collect();
            let rows = eval::robustness(&model, &ds, &idx, &perts, &prep_for(&model, &cfg), cfg.eval.batch)?;
            let summary: Vec<_> = rows
                .iter()
                .map(|r| {
                    let acc: serde_json::Map<_, _> = r
                        .eval
                        .heads
                        .iter()
                        .map(|h| (h.head.name().to_string(), json!(h.accuracy)))
                        .collect();
                    json!({ "perturbation": r.perturbation.kind.name(), "magnitude": r.perturbation.magnitude, "missed": r.eval.missed, "accuracy": acc })
                })
                .collect();
            print_json(&summary)
        }
        Cmd::Kfold { config, data } => {
            let cfg = load_config(&config)?;
            let ds = open_data(&data)?;
            let report = eval::cross_validate(&ds, &cfg.run_spec(), cfg.eval.folds, cfg.eval.fold_seed)?;
            print_json(&report)
        }
        Cmd::Infer {
            checkpoint,
            data,
            config,
            frames,
            warmup,
        } => {
            let cfg = load_config(&config)?;
            let ds = open_data(&data)?;
            if ds.is_empty() {
                bail!("dataset {} is empty", data.display());
            }
            let model = open_checkpoint(&checkpoint, &ds)?;
            let opts = prep_for(&model, &cfg);
            for k in 0..warmup {
                eval::infer_item(&model, &ds, k % ds.len(), &opts)?;
            }
            let mut out = std::io::stdout().lock();
            let mut lat = Vec::with_capacity(frames);
            for k in 0..frames {
                let i = (warmup + k) % ds.len();
                let (pred, ms) = eval::infer_item(&model, &ds, i, &opts)?;
                lat.push(ms);
                let pred = pred.map(|p| {
                    Head::ALL
                        .into_iter()
                        .map(|h| (h.name().to_string(), json!(p.get(h))))
                        .collect::<serde_json::Map<_, _>>()
                });
                writeln!(out, "{}", json!({ "frame": k, "item": i, "latency_ms": ms, "prediction": pred }))?;
            }
            let n = lat.len().max(1) as f64;
            let mean = lat.iter().sum::<f64>() / n;
            let var = lat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            writeln!(out, "{}", json!({ "frames": lat.len(), "mean_latency_ms": mean, "latency_variance_ms2": var }))?;
            Ok(())
        }
        Cmd::Inspect { path } => inspect(&path),
    }
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    match bytes.get(..4) {
        Some(m) if m == sanet::dataset::DATASET_MAGIC => {
            let ds = Dataset::from_bytes(path, &bytes)?;
            print_json(&json!({
                "kind": "dataset",
                "seed": ds.seed,
                "world": ds.world.config,
                "space": ds.space,
                "report": ds.report(),
            }))
        }
        Some(m) if m == checkpoint::CHECKPOINT_MAGIC => {
            let model = checkpoint::from_bytes(path, &bytes, None)?;
            let params: Vec<_> = model
                .params
                .entries()
                .iter()
                .map(|e| json!({ "name": e.name, "shape": e.tensor.shape() }))
                .collect();
            print_json(&json!({
                "kind": "checkpoint",
                "space": model.space,
                "geometry": model.geometry,
                "ablation": model.ablation,
                "seed": model.seed,
                "scalars": model.params.scalar_count(),
                "params": params,
            }))
        }
        _ => bail!("{}: not a dataset or checkpoint (unknown magic)", path.display()),
    }
}

fn ppm(f: &RawFrame) -> Vec<u8> {
    let (w, h) = f.extent();
    let mut v = format!("P6\n{w} {h}\n255\n").into_bytes();
    v.extend_from_slice(&f.rgb);
    v
}

/// 16-bit PGM with depth in millimetres.
fn depth_pgm(f: &RawFrame) -> Vec<u8> {
    let (w, h) = f.extent();
    let mut v = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &d in &f.depth {
        let mm = (d as f64 * 1000.0).round().clamp(0.0, 65535.0) as u16;
        v.extend_from_slice(&mm.to_be_bytes());
    }
    v
}
