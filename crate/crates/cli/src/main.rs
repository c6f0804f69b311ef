//! Command-line front end: dataset generation, training, evaluation,
//! inference, gradient checking, ablation sweeps, and scene rendering.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tctr_core::checkpoint;
use tctr_core::model::{self, ModelConfig};
use tctr_core::params::ParamStore;
use tctr_core::pillars::SequenceSample;
use tctr_core::synthlidar::{generate_dataset, read_dataset, write_dataset};
use tctr_harness::ablate::{ablate, render_table, Axis};
use tctr_harness::config::{RawConfig, RunConfig};
use tctr_harness::evaluate::evaluate;
use tctr_harness::gradcheck::{gradcheck_model, DEFAULT_STEP};
use tctr_harness::render::{render_frame, save_bmp};
use tctr_harness::train::{run_summary, train};

#[derive(Parser)]
#[command(name = "tctr", about = "Temporal lidar detector: training and evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides, e.g. --set train.steps=50 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed; wins over the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut raw = RawConfig::default();
        if let Some(path) = &self.config {
            raw.apply_file(path)?;
        }
        for kv in &self.sets {
            raw.apply_override(kv)?;
        }
        if let Some(seed) = self.seed {
            raw.set("seed", &seed.to_string())?;
        }
        raw.build()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the scene settings.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset and write checkpoint, log, and summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file produced by `gen`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Print detections for one sequence of a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Sequence index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Probes per parameter tensor.
        #[arg(long, default_value_t = 2)]
        probes: usize,
        /// Failure threshold on the max relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train and evaluate every variant along one ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// framework | encoder | fusion | frames
        #[arg(long)]
        axis: String,
    },
    /// Render one sequence's target frame to a BMP image.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Optional checkpoint; when given, detections are drawn in red.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Canvas size in pixels.
        #[arg(long, default_value_t = 512)]
        px: u32,
    },
    /// Print the full config schema with defaults.
    Config,
}

fn load_store(cfg: &ModelConfig, seed: u64, ckpt: &Path) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::<f32>::new();
    model::register_model_params(&mut store, cfg, seed)?;
    let entries = checkpoint::load(ckpt)?;
    checkpoint::apply(&entries, &mut store)?;
    Ok(store)
}

fn load_data(path: &Path) -> Result<Vec<SequenceSample>> {
    let data = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    if data.is_empty() {
        bail!("dataset {} holds no sequences", path.display());
    }
    Ok(data)
}

/// Writes each log line to both stdout and the on-disk run log.
struct TeeLog {
    file: fs::File,
}

impl Write for TeeLog {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()?;
        self.file.flush()
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { common } => {
            let cfg = common.resolve()?;
            fs::create_dir_all(&common.out)?;
            let data = generate_dataset(&cfg.scene, cfg.sequences)?;
            let path = common.out.join("dataset.lseq");
            write_dataset(&path, &data)?;
            let boxes: usize = data.iter().map(|s| s.frames[s.target].gt.len()).sum();
            println!(
                "wrote {} sequences ({} target boxes) to {}",
                data.len(),
                boxes,
                path.display()
            );
        }
        Command::Train { common, data } => {
            let cfg = common.resolve()?;
            fs::create_dir_all(&common.out)?;
            let samples = load_data(&data)?;
            fs::write(common.out.join("config.txt"), &cfg.canonical)?;
            let mut log = TeeLog { file: fs::File::create(common.out.join("train.log"))? };
            writeln!(log, "# config_hash={}", cfg.hash)?;
            write!(log, "{}", cfg.canonical)?;
            let result = train(&cfg, &samples, &mut log)?;
            let ckpt_path = common.out.join("model.tckp");
            checkpoint::save(&result.store, &ckpt_path)?;
            let eval = evaluate(&result.store, &cfg.model, &samples)?;
            let summary = run_summary(&cfg, &result, &eval);
            fs::write(common.out.join("run_summary.txt"), &summary)?;
            print!("{summary}");
            println!("checkpoint: {}", ckpt_path.display());
        }
        Command::Eval { common, data, ckpt } => {
            let cfg = common.resolve()?;
            fs::create_dir_all(&common.out)?;
            let samples = load_data(&data)?;
            let store = load_store(&cfg.model, cfg.seed, &ckpt)?;
            let report = evaluate(&store, &cfg.model, &samples)?;
            let text = report.render();
            fs::write(common.out.join("eval.txt"), &text)?;
            print!("{text}");
        }
        Command::Infer { common, data, ckpt, index } => {
            let cfg = common.resolve()?;
            let samples = load_data(&data)?;
            if index >= samples.len() {
                bail!("index {index} out of range, dataset holds {}", samples.len());
            }
            let store = load_store(&cfg.model, cfg.seed, &ckpt)?;
            let dets = model::detect(&store, &cfg.model, &samples[index], index as u64)?;
            println!("sequence {index}: {} detections", dets.len());
            for d in &dets {
                let b = &d.boxp;
                println!(
                    "class={} score={:.4} x={:.3} y={:.3} z={:.3} l={:.3} w={:.3} h={:.3} yaw={:.3}",
                    b.class_id, d.score, b.x, b.y, b.z, b.l, b.w, b.h, b.yaw
                );
            }
        }
        Command::Gradcheck { common, probes, tol } => {
            let cfg = common.resolve()?;
            let report = gradcheck_model(&cfg.model, &cfg.scene, cfg.seed, probes, DEFAULT_STEP)?;
            print!("{}", report.render());
            if report.max_rel >= tol {
                bail!("gradient check failed: {:.3e} >= {tol:.1e}", report.max_rel);
            }
            println!("gradient check passed ({:.3e} < {tol:.1e})", report.max_rel);
        }
        Command::Ablate { common, data, axis } => {
            let cfg = common.resolve()?;
            fs::create_dir_all(&common.out)?;
            let axis = Axis::parse(&axis)?;
            let samples = load_data(&data)?;
            let mut log = TeeLog { file: fs::File::create(common.out.join("ablate.log"))? };
            let rows = ablate(&cfg, axis, &samples, &mut log)?;
            let table = render_table(axis, &rows, cfg.model.classes);
            fs::write(common.out.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::Render { common, data, ckpt, index, px } => {
            let cfg = common.resolve()?;
            fs::create_dir_all(&common.out)?;
            let samples = load_data(&data)?;
            if index >= samples.len() {
                bail!("index {index} out of range, dataset holds {}", samples.len());
            }
            let sample = &samples[index];
            let dets = match ckpt {
                Some(path) => {
                    let store = load_store(&cfg.model, cfg.seed, &path)?;
                    model::detect(&store, &cfg.model, sample, index as u64)?
                }
                None => Vec::new(),
            };
            let img = render_frame(&sample.frames[sample.target], &dets, &cfg.model.grid, px)?;
            let path = common.out.join(format!("seq{index}.bmp"));
            save_bmp(&img, &path)?;
            println!("wrote {} ({} detections drawn)", path.display(), dets.len());
        }
        Command::Config => {
            print!("{}", RawConfig::describe());
        }
    }
    Ok(())
}
