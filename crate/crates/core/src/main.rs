use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pen::imagecore::{index_dataset, index_unlabeled, load_image, Split};
use pen::metrics::evaluate_dir_with;
use pen::network::set_deterministic;
use pen::pipeline::{
    benchmark_iterations, init_state, load_checkpoint, load_params, parse_override, run_inference,
    run_stage, PenConfig, Stage,
};
use pen::synthgen::{generate_toy_dataset, procedural_background};
use pen::{PenError, Result};

#[derive(Parser)]
#[command(name = "pen", version, about = "Progressive scene-text erasing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PenConfig> {
        let overrides = self
            .set
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        PenConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic paired dataset (images/, gt/, stroke/, meta.jsonl).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Directory of text-free background images; procedural ones otherwise.
        #[arg(long)]
        backgrounds: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run one training stage.
    Train {
        /// stroke-init, 1, 2 or 3.
        #[arg(long)]
        stage: Stage,
        /// Paired dataset root (images/ + gt/).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Unlabeled images for stage 2.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        /// Checkpoint to continue from (earlier stage or partial run of this one).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for checkpoints and the loss CSV.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
        /// Ignore the stage-order check.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Erase text from every image in a directory.
    Erase {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Also write every intermediate pass.
        #[arg(long)]
        intermediates: bool,
        #[arg(long)]
        deterministic: bool,
    },
    /// Compare predictions with ground truth by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time progressive erasing for several iteration counts.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images to time; random images of `--size` otherwise.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,6")]
        iters: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Synth {
            out,
            count,
            backgrounds,
            seed,
            cfg,
        } => {
            let cfg = cfg.load()?;
            let seed = seed.unwrap_or(cfg.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bgs = match backgrounds {
                Some(dir) => index_unlabeled(&dir)?
                    .entries
                    .iter()
                    .map(|e| Ok(load_image(&e.original)?.to_rgb()))
                    .collect::<Result<Vec<_>>>()?,
                None => (0..8)
                    .map(|_| procedural_background(cfg.synth.size, cfg.synth.size, &mut rng))
                    .collect(),
            };
            let index = generate_toy_dataset(&bgs, count, &out, &cfg.synth, &mut rng)?;
            println!("wrote {} pairs to {}", index.len(), out.display());
            Ok(0)
        }
        Command::Train {
            stage,
            data,
            unlabeled,
            resume,
            out,
            seed,
            deterministic,
            force,
            cfg,
        } => {
            let mut cfg = cfg.load()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.deterministic |= deterministic;
            set_deterministic(cfg.deterministic);
            let mut tc = cfg.train_config(stage);
            tc.checkpoint_dir = Some(out.clone());
            let device = Device::Cpu;
            let state = match &resume {
                Some(path) => load_checkpoint(
                    path,
                    Some(&tc.net),
                    (tc.lr_gen, tc.betas_gen),
                    (tc.lr_disc, tc.betas_disc),
                    &device,
                )?,
                None => init_state(&tc, &device)?,
            };
            let data = data.map(|d| index_dataset(&d, Split::Train)).transpose()?;
            let unlabeled = unlabeled.map(index_unlabeled).transpose()?;
            let state = run_stage(&tc, data.as_ref(), unlabeled.as_ref(), state, force)?;
            let last = state
                .loss_history
                .iter()
                .rev()
                .find(|r| r.step % 2 == 0 || !matches!(stage, Stage::Stage1 | Stage::Stage3));
            if let Some(rec) = last {
                let summary: Vec<String> = rec
                    .values
                    .iter()
                    .map(|(k, v)| format!("{k}={v:.5}"))
                    .collect();
                println!(
                    "{} finished after {} steps: {}",
                    stage,
                    state.step,
                    summary.join(" ")
                );
            }
            println!(
                "checkpoint: {}",
                out.join(format!("{}.safetensors", stage.tag())).display()
            );
            Ok(0)
        }
        Command::Erase {
            checkpoint,
            input,
            out,
            iterations,
            intermediates,
            deterministic,
        } => {
            set_deterministic(deterministic);
            let params = load_params(&checkpoint, None, &Device::Cpu)?;
            let k = iterations.unwrap_or(params.config().iterations);
            if k == 0 {
                return Err(PenError::Config("--iterations must be at least 1".into()));
            }
            let n = run_inference(&params, &input, &out, k, intermediates)?;
            println!(
                "erased {n} images with {k} iterations into {}",
                out.display()
            );
            Ok(0)
        }
        Command::Eval { pred, gt, out, cfg } => {
            let cfg = cfg.load()?;
            let report = evaluate_dir_with(&pred, &gt, &cfg.metrics)?;
            println!("{}", report.table());
            if let Some(path) = out {
                report.save(&path)?;
                println!("report: {}", path.display());
            }
            for s in &report.skipped {
                eprintln!("skipped {}: {}", s.id, s.reason);
            }
            Ok(if report.skipped.is_empty() { 0 } else { 3 })
        }
        Command::Bench {
            checkpoint,
            input,
            iters,
            size,
            count,
            repeats,
        } => {
            let params = load_params(&checkpoint, None, &Device::Cpu)?;
            let images = match input {
                Some(dir) => load_dir(&dir)?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    (0..count.max(1))
                        .map(|_| {
                            pen::imagecore::ImageTensor::from_fn(size, size, 3, |_, _, _| {
                                rng.random::<f64>()
                            })
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            };
            let rows = benchmark_iterations(&params, &images, &iters, repeats)?;
            println!("{:>10} {:>12} {:>10}", "iterations", "mean ms", "std ms");
            for r in rows {
                println!(
                    "{:>10} {:>12.2} {:>10.2}",
                    r.iterations, r.mean_ms, r.std_ms
                );
            }
            Ok(0)
        }
    }
}

fn load_dir(dir: &Path) -> Result<Vec<pen::imagecore::ImageTensor>> {
    index_unlabeled(dir)?
        .entries
        .iter()
        .map(|e| load_image(&e.original))
        .collect()
}
