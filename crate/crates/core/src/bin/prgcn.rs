//! Command-line front end: synthetic data, training, refinement, evaluation,
//! gradient checking, and timing.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prgcn::gradcheck;
use prgcn::harness::dataset::{self, SynthOptions};
use prgcn::harness::{PrGcn, RunConfig};
use prgcn::pointcloud::ply::{read_ply, write_ply};
use prgcn::pointcloud::synth::{sample_canonical, ShapeKind};
use prgcn::{Error, Result};

#[derive(Parser)]
#[command(name = "prgcn", about = "6D pose estimation on depth point clouds", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that builds a model.
#[derive(Args)]
struct ConfigArgs {
    /// Config file, one `key = value` per line, `#` comments.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides, applied after the file: `--set key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Error::InvalidInput(format!("--set expects key=value, got `{kv}`"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes plus a manifest.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Object shape: sphere, cube, or torus.
        #[arg(long, default_value = "sphere")]
        shape: String,
        /// Number of scenes.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Points per complete scene cloud.
        #[arg(long, default_value_t = 150)]
        points: usize,
        /// Fraction of points removed by the synthetic occluder.
        #[arg(long, default_value_t = 0.4)]
        occlusion: f64,
        /// Gaussian noise sigma added to surviving points.
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        /// Vertices in the shared canonical model file.
        #[arg(long, default_value_t = 64)]
        model_points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a manifest and write a checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Refine one raw PLY cloud with a trained checkpoint.
    Refine {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PLY cloud.
        #[arg(long)]
        input: PathBuf,
        /// Refined PLY output path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the full pipeline over a manifest and write metric reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report prefix; writes `<out>.txt` and `<out>.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Score the ground-truth poses instead of predictions.
        #[arg(long)]
        use_gt: bool,
        /// Use ADD-S for the AUC column (symmetric objects).
        #[arg(long)]
        symmetric: bool,
        /// Worker threads for per-sample evaluation (results stay in
        /// manifest order).
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finite-difference checks of every primitive and network.
    Gradcheck {
        /// Random seeds per check.
        #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
        seeds: u64,
    },
    /// Median wall-clock timings of refinement (PR) and the full pose
    /// forward (PE).
    Bench {
        /// Refined-cloud sizes to time; defaults to the configured size.
        #[arg(long = "m", value_name = "M")]
        sizes: Vec<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth {
            out,
            shape,
            count,
            points,
            occlusion,
            noise,
            model_points,
            seed,
        } => {
            let manifest = dataset::generate(
                &out,
                &SynthOptions {
                    shape: ShapeKind::parse(&shape)?,
                    count,
                    n_points: points,
                    occlusion,
                    noise,
                    seed,
                    model_points,
                },
            )?;
            println!("wrote {count} scenes, manifest {}", manifest.display());
        }
        Command::Train {
            manifest,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let samples = dataset::load_samples(&manifest)?;
            let mut model = PrGcn::new(cfg)?;
            let log = model.train(&samples)?;
            print!("{}", log.render());
            model.save(&out)?;
            println!("checkpoint written to {}", out.display());
        }
        Command::Refine {
            checkpoint,
            input,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let mut model = PrGcn::new(cfg)?;
            model.load(&checkpoint)?;
            let raw = read_ply(&input)?;
            let refined = model.refine(&raw)?;
            write_ply(&out, &refined)?;
            println!("refined {} -> {} points, wrote {}", raw.len(), refined.len(), out.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            use_gt,
            symmetric,
            threads,
            config,
        } => {
            let cfg = config.resolve()?;
            let mut model = PrGcn::new(cfg)?;
            model.load(&checkpoint)?;
            let samples = dataset::load_samples(&manifest)?;
            let (report, failures) = model.eval(&samples, use_gt, symmetric, threads.max(1))?;
            let table = report.to_table();
            print!("{table}");
            let txt = out.with_extension("txt");
            let csv = out.with_extension("csv");
            std::fs::write(&txt, &table).map_err(|e| Error::io(txt.display().to_string(), e))?;
            std::fs::write(&csv, report.to_csv())
                .map_err(|e| Error::io(csv.display().to_string(), e))?;
            println!("reports written to {} and {}", txt.display(), csv.display());
            if !failures.is_empty() {
                for f in &failures {
                    eprintln!("FAILED {f}");
                }
                eprintln!("{} of {} samples failed", failures.len(), samples.len());
                return Ok(ExitCode::from(1));
            }
        }
        Command::Gradcheck { seeds } => {
            let rows = gradcheck::check_all(seeds)?;
            let mut all_pass = true;
            println!("{:<24} {:>14}  result", "component", "max rel err");
            for row in &rows {
                all_pass &= row.pass();
                println!(
                    "{:<24} {:>14.3e}  {}",
                    row.name,
                    row.max_rel_err,
                    if row.pass() { "PASS" } else { "FAIL" }
                );
            }
            if !all_pass {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Bench { sizes, config } => {
            let base = config.resolve()?;
            let sizes = if sizes.is_empty() {
                vec![base.m_refined]
            } else {
                sizes
            };
            println!("{:>6} {:>10} {:>12} {:>6}", "M", "component", "median ms", "runs");
            for m in sizes {
                let mut cfg = base.clone();
                cfg.m_refined = m;
                cfg.validate()?;
                let raw = sample_canonical(ShapeKind::Sphere, cfg.n_raw, cfg.seed);
                let model = PrGcn::new(cfg)?;
                for row in model.bench(&raw)? {
                    println!("{m:>6} {:>10} {:>12.3} {:>6}", row.component, row.median_ms, row.runs);
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
