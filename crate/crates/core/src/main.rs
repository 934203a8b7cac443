use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qnn_core::commands::{
    bench_model, cmd_train, describe_run, grid_csv, load_data, parse_format_list, parse_placement_list,
    prepare, run_boundary, run_sweep, sweep_csv, sweep_table, BenchOptions, BoundaryOptions, PrepOptions,
    Prepared, RunConfig, SyntheticKind, SEED_ENV,
};
use qnn_core::data::LogBase;
use qnn_core::{ActivationPlacement, Format, QnnError, QnnModel, Result};

#[derive(Parser)]
#[command(name = "qnn", version, about = "Quadratic neural networks for CTR prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode CSV data: vocabularies, numeric buckets, splits, binary cache.
    Prep {
        /// One CSV, or three (train, val, test) given in that order.
        #[arg(long, required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Minimum token count; overrides the schema.
        #[arg(long)]
        threshold: Option<u64>,
        /// Numeric bucketing: e2 = floor(ln(x)^2), 2 = floor(log2(x)^2).
        #[arg(long, default_value = "e2")]
        log_base: LogBase,
        /// Directory with train.idx, val.idx, test.idx.
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Train one model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a grid of neuron formats and activation placements.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "t1..t25,mlp,crossnetv2")]
        formats: String,
        #[arg(long, default_value = "none,post")]
        placements: String,
        #[arg(long, default_value_t = 3)]
        layers: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a 2-D toy dataset and export the probability grid.
    Boundary {
        #[arg(long)]
        dataset: SyntheticKind,
        #[arg(long)]
        format: Format,
        #[arg(long)]
        placement: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        factor: f64,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Inference latency per 100 samples.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `qnn prep` output directory; its test split is used. Random rows otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        batch: usize,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
}

fn seed_override(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| QnnError::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer"))),
        Err(_) => Ok(seed),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prep {
            csv,
            schema,
            out,
            threshold,
            log_base,
            splits,
            seed,
        } => {
            let prepared = prepare(&PrepOptions {
                csv,
                schema,
                threshold,
                log_base,
                splits,
                ratios: [0.8, 0.1, 0.1],
                seed: seed_override(seed)?,
            })?;
            prepared.save(&out)?;
            for f in &prepared.vocab.fields {
                println!("{:<24} {}", f.name, f.size());
            }
            println!("{:<24} {}", "total", prepared.vocab.total_features());
            println!(
                "rows: {} train / {} val / {} test",
                prepared.split.train.len(),
                prepared.split.val.len(),
                prepared.split.test.len()
            );
        }
        Command::Train { config, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if out.is_some() {
                cfg.output = out;
            }
            let r = cmd_train(&cfg)?;
            print!("{}", describe_run(&r));
        }
        Command::Sweep {
            config,
            formats,
            placements,
            layers,
            out,
        } => {
            let formats = parse_format_list(&formats)?;
            let placements = parse_placement_list(&placements)?;
            let mut cfg = RunConfig::load(&config)?;
            cfg.model.layers = layers;
            if out.is_some() {
                cfg.output = out;
            }
            let data = load_data(&cfg.data, cfg.train.seed)?;
            let rows = run_sweep(&cfg, &data, &formats, &placements)?;
            let table = sweep_table(&rows);
            print!("{table}");
            if let Some(dir) = &cfg.output {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("sweep.csv"), sweep_csv(&rows)?)?;
                fs::write(dir.join("sweep.txt"), table)?;
            }
        }
        Command::Boundary {
            dataset,
            format,
            placement,
            out,
            epochs,
            n,
            noise,
            factor,
            seed,
        } => {
            let mut opts = BoundaryOptions::new(dataset, format);
            opts.placement = placement.as_deref().map(ActivationPlacement::parse).transpose()?;
            opts.epochs = epochs;
            opts.data.n = n;
            opts.data.noise = noise;
            opts.data.factor = factor;
            opts.seed = seed_override(seed)?;
            let r = run_boundary(&opts)?;
            fs::write(&out, grid_csv(&r.grid))?;
            println!("train accuracy {:.4}", r.train_accuracy);
            println!("test accuracy {:.4}", r.accuracy);
        }
        Command::Bench {
            checkpoint,
            data,
            batch,
            reps,
            warmup,
        } => {
            let model = QnnModel::load(&checkpoint)?;
            let test = data
                .map(|d| Prepared::load(&d).and_then(|p| p.data.subset(&p.split.test)))
                .transpose()?;
            let opts = BenchOptions {
                batch,
                reps,
                warmup,
                ..BenchOptions::default()
            };
            let s = bench_model(&model, test.as_ref(), &opts)?;
            println!("median {:.4} ms / 100 samples", s.median_ms_per_100);
            println!("p95    {:.4} ms / 100 samples", s.p95_ms_per_100);
            println!("repetitions {}", s.repetitions);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
