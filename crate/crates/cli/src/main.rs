use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use lvqa_cli::commands::{self, TrainRequest};
use lvqa_cli::{config_keys_help, CliError, CliResult, RunConfig, RUN_DIR_ENV};
use lvqa_core::data::Split;
use lvqa_core::model::Variant;

#[derive(Parser)]
#[command(name = "lvqa", version, about = "Region-conditioned VQA: synthetic data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON file with `model`, `train` and `data` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate images, masks, manifests and class statistics.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per seed into `<runs>/<name>/seed<k>`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Overrides `model.variant`.
        #[arg(long)]
        variant: Option<String>,
        /// Comma-separated; overrides `train.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Run name; defaults to the variant.
        #[arg(long)]
        name: Option<String>,
        #[arg(long, env = RUN_DIR_ENV, default_value = "runs")]
        runs: PathBuf,
        /// Overwrite existing seed directories.
        #[arg(long)]
        force: bool,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a trained run and write report.json, report.md and predictions.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate test metrics over seeds for several variants.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, env = RUN_DIR_ENV, default_value = "runs")]
        runs: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "no_mask,region_in_text,crop_region,draw_region,ours")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Defaults to `<runs>/compare`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write attention heatmaps and overlays for one sample.
    AttnExport {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class yes/no question counts as CSV.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> CliResult<Variant> {
    s.parse().map_err(|e: lvqa_core::Error| CliError::Usage(e.to_string()))
}

fn parse_split(s: &str) -> CliResult<Split> {
    s.parse().map_err(|e: lvqa_core::Error| CliError::Usage(e.to_string()))
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData { cfg, out, seed } => {
            let summary = commands::gen_data(&cfg.load()?, &out, seed)?;
            println!(
                "wrote {} train, {} val, {} test records to {}",
                summary.train,
                summary.val,
                summary.test,
                out.display()
            );
        }
        Command::Train {
            cfg,
            data,
            variant,
            seeds,
            name,
            runs,
            force,
            jobs,
        } => {
            let mut config = cfg.load()?;
            if let Some(v) = variant {
                config.model.variant = parse_variant(&v)?;
            }
            let seeds = seeds.unwrap_or_else(|| config.train.seeds.clone());
            config.train.seeds = seeds.clone();
            let name = name.unwrap_or_else(|| config.model.variant.to_string());
            let dirs = commands::train_runs(&TrainRequest {
                config: &config,
                data: &data,
                runs: &runs,
                name: &name,
                seeds: &seeds,
                force,
                jobs,
            })?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
        Command::Eval { run, data, split, out } => {
            let report = commands::eval_run(&run, &data, parse_split(&split)?, out.as_deref())?;
            print!("{}", lvqa_core::evaluation::report_markdown(&report));
        }
        Command::Compare {
            data,
            runs,
            variants,
            seeds,
            out,
        } => {
            let variants = variants.iter().map(|v| parse_variant(v)).collect::<CliResult<Vec<_>>>()?;
            let out = out.unwrap_or_else(|| runs.join("compare"));
            let rows = commands::compare(&data, &runs, &variants, &seeds, &out)?;
            print!("{}", lvqa_core::evaluation::comparison_markdown(&rows));
        }
        Command::AttnExport {
            run,
            data,
            split,
            index,
            out,
        } => {
            for p in commands::attn_export(&run, &data, parse_split(&split)?, index, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Stats { data, out } => {
            let csv = commands::stats(&data)?;
            match out {
                Some(path) => std::fs::write(&path, csv).map_err(|e| CliError::Env(format!("{}: {e}", path.display())))?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let keys = config_keys_help();
    let command = Cli::command()
        .after_help(keys.clone())
        .mut_subcommand("gen-data", |c| c.after_help(keys.clone()))
        .mut_subcommand("train", |c| c.after_help(keys.clone()));
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
