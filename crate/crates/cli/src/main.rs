use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hpfuse::perception::AnswerCache;
use hpfuse::pipeline::{self, BackendKind, Backends, ConfigError, PipelineError, TrainConfig};

const EXIT_USAGE: u8 = 64;
const EXIT_CONFIG: u8 = 65;
const EXIT_NO_MODEL: u8 = 2;

#[derive(Parser)]
#[command(name = "hpfuse", version, about = "Text-guided infrared/visible image fusion")]
struct Cli {
    /// Machine-readable output: JSON training log lines, answers and reports.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_parser = ["stub", "http"])]
    backend: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Ask the four questions about an image pair.
    Ask {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        /// Answer cache file; in memory when omitted and not configured.
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a fusion model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Fuse one pair with a trained model.
    Fuse {
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score fused images against their sources.
    Eval {
        #[arg(long)]
        fused_dir: PathBuf,
        #[arg(long)]
        ir_dir: PathBuf,
        #[arg(long)]
        vis_dir: PathBuf,
        /// Write the CSV report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic dataset of `ir/` and `vis/` PNG pairs.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn override_error(message: String) -> ConfigError {
    ConfigError { source_name: "--set".into(), line: 0, message }
}

fn load_config(common: &Common, json: bool) -> Result<TrainConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    for item in &common.overrides {
        let (key, value) =
            item.split_once('=').ok_or_else(|| override_error(format!("expected KEY=VALUE, got {item:?}")))?;
        cfg.set(key.trim(), value).map_err(override_error)?;
    }
    if let Some(b) = &common.backend {
        cfg.backend = b.parse().map_err(override_error)?;
    }
    if json {
        cfg.json_log = true;
    }
    cfg.validate().map_err(override_error)?;
    Ok(cfg)
}

fn open_cache(flag: Option<&Path>, cfg: &TrainConfig) -> Result<AnswerCache, PipelineError> {
    match flag.or(cfg.cache_path.as_deref()) {
        Some(path) => Ok(AnswerCache::open(path)?),
        None => Ok(AnswerCache::in_memory()),
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Ask { ir, vis, cache, common } => {
            let cfg = load_config(&common, cli.json)?;
            let cache = open_cache(cache.as_deref(), &cfg)?;
            let questions = cfg.question_set();
            let sets = pipeline::ask(&ir, &vis, &questions, &Backends::from_config(&cfg), &cache)?;
            let mut records = Vec::new();
            for set in &sets {
                for (q, answer) in questions.iter().zip(&set.answers) {
                    if cli.json {
                        records.push(serde_json::json!({
                            "modality": set.source.to_string(),
                            "question_id": q.id,
                            "question": q.text,
                            "answer": answer,
                        }));
                    } else {
                        println!("{}\tQ{}\t{}\t{}", set.source, q.id, q.text, answer);
                    }
                }
            }
            if cli.json {
                println!("{}", serde_json::Value::Array(records));
            }
        }
        Command::Train { common, resume } => {
            let mut cfg = load_config(&common, cli.json)?;
            cfg.resume |= resume;
            if cfg.backend == BackendKind::Http {
                log::info!("perception backend at {}", cfg.http().base_url);
            }
            let report = pipeline::train(&cfg)?;
            if cli.json {
                println!("{}", serde_json::json!({ "model": report.model_path, "log": report.log_path }));
            } else {
                println!("model written to {}", report.model_path.display());
            }
        }
        Command::Fuse { ir, vis, model, out, cache, common } => {
            let cfg = load_config(&common, cli.json)?;
            let cache = open_cache(cache.as_deref(), &cfg)?;
            pipeline::fuse(&ir, &vis, &model, &out, &cfg.question_set(), &Backends::from_config(&cfg), &cache)?;
        }
        Command::Eval { fused_dir, ir_dir, vis_dir, report } => {
            let result = pipeline::eval(&fused_dir, &ir_dir, &vis_dir, report.as_deref())?;
            for ex in &result.excluded {
                log::warn!("{}: excluded: {}", ex.file, ex.reason);
            }
            if cli.json {
                println!("{}", serde_json::to_string(&result).expect("report serializes"));
            } else {
                print!("{}", result.to_table());
            }
        }
        Command::Synth { n, size, seed, out } => {
            let files = pipeline::make_synthetic_dataset(&out, n, size, seed)?;
            log::info!("wrote {} files under {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                PipelineError::Config(_) => EXIT_CONFIG,
                PipelineError::ModelMissing(_) => EXIT_NO_MODEL,
                _ => 1,
            })
        }
    }
}
