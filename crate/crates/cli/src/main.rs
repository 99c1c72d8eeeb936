use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moce_core::clustering::{
    elbow_select, kmeans_best_of, KMeansModel, KMeansOptions, ELBOW_RESTARTS,
};
use moce_core::embedding::{load_embeddings, DEFAULT_EMBED_DIM};
use moce_core::harness::{
    ablation_run, evaluate, ingest_dataset, load_trained, pipeline_train, route_stats, EmbedField,
    EmbedSettings, RunConfig,
};
use moce_core::{MoceError, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "moce",
    version,
    about = "Train and inspect mixture-of-clustered-experts models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed every record of a dataset into an embedding file.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EMBED_DIM)]
        dim: usize,
        /// Master seed; matches a training run with the same seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Field::Instruction)]
        field: Field,
    },
    /// Fit a k-means model to an embedding file.
    Cluster {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required_unless_present = "elbow", conflicts_with = "elbow")]
        k: Option<usize>,
        /// Choose k by the elbow of the SSE curve.
        #[arg(long, requires = "k_max")]
        elbow: bool,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the SSE curve and curvature for k = 1..=k_max as CSV.
    Elbow {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        k_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the training pipeline described by a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the configuration.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Greedy exact match and perplexity of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        input: CheckpointInput,
        #[arg(long, default_value_t = 32)]
        max_new_tokens: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predicted-cluster histogram and per-router expert loads.
    RouteStats {
        #[command(flatten)]
        input: CheckpointInput,
        /// Clustering model to use instead of the one stored in the checkpoint.
        #[arg(long)]
        clustering: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
    /// Routing-strategy grid and expert-count sweep over several seeds.
    Ablate {
        /// Base configuration; `train_data` trains, `eval_data` measures held-out loss.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CheckpointInput {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Embedding file for checkpoints trained on file embeddings.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Field {
    Instruction,
    InstructionResponse,
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| MoceError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Embed {
            data,
            out,
            dim,
            seed,
            field,
        } => {
            let records = ingest_dataset(&data)?;
            let field = match field {
                Field::Instruction => EmbedField::Instruction,
                Field::InstructionResponse => EmbedField::InstructionResponse,
            };
            let set = EmbedSettings::toy(dim, seed, field).embed(&records, None)?;
            set.save(&out)?;
            eprintln!("embedded {} records into {}", set.len(), out.display());
        }
        Command::Cluster {
            embeddings,
            out,
            k,
            elbow,
            k_max,
            seed,
        } => {
            let set = load_embeddings(&embeddings)?;
            let k = match (k, elbow, k_max) {
                (Some(k), _, _) => k,
                (None, true, Some(k_max)) => {
                    let report = elbow_select(set.embeddings(), k_max, seed)?;
                    eprintln!("elbow selected k = {}", report.selected_k);
                    report.selected_k
                }
                _ => return Err(MoceError::config("give --k or --elbow --k-max")),
            };
            let (model, assignment) = kmeans_best_of(
                set.embeddings(),
                k,
                seed,
                ELBOW_RESTARTS,
                KMeansOptions::default(),
            )?;
            model.save(&out)?;
            eprintln!(
                "k = {k}, sse = {:?}, cluster sizes {:?}",
                model.final_sse(),
                assignment.counts()
            );
        }
        Command::Elbow {
            embeddings,
            k_max,
            seed,
            out,
        } => {
            let set = load_embeddings(&embeddings)?;
            let report = elbow_select(set.embeddings(), k_max, seed)?;
            write_or_print(out.as_deref(), &report.to_csv())?;
            eprintln!("selected k = {}", report.selected_k);
        }
        Command::Train { config, out_dir } => {
            let mut cfg = RunConfig::load(&config)?;
            if out_dir.is_some() {
                cfg.out_dir = out_dir;
            }
            let out = pipeline_train(&cfg)?;
            let m = &out.metrics;
            eprintln!(
                "trained {} steps on {} groups: loss {:.4} -> {:.4}",
                m.steps.len(),
                out.kmeans.k(),
                m.initial_loss().unwrap_or(f64::NAN),
                m.final_loss().unwrap_or(f64::NAN)
            );
            if let Some(e) = &m.eval {
                eprintln!(
                    "eval: exact match {:.4}, perplexity {:.4}",
                    e.exact_match, e.perplexity
                );
            }
        }
        Command::Eval {
            input,
            max_new_tokens,
            out,
        } => {
            let (ck, vocab) = load_trained(&input.checkpoint)?;
            let records = ingest_dataset(&input.data)?;
            let file = input.embeddings.as_ref().map(load_embeddings).transpose()?;
            let metrics = evaluate(&ck, &vocab, &records, file.as_ref(), max_new_tokens)?;
            write_or_print(out.as_deref(), &format!("{}\n", metrics.to_json()))?;
        }
        Command::RouteStats {
            input,
            clustering,
            out_csv,
            out_json,
        } => {
            let (ck, vocab) = load_trained(&input.checkpoint)?;
            let records = ingest_dataset(&input.data)?;
            let file = input.embeddings.as_ref().map(load_embeddings).transpose()?;
            let km = clustering.as_ref().map(KMeansModel::load).transpose()?;
            let name = input
                .data
                .file_stem()
                .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            let stats = route_stats(&ck, &vocab, &records, &name, file.as_ref(), km.as_ref())?;
            if out_csv.is_none() && out_json.is_none() {
                print!("{}", stats.to_csv());
            }
            if let Some(p) = &out_csv {
                write_or_print(Some(p), &stats.to_csv())?;
            }
            if let Some(p) = &out_json {
                write_or_print(Some(p), &format!("{}\n", stats.to_json()))?;
            }
        }
        Command::Ablate {
            config,
            seeds,
            out_csv,
            out_json,
        } => {
            let cfg = RunConfig::load(&config)?;
            let train = cfg
                .train_data
                .as_ref()
                .ok_or_else(|| MoceError::config("train_data is not set"))
                .and_then(ingest_dataset)?;
            let heldout = cfg
                .eval_data
                .as_ref()
                .ok_or_else(|| MoceError::config("eval_data is not set"))
                .and_then(ingest_dataset)?;
            let table = ablation_run(&cfg, &train, &heldout, &seeds)?;
            if out_csv.is_none() && out_json.is_none() {
                print!("{}", table.to_csv());
            }
            if let Some(p) = &out_csv {
                write_or_print(Some(p), &table.to_csv())?;
            }
            if let Some(p) = &out_json {
                write_or_print(Some(p), &format!("{}\n", table.to_json()))?;
            }
            eprintln!(
                "dual-stage wins on {}/{} seeds",
                table.dual_stage_wins(),
                seeds.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
