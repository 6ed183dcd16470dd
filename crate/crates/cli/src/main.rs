use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use multibert::encoder::gradcheck::{Difference, DEFAULT_STEP};
use multibert::retrieval::RetrievalMode;
use multibert::synth::SynthConfig;
use multibert_cli::{config, error_line, pipeline, tools};

#[derive(Parser)]
#[command(name = "multibert", version, about = "Sentence-cluster document embeddings and book recommendation")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "multibert.toml")]
    config: PathBuf,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Cosine,
    Cluster,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Central,
    Richardson,
}

#[derive(Subcommand)]
enum Command {
    /// Merge books and reviews, fill defaults, derive genres.
    Ingest,
    /// Fit the k-means codebook over all sentence vectors.
    BuildCodebook,
    /// Sequence every document and train the encoder.
    Train {
        /// Continue from the run's checkpoint and append to its loss history.
        #[arg(long)]
        resume: bool,
    },
    /// Write composed document embeddings.
    Embed,
    /// Print the books most similar to one book.
    Recommend {
        #[arg(long)]
        book: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Precision@k of the model and both baselines.
    Evaluate,
    /// ingest, build-codebook, train, embed and evaluate in one go.
    Run,
    /// Finite-difference check of the encoder gradients.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, value_enum, default_value = "central")]
        scheme: Scheme,
        /// Exit nonzero unless the error is below this.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// JSON lines of each book's split sentences, for external embedders.
    SentenceDump {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a genre-structured synthetic corpus.
    SynthCorpus {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 500)]
        books: usize,
        #[arg(long, default_value_t = 5)]
        genres: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Structural check of a sentence-embedding file.
    ValidateEmbeddings { path: PathBuf },
}

fn run(cli: Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let load = || config::load(&cli.config, &cli.overrides);
    match cli.command {
        Command::Ingest => pipeline::ingest(&load()?),
        Command::BuildCodebook => pipeline::build_codebook(&load()?),
        Command::Train { resume } => pipeline::train_encoder(&load()?, resume),
        Command::Embed => pipeline::embed(&load()?),
        Command::Recommend { ref book, k, mode } => {
            let mode = mode.map(|m| match m {
                Mode::Cosine => RetrievalMode::Cosine,
                Mode::Cluster => RetrievalMode::Cluster,
            });
            pipeline::recommend(&load()?, book, k, mode)
        }
        Command::Evaluate => pipeline::evaluate(&load()?),
        Command::Run => pipeline::run_all(&load()?),
        Command::Gradcheck { step, scheme, tolerance } => {
            let scheme = match scheme {
                Scheme::Central => Difference::Central,
                Scheme::Richardson => Difference::Richardson,
            };
            tools::gradcheck(step, scheme, tolerance)
        }
        Command::SentenceDump { ref out } => {
            let text = pipeline::sentence_dump(&load()?)?;
            match out {
                Some(p) => {
                    std::fs::write(p, text)?;
                    Ok(String::new())
                }
                None => Ok(text),
            }
        }
        Command::SynthCorpus { ref out_dir, books, genres, seed } => {
            let cfg = SynthConfig { books, genres, seed, ..SynthConfig::default() };
            tools::synth_corpus(out_dir, &cfg)
        }
        Command::ValidateEmbeddings { ref path } => tools::validate(path),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
