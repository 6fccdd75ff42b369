//! `ovparse`: build concept taxonomies, learn joint order embeddings over
//! concepts and feature vectors, and evaluate closed-set and open-vocabulary
//! predictions.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ovparse_core::embedding::ScoreKind;
use ovparse_core::training::ImageLossKind;

mod commands;
mod manifest;

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "ovparse",
    version,
    about = "Taxonomy-aware joint embeddings: training, inference, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_score(s: &str) -> Result<ScoreKind, String> {
    s.parse()
}

fn parse_loss(s: &str) -> Result<ImageLossKind, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Command {
    /// Build and validate a concept taxonomy; dump concept statistics.
    BuildTaxonomy {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        freqs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a DOT rendering of the graph to this path.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Generate synthetic hierarchical Gaussian train/val/zero-shot splits.
    GenData {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        feat_dim: usize,
        #[arg(long, default_value_t = 3.0)]
        sigma_level: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma_obs: f64,
        #[arg(long, default_value_t = 100)]
        samples_per_class: usize,
        /// Comma-separated leaf names that only appear in the zero-shot split.
        #[arg(long)]
        held_out: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also emit a scene grid of this size, e.g. `32x32`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value_t = 4)]
        grid_block: usize,
    },
    /// Pretrain concept embeddings on the taxonomy alone.
    TrainConcepts {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        freqs: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint two-stream training from labeled features.
    TrainJoint {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        freqs: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Concept embeddings to start from; pretrained inline when absent.
        #[arg(long)]
        init_embeddings: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_score)]
        score: Option<ScoreKind>,
        #[arg(long, value_parser = parse_loss)]
        loss: Option<ImageLossKind>,
        #[arg(long, default_value_t = false)]
        ic_weighting: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-set evaluation: argmax over candidate labels, flat and
    /// hierarchical metrics.
    EvalClosed {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        freqs: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long, value_parser = parse_score, default_value = "hyper")]
        score: ScoreKind,
        #[arg(long, default_value_t = 30.0)]
        target_norm: f64,
        /// File of candidate concept names, one per line; defaults to the
        /// distinct labels of the evaluation data.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search the zero-shot score cutoff on a validation set.
    Calibrate {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        freqs: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long, value_parser = parse_score, default_value = "hyper")]
        score: ScoreKind,
        #[arg(long, default_value_t = 30.0)]
        target_norm: f64,
        /// File of vocabulary concept names; defaults to every concept.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot evaluation at a fixed or freshly calibrated cutoff.
    EvalZeroshot {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        freqs: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long, value_parser = parse_score, default_value = "hyper")]
        score: ScoreKind,
        #[arg(long, default_value_t = 30.0)]
        target_norm: f64,
        #[arg(long, allow_negative_numbers = true)]
        cutoff: Option<f64>,
        /// Validation dataset to calibrate the cutoff on when --cutoff is
        /// not given.
        #[arg(long)]
        calibrate_with: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pixel-level concept search over a feature grid; writes a PGM heatmap
    /// and raw CSV scores.
    Search {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Concept name or nested `min(a,b)` / `max(a,b)` expression.
        #[arg(long)]
        query: String,
        #[arg(long, value_parser = parse_score, default_value = "hyper")]
        score: ScoreKind,
        #[arg(long, default_value_t = 30.0)]
        target_norm: f64,
        /// Output stem; `<stem>.pgm` and `<stem>.csv` are written.
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a concept vector from an expression and rank its nearest
    /// concepts.
    Synth {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        expr: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_parser = parse_score, default_value = "cosine")]
        score: ScoreKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diversity test: vary the number of training classes (sampled by
    /// frequency) and track zero-shot metrics.
    Diversity {
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        freqs: PathBuf,
        /// Comma-separated training class counts, e.g. `10,20,40`.
        #[arg(long)]
        train_classes: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 32)]
        feat_dim: usize,
        #[arg(long, default_value_t = 3.0)]
        sigma_level: f64,
        #[arg(long, default_value_t = 2.0)]
        sigma_obs: f64,
        #[arg(long, default_value_t = 60)]
        samples_per_class: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildTaxonomy { taxonomy, freqs, out, dot } => {
            commands::build_taxonomy(&commands::BuildTaxonomyArgs { taxonomy, freqs, out, dot })
        }
        Command::GenData {
            taxonomy,
            out,
            feat_dim,
            sigma_level,
            sigma_obs,
            samples_per_class,
            held_out,
            seed,
            grid,
            grid_block,
        } => commands::gen_data(&commands::GenDataArgs {
            taxonomy,
            out,
            feat_dim,
            sigma_level,
            sigma_obs,
            samples_per_class,
            held_out,
            seed,
            grid,
            grid_block,
        }),
        Command::TrainConcepts { taxonomy, freqs, config, seed, out } => {
            commands::train_concepts_cmd(&commands::TrainConceptsArgs {
                taxonomy,
                freqs,
                config,
                seed,
                out,
            })
        }
        Command::TrainJoint {
            taxonomy,
            freqs,
            data,
            config,
            init_embeddings,
            seed,
            score,
            loss,
            ic_weighting,
            out,
        } => commands::train_joint_cmd(&commands::TrainJointArgs {
            taxonomy,
            freqs,
            data,
            config,
            init_embeddings,
            seed,
            score,
            loss,
            ic_weighting,
            out,
        }),
        Command::EvalClosed {
            taxonomy,
            freqs,
            data,
            embeddings,
            embedder,
            score,
            target_norm,
            candidates,
            out,
        } => commands::eval_closed(&commands::EvalArgs {
            taxonomy,
            freqs,
            data,
            embeddings,
            embedder,
            score,
            target_norm,
            candidates,
            out,
        }),
        Command::Calibrate {
            taxonomy,
            freqs,
            data,
            embeddings,
            embedder,
            score,
            target_norm,
            vocab,
            out,
        } => commands::calibrate(&commands::CalibrateArgs {
            taxonomy,
            freqs,
            data,
            embeddings,
            embedder,
            score,
            target_norm,
            vocab,
            out,
        }),
        Command::EvalZeroshot {
            taxonomy,
            freqs,
            data,
            embeddings,
            embedder,
            score,
            target_norm,
            cutoff,
            calibrate_with,
            vocab,
            out,
        } => commands::eval_zeroshot(&commands::EvalZeroShotArgs {
            taxonomy,
            freqs,
            data,
            embeddings,
            embedder,
            score,
            target_norm,
            cutoff,
            calibrate_with,
            vocab,
            out,
        }),
        Command::Search {
            taxonomy,
            embeddings,
            embedder,
            grid,
            query,
            score,
            target_norm,
            out,
        } => commands::search(&commands::SearchArgs {
            taxonomy,
            embeddings,
            embedder,
            grid,
            query,
            score,
            target_norm,
            out,
        }),
        Command::Synth { taxonomy, embeddings, expr, k, score, out } => {
            commands::synth(&commands::SynthArgs { taxonomy, embeddings, expr, k, score, out })
        }
        Command::Diversity {
            taxonomy,
            freqs,
            train_classes,
            config,
            seed,
            feat_dim,
            sigma_level,
            sigma_obs,
            samples_per_class,
            out,
        } => commands::diversity(&commands::DiversityArgs {
            taxonomy,
            freqs,
            train_classes,
            config,
            seed,
            feat_dim,
            sigma_level,
            sigma_obs,
            samples_per_class,
            out,
        }),
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("OVPARSE_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        } else {
            eprintln!("warning: ignoring unparsable OVPARSE_THREADS={threads:?}");
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are validation failures: exit 1.
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
