use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use driftscope::pipeline::artifacts::SCORES;
use driftscope::pipeline::{Pipeline, RunConfig, RunOptions};

#[derive(Parser)]
#[command(
    name = "driftscope",
    version,
    about = "Semantic change scores from masked-token substitutes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write frequency/raw and gold/scaled scatter data.
    #[arg(long)]
    emit_plot_data: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Align lemma tokens to raw tokens.
    Align(Common),
    /// Pick background terms and index every occurrence.
    Index(Common),
    /// Fetch substitutes for sampled occurrences.
    Substitute(Common),
    /// Compute raw and scaled change scores.
    Score(Common),
    /// Induce sense clusters.
    Senses {
        #[command(flatten)]
        common: Common,
        /// Terms to cluster (default: all targets).
        #[arg(long = "term")]
        terms: Vec<String>,
    },
    /// Correlate scores with gold ratings.
    Eval(Common),
}

fn open(common: &Common) -> driftscope::Result<Pipeline> {
    let config = RunConfig::load(&common.config)?;
    let options = RunOptions {
        seed: common.seed,
        emit_plot_data: common.emit_plot_data,
    };
    Pipeline::open(config, options)
}

fn run(command: Command) -> driftscope::Result<()> {
    match command {
        Command::Align(c) => {
            let s = open(&c)?.align()?;
            println!(
                "documents={}\tlemma_tokens={}\taligned={:.2}%\tpad={:.2}%",
                s.documents,
                s.lemma_tokens,
                100.0 * s.aligned_share(),
                100.0 * s.pad_share()
            );
        }
        Command::Index(c) => {
            let s = open(&c)?.index()?;
            println!(
                "targets={}\tbackground={}\tpool={}",
                s.targets, s.background, s.background_pool
            );
        }
        Command::Substitute(c) => {
            let s = open(&c)?.substitute()?;
            println!(
                "occurrences={}\tstored={}\tfailed={}\tresumed={}",
                s.occurrences, s.stored, s.failed, s.resumed
            );
        }
        Command::Score(c) => {
            let mut p = open(&c)?;
            let scores = p.score()?;
            println!("{} targets scored: {}", scores.len(), p.path(SCORES).display());
        }
        Command::Senses { common, terms } => {
            for r in open(&common)?.senses(&terms)? {
                println!(
                    "{}\tmentions={}\tclusters={}\tlargest={}\tmodularity={:.4}",
                    r.term,
                    r.mentions,
                    r.clusters.len(),
                    r.clusters.first().map_or(0, |c| c.size),
                    r.modularity
                );
            }
        }
        Command::Eval(c) => {
            for d in open(&c)?.eval()?.datasets {
                println!(
                    "{}\tspearman={:.4}\tpearson={:.4}\tn={}",
                    d.result.dataset_id, d.result.spearman, d.result.pearson, d.result.n
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
