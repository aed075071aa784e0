use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msct_cli::{Candidate, CliError, Method, Pipeline, PipelineConfig};
use msct_neural::models::ModelKind;

/// Multispectral CT simulation, denoising and evaluation.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error,
/// 4 numeric failure.
#[derive(Debug, Parser)]
#[command(name = "msct", version)]
struct Cli {
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the GT and noisy stacks of every configured slice.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one network: hsinet, videonet, combiner or dncnn.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: ModelKind,
    },
    /// Denoise slices: nlm, tv, hsinet, videonet, combined or dncnn.
    Denoise {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: String,
        /// Slice indices; the test split when absent.
        #[arg(long = "slice")]
        slices: Vec<usize>,
    },
    /// Reconstruct bands of a stack file.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Inclusive band range.
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        bands: Option<Vec<usize>>,
    },
    /// Average N noisy realizations of a slice and reconstruct the result.
    AverageReference {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        slice: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        bands: Option<Vec<usize>>,
    },
    /// Compare candidate stacks against the GT of a slice.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Slice index; the first test slice when absent.
        #[arg(long)]
        slice: Option<usize>,
        /// Comma-separated: noisy, gt or a denoising method.
        #[arg(long, value_delimiter = ',', default_value = "noisy,nlm,tv")]
        candidates: Vec<String>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn bands(v: Option<Vec<usize>>) -> Option<[usize; 2]> {
    v.map(|b| [b[0], b[1]])
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::DefaultConfig => print!("{}", PipelineConfig::default().to_toml()),
        Command::Simulate { config } => {
            for p in Pipeline::from_file(config)?.simulate()? {
                println!("{}", p.display());
            }
        }
        Command::Train { config, model } => {
            let out = Pipeline::from_file(config)?.train(model)?;
            print!("{}", out.csv());
            println!("best epoch {} (val mse {:e})", out.best_epoch, out.best_val());
        }
        Command::Denoise { config, method, slices } => {
            let p = Pipeline::from_file(config)?;
            let method: Method = method.parse()?;
            let slices = if slices.is_empty() { p.config.dataset.test.clone() } else { slices };
            for path in p.denoise(method, &slices)? {
                println!("{}", path.display());
            }
        }
        Command::Reconstruct { config, input, bands: b } => {
            let n = Pipeline::from_file(config)?.reconstruct(&input, bands(b))?.len();
            println!("reconstructed {n} bands");
        }
        Command::AverageReference { config, slice, n, bands: b } => {
            let (_, images) = Pipeline::from_file(config)?.average_reference(slice, n, bands(b))?;
            println!("reconstructed {} bands from {n} realizations", images.len());
        }
        Command::Evaluate { config, slice, candidates } => {
            let p = Pipeline::from_file(config)?;
            let slice = match slice.or_else(|| p.config.dataset.test.first().copied()) {
                Some(s) => s,
                None => return Err(CliError::Config("no slice given and the test split is empty".into())),
            };
            let cands = candidates.iter().map(|c| c.parse()).collect::<Result<Vec<Candidate>, _>>()?;
            let reports = p.evaluate(slice, &cands)?;
            print!("{}", msct_core::metrics::reports_table(&reports));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msct: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
