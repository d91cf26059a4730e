use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dgmp_cli::{run_bench, run_eval, run_gradcheck, run_pool, run_train, PoolArgs};

#[derive(Parser)]
#[command(
    name = "dgmp",
    version,
    about = "Descriptor pooling, metric training, and retrieval evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pool descriptor files into global descriptor rows
    Pool {
        /// Descriptor file, or a directory of them (processed in sorted-filename order)
        #[arg(long)]
        input: PathBuf,
        /// avg | max | mixed | lse | gmp
        #[arg(long)]
        method: String,
        /// GMP ridge regularizer
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Mixed-pooling blend weight in [0, 1]
        #[arg(long = "mix-weight", default_value_t = 0.5)]
        mix_weight: f64,
        /// Log-sum-exp temperature
        #[arg(long = "lse-r", default_value_t = 10.0)]
        lse_r: f64,
        /// Skip the final l2 normalization
        #[arg(long = "no-normalize")]
        no_normalize: bool,
        /// auto | primal | dual
        #[arg(long, default_value = "auto")]
        strategy: String,
        /// Output CSV (one `id,v1,...,vD` row per input set)
        #[arg(long)]
        output: PathBuf,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck {
        /// `all` or a comma-separated list (avg,max,mixed,lse,l2norm,gmp,triplet)
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Optional JSON output of the full reports
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare pooling methods on the synthetic bursty benchmark
    Bench {
        /// JSON config: { "generator": {...}, "poolings": [...], "metric": "euclidean" }
        #[arg(long)]
        config: PathBuf,
        /// Output CSV table (a `.meta.json` sidecar carries timing)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the linear embedding + pooling model with triplet loss
    Train {
        /// JSON config: { "generator": {...}, "model": {...}, "train": {...} }
        #[arg(long)]
        config: PathBuf,
        /// Output JSON-lines log (epoch, loss, val_map, lambda)
        #[arg(long)]
        log: PathBuf,
    },
    /// Evaluate leave-one-out retrieval over an embeddings CSV
    Eval {
        /// CSV rows `id,v1,...,vD`
        #[arg(long)]
        embeddings: PathBuf,
        /// CSV rows `id,label`
        #[arg(long)]
        labels: PathBuf,
        /// Optional per-query AP table output
        #[arg(long)]
        report: Option<PathBuf>,
        /// Optional full JSON report output
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pool {
            input,
            method,
            lambda,
            mix_weight,
            lse_r,
            no_normalize,
            strategy,
            output,
        } => run_pool(&PoolArgs {
            input,
            method,
            lambda,
            mix_weight,
            lse_r,
            normalize: !no_normalize,
            strategy,
            output,
        }),
        Command::Gradcheck {
            ops,
            trials,
            tol,
            seed,
            json,
        } => run_gradcheck(&ops, trials, tol, seed, json.as_deref()),
        Command::Bench { config, out } => run_bench(&config, &out),
        Command::Train { config, log } => run_train(&config, &log),
        Command::Eval {
            embeddings,
            labels,
            report,
            json,
        } => run_eval(&embeddings, &labels, report.as_deref(), json.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
