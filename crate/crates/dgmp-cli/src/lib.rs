//! Command implementations behind the `dgmp` binary.
//!
//! Every command is a plain function so integration tests can drive it
//! without spawning a process. Exit codes: 0 success, 1 gradient-check
//! failure, 2 parse/config errors, 3 solver failure, 4 degenerate data.

pub mod formats;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use dgmp::bench::{
    gen_bursty, run_benchmark, train, BenchError, BurstyGenConfig, EmbeddingModel, ModelConfig,
    TrainConfig, TrainError,
};
use dgmp::grad::{grad_check, CheckReport, GradError, CHECKED_OPS};
use dgmp::linalg::LinalgError;
use dgmp::pooling::{GlobalDescriptor, GmpStrategy, PoolError, PoolingConfig, PoolingMethod};
use dgmp::retrieval::{evaluate, DistanceMetric, EmbeddingGallery, RetrievalError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Parse(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::GradcheckFailed(_) => 1,
            CliError::Parse(_) | CliError::Io(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Degenerate(_) => 4,
        }
    }
}

fn from_linalg(e: LinalgError) -> CliError {
    match e {
        LinalgError::NotPositiveDefinite { .. } => CliError::Solver(e.to_string()),
        other => CliError::Parse(other.to_string()),
    }
}

fn from_pool(e: PoolError) -> CliError {
    match e {
        PoolError::Linalg(inner) => from_linalg(inner),
        PoolError::ZeroVector => CliError::Degenerate(e.to_string()),
        PoolError::InvalidParameter(_) => CliError::Parse(e.to_string()),
    }
}

fn from_retrieval(e: RetrievalError) -> CliError {
    match e {
        RetrievalError::Pool(inner) => from_pool(inner),
        RetrievalError::LengthMismatch { .. }
        | RetrievalError::DimensionMismatch { .. }
        | RetrievalError::NotNormalized { .. } => CliError::Parse(e.to_string()),
        other => CliError::Degenerate(other.to_string()),
    }
}

fn from_bench(e: BenchError) -> CliError {
    match e {
        BenchError::InvalidConfig(msg) => CliError::Parse(msg),
        BenchError::Pool(inner) => from_pool(inner),
        BenchError::Retrieval(inner) => from_retrieval(inner),
    }
}

fn from_grad(e: GradError) -> CliError {
    match e {
        GradError::UnknownOp(op) => CliError::Parse(format!("unknown op '{op}'")),
        GradError::Pool(inner) => from_pool(inner),
        GradError::Linalg(inner) => from_linalg(inner),
        GradError::Retrieval(inner) => from_retrieval(inner),
        GradError::ShapeMismatch { .. } => CliError::Parse(e.to_string()),
    }
}

fn from_train(e: TrainError) -> CliError {
    match e {
        TrainError::InvalidConfig(msg) => CliError::Parse(msg),
        TrainError::Pool(inner) => from_pool(inner),
        TrainError::Grad(inner) => from_grad(inner),
        TrainError::Retrieval(inner) => from_retrieval(inner),
        TrainError::Linalg(inner) => from_linalg(inner),
    }
}

/// Arguments of `dgmp pool`.
pub struct PoolArgs {
    pub input: PathBuf,
    pub method: String,
    pub lambda: f64,
    pub mix_weight: f64,
    pub lse_r: f64,
    pub normalize: bool,
    pub strategy: String,
    pub output: PathBuf,
}

/// Pools one descriptor file, or every file of a directory in sorted-filename
/// order, into one output CSV row per set (`id,v1,...,vD`).
pub fn run_pool(args: &PoolArgs) -> Result<(), CliError> {
    let method: PoolingMethod = args
        .method
        .parse()
        .map_err(|e: PoolError| CliError::Parse(e.to_string()))?;
    let strategy: GmpStrategy = args
        .strategy
        .parse()
        .map_err(|e: PoolError| CliError::Parse(e.to_string()))?;
    let cfg = PoolingConfig {
        method,
        lambda: args.lambda,
        mix_weight: args.mix_weight,
        lse_r: args.lse_r,
        normalize_output: args.normalize,
        gmp_strategy: strategy,
    };
    cfg.validate().map_err(from_pool)?;

    let mut files: Vec<PathBuf> = Vec::new();
    let meta = std::fs::metadata(&args.input)
        .map_err(|e| CliError::Parse(format!("{}: {}", args.input.display(), e)))?;
    if meta.is_dir() {
        let entries = std::fs::read_dir(&args.input)
            .map_err(|e| CliError::Io(format!("{}: {}", args.input.display(), e)))?;
        for entry in entries {
            let entry = entry.map_err(|e| CliError::Io(e.to_string()))?;
            if entry
                .file_type()
                .map_err(|e| CliError::Io(e.to_string()))?
                .is_file()
            {
                files.push(entry.path());
            }
        }
        files.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));
    } else {
        files.push(args.input.clone());
    }
    if files.is_empty() {
        return Err(CliError::Degenerate(format!(
            "{}: no input files",
            args.input.display()
        )));
    }

    let mut out = String::new();
    for path in &files {
        let set = formats::read_descriptor_file(path)?;
        let pooled = dgmp::pooling::pool(&set, &cfg).map_err(from_pool)?;
        let id = set.source_id.as_deref().unwrap_or("set");
        let values: Vec<String> = pooled
            .values
            .iter()
            .map(|v| formats::format_value(*v))
            .collect();
        out.push_str(&format!("{},{}\n", id, values.join(",")));
    }
    formats::write_atomic(&args.output, out.as_bytes())
}

/// Runs gradient checks for the requested ops (`all` or a comma-separated
/// list), printing one table row per op and parameter block. The full reports
/// can also be written as JSON.
pub fn run_gradcheck(
    ops: &str,
    trials: usize,
    tol: f64,
    seed: u64,
    json_out: Option<&Path>,
) -> Result<(), CliError> {
    let names: Vec<&str> = if ops == "all" {
        CHECKED_OPS.to_vec()
    } else {
        ops.split(',').map(str::trim).collect()
    };
    let mut reports: Vec<CheckReport> = Vec::new();
    for name in &names {
        reports.push(grad_check(name, trials, tol, seed).map_err(from_grad)?);
    }
    if let Some(path) = json_out {
        let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
        formats::write_atomic(path, json.as_bytes())?;
    }

    println!(
        "{:<10} {:<14} {:>12} {:>7} {:>8}  status",
        "op", "block", "max_rel_err", "trials", "skipped"
    );
    let mut failed = Vec::new();
    for report in &reports {
        for block in &report.blocks {
            println!(
                "{:<10} {:<14} {:>12.3e} {:>7} {:>8}  {}",
                report.op,
                block.name,
                block.max_rel_err,
                report.trials_run,
                report.skipped_nondifferentiable,
                if block.max_rel_err <= report.tolerance {
                    "pass"
                } else {
                    "FAIL"
                }
            );
        }
        if !report.passed {
            failed.push(report.op.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed.join(", ")))
    }
}

/// JSON configuration of `dgmp bench`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfigFile {
    #[serde(default)]
    pub generator: BurstyGenConfig,
    pub poolings: Vec<PoolingConfig>,
    #[serde(default = "default_metric")]
    pub metric: DistanceMetric,
}

fn default_metric() -> DistanceMetric {
    DistanceMetric::Euclidean
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Parse(format!("{}: {}", path.display(), e)))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Parse(format!("{}: {}", path.display(), e)))
}

fn unix_timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Runs the pooling comparison benchmark and writes the table as CSV. Wall
/// times and the timestamp go to a `<out>.meta.json` sidecar so the primary
/// CSV stays byte-reproducible.
pub fn run_bench(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg: BenchConfigFile = read_json_config(config)?;
    if cfg.poolings.is_empty() {
        return Err(CliError::Parse("poolings list is empty".into()));
    }
    let report = run_benchmark(&cfg.generator, &cfg.poolings, cfg.metric).map_err(from_bench)?;
    formats::write_atomic(out, report.to_csv().as_bytes())?;

    let wall_times: BTreeMap<String, f64> = report
        .rows
        .iter()
        .map(|r| (r.label.clone(), r.wall_time_s))
        .collect();
    let meta = serde_json::json!({
        "timestamp_unix_s": unix_timestamp(),
        "wall_times_s": wall_times,
    });
    let mut meta_name = out.as_os_str().to_os_string();
    meta_name.push(".meta.json");
    formats::write_atomic(
        Path::new(&meta_name),
        serde_json::to_string_pretty(&meta).unwrap().as_bytes(),
    )?;

    for row in &report.rows {
        println!("{:<22} map {:.4}  top1 {:.4}", row.label, row.map, row.top1);
    }
    Ok(())
}

/// JSON configuration of `dgmp train`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    #[serde(default)]
    pub generator: BurstyGenConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Trains on the generated dataset and writes the per-epoch log as JSON lines.
pub fn run_train(config: &Path, log_path: &Path) -> Result<(), CliError> {
    let cfg: TrainConfigFile = read_json_config(config)?;
    let dataset = gen_bursty(&cfg.generator).map_err(from_bench)?;
    let model = EmbeddingModel::init(dataset[0].dim(), &cfg.model);
    let outcome = train(model, &dataset, &cfg.train).map_err(from_train)?;

    let mut lines = String::new();
    for entry in &outcome.log {
        lines.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
        lines.push('\n');
    }
    formats::write_atomic(log_path, lines.as_bytes())?;
    println!(
        "best epoch {} (val mAP {:.4}), final lambda {}",
        outcome.best_epoch, outcome.best_val_map, outcome.model.pooling.lambda
    );
    Ok(())
}

/// Evaluates leave-one-out retrieval over an embeddings CSV plus a labels CSV
/// and prints `metric,value` lines; optional per-query CSV and JSON reports.
///
/// Embeddings are ℓ2-normalized on load.
pub fn run_eval(
    embeddings_path: &Path,
    labels_path: &Path,
    report_path: Option<&Path>,
    json_path: Option<&Path>,
) -> Result<(), CliError> {
    let (ids, rows) = formats::read_embeddings_csv(embeddings_path)?;
    let labels_by_id: BTreeMap<String, String> =
        formats::read_labels_csv(labels_path)?.into_iter().collect();

    let mut embeddings = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let label = labels_by_id.get(id).ok_or_else(|| {
            CliError::Parse(format!(
                "id '{id}' has no label in {}",
                labels_path.display()
            ))
        })?;
        let row = dgmp::linalg::Vector::new(rows.row(i).to_vec())
            .map_err(|e| CliError::Parse(e.to_string()))?;
        let unit = dgmp::pooling::l2_normalize(&row).map_err(from_pool)?;
        embeddings.push(GlobalDescriptor {
            values: unit,
            normalized: true,
        });
        labels.push(label.clone());
    }
    let gallery = EmbeddingGallery::new(embeddings, labels, ids).map_err(from_retrieval)?;
    let report = evaluate(&gallery, true).map_err(from_retrieval)?;

    if let Some(path) = report_path {
        formats::write_atomic(path, report.per_query_csv().as_bytes())?;
    }
    if let Some(path) = json_path {
        formats::write_atomic(path, report.to_json().as_bytes())?;
    }
    println!("queries,{}", report.per_query.len());
    println!("excluded,{}", report.excluded_singletons);
    println!("map,{}", report.map);
    println!("top1,{}", report.top1);
    Ok(())
}
