use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use diffaudit::comparison::{compare_models, fold_metric_matrix, Alpha, MetricMatrix};
use diffaudit::error::{AuditError, Result};
use diffaudit::ingestion::{build_error_matrix, load_ground_truth, load_metadata, load_predictions, load_ratings};
use diffaudit::permutation::stratified_permutation_test;
use diffaudit::quality::{
    combined_blur_score, duplicate_pairs, hair_flag, scan_files, threshold_sweep, CombineWeights, WaveletConfig,
    DEFAULT_BLUR_THRESHOLD, DEFAULT_EDGE_THRESHOLD, DEFAULT_HAIR_PERCENTILE,
};
use diffaudit::report::{
    agreement_report, load_groups, lowest_scores, metadata_summary, render_comparison, render_duplicates,
    JointErrorReport, QualityReport, SkippedImage, LOWEST_LISTED,
};
use diffaudit::service::StudyConfig;

const EXIT_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "diffaudit", version, about = "Dataset difficulty and quality audit toolkit")]
struct Cli {
    /// Seed for every random draw in this invocation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Also write reports (text, JSON and CSV tables) into this directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the JSON report instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Images misclassified by every model, with a stratified permutation test.
    JointErrors(JointErrorsArgs),
    /// Consensus, contingency tables and kappa statistics per image group.
    Agreement(AgreementArgs),
    /// Blur scores, threshold sweep, hair flags and duplicates for a folder of images.
    Quality(QualityArgs),
    /// Near-duplicate candidates by difference hash.
    Duplicates(DuplicatesArgs),
    /// Friedman test and Nemenyi critical difference over a metric matrix.
    CompareModels(CompareArgs),
    /// Class frequencies by sex, age bucket and site.
    MetadataSummary(MetadataArgs),
    /// Run the blinded diagnosis-collection service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct JointErrorsArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    permutations: u64,
    /// Softmax-average the folds of each model before the argmax.
    #[arg(long)]
    aggregate_folds: bool,
}

#[derive(Args)]
struct AgreementArgs {
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// `image,group` CSV; without it all rated cases form one group.
    #[arg(long)]
    groups: Option<PathBuf>,
}

#[derive(Args)]
struct QualityArgs {
    #[arg(long)]
    images: PathBuf,
    /// Ids of images annotated as blurred, one per line.
    #[arg(long)]
    annotated_blurred: Option<PathBuf>,
    /// Decision threshold on the combined score.
    #[arg(long, default_value_t = DEFAULT_BLUR_THRESHOLD, allow_negative_numbers = true)]
    threshold: f64,
    /// Comma-separated sweep thresholds (default -2.0 to 2.0 by 0.1).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_HAIR_PERCENTILE)]
    hair_percentile: f64,
    #[arg(long, default_value_t = 4)]
    max_distance: u32,
    #[arg(long, default_value_t = DEFAULT_EDGE_THRESHOLD)]
    edge_threshold: f64,
    #[arg(long, default_value_t = 1.0)]
    laplacian_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    wavelet_weight: f64,
    #[arg(long, default_value_t = 0.0)]
    fourier_weight: f64,
}

#[derive(Args)]
struct DuplicatesArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 4)]
    max_distance: u32,
}

#[derive(Args)]
struct CompareArgs {
    /// `model,block,value` CSV (higher is better).
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    metrics: Option<PathBuf>,
    /// Derive per-fold balanced accuracy, plus MP and MV ensembles, from predictions.
    #[arg(long, requires = "truth")]
    predictions: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct MetadataArgs {
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 5)]
    age_bucket: u32,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| AuditError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| AuditError::Io { path, source: e })
}

/// Prints the report and, with `--out`, saves `<stem>.json` and `<stem>.txt`.
fn emit<T: Serialize>(cli: &Cli, stem: &str, report: &T, text: &str) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir).map_err(|e| AuditError::Io {
            path: dir.clone(),
            source: e,
        })?;
        write_file(dir, &format!("{stem}.json"), json.as_bytes())?;
        write_file(dir, &format!("{stem}.txt"), text.as_bytes())?;
    }
    let mut stdout = std::io::stdout().lock();
    let _ = if cli.json {
        writeln!(stdout, "{json}")
    } else {
        write!(stdout, "{text}")
    };
    Ok(())
}

fn joint_errors(cli: &Cli, a: &JointErrorsArgs) -> Result<()> {
    let truth = load_ground_truth(open(&a.truth)?)?;
    let preds = load_predictions(open(&a.predictions)?)?;
    let m = build_error_matrix(&preds, &truth, a.aggregate_folds)?;
    let test = stratified_permutation_test(&m, a.permutations, cli.seed)?;
    let report = JointErrorReport::new(&m, test);
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir).map_err(|e| AuditError::Io {
            path: dir.clone(),
            source: e,
        })?;
        let mut list = report.joint_error_images.join("\n");
        list.push('\n');
        write_file(dir, "joint_error_images.txt", list.as_bytes())?;
    }
    emit(cli, "joint_errors", &report, &report.render_text())
}

fn agreement(cli: &Cli, a: &AgreementArgs) -> Result<()> {
    let truth = load_ground_truth(open(&a.truth)?)?;
    let records = load_ratings(open(&a.ratings)?)?;
    let groups = match &a.groups {
        Some(p) => load_groups(open(p)?)?,
        None => {
            let mut cases: Vec<String> = Vec::new();
            for r in &records {
                if !cases.contains(&r.case_id) {
                    cases.push(r.case_id.clone());
                }
            }
            vec![("all".to_string(), cases)]
        }
    };
    let report = agreement_report(&records, &truth, &groups)?;
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir).map_err(|e| AuditError::Io {
            path: dir.clone(),
            source: e,
        })?;
        for g in &report.groups {
            write_file(dir, &format!("contingency_{}.csv", g.group), g.table.to_csv().as_bytes())?;
        }
    }
    emit(cli, "agreement", &report, &report.render_text())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| AuditError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(AuditError::Domain(format!("no PNG or JPEG images in {}", dir.display())));
    }
    Ok(files)
}

fn default_grid() -> Vec<f64> {
    (-20..=20).map(|i| i as f64 / 10.0).collect()
}

fn quality(cli: &Cli, a: &QualityArgs) -> Result<()> {
    let files = image_files(&a.images)?;
    let wavelet = WaveletConfig {
        edge_threshold: a.edge_threshold,
    };
    let mut scores = Vec::new();
    let mut hashes = Vec::new();
    let mut skipped = Vec::new();
    for (path, r) in files.iter().zip(scan_files(&files, &wavelet)) {
        match r {
            Ok((s, h)) => {
                hashes.push((s.image_id.clone(), h));
                scores.push(s);
            }
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "image skipped");
                skipped.push(SkippedImage {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                });
            }
        }
    }
    if scores.is_empty() {
        return Err(AuditError::Domain(format!("no image in {} could be scored", a.images.display())));
    }
    let weights = CombineWeights {
        laplacian: a.laplacian_weight,
        wavelet: a.wavelet_weight,
        fourier: a.fourier_weight,
    };
    let combine = combined_blur_score(&mut scores, &weights)?;
    let annotated: BTreeSet<String> = match &a.annotated_blurred {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| AuditError::Io {
                path: p.clone(),
                source: e,
            })?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
        None => BTreeSet::new(),
    };
    let mut grid = a.grid.clone().unwrap_or_else(default_grid);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let sweep = threshold_sweep(&scores, &annotated, &grid)?;
    let below_threshold = scores
        .iter()
        .filter(|s| s.combined_z.is_some_and(|z| z < a.threshold))
        .map(|s| s.image_id.clone())
        .collect();
    let hair_flags = hair_flag(&scores, a.hair_percentile)?;
    let report = QualityReport {
        threshold: a.threshold,
        lowest: lowest_scores(&scores, LOWEST_LISTED),
        duplicates: duplicate_pairs(&hashes, a.max_distance),
        scores,
        combine,
        sweep,
        below_threshold,
        hair_percentile: a.hair_percentile,
        hair_flags,
        skipped,
    };
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir).map_err(|e| AuditError::Io {
            path: dir.clone(),
            source: e,
        })?;
        write_file(dir, "quality_scores.csv", report.scores_csv().as_bytes())?;
        let sweep = serde_json::to_string_pretty(&report.sweep).expect("sweep serializes");
        write_file(dir, "sweep.json", sweep.as_bytes())?;
    }
    emit(cli, "quality", &report, &report.render_text())
}

fn duplicates(cli: &Cli, a: &DuplicatesArgs) -> Result<()> {
    let files = image_files(&a.images)?;
    let wavelet = WaveletConfig::default();
    let mut hashes = Vec::new();
    for (path, r) in files.iter().zip(scan_files(&files, &wavelet)) {
        match r {
            Ok((s, h)) => hashes.push((s.image_id, h)),
            Err(e) => tracing::warn!(path = %path.display(), error = %e, "image skipped"),
        }
    }
    let pairs = duplicate_pairs(&hashes, a.max_distance);
    emit(cli, "duplicates", &pairs, &render_duplicates(&pairs))
}

fn compare(cli: &Cli, a: &CompareArgs) -> Result<()> {
    let alpha = Alpha::from_f64(a.alpha)?;
    let matrix = match (&a.metrics, &a.predictions, &a.truth) {
        (Some(m), _, _) => MetricMatrix::from_csv(open(m)?)?,
        (None, Some(p), Some(t)) => {
            let truth = load_ground_truth(open(t)?)?;
            fold_metric_matrix(&load_predictions(open(p)?)?, &truth)?
        }
        _ => return Err(AuditError::Domain("give --metrics or --predictions with --truth".into())),
    };
    let report = compare_models(matrix, alpha)?;
    emit(cli, "compare_models", &report, &render_comparison(&report))
}

fn metadata(cli: &Cli, a: &MetadataArgs) -> Result<()> {
    let truth = load_ground_truth(open(&a.truth)?)?;
    let meta = load_metadata(open(&a.metadata)?)?;
    let summary = metadata_summary(&meta, &truth, a.age_bucket)?;
    emit(cli, "metadata_summary", &summary, &summary.render_text())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

fn serve(a: &ServeArgs) -> Result<()> {
    let config = StudyConfig::load(&a.config)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| AuditError::Io {
        path: PathBuf::from("<runtime>"),
        source: e,
    })?;
    runtime.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| AuditError::Io {
            path: PathBuf::from(&addr),
            source: e,
        })?;
        let app = diffaudit::service::router(&config)?;
        let bound = listener.local_addr().map_err(|e| AuditError::Io {
            path: PathBuf::from(&addr),
            source: e,
        })?;
        println!(
            "ready: listening on http://{bound} with {} cases; ratings log {}",
            config.cases.len(),
            config.log_path.display()
        );
        let _ = std::io::stdout().flush();
        axum::serve(listener, app)
            .with_graceful_shutdown(shutdown_signal())
            .await
            .map_err(|e| AuditError::Io {
                path: PathBuf::from(&addr),
                source: e,
            })
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::JointErrors(a) => joint_errors(&cli, a),
        Command::Agreement(a) => agreement(&cli, a),
        Command::Quality(a) => quality(&cli, a),
        Command::Duplicates(a) => duplicates(&cli, a),
        Command::CompareModels(a) => compare(&cli, a),
        Command::MetadataSummary(a) => metadata(&cli, a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
