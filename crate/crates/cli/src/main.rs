//! `nncert` — robustness certification for feedforward classifiers.
//!
//! Exit codes: 0 on full success, 2 when some inputs failed individually (the
//! report still covers the rest), 1 on fatal errors (bad arguments, unreadable
//! files, invalid model).

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use nncert::driver::{
    bounds_dump, parse_confidences, report_to_csv, report_to_json, run_batch, Aggregation,
    BoundsDump, CertificationRequest, InputRecord, NoiseSpec, Report, TargetPolicy,
    DEFAULT_GRID_POINTS,
};
use nncert::model::{load_input, load_network};
use nncert::probabilistic::{load_covariance, CertMethod};
use nncert::{Network, Norm, RelaxMode};

#[derive(Parser)]
#[command(
    name = "nncert",
    version,
    about = "Worst-case and probabilistic robustness certificates for feedforward classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify inputs against a model and write a report
    Certify(CertifyArgs),
}

#[derive(Args)]
struct CertifyArgs {
    /// Model JSON file
    #[arg(long, value_name = "FILE")]
    model: PathBuf,

    /// One input JSON file
    #[arg(long, value_name = "FILE", required_unless_present = "inputs")]
    input: Option<PathBuf>,

    /// Directory of input JSON files, processed in file-name order
    #[arg(long, value_name = "DIR")]
    inputs: Option<PathBuf>,

    /// Perturbation norm: inf | 1 | 2
    #[arg(long, default_value = "inf")]
    norm: String,

    /// Relaxation mode: fastlin | adaptive
    #[arg(long, default_value = "adaptive")]
    mode: String,

    /// Noise family: bounded | gaussian
    #[arg(long, default_value = "bounded")]
    noise: String,

    /// Covariance JSON file ({"diag": [...]} or {"full": [[...]]}); gaussian only
    #[arg(long, value_name = "FILE")]
    cov: Option<PathBuf>,

    /// Certificate method: hoeffding | gaussian | convolution
    #[arg(long, default_value = "hoeffding")]
    method: String,

    /// Comma-separated confidence levels in (0, 1]
    #[arg(long, default_value = "0.9999,0.75,0.5,0.25,0.05")]
    confidences: String,

    /// Attack targets: all | random | comma-separated class ids
    #[arg(long, default_value = "all")]
    targets: String,

    /// Aggregation across targets: min | union
    #[arg(long, default_value = "min")]
    agg: String,

    /// Upper end of the radius search
    #[arg(long, default_value_t = 1.0)]
    eps_max: f64,

    /// Relative tolerance of the radius searches
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,

    /// Seed for every randomized choice in the run
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Report JSON output path
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    /// Also write the report as a CSV table
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,

    /// Cross-check each top-confidence radius by Monte-Carlo with N samples
    #[arg(long, value_name = "N")]
    validate_mc: Option<usize>,

    /// Write per-layer pre-activation bounds at each input's worst-case radius
    #[arg(long, value_name = "FILE")]
    dump_bounds: Option<PathBuf>,

    /// Lattice size of the convolution method
    #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
    grid_points: usize,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Certify(args) => certify(args),
    }
}

fn read_record(path: &Path, source: String) -> Result<InputRecord> {
    let file =
        load_input(path).with_context(|| format!("loading input {}", path.display()))?;
    Ok(InputRecord {
        x0: Array1::from_vec(file.x0),
        label: file.label,
        source: Some(source),
    })
}

fn collect_records(args: &CertifyArgs) -> Result<Vec<InputRecord>> {
    let mut records = Vec::new();
    if let Some(path) = &args.input {
        records.push(read_record(path, path.display().to_string())?);
    }
    if let Some(dir) = &args.inputs {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("reading input directory {}", dir.display()))?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|entry| entry.path())
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            records.push(read_record(&path, name)?);
        }
    }
    if records.is_empty() {
        bail!("no inputs: provide --input FILE and/or a --inputs directory with .json files");
    }
    Ok(records)
}

fn build_request(args: &CertifyArgs) -> Result<CertificationRequest> {
    let noise = match args.noise.as_str() {
        "bounded" => {
            if args.cov.is_some() {
                bail!("--cov only applies to gaussian noise");
            }
            NoiseSpec::Bounded
        }
        "gaussian" => {
            let base_cov = match &args.cov {
                Some(path) => Some(
                    load_covariance(path)
                        .with_context(|| format!("loading covariance {}", path.display()))?,
                ),
                None => None,
            };
            NoiseSpec::Gaussian { base_cov }
        }
        other => bail!("unknown noise {other:?} (expected bounded|gaussian)"),
    };
    Ok(CertificationRequest {
        norm: Norm::parse(&args.norm)?,
        mode: RelaxMode::parse(&args.mode)?,
        noise,
        method: CertMethod::parse(&args.method)?,
        aggregation: Aggregation::parse(&args.agg)?,
        target_policy: TargetPolicy::parse(&args.targets)?,
        confidences: parse_confidences(&args.confidences)?,
        eps_max: args.eps_max,
        tolerance: args.tol,
        seed: args.seed,
        grid_points: args.grid_points,
        validate_mc: args.validate_mc,
    })
}

fn write_dump(
    path: &Path,
    net: &Network,
    records: &[InputRecord],
    report: &Report,
    req: &CertificationRequest,
) -> Result<()> {
    let mut dumps: Vec<BoundsDump> = Vec::with_capacity(report.inputs.len());
    for r in &report.inputs {
        dumps.push(bounds_dump(
            net,
            &records[r.index].x0,
            r.worst_case_radius,
            req.norm,
            req.mode,
            r.index,
        )?);
    }
    let mut text = serde_json::to_string_pretty(&dumps).expect("dump serializes");
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn certify(args: CertifyArgs) -> Result<ExitCode> {
    let net = load_network(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let records = collect_records(&args)?;
    let request = build_request(&args)?;
    let report = run_batch(&net, &records, &request)?;

    std::fs::write(&args.out, report_to_json(&report))
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.csv {
        std::fs::write(path, report_to_csv(&report))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.dump_bounds {
        write_dump(path, &net, &records, &report, &request)?;
    }

    for f in &report.failures {
        eprintln!(
            "input {}{}: {}",
            f.index,
            f.source
                .as_deref()
                .map(|s| format!(" ({s})"))
                .unwrap_or_default(),
            f.error
        );
    }
    println!(
        "certified {} of {} input(s); report written to {}",
        report.inputs.len(),
        records.len(),
        args.out.display()
    );
    Ok(if report.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
