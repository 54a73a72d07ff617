use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hypool::cli::{load_config, run_ablation, run_experiment, AblationAxis, RunReport};
use hypool::data::{generate_hierarchy, gromov_delta, load_bundle, save_bundle, HierarchyGenSpec};
use hypool::verify::run_verify_selected;
use hypool::Result;

#[derive(Parser)]
#[command(name = "hypool", version, about = "Hyperbolic bilinear pooling experiments and audits")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate an experiment from a JSON config
    Run(RunArgs),
    /// Run the numerical audit suite and write its reports
    Verify(VerifyArgs),
    /// Estimate the four-point hyperbolicity of a graph bundle
    Delta(DeltaArgs),
    /// Generate a synthetic hierarchy bundle
    GenHierarchy(GenArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment config
    #[arg(long)]
    config: PathBuf,
    /// Sweep one axis instead of a single run: curvature, kr_dim, or kernel
    #[arg(long)]
    ablate: Option<AblationAxis>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Comma-separated check tags; empty runs everything
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Report directory
    #[arg(long, default_value = "verify_out")]
    out: PathBuf,
}

#[derive(Args)]
struct DeltaArgs {
    /// Bundle directory (meta.json, features.bin, ...)
    #[arg(long)]
    bundle: PathBuf,
    /// Node budget before distance matrices are sampled
    #[arg(long, default_value_t = 400)]
    sample_nodes: usize,
    /// Quadruple budget before the four-point scan is sampled
    #[arg(long, default_value_t = 2000)]
    quadruples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    /// JSON generator spec; defaults when omitted
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Destination bundle directory
    #[arg(long)]
    out: PathBuf,
}

fn print_report(report: &RunReport) {
    for m in &report.per_seed {
        println!(
            "seed {}: test {} = {:.4} (best val {:.4} at epoch {}, ran {})",
            m.seed, report.metric, m.test_metric, m.best_val, m.best_epoch, m.epochs_run
        );
    }
    match report.std {
        Some(s) => println!("{}: {:.4} +/- {:.4}", report.metric, report.mean, s),
        None => println!("{}: {:.4}", report.metric, report.mean),
    }
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let cfg = load_config(&args.config)?;
    match args.ablate {
        Some(axis) => {
            for (label, report) in run_ablation(&cfg, axis)? {
                println!("== {label} ==");
                print_report(&report);
            }
        }
        None => print_report(&run_experiment(&cfg)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: &VerifyArgs) -> Result<ExitCode> {
    let summary = run_verify_selected(&args.out, &args.only)?;
    for r in &summary.records {
        println!(
            "[{}] {} measured={:.6e} bound={:.6e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.measured,
            r.bound
        );
    }
    println!(
        "{} checks, {} failed; reports in {}",
        summary.records.len(),
        summary.failed,
        args.out.display()
    );
    Ok(if summary.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_delta(args: &DeltaArgs) -> Result<ExitCode> {
    let bundle = load_bundle(&args.bundle)?;
    let delta = gromov_delta(&bundle, args.sample_nodes, args.quadruples, args.seed)?;
    println!("delta = {delta}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen(args: &GenArgs) -> Result<ExitCode> {
    let spec: HierarchyGenSpec = match &args.spec {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => HierarchyGenSpec::default(),
    };
    let bundle = generate_hierarchy(&spec)?;
    save_bundle(&bundle, &args.out)?;
    println!(
        "wrote {} ({} nodes, {} edges, {} classes) to {}",
        bundle.meta.name,
        bundle.meta.n,
        bundle.edges.len(),
        bundle.meta.num_classes,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match &cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Delta(a) => cmd_delta(a),
        Cmd::GenHierarchy(a) => cmd_gen(a),
    };
    match run {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
