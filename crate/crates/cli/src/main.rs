//! Command-line front end: reads CSV/JSON inputs, drives the similarity
//! pipeline, factor-graph refinement, and evaluation, and writes matrices,
//! reports, and heatmaps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use simgraph::error::{Error, Result};
use simgraph::eval::{
    average_precision, generate_scenario, pr_curve, run_experiment, ExperimentInputs,
    ExperimentReport, Mode, ScenarioParams,
};
use simgraph::graph::optimize_patched;
use simgraph::io;
use simgraph::pipeline::{
    intra_from_descriptors, intra_from_poses, pairwise_similarities, standardize,
};
use simgraph::types::{FactorWeights, IntraKind, IntraSetSimilarities, ProblemSpec};

const EXIT_CODE_HELP: &str = "\
Exit codes:
  0  success
  2  command-line usage error
  3  file I/O failure
  4  malformed input file (parse, format, or value-range violations)
  5  ground truth without a single positive cell
  6  mismatched matrix shapes
  7  graph exceeds the factor cap
  8  invalid parameter values
  9  numerical failure inside the solver";

#[derive(Parser)]
#[command(
    name = "simgraph",
    version,
    about = "Refines place-recognition similarity matrices with a factor graph",
    after_long_help = EXIT_CODE_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark scenario to a directory
    Generate(GenerateArgs),
    /// Compute a pairwise similarity matrix from two descriptor files
    Similarities(SimilaritiesArgs),
    /// Refine a similarity matrix with a factor graph
    Optimize(OptimizeArgs),
    /// Score a similarity matrix against binary ground truth
    Eval(EvalArgs),
    /// Run every refinement mode on a generated scenario directory
    Compare(CompareArgs),
    /// Render a similarity matrix as a grayscale PGM image
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory, created if absent. Writes db_descriptors.csv,
    /// q_descriptors.csv, db_poses.csv, q_poses.csv, ground_truth.csv.
    #[arg(long)]
    out: PathBuf,
    /// RNG seed; the same seed reproduces every file byte for byte
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of distinct places along the path
    #[arg(long, default_value_t = ScenarioParams::default().places)]
    places: usize,
    /// Descriptor dimensionality
    #[arg(long, default_value_t = ScenarioParams::default().dim)]
    dim: usize,
    /// Meters between consecutive places
    #[arg(long, default_value_t = ScenarioParams::default().spacing)]
    spacing: f64,
    /// Same-place radius in meters (drives the ground truth)
    #[arg(long, default_value_t = ScenarioParams::default().radius)]
    radius: f64,
    /// Number of re-traversed sub-paths in the query pass
    #[arg(long, default_value_t = ScenarioParams::default().loop_segments)]
    loop_segments: usize,
    /// Places per re-traversed sub-path
    #[arg(long, default_value_t = ScenarioParams::default().loop_length)]
    loop_length: usize,
    /// Number of stops (repeated poses) in the query pass
    #[arg(long, default_value_t = ScenarioParams::default().stop_segments)]
    stop_segments: usize,
    /// Extra repeated frames per stop
    #[arg(long, default_value_t = ScenarioParams::default().stop_length)]
    stop_length: usize,
    /// Magnitude of the constant appearance offset on query descriptors
    #[arg(long, default_value_t = ScenarioParams::default().condition_shift)]
    condition_shift: f64,
    /// Standard deviation of i.i.d. descriptor noise
    #[arg(long, default_value_t = ScenarioParams::default().noise_sigma)]
    noise_sigma: f64,
}

#[derive(Args)]
struct SimilaritiesArgs {
    /// Database descriptor CSV, one image per line
    #[arg(long)]
    db_desc: PathBuf,
    /// Query descriptor CSV, one image per line
    #[arg(long)]
    q_desc: PathBuf,
    /// Z-score each descriptor set per dimension before comparing
    #[arg(long)]
    standardize: bool,
    /// Output CSV path for the similarity matrix
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Initial similarity matrix CSV, database rows by query columns
    #[arg(long)]
    matrix: PathBuf,
    /// Problem configuration JSON; absent keys take built-in defaults
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Intra-database similarities as a symmetric CSV matrix
    #[arg(long, group = "intra_db")]
    intra_db_matrix: Option<PathBuf>,
    /// Intra-database similarities from a pose CSV, thresholded by --radius
    #[arg(long, group = "intra_db")]
    intra_db_poses: Option<PathBuf>,
    /// Intra-database similarities from a descriptor CSV (cosine)
    #[arg(long, group = "intra_db")]
    intra_db_desc: Option<PathBuf>,
    /// Intra-query similarities as a symmetric CSV matrix
    #[arg(long, group = "intra_q")]
    intra_q_matrix: Option<PathBuf>,
    /// Intra-query similarities from a descriptor CSV (cosine)
    #[arg(long, group = "intra_q")]
    intra_q_desc: Option<PathBuf>,
    /// Pose distance threshold in meters for --intra-db-poses
    #[arg(long, default_value_t = 10.0)]
    radius: f64,
    /// Add sequence factors, configured by the spec's `seq` entry (or the
    /// built-in default). Without this flag the spec's `seq` entry is
    /// ignored.
    #[arg(long)]
    seq: bool,
    /// Also write PGM heatmaps of the input and output matrices
    #[arg(long)]
    heatmaps: bool,
    /// Output directory for optimized.csv and report.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Similarity matrix CSV to score
    #[arg(long)]
    matrix: PathBuf,
    /// Binary ground-truth CSV of the same shape
    #[arg(long)]
    ground_truth: PathBuf,
    /// Output directory for pr_curve.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Scenario directory holding the five files written by `generate`
    #[arg(long)]
    dir: PathBuf,
    /// Problem configuration JSON shared by all optimizing modes
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Pose distance threshold for the intra-database similarities; must
    /// match the radius the scenario was generated with
    #[arg(long, default_value_t = ScenarioParams::default().radius)]
    radius: f64,
    /// Output directory for summary.json and summary.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Similarity matrix CSV to render
    #[arg(long)]
    matrix: PathBuf,
    /// Output PGM path
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    // Rust ignores SIGPIPE, which turns `simgraph ... | head` into a panic
    // on the first write after the reader closes. Restore the default
    // disposition so pipelines end the process quietly, as for any
    // standard Unix tool.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Similarities(args) => cmd_similarities(args),
        Command::Optimize(args) => cmd_optimize(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Heatmap(args) => cmd_heatmap(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let params = ScenarioParams {
        places: args.places,
        dim: args.dim,
        spacing: args.spacing,
        radius: args.radius,
        loop_segments: args.loop_segments,
        loop_length: args.loop_length,
        stop_segments: args.stop_segments,
        stop_length: args.stop_length,
        condition_shift: args.condition_shift,
        noise_sigma: args.noise_sigma,
    };
    let scenario = generate_scenario(&params, args.seed)?;
    create_dir(&args.out)?;
    let gt = scenario.ground_truth.values().mapv(|v| v as f64);
    let files = [
        ("db_descriptors.csv", scenario.db_descriptors.vectors().view()),
        ("q_descriptors.csv", scenario.q_descriptors.vectors().view()),
        ("db_poses.csv", scenario.db_poses.positions().view()),
        ("q_poses.csv", scenario.q_poses.positions().view()),
        ("ground_truth.csv", gt.view()),
    ];
    for (name, values) in files {
        io::write_matrix_csv(&args.out.join(name), values)?;
    }
    println!(
        "wrote scenario (seed {}): {} database images, {} query images, {} positives -> {}",
        args.seed,
        scenario.db_descriptors.count(),
        scenario.q_descriptors.count(),
        scenario.ground_truth.positives(),
        args.out.display()
    );
    Ok(())
}

fn cmd_similarities(args: SimilaritiesArgs) -> Result<()> {
    let db = io::read_descriptors_csv(&args.db_desc)?;
    let q = io::read_descriptors_csv(&args.q_desc)?;
    let matrix = if args.standardize {
        let (db_std, q_std) = standardize(&db, &q)?;
        pairwise_similarities(&db_std, &q_std)?
    } else {
        pairwise_similarities(&db, &q)?
    };
    io::write_matrix_csv(&args.out, matrix.values().view())?;
    println!(
        "wrote {}x{} similarity matrix -> {}",
        matrix.rows(),
        matrix.cols(),
        args.out.display()
    );
    Ok(())
}

/// Loads one side's intra-set similarities from whichever source flag was
/// given. `radius` only applies to the pose source.
fn load_intra(
    matrix: Option<&PathBuf>,
    poses: Option<&PathBuf>,
    desc: Option<&PathBuf>,
    radius: f64,
) -> Result<Option<IntraSetSimilarities>> {
    if let Some(path) = matrix {
        return Ok(Some(io::read_intra_csv(path, IntraKind::FromDescriptors)?));
    }
    if let Some(path) = poses {
        return Ok(Some(intra_from_poses(&io::read_poses_csv(path)?, radius)?));
    }
    if let Some(path) = desc {
        return Ok(Some(intra_from_descriptors(&io::read_descriptors_csv(path)?)?));
    }
    Ok(None)
}

fn cmd_optimize(args: OptimizeArgs) -> Result<()> {
    let s_hat = io::read_similarity_csv(&args.matrix)?;
    let intra_db = load_intra(
        args.intra_db_matrix.as_ref(),
        args.intra_db_poses.as_ref(),
        args.intra_db_desc.as_ref(),
        args.radius,
    )?;
    let intra_q = load_intra(args.intra_q_matrix.as_ref(), None, args.intra_q_desc.as_ref(), 0.0)?;

    let mut spec = match &args.spec {
        Some(path) => io::read_spec_json(path)?,
        None => {
            let mut spec = ProblemSpec::default();
            // The built-in database-side weights assume binary
            // pose-derived similarities; continuous sources get the
            // gentler descriptor preset.
            let db_is_continuous = args.intra_db_matrix.is_some() || args.intra_db_desc.is_some();
            if db_is_continuous {
                spec.weights = FactorWeights::default().with_descriptor_db();
            }
            spec
        }
    };
    spec.seq = if args.seq { Some(spec.seq.take().unwrap_or_default()) } else { None };

    create_dir(&args.out)?;
    let (optimized, report) = optimize_patched(&s_hat, intra_db.as_ref(), intra_q.as_ref(), &spec)?;
    io::write_matrix_csv(&args.out.join("optimized.csv"), optimized.values().view())?;
    io::write_json(&args.out.join("report.json"), &report)?;
    if args.heatmaps {
        io::write_heatmap_pgm(&args.out.join("input.pgm"), &s_hat)?;
        io::write_heatmap_pgm(&args.out.join("optimized.pgm"), &optimized)?;
    }
    println!(
        "optimized {}x{} matrix: {} factors, {} iterations, error {:.6e} -> {:.6e}",
        s_hat.rows(),
        s_hat.cols(),
        report.factor_count,
        report.iterations,
        report.initial_error,
        report.final_error
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let scores = io::read_similarity_csv(&args.matrix)?;
    let gt = io::read_ground_truth_csv(&args.ground_truth)?;
    let ap = average_precision(&scores, &gt)?;
    let curve = pr_curve(&scores, &gt)?;
    create_dir(&args.out)?;
    io::write_pr_curve_csv(&args.out.join("pr_curve.csv"), &curve)?;
    println!("average precision: {ap}");
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let db_descriptors = io::read_descriptors_csv(&args.dir.join("db_descriptors.csv"))?;
    let q_descriptors = io::read_descriptors_csv(&args.dir.join("q_descriptors.csv"))?;
    let db_poses = io::read_poses_csv(&args.dir.join("db_poses.csv"))?;
    let ground_truth = io::read_ground_truth_csv(&args.dir.join("ground_truth.csv"))?;
    let spec = match &args.spec {
        Some(path) => io::read_spec_json(path)?,
        None => ProblemSpec::default(),
    };
    let inputs = ExperimentInputs {
        db_poses: &db_poses,
        db_descriptors: &db_descriptors,
        q_descriptors: &q_descriptors,
        ground_truth: &ground_truth,
        intra_radius: args.radius,
    };

    create_dir(&args.out)?;
    let mut reports: Vec<ExperimentReport> = Vec::new();
    println!("{:<16} {:<12} {:>8} {:>10} {:>10}", "mode", "descriptors", "ap", "factors", "iters");
    for standardized in [false, true] {
        for mode in Mode::STAGES {
            let report = run_experiment(&inputs, &spec, mode, standardized)?;
            println!(
                "{:<16} {:<12} {:>8.4} {:>10} {:>10}",
                mode.name(),
                if standardized { "standardized" } else { "raw" },
                report.ap,
                report.factor_count.map_or_else(|| "-".into(), |v| v.to_string()),
                report.iterations.map_or_else(|| "-".into(), |v| v.to_string()),
            );
            reports.push(report);
        }
    }
    io::write_json(&args.out.join("summary.json"), &reports)?;
    write_summary_csv(&args.out.join("summary.csv"), &reports)?;
    println!("wrote {}", args.out.join("summary.json").display());
    Ok(())
}

fn write_summary_csv(path: &Path, reports: &[ExperimentReport]) -> Result<()> {
    let mut text = String::from(
        "mode,standardized,ap,ap_pairwise,factor_count,iterations,\
         initial_error,final_error,build_seconds,solve_seconds\n",
    );
    for r in reports {
        let opt_u64 = |v: Option<u64>| v.map_or_else(String::new, |v| v.to_string());
        let opt_usize = |v: Option<usize>| v.map_or_else(String::new, |v| v.to_string());
        let opt_f64 = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.mode.name(),
            r.standardized,
            r.ap,
            r.ap_pairwise,
            opt_u64(r.factor_count),
            opt_usize(r.iterations),
            opt_f64(r.initial_error),
            opt_f64(r.final_error),
            r.build_seconds,
            r.solve_seconds,
        ));
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn cmd_heatmap(args: HeatmapArgs) -> Result<()> {
    let matrix = io::read_similarity_csv(&args.matrix)?;
    io::write_heatmap_pgm(&args.out, &matrix)?;
    println!(
        "wrote {}x{} heatmap -> {}",
        matrix.rows(),
        matrix.cols(),
        args.out.display()
    );
    Ok(())
}
