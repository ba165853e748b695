//! Command-line pipeline: detect expression branches and onsets in
//! per-cell fluorescence tables, synthesize benchmark data, train the
//! branch classifier, compare against the global-threshold baseline, and
//! render lineage trees as SVG.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use degeo::detector::{DetectOptions, StopReason, StoppingRule, DEFAULT_SVR_THRESHOLD};
use degeo::eval;
use degeo::lineage::{CellId, LineageTree};
use degeo::model::Hyperparams;
use degeo::pipeline;
use degeo::refine::OnsetReport;
use degeo::render::render_svg;
use degeo::sampler::{derive_seed, fit, ChainConfig, FitOptions};
use degeo::scoring::ScoreTree;
use degeo::svr::{SvrConfig, SvrModel};
use degeo::synth;

#[derive(Parser)]
#[command(
    name = "degeo",
    version,
    about = "Gene-expression onset detection on cell lineage trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect expression branches and refine onsets in one data file.
    Detect(DetectArgs),
    /// Generate a benchmark data set with ground-truth side-cars.
    Synth(SynthArgs),
    /// Train the branch classifier on mimic trees and pick its threshold.
    Train(TrainArgs),
    /// Compare branch detection against the global-threshold baseline.
    Eval(EvalArgs),
    /// Render a lineage tree (optionally with detection results) as SVG.
    Render(RenderArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputKind {
    /// Per-cell time series table (cell, time, intensity column).
    Timeseries,
    /// Pre-scored table (cell, lifetime, score).
    Scores,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stopping {
    Svr,
    Beta,
}

#[derive(Args)]
struct ChainArgs {
    /// Base seed for all randomness in this run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long, default_value_t = 5000)]
    iterations: usize,
    #[arg(long, default_value_t = 1000)]
    burn_in: usize,
    #[arg(long, default_value_t = 1)]
    thinning: usize,
    #[arg(long, default_value_t = 0.2)]
    rhat_tol: f64,
    #[arg(long, default_value_t = 200)]
    rho_grid: usize,
}

impl ChainArgs {
    fn to_config(&self) -> ChainConfig {
        ChainConfig {
            n_chains: self.chains,
            max_iterations: self.iterations,
            burn_in: self.burn_in,
            thinning: self.thinning,
            rng_seed: self.seed,
            rhat_tolerance: self.rhat_tol,
            rho_grid_size: self.rho_grid,
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    /// Input table.
    #[arg(long)]
    input: PathBuf,
    /// Intensity column of time-series inputs.
    #[arg(long, default_value = "blot")]
    column: String,
    #[arg(long, value_enum, default_value_t = InputKind::Timeseries)]
    input_kind: InputKind,
    #[arg(long, value_enum, default_value_t = Stopping::Svr)]
    stopping: Stopping,
    /// Trained classifier (required for the svr stopping rule).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SVR_THRESHOLD)]
    threshold: f64,
    /// Hyperparameters as a key=value file; data-driven defaults otherwise.
    #[arg(long)]
    hyper: Option<PathBuf>,
    /// Output directory (overridden by DEGEO_OUT).
    #[arg(long, default_value = "degeo-out")]
    out: PathBuf,
    /// Skip branch detection: refine onsets over the whole tree with noise
    /// fitted from the earliest fifth of the observations.
    #[arg(long)]
    refine_only: bool,
    /// Also write the first-round posterior sample as a flat table.
    #[arg(long)]
    dump_posterior: bool,
    /// Also write the per-cell scores as a two-column table.
    #[arg(long)]
    dump_scores: bool,
    #[command(flatten)]
    chain: ChainArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Benchmark protocol: 1 mimic scores, 2 model-law scores, 3 planted
    /// time series.
    #[arg(long)]
    dataset: u8,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the built-in annotated template.
    #[arg(long, default_value_t = 7)]
    template_seed: u64,
    /// Generation priors for data set 2 (key=value file).
    #[arg(long)]
    hyper: Option<PathBuf>,
    #[arg(long, default_value = "degeo-out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 120)]
    trees: usize,
    #[arg(long, default_value_t = 7)]
    template_seed: u64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 10.0)]
    c: f64,
    /// Kernel bandwidth; median pairwise distance when omitted.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long, default_value = "degeo-out")]
    out: PathBuf,
    #[command(flatten)]
    chain: ChainArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of data-set-3 files (tree_NNN.csv with truth_NNN.csv).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "blot")]
    column: String,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SVR_THRESHOLD)]
    threshold: f64,
    /// Score quantile of the baseline.
    #[arg(long, default_value_t = 0.95)]
    quantile: f64,
    #[arg(long, default_value = "degeo-out")]
    out: PathBuf,
    #[command(flatten)]
    chain: ChainArgs,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "blot")]
    column: String,
    /// branches.csv from a detect run; accepted branches get outlined.
    #[arg(long)]
    branches: Option<PathBuf>,
    /// onsets.csv from a detect run; onset points get marked.
    #[arg(long)]
    onsets: Option<PathBuf>,
    /// Output SVG path.
    #[arg(long, default_value = "lineage.svg")]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Detect(args) => cmd_detect(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Render(args) => cmd_render(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

/// The output directory, honoring the DEGEO_OUT override.
fn out_dir(requested: &Path) -> Result<PathBuf> {
    let dir = match std::env::var_os("DEGEO_OUT") {
        Some(v) => PathBuf::from(v),
        None => requested.to_path_buf(),
    };
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn load_hyper(path: &Option<PathBuf>) -> Result<Option<Hyperparams>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            Ok(Some(Hyperparams::from_key_value_str(&text)?))
        }
    }
}

#[derive(Serialize)]
struct BranchRecord {
    index: usize,
    m_star: String,
    accepted: bool,
    svr_output: Option<f64>,
    mu: f64,
    sigma1_sq: f64,
    sigma2_sq: f64,
    beta: f64,
    rho: f64,
    posterior_prob_m: f64,
    n_branch_cells: f64,
    mean_elevation: f64,
    frac_extreme: f64,
    converged_at: usize,
}

#[derive(Serialize)]
struct DetectManifest {
    command: String,
    input: String,
    input_sha256: String,
    column: String,
    input_kind: String,
    stopping: String,
    threshold: f64,
    model: Option<String>,
    model_sha256: Option<String>,
    seed: u64,
    chains: usize,
    iterations: usize,
    burn_in: usize,
    thinning: usize,
    rhat_tolerance: f64,
    rho_grid_size: usize,
    stop_reason: String,
    branches: Vec<BranchRecord>,
    rhats_per_round: Vec<Vec<(String, f64)>>,
    noise_mu: Option<f64>,
    noise_sigma_sq: Option<f64>,
    outputs: Vec<String>,
}

fn write_branches_csv(path: &Path, branches: &[BranchRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record([
        "index",
        "m_star",
        "accepted",
        "svr_output",
        "mu",
        "sigma1_sq",
        "sigma2_sq",
        "beta",
        "rho",
        "posterior_prob_m",
        "n_branch_cells",
        "mean_elevation",
        "frac_extreme",
        "converged_at",
    ])?;
    for b in branches {
        wtr.write_record([
            b.index.to_string(),
            b.m_star.clone(),
            b.accepted.to_string(),
            b.svr_output.map(|v| format!("{v}")).unwrap_or_default(),
            format!("{}", b.mu),
            format!("{}", b.sigma1_sq),
            format!("{}", b.sigma2_sq),
            format!("{}", b.beta),
            format!("{}", b.rho),
            format!("{}", b.posterior_prob_m),
            format!("{}", b.n_branch_cells),
            format!("{}", b.mean_elevation),
            format!("{}", b.frac_extreme),
            b.converged_at.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_onset_tables(dir: &Path, report: &OnsetReport) -> Result<(PathBuf, PathBuf)> {
    let onsets_path = dir.join("onsets.csv");
    let mut wtr = csv::Writer::from_path(&onsets_path)?;
    wtr.write_record(["branch_root", "cell", "time", "kind", "segment_id"])?;
    for branch in &report.branches {
        for (cell, time, seg) in &branch.onsets {
            wtr.write_record([
                branch.root.as_str(),
                cell.as_str(),
                &time.to_string(),
                "onset",
                &seg.to_string(),
            ])?;
        }
        for (cell, time, seg) in &branch.ends {
            wtr.write_record([
                branch.root.as_str(),
                cell.as_str(),
                &time.to_string(),
                "end",
                &seg.to_string(),
            ])?;
        }
    }
    wtr.flush()?;

    let segments_path = dir.join("segments.csv");
    let mut wtr = csv::Writer::from_path(&segments_path)?;
    wtr.write_record([
        "branch_root",
        "segment_id",
        "start_cell",
        "start_time",
        "end_cell",
        "end_time",
        "n_valid_points",
        "n_extreme_points",
    ])?;
    for branch in &report.branches {
        for (id, seg) in branch.segments.iter().enumerate() {
            wtr.write_record([
                branch.root.as_str(),
                &id.to_string(),
                seg.start.0.as_str(),
                &seg.start.1.to_string(),
                seg.end.0.as_str(),
                &seg.end.1.to_string(),
                &seg.n_valid_points.to_string(),
                &seg.n_extreme_points.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok((onsets_path, segments_path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    Ok(())
}

/// Reproducibility record shared by the non-detect subcommands.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    settings: Vec<(String, String)>,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            settings: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn setting<T: std::fmt::Display>(mut self, key: &str, value: T) -> Self {
        self.settings.push((key.to_string(), value.to_string()));
        self
    }

    fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs
            .push((path.display().to_string(), sha256_file(path)?));
        Ok(self)
    }

    fn write(mut self, dir: &Path, outputs: Vec<String>) -> Result<()> {
        self.outputs = outputs;
        write_json(&dir.join("manifest.json"), &self)
    }
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    if !args.input.exists() {
        bail!("input file not found: {}", args.input.display());
    }
    let dir = out_dir(&args.out)?;
    let hyper = load_hyper(&args.hyper)?;
    let chain = args.chain.to_config();

    let (score_tree, lineage) = match args.input_kind {
        InputKind::Timeseries => {
            let lineage = LineageTree::parse_file(&args.input, &args.column)?;
            (ScoreTree::from_lineage(&lineage)?, Some(lineage))
        }
        InputKind::Scores => {
            let file = fs::File::open(&args.input)?;
            (ScoreTree::read_table(std::io::BufReader::new(file))?, None)
        }
    };

    let mut outputs = Vec::new();

    if args.dump_scores {
        score_tree.write_score_table(fs::File::create(dir.join("scores.csv"))?)?;
        outputs.push("scores.csv".to_string());
    }

    if args.refine_only {
        let lineage = lineage
            .as_ref()
            .context("--refine-only needs a time-series input")?;
        let report = pipeline::refine_only(lineage)?;
        let (o, s) = write_onset_tables(&dir, &report)?;
        outputs.push(o.file_name().unwrap().to_string_lossy().into_owned());
        outputs.push(s.file_name().unwrap().to_string_lossy().into_owned());
        let manifest = DetectManifest {
            command: "detect --refine-only".to_string(),
            input: args.input.display().to_string(),
            input_sha256: sha256_file(&args.input)?,
            column: args.column.clone(),
            input_kind: "timeseries".to_string(),
            stopping: "none".to_string(),
            threshold: args.threshold,
            model: None,
            model_sha256: None,
            seed: chain.rng_seed,
            chains: chain.n_chains,
            iterations: chain.max_iterations,
            burn_in: chain.burn_in,
            thinning: chain.thinning,
            rhat_tolerance: chain.rhat_tolerance,
            rho_grid_size: chain.rho_grid_size,
            stop_reason: "refine-only".to_string(),
            branches: Vec::new(),
            rhats_per_round: Vec::new(),
            noise_mu: Some(report.noise.mu_hat),
            noise_sigma_sq: Some(report.noise.sigma_hat_sq),
            outputs,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        println!(
            "refined onsets over the whole tree; results in {}",
            dir.display()
        );
        return Ok(());
    }

    let model = match (args.stopping, &args.model) {
        (Stopping::Svr, Some(path)) => {
            let file = fs::File::open(path)
                .with_context(|| format!("cannot open model {}", path.display()))?;
            Some(SvrModel::load_json(std::io::BufReader::new(file))?)
        }
        (Stopping::Svr, None) => bail!("--stopping svr needs --model"),
        (Stopping::Beta, _) => None,
    };
    let rule = match &model {
        Some(m) => StoppingRule::Svr {
            model: m,
            threshold: args.threshold,
        },
        None => StoppingRule::Beta,
    };

    if args.dump_posterior {
        let opts = FitOptions {
            chain: chain.clone(),
            hyper: hyper.clone(),
            scale: None,
        };
        let first_fit = fit(&score_tree, &opts)?;
        let path = dir.join("posterior.csv");
        let file = fs::File::create(&path)?;
        first_fit
            .sample
            .write_table(file, &score_tree, first_fit.scale)?;
        outputs.push("posterior.csv".to_string());
    }

    let opts = DetectOptions {
        chain: chain.clone(),
        hyper,
    };
    let outcome = degeo::detector::detect_branches(&score_tree, &rule, &opts)?;

    let branch_records: Vec<BranchRecord> = outcome
        .branches
        .iter()
        .enumerate()
        .map(|(index, b)| BranchRecord {
            index,
            m_star: b.m_star.as_str().to_string(),
            accepted: b.accepted,
            svr_output: b.svr_output,
            mu: b.params.mu,
            sigma1_sq: b.params.sigma1_sq,
            sigma2_sq: b.params.sigma2_sq,
            beta: b.params.beta,
            rho: b.params.rho,
            posterior_prob_m: b.features.posterior_prob_m,
            n_branch_cells: b.features.n_branch_cells,
            mean_elevation: b.features.mean_elevation,
            frac_extreme: b.features.frac_extreme,
            converged_at: b.converged_at,
        })
        .collect();
    write_branches_csv(&dir.join("branches.csv"), &branch_records)?;
    outputs.push("branches.csv".to_string());

    let mut noise = None;
    if let Some(lineage) = &lineage {
        let accepted = outcome.accepted_roots();
        if !accepted.is_empty() {
            let tree = ScoreTree::from_lineage(lineage)?;
            let noise_model = degeo::refine::fit_noise(&tree, &accepted)?;
            let report = degeo::refine::refine_onsets(&tree, &accepted, &noise_model)?;
            let (o, s) = write_onset_tables(&dir, &report)?;
            outputs.push(o.file_name().unwrap().to_string_lossy().into_owned());
            outputs.push(s.file_name().unwrap().to_string_lossy().into_owned());
            noise = Some(noise_model);
        }
    }

    let stop_reason = match &outcome.stop {
        StopReason::Rejected => "rejected".to_string(),
        StopReason::CandidatesExhausted => "candidates-exhausted".to_string(),
        StopReason::ConvergenceFailure { message } => format!("convergence-failure: {message}"),
    };
    let manifest = DetectManifest {
        command: "detect".to_string(),
        input: args.input.display().to_string(),
        input_sha256: sha256_file(&args.input)?,
        column: args.column.clone(),
        input_kind: match args.input_kind {
            InputKind::Timeseries => "timeseries".to_string(),
            InputKind::Scores => "scores".to_string(),
        },
        stopping: match args.stopping {
            Stopping::Svr => "svr".to_string(),
            Stopping::Beta => "beta".to_string(),
        },
        threshold: args.threshold,
        model: args.model.as_ref().map(|p| p.display().to_string()),
        model_sha256: args.model.as_ref().map(|p| sha256_file(p)).transpose()?,
        seed: chain.rng_seed,
        chains: chain.n_chains,
        iterations: chain.max_iterations,
        burn_in: chain.burn_in,
        thinning: chain.thinning,
        rhat_tolerance: chain.rhat_tolerance,
        rho_grid_size: chain.rho_grid_size,
        stop_reason,
        rhats_per_round: outcome.branches.iter().map(|b| b.rhats.clone()).collect(),
        branches: branch_records,
        noise_mu: noise.map(|n| n.mu_hat),
        noise_sigma_sq: noise.map(|n| n.sigma_hat_sq),
        outputs,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;

    if matches!(outcome.stop, StopReason::ConvergenceFailure { .. }) {
        bail!(
            "a fit failed to converge; partial results written to {}",
            dir.display()
        );
    }
    println!(
        "accepted {} branch(es); results in {}",
        outcome.accepted().count(),
        dir.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let dir = out_dir(&args.out)?;
    let mut outputs = Vec::new();
    for i in 0..args.count {
        outputs.push(format!("tree_{i:03}.csv"));
        outputs.push(format!("truth_{i:03}.csv"));
    }
    match args.dataset {
        1 => {
            let template = synth::default_score_template(args.template_seed);
            let trees = synth::gen_mimic_score_trees(&template, args.count, args.seed)?;
            for (i, (tree, truth)) in trees.iter().enumerate() {
                tree.write_table(fs::File::create(dir.join(format!("tree_{i:03}.csv")))?)?;
                truth.write_table(fs::File::create(dir.join(format!("truth_{i:03}.csv")))?)?;
            }
        }
        2 => {
            let template = synth::default_score_template(args.template_seed);
            let hyper = load_hyper(&args.hyper)?.unwrap_or_else(synth::generation_hyper);
            let trees = synth::gen_model_trees(&template.tree, &hyper, args.count, args.seed)?;
            for (i, (tree, truth)) in trees.iter().enumerate() {
                tree.write_table(fs::File::create(dir.join(format!("tree_{i:03}.csv")))?)?;
                truth.write_table(fs::File::create(dir.join(format!("truth_{i:03}.csv")))?)?;
            }
        }
        3 => {
            let template = synth::default_timeseries_template(args.template_seed);
            let trees = synth::gen_planted_timeseries_trees(&template, args.count, args.seed)?;
            for (i, (tree, truth)) in trees.iter().enumerate() {
                tree.write(
                    fs::File::create(dir.join(format!("tree_{i:03}.csv")))?,
                    "blot",
                )?;
                truth.write_table(fs::File::create(dir.join(format!("truth_{i:03}.csv")))?)?;
            }
        }
        other => bail!("unknown dataset type {other}; expected 1, 2 or 3"),
    }
    RunManifest::new("synth")
        .setting("dataset", args.dataset)
        .setting("count", args.count)
        .setting("seed", args.seed)
        .setting("template_seed", args.template_seed)
        .write(&dir, outputs)?;
    println!("wrote {} trees to {}", args.count, dir.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    trees: usize,
    template_seed: u64,
    seed: u64,
    rows: usize,
    true_rows: usize,
    selected_threshold: f64,
    training_error_rate: f64,
    grid: Vec<(f64, f64)>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let dir = out_dir(&args.out)?;
    let chain = args.chain.to_config();
    let svr_config = SvrConfig {
        epsilon: args.epsilon,
        c: args.c,
        bandwidth: args.bandwidth,
        ..Default::default()
    };
    let trained = pipeline::train_classifier(
        args.trees,
        chain.rng_seed,
        args.template_seed,
        &svr_config,
        &chain,
    )?;

    let model_path = dir.join("svr_model.json");
    trained.model.save_json(fs::File::create(&model_path)?)?;

    let mut wtr = csv::Writer::from_path(dir.join("training_rows.csv"))?;
    let mut header: Vec<&str> = degeo::detector::FEATURE_NAMES.to_vec();
    header.push("label");
    header.push("svr_output");
    wtr.write_record(&header)?;
    for (features, label) in &trained.rows {
        let mut rec: Vec<String> = features.to_vec().iter().map(|v| format!("{v}")).collect();
        rec.push(if *label {
            "1".to_string()
        } else {
            "0".to_string()
        });
        rec.push(format!(
            "{}",
            degeo::detector::svr_predict(&trained.model, features)
        ));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;

    let grid: Vec<(f64, f64)> = pipeline::threshold_grid()
        .into_iter()
        .map(|t| {
            let errors = trained
                .rows
                .iter()
                .filter(|(f, l)| (degeo::detector::svr_predict(&trained.model, f) >= t) != *l)
                .count();
            (t, errors as f64 / trained.rows.len().max(1) as f64)
        })
        .collect();
    let report = TrainReport {
        trees: args.trees,
        template_seed: args.template_seed,
        seed: chain.rng_seed,
        rows: trained.rows.len(),
        true_rows: trained.rows.iter().filter(|(_, l)| *l).count(),
        selected_threshold: trained.threshold,
        training_error_rate: trained.training_error_rate,
        grid,
    };
    write_json(&dir.join("training_report.json"), &report)?;
    RunManifest::new("train")
        .setting("trees", args.trees)
        .setting("seed", chain.rng_seed)
        .setting("template_seed", args.template_seed)
        .setting("epsilon", args.epsilon)
        .setting("c", args.c)
        .setting("chains", chain.n_chains)
        .setting("iterations", chain.max_iterations)
        .setting("burn_in", chain.burn_in)
        .write(
            &dir,
            vec![
                "svr_model.json".to_string(),
                "training_rows.csv".to_string(),
                "training_report.json".to_string(),
            ],
        )?;
    println!(
        "trained on {} rows; selected threshold {}; model at {}",
        report.rows,
        report.selected_threshold,
        model_path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dir = out_dir(&args.out)?;
    let chain = args.chain.to_config();
    let model_file = fs::File::open(&args.model)
        .with_context(|| format!("cannot open model {}", args.model.display()))?;
    let model = SvrModel::load_json(std::io::BufReader::new(model_file))?;
    let rule = StoppingRule::Svr {
        model: &model,
        threshold: args.threshold,
    };

    let mut tree_paths: Vec<PathBuf> = fs::read_dir(&args.data)
        .with_context(|| format!("cannot read {}", args.data.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("tree_") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    tree_paths.sort();
    if tree_paths.is_empty() {
        bail!("no tree_*.csv files in {}", args.data.display());
    }

    // Confusions per stratum (true branch count 0..4+) and method.
    let mut degeo_conf = vec![eval::ConfusionCounts::default(); 5];
    let mut apm_conf = vec![eval::ConfusionCounts::default(); 5];
    for (i, tree_path) in tree_paths.iter().enumerate() {
        let truth_path = tree_path.to_string_lossy().replace("tree_", "truth_");
        let truth_path = Path::new(&truth_path);
        if !truth_path.exists() {
            bail!("missing truth side-car for {}", tree_path.display());
        }
        let truth = synth::GroundTruth::read_table(fs::File::open(truth_path)?)?;
        let lineage = LineageTree::parse_file(tree_path, &args.column)?;
        let tree = ScoreTree::from_lineage(&lineage)?;
        let stratum = truth.branch_roots.len().min(4);

        let opts = DetectOptions {
            chain: ChainConfig {
                rng_seed: derive_seed(chain.rng_seed, i as u64),
                ..chain.clone()
            },
            hyper: None,
        };
        let outcome = degeo::detector::detect_branches(&tree, &rule, &opts)?;
        let universe: Vec<CellId> = (0..tree.len())
            .map(|ix| tree.topology().name(ix).clone())
            .collect();
        let expressing: BTreeSet<CellId> = truth.expressing.iter().cloned().collect();
        let predicted: BTreeSet<CellId> = pipeline::predicted_cells(&tree, &outcome)?
            .into_iter()
            .collect();
        degeo_conf[stratum].add(&eval::confusion(&predicted, &expressing, &universe));
        let apm: BTreeSet<CellId> = eval::apm_baseline_scores(&tree, args.quantile)
            .into_iter()
            .collect();
        apm_conf[stratum].add(&eval::confusion(&apm, &expressing, &universe));
    }

    let mut wtr = csv::Writer::from_path(dir.join("comparison.csv"))?;
    wtr.write_record([
        "stratum", "method", "tpr", "fpr", "ppv", "tp", "fp", "tn", "fn",
    ])?;
    for (name, confs) in [("degeo", &degeo_conf), ("apm", &apm_conf)] {
        for (s, conf) in confs.iter().enumerate() {
            let m = conf.metrics();
            wtr.write_record([
                eval::STRATUM_NAMES[s].to_string(),
                name.to_string(),
                format!("{}", m.tpr),
                format!("{}", m.fpr),
                m.ppv
                    .map(|v| format!("{v}"))
                    .unwrap_or_else(|| "-".to_string()),
                conf.true_pos.to_string(),
                conf.false_pos.to_string(),
                conf.true_neg.to_string(),
                conf.false_neg.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    let mut manifest = RunManifest::new("eval")
        .setting("data", args.data.display())
        .setting("quantile", args.quantile)
        .setting("threshold", args.threshold)
        .setting("seed", chain.rng_seed)
        .setting("chains", chain.n_chains)
        .setting("iterations", chain.max_iterations)
        .input(&args.model)?;
    for p in &tree_paths {
        manifest = manifest.input(p)?;
    }
    manifest.write(&dir, vec!["comparison.csv".to_string()])?;
    println!(
        "comparison over {} trees written to {}",
        tree_paths.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let lineage = LineageTree::parse_file(&args.input, &args.column)?;

    let mut accepted: Vec<CellId> = Vec::new();
    if let Some(path) = &args.branches {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let m_col = headers
            .iter()
            .position(|h| h == "m_star")
            .context("branches.csv needs m_star")?;
        let a_col = headers
            .iter()
            .position(|h| h == "accepted")
            .context("branches.csv needs accepted")?;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.get(a_col) == Some("true") {
                accepted.push(CellId::new(rec.get(m_col).unwrap_or(""))?);
            }
        }
    }
    let mut onsets: Vec<(CellId, i64)> = Vec::new();
    if let Some(path) = &args.onsets {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let cell_col = headers
            .iter()
            .position(|h| h == "cell")
            .context("onsets.csv needs cell")?;
        let time_col = headers
            .iter()
            .position(|h| h == "time")
            .context("onsets.csv needs time")?;
        let kind_col = headers
            .iter()
            .position(|h| h == "kind")
            .context("onsets.csv needs kind")?;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.get(kind_col) == Some("onset") {
                onsets.push((
                    CellId::new(rec.get(cell_col).unwrap_or(""))?,
                    rec.get(time_col).unwrap_or("").parse()?,
                ));
            }
        }
    }

    let svg = render_svg(&lineage, &accepted, &onsets)?;
    fs::write(&args.out, svg)?;
    let mut manifest = RunManifest::new("render")
        .setting("column", &args.column)
        .input(&args.input)?;
    for extra in [&args.branches, &args.onsets].into_iter().flatten() {
        manifest = manifest.input(extra)?;
    }
    let manifest_path = args.out.with_extension("manifest.json");
    manifest.outputs = vec![args.out.display().to_string()];
    write_json(&manifest_path, &manifest)?;
    println!("rendered {}", args.out.display());
    Ok(())
}
