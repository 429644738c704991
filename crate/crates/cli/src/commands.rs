//! The subcommands. Each takes its parsed arguments and writes its outputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use slacc::em::Phase;
use slacc::estep::estep;
use slacc::harmonize::harmonize_with_scores;
use slacc::simulation::{
    generate_dataset, make_truth, replicate_rng, run_simulation1, run_simulation2, site_f_statistics,
    ScenarioSpec, Simulation1Config, Simulation2Config,
};
use slacc::{
    select_l, DiagonalMode, FitConfig, FitResult, HarmonizationModel, IterationRecord, Violation,
};

use crate::error::{CliError, CliResult};
use crate::io::{
    ensure_dir, fmt_f64, load_dataset, mode_name, write_covariates, write_matrix, write_numeric_csv,
    write_text, write_vectorized, LoadRequest, LoadedData, Manifest, MatrixSource, ModelFile,
    ModelMetadata, TraceSummary,
};

#[derive(Debug, Parser)]
#[command(name = "slacc", version, about = "Sparse latent factorization of connectivity matrices")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model with a fixed number of factors.
    Fit(FitArgs),
    /// Choose the number of factors by EBIC.
    Select(SelectArgs),
    /// Remove site effects from matrices under a fitted model.
    Harmonize(HarmonizeArgs),
    /// Run the simulation studies.
    Simulate(SimulateArgs),
    /// Site F statistics for latent scores.
    Evaluate(EvaluateArgs),
    /// Write one simulated dataset in the input formats.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Include,
    Exclude,
}

impl From<ModeArg> for DiagonalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Include => DiagonalMode::Include,
            ModeArg::Exclude => DiagonalMode::Exclude,
        }
    }
}

/// Where the subject matrices come from.
#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// CSV with subject_id, matrix_path and site columns.
    #[arg(long)]
    pub manifest: PathBuf,
    /// CSV with subject_id and numeric biological covariates.
    #[arg(long)]
    pub covariates: PathBuf,
    /// Vectorized matrices (one row per manifest subject) with a JSON sidecar.
    #[arg(long)]
    pub vectorized: Option<PathBuf>,
    /// Diagonal handling for per-subject matrix files.
    #[arg(long, value_enum, default_value = "exclude")]
    pub diagonal: ModeArg,
}

impl InputArgs {
    fn load(&self, known_sites: Option<&[String]>, mode: Option<DiagonalMode>) -> CliResult<LoadedData> {
        let mode = mode.unwrap_or_else(|| self.diagonal.into());
        let source = match &self.vectorized {
            Some(p) => MatrixSource::Vectorized(p.clone()),
            None => MatrixSource::PerSubject,
        };
        if source == MatrixSource::PerSubject {
            log::info!("diagonal mode: {}", mode_name(mode));
        }
        load_dataset(&LoadRequest {
            manifest: &self.manifest,
            covariates: &self.covariates,
            source,
            mode,
            known_sites,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Number of latent factors.
    #[arg(long = "L")]
    pub l: usize,
    /// JSON file with fit settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fit even when L >= V.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long = "Lmin", default_value_t = 1)]
    pub lmin: usize,
    #[arg(long = "Lmax")]
    pub lmax: usize,
    #[arg(long, default_value_t = slacc::selection::DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct HarmonizeArgs {
    /// Model file written by `fit` or `select`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub covariates: PathBuf,
    #[arg(long)]
    pub vectorized: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// 1: disjoint supports, 2: overlapping supports.
    #[arg(long, default_value_t = 1)]
    pub scenario: u8,
    #[arg(long, value_delimiter = ',', default_values_t = [100, 300, 500])]
    pub n_grid: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also run the rank-selection study.
    #[arg(long)]
    pub selection: bool,
    #[arg(long = "Lmin", default_value_t = 2)]
    pub lmin: usize,
    #[arg(long = "Lmax", default_value_t = 10)]
    pub lmax: usize,
    #[arg(long, default_value_t = slacc::selection::DEFAULT_GAMMA)]
    pub gamma: f64,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// CSV with subject_id, optionally site, and one column per score.
    #[arg(long, conflicts_with = "manifest")]
    pub scores: Option<PathBuf>,
    /// CSV with subject_id and site; overrides a site column in the scores.
    #[arg(long)]
    pub sites: Option<PathBuf>,
    /// Score matrices under `--model` instead of reading scores.
    #[arg(long, requires_all = ["covariates", "model"])]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub vectorized: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 1)]
    pub scenario: u8,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub replicate: usize,
    #[arg(long, value_enum, default_value = "include")]
    pub diagonal: ModeArg,
    /// Write one vectorized file instead of one file per subject.
    #[arg(long)]
    pub vectorized: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Runs a parsed command line on a pool of the requested size.
pub fn run(cli: Cli) -> CliResult<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::input("--threads must be at least 1"));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::input(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Harmonize(a) => cmd_harmonize(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Generate(a) => cmd_generate(a),
    })
}

fn load_config(path: Option<&Path>) -> CliResult<FitConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::input(format!("config {}: {e}", p.display())))?
        }
        None => FitConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Violations that stop the command. Tiny dimensions only warn, as in the library.
fn check_data(loaded: &LoadedData, l: usize, force: bool) -> CliResult<()> {
    let report = loaded.data.validate(Some(l));
    let mut fatal = Vec::new();
    for v in report.violations {
        match v {
            Violation::DimensionsTooSmall { .. } => log::warn!("{v}"),
            Violation::RankNotBelowV { .. } if force => log::warn!("{v} (forced)"),
            Violation::NonFinite { subject } | Violation::Asymmetric { subject, .. } => {
                return Err(CliError::subject(
                    format!("subject '{}': {v}", loaded.subject_ids[subject]),
                    &loaded.subject_ids[subject],
                ));
            }
            other => fatal.push(other),
        }
    }
    if fatal.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(fatal))
    }
}

fn model_file(res: &FitResult, loaded: &LoadedData, cfg: &FitConfig, command: &str) -> CliResult<ModelFile> {
    let site_sizes = loaded.data.site_sizes();
    let h = HarmonizationModel::new(&res.theta, &loaded.design, &site_sizes)?;
    let warmup = res.trace.iter().filter(|t| t.phase == Phase::Warmup).count();
    Ok(ModelFile {
        theta: res.theta.clone(),
        design: loaded.design.clone(),
        sigma_h: h.sigma_h,
        phi_h: h.phi_h,
        site_labels: loaded.sites.clone(),
        site_sizes,
        covariate_names: loaded.covariate_names.clone(),
        diagonal_mode: loaded.data.mode(),
        metadata: ModelMetadata {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            nll_scaled: res.nll.scaled,
            nll_total: res.nll.total,
            tau: res.tau,
            lambda_max: res.lambda_max,
            trace: TraceSummary {
                iterations: res.iterations,
                warmup_iterations: warmup,
                converged: res.converged,
                final_delta_u: res.trace.last().map_or(0.0, |t| t.delta_u),
                admm_not_converged: res
                    .trace
                    .iter()
                    .filter(|t| t.admm_status.as_deref().is_some_and(|s| s != "converged"))
                    .count(),
            },
        },
    })
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Warmup => "warmup",
        Phase::Penalized => "penalized",
        Phase::Fixed => "fixed",
    }
}

pub fn write_trace(path: &Path, trace: &[IterationRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "iteration",
        "phase",
        "lambda",
        "nll",
        "nll_total",
        "delta_u",
        "admm_status",
        "admm_iterations",
        "nnz_u",
        "L",
    ])?;
    for t in trace {
        w.write_record([
            t.iteration.to_string(),
            phase_name(t.phase).to_string(),
            fmt_f64(t.lambda),
            fmt_f64(t.nll),
            fmt_f64(t.nll_total),
            fmt_f64(t.delta_u),
            t.admm_status.clone().unwrap_or_default(),
            t.admm_iterations.to_string(),
            t.nnz_u.to_string(),
            t.l.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn write_fit_outputs(out: &Path, res: &FitResult, model: &ModelFile) -> CliResult<()> {
    ensure_dir(out)?;
    model.save(&out.join("model.json"))?;
    write_trace(&out.join("trace.csv"), &res.trace)?;
    write_matrix_rect(&out.join("loadings.csv"), &res.theta.u)
}

fn write_matrix_rect(path: &Path, m: &DMatrix<f64>) -> CliResult<()> {
    write_numeric_csv(path, (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()))
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.force |= args.force;
    let loaded = args.input.load(None, None)?;
    check_data(&loaded, args.l, cfg.force)?;
    println!(
        "fitting L = {} to {} subjects (V = {}, {} sites)",
        args.l,
        loaded.data.n(),
        loaded.data.v(),
        loaded.sites.len()
    );
    let res = slacc::fit(&loaded.data, args.l, &cfg)?;
    let model = model_file(&res, &loaded, &cfg, "fit")?;
    write_fit_outputs(&args.out, &res, &model)?;
    println!(
        "done: {} iterations, converged = {}, nll = {}, nnz(U) = {}",
        res.iterations,
        res.converged,
        res.nll.total,
        res.theta.nnz_u()
    );
    Ok(())
}

pub fn cmd_select(args: &SelectArgs) -> CliResult<()> {
    if args.lmin > args.lmax {
        return Err(CliError::input(format!(
            "--Lmin {} exceeds --Lmax {}",
            args.lmin, args.lmax
        )));
    }
    if !(0.0..=1.0).contains(&args.gamma) {
        return Err(CliError::input(format!("--gamma {} must lie in [0, 1]", args.gamma)));
    }
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let loaded = args.input.load(None, None)?;
    check_data(&loaded, args.lmax, cfg.force)?;
    let grid: Vec<usize> = (args.lmin..=args.lmax).collect();
    println!("selecting L over {}..={} with gamma = {}", args.lmin, args.lmax, args.gamma);
    let sel = select_l(&loaded.data, &grid, args.gamma, &cfg)?;
    ensure_dir(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join("curve.csv"))?;
    w.write_record(["L", "nll", "df", "ebic", "converged", "error"])?;
    for c in &sel.curve {
        w.write_record([
            c.l.to_string(),
            fmt_f64(c.nll),
            c.df.to_string(),
            fmt_f64(c.ebic),
            c.converged.to_string(),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io("writing curve.csv", e))?;
    let model = model_file(&sel.best_fit, &loaded, &cfg, "select")?;
    write_fit_outputs(&args.out, &sel.best_fit, &model)?;
    println!("selected L = {}", sel.best_l);
    Ok(())
}

/// Filesystem-safe file stem for a subject.
fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

/// Raw and harmonized scores of `loaded` under `model`.
fn score(model: &ModelFile, loaded: &LoadedData) -> CliResult<(DMatrix<f64>, slacc::HarmonizedOutput)> {
    if loaded.data.v() != model.theta.v() {
        return Err(CliError::input(format!(
            "model expects V = {}, data have V = {}",
            model.theta.v(),
            loaded.data.v()
        )));
    }
    if loaded.covariate_names != model.covariate_names {
        return Err(CliError::input(format!(
            "covariate columns {:?} differ from the model's {:?}",
            loaded.covariate_names, model.covariate_names
        )));
    }
    if loaded.data.mode() != model.diagonal_mode {
        return Err(CliError::input(format!(
            "data use diagonal mode {}, the model {}",
            mode_name(loaded.data.mode()),
            mode_name(model.diagonal_mode)
        )));
    }
    let h = HarmonizationModel::new(&model.theta, &model.design, &model.site_sizes)?;
    let post = estep(&model.theta, &loaded.data)?;
    let out = harmonize_with_scores(&model.theta, &h, &loaded.data, &post.a_hat)?;
    Ok((post.a_hat, out))
}

fn write_scores(path: &Path, loaded: &LoadedData, raw: &DMatrix<f64>, harmonized: &DMatrix<f64>) -> CliResult<()> {
    let l = raw.ncols();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["subject_id".to_string(), "site".to_string()];
    header.extend((1..=l).map(|k| format!("raw_{k}")));
    header.extend((1..=l).map(|k| format!("harmonized_{k}")));
    w.write_record(&header)?;
    for j in 0..raw.nrows() {
        let mut rec = vec![loaded.subject_ids[j].clone(), loaded.site_labels[j].clone()];
        rec.extend(raw.row(j).iter().map(|&x| fmt_f64(x)));
        rec.extend(harmonized.row(j).iter().map(|&x| fmt_f64(x)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn cmd_harmonize(args: &HarmonizeArgs) -> CliResult<()> {
    let model = ModelFile::load(&args.model)?;
    let input = InputArgs {
        manifest: args.manifest.clone(),
        covariates: args.covariates.clone(),
        vectorized: args.vectorized.clone(),
        diagonal: ModeArg::Exclude,
    };
    let loaded = input.load(Some(&model.site_labels), Some(model.diagonal_mode))?;
    let (raw, out) = score(&model, &loaded)?;
    ensure_dir(&args.out_dir)?;
    match &args.vectorized {
        Some(_) => {
            write_vectorized(&args.out_dir.join("harmonized.csv"), &out.y_h, model.diagonal_mode)?;
            Manifest::write(&args.out_dir.join("manifest.csv"), &loaded.subject_ids, None, &loaded.site_labels)?;
        }
        None => {
            let dir = args.out_dir.join("matrices");
            ensure_dir(&dir)?;
            let mut paths = Vec::with_capacity(loaded.data.n());
            for (j, id) in loaded.subject_ids.iter().enumerate() {
                let rel = format!("matrices/{}.csv", file_stem(id));
                write_matrix(&args.out_dir.join(&rel), &out.y_h[j])?;
                paths.push(rel);
            }
            Manifest::write(
                &args.out_dir.join("manifest.csv"),
                &loaded.subject_ids,
                Some(&paths),
                &loaded.site_labels,
            )?;
        }
    }
    write_scores(&args.out_dir.join("scores.csv"), &loaded, &raw, &out.a_h)?;
    println!("harmonized {} subjects into {}", loaded.data.n(), args.out_dir.display());
    Ok(())
}

fn scenario_table(spec: &ScenarioSpec) -> String {
    let rows = |m: &DMatrix<f64>| {
        (0..m.nrows())
            .map(|i| {
                let vals: Vec<String> = m.row(i).iter().map(|x| format!("{x}")).collect();
                format!("site {}: [{}]", i + 1, vals.join(", "))
            })
            .collect::<Vec<_>>()
            .join("; ")
    };
    format!(
        "scenario {}: V = {}, L = {}, {} sites, biological covariates = {}, nonzero fraction = {}, sigma2 {}, phi2 = {:?}, site intercepts {}, diagonal {}",
        spec.scenario,
        spec.v,
        spec.l,
        spec.n_sites(),
        spec.q_bio,
        spec.sparsity,
        rows(&spec.sigma2),
        spec.phi2.as_slice(),
        rows(&spec.site_intercepts),
        mode_name(spec.mode)
    )
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    if args.n_grid.is_empty() || args.reps == 0 {
        return Err(CliError::input("--n-grid and --reps must be non-empty"));
    }
    let fit = load_config(args.config.as_deref())?;
    let base = ScenarioSpec::standard(args.scenario, args.n_grid[0], args.seed);
    base.check()?;
    let table = scenario_table(&base);
    log::info!("{table}");
    println!("{table}");
    ensure_dir(&args.out)?;
    let cfg = Simulation1Config {
        base: base.clone(),
        n_grid: args.n_grid.clone(),
        replicates: args.reps,
        fit: fit.clone(),
    };
    write_text(&args.out.join("config.json"), &serde_json::to_string_pretty(&cfg)?)?;
    let out = run_simulation1(&cfg)?;
    let mut w = csv::Writer::from_path(args.out.join("tidy.csv"))?;
    w.write_record(["method", "scenario", "n", "replicate", "metric", "value"])?;
    for r in &out.tidy {
        w.write_record([
            r.method.clone(),
            r.scenario.to_string(),
            r.n.to_string(),
            r.replicate.to_string(),
            r.metric.clone(),
            fmt_f64(r.value),
        ])?;
    }
    w.flush().map_err(|e| CliError::io("writing tidy.csv", e))?;
    let mut w = csv::Writer::from_path(args.out.join("summary.csv"))?;
    w.write_record([
        "method", "scenario", "n", "replicates", "failures", "mse_U", "bias2_U", "var_U", "mse_B",
        "bias2_B", "var_B", "mse_sigma2", "bias2_sigma2", "var_sigma2", "mse_phi2", "bias2_phi2",
        "var_phi2", "sensitivity", "specificity",
    ])?;
    for s in &out.summary {
        let mut rec = vec![
            s.method.clone(),
            s.scenario.to_string(),
            s.n.to_string(),
            s.replicates.to_string(),
            s.failures.to_string(),
        ];
        rec.extend(
            [
                s.mse_u, s.bias2_u, s.var_u, s.mse_b, s.bias2_b, s.var_b, s.mse_sigma2,
                s.bias2_sigma2, s.var_sigma2, s.mse_phi2, s.bias2_phi2, s.var_phi2, s.sensitivity,
                s.specificity,
            ]
            .iter()
            .map(|&x| fmt_f64(x)),
        );
        w.write_record(&rec)?;
        println!(
            "{:<12} n = {:>4}: MSE(U) = {:.4e}, sensitivity = {:.3}, specificity = {:.3}",
            s.method, s.n, s.mse_u, s.sensitivity, s.specificity
        );
    }
    w.flush().map_err(|e| CliError::io("writing summary.csv", e))?;
    if args.selection {
        if args.lmin > args.lmax {
            return Err(CliError::input("--Lmin exceeds --Lmax"));
        }
        let cfg2 = Simulation2Config {
            base,
            n_grid: args.n_grid.clone(),
            replicates: args.reps,
            l_grid: (args.lmin..=args.lmax).collect(),
            gamma: args.gamma,
            fit,
        };
        let rows = run_simulation2(&cfg2)?;
        let mut w = csv::Writer::from_path(args.out.join("selection.csv"))?;
        w.write_record(["scenario", "n", "replicate", "selected_L", "error"])?;
        for r in &rows {
            w.write_record([
                r.scenario.to_string(),
                r.n.to_string(),
                r.replicate.to_string(),
                r.selected_l.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| CliError::io("writing selection.csv", e))?;
    }
    println!("wrote results to {}", args.out.display());
    Ok(())
}

/// Named score columns with a site index per subject.
struct ScoreTable {
    names: Vec<String>,
    scores: DMatrix<f64>,
    sites: Vec<usize>,
}

fn read_site_file(path: &Path) -> CliResult<std::collections::HashMap<String, String>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let id = headers.iter().position(|h| h == "subject_id");
    let site = headers.iter().position(|h| h == "site");
    let (Some(id), Some(site)) = (id, site) else {
        return Err(CliError::input(format!("{} needs subject_id and site columns", path.display())));
    };
    let mut out = std::collections::HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.insert(rec[id].to_string(), rec[site].to_string());
    }
    Ok(out)
}

fn read_score_table(path: &Path, sites: Option<&Path>) -> CliResult<ScoreTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h == "subject_id")
        .ok_or_else(|| CliError::input("scores lack a subject_id column"))?;
    let site_col = headers.iter().position(|h| h == "site");
    let site_map = sites.map(read_site_file).transpose()?;
    if site_col.is_none() && site_map.is_none() {
        return Err(CliError::input("scores lack a site column and no --sites file was given"));
    }
    let value_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != id_col && Some(c) != site_col).collect();
    let names = value_cols.iter().map(|&c| headers[c].to_string()).collect();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = &rec[id_col];
        let label = match &site_map {
            Some(m) => m
                .get(id)
                .cloned()
                .ok_or_else(|| CliError::subject(format!("no site for subject '{id}'"), id))?,
            None => rec[site_col.expect("checked above")].to_string(),
        };
        labels.push(label);
        for &c in &value_cols {
            values.push(
                rec[c]
                    .parse::<f64>()
                    .map_err(|_| CliError::subject(format!("subject '{id}': bad score '{}'", &rec[c]), id))?,
            );
        }
    }
    let n = labels.len();
    let scores = DMatrix::from_row_slice(n, value_cols.len(), &values);
    let (sites, _) = crate::io::index_sites(&labels);
    Ok(ScoreTable { names, scores, sites })
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let table = match (&args.scores, &args.manifest) {
        (Some(path), None) => read_score_table(path, args.sites.as_deref())?,
        (None, Some(manifest)) => {
            let model = ModelFile::load(args.model.as_ref().expect("required by clap"))?;
            let input = InputArgs {
                manifest: manifest.clone(),
                covariates: args.covariates.clone().expect("required by clap"),
                vectorized: args.vectorized.clone(),
                diagonal: ModeArg::Exclude,
            };
            let loaded = input.load(Some(&model.site_labels), Some(model.diagonal_mode))?;
            let (raw, out) = score(&model, &loaded)?;
            let l = raw.ncols();
            let mut names: Vec<String> = (1..=l).map(|k| format!("raw_{k}")).collect();
            names.extend((1..=l).map(|k| format!("harmonized_{k}")));
            let mut scores = DMatrix::zeros(raw.nrows(), 2 * l);
            scores.columns_mut(0, l).copy_from(&raw);
            scores.columns_mut(l, l).copy_from(&out.a_h);
            ScoreTable {
                names,
                scores,
                sites: loaded.data.sites().to_vec(),
            }
        }
        _ => return Err(CliError::input("give either --scores or --manifest")),
    };
    let stats = site_f_statistics(&table.scores, &table.sites)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    let paired = paired_factors(&table.names);
    match paired {
        Some(pairs) => {
            w.write_record([
                "factor",
                "f_mean_raw",
                "f_variance_raw",
                "f_mean_harmonized",
                "f_variance_harmonized",
                "flagged",
            ])?;
            for (k, (r, h)) in pairs.iter().enumerate() {
                w.write_record([
                    (k + 1).to_string(),
                    fmt_f64(stats[*r].f_mean),
                    fmt_f64(stats[*r].f_variance),
                    fmt_f64(stats[*h].f_mean),
                    fmt_f64(stats[*h].f_variance),
                    stats[*r].flagged.to_string(),
                ])?;
            }
        }
        None => {
            w.write_record(["column", "f_mean", "f_variance", "flagged"])?;
            for (name, s) in table.names.iter().zip(&stats) {
                w.write_record([
                    name.clone(),
                    fmt_f64(s.f_mean),
                    fmt_f64(s.f_variance),
                    s.flagged.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(format!("writing {}", args.out.display()), e))?;
    println!("wrote F statistics for {} score columns to {}", stats.len(), args.out.display());
    Ok(())
}

/// Column indices of `raw_k` and `harmonized_k` for `k = 1..`, when every
/// column belongs to such a pair.
fn paired_factors(names: &[String]) -> Option<Vec<(usize, usize)>> {
    if names.is_empty() || !names.len().is_multiple_of(2) {
        return None;
    }
    let l = names.len() / 2;
    (1..=l)
        .map(|k| {
            let r = names.iter().position(|n| *n == format!("raw_{k}"))?;
            let h = names.iter().position(|n| *n == format!("harmonized_{k}"))?;
            Some((r, h))
        })
        .collect()
}

pub fn cmd_generate(args: &GenerateArgs) -> CliResult<()> {
    let mut spec = ScenarioSpec::standard(args.scenario, args.n, args.seed);
    spec.mode = args.diagonal.into();
    spec.check()?;
    let truth = make_truth(&spec)?;
    let mut rng = replicate_rng(args.seed, args.n, args.replicate);
    let sim = generate_dataset(&truth, &spec, &mut rng)?;
    let out = &args.out_dir;
    ensure_dir(out)?;
    let n = sim.data.n();
    let width = n.to_string().len().max(3);
    let ids: Vec<String> = (1..=n).map(|j| format!("sub{j:0width$}")).collect();
    let sites: Vec<String> = sim.data.sites().iter().map(|s| format!("site{}", s + 1)).collect();
    if args.vectorized {
        write_vectorized(&out.join("matrices.csv"), sim.data.matrices(), spec.mode)?;
        Manifest::write(&out.join("manifest.csv"), &ids, None, &sites)?;
    } else {
        ensure_dir(&out.join("matrices"))?;
        let mut paths = Vec::with_capacity(n);
        for (j, id) in ids.iter().enumerate() {
            let rel = format!("matrices/{id}.csv");
            write_matrix(&out.join(&rel), sim.data.matrix(j))?;
            paths.push(rel);
        }
        Manifest::write(&out.join("manifest.csv"), &ids, Some(&paths), &sites)?;
    }
    let names: Vec<String> = (1..=spec.q_bio).map(|c| format!("z{c}")).collect();
    let bio = sim.data.covariates().columns(0, spec.q_bio).into_owned();
    write_covariates(&out.join("covariates.csv"), &ids, &names, &bio)?;
    write_text(&out.join("truth.json"), &serde_json::to_string_pretty(&sim.theta)?)?;
    println!("wrote {n} subjects to {}", out.display());
    Ok(())
}
