//! The `fpca` command-line tool.
//!
//! Every subcommand reads its inputs, writes JSON for structured results and
//! CSV for matrices into an output directory, and records a `manifest.json`
//! with the resolved flags and input digests. Exit status is 0 on success, 1
//! for usage errors and 2 for data or model errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::aglm::{fit_fpca, Dispersion, FpcaConfig, FpcaFit, ModelVariant};
use crate::dataset::{load_coordinate_csv, load_dense_csv, window_minus_window, write_cells, ObservationSet, Rect};
use crate::decomposition::{all_cells, explained_g2, orthogonalize, predict_cells};
use crate::error::FpcaError;
use crate::expfam::Family;
use crate::selection::{default_candidates, select_k_cv, select_k_gic, SelectionRule};
use crate::simulate::{run_simulation, SimDesign};

pub const AIC_WARNING: &str = "AIC is inconsistent for rank selection in this model; prefer BIC";

#[derive(Debug, Parser)]
#[command(name = "fpca", version, about = "Low-rank exponential-family decomposition on arbitrary cell subsets")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a rank-k model.
    Fit(FitArgs),
    /// Choose the rank by BIC, AIC, a custom GIC penalty, or cross-validation.
    Select(SelectArgs),
    /// Orthonormal components and explained deviance of a saved fit.
    Decompose(DecomposeArgs),
    /// Fitted values of a saved fit on chosen cells.
    Predict(PredictArgs),
    /// Monte Carlo rank-recovery and prediction-error study.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum InputFormat {
    /// `row,col,value` with a header line.
    Coord,
    /// Headerless rectangular grid; `--na-token` marks unobserved cells.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FamilyArg {
    Gaussian,
    Poisson,
    Bernoulli,
    Quasipoisson,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Gaussian => Family::Gaussian,
            FamilyArg::Poisson => Family::Poisson,
            FamilyArg::Bernoulli => Family::Bernoulli,
            FamilyArg::Quasipoisson => Family::QuasiPoisson,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum VariantArg {
    Simple,
    Covariance,
    Correlation,
}

impl From<VariantArg> for ModelVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Simple => ModelVariant::Simple,
            VariantArg::Covariance => ModelVariant::Covariance,
            VariantArg::Correlation => ModelVariant::Correlation,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct DataArgs {
    /// Data file; repeat for several channels (each gets its own output subdirectory).
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = InputFormat::Coord)]
    format: InputFormat,
    /// Token marking an unobserved cell in dense input.
    #[arg(long, default_value = "NA")]
    na_token: String,
    /// Grid size `n,p` for coordinate input (default: one past the largest index).
    #[arg(long, value_parser = parse_shape)]
    shape: Option<(usize, usize)>,
    /// Keep only cells inside this window, `r0,c0,r1,c1` (half-open).
    #[arg(long, value_parser = parse_rect)]
    outer: Option<Rect>,
    /// Drop cells inside this window, which must lie within `--outer`.
    #[arg(long, value_parser = parse_rect)]
    inner: Option<Rect>,
    /// Skip channels whose window region is empty instead of failing.
    #[arg(long)]
    allow_empty: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
struct OutArgs {
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Directory for `manifest.json` (default: the output directory).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct FitControl {
    /// Random starts.
    #[arg(long, default_value_t = 5)]
    starts: usize,
    /// Relative convergence tolerance of the alternating fit.
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    /// Maximum outer iterations per start.
    #[arg(long = "max-iter", default_value_t = 500)]
    max_iter: usize,
    #[arg(long, env = "FPCA_SEED", default_value_t = 0)]
    seed: u64,
}

impl FitControl {
    fn config(&self, k: usize) -> FpcaConfig {
        FpcaConfig::new(k)
            .with_starts(self.starts)
            .with_tol(self.tol)
            .with_max_outer_iter(self.max_iter)
            .with_seed(self.seed)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    family: FamilyArg,
    #[arg(long, value_enum, default_value_t = VariantArg::Simple)]
    variant: VariantArg,
    #[arg(long)]
    k: usize,
    #[command(flatten)]
    control: FitControl,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    family: FamilyArg,
    #[arg(long, value_enum, default_value_t = VariantArg::Simple)]
    variant: VariantArg,
    /// bic, aic, gic:<kappa> or cv.
    #[arg(long, default_value = "bic", value_parser = parse_rule)]
    #[serde(serialize_with = "ser_display")]
    rule: SelectionRule,
    #[arg(long = "k-min", default_value_t = 1)]
    k_min: usize,
    /// Largest candidate (default: min(10, coverage bound)).
    #[arg(long = "k-max")]
    k_max: Option<usize>,
    /// Rank of the fit that fixes the dispersion (default: k-max + 2, capped).
    #[arg(long = "k-ref")]
    k_ref: Option<usize>,
    #[arg(long = "cv-q", default_value_t = 0.2)]
    cv_q: f64,
    #[arg(long = "cv-reps", default_value_t = 10)]
    cv_reps: usize,
    #[command(flatten)]
    control: FitControl,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
struct DecomposeArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
struct PredictArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    /// all, observed, or a CSV file with `row,col` columns.
    #[arg(long, default_value = "all")]
    cells: String,
    /// Also write |x - fitted| for the observed cells.
    #[arg(long)]
    difference: bool,
    /// Data file(s); needed for `--cells observed` and `--difference`.
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = InputFormat::Coord)]
    format: InputFormat,
    #[arg(long, default_value = "NA")]
    na_token: String,
    #[arg(long, value_parser = parse_shape)]
    shape: Option<(usize, usize)>,
    #[arg(long, value_parser = parse_rect)]
    outer: Option<Rect>,
    #[arg(long, value_parser = parse_rect)]
    inner: Option<Rect>,
    #[arg(long)]
    allow_empty: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long = "k-true")]
    k_true: usize,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 100)]
    replications: usize,
    /// Comma-separated rules.
    #[arg(long, default_value = "bic", value_delimiter = ',', value_parser = parse_rule)]
    #[serde(serialize_with = "ser_display_vec")]
    rules: Vec<SelectionRule>,
    #[arg(long = "noise-sd", default_value_t = 0.1)]
    noise_sd: f64,
    #[arg(long = "mu-mean", default_value_t = 0.5)]
    mu_mean: f64,
    #[arg(long = "mu-sd", default_value_t = 2.0)]
    mu_sd: f64,
    /// Largest candidate rank (default: k-true + 2).
    #[arg(long = "k-max")]
    k_max: Option<usize>,
    #[arg(long = "cv-q", default_value_t = 0.2)]
    cv_q: f64,
    #[arg(long = "cv-reps", default_value_t = 10)]
    cv_reps: usize,
    #[command(flatten)]
    control: FitControl,
    #[command(flatten)]
    out: OutArgs,
}

fn ser_display<S: serde::Serializer, T: std::fmt::Display>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn ser_display_vec<S: serde::Serializer, T: std::fmt::Display>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(ToString::to_string))
}

fn parse_rule(s: &str) -> Result<SelectionRule, String> {
    s.parse().map_err(|e: FpcaError| e.to_string())
}

fn parse_rect(s: &str) -> Result<Rect, String> {
    s.parse().map_err(|e: FpcaError| e.to_string())
}

fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected n,p, got '{s}'"))?;
    let n = a.trim().parse().map_err(|_| format!("bad row count '{a}'"))?;
    let p = b.trim().parse().map_err(|_| format!("bad column count '{b}'"))?;
    Ok((n, p))
}

/// Failure of a subcommand, split by exit status.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(FpcaError),
}

impl From<FpcaError> for Failure {
    fn from(e: FpcaError) -> Self {
        Failure::Data(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the tool on `argv` (including the program name) and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let outcome = match cli.threads {
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command, &args)),
            Err(e) => Err(Failure::Usage(format!("cannot start {n} threads: {e}"))),
        },
        None => dispatch(cli.command, &args),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command, args: &[String]) -> CliResult<()> {
    let start = Instant::now();
    let (name, flags, inputs, seed, out, manifest_dir) = match &command {
        Command::Fit(a) => ("fit", json!(a), a.data.inputs.clone(), Some(a.control.seed), &a.out.out, &a.out.manifest),
        Command::Select(a) => ("select", json!(a), a.data.inputs.clone(), Some(a.control.seed), &a.out.out, &a.out.manifest),
        Command::Decompose(a) => ("decompose", json!(a), a.data.inputs.clone(), None, &a.out.out, &a.out.manifest),
        Command::Predict(a) => ("predict", json!(a), a.inputs.clone(), None, &a.out.out, &a.out.manifest),
        Command::Simulate(a) => ("simulate", json!(a), Vec::new(), Some(a.control.seed), &a.out.out, &a.out.manifest),
    };
    let out = out.clone();
    let manifest_dir = manifest_dir.clone().unwrap_or_else(|| out.clone());
    match &command {
        Command::Fit(a) => cmd_fit(a)?,
        Command::Select(a) => cmd_select(a)?,
        Command::Decompose(a) => cmd_decompose(a)?,
        Command::Predict(a) => cmd_predict(a)?,
        Command::Simulate(a) => cmd_simulate(a)?,
    }
    let mut digests = Vec::new();
    for path in &inputs {
        digests.push(json!({ "path": path, "sha256": sha256_file(path)? }));
    }
    let manifest = json!({
        "subcommand": name,
        "args": args,
        "flags": flags,
        "inputs": digests,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "duration_seconds": start.elapsed().as_secs_f64(),
    });
    fs::create_dir_all(&manifest_dir)?;
    write_json(&manifest_dir.join("manifest.json"), &manifest)?;
    Ok(())
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Output directory of one channel: `out` itself for a single input,
/// `out/<file stem>` when several inputs are given.
fn channel_dir(base: &Path, input: &Path, n_inputs: usize) -> PathBuf {
    if n_inputs <= 1 {
        base.to_path_buf()
    } else {
        base.join(input.file_stem().unwrap_or(input.as_os_str()))
    }
}

struct Loaded {
    set: ObservationSet,
    window: Option<(Rect, Rect)>,
}

#[allow(clippy::too_many_arguments)]
fn load_input(
    path: &Path,
    format: InputFormat,
    na_token: &str,
    shape: Option<(usize, usize)>,
    outer: Option<Rect>,
    inner: Option<Rect>,
    allow_empty: bool,
) -> CliResult<Option<Loaded>> {
    let full = match format {
        InputFormat::Coord => load_coordinate_csv(path, shape),
        InputFormat::Dense => load_dense_csv(path, na_token),
    }
    .map_err(|e| match e {
        FpcaError::Io(io) => FpcaError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })?;
    if outer.is_none() && inner.is_none() {
        return Ok(Some(Loaded { set: full, window: None }));
    }
    let outer = outer.unwrap_or(Rect::new(0, 0, full.n_rows(), full.n_cols())?);
    let inner = inner.unwrap_or(Rect::new(outer.r0, outer.c0, outer.r0, outer.c0)?);
    match window_minus_window(&full, outer, inner, allow_empty)? {
        Some(set) => Ok(Some(Loaded {
            set,
            window: Some((outer, inner)),
        })),
        None => {
            eprintln!("note: {} has no cells in the window; skipped", path.display());
            Ok(None)
        }
    }
}

fn load_data(data: &DataArgs, path: &Path) -> CliResult<Option<Loaded>> {
    load_input(path, data.format, &data.na_token, data.shape, data.outer, data.inner, data.allow_empty)
}

/// Everything `fit.json` records; together with the matrix CSVs it restores the fit.
#[derive(Debug, Serialize, Deserialize)]
struct FitRecord {
    k: usize,
    variant: ModelVariant,
    family: Family,
    n_rows: usize,
    n_cols: usize,
    n_obs: usize,
    loglik: f64,
    deviance: f64,
    phi: Dispersion,
    objective: f64,
    converged: bool,
    iterations: usize,
    start_index: usize,
    seed: u64,
    /// Window that defined the grid, as `[r0, c0, r1, c1]` outer and inner.
    window: Option<[[usize; 4]; 2]>,
    loglik_trace: Vec<f64>,
    starts: Vec<crate::aglm::StartSummary>,
}

fn write_matrix(path: &Path, index: &str, prefix: &str, m: &DMatrix<f64>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec![index.to_string()];
    if prefix.ends_with('_') {
        header.extend((1..=m.ncols()).map(|r| format!("{prefix}{r}")));
    } else {
        header.push(prefix.to_string());
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..m.nrows() {
        let mut rec = vec![i.to_string()];
        rec.extend((0..m.ncols()).map(|r| format!("{:?}", m[(i, r)])));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> CliResult<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut m = DMatrix::zeros(rows, cols);
    let mut seen = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        if i >= rows || rec.len() != cols + 1 {
            return Err(FpcaError::Parse {
                line,
                message: format!("{}: expected {rows} rows of {} fields", path.display(), cols + 1),
            }
            .into());
        }
        for r in 0..cols {
            m[(i, r)] = rec[r + 1].parse().map_err(|_| FpcaError::Parse {
                line,
                message: format!("{}: bad number '{}'", path.display(), &rec[r + 1]),
            })?;
        }
        seen += 1;
    }
    if seen != rows {
        return Err(FpcaError::Validation(format!("{}: expected {rows} rows, found {seen}", path.display())).into());
    }
    Ok(m)
}

fn csv_err(e: csv::Error) -> Failure {
    Failure::Data(FpcaError::Io(e.into()))
}

fn save_fit(dir: &Path, fit: &FpcaFit, s: &ObservationSet, seed: u64, window: Option<(Rect, Rect)>) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    write_matrix(&dir.join("alpha.csv"), "row", "alpha_", &fit.alpha)?;
    write_matrix(&dir.join("beta.csv"), "col", "beta_", &fit.beta)?;
    write_matrix(&dir.join("gamma.csv"), "col", "gamma", &DMatrix::from_column_slice(fit.n_cols, 1, &fit.gamma))?;
    let rect = |r: Rect| [r.r0, r.c0, r.r1, r.c1];
    let record = FitRecord {
        k: fit.k,
        variant: fit.variant,
        family: fit.family.family(),
        n_rows: fit.n_rows,
        n_cols: fit.n_cols,
        n_obs: s.len(),
        loglik: fit.loglik,
        deviance: fit.deviance,
        phi: fit.phi.clone(),
        objective: fit.objective,
        converged: fit.converged,
        iterations: fit.iterations,
        start_index: fit.start_index,
        seed,
        window: window.map(|(o, i)| [rect(o), rect(i)]),
        loglik_trace: fit.loglik_trace.clone(),
        starts: fit.starts.clone(),
    };
    write_json(&dir.join("fit.json"), &record)
}

fn load_fit(dir: &Path) -> CliResult<FpcaFit> {
    let text = fs::read_to_string(dir.join("fit.json"))
        .map_err(|e| FpcaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.join("fit.json").display()))))?;
    let rec: FitRecord = serde_json::from_str(&text)?;
    let family = rec.variant.family_spec(rec.family)?;
    let alpha = read_matrix(&dir.join("alpha.csv"), rec.n_rows, rec.k)?;
    let beta = read_matrix(&dir.join("beta.csv"), rec.n_cols, rec.k)?;
    let gamma = read_matrix(&dir.join("gamma.csv"), rec.n_cols, 1)?;
    Ok(FpcaFit {
        k: rec.k,
        variant: rec.variant,
        family,
        n_rows: rec.n_rows,
        n_cols: rec.n_cols,
        alpha,
        beta,
        gamma: gamma.iter().copied().collect(),
        phi: rec.phi,
        loglik: rec.loglik,
        deviance: rec.deviance,
        objective: rec.objective,
        loglik_trace: rec.loglik_trace,
        start_index: rec.start_index,
        converged: rec.converged,
        iterations: rec.iterations,
        starts: rec.starts,
    })
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let variant = ModelVariant::from(a.variant);
    let family = variant.family_spec(a.family.into())?;
    let config = a.control.config(a.k);
    for path in &a.data.inputs {
        let Some(loaded) = load_data(&a.data, path)? else { continue };
        let fit = fit_fpca(&loaded.set, variant, family, &config)?;
        if !fit.converged {
            eprintln!(
                "warning: {}: no convergence within {} outer iterations",
                path.display(),
                config.max_outer_iter
            );
        }
        let dir = channel_dir(&a.out.out, path, a.data.inputs.len());
        save_fit(&dir, &fit, &loaded.set, a.control.seed, loaded.window)?;
    }
    Ok(())
}

fn cmd_select(a: &SelectArgs) -> CliResult<()> {
    let variant = ModelVariant::from(a.variant);
    let family = variant.family_spec(a.family.into())?;
    if matches!(a.rule, SelectionRule::Gic(crate::selection::KappaRule::Aic)) {
        eprintln!("warning: {AIC_WARNING}");
    }
    for path in &a.data.inputs {
        let Some(loaded) = load_data(&a.data, path)? else { continue };
        let s = &loaded.set;
        let k_max = match a.k_max {
            Some(k) => k,
            None => default_candidates(s, variant).last().copied().ok_or_else(|| {
                FpcaError::Coverage("data cannot support even a rank-1 fit".into())
            })?,
        };
        if a.k_min == 0 || a.k_min > k_max {
            return Err(Failure::Usage(format!("need 1 <= k-min <= k-max, got {}..{k_max}", a.k_min)));
        }
        let candidates: Vec<usize> = (a.k_min..=k_max).collect();
        let config = a.control.config(a.k_min);
        let dir = channel_dir(&a.out.out, path, a.data.inputs.len());
        fs::create_dir_all(&dir)?;
        let mut csv_out = csv::Writer::from_path(dir.join("selection.csv")).map_err(csv_err)?;
        let report = match a.rule {
            SelectionRule::Gic(kappa) => {
                let r = select_k_gic(s, variant, family, &candidates, kappa, a.k_ref, &config)?;
                for w in &r.warnings {
                    eprintln!("warning: {w}");
                }
                csv_out.write_record(["k", "loglik", "df", "gic", "chosen"]).map_err(csv_err)?;
                for row in &r.table {
                    csv_out
                        .write_record([
                            row.k.to_string(),
                            format!("{:?}", row.loglik),
                            row.df.to_string(),
                            format!("{:?}", row.gic),
                            u8::from(row.k == r.chosen_k).to_string(),
                        ])
                        .map_err(csv_err)?;
                }
                json!({
                    "rule": a.rule.name(),
                    "chosen_k": r.chosen_k,
                    "candidates": candidates,
                    "variant": variant,
                    "family": family.family(),
                    "n_obs": s.len(),
                    "seed": a.control.seed,
                    "gic": r,
                })
            }
            SelectionRule::Cv => {
                let r = select_k_cv(s, variant, family, &candidates, a.cv_q, a.cv_reps, &config)?;
                let mut header = vec!["k".to_string(), "mean_g2_test".to_string()];
                header.extend((1..=a.cv_reps).map(|i| format!("g2_rep_{i}")));
                header.push("chosen".into());
                csv_out.write_record(&header).map_err(csv_err)?;
                for row in &r.table {
                    let mut rec = vec![row.k.to_string(), format!("{:?}", row.mean_g2_test)];
                    rec.extend(row.g2_test.iter().map(|v| format!("{v:?}")));
                    rec.push(u8::from(row.k == r.chosen_k).to_string());
                    csv_out.write_record(&rec).map_err(csv_err)?;
                }
                json!({
                    "rule": "cv",
                    "chosen_k": r.chosen_k,
                    "candidates": candidates,
                    "variant": variant,
                    "family": family.family(),
                    "n_obs": s.len(),
                    "seed": a.control.seed,
                    "cv": r,
                })
            }
        };
        csv_out.flush()?;
        write_json(&dir.join("selection.json"), &report)?;
    }
    Ok(())
}

fn fit_dir(base: &Path, input: Option<&Path>, n_inputs: usize) -> PathBuf {
    match input {
        Some(p) => channel_dir(base, p, n_inputs),
        None => base.to_path_buf(),
    }
}

fn cmd_decompose(a: &DecomposeArgs) -> CliResult<()> {
    for path in &a.data.inputs {
        let n_inputs = a.data.inputs.len();
        let fit = load_fit(&fit_dir(&a.fit, Some(path), n_inputs))?;
        let Some(loaded) = load_data(&a.data, path)? else { continue };
        let dec = orthogonalize(&fit)?;
        let rep = explained_g2(&loaded.set, &dec, fit.family)?;
        if !rep.monotone {
            eprintln!("warning: {}: deviance is not monotone in the number of components", path.display());
        }
        let dir = channel_dir(&a.out.out, path, n_inputs);
        fs::create_dir_all(&dir)?;
        write_matrix(&dir.join("pcs.csv"), "row", "pc_", &dec.scores())?;
        write_matrix(&dir.join("loadings.csv"), "col", "loading_", &dec.v)?;
        let mut w = csv::Writer::from_path(dir.join("explained.csv")).map_err(csv_err)?;
        w.write_record(["m", "d", "deviance", "cumulative", "increment"]).map_err(csv_err)?;
        w.write_record(["0", "", &format!("{:?}", rep.null_deviance), "0.0", ""]).map_err(csv_err)?;
        for m in 1..=dec.k() {
            w.write_record([
                m.to_string(),
                format!("{:?}", dec.d[m - 1]),
                format!("{:?}", rep.deviance[m - 1]),
                format!("{:?}", rep.cumulative[m]),
                format!("{:?}", rep.increments[m - 1]),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn read_cell_list(path: &Path) -> CliResult<Vec<(usize, usize)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    let pos = |name: &str| header.iter().position(|h| h == name);
    let (Some(ri), Some(ci)) = (pos("row"), pos("col")) else {
        return Err(FpcaError::Parse {
            line: 1,
            message: format!("{}: header needs 'row' and 'col' columns", path.display()),
        }
        .into());
    };
    let mut cells = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|_| FpcaError::Parse {
                line: i + 2,
                message: format!("bad index '{s}'"),
            })
        };
        cells.push((parse(&rec[ri])?, parse(&rec[ci])?));
    }
    Ok(cells)
}

fn cmd_predict(a: &PredictArgs) -> CliResult<()> {
    let needs_data = a.cells == "observed" || a.difference;
    if needs_data && a.inputs.is_empty() {
        return Err(Failure::Usage("--cells observed and --difference need --input".into()));
    }
    let channels: Vec<Option<&PathBuf>> = if a.inputs.is_empty() {
        vec![None]
    } else {
        a.inputs.iter().map(Some).collect()
    };
    for input in channels {
        let n_inputs = a.inputs.len();
        let fit = load_fit(&fit_dir(&a.fit, input.map(PathBuf::as_path), n_inputs))?;
        let data = match input {
            Some(path) => match load_input(path, a.format, &a.na_token, a.shape, a.outer, a.inner, a.allow_empty)? {
                Some(l) => Some(l.set),
                None => continue,
            },
            None => None,
        };
        if let Some(s) = &data {
            if (s.n_rows(), s.n_cols()) != (fit.n_rows, fit.n_cols) {
                return Err(FpcaError::DimensionMismatch(format!(
                    "data grid {}x{} does not match the fit's {}x{}",
                    s.n_rows(),
                    s.n_cols(),
                    fit.n_rows,
                    fit.n_cols
                ))
                .into());
            }
        }
        let cells = match a.cells.as_str() {
            "all" => all_cells(fit.n_rows, fit.n_cols),
            "observed" => data
                .as_ref()
                .expect("checked above")
                .entries()
                .iter()
                .map(|e| (e.row, e.col))
                .collect(),
            file => read_cell_list(Path::new(file))?,
        };
        let pred = predict_cells(&fit, &cells)?;
        let dir = match input {
            Some(p) => channel_dir(&a.out.out, p, n_inputs),
            None => a.out.out.clone(),
        };
        fs::create_dir_all(&dir)?;
        let file = fs::File::create(dir.join("predictions.csv"))?;
        write_cells(std::io::BufWriter::new(file), pred.cells.iter().map(|c| (c.row, c.col, c.mu)))?;
        if a.difference {
            let s = data.as_ref().expect("checked above");
            let diff = s.entries().iter().map(|e| (e.row, e.col, (e.value - fit.mean(e.row, e.col)).abs()));
            let file = fs::File::create(dir.join("difference.csv"))?;
            write_cells(std::io::BufWriter::new(file), diff)?;
        }
    }
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let mut design = SimDesign::new(a.n, a.p, a.k_true, a.tau)
        .with_replications(a.replications)
        .with_noise_sd(a.noise_sd)
        .with_seed(a.control.seed);
    design.mu_mean = a.mu_mean;
    design.mu_sd = a.mu_sd;
    design.cv_q = a.cv_q;
    design.cv_reps = a.cv_reps;
    design.validate()?;
    let k_max = a.k_max.unwrap_or(a.k_true + 2).min(a.n.min(a.p));
    let candidates: Vec<usize> = (1..=k_max).collect();
    if a.rules.iter().any(|r| matches!(r, SelectionRule::Gic(crate::selection::KappaRule::Aic))) {
        eprintln!("warning: {AIC_WARNING}");
    }
    let report = run_simulation(&design, &a.rules, &candidates, &a.control.config(1))?;
    let failed: usize = report.summary.iter().map(|s| s.failures).max().unwrap_or(0);
    if failed > 0 {
        eprintln!("warning: {failed} replications failed; they count as incorrect");
    }
    fs::create_dir_all(&a.out.out)?;
    write_json(&a.out.out.join("simreport.json"), &report)?;
    let file = fs::File::create(a.out.out.join("simreport.csv"))?;
    report.write_csv(std::io::BufWriter::new(file))?;
    let mut stdout = std::io::stdout().lock();
    for s in &report.summary {
        let _ = writeln!(
            stdout,
            "{}: {:.1}% correct, mean hidden-cell RMSEP {}",
            s.rule,
            s.percent_correct,
            s.mean_rmsep_hidden.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}
