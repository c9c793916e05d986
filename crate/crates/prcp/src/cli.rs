//! Command-line front end: data generation, calibration, evaluation, the full
//! pipeline, trade-off sweeps, and the concentration self-check.
//!
//! Every flag has a config-file equivalent: `--config` loads a flat TOML
//! document whose keys mirror the flag names (`alpha-tilde = 0.1` for
//! `--alpha-tilde 0.1`), and explicit flags override file values. The base
//! seed falls back to the `PRCP_SEED` environment variable, then to 0. All
//! outputs are written atomically (temp file in the target directory, then
//! rename) and carry no timestamps, so reruns are byte-identical.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
//! error.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::calibrate::{prediction_set_with_u, DrawMode, Method, Threshold, ThresholdParams};
use crate::classifier::{
    bayes_classifier, generate_synthetic_dataset, load_probability_table, save_probability_table,
    LabeledDataset, ProbabilityTable, SyntheticTaskSpec, TableFormat,
};
use crate::eval::{
    calibrate_threshold, derive_levels_echo, mean_metrics, run_experiment, sweep_tradeoff,
    EvalMode, ExperimentConfig, SweepGrid,
};
use crate::noise::{NoiseScheme, PerturbationBudget};
use crate::quantile::{
    concentration_half_width, empirical_quantile, ConcentrationBand, QuantileValue,
};
use crate::scores::{score_batch, ScoreKind};
use crate::seed::{stage_rng, subseed, Stage};
use crate::{Error, Result};

/// Environment variable consulted for the base seed when neither the `--seed`
/// flag nor the config file supplies one.
pub const SEED_ENV: &str = "PRCP_SEED";

/// Parse `std::env::args` and dispatch; returns the process exit code.
pub fn run() -> u8 {
    run_from(std::env::args_os())
}

fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::try_from(e.exit_code()).unwrap_or(2);
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            u8::try_from(e.exit_code()).unwrap_or(1)
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "prcp",
    version,
    about = "Probabilistically robust conformal prediction toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset and, optionally, its probability table
    Generate(GenerateArgs),
    /// Calibrate a threshold and emit a JSON artifact
    Calibrate(CalibrateArgs),
    /// Evaluate a stored threshold artifact
    Evaluate(EvaluateArgs),
    /// Run calibrate plus evaluate over repeated runs and report
    Pipeline(PipelineArgs),
    /// Sweep the aPRCP trade-off over a grid of s or alpha-tilde values
    Sweep(SweepArgs),
    /// Monte-Carlo check of the quantile concentration bound
    ConcentrationCheck(ConcentrationArgs),
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => cmd_generate(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Pipeline(args) => cmd_pipeline(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::ConcentrationCheck(args) => cmd_concentration_check(args),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Vanilla,
    Rscp,
    Iprcp,
    Aprcp,
}

impl MethodArg {
    fn to_method(self) -> Method {
        match self {
            MethodArg::Vanilla => Method::Vanilla,
            MethodArg::Rscp => Method::InflatedAr,
            MethodArg::Iprcp => Method::Iprcp,
            MethodArg::Aprcp => Method::Aprcp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScoreArg {
    Hps,
    Aps,
}

impl ScoreArg {
    fn to_kind(self) -> ScoreKind {
        match self {
            ScoreArg::Hps => ScoreKind::Hps,
            ScoreArg::Aps => ScoreKind::Aps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NoiseArg {
    Uniform,
    Shell,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Probabilistic,
    Worst,
}

impl ModeArg {
    fn to_mode(self) -> EvalMode {
        match self {
            ModeArg::Probabilistic => EvalMode::Probabilistic,
            ModeArg::Worst => EvalMode::Worst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DrawsArg {
    Independent,
    Shared,
}

impl DrawsArg {
    fn to_mode(self) -> DrawMode {
        match self {
            DrawsArg::Independent => DrawMode::Independent,
            DrawsArg::Shared => DrawMode::Shared,
        }
    }
}

/// Flat config-file document. Keys mirror flag names in kebab case; every key
/// is optional and an explicit flag wins over the file value.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
struct FileConfig {
    method: Option<String>,
    score: Option<String>,
    classes: Option<usize>,
    dim: Option<usize>,
    n: Option<usize>,
    n_test: Option<usize>,
    m: Option<usize>,
    n_s: Option<usize>,
    alpha: Option<f64>,
    s: Option<f64>,
    alpha_tilde: Option<f64>,
    fixed_alpha_tilde: Option<f64>,
    eta: Option<f64>,
    m_r: Option<f64>,
    d_gap: Option<f64>,
    radius: Option<f64>,
    noise: Option<String>,
    shells: Option<usize>,
    sigma: Option<f64>,
    match_noise: Option<bool>,
    mode: Option<String>,
    attack_steps: Option<usize>,
    attack_restarts: Option<usize>,
    draws: Option<String>,
    runs: Option<usize>,
    seed: Option<u64>,
    threads: Option<usize>,
    delta: Option<f64>,
    trials: Option<usize>,
    s_values: Option<Vec<f64>>,
    alpha_tilde_values: Option<Vec<f64>>,
    table: Option<PathBuf>,
    threshold: Option<PathBuf>,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::invalid("config", format!("{}: {e}", path.display())))
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
struct CommonArgs {
    /// Flat TOML config file; explicit flags override its values
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed (default: the PRCP_SEED environment variable, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Cap the worker-thread count (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
}

fn seed_with_env(flag: Option<u64>, file: Option<u64>, env: Option<String>) -> Result<u64> {
    if let Some(seed) = flag.or(file) {
        return Ok(seed);
    }
    match env {
        Some(value) => value.trim().parse().map_err(|_| {
            Error::invalid(
                "seed",
                format!("{SEED_ENV}={value:?} is not an unsigned 64-bit integer"),
            )
        }),
        None => Ok(0),
    }
}

/// Load the config file, resolve the seed, and apply any thread cap.
fn setup(common: &CommonArgs) -> Result<(FileConfig, u64)> {
    let file = load_file_config(common.config.as_deref())?;
    let seed = seed_with_env(common.seed, file.seed, std::env::var(SEED_ENV).ok())?;
    if let Some(threads) = common.threads.or(file.threads) {
        if threads == 0 {
            return Err(Error::invalid("threads", "need at least one thread"));
        }
        // Ignore a second initialization (the pool cap is process-wide).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    Ok((file, seed))
}

fn parse_enum<E: ValueEnum>(name: &'static str, value: &str) -> Result<E> {
    E::from_str(value, true).map_err(|_| {
        let allowed: Vec<String> = E::value_variants()
            .iter()
            .filter_map(|v| v.to_possible_value())
            .map(|v| v.get_name().to_string())
            .collect();
        Error::invalid(
            name,
            format!(
                "unknown value {value:?} (expected one of: {})",
                allowed.join(", ")
            ),
        )
    })
}

fn resolve_enum<E: ValueEnum + Copy>(
    flag: Option<E>,
    file: Option<&str>,
    name: &'static str,
) -> Result<Option<E>> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.map(|s| parse_enum(name, s)).transpose(),
    }
}

fn scheme_from(kind: NoiseArg, shells: usize, sigma: f64) -> Result<NoiseScheme> {
    let scheme = match kind {
        NoiseArg::Uniform => NoiseScheme::UniformBall,
        NoiseArg::Shell => NoiseScheme::Shell { shells },
        NoiseArg::Gaussian => NoiseScheme::GaussianInBall { sigma },
    };
    scheme.validate()?;
    Ok(scheme)
}

/// Atomic write: temp file in the destination directory, then rename.
fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source: e,
    };
    let dir = match path.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => parent,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(content.as_bytes()).map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

fn pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data {
        path: "<json>".into(),
        message: e.to_string(),
    })?;
    text.push('\n');
    Ok(text)
}

/// A calibrated threshold on disk: `{method, params, value, n, m, seed}`.
/// Loading re-checks the aPRCP level-coupling invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdArtifact {
    pub method: Method,
    pub params: ThresholdParams,
    pub value: QuantileValue,
    /// Calibration sample count.
    pub n: usize,
    /// Perturbation draws per sample (0 for clean-score methods).
    pub m: usize,
    pub seed: u64,
}

impl ThresholdArtifact {
    pub fn from_threshold(threshold: &Threshold, n: usize, m: usize, seed: u64) -> Self {
        Self {
            method: threshold.method,
            params: threshold.params,
            value: threshold.value,
            n,
            m,
            seed,
        }
    }

    /// Reconstruct the threshold, re-validating the parameter invariants.
    pub fn threshold(&self) -> Result<Threshold> {
        Threshold::new(self.value, self.method, self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let artifact: Self = serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        artifact.threshold()?;
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &pretty_json(self)?)
    }
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of classes
    #[arg(long)]
    classes: Option<usize>,
    /// Feature dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Number of samples (0 writes only the header)
    #[arg(long)]
    n: Option<usize>,
    /// Feature-file output path (.csv or .json)
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Also write the Bayes classifier's probability table here
    #[arg(long, value_name = "PATH")]
    table: Option<PathBuf>,
}

/// Feature file: CSV header `id,label,x0,...,x{d-1}` or a JSON array of
/// `{id, label, x}` objects, chosen by extension. Floats print in shortest
/// round-trip form.
fn render_dataset(data: &LabeledDataset, dim: usize, format: TableFormat) -> String {
    match format {
        TableFormat::Csv => {
            let mut out = String::from("id,label");
            for k in 0..dim {
                out.push_str(&format!(",x{k}"));
            }
            out.push('\n');
            for (i, (x, y)) in data.xs().iter().zip(data.ys()).enumerate() {
                out.push_str(&format!("{i},{y}"));
                for v in x {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
            out
        }
        TableFormat::Json => {
            #[derive(Serialize)]
            struct JsonRow<'a> {
                id: usize,
                label: usize,
                x: &'a [f64],
            }
            let rows: Vec<JsonRow> = data
                .xs()
                .iter()
                .zip(data.ys())
                .enumerate()
                .map(|(i, (x, y))| JsonRow {
                    id: i,
                    label: *y,
                    x,
                })
                .collect();
            let mut text = serde_json::to_string_pretty(&rows).expect("serialize rows");
            text.push('\n');
            text
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let (file, seed) = setup(&args.common)?;
    let defaults = ExperimentConfig::default();
    let classes = args.classes.or(file.classes).unwrap_or(defaults.classes);
    let dim = args.dim.or(file.dim).unwrap_or(defaults.dim);
    let n = args.n.or(file.n).unwrap_or(defaults.n_cal);
    let out = args
        .out
        .or(file.out)
        .ok_or_else(|| Error::invalid("out", "generate needs an output path (--out)"))?;

    let task = SyntheticTaskSpec::default_task(classes, dim)?;
    let data = generate_synthetic_dataset(&task, n, subseed(seed, Stage::DataGen as u64, 0));
    write_atomic(
        &out,
        &render_dataset(&data, dim, TableFormat::from_path(&out)),
    )?;
    println!(
        "wrote {n} samples ({classes} classes, dim {dim}, seed {seed}) to {}",
        out.display()
    );

    if let Some(table_path) = args.table.or(file.table) {
        let clf = bayes_classifier(&task);
        let table = ProbabilityTable::from_predictions(&clf, &data)?;
        save_probability_table(&table, &table_path, TableFormat::from_path(&table_path))?;
        println!("wrote probability table to {}", table_path.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Calibration method
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Non-conformity score
    #[arg(long, value_enum)]
    score: Option<ScoreArg>,
    /// Target miscoverage level in (0, 1)
    #[arg(long)]
    alpha: Option<f64>,
    /// aPRCP conservativeness s in [0, alpha]; couples the inner level
    #[arg(long)]
    s: Option<f64>,
    /// aPRCP inner level (alternative to --s via the coupling)
    #[arg(long)]
    alpha_tilde: Option<f64>,
    /// Pin the aPRCP inner level regardless of s (records a signed gap)
    #[arg(long)]
    fixed_alpha_tilde: Option<f64>,
    /// iPRCP miss level eta in [0, alpha]
    #[arg(long)]
    eta: Option<f64>,
    /// Explicit inflation constant (required for rscp/iprcp with --table)
    #[arg(long)]
    m_r: Option<f64>,
    /// Cross-domain density gap d >= 0 (tightens the aPRCP inner level)
    #[arg(long)]
    d_gap: Option<f64>,
    /// aPRCP perturbation draws per calibration sample
    #[arg(long)]
    m: Option<usize>,
    /// Calibration noise scheme
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    /// Perturbation radius r
    #[arg(long)]
    radius: Option<f64>,
    /// Shell count for the shell scheme
    #[arg(long)]
    shells: Option<usize>,
    /// Coordinate scale for the gaussian scheme (default: the radius)
    #[arg(long)]
    sigma: Option<f64>,
    /// Draw coupling across calibration samples
    #[arg(long, value_enum)]
    draws: Option<DrawsArg>,
    /// Calibrate from a stored probability table instead of synthetic data
    #[arg(long, value_name = "PATH")]
    table: Option<PathBuf>,
    /// Synthetic task: number of classes
    #[arg(long)]
    classes: Option<usize>,
    /// Synthetic task: feature dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Synthetic calibration sample count
    #[arg(long)]
    n: Option<usize>,
    /// Artifact output path (stdout if omitted)
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let (file, seed) = setup(&args.common)?;
    let defaults = ExperimentConfig::default();
    let method = resolve_enum(args.method, file.method.as_deref(), "method")?
        .map(MethodArg::to_method)
        .unwrap_or(defaults.method);
    let score_kind = resolve_enum(args.score, file.score.as_deref(), "score")?
        .map(ScoreArg::to_kind)
        .unwrap_or(defaults.score_kind);
    let alpha = args.alpha.or(file.alpha).unwrap_or(defaults.alpha);
    let eta = args.eta.or(file.eta);
    let m_r = args.m_r.or(file.m_r);
    let m = args.m.or(file.m).unwrap_or(defaults.m);

    let artifact = if let Some(table_path) = args.table.or(file.table) {
        if method == Method::Aprcp {
            return Err(Error::invalid(
                "method",
                "aPRCP calibrates on perturbed features, which a probability table \
                 does not carry; use vanilla, rscp, or iprcp with --table",
            ));
        }
        let table = load_probability_table(&table_path, TableFormat::from_path(&table_path))?;
        let labels: Vec<usize> = table.rows().iter().map(|r| r.label).collect();
        let scores = score_batch(
            &table,
            &labels,
            score_kind,
            subseed(seed, Stage::CalScoreU as u64, 0),
        )?;
        let values: Vec<f64> = scores.iter().map(|s| s.value()).collect();
        let need_m_r = || {
            m_r.ok_or_else(|| {
                Error::invalid(
                    "m_r",
                    "table-backed calibration has no classifier to bound; supply --m-r",
                )
            })
        };
        let threshold = match method {
            Method::Vanilla => crate::calibrate::vanilla_cp_threshold(&values, alpha)?,
            Method::InflatedAr => {
                crate::calibrate::inflated_ar_threshold(&values, alpha, need_m_r()?)?
            }
            Method::Iprcp => {
                crate::calibrate::iprcp_threshold(&values, alpha, eta.unwrap_or(0.0), need_m_r()?)?
            }
            Method::Aprcp => unreachable!(),
        };
        ThresholdArtifact::from_threshold(&threshold, table.len(), 0, seed)
    } else {
        let classes = args.classes.or(file.classes).unwrap_or(defaults.classes);
        let dim = args.dim.or(file.dim).unwrap_or(defaults.dim);
        let n = args.n.or(file.n).unwrap_or(defaults.n_cal);
        let radius = args.radius.or(file.radius).unwrap_or(defaults.radius);
        let sigma = args.sigma.or(file.sigma).unwrap_or(radius);
        let shells = args
            .shells
            .or(file.shells)
            .unwrap_or_else(|| (m / 2).max(1));
        let noise =
            resolve_enum(args.noise, file.noise.as_deref(), "noise")?.unwrap_or(NoiseArg::Uniform);
        let cal_scheme = scheme_from(noise, shells, sigma)?;
        let draw_mode = resolve_enum(args.draws, file.draws.as_deref(), "draws")?
            .map(DrawsArg::to_mode)
            .unwrap_or(defaults.draw_mode);
        let mut s = args.s.or(file.s);
        let alpha_tilde = args.alpha_tilde.or(file.alpha_tilde);
        if method == Method::Aprcp && s.is_none() && alpha_tilde.is_none() {
            s = defaults.s;
        }
        // Reuse the experiment calibration path so `calibrate --seed X`
        // produces exactly the threshold of a pipeline run with run seed X.
        let config = ExperimentConfig {
            method,
            score_kind,
            classes,
            dim,
            n_cal: n,
            n_test: 1,
            m,
            n_s: 1,
            alpha,
            s,
            alpha_tilde,
            eta,
            m_r,
            d_gap: args.d_gap.or(file.d_gap),
            fixed_alpha_tilde: args.fixed_alpha_tilde.or(file.fixed_alpha_tilde),
            radius,
            cal_scheme,
            eval_scheme: cal_scheme,
            mode: EvalMode::Probabilistic,
            draw_mode,
            runs: 1,
            seed,
            ..defaults
        };
        config.validate()?;
        let task = config.task()?;
        let clf = bayes_classifier(&task);
        let cal_data =
            generate_synthetic_dataset(&task, n, subseed(seed, Stage::DataGen as u64, 0));
        let threshold = calibrate_threshold(&config, &clf, &cal_data, seed)?;
        let draws_used = if method == Method::Aprcp { m } else { 0 };
        ThresholdArtifact::from_threshold(&threshold, n, draws_used, seed)
    };

    match args.out.or(file.out) {
        Some(path) => {
            artifact.save(&path)?;
            println!(
                "calibrated {} threshold {} (n={}, seed {seed}) to {}",
                artifact.method,
                artifact.value,
                artifact.n,
                path.display()
            );
        }
        None => print!("{}", pretty_json(&artifact)?),
    }
    Ok(())
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Threshold artifact path (from `calibrate`)
    #[arg(long, value_name = "PATH")]
    threshold: Option<PathBuf>,
    /// Score the threshold was calibrated with
    #[arg(long, value_enum)]
    score: Option<ScoreArg>,
    /// Evaluation regime
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Perturbation draws per test sample (probabilistic mode)
    #[arg(long)]
    n_s: Option<usize>,
    /// Evaluation noise scheme (default: shell)
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    /// Perturbation radius r
    #[arg(long)]
    radius: Option<f64>,
    /// Shell count for the shell scheme
    #[arg(long)]
    shells: Option<usize>,
    /// Coordinate scale for the gaussian scheme (default: the radius)
    #[arg(long)]
    sigma: Option<f64>,
    /// Attack iterations (worst mode)
    #[arg(long)]
    attack_steps: Option<usize>,
    /// Attack restarts (worst mode)
    #[arg(long)]
    attack_restarts: Option<usize>,
    /// Evaluate stored probability rows instead (clean only: radius 0)
    #[arg(long, value_name = "PATH")]
    table: Option<PathBuf>,
    /// Synthetic task: number of classes
    #[arg(long)]
    classes: Option<usize>,
    /// Synthetic task: feature dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Synthetic test sample count
    #[arg(long)]
    n_test: Option<usize>,
    /// Report output path (stdout summary only if omitted)
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

/// Effective-settings echo plus the two aggregate metrics.
#[derive(Debug, Serialize)]
struct EvaluateReport {
    threshold: ThresholdArtifact,
    score: ScoreKind,
    mode: EvalMode,
    source: String,
    n_eval: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_s: Option<usize>,
    radius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    scheme: Option<NoiseScheme>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attack_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attack_restarts: Option<usize>,
    seed: u64,
    coverage: f64,
    set_size: f64,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let (file, seed) = setup(&args.common)?;
    let defaults = ExperimentConfig::default();
    let artifact_path = args
        .threshold
        .or(file.threshold)
        .ok_or_else(|| Error::invalid("threshold", "evaluate needs a threshold artifact path"))?;
    let artifact = ThresholdArtifact::load(&artifact_path)?;
    let threshold = artifact.threshold()?;
    let score_kind = resolve_enum(args.score, file.score.as_deref(), "score")?
        .map(ScoreArg::to_kind)
        .unwrap_or(defaults.score_kind);
    let mode = resolve_enum(args.mode, file.mode.as_deref(), "mode")?
        .map(ModeArg::to_mode)
        .unwrap_or(EvalMode::Probabilistic);

    let report = if let Some(table_path) = args.table.or(file.table) {
        if mode == EvalMode::Worst {
            return Err(Error::invalid(
                "mode",
                "worst-case evaluation needs the synthetic classifier; \
                 probability tables carry no gradients",
            ));
        }
        let radius = args.radius.or(file.radius).unwrap_or(0.0);
        if radius != 0.0 {
            return Err(Error::invalid(
                "radius",
                "a probability table has no feature space to perturb; radius must be 0",
            ));
        }
        let table = load_probability_table(&table_path, TableFormat::from_path(&table_path))?;
        if table.is_empty() {
            return Err(Error::EmptyInput("evaluate needs at least one table row"));
        }
        let mut covered = 0usize;
        let mut size_sum = 0usize;
        for (i, row) in table.rows().iter().enumerate() {
            let u = crate::eval::eval_set_u(seed, i, 0, 1);
            let set = prediction_set_with_u(&row.probs, &threshold.value, score_kind, u)?;
            covered += usize::from(set.contains(row.label));
            size_sum += set.len();
        }
        EvaluateReport {
            threshold: artifact,
            score: score_kind,
            mode,
            source: table_path.display().to_string(),
            n_eval: table.len(),
            n_s: None,
            radius: 0.0,
            scheme: None,
            attack_steps: None,
            attack_restarts: None,
            seed,
            coverage: covered as f64 / table.len() as f64,
            set_size: size_sum as f64 / table.len() as f64,
        }
    } else {
        let classes = args.classes.or(file.classes).unwrap_or(defaults.classes);
        let dim = args.dim.or(file.dim).unwrap_or(defaults.dim);
        let n_test = args.n_test.or(file.n_test).unwrap_or(defaults.n_test);
        let radius = args.radius.or(file.radius).unwrap_or(defaults.radius);
        let n_s = args.n_s.or(file.n_s).unwrap_or(defaults.n_s);
        let task = SyntheticTaskSpec::default_task(classes, dim)?;
        let clf = bayes_classifier(&task);
        let test_data =
            generate_synthetic_dataset(&task, n_test, subseed(seed, Stage::DataGen as u64, 1));
        let budget = PerturbationBudget::new(radius, dim)?;
        match mode {
            EvalMode::Probabilistic => {
                let shells = args
                    .shells
                    .or(file.shells)
                    .unwrap_or_else(|| (n_s / 2).max(1));
                let sigma = args.sigma.or(file.sigma).unwrap_or(radius);
                let noise = resolve_enum(args.noise, file.noise.as_deref(), "noise")?
                    .unwrap_or(NoiseArg::Shell);
                let scheme = scheme_from(noise, shells, sigma)?;
                let samples = crate::eval::probabilistic_eval(
                    &threshold, &clf, &test_data, &budget, n_s, &scheme, score_kind, seed,
                )?;
                let (coverage, set_size) = mean_metrics(&samples);
                EvaluateReport {
                    threshold: artifact,
                    score: score_kind,
                    mode,
                    source: "synthetic".into(),
                    n_eval: n_test,
                    n_s: Some(n_s),
                    radius,
                    scheme: Some(scheme),
                    attack_steps: None,
                    attack_restarts: None,
                    seed,
                    coverage,
                    set_size,
                }
            }
            EvalMode::Worst => {
                let steps = args
                    .attack_steps
                    .or(file.attack_steps)
                    .unwrap_or(defaults.attack_steps);
                let restarts = args
                    .attack_restarts
                    .or(file.attack_restarts)
                    .unwrap_or(defaults.attack_restarts);
                let cfg = crate::adversary::AttackConfig::with_schedule(budget, steps, restarts);
                let samples = crate::eval::worst_case_eval(
                    &threshold, &clf, &test_data, &cfg, score_kind, seed,
                )?;
                let (coverage, set_size) = mean_metrics(&samples);
                EvaluateReport {
                    threshold: artifact,
                    score: score_kind,
                    mode,
                    source: "synthetic".into(),
                    n_eval: n_test,
                    n_s: None,
                    radius,
                    scheme: None,
                    attack_steps: Some(steps),
                    attack_restarts: Some(restarts),
                    seed,
                    coverage,
                    set_size,
                }
            }
        }
    };

    println!(
        "coverage {:.4}  set_size {:.4}  ({} samples, {:?} mode, seed {seed})",
        report.coverage, report.set_size, report.n_eval, report.mode
    );
    if let Some(path) = args.out.or(file.out) {
        write_atomic(&path, &pretty_json(&report)?)?;
        println!("wrote report to {}", path.display());
    }
    Ok(())
}

/// The full experiment flag set shared by `pipeline` and `sweep`.
#[derive(Debug, Args)]
struct ExperimentFlags {
    /// Calibration method
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Non-conformity score
    #[arg(long, value_enum)]
    score: Option<ScoreArg>,
    /// Number of classes
    #[arg(long)]
    classes: Option<usize>,
    /// Feature dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Calibration sample count
    #[arg(long)]
    n: Option<usize>,
    /// Test sample count
    #[arg(long)]
    n_test: Option<usize>,
    /// aPRCP perturbation draws per calibration sample
    #[arg(long)]
    m: Option<usize>,
    /// Evaluation perturbation draws per test sample
    #[arg(long)]
    n_s: Option<usize>,
    /// Target miscoverage level in (0, 1)
    #[arg(long)]
    alpha: Option<f64>,
    /// aPRCP conservativeness s in [0, alpha]
    #[arg(long)]
    s: Option<f64>,
    /// aPRCP inner level (alternative to --s via the coupling)
    #[arg(long)]
    alpha_tilde: Option<f64>,
    /// Pin the aPRCP inner level regardless of s (records a signed gap)
    #[arg(long)]
    fixed_alpha_tilde: Option<f64>,
    /// iPRCP miss level eta in [0, alpha]
    #[arg(long)]
    eta: Option<f64>,
    /// Explicit inflation constant (default: analytic HPS bound)
    #[arg(long)]
    m_r: Option<f64>,
    /// Cross-domain density gap d >= 0
    #[arg(long)]
    d_gap: Option<f64>,
    /// Perturbation radius r
    #[arg(long)]
    radius: Option<f64>,
    /// Calibration noise scheme
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    /// Shell count (shell schemes; default n-s / 2)
    #[arg(long)]
    shells: Option<usize>,
    /// Coordinate scale for the gaussian scheme (default: the radius)
    #[arg(long)]
    sigma: Option<f64>,
    /// Evaluate with the calibration scheme instead of the shell default
    #[arg(long)]
    match_noise: bool,
    /// Evaluation regime
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Attack iterations (worst mode)
    #[arg(long)]
    attack_steps: Option<usize>,
    /// Attack restarts (worst mode)
    #[arg(long)]
    attack_restarts: Option<usize>,
    /// Draw coupling across calibration samples
    #[arg(long, value_enum)]
    draws: Option<DrawsArg>,
    /// Number of repeated runs
    #[arg(long)]
    runs: Option<usize>,
}

impl ExperimentFlags {
    fn to_config(&self, file: &FileConfig, seed: u64) -> Result<ExperimentConfig> {
        let defaults = ExperimentConfig::default();
        let method = resolve_enum(self.method, file.method.as_deref(), "method")?
            .map(MethodArg::to_method)
            .unwrap_or(defaults.method);
        let score_kind = resolve_enum(self.score, file.score.as_deref(), "score")?
            .map(ScoreArg::to_kind)
            .unwrap_or(defaults.score_kind);
        let n_s = self.n_s.or(file.n_s).unwrap_or(defaults.n_s);
        let radius = self.radius.or(file.radius).unwrap_or(defaults.radius);
        let shells = self
            .shells
            .or(file.shells)
            .unwrap_or_else(|| (n_s / 2).max(1));
        let sigma = self.sigma.or(file.sigma).unwrap_or(radius);
        let noise =
            resolve_enum(self.noise, file.noise.as_deref(), "noise")?.unwrap_or(NoiseArg::Uniform);
        let cal_scheme = scheme_from(noise, shells, sigma)?;
        let match_noise = self.match_noise || file.match_noise.unwrap_or(false);
        let eval_scheme = if match_noise {
            cal_scheme
        } else {
            NoiseScheme::Shell { shells }
        };
        let mut s = self.s.or(file.s);
        let alpha_tilde = self.alpha_tilde.or(file.alpha_tilde);
        if method == Method::Aprcp && s.is_none() && alpha_tilde.is_none() {
            s = defaults.s;
        }
        Ok(ExperimentConfig {
            method,
            score_kind,
            classes: self.classes.or(file.classes).unwrap_or(defaults.classes),
            dim: self.dim.or(file.dim).unwrap_or(defaults.dim),
            n_cal: self.n.or(file.n).unwrap_or(defaults.n_cal),
            n_test: self.n_test.or(file.n_test).unwrap_or(defaults.n_test),
            m: self.m.or(file.m).unwrap_or(defaults.m),
            n_s,
            alpha: self.alpha.or(file.alpha).unwrap_or(defaults.alpha),
            s,
            alpha_tilde,
            eta: self.eta.or(file.eta),
            m_r: self.m_r.or(file.m_r),
            d_gap: self.d_gap.or(file.d_gap),
            fixed_alpha_tilde: self.fixed_alpha_tilde.or(file.fixed_alpha_tilde),
            radius,
            cal_scheme,
            eval_scheme,
            mode: resolve_enum(self.mode, file.mode.as_deref(), "mode")?
                .map(ModeArg::to_mode)
                .unwrap_or(defaults.mode),
            attack_steps: self
                .attack_steps
                .or(file.attack_steps)
                .unwrap_or(defaults.attack_steps),
            attack_restarts: self
                .attack_restarts
                .or(file.attack_restarts)
                .unwrap_or(defaults.attack_restarts),
            draw_mode: resolve_enum(self.draws, file.draws.as_deref(), "draws")?
                .map(DrawsArg::to_mode)
                .unwrap_or(defaults.draw_mode),
            runs: self.runs.or(file.runs).unwrap_or(defaults.runs),
            seed,
        })
    }
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    exp: ExperimentFlags,
    /// JSON report output path
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Per-run CSV output path
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let (file, seed) = setup(&args.common)?;
    let config = args.exp.to_config(&file, seed)?;
    let report = run_experiment(&config)?;
    print!("{}", report.to_text());
    if let Some(path) = args.out.or(file.out) {
        write_atomic(&path, &report.to_json()?)?;
        println!("wrote report to {}", path.display());
    }
    if let Some(path) = args.csv.or(file.csv) {
        write_atomic(&path, &report.to_csv())?;
        println!("wrote per-run rows to {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    exp: ExperimentFlags,
    /// Comma-separated s grid
    #[arg(long, value_delimiter = ',', value_name = "S,...")]
    s_values: Option<Vec<f64>>,
    /// Comma-separated alpha-tilde grid
    #[arg(long, value_delimiter = ',', value_name = "A,...")]
    alpha_tilde_values: Option<Vec<f64>>,
    /// JSON output path for the full report list
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Per-point aggregate CSV output path
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (file, seed) = setup(&args.common)?;
    let config = args.exp.to_config(&file, seed)?;
    if config.method != Method::Aprcp {
        return Err(Error::invalid("method", "sweep applies to aPRCP only"));
    }
    let fixed = config.fixed_alpha_tilde;
    let grid = match (
        args.s_values.or(file.s_values.clone()),
        args.alpha_tilde_values.or(file.alpha_tilde_values.clone()),
    ) {
        (Some(_), Some(_)) => {
            return Err(Error::invalid(
                "s_values",
                "choose one grid: s-values or alpha-tilde-values",
            ));
        }
        (Some(values), None) => SweepGrid::S {
            values,
            fixed_alpha_tilde: fixed,
        },
        (None, Some(values)) => {
            if fixed.is_some() {
                return Err(Error::invalid(
                    "fixed_alpha_tilde",
                    "a fixed inner level only makes sense on an s grid",
                ));
            }
            SweepGrid::AlphaTilde { values }
        }
        (None, None) => {
            return Err(Error::invalid(
                "s_values",
                "sweep needs a grid: --s-values or --alpha-tilde-values",
            ));
        }
    };
    let reports = sweep_tradeoff(&config, &grid)?;

    println!(
        "{:>10}  {:>12}  {:>12}  {:>9}  {:>9}  {:>9}  {:>9}",
        "s", "alpha_tilde", "d_gap", "cov_mean", "cov_std", "size_mean", "size_std"
    );
    let mut csv =
        String::from("s,alpha_tilde,d_gap,coverage_mean,coverage_std,set_size_mean,set_size_std\n");
    for report in &reports {
        let (s, alpha_tilde, d_gap) = derive_levels_echo(&report.config)?;
        let a = &report.aggregate;
        println!(
            "{s:>10.4}  {alpha_tilde:>12.6}  {d_gap:>12.6}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}",
            a.coverage_mean, a.coverage_std, a.set_size_mean, a.set_size_std
        );
        csv.push_str(&format!(
            "{s},{alpha_tilde},{d_gap},{},{},{},{}\n",
            a.coverage_mean, a.coverage_std, a.set_size_mean, a.set_size_std
        ));
    }
    if let Some(path) = args.out.or(file.out) {
        write_atomic(&path, &pretty_json(&reports)?)?;
        println!("wrote {} reports to {}", reports.len(), path.display());
    }
    if let Some(path) = args.csv.or(file.csv) {
        write_atomic(&path, &csv)?;
        println!("wrote sweep rows to {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
struct ConcentrationArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Calibration size n
    #[arg(long)]
    n: Option<usize>,
    /// Quantile miscoverage level alpha
    #[arg(long)]
    alpha: Option<f64>,
    /// Failure budget delta
    #[arg(long)]
    delta: Option<f64>,
    /// Monte-Carlo trials
    #[arg(long)]
    trials: Option<usize>,
}

/// Outcome of the quantile-sandwich Monte-Carlo check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationSummary {
    pub band: ConcentrationBand,
    pub trials: usize,
    pub contained: usize,
}

impl ConcentrationSummary {
    pub fn rate(&self) -> f64 {
        self.contained as f64 / self.trials as f64
    }

    pub fn passed(&self) -> bool {
        self.rate() >= 1.0 - self.band.delta
    }
}

/// Draw `n` Uniform(0,1) scores per trial and count how often the empirical
/// `(1−α)`-quantile lands within `ε_n` of the population quantile `1−α`
/// (uniform scores make the population CDF the identity, so the sandwich
/// reduces to a direct distance check). The bound promises a hit rate of at
/// least `1−δ`; the Chernoff band is loose, so observed rates run higher.
pub fn concentration_trials(
    n: usize,
    alpha: f64,
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<ConcentrationSummary> {
    let band = concentration_half_width(n, alpha, delta)?;
    if trials == 0 {
        return Err(Error::invalid("trials", "need at least one trial"));
    }
    let mut contained = 0usize;
    for trial in 0..trials {
        let mut rng = stage_rng(seed, Stage::Concentration, trial as u64);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let result = empirical_quantile(&scores, alpha)?;
        let cdf_at_quantile = match result.value {
            QuantileValue::Finite(v) => v.clamp(0.0, 1.0),
            QuantileValue::Infinite => 1.0,
        };
        if (cdf_at_quantile - (1.0 - alpha)).abs() <= band.half_width {
            contained += 1;
        }
    }
    Ok(ConcentrationSummary {
        band,
        trials,
        contained,
    })
}

fn cmd_concentration_check(args: ConcentrationArgs) -> Result<()> {
    let (file, seed) = setup(&args.common)?;
    let n = args.n.or(file.n).unwrap_or(2000);
    let alpha = args.alpha.or(file.alpha).unwrap_or(0.1);
    let delta = args.delta.or(file.delta).unwrap_or(0.05);
    let trials = args.trials.or(file.trials).unwrap_or(1000);
    let summary = concentration_trials(n, alpha, delta, trials, seed)?;
    let band = &summary.band;
    println!("quantile concentration check: n={n} alpha={alpha} delta={delta} trials={trials} seed={seed}");
    println!("epsilon_n = {}", band.half_width);
    println!(
        "band [{}, {}] around {}",
        1.0 - alpha - band.half_width,
        1.0 - alpha + band.half_width,
        1.0 - alpha
    );
    println!(
        "contained {}/{}  rate {}  target {}",
        summary.contained,
        summary.trials,
        summary.rate(),
        1.0 - delta
    );
    println!("{}", if summary.passed() { "PASS" } else { "FAIL" });
    Ok(())
}
