//! The `copulad` command line: generate, train, evaluate, score and plot.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use copulad::config::{resolve_config, RunConfig};
use copulad::evaluation::{emit_report, plot_history, read_report, write_score_dump, EpochRecord, MetricsReport};
use copulad::pipeline::{
    evaluate_series, fit, load_checkpoint, load_csv, save_checkpoint, write_csv, write_events,
};
use copulad::synthdata::generate_latent_series;
use copulad::{Error, Result};
use toml::Value;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.json";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "copulad", version, about = "Copula-based anomaly detection for multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic scenario as train/test CSVs with event sidecars.
    Generate(RunArgs),
    /// Fit a model and write its checkpoint, history and resolved config.
    Train(RunArgs),
    /// Score labelled data and write the metrics report and charts.
    Evaluate(ModelArgs),
    /// Dump stride-1 window scores to CSV.
    Score(ModelArgs),
    /// Draw the training curves of a history or report file.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FamilyArg {
    Multivariate,
    Copula,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaseArg {
    Gaussian,
    #[value(name = "student_t")]
    StudentT,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data directory (or CSV file for `train`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(i64).range(0..))]
    seed: Option<i64>,
    /// Scenario preset.
    #[arg(long, value_parser = clap::value_parser!(i64).range(1..=3))]
    case: Option<i64>,
    #[arg(long)]
    family: Option<FamilyArg>,
    #[arg(long)]
    base: Option<BaseArg>,
    /// Window length L.
    #[arg(long)]
    window: Option<u32>,
    #[arg(long)]
    stride: Option<u32>,
    /// Hinge margin δ.
    #[arg(long)]
    margin: Option<f64>,
    /// Hinge weight α.
    #[arg(long)]
    alpha: Option<f64>,
    /// Student-t degrees of freedom.
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    /// Score with the marginal-only baseline instead of the joint density.
    #[arg(long)]
    baseline: bool,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Checkpoint file, or the run directory holding it.
    #[arg(long)]
    model: PathBuf,
    /// CSV file, or a data directory holding `test.csv`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (`evaluate`) or CSV file (`score`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// A `history.json` or `report.json` file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; defaults to `figures/` next to the input.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

impl RunArgs {
    /// `generate` writes its output into the data directory.
    fn overrides(&self, generating: bool) -> Vec<(String, Value)> {
        let mut o: Vec<(String, Value)> = Vec::new();
        let path = |p: &Path| Value::String(p.to_string_lossy().into_owned());
        let mut put = |key: &str, value: Option<Value>| {
            if let Some(v) = value {
                o.push((key.to_string(), v));
            }
        };
        if generating {
            put("data", self.out.as_deref().or(self.data.as_deref()).map(path));
        } else {
            put("data", self.data.as_deref().map(path));
            put("out", self.out.as_deref().map(path));
        }
        put("seed", self.seed.map(Value::Integer));
        put("scenario.case_preset", self.case.map(Value::Integer));
        put(
            "train.dependency.family",
            self.family.map(|f| Value::String(match f {
                FamilyArg::Multivariate => "multivariate".into(),
                FamilyArg::Copula => "copula".into(),
            })),
        );
        put(
            "train.dependency.base",
            self.base.map(|b| Value::String(match b {
                BaseArg::Gaussian => "gaussian".into(),
                BaseArg::StudentT => "student_t".into(),
            })),
        );
        put("train.window_size", self.window.map(|v| Value::Integer(v.into())));
        put("train.stride", self.stride.map(|v| Value::Integer(v.into())));
        put("train.loss.margin", self.margin.map(Value::Float));
        put("train.loss.alpha", self.alpha.map(Value::Float));
        put("train.dependency.nu", self.nu.map(Value::Float));
        put("train.epochs", self.epochs.map(|v| Value::Integer(v.into())));
        put("train.learning_rate", self.lr.map(Value::Float));
        put("train.scorer", self.baseline.then(|| Value::String("marginal".into())));
        o
    }

    fn resolve(&self, generating: bool) -> Result<RunConfig> {
        let text = self.config.as_deref().map(fs::read_to_string).transpose()?;
        resolve_config(text.as_deref(), &self.overrides(generating))
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 success, 1 usage or configuration error, 2 failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Train(a) => train(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Score(a) => score(&a),
        Command::Plot(a) => plot(&a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_)
                | Error::UnknownKey { .. }
                | Error::TypeMismatch { .. }
                | Error::UnknownCase(_)
                | Error::OutputExists(_) => 1,
                _ => 2,
            }
        }
    }
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.is_file() || (dir.is_dir() && fs::read_dir(dir)?.next().is_some() && !force) {
        return Err(Error::OutputExists(dir.display().to_string()));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn prepare_file(path: &Path, force: bool) -> Result<()> {
    if path.is_dir() || (path.exists() && !force) {
        return Err(Error::OutputExists(path.display().to_string()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn input_file(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

/// Loads a CSV whose trailing `label` column is optional.
fn load_series(path: &Path) -> Result<copulad::synthdata::LabeledSeries> {
    let text = fs::read_to_string(path)?;
    let header = text.lines().next().unwrap_or_default();
    let labelled = header.rsplit(',').next().is_some_and(|c| c.trim() == "label");
    load_csv(path, labelled)
}

fn generate(args: &RunArgs) -> Result<()> {
    let config = args.resolve(true)?;
    let dir = config.data.clone();
    prepare_dir(&dir, args.force)?;
    let series = generate_latent_series(&config.scenario)?;
    let n = series.len();
    let cut = n - (n as f64 * config.test_fraction).round() as usize;
    if cut == 0 || cut == n {
        return Err(Error::InvalidConfig(format!(
            "test_fraction {} leaves an empty split of {n} rows",
            config.test_fraction
        )));
    }
    for (name, part) in [("train", series.slice(0, cut)), ("test", series.slice(cut, n))] {
        write_csv(&dir.join(format!("{name}.csv")), &part)?;
        write_events(&dir.join(format!("{name}.events.csv")), &part.events)?;
    }
    fs::write(dir.join(CONFIG_ECHO), config.to_toml()?)?;
    println!("wrote {} train and {} test rows to {}", cut, n - cut, dir.display());
    Ok(())
}

fn train(args: &RunArgs) -> Result<()> {
    let mut config = args.resolve(false)?;
    let data = input_file(&config.data, "train.csv");
    prepare_dir(&config.out, args.force)?;
    let series = load_series(&data)?;
    config.train.encoder.input_dim = series.dim;
    config.validate()?;
    fs::write(config.out.join(CONFIG_ECHO), config.to_toml()?)?;

    let (ckpt, history) = fit(&series, None, &config.train)?;
    save_checkpoint(&ckpt, &config.out.join(CHECKPOINT_FILE))?;
    fs::write(config.out.join(HISTORY_FILE), serde_json::to_string_pretty(&history)?)?;
    println!(
        "trained {} epochs, kept epoch {}; artifacts in {}",
        history.len(),
        ckpt.epoch,
        config.out.display()
    );
    Ok(())
}

fn model_file(path: &Path) -> PathBuf {
    input_file(path, CHECKPOINT_FILE)
}

fn evaluate(args: &ModelArgs) -> Result<()> {
    let ckpt_path = model_file(&args.model);
    let run_dir = ckpt_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out = args.out.clone().unwrap_or_else(|| run_dir.join("eval"));
    prepare_dir(&out, args.force)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let series = load_csv(&input_file(&args.data, "test.csv"), true)?;
    let (scored, tau, c, delay) = evaluate_series(&ckpt, &series)?;

    let history_path = run_dir.join(HISTORY_FILE);
    let history: Vec<EpochRecord> = if history_path.is_file() {
        serde_json::from_str(&fs::read_to_string(&history_path)?)?
    } else {
        Vec::new()
    };
    let report = MetricsReport::new(&c, tau, &delay, scored.scores.len());
    let files = emit_report(&report, &history, &out)?;
    println!(
        "precision {:.4} recall {:.4} f1 {:.4} auc {:.4} add {} threshold {}",
        c.precision,
        c.recall,
        c.f1,
        c.auc_roc,
        delay.add.map_or("n/a".to_string(), |a| format!("{a:.3}")),
        tau
    );
    println!("report: {}", files.report.display());
    Ok(())
}

fn score(args: &ModelArgs) -> Result<()> {
    let ckpt_path = model_file(&args.model);
    let out = args.out.clone().unwrap_or_else(|| {
        ckpt_path.parent().unwrap_or(Path::new(".")).join("scores.csv")
    });
    prepare_file(&out, args.force)?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let series = load_series(&input_file(&args.data, "test.csv"))?;
    let scored = ckpt.score_series(&series)?;
    let threshold = ckpt.threshold.unwrap_or(f64::NEG_INFINITY);
    write_score_dump(&out, &scored.scores, &scored.labels, threshold, scored.window)?;
    println!("wrote {} window scores to {}", scored.scores.len(), out.display());
    Ok(())
}

fn plot(args: &PlotArgs) -> Result<()> {
    let text = fs::read_to_string(&args.data)?;
    let history: Vec<EpochRecord> = match serde_json::from_str::<serde_json::Value>(&text)? {
        serde_json::Value::Array(_) => serde_json::from_str(&text)?,
        _ => read_report(&args.data)?.curves,
    };
    if history.is_empty() {
        return Err(Error::InvalidConfig(format!("{} holds no epoch records", args.data.display())));
    }
    let out = args.out.clone().unwrap_or_else(|| {
        args.data.parent().unwrap_or(Path::new(".")).join("figures")
    });
    prepare_dir(&out, args.force)?;
    let (separation, metrics, delay) = plot_history(&history);
    fs::write(out.join("separation.svg"), separation)?;
    fs::write(out.join("metrics.svg"), metrics)?;
    if let Some(svg) = delay {
        fs::write(out.join("delay.svg"), svg)?;
    }
    println!("figures in {}", out.display());
    Ok(())
}
