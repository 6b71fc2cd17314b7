//! `dhn`: train, evaluate, predict with and generate data for the deep
//! hurdle network.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, model
//! file or I/O error, 3 numerical divergence.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dhn_core::autodiff::{OptimizerConfig, OptimizerKind};
use dhn_core::data::{
    generate_synthetic, load_csv, load_feature_csv, DataKind, Dataset, GenConfig, GroundTruth,
    Schema, SplitIndex, TruthParams,
};
use dhn_core::metrics::{alpha_sweep, evaluate, evaluate_rows, sweep_csv};
use dhn_core::model::{train_with_progress, Ablation, DhnConfig, DhnModel, TrainError};
use dhn_core::DhnError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Maps an error onto the documented exit codes.
pub fn exit_code(err: &DhnError) -> i32 {
    match err {
        DhnError::Config(_) | DhnError::Usage(_) => EXIT_USAGE,
        DhnError::Data(_) | DhnError::DataAt { .. } | DhnError::Load(_) | DhnError::Io { .. } => {
            EXIT_DATA
        }
        DhnError::Numerical(_) | DhnError::Divergence(_) => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dhn",
    version,
    about = "Deep hurdle network for zero-inflated multi-target regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a CSV dataset.
    Train(TrainArgs),
    /// Score a model on a dataset (test split by default).
    Eval(EvalArgs),
    /// Write positive probabilities and expected abundances for feature rows.
    Predict(PredictArgs),
    /// Sample a synthetic dataset from the hurdle process.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// TOML file naming the feature and target columns and the label kind.
    #[arg(long)]
    schema: PathBuf,
    /// Expected label kind; must agree with the schema when given.
    #[arg(long)]
    kind: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output model file [default: <data stem>.model.json].
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Monte-Carlo samples per row during training.
    #[arg(long, default_value_t = 64)]
    k_train: usize,
    /// Monte-Carlo samples per row for validation and test NLL.
    #[arg(long, default_value_t = 1024)]
    k_eval: usize,
    /// Weight of the L1 penalty between the two covariance matrices
    /// [default: 1, or 0 for --ablation no-cov-penalty].
    #[arg(long)]
    cov_penalty: Option<f64>,
    /// Comma-separated encoder hidden widths.
    #[arg(long, default_value = "512,256", value_delimiter = ',')]
    encoder_dims: Vec<usize>,
    /// Width of the shared latent features.
    #[arg(long, default_value_t = 256)]
    latent_dim: usize,
    /// Hidden width of each head.
    #[arg(long, default_value_t = 256)]
    head_hidden_dim: usize,
    /// adam or sgd.
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Learning rate in epoch e is lr / (1 + decay * e).
    #[arg(long, default_value_t = 0.0)]
    lr_decay: f64,
    /// Seed for splitting, initialisation and sampling.
    #[arg(long, env = "DHN_SEED", default_value_t = 0)]
    seed: u64,
    /// full, no-encoder, mlnd-only or no-cov-penalty.
    #[arg(long, default_value = "full")]
    ablation: String,
    /// Worker threads for loss evaluation; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Weight of the zero part in zRMSE.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Comma-separated alpha values for a zRMSE sweep.
    #[arg(long, value_delimiter = ',')]
    alpha_sweep: Option<Vec<f64>>,
    /// Rows to score: the seeded test split or every row.
    #[arg(long, default_value = "test")]
    rows: String,
    /// Report file [default: <model stem>.eval.txt].
    #[arg(long)]
    report: Option<PathBuf>,
    /// Sweep data file [default: <model stem>.sweep.csv].
    #[arg(long)]
    sweep_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV holding at least the model's feature columns.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 5000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 8)]
    l: usize,
    #[arg(long, default_value = "continuous")]
    kind: String,
    #[arg(long, env = "DHN_SEED", default_value_t = 0)]
    seed: u64,
    /// Loading of every target on the shared latent factor.
    #[arg(long, default_value_t = 0.7)]
    strength: f64,
    /// Scale of the probit mean map.
    #[arg(long, default_value_t = 5.0)]
    probit_signal: f64,
    /// Scale of the abundance mean map.
    #[arg(long, default_value_t = 1.5)]
    abundance_signal: f64,
    /// Output prefix; writes <out>.csv, <out>.schema and <out>.truth.json.
    #[arg(long, default_value = "synth")]
    out: PathBuf,
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("dhn: {e}");
            exit_code(&e)
        }
    }
}

/// `dir/name.model.json` -> `dir/name.model` + suffix.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let s = path.to_string_lossy();
    let base = s.strip_suffix(".json").unwrap_or(&s);
    PathBuf::from(format!("{base}{suffix}"))
}

fn write_file(path: &Path, text: &str) -> Result<(), DhnError> {
    std::fs::write(path, text).map_err(|e| DhnError::io(path, e))
}

fn load_data(args: &DataArgs) -> Result<Dataset, DhnError> {
    let schema = Schema::load(&args.schema)?;
    if let Some(kind) = &args.kind {
        let kind: DataKind = kind.parse()?;
        if kind != schema.kind {
            return Err(DhnError::Usage(format!(
                "--kind {kind} disagrees with schema {} which declares {}",
                args.schema.display(),
                schema.kind
            )));
        }
    }
    let data = load_csv(&args.data, &schema)?;
    eprintln!(
        "loaded {}: {} rows, {} features, {} targets, {:.1}% nonzero labels",
        args.data.display(),
        data.n_rows(),
        data.n_features(),
        data.n_targets(),
        100.0 * data.nonzero_fraction()
    );
    Ok(data)
}

/// Everything needed to repeat a training run.
#[derive(Debug, Serialize)]
struct TrainRecord<'a> {
    data: String,
    schema: String,
    model: String,
    split_seed: u64,
    config: &'a DhnConfig,
}

fn cmd_train(a: TrainArgs) -> Result<(), DhnError> {
    let data = load_data(&a.data)?;
    let ablation: Ablation = a.ablation.parse()?;
    let kind = match a.optimizer.as_str() {
        "adam" => OptimizerKind::Adam,
        "sgd" => OptimizerKind::Sgd,
        other => {
            return Err(DhnError::Usage(format!(
                "unknown optimizer '{other}', expected adam or sgd"
            )))
        }
    };
    let mut config = DhnConfig::new(data.n_features(), data.n_targets(), data.kind());
    config.encoder_dims = a.encoder_dims.clone();
    config = config.with_ablation(ablation);
    if let Some(w) = a.cov_penalty {
        config.cov_penalty = w;
    }
    config.latent_dim = a.latent_dim;
    config.head_hidden_dim = a.head_hidden_dim;
    config.k_train = a.k_train;
    config.k_eval = a.k_eval;
    config.epochs = a.epochs;
    config.batch_size = a.batch_size;
    config.optimizer = OptimizerConfig {
        kind,
        learning_rate: a.lr,
        decay: a.lr_decay,
        ..OptimizerConfig::default()
    };
    config.seed = a.seed;
    config.threads = a.threads;
    config.validate()?;

    let model_path = a
        .model
        .clone()
        .unwrap_or_else(|| a.data.data.with_extension("model.json"));
    let record = TrainRecord {
        data: a.data.data.display().to_string(),
        schema: a.data.schema.display().to_string(),
        model: model_path.display().to_string(),
        split_seed: a.seed,
        config: &config,
    };
    let record = serde_json::to_string_pretty(&record).expect("record serialises");
    eprintln!("effective config:\n{record}");
    write_file(&sibling(&model_path, ".config.json"), &(record + "\n"))?;

    let split = SplitIndex::new(data.n_rows(), a.seed)?;
    let outcome = train_with_progress(&data, &split, &config, |e| {
        eprintln!(
            "epoch {:>3}  train_nll {:.6}  val_nll {:.6}  penalty {:.6}  {:.1}s",
            e.epoch, e.train_nll, e.val_nll, e.penalty, e.seconds
        );
    });
    let report_path = sibling(&model_path, ".train.txt");
    let timing_path = sibling(&model_path, ".timing.txt");
    match outcome {
        Ok((model, report)) => {
            model.save(&model_path)?;
            write_file(&report_path, &report.to_text())?;
            write_file(&timing_path, &report.timing_text())?;
            eprintln!(
                "kept epoch {} (val_nll {}); wrote {}",
                report.best_epoch,
                report.epochs[report.best_epoch - 1].val_nll,
                model_path.display()
            );
            Ok(())
        }
        Err(TrainError::Aborted(abort)) => {
            let checkpoint = sibling(&model_path, ".checkpoint.json");
            abort.checkpoint.save(&checkpoint)?;
            write_file(&report_path, &abort.report.to_text())?;
            eprintln!("last finite parameters saved to {}", checkpoint.display());
            Err(abort.error)
        }
        Err(TrainError::Setup(e)) => Err(e),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), DhnError> {
    let model = DhnModel::load(&a.model)?;
    let data = load_data(&a.data)?;
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(DhnError::Usage(format!(
            "--alpha must lie in [0, 1], got {}",
            a.alpha
        )));
    }
    let rows: Vec<usize> = match a.rows.as_str() {
        "test" => SplitIndex::new(data.n_rows(), model.config().seed)?.test,
        "all" => (0..data.n_rows()).collect(),
        other => {
            return Err(DhnError::Usage(format!(
                "--rows must be 'test' or 'all', got '{other}'"
            )))
        }
    };
    let report = if a.rows == "test" {
        let split = SplitIndex::new(data.n_rows(), model.config().seed)?;
        evaluate(&model, &data, &split, a.alpha)?
    } else {
        evaluate_rows(&model, &data, &rows, a.alpha)?
    };
    let header = format!(
        "model={}\ndata={}\nschema={}\nrows_from={}\n",
        a.model.display(),
        a.data.data.display(),
        a.data.schema.display(),
        a.rows
    );
    eprintln!("{header}seconds={}", report.seconds);
    let text = header + &report.to_text();
    print!("{text}");
    write_file(
        &a.report
            .clone()
            .unwrap_or_else(|| sibling(&a.model, ".eval.txt")),
        &text,
    )?;
    if let Some(alphas) = &a.alpha_sweep {
        let subset = data.select_rows(&rows);
        let predicted = model.predict(subset.features())?.expected;
        let points = alpha_sweep(subset.labels(), &predicted, alphas)?;
        let table = sweep_csv(&points);
        println!("\n{table}");
        write_file(
            &a.sweep_out
                .clone()
                .unwrap_or_else(|| sibling(&a.model, ".sweep.csv")),
            &table,
        )?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), DhnError> {
    let model = DhnModel::load(&a.model)?;
    let names: Vec<String> = (1..=model.config().n_features)
        .map(|i| format!("x{i}"))
        .collect();
    let names = feature_names_from_config(&a.model).unwrap_or(names);
    let x = load_feature_csv(&a.input, &names)?;
    let pred = model.predict(&x)?;
    let l = model.config().n_targets;
    let mut out = String::new();
    let header: Vec<String> = (1..=l)
        .map(|j| format!("p_{j}"))
        .chain((1..=l).map(|j| format!("yhat_{j}")))
        .collect();
    out += &header.join(",");
    out.push('\n');
    for (p, y) in pred
        .probabilities
        .rows()
        .into_iter()
        .zip(pred.expected.rows())
    {
        let fields: Vec<String> = p.iter().chain(y.iter()).map(|v| v.to_string()).collect();
        out += &fields.join(",");
        out.push('\n');
    }
    let mut f = std::fs::File::create(&a.output).map_err(|e| DhnError::io(&a.output, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| DhnError::io(&a.output, e))?;
    eprintln!("wrote {} rows to {}", x.nrows(), a.output.display());
    Ok(())
}

/// Feature column names recorded next to the model at training time.
fn feature_names_from_config(model: &Path) -> Option<Vec<String>> {
    let record = std::fs::read_to_string(sibling(model, ".config.json")).ok()?;
    let value: serde_json::Value = serde_json::from_str(&record).ok()?;
    let schema = Schema::load(value.get("schema")?.as_str()?).ok()?;
    Some(schema.features)
}

#[derive(Debug, Serialize)]
struct SynthRecord<'a> {
    n: usize,
    m: usize,
    l: usize,
    kind: DataKind,
    seed: u64,
    params: &'a TruthParams,
    truth: &'a GroundTruth,
}

fn cmd_synth(a: SynthArgs) -> Result<(), DhnError> {
    if a.n == 0 || a.m == 0 || a.l == 0 {
        return Err(DhnError::Usage(format!(
            "--n, --m and --l must be positive, got {}, {}, {}",
            a.n, a.m, a.l
        )));
    }
    let kind: DataKind = a.kind.parse()?;
    let params = TruthParams {
        strength: a.strength,
        probit_signal: a.probit_signal,
        abundance_signal: a.abundance_signal,
        ..TruthParams::default()
    };
    params.validate()?;
    let truth = GroundTruth::random(a.m, a.l, &params, a.seed);
    let (data, truth) = generate_synthetic(&GenConfig {
        n: a.n,
        kind,
        seed: a.seed,
        truth,
    })?;
    let prefix = a.out.to_string_lossy().into_owned();
    let csv = PathBuf::from(format!("{prefix}.csv"));
    let schema = PathBuf::from(format!("{prefix}.schema"));
    let truth_path = PathBuf::from(format!("{prefix}.truth.json"));
    data.write_csv(&csv)?;
    data.schema().save(&schema)?;
    let record = SynthRecord {
        n: a.n,
        m: a.m,
        l: a.l,
        kind,
        seed: a.seed,
        params: &params,
        truth: &truth,
    };
    write_file(
        &truth_path,
        &(serde_json::to_string_pretty(&record).expect("record serialises") + "\n"),
    )?;
    eprintln!(
        "wrote {}, {} and {} ({} rows, {:.1}% nonzero labels)",
        csv.display(),
        schema.display(),
        truth_path.display(),
        data.n_rows(),
        100.0 * data.nonzero_fraction()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_paths() {
        assert_eq!(
            sibling(Path::new("a/m.model.json"), ".train.txt"),
            PathBuf::from("a/m.model.train.txt")
        );
        assert_eq!(
            sibling(Path::new("m.bin"), ".eval.txt"),
            PathBuf::from("m.bin.eval.txt")
        );
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&DhnError::Usage("x".into())), 1);
        assert_eq!(exit_code(&DhnError::Load("x".into())), 2);
        assert_eq!(exit_code(&DhnError::Divergence("x".into())), 3);
    }

    #[test]
    fn parse_errors_are_usage_errors() {
        assert_eq!(run(["dhn", "synth", "--n", "abc"]), EXIT_USAGE);
        assert_eq!(run(["dhn", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["dhn", "--help"]), EXIT_OK);
    }
}
