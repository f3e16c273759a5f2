use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use ice_mlp::data::{self, ColumnFilter, CsvOptions};
use ice_mlp::harness::{self, DataSource, ExperimentConfig, TableFormat};
use ice_mlp::ice::{self, IceOptions, PenaltyScale};
use ice_mlp::optimizer::{LineSearchConfig, OptimizerConfig};
use ice_mlp::{oracle, Dataset, Error, Estimator, Network, NetworkTopology, Result, SyntheticSpec};

#[derive(Parser)]
#[command(name = "ice-mlp", version, about = "MLP classifiers fit by cross-entropy MLE or ICE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model and write it as JSON.
    Train(TrainArgs),
    /// Mean cross-entropy of a saved model on a dataset.
    Evaluate(EvaluateArgs),
    /// Run the MLE/ICE comparison grid and print the loss tables.
    Experiment(ExperimentArgs),
    /// Run the oracle checks.
    Validate(ValidateArgs),
    /// Write a synthetic teacher dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct SyntheticArgs {
    #[arg(long, default_value_t = 11)]
    feature_width: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Teacher layer sizes; defaults to [feature-width, 5, classes].
    #[arg(long)]
    teacher: Option<NetworkTopology>,
    #[arg(long, default_value_t = 2024)]
    teacher_seed: u64,
    /// Multiplier on teacher scores before the softmax; larger is less noisy.
    #[arg(long, default_value_t = 1.0)]
    noise_temperature: f64,
    /// Multiply feature j by 10^(j mod 3).
    #[arg(long)]
    scale_mixture: bool,
}

impl SyntheticArgs {
    fn spec(&self) -> Result<SyntheticSpec> {
        let teacher = match &self.teacher {
            Some(t) => t.clone(),
            None => NetworkTopology::new(vec![self.feature_width, 5, self.classes])?,
        };
        let spec = SyntheticSpec {
            feature_width: self.feature_width,
            class_count: self.classes,
            teacher_topology: teacher,
            teacher_seed: self.teacher_seed,
            noise_temperature: self.noise_temperature,
            scale_mixture: self.scale_mixture,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct DataArgs {
    /// CSV file with a header row. Without it, synthetic data is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    label_column: String,
    /// Comma-separated feature columns; defaults to every non-label column.
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    /// Row filter such as `x3>=0` or `age in [18,90]`. Repeatable.
    #[arg(long = "filter")]
    filters: Vec<String>,
    /// Fail on unparseable values instead of dropping the row.
    #[arg(long)]
    strict: bool,
    /// Number of synthetic samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Seed for synthetic sampling.
    #[arg(long)]
    data_seed: Option<u64>,
    #[command(flatten)]
    synthetic: SyntheticArgs,
}

impl DataArgs {
    fn csv_options(&self) -> Result<CsvOptions> {
        Ok(CsvOptions {
            label_column: self.label_column.clone(),
            feature_columns: self.features.clone(),
            filters: self
                .filters
                .iter()
                .map(|f| f.parse::<ColumnFilter>())
                .collect::<Result<_>>()?,
            strict: self.strict,
        })
    }

    /// Loads the CSV or generates synthetic data with the given defaults.
    fn load(&self, default_samples: usize, default_seed: u64) -> Result<(Dataset, serde_json::Value)> {
        match &self.data {
            Some(path) => {
                let (dataset, report) = data::load_csv(path, &self.csv_options()?)?;
                let desc = json!({
                    "csv": path,
                    "options": self.csv_options()?,
                    "load_report": report,
                });
                Ok((dataset, desc))
            }
            None => {
                let spec = self.synthetic.spec()?;
                let n = self.samples.unwrap_or(default_samples);
                let seed = self.data_seed.unwrap_or(default_seed);
                let dataset = data::generate_synthetic(&spec, n, seed)?;
                Ok((dataset, json!({ "synthetic": spec, "samples": n, "data_seed": seed })))
            }
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct OptimizerArgs {
    /// L-BFGS history length.
    #[arg(long, default_value_t = 10)]
    memory: usize,
    #[arg(long, default_value_t = 200)]
    max_iterations: usize,
    /// Stop when max|g| <= tol * max(1, max|θ|).
    #[arg(long, default_value_t = 1e-6)]
    gradient_tolerance: f64,
    /// Stop when a step improves the loss by less than tol * max(1, |loss|).
    #[arg(long, default_value_t = 1e-9)]
    loss_tolerance: f64,
    #[arg(long, default_value_t = 1e-4)]
    c1: f64,
    #[arg(long, default_value_t = 0.9)]
    c2: f64,
    /// Objective evaluations per line search.
    #[arg(long, default_value_t = 20)]
    max_trials: usize,
    /// Fail the line search instead of taking a sufficient-decrease step.
    #[arg(long)]
    strict_wolfe: bool,
    /// ICE penalty normalization: tic or per-sample.
    #[arg(long, default_value = "tic")]
    penalty_scale: PenaltyScale,
}

impl OptimizerArgs {
    fn config(&self) -> OptimizerConfig {
        OptimizerConfig {
            memory: self.memory,
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            relative_loss_tolerance: self.loss_tolerance,
            line_search: LineSearchConfig {
                c1: self.c1,
                c2: self.c2,
                max_trials: self.max_trials,
                sufficient_decrease_fallback: !self.strict_wolfe,
            },
        }
    }

    fn ice(&self) -> IceOptions {
        IceOptions {
            penalty_scale: self.penalty_scale,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "11,5,3")]
    topology: NetworkTopology,
    #[arg(long, default_value = "ice")]
    estimator: Estimator,
    /// Seed for the Glorot initialization.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    /// Where to write the fitted model.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Student topology such as `11,5,3`. Repeatable, or separate with `;`.
    #[arg(long = "topologies", value_delimiter = ';')]
    topologies: Vec<NetworkTopology>,
    #[arg(long, value_delimiter = ',', default_value = "ice,mle")]
    estimators: Vec<Estimator>,
    /// Fit sizes; defaults to 128, 256, ..., 8192.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of the data in the fit partition.
    #[arg(long, default_value_t = 0.25)]
    p_fit: f64,
    /// Draw a fresh fit/test split per repetition.
    #[arg(long)]
    redraw_split: bool,
    #[arg(long, default_value = "text")]
    format: TableFormat,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ValidateArgs {
    /// Print the checks as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    synthetic: SyntheticArgs,
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn with_path<'a>(path: &'a std::path::Path, action: &str) -> impl FnOnce(Error) -> Error + 'a {
    let action = action.to_string();
    move |e| Error::InvalidArgument(format!("{action} {}: {e}", path.display()))
}

fn announce(what: &str, value: &serde_json::Value) {
    eprintln!("{what}: {value}");
}

fn write_output(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| with_path(path, "cannot write")(e.into()))?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let (dataset, source) = args.data.load(4096, 0)?;
    let config = args.optimizer.config();
    let ice = args.optimizer.ice();
    announce(
        "config",
        &json!({
            "command": "train",
            "data": source,
            "topology": args.topology,
            "estimator": args.estimator,
            "init_seed": args.init_seed,
            "optimizer": config,
            "ice": ice,
            "out": args.out,
        }),
    );
    let initial = Network::init(args.topology, args.init_seed);
    let outcome = harness::fit(&initial, &dataset, args.estimator, &config, ice)?;
    outcome.network.save(&args.out).map_err(with_path(&args.out, "cannot write model"))?;
    let fit_ce = ice::mean_cross_entropy(&outcome.network, &dataset)?;
    let summary = json!({
        "estimator": args.estimator,
        "final_loss": outcome.result.loss,
        "fit_cross_entropy": fit_ce,
        "iterations": outcome.result.iterations,
        "evaluations": outcome.evaluations,
        "termination": outcome.result.termination,
        "sufficient_decrease_steps": outcome.result.sufficient_decrease_steps,
        "samples": dataset.len(),
    });
    write_output(None, &format!("{}\n", serde_json::to_string_pretty(&summary)?))
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let network = Network::load(&args.model).map_err(with_path(&args.model, "cannot read model"))?;
    let (dataset, source) = args.data.load(4096, 0)?;
    announce("config", &json!({ "command": "evaluate", "model": args.model, "data": source }));
    let ce = ice::mean_cross_entropy(&network, &dataset)?;
    let summary = json!({ "samples": dataset.len(), "cross_entropy": ce });
    write_output(None, &format!("{}\n", serde_json::to_string_pretty(&summary)?))
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let defaults = ExperimentConfig::default();
    let config = ExperimentConfig {
        topologies: if args.topologies.is_empty() {
            defaults.topologies
        } else {
            args.topologies
        },
        fit_sizes: if args.sizes.is_empty() {
            defaults.fit_sizes
        } else {
            args.sizes
        },
        repetitions: args.reps,
        p_fit: args.p_fit,
        base_seed: args.seed,
        estimators: args.estimators,
        optimizer: args.optimizer.config(),
        ice: args.optimizer.ice(),
        redraw_split: args.redraw_split,
    };
    config.validate()?;
    let (source, description) = match &args.data.data {
        Some(_) => {
            let (dataset, desc) = args.data.load(0, 0)?;
            (DataSource::Dataset(dataset), desc)
        }
        None => {
            let spec = args.data.synthetic.spec()?;
            let seed = args.data.data_seed.unwrap_or(args.seed);
            let source = match args.data.samples {
                Some(samples) => DataSource::Synthetic {
                    spec: spec.clone(),
                    samples,
                    seed,
                },
                None => DataSource::synthetic_for(spec.clone(), config.largest_fit_size(), config.p_fit, seed),
            };
            let samples = match &source {
                DataSource::Synthetic { samples, .. } => *samples,
                DataSource::Dataset(d) => d.len(),
            };
            (source, json!({ "synthetic": spec, "samples": samples, "data_seed": seed }))
        }
    };
    announce(
        "config",
        &json!({
            "command": "experiment",
            "experiment": config,
            "data": description,
            "split_seed": if config.redraw_split { None } else { Some(harness::shared_split_seed(config.base_seed)) },
            "format": args.format,
        }),
    );
    let rows = harness::run_experiment(&config, &source)?;
    let table = harness::emit_table(&rows, args.format)?;
    write_output(args.out.as_ref(), &table)
}

fn validate(args: ValidateArgs) -> Result<bool> {
    announce("config", &json!({ "command": "validate" }));
    let checks = oracle::run_validation_suite()?;
    let all = checks.iter().all(|c| c.passed);
    let text = if args.json {
        format!("{}\n", serde_json::to_string_pretty(&checks)?)
    } else {
        let mut text = String::new();
        for c in &checks {
            text.push_str(&format!(
                "{}  {:<55} measured {:.3e}  tolerance {:.0e}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance
            ));
        }
        text
    };
    write_output(None, &text)?;
    Ok(all)
}

fn generate(args: GenerateArgs) -> Result<()> {
    let spec = args.synthetic.spec()?;
    announce(
        "config",
        &json!({ "command": "generate", "synthetic": spec, "samples": args.samples, "data_seed": args.data_seed }),
    );
    let dataset = data::generate_synthetic(&spec, args.samples, args.data_seed)?;
    match &args.out {
        Some(path) => data::write_csv_file(&dataset, path).map_err(with_path(path, "cannot write")),
        None => data::write_csv(&dataset, std::io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::Experiment(a) => experiment(a).map(|_| true),
        Command::Validate(a) => validate(a),
        Command::Generate(a) => generate(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some oracle checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
