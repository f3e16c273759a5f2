//! Overfitting experiment: for every topology and fitting-set size, draw
//! repeated fitting subsamples, fit each estimator from a shared
//! initialization, and score mean cross-entropy on the fitting subsample and
//! on the whole test partition.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::ice::{self, Estimator, IceOptions, ObjectiveValue};
use crate::network::{Network, NetworkTopology};
use crate::optimizer::{self, OptimizerConfig, OptimizerResult, Termination};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub topologies: Vec<NetworkTopology>,
    pub fit_sizes: Vec<usize>,
    pub repetitions: usize,
    pub p_fit: f64,
    pub base_seed: u64,
    pub estimators: Vec<Estimator>,
    pub optimizer: OptimizerConfig,
    pub ice: IceOptions,
    /// Draw a fresh fit/test split for every repetition instead of one split
    /// shared by the whole run.
    pub redraw_split: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            topologies: crate::oracle::reference_topologies(),
            fit_sizes: doubling_ladder(128, 8192),
            repetitions: 10,
            p_fit: 0.25,
            base_seed: 0,
            estimators: vec![Estimator::Ice, Estimator::Mle],
            optimizer: OptimizerConfig::default(),
            ice: IceOptions::default(),
            redraw_split: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::InvalidArgument("repetitions must be at least 1".into()));
        }
        if self.topologies.is_empty() || self.estimators.is_empty() || self.fit_sizes.is_empty() {
            return Err(Error::InvalidArgument("need at least one topology, estimator and fit size".into()));
        }
        if self.fit_sizes.windows(2).any(|w| w[0] >= w[1]) || self.fit_sizes[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "fit sizes must be positive and strictly ascending, got {:?}",
                self.fit_sizes
            )));
        }
        if !(self.p_fit > 0.0 && self.p_fit < 1.0) {
            return Err(Error::InvalidArgument(format!("p_fit must be in (0, 1), got {}", self.p_fit)));
        }
        self.optimizer.validate()
    }

    pub fn largest_fit_size(&self) -> usize {
        *self.fit_sizes.last().expect("validated")
    }
}

/// `start, 2·start, …` up to and including `end`.
pub fn doubling_ladder(start: usize, end: usize) -> Vec<usize> {
    std::iter::successors(Some(start.max(1)), |&s| s.checked_mul(2))
        .take_while(|&s| s <= end)
        .collect()
}

/// Where the fit and test partitions come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Dataset(Dataset),
    Synthetic {
        spec: SyntheticSpec,
        samples: usize,
        seed: u64,
    },
}

impl DataSource {
    /// Synthetic source with enough samples that the fit partition covers
    /// `largest_fit` with room to spare.
    pub fn synthetic_for(spec: SyntheticSpec, largest_fit: usize, p_fit: f64, seed: u64) -> Self {
        let samples = ((largest_fit as f64 / p_fit) * 1.1).ceil() as usize + 64;
        DataSource::Synthetic { spec, samples, seed }
    }

    pub fn materialize(&self) -> Result<Dataset> {
        match self {
            DataSource::Dataset(d) => Ok(d.clone()),
            DataSource::Synthetic { spec, samples, seed } => data::generate_synthetic(spec, *samples, *seed),
        }
    }
}

/// Aggregate over the repetitions of one (topology, estimator, size) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub topology: NetworkTopology,
    pub estimator: Estimator,
    pub fit_size: usize,
    pub mean_test_loss: f64,
    pub mean_fit_loss: f64,
    pub std_test_loss: f64,
    pub mean_fit_seconds: f64,
    pub repetitions_completed: usize,
    pub mean_iterations: f64,
    pub objective_evaluations: usize,
    /// ICE evaluations with every `D_k ≥ 0` whose loss fell below the MLE loss.
    pub penalty_violations: usize,
    /// Repetitions whose accepted losses did not decrease strictly.
    pub descent_violations: usize,
    pub line_search_failures: usize,
    /// Accepted steps, summed over repetitions, that met only sufficient decrease.
    pub sufficient_decrease_steps: usize,
}

impl ExperimentRow {
    pub fn overfitting_gap(&self) -> f64 {
        self.mean_test_loss - self.mean_fit_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub topology: NetworkTopology,
    pub estimator: Estimator,
    pub fit_size: usize,
    pub overfitting_gap: f64,
}

pub fn gap_summary(rows: &[ExperimentRow]) -> Vec<GapEntry> {
    rows.iter()
        .map(|r| GapEntry {
            topology: r.topology.clone(),
            estimator: r.estimator,
            fit_size: r.fit_size,
            overfitting_gap: r.overfitting_gap(),
        })
        .collect()
}

/// Seeds of one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RepetitionSeeds {
    pub split: u64,
    pub subsample: u64,
    pub init: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed from a base seed and a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn repetition_seeds(base: u64, topology_index: usize, fit_size: usize, repetition: usize) -> RepetitionSeeds {
    let path = [topology_index as u64, fit_size as u64, repetition as u64];
    let at = |stream: u64| derive_seed(base, &[path[0], path[1], path[2], stream]);
    RepetitionSeeds {
        split: at(0),
        subsample: at(1),
        init: at(2),
    }
}

/// Seed of the fit/test split shared by all repetitions.
pub fn shared_split_seed(base: u64) -> u64 {
    derive_seed(base, &[u64::MAX])
}

/// Result of fitting one estimator once.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub network: Network,
    pub result: OptimizerResult,
    pub evaluations: usize,
    pub penalty_violations: usize,
}

/// Fits `initial` to `data` under `estimator`, counting objective sanity
/// violations along the way.
pub fn fit(
    initial: &Network,
    data: &[crate::network::LabeledSample],
    estimator: Estimator,
    config: &OptimizerConfig,
    ice_options: IceOptions,
) -> Result<FitOutcome> {
    let topology = initial.topology().clone();
    let evaluations = AtomicUsize::new(0);
    let violations = AtomicUsize::new(0);
    let failed = || ObjectiveValue {
        loss: f64::NAN,
        gradient: vec![f64::NAN; topology.parameter_count()],
    };
    let objective = |theta: &[f64]| -> ObjectiveValue {
        evaluations.fetch_add(1, Ordering::Relaxed);
        let Ok(net) = Network::from_parameters(topology.clone(), theta.to_vec()) else {
            return failed();
        };
        match estimator {
            Estimator::Mle => ice::mle_objective(&net, data).unwrap_or_else(|_| failed()),
            Estimator::Ice => match ice::ice_objective(&net, data, ice_options) {
                Ok(eval) => {
                    if eval.curvature_nonnegative() && eval.value.loss < eval.mle_loss {
                        violations.fetch_add(1, Ordering::Relaxed);
                    }
                    eval.value
                }
                Err(_) => failed(),
            },
        }
    };
    let result = optimizer::minimize(objective, initial.parameters(), config)?;
    let network = Network::from_parameters(topology.clone(), result.theta.clone())?;
    Ok(FitOutcome {
        network,
        result,
        evaluations: evaluations.into_inner(),
        penalty_violations: violations.into_inner(),
    })
}

#[derive(Debug, Clone)]
struct RepOutcome {
    fit_loss: f64,
    test_loss: f64,
    seconds: f64,
    iterations: usize,
    evaluations: usize,
    penalty_violations: usize,
    monotone: bool,
    termination: Termination,
    sufficient_decrease_steps: usize,
}

struct Task {
    topology_index: usize,
    fit_size: usize,
    repetition: usize,
}

/// Runs the full grid. Rows are ordered by topology, then estimator, then size.
pub fn run_experiment(config: &ExperimentConfig, source: &DataSource) -> Result<Vec<ExperimentRow>> {
    config.validate()?;
    let full = source.materialize()?;
    for t in &config.topologies {
        if t.input_width() != full.feature_width() || t.class_count() != full.class_count() {
            return Err(Error::InvalidArgument(format!(
                "topology {t} does not fit data with {} features and {} classes",
                full.feature_width(),
                full.class_count()
            )));
        }
    }
    let shared = if config.redraw_split {
        None
    } else {
        let (fit, test) = data::split(&full, config.p_fit, shared_split_seed(config.base_seed))?;
        if fit.len() < config.largest_fit_size() {
            return Err(Error::InvalidArgument(format!(
                "fit partition has {} samples, largest fit size is {}",
                fit.len(),
                config.largest_fit_size()
            )));
        }
        Some((fit, test))
    };

    let tasks: Vec<Task> = (0..config.topologies.len())
        .flat_map(|t| {
            config.fit_sizes.iter().flat_map(move |&s| {
                (0..config.repetitions).map(move |r| Task {
                    topology_index: t,
                    fit_size: s,
                    repetition: r,
                })
            })
        })
        .collect();

    let outcomes: Vec<Vec<(Estimator, Option<RepOutcome>)>> = tasks
        .par_iter()
        .map(|task| run_repetition(config, &full, shared.as_ref(), task))
        .collect::<Result<_>>()?;

    let mut cells: BTreeMap<(usize, Estimator, usize), Vec<Option<RepOutcome>>> = BTreeMap::new();
    for (task, outs) in tasks.iter().zip(outcomes) {
        for (estimator, out) in outs {
            cells
                .entry((task.topology_index, estimator, task.fit_size))
                .or_default()
                .push(out);
        }
    }

    Ok(cells
        .into_iter()
        .map(|((t, estimator, fit_size), outs)| aggregate(config.topologies[t].clone(), estimator, fit_size, &outs))
        .collect())
}

fn run_repetition(
    config: &ExperimentConfig,
    full: &Dataset,
    shared: Option<&(Dataset, Dataset)>,
    task: &Task,
) -> Result<Vec<(Estimator, Option<RepOutcome>)>> {
    let seeds = repetition_seeds(config.base_seed, task.topology_index, task.fit_size, task.repetition);
    let owned;
    let (fit_pool, test) = match shared {
        Some((f, t)) => (f, t),
        None => {
            owned = data::split(full, config.p_fit, seeds.split)?;
            if owned.0.len() < task.fit_size {
                return Err(Error::InvalidArgument(format!(
                    "fit partition has {} samples, fit size is {}",
                    owned.0.len(),
                    task.fit_size
                )));
            }
            (&owned.0, &owned.1)
        }
    };
    let fit_set = data::subsample(fit_pool, task.fit_size, seeds.subsample)?;
    let topology = config.topologies[task.topology_index].clone();
    let initial = Network::init(topology, seeds.init);

    let mut results = Vec::with_capacity(config.estimators.len());
    for &estimator in &config.estimators {
        let started = Instant::now();
        let outcome = fit(&initial, &fit_set, estimator, &config.optimizer, config.ice).and_then(|f| {
            let seconds = started.elapsed().as_secs_f64();
            let fit_loss = ice::mean_cross_entropy(&f.network, &fit_set)?;
            let test_loss = ice::mean_cross_entropy(&f.network, test)?;
            Ok(RepOutcome {
                fit_loss,
                test_loss,
                seconds,
                iterations: f.result.iterations,
                evaluations: f.evaluations,
                penalty_violations: f.penalty_violations,
                monotone: f.result.is_monotone(),
                termination: f.result.termination,
                sufficient_decrease_steps: f.result.sufficient_decrease_steps,
            })
        });
        results.push((estimator, outcome.ok()));
    }
    Ok(results)
}

fn aggregate(topology: NetworkTopology, estimator: Estimator, fit_size: usize, outs: &[Option<RepOutcome>]) -> ExperimentRow {
    let done: Vec<&RepOutcome> = outs.iter().flatten().collect();
    let k = done.len();
    let mean = |f: &dyn Fn(&RepOutcome) -> f64| {
        if k == 0 {
            f64::NAN
        } else {
            done.iter().map(|o| f(o)).sum::<f64>() / k as f64
        }
    };
    let mean_test = mean(&|o| o.test_loss);
    let std_test = if k > 1 {
        (done.iter().map(|o| (o.test_loss - mean_test).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else {
        0.0
    };
    ExperimentRow {
        topology,
        estimator,
        fit_size,
        mean_test_loss: mean_test,
        mean_fit_loss: mean(&|o| o.fit_loss),
        std_test_loss: std_test,
        mean_fit_seconds: mean(&|o| o.seconds),
        repetitions_completed: k,
        mean_iterations: mean(&|o| o.iterations as f64),
        objective_evaluations: done.iter().map(|o| o.evaluations).sum(),
        penalty_violations: done.iter().map(|o| o.penalty_violations).sum(),
        descent_violations: done.iter().filter(|o| !o.monotone).count(),
        line_search_failures: done
            .iter()
            .filter(|o| o.termination == Termination::LineSearchFailed)
            .count(),
        sufficient_decrease_steps: done.iter().map(|o| o.sufficient_decrease_steps).sum(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableFormat {
    Text,
    Csv,
    Json,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" | "aligned-text" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidArgument(format!("unknown table format {other:?}"))),
        }
    }
}

/// Test and fit losses of both estimators, per topology and fit size.
type Pivot<'a> = BTreeMap<(usize, usize), [Option<&'a ExperimentRow>; 2]>;

fn pivot(rows: &[ExperimentRow]) -> (Vec<&NetworkTopology>, Pivot<'_>) {
    let mut topologies: Vec<&NetworkTopology> = Vec::new();
    let mut table: Pivot<'_> = BTreeMap::new();
    for r in rows {
        let t = match topologies.iter().position(|t| **t == r.topology) {
            Some(i) => i,
            None => {
                topologies.push(&r.topology);
                topologies.len() - 1
            }
        };
        let slot = match r.estimator {
            Estimator::Ice => 0,
            Estimator::Mle => 1,
        };
        table.entry((t, r.fit_size)).or_default()[slot] = Some(r);
    }
    (topologies, table)
}

const HEADERS: [&str; 5] = ["Fitting Set Size", "ICE (test)", "ICE (fit)", "MLE (test)", "MLE (fit)"];

/// Renders rows as an aligned text table (six decimals), a CSV pivot (full
/// precision) or a JSON array of rows (full precision, parses back to `rows`).
pub fn emit_table(rows: &[ExperimentRow], format: TableFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to emit".into()));
    }
    match format {
        TableFormat::Json => Ok(serde_json::to_string_pretty(rows)? + "\n"),
        TableFormat::Text => {
            let (topologies, table) = pivot(rows);
            let mut out = String::new();
            for (ti, topology) in topologies.iter().enumerate() {
                if ti > 0 {
                    out.push('\n');
                }
                writeln!(
                    out,
                    "Cross entropy loss for configuration {topology} ({} parameters)",
                    topology.parameter_count()
                )
                .unwrap();
                writeln!(out, "{:>16}  {:>12}  {:>12}  {:>12}  {:>12}", HEADERS[0], HEADERS[1], HEADERS[2], HEADERS[3], HEADERS[4]).unwrap();
                for ((t, size), cells) in table.range((ti, 0)..(ti + 1, 0)) {
                    debug_assert_eq!(*t, ti);
                    let fmt = |r: Option<&ExperimentRow>, test: bool| match r {
                        Some(r) => format!("{:.6}", if test { r.mean_test_loss } else { r.mean_fit_loss }),
                        None => "-".to_string(),
                    };
                    writeln!(
                        out,
                        "{:>16}  {:>12}  {:>12}  {:>12}  {:>12}",
                        size,
                        fmt(cells[0], true),
                        fmt(cells[0], false),
                        fmt(cells[1], true),
                        fmt(cells[1], false)
                    )
                    .unwrap();
                }
            }
            Ok(out)
        }
        TableFormat::Csv => {
            let (topologies, table) = pivot(rows);
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["Configuration"];
            header.extend(HEADERS);
            w.write_record(&header).map_err(std::io::Error::from)?;
            for ((t, size), cells) in &table {
                let value = |r: Option<&ExperimentRow>, test: bool| match r {
                    Some(r) => (if test { r.mean_test_loss } else { r.mean_fit_loss }).to_string(),
                    None => String::new(),
                };
                w.write_record([
                    topologies[*t].to_string(),
                    size.to_string(),
                    value(cells[0], true),
                    value(cells[0], false),
                    value(cells[1], true),
                    value(cells[1], false),
                ])
                .map_err(std::io::Error::from)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
    }
}

/// Parses the JSON form of [`emit_table`].
pub fn parse_json_rows(text: &str) -> Result<Vec<ExperimentRow>> {
    Ok(serde_json::from_str(text)?)
}
