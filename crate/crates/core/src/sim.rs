//! Accuracy experiments: many simulated operators answer a numbered query,
//! their true answers drawn from a discretized normal distribution, and the
//! estimated distribution is compared with the true one.
//!
//! Per-operator randomness comes from [`SeedTree`] substreams keyed by the
//! operator's index, so the LDP-only path and the full protocol consume the
//! same bits and produce identical estimates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::ldp::{
    accumulate_counts, encode_one_hot, estimate_frequencies, estimate_std_error, randomize_response,
    LdpError, PrivacyParams, QuerySpec, ResponseVector,
};
use crate::ledger::{Address, EventLog};
use crate::protocol::{
    build_survey_config, FilterCriteria, OperatorProfile, ProtocolError, Scenario, SurveyFailure,
    SurveyRun, Trace,
};
use crate::seed::{streams, SeedTree};

/// The populations of the reference experiment.
pub const REFERENCE_POPULATIONS: [usize; 4] = [500, 1_000, 5_000, 10_000];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid experiment: {0}")]
    InvalidConfig(&'static str),
    #[error("length mismatch: {actual} actual bins, {estimated} estimated")]
    LengthMismatch { actual: usize, estimated: usize },
    #[error(transparent)]
    Ldp(#[from] LdpError),
    #[error("trial {trial}: {failure}")]
    Protocol {
        trial: usize,
        failure: Box<SurveyFailure>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    LdpOnly,
    FullProtocol,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub population: usize,
    pub n_choices: usize,
    pub mean: f64,
    pub sd: f64,
    pub privacy: PrivacyParams,
    pub seed: u64,
    pub trials: usize,
    pub mode: Mode,
    /// Protocol runs only: required responses, defaulting to the population.
    pub required_responses: Option<u32>,
    /// Protocol runs only.
    pub fee: u64,
}

impl ExperimentConfig {
    pub fn new(population: usize, seed: u64) -> Self {
        Self {
            population,
            n_choices: 20,
            mean: 10.0,
            sd: 2.0,
            privacy: PrivacyParams::default(),
            seed,
            trials: 1,
            mode: Mode::LdpOnly,
            required_responses: None,
            fee: 1_000,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.population == 0 {
            return Err(SimError::InvalidConfig("population must be at least 1"));
        }
        if self.n_choices < 2 {
            return Err(SimError::InvalidConfig("need at least 2 choices"));
        }
        if !(self.sd > 0.0 && self.sd.is_finite()) || !self.mean.is_finite() {
            return Err(SimError::InvalidConfig("normal parameters must be finite with sd > 0"));
        }
        if self.trials == 0 {
            return Err(SimError::InvalidConfig("need at least 1 trial"));
        }
        Ok(())
    }

    /// The seed tree for trial `t`. Trial slots share seeds across
    /// populations.
    pub fn trial_seeds(&self, trial: usize) -> SeedTree {
        SeedTree::new(self.seed).child(streams::TRIAL, trial as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMetrics {
    pub l1: f64,
    /// `l1 / (2N)`: total-variation distance between the two histograms when
    /// scaled to proportions.
    pub l1_normalized: f64,
    pub l2: f64,
    pub max_bin_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub population: usize,
    pub trial: usize,
    pub seed: u64,
    pub trial_seed: u64,
    pub actual_counts: Vec<u64>,
    pub estimated_raw: Vec<f64>,
    pub estimated_clamped: Vec<f64>,
    pub metrics: ErrorMetrics,
}

impl ExperimentResult {
    /// How many bins have `|actual - raw|` within `k` standard errors of the
    /// estimator at that bin.
    pub fn bins_within_std_errors(&self, k: f64, params: &PrivacyParams) -> usize {
        let n = self.population as f64;
        self.actual_counts
            .iter()
            .zip(&self.estimated_raw)
            .filter(|(&a, &r)| (a as f64 - r).abs() <= k * estimate_std_error(a as f64, n, params))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub config: ExperimentConfig,
    pub results: Vec<ExperimentResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub population: usize,
    pub trials: usize,
    pub mean_l1_normalized: f64,
    pub sd_l1_normalized: f64,
    pub seed: u64,
}

impl ExperimentRun {
    pub fn summary(&self) -> SummaryRow {
        let xs: Vec<f64> = self.results.iter().map(|r| r.metrics.l1_normalized).collect();
        let k = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / k;
        let sd = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        SummaryRow {
            population: self.config.population,
            trials: self.results.len(),
            mean_l1_normalized: mean,
            sd_l1_normalized: sd,
            seed: self.config.seed,
        }
    }
}

/// Full-protocol run: the statistical results plus each trial's ledger and
/// protocol trace.
#[derive(Debug)]
pub struct ProtocolExperimentRun {
    pub run: ExperimentRun,
    pub logs: Vec<EventLog>,
    pub traces: Vec<Trace>,
    pub payouts: Vec<BTreeMap<Address, u64>>,
}

/// One draw from `normal(mean, sd)`, rounded to the nearest integer, clamped
/// to `[1, n]` and shifted to a 0-based index.
pub fn sample_true_choice<R: Rng + ?Sized>(mean: f64, sd: f64, n: usize, rng: &mut R) -> usize {
    let normal = Normal::new(mean, sd).expect("sd validated positive and finite");
    let x = normal.sample(rng).round().clamp(1.0, n as f64);
    x as usize - 1
}

/// True choices for operators `0..population`, operator `i` drawing from its
/// own substream.
pub fn sample_true_choices(population: usize, mean: f64, sd: f64, n: usize, seeds: &SeedTree) -> Vec<usize> {
    (0..population)
        .map(|i| sample_true_choice(mean, sd, n, &mut seeds.stream(streams::TRUE_CHOICE, i as u64)))
        .collect()
}

pub fn compute_error_metrics(actual: &[u64], estimated_raw: &[f64]) -> Result<ErrorMetrics, SimError> {
    if actual.len() != estimated_raw.len() {
        return Err(SimError::LengthMismatch {
            actual: actual.len(),
            estimated: estimated_raw.len(),
        });
    }
    let mut l1 = 0.0;
    let mut sq = 0.0;
    let mut max_bin_abs: f64 = 0.0;
    for (&a, &e) in actual.iter().zip(estimated_raw) {
        let d = (a as f64 - e).abs();
        l1 += d;
        sq += d * d;
        max_bin_abs = max_bin_abs.max(d);
    }
    let total: u64 = actual.iter().sum();
    let l1_normalized = match (total, l1 == 0.0) {
        (_, true) => 0.0,
        (0, false) => f64::INFINITY,
        (t, false) => l1 / (2.0 * t as f64),
    };
    Ok(ErrorMetrics {
        l1,
        l1_normalized,
        l2: sq.sqrt(),
        max_bin_abs,
    })
}

fn histogram(choices: &[usize], n: usize) -> Vec<u64> {
    let mut h = vec![0u64; n];
    for &c in choices {
        h[c] += 1;
    }
    h
}

fn assemble(
    config: &ExperimentConfig,
    trial: usize,
    seeds: &SeedTree,
    actual_counts: Vec<u64>,
    raw: Vec<f64>,
    clamped: Vec<f64>,
) -> Result<ExperimentResult, SimError> {
    let metrics = compute_error_metrics(&actual_counts, &raw)?;
    Ok(ExperimentResult {
        population: config.population,
        trial,
        seed: config.seed,
        trial_seed: seeds.master(),
        actual_counts,
        estimated_raw: raw,
        estimated_clamped: clamped,
        metrics,
    })
}

pub fn run_ldp_trial(config: &ExperimentConfig, trial: usize) -> Result<ExperimentResult, SimError> {
    config.validate()?;
    let seeds = config.trial_seeds(trial);
    let n = config.n_choices;
    let choices = sample_true_choices(config.population, config.mean, config.sd, n, &seeds);
    let reports = choices
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let truth = encode_one_hot(c, n)?;
            let mut rng = seeds.stream(streams::RANDOMIZE, i as u64);
            Ok(randomize_response(&truth, &config.privacy, &mut rng))
        })
        .collect::<Result<Vec<ResponseVector>, LdpError>>()?;
    let estimate = estimate_frequencies(&accumulate_counts(&reports)?, &config.privacy);
    assemble(config, trial, &seeds, histogram(&choices, n), estimate.raw, estimate.clamped)
}

/// Runs all trials (in parallel) and returns them in trial order.
pub fn run_ldp_experiment(config: &ExperimentConfig) -> Result<ExperimentRun, SimError> {
    config.validate()?;
    let results = (0..config.trials)
        .into_par_iter()
        .map(|t| run_ldp_trial(config, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExperimentRun {
        config: config.clone(),
        results,
    })
}

const REGIONS: [&str; 3] = ["NSW", "VIC", "QLD"];

/// Simulated operators `0..population` with their true choices, a random
/// address each and a region attribute.
pub fn simulated_operators(population: usize, choices: &[usize], seeds: &SeedTree) -> Vec<OperatorProfile> {
    (0..population)
        .map(|i| {
            let mut rng = seeds.stream(streams::PROFILE, i as u64);
            let region = REGIONS[rng.random_range(0..REGIONS.len())];
            let addr = Address::random(&mut seeds.stream(streams::ADDRESS, i as u64));
            OperatorProfile::new(
                format!("op-{i}"),
                vec![addr],
                [("region".to_owned(), region.to_owned())].into(),
                choices[i],
            )
            .expect("one address is always valid")
        })
        .collect()
}

pub fn run_full_protocol_trial(
    config: &ExperimentConfig,
    trial: usize,
) -> Result<(ExperimentResult, SurveyRun), SimError> {
    config.validate()?;
    let seeds = config.trial_seeds(trial);
    let n = config.n_choices;
    let choices = sample_true_choices(config.population, config.mean, config.sd, n, &seeds);
    let nr = config.required_responses.unwrap_or(config.population as u32);
    let protocol_err = |e: ProtocolError| SimError::Protocol {
        trial,
        failure: Box::new(SurveyFailure {
            error: e,
            trace: Trace::default(),
            contract: None,
        }),
    };
    let built = build_survey_config(
        QuerySpec::numbered(n)?,
        FilterCriteria::accept_all(),
        nr,
        config.fee,
        config.privacy,
    )
    .map_err(protocol_err)?;
    let scenario = Scenario::new(built, simulated_operators(config.population, &choices, &seeds), seeds.master());
    let run = crate::protocol::run_survey(&scenario).map_err(|failure| SimError::Protocol { trial, failure })?;
    let result = assemble(
        config,
        trial,
        &seeds,
        histogram(&choices, n),
        run.outcome.estimate.raw.clone(),
        run.outcome.estimate.clamped.clone(),
    )?;
    Ok((result, run))
}

pub fn run_full_protocol_experiment(config: &ExperimentConfig) -> Result<ProtocolExperimentRun, SimError> {
    config.validate()?;
    let trials = (0..config.trials)
        .into_par_iter()
        .map(|t| run_full_protocol_trial(config, t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut results = Vec::with_capacity(trials.len());
    let mut logs = Vec::with_capacity(trials.len());
    let mut traces = Vec::with_capacity(trials.len());
    let mut payouts = Vec::with_capacity(trials.len());
    for (r, run) in trials {
        results.push(r);
        logs.push(run.contract.log().clone());
        traces.push(run.trace);
        payouts.push(run.payouts);
    }
    Ok(ProtocolExperimentRun {
        run: ExperimentRun {
            config: config.clone(),
            results,
        },
        logs,
        traces,
        payouts,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRun, SimError> {
    match config.mode {
        Mode::LdpOnly => run_ldp_experiment(config),
        Mode::FullProtocol => run_full_protocol_experiment(config).map(|r| r.run),
    }
}

pub const TRIAL_CSV_HEADER: &str = "choice_index,actual_count,estimated_raw,estimated_clamped";
pub const SUMMARY_CSV_HEADER: &str = "N,trials,mean_l1_normalized,sd_l1_normalized,seed";

pub fn trial_csv(result: &ExperimentResult) -> String {
    let mut s = String::from(TRIAL_CSV_HEADER);
    s.push('\n');
    for (j, ((a, r), c)) in result
        .actual_counts
        .iter()
        .zip(&result.estimated_raw)
        .zip(&result.estimated_clamped)
        .enumerate()
    {
        let _ = writeln!(s, "{j},{a},{r},{c}");
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.population, r.trials, r.mean_l1_normalized, r.sd_l1_normalized, r.seed
        );
    }
    s
}

/// Fixed-width table for terminal output.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:>8} {:>7} {:>20} {:>20} {:>20}\n",
        "N", "trials", "mean_l1_normalized", "sd_l1_normalized", "seed"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>8} {:>7} {:>20.6} {:>20.6} {:>20}",
            r.population, r.trials, r.mean_l1_normalized, r.sd_l1_normalized, r.seed
        );
    }
    s
}

fn write_file(path: PathBuf, contents: &str) -> Result<PathBuf, SimError> {
    fs::write(&path, contents).map_err(|source| SimError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

pub fn trial_file_name(population: usize, trial: usize) -> String {
    format!("n{population}_trial{trial:03}.csv")
}

/// Writes one CSV per trial into `dir` and returns the paths written.
pub fn export_results(run: &ExperimentRun, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir).map_err(|source| SimError::Io {
        path: dir.to_owned(),
        source,
    })?;
    run.results
        .iter()
        .map(|r| write_file(dir.join(trial_file_name(r.population, r.trial)), &trial_csv(r)))
        .collect()
}

pub fn export_summary(rows: &[SummaryRow], path: &Path) -> Result<PathBuf, SimError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| SimError::Io {
            path: parent.to_owned(),
            source,
        })?;
    }
    write_file(path.to_owned(), &summary_csv(rows))
}
