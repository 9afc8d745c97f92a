//! `crowdsense`: accuracy simulations, a full survey demo, ledger inspection
//! and offline estimation.
//!
//! Exit codes: 0 success, 1 runtime or protocol failure, 2 usage error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crowdsense::envelope::decode_bits_prefix;
use crowdsense::ldp::{
    accumulate_counts, estimate_frequencies, FrequencyEstimate, PrivacyParams, QuerySpec,
    ResponseVector,
};
use crowdsense::ledger::{verify_event_chain, ChainVerdict, ContractPhase, EventLog};
use crowdsense::protocol::{build_survey_config, run_survey, FilterCriteria, Scenario};
use crowdsense::seed::SeedTree;
use crowdsense::sim::{
    export_results, export_summary, run_experiment, sample_true_choices, simulated_operators,
    summary_table, ExperimentConfig, Mode, REFERENCE_POPULATIONS,
};

const DEMO_CHOICES: usize = 20;
const DEMO_MEAN: f64 = 10.0;
const DEMO_SD: f64 = 2.0;

#[derive(Debug, Parser)]
#[command(name = "crowdsense", version, about = "Private crowdsensing surveys with escrowed payment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare true and estimated answer distributions over many operators.
    Simulate(SimulateArgs),
    /// Run one complete survey and print its trace and ledger.
    Demo(DemoArgs),
    /// Print a ledger export and check its hash chain.
    InspectLedger(InspectArgs),
    /// Estimate frequencies from a file of bit-packed reports.
    Estimate(EstimateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    LdpOnly,
    FullProtocol,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::LdpOnly => Mode::LdpOnly,
            ModeArg::FullProtocol => Mode::FullProtocol,
        }
    }
}

#[derive(Debug, clap::Args)]
struct SimulateArgs {
    /// Comma-separated population sizes.
    #[arg(long, value_delimiter = ',', value_parser = parse_positive_usize,
          default_values_t = REFERENCE_POPULATIONS.to_vec())]
    populations: Vec<usize>,
    #[arg(long, default_value_t = 20, value_parser = parse_choices)]
    choices: usize,
    #[arg(long, default_value_t = 10.0, value_parser = parse_finite)]
    mean: f64,
    #[arg(long, default_value_t = 2.0, value_parser = parse_sd)]
    sd: f64,
    /// Flip probability in [0, 1).
    #[arg(long = "f", value_name = "F", default_value = "0.5", value_parser = parse_privacy)]
    privacy: PrivacyParams,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1, value_parser = parse_positive_usize)]
    trials: usize,
    /// Directory for per-trial CSVs and summary.csv. Nothing is written
    /// without it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::LdpOnly)]
    mode: ModeArg,
}

#[derive(Debug, clap::Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 5)]
    operators: usize,
    /// Required responses.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    nr: u32,
    #[arg(long, default_value_t = 100)]
    fee: u64,
    #[arg(long = "f", value_name = "F", default_value = "0.5", value_parser = parse_privacy)]
    privacy: PrivacyParams,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// TOML file with `[[criteria]]` tables of `attribute` and `allowed`.
    #[arg(long)]
    criteria_file: Option<PathBuf>,
    /// Directory for trace.txt, ledger.bin, ledger.txt and reports.bin.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct InspectArgs {
    #[arg(long)]
    log_file: PathBuf,
}

#[derive(Debug, clap::Args)]
struct EstimateArgs {
    /// Concatenated bit-packed reports.
    #[arg(long)]
    reports_file: PathBuf,
    #[arg(long = "f", value_name = "F", value_parser = parse_privacy)]
    privacy: PrivacyParams,
}

fn parse_privacy(s: &str) -> Result<PrivacyParams, String> {
    let f: f64 = s.parse().map_err(|e| format!("{e}"))?;
    PrivacyParams::new(f).map_err(|e| e.to_string())
}

fn parse_positive_usize(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_choices(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 2 => Ok(v),
        Ok(_) => Err("need at least 2 choices".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_finite(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err("must be finite".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_sd(s: &str) -> Result<f64, String> {
    match parse_finite(s)? {
        v if v > 0.0 => Ok(v),
        _ => Err("must be positive".into()),
    }
}

type CmdResult = Result<(), String>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Demo(a) => demo(a),
        Command::InspectLedger(a) => inspect_ledger(a),
        Command::Estimate(a) => estimate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn write_out(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn simulate(a: SimulateArgs) -> CmdResult {
    let mut rows = Vec::with_capacity(a.populations.len());
    for &population in &a.populations {
        let config = ExperimentConfig {
            n_choices: a.choices,
            mean: a.mean,
            sd: a.sd,
            privacy: a.privacy,
            trials: a.trials,
            mode: a.mode.into(),
            ..ExperimentConfig::new(population, a.seed)
        };
        let run = run_experiment(&config).map_err(|e| e.to_string())?;
        if let Some(dir) = &a.out {
            export_results(&run, dir).map_err(|e| e.to_string())?;
        }
        rows.push(run.summary());
    }
    if let Some(dir) = &a.out {
        export_summary(&rows, &dir.join("summary.csv")).map_err(|e| e.to_string())?;
    }
    print!("{}", summary_table(&rows));
    Ok(())
}

fn demo(a: DemoArgs) -> CmdResult {
    let criteria = match &a.criteria_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            FilterCriteria::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => FilterCriteria::accept_all(),
    };
    let query = QuerySpec::numbered(DEMO_CHOICES).expect("constant query is valid");
    let built = build_survey_config(query, criteria, a.nr, a.fee, a.privacy).map_err(|e| e.to_string())?;

    let seeds = SeedTree::new(a.seed);
    let choices = sample_true_choices(a.operators, DEMO_MEAN, DEMO_SD, DEMO_CHOICES, &seeds);
    let operators = simulated_operators(a.operators, &choices, &seeds);
    let names: BTreeMap<_, _> = operators
        .iter()
        .map(|p| (p.active_address(), p.operator_id.clone()))
        .collect();
    let scenario = Scenario::new(built, operators, a.seed);
    if let Some(dir) = &a.trace_out {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }

    let run = match run_survey(&scenario) {
        Ok(run) => run,
        Err(failure) => {
            print!("{}", failure.trace);
            if let Some(c) = &failure.contract {
                print!("\n{}", c.log().dump());
            }
            if let Some(dir) = &a.trace_out {
                write_out(&dir.join("trace.txt"), failure.trace.to_string())?;
                if let Some(c) = &failure.contract {
                    write_ledger(dir, c.log())?;
                }
            }
            return Err(failure.to_string());
        }
    };

    let log = run.contract.log();
    let mut out = String::new();
    let _ = writeln!(out, "{}", run.trace);
    let _ = writeln!(out, "{}", log.dump());
    for (addr, amount) in &run.payouts {
        let _ = writeln!(out, "payout {} {addr} {amount}", names[addr]);
    }
    let sysop = scenario.system_operator_address();
    let _ = writeln!(out, "retained {sysop} {}", run.contract.balances().of(&sysop));
    let _ = writeln!(out);
    out.push_str(&estimate_csv(&run.outcome.estimate, run.outcome.decrypted.len()));
    let verdict = verify_event_chain(log);
    let _ = writeln!(out, "phase {}", run.contract.phase());
    let _ = writeln!(out, "{}", verdict_line(verdict));
    print!("{out}");

    if let Some(dir) = &a.trace_out {
        write_out(&dir.join("trace.txt"), run.trace.to_string())?;
        write_ledger(dir, log)?;
        let reports: Vec<u8> = run
            .outcome
            .decrypted
            .iter()
            .flat_map(crowdsense::envelope::encode_response)
            .collect();
        write_out(&dir.join("reports.bin"), reports)?;
    }

    if run.contract.phase() != ContractPhase::Settled || !verdict.is_valid() {
        return Err("survey did not settle on a valid chain".into());
    }
    Ok(())
}

fn write_ledger(dir: &Path, log: &EventLog) -> CmdResult {
    write_out(&dir.join("ledger.bin"), log.to_bytes())?;
    write_out(&dir.join("ledger.txt"), log.dump())
}

fn verdict_line(v: ChainVerdict) -> String {
    match v {
        ChainVerdict::Valid => "chain OK".into(),
        ChainVerdict::Broken { index } => format!("chain BROKEN at {index}"),
    }
}

fn inspect_ledger(a: InspectArgs) -> CmdResult {
    let bytes = fs::read(&a.log_file).map_err(|e| format!("{}: {e}", a.log_file.display()))?;
    let log = match EventLog::from_bytes(&bytes) {
        Ok(log) => log,
        Err(e) => {
            println!("chain BROKEN at {}", e.record);
            return Err(e.to_string());
        }
    };
    print!("{}", log.dump());
    let verdict = verify_event_chain(&log);
    println!("{}", verdict_line(verdict));
    match verdict {
        ChainVerdict::Valid => Ok(()),
        ChainVerdict::Broken { index } => Err(format!("hash chain broken at record {index}")),
    }
}

fn estimate_csv(est: &FrequencyEstimate, reports: usize) -> String {
    let mut s = format!("# reports={reports} f={}\n", est.params.flip_probability());
    s.push_str("choice_index,estimated_raw,estimated_clamped\n");
    for (j, (r, c)) in est.raw.iter().zip(&est.clamped).enumerate() {
        let _ = writeln!(s, "{j},{r},{c}");
    }
    s
}

fn estimate(a: EstimateArgs) -> CmdResult {
    let bytes = fs::read(&a.reports_file).map_err(|e| format!("{}: {e}", a.reports_file.display()))?;
    let mut reports = Vec::new();
    let mut rest = bytes.as_slice();
    while !rest.is_empty() {
        let (bits, used) =
            decode_bits_prefix(rest).map_err(|e| format!("corrupt report {}: {e}", reports.len()))?;
        reports.push(ResponseVector::from_bits(bits));
        rest = &rest[used..];
    }
    let counts = accumulate_counts(&reports).map_err(|e| e.to_string())?;
    print!("{}", estimate_csv(&estimate_frequencies(&counts, &a.privacy), reports.len()));
    Ok(())
}
