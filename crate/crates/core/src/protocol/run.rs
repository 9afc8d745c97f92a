use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use rand::seq::SliceRandom;

use super::config::BuiltConfig;
use super::parties::{
    AggregationOutcome, Authority, DroneOperator, FilterVector, OperatorProfile, PskDistribution,
    SystemOperator,
};
use super::{ArtifactStore, ProtocolError};
use crate::ledger::{Address, ContractPhase, PayoutPolicy, SurveyContract};
use crate::seed::{streams, SeedTree};

/// Everything needed to replay one survey deterministically.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: BuiltConfig,
    /// Operators that register interest. Their position here selects their
    /// random substreams.
    pub operators: Vec<OperatorProfile>,
    pub seed: u64,
    pub deadline: u64,
    pub policy: PayoutPolicy,
    /// Shuffle the order in which commitments reach the ledger.
    pub shuffle_arrivals: bool,
    /// How many of the last arrivals only try to commit after the filter is
    /// final.
    pub late_operators: usize,
}

impl Scenario {
    pub fn new(config: BuiltConfig, operators: Vec<OperatorProfile>, seed: u64) -> Self {
        Self {
            config,
            operators,
            seed,
            deadline: 1_000_000,
            policy: PayoutPolicy::default(),
            shuffle_arrivals: true,
            late_operators: 0,
        }
    }

    pub fn authority_address(&self) -> Address {
        Address::random(&mut SeedTree::new(self.seed).stream(streams::ADDRESS, u64::MAX))
    }

    pub fn system_operator_address(&self) -> Address {
        Address::random(&mut SeedTree::new(self.seed).stream(streams::ADDRESS, u64::MAX - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub tick: u64,
    pub party: String,
    pub action: &'static str,
    /// Ledger events appended by this step.
    pub events: Range<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    fn push(&mut self, party: impl Into<String>, action: &'static str, events: Range<u64>, detail: String) {
        let tick = self.entries.len() as u64;
        self.entries.push(TraceEntry {
            tick,
            party: party.into(),
            action,
            events,
            detail,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let ev = if e.events.is_empty() {
                "-".to_owned()
            } else {
                format!("{}..{}", e.events.start, e.events.end)
            };
            writeln!(
                f,
                "{:>6} {:<10} {:<16} events={:<12} {}",
                e.tick, e.party, e.action, ev, e.detail
            )?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct SurveyRun {
    pub contract: SurveyContract,
    pub filter: FilterVector,
    pub outcome: AggregationOutcome,
    pub payouts: BTreeMap<Address, u64>,
    pub psk_distribution: PskDistribution,
    /// Late commits the ledger turned away.
    pub rejected_late_commits: usize,
    pub trace: Trace,
}

#[derive(Debug)]
pub struct SurveyFailure {
    pub error: ProtocolError,
    pub trace: Trace,
    pub contract: Option<SurveyContract>,
}

impl fmt::Display for SurveyFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "survey failed: {}", self.error)
    }
}

impl std::error::Error for SurveyFailure {}

fn events_since(contract: &SurveyContract, start: u64) -> Range<u64> {
    start..contract.log().len() as u64
}

/// Runs the whole lifecycle for `scenario`. On failure the contract is
/// aborted past its deadline where the phase allows, and the trace so far is
/// returned with the error.
pub fn run_survey(scenario: &Scenario) -> Result<SurveyRun, Box<SurveyFailure>> {
    let seeds = SeedTree::new(scenario.seed);
    let mut trace = Trace::default();
    let mut store = ArtifactStore::new();
    let authority_addr = scenario.authority_address();
    let sysop_addr = scenario.system_operator_address();

    let config_uri = store.put_config(&scenario.config.bytes);
    trace.push(
        "authority",
        "publish-config",
        0..0,
        format!("uri={config_uri} digest={}", scenario.config.digest),
    );

    let mut sysop = SystemOperator::new(sysop_addr, scenario.policy);
    let mut contract = match sysop.setup_survey(
        authority_addr,
        &scenario.config,
        &config_uri,
        scenario.deadline,
        &mut seeds.stream(streams::SURVEY_KEYS, 0),
    ) {
        Ok(c) => c,
        Err(error) => {
            return Err(Box::new(SurveyFailure {
                error,
                trace,
                contract: None,
            }))
        }
    };
    trace.push(
        "sysop",
        "create-contract",
        0..1,
        format!("contract={} nr={}", contract.contract_id(), scenario.config.config.required_responses),
    );

    let mut state = RunState {
        scenario,
        seeds,
        store,
        sysop,
        authority: Authority::new(authority_addr, scenario.config.config.clone()),
        operators: Vec::new(),
        trace,
    };
    match state.drive(&mut contract) {
        Ok((filter, outcome, payouts, rejected_late_commits)) => Ok(SurveyRun {
            psk_distribution: state
                .sysop
                .psk_distribution()
                .cloned()
                .expect("set up above"),
            contract,
            filter,
            outcome,
            payouts,
            rejected_late_commits,
            trace: state.trace,
        }),
        Err(error) => {
            let now = scenario.deadline.saturating_add(1);
            let start = contract.log().len() as u64;
            if contract.abort(now).is_ok() {
                state.trace.push(
                    "ledger",
                    "abort",
                    events_since(&contract, start),
                    format!("at={now} reason={error}"),
                );
            }
            Err(Box::new(SurveyFailure {
                error,
                trace: state.trace,
                contract: Some(contract),
            }))
        }
    }
}

struct RunState<'a> {
    scenario: &'a Scenario,
    seeds: SeedTree,
    store: ArtifactStore,
    sysop: SystemOperator,
    authority: Authority,
    operators: Vec<DroneOperator>,
    trace: Trace,
}

type Drive = (FilterVector, AggregationOutcome, BTreeMap<Address, u64>, usize);

impl RunState<'_> {
    fn drive(&mut self, contract: &mut SurveyContract) -> Result<Drive, ProtocolError> {
        for profile in &self.scenario.operators {
            let grant = self.sysop.grant_psk(profile)?;
            let mut op = DroneOperator::new(profile.clone());
            op.receive_grant(grant);
            self.trace.push(
                "sysop",
                "grant-psk",
                0..0,
                format!("operator={} address={}", profile.operator_id, profile.active_address()),
            );
            self.operators.push(op);
        }

        let mut arrival: Vec<usize> = (0..self.operators.len()).collect();
        if self.scenario.shuffle_arrivals {
            arrival.shuffle(&mut self.seeds.stream(streams::SCHEDULE, 0));
        }
        let late = self.scenario.late_operators.min(arrival.len());
        let (on_time, late_arrivals) = arrival.split_at(arrival.len() - late);

        let config_uri = contract.terms().config_uri.clone();
        for &i in on_time {
            self.commit(contract, &config_uri, i)?;
        }

        let start = contract.log().len() as u64;
        let filter = self.sysop.build_and_finalize_filter(
            contract,
            &self.scenario.config.config,
            &mut self.store,
        )?;
        self.trace.push(
            "sysop",
            "finalize-filter",
            events_since(contract, start),
            format!("ones={} of {} filter={}", filter.popcount(), filter.len(), filter.digest()),
        );

        let mut rejected_late = 0;
        for &i in late_arrivals {
            match self.commit(contract, &config_uri, i) {
                Err(ProtocolError::Ledger(e)) => {
                    rejected_late += 1;
                    self.trace.push(
                        self.operators[i].profile.operator_id.clone(),
                        "commit-rejected",
                        0..0,
                        e.to_string(),
                    );
                }
                Err(e) => return Err(e),
                Ok(()) => {}
            }
        }

        let published = self.store.fetch_filter(contract.contract_id())?;
        for &i in on_time {
            let op = &self.operators[i];
            let Some(msg) = op.deliver(&published, contract.commitments())? else {
                continue;
            };
            self.authority
                .verify_delivery(&msg, contract.commitments(), &published)?;
            self.trace.push(
                op.profile.operator_id.clone(),
                "deliver",
                0..0,
                format!("index={} accepted={}", msg.index, self.authority.accepted_count()),
            );
        }

        let start = contract.log().len() as u64;
        self.authority.deposit(contract)?;
        self.trace.push(
            "authority",
            "deposit",
            events_since(contract, start),
            format!("amount={}", contract.deposit_amount()),
        );

        let start = contract.log().len() as u64;
        self.sysop.reveal(contract)?;
        self.trace.push(
            "sysop",
            "reveal-s2",
            events_since(contract, start),
            format!("phase={}", contract.phase()),
        );

        let start = contract.log().len() as u64;
        let payouts = self.sysop.pay_operators(contract)?;
        let paid: u64 = payouts.values().sum();
        self.trace.push(
            "sysop",
            "payout",
            events_since(contract, start),
            format!(
                "operators={} each={} retained={}",
                payouts.len(),
                payouts.values().next().copied().unwrap_or(0),
                contract.deposit_amount() - paid
            ),
        );
        debug_assert_eq!(contract.phase(), ContractPhase::Settled);

        let outcome = self.authority.settle_and_decrypt(contract)?;
        self.trace.push(
            "authority",
            "decrypt",
            0..0,
            format!("responses={}", outcome.decrypted.len()),
        );
        Ok((filter, outcome, payouts, rejected_late))
    }

    fn commit(&mut self, contract: &mut SurveyContract, config_uri: &str, i: usize) -> Result<(), ProtocolError> {
        let bytes = self.store.fetch(config_uri)?.to_vec();
        let start = contract.log().len() as u64;
        let op = &mut self.operators[i];
        let commitment = op.prepare_and_commit(
            &bytes,
            contract,
            &mut self.seeds.stream(streams::RANDOMIZE, i as u64),
            &mut self.seeds.stream(streams::CIPHER_NONCE, i as u64),
        )?;
        self.trace.push(
            op.profile.operator_id.clone(),
            "commit",
            events_since(contract, start),
            format!("address={} commitment={commitment}", op.profile.active_address()),
        );
        Ok(())
    }
}
