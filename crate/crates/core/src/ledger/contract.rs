use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use thiserror::Error;

use super::event::{EventLog, EventPayload, TransferReason};
use super::{Address, CommitmentIndex, ContractPhase, LedgerError};
use crate::envelope::{digest, encode_bits, Digest, Nonce, Secret};

/// Parameters fixed at contract creation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractTerms {
    pub config_uri: String,
    pub config_digest: Digest,
    pub required_responses: u32,
    pub fee: u64,
    pub n1: Nonce,
    pub n2: Nonce,
    pub s1: Secret,
    pub h_s2: Digest,
    /// Logical timestamp after which the contract may be aborted.
    pub deadline: u64,
    pub authority: Address,
    pub system_operator: Address,
}

/// How the system operator splits the released fee.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayoutPolicy {
    /// Share of the fee paid out to operators, in basis points.
    pub operator_share_bps: u32,
}

impl Default for PayoutPolicy {
    fn default() -> Self {
        Self {
            operator_share_bps: 8_000,
        }
    }
}

impl PayoutPolicy {
    /// Returns `(per_operator, retained)`. Operators share the pool equally,
    /// rounded down; the remainder stays with the system operator.
    pub fn split(&self, fee: u64, operators: u64) -> (u64, u64) {
        if operators == 0 {
            return (0, fee);
        }
        let pool = (u128::from(fee) * u128::from(self.operator_share_bps.min(10_000)) / 10_000) as u64;
        let each = pool / operators;
        (each, fee - each * operators)
    }
}

/// Net balances per address; the escrow is the contract's own account.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Balances {
    accounts: BTreeMap<Address, i128>,
    escrow: u64,
}

impl Balances {
    pub fn of(&self, addr: &Address) -> i128 {
        self.accounts.get(addr).copied().unwrap_or(0)
    }

    pub fn escrow(&self) -> u64 {
        self.escrow
    }

    /// Sum of all account balances plus escrow; always zero since money only
    /// moves between accounts.
    pub fn net(&self) -> i128 {
        self.accounts.values().sum::<i128>() + i128::from(self.escrow)
    }

    fn lock_in_escrow(&mut self, from: Address, amount: u64) {
        *self.accounts.entry(from).or_default() -= i128::from(amount);
        self.escrow += amount;
    }

    fn release_from_escrow(&mut self, to: Address, amount: u64) {
        self.escrow -= amount;
        *self.accounts.entry(to).or_default() += i128::from(amount);
    }

    fn transfer(&mut self, from: Address, to: Address, amount: u64) {
        *self.accounts.entry(from).or_default() -= i128::from(amount);
        *self.accounts.entry(to).or_default() += i128::from(amount);
    }
}

/// A ledger mutation, as submitted to the single-writer command stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Commit {
        address: Address,
        commitment: Digest,
    },
    FinalizeFilter {
        caller: Address,
        filter: Vec<bool>,
        filter_digest: Digest,
    },
    Deposit {
        from: Address,
        amount: u64,
    },
    Reveal {
        s2: Secret,
    },
    Payout {
        caller: Address,
        distribution: BTreeMap<Address, u64>,
    },
    Abort {
        now: u64,
    },
}

#[derive(Debug, Clone)]
pub struct SurveyContract {
    contract_id: Digest,
    terms: ContractTerms,
    phase: ContractPhase,
    commitments: CommitmentIndex,
    filter: Option<Vec<bool>>,
    filter_digest: Option<Digest>,
    deposit_amount: u64,
    revealed_s2: Option<Secret>,
    balances: Balances,
    log: EventLog,
}

impl SurveyContract {
    pub fn create(terms: ContractTerms) -> Result<Self, LedgerError> {
        if terms.required_responses == 0 {
            return Err(LedgerError::InvalidArgument("required responses must be at least 1"));
        }
        if terms.authority == terms.system_operator {
            return Err(LedgerError::InvalidArgument("authority and system operator must differ"));
        }
        let payload = EventPayload::Created(terms.clone());
        let contract_id = digest(&payload.encode());
        let mut log = EventLog::new();
        log.append(payload);
        Ok(Self {
            contract_id,
            terms,
            phase: ContractPhase::Collecting,
            commitments: CommitmentIndex::new(),
            filter: None,
            filter_digest: None,
            deposit_amount: 0,
            revealed_s2: None,
            balances: Balances::default(),
            log,
        })
    }

    pub fn contract_id(&self) -> Digest {
        self.contract_id
    }
    pub fn terms(&self) -> &ContractTerms {
        &self.terms
    }
    pub fn phase(&self) -> ContractPhase {
        self.phase
    }
    pub fn commitments(&self) -> &CommitmentIndex {
        &self.commitments
    }
    pub fn filter(&self) -> Option<&[bool]> {
        self.filter.as_deref()
    }
    pub fn filter_digest(&self) -> Option<Digest> {
        self.filter_digest
    }
    pub fn deposit_amount(&self) -> u64 {
        self.deposit_amount
    }
    pub fn revealed_s2(&self) -> Option<Secret> {
        self.revealed_s2
    }
    pub fn balances(&self) -> &Balances {
        &self.balances
    }
    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn is_eligible(&self, addr: &Address) -> bool {
        match (&self.filter, self.commitments.position(addr)) {
            (Some(f), Some(i)) => f[i],
            _ => false,
        }
    }

    /// Applies one command; on success returns the sequence numbers of the
    /// events it appended. A rejected command leaves the contract untouched.
    pub fn apply(&mut self, cmd: Command) -> Result<Range<u64>, LedgerError> {
        let start = self.log.len() as u64;
        match cmd {
            Command::Commit {
                address,
                commitment,
            } => self.commit_response(address, commitment)?,
            Command::FinalizeFilter {
                caller,
                filter,
                filter_digest,
            } => self.finalize_filter(caller, filter, filter_digest)?,
            Command::Deposit { from, amount } => self.deposit(from, amount)?,
            Command::Reveal { s2 } => self.reveal_secret(s2)?,
            Command::Payout {
                caller,
                distribution,
            } => self.payout(caller, &distribution)?,
            Command::Abort { now } => self.abort(now)?,
        }
        Ok(start..self.log.len() as u64)
    }

    fn require(&self, expected: ContractPhase) -> Result<(), LedgerError> {
        if self.phase != expected {
            return Err(LedgerError::WrongPhase {
                expected,
                actual: self.phase,
            });
        }
        Ok(())
    }

    pub fn commit_response(&mut self, address: Address, commitment: Digest) -> Result<(), LedgerError> {
        self.require(ContractPhase::Collecting)?;
        if !self.commitments.insert(address, commitment) {
            return Err(LedgerError::DuplicateCommitment(address));
        }
        self.log.append(EventPayload::Committed {
            address,
            commitment,
        });
        Ok(())
    }

    /// Freezes the commitment index. `filter` is indexed by sorted address
    /// position and must carry exactly `required_responses` set bits;
    /// `filter_digest` must be the digest of its packed encoding.
    pub fn finalize_filter(
        &mut self,
        caller: Address,
        filter: Vec<bool>,
        filter_digest: Digest,
    ) -> Result<(), LedgerError> {
        self.require(ContractPhase::Collecting)?;
        if caller != self.terms.system_operator {
            return Err(LedgerError::Unauthorized(caller));
        }
        if filter.len() != self.commitments.len() {
            return Err(LedgerError::BadFilter("length differs from commitment count"));
        }
        let ones = filter.iter().filter(|b| **b).count();
        if ones != self.terms.required_responses as usize {
            return Err(LedgerError::BadFilter("set bits differ from required responses"));
        }
        if digest(&encode_bits(&filter)) != filter_digest {
            return Err(LedgerError::BadFilter("digest does not match filter"));
        }
        self.log.append(EventPayload::FilterRecorded {
            filter_digest,
            eligible: ones as u32,
        });
        self.filter = Some(filter);
        self.filter_digest = Some(filter_digest);
        self.phase = ContractPhase::Filtered;
        Ok(())
    }

    pub fn deposit(&mut self, from: Address, amount: u64) -> Result<(), LedgerError> {
        self.require(ContractPhase::Filtered)?;
        if from != self.terms.authority {
            return Err(LedgerError::Unauthorized(from));
        }
        if amount != self.terms.fee {
            return Err(LedgerError::WrongAmount {
                expected: self.terms.fee,
                found: amount,
            });
        }
        self.balances.lock_in_escrow(from, amount);
        self.deposit_amount = amount;
        self.log.append(EventPayload::Deposited { from, amount });
        self.phase = ContractPhase::Deposited;
        Ok(())
    }

    /// Records `s2` and releases the deposit to the system operator in one
    /// step, or does neither.
    pub fn reveal_secret(&mut self, s2: Secret) -> Result<(), LedgerError> {
        self.require(ContractPhase::Deposited)?;
        if digest(&s2.0) != self.terms.h_s2 {
            return Err(LedgerError::SecretMismatch);
        }
        let amount = self.deposit_amount;
        let to = self.terms.system_operator;
        self.log.append(EventPayload::Revealed { s2 });
        self.balances.release_from_escrow(to, amount);
        self.log.append(EventPayload::Transferred {
            to,
            amount,
            reason: TransferReason::Settlement,
        });
        self.revealed_s2 = Some(s2);
        self.phase = ContractPhase::Revealed;
        Ok(())
    }

    pub fn payout(&mut self, caller: Address, distribution: &BTreeMap<Address, u64>) -> Result<(), LedgerError> {
        self.require(ContractPhase::Revealed)?;
        if caller != self.terms.system_operator {
            return Err(LedgerError::Unauthorized(caller));
        }
        let fee = self.deposit_amount;
        let eligible: BTreeSet<&Address> = match &self.filter {
            Some(f) => self.commitments.addresses().zip(f).filter(|(_, b)| **b).map(|(a, _)| a).collect(),
            None => BTreeSet::new(),
        };
        let mut total = 0u64;
        for (addr, amt) in distribution {
            if !eligible.contains(addr) {
                return Err(LedgerError::IneligiblePayee(*addr));
            }
            total = total.saturating_add(*amt);
        }
        if total > fee {
            return Err(LedgerError::OverDistribution { total, fee });
        }
        for (addr, amt) in distribution {
            self.balances.transfer(caller, *addr, *amt);
        }
        self.log.append(EventPayload::PaidOut {
            payouts: distribution.iter().map(|(a, v)| (*a, *v)).collect(),
            retained: fee - total,
        });
        self.phase = ContractPhase::Settled;
        Ok(())
    }

    pub fn abort(&mut self, now: u64) -> Result<(), LedgerError> {
        if matches!(
            self.phase,
            ContractPhase::Revealed | ContractPhase::Settled | ContractPhase::Aborted
        ) {
            return Err(LedgerError::CannotAbort(self.phase));
        }
        if now <= self.terms.deadline {
            return Err(LedgerError::DeadlineNotReached {
                deadline: self.terms.deadline,
                now,
            });
        }
        let from_phase = self.phase;
        if from_phase == ContractPhase::Deposited {
            let amount = self.deposit_amount;
            let to = self.terms.authority;
            self.balances.release_from_escrow(to, amount);
            self.log.append(EventPayload::Transferred {
                to,
                amount,
                reason: TransferReason::Refund,
            });
        }
        self.log.append(EventPayload::Aborted { at: now, from_phase });
        self.phase = ContractPhase::Aborted;
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("event {index}: {rule}")]
pub struct AuditViolation {
    pub index: usize,
    pub rule: &'static str,
}

/// Checks the ordering and conservation rules any valid contract log obeys:
/// a single leading creation, no commitment after the filter, no reveal or
/// settlement before a deposit, and money conserved through escrow.
pub fn audit_log(log: &EventLog) -> Result<(), AuditViolation> {
    let mut filtered = false;
    let mut deposited = 0u64;
    let mut deposit_seen = false;
    let mut revealed = false;
    let mut settled = 0u64;
    let mut refunded = 0u64;
    let mut payees = BTreeSet::new();
    for (index, ev) in log.events().iter().enumerate() {
        let bad = |rule| Err(AuditViolation { index, rule });
        match (&ev.payload, index) {
            (EventPayload::Created(_), 0) => {}
            (EventPayload::Created(_), _) => return bad("creation not first"),
            (_, 0) => return bad("log does not start with creation"),
            (EventPayload::Committed { .. }, _) if filtered => return bad("commitment after filter"),
            (EventPayload::Committed { .. }, _) => {}
            (EventPayload::FilterRecorded { .. }, _) => filtered = true,
            (EventPayload::Deposited { amount, .. }, _) => {
                if !filtered {
                    return bad("deposit before filter");
                }
                deposited += amount;
                deposit_seen = true;
            }
            (EventPayload::Revealed { .. }, _) => {
                if !deposit_seen {
                    return bad("reveal before deposit");
                }
                revealed = true;
            }
            (EventPayload::Transferred { amount, reason, .. }, _) => {
                match reason {
                    TransferReason::Settlement => {
                        if !revealed {
                            return bad("settlement before reveal");
                        }
                        settled += amount;
                    }
                    TransferReason::Refund => refunded += amount,
                }
                if settled + refunded > deposited {
                    return bad("more released than deposited");
                }
            }
            (EventPayload::PaidOut { payouts, retained }, _) => {
                let sum: u64 = payouts.iter().map(|(_, v)| *v).sum();
                if sum + retained != settled {
                    return bad("payouts plus retained differ from settled amount");
                }
                for (a, _) in payouts {
                    if !payees.insert(*a) {
                        return bad("duplicate payee");
                    }
                }
            }
            (EventPayload::Aborted { .. }, _) => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::EventKind;

    const AUTH: u8 = 0xa0;
    const SYSOP: u8 = 0xb0;

    fn s2() -> Secret {
        Secret([0x22; 32])
    }

    fn terms(nr: u32, fee: u64) -> ContractTerms {
        ContractTerms {
            config_uri: "mem://survey".into(),
            config_digest: digest(b"config"),
            required_responses: nr,
            fee,
            n1: Nonce([1; 16]),
            n2: Nonce([2; 16]),
            s1: Secret([0x11; 32]),
            h_s2: digest(&s2().0),
            deadline: 100,
            authority: Address::with_prefix(AUTH),
            system_operator: Address::with_prefix(SYSOP),
        }
    }

    fn sysop() -> Address {
        Address::with_prefix(SYSOP)
    }
    fn auth() -> Address {
        Address::with_prefix(AUTH)
    }

    fn filter_cmd(bits: Vec<bool>) -> (Vec<bool>, Digest) {
        let d = digest(&encode_bits(&bits));
        (bits, d)
    }

    /// Contract with commits from 0x01 and 0x02, both eligible, filtered.
    fn filtered(fee: u64) -> SurveyContract {
        let mut c = SurveyContract::create(terms(2, fee)).unwrap();
        c.commit_response(Address::with_prefix(1), Digest([1; 32])).unwrap();
        c.commit_response(Address::with_prefix(2), Digest([2; 32])).unwrap();
        let (f, d) = filter_cmd(vec![true, true]);
        c.finalize_filter(sysop(), f, d).unwrap();
        c
    }

    #[test]
    fn creation() {
        assert!(matches!(
            SurveyContract::create(terms(0, 10)),
            Err(LedgerError::InvalidArgument(_))
        ));
        let c = SurveyContract::create(terms(1, 10)).unwrap();
        assert_eq!(c.log().len(), 1);
        assert_eq!(c.phase(), ContractPhase::Collecting);

        let mut other = terms(1, 10);
        other.n1 = Nonce([9; 16]);
        let d = SurveyContract::create(other).unwrap();
        assert_ne!(c.contract_id(), d.contract_id());
    }

    #[test]
    fn single_commit_per_address() {
        let mut c = SurveyContract::create(terms(1, 10)).unwrap();
        let a = Address::with_prefix(5);
        c.commit_response(a, Digest([1; 32])).unwrap();
        assert_eq!(
            c.commit_response(a, Digest([2; 32])),
            Err(LedgerError::DuplicateCommitment(a))
        );
        assert_eq!(c.commitments().get(&a), Some(&Digest([1; 32])));
        assert_eq!(c.log().len(), 2);
    }

    #[test]
    fn filter_rules() {
        let mut c = SurveyContract::create(terms(1, 10)).unwrap();
        c.commit_response(Address::with_prefix(1), Digest::ZERO).unwrap();
        c.commit_response(Address::with_prefix(2), Digest::ZERO).unwrap();

        let (f, d) = filter_cmd(vec![true, false]);
        assert_eq!(
            c.finalize_filter(auth(), f.clone(), d),
            Err(LedgerError::Unauthorized(auth()))
        );
        let (f2, d2) = filter_cmd(vec![true, true]);
        assert!(matches!(c.finalize_filter(sysop(), f2, d2), Err(LedgerError::BadFilter(_))));
        assert!(matches!(
            c.finalize_filter(sysop(), f.clone(), Digest::ZERO),
            Err(LedgerError::BadFilter(_))
        ));
        c.finalize_filter(sysop(), f.clone(), d).unwrap();
        assert_eq!(c.phase(), ContractPhase::Filtered);
        assert_eq!(c.filter_digest(), Some(d));
        assert!(matches!(
            c.finalize_filter(sysop(), f, d),
            Err(LedgerError::WrongPhase { .. })
        ));
        assert!(matches!(
            c.commit_response(Address::with_prefix(3), Digest::ZERO),
            Err(LedgerError::WrongPhase {
                expected: ContractPhase::Collecting,
                actual: ContractPhase::Filtered
            })
        ));
    }

    #[test]
    fn deposit_rules() {
        let mut early = SurveyContract::create(terms(2, 100)).unwrap();
        assert!(matches!(early.deposit(auth(), 100), Err(LedgerError::WrongPhase { .. })));

        let mut c = filtered(100);
        assert_eq!(
            c.deposit(auth(), 99),
            Err(LedgerError::WrongAmount {
                expected: 100,
                found: 99
            })
        );
        assert_eq!(c.deposit(sysop(), 100), Err(LedgerError::Unauthorized(sysop())));
        c.deposit(auth(), 100).unwrap();
        assert_eq!(c.phase(), ContractPhase::Deposited);
        assert_eq!(c.balances().escrow(), 100);
        assert!(matches!(c.deposit(auth(), 100), Err(LedgerError::WrongPhase { .. })));
    }

    #[test]
    fn reveal_is_atomic() {
        let mut c = filtered(100);
        assert!(matches!(c.reveal_secret(s2()), Err(LedgerError::WrongPhase { .. })));
        c.deposit(auth(), 100).unwrap();

        let mut wrong = s2();
        wrong.0[0] ^= 1;
        let before = c.log().len();
        assert_eq!(c.reveal_secret(wrong), Err(LedgerError::SecretMismatch));
        assert_eq!(c.log().len(), before);
        assert_eq!(c.phase(), ContractPhase::Deposited);
        assert_eq!(c.balances().escrow(), 100);
        assert_eq!(c.revealed_s2(), None);

        c.reveal_secret(s2()).unwrap();
        assert_eq!(c.phase(), ContractPhase::Revealed);
        assert_eq!(c.balances().escrow(), 0);
        assert_eq!(c.balances().of(&sysop()), 100);
        let kinds: Vec<_> = c.log().events()[before..].iter().map(|e| e.kind()).collect();
        assert_eq!(kinds, vec![EventKind::Revealed, EventKind::Transferred]);
        match &c.log().events().last().unwrap().payload {
            EventPayload::Transferred { amount, to, .. } => {
                assert_eq!(*amount, 100);
                assert_eq!(*to, sysop());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_rule() {
        let p = PayoutPolicy::default();
        assert_eq!(p.split(100, 2), (40, 20));
        assert_eq!(p.split(100, 3), (26, 22));
        assert_eq!(p.split(100, 0), (0, 100));
    }

    #[test]
    fn payout_rules() {
        let mut c = filtered(100);
        c.deposit(auth(), 100).unwrap();
        c.reveal_secret(s2()).unwrap();

        let (each, retained) = PayoutPolicy::default().split(100, 2);
        let mut over = BTreeMap::new();
        over.insert(Address::with_prefix(1), 60);
        over.insert(Address::with_prefix(2), 60);
        assert_eq!(
            c.payout(sysop(), &over),
            Err(LedgerError::OverDistribution { total: 120, fee: 100 })
        );
        let mut stranger = BTreeMap::new();
        stranger.insert(Address::with_prefix(9), 1);
        assert_eq!(
            c.payout(sysop(), &stranger),
            Err(LedgerError::IneligiblePayee(Address::with_prefix(9)))
        );

        let dist: BTreeMap<_, _> = [(Address::with_prefix(1), each), (Address::with_prefix(2), each)].into();
        c.payout(sysop(), &dist).unwrap();
        assert_eq!(c.phase(), ContractPhase::Settled);
        assert_eq!(c.balances().of(&sysop()), retained as i128);
        assert_eq!(c.balances().of(&Address::with_prefix(1)), 40);
        assert_eq!(c.balances().of(&auth()), -100);
        assert_eq!(c.balances().net(), 0);
        audit_log(c.log()).unwrap();
    }

    #[test]
    fn abort_paths() {
        let mut c = SurveyContract::create(terms(2, 100)).unwrap();
        assert_eq!(
            c.abort(100),
            Err(LedgerError::DeadlineNotReached { deadline: 100, now: 100 })
        );
        c.abort(101).unwrap();
        assert_eq!(c.phase(), ContractPhase::Aborted);
        assert!(!c.log().events().iter().any(|e| e.kind() == EventKind::Transferred));

        let mut d = filtered(100);
        d.deposit(auth(), 100).unwrap();
        d.abort(101).unwrap();
        assert_eq!(d.balances().of(&auth()), 0);
        assert_eq!(d.balances().escrow(), 0);
        let n = d.log().len();
        assert!(matches!(
            &d.log().events()[n - 2].payload,
            EventPayload::Transferred { reason: TransferReason::Refund, amount: 100, .. }
        ));
        audit_log(d.log()).unwrap();

        let mut s = filtered(100);
        s.deposit(auth(), 100).unwrap();
        s.reveal_secret(s2()).unwrap();
        s.payout(sysop(), &BTreeMap::new()).unwrap();
        assert_eq!(s.abort(1000), Err(LedgerError::CannotAbort(ContractPhase::Settled)));
    }

    #[test]
    fn apply_reports_appended_sequence_numbers() {
        let mut c = filtered(100);
        let r = c.apply(Command::Deposit { from: auth(), amount: 100 }).unwrap();
        assert_eq!(r, 4..5);
        let r = c.apply(Command::Reveal { s2: s2() }).unwrap();
        assert_eq!(r, 5..7);
    }

    #[test]
    fn audit_flags_out_of_order_logs() {
        let mut log = EventLog::new();
        log.append(EventPayload::Created(terms(1, 10)));
        log.append(EventPayload::FilterRecorded { filter_digest: Digest::ZERO, eligible: 1 });
        log.append(EventPayload::Committed { address: Address::with_prefix(1), commitment: Digest::ZERO });
        assert_eq!(audit_log(&log).unwrap_err().index, 2);

        let mut log = EventLog::new();
        log.append(EventPayload::Created(terms(1, 10)));
        log.append(EventPayload::FilterRecorded { filter_digest: Digest::ZERO, eligible: 1 });
        log.append(EventPayload::Transferred {
            to: sysop(),
            amount: 10,
            reason: TransferReason::Settlement,
        });
        assert_eq!(audit_log(&log).unwrap_err().index, 2);
    }
}
