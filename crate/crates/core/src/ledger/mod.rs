//! In-process stand-in for the survey smart contract.
//!
//! A [`SurveyContract`] holds the on-chain record of one survey and moves
//! through [`ContractPhase`]s as commands arrive. Every mutation is appended to
//! a hash-chained [`EventLog`], and money moves through an integer balance
//! table with the contract as escrow.

mod contract;
mod event;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

pub use contract::{
    audit_log, Balances, Command, ContractTerms, PayoutPolicy, SurveyContract,
};
pub use event::{
    verify_event_chain, ChainVerdict, EventKind, EventLog, EventPayload, LedgerEvent,
    LogDecodeError, TransferReason,
};

use crate::envelope::Digest;

pub const ADDRESS_LEN: usize = 20;

/// Account identifier. Ordering is byte-lexicographic, which fixes the order of
/// the commitment index.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub [u8; ADDRESS_LEN]);

impl Address {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; ADDRESS_LEN];
        rng.fill(&mut b[..]);
        Address(b)
    }

    /// An address whose first byte is `b` and the rest zero. Handy in tests.
    pub fn with_prefix(b: u8) -> Self {
        let mut a = [0u8; ADDRESS_LEN];
        a[0] = b;
        Address(a)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Address {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let body = s.strip_prefix("0x").unwrap_or(s);
        let v = hex::decode(body).map_err(|_| LedgerError::InvalidArgument("address hex"))?;
        let arr: [u8; ADDRESS_LEN] = v
            .try_into()
            .map_err(|_| LedgerError::InvalidArgument("address must be 20 bytes"))?;
        Ok(Address(arr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ContractPhase {
    Configured,
    Collecting,
    Filtered,
    Deposited,
    Revealed,
    Settled,
    Aborted,
}

impl ContractPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, ContractPhase::Settled | ContractPhase::Aborted)
    }

    pub(crate) fn tag(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_tag(t: u8) -> Option<Self> {
        use ContractPhase::*;
        Some(match t {
            0 => Configured,
            1 => Collecting,
            2 => Filtered,
            3 => Deposited,
            4 => Revealed,
            5 => Settled,
            6 => Aborted,
            _ => return None,
        })
    }
}

impl fmt::Display for ContractPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("operation requires phase {expected}, contract is {actual}")]
    WrongPhase {
        expected: ContractPhase,
        actual: ContractPhase,
    },
    #[error("{0} already committed")]
    DuplicateCommitment(Address),
    #[error("{0} is not authorized for this operation")]
    Unauthorized(Address),
    #[error("deposit must be exactly {expected}, got {found}")]
    WrongAmount { expected: u64, found: u64 },
    #[error("filter rejected: {0}")]
    BadFilter(&'static str),
    #[error("revealed secret does not match the stored hash")]
    SecretMismatch,
    #[error("payouts total {total} exceed the fee {fee}")]
    OverDistribution { total: u64, fee: u64 },
    #[error("{0} is not an eligible payee")]
    IneligiblePayee(Address),
    #[error("deadline {deadline} not yet passed at {now}")]
    DeadlineNotReached { deadline: u64, now: u64 },
    #[error("contract already in terminal-for-abort phase {0}")]
    CannotAbort(ContractPhase),
}

/// Sorted map from committing address to `H(C_R)`. An address's rank in the
/// map is its filter position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommitmentIndex {
    entries: std::collections::BTreeMap<Address, Digest>,
}

impl CommitmentIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, addr: &Address) -> Option<&Digest> {
        self.entries.get(addr)
    }

    pub fn contains(&self, addr: &Address) -> bool {
        self.entries.contains_key(addr)
    }

    pub fn position(&self, addr: &Address) -> Option<usize> {
        if !self.entries.contains_key(addr) {
            return None;
        }
        Some(self.entries.range(..*addr).count())
    }

    pub fn at(&self, index: usize) -> Option<(&Address, &Digest)> {
        self.entries.iter().nth(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Address, &Digest)> {
        self.entries.iter()
    }

    pub fn addresses(&self) -> impl Iterator<Item = &Address> {
        self.entries.keys()
    }

    pub(crate) fn insert(&mut self, addr: Address, commitment: Digest) -> bool {
        use std::collections::btree_map::Entry;
        match self.entries.entry(addr) {
            Entry::Occupied(_) => false,
            Entry::Vacant(v) => {
                v.insert(commitment);
                true
            }
        }
    }
}
