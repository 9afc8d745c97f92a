//! The three parties and the survey lifecycle.
//!
//! ```text
//! configure -> commit -> filter -> deliver -> deposit -> reveal -> settle -> decrypt
//! ```
//!
//! The system operator sets up the escrow and screens respondents, drone
//! operators commit to sealed noisy answers and deliver them if selected, and
//! the authority pays into escrow before it can rebuild the session key.

mod config;
mod parties;
mod run;

use std::collections::BTreeMap;

use thiserror::Error;

pub use config::{
    build_survey_config, evaluate_criteria, BuiltConfig, FilterCriteria, Predicate,
    SurveyConfiguration,
};
pub use parties::{
    build_filter, AggregationOutcome, Authority, DeliveryMessage, DroneOperator, FilterVector,
    OperatorProfile, PskDistribution, PskGrant, SystemOperator,
};
pub use run::{run_survey, Scenario, SurveyFailure, SurveyRun, Trace, TraceEntry};

use crate::envelope::{Digest, EnvelopeError};
use crate::ldp::LdpError;
use crate::ledger::{Address, ContractPhase, LedgerError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("configuration digest mismatch: ledger has {expected}, file hashes to {found}")]
    Integrity { expected: Digest, found: Digest },
    #[error("survey not set up")]
    NotSetUp,
    #[error("operator holds no psk for this survey")]
    NotGranted,
    #[error("{0} has no commitment on the ledger")]
    UnknownAddress(Address),
    #[error("operator has no sealed response")]
    NothingToDeliver,
    #[error("only {eligible} eligible responses, {required} required")]
    InsufficientEligible { eligible: usize, required: usize },
    #[error("deposit refused: {accepted} of {required} responses accepted")]
    PrematureDeposit { accepted: usize, required: usize },
    #[error("not possible in contract phase {0}")]
    WrongPhase(ContractPhase),
    #[error("delivery at index {index} failed to decrypt")]
    Decryption { index: usize },
    #[error("artifact {0} not found")]
    MissingArtifact(String),
    #[error(transparent)]
    Delivery(#[from] DeliveryRejection),
    #[error(transparent)]
    Ldp(#[from] LdpError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryRejection {
    #[error("index {index} is outside the commitment index")]
    IndexOutOfRange { index: usize },
    #[error("ciphertext at index {index} does not match its commitment")]
    HashMismatch { index: usize },
    #[error("index {index} is not selected by the filter")]
    Ineligible { index: usize },
    #[error("index {index} already delivered")]
    Duplicate { index: usize },
}

/// Off-ledger storage at pre-agreed locations: configuration files and
/// published filters.
#[derive(Debug, Clone, Default)]
pub struct ArtifactStore {
    items: BTreeMap<String, Vec<u8>>,
}

impl ArtifactStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a configuration file and returns its location.
    pub fn put_config(&mut self, bytes: &[u8]) -> String {
        let uri = format!("store://config/{}", crate::envelope::digest(bytes));
        self.items.insert(uri.clone(), bytes.to_vec());
        uri
    }

    pub fn filter_uri(contract_id: Digest) -> String {
        format!("store://filter/{contract_id}")
    }

    pub fn publish_filter(&mut self, contract_id: Digest, encoded: Vec<u8>) {
        self.items.insert(Self::filter_uri(contract_id), encoded);
    }

    pub fn fetch(&self, uri: &str) -> Result<&[u8], ProtocolError> {
        self.items
            .get(uri)
            .map(Vec::as_slice)
            .ok_or_else(|| ProtocolError::MissingArtifact(uri.to_owned()))
    }

    /// Overwrites an artifact in place. Used to model a tampered mirror.
    pub fn replace(&mut self, uri: &str, bytes: Vec<u8>) {
        self.items.insert(uri.to_owned(), bytes);
    }

    pub fn fetch_filter(&self, contract_id: Digest) -> Result<FilterVector, ProtocolError> {
        let bytes = self.fetch(&Self::filter_uri(contract_id))?;
        Ok(FilterVector::from_bits(crate::envelope::decode_bits(bytes)?))
    }
}
