use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::config::{evaluate_criteria, BuiltConfig, SurveyConfiguration};
use super::{ArtifactStore, DeliveryRejection, ProtocolError};
use crate::envelope::{
    decode_response, derive_session_key, digest, encode_bits, encode_response, encrypt,
    hmac_derive, CipherNonce, Ciphertext, Digest, Nonce, PreSharedKey, Secret,
};
use crate::ldp::{
    accumulate_counts, encode_one_hot, estimate_frequencies, randomize_response, FrequencyEstimate,
    ResponseVector,
};
use crate::ledger::{
    Address, CommitmentIndex, ContractPhase, ContractTerms, EventPayload, PayoutPolicy,
    SurveyContract,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorProfile {
    pub operator_id: String,
    addresses: Vec<Address>,
    active: usize,
    pub attributes: BTreeMap<String, String>,
    /// The operator's real answer. Only simulations know this.
    pub true_choice: usize,
}

impl OperatorProfile {
    pub fn new(
        operator_id: impl Into<String>,
        addresses: Vec<Address>,
        attributes: BTreeMap<String, String>,
        true_choice: usize,
    ) -> Result<Self, ProtocolError> {
        if addresses.is_empty() {
            return Err(ProtocolError::Config("operator needs at least one address".into()));
        }
        let distinct: BTreeSet<_> = addresses.iter().collect();
        if distinct.len() != addresses.len() {
            return Err(ProtocolError::Config("operator addresses must be distinct".into()));
        }
        Ok(Self {
            operator_id: operator_id.into(),
            addresses,
            active: 0,
            attributes,
            true_choice,
        })
    }

    pub fn addresses(&self) -> &[Address] {
        &self.addresses
    }

    pub fn active_address(&self) -> Address {
        self.addresses[self.active]
    }

    pub fn set_active(&mut self, index: usize) -> Result<(), ProtocolError> {
        if index >= self.addresses.len() {
            return Err(ProtocolError::Config("active address index out of range".into()));
        }
        self.active = index;
        Ok(())
    }
}

/// Eligibility bits over the commitment index, in ascending address order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterVector {
    bits: Vec<bool>,
}

impl FilterVector {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<bool> {
        self.bits.get(i).copied()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_bits(&self.bits)
    }

    pub fn digest(&self) -> Digest {
        digest(&self.encode())
    }
}

/// Builds the filter from eligibility decisions taken in commit-arrival
/// order. The first `required` eligible arrivals get a 1; everyone else 0.
pub fn build_filter(
    commitments: &CommitmentIndex,
    arrivals: &[(Address, bool)],
    required: usize,
) -> Result<FilterVector, ProtocolError> {
    let position: BTreeMap<&Address, usize> = commitments
        .addresses()
        .enumerate()
        .map(|(i, a)| (a, i))
        .collect();
    let mut bits = vec![false; commitments.len()];
    let mut marked = 0;
    let mut eligible_total = 0;
    for (addr, eligible) in arrivals {
        let &i = position.get(addr).ok_or(ProtocolError::UnknownAddress(*addr))?;
        if *eligible {
            eligible_total += 1;
            if marked < required {
                bits[i] = true;
                marked += 1;
            }
        }
    }
    if marked < required {
        return Err(ProtocolError::InsufficientEligible {
            eligible: eligible_total,
            required,
        });
    }
    Ok(FilterVector { bits })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryMessage {
    pub index: usize,
    pub ciphertext: Ciphertext,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutcome {
    pub decrypted: Vec<ResponseVector>,
    pub estimate: FrequencyEstimate,
}

/// What an admitted operator receives from the system operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PskGrant {
    pub psk: PreSharedKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PskDistribution {
    pub contract_id: Digest,
    pub recipients: Vec<String>,
}

struct EscrowKeys {
    psk: PreSharedKey,
    s2: Secret,
}

pub struct SystemOperator {
    address: Address,
    policy: PayoutPolicy,
    keys: Option<EscrowKeys>,
    distribution: Option<PskDistribution>,
    registry: BTreeMap<Address, OperatorProfile>,
}

impl SystemOperator {
    pub fn new(address: Address, policy: PayoutPolicy) -> Self {
        Self {
            address,
            policy,
            keys: None,
            distribution: None,
            registry: BTreeMap::new(),
        }
    }

    pub fn address(&self) -> Address {
        self.address
    }

    /// Generates psk, n1 and n2, derives the escrow secrets and creates the
    /// contract holding `s1` in clear and only `H(s2)`.
    pub fn setup_survey<R: Rng + ?Sized>(
        &mut self,
        authority: Address,
        config: &BuiltConfig,
        config_uri: &str,
        deadline: u64,
        rng: &mut R,
    ) -> Result<SurveyContract, ProtocolError> {
        let psk = PreSharedKey::random(rng);
        let n1 = Nonce::random(rng);
        let n2 = Nonce::random(rng);
        let s1 = hmac_derive(&psk, &n1);
        let s2 = hmac_derive(&psk, &n2);
        let contract = SurveyContract::create(ContractTerms {
            config_uri: config_uri.to_owned(),
            config_digest: config.digest,
            required_responses: config.config.required_responses,
            fee: config.config.fee,
            n1,
            n2,
            s1,
            h_s2: digest(&s2.0),
            deadline,
            authority,
            system_operator: self.address,
        })?;
        self.keys = Some(EscrowKeys { psk, s2 });
        self.distribution = Some(PskDistribution {
            contract_id: contract.contract_id(),
            recipients: Vec::new(),
        });
        Ok(contract)
    }

    /// Admits an operator to the survey: records its addresses and hands over
    /// the survey psk.
    pub fn grant_psk(&mut self, profile: &OperatorProfile) -> Result<PskGrant, ProtocolError> {
        let keys = self.keys.as_ref().ok_or(ProtocolError::NotSetUp)?;
        for a in profile.addresses() {
            self.registry.insert(*a, profile.clone());
        }
        if let Some(d) = self.distribution.as_mut() {
            d.recipients.push(profile.operator_id.clone());
        }
        Ok(PskGrant { psk: keys.psk })
    }

    pub fn psk_distribution(&self) -> Option<&PskDistribution> {
        self.distribution.as_ref()
    }

    /// Screens committed addresses in the order their commitments landed on
    /// the ledger and freezes the contract once `NR` are eligible.
    pub fn build_and_finalize_filter(
        &self,
        contract: &mut SurveyContract,
        config: &SurveyConfiguration,
        store: &mut ArtifactStore,
    ) -> Result<FilterVector, ProtocolError> {
        let arrivals: Vec<(Address, bool)> = contract
            .log()
            .events()
            .iter()
            .filter_map(|e| match &e.payload {
                EventPayload::Committed { address, .. } => Some(*address),
                _ => None,
            })
            .map(|a| {
                let ok = self
                    .registry
                    .get(&a)
                    .is_some_and(|p| evaluate_criteria(&p.attributes, &config.criteria));
                (a, ok)
            })
            .collect();
        let filter = build_filter(
            contract.commitments(),
            &arrivals,
            contract.terms().required_responses as usize,
        )?;
        contract.finalize_filter(self.address, filter.bits.clone(), filter.digest())?;
        store.publish_filter(contract.contract_id(), filter.encode());
        Ok(filter)
    }

    pub fn reveal(&self, contract: &mut SurveyContract) -> Result<(), ProtocolError> {
        let keys = self.keys.as_ref().ok_or(ProtocolError::NotSetUp)?;
        contract.reveal_secret(keys.s2)?;
        Ok(())
    }

    /// Pays every eligible address its equal share of the operator pool.
    pub fn pay_operators(&self, contract: &mut SurveyContract) -> Result<BTreeMap<Address, u64>, ProtocolError> {
        let filter = contract
            .filter()
            .ok_or(ProtocolError::WrongPhase(contract.phase()))?;
        let eligible: Vec<Address> = contract
            .commitments()
            .addresses()
            .zip(filter)
            .filter(|(_, b)| **b)
            .map(|(a, _)| *a)
            .collect();
        let (each, _) = self.policy.split(contract.deposit_amount(), eligible.len() as u64);
        let distribution: BTreeMap<Address, u64> = eligible.into_iter().map(|a| (a, each)).collect();
        contract.payout(self.address, &distribution)?;
        Ok(distribution)
    }
}

pub struct DroneOperator {
    pub profile: OperatorProfile,
    grant: Option<PskGrant>,
    sealed: Option<Ciphertext>,
}

impl DroneOperator {
    pub fn new(profile: OperatorProfile) -> Self {
        Self {
            profile,
            grant: None,
            sealed: None,
        }
    }

    pub fn receive_grant(&mut self, grant: PskGrant) {
        self.grant = Some(grant);
    }

    pub fn sealed_response(&self) -> Option<&Ciphertext> {
        self.sealed.as_ref()
    }

    /// Verifies the configuration against the on-ledger digest, randomizes
    /// the true choice, seals it under `sk` and returns the commitment to
    /// submit. The ciphertext stays with the operator until delivery.
    pub fn prepare<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        &mut self,
        config_bytes: &[u8],
        terms: &ContractTerms,
        ldp_rng: &mut R1,
        nonce_rng: &mut R2,
    ) -> Result<Digest, ProtocolError> {
        let found = digest(config_bytes);
        if found != terms.config_digest {
            return Err(ProtocolError::Integrity {
                expected: terms.config_digest,
                found,
            });
        }
        let config = SurveyConfiguration::from_file_bytes(config_bytes)?;
        let grant = self.grant.as_ref().ok_or(ProtocolError::NotGranted)?;
        let truth = encode_one_hot(self.profile.true_choice, config.query.len())?;
        let noisy = randomize_response(&truth, &config.privacy, ldp_rng);
        let s1 = hmac_derive(&grant.psk, &terms.n1);
        let s2 = hmac_derive(&grant.psk, &terms.n2);
        let sk = derive_session_key(&s1, &s2);
        let sealed = encrypt(&sk, &encode_response(&noisy), CipherNonce::random(nonce_rng));
        let commitment = sealed.commitment();
        self.sealed = Some(sealed);
        Ok(commitment)
    }

    pub fn prepare_and_commit<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        &mut self,
        config_bytes: &[u8],
        contract: &mut SurveyContract,
        ldp_rng: &mut R1,
        nonce_rng: &mut R2,
    ) -> Result<Digest, ProtocolError> {
        let commitment = self.prepare(config_bytes, contract.terms(), ldp_rng, nonce_rng)?;
        contract.commit_response(self.profile.active_address(), commitment)?;
        Ok(commitment)
    }

    pub fn deliver(
        &self,
        filter: &FilterVector,
        commitments: &CommitmentIndex,
    ) -> Result<Option<DeliveryMessage>, ProtocolError> {
        let addr = self.profile.active_address();
        let index = commitments
            .position(&addr)
            .ok_or(ProtocolError::UnknownAddress(addr))?;
        if !filter.get(index).unwrap_or(false) {
            return Ok(None);
        }
        let ciphertext = self.sealed.clone().ok_or(ProtocolError::NothingToDeliver)?;
        Ok(Some(DeliveryMessage { index, ciphertext }))
    }
}

pub struct Authority {
    address: Address,
    config: SurveyConfiguration,
    accepted: BTreeMap<usize, Ciphertext>,
}

impl Authority {
    pub fn new(address: Address, config: SurveyConfiguration) -> Self {
        Self {
            address,
            config,
            accepted: BTreeMap::new(),
        }
    }

    pub fn address(&self) -> Address {
        self.address
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted.len()
    }

    pub fn accepted(&self) -> &BTreeMap<usize, Ciphertext> {
        &self.accepted
    }

    pub fn verify_delivery(
        &mut self,
        msg: &DeliveryMessage,
        commitments: &CommitmentIndex,
        filter: &FilterVector,
    ) -> Result<(), DeliveryRejection> {
        let index = msg.index;
        let (_, committed) = commitments
            .at(index)
            .ok_or(DeliveryRejection::IndexOutOfRange { index })?;
        if msg.ciphertext.commitment() != *committed {
            return Err(DeliveryRejection::HashMismatch { index });
        }
        if filter.get(index) != Some(true) {
            return Err(DeliveryRejection::Ineligible { index });
        }
        if self.accepted.contains_key(&index) {
            return Err(DeliveryRejection::Duplicate { index });
        }
        self.accepted.insert(index, msg.ciphertext.clone());
        Ok(())
    }

    /// Pays the fee into escrow, but only once `NR` deliveries are accepted.
    pub fn deposit(&self, contract: &mut SurveyContract) -> Result<(), ProtocolError> {
        let required = contract.terms().required_responses as usize;
        if self.accepted.len() != required {
            return Err(ProtocolError::PrematureDeposit {
                accepted: self.accepted.len(),
                required,
            });
        }
        contract.deposit(self.address, contract.terms().fee)?;
        Ok(())
    }

    /// Rebuilds `sk` from the public `s1` and the revealed `s2`, opens every
    /// accepted delivery and estimates the choice distribution.
    pub fn settle_and_decrypt(&self, contract: &SurveyContract) -> Result<AggregationOutcome, ProtocolError> {
        if !matches!(contract.phase(), ContractPhase::Revealed | ContractPhase::Settled) {
            return Err(ProtocolError::WrongPhase(contract.phase()));
        }
        let s2 = contract
            .revealed_s2()
            .ok_or(ProtocolError::WrongPhase(contract.phase()))?;
        let sk = derive_session_key(&contract.terms().s1, &s2);
        let n = self.config.query.len();
        let mut decrypted = Vec::with_capacity(self.accepted.len());
        for (&index, c) in &self.accepted {
            let plain = crate::envelope::decrypt(&sk, c).map_err(|_| ProtocolError::Decryption { index })?;
            let rv = decode_response(&plain).map_err(|_| ProtocolError::Decryption { index })?;
            if rv.len() != n {
                return Err(ProtocolError::Decryption { index });
            }
            decrypted.push(rv);
        }
        let counts = accumulate_counts(&decrypted)?;
        let estimate = estimate_frequencies(&counts, &self.config.privacy);
        Ok(AggregationOutcome { decrypted, estimate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(prefixes: &[u8]) -> CommitmentIndex {
        let mut m = CommitmentIndex::new();
        for &p in prefixes {
            m.insert(Address::with_prefix(p), Digest([p; 32]));
        }
        m
    }

    #[test]
    fn filter_follows_arrival_then_sorted_positions() {
        // Arrival order 0x09, 0x02, 0x05, 0x01 with eligibility yes, no, yes, yes.
        // Sorted positions: 0x01→0, 0x02→1, 0x05→2, 0x09→3. The first two
        // eligible arrivals are 0x09 and 0x05.
        let m = index(&[0x09, 0x02, 0x05, 0x01]);
        let arrivals = [
            (Address::with_prefix(0x09), true),
            (Address::with_prefix(0x02), false),
            (Address::with_prefix(0x05), true),
            (Address::with_prefix(0x01), true),
        ];
        let f = build_filter(&m, &arrivals, 2).unwrap();
        assert_eq!(f.bits(), &[false, false, true, true]);
    }

    #[test]
    fn last_eligible_arrival_misses_out() {
        let prefixes = [0x30, 0x10, 0x50, 0x20, 0x40];
        let m = index(&prefixes);
        let eligible = [true, true, false, true, true];
        let arrivals: Vec<_> = prefixes
            .iter()
            .zip(eligible)
            .map(|(&p, e)| (Address::with_prefix(p), e))
            .collect();
        let f = build_filter(&m, &arrivals, 3).unwrap();
        assert_eq!(f.popcount(), 3);
        let last = m.position(&Address::with_prefix(0x40)).unwrap();
        assert!(!f.bits()[last]);
    }

    #[test]
    fn too_few_eligible() {
        let m = index(&[1, 2]);
        let arrivals = [(Address::with_prefix(1), true), (Address::with_prefix(2), false)];
        assert_eq!(
            build_filter(&m, &arrivals, 2),
            Err(ProtocolError::InsufficientEligible {
                eligible: 1,
                required: 2
            })
        );
        let stranger = [(Address::with_prefix(7), true)];
        assert!(matches!(
            build_filter(&m, &stranger, 1),
            Err(ProtocolError::UnknownAddress(_))
        ));
    }

    #[test]
    fn filter_encoding_matches_bit_packing() {
        let f = FilterVector::from_bits(vec![true, false, true]);
        assert_eq!(f.encode(), vec![0, 0, 0, 3, 0xA0]);
        assert_eq!(f.digest(), digest(&[0, 0, 0, 3, 0xA0]));
    }

    #[test]
    fn profile_addresses_must_be_distinct() {
        let a = Address::with_prefix(1);
        assert!(OperatorProfile::new("x", vec![], BTreeMap::new(), 0).is_err());
        assert!(OperatorProfile::new("x", vec![a, a], BTreeMap::new(), 0).is_err());
        let mut p = OperatorProfile::new("x", vec![a, Address::with_prefix(2)], BTreeMap::new(), 0).unwrap();
        assert_eq!(p.active_address(), a);
        p.set_active(1).unwrap();
        assert_eq!(p.active_address(), Address::with_prefix(2));
        assert!(p.set_active(2).is_err());
    }
}
