//! Privacy-preserving crowdsourced survey marketplace.
//!
//! Respondents answer a multiple-choice query through one-time RAPPOR
//! ([`ldp`]), seal the noisy answer under an escrowed session key
//! ([`envelope`]) and commit its hash to a simulated contract ([`ledger`]).
//! The [`protocol`] module drives the three parties through collection,
//! filtering, delivery, deposit, key reveal and settlement; [`sim`] reruns the
//! accuracy experiments over many simulated respondents.

pub mod envelope;
pub mod ldp;
pub mod ledger;
pub mod protocol;
pub mod seed;
pub mod sim;
