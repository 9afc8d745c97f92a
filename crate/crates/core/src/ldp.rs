//! One-time RAPPOR over a one-hot choice vector.
//!
//! A respondent encodes their choice as a one-hot bit vector and pushes every
//! bit through a single randomized-response coin: keep the true bit with
//! probability `1 - f`, otherwise report a fair random bit. The aggregator sees
//! only the noisy vectors and inverts the channel per position:
//!
//! ```text
//! t_j ≈ (ones_j - N·f/2) / (1 - f)
//! ```

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Flip probability used when nothing else is configured.
pub const DEFAULT_FLIP_PROBABILITY: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdpError {
    #[error("query needs at least 2 choices, got {0}")]
    TooFewChoices(usize),
    #[error("duplicate choice label {0:?}")]
    DuplicateChoice(String),
    #[error("flip probability must lie in [0, 1), got {0}")]
    InvalidFlipProbability(f64),
    #[error("choice index {index} out of range for {n} choices")]
    ChoiceOutOfRange { index: usize, n: usize },
    #[error("report {index} has length {found}, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("no reports to aggregate")]
    NoReports,
    #[error("hamming distance must be at least 1")]
    ZeroDistance,
}

/// The ordered list of answer choices a survey offers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    choices: Vec<String>,
}

impl QuerySpec {
    pub fn new<I, S>(choices: I) -> Result<Self, LdpError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let choices: Vec<String> = choices.into_iter().map(Into::into).collect();
        if choices.len() < 2 {
            return Err(LdpError::TooFewChoices(choices.len()));
        }
        let mut seen = std::collections::HashSet::with_capacity(choices.len());
        for c in &choices {
            if !seen.insert(c.as_str()) {
                return Err(LdpError::DuplicateChoice(c.clone()));
            }
        }
        Ok(Self { choices })
    }

    /// Choices labelled `"1"` through `"n"`.
    pub fn numbered(n: usize) -> Result<Self, LdpError> {
        Self::new((1..=n).map(|i| i.to_string()))
    }

    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }

    pub fn choices(&self) -> &[String] {
        &self.choices
    }
}

/// Randomized-response flip probability `f`, constrained to `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    f: f64,
}

impl PrivacyParams {
    pub fn new(f: f64) -> Result<Self, LdpError> {
        if !f.is_finite() || !(0.0..1.0).contains(&f) {
            return Err(LdpError::InvalidFlipProbability(f));
        }
        Ok(Self { f })
    }

    pub fn flip_probability(&self) -> f64 {
        self.f
    }

    /// Probability that a reported bit is 1 given the true bit.
    pub fn report_one_probability(&self, true_bit: bool) -> f64 {
        if true_bit {
            1.0 - self.f / 2.0
        } else {
            self.f / 2.0
        }
    }
}

impl Default for PrivacyParams {
    fn default() -> Self {
        Self {
            f: DEFAULT_FLIP_PROBABILITY,
        }
    }
}

/// A response bit vector, one bit per query choice.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResponseVector {
    bits: Vec<bool>,
}

impl ResponseVector {
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

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

impl fmt::Display for ResponseVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Per-position tallies of reported ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitCounts {
    pub ones: Vec<u64>,
    pub reports: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyEstimate {
    /// Unbiased estimates; may be negative.
    pub raw: Vec<f64>,
    /// `raw` clamped at zero.
    pub clamped: Vec<f64>,
    pub params: PrivacyParams,
    pub reports: u64,
}

pub fn encode_one_hot(choice_index: usize, n: usize) -> Result<ResponseVector, LdpError> {
    if n < 2 {
        return Err(LdpError::TooFewChoices(n));
    }
    if choice_index >= n {
        return Err(LdpError::ChoiceOutOfRange {
            index: choice_index,
            n,
        });
    }
    let mut bits = vec![false; n];
    bits[choice_index] = true;
    Ok(ResponseVector { bits })
}

/// Applies the one-time randomized response to every bit of `rv`.
///
/// Each bit consumes exactly one uniform draw from `rng`, so the output is a
/// deterministic function of the input and the stream state.
pub fn randomize_response<R: Rng + ?Sized>(
    rv: &ResponseVector,
    params: &PrivacyParams,
    rng: &mut R,
) -> ResponseVector {
    let half = params.f / 2.0;
    let bits = rv
        .bits
        .iter()
        .map(|&bit| {
            let u: f64 = rng.random();
            if u < half {
                true
            } else if u < params.f {
                false
            } else {
                bit
            }
        })
        .collect();
    ResponseVector { bits }
}

pub fn accumulate_counts<'a, I>(reports: I) -> Result<BitCounts, LdpError>
where
    I: IntoIterator<Item = &'a ResponseVector>,
{
    let mut iter = reports.into_iter();
    let first = iter.next().ok_or(LdpError::NoReports)?;
    let n = first.len();
    let mut ones: Vec<u64> = first.bits.iter().map(|&b| u64::from(b)).collect();
    let mut reports = 1u64;
    for (i, rv) in iter.enumerate() {
        if rv.len() != n {
            return Err(LdpError::LengthMismatch {
                index: i + 1,
                expected: n,
                found: rv.len(),
            });
        }
        for (slot, &b) in ones.iter_mut().zip(&rv.bits) {
            *slot += u64::from(b);
        }
        reports += 1;
    }
    Ok(BitCounts { ones, reports })
}

/// Unbiased count for one bin from its tally of ones. Takes reals so that
/// expected tallies can be fed through unchanged.
pub fn estimate_count(ones: f64, reports: f64, params: &PrivacyParams) -> f64 {
    (ones - reports * params.f / 2.0) / (1.0 - params.f)
}

pub fn estimate_frequencies(counts: &BitCounts, params: &PrivacyParams) -> FrequencyEstimate {
    let reports = counts.reports as f64;
    let raw: Vec<f64> = counts
        .ones
        .iter()
        .map(|&o| estimate_count(o as f64, reports, params))
        .collect();
    let clamped = raw.iter().map(|&r| r.max(0.0)).collect();
    FrequencyEstimate {
        raw,
        clamped,
        params: *params,
        reports: counts.reports,
    }
}

/// Standard error of the raw estimate for a bin whose true count is
/// `true_count` out of `reports` respondents.
pub fn estimate_std_error(true_count: f64, reports: f64, params: &PrivacyParams) -> f64 {
    let f = params.f;
    let p1 = 1.0 - f / 2.0;
    let p0 = f / 2.0;
    let var = true_count * p1 * (1.0 - p1) + (reports - true_count) * p0 * (1.0 - p0);
    var.sqrt() / (1.0 - f)
}

/// Privacy loss of the mechanism between two inputs differing in
/// `hamming_distance` bits.
///
/// With `f = 0` the mechanism is the identity and offers no privacy; this is
/// reported as `f64::INFINITY`.
pub fn epsilon_of(params: &PrivacyParams, hamming_distance: u32) -> Result<f64, LdpError> {
    if hamming_distance == 0 {
        return Err(LdpError::ZeroDistance);
    }
    if params.f == 0.0 {
        return Ok(f64::INFINITY);
    }
    let half = params.f / 2.0;
    Ok(f64::from(hamming_distance) * ((1.0 - half) / half).ln())
}
