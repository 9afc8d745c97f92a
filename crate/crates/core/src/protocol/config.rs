use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::envelope::{digest, Digest};
use crate::ldp::{PrivacyParams, QuerySpec};

const FORMAT_TAG: &str = "survey-config/1";

/// One criterion: the profile attribute must hold one of `allowed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub attribute: String,
    pub allowed: BTreeSet<String>,
}

/// Conjunction of predicates. Empty means everyone qualifies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterCriteria {
    predicates: Vec<Predicate>,
}

impl FilterCriteria {
    pub fn accept_all() -> Self {
        Self::default()
    }

    pub fn new(predicates: Vec<Predicate>) -> Result<Self, ProtocolError> {
        let mut names = BTreeSet::new();
        for p in &predicates {
            if !names.insert(p.attribute.as_str()) {
                return Err(ProtocolError::Config(format!(
                    "attribute {:?} constrained twice",
                    p.attribute
                )));
            }
        }
        Ok(Self { predicates })
    }

    /// Shorthand for a single `attribute ∈ allowed` rule.
    pub fn single<I, S>(attribute: &str, allowed: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            predicates: vec![Predicate {
                attribute: attribute.to_owned(),
                allowed: allowed.into_iter().map(Into::into).collect(),
            }],
        }
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn is_empty(&self) -> bool {
        self.predicates.is_empty()
    }

    /// Parses a standalone criteria file: a TOML document holding
    /// `[[criteria]]` tables with `attribute` and `allowed` keys.
    pub fn from_toml(text: &str) -> Result<Self, ProtocolError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct File {
            #[serde(default)]
            criteria: Vec<Predicate>,
        }
        let f: File = toml::from_str(text).map_err(|e| ProtocolError::Config(e.to_string()))?;
        Self::new(f.criteria)
    }
}

/// `true` iff every predicate's attribute is present and allowed.
pub fn evaluate_criteria(attributes: &BTreeMap<String, String>, criteria: &FilterCriteria) -> bool {
    criteria.predicates.iter().all(|p| {
        attributes
            .get(&p.attribute)
            .is_some_and(|v| p.allowed.contains(v))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurveyConfiguration {
    pub query: QuerySpec,
    pub criteria: FilterCriteria,
    pub required_responses: u32,
    pub fee: u64,
    pub privacy: PrivacyParams,
}

/// A configuration together with its exact file bytes and their digest.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltConfig {
    pub config: SurveyConfiguration,
    pub bytes: Vec<u8>,
    pub digest: Digest,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    format: String,
    required_responses: u32,
    fee: u64,
    flip_probability: f64,
    choices: Vec<String>,
    #[serde(default)]
    criteria: Vec<Predicate>,
}

impl SurveyConfiguration {
    /// Canonical file text. Equal configurations always render to equal bytes.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let file = ConfigFile {
            format: FORMAT_TAG.to_owned(),
            required_responses: self.required_responses,
            fee: self.fee,
            flip_probability: self.privacy.flip_probability(),
            choices: self.query.choices().to_vec(),
            criteria: self.criteria.predicates.clone(),
        };
        toml::to_string(&file)
            .expect("configuration always serializes")
            .into_bytes()
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let text = std::str::from_utf8(bytes).map_err(|_| ProtocolError::Config("not utf-8".into()))?;
        let f: ConfigFile = toml::from_str(text).map_err(|e| ProtocolError::Config(e.to_string()))?;
        if f.format != FORMAT_TAG {
            return Err(ProtocolError::Config(format!("unknown format {:?}", f.format)));
        }
        build_survey_config(
            QuerySpec::new(f.choices)?,
            FilterCriteria::new(f.criteria)?,
            f.required_responses,
            f.fee,
            PrivacyParams::new(f.flip_probability)?,
        )
        .map(|b| b.config)
    }
}

pub fn build_survey_config(
    query: QuerySpec,
    criteria: FilterCriteria,
    required_responses: u32,
    fee: u64,
    privacy: PrivacyParams,
) -> Result<BuiltConfig, ProtocolError> {
    if required_responses == 0 {
        return Err(ProtocolError::Config("required responses must be at least 1".into()));
    }
    let criteria = FilterCriteria::new(criteria.predicates)?;
    let config = SurveyConfiguration {
        query,
        criteria,
        required_responses,
        fee,
        privacy,
    };
    let bytes = config.to_file_bytes();
    let digest = digest(&bytes);
    Ok(BuiltConfig {
        config,
        bytes,
        digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn sample(labels: &[&str]) -> BuiltConfig {
        build_survey_config(
            QuerySpec::new(labels.iter().copied()).unwrap(),
            FilterCriteria::single("region", ["NSW", "VIC"]),
            3,
            100,
            PrivacyParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn canonical_digest_is_stable() {
        let a = sample(&["small", "medium", "large"]);
        let b = sample(&["small", "medium", "large"]);
        assert_eq!(a.bytes, b.bytes);
        assert_eq!(a.digest, b.digest);
        assert_eq!(a.digest, digest(&a.bytes));
        let c = sample(&["small", "medium", "huge"]);
        assert_ne!(a.digest, c.digest);
    }

    #[test]
    fn file_parses_back() {
        let a = sample(&["small", "medium", "large"]);
        let parsed = SurveyConfiguration::from_file_bytes(&a.bytes).unwrap();
        assert_eq!(parsed, a.config);
        assert_eq!(parsed.to_file_bytes(), a.bytes);
    }

    #[test]
    fn twenty_choice_survey() {
        let b = build_survey_config(
            QuerySpec::numbered(20).unwrap(),
            FilterCriteria::accept_all(),
            500,
            1000,
            PrivacyParams::default(),
        )
        .unwrap();
        assert_eq!(b.config.query.len(), 20);
        assert_eq!(b.config.required_responses, 500);
    }

    #[test]
    fn rejects_bad_configs() {
        let q = QuerySpec::numbered(3).unwrap();
        assert!(build_survey_config(q.clone(), FilterCriteria::accept_all(), 0, 1, PrivacyParams::default()).is_err());
        let dup = vec![
            Predicate {
                attribute: "region".into(),
                allowed: BTreeSet::new(),
            };
            2
        ];
        assert!(FilterCriteria::new(dup).is_err());
        assert!(SurveyConfiguration::from_file_bytes(b"format = \"other\"").is_err());
    }

    #[test]
    fn criteria_evaluation() {
        let nsw = FilterCriteria::single("region", ["NSW"]);
        assert!(evaluate_criteria(&attrs(&[("region", "QLD")]), &FilterCriteria::accept_all()));
        assert!(evaluate_criteria(&attrs(&[("region", "NSW")]), &nsw));
        assert!(!evaluate_criteria(&attrs(&[("region", "VIC")]), &nsw));
        assert!(!evaluate_criteria(&attrs(&[("licence", "yes")]), &nsw));
    }

    #[test]
    fn criteria_file() {
        let c = FilterCriteria::from_toml(
            "[[criteria]]\nattribute = \"region\"\nallowed = [\"NSW\", \"ACT\"]\n",
        )
        .unwrap();
        assert_eq!(c.predicates().len(), 1);
        assert!(c.predicates()[0].allowed.contains("ACT"));
        assert!(FilterCriteria::from_toml("").unwrap().is_empty());
        assert!(FilterCriteria::from_toml("bogus = 1").is_err());
    }
}
