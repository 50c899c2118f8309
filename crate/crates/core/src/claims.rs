//! Claims, claim sets, extraction and entailment.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{FactTuple, Section};
use crate::error::Result;

/// Lowercases, collapses runs of whitespace and strips trailing punctuation.
pub fn canonical_text(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// An atomic claim. `text` is canonical once built through [`Claim::new`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Claim {
    pub text: String,
    pub tuple: Option<FactTuple>,
    pub section_hint: Option<Section>,
}

impl Claim {
    pub fn new(text: &str) -> Claim {
        Claim {
            text: canonical_text(text),
            tuple: None,
            section_hint: None,
        }
    }

    pub fn from_tuple(tuple: FactTuple) -> Claim {
        Claim {
            text: tuple.claim_text(),
            section_hint: Some(tuple.section),
            tuple: Some(tuple),
        }
    }
}

pub fn canonicalize(claim: &Claim) -> Claim {
    Claim {
        text: canonical_text(&claim.text),
        tuple: claim.tuple.clone(),
        section_hint: claim.section_hint,
    }
}

/// Insertion-ordered set of claims keyed by canonical text.
#[derive(Clone, Debug, Default)]
pub struct ClaimSet {
    claims: Vec<Claim>,
    keys: HashSet<String>,
}

impl PartialEq for ClaimSet {
    fn eq(&self, other: &Self) -> bool {
        self.claims.len() == other.claims.len()
            && self
                .claims
                .iter()
                .zip(&other.claims)
                .all(|(a, b)| a.text == b.text)
    }
}

impl ClaimSet {
    pub fn new() -> ClaimSet {
        ClaimSet::default()
    }

    /// Inserts the canonical form of `claim`; returns false if its text was already present.
    pub fn insert(&mut self, claim: Claim) -> bool {
        let claim = canonicalize(&claim);
        if claim.text.is_empty() || !self.keys.insert(claim.text.clone()) {
            return false;
        }
        self.claims.push(claim);
        true
    }

    pub fn contains_text(&self, canonical: &str) -> bool {
        self.keys.contains(canonical)
    }

    pub fn contains(&self, claim: &Claim) -> bool {
        self.keys.contains(&claim.text)
    }

    pub fn len(&self) -> usize {
        self.claims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.claims.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Claim> {
        self.claims.iter()
    }

    pub fn as_slice(&self) -> &[Claim] {
        &self.claims
    }

    pub fn texts(&self) -> Vec<String> {
        self.claims.iter().map(|c| c.text.clone()).collect()
    }

    /// Comparison as unordered sets of canonical text.
    pub fn same_claims(&self, other: &ClaimSet) -> bool {
        self.keys == other.keys
    }

    /// One canonical claim per line, in insertion order.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for c in &self.claims {
            out.push_str(&c.text);
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> ClaimSet {
        text.lines().map(Claim::new).collect()
    }
}

impl FromIterator<Claim> for ClaimSet {
    fn from_iter<I: IntoIterator<Item = Claim>>(iter: I) -> Self {
        let mut set = ClaimSet::new();
        for c in iter {
            set.insert(c);
        }
        set
    }
}

impl<'a> IntoIterator for &'a ClaimSet {
    type Item = &'a Claim;
    type IntoIter = std::slice::Iter<'a, Claim>;

    fn into_iter(self) -> Self::IntoIter {
        self.claims.iter()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorInfo {
    pub name: String,
    pub version: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextKind {
    Dialogue,
    Note,
}

pub trait ClaimExtractor: Send + Sync {
    fn info(&self) -> ExtractorInfo;

    fn extract(&self, text: &str, kind: TextKind) -> Result<ClaimSet>;
}

pub trait EntailmentChecker: Send + Sync {
    fn entails(&self, premise: &str, claim: &Claim) -> Result<bool>;

    /// Checks every claim against one premise, results in claim order.
    fn entails_all(&self, premise: &str, claims: &[Claim]) -> Result<Vec<bool>> {
        claims.iter().map(|c| self.entails(premise, c)).collect()
    }
}

static FACT_SENTENCE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\b([a-z]+) (reports|shows|suggests|includes) ([a-z]+_[0-9]+) ([a-z]+)\b")
        .expect("fact sentence pattern compiles")
});

/// Parses the fixed fact-sentence templates. Never fails.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleExtractor;

impl RuleExtractor {
    pub const NAME: &'static str = "rule";
    pub const VERSION: &'static str = "1";

    pub fn extract_text(&self, text: &str) -> ClaimSet {
        let normalized = text
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        FACT_SENTENCE
            .captures_iter(&normalized)
            .map(|caps| {
                let section =
                    Section::from_verb(&caps[2]).expect("pattern only admits template verbs");
                Claim::from_tuple(FactTuple {
                    subject: caps[1].to_string(),
                    attribute: caps[3].to_string(),
                    value: caps[4].to_string(),
                    section,
                })
            })
            .collect()
    }
}

impl ClaimExtractor for RuleExtractor {
    fn info(&self) -> ExtractorInfo {
        ExtractorInfo {
            name: Self::NAME.into(),
            version: Self::VERSION.into(),
        }
    }

    fn extract(&self, text: &str, _kind: TextKind) -> Result<ClaimSet> {
        Ok(self.extract_text(text))
    }
}

/// Exact entailment: a claim is entailed iff its canonical text is among the
/// rule-extracted claims of the premise.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleChecker;

impl EntailmentChecker for OracleChecker {
    fn entails(&self, premise: &str, claim: &Claim) -> Result<bool> {
        Ok(RuleExtractor
            .extract_text(premise)
            .contains_text(&canonical_text(&claim.text)))
    }

    fn entails_all(&self, premise: &str, claims: &[Claim]) -> Result<Vec<bool>> {
        let premise_claims = RuleExtractor.extract_text(premise);
        Ok(claims
            .iter()
            .map(|c| premise_claims.contains_text(&canonical_text(&c.text)))
            .collect())
    }
}
