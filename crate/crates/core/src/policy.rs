//! Factual-inclusion policy.
//!
//! For every vocabulary fact the policy makes one independent Bernoulli
//! decision with `p = sigmoid(w · x)`, where `x` is the fact's feature vector
//! for the current dialogue. Included facts are rendered into a four-section
//! SOAP note. Log-probabilities and their gradients are exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Dialogue, FactTuple, Section};
use crate::error::{Error, Result};

pub const FEATURE_NAMES: [&str; 7] = [
    "mentioned",
    "section_s",
    "section_o",
    "section_a",
    "section_p",
    "salience",
    "bias",
];

pub const FEATURE_DIM: usize = FEATURE_NAMES.len();

#[derive(Clone, Debug, PartialEq)]
pub struct FactCandidate {
    pub fact_id: String,
    pub tuple: FactTuple,
    pub features: Vec<f64>,
}

impl FactCandidate {
    pub fn mentioned(&self) -> bool {
        self.features[0] == 1.0
    }
}

/// One candidate per vocabulary fact, in vocabulary order.
pub fn candidate_facts(dialogue: &Dialogue, corpus: &Corpus) -> Vec<FactCandidate> {
    let text = dialogue.text();
    corpus
        .vocabulary
        .iter()
        .map(|v| {
            let occurrences = text.matches(&v.tuple.sentence()).count();
            let mut features = vec![0.0; FEATURE_DIM];
            features[0] = if occurrences > 0 { 1.0 } else { 0.0 };
            features[1 + v.tuple.section.index()] = 1.0;
            features[5] = occurrences as f64;
            features[6] = 1.0;
            FactCandidate {
                fact_id: v.id.clone(),
                tuple: v.tuple.clone(),
                features,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
        }
    }

    /// Weights drawn uniformly from `[-scale, scale]`.
    pub fn random(dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weights: (0..dim).map(|_| rng.random_range(-scale..=scale)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, x)| w * x).sum()
    }

    pub fn inclusion_prob(&self, features: &[f64]) -> f64 {
        sigmoid(self.logit(features))
    }

    /// Text checkpoint: a header with the dimension and feature names, then
    /// one weight per line.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::from("# soapgrpo inclusion policy\n");
        writeln!(out, "d {}", self.dim()).unwrap();
        let names: Vec<&str> = if self.dim() == FEATURE_DIM {
            FEATURE_NAMES.to_vec()
        } else {
            vec!["-"; self.dim()]
        };
        writeln!(out, "features {}", names.join(" ")).unwrap();
        for w in &self.weights {
            // `{:e}` is the shortest representation that round-trips.
            writeln!(out, "{w:e}").unwrap();
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Integrity(format!("malformed checkpoint: {m}"));
        let mut lines = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let dim: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("d "))
            .ok_or_else(|| bad("missing `d` header".into()))?
            .trim()
            .parse()
            .map_err(|e| bad(format!("dimension: {e}")))?;
        let features = lines
            .next()
            .and_then(|l| l.strip_prefix("features"))
            .ok_or_else(|| bad("missing `features` header".into()))?;
        if features.split_whitespace().count() != dim {
            return Err(bad(format!("feature list does not have {dim} names")));
        }
        let weights = lines
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("weight `{l}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if weights.len() != dim {
            return Err(bad(format!(
                "expected {dim} weights, found {}",
                weights.len()
            )));
        }
        let params = Self { weights };
        if !params.is_finite() {
            return Err(bad("non-finite weight".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&text)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `log p` if included, `log(1 - p)` otherwise, for `p = sigmoid(z)`.
pub fn decision_logprob(z: f64, included: bool) -> f64 {
    if included {
        -softplus(-z)
    } else {
        -softplus(z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub fact_id: String,
    pub included: bool,
    pub logprob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoapNote {
    pub sections: [Vec<String>; 4],
    pub rendered_text: String,
}

impl SoapNote {
    /// Facts are placed in their section in the order given.
    pub fn from_facts<'a>(facts: impl IntoIterator<Item = &'a FactTuple>) -> Self {
        let mut sections: [Vec<String>; 4] = Default::default();
        for f in facts {
            sections[f.section.index()].push(f.sentence());
        }
        let rendered_text = render_sections(&sections);
        Self {
            sections,
            rendered_text,
        }
    }

    pub fn section(&self, section: Section) -> &[String] {
        &self.sections[section.index()]
    }
}

fn render_sections(sections: &[Vec<String>; 4]) -> String {
    let mut out = String::new();
    for s in Section::ALL {
        out.push_str(s.header());
        out.push('\n');
        for sentence in &sections[s.index()] {
            out.push_str(sentence);
            out.push('\n');
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dialogue_id: String,
    pub decisions: Vec<Decision>,
    pub note: SoapNote,
    pub total_logprob: f64,
}

impl Trajectory {
    fn assemble(dialogue_id: &str, candidates: &[FactCandidate], decisions: Vec<Decision>) -> Self {
        let note = SoapNote::from_facts(
            candidates
                .iter()
                .zip(&decisions)
                .filter(|(_, d)| d.included)
                .map(|(c, _)| &c.tuple),
        );
        let total_logprob = decisions.iter().map(|d| d.logprob).sum();
        Self {
            dialogue_id: dialogue_id.to_string(),
            decisions,
            note,
            total_logprob,
        }
    }

    pub fn included_ids(&self) -> impl Iterator<Item = &str> {
        self.decisions
            .iter()
            .filter(|d| d.included)
            .map(|d| d.fact_id.as_str())
    }
}

/// Draws one note: an independent Bernoulli inclusion per candidate.
pub fn sample_note<R: Rng + ?Sized>(
    params: &PolicyParams,
    dialogue_id: &str,
    candidates: &[FactCandidate],
    rng: &mut R,
) -> Trajectory {
    let decisions = candidates
        .iter()
        .map(|c| {
            let z = params.logit(&c.features);
            let included = rng.random::<f64>() < sigmoid(z);
            Decision {
                fact_id: c.fact_id.clone(),
                included,
                logprob: decision_logprob(z, included),
            }
        })
        .collect();
    Trajectory::assemble(dialogue_id, candidates, decisions)
}

/// Deterministic decoding: include a fact iff its inclusion probability is at least 1/2.
pub fn greedy_note(
    params: &PolicyParams,
    dialogue_id: &str,
    candidates: &[FactCandidate],
) -> Trajectory {
    let decisions = candidates
        .iter()
        .map(|c| {
            let z = params.logit(&c.features);
            let included = z >= 0.0;
            Decision {
                fact_id: c.fact_id.clone(),
                included,
                logprob: decision_logprob(z, included),
            }
        })
        .collect();
    Trajectory::assemble(dialogue_id, candidates, decisions)
}

fn check_alignment(
    params: &PolicyParams,
    decisions: &[Decision],
    candidates: &[FactCandidate],
) -> Result<()> {
    if decisions.len() != candidates.len() {
        return Err(Error::Integrity(format!(
            "{} decisions for {} candidates",
            decisions.len(),
            candidates.len()
        )));
    }
    for (d, c) in decisions.iter().zip(candidates) {
        if d.fact_id != c.fact_id {
            return Err(Error::Integrity(format!(
                "decision for `{}` aligned with candidate `{}`",
                d.fact_id, c.fact_id
            )));
        }
        if c.features.len() != params.dim() {
            return Err(Error::Integrity(format!(
                "candidate `{}` has {} features, policy has dimension {}",
                c.fact_id,
                c.features.len(),
                params.dim()
            )));
        }
    }
    Ok(())
}

/// Recomputes the log-probability of a decision sequence under `params`.
pub fn logprob(
    params: &PolicyParams,
    decisions: &[Decision],
    candidates: &[FactCandidate],
) -> Result<f64> {
    check_alignment(params, decisions, candidates)?;
    Ok(decisions
        .iter()
        .zip(candidates)
        .map(|(d, c)| decision_logprob(params.logit(&c.features), d.included))
        .sum())
}

/// `Σ_f (b_f − sigmoid(w·x_f)) x_f`.
pub fn grad_logprob(
    params: &PolicyParams,
    decisions: &[Decision],
    candidates: &[FactCandidate],
) -> Result<Vec<f64>> {
    check_alignment(params, decisions, candidates)?;
    let mut grad = vec![0.0; params.dim()];
    for (d, c) in decisions.iter().zip(candidates) {
        let residual = f64::from(u8::from(d.included)) - params.inclusion_prob(&c.features);
        for (g, x) in grad.iter_mut().zip(&c.features) {
            *g += residual * x;
        }
    }
    Ok(grad)
}
