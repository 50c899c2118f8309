//! Claim precision/recall/F1, the scaled (optionally gated) reward and the
//! reference-claim cache.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::claims::{Claim, ClaimExtractor, ClaimSet, EntailmentChecker, ExtractorInfo, TextKind};
use crate::corpus::Dialogue;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_ref_claims: usize,
    pub n_note_claims: usize,
}

/// `2PR / (P + R + epsilon)`. Zero whenever either input is zero.
pub fn f1_score(precision: f64, recall: f64, epsilon: f64) -> f64 {
    2.0 * precision * recall / (precision + recall + epsilon)
}

impl EvalScores {
    /// Builds scores from entailment counts. An empty note has precision 1;
    /// an empty reference set has recall 1.
    pub fn from_counts(
        ref_entailed: usize,
        n_ref_claims: usize,
        note_grounded: usize,
        n_note_claims: usize,
        epsilon: f64,
    ) -> EvalScores {
        let recall = if n_ref_claims == 0 {
            1.0
        } else {
            ref_entailed as f64 / n_ref_claims as f64
        };
        let precision = if n_note_claims == 0 {
            1.0
        } else {
            note_grounded as f64 / n_note_claims as f64
        };
        EvalScores {
            precision,
            recall,
            f1: f1_score(precision, recall, epsilon),
            n_ref_claims,
            n_note_claims,
        }
    }

    pub fn from_rates(precision: f64, recall: f64, epsilon: f64) -> EvalScores {
        EvalScores {
            precision,
            recall,
            f1: f1_score(precision, recall, epsilon),
            n_ref_claims: 0,
            n_note_claims: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub scale: f64,
    pub epsilon: f64,
    /// Gate threshold; rewards for `f1 < gate_tau` are zeroed.
    pub gate_tau: Option<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            scale: 10.0,
            epsilon: 1e-8,
            gate_tau: None,
        }
    }
}

impl RewardConfig {
    pub const DEFAULT_GATE: f64 = 0.6;

    pub fn gated(tau: f64) -> Self {
        Self {
            gate_tau: Some(tau),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "reward scale {} must be positive",
                self.scale
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        if let Some(tau) = self.gate_tau {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::Config(format!(
                    "gate threshold {tau} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn is_gated_out(&self, f1: f64) -> bool {
        self.gate_tau.is_some_and(|tau| f1 < tau)
    }
}

pub fn reward_from_f1(f1: f64, config: &RewardConfig) -> f64 {
    if config.is_gated_out(f1) {
        0.0
    } else {
        config.scale * f1
    }
}

pub fn compute_reward(scores: &EvalScores, config: &RewardConfig) -> f64 {
    reward_from_f1(scores.f1, config)
}

/// Scores a note against the reference claims of its dialogue.
///
/// Recall checks each reference claim against the note; precision checks each
/// claim extracted from the note against the dialogue.
pub fn score_note(
    ref_claims: &ClaimSet,
    note_text: &str,
    dialogue_text: &str,
    extractor: &dyn ClaimExtractor,
    checker: &dyn EntailmentChecker,
    epsilon: f64,
) -> Result<EvalScores> {
    let note_claims = extractor.extract(note_text, TextKind::Note)?;
    let recalled = checker.entails_all(note_text, ref_claims.as_slice())?;
    let grounded = checker.entails_all(dialogue_text, note_claims.as_slice())?;
    Ok(EvalScores::from_counts(
        recalled.iter().filter(|&&e| e).count(),
        ref_claims.len(),
        grounded.iter().filter(|&&e| e).count(),
        note_claims.len(),
        epsilon,
    ))
}

/// Corpus-level aggregates. Published corpus F1 figures are computed either
/// way, so both aggregations are kept.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub n: usize,
    pub precision: f64,
    pub recall: f64,
    /// Mean of per-note F1.
    pub macro_f1: f64,
    /// F1 of the mean precision and mean recall.
    pub f1_of_means: f64,
}

impl CorpusScores {
    pub fn aggregate(scores: &[EvalScores], epsilon: f64) -> CorpusScores {
        let n = scores.len();
        if n == 0 {
            return CorpusScores {
                n,
                precision: 0.0,
                recall: 0.0,
                macro_f1: 0.0,
                f1_of_means: 0.0,
            };
        }
        let mean = |f: fn(&EvalScores) -> f64| scores.iter().map(f).sum::<f64>() / n as f64;
        let precision = mean(|s| s.precision);
        let recall = mean(|s| s.recall);
        CorpusScores {
            n,
            precision,
            recall,
            macro_f1: mean(|s| s.f1),
            f1_of_means: f1_score(precision, recall, epsilon),
        }
    }
}

pub fn dialogue_hash(dialogue: &Dialogue) -> String {
    text_hash(&dialogue.text())
}

/// Hex SHA-256 of `text`.
pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub claims: ClaimSet,
    pub dialogue_hash: String,
    pub extractor: ExtractorInfo,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    dialogue_id: String,
    dialogue_hash: String,
    extractor: ExtractorInfo,
    claims: Vec<String>,
}

/// Reference claims per dialogue, each pinned to the hash of the dialogue
/// text it was extracted from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClaimCache {
    order: Vec<String>,
    entries: HashMap<String, CacheEntry>,
}

impl ClaimCache {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.order
    }

    pub fn entry(&self, id: &str) -> Option<&CacheEntry> {
        self.entries.get(id)
    }

    pub fn insert(&mut self, id: String, entry: CacheEntry) -> Result<()> {
        if self.entries.contains_key(&id) {
            return Err(Error::Integrity(format!(
                "duplicate dialogue id `{id}` in cache"
            )));
        }
        self.order.push(id.clone());
        self.entries.insert(id, entry);
        Ok(())
    }

    /// Cached reference claims for `dialogue`, refusing entries whose stored
    /// hash no longer matches the dialogue text.
    pub fn lookup(&self, dialogue: &Dialogue) -> Result<&ClaimSet> {
        let entry = self
            .entries
            .get(&dialogue.id)
            .ok_or_else(|| Error::CacheMiss(dialogue.id.clone()))?;
        let current = dialogue_hash(dialogue);
        if current != entry.dialogue_hash {
            return Err(Error::Stale {
                id: dialogue.id.clone(),
                stored: entry.dialogue_hash.clone(),
                current,
            });
        }
        Ok(&entry.claims)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for id in &self.order {
            let e = &self.entries[id];
            let record = CacheRecord {
                dialogue_id: id.clone(),
                dialogue_hash: e.dialogue_hash.clone(),
                extractor: e.extractor.clone(),
                claims: e.claims.texts(),
            };
            serde_json::to_writer(&mut out, &record).expect("cache record serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ClaimCache> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cache = ClaimCache::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: CacheRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
            cache.insert(
                record.dialogue_id,
                CacheEntry {
                    claims: record.claims.iter().map(|c| Claim::new(c)).collect(),
                    dialogue_hash: record.dialogue_hash,
                    extractor: record.extractor,
                },
            )?;
        }
        Ok(cache)
    }
}

/// Extracts reference claims for every dialogue (in input order) and writes
/// the cache file.
pub fn build_cache(
    dialogues: &[Dialogue],
    extractor: &dyn ClaimExtractor,
    path: &Path,
) -> Result<ClaimCache> {
    let cache = build_cache_in_memory(dialogues, extractor)?;
    cache.save(path)?;
    Ok(cache)
}

pub fn build_cache_in_memory(
    dialogues: &[Dialogue],
    extractor: &dyn ClaimExtractor,
) -> Result<ClaimCache> {
    let info = extractor.info();
    let mut cache = ClaimCache::default();
    for d in dialogues {
        let text = d.text();
        let claims = extractor.extract(&text, TextKind::Dialogue)?;
        cache.insert(
            d.id.clone(),
            CacheEntry {
                claims,
                dialogue_hash: text_hash(&text),
                extractor: info.clone(),
            },
        )?;
    }
    Ok(cache)
}
