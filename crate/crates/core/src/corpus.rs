//! Synthetic dialogue corpora and dialogue file loading.
//!
//! A corpus is a vocabulary of atomic fact tuples plus a list of
//! doctor/patient dialogues. Each synthetic dialogue mentions a subset of the
//! non-distractor vocabulary, one fact per templated sentence, interleaved
//! with filler turns that carry no vocabulary tokens.
//!
//! # Determinism
//!
//! Generation draws from a single `ChaCha8Rng` stream (the portable ChaCha
//! stream cipher with 8 rounds, seeded through `SeedableRng::seed_from_u64`).
//! Draw order:
//!
//! 1. For each vocabulary index `i` in order: section, subject, attribute
//!    stem, value (each a uniform index draw).
//! 2. One shuffle of `0..vocabulary_size`; the first
//!    `round(distractor_fraction * vocabulary_size)` indices become
//!    distractors.
//! 3. For each dialogue in order: fact count in `facts_per_dialogue`, a
//!    sample of that many pool indices, a mention count in `1..=2` per truth
//!    fact, a filler count, one filler pick per filler slot, then one
//!    shuffle of the fact and filler turns behind the opening greeting.
//! 4. One shuffle of the dialogue indices for the train/test split.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::claims::{Claim, ClaimSet};
use crate::error::{Error, Result};

/// Share of dialogues assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Section {
    S,
    O,
    A,
    P,
}

impl Section {
    pub const ALL: [Section; 4] = [Section::S, Section::O, Section::A, Section::P];

    pub fn index(self) -> usize {
        match self {
            Section::S => 0,
            Section::O => 1,
            Section::A => 2,
            Section::P => 3,
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            Section::S => "S",
            Section::O => "O",
            Section::A => "A",
            Section::P => "P",
        }
    }

    /// Note header line, exactly as the generation prompt requires.
    pub fn header(self) -> &'static str {
        match self {
            Section::S => "S (Subjective):",
            Section::O => "O (Objective):",
            Section::A => "A (Assessment):",
            Section::P => "P (Plan):",
        }
    }

    /// The template verb that marks a fact sentence as belonging to this section.
    pub fn verb(self) -> &'static str {
        match self {
            Section::S => "reports",
            Section::O => "shows",
            Section::A => "suggests",
            Section::P => "includes",
        }
    }

    pub fn from_verb(verb: &str) -> Option<Section> {
        Section::ALL.into_iter().find(|s| s.verb() == verb)
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

impl FromStr for Section {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "S" => Ok(Section::S),
            "O" => Ok(Section::O),
            "A" => Ok(Section::A),
            "P" => Ok(Section::P),
            other => Err(format!("unknown SOAP section `{other}`")),
        }
    }
}

/// An atomic clinical fact.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FactTuple {
    pub subject: String,
    pub attribute: String,
    pub value: String,
    pub section: Section,
}

impl FactTuple {
    /// The sentence used for this fact in dialogues and notes, e.g.
    /// `Patient reports cough_004 persistent.`
    pub fn sentence(&self) -> String {
        let mut subject = self.subject.clone();
        if let Some(first) = subject.get_mut(0..1) {
            first.make_ascii_uppercase();
        }
        format!(
            "{subject} {} {} {}.",
            self.section.verb(),
            self.attribute,
            self.value
        )
    }

    /// Canonical claim text for this fact.
    pub fn claim_text(&self) -> String {
        format!(
            "{} {} {} {}",
            self.subject,
            self.section.verb(),
            self.attribute,
            self.value
        )
    }

    pub fn to_claim(&self) -> Claim {
        Claim::from_tuple(self.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabEntry {
    pub id: String,
    pub tuple: FactTuple,
    pub distractor: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Doctor,
    Patient,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Doctor => "Doctor",
            Speaker::Patient => "Patient",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train|test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_fact_ids: Option<Vec<String>>,
}

impl Dialogue {
    /// Flattened transcript, one `Speaker: text` line per turn.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for turn in &self.turns {
            out.push_str(turn.speaker.label());
            out.push_str(": ");
            out.push_str(&turn.text);
            out.push('\n');
        }
        out
    }

    pub fn is_synthetic(&self) -> bool {
        self.truth_fact_ids.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_dialogues: usize,
    pub facts_min: usize,
    pub facts_max: usize,
    pub vocabulary_size: usize,
    pub distractor_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_dialogues: 200,
            facts_min: 4,
            facts_max: 8,
            vocabulary_size: 60,
            distractor_fraction: 0.4,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn facts_per_dialogue(&self) -> RangeInclusive<usize> {
        self.facts_min..=self.facts_max
    }

    pub fn n_distractors(&self) -> usize {
        (self.distractor_fraction * self.vocabulary_size as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dialogues == 0 {
            return Err(Error::Config("n_dialogues must be positive".into()));
        }
        if self.vocabulary_size == 0 {
            return Err(Error::Config("vocabulary_size must be positive".into()));
        }
        if self.facts_min > self.facts_max {
            return Err(Error::Config(format!(
                "empty facts_per_dialogue range {}..={}",
                self.facts_min, self.facts_max
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_fraction) {
            return Err(Error::Config(format!(
                "distractor_fraction {} outside [0, 1]",
                self.distractor_fraction
            )));
        }
        if self.facts_max > self.vocabulary_size {
            return Err(Error::Config(format!(
                "facts_per_dialogue max {} exceeds vocabulary_size {}",
                self.facts_max, self.vocabulary_size
            )));
        }
        let pool = self.vocabulary_size - self.n_distractors();
        if self.facts_max > pool {
            return Err(Error::Config(format!(
                "facts_per_dialogue max {} exceeds the {pool} non-distractor facts",
                self.facts_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocabulary: Vec<VocabEntry>,
    pub dialogues: Vec<Dialogue>,
}

const SUBJECTS: [&[&str]; 4] = [
    &["patient", "caregiver"],
    &["exam", "vitals", "labs"],
    &["assessment", "impression"],
    &["plan", "clinician"],
];

const STEMS: [&[&str]; 4] = [
    &[
        "cough",
        "fever",
        "headache",
        "nausea",
        "fatigue",
        "dizziness",
        "pain",
        "insomnia",
    ],
    &[
        "rash",
        "wheeze",
        "murmur",
        "edema",
        "tachycardia",
        "tenderness",
        "glucose",
        "pressure",
    ],
    &[
        "asthma",
        "migraine",
        "gastritis",
        "anemia",
        "bronchitis",
        "hypertension",
        "sinusitis",
    ],
    &[
        "ibuprofen",
        "albuterol",
        "referral",
        "xray",
        "followup",
        "bloodwork",
        "metformin",
    ],
];

const VALUES: [&[&str]; 4] = [
    &[
        "mild",
        "severe",
        "intermittent",
        "persistent",
        "worsening",
        "new",
    ],
    &[
        "present",
        "absent",
        "elevated",
        "normal",
        "bilateral",
        "low",
    ],
    &[
        "likely",
        "possible",
        "confirmed",
        "chronic",
        "acute",
        "resolved",
    ],
    &[
        "daily",
        "weekly",
        "urgent",
        "routine",
        "scheduled",
        "deferred",
    ],
];

const FILLERS: [(Speaker, &str); 10] = [
    (Speaker::Doctor, "How have you been since the last visit?"),
    (Speaker::Patient, "Okay I guess, it comes and goes."),
    (Speaker::Doctor, "Let me take a look."),
    (Speaker::Patient, "Thanks, doctor."),
    (Speaker::Doctor, "Any other questions for me today?"),
    (Speaker::Patient, "I think that covers it."),
    (Speaker::Doctor, "Alright, go ahead and sit up."),
    (Speaker::Patient, "Sure."),
    (Speaker::Doctor, "We will go over everything together."),
    (Speaker::Patient, "That sounds good."),
];

const GREETING: (Speaker, &str) = (Speaker::Doctor, "Good morning, what brings you in today?");

fn fact_id(index: usize, width: usize) -> String {
    format!("f{index:0width$}")
}

fn id_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(3)
}

/// Generates a corpus; deterministic in `spec` (see module docs for draw order).
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = id_width(spec.vocabulary_size);

    let mut vocabulary = Vec::with_capacity(spec.vocabulary_size);
    for i in 0..spec.vocabulary_size {
        let section = Section::ALL[rng.random_range(0..4)];
        let s = section.index();
        let subject = SUBJECTS[s][rng.random_range(0..SUBJECTS[s].len())];
        let stem = STEMS[s][rng.random_range(0..STEMS[s].len())];
        let value = VALUES[s][rng.random_range(0..VALUES[s].len())];
        vocabulary.push(VocabEntry {
            id: fact_id(i, width),
            tuple: FactTuple {
                subject: subject.to_string(),
                attribute: format!("{stem}_{i:0width$}"),
                value: value.to_string(),
                section,
            },
            distractor: false,
        });
    }

    let mut order: Vec<usize> = (0..spec.vocabulary_size).collect();
    order.shuffle(&mut rng);
    let n_distractors = spec.n_distractors();
    for &i in &order[..n_distractors] {
        vocabulary[i].distractor = true;
    }
    let pool: Vec<usize> = (0..spec.vocabulary_size)
        .filter(|&i| !vocabulary[i].distractor)
        .collect();

    let dialogue_width = id_width(spec.n_dialogues).max(4);
    let mut dialogues = Vec::with_capacity(spec.n_dialogues);
    for d in 0..spec.n_dialogues {
        let n_facts = rng.random_range(spec.facts_per_dialogue());
        let mut truth: Vec<usize> = index::sample(&mut rng, pool.len(), n_facts)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        truth.sort_unstable();

        let mut body: Vec<Turn> = Vec::new();
        for &f in &truth {
            let mentions = rng.random_range(1..=2);
            let tuple = &vocabulary[f].tuple;
            for m in 0..mentions {
                let speaker = match (tuple.section, m) {
                    (Section::S, 0) => Speaker::Patient,
                    _ => Speaker::Doctor,
                };
                body.push(Turn {
                    speaker,
                    text: tuple.sentence(),
                });
            }
        }
        let n_fillers = rng.random_range(2..=4usize);
        for _ in 0..n_fillers {
            let (speaker, text) = *FILLERS.choose(&mut rng).expect("filler list is nonempty");
            body.push(Turn {
                speaker,
                text: text.to_string(),
            });
        }
        body.shuffle(&mut rng);

        let mut turns = Vec::with_capacity(body.len() + 1);
        turns.push(Turn {
            speaker: GREETING.0,
            text: GREETING.1.to_string(),
        });
        turns.extend(body);

        dialogues.push(Dialogue {
            id: format!("d{d:0dialogue_width$}"),
            split: None,
            turns,
            truth_fact_ids: Some(truth.iter().map(|&f| vocabulary[f].id.clone()).collect()),
        });
    }

    let mut split_order: Vec<usize> = (0..spec.n_dialogues).collect();
    split_order.shuffle(&mut rng);
    let n_train = (TRAIN_FRACTION * spec.n_dialogues as f64).round() as usize;
    for (rank, &d) in split_order.iter().enumerate() {
        dialogues[d].split = Some(if rank < n_train {
            Split::Train
        } else {
            Split::Test
        });
    }

    Ok(Corpus {
        vocabulary,
        dialogues,
    })
}

/// Sidecar vocabulary path: `<dir>/<stem>.vocab`.
pub fn vocab_path(corpus_path: &Path) -> PathBuf {
    corpus_path.with_extension("vocab")
}

impl Corpus {
    pub fn fact(&self, id: &str) -> Option<&VocabEntry> {
        self.vocabulary.iter().find(|v| v.id == id)
    }

    pub fn fact_index(&self) -> HashMap<&str, usize> {
        self.vocabulary
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.as_str(), i))
            .collect()
    }

    pub fn dialogue(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }

    pub fn split(&self, split: Split) -> Vec<&Dialogue> {
        self.dialogues
            .iter()
            .filter(|d| d.split == Some(split))
            .collect()
    }

    pub fn distractors(&self) -> impl Iterator<Item = &VocabEntry> {
        self.vocabulary.iter().filter(|v| v.distractor)
    }

    /// Serialized corpus records, one JSON object per line.
    pub fn dialogues_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for d in &self.dialogues {
            serde_json::to_writer(&mut out, d).expect("dialogue serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn vocab_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for v in &self.vocabulary {
            let t = &v.tuple;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                v.id,
                t.subject,
                t.attribute,
                t.value,
                t.section,
                u8::from(v.distractor)
            ));
        }
        out.into_bytes()
    }

    /// Writes the corpus file and its `.vocab` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.dialogues_bytes()).map_err(|e| Error::io(path, e))?;
        let vocab = vocab_path(path);
        fs::write(&vocab, self.vocab_bytes()).map_err(|e| Error::io(&vocab, e))?;
        Ok(())
    }

    /// Loads a corpus file plus its `.vocab` sidecar and checks that every
    /// truth fact id resolves.
    pub fn load(path: &Path) -> Result<Corpus> {
        let dialogues = load_dialogues(path)?;
        let vocabulary = load_vocabulary(&vocab_path(path))?;
        let corpus = Corpus {
            vocabulary,
            dialogues,
        };
        let known = corpus.fact_index();
        for d in &corpus.dialogues {
            for id in d.truth_fact_ids.iter().flatten() {
                if !known.contains_key(id.as_str()) {
                    return Err(Error::Integrity(format!(
                        "dialogue `{}` references unknown fact `{id}`",
                        d.id
                    )));
                }
            }
        }
        Ok(corpus)
    }
}

/// Reads a line-delimited dialogue file in file order. Blank lines are skipped.
pub fn load_dialogues(path: &Path) -> Result<Vec<Dialogue>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let dialogue: Dialogue = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if dialogue.turns.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("dialogue `{}` has no turns", dialogue.id),
            });
        }
        if !seen.insert(dialogue.id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate dialogue id `{}` at {}:{}",
                dialogue.id,
                path.display(),
                n + 1
            )));
        }
        out.push(dialogue);
    }
    Ok(out)
}

pub fn load_vocabulary(path: &Path) -> Result<Vec<VocabEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 || fields[..4].iter().any(|f| f.is_empty()) {
            return Err(parse_err(format!(
                "expected 6 tab-separated nonempty fields, found {}",
                fields.len()
            )));
        }
        let section = fields[4].parse::<Section>().map_err(parse_err)?;
        let distractor = match fields[5] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(format!("distractor flag `{other}` is not 0|1"))),
        };
        out.push(VocabEntry {
            id: fields[0].to_string(),
            tuple: FactTuple {
                subject: fields[1].to_string(),
                attribute: fields[2].to_string(),
                value: fields[3].to_string(),
                section,
            },
            distractor,
        });
    }
    Ok(out)
}

/// Writes dialogues in the corpus line format.
pub fn save_dialogues(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in dialogues {
        serde_json::to_writer(&mut w, d).expect("dialogue serializes");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reference claims straight from a synthetic dialogue's truth facts.
///
/// Independent of text extraction, so it serves as the oracle for it.
pub fn ground_truth_claims(dialogue: &Dialogue, corpus: &Corpus) -> Result<ClaimSet> {
    let ids = dialogue.truth_fact_ids.as_ref().ok_or_else(|| {
        Error::Unsupported(format!(
            "dialogue `{}` has no truth facts (external data)",
            dialogue.id
        ))
    })?;
    let index = corpus.fact_index();
    let mut set = ClaimSet::new();
    for id in ids {
        let &i = index.get(id.as_str()).ok_or_else(|| {
            Error::Integrity(format!(
                "dialogue `{}` references unknown fact `{id}`",
                dialogue.id
            ))
        })?;
        set.insert(corpus.vocabulary[i].tuple.to_claim());
    }
    Ok(set)
}

/// Ids of vocabulary facts whose sentence appears in `text`.
pub fn mentioned_fact_ids(text: &str, corpus: &Corpus) -> BTreeSet<String> {
    corpus
        .vocabulary
        .iter()
        .filter(|v| text.contains(&v.tuple.sentence()))
        .map(|v| v.id.clone())
        .collect()
}
