//! Line-delimited note and verdict files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::judge::JudgeVerdict;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub dialogue_id: String,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub dialogue_id: String,
    pub verdict: JudgeVerdict,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.write_all(b"\n").expect("in-memory write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Pairs dialogues with notes by position; ids must agree.
pub fn pair_notes<'a, 'b>(
    dialogues: &[&'a Dialogue],
    notes: &'b [NoteRecord],
    label: &str,
) -> Result<Vec<(&'a Dialogue, &'b NoteRecord)>> {
    if notes.len() != dialogues.len() {
        return Err(Error::Usage(format!(
            "{label} has {} notes but the dialogue set has {} dialogues",
            notes.len(),
            dialogues.len()
        )));
    }
    dialogues
        .iter()
        .zip(notes)
        .map(|(&d, n)| {
            if d.id != n.dialogue_id {
                Err(Error::Usage(format!(
                    "{label}: note for `{}` is paired with dialogue `{}`",
                    n.dialogue_id, d.id
                )))
            } else {
                Ok((d, n))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Turn};

    fn dialogue(id: &str) -> Dialogue {
        Dialogue {
            id: id.into(),
            split: None,
            turns: vec![Turn {
                speaker: Speaker::Doctor,
                text: "Hello.".into(),
            }],
            truth_fact_ids: None,
        }
    }

    #[test]
    fn pairing_checks_length_and_ids() {
        let (a, b) = (dialogue("a"), dialogue("b"));
        let ds = [&a, &b];
        let notes = vec![NoteRecord {
            dialogue_id: "a".into(),
            note: String::new(),
        }];
        let err = pair_notes(&ds, &notes, "notes.jsonl").unwrap_err();
        assert!(err
            .to_string()
            .contains("1 notes but the dialogue set has 2"));

        let swapped = vec![
            NoteRecord {
                dialogue_id: "b".into(),
                note: String::new(),
            },
            NoteRecord {
                dialogue_id: "a".into(),
                note: String::new(),
            },
        ];
        assert!(matches!(
            pair_notes(&ds, &swapped, "x"),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.jsonl");
        let notes = vec![NoteRecord {
            dialogue_id: "a".into(),
            note: "S (Subjective):\n".into(),
        }];
        write_jsonl(&path, &notes).unwrap();
        assert_eq!(read_jsonl::<NoteRecord>(&path).unwrap(), notes);
    }
}
