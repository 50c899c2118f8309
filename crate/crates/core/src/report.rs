//! Aggregation of judge verdicts into preference counts, omissions by SOAP
//! section and hallucination-count ECDFs.
//!
//! Omissions are attributed to a section by prefix: an omission string that
//! starts (after leading whitespace) with `S:`, `O:`, `A:` or `P:` counts
//! toward that section, anything else toward `unknown`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::corpus::Section;
use crate::error::{Error, Result};
use crate::judge::{Dimension, JudgeVerdict, NoteFindings, Winner};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WinCounts {
    pub grpo_wins: usize,
    pub base_wins: usize,
    pub ties: usize,
}

impl WinCounts {
    fn tally(&mut self, w: Winner) {
        match w {
            Winner::Grpo => self.grpo_wins += 1,
            Winner::Base => self.base_wins += 1,
            Winner::Tie => self.ties += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.grpo_wins + self.base_wins + self.ties
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PreferenceSummary {
    pub factuality: WinCounts,
    pub completeness: WinCounts,
    pub organization: WinCounts,
    pub brevity: WinCounts,
    pub overall: WinCounts,
}

impl PreferenceSummary {
    pub fn dimension(&self, d: Dimension) -> &WinCounts {
        match d {
            Dimension::Factuality => &self.factuality,
            Dimension::Completeness => &self.completeness,
            Dimension::Organization => &self.organization,
            Dimension::Brevity => &self.brevity,
        }
    }

    fn dimension_mut(&mut self, d: Dimension) -> &mut WinCounts {
        match d {
            Dimension::Factuality => &mut self.factuality,
            Dimension::Completeness => &mut self.completeness,
            Dimension::Organization => &mut self.organization,
            Dimension::Brevity => &mut self.brevity,
        }
    }
}

/// Counts indexed S, O, A, P, unknown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SectionCounts(pub [usize; 5]);

impl SectionCounts {
    pub const LABELS: [&'static str; 5] = ["S", "O", "A", "P", "unknown"];

    pub fn get(&self, section: Option<Section>) -> usize {
        self.0[section.map_or(4, Section::index)]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OmissionBySection {
    pub base: SectionCounts,
    pub grpo: SectionCounts,
}

/// `(count_threshold, fraction of notes with at most that many hallucinations)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Ecdf(pub Vec<(usize, f64)>);

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct HallucinationCdf {
    pub base: Ecdf,
    pub grpo: Ecdf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregates {
    pub n_verdicts: usize,
    pub preferences: PreferenceSummary,
    pub omissions: OmissionBySection,
    pub hallucinations: HallucinationCdf,
}

pub fn omission_section(omission: &str) -> Option<Section> {
    let s = omission.trim_start();
    Section::ALL.into_iter().find(|sec| {
        s.strip_prefix(sec.letter())
            .is_some_and(|rest| rest.starts_with(':'))
    })
}

fn omission_counts(findings: &[&NoteFindings]) -> SectionCounts {
    let mut counts = SectionCounts::default();
    for f in findings {
        for o in &f.omissions {
            counts.0[omission_section(o).map_or(4, Section::index)] += 1;
        }
    }
    counts
}

/// Empirical CDF of `counts` at every integer threshold `0..=max`.
pub fn ecdf(counts: &[usize]) -> Ecdf {
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut hist = vec![0usize; max + 1];
    for &c in counts {
        hist[c] += 1;
    }
    let n = counts.len().max(1) as f64;
    let mut cumulative = 0;
    Ecdf(
        hist.iter()
            .enumerate()
            .map(|(t, &h)| {
                cumulative += h;
                let frac = if cumulative == counts.len() {
                    1.0
                } else {
                    cumulative as f64 / n
                };
                (t, frac)
            })
            .collect(),
    )
}

pub fn aggregate_verdicts(verdicts: &[JudgeVerdict]) -> Result<Aggregates> {
    if verdicts.is_empty() {
        return Err(Error::Usage("no verdicts to aggregate".into()));
    }
    let mut preferences = PreferenceSummary::default();
    for v in verdicts {
        let p = &v.pairwise_preference;
        for d in Dimension::ALL {
            preferences.dimension_mut(d).tally(p.dimensions.get(d));
        }
        preferences.overall.tally(p.overall_winner);
    }
    let base: Vec<&NoteFindings> = verdicts.iter().map(|v| &v.base).collect();
    let grpo: Vec<&NoteFindings> = verdicts.iter().map(|v| &v.grpo).collect();
    let hallucination_counts =
        |f: &[&NoteFindings]| f.iter().map(|n| n.hallucinations.len()).collect::<Vec<_>>();
    Ok(Aggregates {
        n_verdicts: verdicts.len(),
        preferences,
        omissions: OmissionBySection {
            base: omission_counts(&base),
            grpo: omission_counts(&grpo),
        },
        hallucinations: HallucinationCdf {
            base: ecdf(&hallucination_counts(&base)),
            grpo: ecdf(&hallucination_counts(&grpo)),
        },
    })
}

pub const PREFERENCES_FILE: &str = "preferences.tsv";
pub const OMISSIONS_FILE: &str = "omissions_by_section.tsv";
pub const CDF_FILE: &str = "hallucination_cdf.tsv";

fn tsv<const N: usize>(header: [&str; N], rows: Vec<[String; N]>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Table bytes keyed by file name, in a fixed order.
pub fn render_tables(agg: &Aggregates) -> Vec<(&'static str, Vec<u8>)> {
    let p = &agg.preferences;
    let pref_rows: Vec<[String; 4]> = Dimension::ALL
        .into_iter()
        .map(|d| (d.name(), *p.dimension(d)))
        .chain(std::iter::once(("overall", p.overall)))
        .map(|(name, c)| {
            [
                name.to_string(),
                c.grpo_wins.to_string(),
                c.base_wins.to_string(),
                c.ties.to_string(),
            ]
        })
        .collect();

    let om = &agg.omissions;
    let om_rows = (0..5)
        .map(|i| {
            [
                SectionCounts::LABELS[i].to_string(),
                om.base.0[i].to_string(),
                om.grpo.0[i].to_string(),
            ]
        })
        .collect();

    let cdf_rows = [
        ("base", &agg.hallucinations.base),
        ("grpo", &agg.hallucinations.grpo),
    ]
    .into_iter()
    .flat_map(|(system, e)| {
        e.0.iter()
            .map(move |(t, f)| [system.to_string(), t.to_string(), format!("{f:.6}")])
    })
    .collect();

    vec![
        (
            PREFERENCES_FILE,
            tsv(["dimension", "grpo_wins", "base_wins", "ties"], pref_rows),
        ),
        (OMISSIONS_FILE, tsv(["section", "base", "grpo"], om_rows)),
        (
            CDF_FILE,
            tsv(
                ["system", "count_threshold", "cumulative_fraction"],
                cdf_rows,
            ),
        ),
    ]
}

pub fn export_tables(agg: &Aggregates, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    render_tables(agg)
        .into_iter()
        .map(|(name, bytes)| {
            let path = out_dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
