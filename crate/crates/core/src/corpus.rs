//! Report corpora: JSONL ingest, sentence segmentation, tokenization,
//! split assignment and the construction sample.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Abbreviations whose trailing period never ends a sentence.
/// Version 1 of the list; matching is case-insensitive.
pub const ABBREVIATIONS: [&str; 6] = ["e.g.", "i.e.", "vs.", "dr.", "no.", "fig."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    #[default]
    Unassigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    IuXray,
    MimicCxr,
    Other,
}

/// One image set paired with its ground-truth report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub image_refs: Vec<String>,
    pub report_text: String,
    pub source: Source,
    #[serde(default)]
    pub split: Split,
}

impl Report {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.image_refs.is_empty() {
            return Err(format!("report {}: image_refs is empty", self.id));
        }
        if self.report_text.trim().is_empty() {
            return Err(format!("report {}: report_text is empty", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sentence {
    pub report_id: String,
    pub index: usize,
    pub text: String,
}

/// Collapse whitespace runs to single spaces and trim.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_abbreviation(word: &str) -> bool {
    let word = word.trim_start_matches(|c: char| !c.is_alphanumeric());
    ABBREVIATIONS.iter().any(|a| a.eq_ignore_ascii_case(word))
}

/// Split report text into sentences. Boundaries fall after `.`, `!` or `?`
/// when followed by whitespace or end of text, except for periods closing
/// an entry of [`ABBREVIATIONS`].
pub fn segment_text(report_text: &str) -> Vec<String> {
    let text = normalize_whitespace(report_text);
    let mut out = Vec::new();
    let mut start = 0;
    let mut word_start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == ' ' {
            word_start = i + 1;
            continue;
        }
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let at_boundary = chars.peek().is_none_or(|&(_, n)| n == ' ');
        if !at_boundary {
            continue;
        }
        let end = i + c.len_utf8();
        if c == '.' && is_abbreviation(&text[word_start..end]) {
            continue;
        }
        out.push(text[start..end].trim().to_string());
        start = end;
    }
    if start < text.len() {
        let rest = text[start..].trim();
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
    }
    out
}

pub fn segment_sentences(report_id: &str, report_text: &str) -> Vec<Sentence> {
    segment_text(report_text)
        .into_iter()
        .enumerate()
        .map(|(index, text)| Sentence {
            report_id: report_id.to_string(),
            index,
            text,
        })
        .collect()
}

/// Lowercase, split on whitespace, and emit every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    for chunk in lower.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// How a corpus is partitioned into train/validation/test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitSpec {
    Ratio { ratios: [Ratio<u64>; 3], seed: u64 },
    OfficialFile { file_path: PathBuf },
}

impl std::str::FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iu_xray" => Ok(Source::IuXray),
            "mimic_cxr" => Ok(Source::MimicCxr),
            "other" => Ok(Source::Other),
            other => Err(Error::Config(format!(
                "unknown source {other:?} (expected iu_xray, mimic_cxr or other)"
            ))),
        }
    }
}

impl SplitSpec {
    pub fn ratio(ratios: [Ratio<u64>; 3], seed: u64) -> Result<Self> {
        let sum = ratios[0] + ratios[1] + ratios[2];
        if sum != Ratio::from_integer(1) {
            return Err(Error::Config(format!(
                "split ratios {}, {}, {} sum to {sum}, not 1",
                ratios[0], ratios[1], ratios[2]
            )));
        }
        Ok(SplitSpec::Ratio { ratios, seed })
    }

    /// Ratios from integer weights, e.g. `[7, 1, 2]`.
    pub fn from_weights(weights: [u64; 3], seed: u64) -> Result<Self> {
        let total: u64 = weights.iter().sum();
        if total == 0 {
            return Err(Error::Config("split weights are all zero".into()));
        }
        Self::ratio(weights.map(|w| Ratio::new(w, total)), seed)
    }

    /// Parses `"7:1:2"` (weights) or `"7/10,1/10,1/5"` (rationals).
    pub fn parse_ratios(text: &str, seed: u64) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse split ratios {text:?}"));
        if text.contains(':') {
            let parts: Vec<u64> = text
                .split(':')
                .map(|p| p.trim().parse::<u64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let weights: [u64; 3] = parts.try_into().map_err(|_| bad())?;
            return Self::from_weights(weights, seed);
        }
        let parts: Vec<Ratio<u64>> = text
            .split(',')
            .map(|p| p.trim().parse::<Ratio<u64>>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let ratios: [Ratio<u64>; 3] = parts.try_into().map_err(|_| bad())?;
        Self::ratio(ratios, seed)
    }
}

/// Official split listing: `{"train":[ids],"validation":[ids],"test":[ids]}`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OfficialSplit {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub validation: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl OfficialSplit {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

/// Floor count of `n * ratio`.
fn floor_share(n: usize, ratio: Ratio<u64>) -> usize {
    ((n as u128 * *ratio.numer() as u128) / *ratio.denom() as u128) as usize
}

/// Split sizes `(train, validation, test)` for `n` reports: floor counts for
/// validation and test, remainder to train.
pub fn split_sizes(n: usize, ratios: &[Ratio<u64>; 3]) -> (usize, usize, usize) {
    let validation = floor_share(n, ratios[1]);
    let test = floor_share(n, ratios[2]);
    (n - validation - test, validation, test)
}

pub fn assign_splits(corpus: &[Report], spec: &SplitSpec) -> Result<Vec<Report>> {
    match spec {
        SplitSpec::Ratio { ratios, seed } => {
            let (train, validation, _) = split_sizes(corpus.len(), ratios);
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            order.shuffle(&mut rng_for(*seed, "split", ""));
            let mut out = corpus.to_vec();
            for (rank, &pos) in order.iter().enumerate() {
                out[pos].split = if rank < train {
                    Split::Train
                } else if rank < train + validation {
                    Split::Validation
                } else {
                    Split::Test
                };
            }
            Ok(out)
        }
        SplitSpec::OfficialFile { file_path } => {
            let listing = OfficialSplit::load(file_path)?;
            apply_official_split(corpus, &listing)
        }
    }
}

pub fn apply_official_split(corpus: &[Report], listing: &OfficialSplit) -> Result<Vec<Report>> {
    let index: HashMap<&str, usize> = corpus.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut out = corpus.to_vec();
    for r in &mut out {
        r.split = Split::Unassigned;
    }
    let mut seen = HashSet::new();
    for (split, ids) in [
        (Split::Train, &listing.train),
        (Split::Validation, &listing.validation),
        (Split::Test, &listing.test),
    ] {
        for id in ids {
            let &pos = index
                .get(id.as_str())
                .ok_or_else(|| Error::Schema(format!("official split references unknown id {id}")))?;
            if !seen.insert(id.as_str()) {
                return Err(Error::Schema(format!("official split lists id {id} more than once")));
            }
            out[pos].split = split;
        }
    }
    Ok(out)
}

fn shuffled_train<'a>(corpus: &'a [Report], seed: u64, stream: &str) -> Vec<&'a Report> {
    let mut train: Vec<&Report> = corpus.iter().filter(|r| r.split == Split::Train).collect();
    train.shuffle(&mut rng_for(seed, "construction-sample", stream));
    train
}

/// Seeded sample without replacement from the train splits of both corpora,
/// IU-Xray block first.
pub fn draw_construction_sample(
    corpus_iu: &[Report],
    corpus_mimic: &[Report],
    n_iu: usize,
    n_mimic: usize,
    seed: u64,
) -> Result<Vec<Report>> {
    let iu = shuffled_train(corpus_iu, seed, "iu_xray");
    let mimic = shuffled_train(corpus_mimic, seed, "mimic_cxr");
    if n_iu > iu.len() || n_mimic > mimic.len() {
        return Err(Error::Config(format!(
            "construction sample requests {n_iu} IU-Xray + {n_mimic} MIMIC-CXR reports, \
             but only {} + {} train reports are available",
            iu.len(),
            mimic.len()
        )));
    }
    Ok(iu[..n_iu]
        .iter()
        .chain(&mimic[..n_mimic])
        .map(|r| (*r).clone())
        .collect())
}

/// Reads a corpus JSONL file and checks report invariants.
pub fn load_corpus(path: &Path) -> Result<Vec<Report>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text).map_err(|e| match e {
        Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_corpus(text: &str) -> Result<Vec<Report>> {
    let mut reports = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let report: Report =
            serde_json::from_str(line).map_err(|e| Error::Schema(format!("line {}: {e}", lineno + 1)))?;
        report
            .validate()
            .map_err(|e| Error::Schema(format!("line {}: {e}", lineno + 1)))?;
        if !ids.insert(report.id.clone()) {
            return Err(Error::Schema(format!(
                "line {}: duplicate report id {}",
                lineno + 1,
                report.id
            )));
        }
        reports.push(report);
    }
    Ok(reports)
}

pub fn split_counts(corpus: &[Report]) -> BTreeMap<Split, usize> {
    let mut counts = BTreeMap::new();
    for r in corpus {
        *counts.entry(r.split).or_insert(0) += 1;
    }
    counts
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}
