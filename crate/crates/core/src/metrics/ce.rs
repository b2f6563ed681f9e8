use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::keyword::{mention, Mention};
use crate::corpus::segment_text;
use crate::error::{Error, Result};

/// Bumped whenever [`OBSERVATIONS`] changes order or content.
pub const OBSERVATION_LIST_VERSION: u32 = 1;

pub const OBSERVATIONS: [&str; 14] = [
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
    "No Finding",
];

const SUPPORT_DEVICES: usize = 12;
const NO_FINDING: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    Uncertain,
    #[default]
    Absent,
}

/// One label per entry of [`OBSERVATIONS`], in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct ObservationLabels(pub [Label; 14]);

impl ObservationLabels {
    pub fn get(&self, observation: &str) -> Option<Label> {
        OBSERVATIONS
            .iter()
            .position(|o| o.eq_ignore_ascii_case(observation))
            .map(|i| self.0[i])
    }

    pub fn with(mut self, observation: &str, label: Label) -> Self {
        let i = OBSERVATIONS
            .iter()
            .position(|o| o.eq_ignore_ascii_case(observation))
            .unwrap_or_else(|| panic!("unknown observation {observation}"));
        self.0[i] = label;
        self
    }
}

/// How `uncertain` labels count for CE scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertainPolicy {
    #[default]
    AsNegative,
    AsPositive,
}

impl std::str::FromStr for UncertainPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_negative" | "negative" => Ok(UncertainPolicy::AsNegative),
            "as_positive" | "positive" => Ok(UncertainPolicy::AsPositive),
            other => Err(Error::Config(format!(
                "unknown uncertain policy {other:?} (expected as_negative or as_positive)"
            ))),
        }
    }
}

impl UncertainPolicy {
    fn is_positive(self, label: Label) -> bool {
        match label {
            Label::Positive => true,
            Label::Uncertain => self == UncertainPolicy::AsPositive,
            Label::Negative | Label::Absent => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeScoreSet<T> {
    pub precision: T,
    pub recall: T,
    pub f_score: T,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio<T: Float>(num: u64, den: u64) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::from(num).unwrap() / T::from(den).unwrap()
    }
}

/// Micro-averaged precision/recall/F over every (report, observation) cell,
/// with `positive` as the positive class and uncertain counted as negative.
pub fn ce_scores<T: Float>(predicted: &[ObservationLabels], gold: &[ObservationLabels]) -> Result<CeScoreSet<T>> {
    ce_scores_with(predicted, gold, UncertainPolicy::AsNegative)
}

pub fn ce_scores_with<T: Float>(
    predicted: &[ObservationLabels],
    gold: &[ObservationLabels],
    policy: UncertainPolicy,
) -> Result<CeScoreSet<T>> {
    if predicted.len() != gold.len() {
        return Err(Error::Schema(format!(
            "CE label count mismatch: {} predicted vs {} gold",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, g) in predicted.iter().zip(gold) {
        for (&pl, &gl) in p.0.iter().zip(&g.0) {
            match (policy.is_positive(pl), policy.is_positive(gl)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let precision: T = ratio(tp, tp + fp);
    let recall: T = ratio(tp, tp + fn_);
    let f_score = if precision + recall > T::zero() {
        T::from(2.0).unwrap() * precision * recall / (precision + recall)
    } else {
        T::zero()
    };
    Ok(CeScoreSet {
        precision,
        recall,
        f_score,
        tp,
        fp,
        fn_,
    })
}

/// Phrases that signal each observation (index-aligned with
/// [`OBSERVATIONS`]; "No Finding" is derived).
const RULES: [&[&str]; 13] = [
    &[
        "enlarged cardiomediastinum",
        "widened mediastinum",
        "mediastinal widening",
        "enlarged cardiomediastinal silhouette",
    ],
    &[
        "cardiomegaly",
        "enlarged heart",
        "heart is enlarged",
        "enlarged cardiac silhouette",
        "cardiac enlargement",
    ],
    &[
        "opacity",
        "opacities",
        "opacification",
        "infiltrate",
        "airspace disease",
    ],
    &["nodule", "mass", "lesion"],
    &["edema", "vascular congestion"],
    &["consolidation"],
    &["pneumonia"],
    &["atelectasis", "atelectatic"],
    &["pneumothorax", "pneumothoraces"],
    &["pleural effusion", "effusion"],
    &["pleural thickening", "pleural scarring", "fibrothorax"],
    &["fracture"],
    &[
        "tube",
        "catheter",
        "pacemaker",
        "picc",
        "sternotomy wire",
        "support device",
        "stent",
        "port",
    ],
];

/// Rule-table approximation of a report labeler: keyword spotting with
/// clause-scoped negation. It is a fallback, not a reproduction of any
/// neural labeler. Only positive, negative and absent are produced.
pub fn keyword_label(report_text: &str) -> ObservationLabels {
    let mut labels = [Label::Absent; 14];
    let sentences = segment_text(report_text);
    for (i, phrases) in RULES.iter().enumerate() {
        for sentence in &sentences {
            for phrase in phrases.iter() {
                match mention(sentence, phrase) {
                    Some(Mention::Positive) => labels[i] = Label::Positive,
                    Some(Mention::Negative) if labels[i] == Label::Absent => labels[i] = Label::Negative,
                    _ => {}
                }
            }
        }
    }
    let any_finding = labels[..NO_FINDING]
        .iter()
        .enumerate()
        .any(|(i, &l)| i != SUPPORT_DEVICES && l == Label::Positive);
    if !sentences.is_empty() && !any_finding {
        labels[NO_FINDING] = Label::Positive;
    }
    ObservationLabels(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_examples() {
        let l = keyword_label("There is a large pleural effusion.");
        assert_eq!(l.get("Pleural Effusion"), Some(Label::Positive));
        assert_eq!(l.get("No Finding"), Some(Label::Absent));
        let l = keyword_label("No pneumothorax.");
        assert_eq!(l.get("Pneumothorax"), Some(Label::Negative));
        assert_eq!(l.get("No Finding"), Some(Label::Positive));
        assert_eq!(keyword_label(""), ObservationLabels([Label::Absent; 14]));
    }

    #[test]
    fn positive_outranks_negative_across_sentences() {
        let l = keyword_label("No effusion on the left. Small right pleural effusion.");
        assert_eq!(l.get("Pleural Effusion"), Some(Label::Positive));
        let l = keyword_label("Endotracheal tube in place. Lungs are clear.");
        assert_eq!(l.get("Support Devices"), Some(Label::Positive));
        assert_eq!(l.get("No Finding"), Some(Label::Positive));
    }

    #[test]
    fn ce_worked_example() {
        let gold = ObservationLabels::default().with("Edema", Label::Positive);
        let pred = gold.with("Cardiomegaly", Label::Positive);
        let s: CeScoreSet<f64> = ce_scores(&[pred], &[gold]).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (1, 1, 0));
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f_score - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ce_zero_and_identity() {
        let none = ObservationLabels::default();
        let s: CeScoreSet<f64> = ce_scores(&[none], &[none]).unwrap();
        assert_eq!((s.precision, s.recall, s.f_score), (0.0, 0.0, 0.0));
        let one = none.with("Fracture", Label::Positive);
        let s: CeScoreSet<f32> = ce_scores(&[one], &[one]).unwrap();
        assert_eq!((s.precision, s.recall, s.f_score), (1.0, 1.0, 1.0));
        assert!(ce_scores::<f64>(&[one], &[]).is_err());
    }

    #[test]
    fn uncertain_policy() {
        let g = ObservationLabels::default().with("Edema", Label::Uncertain);
        let p = ObservationLabels::default().with("Edema", Label::Positive);
        let strict: CeScoreSet<f64> = ce_scores(&[p], &[g]).unwrap();
        assert_eq!((strict.tp, strict.fp), (0, 1));
        let lenient: CeScoreSet<f64> = ce_scores_with(&[p], &[g], UncertainPolicy::AsPositive).unwrap();
        assert_eq!(lenient.tp, 1);
    }

    #[test]
    fn labels_serialize_as_strings() {
        let l = ObservationLabels::default().with("Edema", Label::Positive);
        let json = serde_json::to_string(&l).unwrap();
        assert!(json.starts_with("[\"absent\""));
        assert!(serde_json::from_str::<ObservationLabels>("[\"absent\"]").is_err());
    }
}
