//! Report-generation evaluation: corpus BLEU, METEOR, ROUGE-L and
//! clinical-efficacy scores over 14-observation label vectors.
//!
//! Every score is generic over the float type; `f64` aliases live at the
//! crate root.

mod ce;
pub mod keyword;
mod labeler;
mod nlg;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ce::{
    ce_scores, ce_scores_with, keyword_label, CeScoreSet, Label, ObservationLabels, UncertainPolicy, OBSERVATIONS,
    OBSERVATION_LIST_VERSION,
};
pub use labeler::{label_via_service, Labeler};
pub use nlg::{
    bleu, corpus_meteor, corpus_rouge_l, meteor, meteor_alignment, rouge_l, MeteorAlignment, RougeL,
    BLEU_SMOOTHING_EPSILON, ROUGE_BETA,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("hypothesis/reference count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty reference")]
    EmptyReference,
    #[error("max n-gram order must be at least 1")]
    ZeroOrder,
}

impl From<MetricError> for crate::Error {
    fn from(e: MetricError) -> Self {
        crate::Error::Schema(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlgScoreSet<T> {
    pub bleu_1: T,
    pub bleu_4: T,
    pub meteor: T,
    pub rouge_l: T,
}

impl<T: Float> NlgScoreSet<T> {
    /// Tokenizes aligned hypothesis/reference texts and scores the corpus.
    pub fn score_texts<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<Self, MetricError> {
        let hyp: Vec<Vec<String>> = hypotheses.iter().map(|t| crate::corpus::tokenize(t.as_ref())).collect();
        let refs: Vec<Vec<String>> = references.iter().map(|t| crate::corpus::tokenize(t.as_ref())).collect();
        Self::score_tokens(&hyp, &refs)
    }

    pub fn score_tokens(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<Self, MetricError> {
        Ok(NlgScoreSet {
            bleu_1: bleu(hypotheses, references, 1)?,
            bleu_4: bleu(hypotheses, references, 4)?,
            meteor: corpus_meteor(hypotheses, references)?,
            rouge_l: corpus_rouge_l(hypotheses, references)?,
        })
    }
}
