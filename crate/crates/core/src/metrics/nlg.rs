use std::collections::HashMap;
use std::hash::Hash;

use num_traits::Float;

use super::MetricError;

/// Numerator used for zero-match orders when `max_order > 1`.
pub const BLEU_SMOOTHING_EPSILON: f64 = 1e-9;
/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

fn cast<T: Float>(x: f64) -> T {
    T::from(x).expect("float conversion")
}

fn count<T: Float>(n: usize) -> T {
    T::from(n).expect("count conversion")
}

fn ngram_counts<W: Eq + Hash>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with uniform weights over orders `1..=max_order` and a single
/// reference per hypothesis.
///
/// Orders for which the hypotheses contain no n-grams at all are left out
/// of the geometric mean. With `max_order == 1` a zero match count gives 0;
/// for higher orders a zero-match order contributes
/// `BLEU_SMOOTHING_EPSILON / candidate_count`.
pub fn bleu<T, W, H, R>(hypotheses: &[H], references: &[R], max_order: usize) -> Result<T, MetricError>
where
    T: Float,
    W: Eq + Hash,
    H: AsRef<[W]>,
    R: AsRef<[W]>,
{
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch(hypotheses.len(), references.len()));
    }
    if hypotheses.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if max_order == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let mut matches = vec![0usize; max_order];
    let mut totals = vec![0usize; max_order];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_order {
            let ref_counts = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(ref_counts.get(gram).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(T::zero());
    }
    let mut log_sum = T::zero();
    let mut orders = 0usize;
    for n in 0..max_order {
        if totals[n] == 0 {
            continue;
        }
        let numerator = if matches[n] > 0 {
            count::<T>(matches[n])
        } else if max_order == 1 {
            return Ok(T::zero());
        } else {
            cast(BLEU_SMOOTHING_EPSILON)
        };
        log_sum = log_sum + (numerator / count::<T>(totals[n])).ln();
        orders += 1;
    }
    let brevity = if hyp_len < ref_len {
        (T::one() - count::<T>(ref_len) / count::<T>(hyp_len)).exp()
    } else {
        T::one()
    };
    Ok(brevity * (log_sum / count::<T>(orders)).exp())
}

fn lcs_len<W: Eq>(a: &[W], b: &[W]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeL<T> {
    pub precision: T,
    pub recall: T,
    pub f: T,
}

/// Sentence-level ROUGE-L from the longest common subsequence.
pub fn rouge_l<T: Float, W: Eq>(hypothesis: &[W], reference: &[W]) -> Result<RougeL<T>, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if hypothesis.is_empty() {
        return Ok(RougeL {
            precision: T::zero(),
            recall: T::zero(),
            f: T::zero(),
        });
    }
    let lcs = count::<T>(lcs_len(hypothesis, reference));
    let precision = lcs / count(hypothesis.len());
    let recall = lcs / count(reference.len());
    let beta2 = cast::<T>(ROUGE_BETA * ROUGE_BETA);
    let denom = recall + beta2 * precision;
    let f = if denom > T::zero() {
        (T::one() + beta2) * recall * precision / denom
    } else {
        T::zero()
    };
    Ok(RougeL { precision, recall, f })
}

/// Mean per-pair ROUGE-L F.
pub fn corpus_rouge_l<T, W, H, R>(hypotheses: &[H], references: &[R]) -> Result<T, MetricError>
where
    T: Float,
    W: Eq,
    H: AsRef<[W]>,
    R: AsRef<[W]>,
{
    check_pairs(hypotheses.len(), references.len())?;
    let mut sum = T::zero();
    for (h, r) in hypotheses.iter().zip(references) {
        sum = sum + rouge_l::<T, W>(h.as_ref(), r.as_ref())?.f;
    }
    Ok(sum / count(hypotheses.len()))
}

fn check_pairs(h: usize, r: usize) -> Result<(), MetricError> {
    if h != r {
        return Err(MetricError::LengthMismatch(h, r));
    }
    if h == 0 {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

/// Result of the exact-match unigram alignment used by METEOR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeteorAlignment {
    pub matches: usize,
    pub chunks: usize,
    /// Reference position aligned to each hypothesis position.
    pub pairs: Vec<Option<usize>>,
    /// False when the search stopped at its node budget.
    pub exact: bool,
}

const ALIGNMENT_NODE_BUDGET: usize = 2_000_000;

struct AlignSearch<'a, W> {
    hyp: &'a [W],
    reference: &'a [W],
    candidates: Vec<Vec<usize>>,
    word_of: Vec<usize>,
    skips_left: Vec<usize>,
    used: Vec<bool>,
    current: Vec<Option<usize>>,
    /// Upper bound on continuations still available from position i on.
    suffix_bound: Vec<usize>,
    best: Option<(usize, Vec<Option<usize>>)>,
    nodes: usize,
}

impl<W: Eq> AlignSearch<'_, W> {
    fn run(&mut self, i: usize, score: usize) {
        self.nodes += 1;
        if let Some((best, _)) = &self.best {
            if score + self.suffix_bound[i] <= *best || self.nodes > ALIGNMENT_NODE_BUDGET {
                return;
            }
        }
        if i == self.hyp.len() {
            self.best = Some((score, self.current.clone()));
            return;
        }
        let prev = if i > 0 { self.current[i - 1] } else { None };
        let follow = prev
            .map(|j| j + 1)
            .filter(|&j| j < self.reference.len() && !self.used[j] && self.reference[j] == self.hyp[i]);
        let mut order: Vec<usize> = follow.into_iter().collect();
        order.extend(
            self.candidates[i]
                .iter()
                .copied()
                .filter(|&j| !self.used[j] && Some(j) != follow),
        );
        for j in order {
            self.used[j] = true;
            self.current[i] = Some(j);
            let gain = usize::from(follow == Some(j));
            self.run(i + 1, score + gain);
            self.current[i] = None;
            self.used[j] = false;
        }
        let w = self.word_of[i];
        if self.skips_left[w] > 0 {
            self.skips_left[w] -= 1;
            self.run(i + 1, score);
            self.skips_left[w] += 1;
        }
    }
}

/// Maximum-cardinality exact-match alignment with the fewest chunks.
///
/// The match count is fixed by the token multisets; among those alignments
/// a branch-and-bound search maximizes the number of adjacent pairs that are
/// adjacent in both sequences. The search is exhaustive below a node budget
/// that short report-length inputs stay far from.
pub fn meteor_alignment<W: Eq + Hash>(hypothesis: &[W], reference: &[W]) -> MeteorAlignment {
    let mut ids: HashMap<&W, usize> = HashMap::new();
    for w in hypothesis.iter().chain(reference) {
        let next = ids.len();
        ids.entry(w).or_insert(next);
    }
    let mut hyp_count = vec![0usize; ids.len()];
    let mut ref_count = vec![0usize; ids.len()];
    let word_of: Vec<usize> = hypothesis.iter().map(|w| ids[w]).collect();
    for &w in &word_of {
        hyp_count[w] += 1;
    }
    for w in reference {
        ref_count[ids[w]] += 1;
    }
    let skips_left: Vec<usize> = hyp_count
        .iter()
        .zip(&ref_count)
        .map(|(&h, &r)| h.saturating_sub(r))
        .collect();
    let candidates: Vec<Vec<usize>> = hypothesis
        .iter()
        .map(|w| (0..reference.len()).filter(|&j| reference[j] == *w).collect())
        .collect();
    let continuable: Vec<bool> = (0..hypothesis.len())
        .map(|i| {
            i > 0
                && reference
                    .windows(2)
                    .any(|p| p[0] == hypothesis[i - 1] && p[1] == hypothesis[i])
        })
        .collect();
    let mut suffix_bound = vec![0usize; hypothesis.len() + 1];
    for i in (0..hypothesis.len()).rev() {
        suffix_bound[i] = suffix_bound[i + 1] + usize::from(continuable[i]);
    }
    let mut search = AlignSearch {
        hyp: hypothesis,
        reference,
        candidates,
        word_of,
        skips_left,
        used: vec![false; reference.len()],
        current: vec![None; hypothesis.len()],
        suffix_bound,
        best: None,
        nodes: 0,
    };
    search.run(0, 0);
    let exact = search.nodes <= ALIGNMENT_NODE_BUDGET;
    if !exact {
        log::debug!("METEOR alignment search hit its node budget");
    }
    let (continuations, pairs) = search.best.expect("search always completes one path");
    let matches = pairs.iter().filter(|p| p.is_some()).count();
    MeteorAlignment {
        matches,
        chunks: matches - continuations,
        pairs,
        exact,
    }
}

/// METEOR with exact-match alignment only:
/// `Fmean = 10PR/(R+9P)`, `penalty = 0.5 (chunks/m)^3`, score `Fmean (1 - penalty)`.
pub fn meteor<T: Float, W: Eq + Hash>(hypothesis: &[W], reference: &[W]) -> T {
    let a = meteor_alignment(hypothesis, reference);
    if a.matches == 0 {
        return T::zero();
    }
    let m = count::<T>(a.matches);
    let precision = m / count(hypothesis.len());
    let recall = m / count(reference.len());
    let fmean = cast::<T>(10.0) * precision * recall / (recall + cast::<T>(9.0) * precision);
    let frag = count::<T>(a.chunks) / m;
    let penalty = cast::<T>(0.5) * frag * frag * frag;
    fmean * (T::one() - penalty)
}

/// Mean per-pair METEOR.
pub fn corpus_meteor<T, W, H, R>(hypotheses: &[H], references: &[R]) -> Result<T, MetricError>
where
    T: Float,
    W: Eq + Hash,
    H: AsRef<[W]>,
    R: AsRef<[W]>,
{
    check_pairs(hypotheses.len(), references.len())?;
    let sum = hypotheses
        .iter()
        .zip(references)
        .fold(T::zero(), |acc, (h, r)| acc + meteor::<T, W>(h.as_ref(), r.as_ref()));
    Ok(sum / count(hypotheses.len()))
}
