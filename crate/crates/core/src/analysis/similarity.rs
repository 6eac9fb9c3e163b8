use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

/// Highest n-gram order used by [`bleu`].
pub const BLEU_MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BleuError {
    #[error("reference token sequence is empty")]
    EmptyReference,
}

/// Sentence-level BLEU of `candidate` against a single `reference`.
///
/// Uniform weights over orders 1..=4 and the usual brevity penalty. Clipped
/// precision for order 1 is used as is; for orders 2..=4 a zero match count
/// is smoothed to `1 / (total + 1)`. Orders longer than the candidate are
/// skipped (treated as precision 1), so `bleu(x, x) == 1` for any non-empty
/// `x`.
pub fn bleu<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Result<f64, BleuError> {
    if reference.is_empty() {
        return Err(BleuError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=BLEU_MAX_ORDER {
        let total = candidate.len().saturating_sub(order - 1);
        if total == 0 {
            continue;
        }
        let matches = clipped_matches(candidate, reference, order);
        let precision = if matches > 0 {
            matches as f64 / total as f64
        } else if order == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += precision.ln() / BLEU_MAX_ORDER as f64;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(brevity * log_sum.exp())
}

fn clipped_matches<T: Eq + Hash>(candidate: &[T], reference: &[T], order: usize) -> usize {
    let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
    for gram in reference.windows(order) {
        *ref_counts.entry(gram).or_default() += 1;
    }
    let mut cand_counts: HashMap<&[T], usize> = HashMap::new();
    for gram in candidate.windows(order) {
        *cand_counts.entry(gram).or_default() += 1;
    }
    cand_counts
        .iter()
        .map(|(gram, &n)| n.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum()
}

/// `|a ∩ b| / |a ∪ b|`, with two empty sets defined as identical (1.0).
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}
