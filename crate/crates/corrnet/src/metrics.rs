//! Word error rate and edit-operation accounting.

use crate::ctc::GlossSequence;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Counts realizing a minimum-cost alignment between reference and hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EditBreakdown {
    pub substitutions: usize,
    /// Hypothesis words with no reference counterpart.
    pub insertions: usize,
    /// Reference words missing from the hypothesis.
    pub deletions: usize,
    pub reference_len: usize,
}

impl EditBreakdown {
    pub fn total_edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Unit-cost Levenshtein alignment with a deterministic backtrace: on cost
/// ties prefer substitution, then insertion, then deletion.
pub fn edit_ops(reference: &[usize], hypothesis: &[usize]) -> Result<EditBreakdown> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument(
            "WER undefined for an empty reference".into(),
        ));
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut dist = vec![0usize; (n + 1) * (m + 1)];
    for i in 0..=n {
        dist[i * (m + 1)] = i;
    }
    for j in 0..=m {
        dist[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let sub = dist[(i - 1) * (m + 1) + j - 1] + cost;
            let ins = dist[i * (m + 1) + j - 1] + 1;
            let del = dist[(i - 1) * (m + 1) + j] + 1;
            dist[i * (m + 1) + j] = sub.min(ins).min(del);
        }
    }

    let (mut i, mut j) = (n, m);
    let (mut subs, mut inss, mut dels) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        let here = dist[i * (m + 1) + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dist[(i - 1) * (m + 1) + j - 1] + cost == here {
                if cost == 1 {
                    subs += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dist[i * (m + 1) + j - 1] + 1 == here {
            inss += 1;
            j -= 1;
            continue;
        }
        dels += 1;
        i -= 1;
    }
    Ok(EditBreakdown {
        substitutions: subs,
        insertions: inss,
        deletions: dels,
        reference_len: n,
    })
}

/// `(#sub + #ins + #del) / #reference`; may exceed 1.
pub fn wer(breakdown: &EditBreakdown) -> f64 {
    breakdown.total_edits() as f64 / breakdown.reference_len as f64
}

/// Corpus-level rates: operations pooled over all pairs, divided by the total
/// reference length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusWer {
    pub wer: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    pub sub_rate: f64,
    pub n_samples: usize,
}

pub fn corpus_wer(pairs: &[(GlossSequence, GlossSequence)]) -> Result<CorpusWer> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let (mut subs, mut inss, mut dels, mut total_ref) = (0usize, 0usize, 0usize, 0usize);
    for (reference, hypothesis) in pairs {
        let b = edit_ops(reference, hypothesis)?;
        subs += b.substitutions;
        inss += b.insertions;
        dels += b.deletions;
        total_ref += b.reference_len;
    }
    let denom = total_ref as f64;
    Ok(CorpusWer {
        wer: (subs + inss + dels) as f64 / denom,
        del_rate: dels as f64 / denom,
        ins_rate: inss as f64 / denom,
        sub_rate: subs as f64 / denom,
        n_samples: pairs.len(),
    })
}

/// One evaluation record in the JSON-lines metric log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub wer: f64,
    pub del_rate: f64,
    pub ins_rate: f64,
    pub sub_rate: f64,
    pub n_samples: usize,
}

impl MetricsRecord {
    pub fn new(epoch: usize, split: &str, c: &CorpusWer) -> Self {
        MetricsRecord {
            epoch,
            split: split.to_string(),
            wer: c.wer,
            del_rate: c.del_rate,
            ins_rate: c.ins_rate,
            sub_rate: c.sub_rate,
            n_samples: c.n_samples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_have_no_edits() {
        let b = edit_ops(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!(b, EditBreakdown { substitutions: 0, insertions: 0, deletions: 0, reference_len: 3 });
        assert_eq!(wer(&b), 0.0);
    }

    #[test]
    fn single_substitution() {
        // ref [A,B,C,D], hyp [A,X,C,D] -> one substitution, WER 0.25.
        let b = edit_ops(&[1, 2, 3, 4], &[1, 9, 3, 4]).unwrap();
        assert_eq!((b.substitutions, b.insertions, b.deletions), (1, 0, 0));
        assert_eq!(wer(&b), 0.25);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let b = edit_ops(&[1, 2, 3, 4], &[]).unwrap();
        assert_eq!((b.substitutions, b.insertions, b.deletions), (0, 0, 4));
        assert_eq!(wer(&b), 1.0);
    }

    #[test]
    fn empty_reference_rejected() {
        assert!(edit_ops(&[], &[1]).is_err());
    }

    #[test]
    fn wer_can_exceed_one() {
        // ref length 2, hyp 5 unrelated symbols: 2 subs + 3 ins over 2.
        let b = edit_ops(&[1, 2], &[7, 8, 9, 10, 11]).unwrap();
        assert_eq!((b.substitutions, b.insertions, b.deletions), (2, 3, 0));
        assert_eq!(wer(&b), 2.5);
    }

    #[test]
    fn corpus_of_one_equals_single_pair() {
        let pairs = vec![(vec![1, 2, 3, 4], vec![1, 9, 3, 4])];
        let c = corpus_wer(&pairs).unwrap();
        assert_eq!(c.wer, 0.25);
        assert_eq!(c.sub_rate, 0.25);
        assert_eq!(c.n_samples, 1);
    }

    #[test]
    fn perfect_corpus_is_zero() {
        let pairs = vec![
            (vec![1, 2], vec![1, 2]),
            (vec![3], vec![3]),
        ];
        assert_eq!(corpus_wer(&pairs).unwrap().wer, 0.0);
    }

    #[test]
    fn mixed_corpus_pools_operation_counts() {
        // Pair 1: 1 sub over 4; pair 2: 2 del over 2. Pooled: 3 ops / 6 ref.
        let pairs = vec![
            (vec![1, 2, 3, 4], vec![1, 9, 3, 4]),
            (vec![5, 6], vec![]),
        ];
        let c = corpus_wer(&pairs).unwrap();
        assert!((c.wer - 0.5).abs() < 1e-15);
        assert!((c.del_rate - 2.0 / 6.0).abs() < 1e-15);
        assert!((c.sub_rate - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(c.ins_rate, 0.0);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(corpus_wer(&[]).is_err());
    }

    /// Plain cost-matrix distance without backtrace, used to cross-check the
    /// breakdown totals.
    fn plain_distance(a: &[usize], b: &[usize]) -> usize {
        let (n, m) = (a.len(), b.len());
        let mut prev: Vec<usize> = (0..=m).collect();
        let mut curr = vec![0usize; m + 1];
        for i in 1..=n {
            curr[0] = i;
            for j in 1..=m {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                curr[j] = (prev[j - 1] + cost).min(curr[j - 1] + 1).min(prev[j] + 1);
            }
            std::mem::swap(&mut prev, &mut curr);
        }
        prev[m]
    }

    #[test]
    fn breakdown_total_equals_min_distance_and_is_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let m = rng.gen_range(0..8);
            let a: Vec<usize> = (0..n).map(|_| rng.gen_range(1..5)).collect();
            let b: Vec<usize> = (0..m).map(|_| rng.gen_range(1..5)).collect();
            let fwd = edit_ops(&a, &b).unwrap();
            assert_eq!(fwd.total_edits(), plain_distance(&a, &b));
            if !b.is_empty() {
                let rev = edit_ops(&b, &a).unwrap();
                assert_eq!(fwd.total_edits(), rev.total_edits());
                // Roles swap between insertions and deletions.
                assert_eq!(fwd.insertions, rev.deletions);
                assert_eq!(fwd.deletions, rev.insertions);
            }
        }
    }
}
