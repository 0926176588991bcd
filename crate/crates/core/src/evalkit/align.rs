//! Word alignment and error rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Match,
    Substitution,
    Deletion,
    Insertion,
}

/// One alignment step. Insertions have no reference index, deletions no
/// hypothesis index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentOp {
    pub kind: OpKind,
    pub ref_idx: Option<usize>,
    pub hyp_idx: Option<usize>,
}

/// Minimum-edit alignment with unit costs. Among equal-cost paths the
/// backtrace prefers match, then substitution, deletion, insertion.
pub fn levenshtein_align<S: AsRef<str>, T: AsRef<str>>(
    reference: &[S],
    hyp: &[T],
) -> Vec<AlignmentOp> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hyp[j - 1].as_ref();
            let diag = d[(i - 1) * w + j - 1] + usize::from(!same);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hyp[j - 1].as_ref();
            if same && here == d[(i - 1) * w + j - 1] {
                ops.push(AlignmentOp {
                    kind: OpKind::Match,
                    ref_idx: Some(i - 1),
                    hyp_idx: Some(j - 1),
                });
                i -= 1;
                j -= 1;
                continue;
            }
            if !same && here == d[(i - 1) * w + j - 1] + 1 {
                ops.push(AlignmentOp {
                    kind: OpKind::Substitution,
                    ref_idx: Some(i - 1),
                    hyp_idx: Some(j - 1),
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            ops.push(AlignmentOp {
                kind: OpKind::Deletion,
                ref_idx: Some(i - 1),
                hyp_idx: None,
            });
            i -= 1;
        } else {
            ops.push(AlignmentOp {
                kind: OpKind::Insertion,
                ref_idx: None,
                hyp_idx: Some(j - 1),
            });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Reference words in scope.
    pub words: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn add(&mut self, o: &ErrorCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.words += o.words;
    }

    pub fn rate(&self) -> Result<f64> {
        if self.words == 0 {
            return Err(Error::Input("error rate over zero reference words".into()));
        }
        Ok(self.errors() as f64 / self.words as f64)
    }

    fn count(&mut self, kind: OpKind) {
        match kind {
            OpKind::Match => {}
            OpKind::Substitution => self.substitutions += 1,
            OpKind::Deletion => self.deletions += 1,
            OpKind::Insertion => self.insertions += 1,
        }
    }
}

pub fn utterance_errors<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hyp: &[T]) -> ErrorCounts {
    let mut c = ErrorCounts {
        words: reference.len(),
        ..Default::default()
    };
    for op in levenshtein_align(reference, hyp) {
        c.count(op.kind);
    }
    c
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("{a} references but {b} hypotheses")));
    }
    Ok(())
}

/// Corpus-level word error rate: (S + D + I) / reference words.
pub fn wer<S: AsRef<str>, T: AsRef<str>>(refs: &[S], hyps: &[T]) -> Result<f64> {
    check_lengths(refs.len(), hyps.len())?;
    let mut total = ErrorCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        total.add(&utterance_errors(&words(r.as_ref()), &words(h.as_ref())));
    }
    total.rate()
}

/// Errors inside entity spans (half-open word ranges of the reference).
/// Substitutions and deletions count when their reference word is in a
/// span. An insertion counts when the reference words on both sides of it
/// belong to the same span; the utterance edge stands in for a missing
/// neighbour.
pub fn span_errors<S: AsRef<str>, T: AsRef<str>>(
    reference: &[S],
    hyp: &[T],
    spans: &[(usize, usize)],
) -> Result<ErrorCounts> {
    let n = reference.len();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (k, &(a, b)) in spans.iter().enumerate() {
        if a >= b || b > n {
            return Err(Error::Input(format!(
                "span {a}..{b} outside a {n}-word reference"
            )));
        }
        for o in &mut owner[a..b] {
            *o = Some(k);
        }
    }
    let mut c = ErrorCounts {
        words: owner.iter().filter(|o| o.is_some()).count(),
        ..Default::default()
    };
    // index of the next reference word not yet consumed
    let mut next = 0;
    for op in levenshtein_align(reference, hyp) {
        match op.ref_idx {
            Some(r) => {
                if owner[r].is_some() {
                    c.count(op.kind);
                }
                next = r + 1;
            }
            None => {
                let left = if next == 0 {
                    None
                } else {
                    Some(owner[next - 1])
                };
                let right = if next == n { None } else { Some(owner[next]) };
                let inside = match (left, right) {
                    (Some(l), Some(r)) => l.is_some() && l == r,
                    (None, Some(r)) => r.is_some(),
                    (Some(l), None) => l.is_some(),
                    (None, None) => false,
                };
                if inside {
                    c.count(op.kind);
                }
            }
        }
    }
    Ok(c)
}

/// Named-entity WER over all utterances; see [`span_errors`].
pub fn ne_wer<S: AsRef<str>, T: AsRef<str>>(
    refs: &[S],
    hyps: &[T],
    spans: &[Vec<(usize, usize)>],
) -> Result<f64> {
    check_lengths(refs.len(), hyps.len())?;
    check_lengths(refs.len(), spans.len())?;
    let mut total = ErrorCounts::default();
    for ((r, h), s) in refs.iter().zip(hyps).zip(spans) {
        total.add(&span_errors(&words(r.as_ref()), &words(h.as_ref()), s)?);
    }
    total.rate()
}

/// (base − model) / base.
pub fn relative_reduction(base: f64, model: f64) -> Result<f64> {
    if base <= 0.0 || !base.is_finite() {
        return Err(Error::Input(format!(
            "relative reduction is undefined for baseline {base}"
        )));
    }
    Ok((base - model) / base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_sequences_are_all_matches() {
        let ops = levenshtein_align(&w("call joe biden"), &w("call joe biden"));
        assert!(ops.iter().all(|o| o.kind == OpKind::Match));
        assert_eq!(wer(&["a b c"], &["a b c"]).unwrap(), 0.0);
    }

    #[test]
    fn one_substitution() {
        let c = utterance_errors(&w("call joe biden"), &w("call joe baden"));
        assert_eq!((c.substitutions, c.errors()), (1, 1));
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        assert_eq!(wer(&["hello"], &[""]).unwrap(), 1.0);
        assert!(wer(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn tie_break_prefers_substitution_over_indels() {
        let ops = levenshtein_align(&w("a b"), &w("c b"));
        assert_eq!(ops[0].kind, OpKind::Substitution);
        // equal-cost paths: sub+ins versus del+... ; ties resolve toward the
        // diagonal first
        let ops = levenshtein_align(&w("a"), &w("b c"));
        let kinds: Vec<_> = ops.iter().map(|o| o.kind).collect();
        assert_eq!(kinds, vec![OpKind::Insertion, OpKind::Substitution]);
    }

    #[test]
    fn ne_wer_slicing() {
        let r = ["call joe biden now"];
        assert_eq!(
            ne_wer(&r, &["text joe biden later"], &[vec![(1, 3)]]).unwrap(),
            0.0
        );
        assert_eq!(
            ne_wer(&["call biden"], &["call baden"], &[vec![(1, 2)]]).unwrap(),
            1.0
        );
        assert!(ne_wer(&["call biden"], &["call baden"], &[vec![(1, 3)]]).is_err());
    }

    #[test]
    fn insertion_attribution() {
        let refs = w("call joe biden now");
        let inside = span_errors(&refs, &w("call joe x biden now"), &[(1, 3)]).unwrap();
        assert_eq!(inside.insertions, 1);
        let outside = span_errors(&refs, &w("call x joe biden now"), &[(1, 3)]).unwrap();
        assert_eq!(outside.insertions, 0);
    }

    #[test]
    fn full_span_equals_wer() {
        let (r, h) = ("a b c d", "x a c d e");
        let n = w(r).len();
        assert_eq!(
            ne_wer(&[r], &[h], &[vec![(0, n)]]).unwrap(),
            wer(&[r], &[h]).unwrap()
        );
    }

    #[test]
    fn reduction_arithmetic() {
        assert_eq!(relative_reduction(0.3, 0.3).unwrap(), 0.0);
        assert_eq!(relative_reduction(0.3, 0.0).unwrap(), 1.0);
        assert!((relative_reduction(0.40, 0.27).unwrap() - 0.325).abs() < 1e-12);
        assert!(relative_reduction(0.0, 0.1).is_err());
    }
}
