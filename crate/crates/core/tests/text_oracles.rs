//! Word-piece vocabulary and error rates against naive reference versions.

use std::collections::HashMap;

use procter::evalkit::{levenshtein_align, ne_wer, utterance_errors, wer, OpKind};
use procter::textproc::build_vocab;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain pair-merging: count adjacent pairs, merge the most frequent
/// (smallest pair on ties) everywhere, left to right, until `merges` are done.
fn reference_merges(corpus: &[String], merges: usize) -> Vec<(String, String)> {
    let mut freq: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for w in line.split_whitespace() {
            *freq.entry(w.to_string()).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = freq
        .into_iter()
        .map(|(w, n)| {
            let mut s = vec!["▁".to_string()];
            s.extend(w.chars().map(String::from));
            (s, n)
        })
        .collect();
    let mut out = Vec::new();
    for _ in 0..merges {
        let mut counts: HashMap<(String, String), usize> = HashMap::new();
        for (s, n) in &words {
            for i in 1..s.len() {
                *counts.entry((s[i - 1].clone(), s[i].clone())).or_default() += n;
            }
        }
        let Some(best) = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(p, _)| p.clone())
        else {
            break;
        };
        for (s, _) in &mut words {
            let mut merged = Vec::with_capacity(s.len());
            let mut i = 0;
            while i < s.len() {
                if i + 1 < s.len() && s[i] == best.0 && s[i + 1] == best.1 {
                    merged.push(format!("{}{}", best.0, best.1));
                    i += 2;
                } else {
                    merged.push(s[i].clone());
                    i += 1;
                }
            }
            *s = merged;
        }
        out.push(best);
    }
    out
}

fn random_text(rng: &mut ChaCha8Rng, letters: &[u8], lines: usize) -> Vec<String> {
    (0..lines)
        .map(|_| {
            (0..rng.random_range(1..6))
                .map(|_| {
                    (0..rng.random_range(1..7))
                        .map(|_| letters[rng.random_range(0..letters.len())] as char)
                        .collect::<String>()
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

#[test]
fn merges_match_reference_learner() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..20 {
        let corpus = random_text(&mut rng, b"abcde", 40);
        let v = build_vocab(&corpus, 40).unwrap();
        let expected = reference_merges(&corpus, v.merges().len());
        assert_eq!(v.merges(), expected.as_slice(), "case {case}");
    }
}

#[test]
fn encoding_round_trips_training_text() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let corpus = random_text(&mut rng, b"abcdefgh", 100);
    let v = build_vocab(&corpus, 60).unwrap();
    for line in &corpus {
        let ids = v.encode(line);
        assert!(ids.iter().all(|&i| i >= 3 && i < v.len()));
        assert_eq!(v.decode(&ids), *line);
    }
    // characters outside the training alphabet become <unk>
    assert!(v.encode("axz").contains(&1));
}

/// Edit distance by memoised recursion over suffixes.
fn reference_distance(r: &[&str], h: &[&str], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if r.is_empty() || h.is_empty() {
        return r.len() + h.len();
    }
    let key = (r.len(), h.len());
    if let Some(&d) = memo.get(&key) {
        return d;
    }
    let sub = reference_distance(&r[1..], &h[1..], memo) + usize::from(r[0] != h[0]);
    let del = reference_distance(&r[1..], h, memo) + 1;
    let ins = reference_distance(r, &h[1..], memo) + 1;
    let d = sub.min(del).min(ins);
    memo.insert(key, d);
    d
}

fn random_words(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    const W: [&str; 5] = ["ka", "lo", "mi", "nu", "pe"];
    (0..rng.random_range(0..9))
        .map(|_| W[rng.random_range(0..W.len())])
        .collect()
}

#[test]
fn error_counts_match_reference_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut errors, mut words) = (0usize, 0usize);
    let (mut refs, mut hyps) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let mut r = random_words(&mut rng);
        if r.is_empty() {
            r.push("ka");
        }
        let h = random_words(&mut rng);
        let d = reference_distance(&r, &h, &mut HashMap::new());
        let c = utterance_errors(&r, &h);
        assert_eq!(c.errors(), d, "{r:?} vs {h:?}");
        assert_eq!(d, reference_distance(&h, &r, &mut HashMap::new()));
        errors += d;
        words += r.len();
        refs.push(r.join(" "));
        hyps.push(h.join(" "));
    }
    let expected = errors as f64 / words as f64;
    assert!((wer(&refs, &hyps).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn entity_spans_cover_the_whole_reference_like_wer() {
    let refs = ["call ka lo now", "mi nu"];
    let hyps = ["call ka ka now", "pe mi nu pe"];
    let whole: Vec<Vec<(usize, usize)>> = refs
        .iter()
        .map(|r| vec![(0, r.split(' ').count())])
        .collect();
    assert_eq!(
        ne_wer(&refs, &hyps, &whole).unwrap(),
        wer(&refs, &hyps).unwrap()
    );
    // only "ka lo" is an entity: one substitution over two words
    let spans = vec![vec![(1, 3)], vec![]];
    assert_eq!(ne_wer(&refs[..1], &hyps[..1], &spans[..1]).unwrap(), 0.5);
}

proptest! {
    #[test]
    fn alignment_consumes_both_sides_in_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, h) = (random_words(&mut rng), random_words(&mut rng));
        let ops = levenshtein_align(&r, &h);
        let refs: Vec<usize> = ops.iter().filter_map(|o| o.ref_idx).collect();
        let hyps: Vec<usize> = ops.iter().filter_map(|o| o.hyp_idx).collect();
        prop_assert_eq!(refs, (0..r.len()).collect::<Vec<_>>());
        prop_assert_eq!(hyps, (0..h.len()).collect::<Vec<_>>());
        for o in &ops {
            if o.kind == OpKind::Match {
                prop_assert_eq!(r[o.ref_idx.unwrap()], h[o.hyp_idx.unwrap()]);
            }
        }
    }
}
