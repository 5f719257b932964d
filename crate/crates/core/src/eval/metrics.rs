//! Transfer accuracy, BLEU, greedy-matching semantic similarity and the
//! geometric-mean overall scores.

use std::collections::HashMap;

use crate::corpus::StyleId;
use crate::error::{Error, Result};

/// Anything that yields a probability distribution over styles for a text.
pub trait StyleScorer {
    fn style_probs(&self, tokens: &[String]) -> Result<Vec<f64>>;
}

/// Anything that maps a token sequence to one vector per token.
pub trait TokenEmbedder {
    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f32>>>;
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Percentage of outputs whose most probable style is `target`.
pub fn a_acc(outputs: &[Vec<String>], target: StyleId, clf: &dyn StyleScorer) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Empty("a-Acc over an empty output set".into()));
    }
    let mut hits = 0usize;
    for o in outputs {
        if argmax(&clf.style_probs(o)?) == target.0 {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / outputs.len() as f64)
}

/// Percentage of pairs where the output scores strictly higher on `target`
/// than its input.
pub fn r_acc(
    outputs: &[Vec<String>],
    inputs: &[Vec<String>],
    target: StyleId,
    clf: &dyn StyleScorer,
) -> Result<f64> {
    if outputs.len() != inputs.len() {
        return Err(Error::LengthMismatch(format!(
            "{} outputs vs {} inputs",
            outputs.len(),
            inputs.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Empty("r-Acc over an empty output set".into()));
    }
    let mut hits = 0usize;
    for (o, i) in outputs.iter().zip(inputs) {
        let po = clf.style_probs(o)?[target.0];
        let pi = clf.style_probs(i)?[target.0];
        if po > pi {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / outputs.len() as f64)
}

/// Epsilon added to zero higher-order n-gram matches.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Debug, Default, Clone, Copy)]
struct BleuStats {
    matches: [f64; 2],
    totals: [f64; 2],
    cand_len: f64,
    ref_len: f64,
}

fn bleu_stats(candidate: &[String], reference: &[String], n: usize) -> BleuStats {
    let mut st = BleuStats {
        cand_len: candidate.len() as f64,
        ref_len: reference.len() as f64,
        ..Default::default()
    };
    for k in 1..=n {
        let c = ngram_counts(candidate, k);
        let r = ngram_counts(reference, k);
        let clipped: usize = c
            .iter()
            .map(|(g, &cnt)| cnt.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        st.matches[k - 1] = clipped as f64;
        st.totals[k - 1] = candidate.len().saturating_sub(k - 1) as f64;
    }
    st
}

fn bleu_from_stats(st: &BleuStats, n: usize) -> f64 {
    if st.cand_len == 0.0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        let total = st.totals[k];
        let matches = st.matches[k];
        let p = if matches > 0.0 {
            matches / total
        } else if k == 0 {
            return 0.0;
        } else if total > 0.0 {
            BLEU_EPSILON / total
        } else {
            BLEU_EPSILON
        };
        log_sum += p.ln();
    }
    let bp = if st.cand_len >= st.ref_len {
        1.0
    } else {
        (1.0 - st.ref_len / st.cand_len).exp()
    };
    100.0 * bp * (log_sum / n as f64).exp()
}

fn check_order(n: usize) -> Result<()> {
    if n == 1 || n == 2 {
        Ok(())
    } else {
        Err(Error::Config(format!("BLEU order {n} not supported (1 or 2)")))
    }
}

/// Single-reference BLEU-n (n = 1 or 2), uniform weights, scaled to 0..100.
pub fn bleu_n(candidate: &[String], reference: &[String], n: usize) -> Result<f64> {
    check_order(n)?;
    if reference.is_empty() {
        return Err(Error::Empty("BLEU reference".into()));
    }
    Ok(bleu_from_stats(&bleu_stats(candidate, reference, n), n))
}

/// Corpus-level BLEU: n-gram statistics and lengths are pooled over all pairs
/// before the precisions and brevity penalty are computed.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    check_order(n)?;
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Empty("BLEU reference".into()));
    }
    let mut pooled = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        let st = bleu_stats(c, r, n);
        for k in 0..2 {
            pooled.matches[k] += st.matches[k];
            pooled.totals[k] += st.totals[k];
        }
        pooled.cand_len += st.cand_len;
        pooled.ref_len += st.ref_len;
    }
    Ok(bleu_from_stats(&pooled, n))
}

/// Mean of per-pair sentence BLEU.
pub fn sentence_averaged_bleu(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    n: usize,
) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += bleu_n(c, r, n)?;
    }
    Ok(sum / candidates.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SemanticScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Greedy cosine matching between two sets of token vectors, scaled to
/// 0..100 (negative similarities are clamped to zero).
pub fn greedy_match(cand: &[Vec<f32>], refs: &[Vec<f32>]) -> SemanticScore {
    if cand.is_empty() || refs.is_empty() {
        return SemanticScore::default();
    }
    let sims: Vec<Vec<f64>> = cand
        .iter()
        .map(|c| refs.iter().map(|r| cosine(c, r)).collect())
        .collect();
    let p = sims
        .iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / cand.len() as f64;
    let r = (0..refs.len())
        .map(|j| sims.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / refs.len() as f64;
    let (p, r) = (p.max(0.0), r.max(0.0));
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    SemanticScore {
        precision: 100.0 * p,
        recall: 100.0 * r,
        f1: 100.0 * f1,
    }
}

pub fn semantic_sim(
    candidate: &[String],
    reference: &[String],
    embedder: &dyn TokenEmbedder,
) -> Result<SemanticScore> {
    if candidate.is_empty() || reference.is_empty() {
        return Ok(SemanticScore::default());
    }
    Ok(greedy_match(&embedder.embed(candidate)?, &embedder.embed(reference)?))
}

/// Geometric mean of two percentages.
pub fn overall(a_acc: f64, content: f64) -> f64 {
    (a_acc.max(0.0) * content.max(0.0)).sqrt()
}

pub fn bl_overall(a_acc: f64, bleu1: f64, bleu2: f64) -> f64 {
    overall(a_acc, (bleu1 + bleu2) / 2.0)
}

pub fn bs_overall(a_acc: f64, bs_f1: f64) -> f64 {
    overall(a_acc, bs_f1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    struct Fixed(Vec<Vec<f64>>);
    impl StyleScorer for Fixed {
        fn style_probs(&self, tokens: &[String]) -> Result<Vec<f64>> {
            Ok(self.0[tokens[0].parse::<usize>().unwrap()].clone())
        }
    }

    #[test]
    fn absolute_accuracy_counts_argmax_hits() {
        let clf = Fixed(vec![vec![0.2, 0.8], vec![0.9, 0.1]]);
        let all = vec![t("0"), t("0"), t("0"), t("0")];
        assert_eq!(a_acc(&all, StyleId(1), &clf).unwrap(), 100.0);
        let three = vec![t("0"), t("0"), t("0"), t("1")];
        assert_eq!(a_acc(&three, StyleId(1), &clf).unwrap(), 75.0);
        assert_eq!(a_acc(&[t("1")], StyleId(1), &clf).unwrap(), 0.0);
        assert!(a_acc(&[], StyleId(1), &clf).is_err());
    }

    #[test]
    fn relative_accuracy_is_strict() {
        let clf = Fixed(vec![vec![0.2, 0.8], vec![0.7, 0.3], vec![0.2, 0.8]]);
        assert_eq!(r_acc(&[t("0")], &[t("1")], StyleId(1), &clf).unwrap(), 100.0);
        assert_eq!(r_acc(&[t("0")], &[t("2")], StyleId(1), &clf).unwrap(), 0.0);
        let same = vec![t("0"), t("1")];
        assert_eq!(r_acc(&same, &same, StyleId(1), &clf).unwrap(), 0.0);
        assert!(r_acc(&same, &[t("0")], StyleId(1), &clf).is_err());
    }

    #[test]
    fn bleu_hand_cases() {
        let c = t("a b c d");
        assert_eq!(bleu_n(&c, &c, 1).unwrap(), 100.0);
        assert!((bleu_n(&c, &c, 2).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bleu_n(&c, &t("w x y z"), 1).unwrap(), 0.0);
        assert!(bleu_n(&c, &t("w x y z"), 2).unwrap() < 1e-3);
        assert!((bleu_n(&c, &t("a b x y"), 1).unwrap() - 50.0).abs() < 1e-12);
        // p1 = 2/4, p2 = 1/3 → sqrt(1/6)
        assert!((bleu_n(&c, &t("a b x y"), 2).unwrap() - 100.0 * (1.0f64 / 6.0).sqrt()).abs() < 1e-9);
        assert_eq!(bleu_n(&[], &c, 1).unwrap(), 0.0);
        assert!(bleu_n(&c, &[], 1).is_err());
        assert!(bleu_n(&c, &c, 3).is_err());
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        // candidate of 2 tokens vs reference of 4: BP = exp(1 - 2) .
        let v = bleu_n(&t("a b"), &t("a b c d"), 1).unwrap();
        assert!((v - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let cands = vec![t("a b c d"), t("e f")];
        let refs = vec![t("a b x y"), t("e f")];
        // unigram matches 4 of 6, lengths equal
        let v = corpus_bleu(&cands, &refs, 1).unwrap();
        assert!((v - 100.0 * 4.0 / 6.0).abs() < 1e-9);
        let s = sentence_averaged_bleu(&cands, &refs, 1).unwrap();
        assert!((s - 75.0).abs() < 1e-9);
    }

    struct Table(HashMap<String, Vec<f32>>);
    impl TokenEmbedder for Table {
        fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f32>>> {
            Ok(tokens.iter().map(|t| self.0[t].clone()).collect())
        }
    }

    #[test]
    fn semantic_similarity_cases() {
        let table = Table(
            [
                ("a".to_string(), vec![1.0, 0.0]),
                ("b".to_string(), vec![0.0, 1.0]),
                ("c".to_string(), vec![0.5, 0.75f32.sqrt()]),
            ]
            .into_iter()
            .collect(),
        );
        let s = semantic_sim(&t("a b"), &t("a b"), &table).unwrap();
        assert!((s.precision - 100.0).abs() < 1e-9 && (s.f1 - 100.0).abs() < 1e-9);
        let s = semantic_sim(&t("a"), &t("b"), &table).unwrap();
        assert_eq!(s.f1, 0.0);
        let s = semantic_sim(&t("c"), &t("a"), &table).unwrap();
        assert!((s.precision - 50.0).abs() < 1e-5);
        assert!((s.recall - 50.0).abs() < 1e-5);
        assert!((s.f1 - 50.0).abs() < 1e-5);
        assert_eq!(semantic_sim(&[], &t("a"), &table).unwrap(), SemanticScore::default());
    }

    #[test]
    fn overall_matches_printed_values() {
        assert!((bl_overall(52.41, 32.20, 12.71) - 34.31).abs() < 0.02);
        assert!((bs_overall(52.41, 84.31) - 66.47).abs() < 0.02);
        assert!((bs_overall(59.94, 69.45) - 64.52).abs() < 0.02);
        assert_eq!(overall(0.0, 80.0), 0.0);
    }

    proptest! {
        #[test]
        fn overall_is_idempotent_and_monotone(x in 0.0f64..=100.0, y in 0.0f64..=100.0, d in 0.0f64..10.0) {
            prop_assert!((overall(x, x) - x).abs() < 1e-9);
            prop_assert!(overall(x + d, y) >= overall(x, y));
            prop_assert!(overall(x, y + d) >= overall(x, y));
        }

        #[test]
        fn bleu_self_is_perfect(c in proptest::collection::vec("[a-e]", 2..12)) {
            prop_assert!((bleu_n(&c, &c, 1).unwrap() - 100.0).abs() < 1e-9);
            prop_assert!((bleu_n(&c, &c, 2).unwrap() - 100.0).abs() < 1e-9);
        }

        #[test]
        fn bleu1_ignores_candidate_order(c in proptest::collection::vec("[a-e]", 1..12),
                                          r in proptest::collection::vec("[a-e]", 1..12)) {
            let mut rev = c.clone();
            rev.reverse();
            prop_assert!((bleu_n(&c, &r, 1).unwrap() - bleu_n(&rev, &r, 1).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn greedy_match_swaps(a in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 1..6),
                              b in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 1..6)) {
            let ab = greedy_match(&a, &b);
            let ba = greedy_match(&b, &a);
            prop_assert!((ab.precision - ba.recall).abs() < 1e-9);
            prop_assert!((ab.recall - ba.precision).abs() < 1e-9);
            prop_assert!((ab.f1 - ba.f1).abs() < 1e-9);
        }
    }
}
