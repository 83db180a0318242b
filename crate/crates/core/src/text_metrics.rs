//! Tokenization and text-overlap metrics: n-gram statistics, ROUGE-1,
//! ROUGE-L, and label-set classification metrics.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by metric computations.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("n-gram order must be at least 1")]
    ZeroNgramOrder,
    #[error("prediction/gold length mismatch: {preds} vs {golds}")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("metrics need at least one prediction/gold pair")]
    EmptyInput,
}

/// Token sequence produced by [`tokenize`]. Tokens are lowercase and never empty.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    tokens: Vec<String>,
}

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Counts of the sliding n-gram windows over one token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramStats {
    /// Window size the counts were taken at.
    pub n: usize,
    /// Number of windows, `max(0, len - n + 1)`.
    pub total: usize,
    /// Number of distinct windows.
    pub unique: usize,
}

/// Aggregate classification quality over parallel prediction/gold slices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Mean absolute error; present only when every label parses as a number.
    pub mae: Option<f64>,
    /// Root mean squared error; present only when every label parses as a number.
    pub rmse: Option<f64>,
}

fn is_cjk(ch: char) -> bool {
    matches!(ch,
        '\u{4E00}'..='\u{9FFF}'
        | '\u{3400}'..='\u{4DBF}'
        | '\u{F900}'..='\u{FAFF}'
        | '\u{3040}'..='\u{309F}'
        | '\u{30A0}'..='\u{30FF}')
}

/// Lowercases and splits text into tokens. Whitespace and punctuation
/// separate tokens and are dropped; contiguous CJK runs split per character.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut tokens = Vec::new();
    let mut buf = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if is_cjk(ch) {
                if !buf.is_empty() {
                    tokens.push(std::mem::take(&mut buf));
                }
                tokens.push(ch.to_string());
            } else {
                buf.extend(ch.to_lowercase());
            }
        } else if !buf.is_empty() {
            tokens.push(std::mem::take(&mut buf));
        }
    }
    if !buf.is_empty() {
        tokens.push(buf);
    }
    TokenSeq { tokens }
}

/// Total and unique n-gram window counts for one sequence.
pub fn ngram_stats(seq: &TokenSeq, n: usize) -> Result<NGramStats, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroNgramOrder);
    }
    if seq.len() < n {
        return Ok(NGramStats { n, total: 0, unique: 0 });
    }
    let windows: Vec<&[String]> = seq.tokens.windows(n).collect();
    let unique: HashSet<&&[String]> = windows.iter().collect();
    Ok(NGramStats { n, total: windows.len(), unique: unique.len() })
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn rouge1_tokens(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for tok in reference.tokens() {
        *ref_counts.entry(tok).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for tok in candidate.tokens() {
        if let Some(count) = ref_counts.get_mut(tok.as_str()) {
            if *count > 0 {
                *count -= 1;
                overlap += 1;
            }
        }
    }
    let precision = overlap as f64 / candidate.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    f1(precision, recall)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_tokens(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate.tokens(), reference.tokens()) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    f1(precision, recall)
}

/// Unigram-overlap F1 between candidate and reference, with clipped
/// multiset counts. Zero when either side tokenizes to nothing.
pub fn rouge1(candidate: &str, reference: &str) -> f64 {
    rouge1_tokens(&tokenize(candidate), &tokenize(reference))
}

/// Longest-common-subsequence F1 between candidate and reference.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

/// Accuracy, macro-averaged F1, and (for numeric labels) MAE/RMSE over
/// parallel prediction and gold slices.
pub fn classification_metrics<S: AsRef<str>>(
    preds: &[S],
    golds: &[S],
) -> Result<Metrics, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = preds.len() as f64;
    let matches = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref() == g.as_ref())
        .count();
    let accuracy = matches as f64 / n;

    let classes: BTreeSet<&str> = preds
        .iter()
        .map(AsRef::as_ref)
        .chain(golds.iter().map(AsRef::as_ref))
        .collect();
    let mut f1_sum = 0.0;
    for class in &classes {
        let tp = preds
            .iter()
            .zip(golds)
            .filter(|(p, g)| p.as_ref() == *class && g.as_ref() == *class)
            .count() as f64;
        let pred_count = preds.iter().filter(|p| p.as_ref() == *class).count() as f64;
        let gold_count = golds.iter().filter(|g| g.as_ref() == *class).count() as f64;
        let precision = if pred_count > 0.0 { tp / pred_count } else { 0.0 };
        let recall = if gold_count > 0.0 { tp / gold_count } else { 0.0 };
        f1_sum += f1(precision, recall);
    }
    let macro_f1 = f1_sum / classes.len() as f64;

    let numeric: Option<Vec<(f64, f64)>> = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| {
            let p = p.as_ref().trim().parse::<f64>().ok()?;
            let g = g.as_ref().trim().parse::<f64>().ok()?;
            Some((p, g))
        })
        .collect();
    let (mae, rmse) = match numeric {
        Some(pairs) => {
            let mae = pairs.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
            let mse = pairs.iter().map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n;
            (Some(mae), Some(mse.sqrt()))
        }
        None => (None, None),
    };

    Ok(Metrics { accuracy, macro_f1, mae, rmse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-9;

    fn seq(tokens: &[&str]) -> TokenSeq {
        TokenSeq { tokens: tokens.iter().map(|t| t.to_string()).collect() }
    }

    #[test]
    fn tokenize_lowercases_and_drops_punctuation() {
        assert_eq!(tokenize("The cat, the CAT.").tokens(), &["the", "cat", "the", "cat"]);
    }

    #[test]
    fn tokenize_empty_text_yields_no_tokens() {
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_splits_on_interior_punctuation() {
        // Oracle: regex split on non-alphanumeric runs of the lowercased text.
        let re = regex::Regex::new(r"[^0-9a-z]+").unwrap();
        let oracle: Vec<&str> = re.split("a-b c").filter(|t| !t.is_empty()).collect();
        assert_eq!(oracle, vec!["a", "b", "c"]);
        assert_eq!(tokenize("a-b c").tokens(), oracle.as_slice());
    }

    #[test]
    fn tokenize_splits_cjk_runs_per_character() {
        assert_eq!(tokenize("我喜欢 rust").tokens(), &["我", "喜", "欢", "rust"]);
    }

    #[test]
    fn ngram_stats_counts_windows() {
        let stats = ngram_stats(&seq(&["a", "b", "a", "b"]), 2).unwrap();
        // Windows: ab, ba, ab.
        assert_eq!(stats.total, 3);
        assert_eq!(stats.unique, 2);
    }

    #[test]
    fn ngram_stats_on_identical_tokens() {
        let tokens = vec!["x"; 10];
        let stats = ngram_stats(&seq(&tokens), 4).unwrap();
        assert_eq!(stats.total, 7);
        assert_eq!(stats.unique, 1);
    }

    #[test]
    fn ngram_stats_short_sequence_has_no_windows() {
        let stats = ngram_stats(&seq(&["a", "b"]), 3).unwrap();
        assert_eq!(stats.total, 0);
        assert_eq!(stats.unique, 0);
    }

    #[test]
    fn ngram_stats_rejects_order_zero() {
        assert_eq!(ngram_stats(&seq(&["a"]), 0), Err(MetricsError::ZeroNgramOrder));
    }

    /// Independent overlap count: sorted-merge intersection of the two
    /// token multisets, used as an oracle for the clipped-count route.
    fn multiset_overlap_oracle(a: &TokenSeq, b: &TokenSeq) -> usize {
        let mut xs: Vec<&String> = a.tokens().iter().collect();
        let mut ys: Vec<&String> = b.tokens().iter().collect();
        xs.sort();
        ys.sort();
        let (mut i, mut j, mut shared) = (0, 0, 0);
        while i < xs.len() && j < ys.len() {
            match xs[i].cmp(ys[j]) {
                std::cmp::Ordering::Equal => {
                    shared += 1;
                    i += 1;
                    j += 1;
                }
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
            }
        }
        shared
    }

    #[test]
    fn rouge1_identical_sentences_score_one() {
        assert!((rouge1("the cat sat", "the cat sat") - 1.0).abs() < TOL);
    }

    #[test]
    fn rouge1_disjoint_sentences_score_zero() {
        assert!(rouge1("dog ran", "the cat sat").abs() < TOL);
    }

    #[test]
    fn rouge1_partial_overlap_matches_hand_computation() {
        let cand = "the cat on mat";
        let reference = "the cat sat on mat";
        let overlap =
            multiset_overlap_oracle(&tokenize(cand), &tokenize(reference)) as f64;
        assert_eq!(overlap, 4.0);
        let (p, r) = (overlap / 4.0, overlap / 5.0);
        let expected = 2.0 * p * r / (p + r);
        assert!((expected - 0.888_888_888_888_889).abs() < TOL);
        assert!((rouge1(cand, reference) - expected).abs() < TOL);
    }

    /// Exhaustive LCS oracle over all candidate subsequences; fine for the
    /// short sequences used in tests.
    fn lcs_oracle(a: &[String], b: &[String]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<&String> =
                a.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, t)| t).collect();
            let mut it = b.iter();
            if sub.iter().all(|s| it.any(|t| t == *s)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    #[test]
    fn rouge_l_identical_sentences_score_one() {
        assert!((rouge_l("a b c", "a b c") - 1.0).abs() < TOL);
    }

    #[test]
    fn rouge_l_order_swap_halves_score() {
        let (cand, reference) = ("b a d c", "a b c d");
        let oracle = lcs_oracle(tokenize(cand).tokens(), tokenize(reference).tokens());
        assert_eq!(oracle, 2);
        assert_eq!(lcs_len(tokenize(cand).tokens(), tokenize(reference).tokens()), oracle);
        assert!((rouge_l(cand, reference) - 0.5).abs() < TOL);
    }

    #[test]
    fn rouge_l_empty_side_scores_zero() {
        assert!(rouge_l("", "a b").abs() < TOL);
        assert!(rouge_l("a b", "").abs() < TOL);
    }

    #[test]
    fn classification_metrics_mixed_pair() {
        let m = classification_metrics(&["1", "1"], &["1", "2"]).unwrap();
        assert!((m.accuracy - 0.5).abs() < TOL);
        assert!((m.mae.unwrap() - 0.5).abs() < TOL);
        assert!((m.rmse.unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < TOL);
    }

    #[test]
    fn classification_metrics_perfect_predictions() {
        let m = classification_metrics(&["a", "b", "a"], &["a", "b", "a"]).unwrap();
        assert!((m.accuracy - 1.0).abs() < TOL);
        assert!((m.macro_f1 - 1.0).abs() < TOL);
        assert_eq!(m.mae, None);
        assert_eq!(m.rmse, None);
    }

    #[test]
    fn classification_metrics_rejects_mismatched_lengths() {
        assert_eq!(
            classification_metrics(&["a"], &["a", "b"]),
            Err(MetricsError::LengthMismatch { preds: 1, golds: 2 })
        );
    }

    #[test]
    fn classification_metrics_rejects_empty_input() {
        let empty: [&str; 0] = [];
        assert_eq!(classification_metrics(&empty, &empty), Err(MetricsError::EmptyInput));
    }

    fn token_strategy() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec("[a-e]{1,3}", 0..20)
    }

    proptest! {
        #[test]
        fn tokenize_yields_lowercase_nonempty_tokens(text in "\\PC{0,60}") {
            for tok in tokenize(&text).tokens() {
                prop_assert!(!tok.is_empty());
                prop_assert_eq!(tok.clone(), tok.to_lowercase());
            }
        }

        #[test]
        fn ngram_unique_bounded_by_total(tokens in token_strategy(), n in 1usize..5) {
            let stats = ngram_stats(&TokenSeq { tokens: tokens.clone() }, n).unwrap();
            prop_assert_eq!(stats.total, tokens.len().saturating_sub(n - 1));
            if stats.total > 0 {
                prop_assert!(stats.unique >= 1 && stats.unique <= stats.total);
            } else {
                prop_assert_eq!(stats.unique, 0);
            }
        }

        #[test]
        fn rouge_scores_stay_in_unit_interval(a in "[a-e ]{0,30}", b in "[a-e ]{0,30}") {
            for score in [rouge1(&a, &b), rouge_l(&a, &b)] {
                prop_assert!((0.0..=1.0).contains(&score));
            }
        }

        #[test]
        fn rouge_f1_is_symmetric(a in "[a-e ]{0,30}", b in "[a-e ]{0,30}") {
            prop_assert!((rouge1(&a, &b) - rouge1(&b, &a)).abs() < TOL);
            prop_assert!((rouge_l(&a, &b) - rouge_l(&b, &a)).abs() < TOL);
        }

        #[test]
        fn rmse_dominates_mae(pairs in prop::collection::vec((0i32..10, 0i32..10), 1..30)) {
            let preds: Vec<String> = pairs.iter().map(|(p, _)| p.to_string()).collect();
            let golds: Vec<String> = pairs.iter().map(|(_, g)| g.to_string()).collect();
            let m = classification_metrics(&preds, &golds).unwrap();
            prop_assert!(m.rmse.unwrap() + TOL >= m.mae.unwrap());
            prop_assert!((0.0..=1.0).contains(&m.accuracy));
            prop_assert!((0.0..=1.0).contains(&m.macro_f1));
        }
    }
}
