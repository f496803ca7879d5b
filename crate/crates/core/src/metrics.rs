//! BLEU, ROUGE-1/2/L and Distinct-n over whitespace tokens of lowercased text.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{hyps} hypotheses but {refs} references")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("hypothesis {0} has no reference")]
    NoReference(usize),
}

pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngrams(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if n == 0 || toks.len() < n {
        return out;
    }
    for w in toks.windows(n) {
        *out.entry(w).or_insert(0) += 1;
    }
    out
}

fn check<T>(hyps: &[String], refs: &[T]) -> Result<(), MetricError> {
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if hyps.len() != refs.len() {
        return Err(MetricError::CountMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    Ok(())
}

/// Corpus BLEU with uniform weights over n = 1..=max_n.
///
/// Clipped counts use the per-n-gram maximum over a hypothesis' references;
/// the reference length for the brevity penalty is the closest one (shorter
/// wins ties). When any precision is zero, precisions for n ≥ 2 get +1 on
/// numerator and denominator.
pub fn bleu(hyps: &[String], refs: &[Vec<String>], max_n: usize) -> Result<f64, MetricError> {
    check(hyps, refs)?;
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (i, (h, rs)) in hyps.iter().zip(refs).enumerate() {
        if rs.is_empty() {
            return Err(MetricError::NoReference(i));
        }
        let ht = tokens(h);
        let rts: Vec<Vec<String>> = rs.iter().map(|r| tokens(r)).collect();
        hyp_len += ht.len();
        ref_len += rts
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(ht.len()), l))
            .expect("non-empty");
        for n in 1..=max_n {
            let hc = ngrams(&ht, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &rts {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let smooth = matches.iter().any(|&m| m == 0);
    let log_p: f64 = (0..max_n)
        .map(|k| {
            let (m, t) = if smooth && k >= 1 {
                (matches[k] + 1, totals[k] + 1)
            } else {
                (matches[k], totals[k])
            };
            (m as f64 / t as f64).ln()
        })
        .sum::<f64>()
        / max_n as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    R1,
    R2,
    RL,
}

fn f1(overlap: usize, hyp: usize, reference: usize) -> f64 {
    if hyp == 0 && reference == 0 {
        return 1.0;
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

fn lcs(a: &[String], b: &[String]) -> usize {
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

/// ROUGE F1 of one pair.
pub fn rouge_pair(hyp: &str, reference: &str, variant: RougeVariant) -> f64 {
    let h = tokens(hyp);
    let r = tokens(reference);
    match variant {
        RougeVariant::RL => f1(lcs(&h, &r), h.len(), r.len()),
        RougeVariant::R1 | RougeVariant::R2 => {
            let n = if variant == RougeVariant::R1 { 1 } else { 2 };
            let hc = ngrams(&h, n);
            let rc = ngrams(&r, n);
            let overlap = hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum();
            f1(overlap, hc.values().sum(), rc.values().sum())
        }
    }
}

/// Macro-average over pairs of per-pair F1; with several references a pair
/// takes its best one.
pub fn rouge(hyps: &[String], refs: &[Vec<String>], variant: RougeVariant) -> Result<f64, MetricError> {
    check(hyps, refs)?;
    let mut sum = 0.0;
    for (i, (h, rs)) in hyps.iter().zip(refs).enumerate() {
        let best = rs
            .iter()
            .map(|r| rouge_pair(h, r, variant))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or(MetricError::NoReference(i))?;
        sum += best;
    }
    Ok(sum / hyps.len() as f64)
}

/// Unique n-grams over total n-grams across the whole corpus.
pub fn distinct(hyps: &[String], n: usize) -> Result<f64, MetricError> {
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let toks: Vec<Vec<String>> = hyps.iter().map(|h| tokens(h)).collect();
    let mut unique = HashSet::new();
    let mut total = 0;
    for t in &toks {
        if t.len() >= n && n > 0 {
            for w in t.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { unique.len() as f64 / total as f64 })
}

/// Metric names in report order.
pub const METRICS: [&str; 9] = [
    "bleu1", "bleu2", "bleu3", "bleu4", "rouge1", "rouge2", "rougeL", "distinct1", "distinct2",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Scores in [0, 1], keyed by [`METRICS`] names.
    pub scores: BTreeMap<String, f64>,
    pub corpus_size: usize,
    pub rouge_aggregation: &'static str,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.scores.get(name).copied()
    }

    /// Fixed-order table, scores ×100.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>8}\n", "metric", "score");
        for name in METRICS {
            if let Some(v) = self.scores.get(name) {
                out.push_str(&format!("{name:<10} {:>8.2}\n", v * 100.0));
            }
        }
        out.push_str(&format!("{:<10} {:>8}\n", "n", self.corpus_size));
        out
    }

    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn evaluate(hyps: &[String], refs: &[Vec<String>], config: BTreeMap<String, String>) -> Result<EvalReport, MetricError> {
    let mut scores = BTreeMap::new();
    for n in 1..=4 {
        scores.insert(format!("bleu{n}"), bleu(hyps, refs, n)?);
    }
    scores.insert("rouge1".into(), rouge(hyps, refs, RougeVariant::R1)?);
    scores.insert("rouge2".into(), rouge(hyps, refs, RougeVariant::R2)?);
    scores.insert("rougeL".into(), rouge(hyps, refs, RougeVariant::RL)?);
    scores.insert("distinct1".into(), distinct(hyps, 1)?);
    scores.insert("distinct2".into(), distinct(hyps, 2)?);
    Ok(EvalReport {
        scores,
        corpus_size: hyps.len(),
        rouge_aggregation: "macro-f1",
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn one_ref(v: &[&str]) -> Vec<Vec<String>> {
        v.iter().map(|x| vec![x.to_string()]).collect()
    }

    #[test]
    fn bleu_fixtures() {
        assert_eq!(bleu(&s(&["the cat sat"]), &one_ref(&["the cat sat"]), 1).unwrap(), 1.0);
        assert!((bleu(&s(&["the cat sat"]), &one_ref(&["the cat sat"]), 4).unwrap() - 1.0).abs() < 1e-12);
        let b = bleu(&s(&["the the the"]), &one_ref(&["the cat"]), 1).unwrap();
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(bleu(&[], &[], 4), Err(MetricError::EmptyCorpus));
        assert!(matches!(bleu(&s(&["a"]), &[], 4), Err(MetricError::CountMismatch { .. })));
    }

    #[test]
    fn bleu_brevity_penalty_and_smoothing_by_hand() {
        // hyp "a b" vs ref "a b c d": p1 = 1, p2 = 1, BP = exp(1 - 4/2)
        let b = bleu(&s(&["a b"]), &one_ref(&["a b c d"]), 2).unwrap();
        assert!((b - (-1.0f64).exp()).abs() < 1e-12);
        // hyp "a x b" vs ref "a y b": p1 = 2/3, p2 = 0/2 -> smoothed 1/3
        let b = bleu(&s(&["a x b"]), &one_ref(&["a y b"]), 2).unwrap();
        assert!((b - (2.0f64 / 3.0 * 1.0 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bleu_multi_reference_clipping() {
        // "the" clipped at max over refs (2), closest ref length 3
        let refs = vec![vec!["the cat".to_string(), "the the dog".to_string()]];
        let b = bleu(&s(&["the the the"]), &refs, 1).unwrap();
        assert!((b - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_fixtures() {
        let rl = rouge(&s(&["a b c d"]), &one_ref(&["a c d"]), RougeVariant::RL).unwrap();
        assert!((rl - 6.0 / 7.0).abs() < 1e-12);
        for v in [RougeVariant::R1, RougeVariant::R2, RougeVariant::RL] {
            assert_eq!(rouge(&s(&["x y z"]), &one_ref(&["x y z"]), v).unwrap(), 1.0);
            assert_eq!(rouge(&s(&["x y z"]), &one_ref(&["p q"]), v).unwrap(), 0.0);
        }
        // r2: bigrams {ab, bc, cd} vs {ac, cd}: overlap 1, P = 1/3, R = 1/2
        let r2 = rouge(&s(&["a b c d"]), &one_ref(&["a c d"]), RougeVariant::R2).unwrap();
        assert!((r2 - 0.4).abs() < 1e-12);
        assert_eq!(rouge(&[], &[], RougeVariant::R1), Err(MetricError::EmptyCorpus));
    }

    #[test]
    fn rouge_is_macro_averaged() {
        let r = rouge(&s(&["a", "b"]), &one_ref(&["a", "c"]), RougeVariant::R1).unwrap();
        assert_eq!(r, 0.5);
    }

    #[test]
    fn distinct_fixtures() {
        assert_eq!(distinct(&s(&["a b c d e"]), 4).unwrap(), 1.0);
        assert_eq!(distinct(&s(&["a a a a a"]), 2).unwrap(), 0.25);
        let one = distinct(&s(&["a b c a"]), 1).unwrap();
        let two = distinct(&s(&["a b c a", "a b c a"]), 1).unwrap();
        assert!((two - one / 2.0).abs() < 1e-12);
        assert_eq!(distinct(&[], 1), Err(MetricError::EmptyCorpus));
    }

    #[test]
    fn report_table_order() {
        let r = evaluate(&s(&["a b c"]), &one_ref(&["a b c"]), BTreeMap::new()).unwrap();
        let t = r.table();
        let pos: Vec<usize> = METRICS.iter().map(|m| t.find(&format!("{m} ")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(r.json_line().contains("\"rouge_aggregation\":\"macro-f1\""));
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 1..8).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn scores_in_unit_range_and_identity_is_one(h in prop::collection::vec(sentence(), 1..5), r in prop::collection::vec(sentence(), 5)) {
            let refs: Vec<Vec<String>> = r[..h.len()].iter().map(|x| vec![x.clone()]).collect();
            let rep = evaluate(&h, &refs, BTreeMap::new()).unwrap();
            for v in rep.scores.values() {
                prop_assert!((0.0..=1.0 + 1e-12).contains(v));
            }
            let same: Vec<Vec<String>> = h.iter().map(|x| vec![x.clone()]).collect();
            prop_assert!((bleu(&h, &same, 4).unwrap() - 1.0).abs() < 1e-9);
            for v in [RougeVariant::R1, RougeVariant::R2, RougeVariant::RL] {
                prop_assert!((rouge(&h, &same, v).unwrap() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn appending_unrelated_text_lowers_precision(h in sentence(), r in sentence()) {
            let ht = tokens(&h);
            let rt = tokens(&r);
            let padded = format!("{h} zz yy");
            let pt = tokens(&padded);
            let overlap = |a: &[String]| {
                let hc = ngrams(a, 1);
                let rc = ngrams(&rt, 1);
                hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum::<usize>()
            };
            let (o1, o2) = (overlap(&ht), overlap(&pt));
            prop_assert_eq!(o1, o2);
            prop_assert!(o2 as f64 / rt.len() as f64 <= 1.0);
            if o1 > 0 {
                prop_assert!((o2 as f64 / pt.len() as f64) < (o1 as f64 / ht.len() as f64));
            }
        }
    }
}
