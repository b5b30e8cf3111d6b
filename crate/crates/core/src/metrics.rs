//! Translation quality (BLEU, ROUGE-L, token accuracy), latency (AL, AP)
//! and boundary detection scores.
//!
//! BLEU is corpus-level on a 0–100 scale over whitespace tokens. A zero
//! n-gram match count is replaced by [`BLEU_EPSILON`] so higher orders stay
//! defined; an order for which the hypotheses hold no n-grams at all (every
//! sentence shorter than `n`) is left out of the geometric mean. ROUGE-L is the sentence-level LCS F1 (β = 1) averaged over the
//! corpus, on a 0–1 scale.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::engine::EmissionLog;
use crate::error::{Error, Result};

pub const BLEU_EPSILON: f64 = 1e-9;

fn counts(tokens: &[String], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(String::as_str).collect()).or_insert(0) += 1;
        }
    }
    out
}

fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn check_corpus(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Data("empty hypothesis set".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    Ok(())
}

/// Cumulative BLEU-1 … BLEU-`max_n` (index `n−1` holds BLEU-n).
pub fn bleu(hyps: &[String], refs: &[String], max_n: usize) -> Result<Vec<f64>> {
    check_corpus(hyps, refs)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (tokenize(h), tokenize(r));
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let hc = counts(&h, n);
            let rc = counts(&r, n);
            total[n - 1] += h.len().saturating_sub(n - 1);
            matched[n - 1] += hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if hyp_len == 0 {
        return Ok(vec![0.0; max_n]);
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let mut log_sum = 0.0;
    let mut orders = 0;
    let mut out = Vec::with_capacity(max_n);
    for n in 0..max_n {
        if total[n] > 0 {
            let p = if matched[n] == 0 {
                BLEU_EPSILON / total[n] as f64
            } else {
                matched[n] as f64 / total[n] as f64
            };
            log_sum += p.ln();
            orders += 1;
        }
        out.push(100.0 * bp * (log_sum / orders as f64).exp());
    }
    Ok(out)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS precision, recall and F1 for one pair.
pub fn rouge_l_sentence(hyp: &str, reference: &str) -> (f64, f64, f64) {
    let (h, r) = (tokenize(hyp), tokenize(reference));
    if h.is_empty() || r.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let l = lcs(&h, &r) as f64;
    let (p, rec) = (l / h.len() as f64, l / r.len() as f64);
    let f = if l == 0.0 { 0.0 } else { 2.0 * p * rec / (p + rec) };
    (p, rec, f)
}

pub fn rouge_l(hyps: &[String], refs: &[String]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| rouge_l_sentence(h, r).2).sum::<f64>() / hyps.len() as f64)
}

fn check_log(log: &EmissionLog) -> Result<()> {
    if log.emissions.is_empty() {
        return Err(Error::Data(format!("stream {} emitted no tokens", log.stream_id)));
    }
    if log.total_frames == 0 || !(log.frame_interval > 0.0) {
        return Err(Error::Data("emission log needs frames and a positive frame interval".into()));
    }
    Ok(())
}

/// Average lagging over the tokens up to the first one written after the
/// whole source was read (or all tokens if none was).
pub fn average_lagging(log: &EmissionLog, ref_len: usize) -> Result<f64> {
    check_log(log)?;
    if ref_len == 0 {
        return Err(Error::Data("reference length must be at least 1".into()));
    }
    let reads = log.frames_read();
    let tau = reads
        .iter()
        .position(|&f| f >= log.total_frames)
        .map_or(reads.len(), |i| i + 1);
    let ts = log.frame_interval;
    let rate = log.total_frames as f64 / ref_len as f64;
    let sum: f64 = reads[..tau]
        .iter()
        .enumerate()
        .map(|(i, &f)| ts * f as f64 - rate * ts * i as f64)
        .sum();
    Ok(sum / tau as f64)
}

/// Average proportion of the source read before each token.
pub fn average_proportion(log: &EmissionLog) -> Result<f64> {
    check_log(log)?;
    let ts = log.frame_interval;
    let sum: f64 = log.frames_read().iter().map(|&f| ts * f as f64).sum();
    Ok(sum / (ts * log.total_frames as f64 * log.emissions.len() as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub predicted: usize,
    pub actual: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.true_positives += other.true_positives;
        self.predicted += other.predicted;
        self.actual += other.actual;
    }

    pub fn f1(&self) -> f64 {
        if self.predicted + self.actual == 0 {
            return 1.0;
        }
        2.0 * self.true_positives as f64 / (self.predicted + self.actual) as f64
    }
}

/// Greedy one-to-one matching of predicted to true boundary frames within
/// `tolerance` frames, taking the closest available true frame first.
pub fn boundary_matches(predicted: &[usize], actual: &[usize], tolerance: usize) -> MatchCounts {
    let mut used = vec![false; actual.len()];
    let mut tp = 0;
    for &p in predicted {
        let best = actual
            .iter()
            .enumerate()
            .filter(|(j, &a)| !used[*j] && a.abs_diff(p) <= tolerance)
            .min_by_key(|(j, &a)| (a.abs_diff(p), *j));
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    MatchCounts {
        true_positives: tp,
        predicted: predicted.len(),
        actual: actual.len(),
    }
}

/// Position-wise accuracy of `hyp` against `reference` (counted over the
/// reference length).
pub fn token_matches(hyp: &[usize], reference: &[usize]) -> (usize, usize) {
    let correct = hyp.iter().zip(reference).filter(|(a, b)| a == b).count();
    (correct, reference.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Emission;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn log(reads: &[usize], total: usize, ts: f64) -> EmissionLog {
        let mut l = EmissionLog::new(0, total, ts);
        for &f in reads {
            l.emissions.push(Emission {
                token: 3,
                frames_read: f,
                boundary_count: 0,
                tail: f == total,
            });
        }
        l
    }

    #[test]
    fn bleu_cases() {
        let refs = s(&["a b c d e", "x y z w"]);
        assert_eq!(bleu(&refs, &refs, 4).unwrap()[3], 100.0);
        let disjoint = bleu(&s(&["p q r s t", "m n o k"]), &refs, 4).unwrap();
        assert!(disjoint[0] < 1e-6);
        let short = bleu(&s(&["a b c d"]), &s(&["a b c d e"]), 4).unwrap();
        assert!((short[3] - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
        assert!(bleu(&[], &[], 4).is_err());
        let words = s(&["a", "b c"]);
        assert_eq!(bleu(&words, &words, 4).unwrap(), vec![100.0; 4]);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&s(&["a b c"]), &s(&["a b c"])).unwrap(), 1.0);
        assert_eq!(rouge_l(&s(&["d e"]), &s(&["a b c"])).unwrap(), 0.0);
        let (p, r, _) = rouge_l_sentence("a c", "a b c");
        assert_eq!(p, 1.0);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn latency_cases() {
        let l = log(&[2, 4], 4, 1.0);
        assert_eq!(average_lagging(&l, 2).unwrap(), 2.0);
        assert_eq!(average_proportion(&l).unwrap(), 0.75);
        let wait = log(&[7, 7, 7], 7, 0.5);
        assert_eq!(average_lagging(&wait, 3).unwrap(), 3.5);
        assert_eq!(average_proportion(&wait).unwrap(), 1.0);
        assert_eq!(average_proportion(&log(&[1], 10, 1.0)).unwrap(), 0.1);
        assert!(average_lagging(&log(&[], 4, 1.0), 2).is_err());
    }

    #[test]
    fn boundary_matching() {
        let m = boundary_matches(&[3, 9, 10], &[4, 8, 15], 2);
        assert_eq!(m.true_positives, 2);
        assert!((m.f1() - 4.0 / 6.0).abs() < 1e-12);
        let m = boundary_matches(&[5, 5], &[5], 2);
        assert_eq!(m.true_positives, 1);
    }
}
