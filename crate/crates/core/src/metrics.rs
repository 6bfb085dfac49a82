//! Corpus-level chrF++ and BLEU-4.
//!
//! Text is NFC-normalized first. Character n-grams ignore whitespace entirely;
//! word tokens are whitespace-separated with leading and trailing punctuation
//! peeled off into tokens of their own.

use std::collections::HashMap;
use std::hash::Hash;

use log::warn;
use unicode_categories::UnicodeCategories;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChrFConfig {
    pub char_order: usize,
    pub word_order: usize,
    pub beta: f64,
}

impl Default for ChrFConfig {
    fn default() -> Self {
        ChrFConfig {
            char_order: 6,
            word_order: 2,
            beta: 2.0,
        }
    }
}

/// Per-order `(matched, hypothesis, reference)` n-gram counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NGramStats {
    pub matched: Vec<u64>,
    pub hyp: Vec<u64>,
    pub reference: Vec<u64>,
}

impl NGramStats {
    fn new(orders: usize) -> Self {
        NGramStats {
            matched: vec![0; orders],
            hyp: vec![0; orders],
            reference: vec![0; orders],
        }
    }

    fn add_segment<K: Hash + Eq + Clone>(&mut self, hyp: &[K], reference: &[K]) {
        for n in 1..=self.matched.len() {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.hyp[n - 1] += h.values().sum::<u64>();
            self.reference[n - 1] += r.values().sum::<u64>();
            self.matched[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }
}

fn ngram_counts<K: Hash + Eq + Clone>(seq: &[K], n: usize) -> HashMap<&[K], u64> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

pub fn normalize(text: &str) -> String {
    text.nfc().collect()
}

/// Characters of `text` with all whitespace removed.
pub fn chars_no_space(text: &str) -> Vec<char> {
    normalize(text).chars().filter(|c| !c.is_whitespace()).collect()
}

/// Whitespace tokens with leading/trailing punctuation split into separate tokens.
pub fn word_tokens(text: &str) -> Vec<String> {
    let text = normalize(text);
    let mut out = Vec::new();
    for tok in text.split_whitespace() {
        let chars: Vec<char> = tok.chars().collect();
        let lead = chars.iter().take_while(|c| c.is_punctuation()).count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| c.is_punctuation()).count();
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    out
}

fn check_lengths(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Usage(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::Usage("empty corpus".into()));
    }
    Ok(())
}

/// Accumulated character and word statistics for a corpus.
pub fn chrf_stats(
    hyps: &[impl AsRef<str>],
    refs: &[impl AsRef<str>],
    cfg: &ChrFConfig,
) -> Result<(NGramStats, NGramStats)> {
    check_lengths(hyps, refs)?;
    let mut chars = NGramStats::new(cfg.char_order);
    let mut words = NGramStats::new(cfg.word_order);
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        let (h, r) = (h.as_ref(), r.as_ref());
        if r.trim().is_empty() {
            warn!("reference segment {i} is empty; it contributes no n-grams");
            continue;
        }
        chars.add_segment(&chars_no_space(h), &chars_no_space(r));
        words.add_segment(&word_tokens(h), &word_tokens(r));
    }
    Ok((chars, words))
}

fn f_beta(matched: u64, hyp: u64, reference: u64, beta: f64) -> f64 {
    let p = if hyp > 0 { matched as f64 / hyp as f64 } else { 0.0 };
    let r = if reference > 0 {
        matched as f64 / reference as f64
    } else {
        0.0
    };
    let b2 = beta * beta;
    let denom = b2 * p + r;
    if denom > 0.0 {
        (1.0 + b2) * p * r / denom
    } else {
        0.0
    }
}

/// Corpus chrF++ in `[0, 100]`: the mean per-order F-beta over every order
/// for which either side has n-grams.
pub fn chrfpp(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>], cfg: &ChrFConfig) -> Result<f64> {
    let (chars, words) = chrf_stats(hyps, refs, cfg)?;
    let mut total = 0.0;
    let mut orders = 0usize;
    for stats in [&chars, &words] {
        for n in 0..stats.matched.len() {
            if stats.hyp[n] + stats.reference[n] == 0 {
                continue;
            }
            total += f_beta(stats.matched[n], stats.hyp[n], stats.reference[n], cfg.beta);
            orders += 1;
        }
    }
    Ok(if orders == 0 { 0.0 } else { 100.0 * total / orders as f64 })
}

pub fn brevity_penalty(hyp_len: u64, ref_len: u64) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Corpus BLEU-4 without smoothing.
pub fn bleu(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let mut stats = NGramStats::new(4);
    let (mut hyp_len, mut ref_len) = (0u64, 0u64);
    for (h, r) in hyps.iter().zip(refs) {
        let h = word_tokens(h.as_ref());
        let r = word_tokens(r.as_ref());
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        stats.add_segment(&h, &r);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if stats.matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (stats.matched[n] as f64 / stats.hyp[n] as f64).ln();
    }
    Ok(100.0 * brevity_penalty(hyp_len, ref_len) * (log_sum / 4.0).exp())
}

/// `metric<TAB>score` with four decimals.
pub fn format_score(metric: &str, score: f64) -> String {
    format!("{metric}\t{score:.4}")
}
