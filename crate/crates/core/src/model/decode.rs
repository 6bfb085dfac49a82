use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::Scalar;

use super::transformer::{Encoded, TransformerModel, BOS, EOS};

/// Decoding limits and length normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Output length cap: `max_len_factor * src_len + max_len_slack`.
    pub max_len_factor: f64,
    pub max_len_slack: usize,
    /// Exponent of the `((5 + len) / 6)^alpha` length penalty.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            max_len_factor: 1.5,
            max_len_slack: 10,
            length_penalty: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn with_beam(beam: usize) -> Self {
        DecodeConfig {
            beam,
            ..Self::default()
        }
    }

    pub fn max_len(&self, src_len: usize) -> usize {
        (self.max_len_factor * src_len as f64).floor() as usize + self.max_len_slack
    }
}

pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Source of next-token log-probabilities for a set of prefixes that all
/// condition on the same input.
pub trait StepScorer {
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Model conditioned on one encoded source.
pub struct ModelScorer<'m, T> {
    model: &'m TransformerModel<T>,
    enc: Encoded<T>,
}

impl<'m, T: Scalar> ModelScorer<'m, T> {
    pub fn new(model: &'m TransformerModel<T>, src: &[usize]) -> Result<Self> {
        Ok(ModelScorer {
            model,
            enc: model.encode(&[src.to_vec()])?,
        })
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let enc = self.enc.repeat(0, prefixes.len());
        let logits = self.model.next_logits(&enc, prefixes)?;
        Ok(log_softmax_rows(logits.data(), logits.last_dim()))
    }
}

pub(crate) fn log_softmax_rows<T: Scalar>(data: &[T], v: usize) -> Vec<Vec<f64>> {
    data.chunks(v)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|x| x.to_f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter().map(|x| x - lse).collect()
        })
        .collect()
}

/// First index of the maximum; ties go to the lowest id.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Output tokens without BOS; EOS is dropped when the hypothesis finished.
fn strip(seq: &[usize]) -> Vec<usize> {
    let body = &seq[1..];
    match body.last() {
        Some(&EOS) => body[..body.len() - 1].to_vec(),
        _ => body.to_vec(),
    }
}

/// Greedy decoding through any scorer.
pub fn greedy_with(scorer: &dyn StepScorer, max_len: usize) -> Result<Vec<usize>> {
    let mut seq = vec![BOS];
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(std::slice::from_ref(&seq))?;
        let next = argmax(&lp[0]);
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(strip(&seq))
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
}

/// Length-normalized beam search through any scorer.
///
/// Each step expands the live beams and ranks the best `2*beam` candidates.
/// EOS candidates ranked within the first `beam` are finalized, the rest are
/// dropped; up to `beam` non-EOS candidates stay live. Search stops once `beam`
/// hypotheses are finalized or `max_len` tokens were produced.
pub fn beam_search_with(scorer: &dyn StepScorer, cfg: &DecodeConfig, max_len: usize) -> Result<Vec<usize>> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let mut live = vec![Hyp {
        tokens: vec![BOS],
        logp: 0.0,
    }];
    let mut finished: Vec<(f64, Hyp)> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, (h, lp)) in live.iter().zip(&lps).enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                cands.push((h.logp + l, hi, tok));
            }
        }
        // Stable: ties keep beam order, then token order.
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
        let mut next = Vec::with_capacity(cfg.beam);
        for (rank, &(logp, hi, tok)) in cands.iter().take(2 * cfg.beam).enumerate() {
            let mut tokens = live[hi].tokens.clone();
            tokens.push(tok);
            let hyp = Hyp { tokens, logp };
            if tok == EOS {
                // Only EOS candidates ranked inside the beam are finalized.
                if rank < cfg.beam {
                    let len = hyp.tokens.len() - 1;
                    finished.push((logp / length_penalty(len, cfg.length_penalty), hyp));
                }
            } else if next.len() < cfg.beam {
                next.push(hyp);
            }
        }
        if finished.len() >= cfg.beam || next.is_empty() {
            break;
        }
        live = next;
    }
    let best_finished = finished
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(ib.cmp(ia)))
        .map(|(_, (_, h))| h.tokens.clone());
    match best_finished {
        Some(t) => Ok(strip(&t)),
        None => {
            let best = live
                .iter()
                .max_by(|a, b| {
                    let na = a.logp / length_penalty(a.tokens.len() - 1, cfg.length_penalty);
                    let nb = b.logp / length_penalty(b.tokens.len() - 1, cfg.length_penalty);
                    na.partial_cmp(&nb).unwrap_or(Ordering::Equal)
                })
                .expect("live beam");
            Ok(strip(&best.tokens))
        }
    }
}

impl<T: Scalar> TransformerModel<T> {
    pub fn greedy_decode(&self, src: &[usize], cfg: &DecodeConfig) -> Result<Vec<usize>> {
        let scorer = ModelScorer::new(self, src)?;
        greedy_with(&scorer, cfg.max_len(src.len()))
    }

    pub fn beam_search(&self, src: &[usize], cfg: &DecodeConfig) -> Result<Vec<usize>> {
        let scorer = ModelScorer::new(self, src)?;
        beam_search_with(&scorer, cfg, cfg.max_len(src.len()))
    }

    /// Batched greedy decoding for evaluation throughput.
    pub fn greedy_decode_batch(&self, srcs: &[Vec<usize>], cfg: &DecodeConfig) -> Result<Vec<Vec<usize>>> {
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        let enc = self.encode(srcs)?;
        let limits: Vec<usize> = srcs.iter().map(|s| cfg.max_len(s.len())).collect();
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; srcs.len()];
        let mut done = vec![false; srcs.len()];
        let steps = *limits.iter().max().unwrap();
        for _ in 0..steps {
            let active: Vec<usize> = (0..srcs.len()).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }
            let sub = subset(&enc, &active);
            let prefixes: Vec<Vec<usize>> = active.iter().map(|&i| seqs[i].clone()).collect();
            let logits = self.next_logits(&sub, &prefixes)?;
            let lps = log_softmax_rows(logits.data(), logits.last_dim());
            for (&i, lp) in active.iter().zip(&lps) {
                let tok = argmax(lp);
                seqs[i].push(tok);
                if tok == EOS || seqs[i].len() > limits[i] {
                    done[i] = true;
                }
            }
        }
        Ok(seqs.iter().map(|s| strip(s)).collect())
    }
}

fn subset<T: Scalar>(enc: &Encoded<T>, rows: &[usize]) -> Encoded<T> {
    let d = enc.states.last_dim();
    let l = enc.padded_len();
    let mut data = Vec::with_capacity(rows.len() * l * d);
    for &i in rows {
        data.extend_from_slice(&enc.states.data()[i * l * d..(i + 1) * l * d]);
    }
    Encoded {
        states: crate::numerics::Tensor::new(&[rows.len() * l, d], data).expect("shape"),
        lengths: rows.iter().map(|&i| enc.lengths[i]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token table over a 4-token vocabulary {pad, bos, eos, x=3},
    /// extended with tokens 4 and 5, keyed by prefix length.
    struct Table(Box<dyn Fn(&[usize]) -> Vec<f64>>);

    impl StepScorer for Table {
        fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|p| (self.0)(p).iter().map(|v| v.ln()).collect())
                .collect())
        }
    }

    fn probs(pairs: &[(usize, f64)]) -> Vec<f64> {
        let mut v = vec![1e-12; 6];
        for &(t, p) in pairs {
            v[t] = p;
        }
        v
    }

    /// Greedy takes token 3 (p=0.5) then faces a flat split; token 4 (p=0.4)
    /// leads to a certain continuation. Best length-2 sequence is [4, 5].
    fn trap() -> Table {
        Table(Box::new(|p: &[usize]| match p {
            [BOS] => probs(&[(3, 0.5), (4, 0.4), (EOS, 0.1)]),
            [BOS, 3] => probs(&[(4, 0.34), (5, 0.33), (EOS, 0.33)]),
            [BOS, 4] => probs(&[(5, 0.99), (EOS, 0.01)]),
            _ => probs(&[(EOS, 1.0)]),
        }))
    }

    #[test]
    fn beam_finds_higher_probability_sequence() {
        // Brute force over all length-2 continuations (then forced EOS).
        let t = trap();
        let mut best = (f64::NEG_INFINITY, vec![]);
        for a in 0..6 {
            for b in 0..6 {
                let l1 = t.next_log_probs(&[vec![BOS]]).unwrap()[0][a];
                let l2 = t.next_log_probs(&[vec![BOS, a]]).unwrap()[0][b];
                if l1 + l2 > best.0 {
                    best = (l1 + l2, vec![a, b]);
                }
            }
        }
        assert_eq!(best.1, vec![4, 5]);

        let greedy = greedy_with(&t, 5).unwrap();
        assert_eq!(&greedy[..2], &[3, 4]);
        let cfg = DecodeConfig {
            length_penalty: 0.0,
            ..DecodeConfig::with_beam(2)
        };
        assert_eq!(beam_search_with(&t, &cfg, 5).unwrap(), vec![4, 5]);
    }

    #[test]
    fn beam_one_equals_greedy() {
        let t = trap();
        assert_eq!(
            beam_search_with(&t, &DecodeConfig::with_beam(1), 5).unwrap(),
            greedy_with(&t, 5).unwrap()
        );
    }

    #[test]
    fn forced_chain_is_emitted() {
        let t = Table(Box::new(|p: &[usize]| match p.len() {
            1 => probs(&[(5, 1.0)]),
            2 => probs(&[(4, 1.0)]),
            3 => probs(&[(3, 1.0)]),
            _ => probs(&[(EOS, 1.0)]),
        }));
        for beam in 1..4 {
            assert_eq!(
                beam_search_with(&t, &DecodeConfig::with_beam(beam), 10).unwrap(),
                vec![5, 4, 3]
            );
        }
    }

    #[test]
    fn zero_beam_rejected() {
        let t = trap();
        assert!(matches!(
            beam_search_with(&t, &DecodeConfig::with_beam(0), 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn max_len_rule() {
        let cfg = DecodeConfig::default();
        assert_eq!(cfg.max_len(10), 25);
        assert_eq!(length_penalty(1, 1.0), 1.0);
    }
}
