//! Beam search over any next-token model.

use crate::error::{Error, Result};

/// Anything that scores the next token for a batch of prefixes.
pub trait StepModel {
    /// One row of log-probabilities per prefix.
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>>;
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<u32>,
    logp: f64,
}

impl Hyp {
    /// Average log-probability per generated token (length penalty alpha = 1).
    fn score(&self) -> f64 {
        self.logp / (self.tokens.len() - 1).max(1) as f64
    }
}

/// Returns the generated tokens (without BOS). The result ends with `eos`
/// or has exactly `max_len` tokens.
pub fn beam_search<M: StepModel + ?Sized>(model: &M, beam: usize, max_len: usize, bos: u32, eos: u32) -> Result<Vec<u32>> {
    if beam == 0 {
        return Err(Error::Contract("beam size must be at least 1".into()));
    }
    let mut alive = vec![Hyp {
        tokens: vec![bos],
        logp: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        if alive.is_empty() || finished.len() >= beam {
            break;
        }
        let prefixes: Vec<Vec<u32>> = alive.iter().map(|h| h.tokens.clone()).collect();
        let rows = model.next_log_probs(&prefixes)?;
        let mut cand: Vec<(f64, usize, u32)> = Vec::new();
        for (hi, row) in rows.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                if lp.is_finite() {
                    cand.push((alive[hi].logp + lp as f64, hi, tok as u32));
                }
            }
        }
        // best cumulative score first; ties by hypothesis then token index
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for (logp, hi, tok) in cand.into_iter().take(beam) {
            let mut tokens = alive[hi].tokens.clone();
            tokens.push(tok);
            let h = Hyp { tokens, logp };
            if tok == eos {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        alive = next;
    }
    let pool = if finished.is_empty() { &alive } else { &finished };
    let best = pool
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.score().total_cmp(&b.score()).then(j.cmp(i)))
        .map(|(_, h)| h)
        .ok_or_else(|| Error::Numerical("beam search produced no finite hypothesis".into()))?;
    Ok(best.tokens[1..].to_vec())
}

/// Iterated argmax decoding.
pub fn greedy<M: StepModel + ?Sized>(model: &M, max_len: usize, bos: u32, eos: u32) -> Result<Vec<u32>> {
    let mut tokens = vec![bos];
    for _ in 0..max_len {
        let row = model.next_log_probs(&[tokens.clone()])?.remove(0);
        let (best, _) = row
            .iter()
            .enumerate()
            .fold((0usize, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        tokens.push(best as u32);
        if best as u32 == eos {
            break;
        }
    }
    Ok(tokens[1..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Distribution depends only on the last token and the step.
    struct Table(Vec<Vec<Vec<f32>>>);

    impl StepModel for Table {
        fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
            Ok(prefixes
                .iter()
                .map(|p| {
                    let step = (p.len() - 1).min(self.0.len() - 1);
                    let last = *p.last().unwrap() as usize;
                    self.0[step][last % self.0[step].len()].iter().map(|x| x.ln()).collect()
                })
                .collect())
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        let t = Table(vec![
            vec![vec![0.1, 0.5, 0.4], vec![0.3, 0.3, 0.4], vec![0.6, 0.2, 0.2]],
            vec![vec![0.2, 0.2, 0.6], vec![0.1, 0.1, 0.8], vec![0.5, 0.4, 0.1]],
        ]);
        assert_eq!(beam_search(&t, 1, 5, 1, 0).unwrap(), greedy(&t, 5, 1, 0).unwrap());
    }

    #[test]
    fn one_hot_model_is_beam_independent() {
        let t = Table(vec![vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]]);
        let out: Vec<_> = (1..5).map(|k| beam_search(&t, k, 6, 1, 0).unwrap()).collect();
        assert!(out.iter().all(|o| *o == out[0]));
        assert_eq!(out[0], vec![2, 0]);
    }

    #[test]
    fn zero_beam_is_rejected() {
        let t = Table(vec![vec![vec![1.0]]]);
        assert!(beam_search(&t, 0, 3, 0, 0).is_err());
    }
}
