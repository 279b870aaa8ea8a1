use super::{EncodedBatch, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::EOS;

/// Next-token scores for a set of decoder prefixes.
pub trait StepScorer {
    /// For each `(source row, prefix)` returns log-probabilities over the
    /// vocabulary for the token following the prefix. All prefixes in one
    /// call have the same length.
    fn next_log_probs(&mut self, src_rows: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores prefixes with a model against a pre-encoded batch of sources.
pub struct ModelScorer<'a> {
    model: &'a Model,
    encoded: &'a EncodedBatch,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, encoded: &'a EncodedBatch) -> Self {
        ModelScorer { model, encoded }
    }
}

impl StepScorer for ModelScorer<'_> {
    fn next_log_probs(&mut self, src_rows: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let enc = self.encoded;
        let d = self.model.config.d_model;
        let v = self.model.config.vocab_size;
        let t = prefixes.first().map_or(0, Vec::len);
        if t == 0 || prefixes.iter().any(|p| p.len() != t) || src_rows.len() != prefixes.len() {
            return Err(Error::Shape("prefixes must be non-empty and of equal length".into()));
        }
        let mut states = Vec::with_capacity(src_rows.len() * enc.len * d);
        let mut mask = Vec::with_capacity(src_rows.len() * enc.len);
        for &r in src_rows {
            states.extend_from_slice(&enc.states.data()[r * enc.len * d..(r + 1) * enc.len * d]);
            mask.extend_from_slice(&enc.mask[r * enc.len..(r + 1) * enc.len]);
        }
        let sub = EncodedBatch {
            states: Tensor::new(vec![src_rows.len(), enc.len, d], states)?,
            mask,
            rows: src_rows.len(),
            len: enc.len,
            pooled: Tensor::zeros(&[0, d]),
        };
        let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let logits = self.model.decode_logits(&sub, &ids, t)?;
        Ok((0..src_rows.len())
            .map(|r| log_softmax(&logits.data()[(r * t + t - 1) * v..(r * t + t) * v]))
            .collect())
    }
}

/// Greedy decoding of every source row. Each output excludes the start
/// token and the final EOS; argmax ties go to the lowest token id.
pub fn greedy_search(scorer: &mut dyn StepScorer, starts: &[usize], max_steps: usize) -> Result<Vec<Vec<usize>>> {
    let mut prefixes: Vec<Vec<usize>> = starts.iter().map(|&s| vec![s]).collect();
    let mut done = vec![false; starts.len()];
    for _ in 0..max_steps {
        let active: Vec<usize> = (0..starts.len()).filter(|&r| !done[r]).collect();
        if active.is_empty() {
            break;
        }
        let batch: Vec<Vec<usize>> = active.iter().map(|&r| prefixes[r].clone()).collect();
        let scores = scorer.next_log_probs(&active, &batch)?;
        for (&r, s) in active.iter().zip(&scores) {
            let tok = argmax(s);
            if tok == EOS {
                done[r] = true;
            } else {
                prefixes[r].push(tok);
            }
        }
    }
    Ok(prefixes.into_iter().map(|p| p[1..].to_vec()).collect())
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
}

fn normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(alpha)
}

/// Beam search over one source row with length-normalized scores
/// `log p / len^alpha`, where `len` counts generated tokens including EOS.
/// Equal scores keep the earlier hypothesis and the lower token id, so a
/// beam of one reproduces greedy search.
pub fn beam_search(
    scorer: &mut dyn StepScorer,
    src_row: usize,
    start: usize,
    beam: usize,
    alpha: f64,
    max_steps: usize,
) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(Error::Config("beam size must be positive".into()));
    }
    let mut active = vec![Hypothesis {
        tokens: vec![start],
        log_prob: 0.0,
    }];
    let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();
    for _ in 0..max_steps {
        if active.is_empty() || finished.len() >= beam {
            break;
        }
        let rows = vec![src_row; active.len()];
        let prefixes: Vec<Vec<usize>> = active.iter().map(|h| h.tokens.clone()).collect();
        let scores = scorer.next_log_probs(&rows, &prefixes)?;
        let len = active[0].tokens.len();
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, s) in scores.iter().enumerate() {
            for (tok, &lp) in s.iter().enumerate() {
                cands.push((active[h].log_prob + lp, h, tok));
            }
        }
        // Stable sort keeps (hypothesis, token) order among equal scores.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::with_capacity(beam);
        for (lp, h, tok) in cands.into_iter().take(beam) {
            if tok == EOS {
                finished.push((normalized(lp, len, alpha), active[h].tokens[1..].to_vec()));
            } else {
                let mut tokens = active[h].tokens.clone();
                tokens.push(tok);
                next.push(Hypothesis { tokens, log_prob: lp });
            }
        }
        active = next;
    }
    if finished.is_empty() {
        for h in &active {
            finished.push((normalized(h.log_prob, h.tokens.len() - 1, alpha), h.tokens[1..].to_vec()));
        }
    }
    let mut best = 0;
    for (i, f) in finished.iter().enumerate() {
        if f.0 > finished[best].0 {
            best = i;
        }
    }
    Ok(finished.swap_remove(best).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scores read from a table keyed by prefix length.
    struct Forced(Vec<Vec<f64>>);

    impl StepScorer for Forced {
        fn next_log_probs(&mut self, src_rows: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .zip(src_rows)
                .map(|(p, _)| log_softmax(&self.0[(p.len() - 1).min(self.0.len() - 1)]))
                .collect())
        }
    }

    /// Scores depending on the last token only.
    struct Bigram(Vec<Vec<f64>>);

    impl StepScorer for Bigram {
        fn next_log_probs(&mut self, _: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes.iter().map(|p| log_softmax(&self.0[*p.last().unwrap()])).collect())
        }
    }

    #[test]
    fn greedy_follows_forced_logits() {
        let mut s = Forced(vec![
            vec![0.0, 0.0, 0.0, 0.0, 5.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 5.0],
            vec![0.0, 0.0, 9.0, 0.0, 0.0, 0.0],
        ]);
        assert_eq!(greedy_search(&mut s, &[1], 10).unwrap(), vec![vec![4, 5]]);
        let mut tie = Forced(vec![vec![0.0, 0.0, 1.0, 0.0, 3.0, 3.0]]);
        assert_eq!(greedy_search(&mut tie, &[1], 2).unwrap(), vec![vec![4, 4]]);
    }

    #[test]
    fn beam_one_equals_greedy() {
        let table: Vec<Vec<f64>> = (0..7)
            .map(|i| (0..7).map(|j| ((i * 7 + j * 3) % 5) as f64 * 0.7).collect())
            .collect();
        for start in 3..7 {
            let g = greedy_search(&mut Bigram(table.clone()), &[start], 8).unwrap();
            let b = beam_search(&mut Bigram(table.clone()), 0, start, 1, 1.0, 8).unwrap();
            assert_eq!(g[0], b);
        }
    }

    #[test]
    fn wider_beam_finds_better_sequence() {
        // Greedy picks 4 then is forced into a poor continuation; 5 leads to a sure EOS.
        let mut t = vec![vec![-30.0; 6]; 6];
        t[1] = vec![-30.0, -30.0, -30.0, -30.0, 0.1, 0.0];
        t[4] = vec![-30.0, -30.0, 0.0, 0.0, 0.0, 0.0];
        t[5] = vec![-30.0, -30.0, 10.0, -30.0, -30.0, -30.0];
        t[3] = t[5].clone();
        let greedy = greedy_search(&mut Bigram(t.clone()), &[1], 6).unwrap();
        assert_eq!(greedy[0], vec![4]);
        let beam = beam_search(&mut Bigram(t), 0, 1, 2, 1.0, 6).unwrap();
        assert_eq!(beam, vec![5]);
    }

    #[test]
    fn beam_stops_at_max_steps() {
        let mut s = Forced(vec![vec![0.0, 0.0, -50.0, 0.0, 1.0]]);
        assert_eq!(beam_search(&mut s, 0, 1, 3, 1.0, 4).unwrap(), vec![4, 4, 4, 4]);
        assert!(beam_search(&mut Forced(vec![vec![0.0]]), 0, 1, 0, 1.0, 4).is_err());
    }
}
