use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Batch, CorpusSet, MonoCorpus, PairKind, ParallelCorpus, SentencePair};
use crate::augment::{make_pseudo_pair, Example, SynonymDictionary};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, tag};
use crate::vocab::Vocabulary;

/// Temperature-balanced corpus weights: `ñᵢ = (nᵢ / Σⱼ nⱼ)^(1/T)`,
/// normalized to sum to one. `T = 1` is proportional; large `T` flattens
/// toward uniform.
pub fn temperature_sample_weights(counts: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::Data("no corpora to weight".into()));
    }
    if counts.contains(&0) {
        return Err(Error::Data("corpus with zero sentences cannot be sampled".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let total: f64 = counts.iter().map(|&n| n as f64).sum();
    let scaled: Vec<f64> = counts
        .iter()
        .map(|&n| (n as f64 / total).powf(1.0 / temperature))
        .collect();
    let z: f64 = scaled.iter().sum();
    Ok(scaled.into_iter().map(|s| s / z).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    /// Upper bound on `Σ token_cost` per batch.
    pub token_budget: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Include monolingual corpora as pseudo-self-parallel examples.
    pub use_mono: bool,
    /// Apply aligned augmentation.
    pub use_aa: bool,
    pub p_replace: f64,
    /// Fraction of drawn parallel pairs turned into pseudo-parallel pairs
    /// when augmentation is on.
    pub aa_ratio: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            token_budget: 512,
            temperature: 5.0,
            seed: 1,
            use_mono: false,
            use_aa: false,
            p_replace: 0.9,
            aa_ratio: 0.5,
        }
    }
}

enum SourceData<'a> {
    Parallel(&'a ParallelCorpus),
    Mono(&'a MonoCorpus),
}

struct Source<'a> {
    data: SourceData<'a>,
    name: String,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl Source<'_> {
    fn len(&self) -> usize {
        match self.data {
            SourceData::Parallel(p) => p.len(),
            SourceData::Mono(m) => m.sentences.len(),
        }
    }
}

/// Endless (or draw-limited) stream of token-budgeted pair groups.
///
/// Each draw picks a corpus by temperature weight, then the next line of
/// that corpus in a per-epoch shuffled order. Augmentation randomness is
/// keyed by (seed, corpus, line, epoch) so it does not depend on batch order.
pub struct PairStream<'a> {
    sources: Vec<Source<'a>>,
    weights: Vec<f64>,
    picker: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    dict: &'a SynonymDictionary,
    cfg: StreamConfig,
    pending: Option<SentencePair>,
    draws_left: Option<usize>,
}

impl<'a> PairStream<'a> {
    pub fn new(corpora: &'a CorpusSet, dict: &'a SynonymDictionary, cfg: StreamConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.p_replace) || !(0.0..=1.0).contains(&cfg.aa_ratio) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let mut sources: Vec<Source<'a>> = corpora
            .parallel
            .iter()
            .map(|p| Source {
                data: SourceData::Parallel(p),
                name: p.name(),
                order: Vec::new(),
                cursor: 0,
                epoch: 0,
            })
            .collect();
        if cfg.use_mono {
            sources.extend(corpora.mono.iter().map(|m| Source {
                data: SourceData::Mono(m),
                name: format!("mono.{}", m.lang),
                order: Vec::new(),
                cursor: 0,
                epoch: 0,
            }));
        }
        if sources.is_empty() {
            return Err(Error::Data("no training corpora selected".into()));
        }
        let counts: Vec<usize> = sources.iter().map(Source::len).collect();
        let weights = temperature_sample_weights(&counts, cfg.temperature)?;
        let longest = sources
            .iter()
            .map(|s| match s.data {
                SourceData::Parallel(p) => p
                    .a
                    .iter()
                    .zip(&p.b)
                    .map(|(a, b)| a.len().max(b.len()) + 2 + a.len().min(b.len()) + 1)
                    .max()
                    .unwrap_or(0),
                SourceData::Mono(m) => m.sentences.iter().map(|s| 2 * s.len() + 3).max().unwrap_or(0),
            })
            .max()
            .unwrap_or(0);
        if longest > cfg.token_budget {
            return Err(Error::Config(format!(
                "token budget {} is smaller than the longest example ({longest} tokens)",
                cfg.token_budget
            )));
        }
        let picker = WeightedIndex::new(&weights).map_err(|e| Error::Data(e.to_string()))?;
        let mut stream = PairStream {
            sources,
            weights,
            picker,
            rng: rng_for(cfg.seed, &[tag("stream")]),
            dict,
            cfg,
            pending: None,
            draws_left: None,
        };
        for i in 0..stream.sources.len() {
            stream.reshuffle(i);
        }
        Ok(stream)
    }

    /// Limits the stream to `n` further draws.
    pub fn with_draw_limit(mut self, n: usize) -> Self {
        self.draws_left = Some(n);
        self
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn source_names(&self) -> Vec<&str> {
        self.sources.iter().map(|s| s.name.as_str()).collect()
    }

    fn reshuffle(&mut self, i: usize) {
        let src = &mut self.sources[i];
        src.order = (0..src.len()).collect();
        let mut r = rng_for(self.cfg.seed, &[tag("order"), i as u64, src.epoch]);
        src.order.shuffle(&mut r);
        src.cursor = 0;
    }

    /// Draws the next example, returning its source index.
    pub fn draw(&mut self) -> (usize, SentencePair) {
        let i = self.picker.sample(&mut self.rng);
        if self.sources[i].cursor == self.sources[i].order.len() {
            self.sources[i].epoch += 1;
            self.reshuffle(i);
        }
        let src = &mut self.sources[i];
        let line = src.order[src.cursor];
        src.cursor += 1;
        let epoch = src.epoch;
        let reverse = self.rng.gen_bool(0.5);
        let augment_draw: f64 = self.rng.gen();
        let aug_seed = derive_seed(self.cfg.seed, &[tag("aa"), i as u64, line as u64, epoch, reverse as u64]);
        let pair = match src.data {
            SourceData::Parallel(p) => {
                let (sl, tl, s, t) = if reverse {
                    (&p.lang_b, &p.lang_a, &p.b[line], &p.a[line])
                } else {
                    (&p.lang_a, &p.lang_b, &p.a[line], &p.b[line])
                };
                if self.cfg.use_aa && augment_draw < self.cfg.aa_ratio {
                    let ex = Example::Parallel {
                        src_lang: sl.clone(),
                        tgt_lang: tl.clone(),
                        src: s.clone(),
                        tgt: t.clone(),
                    };
                    make_pseudo_pair(&ex, self.dict, self.cfg.p_replace, aug_seed)
                } else {
                    SentencePair {
                        src_lang: sl.clone(),
                        tgt_lang: tl.clone(),
                        src: s.clone(),
                        tgt: t.clone(),
                        kind: PairKind::Parallel,
                    }
                }
            }
            SourceData::Mono(m) => {
                let ex = Example::Monolingual {
                    lang: m.lang.clone(),
                    sentence: m.sentences[line].clone(),
                };
                let p = if self.cfg.use_aa { self.cfg.p_replace } else { 0.0 };
                make_pseudo_pair(&ex, self.dict, p, aug_seed)
            }
        };
        (i, pair)
    }

    /// Next group of pairs whose total token cost fits the budget, or `None`
    /// once a draw limit is exhausted.
    pub fn next_pairs(&mut self) -> Option<Vec<SentencePair>> {
        let mut out = Vec::new();
        let mut used = 0;
        if let Some(p) = self.pending.take() {
            used += p.token_cost();
            out.push(p);
        }
        loop {
            if self.draws_left == Some(0) {
                break;
            }
            if let Some(n) = &mut self.draws_left {
                *n -= 1;
            }
            let (_, pair) = self.draw();
            if used + pair.token_cost() > self.cfg.token_budget {
                self.pending = Some(pair);
                break;
            }
            used += pair.token_cost();
            out.push(pair);
        }
        if out.is_empty() {
            None
        } else {
            Some(out)
        }
    }

    pub fn next_batch(&mut self, vocab: &Vocabulary) -> Option<Result<Batch>> {
        self.next_pairs().map(|pairs| Batch::from_pairs(&pairs, vocab))
    }
}

/// One pass worth of batches: as many draws as there are examples in the
/// selected corpora.
pub fn make_batches(
    corpora: &CorpusSet,
    vocab: &Vocabulary,
    dict: &SynonymDictionary,
    cfg: StreamConfig,
) -> Result<Vec<Batch>> {
    let mut stream = PairStream::new(corpora, dict, cfg)?;
    stream.draws_left = Some(stream.sources.iter().map(Source::len).sum());
    let mut out = Vec::new();
    while let Some(b) = stream.next_batch(vocab) {
        out.push(b?);
    }
    Ok(out)
}
