//! Similarity-search accuracy, corpus BLEU, per-direction reports and
//! representation export.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::corpus::{CipherSet, CorpusSet, DirectionClass, EncoderInput, MultiWaySet, Sentence};
use crate::error::{Error, Result};
use crate::model::{beam_search, greedy_search, Model, ModelScorer};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

const ENCODE_CHUNK: usize = 128;

/// Pooled representations of `sentences`, one row each.
pub fn encode_sentences(model: &Model, vocab: &Vocabulary, sentences: &[Sentence], lang: &str) -> Result<Tensor> {
    let d = model.config.d_model;
    let mut data = Vec::with_capacity(sentences.len() * d);
    for chunk in sentences.chunks(ENCODE_CHUNK) {
        let ids = chunk
            .iter()
            .map(|s| vocab.encode_tokens(s, lang, true))
            .collect::<Result<Vec<_>>>()?;
        let enc = model.encode(&EncoderInput::from_ids(&ids))?;
        data.extend_from_slice(enc.pooled.data());
    }
    Tensor::new(vec![sentences.len(), d], data)
}

fn unit_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!("representation {i} has norm {n}")));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// Fraction of queries whose most cosine-similar candidate is the gold one.
/// Ties go to the lowest candidate index.
pub fn retrieval_accuracy(queries: &Tensor, candidates: &Tensor, gold: &[usize]) -> Result<f64> {
    if queries.rows() == 0 || candidates.rows() == 0 {
        return Err(Error::Data("retrieval task is empty".into()));
    }
    if gold.len() != queries.rows() || queries.cols() != candidates.cols() {
        return Err(Error::Shape(format!(
            "retrieval: {} gold entries for queries {:?} and candidates {:?}",
            gold.len(),
            queries.shape(),
            candidates.shape()
        )));
    }
    let q = unit_rows(queries)?;
    let c = unit_rows(candidates)?;
    let mut hits = 0usize;
    for (qi, &g) in q.iter().zip(gold) {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, cj) in c.iter().enumerate() {
            let sim: f64 = qi.iter().zip(cj).map(|(a, b)| a * b).sum();
            if sim > best_sim {
                best = j;
                best_sim = sim;
            }
        }
        hits += usize::from(best == g);
    }
    Ok(hits as f64 / gold.len() as f64)
}

/// Matched and total n-gram counts for n = 1..4 plus lengths.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn add<S: AsRef<str>>(&mut self, hyp: &[S], reference: &[S]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=4 {
            let h = ngrams(hyp, n);
            let r = ngrams(reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    /// BLEU in [0, 100]. Precisions for n ≥ 2 with no match use add-one
    /// smoothing; no unigram match gives 0.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..4 {
            let p = if n > 0 && self.matches[n] == 0 {
                1.0 / (self.totals[n] + 1) as f64
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        100.0 * bp * (log_sum / 4.0).exp()
    }
}

/// Corpus-level BLEU of whitespace-tokenized sentences.
pub fn bleu(hypotheses: &[Sentence], references: &[Sentence]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Data("BLEU of an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Shape(format!(
            "BLEU: {} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(h, r);
    }
    Ok(stats.score())
}

/// Anything that turns source sentences into target sentences.
pub trait Translator {
    fn translate(&mut self, sentences: &[Sentence], src_lang: &str, tgt_lang: &str) -> Result<Vec<Sentence>>;
}

/// Exact translations from the cipher tables.
pub struct OracleTranslator<'a>(pub &'a CipherSet);

impl Translator for OracleTranslator<'_> {
    fn translate(&mut self, sentences: &[Sentence], src_lang: &str, tgt_lang: &str) -> Result<Vec<Sentence>> {
        sentences.iter().map(|s| self.0.translate(s, src_lang, tgt_lang)).collect()
    }
}

/// Decodes with a model; `beam == 1` is greedy search.
pub struct ModelTranslator<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
    pub beam: usize,
}

impl Translator for ModelTranslator<'_> {
    fn translate(&mut self, sentences: &[Sentence], src_lang: &str, tgt_lang: &str) -> Result<Vec<Sentence>> {
        if self.beam == 0 {
            return Err(Error::Config("beam size must be positive".into()));
        }
        let start = self.vocab.lang_id(tgt_lang)?;
        let max_steps = self.model.config.max_len - 1;
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(ENCODE_CHUNK) {
            let ids = chunk
                .iter()
                .map(|s| self.vocab.encode_tokens(s, src_lang, true))
                .collect::<Result<Vec<_>>>()?;
            let encoded = self.model.encode(&EncoderInput::from_ids(&ids))?;
            let mut scorer = ModelScorer::new(self.model, &encoded);
            let decoded = if self.beam == 1 {
                greedy_search(&mut scorer, &vec![start; chunk.len()], max_steps)?
            } else {
                (0..chunk.len())
                    .map(|r| beam_search(&mut scorer, r, start, self.beam, 1.0, max_steps))
                    .collect::<Result<Vec<_>>>()?
            };
            out.extend(decoded.iter().map(|d| self.vocab.decode_tokens(d)));
        }
        Ok(out)
    }
}

/// One metric value for one translation direction.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionReport {
    pub src: String,
    pub tgt: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

impl DirectionReport {
    pub fn direction(&self) -> String {
        format!("{}->{}", self.src, self.tgt)
    }
}

pub const REPORT_HEADER: &str = "direction\tmetric\tvalue\tn";

pub fn reports_to_tsv(reports: &[DirectionReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        let _ = writeln!(out, "{}\t{}\t{:.4}\t{}", r.direction(), r.metric, r.value, r.n);
    }
    out
}

fn held_out(corpora: &CorpusSet) -> Result<&MultiWaySet> {
    corpora
        .multiway
        .as_ref()
        .ok_or_else(|| Error::Data("corpus set has no multi-way held-out set".into()))
}

fn check_direction(corpora: &CorpusSet, multiway: &MultiWaySet, src: &str, tgt: &str) -> Result<()> {
    corpora.classify(src, tgt)?;
    for l in [src, tgt] {
        if multiway.sentences(l).is_none() {
            return Err(Error::Data(format!("no held-out sentences for language `{l}`")));
        }
    }
    Ok(())
}

/// BLEU per direction on the multi-way held-out set.
pub fn evaluate_directions(
    translator: &mut dyn Translator,
    corpora: &CorpusSet,
    directions: &[(String, String)],
) -> Result<Vec<DirectionReport>> {
    let multiway = held_out(corpora)?;
    let mut reports = Vec::with_capacity(directions.len());
    for (src, tgt) in directions {
        check_direction(corpora, multiway, src, tgt)?;
        let sources = multiway.sentences(src).expect("checked");
        let references = multiway.sentences(tgt).expect("checked");
        let hyps = translator.translate(sources, src, tgt)?;
        reports.push(DirectionReport {
            src: src.clone(),
            tgt: tgt.clone(),
            metric: "bleu".into(),
            value: bleu(&hyps, references)?,
            n: sources.len(),
        });
    }
    Ok(reports)
}

/// Top-1 similarity-search accuracy (in percent) per direction on the
/// multi-way held-out set, with line `i` of the target as gold for line `i`.
pub fn retrieval_directions(
    model: &Model,
    vocab: &Vocabulary,
    corpora: &CorpusSet,
    directions: &[(String, String)],
) -> Result<Vec<DirectionReport>> {
    let multiway = held_out(corpora)?;
    let mut cache: HashMap<&str, Tensor> = HashMap::new();
    let mut reports = Vec::with_capacity(directions.len());
    for (src, tgt) in directions {
        check_direction(corpora, multiway, src, tgt)?;
        for l in [src.as_str(), tgt.as_str()] {
            if !cache.contains_key(l) {
                let reps = encode_sentences(model, vocab, multiway.sentences(l).expect("checked"), l)?;
                cache.insert(l, reps);
            }
        }
        let gold: Vec<usize> = (0..multiway.len()).collect();
        let acc = retrieval_accuracy(&cache[src.as_str()], &cache[tgt.as_str()], &gold)?;
        reports.push(DirectionReport {
            src: src.clone(),
            tgt: tgt.clone(),
            metric: "retrieval".into(),
            value: 100.0 * acc,
            n: gold.len(),
        });
    }
    Ok(reports)
}

/// Averages of one metric grouped by direction class.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSummary {
    pub metric: String,
    pub supervised: Option<f64>,
    pub unsupervised: Option<f64>,
    pub zero_shot: Option<f64>,
    /// Directions with the hub on either side.
    pub hub_centric: Option<f64>,
    pub all: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn summarize(corpora: &CorpusSet, reports: &[DirectionReport], metric: &str) -> Result<ScenarioSummary> {
    let mut by_class: HashMap<DirectionClass, Vec<f64>> = HashMap::new();
    let mut hub = Vec::new();
    let mut all = Vec::new();
    for r in reports.iter().filter(|r| r.metric == metric) {
        by_class.entry(corpora.classify(&r.src, &r.tgt)?).or_default().push(r.value);
        if r.src == corpora.hub || r.tgt == corpora.hub {
            hub.push(r.value);
        }
        all.push(r.value);
    }
    let class_mean = |c| by_class.get(&c).and_then(|v| mean(v));
    Ok(ScenarioSummary {
        metric: metric.to_string(),
        supervised: class_mean(DirectionClass::Supervised),
        unsupervised: class_mean(DirectionClass::Unsupervised),
        zero_shot: class_mean(DirectionClass::ZeroShot),
        hub_centric: mean(&hub),
        all: mean(&all),
    })
}

impl ScenarioSummary {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        format!(
            "{}\n  supervised    {}\n  unsupervised  {}\n  zero-shot     {}\n  hub-centric   {}\n  all           {}\n",
            self.metric,
            fmt(self.supervised),
            fmt(self.unsupervised),
            fmt(self.zero_shot),
            fmt(self.hub_centric),
            fmt(self.all)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    None,
    Pca2,
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Projection::None),
            "pca2" => Ok(Projection::Pca2),
            _ => Err(Error::Config(format!("unknown projection `{s}` (expected none or pca2)"))),
        }
    }
}

/// Principal axes of `rows`: centered covariance eigenvectors ordered by
/// descending eigenvalue, each signed so its largest-magnitude entry is
/// positive. Returns `(mean, axes)`.
pub fn principal_axes(rows: &[Vec<f64>], k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || d < k {
        return Err(Error::Shape(format!("cannot take {k} principal axes of {} rows of dimension {d}", rows.len())));
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let centered = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes = order[..k]
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let mut big = 0;
            for (j, x) in v.iter().enumerate() {
                if x.abs() > v[big].abs() {
                    big = j;
                }
            }
            if v[big] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok((mean, axes))
}

/// Two-dimensional PCA coordinates of `rows`.
pub fn pca2(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let (mean, axes) = principal_axes(rows, 2)?;
    Ok(rows
        .iter()
        .map(|r| {
            let proj = |a: &[f64]| r.iter().zip(&mean).zip(a).map(|((x, m), v)| (x - m) * v).sum::<f64>() + 0.0;
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect())
}

/// TSV of pooled representations of every multi-way line in every
/// language: `lang, line_id, v1..vd`, or two PCA coordinates.
pub fn export_representations(model: &Model, vocab: &Vocabulary, multiway: &MultiWaySet, projection: Projection) -> Result<String> {
    if projection == Projection::Pca2 && model.config.d_model < 2 {
        return Err(Error::Config("pca2 projection needs d_model ≥ 2".into()));
    }
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for lang in &multiway.languages {
        let reps = encode_sentences(model, vocab, multiway.sentences(lang).expect("listed language"), lang)?;
        for i in 0..reps.rows() {
            labels.push((lang.clone(), i));
            rows.push(reps.row(i).to_vec());
        }
    }
    let rows = match projection {
        Projection::None => rows,
        Projection::Pca2 => pca2(&rows)?.into_iter().map(|p| p.to_vec()).collect(),
    };
    let mut out = String::new();
    for ((lang, i), r) in labels.iter().zip(&rows) {
        let _ = write!(out, "{lang}\t{i}");
        for v in r {
            let _ = write!(out, "\t{v:.8}");
        }
        out.push('\n');
    }
    Ok(out)
}
