//! Cipher languages: every language relabels a shared stream of latent
//! concept ids through its own permutation, so translation between any two
//! languages has an exact token-for-token reference.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusSet, MonoCorpus, MultiWaySet, ParallelCorpus, Sentence};
use crate::augment::SynonymDictionary;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_languages: usize,
    /// Number of latent concepts (surface tokens per language).
    pub vocab_size: usize,
    /// Sentences per parallel corpus and per monolingual corpus.
    pub n_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Lines in the multi-way held-out set.
    pub n_heldout: usize,
    /// How many trailing languages get monolingual data only.
    pub mono_only: usize,
    pub zipf_exponent: f64,
    /// Fraction of concepts that receive dictionary entries.
    pub dict_coverage: f64,
    /// Use the identity permutation for every language.
    pub identity_cipher: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_languages: 4,
            vocab_size: 40,
            n_sentences: 2000,
            min_len: 3,
            max_len: 8,
            n_heldout: 200,
            mono_only: 1,
            zipf_exponent: 1.1,
            dict_coverage: 0.6,
            identity_cipher: false,
            seed: 1,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_languages < 2 {
            return bad(format!("need at least 2 languages, got {}", self.n_languages));
        }
        if self.mono_only + 2 > self.n_languages {
            return bad(format!(
                "{} monolingual-only languages leave no parallel pair among {}",
                self.mono_only, self.n_languages
            ));
        }
        if self.vocab_size == 0 || self.n_sentences == 0 {
            return bad("vocabulary and corpus sizes must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        if !(self.zipf_exponent >= 0.0) || !(0.0..=1.0).contains(&self.dict_coverage) {
            return bad("zipf exponent must be ≥ 0 and coverage in [0, 1]".into());
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("gen.n_languages", self.n_languages);
        kv.set("gen.vocab_size", self.vocab_size);
        kv.set("gen.n_sentences", self.n_sentences);
        kv.set("gen.min_len", self.min_len);
        kv.set("gen.max_len", self.max_len);
        kv.set("gen.n_heldout", self.n_heldout);
        kv.set("gen.mono_only", self.mono_only);
        kv.set("gen.zipf_exponent", self.zipf_exponent);
        kv.set("gen.dict_coverage", self.dict_coverage);
        kv.set("gen.identity_cipher", self.identity_cipher);
        kv.set("gen.seed", self.seed);
        kv
    }
}

/// Per-language concept permutations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CipherSet {
    languages: Vec<String>,
    /// `forward[l][concept]` = surface index in language `l`.
    forward: Vec<Vec<usize>>,
    tokens: HashMap<String, (usize, usize)>,
}

impl CipherSet {
    fn from_permutations(languages: Vec<String>, forward: Vec<Vec<usize>>) -> Result<Self> {
        let mut tokens = HashMap::new();
        for (l, perm) in forward.iter().enumerate() {
            let mut seen = vec![false; perm.len()];
            for (concept, &s) in perm.iter().enumerate() {
                if s >= perm.len() || std::mem::replace(&mut seen[s], true) {
                    return Err(Error::Data(format!("cipher for {} is not a bijection", languages[l])));
                }
                tokens.insert(format!("{}_{}", languages[l], s), (l, concept));
            }
        }
        Ok(CipherSet {
            languages,
            forward,
            tokens,
        })
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn vocab_size(&self) -> usize {
        self.forward.first().map_or(0, Vec::len)
    }

    fn lang_index(&self, lang: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::Config(format!("no cipher for language {lang}")))
    }

    pub fn render(&self, lang: &str, concept: usize) -> Result<String> {
        let l = self.lang_index(lang)?;
        Ok(format!("{lang}_{}", self.forward[l][concept]))
    }

    /// `(language, concept)` behind a surface token.
    pub fn concept_of(&self, token: &str) -> Option<(&str, usize)> {
        self.tokens
            .get(token)
            .map(|&(l, c)| (self.languages[l].as_str(), c))
    }

    /// Exact translation `σ_to ∘ σ_from⁻¹`, token for token.
    pub fn translate<S: AsRef<str>>(&self, sentence: &[S], from: &str, to: &str) -> Result<Sentence> {
        self.lang_index(from)?;
        sentence
            .iter()
            .map(|t| match self.concept_of(t.as_ref()) {
                Some((l, c)) if l == from => self.render(to, c),
                _ => Err(Error::Data(format!("{:?} is not a {from} token", t.as_ref()))),
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (l, perm) in self.languages.iter().zip(&self.forward) {
            for (c, s) in perm.iter().enumerate() {
                out.push_str(&format!("{l}\t{c}\t{l}_{s}\n"));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let mut languages: Vec<String> = Vec::new();
        let mut forward: Vec<Vec<usize>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split('\t').collect();
            let parsed = match cols.as_slice() {
                [l, c, tok] => c.parse::<usize>().ok().and_then(|c| {
                    tok.strip_prefix(&format!("{l}_"))
                        .and_then(|s| s.parse::<usize>().ok())
                        .map(|s| (l.to_string(), c, s))
                }),
                _ => None,
            };
            let (l, c, s) = parsed.ok_or_else(|| Error::parse(path, i + 1, "expected `lang\\tconcept\\ttoken`"))?;
            if languages.last() != Some(&l) {
                languages.push(l);
                forward.push(Vec::new());
            }
            let perm = forward.last_mut().unwrap();
            if c != perm.len() {
                return Err(Error::parse(path, i + 1, "concepts must be listed in order"));
            }
            perm.push(s);
        }
        Self::from_permutations(languages, forward)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub config: SynthConfig,
    pub corpora: CorpusSet,
    pub ciphers: CipherSet,
    pub dictionary: SynonymDictionary,
}

fn concept_sentences(rng: &mut ChaCha8Rng, zipf: &WeightedIndex<f64>, cfg: &SynthConfig, n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            (0..len).map(|_| zipf.sample(rng)).collect()
        })
        .collect()
}

/// Generates cipher languages `l1..lN` with `l1` as the hub.
///
/// Parallel corpora pair the hub with every language except the last
/// `mono_only`; every language gets a monolingual corpus; a multi-way
/// held-out set renders the same concept sentences in all languages.
pub fn generate_synthetic_languages(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let languages: Vec<String> = (1..=cfg.n_languages).map(|i| format!("l{i}")).collect();
    let v = cfg.vocab_size;

    let forward: Vec<Vec<usize>> = (0..cfg.n_languages)
        .map(|l| {
            let mut perm: Vec<usize> = (0..v).collect();
            if !cfg.identity_cipher {
                perm.shuffle(&mut rng_for(cfg.seed, &[tag("cipher"), l as u64]));
            }
            perm
        })
        .collect();
    let ciphers = CipherSet::from_permutations(languages.clone(), forward)?;
    let render = |lang: &str, s: &[usize]| -> Sentence {
        s.iter()
            .map(|&c| ciphers.render(lang, c).expect("language has a cipher"))
            .collect()
    };

    let zipf_weights: Vec<f64> = (1..=v).map(|r| (r as f64).powf(-cfg.zipf_exponent)).collect();
    let zipf = WeightedIndex::new(&zipf_weights).map_err(|e| Error::Config(e.to_string()))?;

    let hub = languages[0].clone();
    let n_parallel = cfg.n_languages - cfg.mono_only;
    let mut parallel = Vec::new();
    for other in &languages[1..n_parallel] {
        let mut rng = rng_for(cfg.seed, &[tag("parallel"), tag(other)]);
        let concepts = concept_sentences(&mut rng, &zipf, cfg, cfg.n_sentences);
        parallel.push(ParallelCorpus {
            lang_a: hub.clone(),
            lang_b: other.clone(),
            a: concepts.iter().map(|s| render(&hub, s)).collect(),
            b: concepts.iter().map(|s| render(other, s)).collect(),
        });
    }
    let mono = languages
        .iter()
        .map(|lang| {
            let mut rng = rng_for(cfg.seed, &[tag("mono"), tag(lang)]);
            let concepts = concept_sentences(&mut rng, &zipf, cfg, cfg.n_sentences);
            MonoCorpus {
                lang: lang.clone(),
                sentences: concepts.iter().map(|s| render(lang, s)).collect(),
            }
        })
        .collect();
    let mut rng = rng_for(cfg.seed, &[tag("multiway")]);
    // Held-out lines are distinct so that retrieval has a unique answer.
    let mut seen = HashSet::new();
    let mut held = Vec::with_capacity(cfg.n_heldout);
    let mut attempts = 0usize;
    while held.len() < cfg.n_heldout {
        attempts += 1;
        if attempts > 100 * cfg.n_heldout.max(1) {
            return Err(Error::Config(format!(
                "cannot draw {} distinct held-out sentences from {v} concepts",
                cfg.n_heldout
            )));
        }
        let s = concept_sentences(&mut rng, &zipf, cfg, 1).remove(0);
        if seen.insert(s.clone()) {
            held.push(s);
        }
    }
    let multiway = MultiWaySet {
        languages: languages.clone(),
        lines: languages
            .iter()
            .map(|l| held.iter().map(|s| render(l, s)).collect())
            .collect(),
    };

    let mut covered: Vec<usize> = (0..v).collect();
    covered.shuffle(&mut rng_for(cfg.seed, &[tag("dictionary")]));
    covered.truncate((cfg.dict_coverage * v as f64).round() as usize);
    covered.sort_unstable();
    let mut dictionary = SynonymDictionary::new();
    for a in &languages {
        for &c in &covered {
            for b in languages.iter().filter(|b| *b != a) {
                dictionary.insert(a, &ciphers.render(a, c)?, b, &ciphers.render(b, c)?)?;
            }
        }
    }

    Ok(SyntheticCorpus {
        config: cfg.clone(),
        corpora: CorpusSet {
            languages,
            hub,
            parallel,
            mono,
            multiway: Some(multiway),
        },
        ciphers,
        dictionary,
    })
}

impl SyntheticCorpus {
    /// Writes corpora, `ciphers.tsv`, `synonyms.tsv` and the manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.corpora.write_dir(dir, &self.config.to_key_values())?;
        let ciphers = dir.join("ciphers.tsv");
        fs::write(&ciphers, self.ciphers.to_tsv()).map_err(Error::io(&ciphers))?;
        self.dictionary.save(&dir.join("synonyms.tsv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_sentences: 50,
            n_heldout: 10,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn two_languages_one_sentence() {
        let cfg = SynthConfig {
            n_languages: 2,
            n_sentences: 1,
            mono_only: 0,
            ..SynthConfig::default()
        };
        let s = generate_synthetic_languages(&cfg).unwrap();
        assert_eq!(s.corpora.parallel.len(), 1);
        let p = &s.corpora.parallel[0];
        assert_eq!(p.len(), 1);
        assert_eq!(s.ciphers.translate(&p.a[0], "l1", "l2").unwrap(), p.b[0]);
        assert_eq!(p.a[0].len(), p.b[0].len());
    }

    #[test]
    fn identity_cipher_differs_only_by_prefix() {
        let cfg = SynthConfig {
            identity_cipher: true,
            ..small(3)
        };
        let s = generate_synthetic_languages(&cfg).unwrap();
        let mw = s.corpora.multiway.as_ref().unwrap();
        let strip = |t: &String| t.split_once('_').unwrap().1.to_string();
        for line in 0..mw.len() {
            let base: Vec<String> = mw.lines[0][line].iter().map(strip).collect();
            for l in 1..mw.languages.len() {
                assert_eq!(mw.lines[l][line].iter().map(strip).collect::<Vec<_>>(), base);
            }
        }
    }

    #[test]
    fn topology_and_oracle() {
        let s = generate_synthetic_languages(&small(5)).unwrap();
        let c = &s.corpora;
        assert_eq!(c.languages, ["l1", "l2", "l3", "l4"]);
        assert_eq!(c.parallel.iter().map(|p| p.name()).collect::<Vec<_>>(), ["l1-l2", "l1-l3"]);
        assert!(!c.has_parallel("l4"));
        assert_eq!(c.mono.len(), 4);
        let mw = c.multiway.as_ref().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for line in 0..mw.len() {
                    let t = s.ciphers.translate(&mw.lines[i][line], &c.languages[i], &c.languages[j]).unwrap();
                    assert_eq!(t, mw.lines[j][line]);
                }
            }
        }
        for p in &c.parallel {
            for (a, b) in p.a.iter().zip(&p.b) {
                assert_eq!(&s.ciphers.translate(a, &p.lang_a, &p.lang_b).unwrap(), b);
            }
        }
    }

    #[test]
    fn dictionary_follows_ciphers_and_coverage() {
        let s = generate_synthetic_languages(&small(9)).unwrap();
        // 4 languages × 24 covered concepts
        assert_eq!(s.dictionary.len(), 4 * 24);
        for line in s.dictionary.to_tsv().lines() {
            let c: Vec<&str> = line.split('\t').collect();
            let (_, a) = s.ciphers.concept_of(c[1]).unwrap();
            let (_, b) = s.ciphers.concept_of(c[3]).unwrap();
            assert_eq!(a, b);
            assert_ne!(c[0], c[2]);
        }
    }

    #[test]
    fn deterministic_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_languages(&small(11)).unwrap().write(a.path()).unwrap();
        generate_synthetic_languages(&small(11)).unwrap().write(b.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert!(names.len() > 10);
        for n in names {
            assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap());
        }
        let loaded = CorpusSet::load_dir(a.path()).unwrap();
        assert_eq!(loaded, generate_synthetic_languages(&small(11)).unwrap().corpora);
        let ciphers = CipherSet::load(&a.path().join("ciphers.tsv")).unwrap();
        assert_eq!(ciphers, generate_synthetic_languages(&small(11)).unwrap().ciphers);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { n_languages: 1, ..small(1) },
            SynthConfig { mono_only: 3, ..small(1) },
            SynthConfig { min_len: 5, max_len: 4, ..small(1) },
            SynthConfig { min_len: 0, ..small(1) },
            SynthConfig { dict_coverage: 1.5, ..small(1) },
        ] {
            assert!(matches!(generate_synthetic_languages(&cfg), Err(Error::Config(_))));
        }
    }
}
