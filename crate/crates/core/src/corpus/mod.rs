//! Parallel, monolingual and multi-way corpora, synthetic cipher languages,
//! temperature-balanced sampling and batch construction.
//!
//! On disk a corpus directory holds `manifest.txt` plus one-sentence-per-line
//! UTF-8 files: `<a>-<b>.<lang>.txt` for line-aligned parallel corpora,
//! `mono.<lang>.txt` for monolingual text and `multiway.<lang>.txt` for the
//! held-out set aligned across every language.

mod batch;
mod sampling;
mod synthetic;

use std::fmt;
use std::fs;
use std::path::Path;

pub use batch::{Batch, EncoderInput};
pub use sampling::{make_batches, temperature_sample_weights, PairStream, StreamConfig};
pub use synthetic::{generate_synthetic_languages, CipherSet, SynthConfig, SyntheticCorpus};

use crate::config::KeyValues;
use crate::error::{Error, Result};

pub type Sentence = Vec<String>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairKind {
    Parallel,
    PseudoParallel,
    PseudoSelfParallel,
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairKind::Parallel => "parallel",
            PairKind::PseudoParallel => "pseudo_parallel",
            PairKind::PseudoSelfParallel => "pseudo_self_parallel",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: Sentence,
    pub tgt: Sentence,
    pub kind: PairKind,
}

impl SentencePair {
    pub fn validate(&self) -> Result<()> {
        if self.kind == PairKind::PseudoSelfParallel && self.src_lang != self.tgt_lang {
            return Err(Error::Data(format!(
                "pseudo-self-parallel pair spans {} and {}",
                self.src_lang, self.tgt_lang
            )));
        }
        if self.src.is_empty() || self.tgt.is_empty() {
            return Err(Error::Data("sentence pair has an empty side".into()));
        }
        Ok(())
    }

    /// Positions the model processes: `[lang] src [eos]` plus `[lang] tgt`.
    pub fn token_cost(&self) -> usize {
        self.src.len() + 2 + self.tgt.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub lang_a: String,
    pub lang_b: String,
    pub a: Vec<Sentence>,
    pub b: Vec<Sentence>,
}

impl ParallelCorpus {
    pub fn name(&self) -> String {
        format!("{}-{}", self.lang_a, self.lang_b)
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonoCorpus {
    pub lang: String,
    pub sentences: Vec<Sentence>,
}

/// Held-out sentences aligned line-by-line across all languages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiWaySet {
    pub languages: Vec<String>,
    pub lines: Vec<Vec<Sentence>>,
}

impl MultiWaySet {
    pub fn sentences(&self, lang: &str) -> Option<&[Sentence]> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .map(|i| self.lines[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.lines.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How a translation direction relates to the training topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DirectionClass {
    /// The pair has direct parallel data.
    Supervised,
    /// One side has no parallel data at all.
    Unsupervised,
    /// Both sides have parallel data, but never with each other.
    ZeroShot,
}

impl fmt::Display for DirectionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DirectionClass::Supervised => "supervised",
            DirectionClass::Unsupervised => "unsupervised",
            DirectionClass::ZeroShot => "zero-shot",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSet {
    pub languages: Vec<String>,
    /// The language every parallel corpus is paired with.
    pub hub: String,
    pub parallel: Vec<ParallelCorpus>,
    pub mono: Vec<MonoCorpus>,
    pub multiway: Option<MultiWaySet>,
}

fn tokenize(line: &str) -> Sentence {
    line.split_whitespace().map(str::to_string).collect()
}

fn read_lines(path: &Path) -> Result<Vec<Sentence>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    Ok(text.lines().map(tokenize).collect())
}

fn write_lines(path: &Path, sentences: &[Sentence]) -> Result<()> {
    let mut text = String::new();
    for s in sentences {
        text.push_str(&s.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(Error::io(path))
}

impl CorpusSet {
    pub fn has_parallel(&self, lang: &str) -> bool {
        self.parallel.iter().any(|p| p.lang_a == lang || p.lang_b == lang)
    }

    pub fn classify(&self, src: &str, tgt: &str) -> Result<DirectionClass> {
        for l in [src, tgt] {
            if !self.languages.iter().any(|x| x == l) {
                return Err(Error::Config(format!("unknown language {l}")));
            }
        }
        if src == tgt {
            return Err(Error::Config(format!("{src}-{tgt} is not a translation direction")));
        }
        let paired = self.parallel.iter().any(|p| {
            (p.lang_a == src && p.lang_b == tgt) || (p.lang_a == tgt && p.lang_b == src)
        });
        Ok(if paired {
            DirectionClass::Supervised
        } else if !self.has_parallel(src) || !self.has_parallel(tgt) {
            DirectionClass::Unsupervised
        } else {
            DirectionClass::ZeroShot
        })
    }

    /// All ordered directions between distinct languages, sorted by name.
    pub fn directions(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for a in &self.languages {
            for b in &self.languages {
                if a != b {
                    out.push((a.clone(), b.clone()));
                }
            }
        }
        out.sort();
        out
    }

    /// Training sentences (parallel and monolingual) as whitespace-joined lines.
    pub fn training_lines(&self) -> Vec<String> {
        let par = self.parallel.iter().flat_map(|p| p.a.iter().chain(&p.b));
        let mono = self.mono.iter().flat_map(|m| &m.sentences);
        par.chain(mono).map(|s| s.join(" ")).collect()
    }

    pub fn manifest(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("languages", self.languages.join(","));
        kv.set("hub", &self.hub);
        let names: Vec<String> = self.parallel.iter().map(ParallelCorpus::name).collect();
        kv.set("parallel", names.join(","));
        let mono: Vec<&str> = self.mono.iter().map(|m| m.lang.as_str()).collect();
        kv.set("mono", mono.join(","));
        kv.set("multiway", self.multiway.is_some());
        kv
    }

    /// Writes corpus files and a manifest extended with `extra` keys.
    pub fn write_dir(&self, dir: &Path, extra: &KeyValues) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let mut manifest = self.manifest();
        for k in extra.keys() {
            manifest.set(k, extra.get(k).unwrap_or_default());
        }
        manifest.save(&dir.join("manifest.txt"))?;
        for p in &self.parallel {
            let name = p.name();
            write_lines(&dir.join(format!("{name}.{}.txt", p.lang_a)), &p.a)?;
            write_lines(&dir.join(format!("{name}.{}.txt", p.lang_b)), &p.b)?;
        }
        for m in &self.mono {
            write_lines(&dir.join(format!("mono.{}.txt", m.lang)), &m.sentences)?;
        }
        if let Some(mw) = &self.multiway {
            for (lang, lines) in mw.languages.iter().zip(&mw.lines) {
                write_lines(&dir.join(format!("multiway.{lang}.txt")), lines)?;
            }
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest = KeyValues::load(&dir.join("manifest.txt"))?;
        let languages = manifest.list("languages");
        if languages.len() < 2 {
            return Err(Error::Data(format!("{}: need at least two languages", dir.display())));
        }
        let hub = manifest.require("hub")?.to_string();
        let mut parallel = Vec::new();
        for name in manifest.list("parallel") {
            let (a, b) = name
                .split_once('-')
                .ok_or_else(|| Error::Data(format!("bad parallel corpus name {name}")))?;
            let pa = read_lines(&dir.join(format!("{name}.{a}.txt")))?;
            let pb = read_lines(&dir.join(format!("{name}.{b}.txt")))?;
            if pa.len() != pb.len() {
                return Err(Error::Data(format!(
                    "{name}: {} lines in {a} but {} in {b}",
                    pa.len(),
                    pb.len()
                )));
            }
            parallel.push(ParallelCorpus {
                lang_a: a.to_string(),
                lang_b: b.to_string(),
                a: pa,
                b: pb,
            });
        }
        let mut mono = Vec::new();
        for lang in manifest.list("mono") {
            mono.push(MonoCorpus {
                sentences: read_lines(&dir.join(format!("mono.{lang}.txt")))?,
                lang,
            });
        }
        let multiway = if manifest.get("multiway") == Some("true") {
            let mut lines = Vec::new();
            for lang in &languages {
                lines.push(read_lines(&dir.join(format!("multiway.{lang}.txt")))?);
            }
            if lines.iter().any(|l| l.len() != lines[0].len()) {
                return Err(Error::Data("multi-way files are not line-aligned".into()));
            }
            Some(MultiWaySet {
                languages: languages.clone(),
                lines,
            })
        } else {
            None
        };
        Ok(CorpusSet {
            languages,
            hub,
            parallel,
            mono,
            multiway,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topology() -> CorpusSet {
        let s = |w: &str| vec![w.to_string()];
        CorpusSet {
            languages: ["en", "de", "fr", "nl"].map(String::from).to_vec(),
            hub: "en".into(),
            parallel: ["de", "fr"]
                .iter()
                .map(|l| ParallelCorpus {
                    lang_a: "en".into(),
                    lang_b: l.to_string(),
                    a: vec![s("x")],
                    b: vec![s("y")],
                })
                .collect(),
            mono: vec![MonoCorpus {
                lang: "nl".into(),
                sentences: vec![s("z")],
            }],
            multiway: None,
        }
    }

    #[test]
    fn direction_classes_follow_topology() {
        let c = topology();
        assert_eq!(c.classify("en", "de").unwrap(), DirectionClass::Supervised);
        assert_eq!(c.classify("fr", "en").unwrap(), DirectionClass::Supervised);
        assert_eq!(c.classify("de", "fr").unwrap(), DirectionClass::ZeroShot);
        assert_eq!(c.classify("nl", "en").unwrap(), DirectionClass::Unsupervised);
        assert_eq!(c.classify("de", "nl").unwrap(), DirectionClass::Unsupervised);
        assert!(c.classify("de", "xx").is_err());
        assert!(c.classify("de", "de").is_err());
        assert_eq!(c.directions().len(), 12);
    }

    #[test]
    fn pair_invariants() {
        let mut p = SentencePair {
            src_lang: "a".into(),
            tgt_lang: "b".into(),
            src: vec!["x".into()],
            tgt: vec!["y".into()],
            kind: PairKind::Parallel,
        };
        assert!(p.validate().is_ok());
        assert_eq!(p.token_cost(), 5);
        p.kind = PairKind::PseudoSelfParallel;
        assert!(p.validate().is_err());
        p.kind = PairKind::Parallel;
        p.tgt.clear();
        assert!(p.validate().is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = topology();
        c.write_dir(dir.path(), &KeyValues::new()).unwrap();
        assert!(dir.path().join("en-de.de.txt").exists());
        assert_eq!(CorpusSet::load_dir(dir.path()).unwrap(), c);
    }

    #[test]
    fn misaligned_parallel_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        topology().write_dir(dir.path(), &KeyValues::new()).unwrap();
        fs::write(dir.path().join("en-de.de.txt"), "a\nb\n").unwrap();
        assert!(matches!(CorpusSet::load_dir(dir.path()), Err(Error::Data(_))));
    }
}
