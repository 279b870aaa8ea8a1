//! Aligned augmentation: code-switching through a cross-lingual synonym
//! dictionary, turning parallel and monolingual text into pseudo pairs.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::corpus::{PairKind, SentencePair};
use crate::error::{Error, Result};
use crate::rng::rng_for;

type Word = (String, String);

/// Directed `(language, word) → [(language, word)]` synonym table.
///
/// Only listed directions are stored, empty lists never are, and no entry
/// maps a word to itself in the same language.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynonymDictionary {
    entries: HashMap<Word, Vec<Word>>,
    keys: Vec<Word>,
}

impl SynonymDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one directed entry. Duplicates are ignored; self-maps are rejected.
    pub fn insert(&mut self, src_lang: &str, src_word: &str, tgt_lang: &str, tgt_word: &str) -> Result<()> {
        if src_lang == tgt_lang && src_word == tgt_word {
            return Err(Error::Data(format!("{src_lang}:{src_word} maps to itself")));
        }
        let key = (src_lang.to_string(), src_word.to_string());
        let value = (tgt_lang.to_string(), tgt_word.to_string());
        match self.entries.get_mut(&key) {
            Some(list) => {
                if !list.contains(&value) {
                    list.push(value);
                }
            }
            None => {
                self.keys.push(key.clone());
                self.entries.insert(key, vec![value]);
            }
        }
        Ok(())
    }

    pub fn lookup(&self, lang: &str, word: &str) -> &[Word] {
        // HashMap<(String,String)> cannot be queried by borrowed pairs; the
        // allocation is cheap relative to the rest of a training step.
        self.entries
            .get(&(lang.to_string(), word.to_string()))
            .map_or(&[], Vec::as_slice)
    }

    /// Number of distinct source keys.
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Parses `src_lang \t src_word \t tgt_lang \t tgt_word` lines.
    /// Blank lines are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut dict = SynonymDictionary::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 || cols.iter().any(|c| c.trim().is_empty()) {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!("expected 4 tab-separated columns, got {line:?}"),
                ));
            }
            dict.insert(cols[0], cols[1], cols[2], cols[3])
                .map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        Ok(dict)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, path)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for key in &self.keys {
            for (l, w) in &self.entries[key] {
                out.push_str(&format!("{}\t{}\t{}\t{}\n", key.0, key.1, l, w));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(Error::io(path))
    }

    /// Languages appearing on either side of any entry.
    pub fn languages(&self) -> HashSet<&str> {
        self.entries
            .iter()
            .flat_map(|(k, v)| std::iter::once(k.0.as_str()).chain(v.iter().map(|w| w.0.as_str())))
            .collect()
    }
}

/// Code-switches `x`: every token with dictionary entries is replaced with
/// probability `p_replace` by a uniformly chosen synonym. Length and the
/// positions of uncovered tokens are preserved.
pub fn augment<S: AsRef<str>>(
    x: &[S],
    lang: &str,
    dict: &SynonymDictionary,
    p_replace: f64,
    seed: u64,
) -> Vec<String> {
    let mut rng = rng_for(seed, &[]);
    x.iter()
        .map(|tok| {
            let tok = tok.as_ref();
            let synonyms = dict.lookup(lang, tok);
            if synonyms.is_empty() {
                return tok.to_string();
            }
            // Draw unconditionally so the stream does not depend on p.
            let u: f64 = rng.gen();
            let pick = rng.gen_range(0..synonyms.len());
            if u < p_replace {
                synonyms[pick].1.clone()
            } else {
                tok.to_string()
            }
        })
        .collect()
}

/// Input to [`make_pseudo_pair`]: a parallel pair or a monolingual sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Example {
    Parallel {
        src_lang: String,
        tgt_lang: String,
        src: Vec<String>,
        tgt: Vec<String>,
    },
    Monolingual {
        lang: String,
        sentence: Vec<String>,
    },
}

/// `(xⁱ, xʲ)` → `(C(xⁱ), xʲ)` as pseudo-parallel; monolingual `xⁱ` →
/// `(C(xⁱ), xⁱ)` as pseudo-self-parallel.
pub fn make_pseudo_pair(example: &Example, dict: &SynonymDictionary, p_replace: f64, seed: u64) -> SentencePair {
    match example {
        Example::Parallel {
            src_lang,
            tgt_lang,
            src,
            tgt,
        } => SentencePair {
            src_lang: src_lang.clone(),
            tgt_lang: tgt_lang.clone(),
            src: augment(src, src_lang, dict, p_replace, seed),
            tgt: tgt.clone(),
            kind: PairKind::PseudoParallel,
        },
        Example::Monolingual { lang, sentence } => SentencePair {
            src_lang: lang.clone(),
            tgt_lang: lang.clone(),
            src: augment(sentence, lang, dict, p_replace, seed),
            tgt: sentence.clone(),
            kind: PairKind::PseudoSelfParallel,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn single_line_lookup() {
        let d = SynonymDictionary::parse("L1\tapple\tL2\tapfel\n", &PathBuf::from("d.tsv")).unwrap();
        assert_eq!(d.lookup("L1", "apple"), &[("L2".to_string(), "apfel".to_string())]);
        assert!(d.lookup("L2", "apfel").is_empty());
    }

    #[test]
    fn empty_file_gives_identity_augmentation() {
        let d = SynonymDictionary::parse("", &PathBuf::from("d.tsv")).unwrap();
        assert!(d.is_empty());
        let x = toks("a b c");
        assert_eq!(augment(&x, "L1", &d, 1.0, 3), x);
    }

    #[test]
    fn duplicates_are_removed_in_order() {
        let text = "L1\ta\tL2\tb\nL1\ta\tL3\tc\nL1\ta\tL2\tb\n";
        let d = SynonymDictionary::parse(text, &PathBuf::from("d.tsv")).unwrap();
        assert_eq!(d.lookup("L1", "a").len(), 2);
        assert_eq!(d.lookup("L1", "a")[1].0, "L3");
        assert_eq!(d.to_tsv(), "L1\ta\tL2\tb\nL1\ta\tL3\tc\n");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = SynonymDictionary::parse("L1\ta\tL2\tb\nbroken line\n", &PathBuf::from("d.tsv")).unwrap_err();
        assert!(err.to_string().contains("d.tsv:2"), "{err}");
        let err = SynonymDictionary::parse("L1\ta\tL1\ta\n", &PathBuf::from("d.tsv")).unwrap_err();
        assert!(err.to_string().contains(":1"), "{err}");
    }

    #[test]
    fn replacement_extremes() {
        let mut d = SynonymDictionary::new();
        d.insert("L1", "a", "L2", "x").unwrap();
        d.insert("L1", "b", "L2", "y").unwrap();
        let x = toks("a b a");
        assert_eq!(augment(&x, "L1", &d, 0.0, 1), x);
        assert_eq!(augment(&x, "L1", &d, 1.0, 1), toks("x y x"));
        assert_eq!(augment(&x, "L2", &d, 1.0, 1), x);
    }

    #[test]
    fn pseudo_pairs() {
        let empty = SynonymDictionary::new();
        let mono = Example::Monolingual {
            lang: "L1".into(),
            sentence: toks("a b"),
        };
        let p = make_pseudo_pair(&mono, &empty, 0.9, 5);
        assert_eq!((p.src.clone(), p.tgt.clone()), (toks("a b"), toks("a b")));
        assert_eq!(p.kind, PairKind::PseudoSelfParallel);
        assert_eq!(p.src_lang, p.tgt_lang);

        let mut d = SynonymDictionary::new();
        d.insert("L1", "a", "L2", "x").unwrap();
        d.insert("L1", "b", "L3", "y").unwrap();
        let par = Example::Parallel {
            src_lang: "L1".into(),
            tgt_lang: "L2".into(),
            src: toks("a b"),
            tgt: toks("x z"),
        };
        let p = make_pseudo_pair(&par, &d, 0.0, 5);
        assert_eq!(p.src, toks("a b"));
        assert_eq!(p.tgt, toks("x z"));
        assert_eq!(p.kind, PairKind::PseudoParallel);

        let p = make_pseudo_pair(&mono, &d, 1.0, 5);
        assert_eq!(p.src, toks("x y"));
        assert_eq!(p.tgt, toks("a b"));
    }
}
