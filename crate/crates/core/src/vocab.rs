//! Shared multilingual vocabulary with one indicator token per language.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const LANG_PREFIX: &str = "LANG_";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    languages: Vec<String>,
}

pub fn lang_token(code: &str) -> String {
    format!("{LANG_PREFIX}{code}")
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace-tokenized sentences.
    ///
    /// Layout: reserved ids 0..4, then one indicator per language in the given
    /// order, then corpus tokens with count ≥ `min_count` by descending count
    /// (ties lexicographic).
    pub fn build<'a, I>(sentences: I, languages: &[String], min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut seen = HashSet::new();
        for code in languages {
            if code.is_empty() || code.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid language code {code:?}")));
            }
            if !seen.insert(code) {
                return Err(Error::Config(format!("duplicate language code {code}")));
            }
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut n_tokens = 0usize;
        for line in sentences {
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
                n_tokens += 1;
            }
        }
        if n_tokens == 0 {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(languages.iter().map(|l| lang_token(l)));
        let mut corpus: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(tok, c)| c >= min_count.max(1) && !tokens.iter().any(|t| t == tok))
            .collect();
        corpus.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        tokens.extend(corpus.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_tokens(tokens, languages.to_vec()))
    }

    /// Builds from UTF-8 text files with one sentence per line.
    pub fn build_from_files<P: AsRef<Path>>(
        files: &[P],
        languages: &[String],
        min_count: usize,
    ) -> Result<Self> {
        let mut texts = Vec::with_capacity(files.len());
        for f in files {
            let path = f.as_ref();
            texts.push(fs::read_to_string(path).map_err(Error::io(path))?);
        }
        Self::build(texts.iter().flat_map(|t| t.lines()), languages, min_count)
    }

    fn from_tokens(tokens: Vec<String>, languages: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            index,
            languages,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn lang_id(&self, code: &str) -> Result<usize> {
        if !self.languages.iter().any(|l| l == code) {
            return Err(Error::Config(format!("language {code} is not registered")));
        }
        Ok(self.index[&lang_token(code)])
    }

    /// True for reserved and language-indicator ids.
    pub fn is_special(&self, id: usize) -> bool {
        id < RESERVED.len() + self.languages.len()
    }

    /// `[LANG_lang] + ids + [EOS]`, or `ids + [EOS]` without the indicator.
    pub fn encode(&self, sentence: &str, lang: &str, add_lang_token: bool) -> Result<Vec<usize>> {
        let tokens: Vec<&str> = sentence.split_whitespace().collect();
        self.encode_tokens(&tokens, lang, add_lang_token)
    }

    pub fn encode_tokens<S: AsRef<str>>(
        &self,
        tokens: &[S],
        lang: &str,
        add_lang_token: bool,
    ) -> Result<Vec<usize>> {
        let lang_id = self.lang_id(lang)?;
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        if add_lang_token {
            ids.push(lang_id);
        }
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(UNK)));
        ids.push(EOS);
        Ok(ids)
    }

    /// Surface tokens up to the first EOS, skipping indicator and padding ids.
    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i == UNK || !self.is_special(i))
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        self.decode_tokens(ids).join(" ")
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Data(msg) => Error::parse(path, 0, msg),
            other => other,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        let languages: Vec<String> = tokens[RESERVED.len()..]
            .iter()
            .map_while(|t| t.strip_prefix(LANG_PREFIX).map(str::to_string))
            .collect();
        let unique: HashSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(Error::Data("vocabulary contains duplicate tokens".into()));
        }
        Ok(Self::from_tokens(tokens, languages))
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn langs(codes: &[&str]) -> Vec<String> {
        codes.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn small_corpus_layout() {
        let v = Vocabulary::build(["a b", "a"], &langs(&["L1"]), 1).unwrap();
        assert_eq!(v.len(), 7);
        let expected = ["<pad>", "<s>", "</s>", "<unk>", "LANG_L1", "a", "b"];
        for (i, t) in expected.iter().enumerate() {
            assert_eq!(v.token(i), Some(*t));
        }
    }

    #[test]
    fn min_count_drops_rare_tokens() {
        let v = Vocabulary::build(["a b", "a"], &langs(&["L1"]), 2).unwrap();
        assert_eq!(v.id("b"), None);
        assert_eq!(v.encode("a b", "L1", true).unwrap(), vec![4, 5, UNK, EOS]);
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::build(["a b", "a"], &langs(&["L1"]), 1).unwrap();
        let l = v.lang_id("L1").unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(v.encode("a b", "L1", true).unwrap(), vec![l, a, b, EOS]);
        assert_eq!(v.encode("", "L1", true).unwrap(), vec![l, EOS]);
        assert_eq!(v.encode("a zzz", "L1", true).unwrap(), vec![l, a, UNK, EOS]);
        assert_eq!(v.encode("a", "L1", false).unwrap(), vec![a, EOS]);
        assert!(v.encode("a", "L9", true).is_err());
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            Vocabulary::build(Vec::<&str>::new(), &langs(&["L1"]), 1),
            Err(Error::Data(_))
        ));
        assert!(Vocabulary::build(["  "], &langs(&["L1"]), 1).is_err());
        assert!(matches!(
            Vocabulary::build(["a"], &langs(&["L1", "L1"]), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ordering_by_count_then_lexicographic() {
        let v = Vocabulary::build(["c b a", "c b", "z y"], &langs(&["x", "y"]), 1).unwrap();
        let corpus: Vec<&str> = (6..v.len()).map(|i| v.token(i).unwrap()).collect();
        assert_eq!(corpus, ["b", "c", "a", "y", "z"]);
    }

    #[test]
    fn deterministic_serialization_and_reload() {
        let corpus = ["x y z", "y z", "z"];
        let a = Vocabulary::build(corpus, &langs(&["p", "q"]), 1).unwrap();
        let b = Vocabulary::build(corpus, &langs(&["p", "q"]), 1).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(a.hash(), b.hash());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        a.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded, a);
        assert_eq!(loaded.languages(), &["p".to_string(), "q".to_string()]);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in proptest::collection::vec(0usize..6, 0..12)) {
            let pool = ["w0", "w1", "w2", "w3", "w4", "w5"];
            let v = Vocabulary::build([pool.join(" ").as_str()], &langs(&["aa", "bb"]), 1).unwrap();
            let sentence: Vec<&str> = words.iter().map(|&i| pool[i]).collect();
            let s = sentence.join(" ");
            let ids = v.encode(&s, "bb", true).unwrap();
            prop_assert_eq!(v.decode(&ids), s);
        }

        #[test]
        fn encode_is_injective(a in proptest::collection::vec(0usize..4, 0..6),
                               b in proptest::collection::vec(0usize..4, 0..6)) {
            let pool = ["p", "q", "r", "s"];
            let v = Vocabulary::build(["p q r s"], &langs(&["aa"]), 1).unwrap();
            let sa: Vec<&str> = a.iter().map(|&i| pool[i]).collect();
            let sb: Vec<&str> = b.iter().map(|&i| pool[i]).collect();
            let ea = v.encode(&sa.join(" "), "aa", true).unwrap();
            let eb = v.encode(&sb.join(" "), "aa", true).unwrap();
            prop_assert_eq!(ea == eb, a == b);
        }
    }
}
