use super::{PairKind, SentencePair};
use crate::error::Result;
use crate::vocab::{Vocabulary, PAD};

/// Right-padded id matrix `rows × len` with a 1/0 mask over real positions.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub rows: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<f64>,
}

impl EncoderInput {
    pub fn from_ids(seqs: &[Vec<usize>]) -> Self {
        let rows = seqs.len();
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD; rows * len];
        let mut mask = vec![0.0; rows * len];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * len..r * len + s.len()].copy_from_slice(s);
            mask[r * len..r * len + s.len()].iter_mut().for_each(|m| *m = 1.0);
        }
        EncoderInput { rows, len, ids, mask }
    }

    /// Unpadded length of row `r`.
    pub fn row_len(&self, r: usize) -> usize {
        self.mask[r * self.len..(r + 1) * self.len]
            .iter()
            .filter(|&&m| m != 0.0)
            .count()
    }
}

/// A padded training batch.
///
/// Decoder input is `[LANG_tgt] tgt` and the output is `tgt [EOS]`, so
/// `tgt_out[t] == tgt_in[t + 1]` wherever both are real tokens. `tgt_enc`
/// is the target sentence laid out as encoder input, used for the
/// contrastive term.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: EncoderInput,
    pub tgt_enc: EncoderInput,
    pub tgt_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_mask: Vec<f64>,
    pub kinds: Vec<PairKind>,
    pub src_langs: Vec<String>,
    pub tgt_langs: Vec<String>,
}

impl Batch {
    pub fn from_pairs(pairs: &[SentencePair], vocab: &Vocabulary) -> Result<Self> {
        let mut src = Vec::with_capacity(pairs.len());
        let mut tgt = Vec::with_capacity(pairs.len());
        for p in pairs {
            p.validate()?;
            src.push(vocab.encode_tokens(&p.src, &p.src_lang, true)?);
            tgt.push(vocab.encode_tokens(&p.tgt, &p.tgt_lang, true)?);
        }
        let rows = pairs.len();
        let tgt_len = tgt.iter().map(|t| t.len() - 1).max().unwrap_or(0);
        let mut tgt_in = vec![PAD; rows * tgt_len];
        let mut tgt_out = vec![PAD; rows * tgt_len];
        let mut tgt_mask = vec![0.0; rows * tgt_len];
        for (r, t) in tgt.iter().enumerate() {
            let n = t.len() - 1;
            tgt_in[r * tgt_len..r * tgt_len + n].copy_from_slice(&t[..n]);
            tgt_out[r * tgt_len..r * tgt_len + n].copy_from_slice(&t[1..]);
            tgt_mask[r * tgt_len..r * tgt_len + n].iter_mut().for_each(|m| *m = 1.0);
        }
        Ok(Batch {
            src: EncoderInput::from_ids(&src),
            tgt_enc: EncoderInput::from_ids(&tgt),
            tgt_len,
            tgt_in,
            tgt_out,
            tgt_mask,
            kinds: pairs.iter().map(|p| p.kind).collect(),
            src_langs: pairs.iter().map(|p| p.src_lang.clone()).collect(),
            tgt_langs: pairs.iter().map(|p| p.tgt_lang.clone()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.src.rows
    }

    /// Number of real target tokens (including EOS).
    pub fn target_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|&&m| m != 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::EOS;

    fn pair(src: &str, tgt: &str) -> SentencePair {
        let t = |s: &str| s.split_whitespace().map(str::to_string).collect();
        SentencePair {
            src_lang: "a".into(),
            tgt_lang: "b".into(),
            src: t(src),
            tgt: t(tgt),
            kind: PairKind::Parallel,
        }
    }

    #[test]
    fn masks_and_shift() {
        let langs = vec!["a".to_string(), "b".to_string()];
        let vocab = Vocabulary::build(["x y z u v"], &langs, 1).unwrap();
        let b = Batch::from_pairs(&[pair("x y z", "u"), pair("x", "u v v")], &vocab).unwrap();
        assert_eq!(b.rows(), 2);
        assert_eq!((b.src.len, b.tgt_len), (5, 4));
        assert_eq!(b.src.row_len(0), 5);
        assert_eq!(b.src.row_len(1), 3);
        for r in 0..2 {
            for i in 0..b.src.len {
                let k = r * b.src.len + i;
                assert_eq!(b.src.mask[k] == 1.0, b.src.ids[k] != PAD);
            }
            for t in 0..b.tgt_len {
                let k = r * b.tgt_len + t;
                assert_eq!(b.tgt_mask[k] == 1.0, b.tgt_out[k] != PAD);
                if t + 1 < b.tgt_len && b.tgt_mask[k + 1] == 1.0 {
                    assert_eq!(b.tgt_out[k], b.tgt_in[k + 1]);
                }
            }
        }
        assert_eq!(b.tgt_in[0], vocab.lang_id("b").unwrap());
        assert_eq!(b.tgt_out[1], EOS);
        assert_eq!(b.target_tokens(), 2 + 4);
        assert_eq!(b.tgt_enc.row_len(1), 5);
    }
}
