//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CMTCKPT1"
//! u64 header length, header bytes (UTF-8 `key = value` lines)
//! u64 tensor count
//! per tensor: u32 name length, name bytes, u32 rank, rank × u64 dims,
//!             numel × f64 values
//! ```
//!
//! Writes go to a temporary sibling file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use crate::train::{Adam, TrainConfig, Trainer};
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 8] = b"CMTCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: KeyValues,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header = self.header.to_text();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(r.error("not a checkpoint file"));
        }
        let header_len = r.u64()? as usize;
        let header_text = std::str::from_utf8(r.take(header_len)?).map_err(|_| r.error("header is not UTF-8"))?;
        let header = KeyValues::parse(header_text, origin)?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel.filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()));
            let numel = numel.ok_or_else(|| r.error(&format!("tensor `{name}` shape {shape:?} exceeds file")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(r.error("trailing bytes"));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
            f.write_all(&self.to_bytes()).map_err(Error::io(&tmp))?;
            f.sync_all().map_err(Error::io(&tmp))?;
        }
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Checkpoint::from_bytes(&bytes, path)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Captures a trainer with its configs, the vocabulary hash and any
    /// `extra` header entries.
    pub fn from_trainer(trainer: &Trainer, vocab: &Vocabulary, extra: &KeyValues) -> Self {
        let mut header = KeyValues::new();
        header.set("step", trainer.step);
        header.set("adam_step", trainer.adam.step);
        header.set("vocab_hash", vocab.hash());
        for k in extra.keys() {
            header.set(k, extra.get(k).unwrap_or_default());
        }
        let mut kv = KeyValues::new();
        trainer.model.config.write_to(&mut kv);
        for k in kv.keys() {
            header.set(&format!("model.{k}"), kv.get(k).unwrap_or_default());
        }
        let mut kv = KeyValues::new();
        trainer.config.write_to(&mut kv);
        for k in kv.keys() {
            header.set(&format!("train.{k}"), kv.get(k).unwrap_or_default());
        }
        let params = &trainer.model.params;
        let mut tensors: Vec<(String, Tensor)> = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("consistent")))
            .collect();
        for (prefix, moments) in [("adam.m.", &trainer.adam.m), ("adam.v.", &trainer.adam.v)] {
            for ((n, t), m) in params.iter().zip(moments) {
                tensors.push((format!("{prefix}{n}"), Tensor::new(t.shape().to_vec(), m.clone()).expect("consistent")));
            }
        }
        Checkpoint { header, tensors }
    }

    fn prefixed(&self, prefix: &str) -> KeyValues {
        let mut kv = KeyValues::new();
        for k in self.header.keys() {
            if let Some(rest) = k.strip_prefix(prefix) {
                kv.set(rest, self.header.get(k).unwrap_or_default());
            }
        }
        kv
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        cfg.read_from(&self.prefixed("model."))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.read_from(&self.prefixed("train."))?;
        Ok(cfg)
    }

    /// Fails unless the checkpoint was written with `vocab`.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let stored = self.header.require("vocab_hash")?;
        let actual = vocab.hash();
        if stored != actual {
            return Err(Error::Data(format!(
                "checkpoint vocabulary hash {stored} does not match vocabulary {actual}"
            )));
        }
        Ok(())
    }

    pub fn model(&self, vocab: &Vocabulary) -> Result<Model> {
        self.check_vocab(vocab)?;
        let cfg = self.model_config()?;
        let reference = Model::new(cfg.clone(), 0)?;
        let mut params = ParamStore::new();
        for name in reference.params.names() {
            let t = self
                .tensor(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter `{name}`")))?;
            params.push(name.clone(), t.clone());
        }
        Model::from_params(cfg, params)
    }

    pub fn trainer(&self, vocab: &Vocabulary) -> Result<Trainer> {
        let model = self.model(vocab)?;
        let config = self.train_config()?;
        let mut step = 0usize;
        self.header.read_into("step", &mut step)?;
        let mut adam = Adam::new(&model.params);
        self.header.read_into("adam_step", &mut adam.step)?;
        for (i, name) in model.params.names().iter().enumerate() {
            for (prefix, moments) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
                let t = self
                    .tensor(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer state `{prefix}{name}`")))?;
                if t.numel() != moments[i].len() {
                    return Err(Error::Shape(format!("optimizer state `{prefix}{name}` has {} values", t.numel())));
                }
                moments[i].copy_from_slice(t.data());
            }
        }
        let mut trainer = Trainer::new(model, config)?;
        trainer.adam = adam;
        trainer.step = step;
        Ok(trainer)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, msg: &str) -> Error {
        Error::Data(format!("{}: byte {}: {msg}", self.origin.display(), self.pos))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
