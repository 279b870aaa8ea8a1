//! Run directories: training, evaluation and the five-mode ablation.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::SynonymDictionary;
use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::corpus::{CorpusSet, DirectionClass};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_directions, reports_to_tsv, retrieval_directions, summarize, DirectionReport, ModelTranslator,
    ScenarioSummary,
};
use crate::model::{Model, ModelConfig};
use crate::train::{Mode, StepRecord, TrainConfig, Trainer};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LOG_FILE: &str = "train_log.tsv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Creates `dir` with `manifest` already inside. A missing directory is
/// built under a temporary name and renamed into place; an existing
/// non-empty one is an error unless `force`, which clears it first.
pub fn create_output_dir(dir: &Path, force: bool, manifest: &KeyValues) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(Error::io(dir))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(Error::io(dir))?;
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(Error::io(parent))?;
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("invalid output directory {}", dir.display())))?;
    let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(Error::io(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(Error::io(&tmp))?;
    manifest.save(&tmp.join(MANIFEST_FILE))?;
    fs::rename(&tmp, dir).map_err(Error::io(dir))
}

/// Everything needed to train one model.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus_dir: PathBuf,
    /// Synonym dictionary; defaults to `synonyms.tsv` in the corpus directory.
    pub dictionary: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: usize,
}

impl RunConfig {
    pub fn new(corpus_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            corpus_dir: corpus_dir.into(),
            dictionary: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            beam: 1,
        }
    }

    /// Reads a flat config. Relative paths resolve against `base`;
    /// unknown keys are rejected.
    pub fn from_key_values(kv: &KeyValues, base: &Path) -> Result<Self> {
        const OWN: [&str; 5] = ["corpus_dir", "dictionary", "beam", "mode", "vocab_size"];
        let mut model_keys = KeyValues::new();
        ModelConfig::default().write_to(&mut model_keys);
        for k in kv.keys() {
            let known = OWN.contains(&k) || TrainConfig::KEYS.contains(&k) || model_keys.get(k).is_some();
            if !known {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        let mut cfg = RunConfig::new(resolve(kv.require("corpus_dir")?));
        cfg.dictionary = kv.get("dictionary").map(resolve);
        cfg.model.read_from(kv)?;
        cfg.train.read_from(kv)?;
        if let Some(m) = kv.get("mode") {
            cfg.train.set_mode(Mode::from_str(m)?);
        }
        kv.read_into("beam", &mut cfg.beam)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_key_values(&kv, base)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("corpus_dir", self.corpus_dir.display());
        if let Some(d) = &self.dictionary {
            kv.set("dictionary", d.display());
        }
        self.model.write_to(&mut kv);
        self.train.write_to(&mut kv);
        kv.set("beam", self.beam);
        kv
    }

    fn load_dictionary(&self) -> Result<SynonymDictionary> {
        let path = self.dictionary.clone().unwrap_or_else(|| self.corpus_dir.join("synonyms.tsv"));
        if path.exists() {
            SynonymDictionary::load(&path)
        } else if self.train.use_aa {
            Err(Error::Config(format!("augmentation needs a dictionary, {} not found", path.display())))
        } else {
            Ok(SynonymDictionary::new())
        }
    }
}

/// Vocabulary over every training sentence of `corpora`.
pub fn build_vocabulary(corpora: &CorpusSet) -> Result<Vocabulary> {
    let lines = corpora.training_lines();
    Vocabulary::build(lines.iter().map(String::as_str), &corpora.languages, 1)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub vocab: Vocabulary,
    pub corpora: CorpusSet,
    pub last: Option<StepRecord>,
}

/// Trains into `out`: manifest, resolved config, vocabulary, step log,
/// periodic checkpoints and the final `checkpoint.bin`.
pub fn train_run(cfg: &RunConfig, name: &str, out: &Path, force: bool) -> Result<TrainOutcome> {
    let mut manifest = KeyValues::new();
    manifest.set("experiment", name);
    manifest.set("corpus_dir", cfg.corpus_dir.display());
    manifest.set("output_dir", out.display());
    manifest.set("mode", cfg.train.mode().map_or("custom", Mode::name));
    manifest.set("use_ctl", cfg.train.use_ctl);
    manifest.set("use_aa", cfg.train.use_aa);
    manifest.set("use_mono", cfg.train.use_mono);
    manifest.set("seed", cfg.train.seed);
    create_output_dir(out, force, &manifest)?;

    let corpora = CorpusSet::load_dir(&cfg.corpus_dir)?;
    let dict = cfg.load_dictionary()?;
    let vocab = build_vocabulary(&corpora)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    let mut resolved = cfg.clone();
    resolved.model = model_cfg.clone();
    resolved.to_key_values().save(&out.join("config.txt"))?;

    let model = Model::new(model_cfg, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut extra = KeyValues::new();
    extra.set("corpus_dir", cfg.corpus_dir.display());

    let log_path = out.join(LOG_FILE);
    let file = fs::File::create(&log_path).map_err(Error::io(&log_path))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{}", StepRecord::HEADER).map_err(Error::io(&log_path))?;
    let mut last = None;
    let every = cfg.train.checkpoint_every;
    trainer.run(&corpora, &vocab, &dict, cfg.train.total_steps, |t, record| {
        writeln!(log, "{}", record.to_tsv()).map_err(Error::io(&log_path))?;
        if every > 0 && record.step % every == 0 && record.step < t.config.total_steps {
            log.flush().map_err(Error::io(&log_path))?;
            let path = out.join(format!("ckpt-{:06}.bin", record.step));
            Checkpoint::from_trainer(t, &vocab, &extra).save(&path)?;
        }
        last = Some(record.clone());
        Ok(())
    })?;
    log.flush().map_err(Error::io(&log_path))?;
    Checkpoint::from_trainer(&trainer, &vocab, &extra).save(&out.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome {
        trainer,
        vocab,
        corpora,
        last,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Retrieval,
    Bleu,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(Suite::Retrieval),
            "bleu" => Ok(Suite::Bleu),
            "all" => Ok(Suite::All),
            _ => Err(Error::Config(format!("unknown suite `{s}` (expected retrieval, bleu or all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub reports: Vec<DirectionReport>,
    pub summaries: Vec<ScenarioSummary>,
}

impl EvalOutcome {
    pub fn summary(&self, metric: &str) -> Option<&ScenarioSummary> {
        self.summaries.iter().find(|s| s.metric == metric)
    }

    pub fn summary_text(&self) -> String {
        let mut text = String::from("Scenario averages over held-out multi-way sentences\n\n");
        for s in &self.summaries {
            text.push_str(&s.to_text());
            text.push('\n');
        }
        text
    }
}

/// Runs `suite` over every ordered direction of the held-out set.
pub fn evaluate(model: &Model, vocab: &Vocabulary, corpora: &CorpusSet, suite: Suite, beam: usize) -> Result<EvalOutcome> {
    let dirs = corpora.directions();
    let mut reports = Vec::new();
    let mut summaries = Vec::new();
    if matches!(suite, Suite::Retrieval | Suite::All) {
        let r = retrieval_directions(model, vocab, corpora, &dirs)?;
        summaries.push(summarize(corpora, &r, "retrieval")?);
        reports.extend(r);
    }
    if matches!(suite, Suite::Bleu | Suite::All) {
        let mut translator = ModelTranslator { model, vocab, beam };
        let r = evaluate_directions(&mut translator, corpora, &dirs)?;
        summaries.push(summarize(corpora, &r, "bleu")?);
        reports.extend(r);
    }
    Ok(EvalOutcome { reports, summaries })
}

/// Loads a checkpoint together with the vocabulary stored beside it (or at
/// `vocab_path`) and the corpus named in its header (or `corpus_dir`).
pub fn load_checkpoint(ckpt: &Path, vocab_path: Option<&Path>, corpus_dir: Option<&Path>) -> Result<(Model, Vocabulary, CorpusSet)> {
    let ck = Checkpoint::load(ckpt)?;
    let default_vocab = ckpt.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE);
    let vocab = Vocabulary::load(vocab_path.unwrap_or(&default_vocab))?;
    let model = ck.model(&vocab)?;
    let corpus_dir = match corpus_dir {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(ck.header.require("corpus_dir")?),
    };
    let corpora = CorpusSet::load_dir(&corpus_dir)?;
    Ok((model, vocab, corpora))
}

/// Writes `reports.tsv` and `summary.txt` into a fresh `out`.
pub fn write_eval(outcome: &EvalOutcome, ckpt: &Path, out: &Path, force: bool) -> Result<()> {
    let mut manifest = KeyValues::new();
    manifest.set("checkpoint", ckpt.display());
    create_output_dir(out, force, &manifest)?;
    let reports = out.join("reports.tsv");
    fs::write(&reports, reports_to_tsv(&outcome.reports)).map_err(Error::io(&reports))?;
    let summary = out.join("summary.txt");
    fs::write(&summary, outcome.summary_text()).map_err(Error::io(&summary))
}

/// One row of the ablation comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    pub final_mt_per_token: f64,
    pub eval: EvalOutcome,
}

impl AblationRow {
    pub fn metric(&self, metric: &str, class: DirectionClass) -> Option<f64> {
        let s = self.eval.summary(metric)?;
        match class {
            DirectionClass::Supervised => s.supervised,
            DirectionClass::Unsupervised => s.unsupervised,
            DirectionClass::ZeroShot => s.zero_shot,
        }
    }
}

pub fn comparison_table(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "mode\tbleu_supervised\tbleu_unsupervised\tbleu_zero_shot\tretrieval_supervised\tretrieval_unsupervised\tretrieval_zero_shot\tfinal_mt_per_token\n",
    );
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
    for r in rows {
        let _ = write!(out, "{}", r.mode);
        for metric in ["bleu", "retrieval"] {
            for class in [DirectionClass::Supervised, DirectionClass::Unsupervised, DirectionClass::ZeroShot] {
                let _ = write!(out, "\t{}", fmt(r.metric(metric, class)));
            }
        }
        let _ = writeln!(out, "\t{:.4}", r.final_mt_per_token);
    }
    out
}

/// Trains and evaluates each mode under `out/<mode>/`, then writes
/// `comparison.tsv`.
pub fn run_ablation(cfg: &RunConfig, modes: &[Mode], out: &Path, force: bool) -> Result<Vec<AblationRow>> {
    let mut manifest = cfg.to_key_values();
    manifest.set("experiment", "ablation");
    manifest.set("modes", modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(","));
    manifest.set("output_dir", out.display());
    create_output_dir(out, force, &manifest)?;
    let mut rows = Vec::new();
    for &mode in modes {
        let mut run = cfg.clone();
        run.train.set_mode(mode);
        let dir = out.join(mode.name());
        let outcome = train_run(&run, mode.name(), &dir, false)?;
        let eval = evaluate(&outcome.trainer.model, &outcome.vocab, &outcome.corpora, Suite::All, cfg.beam)?;
        write_eval(&eval, &dir.join(CHECKPOINT_FILE), &dir.join("eval"), false)?;
        rows.push(AblationRow {
            mode,
            final_mt_per_token: outcome.last.as_ref().map_or(f64::NAN, |r| r.loss.mt_per_token()),
            eval,
        });
    }
    let path = out.join("comparison.tsv");
    fs::write(&path, comparison_table(&rows)).map_err(Error::io(&path))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_languages, SynthConfig};

    #[test]
    fn output_dir_rules() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("run");
        let mut m = KeyValues::new();
        m.set("a", 1);
        create_output_dir(&dir, false, &m).unwrap();
        assert!(dir.join(MANIFEST_FILE).exists());
        assert!(matches!(create_output_dir(&dir, false, &m), Err(Error::Config(_))));
        fs::write(dir.join("junk"), "x").unwrap();
        create_output_dir(&dir, true, &m).unwrap();
        assert!(!dir.join("junk").exists());
        let empty = root.path().join("empty");
        fs::create_dir(&empty).unwrap();
        create_output_dir(&empty, false, &m).unwrap();
    }

    #[test]
    fn config_keys() {
        let base = Path::new("/data");
        let kv = KeyValues::parse("corpus_dir = corp\nd_model = 32\nmode = aa-ctl\nlr_peak = 0.001\n", Path::new("c")).unwrap();
        let cfg = RunConfig::from_key_values(&kv, base).unwrap();
        assert_eq!(cfg.corpus_dir, Path::new("/data/corp"));
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.train.mode(), Some(Mode::AaCtl));
        assert_eq!(cfg.train.lr_peak, 0.001);
        let back = RunConfig::from_key_values(&cfg.to_key_values(), base).unwrap();
        assert_eq!(back, cfg);
        let bad = KeyValues::parse("corpus_dir = c\nlearning_rate = 1\n", Path::new("c")).unwrap();
        assert!(RunConfig::from_key_values(&bad, base).unwrap_err().to_string().contains("learning_rate"));
    }

    #[test]
    fn tiny_ablation_end_to_end() {
        let root = tempfile::tempdir().unwrap();
        let corpus = root.path().join("corpus");
        let synth = generate_synthetic_languages(&SynthConfig {
            vocab_size: 10,
            n_sentences: 40,
            n_heldout: 8,
            max_len: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        synth.write(&corpus).unwrap();
        let mut cfg = RunConfig::new(&corpus);
        cfg.model = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            max_len: 16,
            ..ModelConfig::default()
        };
        cfg.train.total_steps = 4;
        cfg.train.warmup_steps = 1;
        cfg.train.token_budget = 64;
        let rows = run_ablation(&cfg, &Mode::ALL, &root.path().join("abl"), false).unwrap();
        assert_eq!(rows.len(), 5);
        let table = fs::read_to_string(root.path().join("abl/comparison.tsv")).unwrap();
        assert_eq!(table.lines().count(), 6);
        let summary = fs::read_to_string(root.path().join("abl/full/eval/summary.txt")).unwrap();
        for word in ["supervised", "unsupervised", "zero-shot"] {
            assert!(summary.contains(word));
        }
        let log = fs::read_to_string(root.path().join("abl/ctl").join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 5);
        let (model, _, _) = load_checkpoint(&root.path().join("abl/ctl").join(CHECKPOINT_FILE), None, None).unwrap();
        assert_eq!(model.config.d_model, 8);
    }
}
