//! Adam with warmup and linear decay, global-norm clipping and the joint
//! translation + contrastive training step.

use std::fmt;
use std::str::FromStr;

use crate::augment::SynonymDictionary;
use crate::config::KeyValues;
use crate::corpus::{Batch, CorpusSet, PairStream, StreamConfig};
use crate::error::{Error, Result};
use crate::loss::{average_length, combined_loss, contrastive_loss, mt_loss, LossReport};
use crate::model::{ForwardOptions, Model, ParamStore};
use crate::rng::{derive_seed, tag};
use crate::tensor::Tape;
use crate::vocab::Vocabulary;

/// The five ablation configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Baseline,
    Ctl,
    Aa,
    AaCtl,
    Full,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Baseline, Mode::Ctl, Mode::Aa, Mode::AaCtl, Mode::Full];

    /// `(use_ctl, use_aa, use_mono)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Mode::Baseline => (false, false, false),
            Mode::Ctl => (true, false, false),
            Mode::Aa => (false, true, false),
            Mode::AaCtl => (true, true, false),
            Mode::Full => (true, true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Ctl => "ctl",
            Mode::Aa => "aa",
            Mode::AaCtl => "aa-ctl",
            Mode::Full => "full",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}` (expected baseline, ctl, aa, aa-ctl or full)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub clip_norm: f64,
    pub lambda: f64,
    pub tau: f64,
    pub p_replace: f64,
    pub seed: u64,
    pub use_ctl: bool,
    pub use_aa: bool,
    pub use_mono: bool,
    /// Keep the positive pair in the contrastive denominator.
    pub ctl_include_positive: bool,
    pub token_budget: usize,
    pub temperature: f64,
    /// Share of parallel examples replaced by their code-switched version.
    pub aa_ratio: f64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 3e-4,
            warmup_steps: 500,
            total_steps: 5000,
            beta1: 0.9,
            beta2: 0.98,
            eps_adam: 1e-6,
            clip_norm: 5.0,
            lambda: 1.0,
            tau: 0.1,
            p_replace: 0.9,
            seed: 1,
            use_ctl: false,
            use_aa: false,
            use_mono: false,
            ctl_include_positive: true,
            token_budget: 512,
            temperature: 5.0,
            aa_ratio: 0.5,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr_peak > 0.0) {
            return bad(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps_adam > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.tau > 0.0) || !(self.lambda >= 0.0) {
            return bad("tau must be positive and lambda non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.p_replace) || !(0.0..=1.0).contains(&self.aa_ratio) {
            return bad("p_replace and aa_ratio must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn set_mode(&mut self, mode: Mode) {
        (self.use_ctl, self.use_aa, self.use_mono) = mode.flags();
    }

    pub fn mode(&self) -> Option<Mode> {
        let flags = (self.use_ctl, self.use_aa, self.use_mono);
        Mode::ALL.into_iter().find(|m| m.flags() == flags)
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig {
            token_budget: self.token_budget,
            temperature: self.temperature,
            seed: self.seed,
            use_mono: self.use_mono,
            use_aa: self.use_aa,
            p_replace: self.p_replace,
            aa_ratio: self.aa_ratio,
        }
    }

    pub const KEYS: [&'static str; 19] = [
        "lr_peak",
        "warmup_steps",
        "total_steps",
        "beta1",
        "beta2",
        "eps_adam",
        "clip_norm",
        "lambda",
        "tau",
        "p_replace",
        "seed",
        "use_ctl",
        "use_aa",
        "use_mono",
        "ctl_include_positive",
        "token_budget",
        "temperature",
        "aa_ratio",
        "checkpoint_every",
    ];

    pub fn write_to(&self, kv: &mut KeyValues) {
        kv.set("lr_peak", self.lr_peak);
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("total_steps", self.total_steps);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps_adam", self.eps_adam);
        kv.set("clip_norm", self.clip_norm);
        kv.set("lambda", self.lambda);
        kv.set("tau", self.tau);
        kv.set("p_replace", self.p_replace);
        kv.set("seed", self.seed);
        kv.set("use_ctl", self.use_ctl);
        kv.set("use_aa", self.use_aa);
        kv.set("use_mono", self.use_mono);
        kv.set("ctl_include_positive", self.ctl_include_positive);
        kv.set("token_budget", self.token_budget);
        kv.set("temperature", self.temperature);
        kv.set("aa_ratio", self.aa_ratio);
        kv.set("checkpoint_every", self.checkpoint_every);
    }

    pub fn read_from(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("lr_peak", &mut self.lr_peak)?;
        kv.read_into("warmup_steps", &mut self.warmup_steps)?;
        kv.read_into("total_steps", &mut self.total_steps)?;
        kv.read_into("beta1", &mut self.beta1)?;
        kv.read_into("beta2", &mut self.beta2)?;
        kv.read_into("eps_adam", &mut self.eps_adam)?;
        kv.read_into("clip_norm", &mut self.clip_norm)?;
        kv.read_into("lambda", &mut self.lambda)?;
        kv.read_into("tau", &mut self.tau)?;
        kv.read_into("p_replace", &mut self.p_replace)?;
        kv.read_into("seed", &mut self.seed)?;
        kv.read_into("use_ctl", &mut self.use_ctl)?;
        kv.read_into("use_aa", &mut self.use_aa)?;
        kv.read_into("use_mono", &mut self.use_mono)?;
        kv.read_into("ctl_include_positive", &mut self.ctl_include_positive)?;
        kv.read_into("token_budget", &mut self.token_budget)?;
        kv.read_into("temperature", &mut self.temperature)?;
        kv.read_into("aa_ratio", &mut self.aa_ratio)?;
        kv.read_into("checkpoint_every", &mut self.checkpoint_every)?;
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`. Steps count from 1.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step as f64;
    let warmup = cfg.warmup_steps as f64;
    let total = cfg.total_steps as f64;
    if step <= warmup {
        cfg.lr_peak * step / warmup
    } else {
        (cfg.lr_peak * (total - step) / (total - warmup)).max(0.0)
    }
}

/// Scales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(params: &mut ParamStore, clip_norm: f64) -> Result<f64> {
    let mut total = 0.0;
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient of `{name}` contains {bad}")));
            }
            total += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = total.sqrt();
    if norm > clip_norm {
        let s = clip_norm / norm;
        for t in params.tensors_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    Ok(norm)
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn update(&mut self, params: &mut ParamStore, lr: f64, cfg: &TrainConfig) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for ((t, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (((p, gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps_adam);
            }
        }
        Ok(())
    }
}

/// Forward and backward pass for one batch. Leaves gradients in `model.params`
/// and returns the loss report; no parameter is changed.
pub fn compute_gradients(model: &mut Model, batch: &Batch, cfg: &TrainConfig, step: usize) -> Result<LossReport> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let src_opts = ForwardOptions::train(derive_seed(cfg.seed, &[tag("dropout.src"), step as u64]));
    let enc = model.encode_on(&mut tape, &p, &batch.src, &src_opts)?;
    let logits = model.decode_on(
        &mut tape,
        &p,
        enc.states,
        &batch.src.mask,
        &batch.tgt_in,
        batch.rows(),
        batch.tgt_len,
        &src_opts,
    )?;
    let mt = mt_loss(&mut tape, logits, &batch.tgt_out, &batch.tgt_mask)?;
    let avg_len = average_length(&batch.tgt_mask, batch.rows());
    let (ctl_value, root) = if cfg.use_ctl {
        let tgt_opts = ForwardOptions::train(derive_seed(cfg.seed, &[tag("dropout.tgt"), step as u64]));
        let tgt = model.encode_on(&mut tape, &p, &batch.tgt_enc, &tgt_opts)?;
        let ctl = contrastive_loss(&mut tape, enc.pooled, tgt.pooled, cfg.tau, cfg.ctl_include_positive)?;
        (tape.item(ctl), combined_loss(&mut tape, mt, ctl, cfg.lambda, avg_len)?)
    } else {
        (0.0, mt)
    };
    let report = LossReport {
        mt: tape.item(mt),
        ctl: ctl_value,
        combined: tape.item(root),
        avg_seq_len: avg_len,
        token_count: batch.target_tokens(),
        batch_rows: batch.rows(),
    };
    if !report.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {step}: {report:?}")));
    }
    tape.backward(root)?;
    model.params.zero_grads();
    model.params.accumulate_grads(&tape, &p);
    Ok(report)
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossReport,
}

impl StepRecord {
    pub const HEADER: &'static str = "step\tlr\tgrad_norm\tmt\tctl\tcombined\tavg_len\ttokens";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{}",
            self.step,
            self.lr,
            self.grad_norm,
            self.loss.mt,
            self.loss.ctl,
            self.loss.combined,
            self.loss.avg_seq_len,
            self.loss.token_count
        )
    }
}

/// Gradient computation, clipping and an Adam update at `step` (from 1).
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &Batch, cfg: &TrainConfig, step: usize) -> Result<StepRecord> {
    let loss = compute_gradients(model, batch, cfg, step)?;
    let grad_norm = clip_gradients(&mut model.params, cfg.clip_norm)?;
    let lr = lr_schedule(step, cfg);
    adam.update(&mut model.params, lr, cfg)?;
    Ok(StepRecord {
        step,
        lr,
        grad_norm,
        loss,
    })
}

/// Model, optimizer and step counter of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    /// Number of completed steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model.params);
        Ok(Trainer {
            model,
            adam,
            config,
            step: 0,
        })
    }

    /// Trains until `until` steps are complete, calling `on_step` after each.
    /// The batch stream is replayed from the start, so a trainer restored at
    /// step k continues exactly as an uninterrupted run.
    pub fn run(
        &mut self,
        corpora: &CorpusSet,
        vocab: &Vocabulary,
        dict: &SynonymDictionary,
        until: usize,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        let mut stream = PairStream::new(corpora, dict, self.config.stream_config())?;
        for _ in 0..self.step {
            stream.next_pairs();
        }
        while self.step < until {
            let batch = match stream.next_batch(vocab) {
                Some(b) => b?,
                None => break,
            };
            let record = train_step(&mut self.model, &mut self.adam, &batch, &self.config, self.step + 1)?;
            self.step += 1;
            on_step(self, &record)?;
        }
        Ok(())
    }
}
