//! Translation cross-entropy, in-batch contrastive loss and their sum.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Summed negative log-likelihood over unmasked target positions.
pub fn mt_loss(tape: &mut Tape, logits: Var, tgt_out: &[usize], tgt_mask: &[f64]) -> Result<Var> {
    tape.cross_entropy(logits, tgt_out, tgt_mask)
}

/// Summed InfoNCE over rows, with cosine similarity scaled by `1/tau`.
/// Row `b` of `r_tgt` is the positive for row `b` of `r_src` and every
/// other target row is a negative. With `include_positive` off the
/// denominator sums over negatives only, which needs at least two rows.
pub fn contrastive_loss(tape: &mut Tape, r_src: Var, r_tgt: Var, tau: f64, include_positive: bool) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if tape.shape(r_src) != tape.shape(r_tgt) || tape.shape(r_src).len() != 2 {
        return Err(Error::Shape(format!(
            "contrastive_loss: {:?} vs {:?}",
            tape.shape(r_src),
            tape.shape(r_tgt)
        )));
    }
    let b = tape.shape(r_src)[0];
    let sim = tape.cosine_matrix(r_src, r_tgt)?;
    let logits = tape.scale(sim, 1.0 / tau);
    if include_positive {
        let targets: Vec<usize> = (0..b).collect();
        return tape.cross_entropy(logits, &targets, &vec![1.0; b]);
    }
    if b < 2 {
        return Err(Error::Shape("contrastive_loss: negatives-only form needs two rows".into()));
    }
    let mut eye = vec![0.0; b * b];
    let mut block = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
        block[i * b + i] = -1e9;
    }
    let eye = tape.constant(Tensor::new(vec![b, b], eye)?);
    let block = tape.constant(Tensor::new(vec![b, b], block)?);
    let masked = tape.add(logits, block)?;
    let lse = tape.log_sum_exp(masked)?;
    let lse = tape.sum(lse);
    let diag = tape.mul(logits, eye)?;
    let diag = tape.sum(diag);
    let neg = tape.scale(diag, -1.0);
    tape.add(lse, neg)
}

/// `mt + lambda * avg_seq_len * ctl`.
pub fn combined_loss(tape: &mut Tape, mt: Var, ctl: Var, lambda: f64, avg_seq_len: f64) -> Result<Var> {
    let weighted = tape.scale(ctl, lambda * avg_seq_len);
    tape.add(mt, weighted)
}

/// Mean number of unmasked target positions per row.
pub fn average_length(tgt_mask: &[f64], rows: usize) -> f64 {
    if rows == 0 {
        return 0.0;
    }
    tgt_mask.iter().filter(|&&m| m != 0.0).count() as f64 / rows as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub mt: f64,
    pub ctl: f64,
    pub combined: f64,
    pub avg_seq_len: f64,
    pub token_count: usize,
    pub batch_rows: usize,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.mt.is_finite() && self.ctl.is_finite() && self.combined.is_finite()
    }

    /// Translation loss per target token.
    pub fn mt_per_token(&self) -> f64 {
        self.mt / self.token_count.max(1) as f64
    }
}
