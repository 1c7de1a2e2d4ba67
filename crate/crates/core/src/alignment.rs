//! Duplicate-debiased bidirectional contrastive losses and modality fusion.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LOG_TAU: &str = "align.log_tau";
pub const FUSE_WEIGHT: &str = "fuse.weight";
pub const FUSE_BIAS: &str = "fuse.bias";
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 100.0;

/// `1 / (number of keys equal to key_i)` for every position.
pub fn duplicate_weights(keys: &[String]) -> Vec<f64> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for k in keys {
        *counts.entry(k.as_str()).or_default() += 1;
    }
    keys.iter().map(|k| 1.0 / counts[k.as_str()] as f64).collect()
}

/// Clamps a stored `ln(tau)` so that `tau` stays in `[TAU_MIN, TAU_MAX]`.
pub fn clamp_log_tau(log_tau: f64) -> f64 {
    log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln())
}

/// Paired image and text rows with their duplicate-detection keys.
pub struct AlignmentBatch<'t> {
    pub image: Var<'t>,
    pub text: Var<'t>,
    pub keys: Vec<String>,
}

impl<'t> AlignmentBatch<'t> {
    /// Stacks `1 × d` pooled image rows against text vectors, dropping
    /// pairs whose text embedding is the zero vector. `None` if nothing
    /// remains.
    pub fn assemble(
        tape: &'t Tape,
        rows: &[Var<'t>],
        texts: &[Vec<f64>],
        keys: &[String],
    ) -> Result<Option<Self>> {
        if rows.len() != texts.len() || rows.len() != keys.len() {
            return Err(Error::Validation(format!(
                "alignment batch with {} images, {} texts, {} keys",
                rows.len(),
                texts.len(),
                keys.len()
            )));
        }
        let keep: Vec<usize> = (0..rows.len())
            .filter(|&i| texts[i].iter().any(|&x| x != 0.0))
            .collect();
        if keep.is_empty() {
            return Ok(None);
        }
        let image = Var::concat(&keep.iter().map(|&i| rows[i]).collect::<Vec<_>>(), 0)?;
        let d = texts[keep[0]].len();
        let data = keep.iter().flat_map(|&i| texts[i].iter().copied()).collect();
        let text = tape.constant(Tensor::new(vec![keep.len(), d], data)?);
        Ok(Some(AlignmentBatch {
            image,
            text,
            keys: keep.iter().map(|&i| keys[i].clone()).collect(),
        }))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// `-(1/B) Σ_i Ω(i)⁻¹ [log softmax_row(S)_ii + log softmax_col(S)_ii]`
/// with `S = image · textᵀ / tau` and `tau = exp(log_tau)`.
pub fn contrastive_loss<'t>(batch: &AlignmentBatch<'t>, log_tau: Var<'t>) -> Result<Var<'t>> {
    let b = batch.len();
    let (ib, tb) = (batch.image.shape(), batch.text.shape());
    if ib.len() != 2 || ib != tb || ib[0] != b {
        return Err(Error::shape("contrastive_loss", &ib, &tb));
    }
    if !batch.image.value().is_finite() || !batch.text.value().is_finite() {
        return Err(Error::NonFinite("alignment embeddings".into()));
    }
    let inv_tau = log_tau.scale(-1.0).exp();
    let s = batch.image.matmul_t(batch.text)?.scale_by(inv_tau)?;
    let row = s.log_softmax(1)?.diagonal()?;
    let col = s.log_softmax(0)?.diagonal()?;
    let w = batch.image.tape().constant(Tensor::vector(duplicate_weights(&batch.keys)));
    Ok(row.add(col)?.mul(w)?.sum().scale(-1.0 / b as f64))
}

/// One contrastive loss per modality batch (`None` entries give 0).
pub fn modality_alignment_losses<'t>(
    tape: &'t Tape,
    batches: &[Option<AlignmentBatch<'t>>],
    log_tau: Var<'t>,
) -> Result<Vec<Var<'t>>> {
    batches
        .iter()
        .map(|b| match b {
            Some(b) => contrastive_loss(b, log_tau),
            None => Ok(tape.constant(Tensor::scalar(0.0))),
        })
        .collect()
}

/// Global-level loss: same contract, applied to fused pooled images.
pub fn global_alignment_loss<'t>(batch: &AlignmentBatch<'t>, log_tau: Var<'t>) -> Result<Var<'t>> {
    contrastive_loss(batch, log_tau)
}

/// Concatenates the K `l × d` embeddings along features and maps each
/// row back to `d` with one affine layer.
pub fn fuse_modalities<'t>(parts: &[Var<'t>], weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::shape("fuse_modalities", &[], &[]))?.shape();
    for p in parts {
        if p.shape() != first {
            return Err(Error::shape("fuse_modalities", &first, &p.shape()));
        }
    }
    let cat = if parts.len() == 1 { parts[0] } else { Var::concat(parts, 1)? };
    cat.affine(weight, bias)
}
