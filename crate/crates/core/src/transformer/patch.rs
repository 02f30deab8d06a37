//! Forward-time overwrites of the residual stream.

use super::engine::Packing;
use super::params::ModelParams;
use super::scalar::Scalar;
use super::validate_tokens;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum PatchContent<F> {
    /// Row-major replacement vectors, one per patched position.
    Vectors(Vec<F>),
    /// Representation deletion.
    Zeros,
}

/// Overwrite positions `start..=end` at layer boundary `layer` before the
/// following block runs (`layer == n_layers` patches the input of the
/// final norm).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEdit<F> {
    pub layer: usize,
    pub start: usize,
    pub end: usize,
    pub content: PatchContent<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSpec<F> {
    pub edits: Vec<PatchEdit<F>>,
}

impl<F: Scalar> Default for PatchSpec<F> {
    fn default() -> Self {
        Self { edits: Vec::new() }
    }
}

impl<F: Scalar> PatchSpec<F> {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(layer: usize, start: usize, end: usize, content: PatchContent<F>) -> Self {
        Self { edits: vec![PatchEdit { layer, start, end, content }] }
    }

    pub fn is_empty(&self) -> bool {
        self.edits.is_empty()
    }

    pub fn validate(&self, n_layers: usize, seq_len: usize, d_model: usize) -> Result<()> {
        for e in &self.edits {
            if e.layer > n_layers {
                return Err(Error::InvalidArgument(format!("patch layer {} > {n_layers}", e.layer)));
            }
            if e.start > e.end || e.end >= seq_len {
                return Err(Error::InvalidArgument(format!(
                    "patch range {}..={} outside sequence of length {seq_len}",
                    e.start, e.end
                )));
            }
            if let PatchContent::Vectors(v) = &e.content {
                let expected = (e.end - e.start + 1) * d_model;
                if v.len() != expected {
                    return Err(Error::LengthMismatch { expected, got: v.len() });
                }
            }
        }
        Ok(())
    }

    /// Earliest boundary touched by any edit.
    pub fn first_layer(&self) -> Option<usize> {
        self.edits.iter().map(|e| e.layer).min()
    }

    /// Applies the edits for boundary `layer` to one sequence's rows.
    pub fn apply(&self, layer: usize, rows: &mut [F], d_model: usize) {
        for e in self.edits.iter().filter(|e| e.layer == layer) {
            let dst = &mut rows[e.start * d_model..(e.end + 1) * d_model];
            match &e.content {
                PatchContent::Vectors(v) => dst.copy_from_slice(v),
                PatchContent::Zeros => dst.iter_mut().for_each(|x| *x = F::zero()),
            }
        }
    }
}

/// Applies per-sequence patches inside a packed batch.
pub(crate) fn patch_hook<'a, F: Scalar>(
    patches: &'a [Option<&'a PatchSpec<F>>],
    d_model: usize,
) -> impl FnMut(usize, &mut [F], &Packing) + 'a {
    move |layer, resid, packing| {
        for (s, patch) in patches.iter().enumerate() {
            if let Some(p) = patch {
                let (a, b) = (packing.offsets[s], packing.offsets[s + 1]);
                p.apply(layer, &mut resid[a * d_model..b * d_model], d_model);
            }
        }
    }
}

/// Logits (`T × vocab`) of one sequence with the patch applied.
pub fn forward_patched<F: Scalar>(params: &ModelParams<F>, tokens: &[u32], patch: &PatchSpec<F>) -> Result<Vec<F>> {
    let mut out = forward_patched_batch(params, &[tokens], &[Some(patch)])?;
    Ok(out.pop().expect("one sequence"))
}

/// Batched variant: one optional patch per sequence. Returns each
/// sequence's logits.
pub fn forward_patched_batch<F: Scalar>(
    params: &ModelParams<F>,
    seqs: &[&[u32]],
    patches: &[Option<&PatchSpec<F>>],
) -> Result<Vec<Vec<F>>> {
    validate_tokens(&params.cfg, seqs)?;
    if seqs.len() != patches.len() {
        return Err(Error::LengthMismatch { expected: seqs.len(), got: patches.len() });
    }
    let d = params.cfg.d_model;
    for (seq, p) in seqs.iter().zip(patches) {
        if let Some(p) = p {
            p.validate(params.cfg.n_layers, seq.len(), d)?;
        }
    }
    let mut hook = patch_hook(patches, d);
    let acts = params.run(seqs, &mut hook);
    let v = params.cfg.vocab_size;
    Ok((0..seqs.len())
        .map(|s| acts.logits[acts.packing.offsets[s] * v..acts.packing.offsets[s + 1] * v].to_vec())
        .collect())
}
