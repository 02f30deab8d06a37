//! A tiny decoder-only transformer (pre-norm blocks, causal multi-head
//! attention, GELU MLP) with a hand-written reverse pass, AdamW training,
//! residual-stream capture and forward-time activation patching.

mod checkpoint;
mod config;
mod engine;
mod optim;
mod params;
mod patch;
mod scalar;
mod train;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_for, params_hash, parse_checkpoint, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{LayerSpans, ModelConfig, ParamLayout, PositionalScheme, Span};
pub use engine::{Activations, BoundaryHook, NoHook, Packing};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use params::{Model, ModelParams};
pub use patch::{forward_patched, forward_patched_batch, PatchContent, PatchEdit, PatchSpec};
pub use scalar::{matmul, matmul_at, matmul_bt, Scalar};
pub use train::{
    read_log, train, AuxParityConfig, AuxTarget, EvalMetrics, Hooks, LossMode, LrSchedule, TrainConfig, TrainDoc,
    TrainOutcome, TrainPosition, TrainRecord, TrainState, TrainingData,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Capture {
    None,
    Resid,
    ResidAttn,
}

/// Residual-stream vectors at every layer boundary and, optionally, the
/// attention probabilities of every head.
#[derive(Clone, Debug)]
pub struct ForwardTrace<F> {
    pub packing: Packing,
    pub d_model: usize,
    pub n_heads: usize,
    /// `resid[l]` is the packed `N × d` residual after layer `l`
    /// (0 = embeddings, L = input of the final norm).
    pub resid: Vec<Vec<F>>,
    /// `attn[l]` holds every sequence's `heads × T × T` block for layer `l`.
    pub attn: Option<Vec<Vec<F>>>,
}

impl<F: Scalar> ForwardTrace<F> {
    pub fn n_layers(&self) -> usize {
        self.resid.len() - 1
    }

    pub fn seq_len(&self, seq: usize) -> usize {
        self.packing.len(seq)
    }

    pub fn resid_at(&self, seq: usize, layer: usize, pos: usize) -> &[F] {
        let row = self.packing.offsets[seq] + pos;
        &self.resid[layer][row * self.d_model..(row + 1) * self.d_model]
    }

    /// Residual rows of one sequence at one boundary (`T × d`).
    pub fn resid_seq(&self, seq: usize, layer: usize) -> &[F] {
        let (a, b) = (self.packing.offsets[seq], self.packing.offsets[seq + 1]);
        &self.resid[layer][a * self.d_model..b * self.d_model]
    }

    /// `T × T` attention matrix of head `head` in block `layer`
    /// (0-based block index; row = query position).
    pub fn attn_matrix(&self, seq: usize, layer: usize, head: usize) -> Option<&[F]> {
        let attn = self.attn.as_ref()?;
        let len = self.packing.len(seq);
        let start = self.packing.att_offsets[seq] + head * len * len;
        Some(&attn[layer][start..start + len * len])
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<F> {
    pub logits: Vec<F>,
    pub packing: Packing,
    pub vocab_size: usize,
    pub trace: Option<ForwardTrace<F>>,
}

impl<F: Scalar> ForwardOutput<F> {
    pub fn logits_at(&self, seq: usize, pos: usize) -> &[F] {
        let row = self.packing.offsets[seq] + pos;
        &self.logits[row * self.vocab_size..(row + 1) * self.vocab_size]
    }

    pub fn seq_logits(&self, seq: usize) -> &[F] {
        let (a, b) = (self.packing.offsets[seq], self.packing.offsets[seq + 1]);
        &self.logits[a * self.vocab_size..b * self.vocab_size]
    }
}

pub(crate) fn validate_tokens(cfg: &ModelConfig, seqs: &[&[u32]]) -> Result<()> {
    for seq in seqs {
        if seq.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if seq.len() > cfg.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_positions {}",
                seq.len(),
                cfg.max_positions
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!("token {bad} out of range for vocab {}", cfg.vocab_size)));
        }
    }
    Ok(())
}

pub(crate) fn trace_from<F: Scalar>(acts: &Activations<F>, cfg: &ModelConfig, capture: Capture) -> Option<ForwardTrace<F>> {
    if capture == Capture::None {
        return None;
    }
    let mut resid: Vec<Vec<F>> = acts.layers.iter().map(|l| l.x_in.clone()).collect();
    resid.push(acts.x_final.clone());
    let attn = (capture == Capture::ResidAttn).then(|| acts.layers.iter().map(|l| l.att.clone()).collect());
    Some(ForwardTrace { packing: acts.packing.clone(), d_model: cfg.d_model, n_heads: cfg.n_heads, resid, attn })
}

/// Causal forward pass over a batch of token sequences.
pub fn forward<F: Scalar>(params: &ModelParams<F>, seqs: &[&[u32]], capture: Capture) -> Result<ForwardOutput<F>> {
    validate_tokens(&params.cfg, seqs)?;
    let acts = params.run(seqs, &mut NoHook);
    let trace = trace_from(&acts, &params.cfg, capture);
    Ok(ForwardOutput { vocab_size: params.cfg.vocab_size, packing: acts.packing, logits: acts.logits, trace })
}

/// Forward pass split into fixed-size shards processed in parallel.
pub fn forward_sharded<F: Scalar>(
    params: &ModelParams<F>,
    seqs: &[&[u32]],
    capture: Capture,
    shard: usize,
) -> Result<Vec<ForwardOutput<F>>> {
    validate_tokens(&params.cfg, seqs)?;
    Ok(par::map_chunks(seqs, shard, |chunk| {
        let acts = params.run(chunk, &mut NoHook);
        let trace = trace_from(&acts, &params.cfg, capture);
        ForwardOutput { vocab_size: params.cfg.vocab_size, packing: acts.packing, logits: acts.logits, trace }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossNormalization {
    /// Sum of per-position negative log-likelihoods.
    Sum,
    /// Mean over targeted positions.
    Mean,
}

pub fn log_softmax<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

pub fn softmax<F: Scalar>(row: &[F]) -> Vec<F> {
    log_softmax(row).into_iter().map(|x| x.exp()).collect()
}

/// Negative log-likelihood of the targets over `logits` (`N × vocab`),
/// evaluated in double precision.
pub fn loss<F: Scalar>(logits: &[F], vocab: usize, targets: &[Option<u32>], norm: LossNormalization) -> Result<f64> {
    if logits.len() != targets.len() * vocab {
        return Err(Error::LengthMismatch { expected: targets.len() * vocab, got: logits.len() });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, target) in logits.chunks_exact(vocab).zip(targets) {
        if let Some(t) = target {
            let row64: Vec<f64> = row.iter().map(|x| x.f64()).collect();
            total -= log_softmax(&row64)[*t as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no targeted positions".into()));
    }
    Ok(match norm {
        LossNormalization::Sum => total,
        LossNormalization::Mean => total / count as f64,
    })
}

/// One training example: tokens plus per-position optional targets.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub tokens: &'a [u32],
    pub targets: &'a [Option<u32>],
    /// Per-position classes for the auxiliary head, when enabled.
    pub aux_targets: Option<&'a [u32]>,
}

/// Linear classifier on one layer boundary's residual stream, trained
/// jointly with the model.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxHead<F> {
    pub layer: usize,
    pub classes: usize,
    pub weight: f64,
    /// `d × classes` weights followed by `classes` biases.
    pub params: Vec<F>,
}

impl<F: Scalar> AuxHead<F> {
    pub fn init(d_model: usize, layer: usize, classes: usize, weight: f64, seed: u64) -> Self {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::seeded(seed, 0xA0C5);
        let normal = Normal::new(0.0, 0.02).expect("positive std");
        let mut params: Vec<F> = (0..d_model * classes).map(|_| F::of(normal.sample(&mut rng))).collect();
        params.extend(std::iter::repeat_n(F::zero(), classes));
        Self { layer, classes, weight, params }
    }

    pub fn cast<G: Scalar>(&self) -> AuxHead<G> {
        AuxHead {
            layer: self.layer,
            classes: self.classes,
            weight: self.weight,
            params: self.params.iter().map(|x| G::of(x.f64())).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub model: Vec<F>,
    pub aux: Option<Vec<F>>,
    /// Sum of main-objective NLL over targeted positions.
    pub loss_sum: f64,
    pub aux_loss_sum: f64,
    pub targeted: usize,
    pub aux_targeted: usize,
}

impl<F: Scalar> Gradients<F> {
    fn zeros(n: usize, aux: Option<usize>) -> Self {
        Self {
            model: vec![F::zero(); n],
            aux: aux.map(|a| vec![F::zero(); a]),
            loss_sum: 0.0,
            aux_loss_sum: 0.0,
            targeted: 0,
            aux_targeted: 0,
        }
    }

    fn accumulate(&mut self, other: &Gradients<F>) {
        for (a, &b) in self.model.iter_mut().zip(&other.model) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (self.aux.as_mut(), other.aux.as_ref()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.loss_sum += other.loss_sum;
        self.aux_loss_sum += other.aux_loss_sum;
        self.targeted += other.targeted;
        self.aux_targeted += other.aux_targeted;
    }

    pub fn global_norm(&self) -> f64 {
        let m: f64 = self.model.iter().map(|x| x.f64() * x.f64()).sum();
        let a: f64 = self.aux.iter().flatten().map(|x| x.f64() * x.f64()).sum();
        (m + a).sqrt()
    }
}

/// Scale factors turning per-position NLL sums into the optimised objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveScale {
    /// Multiplies every main-objective NLL term.
    pub main: f64,
    /// Multiplies every auxiliary NLL term (already includes the head
    /// weight).
    pub aux: f64,
}

/// Exact gradients of `scale.main * Σ NLL + scale.aux * Σ aux NLL` for one
/// shard of examples.
pub fn grad<F: Scalar>(
    params: &ModelParams<F>,
    examples: &[Example<'_>],
    scale: ObjectiveScale,
    aux: Option<&AuxHead<F>>,
) -> Result<Gradients<F>> {
    let seqs: Vec<&[u32]> = examples.iter().map(|e| e.tokens).collect();
    validate_tokens(&params.cfg, &seqs)?;
    for e in examples {
        if e.targets.len() != e.tokens.len() {
            return Err(Error::LengthMismatch { expected: e.tokens.len(), got: e.targets.len() });
        }
    }
    let v = params.cfg.vocab_size;
    let d = params.cfg.d_model;
    let acts = params.run(&seqs, &mut NoHook);
    let n = acts.packing.rows();
    let mut out = Gradients::zeros(params.len(), aux.map(|a| a.params.len()));

    let main = F::of(scale.main);
    let mut dlogits = vec![F::zero(); n * v];
    for (s, e) in examples.iter().enumerate() {
        let o = acts.packing.offsets[s];
        for (t, target) in e.targets.iter().enumerate() {
            let Some(target) = target else { continue };
            let row = &acts.logits[(o + t) * v..(o + t + 1) * v];
            let logp = log_softmax(row);
            out.loss_sum -= logp[*target as usize].f64();
            out.targeted += 1;
            let drow = &mut dlogits[(o + t) * v..(o + t + 1) * v];
            for (k, (dl, lp)) in drow.iter_mut().zip(&logp).enumerate() {
                let y = if k == *target as usize { F::one() } else { F::zero() };
                *dl = (lp.exp() - y) * main;
            }
        }
    }
    if !out.loss_sum.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }

    let mut extra = Vec::new();
    if let Some(head) = aux {
        let c = head.classes;
        let resid = acts.resid(head.layer);
        let (w, b) = head.params.split_at(d * c);
        let mut logits = vec![F::zero(); n * c];
        matmul(&mut logits, resid, w, n, d, c, false);
        for row in logits.chunks_exact_mut(c) {
            for (x, &bb) in row.iter_mut().zip(b) {
                *x += bb;
            }
        }
        let mut dl = vec![F::zero(); n * c];
        let s = F::of(scale.aux);
        for (si, e) in examples.iter().enumerate() {
            let Some(targets) = e.aux_targets else {
                return Err(Error::InvalidArgument("auxiliary head enabled without aux targets".into()));
            };
            let o = acts.packing.offsets[si];
            for (t, &target) in targets.iter().enumerate() {
                let logp = log_softmax(&logits[(o + t) * c..(o + t + 1) * c]);
                out.aux_loss_sum -= logp[target as usize].f64();
                out.aux_targeted += 1;
                for (k, lp) in logp.iter().enumerate() {
                    let y = if k == target as usize { F::one() } else { F::zero() };
                    dl[(o + t) * c + k] = (lp.exp() - y) * s;
                }
            }
        }
        let ga = out.aux.as_mut().expect("aux gradient buffer");
        let (gw, gb) = ga.split_at_mut(d * c);
        matmul_at(gw, resid, &dl, d, n, c, true);
        for row in dl.chunks_exact(c) {
            for (g, &x) in gb.iter_mut().zip(row) {
                *g += x;
            }
        }
        let mut dx = vec![F::zero(); n * d];
        matmul_bt(&mut dx, &dl, w, n, c, d, false);
        extra.push((head.layer, dx));
    }

    params.backward(&seqs, &acts, &dlogits, &extra, &mut out.model);
    Ok(out)
}

/// Gradient over a whole batch: fixed-size shards are evaluated in
/// parallel and reduced in shard order, so the result does not depend on
/// the worker count.
pub fn batch_grad<F: Scalar>(
    params: &ModelParams<F>,
    examples: &[Example<'_>],
    scale: ObjectiveScale,
    aux: Option<&AuxHead<F>>,
    shard: usize,
) -> Result<Gradients<F>> {
    let parts = par::map_chunks(examples, shard, |chunk| grad(params, chunk, scale, aux));
    let mut total = Gradients::zeros(params.len(), aux.map(|a| a.params.len()));
    for part in parts {
        total.accumulate(&part?);
    }
    Ok(total)
}
