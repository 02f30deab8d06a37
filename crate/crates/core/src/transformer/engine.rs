//! Forward and reverse passes of the decoder-only transformer.
//!
//! Sequences in a batch are packed row-wise into one `N × d` matrix so the
//! dense parts (layer norms, projections, MLP) run as single GEMMs; only
//! attention looks at sequence boundaries. Every intermediate needed by the
//! reverse pass is kept in [`Activations`].

use super::config::{LayerSpans, PositionalScheme};
use super::params::ModelParams;
use super::scalar::{matmul, matmul_at, matmul_bt, Scalar};

const LN_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;

/// Row bookkeeping for a packed batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packing {
    /// Row offset of each sequence; last entry is the total row count.
    pub offsets: Vec<usize>,
    /// Offset of each sequence's attention block (`heads × T × T`).
    pub att_offsets: Vec<usize>,
}

impl Packing {
    pub fn new(lens: impl IntoIterator<Item = usize>, heads: usize) -> Self {
        let mut offsets = vec![0];
        let mut att_offsets = vec![0];
        for len in lens {
            offsets.push(offsets.last().unwrap() + len);
            att_offsets.push(att_offsets.last().unwrap() + heads * len * len);
        }
        Self { offsets, att_offsets }
    }

    pub fn rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn seqs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn len(&self, seq: usize) -> usize {
        self.offsets[seq + 1] - self.offsets[seq]
    }

    pub fn att_len(&self) -> usize {
        *self.att_offsets.last().unwrap()
    }
}

#[derive(Clone, Debug, Default)]
pub struct LayerActs<F> {
    pub x_in: Vec<F>,
    ln1: Vec<F>,
    ln1_mean: Vec<F>,
    ln1_rstd: Vec<F>,
    qkv: Vec<F>,
    pub att: Vec<F>,
    ctx: Vec<F>,
    x_mid: Vec<F>,
    ln2: Vec<F>,
    ln2_mean: Vec<F>,
    ln2_rstd: Vec<F>,
    fc_pre: Vec<F>,
    fc_act: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct Activations<F> {
    pub packing: Packing,
    pub start_layer: usize,
    pub layers: Vec<LayerActs<F>>,
    pub x_final: Vec<F>,
    lnf: Vec<F>,
    lnf_mean: Vec<F>,
    lnf_rstd: Vec<F>,
    pub logits: Vec<F>,
}

impl<F: Scalar> Activations<F> {
    /// Residual stream at layer boundary `l` (0 = embeddings, L = final).
    pub fn resid(&self, l: usize) -> &[F] {
        if l == self.layers.len() {
            &self.x_final
        } else {
            &self.layers[l].x_in
        }
    }
}

/// Hook invoked on the residual stream at every layer boundary before the
/// next block (or the final norm) consumes it.
pub trait BoundaryHook<F> {
    fn at_boundary(&mut self, layer: usize, resid: &mut [F], packing: &Packing);
}

pub struct NoHook;

impl<F> BoundaryHook<F> for NoHook {
    fn at_boundary(&mut self, _: usize, _: &mut [F], _: &Packing) {}
}

impl<F, T: FnMut(usize, &mut [F], &Packing)> BoundaryHook<F> for T {
    fn at_boundary(&mut self, layer: usize, resid: &mut [F], packing: &Packing) {
        self(layer, resid, packing)
    }
}

pub(crate) struct Rope<F> {
    cos: Vec<F>,
    sin: Vec<F>,
    half: usize,
}

impl<F: Scalar> Rope<F> {
    pub(crate) fn new(max_len: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for t in 0..max_len {
            for j in 0..half {
                let freq = ROPE_BASE.powf(-(2.0 * j as f64) / head_dim as f64);
                let angle = t as f64 * freq;
                cos.push(F::of(angle.cos()));
                sin.push(F::of(angle.sin()));
            }
        }
        Self { cos, sin, half }
    }

    /// Rotates pairs `(x[j], x[j + half])` by `+angle` (or `-angle` when
    /// `inverse`).
    fn rotate(&self, x: &mut [F], pos: usize, inverse: bool) {
        let base = pos * self.half;
        for j in 0..self.half {
            let c = self.cos[base + j];
            let s = if inverse { -self.sin[base + j] } else { self.sin[base + j] };
            let (a, b) = (x[j], x[j + self.half]);
            x[j] = a * c - b * s;
            x[j + self.half] = a * s + b * c;
        }
    }
}

fn layer_norm<F: Scalar>(x: &[F], g: &[F], b: &[F], out: &mut [F], mean: &mut [F], rstd: &mut [F], d: usize) {
    let eps = F::of(LN_EPS);
    let inv_d = F::one() / F::of(d as f64);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mu = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        mean[r] = mu;
        rstd[r] = rs;
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            o[i] = (row[i] - mu) * rs * g[i] + b[i];
        }
    }
}

/// Accumulates into `dx`, `dg`, `db`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<F: Scalar>(
    dout: &[F],
    x: &[F],
    mean: &[F],
    rstd: &[F],
    g: &[F],
    dx: &mut [F],
    dg: &mut [F],
    db: &mut [F],
    d: usize,
) {
    let inv_d = F::one() / F::of(d as f64);
    let mut dnorm = vec![F::zero(); d];
    for r in 0..mean.len() {
        let row = &x[r * d..(r + 1) * d];
        let dro = &dout[r * d..(r + 1) * d];
        let (mu, rs) = (mean[r], rstd[r]);
        let mut sum_dn = F::zero();
        let mut sum_dn_n = F::zero();
        for i in 0..d {
            let n = (row[i] - mu) * rs;
            dnorm[i] = dro[i] * g[i];
            sum_dn += dnorm[i];
            sum_dn_n += dnorm[i] * n;
            dg[i] += dro[i] * n;
            db[i] += dro[i];
        }
        let (m1, m2) = (sum_dn * inv_d, sum_dn_n * inv_d);
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let n = (row[i] - mu) * rs;
            dxr[i] += rs * (dnorm[i] - m1 - n * m2);
        }
    }
}

fn add_bias<F: Scalar>(out: &mut [F], bias: &[F]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad<F: Scalar>(db: &mut [F], dout: &[F]) {
    for row in dout.chunks_exact(db.len()) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044_715);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044_715);
    let half = F::of(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let sech2 = F::one() - th * th;
    half * (F::one() + th) + half * x * sech2 * c * (F::one() + F::of(3.0) * k * x * x)
}

impl<F: Scalar> ModelParams<F> {
    pub(crate) fn rope(&self, max_len: usize) -> Option<Rope<F>> {
        match self.cfg.positional_scheme {
            PositionalScheme::Rotary => Some(Rope::new(max_len, self.cfg.head_dim())),
            PositionalScheme::Learned => None,
        }
    }

    /// Token (and learned position) embeddings for a packed batch.
    pub fn embed(&self, seqs: &[&[u32]]) -> Vec<F> {
        let d = self.cfg.d_model;
        let emb = self.t(self.layout.tok_emb);
        let pos = self.layout.pos_emb.map(|s| self.t(s));
        let mut x = Vec::with_capacity(seqs.iter().map(|s| s.len()).sum::<usize>() * d);
        for seq in seqs {
            for (t, &tok) in seq.iter().enumerate() {
                let tok = tok as usize;
                let e = &emb[tok * d..(tok + 1) * d];
                match pos {
                    Some(p) => x.extend(e.iter().zip(&p[t * d..(t + 1) * d]).map(|(&a, &b)| a + b)),
                    None => x.extend_from_slice(e),
                }
            }
        }
        x
    }

    /// Runs blocks `start_layer..L` and the unembedding on a residual stream
    /// given at boundary `start_layer`.
    pub fn run_from(
        &self,
        start_layer: usize,
        mut x: Vec<F>,
        packing: Packing,
        hook: &mut dyn BoundaryHook<F>,
    ) -> Activations<F> {
        let cfg = &self.cfg;
        let (d, h, dh, m) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_mlp);
        let n = packing.rows();
        assert_eq!(x.len(), n * d, "residual rows do not match packing");
        let max_len = (0..packing.seqs()).map(|s| packing.len(s)).max().unwrap_or(0);
        let rope = self.rope(max_len);
        let scale = F::one() / F::of(dh as f64).sqrt();

        let mut layers = Vec::with_capacity(cfg.n_layers - start_layer);
        for l in start_layer..cfg.n_layers {
            hook.at_boundary(l, &mut x, &packing);
            let p: &LayerSpans = &self.layout.layers[l];
            let mut a = LayerActs {
                ln1: vec![F::zero(); n * d],
                ln1_mean: vec![F::zero(); n],
                ln1_rstd: vec![F::zero(); n],
                qkv: vec![F::zero(); n * 3 * d],
                att: vec![F::zero(); packing.att_len()],
                ctx: vec![F::zero(); n * d],
                ln2: vec![F::zero(); n * d],
                ln2_mean: vec![F::zero(); n],
                ln2_rstd: vec![F::zero(); n],
                fc_pre: vec![F::zero(); n * m],
                fc_act: vec![F::zero(); n * m],
                ..Default::default()
            };
            layer_norm(&x, self.t(p.ln1_g), self.t(p.ln1_b), &mut a.ln1, &mut a.ln1_mean, &mut a.ln1_rstd, d);
            matmul(&mut a.qkv, &a.ln1, self.t(p.w_qkv), n, d, 3 * d, false);
            add_bias(&mut a.qkv, self.t(p.b_qkv));

            let mut scores = vec![F::zero(); max_len];
            for s in 0..packing.seqs() {
                let (o, len, ao) = (packing.offsets[s], packing.len(s), packing.att_offsets[s]);
                if let Some(rope) = &rope {
                    for t in 0..len {
                        let row = &mut a.qkv[(o + t) * 3 * d..(o + t + 1) * 3 * d];
                        for hh in 0..h {
                            rope.rotate(&mut row[hh * dh..(hh + 1) * dh], t, false);
                            rope.rotate(&mut row[d + hh * dh..d + (hh + 1) * dh], t, false);
                        }
                    }
                }
                for hh in 0..h {
                    let att = &mut a.att[ao + hh * len * len..ao + (hh + 1) * len * len];
                    for t in 0..len {
                        let q = &a.qkv[(o + t) * 3 * d + hh * dh..][..dh];
                        let mut max = F::neg_infinity();
                        for (j, sc) in scores.iter_mut().enumerate().take(t + 1) {
                            let k = &a.qkv[(o + j) * 3 * d + d + hh * dh..][..dh];
                            let v = q.iter().zip(k).map(|(&x, &y)| x * y).sum::<F>() * scale;
                            *sc = v;
                            if v > max {
                                max = v;
                            }
                        }
                        let mut z = F::zero();
                        for j in 0..=t {
                            let e = (scores[j] - max).exp();
                            att[t * len + j] = e;
                            z += e;
                        }
                        let inv = F::one() / z;
                        let ctx = &mut a.ctx[(o + t) * d + hh * dh..][..dh];
                        for j in 0..=t {
                            let w = att[t * len + j] * inv;
                            att[t * len + j] = w;
                            let v = &a.qkv[(o + j) * 3 * d + 2 * d + hh * dh..][..dh];
                            for (c, &vv) in ctx.iter_mut().zip(v) {
                                *c += w * vv;
                            }
                        }
                    }
                }
            }

            let mut x_mid = x.clone();
            matmul(&mut x_mid, &a.ctx, self.t(p.w_o), n, d, d, true);
            add_bias(&mut x_mid, self.t(p.b_o));
            layer_norm(&x_mid, self.t(p.ln2_g), self.t(p.ln2_b), &mut a.ln2, &mut a.ln2_mean, &mut a.ln2_rstd, d);
            matmul(&mut a.fc_pre, &a.ln2, self.t(p.w_fc), n, d, m, false);
            add_bias(&mut a.fc_pre, self.t(p.b_fc));
            for (act, &pre) in a.fc_act.iter_mut().zip(&a.fc_pre) {
                *act = gelu(pre);
            }
            let mut x_out = x_mid.clone();
            matmul(&mut x_out, &a.fc_act, self.t(p.w_proj), n, m, d, true);
            add_bias(&mut x_out, self.t(p.b_proj));

            a.x_in = std::mem::replace(&mut x, x_out);
            a.x_mid = x_mid;
            layers.push(a);
        }
        hook.at_boundary(cfg.n_layers, &mut x, &packing);

        let v = cfg.vocab_size;
        let mut lnf = vec![F::zero(); n * d];
        let mut lnf_mean = vec![F::zero(); n];
        let mut lnf_rstd = vec![F::zero(); n];
        layer_norm(&x, self.t(self.layout.lnf_g), self.t(self.layout.lnf_b), &mut lnf, &mut lnf_mean, &mut lnf_rstd, d);
        let mut logits = vec![F::zero(); n * v];
        match self.layout.unembed {
            Some(u) => matmul(&mut logits, &lnf, self.t(u), n, d, v, false),
            None => matmul_bt(&mut logits, &lnf, self.t(self.layout.tok_emb), n, d, v, false),
        }
        Activations { packing, start_layer, layers, x_final: x, lnf, lnf_mean, lnf_rstd, logits }
    }

    /// Full forward pass from tokens.
    pub fn run(&self, seqs: &[&[u32]], hook: &mut dyn BoundaryHook<F>) -> Activations<F> {
        let packing = Packing::new(seqs.iter().map(|s| s.len()), self.cfg.n_heads);
        let x = self.embed(seqs);
        self.run_from(0, x, packing, hook)
    }

    /// Reverse pass. `dlogits` is the loss gradient w.r.t. the logits and
    /// `extra` holds optional additional residual gradients per boundary
    /// (used by the auxiliary parity head). Gradients accumulate into
    /// `grad`, which has the same layout as the parameters.
    pub fn backward(
        &self,
        seqs: &[&[u32]],
        acts: &Activations<F>,
        dlogits: &[F],
        extra: &[(usize, Vec<F>)],
        grad: &mut [F],
    ) {
        assert_eq!(acts.start_layer, 0, "backward needs a full forward pass");
        assert_eq!(grad.len(), self.layout.total);
        let cfg = &self.cfg;
        let (d, h, dh, m, v) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_mlp, cfg.vocab_size);
        let packing = &acts.packing;
        let n = packing.rows();
        let max_len = (0..packing.seqs()).map(|s| packing.len(s)).max().unwrap_or(0);
        let rope = self.rope(max_len);
        let scale = F::one() / F::of(dh as f64).sqrt();
        let lay = &self.layout;

        // unembedding and final norm
        let mut dlnf = vec![F::zero(); n * d];
        match lay.unembed {
            Some(u) => {
                matmul_bt(&mut dlnf, dlogits, self.t(u), n, v, d, false);
                matmul_at(&mut grad[u.range()], &acts.lnf, dlogits, d, n, v, true);
            }
            None => {
                let e = lay.tok_emb;
                matmul(&mut dlnf, dlogits, self.t(e), n, v, d, false);
                matmul_at(&mut grad[e.range()], dlogits, &acts.lnf, v, n, d, true);
            }
        }
        let mut dx = vec![F::zero(); n * d];
        {
            let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
            layer_norm_backward(
                &dlnf,
                &acts.x_final,
                &acts.lnf_mean,
                &acts.lnf_rstd,
                self.t(lay.lnf_g),
                &mut dx,
                &mut dg,
                &mut db,
                d,
            );
            add_into(&mut grad[lay.lnf_g.range()], &dg);
            add_into(&mut grad[lay.lnf_b.range()], &db);
        }
        add_extra(&mut dx, extra, cfg.n_layers);

        for l in (0..cfg.n_layers).rev() {
            let p = &lay.layers[l];
            let a = &acts.layers[l];

            // MLP
            let mut dact = vec![F::zero(); n * m];
            matmul_bt(&mut dact, &dx, self.t(p.w_proj), n, d, m, false);
            matmul_at(&mut grad[p.w_proj.range()], &a.fc_act, &dx, m, n, d, true);
            bias_grad(&mut grad[p.b_proj.range()], &dx);
            for (g, &pre) in dact.iter_mut().zip(&a.fc_pre) {
                *g *= gelu_grad(pre);
            }
            let mut dln2 = vec![F::zero(); n * d];
            matmul_bt(&mut dln2, &dact, self.t(p.w_fc), n, m, d, false);
            matmul_at(&mut grad[p.w_fc.range()], &a.ln2, &dact, d, n, m, true);
            bias_grad(&mut grad[p.b_fc.range()], &dact);
            {
                let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
                layer_norm_backward(&dln2, &a.x_mid, &a.ln2_mean, &a.ln2_rstd, self.t(p.ln2_g), &mut dx, &mut dg, &mut db, d);
                add_into(&mut grad[p.ln2_g.range()], &dg);
                add_into(&mut grad[p.ln2_b.range()], &db);
            }
            // dx now holds d(x_mid)

            let mut dctx = vec![F::zero(); n * d];
            matmul_bt(&mut dctx, &dx, self.t(p.w_o), n, d, d, false);
            matmul_at(&mut grad[p.w_o.range()], &a.ctx, &dx, d, n, d, true);
            bias_grad(&mut grad[p.b_o.range()], &dx);

            let mut dqkv = vec![F::zero(); n * 3 * d];
            let mut datt = vec![F::zero(); max_len];
            for s in 0..packing.seqs() {
                let (o, len, ao) = (packing.offsets[s], packing.len(s), packing.att_offsets[s]);
                for hh in 0..h {
                    let att = &a.att[ao + hh * len * len..ao + (hh + 1) * len * len];
                    for t in 0..len {
                        let dc = &dctx[(o + t) * d + hh * dh..][..dh];
                        let mut dot = F::zero();
                        for j in 0..=t {
                            let vv = &a.qkv[(o + j) * 3 * d + 2 * d + hh * dh..][..dh];
                            let g = dc.iter().zip(vv).map(|(&x, &y)| x * y).sum::<F>();
                            datt[j] = g;
                            dot += g * att[t * len + j];
                            let w = att[t * len + j];
                            let dv = &mut dqkv[(o + j) * 3 * d + 2 * d + hh * dh..][..dh];
                            for (x, &y) in dv.iter_mut().zip(dc) {
                                *x += w * y;
                            }
                        }
                        for j in 0..=t {
                            let ds = att[t * len + j] * (datt[j] - dot) * scale;
                            if ds == F::zero() {
                                continue;
                            }
                            for i in 0..dh {
                                let kq = a.qkv[(o + j) * 3 * d + d + hh * dh + i];
                                let qv = a.qkv[(o + t) * 3 * d + hh * dh + i];
                                dqkv[(o + t) * 3 * d + hh * dh + i] += ds * kq;
                                dqkv[(o + j) * 3 * d + d + hh * dh + i] += ds * qv;
                            }
                        }
                    }
                }
                if let Some(rope) = &rope {
                    for t in 0..len {
                        let row = &mut dqkv[(o + t) * 3 * d..(o + t + 1) * 3 * d];
                        for hh in 0..h {
                            rope.rotate(&mut row[hh * dh..(hh + 1) * dh], t, true);
                            rope.rotate(&mut row[d + hh * dh..d + (hh + 1) * dh], t, true);
                        }
                    }
                }
            }
            let mut dln1 = vec![F::zero(); n * d];
            matmul_bt(&mut dln1, &dqkv, self.t(p.w_qkv), n, 3 * d, d, false);
            matmul_at(&mut grad[p.w_qkv.range()], &a.ln1, &dqkv, d, n, 3 * d, true);
            bias_grad(&mut grad[p.b_qkv.range()], &dqkv);
            {
                let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
                layer_norm_backward(&dln1, &a.x_in, &a.ln1_mean, &a.ln1_rstd, self.t(p.ln1_g), &mut dx, &mut dg, &mut db, d);
                add_into(&mut grad[p.ln1_g.range()], &dg);
                add_into(&mut grad[p.ln1_b.range()], &db);
            }
            add_extra(&mut dx, extra, l);
        }

        // embeddings
        let e = lay.tok_emb;
        for (s, seq) in seqs.iter().enumerate() {
            let o = packing.offsets[s];
            for (t, &tok) in seq.iter().enumerate() {
                let row = &dx[(o + t) * d..(o + t + 1) * d];
                add_into(&mut grad[e.offset + tok as usize * d..][..d], row);
                if let Some(pe) = lay.pos_emb {
                    add_into(&mut grad[pe.offset + t * d..][..d], row);
                }
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn add_extra<F: Scalar>(dx: &mut [F], extra: &[(usize, Vec<F>)], layer: usize) {
    for (l, g) in extra {
        if *l == layer {
            add_into(dx, g);
        }
    }
}
