use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalScheme {
    /// Rotary position embedding on queries and keys (Pythia-like).
    Rotary,
    /// Learned absolute position embedding added to the token embedding
    /// (GPT-2-like).
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub positional_scheme: PositionalScheme,
    #[serde(default)]
    pub tied_embeddings: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default for S3: 4 layers, width 64, 4 heads, MLP 256.
    pub fn small(vocab_size: usize, max_positions: usize, seed: u64) -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            vocab_size,
            max_positions,
            positional_scheme: PositionalScheme::Rotary,
            tied_embeddings: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 {
            return fail("n_layers must be positive");
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_mlp == 0 {
            return fail("d_model, n_heads and d_mlp must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if self.positional_scheme == PositionalScheme::Rotary && self.head_dim() % 2 != 0 {
            return fail("rotary embeddings need an even head dimension");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, m, l) = (self.vocab_size, self.d_model, self.d_mlp, self.n_layers);
        let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
        let pos = match self.positional_scheme {
            PositionalScheme::Learned => self.max_positions * d,
            PositionalScheme::Rotary => 0,
        };
        let unembed = if self.tied_embeddings { 0 } else { d * v };
        v * d + pos + l * per_layer + 2 * d + unembed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpans {
    pub ln1_g: Span,
    pub ln1_b: Span,
    pub w_qkv: Span,
    pub b_qkv: Span,
    pub w_o: Span,
    pub b_o: Span,
    pub ln2_g: Span,
    pub ln2_b: Span,
    pub w_fc: Span,
    pub b_fc: Span,
    pub w_proj: Span,
    pub b_proj: Span,
}

/// Named tensors packed into one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub tok_emb: Span,
    pub pos_emb: Option<Span>,
    pub layers: Vec<LayerSpans>,
    pub lnf_g: Span,
    pub lnf_b: Span,
    pub unembed: Option<Span>,
    /// `(name, shape, span, decays)` in storage order.
    pub tensors: Vec<(String, Vec<usize>, Span, bool)>,
    pub total: usize,
}

impl ParamLayout {
    fn new(cfg: &ModelConfig) -> Self {
        let (v, d, m) = (cfg.vocab_size, cfg.d_model, cfg.d_mlp);
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let mut take = |name: String, shape: Vec<usize>, decays: bool| {
            let len = shape.iter().product();
            let span = Span { offset, len };
            offset += len;
            tensors.push((name, shape, span, decays));
            span
        };
        let tok_emb = take("tok_emb".into(), vec![v, d], true);
        let pos_emb = match cfg.positional_scheme {
            PositionalScheme::Learned => Some(take("pos_emb".into(), vec![cfg.max_positions, d], true)),
            PositionalScheme::Rotary => None,
        };
        let layers = (0..cfg.n_layers)
            .map(|l| LayerSpans {
                ln1_g: take(format!("layers.{l}.ln1.g"), vec![d], false),
                ln1_b: take(format!("layers.{l}.ln1.b"), vec![d], false),
                w_qkv: take(format!("layers.{l}.attn.w_qkv"), vec![d, 3 * d], true),
                b_qkv: take(format!("layers.{l}.attn.b_qkv"), vec![3 * d], false),
                w_o: take(format!("layers.{l}.attn.w_o"), vec![d, d], true),
                b_o: take(format!("layers.{l}.attn.b_o"), vec![d], false),
                ln2_g: take(format!("layers.{l}.ln2.g"), vec![d], false),
                ln2_b: take(format!("layers.{l}.ln2.b"), vec![d], false),
                w_fc: take(format!("layers.{l}.mlp.w_fc"), vec![d, m], true),
                b_fc: take(format!("layers.{l}.mlp.b_fc"), vec![m], false),
                w_proj: take(format!("layers.{l}.mlp.w_proj"), vec![m, d], true),
                b_proj: take(format!("layers.{l}.mlp.b_proj"), vec![d], false),
            })
            .collect();
        let lnf_g = take("lnf.g".into(), vec![d], false);
        let lnf_b = take("lnf.b".into(), vec![d], false);
        let unembed = if cfg.tied_embeddings { None } else { Some(take("unembed".into(), vec![d, v], true)) };
        Self { tok_emb, pos_emb, layers, lnf_g, lnf_b, unembed, tensors, total: offset }
    }

    /// Per-parameter weight-decay mask (matrices decay, gains and biases do
    /// not).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for (_, _, span, decays) in &self.tensors {
            if *decays {
                mask[span.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}
