use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, ParamLayout, Span};
use super::scalar::Scalar;
use crate::error::Result;
use crate::rng::seeded;

const INIT_STD: f64 = 0.02;

/// Model weights as one flat vector plus the layout that names its pieces.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub cfg: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<F>,
}

pub type Model = ModelParams<f32>;

impl<F: Scalar> ModelParams<F> {
    /// Scaled-normal matrices, unit gains, zero biases. Residual output
    /// projections are shrunk by `1/sqrt(2 * n_layers)`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        let mut data = vec![F::zero(); layout.total];
        let mut rng = seeded(cfg.seed, 0x1417);
        let residual_scale = 1.0 / ((2 * cfg.n_layers) as f64).sqrt();
        for (name, shape, span, _) in &layout.tensors {
            let slot = &mut data[span.range()];
            if shape.len() == 1 {
                let fill = if name.ends_with(".g") { F::one() } else { F::zero() };
                slot.iter_mut().for_each(|x| *x = fill);
                continue;
            }
            let std = if name.ends_with("w_o") || name.ends_with("w_proj") {
                INIT_STD * residual_scale
            } else {
                INIT_STD
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in slot.iter_mut() {
                *x = F::of(normal.sample(&mut rng));
            }
        }
        Ok(Self { cfg: cfg.clone(), layout, data })
    }

    pub fn from_data(cfg: &ModelConfig, data: Vec<F>) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        if data.len() != layout.total {
            return Err(crate::Error::LengthMismatch { expected: layout.total, got: data.len() });
        }
        Ok(Self { cfg: cfg.clone(), layout, data })
    }

    pub fn t(&self, span: Span) -> &[F] {
        &self.data[span.range()]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| G::of(x.f64())).collect(),
        }
    }

    /// Little-endian bytes of the flat parameter vector.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * F::BYTES);
        for &x in &self.data {
            x.write_le(&mut out);
        }
        out
    }
}
