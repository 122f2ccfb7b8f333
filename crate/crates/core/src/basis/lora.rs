use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::mlp::MlpSpec;
use crate::error::{Error, Result};

/// Low-rank update `(W + B A) psi + db` of one trunk layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layer: usize,
    /// `d_l x r`
    pub b: DMatrix<f64>,
    /// `r x d_{l-1}`
    pub a: DMatrix<f64>,
    /// Replaces the pretrained bias of the layer.
    pub bias: DVector<f64>,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn delta_w(&self) -> DMatrix<f64> {
        &self.b * &self.a
    }
}

/// Trainable low-rank adapters for the first few layers of a trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams {
    pub rank: usize,
    pub adapters: Vec<LoraAdapter>,
}

impl LoraParams {
    /// `B = 0`, `A ~ N(0, 1/r)`, bias = pretrained bias, for the first
    /// `layers` layers. The per-layer rank is capped at `min(d_l, d_{l-1})`,
    /// where the update is already unrestricted.
    pub fn init<R: Rng>(trunk: &MlpSpec, rank: usize, layers: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("rank", "must be at least 1"));
        }
        if layers == 0 || layers > trunk.depth() {
            return Err(Error::invalid(
                "layers",
                format!("must be in 1..={} for this trunk", trunk.depth()),
            ));
        }
        let adapters = trunk.layers()[..layers]
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let r = rank.min(layer.out_dim()).min(layer.in_dim());
                let normal = Normal::new(0.0, 1.0 / (r as f64).sqrt()).expect("valid std");
                LoraAdapter {
                    layer: l,
                    b: DMatrix::zeros(layer.out_dim(), r),
                    a: DMatrix::from_fn(r, layer.in_dim(), |_, _| normal.sample(rng)),
                    bias: layer.bias.clone(),
                }
            })
            .collect();
        Ok(Self { rank, adapters })
    }

    pub fn validate(&self, trunk: &MlpSpec) -> Result<()> {
        for ad in &self.adapters {
            let layer = trunk
                .layers()
                .get(ad.layer)
                .ok_or_else(|| Error::invalid("lora", format!("adapter for missing layer {}", ad.layer)))?;
            let r = ad.rank();
            if r > layer.out_dim().min(layer.in_dim()) || r > self.rank {
                return Err(Error::invalid(
                    "lora",
                    format!("rank {r} too large for layer {}", ad.layer),
                ));
            }
            if ad.b.shape() != (layer.out_dim(), r)
                || ad.a.shape() != (r, layer.in_dim())
                || ad.bias.len() != layer.out_dim()
            {
                return Err(Error::DimensionMismatch {
                    expected: layer.out_dim(),
                    got: ad.b.nrows(),
                    context: format!("LoRA adapter shapes for layer {}", ad.layer),
                });
            }
        }
        Ok(())
    }

    /// Trunk with every adapter folded into its layer.
    pub fn merge(&self, trunk: &MlpSpec) -> Result<MlpSpec> {
        self.validate(trunk)?;
        let mut layers = trunk.layers().to_vec();
        for ad in &self.adapters {
            let layer = &mut layers[ad.layer];
            layer.weight += ad.delta_w();
            layer.bias = ad.bias.clone();
        }
        MlpSpec::new(layers, trunk.activation())
    }
}
