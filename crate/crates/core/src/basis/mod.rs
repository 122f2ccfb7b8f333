//! Basis families `{t_1, ..., t_I}` and their exact second-order jets.
//!
//! Every family evaluates to a [`Jets`] block per point: values, gradients
//! and Hessians of all members, propagated exactly through the network
//! (`tanh' = 1 - tanh^2`, `tanh'' = -2 tanh tanh'`).
//!
//! Member ordering:
//! * `ScaledUnion`: scale-major, member `j * I + i` is `t_i(p_j x)`.
//! * `PascalPoly`: graded-lex, `1, x1, x2, x1^2, x1 x2, x2^2, ...`.
//! * `Augmented`: the closed-form head functions first, then the wrapped basis.

mod jet;
mod lora;
mod mlp;
mod pascal;
mod scale;

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;

pub use jet::{Jet2, Jets};
pub use lora::{LoraAdapter, LoraParams};
pub use mlp::{Activation, Layer, MlpSpec};
pub use pascal::{exponents as pascal_exponents, pascal_size};
pub use scale::{compute_scale_set, max_admissible_scale, ScaleSet, ACTIVATION_RANGE};

use crate::error::{Error, Result};

const CHUNK: usize = 64;

/// A scalar function with exact jets, used to prepend known functions to a
/// basis.
pub trait ScalarField: Send + Sync + Debug {
    fn input_dim(&self) -> usize;
    fn jet(&self, x: &[f64]) -> Jet2;
    fn value(&self, x: &[f64]) -> f64 {
        self.jet(x).value
    }
}

#[derive(Debug, Clone)]
pub enum BasisKind {
    Trunk(MlpSpec),
    ScaledUnion {
        trunk: MlpSpec,
        scales: ScaleSet,
    },
    /// Random-weight net whose final layer is also activated; the members are
    /// the final-layer features.
    RandomFeature(MlpSpec),
    PascalPoly {
        max_degree: usize,
    },
    LoraTrunk {
        trunk: MlpSpec,
        lora: LoraParams,
        merged: MlpSpec,
    },
    Augmented {
        head: Vec<Arc<dyn ScalarField>>,
        rest: Box<BasisSet>,
    },
}

/// An ordered, immutable family of differentiable scalar functions.
#[derive(Debug, Clone)]
pub struct BasisSet {
    kind: BasisKind,
    size: usize,
    input_dim: usize,
}

impl BasisSet {
    pub fn trunk(trunk: MlpSpec) -> Self {
        Self {
            size: trunk.output_dim(),
            input_dim: trunk.input_dim(),
            kind: BasisKind::Trunk(trunk),
        }
    }

    pub fn scaled_union(trunk: MlpSpec, scales: ScaleSet) -> Self {
        Self {
            size: trunk.output_dim() * scales.len(),
            input_dim: trunk.input_dim(),
            kind: BasisKind::ScaledUnion { trunk, scales },
        }
    }

    pub fn random_feature(net: MlpSpec) -> Self {
        Self {
            size: net.output_dim(),
            input_dim: net.input_dim(),
            kind: BasisKind::RandomFeature(net),
        }
    }

    pub fn pascal(max_degree: usize) -> Self {
        Self {
            size: pascal_size(max_degree),
            input_dim: 2,
            kind: BasisKind::PascalPoly { max_degree },
        }
    }

    pub fn lora_trunk(trunk: MlpSpec, lora: LoraParams) -> Result<Self> {
        let merged = lora.merge(&trunk)?;
        Ok(Self {
            size: trunk.output_dim(),
            input_dim: trunk.input_dim(),
            kind: BasisKind::LoraTrunk { trunk, lora, merged },
        })
    }

    pub fn augmented(head: Vec<Arc<dyn ScalarField>>, rest: BasisSet) -> Result<Self> {
        for f in &head {
            if f.input_dim() != rest.input_dim {
                return Err(Error::DimensionMismatch {
                    expected: rest.input_dim,
                    got: f.input_dim(),
                    context: "augmented head function input dimension".into(),
                });
            }
        }
        Ok(Self {
            size: head.len() + rest.size,
            input_dim: rest.input_dim,
            kind: BasisKind::Augmented {
                head,
                rest: Box::new(rest),
            },
        })
    }

    pub fn kind(&self) -> &BasisKind {
        &self.kind
    }

    /// Number of members `I`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            BasisKind::Trunk(_) => "trunk",
            BasisKind::ScaledUnion { .. } => "scaled_union",
            BasisKind::RandomFeature(_) => "random_feature",
            BasisKind::PascalPoly { .. } => "pascal",
            BasisKind::LoraTrunk { .. } => "lora_trunk",
            BasisKind::Augmented { .. } => "augmented",
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
                context: format!("evaluation point for {} basis", self.kind_name()),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("evaluation point {x:?}")));
        }
        Ok(())
    }

    /// Jets of every member at `x`.
    pub fn jets(&self, x: &[f64]) -> Result<Jets> {
        self.check_point(x)?;
        Ok(self
            .jets_chunk(std::slice::from_ref(&x.to_vec()))
            .pop()
            .expect("one point"))
    }

    /// Jets at many points, in input order.
    pub fn jets_batch(&self, points: &[Vec<f64>]) -> Result<Vec<Jets>> {
        for x in points {
            self.check_point(x)?;
        }
        Ok(points
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| self.jets_chunk(chunk))
            .collect())
    }

    /// Values only, as an `I x P` matrix.
    pub fn values_batch(&self, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        for x in points {
            self.check_point(x)?;
        }
        let blocks: Vec<DMatrix<f64>> = points
            .par_chunks(CHUNK * 8)
            .map(|chunk| self.values_chunk(chunk))
            .collect();
        let mut out = DMatrix::zeros(self.size, points.len());
        let mut c0 = 0;
        for b in blocks {
            out.columns_mut(c0, b.ncols()).copy_from(&b);
            c0 += b.ncols();
        }
        Ok(out)
    }

    pub fn values(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .values_batch(std::slice::from_ref(&x.to_vec()))?
            .column(0)
            .iter()
            .copied()
            .collect())
    }

    fn jets_chunk(&self, chunk: &[Vec<f64>]) -> Vec<Jets> {
        let d = self.input_dim;
        match &self.kind {
            BasisKind::Trunk(net) => net.jets_batch(&columns(chunk, 1.0), false),
            BasisKind::LoraTrunk { merged, .. } => merged.jets_batch(&columns(chunk, 1.0), false),
            BasisKind::RandomFeature(net) => net.jets_batch(&columns(chunk, 1.0), true),
            BasisKind::PascalPoly { max_degree } => chunk.iter().map(|x| pascal::pascal_jets(*max_degree, x)).collect(),
            BasisKind::ScaledUnion { trunk, scales } => {
                let per_scale: Vec<Vec<Jets>> = scales
                    .values()
                    .iter()
                    .map(|&p| {
                        let mut jets = trunk.jets_batch(&columns(chunk, p), false);
                        for j in &mut jets {
                            rescale_derivatives(j, p);
                        }
                        jets
                    })
                    .collect();
                (0..chunk.len())
                    .map(|k| {
                        let parts: Vec<Jets> = per_scale.iter().map(|s| s[k].clone()).collect();
                        Jets::vstack(d, &parts)
                    })
                    .collect()
            }
            BasisKind::Augmented { head, rest } => {
                let tails = rest.jets_chunk(chunk);
                chunk
                    .iter()
                    .zip(tails)
                    .map(|(x, tail)| {
                        let h: Vec<Jet2> = head.iter().map(|f| f.jet(x)).collect();
                        Jets::vstack(d, &[Jets::from_jets(d, &h), tail])
                    })
                    .collect()
            }
        }
    }

    fn values_chunk(&self, chunk: &[Vec<f64>]) -> DMatrix<f64> {
        match &self.kind {
            BasisKind::Trunk(net) => net.forward_batch(&columns(chunk, 1.0), false),
            BasisKind::LoraTrunk { merged, .. } => merged.forward_batch(&columns(chunk, 1.0), false),
            BasisKind::RandomFeature(net) => net.forward_batch(&columns(chunk, 1.0), true),
            BasisKind::PascalPoly { max_degree } => {
                let mut out = DMatrix::zeros(self.size, chunk.len());
                for (p, x) in chunk.iter().enumerate() {
                    for (i, v) in pascal::pascal_values(*max_degree, x).into_iter().enumerate() {
                        out[(i, p)] = v;
                    }
                }
                out
            }
            BasisKind::ScaledUnion { trunk, scales } => {
                let width = trunk.output_dim();
                let mut out = DMatrix::zeros(self.size, chunk.len());
                for (j, &p) in scales.values().iter().enumerate() {
                    let v = trunk.forward_batch(&columns(chunk, p), false);
                    out.rows_mut(j * width, width).copy_from(&v);
                }
                out
            }
            BasisKind::Augmented { head, rest } => {
                let tail = rest.values_chunk(chunk);
                let mut out = DMatrix::zeros(self.size, chunk.len());
                for (p, x) in chunk.iter().enumerate() {
                    for (i, f) in head.iter().enumerate() {
                        out[(i, p)] = f.value(x);
                    }
                }
                out.rows_mut(head.len(), rest.size).copy_from(&tail);
                out
            }
        }
    }
}

fn columns(points: &[Vec<f64>], scale: f64) -> DMatrix<f64> {
    let d = points.first().map_or(0, Vec::len);
    DMatrix::from_fn(d, points.len(), |r, c| scale * points[c][r])
}

/// Chain rule for `t(p x)`: gradients pick up `p`, Hessians `p^2`.
fn rescale_derivatives(jets: &mut Jets, p: f64) {
    if p == 1.0 {
        return;
    }
    let d = jets.dim();
    let mut m = jets.matrix().clone();
    m.columns_mut(1, d).scale_mut(p);
    m.columns_mut(1 + d, d * d).scale_mut(p * p);
    *jets = Jets::from_matrix(d, m);
}

/// Jets of every member of `basis` at `x`, one [`Jet2`] per member.
pub fn eval_jets(basis: &BasisSet, x: &[f64]) -> Result<Vec<Jet2>> {
    Ok(basis.jets(x)?.to_vec())
}

/// Random-weight tanh features: `depth` activated layers with all weights and
/// biases drawn i.i.d. from `U[-1, 1]`; hidden layers are `width_hidden` wide
/// and the last has `dof` units.
pub fn make_random_feature(
    input_dim: usize,
    depth: usize,
    width_hidden: usize,
    dof: usize,
    seed: u64,
) -> Result<BasisSet> {
    if depth == 0 {
        return Err(Error::invalid("depth", "must be at least 1"));
    }
    if dof == 0 {
        return Err(Error::invalid("dof", "must be at least 1"));
    }
    if depth > 1 && width_hidden == 0 {
        return Err(Error::invalid("width_hidden", "must be at least 1"));
    }
    if input_dim == 0 {
        return Err(Error::invalid("input_dim", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unif = Uniform::new_inclusive(-1.0, 1.0);
    let mut layers = Vec::with_capacity(depth);
    let mut fan_in = input_dim;
    for l in 0..depth {
        let out = if l + 1 == depth { dof } else { width_hidden };
        let weight = DMatrix::from_fn(out, fan_in, |_, _| unif.sample(&mut rng));
        let bias = nalgebra::DVector::from_fn(out, |_, _| unif.sample(&mut rng));
        layers.push(Layer::new(weight, bias)?);
        fan_in = out;
    }
    Ok(BasisSet::random_feature(MlpSpec::new(layers, Activation::Tanh)?))
}

/// `t_i(p_j x)` for every trunk output `i` and scale `p_j`, scale-major.
pub fn make_scaled_union(trunk: MlpSpec, scales: ScaleSet) -> BasisSet {
    BasisSet::scaled_union(trunk, scales)
}

pub fn make_pascal_basis(max_degree: usize) -> BasisSet {
    BasisSet::pascal(max_degree)
}
