use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::jet::Jets;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    /// `(sigma(z), sigma'(z), sigma''(z))`
    #[inline]
    pub fn eval2(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let a = z.tanh();
                let d1 = 1.0 - a * a;
                (a, d1, -2.0 * a * d1)
            }
        }
    }

    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }
}

/// One affine layer `W psi + b`, `W` of shape `d_l x d_{l-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::DimensionMismatch {
                expected: weight.nrows(),
                got: bias.len(),
                context: "bias length vs weight rows".into(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// A frozen feed-forward network. Every layer but the last is followed by the
/// activation; the last layer is purely affine.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    layers: Vec<Layer>,
    activation: Activation,
}

impl MlpSpec {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "an MLP needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_dim(),
                    got: pair[1].in_dim(),
                    context: format!("input width of layer {}", l + 1),
                });
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {l}")));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// `[d_0, d_1, ..., d_L]`
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn first_layer(&self) -> &Layer {
        &self.layers[0]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Forward pass for a batch of points stored as columns (`d_0 x P`).
    /// With `activate_last` the activation is applied after the final layer
    /// too (random-feature nets).
    pub fn forward_batch(&self, points: &DMatrix<f64>, activate_last: bool) -> DMatrix<f64> {
        let last = self.layers.len() - 1;
        let mut state = points.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &state;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if l < last || activate_last {
                z.apply(|v| *v = self.activation.eval(*v));
            }
            state = z;
        }
        state
    }

    pub fn forward(&self, x: &[f64]) -> DVector<f64> {
        let pts = DMatrix::from_column_slice(x.len(), 1, x);
        self.forward_batch(&pts, false).column(0).into_owned()
    }

    /// Second-order forward jets for a batch of points (`d_0 x P`). Returns one
    /// `Jets` block per point.
    pub fn jets_batch(&self, points: &DMatrix<f64>, activate_last: bool) -> Vec<Jets> {
        let d = points.nrows();
        let w = Jets::width(d);
        let npts = points.ncols();
        // state: d_l x (P * w), per point [value | grad (d) | hess (d*d)]
        let mut state = DMatrix::zeros(d, npts * w);
        for p in 0..npts {
            for k in 0..d {
                state[(k, p * w)] = points[(k, p)];
                state[(k, p * w + 1 + k)] = 1.0;
            }
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &state;
            for p in 0..npts {
                let mut col = z.column_mut(p * w);
                col += &layer.bias;
            }
            if l < last || activate_last {
                self.activate_jets(&mut z, d, npts);
            }
            state = z;
        }
        (0..npts)
            .map(|p| Jets::from_matrix(d, state.columns(p * w, w).into_owned()))
            .collect()
    }

    fn activate_jets(&self, z: &mut DMatrix<f64>, d: usize, npts: usize) {
        let w = Jets::width(d);
        let rows = z.nrows();
        let mut g = vec![0.0; d];
        for p in 0..npts {
            let c0 = p * w;
            for u in 0..rows {
                let (a, a1, a2) = self.activation.eval2(z[(u, c0)]);
                z[(u, c0)] = a;
                for k in 0..d {
                    g[k] = z[(u, c0 + 1 + k)];
                    z[(u, c0 + 1 + k)] = a1 * g[k];
                }
                for j in 0..d {
                    for k in 0..d {
                        let c = c0 + 1 + d + j * d + k;
                        z[(u, c)] = a2 * g[j] * g[k] + a1 * z[(u, c)];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_net() -> MlpSpec {
        let l1 = Layer::new(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1)).unwrap();
        let l2 = Layer::new(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1)).unwrap();
        MlpSpec::new(vec![l1, l2], Activation::Tanh).unwrap()
    }

    #[test]
    fn tanh_at_origin() {
        let net = scalar_net();
        let jets = net.jets_batch(&DMatrix::from_element(1, 1, 0.0), false);
        let j = jets[0].get(0);
        assert_eq!(j.value, 0.0);
        assert_eq!(j.grad, vec![1.0]);
        assert_eq!(j.hess, vec![0.0]);
    }

    #[test]
    fn rejects_broken_chain() {
        let l1 = Layer::new(DMatrix::zeros(3, 2), DVector::zeros(3)).unwrap();
        let l2 = Layer::new(DMatrix::zeros(1, 4), DVector::zeros(1)).unwrap();
        assert!(matches!(
            MlpSpec::new(vec![l1, l2], Activation::Tanh),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_nan() {
        let mut w = DMatrix::zeros(1, 1);
        w[(0, 0)] = f64::NAN;
        let l1 = Layer::new(w, DVector::zeros(1)).unwrap();
        assert!(matches!(
            MlpSpec::new(vec![l1], Activation::Tanh),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn forward_matches_jet_values() {
        let net = scalar_net();
        let pts = DMatrix::from_row_slice(1, 3, &[-0.3, 0.1, 2.0]);
        let vals = net.forward_batch(&pts, false);
        let jets = net.jets_batch(&pts, false);
        for p in 0..3 {
            assert_eq!(vals[(0, p)], jets[p].value(0));
        }
    }
}
