//! Reverse-mode gradients for plain MLPs and an Adam optimiser, shared by
//! pre-training and phase-2 adaptation.

use nalgebra::{DMatrix, DVector};

use crate::basis::{Activation, Layer};

/// Cached activations of one batched forward pass (points as columns).
pub(crate) struct Tape {
    /// Input to each layer.
    inputs: Vec<DMatrix<f64>>,
    /// `sigma'(z)` per layer, `None` for an affine output layer.
    slopes: Vec<Option<DMatrix<f64>>>,
    pub output: DMatrix<f64>,
}

pub(crate) fn forward(layers: &[Layer], act: Activation, x: &DMatrix<f64>, activate_last: bool) -> Tape {
    let last = layers.len() - 1;
    let mut inputs = Vec::with_capacity(layers.len());
    let mut slopes = Vec::with_capacity(layers.len());
    let mut h = x.clone();
    for (l, layer) in layers.iter().enumerate() {
        let mut z = &layer.weight * &h;
        for mut col in z.column_iter_mut() {
            col += &layer.bias;
        }
        inputs.push(h);
        if l < last || activate_last {
            let mut s = z.clone();
            for (zv, sv) in z.iter_mut().zip(s.iter_mut()) {
                let (a, d1, _) = act.eval2(*zv);
                *zv = a;
                *sv = d1;
            }
            slopes.push(Some(s));
        } else {
            slopes.push(None);
        }
        h = z;
    }
    Tape {
        inputs,
        slopes,
        output: h,
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerGrad {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Gradients of `sum(grad_out .* output)` with respect to every layer, and
/// optionally with respect to the input batch.
pub(crate) fn backward(
    layers: &[Layer],
    tape: &Tape,
    grad_out: DMatrix<f64>,
    want_input: bool,
) -> (Vec<LayerGrad>, Option<DMatrix<f64>>) {
    let mut g = grad_out;
    let mut grads = vec![None; layers.len()];
    for l in (0..layers.len()).rev() {
        if let Some(s) = &tape.slopes[l] {
            g.component_mul_assign(s);
        }
        let weight = &g * tape.inputs[l].transpose();
        let bias = g.column_sum();
        grads[l] = Some(LayerGrad { weight, bias });
        if l > 0 || want_input {
            g = layers[l].weight.transpose() * &g;
        }
    }
    let grads = grads.into_iter().map(|g| g.expect("every layer visited")).collect();
    (grads, want_input.then_some(g))
}

#[cfg(test)]
pub(crate) fn param_count(layers: &[Layer]) -> usize {
    layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
}

/// Flatten weights (column-major) then bias, layer by layer.
pub(crate) fn pack(layers: &[Layer], out: &mut Vec<f64>) {
    for l in layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(l.bias.as_slice());
    }
}

pub(crate) fn pack_grads(grads: &[LayerGrad], out: &mut Vec<f64>) {
    for g in grads {
        out.extend_from_slice(g.weight.as_slice());
        out.extend_from_slice(g.bias.as_slice());
    }
}

/// Inverse of [`pack`]; returns the number of values consumed.
pub(crate) fn unpack(layers: &mut [Layer], src: &[f64]) -> usize {
    let mut k = 0;
    for l in layers {
        let n = l.weight.len();
        l.weight.as_mut_slice().copy_from_slice(&src[k..k + n]);
        k += n;
        let n = l.bias.len();
        l.bias.as_mut_slice().copy_from_slice(&src[k..k + n]);
        k += n;
    }
    k
}

/// Glorot-uniform weights and zero biases.
pub(crate) fn glorot_layers<R: rand::Rng>(dims: &[usize], rng: &mut R) -> Vec<Layer> {
    dims.windows(2)
        .map(|w| {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let weight = DMatrix::from_fn(w[1], w[0], |_, _| rng.gen_range(-limit..limit));
            Layer {
                weight,
                bias: DVector::zeros(w[1]),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(layers: &[Layer], x: &DMatrix<f64>, w: &DMatrix<f64>, last: bool) -> f64 {
        forward(layers, Activation::Tanh, x, last).output.component_mul(w).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for last in [false, true] {
            let layers = glorot_layers(&[3, 6, 5, 4], &mut rng);
            let x = DMatrix::from_fn(3, 7, |i, j| ((i * 7 + j) as f64 * 0.37).sin());
            let w = DMatrix::from_fn(4, 7, |i, j| ((i + 2 * j) as f64 * 0.51).cos());
            let tape = forward(&layers, Activation::Tanh, &x, last);
            let (grads, gin) = backward(&layers, &tape, w.clone(), true);
            let mut g = Vec::new();
            pack_grads(&grads, &mut g);
            let mut p = Vec::new();
            pack(&layers, &mut p);
            let dir: Vec<f64> = (0..p.len()).map(|k| ((k as f64) * 1.3).sin()).collect();
            let h = 1e-6;
            let shifted = |s: f64| {
                let mut l2 = layers.clone();
                let q: Vec<f64> = p.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
                unpack(&mut l2, &q);
                loss(&l2, &x, &w, last)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0), "{fd} vs {an}");

            let gin = gin.unwrap();
            let dx = DMatrix::from_fn(3, 7, |i, j| ((i + j) as f64).cos());
            let fd = (loss(&layers, &(&x + &dx * h), &w, last) - loss(&layers, &(&x - &dx * h), &w, last)) / (2.0 * h);
            let an = gin.component_mul(&dx).sum();
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0));
        }
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2);
    }

    #[test]
    fn pack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layers = glorot_layers(&[2, 3, 1], &mut rng);
        let mut p = Vec::new();
        pack(&layers, &mut p);
        assert_eq!(p.len(), param_count(&layers));
        let mut other = glorot_layers(&[2, 3, 1], &mut rng);
        assert_eq!(unpack(&mut other, &p), p.len());
        assert_eq!(other, layers);
    }
}
