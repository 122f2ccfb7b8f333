//! Two-dimensional Pascal (total-degree) monomials in graded-lex order:
//! `1, x1, x2, x1^2, x1 x2, x2^2, ...`.

use nalgebra::DMatrix;

use super::jet::Jets;

pub fn pascal_size(max_degree: usize) -> usize {
    (max_degree + 1) * (max_degree + 2) / 2
}

/// Exponent pairs `(a, b)` for `x1^a x2^b`.
pub fn exponents(max_degree: usize) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(pascal_size(max_degree));
    for n in 0..=max_degree as u32 {
        for b in 0..=n {
            out.push((n - b, b));
        }
    }
    out
}

/// `(x^n, n x^{n-1}, n (n-1) x^{n-2})` without 0 * inf hazards.
#[inline]
fn pow_jet(x: f64, n: u32) -> (f64, f64, f64) {
    let p = |k: i32| if k < 0 { 0.0 } else { x.powi(k) };
    let n_f = n as f64;
    let n_i = n as i32;
    (p(n_i), n_f * p(n_i - 1), n_f * (n_f - 1.0) * p(n_i - 2))
}

pub(crate) fn pascal_jets(max_degree: usize, x: &[f64]) -> Jets {
    let exps = exponents(max_degree);
    let mut data = DMatrix::zeros(exps.len(), Jets::width(2));
    for (i, &(a, b)) in exps.iter().enumerate() {
        let (u, du, ddu) = pow_jet(x[0], a);
        let (v, dv, ddv) = pow_jet(x[1], b);
        data[(i, 0)] = u * v;
        data[(i, 1)] = du * v;
        data[(i, 2)] = u * dv;
        data[(i, 3)] = ddu * v;
        data[(i, 4)] = du * dv;
        data[(i, 5)] = du * dv;
        data[(i, 6)] = u * ddv;
    }
    Jets::from_matrix(2, data)
}

pub(crate) fn pascal_values(max_degree: usize, x: &[f64]) -> Vec<f64> {
    exponents(max_degree)
        .into_iter()
        .map(|(a, b)| x[0].powi(a as i32) * x[1].powi(b as i32))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(pascal_size(0), 1);
        assert_eq!(pascal_size(2), 6);
        assert_eq!(pascal_size(31), 528);
        assert_eq!(exponents(31).len(), 528);
    }

    #[test]
    fn graded_lex_order() {
        assert_eq!(exponents(2), vec![(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]);
    }

    #[test]
    fn degree_one_jets() {
        let j = pascal_jets(1, &[2.0, 3.0]);
        assert_eq!(j.values(), vec![1.0, 2.0, 3.0]);
        assert_eq!(j.grad_column(0), vec![0.0, 1.0, 0.0]);
        assert_eq!(j.grad_column(1), vec![0.0, 0.0, 1.0]);
        for i in 0..3 {
            assert_eq!(j.laplacian(i), 0.0);
            assert_eq!(j.hess(i, 0, 1), 0.0);
        }
    }

    #[test]
    fn degree_two_at_ones() {
        assert_eq!(pascal_values(2, &[1.0, 1.0]), vec![1.0; 6]);
    }

    #[test]
    fn zero_point_is_safe() {
        let j = pascal_jets(3, &[0.0, 0.0]);
        assert!(j.is_finite());
        // d^2/dx1^2 of x1^2 at 0 is 2
        assert_eq!(j.hess(3, 0, 0), 2.0);
    }
}
