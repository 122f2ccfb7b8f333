use nalgebra::DMatrix;

/// Value, gradient and Hessian of one scalar function at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2 {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Row-major `d x d`.
    pub hess: Vec<f64>,
}

impl Jet2 {
    pub fn constant(value: f64, dim: usize) -> Self {
        Self {
            value,
            grad: vec![0.0; dim],
            hess: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn hess_at(&self, j: usize, k: usize) -> f64 {
        self.hess[j * self.dim() + k]
    }

    pub fn laplacian(&self) -> f64 {
        (0..self.dim()).map(|j| self.hess_at(j, j)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grad.iter().all(|v| v.is_finite()) && self.hess.iter().all(|v| v.is_finite())
    }

    /// Largest asymmetry `|H_jk - H_kj|` relative to the largest entry.
    pub fn hess_asymmetry(&self) -> f64 {
        let d = self.dim();
        let scale = self.hess.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let mut worst = 0.0f64;
        for j in 0..d {
            for k in (j + 1)..d {
                worst = worst.max((self.hess_at(j, k) - self.hess_at(k, j)).abs());
            }
        }
        worst / scale
    }
}

/// Jets of every member of a basis at a single point.
///
/// Stored as an `I x (1 + d + d^2)` matrix: column 0 holds values, columns
/// `1..=d` the gradient, and the remaining `d^2` columns the row-major
/// Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct Jets {
    dim: usize,
    data: DMatrix<f64>,
}

impl Jets {
    pub(crate) fn width(dim: usize) -> usize {
        1 + dim + dim * dim
    }

    pub(crate) fn from_matrix(dim: usize, data: DMatrix<f64>) -> Self {
        debug_assert_eq!(data.ncols(), Self::width(dim));
        Self { dim, data }
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Self {
            dim,
            data: DMatrix::zeros(len, Self::width(dim)),
        }
    }

    pub fn from_jets(dim: usize, jets: &[Jet2]) -> Self {
        let mut out = Self::zeros(jets.len(), dim);
        for (i, jet) in jets.iter().enumerate() {
            out.set(i, jet);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, i: usize) -> f64 {
        self.data[(i, 0)]
    }

    pub fn grad(&self, i: usize, k: usize) -> f64 {
        self.data[(i, 1 + k)]
    }

    pub fn hess(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i, 1 + self.dim + j * self.dim + k)]
    }

    pub fn laplacian(&self, i: usize) -> f64 {
        (0..self.dim).map(|j| self.hess(i, j, j)).sum()
    }

    pub fn get(&self, i: usize) -> Jet2 {
        let d = self.dim;
        Jet2 {
            value: self.value(i),
            grad: (0..d).map(|k| self.grad(i, k)).collect(),
            hess: (0..d * d).map(|c| self.data[(i, 1 + d + c)]).collect(),
        }
    }

    pub fn set(&mut self, i: usize, jet: &Jet2) {
        let d = self.dim;
        self.data[(i, 0)] = jet.value;
        for k in 0..d {
            self.data[(i, 1 + k)] = jet.grad[k];
        }
        for c in 0..d * d {
            self.data[(i, 1 + d + c)] = jet.hess[c];
        }
    }

    pub fn to_vec(&self) -> Vec<Jet2> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Column of values `t_i(x)`.
    pub fn values(&self) -> Vec<f64> {
        self.data.column(0).iter().copied().collect()
    }

    /// Column of `d t_i / d x_k`.
    pub fn grad_column(&self, k: usize) -> Vec<f64> {
        self.data.column(1 + k).iter().copied().collect()
    }

    /// Column of `d^2 t_i / d x_j d x_k`.
    pub fn hess_column(&self, j: usize, k: usize) -> Vec<f64> {
        self.data
            .column(1 + self.dim + j * self.dim + k)
            .iter()
            .copied()
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Stack several jet blocks (same point, same dim) vertically.
    pub(crate) fn vstack(dim: usize, parts: &[Jets]) -> Self {
        let rows: usize = parts.iter().map(|p| p.len()).sum();
        let mut data = DMatrix::zeros(rows, Self::width(dim));
        let mut r0 = 0;
        for p in parts {
            data.rows_mut(r0, p.len()).copy_from(&p.data);
            r0 += p.len();
        }
        Self { dim, data }
    }
}

impl From<&Jets> for Vec<Jet2> {
    fn from(j: &Jets) -> Self {
        j.to_vec()
    }
}
