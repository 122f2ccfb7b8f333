//! Random input functions: mean-zero Gaussian random fields with an RBF
//! kernel on `[0, 1]`, and periodic fields with a fractional-Laplacian
//! spectrum on the unit torus.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Default sensor count for the RBF fields.
pub const DEFAULT_SENSORS: usize = 100;
/// Fourier modes kept in periodic synthesis.
pub const DEFAULT_MODES: usize = 128;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum GrfKind {
    /// Covariance `exp(-|x - y|^2 / (2 beta^2))` on a sorted grid in `[0, 1]`.
    RbfKernel { length_scale: f64, grid: Vec<f64> },
    /// Covariance `sigma^2 (-Laplacian + tau^2)^(-s)` on the periodic unit
    /// interval, truncated to `modes` Fourier modes and synthesised on
    /// `grid_points` equispaced points including both endpoints.
    PeriodicSpectral {
        sigma: f64,
        tau: f64,
        exponent: f64,
        modes: usize,
        grid_points: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrfSpec {
    pub kind: GrfKind,
    pub seed: u64,
}

impl GrfSpec {
    pub fn rbf(length_scale: f64, sensors: usize, seed: u64) -> Self {
        Self {
            kind: GrfKind::RbfKernel {
                length_scale,
                grid: linspace(0.0, 1.0, sensors),
            },
            seed,
        }
    }

    pub fn periodic(sigma: f64, tau: f64, exponent: f64, grid_points: usize, seed: u64) -> Self {
        Self {
            kind: GrfKind::PeriodicSpectral {
                sigma,
                tau,
                exponent,
                modes: DEFAULT_MODES,
                grid_points,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            GrfKind::RbfKernel { length_scale, grid } => {
                if !(*length_scale > 0.0) {
                    return Err(Error::invalid("length_scale", "must be positive"));
                }
                if grid.len() < 2 {
                    return Err(Error::invalid("grid", "need at least two sensors"));
                }
                if grid.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::invalid("grid", "must be strictly ascending"));
                }
            }
            GrfKind::PeriodicSpectral {
                sigma,
                tau,
                exponent,
                modes,
                grid_points,
            } => {
                if !(*sigma > 0.0) || !(*tau > 0.0) {
                    return Err(Error::invalid("sigma/tau", "must be positive"));
                }
                if !(*exponent > 0.5) {
                    return Err(Error::invalid("exponent", "must exceed 1/2"));
                }
                if *modes == 0 || *grid_points < 2 {
                    return Err(Error::invalid("modes/grid_points", "too small"));
                }
            }
        }
        Ok(())
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

pub fn rbf_kernel(length_scale: f64, x: f64, y: f64) -> f64 {
    let d = x - y;
    (-d * d / (2.0 * length_scale * length_scale)).exp()
}

/// A function known on a sorted grid, evaluated elsewhere by a natural cubic
/// spline (clamped to the grid's range).
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
                context: "grid function values".into(),
            });
        }
        if grid.len() < 2 || grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("grid", "need >= 2 strictly ascending nodes"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid function values".into()));
        }
        let second = natural_spline_second_derivatives(&grid, &values);
        Ok(Self { grid, values, second })
    }

    pub fn constant(grid: Vec<f64>, c: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![c; n])
    }

    pub fn from_fn(grid: Vec<f64>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.iter().map(|&x| f(x)).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.grid.len();
        let x = x.clamp(self.grid[0], self.grid[n - 1]);
        let hi = self.grid.partition_point(|&g| g < x).clamp(1, n - 1);
        let lo = hi - 1;
        let h = self.grid[hi] - self.grid[lo];
        let a = (self.grid[hi] - x) / h;
        let b = (x - self.grid[lo]) / h;
        a * self.values[lo]
            + b * self.values[hi]
            + ((a * a * a - a) * self.second[lo] + (b * b * b - b) * self.second[hi]) * h * h / 6.0
    }

    /// Sample onto another grid.
    pub fn resample(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&x| self.eval(x)).collect()
    }
}

fn natural_spline_second_derivatives(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    // Tridiagonal system for interior second derivatives (Thomas algorithm).
    let k = n - 2;
    let mut diag = vec![0.0; k];
    let mut upper = vec![0.0; k];
    let mut lower = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for i in 1..n - 1 {
        let h0 = x[i] - x[i - 1];
        let h1 = x[i + 1] - x[i];
        lower[i - 1] = h0;
        diag[i - 1] = 2.0 * (h0 + h1);
        upper[i - 1] = h1;
        rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
    }
    let sol = crate::linalg::solve_tridiagonal(&lower, &diag, &upper, &rhs);
    m[1..n - 1].copy_from_slice(&sol);
    m
}

/// `a(x) = v(x) - min_grid v + 1`.
pub fn to_coefficient(v: &GridFunction) -> GridFunction {
    let min = v.min();
    let values = v.values.iter().map(|&x| x - min + 1.0).collect();
    GridFunction::new(v.grid.clone(), values).expect("shifted finite values")
}

/// A sampled periodic field, exact at any point through its Fourier series.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicField {
    pub mean: f64,
    /// `(cos, sin)` amplitudes for frequencies `2 pi k`, `k = 1..`.
    pub modes: Vec<(f64, f64)>,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl PeriodicField {
    pub fn eval(&self, x: f64) -> f64 {
        self.modes.iter().enumerate().fold(self.mean, |acc, (k, (c, s))| {
            let w = 2.0 * PI * (k + 1) as f64 * x;
            acc + c * w.cos() + s * w.sin()
        })
    }

    /// `(u, u', u'')` at `x`.
    pub fn eval_derivatives(&self, x: f64) -> (f64, f64, f64) {
        let mut out = (self.mean, 0.0, 0.0);
        for (k, (c, s)) in self.modes.iter().enumerate() {
            let f = 2.0 * PI * (k + 1) as f64;
            let (sn, cs) = (f * x).sin_cos();
            out.0 += c * cs + s * sn;
            out.1 += f * (-c * sn + s * cs);
            out.2 += -f * f * (c * cs + s * sn);
        }
        out
    }

    pub fn from_modes(mean: f64, modes: Vec<(f64, f64)>, grid_points: usize) -> Self {
        let mut field = Self {
            mean,
            modes,
            grid: linspace(0.0, 1.0, grid_points),
            values: Vec::new(),
        };
        let n = grid_points;
        let mut values: Vec<f64> = field.grid[..n - 1].iter().map(|&x| field.eval(x)).collect();
        values.push(values[0]);
        field.values = values;
        field
    }
}

/// Eigenvalue of the periodic covariance for frequency `2 pi k`.
pub fn periodic_mode_variance(sigma: f64, tau: f64, exponent: f64, k: usize) -> f64 {
    let w = 2.0 * PI * k as f64;
    sigma * sigma * (w * w + tau * tau).powf(-exponent)
}

/// Pointwise variance of the truncated periodic field (the same at every `x`).
pub fn periodic_pointwise_variance(sigma: f64, tau: f64, exponent: f64, modes: usize) -> f64 {
    periodic_mode_variance(sigma, tau, exponent, 0)
        + (1..=modes)
            .map(|k| periodic_mode_variance(sigma, tau, exponent, k))
            .sum::<f64>()
}

/// Seeded sampler; draws are sequential per instance.
#[derive(Debug)]
pub struct GrfSampler {
    spec: GrfSpec,
    rng: ChaCha8Rng,
    chol: Option<DMatrix<f64>>,
}

impl GrfSampler {
    pub fn new(spec: GrfSpec) -> Result<Self> {
        spec.validate()?;
        let chol = match &spec.kind {
            GrfKind::RbfKernel { length_scale, grid } => Some(rbf_cholesky(*length_scale, grid)?),
            GrfKind::PeriodicSpectral { .. } => None,
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec,
            chol,
        })
    }

    pub fn spec(&self) -> &GrfSpec {
        &self.spec
    }

    pub fn sample_rbf(&mut self) -> Result<GridFunction> {
        let (GrfKind::RbfKernel { grid, .. }, Some(l)) = (&self.spec.kind, &self.chol) else {
            return Err(Error::invalid("kind", "not an RBF-kernel field"));
        };
        let z = DVector::from_fn(grid.len(), |_, _| StandardNormal.sample(&mut self.rng));
        let v = l * z;
        GridFunction::new(grid.clone(), v.iter().copied().collect())
    }

    pub fn sample_periodic(&mut self) -> Result<PeriodicField> {
        let GrfKind::PeriodicSpectral {
            sigma,
            tau,
            exponent,
            modes,
            grid_points,
        } = self.spec.kind
        else {
            return Err(Error::invalid("kind", "not a periodic field"));
        };
        let mut normal = || -> f64 { StandardNormal.sample(&mut self.rng) };
        // Karhunen-Loeve: 1, sqrt(2) cos(2 pi k x), sqrt(2) sin(2 pi k x)
        let mean = periodic_mode_variance(sigma, tau, exponent, 0).sqrt() * normal();
        let amps: Vec<(f64, f64)> = (1..=modes)
            .map(|k| {
                let a = (2.0 * periodic_mode_variance(sigma, tau, exponent, k)).sqrt();
                (a * normal(), a * normal())
            })
            .collect();
        Ok(PeriodicField::from_modes(mean, amps, grid_points))
    }
}

fn rbf_cholesky(length_scale: f64, grid: &[f64]) -> Result<DMatrix<f64>> {
    let n = grid.len();
    let k = DMatrix::from_fn(n, n, |i, j| rbf_kernel(length_scale, grid[i], grid[j]));
    let mut jitter = JITTER_START;
    loop {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = kj.cholesky() {
            return Ok(c.unpack());
        }
        if jitter >= JITTER_MAX {
            return Err(Error::Cholesky { jitter });
        }
        jitter *= 100.0;
    }
}

/// `count` draws of `v ~ N(0, K)` on the spec's grid.
pub fn sample_rbf_grf(spec: &GrfSpec, count: usize) -> Result<Vec<GridFunction>> {
    let mut s = GrfSampler::new(spec.clone())?;
    (0..count).map(|_| s.sample_rbf()).collect()
}

pub fn sample_periodic_grf(spec: &GrfSpec, count: usize) -> Result<Vec<PeriodicField>> {
    let mut s = GrfSampler::new(spec.clone())?;
    (0..count).map(|_| s.sample_periodic()).collect()
}

/// Long-format CSV: `sample,x,value`.
pub fn write_samples_csv<'a>(path: &Path, samples: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["sample", "x", "value"]).map_err(|e| csv_err(path, e))?;
    for (s, (grid, values)) in samples.into_iter().enumerate() {
        for (x, v) in grid.iter().zip(values) {
            w.write_record([s.to_string(), x.to_string(), v.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<GridFunction>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for rec in r.deserialize::<(usize, f64, f64)>() {
        let (s, x, v) = rec.map_err(|e| csv_err(path, e))?;
        if s == out.len() {
            out.push((Vec::new(), Vec::new()));
        } else if s + 1 != out.len() {
            return Err(Error::Parse {
                path: path.into(),
                message: format!("sample index {s} out of order"),
            });
        }
        out[s].0.push(x);
        out[s].1.push(v);
    }
    out.into_iter().map(|(g, v)| GridFunction::new(g, v)).collect()
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.into(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(rbf_kernel(0.3, 0.4, 0.4), 1.0);
        assert!((rbf_kernel(0.2, 0.0, 0.2) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((rbf_kernel(0.2, 0.0, 0.2) - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn coefficient_shift() {
        let v = GridFunction::new(vec![0.0, 0.5, 1.0], vec![0.5, -0.5, 0.0]).unwrap();
        assert_eq!(to_coefficient(&v).values(), &[2.0, 1.0, 1.5]);
        let c = GridFunction::constant(vec![0.0, 1.0], 3.7).unwrap();
        assert_eq!(to_coefficient(&c).values(), &[1.0, 1.0]);
    }

    #[test]
    fn coefficient_min_is_one() {
        for v in sample_rbf_grf(&GrfSpec::rbf(0.1, 50, 3), 20).unwrap() {
            assert_eq!(to_coefficient(&v).min(), 1.0);
        }
    }

    #[test]
    fn spline_reproduces_nodes_and_cubics() {
        let g = linspace(0.0, 1.0, 11);
        let f = GridFunction::from_fn(g.clone(), |x| 2.0 * x - 1.0).unwrap();
        for x in [0.0, 0.13, 0.5, 0.97] {
            assert!((f.eval(x) - (2.0 * x - 1.0)).abs() < 1e-12);
        }
        let s = GridFunction::from_fn(linspace(0.0, 1.0, 201), |x| (3.0 * x).sin()).unwrap();
        assert!((s.eval(0.4321) - (3.0f64 * 0.4321).sin()).abs() < 1e-7);
    }

    #[test]
    fn periodic_endpoints_and_mode_zero() {
        let spec = GrfSpec::periodic(25.0, 5.0, 4.0, 129, 11);
        for u in sample_periodic_grf(&spec, 5).unwrap() {
            assert_eq!(u.values[0], u.values[128]);
            assert!((u.eval(0.0) - u.eval(1.0)).abs() < 1e-12);
        }
        let v0 = periodic_mode_variance(25.0, 5.0, 4.0, 0);
        assert!((v0 - 625.0 * 5f64.powi(-8)).abs() < 1e-18);
    }

    #[test]
    fn determinism() {
        let spec = GrfSpec::rbf(0.2, 40, 5);
        assert_eq!(sample_rbf_grf(&spec, 3).unwrap(), sample_rbf_grf(&spec, 3).unwrap());
    }

    #[test]
    fn invalid_specs() {
        assert!(GrfSampler::new(GrfSpec::rbf(0.0, 10, 0)).is_err());
        assert!(GrfSampler::new(GrfSpec::periodic(1.0, 1.0, 0.5, 10, 0)).is_err());
        let mut s = GrfSpec::rbf(0.1, 10, 0);
        if let GrfKind::RbfKernel { grid, .. } = &mut s.kind {
            grid.swap(0, 1);
        }
        assert!(s.validate().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let samples = sample_rbf_grf(&GrfSpec::rbf(0.2, 10, 1), 2).unwrap();
        write_samples_csv(&path, samples.iter().map(|s| (s.grid(), s.values()))).unwrap();
        assert_eq!(read_samples_csv(&path).unwrap(), samples);
    }
}
