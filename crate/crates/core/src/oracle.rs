//! Reference solutions: finite-difference solvers on uniform space-time grids
//! and the closed-form interface family `u = c / (1 + m |x|^2)`.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::basis::{Jet2, ScalarField};
use crate::error::{Error, Result};
use crate::linalg::{solve_cyclic_tridiagonal, solve_tridiagonal};
use crate::problems::{Astroid, InterfaceData, Region};

const NEWTON_MAX_ITERS: usize = 50;
const NEWTON_TOL: f64 = 1e-12;
const CFL_TARGET: f64 = 0.9;
const BINARY_MAGIC: &[u8; 4] = b"FBGS";
const BINARY_VERSION: u32 = 1;

/// Uniform tensor grid: `nx` nodes over `x_range`, `nt` nodes over `t_range`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub nt: usize,
    pub x_range: (f64, f64),
    pub t_range: (f64, f64),
}

impl Grid {
    pub fn unit(nx: usize, nt: usize) -> Self {
        Self {
            nx,
            nt,
            x_range: (0.0, 1.0),
            t_range: (0.0, 1.0),
        }
    }

    pub fn square(n: usize) -> Self {
        Self::unit(n, n)
    }

    /// `n x n` on `[-1, 1]^2`.
    pub fn symmetric(n: usize) -> Self {
        Self {
            nx: n,
            nt: n,
            x_range: (-1.0, 1.0),
            t_range: (-1.0, 1.0),
        }
    }

    pub fn dx(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) / (self.nx - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        (self.t_range.1 - self.t_range.0) / (self.nt - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_range.0 + i as f64 * self.dx()
    }

    pub fn t(&self, n: usize) -> f64 {
        self.t_range.0 + n as f64 * self.dt()
    }

    /// All nodes, `x` fastest.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.nx * self.nt);
        for n in 0..self.nt {
            for i in 0..self.nx {
                out.push(vec![self.x(i), self.t(n)]);
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.nx < 3 || self.nt < 2 {
            return Err(Error::invalid("grid", "need nx >= 3 and nt >= 2"));
        }
        if !(self.x_range.1 > self.x_range.0 && self.t_range.1 > self.t_range.0) {
            return Err(Error::invalid("grid", "ranges must be increasing"));
        }
        Ok(())
    }
}

/// Values on a [`Grid`], stored time-major (`values[n * nx + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub scheme: String,
}

impl GridSolution {
    pub fn new(grid: Grid, values: Vec<f64>, scheme: impl Into<String>) -> Result<Self> {
        if values.len() != grid.nx * grid.nt {
            return Err(Error::DimensionMismatch {
                expected: grid.nx * grid.nt,
                got: values.len(),
                context: "grid solution values".into(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid solution".into()));
        }
        Ok(Self {
            grid,
            values,
            scheme: scheme.into(),
        })
    }

    /// Tabulate a function on a grid.
    pub fn from_fn(grid: Grid, scheme: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = grid.points().iter().map(|p| f(p[0], p[1])).collect();
        Self::new(grid, values, scheme)
    }

    pub fn at(&self, i: usize, n: usize) -> f64 {
        self.values[n * self.grid.nx + i]
    }

    /// Time level `n`.
    pub fn level(&self, n: usize) -> &[f64] {
        &self.values[n * self.grid.nx..(n + 1) * self.grid.nx]
    }

    /// Bilinear interpolation, exact at nodes.
    pub fn sample(&self, x: f64, t: f64) -> f64 {
        let g = &self.grid;
        let locate = |v: f64, lo: f64, h: f64, n: usize| {
            let s = ((v - lo) / h).clamp(0.0, (n - 1) as f64);
            let k = (s.floor() as usize).min(n - 2);
            (k, s - k as f64)
        };
        let (i, fx) = locate(x, g.x_range.0, g.dx(), g.nx);
        let (n, ft) = locate(t, g.t_range.0, g.dt(), g.nt);
        let v = |i: usize, n: usize| self.at(i, n);
        let lo = v(i, n) * (1.0 - fx) + v(i + 1, n) * fx;
        let hi = v(i, n + 1) * (1.0 - fx) + v(i + 1, n + 1) * fx;
        lo * (1.0 - ft) + hi * ft
    }

    /// Restrict to a coarser grid whose nodes are nodes of this one.
    pub fn restrict(&self, coarse: Grid) -> Result<Self> {
        let values = coarse.points().iter().map(|p| self.sample(p[0], p[1])).collect();
        Self::new(coarse, values, self.scheme.clone())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// CSV: one metadata comment line, then one row of values per time level.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let g = &self.grid;
        let io = |e| Error::io(path, e);
        writeln!(
            w,
            "# scheme={} nx={} nt={} x0={:?} x1={:?} t0={:?} t1={:?}",
            self.scheme, g.nx, g.nt, g.x_range.0, g.x_range.1, g.t_range.0, g.t_range.1
        )
        .map_err(io)?;
        for n in 0..g.nt {
            let row: Vec<String> = self.level(n).iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let parse_err = |m: String| Error::Parse {
            path: path.into(),
            message: m,
        };
        let header = lines
            .next()
            .ok_or_else(|| parse_err("empty file".into()))?
            .map_err(|e| Error::io(path, e))?;
        let meta = header
            .strip_prefix("# ")
            .ok_or_else(|| parse_err("missing metadata line".into()))?;
        let mut scheme = String::new();
        let mut num = std::collections::HashMap::new();
        for kv in meta.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| parse_err(format!("bad metadata field `{kv}`")))?;
            if k == "scheme" {
                scheme = v.to_string();
            } else {
                let x: f64 = v.parse().map_err(|_| parse_err(format!("bad number `{v}`")))?;
                num.insert(k.to_string(), x);
            }
        }
        let get = |k: &str| num.get(k).copied().ok_or_else(|| parse_err(format!("missing `{k}`")));
        let grid = Grid {
            nx: get("nx")? as usize,
            nt: get("nt")? as usize,
            x_range: (get("x0")?, get("x1")?),
            t_range: (get("t0")?, get("t1")?),
        };
        let mut values = Vec::with_capacity(grid.nx * grid.nt);
        for (k, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            for v in line.split(',') {
                values.push(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| parse_err(format!("row {k}: bad value `{v}`")))?,
                );
            }
        }
        Self::new(grid, values, scheme)
    }

    /// Little-endian binary: magic, version, dims, ranges, scheme, values.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let g = &self.grid;
        let mut buf = Vec::with_capacity(64 + 8 * self.values.len());
        buf.extend_from_slice(BINARY_MAGIC);
        buf.extend_from_slice(&BINARY_VERSION.to_le_bytes());
        buf.extend_from_slice(&(g.nx as u64).to_le_bytes());
        buf.extend_from_slice(&(g.nt as u64).to_le_bytes());
        for v in [g.x_range.0, g.x_range.1, g.t_range.0, g.t_range.1] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.scheme.len() as u64).to_le_bytes());
        buf.extend_from_slice(self.scheme.as_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader::new(&bytes, path);
        if r.take(4)? != BINARY_MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != BINARY_VERSION {
            return Err(r.err(&format!("unknown version {version}")));
        }
        let nx = r.u64()? as usize;
        let nt = r.u64()? as usize;
        let grid = Grid {
            nx,
            nt,
            x_range: (r.f64()?, r.f64()?),
            t_range: (r.f64()?, r.f64()?),
        };
        let len = r.u64()? as usize;
        let scheme = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("scheme is not UTF-8"))?;
        let count = nx.checked_mul(nt).ok_or_else(|| r.err("grid size overflows"))?;
        let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Self::new(grid, values, scheme)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn err(&self, m: &str) -> Error {
        Error::Parse {
            path: self.path.into(),
            message: format!("{m} (at byte {})", self.pos),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn substeps_for(cfl: f64, substeps: Option<usize>) -> Result<usize> {
    match substeps {
        Some(0) => Err(Error::invalid("substeps", "must be at least 1")),
        Some(s) => {
            if cfl / s as f64 > 1.0 {
                Err(Error::Cfl { cfl: cfl / s as f64 })
            } else {
                Ok(s)
            }
        }
        None => Ok(((cfl / CFL_TARGET).ceil() as usize).max(1)),
    }
}

/// Lax-Wendroff for `u_t + a(x) u_x = 0` on `[0, 1]^2` with inflow
/// `u(0, t) = sin(pi t / 2)` and `u(x, 0) = sin(pi x)`.
///
/// `substeps` time steps are taken per output level; `None` picks the
/// smallest count with CFL number at most 0.9. An explicit count that
/// violates CFL is an error. The outflow node uses the one-sided
/// Beam-Warming update.
pub fn solve_advection_lw(speed: &dyn Fn(f64) -> f64, grid: Grid, substeps: Option<usize>) -> Result<GridSolution> {
    grid.validate()?;
    let nx = grid.nx;
    let dx = grid.dx();
    let xs: Vec<f64> = (0..nx).map(|i| grid.x(i)).collect();
    let a: Vec<f64> = xs.iter().map(|&x| speed(x)).collect();
    if a.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("a", "advection speed must be positive on the grid"));
    }
    let a_half: Vec<f64> = (0..nx - 1).map(|i| speed(0.5 * (xs[i] + xs[i + 1]))).collect();
    let amax = a.iter().chain(&a_half).copied().fold(0.0, f64::max);
    let steps = substeps_for(amax * grid.dt() / dx, substeps)?;
    let dt = grid.dt() / steps as f64;
    let (r, r2) = (dt / dx, dt * dt / (dx * dx));

    let mut u: Vec<f64> = xs.iter().map(|&x| (PI * x).sin()).collect();
    let mut values = Vec::with_capacity(nx * grid.nt);
    values.extend_from_slice(&u);
    let mut next = vec![0.0; nx];
    let mut t = grid.t_range.0;
    for _ in 1..grid.nt {
        for _ in 0..steps {
            t += dt;
            next[0] = (PI * t / 2.0).sin();
            for i in 1..nx - 1 {
                let ux = u[i + 1] - u[i - 1];
                let flux = a_half[i] * (u[i + 1] - u[i]) - a_half[i - 1] * (u[i] - u[i - 1]);
                next[i] = u[i] - 0.5 * r * a[i] * ux + 0.5 * r2 * a[i] * flux;
            }
            let n = nx - 1;
            let c = a[n] * r;
            next[n] = u[n] - 0.5 * c * (3.0 * u[n] - 4.0 * u[n - 1] + u[n - 2])
                + 0.5 * c * c * (u[n] - 2.0 * u[n - 1] + u[n - 2]);
            std::mem::swap(&mut u, &mut next);
        }
        values.extend_from_slice(&u);
    }
    GridSolution::new(grid, values, "lax_wendroff")
}

/// Lax-Wendroff on the periodic unit interval for `u_t + a(x) u_x = 0` with
/// initial data `u0`. Node `nx - 1` duplicates node 0.
pub fn solve_advection_lw_periodic(
    speed: &dyn Fn(f64) -> f64,
    u0: &dyn Fn(f64) -> f64,
    grid: Grid,
    substeps: Option<usize>,
) -> Result<GridSolution> {
    grid.validate()?;
    let m = grid.nx - 1;
    let dx = grid.dx();
    let xs: Vec<f64> = (0..m).map(|i| grid.x(i)).collect();
    let a: Vec<f64> = xs.iter().map(|&x| speed(x)).collect();
    let a_half: Vec<f64> = xs.iter().map(|&x| speed(x + 0.5 * dx)).collect();
    let amax = a.iter().chain(&a_half).copied().fold(0.0, f64::max);
    let steps = substeps_for(amax * grid.dt() / dx, substeps)?;
    let dt = grid.dt() / steps as f64;
    let (r, r2) = (dt / dx, dt * dt / (dx * dx));
    let mut u: Vec<f64> = xs.iter().map(|&x| u0(x)).collect();
    let mut values = Vec::with_capacity(grid.nx * grid.nt);
    let push = |values: &mut Vec<f64>, u: &[f64]| {
        values.extend_from_slice(u);
        values.push(u[0]);
    };
    push(&mut values, &u);
    let mut next = vec![0.0; m];
    for _ in 1..grid.nt {
        for _ in 0..steps {
            for i in 0..m {
                let (l, rr) = ((i + m - 1) % m, (i + 1) % m);
                let flux = a_half[i] * (u[rr] - u[i]) - a_half[l] * (u[i] - u[l]);
                next[i] = u[i] - 0.5 * r * a[i] * (u[rr] - u[l]) + 0.5 * r2 * a[i] * flux;
            }
            std::mem::swap(&mut u, &mut next);
        }
        push(&mut values, &u);
    }
    GridSolution::new(grid, values, "lax_wendroff_periodic")
}

/// Crank-Nicolson for `u_t = D u_xx + k u^2 + f(x, t)` on `[0, 1]^2` with
/// zero initial and boundary data; each step solves the nonlinear system by
/// Newton's method with a tridiagonal Jacobian.
pub fn solve_diffusion_reaction(
    source: &dyn Fn(f64, f64) -> f64,
    diffusion: f64,
    reaction: f64,
    grid: Grid,
) -> Result<GridSolution> {
    grid.validate()?;
    if !(diffusion > 0.0) {
        return Err(Error::invalid("D", "diffusion must be positive"));
    }
    let nx = grid.nx;
    let m = nx - 2;
    let dx = grid.dx();
    let dt = grid.dt();
    let lam = diffusion * dt / (dx * dx);
    let xs: Vec<f64> = (1..nx - 1).map(|i| grid.x(i)).collect();
    // Explicit half of the update: u + dt/2 (D u_xx + k u^2 + f).
    let half_step = |u: &[f64], t: f64| -> Vec<f64> {
        (0..m)
            .map(|i| {
                let l = if i > 0 { u[i - 1] } else { 0.0 };
                let r = if i + 1 < m { u[i + 1] } else { 0.0 };
                0.5 * lam * (l - 2.0 * u[i] + r) + 0.5 * dt * (reaction * u[i] * u[i] + source(xs[i], t))
            })
            .collect()
    };
    let mut u = vec![0.0; m];
    let mut values = vec![0.0; nx];
    for n in 1..grid.nt {
        let (t0, t1) = (grid.t(n - 1), grid.t(n));
        let old = half_step(&u, t0);
        let f1: Vec<f64> = xs.iter().map(|&x| source(x, t1)).collect();
        let mut v = u.clone();
        let mut converged = false;
        let mut res = f64::INFINITY;
        for _ in 0..NEWTON_MAX_ITERS {
            let g: Vec<f64> = (0..m)
                .map(|i| {
                    let l = if i > 0 { v[i - 1] } else { 0.0 };
                    let r = if i + 1 < m { v[i + 1] } else { 0.0 };
                    v[i] - u[i]
                        - 0.5 * lam * (l - 2.0 * v[i] + r)
                        - 0.5 * dt * (reaction * v[i] * v[i] + f1[i])
                        - old[i]
                })
                .collect();
            res = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            let scale = 1.0 + v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            if res <= NEWTON_TOL * scale {
                converged = true;
                break;
            }
            let diag: Vec<f64> = v.iter().map(|vi| 1.0 + lam - dt * reaction * vi).collect();
            let off = vec![-0.5 * lam; m];
            let delta = solve_tridiagonal(&off, &diag, &off, &g);
            for (vi, di) in v.iter_mut().zip(&delta) {
                *vi -= di;
            }
        }
        if !converged || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NewtonDiverged {
                step: n,
                iterations: NEWTON_MAX_ITERS,
                residual: res,
            });
        }
        u = v;
        values.push(0.0);
        values.extend_from_slice(&u);
        values.push(0.0);
    }
    GridSolution::new(grid, values, "crank_nicolson")
}

/// Crank-Nicolson for viscous Burgers `u_t + (u^2 / 2)_x = mu u_xx` on the
/// periodic unit interval, central conservative flux, Newton per step with a
/// cyclic tridiagonal Jacobian. Node `nx - 1` duplicates node 0.
pub fn solve_burgers(u0: &dyn Fn(f64) -> f64, viscosity: f64, grid: Grid) -> Result<GridSolution> {
    grid.validate()?;
    if !(viscosity > 0.0) {
        return Err(Error::invalid("mu", "viscosity must be positive"));
    }
    let m = grid.nx - 1;
    if m < 3 {
        return Err(Error::invalid("grid", "need at least four nodes"));
    }
    let dx = grid.dx();
    let dt = grid.dt();
    let nu = viscosity / (dx * dx);
    let c = 1.0 / (4.0 * dx);
    let operator = |u: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|i| {
                let (l, r) = (u[(i + m - 1) % m], u[(i + 1) % m]);
                c * (r * r - l * l) - nu * (l - 2.0 * u[i] + r)
            })
            .collect()
    };
    let mut u: Vec<f64> = (0..m).map(|i| u0(grid.x(i))).collect();
    let mut values = Vec::with_capacity(grid.nx * grid.nt);
    values.extend_from_slice(&u);
    values.push(u[0]);
    for n in 1..grid.nt {
        let old = operator(&u);
        let mut v = u.clone();
        let mut converged = false;
        let mut res = f64::INFINITY;
        for _ in 0..NEWTON_MAX_ITERS {
            let op = operator(&v);
            let g: Vec<f64> = (0..m).map(|i| v[i] - u[i] + 0.5 * dt * (op[i] + old[i])).collect();
            res = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            let scale = 1.0 + v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            if res <= NEWTON_TOL * scale {
                converged = true;
                break;
            }
            let diag = vec![1.0 + dt * nu; m];
            let lower: Vec<f64> = (0..m)
                .map(|i| 0.5 * dt * (-2.0 * c * v[(i + m - 1) % m] - nu))
                .collect();
            let upper: Vec<f64> = (0..m).map(|i| 0.5 * dt * (2.0 * c * v[(i + 1) % m] - nu)).collect();
            let delta = solve_cyclic_tridiagonal(&lower, &diag, &upper, &g);
            for (vi, di) in v.iter_mut().zip(&delta) {
                *vi -= di;
            }
        }
        if !converged || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NewtonDiverged {
                step: n,
                iterations: NEWTON_MAX_ITERS,
                residual: res,
            });
        }
        u = v;
        values.extend_from_slice(&u);
        values.push(u[0]);
    }
    GridSolution::new(grid, values, "crank_nicolson_burgers")
}

/// Observed order `log2(|u_h - u_h/2| / |u_h/2 - u_h/4|)` from three
/// solutions restricted to the coarsest grid (max norm).
pub fn self_convergence_order(coarse: &GridSolution, mid: &GridSolution, fine: &GridSolution) -> Result<f64> {
    let g = coarse.grid;
    let m = mid.restrict(g)?;
    let f = fine.restrict(g)?;
    let e1 = coarse
        .values
        .iter()
        .zip(&m.values)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    let e2 = m
        .values
        .iter()
        .zip(&f.values)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    Ok((e1 / e2).log2())
}

/// Exact solution of the unit-speed advection problem: `sin(pi (x - t))`
/// below the characteristic through the origin, `sin(pi (t - x) / 2)` above.
#[derive(Debug, Clone, Copy, Default)]
pub struct AdvectionUnitSpeedExact;

impl ScalarField for AdvectionUnitSpeedExact {
    fn input_dim(&self) -> usize {
        2
    }

    fn jet(&self, p: &[f64]) -> Jet2 {
        let (x, t) = (p[0], p[1]);
        let (k, arg) = if x >= t { (PI, x - t) } else { (-PI / 2.0, t - x) };
        // u = sin(|k| s) with s = x - t or t - x; chain rule through d/dx = sign(k)
        let w = k.abs();
        let (s, c) = (w * arg).sin_cos();
        let dx = k * c;
        let dxx = -w * w * s;
        Jet2 {
            value: s,
            grad: vec![dx, -dx],
            hess: vec![dxx, -dxx, -dxx, dxx],
        }
    }
}

/// One branch `scale / (1 + m |x|^2)` of the interface family.
#[derive(Debug, Clone, Copy)]
pub struct InterfaceBranch {
    pub m: f64,
    pub scale: f64,
}

impl ScalarField for InterfaceBranch {
    fn input_dim(&self) -> usize {
        2
    }

    fn jet(&self, x: &[f64]) -> Jet2 {
        let m = self.m;
        let q = 1.0 + m * (x[0] * x[0] + x[1] * x[1]);
        let s = self.scale;
        let grad = vec![-2.0 * s * m * x[0] / (q * q), -2.0 * s * m * x[1] / (q * q)];
        let mut hess = vec![0.0; 4];
        for j in 0..2 {
            for k in 0..2 {
                let delta = if j == k { 1.0 } else { 0.0 };
                hess[2 * j + k] = s * (8.0 * m * m * x[j] * x[k] / (q * q * q) - 2.0 * m * delta / (q * q));
            }
        }
        Jet2 {
            value: s / q,
            grad,
            hess,
        }
    }
}

/// Interface data derived from the exact family with inner coefficient
/// `inner_coeff` and outer coefficient `outer_coeff`.
#[derive(Debug, Clone, Copy)]
pub struct InterfaceExact {
    pub m: f64,
    pub inner_coeff: f64,
    pub outer_coeff: f64,
    pub geometry: Astroid,
}

impl InterfaceExact {
    pub fn new(m: f64) -> Result<Self> {
        if !(m > 0.0) {
            return Err(Error::invalid("m", "must be positive"));
        }
        Ok(Self {
            m,
            inner_coeff: 2.0,
            outer_coeff: 1.0,
            geometry: Astroid::default(),
        })
    }

    pub fn inner(&self) -> InterfaceBranch {
        InterfaceBranch { m: self.m, scale: 1.0 }
    }

    pub fn outer(&self) -> InterfaceBranch {
        InterfaceBranch { m: self.m, scale: 2.0 }
    }

    /// Piecewise exact solution.
    pub fn u(&self, x: &[f64]) -> f64 {
        match self.geometry.classify(x).0 {
            Region::Inner => self.inner().value(x),
            Region::Outer => self.outer().value(x),
        }
    }

    /// Exact solution on an evaluation grid.
    pub fn tabulate(&self, grid: Grid) -> Result<GridSolution> {
        GridSolution::from_fn(grid, "exact", |a, b| self.u(&[a, b]))
    }
}

/// `(u, f1, f2, g_d, g_n, h)` of the exact family at `x`; `g_n` uses the
/// given interface normal.
pub fn interface_exact(m: f64, x: &[f64], normal: &[f64]) -> Result<[f64; 6]> {
    let e = InterfaceExact::new(m)?;
    Ok([
        e.u(x),
        e.source(Region::Inner, x),
        e.source(Region::Outer, x),
        e.jump_value(x),
        e.jump_flux(x, normal),
        e.boundary(x),
    ])
}

impl InterfaceData for InterfaceExact {
    fn source(&self, region: Region, x: &[f64]) -> f64 {
        match region {
            Region::Inner => -self.inner_coeff * self.inner().jet(x).laplacian(),
            Region::Outer => -self.outer_coeff * self.outer().jet(x).laplacian(),
        }
    }

    fn jump_value(&self, x: &[f64]) -> f64 {
        self.outer().value(x) - self.inner().value(x)
    }

    fn jump_flux(&self, x: &[f64], n: &[f64]) -> f64 {
        let g1 = self.inner().jet(x).grad;
        let g2 = self.outer().jet(x).grad;
        self.outer_coeff * (g2[0] * n[0] + g2[1] * n[1]) - self.inner_coeff * (g1[0] * n[0] + g1[1] * n[1])
    }

    fn boundary(&self, x: &[f64]) -> f64 {
        self.outer().value(x)
    }
}
