//! Row-normalised least-squares systems, their solution, and Newton-LLSQ.
//!
//! Every row `j` is weighted by `sqrt(rho_j / N_group)` with
//! `rho_j = N_group / |A_j|^2`, which is simply `1 / |A_j|`: all weighted rows
//! have unit norm. Interface jump rows use the norm over both blocks.

use std::sync::Arc;
use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::{BasisSet, Jets};
use crate::error::{Error, Result};
use crate::problems::{
    interface_rows, linear_rows, nonlinear_residual_and_jacobian, Astroid, CollocationSet, Group, Linearity,
    ProblemSpec, Region, ResidualRow, Tag,
};

/// Default relative singular-value cutoff.
pub const DEFAULT_RCOND: f64 = 1e-10;
const CHUNK: usize = 128;

/// The basis (or pair of bases) a solution is expanded in.
#[derive(Debug, Clone)]
pub enum SolutionBasis {
    Single(Arc<BasisSet>),
    Interface {
        inner: Arc<BasisSet>,
        outer: Arc<BasisSet>,
        geometry: Astroid,
    },
}

impl SolutionBasis {
    pub fn single(basis: BasisSet) -> Self {
        Self::Single(Arc::new(basis))
    }

    pub fn interface(inner: BasisSet, outer: BasisSet, geometry: Astroid) -> Self {
        Self::Interface {
            inner: Arc::new(inner),
            outer: Arc::new(outer),
            geometry,
        }
    }

    /// Total coefficient count.
    pub fn size(&self) -> usize {
        match self {
            Self::Single(b) => b.size(),
            Self::Interface { inner, outer, .. } => inner.size() + outer.size(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WeightedSystem {
    /// Unweighted rows.
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Diagonal of the row weighting.
    pub rho: DVector<f64>,
    pub groups: Vec<Group>,
}

impl WeightedSystem {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn weighted_matrix(&self) -> DMatrix<f64> {
        let mut m = self.matrix.clone();
        for (j, mut row) in m.row_iter_mut().enumerate() {
            row *= self.rho[j];
        }
        m
    }

    pub fn weighted_rhs(&self) -> DVector<f64> {
        self.rhs.component_mul(&self.rho)
    }

    /// `|rho (A alpha - b)|_2`.
    pub fn weighted_residual(&self, alpha: &[f64]) -> f64 {
        let a = DVector::from_column_slice(alpha);
        ((&self.matrix * a - &self.rhs).component_mul(&self.rho)).norm()
    }

    /// Rows per group, in first-appearance order.
    pub fn group_counts(&self) -> Vec<(Group, usize)> {
        let mut out: Vec<(Group, usize)> = Vec::new();
        for g in &self.groups {
            match out.iter_mut().find(|(h, _)| h == g) {
                Some((_, c)) => *c += 1,
                None => out.push((*g, 1)),
            }
        }
        out
    }

    /// Build from unweighted rows, computing the unit-norm weights.
    pub fn from_rows(rows: Vec<(ResidualRow, Vec<f64>)>, cols: usize) -> Result<Self> {
        let n = rows.len();
        let mut matrix = DMatrix::zeros(n, cols);
        let mut rhs = DVector::zeros(n);
        let mut rho = DVector::zeros(n);
        let mut groups = Vec::with_capacity(n);
        for (j, (row, point)) in rows.into_iter().enumerate() {
            if row.coefficients.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: row.coefficients.len(),
                    context: format!("row {j} of group {}", row.group),
                });
            }
            let w = row_weight(&row.coefficients, j, row.group, &point)?;
            for (c, v) in row.coefficients.iter().enumerate() {
                matrix[(j, c)] = *v;
            }
            if !row.rhs.is_finite() {
                return Err(Error::NonFinite(format!("rhs of row {j} ({}) at {point:?}", row.group)));
            }
            rhs[j] = row.rhs;
            rho[j] = w;
            groups.push(row.group);
        }
        Ok(Self {
            matrix,
            rhs,
            rho,
            groups,
        })
    }
}

fn row_weight(coefficients: &[f64], row: usize, group: Group, point: &[f64]) -> Result<f64> {
    let norm = coefficients.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("row {row} ({group}) at {point:?}")));
    }
    if norm == 0.0 {
        return Err(Error::ZeroRow {
            row,
            group: group.to_string(),
            point: point.to_vec(),
        });
    }
    Ok(1.0 / norm)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub residual_norm: f64,
    pub rank: usize,
    pub sigma_max: f64,
    pub rows: usize,
    pub cols: usize,
    pub assembly_time_s: f64,
    pub solve_time_s: f64,
    pub newton_steps: usize,
    /// Weighted residual before each Newton step and after the last one.
    pub residual_history: Vec<f64>,
    /// Points on the interface assigned to the outer region during evaluation.
    pub ambiguous_points: usize,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub basis: SolutionBasis,
    pub alpha: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl Solution {
    /// `(alpha_inner, alpha_outer)` for interface solutions.
    pub fn split_alpha(&self) -> (&[f64], &[f64]) {
        match &self.basis {
            SolutionBasis::Single(_) => (&self.alpha, &[]),
            SolutionBasis::Interface { inner, .. } => self.alpha.split_at(inner.size()),
        }
    }
}

/// Output of [`lstsq`].
#[derive(Debug, Clone)]
pub struct LstsqResult {
    pub x: DVector<f64>,
    pub rank: usize,
    pub sigma_max: f64,
    pub residual_norm: f64,
}

/// `argmin |m x - b|_2` via Householder QR and a truncated SVD of `R`.
pub fn lstsq(m: DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> Result<LstsqResult> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(Error::Underdetermined { rows, cols });
    }
    if b.len() != rows {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: b.len(),
            context: "least-squares right-hand side".into(),
        });
    }
    if m.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least-squares system".into()));
    }
    let original = if rows * cols <= 4_000_000 {
        Some(m.clone())
    } else {
        None
    };
    let qr = m.qr();
    let mut qtb = b.clone();
    qr.q_tr_mul(&mut qtb);
    let r = qr.r();
    let tail = qtb.rows(cols, rows - cols).norm();
    let head = qtb.rows(0, cols).into_owned();
    let svd = r.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = rcond * sigma_max;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut coeff = u.transpose() * &head;
    let mut rank = 0;
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s > cutoff && *s > 0.0 {
            coeff[k] /= s;
            rank += 1;
        } else {
            coeff[k] = 0.0;
        }
    }
    if rank == 0 {
        return Err(Error::RankZero { sigma_max });
    }
    let x = vt.transpose() * coeff;
    let residual_norm = match original {
        Some(m) => (m * &x - b).norm(),
        None => {
            let fit = (&r * &x - &head).norm();
            (fit * fit + tail * tail).sqrt()
        }
    };
    Ok(LstsqResult {
        x,
        rank,
        sigma_max,
        residual_norm,
    })
}

/// One point of work during assembly.
enum Task<'a> {
    Single {
        x: &'a [f64],
        tag: Tag,
    },
    Interface {
        x: &'a [f64],
        tag: Tag,
        normal: Option<&'a [f64]>,
    },
}

fn single_tasks(c: &CollocationSet) -> Vec<Task<'_>> {
    c.interior
        .iter()
        .chain(&c.boundary)
        .map(|p| Task::Single { x: &p.x, tag: p.tag })
        .collect()
}

fn interface_tasks(c: &CollocationSet) -> Vec<Task<'_>> {
    let mut out: Vec<Task<'_>> = c
        .interior
        .iter()
        .chain(&c.boundary)
        .map(|p| Task::Interface {
            x: &p.x,
            tag: p.tag,
            normal: None,
        })
        .collect();
    for p in &c.interface {
        for tag in [Tag::JumpValue, Tag::JumpFlux] {
            out.push(Task::Interface {
                x: &p.x,
                tag,
                normal: Some(&p.normal),
            });
        }
    }
    out
}

/// Jets at each single-basis task point and, for periodic pairs, at the
/// partner point.
fn single_jets(basis: &BasisSet, tasks: &[Task<'_>]) -> Result<Vec<(Jets, Option<Jets>)>> {
    let xs: Vec<Vec<f64>> = tasks
        .iter()
        .map(|t| match t {
            Task::Single { x, .. } | Task::Interface { x, .. } => x.to_vec(),
        })
        .collect();
    let jets = basis.jets_batch(&xs)?;
    let partner_idx: Vec<usize> = tasks
        .iter()
        .enumerate()
        .filter(|(_, t)| {
            matches!(
                t,
                Task::Single {
                    tag: Tag::PeriodicPair,
                    ..
                }
            )
        })
        .map(|(i, _)| i)
        .collect();
    let partner_pts: Vec<Vec<f64>> = partner_idx
        .iter()
        .map(|&i| ProblemSpec::periodic_partner(&xs[i]))
        .collect();
    let mut partners: Vec<Option<Jets>> = vec![None; tasks.len()];
    for (i, j) in partner_idx.into_iter().zip(basis.jets_batch(&partner_pts)?) {
        partners[i] = Some(j);
    }
    Ok(jets.into_iter().zip(partners).collect())
}

fn single_rows(problem: &ProblemSpec, basis: &BasisSet, tasks: &[Task<'_>]) -> Result<Vec<(ResidualRow, Vec<f64>)>> {
    let chunks: Vec<Result<Vec<(ResidualRow, Vec<f64>)>>> = tasks
        .par_chunks(CHUNK)
        .map(|chunk| {
            let jets = single_jets(basis, chunk)?;
            let mut out = Vec::with_capacity(chunk.len());
            for (task, (j, partner)) in chunk.iter().zip(&jets) {
                let Task::Single { x, tag } = task else {
                    unreachable!("single-basis task list")
                };
                for row in linear_rows(problem, j, x, *tag, partner.as_ref())? {
                    out.push((row, x.to_vec()));
                }
            }
            Ok(out)
        })
        .collect();
    let mut rows = Vec::with_capacity(tasks.len());
    for c in chunks {
        rows.extend(c?);
    }
    Ok(rows)
}

fn interface_rows_all(
    problem: &ProblemSpec,
    inner: &BasisSet,
    outer: &BasisSet,
    tasks: &[Task<'_>],
) -> Result<Vec<(ResidualRow, Vec<f64>)>> {
    let sizes = (inner.size(), outer.size());
    let chunks: Vec<Result<Vec<(ResidualRow, Vec<f64>)>>> = tasks
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut out = Vec::with_capacity(chunk.len());
            for task in chunk {
                let Task::Interface { x, tag, normal } = task else {
                    unreachable!("interface task list")
                };
                let needs_inner = matches!(tag, Tag::Pde1 | Tag::JumpValue | Tag::JumpFlux);
                let needs_outer = !matches!(tag, Tag::Pde1);
                let ji = if needs_inner { Some(inner.jets(x)?) } else { None };
                let jo = if needs_outer { Some(outer.jets(x)?) } else { None };
                let row = interface_rows(problem, sizes, ji.as_ref(), jo.as_ref(), x, *tag, *normal)?;
                out.push((row, x.to_vec()));
            }
            Ok(out)
        })
        .collect();
    let mut rows = Vec::with_capacity(tasks.len());
    for c in chunks {
        rows.extend(c?);
    }
    Ok(rows)
}

/// The weighted system for a linear problem.
pub fn assemble(problem: &ProblemSpec, basis: &SolutionBasis, collocation: &CollocationSet) -> Result<WeightedSystem> {
    let rows = match (basis, problem.is_interface()) {
        (SolutionBasis::Single(b), false) => {
            if problem.linearity() != Linearity::Linear {
                return Err(Error::Unsupported(format!(
                    "{} is nonlinear; use newton_llsq",
                    problem.family_name()
                )));
            }
            single_rows(problem, b, &single_tasks(collocation))?
        }
        (SolutionBasis::Interface { inner, outer, .. }, true) => {
            interface_rows_all(problem, inner, outer, &interface_tasks(collocation))?
        }
        _ => {
            return Err(Error::Unsupported(
                "interface problems need a pair of bases and vice versa".into(),
            ))
        }
    };
    let system = WeightedSystem::from_rows(rows, basis.size())?;
    if system.rows() < system.cols() {
        return Err(Error::Underdetermined {
            rows: system.rows(),
            cols: system.cols(),
        });
    }
    Ok(system)
}

/// Least-squares solution of an assembled system.
pub fn solve_system(system: &WeightedSystem, basis: SolutionBasis, rcond: f64) -> Result<Solution> {
    let t0 = Instant::now();
    let r = lstsq(system.weighted_matrix(), &system.weighted_rhs(), rcond)?;
    let diagnostics = Diagnostics {
        residual_norm: r.residual_norm,
        rank: r.rank,
        sigma_max: r.sigma_max,
        rows: system.rows(),
        cols: system.cols(),
        solve_time_s: t0.elapsed().as_secs_f64(),
        ..Default::default()
    };
    debug!(
        "lstsq {}x{}: rank {}, residual {:.3e}",
        diagnostics.rows, diagnostics.cols, r.rank, r.residual_norm
    );
    Ok(Solution {
        basis,
        alpha: r.x.iter().copied().collect(),
        diagnostics,
    })
}

/// Assemble and solve a linear problem.
pub fn solve_llsq(problem: &ProblemSpec, basis: &SolutionBasis, collocation: &CollocationSet) -> Result<Solution> {
    let t0 = Instant::now();
    let system = assemble(problem, basis, collocation)?;
    let assembly = t0.elapsed().as_secs_f64();
    let mut sol = solve_system(&system, basis.clone(), DEFAULT_RCOND)?;
    sol.diagnostics.assembly_time_s = assembly;
    Ok(sol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    pub steps: usize,
    pub rcond: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            steps: 1,
            rcond: DEFAULT_RCOND,
        }
    }
}

/// Linearized rows at `alpha` from cached jets.
fn linearize(
    problem: &ProblemSpec,
    tasks: &[Task<'_>],
    jets: &[(Jets, Option<Jets>)],
    alpha: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>)> {
    let parts: Vec<Result<Vec<(Vec<f64>, f64, f64)>>> = tasks
        .par_chunks(CHUNK)
        .zip(jets.par_chunks(CHUNK))
        .map(|(tc, jc)| {
            let mut out = Vec::new();
            for (task, (j, partner)) in tc.iter().zip(jc) {
                let Task::Single { x, tag } = task else {
                    unreachable!("single-basis task list")
                };
                for (k, r) in nonlinear_residual_and_jacobian(problem, j, x, alpha, *tag, partner.as_ref())?
                    .into_iter()
                    .enumerate()
                {
                    let w = row_weight(&r.jacobian, k, r.group, x)?;
                    out.push((r.jacobian, r.residual, w));
                }
            }
            Ok(out)
        })
        .collect();
    let mut rows = Vec::new();
    for p in parts {
        rows.extend(p?);
    }
    let n = rows.len();
    let cols = alpha.len();
    let mut jac = DMatrix::zeros(n, cols);
    let mut res = DVector::zeros(n);
    let mut rho = DVector::zeros(n);
    for (j, (row, r, w)) in rows.into_iter().enumerate() {
        jac.row_mut(j).copy_from_slice(&row);
        res[j] = r;
        rho[j] = w;
    }
    Ok((jac, res, rho))
}

fn weighted_residual_of(
    problem: &ProblemSpec,
    tasks: &[Task<'_>],
    jets: &[(Jets, Option<Jets>)],
    alpha: &[f64],
    rho: &DVector<f64>,
) -> Result<f64> {
    let (_, res, _) = linearize(problem, tasks, jets, alpha)?;
    Ok(res.component_mul(rho).norm())
}

/// Newton-LLSQ: each step solves `rho J delta = -rho r(alpha)` in the least
/// squares sense with `rho` renormalising the rows of `J`. Stops early when
/// the weighted residual grows on two consecutive steps.
pub fn newton_llsq(
    problem: &ProblemSpec,
    basis: &SolutionBasis,
    collocation: &CollocationSet,
    alpha0: &[f64],
    cfg: NewtonConfig,
) -> Result<Solution> {
    if cfg.steps == 0 {
        return Err(Error::invalid("steps", "must be at least 1"));
    }
    if alpha0.len() != basis.size() {
        return Err(Error::DimensionMismatch {
            expected: basis.size(),
            got: alpha0.len(),
            context: "initial coefficients".into(),
        });
    }
    let t0 = Instant::now();
    if problem.linearity() == Linearity::Linear {
        let system = assemble(problem, basis, collocation)?;
        let assembly = t0.elapsed().as_secs_f64();
        let m = system.weighted_matrix();
        let mut alpha = DVector::from_column_slice(alpha0);
        let mut history = Vec::new();
        let mut last = None;
        let t1 = Instant::now();
        for step in 0..cfg.steps {
            let r = &system.matrix * &alpha - &system.rhs;
            history.push(r.component_mul(&system.rho).norm());
            let out = lstsq(m.clone(), &(-r.component_mul(&system.rho)), cfg.rcond).map_err(|e| match e {
                Error::RankZero { .. } => Error::SingularJacobian {
                    iteration: step,
                    rank: 0,
                    cols: system.cols(),
                },
                e => e,
            })?;
            alpha += &out.x;
            last = Some(out);
        }
        let last = last.expect("at least one step");
        let final_res = system.weighted_residual(alpha.as_slice());
        history.push(final_res);
        return Ok(Solution {
            basis: basis.clone(),
            alpha: alpha.iter().copied().collect(),
            diagnostics: Diagnostics {
                residual_norm: final_res,
                rank: last.rank,
                sigma_max: last.sigma_max,
                rows: system.rows(),
                cols: system.cols(),
                assembly_time_s: assembly,
                solve_time_s: t1.elapsed().as_secs_f64(),
                newton_steps: cfg.steps,
                residual_history: history,
                ambiguous_points: 0,
            },
        });
    }

    let SolutionBasis::Single(b) = basis else {
        return Err(Error::Unsupported("nonlinear interface problems".into()));
    };
    let tasks = single_tasks(collocation);
    let jets = single_jets(b, &tasks)?;
    let assembly = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let mut alpha = alpha0.to_vec();
    let mut history = Vec::new();
    let mut growth = 0;
    let mut diag = Diagnostics {
        assembly_time_s: assembly,
        ..Default::default()
    };
    for step in 0..cfg.steps {
        let (jac, res, rho) = linearize(problem, &tasks, &jets, &alpha)?;
        let (rows, cols) = jac.shape();
        if rows < cols {
            return Err(Error::Underdetermined { rows, cols });
        }
        let before = res.component_mul(&rho).norm();
        history.push(before);
        let mut wj = jac;
        for (j, mut row) in wj.row_iter_mut().enumerate() {
            row *= rho[j];
        }
        let out = lstsq(wj, &(-res.component_mul(&rho)), cfg.rcond).map_err(|e| match e {
            Error::RankZero { .. } => Error::SingularJacobian {
                iteration: step,
                rank: 0,
                cols,
            },
            e => e,
        })?;
        let candidate: Vec<f64> = alpha.iter().zip(out.x.iter()).map(|(a, d)| a + d).collect();
        let after = weighted_residual_of(problem, &tasks, &jets, &candidate, &rho)?;
        diag.rank = out.rank;
        diag.sigma_max = out.sigma_max;
        diag.rows = rows;
        diag.cols = cols;
        diag.newton_steps = step + 1;
        if after > before {
            growth += 1;
        } else {
            growth = 0;
        }
        alpha = candidate;
        diag.residual_norm = after;
        if growth >= 2 {
            warn!(
                "Newton-LLSQ residual grew on two consecutive steps; stopping at step {}",
                step + 1
            );
            break;
        }
    }
    history.push(diag.residual_norm);
    diag.residual_history = history;
    diag.solve_time_s = t1.elapsed().as_secs_f64();
    Ok(Solution {
        basis: basis.clone(),
        alpha,
        diagnostics: diag,
    })
}

/// Linear solve for linear problems, Newton-LLSQ from zero otherwise.
pub fn solve(
    problem: &ProblemSpec,
    basis: &SolutionBasis,
    collocation: &CollocationSet,
    alpha0: Option<&[f64]>,
    cfg: NewtonConfig,
) -> Result<Solution> {
    match (problem.linearity(), alpha0) {
        (Linearity::Linear, None) => solve_llsq(problem, basis, collocation),
        (_, a0) => {
            let zeros = vec![0.0; basis.size()];
            newton_llsq(problem, basis, collocation, a0.unwrap_or(&zeros), cfg)
        }
    }
}

fn combine(values: &DMatrix<f64>, alpha: &[f64]) -> Vec<f64> {
    let a = DVector::from_column_slice(alpha);
    (values.transpose() * a).iter().copied().collect()
}

/// `u(x) = sum_i alpha_i t_i(x)`; interface solutions use the basis of the
/// region each point falls in. Returns values and the number of points
/// within tolerance of the interface.
pub fn evaluate_solution_counting(sol: &Solution, points: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    const EVAL_CHUNK: usize = 2048;
    match &sol.basis {
        SolutionBasis::Single(b) => {
            let mut out = Vec::with_capacity(points.len());
            for chunk in points.chunks(EVAL_CHUNK) {
                out.extend(combine(&b.values_batch(chunk)?, &sol.alpha));
            }
            Ok((out, 0))
        }
        SolutionBasis::Interface { inner, outer, geometry } => {
            let (a1, a2) = sol.split_alpha();
            let mut ambiguous = 0;
            let mut idx = [Vec::new(), Vec::new()];
            for (k, x) in points.iter().enumerate() {
                let (region, amb) = geometry.classify(x);
                ambiguous += amb as usize;
                idx[(region == Region::Outer) as usize].push(k);
            }
            if ambiguous > 0 {
                warn!("{ambiguous} evaluation points lie on the interface; assigned to the outer region");
            }
            let mut out = vec![0.0; points.len()];
            for (which, (basis, alpha)) in [(inner, a1), (outer, a2)].into_iter().enumerate() {
                for chunk in idx[which].chunks(EVAL_CHUNK) {
                    let pts: Vec<Vec<f64>> = chunk.iter().map(|&k| points[k].clone()).collect();
                    for (k, v) in chunk.iter().zip(combine(&basis.values_batch(&pts)?, alpha)) {
                        out[*k] = v;
                    }
                }
            }
            Ok((out, ambiguous))
        }
    }
}

pub fn evaluate_solution(sol: &Solution, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    Ok(evaluate_solution_counting(sol, points)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::make_random_feature;
    use crate::problems::DataFn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_norm_weight() {
        let row = ResidualRow {
            coefficients: vec![3.0, 4.0],
            rhs: 1.0,
            group: Group::Pde,
        };
        let s = WeightedSystem::from_rows(vec![(row, vec![0.0, 0.0])], 2).unwrap();
        let w = s.weighted_matrix();
        assert!((s.rho[0] - 0.2).abs() < 1e-16);
        assert!((w[(0, 0)] - 0.6).abs() < 1e-15 && (w[(0, 1)] - 0.8).abs() < 1e-15);
        assert!((s.rho[0] * s.rho[0] - 1.0 / 25.0).abs() < 1e-16);
    }

    #[test]
    fn jump_row_weight() {
        let row = ResidualRow {
            coefficients: vec![-1.0, -2.0, 3.0, 4.0],
            rhs: 0.5,
            group: Group::JumpValue,
        };
        let s = WeightedSystem::from_rows(vec![(row, vec![0.65, 0.0])], 4).unwrap();
        assert!((s.rho[0] * s.rho[0] - 1.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn zero_row_is_reported() {
        let row = ResidualRow {
            coefficients: vec![0.0, 0.0],
            rhs: 1.0,
            group: Group::Dirichlet,
        };
        let err = WeightedSystem::from_rows(vec![(row, vec![0.0, 0.5])], 2).unwrap_err();
        assert!(matches!(err, Error::ZeroRow { ref group, .. } if group == "dirichlet"));
    }

    #[test]
    fn identity_and_mean() {
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let r = lstsq(DMatrix::identity(3, 3), &b, DEFAULT_RCOND).unwrap();
        assert!((r.x - &b).amax() < 1e-15);
        let r = lstsq(
            DMatrix::from_element(2, 1, 1.0),
            &DVector::from_vec(vec![0.0, 2.0]),
            DEFAULT_RCOND,
        )
        .unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-15);
        assert_eq!(r.rank, 1);
    }

    #[test]
    fn rank_zero_and_underdetermined() {
        assert!(matches!(
            lstsq(DMatrix::zeros(3, 2), &DVector::zeros(3), DEFAULT_RCOND),
            Err(Error::RankZero { .. })
        ));
        assert!(matches!(
            lstsq(DMatrix::zeros(2, 3), &DVector::zeros(2), DEFAULT_RCOND),
            Err(Error::Underdetermined { .. })
        ));
        let mut m = DMatrix::identity(3, 3);
        m[(1, 1)] = f64::NAN;
        assert!(matches!(
            lstsq(m, &DVector::zeros(3), DEFAULT_RCOND),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn normal_equations_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DMatrix::from_fn(200, 50, |_, _| rng.gen_range(-1.0..1.0));
        let b = DVector::from_fn(200, |_, _| rng.gen_range(-1.0..1.0));
        let r = lstsq(m.clone(), &b, DEFAULT_RCOND).unwrap();
        let g = m.transpose() * (&m * &r.x - &b);
        assert!(g.norm() < 1e-8 * (m.transpose() * &b).norm());
    }

    #[test]
    fn truncated_rank() {
        let mut m = DMatrix::from_fn(10, 3, |i, j| (i + j) as f64);
        m.set_column(2, &(m.column(0) + m.column(1)));
        let b = DVector::from_fn(10, |i, _| i as f64);
        let r = lstsq(m, &b, DEFAULT_RCOND).unwrap();
        assert_eq!(r.rank, 2);
    }

    #[test]
    fn linear_newton_equals_lstsq() {
        let p = ProblemSpec::advection(DataFn::Constant(1.0)).unwrap();
        let basis = SolutionBasis::single(make_random_feature(2, 1, 0, 40, 3).unwrap());
        let c = crate::problems::sample_collocation(
            &p,
            crate::problems::CollocationCounts {
                pde: 200,
                boundary: 50,
                initial: 50,
            },
            1,
        )
        .unwrap();
        let direct = solve_llsq(&p, &basis, &c).unwrap();
        let newton = newton_llsq(&p, &basis, &c, &vec![0.0; 40], NewtonConfig::default()).unwrap();
        for (a, b) in direct.alpha.iter().zip(&newton.alpha) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }
}
