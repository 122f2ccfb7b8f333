//! Phase-2: low-rank adaptation of the trunk on the PINN loss, then a fresh
//! phase-1 solve on the refrozen basis.
//!
//! PDE derivatives inside the loss are central finite differences of the
//! network output, so parameter gradients need only first-order reverse mode
//! through plain network evaluations.

use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assemble::{solve, NewtonConfig, Solution, SolutionBasis};
use crate::basis::{BasisSet, LoraParams, MlpSpec};
use crate::error::{Error, Result};
use crate::nn::{self, Adam};
use crate::problems::{CollocationSet, Family, ProblemSpec, Tag};

pub const DEFAULT_FD_STEP: f64 = 5e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Weight of the boundary/initial loss relative to the PDE loss.
    pub boundary_weight: f64,
    pub fd_step: f64,
    /// Number of leading trunk layers that receive adapters.
    pub layers: usize,
    pub rank: usize,
    pub seed: u64,
    /// Interior (and boundary) points drawn per iteration; all when `None`.
    pub batch_points: Option<usize>,
    pub log_every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 1e-3,
            boundary_weight: 1.0,
            fd_step: DEFAULT_FD_STEP,
            layers: 5,
            rank: 5,
            seed: 0,
            batch_points: None,
            log_every: 10,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::invalid("fd_step", "must be positive"));
        }
        if !(self.lr > 0.0) || !(self.boundary_weight >= 0.0) {
            return Err(Error::invalid("lr/boundary_weight", "need lr > 0 and weight >= 0"));
        }
        if self.log_every == 0 || self.batch_points == Some(0) {
            return Err(Error::invalid("log_every/batch_points", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss_pde: f64,
    pub loss_boundary: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptOutput {
    pub lora: LoraParams,
    /// The adapted basis (`LoraTrunk`).
    pub basis: BasisSet,
    pub alpha: Vec<f64>,
    pub trace: Vec<TraceRow>,
    /// Set when training stopped on a non-finite loss; the returned state is
    /// the last finite one.
    pub diverged_at: Option<usize>,
}

/// Trainable state: adapters followed by the coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Params {
    pub lora: LoraParams,
    pub alpha: Vec<f64>,
}

impl Phase2Params {
    pub fn pack(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for ad in &self.lora.adapters {
            p.extend_from_slice(ad.b.as_slice());
            p.extend_from_slice(ad.a.as_slice());
            p.extend_from_slice(ad.bias.as_slice());
        }
        p.extend_from_slice(&self.alpha);
        p
    }

    pub fn unpack(&mut self, src: &[f64]) {
        let mut k = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&src[k..k + dst.len()]);
            k += dst.len();
        };
        for ad in &mut self.lora.adapters {
            take(ad.b.as_mut_slice());
            take(ad.a.as_mut_slice());
            take(ad.bias.as_mut_slice());
        }
        take(&mut self.alpha);
    }
}

/// One residual as a linear combination of network outputs at stencil
/// points, plus the chain-rule data needed for its gradient.
struct ResidualTerm {
    /// Indices into the stencil point list.
    idx: Vec<usize>,
    kind: TermKind,
    boundary: bool,
}

enum TermKind {
    /// `u_t + a u_x` at stencil `[c, x+, x-, t+, t-]`.
    Advection { speed: f64 },
    /// `u_t - D u_xx - k u^2 - f`.
    DiffusionReaction { diffusion: f64, reaction: f64, source: f64 },
    /// `u_t + u u_x - mu u_xx`.
    Burgers { viscosity: f64 },
    /// `u - g` at one point.
    Value { target: f64 },
    /// `u(p0) - u(p1)`.
    Difference,
    /// `(u(p0) - u(p1)) / 2h - (u(p2) - u(p3)) / 2h`.
    SlopeDifference,
}

impl ResidualTerm {
    /// Residual and its derivative with respect to each stencil value.
    fn eval(&self, u: &[f64], h: f64) -> (f64, Vec<f64>) {
        let v: Vec<f64> = self.idx.iter().map(|&i| u[i]).collect();
        let c = 1.0 / (2.0 * h);
        let s = 1.0 / (h * h);
        match self.kind {
            TermKind::Advection { speed } => {
                let r = (v[3] - v[4]) * c + speed * (v[1] - v[2]) * c;
                (r, vec![0.0, speed * c, -speed * c, c, -c])
            }
            TermKind::DiffusionReaction {
                diffusion,
                reaction,
                source,
            } => {
                let uxx = (v[1] - 2.0 * v[0] + v[2]) * s;
                let r = (v[3] - v[4]) * c - diffusion * uxx - reaction * v[0] * v[0] - source;
                (
                    r,
                    vec![
                        2.0 * diffusion * s - 2.0 * reaction * v[0],
                        -diffusion * s,
                        -diffusion * s,
                        c,
                        -c,
                    ],
                )
            }
            TermKind::Burgers { viscosity } => {
                let ux = (v[1] - v[2]) * c;
                let uxx = (v[1] - 2.0 * v[0] + v[2]) * s;
                let r = (v[3] - v[4]) * c + v[0] * ux - viscosity * uxx;
                (
                    r,
                    vec![
                        ux + 2.0 * viscosity * s,
                        v[0] * c - viscosity * s,
                        -v[0] * c - viscosity * s,
                        c,
                        -c,
                    ],
                )
            }
            TermKind::Value { target } => (v[0] - target, vec![1.0]),
            TermKind::Difference => (v[0] - v[1], vec![1.0, -1.0]),
            TermKind::SlopeDifference => ((v[0] - v[1] - v[2] + v[3]) * c, vec![c, -c, -c, c]),
        }
    }
}

struct Stencils {
    points: Vec<[f64; 2]>,
    terms: Vec<ResidualTerm>,
}

fn build_stencils(
    problem: &ProblemSpec,
    collocation: &CollocationSet,
    interior: &[usize],
    boundary: &[usize],
    h: f64,
) -> Result<Stencils> {
    let mut points = Vec::new();
    let mut terms = Vec::new();
    let mut push = |pts: &[[f64; 2]]| -> Vec<usize> {
        let start = points.len();
        points.extend_from_slice(pts);
        (start..points.len()).collect()
    };
    for &k in interior {
        let p = &collocation.interior[k];
        let (x, t) = (p.x[0], p.x[1]);
        let kind = match &problem.family {
            Family::Advection { speed } => TermKind::Advection {
                speed: speed.eval(&p.x),
            },
            Family::DiffusionReaction {
                diffusion,
                reaction,
                source,
            } => TermKind::DiffusionReaction {
                diffusion: *diffusion,
                reaction: *reaction,
                source: source.eval(&p.x),
            },
            Family::Burgers { viscosity, .. } => TermKind::Burgers { viscosity: *viscosity },
            Family::EllipticInterface { .. } => {
                return Err(Error::Unsupported("phase-2 adaptation of interface problems".into()))
            }
        };
        let idx = push(&[[x, t], [x + h, t], [x - h, t], [x, t + h], [x, t - h]]);
        terms.push(ResidualTerm {
            idx,
            kind,
            boundary: false,
        });
    }
    for &k in boundary {
        let p = &collocation.boundary[k];
        let (x, t) = (p.x[0], p.x[1]);
        match p.tag {
            Tag::Dirichlet | Tag::Initial => {
                let idx = push(&[[x, t]]);
                terms.push(ResidualTerm {
                    idx,
                    kind: TermKind::Value {
                        target: problem.boundary_value(&p.x, p.tag),
                    },
                    boundary: true,
                });
            }
            Tag::PeriodicPair => {
                let idx = push(&[[0.0, t], [1.0, t]]);
                terms.push(ResidualTerm {
                    idx,
                    kind: TermKind::Difference,
                    boundary: true,
                });
                let idx = push(&[[h, t], [-h, t], [1.0 + h, t], [1.0 - h, t]]);
                terms.push(ResidualTerm {
                    idx,
                    kind: TermKind::SlopeDifference,
                    boundary: true,
                });
            }
            other => return Err(Error::Unsupported(format!("phase-2 boundary tag {other}"))),
        }
    }
    Ok(Stencils { points, terms })
}

/// `(loss_pde, loss_boundary, gradient)` of `loss_pde + w loss_boundary`
/// with respect to [`Phase2Params::pack`], over the selected points.
fn loss_and_gradient(
    trunk: &MlpSpec,
    params: &Phase2Params,
    stencils: &Stencils,
    cfg: &AdaptConfig,
) -> Result<(f64, f64, Vec<f64>)> {
    let merged = params.lora.merge(trunk)?;
    let x = DMatrix::from_fn(2, stencils.points.len(), |r, c| stencils.points[c][r]);
    let tape = nn::forward(merged.layers(), merged.activation(), &x, false);
    let alpha = nalgebra::DVector::from_column_slice(&params.alpha);
    let u: Vec<f64> = (tape.output.transpose() * &alpha).iter().copied().collect();
    let n_pde = stencils.terms.iter().filter(|t| !t.boundary).count().max(1) as f64;
    let n_bnd = stencils.terms.iter().filter(|t| t.boundary).count().max(1) as f64;
    let (mut loss_pde, mut loss_bnd) = (0.0, 0.0);
    let mut du = vec![0.0; u.len()];
    for term in &stencils.terms {
        let (r, dr) = term.eval(&u, cfg.fd_step);
        let scale = if term.boundary {
            loss_bnd += r * r / n_bnd;
            cfg.boundary_weight / n_bnd
        } else {
            loss_pde += r * r / n_pde;
            1.0 / n_pde
        };
        for (&i, d) in term.idx.iter().zip(dr) {
            du[i] += 2.0 * scale * r * d;
        }
    }
    let du = nalgebra::DVector::from_vec(du);
    let d_alpha = &tape.output * &du;
    let d_out = &alpha * du.transpose();
    let (grads, _) = nn::backward(merged.layers(), &tape, d_out, false);
    let mut g = Vec::new();
    for ad in &params.lora.adapters {
        let gw = &grads[ad.layer].weight;
        g.extend_from_slice((gw * ad.a.transpose()).as_slice());
        g.extend_from_slice((ad.b.transpose() * gw).as_slice());
        g.extend_from_slice(grads[ad.layer].bias.as_slice());
    }
    g.extend(d_alpha.iter());
    Ok((loss_pde, loss_bnd, g))
}

/// Full-batch phase-2 loss and gradient; exposed for gradient checks.
pub fn phase2_loss_and_gradient(
    trunk: &MlpSpec,
    params: &Phase2Params,
    problem: &ProblemSpec,
    collocation: &CollocationSet,
    cfg: &AdaptConfig,
) -> Result<(f64, Vec<f64>)> {
    let interior: Vec<usize> = (0..collocation.interior.len()).collect();
    let boundary: Vec<usize> = (0..collocation.boundary.len()).collect();
    let st = build_stencils(problem, collocation, &interior, &boundary, cfg.fd_step)?;
    let (lp, lb, g) = loss_and_gradient(trunk, params, &st, cfg)?;
    Ok((lp + cfg.boundary_weight * lb, g))
}

fn subset(n: usize, batch: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match batch {
        Some(b) if b < n => {
            let mut v = sample(rng, n, b).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Train adapters on the first `cfg.layers` trunk layers together with the
/// coefficients, starting from `alpha0` (typically a phase-1 solution).
pub fn adapt_trunk(
    trunk: &MlpSpec,
    problem: &ProblemSpec,
    collocation: &CollocationSet,
    cfg: &AdaptConfig,
    alpha0: &[f64],
) -> Result<AdaptOutput> {
    cfg.validate()?;
    if alpha0.len() != trunk.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: trunk.output_dim(),
            got: alpha0.len(),
            context: "phase-2 initial coefficients".into(),
        });
    }
    if trunk.input_dim() != 2 {
        return Err(Error::invalid("trunk", "phase-2 expects a space-time trunk"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lora = LoraParams::init(trunk, cfg.rank, cfg.layers.min(trunk.depth()), &mut rng)?;
    let mut params = Phase2Params {
        lora,
        alpha: alpha0.to_vec(),
    };
    let mut flat = params.pack();
    let mut last_good = flat.clone();
    let mut opt = Adam::new(flat.len(), cfg.lr);
    let full = cfg.batch_points.is_none();
    let fixed = if full {
        let interior: Vec<usize> = (0..collocation.interior.len()).collect();
        let boundary: Vec<usize> = (0..collocation.boundary.len()).collect();
        Some(build_stencils(problem, collocation, &interior, &boundary, cfg.fd_step)?)
    } else {
        None
    };
    let t0 = Instant::now();
    let mut trace = Vec::new();
    let mut diverged_at = None;
    for it in 0..cfg.iterations {
        let batch;
        let st = match &fixed {
            Some(s) => s,
            None => {
                let interior = subset(collocation.interior.len(), cfg.batch_points, &mut rng);
                let boundary = subset(collocation.boundary.len(), cfg.batch_points, &mut rng);
                batch = build_stencils(problem, collocation, &interior, &boundary, cfg.fd_step)?;
                &batch
            }
        };
        params.unpack(&flat);
        let (lp, lb, g) = loss_and_gradient(trunk, &params, st, cfg)?;
        if !(lp.is_finite() && lb.is_finite()) || g.iter().any(|v| !v.is_finite()) {
            warn!("phase-2 loss became non-finite at iteration {it}; keeping the last finite state");
            diverged_at = Some(it);
            flat = last_good.clone();
            break;
        }
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            trace.push(TraceRow {
                iteration: it,
                loss_pde: lp,
                loss_boundary: lb,
                wall_time_s: t0.elapsed().as_secs_f64(),
            });
        }
        if it % 100 == 0 {
            info!("phase-2 iteration {it}: loss_pde {lp:.4e}, loss_boundary {lb:.4e}");
        }
        last_good.copy_from_slice(&flat);
        opt.step(&mut flat, &g);
    }
    params.unpack(&flat);
    let basis = BasisSet::lora_trunk(trunk.clone(), params.lora.clone())?;
    Ok(AdaptOutput {
        lora: params.lora,
        basis,
        alpha: params.alpha,
        trace,
        diverged_at,
    })
}

/// Refreeze the adapted basis and solve phase-1 on it.
pub fn finalize(
    adapted: &AdaptOutput,
    problem: &ProblemSpec,
    collocation: &CollocationSet,
    newton: NewtonConfig,
) -> Result<Solution> {
    let alpha0 = match problem.linearity() {
        crate::problems::Linearity::Linear => None,
        crate::problems::Linearity::Nonlinear => Some(adapted.alpha.as_slice()),
    };
    solve(
        problem,
        &SolutionBasis::single(adapted.basis.clone()),
        collocation,
        alpha0,
        newton,
    )
}

/// `iteration,loss_pde,loss_boundary,wall_time_s`
pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::field_sampler::csv_err(path, e))?;
    for row in trace {
        w.serialize(row).map_err(|e| crate::field_sampler::csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Order-dependent checksum of every weight and bias; used to confirm the
/// pretrained trunk is untouched by training.
pub fn weights_checksum(net: &MlpSpec) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for l in net.layers() {
        for v in l.weight.iter().chain(l.bias.iter()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assemble::evaluate_solution;
    use crate::basis::Activation;
    use crate::problems::{sample_collocation, CollocationCounts, DataFn};

    fn small_trunk() -> MlpSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        MlpSpec::new(nn::glorot_layers(&[2, 8, 8, 6], &mut rng), Activation::Tanh).unwrap()
    }

    fn counts() -> CollocationCounts {
        CollocationCounts {
            pde: 40,
            boundary: 10,
            initial: 10,
        }
    }

    #[test]
    fn zero_iterations_reproduce_the_trunk() {
        let trunk = small_trunk();
        let p = ProblemSpec::advection(DataFn::Constant(1.3)).unwrap();
        let c = sample_collocation(&p, counts(), 1).unwrap();
        let cfg = AdaptConfig {
            iterations: 0,
            layers: 2,
            rank: 2,
            ..Default::default()
        };
        let out = adapt_trunk(&trunk, &p, &c, &cfg, &[0.1; 6]).unwrap();
        let pts = vec![vec![0.2, 0.7], vec![0.9, 0.1]];
        assert_eq!(
            out.basis.values_batch(&pts).unwrap(),
            BasisSet::trunk(trunk.clone()).values_batch(&pts).unwrap()
        );
        let frozen = crate::assemble::solve_llsq(&p, &SolutionBasis::single(BasisSet::trunk(trunk)), &c).unwrap();
        let fin = finalize(&out, &p, &c, NewtonConfig::default()).unwrap();
        assert_eq!(frozen.alpha, fin.alpha);
    }

    fn gradient_check(problem: &ProblemSpec, weight: f64) {
        let trunk = small_trunk();
        let c = sample_collocation(problem, counts(), 2).unwrap();
        let cfg = AdaptConfig {
            layers: 3,
            rank: 2,
            boundary_weight: weight,
            fd_step: 1e-2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lora = LoraParams::init(&trunk, 2, 3, &mut rng).unwrap();
        for ad in &mut lora.adapters {
            ad.b.iter_mut()
                .enumerate()
                .for_each(|(k, v)| *v = 0.1 * (k as f64).sin());
        }
        let params = Phase2Params {
            lora,
            alpha: (0..6).map(|k| 0.3 * (k as f64 + 1.0).cos()).collect(),
        };
        let (_, g) = phase2_loss_and_gradient(&trunk, &params, problem, &c, &cfg).unwrap();
        let p0 = params.pack();
        let dir: Vec<f64> = (0..p0.len()).map(|k| ((k as f64) * 0.77 + 0.1).sin()).collect();
        let eps = 1e-6;
        let at = |s: f64| {
            let mut q = params.clone();
            q.unpack(&p0.iter().zip(&dir).map(|(a, d)| a + s * d).collect::<Vec<_>>());
            phase2_loss_and_gradient(&trunk, &q, problem, &c, &cfg).unwrap().0
        };
        let fd = (at(eps) - at(-eps)) / (2.0 * eps);
        let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() < 1e-4 * an.abs(), "fd {fd} vs backprop {an}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(&ProblemSpec::advection(DataFn::Constant(1.5)).unwrap(), 10.0);
        gradient_check(
            &ProblemSpec::diffusion_reaction(0.01, 0.5, DataFn::Constant(0.3)).unwrap(),
            1.0,
        );
        gradient_check(&ProblemSpec::burgers(0.05, DataFn::Constant(0.2)).unwrap(), 1.0);
    }

    #[test]
    fn training_reduces_loss_and_keeps_trunk_frozen() {
        let trunk = small_trunk();
        let before = weights_checksum(&trunk);
        let p = ProblemSpec::advection(DataFn::Constant(1.0)).unwrap();
        let c = sample_collocation(&p, counts(), 3).unwrap();
        let phase1 =
            crate::assemble::solve_llsq(&p, &SolutionBasis::single(BasisSet::trunk(trunk.clone())), &c).unwrap();
        let cfg = AdaptConfig {
            iterations: 200,
            layers: 3,
            rank: 2,
            boundary_weight: 10.0,
            log_every: 1,
            ..Default::default()
        };
        let out = adapt_trunk(&trunk, &p, &c, &cfg, &phase1.alpha).unwrap();
        let first = &out.trace[0];
        let last = out.trace.last().unwrap();
        assert!(last.loss_pde + 10.0 * last.loss_boundary < first.loss_pde + 10.0 * first.loss_boundary);
        assert_eq!(weights_checksum(&trunk), before);
        let fin = finalize(&out, &p, &c, NewtonConfig::default()).unwrap();
        assert!(evaluate_solution(&fin, &[vec![0.5, 0.5]]).unwrap()[0].is_finite());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&out.trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iteration,loss_pde,loss_boundary,wall_time_s\n"));
        assert_eq!(text.lines().count(), out.trace.len() + 1);
    }

    #[test]
    fn full_rank_adapter_spans_every_update() {
        let trunk = small_trunk();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lora = LoraParams::init(&trunk, 8, 1, &mut rng).unwrap();
        let ad = &lora.adapters[0];
        // r = min(d_l, d_{l-1}) = 2: A is 2 x 2 and generically invertible, so
        // B A reaches any 8 x 2 update.
        assert_eq!(ad.rank(), 2);
        assert!(ad.a.clone().try_inverse().is_some());
    }
}
