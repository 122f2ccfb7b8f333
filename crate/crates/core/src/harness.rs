//! Experiment orchestration: declarative configs, presets, error metrics,
//! single runs with on-disk artifacts, parameter sweeps and pre-training.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_trunk, finalize, write_trace_csv, AdaptConfig, TraceRow};
use crate::assemble::{evaluate_solution, solve, Diagnostics, NewtonConfig, Solution, SolutionBasis, DEFAULT_RCOND};
use crate::basis::{compute_scale_set, make_pascal_basis, make_random_feature, BasisSet, MlpSpec};
use crate::error::{Error, Result};
use crate::field_sampler::{to_coefficient, GrfSampler, GrfSpec, GridFunction};
use crate::oracle::{solve_advection_lw, solve_burgers, solve_diffusion_reaction, Grid, GridSolution, InterfaceExact};
use crate::pretrain::{
    generate_dataset, interface_input, mean_relative_error, train_deeponet, train_ionet, DatasetConfig, DatasetFamily,
    DeepOnetSpec, IonetSpec, NetShape, OperatorModel, TrainConfig,
};
use crate::problems::{sample_collocation, Astroid, CollocationCounts, CollocationSet, DataFn, ProblemSpec};
use crate::weight_io::{self, Model, WeightFile};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Collocation seed.
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemConfig,
    pub basis: BasisConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub phase2: Option<AdaptConfig>,
    /// Family defaults when absent.
    #[serde(default)]
    pub collocation: Option<CollocationCounts>,
    #[serde(default)]
    pub test_grid: TestGridConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Advection {
        coefficient: InputConfig,
    },
    DiffusionReaction {
        #[serde(default = "default_dr")]
        diffusion: f64,
        #[serde(default = "default_dr")]
        reaction: f64,
        source: InputConfig,
    },
    Burgers {
        #[serde(default = "default_dr")]
        viscosity: f64,
        initial: InputConfig,
    },
    Interface {
        #[serde(default = "default_m")]
        m: f64,
    },
}

fn default_dr() -> f64 {
    0.01
}

fn default_m() -> f64 {
    1.0
}

/// An input function of the first coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputConfig {
    /// RBF-kernel GRF draw on `sensors` equispaced points. For advection the
    /// draw is shifted into a positive coefficient.
    Grf {
        length_scale: f64,
        #[serde(default = "default_sensors")]
        sensors: usize,
        #[serde(default)]
        seed: u64,
    },
    PeriodicGrf {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_tau")]
        tau: f64,
        #[serde(default = "default_exponent")]
        exponent: f64,
        #[serde(default = "default_periodic_points")]
        grid_points: usize,
        #[serde(default)]
        seed: u64,
    },
    Constant {
        value: f64,
    },
}

fn default_sensors() -> usize {
    crate::field_sampler::DEFAULT_SENSORS
}
fn default_sigma() -> f64 {
    25.0
}
fn default_tau() -> f64 {
    5.0
}
fn default_exponent() -> f64 {
    4.0
}
fn default_periodic_points() -> usize {
    513
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisConfig {
    /// Random-weight features. For the interface problem `dof` is the total;
    /// the inner and outer nets get `dof - dof / 2` and `dof / 2` features
    /// (seeds `seed` and `seed + 1`).
    RandomFeature {
        depth: usize,
        #[serde(default = "default_hidden")]
        width_hidden: usize,
        dof: usize,
        #[serde(default)]
        seed: u64,
    },
    Pascal {
        max_degree: usize,
    },
    /// Trunk(s) of a stored model, optionally expanded over `scales` input
    /// scalings. DeepONet and IONet branches supply the Newton warm start.
    WeightFile {
        path: PathBuf,
        #[serde(default = "default_scales")]
        scales: usize,
        #[serde(default = "default_true")]
        warm_start: bool,
    },
}

fn default_hidden() -> usize {
    100
}
fn default_scales() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub newton_steps: usize,
    pub rcond: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            newton_steps: 1,
            rcond: DEFAULT_RCOND,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestGridConfig {
    /// Nodes per axis; 129 for advection and diffusion-reaction, 101 otherwise.
    pub n: Option<usize>,
    /// Oracle grid refinement factor relative to the test grid.
    pub reference_refinement: Option<usize>,
}

const DEFAULT_REFINEMENT: usize = 4;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse by extension: `.json` as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        match &self.problem {
            ProblemConfig::Advection { coefficient: i } => validate_input(i)?,
            ProblemConfig::DiffusionReaction { source: i, .. } => validate_input(i)?,
            ProblemConfig::Burgers { initial: i, .. } => validate_input(i)?,
            ProblemConfig::Interface { m } => {
                if !(*m > 0.0 && m.is_finite()) {
                    return Err(Error::Config("interface parameter m must be positive".into()));
                }
            }
        }
        match &self.basis {
            BasisConfig::RandomFeature { depth, dof, .. } => {
                let min_dof = if matches!(self.problem, ProblemConfig::Interface { .. }) {
                    2
                } else {
                    1
                };
                if *dof < min_dof || *depth == 0 {
                    return Err(Error::Config(format!(
                        "random_feature needs dof >= {min_dof} and depth >= 1"
                    )));
                }
            }
            BasisConfig::Pascal { .. } => {}
            BasisConfig::WeightFile { path, scales, .. } => {
                if *scales == 0 {
                    return Err(Error::Config("scales must be at least 1".into()));
                }
                if !path.is_file() {
                    return Err(Error::Config(format!("weight file {} does not exist", path.display())));
                }
            }
        }
        if self.solver.newton_steps == 0 || !(self.solver.rcond > 0.0 && self.solver.rcond < 1.0) {
            return Err(Error::Config("solver needs newton_steps >= 1 and 0 < rcond < 1".into()));
        }
        if let Some(p2) = &self.phase2 {
            p2.validate().map_err(|e| Error::Config(e.to_string()))?;
            match &self.basis {
                BasisConfig::WeightFile { scales: 1, .. } => {}
                _ => {
                    return Err(Error::Config(
                        "phase2 requires a weight_file basis with scales = 1".into(),
                    ))
                }
            }
            if matches!(self.problem, ProblemConfig::Interface { .. }) {
                return Err(Error::Config(
                    "phase2 is not available for the interface problem".into(),
                ));
            }
        }
        if let Some(n) = self.test_grid.n {
            if n < 3 {
                return Err(Error::Config("test grid needs at least 3 nodes per axis".into()));
            }
        }
        if self.test_grid.reference_refinement == Some(0) {
            return Err(Error::Config("reference_refinement must be at least 1".into()));
        }
        Ok(())
    }

    pub fn family_name(&self) -> &'static str {
        match self.problem {
            ProblemConfig::Advection { .. } => "advection",
            ProblemConfig::DiffusionReaction { .. } => "diffusion_reaction",
            ProblemConfig::Burgers { .. } => "burgers",
            ProblemConfig::Interface { .. } => "interface",
        }
    }

    pub fn test_grid(&self) -> Grid {
        let interface = matches!(self.problem, ProblemConfig::Interface { .. });
        let fine = matches!(
            self.problem,
            ProblemConfig::Advection { .. } | ProblemConfig::DiffusionReaction { .. }
        );
        let n = self.test_grid.n.unwrap_or(if fine { 129 } else { 101 });
        if interface {
            Grid::symmetric(n)
        } else {
            Grid::square(n)
        }
    }

    fn reference_grid(&self) -> Grid {
        let g = self.test_grid();
        let r = self.test_grid.reference_refinement.unwrap_or(DEFAULT_REFINEMENT);
        Grid::square((g.nx - 1) * r + 1)
    }
}

fn validate_input(i: &InputConfig) -> Result<()> {
    let ok = match i {
        InputConfig::Grf {
            length_scale, sensors, ..
        } => *length_scale > 0.0 && *sensors >= 2,
        InputConfig::PeriodicGrf {
            sigma,
            tau,
            exponent,
            grid_points,
            ..
        } => *sigma > 0.0 && *tau > 0.0 && *exponent > 0.5 && *grid_points >= 3,
        InputConfig::Constant { value } => value.is_finite(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid input function settings {i:?}")))
    }
}

// ---------------------------------------------------------------------------
// Presets

pub const PRESETS: [&str; 4] = ["example1", "example2", "example3", "example4"];

/// Random-feature baselines for the four benchmark problems.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (problem, basis) = match name {
        "example1" => (
            ProblemConfig::Advection {
                coefficient: InputConfig::Grf {
                    length_scale: 0.2,
                    sensors: default_sensors(),
                    seed: 0,
                },
            },
            rf(2, 500, 700),
        ),
        "example2" => (
            ProblemConfig::DiffusionReaction {
                diffusion: 0.01,
                reaction: 0.01,
                source: InputConfig::Grf {
                    length_scale: 0.2,
                    sensors: default_sensors(),
                    seed: 0,
                },
            },
            rf(3, 100, 500),
        ),
        "example3" => (
            ProblemConfig::Burgers {
                viscosity: 0.01,
                initial: InputConfig::PeriodicGrf {
                    sigma: default_sigma(),
                    tau: default_tau(),
                    exponent: default_exponent(),
                    grid_points: default_periodic_points(),
                    seed: 0,
                },
            },
            rf(2, 500, 500),
        ),
        "example4" => (ProblemConfig::Interface { m: 1.0 }, rf(2, 100, 1000)),
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(ExperimentConfig {
        name: name.into(),
        seed: 0,
        problem,
        basis,
        solver: SolverConfig::default(),
        phase2: None,
        collocation: None,
        test_grid: TestGridConfig::default(),
        out_dir: None,
    })
}

fn rf(depth: usize, width_hidden: usize, dof: usize) -> BasisConfig {
    BasisConfig::RandomFeature {
        depth,
        width_hidden,
        dof,
        seed: 0,
    }
}

// ---------------------------------------------------------------------------
// Sweep axes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Dof,
    Beta,
    M,
    Mu,
    Scales,
    Rank,
    Layers,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Dof => "dof",
            SweepAxis::Beta => "beta",
            SweepAxis::M => "m",
            SweepAxis::Mu => "mu",
            SweepAxis::Scales => "scales",
            SweepAxis::Rank => "rank",
            SweepAxis::Layers => "layers",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dof" => SweepAxis::Dof,
            "beta" => SweepAxis::Beta,
            "m" => SweepAxis::M,
            "mu" => SweepAxis::Mu,
            "scales" | "j" => SweepAxis::Scales,
            "rank" | "r" => SweepAxis::Rank,
            "layers" | "l" => SweepAxis::Layers,
            _ => return Err(Error::Config(format!("unknown sweep axis `{s}`"))),
        })
    }
}

fn as_count(axis: SweepAxis, value: f64) -> Result<usize> {
    if value >= 1.0 && value.fract() == 0.0 && value < 1e9 {
        Ok(value as usize)
    } else {
        Err(Error::Config(format!("{axis} must be a positive integer, got {value}")))
    }
}

/// Set one swept parameter on `cfg`.
pub fn apply_axis(cfg: &mut ExperimentConfig, axis: SweepAxis, value: f64) -> Result<()> {
    let mismatch = || Error::Config(format!("axis `{axis}` does not apply to this configuration"));
    match axis {
        SweepAxis::Dof => match &mut cfg.basis {
            BasisConfig::RandomFeature { dof, .. } => *dof = as_count(axis, value)?,
            _ => return Err(mismatch()),
        },
        SweepAxis::Beta => {
            let input = match &mut cfg.problem {
                ProblemConfig::Advection { coefficient: i }
                | ProblemConfig::DiffusionReaction { source: i, .. }
                | ProblemConfig::Burgers { initial: i, .. } => i,
                ProblemConfig::Interface { .. } => return Err(mismatch()),
            };
            match input {
                InputConfig::Grf { length_scale, .. } if value > 0.0 => *length_scale = value,
                _ => return Err(mismatch()),
            }
        }
        SweepAxis::M => match &mut cfg.problem {
            ProblemConfig::Interface { m } if value > 0.0 => *m = value,
            _ => return Err(mismatch()),
        },
        SweepAxis::Mu => match &mut cfg.problem {
            ProblemConfig::Burgers { viscosity, .. } if value > 0.0 => *viscosity = value,
            _ => return Err(mismatch()),
        },
        SweepAxis::Scales => match &mut cfg.basis {
            BasisConfig::WeightFile { scales, .. } => *scales = as_count(axis, value)?,
            _ => return Err(mismatch()),
        },
        SweepAxis::Rank => match &mut cfg.phase2 {
            Some(p) => p.rank = as_count(axis, value)?,
            None => return Err(mismatch()),
        },
        SweepAxis::Layers => match &mut cfg.phase2 {
            Some(p) => p.layers = as_count(axis, value)?,
            None => return Err(mismatch()),
        },
    }
    Ok(())
}

/// Offset every seed that is not tied to the input function by `repeat`.
pub fn with_repeat(cfg: &ExperimentConfig, repeat: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.seed = c.seed.wrapping_add(repeat);
    if let BasisConfig::RandomFeature { seed, .. } = &mut c.basis {
        *seed = seed.wrapping_add(repeat);
    }
    if let Some(p) = &mut c.phase2 {
        p.seed = p.seed.wrapping_add(repeat);
    }
    c
}

// ---------------------------------------------------------------------------
// Metrics

/// Reference solution on the test grid.
#[derive(Clone)]
pub enum Reference {
    Grid(GridSolution),
    Exact(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl Reference {
    pub fn values(&self, points: &[Vec<f64>]) -> Vec<f64> {
        match self {
            Reference::Grid(g) => points.iter().map(|p| g.sample(p[0], p[1])).collect(),
            Reference::Exact(f) => points.iter().map(|p| f(p)).collect(),
        }
    }
}

impl fmt::Debug for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reference::Grid(g) => write!(f, "Reference::Grid({})", g.scheme),
            Reference::Exact(_) => f.write_str("Reference::Exact"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    /// `None` when the reference vanishes on the whole grid.
    pub rel_l2: Option<f64>,
    pub l_inf: f64,
    pub n_test: usize,
    pub solve_time_s: f64,
    pub assembly_time_s: f64,
    pub dof: usize,
    pub diagnostics: Diagnostics,
}

/// Relative L2 and max-abs error between two value lists.
pub fn error_metrics(reference: &[f64], values: &[f64]) -> Result<(Option<f64>, f64)> {
    if reference.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: values.len(),
            context: "error metric inputs".into(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut l_inf = 0.0f64;
    for (r, v) in reference.iter().zip(values) {
        let d = v - r;
        num += d * d;
        den += r * r;
        l_inf = l_inf.max(d.abs());
    }
    if !(num.is_finite() && den.is_finite()) {
        return Err(Error::NonFinite("error metrics".into()));
    }
    let rel = (den > 0.0).then(|| (num / den).sqrt());
    Ok((rel, l_inf))
}

pub fn compute_errors(reference: &Reference, sol: &Solution, grid: &Grid) -> Result<ErrorReport> {
    let points = grid.points();
    let truth = reference.values(&points);
    let values = evaluate_solution(sol, &points)?;
    let (rel_l2, l_inf) = error_metrics(&truth, &values)?;
    Ok(ErrorReport {
        rel_l2,
        l_inf,
        n_test: points.len(),
        solve_time_s: sol.diagnostics.solve_time_s,
        assembly_time_s: sol.diagnostics.assembly_time_s,
        dof: sol.basis.size(),
        diagnostics: sol.diagnostics.clone(),
    })
}

// ---------------------------------------------------------------------------
// Running one experiment

/// Everything a run produces, before it is written to disk.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub report: ErrorReport,
    pub points: Vec<Vec<f64>>,
    pub reference: Vec<f64>,
    pub values: Vec<f64>,
    pub phase2: Option<Phase2Summary>,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Summary {
    pub trace: Vec<TraceRow>,
    pub diverged_at: Option<usize>,
    pub iterations: usize,
    /// Error of the phase-1 solution that seeded phase 2.
    pub phase1_rel_l2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub reference_s: f64,
    pub basis_s: f64,
    pub assembly_s: f64,
    pub solve_s: f64,
    pub phase2_s: f64,
    pub evaluate_s: f64,
    pub total_s: f64,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(_) | Error::Stage { .. } => e,
        other => Error::Stage {
            stage: name,
            source: Box::new(other),
        },
    })
}

/// Concrete input function plus the values a branch net expects.
enum Input {
    Grid(GridFunction),
    Periodic(crate::field_sampler::PeriodicField),
    Constant(f64),
}

impl Input {
    fn build(cfg: &InputConfig, coefficient: bool) -> Result<Self> {
        Ok(match cfg {
            InputConfig::Grf {
                length_scale,
                sensors,
                seed,
            } => {
                let v = GrfSampler::new(GrfSpec::rbf(*length_scale, *sensors, *seed))?.sample_rbf()?;
                Input::Grid(if coefficient { to_coefficient(&v) } else { v })
            }
            InputConfig::PeriodicGrf {
                sigma,
                tau,
                exponent,
                grid_points,
                seed,
            } => Input::Periodic(
                GrfSampler::new(GrfSpec::periodic(*sigma, *tau, *exponent, *grid_points, *seed))?.sample_periodic()?,
            ),
            InputConfig::Constant { value } => Input::Constant(*value),
        })
    }

    fn eval(&self, x: f64) -> f64 {
        match self {
            Input::Grid(g) => g.eval(x),
            Input::Periodic(p) => p.eval(x),
            Input::Constant(c) => *c,
        }
    }

    fn data(&self) -> DataFn {
        match self {
            Input::Grid(g) => DataFn::Grid(g.clone()),
            Input::Periodic(p) => DataFn::Periodic(p.clone()),
            Input::Constant(c) => DataFn::Constant(*c),
        }
    }
}

struct Setup {
    problem: ProblemSpec,
    input: Option<Input>,
}

fn build_problem(cfg: &ExperimentConfig) -> Result<Setup> {
    Ok(match &cfg.problem {
        ProblemConfig::Advection { coefficient } => {
            let input = Input::build(coefficient, true)?;
            Setup {
                problem: ProblemSpec::advection(input.data())?,
                input: Some(input),
            }
        }
        ProblemConfig::DiffusionReaction {
            diffusion,
            reaction,
            source,
        } => {
            let input = Input::build(source, false)?;
            Setup {
                problem: ProblemSpec::diffusion_reaction(*diffusion, *reaction, input.data())?,
                input: Some(input),
            }
        }
        ProblemConfig::Burgers { viscosity, initial } => {
            let input = Input::build(initial, false)?;
            Setup {
                problem: ProblemSpec::burgers(*viscosity, input.data())?,
                input: Some(input),
            }
        }
        ProblemConfig::Interface { m } => Setup {
            problem: ProblemSpec::interface(2.0, 1.0, Arc::new(InterfaceExact::new(*m)?))?,
            input: None,
        },
    })
}

fn build_reference(cfg: &ExperimentConfig, setup: &Setup) -> Result<Reference> {
    let grid = cfg.reference_grid();
    let input = setup.input.as_ref();
    let f = |x: f64| input.map_or(0.0, |i| i.eval(x));
    Ok(match &cfg.problem {
        ProblemConfig::Advection { .. } => Reference::Grid(solve_advection_lw(&f, grid, None)?),
        ProblemConfig::DiffusionReaction {
            diffusion, reaction, ..
        } => Reference::Grid(solve_diffusion_reaction(&|x, _| f(x), *diffusion, *reaction, grid)?),
        ProblemConfig::Burgers { viscosity, .. } => Reference::Grid(solve_burgers(&f, *viscosity, grid)?),
        ProblemConfig::Interface { m } => {
            let exact = InterfaceExact::new(*m)?;
            Reference::Exact(Arc::new(move |x: &[f64]| exact.u(x)))
        }
    })
}

struct BuiltBasis {
    basis: SolutionBasis,
    warm_start: Option<Vec<f64>>,
    /// Trunk available for phase-2 adaptation.
    trunk: Option<MlpSpec>,
}

fn expand(trunk: &MlpSpec, scales: usize, coll: &CollocationSet) -> Result<BasisSet> {
    if scales == 1 {
        return Ok(BasisSet::trunk(trunk.clone()));
    }
    let pts: Vec<Vec<f64>> = coll.interior.iter().map(|b| b.x.clone()).collect();
    Ok(BasisSet::scaled_union(
        trunk.clone(),
        compute_scale_set(trunk, scales, &pts)?,
    ))
}

/// Branch coefficients followed by zeros up to `len`.
fn padded(b: Vec<f64>, len: usize) -> Vec<f64> {
    b.into_iter().chain(std::iter::repeat(0.0)).take(len).collect()
}

fn build_basis(cfg: &ExperimentConfig, setup: &Setup, coll: &CollocationSet) -> Result<BuiltBasis> {
    let geometry = setup.problem.geometry().copied();
    let pair = |inner: BasisSet, outer: BasisSet| match geometry {
        Some(g) => SolutionBasis::interface(inner, outer, g),
        None => SolutionBasis::single(inner),
    };
    match &cfg.basis {
        BasisConfig::RandomFeature {
            depth,
            width_hidden,
            dof,
            seed,
        } => {
            let make = |n: usize, s: u64| make_random_feature(2, *depth, *width_hidden, n, s);
            let basis = match geometry {
                Some(g) => {
                    SolutionBasis::interface(make(dof - dof / 2, *seed)?, make(dof / 2, seed.wrapping_add(1))?, g)
                }
                None => SolutionBasis::single(make(*dof, *seed)?),
            };
            Ok(BuiltBasis {
                basis,
                warm_start: None,
                trunk: None,
            })
        }
        BasisConfig::Pascal { max_degree } => Ok(BuiltBasis {
            basis: pair(make_pascal_basis(*max_degree), make_pascal_basis(*max_degree)),
            warm_start: None,
            trunk: None,
        }),
        BasisConfig::WeightFile {
            path,
            scales,
            warm_start,
        } => {
            let model = weight_io::load_model(path)?;
            match &model {
                Model::Ionet(io) => {
                    let Some(g) = geometry else {
                        return Err(Error::Config(
                            "IONet weight files only apply to the interface problem".into(),
                        ));
                    };
                    let inner = expand(&io.trunk_inner, *scales, coll)?;
                    let outer = expand(&io.trunk_outer, *scales, coll)?;
                    let (ni, no) = (inner.size(), outer.size());
                    let basis = SolutionBasis::interface(inner, outer, g);
                    let ws = match (&cfg.problem, *warm_start) {
                        (ProblemConfig::Interface { m }, true) => {
                            let b = io.branch_output(&interface_input(*m, &io.sensors_inner, &io.sensors_outer)?)?;
                            Some(padded(b.clone(), ni).into_iter().chain(padded(b, no)).collect())
                        }
                        _ => None,
                    };
                    Ok(BuiltBasis {
                        basis,
                        warm_start: ws,
                        trunk: None,
                    })
                }
                Model::Mlp(_) | Model::DeepOnet(_) => {
                    let trunk = model.trunk().expect("single-trunk model");
                    if trunk.input_dim() != 2 {
                        return Err(Error::Config(format!(
                            "trunk takes {}-D input; the solvers need 2-D coordinates",
                            trunk.input_dim()
                        )));
                    }
                    let b = expand(trunk, *scales, coll)?;
                    let size = b.size();
                    let basis = match geometry {
                        Some(g) => SolutionBasis::interface(b.clone(), b, g),
                        None => SolutionBasis::single(b),
                    };
                    let ws = match (&model, &setup.input, *warm_start, geometry) {
                        (Model::DeepOnet(d), Some(input), true, None) => {
                            Some(padded(deeponet_warm_start(d, input)?, size))
                        }
                        _ => None,
                    };
                    Ok(BuiltBasis {
                        basis,
                        warm_start: ws,
                        trunk: Some(trunk.clone()),
                    })
                }
            }
        }
    }
}

fn deeponet_warm_start(d: &DeepOnetSpec, input: &Input) -> Result<Vec<f64>> {
    let v: Vec<f64> = d.sensors.iter().map(|s| input.eval(s[0])).collect();
    d.branch_output(&v)
}

/// Sample, assemble, solve, optionally adapt, and evaluate; nothing is
/// written to disk.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let t_total = Instant::now();
    let mut timings = Timings::default();

    let setup = stage("problem", build_problem(cfg))?;
    let counts = cfg
        .collocation
        .unwrap_or_else(|| CollocationCounts::default_for(&setup.problem));
    let coll = stage("collocation", sample_collocation(&setup.problem, counts, cfg.seed))?;

    let t = Instant::now();
    let reference = stage("reference", build_reference(cfg, &setup))?;
    timings.reference_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let built = stage("basis", build_basis(cfg, &setup, &coll))?;
    timings.basis_s = t.elapsed().as_secs_f64();

    let newton = NewtonConfig {
        steps: cfg.solver.newton_steps,
        rcond: cfg.solver.rcond,
    };
    let sol = stage(
        "solve",
        solve(&setup.problem, &built.basis, &coll, built.warm_start.as_deref(), newton),
    )?;
    timings.assembly_s = sol.diagnostics.assembly_time_s;
    timings.solve_s = sol.diagnostics.solve_time_s;

    let grid = cfg.test_grid();
    let (sol, phase2) = match (&cfg.phase2, &built.trunk) {
        (Some(p2), Some(trunk)) => {
            let phase1 = stage("evaluate", compute_errors(&reference, &sol, &grid))?;
            let t = Instant::now();
            let out = stage("phase2", adapt_trunk(trunk, &setup.problem, &coll, p2, &sol.alpha))?;
            let refined = stage("phase2", finalize(&out, &setup.problem, &coll, newton))?;
            timings.phase2_s = t.elapsed().as_secs_f64();
            timings.assembly_s += refined.diagnostics.assembly_time_s;
            timings.solve_s += refined.diagnostics.solve_time_s;
            let summary = Phase2Summary {
                iterations: out.trace.last().map_or(0, |r| r.iteration),
                trace: out.trace,
                diverged_at: out.diverged_at,
                phase1_rel_l2: phase1.rel_l2,
            };
            (refined, Some(summary))
        }
        (Some(_), None) => return Err(Error::Config("phase2 requires a trunk basis".into())),
        _ => (sol, None),
    };

    let t = Instant::now();
    let points = grid.points();
    let report = stage("evaluate", compute_errors(&reference, &sol, &grid))?;
    let values = stage("evaluate", evaluate_solution(&sol, &points))?;
    let truth = reference.values(&points);
    timings.evaluate_s = t.elapsed().as_secs_f64();
    timings.total_s = t_total.elapsed().as_secs_f64();

    Ok(ExperimentOutcome {
        config: cfg.clone(),
        report,
        points,
        reference: truth,
        values,
        phase2,
        timings,
    })
}

// ---------------------------------------------------------------------------
// Artifacts

pub const REPORT_FILE: &str = "report.csv";
pub const SOLUTION_FILE: &str = "solution.csv";
pub const POINTWISE_FILE: &str = "pointwise_error.csv";
pub const CONFIG_ECHO_FILE: &str = "config.echo.json";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const TRACE_FILE: &str = "phase2_trace.csv";

/// One row of `report.csv`. Timings are kept out so the file is
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub family: String,
    pub basis: String,
    pub dof: usize,
    pub n_test: usize,
    pub rel_l2: Option<f64>,
    pub l_inf: f64,
    pub rank: usize,
    pub sigma_max: f64,
    pub residual_norm: f64,
    pub rows: usize,
    pub newton_steps: usize,
    pub phase1_rel_l2: Option<f64>,
    pub phase2_iterations: Option<usize>,
    pub phase2_diverged_at: Option<usize>,
    pub seed: u64,
}

impl ReportRow {
    pub fn from_outcome(o: &ExperimentOutcome) -> Self {
        let d = &o.report.diagnostics;
        let basis = match &o.config.basis {
            BasisConfig::RandomFeature { .. } => "random_feature",
            BasisConfig::Pascal { .. } => "pascal",
            BasisConfig::WeightFile { scales: 1, .. } => "trunk",
            BasisConfig::WeightFile { .. } => "scaled_union",
        };
        let basis = if o.phase2.is_some() { "lora_trunk" } else { basis };
        Self {
            name: o.config.name.clone(),
            family: o.config.family_name().into(),
            basis: basis.into(),
            dof: o.report.dof,
            n_test: o.report.n_test,
            rel_l2: o.report.rel_l2,
            l_inf: o.report.l_inf,
            rank: d.rank,
            sigma_max: d.sigma_max,
            residual_norm: d.residual_norm,
            rows: d.rows,
            newton_steps: d.newton_steps,
            phase1_rel_l2: o.phase2.as_ref().and_then(|p| p.phase1_rel_l2),
            phase2_iterations: o.phase2.as_ref().map(|p| p.iterations),
            phase2_diverged_at: o.phase2.as_ref().and_then(|p| p.diverged_at),
            seed: o.config.seed,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    read_rows(path)
}

pub fn read_timings_csv(path: &Path) -> Result<Timings> {
    read_rows(path)?.pop().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        message: "no rows".into(),
    })
}

/// Header and numeric rows of a plot-data CSV.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("`{s}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn coordinate_names(cfg: &ExperimentConfig) -> [&'static str; 2] {
    match cfg.problem {
        ProblemConfig::Interface { .. } => ["x1", "x2"],
        _ => ["x", "t"],
    }
}

fn write_numeric_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write every artifact of `outcome` into `dir`.
pub fn write_artifacts(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rows(&dir.join(REPORT_FILE), &[ReportRow::from_outcome(outcome)])?;
    write_rows(&dir.join(TIMINGS_FILE), &[outcome.timings])?;
    let [a, b] = coordinate_names(&outcome.config);
    write_numeric_csv(
        &dir.join(SOLUTION_FILE),
        &[a, b, "u"],
        outcome
            .points
            .iter()
            .zip(&outcome.values)
            .map(|(p, u)| vec![p[0], p[1], *u]),
    )?;
    write_numeric_csv(
        &dir.join(POINTWISE_FILE),
        &[a, b, "u_ref", "u", "abs_error"],
        outcome
            .points
            .iter()
            .zip(outcome.reference.iter().zip(&outcome.values))
            .map(|(p, (r, u))| vec![p[0], p[1], *r, *u, (u - r).abs()]),
    )?;
    if let Some(p2) = &outcome.phase2 {
        write_trace_csv(&p2.trace, &dir.join(TRACE_FILE))?;
    }
    Ok(())
}

fn write_echo(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CONFIG_ECHO_FILE);
    fs::write(&path, cfg.to_json()).map_err(|e| Error::io(&path, e))
}

/// Run one experiment and write its artifacts to `out_dir`. The config echo
/// is written first so a failed run still leaves it behind.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ErrorReport> {
    write_echo(cfg, out_dir)?;
    let outcome = execute(cfg)?;
    write_artifacts(&outcome, out_dir)?;
    Ok(outcome.report)
}

/// Reference solution of `cfg`'s problem on its test grid, or on an `n x n`
/// grid over the same domain.
pub fn oracle_solution(cfg: &ExperimentConfig, n: Option<usize>) -> Result<GridSolution> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if n.is_some() {
        cfg.test_grid.n = n;
        cfg.test_grid.reference_refinement = Some(1);
    }
    let setup = stage("problem", build_problem(&cfg))?;
    let grid = cfg.test_grid();
    match stage("reference", build_reference(&cfg, &setup))? {
        Reference::Grid(g) if g.grid == grid => Ok(g),
        Reference::Grid(g) => g.restrict(grid),
        Reference::Exact(f) => GridSolution::from_fn(grid, "exact", |a, b| f(&[a, b])),
    }
}

// ---------------------------------------------------------------------------
// Weight-file checks

/// Reference outputs of one named net, produced by an external exporter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParityFile {
    pub net: String,
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetSummary {
    pub name: String,
    pub dims: Vec<usize>,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightCheck {
    pub model_kind: String,
    pub nets: Vec<NetSummary>,
    /// Largest absolute deviation from the parity file, when one was given.
    pub max_abs_deviation: Option<f64>,
    pub parity_points: usize,
}

fn named_nets(model: &Model) -> Vec<(&'static str, &MlpSpec)> {
    match model {
        Model::Mlp(m) => vec![("net", m)],
        Model::DeepOnet(d) => vec![("branch", &d.branch), ("trunk", &d.trunk)],
        Model::Ionet(i) => vec![
            ("branch_inner", &i.branch_inner),
            ("branch_outer", &i.branch_outer),
            ("trunk_inner", &i.trunk_inner),
            ("trunk_outer", &i.trunk_outer),
        ],
    }
}

/// Load and validate a weight file; with `parity`, compare the raw forward
/// pass of the named net (affine last layer, no input scaling) against the
/// stored outputs.
pub fn check_weight_file(path: &Path, parity: Option<&Path>, tol: f64) -> Result<WeightCheck> {
    let file = weight_io::load(path)?;
    let nets = named_nets(&file.model);
    let mut check = WeightCheck {
        model_kind: file.model.kind().into(),
        nets: nets
            .iter()
            .map(|(name, net)| NetSummary {
                name: (*name).into(),
                dims: net.dims(),
                params: net.num_params(),
            })
            .collect(),
        max_abs_deviation: None,
        parity_points: 0,
    };
    let Some(ppath) = parity else {
        return Ok(check);
    };
    let text = fs::read_to_string(ppath).map_err(|e| Error::io(ppath, e))?;
    let pf: ParityFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: ppath.to_path_buf(),
        message: e.to_string(),
    })?;
    let net = nets
        .iter()
        .find(|(n, _)| *n == pf.net)
        .map(|(_, m)| *m)
        .ok_or_else(|| Error::Config(format!("model has no net `{}`", pf.net)))?;
    if pf.inputs.len() != pf.outputs.len() {
        return Err(Error::DimensionMismatch {
            expected: pf.inputs.len(),
            got: pf.outputs.len(),
            context: "parity outputs vs inputs".into(),
        });
    }
    let mut worst = 0.0f64;
    for (x, y) in pf.inputs.iter().zip(&pf.outputs) {
        if x.len() != net.input_dim() || y.len() != net.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: net.input_dim(),
                got: x.len(),
                context: format!("parity row for net `{}`", pf.net),
            });
        }
        let out = net.forward(x);
        for (a, b) in out.iter().zip(y) {
            worst = worst.max((a - b).abs());
        }
    }
    check.max_abs_deviation = Some(worst);
    check.parity_points = pf.inputs.len();
    if !(worst <= tol) {
        return Err(Error::Parity { deviation: worst, tol });
    }
    Ok(check)
}

// ---------------------------------------------------------------------------
// Sweeps

pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_RUNS_FILE: &str = "sweep_runs.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub axis: String,
    pub value: f64,
    pub repeat: u64,
    pub seed: u64,
    pub dof: Option<usize>,
    pub rel_l2: Option<f64>,
    pub l_inf: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub runs: usize,
    pub failures: usize,
    pub rel_l2_mean: Option<f64>,
    pub rel_l2_std: Option<f64>,
    pub l_inf_mean: Option<f64>,
    pub l_inf_std: Option<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<SweepRun>,
}

/// Run `template` at every `values` point of `axis`, `repeats` times each
/// with shifted seeds. Failed runs are recorded and the sweep continues.
pub fn sweep(template: &ExperimentConfig, axis: SweepAxis, values: &[f64], repeats: usize) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let mut jobs = Vec::with_capacity(values.len() * repeats);
    for &v in values {
        let mut cfg = template.clone();
        apply_axis(&mut cfg, axis, v)?;
        for r in 0..repeats as u64 {
            jobs.push((v, r, with_repeat(&cfg, r)));
        }
    }
    let runs: Vec<SweepRun> = jobs
        .into_par_iter()
        .map(|(value, repeat, cfg)| {
            let base = SweepRun {
                axis: axis.name().into(),
                value,
                repeat,
                seed: cfg.seed,
                dof: None,
                rel_l2: None,
                l_inf: None,
                error: None,
            };
            match execute(&cfg) {
                Ok(o) => SweepRun {
                    dof: Some(o.report.dof),
                    rel_l2: o.report.rel_l2,
                    l_inf: Some(o.report.l_inf),
                    ..base
                },
                Err(e) => {
                    log::warn!("sweep {axis}={value} repeat {repeat} failed: {e}");
                    SweepRun {
                        error: Some(e.to_string()),
                        ..base
                    }
                }
            }
        })
        .collect();
    let rows = values
        .iter()
        .enumerate()
        .map(|(k, &value)| {
            let group = &runs[k * repeats..(k + 1) * repeats];
            let rel: Vec<f64> = group.iter().filter_map(|r| r.rel_l2).collect();
            let linf: Vec<f64> = group.iter().filter_map(|r| r.l_inf).collect();
            let (rm, rs) = mean_std(&rel).unzip();
            let (lm, ls) = mean_std(&linf).unzip();
            SweepRow {
                axis: axis.name().into(),
                value,
                runs: repeats,
                failures: group.iter().filter(|r| r.error.is_some()).count(),
                rel_l2_mean: rm,
                rel_l2_std: rs,
                l_inf_mean: lm,
                l_inf_std: ls,
            }
        })
        .collect();
    Ok(SweepResult { rows, runs })
}

/// [`sweep`] plus `sweep.csv`, `sweep_runs.csv` and the template echo.
pub fn run_sweep(
    template: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    repeats: usize,
    out_dir: &Path,
) -> Result<SweepResult> {
    let result = sweep(template, axis, values, repeats)?;
    write_echo(template, out_dir)?;
    write_rows(&out_dir.join(SWEEP_FILE), &result.rows)?;
    write_rows(&out_dir.join(SWEEP_RUNS_FILE), &result.runs)?;
    Ok(result)
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    read_rows(path)
}

pub fn read_sweep_runs_csv(path: &Path) -> Result<Vec<SweepRun>> {
    read_rows(path)
}

// ---------------------------------------------------------------------------
// Pre-training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub dataset: PretrainData,
    pub branch: NetShape,
    pub trunk: NetShape,
    #[serde(default)]
    pub train: TrainConfig,
    /// Initialisation seed.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainData {
    #[serde(flatten)]
    pub family: DatasetFamily,
    /// GRF length scale; ignored by the interface family.
    #[serde(default = "default_beta")]
    pub length_scale: f64,
    #[serde(default = "default_sensors")]
    pub sensors: usize,
    pub samples: usize,
    #[serde(default = "default_points")]
    pub points_per_sample: usize,
    #[serde(default = "default_oracle_n")]
    pub oracle_n: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta() -> f64 {
    0.2
}
fn default_points() -> usize {
    crate::pretrain::DEFAULT_POINTS_PER_SAMPLE
}
fn default_oracle_n() -> usize {
    101
}

impl PretrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            family: d.family.clone(),
            grf: Some(GrfSpec::rbf(d.length_scale, d.sensors, d.seed)),
            samples: d.samples,
            points_per_sample: d.points_per_sample,
            oracle_grid: Grid::square(d.oracle_n),
            seed: d.seed.wrapping_add(1),
        }
    }
}

pub const MODEL_FILE: &str = "model.fbw.json";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: OperatorModel,
    pub loss_trace: Vec<f64>,
    /// Mean relative L2 error over the training set.
    pub train_rel_l2: f64,
}

/// Generate the dataset and train a DeepONet (or an IONet for the interface
/// family).
pub fn pretrain(cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let data = stage("dataset", generate_dataset(&cfg.dataset_config()))?;
    let (model, trace) = match &cfg.dataset.family {
        DatasetFamily::Interface { .. } => {
            let inner = data.sensors[..data.inner_sensors].to_vec();
            let outer = data.sensors[data.inner_sensors..].to_vec();
            let spec = IonetSpec::init(&cfg.branch, &cfg.trunk, inner, outer, Astroid::default(), cfg.seed)?;
            let (spec, trace) = stage("train", train_ionet(spec, &data, &cfg.train))?;
            (OperatorModel::Ionet(spec), trace)
        }
        _ => {
            let spec = DeepOnetSpec::init(&cfg.branch, &cfg.trunk, data.sensors.clone(), 2, cfg.seed)?;
            let (spec, trace) = stage("train", train_deeponet(spec, &data, &cfg.train))?;
            (OperatorModel::DeepOnet(spec), trace)
        }
    };
    let train_rel_l2 = mean_relative_error(&model, &data)?;
    Ok(PretrainOutcome {
        model,
        loss_trace: trace,
        train_rel_l2,
    })
}

/// [`pretrain`] plus `model.fbw.json` and `loss_trace.csv` in `out_dir`.
pub fn run_pretrain(cfg: &PretrainConfig, out_dir: &Path) -> Result<PretrainOutcome> {
    let outcome = pretrain(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let model = match &outcome.model {
        OperatorModel::DeepOnet(d) => Model::DeepOnet(d.clone()),
        OperatorModel::Ionet(i) => Model::Ionet(i.clone()),
    };
    let mut file = WeightFile::new(model);
    file.metadata.insert(
        "dataset".into(),
        serde_json::to_value(&cfg.dataset).expect("dataset config serialises"),
    );
    file.metadata.insert("train_rel_l2".into(), outcome.train_rel_l2.into());
    weight_io::save(&file, &out_dir.join(MODEL_FILE))?;
    #[derive(Serialize)]
    struct LossRow {
        epoch: usize,
        loss: f64,
    }
    let rows: Vec<LossRow> = outcome
        .loss_trace
        .iter()
        .enumerate()
        .map(|(epoch, &loss)| LossRow { epoch, loss })
        .collect();
    write_rows(&out_dir.join(LOSS_TRACE_FILE), &rows)?;
    Ok(outcome)
}
