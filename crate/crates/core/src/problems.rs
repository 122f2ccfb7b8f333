//! The four PDE families as row builders over basis jets.
//!
//! Time-dependent problems use coordinates `(x, t)`: index 0 is space and
//! index 1 is time. The interface problem uses `(x1, x2)` on `[-1, 1]^2`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{Jets, ScalarField};
use crate::error::{Error, Result};
use crate::field_sampler::{GridFunction, PeriodicField};

/// Points closer than this (in level-set value) to the interface count as
/// lying on it.
pub const INTERFACE_TOL: f64 = 1e-12;
/// Astroid parameters with a shorter tangent than this are cusps.
pub const CUSP_TOL: f64 = 1e-8;

/// Scalar data evaluated at collocation points.
#[derive(Debug, Clone)]
pub enum DataFn {
    Constant(f64),
    /// Function of the first coordinate known on a grid.
    Grid(GridFunction),
    /// Periodic function of the first coordinate.
    Periodic(PeriodicField),
    /// Arbitrary function of all coordinates.
    Field(Arc<dyn ScalarField>),
}

impl DataFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            DataFn::Constant(c) => *c,
            DataFn::Grid(g) => g.eval(x[0]),
            DataFn::Periodic(p) => p.eval(x[0]),
            DataFn::Field(f) => f.value(x),
        }
    }

    /// Minimum over the known samples, when there are any.
    fn sampled_min(&self) -> Option<f64> {
        match self {
            DataFn::Constant(c) => Some(*c),
            DataFn::Grid(g) => Some(g.min()),
            DataFn::Periodic(p) => Some(p.values.iter().copied().fold(f64::INFINITY, f64::min)),
            DataFn::Field(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Enclosed by the interface.
    Inner,
    Outer,
}

/// `(0.65 cos^3 th, 0.65 sin^3 th)` by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Astroid {
    pub radius: f64,
}

impl Default for Astroid {
    fn default() -> Self {
        Self { radius: 0.65 }
    }
}

impl Astroid {
    pub fn point(&self, theta: f64) -> [f64; 2] {
        let (s, c) = theta.sin_cos();
        [self.radius * c * c * c, self.radius * s * s * s]
    }

    pub fn tangent(&self, theta: f64) -> [f64; 2] {
        let (s, c) = theta.sin_cos();
        let r = 3.0 * self.radius;
        [-r * c * c * s, r * s * s * c]
    }

    /// Unit outward normal, or `None` at a cusp.
    pub fn normal(&self, theta: f64) -> Option<[f64; 2]> {
        let t = self.tangent(theta);
        let len = t[0].hypot(t[1]);
        if len < CUSP_TOL {
            return None;
        }
        Some([t[1] / len, -t[0] / len])
    }

    /// Negative inside, zero on the curve, positive outside.
    pub fn level(&self, x: &[f64]) -> f64 {
        (x[0].abs() / self.radius).powf(2.0 / 3.0) + (x[1].abs() / self.radius).powf(2.0 / 3.0) - 1.0
    }

    /// Region of `x` and whether it was within tolerance of the curve (such
    /// points go to the outer region).
    pub fn classify(&self, x: &[f64]) -> (Region, bool) {
        let l = self.level(x);
        if l.abs() <= INTERFACE_TOL {
            (Region::Outer, true)
        } else if l < 0.0 {
            (Region::Inner, false)
        } else {
            (Region::Outer, false)
        }
    }
}

/// Right-hand sides of the interface problem.
pub trait InterfaceData: Send + Sync + fmt::Debug {
    fn source(&self, region: Region, x: &[f64]) -> f64;
    /// `u_outer - u_inner` on the interface.
    fn jump_value(&self, x: &[f64]) -> f64;
    /// `a2 grad u_outer . n - a1 grad u_inner . n` on the interface.
    fn jump_flux(&self, x: &[f64], normal: &[f64]) -> f64;
    /// Dirichlet data on the outer boundary.
    fn boundary(&self, x: &[f64]) -> f64;
}

#[derive(Debug, Clone)]
pub enum Family {
    /// `u_t + a(x) u_x = 0`, `u(0, t) = sin(pi t / 2)`, `u(x, 0) = sin(pi x)`.
    Advection { speed: DataFn },
    /// `u_t = D u_xx + k u^2 + f`, zero initial and boundary data.
    DiffusionReaction {
        diffusion: f64,
        reaction: f64,
        source: DataFn,
    },
    /// `u_t + u u_x - mu u_xx = 0`, periodic in `x`, `u(x, 0) = u0(x)`.
    Burgers { viscosity: f64, initial: DataFn },
    /// `-a_k Lap u = f_k` in each region, with value/flux jumps on the astroid
    /// and Dirichlet data on the square's boundary.
    EllipticInterface {
        inner_coeff: f64,
        outer_coeff: f64,
        data: Arc<dyn InterfaceData>,
        geometry: Astroid,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linearity {
    Linear,
    Nonlinear,
}

/// Collocation point kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Pde,
    Dirichlet,
    Initial,
    PeriodicPair,
    Pde1,
    Pde2,
    OuterBoundary,
    JumpValue,
    JumpFlux,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tag::Pde => "pde",
            Tag::Dirichlet => "dirichlet",
            Tag::Initial => "initial",
            Tag::PeriodicPair => "periodic_pair",
            Tag::Pde1 => "pde1",
            Tag::Pde2 => "pde2",
            Tag::OuterBoundary => "outer_boundary",
            Tag::JumpValue => "jump_value",
            Tag::JumpFlux => "jump_flux",
        };
        f.write_str(s)
    }
}

/// Loss term a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Pde,
    Dirichlet,
    Initial,
    PeriodicValue,
    PeriodicSlope,
    Pde1,
    Pde2,
    OuterBoundary,
    JumpValue,
    JumpFlux,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Pde => "pde",
            Group::Dirichlet => "dirichlet",
            Group::Initial => "initial",
            Group::PeriodicValue => "periodic_value",
            Group::PeriodicSlope => "periodic_slope",
            Group::Pde1 => "pde1",
            Group::Pde2 => "pde2",
            Group::OuterBoundary => "outer_boundary",
            Group::JumpValue => "jump_value",
            Group::JumpFlux => "jump_flux",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One row of the unweighted system.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub coefficients: Vec<f64>,
    pub rhs: f64,
    pub group: Group,
}

/// Residual and its gradient with respect to the coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedRow {
    pub residual: f64,
    pub jacobian: Vec<f64>,
    pub group: Group,
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub family: Family,
}

impl ProblemSpec {
    pub fn new(family: Family) -> Result<Self> {
        let p = Self { family };
        p.validate()?;
        Ok(p)
    }

    pub fn advection(speed: DataFn) -> Result<Self> {
        Self::new(Family::Advection { speed })
    }

    pub fn diffusion_reaction(diffusion: f64, reaction: f64, source: DataFn) -> Result<Self> {
        Self::new(Family::DiffusionReaction {
            diffusion,
            reaction,
            source,
        })
    }

    pub fn burgers(viscosity: f64, initial: DataFn) -> Result<Self> {
        Self::new(Family::Burgers { viscosity, initial })
    }

    pub fn interface(inner_coeff: f64, outer_coeff: f64, data: Arc<dyn InterfaceData>) -> Result<Self> {
        Self::new(Family::EllipticInterface {
            inner_coeff,
            outer_coeff,
            data,
            geometry: Astroid::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match &self.family {
            Family::Advection { speed } => {
                if let Some(m) = speed.sampled_min() {
                    if !(m > 0.0) {
                        return Err(Error::invalid("a", "advection speed must be positive"));
                    }
                }
            }
            Family::DiffusionReaction {
                diffusion, reaction, ..
            } => {
                if !(*diffusion > 0.0) || !reaction.is_finite() {
                    return Err(Error::invalid("D", "diffusion must be positive"));
                }
            }
            Family::Burgers { viscosity, .. } => {
                if !(*viscosity > 0.0) {
                    return Err(Error::invalid("mu", "viscosity must be positive"));
                }
            }
            Family::EllipticInterface {
                inner_coeff,
                outer_coeff,
                geometry,
                ..
            } => {
                if !(*inner_coeff > 0.0 && *outer_coeff > 0.0) {
                    return Err(Error::invalid("a", "interface coefficients must be positive"));
                }
                if !(geometry.radius > 0.0 && geometry.radius < 1.0) {
                    return Err(Error::invalid("radius", "astroid must fit inside the square"));
                }
            }
        }
        Ok(())
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            Family::Advection { .. } => "advection",
            Family::DiffusionReaction { .. } => "diffusion_reaction",
            Family::Burgers { .. } => "burgers",
            Family::EllipticInterface { .. } => "interface",
        }
    }

    pub fn linearity(&self) -> Linearity {
        match &self.family {
            Family::Advection { .. } | Family::EllipticInterface { .. } => Linearity::Linear,
            Family::DiffusionReaction { reaction, .. } if *reaction == 0.0 => Linearity::Linear,
            _ => Linearity::Nonlinear,
        }
    }

    pub fn is_interface(&self) -> bool {
        matches!(self.family, Family::EllipticInterface { .. })
    }

    /// `(lower, upper)` corner of the rectangular domain.
    pub fn domain(&self) -> ([f64; 2], [f64; 2]) {
        match self.family {
            Family::EllipticInterface { .. } => ([-1.0, -1.0], [1.0, 1.0]),
            _ => ([0.0, 0.0], [1.0, 1.0]),
        }
    }

    pub fn geometry(&self) -> Option<&Astroid> {
        match &self.family {
            Family::EllipticInterface { geometry, .. } => Some(geometry),
            _ => None,
        }
    }

    /// Tags a single-basis point may carry.
    pub fn accepts(&self, tag: Tag) -> bool {
        match self.family {
            Family::Advection { .. } | Family::DiffusionReaction { .. } => {
                matches!(tag, Tag::Pde | Tag::Dirichlet | Tag::Initial)
            }
            Family::Burgers { .. } => matches!(tag, Tag::Pde | Tag::PeriodicPair | Tag::Initial),
            Family::EllipticInterface { .. } => matches!(
                tag,
                Tag::Pde1 | Tag::Pde2 | Tag::OuterBoundary | Tag::JumpValue | Tag::JumpFlux
            ),
        }
    }

    fn incompatible(&self, tag: Tag) -> Error {
        Error::IncompatibleTag {
            tag: tag.to_string(),
            family: self.family_name(),
        }
    }

    /// Dirichlet or initial data at `x`.
    /// Prescribed value at a Dirichlet or initial point.
    pub fn boundary_value(&self, x: &[f64], tag: Tag) -> f64 {
        match (&self.family, tag) {
            (Family::Advection { .. }, Tag::Dirichlet) => (PI * x[1] / 2.0).sin(),
            (Family::Advection { .. }, Tag::Initial) => (PI * x[0]).sin(),
            (Family::Burgers { initial, .. }, Tag::Initial) => initial.eval(x),
            _ => 0.0,
        }
    }

    /// Partner of a periodic boundary point `(0, t)`.
    pub fn periodic_partner(x: &[f64]) -> Vec<f64> {
        vec![1.0, x[1]]
    }
}

fn check_len(jets: &Jets, len: usize, context: &str) -> Result<()> {
    if jets.len() != len {
        return Err(Error::DimensionMismatch {
            expected: len,
            got: jets.len(),
            context: context.into(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rows of the linear system contributed by one point. Periodic pairs emit a
/// value row and a slope row; `partner` carries the jets at `(1, t)`.
pub fn linear_rows(
    problem: &ProblemSpec,
    jets: &Jets,
    x: &[f64],
    tag: Tag,
    partner: Option<&Jets>,
) -> Result<Vec<ResidualRow>> {
    if !problem.accepts(tag) || problem.is_interface() {
        return Err(problem.incompatible(tag));
    }
    let n = jets.len();
    match tag {
        Tag::Pde => {
            let coefficients: Vec<f64> = match &problem.family {
                Family::Advection { speed } => {
                    let a = speed.eval(x);
                    (0..n).map(|i| jets.grad(i, 1) + a * jets.grad(i, 0)).collect()
                }
                Family::DiffusionReaction {
                    diffusion, reaction, ..
                } if *reaction == 0.0 => (0..n)
                    .map(|i| jets.grad(i, 1) - diffusion * jets.hess(i, 0, 0))
                    .collect(),
                _ => return Err(problem.incompatible(tag)),
            };
            let rhs = match &problem.family {
                Family::DiffusionReaction { source, .. } => source.eval(x),
                _ => 0.0,
            };
            Ok(vec![ResidualRow {
                coefficients,
                rhs,
                group: Group::Pde,
            }])
        }
        Tag::Dirichlet | Tag::Initial => Ok(vec![ResidualRow {
            coefficients: jets.values(),
            rhs: problem.boundary_value(x, tag),
            group: if tag == Tag::Dirichlet {
                Group::Dirichlet
            } else {
                Group::Initial
            },
        }]),
        Tag::PeriodicPair => {
            let other = partner.ok_or_else(|| Error::invalid("partner", "periodic pair needs jets at (1, t)"))?;
            check_len(other, n, "periodic partner jets")?;
            let value = (0..n).map(|i| jets.value(i) - other.value(i)).collect();
            let slope = (0..n).map(|i| jets.grad(i, 0) - other.grad(i, 0)).collect();
            Ok(vec![
                ResidualRow {
                    coefficients: value,
                    rhs: 0.0,
                    group: Group::PeriodicValue,
                },
                ResidualRow {
                    coefficients: slope,
                    rhs: 0.0,
                    group: Group::PeriodicSlope,
                },
            ])
        }
        _ => Err(problem.incompatible(tag)),
    }
}

/// Residuals `L(u_alpha)(x) - f(x)` and their gradients in `alpha`.
pub fn nonlinear_residual_and_jacobian(
    problem: &ProblemSpec,
    jets: &Jets,
    x: &[f64],
    alpha: &[f64],
    tag: Tag,
    partner: Option<&Jets>,
) -> Result<Vec<LinearizedRow>> {
    check_len(jets, alpha.len(), "coefficients vs basis jets")?;
    let n = jets.len();
    let nonlinear_pde = tag == Tag::Pde && problem.linearity() == Linearity::Nonlinear;
    if !nonlinear_pde {
        return Ok(linear_rows(problem, jets, x, tag, partner)?
            .into_iter()
            .map(|r| LinearizedRow {
                residual: dot(&r.coefficients, alpha) - r.rhs,
                jacobian: r.coefficients,
                group: r.group,
            })
            .collect());
    }
    let u = dot(&jets.values(), alpha);
    let ux = dot(&jets.grad_column(0), alpha);
    let ut = dot(&jets.grad_column(1), alpha);
    let uxx = dot(&jets.hess_column(0, 0), alpha);
    let (residual, jacobian) = match &problem.family {
        Family::DiffusionReaction {
            diffusion,
            reaction,
            source,
        } => {
            let r = ut - diffusion * uxx - reaction * u * u - source.eval(x);
            let j = (0..n)
                .map(|i| jets.grad(i, 1) - diffusion * jets.hess(i, 0, 0) - 2.0 * reaction * u * jets.value(i))
                .collect();
            (r, j)
        }
        Family::Burgers { viscosity, .. } => {
            let r = ut + u * ux - viscosity * uxx;
            let j = (0..n)
                .map(|i| jets.grad(i, 1) + u * jets.grad(i, 0) + ux * jets.value(i) - viscosity * jets.hess(i, 0, 0))
                .collect();
            (r, j)
        }
        _ => return Err(problem.incompatible(tag)),
    };
    Ok(vec![LinearizedRow {
        residual,
        jacobian,
        group: Group::Pde,
    }])
}

/// One row over the concatenated coefficients `(alpha_inner, alpha_outer)`.
/// `sizes` are the two basis sizes; only the jets a tag needs must be given.
pub fn interface_rows(
    problem: &ProblemSpec,
    sizes: (usize, usize),
    inner: Option<&Jets>,
    outer: Option<&Jets>,
    x: &[f64],
    tag: Tag,
    normal: Option<&[f64]>,
) -> Result<ResidualRow> {
    let Family::EllipticInterface {
        inner_coeff: a1,
        outer_coeff: a2,
        data,
        ..
    } = &problem.family
    else {
        return Err(problem.incompatible(tag));
    };
    let (n1, n2) = sizes;
    let need = |j: Option<&Jets>, len: usize, which: &str| -> Result<Jets> {
        let j = j.ok_or_else(|| Error::invalid("jets", format!("{tag} row needs {which} jets")))?;
        check_len(j, len, &format!("{which} basis jets"))?;
        Ok(j.clone())
    };
    let mut row = vec![0.0; n1 + n2];
    let (rhs, group) = match tag {
        Tag::Pde1 => {
            let j = need(inner, n1, "inner")?;
            for i in 0..n1 {
                row[i] = -a1 * j.laplacian(i);
            }
            (data.source(Region::Inner, x), Group::Pde1)
        }
        Tag::Pde2 => {
            let j = need(outer, n2, "outer")?;
            for i in 0..n2 {
                row[n1 + i] = -a2 * j.laplacian(i);
            }
            (data.source(Region::Outer, x), Group::Pde2)
        }
        Tag::OuterBoundary => {
            let j = need(outer, n2, "outer")?;
            for i in 0..n2 {
                row[n1 + i] = j.value(i);
            }
            (data.boundary(x), Group::OuterBoundary)
        }
        Tag::JumpValue => {
            let j1 = need(inner, n1, "inner")?;
            let j2 = need(outer, n2, "outer")?;
            for i in 0..n1 {
                row[i] = -j1.value(i);
            }
            for i in 0..n2 {
                row[n1 + i] = j2.value(i);
            }
            (data.jump_value(x), Group::JumpValue)
        }
        Tag::JumpFlux => {
            let nv = normal.ok_or_else(|| Error::MissingNormal { point: x.to_vec() })?;
            let j1 = need(inner, n1, "inner")?;
            let j2 = need(outer, n2, "outer")?;
            let flux = |j: &Jets, i: usize| j.grad(i, 0) * nv[0] + j.grad(i, 1) * nv[1];
            for i in 0..n1 {
                row[i] = -a1 * flux(&j1, i);
            }
            for i in 0..n2 {
                row[n1 + i] = a2 * flux(&j2, i);
            }
            (data.jump_flux(x, nv), Group::JumpFlux)
        }
        _ => return Err(problem.incompatible(tag)),
    };
    Ok(ResidualRow {
        coefficients: row,
        rhs,
        group,
    })
}

/// Collocation counts per point kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollocationCounts {
    pub pde: usize,
    /// Dirichlet points, periodic pairs, or outer-boundary points.
    pub boundary: usize,
    /// Initial-condition points, or interface points for the interface problem.
    pub initial: usize,
}

impl CollocationCounts {
    /// Default split for a family.
    pub fn default_for(problem: &ProblemSpec) -> Self {
        match problem.family {
            Family::Advection { .. } | Family::DiffusionReaction { .. } => Self {
                pde: 4000,
                boundary: 2000,
                initial: 2000,
            },
            Family::Burgers { .. } => Self {
                pde: 2000,
                boundary: 1000,
                initial: 101,
            },
            Family::EllipticInterface { .. } => Self {
                pde: 2000,
                boundary: 1000,
                initial: 1000,
            },
        }
    }

    pub fn total(&self) -> usize {
        self.pde + self.boundary + self.initial
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPoint {
    pub x: Vec<f64>,
    pub tag: Tag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterfacePoint {
    pub x: Vec<f64>,
    pub normal: Vec<f64>,
}

/// Interior points carry their PDE tag (`pde`, or `pde1`/`pde2` for the
/// interface problem).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CollocationSet {
    pub interior: Vec<BoundaryPoint>,
    pub boundary: Vec<BoundaryPoint>,
    pub interface: Vec<InterfacePoint>,
}

impl CollocationSet {
    pub fn len(&self) -> usize {
        self.interior.len() + self.boundary.len() + self.interface.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of system rows the set produces.
    pub fn row_count(&self) -> usize {
        let pairs = self.boundary.iter().filter(|b| b.tag == Tag::PeriodicPair).count();
        self.len() + pairs + self.interface.len()
    }
}

fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Uniform random collocation points per the family's layout.
pub fn sample_collocation(problem: &ProblemSpec, counts: CollocationCounts, seed: u64) -> Result<CollocationSet> {
    if counts.pde == 0 || counts.boundary == 0 || counts.initial == 0 {
        return Err(Error::invalid("counts", "every collocation count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = CollocationSet::default();
    match &problem.family {
        Family::Advection { .. } | Family::DiffusionReaction { .. } | Family::Burgers { .. } => {
            for _ in 0..counts.pde {
                let x = vec![open_unit(&mut rng), open_unit(&mut rng)];
                set.interior.push(BoundaryPoint { x, tag: Tag::Pde });
            }
            let both_sides = matches!(problem.family, Family::DiffusionReaction { .. });
            let side_tag = if matches!(problem.family, Family::Burgers { .. }) {
                Tag::PeriodicPair
            } else {
                Tag::Dirichlet
            };
            for k in 0..counts.boundary {
                let t = open_unit(&mut rng);
                let side = if both_sides && k % 2 == 1 { 1.0 } else { 0.0 };
                set.boundary.push(BoundaryPoint {
                    x: vec![side, t],
                    tag: side_tag,
                });
            }
            for _ in 0..counts.initial {
                let x = open_unit(&mut rng);
                set.boundary.push(BoundaryPoint {
                    x: vec![x, 0.0],
                    tag: Tag::Initial,
                });
            }
        }
        Family::EllipticInterface { geometry, .. } => {
            while set.interior.len() < counts.pde {
                let x = vec![2.0 * open_unit(&mut rng) - 1.0, 2.0 * open_unit(&mut rng) - 1.0];
                let tag = match geometry.classify(&x) {
                    (_, true) => continue,
                    (Region::Inner, _) => Tag::Pde1,
                    (Region::Outer, _) => Tag::Pde2,
                };
                set.interior.push(BoundaryPoint { x, tag });
            }
            for _ in 0..counts.boundary {
                let s = 4.0 * rng.gen::<f64>();
                let side = (s as usize).min(3);
                let u = 2.0 * (s - side as f64) - 1.0;
                let x = match side {
                    0 => vec![u, -1.0],
                    1 => vec![1.0, u],
                    2 => vec![-u, 1.0],
                    _ => vec![-1.0, -u],
                };
                set.boundary.push(BoundaryPoint {
                    x,
                    tag: Tag::OuterBoundary,
                });
            }
            while set.interface.len() < counts.initial {
                let theta = 2.0 * PI * rng.gen::<f64>();
                let Some(n) = geometry.normal(theta) else {
                    continue;
                };
                set.interface.push(InterfacePoint {
                    x: geometry.point(theta).to_vec(),
                    normal: n.to_vec(),
                });
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::Jet2;

    fn jets2(v: &[(f64, [f64; 2], [f64; 4])]) -> Jets {
        let j: Vec<Jet2> = v
            .iter()
            .map(|(val, g, h)| Jet2 {
                value: *val,
                grad: g.to_vec(),
                hess: h.to_vec(),
            })
            .collect();
        Jets::from_jets(2, &j)
    }

    #[derive(Debug)]
    struct Flat;
    impl InterfaceData for Flat {
        fn source(&self, _: Region, _: &[f64]) -> f64 {
            0.0
        }
        fn jump_value(&self, _: &[f64]) -> f64 {
            0.5
        }
        fn jump_flux(&self, _: &[f64], _: &[f64]) -> f64 {
            0.0
        }
        fn boundary(&self, _: &[f64]) -> f64 {
            0.0
        }
    }

    #[test]
    fn advection_row_with_unit_speed() {
        let p = ProblemSpec::advection(DataFn::Constant(1.0)).unwrap();
        let j = jets2(&[(0.3, [2.0, 5.0], [0.0; 4]), (0.1, [-1.0, 0.5], [0.0; 4])]);
        let rows = linear_rows(&p, &j, &[0.2, 0.4], Tag::Pde, None).unwrap();
        assert_eq!(rows[0].coefficients, vec![7.0, -0.5]);
        assert_eq!(rows[0].rhs, 0.0);
        let ic = linear_rows(&p, &j, &[0.5, 0.0], Tag::Initial, None).unwrap();
        assert_eq!(ic[0].rhs, 1.0);
        let bc = linear_rows(&p, &j, &[0.0, 1.0], Tag::Dirichlet, None).unwrap();
        assert!((bc[0].rhs - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dirichlet_row_copies_values() {
        let p = ProblemSpec::diffusion_reaction(0.01, 0.0, DataFn::Constant(0.0)).unwrap();
        let j = jets2(&[
            (0.1, [0.0; 2], [0.0; 4]),
            (0.2, [0.0; 2], [0.0; 4]),
            (0.3, [0.0; 2], [0.0; 4]),
        ]);
        let r = linear_rows(&p, &j, &[0.0, 0.5], Tag::Dirichlet, None).unwrap();
        assert_eq!(r[0].coefficients, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn burgers_hand_arithmetic() {
        let p = ProblemSpec::burgers(0.01, DataFn::Constant(0.0)).unwrap();
        let j = jets2(&[(2.0, [3.0, 1.0], [0.0; 4])]);
        let r = nonlinear_residual_and_jacobian(&p, &j, &[0.3, 0.3], &[1.0], Tag::Pde, None).unwrap();
        assert_eq!(r[0].residual, 7.0);
        assert_eq!(r[0].jacobian, vec![13.0]);
    }

    #[test]
    fn diffusion_reaction_at_zero() {
        let p = ProblemSpec::diffusion_reaction(0.01, 0.01, DataFn::Constant(2.5)).unwrap();
        let j = jets2(&[(1.0, [0.4, 0.7], [3.0, 0.0, 0.0, 0.0])]);
        let r = nonlinear_residual_and_jacobian(&p, &j, &[0.5, 0.5], &[0.0], Tag::Pde, None).unwrap();
        assert_eq!(r[0].residual, -2.5);
        assert!((r[0].jacobian[0] - (0.7 - 0.03)).abs() < 1e-15);
    }

    #[test]
    fn periodic_pair_rows() {
        let p = ProblemSpec::burgers(0.01, DataFn::Constant(0.0)).unwrap();
        let a = jets2(&[(1.0, [2.0, 0.0], [0.0; 4])]);
        let b = jets2(&[(0.25, [0.5, 0.0], [0.0; 4])]);
        let r = linear_rows(&p, &a, &[0.0, 0.3], Tag::PeriodicPair, Some(&b)).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].coefficients, vec![0.75]);
        assert_eq!(r[1].coefficients, vec![1.5]);
        assert_eq!(r[1].group, Group::PeriodicSlope);
    }

    #[test]
    fn interface_block_signs() {
        let p = ProblemSpec::interface(2.0, 1.0, Arc::new(Flat)).unwrap();
        let j1 = jets2(&[(1.0, [1.0, 0.0], [0.0; 4]), (2.0, [0.0, 0.0], [0.0; 4])]);
        let j2 = jets2(&[(3.0, [0.0, 0.0], [0.0; 4]), (4.0, [0.0, 1.0], [0.0; 4])]);
        let x = [0.65, 0.0];
        let r = interface_rows(&p, (2, 2), Some(&j1), Some(&j2), &x, Tag::JumpValue, None).unwrap();
        assert_eq!(r.coefficients, vec![-1.0, -2.0, 3.0, 4.0]);
        assert_eq!(r.rhs, 0.5);
        // gradients chosen so that grad t^1 . n = (1, 0) and grad t^2 . n = (0, 1)
        let n = [1.0, 0.0];
        let j2n = jets2(&[(3.0, [0.0, 0.0], [0.0; 4]), (4.0, [1.0, 0.0], [0.0; 4])]);
        let r = interface_rows(&p, (2, 2), Some(&j1), Some(&j2n), &x, Tag::JumpFlux, Some(&n)).unwrap();
        assert_eq!(r.coefficients, vec![-2.0, 0.0, 0.0, 1.0]);
        let err = interface_rows(&p, (2, 2), Some(&j1), Some(&j2), &x, Tag::JumpFlux, None);
        assert!(matches!(err, Err(Error::MissingNormal { .. })));
    }

    #[test]
    fn incompatible_tags() {
        let p = ProblemSpec::advection(DataFn::Constant(1.0)).unwrap();
        let j = jets2(&[(1.0, [0.0; 2], [0.0; 4])]);
        assert!(matches!(
            linear_rows(&p, &j, &[0.0, 0.0], Tag::PeriodicPair, None),
            Err(Error::IncompatibleTag { .. })
        ));
        let b = ProblemSpec::burgers(0.01, DataFn::Constant(0.0)).unwrap();
        assert!(linear_rows(&b, &j, &[0.5, 0.5], Tag::Pde, None).is_err());
        assert!(ProblemSpec::advection(DataFn::Constant(-1.0)).is_err());
        assert!(ProblemSpec::interface(0.0, 1.0, Arc::new(Flat)).is_err());
    }

    #[test]
    fn default_counts() {
        let p = ProblemSpec::advection(DataFn::Constant(1.0)).unwrap();
        let c = CollocationCounts::default_for(&p);
        let s = sample_collocation(&p, c, 1).unwrap();
        assert_eq!(s.interior.len(), 4000);
        assert_eq!(s.boundary.len(), 4000);
        let q = ProblemSpec::interface(2.0, 1.0, Arc::new(Flat)).unwrap();
        let c = CollocationCounts::default_for(&q);
        assert_eq!((c.pde, c.boundary, c.initial), (2000, 1000, 1000));
        let s = sample_collocation(&q, c, 2).unwrap();
        assert_eq!(
            (s.interior.len(), s.boundary.len(), s.interface.len()),
            (2000, 1000, 1000)
        );
        assert_eq!(s, sample_collocation(&q, c, 2).unwrap());
    }

    #[test]
    fn astroid_points_and_normals() {
        let g = Astroid::default();
        assert_eq!(g.point(0.0), [0.65, 0.0]);
        assert!(g.normal(0.0).is_none());
        // one-sided limits at the cusp point along the x2 axis
        let up = g.normal(1e-6).unwrap();
        let down = g.normal(-1e-6).unwrap();
        assert!((up[0]).abs() < 1e-5 && (up[1] - 1.0).abs() < 1e-9);
        assert!((down[0]).abs() < 1e-5 && (down[1] + 1.0).abs() < 1e-9);
        let n = g.normal(PI / 4.0).unwrap();
        assert!((n[0] - n[1]).abs() < 1e-15 && n[0] > 0.0);
    }

    #[test]
    fn interface_samples_lie_on_curve() {
        let q = ProblemSpec::interface(2.0, 1.0, Arc::new(Flat)).unwrap();
        let c = CollocationCounts {
            pde: 10,
            boundary: 10,
            initial: 500,
        };
        let s = sample_collocation(&q, c, 4).unwrap();
        let g = Astroid::default();
        for p in &s.interface {
            assert!(g.level(&p.x).abs() < 1e-10);
            assert!((p.normal[0].hypot(p.normal[1]) - 1.0).abs() < 1e-12);
            // outward: moving along the normal leaves the inner region
            let y = [p.x[0] + 1e-3 * p.normal[0], p.x[1] + 1e-3 * p.normal[1]];
            assert_eq!(g.classify(&y).0, Region::Outer);
        }
        for b in &s.boundary {
            assert!(b.x[0].abs() == 1.0 || b.x[1].abs() == 1.0);
        }
        for p in &s.interior {
            let want = if g.level(&p.x) < 0.0 { Tag::Pde1 } else { Tag::Pde2 };
            assert_eq!(p.tag, want);
        }
    }
}
