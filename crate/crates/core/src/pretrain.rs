//! Desk-scale supervised pre-training of DeepONet and IONet operator models
//! on oracle-generated data.

use std::path::Path;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{Activation, BasisSet, MlpSpec};
use crate::error::{Error, Result};
use crate::field_sampler::{to_coefficient, GrfKind, GrfSampler, GrfSpec, GridFunction};
use crate::nn::{self, Adam, LayerGrad};
use crate::oracle::{solve_advection_lw, solve_diffusion_reaction, ByteReader, Grid, InterfaceExact};
use crate::problems::{Astroid, InterfaceData, Region};

pub const DEFAULT_POINTS_PER_SAMPLE: usize = 100;

/// Hidden widths and output width of one network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub hidden: Vec<usize>,
    pub width: usize,
}

impl NetShape {
    /// Five linear layers, 50 units each.
    pub fn five_by_fifty() -> Self {
        Self {
            hidden: vec![50; 4],
            width: 50,
        }
    }

    fn dims(&self, input: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.width))
            .collect()
    }
}

fn init_net(shape: &NetShape, input: usize, rng: &mut ChaCha8Rng) -> Result<MlpSpec> {
    MlpSpec::new(nn::glorot_layers(&shape.dims(input), rng), Activation::Tanh)
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid("input_scale", "must be finite and positive"));
    }
    Ok(())
}

fn check_input(v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: v.len(),
            context: "branch input (sensor values)".into(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("branch input".into()));
    }
    Ok(())
}

fn branch_forward(net: &MlpSpec, v: &[f64], scale: f64) -> Vec<f64> {
    let x = DMatrix::from_iterator(v.len(), 1, v.iter().map(|a| a * scale));
    net.forward_batch(&x, false).column(0).iter().copied().collect()
}

fn dot_predict(b: &[f64], trunk: &MlpSpec, points: &[Vec<f64>]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let t = BasisSet::trunk(trunk.clone()).values_batch(points)?;
    let b = DVector::from_column_slice(b);
    Ok((t.transpose() * b).iter().copied().collect())
}

/// `G(v)(x) = <branch(v), trunk(x)>`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepOnetSpec {
    pub branch: MlpSpec,
    pub trunk: MlpSpec,
    pub sensors: Vec<Vec<f64>>,
    /// Sensor values are multiplied by this before entering the branch.
    pub input_scale: f64,
}

impl DeepOnetSpec {
    pub fn new(branch: MlpSpec, trunk: MlpSpec, sensors: Vec<Vec<f64>>, input_scale: f64) -> Result<Self> {
        let s = Self {
            branch,
            trunk,
            sensors,
            input_scale,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn init(
        branch: &NetShape,
        trunk: &NetShape,
        sensors: Vec<Vec<f64>>,
        coord_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if branch.width != trunk.width {
            return Err(Error::invalid("width", "branch and trunk output widths differ"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = init_net(branch, sensors.len(), &mut rng)?;
        let t = init_net(trunk, coord_dim, &mut rng)?;
        Self::new(b, t, sensors, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch.output_dim() != self.trunk.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.trunk.output_dim(),
                got: self.branch.output_dim(),
                context: "branch output width vs trunk output width".into(),
            });
        }
        if self.branch.input_dim() != self.sensors.len() {
            return Err(Error::DimensionMismatch {
                expected: self.sensors.len(),
                got: self.branch.input_dim(),
                context: "branch input width vs sensor count".into(),
            });
        }
        validate_sensors(&self.sensors, false)?;
        check_scale(self.input_scale)
    }

    pub fn width(&self) -> usize {
        self.trunk.output_dim()
    }

    /// Branch coefficients; the natural warm start for Newton-LLSQ.
    pub fn branch_output(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_input(v, self.sensors.len())?;
        Ok(branch_forward(&self.branch, v, self.input_scale))
    }

    pub fn predict(&self, v: &[f64], points: &[Vec<f64>]) -> Result<Vec<f64>> {
        dot_predict(&self.branch_output(v)?, &self.trunk, points)
    }

    pub fn trunk_basis(&self) -> BasisSet {
        BasisSet::trunk(self.trunk.clone())
    }
}

fn validate_sensors(sensors: &[Vec<f64>], symmetric: bool) -> Result<()> {
    let d = sensors.first().map_or(0, Vec::len);
    if sensors.is_empty() || d == 0 {
        return Err(Error::invalid("sensors", "at least one sensor is required"));
    }
    let (lo, hi) = if symmetric { (-1.0, 1.0) } else { (0.0, 1.0) };
    for s in sensors {
        if s.len() != d || s.iter().any(|v| !(lo..=hi).contains(v)) {
            return Err(Error::invalid("sensors", format!("sensor {s:?} outside the domain")));
        }
    }
    if sensors
        .windows(2)
        .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::invalid("sensors", "must be strictly sorted"));
    }
    Ok(())
}

/// Two-subdomain operator model: the branch coefficients are the Hadamard
/// product of two branch nets, and each subdomain has its own trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct IonetSpec {
    pub branch_inner: MlpSpec,
    pub branch_outer: MlpSpec,
    pub trunk_inner: MlpSpec,
    pub trunk_outer: MlpSpec,
    pub sensors_inner: Vec<Vec<f64>>,
    pub sensors_outer: Vec<Vec<f64>>,
    pub input_scale: f64,
    pub geometry: Astroid,
}

impl IonetSpec {
    pub fn init(
        branch: &NetShape,
        trunk: &NetShape,
        sensors_inner: Vec<Vec<f64>>,
        sensors_outer: Vec<Vec<f64>>,
        geometry: Astroid,
        seed: u64,
    ) -> Result<Self> {
        if branch.width != trunk.width {
            return Err(Error::invalid("width", "branch and trunk output widths differ"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Self {
            branch_inner: init_net(branch, sensors_inner.len(), &mut rng)?,
            branch_outer: init_net(branch, sensors_outer.len(), &mut rng)?,
            trunk_inner: init_net(trunk, 2, &mut rng)?,
            trunk_outer: init_net(trunk, 2, &mut rng)?,
            sensors_inner,
            sensors_outer,
            input_scale: 1.0,
            geometry,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.trunk_inner.output_dim();
        for (name, net) in [
            ("branch_inner", &self.branch_inner),
            ("branch_outer", &self.branch_outer),
            ("trunk_outer", &self.trunk_outer),
        ] {
            if net.output_dim() != w {
                return Err(Error::DimensionMismatch {
                    expected: w,
                    got: net.output_dim(),
                    context: format!("output width of {name}"),
                });
            }
        }
        for (net, sensors, name) in [
            (&self.branch_inner, &self.sensors_inner, "inner"),
            (&self.branch_outer, &self.sensors_outer, "outer"),
        ] {
            if net.input_dim() != sensors.len() {
                return Err(Error::DimensionMismatch {
                    expected: sensors.len(),
                    got: net.input_dim(),
                    context: format!("{name} branch input width vs sensor count"),
                });
            }
            validate_sensors(sensors, true)?;
        }
        if self.trunk_inner.input_dim() != 2 || self.trunk_outer.input_dim() != 2 {
            return Err(Error::invalid("trunk", "IONet trunks take 2-D coordinates"));
        }
        check_scale(self.input_scale)
    }

    pub fn width(&self) -> usize {
        self.trunk_inner.output_dim()
    }

    /// `b = branch_inner(v_inner) .* branch_outer(v_outer)`; `v` holds the
    /// inner sensor values followed by the outer ones.
    pub fn branch_output(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n1 = self.sensors_inner.len();
        check_input(v, n1 + self.sensors_outer.len())?;
        let b1 = branch_forward(&self.branch_inner, &v[..n1], self.input_scale);
        let b2 = branch_forward(&self.branch_outer, &v[n1..], self.input_scale);
        Ok(b1.iter().zip(&b2).map(|(a, b)| a * b).collect())
    }

    pub fn predict(&self, v: &[f64], points: &[Vec<f64>]) -> Result<Vec<f64>> {
        let b = self.branch_output(v)?;
        let mut split = [Vec::new(), Vec::new()];
        for (k, x) in points.iter().enumerate() {
            split[(self.geometry.classify(x).0 == Region::Outer) as usize].push(k);
        }
        let mut out = vec![0.0; points.len()];
        for (idx, trunk) in split.iter().zip([&self.trunk_inner, &self.trunk_outer]) {
            let pts: Vec<Vec<f64>> = idx.iter().map(|&k| points[k].clone()).collect();
            for (k, v) in idx.iter().zip(dot_predict(&b, trunk, &pts)?) {
                out[*k] = v;
            }
        }
        Ok(out)
    }

    /// Warm start `(b, b)` over the concatenated inner and outer coefficients.
    pub fn warm_start(&self, v: &[f64]) -> Result<Vec<f64>> {
        let b = self.branch_output(v)?;
        Ok(b.iter().chain(&b).copied().collect())
    }

    pub fn trunk_bases(&self) -> (BasisSet, BasisSet) {
        (
            BasisSet::trunk(self.trunk_inner.clone()),
            BasisSet::trunk(self.trunk_outer.clone()),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorModel {
    DeepOnet(DeepOnetSpec),
    Ionet(IonetSpec),
}

impl OperatorModel {
    pub fn predict(&self, v: &[f64], points: &[Vec<f64>]) -> Result<Vec<f64>> {
        match self {
            Self::DeepOnet(m) => m.predict(v, points),
            Self::Ionet(m) => m.predict(v, points),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Self::DeepOnet(m) => m.width(),
            Self::Ionet(m) => m.width(),
        }
    }
}

/// What the dataset's input functions are and which oracle labels them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DatasetFamily {
    /// Input `v` from the GRF, coefficient `a = v - min v + 1`, label by
    /// Lax-Wendroff.
    Advection,
    /// Input source `f` from the GRF, label by Crank-Nicolson.
    DiffusionReaction { diffusion: f64, reaction: f64 },
    /// Input source of the exact interface family, `m ~ U[m_min, m_max]`,
    /// sensed on a uniform `sensors_per_axis^2` grid split by region.
    Interface {
        m_min: f64,
        m_max: f64,
        sensors_per_axis: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Sensor values (raw, before `input_scale`).
    pub input: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    pub values: Vec<f64>,
    /// Family parameter (`m` for the interface family), NaN otherwise.
    pub parameter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// All sensors; for the interface family the inner ones come first.
    pub sensors: Vec<Vec<f64>>,
    pub inner_sensors: usize,
    pub samples: Vec<Sample>,
}

const DATASET_MAGIC: &[u8; 4] = b"FBDS";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    pub fn max_abs_input(&self) -> f64 {
        self.samples
            .iter()
            .flat_map(|s| s.input.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Compact little-endian binary form.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        let d = self.sensors.first().map_or(0, Vec::len);
        for n in [self.sensors.len(), d, self.inner_sensors, self.samples.len()] {
            buf.extend_from_slice(&(n as u64).to_le_bytes());
        }
        let mut put = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
        for s in &self.sensors {
            s.iter().for_each(|v| put(*v));
        }
        let mut tail = Vec::new();
        for s in &self.samples {
            tail.extend_from_slice(&(s.points.len() as u64).to_le_bytes());
            tail.extend_from_slice(&s.parameter.to_le_bytes());
            for v in s.input.iter().chain(s.points.iter().flatten()).chain(&s.values) {
                tail.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&tail);
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader::new(&bytes, path);
        if r.take(4)? != DATASET_MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != DATASET_VERSION {
            return Err(r.err(&format!("unknown version {version}")));
        }
        let n_sensors = r.u64()? as usize;
        let d = r.u64()? as usize;
        let inner_sensors = r.u64()? as usize;
        let n_samples = r.u64()? as usize;
        if inner_sensors > n_sensors || n_sensors.saturating_mul(d) > bytes.len() {
            return Err(r.err("inconsistent header"));
        }
        let sensors = (0..n_sensors)
            .map(|_| (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let mut samples = Vec::with_capacity(n_samples.min(bytes.len() / 8));
        for _ in 0..n_samples {
            let p = r.u64()? as usize;
            if p > bytes.len() {
                return Err(r.err("point count exceeds file size"));
            }
            let parameter = r.f64()?;
            let input = (0..n_sensors).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let points = (0..p).map(|_| Ok([r.f64()?, r.f64()?])).collect::<Result<Vec<_>>>()?;
            let values = (0..p).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            samples.push(Sample {
                input,
                points,
                values,
                parameter,
            });
        }
        if r.take(1).is_ok() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self {
            sensors,
            inner_sensors,
            samples,
        })
    }
}

/// Uniform grid sensors on `[-1, 1]^2` split into (inner, outer), dropping
/// points on the interface.
pub fn interface_sensors(geometry: &Astroid, per_axis: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let axis = crate::field_sampler::linspace(-1.0, 1.0, per_axis);
    let mut inner = Vec::new();
    let mut outer = Vec::new();
    for &a in &axis {
        for &b in &axis {
            let x = vec![a, b];
            match geometry.classify(&x) {
                (_, true) => {}
                (Region::Inner, _) => inner.push(x),
                (Region::Outer, _) => outer.push(x),
            }
        }
    }
    (inner, outer)
}

/// Interface-family branch input for parameter `m`.
pub fn interface_input(m: f64, inner: &[Vec<f64>], outer: &[Vec<f64>]) -> Result<Vec<f64>> {
    let e = InterfaceExact::new(m)?;
    Ok(inner
        .iter()
        .map(|x| e.source(Region::Inner, x))
        .chain(outer.iter().map(|x| e.source(Region::Outer, x)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub family: DatasetFamily,
    /// Required for the GRF-driven families.
    pub grf: Option<GrfSpec>,
    pub samples: usize,
    pub points_per_sample: usize,
    pub oracle_grid: Grid,
    pub seed: u64,
}

/// `samples` input functions labelled by the family's oracle at random
/// evaluation points. Oracle solves run in parallel.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.samples == 0 || cfg.points_per_sample == 0 {
        return Err(Error::invalid(
            "samples",
            "dataset size and points per sample must be positive",
        ));
    }
    let point_rng = |i: usize| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(i as u64 + 1);
        r
    };
    match &cfg.family {
        DatasetFamily::Interface {
            m_min,
            m_max,
            sensors_per_axis,
        } => {
            if !(*m_min > 0.0 && m_max >= m_min) {
                return Err(Error::invalid("m_range", "need 0 < m_min <= m_max"));
            }
            let geometry = Astroid::default();
            let (inner, outer) = interface_sensors(&geometry, *sensors_per_axis);
            if inner.is_empty() || outer.is_empty() {
                return Err(Error::invalid("sensors_per_axis", "both subdomains need sensors"));
            }
            let samples = (0..cfg.samples)
                .into_par_iter()
                .map(|i| {
                    let mut rng = point_rng(i);
                    let m = if m_max > m_min {
                        rng.gen_range(*m_min..*m_max)
                    } else {
                        *m_min
                    };
                    let e = InterfaceExact::new(m)?;
                    let points: Vec<[f64; 2]> = (0..cfg.points_per_sample)
                        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                        .collect();
                    Ok(Sample {
                        input: interface_input(m, &inner, &outer)?,
                        values: points.iter().map(|p| e.u(p)).collect(),
                        points,
                        parameter: m,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let inner_sensors = inner.len();
            Ok(Dataset {
                sensors: inner.into_iter().chain(outer).collect(),
                inner_sensors,
                samples,
            })
        }
        family => {
            let grf = cfg
                .grf
                .as_ref()
                .ok_or_else(|| Error::invalid("grf", "GRF spec required for this family"))?;
            let GrfKind::RbfKernel { grid, .. } = &grf.kind else {
                return Err(Error::invalid("grf", "operator datasets use an RBF-kernel GRF"));
            };
            let mut sampler = GrfSampler::new(grf.clone())?;
            let inputs: Vec<GridFunction> = (0..cfg.samples).map(|_| sampler.sample_rbf()).collect::<Result<_>>()?;
            let samples = inputs
                .into_par_iter()
                .enumerate()
                .map(|(i, v)| {
                    label_sample(family, &v, cfg.oracle_grid, cfg.points_per_sample, &mut point_rng(i)).map_err(|e| {
                        Error::Sample {
                            index: i,
                            source: Box::new(e),
                        }
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset {
                sensors: grid.iter().map(|&x| vec![x]).collect(),
                inner_sensors: grid.len(),
                samples,
            })
        }
    }
}

fn label_sample(
    family: &DatasetFamily,
    v: &GridFunction,
    grid: Grid,
    points: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let (input, solution) = match family {
        DatasetFamily::Advection => {
            let a = to_coefficient(v);
            let sol = solve_advection_lw(&|x| a.eval(x), grid, None)?;
            (a.values().to_vec(), sol)
        }
        DatasetFamily::DiffusionReaction { diffusion, reaction } => {
            let sol = solve_diffusion_reaction(&|x, _| v.eval(x), *diffusion, *reaction, grid)?;
            (v.values().to_vec(), sol)
        }
        DatasetFamily::Interface { .. } => unreachable!("closed-form family"),
    };
    let pts: Vec<[f64; 2]> = (0..points).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
    Ok(Sample {
        input,
        values: pts.iter().map(|p| solution.sample(p[0], p[1])).collect(),
        points: pts,
        parameter: f64::NAN,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Input functions per optimiser step.
    pub batch_samples: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_samples: 10,
            lr: 1e-3,
            lr_decay: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_samples == 0 {
            return Err(Error::invalid("epochs/batch_samples", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr", "need lr > 0 and 0 < lr_decay <= 1"));
        }
        Ok(())
    }
}

/// Mean loss per epoch.
pub type LossTrace = Vec<f64>;

struct Batch {
    inputs: DMatrix<f64>,
    points: DMatrix<f64>,
    owner: Vec<usize>,
    targets: Vec<f64>,
}

fn make_batch(samples: &[&Sample], input_range: std::ops::Range<usize>, scale: f64) -> Batch {
    let m = input_range.len();
    let inputs = DMatrix::from_fn(m, samples.len(), |r, c| scale * samples[c].input[input_range.start + r]);
    let n: usize = samples.iter().map(|s| s.points.len()).sum();
    let mut points = DMatrix::zeros(2, n);
    let mut owner = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut k = 0;
    for (c, s) in samples.iter().enumerate() {
        for (p, v) in s.points.iter().zip(&s.values) {
            points[(0, k)] = p[0];
            points[(1, k)] = p[1];
            owner.push(c);
            targets.push(*v);
            k += 1;
        }
    }
    Batch {
        inputs,
        points,
        owner,
        targets,
    }
}

/// Residuals `pred - target` and the gradient of the mean squared loss
/// with respect to branch outputs and trunk outputs.
fn dot_loss(
    b: &DMatrix<f64>,
    t: &DMatrix<f64>,
    owner: &[usize],
    targets: &[f64],
    n_total: usize,
) -> (f64, DMatrix<f64>, DMatrix<f64>) {
    let mut loss = 0.0;
    let mut db = DMatrix::zeros(b.nrows(), b.ncols());
    let mut dt = DMatrix::zeros(t.nrows(), t.ncols());
    for (k, (&s, &y)) in owner.iter().zip(targets).enumerate() {
        let r = b.column(s).dot(&t.column(k)) - y;
        loss += r * r;
        let g = 2.0 * r / n_total as f64;
        dt.column_mut(k).axpy(g, &b.column(s), 0.0);
        db.column_mut(s).axpy(g, &t.column(k), 1.0);
    }
    (loss / n_total as f64, db, dt)
}

fn deeponet_loss_grad(spec: &DeepOnetSpec, batch: &Batch) -> (f64, Vec<LayerGrad>, Vec<LayerGrad>) {
    let act = spec.trunk.activation();
    let tb = nn::forward(spec.branch.layers(), act, &batch.inputs, false);
    let tt = nn::forward(spec.trunk.layers(), act, &batch.points, false);
    let (loss, db, dt) = dot_loss(&tb.output, &tt.output, &batch.owner, &batch.targets, batch.owner.len());
    let (gb, _) = nn::backward(spec.branch.layers(), &tb, db, false);
    let (gt, _) = nn::backward(spec.trunk.layers(), &tt, dt, false);
    (loss, gb, gt)
}

/// Flat parameter vector of a DeepONet (branch then trunk).
pub fn deeponet_params(spec: &DeepOnetSpec) -> Vec<f64> {
    let mut p = Vec::new();
    nn::pack(spec.branch.layers(), &mut p);
    nn::pack(spec.trunk.layers(), &mut p);
    p
}

fn set_params(nets: &mut [&mut MlpSpec], p: &[f64]) -> Result<()> {
    let mut k = 0;
    for net in nets.iter_mut() {
        let mut layers = net.layers().to_vec();
        k += nn::unpack(&mut layers, &p[k..]);
        **net = MlpSpec::new(layers, net.activation())?;
    }
    Ok(())
}

pub fn set_deeponet_params(spec: &mut DeepOnetSpec, p: &[f64]) -> Result<()> {
    set_params(&mut [&mut spec.branch, &mut spec.trunk], p)
}

/// Mean squared error over `samples` and its gradient w.r.t.
/// [`deeponet_params`].
pub fn deeponet_loss_and_gradient(spec: &DeepOnetSpec, samples: &[&Sample]) -> (f64, Vec<f64>) {
    let batch = make_batch(samples, 0..spec.sensors.len(), spec.input_scale);
    let (loss, gb, gt) = deeponet_loss_grad(spec, &batch);
    let mut g = Vec::new();
    nn::pack_grads(&gb, &mut g);
    nn::pack_grads(&gt, &mut g);
    (loss, g)
}

fn ionet_batches(spec: &IonetSpec, samples: &[&Sample]) -> (Batch, Batch, DMatrix<f64>) {
    let n1 = spec.sensors_inner.len();
    let n2 = spec.sensors_outer.len();
    let mut inner = Vec::new();
    let mut outer = Vec::new();
    for (c, s) in samples.iter().enumerate() {
        for (p, v) in s.points.iter().zip(&s.values) {
            let dest = if spec.geometry.classify(p).0 == Region::Inner {
                &mut inner
            } else {
                &mut outer
            };
            dest.push((c, *p, *v));
        }
    }
    let build = |list: &[(usize, [f64; 2], f64)], inputs: DMatrix<f64>| Batch {
        inputs,
        points: DMatrix::from_fn(2, list.len(), |r, k| list[k].1[r]),
        owner: list.iter().map(|e| e.0).collect(),
        targets: list.iter().map(|e| e.2).collect(),
    };
    let v1 = DMatrix::from_fn(n1, samples.len(), |r, c| spec.input_scale * samples[c].input[r]);
    let v2 = DMatrix::from_fn(n2, samples.len(), |r, c| spec.input_scale * samples[c].input[n1 + r]);
    (build(&inner, v1), build(&outer, DMatrix::zeros(0, 0)), v2)
}

/// Flat parameter vector of an IONet (branch inner, branch outer, trunk
/// inner, trunk outer).
pub fn ionet_params(spec: &IonetSpec) -> Vec<f64> {
    let mut p = Vec::new();
    for net in [
        &spec.branch_inner,
        &spec.branch_outer,
        &spec.trunk_inner,
        &spec.trunk_outer,
    ] {
        nn::pack(net.layers(), &mut p);
    }
    p
}

pub fn set_ionet_params(spec: &mut IonetSpec, p: &[f64]) -> Result<()> {
    set_params(
        &mut [
            &mut spec.branch_inner,
            &mut spec.branch_outer,
            &mut spec.trunk_inner,
            &mut spec.trunk_outer,
        ],
        p,
    )
}

pub fn ionet_loss_and_gradient(spec: &IonetSpec, samples: &[&Sample]) -> (f64, Vec<f64>) {
    let act = spec.trunk_inner.activation();
    let (inner, outer, v2) = ionet_batches(spec, samples);
    let n_total = inner.owner.len() + outer.owner.len();
    let t1 = nn::forward(spec.branch_inner.layers(), act, &inner.inputs, false);
    let t2 = nn::forward(spec.branch_outer.layers(), act, &v2, false);
    let b = t1.output.component_mul(&t2.output);
    let tr1 = nn::forward(spec.trunk_inner.layers(), act, &inner.points, false);
    let tr2 = nn::forward(spec.trunk_outer.layers(), act, &outer.points, false);
    let (l1, db1, dt1) = dot_loss(&b, &tr1.output, &inner.owner, &inner.targets, n_total);
    let (l2, db2, dt2) = dot_loss(&b, &tr2.output, &outer.owner, &outer.targets, n_total);
    let db = db1 + db2;
    let (gb1, _) = nn::backward(spec.branch_inner.layers(), &t1, db.component_mul(&t2.output), false);
    let (gb2, _) = nn::backward(spec.branch_outer.layers(), &t2, db.component_mul(&t1.output), false);
    let (gt1, _) = nn::backward(spec.trunk_inner.layers(), &tr1, dt1, false);
    let (gt2, _) = nn::backward(spec.trunk_outer.layers(), &tr2, dt2, false);
    let mut g = Vec::new();
    for grads in [&gb1, &gb2, &gt1, &gt2] {
        nn::pack_grads(grads, &mut g);
    }
    (l1 + l2, g)
}

fn train_loop(
    mut params: Vec<f64>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut loss_grad: impl FnMut(&[f64], &[&Sample]) -> Result<(f64, Vec<f64>)>,
) -> Result<(Vec<f64>, LossTrace)> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::invalid("dataset", "no samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_samples) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let (loss, g) = loss_grad(&params, &batch)?;
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged { iteration: step });
            }
            opt.step(&mut params, &g);
            total += loss;
            batches += 1;
            step += 1;
        }
        let mean = total / batches as f64;
        if epoch % 10 == 0 || epoch + 1 == cfg.epochs {
            info!("epoch {epoch}: loss {mean:.4e}");
        }
        trace.push(mean);
        opt.lr *= cfg.lr_decay;
    }
    Ok((params, trace))
}

/// Minimise the mean squared prediction error with Adam. The input scale is
/// set to `1 / max |input|` over the dataset.
pub fn train_deeponet(mut spec: DeepOnetSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(DeepOnetSpec, LossTrace)> {
    if data.sensors != spec.sensors {
        return Err(Error::invalid("dataset", "sensors differ from the model's"));
    }
    let max = data.max_abs_input();
    spec.input_scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    let mut work = spec.clone();
    let (params, trace) = train_loop(deeponet_params(&spec), data, cfg, |p, batch| {
        set_deeponet_params(&mut work, p)?;
        Ok(deeponet_loss_and_gradient(&work, batch))
    })?;
    set_deeponet_params(&mut spec, &params)?;
    Ok((spec, trace))
}

pub fn train_ionet(mut spec: IonetSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(IonetSpec, LossTrace)> {
    let n1 = spec.sensors_inner.len();
    if data.inner_sensors != n1
        || data.sensors[..n1] != spec.sensors_inner[..]
        || data.sensors[n1..] != spec.sensors_outer[..]
    {
        return Err(Error::invalid("dataset", "sensors differ from the model's"));
    }
    let max = data.max_abs_input();
    spec.input_scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    let mut work = spec.clone();
    let (params, trace) = train_loop(ionet_params(&spec), data, cfg, |p, batch| {
        set_ionet_params(&mut work, p)?;
        Ok(ionet_loss_and_gradient(&work, batch))
    })?;
    set_ionet_params(&mut spec, &params)?;
    Ok((spec, trace))
}

/// Mean over samples of the relative L2 prediction error at the sample's
/// evaluation points.
pub fn mean_relative_error(model: &OperatorModel, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for s in &data.samples {
        let pts: Vec<Vec<f64>> = s.points.iter().map(|p| p.to_vec()).collect();
        let pred = model.predict(&s.input, &pts)?;
        let num: f64 = pred.iter().zip(&s.values).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = s.values.iter().map(|b| b * b).sum();
        total += if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    }
    Ok(total / data.samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_deeponet() -> (DeepOnetSpec, Dataset) {
        let sensors: Vec<Vec<f64>> = crate::field_sampler::linspace(0.0, 1.0, 5)
            .into_iter()
            .map(|x| vec![x])
            .collect();
        let shape = NetShape {
            hidden: vec![6, 6],
            width: 4,
        };
        let spec = DeepOnetSpec::init(&shape, &shape, sensors.clone(), 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples = (0..4)
            .map(|_| Sample {
                input: (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                points: (0..7).map(|_| [rng.gen(), rng.gen()]).collect(),
                values: (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                parameter: f64::NAN,
            })
            .collect();
        (
            spec,
            Dataset {
                sensors,
                inner_sensors: 5,
                samples,
            },
        )
    }

    fn directional_check(p: &[f64], g: &[f64], mut loss: impl FnMut(&[f64]) -> f64) {
        let dir: Vec<f64> = (0..p.len()).map(|k| ((k as f64) * 0.71 + 0.3).sin()).collect();
        let h = 1e-5;
        let at = |s: f64| -> Vec<f64> { p.iter().zip(&dir).map(|(a, d)| a + s * d).collect() };
        let fd = (loss(&at(h)) - loss(&at(-h))) / (2.0 * h);
        let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() < 1e-4 * an.abs().max(1e-8), "fd {fd} vs backprop {an}");
    }

    #[test]
    fn deeponet_gradient_matches_finite_differences() {
        let (spec, data) = toy_deeponet();
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let (_, g) = deeponet_loss_and_gradient(&spec, &batch);
        let mut work = spec.clone();
        directional_check(&deeponet_params(&spec), &g, |q| {
            set_deeponet_params(&mut work, q).unwrap();
            deeponet_loss_and_gradient(&work, &batch).0
        });
    }

    #[test]
    fn ionet_gradient_matches_finite_differences() {
        let geometry = Astroid::default();
        let (inner, outer) = interface_sensors(&geometry, 6);
        let shape = NetShape {
            hidden: vec![5],
            width: 3,
        };
        let spec = IonetSpec::init(&shape, &shape, inner.clone(), outer.clone(), geometry, 1).unwrap();
        let data = generate_dataset(&DatasetConfig {
            family: DatasetFamily::Interface {
                m_min: 1.0,
                m_max: 5.0,
                sensors_per_axis: 6,
            },
            grf: None,
            samples: 3,
            points_per_sample: 20,
            oracle_grid: Grid::symmetric(3),
            seed: 2,
        })
        .unwrap();
        let mut spec = spec;
        spec.input_scale = 0.05;
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let (_, g) = ionet_loss_and_gradient(&spec, &batch);
        let mut work = spec.clone();
        directional_check(&ionet_params(&spec), &g, |q| {
            set_ionet_params(&mut work, q).unwrap();
            ionet_loss_and_gradient(&work, &batch).0
        });
    }

    #[test]
    fn one_epoch_on_constant_pair_descends() {
        let (spec, mut data) = toy_deeponet();
        data.samples.truncate(1);
        data.samples[0].input = vec![1.0; 5];
        data.samples[0].values = vec![0.5; 7];
        let batch: Vec<&Sample> = data.samples.iter().collect();
        let before = deeponet_loss_and_gradient(&spec, &batch).0;
        let cfg = TrainConfig {
            epochs: 1,
            batch_samples: 1,
            lr: 1e-2,
            ..Default::default()
        };
        let (trained, _) = train_deeponet(spec, &data, &cfg).unwrap();
        let after = deeponet_loss_and_gradient(&trained, &batch).0;
        assert!(after < before);
    }

    #[test]
    fn prediction_is_dot_product() {
        let (spec, data) = toy_deeponet();
        let v = &data.samples[0].input;
        let x = vec![vec![0.3, 0.6]];
        let b = spec.branch_output(v).unwrap();
        let t = spec.trunk_basis().values(&x[0]).unwrap();
        let expect: f64 = b.iter().zip(&t).map(|(a, c)| a * c).sum();
        assert!((spec.predict(v, &x).unwrap()[0] - expect).abs() < 1e-14);
        assert!(spec.predict(&v[..3], &x).is_err());
    }

    #[test]
    fn zero_trunk_gives_zero() {
        let (mut spec, data) = toy_deeponet();
        let mut layers = spec.trunk.layers().to_vec();
        let last = layers.len() - 1;
        layers[last].weight.fill(0.0);
        layers[last].bias.fill(0.0);
        spec.trunk = MlpSpec::new(layers, Activation::Tanh).unwrap();
        let p = spec.predict(&data.samples[1].input, &[vec![0.2, 0.9]]).unwrap();
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn hadamard_with_unit_outer_branch() {
        let geometry = Astroid::default();
        let (inner, outer) = interface_sensors(&geometry, 8);
        let shape = NetShape {
            hidden: vec![4],
            width: 3,
        };
        let mut spec = IonetSpec::init(&shape, &shape, inner.clone(), outer.clone(), geometry, 5).unwrap();
        let mut layers = spec.branch_outer.layers().to_vec();
        let last = layers.len() - 1;
        layers[last].weight.fill(0.0);
        layers[last].bias.fill(1.0);
        spec.branch_outer = MlpSpec::new(layers, Activation::Tanh).unwrap();
        let v = interface_input(2.0, &inner, &outer).unwrap();
        let b = spec.branch_output(&v).unwrap();
        let b1 = branch_forward(&spec.branch_inner, &v[..inner.len()], spec.input_scale);
        assert_eq!(b, b1);
        // A point in the inner region only sees the inner trunk.
        let x = vec![vec![0.05, 0.0]];
        let t = BasisSet::trunk(spec.trunk_inner.clone()).values(&x[0]).unwrap();
        let expect: f64 = b.iter().zip(&t).map(|(a, c)| a * c).sum();
        assert!((spec.predict(&v, &x).unwrap()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn zero_source_gives_zero_target() {
        let v = GridFunction::constant(crate::field_sampler::linspace(0.0, 1.0, 20), 0.0).unwrap();
        let s = label_sample(
            &DatasetFamily::DiffusionReaction {
                diffusion: 0.01,
                reaction: 0.01,
            },
            &v,
            Grid::square(21),
            10,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(s.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn interface_dataset_covers_m10_and_round_trips() {
        let cfg = DatasetConfig {
            family: DatasetFamily::Interface {
                m_min: 1.0,
                m_max: 20.0,
                sensors_per_axis: 10,
            },
            grf: None,
            samples: 50,
            points_per_sample: 10,
            oracle_grid: Grid::symmetric(3),
            seed: 4,
        };
        let data = generate_dataset(&cfg).unwrap();
        let ms: Vec<f64> = data.samples.iter().map(|s| s.parameter).collect();
        assert!(ms.iter().any(|m| *m < 10.0) && ms.iter().any(|m| *m > 10.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        data.write_binary(&path).unwrap();
        assert_eq!(Dataset::read_binary(&path).unwrap(), data);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Dataset::read_binary(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn diffusion_reaction_dataset_round_trips() {
        let cfg = DatasetConfig {
            family: DatasetFamily::DiffusionReaction {
                diffusion: 0.01,
                reaction: 0.01,
            },
            grf: Some(GrfSpec::rbf(0.2, 30, 1)),
            samples: 3,
            points_per_sample: 5,
            oracle_grid: Grid::square(41),
            seed: 4,
        };
        let data = generate_dataset(&cfg).unwrap();
        assert_eq!(data.sensors.len(), 30);
        assert_eq!(data.samples[0].input.len(), 30);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        data.write_binary(&path).unwrap();
        let back = Dataset::read_binary(&path).unwrap();
        // NaN parameters compare unequal; check them separately.
        assert!(back.samples.iter().all(|s| s.parameter.is_nan()));
        assert_eq!(back.samples[2].values, data.samples[2].values);
        assert_eq!(back.sensors, data.sensors);
    }
}
