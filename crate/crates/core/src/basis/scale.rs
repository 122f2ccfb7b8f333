use super::mlp::MlpSpec;
use crate::error::{Error, Result};

/// Input scales `p_j` for a scaled-union expansion. The first entry is
/// always 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet {
    values: Vec<f64>,
}

/// Bound on the first-layer pre-activations, roughly the useful range of tanh.
pub const ACTIVATION_RANGE: f64 = 3.0;
const GRID_START: f64 = 0.1;
const GRID_RATIO: f64 = 1.25;

impl ScaleSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("scales", "empty scale set"));
        }
        if values.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::invalid("scales", "all scales must be positive and finite"));
        }
        let ones = values.iter().filter(|&&p| p == 1.0).count();
        if ones != 1 {
            return Err(Error::invalid(
                "scales",
                format!("scale 1 must appear exactly once (found {ones})"),
            ));
        }
        Ok(Self { values })
    }

    pub fn identity() -> Self {
        Self { values: vec![1.0] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `{1} ∪ {0.1 + j h : j = 0..J-2}` with `h = (p - 0.1) / (J - 2)`, for `J > 2`.
    pub fn from_upper_scale(count: usize, p: f64) -> Result<Self> {
        match count {
            0 => Err(Error::invalid("J", "need at least one scale")),
            1 => Ok(Self::identity()),
            2 => Self::new(vec![1.0, GRID_START]),
            _ => {
                let h = (p - GRID_START) / (count - 2) as f64;
                let mut values = vec![1.0];
                values.extend((0..count - 1).map(|j| GRID_START + j as f64 * h));
                Self::new(values)
            }
        }
    }
}

/// Largest `p = 0.1 * 1.25^k < 1` such that `|p W_1 x + b_1|_inf <= 3` at every
/// sample point.
pub fn max_admissible_scale(trunk: &MlpSpec, sample_points: &[Vec<f64>]) -> Result<f64> {
    let first = trunk.first_layer();
    let fits = |p: f64| {
        sample_points.iter().all(|x| {
            (0..first.out_dim()).all(|r| {
                let z: f64 = (0..first.in_dim())
                    .map(|c| first.weight[(r, c)] * p * x[c])
                    .sum::<f64>()
                    + first.bias[r];
                z.abs() <= ACTIVATION_RANGE
            })
        })
    };
    let mut best = None;
    let mut p = GRID_START;
    while p < 1.0 {
        if fits(p) {
            best = Some(p);
        } else {
            break;
        }
        p *= GRID_RATIO;
    }
    best.ok_or(Error::NoAdmissibleScale)
}

/// Scale-set rule for trunk expansion: `{1}` for `J = 1`, `{1, 0.1}` for
/// `J = 2`, and an even spread between 0.1 and the largest admissible scale
/// for `J > 2`.
pub fn compute_scale_set(trunk: &MlpSpec, count: usize, sample_points: &[Vec<f64>]) -> Result<ScaleSet> {
    if count == 0 {
        return Err(Error::invalid("J", "need at least one scale"));
    }
    if count <= 2 {
        return ScaleSet::from_upper_scale(count, GRID_START);
    }
    if sample_points.is_empty() {
        return Err(Error::invalid("sample_points", "required for J > 2"));
    }
    for x in sample_points {
        if x.len() != trunk.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: trunk.input_dim(),
                got: x.len(),
                context: "scale-set sample point".into(),
            });
        }
    }
    let p = max_admissible_scale(trunk, sample_points)?;
    ScaleSet::from_upper_scale(count, p)
}
