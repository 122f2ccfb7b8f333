//! `.fbw.json` weight files for plain MLPs, DeepONets and IONets.
//!
//! Files are canonical JSON: fixed key order, shortest round-trip decimals,
//! weight matrices as lists of rows. See `docs/weight-format.md`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{Activation, Layer, MlpSpec};
use crate::error::{Error, Result};
use crate::pretrain::{DeepOnetSpec, IonetSpec};
use crate::problems::Astroid;

pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = ".fbw.json";

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mlp(MlpSpec),
    DeepOnet(DeepOnetSpec),
    Ionet(IonetSpec),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Mlp(_) => "mlp",
            Model::DeepOnet(_) => "deeponet",
            Model::Ionet(_) => "ionet",
        }
    }

    /// The network whose outputs form the basis: the MLP itself or the
    /// DeepONet trunk. IONets have two and return `None`.
    pub fn trunk(&self) -> Option<&MlpSpec> {
        match self {
            Model::Mlp(m) => Some(m),
            Model::DeepOnet(d) => Some(&d.trunk),
            Model::Ionet(_) => None,
        }
    }
}

/// A model plus free-form provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub model: Model,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl WeightFile {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    /// `d_out` rows of `d_in` entries; `null` marks a non-finite token.
    weight: Vec<Vec<Option<f64>>>,
    bias: Vec<Option<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNet {
    dims: Vec<usize>,
    layers: Vec<RawLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    kind: String,
    radius: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    format_version: u32,
    model_kind: String,
    #[serde(default = "default_architecture")]
    architecture: String,
    activation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_scale: Option<f64>,
    nets: BTreeMap<String, RawNet>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    sensors: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geometry: Option<RawGeometry>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

fn default_architecture() -> String {
    "fnn".into()
}

fn raw_net(net: &MlpSpec) -> RawNet {
    RawNet {
        dims: net.dims(),
        layers: net
            .layers()
            .iter()
            .map(|l| RawLayer {
                weight: l
                    .weight
                    .row_iter()
                    .map(|r| r.iter().map(|v| Some(*v)).collect())
                    .collect(),
                bias: l.bias.iter().map(|v| Some(*v)).collect(),
            })
            .collect(),
    }
}

fn sensors_of(s: &[Vec<f64>]) -> Vec<Vec<f64>> {
    s.to_vec()
}

fn to_raw(file: &WeightFile) -> RawFile {
    let mut nets = BTreeMap::new();
    let mut sensors = BTreeMap::new();
    let mut input_scale = None;
    let mut geometry = None;
    let activation;
    match &file.model {
        Model::Mlp(m) => {
            activation = m.activation();
            nets.insert("net".into(), raw_net(m));
        }
        Model::DeepOnet(d) => {
            activation = d.trunk.activation();
            nets.insert("branch".into(), raw_net(&d.branch));
            nets.insert("trunk".into(), raw_net(&d.trunk));
            sensors.insert("branch".into(), sensors_of(&d.sensors));
            input_scale = Some(d.input_scale);
        }
        Model::Ionet(m) => {
            activation = m.trunk_inner.activation();
            for (name, net) in [
                ("branch_inner", &m.branch_inner),
                ("branch_outer", &m.branch_outer),
                ("trunk_inner", &m.trunk_inner),
                ("trunk_outer", &m.trunk_outer),
            ] {
                nets.insert(name.into(), raw_net(net));
            }
            sensors.insert("branch_inner".into(), sensors_of(&m.sensors_inner));
            sensors.insert("branch_outer".into(), sensors_of(&m.sensors_outer));
            input_scale = Some(m.input_scale);
            geometry = Some(RawGeometry {
                kind: "astroid".into(),
                radius: m.geometry.radius,
            });
        }
    }
    RawFile {
        format_version: FORMAT_VERSION,
        model_kind: file.model.kind().into(),
        architecture: default_architecture(),
        activation: activation.name().into(),
        input_scale,
        nets,
        sensors,
        geometry,
        metadata: file.metadata.clone(),
    }
}

/// Canonical JSON text of a weight file.
pub fn to_json(file: &WeightFile) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&to_raw(file)).map_err(|e| Error::WeightFile(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn save(file: &WeightFile, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(file)?).map_err(|e| Error::io(path, e))
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    save(&WeightFile::new(model.clone()), path)
}

/// Rewrite bare `NaN`, `Infinity` and `-Infinity` tokens (as emitted by
/// Python's `json`) to `null` so they can be reported by location.
fn neutralise_non_finite(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            rest = &rest[c.len_utf8()..];
            continue;
        }
        let token = ["-Infinity", "Infinity", "NaN"]
            .into_iter()
            .find(|t| rest.starts_with(t));
        if let Some(t) = token {
            out.push_str("null");
            rest = &rest[t.len()..];
            continue;
        }
        if c == '"' {
            in_string = true;
        }
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

fn build_net(name: &str, raw: &RawNet, activation: Activation) -> Result<MlpSpec> {
    if raw.layers.is_empty() {
        return Err(Error::WeightFile(format!("net `{name}` has no layers")));
    }
    if raw.dims.len() != raw.layers.len() + 1 {
        return Err(Error::WeightFile(format!(
            "net `{name}`: dims lists {} widths for {} layers",
            raw.dims.len(),
            raw.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(raw.layers.len());
    for (l, layer) in raw.layers.iter().enumerate() {
        let (d_in, d_out) = (raw.dims[l], raw.dims[l + 1]);
        let mismatch = |what: &str, expected: usize, got: usize| Error::DimensionMismatch {
            expected,
            got,
            context: format!("net `{name}` layer {l} {what}"),
        };
        if layer.weight.len() != d_out {
            return Err(mismatch("weight rows", d_out, layer.weight.len()));
        }
        if let Some((r, row)) = layer.weight.iter().enumerate().find(|(_, r)| r.len() != d_in) {
            return Err(mismatch(&format!("weight row {r} length"), d_in, row.len()));
        }
        if layer.bias.len() != d_out {
            return Err(mismatch("bias length", d_out, layer.bias.len()));
        }
        let finite = |v: &Option<f64>| v.is_some_and(f64::is_finite);
        if !layer.weight.iter().flatten().all(finite) || !layer.bias.iter().all(finite) {
            return Err(Error::NonFinite(format!("net `{name}` layer {l}")));
        }
        let weight = DMatrix::from_fn(d_out, d_in, |r, c| layer.weight[r][c].expect("checked finite"));
        let bias = DVector::from_iterator(d_out, layer.bias.iter().map(|v| v.expect("checked finite")));
        layers.push(Layer::new(weight, bias)?);
    }
    MlpSpec::new(layers, activation)
}

fn take_net(raw: &RawFile, name: &str, activation: Activation) -> Result<MlpSpec> {
    let net = raw
        .nets
        .get(name)
        .ok_or_else(|| Error::WeightFile(format!("{} file lacks net `{name}`", raw.model_kind)))?;
    build_net(name, net, activation)
}

fn take_sensors(raw: &RawFile, name: &str) -> Result<Vec<Vec<f64>>> {
    raw.sensors
        .get(name)
        .cloned()
        .ok_or_else(|| Error::WeightFile(format!("{} file lacks sensors for `{name}`", raw.model_kind)))
}

fn expect_nets(raw: &RawFile, names: &[&str]) -> Result<()> {
    for n in raw.nets.keys() {
        if !names.contains(&n.as_str()) {
            return Err(Error::WeightFile(format!(
                "unexpected net `{n}` in {} file",
                raw.model_kind
            )));
        }
    }
    Ok(())
}

fn from_raw(raw: RawFile) -> Result<WeightFile> {
    if raw.format_version != FORMAT_VERSION {
        return Err(Error::WeightFile(format!(
            "unknown format_version {} (supported: {FORMAT_VERSION})",
            raw.format_version
        )));
    }
    if raw.architecture != "fnn" {
        return Err(Error::Unsupported(format!(
            "architecture `{}`; only plain `fnn` networks can be evaluated",
            raw.architecture
        )));
    }
    let activation = match raw.activation.as_str() {
        "tanh" => Activation::Tanh,
        other => return Err(Error::Unsupported(format!("activation `{other}`"))),
    };
    let scale = raw.input_scale.unwrap_or(1.0);
    let model = match raw.model_kind.as_str() {
        "mlp" => {
            expect_nets(&raw, &["net"])?;
            Model::Mlp(take_net(&raw, "net", activation)?)
        }
        "deeponet" => {
            expect_nets(&raw, &["branch", "trunk"])?;
            Model::DeepOnet(DeepOnetSpec::new(
                take_net(&raw, "branch", activation)?,
                take_net(&raw, "trunk", activation)?,
                take_sensors(&raw, "branch")?,
                scale,
            )?)
        }
        "ionet" => {
            expect_nets(&raw, &["branch_inner", "branch_outer", "trunk_inner", "trunk_outer"])?;
            let geometry = match &raw.geometry {
                None => Astroid::default(),
                Some(g) if g.kind == "astroid" && g.radius > 0.0 && g.radius.is_finite() => {
                    Astroid { radius: g.radius }
                }
                Some(g) => return Err(Error::Unsupported(format!("interface geometry `{}`", g.kind))),
            };
            let m = IonetSpec {
                branch_inner: take_net(&raw, "branch_inner", activation)?,
                branch_outer: take_net(&raw, "branch_outer", activation)?,
                trunk_inner: take_net(&raw, "trunk_inner", activation)?,
                trunk_outer: take_net(&raw, "trunk_outer", activation)?,
                sensors_inner: take_sensors(&raw, "branch_inner")?,
                sensors_outer: take_sensors(&raw, "branch_outer")?,
                input_scale: scale,
                geometry,
            };
            m.validate()?;
            Model::Ionet(m)
        }
        other => return Err(Error::WeightFile(format!("unknown model_kind `{other}`"))),
    };
    Ok(WeightFile {
        model,
        metadata: raw.metadata,
    })
}

/// Parse and validate weight-file text; `origin` names the source in errors.
pub fn from_json(text: &str, origin: &Path) -> Result<WeightFile> {
    let cleaned = neutralise_non_finite(text);
    let raw: RawFile = serde_json::from_str(&cleaned).map_err(|e| Error::Parse {
        path: origin.into(),
        message: e.to_string(),
    })?;
    from_raw(raw)
}

pub fn load(path: &Path) -> Result<WeightFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text, path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    Ok(load(path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::NetShape;

    fn identity() -> MlpSpec {
        MlpSpec::new(
            vec![Layer::new(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1)).unwrap()],
            Activation::Tanh,
        )
        .unwrap()
    }

    fn parse(text: &str) -> Result<WeightFile> {
        from_json(text, Path::new("test.fbw.json"))
    }

    #[test]
    fn identity_mlp_has_dims_1_1() {
        let text = to_json(&WeightFile::new(Model::Mlp(identity()))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["nets"]["net"]["dims"], serde_json::json!([1, 1]));
        assert_eq!(v["model_kind"], "mlp");
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let sensors = crate::field_sampler::linspace(0.0, 1.0, 7)
            .into_iter()
            .map(|x| vec![x])
            .collect();
        let shape = NetShape {
            hidden: vec![5, 4],
            width: 3,
        };
        let mut d = DeepOnetSpec::init(&shape, &shape, sensors, 2, 8).unwrap();
        d.input_scale = 0.1 + 0.2;
        let mut file = WeightFile::new(Model::DeepOnet(d));
        file.metadata.insert("seed".into(), serde_json::json!(8));
        let a = to_json(&file).unwrap();
        let back = parse(&a).unwrap();
        assert_eq!(back, file);
        assert_eq!(to_json(&back).unwrap(), a);
    }

    #[test]
    fn rejects_non_finite_naming_layer() {
        let text = r#"{"format_version":1,"model_kind":"mlp","activation":"tanh",
            "nets":{"net":{"dims":[1,2,1],"layers":[
              {"weight":[[1.0],[2.0]],"bias":[0.0,0.0]},
              {"weight":[[NaN,1.0]],"bias":[0.0]}]}}}"#;
        let err = parse(text).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains("layer 1")), "{err}");
        let text = text.replace("NaN", "-Infinity");
        assert!(matches!(parse(&text), Err(Error::NonFinite(_))));
    }

    #[test]
    fn tokens_inside_strings_are_untouched() {
        assert_eq!(
            neutralise_non_finite(r#"{"a":"NaN \" Infinity"}"#),
            r#"{"a":"NaN \" Infinity"}"#
        );
        assert_eq!(neutralise_non_finite("[NaN,-Infinity,Infinity]"), "[null,null,null]");
    }

    #[test]
    fn rejects_dimension_mismatch_with_layer() {
        let text = r#"{"format_version":1,"model_kind":"mlp","activation":"tanh",
            "nets":{"net":{"dims":[1,2,1],"layers":[
              {"weight":[[1.0],[2.0]],"bias":[0.0,0.0]},
              {"weight":[[1.0]],"bias":[0.0]}]}}}"#;
        let err = parse(text).unwrap_err();
        assert!(
            matches!(&err, Error::DimensionMismatch { context, .. } if context.contains("layer 1")),
            "{err}"
        );
    }

    #[test]
    fn rejects_truncated_unknown_version_and_architecture() {
        let good = to_json(&WeightFile::new(Model::Mlp(identity()))).unwrap();
        assert!(matches!(parse(&good[..good.len() / 2]), Err(Error::Parse { .. })));
        let v2 = good.replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(parse(&v2), Err(Error::WeightFile(m)) if m.contains("format_version")));
        let modified = good.replace("\"architecture\": \"fnn\"", "\"architecture\": \"modified_fnn\"");
        assert!(matches!(parse(&modified), Err(Error::Unsupported(_))));
        let relu = good.replace("\"activation\": \"tanh\"", "\"activation\": \"relu\"");
        assert!(matches!(parse(&relu), Err(Error::Unsupported(_))));
    }
}
