//! JSON model files.
//!
//! ```json
//! {
//!   "name": "sphere_chart",
//!   "dimM": 2, "rank": 2,
//!   "coords": ["theta", "phi"],
//!   "frame": ["dtheta", "dphi"],
//!   "anchor": [["1", "0"], ["0", "1"]],
//!   "bracket": [],
//!   "metric": [["1", "0"], ["sin(theta)^2"]],
//!   "box": [[0.4, 2.7], [-3, 3]],
//!   "sections": {"rot_z": ["0", "1"]},
//!   "oneform": ["0", "cos(theta)"],
//!   "sigma": {"k": 1, "nodes": [1001], "box": [[0, 1]], "metric": [["1"]],
//!             "boundary": ["dirichlet"], "phi": ["1 + 0.4*t", "0.2 + 0.7*t"]}
//! }
//! ```
//!
//! Bracket entries `{a, b, c, expr}` set `Q_ab^c`; `Q_ba^c = -expr` is filled
//! in. Indices are 0-based integers or frame names.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algebroid::{AlgebroidModel, Section};
use crate::dynamics::OneFormPotential;
use crate::error::{Error, Result};
use crate::expr::{parse, Expr};
use crate::riemann::MetricModel;
use crate::sampling::SampleBox;
use crate::sigma::{AxisBoundary, SigmaConfiguration, SourceManifold};

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum FrameIndex {
    Position(usize),
    Name(String),
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BracketEntry {
    pub a: FrameIndex,
    pub b: FrameIndex,
    pub c: FrameIndex,
    pub expr: String,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SigmaBlock {
    pub k: usize,
    pub nodes: Vec<usize>,
    #[serde(rename = "box")]
    pub bounds: Vec<[f64; 2]>,
    /// Upper triangle of the source metric; Euclidean when absent.
    #[serde(default)]
    pub metric: Option<Vec<Vec<String>>>,
    pub boundary: Vec<AxisBoundary>,
    /// Source coordinate names; `t` for k = 1 and `z1, z2` for k = 2 by default.
    #[serde(default)]
    pub coords: Option<Vec<String>>,
    /// `φ^A` over the source coordinates: boundary data and initial guess.
    pub phi: Vec<String>,
}

/// The document as written.
#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub name: String,
    #[serde(rename = "dimM")]
    pub dim_m: usize,
    pub rank: usize,
    pub coords: Vec<String>,
    pub frame: Vec<String>,
    pub anchor: Vec<Vec<String>>,
    #[serde(default)]
    pub bracket: Vec<BracketEntry>,
    pub metric: Vec<Vec<String>>,
    #[serde(rename = "box")]
    pub bounds: Vec<[f64; 2]>,
    #[serde(default)]
    pub sections: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub oneform: Option<Vec<String>>,
    #[serde(default)]
    pub sigma: Option<SigmaBlock>,
}

/// A validated model ready for analysis.
#[derive(Debug, Clone)]
pub struct Model {
    pub file: ModelFile,
    pub metric: MetricModel,
    pub sections: Vec<Section>,
    pub oneform: Option<OneFormPotential>,
}

fn expr(field: &str, s: &str) -> Result<Expr> {
    parse(s).map_err(|e| Error::Schema(format!("{field}: cannot parse `{s}`: {e}")))
}

fn check_box(field: &str, bounds: &[[f64; 2]]) -> Result<Vec<(f64, f64)>> {
    bounds
        .iter()
        .enumerate()
        .map(|(i, &[lo, hi])| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok((lo, hi))
            } else {
                Err(Error::Schema(format!("{field}[{i}] = [{lo}, {hi}] is not an interval")))
            }
        })
        .collect()
}

impl ModelFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model files serialize")
    }

    fn frame_index(&self, field: &str, i: &FrameIndex) -> Result<usize> {
        match i {
            FrameIndex::Position(p) if *p < self.rank => Ok(*p),
            FrameIndex::Position(p) => Err(Error::Schema(format!("{field}: index {p} out of range for rank {}", self.rank))),
            FrameIndex::Name(n) => self
                .frame
                .iter()
                .position(|f| f == n)
                .ok_or_else(|| Error::Schema(format!("{field}: unknown frame element `{n}`"))),
        }
    }

    /// Full `[a][b][c]` bracket array from the sparse entries.
    pub fn bracket_array(&self) -> Result<Vec<Vec<Vec<Expr>>>> {
        let n = self.rank;
        let mut out = vec![vec![vec![Expr::zero(); n]; n]; n];
        let mut seen = vec![vec![vec![false; n]; n]; n];
        for (k, e) in self.bracket.iter().enumerate() {
            let field = format!("bracket[{k}]");
            let (a, b, c) = (
                self.frame_index(&field, &e.a)?,
                self.frame_index(&field, &e.b)?,
                self.frame_index(&field, &e.c)?,
            );
            if a == b {
                return Err(Error::Schema(format!(
                    "{field}: [s_{a}, s_{a}] must vanish, entries with a = b are not allowed"
                )));
            }
            if seen[a][b][c] || seen[b][a][c] {
                return Err(Error::Schema(format!(
                    "{field}: Q_{a}{b}^{c} is already set; give each antisymmetric pair once"
                )));
            }
            let q = expr(&field, &e.expr)?;
            out[b][a][c] = -q.clone();
            out[a][b][c] = q;
            seen[a][b][c] = true;
        }
        Ok(out)
    }

    pub fn algebroid(&self) -> Result<AlgebroidModel> {
        if self.coords.len() != self.dim_m {
            return Err(Error::Schema(format!(
                "dimM is {} but {} coords are listed",
                self.dim_m,
                self.coords.len()
            )));
        }
        if self.frame.len() != self.rank {
            return Err(Error::Schema(format!(
                "rank is {} but {} frame names are listed",
                self.rank,
                self.frame.len()
            )));
        }
        if self.bounds.len() != self.dim_m {
            return Err(Error::Schema(format!(
                "box has {} intervals for {} coords",
                self.bounds.len(),
                self.dim_m
            )));
        }
        if self.anchor.len() != self.rank || self.anchor.iter().any(|r| r.len() != self.dim_m) {
            return Err(Error::Schema(format!("anchor must be a {}x{} matrix", self.rank, self.dim_m)));
        }
        let anchor = self
            .anchor
            .iter()
            .enumerate()
            .map(|(a, row)| row.iter().enumerate().map(|(i, s)| expr(&format!("anchor[{a}][{i}]"), s)).collect())
            .collect::<Result<Vec<Vec<Expr>>>>()?;
        AlgebroidModel::new(
            self.name.clone(),
            self.coords.clone(),
            self.frame.clone(),
            anchor,
            self.bracket_array()?,
            SampleBox::new(check_box("box", &self.bounds)?),
        )
    }

    pub fn build(&self) -> Result<Model> {
        let alg = self.algebroid()?;
        let n = self.rank;
        if self.metric.len() != n || self.metric.iter().enumerate().any(|(a, row)| row.len() != n - a) {
            return Err(Error::Schema(format!(
                "metric must list the upper triangle of a {n}x{n} matrix, row a holding n - a entries"
            )));
        }
        let upper = self
            .metric
            .iter()
            .enumerate()
            .map(|(a, row)| row.iter().enumerate().map(|(k, s)| expr(&format!("metric[{a}][{k}]"), s)).collect())
            .collect::<Result<Vec<Vec<Expr>>>>()?;
        let metric = MetricModel::from_upper(alg, upper).map_err(schema)?;
        let alg = metric.algebroid();
        let sections = self
            .sections
            .iter()
            .map(|(name, comps)| {
                let field = format!("sections.{name}");
                let comps = comps.iter().map(|s| expr(&field, s)).collect::<Result<Vec<_>>>()?;
                Section::new(alg, name.clone(), comps).map_err(schema)
            })
            .collect::<Result<Vec<_>>>()?;
        let oneform = self
            .oneform
            .as_ref()
            .map(|comps| {
                let comps = comps.iter().map(|s| expr("oneform", s)).collect::<Result<Vec<_>>>()?;
                OneFormPotential::new(alg, comps).map_err(schema)
            })
            .transpose()?;
        if let Some(block) = &self.sigma {
            block.source()?;
            if block.phi.len() != self.dim_m {
                return Err(Error::Schema(format!("sigma.phi needs {} expressions", self.dim_m)));
            }
        }
        Ok(Model {
            file: self.clone(),
            metric,
            sections,
            oneform,
        })
    }
}

/// Shape and variable errors in a model document are schema errors.
fn schema(e: Error) -> Error {
    match e {
        Error::Shape(m) | Error::Invalid(m) => Error::Schema(m),
        other => other,
    }
}

impl SigmaBlock {
    pub fn source(&self) -> Result<SourceManifold> {
        let k = self.k;
        if !(1..=2).contains(&k) {
            return Err(Error::Schema(format!("sigma.k must be 1 or 2, got {k}")));
        }
        if self.nodes.len() != k || self.bounds.len() != k || self.boundary.len() != k {
            return Err(Error::Schema(format!("sigma needs {k} entries in nodes, box and boundary")));
        }
        let coords = self.coords.clone().unwrap_or_else(|| match k {
            1 => vec!["t".into()],
            _ => (1..=k).map(|i| format!("z{i}")).collect(),
        });
        if coords.len() != k {
            return Err(Error::Schema(format!("sigma.coords needs {k} names")));
        }
        let metric = match &self.metric {
            None => (0..k)
                .map(|i| (0..k).map(|j| if i == j { Expr::one() } else { Expr::zero() }).collect())
                .collect(),
            Some(rows) => {
                if rows.len() != k || rows.iter().enumerate().any(|(a, r)| r.len() != k - a) {
                    return Err(Error::Schema("sigma.metric must be an upper triangle".into()));
                }
                let mut full = vec![vec![Expr::zero(); k]; k];
                for (a, row) in rows.iter().enumerate() {
                    for (off, s) in row.iter().enumerate() {
                        let e = expr("sigma.metric", s)?;
                        full[a][a + off] = e.clone();
                        full[a + off][a] = e;
                    }
                }
                full
            }
        };
        SourceManifold::new(
            coords,
            self.nodes.clone(),
            check_box("sigma.box", &self.bounds)?,
            self.boundary.clone(),
            metric,
        )
        .map_err(schema)
    }

    pub fn phi_exprs(&self) -> Result<Vec<Expr>> {
        self.phi.iter().map(|s| expr("sigma.phi", s)).collect()
    }

    /// Initial configuration from `phi`.
    pub fn initial(&self, source: &SourceManifold, alg: &AlgebroidModel) -> Result<SigmaConfiguration> {
        SigmaConfiguration::from_exprs(source, alg, &self.phi_exprs()?)
    }
}

impl Model {
    pub fn name(&self) -> &str {
        &self.file.name
    }

    pub fn algebroid(&self) -> &AlgebroidModel {
        self.metric.algebroid()
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections.iter().find(|s| s.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.sections.iter().map(|s| s.name.as_str()).collect();
            Error::Schema(format!("no section named `{name}`; the model defines {known:?}"))
        })
    }
}

pub fn parse_model(text: &str) -> Result<Model> {
    ModelFile::from_json(text)?.build()
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Schema(format!("cannot read {}: {e}", path.display())))?;
    parse_model(&text)
}

/// The models shipped with the crate, by file stem.
pub const BUNDLED: [(&str, &str); 6] = [
    ("flat_tm1", include_str!("../models/flat_tm1.json")),
    ("flat_tm2", include_str!("../models/flat_tm2.json")),
    ("sphere_chart", include_str!("../models/sphere_chart.json")),
    ("so3_killing", include_str!("../models/so3_killing.json")),
    ("linebundle_X", include_str!("../models/linebundle_X.json")),
    ("foliation_product", include_str!("../models/foliation_product.json")),
];

pub fn bundled(name: &str) -> Result<Model> {
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Schema(format!("no bundled model `{name}`")))?;
    parse_model(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_models_load() {
        for (name, _) in BUNDLED {
            let m = bundled(name).unwrap();
            assert_eq!(m.name(), name);
        }
    }

    #[test]
    fn bracket_completion() {
        let m = bundled("so3_killing").unwrap();
        let alg = m.algebroid();
        assert_eq!(alg.bracket_expr(0, 1, 2).as_const(), Some(1.0));
        assert_eq!(alg.bracket_expr(1, 0, 2).as_const(), Some(-1.0));
        assert_eq!(alg.bracket_expr(0, 0, 0).as_const(), Some(0.0));
    }

    fn so3_file() -> ModelFile {
        ModelFile::from_json(BUNDLED[3].1).unwrap()
    }

    #[test]
    fn schema_errors() {
        let mut f = so3_file();
        f.bracket.push(BracketEntry {
            a: FrameIndex::Name("e2".into()),
            b: FrameIndex::Name("e1".into()),
            c: FrameIndex::Position(2),
            expr: "-1".into(),
        });
        assert!(matches!(f.build(), Err(Error::Schema(m)) if m.contains("already set")));

        let mut f = so3_file();
        f.bracket[0].b = f.bracket[0].a.clone();
        assert!(matches!(f.build(), Err(Error::Schema(_))));

        let mut f = so3_file();
        f.bracket[0].c = FrameIndex::Position(7);
        assert!(matches!(f.build(), Err(Error::Schema(m)) if m.contains("out of range")));

        let mut f = so3_file();
        f.metric[0][0] = "2 +".into();
        assert!(matches!(f.build(), Err(Error::Schema(m)) if m.contains("metric[0][0]")));

        let mut f = ModelFile::from_json(BUNDLED[2].1).unwrap();
        f.metric[1][0] = "sin(psi)".into();
        assert!(matches!(f.build(), Err(Error::Schema(m)) if m.contains("psi")));

        let mut f = ModelFile::from_json(BUNDLED[2].1).unwrap();
        f.dim_m = 3;
        assert!(matches!(f.build(), Err(Error::Schema(_))));

        assert!(matches!(ModelFile::from_json(r#"{"name": "x"}"#), Err(Error::Schema(_))));
        let extra = BUNDLED[0].1.replacen('{', r#"{"colour": "red","#, 1);
        assert!(matches!(ModelFile::from_json(&extra), Err(Error::Schema(m)) if m.contains("colour")));
    }

    #[test]
    fn json_round_trip() {
        for (_, text) in BUNDLED {
            let f = ModelFile::from_json(text).unwrap();
            assert_eq!(ModelFile::from_json(&f.to_json()).unwrap(), f);
        }
    }

    #[test]
    fn schema_document_lists_every_field() {
        let schema: serde_json::Value = serde_json::from_str(include_str!("../../../docs/model.schema.json")).unwrap();
        let props = |v: &serde_json::Value| -> Vec<String> {
            let mut k: Vec<String> = v["properties"].as_object().unwrap().keys().cloned().collect();
            k.sort();
            k
        };
        let f = ModelFile::from_json(BUNDLED[2].1).unwrap();
        let doc = serde_json::to_value(&f).unwrap();
        let mut fields: Vec<String> = doc.as_object().unwrap().keys().cloned().collect();
        fields.sort();
        assert_eq!(props(&schema), fields);
        let mut sigma = serde_json::to_value(f.sigma.as_ref().unwrap()).unwrap();
        sigma["metric"] = serde_json::json!([["1"]]);
        sigma["coords"] = serde_json::json!(["t"]);
        let mut fields: Vec<String> = sigma.as_object().unwrap().keys().cloned().collect();
        fields.sort();
        assert_eq!(props(&schema["properties"]["sigma"]), fields);
    }
}
