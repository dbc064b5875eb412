//! JSON reports written by the command-line tool.

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::{Array2, Array3};

pub const TOOL: &str = "algebroid-lab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Index and sign conventions, embedded in every report.
#[derive(Debug, Clone, Serialize)]
pub struct Conventions {
    pub bracket: &'static str,
    pub christoffel: &'static str,
    pub curvature: &'static str,
    pub ricci: &'static str,
    pub second_derivative: &'static str,
    pub poisson_bracket: &'static str,
    pub curl_condition: &'static str,
    pub field_strength: &'static str,
}

pub const CONVENTIONS: Conventions = Conventions {
    bracket: "[s_a, s_b] = Q_ab^c s_c, rho(s_a) = Q_a^A d_A",
    christoffel: "Gamma_bc^a = (nabla_{s_c} s_b)^a; (nabla_u v)^a = rho(u)[v^a] + u^c v^b Gamma_bc^a",
    curvature:
        "R_a^d_bc = [R(s_b, s_c) s_a]^d with R(u, v) = nabla_u nabla_v - nabla_v nabla_u - nabla_[u,v]; arrays are indexed [a][d][b][c]",
    ricci: "Ric_ab = R_a^c_cb",
    second_derivative: "(nabla^2_{b,c} u)^a = (nabla_b (nabla_c u))^a - Gamma_cb^f (nabla_f u)^a",
    poisson_bracket: "{pi_a, pi_b} = Q_ab^c pi_c, {pi_a, x^A} = Q_a^A, {x^A, x^B} = 0; H = G^ab pi_a pi_b / 2",
    curl_condition: "d_1 chi_2^a - d_2 chi_1^a + Q_bc^a chi_1^b chi_2^c, reported with sign",
    field_strength: "F_bc = Q_b^A d_A C_c - Q_c^A d_A C_b - Q_bc^e C_e",
};

/// Outcome recorded in a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
    NotConverged,
    Error,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::Failed => 1,
            Status::NotConverged => 3,
            Status::Error => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub tool: &'static str,
    pub version: &'static str,
    pub model: String,
    pub seed: u64,
    pub command: String,
    pub status: Status,
    pub results: Map<String, Value>,
    pub conventions: Conventions,
}

impl Report {
    pub fn new(model: &str, seed: u64, command: &str) -> Self {
        Report {
            tool: TOOL,
            version: VERSION,
            model: model.to_string(),
            seed,
            command: command.to_string(),
            status: Status::Ok,
            results: Map::new(),
            conventions: CONVENTIONS,
        }
    }

    /// Record a result. Fails on non-finite numbers anywhere inside `value`.
    pub fn insert(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        let v = to_finite_value(key, &value)?;
        self.results.insert(key.to_string(), v);
        Ok(())
    }

    /// Record a result that may legitimately be non-finite (for example the
    /// last reached state of a diverging run); non-finite numbers become strings.
    pub fn insert_lossy(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(FiniteProxy(&value)).unwrap_or(Value::Null);
        self.results.insert(key.to_string(), v);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }
}

fn to_finite_value(key: &str, value: &impl Serialize) -> Result<Value> {
    serde_json::to_value(FiniteGuard(value)).map_err(|e| Error::Invalid(format!("report field `{key}`: {e}")))
}

/// Serializes the inner value but rejects non-finite floats instead of
/// writing `null`.
struct FiniteGuard<'a, T: ?Sized>(&'a T);

impl<T: Serialize + ?Sized> Serialize for FiniteGuard<'_, T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v = serde_json::to_value(self.0).map_err(serde::ser::Error::custom)?;
        if let Some(path) = first_null(&v, String::new()) {
            return Err(serde::ser::Error::custom(format!("non-finite or missing number at `{path}`")));
        }
        v.serialize(s)
    }
}

/// Like [`FiniteGuard`] but writes non-finite floats as strings.
struct FiniteProxy<'a, T: ?Sized>(&'a T);

impl<T: Serialize + ?Sized> Serialize for FiniteProxy<'_, T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let v = serde_json::to_value(self.0).map_err(serde::ser::Error::custom)?;
        replace_nulls(v).serialize(s)
    }
}

fn first_null(v: &Value, path: String) -> Option<String> {
    match v {
        Value::Null => Some(path),
        Value::Array(xs) => xs.iter().enumerate().find_map(|(i, x)| first_null(x, format!("{path}[{i}]"))),
        Value::Object(m) => m.iter().find_map(|(k, x)| first_null(x, format!("{path}.{k}"))),
        _ => None,
    }
}

fn replace_nulls(v: Value) -> Value {
    match v {
        Value::Null => Value::String("non-finite".into()),
        Value::Array(xs) => Value::Array(xs.into_iter().map(replace_nulls).collect()),
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, x)| (k, replace_nulls(x))).collect()),
        other => other,
    }
}

pub fn array2_rows(a: &Array2) -> Vec<Vec<f64>> {
    let [n, m] = a.shape();
    (0..n).map(|i| (0..m).map(|j| a[[i, j]]).collect()).collect()
}

pub fn array3_nested(a: &Array3) -> Vec<Vec<Vec<f64>>> {
    let [n, m, l] = a.shape();
    (0..n)
        .map(|i| (0..m).map(|j| (0..l).map(|k| a[[i, j, k]]).collect()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        let mut r = Report::new("m", 42, "validate");
        assert!(r.insert("x", 1.5).is_ok());
        assert!(matches!(r.insert("bad", vec![1.0, f64::NAN]), Err(Error::Invalid(m)) if m.contains("[1]")));
        r.insert_lossy("lossy", [f64::INFINITY]);
        assert_eq!(r.results["lossy"][0], "non-finite");
    }

    #[test]
    fn conventions_embedded() {
        let r = Report::new("m", 7, "killing");
        let v: Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["seed"], 7);
        assert!(v["conventions"]["curvature"].as_str().unwrap().contains("[a][d][b][c]"));
        assert_eq!(v["status"], "ok");
    }

    #[test]
    fn deterministic_output() {
        let build = || {
            let mut r = Report::new("m", 1, "c");
            r.insert("b", 2.0).unwrap();
            r.insert("a", [1.0, 0.1 + 0.2]).unwrap();
            r.to_json()
        };
        assert_eq!(build(), build());
    }
}
