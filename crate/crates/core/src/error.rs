use thiserror::Error;

use crate::expr::ExprError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("invalid model: {0}")]
    Schema(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate metric at {point:?}: |det G| = {det:e} below threshold {threshold:e}")]
    Degenerate { point: Vec<f64>, det: f64, threshold: f64 },
    #[error("connection certification failed at {point:?}: torsion {torsion:e}, compatibility {compat:e}")]
    Certification { point: Vec<f64>, torsion: f64, compat: f64 },
    #[error("could not draw a sample point without domain errors after {attempts} attempts: {last}")]
    Sampling { attempts: usize, last: ExprError },
    #[error("underdetermined system: {rows} equations for {unknowns} unknowns")]
    Underdetermined { rows: usize, unknowns: usize },
    #[error("state blew up after t = {t_last}")]
    BlowUp { t_last: f64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
