//! Fiber metrics, the Levi-Civita connection and its curvature.
//!
//! Index conventions used throughout the crate:
//!
//! * `gamma[[b, c, a]]` is `Γ_bc^a`, the `a`-component of `∇_{s_c} s_b`
//!   (the differentiating direction is the second lower index).
//! * Curvature components `R_a^d_bc` are stored as `r[[a, d, b, c]]` with
//!   `R(s_b, s_c) s_a = R_a^d_bc s_d`, where
//!   `R(u, v) w = ∇_u ∇_v w - ∇_v ∇_u w - ∇_[u,v] w`.
//! * `Ricci_ab = R_a^c_cb`, which is the usual Ricci tensor (the unit sphere
//!   has `Ricci = G`).

use nalgebra::DMatrix;
use serde::Serialize;

use crate::algebroid::{AlgebroidAt, AlgebroidModel, Section, SectionAt};
use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr};
use crate::sampling::{sweep_max, Residual};
use crate::tensor::{Array2, Array3, Array4};

/// Relative threshold on `|det G|`, scaled by `(max |G_ab|)^rank`.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;
/// Absolute tolerance (times the metric scale) for certifying a connection.
pub const CERTIFICATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct MetricModel {
    alg: AlgebroidModel,
    // [a][b]
    g: Vec<Expr>,
    // [a][b][A]
    d_g: Vec<Expr>,
    // [b][c][d] = G_ad Γ_bc^a
    gamma_low: Vec<Expr>,
    // [b][c][d][A]
    d_gamma_low: Vec<Expr>,
}

/// Metric data at one base point.
#[derive(Debug, Clone)]
pub struct MetricAt {
    pub point: Vec<f64>,
    pub g: Array2,
    pub g_inv: Array2,
    /// `[a][b][A] = d_A G_ab`
    pub d_g: Array3,
    pub det: f64,
    pub alg: AlgebroidAt,
}

/// Christoffel symbols at a point, `gamma[[b, c, a]] = Γ_bc^a`.
#[derive(Debug, Clone)]
pub struct ConnectionAt {
    pub point: Vec<f64>,
    pub gamma: Array3,
    pub g_inv: Array2,
    pub metric: MetricAt,
}

#[derive(Debug, Clone)]
pub struct CurvatureAt {
    pub point: Vec<f64>,
    /// `r[[a, d, b, c]] = R_a^d_bc`, i.e. the `d`-component of `R(s_b, s_c) s_a`.
    pub r: Array4,
    pub ricci: Array2,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificationReport {
    pub torsion: Residual,
    pub compatibility: Residual,
    pub koszul: Residual,
}

impl CertificationReport {
    pub fn worst(&self) -> f64 {
        [&self.torsion, &self.compatibility, &self.koszul]
            .iter()
            .map(|r| r.value)
            .fold(0.0, |m, v| if v.is_nan() || v > m { v } else { m })
    }
}

fn check_vars(alg: &AlgebroidModel, e: &Expr) -> Result<()> {
    match e.free_vars().into_iter().find(|v| !alg.coords().contains(v)) {
        Some(v) => Err(Error::Schema(format!("metric entry `{e}` uses undeclared variable `{v}`"))),
        None => Ok(()),
    }
}

impl MetricModel {
    /// Symmetric metric from its upper triangle: `upper[a]` lists
    /// `G_aa, G_a(a+1), ..., G_a(n-1)`.
    pub fn from_upper(alg: AlgebroidModel, upper: Vec<Vec<Expr>>) -> Result<Self> {
        let n = alg.rank();
        if upper.len() != n || upper.iter().enumerate().any(|(a, row)| row.len() != n - a) {
            return Err(Error::Shape(format!("upper triangle of a {n}x{n} metric expected")));
        }
        let mut full = vec![vec![Expr::zero(); n]; n];
        for (a, row) in upper.into_iter().enumerate() {
            for (k, e) in row.into_iter().enumerate() {
                full[a][a + k] = e.clone();
                full[a + k][a] = e;
            }
        }
        Self::from_full(alg, full)
    }

    /// Metric from a full matrix, stored as given. Symmetry is checked by
    /// [`MetricModel::validate_symmetry`], not imposed.
    pub fn from_full(alg: AlgebroidModel, full: Vec<Vec<Expr>>) -> Result<Self> {
        let n = alg.rank();
        if full.len() != n || full.iter().any(|row| row.len() != n) {
            return Err(Error::Shape(format!("metric must be {n}x{n}")));
        }
        let g: Vec<Expr> = full.into_iter().flatten().collect();
        for e in &g {
            check_vars(&alg, e)?;
        }
        Ok(Self::build(alg, g))
    }

    /// `G_ab = Q_ac^d Q_db^c`, the Killing form of the bracket.
    pub fn killing_form(alg: AlgebroidModel) -> Result<Self> {
        let n = alg.rank();
        let mut full = vec![vec![Expr::zero(); n]; n];
        for (a, row) in full.iter_mut().enumerate() {
            for (b, slot) in row.iter_mut().enumerate() {
                let mut terms = Vec::new();
                for c in 0..n {
                    for d in 0..n {
                        let (x, y) = (alg.bracket_expr(a, c, d), alg.bracket_expr(d, b, c));
                        if !x.is_zero() && !y.is_zero() {
                            terms.push(x * y);
                        }
                    }
                }
                *slot = terms.into_iter().sum();
            }
        }
        Self::from_full(alg, full)
    }

    /// Constant metric `G_ab = values[a][b]`.
    pub fn constant(alg: AlgebroidModel, values: &[Vec<f64>]) -> Result<Self> {
        let full = values.iter().map(|row| row.iter().map(|&v| Expr::constant(v)).collect()).collect();
        Self::from_full(alg, full)
    }

    pub fn identity(alg: AlgebroidModel) -> Self {
        let n = alg.rank();
        let values: Vec<Vec<f64>> = (0..n).map(|a| (0..n).map(|b| if a == b { 1.0 } else { 0.0 }).collect()).collect();
        Self::constant(alg, &values).expect("identity has the right shape")
    }

    fn build(alg: AlgebroidModel, g: Vec<Expr>) -> Self {
        let (n, dim) = (alg.rank(), alg.dim());
        let coords = alg.coords().to_vec();
        let d_g: Vec<Expr> = g.iter().flat_map(|e| coords.iter().map(move |c| e.diff(c))).collect();
        let gm = |a: usize, b: usize| &g[a * n + b];
        let dgm = |a: usize, b: usize, i: usize| &d_g[(a * n + b) * dim + i];
        let mut gamma_low = Vec::with_capacity(n * n * n);
        for b in 0..n {
            for c in 0..n {
                for d in 0..n {
                    let mut terms: Vec<Expr> = Vec::new();
                    let mut push = |coef: f64, x: &Expr, y: &Expr| {
                        if !x.is_zero() && !y.is_zero() {
                            terms.push(Expr::constant(coef) * (x * y));
                        }
                    };
                    for i in 0..dim {
                        push(1.0, alg.anchor_expr(c, i), dgm(b, d, i));
                        push(1.0, alg.anchor_expr(b, i), dgm(c, d, i));
                        push(-1.0, alg.anchor_expr(d, i), dgm(b, c, i));
                    }
                    for e in 0..n {
                        push(1.0, alg.bracket_expr(d, b, e), gm(e, c));
                        push(1.0, alg.bracket_expr(d, c, e), gm(e, b));
                        push(-1.0, alg.bracket_expr(b, c, e), gm(e, d));
                    }
                    let sum: Expr = terms.into_iter().sum();
                    gamma_low.push(Expr::constant(0.5) * sum);
                }
            }
        }
        let d_gamma_low = gamma_low.iter().flat_map(|e| coords.iter().map(move |c| e.diff(c))).collect();
        MetricModel {
            alg,
            g,
            d_g,
            gamma_low,
            d_gamma_low,
        }
    }

    pub fn algebroid(&self) -> &AlgebroidModel {
        &self.alg
    }

    pub fn rank(&self) -> usize {
        self.alg.rank()
    }

    pub fn metric_expr(&self, a: usize, b: usize) -> &Expr {
        &self.g[a * self.rank() + b]
    }

    /// Copy with the single stored entry `G_ab` replaced (`G_ba` untouched).
    pub fn with_entry(&self, a: usize, b: usize, e: Expr) -> Result<Self> {
        let n = self.rank();
        if a >= n || b >= n {
            return Err(Error::Shape(format!("entry ({a},{b}) outside a {n}x{n} metric")));
        }
        check_vars(&self.alg, &e)?;
        let mut g = self.g.clone();
        g[a * n + b] = e;
        Ok(Self::build(self.alg.clone(), g))
    }

    /// Same metric over a different algebroid with identical chart and rank.
    pub fn over(&self, alg: AlgebroidModel) -> Result<Self> {
        if alg.rank() != self.rank() || alg.coords() != self.alg.coords() {
            return Err(Error::Shape("algebroid chart or rank differs from the metric's".into()));
        }
        Ok(Self::build(alg, self.g.clone()))
    }

    /// max |G_ab - G_ba| over sampled points.
    pub fn validate_symmetry(&self, samples: usize, seed: u64) -> Result<Residual> {
        let n = self.rank();
        sweep_max(self.alg.sample_box(), samples, seed, |p| {
            let g = self.metric_eval_raw(p)?;
            let mut best = Residual::zero();
            for a in 0..n {
                for b in a + 1..n {
                    best = best.max(Residual::at((g[[a, b]] - g[[b, a]]).abs(), p, &[a, b]));
                }
            }
            Ok(best)
        })
    }

    fn eval_into(&self, exprs: &[Expr], out: &mut [f64], p: &[f64]) -> Result<()> {
        let env = Bindings::new(self.alg.coords(), p);
        for (slot, e) in out.iter_mut().zip(exprs) {
            *slot = e.eval(&env)?;
        }
        Ok(())
    }

    fn metric_eval_raw(&self, p: &[f64]) -> Result<Array2> {
        self.alg.point_check(p)?;
        let n = self.rank();
        let mut g = Array2::zeros([n, n]);
        self.eval_into(&self.g, g.as_mut_slice(), p)?;
        Ok(g)
    }

    /// `G(p)`, failing if it is degenerate.
    pub fn metric_eval(&self, p: &[f64]) -> Result<Array2> {
        Ok(self.at(p)?.g)
    }

    /// `G^{-1}(p)`, failing if `G(p)` is degenerate.
    pub fn metric_inverse(&self, p: &[f64]) -> Result<Array2> {
        Ok(self.at(p)?.g_inv)
    }

    /// Metric, inverse, first derivatives and structure functions at `p`.
    pub fn at(&self, p: &[f64]) -> Result<MetricAt> {
        let n = self.rank();
        let g = self.metric_eval_raw(p)?;
        let m = DMatrix::from_row_slice(n, n, g.as_slice());
        let det = m.determinant();
        let scale = g.max_abs();
        let threshold = DEGENERACY_THRESHOLD * scale.powi(n as i32);
        if !det.is_finite() || det.abs() <= threshold || scale == 0.0 {
            return Err(Error::Degenerate {
                point: p.to_vec(),
                det,
                threshold,
            });
        }
        let inv = m.try_inverse().ok_or_else(|| Error::Degenerate {
            point: p.to_vec(),
            det,
            threshold,
        })?;
        let g_inv = Array2::from_fn([n, n], |[a, b]| inv[(a, b)]);
        let mut d_g = Array3::zeros([n, n, self.alg.dim()]);
        self.eval_into(&self.d_g, d_g.as_mut_slice(), p)?;
        Ok(MetricAt {
            point: p.to_vec(),
            g,
            g_inv,
            d_g,
            det,
            alg: self.alg.at(p)?,
        })
    }

    fn gamma_low_at(&self, p: &[f64]) -> Result<Array3> {
        let n = self.rank();
        let mut low = Array3::zeros([n, n, n]);
        self.eval_into(&self.gamma_low, low.as_mut_slice(), p)?;
        Ok(low)
    }

    /// Christoffel symbols without certification. Used on hot paths and to
    /// build deliberately wrong connections for probes.
    pub fn connection_unchecked(&self, p: &[f64]) -> Result<ConnectionAt> {
        let metric = self.at(p)?;
        let n = self.rank();
        let low = self.gamma_low_at(p)?;
        let gamma = Array3::from_fn([n, n, n], |[b, c, a]| (0..n).map(|d| metric.g_inv[[a, d]] * low[[b, c, d]]).sum());
        Ok(ConnectionAt {
            point: p.to_vec(),
            gamma,
            g_inv: metric.g_inv.clone(),
            metric,
        })
    }

    /// Levi-Civita Christoffel symbols at `p`, certified torsion-free and
    /// metric-compatible in the frame.
    pub fn christoffel(&self, p: &[f64]) -> Result<ConnectionAt> {
        let conn = self.connection_unchecked(p)?;
        let tol = CERTIFICATION_TOL * conn.metric.g.max_abs().max(1.0);
        let (torsion, _) = conn.frame_torsion();
        let (compat, _) = conn.frame_compat();
        if !(torsion < tol && compat < tol) {
            return Err(Error::Certification {
                point: p.to_vec(),
                torsion,
                compat,
            });
        }
        Ok(conn)
    }

    /// `[b][c][a][A] = d_A Γ_bc^a`, exact from the symbolic lowered symbols.
    pub fn christoffel_derivative(&self, conn: &ConnectionAt) -> Result<Array4> {
        let (n, dim) = (self.rank(), self.alg.dim());
        let p = &conn.point;
        let low = self.gamma_low_at(p)?;
        let mut d_low = Array4::zeros([n, n, n, dim]);
        self.eval_into(&self.d_gamma_low, d_low.as_mut_slice(), p)?;
        let gi = &conn.g_inv;
        let dg = &conn.metric.d_g;
        // d_A G^{ad} = -G^{ae} d_A G_ef G^{fd}
        let d_ginv = Array3::from_fn([n, n, dim], |[a, d, i]| {
            let mut s = 0.0;
            for e in 0..n {
                for f in 0..n {
                    s -= gi[[a, e]] * dg[[e, f, i]] * gi[[f, d]];
                }
            }
            s
        });
        Ok(Array4::from_fn([n, n, n, dim], |[b, c, a, i]| {
            (0..n)
                .map(|d| d_ginv[[a, d, i]] * low[[b, c, d]] + gi[[a, d]] * d_low[[b, c, d, i]])
                .sum()
        }))
    }

    /// Riemann and Ricci tensors at `p` from exact derivatives of `Γ`.
    pub fn curvature(&self, p: &[f64]) -> Result<CurvatureAt> {
        let conn = self.christoffel(p)?;
        let d_gamma = self.christoffel_derivative(&conn)?;
        Ok(assemble_curvature(&conn, |b, c, a, i| d_gamma[[b, c, a, i]]))
    }

    /// Curvature from a connection and the derivatives of its symbols
    /// (`[b][c][a][A]`, as returned by [`MetricModel::christoffel_derivative`]).
    pub fn curvature_with(&self, conn: &ConnectionAt, d_gamma: &Array4) -> CurvatureAt {
        assemble_curvature(conn, |b, c, a, i| d_gamma[[b, c, a, i]])
    }

    /// Same as [`MetricModel::curvature`] but with central differences of
    /// step `h` for the derivatives of `Γ`.
    pub fn curvature_fd(&self, p: &[f64], h: f64) -> Result<CurvatureAt> {
        let conn = self.connection_unchecked(p)?;
        let (n, dim) = (self.rank(), self.alg.dim());
        let mut d_gamma = Array4::zeros([n, n, n, dim]);
        for i in 0..dim {
            let mut plus = p.to_vec();
            let mut minus = p.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let gp = self.connection_unchecked(&plus)?.gamma;
            let gm = self.connection_unchecked(&minus)?.gamma;
            for [b, c, a] in gp.indices() {
                d_gamma[[b, c, a, i]] = (gp[[b, c, a]] - gm[[b, c, a]]) / (2.0 * h);
            }
        }
        Ok(assemble_curvature(&conn, |b, c, a, i| d_gamma[[b, c, a, i]]))
    }

    /// Components of `T(u, v) = ∇_u v - ∇_v u - [u, v]` at `p`.
    pub fn torsion_residual(&self, p: &[f64], u: &Section, v: &Section) -> Result<Vec<f64>> {
        let conn = self.connection_unchecked(p)?;
        let (ju, jv) = (u.at(p)?, v.at(p)?);
        Ok(conn.torsion(&ju, &jv))
    }

    /// `rho(u)<v|w> - <∇_u v|w> - <v|∇_u w>` at `p`.
    pub fn compat_residual(&self, p: &[f64], u: &Section, v: &Section, w: &Section) -> Result<f64> {
        let conn = self.connection_unchecked(p)?;
        let (ju, jv, jw) = (u.at(p)?, v.at(p)?, w.at(p)?);
        Ok(conn.compat(&ju, &jv, &jw))
    }

    /// `2<∇_u v|w>` minus the six-term Koszul expression at `p`.
    pub fn koszul_check(&self, p: &[f64], u: &Section, v: &Section, w: &Section) -> Result<f64> {
        let conn = self.connection_unchecked(p)?;
        let (ju, jv, jw) = (u.at(p)?, v.at(p)?, w.at(p)?);
        Ok(conn.koszul(&ju, &jv, &jw))
    }

    /// Frame torsion and compatibility plus the Koszul identity on random
    /// sections, maximized over `samples` points.
    pub fn certify(&self, samples: usize, seed: u64) -> Result<CertificationReport> {
        let probes: Vec<Section> = (0..3)
            .map(|k| Section::random_polynomial(&self.alg, seed.wrapping_add(k)))
            .collect();
        let bx = self.alg.sample_box();
        let torsion = sweep_max(bx, samples, seed, |p| {
            let (v, idx) = self.connection_unchecked(p)?.frame_torsion();
            Ok(Residual::at(v, p, &idx))
        })?;
        let compatibility = sweep_max(bx, samples, seed, |p| {
            let (v, idx) = self.connection_unchecked(p)?.frame_compat();
            Ok(Residual::at(v, p, &idx))
        })?;
        let koszul = sweep_max(bx, samples, seed, |p| {
            let conn = self.connection_unchecked(p)?;
            let jets = probes.iter().map(|s| s.at(p)).collect::<Result<Vec<_>>>()?;
            let r = conn.koszul(&jets[0], &jets[1], &jets[2]);
            Ok(Residual::at(r.abs(), p, &[]))
        })?;
        Ok(CertificationReport {
            torsion,
            compatibility,
            koszul,
        })
    }
}

fn assemble_curvature(conn: &ConnectionAt, d_gamma: impl Fn(usize, usize, usize, usize) -> f64) -> CurvatureAt {
    let n = conn.gamma.shape()[0];
    let q = &conn.metric.alg.anchor;
    let dim = q.shape()[1];
    let br = &conn.metric.alg.bracket;
    let gm = &conn.gamma;
    // Directional derivative rho(s_a) Γ_cb^d.
    let rho_d = |a: usize, c: usize, b: usize, d: usize| -> f64 { (0..dim).map(|i| q[[a, i]] * d_gamma(c, b, d, i)).sum() };
    // op(a, b, c, d) = [R(s_a, s_b) s_c]^d
    let op = |a: usize, b: usize, c: usize, d: usize| -> f64 {
        let mut s = rho_d(a, c, b, d) - rho_d(b, c, a, d);
        for f in 0..n {
            s += gm[[c, b, f]] * gm[[f, a, d]] - gm[[c, a, f]] * gm[[f, b, d]] - br[[a, b, f]] * gm[[c, f, d]];
        }
        s
    };
    let r = Array4::from_fn([n, n, n, n], |[a, d, b, c]| op(b, c, a, d));
    let ricci = Array2::from_fn([n, n], |[a, b]| (0..n).map(|c| r[[a, c, c, b]]).sum());
    CurvatureAt {
        point: conn.point.clone(),
        r,
        ricci,
    }
}

impl MetricAt {
    pub fn rank(&self) -> usize {
        self.g.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.d_g.shape()[2]
    }

    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        let n = self.rank();
        let mut s = 0.0;
        for a in 0..n {
            for b in 0..n {
                s += self.g[[a, b]] * u[a] * v[b];
            }
        }
        s
    }

    /// `G_ab u^b`.
    pub fn lower(&self, u: &[f64]) -> Vec<f64> {
        let n = self.rank();
        (0..n).map(|a| (0..n).map(|b| self.g[[a, b]] * u[b]).sum()).collect()
    }

    /// `G^ab pi_b`.
    pub fn raise(&self, pi: &[f64]) -> Vec<f64> {
        let n = self.rank();
        (0..n).map(|a| (0..n).map(|b| self.g_inv[[a, b]] * pi[b]).sum()).collect()
    }

    /// `rho(u)^A = u^a Q_a^A`.
    pub fn anchor_of(&self, u: &[f64]) -> Vec<f64> {
        let q = &self.alg.anchor;
        (0..self.dim())
            .map(|i| u.iter().enumerate().map(|(a, ua)| ua * q[[a, i]]).sum())
            .collect()
    }

    /// `rho(u)<v|w>` from the jets of `v` and `w`.
    pub fn rho_inner(&self, u: &[f64], v: &SectionAt, w: &SectionAt) -> f64 {
        let (n, dim) = (self.rank(), self.dim());
        let x = self.anchor_of(u);
        let mut s = 0.0;
        for (i, xi) in x.iter().enumerate().take(dim) {
            for a in 0..n {
                for b in 0..n {
                    s += xi
                        * (self.d_g[[a, b, i]] * v.value[a] * w.value[b]
                            + self.g[[a, b]] * (v.grad[[a, i]] * w.value[b] + v.value[a] * w.grad[[b, i]]));
                }
            }
        }
        s
    }

    /// `[u, v]` at the point from first jets.
    pub fn bracket_of(&self, u: &SectionAt, v: &SectionAt) -> Vec<f64> {
        let (n, dim) = (self.rank(), self.dim());
        let q = &self.alg.anchor;
        let br = &self.alg.bracket;
        (0..n)
            .map(|c| {
                let mut s = 0.0;
                for a in 0..n {
                    for i in 0..dim {
                        s += q[[a, i]] * (u.value[a] * v.grad[[c, i]] - v.value[a] * u.grad[[c, i]]);
                    }
                    for b in 0..n {
                        s += br[[a, b, c]] * u.value[a] * v.value[b];
                    }
                }
                s
            })
            .collect()
    }
}

impl ConnectionAt {
    /// Builds a connection from raw symbols with no checks at all.
    pub fn from_parts(metric: MetricAt, gamma: Array3) -> Self {
        ConnectionAt {
            point: metric.point.clone(),
            g_inv: metric.g_inv.clone(),
            gamma,
            metric,
        }
    }

    pub fn rank(&self) -> usize {
        self.gamma.shape()[0]
    }

    /// `(∇_u v)^a = rho(u)[v^a] + u^c v^b Γ_bc^a`.
    pub fn nabla(&self, u: &[f64], v: &SectionAt) -> Vec<f64> {
        let n = self.rank();
        let x = self.metric.anchor_of(u);
        (0..n)
            .map(|a| {
                let mut s: f64 = x.iter().enumerate().map(|(i, xi)| xi * v.grad[[a, i]]).sum();
                for b in 0..n {
                    for c in 0..n {
                        s += u[c] * v.value[b] * self.gamma[[b, c, a]];
                    }
                }
                s
            })
            .collect()
    }

    pub fn torsion(&self, u: &SectionAt, v: &SectionAt) -> Vec<f64> {
        let uv = self.nabla(&u.value, v);
        let vu = self.nabla(&v.value, u);
        let br = self.metric.bracket_of(u, v);
        (0..self.rank()).map(|a| uv[a] - vu[a] - br[a]).collect()
    }

    pub fn compat(&self, u: &SectionAt, v: &SectionAt, w: &SectionAt) -> f64 {
        let m = &self.metric;
        m.rho_inner(&u.value, v, w) - m.inner(&self.nabla(&u.value, v), &w.value) - m.inner(&v.value, &self.nabla(&u.value, w))
    }

    pub fn koszul(&self, u: &SectionAt, v: &SectionAt, w: &SectionAt) -> f64 {
        let m = &self.metric;
        let lhs = 2.0 * m.inner(&self.nabla(&u.value, v), &w.value);
        let rhs = m.rho_inner(&u.value, v, w) + m.rho_inner(&v.value, u, w) - m.rho_inner(&w.value, u, v)
            + m.inner(&m.bracket_of(u, v), &w.value)
            - m.inner(&m.bracket_of(u, w), &v.value)
            - m.inner(&m.bracket_of(v, w), &u.value);
        lhs - rhs
    }

    /// max over frame indices of `|Γ_bc^a - Γ_cb^a - Q_cb^a|`, which is the
    /// torsion `T(s_c, s_b)`.
    pub fn frame_torsion(&self) -> (f64, [usize; 3]) {
        let n = self.rank();
        let br = &self.metric.alg.bracket;
        let mut best = (0.0, [0; 3]);
        for b in 0..n {
            for c in 0..n {
                for a in 0..n {
                    let r = (self.gamma[[b, c, a]] - self.gamma[[c, b, a]] - br[[c, b, a]]).abs();
                    if r.is_nan() || r > best.0 {
                        best = (r, [b, c, a]);
                    }
                }
            }
        }
        best
    }

    /// max over frame indices of `|Q_c^A d_A G_bd - Γ_bc^a G_ad - Γ_dc^a G_ab|`.
    pub fn frame_compat(&self) -> (f64, [usize; 3]) {
        let m = &self.metric;
        let (n, dim) = (self.rank(), m.dim());
        let q = &m.alg.anchor;
        let mut best = (0.0, [0; 3]);
        for b in 0..n {
            for c in 0..n {
                for d in 0..n {
                    let mut r: f64 = (0..dim).map(|i| q[[c, i]] * m.d_g[[b, d, i]]).sum();
                    for a in 0..n {
                        r -= self.gamma[[b, c, a]] * m.g[[a, d]] + self.gamma[[d, c, a]] * m.g[[a, b]];
                    }
                    let r = r.abs();
                    if r.is_nan() || r > best.0 {
                        best = (r, [b, c, d]);
                    }
                }
            }
        }
        best
    }

    /// Frame torsion and compatibility combined, the quantity certification
    /// thresholds.
    pub fn certification_residual(&self) -> f64 {
        self.frame_torsion().0.max(self.frame_compat().0)
    }
}

impl CurvatureAt {
    pub fn rank(&self) -> usize {
        self.ricci.shape()[0]
    }

    /// `[R(s_a, s_b) s_c]^d`.
    pub fn operator(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.r[[c, d, a, b]]
    }

    /// `R(u, v) w` at the point.
    pub fn apply(&self, u: &[f64], v: &[f64], w: &[f64]) -> Vec<f64> {
        let n = self.rank();
        (0..n)
            .map(|d| {
                let mut s = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        for c in 0..n {
                            s += u[a] * v[b] * w[c] * self.operator(a, b, c, d);
                        }
                    }
                }
                s
            })
            .collect()
    }

    /// max |R(s_a, s_b) s_c + R(s_b, s_a) s_c|.
    pub fn antisymmetry_residual(&self) -> f64 {
        let mut m: f64 = 0.0;
        for [c, d, a, b] in self.r.indices() {
            m = m.max((self.r[[c, d, a, b]] + self.r[[c, d, b, a]]).abs());
        }
        m
    }

    /// max |R(s_a, s_b) s_c + R(s_b, s_c) s_a + R(s_c, s_a) s_b|.
    pub fn bianchi_residual(&self) -> f64 {
        let n = self.rank();
        let mut m: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    for d in 0..n {
                        let s = self.operator(a, b, c, d) + self.operator(b, c, a, d) + self.operator(c, a, b, d);
                        m = m.max(s.abs());
                    }
                }
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebroid::tests::{levi_civita, nonholonomic_r3};
    use crate::expr::parse;
    use crate::sampling::SampleBox;
    use proptest::prelude::*;

    fn so3() -> MetricModel {
        let c: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|a| (0..3).map(|b| (0..3).map(|c| levi_civita(a, b, c)).collect()).collect())
            .collect();
        let alg = AlgebroidModel::lie_algebra(&["e1", "e2", "e3"], &c).unwrap();
        MetricModel::killing_form(alg).unwrap()
    }

    fn sphere() -> MetricModel {
        let mut alg = AlgebroidModel::tangent_bundle(&["theta", "phi"]);
        alg.set_sample_box(SampleBox::new(vec![(0.4, 2.7), (-3.0, 3.0)])).unwrap();
        MetricModel::from_upper(alg, vec![vec![Expr::one(), Expr::zero()], vec![parse("sin(theta)^2").unwrap()]]).unwrap()
    }

    fn ex(s: &str) -> Expr {
        parse(s).unwrap()
    }

    // A non-constant metric on a frame of R^3 with non-constant brackets.
    fn curved_r3() -> MetricModel {
        MetricModel::from_upper(
            nonholonomic_r3(),
            vec![
                vec![ex("2 + x1^2"), ex("0.3*x2"), ex("0.1*sin(x3)")],
                vec![ex("1.5 + x3^2"), ex("0.2*x1*x2")],
                vec![ex("1 + exp(x1)/2")],
            ],
        )
        .unwrap()
    }

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    #[test]
    fn identity_metric_on_plane() {
        let met = MetricModel::identity(AlgebroidModel::tangent_bundle(&["x", "y"]));
        let p = [0.3, -0.2];
        let g = met.metric_eval(&p).unwrap();
        let gi = met.metric_inverse(&p).unwrap();
        for [a, b] in g.indices() {
            let id = if a == b { 1.0 } else { 0.0 };
            assert_eq!(g[[a, b]], id);
            assert_eq!(gi[[a, b]], id);
        }
    }

    #[test]
    fn so3_killing_form_is_twice_identity() {
        let met = so3();
        let g = met.metric_eval(&[]).unwrap();
        // direct double sum over epsilon
        for [a, b] in g.indices() {
            let mut want = 0.0;
            for c in 0..3 {
                for d in 0..3 {
                    want += levi_civita(a, c, d) * levi_civita(d, b, c);
                }
            }
            assert_eq!(g[[a, b]], want);
            assert_eq!(want, if a == b { 2.0 } else { 0.0 });
        }
    }

    #[test]
    fn inverse_is_accurate() {
        let met = curved_r3();
        let at = met.at(&[0.2, -0.3, 0.4]).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let s: f64 = (0..3).map(|c| at.g[[a, c]] * at.g_inv[[c, b]]).sum();
                assert!((s - if a == b { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_metric_is_rejected() {
        let alg = AlgebroidModel::tangent_bundle(&["x1", "x2"]);
        let met = MetricModel::from_upper(alg, vec![vec![ex("x1^2"), Expr::zero()], vec![Expr::one()]]).unwrap();
        assert!(matches!(met.metric_eval(&[0.0, 0.5]), Err(Error::Degenerate { .. })));
        assert!(matches!(met.christoffel(&[0.0, 0.5]), Err(Error::Degenerate { .. })));
        assert!(met.metric_eval(&[0.5, 0.5]).is_ok());
    }

    #[test]
    fn constant_metric_has_no_christoffel_symbols() {
        let alg = AlgebroidModel::tangent_bundle(&["x", "y", "z"]);
        let met = MetricModel::constant(alg, &[vec![2.0, 0.5, 0.0], vec![0.5, 1.0, 0.1], vec![0.0, 0.1, 3.0]]).unwrap();
        let conn = met.christoffel(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(conn.gamma.max_abs(), 0.0);
    }

    #[test]
    fn so3_symbols_are_half_the_bracket() {
        // For a bi-invariant metric ∇_{s_c} s_b = 1/2 [s_c, s_b].
        let conn = so3().christoffel(&[]).unwrap();
        for [b, c, a] in conn.gamma.indices() {
            let want = 0.5 * levi_civita(c, b, a);
            assert!((conn.gamma[[b, c, a]] - want).abs() < 1e-15);
            if want != 0.0 {
                assert_eq!(conn.gamma[[b, c, a]].abs(), 0.5);
            }
        }
    }

    #[test]
    fn circle_symbol_is_log_derivative() {
        let mut alg = AlgebroidModel::tangent_bundle(&["x"]);
        alg.set_sample_box(SampleBox::new(vec![(-3.0, 3.0)])).unwrap();
        let met = MetricModel::from_upper(alg, vec![vec![ex("(2 + sin(x))^2")]]).unwrap();
        for x in [-2.5, -1.0, 0.0, 0.7, 2.9] {
            let conn = met.christoffel(&[x]).unwrap();
            let want = x.cos() / (2.0 + x.sin());
            assert!((conn.gamma[[0, 0, 0]] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn section_torsion_vanishes_and_zeroed_symbols_leave_the_bracket() {
        let met = so3();
        let alg = met.algebroid().clone();
        let (e1, e2) = (Section::frame(&alg, 0), Section::frame(&alg, 1));
        let t = met.torsion_residual(&[], &e1, &e2).unwrap();
        assert!(max_abs(&t) < 1e-15);

        let conn = met.connection_unchecked(&[]).unwrap();
        let zeroed = ConnectionAt::from_parts(conn.metric.clone(), Array3::zeros([3, 3, 3]));
        let t = zeroed.torsion(&e1.at(&[]).unwrap(), &e2.at(&[]).unwrap());
        let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-15);
        assert_eq!(t, vec![0.0, 0.0, -1.0]);
    }

    #[test]
    fn lie_algebra_compatibility_is_pure_antisymmetry() {
        let met = so3();
        let alg = met.algebroid().clone();
        let s: Vec<Section> = (0..3).map(|a| Section::frame(&alg, a)).collect();
        for u in &s {
            for v in &s {
                for w in &s {
                    assert!(met.compat_residual(&[], u, v, w).unwrap().abs() < 1e-15);
                    assert!(met.koszul_check(&[], u, v, w).unwrap().abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn random_metric_on_plane_is_certified() {
        let mut alg = AlgebroidModel::tangent_bundle(&["x1", "x2"]);
        alg.set_sample_box(SampleBox::new(vec![(-1.0, 1.0), (-1.0, 1.0)])).unwrap();
        let met = MetricModel::from_upper(
            alg.clone(),
            vec![vec![ex("3 + sin(x1*x2)"), ex("0.4*x1 - 0.2*x2^2")], vec![ex("2 + x1^2*cos(x2)")]],
        )
        .unwrap();
        let u = Section::random_polynomial(&alg, 1);
        let v = Section::random_polynomial(&alg, 2);
        let w = Section::random_polynomial(&alg, 3);
        for p in [[0.1, 0.2], [-0.7, 0.5], [0.9, -0.9]] {
            assert!(max_abs(&met.torsion_residual(&p, &u, &v).unwrap()) < 1e-9);
            assert!(met.compat_residual(&p, &u, &v, &w).unwrap().abs() < 1e-9);
            assert!(met.koszul_check(&p, &u, &v, &w).unwrap().abs() < 1e-8);
        }
        let rep = met.certify(64, 7).unwrap();
        assert!(rep.worst() < 1e-9, "{rep:?}");
    }

    #[test]
    fn nonholonomic_frame_is_certified() {
        let rep = curved_r3().certify(64, 3).unwrap();
        assert!(rep.worst() < 1e-9, "{rep:?}");
    }

    #[test]
    fn perturbed_symbols_break_certification() {
        for met in [so3(), curved_r3(), sphere()] {
            let p = met.algebroid().sample_box().grid(2)[0].clone();
            let conn = met.christoffel(&p).unwrap();
            for idx in conn.gamma.indices() {
                let mut g = conn.gamma.clone();
                g[idx] += 1e-3;
                let bad = ConnectionAt::from_parts(conn.metric.clone(), g);
                assert!(bad.certification_residual() >= 1e-4, "{idx:?}");
            }
        }
    }

    #[test]
    fn asymmetric_entry_is_detected() {
        let met = curved_r3();
        assert_eq!(met.validate_symmetry(32, 1).unwrap().value, 0.0);
        let bad = met.with_entry(0, 1, ex("0.3*x2 + 0.5")).unwrap();
        assert!(bad.validate_symmetry(32, 1).unwrap().value > 1e-2);
    }

    #[test]
    fn flat_plane_has_no_curvature() {
        let met = MetricModel::identity(AlgebroidModel::tangent_bundle(&["x", "y"]));
        let k = met.curvature(&[0.4, 0.1]).unwrap();
        assert_eq!(k.r.max_abs(), 0.0);
        assert_eq!(k.ricci.max_abs(), 0.0);
    }

    #[test]
    fn round_sphere_has_unit_curvature() {
        let met = sphere();
        for p in [[0.5, 0.3], [1.2, -2.0], [2.5, 1.0]] {
            let k = met.curvature(&p).unwrap();
            let g = met.metric_eval(&p).unwrap();
            let det = g[[0, 0]] * g[[1, 1]] - g[[0, 1]] * g[[1, 0]];
            let r1221: f64 = (0..2).map(|d| k.operator(0, 1, 1, d) * g[[d, 0]]).sum();
            assert!((r1221 - det).abs() < 1e-12, "{r1221} vs {det}");
            // constant curvature 1: R(X,Y)Z = <Y,Z> X - <X,Z> Y
            for a in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        for d in 0..2 {
                            let want = g[[b, c]] * f64::from(u8::from(a == d)) - g[[a, c]] * f64::from(u8::from(b == d));
                            assert!((k.operator(a, b, c, d) - want).abs() < 1e-12);
                        }
                    }
                }
            }
            for [a, b] in k.ricci.indices() {
                assert!((k.ricci[[a, b]] - g[[a, b]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn curvature_symmetries_on_curved_frames() {
        for met in [curved_r3(), so3(), sphere()] {
            for p in met.algebroid().sample_box().grid(2) {
                let k = met.curvature(&p).unwrap();
                assert!(k.antisymmetry_residual() < 1e-12);
                assert!(k.bianchi_residual() < 1e-8, "{}", k.bianchi_residual());
                for [a, b] in k.ricci.indices() {
                    assert!((k.ricci[[a, b]] - k.ricci[[b, a]]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn so3_curvature_matches_bi_invariant_formula() {
        // R(u,v)w = -1/4 [[u,v],w] for a bi-invariant metric.
        let k = so3().curvature(&[]).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    for d in 0..3 {
                        let mut want = 0.0;
                        for e in 0..3 {
                            want -= 0.25 * levi_civita(a, b, e) * levi_civita(e, c, d);
                        }
                        assert!((k.operator(a, b, c, d) - want).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn finite_difference_curvature_agrees() {
        let met = curved_r3();
        let p = [0.1, -0.2, 0.3];
        let exact = met.curvature(&p).unwrap();
        let fd = met.curvature_fd(&p, 1e-5).unwrap();
        for idx in exact.r.indices() {
            assert!((exact.r[idx] - fd.r[idx]).abs() < 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_plane_metrics_certify(
            a in 1.0f64..3.0, b in -0.4f64..0.4, c in 1.0f64..3.0,
            k1 in -0.5f64..0.5, k2 in -0.5f64..0.5, k3 in -0.5f64..0.5,
        ) {
            let alg = AlgebroidModel::tangent_bundle(&["x1", "x2"]);
            let met = MetricModel::from_upper(alg, vec![
                vec![ex(&format!("{a} + {k1}*x1^2")), ex(&format!("{b} + {k2}*x1*x2"))],
                vec![ex(&format!("{c} + {k3}*sin(x2)"))],
            ]).unwrap();
            let rep = met.certify(8, 1).unwrap();
            prop_assert!(rep.worst() < 1e-9);
            let k = met.curvature(&[0.2, 0.3]).unwrap();
            prop_assert!(k.bianchi_residual() < 1e-9);
        }
    }
}
