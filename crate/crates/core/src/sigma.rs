//! Lattice sigma model with a Lie algebroid target.
//!
//! Fields live on the nodes of a structured grid over a box in `R^k`,
//! `k ∈ {1, 2}`: `φ^A(z)` and `χ_i^a(z)`, the latter stored per node as
//! `chi[i * rank + a]`. Node `n` has multi-index `(n % n0, n / n0)`.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebroid::{AlgebroidModel, Section};
use crate::dynamics::{self, EPoint, Flow, Trajectory};
use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr};
use crate::riemann::{MetricAt, MetricModel, DEGENERACY_THRESHOLD};
use crate::sampling::{sweep_max, Residual};
use crate::tensor::Array2;

pub use crate::dynamics::OneFormPotential;

/// Relaxation stops once the lattice tension is below this.
pub const RELAX_TOL: f64 = 1e-6;
/// Step halvings tried before a relaxation step is abandoned.
pub const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisBoundary {
    Dirichlet,
    Periodic,
}

/// Source metric data at a point of `Σ`.
#[derive(Debug, Clone)]
pub struct SourceMetricAt {
    pub g_inv: Array2,
    pub sqrt_det: f64,
}

/// The source `(Σ, g)` together with its lattice.
#[derive(Debug, Clone)]
pub struct SourceManifold {
    coords: Vec<String>,
    nodes: Vec<usize>,
    bounds: Vec<(f64, f64)>,
    boundary: Vec<AxisBoundary>,
    metric: Vec<Vec<Expr>>,
    node_metric: Vec<SourceMetricAt>,
}

impl SourceManifold {
    pub fn new(
        coords: Vec<String>,
        nodes: Vec<usize>,
        bounds: Vec<(f64, f64)>,
        boundary: Vec<AxisBoundary>,
        metric: Vec<Vec<Expr>>,
    ) -> Result<Self> {
        let k = coords.len();
        if !(1..=2).contains(&k) {
            return Err(Error::Invalid(format!("source dimension must be 1 or 2, got {k}")));
        }
        if nodes.len() != k || bounds.len() != k || boundary.len() != k {
            return Err(Error::Shape(format!(
                "source of dimension {k} needs {k} grid sizes, bounds and boundary conditions"
            )));
        }
        if metric.len() != k || metric.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(format!("source metric must be {k}x{k}")));
        }
        for (axis, (&n, &(lo, hi))) in nodes.iter().zip(&bounds).enumerate() {
            let min = if boundary[axis] == AxisBoundary::Dirichlet { 5 } else { 3 };
            if n < min {
                return Err(Error::Invalid(format!("axis {axis} needs at least {min} nodes")));
            }
            if !(hi > lo) {
                return Err(Error::Invalid(format!("axis {axis} has empty range [{lo}, {hi}]")));
            }
        }
        for (i, row) in metric.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                if let Some(v) = e.free_vars().into_iter().find(|v| !coords.contains(v)) {
                    return Err(Error::Schema(format!("source metric entry `{e}` uses undeclared variable `{v}`")));
                }
                if j > i && e != &metric[j][i] {
                    return Err(Error::Schema(format!("source metric is not symmetric in ({i}, {j})")));
                }
            }
        }
        let mut src = SourceManifold {
            coords,
            nodes,
            bounds,
            boundary,
            metric,
            node_metric: Vec::new(),
        };
        src.node_metric = (0..src.len()).map(|n| src.metric_at(&src.point(n))).collect::<Result<_>>()?;
        Ok(src)
    }

    /// Euclidean source.
    pub fn flat(nodes: Vec<usize>, bounds: Vec<(f64, f64)>, boundary: Vec<AxisBoundary>) -> Result<Self> {
        let k = nodes.len();
        let coords: Vec<String> = match k {
            1 => vec!["t".into()],
            _ => (1..=k).map(|i| format!("z{i}")).collect(),
        };
        let metric = (0..k)
            .map(|i| (0..k).map(|j| if i == j { Expr::one() } else { Expr::zero() }).collect())
            .collect();
        Self::new(coords, nodes, bounds, boundary, metric)
    }

    /// `[t0, t1]` with `nodes` nodes and fixed endpoints.
    pub fn interval(nodes: usize, t0: f64, t1: f64) -> Result<Self> {
        Self::flat(vec![nodes], vec![(t0, t1)], vec![AxisBoundary::Dirichlet])
    }

    pub fn k(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[String] {
        &self.coords
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn boundary(&self) -> &[AxisBoundary] {
        &self.boundary
    }

    pub fn metric_expr(&self, i: usize, j: usize) -> &Expr {
        &self.metric[i][j]
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        match self.boundary[axis] {
            AxisBoundary::Dirichlet => (hi - lo) / (self.nodes[axis] - 1) as f64,
            AxisBoundary::Periodic => (hi - lo) / self.nodes[axis] as f64,
        }
    }

    pub fn multi_index(&self, n: usize) -> Vec<usize> {
        let mut rest = n;
        self.nodes
            .iter()
            .map(|&m| {
                let i = rest % m;
                rest /= m;
                i
            })
            .collect()
    }

    pub fn node(&self, idx: &[usize]) -> usize {
        idx.iter().rev().zip(self.nodes.iter().rev()).fold(0, |acc, (&i, &m)| acc * m + i)
    }

    /// Coordinates of node `n`.
    pub fn point(&self, n: usize) -> Vec<f64> {
        self.multi_index(n)
            .iter()
            .enumerate()
            .map(|(axis, &i)| self.bounds[axis].0 + i as f64 * self.spacing(axis))
            .collect()
    }

    /// Neighbor of `n` along `axis`, wrapping on periodic axes.
    pub fn neighbor(&self, n: usize, axis: usize, forward: bool) -> Option<usize> {
        let mut idx = self.multi_index(n);
        let m = self.nodes[axis];
        let i = idx[axis];
        idx[axis] = match (forward, self.boundary[axis]) {
            (true, _) if i + 1 < m => i + 1,
            (false, _) if i > 0 => i - 1,
            (true, AxisBoundary::Periodic) => 0,
            (false, AxisBoundary::Periodic) => m - 1,
            _ => return None,
        };
        Some(self.node(&idx))
    }

    /// True unless `n` lies on a Dirichlet face.
    pub fn is_interior(&self, n: usize) -> bool {
        (0..self.k()).all(|axis| self.neighbor(n, axis, true).is_some() && self.neighbor(n, axis, false).is_some())
    }

    /// Trapezoid quadrature weight of node `n`.
    pub fn weight(&self, n: usize) -> f64 {
        (0..self.k()).map(|axis| self.weight_along(n, axis)).product()
    }

    /// Trapezoid weight of node `n` along a single axis.
    pub fn weight_along(&self, n: usize, axis: usize) -> f64 {
        let h = self.spacing(axis);
        if self.neighbor(n, axis, true).is_none() || self.neighbor(n, axis, false).is_none() {
            0.5 * h
        } else {
            h
        }
    }

    pub fn metric_at(&self, z: &[f64]) -> Result<SourceMetricAt> {
        let env = Bindings::new(&self.coords, z);
        let k = self.k();
        let mut g = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                g[(i, j)] = self.metric[i][j].eval(&env)?;
            }
        }
        let det = g.determinant();
        let scale = g.amax().max(f64::MIN_POSITIVE);
        if !(det > DEGENERACY_THRESHOLD * scale.powi(k as i32)) {
            return Err(Error::Degenerate {
                point: z.to_vec(),
                det,
                threshold: DEGENERACY_THRESHOLD * scale.powi(k as i32),
            });
        }
        let inv = g.try_inverse().expect("nonzero determinant");
        Ok(SourceMetricAt {
            g_inv: Array2::from_fn([k, k], |[i, j]| inv[(i, j)]),
            sqrt_det: det.sqrt(),
        })
    }

    pub fn node_metric(&self, n: usize) -> &SourceMetricAt {
        &self.node_metric[n]
    }

    /// Central difference of a nodal field along `axis`; `None` on a
    /// Dirichlet face of that axis.
    pub fn central(&self, f: &[Vec<f64>], n: usize, axis: usize) -> Option<Vec<f64>> {
        let (p, m) = (self.neighbor(n, axis, true)?, self.neighbor(n, axis, false)?);
        let h2 = 2.0 * self.spacing(axis);
        Some(f[p].iter().zip(&f[m]).map(|(a, b)| (a - b) / h2).collect())
    }

    /// Difference along `axis`: central inside; on a Dirichlet face, the
    /// central differences of the next three nodes extrapolated
    /// quadratically, `(-3f0 + 3f1 + 2f2 - 3f3 + f4) / 2h`. That one-sided
    /// stencil has the same `h² f''' / 6` leading error as the central one,
    /// so differencing the result again stays second-order at the face.
    pub fn derivative(&self, f: &[Vec<f64>], n: usize, axis: usize) -> Vec<f64> {
        if let Some(d) = self.central(f, n, axis) {
            return d;
        }
        let h = self.spacing(axis);
        let forward = self.neighbor(n, axis, false).is_none();
        let mut idx = vec![n];
        for _ in 0..4 {
            let last = *idx.last().expect("nonempty");
            idx.push(self.neighbor(last, axis, forward).expect("at least 5 nodes"));
        }
        let s = if forward { 1.0 } else { -1.0 };
        (0..f[n].len())
            .map(|i| {
                let v: Vec<f64> = idx.iter().map(|&m| f[m][i]).collect();
                s * (-3.0 * v[0] + 3.0 * v[1] + 2.0 * v[2] - 3.0 * v[3] + v[4]) / (2.0 * h)
            })
            .collect()
    }
}

/// Discretized fields `φ^A` and `χ_i^a` on the nodes of a source lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaConfiguration {
    pub phi: Vec<Vec<f64>>,
    pub chi: Vec<Vec<f64>>,
    k: usize,
    rank: usize,
}

impl SigmaConfiguration {
    pub fn new(source: &SourceManifold, alg: &AlgebroidModel, phi: Vec<Vec<f64>>, chi: Vec<Vec<f64>>) -> Result<Self> {
        let (k, rank, dim) = (source.k(), alg.rank(), alg.dim());
        if phi.len() != source.len() || chi.len() != source.len() {
            return Err(Error::Shape(format!("configuration needs {} nodes", source.len())));
        }
        if phi.iter().any(|p| p.len() != dim) || chi.iter().any(|c| c.len() != k * rank) {
            return Err(Error::Shape(format!(
                "each node needs {dim} values of phi and {k}x{rank} values of chi"
            )));
        }
        if phi.iter().chain(&chi).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("configuration has non-finite entries".into()));
        }
        Ok(SigmaConfiguration { phi, chi, k, rank })
    }

    /// `φ` given at the nodes, `χ` its least-squares lift
    /// `χ_i^a Q_a^A(φ) ≈ ∂_i φ^A`.
    pub fn from_phi(source: &SourceManifold, alg: &AlgebroidModel, phi: Vec<Vec<f64>>) -> Result<Self> {
        if phi.len() != source.len() {
            return Err(Error::Shape(format!("configuration needs {} nodes", source.len())));
        }
        let (k, rank) = (source.k(), alg.rank());
        let chi = (0..source.len())
            .into_par_iter()
            .map(|n| {
                let at = alg.at(&phi[n])?;
                let qt = DMatrix::from_fn(alg.dim(), rank, |i, a| at.anchor[[a, i]]);
                let svd = qt.svd(true, true);
                let mut out = Vec::with_capacity(k * rank);
                for axis in 0..k {
                    let d = DVector::from_vec(source.derivative(&phi, n, axis));
                    if rank > 0 && alg.dim() > 0 {
                        let sol = svd.solve(&d, 1e-12).map_err(|e| Error::Invalid(e.to_string()))?;
                        out.extend(sol.iter());
                    } else {
                        out.extend(std::iter::repeat_n(0.0, rank));
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(source, alg, phi, chi)
    }

    /// `φ^A(z)` from expressions in the source coordinates.
    pub fn from_exprs(source: &SourceManifold, alg: &AlgebroidModel, phi: &[Expr]) -> Result<Self> {
        if phi.len() != alg.dim() {
            return Err(Error::Shape(format!("need {} expressions for phi, got {}", alg.dim(), phi.len())));
        }
        let values = (0..source.len())
            .map(|n| {
                let z = source.point(n);
                let env = Bindings::new(source.coords(), &z);
                phi.iter().map(|e| e.eval(&env)).collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_phi(source, alg, values)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn chi_at(&self, n: usize, i: usize) -> &[f64] {
        &self.chi[n][i * self.rank..(i + 1) * self.rank]
    }

    pub fn csv_header(source: &SourceManifold, alg: &AlgebroidModel) -> String {
        let mut cols: Vec<String> = source.coords().to_vec();
        cols.extend(alg.coords().iter().map(|c| format!("phi_{c}")));
        for i in 1..=source.k() {
            cols.extend(alg.frame().iter().map(|f| format!("chi{i}_{f}")));
        }
        cols.join(",")
    }

    pub fn to_csv(&self, source: &SourceManifold, alg: &AlgebroidModel) -> String {
        let mut out = Self::csv_header(source, alg);
        out.push('\n');
        for n in 0..self.phi.len() {
            let row: Vec<String> = source
                .point(n)
                .iter()
                .chain(&self.phi[n])
                .chain(&self.chi[n])
                .map(|v| v.to_string())
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(source: &SourceManifold, alg: &AlgebroidModel, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Schema("empty configuration file".into()))?;
        let want = Self::csv_header(source, alg);
        if header.trim() != want {
            return Err(Error::Schema(format!("configuration header `{header}` does not match `{want}`")));
        }
        let (k, dim) = (source.k(), alg.dim());
        let mut phi = Vec::new();
        let mut chi = Vec::new();
        for (n, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::Schema(format!("configuration row {}: {e}", n + 1)))?;
            if vals.len() != k + dim + k * alg.rank() {
                return Err(Error::Schema(format!("configuration row {} has {} columns", n + 1, vals.len())));
            }
            if n >= source.len() {
                return Err(Error::Shape(format!("configuration has more than {} rows", source.len())));
            }
            let z = source.point(n);
            let tol = 1e-9 * (1.0 + z.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            if z.iter().zip(&vals[..k]).any(|(a, b)| (a - b).abs() > tol) {
                return Err(Error::Shape(format!("configuration row {} is not at grid node {z:?}", n + 1)));
            }
            phi.push(vals[k..k + dim].to_vec());
            chi.push(vals[k + dim..].to_vec());
        }
        Self::new(source, alg, phi, chi)
    }

    pub fn write_csv(&self, source: &SourceManifold, alg: &AlgebroidModel, w: &mut impl std::io::Write) -> std::io::Result<()> {
        w.write_all(self.to_csv(source, alg).as_bytes())
    }
}

/// Residuals of the morphism condition `TΣ → E`.
#[derive(Debug, Clone, Serialize)]
pub struct MorphismResidual {
    /// max `|∂_i φ^A - χ_i^a Q_a^A(φ)|`
    pub anchor: Residual,
    /// max `|∂_1 χ_2^a - ∂_2 χ_1^a + Q_bc^a(φ) χ_1^b χ_2^c|` (zero for k = 1)
    pub curl: Residual,
    /// The curl residual with its sign, at the node where `curl` is attained.
    pub curl_signed: f64,
}

/// Interior-node residuals of the morphism condition, by central differences.
pub fn morphism_residual(cfg: &SigmaConfiguration, alg: &AlgebroidModel, source: &SourceManifold) -> Result<MorphismResidual> {
    let (k, n_rank, dim) = (source.k(), alg.rank(), alg.dim());
    let per_node = (0..source.len())
        .into_par_iter()
        .filter(|&n| source.is_interior(n))
        .map(|n| {
            let at = alg.at(&cfg.phi[n])?;
            let z = source.point(n);
            let mut anchor = Residual::zero();
            for i in 0..k {
                let d = source.central(&cfg.phi, n, i).expect("interior node");
                let chi = cfg.chi_at(n, i);
                for a_coord in 0..dim {
                    let pushed: f64 = (0..n_rank).map(|a| chi[a] * at.anchor[[a, a_coord]]).sum();
                    anchor = anchor.max(Residual::at((d[a_coord] - pushed).abs(), &z, &[i, a_coord]));
                }
            }
            let mut curl = (Residual::zero(), 0.0);
            if k == 2 {
                let d1chi = source.central(&cfg.chi, n, 0).expect("interior node");
                let d2chi = source.central(&cfg.chi, n, 1).expect("interior node");
                let (c1, c2) = (cfg.chi_at(n, 0), cfg.chi_at(n, 1));
                for a in 0..n_rank {
                    let mut r = d1chi[n_rank + a] - d2chi[a];
                    for b in 0..n_rank {
                        for c in 0..n_rank {
                            r += at.bracket[[b, c, a]] * c1[b] * c2[c];
                        }
                    }
                    if r.abs() > curl.0.value || r.is_nan() {
                        curl = (Residual::at(r.abs(), &z, &[a]), r);
                    }
                }
            }
            Ok((anchor, curl))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = MorphismResidual {
        anchor: Residual::zero(),
        curl: Residual::zero(),
        curl_signed: 0.0,
    };
    for (anchor, (curl, signed)) in per_node {
        out.anchor = out.anchor.max(anchor);
        if curl.value > out.curl.value || curl.value.is_nan() {
            out.curl = curl;
            out.curl_signed = signed;
        }
    }
    Ok(out)
}

/// `½ √|g| g^ij χ_i^a χ_j^b G_ab(φ)` at node `n`.
fn lagrangian_density(cfg: &SigmaConfiguration, met: &MetricModel, source: &SourceManifold, n: usize) -> Result<f64> {
    let g = met.metric_eval(&cfg.phi[n])?;
    let sm = source.node_metric(n);
    let mut s = 0.0;
    for i in 0..source.k() {
        for j in 0..source.k() {
            let (ci, cj) = (cfg.chi_at(n, i), cfg.chi_at(n, j));
            let mut q = 0.0;
            for a in 0..met.rank() {
                for b in 0..met.rank() {
                    q += ci[a] * cj[b] * g[[a, b]];
                }
            }
            s += sm.g_inv[[i, j]] * q;
        }
    }
    Ok(0.5 * sm.sqrt_det * s)
}

/// The action by trapezoid quadrature over the nodes.
pub fn action(cfg: &SigmaConfiguration, met: &MetricModel, source: &SourceManifold) -> Result<f64> {
    let terms = (0..source.len())
        .into_par_iter()
        .map(|n| Ok(source.weight(n) * lagrangian_density(cfg, met, source, n)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum())
}

/// Tension field `(1/√|g|) ∂_j(√|g| g^ji χ_i^a) + g^ij χ_j^c χ_i^b Γ_bc^a(φ)`
/// by central differences. Entries on Dirichlet faces are zero.
pub fn el_residual(cfg: &SigmaConfiguration, met: &MetricModel, source: &SourceManifold) -> Result<Vec<Vec<f64>>> {
    let (k, rank) = (source.k(), met.rank());
    // flux[n][j * rank + a] = √|g| g^ji χ_i^a
    let flux: Vec<Vec<f64>> = (0..source.len())
        .map(|n| {
            let sm = source.node_metric(n);
            let mut f = vec![0.0; k * rank];
            for j in 0..k {
                for i in 0..k {
                    for (a, c) in cfg.chi_at(n, i).iter().enumerate() {
                        f[j * rank + a] += sm.sqrt_det * sm.g_inv[[j, i]] * c;
                    }
                }
            }
            f
        })
        .collect();
    (0..source.len())
        .into_par_iter()
        .map(|n| {
            if !source.is_interior(n) {
                return Ok(vec![0.0; rank]);
            }
            let conn = met.connection_unchecked(&cfg.phi[n])?;
            let sm = source.node_metric(n);
            let mut tau = vec![0.0; rank];
            for j in 0..k {
                let d = source.central(&flux, n, j).expect("interior node");
                for a in 0..rank {
                    tau[a] += d[j * rank + a] / sm.sqrt_det;
                }
            }
            for i in 0..k {
                for j in 0..k {
                    let (ci, cj) = (cfg.chi_at(n, i), cfg.chi_at(n, j));
                    for a in 0..rank {
                        let mut s = 0.0;
                        for b in 0..rank {
                            for c in 0..rank {
                                s += cj[c] * ci[b] * conn.gamma[[b, c, a]];
                            }
                        }
                        tau[a] += sm.g_inv[[i, j]] * s;
                    }
                }
            }
            Ok(tau)
        })
        .collect()
}

/// max over interior nodes of the tension's largest component.
pub fn max_tension(cfg: &SigmaConfiguration, met: &MetricModel, source: &SourceManifold) -> Result<Residual> {
    let tau = el_residual(cfg, met, source)?;
    Ok(tau.iter().enumerate().fold(Residual::zero(), |best, (n, t)| {
        let (a, v) = t
            .iter()
            .map(|x| x.abs())
            .enumerate()
            .fold((0, 0.0), |m, (a, v)| if v > m.1 || v.is_nan() { (a, v) } else { m });
        best.max(Residual::at(v, &source.point(n), &[a]))
    }))
}

/// Pullback metric `M = Q^{-T} G Q^{-1}` on the base and its coordinate
/// derivatives, for an invertible anchor.
struct Pullback {
    m: DMatrix<f64>,
    dm: Vec<DMatrix<f64>>,
}

fn anchor_inverse(at: &MetricAt) -> Result<DMatrix<f64>> {
    let dim = at.dim();
    let q = DMatrix::from_fn(dim, dim, |a, i| at.alg.anchor[[a, i]]);
    let scale = q.amax().max(f64::MIN_POSITIVE);
    let det = q.determinant();
    if !(det.abs() > DEGENERACY_THRESHOLD * scale.powi(dim as i32)) {
        return Err(Error::Invalid(format!("anchor is not invertible at {:?} (det {det:e})", at.point)));
    }
    // P[A][a] with χ^a = Σ_A v^A P[A][a]
    Ok(q.try_inverse().expect("nonzero determinant"))
}

fn pullback(met: &MetricModel, x: &[f64], with_derivative: bool) -> Result<Pullback> {
    let at = met.at(x)?;
    let dim = at.dim();
    let p = anchor_inverse(&at)?;
    let g = DMatrix::from_fn(dim, dim, |a, b| at.g[[a, b]]);
    let m = &p * &g * p.transpose();
    let dm = if with_derivative {
        (0..dim)
            .map(|c| {
                let dq = DMatrix::from_fn(dim, dim, |a, i| at.alg.d_anchor[[a, i, c]]);
                let dp = -(&p * dq * &p);
                let dg = DMatrix::from_fn(dim, dim, |a, b| at.d_g[[a, b, c]]);
                let t = &dp * &g * p.transpose();
                &t + t.transpose() + &p * dg * p.transpose()
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(Pullback { m, dm })
}

/// One term `w · v^T M(m) v'` of the lattice action, with `v`, `v'` and `m`
/// linear in the nodal values of `φ`.
#[derive(Debug, Clone)]
struct LatticeTerm {
    weight: f64,
    v: Vec<(usize, f64)>,
    w: Option<Vec<(usize, f64)>>,
    mid: Vec<(usize, f64)>,
}

fn combine(phi: &[Vec<f64>], coefs: &[(usize, f64)]) -> DVector<f64> {
    let dim = phi[0].len();
    let mut out = DVector::zeros(dim);
    for &(n, c) in coefs {
        for (o, x) in out.iter_mut().zip(&phi[n]) {
            *o += c * x;
        }
    }
    out
}

/// The lattice action minimized by [`relax`]: edge differences for the
/// diagonal part of `g^ij`, cell averages for the mixed part, each metric
/// evaluated at the midpoint of its stencil.
#[derive(Debug, Clone)]
pub struct LatticeAction {
    terms: Vec<LatticeTerm>,
}

impl LatticeAction {
    pub fn new(source: &SourceManifold) -> Result<Self> {
        let k = source.k();
        let mut terms = Vec::new();
        let h: Vec<f64> = (0..k).map(|a| source.spacing(a)).collect();
        for n in 0..source.len() {
            let z = source.point(n);
            for axis in 0..k {
                let Some(p) = source.neighbor(n, axis, true) else { continue };
                let mut zm = z.clone();
                zm[axis] += 0.5 * h[axis];
                let sm = source.metric_at(&zm)?;
                // transverse trapezoid weight
                let transverse: f64 = (0..k).filter(|&b| b != axis).map(|b| source.weight_along(n, b)).product();
                terms.push(LatticeTerm {
                    weight: 0.5 * transverse * h[axis] * sm.sqrt_det * sm.g_inv[[axis, axis]],
                    v: vec![(p, 1.0 / h[axis]), (n, -1.0 / h[axis])],
                    w: None,
                    mid: vec![(p, 0.5), (n, 0.5)],
                });
            }
            if k == 2 && !source.metric_expr(0, 1).is_zero() {
                let (Some(e1), Some(e2)) = (source.neighbor(n, 0, true), source.neighbor(n, 1, true)) else {
                    continue;
                };
                let e12 = source.neighbor(e1, 1, true).expect("cell corner");
                let zc = vec![z[0] + 0.5 * h[0], z[1] + 0.5 * h[1]];
                let sm = source.metric_at(&zc)?;
                let (a, b) = (0.5 / h[0], 0.5 / h[1]);
                terms.push(LatticeTerm {
                    weight: h[0] * h[1] * sm.sqrt_det * sm.g_inv[[0, 1]],
                    v: vec![(e1, a), (n, -a), (e12, a), (e2, -a)],
                    w: Some(vec![(e2, b), (n, -b), (e12, b), (e1, -b)]),
                    mid: vec![(n, 0.25), (e1, 0.25), (e2, 0.25), (e12, 0.25)],
                });
            }
        }
        Ok(LatticeAction { terms })
    }

    pub fn value(&self, met: &MetricModel, phi: &[Vec<f64>]) -> Result<f64> {
        let parts = self
            .terms
            .par_iter()
            .map(|t| {
                let pb = pullback(met, combine(phi, &t.mid).as_slice(), false)?;
                let v = combine(phi, &t.v);
                let w = t.w.as_ref().map_or_else(|| v.clone(), |w| combine(phi, w));
                Ok(t.weight * v.dot(&(&pb.m * w)))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(parts.iter().sum())
    }

    /// Value, nodal gradient and the frozen-metric Hessian blocks
    /// `(n, n', block)`.
    #[allow(clippy::type_complexity)]
    fn linearize(&self, met: &MetricModel, phi: &[Vec<f64>]) -> Result<(f64, Vec<DVector<f64>>, Vec<(usize, usize, DMatrix<f64>)>)> {
        let dim = phi[0].len();
        let parts = self
            .terms
            .par_iter()
            .map(|t| {
                let pb = pullback(met, combine(phi, &t.mid).as_slice(), true)?;
                let v = combine(phi, &t.v);
                let w = t.w.as_ref().map_or_else(|| v.clone(), |w| combine(phi, w));
                let mv = &pb.m * &v;
                let mw = &pb.m * &w;
                let value = t.weight * v.dot(&mw);
                let dmid = DVector::from_fn(dim, |c, _| v.dot(&(&pb.dm[c] * &w)));
                let wc = t.w.as_deref().unwrap_or(&t.v);
                let mut grads: Vec<(usize, DVector<f64>)> = Vec::new();
                for &(n, c) in &t.v {
                    grads.push((n, &mw * (t.weight * c)));
                }
                for &(n, c) in wc {
                    grads.push((n, &mv * (t.weight * c)));
                }
                for &(n, mu) in &t.mid {
                    grads.push((n, &dmid * (t.weight * mu)));
                }
                let mut blocks = Vec::new();
                for &(n, c) in &t.v {
                    for &(n2, c2) in wc {
                        blocks.push((n, n2, &pb.m * (t.weight * c * c2)));
                        blocks.push((n2, n, &pb.m * (t.weight * c * c2)));
                    }
                }
                Ok((value, grads, blocks))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut value = 0.0;
        let mut grad = vec![DVector::zeros(dim); phi.len()];
        let mut blocks = Vec::new();
        for (v, gs, bs) in parts {
            value += v;
            for (n, g) in gs {
                grad[n] += g;
            }
            blocks.extend(bs);
        }
        Ok((value, grad, blocks))
    }
}

/// Tension from the lattice action gradient:
/// `τ^a = -G^ab Q_b^A ∂S/∂φ^A / (w_n √|g|)`.
fn lattice_tension(met: &MetricModel, source: &SourceManifold, phi: &[Vec<f64>], grad: &[DVector<f64>]) -> Result<Residual> {
    let per_node = (0..source.len())
        .into_par_iter()
        .filter(|&n| source.is_interior(n))
        .map(|n| {
            let at = met.at(&phi[n])?;
            let (rank, dim) = (at.rank(), at.dim());
            let qg: Vec<f64> = (0..rank)
                .map(|b| (0..dim).map(|i| at.alg.anchor[[b, i]] * grad[n][i]).sum())
                .collect();
            let scale = source.weight(n) * source.node_metric(n).sqrt_det;
            let tau = at.raise(&qg);
            let (a, v) = tau
                .iter()
                .map(|x| x.abs() / scale)
                .enumerate()
                .fold((0, 0.0), |m, (a, v)| if v > m.1 || v.is_nan() { (a, v) } else { m });
            Ok(Residual::at(v, &source.point(n), &[a]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_node.into_iter().fold(Residual::zero(), Residual::max))
}

#[derive(Debug, Clone, Serialize)]
pub struct RelaxLogEntry {
    pub iter: usize,
    pub action: f64,
    pub max_tension: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct RelaxOutcome {
    pub config: SigmaConfiguration,
    pub log: Vec<RelaxLogEntry>,
    pub converged: bool,
    /// Lattice action of the returned configuration.
    pub action: f64,
    /// Lattice tension of the returned configuration.
    pub max_tension: Residual,
}

impl RelaxOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = String::from("iter,action,max_tension,step\n");
        for e in &self.log {
            out.push_str(&format!("{},{},{},{}\n", e.iter, e.action, e.max_tension, e.step));
        }
        out
    }
}

/// Relax toward a harmonic map by descent on the lattice action over `φ`.
///
/// Nodes on Dirichlet faces keep their values from `cfg0`; `χ` of the
/// result is the lift of `φ`. Each step solves the Hessian of the action
/// with the pullback metric frozen, scales the direction by `step` and
/// halves it (up to [`MAX_HALVINGS`] times) until the action does not
/// increase beyond its floating-point evaluation error. The anchor must be
/// invertible on the image.
pub fn relax(cfg0: &SigmaConfiguration, met: &MetricModel, source: &SourceManifold, step: f64, iters: usize) -> Result<RelaxOutcome> {
    let alg = met.algebroid();
    let dim = alg.dim();
    if alg.rank() != dim || dim == 0 {
        return Err(Error::Invalid(format!(
            "relaxation needs an invertible anchor; rank {} over a base of dimension {dim}",
            alg.rank()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("step must be positive, got {step}")));
    }
    let lattice = LatticeAction::new(source)?;
    let free: Vec<Option<usize>> = {
        let mut next = 0;
        (0..source.len())
            .map(|n| {
                source.is_interior(n).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let n_free = free.iter().flatten().count();
    let all_periodic = source.boundary().iter().all(|b| *b == AxisBoundary::Periodic);
    let mut phi = cfg0.phi.clone();
    let (mut value, mut grad, mut blocks) = lattice.linearize(met, &phi)?;
    let mut tension = lattice_tension(met, source, &phi, &grad)?;
    let mut log = vec![RelaxLogEntry {
        iter: 0,
        action: value,
        max_tension: tension.value,
        step: 0.0,
    }];
    let mut converged = tension.value < RELAX_TOL;
    for iter in 1..=iters {
        if converged || n_free == 0 {
            converged = true;
            break;
        }
        // frozen-metric Hessian on the free nodes
        let size = n_free * dim;
        let mut coo = CooMatrix::new(size, size);
        let mut max_diag: f64 = 0.0;
        for (n, n2, b) in &blocks {
            let (Some(i), Some(j)) = (free[*n], free[*n2]) else { continue };
            for r in 0..dim {
                for c in 0..dim {
                    coo.push(i * dim + r, j * dim + c, b[(r, c)]);
                    if i == j && r == c {
                        max_diag = max_diag.max(b[(r, c)]);
                    }
                }
            }
        }
        if all_periodic {
            for i in 0..size {
                coo.push(i, i, 1e-10 * max_diag);
            }
        }
        let hess = CscMatrix::from(&coo);
        let chol = CscCholesky::factor(&hess).map_err(|e| Error::Invalid(format!("relaxation Hessian is not positive definite: {e}")))?;
        let mut rhs = DMatrix::zeros(size, 1);
        for (n, slot) in free.iter().enumerate() {
            if let Some(i) = slot {
                for r in 0..dim {
                    rhs[(i * dim + r, 0)] = -grad[n][r];
                }
            }
        }
        let dir = chol.solve(&rhs);
        let floor = 64.0 * f64::EPSILON * value.abs().max(f64::MIN_POSITIVE);
        let mut s = step;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<Vec<f64>> = phi
                .iter()
                .enumerate()
                .map(|(n, p)| match free[n] {
                    Some(i) => p.iter().enumerate().map(|(r, x)| x + s * dir[(i * dim + r, 0)]).collect(),
                    None => p.clone(),
                })
                .collect();
            if trial.iter().flatten().all(|v| v.is_finite()) {
                if let Ok(v) = lattice.value(met, &trial) {
                    if v <= value + floor {
                        accepted = Some(trial);
                        break;
                    }
                }
            }
            s *= 0.5;
        }
        let Some(next) = accepted else { break };
        phi = next;
        (value, grad, blocks) = lattice.linearize(met, &phi)?;
        tension = lattice_tension(met, source, &phi, &grad)?;
        log.push(RelaxLogEntry {
            iter,
            action: value,
            max_tension: tension.value,
            step: s,
        });
        converged = tension.value < RELAX_TOL;
    }
    let config = SigmaConfiguration::from_phi(source, alg, phi)?;
    Ok(RelaxOutcome {
        config,
        log,
        converged,
        action: value,
        max_tension: tension,
    })
}

/// Geodesic from `x0` to `x1` in time `t_end`, by Newton shooting on the
/// initial velocity with RK4 step `h`.
pub fn geodesic_boundary_value(met: &MetricModel, x0: &[f64], x1: &[f64], t_end: f64, h: f64) -> Result<Trajectory> {
    let alg = met.algebroid();
    let (dim, rank) = (alg.dim(), alg.rank());
    if x0.len() != dim || x1.len() != dim {
        return Err(Error::Shape(format!("endpoints need {dim} coordinates")));
    }
    let at = alg.at(x0)?;
    let qt = DMatrix::from_fn(dim, rank, |i, a| at.anchor[[a, i]]);
    let chord = DVector::from_iterator(dim, x0.iter().zip(x1).map(|(a, b)| (b - a) / t_end));
    let mut y = qt
        .clone()
        .svd(true, true)
        .solve(&chord, 1e-12)
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let miss = |y: &DVector<f64>| -> Result<(DVector<f64>, Trajectory)> {
        let tr = dynamics::integrate(met, Flow::Geodesic, x0, y.as_slice(), t_end, h)?;
        let m = DVector::from_iterator(dim, tr.last_x().iter().zip(x1).map(|(a, b)| a - b));
        Ok((m, tr))
    };
    let scale = 1.0 + x1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _ in 0..50 {
        let (m, tr) = miss(&y)?;
        if m.amax() < 1e-13 * scale {
            return Ok(tr);
        }
        let eps = 1e-6 * (1.0 + y.amax());
        let mut jac = DMatrix::zeros(dim, rank);
        for a in 0..rank {
            let mut yp = y.clone();
            yp[a] += eps;
            let mut ym = y.clone();
            ym[a] -= eps;
            let d = (miss(&yp)?.0 - miss(&ym)?.0) / (2.0 * eps);
            jac.set_column(a, &d);
        }
        let delta = jac.svd(true, true).solve(&m, 1e-12).map_err(|e| Error::Invalid(e.to_string()))?;
        y -= delta;
    }
    let (m, tr) = miss(&y)?;
    if m.amax() < 1e-9 * scale {
        Ok(tr)
    } else {
        Err(Error::Invalid(format!("shooting did not converge, endpoint miss {:e}", m.amax())))
    }
}

/// `φ ↦ φ + ε ξ^α u_α^a Q_a`, `χ_i^a ↦ χ_i^a + ε ξ^α χ_i^b (Q_b^A ∂_A u_α^a - u_α^c Q_cb^a)`.
pub fn field_redefinition(
    cfg: &SigmaConfiguration,
    alg: &AlgebroidModel,
    sections: &[Section],
    xi: &[f64],
    epsilon: f64,
) -> Result<SigmaConfiguration> {
    if sections.len() != xi.len() {
        return Err(Error::Shape(format!("{} sections but {} coefficients", sections.len(), xi.len())));
    }
    let (rank, dim, k) = (alg.rank(), alg.dim(), cfg.k);
    let combined = if sections.is_empty() {
        Section::zero(alg)
    } else {
        Section::combination("xi_u", &sections.iter().zip(xi).map(|(s, &x)| (x, s)).collect::<Vec<_>>())?
    };
    let shifted = (0..cfg.phi.len())
        .into_par_iter()
        .map(|n| {
            let p = &cfg.phi[n];
            let at = alg.at(p)?;
            let u = combined.at(p)?;
            let phi: Vec<f64> = (0..dim)
                .map(|i| p[i] + epsilon * (0..rank).map(|a| u.value[a] * at.anchor[[a, i]]).sum::<f64>())
                .collect();
            let mut chi = cfg.chi[n].clone();
            for i in 0..k {
                let c = cfg.chi_at(n, i);
                for a in 0..rank {
                    let mut s = 0.0;
                    for b in 0..rank {
                        let mut t: f64 = (0..dim).map(|aa| at.anchor[[b, aa]] * u.grad[[a, aa]]).sum();
                        for cc in 0..rank {
                            t -= u.value[cc] * at.bracket[[cc, b, a]];
                        }
                        s += c[b] * t;
                    }
                    chi[i * rank + a] += epsilon * s;
                }
            }
            Ok((phi, chi))
        })
        .collect::<Result<Vec<_>>>()?;
    let (phi, chi) = shifted.into_iter().unzip();
    Ok(SigmaConfiguration { phi, chi, k, rank })
}

/// `|S(redefined) - S| / ε`.
pub fn invariance_check(
    cfg: &SigmaConfiguration,
    met: &MetricModel,
    source: &SourceManifold,
    sections: &[Section],
    xi: &[f64],
    epsilon: f64,
) -> Result<f64> {
    if xi.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let moved = field_redefinition(cfg, met.algebroid(), sections, xi, epsilon)?;
    Ok((action(&moved, met, source)? - action(cfg, met, source)?).abs() / epsilon)
}

#[derive(Debug, Clone, Serialize)]
pub struct NoetherCurrent {
    /// `J^j` per node.
    pub current: Vec<Vec<f64>>,
    /// max over interior nodes of `|(1/√|g|) ∂_j(√|g| J^j)|`.
    pub divergence: Residual,
    /// max `|J|` over the grid.
    pub magnitude: f64,
}

/// `J^j = ξ^α u_α^a g^ji χ_i^b G_ba` and its divergence.
pub fn noether_current(
    cfg: &SigmaConfiguration,
    met: &MetricModel,
    source: &SourceManifold,
    sections: &[Section],
    xi: &[f64],
) -> Result<NoetherCurrent> {
    if sections.len() != xi.len() {
        return Err(Error::Shape(format!("{} sections but {} coefficients", sections.len(), xi.len())));
    }
    let (k, rank) = (source.k(), met.rank());
    let current = (0..source.len())
        .into_par_iter()
        .map(|n| {
            let p = &cfg.phi[n];
            let g = met.metric_eval(p)?;
            let mut u = vec![0.0; rank];
            for (s, &x) in sections.iter().zip(xi) {
                for (ua, v) in u.iter_mut().zip(s.value_at(p)?) {
                    *ua += x * v;
                }
            }
            let sm = source.node_metric(n);
            Ok((0..k)
                .map(|j| {
                    (0..k)
                        .map(|i| {
                            let c = cfg.chi_at(n, i);
                            let q: f64 = (0..rank)
                                .flat_map(|a| (0..rank).map(move |b| (a, b)))
                                .map(|(a, b)| u[a] * c[b] * g[[b, a]])
                                .sum();
                            sm.g_inv[[j, i]] * q
                        })
                        .sum()
                })
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let scaled: Vec<Vec<f64>> = current
        .iter()
        .enumerate()
        .map(|(n, j)| j.iter().map(|v| v * source.node_metric(n).sqrt_det).collect())
        .collect();
    let mut divergence = Residual::zero();
    for n in (0..source.len()).filter(|&n| source.is_interior(n)) {
        let d: f64 = (0..k).map(|j| source.central(&scaled, n, j).expect("interior node")[j]).sum();
        divergence = divergence.max(Residual::at((d / source.node_metric(n).sqrt_det).abs(), &source.point(n), &[]));
    }
    let magnitude = current.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(NoetherCurrent {
        current,
        divergence,
        magnitude,
    })
}

pub fn noether_divergence(
    cfg: &SigmaConfiguration,
    met: &MetricModel,
    source: &SourceManifold,
    sections: &[Section],
    xi: &[f64],
) -> Result<Residual> {
    Ok(noether_current(cfg, met, source, sections, xi)?.divergence)
}

/// Worldline `(x, χ)` of the charged particle with potential `c`.
pub fn charged_particle(met: &MetricModel, c: &OneFormPotential, s0: &EPoint, t_end: f64, h: f64) -> Result<Trajectory> {
    dynamics::integrate(met, Flow::Charged(c), &s0.x, &s0.y, t_end, h)
}

/// `J = u^a (χ^b G_ba + C_a)` along a charged trajectory.
pub fn charged_current(met: &MetricModel, c: &OneFormPotential, u: &Section, traj: &Trajectory) -> Result<Vec<f64>> {
    (0..traj.len())
        .map(|i| {
            let x = traj.x(i);
            let at = met.at(x)?;
            let mut p = at.lower(traj.fiber(i));
            for (pa, ca) in p.iter_mut().zip(c.value_at(x)?) {
                *pa += ca;
            }
            Ok(u.value_at(x)?.iter().zip(&p).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// max `|(L_u C)_b|` with `(L_u C)_b = u^a F_ab + Q_b^A ∂_A(u^a C_a)`.
pub fn potential_lie_derivative(alg: &AlgebroidModel, c: &OneFormPotential, u: &Section, samples: usize, seed: u64) -> Result<Residual> {
    let n = alg.rank();
    let contraction = OneFormPotential::exact(alg, &(0..n).map(|a| u.component(a) * &c.components()[a]).sum::<Expr>())?;
    sweep_max(alg.sample_box(), samples, seed, |x| {
        let f = c.field_strength(alg, x)?;
        let uv = u.value_at(x)?;
        let d = contraction.value_at(x)?;
        let mut best = Residual::zero();
        for b in 0..n {
            let r: f64 = (0..n).map(|a| uv[a] * f[[a, b]]).sum::<f64>() + d[b];
            best = best.max(Residual::at(r.abs(), x, &[b]));
        }
        Ok(best)
    })
}

/// max `|F_bc + F_cb|` over samples.
pub fn field_strength_antisymmetry(alg: &AlgebroidModel, c: &OneFormPotential, samples: usize, seed: u64) -> Result<Residual> {
    let n = alg.rank();
    sweep_max(alg.sample_box(), samples, seed, |x| {
        let f = c.field_strength(alg, x)?;
        let mut best = Residual::zero();
        for a in 0..n {
            for b in a..n {
                best = best.max(Residual::at((f[[a, b]] + f[[b, a]]).abs(), x, &[a, b]));
            }
        }
        Ok(best)
    })
}
