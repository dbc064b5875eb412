//! Killing sections: tangent lifts, the three equivalent Killing conditions,
//! conserved charges, transport of Killing data along curves, discovery of
//! the Killing algebra, Killing-Stäckel tensors and the Maxwell-type
//! identities.
//!
//! The second covariant derivative is
//! `∇²_{b,c} u = ∇_{s_b}(∇_{s_c} u) - ∇_{∇_{s_b} s_c} u`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::algebroid::{bracket_sections, AlgebroidModel, Section, SectionAt};
use crate::dynamics::{self, FlowKind, PhaseGradient, Trajectory};
use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr};
use crate::riemann::{ConnectionAt, CurvatureAt, MetricAt, MetricModel};
use crate::sampling::{draw_points, rng_for, sweep_max, Residual, SampleBox};
use crate::tensor::{Array2, Array3};

/// Residuals below this (after normalization) count as Killing.
pub const KILLING_TOL: f64 = 1e-8;
/// Singular values below this fraction of the largest span the null space.
pub const NULL_CUTOFF: f64 = 1e-7;
/// Grid points per axis for [`killing_find`].
pub const FIND_GRID: usize = 5;

/// The lift of a section to a vector field on the total space of `E`, in
/// coordinates `(x^A, y^a)`.
#[derive(Debug, Clone)]
pub struct LiftedField {
    /// `u^a Q_a^A`
    pub base: Vec<Expr>,
    /// `y^a Q_a^A ∂_A u^c - y^a u^b Q_ba^c`
    pub fiber: Vec<Expr>,
}

impl LiftedField {
    fn components(&self) -> impl Iterator<Item = &Expr> {
        self.base.iter().chain(&self.fiber)
    }

    /// Components at `(x, y)`.
    pub fn eval(&self, alg: &AlgebroidModel, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let env = (Bindings::new(alg.coords(), x), Bindings::new(alg.velocity_names(), y));
        Ok(self.components().map(|e| e.eval(&env)).collect::<Result<Vec<_>, _>>()?)
    }

    /// Commutator of two vector fields on `E`, computed symbolically.
    pub fn commutator(&self, other: &LiftedField, alg: &AlgebroidModel) -> LiftedField {
        let vars: Vec<&String> = alg.coords().iter().chain(alg.velocity_names()).collect();
        let x: Vec<&Expr> = self.components().collect();
        let y: Vec<&Expr> = other.components().collect();
        let comp = |k: usize| -> Expr {
            vars.iter()
                .enumerate()
                .filter_map(|(j, v)| {
                    let t = x[j] * &y[k].diff(v) - y[j] * &x[k].diff(v);
                    (!t.is_zero()).then_some(t)
                })
                .sum()
        };
        let dim = alg.dim();
        LiftedField {
            base: (0..dim).map(comp).collect(),
            fiber: (dim..vars.len()).map(comp).collect(),
        }
    }
}

pub fn tangent_lift(alg: &AlgebroidModel, u: &Section) -> Result<LiftedField> {
    if u.rank() != alg.rank() {
        return Err(Error::Shape(format!(
            "section `{}` has rank {}, model has {}",
            u.name,
            u.rank(),
            alg.rank()
        )));
    }
    let (n, dim) = (alg.rank(), alg.dim());
    let y: Vec<Expr> = alg.velocity_names().iter().map(|v| Expr::var(v)).collect();
    let base = (0..dim)
        .map(|i| {
            (0..n)
                .filter(|&a| !alg.anchor_expr(a, i).is_zero())
                .map(|a| u.component(a) * alg.anchor_expr(a, i))
                .sum()
        })
        .collect();
    let fiber = (0..n)
        .map(|c| {
            let mut terms = Vec::new();
            for a in 0..n {
                for (i, coord) in alg.coords().iter().enumerate() {
                    let q = alg.anchor_expr(a, i);
                    let du = u.component(c).diff(coord);
                    if !q.is_zero() && !du.is_zero() {
                        terms.push(&y[a] * &(q * &du));
                    }
                }
                for b in 0..n {
                    let q = alg.bracket_expr(b, a, c);
                    if !q.is_zero() && !u.component(b).is_zero() {
                        terms.push(-(&y[a] * &(u.component(b) * q)));
                    }
                }
            }
            terms.into_iter().sum()
        })
        .collect();
    Ok(LiftedField { base, fiber })
}

fn unit_vector(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Base points paired with random unit fiber vectors, `samples` of them.
fn fiber_samples(
    bx: &SampleBox,
    rank: usize,
    samples: usize,
    seed: u64,
    accept: impl Fn(&[f64]) -> Result<()> + Sync,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let base = draw_points(bx, samples, seed, accept)?;
    let mut rng = rng_for(seed, u64::MAX);
    Ok((0..samples.max(1))
        .map(|i| (base[i % base.len()].clone(), unit_vector(&mut rng, rank)))
        .collect())
}

/// max over sampled `(x, y)` of `|lift([u, v]) - [lift(u), lift(v)]|`.
pub fn lift_morphism_residual(alg: &AlgebroidModel, u: &Section, v: &Section, samples: usize, seed: u64) -> Result<Residual> {
    let lhs = tangent_lift(alg, &bracket_sections(alg, u, v)?)?;
    let rhs = tangent_lift(alg, u)?.commutator(&tangent_lift(alg, v)?, alg);
    let pts = fiber_samples(alg.sample_box(), alg.rank(), samples, seed, |p| {
        lhs.eval(alg, p, &vec![0.0; alg.rank()]).map(|_| ())
    })?;
    pts.par_iter()
        .map(|(x, y)| {
            let a = lhs.eval(alg, x, y)?;
            let b = rhs.eval(alg, x, y)?;
            let (k, r) = a
                .iter()
                .zip(&b)
                .map(|(p, q)| (p - q).abs())
                .enumerate()
                .fold((0, 0.0), |m, (k, r)| if r > m.1 || r.is_nan() { (k, r) } else { m });
            let point: Vec<f64> = x.iter().chain(y).copied().collect();
            Ok(Residual::at(r, &point, &[k]))
        })
        .try_reduce(Residual::zero, |a, b| Ok(a.max(b)))
}

/// `(∇_c u)^a` stored as `[c][a]`.
fn nabla_matrix(conn: &ConnectionAt, u: &SectionAt) -> Array2 {
    let n = conn.rank();
    let mut out = Array2::zeros([n, n]);
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        for (a, v) in conn.nabla(&e, u).into_iter().enumerate() {
            out[[c, a]] = v;
        }
    }
    out
}

/// `L_ab = (∇_a u)^c G_cb`.
fn killing_l(conn: &ConnectionAt, u: &SectionAt) -> Array2 {
    let n = conn.rank();
    let nab = nabla_matrix(conn, u);
    let g = &conn.metric.g;
    Array2::from_fn([n, n], |[a, b]| (0..n).map(|c| nab[[a, c]] * g[[c, b]]).sum())
}

fn lemma_at(m: &MetricAt, u: &SectionAt) -> (f64, [usize; 2]) {
    let (n, dim) = (m.rank(), m.dim());
    let q = &m.alg.anchor;
    let br = &m.alg.bracket;
    let x = m.anchor_of(&u.value);
    // (Q_b^A ∂_A u^d)
    let du = Array2::from_fn([n, n], |[b, d]| (0..dim).map(|i| q[[b, i]] * u.grad[[d, i]]).sum());
    // u^a Q_ab^d
    let ad = Array2::from_fn([n, n], |[b, d]| (0..n).map(|a| u.value[a] * br[[a, b, d]]).sum());
    let mut best = (0.0, [0, 0]);
    for b in 0..n {
        for c in b..n {
            let mut r: f64 = (0..dim).map(|i| x[i] * m.d_g[[b, c, i]]).sum();
            for d in 0..n {
                r += (du[[b, d]] - ad[[b, d]]) * m.g[[d, c]] + (du[[c, d]] - ad[[c, d]]) * m.g[[d, b]];
            }
            if r.abs() > best.0 || r.is_nan() {
                best = (r.abs(), [b, c]);
            }
        }
    }
    best
}

/// max over samples and `(b, c)` of
/// `u^a Q_a^A ∂_A G_bc + Q_b^A ∂_A u^d G_dc + Q_c^A ∂_A u^d G_db - u^a Q_ab^d G_dc - u^a Q_ac^d G_db`.
pub fn killing_residual_lemma(met: &MetricModel, u: &Section, samples: usize, seed: u64) -> Result<Residual> {
    sweep_max(met.algebroid().sample_box(), samples, seed, |p| {
        let (r, idx) = lemma_at(&met.at(p)?, &u.at(p)?);
        Ok(Residual::at(r, p, &idx))
    })
}

/// max of `|{u^a π_a, H}|` over sampled base points and unit momenta.
pub fn killing_residual_poisson(met: &MetricModel, u: &Section, samples: usize, seed: u64) -> Result<Residual> {
    let alg = met.algebroid();
    let pts = fiber_samples(alg.sample_box(), alg.rank(), samples, seed, |p| {
        met.at(p)?;
        u.at(p).map(|_| ())
    })?;
    pts.par_iter()
        .map(|(x, pi)| {
            let at = met.at(x)?;
            let ju = u.at(x)?;
            let dim = alg.dim();
            let df = PhaseGradient {
                dx: (0..dim).map(|i| (0..alg.rank()).map(|a| ju.grad[[a, i]] * pi[a]).sum()).collect(),
                dpi: ju.value.clone(),
            };
            let dh = dynamics::energy_gradient(&at, pi);
            let r = dynamics::bracket_from_gradients(&at.alg, pi, &df, &dh).abs();
            let point: Vec<f64> = x.iter().chain(pi).copied().collect();
            Ok(Residual::at(r, &point, &[]))
        })
        .try_reduce(Residual::zero, |a, b| Ok(a.max(b)))
}

/// max over samples and frame pairs of `|L_bc + L_cb|`, `L_ab = (∇_a u)^c G_cb`.
pub fn killing_residual_connection(met: &MetricModel, u: &Section, samples: usize, seed: u64) -> Result<Residual> {
    let n = met.rank();
    sweep_max(met.algebroid().sample_box(), samples, seed, |p| {
        let conn = met.connection_unchecked(p)?;
        let l = killing_l(&conn, &u.at(p)?);
        let mut best = Residual::zero();
        for b in 0..n {
            for c in b..n {
                best = best.max(Residual::at((l[[b, c]] + l[[c, b]]).abs(), p, &[b, c]));
            }
        }
        Ok(best)
    })
}

/// `max(1, |u|_inf, |G|_inf)` over the sample box.
pub fn killing_scale(met: &MetricModel, u: &Section, samples: usize, seed: u64) -> Result<f64> {
    let r = sweep_max(met.algebroid().sample_box(), samples, seed, |p| {
        let g = met.at(p)?.g.max_abs();
        let v = u.value_at(p)?.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        Ok(Residual::at(g.max(v), p, &[]))
    })?;
    Ok(r.value.max(1.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct KillingReport {
    pub section: String,
    pub residual_lemma: Residual,
    pub residual_poisson: Residual,
    pub residual_connection: Residual,
    /// Normalization applied before comparing with the tolerance.
    pub scale: f64,
    pub tolerance: f64,
    pub verdict: bool,
    /// All three forms below tolerance, or all three above ten times it.
    pub consistent: bool,
}

impl KillingReport {
    pub fn normalized(&self) -> [f64; 3] {
        [
            self.residual_lemma.value / self.scale,
            self.residual_poisson.value / self.scale,
            self.residual_connection.value / self.scale,
        ]
    }
}

/// All three Killing residuals with a verdict.
pub fn killing_check(met: &MetricModel, u: &Section, samples: usize, seed: u64) -> Result<KillingReport> {
    let residual_lemma = killing_residual_lemma(met, u, samples, seed)?;
    let residual_poisson = killing_residual_poisson(met, u, samples, seed)?;
    let residual_connection = killing_residual_connection(met, u, samples, seed)?;
    let scale = killing_scale(met, u, samples, seed)?;
    let mut report = KillingReport {
        section: u.name.clone(),
        residual_lemma,
        residual_poisson,
        residual_connection,
        scale,
        tolerance: KILLING_TOL,
        verdict: false,
        consistent: false,
    };
    let norm = report.normalized();
    let below = norm.iter().filter(|&&r| r < KILLING_TOL).count();
    let far_above = norm.iter().filter(|&&r| r > 10.0 * KILLING_TOL).count();
    report.verdict = below == 3;
    report.consistent = below == 3 || far_above == 3;
    Ok(report)
}

/// max_t `|<u|γ(t)> - <u|γ(0)>|` along a geodesic or cogeodesic trajectory.
pub fn charge_along_geodesic(met: &MetricModel, u: &Section, traj: &Trajectory) -> Result<f64> {
    let charge = |i: usize| -> Result<f64> {
        let x = traj.x(i);
        let at = met.at(x)?;
        let y = match traj.kind {
            FlowKind::Cogeodesic => at.raise(traj.fiber(i)),
            _ => traj.fiber(i).to_vec(),
        };
        Ok(at.inner(&u.value_at(x)?, &y))
    };
    let q0 = charge(0)?;
    let mut drift: f64 = 0.0;
    for i in 0..traj.len() {
        drift = drift.max((charge(i)? - q0).abs());
    }
    Ok(drift)
}

/// Value `u^a` and `L_ab = (∇_a u)^c G_cb` of a Killing section at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct KillingData {
    pub u: Vec<f64>,
    pub l: Array2,
}

/// Exact `(u, L)` of a section at `p`.
pub fn killing_data(met: &MetricModel, u: &Section, p: &[f64]) -> Result<KillingData> {
    let conn = met.connection_unchecked(p)?;
    let ju = u.at(p)?;
    Ok(KillingData {
        u: ju.value.clone(),
        l: killing_l(&conn, &ju),
    })
}

/// Tolerance on `|L + L^T|` for transport input.
pub const TRANSPORT_ANTISYMMETRY_TOL: f64 = 1e-12;

/// Propagate Killing data along the geodesic underlying `curve`, integrating
/// the geodesic jointly with
/// `du^a/dt = y^b (L_bd G^da - u^f Γ_fb^a)` and
/// `dL_ab/dt = y^c (u^e <R(s_c, s_e) s_a | s_b> + Γ_ac^e L_eb + Γ_bc^f L_af)`
/// using the curve's step size and length. Returns the data at the end.
pub fn killing_transport(met: &MetricModel, data0: &KillingData, curve: &Trajectory) -> Result<KillingData> {
    let n = met.rank();
    let dim = met.algebroid().dim();
    if data0.u.len() != n || data0.l.shape() != [n, n] {
        return Err(Error::Shape(format!("Killing data must have rank {n}")));
    }
    let asym = (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .fold(0.0f64, |m, (a, b)| m.max((data0.l[[a, b]] + data0.l[[b, a]]).abs()));
    if asym > TRANSPORT_ANTISYMMETRY_TOL {
        return Err(Error::Invalid(format!("L must be antisymmetric, |L + L^T| = {asym:e}")));
    }
    let x0 = curve.x(0).to_vec();
    let y0 = match curve.kind {
        FlowKind::Geodesic => curve.fiber(0).to_vec(),
        FlowKind::Cogeodesic => met.at(&x0)?.raise(curve.fiber(0)),
        FlowKind::Charged => return Err(Error::Invalid("transport needs a geodesic or cogeodesic curve".into())),
    };
    let t_end = curve.times[curve.len() - 1];
    let state0: Vec<f64> = x0.iter().chain(&y0).chain(&data0.u).chain(data0.l.as_slice()).copied().collect();
    let rhs = |s: &[f64]| -> Result<Vec<f64>> {
        let x = &s[..dim];
        let y = &s[dim..dim + n];
        let u = &s[dim + n..dim + 2 * n];
        let l = &s[dim + 2 * n..];
        let conn = met.connection_unchecked(x)?;
        let d_gamma = met.christoffel_derivative(&conn)?;
        let curv = met.curvature_with(&conn, &d_gamma);
        let (gm, gi, g) = (&conn.gamma, &conn.g_inv, &conn.metric.g);
        let mut out = conn.metric.anchor_of(y);
        for a in 0..n {
            let mut s = 0.0;
            for b in 0..n {
                for c in 0..n {
                    s -= gm[[b, c, a]] * y[c] * y[b];
                }
            }
            out.push(s);
        }
        for a in 0..n {
            let mut s = 0.0;
            for b in 0..n {
                for d in 0..n {
                    s += y[b] * l[b * n + d] * gi[[d, a]];
                }
                for f in 0..n {
                    s -= y[b] * u[f] * gm[[f, b, a]];
                }
            }
            out.push(s);
        }
        for a in 0..n {
            for b in 0..n {
                let mut s = 0.0;
                for c in 0..n {
                    let mut t = 0.0;
                    for e in 0..n {
                        for d in 0..n {
                            t += u[e] * curv.operator(c, e, a, d) * g[[d, b]];
                        }
                        t += gm[[a, c, e]] * l[e * n + b] + gm[[b, c, e]] * l[a * n + e];
                    }
                    s += y[c] * t;
                }
                out.push(s);
            }
        }
        Ok(out)
    };
    let (_, states) = dynamics::rk4(&state0, t_end, curve.h, rhs)?;
    let last = states.last().expect("rk4 returns at least the initial state");
    let gap = last[..dim]
        .iter()
        .zip(curve.last_x())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if gap > 1e-8 * (1.0 + t_end) {
        return Err(Error::Invalid(format!(
            "transported curve ends {gap:e} away from the given trajectory"
        )));
    }
    Ok(KillingData {
        u: last[dim + n..dim + 2 * n].to_vec(),
        l: Array2::from_fn([n, n], |[a, b]| last[dim + 2 * n + a * n + b]),
    })
}

/// All monomials in the coordinates of total degree at most `degree`,
/// constant first.
pub fn monomials(coords: &[String], degree: usize) -> Vec<Expr> {
    let mut out = vec![(Expr::one(), vec![0usize; coords.len()])];
    let mut frontier = out.clone();
    for _ in 0..degree {
        let mut next = Vec::new();
        for (e, exps) in &frontier {
            // extend only at or after the last used variable, so each
            // monomial is produced once
            let start = exps.iter().rposition(|&k| k > 0).unwrap_or(0);
            for (i, c) in coords.iter().enumerate().skip(start) {
                let mut ex = exps.clone();
                ex[i] += 1;
                next.push((e * &Expr::var(c), ex));
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out.into_iter().map(|(e, _)| e).collect()
}

/// A basis of Killing sections found numerically.
#[derive(Debug, Clone)]
pub struct KillingBasis {
    pub sections: Vec<Section>,
    /// `[α][β][γ]`: `[u_α, u_β] = C_αβ^γ u_γ`.
    pub structure_constants: Array3,
    pub dim: usize,
    /// `n(n+1)/2`.
    pub bound: usize,
    pub singular_values: Vec<f64>,
    /// Smallest kept singular value over the largest discarded one.
    pub gap_ratio: f64,
    /// max `|[u_α, u_β] - C_αβ^γ u_γ|` over the grid.
    pub closure_residual: f64,
    pub rows: usize,
    pub unknowns: usize,
}

/// Killing sections with polynomial components up to `degree`.
pub fn killing_find(met: &MetricModel, degree: usize) -> Result<KillingBasis> {
    let basis = monomials(met.algebroid().coords(), degree);
    killing_find_with_basis(met, &basis, FIND_GRID)
}

/// Killing sections in the span of `basis` (per component), found from
/// the null space of the sampled Killing equations on a tensor grid.
pub fn killing_find_with_basis(met: &MetricModel, basis: &[Expr], per_axis: usize) -> Result<KillingBasis> {
    let alg = met.algebroid();
    let (n, dim, k) = (alg.rank(), alg.dim(), basis.len());
    let unknowns = n * k;
    let grid = alg.sample_box().grid(per_axis);
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|b| (b..n).map(move |c| (b, c))).collect();
    let rows = grid.len() * pairs.len();
    if rows < unknowns || unknowns == 0 {
        return Err(Error::Underdetermined { rows, unknowns });
    }
    let grads: Vec<Vec<Expr>> = basis.iter().map(|m| alg.coords().iter().map(|c| m.diff(c)).collect()).collect();
    let mut a = DMatrix::<f64>::zeros(rows, unknowns);
    for (gi, p) in grid.iter().enumerate() {
        let at = met.at(p)?;
        let env = Bindings::new(alg.coords(), p);
        let m: Vec<f64> = basis.iter().map(|e| e.eval(&env)).collect::<Result<_, _>>()?;
        let dm: Vec<Vec<f64>> = grads
            .iter()
            .map(|g| g.iter().map(|e| e.eval(&env)).collect::<Result<_, _>>())
            .collect::<Result<_, _>>()?;
        let q = &at.alg.anchor;
        let br = &at.alg.bracket;
        for (pi, &(b, c)) in pairs.iter().enumerate() {
            let row = gi * pairs.len() + pi;
            for d in 0..n {
                let mut value_coef: f64 = (0..dim).map(|i| q[[d, i]] * at.d_g[[b, c, i]]).sum();
                for e in 0..n {
                    value_coef -= br[[d, b, e]] * at.g[[e, c]] + br[[d, c, e]] * at.g[[e, b]];
                }
                for kk in 0..k {
                    let mut coef = m[kk] * value_coef;
                    for i in 0..dim {
                        coef += dm[kk][i] * (q[[b, i]] * at.g[[d, c]] + q[[c, i]] * at.g[[d, b]]);
                    }
                    a[(row, d * k + kk)] = coef;
                }
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let s_max = singular_values[0];
    let cutoff = NULL_CUTOFF * s_max;
    let kept = singular_values.iter().filter(|&&s| s > cutoff).count();
    let dim_null = unknowns - kept;
    let gap_ratio = if kept == 0 || dim_null == 0 {
        f64::INFINITY
    } else {
        singular_values[kept - 1] / singular_values[kept].max(f64::MIN_POSITIVE)
    };
    let bound = n * (n + 1) / 2;
    if dim_null > bound {
        return Err(Error::Invalid(format!(
            "found {dim_null} independent Killing sections, above the bound {bound}; the sample grid does not resolve the basis"
        )));
    }
    let sections: Vec<Section> = order[kept..]
        .iter()
        .enumerate()
        .map(|(alpha, &row)| {
            let mut coefs: Vec<f64> = (0..unknowns).map(|j| v_t[(row, j)]).collect();
            // deterministic sign: largest coefficient positive
            let lead = coefs.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
            if lead < 0.0 {
                coefs.iter_mut().for_each(|c| *c = -*c);
            }
            let comps = (0..n)
                .map(|d| {
                    (0..k)
                        .filter(|&kk| coefs[d * k + kk].abs() > 1e-14)
                        .map(|kk| Expr::constant(coefs[d * k + kk]) * basis[kk].clone())
                        .sum()
                })
                .collect();
            Section::new(alg, format!("killing_{}", alpha + 1), comps)
        })
        .collect::<Result<_>>()?;
    let (structure_constants, closure_residual) = structure_constants(alg, &sections, &grid)?;
    Ok(KillingBasis {
        sections,
        structure_constants,
        dim: dim_null,
        bound,
        singular_values,
        gap_ratio,
        closure_residual,
        rows,
        unknowns,
    })
}

/// Least-squares structure constants of a family of sections on the given
/// points, with the worst closure residual.
pub fn structure_constants(alg: &AlgebroidModel, sections: &[Section], points: &[Vec<f64>]) -> Result<(Array3, f64)> {
    let (m, n) = (sections.len(), alg.rank());
    let mut c = Array3::zeros([m, m, m]);
    if m == 0 {
        return Ok((c, 0.0));
    }
    let rows = points.len() * n;
    let mut basis = DMatrix::<f64>::zeros(rows, m);
    for (pi, p) in points.iter().enumerate() {
        for (g, s) in sections.iter().enumerate() {
            for (a, v) in s.value_at(p)?.into_iter().enumerate() {
                basis[(pi * n + a, g)] = v;
            }
        }
    }
    let svd = basis.clone().svd(true, true);
    let mut worst: f64 = 0.0;
    for al in 0..m {
        for be in 0..m {
            let w = bracket_sections(alg, &sections[al], &sections[be])?;
            let mut rhs = DVector::<f64>::zeros(rows);
            for (pi, p) in points.iter().enumerate() {
                for (a, v) in w.value_at(p)?.into_iter().enumerate() {
                    rhs[pi * n + a] = v;
                }
            }
            let sol = svd.solve(&rhs, 1e-12).map_err(|e| Error::Invalid(e.to_string()))?;
            for g in 0..m {
                c[[al, be, g]] = sol[g];
            }
            let res = (&basis * &sol - &rhs).amax();
            worst = worst.max(res);
        }
    }
    Ok((c, worst))
}

/// max `|∇_v v|` over samples.
pub fn geodesic_section_residual(met: &MetricModel, v: &Section, samples: usize, seed: u64) -> Result<Residual> {
    sweep_max(met.algebroid().sample_box(), samples, seed, |p| {
        let conn = met.connection_unchecked(p)?;
        let jv = v.at(p)?;
        let acc = conn.nabla(&jv.value, &jv);
        let (k, r) = acc
            .iter()
            .map(|x| x.abs())
            .enumerate()
            .fold((0, 0.0), |m, (k, r)| if r > m.1 { (k, r) } else { m });
        Ok(Residual::at(r, p, &[k]))
    })
}

/// A function on the dual bundle that is polynomial in the momenta.
#[derive(Debug, Clone)]
pub enum StackelTensor {
    /// The energy `½ G^ab π_a π_b` (degree 2), kept implicit since the
    /// inverse metric is only available numerically.
    Energy,
    Polynomial {
        expr: Expr,
        degree: u32,
    },
}

impl StackelTensor {
    /// Checks homogeneity of degree `degree` in the momenta by Euler's
    /// identity at sampled phase points.
    pub fn polynomial(alg: &AlgebroidModel, expr: Expr, degree: u32) -> Result<Self> {
        let names = dynamics::phase_names(alg);
        if let Some(v) = expr.free_vars().into_iter().find(|v| !names.contains(v)) {
            return Err(Error::Schema(format!("`{expr}` uses undeclared variable `{v}`")));
        }
        let mom: Vec<Expr> = alg.momentum_names().iter().map(|m| expr.diff(m)).collect();
        let mut rng = rng_for(0x57ac, 0);
        for _ in 0..16 {
            let x = alg.sample_box().draw(&mut rng);
            let pi: Vec<f64> = (0..alg.rank()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = dynamics::PhasePoint::new(x, pi.clone());
            let k = dynamics::eval_phase(alg, &expr, &s)?;
            let euler: f64 = mom
                .iter()
                .zip(&pi)
                .map(|(d, p)| dynamics::eval_phase(alg, d, &s).map(|v| v * p))
                .sum::<Result<f64>>()?;
            if (euler - f64::from(degree) * k).abs() > 1e-9 * (1.0 + k.abs()) {
                return Err(Error::Invalid(format!(
                    "`{expr}` is not homogeneous of degree {degree} in the momenta"
                )));
            }
        }
        Ok(StackelTensor::Polynomial { expr, degree })
    }

    /// `(u^a π_a)^k`.
    pub fn power_of_section(alg: &AlgebroidModel, u: &Section, k: u32) -> Result<Self> {
        let lin: Expr = alg
            .momentum_names()
            .iter()
            .enumerate()
            .map(|(a, m)| u.component(a) * &Expr::var(m))
            .sum();
        Self::polynomial(alg, lin.pow(f64::from(k)), k)
    }

    pub fn degree(&self) -> u32 {
        match self {
            StackelTensor::Energy => 2,
            StackelTensor::Polynomial { degree, .. } => *degree,
        }
    }
}

/// max `|{K, H}|` over sampled base points and unit momenta.
pub fn stackel_residual(met: &MetricModel, k: &StackelTensor, samples: usize, seed: u64) -> Result<Residual> {
    let alg = met.algebroid();
    let pts = fiber_samples(alg.sample_box(), alg.rank(), samples, seed, |p| met.at(p).map(|_| ()))?;
    pts.par_iter()
        .map(|(x, pi)| {
            let s = dynamics::PhasePoint::new(x.clone(), pi.clone());
            let r = match k {
                StackelTensor::Energy => dynamics::energy_self_bracket(met, &s)?,
                StackelTensor::Polynomial { expr, .. } => dynamics::bracket_with_energy(met, expr, &s)?,
            };
            let point: Vec<f64> = x.iter().chain(pi).copied().collect();
            Ok(Residual::at(r.abs(), &point, &[]))
        })
        .try_reduce(Residual::zero, |a, b| Ok(a.max(b)))
}

/// First and second covariant derivatives of a section at a point.
#[derive(Debug, Clone)]
pub struct CovariantJet {
    /// `[c][a] = (∇_c u)^a`
    pub first: Array2,
    /// `[b][c][a] = (∇²_{b,c} u)^a`
    pub second: Array3,
    pub conn: ConnectionAt,
    pub curvature: CurvatureAt,
}

pub fn covariant_jet(met: &MetricModel, u: &Section, p: &[f64]) -> Result<CovariantJet> {
    let conn = met.connection_unchecked(p)?;
    let d_gamma = met.christoffel_derivative(&conn)?;
    let curvature = met.curvature_with(&conn, &d_gamma);
    let ju = u.at(p)?;
    let (n, dim) = (met.rank(), met.algebroid().dim());
    let alg = &conn.metric.alg;
    let gm = &conn.gamma;
    let first = nabla_matrix(&conn, &ju);
    // d_B (∇_c u)^a, stored [c][a][B]
    let d_first = Array3::from_fn([n, n, dim], |[c, a, bb]| {
        let mut s = 0.0;
        for i in 0..dim {
            s += alg.d_anchor[[c, i, bb]] * ju.grad[[a, i]] + alg.anchor[[c, i]] * ju.hess[[a, i, bb]];
        }
        for f in 0..n {
            s += ju.grad[[f, bb]] * gm[[f, c, a]] + ju.value[f] * d_gamma[[f, c, a, bb]];
        }
        s
    });
    let second = Array3::from_fn([n, n, n], |[b, c, a]| {
        let mut s: f64 = (0..dim).map(|bb| alg.anchor[[b, bb]] * d_first[[c, a, bb]]).sum();
        for f in 0..n {
            s += first[[c, f]] * gm[[f, b, a]];
            // ∇_{∇_{s_b} s_c} u, with ∇_{s_b} s_c = Γ_cb^f s_f
            s -= gm[[c, b, f]] * first[[f, a]];
        }
        s
    });
    Ok(CovariantJet {
        first,
        second,
        conn,
        curvature,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MaxwellReport {
    /// max `|(∇_a u)^a|`
    pub divergence: Residual,
    /// max over `(a, b, c)` of `|(∇²_{b,c} u)^d G_da + u^e R_e^d_ca G_db|`
    pub second_derivative: Residual,
    /// max over `a` of `|G^cb (∇²_{b,c} u)^a + u^b R_bc G^ca|`
    pub trace: Residual,
}

pub fn maxwell_identities(met: &MetricModel, u: &Section, samples: usize, seed: u64) -> Result<MaxwellReport> {
    let n = met.rank();
    let bx = met.algebroid().sample_box();
    let divergence = sweep_max(bx, samples, seed, |p| {
        let jet = covariant_jet(met, u, p)?;
        let div: f64 = (0..n).map(|a| jet.first[[a, a]]).sum();
        Ok(Residual::at(div.abs(), p, &[]))
    })?;
    let second_derivative = sweep_max(bx, samples, seed, |p| {
        let jet = covariant_jet(met, u, p)?;
        let g = &jet.conn.metric.g;
        let uv = u.value_at(p)?;
        let mut best = Residual::zero();
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let mut s = 0.0;
                    for d in 0..n {
                        s += jet.second[[b, c, d]] * g[[d, a]];
                        for e in 0..n {
                            s += uv[e] * jet.curvature.r[[e, d, c, a]] * g[[d, b]];
                        }
                    }
                    best = best.max(Residual::at(s.abs(), p, &[a, b, c]));
                }
            }
        }
        Ok(best)
    })?;
    let trace = sweep_max(bx, samples, seed, |p| {
        let jet = covariant_jet(met, u, p)?;
        let gi = &jet.conn.g_inv;
        let uv = u.value_at(p)?;
        let mut best = Residual::zero();
        for a in 0..n {
            let mut s = 0.0;
            for b in 0..n {
                for c in 0..n {
                    s += gi[[c, b]] * jet.second[[b, c, a]] + uv[b] * jet.curvature.ricci[[b, c]] * gi[[c, a]];
                }
            }
            best = best.max(Residual::at(s.abs(), p, &[a]));
        }
        Ok(best)
    })?;
    Ok(MaxwellReport {
        divergence,
        second_derivative,
        trace,
    })
}
