//! Energy, the linear Poisson bracket on the dual bundle, and the geodesic
//! and cogeodesic flows.
//!
//! With the bracket `{F, H} = Q_a^A (F_πa H_xA - F_xA H_πa) - Q_ba^c π_c F_πa H_πb`
//! the flow of a Hamiltonian `H` is `dF/dt = {H, F}`.

use std::fmt::Write as _;
use std::io;

use crate::algebroid::{AlgebroidAt, AlgebroidModel};
use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr};
use crate::riemann::{MetricAt, MetricModel};
use crate::tensor::Array2;

/// Any state component above this magnitude aborts an integration.
pub const BLOW_UP: f64 = 1e12;

/// A point `(x^A, π_a)` of the dual bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub pi: Vec<f64>,
}

/// A point `(x^A, y^a)` of the bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct EPoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, pi: Vec<f64>) -> Self {
        PhasePoint { x, pi }
    }
}

impl EPoint {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        EPoint { x, y }
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{what} has non-finite entries")))
    }
}

fn check_shape(met: &MetricModel, x: &[f64], fiber: &[f64]) -> Result<()> {
    let alg = met.algebroid();
    alg.point_check(x)?;
    if fiber.len() != alg.rank() {
        return Err(Error::Shape(format!(
            "fiber vector has {} entries, rank is {}",
            fiber.len(),
            alg.rank()
        )));
    }
    check_finite(x, "base point")?;
    check_finite(fiber, "fiber vector")
}

/// `½ G^ab π_a π_b`.
pub fn hamiltonian(met: &MetricModel, s: &PhasePoint) -> Result<f64> {
    check_shape(met, &s.x, &s.pi)?;
    let at = met.at(&s.x)?;
    Ok(0.5 * dot(&s.pi, &at.raise(&s.pi)))
}

/// `½ G_ab y^a y^b`, the same energy on the bundle side.
pub fn kinetic_energy(met: &MetricModel, s: &EPoint) -> Result<f64> {
    check_shape(met, &s.x, &s.y)?;
    let at = met.at(&s.x)?;
    Ok(0.5 * at.inner(&s.y, &s.y))
}

/// `π_b = G_ab y^a`.
pub fn dualize(met: &MetricModel, s: &EPoint) -> Result<PhasePoint> {
    check_shape(met, &s.x, &s.y)?;
    let at = met.at(&s.x)?;
    Ok(PhasePoint::new(s.x.clone(), at.lower(&s.y)))
}

/// `y^a = G^ab π_b`.
pub fn undualize(met: &MetricModel, s: &PhasePoint) -> Result<EPoint> {
    check_shape(met, &s.x, &s.pi)?;
    let at = met.at(&s.x)?;
    Ok(EPoint::new(s.x.clone(), at.raise(&s.pi)))
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Names of the phase-space variables: coordinates then momenta.
pub fn phase_names(alg: &AlgebroidModel) -> Vec<String> {
    alg.coords().iter().chain(alg.momentum_names()).cloned().collect()
}

fn check_phase_vars(alg: &AlgebroidModel, e: &Expr) -> Result<()> {
    let names = phase_names(alg);
    match e.free_vars().into_iter().find(|v| !names.contains(v)) {
        Some(v) => Err(Error::Schema(format!("phase function `{e}` uses undeclared variable `{v}`"))),
        None => Ok(()),
    }
}

/// The linear Poisson bracket of two functions on the dual bundle, built
/// symbolically. Variables are the coordinates and the momenta `pi_<frame>`.
pub fn poisson_bracket(alg: &AlgebroidModel, f: &Expr, h: &Expr) -> Result<Expr> {
    check_phase_vars(alg, f)?;
    check_phase_vars(alg, h)?;
    let (n, dim) = (alg.rank(), alg.dim());
    let coords = alg.coords();
    let mom = alg.momentum_names();
    let f_pi: Vec<Expr> = mom.iter().map(|m| f.diff(m)).collect();
    let h_pi: Vec<Expr> = mom.iter().map(|m| h.diff(m)).collect();
    let f_x: Vec<Expr> = coords.iter().map(|c| f.diff(c)).collect();
    let h_x: Vec<Expr> = coords.iter().map(|c| h.diff(c)).collect();
    let mut terms = Vec::new();
    for a in 0..n {
        for i in 0..dim {
            let q = alg.anchor_expr(a, i);
            if q.is_zero() {
                continue;
            }
            let inner = &f_pi[a] * &h_x[i] - &f_x[i] * &h_pi[a];
            if !inner.is_zero() {
                terms.push(q * &inner);
            }
        }
        for b in 0..n {
            if f_pi[a].is_zero() || h_pi[b].is_zero() {
                continue;
            }
            let contraction: Expr = (0..n)
                .filter(|&c| !alg.bracket_expr(b, a, c).is_zero())
                .map(|c| alg.bracket_expr(b, a, c) * &Expr::var(&mom[c]))
                .sum();
            if !contraction.is_zero() {
                terms.push(-(contraction * (&f_pi[a] * &h_pi[b])));
            }
        }
    }
    Ok(terms.into_iter().sum())
}

/// Gradient of a phase-space function at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGradient {
    pub dx: Vec<f64>,
    pub dpi: Vec<f64>,
}

/// Numeric gradient of a symbolic phase function.
pub fn expr_gradient(alg: &AlgebroidModel, f: &Expr, s: &PhasePoint) -> Result<PhaseGradient> {
    let coords = alg.coords();
    let mom = alg.momentum_names();
    let env = (Bindings::new(coords, &s.x), Bindings::new(mom, &s.pi));
    let dx = coords.iter().map(|c| f.diff(c).eval(&env)).collect::<Result<Vec<_>, _>>()?;
    let dpi = mom.iter().map(|m| f.diff(m).eval(&env)).collect::<Result<Vec<_>, _>>()?;
    Ok(PhaseGradient { dx, dpi })
}

/// Evaluate a phase function at a point.
pub fn eval_phase(alg: &AlgebroidModel, f: &Expr, s: &PhasePoint) -> Result<f64> {
    let env = (Bindings::new(alg.coords(), &s.x), Bindings::new(alg.momentum_names(), &s.pi));
    Ok(f.eval(&env)?)
}

/// Gradient of the energy: `∂H/∂π = G^{-1} π` and
/// `∂H/∂x^A = -½ v^a ∂_A G_ab v^b` with `v = G^{-1} π`.
pub fn energy_gradient(at: &MetricAt, pi: &[f64]) -> PhaseGradient {
    let v = at.raise(pi);
    let (n, dim) = (at.rank(), at.dim());
    let dx = (0..dim)
        .map(|i| {
            let mut s = 0.0;
            for a in 0..n {
                for b in 0..n {
                    s += v[a] * at.d_g[[a, b, i]] * v[b];
                }
            }
            -0.5 * s
        })
        .collect();
    PhaseGradient { dx, dpi: v }
}

/// The Poisson bracket from gradients at one point.
pub fn bracket_from_gradients(alg: &AlgebroidAt, pi: &[f64], df: &PhaseGradient, dh: &PhaseGradient) -> f64 {
    let (n, dim) = (pi.len(), df.dx.len());
    let mut s = 0.0;
    for a in 0..n {
        for i in 0..dim {
            s += alg.anchor[[a, i]] * (df.dpi[a] * dh.dx[i] - df.dx[i] * dh.dpi[a]);
        }
    }
    for a in 0..n {
        for b in 0..n {
            let c: f64 = (0..n).map(|c| alg.bracket[[b, a, c]] * pi[c]).sum();
            s -= c * df.dpi[a] * dh.dpi[b];
        }
    }
    s
}

/// `{F, H}` at `s` for a symbolic `F` and the energy `H`.
pub fn bracket_with_energy(met: &MetricModel, f: &Expr, s: &PhasePoint) -> Result<f64> {
    check_shape(met, &s.x, &s.pi)?;
    let at = met.at(&s.x)?;
    let df = expr_gradient(met.algebroid(), f, s)?;
    let dh = energy_gradient(&at, &s.pi);
    Ok(bracket_from_gradients(&at.alg, &s.pi, &df, &dh))
}

/// `{H, H}` at `s`, evaluated from the numeric energy gradient.
pub fn energy_self_bracket(met: &MetricModel, s: &PhasePoint) -> Result<f64> {
    check_shape(met, &s.x, &s.pi)?;
    let at = met.at(&s.x)?;
    let dh = energy_gradient(&at, &s.pi);
    Ok(bracket_from_gradients(&at.alg, &s.pi, &dh, &dh))
}

/// `ẋ^A = G^ab Q_a^A π_b`, `π̇_a = G^bd Q_da^c π_c π_b - ½ Q_a^A ∂_A G^bc π_b π_c`.
pub fn cogeodesic_rhs(met: &MetricModel, s: &PhasePoint) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shape(met, &s.x, &s.pi)?;
    let at = met.at(&s.x)?;
    Ok(cogeodesic_rhs_at(&at, &s.pi))
}

fn cogeodesic_rhs_at(at: &MetricAt, pi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = at.rank();
    let grad = energy_gradient(at, pi);
    let v = &grad.dpi;
    let dx = at.anchor_of(v);
    let q = &at.alg.anchor;
    let br = &at.alg.bracket;
    let dpi = (0..n)
        .map(|a| {
            let mut s: f64 = (0..at.dim()).map(|i| -q[[a, i]] * grad.dx[i]).sum();
            for d in 0..n {
                for c in 0..n {
                    s += v[d] * br[[d, a, c]] * pi[c];
                }
            }
            s
        })
        .collect();
    (dx, dpi)
}

/// `ẋ^A = y^a Q_a^A`, `ẏ^a = -Γ_bc^a y^c y^b`.
pub fn geodesic_rhs(met: &MetricModel, s: &EPoint) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shape(met, &s.x, &s.y)?;
    geodesic_rhs_raw(met, &s.x, &s.y, None)
}

fn geodesic_rhs_raw(met: &MetricModel, x: &[f64], y: &[f64], force: Option<&OneFormPotential>) -> Result<(Vec<f64>, Vec<f64>)> {
    let conn = met.connection_unchecked(x)?;
    let n = y.len();
    let dx = conn.metric.anchor_of(y);
    let mut dy: Vec<f64> = (0..n)
        .map(|a| {
            let mut s = 0.0;
            for b in 0..n {
                for c in 0..n {
                    s -= conn.gamma[[b, c, a]] * y[c] * y[b];
                }
            }
            s
        })
        .collect();
    if let Some(pot) = force {
        let f = pot.field_strength_with(&conn.metric.alg, x)?;
        // -χ^b F_bc G^ca
        for (a, slot) in dy.iter_mut().enumerate() {
            for b in 0..n {
                for c in 0..n {
                    *slot -= y[b] * f[[b, c]] * conn.g_inv[[c, a]];
                }
            }
        }
    }
    Ok((dx, dy))
}

/// A one-form `C = C_a(x) s^a` on the bundle, used as an electromagnetic
/// potential for the charged particle.
#[derive(Debug, Clone)]
pub struct OneFormPotential {
    coords: Vec<String>,
    components: Vec<Expr>,
    // [a][A]
    grad: Vec<Expr>,
}

impl OneFormPotential {
    pub fn new(alg: &AlgebroidModel, components: Vec<Expr>) -> Result<Self> {
        if components.len() != alg.rank() {
            return Err(Error::Shape(format!(
                "one-form has {} components, rank is {}",
                components.len(),
                alg.rank()
            )));
        }
        let coords = alg.coords().to_vec();
        for e in &components {
            if let Some(v) = e.free_vars().into_iter().find(|v| !coords.contains(v)) {
                return Err(Error::Schema(format!("one-form component `{e}` uses undeclared variable `{v}`")));
            }
        }
        let grad = components.iter().flat_map(|c| coords.iter().map(move |x| c.diff(x))).collect();
        Ok(OneFormPotential { coords, components, grad })
    }

    /// The exact one-form `d_E f`, with components `Q_a^A ∂_A f`.
    pub fn exact(alg: &AlgebroidModel, f: &Expr) -> Result<Self> {
        let comps = (0..alg.rank())
            .map(|a| {
                alg.coords()
                    .iter()
                    .enumerate()
                    .map(|(i, c)| alg.anchor_expr(a, i) * &f.diff(c))
                    .sum()
            })
            .collect();
        Self::new(alg, comps)
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn value_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let env = Bindings::new(&self.coords, x);
        Ok(self.components.iter().map(|e| e.eval(&env)).collect::<Result<Vec<_>, _>>()?)
    }

    /// `F_bc = Q_b^A ∂_A C_c - Q_c^A ∂_A C_b - Q_bc^e C_e` at `x`.
    pub fn field_strength(&self, alg: &AlgebroidModel, x: &[f64]) -> Result<Array2> {
        self.field_strength_with(&alg.at(x)?, x)
    }

    fn field_strength_with(&self, at: &AlgebroidAt, x: &[f64]) -> Result<Array2> {
        let env = Bindings::new(&self.coords, x);
        let n = self.components.len();
        let dim = self.coords.len();
        let c = self.value_at(x)?;
        let dc = self.grad.iter().map(|e| e.eval(&env)).collect::<Result<Vec<_>, _>>()?;
        Ok(Array2::from_fn([n, n], |[b, cc]| {
            let mut s = 0.0;
            for i in 0..dim {
                s += at.anchor[[b, i]] * dc[cc * dim + i] - at.anchor[[cc, i]] * dc[b * dim + i];
            }
            for e in 0..n {
                s -= at.bracket[[b, cc, e]] * c[e];
            }
            s
        }))
    }
}

/// Which vector field to integrate.
#[derive(Debug, Clone, Copy)]
pub enum Flow<'a> {
    /// State `(x, π)`.
    Cogeodesic,
    /// State `(x, y)`.
    Geodesic,
    /// State `(x, χ)` with the Lorentz-type force of a potential.
    Charged(&'a OneFormPotential),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Cogeodesic,
    Geodesic,
    Charged,
}

impl Flow<'_> {
    pub fn kind(&self) -> FlowKind {
        match self {
            Flow::Cogeodesic => FlowKind::Cogeodesic,
            Flow::Geodesic => FlowKind::Geodesic,
            Flow::Charged(_) => FlowKind::Charged,
        }
    }
}

/// Sampled solution of a flow with per-step diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub kind: FlowKind,
    pub dim: usize,
    pub h: f64,
    pub times: Vec<f64>,
    /// Each state is `x` followed by the fiber part (`π` or `y`).
    pub states: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    /// `|ẋ - ρ(y)|`, with `ẋ` from finite differences of the sampled curve.
    pub admissibility: Vec<f64>,
    /// The anchor image of the initial fiber vector vanishes.
    pub vertical: bool,
    pub coord_names: Vec<String>,
    pub fiber_names: Vec<String>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.states[i][..self.dim]
    }

    pub fn fiber(&self, i: usize) -> &[f64] {
        &self.states[i][self.dim..]
    }

    pub fn last_x(&self) -> &[f64] {
        self.x(self.len() - 1)
    }

    pub fn last_fiber(&self) -> &[f64] {
        self.fiber(self.len() - 1)
    }

    /// max_t |H(t) - H(0)|.
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.energy[0];
        self.energy.iter().fold(0.0, |m, e| m.max((e - e0).abs()))
    }

    /// |H(T) - H(0)|.
    pub fn terminal_drift(&self) -> f64 {
        (self.energy[self.energy.len() - 1] - self.energy[0]).abs()
    }

    pub fn max_admissibility(&self) -> f64 {
        self.admissibility.iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend(self.coord_names.iter().cloned());
        cols.extend(self.fiber_names.iter().cloned());
        cols.push("H".into());
        cols.push("admissibility".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.times[i]);
            for v in &self.states[i] {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{}", self.energy[i], self.admissibility[i]);
        }
        out
    }

    pub fn write_csv(&self, w: &mut impl io::Write) -> io::Result<()> {
        w.write_all(self.to_csv().as_bytes())
    }
}

fn blew_up(state: &[f64]) -> bool {
    state.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP)
}

/// Classical fourth-order Runge-Kutta with fixed step `h` from `t = 0` to
/// `t_end`. Returns the sampled times and states. The step count is
/// `round(t_end / h)` and must reproduce `t_end` to 1e-9 relative.
pub fn rk4<F>(y0: &[f64], t_end: f64, h: f64, mut rhs: F) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let steps = step_count(t_end, h)?;
    if blew_up(y0) {
        return Err(Error::BlowUp { t_last: 0.0 });
    }
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(0.0);
    states.push(y0.to_vec());
    let axpy = |y: &[f64], k: &[f64], s: f64| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + s * b).collect() };
    for step in 0..steps {
        let y = &states[step];
        let t_last = times[step];
        let stage = |r: Result<Vec<f64>>| -> Result<Vec<f64>> {
            match r {
                Ok(v) if !blew_up(&v) => Ok(v),
                Ok(_) | Err(Error::Degenerate { .. }) | Err(Error::Expr(_)) => Err(Error::BlowUp { t_last }),
                Err(e) => Err(e),
            }
        };
        let k1 = stage(rhs(y))?;
        let k2 = stage(rhs(&axpy(y, &k1, h / 2.0)))?;
        let k3 = stage(rhs(&axpy(y, &k2, h / 2.0)))?;
        let k4 = stage(rhs(&axpy(y, &k3, h)))?;
        let next: Vec<f64> = (0..y.len())
            .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        if blew_up(&next) {
            return Err(Error::BlowUp { t_last });
        }
        times.push((step + 1) as f64 * h);
        states.push(next);
    }
    Ok((times, states))
}

pub fn step_count(t_end: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Invalid(format!("step size must be positive, got {h}")));
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::Invalid(format!("end time must be non-negative, got {t_end}")));
    }
    let steps = (t_end / h).round();
    if (steps * h - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::Invalid(format!("end time {t_end} is not a whole number of steps {h}")));
    }
    Ok(steps as usize)
}

/// Integrate one of the flows from `(x0, fiber0)`.
pub fn integrate(met: &MetricModel, flow: Flow<'_>, x0: &[f64], fiber0: &[f64], t_end: f64, h: f64) -> Result<Trajectory> {
    check_shape(met, x0, fiber0)?;
    let alg = met.algebroid();
    let dim = alg.dim();
    let split = |s: &[f64]| -> (Vec<f64>, Vec<f64>) { (s[..dim].to_vec(), s[dim..].to_vec()) };
    let rhs = |s: &[f64]| -> Result<Vec<f64>> {
        let (x, f) = split(s);
        let (dx, df) = match flow {
            Flow::Cogeodesic => cogeodesic_rhs_at(&met.at(&x)?, &f),
            Flow::Geodesic => geodesic_rhs_raw(met, &x, &f, None)?,
            Flow::Charged(pot) => geodesic_rhs_raw(met, &x, &f, Some(pot))?,
        };
        Ok(dx.into_iter().chain(df).collect())
    };
    let y0: Vec<f64> = x0.iter().chain(fiber0).copied().collect();
    let (times, states) = rk4(&y0, t_end, h, rhs)?;

    // Fiber velocity and energy at each sample.
    let mut velocity = Vec::with_capacity(states.len());
    let mut energy = Vec::with_capacity(states.len());
    let mut anchored = Vec::with_capacity(states.len());
    for s in &states {
        let (x, f) = split(s);
        let at = met.at(&x)?;
        let y = match flow {
            Flow::Cogeodesic => at.raise(&f),
            _ => f,
        };
        energy.push(0.5 * at.inner(&y, &y));
        anchored.push(at.anchor_of(&y));
        velocity.push(y);
    }
    let vertical = anchored[0]
        .iter()
        .all(|v| v.abs() <= 1e-14 * (1.0 + velocity[0].iter().fold(0.0f64, |m, y| m.max(y.abs()))));
    let admissibility = admissibility_residuals(&states, &anchored, dim, h);
    let fiber_names = match flow {
        Flow::Cogeodesic => alg.momentum_names().to_vec(),
        _ => alg.velocity_names().to_vec(),
    };
    Ok(Trajectory {
        kind: flow.kind(),
        dim,
        h,
        times,
        states,
        energy,
        admissibility,
        vertical,
        coord_names: alg.coords().to_vec(),
        fiber_names,
    })
}

// |ẋ - ρ(y)| with ẋ from fourth-order differences of the sampled base
// curve (one-sided five-point stencils near the ends).
fn admissibility_residuals(states: &[Vec<f64>], anchored: &[Vec<f64>], dim: usize, h: f64) -> Vec<f64> {
    let n = states.len();
    if n < 5 {
        return anchored.iter().map(|_| 0.0).collect();
    }
    let x = |i: usize, k: usize| states[i][k];
    (0..n)
        .map(|i| {
            let mut m: f64 = 0.0;
            for k in 0..dim {
                let d = if i >= 2 && i + 2 < n {
                    (x(i - 2, k) - 8.0 * x(i - 1, k) + 8.0 * x(i + 1, k) - x(i + 2, k)) / (12.0 * h)
                } else if i < 2 {
                    let stencil: [f64; 5] = if i == 0 {
                        [-25.0, 48.0, -36.0, 16.0, -3.0]
                    } else {
                        [-3.0, -10.0, 18.0, -6.0, 1.0]
                    };
                    (0..5).map(|s| stencil[s] * x(s, k)).sum::<f64>() / (12.0 * h)
                } else {
                    let base = n - 5;
                    let stencil: [f64; 5] = if i == n - 1 {
                        [3.0, -16.0, 36.0, -48.0, 25.0]
                    } else {
                        [-1.0, 6.0, -18.0, 10.0, 3.0]
                    };
                    (0..5).map(|s| stencil[s] * x(base + s, k)).sum::<f64>() / (12.0 * h)
                };
                m = m.max((d - anchored[i][k]).abs());
            }
            m
        })
        .collect()
}
