//! Lie algebroids in local data.
//!
//! A model is a chart with coordinates `x^A` on the base, a local frame `s_a`
//! of the bundle, the anchor components `Q_a^A(x)` (so that
//! `rho(s_a) = Q_a^A d/dx^A`) and the bracket structure functions
//! `Q_ab^c(x)` (so that `[s_a, s_b] = Q_ab^c s_c`). The axioms are checked by
//! sampling the declared box, never symbolically.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::{Bindings, Expr};
use crate::sampling::{sweep_max, Residual, SampleBox};
use crate::tensor::{Array2, Array3, Array4};

#[derive(Debug, Clone)]
pub struct AlgebroidModel {
    pub name: String,
    coords: Vec<String>,
    frame: Vec<String>,
    velocity_names: Vec<String>,
    momentum_names: Vec<String>,
    // [a][A]
    anchor: Vec<Expr>,
    // [a][b][c]
    bracket: Vec<Expr>,
    // [a][A][B] = d_B Q_a^A
    d_anchor: Vec<Expr>,
    // [a][b][c][B] = d_B Q_ab^c
    d_bracket: Vec<Expr>,
    sample_box: SampleBox,
}

/// Structure functions and their first derivatives at one base point.
#[derive(Debug, Clone)]
pub struct AlgebroidAt {
    pub anchor: Array2,
    pub d_anchor: Array3,
    pub bracket: Array3,
    pub d_bracket: Array4,
}

impl AlgebroidModel {
    /// `anchor` is indexed `[a][A]`, `bracket` is the full `[a][b][c]` array,
    /// stored exactly as given (antisymmetry is checked, not imposed).
    pub fn new(
        name: impl Into<String>,
        coords: Vec<String>,
        frame: Vec<String>,
        anchor: Vec<Vec<Expr>>,
        bracket: Vec<Vec<Vec<Expr>>>,
        sample_box: SampleBox,
    ) -> Result<Self> {
        let (dim, rank) = (coords.len(), frame.len());
        if rank == 0 {
            return Err(Error::Schema("rank must be at least 1".into()));
        }
        if sample_box.dim() != dim {
            return Err(Error::Schema(format!("box has {} axes for {dim} coordinates", sample_box.dim())));
        }
        if anchor.len() != rank || anchor.iter().any(|row| row.len() != dim) {
            return Err(Error::Schema(format!("anchor must be {rank}x{dim}")));
        }
        if bracket.len() != rank || bracket.iter().any(|m| m.len() != rank || m.iter().any(|r| r.len() != rank)) {
            return Err(Error::Schema(format!("bracket must be {rank}x{rank}x{rank}")));
        }
        let velocity_names: Vec<String> = frame.iter().map(|f| format!("y_{f}")).collect();
        let momentum_names: Vec<String> = frame.iter().map(|f| format!("pi_{f}")).collect();
        let mut all: Vec<&String> = coords.iter().chain(&velocity_names).chain(&momentum_names).collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Schema("coordinate and frame names must be distinct".into()));
        }
        let anchor: Vec<Expr> = anchor.into_iter().flatten().collect();
        let bracket: Vec<Expr> = bracket.into_iter().flatten().flatten().collect();
        let declared: std::collections::BTreeSet<&str> = coords.iter().map(String::as_str).collect();
        for e in anchor.iter().chain(&bracket) {
            if let Some(v) = e.free_vars().into_iter().find(|v| !declared.contains(v.as_str())) {
                return Err(Error::Schema(format!("structure function `{e}` uses undeclared variable `{v}`")));
            }
        }
        let d_anchor = anchor.iter().flat_map(|q| coords.iter().map(move |c| q.diff(c))).collect();
        let d_bracket = bracket.iter().flat_map(|q| coords.iter().map(move |c| q.diff(c))).collect();
        Ok(AlgebroidModel {
            name: name.into(),
            coords,
            frame,
            velocity_names,
            momentum_names,
            anchor,
            bracket,
            d_anchor,
            d_bracket,
            sample_box,
        })
    }

    /// Tangent bundle of R^n in the coordinate frame.
    pub fn tangent_bundle(coords: &[&str]) -> Self {
        let n = coords.len();
        let anchor = (0..n)
            .map(|a| (0..n).map(|b| Expr::constant(if a == b { 1.0 } else { 0.0 })).collect())
            .collect();
        let bracket = vec![vec![vec![Expr::zero(); n]; n]; n];
        Self::new(
            format!("tangent_bundle_r{n}"),
            coords.iter().map(|s| s.to_string()).collect(),
            coords.iter().map(|s| format!("d{s}")).collect(),
            anchor,
            bracket,
            SampleBox::unit(n),
        )
        .expect("tangent bundle is well formed")
    }

    /// Lie algebra over a point with constant structure constants `c[a][b][c]`.
    pub fn lie_algebra(frame: &[&str], constants: &[Vec<Vec<f64>>]) -> Result<Self> {
        let rank = frame.len();
        let bracket = constants
            .iter()
            .map(|m| m.iter().map(|r| r.iter().map(|&v| Expr::constant(v)).collect()).collect())
            .collect();
        Self::new(
            "lie_algebra",
            Vec::new(),
            frame.iter().map(|s| s.to_string()).collect(),
            vec![Vec::new(); rank],
            bracket,
            SampleBox::unit(0),
        )
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn rank(&self) -> usize {
        self.frame.len()
    }

    pub fn coords(&self) -> &[String] {
        &self.coords
    }

    pub fn frame(&self) -> &[String] {
        &self.frame
    }

    /// Names `y_<frame>` of the fiber coordinates on E.
    pub fn velocity_names(&self) -> &[String] {
        &self.velocity_names
    }

    /// Names `pi_<frame>` of the fiber coordinates on the dual bundle.
    pub fn momentum_names(&self) -> &[String] {
        &self.momentum_names
    }

    pub fn sample_box(&self) -> &SampleBox {
        &self.sample_box
    }

    pub fn set_sample_box(&mut self, bx: SampleBox) -> Result<()> {
        if bx.dim() != self.dim() {
            return Err(Error::Shape(format!("box has {} axes, model has {}", bx.dim(), self.dim())));
        }
        self.sample_box = bx;
        Ok(())
    }

    pub fn anchor_expr(&self, a: usize, coord: usize) -> &Expr {
        &self.anchor[a * self.dim() + coord]
    }

    pub fn bracket_expr(&self, a: usize, b: usize, c: usize) -> &Expr {
        let n = self.rank();
        &self.bracket[(a * n + b) * n + c]
    }

    /// Replace one bracket entry, without touching its antisymmetric partner.
    pub fn with_bracket_entry(&self, a: usize, b: usize, c: usize, e: Expr) -> Result<Self> {
        let mut out = self.clone();
        let n = self.rank();
        out.bracket[(a * n + b) * n + c] = e;
        out.rebuild()
    }

    pub fn with_anchor_entry(&self, a: usize, coord: usize, e: Expr) -> Result<Self> {
        let mut out = self.clone();
        let d = self.dim();
        out.anchor[a * d + coord] = e;
        out.rebuild()
    }

    fn rebuild(self) -> Result<Self> {
        let (n, d) = (self.rank(), self.dim());
        let anchor = (0..n).map(|a| (0..d).map(|i| self.anchor_expr(a, i).clone()).collect()).collect();
        let bracket = (0..n)
            .map(|a| {
                (0..n)
                    .map(|b| (0..n).map(|c| self.bracket_expr(a, b, c).clone()).collect())
                    .collect()
            })
            .collect();
        Self::new(self.name, self.coords, self.frame, anchor, bracket, self.sample_box)
    }

    pub fn point_check(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim() {
            return Err(Error::Shape(format!(
                "base point has {} coordinates, model `{}` has {}",
                p.len(),
                self.name,
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn at(&self, p: &[f64]) -> Result<AlgebroidAt> {
        self.point_check(p)?;
        let env = Bindings::new(&self.coords, p);
        let (n, d) = (self.rank(), self.dim());
        let eval_all = |v: &[Expr]| -> Result<Vec<f64>> { v.iter().map(|e| e.eval(&env).map_err(Error::from)).collect() };
        let mut anchor = Array2::zeros([n, d]);
        anchor.as_mut_slice().copy_from_slice(&eval_all(&self.anchor)?);
        let mut d_anchor = Array3::zeros([n, d, d]);
        d_anchor.as_mut_slice().copy_from_slice(&eval_all(&self.d_anchor)?);
        let mut bracket = Array3::zeros([n, n, n]);
        bracket.as_mut_slice().copy_from_slice(&eval_all(&self.bracket)?);
        let mut d_bracket = Array4::zeros([n, n, n, d]);
        d_bracket.as_mut_slice().copy_from_slice(&eval_all(&self.d_bracket)?);
        Ok(AlgebroidAt {
            anchor,
            d_anchor,
            bracket,
            d_bracket,
        })
    }

    /// max |Q_ab^c + Q_ba^c| over sampled points and index triples.
    pub fn validate_antisymmetry(&self, samples: usize, seed: u64) -> Result<Residual> {
        let n = self.rank();
        sweep_max(&self.sample_box, samples, seed, |p| {
            let at = self.at(p)?;
            let mut best = Residual::zero();
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        let r = (at.bracket[[a, b, c]] + at.bracket[[b, a, c]]).abs();
                        best = best.max(Residual::at(r, p, &[a, b, c]));
                    }
                }
            }
            Ok(best)
        })
    }

    /// Residual of `rho([s_a, s_b]) = [rho(s_a), rho(s_b)]`, component `B`:
    /// `Q_a^A d_A Q_b^B - Q_b^A d_A Q_a^B - Q_ab^c Q_c^B`.
    ///
    /// With `include_bracket = false` the last term is dropped, which is the
    /// pairwise form that only holds when the bracket of the frame vanishes.
    pub fn validate_anchor(&self, samples: usize, seed: u64, include_bracket: bool) -> Result<Residual> {
        let (n, d) = (self.rank(), self.dim());
        sweep_max(&self.sample_box, samples, seed, |p| {
            let at = self.at(p)?;
            let mut best = Residual::zero();
            for a in 0..n {
                for b in 0..n {
                    for bb in 0..d {
                        let mut r = 0.0;
                        for aa in 0..d {
                            r += at.anchor[[a, aa]] * at.d_anchor[[b, bb, aa]] - at.anchor[[b, aa]] * at.d_anchor[[a, bb, aa]];
                        }
                        if include_bracket {
                            for c in 0..n {
                                r -= at.bracket[[a, b, c]] * at.anchor[[c, bb]];
                            }
                        }
                        best = best.max(Residual::at(r.abs(), p, &[a, b, bb]));
                    }
                }
            }
            Ok(best)
        })
    }

    pub fn validate_anchor_morphism(&self, samples: usize, seed: u64) -> Result<Residual> {
        self.validate_anchor(samples, seed, true)
    }

    /// Cyclic sum over (a, b, c) of `Q_a^A d_A Q_bc^d + Q_ae^d Q_bc^e`, the
    /// coordinate form of `[s_a, [s_b, s_c]] + cyclic = 0`.
    pub fn validate_jacobi(&self, samples: usize, seed: u64) -> Result<Residual> {
        let (n, dim) = (self.rank(), self.dim());
        sweep_max(&self.sample_box, samples, seed, |p| {
            let at = self.at(p)?;
            let term = |a: usize, b: usize, c: usize, d: usize| {
                let mut t = 0.0;
                for aa in 0..dim {
                    t += at.anchor[[a, aa]] * at.d_bracket[[b, c, d, aa]];
                }
                for e in 0..n {
                    t += at.bracket[[a, e, d]] * at.bracket[[b, c, e]];
                }
                t
            };
            let mut best = Residual::zero();
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        for d in 0..n {
                            let r = term(a, b, c, d) + term(b, c, a, d) + term(c, a, b, d);
                            best = best.max(Residual::at(r.abs(), p, &[a, b, c, d]));
                        }
                    }
                }
            }
            Ok(best)
        })
    }

    /// All axiom residuals at once.
    pub fn validate(&self, samples: usize, seed: u64) -> Result<AxiomReport> {
        Ok(AxiomReport {
            antisymmetry: self.validate_antisymmetry(samples, seed)?,
            anchor_morphism: self.validate_anchor(samples, seed, true)?,
            anchor_pairwise: self.validate_anchor(samples, seed, false)?,
            jacobi: self.validate_jacobi(samples, seed)?,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AxiomReport {
    pub antisymmetry: Residual,
    pub anchor_morphism: Residual,
    /// Pairwise anchor identity without the bracket term. Informational: it
    /// differs from the morphism residual whenever `Q_ab^c Q_c^B != 0`.
    pub anchor_pairwise: Residual,
    pub jacobi: Residual,
}

impl AxiomReport {
    /// Worst residual among the three defining identities.
    pub fn worst(&self) -> (&'static str, &Residual) {
        let mut worst = ("antisymmetry", &self.antisymmetry);
        for cand in [("anchor_morphism", &self.anchor_morphism), ("jacobi", &self.jacobi)] {
            if cand.1.value.is_nan() || cand.1.value > worst.1.value {
                worst = cand;
            }
        }
        worst
    }
}

/// A section `u = u^a(x) s_a` with its first and second derivatives.
#[derive(Debug, Clone)]
pub struct Section {
    pub name: String,
    coords: Vec<String>,
    components: Vec<Expr>,
    // [a][A]
    grad: Vec<Expr>,
    // [a][A][B]
    hess: Vec<Expr>,
}

/// Numeric jet of a section at one point.
#[derive(Debug, Clone)]
pub struct SectionAt {
    pub value: Vec<f64>,
    pub grad: Array2,
    pub hess: Array3,
}

impl Section {
    pub fn new(model: &AlgebroidModel, name: impl Into<String>, components: Vec<Expr>) -> Result<Self> {
        if components.len() != model.rank() {
            return Err(Error::Shape(format!(
                "section has {} components, rank is {}",
                components.len(),
                model.rank()
            )));
        }
        let coords = model.coords().to_vec();
        for e in &components {
            if let Some(v) = e.free_vars().into_iter().find(|v| !coords.contains(v)) {
                return Err(Error::Schema(format!("section component `{e}` uses undeclared variable `{v}`")));
            }
        }
        let grad: Vec<Expr> = components.iter().flat_map(|u| coords.iter().map(move |c| u.diff(c))).collect();
        let hess = grad.iter().flat_map(|g| coords.iter().map(move |c| g.diff(c))).collect();
        Ok(Section {
            name: name.into(),
            coords,
            components,
            grad,
            hess,
        })
    }

    pub fn parse(model: &AlgebroidModel, name: &str, components: &[&str]) -> Result<Self> {
        let comps = components
            .iter()
            .map(|s| crate::expr::parse(s).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        Self::new(model, name, comps)
    }

    pub fn constant(model: &AlgebroidModel, name: &str, values: &[f64]) -> Result<Self> {
        Self::new(model, name, values.iter().map(|&v| Expr::constant(v)).collect())
    }

    /// The frame section `s_a`.
    pub fn frame(model: &AlgebroidModel, a: usize) -> Self {
        let vals: Vec<f64> = (0..model.rank()).map(|b| if a == b { 1.0 } else { 0.0 }).collect();
        let name = model.frame()[a].clone();
        Self::constant(model, &name, &vals).expect("frame section has the right rank")
    }

    /// Smooth random section with quadratic and trigonometric terms, used as
    /// a probe by the identity checks. Deterministic in `seed`.
    pub fn random_polynomial(model: &AlgebroidModel, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = crate::sampling::rng_for(seed, 0x5ec7);
        let mut coef = || rng.gen_range(-1.0..1.0f64);
        let vars = model.coords();
        let comps = (0..model.rank())
            .map(|_| {
                let mut e = Expr::constant(coef());
                for v in vars {
                    let x = Expr::var(v);
                    e = e + Expr::constant(coef()) * x.clone() + Expr::constant(coef()) * x.pow(2.0);
                }
                if vars.len() >= 2 {
                    let arg = Expr::var(&vars[0]) * Expr::var(&vars[1]);
                    e = e + Expr::constant(coef()) * arg.sin();
                }
                e
            })
            .collect();
        Self::new(model, "random", comps).expect("components use model coordinates")
    }

    pub fn zero(model: &AlgebroidModel) -> Self {
        Self::constant(model, "zero", &vec![0.0; model.rank()]).expect("rank")
    }

    pub fn rank(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    pub fn component(&self, a: usize) -> &Expr {
        &self.components[a]
    }

    fn rebuilt(&self, name: String, components: Vec<Expr>) -> Section {
        let coords = self.coords.clone();
        let grad: Vec<Expr> = components.iter().flat_map(|u| coords.iter().map(move |c| u.diff(c))).collect();
        let hess = grad.iter().flat_map(|g| coords.iter().map(move |c| g.diff(c))).collect();
        Section {
            name,
            coords,
            components,
            grad,
            hess,
        }
    }

    /// `f * u` for a function `f` on the base.
    pub fn scaled_by(&self, f: &Expr) -> Section {
        let comps = self.components.iter().map(|u| f * u).collect();
        self.rebuilt(format!("({f})*{}", self.name), comps)
    }

    /// Real linear combination `sum_i c_i u_i` of sections with equal rank.
    pub fn combination(name: &str, terms: &[(f64, &Section)]) -> Result<Section> {
        let first = terms.first().ok_or_else(|| Error::Invalid("empty linear combination".into()))?.1;
        let rank = first.rank();
        if terms.iter().any(|(_, s)| s.rank() != rank) {
            return Err(Error::Shape("sections of different rank".into()));
        }
        let comps = (0..rank)
            .map(|a| terms.iter().map(|(c, s)| Expr::constant(*c) * s.components[a].clone()).sum())
            .collect();
        Ok(first.rebuilt(name.to_string(), comps))
    }

    pub fn value_at(&self, p: &[f64]) -> Result<Vec<f64>> {
        let env = Bindings::new(&self.coords, p);
        self.components.iter().map(|e| e.eval(&env).map_err(Error::from)).collect()
    }

    pub fn at(&self, p: &[f64]) -> Result<SectionAt> {
        let env = Bindings::new(&self.coords, p);
        let (n, d) = (self.rank(), self.coords.len());
        let value = self.value_at(p)?;
        let mut grad = Array2::zeros([n, d]);
        for (slot, e) in grad.as_mut_slice().iter_mut().zip(&self.grad) {
            *slot = e.eval(&env)?;
        }
        let mut hess = Array3::zeros([n, d, d]);
        for (slot, e) in hess.as_mut_slice().iter_mut().zip(&self.hess) {
            *slot = e.eval(&env)?;
        }
        Ok(SectionAt { value, grad, hess })
    }
}

fn same_owner(model: &AlgebroidModel, u: &Section) -> Result<()> {
    if u.rank() != model.rank() || u.coords != model.coords() {
        return Err(Error::Shape(format!(
            "section `{}` does not belong to model `{}`",
            u.name, model.name
        )));
    }
    Ok(())
}

/// `[u, v]^c = Q_a^A (u^a d_A v^c - v^a d_A u^c) + Q_ab^c u^a v^b`.
pub fn bracket_sections(model: &AlgebroidModel, u: &Section, v: &Section) -> Result<Section> {
    same_owner(model, u)?;
    same_owner(model, v)?;
    let (n, d) = (model.rank(), model.dim());
    let comps = (0..n)
        .map(|c| {
            let mut terms = Vec::new();
            for a in 0..n {
                for aa in 0..d {
                    let q = model.anchor_expr(a, aa);
                    if q.is_zero() {
                        continue;
                    }
                    let dv = v.grad[c * d + aa].clone();
                    let du = u.grad[c * d + aa].clone();
                    terms.push(q * &(u.components[a].clone() * dv - v.components[a].clone() * du));
                }
                for b in 0..n {
                    let q = model.bracket_expr(a, b, c);
                    if q.is_zero() {
                        continue;
                    }
                    terms.push(q * &(u.components[a].clone() * v.components[b].clone()));
                }
            }
            terms.into_iter().sum()
        })
        .collect();
    Ok(u.rebuilt(format!("[{},{}]", u.name, v.name), comps))
}

/// `rho(u)` at `p`: the vector `u^a(p) Q_a^A(p)`.
pub fn anchor_apply(model: &AlgebroidModel, u: &Section, p: &[f64]) -> Result<Vec<f64>> {
    same_owner(model, u)?;
    let at = model.at(p)?;
    let uv = u.value_at(p)?;
    Ok((0..model.dim())
        .map(|aa| (0..model.rank()).map(|a| uv[a] * at.anchor[[a, aa]]).sum())
        .collect())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::sampling::rng_for;

    pub(crate) fn levi_civita(a: usize, b: usize, c: usize) -> f64 {
        match (a, b, c) {
            (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
            (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
            _ => 0.0,
        }
    }

    // Levi-Civita constants with the single entry c_12^3 scaled.
    fn so3_constants(scale_12_3: f64) -> Vec<Vec<Vec<f64>>> {
        (0..3)
            .map(|a| {
                (0..3)
                    .map(|b| {
                        (0..3)
                            .map(|c| {
                                let e = levi_civita(a, b, c);
                                if c == 2 && (a, b) == (0, 1) {
                                    e * scale_12_3
                                } else {
                                    e
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn so3() -> AlgebroidModel {
        AlgebroidModel::lie_algebra(&["e1", "e2", "e3"], &so3_constants(1.0)).unwrap()
    }

    fn e(s: &str) -> Expr {
        parse(s).unwrap()
    }

    /// Line bundle over R with bracket [f, g] = f X[g] - X[f] g.
    fn line_bundle(x_component: &str) -> AlgebroidModel {
        AlgebroidModel::new(
            "line",
            vec!["x".into()],
            vec!["s".into()],
            vec![vec![e(x_component)]],
            vec![vec![vec![Expr::zero()]]],
            SampleBox::unit(1),
        )
        .unwrap()
    }

    /// TR^3 in the frame s_a = M_a^A d_A with
    /// M = [[1, 0, x2], [x3, 1, 0], [0, x1^2, 1]]; the bracket functions are
    /// the frame components of the vector-field commutators (worked out with a
    /// computer algebra system). The box keeps det M away from zero.
    pub(crate) fn nonholonomic_r3() -> AlgebroidModel {
        let coords: Vec<String> = ["x1", "x2", "x3"].iter().map(|s| s.to_string()).collect();
        let anchor = vec![
            vec![e("1"), e("0"), e("x2")],
            vec![e("x3"), e("1"), e("0")],
            vec![e("0"), e("x1^2"), e("1")],
        ];
        let den = "(x1^2*x2*x3 + 1)";
        let q12 = [
            format!("(-x1^2*x3 + x2)/{den}"),
            format!("x1^2*(x2^2 + 1)/{den}"),
            format!("(-x2^2 - 1)/{den}"),
        ];
        let q13 = [
            format!("x1*x3*(-x1^3 - 2)/{den}"),
            format!("x1*(x1^3 + 2)/{den}"),
            format!("x1*(-x1 + 2*x2*x3)/{den}"),
        ];
        let q23 = [
            format!("(-2*x1*x3^2 - 1)/{den}"),
            format!("x1*(-x1*x2 + 2*x3)/{den}"),
            format!("x2*(2*x1*x3^2 + 1)/{den}"),
        ];
        let mut br = vec![vec![vec![Expr::zero(); 3]; 3]; 3];
        for (a, b, q) in [(0, 1, &q12), (0, 2, &q13), (1, 2, &q23)] {
            for c in 0..3 {
                br[a][b][c] = e(&q[c]);
                br[b][a][c] = -e(&q[c]);
            }
        }
        AlgebroidModel::new(
            "nonholonomic",
            coords,
            vec!["s1".into(), "s2".into(), "s3".into()],
            anchor,
            br,
            SampleBox::new(vec![(-0.5, 0.5); 3]),
        )
        .unwrap()
    }

    #[test]
    fn tangent_bundle_passes() {
        let m = AlgebroidModel::tangent_bundle(&["x", "y"]);
        let r = m.validate(64, 42).unwrap();
        assert_eq!(r.antisymmetry.value, 0.0);
        assert_eq!(r.anchor_morphism.value, 0.0);
        assert_eq!(r.jacobi.value, 0.0);
    }

    #[test]
    fn so3_by_enumeration() {
        let m = so3();
        assert_eq!(m.validate_antisymmetry(8, 1).unwrap().value, 0.0);
        assert_eq!(m.validate_anchor_morphism(8, 1).unwrap().value, 0.0);
        assert!(m.validate_jacobi(8, 1).unwrap().value < 1e-15);
    }

    #[test]
    fn corrupted_antisymmetry_is_reported() {
        let m = AlgebroidModel::tangent_bundle(&["x", "y"])
            .with_bracket_entry(0, 1, 0, Expr::one())
            .unwrap();
        let r = m.validate_antisymmetry(16, 3).unwrap();
        assert_eq!(r.value, 1.0);
        assert!(r.indices == vec![0, 1, 0] || r.indices == vec![1, 0, 0]);
    }

    #[test]
    fn scaled_structure_constant_breaks_jacobi() {
        let m = AlgebroidModel::lie_algebra(&["e1", "e2", "e3"], &so3_constants(2.0)).unwrap();
        // Brute-force cyclic sum of c_ae^d c_bc^e over all index choices.
        let c = so3_constants(2.0);
        let mut oracle: f64 = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                for cc in 0..3 {
                    for d in 0..3 {
                        let mut s = 0.0;
                        for (x, y, z) in [(a, b, cc), (b, cc, a), (cc, a, b)] {
                            for ee in 0..3 {
                                s += c[x][ee][d] * c[y][z][ee];
                            }
                        }
                        oracle = oracle.max(s.abs());
                    }
                }
            }
        }
        let r = m.validate_jacobi(4, 1).unwrap().value;
        assert_eq!(r, oracle);
        assert!(r > 0.5, "residual {r}");
    }

    #[test]
    fn rescaled_antisymmetric_pair_is_still_a_lie_algebra() {
        let mut c = so3_constants(1.0);
        c[0][1][2] = 2.0;
        c[1][0][2] = -2.0;
        let m = AlgebroidModel::lie_algebra(&["e1", "e2", "e3"], &c).unwrap();
        assert!(m.validate_jacobi(4, 1).unwrap().value < 1e-15);
    }

    #[test]
    fn line_bundle_anchor_morphism() {
        let m = line_bundle("1");
        assert_eq!(m.validate_anchor_morphism(32, 1).unwrap().value, 0.0);
        assert_eq!(m.validate_jacobi(32, 1).unwrap().value, 0.0);
    }

    #[test]
    fn nonholonomic_frame_satisfies_all_axioms() {
        let m = nonholonomic_r3();
        let r = m.validate(64, 5).unwrap();
        assert!(r.antisymmetry.value < 1e-14);
        assert!(r.anchor_morphism.value < 1e-12, "{:?}", r.anchor_morphism);
        assert!(r.jacobi.value < 1e-12, "{:?}", r.jacobi);
        // The pairwise identity without the bracket term does not hold here.
        assert!(r.anchor_pairwise.value > 0.1);
    }

    #[test]
    fn corrupted_anchor_is_detected() {
        let m = AlgebroidModel::tangent_bundle(&["x", "y"]).with_anchor_entry(0, 1, e("y")).unwrap();
        assert!(m.validate_anchor_morphism(32, 1).unwrap().value > 1e-2);
    }

    #[test]
    fn bracket_of_sections_examples() {
        let m = AlgebroidModel::tangent_bundle(&["x", "y"]);
        let w = bracket_sections(&m, &Section::frame(&m, 0), &Section::frame(&m, 1)).unwrap();
        assert!(w.components().iter().all(Expr::is_zero));

        let g = so3();
        let w = bracket_sections(&g, &Section::frame(&g, 0), &Section::frame(&g, 1)).unwrap();
        let v = w.value_at(&[]).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 1.0]);
    }

    fn random_poly_section(m: &AlgebroidModel, seed: u64) -> Section {
        Section::random_polynomial(m, seed)
    }

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    #[test]
    fn bracket_properties_on_nonholonomic_frame() {
        let m = nonholonomic_r3();
        let (u, v, w) = (random_poly_section(&m, 1), random_poly_section(&m, 2), random_poly_section(&m, 3));
        let f = e("1 + x1*x2 + sin(x3)");
        let uu = bracket_sections(&m, &u, &u).unwrap();
        let uv = bracket_sections(&m, &u, &v).unwrap();
        let vu = bracket_sections(&m, &v, &u).unwrap();
        let u_fv = bracket_sections(&m, &u, &v.scaled_by(&f)).unwrap();
        let jac = [
            bracket_sections(&m, &u, &bracket_sections(&m, &v, &w).unwrap()).unwrap(),
            bracket_sections(&m, &v, &bracket_sections(&m, &w, &u).unwrap()).unwrap(),
            bracket_sections(&m, &w, &bracket_sections(&m, &u, &v).unwrap()).unwrap(),
        ];
        let names = m.coords().to_vec();
        for i in 0..10 {
            let p = m.sample_box().draw(&mut rng_for(11, i));
            assert!(max_abs(&uu.value_at(&p).unwrap()) < 1e-12);
            let (a, b) = (uv.value_at(&p).unwrap(), vu.value_at(&p).unwrap());
            assert!(a.iter().zip(&b).all(|(x, y)| (x + y).abs() < 1e-9));
            // Leibniz: [u, f v] = rho(u)[f] v + f [u, v]
            let rho_u = anchor_apply(&m, &u, &p).unwrap();
            let env = Bindings::new(&names, &p);
            let df: f64 = (0..3).map(|k| rho_u[k] * f.diff(&names[k]).eval(&env).unwrap()).sum();
            let fv = f.eval(&env).unwrap();
            let vv = v.value_at(&p).unwrap();
            let lhs = u_fv.value_at(&p).unwrap();
            for c in 0..3 {
                assert!((lhs[c] - (df * vv[c] + fv * a[c])).abs() < 1e-9);
            }
            let sum: Vec<f64> = (0..3).map(|c| jac.iter().map(|j| j.value_at(&p).unwrap()[c]).sum()).collect();
            assert!(max_abs(&sum) < 1e-8, "Jacobi {sum:?}");
            // rho([u,v]) = [rho(u), rho(v)] as vector fields.
            let lhs = anchor_apply(&m, &uv, &p).unwrap();
            let fd = |s: &Section| -> Vec<Vec<f64>> {
                // exact Jacobian of rho(s) via symbolic derivatives
                (0..3)
                    .map(|aa| {
                        let comp: Expr = (0..3).map(|a| s.component(a) * m.anchor_expr(a, aa)).sum();
                        (0..3).map(|bb| comp.diff(&names[bb]).eval(&env).unwrap()).collect()
                    })
                    .collect()
            };
            let (ju, jv) = (fd(&u), fd(&v));
            let rv = anchor_apply(&m, &v, &p).unwrap();
            for aa in 0..3 {
                let comm: f64 = (0..3).map(|bb| rho_u[bb] * jv[aa][bb] - rv[bb] * ju[aa][bb]).sum();
                assert!((lhs[aa] - comm).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn anchor_apply_examples() {
        let m = AlgebroidModel::tangent_bundle(&["x", "y"]);
        assert_eq!(anchor_apply(&m, &Section::frame(&m, 0), &[0.3, -0.2]).unwrap(), vec![1.0, 0.0]);
        let g = so3();
        assert!(anchor_apply(&g, &Section::frame(&g, 0), &[]).unwrap().is_empty());
        let l = line_bundle("x");
        let one = Section::constant(&l, "one", &[1.0]).unwrap();
        assert_eq!(anchor_apply(&l, &one, &[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let m = AlgebroidModel::tangent_bundle(&["x", "y"]);
        assert!(Section::constant(&m, "u", &[1.0]).is_err());
        assert!(m.at(&[1.0]).is_err());
        assert!(AlgebroidModel::new(
            "bad",
            vec!["x".into()],
            vec!["s".into()],
            vec![vec![e("z")]],
            vec![vec![vec![Expr::zero()]]],
            SampleBox::unit(1)
        )
        .is_err());
    }
}
