//! Command-line front end: `algebroid-lab <validate|geodesic|killing|sigma>`.
//!
//! Exit codes: 0 success, 1 validation failure or blow-up, 2 schema, usage
//! or underdetermined input, 3 relaxation did not converge.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::dynamics::{dualize, integrate, undualize, EPoint, Flow, PhasePoint, Trajectory};
use crate::error::{Error, Result};
use crate::killing::{killing_check, killing_find};
use crate::model::{bundled, load_model, Model, BUNDLED};
use crate::report::{array3_nested, Report, Status};
use crate::riemann::CERTIFICATION_TOL;
use crate::sampling::{DEFAULT_SAMPLES, DEFAULT_SEED};
use crate::sigma::{
    action, charged_current, charged_particle, field_strength_antisymmetry, invariance_check, max_tension, morphism_residual,
    noether_current, potential_lie_derivative, relax, AxisBoundary, SigmaConfiguration, SourceManifold,
};

/// Environment variable overriding the default seed.
pub const SEED_ENV: &str = "ALGEBROID_LAB_SEED";

/// Threshold for the algebroid axioms and metric symmetry in `validate`.
pub const AXIOM_TOL: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(name = "algebroid-lab", version, about = "Riemannian Lie algebroid analyses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the algebroid axioms, metric symmetry and the Levi-Civita certification.
    Validate {
        model: String,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Integrate the geodesic flow (or the cogeodesic flow with --dual).
    Geodesic(GeodesicArgs),
    /// Killing section check and discovery.
    Killing {
        model: String,
        #[command(subcommand)]
        action: KillingAction,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Lattice sigma model: relaxation, residuals, Noether currents, charged particle.
    Sigma(SigmaArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Sampling {
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Defaults to $ALGEBROID_LAB_SEED, then 42.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GeodesicArgs {
    pub model: String,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Vec<f64>,
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        conflicts_with = "pi0",
        required_unless_present = "pi0"
    )]
    pub y0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub pi0: Option<Vec<f64>>,
    /// Integrate `(x, π)` instead of `(x, y)`; the initial state is converted as needed.
    #[arg(long)]
    pub dual: bool,
    #[arg(long)]
    pub t_end: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum KillingAction {
    /// Three residual forms and the verdict for a named section.
    Check {
        #[arg(long)]
        section: String,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Killing sections in the span of monomials up to a degree.
    Find {
        #[arg(long)]
        degree: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SigmaAction {
    Solve,
    Residual,
    Noether,
    Charged,
}

#[derive(Debug, Args)]
pub struct SigmaArgs {
    pub model: String,
    #[arg(value_enum)]
    pub action: SigmaAction,
    /// Nodes per source axis, replacing the model's grid.
    #[arg(long, value_delimiter = ',')]
    pub nodes: Option<Vec<usize>>,
    /// Start point of a straight initial curve (k = 1).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "to")]
    pub from: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, requires = "from")]
    pub to: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    /// Configuration CSV to analyse instead of the model's initial guess.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Section names for noether and charged.
    #[arg(long, value_delimiter = ',')]
    pub section: Vec<String>,
    /// Coefficients of the sections, one each; all 1 when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub xi: Vec<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub y0: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Seed from the flag, then the environment, then the default.
pub fn resolve_seed(flag: Option<u64>) -> std::result::Result<u64, String> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| format!("{SEED_ENV}={v} is not an unsigned integer")),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// A model file path, or the stem of a bundled model.
pub fn resolve_model(arg: &str) -> Result<Model> {
    let path = Path::new(arg);
    if path.exists() {
        return load_model(path);
    }
    let stem = arg.strip_suffix(".json").unwrap_or(arg);
    let stem = Path::new(stem).file_name().and_then(|s| s.to_str()).unwrap_or(stem);
    if BUNDLED.iter().any(|(n, _)| *n == stem) {
        return bundled(stem);
    }
    let names: Vec<&str> = BUNDLED.iter().map(|(n, _)| *n).collect();
    Err(Error::Schema(format!(
        "{arg}: no such file and not a bundled model ({})",
        names.join(", ")
    )))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Schema(_) | Error::Shape(_) | Error::Underdetermined { .. } | Error::Invalid(_) => 2,
        Error::Expr(_) | Error::Degenerate { .. } | Error::Certification { .. } | Error::Sampling { .. } | Error::BlowUp { .. } => 1,
    }
}

/// Where a command's outputs go.
struct Sinks<'a> {
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
}

impl Sinks<'_> {
    fn emit(&mut self, path: Option<&Path>, to_stdout: bool, text: &str) -> Result<()> {
        let res = match path {
            Some(p) => fs::write(p, text),
            None if to_stdout => self.stdout.write_all(text.as_bytes()),
            None => self.stderr.write_all(text.as_bytes()),
        };
        res.map_err(|e| Error::Invalid(format!("cannot write output: {e}")))
    }

    fn note(&mut self, msg: &str) {
        let _ = writeln!(self.stderr, "algebroid-lab: {msg}");
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let mut sinks = Sinks { stdout, stderr };
    match cli.command {
        Command::Validate { model, sampling, report } => cmd_validate(&mut sinks, &model, &sampling, report.as_deref()),
        Command::Geodesic(a) => cmd_geodesic(&mut sinks, &a),
        Command::Killing { model, action, report } => cmd_killing(&mut sinks, &model, &action, report.as_deref()),
        Command::Sigma(a) => cmd_sigma(&mut sinks, &a),
    }
}

/// Runs `body`, then writes the report. Errors become a report with an
/// `error` field and the matching exit code.
fn finish(
    sinks: &mut Sinks<'_>,
    report_path: Option<&Path>,
    report_to_stdout: bool,
    mut report: Report,
    body: impl FnOnce(&mut Report, &mut Sinks<'_>) -> Result<Status>,
) -> i32 {
    let code = match body(&mut report, sinks) {
        Ok(status) => {
            report.status = status;
            status.exit_code()
        }
        Err(e) => {
            let code = exit_code(&e);
            report.status = if code == 1 { Status::Failed } else { Status::Error };
            if let Error::BlowUp { t_last } = e {
                report.insert_lossy("t_last", t_last);
            }
            report.insert_lossy("error", e.to_string());
            sinks.note(&e.to_string());
            code
        }
    };
    if let Err(e) = sinks.emit(report_path, report_to_stdout, &report.to_json()) {
        sinks.note(&e.to_string());
        return 2;
    }
    code
}

fn seed_or_usage(sinks: &mut Sinks<'_>, flag: Option<u64>) -> std::result::Result<u64, i32> {
    resolve_seed(flag).map_err(|m| {
        sinks.note(&m);
        2
    })
}

fn load(sinks: &mut Sinks<'_>, arg: &str) -> std::result::Result<Model, i32> {
    resolve_model(arg).map_err(|e| {
        sinks.note(&e.to_string());
        exit_code(&e)
    })
}

fn cmd_validate(sinks: &mut Sinks<'_>, model: &str, sampling: &Sampling, report_path: Option<&Path>) -> i32 {
    let seed = match seed_or_usage(sinks, sampling.seed) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let m = match load(sinks, model) {
        Ok(m) => m,
        Err(c) => return c,
    };
    let report = Report::new(m.name(), seed, "validate");
    finish(sinks, report_path, true, report, |r, sinks| {
        let n = sampling.samples;
        let axioms = m.algebroid().validate(n, seed)?;
        let symmetry = m.metric.validate_symmetry(n, seed)?;
        r.insert("samples", n)?;
        r.insert("axioms", &axioms)?;
        r.insert("metric_symmetry", &symmetry)?;
        let mut checks = vec![
            ("antisymmetry", axioms.antisymmetry.clone(), AXIOM_TOL),
            ("anchor_morphism", axioms.anchor_morphism.clone(), AXIOM_TOL),
            ("jacobi", axioms.jacobi.clone(), AXIOM_TOL),
            ("metric_symmetry", symmetry, AXIOM_TOL),
        ];
        match m.metric.certify(n, seed) {
            Ok(cert) => {
                r.insert("certification", &cert)?;
                checks.push(("torsion", cert.torsion.clone(), CERTIFICATION_TOL));
                checks.push(("compatibility", cert.compatibility.clone(), CERTIFICATION_TOL));
                checks.push(("koszul", cert.koszul.clone(), CERTIFICATION_TOL));
            }
            Err(e @ (Error::Degenerate { .. } | Error::Certification { .. })) => {
                r.insert("certification", json!({ "error": e.to_string() }))?;
                sinks.note(&e.to_string());
                r.insert("tolerances", json!({ "axioms": AXIOM_TOL, "certification": CERTIFICATION_TOL }))?;
                return Ok(Status::Failed);
            }
            Err(e) => return Err(e),
        }
        r.insert("tolerances", json!({ "axioms": AXIOM_TOL, "certification": CERTIFICATION_TOL }))?;
        let failed: Vec<_> = checks.iter().filter(|(_, res, tol)| !(res.value < *tol)).collect();
        let worst = checks
            .iter()
            .max_by(|a, b| (a.1.value / a.2).total_cmp(&(b.1.value / b.2)))
            .expect("checks are non-empty");
        r.insert(
            "worst",
            json!({ "check": worst.0, "value": worst.1.value, "point": worst.1.point, "indices": worst.1.indices }),
        )?;
        r.insert("passed", failed.is_empty())?;
        if failed.is_empty() {
            Ok(Status::Ok)
        } else {
            for (name, res, tol) in failed {
                sinks.note(&format!(
                    "{name} residual {:e} exceeds {tol:e} at point {:?}, indices {:?}",
                    res.value, res.point, res.indices
                ));
            }
            Ok(Status::Failed)
        }
    })
}

fn trajectory_summary(r: &mut Report, t: &Trajectory) -> Result<()> {
    r.insert("flow", format!("{:?}", t.kind).to_lowercase())?;
    r.insert("steps", t.len() - 1)?;
    r.insert("h", t.h)?;
    r.insert("t_end", t.times[t.len() - 1])?;
    r.insert("energy_initial", t.energy[0])?;
    r.insert("energy_drift", t.energy_drift())?;
    r.insert("terminal_drift", t.terminal_drift())?;
    r.insert("admissibility_max", t.max_admissibility())?;
    r.insert("vertical", t.vertical)?;
    r.insert("final_x", t.last_x())?;
    r.insert("final_fiber", t.last_fiber())
}

fn cmd_geodesic(sinks: &mut Sinks<'_>, a: &GeodesicArgs) -> i32 {
    let seed = match seed_or_usage(sinks, a.seed) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let m = match load(sinks, &a.model) {
        Ok(m) => m,
        Err(c) => return c,
    };
    let report = Report::new(m.name(), seed, if a.dual { "geodesic --dual" } else { "geodesic" });
    let out = a.out.clone();
    finish(sinks, a.report.as_deref(), false, report, |r, sinks| {
        let met = &m.metric;
        let traj = match (&a.y0, &a.pi0, a.dual) {
            (Some(y), _, false) => integrate(met, Flow::Geodesic, &a.x0, y, a.t_end, a.h)?,
            (None, Some(pi), true) => integrate(met, Flow::Cogeodesic, &a.x0, pi, a.t_end, a.h)?,
            (Some(y), _, true) => {
                let s = dualize(met, &EPoint::new(a.x0.clone(), y.clone()))?;
                integrate(met, Flow::Cogeodesic, &s.x, &s.pi, a.t_end, a.h)?
            }
            (None, Some(pi), false) => {
                let s = undualize(met, &PhasePoint::new(a.x0.clone(), pi.clone()))?;
                integrate(met, Flow::Geodesic, &s.x, &s.y, a.t_end, a.h)?
            }
            (None, None, _) => return Err(Error::Shape("one of --y0 or --pi0 is required".into())),
        };
        trajectory_summary(r, &traj)?;
        sinks.emit(out.as_deref(), true, &traj.to_csv())?;
        Ok(Status::Ok)
    })
}

fn cmd_killing(sinks: &mut Sinks<'_>, model: &str, action: &KillingAction, report_path: Option<&Path>) -> i32 {
    let seed_flag = match action {
        KillingAction::Check { sampling, .. } => sampling.seed,
        KillingAction::Find { seed, .. } => *seed,
    };
    let seed = match seed_or_usage(sinks, seed_flag) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let m = match load(sinks, model) {
        Ok(m) => m,
        Err(c) => return c,
    };
    match action {
        KillingAction::Check { section, sampling } => {
            let report = Report::new(m.name(), seed, "killing check");
            finish(sinks, report_path, true, report, |r, sinks| {
                let u = m.section(section)?;
                let k = killing_check(&m.metric, u, sampling.samples, seed)?;
                r.insert("samples", sampling.samples)?;
                r.insert("killing", &k)?;
                r.insert("normalized_residuals", k.normalized())?;
                if k.consistent {
                    Ok(Status::Ok)
                } else {
                    sinks.note("the three Killing residual forms disagree on the verdict");
                    Ok(Status::Failed)
                }
            })
        }
        KillingAction::Find { degree, .. } => {
            let report = Report::new(m.name(), seed, "killing find");
            finish(sinks, report_path, true, report, |r, _| {
                let b = killing_find(&m.metric, *degree)?;
                let sections: Vec<Vec<String>> = b
                    .sections
                    .iter()
                    .map(|s| s.components().iter().map(|e| e.to_string()).collect())
                    .collect();
                r.insert("degree", degree)?;
                r.insert("dim", b.dim)?;
                r.insert("bound", b.bound)?;
                r.insert("rows", b.rows)?;
                r.insert("unknowns", b.unknowns)?;
                r.insert("singular_values", &b.singular_values)?;
                r.insert_lossy("gap_ratio", b.gap_ratio);
                r.insert("closure_residual", b.closure_residual)?;
                r.insert("sections", sections)?;
                r.insert("structure_constants", array3_nested(&b.structure_constants))?;
                Ok(Status::Ok)
            })
        }
    }
}

/// Source grid and starting configuration from the model and flags.
fn sigma_setup(m: &Model, a: &SigmaArgs) -> Result<(SourceManifold, SigmaConfiguration)> {
    let alg = m.algebroid();
    let mut block = m.file.sigma.clone();
    if block.is_none() {
        let n = a
            .nodes
            .as_ref()
            .and_then(|v| v.first().copied())
            .ok_or_else(|| Error::Schema("the model has no sigma block; give --nodes, --from and --to".into()))?;
        if a.from.is_none() {
            return Err(Error::Schema("the model has no sigma block; give --from and --to".into()));
        }
        block = Some(crate::model::SigmaBlock {
            k: 1,
            nodes: vec![n],
            bounds: vec![[0.0, 1.0]],
            metric: None,
            boundary: vec![AxisBoundary::Dirichlet],
            coords: None,
            phi: vec!["0".into(); alg.dim()],
        });
    }
    let mut block = block.expect("set above");
    if let Some(n) = &a.nodes {
        block.nodes = n.clone();
    }
    let source = block.source()?;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Schema(format!("cannot read {}: {e}", path.display())))?;
        return Ok((source.clone(), SigmaConfiguration::from_csv(&source, alg, &text)?));
    }
    let cfg = match (&a.from, &a.to) {
        (Some(p0), Some(p1)) => {
            if source.k() != 1 {
                return Err(Error::Schema("--from/--to need a one-dimensional source".into()));
            }
            if p0.len() != alg.dim() || p1.len() != alg.dim() {
                return Err(Error::Shape(format!("--from and --to need {} values", alg.dim())));
            }
            let (t0, t1) = source.bounds()[0];
            let phi = (0..source.len())
                .map(|n| {
                    let s = (source.point(n)[0] - t0) / (t1 - t0);
                    p0.iter().zip(p1).map(|(a, b)| a + (b - a) * s).collect()
                })
                .collect();
            SigmaConfiguration::from_phi(&source, alg, phi)?
        }
        _ => block.initial(&source, alg)?,
    };
    Ok((source, cfg))
}

fn cmd_sigma(sinks: &mut Sinks<'_>, a: &SigmaArgs) -> i32 {
    let seed = match seed_or_usage(sinks, a.seed) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let m = match load(sinks, &a.model) {
        Ok(m) => m,
        Err(c) => return c,
    };
    let name = match a.action {
        SigmaAction::Solve => "sigma solve",
        SigmaAction::Residual => "sigma residual",
        SigmaAction::Noether => "sigma noether",
        SigmaAction::Charged => "sigma charged",
    };
    let report = Report::new(m.name(), seed, name);
    finish(sinks, a.report.as_deref(), false, report, |r, sinks| match a.action {
        SigmaAction::Solve => sigma_solve(&m, a, r, sinks),
        SigmaAction::Residual => sigma_residual(&m, a, r, sinks),
        SigmaAction::Noether => sigma_noether(&m, a, r, sinks),
        SigmaAction::Charged => sigma_charged(&m, a, seed, r, sinks),
    })
}

fn sections_and_xi(m: &Model, a: &SigmaArgs) -> Result<(Vec<crate::algebroid::Section>, Vec<f64>)> {
    if a.section.is_empty() {
        return Err(Error::Schema("--section is required".into()));
    }
    let sections = a.section.iter().map(|s| m.section(s).cloned()).collect::<Result<Vec<_>>>()?;
    let xi = if a.xi.is_empty() { vec![1.0; sections.len()] } else { a.xi.clone() };
    if xi.len() != sections.len() {
        return Err(Error::Shape(format!("{} sections but {} --xi values", sections.len(), xi.len())));
    }
    Ok((sections, xi))
}

fn sigma_solve(m: &Model, a: &SigmaArgs, r: &mut Report, sinks: &mut Sinks<'_>) -> Result<Status> {
    let (source, cfg) = sigma_setup(m, a)?;
    let out = relax(&cfg, &m.metric, &source, a.step, a.iters)?;
    let alg = m.algebroid();
    r.insert("nodes", source.nodes())?;
    r.insert("iterations", out.log.len().saturating_sub(1))?;
    r.insert("converged", out.converged)?;
    r.insert("action", out.action)?;
    r.insert("max_tension", &out.max_tension)?;
    r.insert("tolerance", crate::sigma::RELAX_TOL)?;
    if !a.section.is_empty() {
        let (sections, xi) = sections_and_xi(m, a)?;
        let j = noether_current(&out.config, &m.metric, &source, &sections, &xi)?;
        r.insert("noether_divergence", &j.divergence)?;
    }
    sinks.emit(a.out.as_deref(), true, &out.config.to_csv(&source, alg))?;
    if let Some(p) = &a.log {
        sinks.emit(Some(p), false, &out.log_csv())?;
    }
    if out.converged {
        Ok(Status::Ok)
    } else {
        sinks.note(&format!(
            "relaxation stopped after {} iterations with tension {:e}; best iterate written",
            a.iters, out.max_tension.value
        ));
        Ok(Status::NotConverged)
    }
}

fn sigma_residual(m: &Model, a: &SigmaArgs, r: &mut Report, _: &mut Sinks<'_>) -> Result<Status> {
    let (source, cfg) = sigma_setup(m, a)?;
    let alg = m.algebroid();
    let mr = morphism_residual(&cfg, alg, &source)?;
    r.insert("nodes", source.nodes())?;
    r.insert("anchor_residual", &mr.anchor)?;
    r.insert("curl_residual", &mr.curl)?;
    r.insert("curl_signed", mr.curl_signed)?;
    r.insert("action", action(&cfg, &m.metric, &source)?)?;
    r.insert("max_tension", &max_tension(&cfg, &m.metric, &source)?)?;
    Ok(Status::Ok)
}

fn sigma_noether(m: &Model, a: &SigmaArgs, r: &mut Report, sinks: &mut Sinks<'_>) -> Result<Status> {
    let (source, mut cfg) = sigma_setup(m, a)?;
    let (sections, xi) = sections_and_xi(m, a)?;
    let mut status = Status::Ok;
    if a.config.is_none() {
        let out = relax(&cfg, &m.metric, &source, a.step, a.iters)?;
        r.insert("relax_converged", out.converged)?;
        if !out.converged {
            status = Status::NotConverged;
        }
        cfg = out.config;
    }
    let tension = max_tension(&cfg, &m.metric, &source)?;
    let j = noether_current(&cfg, &m.metric, &source, &sections, &xi)?;
    let ratio = invariance_check(&cfg, &m.metric, &source, &sections, &xi, a.epsilon)?;
    let h = (0..source.k()).map(|i| source.spacing(i)).fold(0.0, f64::max);
    let bound = 10.0 * (h * h * j.magnitude + tension.value);
    r.insert("sections", &a.section)?;
    r.insert("xi", &xi)?;
    r.insert("epsilon", a.epsilon)?;
    r.insert("invariance_ratio", ratio)?;
    r.insert("action", action(&cfg, &m.metric, &source)?)?;
    r.insert("max_tension", &tension)?;
    r.insert("noether_divergence", &j.divergence)?;
    r.insert("current_magnitude", j.magnitude)?;
    r.insert("spacing", h)?;
    r.insert("divergence_bound", bound)?;
    r.insert("within_bound", j.divergence.value <= bound)?;
    let mut csv = source.coords().join(",");
    for i in 0..source.k() {
        csv.push_str(&format!(",J{}", i + 1));
    }
    csv.push('\n');
    for (n, jn) in j.current.iter().enumerate() {
        let cols: Vec<String> = source.point(n).iter().chain(jn).map(|v| format!("{v:e}")).collect();
        csv.push_str(&cols.join(","));
        csv.push('\n');
    }
    sinks.emit(a.out.as_deref(), true, &csv)?;
    Ok(status)
}

fn sigma_charged(m: &Model, a: &SigmaArgs, seed: u64, r: &mut Report, sinks: &mut Sinks<'_>) -> Result<Status> {
    let c = m.oneform.as_ref().ok_or_else(|| Error::Schema("the model has no oneform".into()))?;
    let alg = m.algebroid();
    let samples = a.samples.unwrap_or(DEFAULT_SAMPLES);
    let traj = charged_particle(&m.metric, c, &EPoint::new(a.x0.clone(), a.y0.clone()), a.t_end, a.h)?;
    trajectory_summary(r, &traj)?;
    r.insert("field_strength_antisymmetry", &field_strength_antisymmetry(alg, c, samples, seed)?)?;
    let mut currents = serde_json::Map::new();
    for name in &a.section {
        let u = m.section(name)?;
        let j = charged_current(&m.metric, c, u, &traj)?;
        let drift = j.iter().fold(0.0_f64, |acc, v| acc.max((v - j[0]).abs()));
        let lie = potential_lie_derivative(alg, c, u, samples, seed)?;
        currents.insert(
            name.clone(),
            json!({ "initial": j[0], "drift": drift, "potential_lie_derivative": lie.value }),
        );
    }
    r.insert("currents", currents)?;
    sinks.emit(a.out.as_deref(), true, &traj.to_csv())?;
    Ok(Status::Ok)
}
