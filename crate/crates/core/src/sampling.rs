//! Deterministic sampling of chart points.
//!
//! Each sample index owns its own ChaCha stream derived from the seed, so
//! sweeps can run in parallel and still reduce to the same maximum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::ExprError;

/// Redraws allowed after a domain error before a sweep fails.
pub const RETRY_CAP: usize = 8;

pub const DEFAULT_SAMPLES: usize = 64;
pub const DEFAULT_SEED: u64 = 42;

/// Axis-aligned box in chart coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBox {
    pub bounds: Vec<(f64, f64)>,
}

impl SampleBox {
    pub fn new(bounds: Vec<(f64, f64)>) -> Self {
        SampleBox { bounds }
    }

    pub fn unit(dim: usize) -> Self {
        SampleBox {
            bounds: vec![(-1.0, 1.0); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.bounds
            .iter()
            .map(|&(lo, hi)| if hi > lo { rng.gen_range(lo..hi) } else { lo })
            .collect()
    }

    /// Tensor grid with `per_axis` points per axis (endpoints included).
    /// A zero-dimensional box yields the single empty point.
    pub fn grid(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for &(lo, hi) in &self.bounds {
            let ticks: Vec<f64> = if per_axis <= 1 {
                vec![0.5 * (lo + hi)]
            } else {
                (0..per_axis).map(|i| lo + (hi - lo) * i as f64 / (per_axis - 1) as f64).collect()
            };
            out = out
                .into_iter()
                .flat_map(|p| {
                    ticks.iter().map(move |&t| {
                        let mut q = p.clone();
                        q.push(t);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Largest residual seen in a sweep, with where it happened.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Residual {
    pub value: f64,
    pub point: Vec<f64>,
    pub indices: Vec<usize>,
}

impl Residual {
    pub fn zero() -> Self {
        Residual {
            value: 0.0,
            point: Vec::new(),
            indices: Vec::new(),
        }
    }

    pub fn at(value: f64, point: &[f64], indices: &[usize]) -> Self {
        Residual {
            value,
            point: point.to_vec(),
            indices: indices.to_vec(),
        }
    }

    /// Keeps the larger residual; NaN always wins so it cannot hide.
    pub fn max(self, other: Residual) -> Residual {
        if other.value.is_nan() || other.value > self.value {
            other
        } else {
            self
        }
    }
}

fn is_domain(e: &Error) -> Option<&ExprError> {
    match e {
        Error::Expr(inner @ ExprError::Domain { .. }) => Some(inner),
        _ => None,
    }
}

/// Evaluate `f` at `samples` random points of `bx`, redrawing a point up to
/// [`RETRY_CAP`] times if it hits a domain error, and return the maximum.
pub fn sweep_max<F>(bx: &SampleBox, samples: usize, seed: u64, f: F) -> Result<Residual>
where
    F: Fn(&[f64]) -> Result<Residual> + Sync,
{
    let samples = if bx.dim() == 0 { 1 } else { samples.max(1) };
    let results: Vec<Result<Residual>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i as u64);
            let mut attempt = 0;
            loop {
                let p = bx.draw(&mut rng);
                match f(&p) {
                    Ok(r) => return Ok(r),
                    Err(e) => match is_domain(&e) {
                        Some(inner) if attempt < RETRY_CAP => {
                            let _ = inner;
                            attempt += 1;
                        }
                        Some(inner) => {
                            return Err(Error::Sampling {
                                attempts: attempt + 1,
                                last: inner.clone(),
                            })
                        }
                        None => return Err(e),
                    },
                }
            }
        })
        .collect();
    let mut best = Residual::zero();
    for r in results {
        best = best.max(r?);
    }
    Ok(best)
}

/// Draw `samples` points that `accept` evaluates without domain errors.
pub fn draw_points<F>(bx: &SampleBox, samples: usize, seed: u64, accept: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<()> + Sync,
{
    let samples = if bx.dim() == 0 { 1 } else { samples.max(1) };
    (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, i as u64);
            for attempt in 0..=RETRY_CAP {
                let p = bx.draw(&mut rng);
                match accept(&p) {
                    Ok(()) => return Ok(p),
                    Err(e) => match is_domain(&e) {
                        Some(inner) if attempt == RETRY_CAP => {
                            return Err(Error::Sampling {
                                attempts: attempt + 1,
                                last: inner.clone(),
                            })
                        }
                        Some(_) => {}
                        None => return Err(e),
                    },
                }
            }
            unreachable!()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    #[test]
    fn grid_counts() {
        assert_eq!(SampleBox::unit(2).grid(5).len(), 25);
        assert_eq!(SampleBox::unit(0).grid(5), vec![Vec::<f64>::new()]);
        let g = SampleBox::new(vec![(0.0, 1.0)]).grid(3);
        assert_eq!(g, vec![vec![0.0], vec![0.5], vec![1.0]]);
    }

    #[test]
    fn sweep_is_deterministic() {
        let bx = SampleBox::unit(2);
        let f = |p: &[f64]| Ok(Residual::at(p[0] * p[1], p, &[]));
        let a = sweep_max(&bx, 64, 7, f).unwrap();
        let b = sweep_max(&bx, 64, 7, f).unwrap();
        assert_eq!(a, b);
        assert!(a.value > 0.0);
    }

    #[test]
    fn retries_domain_errors_then_fails_loudly() {
        // log(x) fails on half the box: retries succeed.
        let e = parse("log(x)").unwrap();
        let names = vec!["x".to_string()];
        let bx = SampleBox::unit(1);
        let r = sweep_max(&bx, 32, 1, |p| {
            let v = e.eval(&crate::expr::Bindings::new(&names, p))?;
            Ok(Residual::at(v.abs(), p, &[]))
        });
        assert!(r.is_ok());
        // sqrt(-1 - x^2) fails everywhere: the sweep must error out.
        let bad = parse("sqrt(-1 - x^2)").unwrap();
        let r = sweep_max(&bx, 4, 1, |p| {
            let v = bad.eval(&crate::expr::Bindings::new(&names, p))?;
            Ok(Residual::at(v, p, &[]))
        });
        assert!(matches!(r, Err(Error::Sampling { attempts: 9, .. })));
    }
}
