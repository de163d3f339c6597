//! Damped complex Newton iteration with explicit Jacobians.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::expr::EvalError;
use crate::linalg::{rank, RANK_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NewtonError {
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("Jacobian rank collapse at iterate {iteration}")]
    RankCollapse { iteration: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Absolute residual target (max-norm).
    pub tol: f64,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { max_iter: 50, tol: 1e-12, max_halvings: 12 }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: Vec<C64>,
    pub residual: f64,
    pub iterations: usize,
}

fn max_norm(v: &DVector<C64>) -> f64 {
    v.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Solve `f(x) = 0` where `system(x)` returns `(f(x), f'(x))`.
pub fn newton<F>(system: F, x0: Vec<C64>, opts: NewtonOptions) -> Result<NewtonResult, NewtonError>
where
    F: Fn(&[C64]) -> Result<(DVector<C64>, DMatrix<C64>), EvalError>,
{
    let mut x = x0;
    let (mut f, mut jac) = system(&x)?;
    let mut res = max_norm(&f);
    for it in 0..opts.max_iter {
        if res <= opts.tol {
            return Ok(NewtonResult { x, residual: res, iterations: it });
        }
        if rank(&jac, RANK_TOL) < jac.ncols().min(jac.nrows()) {
            return Err(NewtonError::RankCollapse { iteration: it });
        }
        let step = jac.clone().lu().solve(&f).ok_or(NewtonError::RankCollapse { iteration: it })?;
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<C64> = x.iter().zip(step.iter()).map(|(a, s)| a - s * lambda).collect();
            if let Ok((ft, jt)) = system(&trial) {
                let rt = max_norm(&ft);
                if rt < res || rt <= opts.tol {
                    accepted = Some((trial, ft, jt, rt));
                    break;
                }
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((xt, ft, jt, rt)) => {
                x = xt;
                f = ft;
                jac = jt;
                res = rt;
            }
            None => {
                // No decrease along the Newton direction: stagnation at the
                // rounding floor counts as converged only if already tiny.
                if res <= opts.tol * 1e2 {
                    return Ok(NewtonResult { x, residual: res, iterations: it });
                }
                return Err(NewtonError::NoConvergence { iterations: it, residual: res });
            }
        }
    }
    if res <= opts.tol {
        return Ok(NewtonResult { x, residual: res, iterations: opts.max_iter });
    }
    Err(NewtonError::NoConvergence { iterations: opts.max_iter, residual: res })
}
