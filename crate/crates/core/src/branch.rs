//! Square roots of inverse determinants chosen by continuation along
//! `A(s) = (1-s)(1/i)H + sI`, from `s = 1` (value 1) to `s = 0`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::linalg::{det, homotopy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BranchError {
    #[error("homotopy leaves GL at s = {s:.6e} (|det A(s)| = {abs_det:.3e})")]
    LeavesGl { s: f64, abs_det: f64 },
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
}

/// Smallest `|det A(s)|` accepted on the path.
pub const MIN_DET: f64 = 1e-10;
const MIN_STEP: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct BranchedSqrt {
    /// `r` with `r² det((1/i)H) = 1`, continued from 1 at `s = 1`.
    pub value: C64,
    /// `det((1/i)H)`.
    pub det: C64,
    /// Accepted path nodes `(s, det A(s))`, from `s = 1` down to `s = 0`.
    pub path: Vec<(f64, C64)>,
    /// Number of rejected (bisected) steps.
    pub subdivisions: usize,
    pub min_abs_det: f64,
    /// Largest argument increment between consecutive accepted nodes.
    pub max_angle: f64,
}

impl BranchedSqrt {
    /// `|r² det − 1|`.
    pub fn residual(&self) -> f64 {
        (self.value * self.value * self.det - 1.0).norm()
    }
}

fn det_at(h: &DMatrix<C64>, s: f64) -> Result<C64, BranchError> {
    let d = det(&homotopy(h, s));
    if !(d.norm() >= MIN_DET) {
        return Err(BranchError::LeavesGl { s, abs_det: d.norm() });
    }
    Ok(d)
}

fn angle(a: C64, b: C64) -> f64 {
    (b / a).arg().abs()
}

/// Default start: 16 uniform steps, refined by bisection.
pub fn branched_inv_sqrt_det(h: &DMatrix<C64>) -> Result<BranchedSqrt, BranchError> {
    branched_inv_sqrt_det_with(h, 16)
}

pub fn branched_inv_sqrt_det_with(h: &DMatrix<C64>, initial_steps: usize) -> Result<BranchedSqrt, BranchError> {
    if h.nrows() != h.ncols() {
        return Err(BranchError::NotSquare(h.nrows(), h.ncols()));
    }
    let max_step = 1.0 / initial_steps.max(1) as f64;
    let mut s = 1.0;
    let mut d = C64::new(1.0, 0.0);
    let mut r = C64::new(1.0, 0.0);
    let mut path = vec![(s, d)];
    let mut step = max_step;
    let mut subdivisions = 0;
    let mut min_abs = 1.0f64;
    let mut max_angle = 0.0f64;
    while s > 0.0 {
        let s_next = (s - step).max(0.0);
        let s_mid = 0.5 * (s + s_next);
        let d_next = det_at(h, s_next)?;
        let d_mid = det_at(h, s_mid)?;
        let ok = angle(d, d_next) < FRAC_PI_2 && angle(d, d_mid) < FRAC_PI_2 && angle(d_mid, d_next) < FRAC_PI_2;
        if !ok {
            step *= 0.5;
            subdivisions += 1;
            if step < MIN_STEP {
                return Err(BranchError::LeavesGl { s, abs_det: d.norm() });
            }
            continue;
        }
        let cand = 1.0 / d_next.sqrt();
        r = if (cand - r).norm() <= (-cand - r).norm() { cand } else { -cand };
        max_angle = max_angle.max(angle(d, d_next));
        min_abs = min_abs.min(d_mid.norm()).min(d_next.norm());
        d = d_next;
        s = s_next;
        path.push((s, d));
        step = (step * 2.0).min(max_step);
    }
    Ok(BranchedSqrt { value: r, det: d, path, subdivisions, min_abs_det: min_abs, max_angle })
}
