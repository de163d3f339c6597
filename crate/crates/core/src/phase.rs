//! Phase functions: validation, critical points, clean/non-degenerate
//! classification, Lagrangian samples and the positivity check.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::almost_analytic::{extend, AAExtension};
use crate::expr::{EvalError, Expr, ExprError, Program, VarLayout};
use crate::jets::jet_of;
use crate::linalg::{null_space, rank, select_rows, RANK_TOL};
use crate::newton::{newton, NewtonError, NewtonOptions};

/// Default almost analytic extension order.
pub const DEFAULT_K: usize = 8;
pub const EULER_TOL: f64 = 1e-10;
pub const IM_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-12;
pub const CRITICAL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhaseError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Newton(#[from] NewtonError),
    #[error("layout: {0}")]
    Layout(String),
    #[error("chart needs rank {expected} at the seed, found {found}")]
    SeedRank { expected: usize, found: usize },
    #[error("sample {index} is not on the critical set (|∂_θφ| = {residual:.3e})")]
    NotCritical { index: usize, residual: f64 },
    #[error("no critical samples supplied")]
    NoSamples,
    #[error("not a ξ-graph on this patch: {0}")]
    NotXiGraph(String),
}

/// Working conic patch: a box in the non-frequency variables and a cone
/// (unit direction, angular radius, radial interval) in the frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Box centers; for frequency variables, the cone direction.
    pub center: Vec<f64>,
    /// Box half-widths; ignored for frequency variables.
    pub radius: Vec<f64>,
    pub cone_angle: f64,
    pub radial: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct PhaseFunction {
    expr: Expr,
    program: Program,
    layout: VarLayout,
    base: Vec<usize>,
    fiber: Vec<usize>,
    freq: Vec<usize>,
    ext: AAExtension,
    pub patch: Patch,
}

fn indices_of(layout: &VarLayout, groups: &[&str]) -> Result<Vec<usize>, PhaseError> {
    let mut out = Vec::new();
    for g in groups {
        let r = layout.range(g).ok_or_else(|| PhaseError::Layout(format!("missing group `{g}`")))?;
        out.extend(r);
    }
    Ok(out)
}

impl PhaseFunction {
    /// General constructor: `base` groups are the x-like variables, `fiber`
    /// groups are the variables of the critical equations.
    pub fn new(expr: Expr, layout: VarLayout, base: &[&str], fiber: &[&str], k: usize) -> Result<Self, PhaseError> {
        let program = Program::compile(&expr, &layout)?;
        let base = indices_of(&layout, base)?;
        let fiber = indices_of(&layout, fiber)?;
        let freq = layout.frequency_indices();
        if freq.is_empty() {
            return Err(PhaseError::Layout("no frequency group".into()));
        }
        let d = layout.dim();
        let mut center = vec![0.0; d];
        center[freq[0]] = 1.0;
        let patch = Patch { center, radius: vec![1.0; d], cone_angle: 0.3, radial: (0.5, 2.0) };
        let ext = extend(&program, k);
        Ok(PhaseFunction { expr, program, layout, base, fiber, freq, ext, patch })
    }

    /// `φ(x, θ)` with `x ∈ ℝⁿ`, `θ ∈ ℝᴺ`.
    pub fn standard(src: &str, n: usize, big_n: usize) -> Result<Self, PhaseError> {
        let layout = VarLayout::new().with("x", n, false).with("theta", big_n, true);
        PhaseFunction::new(crate::expr::parse(src)?, layout, &["x"], &["theta"], DEFAULT_K)
    }

    pub fn with_patch(mut self, patch: Patch) -> Self {
        self.patch = patch;
        self
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn extension(&self) -> &AAExtension {
        &self.ext
    }

    pub fn layout(&self) -> &VarLayout {
        &self.layout
    }

    pub fn base(&self) -> &[usize] {
        &self.base
    }

    pub fn fiber(&self) -> &[usize] {
        &self.fiber
    }

    pub fn freq(&self) -> &[usize] {
        &self.freq
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Random real points of the patch (deterministic in `seed`).
    pub fn sample_points(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim();
        (0..count)
            .map(|_| {
                let mut p = vec![0.0; d];
                for k in 0..d {
                    if !self.freq.contains(&k) {
                        p[k] = self.patch.center[k] + self.patch.radius[k] * rng.random_range(-1.0..=1.0);
                    }
                }
                let dir: Vec<f64> = self.freq.iter().map(|&k| self.patch.center[k] + self.patch.cone_angle * rng.random_range(-1.0..=1.0)).collect();
                let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                let (lo, hi) = self.patch.radial;
                let r = lo + (hi - lo) * rng.random::<f64>();
                for (j, &k) in self.freq.iter().enumerate() {
                    p[k] = r * dir[j] / len;
                }
                p
            })
            .collect()
    }

    fn real_point(p: &[f64]) -> Vec<C64> {
        p.iter().map(|v| C64::new(*v, 0.0)).collect()
    }

    /// Gradient in all variables at a complex point (through the extension).
    pub fn gradient(&self, p: &[C64]) -> Result<Vec<C64>, EvalError> {
        let all: Vec<usize> = (0..self.dim()).collect();
        Ok(self.ext.jet_at(p, &all, 1)?.gradient())
    }

    pub fn hessian(&self, p: &[C64]) -> Result<DMatrix<C64>, EvalError> {
        let all: Vec<usize> = (0..self.dim()).collect();
        Ok(self.ext.jet_at(p, &all, 2)?.hessian())
    }

    pub fn value(&self, p: &[C64]) -> Result<C64, EvalError> {
        self.ext.eval(p)
    }

    /// Rows `d(∂φ/∂v_j)` for `j` in the fiber variables, all columns.
    pub fn fiber_differentials(&self, p: &[C64]) -> Result<DMatrix<C64>, EvalError> {
        let h = self.hessian(p)?;
        Ok(DMatrix::from_fn(self.fiber.len(), self.dim(), |r, c| h[(self.fiber[r], c)]))
    }

    /// Max |∂_fiber φ| at a point.
    pub fn fiber_residual(&self, p: &[C64]) -> Result<f64, EvalError> {
        let g = self.gradient(p)?;
        Ok(self.fiber.iter().map(|&k| g[k].norm()).fold(0.0, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseValidation {
    pub samples: usize,
    pub max_euler_residual: f64,
    pub min_im: f64,
    pub min_grad_norm: f64,
    pub pass: bool,
}

/// Euler identity, positivity of `Im φ` and `dφ ≠ 0` at real samples.
pub fn validate_phase(phi: &PhaseFunction, samples: &[Vec<f64>]) -> Result<PhaseValidation, PhaseError> {
    let mut max_euler = 0.0f64;
    let mut min_im = f64::INFINITY;
    let mut min_grad = f64::INFINITY;
    let all: Vec<usize> = (0..phi.dim()).collect();
    for s in samples {
        let p = PhaseFunction::real_point(s);
        let j = jet_of(&phi.program, &p, &all, 1)?;
        let v = j.coeffs()[0];
        let g = j.gradient();
        let euler: C64 = phi.freq.iter().map(|&k| g[k] * s[k]).sum::<C64>() - v;
        max_euler = max_euler.max(euler.norm() / (1.0 + v.norm()));
        min_im = min_im.min(v.im);
        min_grad = min_grad.min(g.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt());
    }
    let pass = max_euler <= EULER_TOL && min_im >= -IM_TOL && min_grad > GRAD_TOL;
    Ok(PhaseValidation { samples: samples.len(), max_euler_residual: max_euler, min_im, min_grad_norm: min_grad, pass })
}

/// Which critical equations to solve and for which unknowns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chart {
    pub equations: Vec<usize>,
    pub unknowns: Vec<usize>,
}

/// Greedy column choice, preferring `first` columns, then `second`.
fn select_columns(jac: &DMatrix<C64>, first: &[usize], second: &[usize], want: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    for &col in first.iter().chain(second) {
        if chosen.len() == want {
            break;
        }
        let mut trial = chosen.clone();
        trial.push(col);
        let sub = DMatrix::from_fn(jac.nrows(), trial.len(), |r, c| jac[(r, trial[c])]);
        if rank(&sub, RANK_TOL) == trial.len() {
            chosen = trial;
        }
    }
    chosen
}

impl Chart {
    /// Equations: an independent subset of the fiber differentials at the
    /// seed. Unknowns: matching columns, base variables first.
    pub fn auto(phi: &PhaseFunction, seed: &[C64]) -> Result<Chart, PhaseError> {
        let d = phi.fiber_differentials(seed)?;
        let rows = select_rows(&d, RANK_TOL);
        let equations: Vec<usize> = rows.iter().map(|&r| phi.fiber[r]).collect();
        let sub = DMatrix::from_fn(rows.len(), phi.dim(), |r, c| d[(rows[r], c)]);
        let others: Vec<usize> = phi.fiber.iter().copied().filter(|k| !phi.base.contains(k)).collect();
        let unknowns = select_columns(&sub, &phi.base, &others, rows.len());
        if unknowns.len() != equations.len() {
            return Err(PhaseError::SeedRank { expected: equations.len(), found: unknowns.len() });
        }
        Ok(Chart { equations, unknowns })
    }
}

/// Newton system `∂_{eq_k} φ̃ = target_k` in the given unknowns.
pub(crate) fn gradient_system<'a>(
    ext: &'a AAExtension,
    template: &'a [C64],
    equations: &'a [usize],
    unknowns: &'a [usize],
    targets: &'a [C64],
) -> impl Fn(&[C64]) -> Result<(DVector<C64>, DMatrix<C64>), EvalError> + 'a {
    let active: Vec<usize> = equations.iter().chain(unknowns).copied().collect::<BTreeSet<_>>().into_iter().collect();
    move |u: &[C64]| {
        let mut p = template.to_vec();
        for (k, &idx) in unknowns.iter().enumerate() {
            p[idx] = u[k];
        }
        let j = ext.jet_at(&p, &active, 2)?;
        let g = j.gradient();
        let h = j.hessian();
        let pos = |v: usize| active.iter().position(|&a| a == v).unwrap();
        let f = DVector::from_fn(equations.len(), |k, _| g[pos(equations[k])] - targets[k]);
        let jac = DMatrix::from_fn(equations.len(), unknowns.len(), |r, c| h[(pos(equations[r]), pos(unknowns[c]))]);
        Ok((f, jac))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPoint {
    pub point: Vec<C64>,
    pub residual: f64,
    pub real: bool,
    pub iterations: usize,
    pub chart: Chart,
}

impl CriticalPoint {
    pub fn real_point(&self) -> Vec<f64> {
        self.point.iter().map(|z| z.re).collect()
    }
}

/// Damped Newton on `∂_θ′φ̃ = 0` in the chart's unknowns; the remaining
/// coordinates stay at their seed values.
pub fn find_critical(phi: &PhaseFunction, seed: &[C64], chart: Option<&Chart>) -> Result<CriticalPoint, PhaseError> {
    let chart = match chart {
        Some(c) => c.clone(),
        None => Chart::auto(phi, seed)?,
    };
    let d = phi.fiber_differentials(seed)?;
    let rows: Vec<usize> = chart.equations.iter().map(|e| phi.fiber.iter().position(|f| f == e).expect("equation outside fiber")).collect();
    let sub = DMatrix::from_fn(rows.len(), chart.unknowns.len(), |r, c| d[(rows[r], chart.unknowns[c])]);
    let found = rank(&sub, RANK_TOL);
    if found < chart.equations.len() {
        return Err(PhaseError::SeedRank { expected: chart.equations.len(), found });
    }
    let zeros = vec![C64::new(0.0, 0.0); chart.equations.len()];
    let (equations, unknowns) = (chart.equations.clone(), chart.unknowns.clone());
    let system = gradient_system(&phi.ext, seed, &equations, &unknowns, &zeros);
    let u0: Vec<C64> = chart.unknowns.iter().map(|&k| seed[k]).collect();
    let res = newton(&system, u0, NewtonOptions::default())?;
    let mut point = seed.to_vec();
    for (k, &idx) in chart.unknowns.iter().enumerate() {
        point[idx] = res.x[k];
    }
    let mut residual = res.residual;
    let mut real = false;
    if point.iter().all(|z| z.im.abs() <= 1e-10) {
        let snapped: Vec<C64> = point.iter().map(|z| C64::new(z.re, 0.0)).collect();
        let (f, _) = system(&chart.unknowns.iter().map(|&k| snapped[k]).collect::<Vec<_>>())?;
        let r = f.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if r <= 1e-11 {
            point = snapped;
            residual = r;
            real = true;
        }
    }
    Ok(CriticalPoint { point, residual, real, iterations: res.iterations, chart })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    NonDegenerate,
    Clean,
    DegenerateInvalid,
}

impl PhaseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseKind::NonDegenerate => "non-degenerate",
            PhaseKind::Clean => "clean",
            PhaseKind::DegenerateInvalid => "degenerate-invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseClassification {
    pub n: usize,
    /// Number of fiber variables.
    pub big_n: usize,
    /// Rank of the fiber differentials on the real critical set.
    pub m: usize,
    pub excess: usize,
    pub kind: PhaseKind,
    /// Flat indices of the selected independent equations θ′.
    pub theta_prime: Vec<usize>,
    /// Flat indices of the excess variables θ″.
    pub theta_second: Vec<usize>,
    pub ranks: Vec<usize>,
    /// Rank of the Λ-map differential on the critical tangent space
    /// (expected n, the dimension of Λ over the base).
    pub lambda_ranks: Vec<usize>,
}

/// Rank of `(x,θ) ↦ (x, ∂_xφ)` restricted to `ker d(∂_θφ)`.
pub fn lambda_rank(phi: &PhaseFunction, p: &[C64]) -> Result<usize, EvalError> {
    let h = phi.hessian(p)?;
    let d = DMatrix::from_fn(phi.fiber.len(), phi.dim(), |r, c| h[(phi.fiber[r], c)]);
    let kernel = null_space(&d, RANK_TOL);
    let n = phi.base.len();
    let map = DMatrix::from_fn(2 * n, phi.dim(), |r, c| {
        if r < n {
            C64::new(if phi.base[r] == c { 1.0 } else { 0.0 }, 0.0)
        } else {
            h[(phi.base[r - n], c)]
        }
    });
    Ok(rank(&(map * kernel), RANK_TOL))
}

pub fn classify(phi: &PhaseFunction, critical: &[Vec<f64>]) -> Result<PhaseClassification, PhaseError> {
    if critical.is_empty() {
        return Err(PhaseError::NoSamples);
    }
    let mut ranks = Vec::new();
    let mut lambda_ranks = Vec::new();
    let mut first = None;
    for (index, s) in critical.iter().enumerate() {
        let p = PhaseFunction::real_point(s);
        let residual = phi.fiber_residual(&p)?;
        let scale = 1.0 + phi.gradient(&p)?.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if residual > 1e-8 * scale {
            return Err(PhaseError::NotCritical { index, residual });
        }
        let d = phi.fiber_differentials(&p)?;
        ranks.push(rank(&d, RANK_TOL));
        lambda_ranks.push(lambda_rank(phi, &p)?);
        if first.is_none() {
            first = Some(d);
        }
    }
    let m = *ranks.iter().min().unwrap();
    let uniform = ranks.iter().all(|&r| r == m);
    let rows = select_rows(&first.unwrap(), RANK_TOL);
    let theta_prime: Vec<usize> = rows.iter().map(|&r| phi.fiber[r]).collect();
    let theta_second: Vec<usize> = phi.fiber.iter().copied().filter(|k| !theta_prime.contains(k)).collect();
    let big_n = phi.fiber.len();
    let excess = big_n - m;
    let kind = if !uniform || m == 0 {
        PhaseKind::DegenerateInvalid
    } else if excess == 0 {
        PhaseKind::NonDegenerate
    } else {
        PhaseKind::Clean
    };
    Ok(PhaseClassification { n: phi.base.len(), big_n, m, excess, kind, theta_prime, theta_second, ranks, lambda_ranks })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianSample {
    pub x: Vec<C64>,
    pub xi: Vec<C64>,
    /// `Im φ` at the real part of the critical point.
    pub im_phase: f64,
    /// `|ξ(x, 2θ) − 2ξ(x, θ)| / (1 + |ξ|)`.
    pub homogeneity_residual: f64,
}

pub fn lambda_sample(phi: &PhaseFunction, cp: &CriticalPoint) -> Result<LagrangianSample, PhaseError> {
    let g = phi.gradient(&cp.point)?;
    let xi: Vec<C64> = phi.base.iter().map(|&k| g[k]).collect();
    let x: Vec<C64> = phi.base.iter().map(|&k| cp.point[k]).collect();
    let re: Vec<C64> = cp.point.iter().map(|z| C64::new(z.re, 0.0)).collect();
    let im_phase = phi.program.eval(&re)?.im;
    let mut scaled = cp.point.clone();
    for &k in &phi.freq {
        scaled[k] *= 2.0;
    }
    let g2 = phi.gradient(&scaled)?;
    let norm = xi.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let homogeneity_residual =
        phi.base.iter().zip(&xi).map(|(&k, v)| (g2[k] - 2.0 * v).norm()).fold(0.0, f64::max) / (1.0 + norm);
    Ok(LagrangianSample { x, xi, im_phase, homogeneity_residual })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositivityReport {
    /// min over real ξ samples of `Im(φ̃ − x̃·ξ)` on Λ.
    pub min_im_generating: f64,
    /// min of `Im φ` at real points near the critical samples.
    pub min_im_phase: f64,
    pub xi_samples: usize,
    pub pass: bool,
}

pub const POSITIVITY_TOL: f64 = 1e-10;

/// Λ as a graph over ξ near each real critical sample: solve
/// `∂_θ′φ̃ = 0, ∂_xφ̃ = ξ` for `(x̃, θ̃′)` at real `ξ`, and check
/// `Im(φ̃ − x̃·ξ) ≥ 0`; also check `Im φ ≥ 0` at nearby real points.
pub fn positivity_check(phi: &PhaseFunction, critical: &[Vec<f64>], spread: f64) -> Result<PositivityReport, PhaseError> {
    if critical.is_empty() {
        return Err(PhaseError::NoSamples);
    }
    let mut min_gen = f64::INFINITY;
    let mut min_phase = f64::INFINITY;
    let mut count = 0;
    let n = phi.base.len();
    for s in critical {
        let p0 = PhaseFunction::real_point(s);
        let d = phi.fiber_differentials(&p0)?;
        let theta_prime: Vec<usize> = select_rows(&d, RANK_TOL).iter().map(|&r| phi.fiber[r]).collect();
        let g0 = phi.gradient(&p0)?;
        let xi0: Vec<f64> = phi.base.iter().map(|&k| g0[k].re).collect();
        let equations: Vec<usize> = theta_prime.iter().chain(&phi.base).copied().collect();
        let unknowns: Vec<usize> = phi.base.iter().chain(&theta_prime).copied().collect();
        let h = phi.hessian(&p0)?;
        let jac = DMatrix::from_fn(equations.len(), unknowns.len(), |r, c| h[(equations[r], unknowns[c])]);
        if rank(&jac, RANK_TOL) < unknowns.len() {
            return Err(PhaseError::NotXiGraph(format!("ξ-projection differential is singular at {s:?}")));
        }
        let scale = spread * xi0.iter().map(|v| v.abs()).fold(1.0, f64::max);
        let mut xis = vec![xi0.clone()];
        for j in 0..n {
            for sign in [-1.0, 1.0] {
                let mut xi = xi0.clone();
                xi[j] += sign * scale;
                xis.push(xi);
            }
        }
        for xi in xis {
            let mut targets = vec![C64::new(0.0, 0.0); theta_prime.len()];
            targets.extend(xi.iter().map(|v| C64::new(*v, 0.0)));
            let system = gradient_system(&phi.ext, &p0, &equations, &unknowns, &targets);
            let u0: Vec<C64> = unknowns.iter().map(|&k| p0[k]).collect();
            let sol = newton(&system, u0, NewtonOptions::default())?;
            let mut p = p0.clone();
            for (k, &idx) in unknowns.iter().enumerate() {
                p[idx] = sol.x[k];
            }
            let xdotxi: C64 = phi.base.iter().zip(&xi).map(|(&k, v)| p[k] * v).sum();
            let gen = phi.value(&p)? - xdotxi;
            min_gen = min_gen.min(gen.im);
            count += 1;
        }
        // Real points around the critical sample, fiber variables fixed.
        for j in 0..n {
            for step in [-2.0, -1.0, 1.0, 2.0] {
                let mut q = s.clone();
                q[phi.base[j]] += step * 0.5 * spread;
                min_phase = min_phase.min(phi.program.eval_real(&q)?.im);
            }
        }
        min_phase = min_phase.min(phi.program.eval(&p0)?.im);
    }
    let pass = min_gen >= -POSITIVITY_TOL && min_phase >= -POSITIVITY_TOL;
    Ok(PositivityReport { min_im_generating: min_gen, min_im_phase: min_phase, xi_samples: count, pass })
}
