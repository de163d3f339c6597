//! Principal symbol samples: the auxiliary ψ, √dφ (non-degenerate and clean),
//! the pairing map `ψ ↦ top term of ⟨A, e^{-itψ}u⟩`, and σ(A) at a Λ-point.

use std::f64::consts::PI;
use std::sync::Mutex;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::almost_analytic::{extend, AAExtension};
use crate::branch::{branched_inv_sqrt_det, BranchError, BranchedSqrt};
use crate::expr::{EvalError, Expr, ExprError, Func, Program, VarLayout};
use crate::linalg::det;
use crate::newton::{newton, NewtonOptions};
use crate::numerics::fit_loglog;
use crate::oracle::{fit_order, integrate_adaptive, osc_integral, OracleError, OrderFit, QuadratureSpec, NOISE_FLOOR};
use crate::phase::{gradient_system, CriticalPoint, PhaseClassification, PhaseError, PhaseFunction, CRITICAL_TOL, DEFAULT_K};

pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Node-doubling tolerance of fiber integrals.
pub const FIBER_TOL: f64 = 1e-8;
/// Largest amplitude allowed on the fiber box boundary.
pub const SUPPORT_TOL: f64 = 1e-12;
pub const HOMOGENEITY_TOL: f64 = 1e-10;
/// Setup tolerance for `F = φ − ψ` at the base point.
pub const SETUP_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymbolError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error(transparent)]
    Branch(#[from] BranchError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("base point must be a real critical point (residual {0:.3e})")]
    NotRealCritical(f64),
    #[error("concavity λ must be positive, got {0}")]
    Lambda(f64),
    #[error("φ − ψ is not a non-degenerate critical point at the base: {0}")]
    Degenerate(String),
    #[error("amplitude is not homogeneous of degree {degree} (residual {residual:.3e})")]
    Homogeneity { degree: f64, residual: f64 },
    #[error("excess {0} > 0 needs a compact fiber box")]
    MissingFiber(usize),
    #[error("fiber box has {got} axes, excess is {want}")]
    FiberDim { got: usize, want: usize },
    #[error("amplitude does not vanish on the fiber box boundary (max |a| = {0:.3e})")]
    FiberSupport(f64),
    #[error("fiber quadrature: {0}")]
    FiberQuadrature(String),
    #[error("fit: {0}")]
    Fit(String),
}

/// Declared top-order amplitude `a₀`, homogeneous of `degree` in the
/// frequency variables.
#[derive(Debug, Clone)]
pub struct Amplitude {
    expr: Expr,
    program: Program,
    ext: AAExtension,
    pub degree: f64,
}

impl Amplitude {
    pub fn new(expr: Expr, layout: &VarLayout, degree: f64) -> Result<Self, SymbolError> {
        let program = Program::compile(&expr, layout)?;
        Ok(Amplitude { ext: extend(&program, DEFAULT_K), expr, program, degree })
    }

    pub fn parse(src: &str, phi: &PhaseFunction, degree: f64) -> Result<Self, SymbolError> {
        Amplitude::new(crate::expr::parse(src)?, phi.layout(), degree)
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    /// `ã` at a complex point.
    pub fn value(&self, z: &[C64]) -> Result<C64, EvalError> {
        self.ext.eval(z)
    }

    /// `c·a`, same degree.
    pub fn scaled(&self, c: f64, layout: &VarLayout) -> Result<Self, SymbolError> {
        Amplitude::new(Expr::num(c) * self.expr.clone(), layout, self.degree)
    }

    /// Max relative defect of `a(x, 2θ) = 2^μ a(x, θ)` over the samples.
    pub fn homogeneity_residual(&self, freq: &[usize], samples: &[Vec<f64>]) -> Result<f64, EvalError> {
        let f = 2f64.powf(self.degree);
        let mut worst = 0.0f64;
        for s in samples {
            let mut q = s.clone();
            for &k in freq {
                q[k] *= 2.0;
            }
            let (lhs, rhs) = (self.program.eval_real(&q)?, f * self.program.eval_real(s)?);
            let scale = lhs.norm().max(rhs.norm());
            if scale > 0.0 {
                worst = worst.max((lhs - rhs).norm() / scale);
            }
        }
        Ok(worst)
    }

    pub fn validate(&self, phi: &PhaseFunction, samples: &[Vec<f64>]) -> Result<f64, SymbolError> {
        let residual = self.homogeneity_residual(phi.freq(), samples)?;
        if residual > HOMOGENEITY_TOL {
            return Err(SymbolError::Homogeneity { degree: self.degree, residual });
        }
        Ok(residual)
    }
}

/// `ψ(x) = ξ₀·(x − x₀) − ((λ + iκ)/2)|x − x₀|²` at a real point of the
/// critical set; κ = 0 unless a damped probe is asked for.
#[derive(Debug, Clone)]
pub struct AuxPsi {
    pub x0: Vec<f64>,
    pub xi0: Vec<f64>,
    pub lambda: f64,
    pub kappa: f64,
    /// Full real base point `(x₀, θ₀)`.
    pub base_point: Vec<f64>,
    pub expr: Expr,
    /// `φ − ψ` over φ's layout.
    f_expr: Expr,
    f_ext: AAExtension,
}

impl AuxPsi {
    /// `F = φ − ψ`.
    pub fn difference(&self) -> &Expr {
        &self.f_expr
    }

    pub fn difference_extension(&self) -> &AAExtension {
        &self.f_ext
    }

    /// Value of ψ at a real base point.
    pub fn value(&self, x: &[f64]) -> C64 {
        let c = 0.5 * C64::new(self.lambda, self.kappa);
        let mut v = C64::new(0.0, 0.0);
        for k in 0..x.len() {
            let d = x[k] - self.x0[k];
            v += self.xi0[k] * d - c * d * d;
        }
        v
    }
}

fn real_point(p: &[f64]) -> Vec<C64> {
    p.iter().map(|v| C64::new(*v, 0.0)).collect()
}

pub fn make_psi(phi: &PhaseFunction, cp: &CriticalPoint, lambda: f64) -> Result<AuxPsi, SymbolError> {
    make_psi_damped(phi, cp, lambda, 0.0)
}

/// ψ with concavity `λ + iκ`, `κ ≥ 0`: the probe `e^{-itψ}` then carries
/// the Gaussian factor `e^{-tκ|x−x₀|²/2}` and `Im(φ − ψ) ≥ 0` is kept.
pub fn make_psi_damped(phi: &PhaseFunction, cp: &CriticalPoint, lambda: f64, kappa: f64) -> Result<AuxPsi, SymbolError> {
    if !(kappa >= 0.0) {
        return Err(SymbolError::Lambda(kappa));
    }
    if !cp.real || cp.residual > CRITICAL_TOL {
        return Err(SymbolError::NotRealCritical(cp.residual));
    }
    if !(lambda > 0.0) {
        return Err(SymbolError::Lambda(lambda));
    }
    let base_point = cp.real_point();
    let grad = phi.gradient(&cp.point)?;
    let layout = phi.layout();
    let x0: Vec<f64> = phi.base().iter().map(|&k| base_point[k]).collect();
    // Λ_ℝ points carry real ξ; any rounding-level imaginary part is dropped.
    let xi0: Vec<f64> = phi.base().iter().map(|&k| grad[k].re).collect();
    let mut psi = Expr::num(0.0);
    for (j, &k) in phi.base().iter().enumerate() {
        let v = Expr::Var(layout.var_at(k).expect("base index inside layout"));
        let d = v - Expr::num(x0[j]);
        let c = if kappa == 0.0 { Expr::num(0.5 * lambda) } else { Expr::num(0.5 * lambda) + Expr::Imag * Expr::num(0.5 * kappa) };
        psi = psi + Expr::num(xi0[j]) * d.clone() - c * Expr::binary(crate::expr::BinOp::Pow, d, Expr::num(2.0));
    }
    let f_expr = phi.expr().clone() - psi.clone();
    let f_ext = extend(&Program::compile(&f_expr, layout)?, DEFAULT_K);
    let out = AuxPsi { x0, xi0, lambda, kappa, base_point, expr: psi, f_expr, f_ext };

    let active: Vec<usize> = phi.base().iter().chain(&cp.chart.equations).copied().collect();
    let j = out.f_ext.jet_at(&cp.point, &(0..phi.dim()).collect::<Vec<_>>(), 2)?;
    let g = j.gradient().iter().map(|v| v.norm()).fold(0.0, f64::max);
    if g > SETUP_TOL {
        return Err(SymbolError::Degenerate(format!("|∇F| = {g:.3e}")));
    }
    let h = j.hessian();
    let sub = DMatrix::from_fn(active.len(), active.len(), |r, c| h[(active[r], active[c])]);
    let d = det(&sub).norm();
    if d < SETUP_TOL {
        return Err(SymbolError::Degenerate(format!("|det ∂²F| = {d:.3e}")));
    }
    Ok(out)
}

/// `[det (1/i) ∂²_{(x,θ′)}(φ̃ − ψ̃)]^{-1/2}` on the homotopy branch.
#[derive(Debug, Clone, PartialEq)]
pub struct SqrtDPhi {
    pub point: Vec<C64>,
    /// Flat indices of the `(x, θ′)` block.
    pub active: Vec<usize>,
    /// `∂²(φ̃ − ψ̃)` on the block (the matrix is `(1/i)` times this).
    pub hessian: DMatrix<C64>,
    pub value: C64,
    /// `det (1/i)·hessian`.
    pub det: C64,
    /// `(N − e)/2`.
    pub grade: f64,
    pub branch: BranchedSqrt,
}

fn active_block(phi: &PhaseFunction, cls: &PhaseClassification) -> Vec<usize> {
    phi.base().iter().chain(&cls.theta_prime).copied().collect()
}

fn sqrt_dphi_at(f_ext: &AAExtension, point: &[C64], active: &[usize], grade: f64) -> Result<SqrtDPhi, SymbolError> {
    let hessian = f_ext.jet_at(point, active, 2)?.hessian();
    let branch = branched_inv_sqrt_det(&hessian)?;
    Ok(SqrtDPhi { point: point.to_vec(), active: active.to_vec(), value: branch.value, det: branch.det, hessian, grade, branch })
}

pub fn sqrt_dphi(phi: &PhaseFunction, cls: &PhaseClassification, cp: &CriticalPoint, psi: &AuxPsi) -> Result<SqrtDPhi, SymbolError> {
    let grade = (cls.big_n - cls.excess) as f64 / 2.0;
    sqrt_dphi_at(&psi.f_ext, &cp.point, &active_block(phi, cls), grade)
}

/// Box over the excess variables θ″ (in `cls.theta_second` order).
#[derive(Debug, Clone, PartialEq)]
pub struct FiberBox {
    pub intervals: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiberReport {
    pub nodes: Vec<usize>,
    pub change: f64,
    pub doublings: usize,
    /// Max |integrand amplitude| sampled on the box boundary.
    pub boundary_max: f64,
    /// Worst stationary residual of the per-node re-solve.
    pub max_resolve_residual: f64,
}

/// `∫ g(p) [det (1/i)∂²F̃(p)]^{-1/2} dθ″` over the fiber box, where `p`
/// re-solves `∂_{(x,θ′)}F̃ = 0` with θ″ held at each node. An empty box is a
/// point evaluation at the base.
pub fn fiber_integral<G>(
    f_ext: &AAExtension,
    base: &[C64],
    active: &[usize],
    second: &[usize],
    fiber: &FiberBox,
    integrand: &G,
) -> Result<(C64, FiberReport), SymbolError>
where
    G: Fn(&[C64]) -> Result<C64, EvalError> + Sync,
{
    if fiber.intervals.len() != second.len() {
        return Err(SymbolError::FiberDim { got: fiber.intervals.len(), want: second.len() });
    }
    let at = |nodes: &[f64]| -> Vec<C64> {
        let mut p = base.to_vec();
        for (k, &idx) in second.iter().enumerate() {
            p[idx] = C64::new(nodes[k], 0.0);
        }
        p
    };
    // Support check on the faces: 9 points per remaining axis.
    let mut boundary_max = 0.0f64;
    let e = second.len();
    for face in 0..e {
        for side in [fiber.intervals[face].0, fiber.intervals[face].1] {
            let count = 9usize.pow((e - 1) as u32);
            for mut code in 0..count {
                let mut q = vec![0.0; e];
                for (k, qk) in q.iter_mut().enumerate() {
                    if k == face {
                        *qk = side;
                        continue;
                    }
                    let (a, b) = fiber.intervals[k];
                    *qk = a + (b - a) * (code % 9) as f64 / 8.0;
                    code /= 9;
                }
                boundary_max = boundary_max.max(integrand(&at(&q))?.norm());
            }
        }
    }
    if boundary_max > SUPPORT_TOL {
        return Err(SymbolError::FiberSupport(boundary_max));
    }
    let worst = Mutex::new(0.0f64);
    let zeros = vec![C64::new(0.0, 0.0); active.len()];
    let f = |nodes: &[f64]| -> Result<C64, EvalError> {
        let template = at(nodes);
        let system = gradient_system(f_ext, &template, active, active, &zeros);
        let u0: Vec<C64> = active.iter().map(|&k| template[k]).collect();
        let res = newton(&system, u0, NewtonOptions::default()).map_err(|_| EvalError::Domain("fiber re-solve failed"))?;
        let mut p = template.clone();
        for (k, &idx) in active.iter().enumerate() {
            p[idx] = res.x[k];
        }
        {
            let mut w = worst.lock().expect("poisoned");
            *w = w.max(res.residual);
        }
        let g = integrand(&p)?;
        if g == C64::new(0.0, 0.0) {
            return Ok(g);
        }
        let h = f_ext.jet_at(&p, active, 2)?.hessian();
        let r = branched_inv_sqrt_det(&h).map_err(|_| EvalError::Domain("fiber branch left GL"))?;
        Ok(g * r.value)
    };
    let spec = QuadratureSpec {
        intervals: fiber.intervals.clone(),
        min_nodes: 16,
        rel_tol: FIBER_TOL,
        abs_tol: 1e-14,
        max_points: 4e6,
        damping_truncation: false,
        ..QuadratureSpec::new(vec![])
    };
    let v = integrate_adaptive(&f, &spec, &vec![16; e]).map_err(|err| match err {
        OracleError::Eval(e) => SymbolError::Eval(e),
        other => SymbolError::FiberQuadrature(other.to_string()),
    })?;
    let max_resolve_residual = *worst.lock().expect("poisoned");
    Ok((v.value, FiberReport { nodes: v.nodes, change: v.change, doublings: v.doublings, boundary_max, max_resolve_residual }))
}

/// σ(A) at the Λ-point of `cp`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolValue {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub value: C64,
    /// `μ + (N − e)/2 = m − e/2 + n/4`: grade of the integrand `ã₀√dφ`.
    pub grade: f64,
    /// Homogeneity degree of the fiber-integrated value, `grade + e`.
    pub section_degree: f64,
    /// Distribution order `m + e/2`, `m = μ − (n − 2N)/4`.
    pub order: f64,
    pub excess: usize,
    /// `ã₀` at the base point.
    pub amplitude_value: C64,
    pub sqrt_dphi: SqrtDPhi,
    pub fiber: Option<FiberReport>,
}

/// Grade bookkeeping from the amplitude degree `μ`.
pub fn grades(mu: f64, n: usize, big_n: usize, e: usize) -> (f64, f64, f64) {
    let (n, big_n, e) = (n as f64, big_n as f64, e as f64);
    let m = mu - (n - 2.0 * big_n) / 4.0;
    let grade = mu + (big_n - e) / 2.0;
    (grade, grade + e, m + e / 2.0)
}

pub fn principal_symbol(
    phi: &PhaseFunction,
    a: &Amplitude,
    cls: &PhaseClassification,
    cp: &CriticalPoint,
    psi: &AuxPsi,
    fiber: Option<&FiberBox>,
) -> Result<SymbolValue, SymbolError> {
    let e = cls.excess;
    if e > 0 && fiber.is_none() {
        return Err(SymbolError::MissingFiber(e));
    }
    let root = sqrt_dphi(phi, cls, cp, psi)?;
    let amplitude_value = a.value(&cp.point)?;
    let (value, report) = match fiber {
        None => (amplitude_value * root.value, None),
        Some(b) => {
            let integrand = |p: &[C64]| a.value(p);
            let (v, r) = fiber_integral(&psi.f_ext, &cp.point, &root.active, &cls.theta_second, b, &integrand)?;
            (v, Some(r))
        }
    };
    let (grade, section_degree, order) = grades(a.degree, cls.n, cls.big_n, e);
    Ok(SymbolValue {
        x: psi.x0.clone(),
        xi: psi.xi0.clone(),
        value,
        grade,
        section_degree,
        order,
        excess: e,
        amplitude_value,
        sqrt_dphi: root,
        fiber: report,
    })
}

/// Test data for the pairing `⟨A, e^{-itψ}u⟩`: `u` over the base, a cutoff
/// in the scaled frequencies `η = θ/t`, and the integration box.
#[derive(Debug, Clone, PartialEq)]
pub struct PairingTest {
    pub u: Expr,
    pub cutoff: Expr,
    pub boxes: Vec<(f64, f64)>,
}

impl PairingTest {
    /// `u = Π bump((x_k − x₀ₖ)/r_u)`; plateau cutoff of radius `r_η` around
    /// θ₀ in the θ′ directions; θ″ boxes from the fiber box.
    pub fn standard(
        phi: &PhaseFunction,
        cls: &PhaseClassification,
        cp: &CriticalPoint,
        r_u: f64,
        r_eta: f64,
        fiber: Option<&FiberBox>,
    ) -> PairingTest {
        let p = cp.real_point();
        let layout = phi.layout();
        let var = |k: usize| Expr::Var(layout.var_at(k).expect("index inside layout"));
        let mut u = Expr::num(1.0);
        let mut cutoff = Expr::num(1.0);
        let mut boxes = vec![(0.0, 0.0); phi.dim()];
        for &k in phi.base() {
            u = u * Expr::call(Func::Bump, (var(k) - Expr::num(p[k])) / Expr::num(r_u));
            boxes[k] = (p[k] - r_u, p[k] + r_u);
        }
        for &k in &cls.theta_prime {
            cutoff = cutoff * Expr::call(Func::Plateau, (var(k) - Expr::num(p[k])) / Expr::num(r_eta));
            boxes[k] = (p[k] - r_eta, p[k] + r_eta);
        }
        for (j, &k) in cls.theta_second.iter().enumerate() {
            boxes[k] = fiber.map_or((p[k] - r_eta, p[k] + r_eta), |b| b.intervals[j]);
        }
        PairingTest { u, cutoff, boxes }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairingSample {
    pub t: f64,
    pub oracle: C64,
    pub predicted: C64,
    pub rel_error: f64,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairingReport {
    pub symbol: SymbolValue,
    pub u_value: C64,
    /// `(2π)^{(n+N−e)/2} ũ(x₀) σ`.
    pub top_constant: C64,
    /// Exponent of `t` in the predicted top term: `N + μ − (n+N−e)/2`.
    pub predicted_exponent: f64,
    pub samples: Vec<PairingSample>,
    pub oracle_fit: Option<OrderFit>,
}

impl PairingReport {
    pub fn predicted(&self, t: f64) -> C64 {
        t.powf(self.predicted_exponent) * self.top_constant
    }

    /// Fitted oracle slope minus the predicted exponent.
    pub fn slope_difference(&self) -> Option<f64> {
        self.oracle_fit.as_ref().map(|f| f.slope - self.predicted_exponent)
    }
}

/// Top term of `⟨I(φ,a), e^{-itψ}u⟩` against a direct quadrature of
/// `t^{N+μ} ∫∫ e^{it(φ−ψ)(x,η)} a(x,η) u(x) χ(η) dx dη`.
#[allow(clippy::too_many_arguments)]
pub fn pairing_t(
    phi: &PhaseFunction,
    a: &Amplitude,
    cls: &PhaseClassification,
    cp: &CriticalPoint,
    psi: &AuxPsi,
    test: &PairingTest,
    fiber: Option<&FiberBox>,
    t_grid: &[f64],
    template: &QuadratureSpec,
) -> Result<PairingReport, SymbolError> {
    let symbol = principal_symbol(phi, a, cls, cp, psi, fiber)?;
    let layout = phi.layout();
    let u_value = Program::compile(&test.u, layout)?.eval(&cp.point)?;
    let (n, big_n, e) = (cls.n as f64, cls.big_n as f64, cls.excess as f64);
    let stationary_dim = n + big_n - e;
    let top_constant = (2.0 * PI).powf(stationary_dim / 2.0) * u_value * symbol.value;
    let n_freq = phi.freq().len() as f64;
    let prefactor = n_freq + a.degree;
    let predicted_exponent = prefactor - stationary_dim / 2.0;

    let phase = Program::compile(psi.difference(), layout)?;
    let amp = Program::compile(&(a.expr().clone() * test.u.clone() * test.cutoff.clone()), layout)?;
    let spec = QuadratureSpec { intervals: test.boxes.clone(), ..template.clone() };
    let mut samples = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let v = osc_integral(&phase, &amp, t, &spec)?;
        let oracle = t.powf(prefactor) * v.value;
        let predicted = t.powf(predicted_exponent) * top_constant;
        let rel_error = (oracle - predicted).norm() / predicted.norm();
        samples.push(PairingSample { t, oracle, predicted, rel_error, nodes: v.nodes });
    }
    let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (s.t, s.oracle.norm())).collect();
    let oracle_fit = match fit_order(&pairs, NOISE_FLOOR) {
        Ok(f) => Some(f),
        Err(OracleError::TooFewSamples(_)) => None,
        Err(err) => return Err(err.into()),
    };
    Ok(PairingReport { symbol, u_value, top_constant, predicted_exponent, samples, oracle_fit })
}

/// `|σ|` along the ray `(x₀, sθ₀)`, with `ψ` rebuilt at each scaled point
/// using concavity `sλ` and a fiber box scaled by `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneityReport {
    pub scales: Vec<f64>,
    pub values: Vec<C64>,
    /// Fitted log–log slope plus `n/2` (the coordinate factor of sections).
    pub fitted_degree: f64,
    pub predicted_degree: f64,
}

pub fn symbol_homogeneity(
    phi: &PhaseFunction,
    a: &Amplitude,
    cls: &PhaseClassification,
    cp: &CriticalPoint,
    lambda: f64,
    fiber: Option<&FiberBox>,
    scales: &[f64],
) -> Result<HomogeneityReport, SymbolError> {
    let mut values = Vec::with_capacity(scales.len());
    let mut predicted_degree = 0.0;
    for &s in scales {
        let mut p = cp.real_point();
        for &k in phi.freq() {
            p[k] *= s;
        }
        let scaled = CriticalPoint { point: real_point(&p), ..cp.clone() };
        let psi = make_psi(phi, &scaled, s * lambda)?;
        let b = fiber.map(|b| FiberBox { intervals: b.intervals.iter().map(|&(lo, hi)| (s * lo, s * hi)).collect() });
        let v = principal_symbol(phi, a, cls, &scaled, &psi, b.as_ref())?;
        predicted_degree = v.section_degree;
        values.push(v.value);
    }
    let mags: Vec<f64> = values.iter().map(|v| v.norm()).collect();
    let fit = fit_loglog(scales, &mags).ok_or_else(|| SymbolError::Fit("degenerate homogeneity fit".into()))?;
    Ok(HomogeneityReport { scales: scales.to_vec(), values, fitted_degree: fit.slope + cls.n as f64 / 2.0, predicted_degree })
}
