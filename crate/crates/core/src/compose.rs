//! Composition of two operator kernels.
//!
//! `Φ(x, z, ω) = φ₁(x, y, θ) + φ₂(y, z, σ)` in the chart
//! `ω = (y·|(θ,σ)|, θ, σ)`, the intersection excess, the composed order and
//! symbol, and a nested brute-force pairing that keeps the two factors
//! separate (`∫ P₁(y) P₂(y) dy`).

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::expr::{BinOp, EvalError, Expr, ExprError, Func, Program, Var, VarLayout};
use crate::linalg::{null_space, RANK_TOL};
use crate::oracle::{fit_order, gradient_bounds, tensor_rule, OracleError, OrderFit, QuadratureSpec, NOISE_FLOOR};
use crate::phase::{
    classify, Chart, validate_phase, CriticalPoint, Patch, PhaseClassification, PhaseError, PhaseFunction, PhaseValidation,
    CRITICAL_TOL, DEFAULT_K, EULER_TOL, IM_TOL,
};
use crate::symbol::{fiber_integral, principal_symbol, sqrt_dphi, Amplitude, AuxPsi, FiberBox, PairingSample, SymbolError, SymbolValue};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComposeError {
    #[error("y dimensions differ: first kernel has {first}, second has {second}")]
    Dimension { first: usize, second: usize },
    #[error("kernel in the wrong slot: {0}")]
    Slot(String),
    #[error("invalid kernel: {0}")]
    Kernel(String),
    #[error("Φ is not homogeneous of degree 1 in ω (Euler residual {0:.3e})")]
    Homogeneity(f64),
    #[error("intersection is not clean: ranks {0:?} across stationary points")]
    NotClean(Vec<usize>),
    #[error("tangent dimension {got} at a stationary point, expected {want}")]
    Tangent { got: usize, want: usize },
    #[error("found {found} real stationary points, wanted {wanted}")]
    Stationary { found: usize, wanted: usize },
    #[error("stationary seed did not converge to a real point (residual {0:.3e})")]
    NotReal(f64),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Phase(#[from] PhaseError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Which side of the composition a kernel sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// `φ₁(x, y, θ)`
    Left,
    /// `φ₂(y, z, σ)`
    Right,
}

impl Slot {
    pub fn groups(self) -> [&'static str; 3] {
        match self {
            Slot::Left => ["x", "y", "theta"],
            Slot::Right => ["y", "z", "sigma"],
        }
    }
}

/// Kernel `∫ e^{iφ} a dθ` of one factor.
#[derive(Debug, Clone)]
pub struct OperatorKernel {
    pub slot: Slot,
    pub phase: Expr,
    pub amplitude: Expr,
    /// Homogeneity degree μ of the amplitude.
    pub degree: f64,
    /// Sizes of the three groups, in slot order.
    pub dims: [usize; 3],
    pub validation: PhaseValidation,
}

impl OperatorKernel {
    /// Parses and validates: Euler identity, `Im φ ≥ 0` and amplitude
    /// homogeneity on patch samples.
    pub fn new(slot: Slot, phase: &str, amplitude: &str, degree: f64, dims: [usize; 3]) -> Result<Self, ComposeError> {
        let phase = crate::expr::parse(phase)?;
        let amplitude = crate::expr::parse(amplitude)?;
        let layout = kernel_layout(slot, dims);
        let phi = PhaseFunction::new(phase.clone(), layout.clone(), &slot.groups()[..2], &slot.groups()[2..], DEFAULT_K)?;
        let samples = phi.sample_points(16, 0);
        let validation = validate_phase(&phi, &samples)?;
        if validation.max_euler_residual > EULER_TOL {
            return Err(ComposeError::Kernel(format!("Euler residual {:.3e}", validation.max_euler_residual)));
        }
        if validation.min_im < -IM_TOL {
            return Err(ComposeError::Kernel(format!("Im φ = {:.3e} < 0", validation.min_im)));
        }
        Amplitude::new(amplitude.clone(), &layout, degree)?.validate(&phi, &samples)?;
        Ok(OperatorKernel { slot, phase, amplitude, degree, dims, validation })
    }

    pub fn layout(&self) -> VarLayout {
        kernel_layout(self.slot, self.dims)
    }

    /// `m = μ − (n − 2N)/4` with `n` the two base dimensions.
    pub fn order(&self) -> f64 {
        let n = (self.dims[0] + self.dims[1]) as f64;
        self.degree - (n - 2.0 * self.dims[2] as f64) / 4.0
    }

    pub fn n_y(&self) -> usize {
        match self.slot {
            Slot::Left => self.dims[1],
            Slot::Right => self.dims[0],
        }
    }
}

fn kernel_layout(slot: Slot, dims: [usize; 3]) -> VarLayout {
    let g = slot.groups();
    VarLayout::new().with(g[0], dims[0], false).with(g[1], dims[1], false).with(g[2], dims[2], true)
}

pub fn composed_order(m1: f64, m2: f64, e: usize) -> f64 {
    m1 + m2 + e as f64 / 2.0
}

/// Φ in the ω chart with the composed amplitude and its factors.
#[derive(Debug, Clone)]
pub struct CompositionPlan {
    /// Layout `x, z | y, θ, σ`; base `(x, z)`, fiber and frequencies ω.
    pub phi: PhaseFunction,
    /// `b = a₁ a₂ ρ^{-n_Y}`, `ρ = |(θ, σ)|`.
    pub amplitude: Amplitude,
    left: Amplitude,
    right: Amplitude,
    weight: Amplitude,
    pub n_x: usize,
    pub n_y: usize,
    pub n_z: usize,
    pub n_theta: usize,
    pub n_sigma: usize,
    pub orders: (f64, f64),
    pub validation: PhaseValidation,
}

fn pow(e: Expr, p: f64) -> Expr {
    Expr::binary(BinOp::Pow, e, Expr::num(p))
}

pub fn build_composed_phase(k1: &OperatorKernel, k2: &OperatorKernel) -> Result<CompositionPlan, ComposeError> {
    if k1.slot != Slot::Left || k2.slot != Slot::Right {
        return Err(ComposeError::Slot("expected (x, y, theta) then (y, z, sigma)".into()));
    }
    let (n_y1, n_y2) = (k1.n_y(), k2.n_y());
    if n_y1 != n_y2 {
        return Err(ComposeError::Dimension { first: n_y1, second: n_y2 });
    }
    let (n_x, n_y, n_z, n_theta, n_sigma) = (k1.dims[0], n_y1, k2.dims[1], k1.dims[2], k2.dims[2]);
    let layout = VarLayout::new()
        .with("x", n_x, false)
        .with("z", n_z, false)
        .with("y", n_y, true)
        .with("theta", n_theta, true)
        .with("sigma", n_sigma, true);
    let rho = Expr::norm_of_groups(&["theta", "sigma"]);
    // y = ω_y / ρ.
    let to_omega = |e: &Expr, from: &VarLayout| {
        e.substitute(from, &|v: &Var| (v.group == "y").then(|| Expr::Var(v.clone()) / rho.clone()))
    };
    let phi1 = to_omega(&k1.phase, &k1.layout());
    let phi2 = to_omega(&k2.phase, &k2.layout());
    let a1 = to_omega(&k1.amplitude, &k1.layout());
    let a2 = to_omega(&k2.amplitude, &k2.layout());

    let mut phi = PhaseFunction::new(phi1 + phi2, layout.clone(), &["x", "z"], &["y", "theta", "sigma"], DEFAULT_K)?;
    let d = layout.dim();
    let mut center = vec![0.0; d];
    center[layout.range("theta").expect("theta group").start] = 1.0;
    center[layout.range("sigma").expect("sigma group").start] = 1.0;
    phi = phi.with_patch(Patch { center, radius: vec![1.0; d], cone_angle: 0.3, radial: (0.5, 2.0) });
    let samples = phi.sample_points(32, 0);
    let validation = validate_phase(&phi, &samples)?;
    if validation.max_euler_residual > EULER_TOL {
        return Err(ComposeError::Homogeneity(validation.max_euler_residual));
    }

    let weight_expr = Expr::num(1.0) / pow(rho, n_y as f64);
    let left = Amplitude::new(a1.clone(), &layout, k1.degree)?;
    let right = Amplitude::new(a2.clone(), &layout, k2.degree)?;
    let weight = Amplitude::new(weight_expr.clone(), &layout, -(n_y as f64))?;
    let amplitude = Amplitude::new(a1 * a2 * weight_expr, &layout, k1.degree + k2.degree - n_y as f64)?;
    amplitude.validate(&phi, &samples)?;
    Ok(CompositionPlan {
        phi,
        amplitude,
        left,
        right,
        weight,
        n_x,
        n_y,
        n_z,
        n_theta,
        n_sigma,
        orders: (k1.order(), k2.order()),
        validation,
    })
}

impl CompositionPlan {
    /// `(x, z, y, θ, σ)` in original coordinates to the ω chart.
    pub fn to_omega(&self, p: &[f64]) -> Vec<f64> {
        let mut q = p.to_vec();
        let r = self.rho(p);
        for k in self.y_indices() {
            q[k] *= r;
        }
        q
    }

    /// `ρ = |(θ, σ)|` at a point of either chart.
    pub fn rho(&self, p: &[f64]) -> f64 {
        let start = self.n_x + self.n_z + self.n_y;
        p[start..].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn y_indices(&self) -> std::ops::Range<usize> {
        let s = self.n_x + self.n_z;
        s..s + self.n_y
    }

    pub fn omega_dim(&self) -> usize {
        self.n_y + self.n_theta + self.n_sigma
    }

    /// `a₁·a₂·ρ^{-n_Y}` from the three separately extended factors.
    pub fn factored_amplitude(&self, p: &[C64]) -> Result<C64, EvalError> {
        let a = self.left.value(p)?;
        if a == C64::new(0.0, 0.0) {
            return Ok(a);
        }
        Ok(a * self.right.value(p)? * self.weight.value(p)?)
    }

    /// Stationary point of Φ from a seed given in original coordinates.
    pub fn stationary_point(&self, seed: &[f64]) -> Result<CriticalPoint, ComposeError> {
        let w: Vec<C64> = self.to_omega(seed).iter().map(|v| C64::new(*v, 0.0)).collect();
        let cp = solve_stationary(&self.phi, &w)?;
        if !cp.real || cp.residual > CRITICAL_TOL {
            return Err(ComposeError::NotReal(cp.residual));
        }
        Ok(cp)
    }

    /// Real stationary points reached from patch samples.
    pub fn stationary_points(&self, count: usize, seed: u64) -> Result<Vec<CriticalPoint>, ComposeError> {
        let mut out = Vec::new();
        for s in self.phi.sample_points(8 * count, seed) {
            let w: Vec<C64> = s.iter().map(|v| C64::new(*v, 0.0)).collect();
            if let Ok(cp) = solve_stationary(&self.phi, &w) {
                if cp.real && cp.residual <= CRITICAL_TOL && self.rho(&cp.real_point()) > 0.0 {
                    out.push(cp);
                }
            }
            if out.len() == count {
                return Ok(out);
            }
        }
        Err(ComposeError::Stationary { found: out.len(), wanted: count })
    }
}

const GAUSS_NEWTON_ITER: usize = 60;

/// `∂_ωΦ = 0` by minimum-norm Gauss–Newton steps (SVD pseudo-inverse) in
/// all variables. Unlike a square chart chosen at the seed, this converges
/// when the rank of `d(∂_ωΦ)` drops on the critical set (clean phases).
fn solve_stationary(phi: &PhaseFunction, seed: &[C64]) -> Result<CriticalPoint, ComposeError> {
    let fiber = phi.fiber().to_vec();
    let residual_at = |p: &[C64]| -> Result<(DVector<C64>, f64), EvalError> {
        let g = phi.gradient(p)?;
        let f = DVector::from_fn(fiber.len(), |k, _| g[fiber[k]]);
        let r = f.iter().map(|z| z.norm()).fold(0.0, f64::max);
        Ok((f, r))
    };
    let mut p = seed.to_vec();
    let (mut f, mut r) = residual_at(&p)?;
    let mut iterations = 0;
    while r > 1e-13 && iterations < GAUSS_NEWTON_ITER {
        let jac = phi.fiber_differentials(&p)?;
        let svd = jac.svd(true, true);
        let top = svd.singular_values.iter().copied().fold(0.0, f64::max);
        let step = svd.solve(&f, RANK_TOL * top).map_err(EvalError::Domain)?;
        // Halve until the residual decreases.
        let mut lambda = 1.0;
        loop {
            let q: Vec<C64> = p.iter().zip(step.iter()).map(|(a, d)| a - d * lambda).collect();
            let (fq, rq) = residual_at(&q)?;
            if rq < r || lambda < 1e-4 {
                (p, f, r) = (q, fq, rq);
                break;
            }
            lambda *= 0.5;
        }
        iterations += 1;
    }
    let mut real = false;
    if p.iter().all(|z| z.im.abs() <= 1e-10) {
        let snapped: Vec<C64> = p.iter().map(|z| C64::new(z.re, 0.0)).collect();
        let (_, rs) = residual_at(&snapped)?;
        if rs <= 1e-11 {
            (p, r, real) = (snapped, rs, true);
        }
    }
    let chart = Chart::auto(phi, &p)?;
    Ok(CriticalPoint { point: p, residual: r, real, iterations, chart })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcessReport {
    pub excess: usize,
    pub omega_dim: usize,
    pub ranks: Vec<usize>,
    /// `dim ker d(∂_ωΦ)` at each point.
    pub tangent_dims: Vec<usize>,
    /// `n_X + n_Z + e`.
    pub expected_tangent_dim: usize,
    pub classification: PhaseClassification,
}

/// `e = #ω − rank d(∂Φ/∂ω)`, required stable across the points.
pub fn intersection_excess(plan: &CompositionPlan, points: &[Vec<f64>]) -> Result<ExcessReport, ComposeError> {
    let cls = classify(&plan.phi, points)?;
    if cls.ranks.iter().any(|&r| r != cls.m) {
        return Err(ComposeError::NotClean(cls.ranks));
    }
    let expected = plan.n_x + plan.n_z + cls.excess;
    let mut tangent_dims = Vec::with_capacity(points.len());
    for p in points {
        let z: Vec<C64> = p.iter().map(|v| C64::new(*v, 0.0)).collect();
        let got = null_space(&plan.phi.fiber_differentials(&z)?, RANK_TOL).ncols();
        if got != expected {
            return Err(ComposeError::Tangent { got, want: expected });
        }
        tangent_dims.push(got);
    }
    Ok(ExcessReport {
        excess: cls.excess,
        omega_dim: plan.omega_dim(),
        ranks: cls.ranks.clone(),
        tangent_dims,
        expected_tangent_dim: expected,
        classification: cls,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedSymbol {
    /// σ(B); for e > 0 the fiber integral in `dy″ dθ″ dσ″`.
    pub symbol: SymbolValue,
    /// The same integral in `dω″`, the measure of the single-phase pairing.
    pub value_omega: C64,
    /// `ρ(γ)^{|y″|}`, the factor `dω″ = ρ^{|y″|} dy″` at γ.
    pub jacobian: f64,
    /// `principal_symbol` on `(Φ, b)` as one Lagrangian distribution (`dω″`).
    pub direct: C64,
    /// Relative difference between the two code paths.
    pub cross_check: f64,
}

/// σ(B) at γ. `fiber` is a box in the excess variables of `cls` expressed
/// in `(y″, θ″, σ″)`; `None` is the point formula (e = 0 only).
pub fn composed_symbol(
    plan: &CompositionPlan,
    cls: &PhaseClassification,
    cp: &CriticalPoint,
    psi: &AuxPsi,
    fiber: Option<&FiberBox>,
) -> Result<ComposedSymbol, ComposeError> {
    let e = cls.excess;
    if e > 0 && fiber.is_none() {
        return Err(SymbolError::MissingFiber(e).into());
    }
    let p0 = cp.real_point();
    let rho0 = plan.rho(&p0);
    let ys = plan.y_indices();
    let n_excess_y = cls.theta_second.iter().filter(|k| ys.contains(k)).count();
    let jacobian = rho0.powi(n_excess_y as i32);
    let omega_box = fiber.map(|b| FiberBox {
        intervals: b
            .intervals
            .iter()
            .zip(&cls.theta_second)
            .map(|(&(lo, hi), k)| if ys.contains(k) { (lo * rho0, hi * rho0) } else { (lo, hi) })
            .collect(),
    });

    let root = sqrt_dphi(&plan.phi, cls, cp, psi)?;
    let integrand = |p: &[C64]| plan.factored_amplitude(p);
    let (value_omega, report) = match &omega_box {
        None => (integrand(&cp.point)? * root.value, None),
        Some(b) => {
            let (v, r) = fiber_integral(psi.difference_extension(), &cp.point, &root.active, &cls.theta_second, b, &integrand)?;
            (v, Some(r))
        }
    };
    let mut symbol = principal_symbol(&plan.phi, &plan.amplitude, cls, cp, psi, omega_box.as_ref())?;
    let direct = symbol.value;
    let scale = direct.norm().max(value_omega.norm());
    let cross_check = if scale == 0.0 { 0.0 } else { (direct - value_omega).norm() / scale };
    symbol.value = value_omega / jacobian;
    symbol.amplitude_value = integrand(&cp.point)?;
    symbol.fiber = report;
    Ok(ComposedSymbol { symbol, value_omega, jacobian, direct, cross_check })
}

/// One factor `y ↦ ∫ e^{itφ(p)} g(p) dv` of a nested pairing, `v` the
/// non-y variables of the kernel layout.
#[derive(Debug, Clone)]
pub struct NestedFactor {
    pub phase: Program,
    pub amp: Program,
    pub y: Vec<usize>,
    pub inner: Vec<usize>,
    pub inner_box: Vec<(f64, f64)>,
}

impl NestedFactor {
    fn value(&self, y: &[f64], t: f64, nodes: &[usize], panel: usize) -> Result<C64, EvalError> {
        let d = self.phase.dim();
        let it = C64::new(0.0, t);
        thread_local! {
            static POINT: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
        }
        let g = |v: &[f64]| -> Result<C64, EvalError> {
            POINT.with(|cell| {
                let mut p = cell.borrow_mut();
                p.clear();
                p.resize(d, 0.0);
                for (j, &k) in self.y.iter().enumerate() {
                    p[k] = y[j];
                }
                for (j, &k) in self.inner.iter().enumerate() {
                    p[k] = v[j];
                }
                let a = self.amp.eval_real(&p)?;
                if a == C64::new(0.0, 0.0) {
                    return Ok(a);
                }
                Ok(a * (it * self.phase.eval_real(&p)?).exp())
            })
        };
        tensor_rule(&g, &self.inner_box, nodes, panel)
    }

    /// Oscillation budget `c·t·L·G` on the inner axes.
    fn start(&self, y_box: &[(f64, f64)], t: f64, spec: &QuadratureSpec) -> Result<Vec<usize>, EvalError> {
        let d = self.phase.dim();
        let mut full = vec![(0.0, 0.0); d];
        for (j, &k) in self.y.iter().enumerate() {
            full[k] = y_box[j];
        }
        for (j, &k) in self.inner.iter().enumerate() {
            full[k] = self.inner_box[j];
        }
        let g = gradient_bounds(&self.phase, &full, if d <= 2 { 64 } else { 12 })?;
        Ok(self
            .inner
            .iter()
            .map(|&k| {
                let (a, b) = full[k];
                ((spec.c * t * (b - a) * g[k]).ceil() as usize).max(spec.min_nodes).div_ceil(spec.panel_nodes) * spec.panel_nodes
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedValue {
    pub value: C64,
    pub outer_nodes: Vec<usize>,
    pub inner_nodes: [Vec<usize>; 2],
    pub change: f64,
    pub doublings: usize,
}

/// `∫ P₁(y) P₂(y) dy` over `spec.intervals` (the y box). Axes are refined
/// one at a time: each is doubled as a check and the doubling kept only if
/// the total moved by more than the tolerance; passes repeat until one
/// keeps nothing. The outer axes start at `min_nodes` since `P₁P₂` has no
/// explicit phase. `change` is the largest accepted check difference.
pub fn nested_pairing(left: &NestedFactor, right: &NestedFactor, t: f64, spec: &QuadratureSpec) -> Result<NestedValue, OracleError> {
    let p = spec.panel_nodes;
    let outer: Vec<usize> = vec![spec.min_nodes.div_ceil(p) * p; spec.dim()];
    let (in1, in2) = (left.start(&spec.intervals, t, spec)?, right.start(&spec.intervals, t, spec)?);
    let (n_out, n1) = (outer.len(), in1.len());
    let mut nodes: Vec<usize> = outer.into_iter().chain(in1).chain(in2).collect();
    let count = |v: &[usize]| v.iter().map(|&n| n as f64).product::<f64>();
    let level = |nodes: &[usize]| -> Result<C64, OracleError> {
        let (outer, rest) = nodes.split_at(n_out);
        let (in1, in2) = rest.split_at(n1);
        let points = count(outer) * (count(in1) + count(in2));
        if points > spec.max_points {
            return Err(OracleError::BudgetExceeded { points, change: f64::INFINITY });
        }
        let f = |y: &[f64]| -> Result<C64, EvalError> {
            let a = left.value(y, t, in1, p)?;
            if a == C64::new(0.0, 0.0) {
                return Ok(a);
            }
            Ok(a * right.value(y, t, in2, p)?)
        };
        Ok(tensor_rule(&f, &spec.intervals, outer, p)?)
    };
    let mut value = level(&nodes)?;
    let mut doublings = 0;
    let mut change: f64 = 0.0;
    loop {
        let mut kept = false;
        for k in 0..nodes.len() {
            loop {
                let mut trial = nodes.clone();
                trial[k] *= 2;
                let next = level(&trial)?;
                let diff = (next - value).norm();
                if diff <= spec.rel_tol * next.norm() || diff <= spec.abs_tol {
                    change = change.max(diff);
                    break;
                }
                (nodes, value) = (trial, next);
                doublings += 1;
                kept = true;
            }
        }
        if !kept {
            let inner_nodes = [nodes[n_out..n_out + n1].to_vec(), nodes[n_out + n1..].to_vec()];
            nodes.truncate(n_out);
            return Ok(NestedValue { value, outer_nodes: nodes, inner_nodes, change, doublings });
        }
    }
}

/// Probe and input for `⟨A₁A₂f, g⟩` with frequencies tapered by
/// `plateau(|θ|/R)`, `plateau(|σ|/R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPair {
    /// `g(x)`.
    pub probe: Expr,
    /// `f(z)`.
    pub input: Expr,
    pub x_box: Vec<(f64, f64)>,
    pub z_box: Vec<(f64, f64)>,
    pub y_box: Vec<(f64, f64)>,
    pub radius: f64,
}

fn tapered_factor(k: &OperatorKernel, weight: &Expr, own_box: &[(f64, f64)], radius: f64) -> Result<NestedFactor, ComposeError> {
    let layout = k.layout();
    let [g0, g1, g2] = k.slot.groups();
    let (own, y) = match k.slot {
        Slot::Left => (g0, g1),
        Slot::Right => (g1, g0),
    };
    let taper = Expr::call(Func::Plateau, Expr::norm_of_groups(&[g2]) / Expr::num(radius));
    let amp = Program::compile(&(k.amplitude.clone() * weight.clone() * taper), &layout)?;
    let inner: Vec<usize> = layout.range(own).expect("own group").chain(layout.range(g2).expect("frequency group")).collect();
    let mut inner_box = own_box.to_vec();
    inner_box.extend(std::iter::repeat_n((-radius, radius), k.dims[2]));
    Ok(NestedFactor {
        phase: Program::compile(&k.phase, &layout)?,
        amp,
        y: layout.range(y).expect("y group").collect(),
        inner,
        inner_box,
    })
}

/// `⟨A₁A₂f, g⟩ = ∫ P₁(y)P₂(y) dy` with `P₁(y) = ∫∫ g(x) e^{iφ₁} a₁ dx dθ`
/// and `P₂(y) = ∫∫ e^{iφ₂} a₂ f(z) dz dσ`.
pub fn compose_kernels_oracle(
    k1: &OperatorKernel,
    k2: &OperatorKernel,
    pair: &TestPair,
    template: &QuadratureSpec,
) -> Result<NestedValue, ComposeError> {
    if k1.n_y() != k2.n_y() {
        return Err(ComposeError::Dimension { first: k1.n_y(), second: k2.n_y() });
    }
    let left = tapered_factor(k1, &pair.probe, &pair.x_box, pair.radius)?;
    let right = tapered_factor(k2, &pair.input, &pair.z_box, pair.radius)?;
    let spec = QuadratureSpec { intervals: pair.y_box.clone(), ..template.clone() };
    Ok(nested_pairing(&left, &right, 1.0, &spec)?)
}

/// Localization of the composed pairing `⟨B, e^{-itψ}u⟩` around γ.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedPairingTest {
    /// Support radius of `u₁(x)`, `u₂(z)`: plateaus, flat near γ, so the
    /// subleading terms of the pairing come from the phase and `a` only.
    pub u_radius: f64,
    /// Plateau radius of the scaled-frequency cutoffs.
    pub eta_radius: f64,
    /// Half-width of the y box for non-excess y (the kernels' amplitudes
    /// must vanish outside it).
    pub y_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedPairingReport {
    pub symbol: ComposedSymbol,
    pub u_value: C64,
    pub top_constant: C64,
    pub predicted_exponent: f64,
    pub samples: Vec<PairingSample>,
    pub oracle_fit: Option<OrderFit>,
    /// Fitted slope plus `(n_X + n_Z)/4`.
    pub fitted_order: Option<f64>,
    /// `m₁ + m₂ + e/2`.
    pub predicted_order: f64,
}

/// `⟨B, e^{-itψ}u⟩` by nested quadrature in the original coordinates
/// (`θ = tη`, `σ = tς`), against the top term built from σ(B) in `dω″`.
#[allow(clippy::too_many_arguments)]
pub fn composed_pairing(
    plan: &CompositionPlan,
    k1: &OperatorKernel,
    k2: &OperatorKernel,
    cls: &PhaseClassification,
    cp: &CriticalPoint,
    psi: &AuxPsi,
    fiber: Option<&FiberBox>,
    test: &ComposedPairingTest,
    t_grid: &[f64],
    template: &QuadratureSpec,
) -> Result<ComposedPairingReport, ComposeError> {
    let symbol = composed_symbol(plan, cls, cp, psi, fiber)?;
    let w = cp.real_point();
    let rho0 = plan.rho(&w);
    let (nx, nz, ny) = (plan.n_x, plan.n_z, plan.n_y);
    let x0 = &w[..nx];
    let z0 = &w[nx..nx + nz];
    let y0: Vec<f64> = w[nx + nz..nx + nz + ny].iter().map(|v| v / rho0).collect();
    let theta0 = &w[nx + nz + ny..nx + nz + ny + plan.n_theta];
    let sigma0 = &w[nx + nz + ny + plan.n_theta..];

    // Boxes and cutoffs; excess directions take the fiber box and no cutoff.
    let second = |k: usize| cls.theta_second.iter().position(|&s| s == k).map(|j| fiber.expect("fiber box for e > 0").intervals[j]);
    let ys = plan.y_indices();
    let y_box: Vec<(f64, f64)> =
        (0..ny).map(|j| second(ys.start + j).unwrap_or((y0[j] - test.y_radius, y0[j] + test.y_radius))).collect();

    let factor = |k: &OperatorKernel, own0: &[f64], xi0: &[f64], freq0: &[f64], freq_start: usize| -> Result<NestedFactor, ComposeError> {
        let layout = k.layout();
        let [g0, g1, g2] = k.slot.groups();
        let (own, y) = match k.slot {
            Slot::Left => (g0, g1),
            Slot::Right => (g1, g0),
        };
        let mut psi_e = Expr::num(0.0);
        let mut u = Expr::num(1.0);
        let mut inner_box = Vec::new();
        for j in 0..own0.len() {
            let d = Expr::var(own, j + 1) - Expr::num(own0[j]);
            let c = Expr::num(0.5 * psi.lambda) + Expr::Imag * Expr::num(0.5 * psi.kappa);
            psi_e = psi_e + Expr::num(xi0[j]) * d.clone() - c * pow(d.clone(), 2.0);
            u = u * Expr::call(Func::Plateau, d / Expr::num(test.u_radius));
            inner_box.push((own0[j] - test.u_radius, own0[j] + test.u_radius));
        }
        let mut cutoff = Expr::num(1.0);
        for j in 0..freq0.len() {
            match second(freq_start + j) {
                Some(b) => inner_box.push(b),
                None => {
                    let d = Expr::var(g2, j + 1) - Expr::num(freq0[j]);
                    cutoff = cutoff * Expr::call(Func::Plateau, d / Expr::num(test.eta_radius));
                    inner_box.push((freq0[j] - test.eta_radius, freq0[j] + test.eta_radius));
                }
            }
        }
        Ok(NestedFactor {
            phase: Program::compile(&(k.phase.clone() - psi_e), &layout)?,
            amp: Program::compile(&(k.amplitude.clone() * u * cutoff), &layout)?,
            y: layout.range(y).expect("y group").collect(),
            inner: layout.range(own).expect("own group").chain(layout.range(g2).expect("frequency group")).collect(),
            inner_box,
        })
    };
    let theta_start = nx + nz + ny;
    let left = factor(k1, x0, &psi.xi0[..nx], theta0, theta_start)?;
    let right = factor(k2, z0, &psi.xi0[nx..], sigma0, theta_start + plan.n_theta)?;

    let u_value = C64::new(1.0, 0.0);
    let (n, big_n, e) = ((nx + nz) as f64, plan.omega_dim() as f64, cls.excess as f64);
    let stationary_dim = n + big_n - e;
    let top_constant = (2.0 * PI).powf(stationary_dim / 2.0) * u_value * symbol.value_omega;
    let prefactor = (plan.n_theta + plan.n_sigma) as f64 + k1.degree + k2.degree;
    let predicted_exponent = prefactor - stationary_dim / 2.0;

    let spec = QuadratureSpec { intervals: y_box, ..template.clone() };
    let mut samples = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let v = nested_pairing(&left, &right, t, &spec)?;
        let oracle = t.powf(prefactor) * v.value;
        let predicted = t.powf(predicted_exponent) * top_constant;
        let rel_error = (oracle - predicted).norm() / predicted.norm();
        let mut nodes = v.outer_nodes.clone();
        nodes.extend(&v.inner_nodes[0]);
        nodes.extend(&v.inner_nodes[1]);
        samples.push(PairingSample { t, oracle, predicted, rel_error, nodes });
    }
    let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (s.t, s.oracle.norm())).collect();
    let oracle_fit = match fit_order(&pairs, NOISE_FLOOR) {
        Ok(f) => Some(f),
        Err(OracleError::TooFewSamples(_)) => None,
        Err(err) => return Err(err.into()),
    };
    let fitted_order = oracle_fit.as_ref().map(|f| f.slope + n / 4.0);
    let predicted_order = composed_order(plan.orders.0, plan.orders.1, cls.excess);
    Ok(ComposedPairingReport { symbol, u_value, top_constant, predicted_exponent, samples, oracle_fit, fitted_order, predicted_order })
}
