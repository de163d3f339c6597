//! Complex stationary phase: the critical manifold `z = Z(w)`, the leading
//! term `t^{-n/2} e^{itF̃(Z,w)} C₀ ũ(Z)` and an empirical remainder order.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::almost_analytic::{extend, AAExtension};
use crate::branch::{branched_inv_sqrt_det, BranchError, BranchedSqrt};
use crate::expr::{parse, EvalError, Expr, ExprError, Program, VarLayout};
use crate::jets::jet_of;
use crate::linalg::det;
use crate::newton::{newton, NewtonError, NewtonOptions};
use crate::oracle::{fit_order, osc_integral, OracleError, OracleValue, OrderFit, QuadratureSpec, NOISE_FLOOR};
use crate::phase::{gradient_system, DEFAULT_K};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SPError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Newton(#[from] NewtonError),
    #[error(transparent)]
    Branch(#[from] BranchError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("setup: {0}")]
    Setup(String),
}

/// `∫ e^{itF(x,w)} u(x) dx` near a non-degenerate critical point.
#[derive(Debug, Clone)]
pub struct SPProblem {
    layout: VarLayout,
    f_expr: Expr,
    u_expr: Expr,
    f_ext: AAExtension,
    u_ext: AAExtension,
    var_groups: Vec<String>,
    param_groups: Vec<String>,
    vars: Vec<usize>,
    params: Vec<usize>,
    /// Real critical point at the reference parameters (full layout).
    pub seed: Vec<f64>,
    /// Quadrature box per integration variable.
    pub bounds: Vec<(f64, f64)>,
}

fn group_indices(layout: &VarLayout, groups: &[String]) -> Result<Vec<usize>, SPError> {
    let mut out = Vec::new();
    for g in groups {
        out.extend(layout.range(g).ok_or_else(|| SPError::Setup(format!("missing group `{g}`")))?);
    }
    Ok(out)
}

pub const SETUP_TOL: f64 = 1e-10;

impl SPProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        f: Expr,
        u: Expr,
        layout: VarLayout,
        var_groups: &[&str],
        param_groups: &[&str],
        seed: Vec<f64>,
        bounds: Vec<(f64, f64)>,
        k: usize,
    ) -> Result<Self, SPError> {
        let var_groups: Vec<String> = var_groups.iter().map(|s| s.to_string()).collect();
        let param_groups: Vec<String> = param_groups.iter().map(|s| s.to_string()).collect();
        let vars = group_indices(&layout, &var_groups)?;
        let params = group_indices(&layout, &param_groups)?;
        if vars.len() + params.len() != layout.dim() {
            return Err(SPError::Setup("every layout group must be a variable or a parameter group".into()));
        }
        if seed.len() != layout.dim() || bounds.len() != vars.len() {
            return Err(SPError::Setup("seed/bounds dimension mismatch".into()));
        }
        let fp = Program::compile(&f, &layout)?;
        let up = Program::compile(&u, &layout)?;
        let p = SPProblem {
            f_ext: extend(&fp, k),
            u_ext: extend(&up, k),
            layout,
            f_expr: f,
            u_expr: u,
            var_groups,
            param_groups,
            vars,
            params,
            seed,
            bounds,
        };
        let z: Vec<C64> = p.seed.iter().map(|v| C64::new(*v, 0.0)).collect();
        let j = jet_of(&fp, &z, &p.vars, 2)?;
        let g = j.gradient().iter().map(|v| v.norm()).fold(0.0, f64::max);
        if g > SETUP_TOL {
            return Err(SPError::Setup(format!("∂_x F = {g:.3e} at the seed, not critical")));
        }
        let dh = det(&j.hessian()).norm();
        if dh < SETUP_TOL {
            return Err(SPError::Setup(format!("det ∂²_x F = {dh:.3e} at the seed, degenerate")));
        }
        Ok(p)
    }

    /// `F(x)`, `u(x)` in `x ∈ ℝⁿ`, critical point at 0, box `[-r, r]ⁿ`.
    pub fn simple(f: &str, u: &str, n: usize, r: f64) -> Result<Self, SPError> {
        let layout = VarLayout::new().with("x", n, false);
        SPProblem::new(parse(f)?, parse(u)?, layout, &["x"], &[], vec![0.0; n], vec![(-r, r); n], DEFAULT_K)
    }

    pub fn n(&self) -> usize {
        self.vars.len()
    }

    pub fn phase_expr(&self) -> &Expr {
        &self.f_expr
    }

    pub fn amplitude_expr(&self) -> &Expr {
        &self.u_expr
    }

    fn point(&self, w: &[f64]) -> Result<Vec<C64>, SPError> {
        if w.len() != self.params.len() {
            return Err(SPError::Setup(format!("expected {} parameters, got {}", self.params.len(), w.len())));
        }
        let mut p: Vec<C64> = self.seed.iter().map(|v| C64::new(*v, 0.0)).collect();
        for (k, &idx) in self.params.iter().enumerate() {
            p[idx] = C64::new(w[k], 0.0);
        }
        Ok(p)
    }

    /// Phase and amplitude with parameters frozen at `w`, over the variables only.
    pub fn reduced(&self, w: &[f64]) -> Result<(Program, Program), SPError> {
        let p = self.point(w)?;
        let mut layout = VarLayout::new();
        for g in &self.var_groups {
            let grp = self.layout.group(g).expect("validated");
            layout = layout.with(g, grp.size, grp.frequency);
        }
        let map = |v: &crate::expr::Var| -> Option<Expr> {
            if self.param_groups.contains(&v.group) {
                self.layout.index_of(v).map(|k| Expr::num(p[k].re))
            } else {
                None
            }
        };
        let f = self.f_expr.substitute(&self.layout, &map);
        let u = self.u_expr.substitute(&self.layout, &map);
        Ok((Program::compile(&f, &layout)?, Program::compile(&u, &layout)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalManifoldPoint {
    pub w: Vec<f64>,
    /// Full-layout point `(Z(w), w)`.
    pub point: Vec<C64>,
    pub z: Vec<C64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Complex Newton on `∂_z F̃(z, w) = 0` from the real seed.
pub fn critical_manifold(problem: &SPProblem, w: &[f64]) -> Result<CriticalManifoldPoint, SPError> {
    let template = problem.point(w)?;
    let zeros = vec![C64::new(0.0, 0.0); problem.vars.len()];
    let system = gradient_system(&problem.f_ext, &template, &problem.vars, &problem.vars, &zeros);
    let u0: Vec<C64> = problem.vars.iter().map(|&k| template[k]).collect();
    let res = newton(&system, u0, NewtonOptions::default())?;
    drop(system);
    let mut point = template;
    for (k, &idx) in problem.vars.iter().enumerate() {
        point[idx] = res.x[k];
    }
    Ok(CriticalManifoldPoint { w: w.to_vec(), point, z: res.x, residual: res.residual, iterations: res.iterations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SPExpansion {
    pub critical: CriticalManifoldPoint,
    /// `F̃(Z(w), w)`.
    pub phase_value: C64,
    pub hessian: DMatrix<C64>,
    pub branch: BranchedSqrt,
    /// `(2π)^{n/2} [det (1/i)∂²F̃]^{-1/2}` on the homotopy branch.
    pub c0: C64,
    /// `ũ(Z(w))`.
    pub u_value: C64,
    pub n: usize,
}

pub const POSITIVITY_TOL: f64 = 1e-10;

impl SPExpansion {
    /// `L(t) = t^{-n/2} e^{itF̃} C₀ ũ`.
    pub fn value(&self, t: f64) -> C64 {
        t.powf(-(self.n as f64) / 2.0) * (C64::new(0.0, t) * self.phase_value).exp() * self.c0 * self.u_value
    }

    pub fn positivity_ok(&self) -> bool {
        self.phase_value.im >= -POSITIVITY_TOL
    }
}

pub fn leading_term(problem: &SPProblem, w: &[f64]) -> Result<SPExpansion, SPError> {
    let critical = critical_manifold(problem, w)?;
    let j = problem.f_ext.jet_at(&critical.point, &problem.vars, 2)?;
    let hessian = j.hessian();
    let phase_value = j.coeffs()[0];
    let branch = branched_inv_sqrt_det(&hessian)?;
    let n = problem.vars.len();
    let c0 = (2.0 * PI).powf(n as f64 / 2.0) * branch.value;
    let u_value = problem.u_ext.eval(&critical.point)?;
    Ok(SPExpansion { critical, phase_value, hessian, branch, c0, u_value, n })
}

/// Oracle value of the integral at `t` with parameters `w`.
pub fn oracle_integral(problem: &SPProblem, w: &[f64], t: f64, template: &QuadratureSpec) -> Result<OracleValue, SPError> {
    let (f, u) = problem.reduced(w)?;
    let spec = QuadratureSpec { intervals: problem.bounds.clone(), ..template.clone() };
    Ok(osc_integral(&f, &u, t, &spec)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemainderSample {
    pub t: f64,
    pub oracle: C64,
    pub leading: C64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemainderReport {
    pub samples: Vec<RemainderSample>,
    pub fit: Option<OrderFit>,
    /// Too few samples above the noise floor to fit.
    pub at_noise_floor: bool,
    /// `C₀ ũ(Z) = 0`: the fitted quantity is the decay of `I(t)` itself.
    pub leading_vanishes: bool,
    /// `-(n/2 + 1)`.
    pub expected_slope: f64,
}

/// Slope of `log|I(t) − L(t)|` against `log t`.
pub fn remainder_order(problem: &SPProblem, w: &[f64], t_grid: &[f64], template: &QuadratureSpec) -> Result<RemainderReport, SPError> {
    let lead = leading_term(problem, w)?;
    let mut samples = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let oracle = oracle_integral(problem, w, t, template)?.value;
        let leading = lead.value(t);
        samples.push(RemainderSample { t, oracle, leading, error: (oracle - leading).norm() });
    }
    let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (s.t, s.error)).collect();
    let (fit, at_noise_floor) = match fit_order(&pairs, NOISE_FLOOR) {
        Ok(f) => (Some(f), false),
        Err(OracleError::TooFewSamples(_)) => (None, true),
        Err(e) => return Err(e.into()),
    };
    let leading_vanishes = (lead.c0 * lead.u_value).norm() <= 1e-14;
    Ok(RemainderReport { samples, fit, at_noise_floor, leading_vanishes, expected_slope: -(problem.n() as f64 / 2.0 + 1.0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn param_problem(f: &str) -> SPProblem {
        let layout = VarLayout::new().with("x", 1, false).with("y", 1, false);
        SPProblem::new(parse(f).unwrap(), parse("bump(x1)").unwrap(), layout, &["x"], &["y"], vec![0.0, 0.0], vec![(-1.0, 1.0)], DEFAULT_K)
            .unwrap()
    }

    #[test]
    fn critical_manifold_examples() {
        let p = SPProblem::simple("x1^2/2", "bump(x1)", 1, 1.0).unwrap();
        assert_eq!(critical_manifold(&p, &[]).unwrap().z, vec![c(0.0, 0.0)]);
        let p = SPProblem::simple("i*x1^2/2", "bump(x1)", 1, 1.0).unwrap();
        assert_eq!(critical_manifold(&p, &[]).unwrap().z, vec![c(0.0, 0.0)]);

        // (z − w) + i z w² = 0 ⇒ Z(w) = w / (1 + i w²).
        let p = param_problem("(x1 - y1)^2/2 + i*x1^2*y1^2/2");
        for w in [0.1, 0.3, -0.25, 0.5] {
            let cm = critical_manifold(&p, &[w]).unwrap();
            let want = w / c(1.0, w * w);
            assert!((cm.z[0] - want).norm() < 1e-13, "w={w}");
            let lt = leading_term(&p, &[w]).unwrap();
            let fz = c(0.0, w.powi(4)) / (2.0 * c(1.0, w * w));
            assert!((lt.phase_value - fz).norm() < 1e-13);
            assert!(lt.positivity_ok());
        }
    }

    #[test]
    fn setup_checks() {
        assert!(matches!(SPProblem::simple("(x1 - 0.1)^2/2", "bump(x1)", 1, 1.0), Err(SPError::Setup(_))));
        assert!(matches!(SPProblem::simple("x1^3", "bump(x1)", 1, 1.0), Err(SPError::Setup(_))));
    }

    #[test]
    fn gaussian_leading_term() {
        let p = SPProblem::simple("i*x1^2/2", "plateau(x1/5)", 1, 5.0).unwrap();
        let lt = leading_term(&p, &[]).unwrap();
        for t in [1.0, 100.0] {
            assert!((lt.value(t) - (2.0 * PI / t).sqrt()).norm() < 1e-14);
        }
    }

    #[test]
    fn fresnel_leading_terms_match_oracle() {
        for (f, sign) in [("x1^2/2", 1.0), ("-x1^2/2", -1.0)] {
            let p = SPProblem::simple(f, "bump(x1/2)", 1, 2.0).unwrap();
            let lt = leading_term(&p, &[]).unwrap();
            let want = (2.0 * PI).sqrt() * C64::from_polar(1.0, sign * FRAC_PI_4);
            assert!((lt.c0 - want).norm() < 1e-12);
            for t in [1e2, 1e3] {
                let o = oracle_integral(&p, &[], t, &QuadratureSpec::new(vec![])).unwrap().value;
                let l = lt.value(t);
                assert!((o - l).norm() <= 10.0 / t * l.norm(), "{f} t={t}");
            }
        }
    }

    #[test]
    fn real_quadratic_phases_have_fresnel_constants() {
        // diag(λ₁..λ_n): |C₀| = (2π)^{n/2}|Π λ|^{-1/2}, arg C₀ = (π/4)·sgn.
        let cases: [(&str, usize, f64, i32); 4] = [
            ("2*x1^2", 1, 4.0, 1),
            ("x1^2/2 - 3*x2^2/2", 2, 3.0, 0),
            ("-x1^2/2 - x2^2 - x3^2/4", 3, 1.0, -3),
            ("x1^2 + x2^2/2 + x3^2", 3, 4.0, 3),
        ];
        for (f, n, det_abs, sig) in cases {
            let p = SPProblem::simple(f, "bump(x1)", n, 1.0).unwrap();
            let lt = leading_term(&p, &[]).unwrap();
            let mag = (2.0 * PI).powf(n as f64 / 2.0) / det_abs.sqrt();
            let want = C64::from_polar(mag, FRAC_PI_4 * sig as f64);
            assert!((lt.c0 - want).norm() <= 1e-10 * mag, "{f}: {} vs {want}", lt.c0);
        }
    }

    #[test]
    fn positive_imaginary_quadratic_gives_positive_constant() {
        let p = SPProblem::simple("i*(2*x1^2 + x1*x2 + x2^2)/2", "1 + x1^2 + 0*x2", 2, 1.0).unwrap();
        let lt = leading_term(&p, &[]).unwrap();
        let want = 2.0 * PI / (2.0f64 - 0.25).sqrt();
        assert!((lt.c0 - want).norm() <= 1e-10 * want);
    }

    #[test]
    fn scaling_invariance() {
        let p = SPProblem::simple("x1^2/2 + i*x1^2/4 + x1^3/6", "bump(x1)", 1, 1.0).unwrap();
        let q = SPProblem::simple("(x1^2/2 + i*x1^2/4 + x1^3/6)/3", "bump(x1)", 1, 1.0).unwrap();
        let (a, b) = (leading_term(&p, &[]).unwrap(), leading_term(&q, &[]).unwrap());
        for t in [10.0, 100.0] {
            assert!((a.value(t) - b.value(3.0 * t)).norm() <= 1e-10 * a.value(t).norm());
        }
    }

    #[test]
    fn remainder_slopes() {
        let grid = crate::oracle::default_t_grid();
        let spec = QuadratureSpec::new(vec![]);
        let p = SPProblem::simple("i*x1^2/2", "exp(-x1^2)*bump(x1/3)", 1, 3.0).unwrap();
        let r = remainder_order(&p, &[], &grid, &spec).unwrap();
        let s = r.fit.unwrap().slope;
        assert!(s <= -1.4, "{s}");

        let p = SPProblem::simple("x1^2/2 + x1^3/6", "bump(x1)", 1, 1.0).unwrap();
        let s = remainder_order(&p, &[], &grid, &spec).unwrap().fit.unwrap().slope;
        assert!((-1.7..=-1.3).contains(&s), "{s}");

        // Odd amplitude: the integral vanishes identically.
        let p = SPProblem::simple("x1^2/2", "x1*bump(x1)", 1, 1.0).unwrap();
        let r = remainder_order(&p, &[], &grid, &spec).unwrap();
        assert!(r.leading_vanishes && r.at_noise_floor && r.fit.is_none());

        // u(0) = 0: I(t) itself decays like t^{-3/2}.
        let p = SPProblem::simple("x1^2/2", "x1^2*bump(x1)", 1, 1.0).unwrap();
        let r = remainder_order(&p, &[], &grid, &spec).unwrap();
        assert!(r.leading_vanishes);
        let s = r.fit.unwrap().slope;
        assert!((-1.6..=-1.4).contains(&s), "{s}");
    }
}
