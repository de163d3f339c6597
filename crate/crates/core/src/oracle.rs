//! Brute-force oscillatory quadrature and log–log order fitting.
//!
//! Tensor composite Gauss–Legendre; the per-axis node count starts from an
//! oscillation budget `c·t·L_i·G_i` (G_i a sampled bound of `|∂_i Re F|`)
//! and is doubled until two consecutive values agree.

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use thiserror::Error;

use crate::expr::{EvalError, Program};
use crate::jets::jet_of;
use crate::numerics::{fit_line, pairwise_sum, GaussLegendre};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("quadrature budget exceeded: {points} points without reaching tolerance (last change {change:.3e})")]
    BudgetExceeded { points: f64, change: f64 },
    #[error("fewer than 4 usable samples ({0})")]
    TooFewSamples(usize),
    #[error("invalid quadrature spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSpec {
    pub intervals: Vec<(f64, f64)>,
    /// Gauss–Legendre nodes per panel.
    pub panel_nodes: usize,
    /// Oscillation budget factor.
    pub c: f64,
    pub min_nodes: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Cap on the total tensor point count of a single evaluation.
    pub max_points: f64,
    /// Shrink axes where `exp(-t Im F) <= 1e-18`.
    pub damping_truncation: bool,
}

impl QuadratureSpec {
    pub fn new(intervals: Vec<(f64, f64)>) -> Self {
        QuadratureSpec {
            intervals,
            panel_nodes: 16,
            c: 4.0,
            min_nodes: 64,
            rel_tol: 1e-12,
            abs_tol: 1e-15,
            max_points: 4e8,
            damping_truncation: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.intervals.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleValue {
    pub value: C64,
    /// Node counts per axis of the accepted evaluation.
    pub nodes: Vec<usize>,
    /// |last − previous| of the doubling sequence.
    pub change: f64,
    pub doublings: usize,
    pub intervals: Vec<(f64, f64)>,
}

/// Tensor rule value of `f` with `nodes[i]` points on axis `i`.
pub fn tensor_rule<F>(f: &F, intervals: &[(f64, f64)], nodes: &[usize], panel_nodes: usize) -> Result<C64, EvalError>
where
    F: Fn(&[f64]) -> Result<C64, EvalError> + Sync,
{
    let gl = GaussLegendre::get(panel_nodes);
    let axes: Vec<(Vec<f64>, Vec<f64>)> =
        intervals.iter().zip(nodes).map(|(&(a, b), &n)| gl.composite(a, b, n.div_ceil(panel_nodes).max(1))).collect();
    let d = axes.len();
    if d == 0 {
        return f(&[]);
    }
    let (x0, w0) = &axes[0];
    let slices: Vec<Result<C64, EvalError>> = (0..x0.len())
        .into_par_iter()
        .map(|i0| {
            let mut p = vec![0.0; d];
            p[0] = x0[i0];
            let mut idx = vec![0usize; d];
            let mut acc = Vec::new();
            loop {
                let mut w = w0[i0];
                for k in 1..d {
                    p[k] = axes[k].0[idx[k]];
                    w *= axes[k].1[idx[k]];
                }
                acc.push(f(&p)? * w);
                // Odometer over axes 1..d.
                let mut k = d;
                loop {
                    if k == 1 {
                        return Ok(pairwise_sum(&acc));
                    }
                    k -= 1;
                    idx[k] += 1;
                    if idx[k] < axes[k].0.len() {
                        break;
                    }
                    idx[k] = 0;
                }
                if d == 1 {
                    return Ok(pairwise_sum(&acc));
                }
            }
        })
        .collect();
    let vals: Vec<C64> = slices.into_iter().collect::<Result<_, _>>()?;
    Ok(pairwise_sum(&vals))
}

/// Node-doubling driver around [`tensor_rule`].
pub fn integrate_adaptive<F>(f: &F, spec: &QuadratureSpec, start: &[usize]) -> Result<OracleValue, OracleError>
where
    F: Fn(&[f64]) -> Result<C64, EvalError> + Sync,
{
    let p = spec.panel_nodes;
    let mut nodes: Vec<usize> = start.iter().map(|&n| n.max(spec.min_nodes).div_ceil(p) * p).collect();
    let points = |n: &[usize]| n.iter().map(|&v| v as f64).product::<f64>();
    if points(&nodes) > spec.max_points {
        return Err(OracleError::BudgetExceeded { points: points(&nodes), change: f64::INFINITY });
    }
    let mut prev = tensor_rule(f, &spec.intervals, &nodes, p)?;
    let mut doublings = 0;
    loop {
        let next_nodes: Vec<usize> = nodes.iter().map(|n| 2 * n).collect();
        if points(&next_nodes) > spec.max_points {
            return Err(OracleError::BudgetExceeded { points: points(&next_nodes), change: f64::INFINITY });
        }
        let next = tensor_rule(f, &spec.intervals, &next_nodes, p)?;
        doublings += 1;
        let change = (next - prev).norm();
        if change <= spec.rel_tol * next.norm() || change <= spec.abs_tol {
            return Ok(OracleValue { value: next, nodes: next_nodes, change, doublings, intervals: spec.intervals.clone() });
        }
        nodes = next_nodes;
        prev = next;
    }
}

/// Coarse grid on the box, `m` points per axis.
fn coarse_grid(intervals: &[(f64, f64)], m: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for &(a, b) in intervals {
        let mut next = Vec::new();
        for p in &out {
            for k in 0..m {
                let mut q = p.clone();
                q.push(a + (b - a) * (k as f64 + 0.5) / m as f64);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

/// Per-axis bounds of `|∂_i Re F|` over a coarse grid.
pub fn gradient_bounds(phase: &Program, intervals: &[(f64, f64)], m: usize) -> Result<Vec<f64>, EvalError> {
    let d = intervals.len();
    let all: Vec<usize> = (0..d).collect();
    let mut g = vec![0.0f64; d];
    for p in coarse_grid(intervals, m) {
        let z: Vec<C64> = p.iter().map(|v| C64::new(*v, 0.0)).collect();
        match jet_of(phase, &z, &all, 1) {
            Ok(j) => {
                for (gi, v) in g.iter_mut().zip(j.gradient()) {
                    *gi = gi.max(v.re.abs());
                }
            }
            Err(EvalError::Domain(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(g)
}

/// Shrink each axis to the hull of coarse cells where `t·Im F < ln 1e18`
/// and the amplitude is nonzero, plus one cell of margin.
fn truncate_box(phase: &Program, amp: &Program, t: f64, intervals: &[(f64, f64)], m: usize) -> Result<Vec<(f64, f64)>, EvalError> {
    let cut = 18.0 * std::f64::consts::LN_10;
    let d = intervals.len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in coarse_grid(intervals, m) {
        let keep = match phase.eval_real(&p) {
            Ok(v) => t * v.im < cut && amp.eval_real(&p).map(|a| a.norm() > 0.0).unwrap_or(true),
            Err(_) => true,
        };
        if keep {
            for k in 0..d {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    Ok(intervals
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| {
            if lo[k] > hi[k] {
                return (a, b);
            }
            let cell = (b - a) / m as f64;
            ((lo[k] - cell).max(a), (hi[k] + cell).min(b))
        })
        .collect())
}

/// `∫ e^{itF(x)} u(x) dx` over the spec's box.
pub fn osc_integral(phase: &Program, amp: &Program, t: f64, spec: &QuadratureSpec) -> Result<OracleValue, OracleError> {
    if phase.dim() != spec.dim() || amp.dim() != spec.dim() {
        return Err(OracleError::Spec(format!("box has {} axes, integrand {}", spec.dim(), phase.dim())));
    }
    let m = if spec.dim() <= 2 { 64 } else { 12 };
    let intervals = if spec.damping_truncation { truncate_box(phase, amp, t, &spec.intervals, m)? } else { spec.intervals.clone() };
    let g = gradient_bounds(phase, &intervals, m)?;
    let start: Vec<usize> =
        intervals.iter().zip(&g).map(|(&(a, b), gi)| (spec.c * t * (b - a) * gi).ceil() as usize).collect();
    let it = C64::new(0.0, t);
    let f = |p: &[f64]| -> Result<C64, EvalError> {
        let a = amp.eval_real(p)?;
        if a == C64::new(0.0, 0.0) {
            return Ok(a);
        }
        Ok(a * (it * phase.eval_real(p)?).exp())
    };
    let local = QuadratureSpec { intervals, ..spec.clone() };
    integrate_adaptive(&f, &local, &start)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    pub used: Vec<(f64, f64)>,
    /// Samples at or below the noise floor.
    pub dropped: Vec<(f64, f64)>,
}

/// Default absolute noise floor for fitted errors.
pub const NOISE_FLOOR: f64 = 1e-13;

/// Least-squares line through `(log t, log err)`; samples with
/// `err <= floor` are dropped and reported.
pub fn fit_order(samples: &[(f64, f64)], floor: f64) -> Result<OrderFit, OracleError> {
    let (used, dropped): (Vec<(f64, f64)>, Vec<(f64, f64)>) = samples.iter().partition(|(t, e)| *e > floor && *t > 0.0);
    if used.len() < 4 {
        return Err(OracleError::TooFewSamples(used.len()));
    }
    let xs: Vec<f64> = used.iter().map(|(t, _)| t.ln()).collect();
    let ys: Vec<f64> = used.iter().map(|(_, e)| e.ln()).collect();
    let fit = fit_line(&xs, &ys).ok_or(OracleError::Spec("sample abscissae coincide".into()))?;
    Ok(OrderFit { slope: fit.slope, intercept: fit.intercept, residual: fit.rms, used, dropped })
}

/// Geometric default grid `10^2, 10^2.5, …, 10^4`.
pub fn default_t_grid() -> Vec<f64> {
    (0..5).map(|k| 10f64.powf(2.0 + 0.5 * k as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::VarLayout;
    use std::f64::consts::PI;

    fn prog(src: &str, n: usize) -> Program {
        Program::parse(src, &VarLayout::new().with("x", n, false)).unwrap()
    }

    #[test]
    fn gaussian_identity() {
        let v = osc_integral(&prog("i*x1^2/2", 1), &prog("plateau(x1/5)", 1), 100.0, &QuadratureSpec::new(vec![(-5.0, 5.0)])).unwrap();
        let want = (2.0 * PI / 100.0).sqrt();
        assert!((v.value - want).norm() <= 1e-10 * want, "{v:?}");
        assert!(v.intervals[0].1 < 5.0, "damping should shrink the box");
    }

    #[test]
    fn fresnel_leading_order() {
        let t = 100.0;
        let v = osc_integral(&prog("x1^2/2", 1), &prog("bump(x1/2)", 1), t, &QuadratureSpec::new(vec![(-2.0, 2.0)])).unwrap();
        let want = (2.0 * PI / t).sqrt() * C64::from_polar(1.0, PI / 4.0) * (-1.0f64).exp();
        assert!((v.value - want).norm() <= 5e-2 * want.norm());
    }

    #[test]
    fn zero_amplitude() {
        let v = osc_integral(&prog("x1^2/2", 1), &prog("0*x1", 1), 50.0, &QuadratureSpec::new(vec![(-1.0, 1.0)])).unwrap();
        assert_eq!(v.value, C64::new(0.0, 0.0));
    }

    #[test]
    fn oscillation_resolution() {
        let t = 1e3;
        let spec = QuadratureSpec { damping_truncation: false, ..QuadratureSpec::new(vec![(0.0, 1.0)]) };
        let v = osc_integral(&prog("x1", 1), &prog("1 + 0*x1", 1), t, &spec).unwrap();
        let it = C64::new(0.0, t);
        let want = (it.exp() - 1.0) / it;
        assert!((v.value - want).norm() <= 1e-12, "{}", (v.value - want).norm());
    }

    #[test]
    fn doubling_sequence_is_cauchy() {
        let f = |p: &[f64]| -> Result<C64, EvalError> { Ok((C64::new(0.0, 200.0) * p[0]).exp() * (-p[0] * p[0]).exp()) };
        let iv = [(-1.0, 1.0)];
        let vals: Vec<C64> = [256usize, 512, 1024, 2048].iter().map(|&n| tensor_rule(&f, &iv, &[n], 16).unwrap()).collect();
        let d1 = (vals[2] - vals[1]).norm();
        let d2 = (vals[3] - vals[2]).norm();
        assert!(d2 <= 0.1 * d1 || d2 <= 1e-15, "{d1:e} {d2:e}");
    }

    #[test]
    fn tensor_rule_in_two_dimensions() {
        let f = |p: &[f64]| -> Result<C64, EvalError> { Ok(C64::new(p[0] * p[0] * p[1].cos(), 0.0)) };
        let v = tensor_rule(&f, &[(0.0, 1.0), (0.0, PI / 2.0)], &[16, 32], 16).unwrap();
        assert!((v.re - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn budget_exceeded() {
        let spec = QuadratureSpec { max_points: 1e3, damping_truncation: false, ..QuadratureSpec::new(vec![(0.0, 1.0)]) };
        let r = osc_integral(&prog("x1", 1), &prog("1 + 0*x1", 1), 1e4, &spec);
        assert!(matches!(r, Err(OracleError::BudgetExceeded { .. })));
    }

    #[test]
    fn fit_examples() {
        let ts = default_t_grid();
        let f = fit_order(&ts.iter().map(|t| (*t, t.powf(-1.5))).collect::<Vec<_>>(), NOISE_FLOOR).unwrap();
        assert!((f.slope + 1.5).abs() < 1e-12 && f.residual < 1e-12);
        let f = fit_order(&ts.iter().map(|t| (*t, 3.0 * t.powi(-2))).collect::<Vec<_>>(), NOISE_FLOOR).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-12 && (f.intercept - 3f64.ln()).abs() < 1e-10);
        let mut s: Vec<(f64, f64)> = ts.iter().map(|t| (*t, t.powi(-1))).collect();
        s.push((1e5, 1e-16));
        let f = fit_order(&s, NOISE_FLOOR).unwrap();
        assert_eq!(f.dropped, vec![(1e5, 1e-16)]);
        assert!(matches!(fit_order(&s[..3], NOISE_FLOOR), Err(OracleError::TooFewSamples(3))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(40))]

            #[test]
            fn gauss_legendre_exact_on_polynomials(q in 1usize..20, coeffs in proptest::collection::vec(-3.0f64..3.0, 40)) {
                let deg = 2 * q - 1;
                let c = &coeffs[..=deg.min(39)];
                let f = |p: &[f64]| -> Result<C64, EvalError> {
                    Ok(C64::new(c.iter().rev().fold(0.0, |acc, a| acc * p[0] + a), 0.0))
                };
                let v = tensor_rule(&f, &[(-1.0, 1.0)], &[q], q).unwrap();
                let exact: f64 = c.iter().enumerate().map(|(k, a)| if k % 2 == 0 { 2.0 * a / (k as f64 + 1.0) } else { 0.0 }).sum();
                prop_assert!((v.re - exact).abs() <= 1e-12 * (1.0 + c.iter().map(|a| a.abs()).sum::<f64>()));
            }
        }
    }
}
