//! Almost analytic extensions by Taylor truncation in the imaginary
//! direction, and sampled equivalence of manifolds in graph form.

use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::expr::{EvalError, Program, Scalar};
use crate::jets::{jet_of, Jet, JetSpace};
use crate::numerics::fit_loglog;

const ZERO: C64 = C64::new(0.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AAError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("incompatible splittings: {0}")]
    Splitting(String),
    #[error("not enough usable samples: {0}")]
    Samples(String),
}

/// `f̃(x+iy) = Σ_{|α|<=K} ∂^α f(x)/α! (iy)^α`.
#[derive(Debug, Clone)]
pub struct AAExtension {
    f: Program,
    k: usize,
}

pub fn extend(f: &Program, k: usize) -> AAExtension {
    AAExtension { f: f.clone(), k }
}

fn split(z: &[C64]) -> (Vec<C64>, Vec<f64>) {
    (z.iter().map(|v| C64::new(v.re, 0.0)).collect(), z.iter().map(|v| v.im).collect())
}

impl AAExtension {
    pub fn order(&self) -> usize {
        self.k
    }

    pub fn program(&self) -> &Program {
        &self.f
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    fn taylor(&self, x: &[C64], k: usize) -> Result<Jet, EvalError> {
        let all: Vec<usize> = (0..x.len()).collect();
        jet_of(&self.f, x, &all, k)
    }

    pub fn eval(&self, z: &[C64]) -> Result<C64, EvalError> {
        let (x, y) = split(z);
        if y.iter().all(|v| *v == 0.0) {
            return self.f.eval(&x);
        }
        let c = self.taylor(&x, self.k)?;
        let iy: Vec<C64> = y.iter().map(|v| I * v).collect();
        let s = c.space();
        let mut total = ZERO;
        for (idx, coef) in c.coeffs().iter().enumerate() {
            if *coef == ZERO {
                continue;
            }
            let mono: C64 = s.alpha(idx).iter().zip(&iy).map(|(&a, w)| w.powi(a as i32)).product();
            total += coef * mono;
        }
        Ok(total)
    }

    /// Holomorphic Taylor jet of `f̃(z + δ)` in the shifts `δ_j, j ∈ active`,
    /// to order `k_out`. Uses the real-point jet directly when `Im z = 0`.
    pub fn jet_at(&self, z: &[C64], active: &[usize], k_out: usize) -> Result<Jet, EvalError> {
        let (x, y) = split(z);
        if y.iter().all(|v| *v == 0.0) && k_out <= self.k {
            return jet_of(&self.f, &x, active, k_out);
        }
        let c = self.taylor(&x, self.k)?;
        let out = JetSpace::get(active.len(), k_out);
        let d = x.len();
        // powers[j][p] = (i y_j + δ_j)^p
        let mut powers: Vec<Vec<Jet>> = Vec::with_capacity(d);
        for j in 0..d {
            let w = match active.iter().position(|&a| a == j) {
                Some(pos) => Jet::variable(&out, pos, I * y[j]),
                None => Jet::constant(&out, I * y[j]),
            };
            let mut row = vec![Jet::constant(&out, C64::new(1.0, 0.0))];
            for p in 1..=self.k {
                let next = row[p - 1].mul(&w);
                row.push(next);
            }
            powers.push(row);
        }
        let s = c.space();
        let mut acc = vec![ZERO; out.len()];
        for (idx, coef) in c.coeffs().iter().enumerate() {
            if *coef == ZERO {
                continue;
            }
            let alpha = s.alpha(idx);
            let mut term: Option<Jet> = None;
            for (j, &a) in alpha.iter().enumerate() {
                if a == 0 {
                    continue;
                }
                let pj = &powers[j][a as usize];
                term = Some(match term {
                    None => pj.clone(),
                    Some(t) => t.mul(pj),
                });
            }
            match term {
                None => acc[0] += coef,
                Some(t) => {
                    for (a, v) in acc.iter_mut().zip(t.coeffs()) {
                        *a += coef * v;
                    }
                }
            }
        }
        Ok(Jet::from_coeffs(&out, acc))
    }

    /// `∂̄_j f̃(x+iy) = ½ Σ_{|α|=K} (α_j+1) c_{α+e_j}(x) (iy)^α`.
    pub fn dbar(&self, z: &[C64]) -> Result<Vec<C64>, EvalError> {
        let (x, y) = split(z);
        let c = self.taylor(&x, self.k + 1)?;
        let s = c.space();
        let iy: Vec<C64> = y.iter().map(|v| I * v).collect();
        let d = x.len();
        let mut out = vec![ZERO; d];
        for idx in s.degree_range(self.k) {
            let alpha = s.alpha(idx).to_vec();
            let mono: C64 = alpha.iter().zip(&iy).map(|(&a, w)| w.powi(a as i32)).product();
            for (j, o) in out.iter_mut().enumerate() {
                let mut up = alpha.clone();
                up[j] += 1;
                *o += 0.5 * (alpha[j] as f64 + 1.0) * c.coeff(&up) * mono;
            }
        }
        Ok(out)
    }
}

/// Result of the ∂̄ vanishing-order fit.
#[derive(Debug, Clone, PartialEq)]
pub enum DbarOrder {
    /// ∂̄f̃ vanished at every sample (analytic case).
    Exact,
    /// Smallest per-direction log–log slope, plus all slopes.
    Slope { slope: f64, per_direction: Vec<f64> },
}

/// Fit `log|∂̄f̃(x+i s d)|` against `log s` for each direction `d`.
pub fn dbar_order(ext: &AAExtension, x: &[f64], directions: &[Vec<f64>], scales: &[f64]) -> Result<DbarOrder, AAError> {
    let f0 = ext.f.eval_real(x)?.norm();
    let floor = 1e-15 * (1.0 + f0);
    let mut slopes = Vec::new();
    let mut all_zero = true;
    for dir in directions {
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut vals = Vec::with_capacity(scales.len());
        for &s in scales {
            let z: Vec<C64> = x.iter().zip(dir).map(|(a, b)| C64::new(*a, s * b / len)).collect();
            let g = ext.dbar(&z)?;
            vals.push(g.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt());
        }
        if vals.iter().any(|v| *v > floor) {
            all_zero = false;
            let fit = fit_loglog(scales, &vals).ok_or_else(|| AAError::Samples("degenerate ∂̄ fit".into()))?;
            slopes.push(fit.slope);
        }
    }
    if all_zero {
        return Ok(DbarOrder::Exact);
    }
    let slope = slopes.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(DbarOrder::Slope { slope, per_direction: slopes })
}

/// `z'' = h(z')`, `z' ∈ ℂ^k`, each component an almost analytic extension.
#[derive(Debug, Clone)]
pub struct GraphManifold {
    pub k: usize,
    pub h: Vec<AAExtension>,
}

impl GraphManifold {
    pub fn new(k: usize, h: Vec<AAExtension>) -> Result<Self, AAError> {
        if let Some(bad) = h.iter().find(|e| e.dim() != k) {
            return Err(AAError::Splitting(format!("component has {} inputs, expected {k}", bad.dim())));
        }
        Ok(GraphManifold { k, h })
    }

    pub fn eval(&self, z: &[C64]) -> Result<Vec<C64>, EvalError> {
        self.h.iter().map(|e| e.eval(z)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equivalence {
    pub equivalent: bool,
    /// Fitted slope of `log(|h1-h2|/|Im h2|^N)` vs `log|Im h2|` per tested N.
    pub slopes: Vec<(usize, f64)>,
    /// Largest `|h1-h2|/|Im h2|^N_max` over the fitted samples.
    pub worst_ratio: f64,
    pub reason: String,
}

/// Growth slopes below this count as unbounded.
pub const BOUNDED_SLOPE: f64 = -0.1;

/// Sampled test of `|h1(x')-h2(x')| <= C_N |Im h2(x')|^N` at real `x'`.
///
/// Samples should approach the real trace (where `Im h2 -> 0`).
pub fn manifolds_equivalent(m1: &GraphManifold, m2: &GraphManifold, n_max: usize, samples: &[Vec<f64>]) -> Result<Equivalence, AAError> {
    if m1.k != m2.k || m1.h.len() != m2.h.len() {
        return Err(AAError::Splitting(format!(
            "({}, {}) vs ({}, {})",
            m1.k,
            m1.h.len(),
            m2.k,
            m2.h.len()
        )));
    }
    let mut dist = Vec::new();
    let mut imag = Vec::new();
    for x in samples {
        let z: Vec<C64> = x.iter().map(|v| C64::new(*v, 0.0)).collect();
        let a = m1.eval(&z)?;
        let b = m2.eval(&z)?;
        let d = a.iter().zip(&b).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
        let m = b.iter().map(|q| q.im * q.im).sum::<f64>().sqrt();
        let scale = 1.0 + b.iter().map(|q| q.norm()).fold(0.0, f64::max);
        if m <= 1e-14 * scale && d > 1e-12 * scale {
            return Ok(Equivalence {
                equivalent: false,
                slopes: Vec::new(),
                worst_ratio: f64::INFINITY,
                reason: format!("real traces differ at x' = {x:?}: |h1-h2| = {d:e} where Im h2 = 0"),
            });
        }
        if m > 1e-14 * scale && d > 0.0 {
            dist.push(d);
            imag.push(m);
        }
    }
    if dist.iter().all(|d| *d <= 1e-14) {
        return Ok(Equivalence { equivalent: true, slopes: Vec::new(), worst_ratio: 0.0, reason: "h1 = h2 at all samples".into() });
    }
    if dist.len() < 3 {
        return Err(AAError::Samples(format!("{} samples with Im h2 != 0 and h1 != h2", dist.len())));
    }
    let mut slopes = Vec::new();
    let mut equivalent = true;
    let mut reason = String::from("ratio bounded for all tested N");
    for n in 1..=n_max {
        let ratios: Vec<f64> = dist.iter().zip(&imag).map(|(d, m)| d / m.powi(n as i32)).collect();
        let fit = fit_loglog(&imag, &ratios).ok_or_else(|| AAError::Samples("degenerate fit".into()))?;
        slopes.push((n, fit.slope));
        if fit.slope < BOUNDED_SLOPE && equivalent {
            equivalent = false;
            reason = format!("ratio grows like |Im h2|^{:.3} for N = {n}", fit.slope);
        }
    }
    let worst_ratio = dist.iter().zip(&imag).map(|(d, m)| d / m.powi(n_max as i32)).fold(0.0, f64::max);
    Ok(Equivalence { equivalent, slopes, worst_ratio, reason })
}

/// Real sample points `center + s·dir` with `s` log-spaced in `[lo, hi]`.
pub fn approach_samples(center: &[f64], dir: &[f64], hi: f64, lo: f64, count: usize) -> Vec<Vec<f64>> {
    crate::numerics::log_space(hi, lo, count)
        .into_iter()
        .map(|s| center.iter().zip(dir).map(|(c, d)| c + s * d).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::VarLayout;
    use crate::numerics::log_space;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn prog(src: &str, n: usize) -> Program {
        Program::parse(src, &VarLayout::new().with("x", n, false)).unwrap()
    }

    #[test]
    fn polynomials_extend_exactly() {
        let e = extend(&prog("x1", 1), 3);
        let z = c(0.4, -0.7);
        assert_eq!(e.eval(&[z]).unwrap(), z);
        let e = extend(&prog("x1^2", 1), 2);
        assert!((e.eval(&[z]).unwrap() - z * z).norm() < 1e-15);
        let e = extend(&prog("x1^2*x2 - 3*x2^3", 2), 3);
        let w = [c(0.2, 0.1), c(-0.5, 0.3)];
        let want = w[0] * w[0] * w[1] - 3.0 * w[1] * w[1] * w[1];
        assert!((e.eval(&w).unwrap() - want).norm() < 1e-14);
        assert_eq!(dbar_order(&e, &[0.2, -0.5], &[vec![1.0, 0.0], vec![1.0, 1.0]], &log_space(0.1, 1e-3, 5)).unwrap(), DbarOrder::Exact);
    }

    #[test]
    fn restriction_to_real_points_is_exact() {
        let p = prog("exp(x1)*sin(x2)", 2);
        let e = extend(&p, 5);
        let x = [c(0.3, 0.0), c(-1.1, 0.0)];
        assert_eq!(e.eval(&x).unwrap(), p.eval(&x).unwrap());
    }

    #[test]
    fn exp_extension_close_to_analytic_continuation() {
        let e = extend(&prog("exp(x1)", 1), 8);
        let v = e.eval(&[c(0.0, 0.1)]).unwrap();
        assert!((v - c(0.0, 0.1).exp()).norm() <= 1e-9);
    }

    /// ∂̄ by a five-point central-difference stencil on `eval`, independent
    /// of the closed-form expression used in `dbar`.
    fn dbar_fd(e: &AAExtension, z: C64) -> C64 {
        let h = 1e-3;
        let d = |dz: C64| -> C64 {
            let f = |s: f64| e.eval(&[z + dz * s]).unwrap();
            (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
        };
        0.5 * (d(c(1.0, 0.0)) + I * d(c(0.0, 1.0)))
    }

    #[test]
    fn dbar_matches_finite_differences() {
        for (src, k) in [("exp(x1)", 4usize), ("sin(x1)", 6), ("1/(2 + x1)", 5)] {
            let e = extend(&prog(src, 1), k);
            for y in [0.4, 0.25, 0.1] {
                let z = c(0.2, y);
                let exact = e.dbar(&[z]).unwrap()[0];
                let fd = dbar_fd(&e, z);
                assert!((exact - fd).norm() <= 1e-6 * exact.norm() + 1e-11, "{src} y={y}: {exact} vs {fd}");
            }
        }
    }

    #[test]
    fn dbar_order_fits() {
        let scales = log_space(1e-1, 1e-3, 7);
        let dirs = [vec![1.0]];
        match dbar_order(&extend(&prog("exp(x1)", 1), 4), &[0.0], &dirs, &scales).unwrap() {
            DbarOrder::Slope { slope, .. } => assert!(slope >= 3.9, "{slope}"),
            o => panic!("{o:?}"),
        }
        match dbar_order(&extend(&prog("sin(x1)", 1), 6), &[0.3], &dirs, &scales).unwrap() {
            DbarOrder::Slope { slope, .. } => assert!(slope >= 5.9, "{slope}"),
            o => panic!("{o:?}"),
        }
        assert_eq!(dbar_order(&extend(&prog("3*x1^4 - x1", 1), 4), &[0.5], &dirs, &scales).unwrap(), DbarOrder::Exact);
    }

    #[test]
    fn holomorphic_jet_at_complex_point() {
        // Polynomial: the jet at a complex point is the exact Taylor jet.
        let e = extend(&prog("x1^3 + 2*x1*x2", 2), 3);
        let z = [c(0.3, 0.2), c(-0.4, 0.5)];
        let j = e.jet_at(&z, &[0, 1], 2).unwrap();
        let want_dx = 3.0 * z[0] * z[0] + 2.0 * z[1];
        assert!((j.gradient()[0] - want_dx).norm() < 1e-14);
        assert!((j.hessian()[(0, 0)] - 6.0 * z[0]).norm() < 1e-14);
        assert!((j.hessian()[(0, 1)] - c(2.0, 0.0)).norm() < 1e-14);
        let j1 = e.jet_at(&z, &[1], 1).unwrap();
        assert!((j1.gradient()[0] - 2.0 * z[0]).norm() < 1e-14);
        // Real point agrees with the plain jet.
        let x = [c(0.3, 0.0), c(-0.4, 0.0)];
        assert_eq!(e.jet_at(&x, &[0, 1], 2).unwrap().coeffs(), jet_of(e.program(), &x, &[0, 1], 2).unwrap().coeffs());
    }

    fn graph(src: &str) -> GraphManifold {
        GraphManifold::new(1, vec![extend(&prog(src, 1), 6)]).unwrap()
    }

    fn near_zero() -> Vec<Vec<f64>> {
        approach_samples(&[0.0], &[1.0], 0.5, 1e-2, 12)
    }

    #[test]
    fn equivalence_examples() {
        let a = graph("x1 + i*x1^2");
        assert!(manifolds_equivalent(&a, &a, 4, &near_zero()).unwrap().equivalent);
        let b = graph("x1");
        let r = manifolds_equivalent(&a, &b, 4, &near_zero()).unwrap();
        assert!(!r.equivalent);
        // x^6 against Im h2 = x^2: bounded exactly up to N = 3.
        let c6 = graph("x1 + i*x1^2 + x1^6");
        assert!(manifolds_equivalent(&c6, &a, 3, &near_zero()).unwrap().equivalent);
        assert!(!manifolds_equivalent(&c6, &a, 4, &near_zero()).unwrap().equivalent);
        let c10 = graph("x1 + i*x1^2 + i*x1^10");
        assert!(manifolds_equivalent(&c10, &a, 4, &near_zero()).unwrap().equivalent);
    }

    #[test]
    fn equivalence_of_two_extension_orders() {
        let p = prog("x1 + i*sin(x1)^2", 1);
        let m1 = GraphManifold::new(1, vec![extend(&p, 4)]).unwrap();
        let m2 = GraphManifold::new(1, vec![extend(&p, 8)]).unwrap();
        assert!(manifolds_equivalent(&m1, &m2, 4, &near_zero()).unwrap().equivalent);
        assert!(manifolds_equivalent(&m2, &m1, 4, &near_zero()).unwrap().equivalent);
    }

    #[test]
    fn incompatible_splittings() {
        let m1 = graph("x1");
        let p2 = prog("x1 + x2", 2);
        let m2 = GraphManifold::new(2, vec![extend(&p2, 2)]).unwrap();
        assert!(matches!(manifolds_equivalent(&m1, &m2, 4, &near_zero()), Err(AAError::Splitting(_))));
        assert!(GraphManifold::new(1, vec![extend(&p2, 2)]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn extension_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, x in -1.0f64..1.0, y in -0.3f64..0.3) {
                let f = prog("exp(x1)*cos(x1)", 1);
                let g = prog("1/(3 + x1^2)", 1);
                let fg = prog(&format!("({a})*exp(x1)*cos(x1) + ({b})/(3 + x1^2)"), 1);
                let z = [c(x, y)];
                let lhs = extend(&fg, 6).eval(&z).unwrap();
                let rhs = a * extend(&f, 6).eval(&z).unwrap() + b * extend(&g, 6).eval(&z).unwrap();
                prop_assert!((lhs - rhs).norm() <= 1e-13 * (1.0 + rhs.norm()));
            }

            #[test]
            fn analytic_functions_have_full_order(k in 2usize..7, x in -0.5f64..0.5) {
                let e = extend(&prog("exp(x1)*sin(x1)", 1), k);
                match dbar_order(&e, &[x], &[vec![1.0], vec![-1.0]], &log_space(1e-1, 1e-3, 5)).unwrap() {
                    DbarOrder::Exact => {}
                    DbarOrder::Slope { slope, .. } => prop_assert!(slope >= k as f64 - 0.1, "slope {slope}"),
                }
            }
        }
    }
}
