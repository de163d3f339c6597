//! Truncated multivariate Taylor arithmetic.
//!
//! A [`Jet`] stores `∂^α f / α!` for every multi-index `|α| <= K` in a dense
//! graded-lexicographic table. All derivatives used elsewhere come from here.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use crate::expr::{EvalError, Program, Scalar};

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Multi-index tables for `d` variables up to total order `k`.
#[derive(Debug)]
pub struct JetSpace {
    d: usize,
    k: usize,
    alphas: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, usize>,
    /// For each left index `i`: list of (right index, product index).
    mul: Vec<Vec<(u32, u32)>>,
    /// Start of each total-degree block; `degree_start[k+1] == len`.
    degree_start: Vec<usize>,
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, j| acc * (n - j) / (j + 1))
}

fn multi_indices(d: usize, deg: usize, out: &mut Vec<Vec<u8>>) {
    // Lexicographically decreasing within a degree block: x1^deg first.
    fn rec(d: usize, pos: usize, left: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if pos + 1 == d {
            cur[pos] = left as u8;
            out.push(cur.clone());
            return;
        }
        for a in (0..=left).rev() {
            cur[pos] = a as u8;
            rec(d, pos + 1, left - a, cur, out);
        }
        cur[pos] = 0;
    }
    if d == 0 {
        if deg == 0 {
            out.push(Vec::new());
        }
        return;
    }
    let mut cur = vec![0u8; d];
    rec(d, 0, deg, &mut cur, out);
}

impl JetSpace {
    fn build(d: usize, k: usize) -> JetSpace {
        let mut alphas = Vec::with_capacity(binomial(k + d, d));
        let mut degree_start = Vec::with_capacity(k + 2);
        for deg in 0..=k {
            degree_start.push(alphas.len());
            multi_indices(d, deg, &mut alphas);
        }
        degree_start.push(alphas.len());
        let lookup: HashMap<Vec<u8>, usize> = alphas.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        let mut mul = vec![Vec::new(); alphas.len()];
        for (i, a) in alphas.iter().enumerate() {
            let da: usize = a.iter().map(|&v| v as usize).sum();
            for (j, b) in alphas[..degree_start[k - da + 1]].iter().enumerate() {
                let s: Vec<u8> = a.iter().zip(b).map(|(p, q)| p + q).collect();
                mul[i].push((j as u32, lookup[&s] as u32));
            }
        }
        JetSpace { d, k, alphas, lookup, mul, degree_start }
    }

    /// Shared table for `(d, k)`; built once per process.
    pub fn get(d: usize, k: usize) -> Arc<JetSpace> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<JetSpace>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard.entry((d, k)).or_insert_with(|| Arc::new(JetSpace::build(d, k))).clone()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn order(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn alpha(&self, i: usize) -> &[u8] {
        &self.alphas[i]
    }

    pub fn index(&self, alpha: &[u8]) -> Option<usize> {
        self.lookup.get(alpha).copied()
    }

    /// Index range of multi-indices of total degree `deg`.
    pub fn degree_range(&self, deg: usize) -> std::ops::Range<usize> {
        self.degree_start[deg]..self.degree_start[deg + 1]
    }
}

#[derive(Debug, Clone)]
pub struct Jet {
    space: Arc<JetSpace>,
    c: Vec<C64>,
}

impl PartialEq for Jet {
    fn eq(&self, o: &Jet) -> bool {
        Arc::ptr_eq(&self.space, &o.space) && self.c == o.c
    }
}

fn factorial(a: &[u8]) -> f64 {
    a.iter().map(|&v| (1..=v as u64).product::<u64>() as f64).product()
}

impl Jet {
    pub fn constant(space: &Arc<JetSpace>, v: C64) -> Jet {
        let mut c = vec![ZERO; space.len()];
        c[0] = v;
        Jet { space: space.clone(), c }
    }

    /// The jet of `base + h_j`.
    pub fn variable(space: &Arc<JetSpace>, j: usize, base: C64) -> Jet {
        let mut out = Jet::constant(space, base);
        if space.k >= 1 {
            let mut a = vec![0u8; space.d];
            a[j] = 1;
            out.c[space.lookup[&a]] = ONE;
        }
        out
    }

    pub fn from_coeffs(space: &Arc<JetSpace>, c: Vec<C64>) -> Jet {
        assert_eq!(c.len(), space.len(), "coefficient table size mismatch");
        Jet { space: space.clone(), c }
    }

    pub fn space(&self) -> &Arc<JetSpace> {
        &self.space
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.c
    }

    /// Taylor coefficient `∂^α f / α!`; zero beyond the truncation order.
    pub fn coeff(&self, alpha: &[u8]) -> C64 {
        self.space.index(alpha).map_or(ZERO, |i| self.c[i])
    }

    /// Derivative `∂^α f`.
    pub fn derivative(&self, alpha: &[u8]) -> C64 {
        self.coeff(alpha) * factorial(alpha)
    }

    pub fn gradient(&self) -> Vec<C64> {
        (0..self.space.d)
            .map(|j| {
                let mut a = vec![0u8; self.space.d];
                a[j] = 1;
                self.coeff(&a)
            })
            .collect()
    }

    /// Symmetric by construction.
    pub fn hessian(&self) -> DMatrix<C64> {
        let d = self.space.d;
        let mut h = DMatrix::from_element(d, d, ZERO);
        for i in 0..d {
            for j in i..d {
                let mut a = vec![0u8; d];
                a[i] += 1;
                a[j] += 1;
                let v = self.derivative(&a);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        h
    }

    fn scale(&self, s: C64) -> Jet {
        Jet { space: self.space.clone(), c: self.c.iter().map(|v| v * s).collect() }
    }

    fn nilpotent(&self) -> Jet {
        let mut h = self.clone();
        h.c[0] = ZERO;
        h
    }

    /// `Σ f_k h^k` with `h = self - self(0)`, by Horner.
    fn compose_series(&self, f: &[C64]) -> Jet {
        let h = self.nilpotent();
        let mut r = Jet::constant(&self.space, f[self.space.k.min(f.len() - 1)]);
        for k in (0..self.space.k.min(f.len() - 1)).rev() {
            r = Scalar::mul(&r, &h);
            r.c[0] += f[k];
        }
        r
    }

    fn recip(&self) -> Result<Jet, EvalError> {
        let c0 = self.c[0];
        if c0 == ZERO {
            return Err(EvalError::Domain("division by zero"));
        }
        let inv = 1.0 / c0;
        let mut f = Vec::with_capacity(self.space.k + 1);
        let mut p = inv;
        for _ in 0..=self.space.k {
            f.push(p);
            p *= -inv;
        }
        Ok(self.compose_series(&f))
    }
}

impl Scalar for Jet {
    type Ctx = Arc<JetSpace>;

    fn constant(ctx: &Arc<JetSpace>, c: C64) -> Self {
        Jet::constant(ctx, c)
    }

    fn value(&self) -> C64 {
        self.c[0]
    }

    fn add(&self, o: &Self) -> Self {
        Jet { space: self.space.clone(), c: self.c.iter().zip(&o.c).map(|(a, b)| a + b).collect() }
    }

    fn sub(&self, o: &Self) -> Self {
        Jet { space: self.space.clone(), c: self.c.iter().zip(&o.c).map(|(a, b)| a - b).collect() }
    }

    fn mul(&self, o: &Self) -> Self {
        let mut c = vec![ZERO; self.c.len()];
        for (i, &a) in self.c.iter().enumerate() {
            if a == ZERO {
                continue;
            }
            for &(j, t) in &self.space.mul[i] {
                c[t as usize] += a * o.c[j as usize];
            }
        }
        Jet { space: self.space.clone(), c }
    }

    fn div(&self, o: &Self) -> Result<Self, EvalError> {
        Ok(self.mul(&o.recip()?))
    }

    fn neg(&self) -> Self {
        self.scale(-ONE)
    }

    fn powi(&self, n: i32) -> Result<Self, EvalError> {
        if n < 0 {
            return self.powi(-n)?.recip();
        }
        let mut base = self.clone();
        let mut acc = Jet::constant(&self.space, ONE);
        let mut e = n as u32;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc.mul(&base);
            }
            e >>= 1;
            if e > 0 {
                base = base.mul(&base);
            }
        }
        Ok(acc)
    }

    fn powc(&self, p: C64) -> Result<Self, EvalError> {
        let c0 = self.c[0];
        if c0 == ZERO {
            if self.space.k == 0 || self.c.iter().all(|v| *v == ZERO) {
                return Ok(Jet::constant(&self.space, c0.powc(p)));
            }
            return Err(EvalError::Domain("non-integer power of zero"));
        }
        let lead = c0.powc(p);
        let inv = 1.0 / c0;
        let mut f = Vec::with_capacity(self.space.k + 1);
        let mut binom = ONE;
        let mut pw = ONE;
        for k in 0..=self.space.k {
            f.push(lead * binom * pw);
            binom *= (p - k as f64) / (k as f64 + 1.0);
            pw *= inv;
        }
        Ok(self.compose_series(&f))
    }

    fn exp(&self) -> Self {
        let e0 = self.c[0].exp();
        let mut f = Vec::with_capacity(self.space.k + 1);
        let mut fact = 1.0;
        for k in 0..=self.space.k {
            if k > 0 {
                fact *= k as f64;
            }
            f.push(e0 / fact);
        }
        self.compose_series(&f)
    }

    fn log(&self) -> Result<Self, EvalError> {
        let c0 = self.c[0];
        if c0 == ZERO {
            return Err(EvalError::Domain("log of zero"));
        }
        let inv = 1.0 / c0;
        let mut f = vec![c0.ln()];
        let mut pw = inv;
        for k in 1..=self.space.k {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            f.push(pw * (sign / k as f64));
            pw *= inv;
        }
        Ok(self.compose_series(&f))
    }

    fn sqrt(&self) -> Result<Self, EvalError> {
        self.powc(C64::new(0.5, 0.0))
    }

    fn sin(&self) -> Self {
        let (s, c) = (self.c[0].sin(), self.c[0].cos());
        self.compose_series(&trig_series(s, c, self.space.k))
    }

    fn cos(&self) -> Self {
        let (s, c) = (self.c[0].sin(), self.c[0].cos());
        self.compose_series(&trig_series(c, -s, self.space.k))
    }
}

/// Taylor coefficients of a function with `f = v`, `f' = dv`, `f'' = -f`.
fn trig_series(v: C64, dv: C64, k: usize) -> Vec<C64> {
    let cycle = [v, dv, -v, -dv];
    let mut fact = 1.0;
    (0..=k)
        .map(|j| {
            if j > 0 {
                fact *= j as f64;
            }
            cycle[j % 4] / fact
        })
        .collect()
}

/// Jet of a compiled expression at `base` in the `active` flat variables;
/// other variables stay frozen at their base values.
pub fn jet_of(p: &Program, base: &[C64], active: &[usize], k: usize) -> Result<Jet, EvalError> {
    let space = JetSpace::get(active.len(), k);
    let mut point: Vec<Jet> = base.iter().map(|&v| Jet::constant(&space, v)).collect();
    if point.len() != p.dim() {
        return Err(EvalError::Dimension { expected: p.dim(), found: point.len() });
    }
    for (j, &idx) in active.iter().enumerate() {
        point[idx] = Jet::variable(&space, j, base[idx]);
    }
    p.eval_generic(&space, &point)
}

pub fn gradient(p: &Program, base: &[C64], vars: &[usize]) -> Result<Vec<C64>, EvalError> {
    Ok(jet_of(p, base, vars, 1)?.gradient())
}

pub fn hessian(p: &Program, base: &[C64], vars: &[usize]) -> Result<DMatrix<C64>, EvalError> {
    Ok(jet_of(p, base, vars, 2)?.hessian())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::VarLayout;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() <= tol * (1.0 + b.norm())
    }

    #[test]
    fn table_sizes() {
        for d in 1..5 {
            for k in 0..7 {
                assert_eq!(JetSpace::get(d, k).len(), binomial(k + d, d));
            }
        }
        let s = JetSpace::get(2, 2);
        assert_eq!(s.alpha(0), &[0, 0]);
        assert_eq!(s.degree_range(1), 1..3);
    }

    #[test]
    fn jet_examples() {
        let l = VarLayout::new().with("x", 1, false);
        let p = Program::parse("x1^2", &l).unwrap();
        let j = jet_of(&p, &[c(1.0, 0.0)], &[0], 2).unwrap();
        assert_eq!(j.coeffs(), &[c(1.0, 0.0), c(2.0, 0.0), c(1.0, 0.0)]);

        let p = Program::parse("exp(x1)", &l).unwrap();
        let j = jet_of(&p, &[c(0.0, 0.0)], &[0], 3).unwrap();
        let want = [1.0, 1.0, 0.5, 1.0 / 6.0];
        for (a, b) in j.coeffs().iter().zip(want) {
            assert!(close(*a, c(b, 0.0), 1e-15));
        }

        let l2 = VarLayout::new().with("x", 1, false).with("theta", 1, true);
        let p = Program::parse("x1*theta1", &l2).unwrap();
        let j = jet_of(&p, &[c(0.0, 0.0), c(1.0, 0.0)], &[0], 1).unwrap();
        assert_eq!(j.coeffs(), &[c(0.0, 0.0), c(1.0, 0.0)]);
    }

    #[test]
    fn gradient_and_hessian_examples() {
        let l = VarLayout::new().with("x", 2, false);
        let p = Program::parse("x1^2/2 + x1*x2", &l).unwrap();
        let base = [c(1.0, 0.0), c(1.0, 0.0)];
        assert_eq!(gradient(&p, &base, &[0, 1]).unwrap(), vec![c(2.0, 0.0), c(1.0, 0.0)]);
        let h = hessian(&p, &[c(0.3, 0.0), c(-2.0, 0.0)], &[0, 1]).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]));
        let l1 = VarLayout::new().with("x", 1, false);
        let p = Program::parse("i*x1^2/2", &l1).unwrap();
        assert_eq!(hessian(&p, &[c(0.0, 0.0)], &[0]).unwrap()[(0, 0)], c(0.0, 1.0));
    }

    #[test]
    fn elementary_functions_match_closed_forms() {
        let l = VarLayout::new().with("x", 1, false);
        let x0 = c(0.7, 0.2);
        let cases: [(&str, fn(C64) -> [C64; 3]); 6] = [
            ("log(x1)", |z| [z.ln(), 1.0 / z, -1.0 / (z * z)]),
            ("sqrt(x1)", |z| [z.sqrt(), 0.5 / z.sqrt(), -0.25 / (z * z.sqrt())]),
            ("sin(x1)", |z| [z.sin(), z.cos(), -z.sin()]),
            ("cos(x1)", |z| [z.cos(), -z.sin(), -z.cos()]),
            ("1/x1", |z| [1.0 / z, -1.0 / (z * z), 2.0 / (z * z * z)]),
            ("x1^(1/3)", |z| {
                let p = z.powf(1.0 / 3.0);
                [p, p / (3.0 * z), -2.0 * p / (9.0 * z * z)]
            }),
        ];
        for (src, f) in cases {
            let p = Program::parse(src, &l).unwrap();
            let j = jet_of(&p, &[x0], &[0], 2).unwrap();
            let want = f(x0);
            for (k, w) in want.iter().enumerate() {
                assert!(close(j.derivative(&[k as u8]), *w, 1e-13), "{src} order {k}");
            }
        }
    }

    #[test]
    fn norm_jet() {
        let l = VarLayout::new().with("theta", 2, true);
        let p = Program::parse("norm(theta)", &l).unwrap();
        let j = jet_of(&p, &[c(3.0, 0.0), c(4.0, 0.0)], &[0, 1], 2).unwrap();
        assert!(close(j.gradient()[0], c(0.6, 0.0), 1e-15));
        // ∂²/∂θ1² |θ| = θ2²/|θ|³
        assert!(close(j.hessian()[(0, 0)], c(16.0 / 125.0, 0.0), 1e-14));
    }

    #[test]
    fn zero_division_in_jet() {
        let l = VarLayout::new().with("x", 1, false);
        let p = Program::parse("1/x1", &l).unwrap();
        assert!(jet_of(&p, &[c(0.0, 0.0)], &[0], 2).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Random polynomial as (coefficient, exponent vector) terms.
        fn poly(d: usize, deg: u8) -> impl Strategy<Value = Vec<(i32, Vec<u8>)>> {
            proptest::collection::vec(((-5i32..=5), proptest::collection::vec(0u8..=deg, d)), 1..6).prop_map(
                move |terms| {
                    terms
                        .into_iter()
                        .map(|(a, mut e)| {
                            while e.iter().map(|&v| v as u32).sum::<u32>() > deg as u32 {
                                let m = e.iter().enumerate().max_by_key(|(_, v)| **v).unwrap().0;
                                e[m] -= 1;
                            }
                            (a, e)
                        })
                        .collect()
                },
            )
        }

        fn source(terms: &[(i32, Vec<u8>)]) -> String {
            let parts: Vec<String> = terms
                .iter()
                .map(|(a, e)| {
                    let mut s = format!("({a})");
                    for (k, p) in e.iter().enumerate() {
                        s.push_str(&format!("*x{}^{}", k + 1, p));
                    }
                    s
                })
                .collect();
            parts.join(" + ")
        }

        /// Exact Taylor coefficient of a polynomial at `base` by binomial expansion.
        fn exact_coeff(terms: &[(i32, Vec<u8>)], base: &[f64], alpha: &[u8]) -> f64 {
            let mut total = 0.0;
            for (a, e) in terms {
                let mut t = *a as f64;
                for k in 0..e.len() {
                    if alpha[k] > e[k] {
                        t = 0.0;
                        break;
                    }
                    t *= binomial(e[k] as usize, alpha[k] as usize) as f64 * base[k].powi((e[k] - alpha[k]) as i32);
                }
                total += t;
            }
            total
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(50))]

            #[test]
            fn polynomial_jets_are_exact(terms in poly(3, 6), b in proptest::collection::vec(-1.5f64..1.5, 3)) {
                let l = VarLayout::new().with("x", 3, false);
                let p = Program::parse(&source(&terms), &l).unwrap();
                let base: Vec<C64> = b.iter().map(|&v| c(v, 0.0)).collect();
                let j = jet_of(&p, &base, &[0, 1, 2], 6).unwrap();
                for i in 0..j.space().len() {
                    let want = exact_coeff(&terms, &b, j.space().alpha(i));
                    prop_assert!((j.coeffs()[i].re - want).abs() <= 1e-9 * (1.0 + want.abs()));
                    prop_assert!(j.coeffs()[i].im.abs() <= 1e-12);
                }
            }

            #[test]
            fn jets_match_finite_differences(terms in poly(4, 5), b in proptest::collection::vec(-1.0f64..1.0, 4)) {
                let l = VarLayout::new().with("x", 4, false);
                let p = Program::parse(&source(&terms), &l).unwrap();
                let base: Vec<C64> = b.iter().map(|&v| c(v, 0.0)).collect();
                let j = jet_of(&p, &base, &[0, 1, 2, 3], 2).unwrap();
                let g = j.gradient();
                let h = 1e-5;
                let scale = 1.0 + b.iter().map(|v| v.abs()).fold(0.0, f64::max);
                for k in 0..4 {
                    let mut up = b.clone();
                    let mut dn = b.clone();
                    up[k] += h * scale;
                    dn[k] -= h * scale;
                    let fd = (p.eval_real(&up).unwrap() - p.eval_real(&dn).unwrap()) / (2.0 * h * scale);
                    let tol = 1e-6 * (1.0 + g[k].norm()) + 1e-6 * terms.iter().map(|t| t.0.abs() as f64).sum::<f64>();
                    prop_assert!((fd - g[k]).norm() <= tol, "fd {fd} jet {}", g[k]);
                }
                let hs = j.hessian();
                prop_assert_eq!(hs.clone(), hs.transpose());
            }

            #[test]
            fn product_rule(t1 in poly(2, 3), t2 in poly(2, 3), b in proptest::collection::vec(-1.0f64..1.0, 2)) {
                let l = VarLayout::new().with("x", 2, false);
                let base: Vec<C64> = b.iter().map(|&v| c(v, 0.0)).collect();
                let f = jet_of(&Program::parse(&source(&t1), &l).unwrap(), &base, &[0, 1], 6).unwrap();
                let g = jet_of(&Program::parse(&source(&t2), &l).unwrap(), &base, &[0, 1], 6).unwrap();
                let fg_src = format!("({}) * ({})", source(&t1), source(&t2));
                let fg = jet_of(&Program::parse(&fg_src, &l).unwrap(), &base, &[0, 1], 6).unwrap();
                let prod = Scalar::mul(&f, &g);
                for (a, b) in prod.coeffs().iter().zip(fg.coeffs()) {
                    prop_assert!((a - b).norm() <= 1e-9 * (1.0 + b.norm()));
                }
            }
        }
    }
}
