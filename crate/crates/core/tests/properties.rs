use std::f64::consts::{FRAC_PI_4, PI};

use num_complex::Complex64 as C64;
use proptest::prelude::*;

use fiocalc::oracle::QuadratureSpec;
use fiocalc::phase::{classify, find_critical, CriticalPoint, PhaseClassification, PhaseFunction};
use fiocalc::report::num;
use fiocalc::stationary::{leading_term, SPProblem};
use fiocalc::symbol::{make_psi, pairing_t, principal_symbol, sqrt_dphi, Amplitude, PairingTest};

fn quadratic(re: &[f64], im: &[f64]) -> String {
    let terms: Vec<String> = re.iter().zip(im).enumerate().map(|(k, (a, b))| format!("({a:.6} + i*{b:.6})*x{}^2/2", k + 1)).collect();
    terms.join(" + ")
}

fn round6(v: f64) -> f64 {
    format!("{v:.6}").parse().unwrap()
}

fn setup(f: &str, n: usize, big_n: usize, seed: &[f64]) -> (PhaseFunction, PhaseClassification, CriticalPoint) {
    let phi = PhaseFunction::standard(f, n, big_n).unwrap();
    let z: Vec<C64> = seed.iter().map(|&v| C64::new(v, 0.0)).collect();
    let cp = find_critical(&phi, &z, None).unwrap();
    let cls = classify(&phi, &[cp.real_point()]).unwrap();
    (phi, cls, cp)
}

fn signed() -> impl Strategy<Value = f64> {
    (0.2f64..5.0, any::<bool>()).prop_map(|(v, s)| if s { v } else { -v })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Real diagonal phases: the homotopy branch gives the classical Fresnel constant.
    #[test]
    fn fresnel_constant_for_real_diagonal(a in prop::collection::vec(signed(), 1..=3)) {
        let a: Vec<f64> = a.into_iter().map(round6).collect();
        let n = a.len();
        let p = SPProblem::simple(&quadratic(&a, &vec![0.0; n]), "1", n, 1.0).unwrap();
        let c0 = leading_term(&p, &[]).unwrap().c0;
        let modulus = (2.0 * PI).powf(n as f64 / 2.0) / a.iter().map(|v| v.abs()).product::<f64>().sqrt();
        let signature: f64 = a.iter().map(|v| v.signum()).sum();
        let want = C64::from_polar(modulus, FRAC_PI_4 * signature);
        prop_assert!((c0 - want).norm() <= 1e-10 * want.norm(), "{c0} vs {want}");
    }

    /// `F = i·(positive quadratic)`: the constant is real and positive.
    #[test]
    fn damped_quadratic_constant_is_positive(b in prop::collection::vec(0.2f64..5.0, 1..=3)) {
        let b: Vec<f64> = b.into_iter().map(round6).collect();
        let n = b.len();
        let p = SPProblem::simple(&quadratic(&vec![0.0; n], &b), "1", n, 1.0).unwrap();
        let c0 = leading_term(&p, &[]).unwrap().c0;
        let want = (2.0 * PI).powf(n as f64 / 2.0) / b.iter().product::<f64>().sqrt();
        prop_assert!(c0.im.abs() <= 1e-10 * want && (c0.re - want).abs() <= 1e-10 * want, "{c0} vs {want}");
    }

    /// `F → F/c`, `t → ct` leaves the leading term unchanged.
    #[test]
    fn leading_term_scaling(a in signed(), b in 0.0f64..3.0, c in 0.2f64..5.0, t in 10.0f64..1e4) {
        let (a, b, c) = (round6(a), round6(b), round6(c));
        let base = SPProblem::simple(&format!("{} + x1^3/6", quadratic(&[a], &[b])), "1", 1, 1.0).unwrap();
        let scaled = SPProblem::simple(&format!("({} + x1^3/6)/{c:.6}", quadratic(&[a], &[b])), "1", 1, 1.0).unwrap();
        let l1 = leading_term(&base, &[]).unwrap().value(t);
        let l2 = leading_term(&scaled, &[]).unwrap().value(c * t);
        prop_assert!((l1 - l2).norm() <= 1e-10 * l1.norm(), "{l1} vs {l2}");
    }

    /// The symbol is linear in the amplitude at a point.
    #[test]
    fn symbol_linear_in_amplitude(c1 in -3.0f64..3.0, c2 in -3.0f64..3.0, theta in 0.5f64..3.0) {
        let (phi, cls, cp) = setup("x1*theta1", 1, 1, &[0.0, round6(theta)]);
        let psi = make_psi(&phi, &cp, 1.0).unwrap();
        let a1 = format!("{c1:.6}*(1 + x1^2)*theta1");
        let a2 = format!("{c2:.6}*exp(x1)*theta1");
        let sym = |src: &str| principal_symbol(&phi, &Amplitude::parse(src, &phi, 1.0).unwrap(), &cls, &cp, &psi, None).unwrap().value;
        let (s1, s2, s12) = (sym(&a1), sym(&a2), sym(&format!("{a1} + {a2}")));
        prop_assert!((s12 - (s1 + s2)).norm() <= 1e-14 * (1.0 + s1.norm() + s2.norm()));
    }

    /// `(√dφ(ψ₁)/√dφ(ψ₂))² · det M(ψ₁)/det M(ψ₂) = 1`.
    #[test]
    fn transition_determinant_identity(l1 in 0.2f64..5.0, l2 in 0.2f64..5.0) {
        let (phi, cls, cp) = setup("theta1*(x1 + x2^2/2)", 2, 1, &[0.1, 0.0, 1.0]);
        let r = |l: f64| sqrt_dphi(&phi, &cls, &cp, &make_psi(&phi, &cp, l).unwrap()).unwrap();
        let (a, b) = (r(l1), r(l2));
        let q = (a.value / b.value).powi(2) * a.det / b.det;
        prop_assert!((q - 1.0).norm() <= 1e-10, "{q}");
    }

    /// Report floats round-trip exactly through their fixed format.
    #[test]
    fn report_floats_round_trip(x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        let text = num(x).to_string();
        prop_assert!(text.contains('e'));
        prop_assert_eq!(text.parse::<f64>().unwrap(), x);
        prop_assert_eq!(num(x).to_string(), text);
    }
}

/// The prediction tracks the oracle to the same order for every ψ.
#[test]
fn pairing_order_is_psi_robust() {
    let (phi, cls, cp) = setup("x1*theta1", 1, 1, &[0.2, 1.0]);
    let a = Amplitude::parse("1", &phi, 0.0).unwrap();
    // η-cutoff of radius 0.8: at radius 0.4 and t ≤ 128 the cutoff edge
    // still clips the stationary point and the fit sees pre-asymptotic decay.
    let test = PairingTest::standard(&phi, &cls, &cp, 0.5, 0.8, None);
    for lambda in [0.5, 1.0, 2.0] {
        let psi = make_psi(&phi, &cp, lambda).unwrap();
        let r = pairing_t(&phi, &a, &cls, &cp, &psi, &test, None, &[16.0, 32.0, 64.0, 128.0], &QuadratureSpec::new(vec![])).unwrap();
        let d = r.slope_difference().unwrap();
        assert!(d.abs() <= 0.15, "λ = {lambda}: slope difference {d}");
    }
}
