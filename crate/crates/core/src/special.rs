//! Digamma, trigamma and log-gamma on the positive real axis.
//!
//! All three shift the argument upward with the standard recurrences until
//! it reaches [`ASYMPTOTIC_THRESHOLD`], then evaluate a Stirling-type
//! asymptotic series in `1/x`. No tables, no reflection: Dirichlet
//! parameters in this crate are always `>= 1`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Arguments at or above this value go straight to the asymptotic series.
pub const ASYMPTOTIC_THRESHOLD: f64 = 6.0;

/// `B_{2k} / (2k)` for k = 1..8.
const DIGAMMA_SERIES: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
];

/// `B_{2k}` for k = 1..8.
const BERNOULLI: [f64; 8] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
];

/// `B_{2k} / (2k (2k - 1))` for k = 1..8.
const STIRLING_SERIES: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
];

fn check_domain(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "{name} requires a finite x > 0, got {x}"
        )))
    }
}

/// ψ(x), the logarithmic derivative of Γ.
pub fn digamma(x: f64) -> Result<f64> {
    check_domain("digamma", x)?;
    Ok(psi(x))
}

/// ψ′(x).
pub fn trigamma(x: f64) -> Result<f64> {
    check_domain("trigamma", x)?;
    Ok(psi1(x))
}

/// ln Γ(x).
pub fn log_gamma(x: f64) -> Result<f64> {
    check_domain("log_gamma", x)?;
    Ok(ln_gamma(x))
}

/// Unchecked digamma for callers that guarantee `x > 0`.
#[inline]
pub(crate) fn psi(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut series = 0.0;
    for &c in DIGAMMA_SERIES.iter().rev() {
        series = series * inv2 + c;
    }
    acc + x.ln() - 0.5 / x - series * inv2
}

/// Unchecked trigamma for callers that guarantee `x > 0`.
#[inline]
pub(crate) fn psi1(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    // 1/x + 1/(2x^2) + sum_k B_2k / x^(2k+1)
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    for &b in BERNOULLI.iter().rev() {
        series = series * inv2 + b;
    }
    acc + inv + 0.5 * inv2 + series * inv2 * inv
}

/// Unchecked log-gamma for callers that guarantee `x > 0`.
pub(crate) fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    let mut shifted = x;
    let mut product = 1.0;
    while shifted < ASYMPTOTIC_THRESHOLD {
        product *= shifted;
        shifted += 1.0;
    }
    let inv = 1.0 / shifted;
    let inv2 = inv * inv;
    let mut series = 0.0;
    for &c in STIRLING_SERIES.iter().rev() {
        series = series * inv2 + c;
    }
    (shifted - 0.5) * shifted.ln() - shifted + 0.5 * (2.0 * PI).ln() + series * inv - product.ln()
}

/// `(ln Γ(x), ψ(x), ψ′(x))` from a single recurrence shift; each component
/// is bit-identical to the separate evaluations.
pub(crate) fn gamma_family(x: f64) -> (f64, f64, f64) {
    debug_assert!(x > 0.0);
    let mut shifted = x;
    let mut product = 1.0;
    let mut d_acc = 0.0;
    let mut t_acc = 0.0;
    while shifted < ASYMPTOTIC_THRESHOLD {
        product *= shifted;
        d_acc -= 1.0 / shifted;
        t_acc += 1.0 / (shifted * shifted);
        shifted += 1.0;
    }
    let inv = 1.0 / shifted;
    let inv2 = 1.0 / (shifted * shifted);
    let inv2_t = inv * inv;
    let ln = shifted.ln();

    let mut d_series = 0.0;
    let mut t_series = 0.0;
    let mut l_series = 0.0;
    for k in (0..8).rev() {
        d_series = d_series * inv2 + DIGAMMA_SERIES[k];
        t_series = t_series * inv2_t + BERNOULLI[k];
        l_series = l_series * inv2_t + STIRLING_SERIES[k];
    }
    let digamma = d_acc + ln - 0.5 / shifted - d_series * inv2;
    let trigamma = t_acc + inv + 0.5 * inv2_t + t_series * inv2_t * inv;
    let log_gamma = if x == 1.0 || x == 2.0 {
        0.0
    } else {
        (shifted - 0.5) * ln - shifted + 0.5 * (2.0 * PI).ln() + l_series * inv - product.ln()
    };
    (log_gamma, digamma, trigamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// (x, ψ(x), ψ′(x), ln Γ(x)) evaluated with 40-digit arithmetic.
    const REFERENCE: [(f64, f64, f64, f64); 14] = [
        (
            0.001,
            -1000.5755719318103005,
            1000001.642533195869,
            6.9071788853838536825,
        ),
        (
            0.01,
            -100.5608854578686745,
            10001.62121352831322,
            4.5994798780420217225,
        ),
        (
            0.1,
            -10.423754940411076795,
            101.43329915079275882,
            2.2527126517342059599,
        ),
        (
            0.5,
            -1.9635100260214234794,
            4.9348022005446793094,
            0.57236494292470008707,
        ),
        (1.0, -0.57721566490153286061, 1.6449340668482264365, 0.0),
        (
            1.5,
            0.036489973978576520559,
            0.93480220054467930942,
            -0.12078223763524522235,
        ),
        (2.0, 0.42278433509846713939, 0.64493406684822643647, 0.0),
        (
            3.0,
            0.92278433509846713939,
            0.39493406684822643647,
            0.69314718055994530942,
        ),
        (
            5.75,
            1.6597303710679365795,
            0.1899074119392527677,
            4.3667160366222863439,
        ),
        (
            6.0,
            1.7061176684318004727,
            0.18132295573711532536,
            4.7874917427820459942,
        ),
        (
            10.0,
            2.2517525890667211076,
            0.10516633568168574612,
            12.801827480081469611,
        ),
        (
            123.456,
            4.8118293238289853873,
            0.0081329458342781980101,
            469.60554712992946873,
        ),
        (
            1000.0,
            6.9072551956488120521,
            0.0010005001666666333334,
            5905.2204232091812118,
        ),
        (
            1000000.0,
            13.815510057964190771,
            1.0000005000001666667e-6,
            12815504.56914761166,
        ),
    ];

    /// Absolute tolerance, widened to a few ulps where the value itself is
    /// too large for the absolute bound to be representable.
    fn tol(abs: f64, value: f64) -> f64 {
        abs.max(4.0 * f64::EPSILON * value.abs())
    }

    #[test]
    fn matches_reference_values() {
        for (x, d, t, l) in REFERENCE {
            let gd = digamma(x).unwrap();
            let gt = trigamma(x).unwrap();
            let gl = log_gamma(x).unwrap();
            assert!(
                (gd - d).abs() <= tol(1e-10, d),
                "digamma({x}) = {gd}, want {d}"
            );
            assert!(
                (gt - t).abs() <= tol(1e-9, t),
                "trigamma({x}) = {gt}, want {t}"
            );
            assert!(
                (gl - l).abs() <= tol(1e-10, l),
                "log_gamma({x}) = {gl}, want {l}"
            );
        }
    }

    #[test]
    fn digamma_one_is_minus_euler_gamma() {
        let err = (digamma(1.0).unwrap() + 0.5772156649015329).abs();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn digamma_recurrence() {
        assert!((digamma(2.0).unwrap() - digamma(1.0).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn trigamma_values() {
        assert!((trigamma(1.0).unwrap() - PI * PI / 6.0).abs() < 1e-12);
        for x in [0.3, 1.0, 2.5, 7.0, 40.0] {
            let diff = trigamma(x).unwrap() - trigamma(x + 1.0).unwrap();
            assert!((diff - 1.0 / (x * x)).abs() <= tol(1e-10, diff), "x={x}");
        }
    }

    #[test]
    fn digamma_finite_difference_at_three() {
        let h = 1e-5;
        let fd = (digamma(3.0 + h).unwrap() - digamma(3.0 - h).unwrap()) / (2.0 * h);
        let t = trigamma(3.0).unwrap();
        assert!(((fd - t) / t).abs() <= 1e-5);
    }

    #[test]
    fn log_gamma_small_integers() {
        assert_eq!(log_gamma(1.0).unwrap(), 0.0);
        assert_eq!(log_gamma(2.0).unwrap(), 0.0);
        assert!((log_gamma(5.0).unwrap() - 24f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn domain_errors() {
        for f in [digamma, trigamma, log_gamma] {
            assert!(matches!(f(0.0), Err(Error::Domain(_))));
            assert!(f(-1.5).is_err());
            assert!(f(f64::NAN).is_err());
            assert!(f(f64::INFINITY).is_err());
        }
    }

    #[test]
    fn fused_evaluation_matches_separate() {
        let grid = (0..300).map(|i| 10f64.powf(-3.0 + 9.0 * i as f64 / 299.0));
        for x in grid.chain([1.0, 2.0, 6.0, 5.999999]) {
            let (l, d, t) = gamma_family(x);
            assert_eq!(l.to_bits(), ln_gamma(x).to_bits(), "x={x}");
            assert_eq!(d.to_bits(), psi(x).to_bits(), "x={x}");
            assert_eq!(t.to_bits(), psi1(x).to_bits(), "x={x}");
        }
    }

    #[test]
    fn monotone_on_grid() {
        let grid: Vec<f64> = (0..200)
            .map(|i| 10f64.powf(-3.0 + 9.0 * i as f64 / 199.0))
            .collect();
        for w in grid.windows(2) {
            assert!(psi(w[1]) > psi(w[0]));
            assert!(psi1(w[0]) > 0.0);
        }
    }
}
