//! Double-double reference precision for finite-difference checks.
//!
//! Arithmetic comes from `twofloat`. Its `exp`/`ln` are only good to about
//! 1e-18 and its dd/dd division computes the residual without an fma, which
//! lands near f64 accuracy, so all three are replaced here.

use num_traits::Float;
use twofloat::TwoFloat;

use super::Real;

/// About 106 significant bits.
pub type Wide = TwoFloat;

const LN2: (f64, f64) = (std::f64::consts::LN_2, 2.319_046_813_846_299_6e-17);
const SQUARINGS: i32 = 8;

fn exp_wide(x: TwoFloat) -> TwoFloat {
    if x.is_nan() {
        return x;
    }
    if x.hi() > 709.78 {
        return TwoFloat::from(f64::INFINITY);
    }
    if x.hi() < -745.2 {
        return TwoFloat::from(0.0);
    }
    let ln2 = TwoFloat::try_from(LN2).expect("normalized constant");
    let k = (x.hi() / LN2.0).round();
    // |r| ≤ ln2/2 / 256, so 14 Taylor terms are far below 1e-32
    let r = (x - ln2 * k) / 2f64.powi(SQUARINGS);
    let mut term = TwoFloat::from(1.0);
    let mut sum = term;
    for n in 1..=14 {
        term = term * r / n as f64;
        sum += term;
    }
    for _ in 0..SQUARINGS {
        sum = sum * sum;
    }
    // split the power of two so 2^k never overflows on its own
    let k = k as i32;
    sum * 2f64.powi(k / 2) * 2f64.powi(k - k / 2)
}

/// Long division with f64 partial quotients; each residual is exact enough
/// that three terms cover the full width.
fn div_wide(a: TwoFloat, b: TwoFloat) -> TwoFloat {
    let q1 = a.hi() / b.hi();
    if !q1.is_finite() || q1 == 0.0 {
        return TwoFloat::from(q1);
    }
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    TwoFloat::new_add(q1, q2) + q3
}

fn ln_wide(x: TwoFloat) -> TwoFloat {
    if !(x.hi() > 0.0) || !x.hi().is_finite() {
        return TwoFloat::from(x.hi().ln());
    }
    // Newton on exp(y) = x from the f64 estimate; each step doubles the bits
    let mut y = TwoFloat::from(x.hi().ln());
    for _ in 0..2 {
        y = y + x * exp_wide(-y) - 1.0;
    }
    y
}

impl Real for TwoFloat {
    #[inline]
    fn lit(v: f64) -> Self {
        TwoFloat::from(v)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.hi() + self.lo()
    }

    fn natural_exp(self) -> Self {
        exp_wide(self)
    }

    fn natural_log(self) -> Self {
        ln_wide(self)
    }

    fn quotient(self, rhs: Self) -> Self {
        div_wide(self, rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(v: f64) -> Wide {
        Wide::from(v)
    }

    #[test]
    fn exp_and_log_agree_with_f64() {
        for v in [-30.0, -2.5, -1e-3, 0.0, 0.37, 1.0, 12.0, 300.0] {
            let e = exp_wide(w(v)).as_f64();
            assert!((e - v.exp()).abs() <= 2.0 * f64::EPSILON * v.exp(), "{v}");
        }
        for v in [1e-7, 0.3, 1.0, 2.0, 1e5] {
            assert!((ln_wide(w(v)).as_f64() - v.ln()).abs() <= 2.0 * f64::EPSILON * v.ln().abs().max(1e-300), "{v}");
        }
    }

    #[test]
    fn log_inverts_exp_beyond_double_precision() {
        for v in [-4.0, -0.7, 0.1, 0.37, 3.3] {
            let x = w(v) + w(v * 1e-17);
            let back = ln_wide(exp_wide(x));
            assert!(Float::abs(back - x).hi() < 1e-29, "{v}: {:e}", (back - x).hi());
        }
    }

    #[test]
    fn central_difference_is_truncation_limited() {
        // (e^(x+h) − e^(x−h)) / 2h − e^x ≈ h² e^x / 6
        let x = w(0.37);
        for h in [1e-6, 1e-8] {
            let hw = w(h);
            let d = div_wide(exp_wide(x + hw) - exp_wide(x - hw), hw * 2.0) - exp_wide(x);
            let want = h * h * 0.37f64.exp() / 6.0;
            assert!((d.as_f64() - want).abs() < 0.01 * want, "{h}: {:e} vs {want:e}", d.as_f64());
        }
    }

    #[test]
    fn division_is_exact_to_double_double() {
        for (a, b) in [(1.0, 0.37), (-2.5, 3.0), (1e-3, 7.1), (5.0, -1e-4)] {
            let (a, b) = (w(a) + w(a * 1e-17), w(b) - w(b * 3e-18));
            let back = div_wide(a, b) * b - a;
            assert!(back.hi().abs() < 1e-30 * a.hi().abs(), "{a:?}/{b:?}: {:e}", back.hi());
        }
        assert_eq!(div_wide(w(1.0), w(0.0)).as_f64(), f64::INFINITY);
    }

    #[test]
    fn edge_values() {
        assert_eq!(exp_wide(w(800.0)).as_f64(), f64::INFINITY);
        assert_eq!(exp_wide(w(-800.0)).as_f64(), 0.0);
        assert!(ln_wide(w(-1.0)).as_f64().is_nan());
        assert_eq!(ln_wide(w(0.0)).as_f64(), f64::NEG_INFINITY);
    }
}
