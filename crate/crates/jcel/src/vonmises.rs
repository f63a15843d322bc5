//! Von Mises messages and modified-Bessel numerics.
//!
//! The gridless delay extractor keeps a von Mises posterior VM(theta; mean,
//! kappa) over each normalized phase increment. Everything it needs reduces to
//! three primitives:
//!
//! * the mean resultant length `f_I(kappa) = I_1(kappa) / I_0(kappa)`,
//! * its inverse (concentration from a resultant length), and
//! * the moment vector `E[e^{j * l * theta}] = (I_l(kappa) / I_0(kappa)) * e^{j * l * mean}`.
//!
//! Ratios of modified Bessel functions are computed without ever forming
//! `I_n(kappa)` itself: a normalized backward recurrence for moderate argument
//! and the large-argument expansion beyond, so the functions stay finite for
//! any concentration up to [`KAPPA_CAP`](crate::KAPPA_CAP).

use num_complex::Complex64;

use crate::error::{JcelError, Result};
use crate::KAPPA_CAP;

/// Von Mises message over an angle: VM(theta; mean, concentration).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VonMisesMsg {
    /// Mean direction, radians.
    pub mean: f64,
    /// Concentration parameter kappa >= 0.
    pub concentration: f64,
}

impl VonMisesMsg {
    /// Builds a message, capping the concentration at [`KAPPA_CAP`](crate::KAPPA_CAP).
    ///
    /// Returns the message and whether the cap was applied, so callers can
    /// count saturation events.
    pub fn capped(mean: f64, concentration: f64) -> (Self, bool) {
        let capped = concentration > KAPPA_CAP;
        let msg = VonMisesMsg {
            mean: wrap_angle(mean),
            concentration: if capped { KAPPA_CAP } else { concentration },
        };
        (msg, capped)
    }

    pub fn new(mean: f64, concentration: f64) -> Self {
        Self::capped(mean, concentration).0
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    if theta.is_finite() {
        let mut t = theta.rem_euclid(2.0 * std::f64::consts::PI);
        if t > std::f64::consts::PI {
            t -= 2.0 * std::f64::consts::PI;
        }
        t
    } else {
        theta
    }
}

/// Smallest wrapped difference a - b in (-pi, pi].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

// ---------------------------------------------------------------------------
// Bessel ratios
// ---------------------------------------------------------------------------

/// Arguments at or below this use the backward recurrence; larger ones use the
/// large-argument expansion (which for orders <= 63 is well inside f64
/// accuracy once x > 1e4).
const MILLER_MAX_ARG: f64 = 1.0e4;

/// Mean resultant length `f_I(kappa) = I_1(kappa) / I_0(kappa)`.
///
/// Monotone increasing from 0 at kappa = 0 toward 1 as kappa grows; finite for
/// all kappa >= 0 (never forms the exponentially large Bessel values).
pub fn bessel_ratio(kappa: f64) -> f64 {
    assert!(kappa >= 0.0 && kappa.is_finite(), "kappa must be finite and nonnegative");
    bessel_i_ratios(kappa, 1)[1]
}

/// Ratios `I_n(x) / I_0(x)` for n = 0..=n_max.
///
/// Backward (Miller-style) recurrence normalized at order zero for moderate
/// x, truncated large-argument expansion beyond. The recurrence start order
/// sits far above both n_max and the turning point near x, which keeps the
/// normalized ratios at working precision.
pub fn bessel_i_ratios(x: f64, n_max: usize) -> Vec<f64> {
    assert!(x >= 0.0 && x.is_finite(), "argument must be finite and nonnegative");
    let mut out = vec![0.0; n_max + 1];
    out[0] = 1.0;
    if x < 1e-280 {
        return out;
    }
    if x <= MILLER_MAX_ARG {
        let start = n_max + x.ceil() as usize + 80;
        let mut fp = 0.0_f64; // f_{n+1}
        let mut fc = 1e-30_f64; // f_n
        let mut n = start;
        loop {
            // I_{n-1}(x) = I_{n+1}(x) + (2n/x) I_n(x)
            let fm = fp + (2.0 * n as f64 / x) * fc;
            fp = fc;
            fc = fm;
            n -= 1;
            if n <= n_max {
                out[n] = fc;
            }
            if fc.abs() > 1e250 {
                fp *= 1e-250;
                fc *= 1e-250;
                for v in out.iter_mut() {
                    *v *= 1e-250;
                }
            }
            if n == 0 {
                break;
            }
        }
        let norm = out[0];
        for v in out.iter_mut() {
            *v /= norm;
        }
    } else {
        let s0 = asymptotic_series(0, x);
        for (n, v) in out.iter_mut().enumerate() {
            *v = asymptotic_series(n as u32, x) / s0;
        }
    }
    out
}

/// Truncated large-argument series for `I_nu(x) * sqrt(2 pi x) * e^{-x}`.
///
/// term_k = term_{k-1} * ((2k-1)^2 - 4 nu^2) / (8 k x); eight terms keep the
/// n <= 63 ratios below 1e-9 relative error once x > 1e4.
fn asymptotic_series(nu: u32, x: f64) -> f64 {
    let mu = 4.0 * (nu as f64) * (nu as f64);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=8u32 {
        let odd = (2.0 * k as f64 - 1.0).powi(2);
        term *= (odd - mu) / (8.0 * k as f64 * x);
        sum += term;
    }
    sum
}

/// Inverse of [`bessel_ratio`]: the concentration whose mean resultant length
/// is `r`.
///
/// Newton iteration from the classical starting point
/// `kappa_0 = r (2 - r^2) / (1 - r^2)`, safeguarded by bisection so it cannot
/// leave the bracketing interval. Converges to `|f_I(kappa) - r| <= 1e-10`.
///
/// Resultant lengths so close to 1 that the concentration would exceed
/// [`KAPPA_CAP`](crate::KAPPA_CAP) return the cap; `r >= 1` is not invertible
/// and errors.
pub fn bessel_ratio_inv(r: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&r) {
        if r >= 1.0 {
            return Err(JcelError::Saturation(r));
        }
        return Err(JcelError::Parameter(format!(
            "mean resultant length must lie in [0, 1), got {r}"
        )));
    }
    if r == 0.0 {
        return Ok(0.0);
    }
    if r >= bessel_ratio(KAPPA_CAP) {
        return Ok(KAPPA_CAP);
    }

    let mut kappa = (r * (2.0 - r * r) / (1.0 - r * r)).clamp(1e-12, KAPPA_CAP);
    let mut lo = 0.0_f64;
    let mut hi = KAPPA_CAP;
    for _ in 0..200 {
        let fc = bessel_ratio(kappa);
        let err = fc - r;
        if err.abs() <= 1e-12 {
            return Ok(kappa);
        }
        if err > 0.0 {
            hi = kappa;
        } else {
            lo = kappa;
        }
        // d/dk [I_1/I_0] = 1 - f/k - f^2, with limit 1/2 at k = 0.
        let deriv = if kappa < 1e-12 { 0.5 } else { 1.0 - fc / kappa - fc * fc };
        let mut next = kappa - err / deriv;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        kappa = next;
    }
    // Bisection has tightened the bracket far beyond the contract by now.
    Ok(kappa)
}

// ---------------------------------------------------------------------------
// Moments and products
// ---------------------------------------------------------------------------

/// First `count` circular moments `E[e^{j l theta}]` for l = 0..count under
/// `theta ~ VM(mean, kappa)`.
///
/// Entry l equals `(I_l(kappa) / I_0(kappa)) * e^{j l mean}`; entry 0 is
/// always 1 and entry 1 has magnitude exactly [`bessel_ratio`] of kappa.
pub fn vm_moments(msg: VonMisesMsg, count: usize) -> Vec<Complex64> {
    assert!(count >= 1, "moment count must be at least 1");
    let ratios = bessel_i_ratios(msg.concentration.min(KAPPA_CAP), count - 1);
    (0..count)
        .map(|l| Complex64::from_polar(ratios[l], msg.mean * l as f64))
        .collect()
}

/// Product of two von Mises densities, renormalized back to a von Mises.
///
/// The product of VM(a) and VM(b) has natural parameter
/// `kappa_a e^{j mean_a} + kappa_b e^{j mean_b}`; the result takes the angle
/// and magnitude of that sum (capped at [`KAPPA_CAP`](crate::KAPPA_CAP)).
pub fn vm_multiply(a: VonMisesMsg, b: VonMisesMsg) -> VonMisesMsg {
    let eta = Complex64::from_polar(a.concentration, a.mean)
        + Complex64::from_polar(b.concentration, b.mean);
    if eta.norm() < 1e-300 {
        return VonMisesMsg::new(0.0, 0.0);
    }
    VonMisesMsg::new(eta.arg(), eta.norm())
}

// ---------------------------------------------------------------------------
