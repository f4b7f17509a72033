//! Semi-analytic Heston call pricer via characteristic-function integration.
//!
//! Serves as the no-stickiness baseline and as the limit check for the sticky
//! simulator when both stickiness coefficients go to zero. The
//! characteristic function uses the branch-stable formulation, so long
//! maturities do not hit complex-logarithm discontinuities.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    pub r: f64,
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
    pub rho: f64,
    pub v0: f64,
    pub x0: f64,
}

impl HestonParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("kappa", self.kappa),
            ("theta", self.theta),
            ("sigma", self.sigma),
            ("v0", self.v0),
            ("x0", self.x0),
        ] {
            if !(v > 0.0) {
                return Err(ModelError::NonPositive(name));
            }
        }
        if 2.0 * self.kappa * self.theta <= self.sigma * self.sigma {
            return Err(ModelError::FellerViolation {
                lhs: 2.0 * self.kappa * self.theta,
                rhs: self.sigma * self.sigma,
            });
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(ModelError::CorrelationOutOfRange(self.rho));
        }
        Ok(())
    }
}

impl From<&ModelParams> for HestonParams {
    fn from(p: &ModelParams) -> Self {
        HestonParams {
            r: p.r,
            kappa: p.kappa,
            theta: p.theta,
            sigma: p.sigma,
            rho: p.rho,
            v0: p.v0,
            x0: p.x0,
        }
    }
}

#[derive(Debug, Error)]
pub enum HestonError {
    #[error("characteristic function produced a non-finite value")]
    NonFinite,
    #[error("quadrature failed to reach tolerance {tol} (last error {err})")]
    QuadratureFailure { tol: f64, err: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Characteristic function of log-price at horizon `tau` under the pricing
/// measure: E[exp(i u ln S_tau)].
///
/// Returns exactly 1 at u = 0. |cf| <= 1 holds for real u but not for general
/// complex arguments.
pub fn heston_cf(u: Complex64, p: &HestonParams, tau: f64) -> Result<Complex64, HestonError> {
    let i = Complex64::new(0.0, 1.0);
    let sigma2 = p.sigma * p.sigma;
    let psi = i * u + u * u;
    let alpha = p.kappa - p.rho * p.sigma * i * u;
    let d = (alpha * alpha + sigma2 * psi).sqrt();
    let apd = alpha + d;
    // alpha - d written without cancellation: (alpha^2 - d^2) / (alpha + d)
    let amd = -sigma2 * psi / apd;
    let g = amd / apd;
    let exp_dt = (-d * tau).exp();
    let one = Complex64::new(1.0, 0.0);
    // ln((1 - g e^{-d tau}) / (1 - g)) with relative precision in g, which
    // matters because it is multiplied by theta*kappa/sigma^2 below
    let log_term = ln_1p(-g * exp_dt) - ln_1p(-g);
    let a = p.theta * p.kappa * (-psi * tau / apd) - 2.0 * p.theta * p.kappa / sigma2 * log_term;
    let b = p.v0 * (-psi / apd) * (one - exp_dt) / (one - g * exp_dt);
    let phase = i * u * (p.x0.ln() + p.r * tau);
    let value = (phase + a + b).exp();
    if value.re.is_finite() && value.im.is_finite() {
        Ok(value)
    } else {
        Err(HestonError::NonFinite)
    }
}

/// Complex ln(1 + z), accurate for |z| << 1.
fn ln_1p(z: Complex64) -> Complex64 {
    if z.norm() < 1e-4 {
        let z2 = z * z;
        z - z2 / 2.0 + z2 * z / 3.0 - z2 * z2 / 4.0 + z2 * z2 * z / 5.0
    } else {
        (Complex64::new(1.0, 0.0) + z).ln()
    }
}

/// Exercise probabilities (P1, P2) of the two-probability call representation.
fn probabilities(p: &HestonParams, strike: f64, tau: f64) -> Result<(f64, f64), HestonError> {
    let i = Complex64::new(0.0, 1.0);
    let ln_k = strike.ln();
    // E[S_tau] for the measure change in P1; equals cf(-i) analytically but
    // the closed form is cheaper and exact.
    let forward = p.x0 * (p.r * tau).exp();

    let integrand = |u: f64| -> Result<(f64, f64), HestonError> {
        let cu = Complex64::new(u, 0.0);
        let cf2 = heston_cf(cu, p, tau)?;
        let cf1 = heston_cf(cu - i, p, tau)? / forward;
        let w = (-i * u * ln_k).exp() / (i * u);
        Ok(((w * cf1).re, (w * cf2).re))
    };

    let tol = 1e-10;
    let (i1, i2) = integrate_pair_tail(&integrand, tol)?;
    Ok((
        0.5 + i1 / std::f64::consts::PI,
        0.5 + i2 / std::f64::consts::PI,
    ))
}

/// European call price by adaptive quadrature of the two-probability
/// representation. Absolute integration tolerance 1e-8.
pub fn heston_call(p: &HestonParams, strike: f64, tau: f64) -> Result<f64, HestonError> {
    p.validate()?;
    if !(strike > 0.0) {
        return Err(HestonError::Model(ModelError::NonPositive("strike")));
    }
    if !(tau > 0.0) {
        return Err(HestonError::Model(ModelError::NonPositive("tau")));
    }
    let (p1, p2) = probabilities(p, strike, tau)?;
    Ok(p.x0 * p1 - strike * (-p.r * tau).exp() * p2)
}

/// European put from the same integrals; satisfies parity with
/// [`heston_call`] by construction.
pub fn heston_put(p: &HestonParams, strike: f64, tau: f64) -> Result<f64, HestonError> {
    p.validate()?;
    let (p1, p2) = probabilities(p, strike, tau)?;
    Ok(strike * (-p.r * tau).exp() * (1.0 - p2) - p.x0 * (1.0 - p1))
}

/// Adaptive Simpson over [a, b] for a pair of integrands sharing evaluations.
fn simpson_pair<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: (f64, f64),
    fb: (f64, f64),
    tol: f64,
    depth: u32,
) -> Result<(f64, f64), HestonError>
where
    F: Fn(f64) -> Result<(f64, f64), HestonError>,
{
    let m = 0.5 * (a + b);
    let fm = f(m)?;
    let whole = (
        (b - a) / 6.0 * (fa.0 + 4.0 * fm.0 + fb.0),
        (b - a) / 6.0 * (fa.1 + 4.0 * fm.1 + fb.1),
    );
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = (
        (m - a) / 6.0 * (fa.0 + 4.0 * flm.0 + fm.0),
        (m - a) / 6.0 * (fa.1 + 4.0 * flm.1 + fm.1),
    );
    let right = (
        (b - m) / 6.0 * (fm.0 + 4.0 * frm.0 + fb.0),
        (b - m) / 6.0 * (fm.1 + 4.0 * frm.1 + fb.1),
    );
    let err0 = (left.0 + right.0 - whole.0).abs();
    let err1 = (left.1 + right.1 - whole.1).abs();
    if (err0 < 15.0 * tol && err1 < 15.0 * tol) || depth >= 40 {
        if depth >= 40 && (err0 >= 15.0 * tol || err1 >= 15.0 * tol) {
            return Err(HestonError::QuadratureFailure {
                tol,
                err: err0.max(err1),
            });
        }
        return Ok((
            left.0 + right.0 + (left.0 + right.0 - whole.0) / 15.0,
            left.1 + right.1 + (left.1 + right.1 - whole.1) / 15.0,
        ));
    }
    let l = simpson_pair(f, a, m, fa, fm, tol / 2.0, depth + 1)?;
    let r = simpson_pair(f, m, b, fm, fb, tol / 2.0, depth + 1)?;
    Ok((l.0 + r.0, l.1 + r.1))
}

/// Integrate a pair of decaying oscillatory integrands over (0, inf):
/// adaptive Simpson on geometrically growing segments, truncated once two
/// consecutive segments contribute less than the tail tolerance.
fn integrate_pair_tail<F>(f: &F, tol: f64) -> Result<(f64, f64), HestonError>
where
    F: Fn(f64) -> Result<(f64, f64), HestonError>,
{
    // The integrands are finite at 0+ but 0/0 there; start just above.
    let mut a = 1e-9;
    let mut fa = f(a)?;
    let mut total = (0.0, 0.0);
    let mut width = 2.0;
    let mut quiet_segments = 0;
    for _ in 0..60 {
        let b = a + width;
        let fb = f(b)?;
        let seg = simpson_pair(f, a, b, fa, fb, tol, 0)?;
        total.0 += seg.0;
        total.1 += seg.1;
        if seg.0.abs() < tol && seg.1.abs() < tol && fb.0.abs() < tol && fb.1.abs() < tol {
            quiet_segments += 1;
            if quiet_segments >= 3 {
                return Ok(total);
            }
        } else {
            quiet_segments = 0;
        }
        a = b;
        fa = fb;
        width *= 1.6;
    }
    Err(HestonError::QuadratureFailure { tol, err: f64::NAN })
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Black-Scholes call with constant volatility, used as a degenerate-case
/// oracle and for implied-volatility inversion.
pub fn black_scholes_call(x0: f64, strike: f64, r: f64, vol: f64, tau: f64) -> f64 {
    if tau <= 0.0 || vol <= 0.0 {
        return (x0 - strike * (-r * tau).exp()).max(0.0);
    }
    let sqrt_t = tau.sqrt();
    let d1 = ((x0 / strike).ln() + (r + 0.5 * vol * vol) * tau) / (vol * sqrt_t);
    let d2 = d1 - vol * sqrt_t;
    x0 * norm_cdf(d1) - strike * (-r * tau).exp() * norm_cdf(d2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params() -> HestonParams {
        HestonParams {
            r: 0.04,
            kappa: 3.0,
            theta: 0.05,
            sigma: 0.4,
            rho: -0.3,
            v0: 0.05,
            x0: 100.0,
        }
    }

    #[test]
    fn cf_is_one_at_zero() {
        let v = heston_cf(Complex64::new(0.0, 0.0), &params(), 0.3).unwrap();
        assert_abs_diff_eq!(v.re, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn cf_conjugate_symmetry() {
        let p = params();
        for &u in &[0.3, 1.7, 9.4, 25.0] {
            let a = heston_cf(Complex64::new(u, 0.0), &p, 0.5).unwrap();
            let b = heston_cf(Complex64::new(-u, 0.0), &p, 0.5).unwrap();
            assert_abs_diff_eq!(a.re, b.re, epsilon = 1e-12);
            assert_abs_diff_eq!(a.im, -b.im, epsilon = 1e-12);
        }
    }

    #[test]
    fn cf_degenerates_to_lognormal_as_sigma_vanishes() {
        // With sigma -> 0 and v0 = theta the variance stays at v0, so the log
        // price is Gaussian with variance v0 * tau.
        let p = HestonParams {
            sigma: 1e-6,
            v0: 0.04,
            theta: 0.04,
            kappa: 2.0,
            rho: 0.0,
            r: 0.02,
            x0: 80.0,
        };
        let tau = 0.7;
        let w = p.v0 * tau;
        for &u in &[0.5, 1.0, 3.0] {
            let cf = heston_cf(Complex64::new(u, 0.0), &p, tau).unwrap();
            let i = Complex64::new(0.0, 1.0);
            let mean = p.x0.ln() + p.r * tau - 0.5 * w;
            let exact = (i * u * mean - 0.5 * w * u * u).exp();
            assert!((cf - exact).norm() < 1e-8, "u = {u}");
        }
    }

    #[test]
    fn call_near_zero_strike_approaches_spot() {
        let p = params();
        let k = 1e-6;
        let c = heston_call(&p, k, 0.3).unwrap();
        // sure exercise: spot minus the (vanishing) strike present value
        assert_abs_diff_eq!(c, p.x0 - k * (-p.r * 0.3f64).exp(), epsilon = 1e-6);
        assert_abs_diff_eq!(c, p.x0, epsilon = 2e-6);
    }

    #[test]
    fn call_matches_black_scholes_when_vol_is_flat() {
        let p = HestonParams {
            sigma: 1e-6,
            v0: 0.04,
            theta: 0.04,
            kappa: 3.0,
            rho: -0.3,
            r: 0.04,
            x0: 100.0,
        };
        let c = heston_call(&p, 100.0, 0.3).unwrap();
        let bs = black_scholes_call(100.0, 100.0, 0.04, 0.2, 0.3);
        assert_abs_diff_eq!(c, bs, epsilon = 1e-4);
    }

    #[test]
    fn put_call_parity_from_same_integrals() {
        let p = params();
        for &(k, tau) in &[(70.0, 0.3), (100.0, 0.5), (130.0, 1.0)] {
            let c = heston_call(&p, k, tau).unwrap();
            let put = heston_put(&p, k, tau).unwrap();
            let parity = p.x0 - k * (-p.r * tau).exp();
            assert_abs_diff_eq!(c - put, parity, epsilon = 1e-8);
        }
    }

    #[test]
    fn price_respects_static_bounds_and_monotonicity() {
        let p = params();
        let mut last = f64::INFINITY;
        for &k in &[60.0, 80.0, 100.0, 120.0, 140.0] {
            let c = heston_call(&p, k, 0.4).unwrap();
            let lower = (p.x0 - k * (-p.r * 0.4f64).exp()).max(0.0);
            assert!(c >= lower - 1e-7 && c <= p.x0 + 1e-7);
            assert!(c <= last + 1e-9, "not decreasing in K");
            last = c;
        }
        let mut last = 0.0;
        for &tau in &[0.1, 0.3, 0.6, 1.0] {
            let c = heston_call(&p, 100.0, tau).unwrap();
            assert!(c >= last - 1e-9, "not increasing in tau");
            last = c;
        }
        let mut last = 0.0;
        for &v0 in &[0.01, 0.04, 0.09, 0.16] {
            let c = heston_call(&HestonParams { v0, ..p }, 100.0, 0.4).unwrap();
            assert!(c >= last - 1e-9, "not increasing in v0");
            last = c;
        }
    }
}
