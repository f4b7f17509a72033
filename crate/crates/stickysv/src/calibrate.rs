//! Levenberg-Marquardt calibration of the model to a day's option quotes
//! through the trained network, with the scaling-factor search that maps
//! market price magnitudes into the network's trained input box.
//!
//! The calibrated vector depends on the variant: the full model fits
//! (rho, kappa, theta, sigma, eta, v, xi, y, z), the reduced models drop the
//! absent record level and stickiness, and the Heston baseline fits
//! (rho, kappa, theta, sigma, v) through its semi-analytic pricer with a
//! finite-difference jacobian. Market data are standardized by a per-day
//! divisor `l = x_d / C`; the constant `C` is hill-searched in steps of 10
//! inside (0, 232) because the scaled spot and strikes must stay inside the
//! trained box.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::heston::{heston_call, HestonError, HestonParams};
use crate::model::{InputField, ModelError, ModelVariant};
use crate::net::{self, NetError, NetworkWeights, RawInput};

/// One quote as the calibrator sees it: everything in raw market units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibQuote {
    pub strike: f64,
    /// Time to expiry in years.
    pub tau: f64,
    /// Market mid price.
    pub mid: f64,
    /// Underlying close on the quote day.
    pub spot: f64,
    pub rate: f64,
}

/// Calibrated parameter layout for a variant, in order.
pub fn phi_fields(variant: ModelVariant) -> &'static [InputField] {
    use InputField::*;
    match variant {
        ModelVariant::Svsdu => &[Rho, Kappa, Theta, Sigma, Eta, Var, Xi, RunMax, RunMin],
        ModelVariant::Svsd => &[Rho, Kappa, Theta, Sigma, Var, Xi, RunMax],
        ModelVariant::Svsu => &[Rho, Kappa, Theta, Sigma, Eta, Var, RunMin],
        ModelVariant::Heston => &[Rho, Kappa, Theta, Sigma, Var],
    }
}

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("no quotes to calibrate against")]
    EmptyChain,
    #[error("model and market price vectors differ in length")]
    LengthMismatch,
    #[error("market price {0} is not positive")]
    NonPositiveMarketPrice(f64),
    #[error("normal matrix stayed singular under damping escalation")]
    SingularNormalMatrix,
    #[error("residual vector became non-finite")]
    NonFiniteResidual,
    #[error("phi has {got} entries, expected {want}")]
    PhiLength { got: usize, want: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Heston(#[from] HestonError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmSettings {
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_outer: u64,
    pub stall_tol: f64,
    pub max_consecutive_rejects: u32,
    /// Per-parameter clip box, same order as the phi layout.
    pub bounds: Vec<(f64, f64)>,
}

impl LmSettings {
    pub fn new(bounds: Vec<(f64, f64)>) -> Self {
        LmSettings {
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            max_outer: 10_000,
            stall_tol: 1e-10,
            max_consecutive_rejects: 20,
            bounds,
        }
    }

    /// Default bounds for a network calibration at scaling factor `l`: the
    /// training box intersected with validity. The record levels live in
    /// market units, so their box scales with `l`, and the spot must stay
    /// between them.
    pub fn for_network(w: &NetworkWeights, spot: f64, l: f64) -> Self {
        let b = &w.config.input_box;
        let bounds = phi_fields(w.config.variant)
            .iter()
            .map(|&f| match f {
                InputField::Rho => (-0.999, 0.999),
                InputField::RunMax => ((b.lo_of(f) * l).max(spot), b.hi_of(f) * l),
                InputField::RunMin => (b.lo_of(f) * l, (b.hi_of(f) * l).min(spot)),
                _ => (b.lo_of(f), b.hi_of(f)),
            })
            .collect();
        LmSettings::new(bounds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibStatus {
    /// Perfect fit or a zero-length step at the optimum.
    Converged,
    /// Accepted improvement fell below the stall tolerance.
    StallStopped,
    /// Too many consecutive rejected steps.
    RejectStopped,
    /// Outer iteration cap.
    IterCap,
}

impl CalibStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CalibStatus::Converged => "converged",
            CalibStatus::StallStopped => "stall_stopped",
            CalibStatus::RejectStopped => "reject_stopped",
            CalibStatus::IterCap => "iter_cap",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Fitted parameters, ordered per [`phi_fields`]. Record levels are in
    /// market units.
    pub phi: Vec<f64>,
    /// Scaling constant C = spot / l.
    pub scale_c: f64,
    /// Scaling factor l = spot / C.
    pub scale_factor: f64,
    /// RMSE after each accepted step, starting from the initial point.
    pub rmse_history: Vec<f64>,
    pub status: CalibStatus,
    /// Drawdown ratio x/y, when the variant carries a running maximum.
    pub dd: Option<f64>,
    /// Drawup ratio x/z, when the variant carries a running minimum.
    pub du: Option<f64>,
}

impl CalibrationResult {
    pub fn rmse(&self) -> f64 {
        *self.rmse_history.last().expect("non-empty history")
    }

    pub fn phi_value(&self, variant: ModelVariant, f: InputField) -> Option<f64> {
        phi_fields(variant)
            .iter()
            .position(|&g| g == f)
            .map(|i| self.phi[i])
    }
}

fn rmse_of(r: &[f64]) -> f64 {
    (r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64).sqrt()
}

fn clip(phi: &mut [f64], bounds: &[(f64, f64)]) {
    for (x, (lo, hi)) in phi.iter_mut().zip(bounds.iter()) {
        *x = x.clamp(*lo, *hi);
    }
}

/// Generic damped Gauss-Newton loop: accept a step iff the RMSE drops, then
/// relax the damping; otherwise escalate it. `project` is applied after
/// clipping and may enforce joint constraints (like the Feller condition).
pub fn lm_minimize<R, J, P>(
    residual_fn: R,
    jacobian_fn: J,
    project: P,
    phi0: &[f64],
    settings: &LmSettings,
) -> Result<(Vec<f64>, Vec<f64>, CalibStatus), CalibError>
where
    R: Fn(&[f64]) -> Result<Vec<f64>, CalibError>,
    J: Fn(&[f64]) -> Result<DMatrix<f64>, CalibError>,
    P: Fn(&mut [f64]),
{
    if phi0.len() != settings.bounds.len() {
        return Err(CalibError::PhiLength {
            got: phi0.len(),
            want: settings.bounds.len(),
        });
    }
    let n = phi0.len();
    let mut phi = phi0.to_vec();
    clip(&mut phi, &settings.bounds);
    project(&mut phi);
    let mut resid = residual_fn(&phi)?;
    if !resid.iter().all(|x| x.is_finite()) {
        return Err(CalibError::NonFiniteResidual);
    }
    let mut best = rmse_of(&resid);
    let mut history = vec![best];
    let mut jac = jacobian_fn(&phi)?;
    let mut lambda = settings.lambda0;
    let mut rejects: u32 = 0;
    // best RMSE at the end of the previous outer iteration; the stall test
    // compares a freshly accepted RMSE against it
    let mut prev_iter_best = f64::INFINITY;
    let mut status = CalibStatus::IterCap;
    for _ in 0..settings.max_outer {
        let jt = jac.transpose();
        let mut normal = &jt * &jac;
        let grad = &jt * DVector::from_column_slice(&resid);
        for i in 0..n {
            normal[(i, i)] += lambda;
        }
        let step = match Cholesky::new(normal) {
            Some(ch) => ch.solve(&grad),
            None => {
                lambda *= settings.lambda_up;
                if lambda > 1e16 {
                    return Err(CalibError::SingularNormalMatrix);
                }
                continue;
            }
        };
        let step_norm = step.amax();
        let phi_scale = phi.iter().fold(1.0f64, |a, x| a.max(x.abs()));
        if step_norm <= 1e-14 * phi_scale {
            status = CalibStatus::Converged;
            break;
        }
        let mut phi_new: Vec<f64> = phi.iter().zip(step.iter()).map(|(p, s)| p - s).collect();
        clip(&mut phi_new, &settings.bounds);
        project(&mut phi_new);
        let resid_new = residual_fn(&phi_new)?;
        if !resid_new.iter().all(|x| x.is_finite()) {
            return Err(CalibError::NonFiniteResidual);
        }
        let rmse_new = rmse_of(&resid_new);
        if rmse_new < best {
            phi = phi_new;
            resid = resid_new;
            best = rmse_new;
            history.push(best);
            lambda /= settings.lambda_down;
            rejects = 0;
            if best <= settings.stall_tol {
                status = CalibStatus::Converged;
                break;
            }
            if (best - prev_iter_best).abs() < settings.stall_tol {
                status = CalibStatus::StallStopped;
                break;
            }
            jac = jacobian_fn(&phi)?;
        } else {
            lambda *= settings.lambda_up;
            rejects += 1;
            if rejects > settings.max_consecutive_rejects {
                status = CalibStatus::RejectStopped;
                break;
            }
        }
        prev_iter_best = best;
    }
    Ok((phi, history, status))
}

fn raw_input_for(
    variant: ModelVariant,
    quote: &CalibQuote,
    phi: &[f64],
    l: f64,
) -> RawInput {
    let x = quote.spot / l;
    let mut raw = RawInput {
        t: 0.0,
        x,
        y: x,
        z: x,
        v: 0.04,
        strike: quote.strike / l,
        rate: quote.rate,
        rho: 0.0,
        kappa: 1.0,
        theta: 0.04,
        sigma: 0.2,
        eta: 0.0,
        maturity: quote.tau,
        xi: 0.0,
    };
    for (&f, &value) in phi_fields(variant).iter().zip(phi.iter()) {
        match f {
            InputField::RunMax | InputField::RunMin => raw.set(f, value / l),
            _ => raw.set(f, value),
        }
    }
    raw
}

/// Residual vector of the scaled least-squares problem: network price at the
/// scaled inputs minus the scaled market mid, one entry per quote.
pub fn residual_vector(
    w: &NetworkWeights,
    quotes: &[CalibQuote],
    phi: &[f64],
    l: f64,
) -> Result<Vec<f64>, CalibError> {
    if quotes.is_empty() {
        return Err(CalibError::EmptyChain);
    }
    expect_phi_len(w.config.variant, phi)?;
    quotes
        .iter()
        .map(|q| {
            let raw = raw_input_for(w.config.variant, q, phi, l);
            Ok(net::forward(w, &raw)? - q.mid / l)
        })
        .collect()
}

/// Jacobian of [`residual_vector`] with respect to phi, from the network's
/// exact input gradients (record levels pick up a 1/l from the scaling).
pub fn residual_jacobian(
    w: &NetworkWeights,
    quotes: &[CalibQuote],
    phi: &[f64],
    l: f64,
) -> Result<DMatrix<f64>, CalibError> {
    if quotes.is_empty() {
        return Err(CalibError::EmptyChain);
    }
    expect_phi_len(w.config.variant, phi)?;
    let fields = phi_fields(w.config.variant);
    let mut jac = DMatrix::zeros(quotes.len(), fields.len());
    for (i, q) in quotes.iter().enumerate() {
        let raw = raw_input_for(w.config.variant, q, phi, l);
        let grads = net::param_jacobian(w, &raw, fields)?;
        for (j, (&f, g)) in fields.iter().zip(grads.iter()).enumerate() {
            jac[(i, j)] = match f {
                InputField::RunMax | InputField::RunMin => g / l,
                _ => *g,
            };
        }
    }
    Ok(jac)
}

fn expect_phi_len(variant: ModelVariant, phi: &[f64]) -> Result<(), CalibError> {
    let want = phi_fields(variant).len();
    if phi.len() != want {
        return Err(CalibError::PhiLength {
            got: phi.len(),
            want,
        });
    }
    Ok(())
}

/// Count of quotes whose scaled spot or strike leaves the trained box; a
/// warning signal for the chosen scaling factor.
pub fn scale_out_of_box(w: &NetworkWeights, quotes: &[CalibQuote], l: f64) -> usize {
    let b = &w.config.input_box;
    quotes
        .iter()
        .filter(|q| {
            let x = q.spot / l;
            let k = q.strike / l;
            x < b.lo_of(InputField::Spot)
                || x >= b.hi_of(InputField::Spot)
                || k < b.lo_of(InputField::Strike)
                || k >= b.hi_of(InputField::Strike)
        })
        .count()
}

/// Projection used by network calibrations: after the box clip, pull sigma
/// under the Feller bound.
fn feller_project(variant: ModelVariant, phi: &mut [f64]) {
    let fields = phi_fields(variant);
    let idx = |f: InputField| fields.iter().position(|&g| g == f);
    if let (Some(ik), Some(it), Some(is)) =
        (idx(InputField::Kappa), idx(InputField::Theta), idx(InputField::Sigma))
    {
        let cap = (2.0 * phi[ik] * phi[it]).sqrt();
        if phi[is] * phi[is] >= 2.0 * phi[ik] * phi[it] {
            phi[is] = cap * (1.0 - 1e-9);
        }
    }
}

/// Calibrate the network to a day's quotes at a fixed scaling factor `l`.
pub fn lm_calibrate(
    w: &NetworkWeights,
    quotes: &[CalibQuote],
    phi0: &[f64],
    settings: &LmSettings,
    l: f64,
) -> Result<CalibrationResult, CalibError> {
    if quotes.is_empty() {
        return Err(CalibError::EmptyChain);
    }
    let variant = w.config.variant;
    let (phi, history, status) = lm_minimize(
        |p| residual_vector(w, quotes, p, l),
        |p| residual_jacobian(w, quotes, p, l),
        |p| feller_project(variant, p),
        phi0,
        settings,
    )?;
    let spot = quotes[0].spot;
    let result = CalibrationResult {
        scale_c: spot / l,
        scale_factor: l,
        dd: phi_fields(variant)
            .iter()
            .position(|&f| f == InputField::RunMax)
            .map(|i| spot / phi[i]),
        du: phi_fields(variant)
            .iter()
            .position(|&f| f == InputField::RunMin)
            .map(|i| spot / phi[i]),
        phi,
        rmse_history: history,
        status,
    };
    Ok(result)
}

/// Midpoints of the bounds box: the documented default start for a first
/// calibration day.
pub fn default_phi0(settings: &LmSettings) -> Vec<f64> {
    settings
        .bounds
        .iter()
        .map(|(lo, hi)| 0.5 * (lo + hi))
        .collect()
}

/// Hill descent on a scalar function over the lattice `c0 + k h` inside
/// `(lo, hi)`, stopping when a probe beats both neighbours or the budget of
/// distinct evaluations runs out. Returns the best probe and its value.
pub fn hill_descend<F>(
    mut f: F,
    c0: f64,
    h: f64,
    lo: f64,
    hi: f64,
    budget: usize,
) -> Result<(f64, f64, usize), CalibError>
where
    F: FnMut(f64) -> Result<f64, CalibError>,
{
    let mut cache: Vec<(f64, f64)> = Vec::new();
    let mut used = 0usize;
    let mut eval = |c: f64, used: &mut usize| -> Result<Option<f64>, CalibError> {
        if c <= lo || c >= hi {
            return Ok(None);
        }
        if let Some(&(_, v)) = cache.iter().find(|(k, _)| (k - c).abs() < 1e-9) {
            return Ok(Some(v));
        }
        if *used >= budget {
            return Ok(None);
        }
        *used += 1;
        let v = f(c)?;
        cache.push((c, v));
        Ok(Some(v))
    };
    let mut cur = c0;
    let mut cur_val = match eval(cur, &mut used)? {
        Some(v) => v,
        None => return Err(CalibError::EmptyChain),
    };
    loop {
        let left = eval(cur - h, &mut used)?;
        let right = eval(cur + h, &mut used)?;
        let best_neighbor = [(cur - h, left), (cur + h, right)]
            .into_iter()
            .filter_map(|(c, v)| v.map(|v| (c, v)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        match best_neighbor {
            Some((c, v)) if v < cur_val => {
                cur = c;
                cur_val = v;
            }
            _ => break,
        }
        if used >= budget {
            break;
        }
    }
    // the budget may have cut the search; report the best cached probe
    let (c_best, v_best) = cache
        .iter()
        .cloned()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .expect("at least one probe");
    Ok((c_best, v_best, used))
}

/// Find the scaling constant C whose calibration RMSE beats both lattice
/// neighbours C +- h, running one LM calibration per probe; the best probe's
/// calibration is returned. Each day's search is typically seeded with the
/// previous day's optimum.
pub fn scaling_search(
    w: &NetworkWeights,
    quotes: &[CalibQuote],
    phi0: Option<&[f64]>,
    c_init: f64,
    h_step: f64,
    budget: usize,
) -> Result<(f64, CalibrationResult), CalibError> {
    if quotes.is_empty() {
        return Err(CalibError::EmptyChain);
    }
    let spot = quotes[0].spot;
    let mut results: Vec<(f64, CalibrationResult)> = Vec::new();
    let (c_best, _, _) = hill_descend(
        |c| {
            let l = spot / c;
            let settings = LmSettings::for_network(w, spot, l);
            let start = match phi0 {
                Some(p) => p.to_vec(),
                None => default_phi0(&settings),
            };
            let r = lm_calibrate(w, quotes, &start, &settings, l)?;
            let rmse = r.rmse();
            results.push((c, r));
            Ok(rmse)
        },
        c_init,
        h_step,
        0.0,
        232.0,
        budget,
    )?;
    let best = results
        .into_iter()
        .find(|(c, _)| (c - c_best).abs() < 1e-9)
        .expect("best probe recorded");
    Ok(best)
}

/// Average percentage error and average absolute error between model and
/// market prices, in raw price units.
pub fn metrics(model: &[f64], market: &[f64]) -> Result<(f64, f64), CalibError> {
    if model.len() != market.len() || model.is_empty() {
        return Err(CalibError::LengthMismatch);
    }
    let mut abs_sum = 0.0;
    let mut mkt_sum = 0.0;
    for (&m, &p) in model.iter().zip(market.iter()) {
        if !(p > 0.0) {
            return Err(CalibError::NonPositiveMarketPrice(p));
        }
        abs_sum += (m - p).abs();
        mkt_sum += p;
    }
    Ok((abs_sum / mkt_sum, abs_sum / model.len() as f64))
}

/// Carry yesterday's record levels to today's spot while preserving the
/// drawdown and drawup ratios exactly.
pub fn roll_ratios(
    y_prev: f64,
    z_prev: f64,
    x_prev: f64,
    x_curr: f64,
) -> Result<(f64, f64), CalibError> {
    for v in [y_prev, z_prev, x_prev, x_curr] {
        if !(v > 0.0) {
            return Err(CalibError::Model(ModelError::NonPositive("roll input")));
        }
    }
    if !(z_prev <= x_prev && x_prev <= y_prev) {
        return Err(CalibError::Model(ModelError::OrderingViolation {
            z0: z_prev,
            x0: x_prev,
            y0: y_prev,
        }));
    }
    Ok((x_curr * y_prev / x_prev, x_curr * z_prev / x_prev))
}

/// Residuals of the Heston baseline for the same quote layout; prices come
/// from the semi-analytic pricer, so no scaling factor is needed.
pub fn heston_residual_vector(quotes: &[CalibQuote], phi: &[f64]) -> Result<Vec<f64>, CalibError> {
    if quotes.is_empty() {
        return Err(CalibError::EmptyChain);
    }
    expect_phi_len(ModelVariant::Heston, phi)?;
    let p = HestonParams {
        r: quotes[0].rate,
        kappa: phi[1],
        theta: phi[2],
        sigma: phi[3],
        rho: phi[0],
        v0: phi[4],
        x0: quotes[0].spot,
    };
    quotes
        .iter()
        .map(|q| {
            let hp = HestonParams {
                r: q.rate,
                ..p
            };
            Ok(heston_call(&hp, q.strike, q.tau)? - q.mid)
        })
        .collect()
}

/// Heston calibration: the same LM core with a central finite-difference
/// jacobian on the pricer.
pub fn lm_calibrate_heston(
    quotes: &[CalibQuote],
    phi0: &[f64],
    settings: &LmSettings,
) -> Result<CalibrationResult, CalibError> {
    let jac = |phi: &[f64]| -> Result<DMatrix<f64>, CalibError> {
        let n = phi.len();
        let base_len = quotes.len();
        let mut out = DMatrix::zeros(base_len, n);
        for j in 0..n {
            let hstep = 1e-5 * (1.0 + phi[j].abs());
            let mut up = phi.to_vec();
            up[j] += hstep;
            let mut dn = phi.to_vec();
            dn[j] -= hstep;
            let ru = heston_residual_vector(quotes, &up)?;
            let rd = heston_residual_vector(quotes, &dn)?;
            for i in 0..base_len {
                out[(i, j)] = (ru[i] - rd[i]) / (2.0 * hstep);
            }
        }
        Ok(out)
    };
    let (phi, history, status) = lm_minimize(
        |p| heston_residual_vector(quotes, p),
        jac,
        |p| feller_project(ModelVariant::Heston, p),
        phi0,
        settings,
    )?;
    Ok(CalibrationResult {
        phi,
        scale_c: quotes[0].spot,
        scale_factor: 1.0,
        rmse_history: history,
        status,
        dd: None,
        du: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_network, NetworkConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_net() -> NetworkWeights {
        init_network(&NetworkConfig::new(ModelVariant::Svsdu, 1, 10), 3)
    }

    fn day_quotes(spot: f64, n: usize) -> Vec<CalibQuote> {
        (0..n)
            .map(|i| CalibQuote {
                strike: 60.0 + 10.0 * i as f64,
                tau: 0.1 + 0.05 * (i % 4) as f64,
                mid: 1.0,
                spot,
                rate: 0.03,
            })
            .collect()
    }

    fn phi_for(w: &NetworkWeights) -> Vec<f64> {
        let settings = LmSettings::for_network(w, 100.0, 1.0);
        default_phi0(&settings)
    }

    #[test]
    fn self_generated_quotes_have_zero_residuals() {
        let w = tiny_net();
        let phi = phi_for(&w);
        let mut quotes = day_quotes(100.0, 6);
        for q in quotes.iter_mut() {
            let raw = super::raw_input_for(w.config.variant, q, &phi, 1.0);
            q.mid = net::forward(&w, &raw).unwrap();
        }
        let r = residual_vector(&w, &quotes, &phi, 1.0).unwrap();
        for x in r {
            assert_abs_diff_eq!(x, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn residuals_are_invariant_under_joint_scaling() {
        let w = tiny_net();
        let mut phi = phi_for(&w);
        let quotes = day_quotes(100.0, 5);
        let r1 = residual_vector(&w, &quotes, &phi, 1.0).unwrap();
        let c = 37.5;
        let scaled: Vec<CalibQuote> = quotes
            .iter()
            .map(|q| CalibQuote {
                strike: q.strike * c,
                mid: q.mid * c,
                spot: q.spot * c,
                ..*q
            })
            .collect();
        // record levels scale with the quotes
        let fields = phi_fields(w.config.variant);
        for (i, f) in fields.iter().enumerate() {
            if matches!(f, InputField::RunMax | InputField::RunMin) {
                phi[i] *= c;
            }
        }
        let r2 = residual_vector(&w, &scaled, &phi, c).unwrap();
        for (a, b) in r1.iter().zip(r2.iter()) {
            // residuals are in scaled units and the scaled problem is
            // identical, up to rounding of the divisions
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn one_quote_chain_gives_length_one_vector() {
        let w = tiny_net();
        let phi = phi_for(&w);
        let r = residual_vector(&w, &day_quotes(100.0, 1), &phi, 1.0).unwrap();
        assert_eq!(r.len(), 1);
        assert!(matches!(
            residual_vector(&w, &[], &phi, 1.0),
            Err(CalibError::EmptyChain)
        ));
    }

    #[test]
    fn affine_residuals_converge_in_one_accepted_step() {
        // residual(phi) = A phi - b: Gauss-Newton is exact, so any start
        // reaches the optimum after the first accepted step
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.7, -2.0, 1.4]);
        let b = DVector::from_column_slice(&[1.0, 0.3, -0.6, 2.0]);
        let resid = |phi: &[f64]| -> Result<Vec<f64>, CalibError> {
            let p = DVector::from_column_slice(phi);
            Ok((&a * p - &b).iter().cloned().collect())
        };
        let jac = |_: &[f64]| -> Result<DMatrix<f64>, CalibError> { Ok(a.clone()) };
        let mut settings = LmSettings::new(vec![(-100.0, 100.0); 2]);
        settings.lambda0 = 1e-12; // negligible damping: pure Gauss-Newton
        let (phi, history, _) =
            lm_minimize(resid, jac, |_| {}, &[7.0, -5.0], &settings).unwrap();
        // optimum of the normal equations
        let opt = (a.transpose() * &a)
            .cholesky()
            .unwrap()
            .solve(&(a.transpose() * &b));
        assert!(history.len() >= 2);
        let after_one = history[1];
        let opt_rmse = rmse_of(&resid(opt.as_slice()).unwrap());
        assert_abs_diff_eq!(after_one, opt_rmse, epsilon = 1e-8);
        assert_abs_diff_eq!(phi[0], opt[0], epsilon = 1e-6);
        assert_abs_diff_eq!(phi[1], opt[1], epsilon = 1e-6);
    }

    #[test]
    fn accepted_steps_strictly_decrease_rmse() {
        let w = tiny_net();
        let phi_true = phi_for(&w);
        let mut quotes = day_quotes(100.0, 8);
        for q in quotes.iter_mut() {
            let raw = super::raw_input_for(w.config.variant, q, &phi_true, 1.0);
            q.mid = net::forward(&w, &raw).unwrap();
        }
        let mut phi0 = phi_true.clone();
        for p in phi0.iter_mut() {
            *p *= 1.07;
        }
        let settings = LmSettings::for_network(&w, 100.0, 1.0);
        let result = lm_calibrate(&w, &quotes, &phi0, &settings, 1.0).unwrap();
        for pair in result.rmse_history.windows(2) {
            assert!(pair[1] < pair[0], "history not strictly decreasing");
        }
    }

    #[test]
    fn zero_length_step_at_optimum_converges_unchanged() {
        // gradient is zero at the start: J^T r = 0
        let resid = |phi: &[f64]| -> Result<Vec<f64>, CalibError> {
            Ok(vec![phi[0] * phi[0]]) // minimum at 0 with zero gradient
        };
        let jac = |phi: &[f64]| -> Result<DMatrix<f64>, CalibError> {
            Ok(DMatrix::from_row_slice(1, 1, &[2.0 * phi[0]]))
        };
        let settings = LmSettings::new(vec![(-10.0, 10.0)]);
        let (phi, history, status) = lm_minimize(resid, jac, |_| {}, &[0.0], &settings).unwrap();
        assert_eq!(status, CalibStatus::Converged);
        assert_eq!(phi, vec![0.0]);
        assert_eq!(history.len(), 1);
    }

    #[test]
    fn hill_descent_finds_grid_minimum_of_unimodal_profile() {
        // exhaustive oracle over the same lattice
        let f = |c: f64| Ok((c - 87.0) * (c - 87.0) + 3.0);
        for c0 in [17.0, 57.0, 87.0, 147.0, 227.0] {
            let (c_star, _, _) = hill_descend(f, c0, 10.0, 0.0, 232.0, 200).unwrap();
            let mut best = (f64::INFINITY, 0.0);
            let mut c = c0;
            while c - 10.0 > 0.0 {
                c -= 10.0;
            }
            while c < 232.0 {
                let v: f64 = f(c).unwrap();
                let v = v;
                if v < best.0 {
                    best = (v, c);
                }
                c += 10.0;
            }
            assert_abs_diff_eq!(c_star, best.1, epsilon = 1e-9);
        }
    }

    #[test]
    fn hill_descent_at_optimum_uses_three_probes() {
        let f = |c: f64| Ok((c - 100.0) * (c - 100.0));
        let (c_star, _, used) = hill_descend(f, 100.0, 10.0, 0.0, 232.0, 23).unwrap();
        assert_eq!(used, 3);
        assert_abs_diff_eq!(c_star, 100.0, epsilon = 1e-12);
    }

    #[test]
    fn metrics_examples() {
        let (ape, aae) = metrics(&[10.0, 20.0], &[10.0, 20.0]).unwrap();
        assert_eq!((ape, aae), (0.0, 0.0));
        let (ape, aae) = metrics(&[11.0, 19.0], &[10.0, 20.0]).unwrap();
        assert_abs_diff_eq!(ape, 2.0 / 30.0, epsilon = 1e-15);
        assert_abs_diff_eq!(aae, 1.0, epsilon = 1e-15);
        assert!(matches!(
            metrics(&[1.0], &[1.0, 2.0]),
            Err(CalibError::LengthMismatch)
        ));
        assert!(matches!(
            metrics(&[1.0], &[0.0]),
            Err(CalibError::NonPositiveMarketPrice(_))
        ));
    }

    #[test]
    fn metrics_identities() {
        let model = [3.0, 7.5, 1.2, 9.9];
        let market = [2.5, 8.0, 1.0, 10.0];
        let (ape, aae) = metrics(&model, &market).unwrap();
        // permutation invariance
        let (ape2, aae2) = metrics(&[7.5, 3.0, 9.9, 1.2], &[8.0, 2.5, 10.0, 1.0]).unwrap();
        assert_abs_diff_eq!(ape, ape2, epsilon = 1e-15);
        assert_abs_diff_eq!(aae, aae2, epsilon = 1e-15);
        let max_abs = model
            .iter()
            .zip(market.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(aae <= max_abs);
        let mkt_sum: f64 = market.iter().sum();
        assert_abs_diff_eq!(ape * mkt_sum, 4.0 * aae, epsilon = 1e-12);
    }

    #[test]
    fn roll_ratios_examples_and_invariants() {
        assert_eq!(roll_ratios(101.0, 49.0, 100.0, 100.0).unwrap(), (101.0, 49.0));
        let (y, z) = roll_ratios(101.0, 49.0, 100.0, 200.0).unwrap();
        assert_abs_diff_eq!(y, 202.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z, 98.0, epsilon = 1e-12);
        let (y, z) = roll_ratios(101.0, 49.0, 100.0, 98.0).unwrap();
        assert_abs_diff_eq!(y, 98.98, epsilon = 1e-12);
        assert_abs_diff_eq!(z, 48.02, epsilon = 1e-12);
        // ratio preservation to 1e-14
        let (y, z) = roll_ratios(103.7, 52.9, 97.3, 142.6).unwrap();
        assert_abs_diff_eq!(142.6 / y, 97.3 / 103.7, epsilon = 1e-14);
        assert_abs_diff_eq!(142.6 / z, 97.3 / 52.9, epsilon = 1e-14);
        assert!(roll_ratios(90.0, 95.0, 100.0, 100.0).is_err());
    }

    #[test]
    fn heston_affine_smoke_recovers_variance() {
        // quotes generated by the pricer itself at a known parameter set
        let truth = [-0.4, 2.0, 0.05, 0.3, 0.045];
        let quotes: Vec<CalibQuote> = [80.0, 90.0, 100.0, 110.0, 120.0]
            .iter()
            .flat_map(|&k| {
                [0.25, 0.5].iter().map(move |&tau| {
                    let p = HestonParams {
                        r: 0.03,
                        kappa: truth[1],
                        theta: truth[2],
                        sigma: truth[3],
                        rho: truth[0],
                        v0: truth[4],
                        x0: 100.0,
                    };
                    CalibQuote {
                        strike: k,
                        tau,
                        mid: heston_call(&p, k, tau).unwrap(),
                        spot: 100.0,
                        rate: 0.03,
                    }
                })
            })
            .collect();
        let settings = LmSettings::new(vec![
            (-0.95, 0.0),
            (0.5, 5.0),
            (0.01, 0.5),
            (0.05, 1.0),
            (0.005, 0.3),
        ]);
        let phi0 = [-0.3, 1.5, 0.07, 0.35, 0.06];
        let out = lm_calibrate_heston(&quotes, &phi0, &settings).unwrap();
        assert!(
            (out.phi[4] - truth[4]).abs() < 2e-3,
            "v0 not recovered: {:?}",
            out.phi
        );
        assert!(out.rmse() < 1e-3, "rmse {}", out.rmse());
    }
}
