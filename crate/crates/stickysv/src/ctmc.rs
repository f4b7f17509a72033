//! Continuous-time Markov chain simulation of the sticky diffusion and Monte
//! Carlo pricing on top of it.
//!
//! The simulated state is the 5-vector
//! `(ln D, ln U, V, ln Smax, ln Smin)`: log drawdown (<= 0), log drawup
//! (>= 0), variance, and the log record levels. In the interior the chain
//! moves along the drift vector and the eigenvectors of the diffusion
//! covariance; on a sticky boundary it moves along the boundary drift (the
//! local-time push scaled by the stickiness coefficient) and the variance
//! direction. Transition rates match the first two moments of the SDE, and
//! step sizes are clamped so that no move ever crosses a boundary: a move can
//! land exactly on `ln D = 0` or `ln U = 0`, which is how the chain enters
//! the sticky regime. Boundary membership is therefore exact equality, never
//! a tolerance test.

use nalgebra::{Matrix3, Matrix5, SymmetricEigen, Vector5};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{payoff, validate_params, ContractSpec, ModelError, ModelParams};

/// Eigenvalues below `RELATIVE_EIGEN_TOL * lambda_max` carry no transition.
const RELATIVE_EIGEN_TOL: f64 = 1e-14;
/// Eigenvector components below this are treated as exact zeros so that
/// moves along the variance direction do not perturb boundary membership.
const COMPONENT_TOL: f64 = 1e-12;
/// Step sizes are floored here so rates stay finite even pathologically
/// close to a boundary.
const MIN_STEP: f64 = 1e-120;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtmcState {
    /// Log drawdown, <= 0; exactly 0 on the running-maximum boundary.
    pub ln_dd: f64,
    /// Log drawup, >= 0; exactly 0 on the running-minimum boundary.
    pub ln_du: f64,
    /// Variance, > 0.
    pub v: f64,
    /// Log running maximum of the asset value.
    pub ln_smax: f64,
    /// Log running minimum of the asset value.
    pub ln_smin: f64,
    /// Elapsed time.
    pub clock: f64,
}

impl CtmcState {
    pub fn initial(p: &ModelParams) -> Self {
        CtmcState {
            ln_dd: (p.x0 / p.y0).ln(),
            ln_du: (p.x0 / p.z0).ln(),
            v: p.v0,
            ln_smax: p.y0.ln(),
            ln_smin: p.z0.ln(),
            clock: 0.0,
        }
    }

    pub fn regime(&self) -> Regime {
        if self.ln_dd == 0.0 {
            Regime::AtMax
        } else if self.ln_du == 0.0 {
            Regime::AtMin
        } else {
            Regime::Interior
        }
    }

    /// Log asset value recovered from the maximum route.
    pub fn ln_spot(&self) -> f64 {
        self.ln_smax + self.ln_dd
    }

    /// Log asset value recovered from the minimum route; agrees with
    /// [`CtmcState::ln_spot`] up to accumulated rounding.
    pub fn ln_spot_alt(&self) -> f64 {
        self.ln_smin + self.ln_du
    }

    pub fn spot(&self) -> f64 {
        self.ln_spot().exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Interior,
    AtMax,
    AtMin,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Interior => "interior",
            Regime::AtMax => "at_max",
            Regime::AtMin => "at_min",
        }
    }
}

/// Which sticky coordinate a clamped move lands on exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StickyCoord {
    Dd,
    Du,
}

/// One admissible move of the chain: displacement `step * direction` taken
/// at `rate` per unit time. `snap` marks a move that lands exactly on a
/// sticky boundary.
#[derive(Debug, Clone)]
pub struct Transition {
    pub direction: Vector5<f64>,
    pub step: f64,
    pub rate: f64,
    pub snap: Option<StickyCoord>,
}

#[derive(Debug, Clone, Default)]
pub struct TransitionScheme {
    pub transitions: Vec<Transition>,
    pub total_rate: f64,
}

#[derive(Debug, Error)]
pub enum CtmcError {
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("covariance matrix is not symmetric (asymmetry {0})")]
    NotSymmetric(f64),
    #[error("covariance eigenvalue {0} below -1e-10")]
    NegativeEigenvalue(f64),
    #[error("zero step: direction moves a sticky coordinate while sitting on its boundary")]
    ZeroStep,
    #[error("step budget {0} exceeded; base step too small or rates blew up")]
    StepBudgetExceeded(u64),
    #[error("boundary dynamics requested with zero stickiness coefficient")]
    ZeroStickiness,
    #[error(
        "variance floor engaged on {clamps} of {steps} steps (> 0.1%); decrease the base step"
    )]
    ExcessiveVarianceClamping { clamps: u64, steps: u64 },
    #[error("asset reconstructions diverged: |{0}| after {1} steps")]
    StateInconsistent(f64, u64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Drift vector and diffusion covariance of the 5-dimensional dynamics for
/// the given regime.
///
/// Interior: drift `(-v/2, -v/2, kappa(theta - v), r, r)` and covariance with
/// the (ln D, ln U, V) block filled from loadings
/// `(sqrt(v); sqrt(v); sigma sqrt(v) rho, sigma sqrt(v) sqrt(1-rho^2))`.
/// Boundary: the local-time push `1/xi` (resp. `1/eta`) moves the sticky pair
/// and its record level, the variance keeps its own drift, and only the
/// variance row diffuses.
pub fn drift_and_covariance(
    s: &CtmcState,
    p: &ModelParams,
    regime: Regime,
) -> Result<(Vector5<f64>, Matrix5<f64>), CtmcError> {
    if !(s.v > 0.0) {
        return Err(CtmcError::NonPositiveVariance(s.v));
    }
    let v = s.v;
    let var_drift = p.kappa * (p.theta - v);
    match regime {
        Regime::Interior => {
            let drift = Vector5::new(-0.5 * v, -0.5 * v, var_drift, p.r, p.r);
            let sv_rho = p.sigma * v * p.rho;
            let mut a = Matrix5::zeros();
            a[(0, 0)] = v;
            a[(0, 1)] = v;
            a[(1, 0)] = v;
            a[(1, 1)] = v;
            a[(0, 2)] = sv_rho;
            a[(2, 0)] = sv_rho;
            a[(1, 2)] = sv_rho;
            a[(2, 1)] = sv_rho;
            a[(2, 2)] = p.sigma * p.sigma * v;
            Ok((drift, a))
        }
        Regime::AtMax => {
            let xi = p.xi_eff();
            if xi == 0.0 {
                return Err(CtmcError::ZeroStickiness);
            }
            let drift = Vector5::new(-1.0 / xi, 0.0, var_drift, 1.0 / xi + p.r, p.r);
            let mut g = Matrix5::zeros();
            g[(2, 2)] = p.sigma * p.sigma * v;
            Ok((drift, g))
        }
        Regime::AtMin => {
            let eta = p.eta_eff();
            if eta == 0.0 {
                return Err(CtmcError::ZeroStickiness);
            }
            let drift = Vector5::new(0.0, 1.0 / eta, var_drift, p.r, -1.0 / eta + p.r);
            let mut g = Matrix5::zeros();
            g[(2, 2)] = p.sigma * p.sigma * v;
            Ok((drift, g))
        }
    }
}

fn sanitize_eigenvector(mut u: Vector5<f64>) -> Vector5<f64> {
    for i in 0..5 {
        if u[i].abs() < COMPONENT_TOL {
            u[i] = 0.0;
        }
    }
    let n = u.norm();
    if n > 0.0 {
        u /= n;
    }
    u
}

/// Spectral decomposition of a symmetric PSD matrix, dropping eigenpairs with
/// `lambda < 1e-14 * lambda_max`. Components of the retained eigenvectors
/// below 1e-12 are zeroed (and the vector renormalized) so that directions
/// which do not genuinely move a sticky coordinate are exactly flat there.
pub fn eigendecompose_covariance(
    a: &Matrix5<f64>,
) -> Result<Vec<(f64, Vector5<f64>)>, CtmcError> {
    let mut asym: f64 = 0.0;
    let mut maxabs: f64 = 0.0;
    for i in 0..5 {
        for j in 0..5 {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
            maxabs = maxabs.max(a[(i, j)].abs());
        }
    }
    if asym > 1e-12 * maxabs.max(1.0) {
        return Err(CtmcError::NotSymmetric(asym));
    }
    let eig = SymmetricEigen::new(*a);
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::new();
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -1e-10 {
            return Err(CtmcError::NegativeEigenvalue(lam));
        }
        if lam <= RELATIVE_EIGEN_TOL * lambda_max || lam <= 0.0 {
            continue;
        }
        out.push((lam, sanitize_eigenvector(eig.eigenvectors.column(i).into())));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Clamped {
    step: f64,
    /// Sticky coordinate hit exactly when moving along +direction.
    hit_plus: Option<StickyCoord>,
    /// Sticky coordinate hit exactly when moving along -direction.
    hit_minus: Option<StickyCoord>,
}

fn clamp_with_hits(
    s: &CtmcState,
    u: &Vector5<f64>,
    h: f64,
    one_sided: bool,
) -> Result<Clamped, CtmcError> {
    let coords = [(s.ln_dd, u[0], StickyCoord::Dd), (s.ln_du, u[1], StickyCoord::Du)];
    let mut step = h;
    for &(val, ui, coord) in &coords {
        if ui == 0.0 {
            continue;
        }
        if val == 0.0 {
            // Sitting on this boundary. A +move that leaves it on the legal
            // side is fine for one-sided (drift) directions; a paired +-
            // direction cannot avoid crossing on one side.
            let leaves_legally = match coord {
                StickyCoord::Dd => ui < 0.0,
                StickyCoord::Du => ui > 0.0,
            };
            if one_sided && leaves_legally {
                continue;
            }
            return Err(CtmcError::ZeroStep);
        }
        step = step.min((val / ui).abs());
    }
    step = step.max(MIN_STEP);
    let mut hit_plus = None;
    let mut hit_minus = None;
    for &(val, ui, coord) in &coords {
        if ui == 0.0 || val == 0.0 {
            continue;
        }
        if (val / ui).abs() == step {
            // The move with sign pushing this coordinate toward 0 lands on
            // the boundary exactly.
            let landing_sign = if val < 0.0 { ui.signum() } else { -ui.signum() };
            if landing_sign > 0.0 {
                hit_plus.get_or_insert(coord);
            } else {
                hit_minus.get_or_insert(coord);
            }
        }
    }
    if one_sided {
        hit_minus = None;
    }
    Ok(Clamped {
        step,
        hit_plus,
        hit_minus,
    })
}

/// Shared clamped step for the pair `+u`, `-u`: the base step `h` shrunk by
/// the distance to each sticky boundary along the direction, so that a move
/// never crosses `ln D > 0` or `ln U < 0` (landing exactly on 0 is allowed).
pub fn clamp_step(s: &CtmcState, u: &Vector5<f64>, h: f64) -> Result<f64, CtmcError> {
    Ok(clamp_with_hits(s, u, h, false)?.step)
}

/// Build the full transition scheme at the current state: the (regime
/// dependent) drift direction at rate `1/h_mu` plus `+-u_i` for each retained
/// covariance eigenpair at rate `lambda_i / (2 h_i^2)`, all steps clamped per
/// direction.
pub fn build_transitions(
    s: &CtmcState,
    p: &ModelParams,
    h: f64,
) -> Result<TransitionScheme, CtmcError> {
    let regime = s.regime();
    let (drift, cov) = drift_and_covariance(s, p, regime)?;
    let pairs = eigendecompose_covariance(&cov)?;
    let mut scheme = TransitionScheme::default();
    push_transitions(&mut scheme.transitions, s, &drift, &pairs, h)?;
    scheme.total_rate = scheme.transitions.iter().map(|t| t.rate).sum();
    Ok(scheme)
}

fn push_transitions(
    out: &mut Vec<Transition>,
    s: &CtmcState,
    drift: &Vector5<f64>,
    pairs: &[(f64, Vector5<f64>)],
    h: f64,
) -> Result<(), CtmcError> {
    let c = clamp_with_hits(s, drift, h, true)?;
    out.push(Transition {
        direction: *drift,
        step: c.step,
        rate: 1.0 / c.step,
        snap: c.hit_plus,
    });
    for &(lam, ref u) in pairs {
        let c = clamp_with_hits(s, u, h, false)?;
        let rate = lam / (2.0 * c.step * c.step);
        out.push(Transition {
            direction: *u,
            step: c.step,
            rate,
            snap: c.hit_plus,
        });
        out.push(Transition {
            direction: -u,
            step: c.step,
            rate,
            snap: c.hit_minus,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    /// Base spatial step of the chain.
    pub h: f64,
    /// Hard cap on transitions per path.
    pub step_budget: u64,
    /// Variance value a transition is shortened onto instead of crossing 0.
    pub v_floor: f64,
}

impl SimConfig {
    pub fn new(h: f64) -> Self {
        SimConfig {
            h,
            step_budget: 10_000_000,
            v_floor: 1e-8,
        }
    }
}

/// One record per transition for path dumps.
#[derive(Debug, Clone, Copy)]
pub struct PathRecord {
    pub clock: f64,
    pub ln_dd: f64,
    pub ln_du: f64,
    pub v: f64,
    pub ln_smax: f64,
    pub ln_smin: f64,
    pub regime: Regime,
}

impl PathRecord {
    fn of(s: &CtmcState) -> Self {
        PathRecord {
            clock: s.clock,
            ln_dd: s.ln_dd,
            ln_du: s.ln_du,
            v: s.v,
            ln_smax: s.ln_smax,
            ln_smin: s.ln_smin,
            regime: s.regime(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PathOutcome {
    pub state: CtmcState,
    pub time_at_max: f64,
    pub time_at_min: f64,
    pub steps: u64,
    pub v_clamps: u64,
}

/// Reproducible per-path generator: ChaCha8 keyed by the run seed with the
/// path index as the stream, so path `i` is identical no matter how paths are
/// distributed over workers.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Precomputed model-level quantities: the interior covariance is
/// `v * M(rho, sigma)`, so `M` is decomposed once and eigenvalues are scaled
/// by the current variance at each step.
struct Engine<'a> {
    p: &'a ModelParams,
    xi_eff: f64,
    eta_eff: f64,
    interior: Vec<(f64, Vector5<f64>)>,
}

impl<'a> Engine<'a> {
    fn new(p: &'a ModelParams) -> Result<Self, CtmcError> {
        let sr = p.sigma * p.rho;
        let m = Matrix3::new(
            1.0,
            1.0,
            sr,
            1.0,
            1.0,
            sr,
            sr,
            sr,
            p.sigma * p.sigma,
        );
        let eig = SymmetricEigen::new(m);
        let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let mut interior = Vec::new();
        for (i, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam <= RELATIVE_EIGEN_TOL * lambda_max || lam <= 0.0 {
                continue;
            }
            let c = eig.eigenvectors.column(i);
            let u = sanitize_eigenvector(Vector5::new(c[0], c[1], c[2], 0.0, 0.0));
            interior.push((lam, u));
        }
        Ok(Engine {
            p,
            xi_eff: p.xi_eff(),
            eta_eff: p.eta_eff(),
            interior,
        })
    }

    fn transitions_into(
        &self,
        s: &CtmcState,
        h: f64,
        out: &mut Vec<Transition>,
    ) -> Result<f64, CtmcError> {
        out.clear();
        let p = self.p;
        let v = s.v;
        let var_drift = p.kappa * (p.theta - v);
        match s.regime() {
            Regime::Interior => {
                let drift = Vector5::new(-0.5 * v, -0.5 * v, var_drift, p.r, p.r);
                let scaled: Vec<(f64, Vector5<f64>)> =
                    self.interior.iter().map(|&(l, u)| (l * v, u)).collect();
                push_transitions(out, s, &drift, &scaled, h)?;
            }
            Regime::AtMax => {
                let drift =
                    Vector5::new(-1.0 / self.xi_eff, 0.0, var_drift, 1.0 / self.xi_eff + p.r, p.r);
                let pairs = [(p.sigma * p.sigma * v, Vector5::new(0.0, 0.0, 1.0, 0.0, 0.0))];
                push_transitions(out, s, &drift, &pairs, h)?;
            }
            Regime::AtMin => {
                let drift = Vector5::new(
                    0.0,
                    1.0 / self.eta_eff,
                    var_drift,
                    p.r,
                    -1.0 / self.eta_eff + p.r,
                );
                let pairs = [(p.sigma * p.sigma * v, Vector5::new(0.0, 0.0, 1.0, 0.0, 0.0))];
                push_transitions(out, s, &drift, &pairs, h)?;
            }
        }
        Ok(out.iter().map(|t| t.rate).sum())
    }
}

fn apply_transition(s: &mut CtmcState, t: &Transition, v_floor: f64) -> bool {
    let mut dx = t.direction * t.step;
    let v_new = s.v + dx[2];
    let clamped = v_new <= 0.0;
    if clamped {
        // Shorten the whole displacement so the variance lands on the floor;
        // scaling down cannot push a sticky coordinate across its boundary.
        let alpha = ((s.v - v_floor) / (s.v - v_new)).clamp(0.0, 1.0);
        dx *= alpha;
    }
    s.ln_dd += dx[0];
    s.ln_du += dx[1];
    s.v += dx[2];
    s.ln_smax += dx[3];
    s.ln_smin += dx[4];
    if clamped {
        s.v = v_floor;
    } else if let Some(c) = t.snap {
        match c {
            StickyCoord::Dd => s.ln_dd = 0.0,
            StickyCoord::Du => s.ln_du = 0.0,
        }
    }
    debug_assert!(s.ln_dd <= 0.0, "ln_dd crossed: {}", s.ln_dd);
    debug_assert!(s.ln_du >= 0.0, "ln_du crossed: {}", s.ln_du);
    clamped
}

fn simulate_inner(
    p: &ModelParams,
    horizon: f64,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
    mut record: Option<&mut Vec<PathRecord>>,
) -> Result<PathOutcome, CtmcError> {
    let engine = Engine::new(p)?;
    let mut s = CtmcState::initial(p);
    let mut out = PathOutcome {
        state: s,
        time_at_max: 0.0,
        time_at_min: 0.0,
        steps: 0,
        v_clamps: 0,
    };
    if let Some(rec) = record.as_deref_mut() {
        rec.push(PathRecord::of(&s));
    }
    let mut transitions: Vec<Transition> = Vec::with_capacity(5);
    while s.clock < horizon {
        let regime = s.regime();
        // A boundary whose stickiness coefficient is zero reflects
        // instantaneously: push off by the base step with no time elapsed.
        let reflect = match regime {
            Regime::AtMax if engine.xi_eff == 0.0 => {
                Some(Vector5::new(-cfg.h, 0.0, 0.0, cfg.h, 0.0))
            }
            Regime::AtMin if engine.eta_eff == 0.0 => {
                Some(Vector5::new(0.0, cfg.h, 0.0, 0.0, -cfg.h))
            }
            _ => None,
        };
        if let Some(push) = reflect {
            s.ln_dd += push[0];
            s.ln_du += push[1];
            s.ln_smax += push[3];
            s.ln_smin += push[4];
            out.steps += 1;
            if out.steps > cfg.step_budget {
                return Err(CtmcError::StepBudgetExceeded(cfg.step_budget));
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.push(PathRecord::of(&s));
            }
            continue;
        }
        let total_rate = engine.transitions_into(&s, cfg.h, &mut transitions)?;
        let holding = Exp::new(total_rate).expect("positive rate").sample(rng);
        let dt = holding.min(horizon - s.clock);
        match regime {
            Regime::AtMax => out.time_at_max += dt,
            Regime::AtMin => out.time_at_min += dt,
            Regime::Interior => {}
        }
        s.clock += dt;
        // The move drawn for this holding interval is applied even when the
        // clock was truncated at the horizon.
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = transitions.len() - 1;
        for (i, t) in transitions.iter().enumerate() {
            acc += t.rate / total_rate;
            if u < acc {
                chosen = i;
                break;
            }
        }
        if apply_transition(&mut s, &transitions[chosen], cfg.v_floor) {
            out.v_clamps += 1;
        }
        out.steps += 1;
        if out.steps > cfg.step_budget {
            return Err(CtmcError::StepBudgetExceeded(cfg.step_budget));
        }
        if let Some(rec) = record.as_deref_mut() {
            rec.push(PathRecord::of(&s));
        }
    }
    let drift_err = (s.ln_spot() - s.ln_spot_alt()).abs();
    if drift_err > 1e-9 * (out.steps.max(1) as f64) {
        return Err(CtmcError::StateInconsistent(drift_err, out.steps));
    }
    out.state = s;
    Ok(out)
}

/// Simulate one path to the horizon and return the terminal state with
/// occupation times. Identical (seed, path index) pairs give bitwise
/// identical paths.
pub fn simulate_path(
    p: &ModelParams,
    horizon: f64,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PathOutcome, CtmcError> {
    simulate_inner(p, horizon, cfg, rng, None)
}

/// As [`simulate_path`] but also returns one record per transition.
pub fn simulate_path_recorded(
    p: &ModelParams,
    horizon: f64,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PathOutcome, Vec<PathRecord>), CtmcError> {
    let mut rec = Vec::new();
    let out = simulate_inner(p, horizon, cfg, rng, Some(&mut rec))?;
    Ok((out, rec))
}

fn run_paths(
    p: &ModelParams,
    horizon: f64,
    cfg: &SimConfig,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PathOutcome>, CtmcError> {
    let outcomes: Result<Vec<PathOutcome>, CtmcError> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i);
            simulate_inner(p, horizon, cfg, &mut rng, None)
        })
        .collect();
    let outcomes = outcomes?;
    let steps: u64 = outcomes.iter().map(|o| o.steps).sum();
    let clamps: u64 = outcomes.iter().map(|o| o.v_clamps).sum();
    if steps > 0 && clamps as f64 > 1e-3 * steps as f64 {
        return Err(CtmcError::ExcessiveVarianceClamping { clamps, steps });
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub price: f64,
    pub std_error: f64,
}

/// Terminal asset values of `n_paths` independent paths; the building block
/// for Monte Carlo pricing and for payoff-level diagnostics such as put-call
/// parity on a shared path set.
pub fn mc_terminals(
    p: &ModelParams,
    horizon: f64,
    cfg: &SimConfig,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>, CtmcError> {
    let p = validate_params(p.clone())?;
    let outcomes = run_paths(&p, horizon, cfg, n_paths, seed)?;
    Ok(outcomes.iter().map(|o| o.state.spot()).collect())
}

/// Discounted Monte Carlo estimate of `E[f(S_T)]` with its standard error.
pub fn mc_expectation(
    terminals: &[f64],
    discount: f64,
    f: impl Fn(f64) -> f64,
) -> McEstimate {
    let n = terminals.len() as f64;
    let vals: Vec<f64> = terminals.iter().map(|&s| f(s)).collect();
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    McEstimate {
        price: discount * mean,
        std_error: discount * (var / n).sqrt(),
    }
}

/// Monte Carlo price of a European call: discounted mean payoff over
/// `n_paths` chain paths at base step `h`.
pub fn mc_price(
    p: &ModelParams,
    c: &ContractSpec,
    n_paths: usize,
    h: f64,
    seed: u64,
) -> Result<McEstimate, CtmcError> {
    c.validate()?;
    if n_paths < 2 {
        return Err(CtmcError::Model(ModelError::Parse(
            "need at least 2 paths".into(),
        )));
    }
    let horizon = c.horizon();
    if horizon == 0.0 {
        return Ok(McEstimate {
            price: payoff(p.x0, c.strike),
            std_error: 0.0,
        });
    }
    let terminals = mc_terminals(p, horizon, &SimConfig::new(h), n_paths, seed)?;
    let discount = (-p.r * horizon).exp();
    Ok(mc_expectation(&terminals, discount, |s| payoff(s, c.strike)))
}

/// Mean fraction of path time spent exactly on the running maximum and the
/// running minimum.
pub fn occupation_fractions(
    p: &ModelParams,
    horizon: f64,
    h: f64,
    n_paths: usize,
    seed: u64,
) -> Result<(f64, f64), CtmcError> {
    let p = validate_params(p.clone())?;
    let outcomes = run_paths(&p, horizon, &SimConfig::new(h), n_paths, seed)?;
    let n = n_paths as f64;
    let fmax = outcomes.iter().map(|o| o.time_at_max).sum::<f64>() / (n * horizon);
    let fmin = outcomes.iter().map(|o| o.time_at_min).sum::<f64>() / (n * horizon);
    Ok((fmax, fmin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelVariant;
    use approx::assert_abs_diff_eq;

    fn params() -> ModelParams {
        ModelParams {
            r: 0.04,
            kappa: 3.0,
            theta: 0.05,
            sigma: 0.4,
            rho: -0.3,
            xi: 3.0,
            eta: 0.7,
            v0: 0.05,
            x0: 75.0,
            y0: 101.0,
            z0: 49.0,
            mu: 0.0,
            variant: ModelVariant::Svsdu,
        }
    }

    fn interior_state() -> CtmcState {
        CtmcState {
            ln_dd: -0.3,
            ln_du: 0.4,
            v: 0.05,
            ln_smax: 101f64.ln(),
            ln_smin: 49f64.ln(),
            clock: 0.0,
        }
    }

    #[test]
    fn interior_drift_and_covariance_values() {
        let p = ModelParams {
            rho: 0.0,
            sigma: 0.2,
            r: 0.04,
            ..params()
        };
        let s = CtmcState {
            v: 0.04,
            ..interior_state()
        };
        let (drift, a) = drift_and_covariance(&s, &p, Regime::Interior).unwrap();
        assert_abs_diff_eq!(drift[0], -0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(drift[1], -0.02, epsilon = 1e-15);
        assert_abs_diff_eq!(drift[2], p.kappa * (p.theta - 0.04), epsilon = 1e-15);
        assert_abs_diff_eq!(drift[3], 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(drift[4], 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(a[(0, 0)], 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(a[(2, 2)], 0.0016, epsilon = 1e-15);
        assert_abs_diff_eq!(a[(0, 2)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn boundary_drift_indicator_values() {
        let p = ModelParams {
            xi: 2.0,
            ..params()
        };
        let s = CtmcState {
            ln_dd: 0.0,
            ..interior_state()
        };
        let (beta, g) = drift_and_covariance(&s, &p, Regime::AtMax).unwrap();
        assert_abs_diff_eq!(beta[0], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(beta[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(beta[3], 0.5 + p.r, epsilon = 1e-15);
        assert_abs_diff_eq!(g[(2, 2)], p.sigma * p.sigma * s.v, epsilon = 1e-15);
        assert_eq!(g.iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn interior_cross_covariance_entry() {
        let p = ModelParams {
            rho: -0.3,
            sigma: 0.4,
            ..params()
        };
        let s = CtmcState {
            v: 0.05,
            ..interior_state()
        };
        let (_, a) = drift_and_covariance(&s, &p, Regime::Interior).unwrap();
        assert_abs_diff_eq!(a[(0, 2)], -0.006, epsilon = 1e-15);
    }

    #[test]
    fn eigendecompose_identity() {
        let pairs = eigendecompose_covariance(&Matrix5::identity()).unwrap();
        assert_eq!(pairs.len(), 5);
        for (lam, u) in pairs {
            assert_abs_diff_eq!(lam, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(u.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn eigendecompose_rank_one_boundary_matrix() {
        let mut g = Matrix5::zeros();
        g[(2, 2)] = 0.4 * 0.4 * 0.05;
        let pairs = eigendecompose_covariance(&g).unwrap();
        assert_eq!(pairs.len(), 1);
        let (lam, u) = &pairs[0];
        assert_abs_diff_eq!(*lam, 0.008, epsilon = 1e-15);
        assert_abs_diff_eq!(u[2].abs(), 1.0, epsilon = 1e-12);
        assert_eq!(u[0], 0.0);
        assert_eq!(u[1], 0.0);
    }

    #[test]
    fn eigendecompose_reconstructs_random_psd() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = Matrix5::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let a = b * b.transpose();
            let pairs = eigendecompose_covariance(&a).unwrap();
            let mut recon = Matrix5::zeros();
            for (lam, u) in &pairs {
                recon += *lam * u * u.transpose();
            }
            assert!((a - recon).norm() < 1e-9);
        }
    }

    #[test]
    fn clamp_examples() {
        let s = CtmcState {
            ln_dd: -0.005,
            ln_du: 0.8,
            ..interior_state()
        };
        let u = Vector5::new(1.0, 1.0, 0.0, 0.0, 0.0);
        assert_abs_diff_eq!(clamp_step(&s, &u, 0.01).unwrap(), 0.005, epsilon = 1e-15);

        let s = CtmcState {
            ln_dd: -0.5,
            ln_du: 0.3,
            ..interior_state()
        };
        let u = Vector5::new(1.0, -1.0, 0.0, 0.0, 0.0);
        assert_abs_diff_eq!(clamp_step(&s, &u, 0.01).unwrap(), 0.01, epsilon = 1e-15);

        let s = CtmcState {
            ln_dd: -0.9,
            ln_du: 0.004,
            ..interior_state()
        };
        let mut u = Vector5::zeros();
        u[1] = 2.0;
        assert_abs_diff_eq!(clamp_step(&s, &u, 0.01).unwrap(), 0.002, epsilon = 1e-15);
    }

    #[test]
    fn clamp_zero_step_on_boundary_pair_direction() {
        let s = CtmcState {
            ln_dd: 0.0,
            ..interior_state()
        };
        let u = Vector5::new(1.0, 1.0, 0.0, 0.0, 0.0);
        assert!(matches!(clamp_step(&s, &u, 0.01), Err(CtmcError::ZeroStep)));
    }

    #[test]
    fn transitions_interior_far_from_boundary() {
        let p = params();
        let scheme = build_transitions(&interior_state(), &p, 0.01).unwrap();
        // drift + two +- eigen pairs
        assert_eq!(scheme.transitions.len(), 5);
        assert_abs_diff_eq!(scheme.transitions[0].rate, 100.0, epsilon = 1e-9);
        assert!(scheme.total_rate > 0.0);
        for t in &scheme.transitions {
            assert!(t.rate.is_finite() && t.rate >= 0.0);
        }
    }

    #[test]
    fn transitions_at_max_has_three_entries() {
        let p = params();
        let s = CtmcState {
            ln_dd: 0.0,
            ..interior_state()
        };
        let scheme = build_transitions(&s, &p, 0.01).unwrap();
        assert_eq!(scheme.transitions.len(), 3);
    }

    #[test]
    fn rate_formula_matches_arithmetic() {
        // lambda = 0.08, clamped step 0.005 -> 1600
        assert_abs_diff_eq!(0.08 / (2.0 * 0.005 * 0.005), 1600.0, epsilon = 1e-9);
        let p = params();
        let s = CtmcState {
            ln_dd: -0.005 * 2.0f64.sqrt() / 2.0, // clamps the eigen pair to ~0.005
            ..interior_state()
        };
        let scheme = build_transitions(&s, &p, 0.01).unwrap();
        for t in &scheme.transitions[1..] {
            let lam = t.rate * 2.0 * t.step * t.step;
            assert!(lam > 0.0 && lam.is_finite());
        }
    }

    #[test]
    fn fast_engine_matches_generic_transitions() {
        let p = params();
        let engine = Engine::new(&p).unwrap();
        let states = [
            interior_state(),
            CtmcState {
                ln_dd: -0.002,
                ..interior_state()
            },
            CtmcState {
                ln_dd: 0.0,
                ..interior_state()
            },
            CtmcState {
                ln_du: 0.0,
                ln_dd: -0.7,
                ..interior_state()
            },
        ];
        let mut buf = Vec::new();
        for s in &states {
            let total = engine.transitions_into(s, 0.01, &mut buf).unwrap();
            let generic = build_transitions(s, &p, 0.01).unwrap();
            assert_abs_diff_eq!(total, generic.total_rate, epsilon = 1e-9 * total);
            assert_eq!(buf.len(), generic.transitions.len());
            // match as multisets: every fast transition has a generic partner
            for t in &buf {
                let found = generic.transitions.iter().any(|g| {
                    (g.rate - t.rate).abs() <= 1e-9 * t.rate.max(1.0)
                        && ((g.direction - t.direction).norm() < 1e-9
                            || (g.direction + t.direction).norm() < 1e-9)
                });
                assert!(found, "no generic partner for {t:?}");
            }
        }
    }

    #[test]
    fn seeded_paths_are_bitwise_identical() {
        let p = params();
        let cfg = SimConfig::new(0.01);
        let mut r1 = path_rng(42, 0);
        let mut r2 = path_rng(42, 0);
        let a = simulate_path(&p, 0.3, &cfg, &mut r1).unwrap();
        let b = simulate_path(&p, 0.3, &cfg, &mut r2).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.steps, b.steps);
        let mut r3 = path_rng(43, 0);
        let c = simulate_path(&p, 0.3, &cfg, &mut r3).unwrap();
        assert_ne!(a.state, c.state);
    }

    #[test]
    fn sticky_paths_hold_the_boundary() {
        // with a large drawdown stickiness and the spot at the max, paths
        // show flat ln_dd = 0 stretches while the record level rises
        let p = ModelParams {
            xi: 5.0,
            x0: 101.0,
            y0: 101.0,
            ..params()
        };
        let cfg = SimConfig::new(0.01);
        let mut rng = path_rng(7, 0);
        let (out, rec) = simulate_path_recorded(&p, 0.3, &cfg, &mut rng).unwrap();
        assert!(out.time_at_max > 0.0);
        assert!(rec.iter().any(|r| r.regime == Regime::AtMax));
        let first = rec.first().unwrap();
        let last = rec.last().unwrap();
        assert!(last.ln_smax > first.ln_smax);
    }

    #[test]
    fn state_reconstructions_agree() {
        let p = params();
        let cfg = SimConfig::new(0.01);
        for i in 0..20 {
            let mut rng = path_rng(11, i);
            let out = simulate_path(&p, 0.3, &cfg, &mut rng).unwrap();
            let err = (out.state.ln_spot() - out.state.ln_spot_alt()).abs();
            assert!(err <= 1e-9 * out.steps as f64);
            assert!(out.state.ln_dd <= 0.0 && out.state.ln_du >= 0.0);
        }
    }

    #[test]
    fn zero_strike_price_recovers_spot() {
        let p = params();
        let c = ContractSpec::new(1e-12, 0.3);
        let est = mc_price(&p, &c, 4000, 0.01, 5).unwrap();
        assert!(
            (est.price - p.x0).abs() <= 3.0 * est.std_error,
            "price {} vs x0 {} (se {})",
            est.price,
            p.x0,
            est.std_error
        );
    }

    #[test]
    fn degenerate_horizon_is_exact_payoff() {
        let p = params();
        let c = ContractSpec {
            strike: 70.0,
            maturity: 0.3,
            valuation_time: 0.3,
        };
        let est = mc_price(&p, &c, 2, 0.01, 1).unwrap();
        assert_eq!(est.price, 5.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn reflecting_limit_has_zero_occupation() {
        let p = ModelParams {
            xi: 0.0,
            eta: 0.0,
            x0: 100.0,
            y0: 101.0,
            z0: 50.0,
            ..params()
        };
        let (fmax, fmin) = occupation_fractions(&p, 0.3, 0.01, 300, 9).unwrap();
        assert_eq!(fmax, 0.0);
        assert_eq!(fmin, 0.0);
    }

    #[test]
    fn occupation_increases_with_stickiness() {
        let base = ModelParams {
            x0: 100.0,
            y0: 101.0,
            z0: 50.0,
            ..params()
        };
        let lo = ModelParams { xi: 0.5, ..base.clone() };
        let hi = ModelParams { xi: 5.0, ..base };
        let (f_lo, _) = occupation_fractions(&lo, 0.3, 0.01, 2000, 13).unwrap();
        let (f_hi, _) = occupation_fractions(&hi, 0.3, 0.01, 2000, 13).unwrap();
        assert!(
            f_hi > f_lo,
            "occupation not increasing in xi: {f_lo} vs {f_hi}"
        );
    }

    #[test]
    fn drawup_occupation_increases_with_eta() {
        let base = ModelParams {
            x0: 50.0,
            y0: 101.0,
            z0: 49.5,
            ..params()
        };
        let lo = ModelParams { eta: 0.5, ..base.clone() };
        let hi = ModelParams { eta: 5.0, ..base };
        let (_, f_lo) = occupation_fractions(&lo, 0.3, 0.01, 2000, 17).unwrap();
        let (_, f_hi) = occupation_fractions(&hi, 0.3, 0.01, 2000, 17).unwrap();
        assert!(
            f_hi > f_lo,
            "occupation not increasing in eta: {f_lo} vs {f_hi}"
        );
    }
}
