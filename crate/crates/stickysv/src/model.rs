//! Model parameters, domain boxes, variant definitions, validation and input
//! normalization shared by every other module.
//!
//! The asset value follows a stochastic-volatility diffusion whose drawdown
//! (value over running maximum) and drawup (value over running minimum)
//! processes are sticky at 1: records cluster, so the process spends a
//! positive amount of time at fresh highs and lows. Stickiness is governed by
//! the coefficients `xi` (drawdown side) and `eta` (drawup side).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which boundaries of the state space carry stickiness.
///
/// `Svsdu` is the full model (both boundaries sticky), `Svsd` keeps only the
/// running-maximum boundary, `Svsu` only the running-minimum boundary, and
/// `Heston` has no sticky boundary at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    Svsdu,
    Svsd,
    Svsu,
    Heston,
}

impl ModelVariant {
    /// True if the running-maximum boundary (drawdown side) is sticky.
    pub fn uses_upper(self) -> bool {
        matches!(self, ModelVariant::Svsdu | ModelVariant::Svsd)
    }

    /// True if the running-minimum boundary (drawup side) is sticky.
    pub fn uses_lower(self) -> bool {
        matches!(self, ModelVariant::Svsdu | ModelVariant::Svsu)
    }

    /// Network input fields for this variant, in declaration order.
    ///
    /// The reduced models drop the absent state coordinate and its stickiness
    /// coefficient instead of pinning them to dummy values.
    pub fn input_fields(self) -> &'static [InputField] {
        use InputField::*;
        match self {
            ModelVariant::Svsdu => &[
                Time, Spot, RunMax, RunMin, Var, Strike, Rate, Rho, Kappa, Theta, Sigma, Eta,
                Maturity, Xi,
            ],
            ModelVariant::Svsd => &[
                Time, Spot, RunMax, Var, Strike, Rate, Rho, Kappa, Theta, Sigma, Maturity, Xi,
            ],
            ModelVariant::Svsu => &[
                Time, Spot, RunMin, Var, Strike, Rate, Rho, Kappa, Theta, Sigma, Eta, Maturity,
            ],
            // The Heston baseline is priced semi-analytically; it has no
            // network, but a field list keeps the variant total.
            ModelVariant::Heston => &[Time, Spot, Var, Strike, Rate, Rho, Kappa, Theta, Sigma,
                Maturity],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Svsdu => "SVSDU",
            ModelVariant::Svsd => "SVSD",
            ModelVariant::Svsu => "SVSU",
            ModelVariant::Heston => "Heston",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s.trim() {
            "SVSDU" | "svsdu" => Ok(ModelVariant::Svsdu),
            "SVSD" | "svsd" => Ok(ModelVariant::Svsd),
            "SVSU" | "svsu" => Ok(ModelVariant::Svsu),
            "Heston" | "heston" => Ok(ModelVariant::Heston),
            other => Err(ModelError::Parse(format!("unknown variant `{other}`"))),
        }
    }
}

/// The full parameter vector: market state, model coefficients and the two
/// stickiness factors, plus the variant tag.
///
/// `mu` is the physical-measure drift. It is recorded for completeness but
/// never used in pricing or simulation, which run under the risk-neutral
/// measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Risk-free rate, per year.
    pub r: f64,
    /// Variance mean-reversion speed.
    pub kappa: f64,
    /// Long-run variance.
    pub theta: f64,
    /// Volatility of variance.
    pub sigma: f64,
    /// Correlation between the asset and variance drivers, in [-1, 1].
    pub rho: f64,
    /// Drawdown stickiness coefficient, >= 0. Ignored by Svsu/Heston.
    pub xi: f64,
    /// Drawup stickiness coefficient, >= 0. Ignored by Svsd/Heston.
    pub eta: f64,
    /// Initial variance, > 0.
    pub v0: f64,
    /// Spot asset value.
    pub x0: f64,
    /// Running maximum at the valuation time, y0 >= x0.
    pub y0: f64,
    /// Running minimum at the valuation time, 0 < z0 <= x0.
    pub z0: f64,
    /// Physical drift; recorded, unused in pricing.
    pub mu: f64,
    pub variant: ModelVariant,
}

impl ModelParams {
    /// Effective drawdown stickiness: `xi` when the variant keeps the upper
    /// boundary sticky, zero (instantaneous reflection) otherwise.
    pub fn xi_eff(&self) -> f64 {
        if self.variant.uses_upper() {
            self.xi
        } else {
            0.0
        }
    }

    /// Effective drawup stickiness, see [`ModelParams::xi_eff`].
    pub fn eta_eff(&self) -> f64 {
        if self.variant.uses_lower() {
            self.eta
        } else {
            0.0
        }
    }

    pub fn feller_holds(&self) -> bool {
        2.0 * self.kappa * self.theta > self.sigma * self.sigma
    }

    /// Serialize as `name = value` lines, names matching the field list.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (name, value) in [
            ("r", self.r),
            ("kappa", self.kappa),
            ("theta", self.theta),
            ("sigma", self.sigma),
            ("rho", self.rho),
            ("xi", self.xi),
            ("eta", self.eta),
            ("v0", self.v0),
            ("x0", self.x0),
            ("y0", self.y0),
            ("z0", self.z0),
            ("mu", self.mu),
        ] {
            s.push_str(&format!("{name} = {value}\n"));
        }
        s.push_str(&format!("variant = {}\n", self.variant.as_str()));
        s
    }

    /// Parse the `name = value` text format produced by [`ModelParams::to_kv`].
    pub fn from_kv(text: &str) -> Result<Self, ModelError> {
        let map = parse_kv(text)?;
        let num = |k: &str| -> Result<f64, ModelError> {
            map.iter()
                .find(|(n, _)| n == k)
                .ok_or_else(|| ModelError::Parse(format!("missing key `{k}`")))?
                .1
                .parse::<f64>()
                .map_err(|e| ModelError::Parse(format!("key `{k}`: {e}")))
        };
        let variant = match map.iter().find(|(n, _)| n == "variant") {
            Some((_, v)) => ModelVariant::parse(v)?,
            None => ModelVariant::Svsdu,
        };
        Ok(ModelParams {
            r: num("r")?,
            kappa: num("kappa")?,
            theta: num("theta")?,
            sigma: num("sigma")?,
            rho: num("rho")?,
            xi: num("xi")?,
            eta: num("eta")?,
            v0: num("v0")?,
            x0: num("x0")?,
            y0: num("y0")?,
            z0: num("z0")?,
            mu: num("mu").unwrap_or(0.0),
            variant,
        })
    }
}

/// European call contract: strike, maturity and valuation time, in years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractSpec {
    pub strike: f64,
    pub maturity: f64,
    pub valuation_time: f64,
}

impl ContractSpec {
    pub fn new(strike: f64, maturity: f64) -> Self {
        ContractSpec {
            strike,
            maturity,
            valuation_time: 0.0,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.maturity - self.valuation_time
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.strike > 0.0) {
            return Err(ModelError::NonPositive("strike"));
        }
        if self.valuation_time > self.maturity || self.valuation_time < 0.0 {
            return Err(ModelError::Parse(format!(
                "valuation time {} outside [0, {}]",
                self.valuation_time, self.maturity
            )));
        }
        Ok(())
    }
}

/// The 14 network inputs, in the canonical order
/// (t, x, y, z, v, K, r, rho, kappa, theta, sigma, eta, T, xi).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputField {
    Time,
    Spot,
    RunMax,
    RunMin,
    Var,
    Strike,
    Rate,
    Rho,
    Kappa,
    Theta,
    Sigma,
    Eta,
    Maturity,
    Xi,
}

impl InputField {
    pub const ALL: [InputField; 14] = [
        InputField::Time,
        InputField::Spot,
        InputField::RunMax,
        InputField::RunMin,
        InputField::Var,
        InputField::Strike,
        InputField::Rate,
        InputField::Rho,
        InputField::Kappa,
        InputField::Theta,
        InputField::Sigma,
        InputField::Eta,
        InputField::Maturity,
        InputField::Xi,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&f| f == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            InputField::Time => "t",
            InputField::Spot => "x",
            InputField::RunMax => "y",
            InputField::RunMin => "z",
            InputField::Var => "v",
            InputField::Strike => "K",
            InputField::Rate => "r",
            InputField::Rho => "rho",
            InputField::Kappa => "kappa",
            InputField::Theta => "theta",
            InputField::Sigma => "sigma",
            InputField::Eta => "eta",
            InputField::Maturity => "T",
            InputField::Xi => "xi",
        }
    }
}

/// Per-input lower/upper bounds for the 14 network inputs.
///
/// Defaults are the training sampling ranges. The state bounds (x, y, z) are
/// the reachable closure of the pivot-based sampling recipe: the pivot m runs
/// over [50, 131), z over [1, m-1), y over [m+1, m+100) and x over [z+1, y),
/// with boundary points allowed down to x = z >= 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: [f64; 14],
    pub hi: [f64; 14],
}

impl Default for DomainBox {
    fn default() -> Self {
        let mut lo = [0.0; 14];
        let mut hi = [0.0; 14];
        let set = |lo: &mut [f64; 14], hi: &mut [f64; 14], f: InputField, a: f64, b: f64| {
            lo[f.index()] = a;
            hi[f.index()] = b;
        };
        set(&mut lo, &mut hi, InputField::Time, 0.0, 1.1);
        set(&mut lo, &mut hi, InputField::Spot, 1.0, 231.0);
        set(&mut lo, &mut hi, InputField::RunMax, 51.0, 231.0);
        set(&mut lo, &mut hi, InputField::RunMin, 1.0, 130.0);
        set(&mut lo, &mut hi, InputField::Var, 0.01, 0.16);
        set(&mut lo, &mut hi, InputField::Strike, 50.0, 131.0);
        set(&mut lo, &mut hi, InputField::Rate, 0.01, 0.3);
        set(&mut lo, &mut hi, InputField::Rho, -1.0, 1.0);
        set(&mut lo, &mut hi, InputField::Kappa, 0.01, 5.0);
        set(&mut lo, &mut hi, InputField::Theta, 0.01, 1.0);
        set(&mut lo, &mut hi, InputField::Sigma, 0.01, 10f64.sqrt());
        set(&mut lo, &mut hi, InputField::Eta, 0.01, 10.0);
        set(&mut lo, &mut hi, InputField::Maturity, 7.0 / 365.0, 1.1);
        set(&mut lo, &mut hi, InputField::Xi, 0.01, 10.0);
        DomainBox { lo, hi }
    }
}

impl DomainBox {
    pub fn check(&self) -> Result<(), ModelError> {
        for f in InputField::ALL {
            let i = f.index();
            if !(self.hi[i] > self.lo[i]) {
                return Err(ModelError::DegenerateBox(f.name()));
            }
        }
        Ok(())
    }

    pub fn lo_of(&self, f: InputField) -> f64 {
        self.lo[f.index()]
    }

    pub fn hi_of(&self, f: InputField) -> f64 {
        self.hi[f.index()]
    }

    /// d(normalized)/d(raw) for one field: 2 / (hi - lo).
    pub fn scale(&self, f: InputField) -> f64 {
        2.0 / (self.hi[f.index()] - self.lo[f.index()])
    }

    /// Affine map of one raw component onto [-1, 1].
    pub fn normalize_field(&self, f: InputField, raw: f64) -> f64 {
        let i = f.index();
        2.0 * (raw - self.lo[i]) / (self.hi[i] - self.lo[i]) - 1.0
    }

    pub fn denormalize_field(&self, f: InputField, unit: f64) -> f64 {
        let i = f.index();
        self.lo[i] + (unit + 1.0) * (self.hi[i] - self.lo[i]) / 2.0
    }

    /// Indices of components lying outside their box. Out-of-box values are
    /// still mapped affinely; callers decide whether to warn.
    pub fn out_of_box(&self, raw: &[f64; 14]) -> Vec<InputField> {
        InputField::ALL
            .iter()
            .copied()
            .filter(|f| {
                let i = f.index();
                raw[i] < self.lo[i] || raw[i] >= self.hi[i]
            })
            .collect()
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for f in InputField::ALL {
            let i = f.index();
            s.push_str(&format!("{}_lo = {}\n", f.name(), self.lo[i]));
            s.push_str(&format!("{}_hi = {}\n", f.name(), self.hi[i]));
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self, ModelError> {
        let map = parse_kv(text)?;
        let mut b = DomainBox::default();
        for (key, value) in &map {
            let v: f64 = value
                .parse()
                .map_err(|e| ModelError::Parse(format!("key `{key}`: {e}")))?;
            let (name, which) = key
                .rsplit_once('_')
                .ok_or_else(|| ModelError::Parse(format!("bad box key `{key}`")))?;
            let field = InputField::ALL
                .iter()
                .copied()
                .find(|f| f.name() == name)
                .ok_or_else(|| ModelError::Parse(format!("unknown field `{name}`")))?;
            match which {
                "lo" => b.lo[field.index()] = v,
                "hi" => b.hi[field.index()] = v,
                _ => return Err(ModelError::Parse(format!("bad box key `{key}`"))),
            }
        }
        b.check()?;
        Ok(b)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("Feller condition violated: 2*kappa*theta = {lhs} <= sigma^2 = {rhs}")]
    FellerViolation { lhs: f64, rhs: f64 },
    #[error("ordering 0 < z0 <= x0 <= y0 violated: z0 = {z0}, x0 = {x0}, y0 = {y0}")]
    OrderingViolation { z0: f64, x0: f64, y0: f64 },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("correlation rho = {0} outside [-1, 1]")]
    CorrelationOutOfRange(f64),
    #[error("degenerate box for input `{0}`: hi <= lo")]
    DegenerateBox(&'static str),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Check every invariant of the parameter set for its active variant and hand
/// it back unchanged. Idempotent and total over finite inputs.
pub fn validate_params(p: ModelParams) -> Result<ModelParams, ModelError> {
    for (name, v) in [
        ("kappa", p.kappa),
        ("theta", p.theta),
        ("sigma", p.sigma),
        ("v0", p.v0),
        ("x0", p.x0),
        ("z0", p.z0),
        ("y0", p.y0),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(ModelError::NonPositive(name));
        }
    }
    if !p.feller_holds() {
        return Err(ModelError::FellerViolation {
            lhs: 2.0 * p.kappa * p.theta,
            rhs: p.sigma * p.sigma,
        });
    }
    if !(p.z0 <= p.x0 && p.x0 <= p.y0) {
        return Err(ModelError::OrderingViolation {
            z0: p.z0,
            x0: p.x0,
            y0: p.y0,
        });
    }
    // Both boundaries coincident would make the indicator structure of the
    // boundary dynamics ambiguous.
    if p.variant == ModelVariant::Svsdu && p.y0 == p.z0 {
        return Err(ModelError::OrderingViolation {
            z0: p.z0,
            x0: p.x0,
            y0: p.y0,
        });
    }
    if !(-1.0..=1.0).contains(&p.rho) {
        return Err(ModelError::CorrelationOutOfRange(p.rho));
    }
    if p.variant.uses_upper() && !(p.xi >= 0.0) {
        return Err(ModelError::NonPositive("xi"));
    }
    if p.variant.uses_lower() && !(p.eta >= 0.0) {
        return Err(ModelError::NonPositive("eta"));
    }
    Ok(p)
}

/// Componentwise affine map of a raw 14-vector onto [-1, 1]^14.
pub fn normalize_inputs(raw: &[f64; 14], b: &DomainBox) -> Result<[f64; 14], ModelError> {
    b.check()?;
    let mut out = [0.0; 14];
    for f in InputField::ALL {
        out[f.index()] = b.normalize_field(f, raw[f.index()]);
    }
    Ok(out)
}

/// Exact inverse of [`normalize_inputs`].
pub fn denormalize_inputs(unit: &[f64; 14], b: &DomainBox) -> Result<[f64; 14], ModelError> {
    b.check()?;
    let mut out = [0.0; 14];
    for f in InputField::ALL {
        out[f.index()] = b.denormalize_field(f, unit[f.index()]);
    }
    Ok(out)
}

/// European call payoff (x - K)^+.
pub fn payoff(x: f64, strike: f64) -> f64 {
    (x - strike).max(0.0)
}

/// Parse `name = value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ModelError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelError::Parse(format!("line {}: expected `name = value`", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
