//! Frailty transforms.
//!
//! A frailty family is described by its transform `G_θ(x) = -log E[exp(-ω x)]`,
//! the negative log Laplace transform of the frailty distribution. The marginal
//! cumulative hazard of a subject is `G_θ` applied to the conditional one, so
//! the likelihood needs `G_θ`, `log g_θ` (with `g_θ = ∂G_θ/∂x`) and their partial
//! derivatives in `x` and `θ`.
//!
//! Gamma and IGG(α) share the power form
//! `G = x · χ(u)` with `u = θx / (1 - α)` and `χ(u) = ((1+u)^α - 1) / (α u)`
//! (`log1p(u) / u` when `α = 0`, which is exactly the gamma transform).
//! Box-Cox uses `G = L · ψ(θL)` with `L = log1p(x)` and `ψ(v) = expm1(v) / v`.
//! Both kernels switch to truncated Taylor series near zero so that the
//! `θ → 0` limits come out exactly.

use serde::{Deserialize, Serialize};

use crate::error::{NfmError, Result};

/// Below this θ the analytic θ → 0 limit is used.
pub const THETA_LIMIT_SWITCH: f64 = 1e-7;

/// Kernel arguments below this magnitude use the series expansion.
const SERIES_SWITCH: f64 = 1e-3;
const SERIES_TERMS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum FrailtyFamily {
    Gamma,
    BoxCox,
    /// IGG(α) with a fixed, known α in `[0, 1)`.
    Igg { alpha: f64 },
}

impl FrailtyFamily {
    /// Parses the config key ("gamma", "boxcox", "igg"); `alpha` is required for IGG.
    pub fn from_key(key: &str, alpha: Option<f64>) -> Result<Self> {
        match key.trim().to_ascii_lowercase().as_str() {
            "gamma" => Ok(FrailtyFamily::Gamma),
            "boxcox" | "box-cox" => Ok(FrailtyFamily::BoxCox),
            "igg" => {
                let alpha = alpha
                    .ok_or_else(|| NfmError::Config("igg frailty requires an alpha value".into()))?;
                Ok(FrailtyFamily::Igg { alpha })
            }
            other => Err(NfmError::Config(format!("unknown frailty family '{other}'"))),
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            FrailtyFamily::Gamma => "gamma",
            FrailtyFamily::BoxCox => "boxcox",
            FrailtyFamily::Igg { .. } => "igg",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            FrailtyFamily::Igg { alpha } => Some(*alpha),
            _ => None,
        }
    }
}

/// Closed interval Θ that the frailty parameter is projected onto.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for ThetaBounds {
    fn default() -> Self {
        ThetaBounds { min: 0.0, max: 10.0 }
    }
}

impl ThetaBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min >= 0.0 && max >= min && max.is_finite()) {
            return Err(NfmError::Domain(format!("invalid theta bounds [{min}, {max}]")));
        }
        Ok(ThetaBounds { min, max })
    }

    pub fn project(&self, theta: f64) -> f64 {
        theta.clamp(self.min, self.max)
    }

    pub fn contains(&self, theta: f64) -> bool {
        theta >= self.min && theta <= self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrailtySpec {
    #[serde(flatten)]
    pub family: FrailtyFamily,
    pub theta: f64,
}

/// All transform quantities at one point, as consumed by the likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrailtyTerms {
    pub g_big: f64,
    pub log_g: f64,
    pub g: f64,
    pub dg_big_dtheta: f64,
    pub dlog_g_dtheta: f64,
    pub dlog_g_dx: f64,
}

impl FrailtySpec {
    pub fn new(family: FrailtyFamily, theta: f64) -> Result<Self> {
        let spec = FrailtySpec { family, theta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gamma(theta: f64) -> Result<Self> {
        Self::new(FrailtyFamily::Gamma, theta)
    }

    pub fn box_cox(theta: f64) -> Result<Self> {
        Self::new(FrailtyFamily::BoxCox, theta)
    }

    pub fn igg(alpha: f64, theta: f64) -> Result<Self> {
        Self::new(FrailtyFamily::Igg { alpha }, theta)
    }

    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        Self::new(self.family, theta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.theta >= 0.0) {
            return Err(NfmError::Domain(format!("theta must be finite and >= 0, got {}", self.theta)));
        }
        if let FrailtyFamily::Igg { alpha } = self.family {
            if !(0.0..1.0).contains(&alpha) {
                return Err(NfmError::Domain(format!("igg alpha must lie in [0, 1), got {alpha}")));
            }
        }
        Ok(())
    }

    fn effective_theta(&self) -> f64 {
        if self.theta < THETA_LIMIT_SWITCH {
            0.0
        } else {
            self.theta
        }
    }

    fn check_x(&self, x: f64) -> Result<()> {
        self.validate()?;
        if !(x >= 0.0) || x.is_infinite() {
            return Err(NfmError::Domain(format!("frailty transform argument must be finite and >= 0, got {x}")));
        }
        Ok(())
    }

    /// `G_θ(x)`.
    pub fn transform(&self, x: f64) -> Result<f64> {
        Ok(self.terms(x)?.g_big)
    }

    /// `g_θ(x) = ∂G_θ/∂x`.
    pub fn transform_dx(&self, x: f64) -> Result<f64> {
        Ok(self.terms(x)?.g)
    }

    pub fn log_gdx(&self, x: f64) -> Result<f64> {
        Ok(self.terms(x)?.log_g)
    }

    pub fn transform_dtheta(&self, x: f64) -> Result<f64> {
        Ok(self.terms(x)?.dg_big_dtheta)
    }

    pub fn log_gdx_dtheta(&self, x: f64) -> Result<f64> {
        Ok(self.terms(x)?.dlog_g_dtheta)
    }

    pub fn log_gdx_dx(&self, x: f64) -> Result<f64> {
        Ok(self.terms(x)?.dlog_g_dx)
    }

    /// Evaluates every transform quantity at `x` in one pass.
    pub fn terms(&self, x: f64) -> Result<FrailtyTerms> {
        self.check_x(x)?;
        let theta = self.effective_theta();
        Ok(match self.family {
            FrailtyFamily::Gamma => power_terms(0.0, theta, x),
            FrailtyFamily::Igg { alpha } => power_terms(alpha, theta, x),
            FrailtyFamily::BoxCox => box_cox_terms(theta, x),
        })
    }

    /// `G_θ^{-1}(y)` for `y >= 0`, in closed form for all three families.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        self.check_x(y)?;
        let theta = self.effective_theta();
        let x = match self.family {
            FrailtyFamily::BoxCox => {
                if theta == 0.0 {
                    y.exp_m1()
                } else {
                    ((theta * y).ln_1p() / theta).exp_m1()
                }
            }
            FrailtyFamily::Gamma => {
                if theta == 0.0 {
                    y
                } else {
                    (theta * y).exp_m1() / theta
                }
            }
            FrailtyFamily::Igg { alpha } => {
                if theta == 0.0 {
                    y
                } else if alpha == 0.0 {
                    (theta * y).exp_m1() / theta
                } else {
                    let c = 1.0 - alpha;
                    let u = ((alpha * theta * y / c).ln_1p() / alpha).exp_m1();
                    c * u / theta
                }
            }
        };
        if !x.is_finite() {
            return Err(NfmError::NonFinite(format!("inverse frailty transform overflowed at y = {y}")));
        }
        Ok(x)
    }
}

/// Coefficients of `χ(u) = Σ_{k≥1} c_k u^{k-1}` where `c_k = binom(a, k) / a`.
fn chi_coefficients(a: f64) -> [f64; SERIES_TERMS] {
    let mut c = [0.0; SERIES_TERMS];
    c[0] = 1.0;
    for k in 2..=SERIES_TERMS {
        c[k - 1] = c[k - 2] * (a - (k as f64) + 1.0) / k as f64;
    }
    c
}

/// `χ(u)` and `χ'(u)`.
fn chi(a: f64, u: f64) -> (f64, f64) {
    if u.abs() < SERIES_SWITCH {
        let c = chi_coefficients(a);
        let mut value = 0.0;
        let mut slope = 0.0;
        for k in (1..=SERIES_TERMS).rev() {
            value = value * u + c[k - 1];
        }
        for k in (2..=SERIES_TERMS).rev() {
            slope = slope * u + (k as f64 - 1.0) * c[k - 1];
        }
        (value, slope)
    } else {
        let l = u.ln_1p();
        let value = if a == 0.0 { l / u } else { (a * l).exp_m1() / (a * u) };
        let pow_am1 = ((a - 1.0) * l).exp();
        (value, (pow_am1 - value) / u)
    }
}

fn power_terms(a: f64, theta: f64, x: f64) -> FrailtyTerms {
    let c = 1.0 - a;
    let u = theta * x / c;
    let (chi_u, chi_du) = chi(a, u);
    let log_g = (a - 1.0) * u.ln_1p();
    FrailtyTerms {
        g_big: x * chi_u,
        log_g,
        g: log_g.exp(),
        dg_big_dtheta: x * x / c * chi_du,
        dlog_g_dtheta: (a - 1.0) * x / (c * (1.0 + u)),
        dlog_g_dx: (a - 1.0) * theta / (c * (1.0 + u)),
    }
}

/// `ψ(v) = expm1(v)/v` and `ψ'(v)`.
fn psi(v: f64) -> (f64, f64) {
    if v.abs() < SERIES_SWITCH {
        // ψ = Σ v^k/(k+1)!, ψ' = Σ_{k≥1} k v^{k-1}/(k+1)!
        let mut value = 0.0;
        let mut slope = 0.0;
        let mut fact = [1.0; SERIES_TERMS + 2];
        for k in 1..fact.len() {
            fact[k] = fact[k - 1] * k as f64;
        }
        for k in (0..SERIES_TERMS).rev() {
            value = value * v + 1.0 / fact[k + 1];
        }
        for k in (1..SERIES_TERMS).rev() {
            slope = slope * v + k as f64 / fact[k + 1];
        }
        (value, slope)
    } else {
        let value = v.exp_m1() / v;
        (value, (v.exp() - value) / v)
    }
}

fn box_cox_terms(theta: f64, x: f64) -> FrailtyTerms {
    let l = x.ln_1p();
    let (psi_v, psi_dv) = psi(theta * l);
    let log_g = (theta - 1.0) * l;
    FrailtyTerms {
        g_big: l * psi_v,
        log_g,
        g: log_g.exp(),
        dg_big_dtheta: l * l * psi_dv,
        dlog_g_dtheta: l,
        dlog_g_dx: (theta - 1.0) / (1.0 + x),
    }
}
