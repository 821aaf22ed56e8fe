//! Feedback-gain Riccati equations of the scalar LQ model.
//!
//! With `ell = gamma * x` the first adjoint is `p = -beta x`, and `beta`
//! solves `beta' + (2a + theta sigma gamma/beta) beta - b^2 beta^2 = 0`,
//! `beta(T) = 1`. Two choices of `gamma` are supported:
//!
//! * [`GammaChoice::SigmaBeta`]: `beta' + 2a beta + (theta sigma^2 - b^2) beta^2 = 0`,
//! * [`GammaChoice::One`]: `beta' + (2a + theta sigma) beta - b^2 beta^2 = 0`.
//!
//! Closed forms are written as `beta = numerator / denominator` in the time to
//! go `tau = T - t`; the gain blows up where the denominator reaches zero.
//! For `gamma = 1` the historically printed closed form
//! ([`FormulaVariant::PaperPrinted`]) does not solve its own ODE; the exact
//! solution is [`FormulaVariant::DerivedOde`]. Both are kept so the printed
//! blow-up can be reproduced.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ScalarPath, TimeGrid};
use crate::model::LqParams;
use crate::numerics::{integrate, phi1, rk4_backward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaChoice {
    /// `gamma(t) = sigma * beta(t)`
    SigmaBeta,
    /// `gamma(t) = 1`
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulaVariant {
    /// The closed form as historically printed for `gamma = 1`.
    PaperPrinted,
    /// Bernoulli-substitution solution of the `gamma = 1` ODE.
    #[default]
    DerivedOde,
}

/// Number of uniform `tau` samples scanned for a sign change before bisecting.
pub const BLOW_UP_SCAN: usize = 10_000;
/// Absolute tolerance of the blow-up bisection.
pub const BLOW_UP_TOL: f64 = 1e-9;
/// Relative tolerance of the `alpha` quadrature.
pub const ALPHA_REL_TOL: f64 = 1e-10;

fn check_time(params: &LqParams, t: f64) -> Result<f64> {
    if !(t >= 0.0 && t <= params.t_end) {
        return Err(Error::invalid(format!(
            "t = {t} outside [0, {}]",
            params.t_end
        )));
    }
    Ok(params.t_end - t)
}

/// `(numerator, denominator)` of the closed form at time to go `tau`.
fn closed_form_parts(
    params: &LqParams,
    choice: GammaChoice,
    variant: FormulaVariant,
    tau: f64,
) -> (f64, f64) {
    let LqParams {
        a,
        b,
        sigma,
        theta,
        t_end,
        ..
    } = *params;
    match choice {
        GammaChoice::SigmaBeta => {
            let k = b * b - theta * sigma * sigma;
            let z = -2.0 * a * tau;
            (1.0, z.exp() + k * tau * phi1(z))
        }
        GammaChoice::One => {
            let c = 2.0 * a + theta * sigma;
            let growth = tau * phi1(c * tau);
            let den = match variant {
                FormulaVariant::DerivedOde => 1.0 + b * b * growth,
                FormulaVariant::PaperPrinted => {
                    1.0 - b * b * (theta * sigma * t_end).exp() * growth
                }
            };
            ((c * tau).exp(), den)
        }
    }
}

/// Closed-form denominator at time to go `tau`; the gain is finite while it is positive.
pub fn closed_form_denominator(
    params: &LqParams,
    choice: GammaChoice,
    variant: FormulaVariant,
    tau: f64,
) -> f64 {
    closed_form_parts(params, choice, variant, tau).1
}

/// The closed form evaluated without the blow-up guard (the analytic
/// continuation past the root). Diagnostic use only.
pub fn closed_form_raw(
    params: &LqParams,
    choice: GammaChoice,
    variant: FormulaVariant,
    t: f64,
) -> f64 {
    let (num, den) = closed_form_parts(params, choice, variant, params.t_end - t);
    num / den
}

fn guarded_beta(
    params: &LqParams,
    choice: GammaChoice,
    variant: FormulaVariant,
    t: f64,
) -> Result<f64> {
    let tau = check_time(params, t)?;
    if tau == 0.0 {
        return Ok(1.0);
    }
    let (num, den) = closed_form_parts(params, choice, variant, tau);
    let beta = num / den;
    if den > 0.0 && beta.is_finite() {
        Ok(beta)
    } else {
        Err(Error::BlowUp {
            t,
            tau_star: blow_up_time(params, choice, variant),
        })
    }
}

/// Gain for `gamma = sigma * beta`, `beta = 1 / w` with
/// `w = e^{-2a tau} + (b^2 - theta sigma^2) tau phi1(-2a tau)`.
pub fn beta_case1(params: &LqParams, t: f64) -> Result<f64> {
    guarded_beta(
        params,
        GammaChoice::SigmaBeta,
        FormulaVariant::DerivedOde,
        t,
    )
}

/// Gain for `gamma = 1`, with `c = 2a + theta sigma`:
/// `DerivedOde` gives `e^{c tau} / (1 + b^2 tau phi1(c tau))`,
/// `PaperPrinted` gives `e^{c tau} / (1 - b^2 e^{theta sigma T} tau phi1(c tau))`.
pub fn beta_case2(params: &LqParams, t: f64, variant: FormulaVariant) -> Result<f64> {
    guarded_beta(params, GammaChoice::One, variant, t)
}

/// Smallest `tau* in (0, T]` where the closed-form denominator vanishes.
pub fn blow_up_time(
    params: &LqParams,
    choice: GammaChoice,
    variant: FormulaVariant,
) -> Option<f64> {
    let den = |tau: f64| closed_form_denominator(params, choice, variant, tau);
    let t_end = params.t_end;
    let mut prev = 0.0;
    for j in 1..=BLOW_UP_SCAN {
        let tau = if j == BLOW_UP_SCAN {
            t_end
        } else {
            j as f64 * t_end / BLOW_UP_SCAN as f64
        };
        if !(den(tau) > 0.0) {
            let (mut lo, mut hi) = (prev, tau);
            while hi - lo > BLOW_UP_TOL {
                let mid = 0.5 * (lo + hi);
                if den(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        prev = tau;
    }
    None
}

/// `alpha(t) = exp(int_t^T (a - b^2 beta(s)) ds)` by adaptive Gauss-Kronrod.
pub fn alpha_meanfield(
    params: &LqParams,
    beta: &dyn Fn(f64) -> Result<f64>,
    t: f64,
) -> Result<f64> {
    check_time(params, t)?;
    let LqParams { a, b, t_end, .. } = *params;
    if t == t_end {
        return Ok(1.0);
    }
    let integral = integrate(|s| Ok(a - b * b * beta(s)?), t, t_end, ALPHA_REL_TOL, 1e-15)?;
    Ok(integral.exp())
}

/// Backward RK4 solution of `y' = rhs(t, y)`, `y(T) = y_end`, on `grid`.
pub fn ode_oracle(
    rhs: &dyn Fn(f64, f64) -> f64,
    y_end: f64,
    grid: &TimeGrid,
) -> Result<ScalarPath> {
    let nodes: Vec<f64> = grid.nodes().collect();
    match rk4_backward(&|t, y| Ok(rhs(t, y)), y_end, &nodes) {
        Ok(values) => ScalarPath::new(*grid, values),
        Err((k, _)) => {
            let last = nodes[k + 1];
            Err(Error::BlowUp {
                t: last,
                tau_star: None,
            })
        }
    }
}

/// Gain, mean-field factor and `gamma` for one model and one `gamma` choice.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    params: LqParams,
    gamma_choice: GammaChoice,
    variant: FormulaVariant,
    blow_up_time: Option<f64>,
}

impl RiccatiSolution {
    pub fn new(
        params: LqParams,
        gamma_choice: GammaChoice,
        variant: FormulaVariant,
    ) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            gamma_choice,
            variant,
            blow_up_time: blow_up_time(&params, gamma_choice, variant),
        })
    }

    pub fn params(&self) -> &LqParams {
        &self.params
    }

    pub fn gamma_choice(&self) -> GammaChoice {
        self.gamma_choice
    }

    pub fn variant(&self) -> FormulaVariant {
        self.variant
    }

    /// Blow-up time measured backward from `T`, if the gain explodes on `[0, T]`.
    pub fn blow_up_time(&self) -> Option<f64> {
        self.blow_up_time
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        let tau = check_time(&self.params, t)?;
        if tau == 0.0 {
            return Ok(1.0);
        }
        let (num, den) = closed_form_parts(&self.params, self.gamma_choice, self.variant, tau);
        let beta = num / den;
        if den > 0.0 && beta.is_finite() {
            Ok(beta)
        } else {
            Err(Error::BlowUp {
                t,
                tau_star: self.blow_up_time,
            })
        }
    }

    /// Mean-field factor; identically 1 when `mu = 0`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        if self.params.mu == 0.0 {
            check_time(&self.params, t)?;
            return Ok(1.0);
        }
        alpha_meanfield(&self.params, &|s| self.beta(s), t)
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        match self.gamma_choice {
            GammaChoice::SigmaBeta => Ok(self.params.sigma * self.beta(t)?),
            GammaChoice::One => {
                check_time(&self.params, t)?;
                Ok(1.0)
            }
        }
    }

    /// Right-hand side `beta'(t) = F(t, beta)` of the ODE the gain solves.
    pub fn ode_rhs(&self) -> impl Fn(f64, f64) -> f64 + Send + Sync + 'static {
        let LqParams {
            a, b, sigma, theta, ..
        } = self.params;
        let choice = self.gamma_choice;
        move |_t, beta| match choice {
            GammaChoice::SigmaBeta => {
                -2.0 * a * beta - (theta * sigma * sigma - b * b) * beta * beta
            }
            GammaChoice::One => -(2.0 * a + theta * sigma) * beta + b * b * beta * beta,
        }
    }

    /// Gain, `alpha` and `gamma` on every grid node from the blow-up on.
    pub fn tabulate(&self, grid: &TimeGrid) -> Result<RiccatiTable> {
        if (grid.t_end() - self.params.t_end).abs() > 0.0 {
            return Err(Error::invalid(format!(
                "grid horizon {} differs from model horizon {}",
                grid.t_end(),
                self.params.t_end
            )));
        }
        let n = grid.len();
        let mut beta = vec![f64::NAN; n];
        let mut first_valid = n;
        for k in (0..n).rev() {
            match self.beta(grid.node(k)) {
                Ok(v) => {
                    beta[k] = v;
                    first_valid = k;
                }
                Err(Error::BlowUp { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        let mut gamma = vec![f64::NAN; n];
        for k in first_valid..n {
            gamma[k] = match self.gamma_choice {
                GammaChoice::SigmaBeta => self.params.sigma * beta[k],
                GammaChoice::One => 1.0,
            };
        }
        let mut alpha = vec![f64::NAN; n];
        if first_valid < n {
            alpha[n - 1] = 1.0;
            let LqParams { a, b, mu, .. } = self.params;
            for k in (first_valid..n - 1).rev() {
                alpha[k] = if mu == 0.0 {
                    1.0
                } else {
                    let piece = integrate(
                        |s| Ok(a - b * b * self.beta(s)?),
                        grid.node(k),
                        grid.node(k + 1),
                        ALPHA_REL_TOL,
                        1e-16,
                    )?;
                    alpha[k + 1] * piece.exp()
                };
            }
        }
        Ok(RiccatiTable {
            grid: *grid,
            beta,
            alpha,
            gamma,
            first_valid,
        })
    }
}

/// Tabulated gain on a grid. Nodes before `first_valid` lie past the blow-up
/// and hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiTable {
    pub grid: TimeGrid,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub first_valid: usize,
}

impl RiccatiTable {
    pub fn is_complete(&self) -> bool {
        self.first_valid == 0
    }
}
