//! Scalar mean-field coefficient interface and the linear-quadratic instance.
//!
//! All functions take `(t, x, y, u)` where `y` is the state mean `E[x(t)]`.
//! The terminal cost `h` takes `(x, y)` only.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Drift `b`, diffusion `sigma`, running cost `f`, terminal cost `h` and the
/// partial derivatives the adjoint equations use.
///
/// Implementations must be pure: the simulator calls them from many paths at once.
pub trait Coefficients: Send + Sync {
    fn b(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn sigma(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn f(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn h(&self, x: f64, y: f64) -> f64;

    fn b_x(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn b_y(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn b_xx(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn sigma_x(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn sigma_y(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn sigma_xx(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn f_x(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn f_y(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn f_u(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn f_xx(&self, t: f64, x: f64, y: f64, u: f64) -> f64;
    fn h_x(&self, x: f64, y: f64) -> f64;
    fn h_y(&self, x: f64, y: f64) -> f64;
    fn h_xx(&self, x: f64, y: f64) -> f64;
}

/// Constants of the scalar LQ model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqParams {
    /// Drift slope.
    pub a: f64,
    /// Control gain.
    pub b: f64,
    pub sigma: f64,
    /// Risk-sensitivity index; negative is risk seeking, positive risk averse.
    pub theta: f64,
    /// Weight of `E[x(T)]` in the terminal cost; zero gives the mean-field-free model.
    pub mu: f64,
    pub x0: f64,
    pub t_end: f64,
}

impl LqParams {
    /// The parameters of the reference experiment.
    pub const PAPER: LqParams = LqParams {
        a: 0.0,
        b: 1.0,
        sigma: 1e-2,
        theta: 1e-5,
        mu: 0.0,
        x0: 1.0,
        t_end: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("a", self.a),
            ("b", self.b),
            ("sigma", self.sigma),
            ("theta", self.theta),
            ("mu", self.mu),
            ("x0", self.x0),
            ("t_end", self.t_end),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite, got {v}")));
            }
        }
        if self.sigma < 0.0 {
            return Err(Error::invalid(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if self.t_end <= 0.0 {
            return Err(Error::invalid(format!(
                "t_end must be > 0, got {}",
                self.t_end
            )));
        }
        Ok(())
    }

    pub fn with_t_end(self, t_end: f64) -> Self {
        Self { t_end, ..self }
    }

    pub fn with_theta(self, theta: f64) -> Self {
        Self { theta, ..self }
    }

    pub fn with_mu(self, mu: f64) -> Self {
        Self { mu, ..self }
    }
}

impl Default for LqParams {
    fn default() -> Self {
        Self::PAPER
    }
}

/// `b = a x + b u`, `sigma` constant, `f = u^2/2`, `h = x^2/2 + mu y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqCoefficients {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub mu: f64,
}

pub fn lq_coefficients(params: &LqParams) -> LqCoefficients {
    LqCoefficients {
        a: params.a,
        b: params.b,
        sigma: params.sigma,
        mu: params.mu,
    }
}

impl Coefficients for LqCoefficients {
    fn b(&self, _t: f64, x: f64, _y: f64, u: f64) -> f64 {
        self.a * x + self.b * u
    }
    fn sigma(&self, _t: f64, _x: f64, _y: f64, _u: f64) -> f64 {
        self.sigma
    }
    fn f(&self, _t: f64, _x: f64, _y: f64, u: f64) -> f64 {
        0.5 * u * u
    }
    fn h(&self, x: f64, y: f64) -> f64 {
        0.5 * x * x + self.mu * y
    }

    fn b_x(&self, _t: f64, _x: f64, _y: f64, _u: f64) -> f64 {
        self.a
    }
    fn b_y(&self, _t: f64, _x: f64, _y: f64, _u: f64) -> f64 {
        0.0
    }
    fn b_xx(&self, _t: f64, _x: f64, _y: f64, _u: f64) -> f64 {
        0.0
    }
    fn sigma_x(&self, _t: f64, _x: f64, _y: f64, _u: f64) -> f64 {
        0.0
    }
    fn sigma_y(&self, _t: f64, _x: f64, _y: f64, _u: f64) -> f64 {
        0.0
    }
    fn sigma_xx(&self, _t: f64, _x: f64, _y: f64, _u: f64) -> f64 {
        0.0
    }
    fn f_x(&self, _t: f64, _x: f64, _y: f64, _u: f64) -> f64 {
        0.0
    }
    fn f_y(&self, _t: f64, _x: f64, _y: f64, _u: f64) -> f64 {
        0.0
    }
    fn f_u(&self, _t: f64, _x: f64, _y: f64, u: f64) -> f64 {
        u
    }
    fn f_xx(&self, _t: f64, _x: f64, _y: f64, _u: f64) -> f64 {
        0.0
    }
    fn h_x(&self, x: f64, _y: f64) -> f64 {
        x
    }
    fn h_y(&self, _x: f64, _y: f64) -> f64 {
        self.mu
    }
    fn h_xx(&self, _x: f64, _y: f64) -> f64 {
        1.0
    }
}

/// Largest disagreement between one declared partial and its finite difference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartialDiscrepancy {
    pub name: &'static str,
    pub max_abs: f64,
    /// `(t, x, y, u)` where the maximum was attained.
    pub at: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub samples: usize,
    pub step: f64,
    pub partials: Vec<PartialDiscrepancy>,
}

impl DerivativeReport {
    pub fn max_discrepancy(&self) -> f64 {
        self.partials.iter().map(|p| p.max_abs).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&PartialDiscrepancy> {
        self.partials
            .iter()
            .max_by(|a, b| a.max_abs.total_cmp(&b.max_abs))
    }
}

/// Half-width of the sampling box for [`check_derivatives`].
pub const DERIVATIVE_BOX: f64 = 5.0;
/// Central-difference step for [`check_derivatives`].
pub const DERIVATIVE_STEP: f64 = 1e-5;

type Fn4<'a> = &'a dyn Fn(f64, f64, f64, f64) -> f64;

/// Compares every declared partial against a central difference of its parent
/// at `samples` points drawn uniformly from `[-5, 5]^4` (`t, x, y, u`).
///
/// Second derivatives are differenced from the declared first derivative.
pub fn check_derivatives(
    coeffs: &dyn Coefficients,
    samples: usize,
    seed: u64,
) -> Result<DerivativeReport> {
    if samples == 0 {
        return Err(Error::invalid(
            "check_derivatives needs at least one sample",
        ));
    }
    let eps = DERIVATIVE_STEP;
    let c = coeffs;

    let b = |t: f64, x: f64, y: f64, u: f64| c.b(t, x, y, u);
    let sigma = |t: f64, x: f64, y: f64, u: f64| c.sigma(t, x, y, u);
    let f = |t: f64, x: f64, y: f64, u: f64| c.f(t, x, y, u);
    let h = |_t: f64, x: f64, y: f64, _u: f64| c.h(x, y);
    let b_x = |t: f64, x: f64, y: f64, u: f64| c.b_x(t, x, y, u);
    let sigma_x = |t: f64, x: f64, y: f64, u: f64| c.sigma_x(t, x, y, u);
    let f_x = |t: f64, x: f64, y: f64, u: f64| c.f_x(t, x, y, u);
    let h_x = |_t: f64, x: f64, y: f64, _u: f64| c.h_x(x, y);

    // (name, declared partial, parent, variable index)
    let checks: [(&'static str, Fn4, Fn4, usize); 13] = [
        ("b_x", &|t, x, y, u| c.b_x(t, x, y, u), &b, 1),
        ("b_y", &|t, x, y, u| c.b_y(t, x, y, u), &b, 2),
        ("b_xx", &|t, x, y, u| c.b_xx(t, x, y, u), &b_x, 1),
        ("sigma_x", &|t, x, y, u| c.sigma_x(t, x, y, u), &sigma, 1),
        ("sigma_y", &|t, x, y, u| c.sigma_y(t, x, y, u), &sigma, 2),
        (
            "sigma_xx",
            &|t, x, y, u| c.sigma_xx(t, x, y, u),
            &sigma_x,
            1,
        ),
        ("f_x", &|t, x, y, u| c.f_x(t, x, y, u), &f, 1),
        ("f_y", &|t, x, y, u| c.f_y(t, x, y, u), &f, 2),
        ("f_u", &|t, x, y, u| c.f_u(t, x, y, u), &f, 3),
        ("f_xx", &|t, x, y, u| c.f_xx(t, x, y, u), &f_x, 1),
        ("h_x", &|_t, x, y, _u| c.h_x(x, y), &h, 1),
        ("h_y", &|_t, x, y, _u| c.h_y(x, y), &h, 2),
        ("h_xx", &|_t, x, y, _u| c.h_xx(x, y), &h_x, 1),
    ];
    let parents: [(&str, Fn4); 4] = [("b", &b), ("sigma", &sigma), ("f", &f), ("h", &h)];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = move || {
        let bits = rng.next_u64() >> 11;
        (bits as f64 / (1u64 << 53) as f64) * 2.0 * DERIVATIVE_BOX - DERIVATIVE_BOX
    };

    let mut partials: Vec<PartialDiscrepancy> = checks
        .iter()
        .map(|(name, ..)| PartialDiscrepancy {
            name,
            max_abs: 0.0,
            at: [0.0; 4],
        })
        .collect();

    for _ in 0..samples {
        let point = [uniform(), uniform(), uniform(), uniform()];
        let [t, x, y, u] = point;
        for (name, g) in parents.iter() {
            if !g(t, x, y, u).is_finite() {
                return Err(eval_error(name, point));
            }
        }
        for ((name, declared, parent, var), slot) in checks.iter().zip(partials.iter_mut()) {
            let d = declared(t, x, y, u);
            if !d.is_finite() {
                return Err(eval_error(name, point));
            }
            let mut hi = point;
            let mut lo = point;
            hi[*var] += eps;
            lo[*var] -= eps;
            let fd = (parent(hi[0], hi[1], hi[2], hi[3]) - parent(lo[0], lo[1], lo[2], lo[3]))
                / (2.0 * eps);
            if !fd.is_finite() {
                return Err(eval_error(name, point));
            }
            let gap = (d - fd).abs();
            if gap > slot.max_abs {
                slot.max_abs = gap;
                slot.at = point;
            }
        }
    }

    Ok(DerivativeReport {
        samples,
        step: eps,
        partials,
    })
}

fn eval_error(name: &str, [t, x, y, u]: [f64; 4]) -> Error {
    Error::Evaluation {
        function: name.to_string(),
        t,
        x,
        y,
        u,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lq(a: f64, b: f64, mu: f64) -> LqCoefficients {
        lq_coefficients(&LqParams {
            a,
            b,
            mu,
            ..LqParams::PAPER
        })
    }

    #[test]
    fn lq_values() {
        assert_eq!(lq(0.0, 1.0, 0.0).b(0.3, 2.0, 5.0, 3.0), 3.0);
        assert_eq!(lq(0.5, 1.0, 0.0).h(4.0, 7.0), 8.0);
        assert_eq!(lq(0.5, 1.0, 2.0).h_y(4.0, 7.0), 2.0);
    }

    #[test]
    fn lq_second_derivatives_vanish() {
        let c = lq(0.7, -1.3, 2.0);
        for &(x, u) in &[(0.0, 0.0), (1.5, -2.0), (-4.0, 3.3)] {
            assert_eq!(c.b_xx(0.1, x, 0.2, u), 0.0);
            assert_eq!(c.sigma_xx(0.1, x, 0.2, u), 0.0);
            assert_eq!(c.f_xx(0.1, x, 0.2, u), 0.0);
            assert_eq!(c.h_xx(x, 0.2), 1.0);
        }
    }

    #[test]
    fn mean_field_free_when_mu_zero() {
        let c = lq(0.7, 1.0, 0.0);
        assert_eq!(c.h_y(3.0, -2.0), 0.0);
        assert_eq!(c.b_y(0.0, 3.0, -2.0, 1.0), 0.0);
        assert_eq!(c.f_y(0.0, 3.0, -2.0, 1.0), 0.0);
        assert_eq!(c.sigma_y(0.0, 3.0, -2.0, 1.0), 0.0);
    }

    #[test]
    fn lq_derivatives_match_finite_differences() {
        let c = lq(0.5, 1.0, 2.0);
        let report = check_derivatives(&c, 100, 11).unwrap();
        assert!(report.max_discrepancy() < 1e-6, "{report:?}");
        assert_eq!(report.partials.len(), 13);
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(matches!(
            check_derivatives(&lq(0.0, 1.0, 0.0), 0, 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn params_validation() {
        assert!(LqParams::PAPER.validate().is_ok());
        assert!(LqParams {
            sigma: -1.0,
            ..LqParams::PAPER
        }
        .validate()
        .is_err());
        assert!(LqParams {
            t_end: 0.0,
            ..LqParams::PAPER
        }
        .validate()
        .is_err());
        assert!(LqParams {
            a: f64::NAN,
            ..LqParams::PAPER
        }
        .validate()
        .is_err());
        assert!(LqParams {
            theta: -3.0,
            ..LqParams::PAPER
        }
        .validate()
        .is_ok());
    }
}
