//! Exponential cost, Hamiltonians and the maximum-principle checks.
//!
//! `J = E exp(theta Psi_T)` with `Psi_T = int_0^T f dt + h(x(T), E[x(T)])`,
//! and `Psi_theta = log(J) / theta`. For small `theta`,
//! `Psi_theta = E[Psi_T] + theta/2 var(Psi_T) + O(theta^2)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::AdjointPanel;
use crate::error::{Error, Result};
use crate::grid::{Noise, TimeGrid};
use crate::model::{Coefficients, LqParams};
use crate::numerics::{fixed_order_sum, log_sum_exp};
use crate::sim::{simulate_costs, ControlLaw, Ensemble, MartingalePanel};

fn finite(name: &str, t: f64, x: f64, m: f64, u: f64, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation {
            function: name.to_string(),
            t,
            x,
            y: m,
            u,
        })
    }
}

/// `H = b p + sigma q - f`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    coeffs: &dyn Coefficients,
    t: f64,
    x: f64,
    m: f64,
    u: f64,
    p: f64,
    q: f64,
) -> Result<f64> {
    rs_hamiltonian(coeffs, t, x, m, u, p, q, 0.0, 0.0)
}

/// `H^theta = b p + sigma (q + theta ell p) - f`.
#[allow(clippy::too_many_arguments)]
pub fn rs_hamiltonian(
    coeffs: &dyn Coefficients,
    t: f64,
    x: f64,
    m: f64,
    u: f64,
    p: f64,
    q: f64,
    ell: f64,
    theta: f64,
) -> Result<f64> {
    let b = finite("b", t, x, m, u, coeffs.b(t, x, m, u))?;
    let s = finite("sigma", t, x, m, u, coeffs.sigma(t, x, m, u))?;
    let f = finite("f", t, x, m, u, coeffs.f(t, x, m, u))?;
    Ok(b * p + s * (q + theta * ell * p) - f)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    pub theta: f64,
    /// `J^theta = exp(log_domain_value)`.
    pub j_theta: f64,
    /// `log(J) / theta`, or the mean cost when `theta = 0`.
    pub psi_theta: f64,
    pub mean_psi_t: f64,
    /// Plug-in (`1/M`) variance of `Psi_T`.
    pub var_psi_t: f64,
    /// Delta-method standard error of `psi_theta`.
    pub std_error: f64,
    pub n_samples: usize,
    /// `log J`, computed by log-sum-exp.
    pub log_domain_value: f64,
}

/// Cost statistics from realized `Psi_T` samples.
pub fn cost_from_samples(theta: f64, psi: &[f64]) -> Result<CostEstimate> {
    if psi.is_empty() {
        return Err(Error::invalid("no cost samples"));
    }
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cost samples must be finite"));
    }
    if !theta.is_finite() {
        return Err(Error::invalid("theta must be finite"));
    }
    let m = psi.len() as f64;
    // shifted by the first sample so identical samples give exactly zero variance
    let shift = psi[0];
    let mean_shifted = fixed_order_sum(psi.iter().map(|v| v - shift)) / m;
    let mean = shift + mean_shifted;
    let ss = fixed_order_sum(psi.iter().map(|v| {
        let d = v - shift - mean_shifted;
        d * d
    }));
    let var = ss / m;
    let sample_var = if psi.len() > 1 { ss / (m - 1.0) } else { 0.0 };
    let (log_j, psi_theta, std_error) = if theta == 0.0 {
        (0.0, mean, (sample_var / m).sqrt())
    } else {
        let scaled: Vec<f64> = psi.iter().map(|v| theta * v).collect();
        let lse = log_sum_exp(&scaled);
        let log_j = lse - m.ln();
        // weights w = exp(theta psi) / mean(exp(theta psi)), mean 1
        let w_ss = fixed_order_sum(scaled.iter().map(|s| {
            let w = (s - log_j).exp() - 1.0;
            w * w
        }));
        let w_var = if psi.len() > 1 { w_ss / (m - 1.0) } else { 0.0 };
        (log_j, log_j / theta, (w_var / m).sqrt() / theta.abs())
    };
    Ok(CostEstimate {
        theta,
        j_theta: log_j.exp(),
        psi_theta,
        mean_psi_t: mean,
        var_psi_t: var,
        std_error,
        n_samples: psi.len(),
        log_domain_value: log_j,
    })
}

fn cost_samples(
    coeffs: &dyn Coefficients,
    control: &ControlLaw,
    params: &LqParams,
    grid: TimeGrid,
    n_paths: usize,
    noise: Noise,
) -> Result<Vec<f64>> {
    let samples = simulate_costs(coeffs, control, params.x0, grid, n_paths, noise)?;
    if let Some(record) = samples.blow_up {
        let done: Vec<f64> = samples
            .psi
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        let partial = if done.is_empty() {
            f64::NAN
        } else {
            fixed_order_sum(done.iter().copied()) / done.len() as f64
        };
        return Err(Error::CostBlowUp {
            step: record.step,
            completed: done.len(),
            n_paths,
            partial_mean_psi: partial,
        });
    }
    Ok(samples.psi)
}

/// Monte Carlo estimate of the exponential cost at `params.theta` from a
/// fresh ensemble seeded with `seed`.
pub fn estimate_cost(
    coeffs: &dyn Coefficients,
    control: &ControlLaw,
    params: &LqParams,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<CostEstimate> {
    estimate_cost_with_noise(coeffs, control, params, grid, n_paths, Noise::new(seed))
}

pub fn estimate_cost_with_noise(
    coeffs: &dyn Coefficients,
    control: &ControlLaw,
    params: &LqParams,
    grid: TimeGrid,
    n_paths: usize,
    noise: Noise,
) -> Result<CostEstimate> {
    let psi = cost_samples(coeffs, control, params, grid, n_paths, noise)?;
    cost_from_samples(params.theta, &psi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionRow {
    pub theta: f64,
    pub psi_theta: f64,
    pub mean_psi_t: f64,
    pub var_psi_t: f64,
    pub std_error: f64,
    /// `|Psi_theta - E[Psi_T] - theta/2 var(Psi_T)|`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionReport {
    pub rows: Vec<ExpansionRow>,
    /// `gap[i] / gap[i + 1]` for consecutive entries of the theta list.
    pub ratios: Vec<f64>,
}

/// Second-order expansion gap for each `theta`, all evaluated on one set of
/// realized costs (common random numbers).
#[allow(clippy::too_many_arguments)]
pub fn expansion_check(
    coeffs: &dyn Coefficients,
    control: &ControlLaw,
    params: &LqParams,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    thetas: &[f64],
) -> Result<ExpansionReport> {
    if thetas.is_empty() || thetas.iter().any(|&t| t == 0.0 || !t.is_finite()) {
        return Err(Error::invalid(
            "theta list must be non-empty, finite and nonzero",
        ));
    }
    let psi = cost_samples(coeffs, control, params, grid, n_paths, Noise::new(seed))?;
    expansion_from_samples(&psi, thetas)
}

pub fn expansion_from_samples(psi: &[f64], thetas: &[f64]) -> Result<ExpansionReport> {
    let rows = thetas
        .iter()
        .map(|&theta| {
            let c = cost_from_samples(theta, psi)?;
            Ok(ExpansionRow {
                theta,
                psi_theta: c.psi_theta,
                mean_psi_t: c.mean_psi_t,
                var_psi_t: c.var_psi_t,
                std_error: c.std_error,
                gap: (c.psi_theta - c.mean_psi_t - 0.5 * theta * c.var_psi_t).abs(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ratios = rows.windows(2).map(|w| w[0].gap / w[1].gap).collect();
    Ok(ExpansionReport { rows, ratios })
}

/// Paths examined by the variational-inequality and argmax checks.
pub const VI_PATH_CAP: usize = 1000;
/// Default tolerance of the variational inequality.
pub const VI_TOLERANCE: f64 = 1e-8;
/// Slack granted to `H(u_bar)` against the grid maximum in [`argmax_check`].
pub const ARGMAX_TOLERANCE: f64 = 1e-9;

/// `[start, start + step, ..., stop]`, with the end point included when it
/// lies on the lattice.
pub fn control_range(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) || step <= 0.0 || stop < start {
        return Err(Error::invalid(format!(
            "bad control grid start={start} stop={stop} step={step}"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|j| start + j as f64 * step).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationalReport {
    pub control_grid: Vec<f64>,
    pub time_nodes: Vec<usize>,
    pub n_paths_checked: usize,
    /// `lhs_max[j][c]`: largest LHS over the checked paths at node
    /// `time_nodes[j]` and control `control_grid[c]`.
    pub lhs_max: Vec<Vec<f64>>,
    pub max_violation: f64,
    /// Fraction of (path, node, control) triples with LHS above the tolerance.
    pub violating_fraction: f64,
    pub tolerance: f64,
    pub sampling: String,
}

struct Sample<'a> {
    coeffs: &'a dyn Coefficients,
    adjoint: &'a AdjointPanel,
    ensemble: &'a Ensemble,
    theta: f64,
}

impl Sample<'_> {
    fn point(&self, i: usize, k: usize) -> (f64, f64, f64, f64, f64, f64, f64) {
        let e = self.ensemble;
        (
            e.grid.node(k),
            e.states[i].value(k),
            e.empirical_mean.value(k),
            e.controls[i].value(k),
            self.adjoint.p[i].value(k),
            self.adjoint.q[i].value(k),
            self.adjoint.ell[i].value(k),
        )
    }

    fn h(&self, i: usize, k: usize, u: f64) -> Result<f64> {
        let (t, x, m, _, p, q, ell) = self.point(i, k);
        rs_hamiltonian(self.coeffs, t, x, m, u, p, q, ell, self.theta)
    }
}

fn checked_paths(ensemble: &Ensemble) -> Vec<usize> {
    (0..ensemble.n_paths())
        .filter(|&i| {
            ensemble.states[i].blow_up().is_none() && ensemble.controls[i].blow_up().is_none()
        })
        .take(VI_PATH_CAP)
        .collect()
}

fn check_shapes(
    adjoint: &AdjointPanel,
    ensemble: &Ensemble,
    panel: &MartingalePanel,
) -> Result<()> {
    if adjoint.grid != ensemble.grid
        || adjoint.p.len() != ensemble.n_paths()
        || panel.v_theta.len() != ensemble.n_paths()
    {
        return Err(Error::invalid(
            "adjoint panel is not consistent with the ensemble",
        ));
    }
    Ok(())
}

/// Evaluates `H(u) - H(u_bar) + (P - theta p^2)(sigma(u) - sigma(u_bar))^2 / 2`
/// on every grid control, every node and up to [`VI_PATH_CAP`] completed paths.
#[allow(clippy::too_many_arguments)]
pub fn check_variational_inequality(
    coeffs: &dyn Coefficients,
    adjoint: &AdjointPanel,
    ensemble: &Ensemble,
    panel: &MartingalePanel,
    theta: f64,
    control_grid: &[f64],
    tolerance: f64,
) -> Result<VariationalReport> {
    if control_grid.is_empty() {
        return Err(Error::invalid("control grid is empty"));
    }
    check_shapes(adjoint, ensemble, panel)?;
    let paths = checked_paths(ensemble);
    if paths.is_empty() {
        return Err(Error::invalid("no completed path to check"));
    }
    let s = Sample {
        coeffs,
        adjoint,
        ensemble,
        theta,
    };
    let nodes: Vec<usize> = (0..ensemble.grid.len()).collect();
    let per_node: Vec<(Vec<f64>, usize)> = nodes
        .par_iter()
        .map(|&k| -> Result<(Vec<f64>, usize)> {
            let mut row = vec![f64::NEG_INFINITY; control_grid.len()];
            let mut violations = 0usize;
            let p_bar = adjoint.p_bar.value(k);
            for &i in &paths {
                let (t, x, m, u_bar, p, _, _) = s.point(i, k);
                let h_bar = s.h(i, k, u_bar)?;
                let sigma_bar = coeffs.sigma(t, x, m, u_bar);
                for (slot, &u) in row.iter_mut().zip(control_grid) {
                    let ds = coeffs.sigma(t, x, m, u) - sigma_bar;
                    let lhs = s.h(i, k, u)? - h_bar + 0.5 * (p_bar - theta * p * p) * ds * ds;
                    if lhs > tolerance {
                        violations += 1;
                    }
                    *slot = slot.max(lhs);
                }
            }
            Ok((row, violations))
        })
        .collect::<Result<_>>()?;
    let total = (paths.len() * nodes.len() * control_grid.len()) as f64;
    let violations: usize = per_node.iter().map(|r| r.1).sum();
    let lhs_max: Vec<Vec<f64>> = per_node.into_iter().map(|r| r.0).collect();
    let max_violation = lhs_max
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(VariationalReport {
        control_grid: control_grid.to_vec(),
        time_nodes: nodes,
        n_paths_checked: paths.len(),
        lhs_max,
        max_violation,
        violating_fraction: violations as f64 / total,
        tolerance,
        sampling: format!(
            "all {} grid nodes; first {} completed paths (cap {VI_PATH_CAP})",
            ensemble.grid.len(),
            paths.len()
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArgmaxOffender {
    pub path: usize,
    pub node: usize,
    pub u_bar: f64,
    /// Grid maximizer of `u -> H^theta` (smallest on ties).
    pub grid_argmax: f64,
    /// `max_grid H - H(u_bar)`.
    pub shortfall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArgmaxReport {
    pub passed: bool,
    pub samples: usize,
    /// Sample with the largest shortfall.
    pub worst: Option<ArgmaxOffender>,
    /// Largest `|grid argmax - u_bar|` seen.
    pub max_argmax_distance: f64,
    pub tolerance: f64,
}

/// Checks that the applied control maximizes `u -> H^theta` over the grid:
/// passes when `H(u_bar) >= max_grid H - ARGMAX_TOLERANCE` at every sample.
/// Requires `sigma` not to depend on `u`.
pub fn argmax_check(
    coeffs: &dyn Coefficients,
    adjoint: &AdjointPanel,
    ensemble: &Ensemble,
    panel: &MartingalePanel,
    theta: f64,
    control_grid: &[f64],
) -> Result<ArgmaxReport> {
    if control_grid.is_empty() {
        return Err(Error::invalid("control grid is empty"));
    }
    check_shapes(adjoint, ensemble, panel)?;
    let paths = checked_paths(ensemble);
    let s = Sample {
        coeffs,
        adjoint,
        ensemble,
        theta,
    };
    let (u_lo, u_hi) = (control_grid[0], control_grid[control_grid.len() - 1]);
    let nodes: Vec<usize> = (0..ensemble.grid.len()).collect();
    let rows: Vec<(Option<ArgmaxOffender>, f64)> = nodes
        .par_iter()
        .map(|&k| -> Result<(Option<ArgmaxOffender>, f64)> {
            let mut worst: Option<ArgmaxOffender> = None;
            let mut dist: f64 = 0.0;
            for &i in &paths {
                let (t, x, m, u_bar, ..) = s.point(i, k);
                if coeffs.sigma(t, x, m, u_lo) != coeffs.sigma(t, x, m, u_hi) {
                    return Err(Error::invalid(
                        "sigma depends on the control; use check_variational_inequality",
                    ));
                }
                let mut best = (f64::NEG_INFINITY, u_lo);
                for &u in control_grid {
                    let h = s.h(i, k, u)?;
                    if h > best.0 {
                        best = (h, u);
                    }
                }
                let shortfall = best.0 - s.h(i, k, u_bar)?;
                dist = dist.max((best.1 - u_bar).abs());
                if worst.as_ref().is_none_or(|w| shortfall > w.shortfall) {
                    worst = Some(ArgmaxOffender {
                        path: i,
                        node: k,
                        u_bar,
                        grid_argmax: best.1,
                        shortfall,
                    });
                }
            }
            Ok((worst, dist))
        })
        .collect::<Result<_>>()?;
    let mut worst: Option<ArgmaxOffender> = None;
    let mut dist: f64 = 0.0;
    for (w, d) in rows {
        dist = dist.max(d);
        if let Some(w) = w {
            if worst.as_ref().is_none_or(|cur| w.shortfall > cur.shortfall) {
                worst = Some(w);
            }
        }
    }
    let passed = worst
        .as_ref()
        .is_none_or(|w| w.shortfall <= ARGMAX_TOLERANCE);
    Ok(ArgmaxReport {
        passed,
        samples: paths.len() * nodes.len(),
        worst,
        max_argmax_distance: dist,
        tolerance: ARGMAX_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lq_coefficients;

    #[test]
    fn hamiltonian_special_cases() {
        let c = lq_coefficients(&LqParams {
            a: 1.0,
            b: 2.0,
            sigma: 3.0,
            ..LqParams::PAPER
        });
        let h = rs_hamiltonian(&c, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.5).unwrap();
        assert_eq!(h, 7.0);
        assert_eq!(hamiltonian(&c, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0).unwrap(), -0.5);
        let h0 = rs_hamiltonian(&c, 0.2, -1.5, 0.3, 0.7, 0.9, -0.4, 2.0, 0.0).unwrap();
        assert_eq!(h0, hamiltonian(&c, 0.2, -1.5, 0.3, 0.7, 0.9, -0.4).unwrap());
        let c0 = lq_coefficients(&LqParams {
            sigma: 0.0,
            ..LqParams::PAPER
        });
        let a = rs_hamiltonian(&c0, 0.0, 1.0, 0.0, 1.0, 1.0, 5.0, 9.0, 0.5).unwrap();
        let b = rs_hamiltonian(&c0, 0.0, 1.0, 0.0, 1.0, 1.0, -3.0, 0.1, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_cost_has_no_risk_premium() {
        let params = LqParams {
            a: 0.3,
            sigma: 0.0,
            ..LqParams::PAPER
        };
        let c = lq_coefficients(&params);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let law = ControlLaw::constant(0.4);
        let base = estimate_cost(&c, &law, &params.with_theta(0.0), grid, 8, 1).unwrap();
        assert_eq!(base.var_psi_t, 0.0);
        for theta in [-2.0, 0.5, 3.0] {
            let e = estimate_cost(&c, &law, &params.with_theta(theta), grid, 8, 1).unwrap();
            assert!((e.psi_theta - base.mean_psi_t).abs() < 1e-12);
            assert_eq!(e.var_psi_t, 0.0);
        }
        let r = expansion_check(&c, &law, &params, grid, 8, 1, &[0.1, 0.05]).unwrap();
        assert!(r.rows.iter().all(|row| row.gap < 1e-12));
    }

    #[test]
    fn estimate_invariants() {
        let psi = [1.0, 2.0, 4.0, 0.5];
        let e = cost_from_samples(0.3, &psi).unwrap();
        assert!((e.j_theta - e.log_domain_value.exp()).abs() < 1e-15);
        assert!((e.psi_theta - e.log_domain_value / 0.3).abs() < 1e-15);
        assert!(e.std_error > 0.0);
        let direct = psi.iter().map(|p| (0.3 * p).exp()).sum::<f64>() / 4.0;
        assert!((e.j_theta - direct).abs() < 1e-13);
        assert!(cost_from_samples(0.1, &[]).is_err());
    }

    #[test]
    fn control_range_includes_end() {
        let g = control_range(-5.0, 5.0, 0.1).unwrap();
        assert_eq!(g.len(), 101);
        assert!((g[100] - 5.0).abs() < 1e-12);
        assert!(control_range(1.0, 0.0, 0.1).is_err());
        assert!(control_range(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn zero_theta_rejected_by_expansion() {
        let p = LqParams::PAPER;
        let c = lq_coefficients(&p);
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let r = expansion_check(&c, &ControlLaw::constant(0.0), &p, grid, 4, 0, &[0.1, 0.0]);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
