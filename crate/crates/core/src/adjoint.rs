//! First and second order adjoint processes of the LQ model along simulated
//! optimal paths, and discrete residuals of the general adjoint equations.
//!
//! The first-order adjoint solves
//! `dp = -{H_x + E[v H_y] / v} dt + q (-theta ell dt + dB)`, `p(T) = -h_x - E[phi h_y] / phi`,
//! with `H = b p + sigma (q + theta ell p) - f`. For the LQ model the gain
//! ansatz gives `p = -beta x`, `q = -sigma beta` when `mu = 0`, and
//! `p = -beta x - mu alpha / L`, `q = mu theta gamma x alpha / L - sigma beta`
//! otherwise. The second-order adjoint reduces to the deterministic ODE
//! `P' = 2a P - theta q^2`, `P(T) = -1`, with `Q = 0`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{ScalarPath, TimeGrid};
use crate::model::{Coefficients, LqParams};
use crate::numerics::{fixed_order_sum, log_sum_exp, rk4_backward, REDUCTION_CHUNK};
use crate::riccati::{RiccatiSolution, RiccatiTable};
use crate::sim::{chunked_mean, ControlLaw, Ensemble, MartingalePanel};

/// Gain and mean-field factor looked up on a simulation grid.
///
/// Queries at grid nodes return the tabulated value (bit-identical to the
/// closed form); other times fall back to the closed form.
#[derive(Debug, Clone)]
pub struct GainTable {
    ricc: RiccatiSolution,
    table: RiccatiTable,
}

impl GainTable {
    pub fn new(ricc: &RiccatiSolution, grid: &TimeGrid) -> Result<Self> {
        Ok(Self {
            ricc: ricc.clone(),
            table: ricc.tabulate(grid)?,
        })
    }

    pub fn table(&self) -> &RiccatiTable {
        &self.table
    }

    fn node_of(&self, t: f64) -> Option<usize> {
        let k = self.table.grid.nearest_index(t);
        (self.table.grid.node(k) == t).then_some(k)
    }

    fn lookup(&self, t: f64, values: &[f64]) -> Option<Result<f64>> {
        let k = self.node_of(t)?;
        Some(if k >= self.table.first_valid {
            Ok(values[k])
        } else {
            Err(Error::BlowUp {
                t,
                tau_star: self.ricc.blow_up_time(),
            })
        })
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        self.lookup(t, &self.table.beta)
            .unwrap_or_else(|| self.ricc.beta(t))
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.lookup(t, &self.table.alpha)
            .unwrap_or_else(|| self.ricc.alpha(t))
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        self.lookup(t, &self.table.gamma)
            .unwrap_or_else(|| self.ricc.gamma(t))
    }
}

/// Optimal LQ control `u = b p`: the feedback `-b beta x` when `mu = 0`,
/// otherwise [`lq_mean_field_control`].
pub fn lq_optimal_control(ricc: &RiccatiSolution, grid: &TimeGrid) -> Result<ControlLaw> {
    if ricc.params().mu != 0.0 {
        return lq_mean_field_control(ricc, grid);
    }
    let gains = GainTable::new(ricc, grid)?;
    let b = ricc.params().b;
    Ok(ControlLaw::feedback(move |t, x, _m| {
        Ok(-(b * (gains.beta(t)? * x)))
    }))
}

/// `u = -b (beta x + mu alpha / L)`, which reads the path's own `L`.
pub fn lq_mean_field_control(ricc: &RiccatiSolution, grid: &TimeGrid) -> Result<ControlLaw> {
    let gains = GainTable::new(ricc, grid)?;
    let gamma_gains = gains.clone();
    let LqParams { b, mu, theta, .. } = *ricc.params();
    Ok(ControlLaw::tilted(
        move |t, x, _m, l| Ok(-(b * (gains.beta(t)? * x + mu * gains.alpha(t)? / l))),
        move |t| gamma_gains.gamma(t),
        theta,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    FirstOrder,
    SecondOrder,
    TerminalFirstOrder,
    TerminalMeanField,
    QuadraticBsde,
}

/// Size of a discrete defect.
///
/// For the step equations, `mean_abs_residual`/`max_abs_residual` are taken
/// over paths of `|sum_k R_k|`, the defect accumulated over `[0, T]`, which is
/// first order in `dt` for a consistent ansatz. The per-step `|R_k|` statistics
/// are reported alongside. For terminal checks both describe the per-path
/// terminal residual.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub which_equation: ResidualKind,
    pub mean_abs_residual: f64,
    pub max_abs_residual: f64,
    pub step_mean_abs: f64,
    pub step_max_abs: f64,
    /// `|Y(T) - h|` statistics for the quadratic BSDE.
    pub terminal_mean_abs: Option<f64>,
    pub terminal_max_abs: Option<f64>,
    pub dt: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct AdjointPanel {
    pub grid: TimeGrid,
    pub p: Vec<ScalarPath>,
    /// Per path: deterministic `-sigma beta` when `mu = 0`, path dependent otherwise.
    pub q: Vec<ScalarPath>,
    pub ell: Vec<ScalarPath>,
    pub p_bar: ScalarPath,
    pub q_bar: ScalarPath,
    pub terminal: ResidualReport,
}

fn check_inputs(grid: &TimeGrid, ensemble: &Ensemble, panel: &MartingalePanel) -> Result<()> {
    if ensemble.grid != *grid {
        return Err(Error::invalid("ensemble and Riccati grids differ"));
    }
    if panel.l_theta.len() != ensemble.n_paths() {
        return Err(Error::invalid(
            "martingale panel and ensemble path counts differ",
        ));
    }
    if let Some(l) = panel.l_theta.first() {
        if l.grid() != grid {
            return Err(Error::invalid("martingale panel and ensemble grids differ"));
        }
    }
    Ok(())
}

/// LQ adjoint along `ensemble`; dispatches on `mu`.
pub fn build_lq_adjoint(
    params: &LqParams,
    ricc: &RiccatiSolution,
    ensemble: &Ensemble,
    panel: &MartingalePanel,
) -> Result<AdjointPanel> {
    let table = ricc.tabulate(&ensemble.grid)?;
    let (p_bar, q_bar) = solve_second_order(params, ricc, &ensemble.grid)?;
    adjoint_from_table(
        params,
        &table,
        p_bar,
        q_bar,
        ensemble,
        panel,
        params.mu != 0.0,
    )
}

/// LQ adjoint built with the mean-field formulas for every `mu`, including 0.
pub fn build_mean_field_adjoint(
    params: &LqParams,
    ricc: &RiccatiSolution,
    ensemble: &Ensemble,
    panel: &MartingalePanel,
) -> Result<AdjointPanel> {
    let table = ricc.tabulate(&ensemble.grid)?;
    let (p_bar, q_bar) = solve_second_order(params, ricc, &ensemble.grid)?;
    adjoint_from_table(params, &table, p_bar, q_bar, ensemble, panel, true)
}

/// Assembles the LQ adjoint from tabulated gains. Exposed so callers can
/// substitute a modified gain table.
pub fn adjoint_from_table(
    params: &LqParams,
    table: &RiccatiTable,
    p_bar: ScalarPath,
    q_bar: ScalarPath,
    ensemble: &Ensemble,
    panel: &MartingalePanel,
    mean_field: bool,
) -> Result<AdjointPanel> {
    let grid = table.grid;
    check_inputs(&grid, ensemble, panel)?;
    if !table.is_complete() {
        let k = table.first_valid - 1;
        return Err(Error::BlowUp {
            t: grid.node(k),
            tau_star: None,
        });
    }
    let LqParams {
        sigma, theta, mu, ..
    } = *params;
    let n = grid.len();
    let mut p = Vec::with_capacity(ensemble.n_paths());
    let mut q = Vec::with_capacity(ensemble.n_paths());
    let mut ell = Vec::with_capacity(ensemble.n_paths());
    for (i, x) in ensemble.states.iter().enumerate() {
        let stop = x.blow_up();
        let l = &panel.l_theta[i];
        let mut pi = vec![f64::NAN; n];
        let mut qi = vec![f64::NAN; n];
        let mut ei = vec![f64::NAN; n];
        for k in 0..stop.unwrap_or(n) {
            let (beta, gamma, xk) = (table.beta[k], table.gamma[k], x.value(k));
            ei[k] = gamma * xk;
            if mean_field {
                let lk = l.value(k);
                let alpha = table.alpha[k];
                pi[k] = -(beta * xk) - mu * alpha / lk;
                qi[k] = mu * theta * gamma * xk * alpha / lk - sigma * beta;
            } else {
                pi[k] = -(beta * xk);
                qi[k] = -(sigma * beta);
            }
        }
        p.push(ScalarPath::from_raw(grid, pi, stop));
        q.push(ScalarPath::from_raw(grid, qi, stop));
        ell.push(ScalarPath::from_raw(grid, ei, stop));
    }
    let terminal = terminal_residual(&lq_like(params), &p, ensemble, panel)?;
    Ok(AdjointPanel {
        grid,
        p,
        q,
        ell,
        p_bar,
        q_bar,
        terminal,
    })
}

fn lq_like(params: &LqParams) -> crate::model::LqCoefficients {
    crate::model::lq_coefficients(params)
}

/// Per-path `|p(T) + h_x + E[phi h_y] / phi|` over completed paths.
pub fn terminal_residual(
    coeffs: &dyn Coefficients,
    p: &[ScalarPath],
    ensemble: &Ensemble,
    panel: &MartingalePanel,
) -> Result<ResidualReport> {
    let grid = ensemble.grid;
    let n = grid.n_steps();
    let m_end = ensemble.empirical_mean.value(n);
    let done: Vec<usize> = (0..ensemble.n_paths())
        .filter(|&i| panel.log_phi[i].is_finite() && ensemble.states[i].blow_up().is_none())
        .collect();
    if done.is_empty() {
        return Err(Error::invalid("no path reached the horizon"));
    }
    let log_phi: Vec<f64> = done.iter().map(|&i| panel.log_phi[i]).collect();
    let lse = log_sum_exp(&log_phi);
    let weighted_hy = fixed_order_sum(done.iter().map(|&i| {
        let x = ensemble.states[i].value(n);
        (panel.log_phi[i] - lse).exp() * coeffs.h_y(x, m_end)
    }));
    let mut mean_field = false;
    let residuals: Vec<f64> = done
        .iter()
        .map(|&i| {
            let x = ensemble.states[i].value(n);
            let hy = coeffs.h_y(x, m_end);
            mean_field |= hy != 0.0;
            let correction = if weighted_hy == 0.0 {
                0.0
            } else {
                (lse - panel.log_phi[i] - (done.len() as f64).ln()).exp() * weighted_hy
            };
            (p[i].value(n) + coeffs.h_x(x, m_end) + correction).abs()
        })
        .collect();
    let mean = fixed_order_sum(residuals.iter().copied()) / residuals.len() as f64;
    let max = residuals.iter().copied().fold(0.0, f64::max);
    Ok(ResidualReport {
        which_equation: if mean_field {
            ResidualKind::TerminalMeanField
        } else {
            ResidualKind::TerminalFirstOrder
        },
        mean_abs_residual: mean,
        max_abs_residual: max,
        step_mean_abs: mean,
        step_max_abs: max,
        terminal_mean_abs: None,
        terminal_max_abs: None,
        dt: grid.dt(),
        n_steps: n,
        n_paths: done.len(),
        seed: ensemble.noise.seed,
    })
}

/// RK4 solution of `P' = 2a P - theta sigma^2 beta^2`, `P(T) = -1`, and `Q = 0`.
pub fn solve_second_order(
    params: &LqParams,
    ricc: &RiccatiSolution,
    grid: &TimeGrid,
) -> Result<(ScalarPath, ScalarPath)> {
    let LqParams {
        a, sigma, theta, ..
    } = *params;
    let nodes: Vec<f64> = grid.nodes().collect();
    let rhs = |t: f64, p: f64| -> Result<f64> {
        let q = -sigma * ricc.beta(t)?;
        Ok(2.0 * a * p - theta * q * q)
    };
    match rk4_backward(&rhs, -1.0, &nodes) {
        Ok(values) => Ok((
            ScalarPath::new(*grid, values)?,
            ScalarPath::constant(*grid, 0.0),
        )),
        Err((k, _)) => Err(Error::BlowUp {
            t: nodes[k + 1],
            tau_star: ricc.blow_up_time(),
        }),
    }
}

/// Accumulated Euler defect of the reduced second-order ODE along `p_bar`.
pub fn second_order_residual(
    params: &LqParams,
    ricc: &RiccatiSolution,
    p_bar: &ScalarPath,
) -> Result<ResidualReport> {
    let grid = *p_bar.grid();
    let dt = grid.dt();
    let LqParams {
        a, sigma, theta, ..
    } = *params;
    let mut total = 0.0;
    let mut step_sum = 0.0;
    let mut step_max: f64 = 0.0;
    for k in 0..grid.n_steps() {
        let q = -sigma * ricc.beta(grid.node(k))?;
        let pk = p_bar.value(k);
        let r = p_bar.value(k + 1) - pk - (2.0 * a * pk - theta * q * q) * dt;
        total += r;
        step_sum += r.abs();
        step_max = step_max.max(r.abs());
    }
    Ok(ResidualReport {
        which_equation: ResidualKind::SecondOrder,
        mean_abs_residual: total.abs(),
        max_abs_residual: total.abs(),
        step_mean_abs: step_sum / grid.n_steps() as f64,
        step_max_abs: step_max,
        terminal_mean_abs: Some((p_bar.last() + 1.0).abs()),
        terminal_max_abs: Some((p_bar.last() + 1.0).abs()),
        dt,
        n_steps: grid.n_steps(),
        n_paths: 1,
        seed: 0,
    })
}

struct PathDefect {
    accumulated: f64,
    step_sum: f64,
    step_max: f64,
    steps: usize,
    terminal: f64,
}

fn summarize(
    which: ResidualKind,
    defects: &[PathDefect],
    ensemble: &Ensemble,
    with_terminal: bool,
) -> ResidualReport {
    let n_paths = defects.len();
    let grid = ensemble.grid;
    let acc = fixed_order_sum(defects.iter().map(|d| d.accumulated.abs()));
    let steps: usize = defects.iter().map(|d| d.steps).sum();
    let step_sum = fixed_order_sum(defects.iter().map(|d| d.step_sum));
    let term = fixed_order_sum(defects.iter().map(|d| d.terminal));
    ResidualReport {
        which_equation: which,
        mean_abs_residual: acc / n_paths as f64,
        max_abs_residual: defects
            .iter()
            .map(|d| d.accumulated.abs())
            .fold(0.0, f64::max),
        step_mean_abs: step_sum / steps.max(1) as f64,
        step_max_abs: defects.iter().map(|d| d.step_max).fold(0.0, f64::max),
        terminal_mean_abs: with_terminal.then(|| term / n_paths as f64),
        terminal_max_abs: with_terminal
            .then(|| defects.iter().map(|d| d.terminal).fold(0.0, f64::max)),
        dt: grid.dt(),
        n_steps: grid.n_steps(),
        n_paths,
        seed: ensemble.noise.seed,
    }
}

fn completed_paths(ensemble: &Ensemble) -> Result<Vec<usize>> {
    let done: Vec<usize> = (0..ensemble.n_paths())
        .filter(|&i| {
            ensemble.states[i].blow_up().is_none() && ensemble.controls[i].blow_up().is_none()
        })
        .collect();
    if done.is_empty() {
        return Err(Error::invalid("no path reached the horizon"));
    }
    Ok(done)
}

/// Discrete defect of the first-order adjoint equation:
/// `R = dp + {H_x + E[v H_y] / v} dt + q (theta ell dt - dB)`, all terms at `t_k`.
pub fn first_order_residual(
    coeffs: &dyn Coefficients,
    adjoint: &AdjointPanel,
    ensemble: &Ensemble,
    panel: &MartingalePanel,
    theta: f64,
) -> Result<ResidualReport> {
    let grid = ensemble.grid;
    check_inputs(&grid, ensemble, panel)?;
    if adjoint.grid != grid || adjoint.p.len() != ensemble.n_paths() {
        return Err(Error::invalid("adjoint panel does not match the ensemble"));
    }
    let done = completed_paths(ensemble)?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let m = &ensemble.empirical_mean;

    let h_theta_y = |i: usize, k: usize| {
        let (t, x, u) = (
            grid.node(k),
            ensemble.states[i].value(k),
            ensemble.controls[i].value(k),
        );
        let (p, q, ell) = (
            adjoint.p[i].value(k),
            adjoint.q[i].value(k),
            adjoint.ell[i].value(k),
        );
        coeffs.b_y(t, x, m.value(k), u) * p
            + coeffs.sigma_y(t, x, m.value(k), u) * (q + theta * ell * p)
            - coeffs.f_y(t, x, m.value(k), u)
    };
    // E[v H_y] per node over the completed paths
    let mut column = vec![0.0; done.len()];
    let mut mean_vhy = vec![0.0; n];
    for (k, slot) in mean_vhy.iter_mut().enumerate() {
        for (c, &i) in column.iter_mut().zip(&done) {
            *c = panel.v_theta[i].value(k) * h_theta_y(i, k);
        }
        *slot = chunked_mean(&column).unwrap_or(0.0);
    }

    let defects: Vec<PathDefect> = done
        .par_iter()
        .with_min_len(REDUCTION_CHUNK)
        .map(|&i| {
            let mut increments = ensemble.noise.path(i, dt);
            let mut d = PathDefect {
                accumulated: 0.0,
                step_sum: 0.0,
                step_max: 0.0,
                steps: n,
                terminal: 0.0,
            };
            for k in 0..n {
                let t = grid.node(k);
                let (x, u, mk) = (
                    ensemble.states[i].value(k),
                    ensemble.controls[i].value(k),
                    m.value(k),
                );
                let (p, q, ell) = (
                    adjoint.p[i].value(k),
                    adjoint.q[i].value(k),
                    adjoint.ell[i].value(k),
                );
                let h_x = coeffs.b_x(t, x, mk, u) * p
                    + coeffs.sigma_x(t, x, mk, u) * (q + theta * ell * p)
                    - coeffs.f_x(t, x, mk, u);
                let v = panel.v_theta[i].value(k);
                let db = increments.next_increment();
                let r = adjoint.p[i].value(k + 1) - p
                    + (h_x + mean_vhy[k] / v) * dt
                    + q * (theta * ell * dt - db);
                d.accumulated += r;
                d.step_sum += r.abs();
                d.step_max = d.step_max.max(r.abs());
            }
            d
        })
        .collect();
    Ok(summarize(
        ResidualKind::FirstOrder,
        &defects,
        ensemble,
        false,
    ))
}

/// Checks the logarithmic transform `v = exp(theta Y + theta int_0^t f ds)`
/// against the quadratic BSDE `dY = -{f + theta ell^2 / 2} dt + ell dB`, `Y(T) = h`.
///
/// `Y` is rebuilt from `v` with a trapezoidal running cost along each path's
/// recorded controls; the report carries the step defect and `|Y(T) - h|`.
pub fn quadratic_bsde_check(
    ensemble: &Ensemble,
    panel: &MartingalePanel,
    coeffs: &dyn Coefficients,
    theta: f64,
) -> Result<ResidualReport> {
    if theta == 0.0 {
        return Err(Error::invalid(
            "the logarithmic transform needs theta != 0; use the risk-neutral checks",
        ));
    }
    let grid = ensemble.grid;
    check_inputs(&grid, ensemble, panel)?;
    let done = completed_paths(ensemble)?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let m = &ensemble.empirical_mean;
    let defects: Vec<PathDefect> = done
        .par_iter()
        .with_min_len(REDUCTION_CHUNK)
        .map(|&i| {
            let (x, u) = (&ensemble.states[i], &ensemble.controls[i]);
            let f = |k: usize| coeffs.f(grid.node(k), x.value(k), m.value(k), u.value(k));
            let mut increments = ensemble.noise.path(i, dt);
            let mut d = PathDefect {
                accumulated: 0.0,
                step_sum: 0.0,
                step_max: 0.0,
                steps: n,
                terminal: 0.0,
            };
            let mut running = 0.0;
            let mut f_k = f(0);
            let mut y = panel.v_theta[i].value(0).ln() / theta;
            for k in 0..n {
                let f_next = f(k + 1);
                running += 0.5 * (f_k + f_next) * dt;
                let y_next = panel.v_theta[i].value(k + 1).ln() / theta - running;
                let ell = panel.ell[i].value(k);
                let db = increments.next_increment();
                let r = y_next - y + (f_k + 0.5 * theta * ell * ell) * dt - ell * db;
                d.accumulated += r;
                d.step_sum += r.abs();
                d.step_max = d.step_max.max(r.abs());
                y = y_next;
                f_k = f_next;
            }
            d.terminal = (y - coeffs.h(x.value(n), m.value(n))).abs();
            d
        })
        .collect();
    Ok(summarize(
        ResidualKind::QuadraticBsde,
        &defects,
        ensemble,
        true,
    ))
}

/// Ensemble averages standing in for the square-integrability bounds of the
/// adjoint processes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegrabilityReport {
    pub mean_sup_p2: f64,
    pub mean_sup_v2: f64,
    pub mean_int_q2: f64,
    pub mean_int_ell2: f64,
    pub sup_p_bar2: f64,
    pub int_q_bar2: f64,
}

impl IntegrabilityReport {
    pub fn is_finite(&self) -> bool {
        [
            self.mean_sup_p2,
            self.mean_sup_v2,
            self.mean_int_q2,
            self.mean_int_ell2,
            self.sup_p_bar2,
            self.int_q_bar2,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn integrability_proxies(
    adjoint: &AdjointPanel,
    panel: &MartingalePanel,
) -> IntegrabilityReport {
    let dt = adjoint.grid.dt();
    let sup2 = |p: &ScalarPath| p.finite_values().iter().map(|v| v * v).fold(0.0, f64::max);
    // left-point rule, matching the Euler scheme
    let int2 = |p: &ScalarPath| {
        let vals = p.finite_values();
        let end = vals.len().min(adjoint.grid.n_steps());
        fixed_order_sum(vals[..end].iter().map(|v| v * v * dt))
    };
    let avg = |paths: &[ScalarPath], g: &dyn Fn(&ScalarPath) -> f64| {
        fixed_order_sum(paths.iter().map(g)) / paths.len().max(1) as f64
    };
    IntegrabilityReport {
        mean_sup_p2: avg(&adjoint.p, &sup2),
        mean_sup_v2: avg(&panel.v_theta, &sup2),
        mean_int_q2: avg(&adjoint.q, &int2),
        mean_int_ell2: avg(&adjoint.ell, &int2),
        sup_p_bar2: sup2(&adjoint.p_bar),
        int_q_bar2: int2(&adjoint.q_bar),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lq_coefficients;
    use crate::numerics::integrate;
    use crate::riccati::{FormulaVariant, GammaChoice};
    use crate::sim::{simulate_martingales, simulate_state};

    const DESK: LqParams = LqParams {
        a: 0.5,
        b: 1.0,
        sigma: 0.3,
        theta: 0.2,
        mu: 0.0,
        x0: 1.0,
        t_end: 1.0,
    };

    fn pipeline(
        params: LqParams,
        n_steps: usize,
        n_paths: usize,
    ) -> (RiccatiSolution, Ensemble, MartingalePanel) {
        let ricc = RiccatiSolution::new(params, GammaChoice::SigmaBeta, FormulaVariant::DerivedOde)
            .unwrap();
        let grid = TimeGrid::new(params.t_end, n_steps).unwrap();
        let control = lq_optimal_control(&ricc, &grid).unwrap();
        let coeffs = lq_coefficients(&params);
        let e = simulate_state(&coeffs, &control, params.x0, grid, n_paths, 11).unwrap();
        let panel = simulate_martingales(&coeffs, &e, &|t| ricc.gamma(t), params.theta).unwrap();
        (ricc, e, panel)
    }

    #[test]
    fn mean_field_free_closed_forms() {
        let (ricc, e, panel) = pipeline(DESK, 100, 20);
        let adj = build_lq_adjoint(&DESK, &ricc, &e, &panel).unwrap();
        for i in 0..20 {
            assert_eq!(adj.p[i].last(), -e.states[i].last());
            for k in [0, 37, 100] {
                let beta = ricc.beta(e.grid.node(k)).unwrap();
                assert_eq!(adj.q[i].value(k), -0.3 * beta);
            }
        }
        assert_eq!(adj.terminal.max_abs_residual, 0.0);
        assert_eq!(
            adj.terminal.which_equation,
            ResidualKind::TerminalFirstOrder
        );
        assert_eq!(adj.p_bar.last(), -1.0);
        assert!(adj.q_bar.values().iter().all(|&v| v == 0.0));
        assert!(integrability_proxies(&adj, &panel).is_finite());
    }

    #[test]
    fn second_order_limits() {
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let p0 = LqParams {
            a: 0.0,
            theta: 0.0,
            ..DESK
        };
        let ricc = RiccatiSolution::new(p0, GammaChoice::SigmaBeta, Default::default()).unwrap();
        let (pb, _) = solve_second_order(&p0, &ricc, &grid).unwrap();
        assert!(pb.values().iter().all(|&v| v == -1.0));

        let p1 = LqParams { theta: 0.0, ..DESK };
        let ricc = RiccatiSolution::new(p1, GammaChoice::SigmaBeta, Default::default()).unwrap();
        let (pb, _) = solve_second_order(&p1, &ricc, &grid).unwrap();
        for (k, t) in grid.nodes().enumerate() {
            assert!((pb.value(k) + (2.0 * 0.5 * (t - 1.0)).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn second_order_matches_quadrature() {
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let ricc = RiccatiSolution::new(DESK, GammaChoice::SigmaBeta, Default::default()).unwrap();
        let (pb, _) = solve_second_order(&DESK, &ricc, &grid).unwrap();
        let a = DESK.a;
        for k in [0, 250, 999] {
            let t = grid.node(k);
            let integral = integrate(
                |s| Ok((2.0 * a * (t - s)).exp() * ricc.beta(s)?.powi(2)),
                t,
                1.0,
                1e-13,
                1e-15,
            )
            .unwrap();
            let exact = -(2.0 * a * (t - 1.0)).exp() + DESK.theta * DESK.sigma.powi(2) * integral;
            assert!((pb.value(k) - exact).abs() < 1e-8, "k={k}");
        }
        let r = second_order_residual(&DESK, &ricc, &pb).unwrap();
        assert!(r.mean_abs_residual < 1e-3);
    }

    #[test]
    fn mean_field_terminal_identity() {
        let params = DESK.with_mu(2.0);
        let (ricc, e, panel) = pipeline(params, 100, 50);
        let adj = build_lq_adjoint(&params, &ricc, &e, &panel).unwrap();
        for i in 0..50 {
            let l = panel.l_theta[i].last();
            let lhs = l * adj.p[i].last() + l * e.states[i].last() + 2.0;
            assert!(lhs.abs() < 1e-10);
        }
        assert_eq!(adj.terminal.which_equation, ResidualKind::TerminalMeanField);
    }

    #[test]
    fn quadratic_bsde_rejects_zero_theta() {
        let (_, e, panel) = pipeline(DESK, 10, 4);
        let c = lq_coefficients(&DESK);
        assert!(matches!(
            quadratic_bsde_check(&e, &panel, &c, 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn grid_mismatch_rejected() {
        let (ricc, e, panel) = pipeline(DESK, 10, 4);
        let other = TimeGrid::new(1.0, 20).unwrap();
        let table = ricc.tabulate(&other).unwrap();
        let (pb, qb) = solve_second_order(&DESK, &ricc, &other).unwrap();
        let err = adjoint_from_table(&DESK, &table, pb, qb, &e, &panel, false).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
