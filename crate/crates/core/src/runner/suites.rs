//! The six suites. Each returns pass/fail plus a JSON detail record; numerical
//! errors fail the suite, I/O errors abort the run.

use std::io;

use serde_json::{json, Value};

use super::config::{ExperimentConfig, Suite};
use super::output::{fmt_float, render_svg, OutDir, Series, Table};
use crate::adjoint::{
    build_lq_adjoint, first_order_residual, integrability_proxies, lq_optimal_control,
    quadratic_bsde_check, second_order_residual, solve_second_order, AdjointPanel, GainTable,
};
use crate::cost::{
    argmax_check, check_variational_inequality, control_range, estimate_cost, expansion_check,
    CostEstimate,
};
use crate::grid::{Noise, TimeGrid};
use crate::model::{lq_coefficients, LqCoefficients, LqParams};
use crate::riccati::{ode_oracle, FormulaVariant, GammaChoice, RiccatiSolution, RiccatiTable};
use crate::sim::{
    empirical_mean_function, simulate_martingales, simulate_state_with_noise, simulate_summary,
    Ensemble, MartingalePanel, PathSummary,
};
use crate::Error;

/// Paths kept in memory for the adjoint and maximum-principle suites.
pub const STORED_PATH_CAP: usize = 2000;
/// Paths used by the time-step halving check.
pub const REFINEMENT_PATHS: usize = 256;
pub const SAMPLE_PATHS: usize = 10;
const PATHS_MAX_ROWS: usize = 10_001;
const SMP_MAX_NODES: usize = 101;
const ORACLE_TOL: f64 = 1e-8;
const TERMINAL_TOL: f64 = 1e-10;
const PERTURBATIONS: [f64; 4] = [-0.5, -0.1, 0.1, 0.5];
const REPRO_EXACT_DT: f64 = 1e-6;
const REPRO_BOUND: f64 = 10.0;
const REPRO_TAU_TOL: f64 = 1e-3;

pub(super) struct Outcome {
    pub passed: bool,
    pub details: Value,
}

pub(super) enum Failure {
    Io(io::Error),
    Numeric(Error),
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Numeric(e)
    }
}

type SuiteResult = std::result::Result<Outcome, Failure>;

struct Base {
    params: LqParams,
    coeffs: LqCoefficients,
    grid: TimeGrid,
    ricc: RiccatiSolution,
    gains: GainTable,
}

struct Stored {
    ensemble: Ensemble,
    panel: MartingalePanel,
    adjoint: AdjointPanel,
}

/// State shared by the suites of one run, built on first use.
pub(super) struct Ctx {
    cfg: ExperimentConfig,
    paper_exact: bool,
    base: Option<Base>,
    stored: Option<Stored>,
}

impl Ctx {
    pub fn new(cfg: &ExperimentConfig, paper_exact: bool) -> Self {
        Self {
            cfg: cfg.clone(),
            paper_exact,
            base: None,
            stored: None,
        }
    }

    fn base(&mut self) -> crate::Result<&Base> {
        if self.base.is_none() {
            let params = self.cfg.model;
            params.validate()?;
            let grid = TimeGrid::new(params.t_end, self.cfg.n_steps)?;
            let ricc = RiccatiSolution::new(params, self.cfg.gamma_choice, self.cfg.variant)?;
            let gains = GainTable::new(&ricc, &grid)?;
            self.base = Some(Base {
                params,
                coeffs: lq_coefficients(&params),
                grid,
                ricc,
                gains,
            });
        }
        Ok(self.base.as_ref().expect("just built"))
    }

    fn stored(&mut self) -> crate::Result<&Stored> {
        if self.stored.is_none() {
            let n_paths = self.cfg.n_paths.min(STORED_PATH_CAP);
            let seed = self.cfg.seed;
            let b = self.base()?;
            let stored = build_stored(b, n_paths, Noise::new(seed))?;
            self.stored = Some(stored);
        }
        Ok(self.stored.as_ref().expect("just built"))
    }
}

fn build_stored(b: &Base, n_paths: usize, noise: Noise) -> crate::Result<Stored> {
    let control = lq_optimal_control(&b.ricc, &b.grid)?;
    let ensemble =
        simulate_state_with_noise(&b.coeffs, &control, b.params.x0, b.grid, n_paths, noise)?;
    let gains = &b.gains;
    let panel = simulate_martingales(&b.coeffs, &ensemble, &|t| gains.gamma(t), b.params.theta)?;
    let adjoint = build_lq_adjoint(&b.params, &b.ricc, &ensemble, &panel)?;
    Ok(Stored {
        ensemble,
        panel,
        adjoint,
    })
}

pub(super) fn run_suite(suite: Suite, ctx: &mut Ctx, out: &mut OutDir) -> io::Result<Outcome> {
    let result = match suite {
        Suite::Riccati => riccati(ctx, out),
        Suite::Simulate => simulate(ctx, out),
        Suite::Adjoint => adjoint(ctx),
        Suite::Cost => cost(ctx, out),
        Suite::Smp => smp(ctx, out),
        Suite::PaperRepro => paper_repro(ctx, out),
    };
    match result {
        Ok(o) => Ok(o),
        Err(Failure::Io(e)) => Err(e),
        Err(Failure::Numeric(e)) => Ok(Outcome {
            passed: false,
            details: json!({ "error": e.to_string(), "blow_up": e.is_blow_up() }),
        }),
    }
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn beta_series(table: &RiccatiTable, p_bar: Option<&[f64]>, mu: f64) -> Vec<Series> {
    let xs: Vec<f64> = table.grid.nodes().collect();
    let marker =
        (table.first_valid > 0 && table.first_valid < xs.len()).then_some(table.first_valid);
    let mut series = vec![
        Series {
            name: "beta".into(),
            xs: xs.clone(),
            ys: table.beta.clone(),
            marker,
        },
        Series {
            name: "gamma".into(),
            xs: xs.clone(),
            ys: table.gamma.clone(),
            marker,
        },
    ];
    if mu != 0.0 {
        series.push(Series {
            name: "alpha".into(),
            xs: xs.clone(),
            ys: table.alpha.clone(),
            marker,
        });
    }
    if let Some(p) = p_bar {
        series.push(Series {
            name: "P_bar".into(),
            xs,
            ys: p.to_vec(),
            marker: None,
        });
    }
    series
}

fn riccati(ctx: &mut Ctx, out: &mut OutDir) -> SuiteResult {
    let plots = ctx.cfg.plots;
    let b = ctx.base()?;
    let table = b.gains.table();
    let grid = b.grid;
    let tau_star = b.ricc.blow_up_time();
    let mut details = json!({
        "gamma_choice": b.ricc.gamma_choice(),
        "variant": b.ricc.variant(),
        "tau_star": tau_star,
        "first_valid_node": table.first_valid,
    });

    let mut p_bar = None;
    let mut passed = table.is_complete();
    if table.is_complete() {
        let oracle = ode_oracle(&b.ricc.ode_rhs(), 1.0, &grid)?;
        let scale = table.beta.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let beta_err = max_abs_diff(&table.beta, oracle.values());
        passed &= beta_err <= ORACLE_TOL * scale;
        details["beta_oracle_max_abs_error"] = json!(beta_err);
        details["beta_oracle_tolerance"] = json!(ORACLE_TOL * scale);

        let LqParams { a, b: bb, mu, .. } = b.params;
        if mu != 0.0 {
            let ricc = &b.ricc;
            let rhs = |t: f64, y: f64| -(a - bb * bb * ricc.beta(t).unwrap_or(f64::NAN)) * y;
            let alpha_oracle = ode_oracle(&rhs, 1.0, &grid)?;
            let scale = table.alpha.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            let alpha_err = max_abs_diff(&table.alpha, alpha_oracle.values());
            passed &= alpha_err <= ORACLE_TOL * scale;
            details["alpha_oracle_max_abs_error"] = json!(alpha_err);
        }

        let (p, _q) = solve_second_order(&b.params, &b.ricc, &grid)?;
        let res = second_order_residual(&b.params, &b.ricc, &p)?;
        passed &= p.values().iter().all(|v| v.is_finite());
        details["second_order_accumulated_defect"] = json!(res.max_abs_residual);
        p_bar = Some(p.into_values());
    } else {
        details["note"] = json!("gain blows up inside the horizon; table truncated");
    }

    let mut csv = Table::new(&["t", "beta", "alpha", "gamma", "P_bar"]);
    for (k, t) in grid.nodes().enumerate() {
        let pb = p_bar.as_ref().map_or(f64::NAN, |p| p[k]);
        csv.push_floats(&[t, table.beta[k], table.alpha[k], table.gamma[k], pb]);
    }
    out.write_table("beta.csv", &csv)?;
    if plots {
        let series = beta_series(table, p_bar.as_deref(), b.params.mu);
        let svg = render_svg("Riccati gain", "t", "value", &series)?;
        out.write("beta.svg", svg.as_bytes())?;
    }
    Ok(Outcome { passed, details })
}

fn write_paths(out: &mut OutDir, name: &str, summary: &PathSummary) -> io::Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend(["mean", "q05", "q50", "q95"].map(String::from));
    header.extend((0..SAMPLE_PATHS).map(|i| format!("path_{i}")));
    let mut csv = Table {
        header,
        rows: Vec::new(),
    };
    for (j, &k) in summary.nodes.iter().enumerate() {
        let mut row = vec![
            summary.grid.node(k),
            summary.mean[j],
            summary.q05[j],
            summary.q50[j],
            summary.q95[j],
        ];
        row.extend((0..SAMPLE_PATHS).map(|i| summary.samples.get(i).map_or(f64::NAN, |s| s[j])));
        csv.push(row.into_iter().map(fmt_float).collect());
    }
    out.write_table(name, &csv)
}

fn paths_plot(title: &str, summary: &PathSummary) -> crate::Result<String> {
    let ts: Vec<f64> = summary
        .nodes
        .iter()
        .map(|&k| summary.grid.node(k))
        .collect();
    let last_finite = |ys: &[f64]| -> Option<usize> {
        let end = ys.iter().position(|v| !v.is_finite())?;
        Some(end.saturating_sub(1))
    };
    let mut series = vec![
        Series {
            name: "mean".into(),
            xs: ts.clone(),
            ys: summary.mean.clone(),
            marker: None,
        },
        Series {
            name: "q05".into(),
            xs: ts.clone(),
            ys: summary.q05.clone(),
            marker: None,
        },
        Series {
            name: "q95".into(),
            xs: ts.clone(),
            ys: summary.q95.clone(),
            marker: None,
        },
    ];
    for (i, s) in summary.samples.iter().enumerate() {
        series.push(Series {
            name: format!("path_{i}"),
            xs: ts.clone(),
            ys: s.clone(),
            marker: last_finite(s),
        });
    }
    if summary.blow_up.is_some() && summary.exhausted_at.is_some() {
        // nothing finite may remain past the first node; mark the mean's end
        series[0].marker = Some(summary.mean.len().saturating_sub(1));
    }
    render_svg(title, "t", "x", &series)
}

fn simulate(ctx: &mut Ctx, out: &mut OutDir) -> SuiteResult {
    let (n_paths, seed, plots) = (ctx.cfg.n_paths, ctx.cfg.seed, ctx.cfg.plots);
    let b = ctx.base()?;
    let control = lq_optimal_control(&b.ricc, &b.grid)?;
    let rows = (b.grid.n_steps() + 1).min(PATHS_MAX_ROWS);
    let summary = simulate_summary(
        &b.coeffs,
        &control,
        b.params.x0,
        b.grid,
        n_paths,
        Noise::new(seed),
        rows,
        SAMPLE_PATHS,
    )?;
    write_paths(out, "paths.csv", &summary)?;
    if plots {
        out.write(
            "state_paths.svg",
            paths_plot("State paths", &summary)?.as_bytes(),
        )?;
    }
    let summary_finite = summary.blow_up.is_none() && summary.exhausted_at.is_none();
    let mut details = json!({
        "n_paths": n_paths,
        "max_abs_state": summary.max_abs,
        "summary_finite": summary_finite,
    });
    if !summary_finite {
        details["blow_up_step"] = json!(summary.blow_up.as_ref().map(|r| r.step));
        return Ok(Outcome {
            passed: false,
            details,
        });
    }

    let LqParams {
        a, b: bb, mu, x0, ..
    } = b.params;
    let beta = b.gains.table().beta.clone();
    let grid = b.grid;
    let s = ctx.stored()?;
    let ens = &s.ensemble;
    let m = ens.n_paths() as f64;
    let mut passed = ens.is_finite();

    let recomputed = empirical_mean_function(ens);
    let bit_exact = recomputed
        .values()
        .iter()
        .zip(ens.empirical_mean.values())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    passed &= bit_exact;
    details["stored_paths"] = json!(ens.n_paths());
    details["mean_recompute_bit_exact"] = json!(bit_exact);

    let probes = [grid.n_steps() / 4, grid.n_steps() / 2, grid.n_steps()];
    let stats = |col: &dyn Fn(usize) -> f64| {
        let xs: Vec<f64> = (0..ens.n_paths()).map(col).collect();
        let mean = xs.iter().sum::<f64>() / m;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0).max(1.0);
        (mean, (var / m).sqrt())
    };
    let mut l_checks = Vec::new();
    for &k in &probes {
        let (mean, se) = stats(&|i| s.panel.l_theta[i].value(k));
        let ok = (mean - 1.0).abs() <= 3.0 * se + 1e-12;
        passed &= ok;
        l_checks.push(json!({ "t": grid.node(k), "mean_l": mean, "se": se, "ok": ok }));
    }
    details["martingale_l"] = Value::Array(l_checks);

    if mu == 0.0 {
        // exact mean of the Euler scheme under the linear feedback
        let mut m_exact = vec![x0; grid.len()];
        for k in 0..grid.n_steps() {
            m_exact[k + 1] = m_exact[k] * (1.0 + (a - bb * bb * beta[k]) * grid.dt());
        }
        let mut m_checks = Vec::new();
        for &k in &probes {
            let (mean, se) = stats(&|i| ens.states[i].value(k));
            let ok = (mean - m_exact[k]).abs() <= 4.0 * se + 1e-12 * m_exact[k].abs();
            passed &= ok;
            m_checks.push(json!({ "t": grid.node(k), "mean": mean, "expected": m_exact[k], "se": se, "ok": ok }));
        }
        details["mean_ode"] = Value::Array(m_checks);
    }
    Ok(Outcome { passed, details })
}

/// Accumulated first-order defect at `dt` and `dt / 2` on common noise.
fn refinement_ratio(b: &Base, n_paths: usize, seed: u64) -> crate::Result<(f64, f64)> {
    let residual = |grid: TimeGrid, noise: Noise| -> crate::Result<f64> {
        let ricc = &b.ricc;
        let gains = GainTable::new(ricc, &grid)?;
        let control = lq_optimal_control(ricc, &grid)?;
        let ens =
            simulate_state_with_noise(&b.coeffs, &control, b.params.x0, grid, n_paths, noise)?;
        let panel = simulate_martingales(&b.coeffs, &ens, &|t| gains.gamma(t), b.params.theta)?;
        let adj = build_lq_adjoint(&b.params, ricc, &ens, &panel)?;
        Ok(first_order_residual(&b.coeffs, &adj, &ens, &panel, b.params.theta)?.mean_abs_residual)
    };
    let coarse = residual(b.grid, Noise::with_substeps(seed, 2)?)?;
    let fine = residual(b.grid.refined(2)?, Noise::new(seed))?;
    Ok((coarse, fine))
}

fn adjoint(ctx: &mut Ctx) -> SuiteResult {
    let (n_paths, seed) = (ctx.cfg.n_paths, ctx.cfg.seed);
    let theta = ctx.cfg.model.theta;
    ctx.stored()?;
    let b = ctx.base.as_ref().expect("built with stored");
    let s = ctx.stored.as_ref().expect("built above");
    let (ens, panel, adj) = (&s.ensemble, &s.panel, &s.adjoint);

    let mut passed = ens.is_finite();
    let terminal_ok = adj.terminal.max_abs_residual <= TERMINAL_TOL;
    passed &= terminal_ok;
    let first = first_order_residual(&b.coeffs, adj, ens, panel, theta)?;
    let proxies = integrability_proxies(adj, panel);
    passed &= proxies.is_finite() && first.mean_abs_residual.is_finite();
    let mut details = json!({
        "terminal": adj.terminal,
        "terminal_ok": terminal_ok,
        "first_order": first,
        "integrability": proxies,
    });
    if theta != 0.0 {
        let bsde = quadratic_bsde_check(ens, panel, &b.coeffs, theta)?;
        passed &= bsde.mean_abs_residual.is_finite();
        details["quadratic_bsde"] = json!(bsde);
    }

    let (coarse, fine) = refinement_ratio(b, n_paths.min(REFINEMENT_PATHS), seed)?;
    let ratio = coarse / fine;
    // a defect already at rounding level has nothing left to halve
    let ratio_ok = (1.5..=2.5).contains(&ratio) || coarse <= 1e-13;
    passed &= ratio_ok;
    details["refinement"] = json!({
        "coarse_mean_abs": coarse,
        "fine_mean_abs": fine,
        "ratio": finite_or_null(ratio),
        "ok": ratio_ok,
    });
    Ok(Outcome { passed, details })
}

fn cost_row(c: &CostEstimate) -> [f64; 5] {
    [c.theta, c.psi_theta, c.mean_psi_t, c.var_psi_t, c.std_error]
}

fn cost(ctx: &mut Ctx, out: &mut OutDir) -> SuiteResult {
    let (n_paths, seed) = (ctx.cfg.n_paths, ctx.cfg.seed);
    let thetas = ctx.cfg.cost_thetas.clone();
    let b = ctx.base()?;
    let control = lq_optimal_control(&b.ricc, &b.grid)?;
    let base = estimate_cost(&b.coeffs, &control, &b.params, b.grid, n_paths, seed)?;
    let mut passed = base.psi_theta.is_finite() && base.std_error.is_finite();

    let mut checks = Vec::new();
    for eps in PERTURBATIONS {
        let pert = control.clone().perturbed(eps);
        let c = estimate_cost(&b.coeffs, &pert, &b.params, b.grid, n_paths, seed)?;
        let slack = 3.0 * base.std_error.hypot(c.std_error);
        let ok = base.psi_theta <= c.psi_theta + slack;
        passed &= ok;
        checks.push(
            json!({ "epsilon": eps, "psi_theta": c.psi_theta, "std_error": c.std_error, "ok": ok }),
        );
    }
    let expansion = expansion_check(
        &b.coeffs, &control, &b.params, b.grid, n_paths, seed, &thetas,
    )?;

    let mut csv = Table::new(&["theta", "psi_theta", "mean_psi_T", "var_psi_T", "std_error"]);
    csv.push_floats(&cost_row(&base));
    for r in &expansion.rows {
        csv.push_floats(&[r.theta, r.psi_theta, r.mean_psi_t, r.var_psi_t, r.std_error]);
    }
    out.write_table("cost.csv", &csv)?;

    let details = json!({
        "estimate": base,
        "perturbations": checks,
        "expansion": expansion,
    });
    Ok(Outcome { passed, details })
}

fn smp(ctx: &mut Ctx, out: &mut OutDir) -> SuiteResult {
    let spec = ctx.cfg.control_grid;
    let tol = ctx.cfg.vi_tolerance;
    let theta = ctx.cfg.model.theta;
    let us = control_range(spec.start, spec.stop, spec.step)?;
    ctx.stored()?;
    let b = ctx.base.as_ref().expect("built with stored");
    let s = ctx.stored.as_ref().expect("built above");
    let vi = check_variational_inequality(
        &b.coeffs,
        &s.adjoint,
        &s.ensemble,
        &s.panel,
        theta,
        &us,
        tol,
    )?;
    let am = argmax_check(&b.coeffs, &s.adjoint, &s.ensemble, &s.panel, theta, &us)?;
    let passed = vi.max_violation <= tol && am.passed;

    let stride = vi.time_nodes.len().div_ceil(SMP_MAX_NODES).max(1);
    let mut csv = Table::new(&["node", "t", "u", "lhs_max"]);
    let last = vi.time_nodes.len() - 1;
    for (j, &k) in vi.time_nodes.iter().enumerate() {
        if j % stride != 0 && j != last {
            continue;
        }
        for (c, &u) in us.iter().enumerate() {
            csv.push(vec![
                k.to_string(),
                fmt_float(b.grid.node(k)),
                fmt_float(u),
                fmt_float(vi.lhs_max[j][c]),
            ]);
        }
    }
    out.write_table("smp.csv", &csv)?;
    let details = json!({
        "max_violation": vi.max_violation,
        "violating_fraction": vi.violating_fraction,
        "tolerance": tol,
        "n_paths_checked": vi.n_paths_checked,
        "argmax": am,
    });
    Ok(Outcome { passed, details })
}

fn repro_grid(t_end: f64, dt: f64) -> crate::Result<TimeGrid> {
    let n = (t_end / dt).round();
    if !(1.0..1e9).contains(&n) {
        return Err(Error::invalid(format!(
            "repro step {dt} does not fit horizon {t_end}"
        )));
    }
    TimeGrid::new(t_end, n as usize)
}

fn strided_nodes(n_nodes: usize, max_rows: usize, keep: Option<usize>) -> Vec<usize> {
    let stride = n_nodes.div_ceil(max_rows.saturating_sub(1).max(1)).max(1);
    let mut idx: Vec<usize> = (0..n_nodes).step_by(stride).collect();
    if idx.last() != Some(&(n_nodes - 1)) {
        idx.push(n_nodes - 1);
    }
    if let Some(k) = keep.filter(|&k| k < n_nodes) {
        if let Err(pos) = idx.binary_search(&k) {
            idx.insert(pos, k);
        }
    }
    idx
}

fn repro_cost_row(
    csv: &mut Table,
    label: &str,
    t_end: f64,
    r: crate::Result<CostEstimate>,
) -> crate::Result<Value> {
    let (vals, blow_up_step, note) = match r {
        Ok(c) => (cost_row(&c), None, json!(c)),
        Err(Error::CostBlowUp {
            step,
            completed,
            n_paths,
            ..
        }) => {
            let mut v = [f64::NAN; 5];
            v[0] = LqParams::PAPER.theta;
            (
                v,
                Some(step),
                json!({ "blow_up_step": step, "completed": completed, "n_paths": n_paths }),
            )
        }
        Err(e) => return Err(e),
    };
    let mut row = vec![label.to_string(), fmt_float(t_end)];
    row.extend(vals.iter().map(|&v| fmt_float(v)));
    row.push(blow_up_step.map_or(String::new(), |k| k.to_string()));
    csv.push(row);
    Ok(note)
}

fn paper_repro(ctx: &mut Ctx, out: &mut OutDir) -> SuiteResult {
    let cfg = &ctx.cfg;
    let dt = if ctx.paper_exact {
        REPRO_EXACT_DT
    } else {
        cfg.repro_dt
    };
    let (n_paths, seed, plots) = (cfg.repro_paths, cfg.seed, cfg.plots);
    let params = LqParams::PAPER;
    let coeffs = lq_coefficients(&params);
    let mut cost_csv = Table::new(&[
        "run",
        "t_end",
        "theta",
        "psi_theta",
        "mean_psi_T",
        "var_psi_T",
        "std_error",
        "blow_up_step",
    ]);

    // small window: the local solution exists
    let p1 = params.with_t_end(1.0);
    let grid1 = repro_grid(1.0, dt)?;
    let ricc1 = RiccatiSolution::new(p1, GammaChoice::SigmaBeta, FormulaVariant::DerivedOde)?;
    let control1 = lq_optimal_control(&ricc1, &grid1)?;
    let s1 = simulate_summary(
        &coeffs,
        &control1,
        p1.x0,
        grid1,
        n_paths,
        Noise::new(seed),
        PATHS_MAX_ROWS,
        SAMPLE_PATHS,
    )?;
    write_paths(out, "paper_repro/short_paths.csv", &s1)?;
    let table1 = ricc1.tabulate(&grid1)?;
    write_repro_beta(out, "paper_repro/short_beta.csv", &table1)?;
    let c1 = repro_cost_row(
        &mut cost_csv,
        "short",
        1.0,
        estimate_cost(&coeffs, &control1, &p1, grid1, n_paths, seed),
    )?;
    let short_ok = s1.blow_up.is_none() && s1.exhausted_at.is_none() && s1.max_abs < REPRO_BOUND;

    // long horizon under the printed formula: the gain explodes
    let t2 = cfg.repro_t_end;
    let p2 = params.with_t_end(t2);
    let grid2 = repro_grid(t2, dt)?;
    let ricc2 = RiccatiSolution::new(p2, GammaChoice::One, FormulaVariant::PaperPrinted)?;
    let tau = ricc2.blow_up_time();
    let table2 = ricc2.tabulate(&grid2)?;
    write_repro_beta(out, "paper_repro/long_beta.csv", &table2)?;
    let control2 = lq_optimal_control(&ricc2, &grid2)?;
    let s2 = simulate_summary(
        &coeffs,
        &control2,
        p2.x0,
        grid2,
        n_paths,
        Noise::new(seed),
        PATHS_MAX_ROWS,
        SAMPLE_PATHS,
    )?;
    write_paths(out, "paper_repro/long_paths.csv", &s2)?;
    let c2 = repro_cost_row(
        &mut cost_csv,
        "long",
        t2,
        estimate_cost(&coeffs, &control2, &p2, grid2, n_paths, seed),
    )?;
    out.write_table("paper_repro/cost.csv", &cost_csv)?;
    let tau_ok = tau.is_some_and(|t| (t - 1.0).abs() <= REPRO_TAU_TOL);
    let state_flagged = s2.blow_up.is_some() || s2.exhausted_at.is_some();
    let long_ok = tau_ok && table2.first_valid > 0 && state_flagged;

    if plots {
        out.write(
            "paper_repro/short_state_paths.svg",
            paths_plot("Local solution, T = 1", &s1)?.as_bytes(),
        )?;
        let series1 = beta_series(&table1, None, 0.0);
        out.write(
            "paper_repro/short_beta.svg",
            render_svg("Gain, T = 1", "t", "value", &series1)?.as_bytes(),
        )?;
        out.write(
            "paper_repro/long_beta.svg",
            explosion_plot(&table2)?.as_bytes(),
        )?;
        out.write(
            "paper_repro/long_state_paths.svg",
            paths_plot("State paths, T = 5", &s2)?.as_bytes(),
        )?;
    }

    let details = json!({
        "dt": dt,
        "n_paths": n_paths,
        "short": {
            "finite": s1.blow_up.is_none() && s1.exhausted_at.is_none(),
            "max_abs_state": s1.max_abs,
            "bound": REPRO_BOUND,
            "cost": c1,
            "ok": short_ok,
        },
        "long": {
            "t_end": t2,
            "tau_star": tau,
            "tau_star_ok": tau_ok,
            "blow_up_time": tau.map(|t| t2 - t),
            "first_valid_node": table2.first_valid,
            "state_blow_up_step": s2.blow_up.as_ref().map(|r| r.step),
            "cost": c2,
            "ok": long_ok,
        },
    });
    Ok(Outcome {
        passed: short_ok && long_ok,
        details,
    })
}

fn write_repro_beta(out: &mut OutDir, name: &str, table: &RiccatiTable) -> io::Result<()> {
    let grid = table.grid;
    let keep = (table.first_valid < grid.len()).then_some(table.first_valid);
    let mut csv = Table::new(&["t", "time_to_go", "beta", "gamma"]);
    for k in strided_nodes(grid.len(), PATHS_MAX_ROWS, keep) {
        let t = grid.node(k);
        csv.push_floats(&[t, grid.t_end() - t, table.beta[k], table.gamma[k]]);
    }
    out.write_table(name, &csv)
}

/// Gain against time to go, cut at the last defined node.
fn explosion_plot(table: &RiccatiTable) -> crate::Result<String> {
    let grid = table.grid;
    let keep = (table.first_valid < grid.len()).then_some(table.first_valid);
    let idx: Vec<usize> = strided_nodes(grid.len(), PATHS_MAX_ROWS, keep)
        .into_iter()
        .rev()
        .collect();
    let xs: Vec<f64> = idx.iter().map(|&k| grid.t_end() - grid.node(k)).collect();
    let ys: Vec<f64> = idx.iter().map(|&k| table.beta[k]).collect();
    let marker = keep
        .filter(|&k| k > 0)
        .and_then(|k| idx.iter().position(|&j| j == k));
    let series = [Series {
        name: "beta".into(),
        xs,
        ys,
        marker,
    }];
    render_svg("Gain explosion", "T - t", "beta", &series)
}
