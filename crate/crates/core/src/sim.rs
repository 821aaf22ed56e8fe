//! Particle simulation of the controlled mean-field SDE
//! `dx = b(t, x, E[x], u) dt + sigma(t, x, E[x], u) dB` and of the
//! exponential martingales built along it.
//!
//! All particles read the ensemble mean of step `k` while taking step `k`.
//! Particles are processed in fixed chunks of [`REDUCTION_CHUNK`]; each chunk
//! sums its own states sequentially and the chunk totals are combined in chunk
//! order, so the mean (and everything downstream) is bit-identical for any
//! number of worker threads.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{IncrementStream, Noise, ScalarPath, TimeGrid};
use crate::model::Coefficients;
use crate::numerics::{log_sum_exp, REDUCTION_CHUNK};

/// A state is flagged as blown up once `|x|` exceeds this value.
pub const BLOW_UP_THRESHOLD: f64 = 1e10;

pub type FeedbackFn = dyn Fn(f64, f64, f64) -> Result<f64> + Send + Sync;
pub type OpenLoopFn = dyn Fn(f64) -> Result<f64> + Send + Sync;
pub type TiltedFn = dyn Fn(f64, f64, f64, f64) -> Result<f64> + Send + Sync;
pub type GammaFn = dyn Fn(f64) -> Result<f64> + Send + Sync;

/// Control that also reads the path's own exponential martingale `L`.
///
/// The simulator co-evolves `log L` with `ell = gamma(t) x` using the same
/// log-Euler step as [`simulate_martingales`].
#[derive(Clone)]
pub struct Tilt {
    pub law: Arc<TiltedFn>,
    pub gamma: Arc<GammaFn>,
    pub theta: f64,
}

#[derive(Clone)]
pub enum ControlLaw {
    /// `u(t, x, m)` with `m` the ensemble mean.
    Feedback(Arc<FeedbackFn>),
    /// `u(t)`.
    OpenLoop(Arc<OpenLoopFn>),
    /// `base + offset`.
    Perturbed(Box<ControlLaw>, f64),
    /// `u(t, x, m, L)`.
    Tilted(Tilt),
}

impl fmt::Debug for ControlLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlLaw::Feedback(_) => f.write_str("Feedback"),
            ControlLaw::OpenLoop(_) => f.write_str("OpenLoop"),
            ControlLaw::Perturbed(base, off) => write!(f, "Perturbed({base:?}, {off})"),
            ControlLaw::Tilted(t) => write!(f, "Tilted(theta={})", t.theta),
        }
    }
}

impl ControlLaw {
    pub fn feedback(f: impl Fn(f64, f64, f64) -> Result<f64> + Send + Sync + 'static) -> Self {
        ControlLaw::Feedback(Arc::new(f))
    }

    pub fn open_loop(f: impl Fn(f64) -> Result<f64> + Send + Sync + 'static) -> Self {
        ControlLaw::OpenLoop(Arc::new(f))
    }

    pub fn constant(u: f64) -> Self {
        Self::open_loop(move |_| Ok(u))
    }

    pub fn tilted(
        law: impl Fn(f64, f64, f64, f64) -> Result<f64> + Send + Sync + 'static,
        gamma: impl Fn(f64) -> Result<f64> + Send + Sync + 'static,
        theta: f64,
    ) -> Self {
        ControlLaw::Tilted(Tilt {
            law: Arc::new(law),
            gamma: Arc::new(gamma),
            theta,
        })
    }

    pub fn perturbed(self, offset: f64) -> Self {
        ControlLaw::Perturbed(Box::new(self), offset)
    }

    /// Control value at `(t, x, m)` for a path whose martingale is `l`.
    pub fn eval(&self, t: f64, x: f64, m: f64, l: f64) -> Result<f64> {
        match self {
            ControlLaw::Feedback(f) => f(t, x, m),
            ControlLaw::OpenLoop(f) => f(t),
            ControlLaw::Perturbed(base, off) => Ok(base.eval(t, x, m, l)? + off),
            ControlLaw::Tilted(tilt) => (tilt.law)(t, x, m, l),
        }
    }

    pub fn tilt(&self) -> Option<&Tilt> {
        match self {
            ControlLaw::Tilted(t) => Some(t),
            ControlLaw::Perturbed(base, _) => base.tilt(),
            _ => None,
        }
    }
}

/// One log-Euler step of `dL = theta ell L dB`.
#[inline]
pub(crate) fn log_l_step(log_l: f64, theta: f64, ell: f64, db: f64, dt: f64) -> f64 {
    let te = theta * ell;
    log_l + te * db - 0.5 * te * te * dt
}

/// First node where some path stopped being defined, and every such path.
#[derive(Debug, Clone, PartialEq)]
pub struct BlowUpRecord {
    pub step: usize,
    pub paths: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub grid: TimeGrid,
    pub noise: Noise,
    pub x0: f64,
    pub states: Vec<ScalarPath>,
    pub controls: Vec<ScalarPath>,
    pub empirical_mean: ScalarPath,
    pub blow_up: Option<BlowUpRecord>,
}

impl Ensemble {
    pub fn n_paths(&self) -> usize {
        self.states.len()
    }

    pub fn is_finite(&self) -> bool {
        self.blow_up.is_none()
    }

    /// Brownian increment of `(path, step)` used by the simulation.
    pub fn increment(&self, path: usize, step: usize) -> f64 {
        self.noise.increment(path, step, self.grid.dt())
    }
}

struct Particle {
    x: f64,
    log_l: f64,
    alive: bool,
    cost: f64,
    f_prev: f64,
    increments: IncrementStream,
    states: Vec<f64>,
    controls: Vec<f64>,
    state_blow_up: Option<usize>,
    control_blow_up: Option<usize>,
}

impl Particle {
    fn kill(&mut self, control_node: usize, n_steps: usize) {
        self.alive = false;
        self.control_blow_up = Some(control_node);
        self.state_blow_up = (control_node < n_steps).then_some(control_node + 1);
    }
}

struct EngineSpec<'a> {
    coeffs: &'a dyn Coefficients,
    control: &'a ControlLaw,
    x0: f64,
    grid: TimeGrid,
    n_paths: usize,
    noise: Noise,
    record: bool,
}

struct EngineRun {
    particles: Vec<Particle>,
    means: Vec<f64>,
    exhausted_at: Option<usize>,
}

fn eval_error(function: &str, t: f64, x: f64, y: f64, u: f64) -> Error {
    Error::Evaluation {
        function: function.to_string(),
        t,
        x,
        y,
        u,
    }
}

/// Processes node `k` for one chunk: evaluates the control and running cost
/// at `t_k` and, unless `k` is the last node, steps to `t_{k+1}`. Returns the
/// sum and count of the surviving states.
#[allow(clippy::too_many_arguments)]
fn advance_chunk(
    spec: &EngineSpec<'_>,
    chunk: &mut [Particle],
    k: usize,
    m: f64,
    gamma_k: Option<Result<f64, ()>>,
    theta: f64,
) -> Result<(f64, usize)> {
    let grid = &spec.grid;
    let n = grid.n_steps();
    let t = grid.node(k);
    let dt = grid.dt();
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in chunk.iter_mut() {
        if !p.alive {
            continue;
        }
        if spec.record {
            p.states.push(p.x);
        }
        let u = match gamma_k {
            Some(Err(())) => Err(Error::BlowUp { t, tau_star: None }),
            _ => spec.control.eval(t, p.x, m, p.log_l.exp()),
        };
        let u = match u {
            Ok(u) => u,
            Err(e) if e.is_blow_up() => {
                p.kill(k, n);
                continue;
            }
            Err(e) => return Err(e),
        };
        if !u.is_finite() {
            return Err(eval_error("control", t, p.x, m, u));
        }
        if spec.record {
            p.controls.push(u);
        }
        let f = spec.coeffs.f(t, p.x, m, u);
        if !f.is_finite() {
            return Err(eval_error("f", t, p.x, m, u));
        }
        if k > 0 {
            p.cost += 0.5 * (p.f_prev + f) * dt;
        }
        p.f_prev = f;
        if k == n {
            continue;
        }
        let drift = spec.coeffs.b(t, p.x, m, u);
        let diffusion = spec.coeffs.sigma(t, p.x, m, u);
        if !drift.is_finite() {
            return Err(eval_error("b", t, p.x, m, u));
        }
        if !diffusion.is_finite() {
            return Err(eval_error("sigma", t, p.x, m, u));
        }
        let db = p.increments.next_increment();
        if let Some(Ok(gamma)) = gamma_k {
            let ell = gamma * p.x;
            let next = log_l_step(p.log_l, theta, ell, db, dt);
            if !next.is_finite() {
                return Err(eval_error("theta*ell", t, p.x, m, u));
            }
            p.log_l = next;
        }
        let x_next = p.x + drift * dt + diffusion * db;
        if x_next.abs() <= BLOW_UP_THRESHOLD {
            p.x = x_next;
            sum += x_next;
            count += 1;
        } else {
            p.alive = false;
            p.state_blow_up = Some(k + 1);
            p.control_blow_up = Some(k + 1);
        }
    }
    Ok((sum, count))
}

/// Runs the particle scheme; `observer(k, m_k, particles)` sees every node
/// before it is processed.
fn run_engine(
    spec: &EngineSpec<'_>,
    observer: &mut dyn FnMut(usize, f64, &[Particle]),
) -> Result<EngineRun> {
    if spec.n_paths == 0 {
        return Err(Error::invalid("n_paths must be at least 1"));
    }
    if !spec.x0.is_finite() {
        return Err(Error::invalid("x0 must be finite"));
    }
    let grid = spec.grid;
    let n = grid.n_steps();
    let dt = grid.dt();
    let cap = if spec.record { grid.len() } else { 0 };
    let mut particles: Vec<Particle> = (0..spec.n_paths)
        .map(|i| Particle {
            x: spec.x0,
            log_l: 0.0,
            alive: true,
            cost: 0.0,
            f_prev: 0.0,
            increments: spec.noise.path(i, dt),
            states: Vec::with_capacity(cap),
            controls: Vec::with_capacity(cap),
            state_blow_up: None,
            control_blow_up: None,
        })
        .collect();

    let mut means = vec![f64::NAN; grid.len()];
    means[0] = chunked_mean(&vec![spec.x0; spec.n_paths]).expect("non-empty");
    let tilt = spec.control.tilt();
    let theta = tilt.map_or(0.0, |t| t.theta);
    let mut exhausted_at = None;

    for k in 0..=n {
        let t = grid.node(k);
        let m = means[k];
        let gamma_k = match tilt {
            None => None,
            Some(tilt) => match (tilt.gamma)(t) {
                Ok(g) => Some(Ok(g)),
                Err(e) if e.is_blow_up() => Some(Err(())),
                Err(e) => return Err(e),
            },
        };
        observer(k, m, &particles);
        let partials: Vec<Result<(f64, usize)>> = if particles.len() <= REDUCTION_CHUNK {
            vec![advance_chunk(spec, &mut particles, k, m, gamma_k, theta)]
        } else {
            particles
                .par_chunks_mut(REDUCTION_CHUNK)
                .map(|c| advance_chunk(spec, c, k, m, gamma_k, theta))
                .collect()
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for part in partials {
            let (s, c) = part?;
            sum += s;
            count += c;
        }
        if k < n {
            if count == 0 {
                exhausted_at = Some(k + 1);
                break;
            }
            means[k + 1] = sum / count as f64;
        }
    }

    if spec.record {
        for p in &mut particles {
            p.states.resize(grid.len(), f64::NAN);
            p.controls.resize(grid.len(), f64::NAN);
        }
    }
    Ok(EngineRun {
        particles,
        means,
        exhausted_at,
    })
}

/// Mean of the finite entries, summed in fixed chunks. `None` when no entry is finite.
pub(crate) fn chunked_mean(values: &[f64]) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in values.chunks(REDUCTION_CHUNK) {
        let mut s = 0.0;
        for &v in chunk {
            if v.is_finite() {
                s += v;
                count += 1;
            }
        }
        total += s;
    }
    (count > 0).then(|| total / count as f64)
}

fn blow_up_record(particles: &[Particle]) -> Option<BlowUpRecord> {
    let paths: Vec<usize> = particles
        .iter()
        .enumerate()
        .filter(|(_, p)| p.control_blow_up.is_some())
        .map(|(i, _)| i)
        .collect();
    let step = particles.iter().filter_map(|p| p.control_blow_up).min()?;
    Some(BlowUpRecord { step, paths })
}

/// Euler-Maruyama particle simulation with fresh noise from `seed`.
pub fn simulate_state(
    coeffs: &dyn Coefficients,
    control: &ControlLaw,
    x0: f64,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Ensemble> {
    simulate_state_with_noise(coeffs, control, x0, grid, n_paths, Noise::new(seed))
}

/// As [`simulate_state`] with explicit noise, e.g. a coarsened stream shared
/// with a finer grid.
pub fn simulate_state_with_noise(
    coeffs: &dyn Coefficients,
    control: &ControlLaw,
    x0: f64,
    grid: TimeGrid,
    n_paths: usize,
    noise: Noise,
) -> Result<Ensemble> {
    let spec = EngineSpec {
        coeffs,
        control,
        x0,
        grid,
        n_paths,
        noise,
        record: true,
    };
    let run = run_engine(&spec, &mut |_, _, _| {})?;
    let blow_up = blow_up_record(&run.particles);
    let mut states = Vec::with_capacity(n_paths);
    let mut controls = Vec::with_capacity(n_paths);
    for p in run.particles {
        states.push(ScalarPath::from_raw(grid, p.states, p.state_blow_up));
        controls.push(ScalarPath::from_raw(grid, p.controls, p.control_blow_up));
    }
    let ensemble = Ensemble {
        grid,
        noise,
        x0,
        states,
        controls,
        empirical_mean: ScalarPath::from_raw(grid, run.means, run.exhausted_at),
        blow_up,
    };
    match run.exhausted_at {
        Some(step) => Err(Error::EnsembleBlowUp {
            step,
            n_paths,
            ensemble: Box::new(ensemble),
        }),
        None => Ok(ensemble),
    }
}

/// `m(t_k)`, recomputed from the stored paths with the simulator's reduction.
pub fn empirical_mean_function(ensemble: &Ensemble) -> ScalarPath {
    let grid = ensemble.grid;
    let mut column = vec![0.0; ensemble.n_paths()];
    let mut values = vec![f64::NAN; grid.len()];
    let mut stop = None;
    for (k, slot) in values.iter_mut().enumerate() {
        for (c, path) in column.iter_mut().zip(&ensemble.states) {
            *c = path.value(k);
        }
        match chunked_mean(&column) {
            Some(m) => *slot = m,
            None => {
                stop = Some(k);
                break;
            }
        }
    }
    ScalarPath::from_raw(grid, values, stop)
}

/// Realized cost `int f dt + h(x(T), m(T))` per path (trapezoidal rule);
/// `NaN` for paths that did not reach `T`.
pub fn path_costs(coeffs: &dyn Coefficients, ensemble: &Ensemble) -> Vec<f64> {
    let grid = ensemble.grid;
    let dt = grid.dt();
    let n = grid.n_steps();
    let m_end = ensemble.empirical_mean.value(n);
    ensemble
        .states
        .iter()
        .zip(&ensemble.controls)
        .map(|(x, u)| {
            if x.blow_up().is_some() || u.blow_up().is_some() {
                return f64::NAN;
            }
            let mut cost = 0.0;
            let mut f_prev = 0.0;
            for k in 0..=n {
                let f = coeffs.f(
                    grid.node(k),
                    x.value(k),
                    ensemble.empirical_mean.value(k),
                    u.value(k),
                );
                if k > 0 {
                    cost += 0.5 * (f_prev + f) * dt;
                }
                f_prev = f;
            }
            cost + coeffs.h(x.value(n), m_end)
        })
        .collect()
}

/// Per-path martingales along an ensemble.
#[derive(Debug, Clone)]
pub struct MartingalePanel {
    pub theta: f64,
    /// `v(t) = v0 * L(t)`.
    pub v_theta: Vec<ScalarPath>,
    /// `L(t)`, with `L(0) = 1`.
    pub l_theta: Vec<ScalarPath>,
    /// `ell(t) = gamma(t) x(t)`.
    pub ell: Vec<ScalarPath>,
    /// `log v0 = log mean exp(theta Psi_T)` over the completed paths.
    pub log_v0: f64,
    /// `theta Psi_T` per path (`NaN` for paths that did not complete).
    pub log_phi: Vec<f64>,
}

impl MartingalePanel {
    pub fn v0(&self) -> f64 {
        self.log_v0.exp()
    }
}

/// Builds `ell`, `L` and `v` along `ensemble`.
///
/// `L` follows the exact log-Euler step `L_{k+1} = L_k exp(theta ell dB - theta^2 ell^2 dt / 2)`
/// with the ensemble's own increments; `v = v0 L` with `v0` the log-sum-exp
/// estimate of `E[exp(theta Psi_T)]`.
pub fn simulate_martingales(
    coeffs: &dyn Coefficients,
    ensemble: &Ensemble,
    gamma: &dyn Fn(f64) -> Result<f64>,
    theta: f64,
) -> Result<MartingalePanel> {
    if !theta.is_finite() {
        return Err(Error::invalid("theta must be finite"));
    }
    let grid = ensemble.grid;
    let dt = grid.dt();
    let n = grid.n_steps();
    let gammas: Vec<f64> = grid.nodes().map(gamma).collect::<Result<_>>()?;

    let psi = path_costs(coeffs, ensemble);
    let log_phi: Vec<f64> = psi.iter().map(|p| theta * p).collect();
    let done: Vec<f64> = log_phi.iter().copied().filter(|v| v.is_finite()).collect();
    if done.is_empty() {
        return Err(Error::invalid("no path reached the horizon"));
    }
    let log_v0 = log_sum_exp(&done) - (done.len() as f64).ln();

    let per_path = |i: usize| -> Result<(ScalarPath, ScalarPath, ScalarPath)> {
        let x = &ensemble.states[i];
        let stop = x.blow_up();
        let end = stop.unwrap_or(grid.len());
        let mut ell = vec![f64::NAN; grid.len()];
        let mut l = vec![f64::NAN; grid.len()];
        let mut v = vec![f64::NAN; grid.len()];
        let mut increments = ensemble.noise.path(i, dt);
        let mut log_l: f64 = 0.0;
        for k in 0..end {
            let e = gammas[k] * x.value(k);
            if !(theta * e).is_finite() {
                return Err(eval_error(
                    "theta*ell",
                    grid.node(k),
                    x.value(k),
                    f64::NAN,
                    f64::NAN,
                ));
            }
            ell[k] = e;
            l[k] = log_l.exp();
            v[k] = (log_v0 + log_l).exp();
            if k < n {
                let db = increments.next_increment();
                log_l = log_l_step(log_l, theta, e, db, dt);
            }
        }
        Ok((
            ScalarPath::from_raw(grid, ell, stop),
            ScalarPath::from_raw(grid, l, stop),
            ScalarPath::from_raw(grid, v, stop),
        ))
    };
    let rows: Vec<_> = (0..ensemble.n_paths())
        .into_par_iter()
        .with_min_len(REDUCTION_CHUNK)
        .map(per_path)
        .collect::<Result<_>>()?;
    let mut ell = Vec::with_capacity(rows.len());
    let mut l_theta = Vec::with_capacity(rows.len());
    let mut v_theta = Vec::with_capacity(rows.len());
    for (e, l, v) in rows {
        ell.push(e);
        l_theta.push(l);
        v_theta.push(v);
    }
    Ok(MartingalePanel {
        theta,
        v_theta,
        l_theta,
        ell,
        log_v0,
        log_phi,
    })
}

/// Realized costs from a streaming run (no per-path storage).
#[derive(Debug, Clone)]
pub struct CostSamples {
    /// `Psi_T` per path, `NaN` where the path blew up.
    pub psi: Vec<f64>,
    pub blow_up: Option<BlowUpRecord>,
}

pub(crate) fn simulate_costs(
    coeffs: &dyn Coefficients,
    control: &ControlLaw,
    x0: f64,
    grid: TimeGrid,
    n_paths: usize,
    noise: Noise,
) -> Result<CostSamples> {
    let spec = EngineSpec {
        coeffs,
        control,
        x0,
        grid,
        n_paths,
        noise,
        record: false,
    };
    let run = run_engine(&spec, &mut |_, _, _| {})?;
    let n = grid.n_steps();
    let m_end = run.means[n];
    let psi = run
        .particles
        .iter()
        .map(|p| {
            if p.control_blow_up.is_some() || run.exhausted_at.is_some() {
                f64::NAN
            } else {
                p.cost + coeffs.h(p.x, m_end)
            }
        })
        .collect();
    Ok(CostSamples {
        psi,
        blow_up: blow_up_record(&run.particles),
    })
}

/// Ensemble statistics on a subset of nodes, computed without storing paths.
#[derive(Debug, Clone)]
pub struct PathSummary {
    pub grid: TimeGrid,
    /// Recorded node indices (increasing, always ending at the last reached node).
    pub nodes: Vec<usize>,
    pub mean: Vec<f64>,
    pub q05: Vec<f64>,
    pub q50: Vec<f64>,
    pub q95: Vec<f64>,
    /// The first few paths at the recorded nodes (`NaN` after blow-up).
    pub samples: Vec<Vec<f64>>,
    /// Largest `|x|` over all finite states at all nodes.
    pub max_abs: f64,
    pub blow_up: Option<BlowUpRecord>,
    /// Node at which every path had blown up, if that happened.
    pub exhausted_at: Option<usize>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Streaming run that records mean, 5/50/95% quantiles and `n_samples`
/// sample paths on at most `max_rows` evenly strided nodes.
///
/// Unlike [`simulate_state`], losing every path is not an error here: the
/// summary stops at that node and reports it.
#[allow(clippy::too_many_arguments)]
pub fn simulate_summary(
    coeffs: &dyn Coefficients,
    control: &ControlLaw,
    x0: f64,
    grid: TimeGrid,
    n_paths: usize,
    noise: Noise,
    max_rows: usize,
    n_samples: usize,
) -> Result<PathSummary> {
    let n = grid.n_steps();
    let stride = n.div_ceil(max_rows.saturating_sub(1).max(1)).max(1);
    let n_samples = n_samples.min(n_paths);
    let mut out = PathSummary {
        grid,
        nodes: Vec::new(),
        mean: Vec::new(),
        q05: Vec::new(),
        q50: Vec::new(),
        q95: Vec::new(),
        samples: vec![Vec::new(); n_samples],
        max_abs: 0.0,
        blow_up: None,
        exhausted_at: None,
    };
    let mut column = Vec::with_capacity(n_paths);
    let mut observer = |k: usize, m: f64, particles: &[Particle]| {
        for p in particles.iter().filter(|p| p.alive) {
            out.max_abs = out.max_abs.max(p.x.abs());
        }
        if !k.is_multiple_of(stride) && k != n {
            return;
        }
        column.clear();
        column.extend(particles.iter().filter(|p| p.alive).map(|p| p.x));
        column.sort_by(f64::total_cmp);
        out.nodes.push(k);
        out.mean.push(m);
        out.q05.push(quantile_sorted(&column, 0.05));
        out.q50.push(quantile_sorted(&column, 0.50));
        out.q95.push(quantile_sorted(&column, 0.95));
        for (s, p) in out.samples.iter_mut().zip(particles) {
            s.push(if p.alive { p.x } else { f64::NAN });
        }
    };
    let spec = EngineSpec {
        coeffs,
        control,
        x0,
        grid,
        n_paths,
        noise,
        record: false,
    };
    let run = run_engine(&spec, &mut observer)?;
    out.blow_up = blow_up_record(&run.particles);
    out.exhausted_at = run.exhausted_at;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{lq_coefficients, LqParams};

    struct Zero;

    impl Coefficients for Zero {
        fn b(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn sigma(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn f(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn h(&self, _: f64, _: f64) -> f64 {
            0.0
        }
        fn b_x(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn b_y(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn b_xx(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn sigma_x(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn sigma_y(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn sigma_xx(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn f_x(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn f_y(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn f_u(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn f_xx(&self, _: f64, _: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        fn h_x(&self, _: f64, _: f64) -> f64 {
            0.0
        }
        fn h_y(&self, _: f64, _: f64) -> f64 {
            0.0
        }
        fn h_xx(&self, _: f64, _: f64) -> f64 {
            0.0
        }
    }

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn zero_dynamics_stay_at_x0() {
        let e = simulate_state(&Zero, &ControlLaw::constant(0.3), 2.5, grid(20), 7, 1).unwrap();
        for path in &e.states {
            assert!(path.values().iter().all(|&v| v == 2.5));
        }
        assert!(e.empirical_mean.values().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn single_path_mean_is_the_path() {
        let c = lq_coefficients(&LqParams {
            a: 0.3,
            sigma: 0.5,
            ..LqParams::PAPER
        });
        let e = simulate_state(&c, &ControlLaw::constant(0.0), 1.0, grid(50), 1, 9).unwrap();
        assert_eq!(e.empirical_mean.values(), e.states[0].values());
    }

    #[test]
    fn perturbed_by_zero_is_identity() {
        let base = ControlLaw::feedback(|t, x, m| Ok(t - 2.0 * x + m));
        let p = base.clone().perturbed(0.0);
        for &(t, x, m) in &[(0.1, 2.0, -1.0), (0.9, -3.5, 0.25)] {
            assert_eq!(
                base.eval(t, x, m, 1.0).unwrap(),
                p.eval(t, x, m, 1.0).unwrap()
            );
        }
    }

    #[test]
    fn mean_recomputes_bit_exactly_across_chunks() {
        let c = lq_coefficients(&LqParams {
            a: 0.5,
            sigma: 0.3,
            ..LqParams::PAPER
        });
        let law = ControlLaw::feedback(|_, x, m| Ok(-x + 0.1 * m));
        let e = simulate_state(&c, &law, 1.0, grid(10), 2500, 3).unwrap();
        let m = empirical_mean_function(&e);
        for (a, b) in m.values().iter().zip(e.empirical_mean.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let c = lq_coefficients(&LqParams {
            a: 0.5,
            sigma: 0.3,
            ..LqParams::PAPER
        });
        let law = ControlLaw::feedback(|_, x, m| Ok(-x + 0.1 * m));
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_state(&c, &law, 1.0, grid(8), 3000, 5).unwrap())
        };
        let a = run(1);
        let b = run(3);
        for (pa, pb) in a.states.iter().zip(&b.states) {
            assert_eq!(pa.values(), pb.values());
        }
    }

    #[test]
    fn exploding_paths_are_truncated() {
        let c = lq_coefficients(&LqParams {
            a: 0.0,
            b: 1.0,
            sigma: 0.0,
            ..LqParams::PAPER
        });
        // u = 1e11 x: the first step jumps past the threshold
        let law = ControlLaw::feedback(|_, x, _| Ok(1e11 * x));
        let err = simulate_state(&c, &law, 1.0, grid(10), 3, 0).unwrap_err();
        match err {
            Error::EnsembleBlowUp {
                step,
                n_paths,
                ensemble,
            } => {
                assert_eq!((step, n_paths), (1, 3));
                assert_eq!(ensemble.states[0].blow_up(), Some(1));
                assert_eq!(ensemble.states[0].value(0), 1.0);
                assert!(ensemble.states[0].value(1).is_nan());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn undefined_gain_kills_at_the_control_node() {
        let c = lq_coefficients(&LqParams::PAPER);
        let law = ControlLaw::feedback(|t, x, _| {
            if t < 0.5 {
                Err(Error::BlowUp {
                    t,
                    tau_star: Some(0.5),
                })
            } else {
                Ok(-x)
            }
        });
        let err = simulate_state(&c, &law, 1.0, grid(10), 2, 0).unwrap_err();
        let Error::EnsembleBlowUp { ensemble, .. } = err else {
            panic!()
        };
        assert_eq!(ensemble.blow_up.as_ref().unwrap().step, 0);
        assert_eq!(ensemble.states[1].blow_up(), Some(1));
        assert_eq!(ensemble.controls[1].blow_up(), Some(0));
    }

    #[test]
    fn non_finite_control_is_an_evaluation_error() {
        let c = lq_coefficients(&LqParams::PAPER);
        let law = ControlLaw::constant(f64::NAN);
        let err = simulate_state(&c, &law, 1.0, grid(4), 2, 0).unwrap_err();
        assert!(matches!(err, Error::Evaluation { ref function, .. } if function == "control"));
    }

    #[test]
    fn theta_zero_gives_unit_martingale() {
        let p = LqParams {
            a: 0.5,
            sigma: 0.3,
            ..LqParams::PAPER
        };
        let c = lq_coefficients(&p);
        let e = simulate_state(
            &c,
            &ControlLaw::feedback(|_, x, _| Ok(-x)),
            1.0,
            grid(20),
            50,
            2,
        )
        .unwrap();
        let panel = simulate_martingales(&c, &e, &|_| Ok(0.7), 0.0).unwrap();
        for (l, v) in panel.l_theta.iter().zip(&panel.v_theta) {
            assert!(l.values().iter().all(|&x| x == 1.0));
            assert!(v.values().iter().all(|&x| x == panel.v0()));
        }
        let panel = simulate_martingales(&c, &e, &|_| Ok(0.0), 0.4).unwrap();
        assert!(panel
            .l_theta
            .iter()
            .all(|l| l.values().iter().all(|&x| x == 1.0)));
    }

    #[test]
    fn tilted_simulation_matches_martingale_panel() {
        let p = LqParams {
            a: 0.5,
            sigma: 0.3,
            ..LqParams::PAPER
        };
        let c = lq_coefficients(&p);
        let law = ControlLaw::tilted(|_, x, _, l| Ok(-x - 0.1 / l), |_| Ok(0.3), 0.2);
        let e = simulate_state(&c, &law, 1.0, grid(30), 20, 4).unwrap();
        let panel = simulate_martingales(&c, &e, &|_| Ok(0.3), 0.2).unwrap();
        // replay the control from the panel's L: must match what the simulator used
        for i in 0..20 {
            for k in 0..=30 {
                let u = -e.states[i].value(k) - 0.1 / panel.l_theta[i].value(k);
                assert_eq!(u.to_bits(), e.controls[i].value(k).to_bits());
            }
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&xs, 0.5), 3.0);
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 5.0);
        assert!((quantile_sorted(&xs, 0.05) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn summary_agrees_with_stored_ensemble() {
        let c = lq_coefficients(&LqParams {
            a: 0.5,
            sigma: 0.3,
            ..LqParams::PAPER
        });
        let law = ControlLaw::feedback(|_, x, _| Ok(-x));
        let g = grid(100);
        let e = simulate_state(&c, &law, 1.0, g, 40, 8).unwrap();
        let s = simulate_summary(&c, &law, 1.0, g, 40, Noise::new(8), 11, 3).unwrap();
        assert_eq!(s.nodes, (0..=100).step_by(10).collect::<Vec<_>>());
        for (j, &k) in s.nodes.iter().enumerate() {
            assert_eq!(s.mean[j], e.empirical_mean.value(k));
            assert_eq!(s.samples[2][j], e.states[2].value(k));
        }
        let costs = path_costs(&c, &e);
        let streamed = simulate_costs(&c, &law, 1.0, g, 40, Noise::new(8)).unwrap();
        for (a, b) in costs.iter().zip(&streamed.psi) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
