//! Uniform time grids, sampled paths and the counter-based Gaussian stream.
//!
//! Every Gaussian draw is a pure function of `(master_seed, path_index, step)`:
//! the path index selects a ChaCha8 stream and the step selects the word
//! position inside it. A stream that is read sequentially therefore yields the
//! same numbers as random access, and the output never depends on how paths
//! are split across workers.

use std::f64::consts::TAU;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_k = k * t_end / n_steps`, `k = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::invalid(format!(
                "t_end must be positive, got {t_end}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        Ok(Self { t_end, n_steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes, `n_steps + 1`.
    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    /// Node `k`; the last node is `t_end` exactly.
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.n_steps);
        if k == self.n_steps {
            self.t_end
        } else {
            k as f64 * self.t_end / self.n_steps as f64
        }
    }

    pub fn nodes(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        (0..self.n_steps + 1).map(move |k| self.node(k))
    }

    /// Index of the node closest to `t` (clamped to the grid).
    pub fn nearest_index(&self, t: f64) -> usize {
        let k = (t / self.dt()).round();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n_steps)
        }
    }

    /// Same horizon with `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.t_end, self.n_steps * factor)
    }
}

pub fn make_grid(t_end: f64, n_steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(t_end, n_steps)
}

/// Values of one scalar process on a [`TimeGrid`].
///
/// A path that blew up carries `blow_up = Some(k)`: nodes `k..` hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarPath {
    grid: TimeGrid,
    values: Vec<f64>,
    blow_up: Option<usize>,
}

impl ScalarPath {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "path has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at node {k} of a path without blow-up marker"
            )));
        }
        Ok(Self {
            grid,
            values,
            blow_up: None,
        })
    }

    /// Path truncated at `index`: values from `index` on are replaced by `NaN`.
    pub fn truncated(grid: TimeGrid, mut values: Vec<f64>, index: usize) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "path has {} values, grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if index > grid.n_steps() {
            return Err(Error::invalid(format!(
                "blow-up index {index} is past the grid"
            )));
        }
        for v in &mut values[index..] {
            *v = f64::NAN;
        }
        if values[..index].iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite value before the blow-up index"));
        }
        Ok(Self {
            grid,
            values,
            blow_up: Some(index),
        })
    }

    pub(crate) fn from_raw(grid: TimeGrid, values: Vec<f64>, blow_up: Option<usize>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self {
            grid,
            values,
            blow_up,
        }
    }

    pub fn constant(grid: TimeGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
            blow_up: None,
        }
    }

    pub fn from_fn(grid: TimeGrid, f: impl FnMut(f64) -> f64) -> Result<Self> {
        let values = grid.nodes().map(f).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn blow_up(&self) -> Option<usize> {
        self.blow_up
    }

    /// The finite prefix (the whole path when there is no blow-up).
    pub fn finite_values(&self) -> &[f64] {
        &self.values[..self.blow_up.unwrap_or(self.values.len())]
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Counter-based Gaussian stream for one path.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    path_index: u64,
    step: u64,
    rng: ChaCha8Rng,
}

// Two u64 draws (four 32-bit words) per Gaussian.
const WORDS_PER_DRAW: u128 = 4;

impl RngStream {
    pub fn new(master_seed: u64, path_index: u64) -> Self {
        Self::at_step(master_seed, path_index, 0)
    }

    pub fn at_step(master_seed: u64, path_index: u64, step: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(path_index);
        rng.set_word_pos(step as u128 * WORDS_PER_DRAW);
        Self {
            master_seed,
            path_index,
            step,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    /// The step whose draw [`next_standard`](Self::next_standard) returns next.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Standard normal draw for the current step; advances the counter.
    pub fn next_standard(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        self.step += 1;
        box_muller(a, b)
    }

    /// Standard normal draw for `(master_seed, path_index, step)`.
    pub fn standard_at(master_seed: u64, path_index: u64, step: u64) -> f64 {
        Self::at_step(master_seed, path_index, step).next_standard()
    }
}

fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> f64 {
    let u1 = open_unit(a);
    let u2 = open_unit(b);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// `N(0, dt)` increment for `step` of the stream's path. Pure in
/// `(master_seed, path_index, step)`; the stream's own position is untouched.
pub fn gaussian_increment(stream: &RngStream, step: u64, dt: f64) -> f64 {
    dt.sqrt() * RngStream::standard_at(stream.master_seed, stream.path_index, step)
}

/// Brownian increments for a family of paths.
///
/// With `substeps = s`, the increment of step `k` is the sum of the base draws
/// `k*s .. k*s+s`, each scaled to variance `dt/s`. A grid with `n` steps and
/// `s = 2` therefore sees the same Brownian path as a grid with `2n` steps and
/// `s = 1`, which is how dt-halving comparisons share random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Noise {
    pub seed: u64,
    pub substeps: u32,
}

impl Noise {
    pub fn new(seed: u64) -> Self {
        Self { seed, substeps: 1 }
    }

    pub fn with_substeps(seed: u64, substeps: u32) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::invalid("substeps must be at least 1"));
        }
        Ok(Self { seed, substeps })
    }

    pub fn path(&self, path_index: usize, dt: f64) -> IncrementStream {
        IncrementStream {
            stream: RngStream::new(self.seed, path_index as u64),
            substeps: self.substeps,
            scale: (dt / self.substeps as f64).sqrt(),
        }
    }

    /// Random access to the increment of `(path_index, step)`.
    pub fn increment(&self, path_index: usize, step: usize, dt: f64) -> f64 {
        let s = self.substeps as u64;
        let mut stream = RngStream::at_step(self.seed, path_index as u64, step as u64 * s);
        let scale = (dt / self.substeps as f64).sqrt();
        let mut sum = 0.0;
        for _ in 0..s {
            sum += stream.next_standard();
        }
        sum * scale
    }
}

/// Sequential increments of one path, step after step.
#[derive(Debug, Clone)]
pub struct IncrementStream {
    stream: RngStream,
    substeps: u32,
    scale: f64,
}

impl IncrementStream {
    pub fn next_increment(&mut self) -> f64 {
        let mut sum = 0.0;
        for _ in 0..self.substeps {
            sum += self.stream.next_standard();
        }
        sum * self.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_basics() {
        let g = make_grid(1.0, 10).unwrap();
        assert_eq!(g.dt(), 0.1);
        assert_eq!(g.node(10), 1.0);
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.len(), 11);
    }

    #[test]
    fn reference_step_sizes() {
        let g = make_grid(1.0, 1_000_000).unwrap();
        assert!((g.dt() - 1e-6).abs() < 1e-18);
        let g = make_grid(5.0, 5_000_000).unwrap();
        assert!((g.dt() - 1e-6).abs() < 1e-18);
        assert_eq!(g.node(g.n_steps()), 5.0);
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        assert!(matches!(make_grid(0.0, 10), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            make_grid(-1.0, 10),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(make_grid(1.0, 0), Err(Error::InvalidArgument(_))));
        assert!(make_grid(f64::NAN, 3).is_err());
    }

    #[test]
    fn nodes_strictly_increasing_with_exact_endpoints() {
        for &(t, n) in &[(1.0, 7usize), (0.3, 1000), (5.0, 12345), (1e-3, 3)] {
            let g = make_grid(t, n).unwrap();
            let nodes: Vec<f64> = g.nodes().collect();
            assert_eq!(nodes[0], 0.0);
            assert_eq!(nodes[n], t);
            assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn stream_is_deterministic_and_random_access() {
        let s = RngStream::new(42, 7);
        let a = gaussian_increment(&s, 3, 0.01);
        let b = gaussian_increment(&s, 3, 0.01);
        assert_eq!(a.to_bits(), b.to_bits());

        let mut seq = RngStream::new(42, 7);
        let draws: Vec<f64> = (0..20).map(|_| seq.next_standard()).collect();
        for (k, d) in draws.iter().enumerate() {
            assert_eq!(
                d.to_bits(),
                RngStream::standard_at(42, 7, k as u64).to_bits()
            );
        }
        assert_eq!(seq.step(), 20);
    }

    #[test]
    fn different_paths_differ() {
        let a: Vec<f64> = {
            let mut s = RngStream::new(1, 0);
            (0..8).map(|_| s.next_standard()).collect()
        };
        let b: Vec<f64> = {
            let mut s = RngStream::new(1, 1);
            (0..8).map(|_| s.next_standard()).collect()
        };
        assert_ne!(a, b);
    }

    #[test]
    fn increment_moments() {
        let dt: f64 = 1e-2;
        let n = 1_000_000usize;
        let mut s = RngStream::new(2024, 0);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let z = dt.sqrt() * s.next_standard();
            sum += z;
            sum2 += z * z;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt(), "mean {mean}");
        assert!((var / dt - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn coarse_increments_are_sums_of_fine_ones() {
        let dt = 0.1;
        let coarse = Noise::with_substeps(9, 2).unwrap();
        let fine = Noise::new(9);
        let mut cs = coarse.path(3, dt);
        let mut fs = fine.path(3, dt / 2.0);
        for k in 0..10 {
            let c = cs.next_increment();
            let f = fs.next_increment() + fs.next_increment();
            assert!((c - f).abs() < 1e-15);
            assert_eq!(c.to_bits(), coarse.increment(3, k, dt).to_bits());
        }
    }

    #[test]
    fn truncated_path_marks_tail() {
        let g = make_grid(1.0, 4).unwrap();
        let p = ScalarPath::truncated(g, vec![1.0, 2.0, 3.0, 4.0, 5.0], 3).unwrap();
        assert_eq!(p.blow_up(), Some(3));
        assert_eq!(p.finite_values(), &[1.0, 2.0, 3.0]);
        assert!(p.value(4).is_nan());
        assert!(ScalarPath::new(g, vec![1.0, f64::NAN, 0.0, 0.0, 0.0]).is_err());
        assert!(ScalarPath::new(g, vec![1.0; 3]).is_err());
    }
}
