//! Multinomial No-U-Turn sampler with dual-averaging step size and windowed
//! diagonal mass-matrix adaptation.
//!
//! Each chain owns a `ChaCha8Rng` seeded from the master seed with the chain
//! index as its stream, so a chain's draws do not depend on how many other
//! chains run or in which order.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Energy error beyond which a trajectory is marked divergent.
pub const MAX_DELTA_H: f64 = 1000.0;
const INIT_ATTEMPTS: usize = 100;
const DIVERGENT_FRACTION_LIMIT: f64 = 0.9;
const LOW_EBFMI: f64 = 0.3;

/// A differentiable log density on an unconstrained space.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Log density at `position`; writes the gradient into `grad`.
    /// Returns a non-finite value outside the support.
    fn log_density(&self, position: &[f64], grad: &mut [f64]) -> f64;

    /// Names of the constrained parameters.
    fn param_names(&self) -> Vec<String>;

    /// Constrained parameters for an unconstrained position.
    fn constrain(&self, position: &[f64]) -> Vec<f64>;

    /// Constrained parameters that are held constant.
    fn fixed_params(&self) -> Vec<bool> {
        vec![false; self.param_names().len()]
    }

    /// Point the initial jitter is centered on.
    fn init_center(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    /// Whether a jittered point may start a chain. Rejected points count
    /// against the init attempt budget.
    fn admissible_init(&self, _position: &[f64]) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error("invalid sampler config `{field}`: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("chain {chain}: no finite initial point after {attempts} attempts")]
    InitializationFailure { chain: usize, attempts: usize },
    #[error("chain {chain}: {fraction:.3} of iterations diverged")]
    AllDivergent { chain: usize, fraction: f64 },
    #[error("step size search failed in chain {chain}")]
    StepSizeSearch { chain: usize },
    #[error("at least 2 chains required, got {0}")]
    InsufficientChains(usize),
    #[error("{0}")]
    Io(String),
    #[error("malformed draws file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    pub init_jitter: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 3,
            warmup: 2500,
            samples: 3000,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 0,
            init_jitter: 2.0,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |field: &str, message: &str| {
            Err(SamplerError::InvalidConfig {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.chains < 1 {
            return bad("chains", "must be at least 1");
        }
        if self.warmup < 100 {
            return bad("warmup", "must be at least 100");
        }
        if self.samples < 1 {
            return bad("samples", "must be at least 1");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept", "must lie in (0, 1)");
        }
        if self.max_tree_depth < 1 {
            return bad("max_tree_depth", "must be at least 1");
        }
        if !(self.init_jitter.is_finite() && self.init_jitter >= 0.0) {
            return bad("init_jitter", "must be finite and nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub lp: f64,
    pub accept_stat: f64,
    pub step_size: f64,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    pub energy: f64,
}

/// Adapted state at the end of warmup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
}

/// Warmup phases: step-size-only buffers around metric windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupSchedule {
    pub warmup: usize,
    pub init_buffer: usize,
    pub term_buffer: usize,
    pub base_window: usize,
    /// Inclusive `(first, last)` warmup iteration of each metric window.
    pub windows: Vec<(usize, usize)>,
}

impl WarmupSchedule {
    pub fn new(warmup: usize) -> Self {
        let mut w = Windows::new(warmup);
        let mut windows = Vec::new();
        let mut start = w.init_buffer;
        for it in 0..warmup {
            if w.end_window() {
                windows.push((start, it));
                start = it + 1;
                w.next_window();
            }
            w.counter += 1;
        }
        Self {
            warmup,
            init_buffer: w.init_buffer,
            term_buffer: w.term_buffer,
            base_window: w.base_window,
            windows,
        }
    }
}

impl fmt::Display for WarmupSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "warmup {}: step size only for iterations [0, {})",
            self.warmup, self.init_buffer
        )?;
        for (a, b) in &self.windows {
            write!(f, "; metric window [{a}, {b}]")?;
        }
        write!(
            f,
            "; step size only for the final {} iterations",
            self.term_buffer
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    /// Constrained parameter names.
    pub names: Vec<String>,
    pub fixed: Vec<bool>,
    /// `[chain][iteration][coordinate]`; empty when loaded from disk.
    pub unconstrained: Vec<Vec<Vec<f64>>>,
    /// `[chain][iteration][parameter]`.
    pub constrained: Vec<Vec<Vec<f64>>>,
    /// `[chain][iteration]`; empty when loaded from disk.
    pub stats: Vec<Vec<IterationStats>>,
    pub adaptation: Vec<Adaptation>,
    pub schedule: Option<WarmupSchedule>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.constrained.len()
    }

    pub fn n_samples(&self) -> usize {
        self.constrained.first().map_or(0, Vec::len)
    }

    pub fn total_draws(&self) -> usize {
        self.constrained.iter().map(Vec::len).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Per-chain sequences of constrained parameter `k`.
    pub fn chains_of(&self, k: usize) -> Vec<Vec<f64>> {
        self.constrained
            .iter()
            .map(|c| c.iter().map(|d| d[k]).collect())
            .collect()
    }

    /// All constrained draws, chains concatenated in order.
    pub fn pooled(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.constrained.iter().flatten()
    }

    /// `draws.csv`: chain, iteration, then one column per parameter.
    pub fn write_csv(&self, path: &Path) -> Result<(), SamplerError> {
        let mut out = String::from("chain,iteration");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (c, chain) in self.constrained.iter().enumerate() {
            for (i, draw) in chain.iter().enumerate() {
                out.push_str(&format!("{c},{i}"));
                for v in draw {
                    // Shortest representation that round-trips exactly.
                    out.push_str(&format!(",{v:?}"));
                }
                out.push('\n');
            }
        }
        write_file(path, &out)
    }

    /// `sampler_stats.csv`: one row per kept iteration.
    pub fn write_stats_csv(&self, path: &Path) -> Result<(), SamplerError> {
        let mut out =
            String::from("chain,iteration,lp,accept_stat,step_size,tree_depth,n_leapfrog,divergent,energy\n");
        for (c, chain) in self.stats.iter().enumerate() {
            for (i, s) in chain.iter().enumerate() {
                out.push_str(&format!(
                    "{c},{i},{:?},{:?},{:?},{},{},{},{:?}\n",
                    s.lp,
                    s.accept_stat,
                    s.step_size,
                    s.tree_depth,
                    s.n_leapfrog,
                    u8::from(s.divergent),
                    s.energy
                ));
            }
        }
        write_file(path, &out)
    }

    /// Reads a `draws.csv` written by [`PosteriorDraws::write_csv`].
    /// Chains must be contiguous, numbered from 0, and of equal length.
    pub fn read_csv(path: &Path, fixed: Option<Vec<bool>>) -> Result<Self, SamplerError> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| SamplerError::Io(e.to_string()))?;
        let header = rdr
            .headers()
            .map_err(|e| SamplerError::Malformed(e.to_string()))?
            .clone();
        if header.len() < 3 || &header[0] != "chain" || &header[1] != "iteration" {
            return Err(SamplerError::Malformed(
                "header must start with chain,iteration and name at least one parameter".into(),
            ));
        }
        let names: Vec<String> = header.iter().skip(2).map(String::from).collect();
        let mut constrained: Vec<Vec<Vec<f64>>> = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let line = row + 2;
            let rec = rec.map_err(|e| SamplerError::Malformed(format!("line {line}: {e}")))?;
            if rec.len() != header.len() {
                return Err(SamplerError::Malformed(format!(
                    "line {line}: expected {} fields, got {}",
                    header.len(),
                    rec.len()
                )));
            }
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| SamplerError::Malformed(format!("line {line}: bad index `{s}`")))
            };
            let chain = int(&rec[0])?;
            let iter = int(&rec[1])?;
            if chain == constrained.len() {
                constrained.push(Vec::new());
            } else if chain + 1 != constrained.len() {
                return Err(SamplerError::Malformed(format!("line {line}: chains out of order")));
            }
            let c = constrained.last_mut().unwrap();
            if iter != c.len() {
                return Err(SamplerError::Malformed(format!("line {line}: iterations out of order")));
            }
            let values = rec
                .iter()
                .skip(2)
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| SamplerError::Malformed(format!("line {line}: bad value `{s}`")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            c.push(values);
        }
        if constrained.is_empty() {
            return Err(SamplerError::Malformed("no draws".into()));
        }
        let n = constrained[0].len();
        if constrained.iter().any(|c| c.len() != n) {
            return Err(SamplerError::Malformed("chains have different lengths".into()));
        }
        let fixed = fixed.unwrap_or_else(|| vec![false; names.len()]);
        Ok(Self {
            names,
            fixed,
            unconstrained: Vec::new(),
            constrained,
            stats: Vec::new(),
            adaptation: Vec::new(),
            schedule: None,
        })
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), SamplerError> {
    let mut f = std::fs::File::create(path).map_err(|e| SamplerError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| SamplerError::Io(format!("{}: {e}", path.display())))
}

/// Runs all chains, concurrently, and merges them by chain index.
pub fn sample<T: Target>(target: &T, config: &SamplerConfig) -> Result<PosteriorDraws, SamplerError> {
    config.validate()?;
    let results: Vec<Result<ChainOutput, SamplerError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..config.chains)
            .map(|c| s.spawn(move || sample_chain(target, config, c)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    let mut draws = PosteriorDraws {
        names: target.param_names(),
        fixed: target.fixed_params(),
        unconstrained: Vec::with_capacity(config.chains),
        constrained: Vec::with_capacity(config.chains),
        stats: Vec::with_capacity(config.chains),
        adaptation: Vec::with_capacity(config.chains),
        schedule: Some(WarmupSchedule::new(config.warmup)),
    };
    for r in results {
        let out = r?;
        draws.unconstrained.push(out.unconstrained);
        draws.constrained.push(out.constrained);
        draws.stats.push(out.stats);
        draws.adaptation.push(out.adaptation);
    }
    Ok(draws)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub unconstrained: Vec<Vec<f64>>,
    pub constrained: Vec<Vec<f64>>,
    pub stats: Vec<IterationStats>,
    pub adaptation: Adaptation,
}

/// Runs chain `chain` alone; identical to that chain's part of [`sample`].
pub fn sample_chain<T: Target>(target: &T, config: &SamplerConfig, chain: usize) -> Result<ChainOutput, SamplerError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64);
    let dim = target.dim();

    let mut q = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut lp = f64::NEG_INFINITY;
    let mut found = false;
    let center = target.init_center();
    for _ in 0..INIT_ATTEMPTS {
        for (v, c) in q.iter_mut().zip(&center) {
            *v = c + config.init_jitter * (2.0 * rng.random::<f64>() - 1.0);
        }
        if !target.admissible_init(&q) {
            continue;
        }
        lp = target.log_density(&q, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            found = true;
            break;
        }
    }
    if !found {
        return Err(SamplerError::InitializationFailure {
            chain,
            attempts: INIT_ATTEMPTS,
        });
    }

    let mut nuts = Nuts {
        target,
        rng,
        inv_metric: vec![1.0; dim],
        epsilon: 1.0,
        max_depth: config.max_tree_depth,
        z: State {
            q,
            p: vec![0.0; dim],
            lp,
            grad,
        },
    };
    nuts.init_stepsize().map_err(|_| SamplerError::StepSizeSearch { chain })?;

    let mut dual = DualAveraging::new(config.target_accept, nuts.epsilon);
    let mut windows = Windows::new(config.warmup);
    let mut welford = Welford::new(dim);
    for _ in 0..config.warmup {
        let s = nuts.transition();
        nuts.epsilon = dual.learn(s.accept_stat);
        if windows.in_window() {
            welford.add(&nuts.z.q);
        }
        if windows.end_window() {
            windows.next_window();
            let n = welford.n as f64;
            let var = welford.variance();
            for (m, v) in nuts.inv_metric.iter_mut().zip(var) {
                *m = (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0));
            }
            welford = Welford::new(dim);
            nuts.init_stepsize().map_err(|_| SamplerError::StepSizeSearch { chain })?;
            dual = DualAveraging::new(config.target_accept, nuts.epsilon);
        }
        windows.counter += 1;
    }
    nuts.epsilon = dual.final_step();

    let mut out = ChainOutput {
        unconstrained: Vec::with_capacity(config.samples),
        constrained: Vec::with_capacity(config.samples),
        stats: Vec::with_capacity(config.samples),
        adaptation: Adaptation {
            step_size: nuts.epsilon,
            inv_metric: nuts.inv_metric.clone(),
        },
    };
    for _ in 0..config.samples {
        let s = nuts.transition();
        out.constrained.push(target.constrain(&nuts.z.q));
        out.unconstrained.push(nuts.z.q.clone());
        out.stats.push(s);
    }
    let divergent = out.stats.iter().filter(|s| s.divergent).count();
    let fraction = divergent as f64 / config.samples as f64;
    if fraction > DIVERGENT_FRACTION_LIMIT {
        return Err(SamplerError::AllDivergent { chain, fraction });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct State {
    q: Vec<f64>,
    p: Vec<f64>,
    lp: f64,
    grad: Vec<f64>,
}

struct Nuts<'a, T: Target> {
    target: &'a T,
    rng: ChaCha8Rng,
    inv_metric: Vec<f64>,
    epsilon: f64,
    max_depth: usize,
    z: State,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// U-turn check between two trajectory ends.
fn no_u_turn(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

/// Running sums threaded through tree building.
struct TreeSums {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

impl<'a, T: Target> Nuts<'a, T> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn hamiltonian(&self) -> f64 {
        let h = -self.z.lp + self.kinetic(&self.z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self) -> Vec<f64> {
        self.z.p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum(&mut self) {
        for (p, m) in self.z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = self.rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    fn leapfrog(&mut self, eps: f64) {
        let z = &mut self.z;
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.lp = self.target.log_density(&z.q, &mut z.grad);
        if !z.lp.is_finite() || z.grad.iter().any(|g| !g.is_finite()) {
            z.lp = f64::NEG_INFINITY;
            return;
        }
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }

    /// Doubles or halves the step size until one leapfrog step's
    /// acceptance probability crosses 0.8.
    fn init_stepsize(&mut self) -> Result<(), ()> {
        let start = self.z.clone();
        let threshold = 0.8f64.ln();
        let mut direction = 0i8;
        loop {
            self.z = start.clone();
            self.sample_momentum();
            let h0 = self.hamiltonian();
            self.leapfrog(self.epsilon);
            let delta = h0 - self.hamiltonian();
            if direction == 0 {
                direction = if delta > threshold { 1 } else { -1 };
            } else if (direction == 1 && !(delta > threshold)) || (direction == -1 && !(delta < threshold)) {
                break;
            }
            self.epsilon = if direction == 1 {
                2.0 * self.epsilon
            } else {
                0.5 * self.epsilon
            };
            if self.epsilon > 1e7 || self.epsilon == 0.0 {
                self.z = start;
                return Err(());
            }
        }
        self.z = start;
        Ok(())
    }

    fn transition(&mut self) -> IterationStats {
        self.sample_momentum();
        let start = self.z.clone();
        let h0 = self.hamiltonian();

        let mut z_fwd = self.z.clone();
        let mut z_bck = self.z.clone();
        let mut z_sample = self.z.clone();
        let mut z_propose = self.z.clone();

        let p0 = self.z.p.clone();
        let ps0 = self.p_sharp();
        let (mut p_fwd_fwd, mut p_sharp_fwd_fwd) = (p0.clone(), ps0.clone());
        let (mut p_fwd_bck, mut p_sharp_fwd_bck) = (p0.clone(), ps0.clone());
        let (mut p_bck_fwd, mut p_sharp_bck_fwd) = (p0.clone(), ps0.clone());
        let (mut p_bck_bck, mut p_sharp_bck_bck) = (p0.clone(), ps0);
        let mut rho = p0;

        let mut log_sum_weight = 0.0;
        let mut sums = TreeSums {
            n_leapfrog: 0,
            sum_metro_prob: 0.0,
            divergent: false,
        };
        let mut depth = 0;
        let dim = rho.len();

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid;
            if self.rng.random::<f64>() > 0.5 {
                self.z = z_fwd.clone();
                rho_bck.copy_from_slice(&rho);
                p_bck_fwd.copy_from_slice(&p_fwd_bck);
                p_sharp_bck_fwd.copy_from_slice(&p_sharp_fwd_bck);
                valid = self.build_tree(
                    depth,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut lsw_subtree,
                    &mut sums,
                );
                z_fwd = self.z.clone();
            } else {
                self.z = z_bck.clone();
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bck.copy_from_slice(&p_bck_fwd);
                p_sharp_fwd_bck.copy_from_slice(&p_sharp_bck_fwd);
                valid = self.build_tree(
                    depth,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut lsw_subtree,
                    &mut sums,
                );
                z_bck = self.z.clone();
            }
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight {
                z_sample = z_propose.clone();
            } else {
                let accept = (lsw_subtree - log_sum_weight).exp();
                if self.rng.random::<f64>() < accept {
                    z_sample = z_propose.clone();
                }
            }
            log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);

            for ((r, b), f) in rho.iter_mut().zip(&rho_bck).zip(&rho_fwd) {
                *r = b + f;
            }
            let mut persist = no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let mut ext: Vec<f64> = rho_bck.iter().zip(&p_fwd_bck).map(|(a, b)| a + b).collect();
            persist &= no_u_turn(&p_sharp_bck_bck, &p_sharp_fwd_bck, &ext);
            for ((e, a), b) in ext.iter_mut().zip(&rho_fwd).zip(&p_bck_fwd) {
                *e = a + b;
            }
            persist &= no_u_turn(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &ext);
            if !persist {
                break;
            }
        }

        let accept_stat = if sums.n_leapfrog > 0 {
            sums.sum_metro_prob / sums.n_leapfrog as f64
        } else {
            0.0
        };
        self.z = z_sample;
        if !self.z.lp.is_finite() {
            self.z = start;
        }
        IterationStats {
            lp: self.z.lp,
            accept_stat,
            step_size: self.epsilon,
            tree_depth: depth,
            n_leapfrog: sums.n_leapfrog,
            divergent: sums.divergent,
            energy: self.hamiltonian(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z_propose: &mut State,
        p_sharp_beg: &mut [f64],
        p_sharp_end: &mut [f64],
        rho: &mut [f64],
        p_beg: &mut [f64],
        p_end: &mut [f64],
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
        sums: &mut TreeSums,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(sign * self.epsilon);
            sums.n_leapfrog += 1;
            let h = self.hamiltonian();
            if h - h0 > MAX_DELTA_H {
                sums.divergent = true;
            }
            *log_sum_weight = log_sum_exp(*log_sum_weight, h0 - h);
            sums.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            *z_propose = self.z.clone();
            let ps = self.p_sharp();
            p_sharp_beg.copy_from_slice(&ps);
            p_sharp_end.copy_from_slice(&ps);
            add_assign(rho, &self.z.p);
            p_beg.copy_from_slice(&self.z.p);
            p_end.copy_from_slice(&self.z.p);
            return !sums.divergent;
        }
        let dim = rho.len();

        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        if !self.build_tree(
            depth - 1,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            &mut lsw_init,
            sums,
        ) {
            return false;
        }

        let mut z_propose_final = self.z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        if !self.build_tree(
            depth - 1,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            &mut lsw_final,
            sums,
        ) {
            return false;
        }

        let lsw_subtree = log_sum_exp(lsw_init, lsw_final);
        *log_sum_weight = log_sum_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if self.rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }

        let rho_subtree: Vec<f64> = rho_init.iter().zip(&rho_final).map(|(a, b)| a + b).collect();
        add_assign(rho, &rho_subtree);
        let mut persist = no_u_turn(p_sharp_beg, p_sharp_end, &rho_subtree);
        let mut ext: Vec<f64> = rho_init.iter().zip(&p_final_beg).map(|(a, b)| a + b).collect();
        persist &= no_u_turn(p_sharp_beg, &p_sharp_final_beg, &ext);
        for ((e, a), b) in ext.iter_mut().zip(&rho_final).zip(&p_init_end) {
            *e = a + b;
        }
        persist &= no_u_turn(&p_sharp_init_end, p_sharp_end, &ext);
        persist
    }
}

struct DualAveraging {
    mu: f64,
    delta: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const KAPPA: f64 = 0.75;
    const T0: f64 = 10.0;

    fn new(delta: f64, epsilon: f64) -> Self {
        Self {
            mu: (10.0 * epsilon).ln(),
            delta,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Metric adaptation windows, counted in warmup iterations.
struct Windows {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    base_window: usize,
    window_size: usize,
    next_end: usize,
    counter: usize,
}

impl Windows {
    fn new(warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base_window) = (75, 50, 25);
        if init_buffer + base_window + term_buffer > warmup {
            init_buffer = (0.15 * warmup as f64) as usize;
            term_buffer = (0.1 * warmup as f64) as usize;
            base_window = warmup - (init_buffer + term_buffer);
        }
        Self {
            warmup,
            init_buffer,
            term_buffer,
            base_window,
            window_size: base_window,
            next_end: init_buffer + base_window - 1,
            counter: 0,
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    fn end_window(&self) -> bool {
        self.counter == self.next_end && self.counter != self.warmup
    }

    fn next_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_end == last {
            return;
        }
        self.window_size *= 2;
        self.next_end = self.counter + self.window_size;
        if self.next_end != last {
            let boundary = self.next_end + 2 * self.window_size;
            if boundary >= self.warmup - self.term_buffer {
                self.next_end = last;
            }
        }
    }
}

struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn variance(&self) -> Vec<f64> {
        let d = (self.n as f64 - 1.0).max(1.0);
        self.m2.iter().map(|s| s / d).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub divergences: usize,
    pub max_depth_hits: usize,
    pub ebfmi: f64,
    pub low_ebfmi: bool,
    pub step_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub chains: Vec<ChainReport>,
    pub total_divergences: usize,
    pub max_tree_depth: usize,
    pub schedule: Option<String>,
}

/// Divergence and tree-depth counts, plus E-BFMI per chain. Chains with
/// E-BFMI below 0.3 are flagged.
pub fn diagnose_run(draws: &PosteriorDraws, max_tree_depth: usize) -> Result<RunReport, SamplerError> {
    if draws.n_chains() < 2 {
        return Err(SamplerError::InsufficientChains(draws.n_chains()));
    }
    let chains: Vec<ChainReport> = draws
        .stats
        .iter()
        .enumerate()
        .map(|(c, s)| {
            let e: Vec<f64> = s.iter().map(|x| x.energy).collect();
            let ebfmi = ebfmi(&e);
            ChainReport {
                divergences: s.iter().filter(|x| x.divergent).count(),
                max_depth_hits: s.iter().filter(|x| x.tree_depth >= max_tree_depth).count(),
                ebfmi,
                low_ebfmi: ebfmi < LOW_EBFMI,
                step_size: draws.adaptation.get(c).map_or(f64::NAN, |a| a.step_size),
            }
        })
        .collect();
    Ok(RunReport {
        total_divergences: chains.iter().map(|c| c.divergences).sum(),
        chains,
        max_tree_depth,
        schedule: draws.schedule.as_ref().map(|s| s.to_string()),
    })
}

/// Energy Bayesian fraction of missing information.
pub fn ebfmi(energy: &[f64]) -> f64 {
    let n = energy.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = energy.iter().sum::<f64>() / n as f64;
    let var: f64 = energy.iter().map(|e| (e - mean).powi(2)).sum::<f64>();
    let diff: f64 = energy.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    diff / var
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StdNormal(usize);

    impl Target for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density(&self, x: &[f64], g: &mut [f64]) -> f64 {
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = -xi;
            }
            -0.5 * dot(x, x)
        }
        fn param_names(&self) -> Vec<String> {
            (0..self.0).map(|i| format!("x{i}")).collect()
        }
        fn constrain(&self, x: &[f64]) -> Vec<f64> {
            x.to_vec()
        }
    }

    #[test]
    fn schedule_matches_reference_layout() {
        let s = WarmupSchedule::new(1000);
        assert_eq!(s.init_buffer, 75);
        assert_eq!(s.term_buffer, 50);
        assert_eq!(
            s.windows,
            vec![(75, 99), (100, 149), (150, 249), (250, 449), (450, 949)]
        );
        let s = WarmupSchedule::new(100);
        assert_eq!((s.init_buffer, s.term_buffer, s.base_window), (15, 10, 75));
        assert_eq!(s.windows, vec![(15, 89)]);
        assert_eq!(WarmupSchedule::new(2500).windows.last().unwrap().1, 2449);
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        let c = SamplerConfig {
            warmup: 50,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(SamplerError::InvalidConfig { .. })));
        let c = SamplerConfig {
            target_accept: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn deterministic_and_chain_order_free() {
        let cfg = SamplerConfig {
            chains: 2,
            warmup: 150,
            samples: 100,
            seed: 11,
            ..Default::default()
        };
        let a = sample(&StdNormal(3), &cfg).unwrap();
        let b = sample(&StdNormal(3), &cfg).unwrap();
        assert_eq!(a, b);
        let c1 = sample_chain(&StdNormal(3), &cfg, 1).unwrap();
        assert_eq!(c1.constrained, a.constrained[1]);
    }

    #[test]
    fn init_failure() {
        struct Nowhere;
        impl Target for Nowhere {
            fn dim(&self) -> usize {
                1
            }
            fn log_density(&self, _: &[f64], _: &mut [f64]) -> f64 {
                f64::NEG_INFINITY
            }
            fn param_names(&self) -> Vec<String> {
                vec!["x".into()]
            }
            fn constrain(&self, x: &[f64]) -> Vec<f64> {
                x.to_vec()
            }
        }
        let cfg = SamplerConfig {
            chains: 1,
            warmup: 100,
            samples: 10,
            ..Default::default()
        };
        assert!(matches!(
            sample(&Nowhere, &cfg),
            Err(SamplerError::InitializationFailure { .. })
        ));
    }

    #[test]
    fn single_chain_report_rejected() {
        let cfg = SamplerConfig {
            chains: 1,
            warmup: 100,
            samples: 20,
            ..Default::default()
        };
        let d = sample(&StdNormal(1), &cfg).unwrap();
        assert_eq!(diagnose_run(&d, 10), Err(SamplerError::InsufficientChains(1)));
    }

    #[test]
    fn csv_round_trip() {
        let cfg = SamplerConfig {
            chains: 2,
            warmup: 100,
            samples: 15,
            ..Default::default()
        };
        let d = sample(&StdNormal(2), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("draws.csv");
        d.write_csv(&path).unwrap();
        let r = PosteriorDraws::read_csv(&path, None).unwrap();
        assert_eq!(r.constrained, d.constrained);
        assert_eq!(r.names, d.names);
    }
}
