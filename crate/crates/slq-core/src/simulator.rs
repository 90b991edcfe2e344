//! Euler-Maruyama ensemble simulation: open-loop runs under an exploration
//! input for data collection, and closed-loop Monte-Carlo cost estimation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, SlqError};
use crate::model::{FeedbackGain, SlqModel};
use crate::rng::PathNormals;
use crate::scalar::{lit, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    EulerMaruyama,
}

#[derive(Clone, Debug)]
pub struct SimConfig<T: Real> {
    pub dt: T,
    pub paths: usize,
    pub seed: u64,
    pub scheme: Scheme,
}

impl<T: Real> Default for SimConfig<T> {
    fn default() -> Self {
        SimConfig {
            dt: lit(1e-3),
            paths: 10_000,
            seed: 0,
            scheme: Scheme::EulerMaruyama,
        }
    }
}

/// multisine dither with independent Gaussian jitter per step,
///   u_ch(t) = sum_i amp_i sin(freq_i t + phase_i + 0.7 ch) + noise_std z,
/// the 0.7 rad channel offset keeps multi-input channels out of phase
#[derive(Clone, Debug)]
pub struct ExplorationInput<T: Real> {
    pub amplitudes: Vec<T>,
    pub frequencies: Vec<T>,
    pub phases: Vec<T>,
    pub noise_std: T,
}

impl<T: Real> ExplorationInput<T> {
    /// identically zero input (useful for uncontrolled moment studies)
    pub fn silent() -> Self {
        ExplorationInput {
            amplitudes: vec![],
            frequencies: vec![],
            phases: vec![],
            noise_std: T::zero(),
        }
    }

    pub fn deterministic_value(&self, t: T, channel: usize) -> T {
        let offset = lit::<T>(0.7) * lit::<T>(channel as f64);
        let mut acc = T::zero();
        for i in 0..self.amplitudes.len() {
            acc += self.amplitudes[i] * (self.frequencies[i] * t + self.phases[i] + offset).sin();
        }
        acc
    }

    fn validate(&self) -> Result<()> {
        if self.amplitudes.len() != self.frequencies.len()
            || self.amplitudes.len() != self.phases.len()
        {
            return Err(SlqError::InvalidConfig(
                "exploration amplitude, frequency and phase lists must have equal length".into(),
            ));
        }
        if self.noise_std < T::zero() {
            return Err(SlqError::InvalidConfig(
                "exploration noise level must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// six incommensurate tones (square roots of primes) at unit amplitude with
/// golden-ratio phase spacing and mild jitter; rich enough for the rank
/// condition on every system size this crate targets
pub fn default_exploration<T: Real>() -> ExplorationInput<T> {
    let primes = [2.0f64, 3.0, 5.0, 7.0, 11.0, 13.0];
    let golden = 0.618_033_988_749_894_9_f64;
    ExplorationInput {
        amplitudes: vec![T::one(); primes.len()],
        frequencies: primes.iter().map(|p| lit(p.sqrt())).collect(),
        phases: (1..=primes.len())
            .map(|i| lit(std::f64::consts::TAU * ((i as f64 * golden) % 1.0)))
            .collect(),
        noise_std: lit(0.01),
    }
}

/// uniform collection grid 0, h, 2h, ..., intervals * h
pub fn collection_grid<T: Real>(intervals: usize, interval_length: T) -> Result<Vec<T>> {
    if intervals == 0 || interval_length <= T::zero() {
        return Err(SlqError::InvalidConfig(
            "collection grid needs at least one interval of positive length".into(),
        ));
    }
    Ok((0..=intervals)
        .map(|i| interval_length * lit(i as f64))
        .collect())
}

/// a simulated ensemble, stored at full step resolution; `times` are the
/// collection endpoints, each aligned to the step lattice at `step_index`
#[derive(Clone, Debug)]
pub struct TrajectoryEnsemble<T: Real> {
    pub(crate) times: Vec<T>,
    pub(crate) dt: T,
    pub(crate) seed: u64,
    pub(crate) step_index: Vec<usize>,
    /// per path: state_dim x (total_steps + 1)
    pub(crate) states: Vec<DMatrix<T>>,
    /// per path: input_dim x (total_steps + 1)
    pub(crate) inputs: Vec<DMatrix<T>>,
}

impl<T: Real> TrajectoryEnsemble<T> {
    pub fn paths(&self) -> usize {
        self.states.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].nrows()
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn step_indices(&self) -> &[usize] {
        &self.step_index
    }

    pub fn states(&self) -> &[DMatrix<T>] {
        &self.states
    }

    pub fn inputs(&self) -> &[DMatrix<T>] {
        &self.inputs
    }

    /// one row per (path, step): path, step, t, x..., u...
    pub fn export_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.state_dim();
        let m = self.input_dim();
        let mut header = vec!["path".to_string(), "step".to_string(), "t".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for (p, (xs, us)) in self.states.iter().zip(&self.inputs).enumerate() {
            for k in 0..xs.ncols() {
                record.clear();
                record.push(p.to_string());
                record.push(k.to_string());
                let t = self.dt * lit::<T>(k as f64);
                record.push(format!("{:?}", t.to_f64().unwrap_or(f64::NAN)));
                for i in 0..n {
                    record.push(format!("{:?}", xs[(i, k)].to_f64().unwrap_or(f64::NAN)));
                }
                for i in 0..m {
                    record.push(format!("{:?}", us[(i, k)].to_f64().unwrap_or(f64::NAN)));
                }
                w.write_record(&record)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// maps each grid time onto the step lattice, rejecting off-lattice points
fn lattice_steps<T: Real>(grid: &[T], dt: T) -> Result<Vec<usize>> {
    if grid.len() < 2 {
        return Err(SlqError::InvalidConfig(
            "collection grid needs at least two endpoints".into(),
        ));
    }
    if grid[0] != T::zero() {
        return Err(SlqError::InvalidConfig(
            "collection grid must start at time zero".into(),
        ));
    }
    let mut steps = Vec::with_capacity(grid.len());
    let mut prev = None;
    for &t in grid {
        let ratio = (t / dt).to_f64().ok_or_else(|| {
            SlqError::InvalidConfig("grid time not representable".into())
        })?;
        let s = ratio.round();
        if (ratio - s).abs() > 1e-6 * s.abs().max(1.0) {
            return Err(SlqError::InvalidConfig(format!(
                "grid time {ratio:.6}*dt does not lie on the step lattice"
            )));
        }
        let s = s as usize;
        if prev.is_some_and(|p| s <= p) {
            return Err(SlqError::InvalidConfig(
                "collection grid times must be strictly increasing".into(),
            ));
        }
        prev = Some(s);
        steps.push(s);
    }
    Ok(steps)
}

/// simulates `cfg.paths` independent Euler-Maruyama paths of the open-loop
/// system driven by the exploration input, from the model's initial state.
/// Path p draws from a dedicated stream keyed by (seed, p): results do not
/// depend on thread scheduling, and path p is identical in any ensemble of
/// size > p with the same seed.
pub fn simulate_open_loop<T: Real>(
    model: &SlqModel<T>,
    exploration: &ExplorationInput<T>,
    grid: &[T],
    cfg: &SimConfig<T>,
) -> Result<TrajectoryEnsemble<T>> {
    exploration.validate()?;
    if cfg.dt <= T::zero() || cfg.paths == 0 {
        return Err(SlqError::InvalidConfig(
            "simulation needs positive dt and at least one path".into(),
        ));
    }
    let step_index = lattice_steps(grid, cfg.dt)?;
    let total = *step_index.last().unwrap();
    let n = model.state_dim();
    let m = model.input_dim();

    let runs: Vec<(DMatrix<T>, DMatrix<T>)> = (0..cfg.paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = PathNormals::new(cfg.seed, path as u64);
            let mut xs = DMatrix::<T>::zeros(n, total + 1);
            let mut us = DMatrix::<T>::zeros(m, total + 1);
            let mut x = model.x0().clone();
            let mut u = DVector::<T>::zeros(m);
            let mut drift = DVector::<T>::zeros(n);
            let mut diff = DVector::<T>::zeros(n);
            let sqrt_dt = cfg.dt.sqrt();
            for k in 0..=total {
                let t = cfg.dt * lit::<T>(k as f64);
                for ch in 0..m {
                    // the jitter draw is consumed even at noise 0 so that the
                    // Brownian sequence does not depend on the noise setting
                    let z: T = rng.next_normal();
                    u[ch] = exploration.deterministic_value(t, ch) + exploration.noise_std * z;
                }
                us.set_column(k, &u);
                xs.set_column(k, &x);
                if k < total {
                    let z: T = rng.next_normal();
                    drift.gemv(T::one(), model.a(), &x, T::zero());
                    drift.gemv(T::one(), model.b(), &u, T::one());
                    diff.gemv(T::one(), model.c(), &x, T::zero());
                    diff.gemv(T::one(), model.d(), &u, T::one());
                    x.axpy(cfg.dt, &drift, T::one());
                    x.axpy(sqrt_dt * z, &diff, T::one());
                }
            }
            (xs, us)
        })
        .collect();

    let (states, inputs) = runs.into_iter().unzip();
    Ok(TrajectoryEnsemble {
        times: grid.to_vec(),
        dt: cfg.dt,
        seed: cfg.seed,
        step_index,
        states,
        inputs,
    })
}

#[derive(Clone, Debug)]
pub struct CostEstimate<T: Real> {
    pub estimate: T,
    pub std_error: T,
    pub paths: usize,
    pub horizon: T,
}

/// Monte-Carlo estimate of the infinite-horizon cost of u = Kx, truncated at
/// `horizon` (choose it so the mean-square decay has died out; the truncated
/// tail biases the estimate low). Refuses gains that are not mean-square
/// stabilizing, since their true cost is infinite.
pub fn evaluate_cost_mc<T: Real>(
    model: &SlqModel<T>,
    gain: &FeedbackGain<T>,
    horizon: T,
    cfg: &SimConfig<T>,
) -> Result<CostEstimate<T>> {
    if cfg.dt <= T::zero() || cfg.paths == 0 || horizon <= cfg.dt {
        return Err(SlqError::InvalidConfig(
            "cost estimation needs positive dt, paths and a horizon beyond one step".into(),
        ));
    }
    if !model.is_ms_stabilizing(gain) {
        return Err(SlqError::UnstableGain);
    }
    let ratio = (horizon / cfg.dt).to_f64().unwrap();
    let total = ratio.round();
    if (ratio - total).abs() > 1e-6 * total.max(1.0) {
        return Err(SlqError::InvalidConfig(
            "horizon must be a whole number of steps".into(),
        ));
    }
    let total = total as usize;

    let k = gain.matrix();
    let ac = model.a() + model.b() * k;
    let cc = model.c() + model.d() * k;
    // running-cost weight x'(Q + K'RK)x
    let w = model.q().as_matrix() + k.transpose() * model.r().as_matrix() * k;
    let half = lit::<T>(0.5);

    let costs: Vec<T> = (0..cfg.paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = PathNormals::new(cfg.seed, path as u64);
            let mut x = model.x0().clone();
            let mut wx = DVector::<T>::zeros(x.len());
            let mut xn = DVector::<T>::zeros(x.len());
            let sqrt_dt = cfg.dt.sqrt();
            let quad = |x: &DVector<T>, wx: &mut DVector<T>| {
                wx.gemv(T::one(), &w, x, T::zero());
                x.dot(wx)
            };
            let mut acc = half * quad(&x, &mut wx);
            for step in 1..=total {
                let z: T = rng.next_normal();
                xn.gemv(cfg.dt, &ac, &x, T::zero());
                xn.gemv(sqrt_dt * z, &cc, &x, T::one());
                x += &xn;
                let c = quad(&x, &mut wx);
                acc += if step == total { half * c } else { c };
            }
            acc * cfg.dt
        })
        .collect();

    let paths_t = lit::<T>(cfg.paths as f64);
    let mean = costs.iter().copied().fold(T::zero(), |a, b| a + b) / paths_t;
    let var = if cfg.paths > 1 {
        costs
            .iter()
            .map(|&c| (c - mean) * (c - mean))
            .fold(T::zero(), |a, b| a + b)
            / lit::<T>((cfg.paths - 1) as f64)
    } else {
        T::zero()
    };
    Ok(CostEstimate {
        estimate: mean,
        std_error: (var / paths_t).sqrt(),
        paths: cfg.paths,
        horizon,
    })
}
