//! The value-iteration drivers: one stochastic-approximation loop with
//! trust-set projection and resets, driven either by the model-based Riccati
//! map or by the data-driven map recovered from collected trajectories.

use crate::data_collect::DataMatrices;
use crate::error::{Result, SlqError};
use crate::model::{FeedbackGain, SlqModel};
use crate::riccati::{assemble_map, coercivity_check, gain as model_gain, riccati_map};
use crate::scalar::{lit, Real};
use crate::symmat::SymMatrix;

/// diminishing steps eps_k = a / (k + 1 + b)^gamma; gamma in (1/2, 1] keeps
/// the sum divergent while the squares stay summable
#[derive(Clone, Debug)]
pub struct EpsSchedule<T: Real> {
    pub a: T,
    pub b: T,
    pub gamma: T,
}

impl<T: Real> Default for EpsSchedule<T> {
    fn default() -> Self {
        EpsSchedule {
            a: T::one(),
            b: T::zero(),
            gamma: lit(0.7),
        }
    }
}

impl<T: Real> EpsSchedule<T> {
    pub fn value(&self, k: usize) -> T {
        self.a / (lit::<T>(k as f64) + T::one() + self.b).powf(self.gamma)
    }

    fn validate(&self) -> Result<()> {
        if self.a <= T::zero() {
            return Err(SlqError::InvalidConfig(
                "step scale a must be positive".into(),
            ));
        }
        if self.b < T::zero() {
            return Err(SlqError::InvalidConfig(
                "step offset b must be nonnegative".into(),
            ));
        }
        if self.gamma <= lit(0.5) || self.gamma > T::one() {
            return Err(SlqError::InvalidConfig(
                "step exponent gamma must lie in (0.5, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// nested trust sets D_q: positive semidefinite matrices with Frobenius norm
/// at most r0 * growth^q; they exhaust the PSD cone as q grows
#[derive(Clone, Debug)]
pub struct TrustSetFamily<T: Real> {
    pub r0: T,
    pub growth: T,
}

impl<T: Real> TrustSetFamily<T> {
    /// conventional radius tied to the cost scale
    pub fn default_for(q_weight: &SymMatrix<T>) -> Self {
        TrustSetFamily {
            r0: lit::<T>(10.0) * (T::one() + q_weight.norm()),
            growth: lit(2.0),
        }
    }

    pub fn radius(&self, q: usize) -> T {
        self.r0 * self.growth.powi(q as i32)
    }

    pub fn contains(&self, p: &SymMatrix<T>, q: usize) -> bool {
        // tiny scaled slack so round-off at the PSD boundary cannot trigger
        // spurious resets
        let slack = lit::<T>(-1e-12) * (T::one() + p.norm());
        p.min_eigenvalue() >= slack && p.norm() <= self.radius(q)
    }

    fn validate(&self) -> Result<()> {
        if self.r0 <= T::zero() || self.growth <= T::one() {
            return Err(SlqError::InvalidConfig(
                "trust radius must be positive and growth above one".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ViConfig<T: Real> {
    pub schedule: EpsSchedule<T>,
    pub trust: TrustSetFamily<T>,
    /// stop once |P~_{k+1} - P_k| / eps_k falls below this
    pub stop_tol: T,
    pub max_iter: usize,
    pub p0: SymMatrix<T>,
}

impl<T: Real> ViConfig<T> {
    /// defaults: unit-scale schedule, stop at 1e-5, generous iteration budget
    pub fn new(p0: SymMatrix<T>, trust: TrustSetFamily<T>) -> Self {
        ViConfig {
            schedule: EpsSchedule::default(),
            trust,
            stop_tol: lit(1e-5),
            max_iter: 100_000,
            p0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.trust.validate()?;
        if self.stop_tol <= T::zero() {
            return Err(SlqError::InvalidConfig(
                "stopping tolerance must be positive".into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(SlqError::InvalidConfig(
                "iteration budget must be positive".into(),
            ));
        }
        if self.p0.min_eigenvalue() <= T::zero() {
            return Err(SlqError::InvalidConfig(
                "initial iterate must be positive definite".into(),
            ));
        }
        if !self.trust.contains(&self.p0, 0) {
            return Err(SlqError::InvalidConfig(
                "initial iterate lies outside the first trust set; raise r0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ViState<T: Real> {
    pub p: SymMatrix<T>,
    pub k: usize,
    pub q: usize,
    pub resets: usize,
}

impl<T: Real> ViState<T> {
    pub fn new(p0: SymMatrix<T>) -> Self {
        ViState {
            p: p0,
            k: 0,
            q: 0,
            resets: 0,
        }
    }
}

/// one row of the iteration log; `residual` is |P~_{k+1} - P_k| / eps_k, which
/// equals the norm of the map at P_k (infinite when the map was not evaluable)
#[derive(Clone, Debug)]
pub struct StepRecord<T: Real> {
    pub k: usize,
    pub eps: T,
    pub residual: T,
    pub q: usize,
    pub reset: bool,
}

/// the update direction of the iteration: the Riccati map, evaluated either
/// from the model or from data
pub trait ViMap<T: Real> {
    fn eval(&self, p: &SymMatrix<T>) -> Result<SymMatrix<T>>;
    /// feedback gain implied at P, for reporting the final controller
    fn gain_at(&self, p: &SymMatrix<T>) -> Result<FeedbackGain<T>>;
}

pub struct ModelBasedMap<'a, T: Real> {
    model: &'a SlqModel<T>,
}

impl<'a, T: Real> ModelBasedMap<'a, T> {
    pub fn new(model: &'a SlqModel<T>) -> Self {
        ModelBasedMap { model }
    }
}

impl<T: Real> ViMap<T> for ModelBasedMap<'_, T> {
    fn eval(&self, p: &SymMatrix<T>) -> Result<SymMatrix<T>> {
        riccati_map(self.model, p)
    }

    fn gain_at(&self, p: &SymMatrix<T>) -> Result<FeedbackGain<T>> {
        model_gain(self.model, p)
    }
}

/// update direction recovered from collected data: M + Q - N'(R + H)^-1 N with
/// (M, N, H) the data-implied triple at P; never reads the system matrices
pub struct DataDrivenMap<'a, T: Real> {
    data: &'a DataMatrices<T>,
    q_weight: SymMatrix<T>,
    r_weight: SymMatrix<T>,
}

impl<'a, T: Real> DataDrivenMap<'a, T> {
    pub fn new(
        data: &'a DataMatrices<T>,
        q_weight: SymMatrix<T>,
        r_weight: SymMatrix<T>,
    ) -> Result<Self> {
        if !data.rank_ok() {
            return Err(SlqError::RankCondition(format!(
                "cannot iterate on rank-deficient data ({} intervals for {} unknowns, \
                 singular values {:.3e} .. {:.3e})",
                data.intervals(),
                data.unknown_count(),
                data.min_singular_value().to_f64().unwrap_or(f64::NAN),
                data.max_singular_value().to_f64().unwrap_or(f64::NAN),
            )));
        }
        if q_weight.dim() != data.state_dim() || r_weight.dim() != data.input_dim() {
            return Err(SlqError::Dimension(
                "weight dimensions do not match the collected data".into(),
            ));
        }
        Ok(DataDrivenMap {
            data,
            q_weight,
            r_weight,
        })
    }
}

impl<T: Real> ViMap<T> for DataDrivenMap<'_, T> {
    fn eval(&self, p: &SymMatrix<T>) -> Result<SymMatrix<T>> {
        let triple = self.data.recover_triple(p)?;
        let s = self.r_weight.as_matrix() + triple.h.as_matrix();
        assemble_map(
            triple.m.into_matrix(),
            &self.q_weight,
            &triple.n,
            s,
            "input coercivity R + H > 0",
        )
    }

    fn gain_at(&self, p: &SymMatrix<T>) -> Result<FeedbackGain<T>> {
        let triple = self.data.recover_triple(p)?;
        let half = lit::<T>(0.5);
        let s = self.r_weight.as_matrix() + triple.h.as_matrix();
        let s = (&s + s.transpose()) * half;
        coercivity_check(&s, "input coercivity R + H > 0")?;
        let chol = nalgebra::Cholesky::new(s).ok_or(SlqError::ConstraintViolated {
            constraint: "input coercivity R + H > 0",
            min_eig: f64::NAN,
        })?;
        Ok(FeedbackGain::new(-chol.solve(&triple.n)))
    }
}

/// one iteration: P~ = P + eps_k * map(P), kept if it stays in the current
/// trust set, otherwise the iterate is reset to P0 and the trust set grows.
/// A coercivity failure inside the map is treated exactly like a trust-set
/// exit, since it can only come from an iterate the projection was about to
/// reject. Hard errors (rank condition, dimensions) propagate.
pub fn vi_step<T: Real, M: ViMap<T>>(
    map: &M,
    state: &mut ViState<T>,
    cfg: &ViConfig<T>,
) -> Result<StepRecord<T>> {
    let eps = cfg.schedule.value(state.k);
    let record = match map.eval(&state.p) {
        Ok(direction) => {
            let residual = direction.norm();
            let candidate = state.p.add_scaled(&direction, eps);
            if cfg.trust.contains(&candidate, state.q) {
                state.p = candidate;
                StepRecord {
                    k: state.k,
                    eps,
                    residual,
                    q: state.q,
                    reset: false,
                }
            } else {
                state.p = cfg.p0.clone();
                state.q += 1;
                state.resets += 1;
                log::debug!(
                    "step {}: iterate left trust set {}; reset to P0",
                    state.k,
                    state.q - 1
                );
                StepRecord {
                    k: state.k,
                    eps,
                    residual,
                    q: state.q,
                    reset: true,
                }
            }
        }
        Err(SlqError::ConstraintViolated {
            constraint,
            min_eig,
        }) => {
            log::warn!(
                "step {}: {constraint} failed (min eigenvalue {min_eig:.3e}); reset to P0",
                state.k
            );
            state.p = cfg.p0.clone();
            state.q += 1;
            state.resets += 1;
            StepRecord {
                k: state.k,
                eps,
                residual: lit(f64::INFINITY),
                q: state.q,
                reset: true,
            }
        }
        Err(other) => return Err(other),
    };
    state.k += 1;
    debug_assert!(
        cfg.trust.contains(&state.p, state.q),
        "iterate escaped its trust set"
    );
    Ok(record)
}

pub fn vi_step_model_based<T: Real>(
    model: &SlqModel<T>,
    state: &mut ViState<T>,
    cfg: &ViConfig<T>,
) -> Result<StepRecord<T>> {
    vi_step(&ModelBasedMap::new(model), state, cfg)
}

pub fn vi_step_model_free<T: Real>(
    data: &DataMatrices<T>,
    q_weight: &SymMatrix<T>,
    r_weight: &SymMatrix<T>,
    state: &mut ViState<T>,
    cfg: &ViConfig<T>,
) -> Result<StepRecord<T>> {
    let map = DataDrivenMap::new(data, q_weight.clone(), r_weight.clone())?;
    vi_step(&map, state, cfg)
}

#[derive(Clone, Debug)]
pub struct ViResult<T: Real> {
    pub p_final: SymMatrix<T>,
    /// gain implied at the final iterate; absent when the run stopped without
    /// converging at a point where no gain is defined
    pub k_final: Option<FeedbackGain<T>>,
    pub iterations: usize,
    pub resets: usize,
    pub converged: bool,
    pub history: Vec<StepRecord<T>>,
}

/// iterates until the stopping rule fires or the budget runs out. The stop
/// check is skipped on reset iterations: the candidate that produced the
/// residual was discarded, so it says nothing about stationarity.
pub fn run<T: Real, M: ViMap<T>>(map: &M, cfg: &ViConfig<T>) -> Result<ViResult<T>> {
    cfg.validate()?;
    let mut state = ViState::new(cfg.p0.clone());
    let mut history = Vec::new();
    let mut converged = false;
    while state.k < cfg.max_iter {
        let record = vi_step(map, &mut state, cfg)?;
        let stop = !record.reset && record.residual < cfg.stop_tol;
        history.push(record);
        if stop {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "value iteration exhausted {} iterations (last residual {:.3e}, {} resets)",
            cfg.max_iter,
            history
                .last()
                .map(|r| r.residual.to_f64().unwrap_or(f64::NAN))
                .unwrap_or(f64::NAN),
            state.resets
        );
    }
    let k_final = match map.gain_at(&state.p) {
        Ok(k) => Some(k),
        Err(e) => {
            if converged {
                return Err(e);
            }
            log::warn!("no gain at the final iterate: {e}");
            None
        }
    };
    Ok(ViResult {
        p_final: state.p,
        k_final,
        iterations: state.k,
        resets: state.resets,
        converged,
        history,
    })
}

pub fn run_model_based<T: Real>(model: &SlqModel<T>, cfg: &ViConfig<T>) -> Result<ViResult<T>> {
    run(&ModelBasedMap::new(model), cfg)
}

pub fn run_model_free<T: Real>(
    data: &DataMatrices<T>,
    q_weight: &SymMatrix<T>,
    r_weight: &SymMatrix<T>,
    cfg: &ViConfig<T>,
) -> Result<ViResult<T>> {
    let map = DataDrivenMap::new(data, q_weight.clone(), r_weight.clone())?;
    run(&map, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_collect::synthetic::{exact_data, SyntheticDataOptions};
    use crate::test_fixtures::{reference_model, reference_p_near, scalar_model};
    use nalgebra::DMatrix;
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    fn unit_trust() -> TrustSetFamily<f64> {
        TrustSetFamily {
            r0: 10.0,
            growth: 2.0,
        }
    }

    #[test]
    fn schedule_values_and_validation() {
        let s = EpsSchedule::<f64>::default();
        assert_eq!(s.value(0), 1.0);
        assert!(s.value(1) < s.value(0));
        // divergence of the partial sums is structural (gamma <= 1); spot-check
        // that they keep growing well past any small bound
        let sum: f64 = (0..10_000).map(|k| s.value(k)).sum();
        assert!(sum > 50.0);

        for bad in [
            EpsSchedule { a: 0.0, b: 0.0, gamma: 0.7 },
            EpsSchedule { a: 1.0, b: -0.1, gamma: 0.7 },
            EpsSchedule { a: 1.0, b: 0.0, gamma: 0.5 },
            EpsSchedule { a: 1.0, b: 0.0, gamma: 1.01 },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn trust_sets_nest_and_exhaust() {
        let family = unit_trust();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let uniform = |r: &mut ChaCha8Rng| (r.next_u64() >> 11) as f64 / (1u64 << 52) as f64 - 1.0;
        for trial in 0..100 {
            let n = trial % 4 + 1;
            let scale = 10f64.powi(trial as i32 % 7 - 3);
            let g = DMatrix::from_fn(n, n, |_, _| scale * uniform(&mut rng));
            let p = SymMatrix::symmetrize(&g * g.transpose());
            let mut member_somewhere = false;
            let mut prev = false;
            for q in 0..64 {
                let now = family.contains(&p, q);
                assert!(!prev || now, "nesting violated at q = {q}");
                prev = now;
                member_somewhere |= now;
            }
            assert!(member_somewhere, "PSD matrix of norm {:.3e} never admitted", p.norm());
        }

        assert!(family.contains(&SymMatrix::zeros(3), 0));
        assert!(!family.contains(&SymMatrix::scaled_identity(3, -1.0), 5));
        // radius boundary: just over r0 * 2^q in norm
        let q = 3usize;
        let r = family.radius(q);
        let p = SymMatrix::scaled_identity(2, (r + 1e-6) / 2f64.sqrt());
        assert!(!family.contains(&p, q));
        assert!(family.contains(&p, q + 1));
    }

    #[test]
    fn config_validation() {
        let trust = unit_trust();
        let ok = ViConfig::new(SymMatrix::identity(2), trust.clone());
        assert!(ok.validate().is_ok());

        let mut not_pd = ok.clone();
        not_pd.p0 = SymMatrix::zeros(2);
        assert!(not_pd.validate().is_err());

        let mut outside = ok.clone();
        outside.p0 = SymMatrix::scaled_identity(2, 100.0);
        assert!(outside.validate().is_err());

        let mut bad_stop = ok.clone();
        bad_stop.stop_tol = 0.0;
        assert!(bad_stop.validate().is_err());

        let mut bad_trust = ok;
        bad_trust.trust.growth = 1.0;
        assert!(bad_trust.validate().is_err());
    }

    #[test]
    fn scalar_run_converges_to_the_fixed_point() {
        let model = scalar_model(-1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0);
        let mut cfg = ViConfig::new(
            SymMatrix::scaled_identity(1, 0.1),
            TrustSetFamily::default_for(model.q()),
        );
        cfg.schedule.a = 0.5;
        cfg.stop_tol = 1e-6;
        let out = run_model_based(&model, &cfg).unwrap();
        assert!(out.converged);
        assert_eq!(out.resets, 0);
        assert!((out.p_final[(0, 0)] - 0.5).abs() < 1e-5, "{}", out.p_final[(0, 0)]);
        assert_eq!(out.history.len(), out.iterations);
    }

    #[test]
    fn converged_start_stops_immediately() {
        let model = scalar_model(0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0);
        let cfg = ViConfig::new(
            SymMatrix::identity(1),
            TrustSetFamily::default_for(model.q()),
        );
        let out = run_model_based(&model, &cfg).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 2);
        assert!((out.k_final.unwrap().matrix()[(0, 0)] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn uncontrollable_growth_exhausts_the_budget() {
        // x' = x with no control and no noise: the map 2P + Q is positive,
        // iterates only grow, and every trust set is eventually left
        let model = scalar_model(1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0);
        let mut cfg = ViConfig::new(
            SymMatrix::identity(1),
            TrustSetFamily { r0: 5.0, growth: 2.0 },
        );
        cfg.max_iter = 300;
        let out = run_model_based(&model, &cfg).unwrap();
        assert!(!out.converged);
        assert!(out.resets >= 1);
        assert_eq!(out.iterations, 300);
    }

    struct ScriptedMap {
        fail_first: Cell<bool>,
        direction: SymMatrix<f64>,
    }

    impl ViMap<f64> for ScriptedMap {
        fn eval(&self, _p: &SymMatrix<f64>) -> crate::error::Result<SymMatrix<f64>> {
            if self.fail_first.take() {
                return Err(SlqError::ConstraintViolated {
                    constraint: "input coercivity R + H > 0",
                    min_eig: -1.0,
                });
            }
            Ok(self.direction.clone())
        }

        fn gain_at(&self, _p: &SymMatrix<f64>) -> crate::error::Result<FeedbackGain<f64>> {
            Ok(FeedbackGain::zeros(1, 1))
        }
    }

    #[test]
    fn coercivity_failure_resets_and_is_not_a_stop() {
        let map = ScriptedMap {
            fail_first: Cell::new(true),
            direction: SymMatrix::scaled_identity(1, 1e-9),
        };
        let cfg = ViConfig::new(SymMatrix::identity(1), unit_trust());
        let out = run(&map, &cfg).unwrap();
        assert!(out.converged);
        assert_eq!(out.resets, 1);
        assert!(out.history[0].reset);
        assert!(out.history[0].residual.is_infinite());
        assert_eq!(out.iterations, 2);
    }

    #[test]
    fn trust_exit_with_small_residual_does_not_stop() {
        // start on the boundary of D_0; the first tiny step leaves it, so the
        // small residual of that discarded candidate must not end the run
        let map = ScriptedMap {
            fail_first: Cell::new(false),
            direction: SymMatrix::scaled_identity(1, 1e-3),
        };
        let cfg = ViConfig {
            schedule: EpsSchedule::default(),
            trust: TrustSetFamily { r0: 1.0, growth: 2.0 },
            stop_tol: 1e-2,
            max_iter: 50,
            p0: SymMatrix::identity(1),
        };
        let out = run(&map, &cfg).unwrap();
        assert!(out.converged);
        assert_eq!(out.resets, 1);
        assert!(out.history[0].reset, "first step must reset, not stop");
        assert!(!out.history[1].reset);
        assert_eq!(out.iterations, 2);
    }

    #[test]
    fn reference_run_lands_near_the_known_solution() {
        let model = reference_model();
        let cfg = ViConfig::new(
            SymMatrix::identity(2),
            TrustSetFamily::default_for(model.q()),
        );
        let out = run_model_based(&model, &cfg).unwrap();
        assert!(out.converged);
        assert_eq!(out.resets, 0);
        let err = out.p_final.sub(&reference_p_near()).norm();
        assert!(err < 2e-3, "distance to the known solution {err:.3e}");
        let k = out.k_final.unwrap();
        assert!(model.is_ms_stabilizing(&k));
    }

    #[test]
    fn exact_data_walks_in_lockstep_with_the_model() {
        let model = reference_model();
        let data = exact_data(&model, &SyntheticDataOptions::for_dims(2, 1)).unwrap();
        let df = DataDrivenMap::new(&data, model.q().clone(), model.r().clone()).unwrap();
        let mb = ModelBasedMap::new(&model);
        let cfg = ViConfig::new(
            SymMatrix::identity(2),
            TrustSetFamily::default_for(model.q()),
        );
        let mut sa = ViState::new(cfg.p0.clone());
        let mut sb = ViState::new(cfg.p0.clone());
        for _ in 0..10 {
            vi_step(&mb, &mut sa, &cfg).unwrap();
            vi_step(&df, &mut sb, &cfg).unwrap();
            let gap = sa.p.sub(&sb.p).norm();
            assert!(gap < 1e-12, "iterates diverged by {gap:.3e}");
        }
    }

    #[test]
    fn model_free_requires_the_rank_condition() {
        let model = reference_model();
        // a single interval cannot satisfy the rank condition
        let data = exact_data(
            &model,
            &SyntheticDataOptions {
                intervals: 2,
                interval_length: 0.5,
                degree: 2,
                seed: 7,
            },
        )
        .unwrap();
        assert!(!data.rank_ok());
        let cfg = ViConfig::new(
            SymMatrix::identity(2),
            TrustSetFamily::default_for(model.q()),
        );
        let err = run_model_free(&data, model.q(), model.r(), &cfg).unwrap_err();
        assert!(matches!(err, SlqError::RankCondition(_)), "{err}");
    }
}
