//! Infinite-horizon stochastic linear-quadratic control: value-iteration
//! solvers for the generalized algebraic Riccati equation, model-based and
//! data-driven, plus the simulation, data-collection and diagnostic machinery
//! to run the data-driven variant end to end.
//!
//! Everything is generic over the working scalar (f32 or f64) through
//! [`Real`]; the `*F64`/`*F32` aliases at the root pin the common choices.

pub mod data_collect;
pub mod error;
pub mod model;
pub mod riccati;
mod rng;
pub mod scalar;
pub mod simulator;
pub mod symmat;
pub mod vi_engine;

pub use data_collect::{collect, CollectOptions, DataMatrices, ItoTriple};
pub use error::{Result, SlqError};
pub use model::{FeedbackGain, SlqModel};
pub use riccati::{
    flow_samples, gain, lyapunov_residual, riccati_map, solve_sare_oracle, OracleOptions,
};
pub use scalar::Real;
pub use simulator::{
    collection_grid, default_exploration, evaluate_cost_mc, simulate_open_loop, CostEstimate,
    ExplorationInput, Scheme, SimConfig, TrajectoryEnsemble,
};
pub use symmat::{mat_from_vecs, quad_basis, vecs, SymMatrix, VecsVector};
pub use vi_engine::{
    run, run_model_based, run_model_free, DataDrivenMap, EpsSchedule, ModelBasedMap, StepRecord,
    TrustSetFamily, ViConfig, ViMap, ViResult, ViState,
};

pub type SlqModelF64 = model::SlqModel<f64>;
pub type SlqModelF32 = model::SlqModel<f32>;
pub type SymMatrixF64 = symmat::SymMatrix<f64>;
pub type SymMatrixF32 = symmat::SymMatrix<f32>;
pub type FeedbackGainF64 = model::FeedbackGain<f64>;
pub type FeedbackGainF32 = model::FeedbackGain<f32>;
pub type ViResultF64 = vi_engine::ViResult<f64>;
pub type ViResultF32 = vi_engine::ViResult<f32>;

#[cfg(test)]
pub(crate) mod test_fixtures {
    use crate::model::SlqModel;
    use crate::symmat::SymMatrix;
    use nalgebra::{dvector, DMatrix};

    /// two-state single-input system used as the running example across the
    /// test suite
    pub fn reference_model() -> SlqModel<f64> {
        SlqModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, -0.6, 0.6, -0.3]),
            DMatrix::from_row_slice(2, 1, &[0.05, 0.01]),
            DMatrix::from_row_slice(2, 2, &[-0.02, 0.03, -0.05, 0.02]),
            DMatrix::from_row_slice(2, 1, &[0.001, 0.03]),
            DMatrix::from_row_slice(2, 2, &[0.05, 0.0, 0.0, 0.1]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            dvector![0.5, -0.1],
        )
        .unwrap()
    }

    /// known approximate stationary solution for the reference system,
    /// accurate to about 1.3e-3 in Frobenius norm
    pub fn reference_p_near() -> SymMatrix<f64> {
        SymMatrix::from_row_slice(2, &[0.2722091, -0.0427624, -0.0427624, 0.2505643]).unwrap()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn scalar_model(
        a: f64,
        b: f64,
        c: f64,
        d: f64,
        q: f64,
        r: f64,
        x0: f64,
    ) -> SlqModel<f64> {
        let one = |v: f64| DMatrix::from_row_slice(1, 1, &[v]);
        SlqModel::new(one(a), one(b), one(c), one(d), one(q), one(r), dvector![x0]).unwrap()
    }
}

#[cfg(test)]
mod generic_scalar_tests {
    use super::*;
    use nalgebra::{dvector, DMatrix};

    fn scalar_model_f32(a: f32, b: f32) -> SlqModelF32 {
        let one = |v: f32| DMatrix::from_row_slice(1, 1, &[v]);
        SlqModel::new(
            one(a),
            one(b),
            one(0.0),
            one(0.0),
            one(1.0),
            one(1.0),
            dvector![1.0f32],
        )
        .unwrap()
    }

    #[test]
    fn f32_oracle_and_iteration_agree_with_f64() {
        let model = scalar_model_f32(0.0, 1.0);
        let opts = OracleOptions {
            residual_tol: 1e-5f32,
            step_tol: 1e-6,
            ..OracleOptions::default()
        };
        let p = solve_sare_oracle(&model, &SymMatrixF32::zeros(1), &opts).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-3, "{}", p[(0, 0)]);

        let mut cfg = vi_engine::ViConfig::new(
            SymMatrixF32::identity(1),
            vi_engine::TrustSetFamily::default_for(model.q()),
        );
        cfg.stop_tol = 1e-3;
        let out = run_model_based(&model, &cfg).unwrap();
        assert!(out.converged);
        assert!((out.p_final[(0, 0)] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn f32_vectorization_round_trip() {
        let s = SymMatrixF32::from_row_slice(2, &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert_eq!(mat_from_vecs(&vecs(&s)).as_matrix(), s.as_matrix());
    }
}
