//! The generalized algebraic Riccati map, its induced gain, the closed-loop
//! Lyapunov residual, and a forward-flow oracle that locates the maximal
//! stationary solution by integrating dP/dt = riccati_map(P) to stationarity.

use nalgebra::DMatrix;

use crate::error::{Result, SlqError};
use crate::model::{FeedbackGain, SlqModel};
use crate::scalar::{lit, Real};
use crate::symmat::SymMatrix;

/// minimum eigenvalue demanded of R + D'PD (and of its data-driven counterpart)
/// before inverting it
pub const PD_FLOOR: f64 = 1e-10;

pub(crate) fn coercivity_check<T: Real>(
    s: &DMatrix<T>,
    constraint: &'static str,
) -> Result<()> {
    let min_eig = s
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(T::max_value().unwrap(), |a, b| if b < a { b } else { a });
    if min_eig <= lit(PD_FLOOR) {
        return Err(SlqError::ConstraintViolated {
            constraint,
            min_eig: min_eig.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// shared final assembly for both the model-based and data-driven maps:
/// lin + Q - N' S^-1 N with S symmetrized and checked positive definite
pub(crate) fn assemble_map<T: Real>(
    lin: DMatrix<T>,
    q: &SymMatrix<T>,
    n_mat: &DMatrix<T>,
    s: DMatrix<T>,
    constraint: &'static str,
) -> Result<SymMatrix<T>> {
    let half = lit::<T>(0.5);
    let s = (&s + s.transpose()) * half;
    coercivity_check(&s, constraint)?;
    let chol = nalgebra::Cholesky::new(s).ok_or(SlqError::ConstraintViolated {
        constraint,
        min_eig: f64::NAN,
    })?;
    let sinv_n = chol.solve(n_mat);
    let mut out = lin;
    out += q.as_matrix();
    out -= n_mat.transpose() * sinv_n;
    Ok(SymMatrix::symmetrize(out))
}

pub(crate) fn riccati_map_raw<T: Real>(
    model: &SlqModel<T>,
    p: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let (a, b, c, d) = (model.a(), model.b(), model.c(), model.d());
    let lin = a.transpose() * p + p * a + c.transpose() * p * c;
    let n_mat = b.transpose() * p + d.transpose() * p * c;
    let s = model.r().as_matrix() + d.transpose() * p * d;
    assemble_map(lin, model.q(), &n_mat, s, "input coercivity R + D'PD > 0")
        .map(SymMatrix::into_matrix)
}

/// generalized Riccati map
///   R1(P) = A'P + PA + Q + C'PC - (PB + C'PD)(R + D'PD)^-1 (B'P + D'PC);
/// errors when R + D'PD fails to be positive definite
pub fn riccati_map<T: Real>(model: &SlqModel<T>, p: &SymMatrix<T>) -> Result<SymMatrix<T>> {
    riccati_map_raw(model, p.as_matrix()).map(SymMatrix::symmetrize)
}

/// feedback gain induced by P: K = -(R + D'PD)^-1 (B'P + D'PC)
pub fn gain<T: Real>(model: &SlqModel<T>, p: &SymMatrix<T>) -> Result<FeedbackGain<T>> {
    let (b, c, d) = (model.b(), model.c(), model.d());
    let pm = p.as_matrix();
    let n_mat = b.transpose() * pm + d.transpose() * pm * c;
    let half = lit::<T>(0.5);
    let s = model.r().as_matrix() + d.transpose() * pm * d;
    let s = (&s + s.transpose()) * half;
    coercivity_check(&s, "input coercivity R + D'PD > 0")?;
    let chol = nalgebra::Cholesky::new(s).ok_or(SlqError::ConstraintViolated {
        constraint: "input coercivity R + D'PD > 0",
        min_eig: f64::NAN,
    })?;
    Ok(FeedbackGain::new(-chol.solve(&n_mat)))
}

/// closed-loop residual for an arbitrary gain:
///   R2(P, K) = (A+BK)'P + P(A+BK) + (C+DK)'P(C+DK) + Q + K'RK
pub fn lyapunov_residual<T: Real>(
    model: &SlqModel<T>,
    p: &SymMatrix<T>,
    gain: &FeedbackGain<T>,
) -> SymMatrix<T> {
    let k = gain.matrix();
    let ac = model.a() + model.b() * k;
    let cc = model.c() + model.d() * k;
    let pm = p.as_matrix();
    let out = ac.transpose() * pm
        + pm * &ac
        + cc.transpose() * pm * &cc
        + model.q().as_matrix()
        + k.transpose() * model.r().as_matrix() * k;
    SymMatrix::symmetrize(out)
}

/// controls for the forward Riccati flow oracle
#[derive(Clone, Debug)]
pub struct OracleOptions<T: Real> {
    /// give up if stationarity is not reached by this time
    pub t_end: T,
    /// declare stationarity when the Frobenius norm of the map drops below this
    pub residual_tol: T,
    /// local truncation error target per step, scaled by (1 + |P|)
    pub step_tol: T,
    /// initial step size
    pub h0: T,
    pub max_steps: usize,
}

impl<T: Real> Default for OracleOptions<T> {
    fn default() -> Self {
        OracleOptions {
            t_end: lit(200.0),
            residual_tol: lit(1e-10),
            step_tol: lit(1e-11),
            h0: lit(1e-3),
            max_steps: 2_000_000,
        }
    }
}

/// maximal stationary solution of the Riccati equation, found by running the
/// flow dP/dt = R1(P) from a positive semidefinite start until the residual
/// falls below `residual_tol`
pub fn solve_sare_oracle<T: Real>(
    model: &SlqModel<T>,
    p0: &SymMatrix<T>,
    opts: &OracleOptions<T>,
) -> Result<SymMatrix<T>> {
    let (p, _) = flow_internal(model, p0, &[], true, opts)?;
    Ok(p)
}

/// flow snapshots P(t) at the given strictly increasing positive times
pub fn flow_samples<T: Real>(
    model: &SlqModel<T>,
    p0: &SymMatrix<T>,
    times: &[T],
    opts: &OracleOptions<T>,
) -> Result<Vec<SymMatrix<T>>> {
    if times.is_empty() {
        return Err(SlqError::InvalidConfig("no sample times given".into()));
    }
    let mut prev = T::zero();
    for &t in times {
        if t <= prev {
            return Err(SlqError::InvalidConfig(
                "sample times must be strictly increasing and positive".into(),
            ));
        }
        prev = t;
    }
    let (_, samples) = flow_internal(model, p0, times, false, opts)?;
    Ok(samples)
}

// Dormand-Prince 5(4) coefficients
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B5: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn combine<T: Real>(p: &DMatrix<T>, h: T, ks: &[&DMatrix<T>], w: &[f64]) -> DMatrix<T> {
    let mut out = p.clone();
    for (k, &wi) in ks.iter().zip(w) {
        if wi != 0.0 {
            let hw = h * lit::<T>(wi);
            out.zip_apply(k, |lhs, rhs| *lhs += hw * rhs);
        }
    }
    out
}

fn flow_internal<T: Real>(
    model: &SlqModel<T>,
    p0: &SymMatrix<T>,
    sample_times: &[T],
    stop_at_stationarity: bool,
    opts: &OracleOptions<T>,
) -> Result<(SymMatrix<T>, Vec<SymMatrix<T>>)> {
    if model.state_dim() != p0.dim() {
        return Err(SlqError::Dimension(format!(
            "flow start is {}x{} but the state dimension is {}",
            p0.dim(),
            p0.dim(),
            model.state_dim()
        )));
    }
    if opts.t_end <= T::zero() || opts.residual_tol <= T::zero() || opts.step_tol <= T::zero() {
        return Err(SlqError::InvalidConfig(
            "oracle tolerances and horizon must be positive".into(),
        ));
    }
    let t_final = if stop_at_stationarity {
        opts.t_end
    } else {
        *sample_times.last().unwrap()
    };
    let h_floor = lit::<T>(1e-12) * if t_final > T::one() { t_final } else { T::one() };

    let mut p = p0.as_matrix().clone();
    let mut t = T::zero();
    let mut h = opts.h0;
    let mut samples = Vec::with_capacity(sample_times.len());
    let mut next_sample = 0usize;
    // FSAL: the last stage of an accepted step is the first stage of the next
    let mut k1 = riccati_map_raw(model, &p)?;

    for _ in 0..opts.max_steps {
        if stop_at_stationarity && k1.norm() < opts.residual_tol {
            return Ok((SymMatrix::symmetrize(p), samples));
        }
        if next_sample >= sample_times.len() && !stop_at_stationarity {
            return Ok((SymMatrix::symmetrize(p), samples));
        }
        if t >= t_final {
            break;
        }

        // clip to the next sample boundary or the horizon
        let boundary = sample_times
            .get(next_sample)
            .copied()
            .filter(|&s| s < t_final)
            .unwrap_or(t_final);
        let clipped = h >= boundary - t;
        let h_try = if clipped { boundary - t } else { h };

        match try_step(model, &p, &k1, h_try) {
            Ok((p_new, k_new, err)) => {
                let scale = opts.step_tol * (T::one() + p.norm());
                if err <= scale {
                    t = if clipped { boundary } else { t + h_try };
                    p = p_new;
                    k1 = k_new;
                    while sample_times.get(next_sample) == Some(&t) {
                        samples.push(SymMatrix::symmetrize(p.clone()));
                        next_sample += 1;
                    }
                }
                // step control with the classic safety factor
                let factor = if err > T::zero() {
                    let f = lit::<T>(0.9) * (scale / err).powf(lit(0.2));
                    f.clamp(lit(0.2), lit(5.0))
                } else {
                    lit(5.0)
                };
                let h_next = h_try * factor;
                // a step clipped to a boundary must not shrink the natural step
                if !(clipped && err <= scale && h_next < h) {
                    h = h_next;
                }
                if h < h_floor {
                    h = h_floor;
                }
            }
            Err(e @ SlqError::ConstraintViolated { .. }) => {
                // a trial stage left the coercive region; retry smaller
                h = h_try * lit(0.25);
                if h < h_floor {
                    return Err(e);
                }
            }
            Err(e) => return Err(e),
        }
    }

    if t >= t_final && !stop_at_stationarity && next_sample >= sample_times.len() {
        return Ok((SymMatrix::symmetrize(p), samples));
    }
    Err(SlqError::ConvergenceFailure(format!(
        "Riccati flow did not reach stationarity by t = {:.1} (residual {:.3e}, {} of {} samples taken)",
        t.to_f64().unwrap_or(f64::NAN),
        k1.norm().to_f64().unwrap_or(f64::NAN),
        next_sample,
        sample_times.len(),
    )))
}

type StepOutcome<T> = (DMatrix<T>, DMatrix<T>, T);

/// one embedded 5(4) step; returns (P_next, map(P_next), error estimate)
fn try_step<T: Real>(
    model: &SlqModel<T>,
    p: &DMatrix<T>,
    k1: &DMatrix<T>,
    h: T,
) -> Result<StepOutcome<T>> {
    let f = |m: &DMatrix<T>| riccati_map_raw(model, m);
    let k2 = f(&combine(p, h, &[k1], &A2))?;
    let k3 = f(&combine(p, h, &[k1, &k2], &A3))?;
    let k4 = f(&combine(p, h, &[k1, &k2, &k3], &A4))?;
    let k5 = f(&combine(p, h, &[k1, &k2, &k3, &k4], &A5))?;
    let k6 = f(&combine(p, h, &[k1, &k2, &k3, &k4, &k5], &A6))?;
    let p5 = combine(p, h, &[k1, &k2, &k3, &k4, &k5, &k6], &B5);
    let k7 = f(&p5)?;
    let p4 = combine(p, h, &[k1, &k2, &k3, &k4, &k5, &k6, &k7], &B4);
    let err = (&p5 - p4).norm();
    // keep the iterate exactly symmetric so drift cannot accumulate
    let half = lit::<T>(0.5);
    let p5 = (&p5 + p5.transpose()) * half;
    Ok((p5, k7, err))
}
