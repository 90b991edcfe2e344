//! Problem data for the stochastic linear-quadratic regulator and closed-loop
//! diagnostics: mean-square stability and exact infinite-horizon cost of a gain.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SlqError};
use crate::scalar::{lit, Real};
use crate::symmat::{kron, vec, SymMatrix};

/// controlled linear diffusion
///   dx = (A x + B u) ds + (C x + D u) dw
/// with running cost E integral of (u'Ru + x'Qx), scalar Brownian motion w,
/// and a fixed initial state used by cost diagnostics
#[derive(Clone, Debug)]
pub struct SlqModel<T: Real> {
    a: DMatrix<T>,
    b: DMatrix<T>,
    c: DMatrix<T>,
    d: DMatrix<T>,
    q: SymMatrix<T>,
    r: SymMatrix<T>,
    x0: DVector<T>,
}

impl<T: Real> SlqModel<T> {
    /// validates dimensions, Q >= 0 and R > 0; Q and R are symmetrized on entry
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<T>,
        b: DMatrix<T>,
        c: DMatrix<T>,
        d: DMatrix<T>,
        q: DMatrix<T>,
        r: DMatrix<T>,
        x0: DVector<T>,
    ) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        if n == 0 || m == 0 {
            return Err(SlqError::Dimension(
                "state and input dimensions must be positive".into(),
            ));
        }
        let expect = |name: &str, rows: usize, cols: usize, got_r: usize, got_c: usize| {
            if (rows, cols) == (got_r, got_c) {
                Ok(())
            } else {
                Err(SlqError::Dimension(format!(
                    "{name} must be {rows}x{cols}, got {got_r}x{got_c}"
                )))
            }
        };
        expect("A", n, n, a.nrows(), a.ncols())?;
        expect("B", n, m, b.nrows(), b.ncols())?;
        expect("C", n, n, c.nrows(), c.ncols())?;
        expect("D", n, m, d.nrows(), d.ncols())?;
        expect("Q", n, n, q.nrows(), q.ncols())?;
        expect("R", m, m, r.nrows(), r.ncols())?;
        expect("x0", n, 1, x0.nrows(), 1)?;

        let q = SymMatrix::new(q)?;
        let r = SymMatrix::new(r)?;

        let q_min = q.min_eigenvalue();
        if q_min < lit(-1e-10) {
            return Err(SlqError::ConstraintViolated {
                constraint: "state weight Q >= 0",
                min_eig: q_min.to_f64().unwrap_or(f64::NAN),
            });
        }
        if q_min < lit::<T>(1e-8) * (T::one() + q.norm()) {
            log::warn!(
                "state weight Q is singular or near-singular (min eigenvalue {:.3e}); \
                 solvers assume the unweighted modes are detectable",
                q_min.to_f64().unwrap_or(f64::NAN)
            );
        }
        let r_min = r.min_eigenvalue();
        if r_min <= T::zero() {
            return Err(SlqError::ConstraintViolated {
                constraint: "input weight R > 0",
                min_eig: r_min.to_f64().unwrap_or(f64::NAN),
            });
        }

        Ok(SlqModel {
            a,
            b,
            c,
            d,
            q,
            r,
            x0,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<T> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<T> {
        &self.c
    }

    pub fn d(&self) -> &DMatrix<T> {
        &self.d
    }

    pub fn q(&self) -> &SymMatrix<T> {
        &self.q
    }

    pub fn r(&self) -> &SymMatrix<T> {
        &self.r
    }

    pub fn x0(&self) -> &DVector<T> {
        &self.x0
    }

    /// generator of the second-moment flow under u = Kx:
    ///   L = I (x) Ac + Ac (x) I + Cc (x) Cc,  Ac = A + BK, Cc = C + DK.
    /// The closed loop is mean-square stable iff every eigenvalue of L has
    /// negative real part.
    pub fn closed_loop_generator(&self, gain: &FeedbackGain<T>) -> DMatrix<T> {
        let k = gain.matrix();
        assert_eq!(k.nrows(), self.input_dim(), "gain row count");
        assert_eq!(k.ncols(), self.state_dim(), "gain column count");
        let ac = &self.a + &self.b * k;
        let cc = &self.c + &self.d * k;
        let id = DMatrix::identity(self.state_dim(), self.state_dim());
        kron(&id, &ac) + kron(&ac, &id) + kron(&cc, &cc)
    }

    pub fn is_ms_stabilizing(&self, gain: &FeedbackGain<T>) -> bool {
        self.is_ms_stabilizing_with_margin(gain, T::zero())
    }

    /// requires every eigenvalue real part to be below -margin
    pub fn is_ms_stabilizing_with_margin(&self, gain: &FeedbackGain<T>, margin: T) -> bool {
        self.closed_loop_generator(gain)
            .complex_eigenvalues()
            .iter()
            .all(|ev| ev.re < -margin)
    }

    /// unique solution P of the closed-loop Lyapunov equation
    ///   Ac'P + P Ac + Cc'P Cc + Q + K'RK = 0,
    /// so that the infinite-horizon cost of u = Kx from x0 is x0'P x0
    pub fn closed_loop_lyapunov(&self, gain: &FeedbackGain<T>) -> Result<SymMatrix<T>> {
        if !self.is_ms_stabilizing(gain) {
            return Err(SlqError::UnstableGain);
        }
        let k = gain.matrix();
        let n = self.state_dim();
        let ac_t = (&self.a + &self.b * k).transpose();
        let cc_t = (&self.c + &self.d * k).transpose();
        let id = DMatrix::identity(n, n);
        let lhs = kron(&id, &ac_t) + kron(&ac_t, &id) + kron(&cc_t, &cc_t);
        let rhs = -(self.q.as_matrix() + k.transpose() * self.r.as_matrix() * k);
        let sol = lhs.lu().solve(&vec(&rhs)).ok_or_else(|| {
            SlqError::ConvergenceFailure("closed-loop Lyapunov system is singular".into())
        })?;
        Ok(SymMatrix::symmetrize(DMatrix::from_column_slice(
            n,
            n,
            sol.as_slice(),
        )))
    }

    /// exact infinite-horizon cost x0'P x0 of u = Kx; errors on gains that are
    /// not mean-square stabilizing
    pub fn closed_loop_cost(&self, gain: &FeedbackGain<T>) -> Result<T> {
        let p = self.closed_loop_lyapunov(gain)?;
        Ok((self.x0.transpose() * p.as_matrix() * &self.x0)[(0, 0)])
    }
}

/// static state feedback u = Kx
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackGain<T: Real> {
    k: DMatrix<T>,
}

impl<T: Real> FeedbackGain<T> {
    pub fn new(k: DMatrix<T>) -> Self {
        FeedbackGain { k }
    }

    pub fn zeros(input_dim: usize, state_dim: usize) -> Self {
        FeedbackGain {
            k: DMatrix::zeros(input_dim, state_dim),
        }
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.k
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.k
    }

    pub fn input_dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.k.ncols()
    }
}
