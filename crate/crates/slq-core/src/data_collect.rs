//! Ensemble-averaged data matrices for the model-free iteration, the rank
//! condition, and least-squares recovery of the quadratic-form triple
//! (M, N, H) that the data implies for any symmetric P.
//!
//! The underlying identity: along solutions of the system,
//!   E[x'Px](t_{i+1}) - E[x'Px](t_i)
//!     = E int ( quad_basis(x) . vecs(M) + 2 u'Nx + quad_basis(u) . vecs(H) )
//! with M = A'P + PA + C'PC, N = B'P + D'PC, H = D'PD. Stacking the left side
//! as i_xx * vecs(P) and the integrals as rows of [d_xx | 2 d_xu | d_uu] gives
//! a linear system whose least-squares inverse (Theta) recovers the triple
//! from data alone.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Result, SlqError};
use crate::scalar::{lit, Real};
use crate::simulator::TrajectoryEnsemble;
use crate::symmat::{
    mat_from_vecs_slice, quad_basis_into, vecs, vecs_dual, vecs_len, SymMatrix,
};

/// relative singular-value cutoff for the rank condition
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct CollectOptions<T: Real> {
    /// rank condition: smallest singular value of [d_xx | 2 d_xu | d_uu] must
    /// exceed rank_tol times the largest
    pub rank_tol: T,
}

impl<T: Real> Default for CollectOptions<T> {
    fn default() -> Self {
        CollectOptions {
            rank_tol: lit(DEFAULT_RANK_TOL),
        }
    }
}

/// quadratic-form coefficients recovered from data at a given P
#[derive(Clone, Debug)]
pub struct ItoTriple<T: Real> {
    /// n x n symmetric, plays A'P + PA + C'PC
    pub m: SymMatrix<T>,
    /// input_dim x state_dim, plays B'P + D'PC
    pub n: DMatrix<T>,
    /// input_dim x input_dim symmetric, plays D'PD
    pub h: SymMatrix<T>,
}

#[derive(Clone, Debug)]
pub struct DataMatrices<T: Real> {
    state_dim: usize,
    input_dim: usize,
    /// increments of the quadratic state basis across each interval, l x n(n+1)/2
    i_xx: DMatrix<T>,
    /// integrals of the quadratic state basis, l x n(n+1)/2
    d_xx: DMatrix<T>,
    /// integrals of x (x) u, entry a*m+b holding x_a u_b, l x nm
    d_xu: DMatrix<T>,
    /// integrals of the quadratic input basis, l x m(m+1)/2
    d_uu: DMatrix<T>,
    /// least-squares inverse mapping vecs(P) to [vecs(M); vec(N); vecs(H)];
    /// present exactly when the rank condition holds
    theta: Option<DMatrix<T>>,
    rank_ok: bool,
    min_singular_value: T,
    max_singular_value: T,
}

impl<T: Real> DataMatrices<T> {
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn intervals(&self) -> usize {
        self.i_xx.nrows()
    }

    /// number of unknowns the rank condition is about
    pub fn unknown_count(&self) -> usize {
        let (n, m) = (self.state_dim, self.input_dim);
        vecs_len(n) + n * m + vecs_len(m)
    }

    pub fn rank_ok(&self) -> bool {
        self.rank_ok
    }

    pub fn min_singular_value(&self) -> T {
        self.min_singular_value
    }

    pub fn max_singular_value(&self) -> T {
        self.max_singular_value
    }

    pub fn i_xx(&self) -> &DMatrix<T> {
        &self.i_xx
    }

    pub fn d_xx(&self) -> &DMatrix<T> {
        &self.d_xx
    }

    pub fn d_xu(&self) -> &DMatrix<T> {
        &self.d_xu
    }

    pub fn d_uu(&self) -> &DMatrix<T> {
        &self.d_uu
    }

    /// assembles the data matrices from raw blocks: validates shapes, forms
    /// G = [d_xx | 2 d_xu | d_uu], tests the rank condition and, when it
    /// holds, solves G Theta = i_xx by column-equilibrated least squares
    pub fn from_blocks(
        state_dim: usize,
        input_dim: usize,
        i_xx: DMatrix<T>,
        d_xx: DMatrix<T>,
        d_xu: DMatrix<T>,
        d_uu: DMatrix<T>,
        opts: &CollectOptions<T>,
    ) -> Result<Self> {
        let (n, m) = (state_dim, input_dim);
        if n == 0 || m == 0 {
            return Err(SlqError::Dimension("dimensions must be positive".into()));
        }
        let l = i_xx.nrows();
        let widths = [
            ("i_xx", &i_xx, vecs_len(n)),
            ("d_xx", &d_xx, vecs_len(n)),
            ("d_xu", &d_xu, n * m),
            ("d_uu", &d_uu, vecs_len(m)),
        ];
        for (name, mat, want) in widths {
            if mat.nrows() != l || mat.ncols() != want {
                return Err(SlqError::Dimension(format!(
                    "{name} must be {l}x{want}, got {}x{}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
        }
        if l == 0 {
            return Err(SlqError::Dimension("no data intervals".into()));
        }

        let c = vecs_len(n) + n * m + vecs_len(m);
        let two = lit::<T>(2.0);
        let mut g = DMatrix::zeros(l, c);
        g.view_mut((0, 0), (l, vecs_len(n))).copy_from(&d_xx);
        g.view_mut((0, vecs_len(n)), (l, n * m))
            .copy_from(&(&d_xu * two));
        g.view_mut((0, vecs_len(n) + n * m), (l, vecs_len(m)))
            .copy_from(&d_uu);

        let sv = g.clone().singular_values();
        let max_sv = sv.iter().copied().fold(T::zero(), |a, b| if b > a { b } else { a });
        let min_sv = if l < c {
            T::zero()
        } else {
            sv.iter()
                .copied()
                .fold(T::max_value().unwrap(), |a, b| if b < a { b } else { a })
        };
        let rank_ok = max_sv > T::zero() && min_sv > opts.rank_tol * max_sv;

        let theta = if rank_ok {
            // equilibrate columns so disparate state/input scales do not skew
            // the least-squares geometry
            let scales: Vec<T> = (0..c)
                .map(|j| {
                    let norm = g.column(j).norm();
                    if norm > T::zero() {
                        T::one() / norm
                    } else {
                        T::one()
                    }
                })
                .collect();
            let mut gs = g.clone();
            for (j, &s) in scales.iter().enumerate() {
                gs.column_mut(j).scale_mut(s);
            }
            let svd = gs.svd(true, true);
            let mut sol = svd
                .solve(&i_xx, lit(1e-14))
                .map_err(|e| SlqError::ConvergenceFailure(format!("least squares failed: {e}")))?;
            for (j, &s) in scales.iter().enumerate() {
                sol.row_mut(j).scale_mut(s);
            }
            Some(sol)
        } else {
            None
        };

        Ok(DataMatrices {
            state_dim: n,
            input_dim: m,
            i_xx,
            d_xx,
            d_xu,
            d_uu,
            theta,
            rank_ok,
            min_singular_value: min_sv,
            max_singular_value: max_sv,
        })
    }

    /// evaluates the data-implied triple at P
    pub fn recover_triple(&self, p: &SymMatrix<T>) -> Result<ItoTriple<T>> {
        let theta = self.theta.as_ref().ok_or_else(|| {
            SlqError::RankCondition(format!(
                "data matrix rank condition fails ({} intervals for {} unknowns, \
                 singular values {:.3e} .. {:.3e})",
                self.intervals(),
                self.unknown_count(),
                self.min_singular_value.to_f64().unwrap_or(f64::NAN),
                self.max_singular_value.to_f64().unwrap_or(f64::NAN),
            ))
        })?;
        let (n, m) = (self.state_dim, self.input_dim);
        if p.dim() != n {
            return Err(SlqError::Dimension(format!(
                "P is {}x{} but the data was collected on state dimension {n}",
                p.dim(),
                p.dim()
            )));
        }
        let y = theta * vecs(p).as_vector();
        let nn2 = vecs_len(n);
        let m_mat = mat_from_vecs_slice(&y.as_slice()[..nn2])?;
        // vec(N) is stacked by state-index-major columns: entry j*m + i is N[i, j]
        let n_mat = DMatrix::from_fn(m, n, |i, j| y[nn2 + j * m + i]);
        let h_mat = mat_from_vecs_slice(&y.as_slice()[nn2 + n * m..])?;
        Ok(ItoTriple {
            m: m_mat,
            n: n_mat,
            h: h_mat,
        })
    }

    /// tabular dump: a dims record then one record per matrix entry
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["block", "row", "col", "value"])?;
        w.write_record([
            "dims",
            &self.state_dim.to_string(),
            &self.input_dim.to_string(),
            &self.intervals().to_string(),
        ])?;
        for (name, mat) in [
            ("i_xx", &self.i_xx),
            ("d_xx", &self.d_xx),
            ("d_xu", &self.d_xu),
            ("d_uu", &self.d_uu),
        ] {
            for i in 0..mat.nrows() {
                for j in 0..mat.ncols() {
                    w.write_record([
                        name,
                        &i.to_string(),
                        &j.to_string(),
                        &format!("{:?}", mat[(i, j)].to_f64().unwrap_or(f64::NAN)),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// inverse of [`DataMatrices::write_csv`]; the least-squares inverse is
    /// recomputed rather than stored
    pub fn read_csv<R: std::io::Read>(input: R, opts: &CollectOptions<T>) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let mut records = reader.records();
        let dims = records
            .next()
            .ok_or_else(|| SlqError::InvalidConfig("empty data file".into()))??;
        if &dims[0] != "dims" {
            return Err(SlqError::InvalidConfig(
                "first record must declare dims".into(),
            ));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| SlqError::InvalidConfig(format!("bad integer {s:?}: {e}")))
        };
        let n = parse_usize(&dims[1])?;
        let m = parse_usize(&dims[2])?;
        let l = parse_usize(&dims[3])?;
        let mut i_xx = DMatrix::zeros(l, vecs_len(n));
        let mut d_xx = DMatrix::zeros(l, vecs_len(n));
        let mut d_xu = DMatrix::zeros(l, n * m);
        let mut d_uu = DMatrix::zeros(l, vecs_len(m));
        for rec in records {
            let rec = rec?;
            let target = match &rec[0] {
                "i_xx" => &mut i_xx,
                "d_xx" => &mut d_xx,
                "d_xu" => &mut d_xu,
                "d_uu" => &mut d_uu,
                other => {
                    return Err(SlqError::InvalidConfig(format!(
                        "unknown block {other:?}"
                    )))
                }
            };
            let i = parse_usize(&rec[1])?;
            let j = parse_usize(&rec[2])?;
            if i >= target.nrows() || j >= target.ncols() {
                return Err(SlqError::InvalidConfig(format!(
                    "entry ({i},{j}) outside block {}", &rec[0]
                )));
            }
            let v: f64 = rec[3]
                .parse()
                .map_err(|e| SlqError::InvalidConfig(format!("bad value {:?}: {e}", &rec[3])))?;
            target[(i, j)] = lit(v);
        }
        Self::from_blocks(n, m, i_xx, d_xx, d_xu, d_uu, opts)
    }
}

/// ensemble averages over a simulated run: interval integrals by the trapezoid
/// rule at full step resolution, endpoint increments exactly at the grid
pub fn collect<T: Real>(
    ensemble: &TrajectoryEnsemble<T>,
    opts: &CollectOptions<T>,
) -> Result<DataMatrices<T>> {
    let idx = ensemble.step_indices();
    let l = idx.len() - 1;
    let n = ensemble.state_dim();
    let m = ensemble.input_dim();
    let (nn2, mm2) = (vecs_len(n), vecs_len(m));
    let dt = ensemble.dt();
    let half = lit::<T>(0.5);

    let partials: Vec<[DMatrix<T>; 4]> = ensemble
        .states()
        .par_iter()
        .zip(ensemble.inputs().par_iter())
        .map(|(xs, us)| {
            let mut i_xx = DMatrix::<T>::zeros(l, nn2);
            let mut d_xx = DMatrix::<T>::zeros(l, nn2);
            let mut d_xu = DMatrix::<T>::zeros(l, n * m);
            let mut d_uu = DMatrix::<T>::zeros(l, mm2);
            let mut xcol = vec![T::zero(); n];
            let mut ucol = vec![T::zero(); m];
            let mut bx = vec![T::zero(); nn2];
            let mut bu = vec![T::zero(); mm2];
            for i in 0..l {
                let (s0, s1) = (idx[i], idx[i + 1]);
                for k in s0..=s1 {
                    for a in 0..n {
                        xcol[a] = xs[(a, k)];
                    }
                    for b in 0..m {
                        ucol[b] = us[(b, k)];
                    }
                    let wgt = if k == s0 || k == s1 { half * dt } else { dt };
                    quad_basis_into(&xcol, &mut bx);
                    for (j, &v) in bx.iter().enumerate() {
                        d_xx[(i, j)] += wgt * v;
                    }
                    for a in 0..n {
                        for b in 0..m {
                            d_xu[(i, a * m + b)] += wgt * xcol[a] * ucol[b];
                        }
                    }
                    quad_basis_into(&ucol, &mut bu);
                    for (j, &v) in bu.iter().enumerate() {
                        d_uu[(i, j)] += wgt * v;
                    }
                    if k == s0 || k == s1 {
                        let sign = if k == s1 { T::one() } else { -T::one() };
                        for (j, &v) in bx.iter().enumerate() {
                            i_xx[(i, j)] += sign * v;
                        }
                    }
                }
            }
            [i_xx, d_xx, d_xu, d_uu]
        })
        .collect();

    // fold in path order so the result is independent of thread scheduling
    let mut acc = [
        DMatrix::<T>::zeros(l, nn2),
        DMatrix::<T>::zeros(l, nn2),
        DMatrix::<T>::zeros(l, n * m),
        DMatrix::<T>::zeros(l, mm2),
    ];
    for part in &partials {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    let w = T::one() / lit::<T>(ensemble.paths() as f64);
    let [mut i_xx, mut d_xx, mut d_xu, mut d_uu] = acc;
    i_xx *= w;
    d_xx *= w;
    d_xu *= w;
    d_uu *= w;
    DataMatrices::from_blocks(n, m, i_xx, d_xx, d_xu, d_uu, opts)
}

pub mod synthetic {
    //! Analytically exact data: piecewise-polynomial state/input signals whose
    //! moment integrals are computed in closed form, with the increment rows
    //! built from the model so the data identity holds to machine precision.
    //! Feeding these matrices to the model-free iteration makes it coincide
    //! with the model-based one; that is the equivalence-testing oracle.

    use super::*;
    use crate::model::SlqModel;
    use rand_core::{RngCore, SeedableRng};

    #[derive(Clone, Debug)]
    pub struct SyntheticDataOptions<T: Real> {
        pub intervals: usize,
        pub interval_length: T,
        /// polynomial degree of the per-interval signals
        pub degree: usize,
        pub seed: u64,
    }

    impl<T: Real> SyntheticDataOptions<T> {
        /// enough well-conditioned intervals for the given dimensions
        pub fn for_dims(state_dim: usize, input_dim: usize) -> Self {
            let unknowns =
                vecs_len(state_dim) + state_dim * input_dim + vecs_len(input_dim);
            SyntheticDataOptions {
                intervals: unknowns + 2,
                interval_length: lit(0.5),
                degree: 2,
                seed: 7,
            }
        }
    }

    fn uniform<T: Real>(rng: &mut rand_chacha::ChaCha8Rng) -> T {
        lit((rng.next_u64() >> 11) as f64 / (1u64 << 52) as f64 - 1.0)
    }

    pub fn exact_data<T: Real>(
        model: &SlqModel<T>,
        opts: &SyntheticDataOptions<T>,
    ) -> Result<DataMatrices<T>> {
        if opts.intervals == 0 || opts.interval_length <= T::zero() {
            return Err(SlqError::InvalidConfig(
                "synthetic data needs at least one interval of positive length".into(),
            ));
        }
        let n = model.state_dim();
        let m = model.input_dim();
        let (nn2, mm2) = (vecs_len(n), vecs_len(m));
        let l = opts.intervals;
        let deg = opts.degree;
        let h = opts.interval_length;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);

        let mut i_xx = DMatrix::<T>::zeros(l, nn2);
        let mut d_xx = DMatrix::<T>::zeros(l, nn2);
        let mut d_xu = DMatrix::<T>::zeros(l, n * m);
        let mut d_uu = DMatrix::<T>::zeros(l, mm2);

        // h^(j+k+1)/(j+k+1) for exact integrals of t^j * t^k over [0, h]
        let mut pow = vec![T::zero(); 2 * deg + 2];
        let mut hp = h;
        for (j, slot) in pow.iter_mut().enumerate() {
            *slot = hp / lit((j + 1) as f64);
            hp *= h;
        }

        for i in 0..l {
            let cx: Vec<DVector<T>> = (0..=deg)
                .map(|_| DVector::from_fn(n, |_, _| uniform(&mut rng)))
                .collect();
            let cu: Vec<DVector<T>> = (0..=deg)
                .map(|_| DVector::from_fn(m, |_, _| uniform(&mut rng)))
                .collect();

            let mut sxx = DMatrix::<T>::zeros(n, n);
            let mut sxu = DMatrix::<T>::zeros(n, m);
            let mut suu = DMatrix::<T>::zeros(m, m);
            for j in 0..=deg {
                for k in 0..=deg {
                    let w = pow[j + k];
                    sxx += &cx[j] * cx[k].transpose() * w;
                    sxu += &cx[j] * cu[k].transpose() * w;
                    suu += &cu[j] * cu[k].transpose() * w;
                }
            }

            let v = model.a() * &sxx
                + &sxx * model.a().transpose()
                + model.c() * &sxx * model.c().transpose()
                + model.b() * sxu.transpose()
                + &sxu * model.b().transpose()
                + model.c() * &sxu * model.d().transpose()
                + model.d() * sxu.transpose() * model.c().transpose()
                + model.d() * &suu * model.d().transpose();

            i_xx.row_mut(i).tr_copy_from(&vecs_dual(&v));
            d_xx.row_mut(i).tr_copy_from(&vecs_dual(&sxx));
            d_uu.row_mut(i).tr_copy_from(&vecs_dual(&suu));
            for a in 0..n {
                for b in 0..m {
                    d_xu[(i, a * m + b)] = sxu[(a, b)];
                }
            }
        }

        DataMatrices::from_blocks(n, m, i_xx, d_xx, d_xu, d_uu, &CollectOptions::default())
    }
}
