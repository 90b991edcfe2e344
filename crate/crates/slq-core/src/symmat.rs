//! Symmetric-matrix and vectorization algebra: `vecs`, its inverse, `vec`,
//! Kronecker products and the quadratic monomial basis dual to `vecs`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SlqError};
use crate::scalar::{lit, Real};

/// max tolerated entrywise asymmetry when constructing a [`SymMatrix`] from raw data
pub const DEFAULT_SYMMETRY_TOL: f64 = 1e-8;

/// symmetric n x n matrix, stored symmetrized exactly: entries\[i\]\[j\] == entries\[j\]\[i\]
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix<T: Real> {
    m: DMatrix<T>,
}

impl<T: Real> SymMatrix<T> {
    /// builds from a square matrix, rejecting asymmetry above [`DEFAULT_SYMMETRY_TOL`]
    pub fn new(x: DMatrix<T>) -> Result<Self> {
        Self::with_tol(x, lit(DEFAULT_SYMMETRY_TOL))
    }

    /// builds from a square matrix; asymmetry above `tol` is rejected rather than
    /// silently averaged away, anything below is symmetrized as (X + X')/2
    pub fn with_tol(x: DMatrix<T>, tol: T) -> Result<Self> {
        if x.nrows() != x.ncols() {
            return Err(SlqError::Dimension(format!(
                "symmetric matrix must be square, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(SlqError::Dimension("empty matrix".into()));
        }
        let mut max_asym = T::zero();
        for i in 0..x.nrows() {
            for j in (i + 1)..x.ncols() {
                let d = (x[(i, j)] - x[(j, i)]).abs();
                if d > max_asym {
                    max_asym = d;
                }
            }
        }
        if max_asym > tol {
            return Err(SlqError::Asymmetric {
                found: max_asym.to_f64().unwrap_or(f64::NAN),
                tol: tol.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self::symmetrize(x))
    }

    /// unconditional (X + X')/2; for internal products whose asymmetry is pure round-off
    pub(crate) fn symmetrize(x: DMatrix<T>) -> Self {
        let half = lit::<T>(0.5);
        let mut m = x.transpose();
        m += &x;
        m *= half;
        // force exact bit equality across the diagonal
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                m[(j, i)] = m[(i, j)];
            }
        }
        SymMatrix { m }
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            m: DMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix {
            m: DMatrix::identity(n, n),
        }
    }

    pub fn scaled_identity(n: usize, c: T) -> Self {
        SymMatrix {
            m: DMatrix::identity(n, n) * c,
        }
    }

    /// row-major construction helper; input is validated like [`SymMatrix::new`]
    pub fn from_row_slice(n: usize, data: &[T]) -> Result<Self> {
        if data.len() != n * n {
            return Err(SlqError::Dimension(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, n, data))
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.m
    }

    /// smallest eigenvalue, by symmetric eigendecomposition
    pub fn min_eigenvalue(&self) -> T {
        self.m
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(T::max_value().unwrap(), |a, b| if b < a { b } else { a })
    }

    pub fn is_psd(&self, tol: T) -> bool {
        self.min_eigenvalue() >= -tol
    }

    /// Frobenius norm
    pub fn norm(&self) -> T {
        self.m.norm()
    }

    /// self + c * other, the value-iteration update primitive
    pub fn add_scaled(&self, other: &SymMatrix<T>, c: T) -> SymMatrix<T> {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        let mut m = self.m.clone();
        m.zip_apply(&other.m, |lhs, rhs| *lhs += c * rhs);
        SymMatrix { m }
    }

    pub fn sub(&self, other: &SymMatrix<T>) -> SymMatrix<T> {
        self.add_scaled(other, -T::one())
    }
}

impl<T: Real> std::ops::Index<(usize, usize)> for SymMatrix<T> {
    type Output = T;
    fn index(&self, idx: (usize, usize)) -> &T {
        &self.m[idx]
    }
}

/// vecs(P) of a symmetric n x n matrix: upper triangle, row-major, length n(n+1)/2
#[derive(Clone, Debug, PartialEq)]
pub struct VecsVector<T: Real> {
    dim: usize,
    data: DVector<T>,
}

impl<T: Real> VecsVector<T> {
    /// wraps a raw vector whose length must be a triangular number n(n+1)/2
    pub fn from_vector(data: DVector<T>) -> Result<Self> {
        let dim = triangular_root(data.len()).ok_or_else(|| {
            SlqError::Dimension(format!(
                "length {} is not n(n+1)/2 for any n >= 1",
                data.len()
            ))
        })?;
        Ok(VecsVector { dim, data })
    }

    /// the matrix dimension n this vector corresponds to
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<T> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<T> {
        self.data
    }
}

/// n such that len == n(n+1)/2, if any
pub(crate) fn triangular_root(len: usize) -> Option<usize> {
    let mut n = 0usize;
    let mut tri = 0usize;
    while tri < len {
        n += 1;
        tri += n;
    }
    (tri == len && n >= 1).then_some(n)
}

/// iterates the upper triangle (i <= j) in vecs order
pub(crate) fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i..n).map(move |j| (i, j)))
}

/// length of vecs for dimension n
pub(crate) fn vecs_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// upper-triangular row-major stacking [p11, p12, ..., p1n, p22, ..., pnn]
pub fn vecs<T: Real>(s: &SymMatrix<T>) -> VecsVector<T> {
    let n = s.dim();
    let data = DVector::from_iterator(vecs_len(n), upper_pairs(n).map(|(i, j)| s[(i, j)]));
    VecsVector { dim: n, data }
}

/// inverse of [`vecs`]
pub fn mat_from_vecs<T: Real>(v: &VecsVector<T>) -> SymMatrix<T> {
    let n = v.dim();
    let mut m = DMatrix::zeros(n, n);
    for (idx, (i, j)) in upper_pairs(n).enumerate() {
        m[(i, j)] = v.data[idx];
        m[(j, i)] = v.data[idx];
    }
    SymMatrix { m }
}

pub(crate) fn mat_from_vecs_slice<T: Real>(data: &[T]) -> Result<SymMatrix<T>> {
    Ok(mat_from_vecs(&VecsVector::from_vector(
        DVector::from_column_slice(data),
    )?))
}

/// column stacking of an arbitrary matrix
pub fn vec<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    // nalgebra stores column-major, so the raw slice already is vec(M)
    DVector::from_column_slice(m.as_slice())
}

/// Kronecker product
pub fn kron<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a.kronecker(b)
}

/// quadratic monomial basis dual to vecs:
/// [xi1^2, 2 xi1 xi2, ..., 2 xi1 xiq, xi2^2, ..., xiq^2],
/// satisfying dot(quad_basis(xi), vecs(P)) == xi' P xi
pub fn quad_basis<T: Real>(xi: &DVector<T>) -> Result<DVector<T>> {
    let q = xi.len();
    if q == 0 {
        return Err(SlqError::Dimension("quad_basis of an empty vector".into()));
    }
    let two = lit::<T>(2.0);
    let data = DVector::from_iterator(
        vecs_len(q),
        upper_pairs(q).map(|(i, j)| {
            if i == j {
                xi[i] * xi[i]
            } else {
                two * xi[i] * xi[j]
            }
        }),
    );
    Ok(data)
}

/// in-place quad_basis into a preallocated column; hot path of data collection
pub(crate) fn quad_basis_into<T: Real>(xi: &[T], out: &mut [T]) {
    let two = lit::<T>(2.0);
    let mut idx = 0;
    for i in 0..xi.len() {
        out[idx] = xi[i] * xi[i];
        idx += 1;
        for j in (i + 1)..xi.len() {
            out[idx] = two * xi[i] * xi[j];
            idx += 1;
        }
    }
}

/// row r with dot(r, vecs(P)) == tr(W P) for symmetric P: diagonal of W once,
/// off-diagonal pairs summed
pub(crate) fn vecs_dual<T: Real>(w: &DMatrix<T>) -> DVector<T> {
    let n = w.nrows();
    debug_assert_eq!(n, w.ncols());
    DVector::from_iterator(
        vecs_len(n),
        upper_pairs(n).map(|(i, j)| {
            if i == j {
                w[(i, i)]
            } else {
                w[(i, j)] + w[(j, i)]
            }
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix<f64> {
        let x = DMatrix::from_fn(n, n, |_, _| uniform(rng));
        SymMatrix::symmetrize(x)
    }

    #[test]
    fn vecs_reads_off_upper_triangle() {
        let s = SymMatrix::from_row_slice(2, &[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert_eq!(vecs(&s).as_vector().as_slice(), &[1.0, 2.0, 3.0]);

        let i3 = SymMatrix::<f64>::identity(3);
        assert_eq!(
            vecs(&i3).as_vector().as_slice(),
            &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn mat_from_vecs_inverts() {
        let v = VecsVector::from_vector(dvector![1.0, 2.0, 3.0]).unwrap();
        let s = mat_from_vecs(&v);
        assert_eq!(s.as_matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]));

        let v1 = VecsVector::from_vector(dvector![5.0]).unwrap();
        assert_eq!(mat_from_vecs(&v1).as_matrix()[(0, 0)], 5.0);
    }

    #[test]
    fn non_triangular_length_rejected() {
        for len in [2usize, 4, 5, 7, 8, 9] {
            let v = DVector::from_element(len, 1.0);
            assert!(matches!(
                VecsVector::from_vector(v),
                Err(SlqError::Dimension(_))
            ));
        }
    }

    #[test]
    fn vecs_round_trips_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = (rng.next_u64() % 6 + 1) as usize;
            let s = random_sym(&mut rng, n);
            let back = mat_from_vecs(&vecs(&s));
            assert_eq!(back.as_matrix(), s.as_matrix());

            let v = DVector::from_fn(vecs_len(n), |_, _| uniform(&mut rng));
            let vv = VecsVector::from_vector(v.clone()).unwrap();
            assert_eq!(vecs(&mat_from_vecs(&vv)).as_vector(), &v);
        }
    }

    #[test]
    fn vec_stacks_columns() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec(&m).as_slice(), &[1.0, 3.0, 2.0, 4.0]);

        let col = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert_eq!(vec(&col).as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn vec_kron_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = DMatrix::from_fn(3, 3, |_, _| uniform(&mut rng));
            let x = DMatrix::from_fn(3, 3, |_, _| uniform(&mut rng));
            let b = DMatrix::from_fn(3, 3, |_, _| uniform(&mut rng));
            let lhs = vec(&(&a * &x * &b));
            let rhs = kron(&b.transpose(), &a) * vec(&x);
            assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
        }
    }

    #[test]
    fn kron_special_cases() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i2 = DMatrix::<f64>::identity(2, 2);
        let block = kron(&i2, &b);
        assert_eq!(block[(0, 0)], 1.0);
        assert_eq!(block[(2, 2)], 1.0);
        assert_eq!(block[(0, 2)], 0.0);
        assert_eq!(block[(3, 2)], 3.0);

        let two = DMatrix::from_row_slice(1, 1, &[2.0]);
        assert_eq!(kron(&two, &b), &b * 2.0);

        // associativity on random 2x2s
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = DMatrix::from_fn(2, 2, |_, _| uniform(&mut rng));
            let c = DMatrix::from_fn(2, 2, |_, _| uniform(&mut rng));
            assert_relative_eq!(
                kron(&kron(&a, &b), &c),
                kron(&a, &kron(&b, &c)),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn quad_basis_expansion() {
        let v = quad_basis(&dvector![1.0, 2.0]).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 4.0, 4.0]);

        let a = 3.5;
        let v1 = quad_basis(&dvector![a]).unwrap();
        assert_eq!(v1.as_slice(), &[a * a]);

        assert!(quad_basis(&DVector::<f64>::zeros(0)).is_err());
    }

    #[test]
    fn quad_basis_vecs_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = (rng.next_u64() % 5 + 1) as usize;
            let p = random_sym(&mut rng, n);
            let xi = DVector::from_fn(n, |_, _| uniform(&mut rng));
            let lhs = quad_basis(&xi).unwrap().dot(vecs(&p).as_vector());
            let rhs = (xi.transpose() * p.as_matrix() * &xi)[(0, 0)];
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn vecs_dual_trace_pairing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = (rng.next_u64() % 4 + 1) as usize;
            let w = DMatrix::from_fn(n, n, |_, _| uniform(&mut rng));
            let p = random_sym(&mut rng, n);
            let lhs = vecs_dual(&w).dot(vecs(&p).as_vector());
            let rhs = (&w * p.as_matrix()).trace();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn asymmetric_input_rejected() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.5, 3.0]);
        assert!(matches!(
            SymMatrix::new(x),
            Err(SlqError::Asymmetric { .. })
        ));
        // below tolerance: accepted and symmetrized
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0 + 1e-12, 3.0]);
        let s = SymMatrix::new(y).unwrap();
        assert_eq!(s[(0, 1)], s[(1, 0)]);
    }

    #[test]
    fn min_eigenvalue_on_known_matrix() {
        let s = SymMatrix::from_row_slice(2, &[2.0, 1.0, 1.0, 2.0]).unwrap();
        assert_relative_eq!(s.min_eigenvalue(), 1.0, max_relative = 1e-12);
    }
}
