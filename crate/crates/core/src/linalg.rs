//! Small dense helpers on slices; coefficient matrices are tiny so these stay
//! allocation-free in the tree sweeps.

use nalgebra::DMatrix;

/// `out += alpha · M x`
#[inline]
pub(crate) fn gemv_acc(out: &mut [f64], alpha: f64, m: &DMatrix<f64>, x: &[f64]) {
    debug_assert_eq!(m.nrows(), out.len());
    debug_assert_eq!(m.ncols(), x.len());
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = m.column(j);
        for (o, mij) in out.iter_mut().zip(col.iter()) {
            *o += alpha * mij * xj;
        }
    }
}

/// `out += alpha · Mᵀ x`
#[inline]
pub(crate) fn gemv_t_acc(out: &mut [f64], alpha: f64, m: &DMatrix<f64>, x: &[f64]) {
    debug_assert_eq!(m.ncols(), out.len());
    debug_assert_eq!(m.nrows(), x.len());
    for (j, o) in out.iter_mut().enumerate() {
        let col = m.column(j);
        let s: f64 = col.iter().zip(x).map(|(a, b)| a * b).sum();
        *o += alpha * s;
    }
}

/// `⟨M x, y⟩`
#[inline]
pub(crate) fn bilinear(m: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = m.column(j);
        s += xj * col.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest `|M_ij − M_ji|`.
pub(crate) fn skew_defect(m: &DMatrix<f64>) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Row-major flat view of a square matrix stored in a slice.
#[inline]
pub(crate) fn mat_from_slice(n: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, v)
}

#[inline]
pub(crate) fn mat_to_row_major(m: &DMatrix<f64>, out: &mut [f64]) {
    let (r, c) = m.shape();
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = m[(i, j)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemv_variants_agree_with_nalgebra() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let x = [0.3, -2.0, 1.5];
        let mut out = vec![1.0, 1.0];
        gemv_acc(&mut out, 2.0, &m, &x);
        let expect = (&m * nalgebra::DVector::from_column_slice(&x)) * 2.0;
        assert!((out[0] - 1.0 - expect[0]).abs() < 1e-14);
        assert!((out[1] - 1.0 - expect[1]).abs() < 1e-14);

        let y = [0.7, -0.2];
        let mut out_t = vec![0.0; 3];
        gemv_t_acc(&mut out_t, 1.0, &m, &y);
        let expect_t = m.transpose() * nalgebra::DVector::from_column_slice(&y);
        for i in 0..3 {
            assert!((out_t[i] - expect_t[i]).abs() < 1e-14);
        }
        let b = bilinear(&m, &x, &y);
        assert!((b - dot(&expect.scale(0.5).as_slice(), &y)).abs() < 1e-14);
    }

    #[test]
    fn symmetrize_removes_skew() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0 + 1e-15, 3.0]);
        assert!(skew_defect(&m) > 0.0);
        symmetrize(&mut m);
        assert_eq!(skew_defect(&m), 0.0);
    }
}
