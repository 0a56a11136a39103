//! Dense row-major matrices and the small set of factorizations the pipeline
//! needs: cyclic Jacobi for symmetric eigenproblems, Gram–Schmidt QR, and an
//! LU solve for the interpolation systems.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_cols(cols: &[Vec<f64>]) -> Result<Self> {
        let c = cols.len();
        let r = cols.first().map_or(0, Vec::len);
        if cols.iter().any(|col| col.len() != r) {
            return Err(Error::Shape("ragged columns".into()));
        }
        let mut m = Self::zeros(r, c);
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm_nn(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            &other.data,
            &mut out.data,
            false,
        );
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "vector of length {} against {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows.min(self.cols) {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Inner product with four independent accumulators (fixed summation order).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `C (+)= A·B` for row-major `A: m×k`, `B: k×n`.
///
/// Each output entry accumulates over `k` in a fixed order, independent of
/// `m`, so a row computed inside a batch is bit-identical to the same row
/// computed alone.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !acc {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], ci);
            }
        }
    }
}

/// `C (+)= Aᵀ·B` for row-major `A: k×m`, `B: k×n`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !acc {
        c.iter_mut().for_each(|v| *v = 0.0);
    }
    for p in 0..k {
        let ap = &a[p * m..(p + 1) * m];
        let bp = &b[p * n..(p + 1) * n];
        for (i, &api) in ap.iter().enumerate() {
            if api != 0.0 {
                axpy(api, bp, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// `C (+)= A·Bᵀ` for row-major `A: m×k`, `B: n×k`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let v = dot(ai, &b[j * k..(j + 1) * k]);
            let cij = &mut c[i * n + j];
            if acc {
                *cij += v;
            } else {
                *cij = v;
            }
        }
    }
}

/// Symmetric eigendecomposition result: eigenvalues in descending order and
/// the matching unit eigenvectors as columns.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Mat,
    pub sweeps: usize,
}

const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver for a symmetric matrix.
///
/// Sweeps over all `(p, q)` pairs, annihilating each off-diagonal entry with
/// a plane rotation, until the off-diagonal Frobenius norm drops below
/// `1e-14·‖A‖_F`. After the fourth sweep, entries already negligible next to
/// both diagonal entries are zeroed without a rotation.
///
/// Eigenvalues come back sorted descending; each eigenvector is signed so
/// that its largest-magnitude entry is positive.
pub fn jacobi_eigh(a: &Mat) -> Result<SymEigen> {
    let n = a.rows();
    if n == 0 || a.cols() != n {
        return Err(Error::Shape(format!(
            "eigensolver needs a non-empty square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("eigensolver input".into()));
    }
    let scale = a.max_abs();
    let asym = a.asymmetry();
    if asym > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotSymmetric(asym));
    }

    let mut m = a.clone();
    // Symmetrize exactly so the row-update/mirror scheme stays consistent.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    // Rows of `vt` are eigenvectors, so rotations touch contiguous memory.
    let mut vt = Mat::identity(n);
    let norm_f = m.norm_fro();
    let threshold = JACOBI_TOL * norm_f;

    let mut sweeps = 0;
    let mut row_p = vec![0.0; n];
    let mut row_q = vec![0.0; n];
    while sweeps < JACOBI_MAX_SWEEPS {
        let off = off_diagonal_norm(&m);
        if off <= threshold || off == 0.0 {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let g = 100.0 * apq.abs();
                if sweeps > 4 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau.is_infinite() {
                    0.5 / tau
                } else {
                    tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                row_p.copy_from_slice(m.row(p));
                row_q.copy_from_slice(m.row(q));
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = row_p[k];
                    let akq = row_q[k];
                    let np = c * akp - s * akq;
                    let nq = s * akp + c * akq;
                    m[(p, k)] = np;
                    m[(k, p)] = np;
                    m[(q, k)] = nq;
                    m[(k, q)] = nq;
                }
                m[(p, p)] = app - t * apq;
                m[(q, q)] = aqq + t * apq;
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;

                for k in 0..n {
                    let vp = vt[(p, k)];
                    let vq = vt[(q, k)];
                    vt[(p, k)] = c * vp - s * vq;
                    vt[(q, k)] = s * vp + c * vq;
                }
            }
        }
    }
    if off_diagonal_norm(&m) > threshold.max(f64::MIN_POSITIVE) && sweeps >= JACOBI_MAX_SWEEPS {
        return Err(Error::Numerical(format!(
            "Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let v = vt.row(src);
        let sign = sign_of_dominant(v);
        for k in 0..n {
            vectors[(k, col)] = sign * v[k];
        }
    }
    Ok(SymEigen {
        values,
        vectors,
        sweeps,
    })
}

fn off_diagonal_norm(m: &Mat) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += m[(i, j)] * m[(i, j)];
        }
    }
    (2.0 * s).sqrt()
}

/// `+1` if the first largest-magnitude entry is non-negative, else `-1`.
pub fn sign_of_dominant(v: &[f64]) -> f64 {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v {
        if x.abs() > best {
            best = x.abs();
            sign = if x < 0.0 { -1.0 } else { 1.0 };
        }
    }
    sign
}

/// Orthonormal factor `Q` of a thin QR decomposition (`d×K`, `d ≥ K`).
///
/// Modified Gram–Schmidt with one reorthogonalization pass; the diagonal of
/// the implied `R` is positive. A column whose residual norm drops below
/// `1e-12` of its original norm is reported as rank deficiency.
pub fn qr_q(a: &Mat) -> Result<Mat> {
    let (d, k) = (a.rows(), a.cols());
    if k > d {
        return Err(Error::Shape(format!(
            "thin QR needs rows >= cols, got {d}x{k}"
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("QR input".into()));
    }
    // Work on columns stored contiguously.
    let at = a.transpose();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = at.row(j).to_vec();
        let orig = norm2(&v);
        for _pass in 0..2 {
            for qi in &q {
                let r = dot(qi, &v);
                axpy(-r, qi, &mut v);
            }
        }
        let nrm = norm2(&v);
        if orig == 0.0 || nrm < 1e-12 * orig {
            return Err(Error::RankDeficient(j));
        }
        v.iter_mut().for_each(|x| *x /= nrm);
        q.push(v);
    }
    Mat::from_cols(&q)
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Solve `A·x = b` by LU with partial pivoting.
pub fn lu_solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::Shape(format!(
            "LU solve on {}x{} with rhs {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let (piv, pmax) =
            (col..n)
                .map(|r| (r, m[(r, col)].abs()))
                .fold(
                    (col, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
        if pmax <= 1e-14 * scale {
            return Err(Error::Singular(format!("zero pivot in column {col}")));
        }
        if piv != col {
            for j in 0..n {
                m.data.swap(col * n + j, piv * n + j);
            }
            x.swap(col, piv);
        }
        let d = m[(col, col)];
        let (upper, lower) = m.data.split_at_mut((col + 1) * n);
        let prow = &upper[col * n..(col + 1) * n];
        for r in 0..(n - col - 1) {
            let row = &mut lower[r * n..(r + 1) * n];
            let f = row[col] / d;
            if f != 0.0 {
                for j in col..n {
                    row[j] -= f * prow[j];
                }
                x[col + 1 + r] -= f * x[col];
            }
        }
    }
    for i in (0..n).rev() {
        let row = m.row(i);
        let s: f64 = ((i + 1)..n).map(|j| row[j] * x[j]).sum();
        x[i] = (x[i] - s) / row[i];
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("non-finite solution".into()));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random_symmetric(n: usize, rng: &mut RngStream) -> Mat {
        let mut a = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.next_gaussian();
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    fn reconstruct(e: &SymEigen) -> Mat {
        let n = e.values.len();
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = (0..n)
                    .map(|k| e.vectors[(i, k)] * e.values[k] * e.vectors[(j, k)])
                    .sum();
            }
        }
        out
    }

    #[test]
    fn eigh_two_by_two() {
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = jacobi_eigh(&a).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.vectors[(0, 0)] - r).abs() < 1e-14);
        assert!((e.vectors[(1, 0)] - r).abs() < 1e-14);
        // (1,-1)/sqrt2 with the first entry as the (tied) dominant one
        assert!((e.vectors[(0, 1)] - r).abs() < 1e-14);
        assert!((e.vectors[(1, 1)] + r).abs() < 1e-14);
    }

    #[test]
    fn eigh_identity() {
        let e = jacobi_eigh(&Mat::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        let vtv = e.vectors.transpose().matmul(&e.vectors).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((vtv[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn eigh_reconstructs_random_6x6() {
        let mut rng = RngStream::new(1, "eigh6");
        let a = random_symmetric(6, &mut rng);
        let e = jacobi_eigh(&a).unwrap();
        let r = reconstruct(&e);
        for (x, y) in r.as_slice().iter().zip(a.as_slice()) {
            assert!((x - y).abs() <= 1e-10);
        }
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eigh_residual_up_to_64() {
        let mut rng = RngStream::new(2, "eigh64");
        for &n in &[1usize, 2, 5, 17, 40, 64] {
            let a = random_symmetric(n, &mut rng);
            let e = jacobi_eigh(&a).unwrap();
            let av = a.matmul(&e.vectors).unwrap();
            let mut worst = 0.0f64;
            for i in 0..n {
                for k in 0..n {
                    worst = worst.max((av[(i, k)] - e.vectors[(i, k)] * e.values[k]).abs());
                }
            }
            assert!(worst <= 1e-9 * a.norm_inf(), "n={n} residual {worst}");
            for k in 0..n {
                let col = e.vectors.col(k);
                assert!(sign_of_dominant(&col) > 0.0);
            }
        }
    }

    #[test]
    fn eigh_rejects_bad_input() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(jacobi_eigh(&a), Err(Error::NotSymmetric(_))));
        let b = Mat::from_rows(&[vec![1.0, f64::NAN], vec![f64::NAN, 1.0]]).unwrap();
        assert!(matches!(jacobi_eigh(&b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn qr_identity_columns() {
        let a = Mat::identity(4);
        assert_eq!(qr_q(&a).unwrap(), a);
    }

    #[test]
    fn qr_single_column() {
        let a = Mat::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let q = qr_q(&a).unwrap();
        assert!((q[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((q[(1, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn qr_gaussian_is_orthonormal_and_idempotent() {
        let mut rng = RngStream::new(3, "qr");
        let a = Mat::from_vec(16, 4, rng.randn(64)).unwrap();
        let q = qr_q(&a).unwrap();
        let qtq = q.transpose().matmul(&q).unwrap();
        let worst = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .map(|(i, j)| (qtq[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-12);
        let q2 = qr_q(&q).unwrap();
        for (x, y) in q.as_slice().iter().zip(q2.as_slice()) {
            assert!((x - y).abs() <= 1e-12);
        }
        // span check: Q Qᵀ A = A
        let proj = q.matmul(&q.transpose().matmul(&a).unwrap()).unwrap();
        for (x, y) in proj.as_slice().iter().zip(a.as_slice()) {
            assert!((x - y).abs() <= 1e-12 * a.max_abs());
        }
    }

    #[test]
    fn qr_detects_rank_deficiency() {
        let a = Mat::from_cols(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        assert!(matches!(qr_q(&a), Err(Error::RankDeficient(1))));
    }

    #[test]
    fn lu_solves_small_system() {
        let a = Mat::from_rows(&[
            vec![0.0, 2.0, 1.0],
            vec![1.0, 1.0, 0.0],
            vec![3.0, 0.0, 1.0],
        ])
        .unwrap();
        let x = lu_solve(&a, &[5.0, 3.0, 6.0]).unwrap();
        let b = a.matvec(&x).unwrap();
        for (bi, want) in b.iter().zip([5.0, 3.0, 6.0]) {
            assert!((bi - want).abs() < 1e-12);
        }
        let sing = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(lu_solve(&sing, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gemm_variants_agree() {
        let mut rng = RngStream::new(4, "gemm");
        let a = Mat::from_vec(3, 5, rng.randn(15)).unwrap();
        let b = Mat::from_vec(5, 4, rng.randn(20)).unwrap();
        let c = a.matmul(&b).unwrap();
        let at = a.transpose();
        let bt = b.transpose();
        let mut c_tn = vec![0.0; 12];
        gemm_tn(3, 5, 4, at.as_slice(), b.as_slice(), &mut c_tn, false);
        let mut c_nt = vec![0.0; 12];
        gemm_nt(3, 5, 4, a.as_slice(), bt.as_slice(), &mut c_nt, false);
        for i in 0..12 {
            assert!((c.as_slice()[i] - c_tn[i]).abs() < 1e-12);
            assert!((c.as_slice()[i] - c_nt[i]).abs() < 1e-12);
        }
    }
}
