//! Dense row-major matrices and symmetric eigensolvers.
//!
//! Every reduction here runs in a fixed order so that results are
//! bit-reproducible for identical inputs.

use crate::error::{usage, Error, Result};

/// Default convergence tolerance for [`eig_sym`], relative to `‖m‖_F`.
pub const DEFAULT_EIG_TOL: f64 = 1e-12;
/// Default sweep budget for [`eig_sym`].
pub const DEFAULT_MAX_SWEEPS: usize = 100;
/// Largest dimension handled by cyclic Jacobi; larger input goes through
/// Householder tridiagonalisation and implicit QL.
pub const JACOBI_MAX_DIM: usize = 64;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return usage(format!("matrix data length {} does not match {rows}x{cols}", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return usage(format!("row {i} has length {}, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the column range `[start, start + len)` into a new matrix.
    pub fn column_block(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols {
            return usage(format!("column block {start}..{} exceeds {} columns", start + len, self.cols));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Ok(Self { rows: self.rows, cols: len, data })
    }
}

/// `c = alpha · a · b + beta · c` on strided views of row-major buffers,
/// with `c` dense row-major `m × n`.
///
/// Backed by a blocked single-threaded kernel whose summation order depends
/// only on the shapes, so results are reproducible.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard product `a · b`. Each output entry accumulates over the inner
/// index in ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return usage(format!("matmul dimension mismatch: {}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

pub fn transpose(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.cols, m.rows);
    for r in 0..m.rows {
        for c in 0..m.cols {
            out.data[c * m.rows + r] = m.data[r * m.cols + c];
        }
    }
    out
}

pub fn trace(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return usage(format!("trace of non-square {}x{} matrix", m.rows, m.cols));
    }
    let mut s = 0.0;
    for i in 0..m.rows {
        s += m.get(i, i);
    }
    Ok(s)
}

pub fn frobenius_norm_sq(m: &Matrix) -> f64 {
    let mut s = 0.0;
    for v in &m.data {
        s += v * v;
    }
    s
}

/// Gram matrix of the rows of `j`: entry `(a, b)` is the inner product of
/// per-sample gradients `a` and `b`.
///
/// `j` is stored samples-as-rows (`|B| × P`), so this is `j · jᵀ`, which is
/// the `|B| × |B|` matrix whose non-zero spectrum matches the `P × P` outer
/// product `jᵀ · j`. The upper triangle is mirrored into the lower one so
/// the result is exactly symmetric.
pub fn gram_from_jacobian(j: &Matrix) -> Result<Matrix> {
    if j.is_empty() {
        return usage("gram of an empty jacobian");
    }
    let (n, p) = (j.rows, j.cols);
    let mut g = Matrix::zeros(n, n);
    gemm(n, p, n, 1.0, &j.data, (p, 1), &j.data, (1, p), 0.0, &mut g.data);
    for a in 0..n {
        for b in a + 1..n {
            g.data[b * n + a] = g.data[a * n + b];
        }
    }
    Ok(g)
}

/// Eigenvalues of a symmetric matrix, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    /// Jacobi sweeps, or QL iterations on the tridiagonal path.
    pub iterations_used: usize,
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for p in 0..n {
        for q in p + 1..n {
            let v = a[p * n + q];
            s += v * v;
        }
    }
    (2.0 * s).sqrt()
}

/// Eigenvalues of a symmetric matrix, sorted descending.
///
/// Matrices up to [`JACOBI_MAX_DIM`] use [`eig_sym_jacobi`]; larger ones use
/// [`eig_sym_tridiagonal`]. Both stop once the remaining off-diagonal
/// Frobenius norm is below `tol · ‖m‖_F`.
pub fn eig_sym(m: &Matrix, max_sweeps: usize, tol: f64) -> Result<EigenResult> {
    if m.rows <= JACOBI_MAX_DIM {
        eig_sym_jacobi(m, max_sweeps, tol)
    } else {
        eig_sym_tridiagonal(m, max_sweeps, tol)
    }
}

/// Validates input and returns `‖m‖_F` and the exactly symmetrised data.
fn prepare_symmetric(m: &Matrix, tol: f64) -> Result<(f64, Vec<f64>)> {
    if !m.is_square() {
        return usage(format!("eig_sym of non-square {}x{} matrix", m.rows, m.cols));
    }
    if m.rows == 0 {
        return usage("eig_sym of an empty matrix");
    }
    if !m.is_finite() {
        return usage("eig_sym input contains non-finite entries");
    }
    if !(tol > 0.0) {
        return usage(format!("eig_sym tolerance must be positive, got {tol}"));
    }
    let n = m.rows;
    let norm = frobenius_norm_sq(m).sqrt();
    let mut asym: f64 = 0.0;
    for p in 0..n {
        for q in p + 1..n {
            asym = asym.max((m.get(p, q) - m.get(q, p)).abs());
        }
    }
    if asym > 1e-12 * norm {
        return usage(format!("eig_sym input is not symmetric (max asymmetry {asym:e}, norm {norm:e})"));
    }
    let mut a = m.data.clone();
    for p in 0..n {
        for q in p + 1..n {
            let v = 0.5 * (a[p * n + q] + a[q * n + p]);
            a[p * n + q] = v;
            a[q * n + p] = v;
        }
    }
    Ok((norm, a))
}

fn sorted_descending(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|x, y| y.total_cmp(x));
    v
}

/// Symmetric eigenvalues by cyclic Jacobi rotation.
///
/// Converges once the off-diagonal Frobenius norm drops below
/// `tol · ‖m‖_F`; one further sweep is then applied, which by quadratic
/// convergence drives the residual far below the threshold and keeps the
/// small eigenvalues of PSD input relatively accurate.
pub fn eig_sym_jacobi(m: &Matrix, max_sweeps: usize, tol: f64) -> Result<EigenResult> {
    let (norm, mut a) = prepare_symmetric(m, tol)?;
    let n = m.rows;
    let threshold = tol * norm;
    let mut sweeps = 0;
    let mut polished = false;
    loop {
        let off = off_diagonal_norm(&a, n);
        if off == 0.0 || (off <= threshold && polished) {
            break;
        }
        if off <= threshold {
            polished = true;
        } else if sweeps >= max_sweeps {
            return Err(Error::Numerical {
                message: format!("jacobi did not converge within {max_sweeps} sweeps"),
                off_norm: off,
            });
        }
        if sweeps >= max_sweeps {
            // Converged but no budget left for the polishing sweep.
            break;
        }
        jacobi_sweep(&mut a, n);
        sweeps += 1;
    }
    let eigenvalues = sorted_descending((0..n).map(|i| a[i * n + i]).collect());
    Ok(EigenResult { eigenvalues, iterations_used: sweeps })
}

/// Symmetric eigenvalues by Householder reduction to tridiagonal form
/// followed by implicit QL with Wilkinson shifts.
///
/// A subdiagonal entry is deflated when it is negligible against its
/// diagonal neighbours or below `tol · ‖m‖_F / (2√n)`, which bounds the
/// discarded off-diagonal Frobenius norm by `tol · ‖m‖_F`. The iteration
/// budget is `max_sweeps · n` QL steps.
pub fn eig_sym_tridiagonal(m: &Matrix, max_sweeps: usize, tol: f64) -> Result<EigenResult> {
    let (norm, mut a) = prepare_symmetric(m, tol)?;
    let n = m.rows;
    let (mut d, mut e) = householder_tridiagonal(&mut a, n);
    let floor = 0.5 * tol * norm / (n as f64).sqrt();
    let budget = max_sweeps.saturating_mul(n);
    let steps = tridiagonal_ql(&mut d, &mut e, floor, budget)?;
    Ok(EigenResult { eigenvalues: sorted_descending(d), iterations_used: steps })
}

/// Reduces the symmetric matrix in `a` (destroyed) to tridiagonal form.
/// Returns the diagonal and the subdiagonal, the latter with
/// `e[i]` coupling `d[i]` and `d[i + 1]` and `e[n - 1] = 0`.
fn householder_tridiagonal(a: &mut [f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let mut scale = 0.0;
            for k in 0..=l {
                scale += a[i * n + k].abs();
            }
            if scale == 0.0 {
                e[i] = a[i * n + l];
            } else {
                for k in 0..=l {
                    a[i * n + k] /= scale;
                    h += a[i * n + k] * a[i * n + k];
                }
                let f = a[i * n + l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i * n + l] = f - g;
                let mut f = 0.0;
                for j in 0..=l {
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[j * n + k] * a[i * n + k];
                    }
                    for k in j + 1..=l {
                        g += a[k * n + j] * a[i * n + k];
                    }
                    e[j] = g / h;
                    f += e[j] * a[i * n + j];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = a[i * n + j];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[j * n + k] -= f * e[k] + g * a[i * n + k];
                    }
                }
            }
        } else {
            e[i] = a[i * n + l];
        }
        d[i] = h;
    }
    for i in 0..n {
        d[i] = a[i * n + i];
    }
    // Shift so that e[i] couples rows i and i + 1.
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    (d, e)
}

/// Implicit QL on a symmetric tridiagonal matrix; eigenvalues land in `d`.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64], floor: f64, budget: usize) -> Result<usize> {
    let n = d.len();
    let mut steps = 0;
    for l in 0..n {
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd || e[m].abs() <= floor {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            if steps >= budget {
                let off = (2.0 * e.iter().map(|v| v * v).sum::<f64>()).sqrt();
                return Err(Error::Numerical {
                    message: format!("tridiagonal QL did not converge within {budget} iterations"),
                    off_norm: off,
                });
            }
            steps += 1;
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(steps)
}

pub fn eig_sym_default(m: &Matrix) -> Result<EigenResult> {
    eig_sym(m, DEFAULT_MAX_SWEEPS, DEFAULT_EIG_TOL)
}

fn jacobi_sweep(a: &mut [f64], n: usize) {
    for p in 0..n {
        for q in p + 1..n {
            let apq = a[p * n + q];
            if apq == 0.0 {
                continue;
            }
            let app = a[p * n + p];
            let aqq = a[q * n + q];
            // Negligible relative to both diagonal entries.
            let g = 100.0 * apq.abs();
            if app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                continue;
            }
            let h = aqq - app;
            let t = if h.abs() + g == h.abs() {
                apq / h
            } else {
                let theta = 0.5 * h / apq;
                let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                if theta < 0.0 {
                    -t
                } else {
                    t
                }
            };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = t * c;
            let tau = s / (1.0 + c);
            a[p * n + p] = app - t * apq;
            a[q * n + q] = aqq + t * apq;
            a[p * n + q] = 0.0;
            a[q * n + p] = 0.0;
            for r in 0..n {
                if r == p || r == q {
                    continue;
                }
                let arp = a[r * n + p];
                let arq = a[r * n + q];
                let nrp = arp - s * (arq + arp * tau);
                let nrq = arq + s * (arp - arq * tau);
                a[r * n + p] = nrp;
                a[p * n + r] = nrp;
                a[r * n + q] = nrq;
                a[q * n + r] = nrq;
            }
        }
    }
}
