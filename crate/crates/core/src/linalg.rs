//! Banded storage and factorizations for the assembled finite element
//! operators, plus a few small dense and statistical helpers shared by the
//! solver modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Square matrix with equal lower and upper half-bandwidth, stored row-wise.
///
/// Entry `(i, j)` with `|i - j| <= bw` lives at `i * (2 bw + 1) + (j + bw - i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Banded {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Banded {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        Banded { n, bw, data: vec![0.0; n * (2 * bw + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        i * (2 * self.bw + 1) + (j + self.bw - i)
    }

    #[inline]
    fn in_band(&self, i: usize, j: usize) -> bool {
        i.abs_diff(j) <= self.bw
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.in_band(i, j) {
            self.data[self.offset(i, j)]
        } else {
            0.0
        }
    }

    /// Panics when `(i, j)` falls outside the band.
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside bandwidth {}", self.bw);
        let k = self.offset(i, j);
        self.data[k] += value;
    }

    fn cols(&self, i: usize) -> std::ops::Range<usize> {
        i.saturating_sub(self.bw)..(i + self.bw + 1).min(self.n)
    }

    /// Rows `i_lo..i_hi` whose column `i + off` is in range, for diagonal `d`.
    #[inline]
    fn diagonal_rows(&self, d: usize) -> (usize, usize, isize) {
        let off = d as isize - self.bw as isize;
        let i_lo = (-off).max(0) as usize;
        let i_hi = (self.n as isize - off.max(0)) as usize;
        (i_lo, i_hi, off)
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n);
        let (n, bw) = (self.n, self.bw);
        let w = 2 * bw + 1;
        let xs = x.as_slice();
        let mut out = DVector::zeros(n);
        let os = out.as_mut_slice();
        let edge = |i: usize| -> f64 {
            let lo = i.saturating_sub(bw);
            let hi = (i + bw + 1).min(n);
            (lo..hi).map(|j| self.data[i * w + j + bw - i] * xs[j]).sum()
        };
        if n <= 2 * bw {
            for (i, o) in os.iter_mut().enumerate() {
                *o = edge(i);
            }
            return out;
        }
        for i in (0..bw).chain(n - bw..n) {
            os[i] = edge(i);
        }
        // rows with a full band: row i of the packed data pairs with x[i - bw..=i + bw]
        for ((o, row), xw) in
            os[bw..n - bw].iter_mut().zip(self.data[bw * w..].chunks_exact(w)).zip(xs.windows(w))
        {
            *o = row.iter().zip(xw).map(|(a, b)| a * b).sum();
        }
        out
    }

    pub fn mul_vec_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n);
        let w = 2 * self.bw + 1;
        let xs = x.as_slice();
        let mut out = DVector::zeros(self.n);
        let os = out.as_mut_slice();
        for d in 0..w {
            let (i_lo, i_hi, off) = self.diagonal_rows(d);
            if i_hi <= i_lo {
                continue;
            }
            let j_lo = (i_lo as isize + off) as usize;
            let diag = self.data[i_lo * w + d..].iter().step_by(w);
            for ((o, a), xi) in os[j_lo..j_lo + (i_hi - i_lo)].iter_mut().zip(diag).zip(&xs[i_lo..i_hi]) {
                *o += a * xi;
            }
        }
        out
    }

    /// `self * X` for a dense block of column vectors.
    pub fn mul_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.n);
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for c in 0..x.ncols() {
            let col = self.mul_vec(&x.column(c).into_owned());
            out.set_column(c, &col);
        }
        out
    }

    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.mul_vec(x))
    }

    pub fn bilinear(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        x.dot(&self.mul_vec(y))
    }

    pub fn transpose(&self) -> Banded {
        let mut t = Banded::zeros(self.n, self.bw);
        for i in 0..self.n {
            for j in self.cols(i) {
                let k = t.offset(j, i);
                t.data[k] = self.data[self.offset(i, j)];
            }
        }
        t
    }

    /// `self += alpha * other`; both operands must share dimension and band.
    pub fn add_scaled(&mut self, alpha: f64, other: &Banded) {
        assert_eq!(self.n, other.n);
        assert_eq!(self.bw, other.bw);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Largest absolute entry of `self - self^T`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in self.cols(i) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// LU factorization without pivoting.
    ///
    /// Sound for the operators assembled here: every system matrix has a
    /// positive definite symmetric part, so all leading minors are nonzero.
    /// A pivot that collapses relative to the matrix scale is reported as a
    /// numerical failure.
    pub fn lu(&self) -> Result<BandedLu> {
        let mut f = self.clone();
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let n = f.n;
        let bw = f.bw;
        for k in 0..n {
            let pivot = f.data[f.offset(k, k)];
            if !pivot.is_finite() || pivot.abs() <= 1e-14 * scale {
                return Err(Error::numerical(
                    "linalg",
                    format!("zero pivot {pivot:e} at row {k} in banded LU (matrix scale {scale:e})"),
                ));
            }
            let end = (k + bw + 1).min(n);
            for i in k + 1..end {
                let ik = f.offset(i, k);
                let l = f.data[ik] / pivot;
                if l == 0.0 {
                    continue;
                }
                f.data[ik] = l;
                for j in k + 1..end {
                    let kj = f.offset(k, j);
                    let ij = f.offset(i, j);
                    f.data[ij] -= l * f.data[kj];
                }
            }
        }
        Ok(BandedLu { f })
    }
}

/// Packed unit-lower `L` and upper `U` factors of a [`Banded`] matrix.
#[derive(Debug, Clone)]
pub struct BandedLu {
    f: Banded,
}

impl BandedLu {
    pub fn dim(&self) -> usize {
        self.f.n
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let f = &self.f;
        let (n, bw) = (f.n, f.bw);
        let w = 2 * bw + 1;
        assert_eq!(b.len(), n);
        let mut x = b.clone();
        let xs = x.as_mut_slice();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let row = &f.data[i * w + lo + bw - i..i * w + bw];
            let s: f64 = row.iter().zip(&xs[lo..i]).map(|(a, b)| a * b).sum();
            xs[i] -= s;
        }
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let row = &f.data[i * w + bw + 1..i * w + hi + bw - i];
            let s: f64 = row.iter().zip(&xs[i + 1..hi]).map(|(a, b)| a * b).sum();
            xs[i] = (xs[i] - s) / f.data[i * w + bw];
        }
        x
    }

    /// Solves `A^T x = b` with the same factors.
    pub fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        let f = &self.f;
        let (n, bw) = (f.n, f.bw);
        let w = 2 * bw + 1;
        assert_eq!(b.len(), n);
        let mut x = b.clone();
        let xs = x.as_mut_slice();
        // U^T z = b, column-oriented over the rows of U
        for i in 0..n {
            xs[i] /= f.data[i * w + bw];
            let xi = xs[i];
            let hi = (i + bw + 1).min(n);
            let row = &f.data[i * w + bw + 1..i * w + hi + bw - i];
            for (t, a) in xs[i + 1..hi].iter_mut().zip(row) {
                *t -= a * xi;
            }
        }
        // L^T x = z, column-oriented over the rows of L
        for i in (0..n).rev() {
            let xi = xs[i];
            let lo = i.saturating_sub(bw);
            let row = &f.data[i * w + lo + bw - i..i * w + bw];
            for (t, a) in xs[lo..i].iter_mut().zip(row) {
                *t -= a * xi;
            }
        }
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            let col = self.solve(&b.column(c).into_owned());
            out.set_column(c, &col);
        }
        out
    }
}

/// Relative residual threshold enforced on every time-stepping solve.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;

/// Solve with a posteriori residual control and at most one step of
/// iterative refinement.
pub fn solve_checked(
    matrix: &Banded,
    lu: &BandedLu,
    rhs: &DVector<f64>,
    transpose: bool,
) -> Result<DVector<f64>> {
    let bnorm = rhs.norm();
    if bnorm == 0.0 {
        return Ok(DVector::zeros(rhs.len()));
    }
    let apply = |x: &DVector<f64>| if transpose { matrix.mul_vec_transpose(x) } else { matrix.mul_vec(x) };
    let solve = |b: &DVector<f64>| if transpose { lu.solve_transpose(b) } else { lu.solve(b) };
    let mut x = solve(rhs);
    let mut r = rhs - apply(&x);
    if r.norm() > SOLVE_RESIDUAL_TOL * bnorm {
        x += solve(&r);
        r = rhs - apply(&x);
    }
    let rel = r.norm() / bnorm;
    if !rel.is_finite() || rel > SOLVE_RESIDUAL_TOL {
        return Err(Error::numerical(
            "linalg",
            format!("linear solve relative residual {rel:e} exceeds {SOLVE_RESIDUAL_TOL:e}"),
        ));
    }
    Ok(x)
}

/// Pairwise summation in a fixed tree order, so the result depends only on
/// the order of `values` and never on how they were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        pairwise_sum(values) / values.len() as f64
    }
}

/// Element-wise pairwise mean of equally sized vectors.
pub fn pairwise_mean_vectors(vectors: &[DVector<f64>]) -> DVector<f64> {
    assert!(!vectors.is_empty());
    let n = vectors[0].len();
    let mut column = vec![0.0; vectors.len()];
    DVector::from_fn(n, |i, _| {
        for (c, v) in column.iter_mut().zip(vectors) {
            *c = v[i];
        }
        pairwise_mean(&column)
    })
}

/// Ordinary least squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2, "line fit needs at least two points");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    LineFit { slope, intercept, r_squared }
}

/// Eigen-pairs of the symmetric-definite pencil `(a, m)` for small dense
/// matrices, ascending; eigenvectors are `m`-orthonormal columns.
pub fn generalized_symmetric_eigen(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let chol = m.clone().cholesky()?;
    let l = chol.l();
    let l_inv = l.clone().try_inverse()?;
    let mut c = &l_inv * a * l_inv.transpose();
    c = (&c + c.transpose()) * 0.5;
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(a.nrows(), order.len(), |r, k| eig.eigenvectors[(r, order[k])]);
    Some((values, l_inv.transpose() * vecs))
}
