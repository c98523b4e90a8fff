//! Dense real matrices and Moore-Penrose generalized inverses.
//!
//! [`pinv`] uses a one-sided Jacobi singular value decomposition, which is
//! rank revealing and accurate to high relative precision on the small
//! matrices used by the action functional (`d + m` rarely exceeds 20).
//! [`pinv_partitioned`] assembles the inverse of a 2x2 block matrix from
//! the closed-form block expressions, calling [`pinv`] for every inner
//! generalized inverse.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
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
            return Err(Error::input(format!(
                "matrix data has {} entries, expected {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::input("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, other: &Matrix) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Matrix) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Copies the `rows x cols` block whose top-left corner is `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |r, c| self[(r0 + r, c0 + c)])
    }

    /// Assembles `[[a, d], [b, c]]`.
    pub fn assemble(a: &Matrix, d: &Matrix, b: &Matrix, c: &Matrix) -> Self {
        let rows = a.rows + b.rows;
        let cols = a.cols + d.cols;
        Self::from_fn(rows, cols, |r, col| match (r < a.rows, col < a.cols) {
            (true, true) => a[(r, col)],
            (true, false) => d[(r, col - a.cols)],
            (false, true) => b[(r - a.rows, col)],
            (false, false) => c[(r - a.rows, col - a.cols)],
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// `M = [[A, D], [B, C]]` with conformable blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedMatrix {
    pub a: Matrix,
    pub d: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

impl PartitionedMatrix {
    pub fn new(a: Matrix, d: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        if a.rows != d.rows || b.rows != c.rows || a.cols != b.cols || d.cols != c.cols {
            return Err(Error::input(format!(
                "non-conformable blocks: A {}x{}, D {}x{}, B {}x{}, C {}x{}",
                a.rows, a.cols, d.rows, d.cols, b.rows, b.cols, c.rows, c.cols
            )));
        }
        Ok(Self { a, d, b, c })
    }

    /// Splits `m` after `row_split` rows and `col_split` columns.
    pub fn split(m: &Matrix, row_split: usize, col_split: usize) -> Result<Self> {
        if row_split > m.rows || col_split > m.cols {
            return Err(Error::input("split point outside matrix"));
        }
        let (r2, c2) = (m.rows - row_split, m.cols - col_split);
        Self::new(
            m.block(0, 0, row_split, col_split),
            m.block(0, col_split, row_split, c2),
            m.block(row_split, 0, r2, col_split),
            m.block(row_split, col_split, r2, c2),
        )
    }

    pub fn flatten(&self) -> Matrix {
        Matrix::assemble(&self.a, &self.d, &self.b, &self.c)
    }

    /// The degenerate noise matrix `[[0_dxd, 0_dxm], [0_mxd, I_m]]`.
    pub fn noise_selector(d: usize, m: usize) -> Self {
        Self {
            a: Matrix::zeros(d, d),
            d: Matrix::zeros(d, m),
            b: Matrix::zeros(m, d),
            c: Matrix::identity(m),
        }
    }
}

/// Thin singular value decomposition `A = U diag(s) V^T`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

/// One-sided (Hestenes) Jacobi SVD. For `rows < cols` the transpose is
/// decomposed and the factors swapped.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::input("matrix has non-finite entries"));
    }
    if m.rows < m.cols {
        let t = svd(&m.transpose())?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    let (rows, n) = (m.rows, m.cols);
    // Column-major working copy: cols[j] is column j.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..rows).map(|i| m[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    const MAX_SWEEPS: usize = 80;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = cols[p]
                    .iter()
                    .zip(&cols[q])
                    .fold((0.0, 0.0, 0.0), |(a, b, g), (x, y)| (a + x * x, b + y * y, g + x * y));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u = Matrix::zeros(rows, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        for i in 0..rows {
            u[(i, k)] = if sigma > 0.0 { cols[j][i] / sigma } else { 0.0 };
        }
        for i in 0..n {
            vm[(i, k)] = v[j][i];
        }
    }
    Ok(Svd { u, s, v: vm })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Singular values below `max(rows, cols) * eps * s_max` are treated as zero.
pub fn rank_tolerance(rows: usize, cols: usize, s_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * s_max
}

/// Moore-Penrose pseudoinverse.
pub fn pinv(m: &Matrix) -> Result<Matrix> {
    if m.rows == 0 || m.cols == 0 {
        return Ok(Matrix::zeros(m.cols, m.rows));
    }
    let svd = svd(m)?;
    let tol = rank_tolerance(m.rows, m.cols, svd.s.first().copied().unwrap_or(0.0));
    Ok(pinv_from_svd(m, svd, tol))
}

/// Pseudoinverse discarding singular values `<= tol`.
fn pinv_cutoff(m: &Matrix, tol: f64) -> Result<Matrix> {
    if m.rows == 0 || m.cols == 0 {
        return Ok(Matrix::zeros(m.cols, m.rows));
    }
    Ok(pinv_from_svd(m, svd(m)?, tol))
}

fn pinv_from_svd(m: &Matrix, Svd { u, s, v }: Svd, tol: f64) -> Matrix {
    let k = s.len();
    let mut out = Matrix::zeros(m.cols, m.rows);
    for idx in 0..k {
        if s[idx] <= tol {
            continue;
        }
        let inv = 1.0 / s[idx];
        for i in 0..m.cols {
            let vi = v[(i, idx)] * inv;
            if vi == 0.0 {
                continue;
            }
            for j in 0..m.rows {
                out[(i, j)] += vi * u[(j, idx)];
            }
        }
    }
    out
}

/// Numerical rank under the [`rank_tolerance`] cutoff.
pub fn rank(m: &Matrix) -> Result<usize> {
    let s = svd(m)?.s;
    let tol = rank_tolerance(m.rows, m.cols, s.first().copied().unwrap_or(0.0));
    Ok(s.iter().filter(|&&x| x > tol).count())
}

/// 2-norm condition number (`inf` when singular).
pub fn condition_number(m: &Matrix) -> Result<f64> {
    let s = svd(m)?.s;
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => Ok(hi / lo),
        (Some(_), Some(_)) => Ok(f64::INFINITY),
        _ => Ok(1.0),
    }
}

/// Result of [`pinv_partitioned_with_diagnostics`].
#[derive(Debug, Clone)]
pub struct PartitionedPinv {
    pub inverse: Matrix,
    /// Condition number of the inner `I + T^T T` system.
    pub inner_condition: f64,
}

pub fn pinv_partitioned(m: &PartitionedMatrix) -> Result<Matrix> {
    Ok(pinv_partitioned_with_diagnostics(m)?.inverse)
}

/// Block-wise pseudoinverse of `[[A, D], [B, C]]`:
///
/// ```text
/// K = A*A + B*B          E = A*D + B*C
/// R = D - A K+ E         S = C - B K+ E
/// L = R*R + S*S          T = K+ E (I - L+ L)
/// F = L+ R* + (I - L+ L)(I + T*T)^-1 (K+ E)* K+ (A* - E L+ R*)
/// H = L+ S* + (I - L+ L)(I + T*T)^-1 (K+ E)* K+ (B* - E L+ S*)
/// M+ = [[K+ (A* - E F), K+ (B* - E H)], [F, H]]
/// ```
///
/// `K` and `L` are never formed. With `G = [A; B]` and `N = [R; S]`,
/// `K+ [A* B*] = G+`, `K+ E = G+ [D; C]` and `L+ [R* S*] = N+`, which keeps
/// the error proportional to the condition number instead of its square.
pub fn pinv_partitioned_with_diagnostics(m: &PartitionedMatrix) -> Result<PartitionedPinv> {
    let PartitionedMatrix { a, d, b, c } = m;
    PartitionedMatrix::new(a.clone(), d.clone(), b.clone(), c.clone())?;
    for blk in [a, d, b, c] {
        if !blk.is_finite() {
            return Err(Error::input("partitioned matrix has non-finite entries"));
        }
    }
    let (r1, r2) = (a.rows, b.rows);
    let frob = [a, d, b, c]
        .iter()
        .flat_map(|m| m.as_slice())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let g = stack(a, b);
    let (gp, kappa) = if g.rows == 0 || g.cols == 0 {
        (Matrix::zeros(g.cols, g.rows), 1.0)
    } else {
        let sv = svd(&g)?;
        let gtol = rank_tolerance(g.rows, g.cols, sv.s.first().copied().unwrap_or(0.0));
        let kept: Vec<f64> = sv.s.iter().copied().filter(|&x| x > gtol).collect();
        let kappa = match (kept.first(), kept.last()) {
            (Some(hi), Some(lo)) => hi / lo,
            _ => 1.0,
        };
        (pinv_from_svd(&g, sv, gtol), kappa)
    };
    // R and S vanish exactly when the right block columns lie in the span of
    // the left ones. Their rounding noise then grows like eps cond(G) |M|.
    let tol = (r1 + r2).max(a.cols + d.cols) as f64 * f64::EPSILON * frob * kappa;
    let kpe = gp.matmul(&stack(d, c));
    let r = d.sub(&a.matmul(&kpe));
    let s = c.sub(&b.matmul(&kpe));
    let np = pinv_cutoff(&stack(&r, &s), tol)?;
    let lp_rt = np.block(0, 0, np.rows, r1);
    let lp_st = np.block(0, r1, np.rows, r2);
    let q = d.cols;
    let proj = Matrix::identity(q).sub(&np.matmul(&stack(&r, &s)));
    let t = kpe.matmul(&proj);
    let inner = Matrix::identity(q).add(&t.transpose().matmul(&t));
    let inner_condition = condition_number(&inner)?;

    let kp_at = gp.block(0, 0, gp.rows, r1);
    let kp_bt = gp.block(0, r1, gp.rows, r2);
    // (K+E)* K+ (A* - E L+ R*) = (K+E)* (K+A* - K+E L+R*), and likewise for B.
    let kpe_t = kpe.transpose();
    let rhs_f = kpe_t.matmul(&kp_at.sub(&kpe.matmul(&lp_rt)));
    let rhs_h = kpe_t.matmul(&kp_bt.sub(&kpe.matmul(&lp_st)));
    let f = lp_rt.add(&proj.matmul(&solve_spd(&inner, &rhs_f)?));
    let h = lp_st.add(&proj.matmul(&solve_spd(&inner, &rhs_h)?));

    let top_left = kp_at.sub(&kpe.matmul(&f));
    let top_right = kp_bt.sub(&kpe.matmul(&h));
    Ok(PartitionedPinv {
        inverse: Matrix::assemble(&top_left, &top_right, &f, &h),
        inner_condition,
    })
}

fn stack(top: &Matrix, bottom: &Matrix) -> Matrix {
    let mut data = top.data.clone();
    data.extend_from_slice(&bottom.data);
    Matrix {
        rows: top.rows + bottom.rows,
        cols: top.cols,
        data,
    }
}

/// Cholesky factor `L` with `A = L L^T` (lower triangular, row-major).
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols {
        return Err(Error::input("cholesky needs a square matrix"));
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(Error::input("matrix is not positive definite"));
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Solves `A X = B` for symmetric positive definite `A`.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::input("solve_spd shape mismatch"));
    }
    let l = cholesky(a)?;
    let n = a.rows;
    let mut x = b.clone();
    for col in 0..b.cols {
        for i in 0..n {
            let mut v = x[(i, col)];
            for k in 0..i {
                v -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = v / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut v = x[(i, col)];
            for k in (i + 1)..n {
                v -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = v / l[(i, i)];
        }
    }
    Ok(x)
}

/// Symmetric positive definite band matrix stored by lower diagonals:
/// `band[i][k]` holds `A[i][i - k]` for `k <= bandwidth`.
#[derive(Debug, Clone)]
pub struct BandSpd {
    n: usize,
    bandwidth: usize,
    band: Vec<Vec<f64>>,
}

impl BandSpd {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            band: vec![vec![0.0; bandwidth + 1]; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    /// Adds `v` to `A[i][j]` (and symmetrically `A[j][i]`); `|i - j|` must be within the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let k = hi - lo;
        assert!(k <= self.bandwidth, "entry outside band");
        self.band[hi][k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let k = hi - lo;
        if k > self.bandwidth {
            0.0
        } else {
            self.band[hi][k]
        }
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.band[i][0]
    }

    /// Solves `A x = rhs` by band Cholesky.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let (n, w) = (self.n, self.bandwidth);
        if rhs.len() != n {
            return Err(Error::input("band solve shape mismatch"));
        }
        // l[i][k] = L[i][i - k]
        let mut l = vec![vec![0.0; w + 1]; n];
        for i in 0..n {
            let j0 = i.saturating_sub(w);
            for j in j0..=i {
                let mut v = self.band[i][i - j];
                let k0 = j0.max(j.saturating_sub(w));
                for k in k0..j {
                    v -= l[i][i - k] * l[j][j - k];
                }
                if j == i {
                    if v <= 0.0 || !v.is_finite() {
                        return Err(Error::input("band matrix is not positive definite"));
                    }
                    l[i][0] = v.sqrt();
                } else {
                    l[i][i - j] = v / l[j][0];
                }
            }
        }
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut v = y[i];
            for k in i.saturating_sub(w)..i {
                v -= l[i][i - k] * y[k];
            }
            y[i] = v / l[i][0];
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in (i + 1)..n.min(i + w + 1) {
                v -= l[k][k - i] * y[k];
            }
            y[i] = v / l[i][0];
        }
        Ok(y)
    }
}

// Property audit -------------------------------------------------------------------

/// Largest scaled residuals of the four Penrose identities over a batch of
/// random matrices, together with the block-formula comparison.
///
/// Residuals are relative: `|A A+ A - A| / |A|`, `|A+ A A+ - A+| / |A+|`,
/// and the symmetry defects of `A A+` and `A+ A` divided by their own size
/// (max-abs norms throughout, zero matrices count as scale 1).
#[derive(Debug, Clone, Serialize)]
pub struct PenroseReport {
    pub trials: usize,
    pub max_dim: usize,
    pub seed: u64,
    pub rank_deficient: usize,
    pub reconstruction: f64,
    pub reflexive: f64,
    pub left_symmetry: f64,
    pub right_symmetry: f64,
    /// `|pinv_partitioned - pinv| / max(1, |pinv|)` over random block splits.
    pub partitioned: f64,
    pub partitioned_trials: usize,
    /// `|pinv([1 1]) - [1/2 1/2]^T|`.
    pub row_example: f64,
    /// `|pinv(S) - S|` for the degenerate noise selectors with `d, m <= 4`.
    pub selector_example: f64,
}

impl PenroseReport {
    pub fn identities_hold(&self, tol: f64) -> bool {
        [self.reconstruction, self.reflexive, self.left_symmetry, self.right_symmetry]
            .iter()
            .all(|r| *r <= tol)
    }
}

fn scaled(defect: &Matrix, reference: &Matrix) -> f64 {
    let s = reference.max_abs();
    defect.max_abs() / if s == 0.0 { 1.0 } else { s }
}

/// Random matrices with shapes up to `max_dim x max_dim`. Every third one is
/// a product of thin factors, so its rank is below both dimensions.
pub fn penrose_audit(trials: usize, max_dim: usize, seed: u64) -> Result<PenroseReport> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    if max_dim == 0 {
        return Err(Error::input("max_dim must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PenroseReport {
        trials,
        max_dim,
        seed,
        rank_deficient: 0,
        reconstruction: 0.0,
        reflexive: 0.0,
        left_symmetry: 0.0,
        right_symmetry: 0.0,
        partitioned: 0.0,
        partitioned_trials: 0,
        row_example: 0.0,
        selector_example: 0.0,
    };
    for trial in 0..trials {
        let rows = rng.random_range(1..=max_dim);
        let cols = rng.random_range(1..=max_dim);
        let mut gauss = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = if trial % 3 == 2 && rows.min(cols) > 1 {
            let inner = rows.min(cols) - 1;
            report.rank_deficient += 1;
            gauss(rows, inner).matmul(&gauss(inner, cols))
        } else {
            gauss(rows, cols)
        };
        let ap = pinv(&a)?;
        let aap = a.matmul(&ap);
        let apa = ap.matmul(&a);
        report.reconstruction = report.reconstruction.max(scaled(&aap.matmul(&a).sub(&a), &a));
        report.reflexive = report.reflexive.max(scaled(&apa.matmul(&ap).sub(&ap), &ap));
        report.left_symmetry = report.left_symmetry.max(scaled(&aap.sub(&aap.transpose()), &aap));
        report.right_symmetry = report.right_symmetry.max(scaled(&apa.sub(&apa.transpose()), &apa));
        if rows > 1 && cols > 1 {
            let rs = rng.random_range(1..rows);
            let cs = rng.random_range(1..cols);
            let blocks = PartitionedMatrix::split(&a, rs, cs)?;
            let bp = pinv_partitioned(&blocks)?;
            report.partitioned = report.partitioned.max(bp.sub(&ap).max_abs() / ap.max_abs().max(1.0));
            report.partitioned_trials += 1;
        }
    }
    let row = Matrix::from_rows(&[vec![1.0, 1.0]])?;
    let half = Matrix::from_rows(&[vec![0.5], vec![0.5]])?;
    report.row_example = pinv(&row)?.sub(&half).max_abs();
    for d in 0..=4 {
        for m in 1..=4 {
            let s = PartitionedMatrix::noise_selector(d, m);
            let flat = s.flatten();
            let e = pinv(&flat)?.sub(&flat).max_abs().max(pinv_partitioned(&s)?.sub(&flat).max_abs());
            report.selector_example = report.selector_example.max(e);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.rows() == b.rows() && a.cols() == b.cols() && a.sub(b).max_abs() <= tol
    }

    #[test]
    fn row_vector_of_ones() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let ap = pinv(&a).unwrap();
        let expected = Matrix::from_rows(&[vec![0.5], vec![0.5]]).unwrap();
        assert!(close(&ap, &expected, 1e-12), "{ap:?}");
    }

    #[test]
    fn identity_is_its_own_inverse() {
        for n in 1..6 {
            let i = Matrix::identity(n);
            assert!(close(&pinv(&i).unwrap(), &i, 1e-15));
        }
    }

    #[test]
    fn zero_matrix_inverts_to_transposed_zero() {
        let z = Matrix::zeros(3, 2);
        let zp = pinv(&z).unwrap();
        assert_eq!((zp.rows(), zp.cols()), (2, 3));
        assert_eq!(zp.max_abs(), 0.0);
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        let m = Matrix::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(pinv(&m), Err(Error::Input(_))));
    }

    #[test]
    fn noise_selector_is_self_inverse() {
        for (d, m) in [(1, 1), (2, 3), (3, 1)] {
            let xi = PartitionedMatrix::noise_selector(d, m);
            let xp = pinv_partitioned(&xi).unwrap();
            assert!(close(&xp, &xi.flatten(), 1e-12));
            // Xi Xi+ is not the identity.
            let prod = xi.flatten().matmul(&xp);
            assert!(prod.sub(&Matrix::identity(d + m)).max_abs() > 0.5);
        }
    }

    #[test]
    fn partitioned_identity() {
        let p = PartitionedMatrix::split(&Matrix::identity(2), 1, 1).unwrap();
        assert!(close(&pinv_partitioned(&p).unwrap(), &Matrix::identity(2), 1e-14));
    }

    #[test]
    fn partitioned_shape_mismatch() {
        let err = PartitionedMatrix::new(
            Matrix::zeros(2, 2),
            Matrix::zeros(1, 2),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
        );
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn band_solve_matches_dense() {
        let n = 9;
        let w = 2;
        let mut band = BandSpd::zeros(n, w);
        let mut dense = Matrix::zeros(n, n);
        for i in 0..n {
            band.add(i, i, 6.0 + i as f64);
            dense[(i, i)] = 6.0 + i as f64;
            for k in 1..=w {
                if i >= k {
                    let v = -1.0 / k as f64;
                    band.add(i, i - k, v);
                    dense[(i, i - k)] = v;
                    dense[(i - k, i)] = v;
                }
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = band.solve(&rhs).unwrap();
        let xd = solve_spd(&dense, &Matrix::from_vec(n, 1, rhs.clone()).unwrap()).unwrap();
        for i in 0..n {
            assert!((x[i] - xd[(i, 0)]).abs() < 1e-13);
        }
    }

    #[test]
    fn condition_of_singular_is_infinite() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(rank(&m).unwrap(), 1);
        assert!(condition_number(&m).unwrap() > 1e15);
    }

    #[test]
    fn audit_on_small_batch() {
        let r = penrose_audit(200, 6, 3).unwrap();
        assert!(r.identities_hold(1e-10), "{r:?}");
        assert!(r.partitioned <= 1e-8, "{r:?}");
        assert!(r.rank_deficient > 0);
        assert!(r.row_example <= 1e-12 && r.selector_example <= 1e-12);
    }
}
