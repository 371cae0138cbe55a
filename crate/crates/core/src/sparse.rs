//! Sparse symmetric matrix helpers on top of `nalgebra-sparse`.

use nalgebra::{DMatrix, SymmetricEigen};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::ops::serial::spsolve_csc_lower_triangular;
use nalgebra_sparse::ops::Op;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn csc_from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let mut coo = CooMatrix::new(n, n);
    for &(i, j, v) in triplets {
        coo.push(i, j, v);
    }
    CscMatrix::from(&coo)
}

/// `out = A x` for a square CSC matrix.
pub fn spmv(a: &CscMatrix<f64>, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, col) in a.col_iter().enumerate() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for (&i, &v) in col.row_indices().iter().zip(col.values()) {
            out[i] += v * xj;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn to_dense(a: &CscMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.nrows(), a.ncols());
    for (j, col) in a.col_iter().enumerate() {
        for (&i, &v) in col.row_indices().iter().zip(col.values()) {
            d[(i, j)] += v;
        }
    }
    d
}

/// Entry lookup in a CSC matrix; zero when structurally absent.
pub fn get(a: &CscMatrix<f64>, i: usize, j: usize) -> f64 {
    let col = a.col(j);
    match col.row_indices().binary_search(&i) {
        Ok(pos) => col.values()[pos],
        Err(_) => 0.0,
    }
}

/// The three sparse pieces of `Q(κ²) = κ⁴C + 2κ²G + GC⁻¹G` stored on a common
/// pattern so that `Q` can be re-assembled in O(nnz) for any κ².
#[derive(Debug, Clone)]
pub struct PrecisionParts {
    pattern: CscMatrix<f64>,
    c_vals: Vec<f64>,
    g_vals: Vec<f64>,
    k_vals: Vec<f64>,
}

impl PrecisionParts {
    pub fn new(c_diag: &[f64], g: &CscMatrix<f64>) -> Self {
        let n = c_diag.len();
        // K = G C⁻¹ G, G symmetric.
        let mut k_trip = Vec::new();
        let cols: Vec<Vec<(usize, f64)>> = g
            .col_iter()
            .map(|c| c.row_indices().iter().copied().zip(c.values().iter().copied()).collect())
            .collect();
        for (m, col) in cols.iter().enumerate() {
            let inv = 1.0 / c_diag[m];
            for &(i, gim) in col {
                for &(j, gmj) in col {
                    k_trip.push((i, j, gim * gmj * inv));
                }
            }
        }
        let k = csc_from_triplets(n, &k_trip);

        let mut pat_trip: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 0.0)).collect();
        for (j, col) in g.col_iter().enumerate() {
            pat_trip.extend(col.row_indices().iter().map(|&i| (i, j, 0.0)));
        }
        for (j, col) in k.col_iter().enumerate() {
            pat_trip.extend(col.row_indices().iter().map(|&i| (i, j, 0.0)));
        }
        let pattern = csc_from_triplets(n, &pat_trip);

        let nnz = pattern.nnz();
        let mut c_vals = vec![0.0; nnz];
        let mut g_vals = vec![0.0; nnz];
        let mut k_vals = vec![0.0; nnz];
        let offsets = pattern.col_offsets().to_vec();
        let rows = pattern.row_indices().to_vec();
        for j in 0..n {
            for p in offsets[j]..offsets[j + 1] {
                let i = rows[p];
                if i == j {
                    c_vals[p] = c_diag[i];
                }
                g_vals[p] = get(g, i, j);
                k_vals[p] = get(&k, i, j);
            }
        }
        Self { pattern, c_vals, g_vals, k_vals }
    }

    pub fn n(&self) -> usize {
        self.pattern.nrows()
    }

    pub fn assemble(&self, kappa2: f64) -> CscMatrix<f64> {
        let k4 = kappa2 * kappa2;
        let k2 = 2.0 * kappa2;
        let vals: Vec<f64> = (0..self.c_vals.len())
            .map(|p| k4 * self.c_vals[p] + k2 * self.g_vals[p] + self.k_vals[p])
            .collect();
        let mut q = self.pattern.clone();
        q.values_mut().copy_from_slice(&vals);
        q
    }
}

/// Cholesky factor `Q = R Rᵀ` of a sparse SPD precision, used to draw
/// `x ~ N(0, s² Q⁻¹)` as `x = s R⁻ᵀ z`.
pub struct GmrfFactor {
    chol: CscCholesky<f64>,
}

impl GmrfFactor {
    pub fn new(q: &CscMatrix<f64>) -> Result<Self> {
        let chol = CscCholesky::factor(q)
            .map_err(|e| Error::Numeric(format!("sparse Cholesky of precision failed: {e}")))?;
        Ok(Self { chol })
    }

    pub fn n(&self) -> usize {
        self.chol.l().nrows()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l();
        2.0 * (0..l.ncols())
            .map(|j| {
                let col = l.col(j);
                // diagonal is the first stored entry in each column of L
                col.values()[0].ln()
            })
            .sum::<f64>()
    }

    /// Draw `x ~ N(0, variance · Q⁻¹)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, variance: f64) -> Vec<f64> {
        let n = self.n();
        let z: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        self.solve_lt(z, variance.sqrt())
    }

    /// `s · R⁻ᵀ z` for a caller-supplied standard normal vector.
    pub fn solve_lt(&self, z: Vec<f64>, s: f64) -> Vec<f64> {
        let n = self.n();
        let mut b = nalgebra::DMatrix::from_vec(n, 1, z);
        spsolve_csc_lower_triangular(Op::Transpose(self.chol.l()), &mut b)
            .expect("triangular factor is square with nonzero diagonal");
        b.iter().map(|v| v * s).collect()
    }
}

/// Log-determinant of `L(κ²) = κ²C + G` for many κ² values.
///
/// Small meshes precompute the spectrum of `C^{-1/2} G C^{-1/2}` once, after
/// which `log|L| = log|C| + Σ log(κ² + μᵢ)` is O(n). Larger meshes factorise.
pub enum StiffnessLogDet {
    Spectrum { log_det_c: f64, eig: Vec<f64> },
    Factor { c_diag: Vec<f64>, g: CscMatrix<f64> },
}

const SPECTRUM_MAX_N: usize = 1600;

impl StiffnessLogDet {
    pub fn new(c_diag: &[f64], g: &CscMatrix<f64>) -> Self {
        let n = c_diag.len();
        if n <= SPECTRUM_MAX_N {
            let mut m = to_dense(g);
            let s: Vec<f64> = c_diag.iter().map(|c| 1.0 / c.sqrt()).collect();
            for j in 0..n {
                for i in 0..n {
                    m[(i, j)] *= s[i] * s[j];
                }
            }
            let eig = SymmetricEigen::new(m).eigenvalues.iter().map(|&v| v.max(0.0)).collect();
            let log_det_c = c_diag.iter().map(|c| c.ln()).sum();
            StiffnessLogDet::Spectrum { log_det_c, eig }
        } else {
            StiffnessLogDet::Factor { c_diag: c_diag.to_vec(), g: g.clone() }
        }
    }

    pub fn log_det_l(&self, kappa2: f64) -> Result<f64> {
        match self {
            StiffnessLogDet::Spectrum { log_det_c, eig } => {
                Ok(log_det_c + eig.iter().map(|m| (kappa2 + m).ln()).sum::<f64>())
            }
            StiffnessLogDet::Factor { c_diag, g } => {
                let mut trip = Vec::with_capacity(g.nnz() + c_diag.len());
                for (j, col) in g.col_iter().enumerate() {
                    trip.extend(col.row_indices().iter().zip(col.values()).map(|(&i, &v)| (i, j, v)));
                }
                trip.extend(c_diag.iter().enumerate().map(|(i, &c)| (i, i, kappa2 * c)));
                let l = csc_from_triplets(c_diag.len(), &trip);
                GmrfFactor::new(&l).map(|f| f.log_det())
            }
        }
    }

    /// `log|Q(κ²)| = 2 log|L| − log|C|`.
    pub fn log_det_q(&self, kappa2: f64, log_det_c: f64) -> Result<f64> {
        Ok(2.0 * self.log_det_l(kappa2)? - log_det_c)
    }
}

/// `L(κ²) = κ²C + G` on a fixed pattern, with a Cholesky factorisation that
/// reuses its symbolic analysis across κ² values.
pub struct StiffnessOperator {
    l: CscMatrix<f64>,
    c_vals: Vec<f64>,
    g_vals: Vec<f64>,
    chol: Option<(f64, CscCholesky<f64>)>,
}

impl StiffnessOperator {
    pub fn new(c_diag: &[f64], g: &CscMatrix<f64>) -> Self {
        let n = c_diag.len();
        let mut trip: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 0.0)).collect();
        for (j, col) in g.col_iter().enumerate() {
            trip.extend(col.row_indices().iter().map(|&i| (i, j, 0.0)));
        }
        let l = csc_from_triplets(n, &trip);
        let mut c_vals = vec![0.0; l.nnz()];
        let mut g_vals = vec![0.0; l.nnz()];
        let offsets = l.col_offsets().to_vec();
        let rows = l.row_indices().to_vec();
        for j in 0..n {
            for p in offsets[j]..offsets[j + 1] {
                if rows[p] == j {
                    c_vals[p] = c_diag[j];
                }
                g_vals[p] = get(g, rows[p], j);
            }
        }
        Self { l, c_vals, g_vals, chol: None }
    }

    fn values(&self, kappa2: f64) -> Vec<f64> {
        self.c_vals.iter().zip(&self.g_vals).map(|(c, g)| kappa2 * c + g).collect()
    }

    /// `out = L(κ²) x`.
    pub fn apply(&mut self, kappa2: f64, x: &[f64], out: &mut [f64]) {
        let vals = self.values(kappa2);
        self.l.values_mut().copy_from_slice(&vals);
        spmv(&self.l, x, out);
    }

    /// `L(κ²)⁻¹ b`, factorising on first use of each κ².
    pub fn solve(&mut self, kappa2: f64, b: &[f64]) -> Result<Vec<f64>> {
        let fresh = !matches!(&self.chol, Some((k, _)) if *k == kappa2);
        if fresh {
            let vals = self.values(kappa2);
            let fail = |e| Error::Numeric(format!("Cholesky of κ²C + G failed: {e}"));
            match &mut self.chol {
                Some((k, c)) => {
                    if let Err(e) = c.refactor(&vals) {
                        self.chol = None;
                        return Err(fail(e));
                    }
                    *k = kappa2;
                }
                None => {
                    self.l.values_mut().copy_from_slice(&vals);
                    self.chol = Some((kappa2, CscCholesky::factor(&self.l).map_err(fail)?));
                }
            }
        }
        let (_, c) = self.chol.as_ref().expect("factorised above");
        let x = c.solve(&DMatrix::from_column_slice(b.len(), 1, b));
        Ok(x.iter().copied().collect())
    }
}
