//! Weighted sparse least squares `min |K x - d|^2` by preconditioned
//! conjugate gradients on the normal equations.

use nalgebra::DMatrix;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};

use crate::error::{Error, Result};

/// Row-by-row assembly of a sparse operator with per-row weights.
#[derive(Debug, Default)]
pub struct RowBuilder {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    weights: Vec<f64>,
    n_rows: usize,
}

impl RowBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a row `sqrt(weight) * sum_j a_j x_j`, returning its index.
    pub fn push(&mut self, weight: f64, terms: impl IntoIterator<Item = (usize, f64)>) -> usize {
        let r = self.n_rows;
        let sw = weight.sqrt();
        for (c, v) in terms {
            if v != 0.0 {
                self.rows.push(r);
                self.cols.push(c);
                self.vals.push(sw * v);
            }
        }
        self.weights.push(weight);
        self.n_rows += 1;
        r
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn finish(self, n_cols: usize) -> Result<(CsrMatrix<f64>, Vec<f64>)> {
        let coo = CooMatrix::try_from_triplets(self.n_rows, n_cols, self.rows, self.cols, self.vals)
            .map_err(|e| Error::Numerical(format!("sparse assembly failed: {e}")))?;
        Ok((CsrMatrix::from(&coo), self.weights.into_iter().map(f64::sqrt).collect()))
    }
}

pub fn matvec(a: &CsrMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let (offsets, cols, vals) = a.csr_data();
    for (i, o) in out.iter_mut().enumerate() {
        *o = (offsets[i]..offsets[i + 1]).map(|p| vals[p] * x[cols[p]]).sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioner choice for [`WeightedLsq`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    /// Sparse Cholesky if the estimated fill is small enough, else Jacobi.
    #[default]
    Auto,
    Cholesky,
    Jacobi,
}

enum Prec {
    Cholesky(Box<CscCholesky<f64>>),
    Jacobi(Vec<f64>),
}

impl Prec {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        match self {
            Prec::Cholesky(c) => {
                let mut b = DMatrix::from_column_slice(r.len(), 1, r);
                c.solve_mut(&mut b);
                b.as_slice().to_vec()
            }
            Prec::Jacobi(d) => r.iter().zip(d).map(|(a, b)| a / b).collect(),
        }
    }
}

/// An assembled, preconditioned least-squares operator.
pub struct WeightedLsq {
    k: CsrMatrix<f64>,
    kt: CsrMatrix<f64>,
    row_scale: Vec<f64>,
    prec: Prec,
    pub prec_name: &'static str,
}

/// Outcome of [`WeightedLsq::solve`].
#[derive(Debug, Clone)]
pub struct LsqSolution {
    pub x: Vec<f64>,
    /// `|K x_k - d|^2` after each iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
    /// Weighted residual `K x - d` per row.
    pub residual: Vec<f64>,
}

impl WeightedLsq {
    /// `fill_estimate` bounds the number of nonzeros of the Cholesky factor
    /// used by [`Preconditioner::Auto`].
    pub fn new(builder: RowBuilder, n_cols: usize, choice: Preconditioner, fill_estimate: usize) -> Result<Self> {
        let (k, row_scale) = builder.finish(n_cols)?;
        let kt = k.transpose();
        let jacobi = || {
            let mut d = vec![0.0; n_cols];
            for (_, c, v) in k.triplet_iter() {
                d[c] += v * v;
            }
            d.iter().map(|v| if *v > 0.0 { *v } else { 1.0 }).collect::<Vec<_>>()
        };
        let use_chol = match choice {
            Preconditioner::Cholesky => true,
            Preconditioner::Jacobi => false,
            Preconditioner::Auto => fill_estimate <= 60_000_000,
        };
        let (prec, prec_name) = if use_chol {
            let n = &kt * &k;
            match CscCholesky::factor(&CscMatrix::from(&n)) {
                Ok(c) => (Prec::Cholesky(Box::new(c)), "cholesky"),
                Err(_) if choice == Preconditioner::Auto => (Prec::Jacobi(jacobi()), "jacobi"),
                Err(e) => return Err(Error::Numerical(format!("normal matrix factorization failed: {e}"))),
            }
        } else {
            (Prec::Jacobi(jacobi()), "jacobi")
        };
        Ok(Self { k, kt, row_scale, prec, prec_name })
    }

    pub fn n_rows(&self) -> usize {
        self.k.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.k.ncols()
    }

    /// Solve for unweighted targets `target` (one per row).
    pub fn solve(&self, target: &[f64], tol: f64, max_iter: usize) -> Result<LsqSolution> {
        if target.len() != self.n_rows() {
            return Err(Error::Mismatch(format!("{} targets for {} rows", target.len(), self.n_rows())));
        }
        let d: Vec<f64> = target.iter().zip(&self.row_scale).map(|(t, s)| t * s).collect();
        let n = self.n_cols();
        let mut x = vec![0.0; n];
        let mut e = d.clone(); // d - K x
        let mut r = vec![0.0; n];
        matvec(&self.kt, &d, &mut r);
        let b_norm = dot(&r, &r).sqrt();
        let mut history = Vec::new();
        if b_norm == 0.0 {
            return Ok(LsqSolution {
                x,
                history,
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
                residual: e.iter().map(|v| -v).collect(),
            });
        }
        let mut z = self.prec.apply(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut kp = vec![0.0; self.n_rows()];
        let mut np = vec![0.0; n];
        let mut rel = 1.0;
        let mut iterations = 0;
        while iterations < max_iter {
            matvec(&self.k, &p, &mut kp);
            matvec(&self.kt, &kp, &mut np);
            let curv = dot(&kp, &kp);
            if !(curv > 0.0) {
                break;
            }
            let alpha = rz / curv;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * np[i];
            }
            for (ei, ki) in e.iter_mut().zip(&kp) {
                *ei -= alpha * ki;
            }
            iterations += 1;
            history.push(dot(&e, &e));
            rel = dot(&r, &r).sqrt() / b_norm;
            if rel <= tol {
                break;
            }
            z = self.prec.apply(&r);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if !rel.is_finite() {
            return Err(Error::Numerical("conjugate gradients produced non-finite iterates".into()));
        }
        Ok(LsqSolution {
            x,
            history,
            iterations,
            relative_residual: rel,
            converged: rel <= tol,
            residual: e.iter().map(|v| -v).collect(),
        })
    }
}
