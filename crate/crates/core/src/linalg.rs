//! Small dense helpers for the normal-equation solves used throughout.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance below which a column counts as collinear with the
/// columns before it.
const PIVOT_TOL: f64 = 1e-10;

/// Cholesky factor of a symmetric positive definite matrix, with column names
/// kept for diagnostics.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    lower: DMatrix<f64>,
}

impl SpdFactor {
    /// Factors `a`. A column whose pivot falls below `1e-10` of its diagonal is
    /// reported as collinear; all such columns are named in the error.
    pub fn new(a: &DMatrix<f64>, names: &[String]) -> Result<Self> {
        let q = a.nrows();
        debug_assert_eq!(q, a.ncols());
        let mut l = DMatrix::<f64>::zeros(q, q);
        let mut bad = Vec::new();
        for j in 0..q {
            let diag = a[(j, j)];
            let mut d = diag;
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > PIVOT_TOL * diag.abs()) || !d.is_finite() || diag <= 0.0 {
                bad.push(names.get(j).cloned().unwrap_or_else(|| format!("col{j}")));
                // Zero the column so later pivots are still judged sensibly.
                continue;
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..q {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        if !bad.is_empty() {
            return Err(Error::Singular { columns: bad });
        }
        Ok(SpdFactor { lower: l })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .lower
            .solve_lower_triangular(b)
            .expect("nonzero pivots checked at construction");
        self.lower
            .tr_solve_lower_triangular(&y)
            .expect("nonzero pivots checked at construction")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let q = self.lower.nrows();
        let mut inv = DMatrix::<f64>::zeros(q, q);
        for j in 0..q {
            let mut e = DVector::<f64>::zeros(q);
            e[j] = 1.0;
            inv.set_column(j, &self.solve(&e));
        }
        symmetrize(&mut inv);
        inv
    }
}

/// `Xᵀ diag(w) X` for an N×q design.
pub fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let (n, q) = x.shape();
    debug_assert_eq!(n, w.len());
    let mut g = DMatrix::<f64>::zeros(q, q);
    for i in 0..n {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for a in 0..q {
            let xa = x[(i, a)] * wi;
            for b in 0..=a {
                g[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            g[(b, a)] = g[(a, b)];
        }
    }
    g
}

/// `Xᵀ diag(w) y`.
pub fn weighted_xty(x: &DMatrix<f64>, w: &[f64], y: &[f64]) -> DVector<f64> {
    let (n, q) = x.shape();
    let mut v = DVector::<f64>::zeros(q);
    for i in 0..n {
        let wy = w[i] * y[i];
        if wy == 0.0 {
            continue;
        }
        for a in 0..q {
            v[a] += x[(i, a)] * wy;
        }
    }
    v
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let q = m.nrows();
    for a in 0..q {
        for b in 0..a {
            let s = 0.5 * (m[(a, b)] + m[(b, a)]);
            m[(a, b)] = s;
            m[(b, a)] = s;
        }
    }
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map(|x| x.len()).unwrap_or(0);
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::Schema("ragged matrix".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}
