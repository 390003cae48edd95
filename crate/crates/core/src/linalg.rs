//! Dense SPD numerics: blocked Cholesky, triangular solves, quadratic forms,
//! and small symmetric eigensolvers used by diagnostics.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

const BLOCK: usize = 64;

/// Lower-triangular Cholesky factor of an SPD matrix, plus its
/// log-determinant. Immutable once built.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    lower: Array2<f64>,
    logdet: f64,
}

impl SpdFactor {
    pub fn n(&self) -> usize {
        self.lower.nrows()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    /// Solve L y = b (forward substitution). This is the decorrelating map
    /// used by the parametric spatial bootstrap.
    pub fn solve_lower(&self, b: ArrayView1<f64>) -> Result<Array1<f64>> {
        let n = self.n();
        if b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: b.len() });
        }
        let l = &self.lower;
        let mut y = b.to_owned();
        for i in 0..n {
            let mut s = y[i];
            for j in 0..i {
                s -= l[[i, j]] * y[j];
            }
            y[i] = s / l[[i, i]];
        }
        Ok(y)
    }

    /// Solve L^T x = y (back substitution).
    pub fn solve_lower_t(&self, y: ArrayView1<f64>) -> Result<Array1<f64>> {
        let n = self.n();
        if y.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: y.len() });
        }
        let l = &self.lower;
        let mut x = y.to_owned();
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= l[[j, i]] * x[j];
            }
            x[i] = s / l[[i, i]];
        }
        Ok(x)
    }

    /// Solve Sigma x = b.
    pub fn solve(&self, b: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.solve_lower_t(self.solve_lower(b)?.view())
    }

    /// Recorrelate: compute L e, the inverse of `solve_lower`.
    pub fn multiply_lower(&self, e: ArrayView1<f64>) -> Result<Array1<f64>> {
        let n = self.n();
        if e.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: e.len() });
        }
        let l = &self.lower;
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..=i {
                s += l[[i, j]] * e[j];
            }
            y[i] = s;
        }
        Ok(y)
    }

    /// u^T Sigma^{-1} v via two triangular solves; symmetric in (u, v).
    pub fn quad_form(&self, u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
        let a = self.solve_lower(u)?;
        let b = self.solve_lower(v)?;
        Ok(a.dot(&b))
    }

    /// Explicit Sigma^{-1}, for small-n cross-checks only.
    pub fn inverse(&self) -> Result<Array2<f64>> {
        let n = self.n();
        let mut inv = Array2::zeros((n, n));
        let mut e = Array1::zeros(n);
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve(e.view())?;
            inv.column_mut(j).assign(&col);
            e[j] = 0.0;
        }
        Ok(inv)
    }
}

/// Blocked right-looking Cholesky. Fails on the first non-positive pivot,
/// reporting its index.
pub fn spd_factor(sigma: &Array2<f64>) -> Result<SpdFactor> {
    let n = sigma.nrows();
    if sigma.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: sigma.ncols() });
    }
    if sigma.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("spd_factor input"));
    }
    let mut a = sigma.clone();

    let mut k = 0;
    while k < n {
        let nb = BLOCK.min(n - k);
        // Factor the diagonal block in place (unblocked).
        for j in k..k + nb {
            let mut d = a[[j, j]];
            for p in k..j {
                d -= a[[j, p]] * a[[j, p]];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let dj = d.sqrt();
            a[[j, j]] = dj;
            for i in (j + 1)..(k + nb) {
                let mut s = a[[i, j]];
                for p in k..j {
                    s -= a[[i, p]] * a[[j, p]];
                }
                a[[i, j]] = s / dj;
            }
        }
        let end = k + nb;
        if end < n {
            // Panel solve: A21 <- A21 L11^{-T}.
            for j in k..end {
                let djj = a[[j, j]];
                for i in end..n {
                    let mut s = a[[i, j]];
                    for p in k..j {
                        s -= a[[i, p]] * a[[j, p]];
                    }
                    a[[i, j]] = s / djj;
                }
            }
            // Trailing update by block columns: A22 -= L21 L21^T.
            let panel = a.slice(s![end..n, k..end]).to_owned();
            let mut jb = end;
            while jb < n {
                let wb = BLOCK.min(n - jb);
                let rows = panel.slice(s![(jb - end).., ..]);
                let cols = panel.slice(s![(jb - end)..(jb - end + wb), ..]);
                let mut target = a.slice_mut(s![jb..n, jb..jb + wb]);
                general_mat_mul(-1.0, &rows, &cols.t(), 1.0, &mut target);
                jb += wb;
            }
        }
        k = end;
    }

    // Zero the strict upper triangle and accumulate the log-determinant.
    let mut logdet = 0.0;
    for i in 0..n {
        logdet += 2.0 * a[[i, i]].ln();
        for j in (i + 1)..n {
            a[[i, j]] = 0.0;
        }
    }
    Ok(SpdFactor { lower: a, logdet })
}

/// All eigenvalues of a small symmetric matrix by cyclic Jacobi rotation.
/// Intended for n <= a few hundred (diagnostic checks).
pub fn sym_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-12 * (1.0 + m.diag().iter().map(|x| x.abs()).fold(0.0, f64::max)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = m.diag().to_vec();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Top-k eigenvalues of a symmetric matrix by subspace iteration with
/// Gram-Schmidt reorthogonalization. Adequate when the spectrum decays
/// quickly (geometric kernel eigenvalues).
pub fn top_eigenvalues(a: &Array2<f64>, k: usize, iters: usize) -> Vec<f64> {
    let n = a.nrows();
    let q = (k + 4).min(n);
    // Deterministic pseudo-random start vectors.
    let mut v = Array2::zeros((n, q));
    let mut state = 0x243F_6A88_85A3_08D3u64;
    for x in v.iter_mut() {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        *x = ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
    }
    orthonormalize(&mut v);
    let mut av = Array2::zeros((n, q));
    for _ in 0..iters {
        general_mat_mul(1.0, a, &v, 0.0, &mut av);
        v.assign(&av);
        orthonormalize(&mut v);
    }
    // Rayleigh-Ritz on the converged subspace.
    general_mat_mul(1.0, a, &v, 0.0, &mut av);
    let small = v.t().dot(&av);
    let sym = 0.5 * (&small + &small.t());
    let mut ev = sym_eigenvalues(&sym);
    ev.truncate(k);
    ev
}

fn orthonormalize(v: &mut Array2<f64>) {
    let q = v.ncols();
    for j in 0..q {
        for i in 0..j {
            let proj = v.column(i).dot(&v.column(j));
            let vi = v.column(i).to_owned();
            v.column_mut(j).scaled_add(-proj, &vi);
        }
        let norm = v.column(j).dot(&v.column(j)).sqrt();
        if norm > 1e-300 {
            v.column_mut(j).mapv_inplace(|x| x / norm);
        }
    }
}
