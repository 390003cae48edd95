//! Low-rank thin-plate spline bases, penalized least squares with
//! hat-matrix trace, and GCV penalty selection.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::geometry::LocationSet;
use crate::linalg::spd_factor;

/// Design matrix (intercept + linear coordinates + radial terms at knots)
/// plus the penalty matrix for the radial block.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    /// n x K design matrix.
    pub design: Array2<f64>,
    /// Knot coordinates (one row per radial column).
    pub knots: Array2<f64>,
    /// K x K penalty, zero on the polynomial (intercept + linear) block.
    pub penalty: Array2<f64>,
    /// Number of unpenalized polynomial columns (1 + dim).
    pub poly_cols: usize,
}

impl SplineBasis {
    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn rank(&self) -> usize {
        self.design.ncols()
    }
}

/// Penalized least-squares fit of y on a spline basis.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub coefficients: Array1<f64>,
    pub fitted: Array1<f64>,
    /// Effective degrees of freedom tr(H).
    pub hat_trace: f64,
    pub rss: f64,
    pub lambda: f64,
}

fn radial_1d(r: f64) -> f64 {
    r * r * r
}

fn radial_2d(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// Deterministic farthest-point knot selection seeded from the first sample
/// point; no RNG consumed, so basis construction is reproducible from the
/// locations alone.
fn farthest_point_knots(locations: &LocationSet, count: usize) -> Vec<usize> {
    let n = locations.len();
    let mut chosen = Vec::with_capacity(count);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = 0usize;
    chosen.push(current);
    while chosen.len() < count {
        let mut best = 0usize;
        let mut best_dist = -1.0;
        for i in 0..n {
            let d = locations.dist(i, current);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_dist && !chosen.contains(&i) {
                best_dist = min_dist[i];
                best = i;
            }
        }
        chosen.push(best);
        current = best;
    }
    chosen
}

/// Thin-plate basis of rank K: intercept, linear coordinates, and K-(d+1)
/// radial terms (|r|^3 in 1-D, r^2 log r in 2-D) at farthest-point knots.
/// The penalty is the Gram matrix of the radial columns, zero on the
/// polynomial block.
pub fn thinplate_basis(locations: &LocationSet, rank: usize) -> Result<SplineBasis> {
    let n = locations.len();
    let d = locations.dim;
    if rank < d + 2 {
        return Err(Error::InvalidParameter {
            name: "rank",
            value: rank as f64,
            requirement: "K >= d + 2",
        });
    }
    if rank > n {
        return Err(Error::InvalidParameter {
            name: "rank",
            value: rank as f64,
            requirement: "K <= n",
        });
    }
    let poly_cols = d + 1;
    let n_knots = rank - poly_cols;
    let knot_idx = farthest_point_knots(locations, n_knots);
    let mut knots = Array2::zeros((n_knots, d));
    for (r, &i) in knot_idx.iter().enumerate() {
        for c in 0..d {
            knots[[r, c]] = locations.coords[[i, c]];
        }
    }

    let mut design = Array2::zeros((n, rank));
    for i in 0..n {
        design[[i, 0]] = 1.0;
        for c in 0..d {
            design[[i, 1 + c]] = locations.coords[[i, c]];
        }
        for (j, &ki) in knot_idx.iter().enumerate() {
            let r = locations.dist(i, ki);
            design[[i, poly_cols + j]] = if d == 1 { radial_1d(r) } else { radial_2d(r) };
        }
    }

    // Ridge penalty on the radial block: Gram matrix of radial columns.
    let radial = design.slice(ndarray::s![.., poly_cols..]).to_owned();
    let gram = radial.t().dot(&radial);
    let mut penalty = Array2::zeros((rank, rank));
    penalty
        .slice_mut(ndarray::s![poly_cols.., poly_cols..])
        .assign(&gram);

    Ok(SplineBasis {
        design,
        knots,
        penalty,
        poly_cols,
    })
}

/// Minimize ||y - B c||^2 + lambda c^T P c for an arbitrary design/penalty
/// pair (the design need not come from `thinplate_basis`; estimators pass
/// joint [X | B] designs with the penalty zero-padded over X).
///
/// hat_trace is tr[B (B^T B + lambda P)^{-1} B^T], computed from the
/// normal-equations factor.
pub fn penalized_lsq(
    design: &Array2<f64>,
    penalty: &Array2<f64>,
    y: ArrayView1<f64>,
    lambda: f64,
) -> Result<PenalizedFit> {
    let n = design.nrows();
    let k = design.ncols();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if penalty.dim() != (k, k) {
        return Err(Error::DimensionMismatch { expected: k, got: penalty.nrows() });
    }
    if lambda < 0.0 {
        return Err(Error::InvalidParameter {
            name: "lambda",
            value: lambda,
            requirement: ">= 0",
        });
    }
    let bt_b = design.t().dot(design);
    let mut lhs = bt_b.clone();
    lhs.scaled_add(lambda, penalty);
    let factor = spd_factor(&lhs).map_err(|e| match e {
        Error::NotPositiveDefinite { index, .. } => Error::RankDeficient(format!(
            "normal equations singular at column {index} (lambda = {lambda})"
        )),
        other => other,
    })?;

    let rhs = design.t().dot(&y);
    let coefficients = factor.solve(rhs.view())?;
    let fitted = design.dot(&coefficients);
    let rss = y
        .iter()
        .zip(fitted.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>();

    // tr[(B^T B + lambda P)^{-1} B^T B] column by column.
    let mut hat_trace = 0.0;
    for j in 0..k {
        let col = factor.solve(bt_b.column(j).view())?;
        hat_trace += col[j];
    }

    Ok(PenalizedFit {
        coefficients,
        fitted,
        hat_trace,
        rss,
        lambda,
    })
}

pub fn penalized_fit(basis: &SplineBasis, y: ArrayView1<f64>, lambda: f64) -> Result<PenalizedFit> {
    penalized_lsq(&basis.design, &basis.penalty, y, lambda)
}

/// GCV(lambda) = n rss / (n - hat_trace)^2.
pub fn gcv_score(n: usize, rss: f64, hat_trace: f64) -> f64 {
    let denom = n as f64 - hat_trace;
    n as f64 * rss / (denom * denom)
}

/// Default search grid: `len` log-spaced points in [lo, hi] * n.
pub fn default_lambda_grid(n: usize, lo: f64, hi: f64, len: usize) -> Vec<f64> {
    let scale = n as f64;
    (0..len)
        .map(|i| {
            let t = i as f64 / (len - 1).max(1) as f64;
            scale * lo * (hi / lo).powf(t)
        })
        .collect()
}

/// Pick lambda minimizing GCV over the grid; ties break toward larger
/// lambda.
pub fn select_lambda_gcv_design(
    design: &Array2<f64>,
    penalty: &Array2<f64>,
    y: ArrayView1<f64>,
    grid: &[f64],
) -> Result<(f64, PenalizedFit)> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter {
            name: "grid",
            value: 0.0,
            requirement: "nonempty",
        });
    }
    let n = design.nrows();
    let mut best: Option<(f64, f64, PenalizedFit)> = None;
    let mut any_defined = false;
    for &lambda in grid {
        let fit = penalized_lsq(design, penalty, y, lambda)?;
        if fit.hat_trace >= n as f64 - 1e-9 {
            continue; // GCV undefined at full interpolation
        }
        any_defined = true;
        let score = gcv_score(n, fit.rss, fit.hat_trace);
        let take = match &best {
            None => true,
            Some((s, l, _)) => score < *s || (score == *s && lambda > *l),
        };
        if take {
            best = Some((score, lambda, fit));
        }
    }
    if !any_defined {
        return Err(Error::RankDeficient(
            "GCV undefined: hat_trace = n at every grid point".into(),
        ));
    }
    let (_, lambda, fit) = best.unwrap();
    Ok((lambda, fit))
}

pub fn select_lambda_gcv(
    basis: &SplineBasis,
    y: ArrayView1<f64>,
    grid: &[f64],
) -> Result<(f64, PenalizedFit)> {
    select_lambda_gcv_design(&basis.design, &basis.penalty, y, grid)
}
