//! Nearest-neighbor (Vecchia) sparse approximation of a GP precision.
//!
//! Points are ordered by first coordinate; each conditions on its `m`
//! nearest predecessors. With m = n-1 the factorization is exact.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::geometry::LocationSet;
use crate::kernels::{kernel_eval, KernelSpec};
use crate::linalg::spd_factor;

/// Ordering and neighbor sets; depends only on the locations, so one plan
/// serves every covariance evaluated during parameter search.
#[derive(Debug, Clone)]
pub struct VecchiaPlan {
    /// order[i] = original index of the i-th point in the ordering.
    pub order: Vec<usize>,
    /// neighbors[i]: positions (in ordered space) conditioned on, < i.
    pub neighbors: Vec<Vec<usize>>,
    /// Pairwise distances from each ordered point to its neighbors.
    dist_to_neighbors: Vec<Vec<f64>>,
    /// Distances among the neighbors of each point (packed lower triangle).
    dist_among_neighbors: Vec<Vec<f64>>,
}

impl VecchiaPlan {
    /// Coordinate-sorted ordering with ties broken by original index.
    pub fn new(locations: &LocationSet, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParameter {
                name: "m",
                value: 0.0,
                requirement: ">= 1",
            });
        }
        let n = locations.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            locations.coords[[a, 0]]
                .partial_cmp(&locations.coords[[b, 0]])
                .unwrap()
                .then(a.cmp(&b))
        });

        let mut neighbors = Vec::with_capacity(n);
        let mut dist_to = Vec::with_capacity(n);
        let mut dist_among = Vec::with_capacity(n);
        for i in 0..n {
            let mi = m.min(i);
            // m nearest predecessors by Euclidean distance.
            let mut cand: Vec<(f64, usize)> = (0..i)
                .map(|j| (locations.dist(order[i], order[j]), j))
                .collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            cand.truncate(mi);
            // Stable neighbor order by ordered position keeps builds
            // deterministic regardless of distance ties.
            cand.sort_by_key(|&(_, j)| j);
            let idx: Vec<usize> = cand.iter().map(|&(_, j)| j).collect();
            let d_to: Vec<f64> = cand.iter().map(|&(d, _)| d).collect();
            let mut d_among = Vec::with_capacity(mi * (mi + 1) / 2);
            for a in 0..mi {
                for b in 0..=a {
                    d_among.push(locations.dist(order[idx[a]], order[idx[b]]));
                }
            }
            neighbors.push(idx);
            dist_to.push(d_to);
            dist_among.push(d_among);
        }
        Ok(VecchiaPlan {
            order,
            neighbors,
            dist_to_neighbors: dist_to,
            dist_among_neighbors: dist_among,
        })
    }

    pub fn n(&self) -> usize {
        self.order.len()
    }
}

/// Sparse approximate factorization of Sigma = kernel + nugget built from a
/// plan: per point, regression coefficients on its neighbors and the
/// conditional standard deviation.
#[derive(Debug, Clone)]
pub struct VecchiaFactor {
    plan: VecchiaPlan,
    coeffs: Vec<Vec<f64>>,
    cond_sd: Vec<f64>,
    logdet: f64,
}

impl VecchiaFactor {
    pub fn new(plan: &VecchiaPlan, spec: &KernelSpec) -> Result<Self> {
        let n = plan.n();
        let marginal = spec.variance + spec.nugget;
        let mut coeffs = Vec::with_capacity(n);
        let mut cond_sd = Vec::with_capacity(n);
        let mut logdet = 0.0;
        for i in 0..n {
            let mi = plan.neighbors[i].len();
            if mi == 0 {
                coeffs.push(Vec::new());
                let v = marginal;
                cond_sd.push(v.sqrt());
                logdet += v.ln();
                continue;
            }
            let mut knn = Array2::zeros((mi, mi));
            let mut p = 0;
            for a in 0..mi {
                for b in 0..=a {
                    let d = plan.dist_among_neighbors[i][p];
                    p += 1;
                    let v = kernel_eval(spec, d)? + if a == b { spec.nugget } else { 0.0 };
                    knn[[a, b]] = v;
                    knn[[b, a]] = v;
                }
            }
            let kni: Array1<f64> = plan.dist_to_neighbors[i]
                .iter()
                .map(|&d| kernel_eval(spec, d))
                .collect::<Result<_>>()?;
            let f = spd_factor(&knn)?;
            let b = f.solve(kni.view())?;
            let cond_var = marginal - kni.dot(&b);
            if cond_var <= 0.0 || !cond_var.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    index: i,
                    pivot: cond_var,
                });
            }
            coeffs.push(b.to_vec());
            cond_sd.push(cond_var.sqrt());
            logdet += cond_var.ln();
        }
        Ok(VecchiaFactor {
            plan: plan.clone(),
            coeffs,
            cond_sd,
            logdet,
        })
    }

    pub fn n(&self) -> usize {
        self.plan.n()
    }

    /// log det of the approximated Sigma.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Map v to (approximately) white noise scale: the ordered innovations
    /// e_i = (v_i - b_i^T v_{N(i)}) / sd_i. Output lives in ordered space.
    pub fn decorrelate(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        let n = self.n();
        if v.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: v.len() });
        }
        let mut e = Array1::zeros(n);
        for i in 0..n {
            let vi = v[self.plan.order[i]];
            let mut pred = 0.0;
            for (b, &j) in self.coeffs[i].iter().zip(&self.plan.neighbors[i]) {
                pred += b * v[self.plan.order[j]];
            }
            e[i] = (vi - pred) / self.cond_sd[i];
        }
        Ok(e)
    }

    /// Inverse of `decorrelate`: build a correlated vector from ordered
    /// innovations. Used by the parametric spatial bootstrap.
    pub fn recorrelate(&self, e: ArrayView1<f64>) -> Result<Array1<f64>> {
        let n = self.n();
        if e.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: e.len() });
        }
        let mut v = Array1::zeros(n);
        let mut ordered = vec![0.0; n];
        for i in 0..n {
            let mut val = self.cond_sd[i] * e[i];
            for (b, &j) in self.coeffs[i].iter().zip(&self.plan.neighbors[i]) {
                val += b * ordered[j];
            }
            ordered[i] = val;
            v[self.plan.order[i]] = val;
        }
        Ok(v)
    }

    /// u^T Sigma~^{-1} v under the sparse approximation.
    pub fn quad_form(&self, u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
        Ok(self.decorrelate(u)?.dot(&self.decorrelate(v)?))
    }
}
