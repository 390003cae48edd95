//! Location sampling and pairwise distances.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Sampling density that produced a `LocationSet`.
#[derive(Debug, Clone, PartialEq)]
pub enum DensityTag {
    /// i.i.d. uniform on [lo, hi]^2.
    UniformSquare { lo: f64, hi: f64 },
    /// i.i.d. N(0, sd^2) on the line.
    GaussianLine { sd: f64 },
    /// m distinct integer locations 1..m, each repeated k times.
    FixedGrid { m: usize, k: usize },
}

/// Sampled spatial coordinates in 1-D or 2-D.
#[derive(Debug, Clone)]
pub struct LocationSet {
    pub dim: usize,
    /// n x dim coordinate array.
    pub coords: Array2<f64>,
    pub density_tag: DensityTag,
    /// Group ids (present for fixed-grid designs).
    pub groups: Option<Vec<usize>>,
}

impl LocationSet {
    pub fn len(&self) -> usize {
        self.coords.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.nrows() == 0
    }

    /// Euclidean distance between points i and j.
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let mut s = 0.0;
        for d in 0..self.dim {
            let diff = self.coords[[i, d]] - self.coords[[j, d]];
            s += diff * diff;
        }
        s.sqrt()
    }
}

/// n points i.i.d. uniform on [lo, hi]^2.
pub fn sample_uniform_square(n: usize, lo: f64, hi: f64, rng: &mut RngStream) -> Result<LocationSet> {
    if lo >= hi {
        return Err(Error::InvalidBounds { lo, hi });
    }
    if n == 0 {
        return Err(Error::InvalidParameter {
            name: "n",
            value: 0.0,
            requirement: "n >= 1",
        });
    }
    let mut coords = Array2::zeros((n, 2));
    for i in 0..n {
        // Closed upper bound is immaterial for continuous draws.
        coords[[i, 0]] = rng.uniform(lo, hi);
        coords[[i, 1]] = rng.uniform(lo, hi);
    }
    Ok(LocationSet {
        dim: 2,
        coords,
        density_tag: DensityTag::UniformSquare { lo, hi },
        groups: None,
    })
}

/// n points i.i.d. N(0, sd^2) on the line.
pub fn sample_gaussian_line(n: usize, sd: f64, rng: &mut RngStream) -> Result<LocationSet> {
    if sd <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "sd",
            value: sd,
            requirement: "sd > 0",
        });
    }
    if n == 0 {
        return Err(Error::InvalidParameter {
            name: "n",
            value: 0.0,
            requirement: "n >= 1",
        });
    }
    let mut coords = Array2::zeros((n, 1));
    for i in 0..n {
        coords[[i, 0]] = sd * rng.standard_normal();
    }
    Ok(LocationSet {
        dim: 1,
        coords,
        density_tag: DensityTag::GaussianLine { sd },
        groups: None,
    })
}

/// m integer locations 1..m, each repeated k times, with group ids recorded.
pub fn fixed_grid_locations(m: usize, k: usize) -> Result<LocationSet> {
    if m == 0 || k == 0 {
        return Err(Error::InvalidParameter {
            name: "m,k",
            value: 0.0,
            requirement: "m >= 1 and k >= 1",
        });
    }
    let n = m * k;
    let mut coords = Array2::zeros((n, 1));
    let mut groups = Vec::with_capacity(n);
    for i in 0..m {
        for j in 0..k {
            coords[[i * k + j, 0]] = (i + 1) as f64;
            groups.push(i + 1);
        }
    }
    Ok(LocationSet {
        dim: 1,
        coords,
        density_tag: DensityTag::FixedGrid { m, k },
        groups: Some(groups),
    })
}

/// Dense symmetric Euclidean distance matrix with zero diagonal.
pub fn distance_matrix(locations: &LocationSet) -> Array2<f64> {
    let n = locations.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dij = locations.dist(i, j);
            d[[i, j]] = dij;
            d[[j, i]] = dij;
        }
    }
    d
}
