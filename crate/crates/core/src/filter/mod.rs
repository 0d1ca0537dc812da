//! High-dimensional Gaussian filtering of per-label channels.
//!
//! Every dense pairwise message in mean-field inference reduces to
//!
//! ```text
//! out_i = sum_{j != i} exp(-0.5 * |f_i - f_j|^2) * values_j
//! ```
//!
//! over pre-scaled feature vectors `f`. [`Backend::Brute`] evaluates the sum
//! exactly in `O(N^2)`; [`Backend::Lattice`] approximates it in `O(N)` with a
//! permutohedral lattice. Outputs are raw Gaussian sums; no per-pixel
//! normalisation is applied by either backend.
//!
//! The lattice kernel does not take the value 1 exactly on the diagonal, so
//! self-exclusion subtracts each pixel's own lattice weight rather than
//! `exp(0)`.

mod lattice;

use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::grid::{ColorImage, PixelGrid};

pub use lattice::PermutohedralLattice;

/// Per-pixel feature vectors, already divided by their kernel bandwidths.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    grid: PixelGrid,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureField {
    pub fn new(grid: PixelGrid, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("feature dimension must be positive".into()));
        }
        if data.len() != grid.len() * dim {
            return Err(Error::shape("feature field", grid.len() * dim, data.len()));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "features",
                index,
            });
        }
        Ok(FeatureField { grid, dim, data })
    }

    /// `(x, y) / theta_gamma`.
    pub fn spatial(grid: PixelGrid, theta_gamma: f64) -> Result<Self> {
        check_bandwidth("theta_gamma", theta_gamma)?;
        let mut data = Vec::with_capacity(grid.len() * 2);
        for i in 0..grid.len() {
            let (x, y) = grid.coords(i);
            data.push(x as f64 / theta_gamma);
            data.push(y as f64 / theta_gamma);
        }
        FeatureField::new(grid, 2, data)
    }

    /// `(x, y) / theta_alpha` concatenated with `(r, g, b) / theta_beta`.
    pub fn bilateral(image: &ColorImage, theta_alpha: f64, theta_beta: f64) -> Result<Self> {
        check_bandwidth("theta_alpha", theta_alpha)?;
        check_bandwidth("theta_beta", theta_beta)?;
        let grid = image.grid();
        let mut data = Vec::with_capacity(grid.len() * 5);
        for (i, rgb) in image.pixels().iter().enumerate() {
            let (x, y) = grid.coords(i);
            data.push(x as f64 / theta_alpha);
            data.push(y as f64 / theta_alpha);
            data.extend(rgb.iter().map(|c| c / theta_beta));
        }
        FeatureField::new(grid, 5, data)
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact kernel value `exp(-0.5 * |f_i - f_j|^2)`.
    pub fn kernel(&self, i: usize, j: usize) -> f64 {
        (-0.5 * sq_dist(self.feature(i), self.feature(j))).exp()
    }
}

fn check_bandwidth(name: &str, theta: f64) -> Result<()> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(Error::Invalid(format!("{name} must be positive, got {theta}")));
    }
    Ok(())
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Backend {
    Brute,
    #[default]
    Lattice,
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Brute => "brute",
            Backend::Lattice => "lattice",
        }
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brute" => Ok(Backend::Brute),
            "lattice" => Ok(Backend::Lattice),
            other => Err(Error::Invalid(format!(
                "unknown backend `{other}` (expected `brute` or `lattice`)"
            ))),
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A reusable filtering plan for one fixed feature field.
///
/// Plans are immutable once built and can be shared across threads; every
/// `filter` call allocates its own scratch space.
#[derive(Debug, Clone)]
pub struct FilterPlan {
    features: FeatureField,
    backend: Backend,
    lattice: Option<PermutohedralLattice>,
}

impl FilterPlan {
    pub fn build(features: FeatureField, backend: Backend) -> FilterPlan {
        let lattice = match backend {
            Backend::Brute => None,
            Backend::Lattice => Some(PermutohedralLattice::build(&features)),
        };
        FilterPlan {
            features,
            backend,
            lattice,
        }
    }

    pub fn features(&self) -> &FeatureField {
        &self.features
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn grid(&self) -> PixelGrid {
        self.features.grid()
    }

    /// Gaussian-weighted sum over all other pixels, channel by channel.
    ///
    /// `values` is `N x C`; the output has the same shape.
    pub fn filter(&self, values: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_values(&values)?;
        Ok(match &self.lattice {
            None => brute_filter(&self.features, values),
            Some(lattice) => {
                let mut out = lattice.filter_inclusive(values);
                for ((mut row, v), w) in out
                    .outer_iter_mut()
                    .zip(values.outer_iter())
                    .zip(lattice.self_weights())
                {
                    row.scaled_add(-w, &v);
                }
                out
            }
        })
    }

    /// Transpose of [`FilterPlan::filter`]. Both backends produce a symmetric
    /// operator with zero diagonal, so this applies the same map.
    pub fn filter_adjoint(&self, grad_out: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.filter(grad_out)
    }

    /// Filter including the self term: `filter(v) + v` for the brute
    /// backend, `filter(v)` plus the lattice's own self weight times `v` for
    /// the lattice. Filtering an all-ones channel yields each pixel's total
    /// kernel mass.
    pub fn filter_inclusive(&self, values: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_values(&values)?;
        Ok(match &self.lattice {
            None => brute_filter(&self.features, values) + values,
            Some(lattice) => lattice.filter_inclusive(values),
        })
    }

    /// Exact self-excluded Gaussian sum for a single output pixel, regardless
    /// of backend. Used by coordinate-wise (sequential) updates.
    pub fn filter_at(&self, i: usize, values: ArrayView2<f64>) -> Vec<f64> {
        let fi = self.features.feature(i);
        let mut out = vec![0.0; values.ncols()];
        for (j, row) in values.outer_iter().enumerate() {
            if j == i {
                continue;
            }
            let k = (-0.5 * sq_dist(fi, self.features.feature(j))).exp();
            for (o, v) in out.iter_mut().zip(row.iter()) {
                *o += k * v;
            }
        }
        out
    }

    fn check_values(&self, values: &ArrayView2<f64>) -> Result<()> {
        if values.nrows() != self.features.len() {
            return Err(Error::shape(
                "filter input rows",
                self.features.len(),
                values.nrows(),
            ));
        }
        Ok(())
    }
}

/// Exact `O(N^2)` self-excluded Gaussian filter.
///
/// Visits each unordered pair once and scatters the kernel weight to both
/// endpoints.
pub fn brute_filter(features: &FeatureField, values: ArrayView2<f64>) -> Array2<f64> {
    let n = features.len();
    let c = values.ncols();
    let vals = values.as_standard_layout();
    let vals = vals.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let fi = features.feature(i);
        let (head, tail) = out.split_at_mut((i + 1) * c);
        let out_i = &mut head[i * c..];
        let vi = &vals[i * c..(i + 1) * c];
        for j in (i + 1)..n {
            let k = (-0.5 * sq_dist(fi, features.feature(j))).exp();
            let vj = &vals[j * c..(j + 1) * c];
            let out_j = &mut tail[(j - i - 1) * c..(j - i) * c];
            for ch in 0..c {
                out_i[ch] += k * vj[ch];
                out_j[ch] += k * vi[ch];
            }
        }
    }
    Array2::from_shape_vec((n, c), out).expect("shape")
}
