//! Local covariance (scatter) matrices.
//!
//! For a kernel f the sample local covariance matrix is
//! `M(f) = 1/(n √F_{n,f}) Σ_{i,j} f(s_i − s_j) (x_i − c)(x_j − c)ᵀ`,
//! with `c` the sample mean when centering (the default) and zero otherwise.
//! The unnormalized variant divides by `n` only. The identity kernel gives
//! the covariance matrix `(1/n) Σ_i (x_i − c)(x_i − c)ᵀ`.

use nalgebra::DMatrix;

use crate::error::{Result, SbssError};
use crate::geometry::{neighbor_pairs, stencil_offsets, GridIndex, LocationSet, SpatialSample};
use crate::kernels::Kernel;
use crate::summation::CompensatedMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScatterOptions {
    /// Subtract the sample mean before forming cross products.
    pub centered: bool,
    /// Divide by `n √F_{n,f}` rather than `n`.
    pub renormalized: bool,
}

impl Default for ScatterOptions {
    fn default() -> Self {
        Self {
            centered: true,
            renormalized: true,
        }
    }
}

/// A symmetric p×p local covariance matrix.
#[derive(Clone, Debug)]
pub struct ScatterMatrix {
    pub matrix: DMatrix<f64>,
    pub kernel: Kernel,
    /// F_{n,f}; 1 for the identity kernel.
    pub normalization: f64,
    pub centered: bool,
    pub renormalized: bool,
}

/// Compressed per-location neighbor lists for one kernel.
#[derive(Clone, Debug)]
struct Neighborhood {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl Neighborhood {
    fn from_pairs(n: usize, loc: &LocationSet, kernel: &Kernel) -> Result<Self> {
        let pairs = neighbor_pairs(loc, kernel)?;
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(pairs.len());
        let mut weights = Vec::with_capacity(pairs.len());
        offsets.push(0);
        let mut cursor = 0;
        for i in 0..n {
            while cursor < pairs.len() && pairs[cursor].i == i {
                cols.push(pairs[cursor].j);
                weights.push(pairs[cursor].weight);
                cursor += 1;
            }
            offsets.push(cols.len());
        }
        Ok(Self {
            offsets,
            cols,
            weights,
        })
    }

    /// Neighbor lists found by shifting lattice coordinates; no distances involved.
    fn from_grid(index: &GridIndex, ways: usize, lag: usize) -> Self {
        let n = index.len();
        let d = index.dim();
        let shifts = stencil_offsets(d, ways, lag);
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(n * shifts.len());
        offsets.push(0);
        let mut at = [0i64; 3];
        for i in 0..n {
            let base = index.lattice_point(i);
            for shift in &shifts {
                for k in 0..d {
                    at[k] = base[k] + shift[k];
                }
                if let Some(j) = index.lookup(&at[..d]) {
                    cols.push(j);
                }
            }
            offsets.push(cols.len());
        }
        let weights = vec![1.0; cols.len()];
        Self {
            offsets,
            cols,
            weights,
        }
    }

    fn normalization(&self, n: usize) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>() / n as f64
    }

    /// Σ_i x_i (Σ_j w_ij x_j)ᵀ over row-major n×p data.
    fn cross_products(&self, data: &[f64], p: usize) -> CompensatedMatrix {
        let mut acc = CompensatedMatrix::new(p);
        let mut y = vec![0.0; p];
        for i in 0..self.offsets.len() - 1 {
            let (start, end) = (self.offsets[i], self.offsets[i + 1]);
            if start == end {
                continue;
            }
            y.iter_mut().for_each(|v| *v = 0.0);
            for e in start..end {
                let w = self.weights[e];
                let row = &data[self.cols[e] * p..(self.cols[e] + 1) * p];
                for (acc_c, &x) in y.iter_mut().zip(row) {
                    *acc_c += w * x;
                }
            }
            acc.add_outer(&data[i * p..(i + 1) * p], &y);
        }
        acc
    }
}

/// Neighbor structure and normalizations for a fixed location set and
/// kernel list, reusable across any number of value matrices.
#[derive(Clone, Debug)]
pub struct ScatterPlan {
    n: usize,
    kernels: Vec<Kernel>,
    hoods: Vec<Neighborhood>,
    normalizations: Vec<f64>,
}

impl ScatterPlan {
    /// Grid-lag kernels use the lattice-shifting fast path; all others use
    /// distance-based neighbor search.
    pub fn new(loc: &LocationSet, kernels: &[Kernel]) -> Result<Self> {
        let n = loc.len();
        let grid = if kernels.iter().any(Kernel::is_grid) {
            Some(GridIndex::new(loc)?)
        } else {
            None
        };
        let mut hoods = Vec::with_capacity(kernels.len());
        for kernel in kernels {
            let hood = match (kernel, &grid) {
                (Kernel::GridLag { ways, lag }, Some(index)) => {
                    if *ways > loc.dim() {
                        return Err(SbssError::InvalidArgument(format!(
                            "{kernel} needs at least {ways} spatial dimensions"
                        )));
                    }
                    Neighborhood::from_grid(index, *ways, *lag)
                }
                _ => Neighborhood::from_pairs(n, loc, kernel)?,
            };
            hoods.push(hood);
        }
        Self::assemble(n, kernels.to_vec(), hoods)
    }

    /// Plan that always uses distance-based neighbor search.
    pub fn generic(loc: &LocationSet, kernels: &[Kernel]) -> Result<Self> {
        let n = loc.len();
        let hoods = kernels
            .iter()
            .map(|k| Neighborhood::from_pairs(n, loc, k))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(n, kernels.to_vec(), hoods)
    }

    fn assemble(n: usize, kernels: Vec<Kernel>, hoods: Vec<Neighborhood>) -> Result<Self> {
        let normalizations: Vec<f64> = hoods.iter().map(|h| h.normalization(n)).collect();
        if let Some(pos) = normalizations.iter().position(|&f| f <= 0.0) {
            return Err(SbssError::DegenerateKernel {
                kernel: kernels[pos].to_string(),
            });
        }
        Ok(Self {
            n,
            kernels,
            hoods,
            normalizations,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    /// F_{n,f_ℓ} for each kernel.
    pub fn normalizations(&self) -> &[f64] {
        &self.normalizations
    }

    /// Number of ordered pairs with non-zero weight, per kernel.
    pub fn pair_counts(&self) -> Vec<usize> {
        self.hoods.iter().map(|h| h.cols.len()).collect()
    }

    fn check_rows(&self, values: &DMatrix<f64>) -> Result<()> {
        if values.nrows() != self.n {
            return Err(SbssError::DimensionMismatch(format!(
                "plan built for {} locations, data has {} rows",
                self.n,
                values.nrows()
            )));
        }
        Ok(())
    }

    /// Covariance matrix M(f₀).
    pub fn covariance(&self, values: &DMatrix<f64>, centered: bool) -> Result<ScatterMatrix> {
        self.check_rows(values)?;
        let data = row_major(values, centered);
        Ok(covariance_from_rows(&data, self.n, values.ncols(), centered))
    }

    /// Local covariance matrix for kernel number `which`.
    pub fn local(
        &self,
        values: &DMatrix<f64>,
        which: usize,
        options: ScatterOptions,
    ) -> Result<ScatterMatrix> {
        self.check_rows(values)?;
        let data = row_major(values, options.centered);
        Ok(self.local_from_rows(&data, values.ncols(), which, options))
    }

    /// Covariance followed by every local covariance matrix of the plan.
    pub fn all(
        &self,
        values: &DMatrix<f64>,
        options: ScatterOptions,
    ) -> Result<(ScatterMatrix, Vec<ScatterMatrix>)> {
        self.check_rows(values)?;
        let p = values.ncols();
        let data = row_major(values, options.centered);
        let cov = covariance_from_rows(&data, self.n, p, options.centered);
        let locals = (0..self.kernels.len())
            .map(|which| self.local_from_rows(&data, p, which, options))
            .collect();
        Ok((cov, locals))
    }

    fn local_from_rows(
        &self,
        data: &[f64],
        p: usize,
        which: usize,
        options: ScatterOptions,
    ) -> ScatterMatrix {
        let f = self.normalizations[which];
        let scale = if options.renormalized {
            1.0 / (self.n as f64 * f.sqrt())
        } else {
            1.0 / self.n as f64
        };
        let raw = self.hoods[which].cross_products(data, p).to_matrix(scale);
        ScatterMatrix {
            matrix: symmetrize(&raw),
            kernel: self.kernels[which],
            normalization: f,
            centered: options.centered,
            renormalized: options.renormalized,
        }
    }
}

fn row_major(values: &DMatrix<f64>, centered: bool) -> Vec<f64> {
    let (n, p) = values.shape();
    let means: Vec<f64> = if centered {
        values.column_iter().map(|c| c.mean()).collect()
    } else {
        vec![0.0; p]
    };
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        for c in 0..p {
            out.push(values[(i, c)] - means[c]);
        }
    }
    out
}

fn covariance_from_rows(data: &[f64], n: usize, p: usize, centered: bool) -> ScatterMatrix {
    let mut acc = CompensatedMatrix::new(p);
    for row in data.chunks_exact(p) {
        acc.add_outer(row, row);
    }
    ScatterMatrix {
        matrix: symmetrize(&acc.to_matrix(1.0 / n as f64)),
        kernel: Kernel::Identity,
        normalization: 1.0,
        centered,
        renormalized: true,
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Covariance matrix M(f₀) of a sample.
pub fn covariance(sample: &SpatialSample, centered: bool) -> ScatterMatrix {
    let data = row_major(&sample.values, centered);
    covariance_from_rows(&data, sample.n(), sample.p(), centered)
}

/// Renormalized local covariance matrix for an arbitrary kernel, by
/// distance-based neighbor search.
pub fn scatter(sample: &SpatialSample, kernel: &Kernel, centered: bool) -> Result<ScatterMatrix> {
    scatter_with(
        sample,
        kernel,
        ScatterOptions {
            centered,
            renormalized: true,
        },
    )
}

pub fn scatter_with(
    sample: &SpatialSample,
    kernel: &Kernel,
    options: ScatterOptions,
) -> Result<ScatterMatrix> {
    if *kernel == Kernel::Identity {
        return Ok(covariance(sample, options.centered));
    }
    ScatterPlan::generic(&sample.locations, std::slice::from_ref(kernel))?.local(
        &sample.values,
        0,
        options,
    )
}

/// m-way lag-h local covariance matrix on a regular grid, with neighbors
/// found by shifting lattice coordinates.
pub fn scatter_grid(
    sample: &SpatialSample,
    ways: usize,
    lag: usize,
    centered: bool,
) -> Result<ScatterMatrix> {
    let kernel = Kernel::grid_lag(ways, lag)?;
    let index = GridIndex::new(&sample.locations)?;
    if ways > index.dim() {
        return Err(SbssError::InvalidArgument(format!(
            "{kernel} needs at least {ways} spatial dimensions"
        )));
    }
    let hood = Neighborhood::from_grid(&index, ways, lag);
    let plan = ScatterPlan::assemble(sample.n(), vec![kernel], vec![hood])?;
    plan.local(
        &sample.values,
        0,
        ScatterOptions {
            centered,
            renormalized: true,
        },
    )
}
