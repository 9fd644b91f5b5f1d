//! Whitening and orthogonal approximate joint diagonalization.
//!
//! The unmixing matrix is `Γ = Uᵀ W` where `W = M(f₀)^{-1/2}` and the
//! orthogonal `U` maximizes `Σ_ℓ Σ_j (Uᵀ W M(f_ℓ) W U)²_jj`. Rows are ordered
//! by decreasing pseudo-eigenvalue `Σ_ℓ (D_ℓ)²_jj` and signed so that the
//! largest-magnitude entry of each row of Γ is positive.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, SbssError};
use crate::geometry::SpatialSample;
use crate::kernels::{Kernel, KernelSet};
use crate::scatter::{symmetrize, ScatterOptions, ScatterPlan};

/// Eigenvalues of M(f₀) below this fraction of the largest are treated as zero.
const EIGEN_FLOOR: f64 = 1e-12;

/// Symmetric inverse square root `W` of a positive definite covariance, `W s0 W = I`.
pub fn whiten(s0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(s0));
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= EIGEN_FLOOR * max {
        return Err(SbssError::SingularScatter { eigenvalue: min });
    }
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let w = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    Ok(symmetrize(&w))
}

#[derive(Clone, Copy, Debug)]
pub struct JointDiagOptions {
    pub max_sweeps: usize,
    /// Converged once every rotation angle of a sweep is below this.
    pub angle_tolerance: f64,
}

impl Default for JointDiagOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 200,
            angle_tolerance: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct JointDiagonalization {
    /// Orthogonal U; the columns are the joint eigenvectors.
    pub rotation: DMatrix<f64>,
    /// Rotated matrices Uᵀ M_ℓ U.
    pub rotated: Vec<DMatrix<f64>>,
    pub sweeps: usize,
    /// Σ_ℓ Σ_j (Uᵀ M_ℓ U)²_jj at the start and after every sweep.
    pub objective: Vec<f64>,
}

fn diagonality(mats: &[DMatrix<f64>]) -> f64 {
    mats.iter()
        .map(|m| m.diagonal().iter().map(|d| d * d).sum::<f64>())
        .sum()
}

/// Cyclic Jacobi joint diagonalization of symmetric matrices.
///
/// Starts from the eigenbasis of the first matrix (sorted by decreasing
/// eigenvalue), so the result is equivariant under orthogonal changes of
/// basis, then sweeps over all index pairs with the closed-form rotation that
/// maximizes the summed squared diagonal of the pair.
pub fn joint_diagonalize(mats: &[DMatrix<f64>]) -> Result<JointDiagonalization> {
    joint_diagonalize_with(mats, JointDiagOptions::default())
}

pub fn joint_diagonalize_with(
    mats: &[DMatrix<f64>],
    options: JointDiagOptions,
) -> Result<JointDiagonalization> {
    let first = mats
        .first()
        .ok_or_else(|| SbssError::InvalidArgument("no matrices to diagonalize".into()))?;
    let p = first.nrows();
    if mats.iter().any(|m| m.shape() != (p, p)) {
        return Err(SbssError::DimensionMismatch(
            "joint diagonalization needs square matrices of equal size".into(),
        ));
    }

    let mut u = sorted_eigenbasis(first);
    let mut a: Vec<DMatrix<f64>> = mats
        .iter()
        .map(|m| symmetrize(&(u.transpose() * symmetrize(m) * &u)))
        .collect();
    let scale: f64 = a.iter().map(|m| m.norm_squared()).sum();
    let negligible = (1e-15f64).powi(2) * scale;

    let mut objective = vec![diagonality(&a)];
    let mut last_angle = 0.0;
    for sweep in 1..=options.max_sweeps {
        let mut max_angle = 0.0f64;
        for i in 0..p.saturating_sub(1) {
            for j in (i + 1)..p {
                let (mut g11, mut g12, mut g22) = (0.0, 0.0, 0.0);
                for m in &a {
                    let diff = m[(i, i)] - m[(j, j)];
                    let off = m[(i, j)] + m[(j, i)];
                    g11 += diff * diff;
                    g12 += diff * off;
                    g22 += off * off;
                }
                if g22 <= negligible {
                    continue;
                }
                let ton = g11 - g22;
                let toff = 2.0 * g12;
                let theta = 0.5 * toff.atan2(ton + ton.hypot(toff));
                max_angle = max_angle.max(theta.abs());
                if theta == 0.0 {
                    continue;
                }
                let (s, c) = theta.sin_cos();
                for m in a.iter_mut() {
                    rotate(m, i, j, c, s);
                }
                for r in 0..p {
                    let (ui, uj) = (u[(r, i)], u[(r, j)]);
                    u[(r, i)] = c * ui + s * uj;
                    u[(r, j)] = -s * ui + c * uj;
                }
            }
        }
        objective.push(diagonality(&a));
        last_angle = max_angle;
        if max_angle < options.angle_tolerance {
            return Ok(JointDiagonalization {
                rotation: u,
                rotated: a,
                sweeps: sweep,
                objective,
            });
        }
    }
    Err(SbssError::NoConvergence {
        sweeps: options.max_sweeps,
        last_angle,
    })
}

/// m ← Rᵀ m R for the Givens rotation R acting on coordinates (i, j).
fn rotate(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    let p = m.nrows();
    for r in 0..p {
        let (mi, mj) = (m[(r, i)], m[(r, j)]);
        m[(r, i)] = c * mi + s * mj;
        m[(r, j)] = -s * mi + c * mj;
    }
    for col in 0..p {
        let (mi, mj) = (m[(i, col)], m[(j, col)]);
        m[(i, col)] = c * mi + s * mj;
        m[(j, col)] = -s * mi + c * mj;
    }
}

fn sorted_eigenbasis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    DMatrix::from_fn(m.nrows(), m.nrows(), |r, c| eig.eigenvectors[(r, order[c])])
}

/// Fitted spatial blind source separation.
#[derive(Clone, Debug)]
pub struct SbssSolution {
    /// Unmixing matrix Γ (p×p); latent ẑ = Γ (x − x̄).
    pub gamma: DMatrix<f64>,
    /// W = M(f₀)^{-1/2}.
    pub whitener: DMatrix<f64>,
    /// D_ℓ = Γ M(f_ℓ) Γᵀ.
    pub d_matrices: Vec<DMatrix<f64>>,
    /// Σ_ℓ (D_ℓ)²_jj, non-increasing.
    pub pseudo_eigenvalues: Vec<f64>,
    /// n×p estimated latent field.
    pub latent: DMatrix<f64>,
    /// Column means of the data.
    pub mean: DVector<f64>,
    pub kernels: Vec<Kernel>,
    /// F_{n,f_ℓ} per kernel.
    pub normalizations: Vec<f64>,
    pub options: ScatterOptions,
    pub sweeps: usize,
    pub n: usize,
}

impl SbssSolution {
    pub fn p(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn k(&self) -> usize {
        self.d_matrices.len()
    }

    /// Mixing estimate Γ⁻¹.
    pub fn mixing(&self) -> Result<DMatrix<f64>> {
        self.gamma
            .clone()
            .try_inverse()
            .ok_or(SbssError::SingularScatter { eigenvalue: 0.0 })
    }
}

/// Fits with centered, renormalized local covariance matrices.
pub fn fit(sample: &SpatialSample, kernels: &KernelSet) -> Result<SbssSolution> {
    fit_with(sample, kernels, ScatterOptions::default())
}

pub fn fit_with(
    sample: &SpatialSample,
    kernels: &KernelSet,
    options: ScatterOptions,
) -> Result<SbssSolution> {
    let plan = ScatterPlan::new(&sample.locations, kernels.kernels())?;
    fit_plan(&plan, &sample.values, options)
}

/// Fits a value matrix whose locations are already encoded in `plan`.
pub fn fit_plan(
    plan: &ScatterPlan,
    values: &DMatrix<f64>,
    options: ScatterOptions,
) -> Result<SbssSolution> {
    let (cov, locals) = plan.all(values, options)?;
    let w = whiten(&cov.matrix)?;
    let whitened: Vec<DMatrix<f64>> = locals
        .iter()
        .map(|m| symmetrize(&(&w * &m.matrix * &w)))
        .collect();
    let jd = joint_diagonalize(&whitened)?;
    let u = &jd.rotation;
    let p = w.nrows();

    let gamma_raw = u.transpose() * &w;
    let d_raw: Vec<DMatrix<f64>> = whitened
        .iter()
        .map(|m| symmetrize(&(u.transpose() * m * u)))
        .collect();
    let pseudo_raw: Vec<f64> = (0..p)
        .map(|j| d_raw.iter().map(|d| d[(j, j)] * d[(j, j)]).sum())
        .collect();

    // stable: ties keep pre-rotation index order
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| pseudo_raw[b].total_cmp(&pseudo_raw[a]));

    let mut gamma = DMatrix::from_fn(p, p, |r, c| gamma_raw[(order[r], c)]);
    let mut signs = vec![1.0; p];
    for (r, sign) in signs.iter_mut().enumerate() {
        let row = gamma.row(r);
        let lead = row
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if lead < 0.0 {
            *sign = -1.0;
        }
    }
    for (r, &sign) in signs.iter().enumerate() {
        if sign < 0.0 {
            gamma.row_mut(r).neg_mut();
        }
    }
    let d_matrices: Vec<DMatrix<f64>> = d_raw
        .iter()
        .map(|d| DMatrix::from_fn(p, p, |r, c| signs[r] * signs[c] * d[(order[r], order[c])]))
        .collect();
    let pseudo_eigenvalues = order.iter().map(|&j| pseudo_raw[j]).collect();

    let mean = DVector::from_iterator(p, values.column_iter().map(|c| c.mean()));
    let mut centered = values.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let latent = centered * gamma.transpose();

    Ok(SbssSolution {
        gamma,
        whitener: w,
        d_matrices,
        pseudo_eigenvalues,
        latent,
        mean,
        kernels: plan.kernels().to_vec(),
        normalizations: plan.normalizations().to_vec(),
        options,
        sweeps: jd.sweeps,
        n: plan.n(),
    })
}
