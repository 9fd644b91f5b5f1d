//! Tests of `H0r`: exactly `p - r` latent components are white noise.
//!
//! The statistic is `t_r = n/2 Σ_ℓ ‖D_ℓ[r.., r..]‖²_F`, the squared
//! Frobenius mass of the trailing `(p-r)×(p-r)` blocks of the diagonalized
//! local covariance matrices. With renormalized scatters and kernels of
//! disjoint support it is asymptotically `χ²` with `k(p-r)(p-r+1)/2` degrees
//! of freedom; with the unnormalized scatters it is a weighted sum
//! `Σ_ℓ F_ℓ χ²_{(p-r)(p-r+1)/2}` whose tail is computed by Imhof inversion.

use serde::{Deserialize, Serialize};

use crate::diag::{fit_with, SbssSolution};
use crate::error::{Result, SbssError};
use crate::geometry::SpatialSample;
use crate::kernels::KernelSet;
use crate::scatter::ScatterOptions;
use crate::special::chi2_sf;
use crate::summation::CompensatedSum;

/// Reference distribution behind a p-value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NullModel {
    ChiSquare {
        df: usize,
    },
    WeightedChiSquare {
        weights: Vec<f64>,
        df_each: usize,
        /// `imhof` or `moment_matched`.
        tail: String,
    },
    Bootstrap {
        #[serde(rename = "B")]
        b: usize,
        count_geq: usize,
    },
}

/// Resampling settings echoed into bootstrap results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInfo {
    #[serde(rename = "B")]
    pub b: usize,
    pub count_geq: usize,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: String,
    pub r: usize,
    pub statistic: f64,
    #[serde(rename = "null")]
    pub null_model: NullModel,
    pub p_value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapInfo>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Degrees of freedom of one kernel's trailing block.
pub fn df_each(p: usize, r: usize) -> usize {
    let m = p - r;
    m * (m + 1) / 2
}

/// `[t_0, …, t_{p-1}]` for a fitted solution.
///
/// Built from `r = p-1` downwards by adding the non-negative mass of row and
/// column `r`, so `t_r ≥ t_{r+1}` holds exactly in floating point.
pub fn statistics(sol: &SbssSolution) -> Vec<f64> {
    let p = sol.p();
    let mut mass = vec![0.0; p];
    let mut acc = 0.0f64;
    for r in (0..p).rev() {
        let mut inc = CompensatedSum::default();
        for d in &sol.d_matrices {
            inc.add(d[(r, r)] * d[(r, r)]);
            for j in (r + 1)..p {
                inc.add(d[(r, j)] * d[(r, j)] + d[(j, r)] * d[(j, r)]);
            }
        }
        acc += inc.value().max(0.0);
        mass[r] = acc;
    }
    let half_n = sol.n as f64 / 2.0;
    mass.into_iter().map(|m| half_n * m).collect()
}

/// `t_r` for `0 ≤ r ≤ p-1`.
pub fn statistic(sol: &SbssSolution, r: usize) -> Result<f64> {
    let p = sol.p();
    if r >= p {
        return Err(SbssError::RankOutOfRange { r, p });
    }
    Ok(statistics(sol)[r])
}

/// Upper `χ²` tail with `k(p-r)(p-r+1)/2` degrees of freedom.
pub fn asymptotic_pvalue(t: f64, p: usize, r: usize, k: usize) -> f64 {
    chi2_sf(t, (k * df_each(p, r)) as f64)
}

/// Truncation target of the Imhof integral; well inside the 1e-6 contract.
const IMHOF_TOLERANCE: f64 = 1e-9;
const IMHOF_MAX_PANELS: usize = 2_000_000;

const GL_NODES: [f64; 5] = [
    0.148_874_338_981_631_2,
    0.433_395_394_129_247_2,
    0.679_409_568_299_024_4,
    0.865_063_366_688_984_5,
    0.973_906_528_517_171_7,
];
const GL_WEIGHTS: [f64; 5] = [
    0.295_524_224_714_752_9,
    0.269_266_719_309_996_4,
    0.219_086_362_515_982_0,
    0.149_451_349_150_580_6,
    0.066_671_344_308_688_1,
];

/// `P(Σ_ℓ w_ℓ χ²_{df_each} > t)` for independent chi-squares, by numerical
/// inversion of the characteristic function (Imhof).
///
/// The oscillatory integral is integrated on Gauss–Legendre panels no wider
/// than a quarter period and truncated once a rigorous bound on the
/// remaining tail drops below 1e-9.
pub fn weighted_chi2_pvalue(t: f64, weights: &[f64], df_each: usize) -> Result<f64> {
    validate_weights(weights, df_each)?;
    if !t.is_finite() {
        return Err(SbssError::InvalidArgument(format!("statistic {t} is not finite")));
    }
    if t <= 0.0 {
        return Ok(1.0);
    }
    let h = df_each as f64;
    let half_order = 0.5 * h * weights.len() as f64;
    let log_weight_power: f64 = weights.iter().map(|w| 0.5 * h * w.ln()).sum();

    let theta = |u: f64| -> f64 {
        0.5 * h * weights.iter().map(|w| (w * u).atan()).sum::<f64>() - 0.5 * t * u
    };
    let dtheta = |u: f64| -> f64 {
        0.5 * h * weights.iter().map(|w| w / (1.0 + w * w * u * u)).sum::<f64>() - 0.5 * t
    };
    let ln_rho = |u: f64| -> f64 {
        0.25 * h * weights.iter().map(|w| (w * w * u * u).ln_1p()).sum::<f64>()
    };
    let integrand = |u: f64| -> f64 { theta(u).sin() / (u * ln_rho(u).exp()) };
    // bound on ∫_U^∞ |integrand| using ρ(u) ≥ Π (w u)^{h/2}
    let crude_tail = |u: f64| -> f64 { (-(half_order * u.ln() + log_weight_power)).exp() / half_order };
    // second-mean-value bound once the phase is strictly decreasing
    let oscillation_tail = |u: f64| -> f64 {
        let slope = dtheta(u);
        if slope < 0.0 {
            2.0 / (u * ln_rho(u).exp() * slope.abs())
        } else {
            f64::INFINITY
        }
    };

    let mut total = CompensatedSum::default();
    let mut u = 0.0;
    let first_width = std::f64::consts::FRAC_PI_2 / dtheta_bound(weights, h, t, 0.0);
    for _ in 0..IMHOF_MAX_PANELS {
        let omega = dtheta_bound(weights, h, t, u);
        // quarter periods of the phase, but no wider than u itself: for small t
        // the period is long while the algebraic decay still needs resolving
        let width = (std::f64::consts::FRAC_PI_2 / omega).min(u.max(first_width));
        let mid = u + 0.5 * width;
        let half = 0.5 * width;
        let mut panel = 0.0;
        for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
            panel += w * (integrand(mid - half * x) + integrand(mid + half * x));
        }
        total.add(panel * half);
        u += width;
        let bound = crude_tail(u).min(oscillation_tail(u)) / std::f64::consts::PI;
        if bound <= IMHOF_TOLERANCE {
            let p = 0.5 + total.value() / std::f64::consts::PI;
            return Ok(p.clamp(0.0, 1.0));
        }
    }
    Err(SbssError::QuadratureFailure(format!(
        "tail bound above {IMHOF_TOLERANCE:e} after {IMHOF_MAX_PANELS} panels (t = {t})"
    )))
}

/// Upper bound on |θ'| over `[u, ∞)`; sets the panel width.
fn dtheta_bound(weights: &[f64], h: f64, t: f64, u: f64) -> f64 {
    0.5 * h * weights.iter().map(|w| w / (1.0 + w * w * u * u)).sum::<f64>() + 0.5 * t
}

fn validate_weights(weights: &[f64], df_each: usize) -> Result<()> {
    if weights.is_empty() || df_each == 0 {
        return Err(SbssError::InvalidArgument(
            "weighted chi-square needs at least one weight and df_each ≥ 1".into(),
        ));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(SbssError::InvalidArgument(format!(
            "weights must be positive and finite, got {weights:?}"
        )));
    }
    Ok(())
}

/// Three-moment (Pearson) approximation `a + b χ²_ν` of the same tail.
pub fn weighted_chi2_moment_matched(t: f64, weights: &[f64], df_each: usize) -> Result<f64> {
    validate_weights(weights, df_each)?;
    let h = df_each as f64;
    let c = |j: i32| -> f64 { weights.iter().map(|w| h * w.powi(j)).sum() };
    let (c1, c2, c3) = (c(1), c(2), c(3));
    let nu = c2 * c2 * c2 / (c3 * c3);
    let b = c3 / c2;
    let a = c1 - b * nu;
    let x = (t - a) / b;
    if x <= 0.0 {
        return Ok(1.0);
    }
    Ok(chi2_sf(x, nu))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TestOptions {
    pub centered: bool,
    /// Use the `1/n` scatters and the weighted chi-square law.
    pub unnormalized: bool,
    /// Permit kernels with `f(0) ≠ 0` (e.g. balls).
    pub allow_nonconforming: bool,
}

impl Default for TestOptions {
    fn default() -> Self {
        Self {
            centered: true,
            unnormalized: false,
            allow_nonconforming: false,
        }
    }
}

impl TestOptions {
    pub fn scatter_options(&self) -> ScatterOptions {
        ScatterOptions {
            centered: self.centered,
            renormalized: !self.unnormalized,
        }
    }
}

/// Rejects kernel sets the asymptotic laws do not cover.
pub fn check_kernels(kernels: &KernelSet, options: &TestOptions) -> Result<()> {
    if !options.allow_nonconforming {
        if let Some(k) = kernels.non_conforming() {
            return Err(SbssError::NonConformingKernel {
                kernel: k.to_string(),
            });
        }
    }
    if !kernels.disjoint_supports() {
        return Err(SbssError::OverlappingKernelSupports);
    }
    Ok(())
}

/// Fits the sample and tests `H0r` with the asymptotic law.
pub fn asymptotic_test(
    sample: &SpatialSample,
    kernels: &KernelSet,
    r: usize,
    options: TestOptions,
) -> Result<TestResult> {
    check_kernels(kernels, &options)?;
    let p = sample.p();
    if r >= p {
        return Err(SbssError::RankOutOfRange { r, p });
    }
    let sol = fit_with(sample, kernels, options.scatter_options())?;
    test_solution(&sol, r)
}

/// Asymptotic test of `H0r` on an existing fit; the null law follows the
/// fit's scatter normalization.
pub fn test_solution(sol: &SbssSolution, r: usize) -> Result<TestResult> {
    let t = statistic(sol, r)?;
    test_statistic(sol, r, t)
}

pub(crate) fn test_statistic(sol: &SbssSolution, r: usize, t: f64) -> Result<TestResult> {
    let p = sol.p();
    let k = sol.k();
    if sol.options.renormalized {
        return Ok(TestResult {
            method: "asym".into(),
            r,
            statistic: t,
            null_model: NullModel::ChiSquare {
                df: k * df_each(p, r),
            },
            p_value: asymptotic_pvalue(t, p, r, k),
            bootstrap: None,
            warnings: Vec::new(),
        });
    }
    let weights = sol.normalizations.clone();
    let h = df_each(p, r);
    let mut warnings = Vec::new();
    let (p_value, tail) = match weighted_chi2_pvalue(t, &weights, h) {
        Ok(pv) => (pv, "imhof"),
        Err(SbssError::QuadratureFailure(why)) => {
            let msg = format!("Imhof quadrature failed ({why}); using three-moment approximation");
            log::warn!("{msg}");
            warnings.push(msg);
            (weighted_chi2_moment_matched(t, &weights, h)?, "moment_matched")
        }
        Err(e) => return Err(e),
    };
    Ok(TestResult {
        method: "asym".into(),
        r,
        statistic: t,
        null_model: NullModel::WeightedChiSquare {
            weights,
            df_each: h,
            tail: tail.into(),
        },
        p_value,
        bootstrap: None,
        warnings,
    })
}
