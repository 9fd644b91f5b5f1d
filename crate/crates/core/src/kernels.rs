//! Kernel functions weighting location pairs, and their normalization constants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SbssError};
use crate::geometry::{lag_scale, neighbor_pairs, LocationSet};

/// A symmetric weight function on lag vectors.
///
/// Grid-lag kernels take lags measured in lattice steps of a regular grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Kernel {
    /// f₀(s) = I(s = 0); yields the ordinary covariance matrix.
    Identity,
    /// I(inner < ‖s‖ ≤ outer).
    Ring { inner: f64, outer: f64 },
    /// I(‖s‖ ≤ radius). Does not vanish at zero.
    Ball { radius: f64 },
    /// I(s ∈ {−h, 0, h}^d, |s|₁ = h·m): the m-way lag-h grid neighborhood.
    GridLag { ways: usize, lag: usize },
}

const LAG_TOLERANCE: f64 = 1e-9;

impl Kernel {
    pub fn ring(inner: f64, outer: f64) -> Result<Self> {
        if !(inner >= 0.0 && outer > inner && outer.is_finite()) {
            return Err(SbssError::InvalidArgument(format!(
                "ring kernel needs 0 <= r1 < r2 < inf (got {inner}, {outer})"
            )));
        }
        Ok(Kernel::Ring { inner, outer })
    }

    pub fn ball(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(SbssError::InvalidArgument(format!(
                "ball kernel needs a positive radius (got {radius})"
            )));
        }
        Ok(Kernel::Ball { radius })
    }

    pub fn grid_lag(ways: usize, lag: usize) -> Result<Self> {
        if ways == 0 || ways > 3 || lag == 0 {
            return Err(SbssError::InvalidArgument(format!(
                "grid-lag kernel needs 1 <= m <= 3 and h >= 1 (got m = {ways}, h = {lag})"
            )));
        }
        Ok(Kernel::GridLag { ways, lag })
    }

    /// Kernel weight at `lag`.
    pub fn eval(&self, lag: &[f64]) -> f64 {
        let norm = || lag.iter().map(|x| x * x).sum::<f64>().sqrt();
        let hit = match *self {
            Kernel::Identity => lag.iter().all(|&x| x == 0.0),
            Kernel::Ring { inner, outer } => {
                let r = norm();
                r > inner && r <= outer
            }
            Kernel::Ball { radius } => norm() <= radius,
            Kernel::GridLag { ways, lag: h } => {
                let h = h as f64;
                let tol = LAG_TOLERANCE * h;
                let mut moved = 0;
                for &x in lag {
                    if (x.abs() - h).abs() <= tol {
                        moved += 1;
                    } else if x.abs() > tol {
                        return 0.0;
                    }
                }
                moved == ways
            }
        };
        if hit {
            1.0
        } else {
            0.0
        }
    }

    /// Largest lag norm with non-zero weight (lattice units for grid lags).
    pub fn support_radius(&self) -> f64 {
        match *self {
            Kernel::Identity => 0.0,
            Kernel::Ring { outer, .. } => outer,
            Kernel::Ball { radius } => radius,
            Kernel::GridLag { ways, lag } => lag as f64 * (ways as f64).sqrt() * (1.0 + LAG_TOLERANCE),
        }
    }

    pub fn is_grid(&self) -> bool {
        matches!(self, Kernel::GridLag { .. })
    }

    /// Whether f(0) = 0, as dimension tests require.
    pub fn vanishes_at_zero(&self) -> bool {
        matches!(self, Kernel::Ring { .. } | Kernel::GridLag { .. })
    }

    /// Whether f·g ≡ 0 is guaranteed for the two kernels.
    ///
    /// Exact for ring/ring, ball and grid-lag/grid-lag combinations. A ring
    /// and a grid lag live in different units and are never reported disjoint.
    pub fn disjoint_from(&self, other: &Kernel) -> bool {
        use Kernel::*;
        match (*self, *other) {
            (Ring { inner: a, outer: b }, Ring { inner: c, outer: d }) => b <= c || d <= a,
            (Ball { .. }, Ball { .. }) | (Identity, Identity) => false,
            (Ball { .. }, Identity) | (Identity, Ball { .. }) => false,
            (Ball { radius }, Ring { inner, .. }) | (Ring { inner, .. }, Ball { radius }) => {
                radius <= inner
            }
            (Identity, _) | (_, Identity) => true,
            (GridLag { ways: m1, lag: h1 }, GridLag { ways: m2, lag: h2 }) => (m1, h1) != (m2, h2),
            _ => false,
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Identity => write!(f, "identity"),
            Kernel::Ring { inner, outer } => write!(f, "ring:{inner}:{outer}"),
            Kernel::Ball { radius } => write!(f, "ball:{radius}"),
            Kernel::GridLag { ways, lag } => write!(f, "lag:{ways}:{lag}"),
        }
    }
}

impl FromStr for Kernel {
    type Err = SbssError;

    /// Parses `ring:r1:r2`, `ball:r` or `lag:m:h`.
    fn from_str(spec: &str) -> Result<Self> {
        let fail = |reason: &str| SbssError::KernelParse {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = spec.trim().split(':').map(str::trim).collect();
        let real = |s: &str| s.parse::<f64>().map_err(|_| fail("expected a number"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| fail("expected a positive integer"));
        let built = match parts.as_slice() {
            ["ring", r1, r2] => Kernel::ring(real(r1)?, real(r2)?),
            ["ball", r] => Kernel::ball(real(r)?),
            ["lag", m, h] => Kernel::grid_lag(int(m)?, int(h)?),
            _ => return Err(fail("expected ring:r1:r2, ball:r or lag:m:h")),
        };
        built.map_err(|e| fail(&e.to_string()))
    }
}

/// An ordered, non-empty list of kernels f₁, …, f_k.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelSet {
    kernels: Vec<Kernel>,
    disjoint_supports: bool,
}

impl KernelSet {
    pub fn new(kernels: Vec<Kernel>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(SbssError::InvalidArgument("at least one kernel is required".into()));
        }
        let disjoint_supports = kernels.iter().enumerate().all(|(a, ka)| {
            kernels[a + 1..].iter().all(|kb| ka.disjoint_from(kb))
        });
        if !disjoint_supports {
            log::warn!("kernel supports overlap; chi-square null distribution does not apply");
        }
        Ok(Self {
            kernels,
            disjoint_supports,
        })
    }

    /// Parses a comma-separated kernel list such as `ring:0:2,ring:2:4`.
    pub fn parse(spec: &str) -> Result<Self> {
        let kernels = spec
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Kernel>>>()?;
        Self::new(kernels)
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn disjoint_supports(&self) -> bool {
        self.disjoint_supports
    }

    /// First kernel that does not vanish at zero, if any.
    pub fn non_conforming(&self) -> Option<&Kernel> {
        self.kernels.iter().find(|k| !k.vanishes_at_zero())
    }
}

impl fmt::Display for KernelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.kernels.iter().map(Kernel::to_string).collect();
        write!(f, "{}", parts.join(","))
    }
}

/// F_{n,f} = (1/n) Σ_{i,j} f(s_i − s_j)².
pub fn normalization(loc: &LocationSet, kernel: &Kernel) -> Result<f64> {
    let f = cross_normalization(loc, kernel, kernel)?;
    if f <= 0.0 {
        return Err(SbssError::DegenerateKernel {
            kernel: kernel.to_string(),
        });
    }
    Ok(f)
}

/// F_{n,f,g} = (1/n) Σ_{i,j} f(s_i − s_j) g(s_i − s_j).
pub fn cross_normalization(loc: &LocationSet, first: &Kernel, second: &Kernel) -> Result<f64> {
    // Iterate over the smaller support; the canonical choice makes the result
    // exactly symmetric in its arguments.
    let (outer, inner) = {
        let key = |k: &Kernel| (k.support_radius(), k.to_string());
        if key(first).partial_cmp(&key(second)) == Some(std::cmp::Ordering::Greater) {
            (second, first)
        } else {
            (first, second)
        }
    };
    let inner_scale = lag_scale(loc, inner)?;
    let d = loc.dim();
    let mut lag = [0.0f64; 3];
    let mut total = 0.0;
    for pair in neighbor_pairs(loc, outer)? {
        let (a, b) = (loc.point(pair.i), loc.point(pair.j));
        for k in 0..d {
            lag[k] = (a[k] - b[k]) / inner_scale;
        }
        total += pair.weight * inner.eval(&lag[..d]);
    }
    Ok(total / loc.len() as f64)
}
