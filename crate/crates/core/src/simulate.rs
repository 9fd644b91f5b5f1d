//! Simulated SBSS worlds: Matérn Gaussian random fields, white noise,
//! coordinate patterns and mixing, plus the empirical variogram.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SbssError};
use crate::geometry::{distance, neighbor_pairs, LocationSet, SpatialSample};
use crate::kernels::Kernel;
use crate::special::{bessel_k_scaled, ln_gamma};

/// Largest location count handled by the dense Cholesky sampler.
pub const MAX_DENSE_LOCATIONS: usize = 5000;
const JITTER: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    /// Shape ν.
    pub nu: f64,
    /// Range φ.
    pub phi: f64,
}

impl MaternParams {
    pub fn new(nu: f64, phi: f64) -> Result<Self> {
        if !(nu > 0.0 && phi > 0.0 && nu.is_finite() && phi.is_finite()) {
            return Err(SbssError::InvalidArgument(format!(
                "Matérn parameters must be positive, got nu={nu}, phi={phi}"
            )));
        }
        Ok(Self { nu, phi })
    }
}

/// Matérn correlation `2^{1-ν}/Γ(ν) (h/φ)^ν K_ν(h/φ)`, with value 1 at `h = 0`.
pub fn matern(h: f64, params: MaternParams) -> f64 {
    let MaternParams { nu, phi } = params;
    let x = h.abs() / phi;
    if x == 0.0 {
        return 1.0;
    }
    let ln = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * x.ln()
        + bessel_k_scaled(nu, x).ln()
        - x;
    ln.exp().min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordinatePattern {
    /// `n_e²` points uniform on `[0, n_e]²`.
    Uniform,
    /// As `Uniform` but with `x / n_e ~ Beta(2, 5)`.
    BetaSkewed,
    /// The `(n_e + 1)²` integer points of `[0, n_e]²`.
    Grid,
}

impl std::str::FromStr for CoordinatePattern {
    type Err = SbssError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "beta-skewed" | "skewed" => Ok(Self::BetaSkewed),
            "grid" => Ok(Self::Grid),
            other => Err(SbssError::InvalidArgument(format!(
                "unknown coordinate pattern '{other}' (expected uniform, skewed or grid)"
            ))),
        }
    }
}

/// Draws a two-dimensional location pattern on `[0, n_e]²`.
pub fn gen_coords<R: Rng + ?Sized>(
    pattern: CoordinatePattern,
    domain_edge: usize,
    rng: &mut R,
) -> Result<LocationSet> {
    if domain_edge < 2 {
        return Err(SbssError::InvalidArgument(format!(
            "domain edge must be at least 2, got {domain_edge}"
        )));
    }
    let edge = domain_edge as f64;
    if pattern == CoordinatePattern::Grid {
        let side = domain_edge + 1;
        let coords = (0..side * side)
            .flat_map(|i| [(i % side) as f64, (i / side) as f64])
            .collect();
        return LocationSet::new(coords, 2);
    }
    let beta = Beta::new(2.0, 5.0).expect("valid beta parameters");
    let n = domain_edge * domain_edge;
    let draw = |rng: &mut R| -> [f64; 2] {
        let x = match pattern {
            CoordinatePattern::BetaSkewed => beta.sample(rng),
            _ => rng.random::<f64>(),
        };
        [x * edge, rng.random::<f64>() * edge]
    };
    let mut points: Vec<[f64; 2]> = (0..n).map(|_| draw(rng)).collect();
    // continuous draws collide only with negligible probability; redraw if they do
    loop {
        match LocationSet::from_points(&points) {
            Ok(loc) => return Ok(loc),
            Err(SbssError::DuplicateLocation { second, .. }) => points[second] = draw(rng),
            Err(e) => return Err(e),
        }
    }
}

/// Latent SBSS model `x = μ + Ω z` with Matérn signals followed by white noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub signals: Vec<MaternParams>,
    pub noise_count: usize,
    /// p×p mixing Ω.
    pub mixing: DMatrix<f64>,
    pub mean: DVector<f64>,
}

impl LatentModel {
    /// Identity mixing and zero mean.
    pub fn new(signals: Vec<MaternParams>, noise_count: usize) -> Result<Self> {
        let p = signals.len() + noise_count;
        if p == 0 {
            return Err(SbssError::InvalidArgument("model has no components".into()));
        }
        Ok(Self {
            signals,
            noise_count,
            mixing: DMatrix::identity(p, p),
            mean: DVector::zeros(p),
        })
    }

    /// Signals (3, 2), (2, 1.5), (1, 1) plus `noise_count` noise channels.
    pub fn setting1(noise_count: usize) -> Self {
        let signals = [(3.0, 2.0), (2.0, 1.5), (1.0, 1.0)];
        Self::new(
            signals.iter().map(|&(nu, phi)| MaternParams { nu, phi }).collect(),
            noise_count,
        )
        .expect("non-empty model")
    }

    /// Signals (3, 2), (2, 1.5), (0.6, 0.6) plus `noise_count` noise channels.
    pub fn setting2(noise_count: usize) -> Self {
        let signals = [(3.0, 2.0), (2.0, 1.5), (0.6, 0.6)];
        Self::new(
            signals.iter().map(|&(nu, phi)| MaternParams { nu, phi }).collect(),
            noise_count,
        )
        .expect("non-empty model")
    }

    pub fn with_mixing(mut self, mixing: DMatrix<f64>) -> Result<Self> {
        let p = self.p();
        if mixing.shape() != (p, p) {
            return Err(SbssError::DimensionMismatch(format!(
                "mixing must be {p}×{p}, got {}×{}",
                mixing.nrows(),
                mixing.ncols()
            )));
        }
        let cond = condition_number(&mixing);
        if !cond.is_finite() {
            return Err(SbssError::InvalidArgument("mixing matrix is singular".into()));
        }
        self.mixing = mixing;
        Ok(self)
    }

    pub fn with_mean(mut self, mean: DVector<f64>) -> Result<Self> {
        if mean.len() != self.p() {
            return Err(SbssError::DimensionMismatch(format!(
                "mean must have {} entries, got {}",
                self.p(),
                mean.len()
            )));
        }
        self.mean = mean;
        Ok(self)
    }

    pub fn p(&self) -> usize {
        self.signals.len() + self.noise_count
    }

    pub fn q(&self) -> usize {
        self.signals.len()
    }

    /// Condition number of the mixing matrix.
    pub fn mixing_condition(&self) -> f64 {
        condition_number(&self.mixing)
    }
}

/// Ratio of extreme singular values; infinite for singular matrices.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Random `p×p` matrix `Q₁ diag(s) Q₂` with orthogonal `Q`s and singular
/// values log-uniform in `[1, max_condition]`.
pub fn random_mixing<R: Rng + ?Sized>(p: usize, max_condition: f64, rng: &mut R) -> DMatrix<f64> {
    let mut orthogonal = || {
        let a = DMatrix::<f64>::from_fn(p, p, |_, _| StandardNormal.sample(rng));
        a.qr().q()
    };
    let q1 = orthogonal();
    let q2 = orthogonal();
    let log_max = max_condition.max(1.0).ln();
    let s = DVector::from_fn(p, |_, _| (rng.random::<f64>() * log_max).exp());
    q1 * DMatrix::from_diagonal(&s) * q2
}

/// Lower Cholesky factor of the Matérn correlation matrix of `loc`.
pub fn matern_factor(loc: &LocationSet, params: MaternParams) -> Result<DMatrix<f64>> {
    let n = loc.len();
    if n > MAX_DENSE_LOCATIONS {
        return Err(SbssError::TooLarge {
            n,
            limit: MAX_DENSE_LOCATIONS,
        });
    }
    let mut k = DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = matern(distance(loc.point(i), loc.point(j)), params);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    if let Some(chol) = Cholesky::<f64, Dyn>::new(k.clone()) {
        return Ok(chol.unpack());
    }
    for d in 0..n {
        k[(d, d)] += JITTER;
    }
    Cholesky::<f64, Dyn>::new(k)
        .map(Cholesky::unpack)
        .ok_or(SbssError::FactorizationFailure)
}

/// `L ε` for a standard normal vector `ε`.
pub fn draw_correlated<R: Rng + ?Sized>(factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let eps = DVector::from_fn(factor.nrows(), |_, _| StandardNormal.sample(rng));
    factor * eps
}

/// Latent field `z` (n×p): signal channels in model order, then noise.
pub fn sample_latent<R: Rng + ?Sized>(
    loc: &LocationSet,
    model: &LatentModel,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = loc.len();
    let mut z = DMatrix::zeros(n, model.p());
    let mut factors: Vec<(MaternParams, DMatrix<f64>)> = Vec::new();
    for (c, params) in model.signals.iter().enumerate() {
        let pos = match factors.iter().position(|(p, _)| p == params) {
            Some(pos) => pos,
            None => {
                factors.push((*params, matern_factor(loc, *params)?));
                factors.len() - 1
            }
        };
        z.set_column(c, &draw_correlated(&factors[pos].1, rng));
    }
    for c in model.q()..model.p() {
        for i in 0..n {
            z[(i, c)] = StandardNormal.sample(rng);
        }
    }
    Ok(z)
}

/// Applies `x_i = μ + Ω z_i` row-wise.
pub fn mix(z: &DMatrix<f64>, model: &LatentModel) -> DMatrix<f64> {
    let mut x = z * model.mixing.transpose();
    for mut row in x.row_iter_mut() {
        row += model.mean.transpose();
    }
    x
}

/// Simulates the observed field of `model` at `loc`.
pub fn sample_field<R: Rng + ?Sized>(
    loc: &LocationSet,
    model: &LatentModel,
    rng: &mut R,
) -> Result<SpatialSample> {
    let z = sample_latent(loc, model, rng)?;
    SpatialSample::new(loc.clone(), mix(&z, model))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariogramBin {
    pub h_lo: f64,
    pub h_hi: f64,
    pub h_mid: f64,
    pub gamma: f64,
    pub pair_count: usize,
}

/// `γ(h) = mean (z_i − z_j)²/2` over unordered pairs with distance in `(h_lo, h_hi]`.
pub fn empirical_variogram(
    values: &[f64],
    loc: &LocationSet,
    bins: &[(f64, f64)],
) -> Result<Vec<VariogramBin>> {
    if values.len() != loc.len() {
        return Err(SbssError::DimensionMismatch(format!(
            "{} values for {} locations",
            values.len(),
            loc.len()
        )));
    }
    let mut sorted: Vec<(f64, f64)> = bins.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (i, &(lo, hi)) in sorted.iter().enumerate() {
        if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
            return Err(SbssError::InvalidArgument(format!("invalid variogram bin ({lo}, {hi}]")));
        }
        if i > 0 && lo < sorted[i - 1].1 {
            return Err(SbssError::InvalidArgument("variogram bins overlap".into()));
        }
    }
    let mut sums = vec![0.0; bins.len()];
    let mut counts = vec![0usize; bins.len()];
    if let Some(max_hi) = bins.iter().map(|b| b.1).reduce(f64::max) {
        let reach = Kernel::ring(0.0, max_hi)?;
        for pair in neighbor_pairs(loc, &reach)? {
            if pair.j <= pair.i {
                continue;
            }
            let h = distance(loc.point(pair.i), loc.point(pair.j));
            if let Some(b) = bins.iter().position(|&(lo, hi)| h > lo && h <= hi) {
                let d = values[pair.i] - values[pair.j];
                sums[b] += 0.5 * d * d;
                counts[b] += 1;
            }
        }
    }
    Ok(bins
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(&(h_lo, h_hi), (&s, &c))| VariogramBin {
            h_lo,
            h_hi,
            h_mid: 0.5 * (h_lo + h_hi),
            gamma: if c > 0 { s / c as f64 } else { 0.0 },
            pair_count: c,
        })
        .collect())
}

/// `count` equal-width bins covering `(0, max_distance]`.
pub fn equal_bins(max_distance: f64, count: usize) -> Vec<(f64, f64)> {
    let width = max_distance / count as f64;
    (0..count)
        .map(|i| (i as f64 * width, (i + 1) as f64 * width))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// K_ν(x) = ∫_0^∞ exp(−x cosh t) cosh(νt) dt by the trapezoid rule, which
    /// converges geometrically for this analytic, rapidly decaying integrand.
    fn bessel_k_quadrature(nu: f64, x: f64) -> f64 {
        let step = 1.0 / 64.0;
        let f = |t: f64| (-x * t.cosh()).exp() * (nu * t).cosh();
        let mut sum = 0.5 * f(0.0);
        let mut k = 1;
        loop {
            let v = f(k as f64 * step);
            sum += v;
            if v < 1e-300 || v < sum * 1e-18 {
                break;
            }
            k += 1;
        }
        sum * step
    }

    fn matern_oracle(h: f64, nu: f64, phi: f64) -> f64 {
        let x = h / phi;
        2f64.powf(1.0 - nu) / crate::special::gamma(nu) * x.powf(nu) * bessel_k_quadrature(nu, x)
    }

    #[test]
    fn matern_examples() {
        let p = MaternParams::new(1.5, 1.0).unwrap();
        assert_eq!(matern(0.0, p), 1.0);
        for &h in &[0.5, 1.0, 2.0] {
            let half = MaternParams::new(0.5, 1.3).unwrap();
            assert!((matern(h, half) - (-h / 1.3f64).exp()).abs() < 1e-13);
        }
        // ν = 3/2 closed form (1 + h/φ) e^{-h/φ}
        assert!((matern(1.0, p) - 2.0 * (-1.0f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn matern_matches_bessel_quadrature() {
        for &(nu, phi) in &[(0.6, 0.6), (1.0, 1.0), (1.5, 1.0), (2.0, 1.5), (3.0, 2.0), (0.25, 2.0)] {
            for &h in &[1e-3, 0.1, 0.5, 1.0, 2.0, 3.7, 8.0, 20.0] {
                let got = matern(h, MaternParams { nu, phi });
                let want = matern_oracle(h, nu, phi);
                assert!(
                    (got - want).abs() <= 1e-10 * want.max(1e-300) + 1e-15,
                    "nu={nu} phi={phi} h={h}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn bessel_k_matches_quadrature_over_contract_range() {
        for &nu in &[0.5, 0.6, 1.0, 2.0, 3.0] {
            for &x in &[1e-6, 1e-3, 0.3, 1.9, 2.1, 7.0, 25.0, 50.0] {
                let got = crate::special::bessel_k(nu, x);
                let want = bessel_k_quadrature(nu, x);
                assert!((got - want).abs() <= 1e-10 * want, "nu={nu} x={x}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn matern_is_non_increasing() {
        for &nu in &[0.5, 1.0, 2.0, 3.0] {
            let p = MaternParams { nu, phi: 1.5 };
            let mut prev = 1.0;
            for i in 1..400 {
                let v = matern(i as f64 * 0.05, p);
                assert!(v <= prev && v > 0.0 || v == 0.0);
                prev = v;
            }
        }
    }

    #[test]
    fn coordinate_patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = gen_coords(CoordinatePattern::Grid, 30, &mut rng).unwrap();
        assert_eq!(grid.len(), 961);
        let uni = gen_coords(CoordinatePattern::Uniform, 30, &mut rng).unwrap();
        assert_eq!(uni.len(), 900);
        assert!(uni.coords().iter().all(|&c| (0.0..=30.0).contains(&c)));
        let skew = gen_coords(CoordinatePattern::BetaSkewed, 30, &mut rng).unwrap();
        let mean_x = skew.points().map(|p| p[0]).sum::<f64>() / 900.0;
        assert!((mean_x - 30.0 * 2.0 / 7.0).abs() < 0.5, "{mean_x}");
        assert!(gen_coords(CoordinatePattern::Uniform, 1, &mut rng).is_err());
    }

    #[test]
    fn noise_only_sample_is_white() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let loc = gen_coords(CoordinatePattern::Uniform, 40, &mut rng).unwrap();
        let model = LatentModel::new(vec![], 3).unwrap();
        let s = sample_field(&loc, &model, &mut rng).unwrap();
        let cov = crate::scatter::covariance(&s, true).matrix;
        let tol = 5.0 / (s.n() as f64).sqrt();
        assert!((cov - DMatrix::<f64>::identity(3, 3)).amax() < tol);
    }

    #[test]
    fn mixing_shapes_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let loc = gen_coords(CoordinatePattern::Uniform, 40, &mut rng).unwrap();
        let omega = nalgebra::dmatrix![1.0, 0.5; -0.3, 2.0];
        let model = LatentModel::new(vec![], 2).unwrap().with_mixing(omega.clone()).unwrap();
        let s = sample_field(&loc, &model, &mut rng).unwrap();
        let cov = crate::scatter::covariance(&s, true).matrix;
        let tol = 5.0 / (s.n() as f64).sqrt() * 4.0;
        assert!((cov - &omega * omega.transpose()).amax() < tol);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let loc = gen_coords(CoordinatePattern::Uniform, 8, &mut rng).unwrap();
            sample_field(&loc, &LatentModel::setting1(2), &mut rng).unwrap().values
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn too_large_is_rejected() {
        let coords: Vec<f64> = (0..2 * (MAX_DENSE_LOCATIONS + 1)).map(|i| i as f64).collect();
        let loc = LocationSet::new(coords, 2).unwrap();
        let err = matern_factor(&loc, MaternParams { nu: 1.0, phi: 1.0 }).unwrap_err();
        assert!(matches!(err, SbssError::TooLarge { .. }));
    }

    #[test]
    fn variogram_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let loc = gen_coords(CoordinatePattern::Uniform, 20, &mut rng).unwrap();
        let bins = equal_bins(5.0, 5);
        let flat = empirical_variogram(&vec![2.5; loc.len()], &loc, &bins).unwrap();
        assert!(flat.iter().all(|b| b.gamma == 0.0 && b.pair_count > 0));

        let noise: Vec<f64> = (0..loc.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in empirical_variogram(&noise, &loc, &bins).unwrap() {
            // pairs share points, so allow a generous multiple of the iid error
            assert!((b.gamma - 1.0).abs() < 3.0 * 3.0 / (b.pair_count as f64).sqrt() + 0.1, "{b:?}");
        }
        assert!(empirical_variogram(&noise, &loc, &[(0.0, 2.0), (1.0, 3.0)]).is_err());
        let empty = empirical_variogram(&noise, &loc, &[(100.0, 200.0)]).unwrap();
        assert_eq!(empty[0].pair_count, 0);
    }

    #[test]
    fn matern_variogram_and_correlogram() {
        let params = MaternParams { nu: 3.0, phi: 2.0 };
        let model = LatentModel::new(vec![params], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let loc = gen_coords(CoordinatePattern::Grid, 14, &mut rng).unwrap();
        let factor = matern_factor(&loc, params).unwrap();
        let bins = [(0.9, 1.0), (1.9, 2.0), (2.9, 3.0)];
        let reps = 200;
        let mut gamma = [0.0; 3];
        for _ in 0..reps {
            let z = draw_correlated(&factor, &mut rng);
            let v = empirical_variogram(z.as_slice(), &loc, &bins).unwrap();
            for (g, b) in gamma.iter_mut().zip(&v) {
                *g += b.gamma / reps as f64;
            }
        }
        for (g, &(_, hi)) in gamma.iter().zip(&bins) {
            let want = 1.0 - matern(hi, params);
            assert!((g - want).abs() < 0.05, "h={hi}: {g} vs {want}");
        }
        assert_eq!(model.q(), 1);
    }
}
