//! Bootstrap tests of `H0r`.
//!
//! The fitted latent field keeps its first `r` (signal) columns while the
//! trailing noise columns are redrawn, either from `N(0, 1)` (parametric) or
//! from the pooled observed noise values (permutation). Optionally the whole
//! latent field is then block-resampled in space. Each resampled field is
//! mixed back with `Γ̂⁻¹`, refitted, and its statistic compared with the
//! observed one.
//!
//! Replicate `k` draws from its own ChaCha stream keyed by the root seed, so
//! results do not depend on the number of worker threads.

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diag::{fit_plan, fit_with, SbssSolution};
use crate::dimtest::{statistic, BootstrapInfo, NullModel, TestOptions, TestResult};
use crate::error::{Result, SbssError};
use crate::geometry::{GridIndex, LocationSet, SpatialSample};
use crate::kernels::KernelSet;
use crate::scatter::ScatterPlan;

/// Irregular block resamples with fewer points are redrawn.
pub const MIN_RESAMPLE_POINTS: usize = 10;
pub const MAX_RESAMPLE_ATTEMPTS: usize = 100;
/// Default irregular block edge, in coordinate units.
pub const DEFAULT_IRREGULAR_BLOCK: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Parametric,
    Permute,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SpatialMode {
    None,
    /// Block edge `m` in coordinate units.
    Irregular { block: f64 },
    /// Block edge `m` in lattice steps.
    Regular { block: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    #[serde(rename = "B")]
    pub b: usize,
    pub noise: NoiseMode,
    pub spatial: SpatialMode,
    pub seed: u64,
}

impl BootstrapSpec {
    /// Method tag: `param`, `perm`, `sp-param` or `sp-perm`.
    pub fn method(&self) -> &'static str {
        match (self.spatial, self.noise) {
            (SpatialMode::None, NoiseMode::Parametric) => "param",
            (SpatialMode::None, NoiseMode::Permute) => "perm",
            (_, NoiseMode::Parametric) => "sp-param",
            (_, NoiseMode::Permute) => "sp-perm",
        }
    }

    fn validate(&self) -> Result<()> {
        if self.b == 0 {
            return Err(SbssError::InvalidArgument("B must be at least 1".into()));
        }
        match self.spatial {
            SpatialMode::Irregular { block } if !(block > 0.0 && block.is_finite()) => Err(
                SbssError::InvalidArgument(format!("block size must be positive, got {block}")),
            ),
            SpatialMode::Regular { block: 0 } => Err(SbssError::InvalidArgument(
                "regular block size must be at least one lattice step".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// `⌈n^{1/(2d)}⌉` lattice steps.
pub fn default_regular_block(n: usize, dim: usize) -> usize {
    ((n as f64).powf(1.0 / (2.0 * dim as f64)).ceil() as usize).max(1)
}

/// The random stream of replicate `index`.
pub fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Keeps columns `0..r` and redraws columns `r..p`.
pub fn resample_noise<R: Rng + ?Sized>(
    latent: &DMatrix<f64>,
    r: usize,
    mode: NoiseMode,
    rng: &mut R,
) -> DMatrix<f64> {
    let (n, p) = latent.shape();
    let mut out = latent.clone();
    if r >= p {
        return out;
    }
    match mode {
        NoiseMode::Parametric => {
            for c in r..p {
                for i in 0..n {
                    out[(i, c)] = StandardNormal.sample(rng);
                }
            }
        }
        NoiseMode::Permute => {
            let pool: Vec<f64> = latent.columns(r, p - r).iter().copied().collect();
            for c in r..p {
                for i in 0..n {
                    out[(i, c)] = *pool.choose(rng).expect("non-empty pool");
                }
            }
        }
    }
    out
}

/// Tiles and donor blocks of the irregular spatial block bootstrap.
///
/// Tiles are the cells `lo + (i + (0, 1]^d)·m` covering the bounding box
/// `[lo, hi]` (the lowest cell along each axis also takes points on `lo`).
/// Donors are the cubes `a + (0, m]^d` anchored at `a = lo + j·step` for
/// integer `j` with `a + m ≤ hi`.
#[derive(Clone, Debug)]
pub struct BlockPartition {
    lo: Vec<f64>,
    hi: Vec<f64>,
    block: f64,
    step: f64,
    tiles_per_axis: Vec<usize>,
    donors_per_axis: Vec<usize>,
    members: Vec<Vec<usize>>,
}

/// `block_partition_with` with a donor step of one coordinate unit.
pub fn block_partition(loc: &LocationSet, block: f64) -> Result<BlockPartition> {
    block_partition_with(loc, block, 1.0)
}

pub fn block_partition_with(loc: &LocationSet, block: f64, step: f64) -> Result<BlockPartition> {
    if !(block > 0.0 && block.is_finite() && step > 0.0 && step.is_finite()) {
        return Err(SbssError::InvalidArgument(format!(
            "block size and donor step must be positive, got {block} and {step}"
        )));
    }
    let d = loc.dim();
    let (lo, hi) = loc.bounding_box();
    let mut tiles_per_axis = Vec::with_capacity(d);
    let mut donors_per_axis = Vec::with_capacity(d);
    for k in 0..d {
        let extent = hi[k] - lo[k];
        if block > extent * (1.0 + 1e-12) {
            return Err(SbssError::NoDonorBlocks { block });
        }
        tiles_per_axis.push(((extent / block).ceil() as usize).max(1));
        donors_per_axis.push(((extent - block) / step * (1.0 + 1e-12)).floor() as usize + 1);
    }
    let mut partition = BlockPartition {
        lo,
        hi,
        block,
        step,
        tiles_per_axis,
        donors_per_axis,
        members: Vec::new(),
    };
    let mut members = vec![Vec::new(); partition.tile_count()];
    for (i, point) in loc.points().enumerate() {
        let mut flat = 0;
        let mut stride = 1;
        for k in 0..d {
            let cell = partition.axis_cell(k, point[k]);
            flat += cell * stride;
            stride *= partition.tiles_per_axis[k];
        }
        members[flat].push(i);
    }
    partition.members = members;
    Ok(partition)
}

impl BlockPartition {
    fn axis_cell(&self, k: usize, x: f64) -> usize {
        let rel = (x - self.lo[k]) / self.block;
        ((rel.ceil() as usize).saturating_sub(1)).min(self.tiles_per_axis[k] - 1)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn block(&self) -> f64 {
        self.block
    }

    pub fn tile_count(&self) -> usize {
        self.tiles_per_axis.iter().product()
    }

    pub fn donor_count(&self) -> usize {
        self.donors_per_axis.iter().product()
    }

    pub fn tiles_per_axis(&self) -> &[usize] {
        &self.tiles_per_axis
    }

    /// Location indices inside tile `t`.
    pub fn members(&self, t: usize) -> &[usize] {
        &self.members[t]
    }

    fn unflatten(flat: usize, counts: &[usize]) -> Vec<usize> {
        let mut rest = flat;
        counts
            .iter()
            .map(|&c| {
                let i = rest % c;
                rest /= c;
                i
            })
            .collect()
    }

    /// Lower corner of tile `t`.
    pub fn tile_origin(&self, t: usize) -> Vec<f64> {
        Self::unflatten(t, &self.tiles_per_axis)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.lo[k] + i as f64 * self.block)
            .collect()
    }

    /// Anchor of donor block `j`.
    pub fn donor_anchor(&self, j: usize) -> Vec<f64> {
        Self::unflatten(j, &self.donors_per_axis)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.lo[k] + i as f64 * self.step)
            .collect()
    }

    /// Tile `t`'s edge lengths after trimming to the bounding box.
    fn tile_widths(&self, t: usize) -> Vec<f64> {
        self.tile_origin(t)
            .iter()
            .enumerate()
            .map(|(k, &o)| self.block.min(self.hi[k] - o))
            .collect()
    }
}

/// One irregular spatial resample.
#[derive(Clone, Debug)]
pub struct SpatialResample {
    pub locations: LocationSet,
    pub values: DMatrix<f64>,
    /// Row of the input each output row was copied from.
    pub source: Vec<usize>,
}

/// Donor points for tile `t` when drawing from donor `donor`, as
/// (source index, emitted location).
fn fill_tile(
    loc: &LocationSet,
    partition: &BlockPartition,
    t: usize,
    donor: usize,
    out: &mut Vec<(usize, Vec<f64>)>,
) {
    let d = partition.dim();
    let origin = partition.tile_origin(t);
    let cell = BlockPartition::unflatten(t, &partition.tiles_per_axis);
    let widths = partition.tile_widths(t);
    let anchor = partition.donor_anchor(donor);
    // only tiles touching `lo` accept points on their lower face
    for (i, point) in loc.points().enumerate() {
        let mut inside = true;
        for k in 0..d {
            let u = point[k] - anchor[k];
            let lower_ok = u > 0.0 || (u == 0.0 && cell[k] == 0);
            if !(lower_ok && u <= widths[k]) {
                inside = false;
                break;
            }
        }
        if inside {
            let emitted = (0..d).map(|k| origin[k] + (point[k] - anchor[k])).collect();
            out.push((i, emitted));
        }
    }
}

/// Replaces every tile by the trimmed contents of a uniformly drawn donor
/// block, translated onto the tile.
pub fn spatial_resample_irregular<R: Rng + ?Sized>(
    loc: &LocationSet,
    latent: &DMatrix<f64>,
    partition: &BlockPartition,
    rng: &mut R,
) -> Result<SpatialResample> {
    spatial_resample_with_donors(loc, latent, partition, |_| rng.random_range(0..partition.donor_count()))
}

/// Irregular resample with an explicit donor choice per tile.
pub fn spatial_resample_with_donors<F>(
    loc: &LocationSet,
    latent: &DMatrix<f64>,
    partition: &BlockPartition,
    mut donor_for: F,
) -> Result<SpatialResample>
where
    F: FnMut(usize) -> usize,
{
    if latent.nrows() != loc.len() {
        return Err(SbssError::DimensionMismatch(format!(
            "{} latent rows for {} locations",
            latent.nrows(),
            loc.len()
        )));
    }
    let d = loc.dim();
    let mut picked = Vec::new();
    for t in 0..partition.tile_count() {
        let donor = donor_for(t);
        fill_tile(loc, partition, t, donor, &mut picked);
    }
    if picked.is_empty() {
        return Err(SbssError::EmptyResample);
    }
    let source: Vec<usize> = picked.iter().map(|(i, _)| *i).collect();
    let coords: Vec<f64> = picked.iter().flat_map(|(_, c)| c.iter().copied()).collect();
    let locations = LocationSet::new(coords, d)?;
    let values = latent.select_rows(&source);
    Ok(SpatialResample {
        locations,
        values,
        source,
    })
}

/// Tiles and donors of the regular (lattice) block bootstrap, in lattice steps.
#[derive(Clone, Debug)]
pub struct LatticePartition {
    index: GridIndex,
    block: usize,
    tiles_per_axis: Vec<usize>,
    donors_per_axis: Vec<usize>,
}

/// Requires a completely observed rectangular lattice.
pub fn lattice_partition(loc: &LocationSet, block: usize) -> Result<LatticePartition> {
    if block == 0 {
        return Err(SbssError::InvalidArgument(
            "regular block size must be at least one lattice step".into(),
        ));
    }
    let index = GridIndex::new(loc)?;
    if !index.is_complete() {
        return Err(SbssError::NotRegular);
    }
    let mut tiles_per_axis = Vec::new();
    let mut donors_per_axis = Vec::new();
    for &extent in index.extent() {
        let extent = extent as usize;
        if block > extent {
            return Err(SbssError::NoDonorBlocks { block: block as f64 });
        }
        tiles_per_axis.push(extent.div_ceil(block));
        donors_per_axis.push(extent - block + 1);
    }
    Ok(LatticePartition {
        index,
        block,
        tiles_per_axis,
        donors_per_axis,
    })
}

impl LatticePartition {
    pub fn tile_count(&self) -> usize {
        self.tiles_per_axis.iter().product()
    }

    pub fn donor_count(&self) -> usize {
        self.donors_per_axis.iter().product()
    }

    pub fn block(&self) -> usize {
        self.block
    }

    /// Tile number of every location.
    pub fn tile_of(&self, i: usize) -> usize {
        let at = self.index.lattice_point(i);
        let mut flat = 0;
        let mut stride = 1;
        for (k, &x) in at.iter().enumerate() {
            flat += x as usize / self.block * stride;
            stride *= self.tiles_per_axis[k];
        }
        flat
    }

    fn anchor(&self, donor: usize) -> Vec<i64> {
        BlockPartition::unflatten(donor, &self.donors_per_axis)
            .into_iter()
            .map(|j| j as i64)
            .collect()
    }

    fn source_row(&self, i: usize, donor: usize) -> usize {
        let at = self.index.lattice_point(i);
        let anchor = self.anchor(donor);
        let shifted: Vec<i64> = at
            .iter()
            .zip(&anchor)
            .map(|(&x, &a)| a + x % self.block as i64)
            .collect();
        self.index.lookup(&shifted).expect("complete lattice")
    }
}

/// Replaces the values of each tile by those of a uniformly drawn donor
/// block at the same relative lattice offsets; locations are unchanged.
pub fn spatial_resample_regular<R: Rng + ?Sized>(
    latent: &DMatrix<f64>,
    partition: &LatticePartition,
    rng: &mut R,
) -> DMatrix<f64> {
    let donors: Vec<usize> = (0..partition.tile_count())
        .map(|_| rng.random_range(0..partition.donor_count()))
        .collect();
    regular_with_donors(latent, partition, &donors)
}

/// Regular resample with donor `donors[t]` for tile `t`.
pub fn regular_with_donors(
    latent: &DMatrix<f64>,
    partition: &LatticePartition,
    donors: &[usize],
) -> DMatrix<f64> {
    let rows: Vec<usize> = (0..latent.nrows())
        .map(|i| partition.source_row(i, donors[partition.tile_of(i)]))
        .collect();
    latent.select_rows(&rows)
}

/// Lattice donor whose anchor coincides with tile `t`'s corner, if any.
pub fn regular_self_donor(partition: &LatticePartition, t: usize) -> Option<usize> {
    let cell = BlockPartition::unflatten(t, &partition.tiles_per_axis);
    let mut flat = 0;
    let mut stride = 1;
    for (k, &c) in cell.iter().enumerate() {
        let a = c * partition.block;
        if a >= partition.donors_per_axis[k] {
            return None;
        }
        flat += a * stride;
        stride *= partition.donors_per_axis[k];
    }
    Some(flat)
}

enum Resampler {
    Fixed(ScatterPlan),
    Lattice(ScatterPlan, LatticePartition),
    Blocks(BlockPartition),
}

/// Runs the bootstrap test of `H0r` on the global rayon pool.
pub fn bootstrap_test(
    sample: &SpatialSample,
    kernels: &KernelSet,
    r: usize,
    spec: &BootstrapSpec,
    options: TestOptions,
) -> Result<TestResult> {
    spec.validate()?;
    if !options.allow_nonconforming {
        if let Some(k) = kernels.non_conforming() {
            return Err(SbssError::NonConformingKernel {
                kernel: k.to_string(),
            });
        }
    }
    let p = sample.p();
    if r >= p {
        return Err(SbssError::RankOutOfRange { r, p });
    }
    let scatter_options = options.scatter_options();
    let resampler = match spec.spatial {
        SpatialMode::None => Resampler::Fixed(ScatterPlan::new(&sample.locations, kernels.kernels())?),
        SpatialMode::Regular { block } => Resampler::Lattice(
            ScatterPlan::new(&sample.locations, kernels.kernels())?,
            lattice_partition(&sample.locations, block)?,
        ),
        SpatialMode::Irregular { block } => Resampler::Blocks(block_partition(&sample.locations, block)?),
    };
    let sol = match &resampler {
        Resampler::Fixed(plan) | Resampler::Lattice(plan, _) => {
            fit_plan(plan, &sample.values, scatter_options)?
        }
        Resampler::Blocks(_) => fit_with(sample, kernels, scatter_options)?,
    };
    let observed = statistic(&sol, r)?;
    let unmix_inverse_t = sol.mixing()?.transpose();

    let replicate = |index: usize| -> Result<f64> {
        let mut rng = replicate_rng(spec.seed, index);
        let z = resample_noise(&sol.latent, r, spec.noise, &mut rng);
        let refit = match &resampler {
            Resampler::Fixed(plan) => fit_plan(plan, &remix(&z, &unmix_inverse_t, &sol), scatter_options)?,
            Resampler::Lattice(plan, partition) => {
                let z = spatial_resample_regular(&z, partition, &mut rng);
                fit_plan(plan, &remix(&z, &unmix_inverse_t, &sol), scatter_options)?
            }
            Resampler::Blocks(partition) => {
                let resample = irregular_attempts(&sample.locations, &z, partition, &mut rng)?;
                let x = remix(&resample.values, &unmix_inverse_t, &sol);
                let plan = ScatterPlan::new(&resample.locations, kernels.kernels())?;
                fit_plan(&plan, &x, scatter_options)?
            }
        };
        statistic(&refit, r)
    };

    let stats: Vec<Result<f64>> = (0..spec.b).into_par_iter().map(replicate).collect();
    let mut count_geq = 0;
    for (index, s) in stats.into_iter().enumerate() {
        match s {
            Ok(t) => count_geq += usize::from(t >= observed),
            Err(source) => {
                return Err(SbssError::Replicate {
                    index,
                    source: Box::new(source),
                })
            }
        }
    }
    let p_value = (count_geq + 1) as f64 / (spec.b + 1) as f64;
    let m = match spec.spatial {
        SpatialMode::None => None,
        SpatialMode::Irregular { block } => Some(block),
        SpatialMode::Regular { block } => Some(block as f64),
    };
    Ok(TestResult {
        method: spec.method().into(),
        r,
        statistic: observed,
        null_model: NullModel::Bootstrap {
            b: spec.b,
            count_geq,
        },
        p_value,
        bootstrap: Some(BootstrapInfo {
            b: spec.b,
            count_geq,
            mode: spec.method().into(),
            m,
            seed: spec.seed,
        }),
        warnings: Vec::new(),
    })
}

/// `x* = z* (Γ̂⁻¹)ᵀ + x̄` row-wise.
fn remix(z: &DMatrix<f64>, unmix_inverse_t: &DMatrix<f64>, sol: &SbssSolution) -> DMatrix<f64> {
    let mut x = z * unmix_inverse_t;
    for mut row in x.row_iter_mut() {
        row += sol.mean.transpose();
    }
    x
}

fn irregular_attempts<R: Rng + ?Sized>(
    loc: &LocationSet,
    latent: &DMatrix<f64>,
    partition: &BlockPartition,
    rng: &mut R,
) -> Result<SpatialResample> {
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        match spatial_resample_irregular(loc, latent, partition, rng) {
            Ok(res) if res.locations.len() >= MIN_RESAMPLE_POINTS => return Ok(res),
            Ok(_) | Err(SbssError::EmptyResample) | Err(SbssError::DuplicateLocation { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Err(SbssError::EmptyResample)
}
