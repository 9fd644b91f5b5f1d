//! Observation locations, neighbor-pair enumeration and regular-grid handling.

use std::cmp::Ordering;
use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Result, SbssError};
use crate::kernels::Kernel;

/// Below this many locations neighbor pairs come from a plain double loop.
const HASH_THRESHOLD: usize = 256;

/// Grid detection tolerance, in units of the inferred spacing.
const GRID_TOLERANCE: f64 = 1e-9;

/// A set of pairwise distinct points in R^d, 1 ≤ d ≤ 3.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationSet {
    coords: Vec<f64>,
    dim: usize,
}

impl LocationSet {
    /// Builds a location set from row-major coordinates.
    pub fn new(coords: Vec<f64>, dim: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(SbssError::InvalidLocations(format!(
                "spatial dimension {dim} not supported (1 to 3)"
            )));
        }
        if coords.is_empty() || coords.len() % dim != 0 {
            return Err(SbssError::InvalidLocations(format!(
                "{} coordinates do not form rows of length {dim}",
                coords.len()
            )));
        }
        if let Some(pos) = coords.iter().position(|c| !c.is_finite()) {
            return Err(SbssError::InvalidLocations(format!(
                "non-finite coordinate for point {}",
                pos / dim
            )));
        }
        let set = Self { coords, dim };
        set.check_distinct()?;
        Ok(set)
    }

    pub fn from_points<P: AsRef<[f64]>>(points: &[P]) -> Result<Self> {
        let dim = points
            .first()
            .map(|p| p.as_ref().len())
            .ok_or_else(|| SbssError::InvalidLocations("no points".into()))?;
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            let p = p.as_ref();
            if p.len() != dim {
                return Err(SbssError::InvalidLocations(
                    "points have differing dimensions".into(),
                ));
            }
            coords.extend_from_slice(p);
        }
        Self::new(coords, dim)
    }

    fn check_distinct(&self) -> Result<()> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.cmp_points(a, b));
        for w in order.windows(2) {
            if self.cmp_points(w[0], w[1]) == Ordering::Equal {
                let (first, second) = (w[0].min(w[1]), w[0].max(w[1]));
                return Err(SbssError::DuplicateLocation { first, second });
            }
        }
        Ok(())
    }

    fn cmp_points(&self, a: usize, b: usize) -> Ordering {
        self.point(a)
            .iter()
            .zip(self.point(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    /// Per-axis minimum and maximum.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for p in self.points() {
            for k in 0..self.dim {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Smallest distance between two distinct points (infinite for a single point).
    pub fn min_separation(&self) -> f64 {
        let n = self.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.min(distance(self.point(i), self.point(j)));
            }
        }
        best
    }

    /// Subset of the locations, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            coords.extend_from_slice(self.point(i));
        }
        Self::new(coords, self.dim)
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Observed multivariate field: n locations and an n×p value matrix.
#[derive(Clone, Debug)]
pub struct SpatialSample {
    pub locations: LocationSet,
    pub values: DMatrix<f64>,
}

impl SpatialSample {
    pub fn new(locations: LocationSet, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != locations.len() {
            return Err(SbssError::DimensionMismatch(format!(
                "{} locations but {} value rows",
                locations.len(),
                values.nrows()
            )));
        }
        if locations.len() < 2 {
            return Err(SbssError::InvalidLocations(
                "a sample needs at least two locations".into(),
            ));
        }
        if values.ncols() == 0 {
            return Err(SbssError::DimensionMismatch("no value columns".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SbssError::InvalidArgument("non-finite data value".into()));
        }
        Ok(Self { locations, values })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }
}

/// Ordered location pair with its kernel weight f(s_i − s_j).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborPair {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Every ordered pair (i, j), diagonal included, with non-zero kernel weight,
/// sorted by i then j.
///
/// Grid-lag kernels are evaluated on lags expressed in lattice steps, so they
/// require regular locations.
pub fn neighbor_pairs(loc: &LocationSet, kernel: &Kernel) -> Result<Vec<NeighborPair>> {
    let scale = lag_scale(loc, kernel)?;
    let n = loc.len();
    let d = loc.dim();
    let mut lag = [0.0f64; 3];
    let mut weight_of = |a: &[f64], b: &[f64]| {
        for k in 0..d {
            lag[k] = (a[k] - b[k]) / scale;
        }
        kernel.eval(&lag[..d])
    };

    let mut pairs = Vec::new();
    if n < HASH_THRESHOLD {
        for i in 0..n {
            for j in 0..n {
                let w = weight_of(loc.point(i), loc.point(j));
                if w != 0.0 {
                    pairs.push(NeighborPair { i, j, weight: w });
                }
            }
        }
        return Ok(pairs);
    }

    let radius = kernel.support_radius() * scale;
    if radius <= 0.0 {
        // support is the zero lag only
        for i in 0..n {
            let w = weight_of(loc.point(i), loc.point(i));
            if w != 0.0 {
                pairs.push(NeighborPair { i, j: i, weight: w });
            }
        }
        return Ok(pairs);
    }

    let hash = SpatialHash::new(loc, radius * (1.0 + 1e-9));
    let mut row = Vec::new();
    for i in 0..n {
        row.clear();
        hash.for_each_candidate(loc.point(i), |j| {
            let w = weight_of(loc.point(i), loc.point(j));
            if w != 0.0 {
                row.push(NeighborPair { i, j, weight: w });
            }
        });
        row.sort_by_key(|p| p.j);
        pairs.extend_from_slice(&row);
    }
    Ok(pairs)
}

/// Divisor that converts coordinate lags into the units the kernel expects.
pub(crate) fn lag_scale(loc: &LocationSet, kernel: &Kernel) -> Result<f64> {
    if kernel.is_grid() {
        let grid = detect_grid(loc);
        if !grid.is_regular {
            return Err(SbssError::NotRegular);
        }
        Ok(grid.spacing)
    } else {
        Ok(1.0)
    }
}

/// Uniform bucket hash with cell edge equal to the search radius.
struct SpatialHash {
    cell: f64,
    dim: usize,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl SpatialHash {
    fn new(loc: &LocationSet, cell: f64) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in loc.points().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self {
            cell,
            dim: loc.dim(),
            buckets,
        }
    }

    fn key(p: &[f64], cell: f64) -> [i64; 3] {
        let mut key = [0i64; 3];
        for (k, &x) in p.iter().enumerate() {
            key[k] = (x / cell).floor() as i64;
        }
        key
    }

    fn for_each_candidate(&self, p: &[f64], mut f: impl FnMut(usize)) {
        let base = Self::key(p, self.cell);
        let span = |k: usize| if k < self.dim { -1..=1 } else { 0..=0 };
        for dx in span(0) {
            for dy in span(1) {
                for dz in span(2) {
                    let key = [base[0] + dx, base[1] + dy, base[2] + dz];
                    if let Some(members) = self.buckets.get(&key) {
                        members.iter().copied().for_each(&mut f);
                    }
                }
            }
        }
    }
}

/// Result of testing whether locations sit on a uniform lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDescriptor {
    pub is_regular: bool,
    pub origin: Vec<f64>,
    pub spacing: f64,
    /// Row-major n×d lattice coordinates; empty when not regular.
    pub integer_coords: Vec<i64>,
}

impl GridDescriptor {
    fn irregular(dim: usize) -> Self {
        Self {
            is_regular: false,
            origin: vec![0.0; dim],
            spacing: 0.0,
            integer_coords: Vec::new(),
        }
    }
}

/// Detects whether all points lie on `origin + spacing · Z^d`.
///
/// The origin is the per-axis minimum and the spacing the smallest gap
/// between distinct coordinate values on any axis; every offset must then be
/// an integer multiple of the spacing within 1e-9 spacings.
pub fn detect_grid(loc: &LocationSet) -> GridDescriptor {
    let d = loc.dim();
    let (lo, hi) = loc.bounding_box();
    let extent = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| b - a)
        .fold(0.0f64, f64::max);
    if extent <= 0.0 {
        return GridDescriptor::irregular(d);
    }
    let merge_tol = GRID_TOLERANCE * extent;

    let mut spacing = f64::INFINITY;
    for k in 0..d {
        let mut axis: Vec<f64> = loc.points().map(|p| p[k]).collect();
        axis.sort_by(f64::total_cmp);
        for w in axis.windows(2) {
            let gap = w[1] - w[0];
            if gap > merge_tol {
                spacing = spacing.min(gap);
            }
        }
    }
    if !spacing.is_finite() {
        return GridDescriptor::irregular(d);
    }

    let mut integer_coords = Vec::with_capacity(loc.len() * d);
    for p in loc.points() {
        for k in 0..d {
            let steps = (p[k] - lo[k]) / spacing;
            let rounded = steps.round();
            if (steps - rounded).abs() > GRID_TOLERANCE {
                return GridDescriptor::irregular(d);
            }
            integer_coords.push(rounded as i64);
        }
    }
    GridDescriptor {
        is_regular: true,
        origin: lo,
        spacing,
        integer_coords,
    }
}

/// Dense lookup from lattice coordinates to point indices.
#[derive(Clone, Debug)]
pub struct GridIndex {
    dim: usize,
    spacing: f64,
    extent: Vec<i64>,
    strides: Vec<usize>,
    lattice: Vec<i64>,
    slots: Vec<usize>,
}

const EMPTY_SLOT: usize = usize::MAX;

impl GridIndex {
    pub fn new(loc: &LocationSet) -> Result<Self> {
        let grid = detect_grid(loc);
        if !grid.is_regular {
            return Err(SbssError::NotRegular);
        }
        let d = loc.dim();
        let mut extent = vec![0i64; d];
        for c in grid.integer_coords.chunks_exact(d) {
            for k in 0..d {
                extent[k] = extent[k].max(c[k] + 1);
            }
        }
        let mut strides = vec![1usize; d];
        for k in 1..d {
            strides[k] = strides[k - 1] * extent[k - 1] as usize;
        }
        let cells = strides[d - 1] * extent[d - 1] as usize;
        if cells > 64 * loc.len().max(1 << 16) {
            return Err(SbssError::InvalidLocations(format!(
                "lattice bounding box of {cells} cells is too sparse for a dense grid index"
            )));
        }
        let mut slots = vec![EMPTY_SLOT; cells];
        for (i, c) in grid.integer_coords.chunks_exact(d).enumerate() {
            let at: usize = c.iter().zip(&strides).map(|(&x, &s)| x as usize * s).sum();
            slots[at] = i;
        }
        Ok(Self {
            dim: d,
            spacing: grid.spacing,
            extent,
            strides,
            lattice: grid.integer_coords,
            slots,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.lattice.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.lattice.is_empty()
    }

    /// Lattice points per axis of the bounding box.
    pub fn extent(&self) -> &[i64] {
        &self.extent
    }

    pub fn lattice_point(&self, i: usize) -> &[i64] {
        &self.lattice[i * self.dim..(i + 1) * self.dim]
    }

    /// True when every lattice point of the bounding box is observed.
    pub fn is_complete(&self) -> bool {
        self.slots.len() == self.len()
    }

    /// Index of the observation at lattice position `at`, if present.
    pub fn lookup(&self, at: &[i64]) -> Option<usize> {
        let mut flat = 0usize;
        for k in 0..self.dim {
            if at[k] < 0 || at[k] >= self.extent[k] {
                return None;
            }
            flat += at[k] as usize * self.strides[k];
        }
        match self.slots[flat] {
            EMPTY_SLOT => None,
            i => Some(i),
        }
    }

    /// Neighbors of point `center` under the m-way lag-h stencil.
    pub fn neighbors(&self, center: usize, ways: usize, lag: usize) -> Vec<usize> {
        let base = self.lattice_point(center);
        let mut at = vec![0i64; self.dim];
        stencil_offsets(self.dim, ways, lag)
            .iter()
            .filter_map(|off| {
                for k in 0..self.dim {
                    at[k] = base[k] + off[k];
                }
                self.lookup(&at)
            })
            .collect()
    }
}

/// Lattice offsets of the m-way lag-h neighborhood: for each axis subset J of
/// size m (lexicographic) and each sign vector v ∈ {−1, 1}^m, the offset that
/// moves by h·v along the axes in J.
pub fn stencil_offsets(dim: usize, ways: usize, lag: usize) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    if ways == 0 || ways > dim {
        return out;
    }
    let h = lag as i64;
    for axes in combinations(dim, ways) {
        for signs in 0..(1usize << ways) {
            let mut off = vec![0i64; dim];
            for (b, &axis) in axes.iter().enumerate() {
                off[axis] = if signs >> (ways - 1 - b) & 1 == 0 { -h } else { h };
            }
            out.push(off);
        }
    }
    out
}

fn combinations(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, m, &mut Vec::with_capacity(m), &mut out);
    out
}

/// m-way lag-h grid neighbors of the point with index `center`.
pub fn grid_neighbors(
    loc: &LocationSet,
    center: usize,
    ways: usize,
    lag: usize,
) -> Result<Vec<usize>> {
    if ways == 0 || ways > loc.dim() || lag == 0 {
        return Err(SbssError::InvalidArgument(format!(
            "grid stencil needs 1 <= m <= d and h >= 1 (got m = {ways}, h = {lag})"
        )));
    }
    if center >= loc.len() {
        return Err(SbssError::InvalidArgument(format!(
            "center index {center} out of range"
        )));
    }
    Ok(GridIndex::new(loc)?.neighbors(center, ways, lag))
}
