//! Handcrafted per-octant descriptors and a pooled global descriptor.
//!
//! Every octant at every pyramid level gets a unit vector built from the
//! points within `radius_multiplier × edge` of its centroid (plus its own
//! members). The raw blocks are
//!
//! | block     | len | content                                                  |
//! |-----------|-----|----------------------------------------------------------|
//! | shape     | 3   | linearity, planarity, sphericity from covariance         |
//! | normal    | 3   | smallest-eigenvalue eigenvector, canonicalised `n_z ≥ 0` |
//! | height    | 3   | `(mean − min)`, std and range of z, divided by the edge  |
//! | density   | 1   | `ln(1 + n / edge³)`                                      |
//! | histogram | 8   | soft-binned azimuth occupancy about the centroid         |
//!
//! Blocks are scaled by [`BlockWeights`], zero-padded to the level
//! dimension and L2-normalised.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::octree::OctreePyramid;
use crate::pointcloud::PointCloud;

/// Length of the raw feature vector before padding.
pub const RAW_LEN: usize = 18;
pub const HIST_BINS: usize = 8;
pub const MIN_DIM: usize = 8;

/// Offsets of each block inside the raw vector.
pub mod block {
    use std::ops::Range;
    pub const SHAPE: Range<usize> = 0..3;
    pub const NORMAL: Range<usize> = 3..6;
    pub const HEIGHT: Range<usize> = 6..9;
    pub const DENSITY: Range<usize> = 9..10;
    pub const HISTOGRAM: Range<usize> = 10..18;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockWeights {
    pub shape: f64,
    pub normal_z: f64,
    /// Horizontal normal components; these rotate with the cloud.
    pub normal_xy: f64,
    pub height: f64,
    pub density: f64,
    /// The azimuth histogram also rotates with the cloud.
    pub histogram: f64,
    /// Ring/height occupancy of the wider neighbourhood.
    pub context: f64,
}

impl Default for BlockWeights {
    fn default() -> Self {
        Self {
            shape: 1.0,
            normal_z: 1.0,
            normal_xy: 0.25,
            height: 1.0,
            density: 0.25,
            histogram: 0.25,
            context: 10.0,
        }
    }
}

impl BlockWeights {
    pub const UNIFORM: BlockWeights = BlockWeights {
        shape: 1.0,
        normal_z: 1.0,
        normal_xy: 1.0,
        height: 1.0,
        density: 1.0,
        histogram: 1.0,
        context: 1.0,
    };

    fn per_entry(&self) -> [f64; RAW_LEN] {
        let mut w = [0.0; RAW_LEN];
        w[block::SHAPE].fill(self.shape);
        w[3] = self.normal_xy;
        w[4] = self.normal_xy;
        w[5] = self.normal_z;
        w[block::HEIGHT].fill(self.height);
        w[block::DENSITY].fill(self.density);
        w[block::HISTOGRAM].fill(self.histogram);
        w
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.shape,
            self.normal_z,
            self.normal_xy,
            self.height,
            self.density,
            self.histogram,
            self.context,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("block weights must be finite and ≥ 0: {self:?}")));
        }
        if self.density <= 0.0 && all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("all block weights are zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorConfig {
    /// Descriptor length per level, finest first.
    pub dims: Vec<usize>,
    /// Neighbourhood radius per level, in units of that level's octant edge.
    pub radius_multipliers: Vec<f64>,
    /// Context radius per level in octant edges; `0` drops the context block.
    pub context_multipliers: Vec<f64>,
    /// Horizontal rings of the context block.
    pub context_rings: usize,
    /// Height slabs of the context block, each one octant edge thick.
    pub context_heights: usize,
    /// Generalised-mean exponent for global pooling.
    pub exponent: f64,
    pub weights: BlockWeights,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            dims: vec![48, 48, 48],
            radius_multipliers: vec![1.5, 1.5, 1.5],
            context_multipliers: vec![12.0, 8.0, 6.0],
            context_rings: 8,
            context_heights: 3,
            exponent: 3.0,
            weights: BlockWeights::default(),
        }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty()
            || self.dims.len() != self.radius_multipliers.len()
            || self.dims.len() != self.context_multipliers.len()
        {
            return Err(Error::Config(format!(
                "descriptors: {} dims, {} radius multipliers, {} context multipliers",
                self.dims.len(),
                self.radius_multipliers.len(),
                self.context_multipliers.len()
            )));
        }
        if self.context_multipliers.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("context multipliers must be finite and ≥ 0".into()));
        }
        if self.context_rings == 0 || self.context_heights == 0 {
            return Err(Error::Config("context_rings and context_heights must be ≥ 1".into()));
        }
        if let Some(d) = self.dims.iter().find(|&&d| d < MIN_DIM) {
            return Err(Error::Config(format!("descriptor dim {d} < {MIN_DIM}")));
        }
        if self.radius_multipliers.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("radius multipliers must be positive".into()));
        }
        if !(self.exponent.is_finite() && self.exponent >= 1.0) {
            return Err(Error::Config(format!("pooling exponent {} < 1", self.exponent)));
        }
        self.weights.validate()
    }
}

/// Unweighted feature blocks of one point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawBlocks {
    pub shape: [f64; 3],
    pub normal: [f64; 3],
    pub height: [f64; 3],
    pub density: f64,
    pub histogram: [f64; HIST_BINS],
}

impl RawBlocks {
    pub fn to_array(&self) -> [f64; RAW_LEN] {
        let mut raw = [0.0; RAW_LEN];
        raw[block::SHAPE].copy_from_slice(&self.shape);
        raw[block::NORMAL].copy_from_slice(&self.normal);
        raw[block::HEIGHT].copy_from_slice(&self.height);
        raw[block::DENSITY.start] = self.density;
        raw[block::HISTOGRAM].copy_from_slice(&self.histogram);
        raw
    }
}

/// Computes the raw blocks. Fewer than three points, or a set with no
/// spread, leaves the covariance blocks (shape, normal) at zero.
pub fn raw_blocks(points: &[Point3<f64>], edge: f64) -> Result<RawBlocks> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(edge.is_finite() && edge > 0.0) {
        return Err(Error::Data(format!("octant edge must be positive, got {edge}")));
    }
    let n = points.len() as f64;
    let centroid = points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;

    let mut shape = [0.0; 3];
    let mut normal = [0.0; 3];
    if points.len() >= 3 {
        let mut cov = Matrix3::zeros();
        for p in points {
            let d = p.coords - centroid;
            cov += d * d.transpose();
        }
        cov /= n;
        let eig = SymmetricEigen::new(cov);
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let l = idx.map(|i| eig.eigenvalues[i].max(0.0));
        if l[0] > 1e-12 * edge * edge {
            shape = [(l[0] - l[1]) / l[0], (l[1] - l[2]) / l[0], l[2] / l[0]];
            let v = eig.eigenvectors.column(idx[2]).normalize();
            let flip = v.z < 0.0 || (v.z == 0.0 && (v.y < 0.0 || (v.y == 0.0 && v.x < 0.0)));
            let v = if flip { -v } else { v };
            normal = [v.x, v.y, v.z];
        }
    }

    let (mut zmin, mut zmax, mut zsum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for p in points {
        zmin = zmin.min(p.z);
        zmax = zmax.max(p.z);
        zsum += p.z;
    }
    let zmean = zsum / n;
    let zvar = points.iter().map(|p| (p.z - zmean).powi(2)).sum::<f64>() / n;
    let height = [(zmean - zmin) / edge, zvar.sqrt() / edge, (zmax - zmin) / edge];

    let density = (1.0 + n / edge.powi(3)).ln();

    let mut histogram = [0.0; HIST_BINS];
    let bin_width = std::f64::consts::TAU / HIST_BINS as f64;
    for p in points {
        let dx = p.x - centroid.x;
        let dy = p.y - centroid.y;
        if dx.hypot(dy) <= 1e-12 * edge {
            continue;
        }
        let theta = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
        // Bin centres sit at (k + 0.5) · bin_width.
        let t = theta / bin_width - 0.5;
        let lo = t.floor();
        let frac = t - lo;
        let b0 = (lo as i64).rem_euclid(HIST_BINS as i64) as usize;
        histogram[b0] += (1.0 - frac) / n;
        histogram[(b0 + 1) % HIST_BINS] += frac / n;
    }

    Ok(RawBlocks {
        shape,
        normal,
        height,
        density,
        histogram,
    })
}

/// Weighted, padded and normalised descriptor of length `dim`. When `dim` is
/// below [`RAW_LEN`] the surplus entries fold onto `i mod dim`.
pub fn local_descriptor_with(
    points: &[Point3<f64>],
    edge: f64,
    dim: usize,
    weights: &BlockWeights,
) -> Result<Vec<f64>> {
    Ok(assemble(&raw_blocks(points, edge)?, None, dim, weights))
}

/// Weights, folds and normalises the raw blocks; the context block, when
/// present, follows them.
fn assemble(raw: &RawBlocks, context: Option<&[f64]>, dim: usize, weights: &BlockWeights) -> Vec<f64> {
    let raw = raw.to_array();
    let w = weights.per_entry();
    let mut out = vec![0.0; dim];
    for i in 0..RAW_LEN {
        out[i % dim] += raw[i] * w[i];
    }
    if let Some(ctx) = context {
        for (i, c) in ctx.iter().enumerate() {
            out[(RAW_LEN + i) % dim] += c * weights.context;
        }
    }
    normalize_in_place(&mut out);
    out
}

/// Fraction of the points within distance `radius` of `centre` that falls
/// in each (ring, height slab) cell, ring major. Rings split the horizontal
/// distance `[0, radius]` evenly; slabs are one `edge` thick and centred on
/// the centre's height, the outer two open-ended. Both axes use linear
/// soft binning. Depends only on horizontal distance and relative height,
/// hence is invariant under rotation about z and under translation.
pub fn context_block<'a>(
    points: impl IntoIterator<Item = &'a Point3<f64>>,
    centre: &Point3<f64>,
    radius: f64,
    edge: f64,
    rings: usize,
    heights: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; rings * heights];
    if rings == 0 || heights == 0 || !(radius > 0.0 && edge > 0.0) {
        return out;
    }
    let r2max = radius * radius;
    let ring_scale = rings as f64 / radius;
    let ring_top = (rings - 1) as f64;
    let height_top = (heights - 1) as f64;
    let height_offset = heights as f64 / 2.0 - 0.5;
    let mut total = 0.0;
    for p in points {
        let (dx, dy, dz) = (p.x - centre.x, p.y - centre.y, p.z - centre.z);
        let h2 = dx * dx + dy * dy;
        if h2 + dz * dz > r2max {
            continue;
        }
        // Bin centres: rings at (k + 0.5)·radius/rings, slabs at (k + 0.5 - heights/2)·edge.
        let tr = (h2.sqrt() * ring_scale - 0.5).clamp(0.0, ring_top);
        let th = (dz / edge + height_offset).clamp(0.0, height_top);
        let (r0, h0) = (tr.floor() as usize, th.floor() as usize);
        let (fr, fh) = (tr - r0 as f64, th - h0 as f64);
        let (r1, h1) = ((r0 + 1).min(rings - 1), (h0 + 1).min(heights - 1));
        out[r0 * heights + h0] += (1.0 - fr) * (1.0 - fh);
        out[r0 * heights + h1] += (1.0 - fr) * fh;
        out[r1 * heights + h0] += fr * (1.0 - fh);
        out[r1 * heights + h1] += fr * fh;
        total += 1.0;
    }
    if total > 0.0 {
        out.iter_mut().for_each(|x| *x /= total);
    }
    out
}

/// [`local_descriptor_with`] at 32 dimensions with uniform block weights.
pub fn local_descriptor(points: &[Point3<f64>], edge: f64) -> Result<Vec<f64>> {
    local_descriptor_with(points, edge, 32, &BlockWeights::UNIFORM)
}

/// Scales `v` to unit length. A zero vector becomes the uniform unit vector.
pub fn normalize_in_place(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else if !v.is_empty() {
        let u = 1.0 / (v.len() as f64).sqrt();
        v.iter_mut().for_each(|x| *x = u);
    }
}

/// Centroids and unit descriptors of one pyramid level. Descriptors are
/// stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    centroids: Vec<Point3<f64>>,
    descriptors: Vec<f64>,
    dim: usize,
}

impl FeatureLevel {
    pub fn new(centroids: Vec<Point3<f64>>, descriptors: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || descriptors.len() != centroids.len() * dim {
            return Err(Error::DimMismatch {
                expected: centroids.len() * dim,
                got: descriptors.len(),
            });
        }
        if !descriptors.iter().all(|v| v.is_finite()) || !centroids.iter().all(|c| c.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self {
            centroids,
            descriptors,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[Point3<f64>] {
        &self.centroids
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn descriptors(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.descriptors.chunks_exact(self.dim)
    }

    pub fn raw_descriptors(&self) -> &[f64] {
        &self.descriptors
    }

    /// Same features with every centroid mapped through `f`.
    pub fn map_centroids(&self, f: impl Fn(&Point3<f64>) -> Point3<f64>) -> Self {
        Self {
            centroids: self.centroids.iter().map(f).collect(),
            descriptors: self.descriptors.clone(),
            dim: self.dim,
        }
    }

    /// Keeps the features at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut descriptors = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            descriptors.extend_from_slice(self.descriptor(i));
        }
        Self {
            centroids: indices.iter().map(|&i| self.centroids[i]).collect(),
            descriptors,
            dim: self.dim,
        }
    }
}

/// Local features for every pyramid level (finest first) and the global
/// descriptor pooled from them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureLevel>,
    global: Vec<f64>,
}

impl FeaturePyramid {
    /// Assembles a pyramid and pools its global descriptor.
    pub fn from_levels(levels: Vec<FeatureLevel>, exponent: f64) -> Result<Self> {
        let global = aggregate_global(&levels, exponent)?;
        Ok(Self { levels, global })
    }

    /// Assembles a pyramid with a precomputed global descriptor.
    pub fn from_parts(levels: Vec<FeatureLevel>, global: Vec<f64>) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(FeatureLevel::is_empty) {
            return Err(Error::EmptyPyramid);
        }
        let expected: usize = levels.iter().map(FeatureLevel::dim).sum();
        if global.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                got: global.len(),
            });
        }
        Ok(Self { levels, global })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[FeatureLevel] {
        &self.levels
    }

    pub fn level(&self, s: usize) -> &FeatureLevel {
        &self.levels[s]
    }

    pub fn global(&self) -> &[f64] {
        &self.global
    }

    pub fn dims(&self) -> Vec<usize> {
        self.levels.iter().map(FeatureLevel::dim).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.levels.iter().map(FeatureLevel::len).collect()
    }

    pub fn into_levels(self) -> Vec<FeatureLevel> {
        self.levels
    }
}

/// Bucket grid over point indices for radius queries.
struct HashGrid<'a> {
    points: &'a [Point3<f64>],
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<u32>>,
}

impl<'a> HashGrid<'a> {
    fn new(points: &'a [Point3<f64>], cell: f64) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        Self { points, cell, buckets }
    }

    fn key(p: &Point3<f64>, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// Points in the 27 cells around `c`; a superset of those within `cell`.
    fn candidates<'g>(&'g self, c: &Point3<f64>) -> impl Iterator<Item = &'a Point3<f64>> + 'g {
        let k = Self::key(c, self.cell);
        (0..27).flat_map(move |n| {
            let key = [k[0] + n / 9 - 1, k[1] + (n / 3) % 3 - 1, k[2] + n % 3 - 1];
            self.buckets
                .get(&key)
                .into_iter()
                .flat_map(|b| b.iter().map(|&i| &self.points[i as usize]))
        })
    }

    /// Indices within `radius ≤ cell` of `c`, appended to `out` unsorted.
    fn within(&self, c: &Point3<f64>, radius: f64, out: &mut Vec<u32>) {
        let k = Self::key(c, self.cell);
        let r2 = radius * radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(b) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(
                            b.iter()
                                .copied()
                                .filter(|&i| (self.points[i as usize] - c).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
    }
}

/// One descriptor per occupied octant per level, then global pooling.
pub fn extract_pyramid(cloud: &PointCloud, pyr: &OctreePyramid, cfg: &DescriptorConfig) -> Result<FeaturePyramid> {
    cfg.validate()?;
    if cloud.len() != pyr.num_points() {
        return Err(Error::MismatchedPyramid(format!(
            "cloud has {} points, pyramid was built from {}",
            cloud.len(),
            pyr.num_points()
        )));
    }
    if cfg.dims.len() != pyr.num_levels() {
        return Err(Error::Config(format!(
            "descriptor config has {} levels, pyramid has {}",
            cfg.dims.len(),
            pyr.num_levels()
        )));
    }
    let points = cloud.points();
    let mut levels = Vec::with_capacity(pyr.num_levels());
    let mut scratch: Vec<u32> = Vec::new();
    let mut neighbourhood: Vec<Point3<f64>> = Vec::new();
    for s in 0..pyr.num_levels() {
        let edge = pyr.octant_edge(s);
        let radius = cfg.radius_multipliers[s] * edge;
        let grid = HashGrid::new(points, radius);
        let ctx_radius = cfg.context_multipliers[s] * edge;
        let ctx_grid = (ctx_radius > 0.0).then(|| HashGrid::new(points, ctx_radius));
        let lvl = pyr.level(s);
        let dim = cfg.dims[s];
        let mut descriptors = Vec::with_capacity(lvl.len() * dim);
        for (i, c) in lvl.centroids().iter().enumerate() {
            scratch.clear();
            grid.within(c, radius, &mut scratch);
            let r2 = radius * radius;
            scratch.extend(
                pyr.members(s, i)
                    .iter()
                    .copied()
                    .filter(|&m| (points[m as usize] - c).norm_squared() > r2),
            );
            scratch.sort_unstable();
            neighbourhood.clear();
            neighbourhood.extend(scratch.iter().map(|&m| points[m as usize]));
            let raw = raw_blocks(&neighbourhood, edge)?;
            let context = ctx_grid.as_ref().map(|g| {
                context_block(g.candidates(c), c, ctx_radius, edge, cfg.context_rings, cfg.context_heights)
            });
            descriptors.extend(assemble(&raw, context.as_deref(), dim, &cfg.weights));
        }
        levels.push(FeatureLevel::new(lvl.centroids().to_vec(), descriptors, dim)?);
    }
    FeaturePyramid::from_levels(levels, cfg.exponent)
}

/// Signed generalised mean per level, concatenated and L2-normalised.
pub fn aggregate_global(levels: &[FeatureLevel], exponent: f64) -> Result<Vec<f64>> {
    if levels.is_empty() || levels.iter().any(FeatureLevel::is_empty) {
        return Err(Error::EmptyPyramid);
    }
    if !(exponent.is_finite() && exponent >= 1.0) {
        return Err(Error::Config(format!("pooling exponent {exponent} < 1")));
    }
    let mut global = Vec::with_capacity(levels.iter().map(FeatureLevel::dim).sum());
    for lvl in levels {
        let mut acc = vec![0.0; lvl.dim()];
        for d in lvl.descriptors() {
            for (a, &x) in acc.iter_mut().zip(d) {
                *a += x.signum() * x.abs().powf(exponent);
            }
        }
        let n = lvl.len() as f64;
        global.extend(acc.iter().map(|&a| {
            let m = a / n;
            if m == 0.0 {
                0.0
            } else {
                m.signum() * m.abs().powf(1.0 / exponent)
            }
        }));
    }
    normalize_in_place(&mut global);
    Ok(global)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const MAGIC: &[u8; 4] = b"HLFP";
pub const CONTAINER_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes pyramids to the little-endian container: magic, version, record
/// count, then per record `S`, dims, global dim, counts, per-level
/// centroids and descriptors (f64), and the global descriptor.
pub fn write_container(w: &mut impl Write, pyramids: &[FeaturePyramid]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, CONTAINER_VERSION)?;
    put_u64(w, pyramids.len() as u64)?;
    for p in pyramids {
        put_u32(w, p.num_levels() as u32)?;
        for d in p.dims() {
            put_u32(w, d as u32)?;
        }
        put_u32(w, p.global.len() as u32)?;
        for c in p.counts() {
            put_u64(w, c as u64)?;
        }
        for lvl in &p.levels {
            for c in &lvl.centroids {
                put_f64s(w, c.coords.as_slice())?;
            }
            put_f64s(w, &lvl.descriptors)?;
        }
        put_f64s(w, &p.global)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::parse(
                format!("byte {}", self.pos),
                format!("truncated container: need {n} more bytes"),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::parse("container", "length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_container(r: &mut impl Read) -> Result<Vec<FeaturePyramid>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::parse("container", e.to_string()))?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<Vec<FeaturePyramid>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::parse("byte 0", "bad magic, not a descriptor container"));
    }
    let version = cur.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::parse("byte 4", format!("unsupported container version {version}")));
    }
    let count = cur.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let s = cur.u32()? as usize;
        let dims = (0..s).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let gdim = cur.u32()? as usize;
        let counts = (0..s).map(|_| cur.u64().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        let mut levels = Vec::with_capacity(s);
        for (&dim, &n) in dims.iter().zip(&counts) {
            let flat = cur.f64s(n * 3)?;
            let centroids = flat.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
            let descriptors = cur.f64s(n * dim)?;
            levels.push(FeatureLevel::new(centroids, descriptors, dim)?);
        }
        let global = cur.f64s(gdim)?;
        out.push(FeaturePyramid::from_parts(levels, global)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::parse(format!("byte {}", cur.pos), "trailing bytes after last record"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octree::build_pyramid;
    use crate::pointcloud::{apply_transform, RigidTransform};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(0.0..extent),
                    rng.random_range(0.0..extent),
                    rng.random_range(0.0..extent * 0.3),
                )
            })
            .collect()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn single_point_is_degenerate_but_unit() {
        let b = raw_blocks(&[Point3::new(1.0, 2.0, 3.0)], 2.0).unwrap();
        assert_eq!(b.shape, [0.0; 3]);
        assert_eq!(b.normal, [0.0; 3]);
        assert_eq!(b.height, [0.0; 3]);
        assert_eq!(b.histogram, [0.0; HIST_BINS]);
        assert!((b.density - (1.0f64 + 1.0 / 8.0).ln()).abs() < 1e-15);
        let d = local_descriptor(&[Point3::new(1.0, 2.0, 3.0)], 2.0).unwrap();
        assert!((norm(&d) - 1.0).abs() < 1e-12);
        assert!(matches!(local_descriptor(&[], 1.0), Err(Error::EmptyInput)));
    }

    #[test]
    fn plane_is_planar() {
        // A symmetric 10×10 grid has equal in-plane eigenvalues.
        let pts: Vec<_> = (0..100)
            .map(|i| Point3::new((i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1, 0.0))
            .collect();
        let b = raw_blocks(&pts, 1.0).unwrap();
        let [lin, plan, sph] = b.shape;
        assert!(lin.abs() < 1e-6, "linearity {lin}");
        assert!(plan > lin && plan > sph);
        assert!((plan - 1.0).abs() < 1e-9);
        assert!(sph.abs() < 1e-12);
        assert!((b.normal[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn line_is_linear() {
        let pts: Vec<_> = (0..20).map(|i| Point3::new(i as f64, 2.0 * i as f64, 0.5)).collect();
        let b = raw_blocks(&pts, 10.0).unwrap();
        assert!((b.shape[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn half_turn_shifts_histogram_by_four_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 200, 3.0);
        let t = RigidTransform::from_yaw(std::f64::consts::PI, Vector3::zeros());
        let rotated: Vec<_> = pts.iter().map(|p| t.apply(p)).collect();
        let a = raw_blocks(&pts, 3.0).unwrap();
        let b = raw_blocks(&rotated, 3.0).unwrap();
        for k in 0..HIST_BINS {
            assert!((a.histogram[k] - b.histogram[(k + 4) % HIST_BINS]).abs() < 1e-9);
        }
        for k in 0..3 {
            assert!((a.shape[k] - b.shape[k]).abs() < 1e-9);
            assert!((a.height[k] - b.height[k]).abs() < 1e-9);
        }
        assert!((a.normal[2] - b.normal[2]).abs() < 1e-9);
        assert!((a.histogram.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn z_rotation_keeps_invariant_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts = random_points(&mut rng, 150, 2.0);
        for angle in [0.3, 1.0, 2.5, -2.0] {
            let t = RigidTransform::from_yaw(angle, Vector3::new(4.0, -1.0, 0.0));
            let moved: Vec<_> = pts.iter().map(|p| t.apply(p)).collect();
            let a = raw_blocks(&pts, 2.0).unwrap();
            let b = raw_blocks(&moved, 2.0).unwrap();
            for k in 0..3 {
                assert!((a.shape[k] - b.shape[k]).abs() < 1e-9);
                assert!((a.height[k] - b.height[k]).abs() < 1e-9);
            }
            assert!((a.density - b.density).abs() < 1e-12);
            assert!((a.normal[2] - b.normal[2]).abs() < 1e-9);
        }
    }

    #[test]
    fn small_dims_fold_surplus_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(&mut rng, 30, 1.0);
        let d = local_descriptor_with(&pts, 1.0, 8, &BlockWeights::UNIFORM).unwrap();
        assert_eq!(d.len(), 8);
        assert!((norm(&d) - 1.0).abs() < 1e-12);
    }

    fn gem_oracle(descs: &[Vec<f64>], p: f64) -> Vec<f64> {
        let dim = descs[0].len();
        let mut out = vec![0.0; dim];
        for k in 0..dim {
            let mut s = 0.0;
            for d in descs {
                let x = d[k];
                s += if x >= 0.0 { x.powf(p) } else { -(-x).powf(p) };
            }
            let m = s / descs.len() as f64;
            out[k] = if m >= 0.0 { m.powf(1.0 / p) } else { -(-m).powf(1.0 / p) };
        }
        out
    }

    fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize_in_place(&mut v);
        v
    }

    fn level_from(descs: &[Vec<f64>]) -> FeatureLevel {
        let dim = descs[0].len();
        FeatureLevel::new(
            vec![Point3::origin(); descs.len()],
            descs.iter().flatten().copied().collect(),
            dim,
        )
        .unwrap()
    }

    #[test]
    fn gem_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let per_level: Vec<Vec<Vec<f64>>> = [(40, 32), (17, 16), (5, 8)]
            .iter()
            .map(|&(n, d)| (0..n).map(|_| random_unit(&mut rng, d)).collect())
            .collect();
        let levels: Vec<_> = per_level.iter().map(|l| level_from(l)).collect();
        let got = aggregate_global(&levels, 3.0).unwrap();
        let mut want: Vec<f64> = per_level.iter().flat_map(|l| gem_oracle(l, 3.0)).collect();
        let n = norm(&want);
        want.iter_mut().for_each(|x| *x /= n);
        assert_eq!(got.len(), 56);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gem_constant_and_cancellation() {
        let u = {
            let mut v = vec![0.0; 8];
            v[2] = 0.6;
            v[5] = 0.8;
            v
        };
        let levels = vec![level_from(&[u.clone(), u.clone(), u.clone()]), level_from(std::slice::from_ref(&u))];
        let g = aggregate_global(&levels, 3.0).unwrap();
        let s = 1.0 / 2f64.sqrt();
        for k in 0..8 {
            assert!((g[k] - u[k] * s).abs() < 1e-12);
            assert!((g[8 + k] - u[k] * s).abs() < 1e-12);
        }
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let levels = vec![level_from(&[u.clone(), neg]), level_from(std::slice::from_ref(&u))];
        let g = aggregate_global(&levels, 1.0).unwrap();
        assert!(g[..8].iter().all(|&x| x == 0.0));
        for k in 0..8 {
            assert!((g[8 + k] - u[k]).abs() < 1e-12);
        }
        assert!(matches!(aggregate_global(&[], 3.0), Err(Error::EmptyPyramid)));
    }

    fn scene(seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(random_points(&mut rng, 3000, 20.0)).unwrap()
    }

    #[test]
    fn extract_single_point() {
        let c = PointCloud::new(vec![Point3::new(1.0, 1.0, 1.0)]).unwrap();
        let pyr = build_pyramid(&c, 6, 3).unwrap();
        let f = extract_pyramid(&c, &pyr, &DescriptorConfig::default()).unwrap();
        assert_eq!(f.counts(), vec![1, 1, 1]);
        assert_eq!(f.global().len(), 144);
        let s = 1.0 / 3f64.sqrt();
        for lvl in 0..3 {
            for (g, d) in f.global()[lvl * 48..(lvl + 1) * 48].iter().zip(f.level(lvl).descriptor(0)) {
                assert!((g - d * s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extract_is_deterministic_and_unit() {
        let c = scene(1);
        let pyr = build_pyramid(&c, 6, 3).unwrap();
        let cfg = DescriptorConfig::default();
        let a = extract_pyramid(&c, &pyr, &cfg).unwrap();
        let b = extract_pyramid(&c, &build_pyramid(&c, 6, 3).unwrap(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!((cosine(a.global(), b.global()) - 1.0).abs() < 1e-12);
        assert_eq!(a.counts(), pyr.stats());
        for lvl in a.levels() {
            for d in lvl.descriptors() {
                assert!((norm(d) - 1.0).abs() < 1e-9);
            }
        }
        assert!((norm(a.global()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn extract_rejects_mismatch() {
        let c = scene(1);
        let other = PointCloud::new(scene(2).points()[..10].to_vec()).unwrap();
        let pyr = build_pyramid(&other, 6, 3).unwrap();
        assert!(matches!(
            extract_pyramid(&c, &pyr, &DescriptorConfig::default()),
            Err(Error::MismatchedPyramid(_))
        ));
    }

    #[test]
    fn translation_invariance() {
        let c = scene(8);
        let t = RigidTransform::from_translation(Vector3::new(3.25, -7.5, 1.125));
        let moved = apply_transform(&c, &t).unwrap();
        let cfg = DescriptorConfig::default();
        let a = extract_pyramid(&c, &build_pyramid(&c, 5, 3).unwrap(), &cfg).unwrap();
        let b = extract_pyramid(&moved, &build_pyramid(&moved, 5, 3).unwrap(), &cfg).unwrap();
        assert_eq!(a.counts(), b.counts());
        for (la, lb) in a.levels().iter().zip(b.levels()) {
            for (x, y) in la.raw_descriptors().iter().zip(lb.raw_descriptors()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        for (x, y) in a.global().iter().zip(b.global()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn container_round_trip() {
        let cfg = DescriptorConfig::default();
        let pyrs: Vec<_> = (0..3)
            .map(|s| {
                let c = scene(s);
                extract_pyramid(&c, &build_pyramid(&c, 5, 3).unwrap(), &cfg).unwrap()
            })
            .collect();
        let mut buf = Vec::new();
        write_container(&mut buf, &pyrs).unwrap();
        assert_eq!(&buf[..4], b"HLFP");
        let back = parse_container(&buf).unwrap();
        assert_eq!(back, pyrs);
        assert!(parse_container(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(parse_container(&bad), Err(Error::Parse { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(DescriptorConfig::default().validate().is_ok());
        let bad = DescriptorConfig {
            dims: vec![4, 32, 32],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DescriptorConfig {
            exponent: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn context_hand_values() {
        let c = Point3::origin();
        // Ring centres at 1 and 3 for radius 4 with 2 rings; slab centres at -1, 0, 1.
        let pts = [Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 3.0, 1.0), Point3::new(2.0, 0.0, -0.5)];
        let b = context_block(&pts, &c, 4.0, 1.0, 2, 3);
        let expected = [0.25 / 3.0, 0.25 / 3.0 + 1.0 / 3.0, 0.0, 0.25 / 3.0, 0.25 / 3.0, 1.0 / 3.0];
        for (g, e) in b.iter().zip(expected) {
            assert!((g - e).abs() < 1e-15, "{b:?}");
        }
        let far = context_block(&[Point3::new(5.0, 0.0, 0.0)], &c, 4.0, 1.0, 2, 3);
        assert!(far.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn context_invariant_to_yaw_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pts = random_points(&mut rng, 500, 10.0);
        let centre = Point3::new(1.0, -2.0, 0.5);
        let base = context_block(&pts, &centre, 6.0, 1.0, 8, 3);
        assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for _ in 0..10 {
            let t = RigidTransform::from_yaw(
                rng.random_range(-3.0..3.0),
                Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)),
            );
            let moved: Vec<_> = pts.iter().map(|p| t.apply(p)).collect();
            let got = context_block(&moved, &t.apply(&centre), 6.0, 1.0, 8, 3);
            for (a, b) in base.iter().zip(&got) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn context_disabled_reproduces_plain_blocks() {
        let c = scene(4);
        let pyr = build_pyramid(&c, 5, 3).unwrap();
        let cfg = DescriptorConfig {
            context_multipliers: vec![0.0; 3],
            ..Default::default()
        };
        let f = extract_pyramid(&c, &pyr, &cfg).unwrap();
        assert!(f.level(0).descriptors().all(|d| d[RAW_LEN..].iter().all(|&x| x == 0.0)));
        let with = extract_pyramid(&c, &pyr, &DescriptorConfig::default()).unwrap();
        assert!(with.level(0).descriptors().any(|d| d[RAW_LEN..].iter().any(|&x| x != 0.0)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn permutation_invariance(seed in 0u64..10_000, n in 1usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, n, 2.0);
            let mut shuffled = pts.clone();
            shuffled.shuffle(&mut rng);
            let a = local_descriptor(&pts, 2.0).unwrap();
            let b = local_descriptor(&shuffled, 2.0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12, "{} vs {}", x, y);
            }
        }

        #[test]
        fn descriptors_are_unit(seed in 0u64..10_000, n in 1usize..50, dim in 8usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, n, 1.5);
            let d = local_descriptor_with(&pts, 1.0, dim, &BlockWeights::default()).unwrap();
            prop_assert!((norm(&d) - 1.0).abs() < 1e-9);
        }
    }
}
