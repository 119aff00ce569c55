//! Sparse multi-level octree over a point cloud.
//!
//! Levels are indexed from 0 (finest) to `num_levels - 1` (coarsest). Level
//! `s` sits at octree depth `depth_finest - s`. Only occupied octants are
//! stored, ordered by Morton key. Since Morton order is hierarchical, the
//! members of any octant at any level form a contiguous run of the point
//! permutation held by the pyramid.

use nalgebra::{Point3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::morton;
use crate::pointcloud::PointCloud;

pub const DEFAULT_DEPTH_FINEST: u32 = 6;
pub const DEFAULT_NUM_LEVELS: usize = 3;

/// Axis-aligned cube: minimum corner and edge length in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cube {
    pub min: Point3<f64>,
    pub edge: f64,
}

impl Cube {
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|d| p[d] >= self.min[d] && p[d] <= self.min[d] + self.edge)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OctreeLevel {
    keys: Vec<u64>,
    centroids: Vec<Point3<f64>>,
    counts: Vec<usize>,
    /// `offsets[i]..offsets[i + 1]` is the member range of octant `i`.
    offsets: Vec<usize>,
    /// Index of the containing octant one level coarser (empty at the top).
    parents: Vec<usize>,
}

impl OctreeLevel {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    pub fn centroids(&self) -> &[Point3<f64>] {
        &self.centroids
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OctreePyramid {
    levels: Vec<OctreeLevel>,
    bounds: Cube,
    depth_finest: u32,
    /// Point indices sorted by finest Morton key, then by index.
    order: Vec<u32>,
}

/// Tight bounding box grown to a cube and padded by 1% of its edge.
fn bounding_cube(cloud: &PointCloud) -> Cube {
    let (lo, hi) = cloud.bounds();
    let extent = (hi - lo).max();
    let edge = if extent > 0.0 { extent * 1.01 } else { 1.0 };
    let center = nalgebra::center(&lo, &hi);
    Cube {
        min: center - Vector3::repeat(edge / 2.0),
        edge,
    }
}

pub fn build_pyramid(cloud: &PointCloud, depth_finest: u32, num_levels: usize) -> Result<OctreePyramid> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if num_levels < 2 {
        return Err(Error::InvalidDepth(format!("need at least 2 levels, got {num_levels}")));
    }
    if depth_finest > morton::MAX_DEPTH {
        return Err(Error::InvalidDepth(format!(
            "depth {depth_finest} exceeds maximum {}",
            morton::MAX_DEPTH
        )));
    }
    if (depth_finest as usize) + 1 < num_levels {
        return Err(Error::InvalidDepth(format!(
            "depth {depth_finest} cannot hold {num_levels} levels"
        )));
    }

    let bounds = bounding_cube(cloud);
    let cells = (1u64 << depth_finest) as f64;
    let max_cell = (1u32 << depth_finest) - 1;
    let point_keys: Vec<u64> = cloud
        .points()
        .iter()
        .map(|p| {
            let c = |d: usize| {
                let v = ((p[d] - bounds.min[d]) / bounds.edge * cells).floor();
                (v.max(0.0) as u32).min(max_cell)
            };
            morton::encode(c(0), c(1), c(2))
        })
        .collect();

    let mut order: Vec<u32> = (0..cloud.len() as u32).collect();
    order.sort_by_key(|&i| (point_keys[i as usize], i));

    let mut levels = Vec::with_capacity(num_levels);
    for s in 0..num_levels {
        let shift = s as u32;
        let mut keys = Vec::new();
        let mut offsets = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            let key = morton::ancestor(point_keys[i as usize], shift);
            if keys.last() != Some(&key) {
                keys.push(key);
                offsets.push(pos);
            }
        }
        offsets.push(order.len());

        let mut centroids = Vec::with_capacity(keys.len());
        let mut counts = Vec::with_capacity(keys.len());
        for w in offsets.windows(2) {
            let sum: Vector3<f64> = order[w[0]..w[1]]
                .iter()
                .map(|&i| cloud.points()[i as usize].coords)
                .sum();
            let n = w[1] - w[0];
            centroids.push(Point3::from(sum / n as f64));
            counts.push(n);
        }
        levels.push(OctreeLevel {
            keys,
            centroids,
            counts,
            offsets,
            parents: Vec::new(),
        });
    }

    for s in 0..num_levels - 1 {
        let (fine, coarse) = levels.split_at_mut(s + 1);
        let fine = &mut fine[s];
        let coarse = &coarse[0];
        let mut j = 0;
        fine.parents = fine
            .keys
            .iter()
            .map(|&k| {
                let pk = morton::ancestor(k, 1);
                while coarse.keys[j] != pk {
                    j += 1;
                }
                j
            })
            .collect();
    }

    Ok(OctreePyramid {
        levels,
        bounds,
        depth_finest,
        order,
    })
}

impl OctreePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[OctreeLevel] {
        &self.levels
    }

    pub fn level(&self, s: usize) -> &OctreeLevel {
        &self.levels[s]
    }

    pub fn finest(&self) -> &OctreeLevel {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &OctreeLevel {
        &self.levels[self.levels.len() - 1]
    }

    pub fn bounds(&self) -> Cube {
        self.bounds
    }

    pub fn depth_finest(&self) -> u32 {
        self.depth_finest
    }

    pub fn depth_of(&self, s: usize) -> u32 {
        self.depth_finest - s as u32
    }

    /// Number of points the pyramid was built from.
    pub fn num_points(&self) -> usize {
        self.order.len()
    }

    pub fn octant_edge(&self, s: usize) -> f64 {
        self.bounds.edge / (1u64 << self.depth_of(s)) as f64
    }

    /// Indices (into the source cloud) of the points inside octant `i` of
    /// level `s`.
    pub fn members(&self, s: usize, i: usize) -> &[u32] {
        let lvl = &self.levels[s];
        &self.order[lvl.offsets[i]..lvl.offsets[i + 1]]
    }

    pub fn octant_cube(&self, s: usize, i: usize) -> Cube {
        let edge = self.octant_edge(s);
        let [x, y, z] = morton::decode(self.levels[s].keys[i]);
        Cube {
            min: self.bounds.min + Vector3::new(x as f64, y as f64, z as f64) * edge,
            edge,
        }
    }

    fn check_level(&self, s: usize) -> Result<()> {
        if s >= self.levels.len() {
            return Err(Error::IndexOutOfRange {
                what: "pyramid levels",
                index: s,
                len: self.levels.len(),
            });
        }
        Ok(())
    }

    fn check_octant(&self, s: usize, i: usize) -> Result<()> {
        self.check_level(s)?;
        if i >= self.levels[s].len() {
            return Err(Error::IndexOutOfRange {
                what: "octants",
                index: i,
                len: self.levels[s].len(),
            });
        }
        Ok(())
    }

    /// Index at `coarse_level` of the ancestor of octant `octant` at
    /// `fine_level`.
    pub fn parent_of(&self, fine_level: usize, octant: usize, coarse_level: usize) -> Result<usize> {
        self.check_octant(fine_level, octant)?;
        self.check_level(coarse_level)?;
        if coarse_level <= fine_level {
            return Err(Error::IndexOutOfRange {
                what: "coarser levels",
                index: coarse_level,
                len: self.levels.len(),
            });
        }
        let mut i = octant;
        for s in fine_level..coarse_level {
            i = self.levels[s].parents[i];
        }
        Ok(i)
    }

    /// For every finest-level octant, the index of its ancestor at the
    /// coarsest level.
    pub fn finest_to_coarsest(&self) -> Vec<usize> {
        let top = self.levels.len() - 1;
        (0..self.finest().len())
            .map(|i| self.parent_of(0, i, top).expect("valid octant"))
            .collect()
    }

    /// Finest-level octants grouped under each requested coarsest-level
    /// octant. Over all coarse octants the groups partition the finest level.
    pub fn group_by_parent(&self, coarse_indices: &[usize]) -> Result<Vec<Vec<usize>>> {
        let top = self.levels.len() - 1;
        for &c in coarse_indices {
            self.check_octant(top, c)?;
        }
        // Descendants of a coarse octant are a contiguous run of finest keys.
        let shift = top as u32;
        let fine_keys = &self.finest().keys;
        Ok(coarse_indices
            .iter()
            .map(|&c| {
                let key = self.levels[top].keys[c];
                let start = fine_keys.partition_point(|&k| morton::ancestor(k, shift) < key);
                let end = fine_keys.partition_point(|&k| morton::ancestor(k, shift) <= key);
                (start..end).collect()
            })
            .collect())
    }

    /// Octant counts per level, finest first.
    pub fn stats(&self) -> Vec<usize> {
        self.levels.iter().map(OctreeLevel::len).collect()
    }
}
