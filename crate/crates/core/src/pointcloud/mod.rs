//! Point clouds, rigid transforms, file IO and voxel downsampling.
//!
//! Coordinates are metres. Submaps are assumed gravity aligned with z up.

mod io;
mod transform;

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};
use crate::morton;

pub use io::{load_cloud, save_cloud, CloudFormat};
pub use transform::{compose, invert, RigidTransform, ROTATION_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    pub id: Option<String>,
}

impl PointCloud {
    /// Fails on an empty point list or any non-finite coordinate.
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { points, id: None })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point3<f64>> {
        self.points
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            for d in 0..3 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> Point3<f64> {
        let sum: Vector3<f64> = self.points.iter().map(|p| p.coords).sum();
        Point3::from(sum / self.points.len() as f64)
    }
}

/// Replaces the points of every occupied voxel by their centroid.
///
/// Voxels live on the absolute grid `floor(coord / voxel)`; keys are offset by
/// the cell of the minimum corner so they are non-negative, and the output is
/// ordered by the z-order of those keys. Because every centroid stays inside
/// its voxel, a second pass with the same voxel size is a no-op.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(Error::InvalidVoxel(voxel));
    }
    let cell = |v: f64| (v / voxel).floor() as i64;
    let (lo, _) = cloud.bounds();
    let origin = [cell(lo.x), cell(lo.y), cell(lo.z)];

    let mut slots: HashMap<[u64; 3], usize> = HashMap::new();
    let mut keys: Vec<[u64; 3]> = Vec::new();
    let mut sums: Vec<(Vector3<f64>, usize)> = Vec::new();
    for p in cloud.points() {
        let key = [
            (cell(p.x) - origin[0]) as u64,
            (cell(p.y) - origin[1]) as u64,
            (cell(p.z) - origin[2]) as u64,
        ];
        let slot = *slots.entry(key).or_insert_with(|| {
            keys.push(key);
            sums.push((Vector3::zeros(), 0));
            keys.len() - 1
        });
        sums[slot].0 += p.coords;
        sums[slot].1 += 1;
    }

    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| morton::cmp_zorder(&keys[a], &keys[b]));
    let points = order
        .into_iter()
        .map(|i| {
            let (sum, n) = sums[i];
            Point3::from(sum / n as f64)
        })
        .collect();
    Ok(PointCloud {
        points,
        id: cloud.id.clone(),
    })
}

/// `R·p + t` for every point, order preserved.
pub fn apply_transform(cloud: &PointCloud, transform: &RigidTransform) -> Result<PointCloud> {
    transform.validate()?;
    Ok(PointCloud {
        points: cloud.points.iter().map(|p| transform.apply(p)).collect(),
        id: cloud.id.clone(),
    })
}
