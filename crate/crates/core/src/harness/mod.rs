//! Synthetic data, dataset IO, timing and the end-to-end benchmark.

pub mod bench;
pub mod dataset;
pub mod synth;
pub mod timing;

use crate::config::PipelineConfig;
use crate::descriptors::{extract_pyramid, FeaturePyramid};
use crate::error::Result;
use crate::octree::{build_pyramid, OctreePyramid};
use crate::pointcloud::{voxel_downsample, PointCloud};

/// A cloud after downsampling, octree construction and feature extraction.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cloud: PointCloud,
    pub octree: OctreePyramid,
    pub features: FeaturePyramid,
}

pub fn prepare(cloud: &PointCloud, cfg: &PipelineConfig) -> Result<Prepared> {
    let cloud = if cfg.octree.voxel > 0.0 {
        voxel_downsample(cloud, cfg.octree.voxel)?
    } else {
        cloud.clone()
    };
    let octree = build_pyramid(&cloud, cfg.octree.depth_finest, cfg.octree.num_levels)?;
    let features = extract_pyramid(&cloud, &octree, &cfg.descriptors)?;
    Ok(Prepared { cloud, octree, features })
}

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "HIERLOC_THREADS";

/// `HIERLOC_THREADS` if set to a positive integer, else `configured` if
/// non-zero, else the available parallelism.
pub fn worker_count(configured: usize) -> usize {
    let env = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok());
    match env {
        Some(n) if n > 0 => n,
        _ if configured > 0 => configured,
        _ => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

/// Applies `f` to every item on up to `workers` threads; output order
/// matches input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = std::iter::repeat_with(|| None).take(items.len()).collect();
    let done: Vec<Vec<(usize, R)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= items.len() {
                            break out;
                        }
                        out.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for (i, r) in done.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}
