//! Procedural forest plots.
//!
//! A [`Scene`] is the fixed structure (terrain, trees) derived from the
//! scene seed; a view samples points from it with its own sampling seed,
//! culls them according to the viewpoint model and adds sensor noise. Two
//! views of one scene therefore share geometry but not points.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Frame};
use crate::config::BenchConfig;
use crate::error::{Error, Result};
use crate::pointcloud::{apply_transform, PointCloud, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Viewpoint {
    /// Sensor near the ground at the plot centre: range-limited, with an
    /// optional occlusion wedge.
    Ground,
    /// Top-down capture: keep probability grows with height.
    Aerial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    /// Side length of the square plot in metres.
    pub extent: f64,
    pub tree_count: usize,
    pub trunk_radius: [f64; 2],
    pub trunk_height: [f64; 2],
    /// Canopy points per cubic metre of ellipsoid.
    pub canopy_density: f64,
    /// Ground points per square metre.
    pub ground_density: f64,
    /// Trunk points per square metre of bark.
    pub trunk_density: f64,
    /// Amplitude of the terrain undulation in metres.
    pub roughness: f64,
    /// Uniform clutter points as a fraction of the structured points.
    pub clutter_fraction: f64,
    pub viewpoint: Viewpoint,
    /// Width of the occluded azimuth wedge in degrees.
    pub occlusion_deg: f64,
    pub noise_sigma: f64,
    /// Horizontal sensor range for ground views; `None` keeps the full plot.
    pub sensor_range: Option<f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            extent: 40.0,
            tree_count: 30,
            trunk_radius: [0.15, 0.4],
            trunk_height: [5.0, 10.0],
            canopy_density: 4.0,
            ground_density: 3.0,
            trunk_density: 10.0,
            roughness: 0.3,
            clutter_fraction: 0.03,
            viewpoint: Viewpoint::Ground,
            occlusion_deg: 0.0,
            noise_sigma: 0.0,
            sensor_range: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene: {m}")));
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return bad(format!("extent must be positive, got {}", self.extent));
        }
        for (name, r) in [("trunk_radius", self.trunk_radius), ("trunk_height", self.trunk_height)] {
            if !(r[0] > 0.0 && r[1] >= r[0] && r[1].is_finite()) {
                return bad(format!("{name} must be a positive range, got {r:?}"));
            }
        }
        for (name, v) in [
            ("canopy_density", self.canopy_density),
            ("ground_density", self.ground_density),
            ("trunk_density", self.trunk_density),
            ("roughness", self.roughness),
            ("clutter_fraction", self.clutter_fraction),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        if !(0.0..360.0).contains(&self.occlusion_deg) {
            return bad(format!("occlusion_deg must lie in [0, 360), got {}", self.occlusion_deg));
        }
        if let Some(r) = self.sensor_range {
            if !(r.is_finite() && r > 0.0) {
                return bad(format!("sensor_range must be positive, got {r}"));
            }
        }
        if self.ground_density == 0.0 && self.tree_count == 0 && self.clutter_fraction == 0.0 {
            return bad("scene would contain no points".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub height: f64,
    pub canopy_center: f64,
    pub canopy_radii: [f64; 3],
}

/// Terrain `h(x, y) = Σ a_k sin(f_k·x + φ_k) cos(g_k·y + ψ_k)`.
#[derive(Debug, Clone, PartialEq)]
struct Terrain {
    waves: Vec<[f64; 5]>,
}

impl Terrain {
    fn height(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|[a, f, p, g, q]| a * (f * x + p).sin() * (g * y + q).cos())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub extent: f64,
    pub trees: Vec<Tree>,
    terrain: Terrain,
}

impl Scene {
    /// Structure for `cfg.seed`: terrain waves and Poisson-disc trees.
    pub fn generate(cfg: &SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let waves = (0..3)
            .map(|k| {
                let scale = 1.0 / (k as f64 + 1.0);
                [
                    cfg.roughness * scale,
                    rng.random_range(0.1..0.4) * (k as f64 + 1.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.1..0.4) * (k as f64 + 1.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ]
            })
            .collect();
        let terrain = Terrain { waves };

        let half = cfg.extent / 2.0;
        let min_gap = if cfg.tree_count > 0 {
            0.5 * cfg.extent / (cfg.tree_count as f64).sqrt()
        } else {
            0.0
        };
        let mut trees: Vec<Tree> = Vec::with_capacity(cfg.tree_count);
        let mut attempts = 0;
        while trees.len() < cfg.tree_count && attempts < 100 * cfg.tree_count.max(1) {
            attempts += 1;
            let x = rng.random_range(-half..half);
            let y = rng.random_range(-half..half);
            if trees.iter().any(|t| (t.x - x).hypot(t.y - y) < min_gap) {
                continue;
            }
            let radius = rng.random_range(cfg.trunk_radius[0]..=cfg.trunk_radius[1]);
            let height = rng.random_range(cfg.trunk_height[0]..=cfg.trunk_height[1]);
            let rh = rng.random_range(1.2..2.5);
            let rv = rng.random_range(1.0..2.0);
            trees.push(Tree {
                x,
                y,
                radius,
                height,
                canopy_center: height - 0.3 * rv,
                canopy_radii: [rh * rng.random_range(0.8..1.2), rh * rng.random_range(0.8..1.2), rv],
            });
        }
        Ok(Self {
            extent: cfg.extent,
            trees,
            terrain,
        })
    }

    pub fn ground_height(&self, x: f64, y: f64) -> f64 {
        self.terrain.height(x, y)
    }

    /// Samples one view. `sample_seed` controls which points are drawn;
    /// viewpoint, occlusion, noise and range come from `cfg`.
    pub fn sample(&self, cfg: &SceneConfig, sample_seed: u64) -> Result<PointCloud> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let half = self.extent / 2.0;
        let mut pts: Vec<Point3<f64>> = Vec::new();

        let area = self.extent * self.extent;
        let n_ground = (cfg.ground_density * area).round() as usize;
        for _ in 0..n_ground {
            let x = rng.random_range(-half..half);
            let y = rng.random_range(-half..half);
            pts.push(Point3::new(x, y, self.ground_height(x, y)));
        }

        for t in &self.trees {
            let base = self.ground_height(t.x, t.y);
            let bark = std::f64::consts::TAU * t.radius * t.height;
            for _ in 0..(cfg.trunk_density * bark).round() as usize {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let z = rng.random_range(0.0..t.height);
                pts.push(Point3::new(t.x + t.radius * a.cos(), t.y + t.radius * a.sin(), base + z));
            }
            let [rx, ry, rz] = t.canopy_radii;
            let volume = 4.0 / 3.0 * std::f64::consts::PI * rx * ry * rz;
            let n = (cfg.canopy_density * volume).round() as usize;
            let mut placed = 0;
            while placed < n {
                let u = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if u.norm_squared() > 1.0 {
                    continue;
                }
                placed += 1;
                pts.push(Point3::new(
                    t.x + u.x * rx,
                    t.y + u.y * ry,
                    base + t.canopy_center + u.z * rz,
                ));
            }
        }

        let top = self.trees.iter().map(|t| t.height + t.canopy_radii[2]).fold(3.0, f64::max);
        let n_clutter = (cfg.clutter_fraction * pts.len() as f64).round() as usize;
        for _ in 0..n_clutter {
            let x = rng.random_range(-half..half);
            let y = rng.random_range(-half..half);
            let z = self.ground_height(x, y) + rng.random_range(0.0..top);
            pts.push(Point3::new(x, y, z));
        }

        let wedge_start = rng.random_range(0.0..std::f64::consts::TAU);
        let wedge = cfg.occlusion_deg.to_radians();
        let zmin = pts.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
        let zmax = pts.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
        let zspan = (zmax - zmin).max(1e-9);
        let mut kept = Vec::with_capacity(pts.len());
        for p in pts {
            let keep = match cfg.viewpoint {
                Viewpoint::Ground => {
                    let in_range = cfg.sensor_range.is_none_or(|r| p.x.hypot(p.y) <= r);
                    let az = (p.y.atan2(p.x) - wedge_start).rem_euclid(std::f64::consts::TAU);
                    in_range && !(wedge > 0.0 && az < wedge)
                }
                Viewpoint::Aerial => {
                    let keep_p = 0.2 + 0.8 * (p.z - zmin) / zspan;
                    let az = (p.y.atan2(p.x) - wedge_start).rem_euclid(std::f64::consts::TAU);
                    rng.random::<f64>() < keep_p && !(wedge > 0.0 && az < wedge)
                }
            };
            if keep {
                kept.push(p);
            }
        }

        if cfg.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
            for p in &mut kept {
                p.coords += Vector3::from_fn(|_, _| normal.sample(&mut rng));
            }
        }
        if kept.is_empty() {
            return Err(Error::Config("scene view culled every point".into()));
        }
        PointCloud::new(kept)
    }

    /// Tree base points, one per trunk; shared by every view of the scene.
    pub fn anchors(&self) -> Vec<Point3<f64>> {
        self.trees
            .iter()
            .map(|t| Point3::new(t.x, t.y, self.ground_height(t.x, t.y) + 1.0))
            .collect()
    }
}

/// One view of the scene described by `cfg`.
pub fn synth_scene(cfg: &SceneConfig) -> Result<PointCloud> {
    Scene::generate(cfg)?.sample(cfg, view_seed(cfg.seed, 0))
}

/// Sampling seed of view `k` of scene `seed`.
pub fn view_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(k.wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ 0x5851_F42D_4C95_7F2D
}

#[derive(Debug, Clone)]
pub struct PairSample {
    pub query: PointCloud,
    pub target: PointCloud,
    /// Maps query coordinates into the target frame.
    pub t_true: RigidTransform,
    /// Scene anchors in the query and target frames.
    pub anchors_query: Vec<Point3<f64>>,
    pub anchors_target: Vec<Point3<f64>>,
}

/// Target = view 0 of the scene as configured; query = an independent view
/// with its own noise and occlusion, expressed in a frame such that
/// `target ≈ t_true · query`.
pub fn make_pair(cfg: &SceneConfig, t_true: &RigidTransform, noise_sigma: f64, occlusion_deg: f64) -> Result<PairSample> {
    t_true.validate()?;
    let scene = Scene::generate(cfg)?;
    let target = scene.sample(cfg, view_seed(cfg.seed, 0))?;
    let qcfg = SceneConfig {
        noise_sigma,
        occlusion_deg,
        ..cfg.clone()
    };
    let inv = t_true.inverse();
    let query = apply_transform(&scene.sample(&qcfg, view_seed(cfg.seed, 1))?, &inv)?;
    let anchors_target = scene.anchors();
    let anchors_query = anchors_target.iter().map(|a| inv.apply(a)).collect();
    Ok(PairSample {
        query,
        target,
        t_true: *t_true,
        anchors_query,
        anchors_target,
    })
}

/// Scene settings shared by every place of a benchmark suite.
pub fn suite_scene(bench: &BenchConfig, place: usize) -> SceneConfig {
    SceneConfig {
        seed: view_seed(bench.seed, 1_000_000 + place as u64),
        extent: bench.extent,
        tree_count: bench.tree_count,
        sensor_range: Some(bench.extent / 2.0),
        ..Default::default()
    }
}

/// `bench.pairs` places spaced `place_spacing` apart along x. The database
/// holds one clean view per place; query `i` is an independent view of
/// place `i` with noise `noise_sigmas[i % len]`, the configured occlusion
/// and a random yaw/translation applied to its coordinates.
pub fn synthetic_suite(bench: &BenchConfig) -> Result<Dataset> {
    bench.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(bench.seed);
    let max_yaw = bench.max_yaw_deg.to_radians();
    let mut database = Vec::with_capacity(bench.pairs);
    let mut queries = Vec::with_capacity(bench.pairs);
    for i in 0..bench.pairs {
        let yaw = if max_yaw > 0.0 { rng.random_range(-max_yaw..=max_yaw) } else { 0.0 };
        let mut shift = || {
            if bench.max_translation > 0.0 {
                rng.random_range(-bench.max_translation..=bench.max_translation)
            } else {
                0.0
            }
        };
        let t_true = RigidTransform::from_yaw(yaw, Vector3::new(shift(), shift(), 0.0));
        let sigma = bench.noise_sigmas[i % bench.noise_sigmas.len()];
        let pair = make_pair(&suite_scene(bench, i), &t_true, sigma, bench.occlusion_deg)?;
        let place = RigidTransform::from_translation(Vector3::new(i as f64 * bench.place_spacing, 0.0, 0.0));
        database.push(Frame {
            id: format!("place_{i:04}"),
            cloud: pair.target,
            pose: place,
        });
        queries.push(Frame {
            id: format!("query_{i:04}"),
            cloud: pair.query,
            pose: place.compose(&t_true),
        });
    }
    Ok(Dataset { database, queries })
}
