//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export returns a JSON string; errors come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

use hierloc::config::PipelineConfig;
use hierloc::harness::prepare;
use hierloc::harness::synth::{make_pair, SceneConfig};
use hierloc::msgv::{consistency_matrix, leading_eigenvector, Correspondence, ScaleCorrespondences};
use hierloc::pointcloud::RigidTransform;
use hierloc::registration::{evaluate_pose, register_features, sinkhorn};

fn respond(result: hierloc::Result<Value>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn random_point(rng: &mut impl Rng) -> Point3<f64> {
    Point3::new(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0), rng.random_range(0.0..5.0))
}

/// Planted correspondences (inliers first, then uniform outliers) scored by
/// spectral matching: the leading eigenvector of the length-consistency
/// matrix should concentrate on the inliers.
#[wasm_bindgen]
pub fn spectral_demo(inliers: usize, outliers: usize, noise: f64, sigma_d: f64, seed: u32) -> String {
    respond((|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.into());
        let t = RigidTransform::from_yaw(rng.random_range(-3.1..3.1), Vector3::new(3.0, -2.0, 0.0));
        let mut pairs = Vec::with_capacity(inliers + outliers);
        for i in 0..inliers + outliers {
            let q = random_point(&mut rng);
            let p = if i < inliers {
                t.apply(&q) + Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0) * noise)
            } else {
                random_point(&mut rng)
            };
            pairs.push(Correspondence {
                q_index: i,
                p_index: i,
                q,
                p,
                distance: 0.0,
            });
        }
        let m = consistency_matrix(&ScaleCorrespondences { level: 0, pairs }, sigma_d)?;
        let e = leading_eigenvector(&m, 1e-8, 1000)?;
        Ok(json!({
            "eigenvector": e.vector,
            "iterations": e.iterations,
            "converged": e.converged,
            "inliers": inliers,
        }))
    })())
}

/// Sinkhorn on a random score matrix with a dustbin row and column.
/// Returns the augmented assignment and its row and column sums.
#[wasm_bindgen]
pub fn sinkhorn_demo(rows: usize, cols: usize, alpha: f64, iters: usize, scale: f64, seed: u32) -> String {
    respond((|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.into());
        // A noisy permutation: diagonal-ish pairs score high.
        let c = nalgebra::DMatrix::from_fn(rows, cols, |a, b| {
            let base = if a == b { 1.0 } else { 0.0 };
            scale * (base + rng.random_range(-0.5..0.5))
        });
        let z = sinkhorn(&c, alpha, iters)?;
        let matrix: Vec<Vec<f64>> = z.row_iter().map(|r| r.iter().copied().collect()).collect();
        Ok(json!({
            "matrix": matrix,
            "row_sums": z.row_iter().map(|r| r.sum()).collect::<Vec<_>>(),
            "col_sums": z.column_iter().map(|c| c.sum()).collect::<Vec<_>>(),
        }))
    })())
}

/// Generates a synthetic forest pair, registers query onto target and
/// returns a thinned top-down view of both clouds plus pose errors.
#[wasm_bindgen]
pub fn register_demo(yaw_deg: f64, tx: f64, ty: f64, noise: f64, seed: u32) -> String {
    respond((|| {
        let mut cfg = PipelineConfig::default();
        cfg.bench.extent = 28.0;
        let scene = SceneConfig {
            seed: seed.into(),
            extent: cfg.bench.extent,
            tree_count: 14,
            sensor_range: Some(cfg.bench.extent / 2.0),
            ..SceneConfig::default()
        };
        let t = RigidTransform::from_yaw(yaw_deg.to_radians(), Vector3::new(tx, ty, 0.0));
        let pair = make_pair(&scene, &t, noise, cfg.bench.occlusion_deg)?;
        let q = prepare(&pair.query, &cfg)?;
        let p = prepare(&pair.target, &cfg)?;
        let (res, _) = register_features(&q.octree, &q.features, &p.octree, &p.features, &cfg.reg)?;
        let err = evaluate_pose(&res.transform, &pair.t_true)?;
        let thin = |pts: &[Point3<f64>], f: &dyn Fn(&Point3<f64>) -> Point3<f64>| -> Vec<[f64; 2]> {
            pts.iter().step_by(4).map(|x| {
                let y = f(x);
                [y.x, y.y]
            }).collect()
        };
        Ok(json!({
            "target": thin(p.cloud.points(), &|x| *x),
            "query_raw": thin(q.cloud.points(), &|x| *x),
            "query_aligned": thin(q.cloud.points(), &|x| res.transform.apply(x)),
            "transform": res.transform,
            "rre_deg": err.rre_deg,
            "rte": err.rte,
            "success": err.success,
            "inliers": res.inlier_count,
            "correspondences": res.correspondences,
        }))
    })())
}
