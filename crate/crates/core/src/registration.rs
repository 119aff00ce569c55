//! Coarse-to-fine registration without keypoints.
//!
//! 1. Coarse descriptors are compared with a Gaussian kernel, the kernel
//!    matrix is dual-normalised and its `N_c` largest entries become patch
//!    pairs.
//! 2. Each coarse octant expands into its finest-level descendants. Fine
//!    descriptors of a patch pair are matched by log-domain Sinkhorn with a
//!    dustbin, filtered by confidence and mutual top-k.
//! 3. Every patch with at least three fine pairs proposes a weighted
//!    least-squares transform; the proposal with the most inliers over the
//!    union of all fine pairs wins and is refined on its inliers.
//!
//! A 3-point RANSAC baseline operates on the same correspondence format.

use nalgebra::{DMatrix, Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptors::{FeatureLevel, FeaturePyramid};
use crate::error::{Error, Result};
use crate::octree::OctreePyramid;
use crate::pointcloud::RigidTransform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    /// Number of coarse correspondences.
    pub n_c: usize,
    /// Fine confidence threshold.
    pub gamma_z: f64,
    pub k_mutual: usize,
    /// Dustbin score.
    pub alpha: f64,
    pub sinkhorn_iters: usize,
    /// Multiplier on the fine cost matrix before Sinkhorn.
    pub feature_scale: f64,
    /// Inlier acceptance radius in metres.
    pub tau_a: f64,
    /// Refinement rounds.
    pub n_r: usize,
    pub ransac_iters: usize,
    pub ransac_seed: u64,
    /// Early-exit confidence for RANSAC; `None` runs every iteration.
    pub ransac_confidence: Option<f64>,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            n_c: 256,
            gamma_z: 0.05,
            k_mutual: 3,
            alpha: 1.0,
            sinkhorn_iters: 100,
            feature_scale: 64.0,
            tau_a: 1.6,
            n_r: 5,
            ransac_iters: 50_000,
            ransac_seed: 0,
            ransac_confidence: None,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("reg: {m}")));
        if self.n_c == 0 {
            return bad("n_c must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.gamma_z) {
            return bad("gamma_z must lie in [0, 1)");
        }
        if self.k_mutual == 0 || self.sinkhorn_iters == 0 || self.n_r == 0 || self.ransac_iters == 0 {
            return bad("k_mutual, sinkhorn_iters, n_r and ransac_iters must be ≥ 1");
        }
        if !self.alpha.is_finite() || !(self.feature_scale.is_finite() && self.feature_scale > 0.0) {
            return bad("alpha must be finite and feature_scale positive");
        }
        if !(self.tau_a.is_finite() && self.tau_a > 0.0) {
            return bad("tau_a must be positive");
        }
        if let Some(c) = self.ransac_confidence {
            if !(c > 0.0 && c < 1.0) {
                return bad("ransac_confidence must lie in (0, 1)");
            }
        }
        Ok(())
    }
}

/// `G[a][b] = exp(−‖f_a − f_b‖²)`.
pub fn coarse_correlation(fq: &FeatureLevel, fp: &FeatureLevel) -> Result<DMatrix<f64>> {
    if fq.is_empty() || fp.is_empty() {
        return Err(Error::EmptyFeatures);
    }
    if fq.dim() != fp.dim() {
        return Err(Error::DimMismatch {
            expected: fq.dim(),
            got: fp.dim(),
        });
    }
    Ok(DMatrix::from_fn(fq.len(), fp.len(), |a, b| {
        let d: f64 = fq
            .descriptor(a)
            .iter()
            .zip(fp.descriptor(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        (-d).exp()
    }))
}

/// Elementwise product of the row-normalised and column-normalised matrix.
pub fn dual_normalize(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rows: Vec<f64> = g.row_iter().map(|r| r.sum()).collect();
    let cols: Vec<f64> = g.column_iter().map(|c| c.sum()).collect();
    if rows.iter().chain(&cols).any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::ZeroRowOrColumn);
    }
    Ok(DMatrix::from_fn(g.nrows(), g.ncols(), |a, b| {
        let v = g[(a, b)];
        (v / rows[a]) * (v / cols[b])
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoarseMatch {
    pub q: usize,
    pub p: usize,
    pub score: f64,
}

/// Top-`n_c` entries of `g`, highest first; ties by (row, col).
pub fn select_coarse(g: &DMatrix<f64>, n_c: usize) -> Vec<CoarseMatch> {
    let mut all: Vec<CoarseMatch> = (0..g.nrows())
        .flat_map(|q| (0..g.ncols()).map(move |p| (q, p)))
        .map(|(q, p)| CoarseMatch { q, p, score: g[(q, p)] })
        .collect();
    let cmp = |a: &CoarseMatch, b: &CoarseMatch| b.score.total_cmp(&a.score).then(a.q.cmp(&b.q)).then(a.p.cmp(&b.p));
    if n_c < all.len() {
        all.select_nth_unstable_by(n_c - 1, cmp);
        all.truncate(n_c);
    }
    all.sort_by(cmp);
    all
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinePair {
    pub q: Point3<f64>,
    pub p: Point3<f64>,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchCorrespondence {
    pub coarse: CoarseMatch,
    /// Finest-level octant indices on each side.
    pub q_indices: Vec<usize>,
    pub p_indices: Vec<usize>,
    pub q_features: FeatureLevel,
    pub p_features: FeatureLevel,
    /// Assignment without dustbins, once computed.
    pub assignment: Option<DMatrix<f64>>,
    pub fine_pairs: Vec<FinePair>,
}

/// Expands coarse pairs into the finest-level octants below them.
/// Centroids and descriptors come from the feature pyramids; the octree
/// pyramids supply only the ancestry.
pub fn expand_patches(
    pyr_q: &OctreePyramid,
    pyr_p: &OctreePyramid,
    feats_q: &FeaturePyramid,
    feats_p: &FeaturePyramid,
    coarse: &[CoarseMatch],
) -> Result<Vec<PatchCorrespondence>> {
    for (pyr, feats) in [(pyr_q, feats_q), (pyr_p, feats_p)] {
        if pyr.stats() != feats.counts() {
            return Err(Error::MismatchedPyramid(format!(
                "octree counts {:?} vs feature counts {:?}",
                pyr.stats(),
                feats.counts()
            )));
        }
    }
    let gq = pyr_q.group_by_parent(&coarse.iter().map(|c| c.q).collect::<Vec<_>>())?;
    let gp = pyr_p.group_by_parent(&coarse.iter().map(|c| c.p).collect::<Vec<_>>())?;
    coarse
        .iter()
        .zip(gq.into_iter().zip(gp))
        .map(|(c, (qi, pi))| {
            if qi.is_empty() {
                return Err(Error::EmptyPatch(c.q));
            }
            if pi.is_empty() {
                return Err(Error::EmptyPatch(c.p));
            }
            Ok(PatchCorrespondence {
                coarse: *c,
                q_features: feats_q.level(0).select(&qi),
                p_features: feats_p.level(0).select(&pi),
                q_indices: qi,
                p_indices: pi,
                assignment: None,
                fine_pairs: Vec::new(),
            })
        })
        .collect()
}

/// `C = F_q · F_pᵀ / √d1`.
pub fn patch_cost(fq: &FeatureLevel, fp: &FeatureLevel, d1: usize) -> Result<DMatrix<f64>> {
    for d in [fq.dim(), fp.dim()] {
        if d != d1 {
            return Err(Error::DimMismatch { expected: d1, got: d });
        }
    }
    let scale = 1.0 / (d1 as f64).sqrt();
    Ok(DMatrix::from_fn(fq.len(), fp.len(), |a, b| {
        fq.descriptor(a)
            .iter()
            .zip(fp.descriptor(b))
            .map(|(x, y)| x * y)
            .sum::<f64>()
            * scale
    }))
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vals.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn on `C` bordered by a dustbin row and column of value
/// `alpha`. Returns the augmented `(m+1)×(n+1)` assignment with real rows
/// and columns of mass 1, a dustbin row of mass `n` and a dustbin column of
/// mass `m`.
pub fn sinkhorn(c: &DMatrix<f64>, alpha: f64, iters: usize) -> Result<DMatrix<f64>> {
    if iters == 0 {
        return Err(Error::Config("sinkhorn needs at least one iteration".into()));
    }
    if !alpha.is_finite() || !c.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let (m, n) = c.shape();
    let (rows, cols) = (m + 1, n + 1);
    // Row-major copy of the bordered score matrix.
    let mut s = vec![alpha; rows * cols];
    for a in 0..m {
        for b in 0..n {
            s[a * cols + b] = c[(a, b)];
        }
    }
    let norm = -((m + n) as f64).ln();
    let mut log_mu = vec![norm; rows];
    log_mu[m] = (n as f64).ln() + norm;
    let mut log_nu = vec![norm; cols];
    log_nu[n] = (m as f64).ln() + norm;
    if m == 0 {
        log_nu[n] = f64::NEG_INFINITY;
    }
    if n == 0 {
        log_mu[m] = f64::NEG_INFINITY;
    }

    let mut u = vec![0.0; rows];
    let mut v = vec![0.0; cols];
    for _ in 0..iters {
        for a in 0..rows {
            let row = &s[a * cols..(a + 1) * cols];
            u[a] = log_mu[a] - log_sum_exp(row.iter().zip(&v).map(|(x, y)| x + y));
        }
        for b in 0..cols {
            v[b] = log_nu[b] - log_sum_exp((0..rows).map(|a| s[a * cols + b] + u[a]));
        }
    }
    // Subtracting `norm` rescales the marginals by m + n.
    Ok(DMatrix::from_fn(rows, cols, |a, b| (s[a * cols + b] + u[a] + v[b] - norm).exp()))
}

/// The real block of an augmented assignment, clamped to `[0, 1]`.
pub fn drop_dustbin(z_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = z_bar.shape();
    z_bar.view((0, 0), (r - 1, c - 1)).map(|x| x.clamp(0.0, 1.0))
}

fn top_k_indices(vals: impl Iterator<Item = f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, f64)> = vals.enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx.into_iter().map(|(i, _)| i).collect()
}

/// Pairs `(j, l, z)` with `z ≥ gamma_z` that are mutually within each
/// other's top `k_mutual`; ties by index. Row-major output order.
pub fn fine_matches(z: &DMatrix<f64>, gamma_z: f64, k_mutual: usize) -> Vec<(usize, usize, f64)> {
    let (m, n) = z.shape();
    let row_top: Vec<Vec<usize>> = (0..m).map(|j| top_k_indices(z.row(j).iter().copied(), k_mutual)).collect();
    let col_top: Vec<Vec<usize>> = (0..n).map(|l| top_k_indices(z.column(l).iter().copied(), k_mutual)).collect();
    let mut out = Vec::new();
    for (j, tops) in row_top.iter().enumerate() {
        let mut ls = tops.clone();
        ls.sort_unstable();
        for l in ls {
            let v = z[(j, l)];
            if v >= gamma_z && col_top[l].contains(&j) {
                out.push((j, l, v));
            }
        }
    }
    out
}

/// Minimises `Σ w ‖R·q + t − p‖²` in closed form (weighted centroids and
/// an SVD of the weighted cross-covariance, reflection corrected).
pub fn weighted_kabsch(pairs: &[FinePair]) -> Result<RigidTransform> {
    let active = pairs.iter().filter(|p| p.z > 0.0).count();
    if active < 3 {
        return Err(Error::InsufficientPairs(active));
    }
    if pairs.iter().any(|p| !(p.z.is_finite() && p.z >= 0.0)) {
        return Err(Error::NonFiniteInput);
    }
    let wsum: f64 = pairs.iter().map(|p| p.z).sum();
    let qc = pairs.iter().map(|p| p.q.coords * p.z).sum::<Vector3<f64>>() / wsum;
    let pc = pairs.iter().map(|p| p.p.coords * p.z).sum::<Vector3<f64>>() / wsum;
    let mut h = Matrix3::zeros();
    for p in pairs {
        if p.z > 0.0 {
            h += (p.q.coords - qc) * (p.p.coords - pc).transpose() * p.z;
        }
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::DegenerateGeometry);
    }
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let t = pc - r * qc;
    Ok(RigidTransform::from_parts_unchecked(r, t))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
    /// Hypotheses evaluated.
    pub candidate_count: usize,
    /// Refinement rounds (LGR) or sampling iterations (RANSAC).
    pub iterations_run: usize,
    pub per_candidate_inliers: Vec<usize>,
    pub correspondences: usize,
}

struct Score {
    count: usize,
    mean_residual: f64,
}

fn score(t: &RigidTransform, all: &[FinePair], tau2: f64) -> Score {
    let (r, tr) = (t.rotation(), t.translation());
    let mut count = 0;
    let mut sum = 0.0;
    for c in all {
        let d2 = (r * c.q.coords + tr - c.p.coords).norm_squared();
        if d2 < tau2 {
            count += 1;
            sum += d2.sqrt();
        }
    }
    Score {
        count,
        mean_residual: if count > 0 { sum / count as f64 } else { f64::INFINITY },
    }
}

fn inliers_of(t: &RigidTransform, all: &[FinePair], tau2: f64) -> Vec<FinePair> {
    all.iter()
        .filter(|c| (t.apply(&c.q) - c.p).norm_squared() < tau2)
        .copied()
        .collect()
}

/// Hypothesise per patch, verify over the union of all fine pairs, refine
/// `n_r` times on the inliers with confidence weights.
pub fn local_to_global(patches: &[Vec<FinePair>], tau_a: f64, n_r: usize) -> Result<RegistrationResult> {
    if !(tau_a.is_finite() && tau_a > 0.0) {
        return Err(Error::Config(format!("tau_a must be positive, got {tau_a}")));
    }
    if n_r == 0 {
        return Err(Error::Config("n_r must be at least 1".into()));
    }
    let all: Vec<FinePair> = patches.iter().flatten().copied().collect();
    let tau2 = tau_a * tau_a;
    let mut best: Option<(RigidTransform, Score, usize)> = None;
    let mut per_candidate = Vec::new();
    let mut degenerate = false;
    for (i, patch) in patches.iter().enumerate() {
        if patch.len() < 3 {
            continue;
        }
        let t = match weighted_kabsch(patch) {
            Ok(t) => t,
            Err(Error::DegenerateGeometry | Error::InsufficientPairs(_)) => {
                degenerate = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        let s = score(&t, &all, tau2);
        per_candidate.push(s.count);
        let better = match &best {
            None => true,
            Some((_, b, _)) => s.count > b.count || (s.count == b.count && s.mean_residual < b.mean_residual),
        };
        if better {
            best = Some((t, s, i));
        }
    }
    let Some((initial, initial_score, _)) = best else {
        return Err(if degenerate { Error::DegenerateGeometry } else { Error::NoValidPatch });
    };

    let mut current = initial;
    let mut current_score = Score {
        count: initial_score.count,
        mean_residual: initial_score.mean_residual,
    };
    let mut rounds = 0;
    for _ in 0..n_r {
        let inl = inliers_of(&current, &all, tau2);
        let Ok(t) = weighted_kabsch(&inl) else { break };
        rounds += 1;
        current_score = score(&t, &all, tau2);
        current = t;
    }
    let (transform, final_score) = if current_score.count < initial_score.count {
        (initial, initial_score)
    } else {
        (current, current_score)
    };
    Ok(RegistrationResult {
        transform,
        inlier_count: final_score.count,
        inlier_ratio: final_score.count as f64 / all.len() as f64,
        candidate_count: per_candidate.len(),
        iterations_run: rounds,
        per_candidate_inliers: per_candidate,
        correspondences: all.len(),
    })
}

/// 3-point RANSAC with Kabsch hypotheses and a final least-squares refit
/// on the best inlier set. Deterministic for a fixed seed.
pub fn ransac_register(
    pairs: &[(Point3<f64>, Point3<f64>)],
    tau_a: f64,
    max_iters: usize,
    seed: u64,
    confidence: Option<f64>,
) -> Result<RegistrationResult> {
    let n = pairs.len();
    if n < 3 {
        return Err(Error::InsufficientPairs(n));
    }
    if !(tau_a.is_finite() && tau_a > 0.0) {
        return Err(Error::Config(format!("tau_a must be positive, got {tau_a}")));
    }
    let all: Vec<FinePair> = pairs.iter().map(|&(q, p)| FinePair { q, p, z: 1.0 }).collect();
    let tau2 = tau_a * tau_a;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(RigidTransform, usize)> = None;
    let mut hypotheses = 0;
    let mut iters = 0;
    let mut required = max_iters;
    while iters < max_iters.min(required) {
        iters += 1;
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let mut c = rng.random_range(0..n - 2);
        for x in [a.min(b), a.max(b)] {
            if c >= x {
                c += 1;
            }
        }
        let Ok(t) = weighted_kabsch(&[all[a], all[b], all[c]]) else {
            continue;
        };
        hypotheses += 1;
        let count = score(&t, &all, tau2).count;
        if best.as_ref().is_none_or(|(_, bc)| count > *bc) {
            best = Some((t, count));
            if let Some(conf) = confidence {
                let w = count as f64 / n as f64;
                let miss = 1.0 - w.powi(3);
                required = if miss <= 0.0 {
                    0
                } else {
                    ((1.0 - conf).ln() / miss.ln()).ceil().max(0.0) as usize
                };
            }
        }
    }
    let Some((t, _)) = best else {
        return Err(Error::DegenerateGeometry);
    };
    let transform = weighted_kabsch(&inliers_of(&t, &all, tau2)).unwrap_or(t);
    let count = score(&transform, &all, tau2).count;
    Ok(RegistrationResult {
        transform,
        inlier_count: count,
        inlier_ratio: count as f64 / n as f64,
        candidate_count: hypotheses,
        iterations_run: iters,
        per_candidate_inliers: Vec::new(),
        correspondences: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoseError {
    pub rre_deg: f64,
    pub rte: f64,
    pub success: bool,
}

pub const SUCCESS_RTE: f64 = 2.0;
pub const SUCCESS_RRE_DEG: f64 = 5.0;

pub fn evaluate_pose(est: &RigidTransform, gt: &RigidTransform) -> Result<PoseError> {
    est.validate()?;
    gt.validate()?;
    let c = ((gt.rotation().transpose() * est.rotation()).trace() - 1.0) / 2.0;
    let rre_deg = c.clamp(-1.0, 1.0).acos().to_degrees();
    let rte = (gt.translation() - est.translation()).norm();
    Ok(PoseError {
        rre_deg,
        rte,
        success: rte < SUCCESS_RTE && rre_deg < SUCCESS_RRE_DEG,
    })
}

/// Intermediate products of [`register_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct LgrTrace {
    pub coarse: Vec<CoarseMatch>,
    pub patches: Vec<PatchCorrespondence>,
}

impl LgrTrace {
    pub fn fine_pairs(&self) -> Vec<Vec<FinePair>> {
        self.patches.iter().map(|p| p.fine_pairs.clone()).collect()
    }
}

/// Coarse matching, patch expansion and Sinkhorn fine matching; the
/// returned patches carry their fine pairs.
pub fn match_patches(
    pyr_q: &OctreePyramid,
    feats_q: &FeaturePyramid,
    pyr_p: &OctreePyramid,
    feats_p: &FeaturePyramid,
    cfg: &RegConfig,
) -> Result<LgrTrace> {
    cfg.validate()?;
    let top_q = feats_q.num_levels() - 1;
    let top_p = feats_p.num_levels() - 1;
    let g = coarse_correlation(feats_q.level(top_q), feats_p.level(top_p))?;
    let coarse = select_coarse(&dual_normalize(&g)?, cfg.n_c);
    let mut patches = expand_patches(pyr_q, pyr_p, feats_q, feats_p, &coarse)?;
    let d1 = feats_q.level(0).dim();
    for patch in &mut patches {
        let cost = patch_cost(&patch.q_features, &patch.p_features, d1)? * cfg.feature_scale;
        let z = drop_dustbin(&sinkhorn(&cost, cfg.alpha, cfg.sinkhorn_iters)?);
        patch.fine_pairs = fine_matches(&z, cfg.gamma_z, cfg.k_mutual)
            .into_iter()
            .map(|(j, l, w)| FinePair {
                q: patch.q_features.centroids()[j],
                p: patch.p_features.centroids()[l],
                z: w,
            })
            .collect();
        patch.assignment = Some(z);
    }
    Ok(LgrTrace { coarse, patches })
}

/// Full coarse-to-fine registration of query features onto target
/// features. The returned transform maps query coordinates into the target
/// frame.
pub fn register_features(
    pyr_q: &OctreePyramid,
    feats_q: &FeaturePyramid,
    pyr_p: &OctreePyramid,
    feats_p: &FeaturePyramid,
    cfg: &RegConfig,
) -> Result<(RegistrationResult, LgrTrace)> {
    let trace = match_patches(pyr_q, feats_q, pyr_p, feats_p, cfg)?;
    let res = local_to_global(&trace.fine_pairs(), cfg.tau_a, cfg.n_r)?;
    Ok((res, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::normalize_in_place;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random_level(rng: &mut impl Rng, n: usize, dim: usize) -> FeatureLevel {
        let mut desc = Vec::new();
        for _ in 0..n {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            normalize_in_place(&mut v);
            desc.extend(v);
        }
        FeatureLevel::new(vec![Point3::origin(); n], desc, dim).unwrap()
    }

    fn unit(dim: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        v
    }

    #[test]
    fn correlation_values() {
        let f = FeatureLevel::new(vec![Point3::origin(); 2], [unit(4, 0), unit(4, 1)].concat(), 4).unwrap();
        let g = coarse_correlation(&f, &f).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
        assert!((g[(0, 1)] - (-2.0f64).exp()).abs() < 1e-15);
        assert!((g[(0, 1)] - 0.1353).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let a = random_level(&mut rng, 10, 16);
        let b = random_level(&mut rng, 12, 16);
        let g = coarse_correlation(&a, &b).unwrap();
        for i in 0..10 {
            for j in 0..12 {
                let d: f64 = (0..16).map(|k| (a.descriptor(i)[k] - b.descriptor(j)[k]).powi(2)).sum();
                assert!((g[(i, j)] - (-d).exp()).abs() < 1e-12);
                assert!(g[(i, j)] > 0.0 && g[(i, j)] <= 1.0);
            }
        }
    }

    #[test]
    fn dual_normalize_examples() {
        let one = dual_normalize(&DMatrix::from_element(1, 1, 0.37)).unwrap();
        assert!((one[(0, 0)] - 1.0).abs() < 1e-15);
        let flat = dual_normalize(&DMatrix::from_element(2, 2, 1.0)).unwrap();
        assert!(flat.iter().all(|&x| x == 0.25));
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let g = DMatrix::from_fn(5, 7, |_, _| rng.random_range(0.01..1.0));
        let got = dual_normalize(&g).unwrap();
        for a in 0..5 {
            for b in 0..7 {
                let row: f64 = (0..7).map(|k| g[(a, k)]).sum();
                let col: f64 = (0..5).map(|k| g[(k, b)]).sum();
                assert!((got[(a, b)] - (g[(a, b)] / row) * (g[(a, b)] / col)).abs() < 1e-12);
            }
        }
        assert!(matches!(
            dual_normalize(&DMatrix::zeros(2, 2)),
            Err(Error::ZeroRowOrColumn)
        ));
    }

    #[test]
    fn select_coarse_matches_sort() {
        let g = DMatrix::from_row_slice(2, 2, &[0.1, 0.9, 0.3, 0.3]);
        let all = select_coarse(&g, 10);
        assert_eq!(all.len(), 4);
        assert_eq!((all[0].q, all[0].p), (0, 1));
        assert_eq!((all[1].q, all[1].p), (1, 0));
        assert_eq!((all[2].q, all[2].p), (1, 1));

        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let g = DMatrix::from_fn(40, 30, |_, _| (rng.random_range(0..50) as f64) / 50.0);
        let mut oracle: Vec<(f64, usize, usize)> =
            (0..40).flat_map(|q| (0..30).map(move |p| (q, p))).map(|(q, p)| (-g[(q, p)], q, p)).collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let got = select_coarse(&g, 256);
        assert_eq!(got.len(), 256);
        for (c, o) in got.iter().zip(&oracle) {
            assert_eq!((c.score, c.q, c.p), (-o.0, o.1, o.2));
        }
    }

    #[test]
    fn patch_cost_values() {
        let a = FeatureLevel::new(vec![Point3::origin(); 2], [unit(16, 0), unit(16, 1)].concat(), 16).unwrap();
        let c = patch_cost(&a, &a, 16).unwrap();
        assert_eq!(c[(0, 0)], 0.25);
        assert_eq!(c[(0, 1)], 0.0);
        assert!(matches!(patch_cost(&a, &a, 8), Err(Error::DimMismatch { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let p = random_level(&mut rng, 7, 32);
        let q = random_level(&mut rng, 9, 32);
        let c = patch_cost(&p, &q, 32).unwrap();
        let fp = DMatrix::from_row_slice(7, 32, p.raw_descriptors());
        let fq = DMatrix::from_row_slice(9, 32, q.raw_descriptors());
        let oracle = fp * fq.transpose() / 32f64.sqrt();
        assert!((c - oracle).amax() < 1e-12);
    }

    fn check_marginals(z: &DMatrix<f64>, tol: f64) {
        let (r, c) = z.shape();
        let (m, n) = (r - 1, c - 1);
        for a in 0..r {
            let want = if a < m { 1.0 } else { n as f64 };
            assert!((z.row(a).sum() - want).abs() < tol, "row {a}: {}", z.row(a).sum());
        }
        for b in 0..c {
            let want = if b < n { 1.0 } else { m as f64 };
            assert!((z.column(b).sum() - want).abs() < tol, "col {b}: {}", z.column(b).sum());
        }
    }

    #[test]
    fn sinkhorn_examples() {
        // Extreme scores converge slowly; the forced pair still dominates.
        let z = sinkhorn(&DMatrix::from_element(1, 1, 50.0), -50.0, 100).unwrap();
        assert!((z[(0, 0)] - 1.0).abs() < 1e-2);
        let z = sinkhorn(&DMatrix::from_element(1, 1, 50.0), -50.0, 10_000).unwrap();
        assert!((z[(0, 0)] - 1.0).abs() < 1e-4);
        let z = drop_dustbin(&sinkhorn(&DMatrix::from_element(2, 2, 0.3), 1.0, 100).unwrap());
        assert!((z[(0, 0)] - z[(1, 1)]).abs() < 1e-12);
        assert!((z[(0, 0)] - z[(0, 1)]).abs() < 1e-12);
        assert!((z[(0, 1)] - z[(1, 0)]).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let c = DMatrix::from_fn(6, 8, |_, _| rng.random_range(-1.0..1.0));
        let z = sinkhorn(&c, 1.0, 100).unwrap();
        check_marginals(&z, 1e-6);
        assert!(drop_dustbin(&z).iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(matches!(
            sinkhorn(&DMatrix::from_element(1, 1, f64::NAN), 1.0, 10),
            Err(Error::NonFiniteInput)
        ));
    }

    #[test]
    fn fine_matches_examples() {
        let mut z = DMatrix::from_element(4, 4, 0.01);
        for i in 0..4 {
            z[(i, i)] = 0.9;
        }
        let m = fine_matches(&z, 0.05, 1);
        assert_eq!(m.iter().map(|x| (x.0, x.1)).collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(fine_matches(&DMatrix::from_element(3, 3, 0.04), 0.05, 3).is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let z = DMatrix::from_fn(9, 11, |_, _| rng.random_range(0.0..0.3));
        let topk = |vals: Vec<(usize, f64)>| {
            let mut v = vals;
            v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            v.into_iter().take(3).map(|x| x.0).collect::<Vec<_>>()
        };
        let mut oracle = Vec::new();
        for j in 0..9 {
            for l in 0..11 {
                let in_row = topk((0..11).map(|k| (k, z[(j, k)])).collect()).contains(&l);
                let in_col = topk((0..9).map(|k| (k, z[(k, l)])).collect()).contains(&j);
                if z[(j, l)] >= 0.05 && in_row && in_col {
                    oracle.push((j, l, z[(j, l)]));
                }
            }
        }
        assert_eq!(fine_matches(&z, 0.05, 3), oracle);
    }

    fn pairs_under(t: &RigidTransform, qs: &[Point3<f64>]) -> Vec<FinePair> {
        qs.iter().map(|q| FinePair { q: *q, p: t.apply(q), z: 1.0 }).collect()
    }

    #[test]
    fn kabsch_examples() {
        let qs = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 2.0, 0.0),
            Point3::new(0.0, 0.0, 3.0),
        ];
        let id = weighted_kabsch(&pairs_under(&RigidTransform::identity(), &qs)).unwrap();
        assert!((id.rotation() - Matrix3::identity()).amax() < 1e-12);
        assert!(id.translation().amax() < 1e-12);

        let t0 = RigidTransform::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::new(1.0, 2.0, 3.0));
        let got = weighted_kabsch(&pairs_under(&t0, &qs)).unwrap();
        assert!((got.rotation() - t0.rotation()).amax() < 1e-9);
        assert!((got.translation() - t0.translation()).amax() < 1e-9);

        let mut with_outlier = pairs_under(&t0, &qs);
        with_outlier.push(FinePair {
            q: Point3::new(5.0, 5.0, 5.0),
            p: Point3::new(-40.0, 3.0, 9.0),
            z: 0.0,
        });
        let a = weighted_kabsch(&with_outlier).unwrap();
        assert!((a.rotation() - got.rotation()).amax() < 1e-12);
        assert!((a.translation() - got.translation()).amax() < 1e-12);

        assert!(matches!(
            weighted_kabsch(&with_outlier[..2]),
            Err(Error::InsufficientPairs(2))
        ));
        let line: Vec<_> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            weighted_kabsch(&pairs_under(&t0, &line)),
            Err(Error::DegenerateGeometry)
        ));
    }

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        RigidTransform::from_axis_angle(
            &Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            rng.random_range(-3.1..3.1),
            Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
        )
    }

    fn random_points(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent), rng.random_range(0.0..extent)))
            .collect()
    }

    #[test]
    fn kabsch_beats_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t0 = random_transform(&mut rng);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let pairs: Vec<_> = random_points(&mut rng, 30, 10.0)
            .into_iter()
            .map(|q| {
                let p = t0.apply(&q) + Vector3::from_fn(|_, _| noise.sample(&mut rng));
                FinePair { q, p, z: rng.random_range(0.1..2.0) }
            })
            .collect();
        let obj = |t: &RigidTransform| pairs.iter().map(|c| c.z * (t.apply(&c.q) - c.p).norm_squared()).sum::<f64>();
        let est = weighted_kabsch(&pairs).unwrap();
        est.validate().unwrap();
        let best = obj(&est);
        assert!(best <= obj(&RigidTransform::identity()));
        for _ in 0..100 {
            let d = RigidTransform::from_axis_angle(
                &Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0),
                rng.random_range(-0.05..0.05),
                Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
            );
            assert!(best <= obj(&d.compose(&est)) + 1e-9);
        }
    }

    #[test]
    fn lgr_single_exact_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t0 = random_transform(&mut rng);
        let patch = pairs_under(&t0, &random_points(&mut rng, 10, 5.0));
        let r = local_to_global(&[patch], 1.6, 5).unwrap();
        assert_eq!(r.inlier_ratio, 1.0);
        assert!((r.transform.rotation() - t0.rotation()).amax() < 1e-9);
        assert!(matches!(
            local_to_global(&[pairs_under(&t0, &random_points(&mut rng, 2, 5.0))], 1.6, 5),
            Err(Error::NoValidPatch)
        ));
    }

    #[test]
    fn lgr_rejects_outlier_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let t0 = random_transform(&mut rng);
        let mut patches: Vec<Vec<FinePair>> = (0..9)
            .map(|k| {
                let base = Vector3::new(k as f64 * 6.0, 0.0, 0.0);
                let qs: Vec<_> = random_points(&mut rng, 8, 4.0).into_iter().map(|q| q + base).collect();
                pairs_under(&t0, &qs)
            })
            .collect();
        patches.push(
            (0..8)
                .map(|_| FinePair {
                    q: Point3::from(random_points(&mut rng, 1, 50.0)[0]),
                    p: Point3::from(random_points(&mut rng, 1, 50.0)[0]),
                    z: 1.0,
                })
                .collect(),
        );
        let r = local_to_global(&patches, 1.6, 5).unwrap();
        let e = evaluate_pose(&r.transform, &t0).unwrap();
        assert!(e.rte < 0.05 && e.rre_deg < 0.5, "{e:?}");
        assert!(r.inlier_count >= 72);
        assert!(r.inlier_count >= *r.per_candidate_inliers.iter().max().unwrap());
    }

    #[test]
    fn ransac_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let t0 = random_transform(&mut rng);
        let qs = random_points(&mut rng, 40, 20.0);
        let exact: Vec<_> = qs.iter().map(|q| (*q, t0.apply(q))).collect();
        let r = ransac_register(&exact, 1.6, 10_000, 1, Some(0.999)).unwrap();
        assert_eq!(r.iterations_run, 1);
        assert!((r.transform.rotation() - t0.rotation()).amax() < 1e-9);

        let mut noisy = exact.clone();
        for pair in noisy.iter_mut().skip(20) {
            pair.1 = random_points(&mut rng, 1, 20.0)[0];
        }
        let r = ransac_register(&noisy, 1.6, 10_000, 97, None).unwrap();
        let e = evaluate_pose(&r.transform, &t0).unwrap();
        assert!(e.rte < 0.1 && e.rre_deg < 1.0, "{e:?}");
        assert_eq!(r.iterations_run, 10_000);
        let again = ransac_register(&noisy, 1.6, 10_000, 97, None).unwrap();
        assert_eq!(r, again);
        assert!(matches!(ransac_register(&exact[..2], 1.6, 10, 0, None), Err(Error::InsufficientPairs(2))));
    }

    #[test]
    fn pose_error_examples() {
        let gt = RigidTransform::from_yaw(0.3, Vector3::new(1.0, 2.0, 3.0));
        let e = evaluate_pose(&gt, &gt).unwrap();
        assert!(e.rre_deg.abs() < 1e-6 && e.rte == 0.0 && e.success);
        let est = RigidTransform::from_yaw(5f64.to_radians(), Vector3::zeros()).compose(&RigidTransform::from_yaw(0.3, Vector3::zeros()));
        let est = RigidTransform::new(*est.rotation(), *gt.translation()).unwrap();
        let e = evaluate_pose(&est, &gt).unwrap();
        assert!((e.rre_deg - 5.0).abs() < 1e-9, "{}", e.rre_deg);
        assert!(!e.success);
        let shifted = RigidTransform::new(*gt.rotation(), gt.translation() + Vector3::new(0.0, 1.9, 0.0)).unwrap();
        let e = evaluate_pose(&shifted, &gt).unwrap();
        assert!((e.rte - 1.9).abs() < 1e-12 && e.success);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn sinkhorn_conserves_mass(seed in 0u64..10_000, m in 1usize..12, n in 1usize..12, alpha in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let z = sinkhorn(&c, alpha, 100).unwrap();
            check_marginals(&z, 1e-6);
        }

        #[test]
        fn kabsch_is_exact(seed in 0u64..100_000, flat in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t0 = random_transform(&mut rng);
            let qs: Vec<_> = random_points(&mut rng, 6, 10.0)
                .into_iter()
                .map(|q| Point3::new(q.x, q.y, q.z * flat))
                .collect();
            let est = weighted_kabsch(&pairs_under(&t0, &qs)).unwrap();
            prop_assert!((est.rotation() - t0.rotation()).norm() < 1e-9);
            prop_assert!((est.translation() - t0.translation()).norm() < 1e-9);
            prop_assert!((est.rotation().determinant() - 1.0).abs() < 1e-12);
        }
    }
}
