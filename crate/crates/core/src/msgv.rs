//! Multi-scale geometric verification.
//!
//! For each pyramid level the query and candidate features are matched by
//! nearest neighbour, the pairwise length consistency of those matches is
//! collected in a matrix, and its leading eigenvector scores how strongly
//! each match belongs to a rigidly consistent cluster. Sorted, min-max
//! normalised eigenvectors from all levels collapse into one fitness `β`
//! through a weighted head mean; candidates are re-ordered by `β`.

use nalgebra::{DMatrix, DVector, Point3};
use serde::{Deserialize, Serialize};

use crate::descriptors::{FeatureLevel, FeaturePyramid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsgvConfig {
    /// Correspondence cap per level, finest first.
    pub lambdas: Vec<usize>,
    pub sigma_d: f64,
    /// Per-level weights of the fitness functional; must sum to 1.
    pub weights: Vec<f64>,
    pub head_fraction: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MsgvConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![512, 256, 128],
            sigma_d: 1.6,
            weights: vec![1.0 / 3.0; 3],
            head_fraction: 0.25,
            tol: 1e-8,
            max_iter: 1000,
        }
    }
}

impl MsgvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.contains(&0) {
            return Err(Error::Config("msgv.lambdas must be non-empty and ≥ 1".into()));
        }
        if !(self.sigma_d.is_finite() && self.sigma_d > 0.0) {
            return Err(Error::InvalidSigma(self.sigma_d));
        }
        check_weights(&self.weights, self.lambdas.len())?;
        if !(self.head_fraction > 0.0 && self.head_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "msgv.head_fraction must lie in (0, 1], got {}",
                self.head_fraction
            )));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("msgv.tol and msgv.max_iter must be positive".into()));
        }
        Ok(())
    }

    /// Same settings restricted to one level: that level keeps all weight.
    pub fn single_scale(&self, level: usize) -> Self {
        let mut weights = vec![0.0; self.lambdas.len()];
        weights[level] = 1.0;
        Self {
            weights,
            ..self.clone()
        }
    }
}

fn check_weights(weights: &[f64], scales: usize) -> Result<()> {
    if weights.len() != scales {
        return Err(Error::WeightMismatch(format!(
            "{} weights for {scales} scales",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::WeightMismatch(format!("negative or non-finite weight in {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::WeightMismatch(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correspondence {
    pub q_index: usize,
    pub p_index: usize,
    pub q: Point3<f64>,
    pub p: Point3<f64>,
    pub distance: f64,
}

/// Matches of one level, sorted by ascending descriptor distance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleCorrespondences {
    pub level: usize,
    pub pairs: Vec<Correspondence>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest candidate feature for every query feature; the `lambda` closest
/// pairs survive. Ties break on query index, then candidate index.
pub fn match_scale(fq: &FeatureLevel, fp: &FeatureLevel, lambda: usize, level: usize) -> Result<ScaleCorrespondences> {
    if fq.is_empty() || fp.is_empty() {
        return Err(Error::EmptyFeatures);
    }
    if fq.dim() != fp.dim() {
        return Err(Error::DimMismatch {
            expected: fq.dim(),
            got: fp.dim(),
        });
    }
    if lambda == 0 {
        return Err(Error::Config("lambda must be at least 1".into()));
    }
    // Screening distances come from blocked single-precision matrix
    // products; every candidate within a slack that covers the rounding
    // error is rescored exactly, so the result equals a brute-force scan.
    const BLOCK: usize = 256;
    let dim = fq.dim();
    let p_mat = DMatrix::from_row_slice(fp.len(), dim, fp.raw_descriptors()).map(|x| x as f32);
    let p_norms: Vec<f32> = fp.descriptors().map(|d| d.iter().map(|x| x * x).sum::<f64>() as f32).collect();
    let p_norm_max = p_norms.iter().copied().fold(0.0f32, f32::max) as f64;
    let mut pairs: Vec<Correspondence> = Vec::with_capacity(fq.len());
    for start in (0..fq.len()).step_by(BLOCK) {
        let end = (start + BLOCK).min(fq.len());
        let q_block =
            DMatrix::from_column_slice(dim, end - start, &fq.raw_descriptors()[start * dim..end * dim]).map(|x| x as f32);
        let dots = &p_mat * &q_block;
        for (col, i) in (start..end).enumerate() {
            let dq = fq.descriptor(i);
            let q_norm: f64 = dq.iter().map(|x| x * x).sum();
            let slack = (1e-4 * (1.0 + q_norm + p_norm_max) * (dim as f64 / 32.0).max(1.0)) as f32;
            // `‖q‖²` is common to the column and left out of the screen.
            let column = &dots.as_slice()[col * fp.len()..(col + 1) * fp.len()];
            let lowest = column
                .iter()
                .zip(&p_norms)
                .fold(f32::INFINITY, |m, (&d, &n)| m.min(n - 2.0 * d));
            let mut best = (f64::INFINITY, 0usize);
            for (j, (&d, &n)) in column.iter().zip(&p_norms).enumerate() {
                if n - 2.0 * d <= lowest + slack {
                    let exact = sq_dist(dq, fp.descriptor(j));
                    if exact < best.0 {
                        best = (exact, j);
                    }
                }
            }
            pairs.push(Correspondence {
                q_index: i,
                p_index: best.1,
                q: fq.centroids()[i],
                p: fp.centroids()[best.1],
                distance: best.0.sqrt(),
            });
        }
    }
    pairs.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.q_index.cmp(&b.q_index))
            .then(a.p_index.cmp(&b.p_index))
    });
    pairs.truncate(lambda);
    Ok(ScaleCorrespondences { level, pairs })
}

/// Length consistency `m_ij = max(1 − σ_ij²/σ_d², 0)` with
/// `σ_ij = | ‖q_i − q_j‖ − ‖p_i − p_j‖ |` and a unit diagonal.
pub fn consistency_matrix(corrs: &ScaleCorrespondences, sigma_d: f64) -> Result<DMatrix<f64>> {
    if !(sigma_d.is_finite() && sigma_d > 0.0) {
        return Err(Error::InvalidSigma(sigma_d));
    }
    let n = corrs.pairs.len();
    if n < 2 {
        return Err(Error::TooFewCorrespondences { needed: 2, got: n });
    }
    let inv = 1.0 / (sigma_d * sigma_d);
    let mut m = DMatrix::identity(n, n);
    for i in 0..n {
        let a = &corrs.pairs[i];
        for j in (i + 1)..n {
            let b = &corrs.pairs[j];
            let s = ((a.q - b.q).norm() - (a.p - b.p).norm()).abs();
            let v = (1.0 - s * s * inv).max(0.0);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Eigenvector {
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration from the uniform vector. Iterates are renormalised to
/// unit L2 length and compared in L∞. A matrix with no dominant direction
/// (identity, constant) leaves the uniform start unchanged.
pub fn leading_eigenvector(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<Eigenvector> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(Error::NonSymmetric(f64::NAN));
    }
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asym > 1e-12 || !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NonSymmetric(asym));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut next = DVector::zeros(n);
    for it in 1..=max_iter {
        next.gemv(1.0, m, &v, 0.0);
        let norm = next.norm();
        if norm == 0.0 {
            return Ok(Eigenvector {
                vector: v.iter().copied().collect(),
                iterations: it,
                converged: true,
            });
        }
        next /= norm;
        let diff = (&next - &v).amax();
        std::mem::swap(&mut v, &mut next);
        if diff < tol {
            return Ok(Eigenvector {
                vector: v.iter().map(|x| x.max(0.0)).collect(),
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(Eigenvector {
        vector: v.iter().map(|x| x.max(0.0)).collect(),
        iterations: max_iter,
        converged: false,
    })
}

/// Sorts descending and min-max scales to `[0, 1]`. A constant vector maps
/// to all ones.
pub fn normalize_sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let (Some(&max), Some(&min)) = (s.first(), s.last()) else {
        return s;
    };
    let range = max - min;
    if range > 0.0 {
        s.iter_mut().for_each(|x| *x = (*x - min) / range);
    } else {
        s.iter_mut().for_each(|x| *x = 1.0);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitnessReport {
    pub beta: f64,
    pub per_scale: Vec<f64>,
}

/// Per scale, the mean of the first `⌈head_fraction · λ_s⌉` entries of the
/// sorted vector zero-padded (or truncated) to `λ_s`; `β` is the weighted
/// sum of those head means.
pub fn fitness_score(normed: &[Vec<f64>], lambdas: &[usize], weights: &[f64], head_fraction: f64) -> Result<FitnessReport> {
    check_weights(weights, normed.len())?;
    if lambdas.len() != normed.len() {
        return Err(Error::WeightMismatch(format!(
            "{} λ values for {} scales",
            lambdas.len(),
            normed.len()
        )));
    }
    if !(head_fraction > 0.0 && head_fraction <= 1.0) {
        return Err(Error::Config(format!("head_fraction must lie in (0, 1], got {head_fraction}")));
    }
    let per_scale: Vec<f64> = normed
        .iter()
        .zip(lambdas)
        .map(|(v, &lambda)| {
            let head = ((head_fraction * lambda as f64).ceil() as usize).clamp(1, lambda);
            let sum: f64 = v.iter().take(head).map(|x| x.clamp(0.0, 1.0)).sum();
            sum / head as f64
        })
        .collect();
    let beta = per_scale.iter().zip(weights).map(|(c, w)| c * w).sum::<f64>().clamp(0.0, 1.0);
    Ok(FitnessReport { beta, per_scale })
}

/// Everything computed for one candidate at one level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyArtifacts {
    pub correspondences: ScaleCorrespondences,
    #[serde(skip)]
    pub matrix: Option<DMatrix<f64>>,
    pub eigvec: Vec<f64>,
    pub eigvec_norm: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// The normalised vector was constant (no dominant cluster).
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateScore {
    pub fitness: FitnessReport,
    pub scales: Vec<ConsistencyArtifacts>,
}

/// Scores one candidate against the query at every configured level.
pub fn score_candidate(query: &FeaturePyramid, cand: &FeaturePyramid, cfg: &MsgvConfig) -> Result<CandidateScore> {
    cfg.validate()?;
    let scales = cfg.lambdas.len();
    if query.num_levels() < scales || cand.num_levels() < scales {
        return Err(Error::Config(format!(
            "msgv configured for {scales} levels but pyramids have {} and {}",
            query.num_levels(),
            cand.num_levels()
        )));
    }
    let mut arts = Vec::with_capacity(scales);
    let mut normed = Vec::with_capacity(scales);
    for s in 0..scales {
        let corrs = match_scale(query.level(s), cand.level(s), cfg.lambdas[s], s)?;
        if corrs.pairs.len() < 2 {
            normed.push(Vec::new());
            arts.push(ConsistencyArtifacts {
                correspondences: corrs,
                matrix: None,
                eigvec: Vec::new(),
                eigvec_norm: Vec::new(),
                iterations: 0,
                converged: true,
                degenerate: true,
            });
            continue;
        }
        let m = consistency_matrix(&corrs, cfg.sigma_d)?;
        let eig = leading_eigenvector(&m, cfg.tol, cfg.max_iter)?;
        let vn = normalize_sorted(&eig.vector);
        let degenerate = vn.first() == vn.last();
        normed.push(vn.clone());
        arts.push(ConsistencyArtifacts {
            correspondences: corrs,
            matrix: Some(m),
            eigvec: eig.vector,
            eigvec_norm: vn,
            iterations: eig.iterations,
            converged: eig.converged,
            degenerate,
        });
    }
    let fitness = fitness_score(&normed, &cfg.lambdas, &cfg.weights, cfg.head_fraction)?;
    Ok(CandidateScore { fitness, scales: arts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RerankEntry {
    /// Position in the input (retrieval) order.
    pub original_rank: usize,
    pub beta: f64,
    pub per_scale: Vec<f64>,
    pub iterations: Vec<usize>,
    pub degenerate: Vec<bool>,
}

/// Candidates in descending `β`; equal scores keep retrieval order.
pub fn rerank(query: &FeaturePyramid, candidates: &[&FeaturePyramid], cfg: &MsgvConfig) -> Result<Vec<RerankEntry>> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = candidates
        .iter()
        .enumerate()
        .map(|(rank, cand)| {
            let score = score_candidate(query, cand, cfg)?;
            Ok(RerankEntry {
                original_rank: rank,
                beta: score.fitness.beta,
                per_scale: score.fitness.per_scale,
                iterations: score.scales.iter().map(|a| a.iterations).collect(),
                degenerate: score.scales.iter().map(|a| a.degenerate).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.beta.total_cmp(&a.beta).then(a.original_rank.cmp(&b.original_rank)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::normalize_in_place;
    use crate::pointcloud::RigidTransform;
    use nalgebra::{SymmetricEigen, Vector3};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corr(q: [f64; 3], p: [f64; 3]) -> Correspondence {
        Correspondence {
            q_index: 0,
            p_index: 0,
            q: Point3::from(q),
            p: Point3::from(p),
            distance: 0.0,
        }
    }

    fn corrs(pairs: Vec<Correspondence>) -> ScaleCorrespondences {
        ScaleCorrespondences { level: 0, pairs }
    }

    fn random_level(rng: &mut impl Rng, n: usize, dim: usize) -> FeatureLevel {
        let mut desc = Vec::new();
        let mut cents = Vec::new();
        for _ in 0..n {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            normalize_in_place(&mut v);
            desc.extend(v);
            cents.push(Point3::new(
                rng.random_range(0.0..30.0),
                rng.random_range(0.0..30.0),
                rng.random_range(0.0..5.0),
            ));
        }
        FeatureLevel::new(cents, desc, dim).unwrap()
    }

    #[test]
    fn identical_sets_self_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_level(&mut rng, 30, 16);
        let c = match_scale(&f, &f, 100, 0).unwrap();
        assert_eq!(c.pairs.len(), 30);
        assert!(c.pairs.iter().all(|p| p.q_index == p.p_index && p.distance == 0.0));
        let one = match_scale(&f, &f, 1, 0).unwrap();
        assert_eq!(one.pairs.len(), 1);
        assert_eq!(one.pairs[0].q_index, 0);
    }

    #[test]
    fn match_scale_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let fq = random_level(&mut rng, 300, 8);
        let fp = random_level(&mut rng, 250, 8);
        let mut oracle = Vec::new();
        for i in 0..fq.len() {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..fp.len() {
                let d: f64 = (0..8).map(|k| (fq.descriptor(i)[k] - fp.descriptor(j)[k]).powi(2)).sum();
                if d < best.0 || (d == best.0 && j < best.1) {
                    best = (d, j);
                }
            }
            oracle.push((best.0.sqrt(), i, best.1));
        }
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        oracle.truncate(128);
        let got = match_scale(&fq, &fp, 128, 0).unwrap();
        let got: Vec<_> = got.pairs.iter().map(|c| (c.distance, c.q_index, c.p_index)).collect();
        assert_eq!(got, oracle);
        assert!(matches!(
            match_scale(&fq, &FeatureLevel::new(vec![], vec![], 8).unwrap(), 5, 0),
            Err(Error::EmptyFeatures)
        ));
    }

    #[test]
    fn match_ties_pick_lowest_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let base = random_level(&mut rng, 40, 8);
        let mut cents = base.centroids().to_vec();
        cents.extend_from_slice(base.centroids());
        let doubled = FeatureLevel::new(cents, [base.raw_descriptors(), base.raw_descriptors()].concat(), 8).unwrap();
        let got = match_scale(&base, &doubled, 1000, 0).unwrap();
        assert_eq!(got.pairs.len(), 40);
        for c in &got.pairs {
            assert_eq!(c.p_index, c.q_index);
            assert_eq!(c.distance, 0.0);
        }
    }

    #[test]
    fn consistency_unit_values() {
        let m = consistency_matrix(&corrs(vec![corr([0.0; 3], [0.0; 3]), corr([5.0, 0.0, 0.0], [0.0, 5.0, 0.0])]), 1.0)
            .unwrap();
        assert_eq!(m[(0, 1)], 1.0);
        let m = consistency_matrix(&corrs(vec![corr([0.0; 3], [0.0; 3]), corr([3.0, 0.0, 0.0], [1.0, 0.0, 0.0])]), 2.0)
            .unwrap();
        assert_eq!(m[(0, 1)], 0.0);
        let m = consistency_matrix(
            &corrs(vec![corr([0.0; 3], [0.0; 3]), corr([10.0, 0.0, 0.0], [0.0, 0.0, 12.0])]),
            5.0,
        )
        .unwrap();
        assert_eq!(m[(0, 1)], 0.84);
        assert_eq!(m[(1, 0)], 0.84);
        assert_eq!(m[(0, 0)], 1.0);
        assert!(matches!(
            consistency_matrix(&corrs(vec![corr([0.0; 3], [0.0; 3])]), 5.0),
            Err(Error::TooFewCorrespondences { .. })
        ));
        assert!(matches!(
            consistency_matrix(&corrs(vec![corr([0.0; 3], [0.0; 3]); 2]), 0.0),
            Err(Error::InvalidSigma(_))
        ));
    }

    #[test]
    fn two_by_two_eigenvector() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let e = leading_eigenvector(&m, 1e-8, 1000).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((e.vector[0] - s).abs() < 1e-8 && (e.vector[1] - s).abs() < 1e-8);
        let id = leading_eigenvector(&DMatrix::identity(5, 5), 1e-8, 1000).unwrap();
        assert!(id.vector.iter().all(|&x| (x - 1.0 / 5f64.sqrt()).abs() < 1e-15));
        assert_eq!(id.iterations, 1);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(leading_eigenvector(&bad, 1e-8, 10), Err(Error::NonSymmetric(_))));
    }

    fn random_consistency(rng: &mut impl Rng, n: usize, inlier_frac: f64, sigma_d: f64) -> (DMatrix<f64>, usize) {
        let t = RigidTransform::from_yaw(rng.random_range(-3.0..3.0), Vector3::new(3.0, -2.0, 0.5));
        let inliers = (n as f64 * inlier_frac).round() as usize;
        let pairs = (0..n)
            .map(|i| {
                let q = Point3::new(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0), rng.random_range(0.0..8.0));
                let p = if i < inliers {
                    t.apply(&q)
                } else {
                    Point3::new(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0), rng.random_range(0.0..8.0))
                };
                corr(q.coords.into(), p.coords.into())
            })
            .collect();
        (consistency_matrix(&corrs(pairs), sigma_d).unwrap(), inliers)
    }

    #[test]
    fn eigenvector_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (m, _) = random_consistency(&mut rng, 8, 0.5, 5.0);
        let e = leading_eigenvector(&m, 1e-8, 1000).unwrap();
        let eig = SymmetricEigen::new(m.clone());
        let top = eig.eigenvalues.imax();
        let oracle = eig.eigenvectors.column(top);
        let sign = oracle.sum().signum();
        for (a, b) in e.vector.iter().zip(oracle.iter()) {
            assert!((a - sign * b).abs() < 1e-6);
        }
        let v = DVector::from_vec(e.vector.clone());
        let lambda = (v.transpose() * &m * &v)[(0, 0)];
        let mean_row = m.row_iter().map(|r| r.sum()).sum::<f64>() / 8.0;
        assert!(lambda >= mean_row - 1e-12);
        assert!(((&m * &v) - lambda * &v).amax() < 1e-6 * m.norm());
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_sorted(&[0.2, 0.8, 0.5]);
        for (a, b) in n.iter().zip([1.0, 0.5, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(normalize_sorted(&[0.3, 0.3, 0.3]), vec![1.0, 1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let v: Vec<f64> = (0..512).map(|_| rng.random()).collect();
        let n = normalize_sorted(&v);
        let mut oracle = v.clone();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(n[0], 1.0);
        assert_eq!(n[511], 0.0);
        assert!(n.windows(2).all(|w| w[0] >= w[1]));
        let (hi, lo) = (oracle[0], oracle[511]);
        for (a, o) in n.iter().zip(&oracle) {
            assert!((a - (o - lo) / (hi - lo)).abs() < 1e-15);
        }
    }

    #[test]
    fn fitness_examples() {
        let ones = vec![vec![1.0; 8], vec![1.0; 4]];
        let r = fitness_score(&ones, &[8, 4], &[0.5, 0.5], 0.25).unwrap();
        assert_eq!(r.beta, 1.0);
        // λ = 8 and head 0.25 → head of 2 entries → (1 + 0) / 2.
        let spike = vec![vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]; 2];
        let r = fitness_score(&spike, &[8, 8], &[0.5, 0.5], 0.25).unwrap();
        assert_eq!(r.beta, 0.5);
        // λ = 12, head 0.5 → 6 entries: (1 + 0.8 + 0.2) / 6 on one scale,
        // 1/6 on the other, weights 0.25 / 0.75.
        let a = vec![1.0, 0.8, 0.2, 0.0];
        let b = vec![1.0];
        let r = fitness_score(&[a, b], &[12, 12], &[0.25, 0.75], 0.5).unwrap();
        assert!((r.beta - (0.25 * 2.0 / 6.0 + 0.75 / 6.0)).abs() < 1e-15);
        let two = fitness_score(&[vec![0.4], vec![0.8]], &[1, 1], &[0.5, 0.5], 1.0).unwrap();
        assert!((two.beta - 0.6).abs() < 1e-15);
        assert!(matches!(
            fitness_score(&ones, &[8, 4], &[0.5, 0.6], 0.25),
            Err(Error::WeightMismatch(_))
        ));
        assert!(matches!(
            fitness_score(&ones, &[8, 4], &[1.0], 0.25),
            Err(Error::WeightMismatch(_))
        ));
    }

    fn random_pyramid(rng: &mut impl Rng) -> FeaturePyramid {
        let levels = vec![random_level(rng, 120, 16), random_level(rng, 40, 16), random_level(rng, 12, 16)];
        FeaturePyramid::from_levels(levels, 3.0).unwrap()
    }

    #[test]
    fn single_candidate_keeps_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_pyramid(&mut rng);
        let c = random_pyramid(&mut rng);
        let r = rerank(&q, &[&c], &MsgvConfig::default()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].original_rank, 0);
        assert!((0.0..=1.0).contains(&r[0].beta));
    }

    #[test]
    fn identical_beats_permuted_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let q = random_pyramid(&mut rng);
        let permuted_levels: Vec<_> = q
            .levels()
            .iter()
            .map(|l| {
                let mut cents = l.centroids().to_vec();
                cents.shuffle(&mut rng);
                FeatureLevel::new(cents, l.raw_descriptors().to_vec(), l.dim()).unwrap()
            })
            .collect();
        let permuted = FeaturePyramid::from_parts(permuted_levels, q.global().to_vec()).unwrap();
        let r = rerank(&q, &[&permuted, &q], &MsgvConfig::default()).unwrap();
        assert_eq!(r[0].original_rank, 1);
        assert!(r[0].beta > r[1].beta);
    }

    #[test]
    fn planted_inliers_score_higher() {
        let mut wins = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let (m, inliers) = random_consistency(&mut rng, 256, 0.3, 1.6);
            let v = leading_eigenvector(&m, 1e-8, 1000).unwrap().vector;
            let mean_in = v[..inliers].iter().sum::<f64>() / inliers as f64;
            let mean_out = v[inliers..].iter().sum::<f64>() / (256 - inliers) as f64;
            wins += (mean_in > mean_out) as usize;
        }
        assert!(wins >= 99, "{wins}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn matrix_is_rigid_invariant(seed in 0u64..10_000, yaw in -3.0f64..3.0, tx in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = corrs((0..40).map(|_| corr(
                [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), rng.random_range(0.0..4.0)],
                [rng.random_range(0.0..20.0), rng.random_range(0.0..20.0), rng.random_range(0.0..4.0)],
            )).collect());
            let t = RigidTransform::from_axis_angle(&Vector3::new(0.2, 0.1, 1.0), yaw, Vector3::new(tx, 1.0, -2.0));
            let moved = corrs(c.pairs.iter().map(|x| Correspondence { p: t.apply(&x.p), ..*x }).collect());
            let a = consistency_matrix(&c, 1.6).unwrap();
            let b = consistency_matrix(&moved, 1.6).unwrap();
            prop_assert!((a - b).amax() < 1e-9);
        }

        #[test]
        fn beta_is_monotone(
            v in prop::collection::vec(0.0f64..1.0, 1..40),
            bump in prop::collection::vec(0.0f64..0.5, 40),
            hf in 0.05f64..1.0,
        ) {
            let mut s = v.clone();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let bumped: Vec<f64> = s.iter().zip(&bump).map(|(x, b)| (x + b).min(1.0)).collect();
            let a = fitness_score(&[s.clone()], &[40], &[1.0], hf).unwrap();
            let b = fitness_score(&[bumped], &[40], &[1.0], hf).unwrap();
            prop_assert!(b.beta >= a.beta);
            prop_assert!((0.0..=1.0).contains(&a.beta));
        }

        #[test]
        fn rerank_preserves_candidate_set(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_pyramid(&mut rng);
            let cands: Vec<_> = (0..4).map(|_| random_pyramid(&mut rng)).collect();
            let refs: Vec<_> = cands.iter().collect();
            let r = rerank(&q, &refs, &MsgvConfig::default()).unwrap();
            let mut ranks: Vec<_> = r.iter().map(|e| e.original_rank).collect();
            ranks.sort();
            prop_assert_eq!(ranks, vec![0, 1, 2, 3]);
            prop_assert!(r.windows(2).all(|w| w[0].beta >= w[1].beta));
        }
    }
}
