//! End-to-end evaluation: extract → retrieve top-k → re-rank → register.
//!
//! Every query is processed independently and may fail on its own; the
//! failure is stored in its record and the run continues. Aggregates are a
//! plain reduction over the records in query order, so the metric part of
//! the report is identical for any worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Point3;
use serde::Serialize;

use super::dataset::Dataset;
use super::timing::{time_stage, StageStats};
use super::{parallel_map, prepare, worker_count, Prepared};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::msgv::rerank;
use crate::octree::build_pyramid;
use crate::pointcloud::{PointCloud, RigidTransform};
use crate::registration::{evaluate_pose, register_features};
use crate::retrieval::{build_database, query_topk, DescriptorDB};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedCandidate {
    pub id: String,
    pub similarity: f64,
    /// Distance between candidate and query positions (metres).
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RerankedCandidate {
    pub id: String,
    /// Rank before re-ranking (0-based).
    pub original_rank: usize,
    pub beta: f64,
    pub per_scale: Vec<f64>,
}

/// Registration of the query against one top-1 candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Localisation {
    pub candidate: String,
    pub distance: f64,
    /// Candidate lies within the recall threshold.
    pub place_correct: bool,
    pub rre_deg: Option<f64>,
    pub rte: Option<f64>,
    pub success: bool,
    pub inliers: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRecord {
    pub id: String,
    pub octants: Vec<usize>,
    /// Some database entry lies within the recall threshold.
    pub has_positive: bool,
    pub retrieved: Vec<RetrievedCandidate>,
    pub reranked: Vec<RerankedCandidate>,
    pub before: Option<Localisation>,
    pub after: Option<Localisation>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecallStats {
    /// Queries with at least one positive in the database.
    pub evaluated: usize,
    pub at1: f64,
    pub at5: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocAggregate {
    /// Queries in this group.
    pub pairs: usize,
    /// Queries with a pose estimate.
    pub registered: usize,
    /// Percentage of `pairs` registered within the success thresholds.
    pub success_rate: f64,
    pub mean_rre_deg: Option<f64>,
    pub mean_rte: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocStats {
    /// Every query.
    pub all: LocAggregate,
    /// Queries whose top-1 candidate is the right place.
    pub pr_success: LocAggregate,
}

/// The deterministic part of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub config: PipelineConfig,
    pub queries: usize,
    pub database: usize,
    pub failed_queries: usize,
    pub recall_before: RecallStats,
    pub recall_after: RecallStats,
    pub localisation_before: LocStats,
    pub localisation_after: LocStats,
    pub records: Vec<QueryRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct QueryTiming {
    pub extract: f64,
    pub retrieve: f64,
    pub rerank: f64,
    pub register: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub workers: usize,
    pub database_build_ms: f64,
    /// Per-query stage statistics in milliseconds.
    pub stages: BTreeMap<String, StageStats>,
    pub per_query: Vec<QueryTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub metrics: Metrics,
    pub timing: TimingReport,
}

struct QueryOutput {
    record: QueryRecord,
    timing: QueryTiming,
}

struct Context<'a> {
    cfg: &'a PipelineConfig,
    db: DescriptorDB,
    clouds: Vec<PointCloud>,
    poses: Vec<RigidTransform>,
}

/// Runs the full pipeline for every query of `data`.
pub fn run_benchmark(data: &Dataset, cfg: &PipelineConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    if data.database.len() < 2 {
        return Err(Error::Data(format!(
            "benchmark needs at least 2 database entries, got {}",
            data.database.len()
        )));
    }
    if data.queries.is_empty() {
        return Err(Error::Data("benchmark needs at least one query".into()));
    }
    let workers = worker_count(cfg.bench.threads);

    let (prepared, database_build_ms) = time_stage(|| parallel_map(&data.database, workers, |f| prepare(&f.cloud, cfg)));
    let mut items = Vec::with_capacity(prepared.len());
    let mut clouds = Vec::with_capacity(prepared.len());
    for (frame, prep) in data.database.iter().zip(prepared) {
        let Prepared { cloud, features, .. } = prep.map_err(|e| Error::Data(format!("database entry {}: {e}", frame.id)))?;
        items.push((frame.id.clone(), features, frame.position()));
        clouds.push(cloud);
    }
    let ctx = Context {
        cfg,
        db: build_database(items)?,
        clouds,
        poses: data.database.iter().map(|f| f.pose).collect(),
    };

    let outputs = parallel_map(&data.queries, workers, |q| run_query(&ctx, &q.id, &q.cloud, &q.pose));
    let (records, per_query): (Vec<_>, Vec<_>) = outputs.into_iter().map(|o| (o.record, o.timing)).unzip();
    let metrics = aggregate(cfg, ctx.db.len(), records);

    let mut stages = BTreeMap::new();
    let series: [StageSeries; 5] = [
        ("extract", |t| t.extract),
        ("retrieve", |t| t.retrieve),
        ("rerank", |t| t.rerank),
        ("register", |t| t.register),
        ("total", |t| t.total),
    ];
    for (name, get) in series {
        let samples: Vec<f64> = per_query.iter().map(get).collect();
        stages.insert(name.to_string(), StageStats::from_samples(&samples));
    }
    Ok(BenchmarkReport {
        metrics,
        timing: TimingReport {
            workers,
            database_build_ms,
            stages,
            per_query,
        },
    })
}

fn run_query(ctx: &Context, id: &str, cloud: &PointCloud, pose: &RigidTransform) -> QueryOutput {
    let mut timing = QueryTiming::default();
    let mut record = QueryRecord {
        id: id.to_string(),
        octants: Vec::new(),
        has_positive: false,
        retrieved: Vec::new(),
        reranked: Vec::new(),
        before: None,
        after: None,
        error: None,
    };
    let position = Point3::from(*pose.translation());
    let threshold = ctx.cfg.bench.recall_threshold;
    record.has_positive = ctx.db.entries().iter().any(|e| (e.position - position).norm() <= threshold);
    if let Err(e) = query_pipeline(ctx, cloud, pose, &mut record, &mut timing) {
        record.error = Some(e.to_string());
    }
    timing.total = timing.extract + timing.retrieve + timing.rerank + timing.register;
    QueryOutput { record, timing }
}

fn query_pipeline(
    ctx: &Context,
    cloud: &PointCloud,
    pose: &RigidTransform,
    record: &mut QueryRecord,
    timing: &mut QueryTiming,
) -> Result<()> {
    let cfg = ctx.cfg;
    let position = Point3::from(*pose.translation());
    let (q, ms) = time_stage(|| prepare(cloud, cfg));
    timing.extract = ms;
    let q = q?;
    record.octants = q.octree.stats();

    let (found, ms) = time_stage(|| query_topk(&ctx.db, q.features.global(), cfg.bench.k));
    timing.retrieve = ms;
    let found = found?;
    record.retrieved = found
        .candidates
        .iter()
        .map(|c| RetrievedCandidate {
            id: c.id.clone(),
            similarity: c.similarity,
            distance: (ctx.db.get(c.index).position - position).norm(),
        })
        .collect();
    let Some(first) = found.candidates.first() else {
        return Err(Error::EmptyDatabase);
    };

    let (order, ms) = time_stage(|| {
        let cands: Vec<_> = found.candidates.iter().map(|c| &ctx.db.get(c.index).features).collect();
        rerank(&q.features, &cands, &cfg.msgv)
    });
    timing.rerank = ms;
    let order = order?;
    record.reranked = order
        .iter()
        .map(|e| RerankedCandidate {
            id: found.candidates[e.original_rank].id.clone(),
            original_rank: e.original_rank,
            beta: e.beta,
            per_scale: e.per_scale.clone(),
        })
        .collect();

    let before_idx = first.index;
    let after_idx = found.candidates[order[0].original_rank].index;
    let (locs, ms) = time_stage(|| {
        let before = localise(ctx, &q, pose, before_idx);
        let after = if after_idx == before_idx {
            before.clone()
        } else {
            localise(ctx, &q, pose, after_idx)
        };
        (before, after)
    });
    timing.register = ms;
    record.before = Some(locs.0);
    record.after = Some(locs.1);
    Ok(())
}

fn localise(ctx: &Context, q: &Prepared, query_pose: &RigidTransform, idx: usize) -> Localisation {
    let entry = ctx.db.get(idx);
    let distance = (entry.position - Point3::from(*query_pose.translation())).norm();
    let mut loc = Localisation {
        candidate: entry.id.clone(),
        distance,
        place_correct: distance <= ctx.cfg.bench.recall_threshold,
        rre_deg: None,
        rte: None,
        success: false,
        inliers: None,
        error: None,
    };
    let result = (|| {
        let octree = build_pyramid(&ctx.clouds[idx], ctx.cfg.octree.depth_finest, ctx.cfg.octree.num_levels)?;
        let (res, _) = register_features(&q.octree, &q.features, &octree, &entry.features, &ctx.cfg.reg)?;
        let gt = ctx.poses[idx].inverse().compose(query_pose);
        Ok::<_, Error>((res.inlier_count, evaluate_pose(&res.transform, &gt)?))
    })();
    match result {
        Ok((inliers, err)) => {
            loc.rre_deg = Some(err.rre_deg);
            loc.rte = Some(err.rte);
            loc.success = err.success;
            loc.inliers = Some(inliers);
        }
        Err(e) => loc.error = Some(e.to_string()),
    }
    loc
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn loc_aggregate<'a>(locs: impl Iterator<Item = Option<&'a Localisation>> + Clone) -> LocAggregate {
    let pairs = locs.clone().count();
    let est = || locs.clone().flatten().filter(|l| l.rte.is_some());
    LocAggregate {
        pairs,
        registered: est().count(),
        success_rate: percent(locs.clone().flatten().filter(|l| l.success).count(), pairs),
        mean_rre_deg: mean(est().filter_map(|l| l.rre_deg)),
        mean_rte: mean(est().filter_map(|l| l.rte)),
    }
}

fn recall(records: &[QueryRecord], threshold: f64, ranked: impl Fn(&QueryRecord) -> Vec<f64>) -> RecallStats {
    let evaluated: Vec<_> = records.iter().filter(|r| r.has_positive).collect();
    let hit = |k: usize| {
        evaluated
            .iter()
            .filter(|r| ranked(r).iter().take(k).any(|&d| d <= threshold))
            .count()
    };
    RecallStats {
        evaluated: evaluated.len(),
        at1: percent(hit(1), evaluated.len()),
        at5: percent(hit(5), evaluated.len()),
    }
}

/// Report-level numbers from per-query records.
pub fn aggregate(cfg: &PipelineConfig, database: usize, records: Vec<QueryRecord>) -> Metrics {
    let threshold = cfg.bench.recall_threshold;
    let recall_before = recall(&records, threshold, |r| r.retrieved.iter().map(|c| c.distance).collect());
    let recall_after = recall(&records, threshold, |r| {
        r.reranked.iter().map(|c| r.retrieved[c.original_rank].distance).collect()
    });
    let loc = |pick: fn(&QueryRecord) -> Option<&Localisation>| LocStats {
        all: loc_aggregate(records.iter().map(pick)),
        pr_success: loc_aggregate(
            records
                .iter()
                .map(pick)
                .filter(|l| l.is_some_and(|l| l.place_correct)),
        ),
    };
    Metrics {
        config: cfg.clone(),
        queries: records.len(),
        database,
        failed_queries: records.iter().filter(|r| r.error.is_some()).count(),
        recall_before,
        recall_after,
        localisation_before: loc(|r| r.before.as_ref()),
        localisation_after: loc(|r| r.after.as_ref()),
        records,
    }
}

type StageSeries = (&'static str, fn(&QueryTiming) -> f64);

pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.json";
pub const CSV_FILE: &str = "report.csv";
pub const RECALL_FILE: &str = "recall.tsv";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes `metrics.json` (no timings), `report.json`, `report.csv` and the
/// recall curve `recall.tsv` into `dir`.
pub fn write_report(dir: &Path, report: &BenchmarkReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(METRICS_FILE, serde_json::to_string_pretty(&report.metrics).expect("metrics serialise"))?;
    write(REPORT_FILE, serde_json::to_string_pretty(report).expect("report serialises"))?;

    let mut csv = String::from(
        "query,top1_before,correct_before,rre_before,rte_before,success_before,\
         top1_after,correct_after,rre_after,rte_after,success_after,total_ms,error\n",
    );
    for (r, t) in report.metrics.records.iter().zip(&report.timing.per_query) {
        let cols = |l: &Option<Localisation>| match l {
            Some(l) => format!("{},{},{},{},{}", l.candidate, l.place_correct, opt(l.rre_deg), opt(l.rte), l.success),
            None => ",,,,".into(),
        };
        let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(csv, "{},{},{},{:.3},{}", r.id, cols(&r.before), cols(&r.after), t.total, err);
    }
    write(CSV_FILE, csv)?;

    let threshold = report.metrics.config.bench.recall_threshold;
    let k = report.metrics.config.bench.k;
    let mut tsv = String::from("# k\trecall_before\trecall_after\n");
    let evaluated: Vec<_> = report.metrics.records.iter().filter(|r| r.has_positive).collect();
    for n in 1..=k {
        let hits = |after: bool| {
            evaluated
                .iter()
                .filter(|r| {
                    let d: Vec<f64> = if after {
                        r.reranked.iter().map(|c| r.retrieved[c.original_rank].distance).collect()
                    } else {
                        r.retrieved.iter().map(|c| c.distance).collect()
                    };
                    d.iter().take(n).any(|&d| d <= threshold)
                })
                .count()
        };
        let _ = writeln!(
            tsv,
            "{n}\t{:.4}\t{:.4}",
            percent(hits(false), evaluated.len()),
            percent(hits(true), evaluated.len())
        );
    }
    write(RECALL_FILE, tsv)
}
