use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use hierloc::config::PipelineConfig;
use hierloc::harness::bench::{run_benchmark, write_report};
use hierloc::harness::dataset::{Dataset, DATABASE_DIR, POSES_FILE};
use hierloc::harness::synth::synthetic_suite;
use hierloc::harness::timing::time_stage;
use hierloc::harness::{parallel_map, prepare, worker_count};
use hierloc::msgv::{match_scale, rerank};
use hierloc::pointcloud::{load_cloud, CloudFormat, PointCloud, RigidTransform};
use hierloc::registration::{evaluate_pose, ransac_register, register_features, RegistrationResult};
use hierloc::retrieval::{build_database, query_topk, DescriptorDB};
use hierloc::{Error, Result};

#[derive(Parser)]
#[command(name = "hierloc", version, about = "Place recognition re-ranking and point-cloud registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `bench.pairs`.
        #[arg(long)]
        pairs: Option<usize>,
        /// Overrides `bench.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "ply")]
        format: String,
    },
    /// Descriptor database management.
    Db {
        #[command(subcommand)]
        command: DbCommand,
    },
    /// Retrieve the top-k candidates and re-rank them geometrically.
    Rerank {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Estimate the pose mapping the query cloud onto the target cloud.
    Register {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Method::Lgr)]
        method: Method,
        /// JSON file holding the true 4×4 query-to-target transform.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Run the end-to-end benchmark and write its reports.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; a synthetic suite is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "bench_out")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DbCommand {
    /// Extract descriptors for a directory of clouds.
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Global-descriptor retrieval for one cloud.
    Query {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Lgr,
    Ransac,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    load_cloud(path, CloudFormat::detect(path)?)
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serialises"));
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            config,
            pairs,
            seed,
            format,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(p) = pairs {
                cfg.bench.pairs = p;
            }
            if let Some(s) = seed {
                cfg.bench.seed = s;
            }
            let format: CloudFormat = format.parse()?;
            let data = synthetic_suite(&cfg.bench)?;
            data.save(&out, format)?;
            print_json(&json!({
                "out": out,
                "database": data.database.len(),
                "queries": data.queries.len(),
            }));
            Ok(())
        }
        Command::Db { command } => match command {
            DbCommand::Build { input, out, config } => db_build(&input, &out, &load_config(config.as_deref())?),
            DbCommand::Query { db, cloud, k, config } => {
                let cfg = load_config(config.as_deref())?;
                let db = DescriptorDB::load(&db)?;
                let q = prepare(&read_cloud(&cloud)?, &cfg)?;
                let res = query_topk(&db, q.features.global(), k)?;
                let candidates: Vec<_> = res
                    .candidates
                    .iter()
                    .map(|c| {
                        let p = db.get(c.index).position;
                        json!({ "id": c.id, "similarity": c.similarity, "position": [p.x, p.y, p.z] })
                    })
                    .collect();
                print_json(&json!({ "query": cloud, "candidates": candidates }));
                Ok(())
            }
        },
        Command::Rerank { db, query, k, config } => {
            let cfg = load_config(config.as_deref())?;
            let db = DescriptorDB::load(&db)?;
            let q = prepare(&read_cloud(&query)?, &cfg)?;
            let found = query_topk(&db, q.features.global(), k)?;
            if found.candidates.is_empty() {
                return Err(Error::EmptyDatabase);
            }
            let cands: Vec<_> = found.candidates.iter().map(|c| &db.get(c.index).features).collect();
            let order = rerank(&q.features, &cands, &cfg.msgv)?;
            let ranked: Vec<_> = order
                .iter()
                .map(|e| {
                    let c = &found.candidates[e.original_rank];
                    json!({
                        "id": c.id,
                        "beta": e.beta,
                        "per_scale": e.per_scale,
                        "iterations": e.iterations,
                        "retrieval_rank": e.original_rank,
                        "similarity": c.similarity,
                    })
                })
                .collect();
            print_json(&json!({ "query": query, "candidates": ranked }));
            Ok(())
        }
        Command::Register {
            query,
            target,
            config,
            method,
            gt,
        } => register(&query, &target, &load_config(config.as_deref())?, method, gt.as_deref()),
        Command::Bench { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = match &data {
                Some(dir) => Dataset::load(dir)?,
                None => synthetic_suite(&cfg.bench)?,
            };
            let report = run_benchmark(&dataset, &cfg)?;
            write_report(&out, &report)?;
            let m = &report.metrics;
            print_json(&json!({
                "out": out,
                "queries": m.queries,
                "failed_queries": m.failed_queries,
                "recall_before": m.recall_before,
                "recall_after": m.recall_after,
                "localisation_before": m.localisation_before,
                "localisation_after": m.localisation_after,
                "stages_ms": report.timing.stages,
            }));
            Ok(())
        }
    }
}

/// Accepts either a dataset root (uses its `database/` part) or a flat
/// directory of clouds with a `poses.json` mapping id to 4×4 pose.
fn db_build(input: &Path, out: &Path, cfg: &PipelineConfig) -> Result<()> {
    let frames: Vec<(String, PointCloud, RigidTransform)> = if input.join(DATABASE_DIR).is_dir() {
        Dataset::load(input)?
            .database
            .into_iter()
            .map(|f| (f.id, f.cloud, f.pose))
            .collect()
    } else {
        let poses_path = input.join(POSES_FILE);
        let text = std::fs::read_to_string(&poses_path).map_err(|e| Error::Data(format!("{}: {e}", poses_path.display())))?;
        let poses: BTreeMap<String, RigidTransform> =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", poses_path.display())))?;
        let mut frames = Vec::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::Data(format!("{}: {e}", input.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ply" | "xyz")))
            .collect();
        paths.sort();
        for path in paths {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let pose = *poses.get(&id).ok_or_else(|| Error::PositionMissing(id.clone()))?;
            frames.push((id, read_cloud(&path)?, pose));
        }
        frames
    };
    if frames.is_empty() {
        return Err(Error::Data(format!("no clouds found under {}", input.display())));
    }
    let workers = worker_count(cfg.bench.threads);
    let prepared = parallel_map(&frames, workers, |(_, cloud, _)| prepare(cloud, cfg));
    let mut items = Vec::with_capacity(frames.len());
    for ((id, _, pose), prep) in frames.into_iter().zip(prepared) {
        items.push((id, prep?.features, nalgebra::Point3::from(*pose.translation())));
    }
    let db = build_database(items)?;
    db.save(out)?;
    print_json(&json!({ "out": out, "entries": db.len(), "dim": db.dim() }));
    Ok(())
}

#[derive(Serialize)]
struct RegisterOutput {
    method: &'static str,
    transform: RigidTransform,
    inlier_count: usize,
    inlier_ratio: f64,
    correspondences: usize,
    hypotheses: usize,
    rre_deg: Option<f64>,
    rte: Option<f64>,
    success: Option<bool>,
    stages_ms: BTreeMap<&'static str, f64>,
}

fn register(query: &Path, target: &Path, cfg: &PipelineConfig, method: Method, gt: Option<&Path>) -> Result<()> {
    let gt = gt
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<RigidTransform>(&text).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        })
        .transpose()?;
    let (prepared, extract_ms) = time_stage(|| -> Result<_> {
        Ok((prepare(&read_cloud(query)?, cfg)?, prepare(&read_cloud(target)?, cfg)?))
    });
    let (q, p) = prepared?;
    let mut stages = BTreeMap::from([("extract", extract_ms)]);
    let (res, name): (RegistrationResult, _) = match method {
        Method::Lgr => {
            let (res, ms) = time_stage(|| register_features(&q.octree, &q.features, &p.octree, &p.features, &cfg.reg));
            stages.insert("register", ms);
            (res?.0, "lgr")
        }
        Method::Ransac => {
            let (pairs, ms) = time_stage(|| {
                let fq = q.features.level(0);
                match_scale(fq, p.features.level(0), fq.len(), 0)
            });
            stages.insert("match", ms);
            let pairs: Vec<_> = pairs?.pairs.iter().map(|c| (c.q, c.p)).collect();
            let (res, ms) = time_stage(|| {
                ransac_register(&pairs, cfg.reg.tau_a, cfg.reg.ransac_iters, cfg.reg.ransac_seed, cfg.reg.ransac_confidence)
            });
            stages.insert("register", ms);
            (res?, "ransac")
        }
    };
    let err = gt.map(|g| evaluate_pose(&res.transform, &g)).transpose()?;
    print_json(&RegisterOutput {
        method: name,
        transform: res.transform,
        inlier_count: res.inlier_count,
        inlier_ratio: res.inlier_ratio,
        correspondences: res.correspondences,
        hypotheses: res.candidate_count,
        rre_deg: err.map(|e| e.rre_deg),
        rte: err.map(|e| e.rte),
        success: err.map(|e| e.success),
        stages_ms: stages,
    });
    Ok(())
}
