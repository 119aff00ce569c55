//! Exact global-descriptor retrieval and Recall@k.

use std::collections::HashSet;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::descriptors::{self, FeaturePyramid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub id: String,
    pub position: Point3<f64>,
    pub features: FeaturePyramid,
}

/// Entries in insertion order. Local feature pyramids are kept next to the
/// globals so re-ranking and registration can run from the database alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescriptorDB {
    entries: Vec<DbEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub id: String,
    /// Position of the entry in the database.
    pub index: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub query_id: Option<String>,
    pub candidates: Vec<Candidate>,
}

pub fn build_database(items: Vec<(String, FeaturePyramid, Point3<f64>)>) -> Result<DescriptorDB> {
    let mut seen = HashSet::new();
    let mut dim = None;
    let mut entries = Vec::with_capacity(items.len());
    for (id, features, position) in items {
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let d = features.global().len();
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => return Err(Error::DimMismatch { expected, got: d }),
            _ => {}
        }
        if !position.iter().all(|v| v.is_finite()) {
            return Err(Error::PositionMissing(id));
        }
        entries.push(DbEntry {
            id,
            position,
            features,
        });
    }
    Ok(DescriptorDB { entries })
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    position: [f64; 3],
}

pub const INDEX_FILE: &str = "index.json";
pub const DESCRIPTOR_FILE: &str = "descriptors.bin";

impl DescriptorDB {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> &DbEntry {
        &self.entries[i]
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    /// Global descriptor dimension, `None` when empty.
    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.features.global().len())
    }

    /// Writes `index.json` (ids, positions) and `descriptors.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let index = IndexFile {
            version: descriptors::CONTAINER_VERSION,
            entries: self
                .entries
                .iter()
                .map(|e| IndexEntry {
                    id: e.id.clone(),
                    position: [e.position.x, e.position.y, e.position.z],
                })
                .collect(),
        };
        let path = dir.join(INDEX_FILE);
        let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

        let path = dir.join(DESCRIPTOR_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let pyramids: Vec<FeaturePyramid> = self.entries.iter().map(|e| e.features.clone()).collect();
        let mut w = BufWriter::new(file);
        descriptors::write_container(&mut w, &pyramids)
            .and_then(|_| std::io::Write::flush(&mut w))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: IndexFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        let path = dir.join(DESCRIPTOR_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let pyramids = descriptors::parse_container(&bytes)?;
        if pyramids.len() != index.entries.len() {
            return Err(Error::Data(format!(
                "{} index entries but {} descriptor records",
                index.entries.len(),
                pyramids.len()
            )));
        }
        build_database(
            index
                .entries
                .into_iter()
                .zip(pyramids)
                .map(|(e, f)| (e.id, f, Point3::from(e.position)))
                .collect(),
        )
    }
}

/// Exact cosine ranking. Ties go to the smaller id; an empty database yields
/// an empty result.
pub fn query_topk(db: &DescriptorDB, query: &[f64], k: usize) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if let Some(d) = db.dim() {
        if d != query.len() {
            return Err(Error::DimMismatch {
                expected: d,
                got: query.len(),
            });
        }
    }
    let mut scored: Vec<Candidate> = db
        .entries
        .iter()
        .enumerate()
        .map(|(index, e)| Candidate {
            id: e.id.clone(),
            index,
            similarity: descriptors::cosine(query, e.features.global()),
        })
        .collect();
    let by_rank = |a: &Candidate, b: &Candidate| b.similarity.total_cmp(&a.similarity).then_with(|| a.id.cmp(&b.id));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_rank);
        scored.truncate(k);
    }
    scored.sort_by(by_rank);
    Ok(RetrievalResult {
        query_id: None,
        candidates: scored,
    })
}

/// Percentage of queries with at least one of their top-`k` candidates
/// within `r` metres of the query position.
pub fn recall_at_k(
    results: &[RetrievalResult],
    db: &DescriptorDB,
    query_positions: &[Point3<f64>],
    r: f64,
    k: usize,
) -> Result<f64> {
    if results.len() != query_positions.len() {
        return Err(Error::PositionMissing(format!(
            "{} results but {} query positions",
            results.len(),
            query_positions.len()
        )));
    }
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut hits = 0usize;
    for (res, qpos) in results.iter().zip(query_positions) {
        let mut hit = false;
        for c in res.candidates.iter().take(k) {
            let entry = db
                .entries
                .get(c.index)
                .filter(|e| e.id == c.id)
                .ok_or_else(|| Error::PositionMissing(c.id.clone()))?;
            if (entry.position - qpos).norm() <= r {
                hit = true;
                break;
            }
        }
        hits += hit as usize;
    }
    Ok(100.0 * hits as f64 / results.len() as f64)
}
