//! On-disk benchmark datasets.
//!
//! ```text
//! <root>/
//!   database/<id>.ply      one cloud per place (.ply or .xyz)
//!   queries/<id>.ply
//!   poses.json             {"database": {"<id>": 4x4}, "queries": {"<id>": 4x4}}
//! ```
//!
//! Each pose maps cloud coordinates into a shared world frame, rows first.
//! The translation column is the place position used for recall.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{load_cloud, save_cloud, CloudFormat, PointCloud, RigidTransform};

pub const DATABASE_DIR: &str = "database";
pub const QUERIES_DIR: &str = "queries";
pub const POSES_FILE: &str = "poses.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub cloud: PointCloud,
    /// Cloud frame to world frame.
    pub pose: RigidTransform,
}

impl Frame {
    pub fn position(&self) -> nalgebra::Point3<f64> {
        nalgebra::Point3::from(*self.pose.translation())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub database: Vec<Frame>,
    pub queries: Vec<Frame>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosesFile {
    database: BTreeMap<String, RigidTransform>,
    queries: BTreeMap<String, RigidTransform>,
}

impl Dataset {
    /// Writes clouds in `format` plus the pose file. Existing files with the
    /// same names are overwritten.
    pub fn save(&self, root: &Path, format: CloudFormat) -> Result<()> {
        let ext = match format {
            CloudFormat::XyzText => "xyz",
            CloudFormat::PlyAscii | CloudFormat::PlyBinaryLe => "ply",
        };
        let mut poses = PosesFile::default();
        for (sub, frames, map) in [
            (DATABASE_DIR, &self.database, &mut poses.database),
            (QUERIES_DIR, &self.queries, &mut poses.queries),
        ] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for f in frames {
                if map.insert(f.id.clone(), f.pose).is_some() {
                    return Err(Error::DuplicateId(f.id.clone()));
                }
                save_cloud(&dir.join(format!("{}.{ext}", f.id)), &f.cloud, format)?;
            }
        }
        let path = root.join(POSES_FILE);
        let text = serde_json::to_string_pretty(&poses).expect("poses serialise");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads every `.ply`/`.xyz` file under `database/` and `queries/`,
    /// ordered by id. Every cloud needs a pose.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(POSES_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let poses: PosesFile = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        for pose in poses.database.values().chain(poses.queries.values()) {
            pose.validate()?;
        }
        let database = load_frames(&root.join(DATABASE_DIR), &poses.database)?;
        let queries = load_frames(&root.join(QUERIES_DIR), &poses.queries)?;
        Ok(Self { database, queries })
    }
}

fn load_frames(dir: &Path, poses: &BTreeMap<String, RigidTransform>) -> Result<Vec<Frame>> {
    let mut files: Vec<(String, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("ply" | "xyz")) {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("non-UTF-8 file name {}", path.display())))?
            .to_string();
        files.push((id, path));
    }
    files.sort();
    if let Some(w) = files.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::DuplicateId(w[0].0.clone()));
    }
    files
        .into_iter()
        .map(|(id, path)| {
            let pose = *poses.get(&id).ok_or_else(|| Error::PositionMissing(id.clone()))?;
            let cloud = load_cloud(&path, CloudFormat::detect(&path)?)?;
            Ok(Frame { id, cloud, pose })
        })
        .collect()
}
