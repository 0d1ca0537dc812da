//! Dataset manifests: `{"images": [{"map": ..., "sidecar": ...}, ...]}`,
//! with paths relative to the manifest file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::instances::InstanceMapFile;
use crate::error::{Error, Result};
use crate::eval::{GroundTruthInstances, PredictionSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub map: PathBuf,
    pub sidecar: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub images: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, name: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
            path: name.to_string(),
            json_path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if m.images.is_empty() {
            return Err(Error::Json {
                path: name.to_string(),
                json_path: "images".into(),
                message: "manifest lists no images".into(),
            });
        }
        Ok(m)
    }

    /// Reads a manifest and resolves its paths against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Manifest::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.images {
            e.map = base.join(&e.map);
            e.sidecar = base.join(&e.sidecar);
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Every listed path that does not exist, in listing order.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        self.images
            .iter()
            .flat_map(|e| [&e.map, &e.sidecar])
            .filter(|p| !p.is_file())
            .cloned()
            .collect()
    }

    fn load(&self) -> Result<Vec<InstanceMapFile>> {
        let missing = self.missing_files();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        self.images
            .iter()
            .map(|e| InstanceMapFile::read(&e.map, &e.sidecar))
            .collect()
    }

    pub fn load_predictions(&self) -> Result<PredictionSet> {
        PredictionSet::new(self.load()?.iter().map(InstanceMapFile::predictions).collect())
    }

    pub fn load_ground_truth(&self) -> Result<GroundTruthInstances> {
        GroundTruthInstances::new(self.load()?.iter().map(InstanceMapFile::ground_truth).collect())
    }
}
