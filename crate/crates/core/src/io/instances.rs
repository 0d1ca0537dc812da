//! Instance maps on disk: a 16-bit PGM of instance indices (`0 = d0`) and a
//! JSON sidecar `[{"index", "detection", "class", "score"}]` describing
//! every index that appears in the map.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pgm::Pgm;
use crate::error::{Error, Result};
use crate::eval::{GtInstance, PredInstance};
use crate::instance::{InstanceMap, MAX_INSTANCES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub index: usize,
    /// Position of the source detection in the input detection file.
    pub detection: usize,
    pub class: usize,
    pub score: f64,
}

/// A decoded instance map with its sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMapFile {
    pub map: Pgm,
    pub records: Vec<InstanceRecord>,
}

impl InstanceMapFile {
    pub fn from_map(map: &InstanceMap) -> Result<Self> {
        let g = map.grid();
        let pgm = Pgm::from_labels16(g.width(), g.height(), map.labels())?;
        let records = map
            .instances()
            .iter()
            .map(|i| InstanceRecord {
                index: i.index,
                detection: i.detection,
                class: i.class,
                score: i.score,
            })
            .collect();
        Ok(InstanceMapFile { map: pgm, records })
    }

    pub fn sidecar_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.records).expect("records serialize");
        s.push('\n');
        s
    }

    pub fn write(&self, map_path: &Path, sidecar_path: &Path) -> Result<()> {
        self.map.write(map_path)?;
        std::fs::write(sidecar_path, self.sidecar_json()).map_err(|e| Error::io(sidecar_path, e))
    }

    pub fn read(map_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let map = Pgm::read(map_path)?;
        let text = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let name = sidecar_path.display().to_string();
        let de = &mut serde_json::Deserializer::from_str(&text);
        let records: Vec<InstanceRecord> =
            serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
                path: name.clone(),
                json_path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        let file = InstanceMapFile { map, records };
        file.check(&name)?;
        Ok(file)
    }

    /// Sidecar indices are unique, in `[1, 65534]`, with valid scores, and
    /// cover every nonzero map value.
    fn check(&self, name: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (k, r) in self.records.iter().enumerate() {
            let bad = |field: &str, message: String| Error::Json {
                path: name.to_string(),
                json_path: format!("[{k}].{field}"),
                message,
            };
            if r.index == 0 || r.index > MAX_INSTANCES {
                return Err(bad("index", format!("index {} outside [1, {MAX_INSTANCES}]", r.index)));
            }
            if seen.insert(r.index, k).is_some() {
                return Err(bad("index", format!("index {} listed twice", r.index)));
            }
            if r.class == 0 {
                return Err(bad("class", "instances cannot have the background class".into()));
            }
            if !(0.0..=1.0).contains(&r.score) {
                return Err(bad("score", format!("score {} outside [0, 1]", r.score)));
            }
        }
        if let Some(i) = self
            .map
            .data
            .iter()
            .position(|&v| v != 0 && !seen.contains_key(&usize::from(v)))
        {
            return Err(Error::Invalid(format!(
                "{name}: pixel {i} has instance {} missing from the sidecar",
                self.map.data[i]
            )));
        }
        Ok(())
    }

    fn mask(&self, index: usize) -> Vec<bool> {
        self.map.data.iter().map(|&v| usize::from(v) == index).collect()
    }

    /// Non-empty instances as predictions.
    pub fn predictions(&self) -> Vec<PredInstance> {
        self.records
            .iter()
            .map(|r| PredInstance {
                class: r.class,
                mask: self.mask(r.index),
                score: r.score,
            })
            .filter(|p| p.mask.iter().any(|&v| v))
            .collect()
    }

    /// Non-empty instances as ground truth; scores are ignored.
    pub fn ground_truth(&self) -> Vec<GtInstance> {
        self.records
            .iter()
            .map(|r| GtInstance {
                class: r.class,
                mask: self.mask(r.index),
            })
            .filter(|g| g.mask.iter().any(|&v| v))
            .collect()
    }
}
