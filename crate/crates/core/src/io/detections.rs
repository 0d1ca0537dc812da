//! JSON detection files: an array of
//! `{"label", "score", "box": [x0, y0, x1, y1], "mask"?, "y_marginal"?}`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pgm::Pgm;
use crate::error::{Error, Result};
use crate::grid::{BoundingBox, PixelGrid};
use crate::instance::DetectionInput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub label: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [usize; 4],
    /// PGM foreground mask, relative to the detection file; nonzero pixels
    /// are foreground.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Recalibrated `Pr(Y = 1)`, present in pipeline output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_marginal: Option<f64>,
}

impl DetectionRecord {
    pub fn bounding_box(&self) -> BoundingBox {
        let [x0, y0, x1, y1] = self.bbox;
        BoundingBox::new(x0, y0, x1, y1)
    }
}

/// Parses and validates detection records; `name` labels diagnostics.
pub fn parse_detections(text: &str, name: &str, num_foreground: usize) -> Result<Vec<DetectionRecord>> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let records: Vec<DetectionRecord> =
        serde_path_to_error::deserialize(de).map_err(|e| Error::Json {
            path: name.to_string(),
            json_path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    for (k, r) in records.iter().enumerate() {
        let bad = |field: &str, message: String| Error::Json {
            path: name.to_string(),
            json_path: format!("[{k}].{field}"),
            message,
        };
        if !(r.score > 0.0 && r.score < 1.0) {
            return Err(bad("score", format!("score {} outside (0, 1)", r.score)));
        }
        let [x0, y0, x1, y1] = r.bbox;
        if x0 >= x1 || y0 >= y1 {
            return Err(bad("box", format!("box {:?} needs x0 < x1 and y0 < y1", r.bbox)));
        }
        if r.label == 0 || r.label > num_foreground {
            return Err(bad(
                "label",
                format!("label {} outside [1, {num_foreground}]", r.label),
            ));
        }
        if let Some(y) = r.y_marginal {
            if !(0.0..=1.0).contains(&y) {
                return Err(bad("y_marginal", format!("{y} outside [0, 1]")));
            }
        }
    }
    Ok(records)
}

pub fn read_detections(path: &Path, num_foreground: usize) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, &path.display().to_string(), num_foreground)
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    std::fs::write(path, to_json(records)).map_err(|e| Error::io(path, e))
}

pub fn to_json(records: &[DetectionRecord]) -> String {
    let mut s = serde_json::to_string_pretty(records).expect("records serialize");
    s.push('\n');
    s
}

/// Pipeline inputs, loading masks relative to `base` and checking boxes
/// against `grid`.
pub fn to_inputs(
    records: &[DetectionRecord],
    base: &Path,
    grid: PixelGrid,
) -> Result<Vec<DetectionInput>> {
    records
        .iter()
        .map(|r| {
            let bbox = r.bounding_box();
            bbox.validate(&grid)?;
            let mask = match &r.mask {
                None => None,
                Some(m) => {
                    let path: PathBuf = base.join(m);
                    let pgm = Pgm::read(&path)?;
                    if (pgm.width, pgm.height) != (grid.width(), grid.height()) {
                        return Err(Error::shape(
                            "foreground mask",
                            grid,
                            format!("{}x{}", pgm.width, pgm.height),
                        ));
                    }
                    Some(
                        bbox.pixels(&grid)
                            .filter(|&i| pgm.data[i] != 0)
                            .collect::<Vec<_>>(),
                    )
                }
            };
            Ok(DetectionInput {
                label: r.label,
                score: r.score,
                bbox,
                mask,
            })
        })
        .collect()
}
