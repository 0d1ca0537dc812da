//! File formats: unary tensors, detection lists, PGM label maps with
//! instance sidecars, dataset manifests and PPM previews.

pub mod detections;
pub mod instances;
pub mod manifest;
pub mod pgm;
pub mod render;
pub mod tensor;

pub use detections::{parse_detections, read_detections, write_detections, DetectionRecord};
pub use instances::{InstanceMapFile, InstanceRecord};
pub use manifest::{Manifest, ManifestEntry};
pub use pgm::Pgm;
pub use render::{palette, render_ppm, write_ppm};
pub use tensor::{TensorData, TensorFile};
