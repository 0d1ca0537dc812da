//! From semantic marginals and recalibrated detections to instances.
//!
//! The pipeline suppresses duplicate boxes, picks a foreground set for each
//! surviving detection, runs the semantic CRF, spreads each pixel's class
//! mass over the detections whose boxes cover it, and smooths that
//! assignment with a second dense CRF whose `D + 1` labels are the
//! detections plus a background label `d0`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundingBox, PixelGrid};
use crate::numeric::argmax;
use crate::potentials::{
    Detection, DetectionParams, DistributionField, KernelSpec, PairwiseConfig, PairwiseModel,
    UnaryField, BACKGROUND,
};
use crate::semantic::{self, InferenceSettings, SemanticResult};

/// Floor applied to every included identification mass and before `-ln`.
pub const IDENTIFICATION_FLOOR: f64 = 1e-6;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_FOREGROUND_THRESHOLD: f64 = 0.5;
/// Largest instance count a 16-bit map can hold next to `d0`.
pub const MAX_INSTANCES: usize = 65534;

/// Greedy per-class non-maximum suppression over `(label, score, box)`.
///
/// Returns the indices of the kept boxes, highest score first. Equal
/// scores keep their input order.
pub fn nms_indices(boxes: &[(usize, f64, BoundingBox)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].1.total_cmp(&boxes[a].1));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let (label, _, bbox) = boxes[i];
        let suppressed = kept
            .iter()
            .any(|&k| boxes[k].0 == label && boxes[k].2.iou(&bbox) >= iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// [`nms_indices`] applied to detections.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let boxes: Vec<_> = detections
        .iter()
        .map(|d| (d.label(), d.score(), d.bbox()))
        .collect();
    nms_indices(&boxes, iou_threshold)
        .into_iter()
        .map(|i| detections[i].clone())
        .collect()
}

/// Pixels of `bbox` whose marginal for `label` is at least `threshold`.
/// If none qualify, the box shrunk by a quarter of its width and height on
/// each side (rounded down).
pub fn foreground_heuristic(
    bbox: BoundingBox,
    label: usize,
    q: &DistributionField,
    threshold: f64,
) -> Result<Vec<usize>> {
    let grid = q.grid();
    bbox.validate(&grid)?;
    if label >= q.num_labels() {
        return Err(Error::Invalid(format!(
            "label {label} outside the {} labels of the marginals",
            q.num_labels()
        )));
    }
    let picked: Vec<usize> = bbox
        .pixels(&grid)
        .filter(|&i| q.get(i, label) >= threshold)
        .collect();
    if !picked.is_empty() {
        return Ok(picked);
    }
    let (dx, dy) = (bbox.width() / 4, bbox.height() / 4);
    let inner = BoundingBox::new(bbox.x0 + dx, bbox.y0 + dy, bbox.x1 - dx, bbox.y1 - dy);
    Ok(inner.pixels(&grid).collect())
}

/// One non-background instance label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceLabel {
    /// Index of the originating detection in the pipeline input.
    pub detection: usize,
    pub class: usize,
    pub score: f64,
}

/// Labels `0 = d0` and `1..=D`, one per detection.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InstanceLabelSpace {
    instances: Vec<InstanceLabel>,
}

impl InstanceLabelSpace {
    /// One label per detection, scored by its `Pr(Y = 1)`.
    pub fn from_detections(detections: &[Detection]) -> Result<Self> {
        let sources: Vec<usize> = (0..detections.len()).collect();
        InstanceLabelSpace::with_sources(detections, &sources)
    }

    /// Like [`InstanceLabelSpace::from_detections`], recording `sources[k]`
    /// as the originating index of detection `k`.
    pub fn with_sources(detections: &[Detection], sources: &[usize]) -> Result<Self> {
        if sources.len() != detections.len() {
            return Err(Error::shape("detection sources", detections.len(), sources.len()));
        }
        if detections.len() > MAX_INSTANCES {
            return Err(Error::Invalid(format!(
                "{} detections exceed the limit of {MAX_INSTANCES} instances",
                detections.len()
            )));
        }
        Ok(InstanceLabelSpace {
            instances: detections
                .iter()
                .zip(sources)
                .map(|(d, &detection)| InstanceLabel {
                    detection,
                    class: d.label(),
                    score: d.y_marginal,
                })
                .collect(),
        })
    }

    pub fn num_instances(&self) -> usize {
        self.instances.len()
    }

    /// `D + 1`.
    pub fn num_labels(&self) -> usize {
        self.instances.len() + 1
    }

    /// The instance behind label `k >= 1`.
    pub fn instance(&self, k: usize) -> Option<&InstanceLabel> {
        k.checked_sub(1).and_then(|i| self.instances.get(i))
    }

    pub fn instances(&self) -> &[InstanceLabel] {
        &self.instances
    }
}

/// Per-pixel distribution over `d0` and the detections.
///
/// Unnormalized mass is `Q_i(background)` for `d0` at every pixel and
/// `Q_i(l_k) Pr(Y_k = 1)` for instance `k` at pixels inside its box.
/// Included masses are floored at [`IDENTIFICATION_FLOOR`]; instances are
/// exactly zero outside their boxes.
pub fn identify_instances(q: &DistributionField, detections: &[Detection]) -> Result<DistributionField> {
    let grid = q.grid();
    for (index, d) in detections.iter().enumerate() {
        d.bbox().validate(&grid)?;
        if d.label() >= q.num_labels() {
            return Err(Error::Invalid(format!(
                "detection {index} has label {} outside the {} semantic labels",
                d.label(),
                q.num_labels()
            )));
        }
    }
    let mass = identification_mass(q.q(), detections, grid);
    Ok(DistributionField::from_normalized(grid, normalize_rows(mass)))
}

pub(crate) fn identification_mass(
    q: ArrayView2<f64>,
    detections: &[Detection],
    grid: PixelGrid,
) -> Array2<f64> {
    let n = grid.len();
    let mut mass = Array2::<f64>::zeros((n, detections.len() + 1));
    for i in 0..n {
        mass[[i, 0]] = q[[i, BACKGROUND]].max(IDENTIFICATION_FLOOR);
    }
    for (k, d) in detections.iter().enumerate() {
        for i in d.bbox().pixels(&grid) {
            mass[[i, k + 1]] = (q[[i, d.label()]] * d.y_marginal).max(IDENTIFICATION_FLOOR);
        }
    }
    mass
}

fn normalize_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.outer_iter_mut() {
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    m
}

/// `-ln max(Pr(v_i), floor)`.
pub fn instance_unaries(p: &DistributionField) -> UnaryField {
    let energies = p.q().mapv(|v| -v.max(IDENTIFICATION_FLOOR).ln());
    UnaryField::new(p.grid(), energies).expect("floored energies are finite")
}

/// A Potts model over `D + 1` instance labels that reuses the semantic
/// stage's filter plans with its own, label-agnostic kernel weights.
pub fn instance_pairwise(
    semantic: &PairwiseModel,
    kernel_weights: &[f64],
    num_labels: usize,
) -> Result<PairwiseModel> {
    let kernels = &semantic.config().kernels;
    if kernel_weights.len() != kernels.len() {
        return Err(Error::shape(
            "instance kernel weights",
            kernels.len(),
            kernel_weights.len(),
        ));
    }
    let kernels = kernels
        .iter()
        .zip(kernel_weights)
        .map(|(k, &weight)| KernelSpec {
            weight,
            features: k.features,
        })
        .collect();
    semantic.with_config(PairwiseConfig::potts(num_labels, kernels)?)
}

#[derive(Debug, Clone)]
pub struct InstanceCrfResult {
    pub q: DistributionField,
    pub iterations: usize,
    pub tape: Option<crate::autodiff::Tape>,
}

/// Mean field on the instance CRF. Only parallel mode and the settings'
/// iteration count, epsilon and tape flag apply.
pub fn run_instance_crf(
    unaries: &UnaryField,
    pairwise: &PairwiseModel,
    settings: &InferenceSettings,
) -> Result<InstanceCrfResult> {
    let none = DetectionParams::new(Vec::new())?;
    let SemanticResult {
        q, iterations, tape, ..
    } = semantic::run(unaries, &[], pairwise, &none, settings)?;
    Ok(InstanceCrfResult {
        q,
        iterations,
        tape,
    })
}

/// One instance that owns at least one pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    /// Label in the instance map, `>= 1`.
    pub index: usize,
    pub detection: usize,
    pub class: usize,
    pub score: f64,
    pub pixels: usize,
}

/// Per-pixel instance labels (`0 = d0`) and the instances that appear.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMap {
    grid: PixelGrid,
    labels: Vec<usize>,
    instances: Vec<InstanceInfo>,
}

impl InstanceMap {
    /// Builds a map from raw labels; instances without pixels are dropped
    /// from the listing.
    pub fn new(grid: PixelGrid, labels: Vec<usize>, space: &InstanceLabelSpace) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::shape("instance labels", grid.len(), labels.len()));
        }
        let mut counts = vec![0usize; space.num_labels()];
        for (i, &k) in labels.iter().enumerate() {
            if k >= space.num_labels() {
                return Err(Error::Invalid(format!(
                    "pixel {i} has instance {k}, only {} exist",
                    space.num_instances()
                )));
            }
            counts[k] += 1;
        }
        let instances = space
            .instances()
            .iter()
            .enumerate()
            .filter(|&(k, _)| counts[k + 1] > 0)
            .map(|(k, inst)| InstanceInfo {
                index: k + 1,
                detection: inst.detection,
                class: inst.class,
                score: inst.score,
                pixels: counts[k + 1],
            })
            .collect();
        Ok(InstanceMap {
            grid,
            labels,
            instances,
        })
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn instances(&self) -> &[InstanceInfo] {
        &self.instances
    }

    /// Pixel mask of instance label `k`.
    pub fn mask(&self, k: usize) -> Vec<bool> {
        self.labels.iter().map(|&v| v == k).collect()
    }
}

/// Per-pixel argmax over instance labels, ties toward the lower index.
pub fn decode_instances(q: &DistributionField, space: &InstanceLabelSpace) -> Result<InstanceMap> {
    if q.num_labels() != space.num_labels() {
        return Err(Error::shape(
            "instance marginals",
            space.num_labels(),
            q.num_labels(),
        ));
    }
    let labels = q.q().outer_iter().map(|r| argmax(r.iter().copied())).collect();
    InstanceMap::new(q.grid(), labels, space)
}

/// Assigns each pixel to the highest-scored detection whose box covers it
/// and whose class is the pixel's semantic argmax, otherwise to `d0`.
/// Ranks by original score; equal scores go to the earlier detection.
pub fn naive_baseline(q: &DistributionField, detections: &[Detection]) -> Result<InstanceMap> {
    let space = InstanceLabelSpace::from_detections(detections)?;
    InstanceMap::new(q.grid(), naive_labels(q, detections)?, &space)
}

fn naive_labels(q: &DistributionField, detections: &[Detection]) -> Result<Vec<usize>> {
    let grid = q.grid();
    let semantic = q.decode();
    let mut labels = vec![0usize; grid.len()];
    let mut best = vec![f64::NEG_INFINITY; grid.len()];
    for (k, d) in detections.iter().enumerate() {
        d.bbox().validate(&grid)?;
        for i in d.bbox().pixels(&grid) {
            if semantic.get(i) == d.label() && d.score() > best[i] {
                best[i] = d.score();
                labels[i] = k + 1;
            }
        }
    }
    Ok(labels)
}

/// A detection before its foreground set is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionInput {
    pub label: usize,
    pub score: f64,
    pub bbox: BoundingBox,
    /// External foreground mask as pixel indices; overrides the heuristic.
    pub mask: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub nms_iou: f64,
    pub foreground_threshold: f64,
    pub semantic: InferenceSettings,
    pub instance: InferenceSettings,
    /// Kernel weights of the instance CRF, one per semantic kernel.
    pub instance_kernel_weights: Vec<f64>,
}

impl PipelineConfig {
    /// Defaults with the instance CRF sharing the semantic kernel weights.
    pub fn for_model(pairwise: &PairwiseModel) -> Self {
        PipelineConfig {
            nms_iou: DEFAULT_NMS_IOU,
            foreground_threshold: DEFAULT_FOREGROUND_THRESHOLD,
            semantic: InferenceSettings::default(),
            instance: InferenceSettings::default(),
            instance_kernel_weights: pairwise.config().kernel_weights(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    /// Semantic result over the detections that survived NMS.
    pub semantic: SemanticResult,
    pub labels: InstanceLabelSpace,
    pub identification: DistributionField,
    pub instance_q: DistributionField,
    pub map: InstanceMap,
}

/// Detections that survived NMS, highest score first, and their indices in
/// the input.
#[derive(Debug, Clone)]
pub struct PreparedDetections {
    pub detections: Vec<Detection>,
    pub sources: Vec<usize>,
}

/// NMS, then a foreground set for each survivor: its mask when given,
/// otherwise the heuristic on the softmax of the unaries.
pub fn prepare_detections(
    unary: &UnaryField,
    inputs: &[DetectionInput],
    nms_iou: f64,
    foreground_threshold: f64,
) -> Result<PreparedDetections> {
    let grid = unary.grid();
    for d in inputs {
        d.bbox.validate(&grid)?;
    }
    let boxes: Vec<_> = inputs.iter().map(|d| (d.label, d.score, d.bbox)).collect();
    let q0 = DistributionField::from_unary(unary);
    let sources = nms_indices(&boxes, nms_iou);
    let detections = sources
        .iter()
        .map(|&k| {
            let d = &inputs[k];
            let fg = match &d.mask {
                Some(m) => m.clone(),
                None => foreground_heuristic(d.bbox, d.label, &q0, foreground_threshold)?,
            };
            Detection::new(&grid, d.label, d.score, d.bbox, fg).map_err(|e| match e {
                Error::DegenerateDetection { .. } => Error::DegenerateDetection { index: k },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedDetections {
        detections,
        sources,
    })
}

pub fn run_pipeline(
    unary: &UnaryField,
    inputs: &[DetectionInput],
    pairwise: &PairwiseModel,
    params: &DetectionParams,
    config: &PipelineConfig,
) -> Result<PipelineResult> {
    let prepared = prepare_detections(unary, inputs, config.nms_iou, config.foreground_threshold)?;
    let semantic = semantic::run(unary, &prepared.detections, pairwise, params, &config.semantic)?;
    let labels = InstanceLabelSpace::with_sources(&semantic.detections, &prepared.sources)?;
    let identification = identify_instances(&semantic.q, &semantic.detections)?;
    let model = instance_pairwise(
        pairwise,
        &config.instance_kernel_weights,
        labels.num_labels(),
    )?;
    let inst = run_instance_crf(&instance_unaries(&identification), &model, &config.instance)?;
    let map = decode_instances(&inst.q, &labels)?;
    Ok(PipelineResult {
        semantic,
        labels,
        identification,
        instance_q: inst.q,
        map,
    })
}

/// The naive baseline on the same prepared detections and semantic result.
pub fn run_naive(
    unary: &UnaryField,
    inputs: &[DetectionInput],
    pairwise: &PairwiseModel,
    params: &DetectionParams,
    config: &PipelineConfig,
) -> Result<(SemanticResult, InstanceMap)> {
    let prepared = prepare_detections(unary, inputs, config.nms_iou, config.foreground_threshold)?;
    let semantic = semantic::run(unary, &prepared.detections, pairwise, params, &config.semantic)?;
    let labels = InstanceLabelSpace::with_sources(&semantic.detections, &prepared.sources)?;
    let map = InstanceMap::new(
        semantic.q.grid(),
        naive_labels(&semantic.q, &semantic.detections)?,
        &labels,
    )?;
    Ok((semantic, map))
}
