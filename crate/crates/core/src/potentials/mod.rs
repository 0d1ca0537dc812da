//! CRF state, parameters and energies.
//!
//! Labels are `0..=K` with `0` the background. Unary terms are energies
//! (negative log-potentials). A detection `d` couples the pixels of its
//! foreground set `F_d` with a binary latent variable `Y_d` that says
//! whether the detection is correct.

mod energy;
mod oracle;

use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{Backend, FeatureField, FilterPlan};
use crate::grid::{BoundingBox, ColorImage, PixelGrid};

pub use energy::{
    detection_clique_energy, free_energy, pairwise_energy, total_energy, y_unary_energy,
};
pub use oracle::{exact_marginals_bruteforce, ExactMarginals, ORACLE_MAX_BITS};

/// Label id of the background class.
pub const BACKGROUND: usize = 0;

/// Clamp applied to detection scores before they enter the `Y` unary.
pub const SCORE_CLAMP: f64 = 1e-6;

/// `K` foreground classes plus the background label `0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    num_foreground: usize,
    names: Option<Vec<String>>,
}

impl LabelSpace {
    pub fn new(num_foreground: usize) -> Self {
        LabelSpace {
            num_foreground,
            names: None,
        }
    }

    /// Names for all `K + 1` labels, background first.
    pub fn with_names(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Invalid("label names must include the background".into()));
        }
        Ok(LabelSpace {
            num_foreground: names.len() - 1,
            names: Some(names),
        })
    }

    pub fn num_foreground(&self) -> usize {
        self.num_foreground
    }

    pub fn num_labels(&self) -> usize {
        self.num_foreground + 1
    }

    pub fn background_index(&self) -> usize {
        BACKGROUND
    }

    pub fn name(&self, label: usize) -> Option<&str> {
        self.names.as_ref()?.get(label).map(String::as_str)
    }

    pub fn is_foreground(&self, label: usize) -> bool {
        label >= 1 && label <= self.num_foreground
    }
}

/// Per-pixel label energies, `N x L`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    grid: PixelGrid,
    energies: Array2<f64>,
}

impl UnaryField {
    pub fn new(grid: PixelGrid, energies: Array2<f64>) -> Result<Self> {
        if energies.nrows() != grid.len() || energies.ncols() == 0 {
            return Err(Error::shape(
                "unary field",
                format!("{} x L (L >= 1)", grid.len()),
                format!("{} x {}", energies.nrows(), energies.ncols()),
            ));
        }
        if let Some(index) = energies.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "unary energies",
                index,
            });
        }
        Ok(UnaryField { grid, energies })
    }

    pub fn zeros(grid: PixelGrid, num_labels: usize) -> Self {
        UnaryField {
            grid,
            energies: Array2::zeros((grid.len(), num_labels)),
        }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn num_labels(&self) -> usize {
        self.energies.ncols()
    }

    pub fn energies(&self) -> ArrayView2<'_, f64> {
        self.energies.view()
    }

    pub fn into_energies(self) -> Array2<f64> {
        self.energies
    }
}

/// Per-pixel marginals `Q_i(l)`; each row is a probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionField {
    grid: PixelGrid,
    q: Array2<f64>,
}

impl DistributionField {
    pub const ROW_TOLERANCE: f64 = 1e-9;

    pub fn new(grid: PixelGrid, q: Array2<f64>) -> Result<Self> {
        if q.nrows() != grid.len() || q.ncols() == 0 {
            return Err(Error::shape(
                "distribution field",
                format!("{} x L (L >= 1)", grid.len()),
                format!("{} x {}", q.nrows(), q.ncols()),
            ));
        }
        for (i, row) in q.outer_iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Invalid(format!(
                    "distribution row {i} has an entry outside [0, 1]"
                )));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > Self::ROW_TOLERANCE {
                return Err(Error::Invalid(format!(
                    "distribution row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(DistributionField { grid, q })
    }

    /// Wraps rows known to be normalized, e.g. softmax outputs.
    pub(crate) fn from_normalized(grid: PixelGrid, q: Array2<f64>) -> Self {
        debug_assert_eq!(q.nrows(), grid.len());
        DistributionField { grid, q }
    }

    /// `Q_i = softmax(-unary_i)`.
    pub fn from_unary(unary: &UnaryField) -> Self {
        DistributionField {
            grid: unary.grid,
            q: crate::numeric::neg_softmax(unary.energies()),
        }
    }

    pub fn uniform(grid: PixelGrid, num_labels: usize) -> Self {
        DistributionField {
            grid,
            q: Array2::from_elem((grid.len(), num_labels), 1.0 / num_labels as f64),
        }
    }

    pub fn one_hot(labeling: &Labeling) -> Self {
        let mut q = Array2::zeros((labeling.grid.len(), labeling.num_labels));
        for (i, &l) in labeling.labels.iter().enumerate() {
            q[[i, l]] = 1.0;
        }
        DistributionField {
            grid: labeling.grid,
            q,
        }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn num_labels(&self) -> usize {
        self.q.ncols()
    }

    pub fn q(&self) -> ArrayView2<'_, f64> {
        self.q.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.q.row(i)
    }

    pub fn get(&self, i: usize, label: usize) -> f64 {
        self.q[[i, label]]
    }

    pub fn into_array(self) -> Array2<f64> {
        self.q
    }

    /// Largest `|self - other|` over all entries.
    pub fn max_abs_diff(&self, other: &DistributionField) -> f64 {
        self.q
            .iter()
            .zip(other.q.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Per-pixel argmax, ties toward the lowest label index.
    pub fn decode(&self) -> Labeling {
        let labels = self
            .q
            .outer_iter()
            .map(|row| crate::numeric::argmax(row.iter().copied()))
            .collect();
        Labeling {
            grid: self.grid,
            num_labels: self.num_labels(),
            labels,
        }
    }
}

/// A hard assignment of one label per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    grid: PixelGrid,
    num_labels: usize,
    labels: Vec<usize>,
}

impl Labeling {
    pub fn new(grid: PixelGrid, num_labels: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::shape("labeling", grid.len(), labels.len()));
        }
        if let Some(i) = labels.iter().position(|&l| l >= num_labels) {
            return Err(Error::Invalid(format!(
                "pixel {i} has label {} outside [0, {num_labels})",
                labels[i]
            )));
        }
        Ok(Labeling {
            grid,
            num_labels,
            labels,
        })
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }
}

/// One detection hypothesis `(l_d, s_d, F_d, B_d)` and its `Y_d` marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    label: usize,
    score: f64,
    bbox: BoundingBox,
    foreground: Vec<usize>,
    /// `Pr(Y_d = 1)`.
    pub y_marginal: f64,
}

impl Detection {
    /// `foreground` holds pixel indices; it is sorted and deduplicated.
    /// The marginal starts at the clamped score.
    pub fn new(
        grid: &PixelGrid,
        label: usize,
        score: f64,
        bbox: BoundingBox,
        mut foreground: Vec<usize>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Invalid(format!(
                "detection score {score} outside [0, 1]"
            )));
        }
        if label == BACKGROUND {
            return Err(Error::Invalid("detections must have a foreground label".into()));
        }
        bbox.validate(grid)?;
        foreground.sort_unstable();
        foreground.dedup();
        if foreground.is_empty() {
            return Err(Error::DegenerateDetection { index: 0 });
        }
        if let Some(&i) = foreground
            .iter()
            .find(|&&i| i >= grid.len() || !bbox.contains_pixel(grid, i))
        {
            return Err(Error::Invalid(format!(
                "foreground pixel {i} lies outside box {:?}",
                bbox.as_array()
            )));
        }
        Ok(Detection {
            label,
            score,
            bbox,
            foreground,
            y_marginal: clamp_score(score),
        })
    }

    /// A detection whose foreground is its whole box.
    pub fn from_box(grid: &PixelGrid, label: usize, score: f64, bbox: BoundingBox) -> Result<Self> {
        bbox.validate(grid)?;
        let fg = bbox.pixels(grid).collect();
        Detection::new(grid, label, score, bbox, fg)
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    /// `clamp(s_d, 1e-6, 1 - 1e-6)`.
    pub fn clamped_score(&self) -> f64 {
        clamp_score(self.score)
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    pub fn foreground(&self) -> &[usize] {
        &self.foreground
    }

    /// Replaces the foreground set, keeping the same validation rules.
    pub fn with_foreground(&self, grid: &PixelGrid, foreground: Vec<usize>) -> Result<Self> {
        let mut d = Detection::new(grid, self.label, self.score, self.bbox, foreground)?;
        d.y_marginal = self.y_marginal;
        Ok(d)
    }

    /// Clique coefficient `w_{l_d} s_d / |F_d|`.
    pub fn coefficient(&self, params: &DetectionParams) -> f64 {
        params.weight(self.label) * self.score / self.foreground.len() as f64
    }
}

pub fn clamp_score(score: f64) -> f64 {
    score.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

/// How a detection score becomes the unary on its latent variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YUnaryMode {
    /// `psi(1) = -ln s~`, `psi(0) = -ln(1 - s~)`: without other evidence
    /// `Pr(Y = 1)` equals the clamped score.
    #[default]
    LogScore,
    /// No prior on `Y`.
    Flat,
}

/// Detection class weights `w_l` and the `Y` unary rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    /// Indexed by foreground class `l - 1`.
    class_weights: Vec<f64>,
    pub y_unary: YUnaryMode,
}

impl DetectionParams {
    pub fn new(class_weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = class_weights
            .iter()
            .position(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Invalid(format!(
                "class weight {} for label {} must be finite and non-negative",
                class_weights[i],
                i + 1
            )));
        }
        Ok(DetectionParams {
            class_weights,
            y_unary: YUnaryMode::LogScore,
        })
    }

    pub fn uniform(num_foreground: usize, weight: f64) -> Result<Self> {
        DetectionParams::new(vec![weight; num_foreground])
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    /// `w_l` for a foreground label; 0 for labels without a weight.
    pub fn weight(&self, label: usize) -> f64 {
        label
            .checked_sub(1)
            .and_then(|k| self.class_weights.get(k))
            .copied()
            .unwrap_or(0.0)
    }

    /// `(psi(Y=0), psi(Y=1))` for a detection.
    pub fn y_unary(&self, det: &Detection) -> (f64, f64) {
        match self.y_unary {
            YUnaryMode::LogScore => {
                let s = det.clamped_score();
                (-(1.0 - s).ln(), -s.ln())
            }
            YUnaryMode::Flat => (0.0, 0.0),
        }
    }
}

/// Feature space of one Gaussian kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelFeatures {
    /// Position only, bandwidth `theta_gamma` pixels.
    Spatial { theta_gamma: f64 },
    /// Position and colour, bandwidths `theta_alpha` pixels and
    /// `theta_beta` intensity units.
    Bilateral { theta_alpha: f64, theta_beta: f64 },
}

impl KernelFeatures {
    pub fn feature_field(&self, grid: PixelGrid, image: Option<&ColorImage>) -> Result<FeatureField> {
        match *self {
            KernelFeatures::Spatial { theta_gamma } => FeatureField::spatial(grid, theta_gamma),
            KernelFeatures::Bilateral {
                theta_alpha,
                theta_beta,
            } => {
                let image = image.ok_or_else(|| {
                    Error::Invalid("bilateral kernel requires a colour image".into())
                })?;
                if image.grid() != grid {
                    return Err(Error::shape("image", grid, image.grid()));
                }
                FeatureField::bilateral(image, theta_alpha, theta_beta)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub weight: f64,
    pub features: KernelFeatures,
}

impl KernelSpec {
    pub const DEFAULT_THETA_ALPHA: f64 = 60.0;
    pub const DEFAULT_THETA_BETA: f64 = 10.0;
    pub const DEFAULT_THETA_GAMMA: f64 = 3.0;
    pub const DEFAULT_BILATERAL_WEIGHT: f64 = 5.0;
    pub const DEFAULT_SPATIAL_WEIGHT: f64 = 3.0;

    pub fn spatial(weight: f64, theta_gamma: f64) -> Self {
        KernelSpec {
            weight,
            features: KernelFeatures::Spatial { theta_gamma },
        }
    }

    pub fn bilateral(weight: f64, theta_alpha: f64, theta_beta: f64) -> Self {
        KernelSpec {
            weight,
            features: KernelFeatures::Bilateral {
                theta_alpha,
                theta_beta,
            },
        }
    }
}

/// Gaussian kernel mixture and label compatibility `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseConfig {
    pub kernels: Vec<KernelSpec>,
    pub compatibility: Array2<f64>,
}

impl PairwiseConfig {
    pub fn new(kernels: Vec<KernelSpec>, compatibility: Array2<f64>) -> Result<Self> {
        let l = compatibility.nrows();
        if l == 0 || compatibility.ncols() != l {
            return Err(Error::shape(
                "compatibility matrix",
                "L x L",
                format!("{} x {}", l, compatibility.ncols()),
            ));
        }
        if let Some(index) = compatibility.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "compatibility",
                index,
            });
        }
        if let Some(k) = kernels
            .iter()
            .position(|k| !(k.weight.is_finite() && k.weight >= 0.0))
        {
            return Err(Error::Invalid(format!(
                "kernel {k} weight {} must be finite and non-negative",
                kernels[k].weight
            )));
        }
        Ok(PairwiseConfig {
            kernels,
            compatibility,
        })
    }

    /// Bilateral and spatial kernels with default weights and bandwidths,
    /// Potts compatibility.
    pub fn default_potts(num_labels: usize) -> Result<Self> {
        PairwiseConfig::potts(
            num_labels,
            vec![
                KernelSpec::bilateral(
                    KernelSpec::DEFAULT_BILATERAL_WEIGHT,
                    KernelSpec::DEFAULT_THETA_ALPHA,
                    KernelSpec::DEFAULT_THETA_BETA,
                ),
                KernelSpec::spatial(
                    KernelSpec::DEFAULT_SPATIAL_WEIGHT,
                    KernelSpec::DEFAULT_THETA_GAMMA,
                ),
            ],
        )
    }

    /// Potts compatibility `[l != l']`.
    pub fn potts(num_labels: usize, kernels: Vec<KernelSpec>) -> Result<Self> {
        PairwiseConfig::new(kernels, potts_matrix(num_labels))
    }

    pub fn num_labels(&self) -> usize {
        self.compatibility.nrows()
    }

    pub fn kernel_weights(&self) -> Vec<f64> {
        self.kernels.iter().map(|k| k.weight).collect()
    }
}

pub fn potts_matrix(num_labels: usize) -> Array2<f64> {
    Array2::from_shape_fn((num_labels, num_labels), |(a, b)| {
        if a == b {
            0.0
        } else {
            1.0
        }
    })
}

/// A pairwise configuration bound to prebuilt filter plans, one per kernel.
#[derive(Debug, Clone)]
pub struct PairwiseModel {
    config: PairwiseConfig,
    plans: Vec<Arc<FilterPlan>>,
}

impl PairwiseModel {
    pub fn build(
        config: PairwiseConfig,
        grid: PixelGrid,
        image: Option<&ColorImage>,
        backend: Backend,
    ) -> Result<Self> {
        let plans = config
            .kernels
            .iter()
            .map(|k| {
                let features = k.features.feature_field(grid, image)?;
                Ok(Arc::new(FilterPlan::build(features, backend)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairwiseModel { config, plans })
    }

    /// Binds an existing set of plans. Plans must match the kernels one to
    /// one and share a grid.
    pub fn from_plans(config: PairwiseConfig, plans: Vec<Arc<FilterPlan>>) -> Result<Self> {
        if plans.len() != config.kernels.len() {
            return Err(Error::shape("filter plans", config.kernels.len(), plans.len()));
        }
        if let Some(p) = plans.iter().find(|p| p.grid() != plans[0].grid()) {
            return Err(Error::shape("filter plan grid", plans[0].grid(), p.grid()));
        }
        Ok(PairwiseModel { config, plans })
    }

    /// Same plans, different weights or compatibility.
    pub fn with_config(&self, config: PairwiseConfig) -> Result<Self> {
        PairwiseModel::from_plans(config, self.plans.clone())
    }

    pub fn config(&self) -> &PairwiseConfig {
        &self.config
    }

    pub fn plans(&self) -> &[Arc<FilterPlan>] {
        &self.plans
    }

    pub fn num_labels(&self) -> usize {
        self.config.num_labels()
    }

    pub(crate) fn check(&self, grid: PixelGrid, num_labels: usize) -> Result<()> {
        if self.num_labels() != num_labels {
            return Err(Error::shape(
                "compatibility matrix",
                format!("{num_labels} x {num_labels}"),
                format!("{0} x {0}", self.num_labels()),
            ));
        }
        if let Some(p) = self.plans.iter().find(|p| p.grid() != grid) {
            return Err(Error::shape("filter plan grid", grid, p.grid()));
        }
        Ok(())
    }

    /// `sum_m w_m k_m(i, j)` evaluated exactly.
    pub fn kernel_value(&self, i: usize, j: usize) -> f64 {
        self.config
            .kernels
            .iter()
            .zip(&self.plans)
            .map(|(k, p)| k.weight * p.features().kernel(i, j))
            .sum()
    }
}

/// Checks that every detection lies on `grid` and has a label in
/// `1..num_labels`.
pub(crate) fn check_detections(
    detections: &[Detection],
    grid: PixelGrid,
    num_labels: usize,
) -> Result<()> {
    for (index, d) in detections.iter().enumerate() {
        if d.label >= num_labels {
            return Err(Error::Invalid(format!(
                "detection {index} has label {} outside [1, {})",
                d.label, num_labels
            )));
        }
        if d.foreground.is_empty() {
            return Err(Error::DegenerateDetection { index });
        }
        d.bbox.validate(&grid)?;
        if !(0.0..=1.0).contains(&d.y_marginal) {
            return Err(Error::Invalid(format!(
                "detection {index} marginal {} outside [0, 1]",
                d.y_marginal
            )));
        }
    }
    Ok(())
}
