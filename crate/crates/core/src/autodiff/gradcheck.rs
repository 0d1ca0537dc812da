//! Finite-difference checks of the reverse-mode gradients.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{backward_with_y, composed_backward, composed_forward, Tape};
use crate::error::{Error, Result};
use crate::filter::Backend;
use crate::grid::{BoundingBox, ColorImage, PixelGrid};
use crate::potentials::{
    Detection, DetectionParams, KernelSpec, PairwiseConfig, PairwiseModel, UnaryField,
};
use crate::semantic::{self, InferenceSettings};

/// Size and seed of a random gradcheck instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSpec {
    pub width: usize,
    pub height: usize,
    /// Total labels including background.
    pub num_labels: usize,
    pub num_detections: usize,
    pub iterations: usize,
    pub seed: u64,
    pub backend: Backend,
    pub tolerance: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            width: 6,
            height: 6,
            num_labels: 3,
            num_detections: 2,
            iterations: 3,
            seed: 7,
            backend: Backend::Brute,
            tolerance: 1e-3,
        }
    }
}

/// Dot-product tolerance, independent of the per-entry tolerance.
pub const DOT_PRODUCT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so entries that are zero up
/// to rounding do not fail on noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Entry with the largest error.
    pub worst: usize,
    /// First entry whose analytic gradient is not finite.
    pub non_finite: Option<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub stage: String,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
    pub dot_product_rel_err: f64,
    pub dot_product_passed: bool,
    pub passed: bool,
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stage: {} (tolerance {:.0e})", self.stage, self.tolerance)?;
        writeln!(f, "{:<24} {:>8} {:>14}  result", "group", "entries", "max rel err")?;
        for g in &self.groups {
            let result = match g.non_finite {
                Some(i) => format!("FAIL (non-finite at {}[{i}])", g.name),
                None if g.passed => "pass".to_string(),
                None => format!("FAIL (worst at {}[{}])", g.name, g.worst),
            };
            writeln!(
                f,
                "{:<24} {:>8} {:>14.3e}  {result}",
                g.name, g.entries, g.max_rel_err
            )?;
        }
        writeln!(
            f,
            "{:<24} {:>8} {:>14.3e}  {}",
            "dot product",
            1,
            self.dot_product_rel_err,
            if self.dot_product_passed { "pass" } else { "FAIL" }
        )?;
        write!(f, "overall: {}", if self.passed { "pass" } else { "FAIL" })
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// A random instance and loss weights, all parameters in flat form.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub grid: PixelGrid,
    pub model: PairwiseModel,
    pub unary: Array2<f64>,
    pub kernel_weights: Vec<f64>,
    pub compatibility: Array2<f64>,
    pub class_weights: Vec<f64>,
    pub scores: Vec<f64>,
    pub instance_kernel_weights: Vec<f64>,
    labels: Vec<usize>,
    boxes: Vec<BoundingBox>,
    foregrounds: Vec<Vec<usize>>,
    /// Weights on the final marginals.
    pub loss_q: Array2<f64>,
    /// Weights on the final `Pr(Y = 1)`.
    pub loss_y: Vec<f64>,
    pub settings: InferenceSettings,
}

impl GradcheckInstance {
    pub fn random(spec: &GradcheckSpec) -> Result<Self> {
        if spec.num_labels < 2 {
            return Err(Error::Invalid("gradcheck needs at least two labels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let grid = PixelGrid::new(spec.width, spec.height)?;
        let n = grid.len();
        let l = spec.num_labels;

        let pixels = (0..n)
            .map(|_| [0; 3].map(|_: i32| rng.gen_range(0.0..255.0)))
            .collect();
        let image = ColorImage::new(grid, pixels)?;
        let kernels = vec![
            KernelSpec::spatial(rng.gen_range(0.5..1.5), 1.5),
            KernelSpec::bilateral(rng.gen_range(0.5..1.5), 3.0, 80.0),
        ];
        let kernel_weights: Vec<f64> = kernels.iter().map(|k| k.weight).collect();
        let config = PairwiseConfig::potts(l, kernels)?;
        let model = PairwiseModel::build(config, grid, Some(&image), spec.backend)?;

        let unary = Array2::from_shape_fn((n, l), |_| rng.gen_range(-1.5..1.5));
        let compatibility = Array2::from_shape_fn((l, l), |(a, b)| {
            let base = if a == b { 0.0 } else { 1.0 };
            base + rng.gen_range(-0.3..0.3)
        });
        let class_weights: Vec<f64> = (1..l).map(|_| rng.gen_range(0.5..2.0)).collect();

        let mut labels = Vec::new();
        let mut boxes = Vec::new();
        let mut foregrounds = Vec::new();
        let mut scores = Vec::new();
        for _ in 0..spec.num_detections {
            let label = rng.gen_range(1..l);
            let bw = rng.gen_range(2..=spec.width.max(2)).min(spec.width);
            let bh = rng.gen_range(2..=spec.height.max(2)).min(spec.height);
            let x0 = rng.gen_range(0..=spec.width - bw);
            let y0 = rng.gen_range(0..=spec.height - bh);
            let bbox = BoundingBox::new(x0, y0, x0 + bw, y0 + bh);
            let mut fg: Vec<usize> = bbox.pixels(&grid).filter(|_| rng.gen_bool(0.7)).collect();
            if fg.is_empty() {
                fg.push(grid.index(x0, y0));
            }
            labels.push(label);
            boxes.push(bbox);
            foregrounds.push(fg);
            scores.push(rng.gen_range(0.2..0.9));
        }
        let instance_kernel_weights = (0..kernel_weights.len())
            .map(|_| rng.gen_range(0.5..1.5))
            .collect();
        let loss_q = Array2::from_shape_fn((n, l), |_| rng.gen_range(-1.0..1.0));
        let loss_y = (0..spec.num_detections).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(GradcheckInstance {
            grid,
            model,
            unary,
            kernel_weights,
            compatibility,
            class_weights,
            scores,
            instance_kernel_weights,
            labels,
            boxes,
            foregrounds,
            loss_q,
            loss_y,
            settings: InferenceSettings {
                iterations: spec.iterations,
                record_tape: true,
                ..Default::default()
            },
        })
    }

    fn inputs(&self) -> Result<(UnaryField, Vec<Detection>, PairwiseModel, DetectionParams)> {
        let unary = UnaryField::new(self.grid, self.unary.clone())?;
        let detections = (0..self.scores.len())
            .map(|d| {
                Detection::new(
                    &self.grid,
                    self.labels[d],
                    self.scores[d],
                    self.boxes[d],
                    self.foregrounds[d].clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let kernels = self
            .model
            .config()
            .kernels
            .iter()
            .zip(&self.kernel_weights)
            .map(|(k, &weight)| KernelSpec {
                weight,
                features: k.features,
            })
            .collect();
        let model = self
            .model
            .with_config(PairwiseConfig::new(kernels, self.compatibility.clone())?)?;
        let params = DetectionParams::new(self.class_weights.clone())?;
        Ok((unary, detections, model, params))
    }

    /// Semantic run with a tape.
    pub fn semantic_tape(&self) -> Result<Tape> {
        let (unary, dets, model, params) = self.inputs()?;
        let r = semantic::run(&unary, &dets, &model, &params, &self.settings)?;
        Ok(r.tape.expect("tape requested"))
    }

    /// `<loss_q, Q_T> + <loss_y, y_T>`.
    pub fn semantic_loss(&self) -> Result<f64> {
        let (unary, dets, model, params) = self.inputs()?;
        let settings = InferenceSettings {
            record_tape: false,
            ..self.settings.clone()
        };
        let r = semantic::run(&unary, &dets, &model, &params, &settings)?;
        let yl: f64 = r.y_marginals().iter().zip(&self.loss_y).map(|(a, b)| a * b).sum();
        Ok((&r.q.q() * &self.loss_q).sum() + yl)
    }

    /// Instance-stage loss weights, one column per instance label.
    fn instance_loss(&self) -> Array2<f64> {
        let k = self.scores.len() + 1;
        Array2::from_shape_fn((self.grid.len(), k), |(i, c)| {
            self.loss_q[[i, c % self.loss_q.ncols()]] * if c % 2 == 0 { 1.0 } else { -0.7 }
        })
    }

    /// `<w, Q_inst_T>` after both CRFs.
    pub fn composed_loss(&self) -> Result<f64> {
        let (unary, dets, model, params) = self.inputs()?;
        let out = composed_forward(
            &unary,
            &dets,
            &model,
            &params,
            &self.instance_kernel_weights,
            &self.settings,
        )?;
        Ok((&out.instance_q() * &self.instance_loss()).sum())
    }

    fn groups(&self, composed: bool) -> Vec<(&'static str, usize)> {
        let mut g = vec![
            ("unaries", self.unary.len()),
            ("kernel_weights", self.kernel_weights.len()),
            ("compatibility", self.compatibility.len()),
            ("class_weights", self.class_weights.len()),
            ("y_unary_inputs", self.scores.len()),
        ];
        if composed {
            g.push(("instance_kernel_weights", self.instance_kernel_weights.len()));
        }
        g
    }

    fn param_mut(&mut self, group: &str, i: usize) -> &mut f64 {
        match group {
            "unaries" => &mut self.unary.as_slice_mut().expect("standard layout")[i],
            "kernel_weights" => &mut self.kernel_weights[i],
            "compatibility" => &mut self.compatibility.as_slice_mut().expect("standard layout")[i],
            "class_weights" => &mut self.class_weights[i],
            "y_unary_inputs" => &mut self.scores[i],
            "instance_kernel_weights" => &mut self.instance_kernel_weights[i],
            _ => unreachable!("unknown parameter group {group}"),
        }
    }
}

fn flatten(bundle: &super::GradientBundle, inst: Option<&[f64]>) -> Vec<Vec<f64>> {
    let mut v = vec![
        bundle.d_unary.iter().copied().collect(),
        bundle.d_kernel_weights.clone(),
        bundle.d_compatibility.iter().copied().collect(),
        bundle.d_class_weights.clone(),
        bundle.d_y_unary_inputs.clone(),
    ];
    if let Some(w) = inst {
        v.push(w.to_vec());
    }
    v
}

fn central_difference(
    inst: &GradcheckInstance,
    group: &str,
    i: usize,
    loss: &dyn Fn(&GradcheckInstance) -> Result<f64>,
) -> Result<f64> {
    let mut probe = inst.clone();
    let theta = *probe.param_mut(group, i);
    let h = 1e-5 * theta.abs().max(1.0);
    *probe.param_mut(group, i) = theta + h;
    let plus = loss(&probe)?;
    *probe.param_mut(group, i) = theta - h;
    let minus = loss(&probe)?;
    Ok((plus - minus) / (2.0 * h))
}

fn check(
    stage: &str,
    inst: &GradcheckInstance,
    analytic: Vec<Vec<f64>>,
    composed: bool,
    tolerance: f64,
    loss: &dyn Fn(&GradcheckInstance) -> Result<f64>,
) -> Result<GradcheckReport> {
    let mut groups = Vec::new();
    for ((name, len), grad) in inst.groups(composed).into_iter().zip(&analytic) {
        debug_assert_eq!(len, grad.len());
        let non_finite = grad.iter().position(|v| !v.is_finite());
        let mut max_rel_err = 0.0;
        let mut worst = 0;
        if non_finite.is_none() {
            for (i, &a) in grad.iter().enumerate() {
                let num = central_difference(inst, name, i, loss)?;
                let err = relative_error(a, num);
                if err > max_rel_err {
                    max_rel_err = err;
                    worst = i;
                }
            }
        }
        groups.push(GroupReport {
            name: name.to_string(),
            entries: len,
            max_rel_err,
            worst,
            non_finite,
            passed: non_finite.is_none() && max_rel_err <= tolerance,
        });
    }

    // <J u, v> by a finite difference along a random unit direction u
    let mut rng = ChaCha8Rng::seed_from_u64(0x646f74);
    let dirs: Vec<Vec<f64>> = analytic
        .iter()
        .map(|g| g.iter().map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let norm = dirs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let along = |t: f64| -> Result<f64> {
        let mut probe = inst.clone();
        for ((name, _), dir) in inst.groups(composed).into_iter().zip(&dirs) {
            for (i, u) in dir.iter().enumerate() {
                *probe.param_mut(name, i) += t * u / norm;
            }
        }
        loss(&probe)
    };
    let h = 1e-5;
    let numeric = (along(h)? - along(-h)?) / (2.0 * h);
    let analytic_dot: f64 = analytic
        .iter()
        .flatten()
        .zip(dirs.iter().flatten())
        .map(|(g, u)| g * u / norm)
        .sum();
    let dot_product_rel_err = relative_error(analytic_dot, numeric);
    let dot_product_passed = dot_product_rel_err <= DOT_PRODUCT_TOLERANCE;
    let passed = dot_product_passed && groups.iter().all(|g| g.passed);
    Ok(GradcheckReport {
        stage: stage.to_string(),
        tolerance,
        groups,
        dot_product_rel_err,
        dot_product_passed,
        passed,
    })
}

/// Checks the semantic-stage gradients of `<G, Q_T> + <g, y_T>`.
pub fn gradcheck_semantic(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    gradcheck_semantic_with(spec, &|_| Ok(()))
}

/// Like [`gradcheck_semantic`], with a hook that may alter the tape before
/// the backward pass.
#[doc(hidden)]
pub fn gradcheck_semantic_with(
    spec: &GradcheckSpec,
    tamper: &dyn Fn(&mut Tape) -> Result<()>,
) -> Result<GradcheckReport> {
    let inst = GradcheckInstance::random(spec)?;
    let mut tape = inst.semantic_tape()?;
    tamper(&mut tape)?;
    let bundle = backward_with_y(&tape, inst.loss_q.view(), Some(&inst.loss_y))?;
    check(
        "semantic",
        &inst,
        flatten(&bundle, None),
        false,
        spec.tolerance,
        &|p| p.semantic_loss(),
    )
}

/// Checks gradients through semantic CRF, identification and instance CRF.
pub fn gradcheck_composed(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    let inst = GradcheckInstance::random(spec)?;
    let (unary, dets, model, params) = inst.inputs()?;
    let out = composed_forward(
        &unary,
        &dets,
        &model,
        &params,
        &inst.instance_kernel_weights,
        &inst.settings,
    )?;
    let grads = composed_backward(&out, inst.instance_loss().view())?;
    check(
        "semantic+instance",
        &inst,
        flatten(&grads.semantic, Some(&grads.d_instance_kernel_weights)),
        true,
        spec.tolerance,
        &|p| p.composed_loss(),
    )
}
