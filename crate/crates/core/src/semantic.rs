//! Mean-field inference for the semantic CRF with detection potentials.
//!
//! A parallel round filters the previous marginals once per kernel, forms
//! the pairwise and detection messages, renormalizes every pixel, and then
//! updates each detection's `Pr(Y_d = 1)` from the new marginals.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::numeric::{neg_softmax_inplace, sigmoid};
use crate::potentials::{
    check_detections, free_energy, Detection, DetectionParams, DistributionField, Labeling,
    PairwiseModel, UnaryField,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// All pixels from the previous round, then all detections.
    #[default]
    Parallel,
    /// One pixel at a time in raster order with exact filtering, then one
    /// detection at a time. Each step minimizes the free energy exactly.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceSettings {
    pub iterations: usize,
    pub mode: Mode,
    /// Stop once `max |Q_t - Q_{t-1}| < epsilon`; `0` runs all iterations.
    pub epsilon: f64,
    pub record_tape: bool,
    pub compute_free_energy: bool,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings {
            iterations: 5,
            mode: Mode::Parallel,
            epsilon: 0.0,
            record_tape: false,
            compute_free_energy: false,
        }
    }
}

impl InferenceSettings {
    pub fn with_iterations(iterations: usize) -> Self {
        InferenceSettings {
            iterations,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Invalid("at least one iteration is required".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Invalid(format!(
                "convergence epsilon {} must be non-negative",
                self.epsilon
            )));
        }
        if self.record_tape && self.mode == Mode::Sequential {
            return Err(Error::Invalid(
                "tapes can only be recorded in parallel mode".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SemanticResult {
    pub q: DistributionField,
    /// Input detections with recalibrated `y_marginal`.
    pub detections: Vec<Detection>,
    pub iterations: usize,
    pub free_energy: Option<f64>,
    pub tape: Option<Tape>,
}

impl SemanticResult {
    pub fn y_marginals(&self) -> Vec<f64> {
        self.detections.iter().map(|d| d.y_marginal).collect()
    }
}

/// `Q_i = softmax(-unary_i)` and `Pr(Y_d = 1) = clamp(s_d)`.
pub fn init_state(
    unary: &UnaryField,
    detections: &[Detection],
    _params: &DetectionParams,
) -> Result<(DistributionField, Vec<f64>)> {
    check_detections(detections, unary.grid(), unary.num_labels())?;
    let q = DistributionField::from_unary(unary);
    let y = detections.iter().map(|d| d.clamped_score()).collect();
    Ok((q, y))
}

/// Filter outputs and messages of one parallel round.
#[derive(Debug, Clone)]
pub(crate) struct Round {
    /// `filter_m(Q_{t-1})` per kernel; empty for kernels skipped because
    /// their weight is zero and no tape is recorded.
    pub filtered: Vec<Option<Array2<f64>>>,
    /// `sum_m w_m filter_m(Q_{t-1})`.
    pub field: Array2<f64>,
    pub q: Array2<f64>,
}

pub(crate) fn parallel_x_round(
    q_prev: ArrayView2<f64>,
    y_prev: &[f64],
    unary: ArrayView2<f64>,
    pairwise: &PairwiseModel,
    detections: &[Detection],
    params: &DetectionParams,
    keep_filters: bool,
) -> Result<Round> {
    let (n, l) = q_prev.dim();
    let mut field = Array2::<f64>::zeros((n, l));
    let mut filtered = Vec::with_capacity(pairwise.plans().len());
    let mut any = false;
    for (k, plan) in pairwise.config().kernels.iter().zip(pairwise.plans()) {
        if k.weight == 0.0 && !keep_filters {
            filtered.push(None);
            continue;
        }
        let m = plan.filter(q_prev)?;
        any = true;
        field.scaled_add(k.weight, &m);
        filtered.push(keep_filters.then_some(m));
    }

    // energy = unary + field mu^T + detection message
    let mut energy = unary.to_owned();
    let mu = &pairwise.config().compatibility;
    if any {
        energy += &field.dot(&mu.t());
    }
    add_detection_message(&mut energy, detections, params, y_prev);
    for row in energy.outer_iter_mut() {
        neg_softmax_inplace(row);
    }
    Ok(Round {
        filtered,
        field,
        q: energy,
    })
}

/// `energy_i(l) += D_i(l)` with
/// `D_i(l) = sum_{d: i in F_d} c_d ([l = l_d](1 - y_d) + [l != l_d] y_d)`.
pub(crate) fn add_detection_message(
    energy: &mut Array2<f64>,
    detections: &[Detection],
    params: &DetectionParams,
    y: &[f64],
) {
    for (det, &yd) in detections.iter().zip(y) {
        let c = det.coefficient(params);
        if c == 0.0 {
            continue;
        }
        let on = c * (1.0 - yd);
        let off = c * yd;
        for &i in det.foreground() {
            for (l, e) in energy.row_mut(i).iter_mut().enumerate() {
                *e += if l == det.label() { on } else { off };
            }
        }
    }
}

/// Sum of `Q_i(l_d)` over the foreground of `det`.
pub(crate) fn agreement(q: ArrayView2<f64>, det: &Detection) -> f64 {
    det.foreground().iter().map(|&i| q[[i, det.label()]]).sum()
}

/// New `Pr(Y_d = 1)` for one detection given the pixel marginals.
pub(crate) fn y_value(q: ArrayView2<f64>, det: &Detection, params: &DetectionParams) -> f64 {
    let c = det.coefficient(params);
    let (e0, e1) = params.y_unary(det);
    let s = agreement(q, det);
    // exp(-e1 - B) vs exp(-e0 - A), with A = c S and B = c (|F| - S)
    sigmoid(e0 - e1 + c * (2.0 * s - det.foreground().len() as f64))
}

/// One parallel update of all pixel marginals.
pub fn x_update(
    q: &DistributionField,
    y_marginals: &[f64],
    unary: &UnaryField,
    pairwise: &PairwiseModel,
    detections: &[Detection],
    params: &DetectionParams,
) -> Result<DistributionField> {
    check_state(q, y_marginals, unary, pairwise, detections)?;
    let round = parallel_x_round(
        q.q(),
        y_marginals,
        unary.energies(),
        pairwise,
        detections,
        params,
        false,
    )?;
    Ok(DistributionField::from_normalized(q.grid(), round.q))
}

/// Recalibrated `Pr(Y_d = 1)` for every detection given `q`.
pub fn y_update(
    q: &DistributionField,
    detections: &[Detection],
    params: &DetectionParams,
) -> Result<Vec<f64>> {
    check_detections(detections, q.grid(), q.num_labels())?;
    Ok(detections.iter().map(|d| y_value(q.q(), d, params)).collect())
}

/// Per-pixel argmax, ties toward the lowest label.
pub fn decode(q: &DistributionField) -> Labeling {
    q.decode()
}

pub fn run(
    unary: &UnaryField,
    detections: &[Detection],
    pairwise: &PairwiseModel,
    params: &DetectionParams,
    settings: &InferenceSettings,
) -> Result<SemanticResult> {
    let (q0, y0) = init_state(unary, detections, params)?;
    run_from(&q0, &y0, unary, detections, pairwise, params, settings)
}

/// [`run`] starting from the given marginals instead of the initial state.
pub fn run_from(
    q0: &DistributionField,
    y0: &[f64],
    unary: &UnaryField,
    detections: &[Detection],
    pairwise: &PairwiseModel,
    params: &DetectionParams,
    settings: &InferenceSettings,
) -> Result<SemanticResult> {
    settings.validate()?;
    check_state(q0, y0, unary, pairwise, detections)?;
    let grid = unary.grid();

    let mut q = q0.q().to_owned();
    let mut y = y0.to_vec();
    let mut tape = settings
        .record_tape
        .then(|| Tape::start(unary, pairwise, detections, params, &q, &y));
    let mut iterations = 0;

    for _ in 0..settings.iterations {
        iterations += 1;
        let q_new = match settings.mode {
            Mode::Parallel => {
                let round = parallel_x_round(
                    q.view(),
                    &y,
                    unary.energies(),
                    pairwise,
                    detections,
                    params,
                    settings.record_tape,
                )?;
                let y_new: Vec<f64> = detections
                    .iter()
                    .map(|d| y_value(round.q.view(), d, params))
                    .collect();
                if let Some(t) = tape.as_mut() {
                    t.push_round(&round, &y_new);
                }
                y = y_new;
                round.q
            }
            Mode::Sequential => {
                let mut q_new = q.clone();
                sequential_sweep(&mut q_new, &mut y, unary, pairwise, detections, params, &mut |_, _| {});
                q_new
            }
        };
        let delta = q
            .iter()
            .zip(q_new.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = q_new;
        if settings.epsilon > 0.0 && delta < settings.epsilon {
            break;
        }
    }

    let q = DistributionField::from_normalized(grid, q);
    let free_energy = if settings.compute_free_energy {
        Some(free_energy(&q, &y, unary, pairwise, detections, params)?)
    } else {
        None
    };
    let detections = detections
        .iter()
        .zip(&y)
        .map(|(d, &yd)| {
            let mut d = d.clone();
            d.y_marginal = yd;
            d
        })
        .collect();
    Ok(SemanticResult {
        q,
        detections,
        iterations,
        free_energy,
        tape,
    })
}

/// One sequential sweep from `(q, y)`, calling `observe` with the state
/// after every single-variable update: each pixel in raster order, then
/// each detection.
pub fn sequential_sweep_observed(
    q: &DistributionField,
    y: &[f64],
    unary: &UnaryField,
    pairwise: &PairwiseModel,
    detections: &[Detection],
    params: &DetectionParams,
    observe: &mut dyn FnMut(&DistributionField, &[f64]),
) -> Result<(DistributionField, Vec<f64>)> {
    check_state(q, y, unary, pairwise, detections)?;
    let grid = q.grid();
    let mut qa = q.q().to_owned();
    let mut ya = y.to_vec();
    sequential_sweep(&mut qa, &mut ya, unary, pairwise, detections, params, &mut |qs, ys| {
        observe(&DistributionField::from_normalized(grid, qs.clone()), ys)
    });
    Ok((DistributionField::from_normalized(grid, qa), ya))
}

/// Exact coordinate updates: each pixel in raster order, then each
/// detection. Uses the symmetric part of the compatibility matrix, which
/// is what the free energy sees.
pub(crate) fn sequential_sweep(
    q: &mut Array2<f64>,
    y: &mut [f64],
    unary: &UnaryField,
    pairwise: &PairwiseModel,
    detections: &[Detection],
    params: &DetectionParams,
    observe: &mut dyn FnMut(&Array2<f64>, &[f64]),
) {
    let (n, l) = q.dim();
    let mu = &pairwise.config().compatibility;
    let mu_sym = (mu + &mu.t()) * 0.5;
    let u = unary.energies();

    let mut member: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (d, det) in detections.iter().enumerate() {
        for &i in det.foreground() {
            member[i].push(d);
        }
    }

    let mut row = ndarray::Array1::<f64>::zeros(l);
    for i in 0..n {
        let mut field = vec![0.0; l];
        for (k, plan) in pairwise.config().kernels.iter().zip(pairwise.plans()) {
            if k.weight == 0.0 {
                continue;
            }
            let f = plan.filter_at(i, q.view());
            for (acc, v) in field.iter_mut().zip(f) {
                *acc += k.weight * v;
            }
        }
        for a in 0..l {
            let pair: f64 = (0..l).map(|b| mu_sym[[a, b]] * field[b]).sum();
            row[a] = u[[i, a]] + pair;
        }
        for &d in &member[i] {
            let det = &detections[d];
            let c = det.coefficient(params);
            for (a, r) in row.iter_mut().enumerate() {
                *r += if a == det.label() {
                    c * (1.0 - y[d])
                } else {
                    c * y[d]
                };
            }
        }
        neg_softmax_inplace(row.view_mut());
        q.row_mut(i).assign(&row);
        observe(q, y);
    }
    for d in 0..detections.len() {
        y[d] = y_value(q.view(), &detections[d], params);
        observe(q, y);
    }
}

fn check_state(
    q: &DistributionField,
    y: &[f64],
    unary: &UnaryField,
    pairwise: &PairwiseModel,
    detections: &[Detection],
) -> Result<()> {
    if unary.grid() != q.grid() {
        return Err(Error::shape("unary grid", q.grid(), unary.grid()));
    }
    if unary.num_labels() != q.num_labels() {
        return Err(Error::shape("unary labels", q.num_labels(), unary.num_labels()));
    }
    if y.len() != detections.len() {
        return Err(Error::shape("detection marginals", detections.len(), y.len()));
    }
    pairwise.check(q.grid(), q.num_labels())?;
    check_detections(detections, q.grid(), q.num_labels())
}
