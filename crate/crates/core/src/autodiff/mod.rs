//! Reverse-mode gradients through unrolled parallel mean field.
//!
//! A [`Tape`] records the marginals, detection marginals and per-kernel
//! filter outputs of every round. [`backward`] walks the rounds in reverse:
//! sigmoid backward for the `Y` updates, softmax backward for the pixel
//! updates, the transpose of each Gaussian filter for the pairwise message,
//! and both the pixel and `Y` paths of the detection message.

mod composed;
mod gradcheck;

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::filter::FilterPlan;
use crate::grid::PixelGrid;
use crate::potentials::{Detection, DetectionParams, PairwiseModel, UnaryField, YUnaryMode};
use crate::semantic::{parallel_x_round, y_value, Round};

pub use composed::{composed_backward, composed_forward, ComposedGradients, ComposedOutput};
pub use gradcheck::{
    gradcheck_composed, gradcheck_semantic, gradcheck_semantic_with, GradcheckInstance,
    GradcheckReport, GradcheckSpec, GroupReport,
};

/// Forward intermediates of one unrolled parallel mean-field run.
#[derive(Debug, Clone)]
pub struct Tape {
    grid: PixelGrid,
    unary: Array2<f64>,
    pairwise: PairwiseModel,
    detections: Vec<Detection>,
    params: DetectionParams,
    /// `Q_0 ..= Q_T`.
    q: Vec<Array2<f64>>,
    /// `y_0 ..= y_T`.
    y: Vec<Vec<f64>>,
    /// `filtered[t][m] = filter_m(Q_t)`, the kernel outputs feeding round
    /// `t + 1`.
    filtered: Vec<Vec<Array2<f64>>>,
    /// `field[t] = sum_m w_m filtered[t][m]`.
    field: Vec<Array2<f64>>,
}

impl Tape {
    pub(crate) fn start(
        unary: &UnaryField,
        pairwise: &PairwiseModel,
        detections: &[Detection],
        params: &DetectionParams,
        q0: &Array2<f64>,
        y0: &[f64],
    ) -> Self {
        Tape {
            grid: unary.grid(),
            unary: unary.energies().to_owned(),
            pairwise: pairwise.clone(),
            detections: detections.to_vec(),
            params: params.clone(),
            q: vec![q0.clone()],
            y: vec![y0.to_vec()],
            filtered: Vec::new(),
            field: Vec::new(),
        }
    }

    pub(crate) fn push_round(&mut self, round: &Round, y: &[f64]) {
        self.filtered.push(
            round
                .filtered
                .iter()
                .map(|m| m.clone().expect("tape rounds keep every filter output"))
                .collect(),
        );
        self.field.push(round.field.clone());
        self.q.push(round.q.clone());
        self.y.push(y.to_vec());
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    /// Number of recorded rounds `T`.
    pub fn rounds(&self) -> usize {
        self.q.len() - 1
    }

    pub fn q(&self, t: usize) -> ArrayView2<'_, f64> {
        self.q[t].view()
    }

    pub fn y(&self, t: usize) -> &[f64] {
        &self.y[t]
    }

    pub fn final_q(&self) -> ArrayView2<'_, f64> {
        self.q[self.rounds()].view()
    }

    pub fn final_y(&self) -> &[f64] {
        &self.y[self.rounds()]
    }

    pub fn pairwise(&self) -> &PairwiseModel {
        &self.pairwise
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    /// Recomputes every round from its recorded inputs and checks that the
    /// outputs agree bitwise.
    pub fn replay(&self) -> Result<()> {
        for t in 1..=self.rounds() {
            let round = parallel_x_round(
                self.q[t - 1].view(),
                &self.y[t - 1],
                self.unary.view(),
                &self.pairwise,
                &self.detections,
                &self.params,
                true,
            )?;
            if round.q != self.q[t] || round.field != self.field[t - 1] {
                return Err(Error::TapeMismatch(format!("round {t} marginals differ")));
            }
            let y: Vec<f64> = self
                .detections
                .iter()
                .map(|d| y_value(round.q.view(), d, &self.params))
                .collect();
            if y != self.y[t] {
                return Err(Error::TapeMismatch(format!(
                    "round {t} detection marginals differ"
                )));
            }
        }
        Ok(())
    }

    /// Swaps the filter plans used by [`backward`], leaving the recorded
    /// forward values untouched. Only useful to build negative controls.
    #[doc(hidden)]
    pub fn replace_plans(&mut self, plans: Vec<Arc<FilterPlan>>) -> Result<()> {
        self.pairwise = PairwiseModel::from_plans(self.pairwise.config().clone(), plans)?;
        Ok(())
    }
}

/// Gradients of a scalar loss with respect to every learnable input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// `N x L`.
    pub d_unary: Array2<f64>,
    /// One entry per kernel.
    pub d_kernel_weights: Vec<f64>,
    /// `L x L`.
    pub d_compatibility: Array2<f64>,
    /// One entry per foreground class, indexed by `label - 1`.
    pub d_class_weights: Vec<f64>,
    /// One entry per detection: the derivative with respect to its score,
    /// which enters through both the clique coefficient and the `Y` unary.
    pub d_y_unary_inputs: Vec<f64>,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.d_unary.iter().all(|v| v.is_finite())
            && self.d_kernel_weights.iter().all(|v| v.is_finite())
            && self.d_compatibility.iter().all(|v| v.is_finite())
            && self.d_class_weights.iter().all(|v| v.is_finite())
            && self.d_y_unary_inputs.iter().all(|v| v.is_finite())
    }
}

/// Gradients of `<d_output, Q_T>`.
pub fn backward(tape: &Tape, d_output: ArrayView2<f64>) -> Result<GradientBundle> {
    backward_with_y(tape, d_output, None)
}

/// Gradients of `<d_q, Q_T> + <d_y, y_T>`.
pub fn backward_with_y(
    tape: &Tape,
    d_q: ArrayView2<f64>,
    d_y: Option<&[f64]>,
) -> Result<GradientBundle> {
    let (n, l) = tape.unary.dim();
    let nd = tape.detections.len();
    if d_q.dim() != (n, l) {
        return Err(Error::TapeMismatch(format!(
            "output gradient is {}x{}, tape marginals are {n}x{l}",
            d_q.nrows(),
            d_q.ncols()
        )));
    }
    if let Some(dy) = d_y {
        if dy.len() != nd {
            return Err(Error::TapeMismatch(format!(
                "{} detection gradients for {nd} recorded detections",
                dy.len()
            )));
        }
    }
    let kernels = &tape.pairwise.config().kernels;
    let mu = &tape.pairwise.config().compatibility;
    if tape.pairwise.plans().iter().any(|p| p.grid().len() != n) {
        return Err(Error::TapeMismatch("filter plans do not match the tape grid".into()));
    }

    let params = &tape.params;
    let coeff: Vec<f64> = tape.detections.iter().map(|d| d.coefficient(params)).collect();

    let mut g_q = d_q.to_owned();
    let mut g_y: Vec<f64> = d_y.map_or_else(|| vec![0.0; nd], <[f64]>::to_vec);
    let mut d_unary = Array2::<f64>::zeros((n, l));
    let mut d_kernel = vec![0.0; kernels.len()];
    let mut d_mu = Array2::<f64>::zeros((l, l));
    let mut g_coeff = vec![0.0; nd];
    let mut g_prior = vec![0.0; nd];

    for t in (1..=tape.rounds()).rev() {
        let q = &tape.q[t];

        // y_t = sigmoid(prior + c (2 S - |F|)), S = sum_F Q_t(l_d)
        for (d, det) in tape.detections.iter().enumerate() {
            let y = tape.y[t][d];
            let gz = g_y[d] * y * (1.0 - y);
            if gz == 0.0 {
                continue;
            }
            let s: f64 = det.foreground().iter().map(|&i| q[[i, det.label()]]).sum();
            g_prior[d] += gz;
            g_coeff[d] += gz * (2.0 * s - det.foreground().len() as f64);
            for &i in det.foreground() {
                g_q[[i, det.label()]] += 2.0 * coeff[d] * gz;
            }
        }

        // Q_t = softmax(-E_t)
        let g_e = neg_softmax_backward(q.view(), g_q.view());
        d_unary += &g_e;

        // E_t += field mu^T
        let field = &tape.field[t - 1];
        d_mu += &g_e.t().dot(field);
        let g_field = g_e.dot(mu);

        // E_t += detection message built from y_{t-1}
        let mut g_y_prev = vec![0.0; nd];
        for (d, det) in tape.detections.iter().enumerate() {
            let yp = tape.y[t - 1][d];
            let mut on = 0.0;
            let mut off = 0.0;
            for &i in det.foreground() {
                let row = g_e.row(i);
                let own = row[det.label()];
                on += own;
                off += row.sum() - own;
            }
            g_coeff[d] += on * (1.0 - yp) + off * yp;
            g_y_prev[d] = coeff[d] * (off - on);
        }

        // field = sum_m w_m filter_m(Q_{t-1})
        let mut g_q_prev = Array2::<f64>::zeros((n, l));
        for (m, (k, plan)) in kernels.iter().zip(tape.pairwise.plans()).enumerate() {
            d_kernel[m] += (&g_field * &tape.filtered[t - 1][m]).sum();
            if k.weight != 0.0 {
                let adj = plan.filter_adjoint((&g_field * k.weight).view())?;
                g_q_prev += &adj;
            }
        }
        g_q = g_q_prev;
        g_y = g_y_prev;
    }

    // Q_0 = softmax(-U)
    d_unary += &neg_softmax_backward(tape.q[0].view(), g_q.view());

    // y_0 = s~, c_d = w s / |F|, prior = logit(s~)
    let mut d_class = vec![0.0; params.class_weights().len()];
    let mut d_y_unary_inputs = vec![0.0; nd];
    for (d, det) in tape.detections.iter().enumerate() {
        let size = det.foreground().len() as f64;
        let w = params.weight(det.label());
        if let Some(slot) = det.label().checked_sub(1).and_then(|k| d_class.get_mut(k)) {
            *slot += g_coeff[d] * det.score() / size;
        }
        let mut g_clamped = g_y[d];
        if params.y_unary == YUnaryMode::LogScore {
            let s = det.clamped_score();
            g_clamped += g_prior[d] / (s * (1.0 - s));
        }
        let inside = det.clamped_score() == det.score();
        d_y_unary_inputs[d] = g_coeff[d] * w / size + if inside { g_clamped } else { 0.0 };
    }

    Ok(GradientBundle {
        d_unary,
        d_kernel_weights: d_kernel,
        d_compatibility: d_mu,
        d_class_weights: d_class,
        d_y_unary_inputs,
    })
}

/// Gradient with respect to the energies `E` of `Q = softmax(-E)`.
pub(crate) fn neg_softmax_backward(q: ArrayView2<f64>, g_q: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(q.dim());
    for ((qi, gi), mut oi) in q.outer_iter().zip(g_q.outer_iter()).zip(out.outer_iter_mut()) {
        let inner: f64 = qi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
        let row: Array1<f64> = qi
            .iter()
            .zip(gi.iter())
            .map(|(p, g)| -p * (g - inner))
            .collect();
        oi.assign(&row);
    }
    out
}
