//! Gradients through semantic CRF, instance identification and instance CRF.

use ndarray::{Array2, ArrayView2};

use super::{backward, backward_with_y, GradientBundle, Tape};
use crate::error::{Error, Result};
use crate::instance::{
    identification_mass, instance_pairwise, instance_unaries, IDENTIFICATION_FLOOR,
};
use crate::potentials::{
    Detection, DetectionParams, DistributionField, PairwiseModel, UnaryField, BACKGROUND,
};
use crate::semantic::{self, InferenceSettings};

/// Forward record of the composed map from semantic inputs to instance
/// marginals.
#[derive(Debug, Clone)]
pub struct ComposedOutput {
    pub semantic: Tape,
    /// Detections carrying their final `Pr(Y = 1)`.
    pub detections: Vec<Detection>,
    /// Row-normalized identification distribution.
    pub identification: Array2<f64>,
    pub instance: Tape,
}

impl ComposedOutput {
    pub fn instance_q(&self) -> ArrayView2<'_, f64> {
        self.instance.final_q()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedGradients {
    pub semantic: GradientBundle,
    pub d_instance_kernel_weights: Vec<f64>,
}

/// Runs both CRFs with tapes. `settings` applies to both stages; its tape
/// flag is forced on.
pub fn composed_forward(
    unary: &UnaryField,
    detections: &[Detection],
    pairwise: &PairwiseModel,
    params: &DetectionParams,
    instance_kernel_weights: &[f64],
    settings: &InferenceSettings,
) -> Result<ComposedOutput> {
    let settings = InferenceSettings {
        record_tape: true,
        epsilon: 0.0,
        ..settings.clone()
    };
    let sem = semantic::run(unary, detections, pairwise, params, &settings)?;
    let grid = unary.grid();
    let mut ident = identification_mass(sem.q.q(), &sem.detections, grid);
    for mut row in ident.outer_iter_mut() {
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    let p = DistributionField::new(grid, ident.clone())?;
    let model = instance_pairwise(pairwise, instance_kernel_weights, sem.detections.len() + 1)?;
    let none = DetectionParams::new(Vec::new())?;
    let inst = semantic::run(&instance_unaries(&p), &[], &model, &none, &settings)?;
    Ok(ComposedOutput {
        semantic: sem.tape.expect("tape requested"),
        detections: sem.detections,
        identification: ident,
        instance: inst.tape.expect("tape requested"),
    })
}

/// Gradients of `<d_output, Q_inst_T>`.
pub fn composed_backward(out: &ComposedOutput, d_output: ArrayView2<f64>) -> Result<ComposedGradients> {
    let inst = backward(&out.instance, d_output)?;
    let p = &out.identification;
    if inst.d_unary.dim() != p.dim() {
        return Err(Error::TapeMismatch("instance tape does not match identification".into()));
    }

    // U = -ln max(P, floor)
    let g_p = Array2::from_shape_fn(p.dim(), |(i, k)| {
        let v = p[[i, k]];
        if v > IDENTIFICATION_FLOOR {
            -inst.d_unary[[i, k]] / v
        } else {
            0.0
        }
    });

    // P = m / sum(m), m floored
    let q = out.semantic.final_q();
    let grid = out.semantic.grid();
    let mass = identification_mass(q, &out.detections, grid);
    let mut g_m = Array2::<f64>::zeros(p.dim());
    for ((row_p, row_g), (mut row_out, row_m)) in p
        .outer_iter()
        .zip(g_p.outer_iter())
        .zip(g_m.outer_iter_mut().zip(mass.outer_iter()))
    {
        let inner: f64 = row_p.iter().zip(row_g.iter()).map(|(a, b)| a * b).sum();
        let total = row_m.sum();
        for (o, g) in row_out.iter_mut().zip(row_g.iter()) {
            *o = (g - inner) / total;
        }
    }

    let mut g_q = Array2::<f64>::zeros(q.dim());
    let mut g_y = vec![0.0; out.detections.len()];
    for i in 0..grid.len() {
        if q[[i, BACKGROUND]] > IDENTIFICATION_FLOOR {
            g_q[[i, BACKGROUND]] += g_m[[i, 0]];
        }
    }
    for (k, d) in out.detections.iter().enumerate() {
        for i in d.bbox().pixels(&grid) {
            let qi = q[[i, d.label()]];
            if qi * d.y_marginal > IDENTIFICATION_FLOOR {
                g_q[[i, d.label()]] += g_m[[i, k + 1]] * d.y_marginal;
                g_y[k] += g_m[[i, k + 1]] * qi;
            }
        }
    }

    let semantic = backward_with_y(&out.semantic, g_q.view(), Some(&g_y))?;
    Ok(ComposedGradients {
        semantic,
        d_instance_kernel_weights: inst.d_kernel_weights,
    })
}
