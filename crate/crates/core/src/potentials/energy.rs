use ndarray::Array2;

use super::{
    check_detections, Detection, DetectionParams, DistributionField, Labeling, PairwiseModel,
    UnaryField,
};
use crate::error::{Error, Result};
use crate::filter::brute_filter;
use crate::numeric::xlnx;

/// Energy of one detection clique: `w s / |F|` times the number of
/// foreground pixels that agree with the detection (`y = false`) or
/// disagree with it (`y = true`).
pub fn detection_clique_energy(
    det: &Detection,
    x_on_foreground: &[usize],
    y: bool,
    params: &DetectionParams,
) -> Result<f64> {
    if x_on_foreground.len() != det.foreground().len() {
        return Err(Error::shape(
            "labels on detection foreground",
            det.foreground().len(),
            x_on_foreground.len(),
        ));
    }
    let agree = x_on_foreground.iter().filter(|&&l| l == det.label()).count();
    let count = if y {
        x_on_foreground.len() - agree
    } else {
        agree
    };
    Ok(det.coefficient(params) * count as f64)
}

/// `psi_d(y)`.
pub fn y_unary_energy(det: &Detection, y: bool, params: &DetectionParams) -> f64 {
    let (e0, e1) = params.y_unary(det);
    if y {
        e1
    } else {
        e0
    }
}

/// Dense pairwise energy `sum_{i<j} sum_m w_m k_m(i,j) mu(x_i, x_j)`.
///
/// An asymmetric `mu` enters through its symmetric part, so the result does
/// not depend on pixel order. Exact, `O(N^2)`.
pub fn pairwise_energy(x: &Labeling, pairwise: &PairwiseModel) -> Result<f64> {
    pairwise.check(x.grid(), x.num_labels())?;
    let mu = &pairwise.config().compatibility;
    let labels = x.labels();
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (mu[[labels[i], labels[j]]] + mu[[labels[j], labels[i]]]);
            if m != 0.0 {
                total += pairwise.kernel_value(i, j) * m;
            }
        }
    }
    Ok(total)
}

/// Full energy of a joint assignment `(x, y)`: unaries, dense pairwise
/// terms, detection cliques and `Y` unaries.
pub fn total_energy(
    x: &Labeling,
    y: &[bool],
    unary: &UnaryField,
    pairwise: &PairwiseModel,
    detections: &[Detection],
    params: &DetectionParams,
) -> Result<f64> {
    check_inputs(x.grid(), x.num_labels(), unary, detections, y.len())?;
    let u = unary.energies();
    let mut total: f64 = x
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| u[[i, l]])
        .sum();
    total += pairwise_energy(x, pairwise)?;
    for (det, &yd) in detections.iter().zip(y) {
        let on_f: Vec<usize> = det.foreground().iter().map(|&i| x.get(i)).collect();
        total += detection_clique_energy(det, &on_f, yd, params)?;
        total += y_unary_energy(det, yd, params);
    }
    Ok(total)
}

/// Variational free energy `E_Q[E] - H(Q) - H(y)` of the fully factorized
/// distribution given by `q` and the `Y` marginals.
///
/// The pairwise expectation is evaluated exactly (`O(N^2)`), independent of
/// the plans' backend.
pub fn free_energy(
    q: &DistributionField,
    y_marginals: &[f64],
    unary: &UnaryField,
    pairwise: &PairwiseModel,
    detections: &[Detection],
    params: &DetectionParams,
) -> Result<f64> {
    check_inputs(q.grid(), q.num_labels(), unary, detections, y_marginals.len())?;
    pairwise.check(q.grid(), q.num_labels())?;
    let qa = q.q();
    let u = unary.energies();

    let mut total: f64 = qa.iter().zip(u.iter()).map(|(p, e)| p * e).sum();

    let l = q.num_labels();
    let mut field = Array2::zeros((q.grid().len(), l));
    for (k, plan) in pairwise.config().kernels.iter().zip(pairwise.plans()) {
        if k.weight != 0.0 {
            field.scaled_add(k.weight, &brute_filter(plan.features(), qa));
        }
    }
    let mu = &pairwise.config().compatibility;
    let mut pair = 0.0;
    for (qi, pi) in qa.outer_iter().zip(field.outer_iter()) {
        for a in 0..l {
            if qi[a] == 0.0 {
                continue;
            }
            let msg: f64 = (0..l).map(|b| mu[[a, b]] * pi[b]).sum();
            pair += qi[a] * msg;
        }
    }
    total += 0.5 * pair;

    for (det, &y) in detections.iter().zip(y_marginals) {
        let c = det.coefficient(params);
        let agree: f64 = det.foreground().iter().map(|&i| qa[[i, det.label()]]).sum();
        let disagree = det.foreground().len() as f64 - agree;
        let (e0, e1) = params.y_unary(det);
        total += (1.0 - y) * (c * agree + e0) + y * (c * disagree + e1);
        total += xlnx(y) + xlnx(1.0 - y);
    }

    total += qa.iter().map(|&p| xlnx(p)).sum::<f64>();
    Ok(total)
}

fn check_inputs(
    grid: crate::grid::PixelGrid,
    num_labels: usize,
    unary: &UnaryField,
    detections: &[Detection],
    num_y: usize,
) -> Result<()> {
    if unary.grid() != grid {
        return Err(Error::shape("unary grid", grid, unary.grid()));
    }
    if unary.num_labels() != num_labels {
        return Err(Error::shape("unary labels", num_labels, unary.num_labels()));
    }
    if num_y != detections.len() {
        return Err(Error::shape("detection latent values", detections.len(), num_y));
    }
    check_detections(detections, grid, num_labels)
}
