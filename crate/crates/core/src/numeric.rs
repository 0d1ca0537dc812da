//! Small numeric helpers shared by the inference stages.

use ndarray::{Array2, ArrayView2, ArrayViewMut1};

/// Softmax of `-energies` over one row, in place. Subtracts the row
/// minimum before exponentiating.
pub fn neg_softmax_inplace(mut row: ArrayViewMut1<f64>) {
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (min - *v).exp();
        total += *v;
    }
    row.mapv_inplace(|v| v / total);
}

/// Row-wise softmax of `-energies`.
pub fn neg_softmax(energies: ArrayView2<f64>) -> Array2<f64> {
    let mut out = energies.to_owned();
    for row in out.outer_iter_mut() {
        neg_softmax_inplace(row);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `p ln p` with `0 ln 0 = 0`.
pub fn xlnx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `ln sum exp(v)`, stable for large magnitudes.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry, ties resolved toward the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
