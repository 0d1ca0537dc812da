use ndarray::Array2;

use super::{check_detections, Detection, DetectionParams, DistributionField, PairwiseModel, UnaryField};
use crate::error::{Error, Result};

/// Largest state space, in bits, that exhaustive enumeration accepts.
pub const ORACLE_MAX_BITS: f64 = 20.0;

/// Exact marginals and log partition function of the Gibbs distribution.
#[derive(Debug, Clone)]
pub struct ExactMarginals {
    pub q: DistributionField,
    pub y_marginals: Vec<f64>,
    pub log_z: f64,
}

/// Enumerates all `L^N 2^D` joint states.
///
/// Refuses instances with more than [`ORACLE_MAX_BITS`] bits of state.
pub fn exact_marginals_bruteforce(
    unary: &UnaryField,
    pairwise: &PairwiseModel,
    detections: &[Detection],
    params: &DetectionParams,
) -> Result<ExactMarginals> {
    let grid = unary.grid();
    let n = grid.len();
    let l = unary.num_labels();
    let nd = detections.len();
    pairwise.check(grid, l)?;
    check_detections(detections, grid, l)?;

    let bits = n as f64 * (l as f64).log2() + nd as f64;
    if bits > ORACLE_MAX_BITS {
        return Err(Error::TooLarge { bits });
    }

    let mut kernel = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let k = pairwise.kernel_value(i, j);
            kernel[[i, j]] = k;
            kernel[[j, i]] = k;
        }
    }
    let mu = &pairwise.config().compatibility;
    let u = unary.energies();
    let num_x = l.pow(n as u32);
    let num_y = 1usize << nd;

    let decode = |mut index: usize, x: &mut [usize]| {
        for xi in x.iter_mut() {
            *xi = index % l;
            index /= l;
        }
    };

    // energies[x * num_y + mask]
    let mut energies = Vec::with_capacity(num_x * num_y);
    let mut x = vec![0usize; n];
    let mut det_energy = vec![[0.0; 2]; nd];
    for xi in 0..num_x {
        decode(xi, &mut x);
        let mut e: f64 = (0..n).map(|i| u[[i, x[i]]]).sum();
        for i in 0..n {
            for j in (i + 1)..n {
                e += kernel[[i, j]] * 0.5 * (mu[[x[i], x[j]]] + mu[[x[j], x[i]]]);
            }
        }
        for (slot, det) in det_energy.iter_mut().zip(detections) {
            let c = det.coefficient(params);
            let agree = det.foreground().iter().filter(|&&i| x[i] == det.label()).count();
            let (e0, e1) = params.y_unary(det);
            slot[0] = c * agree as f64 + e0;
            slot[1] = c * (det.foreground().len() - agree) as f64 + e1;
        }
        for mask in 0..num_y {
            let ey: f64 = det_energy
                .iter()
                .enumerate()
                .map(|(d, pair)| pair[(mask >> d) & 1])
                .sum();
            energies.push(e + ey);
        }
    }

    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    let mut q = Array2::<f64>::zeros((n, l));
    let mut y = vec![0.0; nd];
    for xi in 0..num_x {
        decode(xi, &mut x);
        for mask in 0..num_y {
            let w = (min - energies[xi * num_y + mask]).exp();
            z += w;
            for (i, &label) in x.iter().enumerate() {
                q[[i, label]] += w;
            }
            for (d, yd) in y.iter_mut().enumerate() {
                if (mask >> d) & 1 == 1 {
                    *yd += w;
                }
            }
        }
    }
    q.mapv_inplace(|v| v / z);
    y.iter_mut().for_each(|v| *v /= z);

    Ok(ExactMarginals {
        q: DistributionField::from_normalized(grid, q),
        y_marginals: y,
        log_z: z.ln() - min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{Backend, FeatureField, FilterPlan};
    use crate::grid::PixelGrid;
    use crate::potentials::{KernelSpec, PairwiseConfig};
    use ndarray::array;
    use std::sync::Arc;

    fn empty_model(grid: PixelGrid, l: usize) -> PairwiseModel {
        PairwiseModel::build(PairwiseConfig::potts(l, vec![]).unwrap(), grid, None, Backend::Brute)
            .unwrap()
    }

    #[test]
    fn zero_energies_give_uniform_marginals() {
        let g = PixelGrid::new(3, 1).unwrap();
        let p = DetectionParams::new(vec![0.0]).unwrap();
        let mut p_flat = p.clone();
        p_flat.y_unary = crate::potentials::YUnaryMode::Flat;
        let det = Detection::from_box(&g, 1, 0.7, crate::grid::BoundingBox::new(0, 0, 2, 1)).unwrap();
        let ex = exact_marginals_bruteforce(&UnaryField::zeros(g, 2), &empty_model(g, 2), &[det], &p_flat)
            .unwrap();
        assert!(ex.q.q().iter().all(|v| (v - 0.5).abs() < 1e-14));
        assert!((ex.y_marginals[0] - 0.5).abs() < 1e-14);
        assert!((ex.log_z - (3.0 * 2f64.ln() + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_is_softmax() {
        let g = PixelGrid::new(1, 1).unwrap();
        let u = UnaryField::new(g, array![[0.0, 3f64.ln()]]).unwrap();
        let p = DetectionParams::new(vec![]).unwrap();
        let ex = exact_marginals_bruteforce(&u, &empty_model(g, 2), &[], &p).unwrap();
        assert!((ex.q.get(0, 0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn potts_pair_matches_four_state_table() {
        let g = PixelGrid::new(2, 1).unwrap();
        let f = FeatureField::new(g, 1, vec![0.0, 1.0]).unwrap();
        let plan = Arc::new(FilterPlan::build(f, Backend::Brute));
        let cfg = PairwiseConfig::potts(2, vec![KernelSpec::spatial(2.0, 1.0)]).unwrap();
        let model = PairwiseModel::from_plans(cfg, vec![plan]).unwrap();
        let u = UnaryField::new(g, array![[0.0, 1.0], [0.5, 0.0]]).unwrap();
        let w = 2.0 * (-0.5f64).exp();
        // states (x0, x1): energies u0 + u1 + w [x0 != x1]
        let e = [0.0 + 0.5, 0.0 + 0.0 + w, 1.0 + 0.5 + w, 1.0 + 0.0];
        let z: f64 = e.iter().map(|v| (-v).exp()).sum();
        let p0 = ((-e[0]).exp() + (-e[1]).exp()) / z;
        let ex = exact_marginals_bruteforce(&u, &model, &[], &DetectionParams::new(vec![]).unwrap())
            .unwrap();
        assert!((ex.q.get(0, 0) - p0).abs() < 1e-14);
        assert!((ex.log_z - z.ln()).abs() < 1e-14);
    }

    #[test]
    fn refuses_large_instances() {
        let g = PixelGrid::new(5, 5).unwrap();
        let r = exact_marginals_bruteforce(
            &UnaryField::zeros(g, 2),
            &empty_model(g, 2),
            &[],
            &DetectionParams::new(vec![]).unwrap(),
        );
        assert!(matches!(r, Err(Error::TooLarge { .. })));
    }
}
