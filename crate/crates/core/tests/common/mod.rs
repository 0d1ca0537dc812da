//! Oracles shared by the integration suites and the acceptance harness.
#![allow(dead_code)]

use hocrf_core::eval::{mask_iou, GroundTruthInstances, GtInstance, PredInstance, PredictionSet};
use ndarray::Array2;

/// Straight double loop over raw feature vectors, self term skipped.
pub fn reference_filter(features: &[Vec<f64>], values: &Array2<f64>) -> Array2<f64> {
    let n = features.len();
    let mut out = Array2::zeros(values.raw_dim());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d2: f64 = features[i]
                .iter()
                .zip(&features[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let k = (-d2 / 2.0).exp();
            for c in 0..values.ncols() {
                out[[i, c]] += k * values[[j, c]];
            }
        }
    }
    out
}

pub fn rel_l2(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub const PIXELS: usize = 16;

pub fn mask(pixels: &[usize]) -> Vec<bool> {
    let mut m = vec![false; PIXELS];
    for &p in pixels {
        m[p] = true;
    }
    m
}

pub fn gt(class: usize, pixels: &[usize]) -> GtInstance {
    GtInstance {
        class,
        mask: mask(pixels),
    }
}

pub fn pred(class: usize, pixels: &[usize], score: f64) -> PredInstance {
    PredInstance {
        class,
        mask: mask(pixels),
        score,
    }
}

/// Four 4x4 images, two classes.
pub fn micro_dataset() -> (PredictionSet, GroundTruthInstances) {
    let gts = vec![
        vec![gt(1, &[0, 1, 2, 3]), gt(2, &[8, 9, 10, 11])],
        vec![gt(1, &[4, 5, 6, 7]), gt(1, &[12, 13, 14, 15])],
        vec![gt(2, &[0, 1, 2, 3, 4, 5, 6, 7])],
        vec![],
    ];
    let preds = vec![
        vec![pred(1, &[0, 1, 2, 3], 0.95), pred(2, &[8, 9, 10, 11], 0.35)],
        vec![
            pred(1, &[0, 4, 5, 6, 7], 0.9),
            pred(1, &[0, 1, 2, 3], 0.85),
            pred(1, &[12, 13, 14], 0.5),
        ],
        vec![pred(2, &[0, 1, 2, 3, 4, 5], 0.7), pred(2, &[0, 1, 2, 3, 4, 5, 6, 7], 0.2)],
        vec![pred(1, &[0, 1], 0.3), pred(2, &[4, 5, 6], 0.6)],
    ];
    (
        PredictionSet::new(preds).unwrap(),
        GroundTruthInstances::new(gts).unwrap(),
    )
}

/// Per image, every injective partial matching of same-class predictions to
/// ground truths with IoU at least `thr` is enumerated. The chosen one has
/// the lexicographically largest IoU vector in global score order.
/// Returns, for each prediction of `class` in score order, whether it is
/// matched.
pub fn oracle_hits(preds: &PredictionSet, gts: &GroundTruthInstances, thr: f64, class: usize) -> Vec<bool> {
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for (im, ps) in preds.images().iter().enumerate() {
        for (k, p) in ps.iter().enumerate() {
            if p.class == class {
                order.push((p.score, im, k));
            }
        }
    }
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut matched = std::collections::HashSet::new();
    for (im, ps) in preds.images().iter().enumerate() {
        let mine: Vec<usize> = order.iter().filter(|o| o.1 == im).map(|o| o.2).collect();
        let g: Vec<usize> = (0..gts.images()[im].len())
            .filter(|&j| gts.images()[im][j].class == class)
            .collect();
        let iou = |p: usize, j: usize| mask_iou(&ps[p].mask, &gts.images()[im][j].mask).unwrap();
        let mut best: Option<(Vec<f64>, Vec<Option<usize>>)> = None;
        let mut assign = vec![None; mine.len()];
        fn search(
            depth: usize,
            mine: &[usize],
            g: &[usize],
            thr: f64,
            iou: &dyn Fn(usize, usize) -> f64,
            assign: &mut Vec<Option<usize>>,
            best: &mut Option<(Vec<f64>, Vec<Option<usize>>)>,
        ) {
            if depth == mine.len() {
                let v: Vec<f64> = mine
                    .iter()
                    .zip(assign.iter())
                    .map(|(&p, a)| a.map_or(0.0, |j| iou(p, j)))
                    .collect();
                let better = match best {
                    None => true,
                    Some((bv, _)) => v.iter().zip(bv.iter()).find(|(x, y)| x != y).is_some_and(|(x, y)| x > y),
                };
                if better {
                    *best = Some((v, assign.clone()));
                }
                return;
            }
            assign[depth] = None;
            search(depth + 1, mine, g, thr, iou, assign, best);
            for &j in g {
                if assign[..depth].contains(&Some(j)) || iou(mine[depth], j) < thr {
                    continue;
                }
                assign[depth] = Some(j);
                search(depth + 1, mine, g, thr, iou, assign, best);
                assign[depth] = None;
            }
        }
        search(0, &mine, &g, thr, &iou, &mut assign, &mut best);
        if let Some((_, a)) = best {
            for (&p, m) in mine.iter().zip(a) {
                if m.is_some() {
                    matched.insert((im, p));
                }
            }
        }
    }
    order.iter().map(|o| matched.contains(&(o.1, o.2))).collect()
}

/// AP as the mean, over recall levels 1/G, ..., G/G, of the best precision
/// achieved at that recall or beyond.
pub fn oracle_ap(hits: &[bool], num_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        points.push((tp, tp as f64 / (i + 1) as f64));
    }
    (1..=num_gt)
        .map(|level| {
            points
                .iter()
                .filter(|(t, _)| *t >= level)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / num_gt as f64
}

pub fn oracle_apr(preds: &PredictionSet, gts: &GroundTruthInstances, thr: f64, class: usize) -> f64 {
    let num_gt = gts.images().iter().flatten().filter(|g| g.class == class).count();
    oracle_ap(&oracle_hits(preds, gts, thr, class), num_gt)
}

