//! Permutohedral lattice approximation of high-dimensional Gaussian filtering.
//!
//! Features are lifted onto the hyperplane `sum(x) = 0` in `d + 1` dimensions,
//! splatted onto the vertices of their enclosing simplex with barycentric
//! weights, convolved with a lattice stencil, and sliced back with the same
//! weights. Two lattices are used, the second offset by the centroid of the
//! canonical simplex, and their outputs averaged.
//!
//! The stencil is not a repeated binomial blur. Its weights are constant on
//! each orbit of lattice displacements under coordinate permutation and
//! negation, and are chosen once per dimension by linear least squares so
//! that the averaged lattice kernel matches `exp(-|f - g|^2 / 2)` on sampled
//! feature pairs. The convolution is evaluated exactly over the occupied
//! vertices through a sparse adjacency, so the operator is symmetric.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FeatureField;

const EMPTY: u32 = u32::MAX;

/// Lattice refinement relative to a spacing of one kernel standard deviation.
const REFINEMENT: f64 = 1.3;
/// Stencil support radius, squared, in units of `(d+1)^2` elevated coordinates.
const SUPPORT_RADIUS_SQ: f64 = 25.0 / 3.0;
const FIT_SAMPLES: usize = 4000;
const FIT_MAX_DISTANCE: f64 = 4.5;
const FIT_SEED: u64 = 0x6c61_7474;

/// Open-addressing table from integer lattice keys to dense vertex ids.
#[derive(Debug, Clone)]
struct KeyTable {
    key_len: usize,
    keys: Vec<i32>,
    slots: Vec<u32>,
}

impl KeyTable {
    fn with_capacity(key_len: usize, expected: usize) -> Self {
        let cap = (expected * 2).next_power_of_two().max(16);
        KeyTable {
            key_len,
            keys: Vec::with_capacity(expected * key_len),
            slots: vec![EMPTY; cap],
        }
    }

    fn len(&self) -> usize {
        self.keys.len() / self.key_len
    }

    fn key(&self, id: usize) -> &[i32] {
        &self.keys[id * self.key_len..(id + 1) * self.key_len]
    }

    fn hash(key: &[i32]) -> usize {
        let mut h: u64 = 0;
        for &k in key {
            h = h.wrapping_add(k as i64 as u64).wrapping_mul(2_531_011);
        }
        (h ^ (h >> 29)) as usize
    }

    fn probe(&self, key: &[i32]) -> usize {
        let mask = self.slots.len() - 1;
        let mut slot = Self::hash(key) & mask;
        loop {
            let id = self.slots[slot];
            if id == EMPTY || self.key(id as usize) == key {
                return slot;
            }
            slot = (slot + 1) & mask;
        }
    }

    fn find(&self, key: &[i32]) -> Option<u32> {
        match self.slots[self.probe(key)] {
            EMPTY => None,
            id => Some(id),
        }
    }

    fn insert(&mut self, key: &[i32]) -> u32 {
        let slot = self.probe(key);
        if self.slots[slot] != EMPTY {
            return self.slots[slot];
        }
        let id = self.len() as u32;
        self.keys.extend_from_slice(key);
        self.slots[slot] = id;
        if self.len() * 2 > self.slots.len() {
            self.grow();
        }
        id
    }

    fn grow(&mut self) {
        let cap = self.slots.len() * 2;
        self.slots = vec![EMPTY; cap];
        for id in 0..self.len() {
            let slot = self.probe(self.key(id));
            self.slots[slot] = id as u32;
        }
    }
}

/// Finds enclosing simplices of feature vectors on one (possibly shifted)
/// lattice. Keys hold the first `d` of the `d + 1` elevated coordinates.
struct Locator {
    d: usize,
    scale: Vec<f64>,
    shift: Vec<f64>,
    /// `canonical[r * (d+1) + i]`: coordinate `i` of the remainder-`r`
    /// vertex of the canonical simplex.
    canonical: Vec<i32>,
    elevated: Vec<f64>,
    rem0: Vec<i32>,
    rank: Vec<i32>,
    bary: Vec<f64>,
}

impl Locator {
    fn new(d: usize, inv_std: f64, shift: &[f64]) -> Self {
        let d1 = d + 1;
        // lifting matrix with orthogonal columns
        let scale = (0..d)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();
        let mut canonical = vec![0i32; d1 * d1];
        for r in 0..d1 {
            for i in 0..d1 {
                canonical[r * d1 + i] = canonical_coord(d, r, i);
            }
        }
        Locator {
            d,
            scale,
            shift: shift.to_vec(),
            canonical,
            elevated: vec![0.0; d1],
            rem0: vec![0; d1],
            rank: vec![0; d1],
            bary: vec![0.0; d1 + 1],
        }
    }

    /// Writes the `d + 1` vertex keys (row-major, `d` each) and barycentric
    /// weights of the simplex enclosing `f`.
    fn locate(&mut self, f: &[f64], keys: &mut [i32], weights: &mut [f64]) {
        let d = self.d;
        let d1 = d + 1;
        let down = 1.0 / d1 as f64;

        let mut sm = 0.0;
        for i in (1..=d).rev() {
            let cf = f[i - 1] * self.scale[i - 1];
            self.elevated[i] = sm - i as f64 * cf + self.shift[i];
            sm += cf;
        }
        self.elevated[0] = sm + self.shift[0];

        // nearest remainder-0 point
        let mut sum = 0i32;
        for i in 0..d1 {
            let e = self.elevated[i];
            let v = e * down;
            let up = v.ceil() * d1 as f64;
            let dn = v.floor() * d1 as f64;
            self.rem0[i] = if up - e < e - dn { up as i32 } else { dn as i32 };
            sum += self.rem0[i] / d1 as i32;
        }

        // rank of each residual coordinate in sorted order
        self.rank.iter_mut().for_each(|r| *r = 0);
        for i in 0..d {
            let di = self.elevated[i] - self.rem0[i] as f64;
            for j in (i + 1)..d1 {
                if di < self.elevated[j] - self.rem0[j] as f64 {
                    self.rank[i] += 1;
                } else {
                    self.rank[j] += 1;
                }
            }
        }

        // project back onto the hyperplane if rounding left it
        for i in 0..d1 {
            self.rank[i] += sum;
            if self.rank[i] < 0 {
                self.rank[i] += d1 as i32;
                self.rem0[i] += d1 as i32;
            } else if self.rank[i] > d as i32 {
                self.rank[i] -= d1 as i32;
                self.rem0[i] -= d1 as i32;
            }
        }

        self.bary.iter_mut().for_each(|b| *b = 0.0);
        for i in 0..d1 {
            let v = (self.elevated[i] - self.rem0[i] as f64) * down;
            let r = d - self.rank[i] as usize;
            self.bary[r] += v;
            self.bary[r + 1] -= v;
        }
        self.bary[0] += 1.0 + self.bary[d1];

        for r in 0..d1 {
            for i in 0..d {
                keys[r * d + i] = self.rem0[i] + self.canonical[r * d1 + self.rank[i] as usize];
            }
            weights[r] = self.bary[r];
        }
    }
}

fn canonical_coord(d: usize, r: usize, i: usize) -> i32 {
    if i + r <= d {
        r as i32
    } else {
        r as i32 - (d + 1) as i32
    }
}

/// Orbit representative of a displacement given by its first `d`
/// coordinates: the smaller of the sorted full vector and its negation.
fn orbit_key(delta: &[i32]) -> Vec<i32> {
    let last = -delta.iter().sum::<i32>();
    let mut pos: Vec<i32> = delta.iter().copied().chain([last]).collect();
    let mut neg: Vec<i32> = pos.iter().map(|v| -v).collect();
    pos.sort_unstable();
    neg.sort_unstable();
    pos.min(neg)
}

/// Stencil and lattice geometry fitted for one feature dimension.
#[derive(Debug)]
struct FittedStencil {
    inv_std: f64,
    /// Elevated-space offsets of the averaged lattices.
    shifts: Vec<Vec<f64>>,
    entries: Vec<(Vec<i32>, f64)>,
    /// Weight between two vertices of one simplex whose remainders differ
    /// by `k`.
    response: Vec<f64>,
}

fn stencil_for(d: usize) -> Arc<FittedStencil> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<FittedStencil>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(s) = cache.lock().unwrap().get(&d) {
        return s.clone();
    }
    let fitted = Arc::new(fit_stencil(d));
    cache.lock().unwrap().entry(d).or_insert(fitted).clone()
}

/// Lattice displacements within the support radius, grouped by orbit.
fn support_orbits(d: usize) -> Vec<Vec<Vec<i32>>> {
    let d1 = d + 1;
    let limit = SUPPORT_RADIUS_SQ * (d1 * d1) as f64;
    let norm_sq = |k: &[i32]| {
        let last = -k.iter().sum::<i32>();
        k.iter()
            .chain([&last])
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
    };
    let mut table = KeyTable::with_capacity(d, 256);
    table.insert(&vec![0; d]);
    let mut next = vec![0i32; d];
    let mut head = 0;
    while head < table.len() {
        let key = table.key(head).to_vec();
        head += 1;
        for j in 0..d1 {
            for sign in [1, -1] {
                for k in 0..d {
                    next[k] = key[k] + sign * if k == j { -(d as i32) } else { 1 };
                }
                if norm_sq(&next) <= limit {
                    table.insert(&next);
                }
            }
        }
    }
    let mut orbits: HashMap<Vec<i32>, Vec<Vec<i32>>> = HashMap::new();
    for id in 0..table.len() {
        let key = table.key(id).to_vec();
        orbits.entry(orbit_key(&key)).or_default().push(key);
    }
    let mut grouped: Vec<(Vec<i32>, Vec<Vec<i32>>)> = orbits.into_iter().collect();
    grouped.sort();
    grouped.into_iter().map(|(_, members)| members).collect()
}

fn fit_stencil(d: usize) -> FittedStencil {
    let d1 = d + 1;
    // A unit blur step plus splat/slice has elevated variance
    // (d+1)^2 (1/2 + 1/6) per unit feature variance; the lattice is refined
    // from there.
    let inv_std = REFINEMENT * d1 as f64 * (0.5f64 + 1.0 / 6.0).sqrt();
    let shifts = vec![
        vec![0.0; d1],
        (0..d1).map(|i| d as f64 / 2.0 - i as f64).collect(),
    ];
    let orbits = support_orbits(d);
    let index: HashMap<Vec<i32>, usize> = orbits
        .iter()
        .enumerate()
        .map(|(o, members)| (orbit_key(&members[0]), o))
        .collect();
    let no = orbits.len();

    let mut locators: Vec<Locator> = shifts
        .iter()
        .map(|s| Locator::new(d, inv_std, s))
        .collect();
    let share = 1.0 / shifts.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(FIT_SEED);
    let mut normal = vec![0.0; no * no];
    let mut rhs = vec![0.0; no];
    let mut phi = vec![0.0; no];
    let (mut kp, mut kq) = (vec![0i32; d1 * d], vec![0i32; d1 * d]);
    let (mut bp, mut bq) = (vec![0.0; d1], vec![0.0; d1]);
    let mut delta = vec![0i32; d];
    let mut dir = vec![0.0; d];

    for _ in 0..FIT_SAMPLES {
        let p: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..10.0)).collect();
        let norm = loop {
            dir.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-3 && n <= 1.0 {
                break n;
            }
        };
        // distances drawn with density proportional to r^2
        let r = FIT_MAX_DISTANCE * rng.gen::<f64>().cbrt();
        let q: Vec<f64> = p.iter().zip(&dir).map(|(a, u)| a + r * u / norm).collect();

        phi.iter_mut().for_each(|v| *v = 0.0);
        for loc in locators.iter_mut() {
            loc.locate(&p, &mut kp, &mut bp);
            loc.locate(&q, &mut kq, &mut bq);
            for a in 0..d1 {
                for b in 0..d1 {
                    for k in 0..d {
                        delta[k] = kp[a * d + k] - kq[b * d + k];
                    }
                    if let Some(&o) = index.get(&orbit_key(&delta)) {
                        phi[o] += share * bp[a] * bq[b];
                    }
                }
            }
        }
        let target = (-0.5 * r * r).exp();
        for i in 0..no {
            rhs[i] += phi[i] * target;
            for j in 0..no {
                normal[i * no + j] += phi[i] * phi[j];
            }
        }
    }

    let w = solve_normal(normal, rhs);
    let mut response = vec![0.0; d1];
    for (k, slot) in response.iter_mut().enumerate() {
        let key: Vec<i32> = (0..d).map(|i| canonical_coord(d, k, i)).collect();
        if let Some(&o) = index.get(&orbit_key(&key)) {
            *slot = w[o];
        }
    }
    let entries = orbits
        .into_iter()
        .zip(&w)
        .flat_map(|(members, &wo)| members.into_iter().map(move |k| (k, wo)))
        .collect();
    FittedStencil {
        inv_std,
        shifts,
        entries,
        response,
    }
}

/// Solves the symmetric system `a x = b` by Gaussian elimination with
/// partial pivoting, after a tiny relative ridge.
fn solve_normal(mut a: Vec<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    for i in 0..n {
        a[i * n + i] += 1e-12 * trace;
    }
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| a[x * n + c].abs().total_cmp(&a[y * n + c].abs()))
            .unwrap();
        if p != c {
            for k in 0..n {
                a.swap(c * n + k, p * n + k);
            }
            b.swap(c, p);
        }
        let pivot = a[c * n + c];
        for r in (c + 1)..n {
            let f = a[r * n + c] / pivot;
            if f != 0.0 {
                for k in c..n {
                    a[r * n + k] -= f * a[c * n + k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let tail: f64 = ((r + 1)..n).map(|k| a[r * n + k] * x[k]).sum();
        x[r] = (b[r] - tail) / a[r * n + r];
    }
    x
}

/// Splat/convolve/slice tables of one lattice.
#[derive(Debug, Clone)]
struct Layer {
    num_vertices: usize,
    /// `N x (d+1)` enclosing-simplex vertex ids.
    offsets: Vec<u32>,
    /// `N x (d+1)` barycentric weights.
    weights: Vec<f64>,
    /// Stencil convolution as a CSR matrix over occupied vertices.
    row_start: Vec<u32>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

/// Precomputed lattice tables for one feature field.
#[derive(Debug, Clone)]
pub struct PermutohedralLattice {
    dim: usize,
    num_points: usize,
    layers: Vec<Layer>,
    /// Per-point weight of the point on itself.
    self_weights: Vec<f64>,
}

impl PermutohedralLattice {
    pub fn build(features: &FeatureField) -> Self {
        let d = features.dim();
        let n = features.len();
        let d1 = d + 1;
        let stencil = stencil_for(d);
        let share = 1.0 / stencil.shifts.len() as f64;

        let mut self_weights = vec![0.0; n];
        let mut layers = Vec::with_capacity(stencil.shifts.len());
        let mut keys = vec![0i32; d1 * d];
        let mut bary = vec![0.0; d1];
        let mut probe = vec![0i32; d];

        for shift in &stencil.shifts {
            let mut locator = Locator::new(d, stencil.inv_std, shift);
            let mut table = KeyTable::with_capacity(d, n * d1);
            let mut offsets = vec![0u32; n * d1];
            let mut weights = vec![0.0; n * d1];
            for p in 0..n {
                locator.locate(features.feature(p), &mut keys, &mut bary);
                let mut own = 0.0;
                for r in 0..d1 {
                    offsets[p * d1 + r] = table.insert(&keys[r * d..(r + 1) * d]);
                    weights[p * d1 + r] = bary[r];
                    for q in 0..d1 {
                        own += bary[r] * bary[q] * stencil.response[r.abs_diff(q)];
                    }
                }
                self_weights[p] += share * own;
            }

            let m = table.len();
            let mut row_start = Vec::with_capacity(m + 1);
            let mut cols = Vec::new();
            let mut vals = Vec::new();
            row_start.push(0u32);
            for v in 0..m {
                let key = table.key(v);
                for (delta, w) in &stencil.entries {
                    for k in 0..d {
                        probe[k] = key[k] + delta[k];
                    }
                    if let Some(u) = table.find(&probe) {
                        cols.push(u);
                        vals.push(*w * share);
                    }
                }
                row_start.push(cols.len() as u32);
            }

            layers.push(Layer {
                num_vertices: m,
                offsets,
                weights,
                row_start,
                cols,
                vals,
            });
        }

        PermutohedralLattice {
            dim: d,
            num_points: n,
            layers,
            self_weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Occupied vertices summed over all layers.
    pub fn num_vertices(&self) -> usize {
        self.layers.iter().map(|l| l.num_vertices).sum()
    }

    /// The lattice kernel's value of each point on itself.
    pub fn self_weights(&self) -> &[f64] {
        &self.self_weights
    }

    /// Approximate Gaussian sum including the self term.
    pub fn filter_inclusive(&self, values: ArrayView2<f64>) -> Array2<f64> {
        let n = self.num_points;
        let c = values.ncols();
        let d1 = self.dim + 1;
        let mut out = Array2::zeros((n, c));

        for layer in &self.layers {
            let m = layer.num_vertices;
            let mut splat = vec![0.0; m * c];
            for (p, row) in values.outer_iter().enumerate() {
                for r in 0..d1 {
                    let w = layer.weights[p * d1 + r];
                    let base = layer.offsets[p * d1 + r] as usize * c;
                    for (ch, v) in row.iter().enumerate() {
                        splat[base + ch] += w * v;
                    }
                }
            }

            let mut blurred = vec![0.0; m * c];
            for v in 0..m {
                let lo = layer.row_start[v] as usize;
                let hi = layer.row_start[v + 1] as usize;
                let dst = &mut blurred[v * c..(v + 1) * c];
                for (&u, &w) in layer.cols[lo..hi].iter().zip(&layer.vals[lo..hi]) {
                    let src = &splat[u as usize * c..(u as usize + 1) * c];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }

            for (p, mut row) in out.outer_iter_mut().enumerate() {
                for r in 0..d1 {
                    let w = layer.weights[p * d1 + r];
                    let base = layer.offsets[p * d1 + r] as usize * c;
                    for (ch, o) in row.iter_mut().enumerate() {
                        *o += w * blurred[base + ch];
                    }
                }
            }
        }
        out
    }
}
