//! Seeded synthetic inputs: images, small random CRF instances and an
//! occlusion scene with known ground truth.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::filter::Backend;
use crate::grid::{BoundingBox, ColorImage, PixelGrid};
use crate::instance::DetectionInput;
use crate::potentials::{
    Detection, DetectionParams, KernelSpec, LabelSpace, PairwiseConfig, PairwiseModel, UnaryField,
};

/// Uniform RGB noise.
pub fn noise_image(grid: PixelGrid, seed: u64) -> ColorImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..grid.len())
        .map(|_| [0u8; 3].map(|_| rng.gen_range(0.0..255.0)))
        .collect();
    ColorImage::new(grid, pixels).expect("finite pixels")
}

/// A smooth gradient background with two flat-coloured discs and mild
/// noise, a stand-in for natural images.
pub fn scene_image(grid: PixelGrid, seed: u64) -> ColorImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (grid.width() as f64, grid.height() as f64);
    let pixels = (0..grid.len())
        .map(|i| {
            let (x, y) = grid.coords(i);
            let (x, y) = (x as f64 / w, y as f64 / h);
            let mut c = [60.0 + 120.0 * y, 90.0 + 40.0 * x, 160.0 - 60.0 * y];
            if (x - 0.35).powi(2) + (y - 0.5).powi(2) < 0.04 {
                c = [210.0, 40.0, 40.0];
            }
            if (x - 0.65).powi(2) + (y - 0.45).powi(2) < 0.05 {
                c = [40.0, 60.0, 200.0];
            }
            c.map(|v| v + rng.gen_range(-6.0..6.0))
        })
        .collect();
    ColorImage::new(grid, pixels).expect("finite pixels")
}

/// Parameters of [`random_instance`].
#[derive(Debug, Clone, PartialEq)]
pub struct RandomInstanceSpec {
    pub width: usize,
    pub height: usize,
    pub num_labels: usize,
    pub num_detections: usize,
    pub seed: u64,
    pub backend: Backend,
    /// Unaries are uniform in `[-scale, scale]`.
    pub unary_scale: f64,
    pub spatial_weight: f64,
    pub bilateral_weight: f64,
    /// Class weights are uniform in `[0, max_class_weight]`.
    pub max_class_weight: f64,
}

impl Default for RandomInstanceSpec {
    fn default() -> Self {
        RandomInstanceSpec {
            width: 8,
            height: 8,
            num_labels: 3,
            num_detections: 2,
            seed: 0,
            backend: Backend::Brute,
            unary_scale: 2.0,
            spatial_weight: 1.0,
            bilateral_weight: 1.0,
            max_class_weight: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub unary: UnaryField,
    pub image: ColorImage,
    pub pairwise: PairwiseModel,
    pub detections: Vec<Detection>,
    pub params: DetectionParams,
}

/// Random unaries, a noise image, spatial and bilateral kernels with the
/// default bandwidths (the bilateral colour bandwidth widened to 40 so the
/// noise image still couples pixels), a perturbed Potts compatibility and
/// random detections.
pub fn random_instance(spec: &RandomInstanceSpec) -> Result<RandomInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = PixelGrid::new(spec.width, spec.height)?;
    let n = grid.len();
    let l = spec.num_labels;
    let image = noise_image(grid, rng.gen());
    let unary = UnaryField::new(
        grid,
        Array2::from_shape_fn((n, l), |_| rng.gen_range(-spec.unary_scale..=spec.unary_scale)),
    )?;
    let compatibility = Array2::from_shape_fn((l, l), |(a, b)| {
        if a == b {
            0.0
        } else {
            rng.gen_range(0.5..1.5)
        }
    });
    let config = PairwiseConfig::new(
        vec![
            KernelSpec::spatial(spec.spatial_weight, KernelSpec::DEFAULT_THETA_GAMMA),
            KernelSpec::bilateral(spec.bilateral_weight, KernelSpec::DEFAULT_THETA_ALPHA, 40.0),
        ],
        compatibility,
    )?;
    let pairwise = PairwiseModel::build(config, grid, Some(&image), spec.backend)?;
    let params = DetectionParams::new(
        (1..l)
            .map(|_| rng.gen_range(0.0..=spec.max_class_weight))
            .collect(),
    )?;
    let detections = (0..spec.num_detections)
        .map(|_| random_detection(&mut rng, grid, l))
        .collect::<Result<_>>()?;
    Ok(RandomInstance {
        unary,
        image,
        pairwise,
        detections,
        params,
    })
}

fn random_detection(rng: &mut ChaCha8Rng, grid: PixelGrid, num_labels: usize) -> Result<Detection> {
    let (w, h) = (grid.width(), grid.height());
    let x0 = rng.gen_range(0..w);
    let y0 = rng.gen_range(0..h);
    let x1 = rng.gen_range(x0 + 1..=w);
    let y1 = rng.gen_range(y0 + 1..=h);
    let bbox = BoundingBox::new(x0, y0, x1, y1);
    let mut fg: Vec<usize> = bbox.pixels(&grid).filter(|_| rng.gen_bool(0.75)).collect();
    if fg.is_empty() {
        fg.push(grid.index(x0, y0));
    }
    let label = rng.gen_range(1..num_labels);
    Detection::new(&grid, label, rng.gen_range(0.05..0.95), bbox, fg)
}

/// Two overlapping discs of the same class, the front one red and the one
/// behind it blue, plus a planted false-positive detection of another
/// class over plain background.
#[derive(Debug, Clone)]
pub struct OcclusionScene {
    pub labels: LabelSpace,
    pub image: ColorImage,
    pub unary: UnaryField,
    pub detections: Vec<DetectionInput>,
    /// Ground-truth instances as `(class, mask)`.
    pub ground_truth: Vec<(usize, Vec<bool>)>,
    /// Index into `detections` of the false positive.
    pub false_positive: usize,
    pub params: DetectionParams,
    pub config: PairwiseConfig,
}

impl OcclusionScene {
    pub fn grid(&self) -> PixelGrid {
        self.image.grid()
    }
}

pub const PERSON: usize = 1;
pub const BOTTLE: usize = 2;

/// Deterministic for a given `seed`; seed 0 is the reference scene.
pub fn occlusion_scene(seed: u64) -> OcclusionScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f63636c);
    let grid = PixelGrid::new(64, 48).expect("non-empty grid");
    let front = (26.0, 24.0, 11.0);
    let back = (40.0, 24.0, 11.0);
    let inside = |(cx, cy, r): (f64, f64, f64), x: usize, y: usize| {
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        dx * dx + dy * dy <= r * r
    };

    let mut owner = vec![0usize; grid.len()];
    let mut pixels = Vec::with_capacity(grid.len());
    let mut energies = Array2::<f64>::zeros((grid.len(), 3));
    for i in 0..grid.len() {
        let (x, y) = grid.coords(i);
        owner[i] = if inside(front, x, y) {
            1
        } else if inside(back, x, y) {
            2
        } else {
            0
        };
        let base = match owner[i] {
            1 => [210.0, 40.0, 40.0],
            2 => [40.0, 60.0, 210.0],
            _ => [128.0, 128.0, 128.0],
        };
        pixels.push(base.map(|c: f64| c + rng.gen_range(-8.0..8.0)));
        let favoured = if owner[i] == 0 { 0 } else { PERSON };
        for l in 0..3 {
            let e = if l == favoured { 0.3 } else { 1.8 };
            energies[[i, l]] = e + rng.gen_range(-0.5..0.5);
        }
    }
    let image = ColorImage::new(grid, pixels).expect("finite pixels");
    let unary = UnaryField::new(grid, energies).expect("finite unaries");

    let detections = vec![
        DetectionInput {
            label: PERSON,
            score: 0.8,
            bbox: BoundingBox::new(15, 13, 38, 36),
            mask: None,
        },
        DetectionInput {
            label: PERSON,
            score: 0.9,
            bbox: BoundingBox::new(29, 13, 52, 36),
            mask: None,
        },
        DetectionInput {
            label: BOTTLE,
            score: 0.7,
            bbox: BoundingBox::new(4, 34, 14, 46),
            mask: None,
        },
    ];
    let ground_truth = (1..=2)
        .map(|k| (PERSON, owner.iter().map(|&o| o == k).collect()))
        .collect();
    let labels = LabelSpace::with_names(vec![
        "background".to_string(),
        "person".to_string(),
        "bottle".to_string(),
    ])
    .expect("three names");
    OcclusionScene {
        labels,
        image,
        unary,
        detections,
        ground_truth,
        false_positive: 2,
        params: DetectionParams::new(vec![1.0, 2.0]).expect("valid weights"),
        config: PairwiseConfig::default_potts(3).expect("three labels"),
    }
}
