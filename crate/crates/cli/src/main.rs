//! `hocrf`: semantic and instance segmentation with a dense higher-order
//! CRF, AP^r evaluation, filter timing and gradient checks.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on bad input, 3 when an
//! internal check fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hocrf_core::autodiff::{gradcheck_composed, gradcheck_semantic, GradcheckSpec};
use hocrf_core::eval::apr_summary;
use hocrf_core::filter::{Backend, FeatureField, FilterPlan};
use hocrf_core::grid::{ColorImage, PixelGrid};
use hocrf_core::instance::{
    prepare_detections, run_naive, run_pipeline, InstanceLabelSpace, InstanceMap, PipelineConfig,
    DEFAULT_FOREGROUND_THRESHOLD, DEFAULT_NMS_IOU,
};
use hocrf_core::io::{
    read_detections, write_detections, write_ppm, DetectionRecord, InstanceMapFile, InstanceRecord,
    Manifest, ManifestEntry, Pgm, TensorFile,
};
use hocrf_core::potentials::{
    potts_matrix, DetectionParams, KernelSpec, PairwiseConfig, PairwiseModel, UnaryField,
};
use hocrf_core::semantic::{self, InferenceSettings};
use hocrf_core::synthetic::{occlusion_scene, scene_image};
use hocrf_core::Error;

#[derive(Debug, Parser)]
#[command(name = "hocrf", version, about = "Dense higher-order CRF segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Semantic segmentation with detection potentials.
    Segment(SegmentArgs),
    /// Instance segmentation: NMS, semantic CRF, identification, instance CRF.
    Instances(InstancesArgs),
    /// AP^r of predicted instance maps against ground truth.
    Eval(EvalArgs),
    /// Wall time per filter call for each backend and image size.
    Bench(BenchArgs),
    /// Analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Writes the synthetic occlusion scene as input files.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Unary energies, a CRFU tensor of shape [height, width, labels].
    #[arg(long)]
    unary: PathBuf,
    /// Detection list (JSON).
    #[arg(long)]
    detections: PathBuf,
    /// RGB image for the bilateral kernel.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Mean-field iterations.
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long, default_value_t = KernelSpec::DEFAULT_BILATERAL_WEIGHT)]
    bilateral_weight: f64,
    /// Bilateral position bandwidth in pixels.
    #[arg(long, default_value_t = KernelSpec::DEFAULT_THETA_ALPHA)]
    theta_alpha: f64,
    /// Bilateral colour bandwidth in intensity units.
    #[arg(long, default_value_t = KernelSpec::DEFAULT_THETA_BETA)]
    theta_beta: f64,
    #[arg(long, default_value_t = KernelSpec::DEFAULT_SPATIAL_WEIGHT)]
    spatial_weight: f64,
    /// Spatial bandwidth in pixels.
    #[arg(long, default_value_t = KernelSpec::DEFAULT_THETA_GAMMA)]
    theta_gamma: f64,
    /// Detection weight shared by every class.
    #[arg(long, default_value_t = 1.0)]
    detection_weight: f64,
    /// Per-class detection weights, overriding --detection-weight.
    #[arg(long, value_delimiter = ',')]
    class_weights: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = BackendArg::Lattice)]
    backend: BackendArg,
    /// Minimum marginal for the box foreground heuristic.
    #[arg(long, default_value_t = DEFAULT_FOREGROUND_THRESHOLD)]
    foreground_threshold: f64,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output semantic map (8-bit PGM).
    #[arg(long)]
    out_map: PathBuf,
    /// Output detections with recalibrated `y_marginal`.
    #[arg(long)]
    out_detections: PathBuf,
    /// Optional colour preview (PPM).
    #[arg(long)]
    render: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InstancesArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Same-class IoU at which NMS suppresses the lower-scored box.
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms_iou: f64,
    /// Assign pixels by box and semantic label instead of the instance CRF.
    #[arg(long)]
    naive: bool,
    /// Output instance map (16-bit PGM, 0 = no instance).
    #[arg(long)]
    out_map: PathBuf,
    /// Output sidecar; defaults to the map path with a `.json` extension.
    #[arg(long)]
    out_sidecar: Option<PathBuf>,
    /// Optional colour preview of the instances (PPM).
    #[arg(long)]
    render: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Manifest of predicted instance maps.
    #[arg(long)]
    pred: PathBuf,
    /// Manifest of ground-truth instance maps.
    #[arg(long)]
    gt: PathBuf,
    /// IoU thresholds of the report rows.
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.6, 0.7, 0.8, 0.9])]
    thresholds: Vec<f64>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Square image sizes in pixels.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256])]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_enum, default_values_t = [BackendArg::Lattice, BackendArg::Brute])]
    backends: Vec<BackendArg>,
    /// Label channels filtered per call.
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Image noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Stage::All)]
    stage: Stage,
    #[arg(long, default_value_t = GradcheckSpec::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = GradcheckSpec::default().iterations)]
    iterations: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Pixel noise seed; 0 is the reference scene.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Lattice,
    Brute,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Backend {
        match b {
            BackendArg::Lattice => Backend::Lattice,
            BackendArg::Brute => Backend::Brute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Semantic,
    Composed,
    All,
}

/// Failures past argument parsing.
enum Failure {
    Input(Error),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::TapeMismatch(_) => Failure::Internal(e.to_string()),
            other => Failure::Input(other),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("hocrf: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let outcome = match cli.command {
        Command::Segment(a) => segment(&a),
        Command::Instances(a) => instances(&a),
        Command::Eval(a) => eval(&a),
        Command::Bench(a) => bench(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Synth(a) => synth(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("hocrf: {}", single_line(&e.to_string()));
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("hocrf: internal error: {}", single_line(&msg));
            ExitCode::from(3)
        }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

struct Loaded {
    unary: UnaryField,
    records: Vec<DetectionRecord>,
    pairwise: PairwiseModel,
    params: DetectionParams,
}

fn load(m: &ModelArgs) -> Result<Loaded, Failure> {
    let unary = TensorFile::read(&m.unary)?.to_unary()?;
    let grid = unary.grid();
    let num_labels = unary.num_labels();
    if num_labels < 2 {
        return Err(Error::Invalid(format!(
            "{}: unary has {num_labels} label(s), at least background and one class are needed",
            m.unary.display()
        ))
        .into());
    }
    let records = read_detections(&m.detections, num_labels - 1)?;

    // Zero-weight kernels are dropped, so no image is needed without a
    // bilateral term.
    let mut kernels = Vec::new();
    if m.bilateral_weight != 0.0 {
        kernels.push(KernelSpec::bilateral(m.bilateral_weight, m.theta_alpha, m.theta_beta));
    }
    if m.spatial_weight != 0.0 {
        kernels.push(KernelSpec::spatial(m.spatial_weight, m.theta_gamma));
    }
    let config = PairwiseConfig::new(kernels, potts_matrix(num_labels))?;
    let image = match &m.image {
        Some(p) if m.bilateral_weight != 0.0 => Some(read_image(p, grid)?),
        _ => None,
    };
    if m.bilateral_weight != 0.0 && image.is_none() {
        return Err(Error::Invalid(
            "--image is required unless --bilateral-weight is 0".into(),
        )
        .into());
    }
    let pairwise = PairwiseModel::build(config, grid, image.as_ref(), m.backend.into())?;

    let weights = match &m.class_weights {
        Some(w) if w.len() != num_labels - 1 => {
            return Err(Error::Shape {
                what: "--class-weights",
                expected: format!("{} values", num_labels - 1),
                found: format!("{} values", w.len()),
            }
            .into())
        }
        Some(w) => w.clone(),
        None => vec![m.detection_weight; num_labels - 1],
    };
    let params = DetectionParams::new(weights)?;
    if m.iterations == 0 {
        return Err(Error::Invalid("--iterations must be at least 1".into()).into());
    }
    Ok(Loaded {
        unary,
        records,
        pairwise,
        params,
    })
}

fn read_image(path: &Path, grid: PixelGrid) -> Result<ColorImage, Error> {
    let img = image::open(path)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (w, h) != (grid.width(), grid.height()) {
        return Err(Error::Shape {
            what: "image size",
            expected: format!("{grid} (from the unary)"),
            found: format!("{w}x{h}"),
        });
    }
    ColorImage::from_rgb8(grid, img.as_raw())
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

fn settings(m: &ModelArgs) -> InferenceSettings {
    InferenceSettings::with_iterations(m.iterations)
}

fn segment(a: &SegmentArgs) -> Result<(), Failure> {
    let l = load(&a.model)?;
    let grid = l.unary.grid();
    let inputs = hocrf_core::io::detections::to_inputs(&l.records, base_dir(&a.model.detections), grid)?;
    // No suppression here: every detection joins the semantic CRF.
    let prepared = prepare_detections(&l.unary, &inputs, f64::INFINITY, a.model.foreground_threshold)?;
    let result = semantic::run(
        &l.unary,
        &prepared.detections,
        &l.pairwise,
        &l.params,
        &settings(&a.model),
    )?;
    let labels = result.q.decode();
    Pgm::from_labels8(grid.width(), grid.height(), labels.labels())?.write(&a.out_map)?;
    let mut out = l.records.clone();
    for (&src, y) in prepared.sources.iter().zip(result.y_marginals()) {
        out[src].y_marginal = Some(y);
    }
    write_detections(&a.out_detections, &out)?;
    if let Some(p) = &a.render {
        write_ppm(p, grid.width(), grid.height(), labels.labels())?;
    }
    Ok(())
}

fn instances(a: &InstancesArgs) -> Result<(), Failure> {
    let l = load(&a.model)?;
    let grid = l.unary.grid();
    let inputs = hocrf_core::io::detections::to_inputs(&l.records, base_dir(&a.model.detections), grid)?;
    let mut config = PipelineConfig::for_model(&l.pairwise);
    config.nms_iou = a.nms_iou;
    config.foreground_threshold = a.model.foreground_threshold;
    config.semantic = settings(&a.model);
    config.instance = settings(&a.model);
    let map: InstanceMap = if inputs.is_empty() {
        let space = InstanceLabelSpace::from_detections(&[])?;
        InstanceMap::new(grid, vec![0; grid.len()], &space)?
    } else if a.naive {
        run_naive(&l.unary, &inputs, &l.pairwise, &l.params, &config)?.1
    } else {
        run_pipeline(&l.unary, &inputs, &l.pairwise, &l.params, &config)?.map
    };
    let file = InstanceMapFile::from_map(&map)?;
    let sidecar = a
        .out_sidecar
        .clone()
        .unwrap_or_else(|| a.out_map.with_extension("json"));
    file.write(&a.out_map, &sidecar)?;
    if let Some(p) = &a.render {
        write_ppm(p, grid.width(), grid.height(), map.labels())?;
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let pred = Manifest::read(&a.pred)?;
    let gt = Manifest::read(&a.gt)?;
    let mut missing = gt.missing_files();
    missing.extend(pred.missing_files());
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing).into());
    }
    let gts = gt.load_ground_truth()?;
    let preds = pred.load_predictions()?;
    let summary = apr_summary(&preds, &gts, &a.thresholds)?;
    print!("{}", summary.to_text());
    if let Some(p) = &a.json {
        std::fs::write(p, summary.to_json() + "\n").map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<(), Failure> {
    if a.sizes.is_empty() || a.sizes.contains(&0) {
        return Err(Error::Invalid("--sizes must be positive".into()).into());
    }
    if a.channels == 0 {
        return Err(Error::Invalid("--channels must be positive".into()).into());
    }
    println!("{:>8} {:>6} {:>12}", "backend", "size", "ms/call");
    let mut times = Vec::new();
    for &backend in &a.backends {
        for &n in &a.sizes {
            let grid = PixelGrid::new(n, n)?;
            let image = scene_image(grid, a.seed);
            let features = FeatureField::bilateral(
                &image,
                KernelSpec::DEFAULT_THETA_ALPHA,
                KernelSpec::DEFAULT_THETA_BETA,
            )?;
            let values = ndarray::Array2::from_shape_fn((grid.len(), a.channels), |(i, c)| {
                image.pixel(i)[c % 3] / 255.0
            });
            let backend: Backend = backend.into();
            let plan = FilterPlan::build(features, backend);
            let start = Instant::now();
            let out = plan.filter(values.view())?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(out);
            println!("{:>8} {:>6} {:>12.3}", backend.name(), n, ms);
            times.push((backend, n, ms));
        }
    }
    for &n in &a.sizes {
        let find = |b| times.iter().find(|t| t.0 == b && t.1 == n).map(|t| t.2);
        if let (Some(lat), Some(brute)) = (find(Backend::Lattice), find(Backend::Brute)) {
            let speedup = brute / lat;
            let flag = if speedup >= 10.0 { "yes" } else { "no" };
            println!("size {n}: lattice speedup {speedup:.1}x (>= 10x: {flag})");
        }
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let spec = GradcheckSpec {
        seed: a.seed,
        iterations: a.iterations,
        ..GradcheckSpec::default()
    };
    let mut passed = true;
    if matches!(a.stage, Stage::Semantic | Stage::All) {
        let r = gradcheck_semantic(&spec)?;
        print!("{r}");
        passed &= r.passed;
    }
    if matches!(a.stage, Stage::Composed | Stage::All) {
        let r = gradcheck_composed(&spec)?;
        print!("{r}");
        passed &= r.passed;
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::Internal("gradient check failed".into()))
    }
}

fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let scene = occlusion_scene(a.seed);
    let grid = scene.grid();
    let dir = &a.out;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    TensorFile::from_unary(&scene.unary).write(&dir.join("unary.crfu"))?;

    let raw: Vec<u8> = scene
        .image
        .pixels()
        .iter()
        .flat_map(|p| p.map(|c| c.round().clamp(0.0, 255.0) as u8))
        .collect();
    let path = dir.join("image.png");
    image::save_buffer(
        &path,
        &raw,
        grid.width() as u32,
        grid.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;

    let records: Vec<DetectionRecord> = scene
        .detections
        .iter()
        .map(|d| DetectionRecord {
            label: d.label,
            score: d.score,
            bbox: d.bbox.as_array(),
            mask: None,
            y_marginal: None,
        })
        .collect();
    write_detections(&dir.join("detections.json"), &records)?;

    let mut labels = vec![0usize; grid.len()];
    let mut gt_records = Vec::new();
    for (k, (class, mask)) in scene.ground_truth.iter().enumerate() {
        for (l, &m) in labels.iter_mut().zip(mask) {
            if m {
                *l = k + 1;
            }
        }
        gt_records.push(InstanceRecord {
            index: k + 1,
            detection: k,
            class: *class,
            score: 1.0,
        });
    }
    let gt = InstanceMapFile {
        map: Pgm::from_labels16(grid.width(), grid.height(), &labels)?,
        records: gt_records,
    };
    gt.write(&dir.join("gt.pgm"), &dir.join("gt.json"))?;
    let manifest = Manifest {
        images: vec![ManifestEntry {
            map: "gt.pgm".into(),
            sidecar: "gt.json".into(),
        }],
    };
    let path = dir.join("gt_manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}
