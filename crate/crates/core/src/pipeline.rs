//! End-to-end run on a synthetic scene: render, SGM, landmarks, refinement, metrics.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::geometry::{DepthMap, Pose, StereoRig};
use crate::image::Mask;
use crate::landmarks::{self, Landmark, LandmarkError, LandmarkParams, SparseDepthImage};
use crate::losses::{LossError, LossInputs, LossWeights, PhotoMode};
use crate::metrics::{compute_metrics, region_metrics, MetricsError, MetricsReport, RegionMetrics};
use crate::refine::{self, RefineError, RefineResult, Schedule};
use crate::scene_sim::{generate_sequence, sliding_trajectory, BlobPattern, FrameTriplet, Scene, SceneError, Sequence};
use crate::sgm::{self, SgmError, SgmParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Sgm(#[from] SgmError),
    #[error(transparent)]
    Landmarks(#[from] LandmarkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("sequence has no active frame with passive neighbors")]
    NoTriplet,
    #[error("semi-dense depth has no valid pixel")]
    EmptySemiDense,
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Depth beyond which a pixel counts as far.
pub const FAR_DEPTH: f64 = 5.0;

/// Lateral camera motion between consecutive frames of the default sequence, meters.
pub const SEQUENCE_STEP: f64 = 0.125;

/// Poses in the default sequence; landmarks are tracked over all of its passive frames.
pub const SEQUENCE_LENGTH: usize = 7;

/// Smoothness weight for per-pixel refinement. A per-pixel variable has no network prior,
/// so the smoothness term has to carry much more weight than in training.
pub const REFINE_SMOOTHNESS: f64 = 10.0;

pub const REFINE_ITERS_PER_SCALE: usize = 30;

/// Loss weights used by the refiner: the training defaults with `w4` raised.
pub fn refine_weights() -> LossWeights {
    LossWeights { w4: REFINE_SMOOTHNESS, ..LossWeights::default() }
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub rig: StereoRig,
    pub trajectory: Vec<Pose>,
    /// Overrides the pattern generated from the scene's pattern parameters.
    pub pattern: Option<BlobPattern>,
    pub sgm: SgmParams,
    pub landmarks: LandmarkParams,
    pub weights: LossWeights,
    pub schedule: Schedule,
    pub mode: PhotoMode,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let weights = refine_weights();
        Self {
            rig: StereoRig::desk_default(),
            trajectory: sliding_trajectory(SEQUENCE_LENGTH, SEQUENCE_STEP, 0.0),
            pattern: None,
            sgm: SgmParams::default(),
            landmarks: LandmarkParams::default(),
            schedule: Schedule::uniform(weights.n_scales, REFINE_ITERS_PER_SCALE),
            weights,
            mode: PhotoMode::Split,
            seed: 0,
        }
    }
}

/// Everything up to, but not including, refinement.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub triplet: FrameTriplet,
    pub d_sd: DepthMap,
    pub landmarks: Vec<Landmark>,
    pub sparse: SparseDepthImage,
    pub baseline: DepthMap,
    /// The semi-dense map plus landmarks: the initial estimate for region splits.
    pub initial: DepthMap,
    pub inputs: LossInputs,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub prepared: Prepared,
    pub refined: RefineResult,
    pub metrics: RegionMetrics,
    pub baseline_metrics: RegionMetrics,
    pub elapsed: Duration,
}

/// Renders the sequence, runs SGM on the active pair of its most central triplet and
/// tracks landmarks over all passive frames.
pub fn prepare(scene: &Scene, config: &PipelineConfig) -> Result<Prepared> {
    let seq = render(scene, config)?;
    let triplet = central_triplet(&seq, config)?;
    let d_sd = sgm::semi_dense_depth(&config.rig, &triplet.active_left, &triplet.active_right, &config.sgm)?;
    let landmarks = landmarks::triangulate_and_track(&seq.passive_frames(), &config.rig, &config.landmarks)?;
    let sparse = landmarks::rasterize(&landmarks, &config.rig.intrinsics, &triplet.pose);
    assemble(triplet, d_sd, landmarks, sparse, config)
}

/// Renders the configured trajectory with the scene's pattern unless overridden.
pub fn render(scene: &Scene, config: &PipelineConfig) -> Result<Sequence> {
    let pattern = config.pattern.clone().unwrap_or_else(|| BlobPattern::generate(&scene.pattern));
    Ok(generate_sequence(scene, &config.rig, &config.trajectory, &pattern, config.seed)?)
}

/// The triplet whose active frame is closest to the middle of the trajectory.
pub fn central_triplet(seq: &Sequence, config: &PipelineConfig) -> Result<FrameTriplet> {
    let mid = config.trajectory.len().saturating_sub(1) / 2;
    seq.triplets().into_iter().min_by_key(|t| t.center_index.abs_diff(mid)).ok_or(PipelineError::NoTriplet)
}

/// Builds the refinement inputs from a triplet and externally computed depth sources.
pub fn assemble(
    triplet: FrameTriplet,
    d_sd: DepthMap,
    landmarks: Vec<Landmark>,
    sparse: SparseDepthImage,
    config: &PipelineConfig,
) -> Result<Prepared> {
    let baseline = refine::nearest_fill_baseline(&d_sd).ok_or(PipelineError::EmptySemiDense)?;
    let initial = initial_estimate(&d_sd, &sparse);
    let inputs = LossInputs::new(&triplet, &config.rig, &d_sd, &sparse, config.weights.n_scales)?;
    Ok(Prepared { triplet, d_sd, landmarks, sparse, baseline, initial, inputs })
}

/// Refines a prepared triplet and scores it against the simulator's depth.
pub fn refine_prepared(
    prepared: Prepared,
    config: &PipelineConfig,
) -> Result<(RefineResult, RegionMetrics, RegionMetrics)> {
    let init = refine::initialize(&prepared.d_sd, &prepared.sparse);
    let refined = refine::run_with(&init, &prepared.inputs, &config.weights, &config.schedule, config.mode)?;
    let gt = &prepared.triplet.gt_depth;
    let metrics = compute_metrics(&refined.depth, gt, &prepared.initial)?;
    let baseline_metrics = compute_metrics(&prepared.baseline, gt, &prepared.initial)?;
    Ok((refined, metrics, baseline_metrics))
}

pub fn run(scene: &Scene, config: &PipelineConfig) -> Result<PipelineOutput> {
    let start = Instant::now();
    let prepared = prepare(scene, config)?;
    let (refined, metrics, baseline_metrics) = refine_prepared(prepared.clone(), config)?;
    Ok(PipelineOutput { prepared, refined, metrics, baseline_metrics, elapsed: start.elapsed() })
}

/// Semi-dense depth with landmark depths filling its holes.
pub fn initial_estimate(d_sd: &DepthMap, sparse: &SparseDepthImage) -> DepthMap {
    let mut out = d_sd.clone();
    for (x, y, z) in sparse.points() {
        if !out.valid.get(x, y) {
            out.image.set(x, y, z);
            out.valid.set(x, y, true);
        }
    }
    out
}

/// Gt-valid pixels deeper than `threshold`.
pub fn far_mask(gt: &DepthMap, threshold: f64) -> Mask {
    Mask::from_fn(gt.width(), gt.height(), |x, y| gt.valid.get(x, y) && gt.image.get(x, y) > threshold)
}

/// Left pixels whose surface point is hidden or out of view in the right camera,
/// judged from the two ground-truth depth maps with a relative tolerance.
pub fn stereo_occlusion_mask(rig: &StereoRig, gt_left: &DepthMap, gt_right: &DepthMap, tol: f64) -> Mask {
    let fb = rig.focal_baseline();
    Mask::from_fn(gt_left.width(), gt_left.height(), |x, y| {
        if !gt_left.valid.get(x, y) {
            return false;
        }
        let z = gt_left.image.get(x, y);
        let xr = (x as f64 - fb / z).round();
        if xr < 0.0 {
            return true;
        }
        let xr = xr as usize;
        !gt_right.valid.get(xr, y) || gt_right.image.get(xr, y) < z * (1.0 - tol)
    })
}

/// Metrics of `pred` restricted to `region` ∩ gt-valid.
pub fn masked_metrics(name: &str, pred: &DepthMap, gt: &DepthMap, region: &Mask) -> MetricsReport {
    region_metrics(name, pred, gt, &region.and(&gt.valid))
}
