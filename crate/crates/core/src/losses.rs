//! Self-supervised losses over an interleaved active/passive frame triplet.
//!
//! All terms are differentiable with respect to the candidate left depth at time `t`.
//! Photometric maps are computed in the current left view: the active right image is
//! warped by stereo geometry, the four passive images at `t ± 1` by stereo and
//! temporal geometry. Passive pairs are compared with each other, and their minimum is
//! kept separate from the active term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::geometry::{warp_var, DepthMap, GeometryError, Pose, StereoRig, DISPARITY_MAX, DISPARITY_MIN};
use crate::image::{Image, Mask};
use crate::landmarks::SparseDepthImage;
use crate::scene_sim::FrameTriplet;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("expected {expected} pyramid levels, got {got}")]
    PyramidDepth { expected: usize, got: usize },
    #[error("input size {got:?} does not match {expected:?}")]
    SizeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("mean disparity is zero")]
    ZeroMeanDisparity,
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("image {0:?} too small for {1} scales")]
    TooManyScales((usize, usize), usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, LossError>;

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// Offset that keeps invalid pixels out of per-pixel minima.
const INVALID_PENALTY: f64 = 10.0;
/// IR median window radius (9×9).
pub const MEDIAN_RADIUS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub alpha_pe: f64,
    pub beta: f64,
    pub n_scales: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 0.01, w3: 1.0, w4: 1e-5, w5: 2e-6, alpha_pe: 0.85, beta: 1.0, n_scales: 4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w1, self.w2, self.w3, self.w4, self.w5, self.beta];
        if ws.iter().any(|w| !(*w >= 0.0)) {
            return Err(LossError::InvalidWeights("weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha_pe) {
            return Err(LossError::InvalidWeights("alpha_pe must lie in [0, 1]".into()));
        }
        if self.n_scales == 0 {
            return Err(LossError::InvalidWeights("need at least one scale".into()));
        }
        Ok(())
    }
}

/// Per-pixel photometric map with the pixels it is defined on.
pub struct PhotoMap<'t> {
    pub map: Var<'t>,
    pub valid: Mask,
}

impl<'t> PhotoMap<'t> {
    pub fn mean(&self) -> Result<Var<'t>> {
        Ok(self.map.mean_masked(&self.valid.to_tensor())?)
    }
}

fn check_size(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(LossError::SizeMismatch { expected, got });
    }
    Ok(())
}

/// Per-pixel `alpha (1 − SSIM) / 2 + (1 − alpha) |a − b|` with a 3×3 box SSIM.
pub fn pe_var<'t>(a: Var<'t>, b: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    let mu_a = a.box_filter(1)?;
    let mu_b = b.box_filter(1)?;
    let mu_a2 = mu_a.square()?;
    let mu_b2 = mu_b.square()?;
    let mu_ab = mu_a.mul(mu_b)?;
    let sigma_a = a.square()?.box_filter(1)?.sub(mu_a2)?;
    let sigma_b = b.square()?.box_filter(1)?.sub(mu_b2)?;
    let sigma_ab = a.mul(b)?.box_filter(1)?.sub(mu_ab)?;
    let num = mu_ab.mul_scalar(2.0)?.add_scalar(SSIM_C1)?.mul(sigma_ab.mul_scalar(2.0)?.add_scalar(SSIM_C2)?)?;
    let den = mu_a2.add(mu_b2)?.add_scalar(SSIM_C1)?.mul(sigma_a.add(sigma_b)?.add_scalar(SSIM_C2)?)?;
    let ssim = num.div(den)?;
    let dssim = ssim.neg().add_scalar(1.0)?.mul_scalar(0.5 * alpha)?;
    let l1 = a.sub(b)?.abs().mul_scalar(1.0 - alpha)?;
    Ok(dssim.add(l1)?)
}

/// Untaped photometric error: per-pixel map and its mean over `valid` (0 when empty).
pub fn pe(target: &Image, warped: &Image, valid: &Mask, alpha: f64) -> Result<(Image, f64)> {
    check_size(target.dims(), warped.dims())?;
    check_size(target.dims(), (valid.width(), valid.height()))?;
    let tape = Tape::new();
    let map = pe_var(tape.constant(target.to_tensor()), tape.constant(warped.to_tensor()), alpha)?;
    let mean = map.mean_masked(&valid.to_tensor())?.item();
    Ok((Image::from_tensor(&map.value()).expect("rank 2"), mean))
}

/// Pixels whose 3×3 SSIM window lies entirely inside `valid`.
pub fn window_valid(valid: &Mask) -> Mask {
    valid.erode(1)
}

/// Images and geometry of one pyramid level.
#[derive(Clone, Debug)]
pub struct ScaleInputs {
    /// 1-based level; weight `1 / level²`.
    pub level: usize,
    pub rig: StereoRig,
    pub active_left: Image,
    pub active_right: Image,
    pub prev_left: Image,
    pub prev_right: Image,
    pub next_left: Image,
    pub next_right: Image,
    /// Median-filtered active IR used for edge-aware smoothness.
    pub ir_filtered: Image,
    pub d_sd: DepthMap,
    pub sparse: SparseDepthImage,
    /// Landmarks at their full-resolution pixel centers expressed in this level's coordinates.
    pub sparse_samples: SparseSamples,
}

/// Sub-pixel landmark positions `(u, v)` with target depths `z`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseSamples {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub z: Vec<f64>,
}

impl SparseSamples {
    /// Nonzero pixels of a full-resolution raster mapped to a level whose pixels are
    /// `factor` times larger, clamped to the level's lattice.
    pub fn from_raster(sparse: &SparseDepthImage, factor: usize, width: usize, height: usize) -> Self {
        let f = factor as f64;
        let mut out = Self::default();
        for (x, y, z) in sparse.points() {
            out.u.push(((x as f64 + 0.5) / f - 0.5).clamp(0.0, (width - 1) as f64));
            out.v.push(((y as f64 + 0.5) / f - 0.5).clamp(0.0, (height - 1) as f64));
            out.z.push(z);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Relative poses taking current-left points into each source camera.
#[derive(Clone, Copy, Debug)]
pub struct TripletPoses {
    pub to_right: Pose,
    pub to_prev_left: Pose,
    pub to_prev_right: Pose,
    pub to_next_left: Pose,
    pub to_next_right: Pose,
}

impl TripletPoses {
    pub fn new(rig: &StereoRig, pose: &Pose, prev: &Pose, next: &Pose) -> Self {
        let target = *pose;
        Self {
            to_right: rig.right_from_left(),
            to_prev_left: Pose::target_to_source(&target, prev),
            to_prev_right: Pose::target_to_source(&target, &rig.right_pose(prev)),
            to_next_left: Pose::target_to_source(&target, next),
            to_next_right: Pose::target_to_source(&target, &rig.right_pose(next)),
        }
    }
}

/// Pre-pooled loss inputs for every scale.
#[derive(Clone, Debug)]
pub struct LossInputs {
    pub scales: Vec<ScaleInputs>,
    pub poses: TripletPoses,
}

/// Masked 2×2 average; a pooled pixel is valid when any of its four inputs is.
pub fn pool_depth(depth: &DepthMap) -> DepthMap {
    let (w, h) = (depth.width() / 2, depth.height() / 2);
    let mut img = Image::zeros(w, h);
    let mut valid = Mask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0);
            for (xx, yy) in [(2 * x, 2 * y), (2 * x + 1, 2 * y), (2 * x, 2 * y + 1), (2 * x + 1, 2 * y + 1)] {
                if depth.valid.get(xx, yy) {
                    s += depth.image.get(xx, yy);
                    n += 1;
                }
            }
            if n > 0 {
                img.set(x, y, s / n as f64);
                valid.set(x, y, true);
            }
        }
    }
    DepthMap::with_mask(img, valid)
}

impl LossInputs {
    pub fn new(
        triplet: &FrameTriplet,
        rig: &StereoRig,
        d_sd: &DepthMap,
        sparse: &SparseDepthImage,
        n_scales: usize,
    ) -> Result<Self> {
        let dims = (rig.intrinsics.width, rig.intrinsics.height);
        for img in [
            &triplet.active_left,
            &triplet.active_right,
            &triplet.prev.left,
            &triplet.prev.right,
            &triplet.next.left,
            &triplet.next.right,
            &d_sd.image,
            &sparse.image,
        ] {
            check_size(dims, img.dims())?;
        }
        if n_scales == 0 || dims.0 >> (n_scales - 1) == 0 || dims.1 >> (n_scales - 1) == 0 {
            return Err(LossError::TooManyScales(dims, n_scales));
        }
        let mut scales = Vec::with_capacity(n_scales);
        scales.push(ScaleInputs {
            level: 1,
            rig: *rig,
            active_left: triplet.active_left.clone(),
            active_right: triplet.active_right.clone(),
            prev_left: triplet.prev.left.clone(),
            prev_right: triplet.prev.right.clone(),
            next_left: triplet.next.left.clone(),
            next_right: triplet.next.right.clone(),
            ir_filtered: triplet.active_left.median_filter(MEDIAN_RADIUS),
            d_sd: d_sd.clone(),
            sparse: sparse.clone(),
            sparse_samples: SparseSamples::from_raster(sparse, 1, dims.0, dims.1),
        });
        for level in 2..=n_scales {
            let p = scales.last().expect("finest level");
            let rig_l = p.rig.pooled();
            scales.push(ScaleInputs {
                level,
                rig: rig_l,
                active_left: p.active_left.pool2(),
                active_right: p.active_right.pool2(),
                prev_left: p.prev_left.pool2(),
                prev_right: p.prev_right.pool2(),
                next_left: p.next_left.pool2(),
                next_right: p.next_right.pool2(),
                ir_filtered: p.ir_filtered.pool2(),
                d_sd: pool_depth(&p.d_sd),
                sparse: sparse.reproject(&rig.intrinsics, &rig_l.intrinsics),
                sparse_samples: SparseSamples::from_raster(
                    sparse,
                    1 << (level - 1),
                    rig_l.intrinsics.width,
                    rig_l.intrinsics.height,
                ),
            });
        }
        let poses = TripletPoses::new(rig, &triplet.pose, &triplet.prev.pose, &triplet.next.pose);
        Ok(Self { scales, poses })
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    /// Levels from `skip` on, renumbered so the first kept level has index 1.
    pub fn suffix(&self, skip: usize) -> LossInputs {
        let scales =
            self.scales[skip..].iter().enumerate().map(|(i, s)| ScaleInputs { level: i + 1, ..s.clone() }).collect();
        LossInputs { scales, poses: self.poses }
    }
}

/// Warped image plus its sampling validity.
fn warp<'t>(tape: &'t Tape, s: &ScaleInputs, source: &Image, depth: Var<'t>, pose: &Pose) -> Result<(Var<'t>, Mask)> {
    let (out, valid) = warp_var(&s.rig.intrinsics, tape.constant(source.to_tensor()), depth, pose)?;
    Ok((out, valid))
}

/// Active stereo term: right active image warped into the left view.
pub fn stereo_on_loss<'t>(
    tape: &'t Tape,
    s: &ScaleInputs,
    poses: &TripletPoses,
    depth: Var<'t>,
    alpha: f64,
) -> Result<PhotoMap<'t>> {
    let (warped, valid) = warp(tape, s, &s.active_right, depth, &poses.to_right)?;
    let map = pe_var(tape.constant(s.active_left.to_tensor()), warped, alpha)?;
    Ok(PhotoMap { map, valid: window_valid(&valid) })
}

/// Names of the four passive maps in the order returned by [`off_losses`].
pub const OFF_NAMES: [&str; 4] = ["temp_right", "temp_left", "stereo_prev", "stereo_next"];

/// Passive terms, each comparing two warped passive images in the current left view:
/// `t−1 R` vs `t+1 R`, `t−1 L` vs `t+1 L`, `t−1 L` vs `t−1 R`, `t+1 L` vs `t+1 R`.
pub fn off_losses<'t>(
    tape: &'t Tape,
    s: &ScaleInputs,
    poses: &TripletPoses,
    depth: Var<'t>,
    alpha: f64,
) -> Result<[PhotoMap<'t>; 4]> {
    let (pl, vpl) = warp(tape, s, &s.prev_left, depth, &poses.to_prev_left)?;
    let (pr, vpr) = warp(tape, s, &s.prev_right, depth, &poses.to_prev_right)?;
    let (nl, vnl) = warp(tape, s, &s.next_left, depth, &poses.to_next_left)?;
    let (nr, vnr) = warp(tape, s, &s.next_right, depth, &poses.to_next_right)?;
    let term = |a: Var<'t>, va: &Mask, b: Var<'t>, vb: &Mask| -> Result<PhotoMap<'t>> {
        Ok(PhotoMap { map: pe_var(a, b, alpha)?, valid: window_valid(&va.and(vb)) })
    };
    Ok([term(pr, &vpr, nr, &vnr)?, term(pl, &vpl, nl, &vnl)?, term(pl, &vpl, pr, &vpr)?, term(nl, &vnl, nr, &vnr)?])
}

/// Identity-reprojection errors of the same four passive pairs, without warping.
pub fn identity_losses(s: &ScaleInputs, alpha: f64) -> Result<[Image; 4]> {
    let full = Mask::filled(s.prev_left.width(), s.prev_left.height(), true);
    let pair = |a: &Image, b: &Image| pe(a, b, &full, alpha).map(|(m, _)| m);
    Ok([
        pair(&s.prev_right, &s.next_right)?,
        pair(&s.prev_left, &s.next_left)?,
        pair(&s.prev_left, &s.prev_right)?,
        pair(&s.next_left, &s.next_right)?,
    ])
}

/// Keeps a pixel iff the minimum warped passive error is strictly below the minimum
/// identity error.
pub fn auto_mask(off: &[PhotoMap<'_>; 4], identity: &[Image; 4]) -> Mask {
    let (h, w) = match off[0].map.shape()[..] {
        [h, w] => (h, w),
        _ => unreachable!("photometric maps are rank 2"),
    };
    let values: Vec<_> = off.iter().map(|t| t.map.value()).collect();
    Mask::from_fn(w, h, |x, y| {
        let i = y * w + x;
        let warped =
            (0..4).filter(|&k| off[k].valid.get(x, y)).map(|k| values[k].data()[i]).fold(f64::INFINITY, f64::min);
        let ident = identity.iter().map(|m| m.get(x, y)).fold(f64::INFINITY, f64::min);
        warped < ident
    })
}

fn masked_min<'t>(terms: &[&PhotoMap<'t>]) -> Result<(Var<'t>, Mask)> {
    let penalized = |t: &PhotoMap<'t>| -> Result<Var<'t>> {
        let pen = t.valid.not().to_tensor().into_data().into_iter().map(|v| v * INVALID_PENALTY).collect();
        Ok(t.map.add_const(Tensor::new(t.map.shape(), pen)?)?)
    };
    let mut acc = penalized(terms[0])?;
    let mut any = terms[0].valid.clone();
    for t in &terms[1..] {
        acc = acc.min(penalized(t)?)?;
        any = any.or(&t.valid);
    }
    Ok((acc, any))
}

/// Per-pixel minimum over the passive maps, defined where any map is valid and the
/// auto-mask keeps the pixel.
pub fn off_minimum<'t>(off: &[PhotoMap<'t>; 4], auto: &Mask) -> Result<PhotoMap<'t>> {
    let (map, any) = masked_min(&off.iter().collect::<Vec<_>>())?;
    Ok(PhotoMap { map, valid: any.and(auto) })
}

/// `mean(on) + beta · mean(min(off))`.
pub fn photo_combined<'t>(on: &PhotoMap<'t>, off_min: &PhotoMap<'t>, beta: f64) -> Result<Var<'t>> {
    Ok(on.mean()?.add(off_min.mean()?.mul_scalar(beta)?)?)
}

/// Single minimum over all five maps, without auto-masking; the unsplit baseline.
pub fn photo_full_min<'t>(on: &PhotoMap<'t>, off: &[PhotoMap<'t>; 4]) -> Result<Var<'t>> {
    let mut terms: Vec<&PhotoMap<'t>> = vec![on];
    terms.extend(off.iter());
    let (map, any) = masked_min(&terms)?;
    Ok(map.mean_masked(&any.to_tensor())?)
}

/// `mean over Ω_sd of |D_sd − D| / D_sd²`.
pub fn sd_loss<'t>(depth: Var<'t>, d_sd: &DepthMap) -> Result<Var<'t>> {
    let dims = (d_sd.width(), d_sd.height());
    check_size(dims, dims_of(depth)?)?;
    let valid = d_sd.valid.to_tensor();
    let target: Vec<f64> =
        d_sd.image.data().iter().zip(d_sd.valid.data()).map(|(&d, &v)| if v { d } else { 0.0 }).collect();
    let weight: Vec<f64> =
        target.iter().zip(d_sd.valid.data()).map(|(&d, &v)| if v { 1.0 / (d * d) } else { 0.0 }).collect();
    let shape = valid.shape().to_vec();
    let err = depth.add_const(Tensor::new(shape.clone(), target.iter().map(|d| -d).collect())?)?.abs();
    Ok(err.mul_const(Tensor::new(shape, weight)?)?.mean_masked(&valid)?)
}

/// `mean over Ω_s of |D_s − D|`.
pub fn sparse_loss<'t>(depth: Var<'t>, sparse: &SparseDepthImage) -> Result<Var<'t>> {
    check_size(sparse.image.dims(), dims_of(depth)?)?;
    let target = sparse.image.to_tensor();
    let neg = Tensor::new(target.shape().to_vec(), target.data().iter().map(|d| -d).collect())?;
    Ok(depth.add_const(neg)?.abs().mean_masked(&sparse.mask().to_tensor())?)
}

/// Mean of `|D(u, v) − z|` over landmark samples, with `D` bilinearly interpolated;
/// equals [`sparse_loss`] when every sample sits on a pixel center.
pub fn sparse_loss_sampled<'t>(depth: Var<'t>, samples: &SparseSamples) -> Result<Var<'t>> {
    dims_of(depth)?;
    if samples.is_empty() {
        return Ok(depth.tape().scalar(0.0));
    }
    let n = samples.len();
    let tape = depth.tape();
    let u = tape.constant(Tensor::new(vec![n], samples.u.clone())?);
    let v = tape.constant(Tensor::new(vec![n], samples.v.clone())?);
    let (at, valid) = depth.sample(u, v, None)?;
    let mask = Tensor::new(vec![n], valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
    let neg = Tensor::new(vec![n], samples.z.iter().map(|z| -z).collect())?;
    Ok(at.add_const(neg)?.abs().mean_masked(&mask)?)
}

fn dims_of(v: Var<'_>) -> Result<(usize, usize)> {
    match v.shape()[..] {
        [h, w] => Ok((w, h)),
        _ => Err(LossError::Autodiff(AutodiffError::InvalidShape("expected a [h, w] map".into()))),
    }
}

/// Edge-aware smoothness on mean-normalized disparity against an already filtered IR image.
pub fn smooth_loss_filtered<'t>(disparity: Var<'t>, ir_filtered: &Image) -> Result<Var<'t>> {
    check_size(ir_filtered.dims(), dims_of(disparity)?)?;
    let mean = disparity.mean();
    if mean.item() == 0.0 {
        return Err(LossError::ZeroMeanDisparity);
    }
    let d_star = disparity.div(mean)?;
    let tape_ir = Tape::new();
    let ir = tape_ir.constant(ir_filtered.to_tensor());
    let wx = ir.diff_x()?.abs().neg().exp().value();
    let wy = ir.diff_y()?.abs().neg().exp().value();
    let sx = d_star.diff_x()?.abs().mul_const((*wx).clone())?;
    let sy = d_star.diff_y()?.abs().mul_const((*wy).clone())?;
    let (mx, my) = (sx.mean(), sy.mean());
    Ok(mx.add(my)?)
}

/// Edge-aware smoothness; the IR image is first median filtered (9×9) to remove the pattern.
pub fn smooth_loss<'t>(disparity: Var<'t>, ir: &Image) -> Result<Var<'t>> {
    smooth_loss_filtered(disparity, &ir.median_filter(MEDIAN_RADIUS))
}

/// `Σ |γ|` over all branches and layers.
pub fn gamma_loss<'t>(tape: &'t Tape, gammas: &[Var<'t>]) -> Var<'t> {
    gammas.iter().fold(tape.scalar(0.0), |acc, g| acc.add(g.abs().sum()).expect("scalars broadcast"))
}

/// Normalized disparity `(1/D − 1/20) / (1/0.3 − 1/20)`.
pub fn depth_to_normalized_disparity_var<'t>(depth: Var<'t>) -> Result<Var<'t>> {
    Ok(depth.recip()?.add_scalar(-DISPARITY_MIN)?.mul_scalar(1.0 / (DISPARITY_MAX - DISPARITY_MIN))?)
}

/// Per-scale component values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleBreakdown {
    pub level: usize,
    pub photo_on: f64,
    pub photo_off_min: f64,
    pub sd: f64,
    pub sparse: f64,
    pub smooth: f64,
}

/// Component values; photometric, sd, sparse and smooth entries are `Σ_l value_l / l²`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub photo_on: f64,
    pub photo_off_min: f64,
    pub sd: f64,
    pub sparse: f64,
    pub smooth: f64,
    pub gamma: f64,
    pub total: f64,
    pub scales: Vec<ScaleBreakdown>,
}

impl LossBreakdown {
    /// Recombines the components with `weights`.
    pub fn recombine(&self, weights: &LossWeights) -> f64 {
        weights.w1 * (self.photo_on + weights.beta * self.photo_off_min)
            + weights.w2 * self.sd
            + weights.w3 * self.sparse
            + weights.w4 * self.smooth
            + weights.w5 * self.gamma
    }
}

/// Full-resolution photometric maps, for inspection.
#[derive(Clone, Debug)]
pub struct PhotoMaps {
    pub on: Image,
    pub on_valid: Mask,
    pub off: [Image; 4],
    pub off_valid: [Mask; 4],
    pub off_min: Image,
    pub off_min_valid: Mask,
    pub auto_mask: Mask,
}

/// Result of a loss evaluation: the taped scalar plus its decomposition.
pub struct LossEval<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    pub maps: PhotoMaps,
}

/// Which photometric combination to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PhotoMode {
    /// Active term plus the auto-masked passive minimum.
    #[default]
    Split,
    /// Minimum over all five maps; reported under `photo_on`.
    FullMin,
}

/// Weighted multi-scale loss for a depth pyramid (finest first).
pub fn total_loss<'t>(
    tape: &'t Tape,
    inputs: &LossInputs,
    pyramid: &[Var<'t>],
    gammas: &[Var<'t>],
    weights: &LossWeights,
) -> Result<LossEval<'t>> {
    total_loss_with(tape, inputs, pyramid, gammas, weights, PhotoMode::Split)
}

pub fn total_loss_with<'t>(
    tape: &'t Tape,
    inputs: &LossInputs,
    pyramid: &[Var<'t>],
    gammas: &[Var<'t>],
    weights: &LossWeights,
    mode: PhotoMode,
) -> Result<LossEval<'t>> {
    weights.validate()?;
    if pyramid.len() != weights.n_scales || inputs.n_scales() < weights.n_scales {
        return Err(LossError::PyramidDepth { expected: weights.n_scales, got: pyramid.len() });
    }
    let mut total = tape.scalar(0.0);
    let mut breakdown = LossBreakdown::default();
    let mut maps = None;
    for (s, &depth) in inputs.scales.iter().zip(pyramid) {
        check_size(s.active_left.dims(), dims_of(depth)?)?;
        let scale = 1.0 / (s.level * s.level) as f64;
        let on = stereo_on_loss(tape, s, &inputs.poses, depth, weights.alpha_pe)?;
        let off = off_losses(tape, s, &inputs.poses, depth, weights.alpha_pe)?;
        let identity = identity_losses(s, weights.alpha_pe)?;
        let auto = auto_mask(&off, &identity);
        let off_min = off_minimum(&off, &auto)?;
        let (photo, on_v, off_v) = match mode {
            PhotoMode::Split => {
                let (a, b) = (on.mean()?, off_min.mean()?);
                (a.add(b.mul_scalar(weights.beta)?)?, a.item(), b.item())
            }
            PhotoMode::FullMin => {
                let f = photo_full_min(&on, &off)?;
                (f, f.item(), 0.0)
            }
        };
        let sd = sd_loss(depth, &s.d_sd)?;
        let sparse = sparse_loss_sampled(depth, &s.sparse_samples)?;
        let smooth = smooth_loss_filtered(depth_to_normalized_disparity_var(depth)?, &s.ir_filtered)?;
        let level_total = photo
            .mul_scalar(weights.w1)?
            .add(sd.mul_scalar(weights.w2)?)?
            .add(sparse.mul_scalar(weights.w3)?)?
            .add(smooth.mul_scalar(weights.w4)?)?;
        total = total.add(level_total.mul_scalar(scale)?)?;
        let sb = ScaleBreakdown {
            level: s.level,
            photo_on: on_v,
            photo_off_min: off_v,
            sd: sd.item(),
            sparse: sparse.item(),
            smooth: smooth.item(),
        };
        breakdown.photo_on += scale * sb.photo_on;
        breakdown.photo_off_min += scale * sb.photo_off_min;
        breakdown.sd += scale * sb.sd;
        breakdown.sparse += scale * sb.sparse;
        breakdown.smooth += scale * sb.smooth;
        breakdown.scales.push(sb);
        if maps.is_none() {
            let img = |v: Var<'_>| Image::from_tensor(&v.value()).expect("rank 2");
            maps = Some(PhotoMaps {
                on: img(on.map),
                on_valid: on.valid.clone(),
                off: [img(off[0].map), img(off[1].map), img(off[2].map), img(off[3].map)],
                off_valid: [off[0].valid.clone(), off[1].valid.clone(), off[2].valid.clone(), off[3].valid.clone()],
                off_min: img(off_min.map),
                off_min_valid: off_min.valid.clone(),
                auto_mask: auto,
            });
        }
    }
    let gamma = gamma_loss(tape, gammas);
    breakdown.gamma = gamma.item();
    total = total.add(gamma.mul_scalar(weights.w5)?)?;
    breakdown.total = total.item();
    Ok(LossEval { total, breakdown, maps: maps.expect("at least one scale") })
}

/// Depth pyramid from a finest-level depth var by repeated 2×2 average pooling.
pub fn depth_pyramid<'t>(depth: Var<'t>, n_scales: usize) -> Result<Vec<Var<'t>>> {
    let mut out = vec![depth];
    for _ in 1..n_scales {
        let next = out.last().expect("non-empty").avg_pool2()?;
        out.push(next);
    }
    Ok(out)
}
