//! Sparse landmarks from passive stereo frames with known poses.
//!
//! Features are DoG extrema, matched across the stereo pair by NCC along the
//! rectified row and refined to subpixel accuracy with 1D Lucas-Kanade. Frames are
//! associated by projecting existing landmarks and gating on pixel distance; each
//! track is then re-estimated as the least-squares reprojection point.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{detect_blobs, parabola_offset, DogParams, Keypoint, Polarity};
use crate::geometry::{Intrinsics, Pose, StereoRig};
use crate::image::{Image, Mask};
use crate::scene_sim::PassiveFrame;

#[derive(Debug, Error)]
pub enum LandmarkError {
    #[error("landmark tracking needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame {0} does not match the rig resolution")]
    FrameSize(usize),
}

pub type Result<T> = std::result::Result<T, LandmarkError>;

/// One stereo observation of a landmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    /// Left-image pixel.
    pub x: f64,
    pub y: f64,
    /// Matching right-image column on the same row.
    pub x_right: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: usize,
    /// World-frame position in meters.
    pub position: [f64; 3],
    pub observations: Vec<Observation>,
    pub track_length: usize,
}

/// Depth raster that is zero away from landmark pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthImage {
    pub image: Image,
    pub count: usize,
}

impl SparseDepthImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { image: Image::zeros(width, height), count: 0 }
    }

    /// Wraps a raster; non-positive or non-finite values are zeroed.
    pub fn from_image(image: Image) -> Self {
        let image = image.map(|v| if v.is_finite() && v > 0.0 { v } else { 0.0 });
        let count = image.data().iter().filter(|&&v| v > 0.0).count();
        Self { image, count }
    }

    pub fn mask(&self) -> Mask {
        Mask::new(self.image.width(), self.image.height(), self.image.data().iter().map(|&v| v > 0.0).collect())
    }

    /// Nonzero pixels as `(x, y, depth)`.
    pub fn points(&self) -> Vec<(usize, usize, f64)> {
        let w = self.image.width();
        self.image.data().iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, &v)| (i % w, i / w, v)).collect()
    }

    /// Re-rasterizes the backprojected points with other intrinsics, keeping the nearest depth.
    pub fn reproject(&self, from: &Intrinsics, to: &Intrinsics) -> SparseDepthImage {
        let points: Vec<Vector3<f64>> =
            self.points().into_iter().map(|(x, y, z)| from.ray(x as f64, y as f64) * z).collect();
        rasterize_points(&points, to)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkParams {
    pub max_features: usize,
    pub dog_sigma_small: f64,
    pub dog_sigma_large: f64,
    pub relative_threshold: f64,
    /// NCC patch radius; the window is `(2r + 1)²`.
    pub patch_radius: usize,
    pub min_ncc: f64,
    /// Required NCC gap between the best match and any match more than 1 px away.
    pub ncc_margin: f64,
    /// Minimum patch standard deviation.
    pub min_contrast: f64,
    pub d_max: usize,
    /// Frame-to-frame association gate in pixels.
    pub gate: f64,
    pub reproj_tol: f64,
    pub min_track: usize,
}

impl Default for LandmarkParams {
    fn default() -> Self {
        Self {
            max_features: 120,
            dog_sigma_small: 1.0,
            dog_sigma_large: 1.6,
            relative_threshold: 0.05,
            patch_radius: 3,
            min_ncc: 0.9,
            ncc_margin: 0.05,
            min_contrast: 0.01,
            d_max: 64,
            gate: 2.0,
            reproj_tol: 1.0,
            min_track: 2,
        }
    }
}

/// DoG extrema of either polarity, strongest first, capped at `max_features`.
pub fn detect_features(image: &Image, params: &LandmarkParams) -> Vec<Keypoint> {
    let dog = DogParams {
        sigma_small: params.dog_sigma_small,
        sigma_large: params.dog_sigma_large,
        nms_radius: 2,
        relative_threshold: params.relative_threshold,
        absolute_threshold: 1e-4,
        border: params.patch_radius + (3.0 * params.dog_sigma_large).ceil() as usize,
        polarity: Polarity::Both,
    };
    let mut kp = detect_blobs(image, &dog);
    kp.truncate(params.max_features);
    kp
}

fn patch(image: &Image, x: f64, y: f64, r: usize) -> Option<Vec<f64>> {
    let r = r as isize;
    let mut out = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            out.push(image.sample_bilinear(x + dx as f64, y + dy as f64)?);
        }
    }
    Some(out)
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (p, q) in a.iter().zip(b) {
        num += (p - ma) * (q - mb);
        va += (p - ma).powi(2);
        vb += (q - mb).powi(2);
    }
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        num / (va * vb).sqrt()
    }
}

fn std_dev(a: &[f64]) -> f64 {
    let n = a.len() as f64;
    let m = a.iter().sum::<f64>() / n;
    (a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// 1D Lucas-Kanade: refines `x_target` so that the target patch around `(x_target, y)`
/// matches the reference patch around `(x_ref, y)` in the least-squares sense.
pub fn refine_horizontal(
    reference: &Image,
    target: &Image,
    x_ref: f64,
    y_ref: f64,
    x_target: f64,
    y_target: f64,
    r: usize,
) -> Option<f64> {
    let tpl = patch(reference, x_ref, y_ref, r)?;
    let mut x = x_target;
    let ri = r as isize;
    for _ in 0..20 {
        let (mut num, mut den) = (0.0, 0.0);
        let mut k = 0;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let (u, v) = (x + dx as f64, y_target + dy as f64);
                let i = target.sample_bilinear(u, v)?;
                let g = target.sample_bilinear(u + 0.5, v)? - target.sample_bilinear(u - 0.5, v)?;
                let e = i - tpl[k];
                num += g * e;
                den += g * g;
                k += 1;
            }
        }
        if den < 1e-12 {
            return None;
        }
        let step = (num / den).clamp(-0.5, 0.5);
        x -= step;
        if step.abs() < 1e-6 {
            break;
        }
    }
    ((x - x_target).abs() <= 1.0).then_some(x)
}

/// Right-image column matching left pixel `(x, y)`, or `None` when ambiguous.
pub fn match_stereo(left: &Image, right: &Image, x: f64, y: f64, params: &LandmarkParams) -> Option<f64> {
    let r = params.patch_radius;
    let tpl = patch(left, x, y, r)?;
    if std_dev(&tpl) < params.min_contrast {
        return None;
    }
    let scores: Vec<f64> = (0..=params.d_max)
        .map(|d| patch(right, x - d as f64, y, r).map_or(f64::NEG_INFINITY, |p| ncc(&tpl, &p)))
        .collect();
    let best = (0..scores.len()).fold(0, |b, d| if scores[d] > scores[b] { d } else { b });
    if scores[best] < params.min_ncc {
        return None;
    }
    if scores.iter().enumerate().any(|(d, &s)| d.abs_diff(best) > 1 && s > scores[best] - params.ncc_margin) {
        return None;
    }
    let sub = if best > 0 && best + 1 < scores.len() && scores[best - 1].is_finite() && scores[best + 1].is_finite() {
        parabola_offset(scores[best - 1], scores[best], scores[best + 1])
    } else {
        0.0
    };
    let xr0 = x - (best as f64 + sub);
    refine_horizontal(left, right, x, y, xr0, y, r)
}

/// World point from a rectified stereo observation.
pub fn triangulate_stereo(rig: &StereoRig, left_cfw: &Pose, x: f64, y: f64, x_right: f64) -> Option<Vector3<f64>> {
    let d = x - x_right;
    if !(d > 1e-6) {
        return None;
    }
    let z = rig.focal_baseline() / d;
    let p_cam = rig.intrinsics.ray(x, y) * z;
    Some(left_cfw.inverse().transform(&p_cam))
}

/// Pixel residuals of `point` against every left and right observation.
pub fn residuals(rig: &StereoRig, poses: &[Pose], obs: &[Observation], point: &Vector3<f64>) -> Vec<f64> {
    let k = &rig.intrinsics;
    let mut out = Vec::with_capacity(obs.len() * 3);
    for o in obs {
        let left = poses[o.frame];
        let ql = left.transform(point);
        let qr = rig.right_pose(&left).transform(point);
        match (k.project(&ql), k.project(&qr)) {
            (Some((ul, vl)), Some((ur, vr))) => {
                out.extend([ul - o.x, vl - o.y, ur - o.x_right, vr - o.y]);
            }
            _ => out.extend([f64::INFINITY; 4]),
        }
    }
    out
}

/// Gauss-Newton least-squares point over all left and right observations.
pub fn refine_point(rig: &StereoRig, poses: &[Pose], obs: &[Observation], init: Vector3<f64>) -> Vector3<f64> {
    let k = &rig.intrinsics;
    let mut x = init;
    for _ in 0..20 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for o in obs {
            let left = poses[o.frame];
            for (pose, u_obs) in [(left, o.x), (rig.right_pose(&left), o.x_right)] {
                let q = pose.transform(&x);
                if q.z <= 1e-9 {
                    continue;
                }
                let r = pose.rotation();
                let ru = k.fx * q.x / q.z + k.cx - u_obs;
                let rv = k.fy * q.y / q.z + k.cy - o.y;
                let du = Vector3::new(k.fx / q.z, 0.0, -k.fx * q.x / (q.z * q.z));
                let dv = Vector3::new(0.0, k.fy / q.z, -k.fy * q.y / (q.z * q.z));
                let ju = r.transpose() * du;
                let jv = r.transpose() * dv;
                jtj += ju * ju.transpose() + jv * jv.transpose();
                jtr += ju * ru + jv * rv;
            }
        }
        let Some(step) = jtj.lu().solve(&jtr) else { break };
        x -= step;
        if step.norm() < 1e-12 {
            break;
        }
    }
    x
}

/// Builds landmarks from grouped observations: refines each track and drops those
/// shorter than `min_track` or with any residual above `reproj_tol`.
pub fn assemble(
    rig: &StereoRig,
    poses: &[Pose],
    tracks: Vec<Vec<Observation>>,
    params: &LandmarkParams,
) -> Vec<Landmark> {
    let mut out = Vec::new();
    for obs in tracks {
        if obs.len() < params.min_track.max(2) {
            continue;
        }
        let Some(init) = triangulate_stereo(rig, &poses[obs[0].frame], obs[0].x, obs[0].y, obs[0].x_right) else {
            continue;
        };
        let p = refine_point(rig, poses, &obs, init);
        if residuals(rig, poses, &obs, &p).iter().any(|r| !(r.abs() <= params.reproj_tol)) {
            continue;
        }
        out.push(Landmark { id: out.len(), position: [p.x, p.y, p.z], track_length: obs.len(), observations: obs });
    }
    out
}

/// Detects, stereo-matches and tracks landmarks over passive frames with known poses.
pub fn triangulate_and_track(
    frames: &[PassiveFrame],
    rig: &StereoRig,
    params: &LandmarkParams,
) -> Result<Vec<Landmark>> {
    if frames.len() < 2 {
        return Err(LandmarkError::TooFewFrames(frames.len()));
    }
    let k = &rig.intrinsics;
    for (i, f) in frames.iter().enumerate() {
        if f.left.dims() != (k.width, k.height) || f.right.dims() != (k.width, k.height) {
            return Err(LandmarkError::FrameSize(i));
        }
    }
    let per_frame: Vec<Vec<Observation>> = frames
        .par_iter()
        .enumerate()
        .map(|(fi, f)| {
            detect_features(&f.left, params)
                .into_iter()
                .filter_map(|kp| {
                    let xr = match_stereo(&f.left, &f.right, kp.x, kp.y, params)?;
                    Some(Observation { frame: fi, x: kp.x, y: kp.y, x_right: xr })
                })
                .collect()
        })
        .collect();
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose).collect();

    // Track association in frame order.
    let mut tracks: Vec<Vec<Observation>> = Vec::new();
    let mut anchors: Vec<Vector3<f64>> = Vec::new();
    for (fi, obs) in per_frame.iter().enumerate() {
        let mut claimed = vec![false; tracks.len()];
        for o in obs {
            let best = anchors
                .iter()
                .enumerate()
                .filter(|(t, _)| !claimed[*t] && tracks[*t].last().is_some_and(|l| l.frame < fi))
                .filter_map(|(t, p)| {
                    let (u, v) = k.project(&poses[fi].transform(p))?;
                    let dist = ((u - o.x).powi(2) + (v - o.y).powi(2)).sqrt();
                    (dist <= params.gate).then_some((t, dist))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((t, _)) => {
                    claimed[t] = true;
                    tracks[t].push(*o);
                }
                None => {
                    if let Some(p) = triangulate_stereo(rig, &poses[fi], o.x, o.y, o.x_right) {
                        tracks.push(vec![*o]);
                        anchors.push(p);
                        claimed.push(true);
                    }
                }
            }
        }
    }
    Ok(assemble(rig, &poses, tracks, params))
}

fn rasterize_points(points_cam: &[Vector3<f64>], k: &Intrinsics) -> SparseDepthImage {
    let mut image = Image::zeros(k.width, k.height);
    for p in points_cam {
        let Some((u, v)) = k.project(p) else { continue };
        let (x, y) = (u.round(), v.round());
        if x < 0.0 || y < 0.0 || x >= k.width as f64 || y >= k.height as f64 {
            continue;
        }
        let (x, y) = (x as usize, y as usize);
        let cur = image.get(x, y);
        if cur == 0.0 || p.z < cur {
            image.set(x, y, p.z);
        }
    }
    SparseDepthImage::from_image(image)
}

/// Camera-frame depth of each visible landmark at its rounded pixel; the nearest wins.
pub fn rasterize(landmarks: &[Landmark], intrinsics: &Intrinsics, pose_cfw: &Pose) -> SparseDepthImage {
    let points: Vec<Vector3<f64>> = landmarks.iter().map(|l| pose_cfw.transform(&Vector3::from(l.position))).collect();
    rasterize_points(&points, intrinsics)
}
