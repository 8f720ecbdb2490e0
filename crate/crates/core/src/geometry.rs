//! Rectified pinhole stereo geometry: intrinsics, rigid poses, projection and warping.
//!
//! Pixel centers sit at integer coordinates, origin top-left, `+x` right, `+y` down.
//! Camera frames look along `+z`. Poses are stored camera-from-world.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Tensor, Var};
use crate::image::{Image, Mask};

/// Smallest normalized disparity bound, `1 / 20 m`.
pub const DISPARITY_MIN: f64 = 1.0 / 20.0;
/// Largest normalized disparity bound, `1 / 0.3 m`.
pub const DISPARITY_MAX: f64 = 1.0 / 0.3;

/// Camera-frame depth below which a point counts as behind the camera.
pub const MIN_VISIBLE_DEPTH: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with det +1 (error {0:e})")]
    InvalidRotation(f64),
    #[error("baseline must be positive, got {0}")]
    InvalidBaseline(f64),
    #[error("disparity is zero at valid pixel ({x}, {y})")]
    ZeroDisparity { x: usize, y: usize },
    #[error("depth is not positive at valid pixel ({x}, {y})")]
    NonPositiveDepth { x: usize, y: usize },
    #[error("normalized disparity {0} outside [0, 1]")]
    NormalizedDisparityOutOfRange(f64),
    #[error("map size mismatch")]
    SizeMismatch,
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!("focal lengths {} {}", self.fx, self.fy)));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics matching a 2×2 average-pooled image.
    ///
    /// Output pixel `i` averages inputs `2i` and `2i+1`, so its center sits at input
    /// coordinate `2i + 0.5`.
    pub fn pooled(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx / 2.0,
            fy: self.fy / 2.0,
            cx: (self.cx - 0.5) / 2.0,
            cy: (self.cy - 0.5) / 2.0,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    /// Intrinsics for the same field of view at another resolution.
    pub fn rescaled(&self, width: usize, height: usize) -> Intrinsics {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    /// Camera-frame ray with unit `z` through pixel `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point; `None` when behind the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        (p.z > MIN_VISIBLE_DEPTH).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// Rigid transform `p' = R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = (rotation.determinant() - 1.0).abs();
        let err = orth.max(det);
        if !(err <= 1e-9) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRotation(err));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::new(x, y, z) }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: *q.to_rotation_matrix().matrix(), translation }
    }

    /// Rotation about the camera `y` axis (yaw) followed by a translation.
    pub fn from_yaw_translation(yaw: f64, translation: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw);
        Self::from_quaternion(q, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Given camera-from-world poses of a target and a source view, the transform
    /// taking target-camera points into the source camera.
    pub fn target_to_source(target_cfw: &Pose, source_cfw: &Pose) -> Pose {
        source_cfw.compose(&target_cfw.inverse())
    }

    /// Camera center in the frame this pose maps from.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Rectified stereo pair sharing one set of intrinsics; the projector sits at the left camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub intrinsics: Intrinsics,
    /// Meters; the right camera sits at `+baseline` along the left camera's `x`.
    pub baseline: f64,
}

impl StereoRig {
    pub fn new(intrinsics: Intrinsics, baseline: f64) -> Result<Self> {
        intrinsics.validate()?;
        if !(baseline > 0.0) {
            return Err(GeometryError::InvalidBaseline(baseline));
        }
        Ok(Self { intrinsics, baseline })
    }

    /// Desk-scale default: 160×120, 100 px focal length, 25 cm baseline.
    pub fn desk_default() -> Self {
        Self::new(Intrinsics::new(100.0, 100.0, 79.5, 59.5, 160, 120).expect("valid"), 0.25).expect("valid")
    }

    /// Transform taking left-camera points into the right camera.
    pub fn right_from_left(&self) -> Pose {
        Pose::from_translation(-self.baseline, 0.0, 0.0)
    }

    /// Camera-from-world of the right camera given that of the left.
    pub fn right_pose(&self, left_cfw: &Pose) -> Pose {
        self.right_from_left().compose(left_cfw)
    }

    pub fn pooled(&self) -> StereoRig {
        StereoRig { intrinsics: self.intrinsics.pooled(), baseline: self.baseline }
    }

    pub fn rescaled(&self, width: usize, height: usize) -> StereoRig {
        StereoRig { intrinsics: self.intrinsics.rescaled(width, height), baseline: self.baseline }
    }

    /// `fx · b`, the depth–disparity product.
    pub fn focal_baseline(&self) -> f64 {
        self.intrinsics.fx * self.baseline
    }
}

/// Metric depth raster; invalid pixels hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub image: Image,
    pub valid: Mask,
}

/// Disparity raster in pixels; invalid pixels hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub image: Image,
    pub valid: Mask,
}

macro_rules! valued_map {
    ($name:ident) => {
        impl $name {
            /// Validity taken from `value > 0` and finite.
            pub fn from_image(image: Image) -> Self {
                let (w, h) = image.dims();
                let valid = Mask::new(w, h, image.data().iter().map(|&v| v > 0.0 && v.is_finite()).collect());
                let image = Image::new(
                    w,
                    h,
                    image.data().iter().zip(valid.data()).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect(),
                );
                Self { image, valid }
            }

            /// Explicit validity; invalid pixels are reset to the 0 sentinel.
            pub fn with_mask(image: Image, valid: Mask) -> Self {
                assert_eq!(image.dims(), (valid.width(), valid.height()));
                let (w, h) = image.dims();
                let image = Image::new(
                    w,
                    h,
                    image.data().iter().zip(valid.data()).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect(),
                );
                Self { image, valid }
            }

            pub fn empty(width: usize, height: usize) -> Self {
                Self { image: Image::zeros(width, height), valid: Mask::filled(width, height, false) }
            }

            pub fn width(&self) -> usize {
                self.image.width()
            }

            pub fn height(&self) -> usize {
                self.image.height()
            }

            pub fn valid_fraction(&self) -> f64 {
                self.valid.fraction()
            }
        }
    };
}

valued_map!(DepthMap);
valued_map!(DisparityMap);

/// `depth = fx · b / disparity` on valid pixels.
pub fn disparity_to_depth(rig: &StereoRig, disp: &DisparityMap) -> Result<DepthMap> {
    let fb = rig.focal_baseline();
    let (w, h) = disp.image.dims();
    let mut out = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            if disp.valid.get(x, y) {
                let d = disp.image.get(x, y);
                if d == 0.0 {
                    return Err(GeometryError::ZeroDisparity { x, y });
                }
                out.set(x, y, fb / d);
            }
        }
    }
    Ok(DepthMap::with_mask(out, disp.valid.clone()))
}

/// `disparity = fx · b / depth` on valid pixels.
pub fn depth_to_disparity(rig: &StereoRig, depth: &DepthMap) -> Result<DisparityMap> {
    let fb = rig.focal_baseline();
    let (w, h) = depth.image.dims();
    let mut out = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            if depth.valid.get(x, y) {
                let z = depth.image.get(x, y);
                if !(z > 0.0) {
                    return Err(GeometryError::NonPositiveDepth { x, y });
                }
                out.set(x, y, fb / z);
            }
        }
    }
    Ok(DisparityMap::with_mask(out, depth.valid.clone()))
}

/// Metric depth from the sigmoid-style normalized disparity in `[0, 1]`.
pub fn normalized_disparity_to_depth(d_hat: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&d_hat) {
        return Err(GeometryError::NormalizedDisparityOutOfRange(d_hat));
    }
    Ok(1.0 / (DISPARITY_MIN + (DISPARITY_MAX - DISPARITY_MIN) * d_hat))
}

/// Inverse of [`normalized_disparity_to_depth`], clamped to `[0, 1]`.
pub fn depth_to_normalized_disparity(depth: f64) -> f64 {
    ((1.0 / depth - DISPARITY_MIN) / (DISPARITY_MAX - DISPARITY_MIN)).clamp(0.0, 1.0)
}

/// Per-pixel source coordinates produced by [`project`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedCoords {
    pub u: Image,
    pub v: Image,
    pub visible: Mask,
}

/// Maps every valid target pixel into the source view.
///
/// Visibility is false for invalid depth, points behind the source camera, or
/// coordinates outside the source image.
pub fn project(intrinsics: &Intrinsics, depth: &DepthMap, target_to_source: &Pose) -> ProjectedCoords {
    let (w, h) = depth.image.dims();
    let mut u = Image::zeros(w, h);
    let mut v = Image::zeros(w, h);
    let mut visible = Mask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if !depth.valid.get(x, y) {
                continue;
            }
            let p = intrinsics.ray(x as f64, y as f64) * depth.image.get(x, y);
            let q = target_to_source.transform(&p);
            if let Some((us, vs)) = intrinsics.project(&q) {
                u.set(x, y, us);
                v.set(x, y, vs);
                visible.set(x, y, intrinsics.contains(us, vs));
            }
        }
    }
    ProjectedCoords { u, v, visible }
}

/// Bilinear warp of `source` to the projected coordinates.
pub fn warp(source: &Image, coords: &ProjectedCoords) -> (Image, Mask) {
    let (w, h) = coords.u.dims();
    let mut out = Image::zeros(w, h);
    let mut valid = Mask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if !coords.visible.get(x, y) {
                continue;
            }
            if let Some(s) = source.sample_bilinear(coords.u.get(x, y), coords.v.get(x, y)) {
                out.set(x, y, s);
                valid.set(x, y, true);
            }
        }
    }
    (out, valid)
}

/// Taped projection of a `[h, w]` depth var; returns `(u, v, in-front mask)`.
///
/// Source-frame coordinates are affine in depth, `q = depth · (R r) + t`, so only
/// the perspective division is nonlinear. Pixels with `q.z <= MIN_VISIBLE_DEPTH`
/// get coordinate 0 and are flagged invisible.
pub fn project_var<'t>(
    intrinsics: &Intrinsics,
    depth: Var<'t>,
    target_to_source: &Pose,
) -> Result<(Var<'t>, Var<'t>, Vec<bool>)> {
    let shape = depth.shape();
    let (h, w) = match shape[..] {
        [h, w] => (h, w),
        _ => return Err(GeometryError::SizeMismatch),
    };
    let r = target_to_source.rotation();
    let t = target_to_source.translation();
    let n = h * w;
    let (mut ax, mut ay, mut az) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for y in 0..h {
        for x in 0..w {
            let rr = r * intrinsics.ray(x as f64, y as f64);
            ax.push(rr.x);
            ay.push(rr.y);
            az.push(rr.z);
        }
    }
    let tensor = |d: Vec<f64>| Tensor::new(vec![h, w], d).expect("shape");
    let qx = depth.mul_const(tensor(ax))?.add_scalar(t.x)?;
    let qy = depth.mul_const(tensor(ay))?.add_scalar(t.y)?;
    let qz = depth.mul_const(tensor(az))?.add_scalar(t.z)?;
    let front: Vec<bool> = qz.value().data().iter().map(|&z| z > MIN_VISIBLE_DEPTH).collect();
    let u = qx.div_safe(qz)?.mul_scalar(intrinsics.fx)?.add_scalar(intrinsics.cx)?;
    let v = qy.div_safe(qz)?.mul_scalar(intrinsics.fy)?.add_scalar(intrinsics.cy)?;
    Ok((u, v, front))
}

/// Taped warp: samples `source` at the projection of `depth`.
pub fn warp_var<'t>(
    intrinsics: &Intrinsics,
    source: Var<'t>,
    depth: Var<'t>,
    target_to_source: &Pose,
) -> Result<(Var<'t>, Mask)> {
    let (u, v, front) = project_var(intrinsics, depth, target_to_source)?;
    let (out, valid) = source.sample(u, v, Some(&front))?;
    let shape = out.shape();
    Ok((out, Mask::new(shape[1], shape[0], valid)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn k() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 4.0, 3.0, 8, 6).unwrap()
    }

    #[test]
    fn identity_pose_fixes_principal_point() {
        let k = Intrinsics::new(100.0, 100.0, 4.0, 3.0, 9, 7).unwrap();
        let depth = DepthMap::from_image(Image::filled(9, 7, 2.7));
        let c = project(&k, &depth, &Pose::identity());
        assert_eq!((c.u.get(4, 3), c.v.get(4, 3)), (4.0, 3.0));
    }

    #[test]
    fn rectified_shift() {
        let rig = StereoRig::new(k(), 0.1).unwrap();
        let depth = DepthMap::from_image(Image::filled(8, 6, 2.0));
        let c = project(&k(), &depth, &rig.right_from_left());
        assert!((c.u.get(6, 2) - (6.0 - 5.0)).abs() < 1e-12);
        assert_eq!(c.v.get(6, 2), 2.0);
    }

    #[test]
    fn behind_camera_is_invisible() {
        let depth = DepthMap::from_image(Image::filled(8, 6, 1.0));
        // Moving the camera 2 m forward puts the point 1 m behind it.
        let c = project(&k(), &depth, &Pose::from_translation(0.0, 0.0, -2.0));
        assert!(!c.visible.get(4, 3));
    }

    #[test]
    fn disparity_depth_round_trip() {
        let rig = StereoRig::new(k(), 0.1).unwrap();
        let mut img = Image::filled(8, 6, 5.0);
        img.set(0, 0, 0.0);
        let disp = DisparityMap::from_image(img);
        let depth = disparity_to_depth(&rig, &disp).unwrap();
        assert_eq!(depth.image.get(1, 1), 2.0);
        assert!(!depth.valid.get(0, 0));
        let back = depth_to_disparity(&rig, &depth).unwrap();
        for (a, b) in back.image.data().iter().zip(disp.image.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_disparity_on_valid_pixel_errors() {
        let rig = StereoRig::new(k(), 0.1).unwrap();
        let disp = DisparityMap { image: Image::zeros(8, 6), valid: Mask::filled(8, 6, true) };
        assert!(matches!(disparity_to_depth(&rig, &disp), Err(GeometryError::ZeroDisparity { .. })));
    }

    #[test]
    fn normalized_disparity_endpoints() {
        assert!((normalized_disparity_to_depth(0.0).unwrap() - 20.0).abs() < 1e-12);
        assert!((normalized_disparity_to_depth(1.0).unwrap() - 0.3).abs() < 1e-12);
        let mid = 1.0 / (0.05 + 0.5 * (1.0 / 0.3 - 1.0 / 20.0));
        assert!((normalized_disparity_to_depth(0.5).unwrap() - mid).abs() < 1e-12);
        assert!((mid - 0.591_133).abs() < 1e-6);
        assert!(normalized_disparity_to_depth(1.01).is_err());
        assert!(normalized_disparity_to_depth(-0.01).is_err());
    }

    #[test]
    fn invalid_intrinsics_and_rotation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0;
        assert!(Pose::new(r, Vector3::zeros()).is_err());
        assert!(StereoRig::new(k(), 0.0).is_err());
    }

    #[test]
    fn pooled_intrinsics_track_pixel_centers() {
        // A point projecting to input pixel center 2i + 0.5 lands on output pixel i.
        let k = Intrinsics::new(100.0, 100.0, 79.5, 59.5, 160, 120).unwrap();
        let kp = k.pooled();
        let p = Vector3::new(0.3, -0.2, 2.0);
        let (u, v) = k.project(&p).unwrap();
        let (up, vp) = kp.project(&p).unwrap();
        assert!((up - (u - 0.5) / 2.0).abs() < 1e-12);
        assert!((vp - (v - 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn taped_projection_matches_plain() {
        let k = k();
        let pose = Pose::from_yaw_translation(0.05, Vector3::new(0.1, -0.02, 0.05));
        let depth = DepthMap::from_image(Image::from_fn(8, 6, |x, y| 1.5 + 0.1 * x as f64 + 0.05 * y as f64));
        let plain = project(&k, &depth, &pose);
        let tape = Tape::new();
        let d = tape.var(depth.image.to_tensor());
        let (u, v, _) = project_var(&k, d, &pose).unwrap();
        for (a, b) in u.value().data().iter().zip(plain.u.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in v.value().data().iter().zip(plain.v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
