//! Procedural ray-cast scenes with a projected blob pattern, rendered as interleaved
//! active/passive stereo sequences with ground-truth depth and poses.
//!
//! World and camera frames share the raster convention: `+x` right, `+y` down,
//! `+z` forward. The projector is co-located with the left camera.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::{detect_blobs, DogParams, Polarity};
use crate::geometry::{DepthMap, Pose, StereoRig};
use crate::image::{Image, Mask};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene has no primitives")]
    EmptyScene,
    #[error("images differ in size: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("no pattern blobs detected")]
    NoBlobsDetected,
    #[error("a sequence needs at least 3 poses, got {0}")]
    TooFewPoses(usize),
    #[error("invalid pattern: {0}")]
    InvalidPattern(String),
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
}

pub type Result<T> = std::result::Result<T, SceneError>;

/// Surface texture, evaluated in surface-local meters. Values lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    /// Texture-free: constant 1.
    Blank,
    /// Band-limited value noise darkening the surface by up to `contrast`.
    Noise {
        seed: u64,
        cell_size: f64,
        contrast: f64,
        #[serde(default = "default_octaves")]
        octaves: u32,
    },
    /// Dark round markers on a jittered grid over a blank background.
    Dots {
        seed: u64,
        spacing: f64,
        radius: f64,
        contrast: f64,
    },
    Checker {
        size: f64,
        contrast: f64,
    },
    /// `inner` texture with square cells of side `cell_size` blanked out at random.
    Patchy {
        seed: u64,
        cell_size: f64,
        blank_fraction: f64,
        inner: Box<Texture>,
    },
}

fn default_octaves() -> u32 {
    3
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic lattice hash in `[0, 1)`.
fn hash01(seed: u64, i: i64, j: i64, k: u64) -> f64 {
    let h = splitmix(seed ^ splitmix(i as u64 ^ splitmix(j as u64 ^ splitmix(k))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, s: f64, t: f64, octave: u64) -> f64 {
    let (i, j) = (s.floor(), t.floor());
    let (fs, ft) = (smoothstep(s - i), smoothstep(t - j));
    let (i, j) = (i as i64, j as i64);
    let v00 = hash01(seed, i, j, octave);
    let v10 = hash01(seed, i + 1, j, octave);
    let v01 = hash01(seed, i, j + 1, octave);
    let v11 = hash01(seed, i + 1, j + 1, octave);
    let a = v00 + (v10 - v00) * fs;
    let b = v01 + (v11 - v01) * fs;
    a + (b - a) * ft
}

impl Texture {
    pub fn eval(&self, s: f64, t: f64, seed_offset: u64) -> f64 {
        match self {
            Texture::Blank => 1.0,
            Texture::Noise { seed, cell_size, contrast, octaves } => {
                let seed = seed ^ seed_offset;
                let (mut amp, mut freq, mut sum, mut norm) = (1.0, 1.0 / cell_size, 0.0, 0.0);
                for o in 0..(*octaves).max(1) {
                    sum += amp * value_noise(seed, s * freq, t * freq, o as u64);
                    norm += amp;
                    amp *= 0.5;
                    freq *= 2.0;
                }
                (1.0 - contrast * sum / norm).clamp(0.0, 1.0)
            }
            Texture::Dots { seed, spacing, radius, contrast } => {
                let seed = seed ^ seed_offset;
                let (ci, cj) = ((s / spacing).floor() as i64, (t / spacing).floor() as i64);
                let mut darkest: f64 = 0.0;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (i, j) = (ci + di, cj + dj);
                        let cx = (i as f64 + 0.2 + 0.6 * hash01(seed, i, j, 1)) * spacing;
                        let cy = (j as f64 + 0.2 + 0.6 * hash01(seed, i, j, 2)) * spacing;
                        let r2 = (s - cx).powi(2) + (t - cy).powi(2);
                        darkest = darkest.max((-r2 / (radius * radius)).exp());
                    }
                }
                (1.0 - contrast * darkest).clamp(0.0, 1.0)
            }
            Texture::Checker { size, contrast } => {
                let parity = ((s / size).floor() as i64 + (t / size).floor() as i64).rem_euclid(2);
                if parity == 0 {
                    1.0
                } else {
                    (1.0 - contrast).clamp(0.0, 1.0)
                }
            }
            Texture::Patchy { seed, cell_size, blank_fraction, inner } => {
                let (i, j) = ((s / cell_size).floor() as i64, (t / cell_size).floor() as i64);
                if hash01(seed ^ seed_offset, i, j, 7) < *blank_fraction {
                    1.0
                } else {
                    inner.eval(s, t, seed_offset)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    /// Plane through `center` with unit `normal`; texture axes `u_axis` and
    /// `normal × u_axis`. Unbounded unless `half_extents` is given (meters along the axes).
    Plane {
        center: [f64; 3],
        normal: [f64; 3],
        u_axis: [f64; 3],
        #[serde(default)]
        half_extents: Option<[f64; 2]>,
        albedo: f64,
        texture: Texture,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: f64,
        texture: Texture,
    },
}

/// Ray–scene intersection.
#[derive(Clone, Copy, Debug)]
pub struct Hit {
    /// Ray parameter; equals camera-frame depth when the ray direction has unit camera `z`.
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub albedo: f64,
    pub texture: f64,
    pub primitive: usize,
}

const RAY_EPS: f64 = 1e-9;

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        match self {
            Primitive::Plane { normal, u_axis, albedo, .. } => {
                let n = Vector3::from(*normal);
                let u = Vector3::from(*u_axis);
                if n.norm() < 1e-12 || u.norm() < 1e-12 || n.normalize().dot(&u.normalize()).abs() > 1e-6 {
                    return Err(SceneError::InvalidPrimitive("plane normal and u_axis must be orthogonal".into()));
                }
                check_albedo(*albedo)
            }
            Primitive::Sphere { radius, albedo, .. } => {
                if !(*radius > 0.0) {
                    return Err(SceneError::InvalidPrimitive(format!("sphere radius {radius}")));
                }
                check_albedo(*albedo)
            }
        }
    }

    fn intersect(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        seed_offset: u64,
    ) -> Option<(f64, Vector3<f64>, f64, f64)> {
        match self {
            Primitive::Plane { center, normal, u_axis, half_extents, albedo, texture } => {
                let n = Vector3::from(*normal).normalize();
                let c = Vector3::from(*center);
                let denom = n.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = n.dot(&(c - origin)) / denom;
                if t <= RAY_EPS {
                    return None;
                }
                let p = origin + dir * t;
                let u = Vector3::from(*u_axis).normalize();
                let v = n.cross(&u);
                let (s, tt) = ((p - c).dot(&u), (p - c).dot(&v));
                if let Some([hu, hv]) = half_extents {
                    if s.abs() > *hu || tt.abs() > *hv {
                        return None;
                    }
                }
                Some((t, n, *albedo, texture.eval(s, tt, seed_offset)))
            }
            Primitive::Sphere { center, radius, albedo, texture } => {
                let c = Vector3::from(*center);
                let oc = origin - c;
                let a = dir.dot(dir);
                let b = 2.0 * oc.dot(dir);
                let cc = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * cc;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                let t = if t0 > RAY_EPS {
                    t0
                } else if t1 > RAY_EPS {
                    t1
                } else {
                    return None;
                };
                let p = origin + dir * t;
                let n = (p - c) / *radius;
                let s = n.x.atan2(-n.z) * radius;
                let tt = n.y.clamp(-1.0, 1.0).asin() * radius;
                Some((t, n, *albedo, texture.eval(s, tt, seed_offset)))
            }
        }
    }
}

fn check_albedo(a: f64) -> Result<()> {
    if (0.0..=1.0).contains(&a) {
        Ok(())
    } else {
        Err(SceneError::InvalidPrimitive(format!("albedo {a} outside [0, 1]")))
    }
}

/// Relative blob intensity versus distance, linearly interpolated in a table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityCurve {
    /// Increasing distances in meters.
    pub distances: Vec<f64>,
    /// Relative intensities in `(0, 1]`.
    pub values: Vec<f64>,
}

impl IntensityCurve {
    /// `min(1, (reference / d)²)` tabulated out to 30 m.
    pub fn inverse_square(reference: f64) -> Self {
        let mut distances = Vec::new();
        let mut d = 0.1;
        while d <= 30.0 + 1e-9 {
            distances.push(d);
            d += if d < 2.0 { 0.1 } else { 0.5 };
        }
        let values = distances.iter().map(|&d| (reference / d).powi(2).min(1.0)).collect();
        Self { distances, values }
    }

    /// Constant relative intensity.
    pub fn flat(value: f64) -> Self {
        Self { distances: vec![0.0, 100.0], values: vec![value, value] }
    }

    pub fn eval(&self, d: f64) -> f64 {
        let (ds, vs) = (&self.distances, &self.values);
        if d <= ds[0] {
            return vs[0];
        }
        for i in 1..ds.len() {
            if d <= ds[i] {
                let f = (d - ds[i - 1]) / (ds[i] - ds[i - 1]);
                return vs[i - 1] + f * (vs[i] - vs[i - 1]);
            }
        }
        *vs.last().expect("non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.distances.len() != self.values.len() || self.distances.is_empty() {
            return Err(SceneError::InvalidPattern("intensity table shape".into()));
        }
        if self.distances.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SceneError::InvalidPattern("intensity distances must increase".into()));
        }
        if self.values.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(SceneError::InvalidPattern("intensity values must lie in (0, 1]".into()));
        }
        let peak = self.values.iter().enumerate().fold(0, |best, (i, &v)| if v > self.values[best] { i } else { best });
        if self.values[peak..].windows(2).any(|w| w[1] > w[0]) {
            return Err(SceneError::InvalidPattern("intensity must not increase beyond the reference distance".into()));
        }
        Ok(())
    }
}

/// Projected dot pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobPattern {
    /// Projector-normalized positions in `[0, 1]²`; pixel `x = u · width − 0.5`.
    pub positions: Vec<[f64; 2]>,
    /// Gaussian sigma in pixels at `reference_width`.
    pub blob_sigma: f64,
    pub reference_width: usize,
    pub intensity_curve: IntensityCurve,
    /// Peak intensity added at relative intensity 1.
    pub gain: f64,
}

/// Parameters for a procedurally jittered dot pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternParams {
    pub seed: u64,
    pub columns: usize,
    pub rows: usize,
    /// Fraction of a grid cell each dot may be displaced by.
    pub jitter: f64,
    pub blob_sigma: f64,
    pub gain: f64,
    /// Distance up to which relative intensity stays at 1.
    pub reference_distance: f64,
}

impl Default for PatternParams {
    fn default() -> Self {
        Self { seed: 7, columns: 28, rows: 21, jitter: 0.35, blob_sigma: 1.2, gain: 0.5, reference_distance: 1.0 }
    }
}

impl BlobPattern {
    pub fn generate(params: &PatternParams) -> Self {
        let mut positions = Vec::with_capacity(params.columns * params.rows);
        for j in 0..params.rows {
            for i in 0..params.columns {
                let ju = (hash01(params.seed, i as i64, j as i64, 11) - 0.5) * params.jitter;
                let jv = (hash01(params.seed, i as i64, j as i64, 12) - 0.5) * params.jitter;
                positions
                    .push([(i as f64 + 0.5 + ju) / params.columns as f64, (j as f64 + 0.5 + jv) / params.rows as f64]);
            }
        }
        Self {
            positions,
            blob_sigma: params.blob_sigma,
            reference_width: 160,
            intensity_curve: IntensityCurve::inverse_square(params.reference_distance),
            gain: params.gain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.iter().any(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1])) {
            return Err(SceneError::InvalidPattern("blob outside the projector field of view".into()));
        }
        if !(self.blob_sigma > 0.0) || !(self.gain >= 0.0) {
            return Err(SceneError::InvalidPattern("sigma and gain".into()));
        }
        self.intensity_curve.validate()
    }

    /// Blob sigma in pixels at `width`.
    pub fn sigma_at(&self, width: usize) -> f64 {
        self.blob_sigma * width as f64 / self.reference_width as f64
    }

    /// Peak added intensity for a blob hitting a surface of `albedo` at `distance`.
    ///
    /// Projector light is additive with a floor so that blobs stay visible on dark surfaces.
    pub fn amplitude(&self, distance: f64, albedo: f64) -> f64 {
        let base = self.gain * self.intensity_curve.eval(distance);
        base.max(base * albedo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub ambient_light: f64,
    /// Direction towards the light in world coordinates.
    #[serde(default = "default_light")]
    pub light_direction: [f64; 3],
    /// Sensor quantization; `None` keeps full floating-point intensities.
    #[serde(default = "default_bit_depth")]
    pub bit_depth: Option<u8>,
    #[serde(default)]
    pub pattern: PatternParams,
}

fn default_light() -> [f64; 3] {
    [-0.3, -1.0, -0.6]
}

fn default_bit_depth() -> Option<u8> {
    Some(8)
}

/// Passive render of one stereo pair.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoRender {
    pub left: Image,
    pub right: Image,
    pub depth_left: DepthMap,
    pub depth_right: DepthMap,
}

/// Per-blob record of the active render, for auditing occlusion handling.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobRecord {
    pub left: (f64, f64),
    /// Hit point in the left camera frame.
    pub hit: [f64; 3],
    pub distance: f64,
    pub amplitude: f64,
    /// Reprojected location in the right image, when inside it.
    pub right: Option<(f64, f64)>,
    /// Right-view ground-truth depth along the ray through `right`.
    pub right_depth: Option<f64>,
    pub rendered_right: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveRender {
    pub left: Image,
    pub right: Image,
    pub blobs: Vec<BlobRecord>,
}

/// Relative depth agreement required to render a blob in the right view.
pub const DEPTH_MATCH_TOL: f64 = 0.01;

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(SceneError::EmptyScene);
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    /// Copy with every texture seed mixed with `seed`.
    fn seed_offset(seed: u64) -> u64 {
        if seed == 0 {
            0
        } else {
            splitmix(seed)
        }
    }

    /// Nearest intersection along `origin + t · dir`, `t > 0`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, seed: u64) -> Option<Hit> {
        let offset = Self::seed_offset(seed);
        let mut best: Option<Hit> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            if let Some((t, normal, albedo, texture)) = prim.intersect(origin, dir, offset) {
                if best.map_or(true, |b| t < b.t) {
                    best = Some(Hit { t, point: origin + dir * t, normal, albedo, texture, primitive: i });
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit, dir: &Vector3<f64>) -> f64 {
        let l = Vector3::from(self.light_direction).normalize();
        let n = if hit.normal.dot(dir) > 0.0 { -hit.normal } else { hit.normal };
        let lambert = n.dot(&l).max(0.0);
        let shading = self.ambient_light + (1.0 - self.ambient_light) * lambert;
        (hit.albedo * hit.texture * shading).clamp(0.0, 1.0)
    }

    fn quantize(&self, v: f64) -> f64 {
        match self.bit_depth {
            Some(bits) => {
                let levels = ((1u32 << bits) - 1) as f64;
                (v.clamp(0.0, 1.0) * levels).round() / levels
            }
            None => v.clamp(0.0, 1.0),
        }
    }

    /// Intensity and camera depth seen through pixel `(u, v)` of a camera.
    fn trace_pixel(&self, rig: &StereoRig, cam_cfw: &Pose, u: f64, v: f64, seed: u64) -> Option<(f64, f64, Hit)> {
        let wfc = cam_cfw.inverse();
        let origin = wfc.translation();
        let dir = wfc.rotation() * rig.intrinsics.ray(u, v);
        let hit = self.cast(origin, &dir, seed)?;
        Some((self.shade(&hit, &dir), hit.t, hit))
    }

    /// Ground-truth camera depth along the ray through continuous pixel `(u, v)`.
    pub fn depth_at(&self, rig: &StereoRig, cam_cfw: &Pose, u: f64, v: f64, seed: u64) -> Option<f64> {
        self.trace_pixel(rig, cam_cfw, u, v, seed).map(|(_, z, _)| z)
    }

    fn render_view(&self, rig: &StereoRig, cam_cfw: &Pose, seed: u64) -> (Image, DepthMap) {
        let k = &rig.intrinsics;
        let (w, h) = (k.width, k.height);
        let rows: Vec<Vec<(f64, f64)>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| match self.trace_pixel(rig, cam_cfw, x as f64, y as f64, seed) {
                        Some((i, z, _)) => (self.quantize(i), z),
                        None => (0.0, 0.0),
                    })
                    .collect()
            })
            .collect();
        let intensity = Image::new(w, h, rows.iter().flatten().map(|p| p.0).collect());
        let depth = Image::new(w, h, rows.iter().flatten().map(|p| p.1).collect());
        (intensity, DepthMap::from_image(depth))
    }

    /// Ray-cast passive stereo pair with ground-truth depth for both views.
    pub fn render_passive(&self, rig: &StereoRig, left_cfw: &Pose, seed: u64) -> Result<StereoRender> {
        self.validate()?;
        let (left, depth_left) = self.render_view(rig, left_cfw, seed);
        let (right, depth_right) = self.render_view(rig, &rig.right_pose(left_cfw), seed);
        Ok(StereoRender { left, right, depth_left, depth_right })
    }

    /// Overlays the projected pattern on a passive render of the same pose.
    ///
    /// Each blob is cast from the left camera center. It always lands on the left
    /// image at its own pattern pixel; it appears in the right image only if the
    /// right view's depth along the reprojected ray matches the hit depth within
    /// [`DEPTH_MATCH_TOL`] (relative), which removes blobs occluded in the right view.
    pub fn render_active(
        &self,
        rig: &StereoRig,
        left_cfw: &Pose,
        pattern: &BlobPattern,
        passive: &StereoRender,
        seed: u64,
    ) -> Result<ActiveRender> {
        pattern.validate()?;
        let k = &rig.intrinsics;
        let (w, h) = (k.width, k.height);
        let sigma = pattern.sigma_at(w);
        let right_cfw = rig.right_pose(left_cfw);
        let mut add_left = Image::zeros(w, h);
        let mut add_right = Image::zeros(w, h);
        let mut blobs = Vec::with_capacity(pattern.positions.len());
        for pos in &pattern.positions {
            let (u, v) = (pos[0] * w as f64 - 0.5, pos[1] * h as f64 - 0.5);
            let Some((_, _, hit)) = self.trace_pixel(rig, left_cfw, u, v, seed) else { continue };
            let p_cam = left_cfw.transform(&hit.point);
            let distance = p_cam.norm();
            let amplitude = pattern.amplitude(distance, hit.albedo);
            splat(&mut add_left, u, v, sigma, amplitude);

            let q = rig.right_from_left().transform(&p_cam);
            let right = k.project(&q).filter(|&(ur, vr)| k.contains(ur, vr));
            let right_depth = right.and_then(|(ur, vr)| self.depth_at(rig, &right_cfw, ur, vr, seed));
            let rendered_right = match (right, right_depth) {
                (Some((ur, vr)), Some(zr)) if (zr - q.z).abs() <= DEPTH_MATCH_TOL * q.z => {
                    splat(&mut add_right, ur, vr, sigma, amplitude);
                    true
                }
                _ => false,
            };
            blobs.push(BlobRecord {
                left: (u, v),
                hit: [p_cam.x, p_cam.y, p_cam.z],
                distance,
                amplitude,
                right,
                right_depth,
                rendered_right,
            });
        }
        let compose = |base: &Image, add: &Image| {
            Image::new(w, h, base.data().iter().zip(add.data()).map(|(b, a)| self.quantize(b + a)).collect())
        };
        Ok(ActiveRender { left: compose(&passive.left, &add_left), right: compose(&passive.right, &add_right), blobs })
    }
}

/// Adds a Gaussian truncated at `3 sigma`.
fn splat(img: &mut Image, u: f64, v: f64, sigma: f64, amplitude: f64) {
    let r = 3.0 * sigma;
    let (w, h) = img.dims();
    let x0 = (u - r).ceil().max(0.0) as usize;
    let y0 = (v - r).ceil().max(0.0) as usize;
    let x1 = ((u + r).floor() as isize).min(w as isize - 1);
    let y1 = ((v + r).floor() as isize).min(h as isize - 1);
    if x1 < 0 || y1 < 0 {
        return;
    }
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            let d2 = (x as f64 - u).powi(2) + (y as f64 - v).powi(2);
            if d2 <= r * r {
                let cur = img.get(x, y);
                img.set(x, y, cur + amplitude * (-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
}

/// Blob-center footprint mask of an active render: pixels within `3 sigma` of any
/// blob center (left view, or rendered right-view blobs).
pub fn footprint_mask(render: &ActiveRender, pattern: &BlobPattern, width: usize, height: usize, right: bool) -> Mask {
    let r = 3.0 * pattern.sigma_at(width);
    let mut mask = Mask::filled(width, height, false);
    for b in &render.blobs {
        let center = if right {
            match (b.rendered_right, b.right) {
                (true, Some(c)) => c,
                _ => continue,
            }
        } else {
            b.left
        };
        for y in 0..height {
            for x in 0..width {
                if (x as f64 - center.0).powi(2) + (y as f64 - center.1).powi(2) <= r * r {
                    mask.set(x, y, true);
                }
            }
        }
    }
    mask
}

/// Recovers blob positions from projector-on and projector-off images of a wall.
///
/// Blob centers are DoG (σ = 1.0, 1.6 px) maxima of the on−off difference that survive
/// 5×5 non-maximum suppression and a threshold relative to the strongest response.
pub fn extract_pattern(wall_on: &Image, wall_off: &Image) -> Result<BlobPattern> {
    if wall_on.dims() != wall_off.dims() {
        return Err(SceneError::SizeMismatch(wall_on.dims(), wall_off.dims()));
    }
    let (w, h) = wall_on.dims();
    let diff = Image::new(w, h, wall_on.data().iter().zip(wall_off.data()).map(|(a, b)| a - b).collect());
    let params = DogParams { relative_threshold: 0.25, polarity: Polarity::Bright, ..DogParams::default() };
    let keypoints = detect_blobs(&diff, &params);
    if keypoints.is_empty() {
        return Err(SceneError::NoBlobsDetected);
    }
    let defaults = PatternParams::default();
    Ok(BlobPattern {
        positions: keypoints.iter().map(|k| [(k.x + 0.5) / w as f64, (k.y + 0.5) / h as f64]).collect(),
        blob_sigma: defaults.blob_sigma,
        reference_width: 160,
        intensity_curve: IntensityCurve::inverse_square(defaults.reference_distance),
        gain: defaults.gain,
    })
}

/// One rendered pose of a sequence.
#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub pose: Pose,
    pub passive: StereoRender,
    /// Present on odd indices.
    pub active: Option<ActiveRender>,
}

impl Frame {
    pub fn is_active(&self) -> bool {
        self.active.is_some()
    }

    /// The images a sensor would record at this pose.
    pub fn recorded(&self) -> (&Image, &Image) {
        match &self.active {
            Some(a) => (&a.left, &a.right),
            None => (&self.passive.left, &self.passive.right),
        }
    }
}

/// Passive stereo frame with its pose.
#[derive(Clone, Debug)]
pub struct PassiveFrame {
    pub left: Image,
    pub right: Image,
    pub pose: Pose,
}

/// Interleaved capture unit: active pair at `t`, passive pairs at `t − 1` and `t + 1`.
#[derive(Clone, Debug)]
pub struct FrameTriplet {
    pub prev: PassiveFrame,
    pub next: PassiveFrame,
    pub active_left: Image,
    pub active_right: Image,
    pub pose: Pose,
    pub gt_depth: DepthMap,
    pub gt_depth_right: DepthMap,
    /// Pattern-free render at `t`, kept for analysis.
    pub passive_left: Image,
    pub passive_right: Image,
    pub blobs: Vec<BlobRecord>,
    pub center_index: usize,
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub frames: Vec<Frame>,
}

impl Sequence {
    /// Triplets centered on every active frame with passive neighbors on both sides.
    pub fn triplets(&self) -> Vec<FrameTriplet> {
        (1..self.frames.len().saturating_sub(1))
            .filter(|&i| self.frames[i].is_active())
            .map(|i| self.triplet(i))
            .collect()
    }

    fn triplet(&self, i: usize) -> FrameTriplet {
        let (p, c, n) = (&self.frames[i - 1], &self.frames[i], &self.frames[i + 1]);
        let active = c.active.as_ref().expect("active center frame");
        let passive =
            |f: &Frame| PassiveFrame { left: f.passive.left.clone(), right: f.passive.right.clone(), pose: f.pose };
        FrameTriplet {
            prev: passive(p),
            next: passive(n),
            active_left: active.left.clone(),
            active_right: active.right.clone(),
            pose: c.pose,
            gt_depth: c.passive.depth_left.clone(),
            gt_depth_right: c.passive.depth_right.clone(),
            passive_left: c.passive.left.clone(),
            passive_right: c.passive.right.clone(),
            blobs: active.blobs.clone(),
            center_index: i,
        }
    }

    /// Passive frames in order, for landmark tracking.
    pub fn passive_frames(&self) -> Vec<PassiveFrame> {
        self.frames
            .iter()
            .filter(|f| !f.is_active())
            .map(|f| PassiveFrame { left: f.passive.left.clone(), right: f.passive.right.clone(), pose: f.pose })
            .collect()
    }
}

/// Renders an interleaved sequence: odd pose indices are active, even ones passive.
/// `seed` perturbs texture noise only.
pub fn generate_sequence(
    scene: &Scene,
    rig: &StereoRig,
    trajectory: &[Pose],
    pattern: &BlobPattern,
    seed: u64,
) -> Result<Sequence> {
    if trajectory.len() < 3 {
        return Err(SceneError::TooFewPoses(trajectory.len()));
    }
    scene.validate()?;
    pattern.validate()?;
    let frames = trajectory
        .iter()
        .enumerate()
        .map(|(index, pose)| {
            let passive = scene.render_passive(rig, pose, seed)?;
            let active =
                if index % 2 == 1 { Some(scene.render_active(rig, pose, pattern, &passive, seed)?) } else { None };
            Ok(Frame { index, pose: *pose, passive, active })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence { frames })
}

/// Camera-from-world poses for a camera sliding along `+x` (and optionally `+z`),
/// centered on the middle pose.
pub fn sliding_trajectory(count: usize, lateral_step: f64, forward_step: f64) -> Vec<Pose> {
    let mid = (count as f64 - 1.0) / 2.0;
    (0..count)
        .map(|i| {
            let k = i as f64 - mid;
            Pose::from_translation(-k * lateral_step, 0.0, -k * forward_step)
        })
        .collect()
}

fn plane(
    center: [f64; 3],
    normal: [f64; 3],
    u_axis: [f64; 3],
    half: Option<[f64; 2]>,
    albedo: f64,
    texture: Texture,
) -> Primitive {
    Primitive::Plane { center, normal, u_axis, half_extents: half, albedo, texture }
}

fn noise(seed: u64, cell_size: f64, contrast: f64) -> Texture {
    Texture::Noise { seed, cell_size, contrast, octaves: 3 }
}

/// Named scenes shipped with the toolkit.
pub mod presets {
    use super::*;

    pub const NAMES: [&str; 5] = ["blank-wall", "textured-plane", "occluder", "occluded-floor", "pattern-wall"];

    pub fn by_name(name: &str) -> Option<Scene> {
        match name {
            "blank-wall" => Some(blank_wall(2.0)),
            "textured-plane" => Some(textured_plane(3.125)),
            "occluder" => Some(occluder()),
            "occluded-floor" => Some(occluded_floor()),
            "pattern-wall" => Some(pattern_wall()),
            _ => None,
        }
    }

    fn base(primitives: Vec<Primitive>) -> Scene {
        Scene {
            primitives,
            ambient_light: 0.35,
            light_direction: default_light(),
            bit_depth: default_bit_depth(),
            pattern: PatternParams::default(),
        }
    }

    /// Texture-free fronto-parallel wall.
    pub fn blank_wall(z: f64) -> Scene {
        base(vec![plane([0.0, 0.0, z], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], None, 0.6, Texture::Blank)])
    }

    /// Fronto-parallel wall with band-limited noise texture.
    pub fn textured_plane(z: f64) -> Scene {
        base(vec![plane([0.0, 0.0, z], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], None, 0.9, noise(3, 0.06 * z, 0.8))])
    }

    /// White wall used to record the projector pattern.
    pub fn pattern_wall() -> Scene {
        let mut s = blank_wall(1.0);
        s.ambient_light = 1.0;
        if let Primitive::Plane { albedo, .. } = &mut s.primitives[0] {
            *albedo = 0.5;
        }
        s
    }

    /// Blank wall at 3 m behind a full-height textured panel at 1 m near the image center.
    /// The wall strip left of the panel is hidden from the right camera. The panel is
    /// shifted 1.25 px so its edges fall between pixel centers in every frame of the default sequence.
    pub fn occluder() -> Scene {
        base(vec![
            plane([0.0, 0.0, 3.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], None, 0.6, Texture::Blank),
            plane([0.0125, 0.0, 1.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], Some([0.3, 2.0]), 0.7, noise(5, 0.05, 0.7)),
        ])
    }

    /// Benchmark room: a textured far wall, a dotted floor, a near box whose left side
    /// hides a strip of floor from the right camera, and a textured sphere.
    pub fn occluded_floor() -> Scene {
        base(vec![
            // Far wall.
            plane([0.0, 0.0, 8.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], None, 0.8, noise(11, 0.25, 0.7)),
            // Floor 1 m below the camera.
            plane(
                [0.0, 1.0, 4.0],
                [0.0, -1.0, 0.0],
                [1.0, 0.0, 0.0],
                Some([20.0, 4.0]),
                0.7,
                Texture::Dots { seed: 13, spacing: 0.35, radius: 0.05, contrast: 0.7 },
            ),
            // Box on the floor: front face and left face.
            plane([0.3, 0.65, 1.1], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], Some([0.25, 0.35]), 0.8, noise(17, 0.05, 0.7)),
            plane([0.05, 0.65, 1.35], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], Some([0.25, 0.35]), 0.6, noise(19, 0.05, 0.7)),
            // Sphere resting on the floor.
            Primitive::Sphere { center: [-0.7, 0.6, 2.6], radius: 0.4, albedo: 0.8, texture: noise(23, 0.08, 0.7) },
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;

    fn small_rig() -> StereoRig {
        StereoRig::new(Intrinsics::new(50.0, 50.0, 39.5, 29.5, 80, 60).unwrap(), 0.1).unwrap()
    }

    #[test]
    fn fronto_parallel_plane_depth_is_constant() {
        let scene = presets::textured_plane(2.0);
        let r = scene.render_passive(&small_rig(), &Pose::identity(), 0).unwrap();
        assert!(r.depth_left.valid.data().iter().all(|&v| v));
        assert!(r.depth_left.image.data().iter().all(|&z| (z - 2.0).abs() < 1e-9));
        assert_eq!(r.depth_left.image, r.depth_right.image);
    }

    #[test]
    fn sphere_min_depth_is_center_minus_radius() {
        let mut scene = presets::blank_wall(5.0);
        scene.primitives.push(Primitive::Sphere {
            center: [0.0, 0.0, 2.0],
            radius: 0.5,
            albedo: 0.5,
            texture: Texture::Blank,
        });
        let k = Intrinsics::new(50.0, 50.0, 40.0, 30.0, 81, 61).unwrap();
        let rig = StereoRig::new(k, 0.1).unwrap();
        let r = scene.render_passive(&rig, &Pose::identity(), 0).unwrap();
        let min = r.depth_left.image.min_value();
        assert!((min - 1.5).abs() < 1e-9, "min depth {min}");
        // Discontinuity at the silhouette: both sphere and wall depths are present.
        assert!(r.depth_left.image.data().iter().any(|&z| (z - 5.0).abs() < 1e-9));
    }

    #[test]
    fn empty_scene_is_rejected() {
        let mut scene = presets::blank_wall(2.0);
        scene.primitives.clear();
        assert!(matches!(scene.render_passive(&small_rig(), &Pose::identity(), 0), Err(SceneError::EmptyScene)));
    }

    #[test]
    fn miss_gives_zero_intensity_and_invalid_depth() {
        let scene = base_panel();
        let r = scene.render_passive(&small_rig(), &Pose::identity(), 0).unwrap();
        assert_eq!(r.left.get(0, 0), 0.0);
        assert!(!r.depth_left.valid.get(0, 0));
    }

    fn base_panel() -> Scene {
        let mut s = presets::blank_wall(2.0);
        if let Primitive::Plane { half_extents, .. } = &mut s.primitives[0] {
            *half_extents = Some([0.2, 0.2]);
        }
        s
    }

    #[test]
    fn blob_on_dark_surface_keeps_full_intensity() {
        let mut scene = presets::blank_wall(2.0);
        scene.bit_depth = None;
        if let Primitive::Plane { albedo, .. } = &mut scene.primitives[0] {
            *albedo = 0.0;
        }
        let pattern = BlobPattern {
            positions: vec![[0.5, 0.5]],
            blob_sigma: 1.2,
            reference_width: 80,
            intensity_curve: IntensityCurve::flat(1.0),
            gain: 0.6,
        };
        let rig = small_rig();
        let passive = scene.render_passive(&rig, &Pose::identity(), 0).unwrap();
        let active = scene.render_active(&rig, &Pose::identity(), &pattern, &passive, 0).unwrap();
        // Blob center at pixel (39.5, 29.5); the peak pixel sits 0.5 px off in x and y.
        let expected = 0.6 * (-0.5f64 / (2.0 * 1.44)).exp();
        assert!((active.left.get(39, 29) - expected).abs() < 1e-12);
        assert!(active.blobs[0].rendered_right);
    }

    #[test]
    fn unoccluded_blob_shifts_by_disparity() {
        let scene = presets::blank_wall(2.0);
        let rig = small_rig();
        let pattern = BlobPattern { positions: vec![[0.5, 0.5]], ..BlobPattern::generate(&PatternParams::default()) };
        let passive = scene.render_passive(&rig, &Pose::identity(), 0).unwrap();
        let active = scene.render_active(&rig, &Pose::identity(), &pattern, &passive, 0).unwrap();
        let b = &active.blobs[0];
        let (ur, vr) = b.right.unwrap();
        assert!((b.left.0 - ur - 50.0 * 0.1 / 2.0).abs() < 1e-9);
        assert_eq!(vr, b.left.1);
        assert!(b.rendered_right);
    }

    #[test]
    fn curve_interpolates_and_validates() {
        let c = IntensityCurve::inverse_square(1.0);
        c.validate().unwrap();
        assert_eq!(c.eval(0.5), 1.0);
        assert!((c.eval(2.0) - 0.25).abs() < 1e-12);
        let bad = IntensityCurve { distances: vec![1.0, 2.0, 3.0], values: vec![0.9, 0.5, 0.7] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn too_few_poses() {
        let scene = presets::blank_wall(2.0);
        let pattern = BlobPattern::generate(&PatternParams::default());
        let poses = sliding_trajectory(2, 0.1, 0.0);
        assert!(matches!(
            generate_sequence(&scene, &small_rig(), &poses, &pattern, 0),
            Err(SceneError::TooFewPoses(2))
        ));
    }

    #[test]
    fn scene_json_round_trip() {
        let scene = presets::occluded_floor();
        let json = serde_json::to_string_pretty(&scene).unwrap();
        let back: Scene = serde_json::from_str(&json).unwrap();
        assert_eq!(scene, back);
    }
}
