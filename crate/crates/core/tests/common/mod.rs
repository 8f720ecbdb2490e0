//! Shared helpers: finite-difference gradient checks and small random scenes.

#![allow(dead_code)]

use activestereo::autodiff::{Tape, Tensor, Var};
use activestereo::geometry::{DepthMap, StereoRig};
use activestereo::image::{Image, Mask};
use activestereo::landmarks::SparseDepthImage;
use activestereo::scene_sim::{generate_sequence, BlobPattern, FrameTriplet, PatternParams, Primitive, Scene, Texture};
use activestereo::Pose;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

/// Absolute slack below which gradient entries count as equal; far above
/// the `eps / h` round-off of the difference quotient.
pub const FD_ATOL: f64 = 1e-9;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Five-point central difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut at = |d: f64| {
        p[i] = x[i] + d;
        f(&p)
    };
    let (m2, m1, p1, p2) = (at(-2.0 * h), at(-h), at(h), at(2.0 * h));
    (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d <= FD_ATOL {
        return 0.0;
    }
    d / a.abs().max(b.abs())
}

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates within a few steps of a kink or a mask switch.
    pub excluded: usize,
    pub max_rel: f64,
    pub worst: Option<(usize, f64, f64)>,
}

impl GradReport {
    pub fn merge(&mut self, other: &GradReport) {
        self.checked += other.checked;
        self.excluded += other.excluded;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel <= tol && self.excluded * 10 <= self.checked + self.excluded
    }
}

/// Compares an analytic gradient with five-point differences at step `FD_STEP`.
///
/// A coordinate whose difference quotient changes when the step shrinks tenfold sits
/// near a non-differentiable point and is excluded instead of compared.
pub fn compare_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], coords: &[usize], tol: f64) -> GradReport {
    let mut report = GradReport::default();
    for &i in coords {
        let fd = central_difference(f, x, i, FD_STEP);
        let mut err = rel_err(grad[i], fd);
        if err > tol {
            let fine = central_difference(f, x, i, FD_STEP / 10.0);
            if rel_err(fd, fine) > tol {
                report.excluded += 1;
                continue;
            }
            err = rel_err(grad[i], fine);
        }
        report.checked += 1;
        if err > report.max_rel {
            report.max_rel = err;
            report.worst = Some((i, grad[i], fd));
        }
    }
    report
}

/// Checks `f` over leaves of the given shapes at `values` (concatenated).
pub fn check_vars<F>(f: F, shapes: &[Vec<usize>], values: &[f64], coords: Option<&[usize]>, tol: f64) -> GradReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let leaves = |x: &[f64]| -> Vec<Tensor> {
        let mut off = 0;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                off += n;
                Tensor::new(s.clone(), x[off - n..off].to_vec()).unwrap()
            })
            .collect()
    };
    let value = |x: &[f64]| {
        let tape = Tape::new();
        let vars: Vec<Var> = leaves(x).into_iter().map(|t| tape.var(t)).collect();
        f(&tape, &vars).item()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = leaves(values).into_iter().map(|t| tape.var(t)).collect();
    let grads = f(&tape, &vars).backward().unwrap();
    let grad: Vec<f64> = vars.iter().flat_map(|v| grads.wrt(*v).into_data()).collect();
    let all: Vec<usize> = (0..values.len()).collect();
    compare_gradient(&value, values, &grad, coords.unwrap_or(&all), tol)
}

/// Single-leaf convenience wrapper; checks `coords` (all pixels when `None`).
pub fn check_image<F>(f: F, x: &Image, coords: Option<&[usize]>, tol: f64) -> GradReport
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    check_vars(|tape, v| f(tape, v[0]), &[vec![x.height(), x.width()]], x.data(), coords, tol)
}

/// A 16×12 desk rig.
pub fn tiny_rig() -> StereoRig {
    StereoRig::desk_default().rescaled(16, 12)
}

/// Random triplet on a 16×12 rig: a tilted textured plane, optionally with a
/// sphere in front, seen from three poses of a short random slide.
pub struct TinyCase {
    pub rig: StereoRig,
    pub triplet: FrameTriplet,
    pub d_sd: DepthMap,
    pub sparse: SparseDepthImage,
}

pub fn random_scene(r: &mut ChaCha8Rng) -> Scene {
    let z = r.gen_range(1.5..3.0);
    let tilt_x: f64 = r.gen_range(-0.3..0.3);
    let tilt_y: f64 = r.gen_range(-0.3..0.3);
    let n = nalgebra::Vector3::new(tilt_x, tilt_y, -1.0).normalize();
    let u = (nalgebra::Vector3::x() - n * n.x).normalize();
    let mut primitives = vec![Primitive::Plane {
        center: [0.0, 0.0, z],
        normal: [n.x, n.y, n.z],
        u_axis: [u.x, u.y, u.z],
        half_extents: None,
        albedo: r.gen_range(0.5..0.9),
        texture: Texture::Noise { seed: r.gen(), cell_size: 0.3 * z, contrast: 0.7, octaves: 2 },
    }];
    if r.gen_bool(0.5) {
        primitives.push(Primitive::Sphere {
            center: [r.gen_range(-0.3..0.3), r.gen_range(-0.2..0.2), z * r.gen_range(0.45..0.7)],
            radius: r.gen_range(0.15..0.3),
            albedo: r.gen_range(0.5..0.9),
            texture: Texture::Noise { seed: r.gen(), cell_size: 0.2, contrast: 0.6, octaves: 2 },
        });
    }
    Scene {
        primitives,
        ambient_light: 0.4,
        light_direction: [-0.3, -1.0, -0.6],
        bit_depth: None,
        pattern: PatternParams { seed: r.gen(), columns: 6, rows: 5, blob_sigma: 12.0, ..PatternParams::default() },
    }
}

pub fn random_case(seed: u64) -> TinyCase {
    let mut r = rng(seed);
    let scene = random_scene(&mut r);
    let rig = tiny_rig();
    let step = r.gen_range(0.04..0.12);
    let forward = r.gen_range(-0.05..0.05);
    let yaw = r.gen_range(-0.02..0.02);
    let trajectory = vec![
        Pose::from_yaw_translation(-yaw, nalgebra::Vector3::new(step, 0.0, forward)),
        Pose::identity(),
        Pose::from_yaw_translation(yaw, nalgebra::Vector3::new(-step, 0.0, -forward)),
    ];
    let pattern = BlobPattern::generate(&scene.pattern);
    let seq = generate_sequence(&scene, &rig, &trajectory, &pattern, 0).unwrap();
    let triplet = seq.triplets().remove(0);
    let gt = &triplet.gt_depth;
    let (w, h) = (gt.width(), gt.height());
    let holes = Mask::from_fn(w, h, |_, _| r.gen_bool(0.7));
    let d_sd = DepthMap::with_mask(gt.image.clone(), holes.and(&gt.valid));
    let mut sparse = Image::zeros(w, h);
    for _ in 0..8 {
        let (x, y) = (r.gen_range(0..w), r.gen_range(0..h));
        if gt.valid.get(x, y) {
            sparse.set(x, y, gt.image.get(x, y) * r.gen_range(0.95..1.05));
        }
    }
    TinyCase { rig, triplet, d_sd, sparse: SparseDepthImage::from_image(sparse) }
}

/// Depth candidate: ground truth scaled by a random per-pixel factor in `1 ± spread`.
pub fn perturbed(gt: &Image, spread: f64, r: &mut ChaCha8Rng) -> Image {
    Image::from_fn(gt.width(), gt.height(), |x, y| {
        let v = gt.get(x, y);
        (if v > 0.0 { v } else { 2.0 }) * (1.0 + r.gen_range(-spread..spread))
    })
}

/// Finite-difference checks of every loss term on one random triplet.
pub mod loss_suite {
    use super::*;
    use activestereo::losses::{
        auto_mask, depth_to_normalized_disparity_var, gamma_loss, identity_losses, off_losses, off_minimum, pe_var,
        photo_combined, photo_full_min, sd_loss, smooth_loss_filtered, sparse_loss, sparse_loss_sampled,
        stereo_on_loss, total_loss, LossInputs, LossWeights,
    };
    use rand::seq::index::sample;

    /// Tolerance for terms that sample warped images.
    pub const WARP_TOL: f64 = 1e-3;
    pub const TOL: f64 = 1e-4;
    /// Finest-level pixels checked per term and triplet.
    pub const PIXELS: usize = 48;
    pub const OFF_NAMES: [&str; 4] = ["off_temporal_right", "off_temporal_left", "off_stereo_prev", "off_stereo_next"];

    pub struct Check {
        pub name: &'static str,
        pub tol: f64,
        pub report: GradReport,
    }

    /// Weights that keep every term visible in the total.
    pub fn visible_weights() -> LossWeights {
        LossWeights { w2: 0.5, w3: 0.5, w4: 0.5, w5: 0.1, ..LossWeights::default() }
    }

    pub fn run(seed: u64) -> Vec<Check> {
        let case = random_case(seed);
        let mut r = rng(seed ^ 0x5eed);
        let weights = visible_weights();
        let inputs = LossInputs::new(&case.triplet, &case.rig, &case.d_sd, &case.sparse, weights.n_scales).unwrap();
        let depth = perturbed(&case.triplet.gt_depth.image, 0.08, &mut r);
        let mut levels = vec![depth.clone()];
        for _ in 1..weights.n_scales {
            let next = levels.last().unwrap().pool2();
            levels.push(perturbed(&next, 0.03, &mut r));
        }
        let gammas: Vec<f64> =
            (0..6).map(|_| r.gen_range(0.05..1.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let pixels = sample(&mut r, depth.len(), PIXELS).into_vec();
        let at = Some(&pixels[..]);
        let s = &inputs.scales[0];
        let poses = inputs.poses;
        let alpha = weights.alpha_pe;
        let mut out = Vec::new();
        let mut push = |name, tol, report| out.push(Check { name, tol, report });

        push(
            "stereo_on",
            WARP_TOL,
            check_image(|t, d| stereo_on_loss(t, s, &poses, d, alpha).unwrap().mean().unwrap(), &depth, at, WARP_TOL),
        );
        for (k, name) in OFF_NAMES.into_iter().enumerate() {
            push(
                name,
                WARP_TOL,
                check_image(
                    |t, d| off_losses(t, s, &poses, d, alpha).unwrap()[k].mean().unwrap(),
                    &depth,
                    at,
                    WARP_TOL,
                ),
            );
        }
        push(
            "off_minimum",
            WARP_TOL,
            check_image(
                |t, d| {
                    let off = off_losses(t, s, &poses, d, alpha).unwrap();
                    let auto = auto_mask(&off, &identity_losses(s, alpha).unwrap());
                    off_minimum(&off, &auto).unwrap().mean().unwrap()
                },
                &depth,
                at,
                WARP_TOL,
            ),
        );
        push(
            "photo_combined",
            WARP_TOL,
            check_image(
                |t, d| {
                    let on = stereo_on_loss(t, s, &poses, d, alpha).unwrap();
                    let off = off_losses(t, s, &poses, d, alpha).unwrap();
                    let auto = auto_mask(&off, &identity_losses(s, alpha).unwrap());
                    photo_combined(&on, &off_minimum(&off, &auto).unwrap(), 1.0).unwrap()
                },
                &depth,
                at,
                WARP_TOL,
            ),
        );
        push(
            "photo_full_min",
            WARP_TOL,
            check_image(
                |t, d| {
                    let on = stereo_on_loss(t, s, &poses, d, alpha).unwrap();
                    photo_full_min(&on, &off_losses(t, s, &poses, d, alpha).unwrap()).unwrap()
                },
                &depth,
                at,
                WARP_TOL,
            ),
        );
        push("sd", TOL, check_image(|_, d| sd_loss(d, &s.d_sd).unwrap(), &depth, None, TOL));
        push("sparse", TOL, check_image(|_, d| sparse_loss(d, &s.sparse).unwrap(), &depth, None, TOL));
        let coarse = &inputs.scales[1];
        push(
            "sparse_sampled",
            TOL,
            check_image(|_, d| sparse_loss_sampled(d, &coarse.sparse_samples).unwrap(), &levels[1], None, TOL),
        );
        push(
            "smooth",
            TOL,
            check_image(
                |_, d| smooth_loss_filtered(depth_to_normalized_disparity_var(d).unwrap(), &s.ir_filtered).unwrap(),
                &depth,
                None,
                TOL,
            ),
        );
        push("gamma", TOL, check_vars(|t, g| gamma_loss(t, &[g[0], g[1]]), &[vec![3], vec![3]], &gammas, None, TOL));
        let target = s.active_left.to_tensor();
        push(
            "pe",
            TOL,
            check_image(
                |t, w| pe_var(t.constant(target.clone()), w, alpha).unwrap().mean(),
                &s.active_right,
                None,
                TOL,
            ),
        );

        // Total: sampled finest pixels plus every coarser-level entry and every gamma.
        let mut shapes: Vec<Vec<usize>> = levels.iter().map(|l| vec![l.height(), l.width()]).collect();
        shapes.push(vec![gammas.len()]);
        let values: Vec<f64> = levels.iter().flat_map(|l| l.data().to_vec()).chain(gammas.iter().copied()).collect();
        let coords: Vec<usize> = pixels.iter().copied().chain(depth.len()..values.len()).collect();
        let n = weights.n_scales;
        push(
            "total",
            WARP_TOL,
            check_vars(
                |t, v| total_loss(t, &inputs, &v[..n], &[v[n]], &weights).unwrap().total,
                &shapes,
                &values,
                Some(&coords),
                WARP_TOL,
            ),
        );
        out
    }
}

/// Gt values are powers of two and predictions dyadic multiples, so every per-pixel term
/// and every partial sum is exact and any summation order must agree bit for bit.
pub fn dyadic_maps(r: &mut ChaCha8Rng, w: usize, h: usize) -> (DepthMap, DepthMap, DepthMap) {
    let gt = Image::from_fn(w, h, |_, _| [1.0, 2.0, 4.0, 8.0][r.gen_range(0..4)]);
    let gt_valid = Mask::from_fn(w, h, |_, _| r.gen_bool(0.9));
    let pred = Image::from_fn(w, h, |x, y| gt.get(x, y) * r.gen_range(4..13) as f64 / 8.0);
    let pred_valid = Mask::from_fn(w, h, |_, _| r.gen_bool(0.95));
    let init_valid = Mask::from_fn(w, h, |_, _| r.gen_bool(0.6));
    (
        DepthMap::with_mask(pred, pred_valid),
        DepthMap::with_mask(gt.clone(), gt_valid),
        DepthMap::with_mask(gt, init_valid),
    )
}

pub struct Oracle {
    pub pixels: usize,
    pub rel: f64,
    pub rmse: f64,
    pub deltas: [f64; 3],
    pub pct_valid: f64,
}

pub fn brute_force(pred: &DepthMap, gt: &DepthMap, region: impl Fn(usize) -> bool) -> Oracle {
    let (mut pixels, mut n, mut rel, mut sq, mut hits) = (0, 0, 0.0, 0.0, [0usize; 3]);
    for i in 0..gt.image.len() {
        if !gt.valid.data()[i] || !region(i) {
            continue;
        }
        pixels += 1;
        if !pred.valid.data()[i] {
            continue;
        }
        let (p, g) = (pred.image.data()[i], gt.image.data()[i]);
        n += 1;
        rel += (p - g).abs() / g;
        sq += (p - g) * (p - g);
        for (k, t) in [1.25f64, 1.5625, 1.953125].iter().enumerate() {
            if (p / g).max(g / p) < *t {
                hits[k] += 1;
            }
        }
    }
    let nf = n as f64;
    Oracle {
        pixels,
        rel: rel / nf,
        rmse: (sq / nf).sqrt(),
        deltas: hits.map(|c| c as f64 / nf),
        pct_valid: 100.0 * nf / pixels as f64,
    }
}
