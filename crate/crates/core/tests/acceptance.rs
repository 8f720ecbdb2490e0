//! End-to-end acceptance checks; prints one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use activestereo::autodiff::Tape;
use activestereo::channel_exchange::{exchange, routing_mosaic, BnBranchParams, ExchangeConfig, ExchangeMode, Source};
use activestereo::geometry::DepthMap;
use activestereo::image::Image;
use activestereo::io;
use activestereo::losses::{
    auto_mask, identity_losses, off_losses, off_minimum, photo_combined, photo_full_min, stereo_on_loss, LossInputs,
};
use activestereo::metrics::compute_metrics;
use activestereo::pipeline::{self, PipelineConfig, FAR_DEPTH};
use activestereo::scene_sim::{presets, BlobPattern, DEPTH_MATCH_TOL};
use activestereo::sgm::{self, SgmParams};
use activestereo::{Pose, StereoRig, Tensor};
use common::loss_suite;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, title: &str, o: &Outcome, results: &mut Vec<(usize, bool)>) {
    println!("criterion {n} [{}] {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push((n, o.pass));
}

fn gradient_suite() -> Outcome {
    const TRIPLETS: u64 = 20;
    let start = Instant::now();
    let mut by_name: BTreeMap<&str, (f64, common::GradReport)> = BTreeMap::new();
    for seed in 0..TRIPLETS {
        for c in loss_suite::run(1000 + seed) {
            by_name.entry(c.name).or_insert((c.tol, Default::default())).1.merge(&c.report);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let failing: Vec<String> =
        by_name.iter().filter(|(_, (tol, r))| !r.passes(*tol)).map(|(n, (_, r))| format!("{n} {r:?}")).collect();
    let worst = by_name.values().map(|(tol, r)| r.max_rel / tol).fold(0.0, f64::max);
    let checked: usize = by_name.values().map(|(_, r)| r.checked).sum();
    let excluded: usize = by_name.values().map(|(_, r)| r.excluded).sum();
    Outcome {
        pass: failing.is_empty() && elapsed < 60.0,
        detail: format!(
            "{} terms x {TRIPLETS} triplets, {checked} coordinates checked, {excluded} near kinks skipped, worst error {worst:.2} of tolerance, {elapsed:.1} s{}",
            by_name.len(),
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    }
}

fn min_split() -> Outcome {
    let scene = presets::blank_wall(2.0);
    let config =
        PipelineConfig { trajectory: activestereo::scene_sim::sliding_trajectory(3, 0.125, 0.0), ..Default::default() };
    let seq = pipeline::render(&scene, &config).unwrap();
    let triplet = pipeline::central_triplet(&seq, &config).unwrap();
    let rig = config.rig;
    let empty = DepthMap::empty(160, 120);
    let sparse = activestereo::landmarks::SparseDepthImage::empty(160, 120);
    let inputs = LossInputs::new(&triplet, &rig, &empty, &sparse, 1).unwrap();
    let s = &inputs.scales[0];
    let depth = triplet.gt_depth.image.map(|z| z * 1.05);
    let alpha = config.weights.alpha_pe;
    let grad_norm = |split: bool| {
        let tape = Tape::new();
        let d = tape.var(depth.to_tensor());
        let on = stereo_on_loss(&tape, s, &inputs.poses, d, alpha).unwrap();
        let off = off_losses(&tape, s, &inputs.poses, d, alpha).unwrap();
        let loss = if split {
            let auto = auto_mask(&off, &identity_losses(s, alpha).unwrap());
            photo_combined(&on, &off_minimum(&off, &auto).unwrap(), config.weights.beta).unwrap()
        } else {
            photo_full_min(&on, &off).unwrap()
        };
        let g = loss.backward().unwrap().wrt(d);
        g.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let (split, full) = (grad_norm(true), grad_norm(false));
    let pass = split > 0.0 && split >= 10.0 * full;
    let ratio = if full > 0.0 { format!("{:.1}x", split / full) } else { "unbounded".into() };
    Outcome { pass, detail: format!("|dL/dD| split {split:.3e} vs all-five min {full:.3e} ({ratio}, need >= 10x)") }
}

fn sgm_coverage() -> Outcome {
    let rig = StereoRig::desk_default();
    let params = SgmParams::default();
    let scene = presets::blank_wall(2.0);
    let pattern = BlobPattern::generate(&scene.pattern);
    let passive = scene.render_passive(&rig, &Pose::identity(), 0).unwrap();
    let active = scene.render_active(&rig, &Pose::identity(), &pattern, &passive, 0).unwrap();
    let without = sgm::compute(&passive.left, &passive.right, &params).unwrap().disparity.valid_fraction();
    let with = sgm::compute(&active.left, &active.right, &params).unwrap().disparity.valid_fraction();
    let gain = 100.0 * (with - without);

    let plane = presets::textured_plane(3.125);
    let r = plane.render_passive(&rig, &Pose::identity(), 0).unwrap();
    let disp = sgm::compute(&r.left, &r.right, &params).unwrap().disparity;
    let truth = rig.focal_baseline() / 3.125;
    let margin = params.census_window / 2 + 1;
    let (w, h) = (160, 120);
    let (mut good, mut total) = (0, 0);
    for y in margin..h - margin {
        for x in (truth.ceil() as usize + margin)..w - margin {
            total += 1;
            if disp.valid.get(x, y) && (disp.image.get(x, y) - truth).abs() <= 0.5 {
                good += 1;
            }
        }
    }
    let share = 100.0 * good as f64 / total as f64;
    Outcome {
        pass: gain >= 30.0 && share >= 95.0,
        detail: format!(
            "blank wall valid {:.1}% -> {:.1}% with pattern (+{gain:.1} pp, need 30); textured plane {share:.1}% of {total} interior pixels within 0.5 px of {truth:.1} (need 95%)",
            100.0 * without,
            100.0 * with
        ),
    }
}

/// Panel of the occluder scene: `z = 1`, `|x - 0.0125| <= 0.3`, `|y| <= 2` in the left camera frame.
fn panel_blocks(from: [f64; 3], to: [f64; 3]) -> bool {
    if to[2] <= 1.0 + 1e-9 {
        return false;
    }
    let t = (1.0 - from[2]) / (to[2] - from[2]);
    let x = from[0] + t * (to[0] - from[0]);
    let y = from[1] + t * (to[1] - from[1]);
    (x - 0.0125).abs() <= 0.3 && y.abs() <= 2.0
}

fn occlusion_audit() -> Outcome {
    let rig = StereoRig::desk_default();
    let scene = presets::occluder();
    let pattern = BlobPattern::generate(&scene.pattern);
    let passive = scene.render_passive(&rig, &Pose::identity(), 0).unwrap();
    let active = scene.render_active(&rig, &Pose::identity(), &pattern, &passive, 0).unwrap();
    let k = rig.intrinsics;
    let b = rig.baseline;
    let sigma = pattern.sigma_at(k.width);
    let (mut rendered, mut suppressed, mut bad) = (0, 0, Vec::new());
    for (i, blob) in active.blobs.iter().enumerate() {
        let p = blob.hit;
        let on_surface = (p[2] - 1.0).abs() < 1e-9 || (p[2] - 3.0).abs() < 1e-9;
        let (ur, vr) = (k.fx * (p[0] - b) / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy);
        let in_view = ur >= 0.0 && ur <= (k.width - 1) as f64 && vr >= 0.0 && vr <= (k.height - 1) as f64;
        if !on_surface || !in_view {
            if blob.rendered_right || !on_surface {
                bad.push(i);
            }
            continue;
        }
        let visible = !panel_blocks([b, 0.0, 0.0], p);
        let zr = blob.right_depth.unwrap_or(f64::NAN);
        let matches = (zr - p[2]).abs() <= DEPTH_MATCH_TOL * p[2];
        let rc = blob.right.map_or(false, |(u, v)| (u - ur).abs() < 1e-9 && (v - vr).abs() < 1e-9);
        if blob.rendered_right != visible || matches != visible || !rc {
            bad.push(i);
        }
        if visible {
            rendered += 1;
        } else {
            suppressed += 1;
            // No light may land at the hidden location unless another rendered blob covers it.
            let (x, y) = (ur.round() as usize, vr.round() as usize);
            let covered = active.blobs.iter().any(|o| {
                o.rendered_right
                    && o.right.map_or(false, |(u, v)| {
                        (u - x as f64).powi(2) + (v - y as f64).powi(2) <= (3.0 * sigma).powi(2)
                    })
            });
            if !covered && active.right.get(x, y) != passive.right.get(x, y) {
                bad.push(i);
            }
        }
    }
    Outcome {
        pass: bad.is_empty() && suppressed > 0,
        detail: format!(
            "{} blobs audited: {rendered} visible and rendered, {suppressed} occluded and suppressed, {} mismatches",
            active.blobs.len(),
            bad.len()
        ),
    }
}

fn bn(p: &BnBranchParams, c: usize, x: f64) -> f64 {
    p.gamma[c] * (x - p.mean[c]) / (p.var[c] + p.eps).sqrt() + p.beta[c]
}

fn exchange_mechanism() -> Outcome {
    let mut r = common::rng(5);
    let (c, h, w) = (3, 4, 5);
    let (mut value_errors, mut route_errors, mut identity_errors, mut exchanged) = (0, 0, 0, 0);
    for _ in 0..1000 {
        let m = r.gen_range(2..5);
        let xs: Vec<Tensor> = (0..m)
            .map(|_| Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap())
            .collect();
        let params: Vec<BnBranchParams> = (0..m)
            .map(|_| BnBranchParams {
                gamma: (0..c)
                    .map(|_| if r.gen_bool(0.4) { r.gen_range(-0.02..0.02) } else { r.gen_range(0.1..2.0) })
                    .collect(),
                beta: (0..c).map(|_| r.gen_range(-1.0..1.0)).collect(),
                mean: (0..c).map(|_| r.gen_range(-1.0..1.0)).collect(),
                var: (0..c).map(|_| r.gen_range(0.1..3.0)).collect(),
                eps: 1e-5,
            })
            .collect();
        let theta = 0.02;
        let out = exchange(&xs, &params, &ExchangeConfig { theta, mode: ExchangeMode::Max }).unwrap();
        let (mw, _, codes) = routing_mosaic(&out, (c, h, w));
        for b in 0..m {
            for i in 0..c * h * w {
                let ch = i / (h * w);
                let (expected, source) = if params[b].gamma[ch].abs() > theta {
                    (bn(&params[b], ch, xs[b].data()[i]), Source::Own)
                } else {
                    exchanged += 1;
                    let mut best = (usize::MAX, f64::NEG_INFINITY);
                    for o in (0..m).filter(|&o| o != b) {
                        let v = bn(&params[o], ch, xs[o].data()[i]);
                        if v > best.1 {
                            best = (o, v);
                        }
                    }
                    (best.1, Source::Branch(best.0))
                };
                if out.outputs[b].data()[i].to_bits() != expected.to_bits() {
                    value_errors += 1;
                }
                let (y, x) = ((i % (h * w)) / w, i % w);
                let code = codes[(b * h + y) * mw + ch * w + x];
                let expected_code = match source {
                    Source::Branch(k) => k as u8 + 1,
                    _ => 0,
                };
                if out.routing[b][i] != source || code != expected_code {
                    route_errors += 1;
                }
            }
        }
        let ident =
            exchange(&xs, &params, &ExchangeConfig { theta: f64::MIN_POSITIVE, mode: ExchangeMode::Max }).unwrap();
        for b in 0..m {
            let own = activestereo::channel_exchange::bn_normalize(&xs[b], &params[b]).unwrap();
            if params[b].gamma.iter().all(|g| g.abs() > f64::MIN_POSITIVE) && ident.outputs[b] != own {
                identity_errors += 1;
            }
        }
    }
    Outcome {
        pass: value_errors == 0 && route_errors == 0 && identity_errors == 0 && exchanged > 0,
        detail: format!(
            "1000 random stacks, {exchanged} exchanged elements: {value_errors} value mismatches, {route_errors} routing mismatches, {identity_errors} identity failures at theta -> 0+"
        ),
    }
}

struct Benchmark {
    config: PipelineConfig,
    prepared: pipeline::Prepared,
    full: (DepthMap, activestereo::metrics::RegionMetrics, activestereo::metrics::RegionMetrics),
    seconds: f64,
}

fn benchmark() -> Benchmark {
    let scene = presets::occluded_floor();
    let config = PipelineConfig::default();
    let start = Instant::now();
    let prepared = pipeline::prepare(&scene, &config).unwrap();
    let (refined, metrics, baseline) = pipeline::refine_prepared(prepared.clone(), &config).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    Benchmark { config, prepared, full: (refined.depth, metrics, baseline), seconds }
}

fn completion(bench: &Benchmark) -> Outcome {
    let (_, m, base) = &bench.full;
    let val = m.whole.pct_valid.unwrap();
    let (rel, base_rel) = (m.whole.rel.unwrap(), base.whole.rel.unwrap());
    let (rmse, base_rmse) = (m.without_initial.rmse.unwrap(), base.without_initial.rmse.unwrap());
    let gain = 1.0 - rmse / base_rmse;
    Outcome {
        pass: val == 100.0 && rel < base_rel && gain >= 0.25 && bench.seconds < 120.0,
        detail: format!(
            "{} landmarks; %val {val:.1}; whole Rel {rel:.4} vs baseline {base_rel:.4}; without-initial RMSE {rmse:.3} vs {base_rmse:.3} ({:.1}% lower, need 25%); {:.1} s",
            bench.prepared.landmarks.len(),
            100.0 * gain,
            bench.seconds
        ),
    }
}

fn ablation(bench: &Benchmark) -> Outcome {
    let gt = &bench.prepared.triplet.gt_depth;
    let far = pipeline::far_mask(gt, FAR_DEPTH);
    let rig = bench.config.rig;
    let occluded = pipeline::stereo_occlusion_mask(&rig, gt, &bench.prepared.triplet.gt_depth_right, 0.01);
    let run = |w3: Option<f64>, beta: Option<f64>| {
        let mut config = bench.config.clone();
        config.weights.w3 = w3.unwrap_or(config.weights.w3);
        config.weights.beta = beta.unwrap_or(config.weights.beta);
        pipeline::refine_prepared(bench.prepared.clone(), &config).unwrap().0.depth
    };
    let far_rmse = |d: &DepthMap| pipeline::masked_metrics("far", d, gt, &far).rmse.unwrap();
    let occ_rel = |d: &DepthMap| pipeline::masked_metrics("occluded", d, gt, &occluded).rel.unwrap();
    let full = &bench.full.0;
    let no_sparse = run(Some(0.0), None);
    let no_temporal = run(None, Some(0.0));
    let (f_full, f_ablate) = (far_rmse(full), far_rmse(&no_sparse));
    let (o_full, o_ablate) = (occ_rel(full), occ_rel(&no_temporal));
    Outcome {
        pass: f_ablate > f_full && o_ablate > o_full,
        detail: format!(
            "far (> {FAR_DEPTH} m, {} px) RMSE {f_full:.3} -> {f_ablate:.3} with w3 = 0; occluded ({} px) Rel {o_full:.4} -> {o_ablate:.4} with beta = 0",
            far.and(&gt.valid).count(),
            occluded.count()
        ),
    }
}

fn metrics_and_io() -> Outcome {
    let mut r = common::rng(8);
    let mut metric_errors = 0;
    for _ in 0..50 {
        let (pred, gt, initial) = common::dyadic_maps(&mut r, 37, 23);
        let m = compute_metrics(&pred, &gt, &initial).unwrap();
        let whole = common::brute_force(&pred, &gt, |_| true);
        let regions = [
            (&m.whole, common::brute_force(&pred, &gt, |_| true)),
            (&m.with_initial, common::brute_force(&pred, &gt, |i| initial.valid.data()[i])),
            (&m.without_initial, common::brute_force(&pred, &gt, |i| !initial.valid.data()[i])),
        ];
        for (got, want) in regions {
            let same = got.pixels == want.pixels
                && got.rel == Some(want.rel)
                && got.rmse == Some(want.rmse)
                && [got.delta1, got.delta2, got.delta3] == want.deltas.map(Some)
                && got.pct_valid == Some(whole.pct_valid);
            metric_errors += usize::from(!same);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let mut io_errors = 0;
    for i in 0..20 {
        let (w, h) = (r.gen_range(1..40), r.gen_range(1..30));
        let img = Image::from_fn(w, h, |_, _| r.gen_range(-1e3f32..1e3) as f64);
        let path = dir.path().join(format!("{i}.pfm"));
        io::write_pfm(&path, &img).unwrap();
        io_errors += usize::from(io::read_pfm(&path).unwrap() != img);
        let ir = Image::from_fn(w, h, |_, _| r.gen_range(0.0..1.0));
        let png = dir.path().join(format!("{i}.png"));
        io::write_png16(&png, &ir).unwrap();
        let back = io::read_png(&png).unwrap();
        io_errors += usize::from(back.data().iter().zip(ir.data()).any(|(a, b)| (a - b).abs() > 0.5 / 65535.0 + 1e-15));
    }

    let det = determinism();
    Outcome {
        pass: metric_errors == 0 && io_errors == 0 && det.0,
        detail: format!("{metric_errors} metric mismatches over 150 regions; {io_errors} PFM/PNG round-trip failures over 40 files; {}", det.1),
    }
}

/// Full pipeline (rendering, SGM, landmarks, a short refinement) under 1 and 3 worker threads.
fn determinism() -> (bool, String) {
    let scene = presets::occluded_floor();
    let config =
        PipelineConfig { schedule: activestereo::refine::Schedule::uniform(4, 5), ..PipelineConfig::default() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| pipeline::run(&scene, &config).unwrap())
    };
    let (a, b) = (run(1), run(3));
    let bits = |d: &DepthMap| d.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = bits(&a.refined.depth) == bits(&b.refined.depth)
        && a.prepared.d_sd == b.prepared.d_sd
        && a.prepared.sparse == b.prepared.sparse
        && a.metrics == b.metrics;
    (same, format!("pipeline output {} under 1 vs 3 threads", if same { "bit-identical" } else { "differs" }))
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    report(1, "gradient suite", &gradient_suite(), &mut results);
    report(2, "min-split signal", &min_split(), &mut results);
    report(3, "active-pattern SGM coverage", &sgm_coverage(), &mut results);
    report(4, "occlusion-aware rendering", &occlusion_audit(), &mut results);
    report(5, "channel exchange", &exchange_mechanism(), &mut results);
    let bench = benchmark();
    report(6, "completion end-to-end", &completion(&bench), &mut results);
    report(7, "ablation direction", &ablation(&bench), &mut results);
    report(8, "metrics, I/O, determinism", &metrics_and_io(), &mut results);
    let failed: Vec<usize> = results.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
