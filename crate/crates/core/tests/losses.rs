mod common;

use activestereo::landmarks::SparseDepthImage;
use activestereo::losses::{
    pe, pe_var, sd_loss, sparse_loss, stereo_on_loss, total_loss, window_valid, LossBreakdown, LossInputs, LossWeights,
    ScaleBreakdown,
};
use activestereo::pipeline::{self, PipelineConfig};
use activestereo::scene_sim::presets;
use activestereo::{DepthMap, Image, Mask, Tape};
use common::loss_suite;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..3 {
        for c in loss_suite::run(seed) {
            assert!(c.report.passes(c.tol), "seed {seed} {}: {:?}", c.name, c.report);
        }
    }
}

#[test]
fn composite_ssim_l1_gradient_on_8x8_pair() {
    let mut r = common::rng(88);
    for _ in 0..10 {
        let a = Image::from_fn(8, 8, |_, _| r.gen_range(0.0..1.0));
        // Generic point: keep every |a - b| away from the L1 kink.
        let b = Image::from_fn(8, 8, |x, y| {
            let off = r.gen_range(0.01..0.5);
            if a.get(x, y) > 0.5 {
                a.get(x, y) - off
            } else {
                a.get(x, y) + off
            }
        });
        let target = a.to_tensor();
        let report =
            common::check_image(|t, x| pe_var(t.constant(target.clone()), x, 0.85).unwrap().mean(), &b, None, 1e-4);
        assert!(report.passes(1e-4), "{report:?}");
        assert_eq!(report.excluded, 0);
    }
}

fn triplet_inputs(n_scales: usize) -> (activestereo::scene_sim::FrameTriplet, LossInputs, DepthMap, SparseDepthImage) {
    let config = PipelineConfig::default();
    let prepared = pipeline::prepare(&presets::occluder(), &config).unwrap();
    let t = prepared.triplet;
    let inputs = LossInputs::new(&t, &config.rig, &prepared.d_sd, &prepared.sparse, n_scales).unwrap();
    (t, inputs, prepared.d_sd, prepared.sparse)
}

#[test]
fn losses_are_nonnegative_and_recombine_exactly() {
    let weights = LossWeights { w2: 0.3, w4: 0.2, w5: 0.1, ..LossWeights::default() };
    let mut r = common::rng(3);
    for seed in 0..6 {
        let case = common::random_case(seed);
        let inputs = LossInputs::new(&case.triplet, &case.rig, &case.d_sd, &case.sparse, weights.n_scales).unwrap();
        let tape = Tape::new();
        let mut depth = common::perturbed(&case.triplet.gt_depth.image, 0.2, &mut r);
        let pyramid: Vec<_> = (0..weights.n_scales)
            .map(|_| {
                let v = tape.var(depth.to_tensor());
                depth = depth.pool2();
                v
            })
            .collect();
        let gammas = [tape.var(activestereo::Tensor::new(vec![4], vec![0.3, -0.2, 0.0, 1.5]).unwrap())];
        let eval = total_loss(&tape, &inputs, &pyramid, &gammas, &weights).unwrap();
        let b = &eval.breakdown;
        for v in [b.photo_on, b.photo_off_min, b.sd, b.sparse, b.smooth, b.gamma, b.total] {
            assert!(v >= 0.0 && v.is_finite());
        }
        assert!((b.total - b.recombine(&weights)).abs() <= 1e-10);
        let scaled: f64 = b.scales.iter().map(|s| s.photo_on / (s.level * s.level) as f64).sum();
        assert!((scaled - b.photo_on).abs() <= 1e-12);
    }
}

#[test]
fn recombination_examples() {
    let w = LossWeights { w2: 0.0, w3: 0.0, w4: 0.0, w5: 0.0, beta: 0.0, ..LossWeights::default() };
    let scale =
        |level, photo_on| ScaleBreakdown { level, photo_on, photo_off_min: 0.0, sd: 0.0, sparse: 0.0, smooth: 0.0 };
    let combine = |levels: &[ScaleBreakdown]| {
        let mut b = LossBreakdown::default();
        b.photo_on = levels.iter().map(|s| s.photo_on / (s.level * s.level) as f64).sum();
        b.scales = levels.to_vec();
        b.recombine(&w)
    };
    assert_eq!(combine(&[]), 0.0);
    assert_eq!(combine(&[scale(1, 1.0)]), 1.0);
    assert_eq!(combine(&[scale(1, 1.0), scale(2, 1.0)]), 1.25);
}

#[test]
fn supervised_terms_vanish_at_their_targets() {
    let (t, inputs, d_sd, sparse) = triplet_inputs(1);
    let tape = Tape::new();
    let s = &inputs.scales[0];
    let filled = Image::from_fn(160, 120, |x, y| if d_sd.valid.get(x, y) { d_sd.image.get(x, y) } else { 2.0 });
    assert_eq!(sd_loss(tape.var(filled.to_tensor()), &s.d_sd).unwrap().item(), 0.0);
    let at_landmarks =
        Image::from_fn(160, 120, |x, y| if sparse.image.get(x, y) > 0.0 { sparse.image.get(x, y) } else { 1.0 });
    assert_eq!(sparse_loss(tape.var(at_landmarks.to_tensor()), &sparse).unwrap().item(), 0.0);
    let valid = Mask::filled(160, 120, true);
    assert_eq!(pe(&t.active_left, &t.active_left, &valid, 0.85).unwrap().1, 0.0);
}

#[test]
fn excluded_pixels_do_not_affect_the_active_term() {
    let (t, inputs, _, _) = triplet_inputs(1);
    let weights = LossWeights { n_scales: 1, ..LossWeights::default() };
    let photo = |inputs: &LossInputs| {
        let tape = Tape::new();
        let d = tape.var(t.gt_depth.image.to_tensor());
        let eval = total_loss(&tape, inputs, &[d], &[], &weights).unwrap();
        (eval.breakdown.photo_on + eval.breakdown.photo_off_min, eval.maps)
    };
    let (base, maps) = photo(&inputs);
    let excluded = Mask::from_fn(160, 120, |x, y| !maps.on_valid.get(x, y)).erode(1);
    let mut changed = 0;
    for (i, _) in excluded.data().iter().enumerate().filter(|(_, &e)| e).step_by(7) {
        let mut altered = inputs.clone();
        let img = &mut altered.scales[0].active_left;
        let (x, y) = (i % 160, i / 160);
        img.set(x, y, 1.0 - img.get(x, y));
        assert_eq!(photo(&altered).0.to_bits(), base.to_bits(), "pixel ({x},{y})");
        changed += 1;
    }
    assert!(changed > 20);
}

fn tile2(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(2 * w, img.height(), |x, y| img.get(x % w, y))
}

fn tile2_mask(m: &Mask) -> Mask {
    let w = m.width();
    Mask::from_fn(2 * w, m.height(), |x, y| m.get(x % w, y))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn averaged_losses_are_invariant_to_tiling(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let (w, h) = (r.gen_range(6..20), r.gen_range(6..16));
        let a = Image::from_fn(w, h, |_, _| r.gen_range(0.0..1.0));
        let b = Image::from_fn(w, h, |_, _| r.gen_range(0.0..1.0));
        // Invalid border columns keep SSIM windows from reaching across the seam.
        let valid = Mask::from_fn(w, h, |x, _| x > 0 && x + 1 < w && r.gen_bool(0.9));
        let single = pe(&a, &b, &window_valid(&valid), 0.85).unwrap().1;
        let tiled = pe(&tile2(&a), &tile2(&b), &window_valid(&tile2_mask(&valid)), 0.85).unwrap().1;
        prop_assert!((single - tiled).abs() <= 1e-10);

        let depth = Image::from_fn(w, h, |_, _| r.gen_range(0.5..8.0));
        let d_sd = DepthMap::with_mask(Image::from_fn(w, h, |_, _| r.gen_range(0.5..8.0)), Mask::from_fn(w, h, |_, _| r.gen_bool(0.6)));
        let sparse = SparseDepthImage::from_image(Image::from_fn(w, h, |_, _| if r.gen_bool(0.1) { r.gen_range(0.5..8.0) } else { 0.0 }));
        let tape = Tape::new();
        let (d1, d2) = (tape.var(depth.to_tensor()), tape.var(tile2(&depth).to_tensor()));
        let d_sd2 = DepthMap::with_mask(tile2(&d_sd.image), tile2_mask(&d_sd.valid));
        let sparse2 = SparseDepthImage::from_image(tile2(&sparse.image));
        prop_assert!((sd_loss(d1, &d_sd).unwrap().item() - sd_loss(d2, &d_sd2).unwrap().item()).abs() <= 1e-10);
        prop_assert!((sparse_loss(d1, &sparse).unwrap().item() - sparse_loss(d2, &sparse2).unwrap().item()).abs() <= 1e-10);
    }

    #[test]
    fn photometric_error_is_nonnegative(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let a = Image::from_fn(9, 7, |_, _| r.gen_range(0.0..1.0));
        let b = Image::from_fn(9, 7, |_, _| r.gen_range(0.0..1.0));
        let (map, mean) = pe(&a, &b, &Mask::filled(9, 7, true), r.gen_range(0.0..=1.0)).unwrap();
        prop_assert!(map.data().iter().all(|&v| v >= 0.0));
        prop_assert!(mean >= 0.0);
    }
}

#[test]
fn active_term_uses_only_the_active_pair() {
    let (_, inputs, _, _) = triplet_inputs(1);
    let mut altered = inputs.clone();
    let s = &mut altered.scales[0];
    for img in [&mut s.prev_left, &mut s.prev_right, &mut s.next_left, &mut s.next_right] {
        *img = img.map(|v| 1.0 - v);
    }
    let depth = Image::filled(160, 120, 2.0);
    let on = |inp: &LossInputs| {
        let tape = Tape::new();
        stereo_on_loss(&tape, &inp.scales[0], &inp.poses, tape.var(depth.to_tensor()), 0.85)
            .unwrap()
            .mean()
            .unwrap()
            .item()
    };
    assert_eq!(on(&inputs).to_bits(), on(&altered).to_bits());
}
