//! Census-cost semi-global matching.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::parabola_offset;
use crate::geometry::{disparity_to_depth, DepthMap, DisparityMap, GeometryError, StereoRig};
use crate::image::{Image, Mask};

#[derive(Debug, Error)]
pub enum SgmError {
    #[error("d_max {d_max} must be smaller than the image width {width}")]
    DisparityRange { d_max: usize, width: usize },
    #[error("images differ in size: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, SgmError>;

/// Matching costs indexed by `(x, y, d)` with `d ∈ [0, d_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    width: usize,
    height: usize,
    d_max: usize,
    costs: Vec<f32>,
}

impl CostVolume {
    pub fn new(width: usize, height: usize, d_max: usize, costs: Vec<f32>) -> Self {
        assert_eq!(costs.len(), width * height * (d_max + 1), "cost volume size");
        Self { width, height, d_max, costs }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    pub fn disparities(&self) -> usize {
        self.d_max + 1
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, d: usize) -> f32 {
        self.costs[(y * self.width + x) * (self.d_max + 1) + d]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let n = self.d_max + 1;
        let i = (y * self.width + x) * n;
        &self.costs[i..i + n]
    }

    pub fn costs(&self) -> &[f32] {
        &self.costs
    }

    pub fn max_cost(&self) -> f32 {
        self.costs.iter().copied().fold(0.0, f32::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgmParams {
    pub p1: f32,
    pub p2: f32,
    pub census_window: usize,
    /// 4 or 8.
    pub paths: usize,
    pub uniqueness_ratio: f32,
    pub lr_max_diff: f64,
    pub d_max: usize,
}

impl Default for SgmParams {
    fn default() -> Self {
        // 8 and 32 per 64 census bits, scaled to the 24 bits of a 5×5 window.
        Self { p1: 3.0, p2: 12.0, census_window: 5, paths: 8, uniqueness_ratio: 1.15, lr_max_diff: 1.0, d_max: 64 }
    }
}

impl SgmParams {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(SgmError::InvalidParams(m.into()));
        if !(self.p1 > 0.0 && self.p2 > self.p1) {
            return err("need p2 > p1 > 0");
        }
        if self.census_window % 2 == 0 || self.census_window < 3 || self.census_window > 7 {
            return err("census window must be odd, 3..=7");
        }
        if self.paths != 4 && self.paths != 8 {
            return err("paths must be 4 or 8");
        }
        if !(self.uniqueness_ratio >= 1.0) {
            return err("uniqueness ratio must be >= 1");
        }
        if !(self.lr_max_diff >= 0.0) {
            return err("lr_max_diff must be >= 0");
        }
        Ok(())
    }
}

/// Census bit strings: bit set where the neighbor is darker than the center.
/// Borders are edge-replicated.
pub fn census_transform(image: &Image, window: usize) -> Vec<u64> {
    let r = (window / 2) as isize;
    let (w, h) = image.dims();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = image.get(x as usize, y as usize);
            let mut bits = 0u64;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    bits = (bits << 1) | u64::from(image.get_clamped(x + dx, y + dy) < c);
                }
            }
            out.push(bits);
        }
    }
    out
}

fn check_pair(left: &Image, right: &Image, d_max: usize) -> Result<()> {
    if left.dims() != right.dims() {
        return Err(SgmError::SizeMismatch(left.dims(), right.dims()));
    }
    if d_max >= left.width() {
        return Err(SgmError::DisparityRange { d_max, width: left.width() });
    }
    Ok(())
}

/// Left-reference census cost with a 5×5 window.
pub fn census_cost(left: &Image, right: &Image, d_max: usize) -> Result<CostVolume> {
    census_cost_with_window(left, right, d_max, 5)
}

/// `cost(x, y, d) = Hamming(census_L(x, y), census_R(x − d, y))`; disparities leaving
/// the image cost `window² − 1`.
pub fn census_cost_with_window(left: &Image, right: &Image, d_max: usize, window: usize) -> Result<CostVolume> {
    check_pair(left, right, d_max)?;
    let (cl, cr) = (census_transform(left, window), census_transform(right, window));
    Ok(hamming_volume(&cl, &cr, left.width(), left.height(), d_max, window, -1))
}

/// Right-reference census cost: `Hamming(census_R(x, y), census_L(x + d, y))`.
pub fn census_cost_right(left: &Image, right: &Image, d_max: usize, window: usize) -> Result<CostVolume> {
    check_pair(left, right, d_max)?;
    let (cl, cr) = (census_transform(left, window), census_transform(right, window));
    Ok(hamming_volume(&cr, &cl, left.width(), left.height(), d_max, window, 1))
}

fn hamming_volume(
    reference: &[u64],
    other: &[u64],
    w: usize,
    h: usize,
    d_max: usize,
    window: usize,
    sign: isize,
) -> CostVolume {
    let max_cost = (window * window - 1) as f32;
    let n = d_max + 1;
    let mut costs = vec![0.0f32; w * h * n];
    costs.par_chunks_mut(w * n).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let a = reference[y * w + x];
            for d in 0..n {
                let xo = x as isize + sign * d as isize;
                row[x * n + d] = if xo < 0 || xo >= w as isize {
                    max_cost
                } else {
                    (a ^ other[y * w + xo as usize]).count_ones() as f32
                };
            }
        }
    });
    CostVolume::new(w, h, d_max, costs)
}

/// Scanline directions; the first four are used for 4-path aggregation.
pub const DIRECTIONS: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)];

/// Single-direction SGM recursion
/// `L(p, d) = C(p, d) + min(L(p−r, d), L(p−r, d±1) + p1, min_k L(p−r, k) + p2) − min_k L(p−r, k)`,
/// with `L = C` where `p − r` leaves the image.
pub fn aggregate_direction(volume: &CostVolume, dir: (isize, isize), p1: f32, p2: f32) -> CostVolume {
    let (w, h, n) = (volume.width as isize, volume.height as isize, volume.disparities());
    let mut out = vec![0.0f32; volume.costs.len()];
    // Visit pixels so that p − r is always processed before p.
    let ys: Vec<isize> = if dir.1 >= 0 { (0..h).collect() } else { (0..h).rev().collect() };
    let xs: Vec<isize> = if dir.0 >= 0 { (0..w).collect() } else { (0..w).rev().collect() };
    let mut prev = vec![0.0f32; n];
    for &y in &ys {
        for &x in &xs {
            let (px, py) = (x - dir.0, y - dir.1);
            let idx = ((y * w + x) as usize) * n;
            let cost = volume.pixel(x as usize, y as usize);
            if px < 0 || py < 0 || px >= w || py >= h {
                out[idx..idx + n].copy_from_slice(cost);
                continue;
            }
            let pidx = ((py * w + px) as usize) * n;
            prev.copy_from_slice(&out[pidx..pidx + n]);
            let min_prev = prev.iter().copied().fold(f32::INFINITY, f32::min);
            for d in 0..n {
                let mut best = prev[d];
                if d > 0 {
                    best = best.min(prev[d - 1] + p1);
                }
                if d + 1 < n {
                    best = best.min(prev[d + 1] + p1);
                }
                best = best.min(min_prev + p2);
                out[idx + d] = cost[d] + best - min_prev;
            }
        }
    }
    CostVolume::new(volume.width, volume.height, volume.d_max, out)
}

/// Sum of the single-direction aggregations over `params.paths` directions.
pub fn aggregate(volume: &CostVolume, params: &SgmParams) -> CostVolume {
    let dirs = &DIRECTIONS[..params.paths.min(8)];
    let per_path: Vec<CostVolume> =
        dirs.par_iter().map(|&d| aggregate_direction(volume, d, params.p1, params.p2)).collect();
    let mut sum = vec![0.0f32; volume.costs.len()];
    for v in &per_path {
        for (s, c) in sum.iter_mut().zip(&v.costs) {
            *s += c;
        }
    }
    CostVolume::new(volume.width, volume.height, volume.d_max, sum)
}

/// Winner-take-all disparity with parabola subpixel refinement and the uniqueness test.
///
/// Returns `None` for pixels whose best cost is not unique: any cost at `|d − best| > 1`
/// within `uniqueness_ratio · best` rejects the pixel. The comparison is inclusive so that
/// flat cost curves (textureless regions) are rejected even at zero cost.
pub fn winner_take_all(aggregated: &CostVolume, x: usize, y: usize, uniqueness_ratio: f32) -> Option<f64> {
    let costs = aggregated.pixel(x, y);
    let mut best = 0;
    for (d, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = d;
        }
    }
    let threshold = uniqueness_ratio * costs[best];
    if costs.iter().enumerate().any(|(d, &c)| d.abs_diff(best) > 1 && c <= threshold) {
        return None;
    }
    let sub = if best > 0 && best + 1 < costs.len() {
        parabola_offset(costs[best - 1] as f64, costs[best] as f64, costs[best + 1] as f64)
    } else {
        0.0
    };
    Some(best as f64 + sub)
}

/// Raw disparity map with the uniqueness test only.
pub fn extract_raw(aggregated: &CostVolume, params: &SgmParams) -> DisparityMap {
    let (w, h) = (aggregated.width, aggregated.height);
    let values: Vec<Option<f64>> = (0..w * h)
        .into_par_iter()
        .map(|i| winner_take_all(aggregated, i % w, i / w, params.uniqueness_ratio))
        .collect();
    let image = Image::new(w, h, values.iter().map(|v| v.unwrap_or(0.0)).collect());
    let valid = Mask::new(w, h, values.iter().map(|v| v.is_some_and(|d| d > 0.0)).collect());
    DisparityMap::with_mask(image, valid)
}

/// Final left disparity: uniqueness on both references plus the left-right check.
/// Invalid pixels carry the sentinel 0.
pub fn extract_disparity(left_agg: &CostVolume, right_agg: &CostVolume, params: &SgmParams) -> DisparityMap {
    let left = extract_raw(left_agg, params);
    let right = extract_raw(right_agg, params);
    lr_check(&left, &right, params.lr_max_diff)
}

/// Invalidates left disparities that disagree with the right-reference map at `x − d`.
pub fn lr_check(left: &DisparityMap, right: &DisparityMap, max_diff: f64) -> DisparityMap {
    let (w, h) = (left.width(), left.height());
    let mut image = left.image.clone();
    let mut valid = left.valid.clone();
    for y in 0..h {
        for x in 0..w {
            if !valid.get(x, y) {
                continue;
            }
            let d = left.image.get(x, y);
            let xr = (x as f64 - d).round();
            let ok = xr >= 0.0 && {
                let xr = xr as usize;
                right.valid.get(xr, y) && (right.image.get(xr, y) - d).abs() <= max_diff
            };
            if !ok {
                valid.set(x, y, false);
                image.set(x, y, 0.0);
            }
        }
    }
    DisparityMap::with_mask(image, valid)
}

/// Intermediate products of a full SGM run.
#[derive(Clone, Debug)]
pub struct SgmOutput {
    pub disparity: DisparityMap,
    /// Right-reference disparity before the left-right check.
    pub right_raw: DisparityMap,
    /// Left-reference disparity before the left-right check.
    pub left_raw: DisparityMap,
}

pub fn compute(left: &Image, right: &Image, params: &SgmParams) -> Result<SgmOutput> {
    params.validate()?;
    let cl = census_cost_with_window(left, right, params.d_max, params.census_window)?;
    let cr = census_cost_right(left, right, params.d_max, params.census_window)?;
    let (al, ar) = rayon::join(|| aggregate(&cl, params), || aggregate(&cr, params));
    let left_raw = extract_raw(&al, params);
    let right_raw = extract_raw(&ar, params);
    let disparity = lr_check(&left_raw, &right_raw, params.lr_max_diff);
    Ok(SgmOutput { disparity, right_raw, left_raw })
}

/// Semi-dense left depth from a rectified pair.
pub fn semi_dense_depth(rig: &StereoRig, left: &Image, right: &Image, params: &SgmParams) -> Result<DepthMap> {
    let out = compute(left, right, params)?;
    Ok(disparity_to_depth(rig, &out.disparity)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize, seed: u64) -> Image {
        let mut state = seed;
        Image::from_fn(w, h, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as f64 / (1u64 << 24) as f64
        })
    }

    fn shifted(img: &Image, k: usize) -> Image {
        Image::from_fn(img.width(), img.height(), |x, y| img.get_clamped(x as isize + k as isize, y as isize))
    }

    #[test]
    fn census_has_24_bits() {
        let mut img = Image::filled(7, 7, 1.0);
        img.set(3, 3, 2.0);
        let c = census_transform(&img, 5);
        assert_eq!(c[3 * 7 + 3].count_ones(), 24);
        let v = census_cost(&img, &Image::filled(7, 7, 1.0), 2).unwrap();
        assert_eq!(v.max_cost(), 24.0);
    }

    #[test]
    fn shifted_pair_has_zero_cost_at_shift() {
        let left = texture(40, 20, 1);
        let right = shifted(&left, 3);
        let v = census_cost(&left, &right, 8).unwrap();
        for y in 2..18 {
            for x in 8..36 {
                assert_eq!(v.get(x, y, 3), 0.0);
            }
        }
    }

    #[test]
    fn constant_images_cost_nothing() {
        let img = Image::filled(12, 8, 0.5);
        let v = census_cost(&img, &img, 4).unwrap();
        for y in 0..8 {
            for x in 4..12 {
                assert!(v.pixel(x, y).iter().all(|&c| c == 0.0));
            }
        }
        // Disparities reaching past the left border cost the maximum.
        assert_eq!(v.get(0, 0, 1), 24.0);
    }

    #[test]
    fn d_max_must_be_below_width() {
        let img = Image::filled(8, 8, 0.5);
        assert!(matches!(census_cost(&img, &img, 8), Err(SgmError::DisparityRange { .. })));
    }

    #[test]
    fn zero_penalties_scale_by_paths() {
        let left = texture(16, 10, 2);
        let v = census_cost(&left, &shifted(&left, 2), 4).unwrap();
        let params = SgmParams { p1: 0.0, p2: 0.0, ..SgmParams::default() };
        let agg = aggregate(&v, &params);
        for (a, c) in agg.costs().iter().zip(v.costs()) {
            assert_eq!(*a, 8.0 * c);
        }
    }

    #[test]
    fn single_path_matches_hand_recursion() {
        // One row, three pixels, two disparities.
        let v = CostVolume::new(3, 1, 1, vec![1.0, 4.0, 5.0, 0.0, 2.0, 3.0]);
        let l = aggregate_direction(&v, (1, 0), 1.0, 3.0);
        // x=0: L = C = [1, 4]
        // x=1: min_prev 1; d0: 5 + min(1, 4+1, 1+3) - 1 = 5; d1: 0 + min(4, 1+1, 4) - 1 = 1
        // x=2: min_prev 1; d0: 2 + min(5, 1+1, 4) - 1 = 3; d1: 3 + min(1, 5+1, 4) - 1 = 3
        assert_eq!(l.costs(), &[1.0, 4.0, 5.0, 1.0, 3.0, 3.0]);
    }
}
