//! Difference-of-Gaussians blob detection with non-maximum suppression.

use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    /// Subpixel position.
    pub x: f64,
    pub y: f64,
    /// Integer pixel the extremum was found at.
    pub px: usize,
    pub py: usize,
    /// Absolute DoG response at the extremum.
    pub response: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Polarity {
    /// Bright blobs only (positive DoG).
    Bright,
    /// Bright and dark blobs (extrema of `|DoG|`).
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DogParams {
    pub sigma_small: f64,
    pub sigma_large: f64,
    /// NMS window is `(2 r + 1)²`.
    pub nms_radius: usize,
    /// Keep responses `>= relative_threshold · max response`.
    pub relative_threshold: f64,
    /// Keep responses `>= absolute_threshold`.
    pub absolute_threshold: f64,
    /// Ignore extrema closer than this to the border.
    pub border: usize,
    pub polarity: Polarity,
}

impl Default for DogParams {
    fn default() -> Self {
        Self {
            sigma_small: 1.0,
            sigma_large: 1.6,
            nms_radius: 2,
            relative_threshold: 0.2,
            absolute_threshold: 1e-6,
            border: 1,
            polarity: Polarity::Bright,
        }
    }
}

pub fn dog_response(image: &Image, params: &DogParams) -> Image {
    let a = image.gaussian_blur(params.sigma_small);
    let b = image.gaussian_blur(params.sigma_large);
    let raw = Image::new(image.width(), image.height(), a.data().iter().zip(b.data()).map(|(p, q)| p - q).collect());
    match params.polarity {
        Polarity::Bright => raw.map(|v| v.max(0.0)),
        Polarity::Both => raw.map(f64::abs),
    }
}

/// Local maxima of the DoG response that survive NMS and both thresholds, sorted by
/// decreasing response (ties in raster order).
pub fn detect_blobs(image: &Image, params: &DogParams) -> Vec<Keypoint> {
    let resp = dog_response(image, params);
    let (w, h) = resp.dims();
    let max = resp.max_value();
    if !(max > 0.0) {
        return Vec::new();
    }
    let threshold = (params.relative_threshold * max).max(params.absolute_threshold);
    let r = params.nms_radius as isize;
    let border = params.border.max(1);
    let mut out = Vec::new();
    for y in border..h.saturating_sub(border) {
        'pixel: for x in border..w.saturating_sub(border) {
            let v = resp.get(x, y);
            if v < threshold || v <= 0.0 {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    let o = resp.get(xx as usize, yy as usize);
                    // Plateaus resolve to the first pixel in raster order.
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if o > v || (earlier && o == v) {
                        continue 'pixel;
                    }
                }
            }
            let sx = parabola_offset(resp.get(x - 1, y), v, resp.get(x + 1, y));
            let sy = parabola_offset(resp.get(x, y - 1), v, resp.get(x, y + 1));
            out.push(Keypoint { x: x as f64 + sx, y: y as f64 + sy, px: x, py: y, response: v });
        }
    }
    out.sort_by(|a, b| b.response.total_cmp(&a.response).then((a.py, a.px).cmp(&(b.py, b.px))));
    out
}

/// Vertex offset of the parabola through `(-1, a), (0, b), (1, c)`, clamped to `±0.5`.
pub fn parabola_offset(a: f64, b: f64, c: f64) -> f64 {
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-15 {
        0.0
    } else {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    }
}
