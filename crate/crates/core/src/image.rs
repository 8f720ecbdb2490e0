//! Single-channel floating-point rasters and binary masks.

use crate::autodiff::Tensor;

/// Row-major single-channel image of `f64` samples.
///
/// Carries IR intensities in `[0, 1]`, depths in meters, disparities in pixels,
/// or per-pixel loss values, depending on the caller.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(width * height, data.len(), "image data length mismatch");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Sample with coordinates clamped to the image (edge replication).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image::new(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Bilinear sample; `None` when any of the four neighbors is outside the image.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        let (x0, x1, fx) = lattice_cell(u, self.width)?;
        let (y0, y1, fy) = lattice_cell(v, self.height)?;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }

    /// 2×2 average pooling; odd trailing rows/columns are dropped.
    pub fn pool2(&self) -> Image {
        let (w, h) = (self.width / 2, self.height / 2);
        Image::from_fn(w, h, |x, y| {
            0.25 * (self.get(2 * x, 2 * y)
                + self.get(2 * x + 1, 2 * y)
                + self.get(2 * x, 2 * y + 1)
                + self.get(2 * x + 1, 2 * y + 1))
        })
    }

    /// Square median filter of side `2 * radius + 1` with edge-replicated borders.
    pub fn median_filter(&self, radius: usize) -> Image {
        let r = radius as isize;
        let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
        Image::from_fn(self.width, self.height, |x, y| {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    window.push(self.get_clamped(x as isize + dx, y as isize + dy));
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
            *m
        })
    }

    /// Separable Gaussian blur, kernel truncated at `3 sigma`, edge-replicated borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        let radius = (3.0 * sigma).ceil().max(1.0) as isize;
        let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let horizontal = Image::from_fn(self.width, self.height, |x, y| {
            (-radius..=radius).zip(&kernel).map(|(k, w)| w * self.get_clamped(x as isize + k, y as isize)).sum()
        });
        Image::from_fn(self.width, self.height, |x, y| {
            (-radius..=radius).zip(&kernel).map(|(k, w)| w * horizontal.get_clamped(x as isize, y as isize + k)).sum()
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.data.clone()).expect("image dimensions are consistent")
    }

    /// Converts a rank-2 `[height, width]` tensor back into an image.
    pub fn from_tensor(tensor: &Tensor) -> Option<Image> {
        match tensor.shape() {
            [h, w] => Some(Image::new(*w, *h, tensor.data().to_vec())),
            _ => None,
        }
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Splits a continuous coordinate into its bilinear cell `(i0, i1, frac)`.
///
/// Pixel centers sit at integer coordinates. Returns `None` outside `[0, n - 1]`.
#[inline]
pub(crate) fn lattice_cell(c: f64, n: usize) -> Option<(usize, usize, f64)> {
    if !(c >= 0.0 && c <= (n - 1) as f64) {
        return None;
    }
    let i0 = (c.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let frac = if i1 == i0 { 0.0 } else { c - i0 as f64 };
    Some((i0, i1, frac))
}

/// Binary raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(width * height, data.len(), "mask data length mismatch");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Mask::new(self.width, self.height, self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect())
    }

    pub fn or(&self, other: &Mask) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Mask::new(self.width, self.height, self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect())
    }

    pub fn not(&self) -> Mask {
        Mask::new(self.width, self.height, self.data.iter().map(|&b| !b).collect())
    }

    /// Keeps a pixel only if its whole `(2r+1)²` neighborhood, clipped to the image, is set.
    pub fn erode(&self, radius: usize) -> Mask {
        let r = radius as isize;
        Mask::from_fn(self.width, self.height, |x, y| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if xx < 0 || yy < 0 || xx >= self.width as isize || yy >= self.height as isize {
                        continue;
                    }
                    if !self.get(xx as usize, yy as usize) {
                        return false;
                    }
                }
            }
            true
        })
    }

    /// 0/1 tensor of shape `[height, width]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .expect("mask dimensions are consistent")
    }
}
