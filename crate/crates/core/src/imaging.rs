//! Non-differentiable image kernels used to build ground-truth masks:
//! Gaussian blur, Canny edges, the boundary band of a mask, and max-pooled
//! mask pyramids.
//!
//! Borders are handled by symmetric reflection (`dcba|abcd|dcba`).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D map of 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::usage(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::usage(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn to_float(&self) -> FloatMap {
        FloatMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// A 2-D map of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FloatMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::usage(format!(
                "map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(FloatMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        FloatMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Pixels at or above `threshold`.
    pub fn threshold_at_least(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v >= threshold) as u8).collect(),
        }
    }

    /// Pixels strictly above `threshold`.
    pub fn threshold(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v > threshold) as u8).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeGtParams {
    pub sigma: f64,
    /// Odd Gaussian kernel size.
    pub kernel: usize,
    /// Canny thresholds as fractions of the maximum gradient magnitude.
    pub canny_low: f64,
    pub canny_high: f64,
    pub band_threshold: f64,
}

impl Default for EdgeGtParams {
    fn default() -> Self {
        EdgeGtParams {
            sigma: 15.0,
            kernel: 25,
            canny_low: 0.1,
            canny_high: 0.3,
            band_threshold: 1e-3,
        }
    }
}

impl EdgeGtParams {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::config(
                "edge_gt.kernel",
                format!("must be odd, got {}", self.kernel),
            ));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("edge_gt.sigma", "must be positive"));
        }
        if !(0.0 < self.canny_low && self.canny_low < self.canny_high) {
            return Err(Error::config(
                "edge_gt.canny_low",
                "need 0 < canny_low < canny_high",
            ));
        }
        if !(self.band_threshold > 0.0) {
            return Err(Error::config("edge_gt.band_threshold", "must be positive"));
        }
        Ok(())
    }
}

/// Symmetric reflection of `i` into `0..n`.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - 1 - r;
    }
    r as usize
}

/// Normalized 1-D Gaussian weights of odd length `kernel`.
pub fn gaussian_kernel(sigma: f64, kernel: usize) -> Result<Vec<f64>> {
    if kernel % 2 == 0 {
        return Err(Error::usage(format!(
            "Gaussian kernel size must be odd, got {kernel}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::usage(format!(
            "Gaussian sigma must be positive, got {sigma}"
        )));
    }
    let r = (kernel / 2) as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Separable blur of a row-major `h x w` buffer.
fn blur_f64(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * row[reflect(x as isize + j as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + j as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

pub fn gaussian_blur(image: &FloatMap, sigma: f64, kernel: usize) -> Result<FloatMap> {
    let k = gaussian_kernel(sigma, kernel)?;
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("blur input contains non-finite values"));
    }
    Ok(convolve_separable(image, &k))
}

/// Applies the odd 1-D kernel `k` along rows, then columns.
pub fn convolve_separable(image: &FloatMap, k: &[f64]) -> FloatMap {
    let src: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
    let out = blur_f64(&src, image.height, image.width, k);
    FloatMap {
        height: image.height,
        width: image.width,
        data: out.into_iter().map(|v| v as f32).collect(),
    }
}

/// Smoothing applied inside Canny before differentiation.
pub const CANNY_SIGMA: f64 = 1.0;
pub const CANNY_KERNEL: usize = 5;

/// Magnitudes closer than this fraction of the maximum count as ties in
/// non-maximum suppression, so rounding noise cannot pick the winner.
const NMS_TIE: f64 = 1e-9;

/// Sobel gradients with reflected borders.
fn sobel(src: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |y: isize, x: isize| src[reflect(y, h) * w + reflect(x, w)];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// Neighbour offsets `(dy, dx)` along the quantized gradient direction.
pub(crate) fn gradient_direction(gx: f64, gy: f64) -> (isize, isize) {
    let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
    if !(22.5..157.5).contains(&angle) {
        (0, 1)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}

/// Canny edges: Gaussian smoothing (sigma 1, kernel 5), Sobel gradients,
/// non-maximum suppression and hysteresis. `low` and `high` are fractions of
/// the largest gradient magnitude.
pub fn canny(image: &FloatMap, low: f64, high: f64) -> Result<BinaryMask> {
    if !(low < high) {
        return Err(Error::usage(format!(
            "canny thresholds need low < high, got {low} >= {high}"
        )));
    }
    let (h, w) = (image.height, image.width);
    if h == 0 || w == 0 {
        return Ok(BinaryMask::zeros(h, w));
    }
    // Gradients ignore a constant offset; removing it makes that exact.
    let min = image.data.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let src: Vec<f64> = image.data.iter().map(|&v| v as f64 - min).collect();
    let smooth = blur_f64(&src, h, w, &gaussian_kernel(CANNY_SIGMA, CANNY_KERNEL)?);
    let (gx, gy) = sobel(&smooth, h, w);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(BinaryMask::zeros(h, w));
    }
    let tie = NMS_TIE * max;

    let mut thin = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m <= tie {
                continue;
            }
            let (dy, dx) = gradient_direction(gx[i], gy[i]);
            let nb = |sy: isize, sx: isize| {
                let (yy, xx) = (y as isize + sy, x as isize + sx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    0.0
                } else {
                    mag[yy as usize * w + xx as usize]
                }
            };
            let ahead = nb(dy, dx);
            let behind = nb(-dy, -dx);
            // Strictly larger than the pixel ahead, at least as large as the one behind.
            if m > ahead + tie && m >= behind - tie {
                thin[i] = m;
            }
        }
    }

    let (lo, hi) = (low * max, high * max);
    let mut out = vec![0u8; h * w];
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= hi {
            out[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                if out[j] == 0 && thin[j] >= lo {
                    out[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(BinaryMask {
        height: h,
        width: w,
        data: out,
    })
}

/// Band of mask pixels near the mask boundary: Canny edges of the mask,
/// spread by a Gaussian, binarized at `band_threshold`, intersected with the mask.
pub fn build_edge_gt(mask: &BinaryMask, p: &EdgeGtParams) -> Result<BinaryMask> {
    p.validate().map_err(|e| Error::usage(e.to_string()))?;
    let edges = canny(&mask.to_float(), p.canny_low, p.canny_high)?;
    if edges.is_empty() {
        return Ok(BinaryMask::zeros(mask.height, mask.width));
    }
    let spread = blur_f64(
        &edges.data.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        mask.height,
        mask.width,
        &gaussian_kernel(p.sigma, p.kernel)?,
    );
    let data = spread
        .iter()
        .zip(&mask.data)
        .map(|(&s, &g)| (s > p.band_threshold && g == 1) as u8)
        .collect();
    Ok(BinaryMask {
        height: mask.height,
        width: mask.width,
        data,
    })
}

/// Max-pooling with window and stride `factor`.
pub fn downsample_mask(mask: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::usage(format!(
            "downsample factor {factor} is not a power of two"
        )));
    }
    if mask.height % factor != 0 || mask.width % factor != 0 {
        return Err(Error::usage(format!(
            "mask {}x{} is not divisible by {factor}",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    let mut data = vec![0u8; h * w];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.data[y * mask.width + x] != 0 {
                data[(y / factor) * w + x / factor] = 1;
            }
        }
    }
    Ok(BinaryMask {
        height: h,
        width: w,
        data,
    })
}
