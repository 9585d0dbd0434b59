//! Reference-free quality metrics over an 8-bit luma raster.

use heritage_core::config::DrMode;
use heritage_core::Real;

/// Row-major 8-bit luma raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LumaImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// BT.601 luma with integer rounding.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

impl LumaImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "raster size mismatch");
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_rgb(width: usize, height: usize, rgb: &[u8]) -> Self {
        assert_eq!(rgb.len(), width * height * 3, "raster size mismatch");
        let data = rgb.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).collect();
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> i32 {
        self.data[y * self.width + x] as i32
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}

/// Nearest-rank percentile: the smallest value whose cumulative count
/// reaches `ceil(pct/100 * n)`.
pub fn percentile(hist: &[u64; 256], pct: u32) -> u8 {
    let n: u64 = hist.iter().sum();
    if n == 0 {
        return 0;
    }
    let rank = (pct as u64 * n).div_ceil(100).max(1);
    let mut acc = 0;
    for (v, &c) in hist.iter().enumerate() {
        acc += c;
        if acc >= rank {
            return v as u8;
        }
    }
    255
}

pub fn dynamic_range<S: Real>(img: &LumaImage, mode: DrMode) -> S {
    let h = img.histogram();
    let (lo, hi) = match mode {
        DrMode::Percentile => (percentile(&h, 1), percentile(&h, 99)),
        DrMode::Minmax => {
            let lo = h.iter().position(|&c| c > 0).unwrap_or(0);
            let hi = h.iter().rposition(|&c| c > 0).unwrap_or(0);
            (lo as u8, hi as u8)
        }
    };
    S::from_u8(hi - lo).unwrap_or_else(S::zero)
}

/// Noise standard deviation from the absolute response of the
/// [1 -2 1; -2 4 -2; 1 -2 1] operator over interior pixels (Immerkær 1996).
pub fn noise_sigma<S: Real>(img: &LumaImage) -> S {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return S::zero();
    }
    let mut sum: u64 = 0;
    for y in 1..h - 1 {
        let (r0, r1, r2) = ((y - 1) * w, y * w, (y + 1) * w);
        let d = &img.data;
        for x in 1..w - 1 {
            let p = |r: usize, dx: usize| d[r + x + dx - 1] as i32;
            let v = p(r0, 0) - 2 * p(r0, 1) + p(r0, 2) - 2 * p(r1, 0) + 4 * p(r1, 1) - 2 * p(r1, 2) + p(r2, 0) - 2 * p(r2, 1)
                + p(r2, 2);
            sum += v.unsigned_abs() as u64;
        }
    }
    let denom = S::lit(6.0) * S::from_usize_lossy((w - 2) * (h - 2));
    (S::FRAC_PI_2()).sqrt() * S::from_u64(sum).unwrap_or_else(S::zero) / denom
}

pub const CNR_EPSILON: f64 = 1e-6;

/// Percentile spread over estimated noise.
pub fn cnr<S: Real>(img: &LumaImage) -> S {
    let h = img.histogram();
    let spread = S::from_u8(percentile(&h, 99) - percentile(&h, 1)).unwrap_or_else(S::zero);
    spread / (noise_sigma::<S>(img) + S::lit(CNR_EPSILON))
}

/// Population variance of the 4-neighbour Laplacian over interior pixels.
pub fn laplacian_variance<S: Real>(img: &LumaImage) -> S {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return S::zero();
    }
    let mut sum = 0f64;
    let mut sum_sq = 0f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let v = img.at(x - 1, y) + img.at(x + 1, y) + img.at(x, y - 1) + img.at(x, y + 1) - 4 * img.at(x, y);
            sum += v as f64;
            sum_sq += (v * v) as f64;
        }
    }
    let n = ((w - 2) * (h - 2)) as f64;
    let mean = sum / n;
    S::lit((sum_sq / n - mean * mean).max(0.0))
}

#[inline]
pub fn logistic<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}
