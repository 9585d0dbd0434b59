//! Seeded test rasters in three quality classes, encoded as EXIF-bearing
//! JPEGs. Scenes are sums of horizontal and vertical structure, which the
//! separable noise operator does not see, so the measured noise is the
//! noise that was added.

use image::codecs::jpeg::JpegEncoder;
use image::ExtendedColorType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::exif::{build_app1, ByteOrder, ExifTags};
use crate::jpeg::splice_app1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Clean,
    LowDynamicRange,
    Noisy,
}

struct Profile {
    levels: Vec<f64>,
    bounds: Vec<usize>,
    texture: f64,
    phase: usize,
}

impl Profile {
    fn new(rng: &mut ChaCha8Rng, len: usize) -> Self {
        let mut bounds = vec![0];
        while *bounds.last().unwrap() < len {
            let step = rng.gen_range(len / 24 + 4..len / 6 + 8);
            bounds.push((bounds.last().unwrap() + step).min(len));
        }
        let levels = (0..bounds.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
        Self {
            levels,
            bounds,
            texture: rng.gen_range(0.06..0.1),
            phase: rng.gen_range(0..4),
        }
    }

    fn at(&self, i: usize) -> f64 {
        let band = self.bounds.partition_point(|&b| b <= i).saturating_sub(1);
        let fine = [0.0, 1.0, 0.0, -1.0][(i + self.phase) % 4];
        self.levels[band] + self.texture * fine
    }
}

/// RGB raster, row-major.
pub fn raster(kind: Kind, seed: u64, width: usize, height: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a9e);
    let px = Profile::new(&mut rng, width);
    let py = Profile::new(&mut rng, height);
    let tint = [rng.gen_range(-12.0..12.0), 0.0, rng.gen_range(-12.0..12.0)];
    let (lo, span, sigma) = match kind {
        Kind::Clean => (18.0, 110.0, 1.0),
        Kind::LowDynamicRange => (105.0, 28.0, 1.0),
        Kind::Noisy => (18.0, 110.0, 28.0),
    };
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let mut out = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let vy = py.at(y);
        for x in 0..width {
            let l = lo + span * (px.at(x) + vy);
            let n = noise.sample(&mut rng);
            for t in tint {
                out.push((l + t + n).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn default_tags(seed: u64) -> ExifTags<'static> {
    ExifTags {
        make: Some("Synthetic"),
        model: Some("Raster Camera"),
        orientation: Some(1),
        datetime: Some("2023:02:11 10:14:03"),
        datetime_original: Some(if seed % 2 == 0 { "2023:02:11 10:14:01" } else { "2023:02:11 10:15:42" }),
    }
}

pub fn encode_jpeg(rgb: &[u8], width: u32, height: u32, quality: u8, tags: Option<&ExifTags<'_>>) -> Vec<u8> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode(rgb, width, height, ExtendedColorType::Rgb8)
        .expect("in-memory JPEG encode");
    match tags {
        Some(t) => splice_app1(&buf, &build_app1(t, ByteOrder::Little)),
        None => buf,
    }
}

/// One corpus member as JPEG bytes (quality 92, EXIF attached).
pub fn jpeg(kind: Kind, seed: u64, width: u32, height: u32) -> Vec<u8> {
    let rgb = raster(kind, seed, width as usize, height as usize);
    encode_jpeg(&rgb, width, height, 92, Some(&default_tags(seed)))
}
