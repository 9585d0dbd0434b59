use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::ExtendedColorType;

/// 8-bit RGB or RGBA raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct TextureImage {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub pixels: Vec<u8>,
}

impl std::fmt::Debug for TextureImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TextureImage({}x{}x{})", self.width, self.height, self.channels)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TextureError {
    #[error("texture decode failed: {0}")]
    Decode(String),
    #[error("texture encode failed: {0}")]
    Encode(String),
}

impl TextureImage {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Self {
        assert!(channels == 3 || channels == 4, "RGB or RGBA only");
        assert_eq!(pixels.len(), (width * height * channels as u32) as usize, "raster size mismatch");
        Self { width, height, channels, pixels }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity((width * height * 3) as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, 3, pixels)
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self, TextureError> {
        let img = image::load_from_memory(bytes).map_err(|e| TextureError::Decode(e.to_string()))?;
        Ok(if img.color().has_alpha() {
            let rgba = img.to_rgba8();
            Self::new(rgba.width(), rgba.height(), 4, rgba.into_raw())
        } else {
            let rgb = img.to_rgb8();
            Self::new(rgb.width(), rgb.height(), 3, rgb.into_raw())
        })
    }

    fn rgb(&self) -> Vec<u8> {
        if self.channels == 3 {
            self.pixels.clone()
        } else {
            self.pixels.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
        }
    }

    /// Baseline JPEG; alpha is dropped.
    pub fn to_jpeg(&self, quality: u8) -> Result<Vec<u8>, TextureError> {
        let mut out = Vec::new();
        JpegEncoder::new_with_quality(&mut out, quality)
            .encode(&self.rgb(), self.width, self.height, ExtendedColorType::Rgb8)
            .map_err(|e| TextureError::Encode(e.to_string()))?;
        Ok(out)
    }

    pub fn to_png(&self) -> Result<Vec<u8>, TextureError> {
        let mut out = Vec::new();
        let res = if self.channels == 3 {
            image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
                .expect("sized")
                .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        } else {
            image::RgbaImage::from_raw(self.width, self.height, self.pixels.clone())
                .expect("sized")
                .write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)
        };
        res.map_err(|e| TextureError::Encode(e.to_string()))?;
        Ok(out)
    }

    /// One 2×2 box-filter step; a side of 1 stays 1.
    pub fn halve(&self) -> Self {
        let (w, h, c) = (self.width as usize, self.height as usize, self.channels as usize);
        let (nw, nh) = ((w / 2).max(1), (h / 2).max(1));
        let mut out = Vec::with_capacity(nw * nh * c);
        for y in 0..nh {
            let ys = [(2 * y).min(h - 1), (2 * y + 1).min(h - 1)];
            for x in 0..nw {
                let xs = [(2 * x).min(w - 1), (2 * x + 1).min(w - 1)];
                for ch in 0..c {
                    let mut s = 0u32;
                    for yy in ys {
                        for xx in xs {
                            s += self.pixels[(yy * w + xx) * c + ch] as u32;
                        }
                    }
                    out.push(((s + 2) / 4) as u8);
                }
            }
        }
        Self::new(nw as u32, nh as u32, self.channels, out)
    }
}

/// Halves until the longer side fits `max_side`.
pub fn downsample_texture(tex: &TextureImage, max_side: u32) -> TextureImage {
    let mut t = tex.clone();
    while t.width.max(t.height) > max_side.max(1) {
        t = t.halve();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(w: u32, h: u32) -> TextureImage {
        TextureImage::from_fn(w, h, |x, y| {
            let v = (x.wrapping_mul(2654435761) ^ y.wrapping_mul(40503)) as u8;
            [v, v / 2, 255 - v]
        })
    }

    #[test]
    fn box_filter_definition() {
        let t = noise(8, 8);
        let d = downsample_texture(&t, 4);
        assert_eq!((d.width, d.height), (4, 4));
        for y in 0..4usize {
            for x in 0..4usize {
                for c in 0..3 {
                    let p = |xx: usize, yy: usize| t.pixels[(yy * 8 + xx) * 3 + c] as f64;
                    let mean = (p(2 * x, 2 * y) + p(2 * x + 1, 2 * y) + p(2 * x, 2 * y + 1) + p(2 * x + 1, 2 * y + 1)) / 4.0;
                    let got = d.pixels[(y * 4 + x) * 3 + c] as f64;
                    assert!((got - mean).abs() <= 0.5, "{got} vs {mean}");
                }
            }
        }
    }

    #[test]
    fn sizes() {
        assert_eq!(downsample_texture(&noise(64, 16), 32).width, 32);
        assert_eq!(downsample_texture(&noise(64, 16), 32).height, 8);
        let same = noise(16, 16);
        assert_eq!(downsample_texture(&same, 2048), same);
        let tall = downsample_texture(&noise(2, 64), 8);
        assert_eq!((tall.width, tall.height), (1, 8));
    }

    #[test]
    fn codecs_round_trip_size() {
        let t = noise(32, 16);
        let back = TextureImage::decode(&t.to_jpeg(90).unwrap()).unwrap();
        assert_eq!((back.width, back.height, back.channels), (32, 16, 3));
        assert_eq!(TextureImage::decode(&t.to_png().unwrap()).unwrap(), t);
    }
}
