//! JPEG marker walk: structure validation, frame size and the EXIF segment.

use crate::IngestError;

pub const SOI: u8 = 0xD8;
pub const EOI: u8 = 0xD9;
pub const SOS: u8 = 0xDA;
pub const APP1: u8 = 0xE1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub marker: u8,
    /// Offset of the 0xFF that opens the marker.
    pub offset: usize,
    /// Payload without marker and length bytes.
    pub payload: std::ops::Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JpegInfo {
    pub width: u32,
    pub height: u32,
    pub components: u8,
    pub progressive: bool,
    pub segments: Vec<Segment>,
    /// Payload of the first APP1 segment carrying `Exif\0\0`.
    pub exif_payload: Option<std::ops::Range<usize>>,
}

pub fn is_jpeg(bytes: &[u8]) -> bool {
    bytes.len() >= 3 && bytes[0] == 0xFF && bytes[1] == SOI && bytes[2] == 0xFF
}

/// Names a few common non-JPEG formats for error messages.
pub fn sniff(bytes: &[u8]) -> &'static str {
    const SIGS: &[(&[u8], &str)] = &[
        (b"\x89PNG\r\n\x1a\n", "png"),
        (b"GIF8", "gif"),
        (b"RIFF", "riff/webp"),
        (b"II*\0", "tiff"),
        (b"MM\0*", "tiff"),
        (b"BM", "bmp"),
    ];
    if bytes.len() >= 12 && &bytes[4..8] == b"ftyp" {
        return "isobmff/heic";
    }
    SIGS.iter()
        .find(|(sig, _)| bytes.starts_with(sig))
        .map(|(_, n)| *n)
        .unwrap_or("unknown")
}

fn is_sof(m: u8) -> bool {
    matches!(m, 0xC0..=0xCF) && !matches!(m, 0xC4 | 0xC8 | 0xCC)
}

fn standalone(m: u8) -> bool {
    matches!(m, 0x01 | 0xD0..=0xD7)
}

fn corrupt(msg: impl Into<String>) -> IngestError {
    IngestError::Corrupt(msg.into())
}

/// Walks the marker structure up to EOI. Entropy-coded data after each SOS
/// is skipped; running out of bytes anywhere is CORRUPT.
pub fn inspect(bytes: &[u8]) -> Result<JpegInfo, IngestError> {
    if !is_jpeg(bytes) {
        return Err(IngestError::UnsupportedFormat(sniff(bytes).to_owned()));
    }
    let mut pos = 2;
    let mut segments = Vec::new();
    let mut frame: Option<(u32, u32, u8, bool)> = None;
    let mut exif_payload = None;
    let mut scans = 0;
    loop {
        if pos >= bytes.len() {
            return Err(corrupt("missing EOI marker"));
        }
        if bytes[pos] != 0xFF {
            return Err(corrupt(format!("expected marker at offset {pos}")));
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos] == 0xFF {
            pos += 1;
        }
        let marker = *bytes.get(pos).ok_or_else(|| corrupt("truncated marker"))?;
        pos += 1;
        if marker == EOI {
            break;
        }
        if marker == SOI {
            return Err(corrupt("nested SOI"));
        }
        if standalone(marker) {
            continue;
        }
        let len_bytes = bytes.get(pos..pos + 2).ok_or_else(|| corrupt("truncated segment length"))?;
        let len = u16::from_be_bytes([len_bytes[0], len_bytes[1]]) as usize;
        if len < 2 {
            return Err(corrupt(format!("segment length {len} at offset {start}")));
        }
        let payload = pos + 2..pos + len;
        if payload.end > bytes.len() {
            return Err(corrupt(format!("segment 0x{marker:02X} overruns the file")));
        }
        let body = &bytes[payload.clone()];
        if is_sof(marker) {
            if body.len() < 6 {
                return Err(corrupt("short frame header"));
            }
            let h = u16::from_be_bytes([body[1], body[2]]) as u32;
            let w = u16::from_be_bytes([body[3], body[4]]) as u32;
            if w == 0 || h == 0 {
                return Err(corrupt("zero frame dimension"));
            }
            frame.get_or_insert((w, h, body[5], matches!(marker, 0xC2 | 0xC6 | 0xCA | 0xCE)));
        }
        if marker == APP1 && exif_payload.is_none() && body.starts_with(crate::exif::EXIF_HEADER) {
            exif_payload = Some(payload.clone());
        }
        segments.push(Segment { marker, offset: start, payload: payload.clone() });
        pos = payload.end;
        if marker == SOS {
            if frame.is_none() {
                return Err(corrupt("scan before frame header"));
            }
            scans += 1;
            // skip entropy-coded data: stuffed 0xFF00 and restart markers stay inside
            loop {
                let Some(&b) = bytes.get(pos) else {
                    return Err(corrupt("truncated scan data"));
                };
                if b != 0xFF {
                    pos += 1;
                    continue;
                }
                let Some(&next) = bytes.get(pos + 1) else {
                    return Err(corrupt("truncated scan data"));
                };
                if next == 0x00 || (0xD0..=0xD7).contains(&next) || next == 0xFF {
                    pos += if next == 0xFF { 1 } else { 2 };
                    continue;
                }
                break;
            }
        }
    }
    let (width, height, components, progressive) = frame.ok_or_else(|| corrupt("no frame header"))?;
    if scans == 0 {
        return Err(corrupt("no scan data"));
    }
    Ok(JpegInfo {
        width,
        height,
        components,
        progressive,
        segments,
        exif_payload,
    })
}

/// Inserts an APP1 segment right after SOI.
pub fn splice_app1(jpeg: &[u8], payload: &[u8]) -> Vec<u8> {
    assert!(payload.len() + 2 <= u16::MAX as usize, "APP1 payload too large");
    let mut out = Vec::with_capacity(jpeg.len() + payload.len() + 4);
    out.extend_from_slice(&jpeg[..2]);
    out.extend_from_slice(&[0xFF, APP1]);
    out.extend_from_slice(&((payload.len() + 2) as u16).to_be_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&jpeg[2..]);
    out
}
