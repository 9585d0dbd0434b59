//! Minimal EXIF reader for the APP1 `Exif\0\0` payload.
//!
//! Only the tags used for validation are decoded; the TIFF block is kept
//! verbatim so nothing else is lost.

use std::collections::BTreeMap;

pub const EXIF_HEADER: &[u8; 6] = b"Exif\0\0";

pub const TAG_MAKE: u16 = 0x010f;
pub const TAG_MODEL: u16 = 0x0110;
pub const TAG_ORIENTATION: u16 = 0x0112;
pub const TAG_DATETIME: u16 = 0x0132;
pub const TAG_EXIF_IFD: u16 = 0x8769;
pub const TAG_DATETIME_ORIGINAL: u16 = 0x9003;

const TYPE_ASCII: u16 = 2;
const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u16(self, b: &[u8]) -> u16 {
        match self {
            ByteOrder::Little => u16::from_le_bytes([b[0], b[1]]),
            ByteOrder::Big => u16::from_be_bytes([b[0], b[1]]),
        }
    }

    fn u32(self, b: &[u8]) -> u32 {
        match self {
            ByteOrder::Little => u32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            ByteOrder::Big => u32::from_be_bytes([b[0], b[1], b[2], b[3]]),
        }
    }

    fn put_u16(self, out: &mut Vec<u8>, v: u16) {
        match self {
            ByteOrder::Little => out.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }

    fn put_u32(self, out: &mut Vec<u8>, v: u32) {
        match self {
            ByteOrder::Little => out.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exif {
    pub byte_order: ByteOrder,
    pub make: Option<String>,
    pub model: Option<String>,
    pub orientation: Option<u16>,
    pub datetime: Option<String>,
    pub datetime_original: Option<String>,
    /// TIFF structure as found in the file.
    pub raw: Vec<u8>,
}

impl Exif {
    /// Decoded tags as a flat key-value block.
    pub fn fields(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        if let Some(v) = &self.make {
            m.insert("Make", v.clone());
        }
        if let Some(v) = &self.model {
            m.insert("Model", v.clone());
        }
        if let Some(v) = self.orientation {
            m.insert("Orientation", v.to_string());
        }
        if let Some(v) = &self.datetime {
            m.insert("DateTime", v.clone());
        }
        if let Some(v) = &self.datetime_original {
            m.insert("DateTimeOriginal", v.clone());
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExifError {
    #[error("missing Exif header")]
    NoHeader,
    #[error("bad TIFF byte-order mark")]
    ByteOrder,
    #[error("TIFF structure truncated at offset {0}")]
    Truncated(usize),
}

struct Entry {
    tag: u16,
    typ: u16,
    count: u32,
    value: [u8; 4],
}

fn read_ifd(tiff: &[u8], bo: ByteOrder, offset: usize) -> Result<Vec<Entry>, ExifError> {
    let n = tiff.get(offset..offset + 2).ok_or(ExifError::Truncated(offset))?;
    let n = bo.u16(n) as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let at = offset + 2 + 12 * i;
        let e = tiff.get(at..at + 12).ok_or(ExifError::Truncated(at))?;
        out.push(Entry {
            tag: bo.u16(&e[0..2]),
            typ: bo.u16(&e[2..4]),
            count: bo.u32(&e[4..8]),
            value: [e[8], e[9], e[10], e[11]],
        });
    }
    Ok(out)
}

fn ascii(tiff: &[u8], bo: ByteOrder, e: &Entry) -> Option<String> {
    if e.typ != TYPE_ASCII {
        return None;
    }
    let len = e.count as usize;
    let bytes = if len <= 4 {
        &e.value[..len]
    } else {
        let off = bo.u32(&e.value) as usize;
        tiff.get(off..off.checked_add(len)?)?
    };
    let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
    Some(String::from_utf8_lossy(&bytes[..end]).trim_end().to_owned())
}

fn short(bo: ByteOrder, e: &Entry) -> Option<u16> {
    match e.typ {
        TYPE_SHORT => Some(bo.u16(&e.value[..2])),
        TYPE_LONG => u16::try_from(bo.u32(&e.value)).ok(),
        _ => None,
    }
}

/// Parses an APP1 payload (starting with `Exif\0\0`).
pub fn parse_app1(payload: &[u8]) -> Result<Exif, ExifError> {
    let tiff = payload.strip_prefix(EXIF_HEADER.as_slice()).ok_or(ExifError::NoHeader)?;
    parse_tiff(tiff)
}

pub fn parse_tiff(tiff: &[u8]) -> Result<Exif, ExifError> {
    if tiff.len() < 8 {
        return Err(ExifError::Truncated(tiff.len()));
    }
    let bo = match &tiff[0..2] {
        b"II" => ByteOrder::Little,
        b"MM" => ByteOrder::Big,
        _ => return Err(ExifError::ByteOrder),
    };
    if bo.u16(&tiff[2..4]) != 42 {
        return Err(ExifError::ByteOrder);
    }
    let ifd0 = bo.u32(&tiff[4..8]) as usize;
    let mut exif = Exif {
        byte_order: bo,
        make: None,
        model: None,
        orientation: None,
        datetime: None,
        datetime_original: None,
        raw: tiff.to_vec(),
    };
    let mut sub = None;
    for e in read_ifd(tiff, bo, ifd0)? {
        match e.tag {
            TAG_MAKE => exif.make = ascii(tiff, bo, &e),
            TAG_MODEL => exif.model = ascii(tiff, bo, &e),
            TAG_ORIENTATION => exif.orientation = short(bo, &e),
            TAG_DATETIME => exif.datetime = ascii(tiff, bo, &e),
            TAG_EXIF_IFD => sub = Some(bo.u32(&e.value) as usize),
            _ => {}
        }
    }
    if let Some(off) = sub {
        // a broken sub-IFD pointer leaves the IFD0 tags usable
        if let Ok(entries) = read_ifd(tiff, bo, off) {
            for e in entries {
                if e.tag == TAG_DATETIME_ORIGINAL {
                    exif.datetime_original = ascii(tiff, bo, &e);
                }
            }
        }
    }
    Ok(exif)
}

/// Tags to serialize with [`build_app1`].
#[derive(Debug, Clone, Default)]
pub struct ExifTags<'a> {
    pub make: Option<&'a str>,
    pub model: Option<&'a str>,
    pub orientation: Option<u16>,
    pub datetime: Option<&'a str>,
    pub datetime_original: Option<&'a str>,
}

/// Serializes tags into an APP1 payload, `Exif\0\0` included.
pub fn build_app1(tags: &ExifTags<'_>, bo: ByteOrder) -> Vec<u8> {
    enum V {
        Ascii(Vec<u8>),
        Short(u16),
        Long,
    }
    let z = |s: &str| {
        let mut v = s.as_bytes().to_vec();
        v.push(0);
        V::Ascii(v)
    };
    let mut ifd0: Vec<(u16, V)> = Vec::new();
    if let Some(s) = tags.make {
        ifd0.push((TAG_MAKE, z(s)));
    }
    if let Some(s) = tags.model {
        ifd0.push((TAG_MODEL, z(s)));
    }
    if let Some(o) = tags.orientation {
        ifd0.push((TAG_ORIENTATION, V::Short(o)));
    }
    if let Some(s) = tags.datetime {
        ifd0.push((TAG_DATETIME, z(s)));
    }
    let sub: Vec<(u16, V)> = tags.datetime_original.map(|s| vec![(TAG_DATETIME_ORIGINAL, z(s))]).unwrap_or_default();
    if !sub.is_empty() {
        ifd0.push((TAG_EXIF_IFD, V::Long));
    }

    let ifd_len = |n: usize| 2 + 12 * n + 4;
    let ifd0_at = 8usize;
    let sub_at = ifd0_at + ifd_len(ifd0.len());
    let mut data_at = sub_at + if sub.is_empty() { 0 } else { ifd_len(sub.len()) };

    let mut out = Vec::new();
    out.extend_from_slice(match bo {
        ByteOrder::Little => b"II",
        ByteOrder::Big => b"MM",
    });
    bo.put_u16(&mut out, 42);
    bo.put_u32(&mut out, ifd0_at as u32);
    let mut data = Vec::new();
    let mut write_ifd = |out: &mut Vec<u8>, entries: &[(u16, V)], data: &mut Vec<u8>| {
        bo.put_u16(out, entries.len() as u16);
        for (tag, v) in entries {
            bo.put_u16(out, *tag);
            match v {
                V::Ascii(bytes) => {
                    bo.put_u16(out, TYPE_ASCII);
                    bo.put_u32(out, bytes.len() as u32);
                    if bytes.len() <= 4 {
                        let mut pad = bytes.clone();
                        pad.resize(4, 0);
                        out.extend_from_slice(&pad);
                    } else {
                        bo.put_u32(out, data_at as u32);
                        data.extend_from_slice(bytes);
                        data_at += bytes.len();
                        if bytes.len() % 2 == 1 {
                            data.push(0);
                            data_at += 1;
                        }
                    }
                }
                V::Short(s) => {
                    bo.put_u16(out, TYPE_SHORT);
                    bo.put_u32(out, 1);
                    bo.put_u16(out, *s);
                    bo.put_u16(out, 0);
                }
                V::Long => {
                    bo.put_u16(out, TYPE_LONG);
                    bo.put_u32(out, 1);
                    bo.put_u32(out, sub_at as u32);
                }
            }
        }
        bo.put_u32(out, 0);
    };
    write_ifd(&mut out, &ifd0, &mut data);
    if !sub.is_empty() {
        write_ifd(&mut out, &sub, &mut data);
    }
    out.extend_from_slice(&data);

    let mut app1 = EXIF_HEADER.to_vec();
    app1.extend_from_slice(&out);
    app1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags() -> ExifTags<'static> {
        ExifTags {
            make: Some("Canon"),
            model: Some("EOS 5D Mark IV"),
            orientation: Some(6),
            datetime: Some("2023:02:11 10:14:03"),
            datetime_original: Some("2023:02:11 10:14:01"),
        }
    }

    #[test]
    fn round_trips_both_byte_orders() {
        for bo in [ByteOrder::Little, ByteOrder::Big] {
            let e = parse_app1(&build_app1(&tags(), bo)).unwrap();
            assert_eq!(e.byte_order, bo);
            assert_eq!(e.make.as_deref(), Some("Canon"));
            assert_eq!(e.model.as_deref(), Some("EOS 5D Mark IV"));
            assert_eq!(e.orientation, Some(6));
            assert_eq!(e.datetime.as_deref(), Some("2023:02:11 10:14:03"));
            assert_eq!(e.datetime_original.as_deref(), Some("2023:02:11 10:14:01"));
            assert_eq!(e.fields().len(), 5);
        }
    }

    #[test]
    fn hand_assembled_big_endian_block() {
        // MM, 42, IFD0 at 8: one entry, Orientation SHORT 1 = 3
        let tiff = [
            b'M', b'M', 0, 42, 0, 0, 0, 8, //
            0, 1, //
            0x01, 0x12, 0, 3, 0, 0, 0, 1, 0, 3, 0, 0, //
            0, 0, 0, 0,
        ];
        let e = parse_tiff(&tiff).unwrap();
        assert_eq!(e.orientation, Some(3));
        assert_eq!(e.make, None);
    }

    #[test]
    fn short_ascii_is_inline() {
        let e = parse_app1(&build_app1(&ExifTags { make: Some("Sny"), ..Default::default() }, ByteOrder::Little)).unwrap();
        assert_eq!(e.make.as_deref(), Some("Sny"));
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(parse_app1(b"JFIF\0\0"), Err(ExifError::NoHeader));
        assert_eq!(parse_tiff(b"XX\0*\0\0\0\x08"), Err(ExifError::ByteOrder));
        assert!(matches!(parse_tiff(b"II*\0\xff\0\0\0"), Err(ExifError::Truncated(_))));
    }
}
