//! glTF 2.0 binary container, written and read by hand.
//!
//! Layout: 12-byte header, JSON chunk padded with spaces, BIN chunk padded
//! with zeros. Quantized output follows KHR_mesh_quantization: positions as
//! normalized u16 against the bounds (dequantized by the node transform),
//! normals as normalized i8, UVs as normalized u16.

use heritage_core::Real;
use serde_json::{json, Value};

use crate::mesh::TriangleMesh;
use crate::texture::TextureImage;

pub const MAGIC: u32 = 0x4654_6C67;
pub const VERSION: u32 = 2;
pub const CHUNK_JSON: u32 = 0x4E4F_534A;
pub const CHUNK_BIN: u32 = 0x004E_4942;

const FLOAT: u32 = 5126;
const UNSIGNED_SHORT: u32 = 5123;
const UNSIGNED_INT: u32 = 5125;
const BYTE: u32 = 5120;
const ARRAY_BUFFER: u32 = 34962;
const ELEMENT_ARRAY_BUFFER: u32 = 34963;
const Q16: f64 = 65535.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlbOptions {
    pub quantize: bool,
    pub jpeg_quality: u8,
}

impl Default for GlbOptions {
    fn default() -> Self {
        Self {
            quantize: true,
            jpeg_quality: 85,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GlbError {
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("invalid mesh: {0}")]
    Invalid(#[from] crate::mesh::MeshError),
    #[error("texture: {0}")]
    Texture(#[from] crate::texture::TextureError),
    #[error("malformed container: {0}")]
    Malformed(String),
}

impl GlbError {
    pub fn code(&self) -> &'static str {
        match self {
            GlbError::EmptyMesh => "EMPTY_MESH",
            GlbError::Invalid(_) => "INVALID_MESH",
            GlbError::Texture(_) => "TEXTURE",
            GlbError::Malformed(_) => "MALFORMED_GLB",
        }
    }
}

struct Bin {
    data: Vec<u8>,
    views: Vec<Value>,
}

impl Bin {
    fn view(&mut self, bytes: &[u8], stride: Option<usize>, target: Option<u32>) -> usize {
        while self.data.len() % 4 != 0 {
            self.data.push(0);
        }
        let mut v = json!({"buffer": 0, "byteOffset": self.data.len(), "byteLength": bytes.len()});
        if let Some(s) = stride {
            v["byteStride"] = json!(s);
        }
        if let Some(t) = target {
            v["target"] = json!(t);
        }
        self.data.extend_from_slice(bytes);
        self.views.push(v);
        self.views.len() - 1
    }
}

fn f32_bytes(vals: impl Iterator<Item = f32>) -> Vec<u8> {
    vals.flat_map(f32::to_le_bytes).collect()
}

/// Quantizes `x` in `[lo, lo+ext]` to 0..=65535, rounding to nearest.
#[inline]
pub fn quantize_u16(x: f64, lo: f64, ext: f64) -> u16 {
    if ext <= 0.0 {
        return 0;
    }
    ((x - lo) / ext * Q16).round().clamp(0.0, Q16) as u16
}

#[inline]
fn snorm8(x: f64) -> i8 {
    (x.clamp(-1.0, 1.0) * 127.0).round() as i8
}

pub fn write_glb<S: Real>(mesh: &TriangleMesh<S>, opts: &GlbOptions) -> Result<Vec<u8>, GlbError> {
    if mesh.is_empty() {
        return Err(GlbError::EmptyMesh);
    }
    mesh.validate()?;
    let n = mesh.vertex_count();
    let pos: Vec<[f64; 3]> = mesh.positions.iter().map(|p| p.map(|c| c.to_f64_lossy())).collect();
    let mut lo = pos[0];
    let mut hi = pos[0];
    for p in &pos {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let ext: [f64; 3] = std::array::from_fn(|a| hi[a] - lo[a]);
    let normals = mesh.vertex_normals();

    let mut bin = Bin { data: Vec::new(), views: Vec::new() };
    let mut accessors = Vec::new();
    let mut attributes = serde_json::Map::new();
    let mut node = json!({"mesh": 0});
    let mut extensions: Vec<&str> = Vec::new();

    if opts.quantize {
        extensions.push("KHR_mesh_quantization");
        let mut buf = Vec::with_capacity(n * 8);
        let mut qmin = [u16::MAX; 3];
        let mut qmax = [0u16; 3];
        for p in &pos {
            for a in 0..3 {
                let q = quantize_u16(p[a], lo[a], ext[a]);
                qmin[a] = qmin[a].min(q);
                qmax[a] = qmax[a].max(q);
                buf.extend_from_slice(&q.to_le_bytes());
            }
            buf.extend_from_slice(&[0, 0]);
        }
        let v = bin.view(&buf, Some(8), Some(ARRAY_BUFFER));
        accessors.push(json!({
            "bufferView": v, "componentType": UNSIGNED_SHORT, "normalized": true, "count": n, "type": "VEC3",
            "min": qmin.map(|q| q as f64 / Q16), "max": qmax.map(|q| q as f64 / Q16),
        }));
        node["translation"] = json!(lo);
        node["scale"] = json!(ext.map(|e| if e > 0.0 { e } else { 1.0 }));

        let mut nb = Vec::with_capacity(n * 4);
        for nm in &normals {
            for c in nm {
                nb.push(snorm8(c.to_f64_lossy()) as u8);
            }
            nb.push(0);
        }
        let v = bin.view(&nb, Some(4), Some(ARRAY_BUFFER));
        accessors.push(json!({"bufferView": v, "componentType": BYTE, "normalized": true, "count": n, "type": "VEC3"}));
    } else {
        let v = bin.view(&f32_bytes(pos.iter().flat_map(|p| p.map(|c| c as f32))), None, Some(ARRAY_BUFFER));
        let fmin: [f32; 3] = lo.map(|c| c as f32);
        let fmax: [f32; 3] = hi.map(|c| c as f32);
        accessors.push(json!({
            "bufferView": v, "componentType": FLOAT, "count": n, "type": "VEC3", "min": fmin, "max": fmax,
        }));
        let v = bin.view(
            &f32_bytes(normals.iter().flat_map(|p| p.map(|c| c.to_f64_lossy() as f32))),
            None,
            Some(ARRAY_BUFFER),
        );
        accessors.push(json!({"bufferView": v, "componentType": FLOAT, "count": n, "type": "VEC3"}));
    }
    attributes.insert("POSITION".into(), json!(0));
    attributes.insert("NORMAL".into(), json!(1));

    if let Some(uvs) = &mesh.uvs {
        let acc = if opts.quantize {
            let mut buf = Vec::with_capacity(n * 4);
            for t in uvs {
                for c in t {
                    buf.extend_from_slice(&quantize_u16(c.to_f64_lossy().clamp(0.0, 1.0), 0.0, 1.0).to_le_bytes());
                }
            }
            let v = bin.view(&buf, Some(4), Some(ARRAY_BUFFER));
            json!({"bufferView": v, "componentType": UNSIGNED_SHORT, "normalized": true, "count": n, "type": "VEC2"})
        } else {
            let v = bin.view(&f32_bytes(uvs.iter().flat_map(|t| t.map(|c| c.to_f64_lossy() as f32))), None, Some(ARRAY_BUFFER));
            json!({"bufferView": v, "componentType": FLOAT, "count": n, "type": "VEC2"})
        };
        accessors.push(acc);
        attributes.insert("TEXCOORD_0".into(), json!(accessors.len() - 1));
    }

    let (ibytes, itype): (Vec<u8>, u32) = if n <= 65535 {
        (mesh.indices.iter().flat_map(|&i| (i as u16).to_le_bytes()).collect(), UNSIGNED_SHORT)
    } else {
        (mesh.indices.iter().flat_map(|&i| i.to_le_bytes()).collect(), UNSIGNED_INT)
    };
    let v = bin.view(&ibytes, None, Some(ELEMENT_ARRAY_BUFFER));
    accessors.push(json!({"bufferView": v, "componentType": itype, "count": mesh.indices.len(), "type": "SCALAR"}));
    let indices_acc = accessors.len() - 1;

    let mut primitive = json!({"attributes": attributes, "indices": indices_acc, "mode": 4});
    let mut doc = json!({
        "asset": {"version": "2.0", "generator": "heritage-mesh"},
        "scene": 0,
        "scenes": [{"nodes": [0]}],
    });
    if let (Some(tex), true) = (&mesh.texture, mesh.uvs.is_some()) {
        let jpeg = tex.to_jpeg(opts.jpeg_quality)?;
        let v = bin.view(&jpeg, None, None);
        doc["images"] = json!([{"bufferView": v, "mimeType": "image/jpeg"}]);
        doc["samplers"] = json!([{"magFilter": 9729, "minFilter": 9987, "wrapS": 33071, "wrapT": 33071}]);
        doc["textures"] = json!([{"sampler": 0, "source": 0}]);
        doc["materials"] = json!([{
            "pbrMetallicRoughness": {"baseColorTexture": {"index": 0}, "metallicFactor": 0.0, "roughnessFactor": 1.0},
            "doubleSided": true,
        }]);
        primitive["material"] = json!(0);
    }
    while bin.data.len() % 4 != 0 {
        bin.data.push(0);
    }
    doc["nodes"] = json!([node]);
    doc["meshes"] = json!([{"primitives": [primitive]}]);
    doc["accessors"] = Value::Array(accessors);
    doc["bufferViews"] = Value::Array(bin.views);
    doc["buffers"] = json!([{"byteLength": bin.data.len()}]);
    if !extensions.is_empty() {
        doc["extensionsUsed"] = json!(extensions);
        doc["extensionsRequired"] = json!(extensions);
    }

    let mut text = serde_json::to_vec(&doc).expect("JSON encode");
    while text.len() % 4 != 0 {
        text.push(b' ');
    }
    let total = 12 + 8 + text.len() + 8 + bin.data.len();
    let mut out = Vec::with_capacity(total);
    for w in [MAGIC, VERSION, total as u32, text.len() as u32, CHUNK_JSON] {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&text);
    out.extend_from_slice(&(bin.data.len() as u32).to_le_bytes());
    out.extend_from_slice(&CHUNK_BIN.to_le_bytes());
    out.extend_from_slice(&bin.data);
    Ok(out)
}

/// Parsed container with dequantized geometry.
#[derive(Debug, Clone)]
pub struct GlbContents {
    pub json: Value,
    pub json_chunk_len: usize,
    pub bin_chunk_len: usize,
    pub primitives: usize,
    pub positions: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    pub uvs: Option<Vec<[f64; 2]>>,
    pub indices: Vec<u32>,
    pub index_width: usize,
    pub texture_jpeg: Option<Vec<u8>>,
}

impl GlbContents {
    pub fn to_mesh(&self) -> Result<TriangleMesh<f32>, GlbError> {
        let texture = match &self.texture_jpeg {
            Some(j) => Some(TextureImage::decode(j)?),
            None => None,
        };
        Ok(TriangleMesh {
            positions: self.positions.iter().map(|p| p.map(|c| c as f32)).collect(),
            uvs: self.uvs.as_ref().map(|u| u.iter().map(|t| t.map(|c| c as f32)).collect()),
            indices: self.indices.clone(),
            texture,
        })
    }
}

fn malformed(m: impl Into<String>) -> GlbError {
    GlbError::Malformed(m.into())
}

fn u32_at(b: &[u8], at: usize) -> Result<u32, GlbError> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| malformed(format!("truncated at {at}")))
}

fn uint(v: &Value, key: &str) -> Result<usize, GlbError> {
    v.get(key).and_then(Value::as_u64).map(|x| x as usize).ok_or_else(|| malformed(format!("missing {key}")))
}

fn component_size(ct: u32) -> Result<usize, GlbError> {
    Ok(match ct {
        5120 | 5121 => 1,
        5122 | 5123 => 2,
        5125 | 5126 => 4,
        _ => return Err(malformed(format!("component type {ct}"))),
    })
}

fn read_component(b: &[u8], ct: u32, normalized: bool) -> f64 {
    match ct {
        5120 => {
            let v = b[0] as i8 as f64;
            if normalized { (v / 127.0).max(-1.0) } else { v }
        }
        5121 => b[0] as f64 / if normalized { 255.0 } else { 1.0 },
        5122 => {
            let v = i16::from_le_bytes([b[0], b[1]]) as f64;
            if normalized { (v / 32767.0).max(-1.0) } else { v }
        }
        5123 => u16::from_le_bytes([b[0], b[1]]) as f64 / if normalized { Q16 } else { 1.0 },
        5125 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        _ => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
    }
}

fn read_accessor(doc: &Value, bin: &[u8], idx: usize) -> Result<(Vec<f64>, usize), GlbError> {
    let acc = doc["accessors"].get(idx).ok_or_else(|| malformed(format!("accessor {idx}")))?;
    let view = &doc["bufferViews"][uint(acc, "bufferView")?];
    let ct = uint(acc, "componentType")? as u32;
    let count = uint(acc, "count")?;
    let comps = match acc["type"].as_str() {
        Some("SCALAR") => 1,
        Some("VEC2") => 2,
        Some("VEC3") => 3,
        Some("VEC4") => 4,
        t => return Err(malformed(format!("accessor type {t:?}"))),
    };
    let normalized = acc["normalized"].as_bool().unwrap_or(false);
    let cs = component_size(ct)?;
    let stride = view.get("byteStride").and_then(Value::as_u64).map(|s| s as usize).unwrap_or(cs * comps);
    let base = view.get("byteOffset").and_then(Value::as_u64).unwrap_or(0) as usize
        + acc.get("byteOffset").and_then(Value::as_u64).unwrap_or(0) as usize;
    let len = uint(view, "byteLength")?;
    if count > 0 && stride * (count - 1) + cs * comps > len {
        return Err(malformed(format!("accessor {idx} overruns its view")));
    }
    if base + len > bin.len() {
        return Err(malformed(format!("view of accessor {idx} overruns the buffer")));
    }
    let mut out = Vec::with_capacity(count * comps);
    for i in 0..count {
        for c in 0..comps {
            let at = base + i * stride + c * cs;
            out.push(read_component(&bin[at..at + cs], ct, normalized));
        }
    }
    Ok((out, cs))
}

pub fn read_glb(bytes: &[u8]) -> Result<GlbContents, GlbError> {
    if u32_at(bytes, 0)? != MAGIC {
        return Err(malformed("bad magic"));
    }
    if u32_at(bytes, 4)? != VERSION {
        return Err(malformed("unsupported version"));
    }
    let total = u32_at(bytes, 8)? as usize;
    if total != bytes.len() {
        return Err(malformed(format!("length field {total} != {} bytes", bytes.len())));
    }
    let jlen = u32_at(bytes, 12)? as usize;
    if u32_at(bytes, 16)? != CHUNK_JSON || jlen % 4 != 0 {
        return Err(malformed("first chunk must be 4-aligned JSON"));
    }
    let jtext = bytes.get(20..20 + jlen).ok_or_else(|| malformed("truncated JSON chunk"))?;
    let doc: Value = serde_json::from_slice(jtext).map_err(|e| malformed(e.to_string()))?;
    let bstart = 20 + jlen;
    let (bin, blen) = if bstart < bytes.len() {
        let blen = u32_at(bytes, bstart)? as usize;
        if u32_at(bytes, bstart + 4)? != CHUNK_BIN || blen % 4 != 0 {
            return Err(malformed("second chunk must be 4-aligned BIN"));
        }
        let b = bytes.get(bstart + 8..bstart + 8 + blen).ok_or_else(|| malformed("truncated BIN chunk"))?;
        if bstart + 8 + blen != bytes.len() {
            return Err(malformed("trailing bytes after BIN chunk"));
        }
        (b, blen)
    } else {
        (&[][..], 0)
    };

    let prims = doc["meshes"][0]["primitives"].as_array().ok_or_else(|| malformed("no primitives"))?;
    let prim = &prims[0];
    let attrs = &prim["attributes"];
    let (raw_pos, _) = read_accessor(&doc, bin, uint(attrs, "POSITION")?)?;
    let node = doc["nodes"].get(0).cloned().unwrap_or(Value::Null);
    let vec3 = |key: &str, default: f64| -> [f64; 3] {
        std::array::from_fn(|a| node.get(key).and_then(|v| v.get(a)).and_then(Value::as_f64).unwrap_or(default))
    };
    let (t, s) = (vec3("translation", 0.0), vec3("scale", 1.0));
    let positions = raw_pos.chunks_exact(3).map(|p| std::array::from_fn(|a| t[a] + s[a] * p[a])).collect();
    let normals = match attrs.get("NORMAL") {
        Some(_) => read_accessor(&doc, bin, uint(attrs, "NORMAL")?)?.0.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect(),
        None => Vec::new(),
    };
    let uvs = match attrs.get("TEXCOORD_0") {
        Some(_) => Some(read_accessor(&doc, bin, uint(attrs, "TEXCOORD_0")?)?.0.chunks_exact(2).map(|p| [p[0], p[1]]).collect()),
        None => None,
    };
    let (raw_idx, iw) = read_accessor(&doc, bin, uint(prim, "indices")?)?;
    let indices = raw_idx.iter().map(|&i| i as u32).collect();
    let texture_jpeg = match doc["images"].get(0) {
        Some(img) => {
            let view = &doc["bufferViews"][uint(img, "bufferView")?];
            let off = view.get("byteOffset").and_then(Value::as_u64).unwrap_or(0) as usize;
            let len = uint(view, "byteLength")?;
            Some(bin.get(off..off + len).ok_or_else(|| malformed("image view overruns"))?.to_vec())
        }
        None => None,
    };
    Ok(GlbContents {
        primitives: prims.len(),
        json: doc,
        json_chunk_len: jlen,
        bin_chunk_len: blen,
        positions,
        normals,
        uvs,
        indices,
        index_width: iw,
        texture_jpeg,
    })
}
