//! Wavefront OBJ reader and writer.

use std::collections::HashMap;
use std::fmt::Write as _;

use heritage_core::Real;

use crate::mesh::TriangleMesh;
use crate::texture::TextureImage;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ObjError {
    #[error("line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("line {line}: index {index} out of range")]
    IndexOutOfRange { line: usize, index: i64 },
    #[error("texture {path}: {msg}")]
    Texture { path: String, msg: String },
}

impl ObjError {
    pub fn code(&self) -> &'static str {
        match self {
            ObjError::MalformedLine { .. } => "MALFORMED_LINE",
            ObjError::IndexOutOfRange { .. } => "INDEX_OUT_OF_RANGE",
            ObjError::Texture { .. } => "TEXTURE",
        }
    }
}

/// Fetches a referenced file (MTL or texture) by the name given in the OBJ.
pub trait Loader {
    fn load(&self, name: &str) -> Option<Vec<u8>>;
}

impl<F: Fn(&str) -> Option<Vec<u8>>> Loader for F {
    fn load(&self, name: &str) -> Option<Vec<u8>> {
        self(name)
    }
}

/// Loader that resolves nothing.
pub struct NoFiles;

impl Loader for NoFiles {
    fn load(&self, _: &str) -> Option<Vec<u8>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjModel<S> {
    pub mesh: TriangleMesh<S>,
    pub material: Option<String>,
    pub texture_path: Option<String>,
}

type Corner = (usize, Option<usize>);

fn resolve(raw: &str, len: usize, line: usize) -> Result<usize, ObjError> {
    let i: i64 = raw.parse().map_err(|_| ObjError::MalformedLine {
        line,
        msg: format!("bad index {raw:?}"),
    })?;
    let idx = match i {
        0 => None,
        i if i > 0 => Some(i as usize - 1),
        i => (len as i64 + i).try_into().ok(),
    };
    idx.filter(|&k| k < len).ok_or(ObjError::IndexOutOfRange { line, index: i })
}

fn floats<S: Real>(parts: &[&str], want: usize, line: usize) -> Result<Vec<S>, ObjError> {
    if parts.len() < want {
        return Err(ObjError::MalformedLine {
            line,
            msg: format!("expected {want} numbers"),
        });
    }
    parts
        .iter()
        .take(want)
        .map(|p| {
            p.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(S::lit)
                .ok_or_else(|| ObjError::MalformedLine {
                    line,
                    msg: format!("bad number {p:?}"),
                })
        })
        .collect()
}

/// Material name → diffuse map path.
pub fn parse_mtl(text: &str) -> HashMap<String, String> {
    let mut out = HashMap::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        let line = line.trim();
        let mut it = line.splitn(2, char::is_whitespace);
        match (it.next(), it.next().map(str::trim)) {
            (Some("newmtl"), Some(name)) => current = Some(name.to_owned()),
            (Some("map_Kd"), Some(rest)) => {
                // options like -s 1 1 1 precede the file name
                let path = rest.split_whitespace().last().unwrap_or(rest);
                if let Some(m) = &current {
                    out.insert(m.clone(), path.to_owned());
                }
            }
            _ => {}
        }
    }
    out
}

pub fn parse_obj<S: Real>(bytes: &[u8], loader: &dyn Loader) -> Result<ObjModel<S>, ObjError> {
    let text = String::from_utf8_lossy(bytes);
    let mut v: Vec<[S; 3]> = Vec::new();
    let mut vt: Vec<[S; 2]> = Vec::new();
    let mut faces: Vec<[Corner; 3]> = Vec::new();
    let mut materials: HashMap<String, String> = HashMap::new();
    let mut first_material: Option<String> = None;
    let mut any_vt = false;

    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let parts: Vec<&str> = body.split_whitespace().collect();
        match parts[0] {
            "v" => {
                let c = floats::<S>(&parts[1..], 3, line)?;
                v.push([c[0], c[1], c[2]]);
            }
            "vt" => {
                let c = floats::<S>(&parts[1..], 1, line)?;
                let second = match parts.get(2) {
                    Some(_) => floats::<S>(&parts[2..], 1, line)?[0],
                    None => S::zero(),
                };
                vt.push([c[0], second]);
            }
            "vn" => {
                floats::<S>(&parts[1..], 3, line)?;
            }
            "f" => {
                if parts.len() < 4 {
                    return Err(ObjError::MalformedLine {
                        line,
                        msg: "face needs at least 3 vertices".into(),
                    });
                }
                let mut poly = Vec::with_capacity(parts.len() - 1);
                for p in &parts[1..] {
                    let mut fields = p.split('/');
                    let vi = resolve(fields.next().unwrap_or(""), v.len(), line)?;
                    let ti = match fields.next() {
                        Some("") | None => None,
                        Some(t) => Some(resolve(t, vt.len(), line)?),
                    };
                    if let Some(nf) = fields.next() {
                        if !nf.is_empty() {
                            nf.parse::<i64>().map_err(|_| ObjError::MalformedLine {
                                line,
                                msg: format!("bad normal index {nf:?}"),
                            })?;
                        }
                    }
                    if fields.next().is_some() {
                        return Err(ObjError::MalformedLine {
                            line,
                            msg: format!("bad face corner {p:?}"),
                        });
                    }
                    any_vt |= ti.is_some();
                    poly.push((vi, ti));
                }
                for k in 1..poly.len() - 1 {
                    faces.push([poly[0], poly[k], poly[k + 1]]);
                }
            }
            "mtllib" => {
                for name in &parts[1..] {
                    if let Some(b) = loader.load(name) {
                        materials.extend(parse_mtl(&String::from_utf8_lossy(&b)));
                    }
                }
            }
            "usemtl" => {
                if first_material.is_none() {
                    first_material = parts.get(1).map(|s| s.to_string());
                }
            }
            "o" | "g" | "s" | "l" | "p" | "vp" => {}
            other => {
                return Err(ObjError::MalformedLine {
                    line,
                    msg: format!("unknown statement {other:?}"),
                })
            }
        }
    }

    let mut mesh = if !any_vt {
        TriangleMesh::new(v, faces.iter().flat_map(|f| f.map(|c| c.0 as u32)).collect())
    } else {
        let mut map: HashMap<Corner, u32> = HashMap::new();
        let mut positions = Vec::new();
        let mut uvs = Vec::new();
        let mut indices = Vec::with_capacity(faces.len() * 3);
        for f in &faces {
            for c in f {
                let id = *map.entry(*c).or_insert_with(|| {
                    positions.push(v[c.0]);
                    uvs.push(c.1.map(|t| vt[t]).unwrap_or([S::zero(); 2]));
                    (positions.len() - 1) as u32
                });
                indices.push(id);
            }
        }
        let mut m = TriangleMesh::new(positions, indices);
        m.uvs = Some(uvs);
        m
    };

    let texture_path = first_material.as_ref().and_then(|m| materials.get(m)).cloned();
    if let Some(path) = &texture_path {
        if let Some(bytes) = loader.load(path) {
            mesh.texture = Some(TextureImage::decode(&bytes).map_err(|e| ObjError::Texture {
                path: path.clone(),
                msg: e.to_string(),
            })?);
        }
    }
    Ok(ObjModel {
        mesh,
        material: first_material,
        texture_path,
    })
}

/// Writes `v`, `vt` and `f` records; with UVs, faces use `v/vt`.
pub fn write_obj<S: Real>(mesh: &TriangleMesh<S>, mtl: Option<(&str, &str)>) -> String {
    let mut s = String::with_capacity(mesh.vertex_count() * 40 + mesh.face_count() * 30);
    if let Some((lib, _)) = mtl {
        let _ = writeln!(s, "mtllib {lib}");
    }
    for p in &mesh.positions {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", p[0].to_f64_lossy(), p[1].to_f64_lossy(), p[2].to_f64_lossy());
    }
    if let Some(uvs) = &mesh.uvs {
        for t in uvs {
            let _ = writeln!(s, "vt {:.6} {:.6}", t[0].to_f64_lossy(), t[1].to_f64_lossy());
        }
    }
    if let Some((_, name)) = mtl {
        let _ = writeln!(s, "usemtl {name}");
    }
    let with_uv = mesh.uvs.is_some();
    for [a, b, c] in mesh.triangles() {
        let (a, b, c) = (a + 1, b + 1, c + 1);
        if with_uv {
            let _ = writeln!(s, "f {a}/{a} {b}/{b} {c}/{c}");
        } else {
            let _ = writeln!(s, "f {a} {b} {c}");
        }
    }
    s
}

pub fn write_mtl(name: &str, texture: &str) -> String {
    format!("newmtl {name}\nKa 1 1 1\nKd 1 1 1\nmap_Kd {texture}\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    const CUBE: &str = "\
# unit cube
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
";

    fn parse(s: &str) -> Result<ObjModel<f64>, ObjError> {
        parse_obj(s.as_bytes(), &NoFiles)
    }

    #[test]
    fn cube() {
        let m = parse(CUBE).unwrap().mesh;
        assert_eq!((m.vertex_count(), m.face_count()), (8, 12));
        assert!(m.uvs.is_none());
    }

    #[test]
    fn quad_fans() {
        let m = parse("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap().mesh;
        assert_eq!(m.indices, vec![0, 1, 2, 0, 2, 3]);
    }

    #[test]
    fn relative_indices() {
        let m = parse("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -1 -2 -3\n").unwrap().mesh;
        assert_eq!(m.indices, vec![2, 1, 0]);
    }

    #[test]
    fn corner_forms() {
        let src = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nvn 0 0 1\n\
                   f 1/1/1 2/2/1 3/3/1\nf 1//1 2//1 3//1\nf 1/1 2/2 3/3\n";
        let m = parse(src).unwrap().mesh;
        assert_eq!(m.face_count(), 3);
        // (v,vt) pairs: three textured corners plus three without UVs
        assert_eq!(m.vertex_count(), 6);
        assert_eq!(m.uvs.as_ref().unwrap()[1], [1.0, 0.0]);
        assert_eq!(&m.indices[6..], &[0, 1, 2]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            parse("v 0 0 0\nv 1 zero 0\n"),
            Err(ObjError::MalformedLine { line: 2, msg: "bad number \"zero\"".into() })
        );
        assert_eq!(parse("v 0 0 0\nf 1 2 3\n"), Err(ObjError::IndexOutOfRange { line: 2, index: 2 }));
        assert!(matches!(parse("v 0 0 0\nf 1 1\n"), Err(ObjError::MalformedLine { line: 2, .. })));
        assert!(matches!(parse("bogus 1\n"), Err(ObjError::MalformedLine { line: 1, .. })));
        assert!(matches!(parse("v 0 0 0\nf 0 1 1\n"), Err(ObjError::IndexOutOfRange { index: 0, .. })));
    }

    #[test]
    fn material_texture_resolves() {
        let tex = TextureImage::from_fn(4, 2, |x, y| [x as u8 * 60, y as u8 * 100, 7]);
        let png = tex.to_png().unwrap();
        let mtl = write_mtl("mat0", "tex/diffuse.png");
        let loader = |name: &str| match name {
            "model.mtl" => Some(mtl.clone().into_bytes()),
            "tex/diffuse.png" => Some(png.clone()),
            _ => None,
        };
        let src = "mtllib model.mtl\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nusemtl mat0\nf 1/1 2/2 3/3\n";
        let model = parse_obj::<f32>(src.as_bytes(), &loader).unwrap();
        assert_eq!(model.texture_path.as_deref(), Some("tex/diffuse.png"));
        assert_eq!(model.mesh.texture, Some(tex));
    }

    #[test]
    fn writer_round_trips() {
        let m = parse("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0.5 1\nf 1/1 2/2 3/3\n").unwrap().mesh;
        let again = parse(&write_obj(&m, Some(("a.mtl", "m")))).unwrap().mesh;
        assert_eq!(again, m);
    }
}
