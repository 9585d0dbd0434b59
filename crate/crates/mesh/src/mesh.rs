use heritage_core::Real;

use crate::texture::TextureImage;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb<S> {
    pub min: [S; 3],
    pub max: [S; 3],
}

impl<S: Real> Aabb<S> {
    pub fn of(points: &[[S; 3]]) -> Option<Self> {
        let first = *points.first()?;
        let mut b = Aabb { min: first, max: first };
        for p in &points[1..] {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        Some(b)
    }

    pub fn extent(&self) -> [S; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }

    pub fn diagonal(&self) -> S {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    pub fn contains(&self, p: &[S; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MeshError {
    #[error("index {index} out of range for {vertices} vertices")]
    IndexOutOfRange { index: u32, vertices: usize },
    #[error("index count {0} is not a multiple of 3")]
    Ragged(usize),
    #[error("uv count {uvs} differs from vertex count {vertices}")]
    UvCount { uvs: usize, vertices: usize },
    #[error("non-finite coordinate at vertex {0}")]
    NonFinite(usize),
}

/// Indexed triangle mesh with optional per-vertex UVs and one texture.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh<S> {
    pub positions: Vec<[S; 3]>,
    pub uvs: Option<Vec<[S; 2]>>,
    pub indices: Vec<u32>,
    pub texture: Option<TextureImage>,
}

impl<S: Real> TriangleMesh<S> {
    pub fn new(positions: Vec<[S; 3]>, indices: Vec<u32>) -> Self {
        Self {
            positions,
            uvs: None,
            indices,
            texture: None,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn face_count(&self) -> usize {
        self.indices.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty() || self.positions.is_empty()
    }

    pub fn bounds(&self) -> Option<Aabb<S>> {
        Aabb::of(&self.positions)
    }

    pub fn triangles(&self) -> impl Iterator<Item = [u32; 3]> + '_ {
        self.indices.chunks_exact(3).map(|t| [t[0], t[1], t[2]])
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if self.indices.len() % 3 != 0 {
            return Err(MeshError::Ragged(self.indices.len()));
        }
        let n = self.positions.len();
        if let Some(&bad) = self.indices.iter().find(|&&i| i as usize >= n) {
            return Err(MeshError::IndexOutOfRange { index: bad, vertices: n });
        }
        if let Some(uvs) = &self.uvs {
            if uvs.len() != n {
                return Err(MeshError::UvCount { uvs: uvs.len(), vertices: n });
            }
        }
        if let Some(i) = self.positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(MeshError::NonFinite(i));
        }
        Ok(())
    }

    /// Area-weighted vertex normals; isolated or degenerate vertices get +Z.
    pub fn vertex_normals(&self) -> Vec<[S; 3]> {
        let mut acc = vec![[S::zero(); 3]; self.positions.len()];
        for [a, b, c] in self.triangles() {
            let n = face_normal(&self.positions[a as usize], &self.positions[b as usize], &self.positions[c as usize]);
            for v in [a, b, c] {
                for k in 0..3 {
                    acc[v as usize][k] += n[k];
                }
            }
        }
        acc.into_iter()
            .map(|n| {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if len > S::zero() && len.is_finite() {
                    [n[0] / len, n[1] / len, n[2] / len]
                } else {
                    [S::zero(), S::zero(), S::one()]
                }
            })
            .collect()
    }

    /// Converts scalar width.
    pub fn cast<T: Real>(&self) -> TriangleMesh<T> {
        let c = |v: S| T::lit(v.to_f64_lossy());
        TriangleMesh {
            positions: self.positions.iter().map(|p| [c(p[0]), c(p[1]), c(p[2])]).collect(),
            uvs: self.uvs.as_ref().map(|u| u.iter().map(|t| [c(t[0]), c(t[1])]).collect()),
            indices: self.indices.clone(),
            texture: self.texture.clone(),
        }
    }

    /// Drops vertices no triangle uses, keeping the survivors' order.
    pub fn compact(&self) -> TriangleMesh<S> {
        let mut remap = vec![u32::MAX; self.positions.len()];
        let mut used: Vec<usize> = self.indices.iter().map(|&i| i as usize).collect();
        used.sort_unstable();
        used.dedup();
        for (new, &old) in used.iter().enumerate() {
            remap[old] = new as u32;
        }
        TriangleMesh {
            positions: used.iter().map(|&i| self.positions[i]).collect(),
            uvs: self.uvs.as_ref().map(|u| used.iter().map(|&i| u[i]).collect()),
            indices: self.indices.iter().map(|&i| remap[i as usize]).collect(),
            texture: self.texture.clone(),
        }
    }
}

/// Cross product of two edges: twice the area, along the normal.
pub fn face_normal<S: Real>(a: &[S; 3], b: &[S; 3], c: &[S; 3]) -> [S; 3] {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]]
}

pub fn twice_area<S: Real>(a: &[S; 3], b: &[S; 3], c: &[S; 3]) -> S {
    let n = face_normal(a, b, c);
    (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
}
