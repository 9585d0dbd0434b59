//! Procedural meshes for tests and the synthetic reconstruction backend.

use heritage_core::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mesh::TriangleMesh;
use crate::texture::TextureImage;

/// `n × n` vertices on the unit square (z = 0), two triangles per cell,
/// UVs equal to (x, y).
pub fn grid<S: Real>(n: usize) -> TriangleMesh<S> {
    assert!(n >= 2);
    let step = S::one() / S::from_usize_lossy(n - 1);
    let mut positions = Vec::with_capacity(n * n);
    let mut uvs = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let (x, y) = (S::from_usize_lossy(i) * step, S::from_usize_lossy(j) * step);
            positions.push([x, y, S::zero()]);
            uvs.push([x, y]);
        }
    }
    let mut indices = Vec::with_capacity(6 * (n - 1) * (n - 1));
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let a = (j * n + i) as u32;
            let (b, c, d) = (a + 1, a + n as u32, a + n as u32 + 1);
            indices.extend_from_slice(&[a, b, d, a, d, c]);
        }
    }
    TriangleMesh {
        positions,
        uvs: Some(uvs),
        indices,
        texture: None,
    }
}

/// Latitude-ring sphere: `rings` rings of `cols` vertices, the last column
/// duplicating the first at u = 1. Caps are left open. Radius is
/// `1 + displacement(theta, phi)`.
pub fn ring_sphere<S: Real>(rings: usize, cols: usize, displacement: impl Fn(f64, f64) -> f64) -> TriangleMesh<S> {
    assert!(rings >= 2 && cols >= 3);
    let mut positions = Vec::with_capacity(rings * cols);
    let mut uvs = Vec::with_capacity(rings * cols);
    for r in 0..rings {
        let v = (r as f64 + 0.5) / rings as f64;
        let theta = std::f64::consts::PI * v;
        for c in 0..cols {
            let u = c as f64 / (cols - 1) as f64;
            let phi = 2.0 * std::f64::consts::PI * u;
            let rad = 1.0 + displacement(theta, phi);
            positions.push([
                S::lit(rad * theta.sin() * phi.cos()),
                S::lit(rad * theta.cos()),
                S::lit(rad * theta.sin() * phi.sin()),
            ]);
            uvs.push([S::lit(u), S::lit(1.0 - v)]);
        }
    }
    let mut indices = Vec::with_capacity(6 * (rings - 1) * (cols - 1));
    for r in 0..rings - 1 {
        for c in 0..cols - 1 {
            let a = (r * cols + c) as u32;
            let (b, d, e) = (a + 1, a + cols as u32, a + cols as u32 + 1);
            indices.extend_from_slice(&[a, d, b, b, d, e]);
        }
    }
    TriangleMesh {
        positions,
        uvs: Some(uvs),
        indices,
        texture: None,
    }
}

/// Smooth periodic bumps with seeded phases.
pub fn bumps(seed: u64, amplitude: f64) -> impl Fn(f64, f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    move |theta, phi| {
        amplitude * ((5.0 * theta + p[0]).sin() * (3.0 * phi + p[1]).cos() + 0.5 * (11.0 * theta + 7.0 * phi + p[2]).sin())
    }
}

/// Stone-like procedural texture.
pub fn texture(seed: u64, side: u32) -> TextureImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [rng.gen_range(120.0..180.0), rng.gen_range(100.0..150.0), rng.gen_range(80.0..120.0)];
    let mut jitter = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
    TextureImage::from_fn(side, side, |x, y| {
        let (fx, fy) = (x as f64 / side as f64, y as f64 / side as f64);
        let vein = 25.0 * ((fx * 40.0 + 3.0 * (fy * 9.0).sin()).sin() * (fy * 23.0).cos());
        let grain: f64 = jitter.gen_range(-12.0..12.0);
        std::array::from_fn(|c| (base[c] + vein + grain).clamp(0.0, 255.0) as u8)
    })
}

/// Ring sphere with about `vertices` vertices and a `tex_side` texture.
pub fn dense_textured<S: Real>(vertices: usize, tex_side: u32, seed: u64) -> TriangleMesh<S> {
    let cols = ((vertices as f64 / 2.0).sqrt() * 1.414).round().max(3.0) as usize;
    let rings = (vertices / cols).max(2);
    let mut m = ring_sphere(rings, cols, bumps(seed, 0.05));
    m.texture = Some(texture(seed, tex_side));
    m
}

/// Random soup: points in a random box, random triangles, optional UVs.
pub fn random_mesh<S: Real>(rng: &mut impl Rng, max_vertices: usize, with_uvs: bool) -> TriangleMesh<S> {
    let n = rng.gen_range(3..=max_vertices.max(3));
    let scale: f64 = 10f64.powf(rng.gen_range(-2.0..3.0));
    let offset: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-100.0..100.0));
    let positions: Vec<[S; 3]> = (0..n)
        .map(|_| std::array::from_fn(|a| S::lit(offset[a] + scale * rng.gen_range(-1.0..1.0))))
        .collect();
    let faces = rng.gen_range(1..=2 * n);
    let indices = (0..faces * 3).map(|_| rng.gen_range(0..n as u32)).collect();
    let uvs = with_uvs.then(|| (0..n).map(|_| [S::lit(rng.gen_range(0.0..1.0)), S::lit(rng.gen_range(0.0..1.0))]).collect());
    TriangleMesh {
        positions,
        uvs,
        indices,
        texture: None,
    }
}
