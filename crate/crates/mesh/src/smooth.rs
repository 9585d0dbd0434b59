//! Laplacian smoothing and midpoint subdivision.

use std::collections::{BTreeSet, HashMap};

use heritage_core::Real;

use crate::decimate::decimate;
use crate::mesh::TriangleMesh;

fn neighbours_and_boundary<S>(mesh: &TriangleMesh<S>) -> (Vec<BTreeSet<u32>>, Vec<bool>) {
    let n = mesh.positions.len();
    let mut nb = vec![BTreeSet::new(); n];
    let mut edge_use: HashMap<(u32, u32), u32> = HashMap::new();
    for t in mesh.indices.chunks_exact(3) {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            nb[a as usize].insert(b);
            nb[b as usize].insert(a);
            *edge_use.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let mut boundary = vec![false; n];
    for ((a, b), k) in edge_use {
        if k == 1 {
            boundary[a as usize] = true;
            boundary[b as usize] = true;
        }
    }
    (nb, boundary)
}

/// Iteration count for a given `eta`: `round(2·eta)`.
pub fn denoise_iterations(eta: f64) -> usize {
    (eta * 2.0).round().max(0.0) as usize
}

/// Moves every interior vertex `1/(1+lmd)` of the way to its neighbours'
/// centroid, `round(2·eta)` times. Boundary vertices stay put.
pub fn denoise<S: Real>(mesh: &TriangleMesh<S>, lmd: f64, eta: f64) -> TriangleMesh<S> {
    let step = S::lit(1.0 / (1.0 + lmd));
    let (nb, boundary) = neighbours_and_boundary(mesh);
    let mut pos = mesh.positions.clone();
    for _ in 0..denoise_iterations(eta) {
        let prev = pos.clone();
        for (v, p) in pos.iter_mut().enumerate() {
            if boundary[v] || nb[v].is_empty() {
                continue;
            }
            let k = S::from_usize_lossy(nb[v].len());
            for a in 0..3 {
                let c = nb[v].iter().fold(S::zero(), |s, &u| s + prev[u as usize][a]) / k;
                p[a] += step * (c - prev[v][a]);
            }
        }
    }
    TriangleMesh {
        positions: pos,
        ..mesh.clone()
    }
}

/// Splits every triangle into four at its edge midpoints.
pub fn subdivide<S: Real>(mesh: &TriangleMesh<S>) -> TriangleMesh<S> {
    let mut positions = mesh.positions.clone();
    let mut uvs = mesh.uvs.clone();
    let mut mids: HashMap<(u32, u32), u32> = HashMap::new();
    let mut indices = Vec::with_capacity(mesh.indices.len() * 4);
    let h = S::half();
    let mut mid = |a: u32, b: u32, positions: &mut Vec<[S; 3]>, uvs: &mut Option<Vec<[S; 2]>>| -> u32 {
        *mids.entry((a.min(b), a.max(b))).or_insert_with(|| {
            let (pa, pb) = (positions[a as usize], positions[b as usize]);
            positions.push(std::array::from_fn(|k| (pa[k] + pb[k]) * h));
            if let Some(u) = uvs.as_mut() {
                let (ua, ub) = (u[a as usize], u[b as usize]);
                u.push([(ua[0] + ub[0]) * h, (ua[1] + ub[1]) * h]);
            }
            (positions.len() - 1) as u32
        })
    };
    for t in mesh.indices.chunks_exact(3) {
        let (a, b, c) = (t[0], t[1], t[2]);
        let ab = mid(a, b, &mut positions, &mut uvs);
        let bc = mid(b, c, &mut positions, &mut uvs);
        let ca = mid(c, a, &mut positions, &mut uvs);
        indices.extend_from_slice(&[a, ab, ca, ab, b, bc, ca, bc, c, ab, bc, ca]);
    }
    TriangleMesh {
        positions,
        uvs,
        indices,
        texture: mesh.texture.clone(),
    }
}

pub fn resample<S: Real>(mesh: &TriangleMesh<S>, factor: f64) -> TriangleMesh<S> {
    subdivide(&decimate(mesh, factor))
}
