//! Uniform-grid vertex clustering.

use std::collections::{HashMap, HashSet};

use heritage_core::Real;

use crate::mesh::{twice_area, Aabb, TriangleMesh};

pub const MAX_BISECTION_STEPS: usize = 32;

/// Largest resolution tried: cells per longest axis.
const MAX_RESOLUTION: f64 = 1.0e6;

/// One clustering pass with `res` cubic cells along the longest axis.
pub fn cluster<S: Real>(mesh: &TriangleMesh<S>, res: f64) -> TriangleMesh<S> {
    let Some(b) = mesh.bounds() else {
        return mesh.clone();
    };
    let ext = b.extent();
    let longest = ext[0].max(ext[1]).max(ext[2]);
    if longest <= S::zero() || res < 1.0 {
        return TriangleMesh {
            positions: Vec::new(),
            uvs: mesh.uvs.as_ref().map(|_| Vec::new()),
            indices: Vec::new(),
            texture: mesh.texture.clone(),
        };
    }
    let cell = longest / S::lit(res);
    let dims: [u64; 3] = std::array::from_fn(|a| (ext[a] / cell).ceil().to_u64().unwrap_or(0).max(1));
    let key = |p: &[S; 3]| -> u64 {
        let mut k = 0u64;
        for a in 0..3 {
            let i = ((p[a] - b.min[a]) / cell).floor().to_u64().unwrap_or(0).min(dims[a] - 1);
            k = k * dims[a] + i;
        }
        k
    };

    // cluster ids in order of first appearance keep the result deterministic
    let mut ids: HashMap<u64, usize> = HashMap::new();
    let mut of_vertex = Vec::with_capacity(mesh.positions.len());
    let mut sums: Vec<([f64; 3], usize)> = Vec::new();
    for p in &mesh.positions {
        let next = ids.len();
        let id = *ids.entry(key(p)).or_insert(next);
        if id == sums.len() {
            sums.push(([0.0; 3], 0));
        }
        for a in 0..3 {
            sums[id].0[a] += p[a].to_f64_lossy();
        }
        sums[id].1 += 1;
        of_vertex.push(id);
    }
    let mut rep: Vec<Option<(f64, usize)>> = vec![None; sums.len()];
    for (v, p) in mesh.positions.iter().enumerate() {
        let id = of_vertex[v];
        let (s, n) = sums[id];
        let d: f64 = (0..3).map(|a| (p[a].to_f64_lossy() - s[a] / n as f64).powi(2)).sum();
        if rep[id].map_or(true, |(best, _)| d < best) {
            rep[id] = Some((d, v));
        }
    }

    let mut seen: HashSet<[u32; 3]> = HashSet::new();
    let mut tris: Vec<[usize; 3]> = Vec::new();
    for t in mesh.triangles() {
        let r = t.map(|v| rep[of_vertex[v as usize]].expect("every cluster has a member").1);
        if r[0] == r[1] || r[1] == r[2] || r[0] == r[2] {
            continue;
        }
        if twice_area(&mesh.positions[r[0]], &mesh.positions[r[1]], &mesh.positions[r[2]]) <= S::zero() {
            continue;
        }
        let mut sorted = r.map(|x| x as u32);
        sorted.sort_unstable();
        if seen.insert(sorted) {
            tris.push(r);
        }
    }

    let mut used: Vec<usize> = tris.iter().flatten().copied().collect();
    used.sort_unstable();
    used.dedup();
    let mut remap = HashMap::with_capacity(used.len());
    for (new, &old) in used.iter().enumerate() {
        remap.insert(old, new as u32);
    }
    TriangleMesh {
        positions: used.iter().map(|&v| mesh.positions[v]).collect(),
        uvs: mesh.uvs.as_ref().map(|u| used.iter().map(|&v| u[v]).collect()),
        indices: tris.iter().flatten().map(|v| remap[v]).collect(),
        texture: mesh.texture.clone(),
    }
}

/// Face budget for a factor: `floor(factor × faces)`, at least 1.
pub fn target_faces(faces: usize, factor: f64) -> usize {
    ((factor * faces as f64).floor() as usize).max(1)
}

/// Reduces the face count to at most `factor` of the input. The grid
/// resolution is bisected on a log scale and the largest result within the
/// budget among the tried resolutions wins. `factor >= 1` returns the input.
pub fn decimate<S: Real>(mesh: &TriangleMesh<S>, factor: f64) -> TriangleMesh<S> {
    assert!(factor > 0.0, "factor must be positive");
    if factor >= 1.0 || mesh.is_empty() {
        return mesh.clone();
    }
    let target = target_faces(mesh.face_count(), factor);
    let mut best = cluster(mesh, 1.0);
    let consider = |cand: TriangleMesh<S>, best: &mut TriangleMesh<S>| -> bool {
        let fits = cand.face_count() <= target;
        if fits && cand.face_count() > best.face_count() {
            *best = cand;
        }
        fits
    };
    let (mut lo, mut hi) = (1.0f64, MAX_RESOLUTION);
    if consider(cluster(mesh, hi), &mut best) {
        return best;
    }
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = (lo * hi).sqrt();
        if consider(cluster(mesh, mid), &mut best) {
            lo = mid;
        } else {
            hi = mid;
        }
        if best.face_count() == target || hi / lo < 1.0 + 1e-9 {
            break;
        }
    }
    best
}

/// Cell edge length the clustering used for a given resolution.
pub fn cell_size<S: Real>(bounds: &Aabb<S>, res: f64) -> S {
    let e = bounds.extent();
    e[0].max(e[1]).max(e[2]) / S::lit(res)
}
