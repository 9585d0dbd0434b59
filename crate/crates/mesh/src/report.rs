use heritage_core::{CompressionReport, Real};

use crate::mesh::TriangleMesh;

/// Size reduction of `output_bytes` against `input_bytes`, plus the mesh
/// counts on either side.
pub fn compression_report<S: Real, T: Real>(
    input_bytes: u64,
    output_bytes: u64,
    before: &TriangleMesh<S>,
    after: &TriangleMesh<T>,
) -> CompressionReport {
    CompressionReport {
        input_bytes,
        output_bytes,
        ratio: CompressionReport::size_ratio(input_bytes, output_bytes),
        vertices_before: before.vertex_count(),
        vertices_after: after.vertex_count(),
        faces_before: before.face_count(),
        faces_after: after.face_count(),
    }
}
