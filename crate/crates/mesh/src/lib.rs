//! Mesh post-processing for reconstructed sites.

pub mod decimate;
pub mod generate;
pub mod glb;
pub mod mesh;
pub mod obj;
pub mod report;
pub mod smooth;
pub mod texture;

use heritage_core::{CompressionReport, Real};

pub use decimate::{cluster, decimate, target_faces};
pub use glb::{read_glb, write_glb, GlbContents, GlbError, GlbOptions};
pub use mesh::{Aabb, MeshError, TriangleMesh};
pub use obj::{parse_obj, write_mtl, write_obj, Loader, NoFiles, ObjError, ObjModel};
pub use report::compression_report;
pub use smooth::{denoise, resample, subdivide};
pub use texture::{downsample_texture, TextureError, TextureImage};

pub type Mesh32 = TriangleMesh<f32>;
pub type Mesh64 = TriangleMesh<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessOptions {
    pub factor: f64,
    pub texture_side: u32,
    pub glb: GlbOptions,
}

impl Default for PostprocessOptions {
    fn default() -> Self {
        Self {
            factor: 0.3,
            texture_side: 2048,
            glb: GlbOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Postprocessed<S> {
    pub mesh: TriangleMesh<S>,
    pub glb: Vec<u8>,
    pub report: CompressionReport,
}

/// Decimates, downsamples the texture and encodes GLB. `input_bytes` is the
/// size of the raw artifact the report compares against.
pub fn postprocess<S: Real>(
    mesh: &TriangleMesh<S>,
    input_bytes: u64,
    opts: &PostprocessOptions,
) -> Result<Postprocessed<S>, GlbError> {
    let mut out = decimate(mesh, opts.factor);
    if let Some(t) = &out.texture {
        out.texture = Some(downsample_texture(t, opts.texture_side));
    }
    let glb = write_glb(&out, &opts.glb)?;
    let report = compression_report(input_bytes, glb.len() as u64, mesh, &out);
    Ok(Postprocessed { mesh: out, glb, report })
}
