//! Isomap extraction, view-angle weighting and multi-frame texture fusion.
//!
//! The isomap is a square texture whose texel `(x, y)` has its center at
//! `((x + 0.5) / res, (y + 0.5) / res)` in the model's UV space. Because the
//! texel-to-surface mapping is fixed by the model, isomaps of different
//! frames are in dense correspondence and can be fused texel by texel.

use std::path::Path;

use log::debug;
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::AffineCamera;
use crate::error::{Error, Result};
use crate::imaging::{save_weight_png, RgbImage};
use crate::model::{
    BlendshapeSet, ExpressionCoefficients, MeshInstance, PcaShapeModel, ShapeCoefficients,
};
use crate::raster::{shared_edges, RasterTriangle};

pub const DEFAULT_ISOMAP_RESOLUTION: usize = 512;
pub const DEFAULT_SUPER_RESOLUTION: usize = 2;

/// Depth-test slack as a fraction of the mesh bounding-box diagonal.
pub const DEPTH_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct IsomapLayout {
    resolution: usize,
    texel_triangle: Vec<Option<u32>>,
    texel_barycentrics: Vec<[f64; 3]>,
    degenerate_triangles: usize,
}

impl IsomapLayout {
    /// Rasterizes every triangle in UV space. Texels claimed by several
    /// triangles go to the lowest triangle index; zero-area UV triangles are
    /// skipped and counted.
    pub fn build(uv: &[[f64; 2]], triangles: &[[usize; 3]], resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidArgument(
                "isomap resolution must be >= 1".into(),
            ));
        }
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= uv.len())) {
            return Err(Error::InvalidArgument(format!(
                "triangle {t:?} indexes past the uv list"
            )));
        }
        let n = resolution * resolution;
        let mut texel_triangle = vec![None; n];
        let mut texel_barycentrics = vec![[0.0; 3]; n];
        let mut degenerate_triangles = 0;
        let res = resolution as f64;
        for (ti, (t, shared)) in triangles.iter().zip(shared_edges(triangles)).enumerate() {
            let pts = t.map(|i| Vector2::new(uv[i][0] * res, uv[i][1] * res));
            let Some(rt) = RasterTriangle::new(pts, *t, shared) else {
                degenerate_triangles += 1;
                continue;
            };
            rt.for_each_pixel(resolution, resolution, |x, y, b| {
                let k = y * resolution + x;
                if texel_triangle[k].is_none() {
                    texel_triangle[k] = Some(ti as u32);
                    texel_barycentrics[k] = b;
                }
            });
        }
        if degenerate_triangles > 0 {
            debug!("isomap layout skipped {degenerate_triangles} zero-area uv triangles");
        }
        Ok(Self {
            resolution,
            texel_triangle,
            texel_barycentrics,
            degenerate_triangles,
        })
    }

    pub fn for_model(model: &PcaShapeModel, resolution: usize) -> Result<Self> {
        Self::build(model.uv_coords(), model.triangles(), resolution)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn num_texels(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn texel_triangle(&self, texel: usize) -> Option<usize> {
        self.texel_triangle[texel].map(|t| t as usize)
    }

    pub fn texel_barycentrics(&self, texel: usize) -> [f64; 3] {
        self.texel_barycentrics[texel]
    }

    pub fn covered_texels(&self) -> usize {
        self.texel_triangle.iter().filter(|t| t.is_some()).count()
    }

    pub fn degenerate_triangles(&self) -> usize {
        self.degenerate_triangles
    }

    /// 3D surface point of a covered texel.
    pub fn surface_point(
        &self,
        texel: usize,
        mesh: &MeshInstance,
        triangles: &[[usize; 3]],
    ) -> Option<Vector3<f64>> {
        let t = triangles[self.texel_triangle(texel)?];
        let b = self.texel_barycentrics[texel];
        Some(mesh.vertex(t[0]) * b[0] + mesh.vertex(t[1]) * b[1] + mesh.vertex(t[2]) * b[2])
    }
}

/// Unit normal of a triangle with counter-clockwise (outward) winding, or
/// `None` when it has no area.
pub fn triangle_normal(mesh: &MeshInstance, t: &[usize; 3]) -> Option<Vector3<f64>> {
    let (a, b, c) = (mesh.vertex(t[0]), mesh.vertex(t[1]), mesh.vertex(t[2]));
    (b - a).cross(&(c - a)).try_normalize(0.0)
}

/// Per-triangle view weight `clamp(⟨toward camera, n⟩, 0, 1)`.
pub fn triangle_weights(
    mesh: &MeshInstance,
    triangles: &[[usize; 3]],
    camera: &AffineCamera,
) -> Vec<f64> {
    let toward = camera.toward_camera().into_inner();
    triangles
        .iter()
        .map(|t| {
            triangle_normal(mesh, t)
                .map(|n| toward.dot(&n).clamp(0.0, 1.0))
                .unwrap_or(0.0)
        })
        .collect()
}

/// A triangle projected into the image, with per-vertex depth.
struct ProjectedTriangle {
    raster: RasterTriangle,
    depth: [f64; 3],
}

fn project_triangles(
    mesh: &MeshInstance,
    triangles: &[[usize; 3]],
    camera: &AffineCamera,
) -> Vec<Option<ProjectedTriangle>> {
    let forward = camera.forward().into_inner();
    let shared = shared_edges(triangles);
    triangles
        .iter()
        .zip(shared)
        .map(|(t, s)| {
            let v = t.map(|i| mesh.vertex(i));
            let pts = v.map(|p| camera.project(&p));
            let raster = RasterTriangle::new(pts, *t, s)?;
            Some(ProjectedTriangle {
                raster,
                depth: v.map(|p| forward.dot(&p)),
            })
        })
        .collect()
}

impl ProjectedTriangle {
    /// Depth of the triangle's plane at image point `q`.
    fn depth_at(&self, q: &Vector2<f64>) -> f64 {
        let b = self.raster.barycentric(q);
        b[0] * self.depth[0] + b[1] * self.depth[1] + b[2] * self.depth[2]
    }
}

/// Nearest depth per pixel over all triangles (`+∞` where uncovered), and the
/// triangle that produced it. Equal depths keep the lower triangle index.
fn depth_buffer(
    projected: &[Option<ProjectedTriangle>],
    width: usize,
    height: usize,
    include: impl Fn(usize) -> bool,
) -> (Vec<f64>, Vec<Option<u32>>) {
    let mut depth = vec![f64::INFINITY; width * height];
    let mut owner = vec![None; width * height];
    for (ti, pt) in projected.iter().enumerate() {
        let Some(pt) = pt else { continue };
        if !include(ti) {
            continue;
        }
        pt.raster.for_each_pixel(width, height, |x, y, b| {
            let d = b[0] * pt.depth[0] + b[1] * pt.depth[1] + b[2] * pt.depth[2];
            let k = y * width + x;
            if d < depth[k] {
                depth[k] = d;
                owner[k] = Some(ti as u32);
            }
        });
    }
    (depth, owner)
}

/// Per-texel weights for one frame: the flat view weight of the texel's
/// triangle, zeroed where the surface point is hidden behind a nearer part of
/// the mesh or projects outside the `width × height` frame.
pub fn compute_texel_weights(
    mesh: &MeshInstance,
    triangles: &[[usize; 3]],
    camera: &AffineCamera,
    layout: &IsomapLayout,
    width: usize,
    height: usize,
) -> Vec<f32> {
    let tri_weights = triangle_weights(mesh, triangles, camera);
    let projected = project_triangles(mesh, triangles, camera);
    let (zbuf, _) = depth_buffer(&projected, width, height, |_| true);
    let tol = DEPTH_TOLERANCE * mesh.bounding_box_diagonal();
    let res = layout.resolution();
    let mut weights = vec![0.0f32; layout.num_texels()];
    weights
        .par_chunks_mut(res)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, w) in row.iter_mut().enumerate() {
                let texel = y * res + x;
                let Some(ti) = layout.texel_triangle(texel) else {
                    continue;
                };
                let omega = tri_weights[ti];
                if omega <= 0.0 {
                    continue;
                }
                let Some(pt) = &projected[ti] else { continue };
                let Some(p) = layout.surface_point(texel, mesh, triangles) else {
                    continue;
                };
                let q = camera.project(&p);
                if !(q.x >= 0.0 && q.y >= 0.0 && q.x < width as f64 && q.y < height as f64) {
                    continue;
                }
                // Compare at the buffer's sample position, using this
                // triangle's plane, so the test is exact for the surface that
                // wrote the buffer.
                let (px, py) = (q.x.floor() as usize, q.y.floor() as usize);
                let center = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                if pt.depth_at(&center) > zbuf[py * width + px] + tol {
                    continue;
                }
                *w = omega as f32;
            }
        });
    weights
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTexture {
    pub resolution: usize,
    pub colour: Vec<[f32; 3]>,
    pub weight: Vec<f32>,
    pub frame_index: usize,
}

impl FrameTexture {
    pub fn observed_texels(&self) -> usize {
        self.weight.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = RgbImage::from_raw(self.resolution, self.resolution, self.colour.clone())?;
        let mask: Vec<bool> = self.weight.iter().map(|&w| w > 0.0).collect();
        img.save_png_with_mask(path, &mask)
    }

    pub fn save_weight_png(&self, path: impl AsRef<Path>) -> Result<()> {
        save_weight_png(path, self.resolution, self.resolution, &self.weight)
    }
}

/// Samples the frame at the projection of every covered texel's surface point.
pub fn remap_frame(
    frame: &RgbImage,
    frame_index: usize,
    mesh: &MeshInstance,
    triangles: &[[usize; 3]],
    camera: &AffineCamera,
    layout: &IsomapLayout,
) -> FrameTexture {
    let mut weight = compute_texel_weights(
        mesh,
        triangles,
        camera,
        layout,
        frame.width(),
        frame.height(),
    );
    let res = layout.resolution();
    let mut colour = vec![[0.0f32; 3]; layout.num_texels()];
    colour
        .par_chunks_mut(res)
        .zip(weight.par_chunks_mut(res))
        .enumerate()
        .for_each(|(y, (crow, wrow))| {
            for x in 0..res {
                if wrow[x] <= 0.0 {
                    continue;
                }
                let texel = y * res + x;
                let p = layout
                    .surface_point(texel, mesh, triangles)
                    .expect("weighted texels are covered");
                let q = camera.project(&p);
                match frame.sample_bilinear(q.x, q.y) {
                    Some(c) => crow[x] = c,
                    None => wrow[x] = 0.0,
                }
            }
        });
    FrameTexture {
        resolution: res,
        colour,
        weight,
        frame_index,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Average,
    Median,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "median" => Ok(Self::Median),
            other => Err(Error::InvalidArgument(format!(
                "unknown fusion mode '{other}' (expected average or median)"
            ))),
        }
    }
}

/// One observed colour and its weight.
pub type Observation = ([f32; 3], f32);

#[derive(Debug, Clone)]
enum Accumulator {
    Average {
        weighted: Vec<[f64; 3]>,
        weight: Vec<f64>,
    },
    Median {
        observations: Vec<Vec<Observation>>,
    },
}

#[derive(Debug, Clone)]
pub struct TextureFusionBuffer {
    base_resolution: usize,
    super_resolution: usize,
    frames: usize,
    acc: Accumulator,
}

impl TextureFusionBuffer {
    /// A buffer at `base_resolution · super_resolution` texels per side.
    pub fn new(mode: FusionMode, base_resolution: usize, super_resolution: usize) -> Result<Self> {
        if base_resolution == 0 || super_resolution == 0 {
            return Err(Error::InvalidArgument(
                "resolution and super-resolution factor must be >= 1".into(),
            ));
        }
        let res = base_resolution * super_resolution;
        let n = res * res;
        let acc = match mode {
            FusionMode::Average => Accumulator::Average {
                weighted: vec![[0.0; 3]; n],
                weight: vec![0.0; n],
            },
            FusionMode::Median => Accumulator::Median {
                observations: vec![Vec::new(); n],
            },
        };
        Ok(Self {
            base_resolution,
            super_resolution,
            frames: 0,
            acc,
        })
    }

    pub fn mode(&self) -> FusionMode {
        match self.acc {
            Accumulator::Average { .. } => FusionMode::Average,
            Accumulator::Median { .. } => FusionMode::Median,
        }
    }

    pub fn resolution(&self) -> usize {
        self.base_resolution * self.super_resolution
    }

    pub fn super_resolution(&self) -> usize {
        self.super_resolution
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Adds every texel with ω > 0.
    pub fn add(&mut self, frame: &FrameTexture) -> Result<()> {
        if frame.resolution != self.resolution() {
            return Err(Error::InvalidArgument(format!(
                "frame texture is {}² but the buffer is {}²",
                frame.resolution,
                self.resolution()
            )));
        }
        match &mut self.acc {
            Accumulator::Average { weighted, weight } => {
                for (k, (&w, c)) in frame.weight.iter().zip(&frame.colour).enumerate() {
                    if w > 0.0 {
                        let w = w as f64;
                        for ch in 0..3 {
                            weighted[k][ch] += w * c[ch] as f64;
                        }
                        weight[k] += w;
                    }
                }
            }
            Accumulator::Median { observations } => {
                for (k, (&w, c)) in frame.weight.iter().zip(&frame.colour).enumerate() {
                    if w > 0.0 {
                        observations[k].push((*c, w));
                    }
                }
            }
        }
        self.frames += 1;
        Ok(())
    }

    pub fn fused(&self) -> FusedTexture {
        let res = self.resolution();
        let (colour, observed): (Vec<[f32; 3]>, Vec<bool>) = match &self.acc {
            Accumulator::Average { weighted, weight } => weighted
                .iter()
                .zip(weight)
                .map(|(s, &w)| {
                    if w > 0.0 {
                        (s.map(|v| (v / w) as f32), true)
                    } else {
                        ([0.0; 3], false)
                    }
                })
                .unzip(),
            Accumulator::Median { observations } => observations
                .par_iter()
                .map(|obs| match weighted_median_rgb(obs) {
                    Some(c) => (c, true),
                    None => ([0.0; 3], false),
                })
                .collect::<Vec<_>>()
                .into_iter()
                .unzip(),
        };
        FusedTexture {
            resolution: res,
            colour,
            observed,
        }
    }
}

/// Observed value minimizing `Σ ωᵢ |c − cᵢ|`, the smallest one on ties.
/// Returns `None` when there is no observation with positive weight.
pub fn weighted_median(values: &[(f32, f32)]) -> Option<f32> {
    let mut v: Vec<(f32, f32)> = values.iter().copied().filter(|&(_, w)| w > 0.0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = v.iter().map(|&(_, w)| w as f64).sum();
    let mut below = 0.0;
    for &(c, w) in &v {
        below += w as f64;
        // At the first value whose cumulative weight reaches half the total,
        // moving right cannot lower the objective.
        if 2.0 * below >= total {
            return Some(c);
        }
    }
    v.last().map(|&(c, _)| c)
}

/// Per-channel weighted median.
pub fn weighted_median_rgb(obs: &[Observation]) -> Option<[f32; 3]> {
    let mut out = [0.0; 3];
    for (ch, slot) in out.iter_mut().enumerate() {
        let channel: Vec<(f32, f32)> = obs.iter().map(|(c, w)| (c[ch], *w)).collect();
        *slot = weighted_median(&channel)?;
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedTexture {
    pub resolution: usize,
    pub colour: Vec<[f32; 3]>,
    pub observed: Vec<bool>,
}

impl FusedTexture {
    pub fn observed_texels(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn image(&self) -> RgbImage {
        RgbImage::from_raw(self.resolution, self.resolution, self.colour.clone())
            .expect("colour holds resolution² texels")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.image().save_png_with_mask(path, &self.observed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: RgbImage,
    /// Pixels covered by the mesh.
    pub mask: Vec<bool>,
}

impl RenderedView {
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.image.save_png_with_mask(path, &self.mask)
    }
}

/// Z-buffered render of the textured mesh; back-facing triangles are culled
/// and the texture is sampled bilinearly at the interpolated UV.
#[allow(clippy::too_many_arguments)]
pub fn render_mesh(
    mesh: &MeshInstance,
    triangles: &[[usize; 3]],
    uv: &[[f64; 2]],
    texture: &RgbImage,
    camera: &AffineCamera,
    width: usize,
    height: usize,
    background: [f32; 3],
) -> RenderedView {
    let weights = triangle_weights(mesh, triangles, camera);
    let projected = project_triangles(mesh, triangles, camera);
    let (_, owner) = depth_buffer(&projected, width, height, |ti| weights[ti] > 0.0);
    let mut image = RgbImage::new(width, height, background);
    let mut mask = vec![false; width * height];
    let (tw, th) = (texture.width() as f64, texture.height() as f64);
    image
        .pixels_mut()
        .par_chunks_mut(width)
        .zip(mask.par_chunks_mut(width))
        .enumerate()
        .for_each(|(y, (row, mrow))| {
            for x in 0..width {
                let Some(ti) = owner[y * width + x] else {
                    continue;
                };
                let ti = ti as usize;
                let pt = projected[ti].as_ref().expect("owners are rasterized");
                let b = pt
                    .raster
                    .barycentric(&Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
                let t = triangles[ti];
                let u = b[0] * uv[t[0]][0] + b[1] * uv[t[1]][0] + b[2] * uv[t[2]][0];
                let v = b[0] * uv[t[0]][1] + b[1] * uv[t[1]][1] + b[2] * uv[t[2]][1];
                let (sx, sy) = ((u * tw).clamp(0.0, tw), (v * th).clamp(0.0, th));
                if let Some(c) = texture.sample_bilinear(sx, sy) {
                    row[x] = c;
                    mrow[x] = true;
                }
            }
        });
    RenderedView { image, mask }
}

/// Renders the model instance `(α, ψ)` with a texture under `camera`;
/// `ψ = 0` gives the expression-neutral face.
#[allow(clippy::too_many_arguments)]
pub fn render_view(
    model: &PcaShapeModel,
    blendshapes: &BlendshapeSet,
    alpha: &ShapeCoefficients,
    psi: &ExpressionCoefficients,
    texture: &RgbImage,
    camera: &AffineCamera,
    width: usize,
    height: usize,
    background: [f32; 3],
) -> Result<RenderedView> {
    let mesh = model.generate_shape_with_expression(blendshapes, alpha, psi)?;
    Ok(render_mesh(
        &mesh,
        model.triangles(),
        model.uv_coords(),
        texture,
        camera,
        width,
        height,
        background,
    ))
}
