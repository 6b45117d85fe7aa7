//! Self-contained synthetic face model.
//!
//! The mesh is a regular grid over a patch of a flattened ellipsoid with a nose
//! bump, parameterized by azimuth θ (model x, positive toward image-right in a
//! frontal view) and elevation φ (model y, up). The face looks along +z.
//! Grid coordinates double as UV coordinates, so the isomap is an
//! equirectangular unwrap of the patch.
//!
//! The PCA basis is built from random low-frequency fields, orthogonalized
//! against the 12-dimensional span of affine transforms of the mean so that
//! shape coefficients cannot mimic a change of camera, and against the
//! blendshapes at the fixed landmark vertices so identity and expression do
//! not compete for the same landmark motion. Blendshapes are compactly
//! supported, localized displacement fields (jaw, smile, brows, …).

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::camera::AffineCamera;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::landmarks::{Landmark, LandmarkId, LandmarkSet, LandmarkVertexMapping};
use crate::model::{BlendshapeSet, MeshInstance, PcaShapeModel};

#[derive(Debug, Clone)]
pub struct SyntheticFaceConfig {
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub num_components: usize,
    pub num_blendshapes: usize,
    pub seed: u64,
    /// Half extent of the patch in azimuth, degrees.
    pub yaw_extent_deg: f64,
    /// Half extent of the patch in elevation, degrees.
    pub pitch_extent_deg: f64,
    /// Per-coordinate RMS displacement of the first component at α = 1.
    pub shape_variation: f64,
}

impl Default for SyntheticFaceConfig {
    fn default() -> Self {
        Self {
            grid_cols: 64,
            grid_rows: 48,
            num_components: 10,
            num_blendshapes: 5,
            seed: 0,
            yaw_extent_deg: 100.0,
            pitch_extent_deg: 70.0,
            shape_variation: 0.03,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFace {
    pub config: SyntheticFaceConfig,
    pub model: PcaShapeModel,
    pub blendshapes: BlendshapeSet,
    pub mapping: LandmarkVertexMapping,
    /// Vertex of every landmark of the 68-point layout, contour ones included.
    pub landmark_vertices: BTreeMap<LandmarkId, usize>,
}

/// Fixed (non-contour) landmarks of the 68-point layout as (id, θ°, φ°).
const FIXED_LANDMARKS: &[(LandmarkId, f64, f64)] = &[
    (9, 0.0, -62.0),
    // brows
    (18, -50.0, 28.0),
    (19, -41.0, 31.5),
    (20, -31.0, 33.0),
    (21, -21.0, 31.5),
    (22, -12.0, 28.0),
    (23, 12.0, 28.0),
    (24, 21.0, 31.5),
    (25, 31.0, 33.0),
    (26, 41.0, 31.5),
    (27, 50.0, 28.0),
    // nose bridge and base
    (28, 0.0, 18.0),
    (29, 0.0, 10.0),
    (30, 0.0, 2.0),
    (31, 0.0, -6.0),
    (32, -12.0, -14.0),
    (33, -6.0, -16.0),
    (34, 0.0, -17.0),
    (35, 6.0, -16.0),
    (36, 12.0, -14.0),
    // eyes
    (37, -44.0, 18.0),
    (38, -36.0, 22.0),
    (39, -26.0, 22.0),
    (40, -18.0, 18.0),
    (41, -26.0, 14.0),
    (42, -36.0, 14.0),
    (43, 18.0, 18.0),
    (44, 26.0, 22.0),
    (45, 36.0, 22.0),
    (46, 44.0, 18.0),
    (47, 36.0, 14.0),
    (48, 26.0, 14.0),
    // outer lips
    (49, -26.0, -36.0),
    (50, -16.0, -31.0),
    (51, -6.0, -29.0),
    (52, 0.0, -30.0),
    (53, 6.0, -29.0),
    (54, 16.0, -31.0),
    (55, 26.0, -36.0),
    (56, 16.0, -43.0),
    (57, 6.0, -45.0),
    (58, 0.0, -46.0),
    (59, -6.0, -45.0),
    (60, -16.0, -43.0),
    // inner lips
    (61, -20.0, -36.0),
    (62, -8.0, -34.0),
    (63, 0.0, -34.0),
    (64, 8.0, -34.0),
    (65, 20.0, -36.0),
    (66, 8.0, -39.0),
    (67, 0.0, -39.0),
    (68, -8.0, -39.0),
];

/// Point on the jaw line; `k = 0..=16` runs from the left ear (landmark 1)
/// through the chin (landmark 9) to the right ear (landmark 17).
fn jaw_point(k: f64) -> (f64, f64) {
    let beta = (180.0 + 90.0 * k / 8.0).to_radians();
    (78.0 * beta.cos(), 10.0 + 72.0 * beta.sin())
}

fn gauss2(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

impl SyntheticFace {
    pub fn generate(config: &SyntheticFaceConfig) -> Result<Self> {
        let (cols, rows) = (config.grid_cols, config.grid_rows);
        if cols < 2 || rows < 2 {
            return Err(Error::InvalidArgument(
                "grid needs at least 2×2 vertices".into(),
            ));
        }
        let n = cols * rows;
        let m = config.num_components;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let angles = |i: usize| -> (f64, f64) {
            let (c, r) = (i % cols, i / cols);
            let u = c as f64 / (cols - 1) as f64;
            let v = r as f64 / (rows - 1) as f64;
            (
                (u - 0.5) * 2.0 * config.yaw_extent_deg,
                (0.5 - v) * 2.0 * config.pitch_extent_deg,
            )
        };

        let mut mean = DVector::zeros(3 * n);
        let mut uv = Vec::with_capacity(n);
        for i in 0..n {
            let (th, ph) = angles(i);
            let (t, p) = (th.to_radians(), ph.to_radians());
            let nose = 0.22 * gauss2(th / 1.6, ph + 4.0, 9.0);
            let chin = 0.05 * gauss2(th, ph + 55.0, 14.0);
            let pos = Vector3::new(
                0.8 * t.sin() * p.cos(),
                1.0 * p.sin(),
                0.7 * t.cos() * p.cos() + nose + chin,
            );
            mean.fixed_rows_mut::<3>(3 * i).copy_from(&pos);
            let (c, r) = (i % cols, i / cols);
            uv.push([c as f64 / (cols - 1) as f64, r as f64 / (rows - 1) as f64]);
        }

        let mut triangles = Vec::with_capacity(2 * (cols - 1) * (rows - 1));
        for r in 0..rows - 1 {
            for c in 0..cols - 1 {
                let i00 = r * cols + c;
                let i10 = i00 + 1;
                let i01 = i00 + cols;
                let i11 = i01 + 1;
                triangles.push([i00, i01, i10]);
                triangles.push([i10, i01, i11]);
            }
        }

        let blendshapes = Self::make_blendshapes(config, n, &angles, &mut rng)?;

        let to_vertex = |th: f64, ph: f64| -> usize {
            let c = ((th + config.yaw_extent_deg) / (2.0 * config.yaw_extent_deg)
                * (cols - 1) as f64)
                .round()
                .clamp(0.0, (cols - 1) as f64) as usize;
            let r = ((config.pitch_extent_deg - ph) / (2.0 * config.pitch_extent_deg)
                * (rows - 1) as f64)
                .round()
                .clamp(0.0, (rows - 1) as f64) as usize;
            r * cols + c
        };
        let mut landmark_vertices = BTreeMap::new();
        let mut pairs = BTreeMap::new();
        for &(id, th, ph) in FIXED_LANDMARKS {
            let v = to_vertex(th, ph);
            landmark_vertices.insert(id, v);
            pairs.insert(id, v);
        }
        for k in (0..17).filter(|&k| k != 8) {
            let (th, ph) = jaw_point(k as f64);
            landmark_vertices.insert(k as LandmarkId + 1, to_vertex(th, ph));
        }

        // Columns ahead of the random smooth fields: the affine span of the
        // mean over all vertices and over the fixed landmark vertices alone,
        // then the expression decoupling fields. The QR factor's trailing
        // columns are orthonormal and free of all of them.
        //
        // Landmark-restricted affine freedom means a shape change never looks
        // like a camera change at the landmarks, so a camera estimated from
        // the mean shape is already exact for neutral faces.
        //
        // Over the fixed landmark vertices every coordinate of every basis
        // vector is orthogonal to every coordinate of every blendshape. Then
        // Σₖ Vₖᵀ M Bₖ = 0 for any 3×3 M, in particular CᵀC, so identity and
        // expression stay decoupled in the landmark fit under any camera.
        let l = blendshapes.len();
        let lead = 24 + 9 * l;
        if 3 * n < lead + m {
            return Err(Error::InvalidArgument(format!(
                "{n} vertices cannot hold {m} components next to {lead} constraint fields"
            )));
        }
        let mut stack = DMatrix::zeros(3 * n, lead + m);
        let fixed_vertices: BTreeSet<usize> = pairs.values().copied().collect();
        for i in 0..n {
            let p = mean.fixed_rows::<3>(3 * i).into_owned();
            let at_landmark = fixed_vertices.contains(&i);
            for axis in 0..3 {
                for (k, val) in [p.x, p.y, p.z, 1.0].into_iter().enumerate() {
                    stack[(3 * i + axis, 4 * axis + k)] = val;
                    if at_landmark {
                        stack[(3 * i + axis, 12 + 4 * axis + k)] = val;
                    }
                }
            }
        }
        for j in 0..l {
            for &v in &fixed_vertices {
                for c in 0..3 {
                    for d in 0..3 {
                        stack[(3 * v + c, 24 + 9 * j + 3 * c + d)] =
                            blendshapes.displacements()[(3 * v + d, j)];
                    }
                }
            }
        }
        for j in 0..m {
            let terms: Vec<(f64, f64, f64, f64, f64, usize)> = (0..8)
                .map(|_| {
                    (
                        rng.sample::<f64, _>(StandardNormal),
                        rng.random_range(0..4) as f64,
                        rng.random_range(0..4) as f64,
                        rng.random_range(0.0..2.0 * PI),
                        rng.random_range(0.0..2.0 * PI),
                        rng.random_range(0..3),
                    )
                })
                .collect();
            for i in 0..n {
                let [u, v] = uv[i];
                for &(a, p, q, f1, f2, axis) in &terms {
                    stack[(3 * i + axis, lead + j)] +=
                        a * (p * PI * u + f1).cos() * (q * PI * v + f2).cos();
                }
            }
        }
        let q = stack.qr().q();
        let basis = q.columns(lead, m).into_owned();
        let scale = config.shape_variation * ((3 * n) as f64).sqrt();
        let stddevs = DVector::from_fn(m, |j, _| scale / (1.0 + 0.25 * j as f64));
        let model = PcaShapeModel::new(mean, basis, stddevs, triangles, uv)?;

        // Candidate outline vertices: a band around each half of the jaw line.
        let band = |range: std::ops::Range<f64>| -> Vec<usize> {
            let curve: Vec<(f64, f64)> = (0..=60)
                .map(|s| jaw_point(range.start + (range.end - range.start) * s as f64 / 60.0))
                .collect();
            (0..n)
                .filter(|i| !fixed_vertices.contains(i))
                .filter(|&i| {
                    let (th, ph) = angles(i);
                    curve.iter().any(|&(ct, cp)| (th - ct).hypot(ph - cp) < 6.0)
                })
                .collect()
        };
        let contour_left = band(-0.5..7.3);
        let contour_right = band(8.7..16.5);
        let mapping = LandmarkVertexMapping::new(pairs, contour_left, contour_right)?;
        mapping.validate(n)?;

        Ok(Self {
            config: config.clone(),
            model,
            blendshapes,
            mapping,
            landmark_vertices,
        })
    }

    fn make_blendshapes(
        config: &SyntheticFaceConfig,
        n: usize,
        angles: &dyn Fn(usize) -> (f64, f64),
        rng: &mut ChaCha8Rng,
    ) -> Result<BlendshapeSet> {
        let l = config.num_blendshapes;
        let mut b = DMatrix::zeros(3 * n, l);
        // Weights below this are cut to zero so every blendshape has compact support.
        const CUTOFF: f64 = 1e-3;
        for j in 0..l {
            let random_center = (
                rng.random_range(-45.0..45.0),
                rng.random_range(-50.0..35.0),
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize()
                    * 0.04,
            );
            for i in 0..n {
                let (th, ph) = angles(i);
                let (w, d) = match j {
                    0 => {
                        let below = 1.0 / (1.0 + ((ph + 30.0) / 4.0).exp());
                        (
                            gauss2(th, 0.0, 30.0) * below,
                            Vector3::new(0.0, -0.10, -0.02),
                        )
                    }
                    1 => (
                        gauss2(th.abs() - 26.0, ph + 36.0, 9.0),
                        Vector3::new(0.03 * th.signum(), 0.04, 0.0),
                    ),
                    2 => (
                        gauss2(th.abs() - 31.0, ph - 31.0, 11.0),
                        Vector3::new(0.0, 0.05, 0.005),
                    ),
                    3 => (
                        gauss2(th, ph + 37.0, 12.0),
                        Vector3::new(-0.02 * th.signum(), 0.0, 0.05),
                    ),
                    4 => (
                        gauss2(th.abs() - 31.0, ph - 19.0, 6.0),
                        Vector3::new(0.0, -0.025, 0.0),
                    ),
                    _ => {
                        let (ct, cp, d) = random_center;
                        (gauss2(th - ct, ph - cp, 12.0), d)
                    }
                };
                if w >= CUTOFF {
                    b.fixed_view_mut::<3, 1>(3 * i, j).copy_from(&(d * w));
                }
            }
        }
        BlendshapeSet::new(b)
    }

    /// Azimuth/elevation (degrees) of a UV position.
    pub fn uv_to_angles(&self, u: f64, v: f64) -> (f64, f64) {
        (
            (u - 0.5) * 2.0 * self.config.yaw_extent_deg,
            (0.5 - v) * 2.0 * self.config.pitch_extent_deg,
        )
    }

    /// Projects the full 68-point layout of `mesh` through `camera`.
    pub fn project_landmarks(&self, mesh: &MeshInstance, camera: &AffineCamera) -> LandmarkSet {
        let entries = self
            .landmark_vertices
            .iter()
            .map(|(&id, &v)| {
                let p = camera.project(&mesh.vertex(v));
                Landmark::new(id, p.x, p.y)
            })
            .collect();
        LandmarkSet::new(entries).expect("ids are unique and positions finite")
    }

    /// Face-like albedo with eyes, brows, nostrils, lips and hairline, sampled
    /// into a `resolution × resolution` isomap.
    pub fn face_texture(&self, resolution: usize) -> RgbImage {
        RgbImage::from_fn(resolution, resolution, |x, y| {
            let (u, v) = (
                (x as f64 + 0.5) / resolution as f64,
                (y as f64 + 0.5) / resolution as f64,
            );
            let (th, ph) = self.uv_to_angles(u, v);
            face_albedo(th, ph)
        })
    }

    /// Slowly varying colour field, used where resampling error must stay
    /// well below one 8-bit step.
    pub fn smooth_texture(&self, resolution: usize) -> RgbImage {
        RgbImage::from_fn(resolution, resolution, |x, y| {
            let (u, v) = (
                (x as f64 + 0.5) / resolution as f64,
                (y as f64 + 0.5) / resolution as f64,
            );
            [
                0.55 + 0.3 * (PI * u).sin() * (0.5 * PI * v).cos(),
                0.35 + 0.3 * v,
                0.3 + 0.25 * (2.0 * PI * u).cos() * 0.5 + 0.2 * u,
            ]
            .map(|c| c as f32)
        })
    }
}

fn face_albedo(th: f64, ph: f64) -> [f32; 3] {
    let skin = Vector3::new(0.82, 0.64, 0.53);
    let mut c = skin * (0.92 + 0.08 * (ph / 70.0));
    let mix = |c: &mut Vector3<f64>, target: Vector3<f64>, w: f64| {
        let w = w.clamp(0.0, 1.0);
        *c = *c * (1.0 - w) + target * w;
    };
    // hair at the top and sides
    let hair = Vector3::new(0.18, 0.12, 0.08);
    mix(&mut c, hair, 1.0 / (1.0 + (-(ph - 50.0) / 3.0).exp()));
    mix(&mut c, hair, 1.0 / (1.0 + (-(th.abs() - 82.0) / 3.0).exp()));
    // eyes: whites with a dark iris
    for side in [-1.0, 1.0] {
        let (ex, ey) = (side * 31.0, 18.0);
        let d = (((th - ex) / 13.0).powi(2) + ((ph - ey) / 4.5).powi(2)).sqrt();
        mix(
            &mut c,
            Vector3::new(0.92, 0.9, 0.88),
            1.0 / (1.0 + ((d - 1.0) / 0.08).exp()),
        );
        mix(
            &mut c,
            Vector3::new(0.12, 0.08, 0.06),
            gauss2(th - ex, (ph - ey) * 1.3, 3.2),
        );
        // brow arch
        let by = 28.0 + 5.0 * (1.0 - ((th - side * 31.0) / 19.0).powi(2)).max(0.0);
        let bw = gauss2(0.0, ph - by, 1.8) * (1.0 / (1.0 + (((th - ex).abs() - 19.0) / 1.5).exp()));
        mix(&mut c, Vector3::new(0.25, 0.17, 0.12), bw);
        // nostril
        mix(
            &mut c,
            Vector3::new(0.35, 0.2, 0.18),
            gauss2(th - side * 6.0, ph + 15.5, 2.0),
        );
    }
    // lips and mouth opening
    let d = ((th / 26.0).powi(2) + ((ph + 37.0) / 8.5).powi(2)).sqrt();
    mix(
        &mut c,
        Vector3::new(0.68, 0.28, 0.3),
        1.0 / (1.0 + ((d - 1.0) / 0.06).exp()),
    );
    let inner = ((th / 20.0).powi(2) + ((ph + 36.5) / 2.0).powi(2)).sqrt();
    mix(
        &mut c,
        Vector3::new(0.2, 0.05, 0.06),
        1.0 / (1.0 + ((inner - 1.0) / 0.1).exp()),
    );
    [c.x as f32, c.y as f32, c.z as f32]
}
