//! Affine camera estimation from 2D–3D correspondences.
//!
//! The estimator normalizes both point sets with similarity transforms
//! (centroid at the origin, RMS distance √2 for image points and √3 for model
//! points), solves the linear least-squares problem for the eight free entries
//! of the normalized camera, and denormalizes with `C = T⁻¹ C̃ U`.
//!
//! Image coordinates follow the usual raster convention (x right, y down), so
//! the camera frame is right-handed with its forward axis pointing into the
//! scene along `r₁ × r₂`.

use nalgebra::{
    DMatrix, DVector, Matrix2x4, Matrix3, Matrix3x4, Matrix4, Rotation3, Unit, Vector2, Vector3,
    Vector4,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest one count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineCamera {
    /// The two free rows; the third row is always `(0, 0, 0, 1)`.
    rows: [[f64; 4]; 2],
}

impl AffineCamera {
    pub fn from_rows(top: Matrix2x4<f64>) -> Self {
        Self {
            rows: [
                [top[(0, 0)], top[(0, 1)], top[(0, 2)], top[(0, 3)]],
                [top[(1, 0)], top[(1, 1)], top[(1, 2)], top[(1, 3)]],
            ],
        }
    }

    /// Fails unless the bottom row is exactly `(0, 0, 0, 1)`.
    pub fn from_matrix(m: Matrix3x4<f64>) -> Result<Self> {
        if m.row(2).iter().ne([0.0, 0.0, 0.0, 1.0].iter()) {
            return Err(Error::InvalidArgument(format!(
                "affine camera needs bottom row (0,0,0,1), got {:?}",
                m.row(2).iter().collect::<Vec<_>>()
            )));
        }
        Ok(Self::from_rows(m.fixed_rows::<2>(0).into_owned()))
    }

    /// Scaled orthographic camera for a model rotated by `rotation`, with the
    /// image y axis pointing down.
    pub fn from_pose(scale: f64, rotation: &Rotation3<f64>, translation: Vector2<f64>) -> Self {
        let r = rotation.matrix();
        Self {
            rows: [
                [
                    scale * r[(0, 0)],
                    scale * r[(0, 1)],
                    scale * r[(0, 2)],
                    translation.x,
                ],
                [
                    -scale * r[(1, 0)],
                    -scale * r[(1, 1)],
                    -scale * r[(1, 2)],
                    translation.y,
                ],
            ],
        }
    }

    pub fn matrix(&self) -> Matrix3x4<f64> {
        let [a, b] = self.rows;
        Matrix3x4::new(
            a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3], 0.0, 0.0, 0.0, 1.0,
        )
    }

    pub fn row3(&self, i: usize) -> Vector3<f64> {
        let r = &self.rows[i];
        Vector3::new(r[0], r[1], r[2])
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.rows[0][3], self.rows[1][3])
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        let [a, b] = &self.rows;
        Vector2::new(
            a[0] * p.x + a[1] * p.y + a[2] * p.z + a[3],
            b[0] * p.x + b[1] * p.y + b[2] * p.z + b[3],
        )
    }

    /// Projects a homogeneous point; the result's implicit third component is
    /// `X.w`, which must be 1 for an affine point.
    pub fn project_homogeneous(&self, x: &Vector4<f64>) -> Result<Vector2<f64>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite point".into()));
        }
        let p = self.matrix() * x;
        Ok(Vector2::new(p.x / p.z, p.y / p.z))
    }

    /// Orthonormal camera axes `(right, down, forward)` from Gram–Schmidt on the
    /// first two rows. Returns `None` when the rows are (nearly) parallel.
    pub fn rotation_axes(&self) -> Option<[Unit<Vector3<f64>>; 3]> {
        let r1 = self.row3(0);
        let r2 = self.row3(1);
        let u1 = Unit::try_new(r1, 1e-12)?;
        let u2 = Unit::try_new(r2 - u1.into_inner() * u1.dot(&r2), 1e-12)?;
        let u3 = Unit::new_normalize(u1.cross(&u2));
        Some([u1, u2, u3])
    }

    /// Unit viewing direction (into the scene) in model coordinates.
    pub fn forward(&self) -> Unit<Vector3<f64>> {
        self.rotation_axes()
            .map(|[_, _, f]| f)
            .unwrap_or_else(Vector3::z_axis)
    }

    /// Unit direction from the model toward the camera.
    pub fn toward_camera(&self) -> Unit<Vector3<f64>> {
        -self.forward()
    }

    /// Depth along the viewing direction: larger is farther from the camera.
    #[inline]
    pub fn depth(&self, p: &Vector3<f64>) -> f64 {
        self.forward().dot(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityNormalization {
    pub transform2d: Matrix3<f64>,
    pub transform3d: Matrix4<f64>,
}

impl SimilarityNormalization {
    pub fn apply2d(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let h = self.transform2d * p.push(1.0);
        Vector2::new(h.x, h.y)
    }

    pub fn apply3d(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = self.transform3d * p.push(1.0);
        Vector3::new(h.x, h.y, h.z)
    }
}

fn centroid_and_rms<const D: usize>(
    points: &[nalgebra::SVector<f64, D>],
) -> (nalgebra::SVector<f64, D>, f64) {
    let n = points.len() as f64;
    let centroid = points
        .iter()
        .fold(nalgebra::SVector::<f64, D>::zeros(), |acc, p| acc + p)
        / n;
    let ms = points
        .iter()
        .map(|p| (p - centroid).norm_squared())
        .sum::<f64>()
        / n;
    (centroid, ms.sqrt())
}

pub fn normalize_points_2d(points: &[Vector2<f64>]) -> Result<Matrix3<f64>> {
    if points.is_empty() {
        return Err(Error::Degenerate("no 2D points".into()));
    }
    let (c, rms) = centroid_and_rms(points);
    if !(rms > 0.0) || !rms.is_finite() {
        return Err(Error::Degenerate("all 2D points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / rms;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * c.x,
        0.0,
        s,
        -s * c.y,
        0.0,
        0.0,
        1.0,
    ))
}

pub fn normalize_points_3d(points: &[Vector3<f64>]) -> Result<Matrix4<f64>> {
    if points.is_empty() {
        return Err(Error::Degenerate("no 3D points".into()));
    }
    let (c, rms) = centroid_and_rms(points);
    if !(rms > 0.0) || !rms.is_finite() {
        return Err(Error::Degenerate("all 3D points coincide".into()));
    }
    let s = 3f64.sqrt() / rms;
    #[rustfmt::skip]
    let u = Matrix4::new(
        s, 0.0, 0.0, -s * c.x,
        0.0, s, 0.0, -s * c.y,
        0.0, 0.0, s, -s * c.z,
        0.0, 0.0, 0.0, 1.0,
    );
    Ok(u)
}

pub fn normalize_points(
    points2d: &[Vector2<f64>],
    points3d: &[Vector3<f64>],
) -> Result<SimilarityNormalization> {
    Ok(SimilarityNormalization {
        transform2d: normalize_points_2d(points2d)?,
        transform3d: normalize_points_3d(points3d)?,
    })
}

/// Camera estimate together with its normalized-space intermediates.
#[derive(Debug, Clone)]
pub struct AffineEstimate {
    pub camera: AffineCamera,
    pub normalized: Matrix3x4<f64>,
    pub normalization: SimilarityNormalization,
}

impl AffineEstimate {
    /// Sum of squared residuals of a normalized camera on the normalized points.
    pub fn normalized_residual(
        &self,
        normalized_camera: &Matrix3x4<f64>,
        points2d: &[Vector2<f64>],
        points3d: &[Vector3<f64>],
    ) -> f64 {
        points2d
            .iter()
            .zip(points3d)
            .map(|(x, big_x)| {
                let xt = self.normalization.apply2d(x);
                let pt = normalized_camera * self.normalization.apply3d(big_x).push(1.0);
                (Vector2::new(pt.x, pt.y) - xt).norm_squared()
            })
            .sum()
    }
}

pub fn estimate_affine_camera(
    landmarks2d: &[Vector2<f64>],
    model_points3d: &[Vector3<f64>],
) -> Result<AffineCamera> {
    estimate_affine_camera_detailed(landmarks2d, model_points3d).map(|e| e.camera)
}

pub fn estimate_affine_camera_detailed(
    landmarks2d: &[Vector2<f64>],
    model_points3d: &[Vector3<f64>],
) -> Result<AffineEstimate> {
    if landmarks2d.len() != model_points3d.len() {
        return Err(Error::dims(
            "3D correspondences",
            landmarks2d.len(),
            model_points3d.len(),
        ));
    }
    let k = landmarks2d.len();
    if k < 4 {
        return Err(Error::InsufficientCorrespondences {
            required: 4,
            actual: k,
        });
    }
    let normalization = normalize_points(landmarks2d, model_points3d)?;

    // Each image row of C̃ only sees its own coordinate, so the 2K×8 system
    // splits into two K×4 problems sharing one design matrix.
    let mut design = DMatrix::zeros(k, 4);
    let mut rhs = DMatrix::zeros(k, 2);
    for i in 0..k {
        let xt = normalization.apply3d(&model_points3d[i]);
        design[(i, 0)] = xt.x;
        design[(i, 1)] = xt.y;
        design[(i, 2)] = xt.z;
        design[(i, 3)] = 1.0;
        let yt = normalization.apply2d(&landmarks2d[i]);
        rhs[(i, 0)] = yt.x;
        rhs[(i, 1)] = yt.y;
    }
    let solution = solve_least_squares(design, rhs)?;

    let mut normalized = Matrix3x4::zeros();
    for c in 0..4 {
        normalized[(0, c)] = solution[(c, 0)];
        normalized[(1, c)] = solution[(c, 1)];
    }
    normalized[(2, 3)] = 1.0;

    let t_inv = normalization
        .transform2d
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("2D normalization is singular".into()))?;
    let full = t_inv * normalized * normalization.transform3d;
    Ok(AffineEstimate {
        camera: AffineCamera::from_rows(full.fixed_rows::<2>(0).into_owned()),
        normalized,
        normalization,
    })
}

/// Minimum-norm least-squares solve through the SVD; fails if `a` does not
/// have full column rank.
pub(crate) fn solve_least_squares(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cols = a.ncols();
    let svd = a.svd(true, true);
    let rank = numerical_rank(&svd.singular_values);
    if rank < cols {
        return Err(Error::RankDeficient {
            rank,
            required: cols,
        });
    }
    let max = svd.singular_values.max();
    svd.solve(&b, RANK_TOLERANCE * max)
        .map_err(|e| Error::Degenerate(e.to_string()))
}

pub(crate) fn numerical_rank(singular_values: &DVector<f64>) -> usize {
    let max = singular_values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    singular_values
        .iter()
        .filter(|&&s| s > RANK_TOLERANCE * max)
        .count()
}
