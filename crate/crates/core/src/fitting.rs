//! Shape, expression and contour fitting against 2D landmarks.
//!
//! Identity coefficients come from a regularized linear least-squares solve of
//!
//! ```text
//! E(α) = Σᵢ (y_model,i − yᵢ)² / (2σᵢ²) + λ‖α‖²
//! ```
//!
//! summed over the two image coordinates of every landmark, where the model
//! projection uses the σ-scaled basis rows of the landmark vertices. Expression
//! coefficients are the non-negative least-squares fit of the blendshapes to
//! what remains. The two solves alternate with the camera held fixed;
//! [`fit_frame`] wraps that in camera re-estimation and contour refinement.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{estimate_affine_camera, numerical_rank, AffineCamera, RANK_TOLERANCE};
use crate::error::{Error, Result};
use crate::landmarks::{ContourSide, LandmarkId, LandmarkSet, LandmarkVertexMapping};
use crate::model::{
    BlendshapeSet, ExpressionCoefficients, MeshInstance, PcaShapeModel, ShapeCoefficients,
};
use crate::nnls::nnls;

/// One 2D landmark tied to one model vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub landmark: LandmarkId,
    pub position: Vector2<f64>,
    /// σ²₂D of the landmark (1 when the landmark file gives none).
    pub variance: f64,
    pub vertex: usize,
}

/// Pairs every landmark with a vertex, either through the fixed mapping or
/// through a contour assignment. Landmarks with neither are skipped.
pub fn correspondences(
    landmarks: &LandmarkSet,
    mapping: &LandmarkVertexMapping,
    contour_assignments: &BTreeMap<LandmarkId, usize>,
) -> Vec<Correspondence> {
    landmarks
        .entries()
        .iter()
        .filter_map(|l| {
            let vertex = mapping
                .vertex_for(l.id)
                .or_else(|| contour_assignments.get(&l.id).copied())?;
            Some(Correspondence {
                landmark: l.id,
                position: l.point(),
                variance: l.variance.unwrap_or(1.0),
                vertex,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Weight λ of the ‖α‖² prior.
    pub lambda: f64,
    /// Upper bound on shape/expression alternations.
    pub max_alternations: usize,
    /// Alternation stops once max |Δα|, |Δψ| falls below this.
    pub tolerance: f64,
    /// Camera / fit / contour rounds in [`fit_frame`].
    pub outer_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            max_alternations: 10,
            tolerance: 1e-5,
            outer_iterations: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub alpha: ShapeCoefficients,
    pub psi: ExpressionCoefficients,
    pub camera: AffineCamera,
    /// Sum of squared reprojection errors (pixel²) after each alternation of
    /// the final round.
    pub residuals: Vec<f64>,
    pub contour_assignments: BTreeMap<LandmarkId, usize>,
    pub converged: bool,
}

impl FitResult {
    pub fn mesh(&self, model: &PcaShapeModel, blendshapes: &BlendshapeSet) -> Result<MeshInstance> {
        model.generate_shape_with_expression(blendshapes, &self.alpha, &self.psi)
    }
}

fn homogeneous_offset_rows(offset: Option<&DVector<f64>>, vertex: usize) -> Vector3<f64> {
    offset
        .map(|o| Vector3::new(o[3 * vertex], o[3 * vertex + 1], o[3 * vertex + 2]))
        .unwrap_or_else(Vector3::zeros)
}

/// Linear model `A α + c` of the stacked landmark projections.
fn shape_system(
    camera: &AffineCamera,
    model: &PcaShapeModel,
    corr: &[Correspondence],
    expression_offset: Option<&DVector<f64>>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if let Some(o) = expression_offset {
        if o.len() != 3 * model.num_vertices() {
            return Err(Error::dims(
                "expression offset",
                3 * model.num_vertices(),
                o.len(),
            ));
        }
    }
    let vertices: Vec<usize> = corr.iter().map(|c| c.vertex).collect();
    let (basis_h, mean_h) = model.landmark_basis_submatrix(&vertices)?;
    let m = model.num_components();
    let cam = camera.matrix();
    let mut a = DMatrix::zeros(2 * corr.len(), m);
    let mut c = DVector::zeros(2 * corr.len());
    for (k, cr) in corr.iter().enumerate() {
        // P is block diagonal, so each landmark only sees its own 4 rows.
        let block = basis_h.rows(4 * k, 4);
        let mut point_h = mean_h.fixed_rows::<4>(4 * k).into_owned();
        let off = homogeneous_offset_rows(expression_offset, cr.vertex);
        let mut xyz = point_h.fixed_rows_mut::<3>(0);
        xyz += off;
        for r in 0..2 {
            let row = cam.row(r);
            a.row_mut(2 * k + r).copy_from(&(row * block));
            c[2 * k + r] = (row * point_h)[0];
        }
    }
    Ok((a, c))
}

fn targets_and_weights(corr: &[Correspondence]) -> (DVector<f64>, DVector<f64>) {
    let mut y = DVector::zeros(2 * corr.len());
    let mut sqrt_w = DVector::zeros(2 * corr.len());
    for (k, cr) in corr.iter().enumerate() {
        y[2 * k] = cr.position.x;
        y[2 * k + 1] = cr.position.y;
        let w = (1.0 / (2.0 * cr.variance)).sqrt();
        sqrt_w[2 * k] = w;
        sqrt_w[2 * k + 1] = w;
    }
    (y, sqrt_w)
}

/// Value of the shape cost `E(α)` for the given correspondences.
pub fn shape_cost(
    camera: &AffineCamera,
    model: &PcaShapeModel,
    corr: &[Correspondence],
    lambda: f64,
    expression_offset: Option<&DVector<f64>>,
    alpha: &ShapeCoefficients,
) -> Result<f64> {
    let (a, c) = shape_system(camera, model, corr, expression_offset)?;
    let (y, sqrt_w) = targets_and_weights(corr);
    let alpha = DVector::from_column_slice(&alpha.alpha);
    let r = (a * &alpha + c - y).component_mul(&sqrt_w);
    Ok(r.norm_squared() + lambda * alpha.norm_squared())
}

/// Closed-form minimizer of the shape cost over explicit correspondences.
pub fn fit_shape_to(
    camera: &AffineCamera,
    model: &PcaShapeModel,
    corr: &[Correspondence],
    lambda: f64,
    expression_offset: Option<&DVector<f64>>,
) -> Result<ShapeCoefficients> {
    if corr.is_empty() {
        return Err(Error::InsufficientCorrespondences {
            required: 1,
            actual: 0,
        });
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let m = model.num_components();
    let (a, c) = shape_system(camera, model, corr, expression_offset)?;
    let (y, sqrt_w) = targets_and_weights(corr);
    let rows = a.nrows();

    // Stack [√W A; √λ I] α ≈ [√W (y − c); 0] and solve by SVD.
    let mut lhs = DMatrix::zeros(rows + m, m);
    let mut rhs = DVector::zeros(rows + m);
    for i in 0..rows {
        lhs.row_mut(i).copy_from(&(a.row(i) * sqrt_w[i]));
        rhs[i] = (y[i] - c[i]) * sqrt_w[i];
    }
    let sl = lambda.sqrt();
    for j in 0..m {
        lhs[(rows + j, j)] = sl;
    }
    let svd = lhs.svd(true, true);
    let rank = numerical_rank(&svd.singular_values);
    if rank < m {
        return Err(Error::RankDeficient { rank, required: m });
    }
    let max = svd.singular_values.max();
    let alpha = svd
        .solve(&rhs, RANK_TOLERANCE * max)
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok(ShapeCoefficients::new(alpha.as_slice().to_vec()))
}

/// Fits α to the landmarks that have a fixed vertex in `mapping`.
pub fn fit_shape(
    camera: &AffineCamera,
    model: &PcaShapeModel,
    landmarks: &LandmarkSet,
    mapping: &LandmarkVertexMapping,
    lambda: f64,
    expression_offset: Option<&DVector<f64>>,
) -> Result<ShapeCoefficients> {
    let corr = correspondences(landmarks, mapping, &BTreeMap::new());
    fit_shape_to(camera, model, &corr, lambda, expression_offset)
}

/// Weighted NNLS system `A ψ ≈ b` for the expression fit.
///
/// Rows carry the same `1/√(2σ²)` weights as the shape cost; with uniform
/// variances this leaves the minimizer unchanged.
pub fn expression_system(
    camera: &AffineCamera,
    blendshapes: &BlendshapeSet,
    corr: &[Correspondence],
    identity_shape: &MeshInstance,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let vertices: Vec<usize> = corr.iter().map(|c| c.vertex).collect();
    let b_h = blendshapes.landmark_submatrix(&vertices)?;
    let cam = camera.matrix();
    let (y, sqrt_w) = targets_and_weights(corr);
    let l = blendshapes.len();
    let mut a = DMatrix::zeros(2 * corr.len(), l);
    let mut b = DVector::zeros(2 * corr.len());
    for (k, cr) in corr.iter().enumerate() {
        if cr.vertex >= identity_shape.num_vertices() {
            return Err(Error::InvalidArgument(format!(
                "vertex {} out of range",
                cr.vertex
            )));
        }
        let block = b_h.rows(4 * k, 4);
        let p = camera.project(&identity_shape.vertex(cr.vertex));
        for r in 0..2 {
            let i = 2 * k + r;
            a.row_mut(i).copy_from(&(cam.row(r) * block * sqrt_w[i]));
            b[i] = (y[i] - p[r]) * sqrt_w[i];
        }
    }
    Ok((a, b))
}

pub fn fit_expressions_to(
    camera: &AffineCamera,
    blendshapes: &BlendshapeSet,
    corr: &[Correspondence],
    identity_shape: &MeshInstance,
) -> Result<ExpressionCoefficients> {
    if blendshapes.is_empty() {
        return Ok(ExpressionCoefficients::zeros(0));
    }
    let (a, b) = expression_system(camera, blendshapes, corr, identity_shape)?;
    Ok(ExpressionCoefficients::new(
        nnls(&a, &b).x.as_slice().to_vec(),
    ))
}

pub fn fit_expressions(
    camera: &AffineCamera,
    model: &PcaShapeModel,
    blendshapes: &BlendshapeSet,
    landmarks: &LandmarkSet,
    mapping: &LandmarkVertexMapping,
    identity_shape: &MeshInstance,
) -> Result<ExpressionCoefficients> {
    model.check_blendshapes(blendshapes)?;
    let corr = correspondences(landmarks, mapping, &BTreeMap::new());
    fit_expressions_to(camera, blendshapes, &corr, identity_shape)
}

/// Sum of squared 2D distances between projected mesh vertices and landmarks.
pub fn reprojection_residual(
    camera: &AffineCamera,
    mesh: &MeshInstance,
    corr: &[Correspondence],
) -> f64 {
    corr.iter()
        .map(|c| (camera.project(&mesh.vertex(c.vertex)) - c.position).norm_squared())
        .sum()
}

/// Alternates shape and expression fits over explicit correspondences.
pub fn fit_shape_and_expressions_to(
    camera: &AffineCamera,
    model: &PcaShapeModel,
    blendshapes: &BlendshapeSet,
    corr: &[Correspondence],
    options: &FitOptions,
) -> Result<FitResult> {
    if options.max_alternations == 0 {
        return Err(Error::InvalidArgument(
            "max_alternations must be >= 1".into(),
        ));
    }
    model.check_blendshapes(blendshapes)?;
    let mut alpha = ShapeCoefficients::zeros(model.num_components());
    let mut psi = ExpressionCoefficients::zeros(blendshapes.len());
    let mut residuals = Vec::with_capacity(options.max_alternations);
    let mut converged = false;
    for _ in 0..options.max_alternations {
        let offset = blendshapes.displacement(&psi)?;
        let new_alpha = fit_shape_to(camera, model, corr, options.lambda, Some(&offset))?;
        let identity = model.generate_shape(&new_alpha)?;
        let new_psi = fit_expressions_to(camera, blendshapes, corr, &identity)?;

        let delta =
            max_abs_diff(&alpha.alpha, &new_alpha.alpha).max(max_abs_diff(&psi.psi, &new_psi.psi));
        alpha = new_alpha;
        psi = new_psi;
        let mesh = model.generate_shape_with_expression(blendshapes, &alpha, &psi)?;
        residuals.push(reprojection_residual(camera, &mesh, corr));
        if delta < options.tolerance {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        alpha,
        psi,
        camera: *camera,
        residuals,
        contour_assignments: BTreeMap::new(),
        converged,
    })
}

pub fn fit_shape_and_expressions(
    camera: &AffineCamera,
    model: &PcaShapeModel,
    blendshapes: &BlendshapeSet,
    landmarks: &LandmarkSet,
    mapping: &LandmarkVertexMapping,
    options: &FitOptions,
) -> Result<FitResult> {
    let corr = correspondences(landmarks, mapping, &BTreeMap::new());
    if corr.is_empty() {
        return Err(Error::InsufficientCorrespondences {
            required: 1,
            actual: 0,
        });
    }
    fit_shape_and_expressions_to(camera, model, blendshapes, &corr, options)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// The outline facing the camera: the model's +x outline when the camera
/// sits on the +x side of the face.
pub fn front_facing_side(camera: &AffineCamera) -> ContourSide {
    if camera.toward_camera().x >= 0.0 {
        ContourSide::Right
    } else {
        ContourSide::Left
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContourRefinement {
    pub side: ContourSide,
    pub assignments: BTreeMap<LandmarkId, usize>,
    /// Contour landmarks on the far side, left out of the fit.
    pub excluded: Vec<LandmarkId>,
}

/// Nearest candidate in projection; ties go to the smaller vertex index.
pub fn closest_projected_vertex(
    camera: &AffineCamera,
    mesh: &MeshInstance,
    candidates: &[usize],
    target: &Vector2<f64>,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &v in candidates {
        let d = (camera.project(&mesh.vertex(v)) - target).norm_squared();
        best = match best {
            Some((bv, bd)) if bd < d || (bd == d && bv < v) => Some((bv, bd)),
            _ => Some((v, d)),
        };
    }
    best
}

pub fn refine_contour(
    camera: &AffineCamera,
    current_mesh: &MeshInstance,
    contour_landmarks: &LandmarkSet,
    mapping: &LandmarkVertexMapping,
) -> Result<ContourRefinement> {
    let side = front_facing_side(camera);
    let candidates = mapping.contour_candidates(side);
    if candidates.is_empty() {
        return Err(Error::Config(format!(
            "no contour candidates for the {side:?} outline"
        )));
    }
    let mut assignments = BTreeMap::new();
    let mut excluded = Vec::new();
    for l in contour_landmarks.entries() {
        match mapping.contour_side_of(l.id) {
            Some(s) if s == side => {
                let (v, _) = closest_projected_vertex(camera, current_mesh, candidates, &l.point())
                    .expect("candidate list is non-empty");
                assignments.insert(l.id, v);
            }
            Some(_) => excluded.push(l.id),
            None => {}
        }
    }
    Ok(ContourRefinement {
        side,
        assignments,
        excluded,
    })
}

/// Full single-frame fit: camera from the current shape, alternating shape and
/// expression fit, then contour refinement feeding the next round.
pub fn fit_frame(
    model: &PcaShapeModel,
    blendshapes: &BlendshapeSet,
    landmarks: &LandmarkSet,
    mapping: &LandmarkVertexMapping,
    options: &FitOptions,
) -> Result<FitResult> {
    let fixed = correspondences(landmarks, mapping, &BTreeMap::new());
    if fixed.len() < 4 {
        return Err(Error::InsufficientCorrespondences {
            required: 4,
            actual: fixed.len(),
        });
    }
    let contour_landmarks = landmarks.filtered(|id| mapping.contour_side_of(id).is_some());
    let use_contours = !contour_landmarks.is_empty() && mapping.has_contours();

    let mut mesh = model.mean_mesh();
    let mut assignments = BTreeMap::new();
    let mut result = None;
    for round in 0..options.outer_iterations.max(1) {
        if round > 0 && use_contours {
            let prev: &FitResult = result.as_ref().expect("set in the previous round");
            match refine_contour(&prev.camera, &mesh, &contour_landmarks, mapping) {
                Ok(r) => assignments = r.assignments,
                // The facing outline may legitimately have no candidates.
                Err(Error::Config(_)) => assignments.clear(),
                Err(e) => return Err(e),
            }
        }
        let corr = correspondences(landmarks, mapping, &assignments);
        let image: Vec<Vector2<f64>> = corr.iter().map(|c| c.position).collect();
        let points: Vec<Vector3<f64>> = corr.iter().map(|c| mesh.vertex(c.vertex)).collect();
        let camera = estimate_affine_camera(&image, &points)?;
        let mut fit = fit_shape_and_expressions_to(&camera, model, blendshapes, &corr, options)?;
        mesh = fit.mesh(model, blendshapes)?;
        fit.contour_assignments = assignments.clone();
        result = Some(fit);
    }
    Ok(result.expect("at least one round"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{SyntheticFace, SyntheticFaceConfig};
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn face() -> SyntheticFace {
        SyntheticFace::generate(&SyntheticFaceConfig {
            grid_cols: 40,
            grid_rows: 30,
            ..Default::default()
        })
        .unwrap()
    }

    fn camera(yaw_deg: f64) -> AffineCamera {
        AffineCamera::from_pose(
            90.0,
            &Rotation3::from_euler_angles(0.05, yaw_deg.to_radians(), -0.03),
            Vector2::new(128.0, 120.0),
        )
    }

    fn random_alpha(rng: &mut impl Rng, m: usize) -> ShapeCoefficients {
        ShapeCoefficients::new((0..m).map(|_| rng.random_range(-1.5..1.5)).collect())
    }

    fn fixed_landmarks(
        face: &SyntheticFace,
        mesh: &MeshInstance,
        cam: &AffineCamera,
    ) -> LandmarkSet {
        face.project_landmarks(mesh, cam)
            .filtered(|id| face.mapping.vertex_for(id).is_some())
    }

    #[test]
    fn mean_projection_gives_zero_alpha() {
        let f = face();
        let cam = camera(10.0);
        let lms = fixed_landmarks(&f, &f.model.mean_mesh(), &cam);
        for lambda in [0.1, 1.0, 10.0] {
            let alpha = fit_shape(&cam, &f.model, &lms, &f.mapping, lambda, None).unwrap();
            assert!(alpha.alpha.iter().all(|a| a.abs() < 1e-10));
        }
    }

    #[test]
    fn recovers_known_alpha_with_tiny_lambda() {
        let f = face();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = random_alpha(&mut rng, f.model.num_components());
        let mesh = f.model.generate_shape(&truth).unwrap();
        let cam = camera(-20.0);
        let lms = fixed_landmarks(&f, &mesh, &cam);
        let alpha = fit_shape(&cam, &f.model, &lms, &f.mapping, 1e-8, None).unwrap();
        for (a, t) in alpha.alpha.iter().zip(&truth.alpha) {
            assert!((a - t).abs() < 1e-4, "{a} vs {t}");
        }
    }

    #[test]
    fn fitted_alpha_beats_random_perturbations() {
        let f = face();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mesh = f.model.generate_shape(&random_alpha(&mut rng, 10)).unwrap();
        let cam = camera(5.0);
        let mut lms = fixed_landmarks(&f, &mesh, &cam).entries().to_vec();
        for l in &mut lms {
            l.position[0] += rng.random_range(-2.0..2.0);
            l.position[1] += rng.random_range(-2.0..2.0);
        }
        let lms = LandmarkSet::new(lms).unwrap();
        let corr = correspondences(&lms, &f.mapping, &BTreeMap::new());
        let alpha = fit_shape_to(&cam, &f.model, &corr, 1.0, None).unwrap();
        let best = shape_cost(&cam, &f.model, &corr, 1.0, None, &alpha).unwrap();
        for _ in 0..100 {
            let dir: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            let perturbed = ShapeCoefficients::new(
                alpha
                    .alpha
                    .iter()
                    .zip(&dir)
                    .map(|(a, d)| a + 1e-2 * d / norm)
                    .collect(),
            );
            assert!(shape_cost(&cam, &f.model, &corr, 1.0, None, &perturbed).unwrap() > best);
        }
    }

    #[test]
    fn cost_gradient_vanishes_at_solution() {
        let f = face();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mesh = f.model.generate_shape(&random_alpha(&mut rng, 10)).unwrap();
        let cam = camera(25.0);
        let mut lms = fixed_landmarks(&f, &mesh, &cam).entries().to_vec();
        for l in &mut lms {
            l.position[0] += rng.random_range(-1.0..1.0);
            l.variance = Some(rng.random_range(0.5..3.0));
        }
        let lms = LandmarkSet::new(lms).unwrap();
        let corr = correspondences(&lms, &f.mapping, &BTreeMap::new());
        let alpha = fit_shape_to(&cam, &f.model, &corr, 1.0, None).unwrap();
        let h = 1e-6;
        for j in 0..10 {
            let mut plus = alpha.clone();
            let mut minus = alpha.clone();
            plus.alpha[j] += h;
            minus.alpha[j] -= h;
            let g = (shape_cost(&cam, &f.model, &corr, 1.0, None, &plus).unwrap()
                - shape_cost(&cam, &f.model, &corr, 1.0, None, &minus).unwrap())
                / (2.0 * h);
            assert!(g.abs() <= 1e-6 * 1e3, "component {j}: {g}");
        }
    }

    #[test]
    fn doubling_variance_and_halving_lambda_is_equivalent() {
        let f = face();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mesh = f.model.generate_shape(&random_alpha(&mut rng, 10)).unwrap();
        let cam = camera(0.0);
        let mut lms = fixed_landmarks(&f, &mesh, &cam).entries().to_vec();
        for l in &mut lms {
            l.position[1] += rng.random_range(-3.0..3.0);
        }
        let base = LandmarkSet::new(lms.clone()).unwrap();
        for l in &mut lms {
            l.variance = Some(2.0);
        }
        let doubled = LandmarkSet::new(lms).unwrap();
        let a = fit_shape(&cam, &f.model, &base, &f.mapping, 1.0, None).unwrap();
        let b = fit_shape(&cam, &f.model, &doubled, &f.mapping, 0.5, None).unwrap();
        assert!(max_abs_diff(&a.alpha, &b.alpha) < 1e-8);
    }

    #[test]
    fn underdetermined_without_prior_is_rank_deficient() {
        let f = face();
        let cam = camera(0.0);
        let lms = fixed_landmarks(&f, &f.model.mean_mesh(), &cam).filtered(|id| id < 20);
        assert!(lms.len() * 2 < f.model.num_components());
        let err = fit_shape(&cam, &f.model, &lms, &f.mapping, 0.0, None).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
        assert!(fit_shape(&cam, &f.model, &lms, &f.mapping, 1.0, None).is_ok());
    }

    #[test]
    fn expressions_zero_when_identity_explains_landmarks() {
        let f = face();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let identity = f.model.generate_shape(&random_alpha(&mut rng, 10)).unwrap();
        let cam = camera(-8.0);
        let lms = fixed_landmarks(&f, &identity, &cam);
        let psi =
            fit_expressions(&cam, &f.model, &f.blendshapes, &lms, &f.mapping, &identity).unwrap();
        assert!(psi.psi.iter().all(|&p| p == 0.0), "{:?}", psi.psi);
    }

    #[test]
    fn recovers_known_expressions() {
        let f = face();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let alpha = random_alpha(&mut rng, 10);
        let identity = f.model.generate_shape(&alpha).unwrap();
        let truth = ExpressionCoefficients::new(vec![0.8, 0.0, 1.2, 0.3, 0.5]);
        let mesh = f
            .model
            .generate_shape_with_expression(&f.blendshapes, &alpha, &truth)
            .unwrap();
        let cam = camera(15.0);
        let lms = fixed_landmarks(&f, &mesh, &cam);
        let psi =
            fit_expressions(&cam, &f.model, &f.blendshapes, &lms, &f.mapping, &identity).unwrap();
        assert!(max_abs_diff(&psi.psi, &truth.psi) < 1e-4, "{:?}", psi.psi);
    }

    #[test]
    fn negative_ground_truth_coefficient_is_clamped() {
        let f = SyntheticFace::generate(&SyntheticFaceConfig {
            grid_cols: 40,
            grid_rows: 30,
            num_blendshapes: 3,
            ..Default::default()
        })
        .unwrap();
        let identity = f.model.mean_mesh();
        let truth = ExpressionCoefficients::new(vec![0.6, -0.9, 0.4]);
        let mesh = f
            .model
            .generate_shape_with_expression(&f.blendshapes, &ShapeCoefficients::zeros(10), &truth)
            .unwrap();
        let cam = camera(0.0);
        let lms = fixed_landmarks(&f, &mesh, &cam);
        let corr = correspondences(&lms, &f.mapping, &BTreeMap::new());
        let psi = fit_expressions_to(&cam, &f.blendshapes, &corr, &identity).unwrap();
        assert_eq!(psi.psi[1], 0.0);

        // Exhaustive enumeration of active sets on L = 3.
        let (a, b) = expression_system(&cam, &f.blendshapes, &corr, &identity).unwrap();
        let mut best = (b.norm_squared(), vec![0.0; 3]);
        for mask in 1u32..8 {
            let cols: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
            let sub = a.select_columns(cols.iter());
            let Some(inv) = (sub.transpose() * &sub).try_inverse() else {
                continue;
            };
            let sol = inv * sub.transpose() * &b;
            if sol.iter().any(|&v| v < 0.0) {
                continue;
            }
            let mut x = vec![0.0; 3];
            for (k, &c) in cols.iter().enumerate() {
                x[c] = sol[k];
            }
            let r = (&a * DVector::from_vec(x.clone()) - &b).norm_squared();
            if r < best.0 {
                best = (r, x);
            }
        }
        assert!(max_abs_diff(&psi.psi, &best.1) < 1e-8);
        let x = DVector::from_vec(psi.psi.clone());
        assert!(crate::nnls::kkt_violation(&a, &b, &x) < 1e-8);
    }

    #[test]
    fn empty_blendshape_set_yields_empty_psi() {
        let f = face();
        let empty = BlendshapeSet::empty(f.model.num_vertices());
        let cam = camera(0.0);
        let lms = fixed_landmarks(&f, &f.model.mean_mesh(), &cam);
        let psi = fit_expressions(
            &cam,
            &f.model,
            &empty,
            &lms,
            &f.mapping,
            &f.model.mean_mesh(),
        )
        .unwrap();
        assert!(psi.psi.is_empty());
    }

    #[test]
    fn alternation_recovers_alpha_and_psi() {
        let f = face();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let alpha = random_alpha(&mut rng, 10);
        let psi = ExpressionCoefficients::new(vec![0.5, 0.7, 0.0, 0.9, 0.2]);
        let mesh = f
            .model
            .generate_shape_with_expression(&f.blendshapes, &alpha, &psi)
            .unwrap();
        let cam = camera(12.0);
        let lms = fixed_landmarks(&f, &mesh, &cam);
        let opts = FitOptions {
            lambda: 1e-8,
            ..Default::default()
        };
        let fit =
            fit_shape_and_expressions(&cam, &f.model, &f.blendshapes, &lms, &f.mapping, &opts)
                .unwrap();
        assert!(fit.converged, "residuals {:?}", fit.residuals);
        assert!(fit.residuals.len() <= 10);
        assert!(max_abs_diff(&fit.alpha.alpha, &alpha.alpha) < 1e-3);
        assert!(max_abs_diff(&fit.psi.psi, &psi.psi) < 1e-3);
    }

    #[test]
    fn neutral_data_converges_in_two_alternations() {
        let f = face();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mesh = f.model.generate_shape(&random_alpha(&mut rng, 10)).unwrap();
        let cam = camera(-5.0);
        let lms = fixed_landmarks(&f, &mesh, &cam);
        let opts = FitOptions {
            lambda: 1e-8,
            ..Default::default()
        };
        let fit =
            fit_shape_and_expressions(&cam, &f.model, &f.blendshapes, &lms, &f.mapping, &opts)
                .unwrap();
        assert!(
            fit.converged && fit.residuals.len() <= 2,
            "{:?}",
            fit.residuals
        );
    }

    #[test]
    fn noisy_residuals_do_not_increase() {
        let f = face();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        for _ in 0..10 {
            let alpha = random_alpha(&mut rng, 10);
            let psi =
                ExpressionCoefficients::new((0..5).map(|_| rng.random_range(0.0..1.0)).collect());
            let mesh = f
                .model
                .generate_shape_with_expression(&f.blendshapes, &alpha, &psi)
                .unwrap();
            let cam = camera(rng.random_range(-30.0..30.0));
            let mut lms = fixed_landmarks(&f, &mesh, &cam).entries().to_vec();
            for l in &mut lms {
                l.position[0] += rng.sample(normal);
                l.position[1] += rng.sample(normal);
            }
            let lms = LandmarkSet::new(lms).unwrap();
            let fit = fit_shape_and_expressions(
                &cam,
                &f.model,
                &f.blendshapes,
                &lms,
                &f.mapping,
                &FitOptions::default(),
            )
            .unwrap();
            for w in fit.residuals.windows(2) {
                assert!(w[1] <= w[0] + 1e-6, "{:?}", fit.residuals);
            }
        }
    }

    #[test]
    fn contour_exact_hit_and_tie_break() {
        let f = face();
        let mesh = f.model.mean_mesh();
        let cam = camera(-25.0);
        let side = front_facing_side(&cam);
        let cands = f.mapping.contour_candidates(side);
        let j = cands[cands.len() / 2];
        let target = cam.project(&mesh.vertex(j));
        let (v, d) = closest_projected_vertex(&cam, &mesh, cands, &target).unwrap();
        assert_eq!((v, d), (j, 0.0));

        // Two candidates at the same projected position: lower index wins.
        let mut verts = mesh.vertices.clone();
        let (a, b) = (cands[0], cands[1]);
        for r in 0..3 {
            verts[3 * b + r] = verts[3 * a + r];
        }
        let dup = MeshInstance { vertices: verts };
        let target = cam.project(&dup.vertex(a)) + Vector2::new(0.5, 0.25);
        let (v, _) = closest_projected_vertex(&cam, &dup, &[b, a], &target).unwrap();
        assert_eq!(v, a.min(b));
    }

    #[test]
    fn contour_matches_brute_force_and_excludes_far_side() {
        let f = face();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let mesh = f.model.generate_shape(&random_alpha(&mut rng, 10)).unwrap();
            let cam = camera(rng.random_range(-40.0..40.0));
            let entries = (1..=17)
                .filter(|&i| i != 9)
                .map(|id| {
                    crate::landmarks::Landmark::new(
                        id,
                        rng.random_range(0.0..256.0),
                        rng.random_range(0.0..256.0),
                    )
                })
                .collect();
            let lms = LandmarkSet::new(entries).unwrap();
            let r = refine_contour(&cam, &mesh, &lms, &f.mapping).unwrap();
            assert_eq!(r.assignments.len(), 8);
            assert_eq!(r.excluded.len(), 8);
            let cands = f.mapping.contour_candidates(r.side);
            for (id, v) in &r.assignments {
                let y = lms.get(*id).unwrap().point();
                let dists: Vec<(f64, usize)> = cands
                    .iter()
                    .map(|&c| ((cam.project(&mesh.vertex(c)) - y).norm_squared(), c))
                    .collect();
                let min = dists.iter().map(|d| d.0).fold(f64::INFINITY, f64::min);
                let expected = dists
                    .iter()
                    .filter(|d| d.0 == min)
                    .map(|d| d.1)
                    .min()
                    .unwrap();
                assert_eq!(*v, expected);
            }
        }
    }

    #[test]
    fn empty_candidate_list_is_a_configuration_error() {
        let mapping =
            LandmarkVertexMapping::new(BTreeMap::from([(30, 0)]), vec![], vec![]).unwrap();
        let f = face();
        let lms = LandmarkSet::new(vec![crate::landmarks::Landmark::new(3, 1.0, 1.0)]).unwrap();
        let err = refine_contour(&camera(0.0), &f.model.mean_mesh(), &lms, &mapping).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    fn frame_fit(psi: ExpressionCoefficients, outer_iterations: usize) -> (f64, f64, FitResult) {
        let f = face();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let alpha = random_alpha(&mut rng, 10);
        let mesh = f
            .model
            .generate_shape_with_expression(&f.blendshapes, &alpha, &psi)
            .unwrap();
        let cam = camera(20.0);
        let lms = f.project_landmarks(&mesh, &cam);
        let opts = FitOptions {
            lambda: 1e-8,
            outer_iterations,
            ..Default::default()
        };
        let fit = fit_frame(&f.model, &f.blendshapes, &lms, &f.mapping, &opts).unwrap();
        let fitted = fit.mesh(&f.model, &f.blendshapes).unwrap();
        let corr = correspondences(&lms, &f.mapping, &fit.contour_assignments);
        let rms = (reprojection_residual(&fit.camera, &fitted, &corr) / corr.len() as f64).sqrt();
        (rms, max_abs_diff(&fit.alpha.alpha, &alpha.alpha), fit)
    }

    #[test]
    fn full_frame_fit_recovers_neutral_synthetic_truth() {
        let (rms, alpha_err, fit) = frame_fit(ExpressionCoefficients::zeros(5), 3);
        assert!(rms <= 1e-3, "rms {rms}");
        assert!(alpha_err < 1e-2, "alpha error {alpha_err}");
        // 20° yaw turns the face to image-right: the model's −x outline faces the camera.
        assert_eq!(front_facing_side(&fit.camera), ContourSide::Left);
        for id in 1..=8 {
            assert!(fit.contour_assignments.contains_key(&id));
        }
    }

    #[test]
    fn expressive_frame_fit_improves_with_rounds() {
        // Blendshapes that move many landmarks together partly mimic a change
        // of camera, so camera and expression settle over several rounds.
        let psi = ExpressionCoefficients::new(vec![0.3, 0.6, 0.0, 0.2, 0.4]);
        let (one, _, _) = frame_fit(psi.clone(), 1);
        let (three, _, _) = frame_fit(psi.clone(), 3);
        let (many, _, _) = frame_fit(psi, 40);
        assert!(three < one && many < three);
        assert!(three < 0.5, "rms {three}");
    }

    #[test]
    fn minimal_frame_without_contours() {
        let f = face();
        let cam = camera(0.0);
        let lms = fixed_landmarks(&f, &f.model.mean_mesh(), &cam)
            .filtered(|id| [31, 37, 46, 49].contains(&id));
        let fit = fit_frame(
            &f.model,
            &f.blendshapes,
            &lms,
            &f.mapping,
            &FitOptions::default(),
        )
        .unwrap();
        assert!(fit.contour_assignments.is_empty());
        assert_eq!(fit.alpha.alpha.len(), 10);
        let too_few = lms.filtered(|id| id != 49);
        assert!(matches!(
            fit_frame(
                &f.model,
                &f.blendshapes,
                &too_few,
                &f.mapping,
                &FitOptions::default()
            ),
            Err(Error::InsufficientCorrespondences { .. })
        ));
    }
}
