//! Cascaded linear regression of 2D landmark positions.
//!
//! Each stage maps HOG features at the current estimate to an update,
//! `θ ← θ + A·f(I, θ) + b`. Stages are trained by ridge regression on
//! perturbed initializations, and the training set is advanced through every
//! stage before the next one is fit.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::solve_least_squares;
use crate::error::{Error, Result};
use crate::hog::{extract_features, FeatureConfig};
use crate::imaging::ImageFrame;
use crate::landmarks::LandmarkId;

pub const CASCADE_FILE_VERSION: u32 = 1;

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BoundingBox {
    pub fn of_points(points: &[Vector2<f64>]) -> Option<Self> {
        let first = points.first()?;
        let (mut lo, mut hi) = (*first, *first);
        for p in &points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Some(Self {
            x: lo.x,
            y: lo.y,
            width: hi.x - lo.x,
            height: hi.y - lo.y,
        })
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.x + 0.5 * self.width, self.y + 0.5 * self.height)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionStage {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl RegressionStage {
    pub fn apply(&self, theta: &mut DVector<f64>, features: &DVector<f64>) {
        *theta += &self.a * features + &self.b;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorCascade {
    pub landmark_ids: Vec<LandmarkId>,
    pub feature_config: FeatureConfig,
    /// Mean shape with its bounding box centered on the origin and unit width.
    pub mean_landmarks: Vec<Vector2<f64>>,
    pub stages: Vec<RegressionStage>,
}

fn to_vector(points: &[Vector2<f64>]) -> DVector<f64> {
    DVector::from_iterator(2 * points.len(), points.iter().flat_map(|p| [p.x, p.y]))
}

fn to_points(theta: &DVector<f64>) -> Vec<Vector2<f64>> {
    theta
        .as_slice()
        .chunks_exact(2)
        .map(|c| Vector2::new(c[0], c[1]))
        .collect()
}

/// Rescales a shape so its bounding box is centered on the origin with unit
/// width.
pub fn normalize_shape(points: &[Vector2<f64>]) -> Result<Vec<Vector2<f64>>> {
    let bb = BoundingBox::of_points(points)
        .ok_or_else(|| Error::InvalidArgument("empty shape".into()))?;
    if !(bb.width > 0.0) {
        return Err(Error::Degenerate("shape has zero width".into()));
    }
    let c = bb.center();
    Ok(points.iter().map(|p| (p - c) / bb.width).collect())
}

/// Places a normalized shape in a box: centered, scaled to the box width.
pub fn align_to_box(normalized: &[Vector2<f64>], bbox: &BoundingBox) -> Vec<Vector2<f64>> {
    let c = bbox.center();
    normalized.iter().map(|p| c + p * bbox.width).collect()
}

impl RegressorCascade {
    pub fn num_landmarks(&self) -> usize {
        self.mean_landmarks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_landmarks();
        if self.stages.is_empty() {
            return Err(Error::validation(
                "stages",
                "at least one stage is required",
            ));
        }
        if self.landmark_ids.len() != k {
            return Err(Error::dims("landmark ids", k, self.landmark_ids.len()));
        }
        let d = k * self.feature_config.descriptor_len();
        for s in &self.stages {
            if s.a.nrows() != 2 * k || s.b.len() != 2 * k {
                return Err(Error::dims("stage rows", 2 * k, s.a.nrows()));
            }
            if s.a.ncols() != d {
                return Err(Error::dims("stage feature columns", d, s.a.ncols()));
            }
        }
        Ok(())
    }

    /// Runs every stage from `initial`.
    pub fn predict(
        &self,
        frame: &ImageFrame,
        initial: &[Vector2<f64>],
    ) -> Result<Vec<Vector2<f64>>> {
        if initial.len() != self.num_landmarks() {
            return Err(Error::dims(
                "initial landmarks",
                self.num_landmarks(),
                initial.len(),
            ));
        }
        let mut theta = to_vector(initial);
        for stage in &self.stages {
            let f = extract_features(frame, &to_points(&theta), &self.feature_config);
            stage.apply(&mut theta, &f);
        }
        Ok(to_points(&theta))
    }

    /// Mean landmarks placed in the bounding box of the previous frame's
    /// landmarks, or in `face_box` when there is no previous frame.
    pub fn initialization(
        &self,
        previous: Option<&[Vector2<f64>]>,
        face_box: Option<&BoundingBox>,
    ) -> Result<Vec<Vector2<f64>>> {
        let bbox = match (previous, face_box) {
            (Some(prev), _) => {
                if prev.len() != self.num_landmarks() {
                    return Err(Error::dims(
                        "previous landmarks",
                        self.num_landmarks(),
                        prev.len(),
                    ));
                }
                BoundingBox::of_points(prev).ok_or(Error::MissingInitialization)?
            }
            (None, Some(b)) => *b,
            (None, None) => return Err(Error::MissingInitialization),
        };
        Ok(align_to_box(&self.mean_landmarks, &bbox))
    }

    pub fn track_video_step(
        &self,
        frame: &ImageFrame,
        previous: Option<&[Vector2<f64>]>,
        face_box: Option<&BoundingBox>,
    ) -> Result<Vec<Vector2<f64>>> {
        let init = self.initialization(previous, face_box)?;
        self.predict(frame, &init)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = CascadeFile::from(self);
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let file: CascadeFile = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        file.into_cascade()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StageFile {
    /// Row-major, 2K rows.
    #[serde(rename = "A")]
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CascadeFile {
    version: u32,
    #[serde(rename = "K")]
    k: usize,
    landmark_ids: Vec<LandmarkId>,
    feature_config: FeatureConfig,
    mean_landmarks: Vec<[f64; 2]>,
    stages: Vec<StageFile>,
}

impl From<&RegressorCascade> for CascadeFile {
    fn from(c: &RegressorCascade) -> Self {
        Self {
            version: CASCADE_FILE_VERSION,
            k: c.num_landmarks(),
            landmark_ids: c.landmark_ids.clone(),
            feature_config: c.feature_config.clone(),
            mean_landmarks: c.mean_landmarks.iter().map(|p| [p.x, p.y]).collect(),
            stages: c
                .stages
                .iter()
                .map(|s| StageFile {
                    a: s.a.transpose().as_slice().to_vec(),
                    b: s.b.as_slice().to_vec(),
                })
                .collect(),
        }
    }
}

impl CascadeFile {
    fn into_cascade(self) -> Result<RegressorCascade> {
        if self.version != CASCADE_FILE_VERSION {
            return Err(Error::SchemaVersion {
                found: self.version,
                expected: CASCADE_FILE_VERSION,
            });
        }
        if self.mean_landmarks.len() != self.k {
            return Err(Error::validation(
                "mean_landmarks",
                format!("expected {} points", self.k),
            ));
        }
        let rows = 2 * self.k;
        let mut stages = Vec::with_capacity(self.stages.len());
        for s in self.stages {
            if rows == 0 || s.a.len() % rows != 0 {
                return Err(Error::validation(
                    "stages.A",
                    "length is not a multiple of 2K",
                ));
            }
            if s.b.len() != rows {
                return Err(Error::validation(
                    "stages.b",
                    format!("expected {rows} entries"),
                ));
            }
            let cols = s.a.len() / rows;
            stages.push(RegressionStage {
                a: DMatrix::from_row_slice(rows, cols, &s.a),
                b: DVector::from_vec(s.b),
            });
        }
        let cascade = RegressorCascade {
            landmark_ids: self.landmark_ids,
            feature_config: self.feature_config,
            mean_landmarks: self
                .mean_landmarks
                .into_iter()
                .map(|[x, y]| Vector2::new(x, y))
                .collect(),
            stages,
        };
        cascade.validate()?;
        Ok(cascade)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Uniform translation noise as a fraction of the face width.
    pub translation: f64,
    /// Uniform relative scale noise.
    pub scale: f64,
    pub per_sample: usize,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            translation: 0.05,
            scale: 0.10,
            per_sample: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_stages: usize,
    /// Ridge weight relative to the mean squared feature norm of a stage.
    pub ridge_relative: f64,
    /// Absolute ridge weight; overrides `ridge_relative` when set.
    pub ridge_lambda: Option<f64>,
    pub perturbation: PerturbationConfig,
    pub features: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_stages: 5,
            ridge_relative: 1e-3,
            ridge_lambda: None,
            perturbation: PerturbationConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub frame: ImageFrame,
    pub landmarks: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// RMS landmark error (pixels) of the perturbed initializations.
    pub initial_error: f64,
    /// RMS landmark error after each stage.
    pub stage_errors: Vec<f64>,
}

/// RMS point-to-point distance over all landmarks of all shapes.
fn rms_error(estimates: &[DVector<f64>], targets: &[DVector<f64>]) -> f64 {
    let k: usize = estimates.iter().map(|e| e.len() / 2).sum();
    let ss: f64 = estimates
        .iter()
        .zip(targets)
        .map(|(e, t)| (e - t).norm_squared())
        .sum();
    (ss / k.max(1) as f64).sqrt()
}

/// Ridge regression `min ‖A·F + b·1ᵀ − T‖²_F + λ‖A‖²_F` with `b` unpenalized.
/// `features` holds one sample per column, `targets` likewise.
pub fn fit_stage(
    features: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    lambda: f64,
) -> Result<RegressionStage> {
    let s = features.ncols();
    if s == 0 || targets.ncols() != s {
        return Err(Error::dims("training samples", s, targets.ncols()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ridge weight must be >= 0, got {lambda}"
        )));
    }
    let f_mean = features.column_mean();
    let t_mean = targets.column_mean();
    let mut fc = features.clone();
    let mut tc = targets.clone();
    for j in 0..s {
        fc.column_mut(j).axpy(-1.0, &f_mean, 1.0);
        tc.column_mut(j).axpy(-1.0, &t_mean, 1.0);
    }
    let a = if lambda == 0.0 {
        // Fcᵀ Aᵀ = Tcᵀ in the least-squares sense; needs full column rank.
        solve_least_squares(fc.transpose(), tc.transpose())?.transpose()
    } else {
        // Dual form: A = Tc (FcᵀFc + λI)⁻¹ Fcᵀ, an S×S solve.
        let mut gram = fc.tr_mul(&fc);
        for i in 0..s {
            gram[(i, i)] += lambda;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Degenerate("ridge system is not positive definite".into()))?;
        let w = chol.solve(&tc.transpose());
        w.transpose() * fc.transpose()
    };
    let b = t_mean - &a * f_mean;
    Ok(RegressionStage { a, b })
}

/// Perturbed initializations for one ground-truth shape.
fn perturbed_initializations(
    mean: &[Vector2<f64>],
    truth: &[Vector2<f64>],
    config: &PerturbationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Vector2<f64>>>> {
    let bb = BoundingBox::of_points(truth).ok_or(Error::MissingInitialization)?;
    (0..config.per_sample)
        .map(|_| {
            let t = config.translation * bb.width;
            let dx = if t > 0.0 {
                rng.random_range(-t..=t)
            } else {
                0.0
            };
            let dy = if t > 0.0 {
                rng.random_range(-t..=t)
            } else {
                0.0
            };
            let s = if config.scale > 0.0 {
                1.0 + rng.random_range(-config.scale..=config.scale)
            } else {
                1.0
            };
            let jittered = BoundingBox {
                x: bb.x + dx + 0.5 * bb.width * (1.0 - s),
                y: bb.y + dy + 0.5 * bb.height * (1.0 - s),
                width: bb.width * s,
                height: bb.height * s,
            };
            Ok(align_to_box(mean, &jittered))
        })
        .collect()
}

/// Trains a cascade; the mean shape is the average of the normalized
/// ground-truth shapes.
pub fn train(
    samples: &[TrainingSample],
    landmark_ids: Vec<LandmarkId>,
    config: &TrainConfig,
) -> Result<(RegressorCascade, TrainingReport)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs at least one sample".into(),
        ));
    }
    if config.n_stages == 0 {
        return Err(Error::InvalidArgument("n_stages must be >= 1".into()));
    }
    let k = landmark_ids.len();
    if config.perturbation.per_sample == 0 {
        return Err(Error::InvalidArgument("per_sample must be >= 1".into()));
    }
    let mut mean = vec![Vector2::zeros(); k];
    for s in samples {
        if s.landmarks.len() != k {
            return Err(Error::dims("sample landmarks", k, s.landmarks.len()));
        }
        for (m, p) in mean.iter_mut().zip(normalize_shape(&s.landmarks)?) {
            *m += p / samples.len() as f64;
        }
    }
    let mean = normalize_shape(&mean)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.perturbation.seed);
    let mut current = Vec::new();
    let mut targets = Vec::new();
    let mut owner = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for init in perturbed_initializations(&mean, &s.landmarks, &config.perturbation, &mut rng)?
        {
            current.push(to_vector(&init));
            targets.push(to_vector(&s.landmarks));
            owner.push(i);
        }
    }

    let initial_error = rms_error(&current, &targets);
    let mut stage_errors = Vec::with_capacity(config.n_stages);
    let mut stages = Vec::with_capacity(config.n_stages);
    for _ in 0..config.n_stages {
        let feats: Vec<DVector<f64>> = current
            .par_iter()
            .zip(owner.par_iter())
            .map(|(theta, &i)| {
                extract_features(&samples[i].frame, &to_points(theta), &config.features)
            })
            .collect();
        let f = DMatrix::from_columns(&feats);
        let deltas: Vec<DVector<f64>> = targets.iter().zip(&current).map(|(t, c)| t - c).collect();
        let t = DMatrix::from_columns(&deltas);
        let lambda = match config.ridge_lambda {
            Some(l) => l,
            None => {
                let mean_sq =
                    feats.iter().map(|v| v.norm_squared()).sum::<f64>() / feats.len() as f64;
                config.ridge_relative * mean_sq
            }
        };
        let stage = fit_stage(&f, &t, lambda)?;
        for (theta, feat) in current.iter_mut().zip(&feats) {
            stage.apply(theta, feat);
        }
        stage_errors.push(rms_error(&current, &targets));
        stages.push(stage);
    }

    let cascade = RegressorCascade {
        landmark_ids,
        feature_config: config.features.clone(),
        mean_landmarks: mean,
        stages,
    };
    Ok((
        cascade,
        TrainingReport {
            initial_error,
            stage_errors,
        },
    ))
}

/// Mean point-to-point distance between two shapes.
pub fn mean_point_error(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_frame(points: &[Vector2<f64>], w: usize, h: usize) -> ImageFrame {
        ImageFrame::from_fn(w, h, |x, y| {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            points
                .iter()
                .map(|c| (-(p - c).norm_squared() / (2.0 * 9.0)).exp() as f32)
                .sum::<f32>()
                .min(1.0)
        })
    }

    fn toy_shape(offset: Vector2<f64>, scale: f64) -> Vec<Vector2<f64>> {
        [
            (-1.0, -0.6),
            (1.0, -0.6),
            (0.0, 0.1),
            (-0.6, 0.8),
            (0.6, 0.8),
        ]
        .iter()
        .map(|&(x, y)| offset + Vector2::new(x, y) * scale)
        .collect()
    }

    fn cascade_with(stages: Vec<RegressionStage>) -> RegressorCascade {
        let config = FeatureConfig {
            patch_size: Some(12),
            ..Default::default()
        };
        RegressorCascade {
            landmark_ids: (1..=5).collect(),
            feature_config: config,
            mean_landmarks: normalize_shape(&toy_shape(Vector2::zeros(), 1.0)).unwrap(),
            stages,
        }
    }

    #[test]
    fn identity_and_constant_stages() {
        let frame = blob_frame(&toy_shape(Vector2::new(40.0, 40.0), 20.0), 80, 80);
        let init = toy_shape(Vector2::new(38.0, 41.0), 19.0);
        let zero = RegressionStage {
            a: DMatrix::zeros(10, 5 * 81),
            b: DVector::zeros(10),
        };
        assert_eq!(
            cascade_with(vec![zero.clone()])
                .predict(&frame, &init)
                .unwrap(),
            init
        );
        let delta = DVector::from_fn(10, |i, _| i as f64 * 0.5 - 1.0);
        let shifted = cascade_with(vec![RegressionStage {
            b: delta.clone(),
            ..zero
        }])
        .predict(&frame, &init)
        .unwrap();
        assert_eq!(to_vector(&shifted), to_vector(&init) + delta);
    }

    #[test]
    fn initialization_rules() {
        let cascade = cascade_with(vec![]);
        let bbox = BoundingBox {
            x: 10.0,
            y: 20.0,
            width: 40.0,
            height: 30.0,
        };
        let from_box = cascade.initialization(None, Some(&bbox)).unwrap();
        let placed = BoundingBox::of_points(&from_box).unwrap();
        assert!((placed.center() - bbox.center()).norm() < 1e-12);
        assert!((placed.width - bbox.width).abs() < 1e-12);

        let again = cascade.initialization(Some(&from_box), None).unwrap();
        assert!(again
            .iter()
            .zip(&from_box)
            .all(|(a, b)| (a - b).norm() < 1e-9));
        assert!(matches!(
            cascade.initialization(None, None),
            Err(Error::MissingInitialization)
        ));
    }

    #[test]
    fn exact_linear_problem_is_solved_in_one_stage() {
        // Targets are an exact affine function of 1D features.
        let f = DMatrix::from_row_slice(1, 6, &[0.1, -0.4, 0.7, 1.3, -2.0, 0.25]);
        let t = f.map(|x| 3.0 * x - 0.5);
        let stage = fit_stage(&f, &t, 1e-12).unwrap();
        let pred = &stage.a * &f + DMatrix::from_fn(1, 6, |_, _| stage.b[0]);
        assert!((pred - t).amax() <= 1e-8);
    }

    #[test]
    fn zero_targets_give_zero_map() {
        let f = DMatrix::from_fn(4, 8, |i, j| ((i * 7 + j * 3) % 5) as f64);
        let stage = fit_stage(&f, &DMatrix::zeros(2, 8), 1e-3).unwrap();
        assert!(stage.a.norm() < 1e-6 && stage.b.amax() < 1e-6);
    }

    #[test]
    fn unregularized_rank_deficient_features_fail() {
        let f = DMatrix::from_fn(3, 10, |i, j| if i == 1 { 0.0 } else { (i + j) as f64 });
        let t = DMatrix::from_fn(2, 10, |_, j| j as f64);
        assert!(matches!(
            fit_stage(&f, &t, 0.0),
            Err(Error::RankDeficient { .. })
        ));
        assert!(fit_stage(&f, &t, 1e-3).is_ok());
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<TrainingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let shape = toy_shape(
                    Vector2::new(rng.random_range(35.0..45.0), rng.random_range(35.0..45.0)),
                    rng.random_range(17.0..21.0),
                );
                TrainingSample {
                    frame: blob_frame(&shape, 80, 80),
                    landmarks: shape,
                }
            })
            .collect()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            features: FeatureConfig {
                patch_size: Some(12),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn training_error_does_not_increase_and_tracking_improves() {
        let samples = toy_samples(30, 1);
        let (cascade, report) = train(&samples, (1..=5).collect(), &toy_config()).unwrap();
        let mut prev = report.initial_error;
        for &e in &report.stage_errors {
            assert!(e <= prev + 1e-9, "{report:?}");
            prev = e;
        }
        assert!(
            report.stage_errors[4] < 0.5 * report.initial_error,
            "{report:?}"
        );

        // Held-out faces, initialized from a box around the truth.
        let test = toy_samples(10, 2);
        let (mut before, mut after) = (0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in &test {
            let mut bb = BoundingBox::of_points(&s.landmarks).unwrap();
            bb.x += rng.random_range(-1.0..1.0);
            bb.y += rng.random_range(-1.0..1.0);
            let init = cascade.initialization(None, Some(&bb)).unwrap();
            let out = cascade.predict(&s.frame, &init).unwrap();
            before += mean_point_error(&init, &s.landmarks);
            after += mean_point_error(&out, &s.landmarks);
        }
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn training_is_deterministic_and_file_round_trips() {
        let samples = toy_samples(6, 4);
        let config = TrainConfig {
            n_stages: 2,
            ..toy_config()
        };
        let (a, ra) = train(&samples, (1..=5).collect(), &config).unwrap();
        let (b, rb) = train(&samples, (1..=5).collect(), &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cascade.json");
        a.save(&path).unwrap();
        assert_eq!(RegressorCascade::load(&path).unwrap(), a);

        let text =
            std::fs::read_to_string(&path)
                .unwrap()
                .replacen("\"version\":1", "\"version\":9", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            RegressorCascade::load(&path),
            Err(Error::SchemaVersion { .. })
        ));
    }
}
