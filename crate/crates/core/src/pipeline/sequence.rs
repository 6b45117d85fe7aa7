//! Rendered synthetic videos and tracker training sets with known ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::AffineCamera;
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::landmarks::LandmarkSet;
use crate::model::{ExpressionCoefficients, ShapeCoefficients};
use crate::synthetic::SyntheticFace;
use crate::texture::render_view;
use crate::tracker::TrainingSample;

pub const BACKGROUND: [f32; 3] = [0.12, 0.12, 0.16];

/// Cameras turning about the vertical axis from `start_deg` to `end_deg`.
pub fn yaw_sweep(
    frames: usize,
    start_deg: f64,
    end_deg: f64,
    scale: f64,
    center: Vector2<f64>,
) -> Vec<AffineCamera> {
    (0..frames)
        .map(|i| {
            let t = if frames > 1 {
                i as f64 / (frames - 1) as f64
            } else {
                0.0
            };
            let yaw = (start_deg + t * (end_deg - start_deg)).to_radians();
            AffineCamera::from_pose(scale, &Rotation3::from_euler_angles(0.0, yaw, 0.0), center)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SequenceFrame {
    pub image: RgbImage,
    pub landmarks: LandmarkSet,
    pub camera: AffineCamera,
    pub psi: ExpressionCoefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroundTruthFile {
    alpha: ShapeCoefficients,
    frames: Vec<GroundTruthFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroundTruthFrame {
    camera: AffineCamera,
    psi: ExpressionCoefficients,
    landmarks: LandmarkSet,
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub alpha: ShapeCoefficients,
    pub frames: Vec<SequenceFrame>,
}

impl SyntheticSequence {
    /// Renders one frame per camera; expressions are cycled when fewer than
    /// cameras are given.
    pub fn generate(
        face: &SyntheticFace,
        alpha: &ShapeCoefficients,
        psis: &[ExpressionCoefficients],
        cameras: &[AffineCamera],
        texture: &RgbImage,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if psis.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one expression vector is needed".into(),
            ));
        }
        let frames = cameras
            .iter()
            .enumerate()
            .map(|(i, camera)| {
                let psi = psis[i % psis.len()].clone();
                let view = render_view(
                    &face.model,
                    &face.blendshapes,
                    alpha,
                    &psi,
                    texture,
                    camera,
                    width,
                    height,
                    BACKGROUND,
                )?;
                let mesh =
                    face.model
                        .generate_shape_with_expression(&face.blendshapes, alpha, &psi)?;
                Ok(SequenceFrame {
                    image: view.image,
                    landmarks: face.project_landmarks(&mesh, camera),
                    camera: *camera,
                    psi,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            alpha: alpha.clone(),
            frames,
        })
    }

    pub fn landmarks(&self) -> Vec<LandmarkSet> {
        self.frames.iter().map(|f| f.landmarks.clone()).collect()
    }
}

/// Writes `frame_NNNN.png` and `frame_NNNN.pts` per frame plus
/// `ground_truth.json` into `dir`.
pub fn save_sequence(seq: &SyntheticSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.image.save_png(dir.join(format!("frame_{i:04}.png")))?;
        f.landmarks.save(dir.join(format!("frame_{i:04}.pts")))?;
    }
    let gt = GroundTruthFile {
        alpha: seq.alpha.clone(),
        frames: seq
            .frames
            .iter()
            .map(|f| GroundTruthFrame {
                camera: f.camera,
                psi: f.psi.clone(),
                landmarks: f.landmarks.clone(),
            })
            .collect(),
    };
    fs::write(
        dir.join("ground_truth.json"),
        serde_json::to_string_pretty(&gt)?,
    )?;
    Ok(())
}

/// PNG files of a frame directory in name order.
pub fn load_sequence_frames(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::FileNotFound(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    paths.sort();
    Ok(paths)
}

/// Random poses, identities and expressions for tracker training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSetConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Nominal camera scale in pixels per model unit.
    pub scale: f64,
    pub scale_jitter: f64,
    /// Translation jitter as a fraction of the frame size.
    pub translation_jitter: f64,
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
    pub max_roll_deg: f64,
    pub max_expression: f64,
    pub texture_resolution: usize,
    pub seed: u64,
}

impl Default for TrainingSetConfig {
    fn default() -> Self {
        Self {
            count: 50,
            width: 160,
            height: 160,
            scale: 55.0,
            scale_jitter: 0.1,
            translation_jitter: 0.05,
            max_yaw_deg: 25.0,
            max_pitch_deg: 10.0,
            max_roll_deg: 5.0,
            max_expression: 0.5,
            texture_resolution: 256,
            seed: 0,
        }
    }
}

impl TrainingSetConfig {
    /// One random camera, identity and expression.
    fn draw(
        &self,
        rng: &mut ChaCha8Rng,
        m: usize,
        l: usize,
    ) -> (AffineCamera, ShapeCoefficients, ExpressionCoefficients) {
        let mut sym = |r: f64| (rng.random::<f64>() * 2.0 - 1.0) * r;
        let yaw = sym(self.max_yaw_deg).to_radians();
        let pitch = sym(self.max_pitch_deg).to_radians();
        let roll = sym(self.max_roll_deg).to_radians();
        let scale = self.scale * (1.0 + sym(self.scale_jitter));
        let tx = self.width as f64 * (0.5 + sym(self.translation_jitter));
        let ty = self.height as f64 * (0.5 + sym(self.translation_jitter));
        let camera = AffineCamera::from_pose(
            scale,
            &Rotation3::from_euler_angles(pitch, yaw, roll),
            Vector2::new(tx, ty),
        );
        let alpha = ShapeCoefficients::new(
            (0..m)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let psi = ExpressionCoefficients::new(
            (0..l)
                .map(|_| rng.random::<f64>() * self.max_expression)
                .collect(),
        );
        (camera, alpha, psi)
    }
}

/// Gray renders of random faces with their full landmark layout, landmarks in
/// ascending id order.
pub fn render_training_set(
    face: &SyntheticFace,
    config: &TrainingSetConfig,
) -> Result<Vec<TrainingSample>> {
    let texture = face.face_texture(config.texture_resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (m, l) = (face.model.num_components(), face.blendshapes.len());
    (0..config.count)
        .map(|i| {
            let (camera, alpha, psi) = config.draw(&mut rng, m, l);
            let view = render_view(
                &face.model,
                &face.blendshapes,
                &alpha,
                &psi,
                &texture,
                &camera,
                config.width,
                config.height,
                BACKGROUND,
            )?;
            let mesh =
                face.model
                    .generate_shape_with_expression(&face.blendshapes, &alpha, &psi)?;
            let lms = face.project_landmarks(&mesh, &camera);
            Ok(TrainingSample {
                frame: view.image.to_gray(i),
                landmarks: lms.entries().iter().map(|e| e.point()).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticFaceConfig;

    fn face() -> SyntheticFace {
        SyntheticFace::generate(&SyntheticFaceConfig {
            grid_cols: 40,
            grid_rows: 30,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn sweep_endpoints() {
        let cams = yaw_sweep(3, -30.0, 30.0, 10.0, Vector2::new(5.0, 5.0));
        let expected = AffineCamera::from_pose(
            10.0,
            &Rotation3::from_euler_angles(0.0, 30f64.to_radians(), 0.0),
            Vector2::new(5.0, 5.0),
        );
        assert_eq!(cams[2], expected);
        assert!((cams[1].toward_camera().x).abs() < 1e-12);
    }

    #[test]
    fn sequence_saves_frames_landmarks_and_ground_truth() {
        let f = face();
        let seq = SyntheticSequence::generate(
            &f,
            &ShapeCoefficients::zeros(10),
            &[ExpressionCoefficients::zeros(5)],
            &yaw_sweep(2, 0.0, 10.0, 30.0, Vector2::new(40.0, 40.0)),
            &f.smooth_texture(32),
            80,
            80,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        let pngs = load_sequence_frames(dir.path()).unwrap();
        assert_eq!(pngs.len(), 2);
        let back = LandmarkSet::load(dir.path().join("frame_0001.pts")).unwrap();
        for (a, b) in back.entries().iter().zip(seq.frames[1].landmarks.entries()) {
            assert!((a.point() - b.point()).norm() < 1e-3);
        }
        let gt: GroundTruthFile = serde_json::from_str(
            &fs::read_to_string(dir.path().join("ground_truth.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(gt.frames[1].camera, seq.frames[1].camera);
    }

    #[test]
    fn static_schedule_gives_identical_frames() {
        let f = face();
        let cams =
            vec![
                AffineCamera::from_pose(30.0, &Rotation3::identity(), Vector2::new(40.0, 40.0));
                3
            ];
        let seq = SyntheticSequence::generate(
            &f,
            &ShapeCoefficients::zeros(10),
            &[ExpressionCoefficients::new(vec![0.3; 5])],
            &cams,
            &f.smooth_texture(32),
            80,
            80,
        )
        .unwrap();
        assert_eq!(seq.frames[0].image, seq.frames[2].image);
        assert_eq!(seq.frames[0].landmarks, seq.frames[1].landmarks);
    }

    #[test]
    fn landmarks_match_projected_vertices_and_shift_with_yaw() {
        let f = face();
        let alpha = ShapeCoefficients::new((0..10).map(|j| 0.3 * j as f64 - 1.0).collect());
        let psi = ExpressionCoefficients::new(vec![0.1, 0.4, 0.0, 0.2, 0.3]);
        let cams = yaw_sweep(9, -30.0, 30.0, 40.0, Vector2::new(60.0, 60.0));
        let seq = SyntheticSequence::generate(
            &f,
            &alpha,
            std::slice::from_ref(&psi),
            &cams,
            &f.smooth_texture(16),
            120,
            120,
        )
        .unwrap();
        let mesh = f
            .model
            .generate_shape_with_expression(&f.blendshapes, &alpha, &psi)
            .unwrap();
        let nose = f.landmark_vertices[&31];
        let mut previous = f64::NEG_INFINITY;
        for (frame, cam) in seq.frames.iter().zip(&cams) {
            let m = cam.matrix();
            for (&id, &v) in &f.landmark_vertices {
                let p = mesh.vertex(v);
                let x = m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)];
                let y = m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)];
                let l = frame.landmarks.get(id).unwrap().point();
                assert!((l.x - x).abs() < 1e-9 && (l.y - y).abs() < 1e-9);
            }
            // The nose sticks out toward the viewer, so turning the head moves
            // its tip steadily across the image.
            let x = frame.landmarks.get(31).unwrap().point().x;
            assert!(x > previous, "nose tip x {x} after {previous}");
            previous = x;
            assert!(mesh.vertex(nose).z > 0.0);
        }
    }

    #[test]
    fn training_set_is_seeded_and_in_frame() {
        let f = face();
        let config = TrainingSetConfig {
            count: 3,
            texture_resolution: 64,
            ..Default::default()
        };
        let a = render_training_set(&f, &config).unwrap();
        let b = render_training_set(&f, &config).unwrap();
        assert_eq!(a[2].landmarks, b[2].landmarks);
        assert_eq!(a[2].frame.data(), b[2].frame.data());
        for s in &a {
            assert_eq!(s.landmarks.len(), 68);
            assert!(s
                .landmarks
                .iter()
                .all(|p| p.x > 0.0 && p.y > 0.0 && p.x < 160.0 && p.y < 160.0));
        }
    }
}
