//! Per-frame track → fit → remap → fuse loop, its configuration and outputs.

mod eval;
mod sequence;

pub use eval::{evaluate_landmarks, evaluate_sequence, FrameError, SequenceReport};
pub use sequence::{
    load_sequence_frames, render_training_set, save_sequence, yaw_sweep, SequenceFrame,
    SyntheticSequence, TrainingSetConfig,
};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{fit_frame, FitOptions, FitResult};
use crate::imaging::RgbImage;
use crate::landmarks::{Landmark, LandmarkSet, LandmarkVertexMapping};
use crate::model::{
    load_model, write_obj, BlendshapeSet, ExpressionCoefficients, PcaShapeModel, ShapeCoefficients,
};
use crate::texture::{
    remap_frame, FusedTexture, FusionMode, IsomapLayout, TextureFusionBuffer,
    DEFAULT_ISOMAP_RESOLUTION, DEFAULT_SUPER_RESOLUTION,
};
use crate::tracker::{BoundingBox, RegressorCascade};

pub const CONFIG_FILE_VERSION: u32 = 1;

/// Run configuration, stored as JSON next to the model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub version: u32,
    pub model_path: PathBuf,
    pub cascade_path: PathBuf,
    pub mapping_path: PathBuf,
    pub isomap_resolution: usize,
    pub fusion_mode: FusionMode,
    /// Fusion buffer super-resolution; defaults to 1 for average and 2 for
    /// median fusion.
    pub super_resolution: Option<usize>,
    pub lambda: f64,
    pub max_alternations: usize,
    pub tolerance: f64,
    pub outer_iterations: usize,
    pub output_dir: PathBuf,
    /// Write a fused isomap snapshot every this many frames.
    pub snapshot_interval: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let fit = FitOptions::default();
        Self {
            version: CONFIG_FILE_VERSION,
            model_path: PathBuf::from("model.json"),
            cascade_path: PathBuf::from("cascade.json"),
            mapping_path: PathBuf::from("mapping.txt"),
            isomap_resolution: DEFAULT_ISOMAP_RESOLUTION,
            fusion_mode: FusionMode::Average,
            super_resolution: None,
            lambda: fit.lambda,
            max_alternations: fit.max_alternations,
            tolerance: fit.tolerance,
            outer_iterations: fit.outer_iterations,
            output_dir: PathBuf::from("out"),
            snapshot_interval: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let mut config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        if config.version != CONFIG_FILE_VERSION {
            return Err(Error::SchemaVersion {
                found: config.version,
                expected: CONFIG_FILE_VERSION,
            });
        }
        // Relative paths are taken from the config file's directory.
        if let Some(dir) = path.parent() {
            for p in [
                &mut config.model_path,
                &mut config.cascade_path,
                &mut config.mapping_path,
                &mut config.output_dir,
            ] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn settings(&self) -> PipelineSettings {
        PipelineSettings {
            isomap_resolution: self.isomap_resolution,
            fusion_mode: self.fusion_mode,
            super_resolution: self.super_resolution,
            fit: FitOptions {
                lambda: self.lambda,
                max_alternations: self.max_alternations,
                tolerance: self.tolerance,
                outer_iterations: self.outer_iterations,
            },
            snapshot_interval: self.snapshot_interval,
        }
    }

    /// Range checks plus existence of every referenced input file.
    pub fn validate(&self) -> Result<()> {
        self.settings().validate()?;
        for p in [&self.model_path, &self.cascade_path, &self.mapping_path] {
            if !p.exists() {
                return Err(Error::FileNotFound(p.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub isomap_resolution: usize,
    pub fusion_mode: FusionMode,
    pub super_resolution: Option<usize>,
    pub fit: FitOptions,
    pub snapshot_interval: Option<usize>,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineConfig::default().settings()
    }
}

impl PipelineSettings {
    pub fn effective_super_resolution(&self) -> usize {
        self.super_resolution.unwrap_or(match self.fusion_mode {
            FusionMode::Average => 1,
            FusionMode::Median => DEFAULT_SUPER_RESOLUTION,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, why: &str| Err(Error::Config(format!("{what} {why}")));
        if !(1..=8192).contains(&self.isomap_resolution) {
            return bad("isomap_resolution", "must be in 1..=8192");
        }
        if !(1..=8).contains(&self.effective_super_resolution()) {
            return bad("super_resolution", "must be in 1..=8");
        }
        if !(self.fit.lambda >= 0.0 && self.fit.lambda.is_finite()) {
            return bad("lambda", "must be finite and >= 0");
        }
        if self.fit.max_alternations == 0 {
            return bad("max_alternations", "must be >= 1");
        }
        if !(self.fit.tolerance > 0.0) {
            return bad("tolerance", "must be > 0");
        }
        if self.fit.outer_iterations == 0 {
            return bad("outer_iterations", "must be >= 1");
        }
        if self.snapshot_interval == Some(0) {
            return bad("snapshot_interval", "must be >= 1 when set");
        }
        Ok(())
    }
}

/// Result of one frame. Timings live in [`FrameTiming`] so that records are
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub landmarks: LandmarkSet,
    pub fit: Option<FitResult>,
    /// Why the frame was left out of fusion, if it was.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub frame_index: usize,
    pub track_ms: f64,
    pub fit_ms: f64,
    pub remap_ms: f64,
    pub fuse_ms: f64,
}

impl FrameTiming {
    pub fn total_ms(&self) -> f64 {
        self.track_ms + self.fit_ms + self.remap_ms + self.fuse_ms
    }
}

/// Where per-frame landmarks come from.
pub enum LandmarkSource<'a> {
    /// Cascade tracking, initialized from `face_box` on the first frame and
    /// from the previous frame afterwards.
    Tracker {
        cascade: &'a RegressorCascade,
        face_box: BoundingBox,
    },
    /// Landmarks supplied per frame (e.g. ground truth or an external tracker).
    Given(&'a [LandmarkSet]),
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<FrameRecord>,
    pub timings: Vec<FrameTiming>,
    pub fused: FusedTexture,
    /// Identity averaged over fitted frames.
    pub mean_alpha: ShapeCoefficients,
    /// Expression averaged over fitted frames.
    pub mean_psi: ExpressionCoefficients,
}

/// Shared read-only state of a run.
pub struct Pipeline {
    pub model: PcaShapeModel,
    pub blendshapes: BlendshapeSet,
    pub mapping: LandmarkVertexMapping,
    pub settings: PipelineSettings,
    layout: IsomapLayout,
}

const TRACKED_MIN_EXTENT: f64 = 2.0;

fn tracked_box_is_sane(points: &[Vector2<f64>], width: usize, height: usize) -> bool {
    let Some(bb) = BoundingBox::of_points(points) else {
        return false;
    };
    let finite = points.iter().all(|p| p.x.is_finite() && p.y.is_finite());
    let overlaps = bb.x < width as f64
        && bb.y < height as f64
        && bb.x + bb.width > 0.0
        && bb.y + bb.height > 0.0;
    finite && overlaps && bb.width >= TRACKED_MIN_EXTENT && bb.height >= TRACKED_MIN_EXTENT
}

impl Pipeline {
    pub fn new(
        model: PcaShapeModel,
        blendshapes: BlendshapeSet,
        mapping: LandmarkVertexMapping,
        settings: PipelineSettings,
    ) -> Result<Self> {
        settings.validate()?;
        mapping.validate(model.num_vertices())?;
        let res = settings.isomap_resolution * settings.effective_super_resolution();
        let layout = IsomapLayout::for_model(&model, res)?;
        Ok(Self {
            model,
            blendshapes,
            mapping,
            settings,
            layout,
        })
    }

    /// Loads model, blendshapes, mapping and cascade named by `config`.
    pub fn from_config(config: &PipelineConfig) -> Result<(Self, RegressorCascade)> {
        config.validate()?;
        let (model, blendshapes) = load_model(&config.model_path)?;
        let mapping = LandmarkVertexMapping::load(&config.mapping_path)?;
        let cascade = RegressorCascade::load(&config.cascade_path)?;
        Ok((
            Self::new(model, blendshapes, mapping, config.settings())?,
            cascade,
        ))
    }

    pub fn layout(&self) -> &IsomapLayout {
        &self.layout
    }

    pub fn new_buffer(&self) -> Result<TextureFusionBuffer> {
        TextureFusionBuffer::new(
            self.settings.fusion_mode,
            self.settings.isomap_resolution,
            self.settings.effective_super_resolution(),
        )
    }

    /// Processes frames in order. When `output_dir` is given, records and
    /// timings are streamed there as JSON lines, snapshots are written at the
    /// configured interval, and the final isomap and mesh are exported.
    pub fn run_video<I>(
        &self,
        frames: I,
        landmarks: LandmarkSource<'_>,
        output_dir: Option<&Path>,
    ) -> Result<RunOutput>
    where
        I: IntoIterator<Item = Result<RgbImage>>,
    {
        let mut writers = match output_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some((
                    BufWriter::new(File::create(dir.join("frames.jsonl"))?),
                    BufWriter::new(File::create(dir.join("timings.jsonl"))?),
                ))
            }
            None => None,
        };
        let mut buffer = self.new_buffer()?;
        let mut records = Vec::new();
        let mut timings = Vec::new();
        let mut previous: Option<Vec<Vector2<f64>>> = None;
        let m = self.model.num_components();
        let l = self.blendshapes.len();
        let (mut alpha_sum, mut psi_sum, mut fitted) = (vec![0.0; m], vec![0.0; l], 0usize);

        for (index, frame) in frames.into_iter().enumerate() {
            let frame = frame?;
            let mut timing = FrameTiming {
                frame_index: index,
                track_ms: 0.0,
                fit_ms: 0.0,
                remap_ms: 0.0,
                fuse_ms: 0.0,
            };

            let t = Instant::now();
            let tracked: std::result::Result<LandmarkSet, String> = match &landmarks {
                LandmarkSource::Tracker { cascade, face_box } => {
                    let gray = frame.to_gray(index);
                    let pts = cascade.track_video_step(
                        &gray,
                        previous.as_deref(),
                        if previous.is_none() {
                            Some(face_box)
                        } else {
                            None
                        },
                    )?;
                    if tracked_box_is_sane(&pts, frame.width(), frame.height()) {
                        previous = Some(pts.clone());
                        let entries = cascade
                            .landmark_ids
                            .iter()
                            .zip(&pts)
                            .map(|(&id, p)| Landmark::new(id, p.x, p.y))
                            .collect();
                        LandmarkSet::new(entries).map_err(|e| e.to_string())
                    } else {
                        Err("tracking diverged: degenerate landmark bounding box".to_string())
                    }
                }
                LandmarkSource::Given(sets) => sets
                    .get(index)
                    .cloned()
                    .ok_or_else(|| format!("no landmarks supplied for frame {index}")),
            };
            timing.track_ms = t.elapsed().as_secs_f64() * 1e3;

            let mut record = FrameRecord {
                frame_index: index,
                landmarks: tracked
                    .clone()
                    .unwrap_or_else(|_| LandmarkSet::new(vec![]).expect("empty set")),
                fit: None,
                skipped: None,
            };
            match tracked {
                Err(reason) => {
                    warn!("frame {index} skipped: {reason}");
                    record.skipped = Some(reason);
                }
                Ok(lms) => {
                    let t = Instant::now();
                    let fit = fit_frame(
                        &self.model,
                        &self.blendshapes,
                        &lms,
                        &self.mapping,
                        &self.settings.fit,
                    );
                    timing.fit_ms = t.elapsed().as_secs_f64() * 1e3;
                    match fit {
                        Err(e) => {
                            warn!("frame {index} skipped: fit failed: {e}");
                            record.skipped = Some(format!("fit failed: {e}"));
                        }
                        Ok(fit) => {
                            let t = Instant::now();
                            let mesh = fit.mesh(&self.model, &self.blendshapes)?;
                            let tex = remap_frame(
                                &frame,
                                index,
                                &mesh,
                                self.model.triangles(),
                                &fit.camera,
                                &self.layout,
                            );
                            timing.remap_ms = t.elapsed().as_secs_f64() * 1e3;
                            let t = Instant::now();
                            buffer.add(&tex)?;
                            timing.fuse_ms = t.elapsed().as_secs_f64() * 1e3;
                            for (s, a) in alpha_sum.iter_mut().zip(&fit.alpha.alpha) {
                                *s += a;
                            }
                            for (s, p) in psi_sum.iter_mut().zip(&fit.psi.psi) {
                                *s += p;
                            }
                            fitted += 1;
                            record.fit = Some(fit);
                        }
                    }
                }
            }
            info!(
                "frame {index}: track {:.1} ms, fit {:.1} ms, remap {:.1} ms, fuse {:.1} ms",
                timing.track_ms, timing.fit_ms, timing.remap_ms, timing.fuse_ms
            );
            if let Some((rec_out, time_out)) = writers.as_mut() {
                serde_json::to_writer(&mut *rec_out, &record)?;
                rec_out.write_all(b"\n")?;
                serde_json::to_writer(&mut *time_out, &timing)?;
                time_out.write_all(b"\n")?;
            }
            if let (Some(dir), Some(every)) = (output_dir, self.settings.snapshot_interval) {
                if (index + 1) % every == 0 {
                    buffer
                        .fused()
                        .save_png(dir.join(format!("isomap_snapshot_{index:04}.png")))?;
                }
            }
            records.push(record);
            timings.push(timing);
        }
        if records.is_empty() {
            return Err(Error::InvalidArgument("video has no frames".into()));
        }
        if let Some((mut a, mut b)) = writers {
            a.flush()?;
            b.flush()?;
        }

        let n = fitted.max(1) as f64;
        let mean_alpha = ShapeCoefficients::new(alpha_sum.iter().map(|s| s / n).collect());
        let mean_psi = ExpressionCoefficients::new(psi_sum.iter().map(|s| s / n).collect());
        let fused = buffer.fused();
        if let Some(dir) = output_dir {
            fused.save_png(dir.join("isomap.png"))?;
            let mesh = self.model.generate_shape_with_expression(
                &self.blendshapes,
                &mean_alpha,
                &mean_psi,
            )?;
            write_obj(dir.join("mesh.obj"), &mesh, &self.model)?;
        }
        Ok(RunOutput {
            records,
            timings,
            fused,
            mean_alpha,
            mean_psi,
        })
    }

    /// Re-fuses frames from stored per-frame fits, e.g. for offline median
    /// fusion after a tracking run.
    pub fn fuse_records<I>(&self, frames: I, records: &[FrameRecord]) -> Result<FusedTexture>
    where
        I: IntoIterator<Item = Result<RgbImage>>,
    {
        let mut buffer = self.new_buffer()?;
        for (frame, record) in frames.into_iter().zip(records) {
            let frame = frame?;
            let Some(fit) = &record.fit else { continue };
            let mesh = fit.mesh(&self.model, &self.blendshapes)?;
            let tex = remap_frame(
                &frame,
                record.frame_index,
                &mesh,
                self.model.triangles(),
                &fit.camera,
                &self.layout,
            );
            buffer.add(&tex)?;
        }
        Ok(buffer.fused())
    }
}

/// Reads a JSON-lines record file.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{SyntheticFace, SyntheticFaceConfig};

    fn small_face() -> SyntheticFace {
        SyntheticFace::generate(&SyntheticFaceConfig {
            grid_cols: 40,
            grid_rows: 30,
            ..Default::default()
        })
        .unwrap()
    }

    fn pipeline(face: &SyntheticFace, resolution: usize) -> Pipeline {
        Pipeline::new(
            face.model.clone(),
            face.blendshapes.clone(),
            face.mapping.clone(),
            PipelineSettings {
                isomap_resolution: resolution,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn config_validation_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            model_path: "m.json".into(),
            ..Default::default()
        };
        let path = dir.path().join("config.json");
        config.save(&path).unwrap();
        let back = PipelineConfig::load(&path).unwrap();
        assert_eq!(back.model_path, dir.path().join("m.json"));
        assert!(matches!(back.validate(), Err(Error::FileNotFound(_))));
        let bad = PipelineSettings {
            isomap_resolution: 0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert_eq!(PipelineSettings::default().effective_super_resolution(), 1);
        let median = PipelineSettings {
            fusion_mode: FusionMode::Median,
            ..Default::default()
        };
        assert_eq!(median.effective_super_resolution(), 2);
    }

    #[test]
    fn single_and_repeated_frames() {
        let face = small_face();
        let seq = SyntheticSequence::generate(
            &face,
            &ShapeCoefficients::zeros(10),
            &[ExpressionCoefficients::zeros(5)],
            &yaw_sweep(1, 10.0, 10.0, 60.0, Vector2::new(64.0, 64.0)),
            &face.smooth_texture(64),
            128,
            128,
        )
        .unwrap();
        let p = pipeline(&face, 64);
        let frame = &seq.frames[0];
        let lms = vec![frame.landmarks.clone(); 10];
        let one = p
            .run_video(
                vec![Ok(frame.image.clone())],
                LandmarkSource::Given(&lms[..1]),
                None,
            )
            .unwrap();
        let fit = one.records[0].fit.as_ref().unwrap();
        let mesh = fit.mesh(&p.model, &p.blendshapes).unwrap();
        let single = remap_frame(
            &frame.image,
            0,
            &mesh,
            p.model.triangles(),
            &fit.camera,
            p.layout(),
        );
        for k in 0..single.weight.len() {
            assert_eq!(one.fused.observed[k], single.weight[k] > 0.0);
            if single.weight[k] > 0.0 {
                assert_eq!(one.fused.colour[k], single.colour[k]);
            }
        }

        let ten = p
            .run_video(
                (0..10).map(|_| Ok(frame.image.clone())),
                LandmarkSource::Given(&lms),
                None,
            )
            .unwrap();
        for k in 0..single.weight.len() {
            if single.weight[k] > 0.0 {
                for ch in 0..3 {
                    assert!((ten.fused.colour[k][ch] - single.colour[k][ch]).abs() < 1e-4);
                }
            }
        }
        assert_eq!(ten.timings.len(), 10);
    }

    #[test]
    fn records_round_trip_through_json_lines() {
        let face = small_face();
        let seq = SyntheticSequence::generate(
            &face,
            &ShapeCoefficients::zeros(10),
            &[ExpressionCoefficients::zeros(5)],
            &yaw_sweep(2, -10.0, 10.0, 60.0, Vector2::new(64.0, 64.0)),
            &face.smooth_texture(32),
            128,
            128,
        )
        .unwrap();
        let p = pipeline(&face, 32);
        let lms: Vec<_> = seq.frames.iter().map(|f| f.landmarks.clone()).collect();
        let dir = tempfile::tempdir().unwrap();
        let out = p
            .run_video(
                seq.frames.iter().map(|f| Ok(f.image.clone())),
                LandmarkSource::Given(&lms),
                Some(dir.path()),
            )
            .unwrap();
        let back = load_records(dir.path().join("frames.jsonl")).unwrap();
        assert_eq!(back, out.records);
        assert!(dir.path().join("isomap.png").exists());
        assert!(dir.path().join("mesh.obj").exists());
        assert_eq!(
            fs::read_to_string(dir.path().join("timings.jsonl"))
                .unwrap()
                .lines()
                .count(),
            2
        );
    }

    #[test]
    fn missing_landmarks_skip_the_frame() {
        let face = small_face();
        let p = pipeline(&face, 16);
        let frame = RgbImage::new(32, 32, [0.5; 3]);
        let out = p
            .run_video(vec![Ok(frame)], LandmarkSource::Given(&[]), None)
            .unwrap();
        assert!(out.records[0].skipped.is_some());
        assert_eq!(out.fused.observed_texels(), 0);
    }
}
