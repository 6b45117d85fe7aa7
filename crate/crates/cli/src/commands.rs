use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::{Rotation3, Vector2};

use morphfit::camera::AffineCamera;
use morphfit::fitting::{fit_frame, FitOptions, FitResult};
use morphfit::imaging::RgbImage;
use morphfit::landmarks::{LandmarkSet, LandmarkVertexMapping};
use morphfit::model::{
    load_model, save_model, write_obj, ExpressionCoefficients, ShapeCoefficients,
};
use morphfit::pipeline::{
    evaluate_sequence, load_records, load_sequence_frames, render_training_set, save_sequence,
    yaw_sweep, LandmarkSource, Pipeline, PipelineConfig, SyntheticSequence, TrainingSetConfig,
};
use morphfit::synthetic::{SyntheticFace, SyntheticFaceConfig};
use morphfit::texture::{remap_frame, render_view, IsomapLayout};
use morphfit::tracker::{train, BoundingBox, PerturbationConfig, TrainConfig, TrainingSample};

use crate::{EvalArgs, FitImageArgs, FuseArgs, RenderArgs, SynthArgs, TrackVideoArgs, TrainArgs};

/// Camera scale relative to the smaller frame side used by `synth`.
const SYNTH_SCALE: f64 = 0.34;

fn gray_to_rgb(frame: &morphfit::imaging::ImageFrame) -> RgbImage {
    RgbImage::from_fn(frame.width(), frame.height(), |x, y| {
        let v = frame.data()[y * frame.width() + x];
        [v, v, v]
    })
}

fn box_text(b: &BoundingBox) -> String {
    format!("{:.3},{:.3},{:.3},{:.3}", b.x, b.y, b.width, b.height)
}

pub fn synth(args: SynthArgs) -> Result<()> {
    if args.frames == 0 {
        bail!("--frames must be at least 1");
    }
    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let face = SyntheticFace::generate(&SyntheticFaceConfig {
        seed: args.seed,
        ..Default::default()
    })?;
    save_model(out.join("model.json"), &face.model, &face.blendshapes)?;
    face.mapping.save(out.join("mapping.txt"))?;
    let texture = face.face_texture(512);
    texture.save_png(out.join("texture.png"))?;

    let scale = SYNTH_SCALE * args.width.min(args.height) as f64;
    let center = Vector2::new(args.width as f64 / 2.0, args.height as f64 / 2.0);
    let psis: Vec<ExpressionCoefficients> = (0..args.frames)
        .map(|i| {
            let t = i as f64 / args.frames.max(2) as f64;
            ExpressionCoefficients::new(
                (0..face.blendshapes.len())
                    .map(|j| 0.3 * (6.0 * t + j as f64).sin().max(0.0))
                    .collect(),
            )
        })
        .collect();
    let alpha = ShapeCoefficients::new(
        (0..face.model.num_components())
            .map(|j| 0.6 * (j as f64 + 1.0).sin())
            .collect(),
    );
    let seq = SyntheticSequence::generate(
        &face,
        &alpha,
        &psis,
        &yaw_sweep(args.frames, -args.yaw, args.yaw, scale, center),
        &texture,
        args.width,
        args.height,
    )?;
    save_sequence(&seq, out.join("sequence"))?;
    let first: Vec<_> = seq.frames[0]
        .landmarks
        .entries()
        .iter()
        .map(|e| e.point())
        .collect();
    let face_box = BoundingBox::of_points(&first).context("empty landmark set")?;
    fs::write(out.join("face_box.txt"), box_text(&face_box) + "\n")?;

    let train_dir = out.join("train");
    fs::create_dir_all(&train_dir)?;
    let samples = render_training_set(
        &face,
        &TrainingSetConfig {
            count: args.train_count,
            width: args.width,
            height: args.height,
            scale,
            seed: args.seed,
            ..Default::default()
        },
    )?;
    let ids: Vec<_> = face.landmark_vertices.keys().copied().collect();
    for (i, s) in samples.iter().enumerate() {
        gray_to_rgb(&s.frame).save_png(train_dir.join(format!("sample_{i:04}.png")))?;
        let entries = ids
            .iter()
            .zip(&s.landmarks)
            .map(|(&id, p)| morphfit::landmarks::Landmark::new(id, p.x, p.y))
            .collect();
        LandmarkSet::new(entries)?.save(train_dir.join(format!("sample_{i:04}.pts")))?;
    }

    let config = PipelineConfig {
        output_dir: PathBuf::from("run"),
        ..Default::default()
    };
    config.save(out.join("config.json"))?;
    println!(
        "wrote model, mapping, texture, {} frames, {} training images and config.json to {}",
        args.frames,
        samples.len(),
        out.display()
    );
    println!("face box of the first frame: {}", box_text(&face_box));
    Ok(())
}

pub fn train_tracker(args: TrainArgs) -> Result<()> {
    let images = load_sequence_frames(&args.data)?;
    if images.is_empty() {
        bail!("no PNG images in {}", args.data.display());
    }
    let mut samples = Vec::with_capacity(images.len());
    let mut ids: Option<Vec<_>> = None;
    for (i, path) in images.iter().enumerate() {
        let pts = path.with_extension("pts");
        let lms =
            LandmarkSet::load(&pts).with_context(|| format!("landmarks for {}", path.display()))?;
        let these: Vec<_> = lms.ids().collect();
        match &ids {
            None => ids = Some(these),
            Some(expected) if *expected != these => {
                bail!(
                    "{} has a different landmark layout from the first file",
                    pts.display()
                )
            }
            Some(_) => {}
        }
        let frame = RgbImage::load_png(path)?.to_gray(i);
        samples.push(TrainingSample {
            frame,
            landmarks: lms.entries().iter().map(|e| e.point()).collect(),
        });
    }
    let config = TrainConfig {
        n_stages: args.stages,
        ridge_relative: args.ridge,
        perturbation: PerturbationConfig {
            per_sample: args.perturbations,
            seed: args.seed,
            ..Default::default()
        },
        ..Default::default()
    };
    let (cascade, report) = train(&samples, ids.unwrap_or_default(), &config)?;
    cascade.save(&args.out)?;
    println!("initial RMS error {:.3} px", report.initial_error);
    for (k, e) in report.stage_errors.iter().enumerate() {
        println!("stage {}: RMS error {e:.3} px", k + 1);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn fit_image(args: FitImageArgs) -> Result<()> {
    let (model, blendshapes) = load_model(&args.model)?;
    let mapping = LandmarkVertexMapping::load(&args.mapping)?;
    mapping.validate(model.num_vertices())?;
    let image = RgbImage::load_png(&args.image)?;
    let landmarks = LandmarkSet::load(&args.landmarks)?;
    let options = FitOptions {
        lambda: args.lambda,
        outer_iterations: args.outer_iterations,
        ..Default::default()
    };
    let fit = fit_frame(&model, &blendshapes, &landmarks, &mapping, &options)?;
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("fit.json"),
        serde_json::to_string_pretty(&fit)?,
    )?;
    let mesh = fit.mesh(&model, &blendshapes)?;
    write_obj(args.out.join("mesh.obj"), &mesh, &model)?;
    let layout = IsomapLayout::for_model(&model, args.resolution)?;
    let tex = remap_frame(&image, 0, &mesh, model.triangles(), &fit.camera, &layout);
    tex.save_png(args.out.join("isomap.png"))?;
    tex.save_weight_png(args.out.join("weights.png"))?;
    let residual = fit.residuals.last().copied().unwrap_or(0.0);
    println!(
        "fit {} landmarks, residual {residual:.3} px², {} observed texels; wrote {}",
        landmarks.len(),
        tex.observed_texels(),
        args.out.display()
    );
    Ok(())
}

fn frame_source(dir: &Path) -> Result<Vec<PathBuf>> {
    let frames = load_sequence_frames(dir)?;
    if frames.is_empty() {
        bail!("no PNG frames in {}", dir.display());
    }
    Ok(frames)
}

pub fn track_video(args: TrackVideoArgs) -> Result<()> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    let (pipeline, cascade) = Pipeline::from_config(&config)?;
    let frames = frame_source(&args.frames)?;
    let out = pipeline.run_video(
        frames.iter().map(RgbImage::load_png),
        LandmarkSource::Tracker {
            cascade: &cascade,
            face_box: args.face_box,
        },
        Some(&config.output_dir),
    )?;
    let skipped = out.records.iter().filter(|r| r.skipped.is_some()).count();
    let n = out.timings.len() as f64;
    let mean =
        |f: fn(&morphfit::pipeline::FrameTiming) -> f64| out.timings.iter().map(f).sum::<f64>() / n;
    println!(
        "{} frames ({} skipped); mean per frame: track {:.1} ms, fit {:.1} ms, remap {:.1} ms, fuse {:.1} ms",
        out.records.len(),
        skipped,
        mean(|t| t.track_ms),
        mean(|t| t.fit_ms),
        mean(|t| t.remap_ms),
        mean(|t| t.fuse_ms)
    );
    println!(
        "fused isomap covers {} texels; wrote {}",
        out.fused.observed_texels(),
        config.output_dir.display()
    );
    Ok(())
}

pub fn fuse(args: FuseArgs) -> Result<()> {
    let config = PipelineConfig::load(&args.config)?;
    let (model, blendshapes) = load_model(&config.model_path)?;
    let mapping = LandmarkVertexMapping::load(&config.mapping_path)?;
    let mut settings = config.settings();
    settings.fusion_mode = args.mode;
    settings.super_resolution = args.super_resolution;
    let pipeline = Pipeline::new(model, blendshapes, mapping, settings)?;
    let records = load_records(&args.records)?;
    let frames = frame_source(&args.frames)?;
    if frames.len() < records.len() {
        bail!("{} records but only {} frames", records.len(), frames.len());
    }
    let fused = pipeline.fuse_records(frames.iter().map(RgbImage::load_png), &records)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fused.save_png(&args.out)?;
    println!(
        "fused {} texels; wrote {}",
        fused.observed_texels(),
        args.out.display()
    );
    Ok(())
}

/// Identity and expression from a fit.json or averaged over a frames.jsonl.
fn load_coefficients(path: &Path) -> Result<(ShapeCoefficients, ExpressionCoefficients)> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let fits: Vec<FitResult> = load_records(path)?
            .into_iter()
            .filter_map(|r| r.fit)
            .collect();
        let Some(first) = fits.first() else {
            bail!("no fitted frames in {}", path.display())
        };
        let n = fits.len() as f64;
        let mut alpha = vec![0.0; first.alpha.alpha.len()];
        let mut psi = vec![0.0; first.psi.psi.len()];
        for f in &fits {
            alpha
                .iter_mut()
                .zip(&f.alpha.alpha)
                .for_each(|(s, a)| *s += a / n);
            psi.iter_mut()
                .zip(&f.psi.psi)
                .for_each(|(s, p)| *s += p / n);
        }
        Ok((
            ShapeCoefficients::new(alpha),
            ExpressionCoefficients::new(psi),
        ))
    } else {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let fit: FitResult =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok((fit.alpha, fit.psi))
    }
}

pub fn render(args: RenderArgs) -> Result<()> {
    let (model, blendshapes) = load_model(&args.model)?;
    let (alpha, mut psi) = load_coefficients(&args.fit)?;
    if args.neutral {
        psi = ExpressionCoefficients::zeros(blendshapes.len());
    }
    let texture = RgbImage::load_png(&args.texture)?;
    let mesh = model.generate_shape_with_expression(&blendshapes, &alpha, &psi)?;
    let rotation =
        Rotation3::from_euler_angles(args.pitch.to_radians(), args.yaw.to_radians(), 0.0);
    let unit = AffineCamera::from_pose(1.0, &rotation, Vector2::zeros());
    let projected: Vec<_> = (0..mesh.num_vertices())
        .map(|i| unit.project(&mesh.vertex(i)))
        .collect();
    let bbox = BoundingBox::of_points(&projected).context("mesh has no vertices")?;
    let scale = 0.9 * (args.width as f64 / bbox.width).min(args.height as f64 / bbox.height);
    let center =
        Vector2::new(args.width as f64 / 2.0, args.height as f64 / 2.0) - bbox.center() * scale;
    let camera = AffineCamera::from_pose(scale, &rotation, center);
    let view = render_view(
        &model,
        &blendshapes,
        &alpha,
        &psi,
        &texture,
        &camera,
        args.width,
        args.height,
        [0.0; 3],
    )?;
    view.save_png(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_landmark_sets(path: &Path) -> Result<Vec<LandmarkSet>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "pts"));
        files.sort();
        if files.is_empty() {
            bail!("no .pts files in {}", path.display());
        }
        return files.iter().map(|f| Ok(LandmarkSet::load(f)?)).collect();
    }
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok(load_records(path)?
            .into_iter()
            .map(|r| r.landmarks)
            .collect());
    }
    Ok(vec![LandmarkSet::load(path)?])
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let pred = load_landmark_sets(&args.pred)?;
    let gt = load_landmark_sets(&args.gt)?;
    let report = evaluate_sequence(&pred, &gt)?;
    match args.json.as_deref() {
        Some(p) if p == Path::new("-") => println!("{}", serde_json::to_string_pretty(&report)?),
        Some(p) => {
            fs::write(p, serde_json::to_string_pretty(&report)?)?;
            println!("wrote {}", p.display());
        }
        None => {}
    }
    if args.json.as_deref() != Some(Path::new("-")) {
        println!(
            "mean error {:.4} of IED ({:.2}%), {:.3} px over {} frames",
            report.mean_normalized,
            100.0 * report.mean_normalized,
            report.mean_pixels,
            report.frames.len()
        );
    }
    Ok(())
}
