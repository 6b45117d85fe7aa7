//! Landmark error against ground truth, normalized by the inter-eye distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameError {
    pub frame_index: usize,
    /// Landmarks present in both sets.
    pub matched: usize,
    pub mean_pixels: f64,
    /// Mean error divided by the ground-truth outer-eye-corner distance.
    pub mean_normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub frames: Vec<FrameError>,
    pub mean_pixels: f64,
    pub mean_normalized: f64,
}

/// Mean point-to-point error over the ids both sets share.
pub fn evaluate_landmarks(
    frame_index: usize,
    predicted: &LandmarkSet,
    truth: &LandmarkSet,
) -> Result<FrameError> {
    let ied = truth
        .inter_eye_distance()
        .filter(|d| *d > 0.0)
        .ok_or_else(|| {
            Error::InvalidArgument("ground truth lacks both outer eye corners".into())
        })?;
    let errors: Vec<f64> = truth
        .entries()
        .iter()
        .filter_map(|t| predicted.get(t.id).map(|p| (p.point() - t.point()).norm()))
        .collect();
    if errors.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "frame {frame_index}: no landmarks in common"
        )));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok(FrameError {
        frame_index,
        matched: errors.len(),
        mean_pixels: mean,
        mean_normalized: mean / ied,
    })
}

pub fn evaluate_sequence(
    predicted: &[LandmarkSet],
    truth: &[LandmarkSet],
) -> Result<SequenceReport> {
    if predicted.len() != truth.len() {
        return Err(Error::dims(
            "predicted frames",
            truth.len(),
            predicted.len(),
        ));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no frames to evaluate".into()));
    }
    let frames = predicted
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (p, t))| evaluate_landmarks(i, p, t))
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len() as f64;
    Ok(SequenceReport {
        mean_pixels: frames.iter().map(|f| f.mean_pixels).sum::<f64>() / n,
        mean_normalized: frames.iter().map(|f| f.mean_normalized).sum::<f64>() / n,
        frames,
    })
}
