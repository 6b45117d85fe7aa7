//! Dense HOG descriptors on square patches around landmarks.
//!
//! Each patch is split into `cells × cells` square cells. Every pixel votes its
//! gradient magnitude into the orientation histograms of the neighbouring cells
//! (bilinear in space, linear between the two nearest unsigned-orientation
//! bins, whose centers sit at `k·π/bins`). The whole patch descriptor is then
//! L2-normalized with a small epsilon.

use std::f64::consts::PI;

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::imaging::ImageFrame;

pub const NORMALIZATION_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Cells per patch side.
    pub cells: usize,
    /// Unsigned orientation bins over [0, π).
    pub bins: usize,
    /// Fixed patch side in pixels; when absent the side follows `patch_scale`.
    pub patch_size: Option<usize>,
    /// Patch side as a fraction of the reference length of the current
    /// landmark estimate.
    pub patch_scale: f64,
    pub min_cell_size: usize,
    /// Landmarks (by position in the shape vector) whose distance is the
    /// reference length, normally the outer eye corners. The bounding-box
    /// width is used when absent.
    pub reference_pair: Option<(usize, usize)>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            cells: 3,
            bins: 9,
            patch_size: None,
            patch_scale: 0.25,
            min_cell_size: 2,
            reference_pair: None,
        }
    }
}

impl FeatureConfig {
    pub fn descriptor_len(&self) -> usize {
        self.cells * self.cells * self.bins
    }

    /// Cell side in pixels for the given landmark estimate.
    pub fn cell_size(&self, landmarks: &[Vector2<f64>]) -> usize {
        let side = match self.patch_size {
            Some(s) => s as f64,
            None => self.patch_scale * reference_length(landmarks, self.reference_pair),
        };
        let cell = (side / self.cells as f64).round();
        if cell.is_finite() && cell >= self.min_cell_size as f64 {
            cell as usize
        } else {
            self.min_cell_size.max(1)
        }
    }
}

fn reference_length(landmarks: &[Vector2<f64>], pair: Option<(usize, usize)>) -> f64 {
    if let Some((a, b)) = pair {
        if a < landmarks.len() && b < landmarks.len() {
            return (landmarks[a] - landmarks[b]).norm();
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in landmarks {
        lo = lo.min(p.x);
        hi = hi.max(p.x);
    }
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

/// HOG descriptor of the patch whose top-left pixel is `(x0, y0)`.
pub fn patch_descriptor(
    frame: &ImageFrame,
    x0: i64,
    y0: i64,
    cells: usize,
    cell_size: usize,
    bins: usize,
) -> Vec<f64> {
    let side = cells * cell_size;
    let mut hist = vec![0.0; cells * cells * bins];
    let bin_width = PI / bins as f64;
    let cs = cell_size as f64;
    for py in 0..side {
        for px in 0..side {
            let (x, y) = (x0 + px as i64, y0 + py as i64);
            let gx = (frame.get_clamped(x + 1, y) - frame.get_clamped(x - 1, y)) as f64;
            let gy = (frame.get_clamped(x, y + 1) - frame.get_clamped(x, y - 1)) as f64;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx);
            if angle < 0.0 {
                angle += PI;
            }
            let b = (angle / bin_width).min(bins as f64);
            let b0 = b.floor();
            let bf = b - b0;
            let bin0 = b0 as usize % bins;
            let bin1 = (bin0 + 1) % bins;

            let cx = (px as f64 + 0.5) / cs - 0.5;
            let cy = (py as f64 + 0.5) / cs - 0.5;
            let (ix, iy) = (cx.floor(), cy.floor());
            let (fx, fy) = (cx - ix, cy - iy);
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                let j = iy as i64 + dy;
                if j < 0 || j >= cells as i64 || wy == 0.0 {
                    continue;
                }
                for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                    let i = ix as i64 + dx;
                    if i < 0 || i >= cells as i64 || wx == 0.0 {
                        continue;
                    }
                    let base = (j as usize * cells + i as usize) * bins;
                    let w = mag * wx * wy;
                    hist[base + bin0] += w * (1.0 - bf);
                    hist[base + bin1] += w * bf;
                }
            }
        }
    }
    let norm = (hist.iter().map(|v| v * v).sum::<f64>()
        + NORMALIZATION_EPSILON * NORMALIZATION_EPSILON)
        .sqrt();
    hist.iter_mut().for_each(|v| *v /= norm);
    hist
}

/// Top-left pixel of the patch centered on `p`, after clamping `p` into the
/// frame and snapping it to the pixel grid.
pub fn patch_origin(frame: &ImageFrame, p: &Vector2<f64>, side: usize) -> (i64, i64) {
    let cx = p.x.clamp(0.0, frame.width() as f64 - 1.0).floor() as i64;
    let cy = p.y.clamp(0.0, frame.height() as f64 - 1.0).floor() as i64;
    let half = (side / 2) as i64;
    (cx - half, cy - half)
}

/// Concatenated patch descriptors, one per landmark.
pub fn extract_features(
    frame: &ImageFrame,
    landmarks: &[Vector2<f64>],
    config: &FeatureConfig,
) -> DVector<f64> {
    let cell = config.cell_size(landmarks);
    let side = cell * config.cells;
    let mut out = Vec::with_capacity(landmarks.len() * config.descriptor_len());
    for p in landmarks {
        let p = if p.x.is_finite() && p.y.is_finite() {
            *p
        } else {
            Vector2::zeros()
        };
        let (x0, y0) = patch_origin(frame, &p, side);
        out.extend(patch_descriptor(
            frame,
            x0,
            y0,
            config.cells,
            cell,
            config.bins,
        ));
    }
    DVector::from_vec(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation: every pixel against every cell and bin with
    /// explicit tent weights.
    fn naive_hog(
        frame: &ImageFrame,
        x0: i64,
        y0: i64,
        cells: usize,
        cell: usize,
        bins: usize,
    ) -> Vec<f64> {
        let side = cells * cell;
        let mut h = vec![0.0; cells * cells * bins];
        for py in 0..side {
            for px in 0..side {
                let (x, y) = (x0 + px as i64, y0 + py as i64);
                let gx = (frame.get_clamped(x + 1, y) - frame.get_clamped(x - 1, y)) as f64;
                let gy = (frame.get_clamped(x, y + 1) - frame.get_clamped(x, y - 1)) as f64;
                let mag = (gx * gx + gy * gy).sqrt();
                let angle = gy.atan2(gx).rem_euclid(PI);
                let pos = angle / (PI / bins as f64);
                for j in 0..cells {
                    for i in 0..cells {
                        let cx = (i as f64 + 0.5) * cell as f64;
                        let cy = (j as f64 + 0.5) * cell as f64;
                        let wx = (1.0 - ((px as f64 + 0.5) - cx).abs() / cell as f64).max(0.0);
                        let wy = (1.0 - ((py as f64 + 0.5) - cy).abs() / cell as f64).max(0.0);
                        for k in 0..bins {
                            let d = (pos - k as f64).abs();
                            let d = d.min(bins as f64 - d);
                            let wb = (1.0 - d).max(0.0);
                            h[(j * cells + i) * bins + k] += mag * wx * wy * wb;
                        }
                    }
                }
            }
        }
        let n = (h.iter().map(|v| v * v).sum::<f64>() + 1e-10).sqrt();
        h.into_iter().map(|v| v / n).collect()
    }

    #[test]
    fn constant_patch_gives_zero_descriptor() {
        let f = ImageFrame::from_fn(32, 32, |_, _| 0.4);
        let d = extract_features(&f, &[Vector2::new(16.0, 16.0)], &FeatureConfig::default());
        assert_eq!(d.len(), 81);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_edge_votes_into_horizontal_gradient_bin() {
        let f = ImageFrame::from_fn(40, 40, |x, _| if x < 20 { 0.0 } else { 1.0 });
        let d = patch_descriptor(&f, 11, 11, 3, 6, 9);
        let mut per_bin = [0.0; 9];
        for (i, v) in d.iter().enumerate() {
            per_bin[i % 9] += v;
        }
        assert!(per_bin[0] > 0.0);
        assert!(per_bin[1..].iter().all(|&v| v == 0.0), "{per_bin:?}");
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = ImageFrame::from_fn(50, 40, |_, _| rng.random::<f32>());
        for (x0, y0, cells, cell, bins) in [(5, 7, 3, 4, 9), (-3, 30, 2, 5, 6), (20, 0, 4, 3, 8)] {
            let fast = patch_descriptor(&f, x0, y0, cells, cell, bins);
            let slow = naive_hog(&f, x0, y0, cells, cell, bins);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn integer_shift_leaves_features_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base: Vec<f32> = (0..100 * 100).map(|_| rng.random()).collect();
        let f = ImageFrame::new(100, 100, base.clone(), 0).unwrap();
        let (dx, dy) = (7usize, 4usize);
        let shifted = ImageFrame::from_fn(100, 100, |x, y| {
            if x >= dx && y >= dy {
                base[(y - dy) * 100 + (x - dx)]
            } else {
                0.0
            }
        });
        let lms = vec![
            Vector2::new(30.3, 40.7),
            Vector2::new(52.9, 41.2),
            Vector2::new(45.0, 60.5),
        ];
        let moved: Vec<_> = lms
            .iter()
            .map(|p| p + Vector2::new(dx as f64, dy as f64))
            .collect();
        let config = FeatureConfig::default();
        assert_eq!(
            extract_features(&f, &lms, &config),
            extract_features(&shifted, &moved, &config)
        );
    }

    #[test]
    fn out_of_frame_landmarks_are_clamped() {
        let f = ImageFrame::from_fn(20, 20, |x, y| ((x * y) % 7) as f32 / 7.0);
        let config = FeatureConfig {
            patch_size: Some(9),
            ..Default::default()
        };
        let d = extract_features(
            &f,
            &[Vector2::new(-40.0, 300.0), Vector2::new(f64::NAN, 1.0)],
            &config,
        );
        assert!(d.iter().all(|v| v.is_finite()));
        let inside = extract_features(
            &f,
            &[Vector2::new(0.0, 19.0), Vector2::new(0.0, 0.0)],
            &config,
        );
        assert_eq!(d, inside);
    }
}
