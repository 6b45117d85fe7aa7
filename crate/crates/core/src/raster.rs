//! Watertight triangle scan conversion shared by the isomap layout, the depth
//! buffer and the renderer.
//!
//! A sample point is covered when it lies strictly inside the triangle, or
//! exactly on an edge that the triangle shares with another triangle. Edge
//! functions are evaluated with the endpoints in a canonical (vertex-id)
//! order, so both triangles adjacent to an edge see the same value with
//! opposite signs and no sample on a shared edge is dropped.

use std::collections::HashMap;

use nalgebra::Vector2;

/// For each triangle, whether edge `k` (the edge opposite vertex `k`) is shared
/// with another triangle.
pub fn shared_edges(triangles: &[[usize; 3]]) -> Vec<[bool; 3]> {
    let mut count: HashMap<(usize, usize), u32> = HashMap::new();
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    for t in triangles {
        for k in 0..3 {
            *count
                .entry(key(t[(k + 1) % 3], t[(k + 2) % 3]))
                .or_default() += 1;
        }
    }
    triangles
        .iter()
        .map(|t| std::array::from_fn(|k| count[&key(t[(k + 1) % 3], t[(k + 2) % 3])] > 1))
        .collect()
}

#[inline]
fn orient(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// A triangle prepared for coverage tests.
#[derive(Debug, Clone, Copy)]
pub struct RasterTriangle {
    points: [Vector2<f64>; 3],
    ids: [usize; 3],
    shared: [bool; 3],
    sign: f64,
}

impl RasterTriangle {
    /// Returns `None` for zero-area triangles.
    pub fn new(points: [Vector2<f64>; 3], ids: [usize; 3], shared: [bool; 3]) -> Option<Self> {
        let area = orient(&points[0], &points[1], &points[2]);
        if area == 0.0 || !area.is_finite() {
            return None;
        }
        Some(Self {
            points,
            ids,
            shared,
            sign: area.signum(),
        })
    }

    /// Edge function for edge `k`, positive on the inner side.
    #[inline]
    fn edge(&self, k: usize, p: &Vector2<f64>) -> f64 {
        let (a, b) = ((k + 1) % 3, (k + 2) % 3);
        let value = if self.ids[a] < self.ids[b] {
            orient(&self.points[a], &self.points[b], p)
        } else {
            -orient(&self.points[b], &self.points[a], p)
        };
        value * self.sign
    }

    /// Barycentric coordinates of `p` if the triangle covers it.
    #[inline]
    pub fn cover(&self, p: &Vector2<f64>) -> Option<[f64; 3]> {
        let e = [self.edge(0, p), self.edge(1, p), self.edge(2, p)];
        for (v, shared) in e.iter().zip(self.shared) {
            if *v < 0.0 || (*v == 0.0 && !shared) {
                return None;
            }
        }
        let sum = e[0] + e[1] + e[2];
        if sum <= 0.0 {
            return None;
        }
        Some([e[0] / sum, e[1] / sum, e[2] / sum])
    }

    /// Visits every pixel `(x, y)` in a `width × height` grid whose center
    /// `(x + 0.5, y + 0.5)` is covered.
    pub fn for_each_pixel(
        &self,
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize, [f64; 3]),
    ) {
        if width == 0 || height == 0 {
            return;
        }
        let (mut lo, mut hi) = (self.points[0], self.points[0]);
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let x0 = (lo.x - 0.5).ceil().max(0.0);
        let y0 = (lo.y - 0.5).ceil().max(0.0);
        let x1 = (hi.x - 0.5).floor().min(width as f64 - 1.0);
        let y1 = (hi.y - 0.5).floor().min(height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                if let Some(b) = self.cover(&p) {
                    f(x, y, b);
                }
            }
        }
    }

    pub fn interpolate(&self, bary: [f64; 3]) -> Vector2<f64> {
        self.points[0] * bary[0] + self.points[1] * bary[1] + self.points[2] * bary[2]
    }

    /// Barycentric coordinates of an arbitrary point (may be negative).
    pub fn barycentric(&self, p: &Vector2<f64>) -> [f64; 3] {
        let e = [self.edge(0, p), self.edge(1, p), self.edge(2, p)];
        let sum = e[0] + e[1] + e[2];
        [e[0] / sum, e[1] / sum, e[2] / sum]
    }
}
