//! 2D landmark sets and the landmark → model-vertex mapping, with their text
//! file formats.
//!
//! Landmark file, one landmark per line:
//!
//! ```text
//! # id x y [variance]
//! 37 101.5 88.25
//! 46 160.0 87.5 2.0
//! ```
//!
//! Mapping file, one fixed pair per line plus the two contour candidate lists:
//!
//! ```text
//! 31 1480
//! contour_left: 12 13 14
//! contour_right: 51 52 53
//! ```
//!
//! `contour_left` is the outline on the model's −x side, which appears on the
//! left of the image in a frontal view. Contour-class landmark ids default to
//! the 68-point convention (1–8 left, 10–17 right) and can be overridden with
//! `contour_landmarks_left:` / `contour_landmarks_right:` lines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type LandmarkId = u32;

/// Outer eye corners in the 68-point scheme, used for the inter-eye distance.
pub const OUTER_EYE_CORNERS: (LandmarkId, LandmarkId) = (37, 46);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: LandmarkId,
    pub position: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
}

impl Landmark {
    pub fn new(id: LandmarkId, x: f64, y: f64) -> Self {
        Self {
            id,
            position: [x, y],
            variance: None,
        }
    }

    pub fn point(&self) -> Vector2<f64> {
        Vector2::new(self.position[0], self.position[1])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Landmark>", into = "Vec<Landmark>")]
pub struct LandmarkSet {
    entries: Vec<Landmark>,
}

impl TryFrom<Vec<Landmark>> for LandmarkSet {
    type Error = Error;

    fn try_from(entries: Vec<Landmark>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<LandmarkSet> for Vec<Landmark> {
    fn from(set: LandmarkSet) -> Self {
        set.entries
    }
}

impl LandmarkSet {
    pub fn new(entries: Vec<Landmark>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for l in &entries {
            if !seen.insert(l.id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate landmark id {}",
                    l.id
                )));
            }
            if !l.position.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "landmark {} has a non-finite position",
                    l.id
                )));
            }
            if let Some(v) = l.variance {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "landmark {} has non-positive variance {v}",
                        l.id
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Landmark] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: LandmarkId) -> Option<&Landmark> {
        self.entries.iter().find(|l| l.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = LandmarkId> + '_ {
        self.entries.iter().map(|l| l.id)
    }

    /// Entries whose id satisfies `keep`, in original order.
    pub fn filtered(&self, keep: impl Fn(LandmarkId) -> bool) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|l| keep(l.id))
                .cloned()
                .collect(),
        }
    }

    /// Outer-eye-corner distance, if both corners are present.
    pub fn inter_eye_distance(&self) -> Option<f64> {
        let a = self.get(OUTER_EYE_CORNERS.0)?;
        let b = self.get(OUTER_EYE_CORNERS.1)?;
        Some((a.point() - b.point()).norm())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ctx = || format!("landmark file line {}", lineno + 1);
            let fields: Vec<&str> = line.split_whitespace().collect();
            if !(3..=4).contains(&fields.len()) {
                return Err(Error::parse(ctx(), "expected `id x y [variance]`"));
            }
            let id = fields[0]
                .parse()
                .map_err(|e| Error::parse(ctx(), format!("bad id: {e}")))?;
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::parse(ctx(), format!("bad number `{s}`: {e}")))
            };
            let variance = fields.get(3).map(|s| num(s)).transpose()?;
            entries.push(Landmark {
                id,
                position: [num(fields[1])?, num(fields[2])?],
                variance,
            });
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.entries {
            match l.variance {
                Some(v) => writeln!(out, "{} {} {} {}", l.id, l.position[0], l.position[1], v),
                None => writeln!(out, "{} {} {}", l.id, l.position[0], l.position[1]),
            }
            .unwrap();
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read_text(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Which model outline a contour landmark belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContourSide {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkVertexMapping {
    pairs: BTreeMap<LandmarkId, usize>,
    contour_left: Vec<usize>,
    contour_right: Vec<usize>,
    contour_ids_left: Vec<LandmarkId>,
    contour_ids_right: Vec<LandmarkId>,
}

pub fn default_contour_ids() -> (Vec<LandmarkId>, Vec<LandmarkId>) {
    ((1..=8).collect(), (10..=17).collect())
}

impl LandmarkVertexMapping {
    pub fn new(
        pairs: BTreeMap<LandmarkId, usize>,
        contour_left: Vec<usize>,
        contour_right: Vec<usize>,
    ) -> Result<Self> {
        let (l, r) = default_contour_ids();
        Self::with_contour_ids(pairs, contour_left, contour_right, l, r)
    }

    pub fn with_contour_ids(
        pairs: BTreeMap<LandmarkId, usize>,
        contour_left: Vec<usize>,
        contour_right: Vec<usize>,
        contour_ids_left: Vec<LandmarkId>,
        contour_ids_right: Vec<LandmarkId>,
    ) -> Result<Self> {
        let fixed: BTreeSet<usize> = pairs.values().copied().collect();
        for (name, list) in [
            ("contour_left", &contour_left),
            ("contour_right", &contour_right),
        ] {
            if let Some(v) = list.iter().find(|v| fixed.contains(v)) {
                return Err(Error::validation(
                    name,
                    format!("vertex {v} is also used by a fixed landmark pair"),
                ));
            }
        }
        if let Some(id) = contour_ids_left
            .iter()
            .chain(&contour_ids_right)
            .find(|id| pairs.contains_key(id))
        {
            return Err(Error::validation(
                "contour landmarks",
                format!("landmark {id} is both contour-class and fixed"),
            ));
        }
        Ok(Self {
            pairs,
            contour_left,
            contour_right,
            contour_ids_left,
            contour_ids_right,
        })
    }

    /// Checks all vertex indices against the model size.
    pub fn validate(&self, num_vertices: usize) -> Result<()> {
        let all = self
            .pairs
            .values()
            .chain(&self.contour_left)
            .chain(&self.contour_right);
        for &v in all {
            if v >= num_vertices {
                return Err(Error::validation(
                    "mapping",
                    format!("vertex {v} >= N = {num_vertices}"),
                ));
            }
        }
        Ok(())
    }

    pub fn pairs(&self) -> &BTreeMap<LandmarkId, usize> {
        &self.pairs
    }

    pub fn vertex_for(&self, id: LandmarkId) -> Option<usize> {
        self.pairs.get(&id).copied()
    }

    pub fn contour_candidates(&self, side: ContourSide) -> &[usize] {
        match side {
            ContourSide::Left => &self.contour_left,
            ContourSide::Right => &self.contour_right,
        }
    }

    pub fn contour_ids(&self, side: ContourSide) -> &[LandmarkId] {
        match side {
            ContourSide::Left => &self.contour_ids_left,
            ContourSide::Right => &self.contour_ids_right,
        }
    }

    pub fn contour_side_of(&self, id: LandmarkId) -> Option<ContourSide> {
        if self.contour_ids_left.contains(&id) {
            Some(ContourSide::Left)
        } else if self.contour_ids_right.contains(&id) {
            Some(ContourSide::Right)
        } else {
            None
        }
    }

    pub fn has_contours(&self) -> bool {
        !self.contour_left.is_empty() || !self.contour_right.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        let mut lists: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let (mut ids_left, mut ids_right) = default_contour_ids();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ctx = || format!("mapping file line {}", lineno + 1);
            if let Some((key, rest)) = line.split_once(':') {
                let values = rest
                    .split_whitespace()
                    .map(|s| s.parse::<u64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::parse(ctx(), e.to_string()))?;
                match key.trim() {
                    k @ ("contour_left" | "contour_right") => {
                        lists.insert(
                            if k == "contour_left" { "l" } else { "r" },
                            values.into_iter().map(|v| v as usize).collect(),
                        );
                    }
                    "contour_landmarks_left" => {
                        ids_left = values.into_iter().map(|v| v as LandmarkId).collect()
                    }
                    "contour_landmarks_right" => {
                        ids_right = values.into_iter().map(|v| v as LandmarkId).collect()
                    }
                    other => return Err(Error::parse(ctx(), format!("unknown key `{other}`"))),
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(Error::parse(ctx(), "expected `landmark_id vertex_id`"));
            }
            let id: LandmarkId = fields[0]
                .parse()
                .map_err(|e| Error::parse(ctx(), format!("bad landmark id: {e}")))?;
            let v: usize = fields[1]
                .parse()
                .map_err(|e| Error::parse(ctx(), format!("bad vertex id: {e}")))?;
            if pairs.insert(id, v).is_some() {
                return Err(Error::parse(ctx(), format!("landmark {id} mapped twice")));
            }
        }
        Self::with_contour_ids(
            pairs,
            lists.remove("l").unwrap_or_default(),
            lists.remove("r").unwrap_or_default(),
            ids_left,
            ids_right,
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, v) in &self.pairs {
            writeln!(out, "{id} {v}").unwrap();
        }
        let join = |xs: &mut dyn Iterator<Item = String>| xs.collect::<Vec<_>>().join(" ");
        writeln!(
            out,
            "contour_left: {}",
            join(&mut self.contour_left.iter().map(|v| v.to_string()))
        )
        .unwrap();
        writeln!(
            out,
            "contour_right: {}",
            join(&mut self.contour_right.iter().map(|v| v.to_string()))
        )
        .unwrap();
        if (
            self.contour_ids_left.clone(),
            self.contour_ids_right.clone(),
        ) != default_contour_ids()
        {
            writeln!(
                out,
                "contour_landmarks_left: {}",
                join(&mut self.contour_ids_left.iter().map(|v| v.to_string()))
            )
            .unwrap();
            writeln!(
                out,
                "contour_landmarks_right: {}",
                join(&mut self.contour_ids_right.iter().map(|v| v.to_string()))
            )
            .unwrap();
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read_text(path.as_ref())?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}
