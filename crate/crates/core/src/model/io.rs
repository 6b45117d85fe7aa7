use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BlendshapeSet, PcaShapeModel};
use crate::error::{Error, Result};

pub const MODEL_FILE_VERSION: u32 = 1;

/// On-disk layout of a model. Matrices are stored row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub struct ModelFile {
    pub version: u32,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub mean: Vec<f64>,
    pub stddevs: Vec<f64>,
    pub basis: Vec<f64>,
    pub triangles: Vec<[usize; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub blendshapes: Vec<f64>,
}

impl ModelFile {
    pub fn from_model(model: &PcaShapeModel, blendshapes: &BlendshapeSet) -> Self {
        Self {
            version: MODEL_FILE_VERSION,
            n: model.num_vertices(),
            m: model.num_components(),
            l: blendshapes.len(),
            mean: model.mean().as_slice().to_vec(),
            stddevs: model.stddevs().as_slice().to_vec(),
            basis: row_major(model.basis()),
            triangles: model.triangles().to_vec(),
            uv: model.uv_coords().to_vec(),
            blendshapes: row_major(blendshapes.displacements()),
        }
    }

    pub fn into_model(self) -> Result<(PcaShapeModel, BlendshapeSet)> {
        let rows = 3 * self.n;
        check_len("mean", rows, self.mean.len())?;
        check_len("stddevs", self.m, self.stddevs.len())?;
        check_len("basis", rows * self.m, self.basis.len())?;
        check_len("uv", self.n, self.uv.len())?;
        check_len("blendshapes", rows * self.l, self.blendshapes.len())?;
        let basis = DMatrix::from_row_slice(rows, self.m, &self.basis);
        let model = PcaShapeModel::new(
            DVector::from_vec(self.mean),
            basis,
            DVector::from_vec(self.stddevs),
            self.triangles,
            self.uv,
        )?;
        let blendshapes =
            BlendshapeSet::new(DMatrix::from_row_slice(rows, self.l, &self.blendshapes))?;
        Ok((model, blendshapes))
    }
}

fn check_len(field: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::validation(
            field,
            format!("has {actual} values, header implies {expected}"),
        ));
    }
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn save_model(
    path: impl AsRef<Path>,
    model: &PcaShapeModel,
    blendshapes: &BlendshapeSet,
) -> Result<()> {
    model.check_blendshapes(blendshapes)?;
    let file = ModelFile::from_model(model, blendshapes);
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(PcaShapeModel, BlendshapeSet)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let context = path.display().to_string();
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::parse(&context, e.to_string()))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::parse(&context, "missing integer `version` field"))?;
    if version != u64::from(MODEL_FILE_VERSION) {
        return Err(Error::SchemaVersion {
            found: version.try_into().unwrap_or(u32::MAX),
            expected: MODEL_FILE_VERSION,
        });
    }
    let file: ModelFile =
        serde_json::from_value(value).map_err(|e| Error::parse(&context, e.to_string()))?;
    file.into_model()
}
