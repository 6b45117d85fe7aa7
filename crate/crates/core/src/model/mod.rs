//! Morphable shape model, expression blendshapes and shape instances.
//!
//! A shape is an interleaved `x, y, z` vector of length `3N`. The PCA model
//! stores an orthonormal basis together with per-component standard
//! deviations, so a coefficient of `1.0` moves the shape by one standard
//! deviation along that component.

mod io;
mod obj;

pub use io::{load_model, save_model, ModelFile, MODEL_FILE_VERSION};
pub use obj::{write_obj, write_obj_to};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|BᵀB - I|` entries when validating a basis.
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaShapeModel {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    stddevs: DVector<f64>,
    triangles: Vec<[usize; 3]>,
    uv_coords: Vec<[f64; 2]>,
}

impl PcaShapeModel {
    /// Builds a model, checking every structural invariant.
    pub fn new(
        mean: DVector<f64>,
        basis: DMatrix<f64>,
        stddevs: DVector<f64>,
        triangles: Vec<[usize; 3]>,
        uv_coords: Vec<[f64; 2]>,
    ) -> Result<Self> {
        if !mean.len().is_multiple_of(3) {
            return Err(Error::validation("mean", "length is not a multiple of 3"));
        }
        let n = mean.len() / 3;
        if basis.nrows() != 3 * n {
            return Err(Error::validation(
                "basis",
                format!("has {} rows, expected 3N = {}", basis.nrows(), 3 * n),
            ));
        }
        if stddevs.len() != basis.ncols() {
            return Err(Error::validation(
                "stddevs",
                format!(
                    "has {} entries, basis has {} columns",
                    stddevs.len(),
                    basis.ncols()
                ),
            ));
        }
        if let Some(i) = stddevs.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::validation(
                "stddevs",
                format!("entry {i} is not a positive finite number"),
            ));
        }
        if mean.iter().chain(basis.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("mean/basis", "non-finite entry"));
        }
        let gram = basis.transpose() * &basis;
        for j in 0..gram.ncols() {
            for i in 0..gram.nrows() {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - expected).abs() > ORTHONORMALITY_TOLERANCE {
                    return Err(Error::validation(
                        "basis",
                        format!(
                            "columns are not orthonormal: (BᵀB)[{i},{j}] = {}",
                            gram[(i, j)]
                        ),
                    ));
                }
            }
        }
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(Error::validation(
                    "triangles",
                    format!("triangle {t} references a vertex >= N = {n}"),
                ));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::validation(
                    "triangles",
                    format!("triangle {t} repeats a vertex index"),
                ));
            }
        }
        if uv_coords.len() != n {
            return Err(Error::validation(
                "uv",
                format!("has {} entries, expected N = {n}", uv_coords.len()),
            ));
        }
        if let Some(i) = uv_coords
            .iter()
            .position(|uv| !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]))
        {
            return Err(Error::validation(
                "uv",
                format!("coordinate {i} lies outside [0,1]²"),
            ));
        }
        Ok(Self {
            mean,
            basis,
            stddevs,
            triangles,
            uv_coords,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.mean.len() / 3
    }

    pub fn num_components(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn stddevs(&self) -> &DVector<f64> {
        &self.stddevs
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn uv_coords(&self) -> &[[f64; 2]] {
        &self.uv_coords
    }

    pub fn mean_mesh(&self) -> MeshInstance {
        MeshInstance {
            vertices: self.mean.as_slice().to_vec(),
        }
    }

    /// `mean + Σ αᵢ σᵢ vᵢ`.
    pub fn generate_shape(&self, alpha: &ShapeCoefficients) -> Result<MeshInstance> {
        let m = self.num_components();
        if alpha.alpha.len() != m {
            return Err(Error::dims("alpha", m, alpha.alpha.len()));
        }
        let scaled = DVector::from_iterator(
            m,
            alpha
                .alpha
                .iter()
                .zip(self.stddevs.iter())
                .map(|(a, s)| a * s),
        );
        let shape = &self.mean + &self.basis * scaled;
        Ok(MeshInstance {
            vertices: shape.as_slice().to_vec(),
        })
    }

    /// Identity shape plus the blendshape displacement `Σ ψⱼ Bⱼ`.
    pub fn generate_shape_with_expression(
        &self,
        blendshapes: &BlendshapeSet,
        alpha: &ShapeCoefficients,
        psi: &ExpressionCoefficients,
    ) -> Result<MeshInstance> {
        self.check_blendshapes(blendshapes)?;
        let mut mesh = self.generate_shape(alpha)?;
        let offset = blendshapes.displacement(psi)?;
        for (v, d) in mesh.vertices.iter_mut().zip(offset.iter()) {
            *v += d;
        }
        Ok(mesh)
    }

    pub(crate) fn check_blendshapes(&self, blendshapes: &BlendshapeSet) -> Result<()> {
        if blendshapes.displacements.nrows() != 3 * self.num_vertices() {
            return Err(Error::dims(
                "blendshape rows",
                3 * self.num_vertices(),
                blendshapes.displacements.nrows(),
            ));
        }
        Ok(())
    }

    /// Rows of the σ-scaled basis for the given vertices, in homogeneous
    /// layout: three coordinate rows per vertex followed by a zero row.
    ///
    /// Returns the `4K × M` matrix and the matching homogeneous mean, whose
    /// every fourth entry is `1`.
    pub fn landmark_basis_submatrix(
        &self,
        vertex_ids: &[usize],
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let n = self.num_vertices();
        let m = self.num_components();
        let mut basis_h = DMatrix::zeros(4 * vertex_ids.len(), m);
        let mut mean_h = DVector::zeros(4 * vertex_ids.len());
        for (k, &v) in vertex_ids.iter().enumerate() {
            if v >= n {
                return Err(Error::InvalidArgument(format!(
                    "vertex id {v} out of range (N = {n})"
                )));
            }
            for r in 0..3 {
                for j in 0..m {
                    basis_h[(4 * k + r, j)] = self.basis[(3 * v + r, j)] * self.stddevs[j];
                }
                mean_h[4 * k + r] = self.mean[3 * v + r];
            }
            mean_h[4 * k + 3] = 1.0;
        }
        Ok((basis_h, mean_h))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeSet {
    displacements: DMatrix<f64>,
}

impl BlendshapeSet {
    /// `displacements` is `3N × L`, one blendshape per column.
    pub fn new(displacements: DMatrix<f64>) -> Result<Self> {
        if !displacements.nrows().is_multiple_of(3) {
            return Err(Error::validation(
                "blendshapes",
                "row count is not a multiple of 3",
            ));
        }
        if displacements.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("blendshapes", "non-finite entry"));
        }
        Ok(Self { displacements })
    }

    pub fn empty(num_vertices: usize) -> Self {
        Self {
            displacements: DMatrix::zeros(3 * num_vertices, 0),
        }
    }

    pub fn len(&self) -> usize {
        self.displacements.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn displacements(&self) -> &DMatrix<f64> {
        &self.displacements
    }

    /// `Σ ψⱼ Bⱼ` as a `3N` vector.
    pub fn displacement(&self, psi: &ExpressionCoefficients) -> Result<DVector<f64>> {
        if psi.psi.len() != self.len() {
            return Err(Error::dims("psi", self.len(), psi.psi.len()));
        }
        Ok(&self.displacements * DVector::from_column_slice(&psi.psi))
    }

    /// Homogeneous `4K × L` sub-matrix for the given vertices (no σ scaling).
    pub fn landmark_submatrix(&self, vertex_ids: &[usize]) -> Result<DMatrix<f64>> {
        let n = self.displacements.nrows() / 3;
        let mut sub = DMatrix::zeros(4 * vertex_ids.len(), self.len());
        for (k, &v) in vertex_ids.iter().enumerate() {
            if v >= n {
                return Err(Error::InvalidArgument(format!(
                    "vertex id {v} out of range (N = {n})"
                )));
            }
            for r in 0..3 {
                for j in 0..self.len() {
                    sub[(4 * k + r, j)] = self.displacements[(3 * v + r, j)];
                }
            }
        }
        Ok(sub)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCoefficients {
    pub alpha: Vec<f64>,
}

impl ShapeCoefficients {
    pub fn new(alpha: Vec<f64>) -> Self {
        Self { alpha }
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            alpha: vec![0.0; m],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionCoefficients {
    pub psi: Vec<f64>,
}

impl ExpressionCoefficients {
    pub fn new(psi: Vec<f64>) -> Self {
        Self { psi }
    }

    pub fn zeros(l: usize) -> Self {
        Self { psi: vec![0.0; l] }
    }
}

/// A concrete shape; topology and UVs live on the [`PcaShapeModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct MeshInstance {
    pub vertices: Vec<f64>,
}

impl MeshInstance {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len() / 3
    }

    #[inline]
    pub fn vertex(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.vertices[3 * i],
            self.vertices[3 * i + 1],
            self.vertices[3 * i + 2],
        )
    }

    /// Length of the axis-aligned bounding-box diagonal.
    pub fn bounding_box_diagonal(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for i in 0..self.num_vertices() {
            let v = self.vertex(i);
            lo = lo.inf(&v);
            hi = hi.sup(&v);
        }
        if self.num_vertices() == 0 {
            return 0.0;
        }
        (hi - lo).norm()
    }
}
