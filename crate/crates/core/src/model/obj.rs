use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{MeshInstance, PcaShapeModel};
use crate::error::{Error, Result};

/// Writes a Wavefront OBJ with `v`, `vt` and `f v/vt` records.
pub fn write_obj(path: impl AsRef<Path>, mesh: &MeshInstance, model: &PcaShapeModel) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_obj_to(&mut out, mesh, model)?;
    out.flush()?;
    Ok(())
}

pub fn write_obj_to<W: Write>(
    out: &mut W,
    mesh: &MeshInstance,
    model: &PcaShapeModel,
) -> Result<()> {
    if mesh.num_vertices() != model.num_vertices() {
        return Err(Error::dims(
            "mesh vertices",
            model.num_vertices(),
            mesh.num_vertices(),
        ));
    }
    for i in 0..mesh.num_vertices() {
        let v = mesh.vertex(i);
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    // OBJ texture space has its origin at the bottom-left.
    for uv in model.uv_coords() {
        writeln!(out, "vt {} {}", uv[0], 1.0 - uv[1])?;
    }
    for t in model.triangles() {
        let (a, b, c) = (t[0] + 1, t[1] + 1, t[2] + 1);
        writeln!(out, "f {a}/{a} {b}/{b} {c}/{c}")?;
    }
    Ok(())
}
