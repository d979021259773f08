use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ControlGrid, Extent, TpsSurface, DEFAULT_SV_CUTOFF};
use crate::error::{Error, Result};
use crate::voxel::Axis;

/// On-disk form of a surface: `{nx, nz, extent_mm, heights_mm[]}`.
///
/// `height_axis` is optional and defaults to `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDoc {
    pub nx: usize,
    pub nz: usize,
    pub extent_mm: Extent,
    pub heights_mm: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_axis: Option<Axis>,
}

impl SurfaceDoc {
    pub fn from_surface(surface: &TpsSurface, height_axis: Axis) -> Self {
        let grid = surface.grid();
        Self {
            nx: grid.nx(),
            nz: grid.nz(),
            extent_mm: *grid.extent(),
            heights_mm: surface.heights().to_vec(),
            height_axis: Some(height_axis),
        }
    }

    /// Rebuilds the grid (one factorization) and solves for the surface.
    pub fn to_surface(&self) -> Result<TpsSurface> {
        let grid = ControlGrid::new(self.nx, self.nz, self.extent_mm, DEFAULT_SV_CUTOFF)?;
        self.to_surface_on(Arc::new(grid))
    }

    /// Solves on an existing grid, which must match the document's lattice.
    pub fn to_surface_on(&self, grid: Arc<ControlGrid>) -> Result<TpsSurface> {
        if grid.nx() != self.nx || grid.nz() != self.nz || *grid.extent() != self.extent_mm {
            return Err(Error::Format("surface document does not match grid".into()));
        }
        TpsSurface::solve(grid, self.heights_mm.clone())
    }

    pub fn axis(&self) -> Axis {
        self.height_axis.unwrap_or(Axis::Y)
    }
}

/// Writes the surface as a triangulated ASCII OBJ mesh sampled on a regular
/// `(res+1) x (res+1)` lattice spanning the grid extent.
pub fn write_obj<W: Write>(
    surface: &TpsSurface,
    resolution: usize,
    height_axis: Axis,
    mut out: W,
) -> Result<()> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("OBJ resolution must be >= 1".into()));
    }
    let extent = surface.grid().extent();
    let (ia, ib) = height_axis.in_plane();
    let h = height_axis.index();
    writeln!(
        out,
        "# thin-plate-spline surface, {}x{} control points",
        surface.grid().nx(),
        surface.grid().nz()
    )?;
    for j in 0..=resolution {
        let b = extent.min[1] + (extent.max[1] - extent.min[1]) * j as f64 / resolution as f64;
        for i in 0..=resolution {
            let a = extent.min[0] + (extent.max[0] - extent.min[0]) * i as f64 / resolution as f64;
            let mut v = [0.0; 3];
            v[ia] = a;
            v[ib] = b;
            v[h] = surface.eval([a, b]);
            writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
        }
    }
    let stride = resolution + 1;
    for j in 0..resolution {
        for i in 0..resolution {
            // OBJ indices are 1-based
            let v00 = j * stride + i + 1;
            let v10 = v00 + 1;
            let v01 = v00 + stride;
            let v11 = v01 + 1;
            writeln!(out, "f {v00} {v10} {v11}")?;
            writeln!(out, "f {v00} {v11} {v01}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(height: f64) -> TpsSurface {
        let extent = Extent::new([0.0, 0.0], [63.0, 63.0]).unwrap();
        let grid = Arc::new(ControlGrid::square(4, extent).unwrap());
        TpsSurface::solve(grid, vec![height; 16]).unwrap()
    }

    #[test]
    fn obj_of_flat_surface() {
        let s = flat(12.5);
        let mut buf = Vec::new();
        write_obj(&s, 8, Axis::Y, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let verts: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| l.starts_with("v "))
            .map(|l| l[2..].split(' ').map(|t| t.parse().unwrap()).collect())
            .collect();
        assert_eq!(verts.len(), 81);
        assert!(verts.iter().all(|v| (v[1] - 12.5).abs() < 1e-8));
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 128);
    }

    #[test]
    fn doc_round_trip() {
        let s = flat(3.0);
        let doc = SurfaceDoc::from_surface(&s, Axis::Y);
        let text = serde_json::to_string(&doc).unwrap();
        let back: SurfaceDoc = serde_json::from_str(&text).unwrap();
        assert_eq!(back, doc);
        let s2 = back.to_surface().unwrap();
        assert_eq!(s2.heights(), s.heights());
    }

    #[test]
    fn doc_without_axis_defaults_to_y() {
        let text =
            r#"{"nx":2,"nz":2,"extent_mm":{"min":[0,0],"max":[1,1]},"heights_mm":[1,1,1,1]}"#;
        let doc: SurfaceDoc = serde_json::from_str(text).unwrap();
        assert_eq!(doc.axis(), Axis::Y);
        assert!((doc.to_surface().unwrap().eval([0.3, 0.3]) - 1.0).abs() < 1e-10);
    }
}
