//! Run-directory layout for partition results.
//!
//! ```text
//! <dir>/report.json, report.csv
//! <dir>/instances/<index>/surface.json, surface.obj, body.json, posterior.json, loss.csv
//! ```
//! Masks use the sidecar format of [`crate::voxel::write_mask`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{MetricsReport, PartitionResult};
use crate::error::Result;
use crate::tps::{write_obj, SurfaceDoc};
use crate::util::write_atomic;
use crate::voxel::write_mask;

/// OBJ lattice resolution used for exported surfaces.
pub const OBJ_RESOLUTION: usize = 32;

pub fn instance_dir(dir: &Path, index: usize) -> PathBuf {
    dir.join("instances").join(format!("{index:03}"))
}

/// Writes the artifacts of one result and returns the paths written.
pub fn write_partition(dir: &Path, result: &PartitionResult) -> Result<Vec<PathBuf>> {
    let doc = SurfaceDoc::from_surface(&result.surface, result.height_axis);
    let mut obj = Vec::new();
    write_obj(
        &result.surface,
        OBJ_RESOLUTION,
        result.height_axis,
        &mut obj,
    )?;
    let mut trace = String::from("iteration,loss\n");
    for (it, loss) in &result.loss_trace {
        writeln!(trace, "{it},{loss:e}").expect("string write");
    }

    let paths: Vec<PathBuf> = [
        "surface.json",
        "surface.obj",
        "loss.csv",
        "body.json",
        "posterior.json",
    ]
    .iter()
    .map(|n| dir.join(n))
    .collect();
    write_atomic(&paths[0], serde_json::to_string_pretty(&doc)?.as_bytes())?;
    write_atomic(&paths[1], &obj)?;
    write_atomic(&paths[2], trace.as_bytes())?;
    write_mask(&result.body_hard, &paths[3])?;
    write_mask(&result.posterior_hard, &paths[4])?;
    Ok(paths)
}

pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<Vec<PathBuf>> {
    let json = dir.join("report.json");
    let csv = dir.join("report.csv");
    write_atomic(&json, report.to_json()?.as_bytes())?;
    write_atomic(&csv, report.to_csv()?.as_bytes())?;
    Ok(vec![json, csv])
}

/// Writes the report and every instance under `dir`.
pub fn write_run(
    dir: &Path,
    results: &[PartitionResult],
    report: &MetricsReport,
) -> Result<Vec<PathBuf>> {
    let mut written = write_report(dir, report)?;
    for (i, r) in results.iter().enumerate() {
        written.extend(write_partition(&instance_dir(dir, i), r)?);
    }
    Ok(written)
}
