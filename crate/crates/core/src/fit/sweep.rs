//! Direct fitting over a phantom set at several control-grid layouts.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    evaluate, fit_heights_direct, grid_dims, volume_control_grid, FitConfig, MetricsReport,
    PartitionResult,
};
use crate::error::{Error, Result};
use crate::neural::ShapeModel;
use crate::phantom::Phantom;
use crate::tps::ControlGrid;
use crate::util::write_atomic;
use crate::voxel::GridMeta;

/// Results of every phantom at one grid layout.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub nx: usize,
    pub nz: usize,
    pub results: Vec<PartitionResult>,
    pub report: MetricsReport,
}

impl GridRun {
    pub fn control_points(&self) -> usize {
        self.nx * self.nz
    }

    pub fn dir_name(&self) -> String {
        format!("grid_{}x{}", self.nx, self.nz)
    }
}

/// Fits every phantom's vertebra on an `nx × nz` grid and evaluates the
/// predicted bodies against the phantoms' ground truth.
pub fn run_grid(
    phantoms: &[Phantom],
    cae: &ShapeModel,
    nx: usize,
    nz: usize,
    cfg: &FitConfig,
) -> Result<GridRun> {
    if phantoms.is_empty() {
        return Err(Error::EmptyDataset("no phantoms to fit".into()));
    }
    let mut cached: Option<(GridMeta, Arc<ControlGrid>)> = None;
    let mut results = Vec::with_capacity(phantoms.len());
    for p in phantoms {
        let meta = *p.vertebra.meta();
        let grid = match &cached {
            Some((m, g)) if *m == meta => g.clone(),
            _ => {
                let g = Arc::new(volume_control_grid(&meta, cfg.height_axis, nx, nz)?);
                cached = Some((meta, g.clone()));
                g
            }
        };
        results.push(fit_heights_direct(&p.vertebra, &grid, cae, cfg)?);
    }
    let report = evaluate(&results, phantoms)?.with_config(cfg.for_grid(nx, nz));
    Ok(GridRun {
        nx,
        nz,
        results,
        report,
    })
}

/// [`run_grid`] for each control-point count in `cfg.grid_sizes`.
pub fn run_sweep(phantoms: &[Phantom], cae: &ShapeModel, cfg: &FitConfig) -> Result<Vec<GridRun>> {
    cfg.validate()?;
    if cfg.grid_sizes.is_empty() {
        return Err(Error::InvalidArgument("no grid sizes to sweep".into()));
    }
    cfg.grid_sizes
        .iter()
        .map(|&n| {
            let (nx, nz) = grid_dims(n)?;
            run_grid(phantoms, cae, nx, nz, cfg)
        })
        .collect()
}

/// One line of the combined table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub control_points: usize,
    pub nx: usize,
    pub nz: usize,
    pub instances: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hausdorff_mean_mm: f64,
    pub hausdorff_std_mm: f64,
    pub rms_height_mean_mm: Option<f64>,
    pub rms_height_std_mm: Option<f64>,
}

impl SweepRow {
    pub fn from_report(nx: usize, nz: usize, report: &MetricsReport) -> Self {
        Self {
            control_points: nx * nz,
            nx,
            nz,
            instances: report.instances.len(),
            dice_mean: report.dice.mean,
            dice_std: report.dice.std,
            hausdorff_mean_mm: report.hausdorff_mm.mean,
            hausdorff_std_mm: report.hausdorff_mm.std,
            rms_height_mean_mm: report.rms_height_mm.map(|s| s.mean),
            rms_height_std_mm: report.rms_height_mm.map(|s| s.std),
        }
    }
}

/// Grid size against mean ± std of the metrics, one row per layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn from_runs(runs: &[GridRun]) -> Self {
        Self {
            rows: runs
                .iter()
                .map(|r| SweepRow::from_report(r.nx, r.nz, &r.report))
                .collect(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Writes `sweep.csv`, `sweep.json` and one run directory per layout.
pub fn write_sweep(dir: &Path, runs: &[GridRun]) -> Result<Vec<PathBuf>> {
    let table = SweepTable::from_runs(runs);
    let mut written = vec![dir.join("sweep.csv"), dir.join("sweep.json")];
    write_atomic(&written[0], table.to_csv()?.as_bytes())?;
    write_atomic(&written[1], table.to_json()?.as_bytes())?;
    for run in runs {
        written.extend(super::write_run(
            &dir.join(run.dir_name()),
            &run.results,
            &run.report,
        )?);
    }
    Ok(written)
}
