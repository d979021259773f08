use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{FitConfig, PartitionResult};
use crate::error::{Error, Result};
use crate::phantom::Phantom;
use crate::voxel::{dice, hausdorff_mm, Axis, BinaryMask, Columns};

/// Metrics of one partitioned vertebra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub index: usize,
    pub label: String,
    pub dice: f64,
    pub hausdorff_mm: f64,
    /// RMS of surface minus true boundary over the columns the boundary cuts
    /// through bone.
    pub rms_height_mm: Option<f64>,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: Vec<InstanceMetrics>,
    pub dice: Summary,
    pub hausdorff_mm: Summary,
    pub rms_height_mm: Option<Summary>,
    /// Settings the results were produced with, when known.
    #[serde(default)]
    pub config: Option<FitConfig>,
}

impl MetricsReport {
    pub fn from_instances(instances: Vec<InstanceMetrics>) -> Result<Self> {
        let col =
            |f: fn(&InstanceMetrics) -> f64| -> Vec<f64> { instances.iter().map(f).collect() };
        let dice = Summary::of(&col(|m| m.dice))
            .ok_or_else(|| Error::EmptyDataset("report without instances".into()))?;
        let hausdorff = Summary::of(&col(|m| m.hausdorff_mm)).expect("non-empty");
        let rms: Option<Vec<f64>> = instances.iter().map(|m| m.rms_height_mm).collect();
        Ok(Self {
            dice,
            hausdorff_mm: hausdorff,
            rms_height_mm: rms.and_then(|r| Summary::of(&r)),
            instances,
            config: None,
        })
    }

    pub fn with_config(mut self, cfg: FitConfig) -> Self {
        self.config = Some(cfg);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per instance; aggregates are recomputed when reading back.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for m in &self.instances {
            w.serialize(m)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let instances = r
            .deserialize()
            .collect::<std::result::Result<Vec<InstanceMetrics>, _>>()?;
        Self::from_instances(instances)
    }
}

/// Columns where the vertebra has bone on both sides of the true boundary.
fn crossing_columns(vertebra: &BinaryMask, phantom: &Phantom) -> Vec<[f64; 2]> {
    let meta = vertebra.meta();
    let columns = Columns::new(meta, Axis::Y);
    let mut out = Vec::new();
    for (col, p) in columns.points(meta).into_iter().enumerate() {
        let cut = phantom.true_boundary.eval(p);
        let (mut below, mut above) = (false, false);
        for k in 0..columns.height_len {
            if vertebra.data()[columns.voxel(col, k)] {
                let y = meta.axis_coord(1, k);
                below |= y < cut;
                above |= y >= cut;
            }
        }
        if below && above {
            out.push(p);
        }
    }
    out
}

fn instance_metrics(index: usize, r: &PartitionResult, p: &Phantom) -> Result<InstanceMetrics> {
    let meta = p.body.meta();
    let d = dice(&r.body_hard, &p.body)?;
    let h = if r.body_hard.is_empty() {
        // nothing predicted: the farthest any two voxels can be
        let e = meta.shape.iter().zip(&meta.spacing);
        e.map(|(&n, s)| ((n - 1) as f64 * s).powi(2))
            .sum::<f64>()
            .sqrt()
    } else {
        hausdorff_mm(&r.body_hard, &p.body)?
    };
    // the phantom boundary is a height over the x-z plane
    let rms = if r.height_axis == Axis::Y {
        let cols = crossing_columns(&p.vertebra, p);
        (!cols.is_empty()).then(|| {
            let s: f64 = cols
                .iter()
                .map(|&q| (r.surface.eval(q) - p.true_boundary.eval(q)).powi(2))
                .sum();
            (s / cols.len() as f64).sqrt()
        })
    } else {
        None
    };
    Ok(InstanceMetrics {
        index,
        label: p.label.clone(),
        dice: d,
        hausdorff_mm: h,
        rms_height_mm: rms,
    })
}

/// Dice and Hausdorff of each predicted body against the phantom's body,
/// plus the RMS height error against the phantom's smooth boundary.
pub fn evaluate(results: &[PartitionResult], refs: &[Phantom]) -> Result<MetricsReport> {
    if results.len() != refs.len() {
        return Err(Error::Length {
            expected: refs.len(),
            got: results.len(),
        });
    }
    let instances = results
        .iter()
        .zip(refs)
        .enumerate()
        .map(|(i, (r, p))| instance_metrics(i, r, p))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_instances(instances)
}
