//! Voxel geometry, binary masks and real-valued fields, and the operations
//! that turn a TPS surface into a soft partition of a mask.
//!
//! Voxel data is stored x-fastest: `index = x + nx * (y + ny * z)`.

mod io;
mod metrics;

pub use io::{read_field, read_mask, write_field, write_mask, write_pgm_slice, DType};
pub use metrics::{dice, hausdorff_mm, squared_distance_transform};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tps::{Extent, TpsSurface};

/// Volume axis. The in-plane axes of a height axis are the other two, ascending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn in_plane(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::InvalidArgument(format!("unknown axis {other:?}"))),
        }
    }
}

/// Shape, voxel size (mm) and world position of the centre of voxel `(0,0,0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub shape: [usize; 3],
    #[serde(rename = "spacing_mm")]
    pub spacing: [f64; 3],
    #[serde(rename = "origin_mm")]
    pub origin: [f64; 3],
}

impl GridMeta {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let meta = Self {
            shape,
            spacing,
            origin,
        };
        meta.validate()?;
        Ok(meta)
    }

    /// Cube of `n` voxels per side at `spacing` mm, origin at zero.
    pub fn cube(n: usize, spacing: f64) -> Result<Self> {
        Self::new([n; 3], [spacing; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!(
                "voxel counts must be >= 1, got {:?}",
                self.shape
            )));
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if !self.origin.iter().all(|o| o.is_finite()) {
            return Err(Error::NonFinite("origin".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, v: [usize; 3]) -> usize {
        v[0] + self.shape[0] * (v[1] + self.shape[1] * v[2])
    }

    #[inline]
    pub fn voxel(&self, index: usize) -> [usize; 3] {
        let x = index % self.shape[0];
        let rest = index / self.shape[0];
        [x, rest % self.shape[1], rest / self.shape[1]]
    }

    #[inline]
    pub fn world(&self, v: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + v[0] as f64 * self.spacing[0],
            self.origin[1] + v[1] as f64 * self.spacing[1],
            self.origin[2] + v[2] as f64 * self.spacing[2],
        ]
    }

    #[inline]
    pub fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + i as f64 * self.spacing[axis]
    }

    /// World centre of the volume.
    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (k, ck) in c.iter_mut().enumerate() {
            *ck = self.origin[k] + 0.5 * (self.shape[k] - 1) as f64 * self.spacing[k];
        }
        c
    }

    /// Rectangle spanned by the voxel centres in the plane orthogonal to `axis`.
    pub fn in_plane_extent(&self, axis: Axis) -> Result<Extent> {
        let (a, b) = axis.in_plane();
        let lo = [self.origin[a], self.origin[b]];
        let hi = [
            self.axis_coord(a, self.shape[a] - 1),
            self.axis_coord(b, self.shape[b] - 1),
        ];
        Extent::new(lo, hi)
    }

    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.shape.iter().any(|n| n % factor != 0) {
            return Err(Error::Shape(format!(
                "factor {factor} does not divide shape {:?}",
                self.shape
            )));
        }
        let f = factor as f64;
        let mut out = *self;
        for k in 0..3 {
            out.shape[k] = self.shape[k] / factor;
            out.spacing[k] = self.spacing[k] * f;
            // centre of the first block
            out.origin[k] = self.origin[k] + 0.5 * (f - 1.0) * self.spacing[k];
        }
        Ok(out)
    }

    pub(crate) fn ensure_same(&self, other: &GridMeta) -> Result<()> {
        if self != other {
            return Err(Error::MetaMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// Voxel columns parallel to a height axis.
///
/// Columns are numbered with the first in-plane axis fastest.
#[derive(Debug, Clone, Copy)]
pub struct Columns {
    pub axis: Axis,
    pub counts: [usize; 2],
    pub height_len: usize,
    strides: [usize; 3],
    plane_axes: (usize, usize),
}

impl Columns {
    pub fn new(meta: &GridMeta, axis: Axis) -> Self {
        let (a, b) = axis.in_plane();
        let h = axis.index();
        let strides = [1, meta.shape[0], meta.shape[0] * meta.shape[1]];
        Self {
            axis,
            counts: [meta.shape[a], meta.shape[b]],
            height_len: meta.shape[h],
            strides: [strides[a], strides[b], strides[h]],
            plane_axes: (a, b),
        }
    }

    pub fn len(&self) -> usize {
        self.counts[0] * self.counts[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat voxel index of position `k` along column `col`.
    #[inline]
    pub fn voxel(&self, col: usize, k: usize) -> usize {
        let ia = col % self.counts[0];
        let ib = col / self.counts[0];
        ia * self.strides[0] + ib * self.strides[1] + k * self.strides[2]
    }

    /// In-plane world coordinates (mm) of every column.
    pub fn points(&self, meta: &GridMeta) -> Vec<[f64; 2]> {
        let (a, b) = self.plane_axes;
        let mut out = Vec::with_capacity(self.len());
        for ib in 0..self.counts[1] {
            for ia in 0..self.counts[0] {
                out.push([meta.axis_coord(a, ia), meta.axis_coord(b, ib)]);
            }
        }
        out
    }
}

/// Binary occupancy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    meta: GridMeta,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(meta: GridMeta, data: Vec<bool>) -> Result<Self> {
        meta.validate()?;
        if data.len() != meta.len() {
            return Err(Error::Length {
                expected: meta.len(),
                got: data.len(),
            });
        }
        Ok(Self { meta, data })
    }

    pub fn empty(meta: GridMeta) -> Self {
        Self {
            data: vec![false; meta.len()],
            meta,
        }
    }

    pub fn from_fn(meta: GridMeta, mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        let data = (0..meta.len()).map(|i| f(meta.voxel(i))).collect();
        Self { meta, data }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, v: [usize; 3]) -> bool {
        self.data[self.meta.index(v)]
    }

    pub fn set(&mut self, v: [usize; 3], value: bool) {
        let i = self.meta.index(v);
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn to_field(&self) -> ScalarField {
        ScalarField {
            meta: self.meta,
            data: self
                .data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Inclusive index range of occupied voxels along `axis`.
    pub fn occupied_range(&self, axis: Axis) -> Option<(usize, usize)> {
        let k = axis.index();
        let mut range: Option<(usize, usize)> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let c = self.meta.voxel(i)[k];
            range = Some(match range {
                None => (c, c),
                Some((lo, hi)) => (lo.min(c), hi.max(c)),
            });
        }
        range
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip_with(other, |a, b| a && b)
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.meta.ensure_same(&other.meta)?;
        Ok(BinaryMask {
            meta: self.meta,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Real-valued voxel field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    meta: GridMeta,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(meta: GridMeta, data: Vec<f64>) -> Result<Self> {
        meta.validate()?;
        if data.len() != meta.len() {
            return Err(Error::Length {
                expected: meta.len(),
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field voxel {i}")));
        }
        Ok(Self { meta, data })
    }

    pub fn filled(meta: GridMeta, value: f64) -> Self {
        Self {
            data: vec![value; meta.len()],
            meta,
        }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, v: [usize; 3]) -> f64 {
        self.data[self.meta.index(v)]
    }

    /// Voxel-wise `1 - self`.
    pub fn complement(&self) -> ScalarField {
        ScalarField {
            meta: self.meta,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }
}

/// Signed axial distance `d(v) = coord_axis(v) - f(in-plane(v))`, mm.
pub fn signed_axial_distance_field(
    surface: &TpsSurface,
    meta: &GridMeta,
    height_axis: Axis,
) -> ScalarField {
    let columns = Columns::new(meta, height_axis);
    let heights: Vec<f64> = columns
        .points(meta)
        .into_iter()
        .map(|q| surface.eval(q))
        .collect();
    distance_from_column_heights(meta, &columns, &heights)
}

pub(crate) fn distance_from_column_heights(
    meta: &GridMeta,
    columns: &Columns,
    heights: &[f64],
) -> ScalarField {
    let h = columns.axis.index();
    let mut data = vec![0.0; meta.len()];
    for (col, &f) in heights.iter().enumerate() {
        for k in 0..columns.height_len {
            data[columns.voxel(col, k)] = meta.axis_coord(h, k) - f;
        }
    }
    ScalarField { meta: *meta, data }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probabilistic mask `σ(s · d / tau)` with `s = -1` when `flip`.
pub fn soft_mask(distance: &ScalarField, tau: f64, flip: bool) -> Result<ScalarField> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must be > 0, got {tau}"
        )));
    }
    let s = if flip { -1.0 } else { 1.0 };
    Ok(ScalarField {
        meta: distance.meta,
        data: distance.data.iter().map(|d| sigmoid(s * d / tau)).collect(),
    })
}

/// `vertebra(v) · m(v)`.
pub fn apply_mask(vertebra: &BinaryMask, mask: &ScalarField) -> Result<ScalarField> {
    vertebra.meta.ensure_same(&mask.meta)?;
    Ok(ScalarField {
        meta: mask.meta,
        data: vertebra
            .data
            .iter()
            .zip(&mask.data)
            .map(|(&v, &m)| if v { m } else { 0.0 })
            .collect(),
    })
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Voxels strictly above `level`.
pub fn threshold(soft: &ScalarField, level: f64) -> BinaryMask {
    BinaryMask {
        meta: soft.meta,
        data: soft.data.iter().map(|&v| v > level).collect(),
    }
}

/// Mean pooling over `factor^3` blocks.
pub fn downsample(field: &ScalarField, factor: usize) -> Result<ScalarField> {
    let meta = field.meta.downsampled(factor)?;
    if factor == 1 {
        return Ok(field.clone());
    }
    let [cx, cy, _] = meta.shape;
    let mut sum = vec![0.0; meta.len()];
    let [fx, fy, _] = field.meta.shape;
    for (i, v) in field.data.iter().enumerate() {
        let x = i % fx;
        let y = (i / fx) % fy;
        let z = i / (fx * fy);
        sum[x / factor + cx * (y / factor + cy * (z / factor))] += v;
    }
    let scale = 1.0 / (factor * factor * factor) as f64;
    sum.iter_mut().for_each(|v| *v *= scale);
    Ok(ScalarField { meta, data: sum })
}

/// Adjoint of [`downsample`]: spreads each coarse gradient uniformly over its block.
pub fn downsample_adjoint(fine: &GridMeta, grad: &[f64], factor: usize) -> Result<Vec<f64>> {
    let coarse = fine.downsampled(factor)?;
    if grad.len() != coarse.len() {
        return Err(Error::Length {
            expected: coarse.len(),
            got: grad.len(),
        });
    }
    let scale = 1.0 / (factor * factor * factor) as f64;
    let [fx, fy, _] = fine.shape;
    let [cx, cy, _] = coarse.shape;
    Ok((0..fine.len())
        .map(|i| {
            let x = i % fx;
            let y = (i / fx) % fy;
            let z = i / (fx * fy);
            grad[x / factor + cx * (y / factor + cy * (z / factor))] * scale
        })
        .collect())
}
