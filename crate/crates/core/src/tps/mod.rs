//! Thin-plate-spline height surfaces over a fixed in-plane control lattice.
//!
//! The control points never move, so the TPS system matrix
//!
//! ```text
//! L = | K   P |      K_ij = U(|p_i - p_j|),  P_i = (1, x_i, z_i)
//!     | P^T 0 |
//! ```
//!
//! depends only on the lattice. Its pseudo-inverse is computed once when a
//! [`ControlGrid`] is built; afterwards the spline coefficients for any height
//! vector are a single matrix-vector product, which is linear (and therefore
//! trivially differentiable) in the heights.
//!
//! In-plane coordinates are mapped to `[-1, 1]^2` before the kernel is
//! evaluated. Heights stay in millimetres. The affine coefficients of a
//! [`TpsSurface`] refer to the normalized coordinates; see
//! [`TpsSurface::affine_mm`] for the millimetre form.

mod io;

pub use io::{write_obj, SurfaceDoc};

use std::cell::Cell;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SV_CUTOFF: f64 = 1e-10;

thread_local! {
    static FACTORIZATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of matrix factorizations performed on the current thread.
///
/// Only [`ControlGrid`] construction factorizes; coefficient solves,
/// evaluation and Jacobians never do.
pub fn factorization_count() -> u64 {
    FACTORIZATIONS.with(Cell::get)
}

/// TPS radial kernel `U(r) = r^2 ln(r^2)`, with `U(0) = 0`.
pub fn kernel_u(r: f64) -> f64 {
    kernel_u_sq(r * r)
}

#[inline]
pub(crate) fn kernel_u_sq(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Axis-aligned in-plane rectangle, millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Extent {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Result<Self> {
        let extent = Self { min, max };
        extent.validate()?;
        Ok(extent)
    }

    fn validate(&self) -> Result<()> {
        if !self.min.iter().chain(&self.max).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("extent".into()));
        }
        if self.max[0] <= self.min[0] || self.max[1] <= self.min[1] {
            return Err(Error::Grid(format!(
                "degenerate extent {:?}..{:?}",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn half_size(&self) -> [f64; 2] {
        [
            0.5 * (self.max[0] - self.min[0]),
            0.5 * (self.max[1] - self.min[1]),
        ]
    }

    /// Maps a millimetre point to normalized coordinates (the extent becomes `[-1, 1]^2`).
    #[inline]
    pub fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.center();
        let h = self.half_size();
        [(p[0] - c[0]) / h[0], (p[1] - c[1]) / h[1]]
    }

    #[inline]
    pub fn denormalize(&self, q: [f64; 2]) -> [f64; 2] {
        let c = self.center();
        let h = self.half_size();
        [c[0] + q[0] * h[0], c[1] + q[1] * h[1]]
    }
}

/// Builds `L = [[K + λI, P], [Pᵀ, 0]]` for the given (normalized) points.
pub fn build_system_matrix(points: &[[f64; 2]], smoothing: f64) -> Result<DMatrix<f64>> {
    let n = points.len();
    for (i, a) in points.iter().enumerate() {
        for (j, b) in points.iter().enumerate().skip(i + 1) {
            if a == b {
                return Err(Error::DuplicatePoints(i, j));
            }
        }
    }
    let mut l = DMatrix::zeros(n + 3, n + 3);
    for i in 0..n {
        for j in 0..i {
            let u = kernel_u_sq(dist_sq(points[i], points[j]));
            l[(i, j)] = u;
            l[(j, i)] = u;
        }
        l[(i, i)] = smoothing;
        let row = [1.0, points[i][0], points[i][1]];
        for (k, v) in row.into_iter().enumerate() {
            l[(i, n + k)] = v;
            l[(n + k, i)] = v;
        }
    }
    Ok(l)
}

#[inline]
fn dist_sq(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dz = a[1] - b[1];
    dx * dx + dz * dz
}

/// Symmetric pseudo-inverse. For symmetric `L` the singular values are the
/// absolute eigenvalues, so a truncated eigen-expansion is its SVD pseudo-inverse.
fn symmetric_pinv(l: DMatrix<f64>, sv_cutoff: f64) -> Result<(DMatrix<f64>, usize)> {
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));
    let eig = l
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| Error::Grid("eigendecomposition did not converge".into()))?;
    let largest = eig.eigenvalues.amax();
    if largest == 0.0 || !largest.is_finite() {
        return Err(Error::Grid("system matrix is zero or non-finite".into()));
    }
    let threshold = sv_cutoff * largest;
    let mut rank = 0;
    let inv: DVector<f64> = eig.eigenvalues.map(|s| {
        if s.abs() > threshold {
            rank += 1;
            1.0 / s
        } else {
            0.0
        }
    });
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= inv[j];
    }
    Ok((scaled * v.transpose(), rank))
}

/// Fixed lattice of control points with the precomputed system pseudo-inverse.
#[derive(Debug, Clone)]
pub struct ControlGrid {
    nx: usize,
    nz: usize,
    extent: Extent,
    sv_cutoff: f64,
    smoothing: f64,
    /// Lattice points in mm, row-major with `x` fastest.
    points: Vec<[f64; 2]>,
    normalized: Vec<[f64; 2]>,
    /// Full `(N+3) x (N+3)` pseudo-inverse.
    pinv: DMatrix<f64>,
    /// Height columns of `pinv`, `(N+3) x N`; coefficients = `pinv_heights * h`.
    pinv_heights: DMatrix<f64>,
    rank: usize,
}

impl ControlGrid {
    /// Builds the lattice and factorizes the system once (`O(N^3)`).
    pub fn new(nx: usize, nz: usize, extent: Extent, sv_cutoff: f64) -> Result<Self> {
        Self::with_smoothing(nx, nz, extent, sv_cutoff, 0.0)
    }

    /// Like [`ControlGrid::new`] with `λ` added to the kernel diagonal.
    pub fn with_smoothing(
        nx: usize,
        nz: usize,
        extent: Extent,
        sv_cutoff: f64,
        smoothing: f64,
    ) -> Result<Self> {
        extent.validate()?;
        if nx < 2 || nz < 2 {
            return Err(Error::Grid(format!(
                "need at least 2 points per axis, got {nx}x{nz}"
            )));
        }
        if !(sv_cutoff > 0.0 && sv_cutoff < 1.0) {
            return Err(Error::Grid(format!("sv_cutoff {sv_cutoff} not in (0, 1)")));
        }
        if !(smoothing.is_finite() && smoothing >= 0.0) {
            return Err(Error::Grid(format!("smoothing {smoothing} must be >= 0")));
        }
        let mut normalized = Vec::with_capacity(nx * nz);
        for iz in 0..nz {
            for ix in 0..nx {
                normalized.push([
                    -1.0 + 2.0 * ix as f64 / (nx - 1) as f64,
                    -1.0 + 2.0 * iz as f64 / (nz - 1) as f64,
                ]);
            }
        }
        let points = normalized.iter().map(|&q| extent.denormalize(q)).collect();
        let l = build_system_matrix(&normalized, smoothing)?;
        let (pinv, rank) = symmetric_pinv(l, sv_cutoff)?;
        let n = nx * nz;
        let pinv_heights = pinv.columns(0, n).into_owned();
        Ok(Self {
            nx,
            nz,
            extent,
            sv_cutoff,
            smoothing,
            points,
            normalized,
            pinv,
            pinv_heights,
            rank,
        })
    }

    /// Square lattice spanning `extent` with the default cutoff.
    pub fn square(side: usize, extent: Extent) -> Result<Self> {
        Self::new(side, side, extent, DEFAULT_SV_CUTOFF)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    /// Number of control points `N`.
    pub fn len(&self) -> usize {
        self.nx * self.nz
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn extent(&self) -> &Extent {
        &self.extent
    }

    pub fn sv_cutoff(&self) -> f64 {
        self.sv_cutoff
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn normalized_points(&self) -> &[[f64; 2]] {
        &self.normalized
    }

    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    /// Numerical rank retained by the pseudo-inverse.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// System matrix of this lattice (rebuilt on demand; not cached).
    pub fn system_matrix(&self) -> DMatrix<f64> {
        build_system_matrix(&self.normalized, self.smoothing)
            .expect("lattice points are distinct by construction")
    }

    /// Writes the `N+3` basis values `[U(|q-p_1|) .. U(|q-p_N|), 1, x, z]`
    /// for a query given in millimetres.
    pub fn basis_row(&self, query_mm: [f64; 2], out: &mut [f64]) {
        let n = self.len();
        debug_assert_eq!(out.len(), n + 3);
        let q = self.extent.normalize(query_mm);
        for (o, p) in out.iter_mut().zip(&self.normalized) {
            *o = kernel_u_sq(dist_sq(q, *p));
        }
        out[n] = 1.0;
        out[n + 1] = q[0];
        out[n + 2] = q[1];
    }

    fn check_heights(&self, heights: &[f64]) -> Result<()> {
        if heights.len() != self.len() {
            return Err(Error::Length {
                expected: self.len(),
                got: heights.len(),
            });
        }
        if let Some(i) = heights.iter().position(|h| !h.is_finite()) {
            return Err(Error::NonFinite(format!("height {i}")));
        }
        Ok(())
    }

    /// Spline coefficients `pinv · [h; 0, 0, 0]`, as a flat `N+3` vector
    /// (kernel weights followed by the affine triple).
    pub fn coefficients(&self, heights: &[f64]) -> Result<Vec<f64>> {
        self.check_heights(heights)?;
        let h = DVector::from_column_slice(heights);
        Ok((&self.pinv_heights * h).as_slice().to_vec())
    }

    /// Pulls a gradient with respect to the `N+3` coefficients back to the heights.
    pub fn coefficient_adjoint(&self, coeff_grad: &[f64]) -> Vec<f64> {
        let g = DVector::from_column_slice(coeff_grad);
        self.pinv_heights.tr_mul(&g).as_slice().to_vec()
    }

    /// Exact `M x N` Jacobian `∂f(q_m)/∂h_n`.
    pub fn surface_jacobian(&self, queries_mm: &[[f64; 2]]) -> DMatrix<f64> {
        let sampler = SurfaceSampler::new(self, queries_mm);
        sampler.basis_matrix() * &self.pinv_heights
    }
}

/// Builds a grid (free-function form of [`ControlGrid::new`]).
pub fn make_control_grid(
    nx: usize,
    nz: usize,
    extent: Extent,
    sv_cutoff: f64,
) -> Result<ControlGrid> {
    ControlGrid::new(nx, nz, extent, sv_cutoff)
}

/// Per-instance TPS surface: control heights and the derived coefficients.
#[derive(Debug, Clone)]
pub struct TpsSurface {
    grid: Arc<ControlGrid>,
    heights: Vec<f64>,
    weights: Vec<f64>,
    affine: [f64; 3],
}

impl TpsSurface {
    /// Solves for the coefficients with one matrix-vector product.
    pub fn solve(grid: Arc<ControlGrid>, heights: Vec<f64>) -> Result<Self> {
        let mut coeffs = grid.coefficients(&heights)?;
        let n = grid.len();
        let affine = [coeffs[n], coeffs[n + 1], coeffs[n + 2]];
        coeffs.truncate(n);
        Ok(Self {
            grid,
            heights,
            weights: coeffs,
            affine,
        })
    }

    pub fn grid(&self) -> &Arc<ControlGrid> {
        &self.grid
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(constant, slope-x, slope-z)` over normalized coordinates.
    pub fn affine(&self) -> [f64; 3] {
        self.affine
    }

    /// Affine part re-expressed over millimetre coordinates.
    pub fn affine_mm(&self) -> [f64; 3] {
        let c = self.grid.extent.center();
        let h = self.grid.extent.half_size();
        let [a0, a1, a2] = self.affine;
        let sx = a1 / h[0];
        let sz = a2 / h[1];
        [a0 - sx * c[0] - sz * c[1], sx, sz]
    }

    /// All `N+3` coefficients, weights first.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut c = self.weights.clone();
        c.extend_from_slice(&self.affine);
        c
    }

    /// Surface height at an in-plane point in millimetres.
    pub fn eval(&self, query_mm: [f64; 2]) -> f64 {
        let q = self.grid.extent.normalize(query_mm);
        let mut f = self.affine[0] + self.affine[1] * q[0] + self.affine[2] * q[1];
        for (w, p) in self.weights.iter().zip(&self.grid.normalized) {
            f += w * kernel_u_sq(dist_sq(q, *p));
        }
        f
    }

    pub fn eval_many(&self, queries_mm: &[[f64; 2]]) -> Result<Vec<f64>> {
        if let Some(i) = queries_mm
            .iter()
            .position(|q| !(q[0].is_finite() && q[1].is_finite()))
        {
            return Err(Error::NonFinite(format!("query {i}")));
        }
        Ok(queries_mm.iter().map(|&q| self.eval(q)).collect())
    }

    /// `wᵀ K w` in normalized units; zero exactly for affine surfaces.
    pub fn bending_energy(&self) -> f64 {
        let pts = &self.grid.normalized;
        let mut e = 0.0;
        for (i, (wi, pi)) in self.weights.iter().zip(pts).enumerate() {
            let mut row = 0.0;
            for (wj, pj) in self.weights[..i].iter().zip(pts) {
                row += wj * kernel_u_sq(dist_sq(*pi, *pj));
            }
            e += 2.0 * wi * row;
        }
        e.max(0.0)
    }

    /// Gradient of [`TpsSurface::bending_energy`] with respect to the heights.
    pub fn bending_energy_grad(&self) -> Vec<f64> {
        let n = self.grid.len();
        let pts = &self.grid.normalized;
        let mut kw = vec![0.0; n + 3];
        for i in 0..n {
            let mut acc = 0.0;
            for (j, w) in self.weights.iter().enumerate() {
                acc += w * kernel_u_sq(dist_sq(pts[i], pts[j]));
            }
            kw[i] = 2.0 * acc;
        }
        self.grid.coefficient_adjoint(&kw)
    }
}

/// Dense basis matrix for a fixed set of query points; evaluating a surface
/// and pulling gradients back are plain matrix-vector products against it.
#[derive(Debug, Clone)]
pub struct SurfaceSampler {
    rows: usize,
    cols: usize,
    basis: Vec<f64>,
}

impl SurfaceSampler {
    pub fn new(grid: &ControlGrid, queries_mm: &[[f64; 2]]) -> Self {
        let cols = grid.len() + 3;
        let mut basis = vec![0.0; queries_mm.len() * cols];
        for (q, row) in queries_mm.iter().zip(basis.chunks_exact_mut(cols)) {
            grid.basis_row(*q, row);
        }
        Self {
            rows: queries_mm.len(),
            cols,
            basis,
        }
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    fn basis_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.basis)
    }

    /// Heights at every query for the given `N+3` coefficients.
    pub fn eval(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.cols);
        self.basis
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(coeffs).map(|(b, c)| b * c).sum())
            .collect()
    }

    /// `Bᵀ g`: gradient with respect to the coefficients given one per query.
    pub fn adjoint(&self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &g) in self.basis.chunks_exact(self.cols).zip(grad) {
            if g == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(row) {
                *o += g * b;
            }
        }
        out
    }
}
