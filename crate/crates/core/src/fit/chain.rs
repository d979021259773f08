use std::sync::Arc;

use super::FitConfig;
use crate::error::{Error, Result};
use crate::neural::{ShapeModel, Tensor};
use crate::tps::{ControlGrid, SurfaceSampler, TpsSurface};
use crate::voxel::{sigmoid, Axis, BinaryMask, Columns, GridMeta, ScalarField};

/// Loss, height gradient and the per-voxel sensitivity `∂loss/∂d`.
#[derive(Debug, Clone)]
pub struct ChainGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Gradient with respect to the signed distance of every voxel; exactly
    /// zero wherever the vertebra mask is empty.
    pub distance_grad: ScalarField,
}

/// Precomputed geometry of one vertebra against one control grid.
///
/// Only voxels inside the vertebra enter the soft body mask, so only the
/// columns that contain bone are sampled.
#[derive(Debug, Clone)]
pub struct ChainContext {
    grid: Arc<ControlGrid>,
    meta: GridMeta,
    axis: Axis,
    sign: f64,
    tau: f64,
    bending_weight: f64,
    sampler: SurfaceSampler,
    /// Voxel range of each sampled column, `col_start[c]..col_start[c + 1]`.
    col_start: Vec<usize>,
    voxels: Vec<usize>,
    coords: Vec<f64>,
}

/// Soft body mask values at the occupied voxels for one set of heights.
struct Forward {
    m: Vec<f64>,
}

impl ChainContext {
    pub fn new(vertebra: &BinaryMask, grid: Arc<ControlGrid>, cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        let meta = *vertebra.meta();
        let axis = cfg.height_axis;
        let columns = Columns::new(&meta, axis);
        let all_points = columns.points(&meta);
        let h = axis.index();
        let mut points = Vec::new();
        let mut col_start = vec![0];
        let mut voxels = Vec::new();
        let mut coords = Vec::new();
        for (col, p) in all_points.iter().enumerate() {
            let before = voxels.len();
            for k in 0..columns.height_len {
                let v = columns.voxel(col, k);
                if vertebra.data()[v] {
                    voxels.push(v);
                    coords.push(meta.axis_coord(h, k));
                }
            }
            if voxels.len() > before {
                points.push(*p);
                col_start.push(voxels.len());
            }
        }
        let sampler = SurfaceSampler::new(&grid, &points);
        Ok(Self {
            grid,
            meta,
            axis,
            sign: cfg.body_sign(),
            tau: cfg.tau_mm,
            bending_weight: cfg.bending_weight,
            sampler,
            col_start,
            voxels,
            coords,
        })
    }

    pub fn grid(&self) -> &Arc<ControlGrid> {
        &self.grid
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn height_axis(&self) -> Axis {
        self.axis
    }

    /// Number of vertebra voxels.
    pub fn occupied(&self) -> usize {
        self.voxels.len()
    }

    fn forward(&self, heights: &[f64]) -> Result<Forward> {
        let coeffs = self.grid.coefficients(heights)?;
        let col_heights = self.sampler.eval(&coeffs);
        let k = self.sign / self.tau;
        let mut m = Vec::with_capacity(self.voxels.len());
        for (c, f) in col_heights.iter().enumerate() {
            for &z in &self.coords[self.col_start[c]..self.col_start[c + 1]] {
                m.push(sigmoid(k * (z - f)));
            }
        }
        Ok(Forward { m })
    }

    /// Soft body mask over the whole volume.
    pub fn body_soft(&self, heights: &[f64]) -> Result<ScalarField> {
        let fwd = self.forward(heights)?;
        self.scatter(&fwd.m)
    }

    fn scatter(&self, values: &[f64]) -> Result<ScalarField> {
        let mut data = vec![0.0; self.meta.len()];
        for (&v, &x) in self.voxels.iter().zip(values) {
            data[v] = x;
        }
        ScalarField::new(self.meta, data)
    }

    /// Pulls `∂loss/∂m` at the occupied voxels back to the heights.
    fn pullback(&self, fwd: &Forward, grad_m: &[f64]) -> Result<(Vec<f64>, ScalarField)> {
        let k = self.sign / self.tau;
        let grad_d: Vec<f64> = fwd
            .m
            .iter()
            .zip(grad_m)
            .map(|(m, g)| g * m * (1.0 - m) * k)
            .collect();
        let mut grad_col = vec![0.0; self.col_start.len() - 1];
        for (c, gc) in grad_col.iter_mut().enumerate() {
            // d = coordinate - surface height
            *gc = -grad_d[self.col_start[c]..self.col_start[c + 1]]
                .iter()
                .sum::<f64>();
        }
        let grad_coeffs = self.sampler.adjoint(&grad_col);
        let grad_h = self.grid.coefficient_adjoint(&grad_coeffs);
        Ok((grad_h, self.scatter(&grad_d)?))
    }

    fn add_bending(&self, heights: &[f64], out: &mut ChainGrad) -> Result<()> {
        if self.bending_weight == 0.0 {
            return Ok(());
        }
        let surface = TpsSurface::solve(self.grid.clone(), heights.to_vec())?;
        out.loss += self.bending_weight * surface.bending_energy();
        for (g, b) in out.grad.iter_mut().zip(surface.bending_energy_grad()) {
            *g += self.bending_weight * b;
        }
        Ok(())
    }

    /// Pooling factor between this volume and the shape model's input.
    fn pool_factor(&self, cae: &ShapeModel) -> Result<usize> {
        let [d, h, w] = cae.volume_shape();
        let [nx, ny, nz] = self.meta.shape;
        let f = nx / w.max(1);
        if f == 0 || [w * f, h * f, d * f] != [nx, ny, nz] {
            return Err(Error::Shape(format!(
                "volume {:?} is not an integer multiple of the shape model input {:?}",
                self.meta.shape,
                [w, h, d]
            )));
        }
        Ok(f)
    }

    /// Reconstruction loss of the pooled soft body mask under `cae`.
    pub fn cae_loss_and_grad(&self, heights: &[f64], cae: &ShapeModel) -> Result<ChainGrad> {
        if !cae.is_frozen() {
            return Err(Error::InvalidArgument(
                "the shape model must be frozen before it is used as a loss".into(),
            ));
        }
        let f = self.pool_factor(cae)?;
        let fwd = self.forward(heights)?;
        let [nx, ny, _] = self.meta.shape;
        let (cx, cy) = (nx / f, ny / f);
        let coarse_of = |v: usize| {
            let x = v % nx;
            let y = (v / nx) % ny;
            let z = v / (nx * ny);
            x / f + cx * (y / f + cy * (z / f))
        };
        let [d, h, w] = cae.volume_shape();
        let scale = 1.0 / (f * f * f) as f64;
        let mut pooled = vec![0.0; d * h * w];
        for (&v, m) in self.voxels.iter().zip(&fwd.m) {
            pooled[coarse_of(v)] += m * scale;
        }
        let x = Tensor::new(vec![1, d, h, w], pooled)?;
        let (loss, gx) = cae.reconstruction_loss(&x)?;
        let grad_m: Vec<f64> = self
            .voxels
            .iter()
            .map(|&v| gx.data()[coarse_of(v)] * scale)
            .collect();
        let (grad, distance_grad) = self.pullback(&fwd, &grad_m)?;
        let mut out = ChainGrad {
            loss,
            grad,
            distance_grad,
        };
        self.add_bending(heights, &mut out)?;
        Ok(out)
    }

    /// Mean squared error between the soft body mask and `body_ref` over the
    /// whole volume.
    pub fn supervised_loss_and_grad(
        &self,
        heights: &[f64],
        body_ref: &BinaryMask,
    ) -> Result<ChainGrad> {
        self.meta.ensure_same(body_ref.meta())?;
        let fwd = self.forward(heights)?;
        let n = self.meta.len() as f64;
        let r = body_ref.data();
        // reference voxels outside the vertebra cost 1 each, whatever the surface
        let mut unreachable = body_ref.count();
        let mut sum = 0.0;
        let mut grad_m = Vec::with_capacity(fwd.m.len());
        for (&v, m) in self.voxels.iter().zip(&fwd.m) {
            let target = if r[v] {
                unreachable -= 1;
                1.0
            } else {
                0.0
            };
            let e = m - target;
            sum += e * e;
            grad_m.push(2.0 * e / n);
        }
        let loss = (sum + unreachable as f64) / n;
        let (grad, distance_grad) = self.pullback(&fwd, &grad_m)?;
        let mut out = ChainGrad {
            loss,
            grad,
            distance_grad,
        };
        self.add_bending(heights, &mut out)?;
        Ok(out)
    }
}

/// Reconstruction loss of the soft body mask cut from `vertebra` by the
/// surface through `heights`, and its gradient with respect to the heights.
pub fn chain_loss_and_grad(
    vertebra: &BinaryMask,
    heights: &[f64],
    grid: &Arc<ControlGrid>,
    cae: &ShapeModel,
    cfg: &FitConfig,
) -> Result<(f64, Vec<f64>)> {
    let ctx = ChainContext::new(vertebra, grid.clone(), cfg)?;
    let out = ctx.cae_loss_and_grad(heights, cae)?;
    Ok((out.loss, out.grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::volume_control_grid;
    use crate::neural::{Layer, Network, NetworkSpec};
    use crate::voxel::{apply_mask, downsample, signed_axial_distance_field, soft_mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frozen_cae(side: usize, seed: u64) -> ShapeModel {
        let mut m = ShapeModel::new(ShapeModel::default_spec(side, 6, seed).unwrap()).unwrap();
        m.freeze();
        m
    }

    fn blob(meta: GridMeta, seed: u64) -> BinaryMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = meta.center();
        let r: [f64; 3] = [
            rng.random_range(3.0..6.0),
            rng.random_range(3.0..6.0),
            rng.random_range(3.0..6.0),
        ];
        BinaryMask::from_fn(meta, |v| {
            let w = meta.world(v);
            (0..3).map(|k| ((w[k] - c[k]) / r[k]).powi(2)).sum::<f64>() <= 1.0
        })
    }

    #[test]
    fn loss_matches_composition_of_public_operations() {
        let meta = GridMeta::cube(16, 1.0).unwrap();
        let vertebra = blob(meta, 1);
        let grid = Arc::new(volume_control_grid(&meta, Axis::Y, 4, 4).unwrap());
        let cae = frozen_cae(8, 2);
        let cfg = FitConfig {
            tau_mm: 1.5,
            ..FitConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heights: Vec<f64> = (0..16).map(|_| 7.5 + rng.random_range(-2.0..2.0)).collect();
        let (loss, _) = chain_loss_and_grad(&vertebra, &heights, &grid, &cae, &cfg).unwrap();

        let surface = TpsSurface::solve(grid.clone(), heights).unwrap();
        let d = signed_axial_distance_field(&surface, &meta, Axis::Y);
        let body = apply_mask(&vertebra, &soft_mask(&d, 1.5, true).unwrap()).unwrap();
        let x = Tensor::from_field(&downsample(&body, 2).unwrap());
        let (expected, _) = cae.reconstruction_loss(&x).unwrap();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn empty_vertebra_gives_zero_gradient() {
        let meta = GridMeta::cube(16, 1.0).unwrap();
        let grid = Arc::new(volume_control_grid(&meta, Axis::Y, 4, 4).unwrap());
        let cae = frozen_cae(8, 0);
        let (_, g) = chain_loss_and_grad(
            &BinaryMask::empty(meta),
            &[7.0; 16],
            &grid,
            &cae,
            &FitConfig::default(),
        )
        .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unfrozen_model_and_mismatched_shapes_are_rejected() {
        let meta = GridMeta::cube(16, 1.0).unwrap();
        let grid = Arc::new(volume_control_grid(&meta, Axis::Y, 4, 4).unwrap());
        let vertebra = blob(meta, 0);
        let cfg = FitConfig::default();
        let open = ShapeModel::new(ShapeModel::default_spec(8, 6, 0).unwrap()).unwrap();
        assert!(chain_loss_and_grad(&vertebra, &[7.0; 16], &grid, &open, &cfg).is_err());
        let wrong = frozen_cae(12, 0);
        assert!(matches!(
            chain_loss_and_grad(&vertebra, &[7.0; 16], &grid, &wrong, &cfg),
            Err(Error::Shape(_))
        ));
        let cae = frozen_cae(8, 0);
        assert!(matches!(
            chain_loss_and_grad(&vertebra, &[7.0; 9], &grid, &cae, &cfg),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn supervised_loss_is_zero_gradient_at_saturation() {
        // a surface far above a blob leaves the whole blob on the body side
        let meta = GridMeta::cube(16, 1.0).unwrap();
        let vertebra = blob(meta, 4);
        let grid = Arc::new(volume_control_grid(&meta, Axis::Y, 4, 4).unwrap());
        let ctx = ChainContext::new(&vertebra, grid, &FitConfig::default()).unwrap();
        let out = ctx.supervised_loss_and_grad(&[1e3; 16], &vertebra).unwrap();
        assert!(out.loss < 1e-12);
        assert!(out.grad.iter().all(|g| g.abs() < 1e-12));
    }

    /// Fully convolutional model: translation equivariant away from the borders.
    fn conv_only_model() -> ShapeModel {
        let spec = NetworkSpec {
            input_shape: vec![1, 16, 16, 16],
            layers: vec![
                Layer::Conv3d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::Conv3d {
                    in_channels: 2,
                    out_channels: 1,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Sigmoid,
            ],
            seed: 9,
        };
        let mut m = ShapeModel::from_network(Network::new(spec).unwrap()).unwrap();
        m.freeze();
        m
    }

    #[test]
    fn axial_translation_leaves_loss_unchanged() {
        // far enough from the borders that zero padding never sees the object
        let meta = GridMeta::cube(32, 1.0).unwrap();
        let grid = Arc::new(volume_control_grid(&meta, Axis::Y, 4, 4).unwrap());
        let cae = conv_only_model();
        let cfg = FitConfig::default();
        let small = BinaryMask::from_fn(meta, |v| {
            (10..20).contains(&v[0]) && (8..16).contains(&v[1]) && (10..20).contains(&v[2])
        });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heights: Vec<f64> = (0..16)
            .map(|_| 12.0 + rng.random_range(-1.5..1.5))
            .collect();
        let (base, _) = chain_loss_and_grad(&small, &heights, &grid, &cae, &cfg).unwrap();
        for shift in [2usize, 4, 6] {
            let moved = BinaryMask::from_fn(meta, |v| {
                v[1] >= shift && small.get([v[0], v[1] - shift, v[2]])
            });
            let lifted: Vec<f64> = heights.iter().map(|h| h + shift as f64).collect();
            let (loss, _) = chain_loss_and_grad(&moved, &lifted, &grid, &cae, &cfg).unwrap();
            assert!(
                (loss - base).abs() < 1e-9,
                "shift {shift}: {loss} vs {base}"
            );
        }
    }
}
