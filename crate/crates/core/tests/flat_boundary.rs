//! Direct fitting with the default shape model at the default 64³ scale:
//! a flat true boundary is found again from a start 5 mm too high.

use tps_partition::fit::{
    fit_heights_direct, pretrain_cae_soft, volume_control_grid_for, CaeTrainConfig, FitConfig,
    HeightInit,
};
use tps_partition::neural::ShapeModel;
use tps_partition::phantom::{phantom_batch, phantom_batch_with, JitterRanges, PhantomParams};
use tps_partition::voxel::{Axis, ScalarField};

#[test]
fn flat_boundary_is_recovered_from_an_offset_start() {
    let tau = FitConfig::default().tau_mm;
    let train = phantom_batch(100, &PhantomParams::default(), 1000).unwrap();
    let bodies: Vec<ScalarField> = train.iter().map(|p| p.soft_body(tau).unwrap()).collect();
    let spec = ShapeModel::default_spec(32, 64, 11).unwrap();
    let cfg = CaeTrainConfig {
        seed: 1000,
        ..CaeTrainConfig::default()
    };
    let cae = pretrain_cae_soft(&bodies, spec, &cfg).unwrap();
    let checksum = cae.checksum();

    let base = PhantomParams {
        boundary_curve_amplitude_mm: 0.0,
        boundary_tilt: [0.0, 0.0],
        ..PhantomParams::default()
    };
    let jitter = JitterRanges {
        tilt: 0.0,
        curve_mm: 0.0,
        ..JitterRanges::default()
    };
    for (i, p) in phantom_batch_with(5, &base, &jitter, 77)
        .unwrap()
        .iter()
        .enumerate()
    {
        assert!(p.true_boundary.is_flat());
        let meta = *p.vertebra.meta();
        let grid = volume_control_grid_for(&meta, Axis::Y, 64).unwrap();
        let truth = p.true_boundary.base_mm;
        let cfg = FitConfig {
            init: HeightInit::Constant { mm: truth + 5.0 },
            ..FitConfig::default()
        };
        let r = fit_heights_direct(&p.vertebra, &grid, &cae, &cfg).unwrap();

        // mean height over the columns where the boundary cuts through bone
        let mut sum = 0.0;
        let mut n = 0;
        for x in 0..meta.shape[0] {
            for z in 0..meta.shape[2] {
                let column = (0..meta.shape[1]).filter(|&y| p.vertebra.get([x, y, z]));
                let ys: Vec<f64> = column.map(|y| meta.axis_coord(1, y)).collect();
                if ys.iter().any(|&y| y < truth) && ys.iter().any(|&y| y >= truth) {
                    sum += r
                        .surface
                        .eval([meta.axis_coord(0, x), meta.axis_coord(2, z)]);
                    n += 1;
                }
            }
        }
        let mean = sum / n as f64;
        assert!(
            (mean - truth).abs() < 2.0,
            "phantom {i}: mean height {mean} vs {truth}"
        );

        assert!(r.partition_error(&p.vertebra) < 1e-6);
        let mut running = f64::INFINITY;
        for &(_, l) in &r.loss_trace {
            running = running.min(l);
        }
        assert_eq!(r.final_loss(), Some(running));
        assert_eq!(r.loss_trace.len(), cfg.iterations + 1);
    }
    assert_eq!(
        cae.checksum(),
        checksum,
        "fitting must not touch the shape model"
    );
}
