use std::sync::Arc;

use proptest::prelude::*;
use tps_partition::fit::{
    chain_loss_and_grad, evaluate, partition_from_heights, volume_control_grid, FitConfig,
    MetricsReport,
};
use tps_partition::neural::ShapeModel;
use tps_partition::phantom::{generate_phantom, jittered_params, JitterRanges, PhantomParams};
use tps_partition::voxel::{
    downsample, downsample_adjoint, Axis, BinaryMask, GridMeta, ScalarField,
};

fn meta16() -> GridMeta {
    GridMeta::cube(16, 1.0).unwrap()
}

fn frozen_cae() -> ShapeModel {
    let mut cae = ShapeModel::new(ShapeModel::default_spec(8, 8, 21).unwrap()).unwrap();
    cae.freeze();
    cae
}

fn occupancy(bits: &[bool]) -> BinaryMask {
    // 4³ pattern tiled up to 16³
    BinaryMask::from_fn(meta16(), |v| {
        bits[v[0] / 4 + 4 * (v[1] / 4 + 4 * (v[2] / 4))]
    })
}

#[test]
fn chain_gradient_matches_finite_differences_on_a_toy_instance() {
    let vertebra = BinaryMask::from_fn(meta16(), |v| {
        let c = [7.0, 8.0, 7.5];
        let r2: f64 = (0..3).map(|k| (v[k] as f64 - c[k]).powi(2)).sum();
        r2 <= 36.0 && !(v[0] > 9 && v[2] < 5)
    });
    let grid = Arc::new(volume_control_grid(&meta16(), Axis::Y, 4, 4).unwrap());
    let heights: Vec<f64> = (0..16).map(|i| 7.0 + ((i * 7) % 5) as f64 * 0.4).collect();
    let cae = frozen_cae();
    let cfg = FitConfig::default();
    let (_, grad) = chain_loss_and_grad(&vertebra, &heights, &grid, &cae, &cfg).unwrap();
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let step = 1e-3;
    for i in 0..heights.len() {
        let mut hp = heights.clone();
        let mut hm = heights.clone();
        hp[i] += step;
        hm[i] -= step;
        let lp = chain_loss_and_grad(&vertebra, &hp, &grid, &cae, &cfg)
            .unwrap()
            .0;
        let lm = chain_loss_and_grad(&vertebra, &hm, &grid, &cae, &cfg)
            .unwrap()
            .0;
        let fd = (lp - lm) / (2.0 * step);
        assert!(
            (fd - grad[i]).abs() / scale < 1e-4,
            "{i}: {fd} vs {}",
            grad[i]
        );
    }
}

#[test]
fn perfect_predictions_score_perfectly() {
    let p = generate_phantom(&PhantomParams::default()).unwrap();
    let grid = Arc::new(volume_control_grid(p.vertebra.meta(), Axis::Y, 8, 8).unwrap());
    let mut r = partition_from_heights(
        &p.vertebra,
        &grid,
        vec![32.0; 64],
        &FitConfig::default(),
        Vec::new(),
    )
    .unwrap();
    r.body_hard = p.body.clone();
    let report = evaluate(&[r.clone(), r], &[p.clone(), p]).unwrap();
    assert_eq!(report.dice.mean, 1.0);
    assert_eq!(report.dice.std, 0.0);
    assert_eq!(report.hausdorff_mm.mean, 0.0);
    let back = MetricsReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn soft_partition_reproduces_the_vertebra(
        bits in prop::collection::vec(any::<bool>(), 64),
        heights in prop::collection::vec(-5.0f64..20.0, 16),
        tau in 0.2f64..4.0,
        flip in any::<bool>(),
    ) {
        let vertebra = occupancy(&bits);
        let grid = Arc::new(volume_control_grid(&meta16(), Axis::Y, 4, 4).unwrap());
        let cfg = FitConfig { tau_mm: tau, flip, ..FitConfig::default() };
        let r = partition_from_heights(&vertebra, &grid, heights, &cfg, Vec::new()).unwrap();
        prop_assert!(r.partition_error(&vertebra) < 1e-6);
        for (i, &v) in vertebra.data().iter().enumerate() {
            prop_assert_eq!(r.body_hard.data()[i], r.body_soft.data()[i] > cfg.threshold);
            prop_assert_eq!(r.posterior_hard.data()[i], r.posterior_soft.data()[i] > cfg.threshold);
            if !v {
                prop_assert_eq!(r.body_soft.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn mean_pooling_adjoint_satisfies_the_inner_product_identity(
        x in prop::collection::vec(-1.0f64..1.0, 512),
        y in prop::collection::vec(-1.0f64..1.0, 64),
    ) {
        let fine = GridMeta::cube(8, 1.5).unwrap();
        let down = downsample(&ScalarField::new(fine, x.clone()).unwrap(), 2).unwrap();
        let up = downsample_adjoint(&fine, &y, 2).unwrap();
        let lhs: f64 = down.data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&up).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn aggregates_are_arithmetic_means(dices in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let instances = dices
            .iter()
            .enumerate()
            .map(|(i, &d)| tps_partition::fit::InstanceMetrics {
                index: i,
                label: format!("case{i}"),
                dice: d,
                hausdorff_mm: 10.0 * d,
                rms_height_mm: None,
            })
            .collect();
        let r = MetricsReport::from_instances(instances).unwrap();
        let mean = dices.iter().sum::<f64>() / dices.len() as f64;
        prop_assert!((r.dice.mean - mean).abs() < 1e-12);
        prop_assert!((r.hausdorff_mm.mean - 10.0 * mean).abs() < 1e-11);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn jittered_phantoms_keep_their_partition_invariants(seed in any::<u64>(), index in 0usize..1000) {
        let base = PhantomParams { volume: GridMeta::cube(40, 1.5).unwrap(), ..PhantomParams::default() };
        let p = generate_phantom(&jittered_params(&base, &JitterRanges::default(), seed, index)).unwrap();
        prop_assert!(p.check_invariants().is_ok());
        prop_assert!(!p.body.is_empty() && !p.posterior.is_empty());
    }

    #[test]
    fn regions_without_bone_carry_no_gradient(bits in prop::collection::vec(any::<bool>(), 64)) {
        let vertebra = occupancy(&bits);
        let grid = Arc::new(volume_control_grid(&meta16(), Axis::Y, 4, 4).unwrap());
        let cfg = FitConfig::default();
        let ctx = tps_partition::fit::ChainContext::new(&vertebra, grid, &cfg).unwrap();
        let out = ctx.cae_loss_and_grad(&[7.5; 16], &frozen_cae()).unwrap();
        for (g, &v) in out.distance_grad.data().iter().zip(vertebra.data()) {
            if !v {
                prop_assert_eq!(*g, 0.0);
            }
        }
        if vertebra.is_empty() {
            prop_assert!(out.grad.iter().all(|g| *g == 0.0));
        }
    }
}
