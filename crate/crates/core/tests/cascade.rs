//! End-to-end properties of the constrained cascade.

mod common;

use common::*;
use proptest::prelude::*;
use pxsub::cascade::*;
use pxsub::degrade::{decimate, degrade, DegradeSpec, ScaleFactor};
use pxsub::formation::{constraint_residual, pixel_substitute, LrComparison};
use pxsub::metrics::psnr;
use pxsub::neural::{read_weights, write_weights, AdamConfig};
use pxsub::refine::{refine_ibp, RefinerSpec};

fn scale(s: usize) -> ScaleFactor {
    ScaleFactor::new(s).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn substitution_reproduces_the_observation_bit_exactly(
        s in 2usize..=4, lw in 2usize..8, lh in 2usize..8, ks in prop::sample::select(vec![3usize, 5, 7]), seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let k = random_kernel(ks, &mut r);
        let hr = random_image(lw * s, lh * s, 3, &mut r);
        let lr = random_image(lw, lh, 3, &mut r);
        prop_assume!(ks <= 2 * (lw * s).min(lh * s) + 1);
        let blurred = pxsub::degrade::convolve(&hr, &k).unwrap();
        let (sub, rec) = pixel_substitute(&blurred, &lr, scale(s)).unwrap();
        prop_assert_eq!(decimate(&sub, scale(s)).unwrap(), lr);
        prop_assert_eq!(rec.substituted_count, lw * lh * 3);
    }
}

#[test]
fn every_refiner_kind_meets_the_constraint_at_every_stage() {
    let spec = DegradeSpec::gaussian(scale(2)).with_noise(0.02);
    let hr = synthetic_scene(16, 1);
    let lr = degrade(&hr, &spec, 5).unwrap();
    let samples = vec![Sample { lr: lr.clone(), hr }];
    let train = TrainConfig { features: 4, blocks: 1, epochs: 2, patch: 8, ..TrainConfig::default() };
    let nets = train_cascade(&samples, &CascadeConfig::uniform(spec.clone(), RefinerSpec::toynet(None), 2), &train).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut stages = vec![];
    for (i, net) in nets.nets.iter().enumerate() {
        let path = dir.path().join(format!("stage{}.pxw", i + 1));
        write_weights(net, &path).unwrap();
        stages.push(RefinerSpec::toynet(Some(path)));
    }
    stages.extend([RefinerSpec::ibp(4, 1.0), RefinerSpec::gradprior(4, 0.01, 1e-3), RefinerSpec::bicubic()]);
    let cfg = CascadeConfig::new(spec, stages);
    let (out, trace) = run_cascade(&lr, &cfg).unwrap();
    assert_eq!(trace.len(), 5);
    for st in &trace.stages {
        assert_eq!(decimate(&st.substituted, cfg.scale()).unwrap(), lr, "stage {}", st.stage);
        assert_eq!(st.substituted_residual.mse, 0.0);
    }
    assert_eq!(out, trace.stages[4].estimate);
}

#[test]
fn weights_on_disk_reproduce_in_memory_results() {
    let spec = DegradeSpec::gaussian(scale(2));
    let samples: Vec<Sample> = (0..2)
        .map(|i| {
            let hr = synthetic_scene(16, 10 + i);
            Sample { lr: degrade(&hr, &spec, 0).unwrap(), hr }
        })
        .collect();
    let cfg = CascadeConfig::uniform(spec.clone(), RefinerSpec::toynet(None), 2);
    let train = TrainConfig { features: 4, blocks: 1, epochs: 3, patch: 6, seed: 3, ..TrainConfig::default() };
    let out = train_cascade(&samples, &cfg, &train).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..2).map(|i| dir.path().join(format!("s{i}.pxw"))).collect();
    for (net, p) in out.nets.iter().zip(&paths) {
        write_weights(net, p).unwrap();
        assert_eq!(&read_weights(p).unwrap(), net);
    }
    let from_disk = CascadeConfig::new(spec, paths.into_iter().map(|p| RefinerSpec::toynet(Some(p))).collect());
    let (a, _) = run_cascade(&samples[0].lr, &from_disk).unwrap();
    let (b, _) = run_with(&samples[0].lr, &cfg, &out.refiners()).unwrap();
    assert_eq!(a, b);

    // Stage files are not interchangeable.
    let swapped = CascadeConfig::new(
        from_disk.degrade.clone(),
        vec![from_disk.stages[1].clone(), from_disk.stages[0].clone()],
    );
    assert!(run_cascade(&samples[0].lr, &swapped).is_err());
}

#[test]
fn ibp_residual_is_monotone_at_unit_step() {
    let spec = DegradeSpec::gaussian(scale(2));
    let mut r = rng(77);
    for _ in 0..5 {
        let hr = random_image(32, 32, 1, &mut r);
        let lr = degrade(&hr, &spec, 0).unwrap();
        let init = pxsub::refine::refine_bicubic(&lr, scale(2), true);
        let out = refine_ibp(&lr, &init, &spec, 20, 1.0).unwrap();
        assert!(!out.guard_tripped);
        assert!(out.history.windows(2).all(|p| p[1] <= p[0]));
    }
}

#[test]
fn soft_constraint_leaves_a_regenerated_residual() {
    let spec = DegradeSpec::gaussian(scale(2));
    let samples: Vec<Sample> = (0..3)
        .map(|i| {
            let hr = synthetic_scene(16, 20 + i);
            Sample { lr: degrade(&hr, &spec, 0).unwrap(), hr }
        })
        .collect();
    let cfg = CascadeConfig::uniform(spec.clone(), RefinerSpec::toynet(None), 1);
    let train = TrainConfig {
        features: 4,
        blocks: 1,
        epochs: 20,
        patch: 8,
        adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
        seed: 1,
    };
    let soft = train_soft_constraint(&samples, &cfg, DEFAULT_SOFT_LAMBDA, &train).unwrap();
    let (_, trace) = run_with(&samples[0].lr, &cfg, &soft.refiners()).unwrap();
    let st = &trace.stages[0];
    let regenerated = constraint_residual(&st.estimate, &samples[0].lr, &spec, LrComparison::Float).unwrap();
    assert!(regenerated.mse > 0.0);
    assert_eq!(st.substituted_residual.mse, 0.0);
    assert!(soft.summaries[0].final_loss < soft.summaries[0].initial_loss);
}

#[test]
fn ibp_cascade_improves_over_its_first_stage() {
    let spec = DegradeSpec::gaussian(scale(2));
    let hr = synthetic_scene(32, 5);
    let lr = degrade(&hr, &spec, 0).unwrap();
    let (out, trace) = run_cascade(&lr, &CascadeConfig::uniform(spec, RefinerSpec::ibp(10, 1.0), 3)).unwrap();
    assert!(psnr(&out, &hr).unwrap() >= psnr(&trace.stages[0].estimate, &hr).unwrap());
}
