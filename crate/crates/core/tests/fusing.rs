mod common;

use sp3_core::calibration::collect;
use sp3_core::checkpoint::Checkpoint;
use sp3_core::fusing::{fuse, fused_forward, FusedModel, Link};
use sp3_core::model::{forward, forward_projected, Arch, ModelConfig, TransformerModel};
use sp3_core::projection::{group_pca, inject, ProjectionSet};
use sp3_core::pruning::{binarize, MaskSet, Topology};
use sp3_core::{Error, Rng};

fn random_model(arch: Arch, n_layers: usize, seed: u64) -> TransformerModel {
    let config = ModelConfig {
        n_layers,
        seed,
        ..ModelConfig::toy(arch)
    };
    TransformerModel::random(config).unwrap()
}

fn pca(model: &TransformerModel) -> ProjectionSet {
    let data = common::task().generate(64, 5);
    inject(model, &collect(model, &data, 64, 3).unwrap()).unwrap()
}

fn held_out() -> Vec<Vec<usize>> {
    common::seqs(&common::task().generate(24, 77))
}

fn bernoulli(config: &ModelConfig, rng: &mut Rng) -> MaskSet {
    let p = 0.05 + 0.9 * rng.uniform();
    MaskSet::random_uniform(config, rng).map(&mut |t| t.map(|u| if u < p { 1.0 } else { 0.0 }))
}

#[test]
fn identity_projections_with_full_masks_change_nothing() {
    for arch in [Arch::PostLn, Arch::PreRms] {
        let model = random_model(arch, 2, 3);
        let proj = ProjectionSet::identity(&model.config);
        let fused = fuse(&model, &proj, &MaskSet::ones(&model.config)).unwrap();
        let s = held_out();
        let dev = fused_forward(&fused, &s)
            .unwrap()
            .max_abs_diff(&forward(&model, &s).unwrap());
        assert!(dev < 1e-9, "{arch}: {dev:e}");
    }
}

#[test]
fn pca_with_full_masks_matches_the_original() {
    for arch in [Arch::PostLn, Arch::PreRms] {
        let model = random_model(arch, 2, 4);
        let fused = fuse(&model, &pca(&model), &MaskSet::ones(&model.config)).unwrap();
        let s = held_out();
        let dev = fused_forward(&fused, &s)
            .unwrap()
            .max_abs_diff(&forward(&model, &s).unwrap());
        assert!(dev < 1e-6, "{arch}: {dev:e}");
    }
}

#[test]
fn binarized_masks_fuse_exactly() {
    for arch in [Arch::PostLn, Arch::PreRms] {
        let model = random_model(arch, 2, 6);
        let proj = pca(&model);
        let topo = Topology::new(&model.config, &proj.groups);
        let s = held_out();
        for (k, t) in [0.25, 0.5, 0.75].into_iter().enumerate() {
            let soft = MaskSet::random_uniform(&model.config, &mut Rng::new(k as u64));
            let masks = binarize(&soft, t, &model.config, &topo).unwrap();
            let fused = fuse(&model, &proj, &masks).unwrap();
            let want = forward_projected(&model, &proj, Some(&masks), &s).unwrap();
            let dev = fused_forward(&fused, &s).unwrap().max_abs_diff(&want);
            assert!(dev < 1e-6, "{arch} at {t}: {dev:e}");
            let s_hat = 1.0 - fused.prunable_params() as f64 / topo.total(&model.config) as f64;
            assert!(s_hat >= t);
        }
    }
}

#[test]
fn fused_size_equals_the_sparsity_count() {
    let mut rng = Rng::new(21);
    for arch in [Arch::PostLn, Arch::PreRms] {
        let model = random_model(arch, 3, 8);
        let proj = match arch {
            Arch::PostLn => ProjectionSet::identity(&model.config),
            Arch::PreRms => {
                let data = common::task().generate(32, 5);
                group_pca(&model, &collect(&model, &data, 32, 3).unwrap(), 2).unwrap()
            }
        };
        let topo = Topology::new(&model.config, &proj.groups);
        let s = held_out();
        for n in 0..50 {
            let masks = bernoulli(&model.config, &mut rng);
            let fused = fuse(&model, &proj, &masks).unwrap();
            assert_eq!(fused.prunable_params() as f64, topo.retained(&masks), "{arch} set {n}");
            if n % 10 == 0 {
                let want = forward_projected(&model, &proj, Some(&masks), &s).unwrap();
                let dev = fused_forward(&fused, &s).unwrap().max_abs_diff(&want);
                assert!(dev < 1e-6, "{arch} set {n}: {dev:e}");
            }
        }
    }
}

#[test]
fn residual_matrices_appear_only_between_groups() {
    let model = random_model(Arch::PreRms, 4, 9);
    let data = common::task().generate(32, 5);
    let feats = collect(&model, &data, 32, 3).unwrap();
    let ones = MaskSet::ones(&model.config);
    let s = held_out();
    for (g, want) in [(1, 3), (2, 1), (4, 0)] {
        let proj = group_pca(&model, &feats, g).unwrap();
        let fused = fuse(&model, &proj, &ones).unwrap();
        assert_eq!(fused.n_residual_matrices(), want, "g={g}");
        let dev = fused_forward(&fused, &s)
            .unwrap()
            .max_abs_diff(&forward(&model, &s).unwrap());
        assert!(dev < 1e-6, "g={g}: {dev:e}");
    }
    let post = random_model(Arch::PostLn, 2, 9);
    let fused = fuse(
        &post,
        &ProjectionSet::identity(&post.config),
        &MaskSet::ones(&post.config),
    )
    .unwrap();
    assert_eq!(fused.n_residual_matrices(), 4);
    assert!(fused.layers.iter().all(|l| matches!(l.into_m, Link::Dense { .. })));
}

#[test]
fn continuous_masks_are_refused() {
    let model = random_model(Arch::PostLn, 2, 1);
    let proj = ProjectionSet::identity(&model.config);
    let r = fuse(&model, &proj, &MaskSet::filled(&model.config, 0.5));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn fused_checkpoint_round_trips() {
    for arch in [Arch::PostLn, Arch::PreRms] {
        let model = random_model(arch, 3, 2);
        let data = common::task().generate(32, 5);
        let feats = collect(&model, &data, 32, 3).unwrap();
        let proj = match arch {
            Arch::PostLn => inject(&model, &feats).unwrap(),
            Arch::PreRms => group_pca(&model, &feats, 2).unwrap(),
        };
        let masks = bernoulli(&model.config, &mut Rng::new(4));
        let fused = fuse(&model, &proj, &masks).unwrap();
        let bytes = fused.to_bytes();
        let back = FusedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, fused);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
