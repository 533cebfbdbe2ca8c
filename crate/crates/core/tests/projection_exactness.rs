mod common;

use sp3_core::calibration::collect;
use sp3_core::model::{accuracy, forward, forward_projected, Arch, EvalPlan};
use sp3_core::projection::inject;

#[test]
fn pca_projection_preserves_logits() {
    for arch in [Arch::PostLn, Arch::PreRms] {
        let (model, train) = common::trained(arch);
        let held = common::task().generate(200, 99);
        let acc = accuracy(&model, EvalPlan::Plain, &held).unwrap();
        println!("{arch}: held-out accuracy {acc}");
        let feats = collect(&model, &train[..64], 64, 3).unwrap();
        let proj = inject(&model, &feats).unwrap();
        let s = common::seqs(&held[..64].to_vec());
        let a = forward(&model, &s).unwrap();
        let b = forward_projected(&model, &proj, None, &s).unwrap();
        let dev = b.max_rel_diff(&a);
        println!("{arch}: max relative deviation {dev:e}");
        assert!(dev < 1e-6);
        assert!(acc > 0.9);
    }
}
