mod common;

use common::{finite_difference_check, random_patches, tiny_spec};
use hyperdid::losses::LossConfig;
use hyperdid::network::{init_model, BackboneKind};

fn check(backbone: BackboneKind, cfg: LossConfig) {
    let spec = tiny_spec(backbone);
    let model = init_model(&spec).unwrap();
    let batch = random_patches(4, spec.patch_size, spec.bands, 3);
    let report = finite_difference_check(&model, &batch, &[1, 1, 2, 2], &[1, 2, 3, 1], &cfg, 1e-5, 1e-5);
    assert_eq!(report.checked, model.num_parameters());
    for t in 0..5 {
        assert!(report.worst[t] <= 1e-4, "{backbone:?} term {t}: {} at {}", report.worst[t], report.worst_at[t]);
    }
}

#[test]
fn compact3d_gradients() {
    check(BackboneKind::Compact3d, LossConfig::default());
}

#[test]
fn hybrid_gradients() {
    check(BackboneKind::Hybrid, LossConfig { margin: 0.1, alpha: 0.5, beta: 2.0, gamma: 0.3 });
}

#[test]
fn plain2d_gradients() {
    check(BackboneKind::Plain2d, LossConfig::default());
}
