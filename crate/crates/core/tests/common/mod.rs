#![allow(dead_code)]

use hyperdid::datacube::Patch;
use hyperdid::losses::{self, LossConfig};
use hyperdid::network::{self, BackboneKind, ModelState, Mode, NetworkSpec, TermWeights};
use rand::Rng;

pub fn tiny_spec(backbone: BackboneKind) -> NetworkSpec {
    NetworkSpec {
        backbone,
        feature_dim: 8,
        projection_dims: vec![8, 64, 64],
        discriminator_dims: vec![8, 64, 2],
        num_classes: 3,
        patch_size: 3,
        bands: 6,
        init_seed: 7,
    }
}

pub fn random_patches(n: usize, size: usize, bands: usize, seed: u64) -> Vec<Patch> {
    let mut rng = hyperdid::rng::keyed(seed, 99);
    (0..n)
        .map(|_| Patch {
            size,
            bands,
            values: (0..size * size * bands).map(|_| rng.random::<f64>()).collect(),
        })
        .collect()
}

/// `[l0, le, lc, ld, total]` recomputed from a plain forward pass.
pub fn loss_terms(model: &ModelState, batch: &[Patch], pseudo: &[usize], labels: &[usize], cfg: &LossConfig) -> [f64; 5] {
    let out = network::forward(model, batch, Mode::Train).unwrap();
    let b = losses::total_loss(&out, pseudo, labels, cfg).unwrap();
    [b.l0, b.le, b.lc, b.ld, b.total]
}

pub struct FdReport {
    pub checked: usize,
    /// Worst relative error per term `[l0, le, lc, ld, total]`.
    pub worst: [f64; 5],
    pub worst_at: [String; 5],
}

/// Central differences over every parameter entry against the analytic
/// gradient of each loss term and of the weighted total.
pub fn finite_difference_check(
    model: &ModelState,
    batch: &[Patch],
    pseudo: &[usize],
    labels: &[usize],
    cfg: &LossConfig,
    step: f64,
    floor: f64,
) -> FdReport {
    let unit = |i: usize| {
        let mut w = [0.0; 4];
        w[i] = 1.0;
        TermWeights { l0: w[0], le: w[1], lc: w[2], ld: w[3] }
    };
    let mut analytic = Vec::new();
    for t in 0..4 {
        analytic.push(network::weighted_gradient(model, batch, pseudo, labels, cfg.margin, unit(t)).unwrap().2);
    }
    analytic.push(network::gradient(model, batch, pseudo, labels, cfg).unwrap().1);

    let mut report = FdReport { checked: 0, worst: [0.0; 5], worst_at: Default::default() };
    let mut probe = model.clone();
    for (p, param) in model.params.iter().enumerate() {
        for i in 0..param.data.len() {
            let orig = param.data[i];
            probe.params[p].data[i] = orig + step;
            let plus = loss_terms(&probe, batch, pseudo, labels, cfg);
            probe.params[p].data[i] = orig - step;
            let minus = loss_terms(&probe, batch, pseudo, labels, cfg);
            probe.params[p].data[i] = orig;
            for t in 0..5 {
                let fd = (plus[t] - minus[t]) / (2.0 * step);
                let an = analytic[t].arrays[p][i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
                if rel > report.worst[t] {
                    report.worst[t] = rel;
                    report.worst_at[t] = format!("{}[{i}] analytic {an} fd {fd}", param.name);
                }
            }
            report.checked += 1;
        }
    }
    report
}
