//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 6`.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hyperdid::datacube::{self, SampleSet};
use hyperdid::experiment::{self, AblationGrid, ExperimentConfig, PseudoConfig};
use hyperdid::losses::{self, LossConfig, LOG_EPS};
use hyperdid::metrics_eval::{self, ConfusionMatrix};
use hyperdid::network::{self, init_model, BackboneKind, ForwardOutputs, NetworkSpec};
use hyperdid::pseudo_env::{assign_pseudo_labels, fit_centers_best_of, squared_distance};
use hyperdid::synth::{self, SyntheticSceneSpec};
use hyperdid::tensor::Matrix;
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(stream: u64) -> rand_chacha::ChaCha8Rng {
    hyperdid::rng::keyed(20_240_101, stream)
}

// ---------------------------------------------------------------- 1 losses

fn naive_cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

fn naive_embedding(rows: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            let c = naive_cos(&rows[i], &rows[j]);
            total += if labels[i] == labels[j] { 1.0 - c } else { (c - margin).max(0.0) };
        }
    }
    total
}

fn naive_xent(rows: &[Vec<f64>], targets: &[usize]) -> f64 {
    rows.iter().zip(targets).map(|(r, &t)| -r[t].max(LOG_EPS).ln()).sum()
}

fn random_rows(r: &mut impl Rng, m: usize, p: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..p).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

fn random_probs(r: &mut impl Rng, m: usize, k: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.0f64).powi(3) + 1e-15).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn m(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows)
}

fn outputs(env: &[Vec<f64>], cat: &[Vec<f64>], cls: &[Vec<f64>], de: &[Vec<f64>], dc: &[Vec<f64>]) -> ForwardOutputs {
    ForwardOutputs {
        env_features: m(env),
        cat_features: m(cat),
        env_proj: m(env),
        cat_proj: m(cat),
        class_probs: m(cls),
        disc_probs_env: m(de),
        disc_probs_cat: m(dc),
    }
}

fn criterion_1() -> Outcome {
    use std::f64::consts::LN_2;
    let pair = |u: &[f64], v: &[f64], same, d| losses::cosine_pair_loss(u, v, same, d).unwrap();
    ensure!(pair(&[1.0, 0.0], &[1.0, 0.0], true, 0.0) == 0.0, "same identical pair");
    ensure!(pair(&[1.0, 0.0], &[1.0, 0.0], false, 0.0) == 1.0, "different identical pair");
    ensure!(pair(&[1.0, 0.0], &[0.0, 1.0], false, 0.0) == 0.0, "orthogonal pair");
    ensure!(pair(&[1.0, 0.0], &[-1.0, 0.0], true, 0.0) == 2.0, "opposite pair");

    let twin = vec![vec![0.37, -1.9, 0.05], vec![0.37, -1.9, 0.05]];
    ensure!(losses::embedding_loss(&m(&twin), &[1, 1], 0.0).unwrap() == 0.0, "identical rows, same label");
    ensure!(losses::embedding_loss(&m(&twin), &[1, 2], 0.0).unwrap() == 2.0, "identical rows, different labels");

    let perfect = losses::discrimination_loss(&m(&vec![vec![1.0, 0.0]; 2]), &m(&vec![vec![0.0, 1.0]; 2])).unwrap();
    ensure!(perfect == 0.0, "perfect discrimination gave {perfect}");
    let half = m(&vec![vec![0.5, 0.5]; 3]);
    let ld = losses::discrimination_loss(&half, &half).unwrap();
    ensure!(ld == 6.0 * LN_2, "uniform discrimination {ld} vs {}", 6.0 * LN_2);

    let onehot = m(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
    ensure!(losses::classification_loss(&onehot, &[2, 1]).unwrap() == 0.0, "one-hot classification");
    let uniform = losses::classification_loss(&m(&vec![vec![0.25; 4]; 2]), &[1, 3]).unwrap();
    ensure!(uniform == 2.0 * 4f64.ln(), "uniform classification {uniform} vs {}", 2.0 * 4f64.ln());

    let mut r = rng(1);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let mm = r.random_range(1..=8);
        let p = r.random_range(1..=16);
        let k = r.random_range(2..=6);
        let margin = if trial % 2 == 0 { 0.0 } else { r.random_range(-0.5..0.5) };
        let cfg = LossConfig {
            margin,
            alpha: r.random_range(0.0..2.0),
            beta: r.random_range(0.0..2.0),
            gamma: r.random_range(0.0..2.0),
        };
        let env = random_rows(&mut r, mm, p);
        let cat = random_rows(&mut r, mm, p);
        let cls = random_probs(&mut r, mm, k);
        let de = random_probs(&mut r, mm, 2);
        let dc = random_probs(&mut r, mm, 2);
        let pseudo: Vec<usize> = (0..mm).map(|_| r.random_range(1..=3)).collect();
        let labels: Vec<usize> = (0..mm).map(|_| r.random_range(1..=k)).collect();

        let le = naive_embedding(&env, &pseudo, margin);
        let lc = naive_embedding(&cat, &labels, margin);
        let ld = naive_xent(&de, &vec![0; mm]) + naive_xent(&dc, &vec![1; mm]);
        let l0 = naive_xent(&cls, &labels.iter().map(|y| y - 1).collect::<Vec<_>>());
        let total = l0 + cfg.alpha * le + cfg.beta * lc + cfg.gamma * ld;

        let got = losses::total_loss(&outputs(&env, &cat, &cls, &de, &dc), &pseudo, &labels, &cfg)
            .map_err(|e| format!("trial {trial}: {e}"))?;
        for (name, a, b) in [("L0", got.l0, l0), ("Le", got.le, le), ("Lc", got.lc, lc), ("Ld", got.ld, ld), ("total", got.total, total)] {
            let err = (a - b).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-10, "trial {trial}: {name} {a} vs oracle {b}");
        }
        let zeroed = LossConfig { alpha: 0.0, beta: 0.0, gamma: 0.0, ..cfg };
        let z = losses::total_loss(&outputs(&env, &cat, &cls, &de, &dc), &pseudo, &labels, &zeroed).unwrap();
        ensure!(z.total == z.l0, "alpha=beta=gamma=0 total {} != L0 {}", z.total, z.l0);
        let d = losses::total_loss(&outputs(&env, &cat, &cls, &de, &dc), &pseudo, &labels, &LossConfig::default()).unwrap();
        ensure!(d.total == d.l0 + d.le + d.lc + d.ld, "default weights do not sum the terms");
    }
    Ok(format!("trivial cases exact; 100 random batches, worst abs error {worst:.1e}"))
}

// ------------------------------------------------------------- 2 gradients

fn criterion_2() -> Outcome {
    let spec = NetworkSpec {
        backbone: BackboneKind::Compact3d,
        ..common::tiny_spec(BackboneKind::Compact3d)
    };
    let model = init_model(&spec).map_err(|e| e.to_string())?;
    let batch = common::random_patches(4, spec.patch_size, spec.bands, 11);
    let report = common::finite_difference_check(&model, &batch, &[1, 2, 1, 2], &[1, 2, 3, 2], &LossConfig::default(), 1e-5, 1e-5);
    ensure!(report.checked == model.num_parameters(), "checked {} of {} entries", report.checked, model.num_parameters());
    let names = ["L0", "Le", "Lc", "Ld", "L"];
    for t in 0..5 {
        ensure!(report.worst[t] <= 1e-4, "{} relative error {:.2e} at {}", names[t], report.worst[t], report.worst_at[t]);
    }
    let worst = report.worst.iter().copied().fold(0.0, f64::max);
    Ok(format!("{} parameters x 5 terms, worst relative error {worst:.1e}", report.checked))
}

// ------------------------------------------------------------ 3 clustering

fn sse(points: &[Vec<f64>], mask: u32) -> f64 {
    let mut total = 0.0;
    for side in [0, 1] {
        let members: Vec<&Vec<f64>> = points.iter().enumerate().filter(|(i, _)| (mask >> i) & 1 == side).map(|(_, p)| p).collect();
        if members.is_empty() {
            continue;
        }
        let dim = members[0].len();
        let mean: Vec<f64> = (0..dim).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
        total += members.iter().map(|p| squared_distance(p, &mean)).sum::<f64>();
    }
    total
}

fn criterion_3() -> Outcome {
    // Same clustering procedure the pipeline runs.
    let fit = |pts: &[Vec<f64>], lambda: usize, tol: f64, seed: u64| {
        let p = PseudoConfig::default();
        fit_centers_best_of(pts, lambda, p.max_iter, tol, seed, p.restarts).map_err(|e| e.to_string())
    };
    let mut r = rng(3);
    for trial in 0..100 {
        let n = r.random_range(5..60);
        let dim = r.random_range(1..8);
        let lambda = r.random_range(1..=5.min(n));
        let pts = random_rows(&mut r, n, dim);
        let model = fit(&pts, lambda, 0.0, trial)?;
        ensure!(
            model.objective_history.windows(2).all(|w| w[1] <= w[0]),
            "trial {trial}: objective rose: {:?}",
            model.objective_history
        );
    }

    let mut matched = 0;
    for trial in 0..100u64 {
        let pts = random_rows(&mut r, 6, 2);
        let optimum = (1u32..(1 << 6) - 1).map(|mask| sse(&pts, mask)).fold(f64::INFINITY, f64::min);
        let model = fit(&pts, 2, 0.0, trial)?;
        if model.objective <= optimum + 1e-12 {
            matched += 1;
        }
    }
    ensure!(matched >= 90, "matched the exhaustive optimum in {matched}/100 trials");

    let mut aris = Vec::new();
    for seed in 0..5 {
        let spec = SyntheticSceneSpec { seed, ..SyntheticSceneSpec::default() };
        let cube = synth::shading_only(&spec).map_err(|e| e.to_string())?;
        let zones = spec.zone_raster();
        let spectra: Vec<Vec<f64>> = (0..cube.rows * cube.cols)
            .map(|i| cube.spectrum(i / cube.cols, i % cube.cols).iter().map(|&v| v as f64).collect())
            .collect();
        let model = fit(&spectra, spec.num_zones, PseudoConfig::default().tol, seed)?;
        let labels = assign_pseudo_labels(&spectra, &model).map_err(|e| e.to_string())?.labels;
        let truth: Vec<usize> = zones.iter().map(|&z| z as usize).collect();
        aris.push(metrics_eval::adjusted_rand_index(&labels, &truth).map_err(|e| e.to_string())?);
    }
    let ari = experiment::median(&aris);
    ensure!(ari >= 0.99, "median ARI {ari} from {aris:?}");
    Ok(format!("monotone on 100 instances; optimum matched {matched}/100; shading recovery median ARI {ari:.4}"))
}

// ----------------------------------------------------- 4 end-to-end training

fn synthetic_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.split.train_per_class = 30;
    cfg.train.epochs = 100;
    cfg.train.checkpoint_every = 0;
    cfg
}

fn synthetic_cube() -> Result<datacube::HyperspectralCube, String> {
    let (cube, _) = synth::generate(&SyntheticSceneSpec::default()).map_err(|e| e.to_string())?;
    Ok(datacube::normalize_bands(&cube))
}

fn criterion_4() -> Outcome {
    let cube = synthetic_cube()?;
    let mut oas = Vec::new();
    for seed in 0..3 {
        let mut cfg = synthetic_config();
        experiment::offset_seeds(&mut cfg, seed);
        let out = experiment::run_pipeline(&cfg, &cube, None).map_err(|e| e.to_string())?;
        ensure!(out.train.epochs.len() == 100, "ran {} epochs", out.train.epochs.len());
        oas.push(out.metrics.oa);
    }
    let oa = experiment::median(&oas);
    ensure!(oa >= 0.95, "median test OA {oa:.4} from {oas:?}");
    Ok(format!("median test OA {oa:.4} over seeds 0..3 ({oas:.4?})"))
}

// -------------------------------------------------------------- 5 ablation

fn criterion_5() -> Outcome {
    let cube = synthetic_cube()?;
    let base = synthetic_config();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

    let grid = AblationGrid::from_toml("include_base = true\nrepeats = 3\n[grid]\nalpha = [0]\nbeta = [0]\ngamma = [0]\n")
        .map_err(|e| e.to_string())?;
    let rows = experiment::ablate(&base, &cube, &grid).map_err(|e| e.to_string())?;
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    ensure!(labels == ["base", "alpha=0", "beta=0", "gamma=0"], "rows {labels:?}");
    let weights: Vec<[f64; 3]> = rows.iter().map(|r| [r.config.loss.alpha, r.config.loss.beta, r.config.loss.gamma]).collect();
    ensure!(
        weights == [[1.0, 1.0, 1.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]],
        "weights {weights:?}"
    );
    ensure!(rows.iter().all(|r| r.metrics.len() == 3), "expected 3 runs per configuration");
    experiment::write_ablation(dir.path(), &rows).map_err(|e| e.to_string())?;
    let csv = fs::read_to_string(dir.path().join(experiment::ABLATION_CSV)).map_err(|e| e.to_string())?;
    ensure!(csv.lines().count() == 5, "csv has {} lines", csv.lines().count());

    let sweep = AblationGrid::from_toml("[grid]\nlambda = [1, 2, 3, 5, 9]\n").map_err(|e| e.to_string())?;
    let lrows = experiment::ablate(&base, &cube, &sweep).map_err(|e| e.to_string())?;
    let lambdas: Vec<usize> = lrows.iter().map(|r| r.lambda_fitted[0]).collect();
    ensure!(lambdas == [1, 2, 3, 5, 9], "fitted lambdas {lambdas:?}");
    ensure!(lrows.iter().all(|r| r.metrics.len() == 1), "one metrics row per lambda");
    let md = experiment::ablation_markdown(&lrows);
    ensure!(md.lines().count() == 7, "markdown table has {} lines", md.lines().count());

    let full = rows[0].median_oa();
    let best_ablated = rows[1..].iter().map(|r| r.median_oa()).fold(f64::MIN, f64::max);
    ensure!(full >= best_ablated - 0.02, "full OA {full:.4} < best ablated {best_ablated:.4} - 0.02");
    let sweep_oa: Vec<String> = lrows.iter().map(|r| format!("{:.3}", r.median_oa())).collect();
    Ok(format!(
        "4 + 5 rows emitted; full OA {full:.4} vs best ablated {best_ablated:.4}; lambda sweep OA [{}]",
        sweep_oa.join(", ")
    ))
}

// --------------------------------------------------------------- 6 metrics

fn criterion_6() -> Outcome {
    let report = |c: Vec<Vec<u64>>| metrics_eval::metrics_from_confusion(&ConfusionMatrix::from_counts(c).unwrap()).unwrap();
    let r = report(vec![vec![3, 1], vec![1, 3]]);
    ensure!((r.oa, r.aa, r.kappa) == (0.75, 0.75, 0.5), "[[3,1],[1,3]] gave {r:?}");
    let r = report(vec![vec![4, 0, 0], vec![0, 4, 0], vec![0, 0, 4]]);
    ensure!((r.oa, r.aa, r.kappa) == (1.0, 1.0, 1.0), "identity gave {r:?}");
    let r = report(vec![vec![5, 5], vec![5, 5]]);
    ensure!(r.kappa == 0.0, "uniform kappa {}", r.kappa);
    let r = report(vec![vec![6, 0], vec![6, 0]]);
    ensure!((r.oa, r.kappa) == (0.5, 0.0), "single-class predictor gave {r:?}");

    let spec = SyntheticSceneSpec::standard(12, 12, 8, 3, 2, synth::ZoneLayout::Blobs, 0.05, 9);
    let (cube, _) = synth::generate(&spec).map_err(|e| e.to_string())?;
    let cube = datacube::normalize_bands(&cube);
    let mut net = NetworkSpec::new(3, 8);
    net.init_seed = 5;
    let model = init_model(&net).map_err(|e| e.to_string())?;
    let all: Vec<(usize, usize)> = (0..cube.rows).flat_map(|r| (0..cube.cols).map(move |c| (r, c))).collect();
    let test = SampleSet {
        cube_ref: cube.fingerprint(),
        labels: all.iter().map(|&(r, c)| cube.label(r, c)).collect(),
        indices: all,
        patch_size: net.patch_size,
    };
    let one = metrics_eval::evaluate(&model, &cube, &test, 1).map_err(|e| e.to_string())?;
    let many = metrics_eval::evaluate(&model, &cube, &test, 64).map_err(|e| e.to_string())?;
    ensure!(one == many, "m=1 and m=64 reports differ: {:?} vs {:?}", one.1, many.1);
    let direct = network::predict(&model, &test.patches(&cube).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let cm = ConfusionMatrix::from_labels(&test.labels, &direct, cube.class_names.clone()).map_err(|e| e.to_string())?;
    ensure!(cm == one.0, "confusion differs from a single full-batch prediction");
    Ok(format!("hand-computed matrices exact; m=1 and m=64 identical over {} samples", test.len()))
}

// ------------------------------------------------------- 7 reproducibility

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hyperdid"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("hyperdid {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn full_run(root: &Path) -> Result<(), String> {
    let scene = root.join("scene");
    let run = root.join("run");
    let cfg = root.join("experiment.toml");
    let text = format!(
        "bundle = {:?}\nout = {:?}\n[split]\nseed = 3\ntrain_per_class = 10\ntest_per_class = 50\n\
         [pseudo]\nseed = 4\n[network]\ninit_seed = 5\n[train]\nseed = 6\nepochs = 3\nbatch_size = 16\ncheckpoint_every = 1\n",
        scene.display().to_string(),
        run.display().to_string()
    );
    fs::write(&cfg, text).map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    run_cli(&["synth", "--out", scene.to_str().unwrap(), "--seed", "8"])?;
    for cmd in ["split", "cluster", "train", "eval"] {
        run_cli(&[cmd, "--config", cfg])?;
    }
    Ok(())
}

fn criterion_7() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    full_run(a.path())?;
    full_run(b.path())?;
    let mut files = vec![
        "scene/cube.bin".to_string(),
        "scene/labels.bin".into(),
        "scene/meta.json".into(),
        "scene/zones.bin".into(),
        "run/split.json".into(),
        "run/pseudo.json".into(),
        "run/train.log".into(),
        "run/metrics.json".into(),
        "run/metrics.txt".into(),
    ];
    files.extend((0..=3).map(|e| format!("run/ckpt_{e}.bin")));
    for f in &files {
        let x = fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(x == y, "{f} differs between runs");
    }
    Ok(format!("{} files byte-identical across two CLI pipeline runs", files.len()))
}

// --------------------------------------------------------------- 8 defaults

fn criterion_8() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_hyperdid"))
        .arg("--help-config")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "--help-config exited with {}", out.status);
    let doc: toml::Table = String::from_utf8_lossy(&out.stdout).parse().map_err(|e: toml::de::Error| e.to_string())?;
    let get = |section: &str, key: &str| doc.get(section).and_then(|s| s.get(key)).cloned();
    let float = |section: &str, key: &str| get(section, key).and_then(|v| v.as_float().or(v.as_integer().map(|i| i as f64)));
    let int = |section: &str, key: &str| get(section, key).and_then(|v| v.as_integer());
    ensure!(float("train", "learning_rate") == Some(0.01), "learning_rate {:?}", get("train", "learning_rate"));
    ensure!(int("train", "epochs") == Some(500), "epochs {:?}", get("train", "epochs"));
    ensure!(int("train", "batch_size") == Some(64), "batch_size {:?}", get("train", "batch_size"));
    ensure!(int("network", "feature_dim") == Some(128), "feature_dim {:?}", get("network", "feature_dim"));
    let proj: Option<Vec<i64>> = get("network", "projection_dims")
        .and_then(|v| v.as_array().map(|a| a.iter().filter_map(|x| x.as_integer()).collect()));
    ensure!(proj == Some(vec![128, 64, 64]), "projection_dims {proj:?}");
    ensure!(int("network", "patch_size") == Some(5), "patch_size {:?}", get("network", "patch_size"));
    ensure!(float("loss", "margin") == Some(0.0), "margin {:?}", get("loss", "margin"));
    for w in ["alpha", "beta", "gamma"] {
        ensure!(float("loss", w) == Some(1.0), "{w} {:?}", get("loss", w));
    }
    Ok("lr 0.01, 500 epochs, batch 64, d 128, projection 128-64-64, patch 5, margin 0, alpha=beta=gamma=1".into())
}

// ------------------------------------------------------------------ driver

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "loss oracles", limit: Some(Duration::from_secs(5)), run: criterion_1 },
        Criterion { id: 2, name: "gradient check", limit: Some(Duration::from_secs(60)), run: criterion_2 },
        Criterion { id: 3, name: "clustering", limit: Some(Duration::from_secs(60)), run: criterion_3 },
        Criterion { id: 4, name: "synthetic end-to-end", limit: Some(Duration::from_secs(600)), run: criterion_4 },
        Criterion { id: 5, name: "ablation harness", limit: None, run: criterion_5 },
        Criterion { id: 6, name: "metrics", limit: None, run: criterion_6 },
        Criterion { id: 7, name: "reproducibility", limit: None, run: criterion_7 },
        Criterion { id: 8, name: "defaults", limit: None, run: criterion_8 },
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let started = Instant::now();
        let mut outcome = match panic::catch_unwind(AssertUnwindSafe(c.run)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let elapsed = started.elapsed();
        if let (Ok(_), Some(limit)) = (&outcome, c.limit) {
            if elapsed > limit {
                outcome = Err(format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()));
            }
        }
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {} ({}) [{:.1}s]: {detail}", c.id, c.name, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
