//! Experiment configuration and the split -> cluster -> train -> eval
//! pipeline, in memory or backed by files in an output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datacube::{self, HyperspectralCube, SampleSet, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics_eval::{self, ConfusionMatrix, MetricsReport};
use crate::network::{self, checkpoint, BackboneKind, ModelState, NetworkSpec};
use crate::pseudo_env::{self, PseudoLabeling, PseudoModel};
use crate::trainer::{self, TrainConfig, TrainReport};

pub const SPLIT_FILE: &str = "split.json";
pub const PSEUDO_FILE: &str = "pseudo.json";
pub const REPORT_FILE: &str = "report.json";
pub const MAP_FILE: &str = "map.png";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_MD: &str = "ablation.md";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    /// Per-class count file (`seed=N` then `class_id,train,test` rows).
    /// Overrides the count keys below.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    pub train_per_class: usize,
    /// Test pixels per class; all remaining labeled pixels when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
    /// Fraction of each class's training pixels that is kept.
    pub sample_rate: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { seed: 0, file: None, train_per_class: 30, test_per_class: None, sample_rate: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    pub lambda: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    /// Independent k-means++ seedings; the lowest objective is kept.
    pub restarts: usize,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self { lambda: 2, seed: 0, max_iter: 100, tol: 1e-6, restarts: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub backbone: BackboneKind,
    pub feature_dim: usize,
    pub projection_dims: Vec<usize>,
    pub discriminator_dims: Vec<usize>,
    pub patch_size: usize,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let spec = NetworkSpec::new(2, 1);
        Self {
            backbone: spec.backbone,
            feature_dim: spec.feature_dim,
            projection_dims: spec.projection_dims,
            discriminator_dims: spec.discriminator_dims,
            patch_size: spec.patch_size,
            init_seed: spec.init_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory holding meta.json, cube.bin and labels.bin.
    pub bundle: PathBuf,
    pub out: PathBuf,
    /// Min-max normalize every band before use.
    pub normalize: bool,
    pub split: SplitConfig,
    pub pseudo: PseudoConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bundle: PathBuf::from("data/scene"),
            out: PathBuf::from("runs/default"),
            normalize: true,
            split: SplitConfig::default(),
            pseudo: PseudoConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

const CANONICAL_HEADER: &str = "\
# hyperdid experiment configuration (defaults shown).
#
# Optional keys not shown:
#   [split] file = \"counts.txt\"   per-class counts, overrides the count keys
#   [split] test_per_class = N     default: every remaining labeled pixel
#
# Seeds: split.seed drives sample selection, pseudo.seed drives k-means
# seeding, network.init_seed and train.seed drive weights and batch order.
";

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The default configuration as a commented TOML document.
    pub fn canonical() -> String {
        format!("{CANONICAL_HEADER}\n{}", Self::default().to_toml())
    }

    /// Numeric constraints only; no file system access.
    pub fn validate_values(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::InvalidInput(m) => Error::Config(m),
            other => other,
        };
        if self.split.train_per_class == 0 && self.split.file.is_none() {
            return Err(Error::Config("split.train_per_class must be at least 1".into()));
        }
        if !(self.split.sample_rate > 0.0 && self.split.sample_rate <= 1.0) {
            return Err(Error::Config(format!("split.sample_rate {} outside (0, 1]", self.split.sample_rate)));
        }
        if self.pseudo.lambda == 0 {
            return Err(Error::Config("pseudo.lambda must be at least 1".into()));
        }
        if self.pseudo.max_iter == 0 || !(self.pseudo.tol >= 0.0) {
            return Err(Error::Config("pseudo.max_iter must be >= 1 and pseudo.tol >= 0".into()));
        }
        if self.pseudo.restarts == 0 {
            return Err(Error::Config("pseudo.restarts must be at least 1".into()));
        }
        self.train.validate().map_err(cfg)?;
        self.loss.validate().map_err(cfg)?;
        // Band count is data-dependent; any value large enough for every
        // backbone checks the remaining shape rules.
        self.network_spec(2, 16).validate().map_err(cfg)?;
        Ok(())
    }

    /// Full validation: values plus the existence of every referenced path.
    pub fn validate(&self) -> Result<()> {
        self.validate_values()?;
        let meta = self.bundle.join(datacube::META_FILE);
        if !meta.is_file() {
            return Err(Error::Config(format!("bundle {} has no {}", self.bundle.display(), datacube::META_FILE)));
        }
        if let Some(f) = &self.split.file {
            if !f.is_file() {
                return Err(Error::Config(format!("split file {} does not exist", f.display())));
            }
        }
        Ok(())
    }

    pub fn network_spec(&self, num_classes: usize, bands: usize) -> NetworkSpec {
        NetworkSpec {
            backbone: self.network.backbone,
            feature_dim: self.network.feature_dim,
            projection_dims: self.network.projection_dims.clone(),
            discriminator_dims: self.network.discriminator_dims.clone(),
            num_classes,
            patch_size: self.network.patch_size,
            bands,
            init_seed: self.network.init_seed,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(what, format!("{}: {e}", path.display())))
}

pub fn load_cube(cfg: &ExperimentConfig) -> Result<HyperspectralCube> {
    let cube = datacube::load_bundle(&cfg.bundle)?;
    Ok(if cfg.normalize { datacube::normalize_bands(&cube) } else { cube })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    /// Per-class counts in the text form accepted by `split.file`.
    pub counts: String,
    pub sample_rate: f64,
    pub train: SampleSet,
    pub test: SampleSet,
}

impl SplitFile {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(SPLIT_FILE), "split file")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(SPLIT_FILE), self)
    }
}

pub fn make_split(cfg: &ExperimentConfig, cube: &HyperspectralCube) -> Result<SplitFile> {
    let spec = match &cfg.split.file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut spec = SplitSpec::parse(&text)?;
            spec.seed = cfg.split.seed;
            spec
        }
        None => SplitSpec::per_class_counts(cube, cfg.split.train_per_class, cfg.split.test_per_class, cfg.split.seed)?,
    };
    let (mut train, test) = datacube::split_samples(cube, &spec, cfg.network.patch_size)?;
    if cfg.split.sample_rate < 1.0 {
        train = datacube::subsample_training(&train, cfg.split.sample_rate, cfg.split.seed.wrapping_add(1))?;
    }
    Ok(SplitFile { counts: spec.to_text(), sample_rate: cfg.split.sample_rate, train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoFile {
    pub lambda: usize,
    pub seed: u64,
    pub centers: Vec<Vec<f64>>,
    pub objective: f64,
    pub iterations_run: usize,
    pub objective_history: Vec<f64>,
    /// Pseudo class (1-based) of every training sample, in split order.
    pub labels: Vec<usize>,
}

impl PseudoFile {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(PSEUDO_FILE), "pseudo-label file")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(PSEUDO_FILE), self)
    }

    pub fn labeling(&self) -> PseudoLabeling {
        PseudoLabeling { labels: self.labels.clone() }
    }
}

/// Center-pixel spectra of the training samples.
pub fn training_spectra(cube: &HyperspectralCube, train: &SampleSet) -> Vec<Vec<f64>> {
    train
        .indices
        .iter()
        .map(|&(r, c)| cube.spectrum(r, c).iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn make_pseudo(cfg: &ExperimentConfig, cube: &HyperspectralCube, split: &SplitFile) -> Result<PseudoFile> {
    let spectra = training_spectra(cube, &split.train);
    let model: PseudoModel = pseudo_env::fit_centers_best_of(
        &spectra,
        cfg.pseudo.lambda,
        cfg.pseudo.max_iter,
        cfg.pseudo.tol,
        cfg.pseudo.seed,
        cfg.pseudo.restarts,
    )?;
    let labels = pseudo_env::assign_pseudo_labels(&spectra, &model)?.labels;
    Ok(PseudoFile {
        lambda: model.lambda,
        seed: cfg.pseudo.seed,
        centers: model.centers,
        objective: model.objective,
        iterations_run: model.iterations_run,
        objective_history: model.objective_history,
        labels,
    })
}

pub fn make_model(cfg: &ExperimentConfig, cube: &HyperspectralCube) -> Result<ModelState> {
    network::init_model(&cfg.network_spec(cube.num_classes(), cube.bands))
}

pub fn run_training(
    cfg: &ExperimentConfig,
    cube: &HyperspectralCube,
    split: &SplitFile,
    pseudo: &PseudoFile,
    out: Option<&Path>,
) -> Result<(ModelState, TrainReport)> {
    let mut model = make_model(cfg, cube)?;
    let train_set = split.train.with_patch_size(cfg.network.patch_size);
    let report = trainer::train(&mut model, cube, &train_set, &pseudo.labeling(), &cfg.loss, &cfg.train, out)?;
    if let Some(dir) = out {
        write_json(&dir.join(REPORT_FILE), &report)?;
    }
    Ok((model, report))
}

pub fn run_eval(
    cfg: &ExperimentConfig,
    cube: &HyperspectralCube,
    model: &ModelState,
    split: &SplitFile,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    let test = split.test.with_patch_size(model.spec.patch_size);
    metrics_eval::evaluate(model, cube, &test, cfg.train.batch_size)
}

/// Checkpoint written at the end of training.
pub fn final_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    trainer::checkpoint_path(&cfg.out, cfg.train.epochs)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    checkpoint::load(path).map(|(model, _)| model)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub split: SplitFile,
    pub pseudo: PseudoFile,
    pub model: ModelState,
    pub train: TrainReport,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
}

/// split -> cluster -> train -> eval. With `out`, every intermediate file is
/// written there.
pub fn run_pipeline(cfg: &ExperimentConfig, cube: &HyperspectralCube, out: Option<&Path>) -> Result<PipelineOutcome> {
    cfg.validate_values()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let split = make_split(cfg, cube)?;
    let pseudo = make_pseudo(cfg, cube, &split)?;
    if let Some(dir) = out {
        split.save(dir)?;
        pseudo.save(dir)?;
    }
    let (model, train) = run_training(cfg, cube, &split, &pseudo, out)?;
    let (confusion, metrics) = run_eval(cfg, cube, &model, &split)?;
    if let Some(dir) = out {
        metrics_eval::write_metrics(dir, &confusion, &metrics)?;
    }
    Ok(PipelineOutcome { split, pseudo, model, train, confusion, metrics })
}

pub const GRID_KEYS: [&str; 6] = ["alpha", "beta", "gamma", "lambda", "patch_size", "sample_rate"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// Each listed value is applied alone on top of the base config.
    #[default]
    OneAtATime,
    /// Every combination of the listed values.
    Cartesian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub mode: GridMode,
    /// Add an unmodified base-config row.
    pub include_base: bool,
    /// Runs per grid point; run `r` offsets every seed by `r`.
    pub repeats: usize,
    pub grid: BTreeMap<String, Vec<f64>>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self { mode: GridMode::OneAtATime, include_base: false, repeats: 1, grid: BTreeMap::new() }
    }
}

impl AblationGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        for (key, values) in &self.grid {
            if !GRID_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "invalid grid key {key:?}; expected one of {}",
                    GRID_KEYS.join(", ")
                )));
            }
            if values.is_empty() {
                return Err(Error::Config(format!("grid key {key:?} has no values")));
            }
        }
        if self.grid.is_empty() && !self.include_base {
            return Err(Error::Config("empty grid".into()));
        }
        Ok(())
    }

    /// Grid points as ordered `(key, value)` assignments.
    pub fn points(&self) -> Vec<Vec<(String, f64)>> {
        let mut points: Vec<Vec<(String, f64)>> = Vec::new();
        if self.include_base {
            points.push(Vec::new());
        }
        match self.mode {
            GridMode::OneAtATime => {
                for (key, values) in &self.grid {
                    points.extend(values.iter().map(|&v| vec![(key.clone(), v)]));
                }
            }
            GridMode::Cartesian if !self.grid.is_empty() => {
                let mut combos: Vec<Vec<(String, f64)>> = vec![Vec::new()];
                for (key, values) in &self.grid {
                    combos = combos
                        .into_iter()
                        .flat_map(|c| {
                            values.iter().map(move |&v| {
                                let mut c = c.clone();
                                c.push((key.clone(), v));
                                c
                            })
                        })
                        .collect();
                }
                points.extend(combos);
            }
            GridMode::Cartesian => {}
        }
        points
    }
}

fn as_count(key: &str, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{key} = {v} must be a positive integer")))
    }
}

pub fn apply_assignment(cfg: &mut ExperimentConfig, key: &str, value: f64) -> Result<()> {
    match key {
        "alpha" => cfg.loss.alpha = value,
        "beta" => cfg.loss.beta = value,
        "gamma" => cfg.loss.gamma = value,
        "lambda" => cfg.pseudo.lambda = as_count(key, value)?,
        "patch_size" => cfg.network.patch_size = as_count(key, value)?,
        "sample_rate" => cfg.split.sample_rate = value,
        other => return Err(Error::Config(format!("invalid grid key {other:?}"))),
    }
    cfg.validate_values()
}

/// `base` for an empty assignment, otherwise `key=value` pairs.
pub fn point_label(point: &[(String, f64)]) -> String {
    if point.is_empty() {
        return "base".into();
    }
    point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

pub fn offset_seeds(cfg: &mut ExperimentConfig, by: u64) {
    cfg.split.seed = cfg.split.seed.wrapping_add(by);
    cfg.pseudo.seed = cfg.pseudo.seed.wrapping_add(by);
    cfg.network.init_seed = cfg.network.init_seed.wrapping_add(by);
    cfg.train.seed = cfg.train.seed.wrapping_add(by);
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub assignment: Vec<(String, f64)>,
    pub config: ExperimentConfig,
    pub lambda_fitted: Vec<usize>,
    pub train: Vec<TrainReport>,
    pub metrics: Vec<MetricsReport>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationRow {
    pub fn median_oa(&self) -> f64 {
        median(&self.metrics.iter().map(|m| m.oa).collect::<Vec<_>>())
    }

    pub fn median_aa(&self) -> f64 {
        median(&self.metrics.iter().map(|m| m.aa).collect::<Vec<_>>())
    }

    pub fn median_kappa(&self) -> f64 {
        median(&self.metrics.iter().map(|m| m.kappa).collect::<Vec<_>>())
    }
}

/// One full pipeline per grid point and repeat. Seeds are shared by all
/// grid points.
pub fn ablate(base: &ExperimentConfig, cube: &HyperspectralCube, grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    base.validate_values()?;
    let mut rows = Vec::new();
    for point in grid.points() {
        let mut cfg = base.clone();
        for (key, value) in &point {
            apply_assignment(&mut cfg, key, *value)?;
        }
        let mut row = AblationRow {
            label: point_label(&point),
            assignment: point.clone(),
            config: cfg.clone(),
            lambda_fitted: Vec::new(),
            train: Vec::new(),
            metrics: Vec::new(),
        };
        for r in 0..grid.repeats {
            let mut run_cfg = cfg.clone();
            offset_seeds(&mut run_cfg, r as u64);
            let outcome = run_pipeline(&run_cfg, cube, None)?;
            row.lambda_fitted.push(outcome.pseudo.lambda);
            row.train.push(outcome.train);
            row.metrics.push(outcome.metrics);
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,alpha,beta,gamma,lambda,patch_size,sample_rate,runs,oa,aa,kappa\n");
    for row in rows {
        let c = &row.config;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            row.label,
            c.loss.alpha,
            c.loss.beta,
            c.loss.gamma,
            c.pseudo.lambda,
            c.network.patch_size,
            c.split.sample_rate,
            row.metrics.len(),
            row.median_oa(),
            row.median_aa(),
            row.median_kappa()
        );
    }
    out
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "| config | alpha | beta | gamma | lambda | patch | rate | OA (%) | AA (%) | kappa |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for row in rows {
        let c = &row.config;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {:.2} | {:.2} | {:.4} |",
            row.label,
            c.loss.alpha,
            c.loss.beta,
            c.loss.gamma,
            c.pseudo.lambda,
            c.network.patch_size,
            c.split.sample_rate,
            100.0 * row.median_oa(),
            100.0 * row.median_aa(),
            row.median_kappa()
        );
    }
    out
}

pub fn write_ablation(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [(ABLATION_CSV, ablation_csv(rows)), (ABLATION_MD, ablation_markdown(rows))] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
