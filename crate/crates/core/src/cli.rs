//! Command-line interface. Every command reads its inputs from files and
//! writes its outputs to the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datacube::HyperspectralCube;
use crate::error::{Error, Result};
use crate::experiment::{self, AblationGrid, ExperimentConfig, PseudoFile, SplitFile};
use crate::metrics_eval::{self, UnlabeledPolicy};
use crate::synth::{self, SyntheticSceneSpec, ZoneLayout};

#[derive(Debug, Parser)]
#[command(name = "hyperdid", version, about = "Hyperspectral classification with decomposed environmental and categorical features")]
pub struct Cli {
    /// Print the canonical configuration file with all defaults and exit.
    #[arg(long)]
    pub help_config: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Data bundle directory; overrides `bundle` from the config.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene bundle with zone ground truth.
    Synth(SynthArgs),
    /// Draw train and test samples (writes split.json).
    Split {
        #[command(flatten)]
        common: Common,
        /// Overrides split.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit environmental pseudo classes (writes pseudo.json).
    Cluster {
        #[command(flatten)]
        common: Common,
        /// Overrides pseudo.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the network (writes checkpoints, train.log and report.json).
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides train.seed and network.init_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on the test samples (writes metrics.json and metrics.txt).
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the final checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render a classification map (writes map.png).
    Map {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Paint unlabeled pixels black instead of classifying them.
        #[arg(long)]
        mask_unlabeled: bool,
    },
    /// Run the full pipeline for every point of a parameter grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Grid file (TOML) with a [grid] table of value lists.
        #[arg(long)]
        grid: PathBuf,
        /// Sets every seed of the base configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Args, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 48)]
    pub rows: usize,
    #[arg(long, default_value_t = 48)]
    pub cols: usize,
    #[arg(long, default_value_t = 20)]
    pub bands: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Number of environment zones.
    #[arg(long, default_value_t = 2)]
    pub zones: usize,
    /// vertical_bands or blobs.
    #[arg(long, default_value = "vertical_bands")]
    pub layout: ZoneLayout,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Replace every class spectrum by ones, leaving only shading.
    #[arg(long)]
    pub shading_only: bool,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(bundle) = &common.bundle {
        cfg.bundle = bundle.clone();
    }
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} {} not found", path.display())))
    }
}

fn create_out(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))
}

fn check_model(model: &crate::network::ModelState, cube: &HyperspectralCube) -> Result<()> {
    if model.spec.num_classes != cube.num_classes() || model.spec.bands != cube.bands {
        return Err(Error::InvalidInput(format!(
            "checkpoint expects {} classes and {} bands, cube has {} and {}",
            model.spec.num_classes,
            model.spec.bands,
            cube.num_classes(),
            cube.bands
        )));
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSceneSpec::standard(
        args.rows,
        args.cols,
        args.bands,
        args.classes,
        args.zones,
        args.layout,
        args.noise,
        args.seed,
    );
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let (mut cube, zones) = synth::generate(&spec)?;
    if args.shading_only {
        cube = synth::shading_only(&spec)?;
    }
    synth::write_scene(&args.out, &cube, &zones)?;
    println!(
        "wrote {}x{}x{} scene with {} classes and {} zones to {}",
        cube.rows,
        cube.cols,
        cube.bands,
        cube.num_classes(),
        spec.num_zones,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_split(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let cube = experiment::load_cube(cfg)?;
    let split = experiment::make_split(cfg, &cube)?;
    create_out(cfg)?;
    split.save(&cfg.out)?;
    println!("{} training and {} test samples", split.train.len(), split.test.len());
    Ok(())
}

pub fn cmd_cluster(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    require(&cfg.out.join(experiment::SPLIT_FILE), "split file")?;
    let cube = experiment::load_cube(cfg)?;
    let split = SplitFile::load(&cfg.out)?;
    split.train.validate(&cube)?;
    if split.train.len() < cfg.pseudo.lambda {
        return Err(Error::InvalidInput(format!(
            "{} training samples cannot form {} pseudo classes",
            split.train.len(),
            cfg.pseudo.lambda
        )));
    }
    let pseudo = experiment::make_pseudo(cfg, &cube, &split)?;
    pseudo.save(&cfg.out)?;
    println!(
        "lambda={} objective={} after {} iterations",
        pseudo.lambda, pseudo.objective, pseudo.iterations_run
    );
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    require(&cfg.out.join(experiment::SPLIT_FILE), "split file")?;
    require(&cfg.out.join(experiment::PSEUDO_FILE), "pseudo-label file")?;
    let cube = experiment::load_cube(cfg)?;
    let split = SplitFile::load(&cfg.out)?;
    let pseudo = PseudoFile::load(&cfg.out)?;
    if pseudo.labels.len() != split.train.len() {
        return Err(Error::InvalidInput(format!(
            "pseudo.json labels {} samples but split.json has {}",
            pseudo.labels.len(),
            split.train.len()
        )));
    }
    let (_, report) = experiment::run_training(cfg, &cube, &split, &pseudo, Some(&cfg.out))?;
    let last = report.epochs.last().copied().unwrap_or_default();
    println!(
        "trained {} epochs ({} steps) in {:.1}s; final epoch loss {} (L0 {}, Le {}, Lc {}, Ld {})",
        report.epochs.len(),
        report.steps,
        report.wall_seconds,
        last.total,
        last.l0,
        last.le,
        last.lc,
        last.ld
    );
    Ok(())
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| experiment::final_checkpoint(cfg));
    require(&ckpt, "checkpoint")?;
    require(&cfg.out.join(experiment::SPLIT_FILE), "split file")?;
    let cube = experiment::load_cube(cfg)?;
    let split = SplitFile::load(&cfg.out)?;
    let model = experiment::load_checkpoint(&ckpt)?;
    check_model(&model, &cube)?;
    let (cm, report) = experiment::run_eval(cfg, &cube, &model, &split)?;
    metrics_eval::write_metrics(&cfg.out, &cm, &report)?;
    print!("{}", metrics_eval::metrics_table(&cm, &report));
    Ok(())
}

pub fn cmd_map(cfg: &ExperimentConfig, checkpoint: Option<&Path>, policy: UnlabeledPolicy) -> Result<()> {
    cfg.validate()?;
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| experiment::final_checkpoint(cfg));
    require(&ckpt, "checkpoint")?;
    let cube = experiment::load_cube(cfg)?;
    let model = experiment::load_checkpoint(&ckpt)?;
    check_model(&model, &cube)?;
    let img = metrics_eval::render_map(&model, &cube, &cube.palette, policy)?;
    create_out(cfg)?;
    let path = cfg.out.join(experiment::MAP_FILE);
    metrics_eval::save_png(&img, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_ablate(cfg: &ExperimentConfig, grid_path: &Path) -> Result<()> {
    cfg.validate()?;
    let text = fs::read_to_string(grid_path).map_err(|e| Error::Config(format!("{}: {e}", grid_path.display())))?;
    let grid = AblationGrid::from_toml(&text)?;
    for point in grid.points() {
        let mut probe = cfg.clone();
        for (key, value) in &point {
            experiment::apply_assignment(&mut probe, key, *value)?;
        }
    }
    let cube = experiment::load_cube(cfg)?;
    let rows = experiment::ablate(cfg, &cube, &grid)?;
    experiment::write_ablation(&cfg.out, &rows)?;
    print!("{}", experiment::ablation_markdown(&rows));
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.help_config {
        print!("{}", ExperimentConfig::canonical());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no command given; see --help".into()));
    };
    match command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Split { common, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.split.seed = s;
            }
            cmd_split(&cfg)
        }
        Command::Cluster { common, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.pseudo.seed = s;
            }
            cmd_cluster(&cfg)
        }
        Command::Train { common, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.network.init_seed = s;
            }
            cmd_train(&cfg)
        }
        Command::Eval { common, checkpoint } => cmd_eval(&load_config(&common)?, checkpoint.as_deref()),
        Command::Map { common, checkpoint, mask_unlabeled } => {
            let policy = if mask_unlabeled { UnlabeledPolicy::MaskUnlabeled } else { UnlabeledPolicy::ColorAll };
            cmd_map(&load_config(&common)?, checkpoint.as_deref(), policy)
        }
        Command::Ablate { common, grid, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.split.seed = s;
                cfg.pseudo.seed = s;
                cfg.network.init_seed = s;
                cfg.train.seed = s;
            }
            cmd_ablate(&cfg, &grid)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from(["hyperdid", "split", "--out", "o", "--seed", "9"]);
        let Some(Command::Split { common, seed }) = cli.command else { panic!() };
        let cfg = load_config(&common).unwrap();
        assert_eq!(cfg.out, PathBuf::from("o"));
        assert_eq!(seed, Some(9));
    }

    #[test]
    fn missing_bundle_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.bundle = dir.path().join("nope");
        cfg.out = dir.path().join("out");
        assert_eq!(cmd_split(&cfg).unwrap_err().exit_code(), 2);
        assert!(!cfg.out.exists());
    }
}
