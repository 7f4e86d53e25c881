use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cropcast::io;
use cropcast::mlp::{self, MlpHyper, SplitSpec};
use cropcast::pipeline::{self, PipelineConfig, PipelineError};
use cropcast::raster::ZoneMap;
use cropcast::season;
use cropcast::seed::derive_seed;
use cropcast::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(name = "cropcast", version, about = "Pre-harvest crop production forecasting from gridded seasonal data")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene and a pipeline.toml that runs on it.
    Synth(SynthArgs),
    /// Rank priority crops per country and region.
    SelectCrops,
    /// Crop mask and country zones on the analysis grid.
    Mask,
    /// Labelled seasonal features for the label years.
    Features,
    /// Forecast the unobserved part of the target season and build its features.
    ForecastFeatures,
    /// Train production models.
    Train(TrainArgs),
    /// Predict target-year production.
    Predict,
    /// Totals, rates of change and ratio map.
    Report(ReportArgs),
    /// Every stage in order, then the manifest.
    Run,
    /// Check a configuration without running it.
    Validate,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene directory (default: --out or ./scene).
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Generator settings (TOML); defaults otherwise.
    #[arg(long)]
    synth_config: Option<PathBuf>,
    /// Production noise as a fraction of the signal's spatial spread.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Train on this feature CSV instead of the configured pipeline.
    #[arg(long, requires = "model_out")]
    dataset: Option<PathBuf>,
    /// Network hyperparameters (TOML).
    #[arg(long)]
    hyper: Option<PathBuf>,
    /// Where the trained model JSON goes (with --dataset).
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Predicted production grid; with it the report runs without a configuration.
    #[arg(long, requires_all = ["baseline", "zones"])]
    pred: Option<PathBuf>,
    /// Baseline-year production grid.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Zone grid; names come from the sibling .csv.
    #[arg(long)]
    zones: Option<PathBuf>,
    /// Crop name written in the report rows.
    #[arg(long)]
    crop: Option<String>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| PipelineError::config("config", "no --config given"))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out = std::path::absolute(o).unwrap_or_else(|_| o.clone());
    }
    Ok(cfg)
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<(), PipelineError> {
    const S: &str = "synth";
    let mut cfg: SynthConfig = match &a.synth_config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::config(S, format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| PipelineError::config(S, format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.sigma {
        cfg.noise_sigma = s;
    }
    let dir = a.dir.clone().or_else(|| cli.out.clone()).unwrap_or_else(|| PathBuf::from("scene"));
    synth::write_scene(&cfg, &dir).map_err(|e| PipelineError::config(S, e.to_string()))?;
    let pcfg = pipeline::config_for_scene(&cfg, Path::new(""), Path::new("out"));
    let text = toml::to_string(&pcfg).map_err(|e| PipelineError::data(S, e.to_string()))?;
    let path = dir.join("pipeline.toml");
    fs::write(&path, text).map_err(|e| PipelineError::data(S, format!("{}: {e}", path.display())))?;
    println!("wrote scene and {}", path.display());
    Ok(())
}

fn train_standalone(cli: &Cli, a: &TrainArgs, dataset: &Path) -> Result<(), PipelineError> {
    const S: &str = "train";
    #[derive(serde::Deserialize, Default)]
    #[serde(default)]
    struct HyperFile {
        #[serde(flatten)]
        hyper: MlpHyper,
        split: Option<SplitSpec>,
    }
    let hf: HyperFile = match &a.hyper {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::config(S, format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| PipelineError::config(S, format!("{}: {e}", p.display())))?
        }
        None => HyperFile::default(),
    };
    let root = cli.seed.unwrap_or(0);
    let ds = season::read_dataset(dataset).map_err(|e| PipelineError::data(S, e.to_string()))?;
    let spec = hf.split.unwrap_or(SplitSpec { seed: derive_seed(root, "split"), ..Default::default() });
    let (train, val, test) = mlp::split_dataset(&ds, &spec).map_err(|e| PipelineError::config(S, e.to_string()))?;
    let model = mlp::train_mlp(&train, &val, &hf.hyper, derive_seed(root, "train")).map_err(|e| {
        let kind = if matches!(e, mlp::ModelError::DivergenceDetected { .. }) {
            pipeline::ErrorKind::Divergence
        } else {
            pipeline::ErrorKind::Data
        };
        PipelineError { stage: S.into(), kind, message: e.to_string() }
    })?;
    let out = a.model_out.as_deref().expect("clap requires model-out");
    let text = serde_json::to_string_pretty(&model).map_err(|e| PipelineError::data(S, e.to_string()))? + "\n";
    fs::write(out, text).map_err(|e| PipelineError::data(S, format!("{}: {e}", out.display())))?;
    if !test.is_empty() {
        let ev = mlp::evaluate(&model, &test).map_err(|e| PipelineError::data(S, e.to_string()))?;
        println!("test rows {}: rmse {:.4} t, rmse {:.4} (z-scored), r2 {:.4}", ev.n, ev.rmse_t, ev.rmse_z, ev.r2);
    }
    Ok(())
}

fn report_standalone(cli: &Cli, a: &ReportArgs, pred: &Path) -> Result<(), PipelineError> {
    const S: &str = "report";
    let data = |e: io::IngestError| PipelineError::data(S, e.to_string());
    let pred = io::read_grid(pred).map_err(data)?;
    let baseline = io::read_grid(a.baseline.as_deref().expect("clap requires baseline")).map_err(data)?;
    let zpath = a.zones.as_deref().expect("clap requires zones");
    let zones = ZoneMap::from_raster(&io::read_grid(zpath).map_err(data)?).map_err(|e| PipelineError::data(S, e.to_string()))?;
    let names = io::read_zone_names(&zpath.with_extension("csv")).map_err(data)?;
    let regions: BTreeMap<String, String> = names.values().map(|z| (z.country.clone(), z.region.clone())).collect();
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let crop = a.crop.clone().unwrap_or_default();
    let rep = pipeline::write_report(S, &pred, &baseline, &zones, &names, &regions, &crop, &out)?;
    print!("{}", cropcast::report::render_report(&rep));
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), PipelineError> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Validate => {
            let path = cli.config.as_deref().ok_or_else(|| PipelineError::config("validate", "no --config given"))?;
            let diags = pipeline::validate_config(path);
            if diags.is_empty() {
                println!("ok");
                Ok(())
            } else {
                for d in &diags {
                    println!("{d}");
                }
                Err(PipelineError::config("validate", format!("{} problem(s)", diags.len())))
            }
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            let manifest = pipeline::run_pipeline(&cfg)?;
            println!("{} artifacts in {}", manifest.len(), cfg.out_dir().display());
            Ok(())
        }
        Command::Train(a) if a.dataset.is_some() => train_standalone(cli, a, a.dataset.as_deref().unwrap()),
        Command::Report(a) if a.pred.is_some() => report_standalone(cli, a, a.pred.as_deref().unwrap()),
        c => {
            let stage = match c {
                Command::SelectCrops => "select-crops",
                Command::Mask => "mask",
                Command::Features => "features",
                Command::ForecastFeatures => "forecast-features",
                Command::Train(_) => "train",
                Command::Predict => "predict",
                Command::Report(_) => "report",
                _ => unreachable!("handled above"),
            };
            let cfg = load_config(cli)?;
            pipeline::run_stage(&cfg, stage)?;
            if stage == "train" {
                let m = fs::read_to_string(cfg.out_dir().join("metrics.json")).unwrap_or_default();
                print!("{m}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: threads: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
