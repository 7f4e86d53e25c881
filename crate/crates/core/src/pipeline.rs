//! Configuration-driven pipeline. Each stage reads its inputs from the
//! configured data and from earlier stages' files in the output directory, so
//! running stages one at a time produces the same bytes as a full run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::forest::{self, ForestError, ForestParams, Observation, SlotGrid};
use crate::io::{self, IngestError, LayerMeta, Parameter, TimeSeriesStack, ZoneName};
use crate::mlp::{self, MlpHyper, MlpModel, ModelError, SplitSpec};
use crate::raster::{self, CropMask, GridGeometry, GridRaster, RasterError, ResampleMethod, ZoneMap};
use crate::report::{self, ForecastReport, ReportError};
use crate::season::{self, Aggregate, FeatureDataset, FeatureError, FeatureSpec, OnsetRule, SeasonWindow};
use crate::seed::derive_seed;
use crate::selection::{self, RegionalRule, SelectionError};
use crate::synth;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Divergence,
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: String,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn config(stage: &str, message: impl Into<String>) -> Self {
        Self { stage: stage.into(), kind: ErrorKind::Config, message: message.into() }
    }

    pub fn data(stage: &str, message: impl Into<String>) -> Self {
        Self { stage: stage.into(), kind: ErrorKind::Data, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Divergence => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

trait Staged<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl<T> Staged<T> for std::result::Result<T, $t> {
            fn stage(self, stage: &str) -> Result<T> {
                self.map_err(|e| PipelineError::data(stage, e.to_string()))
            }
        }
    )*};
}
data_errors!(RasterError, FeatureError, ForestError, ReportError, SelectionError, std::io::Error, serde_json::Error);

impl<T> Staged<T> for std::result::Result<T, IngestError> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| match e {
            IngestError::InvalidConfig(m) => PipelineError::config(stage, m),
            e => PipelineError::data(stage, e.to_string()),
        })
    }
}

impl<T> Staged<T> for std::result::Result<T, ModelError> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| {
            let kind = match e {
                ModelError::DivergenceDetected { .. } => ErrorKind::Divergence,
                ModelError::InvalidHyper(_) | ModelError::InvalidSplit(_) => ErrorKind::Config,
                _ => ErrorKind::Data,
            };
            PipelineError { stage: stage.into(), kind, message: e.to_string() }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory of `PARAM_year_doy.grdh` stack frames.
    pub stacks: PathBuf,
    /// Directory of `PRODUCTION_year.grdh` labels.
    pub production: PathBuf,
    /// Zone raster; names default to the sibling `.csv`.
    pub zones: PathBuf,
    #[serde(default)]
    pub zone_names: Option<PathBuf>,
    pub balances: PathBuf,
    #[serde(default)]
    pub regions: Option<PathBuf>,
    pub calendar: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub name: String,
    /// Countries to model; empty means every named zone.
    #[serde(default)]
    pub countries: Vec<String>,
    /// Cells whose baseline production exceeds this are cropland.
    #[serde(default)]
    pub mask_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YearsConfig {
    pub label: Vec<i32>,
    pub baseline: i32,
    pub target: i32,
    /// Last day of the target year with observations.
    pub asof_doy: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Defaults to the baseline production grid.
    pub geometry: Option<GridGeometry>,
    pub resample: ResampleMethod,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { geometry: None, resample: ResampleMethod::AreaWeighted }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesConfig {
    pub aggregates: Vec<Aggregate>,
    /// Start the season at detected green-up when later than sowing.
    pub use_onset: bool,
    pub onset: OnsetRule,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        Self { aggregates: FeatureSpec::default().aggregates, use_onset: true, onset: OnsetRule::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    #[serde(flatten)]
    pub forest: ForestParams,
    /// One forest per country and parameter, trained on all its crop pixels.
    pub pooled: bool,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self { forest: ForestParams::default(), pooled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub hyper: MlpHyper,
    pub per_country: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hyper: MlpHyper::default(), per_country: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self { train_frac: s.train_frac, val_frac: s.val_frac, test_frac: s.test_frac }
    }
}

impl SplitConfig {
    pub fn spec(&self, seed: u64) -> SplitSpec {
        SplitSpec { train_frac: self.train_frac, val_frac: self.val_frac, test_frac: self.test_frac, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root from which every stage seed is derived.
    pub seed: u64,
    pub paths: Paths,
    pub crop: CropConfig,
    pub years: YearsConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub features: FeaturesConfig,
    #[serde(default)]
    pub forecast: ForecastConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub split: SplitConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::config("config", format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| PipelineError::config("config", format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.paths.out)
    }

    pub fn zone_names_path(&self) -> PathBuf {
        match &self.paths.zone_names {
            Some(p) => self.resolve(p),
            None => self.resolve(&self.paths.zones).with_extension("csv"),
        }
    }

    pub fn production_file(&self, year: i32) -> PathBuf {
        synth::production_path(&self.resolve(&self.paths.production), year)
    }

    pub fn stage_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec { aggregates: self.features.aggregates.clone() }
    }

    /// Every year whose stacks are read: label years and the target year.
    pub fn stack_years(&self) -> Vec<i32> {
        let mut y = self.years.label.clone();
        y.push(self.years.target);
        y.sort_unstable();
        y.dedup();
        y
    }
}

/// Problems that would stop the pipeline, one line each; empty when runnable.
pub fn validate_config(path: &Path) -> Vec<String> {
    let cfg = match PipelineConfig::load(path) {
        Ok(c) => c,
        Err(e) => return vec![e.message],
    };
    let mut diags = Vec::new();
    if let Err(e) = cfg.split.spec(0).validate() {
        diags.push(format!("split spec: {e}"));
    }
    if let Err(e) = cfg.model.hyper.validate() {
        diags.push(format!("model: {e}"));
    }
    if cfg.forecast.forest.n_trees == 0 || cfg.forecast.forest.min_leaf == 0 {
        diags.push("forecast: n_trees and min_leaf must be positive".into());
    }
    if cfg.features.aggregates.is_empty() {
        diags.push("features: no aggregates selected".into());
    }
    if cfg.years.label.is_empty() {
        diags.push("years: no label years".into());
    }
    if cfg.years.label.contains(&cfg.years.target) {
        diags.push(format!("years: target year {} is also a label year", cfg.years.target));
    }
    if !(1..=365).contains(&cfg.years.asof_doy) {
        diags.push(format!("years: asof_doy {} is outside 1..=365", cfg.years.asof_doy));
    }
    if cfg.crop.name.trim().is_empty() {
        diags.push("crop: empty crop name".into());
    }
    let mut require = |what: &str, p: PathBuf, dir: bool| {
        let ok = if dir { p.is_dir() } else { p.is_file() };
        if !ok {
            diags.push(format!("{what}: {} does not exist", p.display()));
        }
    };
    require("paths.stacks", cfg.resolve(&cfg.paths.stacks), true);
    require("paths.production", cfg.resolve(&cfg.paths.production), true);
    require("paths.zones", cfg.resolve(&cfg.paths.zones), false);
    require("zone names", cfg.zone_names_path(), false);
    require("paths.balances", cfg.resolve(&cfg.paths.balances), false);
    if let Some(r) = &cfg.paths.regions {
        require("paths.regions", cfg.resolve(r), false);
    }
    require("paths.calendar", cfg.resolve(&cfg.paths.calendar), false);
    if cfg.resolve(&cfg.paths.production).is_dir() {
        let mut years = cfg.years.label.clone();
        years.push(cfg.years.baseline);
        years.sort_unstable();
        years.dedup();
        for y in years {
            require("production", cfg.production_file(y), false);
        }
    }
    diags
}

pub const STAGES: [&str; 7] = ["select-crops", "mask", "features", "forecast-features", "train", "predict", "report"];

/// Lowercase file-name form of a country name.
pub fn slug(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    s.trim_matches('_').to_string()
}

fn write_json<T: Serialize>(stage: &str, value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).stage(stage)?;
    }
    let mut text = serde_json::to_string_pretty(value).stage(stage)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| PipelineError::data(stage, format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(stage: &str, path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::data(stage, format!("{}: {e} (run the earlier stages first)", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::data(stage, format!("{}: {e}", path.display())))
}

fn to_grid(stage: &str, r: GridRaster, geo: &GridGeometry, method: ResampleMethod) -> Result<GridRaster> {
    if r.geometry == *geo {
        Ok(r)
    } else {
        raster::resample(&r, geo, method).stage(stage)
    }
}

fn analysis_grid(cfg: &PipelineConfig, stage: &str) -> Result<GridGeometry> {
    match cfg.grid.geometry {
        Some(g) => {
            g.validate().map_err(|e| PipelineError::config(stage, format!("grid: {e}")))?;
            Ok(g)
        }
        None => Ok(io::read_header(&cfg.production_file(cfg.years.baseline)).stage(stage)?.geometry()),
    }
}

fn load_production(cfg: &PipelineConfig, stage: &str, year: i32, geo: &GridGeometry) -> Result<GridRaster> {
    let r = io::read_grid(&cfg.production_file(year)).stage(stage)?;
    to_grid(stage, r, geo, cfg.grid.resample)
}

fn load_stack(cfg: &PipelineConfig, stage: &str, p: Parameter, year: i32, geo: &GridGeometry) -> Result<TimeSeriesStack> {
    let method = cfg.grid.resample;
    io::read_stack_with(&cfg.resolve(&cfg.paths.stacks), p, year, |r| {
        if r.geometry == *geo {
            Ok(r)
        } else {
            Ok(raster::resample(&r, geo, method)?)
        }
    })
    .stage(stage)
}

fn load_stacks(cfg: &PipelineConfig, stage: &str, year: i32, geo: &GridGeometry) -> Result<BTreeMap<Parameter, TimeSeriesStack>> {
    Parameter::INPUTS.iter().map(|p| Ok((*p, load_stack(cfg, stage, *p, year, geo)?))).collect()
}

/// A modelled country: its zones, region and crop pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryUnit {
    pub country: String,
    pub region: String,
    pub zone_ids: Vec<u32>,
    pub crop_pixels: usize,
}

impl CountryUnit {
    fn mask(&self, crop: &CropMask, zones: &ZoneMap) -> CropMask {
        let cells = crop
            .cells
            .iter()
            .zip(&zones.zone_ids)
            .map(|(c, z)| *c && self.zone_ids.contains(z))
            .collect();
        CropMask { geometry: crop.geometry, cells }
    }
}

const MASK_FILE: &str = "mask.grdh";
const ZONES_FILE: &str = "zones.grdh";
const COUNTRIES_FILE: &str = "countries.json";
const SELECTION_FILE: &str = "selection.json";
const PREDICTION_FILE: &str = "prediction.grdh";
const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn labelled_path(out: &Path, country: &str) -> PathBuf {
    out.join("features").join(format!("{}.csv", slug(country)))
}

fn target_path(out: &Path, country: &str) -> PathBuf {
    out.join("features").join(format!("{}_target.csv", slug(country)))
}

fn model_path(out: &Path, name: &str) -> PathBuf {
    out.join("models").join(format!("{}.json", slug(name)))
}

const POOLED_MODEL: &str = "all";

/// Context shared by stages after the mask stage.
struct Layout {
    geo: GridGeometry,
    crop: CropMask,
    zones: ZoneMap,
    countries: Vec<CountryUnit>,
}

fn load_layout(cfg: &PipelineConfig, stage: &str) -> Result<Layout> {
    let out = cfg.out_dir();
    let crop = CropMask::from_raster(&io::read_grid(&out.join(MASK_FILE)).map_err(|e| {
        PipelineError::data(stage, format!("{e} (run the mask stage first)"))
    })?);
    let zones = ZoneMap::from_raster(&io::read_grid(&out.join(ZONES_FILE)).stage(stage)?).stage(stage)?;
    let countries: Vec<CountryUnit> = read_json(stage, &out.join(COUNTRIES_FILE))?;
    Ok(Layout { geo: crop.geometry, crop, zones, countries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: String,
    pub n_countries: usize,
    pub tally: Vec<selection::RegionalTally>,
    pub picks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub countries: Vec<selection::CountrySelection>,
    pub regions: Vec<RegionSummary>,
    /// Modelled countries whose five priority crops include the configured crop.
    pub crop_prioritised_in: Vec<String>,
}

fn load_regions(cfg: &PipelineConfig, stage: &str) -> Result<BTreeMap<String, String>> {
    let mut regions: BTreeMap<String, String> = match &cfg.paths.regions {
        Some(p) => io::read_regions(&cfg.resolve(p)).stage(stage)?,
        None => BTreeMap::new(),
    };
    for z in io::read_zone_names(&cfg.zone_names_path()).stage(stage)?.into_values() {
        regions.entry(z.country).or_insert(z.region);
    }
    Ok(regions)
}

pub fn stage_select_crops(cfg: &PipelineConfig) -> Result<SelectionSummary> {
    const S: &str = "select-crops";
    let balances = io::read_commodity_table(&cfg.resolve(&cfg.paths.balances)).stage(S)?;
    let selections = selection::select_all(&balances).stage(S)?;
    let regions = load_regions(cfg, S)?;
    let mut names: Vec<&String> = regions.values().collect();
    names.sort();
    names.dedup();
    let rule = RegionalRule::default();
    let mut summaries = Vec::new();
    for region in names {
        let n = selections.iter().filter(|s| regions.get(&s.country) == Some(region)).count();
        if n == 0 {
            continue;
        }
        let tally = selection::tally_region(&selections, region, &regions);
        let picks = selection::regional_selection(&tally, n, &rule).into_iter().map(|t| t.crop).collect();
        summaries.push(RegionSummary { region: region.clone(), n_countries: n, tally, picks });
    }
    let crop = &cfg.crop.name;
    let prioritised: Vec<String> = selections
        .iter()
        .filter(|s| s.top5.iter().any(|c| c == crop || c.starts_with(&format!("{crop} "))))
        .map(|s| s.country.clone())
        .collect();
    let summary = SelectionSummary { countries: selections, regions: summaries, crop_prioritised_in: prioritised };
    write_json(S, &summary, &cfg.out_dir().join(SELECTION_FILE))?;
    Ok(summary)
}

pub fn stage_mask(cfg: &PipelineConfig) -> Result<Vec<CountryUnit>> {
    const S: &str = "mask";
    let out = cfg.out_dir();
    fs::create_dir_all(&out).stage(S)?;
    let geo = analysis_grid(cfg, S)?;
    let baseline = load_production(cfg, S, cfg.years.baseline, &geo)?;
    let crop = raster::build_crop_mask(&baseline, cfg.crop.mask_threshold);
    let zr = io::read_grid(&cfg.resolve(&cfg.paths.zones)).stage(S)?;
    let zones = ZoneMap::from_raster(&to_grid(S, zr, &geo, ResampleMethod::Nearest)?).stage(S)?;
    let names = io::read_zone_names(&cfg.zone_names_path()).stage(S)?;
    let regions = load_regions(cfg, S)?;

    let mut by_country: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for id in zones.ids() {
        match names.get(&id) {
            Some(ZoneName { country, .. }) => by_country.entry(country.clone()).or_default().push(id),
            None => log::warn!("zone {id} has no name and is not modelled"),
        }
    }
    if !cfg.crop.countries.is_empty() {
        for c in &cfg.crop.countries {
            if !by_country.contains_key(c) {
                return Err(PipelineError::config(S, format!("country {c} has no zone")));
            }
        }
        by_country.retain(|c, _| cfg.crop.countries.contains(c));
    }
    let mut units = Vec::new();
    for (country, zone_ids) in by_country {
        let region = regions.get(&country).cloned().unwrap_or_default();
        let mut u = CountryUnit { country, region, zone_ids, crop_pixels: 0 };
        u.crop_pixels = u.mask(&crop, &zones).count();
        if u.crop_pixels == 0 {
            log::warn!("{} has no {} pixels", u.country, cfg.crop.name);
        }
        units.push(u);
    }
    if units.iter().all(|u| u.crop_pixels == 0) {
        return Err(PipelineError::data(S, "crop mask is empty in every modelled country"));
    }
    let meta = |p: &str| LayerMeta { parameter: p.into(), year: Some(cfg.years.baseline), day_of_year: None };
    io::write_layer(&crop.to_raster(), &meta("MASK"), &out.join(MASK_FILE)).stage(S)?;
    io::write_layer(&zones.to_raster(), &LayerMeta { parameter: "ZONES".into(), ..Default::default() }, &out.join(ZONES_FILE))
        .stage(S)?;
    write_json(S, &units, &out.join(COUNTRIES_FILE))?;
    Ok(units)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub country: String,
    pub year: i32,
    pub onset_doy: Option<u32>,
    pub window: SeasonWindow,
}

fn calendar_for(cfg: &PipelineConfig, stage: &str) -> Result<BTreeMap<String, io::CropCalendarEntry>> {
    let entries = io::read_crop_calendar(&cfg.resolve(&cfg.paths.calendar)).stage(stage)?;
    Ok(entries.into_iter().filter(|e| e.crop == cfg.crop.name).map(|e| (e.country.clone(), e)).collect())
}

fn window_for(
    cfg: &PipelineConfig,
    stage: &str,
    calendar: &BTreeMap<String, io::CropCalendarEntry>,
    unit: &CountryUnit,
    ndvi: &TimeSeriesStack,
    mask: &CropMask,
    asof: Option<u32>,
) -> Result<WindowRecord> {
    let entry = calendar
        .get(&unit.country)
        .ok_or_else(|| PipelineError::data(stage, format!("no {} calendar entry for {}", cfg.crop.name, unit.country)))?;
    let onset = if cfg.features.use_onset { season::regional_onset(ndvi, mask, asof, &cfg.features.onset) } else { None };
    Ok(WindowRecord { country: unit.country.clone(), year: ndvi.year, onset_doy: onset, window: season::resolve_window(entry, onset) })
}

/// Labelled feature datasets for every modelled country over the label years.
pub fn stage_features(cfg: &PipelineConfig) -> Result<Vec<WindowRecord>> {
    const S: &str = "features";
    let out = cfg.out_dir();
    let lay = load_layout(cfg, S)?;
    let calendar = calendar_for(cfg, S)?;
    let spec = cfg.feature_spec();
    let mut datasets: BTreeMap<&str, FeatureDataset> = BTreeMap::new();
    let mut windows = Vec::new();
    for &year in &cfg.years.label {
        let stacks = load_stacks(cfg, S, year, &lay.geo)?;
        let labels = load_production(cfg, S, year, &lay.geo)?;
        for u in lay.countries.iter().filter(|u| u.crop_pixels > 0) {
            let mask = u.mask(&lay.crop, &lay.zones);
            let w = window_for(cfg, S, &calendar, u, &stacks[&Parameter::Ndvi], &mask, None)?;
            let ds = season::build_feature_vectors(&stacks, &labels, &mask, &w.window, &spec).stage(S)?;
            let ds = FeatureDataset { feature_names: spec.feature_names(), ..ds };
            datasets.entry(&u.country).or_default().extend(ds);
            windows.push(w);
        }
    }
    fs::create_dir_all(out.join("features")).stage(S)?;
    for (country, ds) in &datasets {
        season::write_dataset(ds, &labelled_path(&out, country)).stage(S)?;
    }
    write_json(S, &windows, &out.join("features").join("windows.json"))?;
    Ok(windows)
}

/// Per-pixel series of a parameter over the history years, observations on
/// the target year truncated at `asof`.
fn pixel_histories(stacks: &[&TimeSeriesStack], mask: &CropMask, target_year: i32, asof: u32) -> (Vec<usize>, Vec<Vec<Observation>>) {
    let cells: Vec<usize> = mask.cells.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
    let histories = cells
        .iter()
        .map(|&cell| {
            let mut h = Vec::new();
            for s in stacks {
                for (k, f) in s.frames.iter().enumerate() {
                    let doy = s.day_of_year(k);
                    if s.year == target_year && doy > asof {
                        continue;
                    }
                    let v = f.values[cell];
                    if !f.is_nodata(v) {
                        h.push(Observation { year: s.year, doy, value: v });
                    }
                }
            }
            h
        })
        .collect();
    (cells, histories)
}

/// Target-year stack: observed frames up to `asof`, forecasts afterwards up
/// to the window end.
fn filled_stack(observed: &TimeSeriesStack, asof: u32, end_day: u32, forecasts: &BTreeMap<u32, GridRaster>) -> TimeSeriesStack {
    let mut frames = Vec::new();
    for (k, f) in observed.frames.iter().enumerate() {
        let doy = observed.day_of_year(k);
        if doy > end_day.max(asof) {
            break;
        }
        frames.push(if doy <= asof { f.clone() } else { forecasts.get(&doy).cloned().unwrap_or_else(|| f.clone()) });
    }
    TimeSeriesStack { frames, ..observed.clone() }
}

/// Forecast each parameter past the as-of day and build target-year features.
pub fn stage_forecast_features(cfg: &PipelineConfig) -> Result<Vec<WindowRecord>> {
    const S: &str = "forecast-features";
    let out = cfg.out_dir();
    let lay = load_layout(cfg, S)?;
    let calendar = calendar_for(cfg, S)?;
    let spec = cfg.feature_spec();
    let target = cfg.years.target;
    let asof = cfg.years.asof_doy;
    let years = cfg.stack_years();

    let mut all: BTreeMap<Parameter, Vec<TimeSeriesStack>> = BTreeMap::new();
    for p in Parameter::INPUTS {
        for &y in &years {
            all.entry(p).or_default().push(load_stack(cfg, S, p, y, &lay.geo)?);
        }
    }
    let target_stack = |p: Parameter| all[&p].iter().find(|s| s.year == target).expect("target year loaded");

    // forecast rasters per (parameter, doy), merged over countries
    let nodata = raster::DEFAULT_NODATA;
    let mut merged: BTreeMap<(Parameter, u32), GridRaster> = BTreeMap::new();
    let mut windows = Vec::new();
    fs::create_dir_all(out.join("features")).stage(S)?;
    for u in lay.countries.iter().filter(|u| u.crop_pixels > 0) {
        let mask = u.mask(&lay.crop, &lay.zones);
        let w = window_for(cfg, S, &calendar, u, target_stack(Parameter::Ndvi), &mask, Some(asof))?;
        let mut filled = BTreeMap::new();
        for p in Parameter::INPUTS {
            let observed = target_stack(p);
            let stacks: Vec<&TimeSeriesStack> = all[&p].iter().collect();
            let last_obs = observed.days().into_iter().filter(|d| *d <= asof).max().unwrap_or(0);
            let horizon = w.window.end_day.saturating_sub(last_obs);
            let grid = SlotGrid::new(observed.start_day_of_year, observed.cadence_days);
            let (cells, histories) = pixel_histories(&stacks, &mask, target, asof);
            let label = format!("forecast/{}/{}", u.country, p.as_str());
            let fc = if cfg.forecast.pooled {
                forest::forecast_pooled(&histories, &grid, horizon, &cfg.forecast.forest, cfg.stage_seed(&label))
                    .map_err(|e| PipelineError::data(S, format!("{} {p}: {e}", u.country)))?
            } else {
                histories
                    .iter()
                    .zip(&cells)
                    .map(|(h, cell)| {
                        let seed = cfg.stage_seed(&format!("{label}/{cell}"));
                        forest::forecast_series(h, &grid, horizon, &cfg.forecast.forest, seed)
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| PipelineError::data(S, format!("{} {p}: {e}", u.country)))?
            };
            let mut frames: BTreeMap<u32, GridRaster> = BTreeMap::new();
            for (cell, steps) in cells.iter().zip(&fc) {
                for o in steps.iter().filter(|o| o.year == target) {
                    let r = frames.entry(o.doy).or_insert_with(|| observed.frames[0].clone());
                    r.values[*cell] = o.value;
                    let m = merged
                        .entry((p, o.doy))
                        .or_insert_with(|| GridRaster::filled(lay.geo, nodata, nodata, p.units()));
                    m.values[*cell] = o.value;
                }
            }
            filled.insert(p, filled_stack(observed, asof, w.window.end_day, &frames));
        }
        let ds = season::build_unlabelled_features(&filled, &mask, &w.window, &spec).stage(S)?;
        let ds = FeatureDataset { feature_names: spec.feature_names(), ..ds };
        season::write_dataset(&ds, &target_path(&out, &u.country)).stage(S)?;
        windows.push(w);
    }
    let fdir = out.join("forecast");
    fs::create_dir_all(&fdir).stage(S)?;
    for ((p, doy), r) in &merged {
        let meta = LayerMeta { parameter: p.as_str().into(), year: Some(target), day_of_year: Some(*doy) };
        io::write_layer(r, &meta, &TimeSeriesStack::frame_path(&fdir, *p, target, *doy)).stage(S)?;
    }
    write_json(S, &windows, &fdir.join("windows.json"))?;
    Ok(windows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test: Option<mlp::Evaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub models: Vec<ModelMetrics>,
    /// Over every model's held-out test rows together.
    pub heldout_r2: Option<f64>,
    pub heldout_rmse_t: Option<f64>,
    pub heldout_n: usize,
    pub mean_test_rmse_z: Option<f64>,
}

pub fn stage_train(cfg: &PipelineConfig) -> Result<TrainingMetrics> {
    const S: &str = "train";
    let out = cfg.out_dir();
    let lay = load_layout(cfg, S)?;
    let mut groups: Vec<(String, FeatureDataset)> = Vec::new();
    for u in lay.countries.iter().filter(|u| u.crop_pixels > 0) {
        let ds = season::read_dataset(&labelled_path(&out, &u.country)).map_err(|e| {
            PipelineError::data(S, format!("{}: {e} (run the features stage first)", u.country))
        })?;
        if cfg.model.per_country {
            groups.push((u.country.clone(), ds));
        } else {
            match groups.first_mut() {
                Some((_, all)) => all.extend(ds),
                None => groups.push((POOLED_MODEL.to_string(), ds)),
            }
        }
    }
    let mut models = Vec::new();
    let (mut pred_all, mut y_all) = (Vec::new(), Vec::new());
    for (name, ds) in &groups {
        let split_seed = cfg.stage_seed(&format!("split/{name}"));
        let (train, val, test) = mlp::split_dataset(ds, &cfg.split.spec(split_seed)).stage(S)?;
        let model = mlp::train_mlp(&train, &val, &cfg.model.hyper, cfg.stage_seed(&format!("train/{name}")))
            .map_err(|e| {
                let mut err = Err::<(), _>(e).stage(S).unwrap_err();
                err.message = format!("{name}: {}", err.message);
                err
            })?;
        let test_eval = if test.is_empty() { None } else { Some(mlp::evaluate(&model, &test).stage(S)?) };
        if !test.is_empty() {
            pred_all.extend(mlp::predict_batch(&model, &test.x).stage(S)?);
            y_all.extend(test.y.iter().copied());
        }
        log::info!("{name}: best epoch {} of {}", model.best_epoch, model.training_log.len());
        models.push(ModelMetrics {
            model: name.clone(),
            n_train: train.len(),
            n_val: val.len(),
            n_test: test.len(),
            best_epoch: model.best_epoch,
            epochs_run: model.training_log.len(),
            test: test_eval,
        });
        write_json(S, &model, &model_path(&out, name))?;
    }
    let rmse_z: Vec<f64> = models.iter().filter_map(|m| m.test.as_ref().map(|t| t.rmse_z)).collect();
    let metrics = TrainingMetrics {
        heldout_r2: mlp::r_squared(&pred_all, &y_all).ok(),
        heldout_rmse_t: mlp::rmse(&pred_all, &y_all).ok(),
        heldout_n: y_all.len(),
        mean_test_rmse_z: (!rmse_z.is_empty()).then(|| rmse_z.iter().sum::<f64>() / rmse_z.len() as f64),
        models,
    };
    write_json(S, &metrics, &out.join(METRICS_FILE))?;
    Ok(metrics)
}

pub fn stage_predict(cfg: &PipelineConfig) -> Result<GridRaster> {
    const S: &str = "predict";
    let out = cfg.out_dir();
    let lay = load_layout(cfg, S)?;
    let nodata = raster::DEFAULT_NODATA;
    let mut pred = GridRaster::filled(lay.geo, nodata, nodata, "t");
    for u in lay.countries.iter().filter(|u| u.crop_pixels > 0) {
        let name = if cfg.model.per_country { u.country.as_str() } else { POOLED_MODEL };
        let model: MlpModel = read_json(S, &model_path(&out, name))?;
        let ds = season::read_dataset(&target_path(&out, &u.country)).map_err(|e| {
            PipelineError::data(S, format!("{}: {e} (run the forecast-features stage first)", u.country))
        })?;
        let values = mlp::predict_batch(&model, &ds.x).stage(S)?;
        for ((r, c), v) in ds.pixel_index.iter().zip(values) {
            let i = lay.geo.index(*r, *c);
            pred.values[i] = v;
        }
    }
    let meta = LayerMeta { parameter: "PRODUCTION".into(), year: Some(cfg.years.target), day_of_year: None };
    io::write_layer(&pred, &meta, &out.join(PREDICTION_FILE)).stage(S)?;
    Ok(pred)
}

/// Country and region totals, rates, ratio map and its graymap rendering.
#[allow(clippy::too_many_arguments)]
pub fn write_report(
    stage: &str,
    pred: &GridRaster,
    baseline: &GridRaster,
    zones: &ZoneMap,
    names: &BTreeMap<u32, ZoneName>,
    regions: &BTreeMap<String, String>,
    crop: &str,
    out: &Path,
) -> Result<ForecastReport> {
    fs::create_dir_all(out).stage(stage)?;
    let pred_t = report::country_totals(pred, zones, names).stage(stage)?;
    let base_t = report::country_totals(baseline, zones, names).stage(stage)?;
    let rep = ForecastReport::from_totals(crop, &base_t, &pred_t, regions, "");
    report::emit_report(&rep, &out.join("report.csv")).stage(stage)?;
    let ratio = report::ratio_map(pred, baseline).stage(stage)?;
    io::write_layer(&ratio, &LayerMeta { parameter: "RATIO".into(), ..Default::default() }, &out.join("ratio.grdh")).stage(stage)?;
    report::write_pgm(&ratio, &out.join("ratio.pgm")).stage(stage)?;
    Ok(rep)
}

pub fn stage_report(cfg: &PipelineConfig) -> Result<ForecastReport> {
    const S: &str = "report";
    let out = cfg.out_dir();
    let lay = load_layout(cfg, S)?;
    let pred = io::read_grid(&out.join(PREDICTION_FILE)).stage(S)?;
    let baseline = load_production(cfg, S, cfg.years.baseline, &lay.geo)?;
    let baseline = raster::apply_mask(&baseline, &lay.crop).stage(S)?;
    let mut names = io::read_zone_names(&cfg.zone_names_path()).stage(S)?;
    let modelled: Vec<u32> = lay.countries.iter().flat_map(|u| u.zone_ids.iter().copied()).collect();
    names.retain(|id, _| modelled.contains(id));
    let zone_ids = lay.zones.zone_ids.iter().map(|z| if modelled.contains(z) { *z } else { 0 }).collect();
    let zones = ZoneMap::new(lay.geo, zone_ids).stage(S)?;
    let regions: BTreeMap<String, String> = lay.countries.iter().map(|u| (u.country.clone(), u.region.clone())).collect();
    write_report(S, &pred, &baseline, &zones, &names, &regions, &cfg.crop.name, &out)
}

pub fn run_stage(cfg: &PipelineConfig, stage: &str) -> Result<()> {
    match stage {
        "select-crops" => stage_select_crops(cfg).map(drop),
        "mask" => stage_mask(cfg).map(drop),
        "features" => stage_features(cfg).map(drop),
        "forecast-features" => stage_forecast_features(cfg).map(drop),
        "train" => stage_train(cfg).map(drop),
        "predict" => stage_predict(cfg).map(drop),
        "report" => stage_report(cfg).map(drop),
        other => Err(PipelineError::config("run", format!("unknown stage {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// SHA-256 of every file under `out` except the manifest itself, by path.
pub fn build_manifest(out: &Path) -> Result<Vec<ManifestEntry>> {
    fn walk(dir: &Path, acc: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, acc)?;
            } else {
                acc.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(out, &mut files).stage("manifest")?;
    let mut entries = Vec::new();
    for f in files {
        let rel: Vec<String> = f.strip_prefix(out).expect("walked under out").components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        let rel = rel.join("/");
        if rel == MANIFEST_FILE {
            continue;
        }
        let bytes = fs::read(&f).stage("manifest")?;
        entries.push(ManifestEntry { path: rel, sha256: hex::encode(Sha256::digest(&bytes)), bytes: bytes.len() as u64 });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(entries)
}

pub fn write_manifest(out: &Path) -> Result<Vec<ManifestEntry>> {
    let entries = build_manifest(out)?;
    write_json("manifest", &entries, &out.join(MANIFEST_FILE))?;
    Ok(entries)
}

/// Validate, run every stage in order and write the manifest.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Vec<ManifestEntry>> {
    for stage in STAGES {
        log::info!("stage {stage}");
        run_stage(cfg, stage)?;
    }
    write_manifest(&cfg.out_dir())
}

/// Pipeline configuration for a scene written by [`synth::write_scene`] under `scene_dir`.
pub fn config_for_scene(scene: &synth::SynthConfig, scene_dir: &Path, out: &Path) -> PipelineConfig {
    let f = synth::SceneFiles::under(scene_dir);
    let years: Vec<i32> = scene.years().collect();
    let target = *years.last().expect("at least one year");
    let label: Vec<i32> = years[..years.len() - 1].to_vec();
    PipelineConfig {
        seed: scene.seed,
        paths: Paths {
            stacks: f.stacks,
            production: f.production,
            zones: f.zones,
            zone_names: Some(f.zone_names),
            balances: f.balances,
            regions: Some(f.regions),
            calendar: f.calendar,
            out: out.to_path_buf(),
        },
        crop: CropConfig { name: synth::SYNTH_CROP.into(), countries: Vec::new(), mask_threshold: 0.0 },
        years: YearsConfig { baseline: *label.last().unwrap_or(&target), label, target, asof_doy: 200 },
        grid: GridConfig::default(),
        features: FeaturesConfig::default(),
        forecast: ForecastConfig::default(),
        model: ModelConfig { hyper: scene_hyper(), per_country: true },
        split: SplitConfig::default(),
        base_dir: PathBuf::new(),
    }
}

/// Network settings used for synthetic scenes, sized for their few hundred samples.
pub fn scene_hyper() -> MlpHyper {
    MlpHyper { learning_rate: 0.01, batch_size: 16, max_epochs: 2000, patience: 100, ..MlpHyper::default() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("Country A"), "country_a");
        assert_eq!(slug("Côte d'Ivoire"), "c_te_d_ivoire");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::config("x", "m").exit_code(), 1);
        assert_eq!(PipelineError::data("x", "m").exit_code(), 2);
        let e = Err::<(), _>(ModelError::DivergenceDetected { epoch: 3 }).stage("train").unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert_eq!(e.to_string(), "train: training diverged at epoch 3: loss is not finite");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = config_for_scene(&synth::SynthConfig::default(), Path::new("scene"), Path::new("out"));
        let text = toml::to_string(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.years.label, vec![2018, 2019]);
        assert_eq!(cfg.years.baseline, 2019);
    }

    #[test]
    fn missing_config_is_config_error() {
        let e = PipelineConfig::load(Path::new("/nonexistent/pipeline.toml")).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert_eq!(validate_config(Path::new("/nonexistent/pipeline.toml")).len(), 1);
    }
}
