//! Deterministic synthetic scenes standing in for satellite archives.
//!
//! Each pixel carries smooth latent fields (NDVI base and amplitude, green-up
//! day, temperature anomaly, rainfall amount) that vary across space and year.
//! Fine-grid layers are sampled from those fields at their own cell centres at
//! the native resolutions and cadences of the source products:
//!
//! | layer | cell | cadence |
//! |-------|------|---------|
//! | NDVI | 1 km | 16 days |
//! | LST_DAY | 1 km | 8 days |
//! | RAIN | 5.55 km | 30 days |
//! | ET | 0.5 km | 8 days |
//! | PRODUCTION | 10 km | yearly |
//!
//! Production at a 10 km pixel is [`production_function`] of that pixel's
//! seasonal latent values, plus Gaussian noise with standard deviation
//! `noise_sigma` times the spatial standard deviation of the noise-free
//! production for that year. Years are 365 days long.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::io::{
    self, CropCalendarEntry, DayRange, IngestError, LayerMeta, Parameter, Result, TimeSeriesStack,
};
use crate::raster::{GridGeometry, GridRaster, ZoneMap, DEFAULT_NODATA, DEG_PER_KM};
use crate::seed::rng_for;

/// Bounding box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub north: f64,
    pub south: f64,
    pub west: f64,
    pub east: f64,
}

/// Coefficients of the yield response to seasonal conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Coupling {
    pub intercept: f64,
    /// per unit of peak NDVI
    pub ndvi_peak: f64,
    /// per kelvin of seasonal temperature anomaly
    pub lst_anomaly: f64,
    /// per unit of ln(1 + rain/50)
    pub rain: f64,
    /// per unit of seasonal ET level
    pub et: f64,
    /// harvested hectares in a crop pixel
    pub harvested_ha: f64,
}

impl Default for Coupling {
    fn default() -> Self {
        Self { intercept: 0.2, ndvi_peak: 4.0, lst_anomaly: -0.08, rain: 0.8, et: 1.5, harvested_ha: 1500.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub extent: Extent,
    pub first_year: i32,
    pub last_year: i32,
    /// Production noise as a fraction of the noise-free spatial standard deviation.
    pub noise_sigma: f64,
    pub coupling: Coupling,
    pub n_countries: usize,
    /// Probability that a fine NDVI cell is cloud-masked (nodata).
    pub cloud_fraction: f64,
    /// Per-cell measurement noise on the fine layers.
    pub sensor_noise: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let cs = 10.0 * DEG_PER_KM;
        Self {
            seed: 42,
            extent: Extent { north: 10.0, south: 10.0 - 16.0 * cs, west: 0.0, east: 16.0 * cs },
            first_year: 2018,
            last_year: 2020,
            noise_sigma: 0.1,
            coupling: Coupling::default(),
            n_countries: 3,
            cloud_fraction: 0.02,
            sensor_noise: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.extent;
        let bad = |m: &str| Err(IngestError::InvalidConfig(m.to_string()));
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be >= 0");
        }
        if !(e.north > e.south && e.east > e.west) {
            return bad("extent must have north > south and east > west");
        }
        if self.first_year > self.last_year {
            return bad("first_year must not exceed last_year");
        }
        if !(0.0..1.0).contains(&self.cloud_fraction) {
            return bad("cloud_fraction must be in [0, 1)");
        }
        let g = self.production_geometry();
        if self.n_countries == 0 || self.n_countries > g.n_cols {
            return bad("n_countries must be between 1 and the number of production columns");
        }
        if self.coupling.harvested_ha <= 0.0 {
            return bad("harvested_ha must be positive");
        }
        Ok(())
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.first_year..=self.last_year
    }

    /// Grid of a layer at `km` resolution anchored at the extent's north-west corner.
    pub fn geometry_km(&self, km: f64) -> GridGeometry {
        let cs = km * DEG_PER_KM;
        let e = &self.extent;
        let rows = (((e.north - e.south) / cs) - 1e-9).ceil().max(1.0) as usize;
        let cols = (((e.east - e.west) / cs) - 1e-9).ceil().max(1.0) as usize;
        GridGeometry { origin_lat: e.north, origin_lon: e.west, cell_size_deg: cs, n_rows: rows, n_cols: cols }
    }

    pub fn production_geometry(&self) -> GridGeometry {
        self.geometry_km(Parameter::Production.native_resolution_km())
    }

    pub fn geometry_for(&self, parameter: Parameter) -> GridGeometry {
        self.geometry_km(parameter.native_resolution_km())
    }

    /// Frame days of a year's stack: `1, 1+c, ...` up to day 365.
    pub fn frame_days(parameter: Parameter) -> Vec<u32> {
        let c = parameter.native_cadence_days().unwrap_or(365);
        (0..).map(|i| 1 + i * c).take_while(|d| *d <= 365).collect()
    }
}

/// Smooth random field on normalised coordinates, bounded in [-1, 1].
#[derive(Debug, Clone)]
struct Field {
    waves: [(f64, f64, f64); 3],
}

impl Field {
    fn new(seed: u64, label: &str) -> Self {
        let mut rng = rng_for(seed, label);
        let mut wave = || {
            let k: f64 = rng.random_range(0.4..1.6);
            let angle: f64 = rng.random_range(0.0..2.0 * PI);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            (k * libm::cos(angle), k * libm::sin(angle), phase)
        };
        Self { waves: [wave(), wave(), wave()] }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.waves.iter().map(|(a, b, p)| libm::cos(2.0 * PI * (a * u + b * v) + p)).sum::<f64>() / 3.0
    }
}

/// Seasonal conditions of one location in one year.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeasonLatent {
    pub ndvi_base: f64,
    pub ndvi_amplitude: f64,
    pub onset_doy: f64,
    pub lst_anomaly: f64,
    pub rain_amount: f64,
    pub cropland: bool,
}

impl SeasonLatent {
    pub fn ndvi_peak(&self) -> f64 {
        self.ndvi_base + self.ndvi_amplitude
    }

    pub fn et_level(&self) -> f64 {
        self.ndvi_amplitude * (0.6 + 0.4 * (self.rain_amount / 100.0).min(1.5))
    }

    /// Fraction of full canopy at day `t`: a double logistic rising at the onset
    /// and falling 110 days later.
    pub fn greenness(&self, t: f64) -> f64 {
        logistic((t - self.onset_doy) / 8.0) - logistic((t - (self.onset_doy + 110.0)) / 10.0)
    }

    pub fn ndvi(&self, t: f64) -> f64 {
        self.ndvi_base + self.ndvi_amplitude * self.greenness(t)
    }

    pub fn lst(&self, t: f64) -> f64 {
        300.0 + 8.0 * libm::sin(2.0 * PI * (t - 80.0) / 365.0) + self.lst_anomaly - 6.0 * self.greenness(t)
    }

    /// Rain total over the 30 days starting at `t`.
    pub fn rain(&self, t: f64) -> f64 {
        let z = (t + 15.0 - (self.onset_doy + 20.0)) / 50.0;
        5.0 + self.rain_amount * libm::exp(-z * z)
    }

    pub fn et(&self, t: f64) -> f64 {
        5.0 + 30.0 * self.greenness(t) * (0.6 + 0.4 * (self.rain_amount / 100.0).min(1.5))
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Yield response (t/ha) times harvested area; zero outside cropland.
///
/// `yield = intercept + ndvi_peak·P + lst_anomaly·ΔT + rain·ln(1 + R/50) + et·E`,
/// floored at 0, where P is peak NDVI, ΔT the temperature anomaly, R the rain
/// amount and E the ET level.
pub fn production_function(c: &Coupling, s: &SeasonLatent) -> f64 {
    if !s.cropland {
        return 0.0;
    }
    let y = c.intercept
        + c.ndvi_peak * s.ndvi_peak()
        + c.lst_anomaly * s.lst_anomaly
        + c.rain * libm::log(1.0 + s.rain_amount / 50.0)
        + c.et * s.et_level();
    c.harvested_ha * y.max(0.0)
}

/// Latent-field sampler for a configuration.
pub struct LatentFields {
    extent: Extent,
    base: Field,
    cropland: Field,
    per_year: BTreeMap<i32, [Field; 4]>,
}

impl LatentFields {
    pub fn new(cfg: &SynthConfig) -> Self {
        let per_year = cfg
            .years()
            .map(|y| {
                let f = |name: &str| Field::new(cfg.seed, &format!("field/{name}/{y}"));
                (y, [f("amplitude"), f("onset"), f("lst"), f("rain")])
            })
            .collect();
        Self {
            extent: cfg.extent,
            base: Field::new(cfg.seed, "field/ndvi_base"),
            cropland: Field::new(cfg.seed, "field/cropland"),
            per_year,
        }
    }

    pub fn at(&self, year: i32, lat: f64, lon: f64) -> SeasonLatent {
        let e = &self.extent;
        let u = (lon - e.west) / (e.east - e.west);
        let v = (e.north - lat) / (e.north - e.south);
        let [amp, onset, lst, rain] = &self.per_year[&year];
        SeasonLatent {
            ndvi_base: 0.15 + 0.05 * self.base.at(u, v),
            ndvi_amplitude: 0.45 + 0.15 * amp.at(u, v),
            onset_doy: 125.0 + 15.0 * onset.at(u, v),
            lst_anomaly: 3.0 * lst.at(u, v),
            rain_amount: 60.0 + 40.0 * rain.at(u, v),
            cropland: self.cropland.at(u, v) > -0.55,
        }
    }
}

/// One year of a biogeophysical layer on its native grid.
pub fn generate_stack(cfg: &SynthConfig, fields: &LatentFields, parameter: Parameter, year: i32) -> Result<TimeSeriesStack> {
    if parameter == Parameter::Production {
        return Err(IngestError::InvalidConfig("production is generated per year, not as a stack".into()));
    }
    let geo = cfg.geometry_for(parameter);
    let latents: Vec<SeasonLatent> = (0..geo.n_rows)
        .flat_map(|r| (0..geo.n_cols).map(move |c| (r, c)))
        .map(|(r, c)| {
            let (lat, lon) = geo.cell_center(r, c);
            fields.at(year, lat, lon)
        })
        .collect();
    let days = SynthConfig::frame_days(parameter);
    let mut rng = rng_for(cfg.seed, &format!("noise/{parameter}/{year}"));
    let mut frames = Vec::with_capacity(days.len());
    for &day in &days {
        let t = day as f64;
        let mut values = Vec::with_capacity(latents.len());
        for s in &latents {
            let eps: f64 = if cfg.sensor_noise { rng.sample(StandardNormal) } else { 0.0 };
            let v = match parameter {
                Parameter::Ndvi => {
                    let cloudy = cfg.cloud_fraction > 0.0 && rng.random::<f64>() < cfg.cloud_fraction;
                    if cloudy {
                        DEFAULT_NODATA
                    } else {
                        (s.ndvi(t) + 0.01 * eps).clamp(-1.0, 1.0)
                    }
                }
                Parameter::LstDay => s.lst(t) + 0.5 * eps,
                Parameter::Rain => (s.rain(t) + 2.0 * eps).max(0.0),
                Parameter::Et => (s.et(t) + 0.5 * eps).max(0.0),
                Parameter::Production => unreachable!(),
            };
            values.push(v);
        }
        frames.push(GridRaster::new(geo, DEFAULT_NODATA, values, parameter.units())?);
    }
    Ok(TimeSeriesStack {
        parameter,
        cadence_days: parameter.native_cadence_days().unwrap_or(365),
        start_day_of_year: days[0],
        year,
        frames,
    })
}

/// Production raster for a year with the per-pixel latent values it was built from.
pub fn generate_production(cfg: &SynthConfig, fields: &LatentFields, year: i32) -> Result<(GridRaster, Vec<SeasonLatent>)> {
    let geo = cfg.production_geometry();
    let mut latents = Vec::with_capacity(geo.len());
    for r in 0..geo.n_rows {
        for c in 0..geo.n_cols {
            let (lat, lon) = geo.cell_center(r, c);
            latents.push(fields.at(year, lat, lon));
        }
    }
    let clean: Vec<f64> = latents.iter().map(|s| production_function(&cfg.coupling, s)).collect();
    let crop: Vec<f64> = clean.iter().zip(&latents).filter(|(_, s)| s.cropland).map(|(v, _)| *v).collect();
    let sd = if crop.len() > 1 {
        let mean = crop.iter().sum::<f64>() / crop.len() as f64;
        (crop.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / crop.len() as f64).sqrt()
    } else {
        0.0
    };
    let mut rng = rng_for(cfg.seed, &format!("noise/PRODUCTION/{year}"));
    let values = clean
        .iter()
        .zip(&latents)
        .map(|(v, s)| {
            let eps: f64 = rng.sample(StandardNormal);
            if s.cropland && cfg.noise_sigma > 0.0 {
                (v + cfg.noise_sigma * sd * eps).max(0.0)
            } else {
                *v
            }
        })
        .collect();
    Ok((GridRaster::new(geo, DEFAULT_NODATA, values, "t")?, latents))
}

/// Country zones as equal-width column stripes, ids `1..=n_countries`.
pub fn generate_zones(cfg: &SynthConfig) -> ZoneMap {
    let geo = cfg.production_geometry();
    let n = cfg.n_countries;
    let ids = (0..geo.n_rows)
        .flat_map(|_| (0..geo.n_cols).map(move |c| 1 + (c * n / geo.n_cols) as u32))
        .collect();
    ZoneMap { geometry: geo, zone_ids: ids }
}

pub fn country_name(index: usize) -> String {
    format!("Country {}", (b'A' + (index % 26) as u8) as char)
}

pub const SYNTH_REGION: &str = "Synthetic Region";
pub const SYNTH_CROP: &str = "Maize";

/// Planting calendar used for every synthetic country.
pub fn synthetic_calendar(cfg: &SynthConfig) -> Vec<CropCalendarEntry> {
    (0..cfg.n_countries)
        .map(|i| CropCalendarEntry {
            country: country_name(i),
            crop: SYNTH_CROP.to_string(),
            sowing: DayRange { start: 100, end: 140 },
            growing: DayRange { start: 140, end: 260 },
            harvest: DayRange { start: 275, end: 320 },
        })
        .collect()
}

/// Yearly commodity rows (2014–2018) for each synthetic country.
pub fn synthetic_balance_rows(cfg: &SynthConfig) -> Vec<(String, String, i32, f64, f64)> {
    const COMMODITIES: [(&str, f64, f64); 7] = [
        (SYNTH_CROP, 2.0e6, 1.15),
        ("Cassava", 1.6e6, 0.95),
        ("Sorghum", 9.0e5, 1.05),
        ("Rice", 4.0e5, 1.6),
        ("Beans", 3.0e5, 0.9),
        ("Yams", 2.5e5, 0.8),
        ("Groundnuts", 1.0e5, 0.7),
    ];
    let mut rng = rng_for(cfg.seed, "balances");
    let mut rows = Vec::new();
    for i in 0..cfg.n_countries {
        for (name, prod, ratio) in COMMODITIES {
            for year in 2014..=2018 {
                let jitter = 1.0 + rng.random_range(-0.05..0.05);
                let p = (prod * jitter).round();
                rows.push((country_name(i), name.to_string(), year, p, (p * ratio).round()));
            }
        }
    }
    rows
}

/// Everything the generator produces, in memory.
pub struct SyntheticScene {
    pub stacks: BTreeMap<(Parameter, i32), TimeSeriesStack>,
    pub production: BTreeMap<i32, GridRaster>,
    pub latents: BTreeMap<i32, Vec<SeasonLatent>>,
    pub zones: ZoneMap,
}

pub fn generate_synthetic_scene(cfg: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let fields = LatentFields::new(cfg);
    let mut stacks = BTreeMap::new();
    let mut production = BTreeMap::new();
    let mut latents = BTreeMap::new();
    for year in cfg.years() {
        for p in Parameter::INPUTS {
            stacks.insert((p, year), generate_stack(cfg, &fields, p, year)?);
        }
        let (r, l) = generate_production(cfg, &fields, year)?;
        production.insert(year, r);
        latents.insert(year, l);
    }
    Ok(SyntheticScene { stacks, production, latents, zones: generate_zones(cfg) })
}

/// Layout of a scene written to disk.
pub struct SceneFiles {
    pub stacks: PathBuf,
    pub production: PathBuf,
    pub zones: PathBuf,
    pub zone_names: PathBuf,
    pub balances: PathBuf,
    pub regions: PathBuf,
    pub calendar: PathBuf,
}

impl SceneFiles {
    pub fn under(dir: &Path) -> Self {
        Self {
            stacks: dir.join("stacks"),
            production: dir.join("production"),
            zones: dir.join("zones.grdh"),
            zone_names: dir.join("zones.csv"),
            balances: dir.join("balances.csv"),
            regions: dir.join("regions.csv"),
            calendar: dir.join("calendar.csv"),
        }
    }
}

pub fn production_path(dir: &Path, year: i32) -> PathBuf {
    dir.join(format!("PRODUCTION_{year}.grdh"))
}

/// Generate and write a scene one stack at a time.
pub fn write_scene(cfg: &SynthConfig, dir: &Path) -> Result<SceneFiles> {
    cfg.validate()?;
    let files = SceneFiles::under(dir);
    std::fs::create_dir_all(&files.stacks).map_err(io::io_err(&files.stacks))?;
    std::fs::create_dir_all(&files.production).map_err(io::io_err(&files.production))?;
    let fields = LatentFields::new(cfg);
    for year in cfg.years() {
        for p in Parameter::INPUTS {
            let stack = generate_stack(cfg, &fields, p, year)?;
            io::write_stack(&stack, &files.stacks)?;
        }
        let (r, _) = generate_production(cfg, &fields, year)?;
        let meta = LayerMeta { parameter: "PRODUCTION".into(), year: Some(year), day_of_year: None };
        io::write_layer(&r, &meta, &production_path(&files.production, year))?;
    }
    let zones = generate_zones(cfg);
    io::write_layer(&zones.to_raster(), &LayerMeta { parameter: "ZONES".into(), ..Default::default() }, &files.zones)?;

    let csv_err = |p: &Path, e: csv::Error| IngestError::Parse(format!("{}: {e}", p.display()));
    let mut w = csv::Writer::from_path(&files.zone_names).map_err(|e| csv_err(&files.zone_names, e))?;
    w.write_record(["zone_id", "country", "region"]).map_err(|e| csv_err(&files.zone_names, e))?;
    for i in 0..cfg.n_countries {
        w.write_record([(i + 1).to_string(), country_name(i), SYNTH_REGION.to_string()])
            .map_err(|e| csv_err(&files.zone_names, e))?;
    }
    w.flush().map_err(io::io_err(&files.zone_names))?;

    let mut w = csv::Writer::from_path(&files.regions).map_err(|e| csv_err(&files.regions, e))?;
    w.write_record(["country", "region"]).map_err(|e| csv_err(&files.regions, e))?;
    for i in 0..cfg.n_countries {
        w.write_record([country_name(i), SYNTH_REGION.to_string()]).map_err(|e| csv_err(&files.regions, e))?;
    }
    w.flush().map_err(io::io_err(&files.regions))?;

    let mut w = csv::Writer::from_path(&files.balances).map_err(|e| csv_err(&files.balances, e))?;
    w.write_record(["country", "commodity", "year", "production_t", "consumption_t"])
        .map_err(|e| csv_err(&files.balances, e))?;
    for (country, commodity, year, p, c) in synthetic_balance_rows(cfg) {
        w.write_record([country, commodity, year.to_string(), p.to_string(), c.to_string()])
            .map_err(|e| csv_err(&files.balances, e))?;
    }
    w.flush().map_err(io::io_err(&files.balances))?;

    io::write_crop_calendar(&synthetic_calendar(cfg), &files.calendar)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        let cs = 10.0 * DEG_PER_KM;
        SynthConfig {
            extent: Extent { north: 5.0, south: 5.0 - 3.0 * cs, west: 1.0, east: 1.0 + 3.0 * cs },
            first_year: 2019,
            last_year: 2020,
            n_countries: 2,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic_scene(&small()).unwrap();
        let b = generate_synthetic_scene(&small()).unwrap();
        assert_eq!(a.stacks, b.stacks);
        assert_eq!(a.production, b.production);
        let other = generate_synthetic_scene(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a.production, other.production);
    }

    #[test]
    fn noise_free_production_matches_function() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..small() };
        let scene = generate_synthetic_scene(&cfg).unwrap();
        for (year, raster) in &scene.production {
            for (v, s) in raster.values.iter().zip(&scene.latents[year]) {
                assert_eq!(*v, production_function(&cfg.coupling, s));
            }
        }
    }

    #[test]
    fn cadences_follow_source_products() {
        let scene = generate_synthetic_scene(&small()).unwrap();
        let cad = |p| scene.stacks[&(p, 2019)].cadence_days;
        assert_eq!(cad(Parameter::Ndvi), 16);
        assert_eq!(cad(Parameter::LstDay), 8);
        assert_eq!(cad(Parameter::Rain), 30);
        assert_eq!(cad(Parameter::Et), 8);
    }

    #[test]
    fn resolution_ratios() {
        let cfg = small();
        let prod = cfg.production_geometry();
        let ratio = |p: Parameter| prod.cell_size_deg / cfg.geometry_for(p).cell_size_deg;
        assert!((ratio(Parameter::Ndvi) - 10.0).abs() < 1e-9);
        assert!((ratio(Parameter::LstDay) - 10.0).abs() < 1e-9);
        assert!((ratio(Parameter::Et) - 20.0).abs() < 1e-9);
        assert!((ratio(Parameter::Rain) - 10.0 / 5.55).abs() < 1e-9);
        assert_eq!(cfg.geometry_for(Parameter::Ndvi).n_rows, prod.n_rows * 10);
        assert_eq!(cfg.geometry_for(Parameter::Et).n_cols, prod.n_cols * 20);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SynthConfig { noise_sigma: -1.0, ..small() }.validate().is_err());
        let mut c = small();
        c.extent.south = c.extent.north;
        assert!(c.validate().is_err());
        assert!(SynthConfig { first_year: 2021, ..small() }.validate().is_err());
        assert!(SynthConfig { n_countries: 0, ..small() }.validate().is_err());
    }

    #[test]
    fn zones_partition_columns() {
        let z = generate_zones(&SynthConfig { n_countries: 3, ..Default::default() });
        assert_eq!(z.ids(), vec![1, 2, 3]);
        assert_eq!(z.get(0, 0), 1);
        assert_eq!(z.get(0, z.geometry.n_cols - 1), 3);
    }
}
