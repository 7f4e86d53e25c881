//! On-disk formats.
//!
//! A raster layer is a pair of files sharing a stem: `<stem>.grdh`, a JSON
//! header, and `<stem>.grd`, the row-major cell values as 32-bit little-endian
//! floats. Stacks are directories of such pairs named
//! `<PARAMETER>_<year>_<doy>.grdh`. Tabular inputs are UTF-8 CSV with a header row.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{GridGeometry, GridRaster, RasterError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("payload {path} holds {actual} bytes, header implies {expected}")]
    HeaderMismatch { path: PathBuf, expected: usize, actual: usize },
    #[error("negative quantity for {country}/{commodity}: {value}")]
    NegativeQuantity { country: String, commodity: String, value: f64 },
    #[error("value {0} cannot be stored as a 32-bit float")]
    ValueOutOfRange(f64),
    #[error("stack {0} has non-uniform frame spacing")]
    NonUniformCadence(String),
    #[error("stack frames have differing grids")]
    StackGridMismatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, IngestError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

/// Biogeophysical layers handled by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Parameter {
    #[serde(rename = "NDVI")]
    Ndvi,
    #[serde(rename = "LST_DAY")]
    LstDay,
    #[serde(rename = "RAIN")]
    Rain,
    #[serde(rename = "ET")]
    Et,
    #[serde(rename = "PRODUCTION")]
    Production,
}

impl Parameter {
    /// Model inputs in canonical feature order.
    pub const INPUTS: [Parameter; 4] = [Parameter::Ndvi, Parameter::LstDay, Parameter::Rain, Parameter::Et];

    pub fn as_str(&self) -> &'static str {
        match self {
            Parameter::Ndvi => "NDVI",
            Parameter::LstDay => "LST_DAY",
            Parameter::Rain => "RAIN",
            Parameter::Et => "ET",
            Parameter::Production => "PRODUCTION",
        }
    }

    /// Compositing period of the source product in days.
    pub fn native_cadence_days(&self) -> Option<u32> {
        match self {
            Parameter::Ndvi => Some(16),
            Parameter::LstDay => Some(8),
            Parameter::Rain => Some(30),
            Parameter::Et => Some(8),
            Parameter::Production => None,
        }
    }

    /// Native cell size of the source product in kilometres.
    pub fn native_resolution_km(&self) -> f64 {
        match self {
            Parameter::Ndvi | Parameter::LstDay => 1.0,
            Parameter::Rain => 5.55,
            Parameter::Et => 0.5,
            Parameter::Production => 10.0,
        }
    }

    pub fn units(&self) -> &'static str {
        match self {
            Parameter::Ndvi => "ndvi",
            Parameter::LstDay => "K",
            Parameter::Rain => "mm",
            Parameter::Et => "kg/m2/8day",
            Parameter::Production => "t",
        }
    }

    /// Lower-case prefix used in feature names.
    pub fn feature_prefix(&self) -> &'static str {
        match self {
            Parameter::Ndvi => "ndvi",
            Parameter::LstDay => "lst",
            Parameter::Rain => "rain",
            Parameter::Et => "et",
            Parameter::Production => "production",
        }
    }
}

impl fmt::Display for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Parameter {
    type Err = IngestError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NDVI" => Ok(Parameter::Ndvi),
            "LST_DAY" => Ok(Parameter::LstDay),
            "RAIN" => Ok(Parameter::Rain),
            "ET" => Ok(Parameter::Et),
            "PRODUCTION" => Ok(Parameter::Production),
            other => Err(IngestError::Parse(format!("unknown parameter '{other}'"))),
        }
    }
}

/// JSON header of a `.grd` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_size_deg: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub nodata: f64,
    pub units: String,
    pub parameter: String,
    pub year: Option<i32>,
    pub day_of_year: Option<u32>,
}

/// Descriptive fields of a layer beyond its georeferencing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerMeta {
    pub parameter: String,
    pub year: Option<i32>,
    pub day_of_year: Option<u32>,
}

impl GridHeader {
    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            origin_lat: self.origin_lat,
            origin_lon: self.origin_lon,
            cell_size_deg: self.cell_size_deg,
            n_rows: self.n_rows,
            n_cols: self.n_cols,
        }
    }
}

pub fn header_path(path: &Path) -> PathBuf {
    path.with_extension("grdh")
}

pub fn payload_path(path: &Path) -> PathBuf {
    path.with_extension("grd")
}

/// Read a layer given its header (or payload) path.
pub fn read_grid(path: &Path) -> Result<GridRaster> {
    read_layer(path).map(|(r, _)| r)
}

pub fn read_header(path: &Path) -> Result<GridHeader> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(io_err(&hp))?;
    serde_json::from_str(&text).map_err(|e| IngestError::Parse(format!("{}: {e}", hp.display())))
}

pub fn read_layer(path: &Path) -> Result<(GridRaster, LayerMeta)> {
    let header = read_header(path)?;
    let geometry = header.geometry();
    geometry.validate()?;
    let pp = payload_path(path);
    let bytes = fs::read(&pp).map_err(io_err(&pp))?;
    let expected = geometry.len() * 4;
    if bytes.len() != expected {
        return Err(IngestError::HeaderMismatch { path: pp, expected, actual: bytes.len() });
    }
    let nodata32 = header.nodata as f32;
    let values = bytes
        .chunks_exact(4)
        .map(|b| {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if v == nodata32 {
                header.nodata
            } else {
                v as f64
            }
        })
        .collect();
    let raster = GridRaster::new(geometry, header.nodata, values, header.units.clone())?;
    let meta = LayerMeta { parameter: header.parameter, year: header.year, day_of_year: header.day_of_year };
    Ok((raster, meta))
}

/// Write a layer without descriptive metadata.
pub fn write_grid(r: &GridRaster, path: &Path) -> Result<()> {
    write_layer(r, &LayerMeta::default(), path)
}

/// Encode values as 32-bit little-endian floats.
pub fn encode_payload(r: &GridRaster) -> Result<Vec<u8>> {
    if !r.nodata.is_finite() || (r.nodata as f32) as f64 != r.nodata {
        return Err(IngestError::ValueOutOfRange(r.nodata));
    }
    let mut bytes = Vec::with_capacity(r.values.len() * 4);
    for v in &r.values {
        let v32 = *v as f32;
        if !v32.is_finite() {
            return Err(IngestError::ValueOutOfRange(*v));
        }
        bytes.extend_from_slice(&v32.to_le_bytes());
    }
    Ok(bytes)
}

pub fn write_layer(r: &GridRaster, meta: &LayerMeta, path: &Path) -> Result<()> {
    r.validate()?;
    let g = r.geometry;
    let header = GridHeader {
        origin_lat: g.origin_lat,
        origin_lon: g.origin_lon,
        cell_size_deg: g.cell_size_deg,
        n_rows: g.n_rows,
        n_cols: g.n_cols,
        nodata: r.nodata,
        units: r.units.clone(),
        parameter: meta.parameter.clone(),
        year: meta.year,
        day_of_year: meta.day_of_year,
    };
    let payload = encode_payload(r)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let hp = header_path(path);
    let mut text = serde_json::to_string_pretty(&header).map_err(|e| IngestError::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(&hp, text).map_err(io_err(&hp))?;
    let pp = payload_path(path);
    fs::write(&pp, payload).map_err(io_err(&pp))?;
    Ok(())
}

/// One year of co-registered frames for a parameter at a fixed cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesStack {
    pub parameter: Parameter,
    pub cadence_days: u32,
    pub start_day_of_year: u32,
    pub year: i32,
    pub frames: Vec<GridRaster>,
}

impl TimeSeriesStack {
    pub fn validate(&self) -> Result<()> {
        if self.cadence_days == 0 {
            return Err(IngestError::NonUniformCadence(format!("{} {}: zero cadence", self.parameter, self.year)));
        }
        if let Some(first) = self.frames.first() {
            if self.frames.iter().any(|f| f.geometry != first.geometry) {
                return Err(IngestError::StackGridMismatch);
            }
        }
        Ok(())
    }

    pub fn day_of_year(&self, frame: usize) -> u32 {
        self.start_day_of_year + frame as u32 * self.cadence_days
    }

    pub fn days(&self) -> Vec<u32> {
        (0..self.frames.len()).map(|i| self.day_of_year(i)).collect()
    }

    pub fn geometry(&self) -> Option<GridGeometry> {
        self.frames.first().map(|f| f.geometry)
    }

    pub fn frame_path(dir: &Path, parameter: Parameter, year: i32, doy: u32) -> PathBuf {
        dir.join(format!("{}_{}_{:03}.grdh", parameter.as_str(), year, doy))
    }
}

pub fn write_stack(stack: &TimeSeriesStack, dir: &Path) -> Result<Vec<PathBuf>> {
    stack.validate()?;
    let mut written = Vec::with_capacity(stack.frames.len());
    for (i, frame) in stack.frames.iter().enumerate() {
        let doy = stack.day_of_year(i);
        let meta = LayerMeta {
            parameter: stack.parameter.as_str().to_string(),
            year: Some(stack.year),
            day_of_year: Some(doy),
        };
        let path = TimeSeriesStack::frame_path(dir, stack.parameter, stack.year, doy);
        write_layer(frame, &meta, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Header paths of every layer in `dir`, sorted by file name.
pub fn list_headers(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "grdh"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Frames of a stack directory: (parameter, year) → [(doy, header path)].
pub type StackIndex = BTreeMap<(Parameter, i32), Vec<(u32, PathBuf)>>;

/// Index of the frames in a stack directory.
pub fn index_stack_dir(dir: &Path) -> Result<StackIndex> {
    let mut index = StackIndex::new();
    for path in list_headers(dir)? {
        let header = read_header(&path)?;
        let Ok(parameter) = header.parameter.parse::<Parameter>() else {
            log::debug!("skipping {} (parameter '{}')", path.display(), header.parameter);
            continue;
        };
        let (Some(year), Some(doy)) = (header.year, header.day_of_year) else {
            return Err(IngestError::Parse(format!("{}: stack frames need year and day_of_year", path.display())));
        };
        index.entry((parameter, year)).or_default().push((doy, path));
    }
    for frames in index.values_mut() {
        frames.sort();
    }
    Ok(index)
}

/// Cadence implied by a sorted list of frame days.
pub fn infer_cadence(parameter: Parameter, year: i32, days: &[u32]) -> Result<u32> {
    if days.len() < 2 {
        return Ok(parameter.native_cadence_days().unwrap_or(365));
    }
    let step = days[1] - days[0];
    if step == 0 || days.windows(2).any(|w| w[1] - w[0] != step) {
        return Err(IngestError::NonUniformCadence(format!("{parameter} {year}")));
    }
    Ok(step)
}

/// Load one (parameter, year) stack from a directory, transforming each frame
/// as it is read (e.g. resampling to the analysis grid).
pub fn read_stack_with<F>(dir: &Path, parameter: Parameter, year: i32, mut transform: F) -> Result<TimeSeriesStack>
where
    F: FnMut(GridRaster) -> Result<GridRaster>,
{
    let index = index_stack_dir(dir)?;
    let frames = index
        .get(&(parameter, year))
        .ok_or_else(|| IngestError::Parse(format!("no {parameter} frames for {year} in {}", dir.display())))?;
    let days: Vec<u32> = frames.iter().map(|(d, _)| *d).collect();
    let cadence = infer_cadence(parameter, year, &days)?;
    let mut rasters = Vec::with_capacity(frames.len());
    for (_, path) in frames {
        rasters.push(transform(read_grid(path)?)?);
    }
    let stack = TimeSeriesStack { parameter, cadence_days: cadence, start_day_of_year: days[0], year, frames: rasters };
    stack.validate()?;
    Ok(stack)
}

pub fn read_stack(dir: &Path, parameter: Parameter, year: i32) -> Result<TimeSeriesStack> {
    read_stack_with(dir, parameter, year, Ok)
}

/// Mean production and domestic supply of a commodity in a country.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommodityBalance {
    pub country: String,
    pub commodity: String,
    pub production_t: f64,
    pub consumption_t: f64,
}

#[derive(Debug, Deserialize)]
struct BalanceRow {
    country: String,
    commodity: String,
    year: i32,
    production_t: f64,
    consumption_t: f64,
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IngestError + '_ {
    move |e| IngestError::Parse(format!("{}: {e}", path.display()))
}

/// Per-(country, commodity) means over the listed years, sorted by country then commodity.
pub fn read_commodity_table(path: &Path) -> Result<Vec<CommodityBalance>> {
    let mut rdr = csv_reader(path)?;
    let mut rows = Vec::new();
    for row in rdr.deserialize::<BalanceRow>() {
        rows.push(row.map_err(csv_err(path))?);
    }
    average_balances(rows.into_iter().map(|r| (r.country, r.commodity, r.year, r.production_t, r.consumption_t)))
}

/// Average yearly rows into balances. Sums run in (year, value) order so the
/// result does not depend on input row order.
pub fn average_balances<I>(rows: I) -> Result<Vec<CommodityBalance>>
where
    I: IntoIterator<Item = (String, String, i32, f64, f64)>,
{
    type YearRows = Vec<(i32, f64, f64)>;
    let mut groups: BTreeMap<(String, String), YearRows> = BTreeMap::new();
    for (country, commodity, year, prod, cons) in rows {
        for v in [prod, cons] {
            if !v.is_finite() {
                return Err(IngestError::Parse(format!("non-finite quantity for {country}/{commodity}")));
            }
            if v < 0.0 {
                return Err(IngestError::NegativeQuantity { country, commodity, value: v });
            }
        }
        groups.entry((country, commodity)).or_default().push((year, prod, cons));
    }
    Ok(groups
        .into_iter()
        .map(|((country, commodity), mut years)| {
            years.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)));
            let n = years.len() as f64;
            let production_t = years.iter().map(|y| y.1).sum::<f64>() / n;
            let consumption_t = years.iter().map(|y| y.2).sum::<f64>() / n;
            CommodityBalance { country, commodity, production_t, consumption_t }
        })
        .collect())
}

/// Inclusive day-of-year range; `end < start` wraps across the year end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayRange {
    pub start: u32,
    pub end: u32,
}

impl DayRange {
    pub fn new(start: u32, end: u32) -> Result<Self> {
        for d in [start, end] {
            if !(1..=366).contains(&d) {
                return Err(IngestError::Parse(format!("day of year {d} outside 1..=366")));
            }
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, doy: u32) -> bool {
        if self.start <= self.end {
            (self.start..=self.end).contains(&doy)
        } else {
            doy >= self.start || doy <= self.end
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropCalendarEntry {
    pub country: String,
    pub crop: String,
    pub sowing: DayRange,
    pub growing: DayRange,
    pub harvest: DayRange,
}

#[derive(Debug, Deserialize)]
struct CalendarRow {
    country: String,
    crop: String,
    sow_start: u32,
    sow_end: u32,
    grow_start: u32,
    grow_end: u32,
    harvest_start: u32,
    harvest_end: u32,
}

pub fn read_crop_calendar(path: &Path) -> Result<Vec<CropCalendarEntry>> {
    let mut rdr = csv_reader(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<CalendarRow>() {
        let r = row.map_err(csv_err(path))?;
        out.push(CropCalendarEntry {
            country: r.country,
            crop: r.crop,
            sowing: DayRange::new(r.sow_start, r.sow_end)?,
            growing: DayRange::new(r.grow_start, r.grow_end)?,
            harvest: DayRange::new(r.harvest_start, r.harvest_end)?,
        });
    }
    Ok(out)
}

pub fn write_crop_calendar(entries: &[CropCalendarEntry], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["country", "crop", "sow_start", "sow_end", "grow_start", "grow_end", "harvest_start", "harvest_end"])
        .map_err(csv_err(path))?;
    for e in entries {
        let days = [e.sowing.start, e.sowing.end, e.growing.start, e.growing.end, e.harvest.start, e.harvest.end];
        let mut rec = vec![e.country.clone(), e.crop.clone()];
        rec.extend(days.iter().map(|d| d.to_string()));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Country → region membership, as `country,region` rows.
pub fn read_regions(path: &Path) -> Result<BTreeMap<String, String>> {
    #[derive(Deserialize)]
    struct Row {
        country: String,
        region: String,
    }
    let mut rdr = csv_reader(path)?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize::<Row>() {
        let r = row.map_err(csv_err(path))?;
        out.insert(r.country, r.region);
    }
    Ok(out)
}

/// Zone id → (country, region), as `zone_id,country,region` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZoneName {
    pub country: String,
    pub region: String,
}

pub fn read_zone_names(path: &Path) -> Result<BTreeMap<u32, ZoneName>> {
    #[derive(Deserialize)]
    struct Row {
        zone_id: u32,
        country: String,
        region: String,
    }
    let mut rdr = csv_reader(path)?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize::<Row>() {
        let r = row.map_err(csv_err(path))?;
        if r.zone_id == 0 {
            return Err(IngestError::Parse(format!("{}: zone id 0 is reserved", path.display())));
        }
        out.insert(r.zone_id, ZoneName { country: r.country, region: r.region });
    }
    Ok(out)
}
