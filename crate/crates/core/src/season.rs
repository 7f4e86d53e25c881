//! Seasonal feature extraction: cadence alignment, green-up detection, season
//! windows and per-pixel feature vectors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{io_err, CropCalendarEntry, IngestError, Parameter, TimeSeriesStack};
use crate::raster::{CropMask, GridGeometry, GridRaster};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("stack has no frames")]
    EmptyStack,
    #[error("grid geometries differ")]
    GridMismatch,
    #[error("season window {start}..{end} contains no {parameter} frame")]
    EmptyWindow { parameter: Parameter, start: u32, end: u32 },
    #[error("no {0} stack supplied")]
    MissingParameter(Parameter),
    #[error("target cadence must be at least one day")]
    InvalidCadence,
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Linear-in-time interpolation of a stack onto arbitrary days. Days outside
/// the stack's range take the nearest end frame. A sample is nodata where
/// either bracketing frame is nodata.
pub fn align_to_days(stack: &TimeSeriesStack, days: &[u32]) -> Result<TimeSeriesStack> {
    let first = stack.frames.first().ok_or(FeatureError::EmptyStack)?;
    let src_days = stack.days();
    let nodata = first.nodata;
    let mut frames = Vec::with_capacity(days.len());
    for &d in days {
        let i = src_days.partition_point(|s| *s <= d);
        let frame = if i == 0 {
            stack.frames[0].clone()
        } else if i == src_days.len() || src_days[i - 1] == d {
            stack.frames[i - 1].clone()
        } else {
            let (d0, d1) = (src_days[i - 1] as f64, src_days[i] as f64);
            let w = (d as f64 - d0) / (d1 - d0);
            let (a, b) = (&stack.frames[i - 1], &stack.frames[i]);
            let values = a
                .values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| if a.is_nodata(*x) || b.is_nodata(*y) { nodata } else { (1.0 - w) * x + w * y })
                .collect();
            GridRaster { geometry: a.geometry, nodata, values, units: a.units.clone() }
        };
        frames.push(frame);
    }
    Ok(TimeSeriesStack {
        parameter: stack.parameter,
        cadence_days: if days.len() > 1 { days[1] - days[0] } else { stack.cadence_days },
        start_day_of_year: days.first().copied().unwrap_or(stack.start_day_of_year),
        year: stack.year,
        frames,
    })
}

/// Resample a stack in time onto a `target_cadence_days` grid starting at its
/// first frame and ending at or before its last.
pub fn align_cadence(stack: &TimeSeriesStack, target_cadence_days: u32) -> Result<TimeSeriesStack> {
    if target_cadence_days == 0 {
        return Err(FeatureError::InvalidCadence);
    }
    if stack.frames.is_empty() {
        return Err(FeatureError::EmptyStack);
    }
    let start = stack.start_day_of_year;
    let end = stack.day_of_year(stack.frames.len() - 1);
    let days: Vec<u32> = (start..=end).step_by(target_cadence_days as usize).collect();
    let mut out = align_to_days(stack, &days)?;
    out.cadence_days = target_cadence_days;
    Ok(out)
}

/// Onset rule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnsetRule {
    /// Fraction of the seasonal amplitude above base that marks green-up.
    pub fraction: f64,
    /// Seasons with a smaller NDVI amplitude have no onset.
    pub min_amplitude: f64,
}

impl Default for OnsetRule {
    fn default() -> Self {
        Self { fraction: 0.2, min_amplitude: 0.05 }
    }
}

/// First date at which NDVI rises through `base + fraction·(max − base)`,
/// where base is the mean of the two lowest values.
pub fn detect_greenness_onset(ndvi: &[f64], dates: &[u32]) -> Option<u32> {
    detect_onset_with(ndvi, dates, &OnsetRule::default())
}

pub fn detect_onset_with(ndvi: &[f64], dates: &[u32], rule: &OnsetRule) -> Option<u32> {
    if ndvi.len() < 3 || ndvi.len() != dates.len() {
        return None;
    }
    let mut sorted = ndvi.to_vec();
    sorted.sort_by(f64::total_cmp);
    let base = (sorted[0] + sorted[1]) / 2.0;
    let amplitude = sorted[sorted.len() - 1] - base;
    if amplitude < rule.min_amplitude {
        return None;
    }
    let threshold = base + rule.fraction * amplitude;
    (1..ndvi.len()).find(|&i| ndvi[i - 1] < threshold && ndvi[i] >= threshold).map(|i| dates[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSource {
    Calendar,
    DetectedOnset,
}

/// Days of the year over which seasonal aggregates are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonWindow {
    pub start_day: u32,
    pub end_day: u32,
    pub source: WindowSource,
}

impl SeasonWindow {
    pub fn contains(&self, doy: u32) -> bool {
        if self.start_day <= self.end_day {
            (self.start_day..=self.end_day).contains(&doy)
        } else {
            doy >= self.start_day || doy <= self.end_day
        }
    }
}

/// Window from sowing (or a later detected onset) to the start of harvest.
pub fn resolve_window(calendar: &CropCalendarEntry, onset: Option<u32>) -> SeasonWindow {
    let sow = calendar.sowing.start;
    match onset {
        Some(o) if o > sow => SeasonWindow { start_day: o, end_day: calendar.harvest.start, source: WindowSource::DetectedOnset },
        _ => SeasonWindow { start_day: sow, end_day: calendar.harvest.start, source: WindowSource::Calendar },
    }
}

/// Mean over masked pixels of each frame, skipping nodata; `None` for frames
/// with no valid masked pixel.
pub fn masked_mean_series(stack: &TimeSeriesStack, mask: &CropMask) -> Vec<Option<f64>> {
    stack
        .frames
        .iter()
        .map(|f| {
            let (mut s, mut n) = (0.0, 0usize);
            for (v, m) in f.values.iter().zip(&mask.cells) {
                if *m && !f.is_nodata(*v) {
                    s += v;
                    n += 1;
                }
            }
            (n > 0).then(|| s / n as f64)
        })
        .collect()
}

/// Green-up day of the masked-mean NDVI series, ignoring frames after `asof`.
pub fn regional_onset(ndvi: &TimeSeriesStack, mask: &CropMask, asof: Option<u32>, rule: &OnsetRule) -> Option<u32> {
    let (values, dates): (Vec<f64>, Vec<u32>) = masked_mean_series(ndvi, mask)
        .into_iter()
        .zip(ndvi.days())
        .filter(|(_, d)| asof.is_none_or(|a| *d <= a))
        .filter_map(|(v, d)| v.map(|v| (v, d)))
        .unzip();
    detect_onset_with(&values, &dates, rule)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Mean,
    Max,
    Sum,
    Min,
    Std,
}

impl Aggregate {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregate::Mean => "mean",
            Aggregate::Max => "max",
            Aggregate::Sum => "sum",
            Aggregate::Min => "min",
            Aggregate::Std => "std",
        }
    }

    fn apply(&self, xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let sum: f64 = xs.iter().sum();
        match self {
            Aggregate::Mean => sum / n,
            Aggregate::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregate::Sum => sum,
            Aggregate::Min => xs.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregate::Std => {
                let m = sum / n;
                (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub aggregates: Vec<Aggregate>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { aggregates: vec![Aggregate::Mean, Aggregate::Max, Aggregate::Sum] }
    }
}

impl FeatureSpec {
    /// `<parameter>_<aggregate>` for every input parameter and aggregate.
    pub fn feature_names(&self) -> Vec<String> {
        Parameter::INPUTS
            .iter()
            .flat_map(|p| self.aggregates.iter().map(move |a| format!("{}_{}", p.feature_prefix(), a.name())))
            .collect()
    }
}

/// Samples for the production model. `y` is NaN for rows built without labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureDataset {
    pub feature_names: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub pixel_index: Vec<(usize, usize)>,
}

impl FeatureDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> FeatureDataset {
        FeatureDataset {
            feature_names: self.feature_names.clone(),
            x: indices.iter().map(|i| self.x[*i].clone()).collect(),
            y: indices.iter().map(|i| self.y[*i]).collect(),
            pixel_index: indices.iter().map(|i| self.pixel_index[*i]).collect(),
        }
    }

    /// Append the rows of `other` (same feature names).
    pub fn extend(&mut self, other: FeatureDataset) {
        if self.feature_names.is_empty() {
            self.feature_names = other.feature_names;
        }
        self.x.extend(other.x);
        self.y.extend(other.y);
        self.pixel_index.extend(other.pixel_index);
    }
}

/// One sample per masked pixel with complete data: per input parameter, the
/// aggregates of its frames inside `window`, plus the production value.
pub fn build_feature_vectors(
    stacks: &BTreeMap<Parameter, TimeSeriesStack>,
    production: &GridRaster,
    mask: &CropMask,
    window: &SeasonWindow,
    spec: &FeatureSpec,
) -> Result<FeatureDataset> {
    assemble(stacks, Some(production), mask, window, spec)
}

/// As [`build_feature_vectors`] for a season with no production labels yet.
pub fn build_unlabelled_features(
    stacks: &BTreeMap<Parameter, TimeSeriesStack>,
    mask: &CropMask,
    window: &SeasonWindow,
    spec: &FeatureSpec,
) -> Result<FeatureDataset> {
    assemble(stacks, None, mask, window, spec)
}

fn assemble(
    stacks: &BTreeMap<Parameter, TimeSeriesStack>,
    production: Option<&GridRaster>,
    mask: &CropMask,
    window: &SeasonWindow,
    spec: &FeatureSpec,
) -> Result<FeatureDataset> {
    let geo: GridGeometry = mask.geometry;
    if production.is_some_and(|p| p.geometry != geo) {
        return Err(FeatureError::GridMismatch);
    }
    let mut selected: Vec<(&TimeSeriesStack, Vec<usize>)> = Vec::with_capacity(4);
    for p in Parameter::INPUTS {
        let stack = stacks.get(&p).ok_or(FeatureError::MissingParameter(p))?;
        if stack.frames.iter().any(|f| f.geometry != geo) {
            return Err(FeatureError::GridMismatch);
        }
        let frames: Vec<usize> = (0..stack.frames.len()).filter(|i| window.contains(stack.day_of_year(*i))).collect();
        if frames.is_empty() {
            return Err(FeatureError::EmptyWindow { parameter: p, start: window.start_day, end: window.end_day });
        }
        selected.push((stack, frames));
    }

    let rows: Vec<(Vec<f64>, f64, (usize, usize))> = (0..geo.len())
        .into_par_iter()
        .filter(|i| mask.cells[*i])
        .filter_map(|i| {
            let y = match production {
                Some(p) => {
                    let v = p.values[i];
                    if p.is_nodata(v) {
                        return None;
                    }
                    v
                }
                None => f64::NAN,
            };
            let mut features = Vec::with_capacity(4 * spec.aggregates.len());
            let mut series = Vec::new();
            for (stack, frames) in &selected {
                series.clear();
                for &f in frames {
                    let frame = &stack.frames[f];
                    let v = frame.values[i];
                    if frame.is_nodata(v) {
                        return None;
                    }
                    series.push(v);
                }
                features.extend(spec.aggregates.iter().map(|a| a.apply(&series)));
            }
            Some((features, y, (i / geo.n_cols, i % geo.n_cols)))
        })
        .collect();

    let mut ds = FeatureDataset { feature_names: spec.feature_names(), ..Default::default() };
    for (x, y, idx) in rows {
        ds.x.push(x);
        ds.y.push(y);
        ds.pixel_index.push(idx);
    }
    Ok(ds)
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// CSV with the feature names followed by `y,row,col`.
pub fn write_dataset(ds: &FeatureDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let mut header = ds.feature_names.clone();
    header.extend(["y".to_string(), "row".to_string(), "col".to_string()]);
    out.push_str(&header.join(","));
    out.push('\n');
    for ((x, y), (r, c)) in ds.x.iter().zip(&ds.y).zip(&ds.pixel_index) {
        let mut fields: Vec<String> = x.iter().map(|v| fmt_value(*v)).collect();
        fields.push(fmt_value(*y));
        fields.push(r.to_string());
        fields.push(c.to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<FeatureDataset> {
    let parse = |m: String| FeatureError::Ingest(IngestError::Parse(format!("{}: {m}", path.display())));
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers().map_err(|e| parse(e.to_string()))?.iter().map(String::from).collect();
    if header.len() < 3 || header[header.len() - 3..] != ["y", "row", "col"] {
        return Err(parse("dataset header must end with y,row,col".into()));
    }
    let d = header.len() - 3;
    let mut ds = FeatureDataset { feature_names: header[..d].to_vec(), ..Default::default() };
    let num = |s: &str| -> std::result::Result<f64, String> {
        if s.is_empty() {
            Ok(f64::NAN)
        } else {
            s.parse::<f64>().map_err(|e| format!("'{s}': {e}"))
        }
    };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse(e.to_string()))?;
        let x = (0..d).map(|j| num(&rec[j])).collect::<std::result::Result<Vec<_>, _>>().map_err(parse)?;
        ds.x.push(x);
        ds.y.push(num(&rec[d]).map_err(parse)?);
        let idx = |s: &str| s.parse::<usize>().map_err(|e| parse(format!("'{s}': {e}")));
        ds.pixel_index.push((idx(&rec[d + 1])?, idx(&rec[d + 2])?));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::DEFAULT_NODATA;
    use proptest::prelude::*;

    fn geo(rows: usize, cols: usize) -> GridGeometry {
        GridGeometry::new(0.0, 0.0, 0.1, rows, cols).unwrap()
    }

    fn stack(p: Parameter, cadence: u32, start: u32, frames: Vec<Vec<f64>>, g: GridGeometry) -> TimeSeriesStack {
        TimeSeriesStack {
            parameter: p,
            cadence_days: cadence,
            start_day_of_year: start,
            year: 2020,
            frames: frames.into_iter().map(|v| GridRaster::new(g, DEFAULT_NODATA, v, "").unwrap()).collect(),
        }
    }

    #[test]
    fn align_is_identity_at_native_cadence() {
        let s = stack(Parameter::Ndvi, 16, 1, vec![vec![0.1], vec![0.4], vec![0.3]], geo(1, 1));
        assert_eq!(align_cadence(&s, 16).unwrap(), s);
    }

    #[test]
    fn align_midpoint() {
        let s = stack(Parameter::Ndvi, 16, 1, vec![vec![0.0], vec![10.0]], geo(1, 1));
        let a = align_cadence(&s, 8).unwrap();
        assert_eq!(a.days(), vec![1, 9, 17]);
        assert_eq!(a.frames[1].values[0], 5.0);
    }

    #[test]
    fn align_propagates_nodata_and_clamps() {
        let s = stack(Parameter::Et, 10, 11, vec![vec![1.0, DEFAULT_NODATA], vec![3.0, 4.0]], geo(1, 2));
        let a = align_to_days(&s, &[1, 16, 21, 40]).unwrap();
        assert_eq!(a.frames[0].values, vec![1.0, DEFAULT_NODATA]);
        assert_eq!(a.frames[1].values, vec![2.0, DEFAULT_NODATA]);
        assert_eq!(a.frames[2].values, vec![3.0, 4.0]);
        assert_eq!(a.frames[3].values, vec![3.0, 4.0]);
        let empty = stack(Parameter::Et, 8, 1, vec![], geo(1, 1));
        assert!(matches!(align_cadence(&empty, 16), Err(FeatureError::EmptyStack)));
        assert!(matches!(align_cadence(&s, 0), Err(FeatureError::InvalidCadence)));
    }

    #[test]
    fn onset_examples() {
        assert_eq!(detect_greenness_onset(&[0.3; 6], &[1, 17, 33, 49, 65, 81]), None);
        assert_eq!(detect_greenness_onset(&[0.1, 0.1, 0.6, 0.6], &[1, 17, 33, 49]), Some(33));
        assert_eq!(detect_greenness_onset(&[0.1, 0.2], &[1, 17]), None);
        // amplitude below the minimum
        assert_eq!(detect_greenness_onset(&[0.30, 0.30, 0.34, 0.33], &[1, 2, 3, 4]), None);
    }

    #[test]
    fn window_resolution() {
        use crate::io::DayRange;
        let cal = CropCalendarEntry {
            country: "X".into(),
            crop: "Maize".into(),
            sowing: DayRange { start: 100, end: 140 },
            growing: DayRange { start: 140, end: 260 },
            harvest: DayRange { start: 275, end: 320 },
        };
        assert_eq!(resolve_window(&cal, None), SeasonWindow { start_day: 100, end_day: 275, source: WindowSource::Calendar });
        assert_eq!(resolve_window(&cal, Some(90)).start_day, 100);
        let w = resolve_window(&cal, Some(129));
        assert_eq!((w.start_day, w.source), (129, WindowSource::DetectedOnset));
        let wrap = SeasonWindow { start_day: 300, end_day: 40, source: WindowSource::Calendar };
        assert!(wrap.contains(350) && wrap.contains(10) && !wrap.contains(100));
    }

    fn constant_stacks(g: GridGeometry, c: f64, n: usize) -> BTreeMap<Parameter, TimeSeriesStack> {
        Parameter::INPUTS.iter().map(|p| (*p, stack(*p, 16, 1, vec![vec![c; g.len()]; n], g))).collect()
    }

    #[test]
    fn constant_stack_aggregates() {
        let g = geo(2, 2);
        let stacks = constant_stacks(g, 2.5, 6);
        let production = GridRaster::filled(g, 7.0, DEFAULT_NODATA, "t");
        let mask = CropMask::new(g, vec![false, true, false, false]).unwrap();
        // days 1,17,33,49,65,81 → window 17..=49 holds 3 frames
        let window = SeasonWindow { start_day: 17, end_day: 49, source: WindowSource::Calendar };
        let ds = build_feature_vectors(&stacks, &production, &mask, &window, &FeatureSpec::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.pixel_index, vec![(0, 1)]);
        assert_eq!(ds.y, vec![7.0]);
        assert_eq!(ds.x[0], [2.5, 2.5, 7.5].repeat(4));
        assert_eq!(ds.feature_names[0], "ndvi_mean");
        assert_eq!(ds.feature_names[11], "et_sum");
    }

    #[test]
    fn empty_mask_and_errors() {
        let g = geo(2, 2);
        let stacks = constant_stacks(g, 1.0, 3);
        let production = GridRaster::filled(g, 1.0, DEFAULT_NODATA, "t");
        let none = CropMask::new(g, vec![false; 4]).unwrap();
        let window = SeasonWindow { start_day: 1, end_day: 365, source: WindowSource::Calendar };
        let ds = build_feature_vectors(&stacks, &production, &none, &window, &FeatureSpec::default()).unwrap();
        assert!(ds.is_empty());

        let late = SeasonWindow { start_day: 200, end_day: 210, source: WindowSource::Calendar };
        let all = CropMask::new(g, vec![true; 4]).unwrap();
        assert!(matches!(
            build_feature_vectors(&stacks, &production, &all, &late, &FeatureSpec::default()),
            Err(FeatureError::EmptyWindow { .. })
        ));
        let other = GridRaster::filled(geo(3, 3), 1.0, DEFAULT_NODATA, "t");
        assert!(matches!(
            build_feature_vectors(&stacks, &other, &all, &window, &FeatureSpec::default()),
            Err(FeatureError::GridMismatch)
        ));
        let mut missing = stacks.clone();
        missing.remove(&Parameter::Rain);
        assert!(matches!(
            build_feature_vectors(&missing, &production, &all, &window, &FeatureSpec::default()),
            Err(FeatureError::MissingParameter(Parameter::Rain))
        ));
    }

    #[test]
    fn incomplete_pixels_are_skipped() {
        let g = geo(1, 2);
        let mut stacks = constant_stacks(g, 1.0, 3);
        stacks.get_mut(&Parameter::Et).unwrap().frames[1].values[0] = DEFAULT_NODATA;
        let production = GridRaster::new(g, DEFAULT_NODATA, vec![1.0, 2.0], "t").unwrap();
        let all = CropMask::new(g, vec![true; 2]).unwrap();
        let window = SeasonWindow { start_day: 1, end_day: 365, source: WindowSource::Calendar };
        let ds = build_feature_vectors(&stacks, &production, &all, &window, &FeatureSpec::default()).unwrap();
        assert_eq!(ds.pixel_index, vec![(0, 1)]);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let ds = FeatureDataset {
            feature_names: vec!["a".into(), "b".into()],
            x: vec![vec![0.1, 1e-17], vec![-3.25, 12345.678901234567]],
            y: vec![2.0, f64::NAN],
            pixel_index: vec![(0, 1), (4, 2)],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_dataset(&ds, &p).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y[0], 2.0);
        assert!(back.y[1].is_nan());
        assert_eq!(back.pixel_index, ds.pixel_index);
        assert_eq!(back.feature_names, ds.feature_names);
    }

    proptest! {
        #[test]
        fn onset_invariant_to_offset(vals in prop::collection::vec(0.0f64..0.9, 3..24), shift in -0.5f64..0.5) {
            let dates: Vec<u32> = (0..vals.len() as u32).map(|i| 1 + 16 * i).collect();
            let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
            prop_assert_eq!(detect_greenness_onset(&vals, &dates), detect_greenness_onset(&shifted, &dates));
        }

        #[test]
        fn sample_count_matches_complete_masked_pixels(bits in prop::collection::vec(any::<bool>(), 9), holes in prop::collection::vec(any::<bool>(), 9)) {
            let g = geo(3, 3);
            let mut stacks = constant_stacks(g, 1.0, 4);
            for (i, h) in holes.iter().enumerate() {
                if *h {
                    stacks.get_mut(&Parameter::LstDay).unwrap().frames[2].values[i] = DEFAULT_NODATA;
                }
            }
            let production = GridRaster::filled(g, 3.0, DEFAULT_NODATA, "t");
            let mask = CropMask::new(g, bits.clone()).unwrap();
            let window = SeasonWindow { start_day: 1, end_day: 365, source: WindowSource::Calendar };
            let ds = build_feature_vectors(&stacks, &production, &mask, &window, &FeatureSpec::default()).unwrap();
            let expected = bits.iter().zip(&holes).filter(|(b, h)| **b && !**h).count();
            prop_assert_eq!(ds.len(), expected);
        }

        #[test]
        fn frame_insertion_order_irrelevant(vals in prop::collection::vec(0.0f64..1.0, 5), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let g = geo(1, 1);
            let days: Vec<u32> = (0..5).map(|i| 1 + 16 * i).collect();
            let mut frames: Vec<(u32, f64)> = days.iter().copied().zip(vals.iter().copied()).collect();
            let reference = stack(Parameter::Ndvi, 16, 1, frames.iter().map(|f| vec![f.1]).collect(), g);
            frames.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            frames.sort_by_key(|f| f.0);
            let rebuilt = stack(Parameter::Ndvi, 16, 1, frames.iter().map(|f| vec![f.1]).collect(), g);
            prop_assert_eq!(align_cadence(&rebuilt, 8).unwrap(), align_cadence(&reference, 8).unwrap());
        }
    }
}
