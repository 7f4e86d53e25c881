//! Aggregation of predicted production to country and region totals, rates of
//! change against a baseline, ratio maps and the report table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::ZoneName;
use crate::raster::{zonal_sum, GridRaster, RasterError, ZoneMap};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("baseline total is zero")]
    ZeroBaseline,
    #[error("every total is zero")]
    AllZero,
    #[error("negative total {value} for {name}")]
    NegativeTotal { name: String, value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T> = std::result::Result<T, ReportError>;

/// Country label used for region-wide rows.
pub const ALL_COUNTRIES: &str = "ALL";

/// Percent change from `baseline_t` to `predicted_t`.
pub fn rate_of_change(baseline_t: f64, predicted_t: f64) -> Result<f64> {
    if baseline_t == 0.0 {
        return Err(ReportError::ZeroBaseline);
    }
    Ok(100.0 * (predicted_t - baseline_t) / baseline_t)
}

/// Rate rounded to two decimals with an explicit sign; zero prints as `0.00`.
pub fn format_rate(rate: f64) -> String {
    let r = (rate * 100.0).round() / 100.0;
    if r == 0.0 {
        "0.00".into()
    } else {
        format!("{r:+.2}")
    }
}

/// Sum of valid cells per country; zones sharing a country are added in id order.
/// Zones missing from `zone_names` are reported as `zone <id>`.
pub fn country_totals(pred: &GridRaster, zones: &ZoneMap, zone_names: &BTreeMap<u32, ZoneName>) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (id, total) in zonal_sum(pred, zones)? {
        let name = match zone_names.get(&id) {
            Some(z) => z.country.clone(),
            None => {
                log::warn!("zone {id} has no name");
                format!("zone {id}")
            }
        };
        *out.entry(name).or_insert(0.0) += total.sum;
    }
    Ok(out)
}

/// Cellwise `pred / baseline`; nodata where either is nodata or the baseline is not positive.
pub fn ratio_map(pred: &GridRaster, baseline: &GridRaster) -> Result<GridRaster> {
    pred.check_same_grid(&baseline.geometry)?;
    let nodata = pred.nodata;
    let values = pred
        .values
        .iter()
        .zip(&baseline.values)
        .map(|(&p, &b)| {
            if pred.is_nodata(p) || baseline.is_nodata(b) || b <= 0.0 {
                nodata
            } else {
                p / b
            }
        })
        .collect();
    Ok(GridRaster { geometry: pred.geometry, nodata, values, units: "ratio".into() })
}

/// Each entry's percent of the sum of all entries.
pub fn share_of_total(totals: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    if let Some((name, &value)) = totals.iter().find(|(_, v)| **v < 0.0 || !v.is_finite()) {
        return Err(ReportError::NegativeTotal { name: name.clone(), value });
    }
    let sum: f64 = totals.values().sum();
    if sum <= 0.0 {
        return Err(ReportError::AllZero);
    }
    Ok(totals.iter().map(|(k, v)| (k.clone(), 100.0 * v / sum)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub region: String,
    pub country: String,
    pub crop: String,
    pub baseline_t: f64,
    pub predicted_t: f64,
    /// Absent when the baseline is zero.
    pub rate_pct: Option<f64>,
}

impl ReportRow {
    pub fn new(region: &str, country: &str, crop: &str, baseline_t: f64, predicted_t: f64) -> Self {
        Self {
            region: region.into(),
            country: country.into(),
            crop: crop.into(),
            baseline_t,
            predicted_t,
            rate_pct: rate_of_change(baseline_t, predicted_t).ok(),
        }
    }

    fn key(&self) -> (&str, &str, &str) {
        (&self.region, &self.country, &self.crop)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ForecastReport {
    pub rows: Vec<ReportRow>,
}

impl ForecastReport {
    /// Per-country rows for `crop` plus one `ALL` row per region. Countries
    /// without a region entry fall under `default_region`.
    pub fn from_totals(
        crop: &str,
        baseline: &BTreeMap<String, f64>,
        predicted: &BTreeMap<String, f64>,
        regions: &BTreeMap<String, String>,
        default_region: &str,
    ) -> Self {
        let mut rows = Vec::new();
        let mut by_region: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
        let countries: std::collections::BTreeSet<&String> = baseline.keys().chain(predicted.keys()).collect();
        for c in countries {
            let region = regions.get(c).map_or(default_region, String::as_str);
            let b = baseline.get(c).copied().unwrap_or(0.0);
            let p = predicted.get(c).copied().unwrap_or(0.0);
            let e = by_region.entry(region).or_insert((0.0, 0.0));
            e.0 += b;
            e.1 += p;
            rows.push(ReportRow::new(region, c, crop, b, p));
        }
        for (region, (b, p)) in by_region {
            rows.push(ReportRow::new(region, ALL_COUNTRIES, crop, b, p));
        }
        let mut r = Self { rows };
        r.sort();
        r
    }

    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.key().cmp(&b.key()));
    }

    pub fn merge(&mut self, other: ForecastReport) {
        self.rows.extend(other.rows);
        self.sort();
    }
}

const HEADER: &str = "region,country,crop,baseline_t,predicted_t,rate_pct";

/// CSV text of the report, rows in (region, country, crop) order.
pub fn render_report(report: &ForecastReport) -> String {
    let mut rows: Vec<&ReportRow> = report.rows.iter().collect();
    rows.sort_by(|a, b| a.key().cmp(&b.key()));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER.split(',')).expect("in-memory write");
    for r in rows {
        let rate = r.rate_pct.map(format_rate).unwrap_or_default();
        w.write_record([
            r.region.as_str(),
            r.country.as_str(),
            r.crop.as_str(),
            &r.baseline_t.to_string(),
            &r.predicted_t.to_string(),
            &rate,
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn emit_report(report: &ForecastReport, path: &Path) -> Result<()> {
    fs::write(path, render_report(report)).map_err(|source| ReportError::Io { path: path.into(), source })
}

/// Read a report; rates are recomputed from the totals at full precision.
pub fn parse_report(path: &Path) -> Result<ForecastReport> {
    let perr = |message: String| ReportError::Parse { path: path.into(), message };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| perr(e.to_string()))?;
    let header = rdr.headers().map_err(|e| perr(e.to_string()))?.iter().collect::<Vec<_>>().join(",");
    if header != HEADER {
        return Err(perr(format!("unexpected header {header}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| perr(format!("{}: {e}", &rec[i])));
        rows.push(ReportRow::new(&rec[0], &rec[1], &rec[2], num(3)?, num(4)?));
    }
    Ok(ForecastReport { rows })
}

/// Plain (P2) graymap: ratios in `[0, 2]` map linearly onto gray `1..=255`,
/// values outside are clamped and nodata is 0.
pub fn render_pgm(r: &GridRaster) -> String {
    let g = &r.geometry;
    let mut s = format!("P2\n{} {}\n255\n", g.n_cols, g.n_rows);
    for row in 0..g.n_rows {
        let line: Vec<String> = (0..g.n_cols).map(|col| ratio_gray(r.valid(row, col)).to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn ratio_gray(v: Option<f64>) -> u8 {
    match v {
        None => 0,
        Some(v) if v.is_nan() => 0,
        Some(v) => 1 + (v.clamp(0.0, 2.0) / 2.0 * 254.0).round() as u8,
    }
}

pub fn write_pgm(r: &GridRaster, path: &Path) -> Result<()> {
    fs::write(path, render_pgm(r)).map_err(|source| ReportError::Io { path: path.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{GridGeometry, DEFAULT_NODATA};
    use proptest::prelude::*;

    fn grid(values: Vec<f64>, cols: usize) -> GridRaster {
        let rows = values.len() / cols;
        GridRaster::new(GridGeometry::new(1.0, 1.0, 0.1, rows, cols).unwrap(), DEFAULT_NODATA, values, "t").unwrap()
    }

    #[test]
    fn rates() {
        assert_eq!(rate_of_change(5.0, 5.0).unwrap(), 0.0);
        assert_eq!(format_rate(rate_of_change(5.0, 5.0).unwrap()), "0.00");
        assert_eq!(format_rate(-0.001), "0.00");
        assert_eq!(format_rate(4.2149), "+4.21");
        assert_eq!(format_rate(-12.151), "-12.15");
        assert!(matches!(rate_of_change(0.0, 3.0), Err(ReportError::ZeroBaseline)));
    }

    #[test]
    fn totals_by_country() {
        let pred = grid(vec![1.0, 2.0, 3.0, DEFAULT_NODATA, 5.0, 6.0], 3);
        let zones = ZoneMap::new(pred.geometry, vec![1, 1, 2, 2, 3, 0]).unwrap();
        let names: BTreeMap<u32, ZoneName> = [
            (1, ZoneName { country: "A".into(), region: "R".into() }),
            (2, ZoneName { country: "B".into(), region: "R".into() }),
            (3, ZoneName { country: "A".into(), region: "R".into() }),
        ]
        .into();
        let t = country_totals(&pred, &zones, &names).unwrap();
        assert_eq!(t["A"], 8.0);
        assert_eq!(t["B"], 3.0);
        let whole = ZoneMap::new(pred.geometry, vec![7; 6]).unwrap();
        assert_eq!(country_totals(&pred, &whole, &BTreeMap::new()).unwrap()["zone 7"], 17.0);
    }

    #[test]
    fn ratio_guards() {
        let p = grid(vec![2.0, 3.0, DEFAULT_NODATA, 1.0], 2);
        let b = grid(vec![1.0, 0.0, 1.0, DEFAULT_NODATA], 2);
        let r = ratio_map(&p, &b).unwrap();
        assert_eq!(r.values, vec![2.0, DEFAULT_NODATA, DEFAULT_NODATA, DEFAULT_NODATA]);
        let same = ratio_map(&b, &grid(vec![1.0, 5.0, 1.0, 2.0], 2));
        assert!(same.is_ok());
        assert!(ratio_map(&p, &grid(vec![1.0; 6], 3)).is_err());
    }

    #[test]
    fn shares() {
        let single: BTreeMap<String, f64> = [("X".to_string(), 4.0)].into();
        assert_eq!(share_of_total(&single).unwrap()["X"], 100.0);
        let zero: BTreeMap<String, f64> = [("X".to_string(), 0.0), ("Y".to_string(), 0.0)].into();
        assert!(matches!(share_of_total(&zero), Err(ReportError::AllZero)));
    }

    #[test]
    fn report_round_trip_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        emit_report(&ForecastReport::default(), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), format!("{HEADER}\n"));

        let base: BTreeMap<String, f64> = [("B".to_string(), 10.0), ("A".to_string(), 0.0)].into();
        let pred: BTreeMap<String, f64> = [("B".to_string(), 12.5), ("A".to_string(), 1.0)].into();
        let regions: BTreeMap<String, String> = [("A".to_string(), "North".to_string())].into();
        let rep = ForecastReport::from_totals("Maize", &base, &pred, &regions, "South");
        let keys: Vec<(&str, &str)> = rep.rows.iter().map(|r| (r.region.as_str(), r.country.as_str())).collect();
        assert_eq!(keys, vec![("North", "A"), ("North", "ALL"), ("South", "ALL"), ("South", "B")]);
        assert_eq!(rep.rows[0].rate_pct, None);
        emit_report(&rep, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("South,B,Maize,10,12.5,+25.00\n"));
        assert!(text.contains("North,A,Maize,0,1,\n"));
        assert_eq!(parse_report(&path).unwrap(), rep);
    }

    #[test]
    fn pgm_scaling() {
        let r = grid(vec![0.0, 1.0, 2.0, 5.0, DEFAULT_NODATA, -1.0], 3);
        assert_eq!(render_pgm(&r), "P2\n3 2\n255\n1 128 255\n255 0 1\n");
    }

    proptest! {
        #[test]
        fn ratio_above_one_iff_pred_larger(vals in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..40)) {
            let p = grid(vals.iter().map(|v| v.0).collect(), 1);
            let b = grid(vals.iter().map(|v| v.1).collect(), 1);
            let r = ratio_map(&p, &b).unwrap();
            for (i, (pv, bv)) in vals.iter().enumerate() {
                if *bv > 0.0 {
                    prop_assert_eq!(r.values[i] > 1.0, pv > bv);
                    prop_assert_eq!(r.values[i], pv / bv);
                } else {
                    prop_assert_eq!(r.values[i], DEFAULT_NODATA);
                }
            }
        }

        #[test]
        fn shares_sum_to_hundred(vals in prop::collection::vec(0.0f64..1e9, 1..20)) {
            prop_assume!(vals.iter().any(|v| *v > 0.0));
            let totals: BTreeMap<String, f64> = vals.iter().enumerate().map(|(i, v)| (format!("c{i}"), *v)).collect();
            let s = share_of_total(&totals).unwrap();
            prop_assert!((s.values().sum::<f64>() - 100.0).abs() < 1e-6);
        }

        #[test]
        fn partition_totals_add_up(vals in prop::collection::vec(0.0f64..1e6, 1..60), n_zones in 1u32..5) {
            let n = vals.len();
            let pred = grid(vals.clone(), 1);
            let zones = ZoneMap::new(pred.geometry, (0..n).map(|i| 1 + i as u32 % n_zones).collect()).unwrap();
            let names: BTreeMap<u32, ZoneName> = (1..=n_zones).map(|z| (z, ZoneName { country: format!("c{z}"), region: "r".into() })).collect();
            let sum: f64 = country_totals(&pred, &zones, &names).unwrap().values().sum();
            let grand: f64 = vals.iter().sum();
            prop_assert!((sum - grand).abs() <= 1e-6 * grand.max(1.0));
        }
    }
}
