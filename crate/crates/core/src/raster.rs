//! Regular lat/lon grids, crop masks, zone maps and the operations that move
//! values between them: resampling, masking and zonal aggregation.
//!
//! Grids are north-up. `origin_lat` is the north edge and `origin_lon` the
//! west edge; row `r` spans latitudes `[origin_lat - (r+1)·cs, origin_lat - r·cs]`.
//! Overlap areas are computed in degree² (planar), which is adequate for the
//! desk-scale extents this crate targets.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Approximate degrees per kilometre at the equator.
pub const DEG_PER_KM: f64 = 0.008983;

/// Default nodata sentinel for rasters produced by this crate.
pub const DEFAULT_NODATA: f64 = -9999.0;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("grid geometries differ")]
    GridMismatch,
    #[error("source and target grids do not overlap")]
    NoOverlap,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Georeferencing of a regular grid with square cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_size_deg: f64,
    pub n_rows: usize,
    pub n_cols: usize,
}

/// Cell extent in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellBounds {
    pub north: f64,
    pub south: f64,
    pub west: f64,
    pub east: f64,
}

impl CellBounds {
    /// Area of the intersection of two rectangles (0 when disjoint or touching).
    pub fn overlap_area(&self, other: &CellBounds) -> f64 {
        let h = self.north.min(other.north) - self.south.max(other.south);
        let w = self.east.min(other.east) - self.west.max(other.west);
        if h > 0.0 && w > 0.0 {
            h * w
        } else {
            0.0
        }
    }
}

impl GridGeometry {
    pub fn new(origin_lat: f64, origin_lon: f64, cell_size_deg: f64, n_rows: usize, n_cols: usize) -> Result<Self> {
        let g = Self { origin_lat, origin_lon, cell_size_deg, n_rows, n_cols };
        g.validate()?;
        Ok(g)
    }

    /// Grid of `km`-sized cells covering the same north-west corner.
    pub fn with_km_cells(origin_lat: f64, origin_lon: f64, km: f64, n_rows: usize, n_cols: usize) -> Result<Self> {
        Self::new(origin_lat, origin_lon, km * DEG_PER_KM, n_rows, n_cols)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size_deg.is_finite() && self.cell_size_deg > 0.0) {
            return Err(RasterError::InvalidGrid(format!("cell size {} must be positive", self.cell_size_deg)));
        }
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(RasterError::InvalidGrid("grid must have at least one row and column".into()));
        }
        if !self.origin_lat.is_finite() || !self.origin_lon.is_finite() {
            return Err(RasterError::InvalidGrid("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.n_cols + col
    }

    pub fn cell_bounds(&self, row: usize, col: usize) -> CellBounds {
        let cs = self.cell_size_deg;
        let north = self.origin_lat - row as f64 * cs;
        let west = self.origin_lon + col as f64 * cs;
        CellBounds { north, south: north - cs, west, east: west + cs }
    }

    /// (lat, lon) of the cell centre.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let cs = self.cell_size_deg;
        (
            self.origin_lat - (row as f64 + 0.5) * cs,
            self.origin_lon + (col as f64 + 0.5) * cs,
        )
    }

    pub fn bounds(&self) -> CellBounds {
        let cs = self.cell_size_deg;
        CellBounds {
            north: self.origin_lat,
            south: self.origin_lat - self.n_rows as f64 * cs,
            west: self.origin_lon,
            east: self.origin_lon + self.n_cols as f64 * cs,
        }
    }

    /// Cell containing a point, if inside the grid. Points on a shared edge
    /// belong to the cell to the south/east.
    pub fn locate(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let r = ((self.origin_lat - lat) / self.cell_size_deg).floor();
        let c = ((lon - self.origin_lon) / self.cell_size_deg).floor();
        if r < 0.0 || c < 0.0 || r >= self.n_rows as f64 || c >= self.n_cols as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }
}

/// A georeferenced grid of scalar values with a nodata sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRaster {
    pub geometry: GridGeometry,
    pub nodata: f64,
    pub values: Vec<f64>,
    pub units: String,
}

impl GridRaster {
    pub fn new(geometry: GridGeometry, nodata: f64, values: Vec<f64>, units: impl Into<String>) -> Result<Self> {
        let r = Self { geometry, nodata, values, units: units.into() };
        r.validate()?;
        Ok(r)
    }

    /// Raster with every cell set to `value`.
    pub fn filled(geometry: GridGeometry, value: f64, nodata: f64, units: impl Into<String>) -> Self {
        Self { geometry, nodata, values: vec![value; geometry.len()], units: units.into() }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.values.len() != self.geometry.len() {
            return Err(RasterError::InvalidGrid(format!(
                "{} values for a {}x{} grid",
                self.values.len(),
                self.geometry.n_rows,
                self.geometry.n_cols
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite() && *v != self.nodata) {
            return Err(RasterError::InvalidGrid(format!("non-finite value at cell {i}")));
        }
        Ok(())
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.geometry.index(row, col)]
    }

    /// Value at a cell or `None` for nodata.
    pub fn valid(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.get(row, col);
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| !self.is_nodata(**v)).count()
    }

    pub fn check_same_grid(&self, other: &GridGeometry) -> Result<()> {
        if &self.geometry != other {
            return Err(RasterError::GridMismatch);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    Nearest,
    #[default]
    AreaWeighted,
}

impl std::str::FromStr for ResampleMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "area_weighted" => Ok(Self::AreaWeighted),
            other => Err(format!("unknown resampling method '{other}'")),
        }
    }
}

/// Resample `src` onto `target`.
///
/// `Nearest` copies the source cell containing each target cell centre.
/// `AreaWeighted` takes the overlap-area weighted mean of intersecting valid
/// source cells. Target cells with no valid source get `src.nodata`.
pub fn resample(src: &GridRaster, target: &GridGeometry, method: ResampleMethod) -> Result<GridRaster> {
    src.validate()?;
    target.validate()?;
    if src.geometry.bounds().overlap_area(&target.bounds()) <= 0.0 {
        return Err(RasterError::NoOverlap);
    }
    let sg = src.geometry;
    let mut values = vec![src.nodata; target.len()];
    values.par_chunks_mut(target.n_cols).enumerate().for_each(|(row, out)| {
        for (col, slot) in out.iter_mut().enumerate() {
            *slot = match method {
                ResampleMethod::Nearest => {
                    let (lat, lon) = target.cell_center(row, col);
                    match sg.locate(lat, lon) {
                        Some((r, c)) => src.get(r, c),
                        None => src.nodata,
                    }
                }
                ResampleMethod::AreaWeighted => area_weighted_cell(src, &target.cell_bounds(row, col)),
            };
        }
    });
    Ok(GridRaster { geometry: *target, nodata: src.nodata, values, units: src.units.clone() })
}

fn area_weighted_cell(src: &GridRaster, cell: &CellBounds) -> f64 {
    let g = &src.geometry;
    let cs = g.cell_size_deg;
    let clamp = |x: f64, hi: usize| x.max(0.0).min(hi as f64) as usize;
    let r0 = clamp(((g.origin_lat - cell.north) / cs).floor(), g.n_rows);
    let r1 = clamp(((g.origin_lat - cell.south) / cs).ceil(), g.n_rows);
    let c0 = clamp(((cell.west - g.origin_lon) / cs).floor(), g.n_cols);
    let c1 = clamp(((cell.east - g.origin_lon) / cs).ceil(), g.n_cols);

    let mut weighted = 0.0;
    let mut weight = 0.0;
    for r in r0..r1 {
        for c in c0..c1 {
            let v = src.get(r, c);
            if src.is_nodata(v) {
                continue;
            }
            let a = g.cell_bounds(r, c).overlap_area(cell);
            if a > 0.0 {
                weighted += a * v;
                weight += a;
            }
        }
    }
    if weight > 0.0 {
        weighted / weight
    } else {
        src.nodata
    }
}

/// Boolean raster marking cells where a crop is grown.
#[derive(Debug, Clone, PartialEq)]
pub struct CropMask {
    pub geometry: GridGeometry,
    pub cells: Vec<bool>,
}

impl CropMask {
    pub fn new(geometry: GridGeometry, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != geometry.len() {
            return Err(RasterError::InvalidGrid(format!("{} mask cells for a {}-cell grid", cells.len(), geometry.len())));
        }
        Ok(Self { geometry, cells })
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[self.geometry.index(row, col)]
    }

    /// Cell-wise AND of two masks on the same grid.
    pub fn intersect(&self, other: &CropMask) -> Result<CropMask> {
        if self.geometry != other.geometry {
            return Err(RasterError::GridMismatch);
        }
        let cells = self.cells.iter().zip(&other.cells).map(|(a, b)| *a && *b).collect();
        Ok(CropMask { geometry: self.geometry, cells })
    }

    /// 1.0 / 0.0 raster for persistence.
    pub fn to_raster(&self) -> GridRaster {
        let values = self.cells.iter().map(|c| if *c { 1.0 } else { 0.0 }).collect();
        GridRaster { geometry: self.geometry, nodata: DEFAULT_NODATA, values, units: "mask".into() }
    }

    pub fn from_raster(r: &GridRaster) -> CropMask {
        let cells = r.values.iter().map(|v| !r.is_nodata(*v) && *v > 0.5).collect();
        CropMask { geometry: r.geometry, cells }
    }
}

/// Cell is in the mask iff its production exceeds `threshold` and is not nodata.
pub fn build_crop_mask(production: &GridRaster, threshold: f64) -> CropMask {
    let cells = production
        .values
        .iter()
        .map(|v| !production.is_nodata(*v) && *v > threshold)
        .collect();
    CropMask { geometry: production.geometry, cells }
}

/// Keep values where the mask is set, nodata elsewhere.
pub fn apply_mask(r: &GridRaster, m: &CropMask) -> Result<GridRaster> {
    r.check_same_grid(&m.geometry)?;
    let values = r
        .values
        .iter()
        .zip(&m.cells)
        .map(|(v, keep)| if *keep { *v } else { r.nodata })
        .collect();
    Ok(GridRaster { geometry: r.geometry, nodata: r.nodata, values, units: r.units.clone() })
}

/// Integer zone labels per cell; 0 is outside every zone.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneMap {
    pub geometry: GridGeometry,
    pub zone_ids: Vec<u32>,
}

impl ZoneMap {
    pub fn new(geometry: GridGeometry, zone_ids: Vec<u32>) -> Result<Self> {
        if zone_ids.len() != geometry.len() {
            return Err(RasterError::InvalidGrid(format!(
                "{} zone labels for a {}-cell grid",
                zone_ids.len(),
                geometry.len()
            )));
        }
        Ok(Self { geometry, zone_ids })
    }

    /// Zone labels read from a raster; nodata and non-positive cells become 0.
    pub fn from_raster(r: &GridRaster) -> Result<Self> {
        let mut ids = Vec::with_capacity(r.values.len());
        for v in &r.values {
            if r.is_nodata(*v) || *v <= 0.0 {
                ids.push(0);
            } else if v.fract() != 0.0 || *v > u32::MAX as f64 {
                return Err(RasterError::InvalidGrid(format!("zone label {v} is not a non-negative integer")));
            } else {
                ids.push(*v as u32);
            }
        }
        Self::new(r.geometry, ids)
    }

    pub fn to_raster(&self) -> GridRaster {
        let values = self.zone_ids.iter().map(|z| *z as f64).collect();
        GridRaster { geometry: self.geometry, nodata: DEFAULT_NODATA, values, units: "zone".into() }
    }

    /// Distinct nonzero zone ids in ascending order.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.zone_ids.iter().copied().filter(|z| *z != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Mask of cells belonging to `zone`.
    pub fn mask_for(&self, zone: u32) -> CropMask {
        CropMask { geometry: self.geometry, cells: self.zone_ids.iter().map(|z| *z == zone).collect() }
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.zone_ids[self.geometry.index(row, col)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ZoneTotal {
    pub sum: f64,
    pub count: usize,
}

/// Sum and count of valid cells per nonzero zone, accumulated in row-major order.
pub fn zonal_sum(r: &GridRaster, zones: &ZoneMap) -> Result<BTreeMap<u32, ZoneTotal>> {
    r.check_same_grid(&zones.geometry)?;
    let mut out: BTreeMap<u32, ZoneTotal> = BTreeMap::new();
    for (v, z) in r.values.iter().zip(&zones.zone_ids) {
        if *z == 0 {
            continue;
        }
        let e = out.entry(*z).or_default();
        if !r.is_nodata(*v) {
            e.sum += *v;
            e.count += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geo(rows: usize, cols: usize, cs: f64) -> GridGeometry {
        GridGeometry::new(10.0, 20.0, cs, rows, cols).unwrap()
    }

    fn raster(rows: usize, cols: usize, values: Vec<f64>) -> GridRaster {
        GridRaster::new(geo(rows, cols, 1.0), DEFAULT_NODATA, values, "t").unwrap()
    }

    #[test]
    fn invalid_grids_are_rejected() {
        assert!(GridGeometry::new(0.0, 0.0, 0.0, 1, 1).is_err());
        assert!(GridGeometry::new(0.0, 0.0, 1.0, 0, 1).is_err());
        assert!(GridRaster::new(geo(2, 2, 1.0), -1.0, vec![1.0; 3], "").is_err());
        assert!(GridRaster::new(geo(1, 1, 1.0), -1.0, vec![f64::NAN], "").is_err());
    }

    #[test]
    fn nearest_identity() {
        let r = raster(3, 4, (0..12).map(|v| v as f64 * 1.5).collect());
        let out = resample(&r, &r.geometry, ResampleMethod::Nearest).unwrap();
        assert_eq!(out, r);
    }

    #[test]
    fn area_weighted_equal_area_average() {
        let r = raster(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let target = GridGeometry::new(10.0, 20.0, 2.0, 1, 1).unwrap();
        let out = resample(&r, &target, ResampleMethod::AreaWeighted).unwrap();
        assert!((out.values[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn disjoint_grids_error() {
        let r = raster(2, 2, vec![1.0; 4]);
        let far = GridGeometry::new(-50.0, -100.0, 1.0, 2, 2).unwrap();
        assert_eq!(resample(&r, &far, ResampleMethod::Nearest), Err(RasterError::NoOverlap));
        // touching edge only
        let touching = GridGeometry::new(10.0, 22.0, 1.0, 2, 2).unwrap();
        assert_eq!(resample(&r, &touching, ResampleMethod::AreaWeighted), Err(RasterError::NoOverlap));
    }

    #[test]
    fn uncovered_target_cells_get_nodata() {
        let r = raster(2, 2, vec![1.0; 4]);
        // shifted one cell east: second column lies outside the source
        let t = GridGeometry::new(10.0, 21.0, 1.0, 2, 2).unwrap();
        for m in [ResampleMethod::Nearest, ResampleMethod::AreaWeighted] {
            let out = resample(&r, &t, m).unwrap();
            assert_eq!(out.values, vec![1.0, DEFAULT_NODATA, 1.0, DEFAULT_NODATA]);
        }
    }

    #[test]
    fn crop_mask_examples() {
        let m = build_crop_mask(&raster(2, 2, vec![0.0; 4]), 0.0);
        assert_eq!(m.count(), 0);
        let m = build_crop_mask(&raster(2, 2, vec![0.0, 5.0, 0.0, 2.0]), 0.0);
        assert_eq!(m.cells, vec![false, true, false, true]);
        let m = build_crop_mask(&raster(1, 2, vec![DEFAULT_NODATA, 5.0]), 0.0);
        assert_eq!(m.cells, vec![false, true]);
    }

    #[test]
    fn apply_mask_examples() {
        let r = raster(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let all = CropMask::new(r.geometry, vec![true; 4]).unwrap();
        assert_eq!(apply_mask(&r, &all).unwrap(), r);
        let none = CropMask::new(r.geometry, vec![false; 4]).unwrap();
        assert_eq!(apply_mask(&r, &none).unwrap().valid_count(), 0);

        let mixed = CropMask::new(r.geometry, vec![true, false, false, true]).unwrap();
        let out = apply_mask(&r, &mixed).unwrap();
        for i in 0..4 {
            let expect = if mixed.cells[i] { r.values[i] } else { r.nodata };
            assert_eq!(out.values[i], expect);
        }
        let other = CropMask::new(geo(2, 2, 0.5), vec![true; 4]).unwrap();
        assert_eq!(apply_mask(&r, &other), Err(RasterError::GridMismatch));
    }

    #[test]
    fn zonal_sum_examples() {
        let r = raster(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let z = ZoneMap::new(r.geometry, vec![1; 4]).unwrap();
        let t = zonal_sum(&r, &z).unwrap();
        assert_eq!(t[&1], ZoneTotal { sum: 10.0, count: 4 });

        let r = raster(1, 3, vec![DEFAULT_NODATA, DEFAULT_NODATA, 5.0]);
        let z = ZoneMap::new(r.geometry, vec![2, 2, 3]).unwrap();
        let t = zonal_sum(&r, &z).unwrap();
        assert_eq!(t[&2], ZoneTotal { sum: 0.0, count: 0 });
        assert_eq!(t[&3], ZoneTotal { sum: 5.0, count: 1 });

        let bad = ZoneMap::new(geo(1, 3, 2.0), vec![1; 3]).unwrap();
        assert_eq!(zonal_sum(&r, &bad), Err(RasterError::GridMismatch));
    }

    #[test]
    fn zone_map_from_raster_rejects_fractions() {
        let r = raster(1, 2, vec![1.5, 2.0]);
        assert!(ZoneMap::from_raster(&r).is_err());
        let r = raster(1, 3, vec![DEFAULT_NODATA, 0.0, 7.0]);
        assert_eq!(ZoneMap::from_raster(&r).unwrap().zone_ids, vec![0, 0, 7]);
    }

    fn arb_raster() -> impl Strategy<Value = GridRaster> {
        (1usize..6, 1usize..6, 0.1f64..2.0).prop_flat_map(|(rows, cols, cs)| {
            prop::collection::vec(prop_oneof![4 => -100.0f64..100.0, 1 => Just(DEFAULT_NODATA)], rows * cols).prop_map(
                move |values| GridRaster::new(GridGeometry::new(5.0, -3.0, cs, rows, cols).unwrap(), DEFAULT_NODATA, values, "p").unwrap(),
            )
        })
    }

    proptest! {
        #[test]
        fn nearest_identity_property(r in arb_raster()) {
            prop_assert_eq!(resample(&r, &r.geometry, ResampleMethod::Nearest).unwrap(), r);
        }

        #[test]
        fn area_weighted_constant_preserved(c in -50.0f64..50.0, rows in 1usize..8, cols in 1usize..8, tcs in 0.3f64..3.0) {
            let src = GridRaster::filled(GridGeometry::new(0.0, 0.0, 0.7, rows, cols).unwrap(), c, DEFAULT_NODATA, "");
            let target = GridGeometry::new(0.2, -0.1, tcs, 4, 4).unwrap();
            if let Ok(out) = resample(&src, &target, ResampleMethod::AreaWeighted) {
                for v in out.values.iter().filter(|v| **v != DEFAULT_NODATA) {
                    prop_assert!((v - c).abs() <= 1e-9 * (1.0 + c.abs()));
                }
            }
        }

        #[test]
        fn single_cell_downsample_is_mean(rows in 1usize..6, cols in 1usize..6, seed in prop::collection::vec(-10.0f64..10.0, 36)) {
            let values: Vec<f64> = seed[..rows * cols].to_vec();
            let src = GridRaster::new(GridGeometry::new(0.0, 0.0, 1.0, rows, cols).unwrap(), DEFAULT_NODATA, values.clone(), "").unwrap();
            // one target cell covering the whole (square) source
            if rows == cols {
                let t = GridGeometry::new(0.0, 0.0, rows as f64, 1, 1).unwrap();
                let out = resample(&src, &t, ResampleMethod::AreaWeighted).unwrap();
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                prop_assert!((out.values[0] - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
            }
        }

        #[test]
        fn apply_mask_idempotent(r in arb_raster(), bits in prop::collection::vec(any::<bool>(), 36)) {
            let m = CropMask::new(r.geometry, bits[..r.geometry.len()].to_vec()).unwrap();
            let once = apply_mask(&r, &m).unwrap();
            prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
        }

        #[test]
        fn zonal_sum_of_ones_counts_cells(rows in 1usize..7, cols in 1usize..7, labels in prop::collection::vec(0u32..4, 49)) {
            let g = GridGeometry::new(0.0, 0.0, 1.0, rows, cols).unwrap();
            let ones = GridRaster::filled(g, 1.0, DEFAULT_NODATA, "");
            let zones = ZoneMap::new(g, labels[..g.len()].to_vec()).unwrap();
            let t = zonal_sum(&ones, &zones).unwrap();
            for (id, total) in t {
                let n = zones.zone_ids.iter().filter(|z| **z == id).count();
                prop_assert_eq!(total.count, n);
                prop_assert_eq!(total.sum, n as f64);
            }
        }
    }
}
