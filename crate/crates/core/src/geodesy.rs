//! Consistent-scale cell layout on a spherical earth.
//!
//! The latitude axis is cut into bands of `l / r` radians. Band `i` is
//! centered on `phi_i = i * l / r`; within a band, cells step east and west
//! of the prime meridian by `l / (r cos phi_i)` radians so that every cell is
//! (locally) an `l x l` square. A Web-Mercator grid is provided as the
//! inconsistent-scale baseline.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Semi-major axis used by EPSG:3857.
pub const WEB_MERCATOR_RADIUS_M: f64 = 6_378_137.0;

/// Latitude limit shared by common web maps.
pub const MAX_LATITUDE_DEG: f64 = 85.06;

pub fn max_latitude() -> f64 {
    MAX_LATITUDE_DEG.to_radians()
}

/// Wraps a longitude into `[-pi, pi)`.
pub fn wrap_lon(lon: f64) -> f64 {
    if (-PI..PI).contains(&lon) {
        return lon;
    }
    let w = (lon + PI).rem_euclid(TAU) - PI;
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// A point on the sphere, in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self {
            lat,
            lon: wrap_lon(lon),
        }
    }

    pub fn from_degrees(lat_deg: f64, lon_deg: f64) -> Self {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians())
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat.to_degrees()
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon.to_degrees()
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite() && self.lon.is_finite() && self.lat.abs() <= PI / 2.0
    }

    /// Moves the point by a metric offset in the local tangent plane.
    pub fn offset_m(&self, east: f64, north: f64, earth_radius: f64) -> GeoPoint {
        GeoPoint::new(
            self.lat + north / earth_radius,
            self.lon + east / (earth_radius * self.lat.cos()),
        )
    }

    /// Metric `(east, north)` position of `other` in this point's tangent plane.
    pub fn local_offset_m(&self, other: &GeoPoint, earth_radius: f64) -> (f64, f64) {
        let dlon = wrap_lon(other.lon - self.lon);
        (
            dlon * earth_radius * self.lat.cos(),
            (other.lat - self.lat) * earth_radius,
        )
    }
}

/// Great-circle distance in meters (haversine form).
pub fn geodesic_distance(a: &GeoPoint, b: &GeoPoint, earth_radius: f64) -> f64 {
    let half_dlat = 0.5 * (b.lat - a.lat);
    let half_dlon = 0.5 * wrap_lon(b.lon - a.lon);
    let s_lat = half_dlat.sin();
    let s_lon = half_dlon.sin();
    let h = (s_lat * s_lat + a.lat.cos() * b.lat.cos() * s_lon * s_lon).clamp(0.0, 1.0);
    2.0 * earth_radius * h.sqrt().atan2((1.0 - h).sqrt())
}

/// Integer address of a cell: band north/south of the equator, step east/west.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub band: i32,
    pub step: i32,
}

impl CellIndex {
    pub fn new(band: i32, step: i32) -> Self {
        Self { band, step }
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.band, self.step)
    }
}

/// Grid parameters of the consistent-scale layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionLayout {
    cell_size: f64,
    earth_radius: f64,
}

impl Default for RegionLayout {
    fn default() -> Self {
        Self {
            cell_size: 30.0,
            earth_radius: DEFAULT_EARTH_RADIUS_M,
        }
    }
}

impl RegionLayout {
    pub fn new(cell_size: f64, earth_radius: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Parameter(format!("cell size must be > 0, got {cell_size}")));
        }
        if !(earth_radius > 0.0 && earth_radius.is_finite()) {
            return Err(Error::Parameter(format!(
                "earth radius must be > 0, got {earth_radius}"
            )));
        }
        Ok(Self {
            cell_size,
            earth_radius,
        })
    }

    pub fn with_cell_size(cell_size: f64) -> Result<Self> {
        Self::new(cell_size, DEFAULT_EARTH_RADIUS_M)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn earth_radius(&self) -> f64 {
        self.earth_radius
    }

    /// Angular height of one band.
    pub fn band_angle(&self) -> f64 {
        self.cell_size / self.earth_radius
    }

    pub fn is_valid_band(&self, band: i32) -> bool {
        (band as f64 * self.cell_size / self.earth_radius).abs() < max_latitude()
    }

    /// Inclusive range of valid band indices.
    pub fn band_range(&self) -> (i32, i32) {
        let mut hi = (max_latitude() / self.band_angle()).ceil() as i32;
        while !self.is_valid_band(hi) {
            hi -= 1;
        }
        (-hi, hi)
    }

    /// Latitude of band `i`, `i * l / r`.
    pub fn band_latitude(&self, band: i32) -> Result<f64> {
        let phi = band as f64 * self.cell_size / self.earth_radius;
        if phi.abs() < max_latitude() {
            Ok(phi)
        } else {
            Err(Error::Range(format!(
                "band {band} lies at {:.4} deg, beyond the {MAX_LATITUDE_DEG} deg limit",
                phi.to_degrees()
            )))
        }
    }

    /// Longitude increment between neighboring cells of a band.
    pub fn step_angle(&self, band: i32) -> Result<f64> {
        let phi = self.band_latitude(band)?;
        Ok(self.cell_size / (self.earth_radius * phi.cos()))
    }

    /// Inclusive range of canonical step indices of a band, i.e. those whose
    /// center longitude falls in `[-pi, pi)`.
    pub fn step_range(&self, band: i32) -> Result<(i32, i32)> {
        let delta = self.step_angle(band)?;
        Ok(step_range_for(delta))
    }

    pub fn step_count(&self, band: i32) -> Result<usize> {
        let (lo, hi) = self.step_range(band)?;
        Ok((hi - lo + 1) as usize)
    }

    /// Maps any step index onto its canonical representative in the band.
    pub fn canonical(&self, cell: CellIndex) -> Result<CellIndex> {
        let (lo, hi) = self.step_range(cell.band)?;
        if (lo..=hi).contains(&cell.step) {
            return Ok(cell);
        }
        let n = (hi - lo + 1) as i64;
        let step = lo as i64 + (cell.step as i64 - lo as i64).rem_euclid(n);
        Ok(CellIndex::new(cell.band, step as i32))
    }

    pub fn cell_center(&self, cell: CellIndex) -> Result<GeoPoint> {
        let cell = self.canonical(cell)?;
        let phi = self.band_latitude(cell.band)?;
        let delta = self.cell_size / (self.earth_radius * phi.cos());
        Ok(GeoPoint::new(phi, cell.step as f64 * delta))
    }

    /// Cell containing `p`. Bands own `[phi_i - l/2r, phi_i + l/2r)` and cells
    /// own `[lambda_ij - delta/2, lambda_ij + delta/2)`; at the antimeridian
    /// seam the nearest center wins, ties going to the smaller step.
    pub fn cell_of_point(&self, p: &GeoPoint) -> Result<CellIndex> {
        if !p.is_valid() || p.lat.abs() >= max_latitude() {
            return Err(Error::Range(format!(
                "latitude {:.6} deg outside the layout",
                p.lat.to_degrees()
            )));
        }
        let band_f = (p.lat / self.band_angle() + 0.5).floor();
        if band_f.abs() > i32::MAX as f64 {
            return Err(Error::Range("band index overflow".into()));
        }
        let band = band_f as i32;
        let delta = self.step_angle(band)?;
        let (lo, hi) = step_range_for(delta);
        let lon = wrap_lon(p.lon);
        let step = (lon / delta + 0.5).floor();
        let step = if step >= lo as f64 && step <= hi as f64 {
            step as i32
        } else {
            let d_lo = wrap_lon(lon - lo as f64 * delta).abs();
            let d_hi = wrap_lon(lon - hi as f64 * delta).abs();
            if d_lo <= d_hi {
                lo
            } else {
                hi
            }
        };
        Ok(CellIndex::new(band, step))
    }

    /// All cells whose centers lie in the closed box, ordered by band then
    /// step. A box with `min.lon > max.lon` crosses the antimeridian.
    pub fn cells_in_box(&self, min: &GeoPoint, max: &GeoPoint) -> Result<Vec<CellIndex>> {
        let mut out = Vec::new();
        if min.lat > max.lat {
            return Ok(out);
        }
        let lon_spans: Vec<(f64, f64)> = if min.lon <= max.lon {
            vec![(min.lon, max.lon)]
        } else {
            vec![(min.lon, PI), (-PI, max.lon)]
        };
        let (band_lo, band_hi) = self.band_range();
        let first = ((min.lat / self.band_angle()).floor() as i64 - 1).max(band_lo as i64) as i32;
        let last = ((max.lat / self.band_angle()).ceil() as i64 + 1).min(band_hi as i64) as i32;
        for band in first..=last {
            let phi = self.band_latitude(band)?;
            if phi < min.lat || phi > max.lat {
                continue;
            }
            let delta = self.cell_size / (self.earth_radius * phi.cos());
            let (lo, hi) = step_range_for(delta);
            for &(a, b) in &lon_spans {
                let j0 = ((a / delta).floor() as i64 - 1).max(lo as i64) as i32;
                let j1 = ((b / delta).ceil() as i64 + 1).min(hi as i64) as i32;
                for step in j0..=j1 {
                    let lon = step as f64 * delta;
                    if lon >= a && lon <= b {
                        out.push(CellIndex::new(band, step));
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Ratio of the shorter to the longer horizontal side of the trapezoid
    /// spanned between `phi_i` and `phi_{i+1}`.
    pub fn trapezoid_ratio(&self, band: i32) -> Result<f64> {
        let a = self.band_latitude(band)?;
        let b = self.band_latitude(band + 1)?;
        let ca = TAU * self.earth_radius * a.cos();
        let cb = TAU * self.earth_radius * b.cos();
        Ok(ca.min(cb) / ca.max(cb))
    }

    /// Length difference of the two horizontal sides of a cell in the band.
    pub fn side_deviation_m(&self, band: i32) -> Result<f64> {
        Ok(self.cell_size * (1.0 - self.trapezoid_ratio(band)?))
    }

    /// Worst shape error over all bands whose upper neighbor is also valid.
    pub fn shape_report(&self) -> ShapeReport {
        let (lo, hi) = self.band_range();
        let mut worst_band = 0;
        let mut min_ratio = 1.0f64;
        for band in lo..hi {
            let k = self
                .trapezoid_ratio(band)
                .expect("band and its neighbor are in range");
            if k < min_ratio {
                min_ratio = k;
                worst_band = band;
            }
        }
        ShapeReport {
            bands: (hi - lo + 1) as usize,
            worst_band,
            min_ratio,
            max_side_deviation_m: self.cell_size * (1.0 - min_ratio),
        }
    }
}

fn step_range_for(delta: f64) -> (i32, i32) {
    let mut lo = (-PI / delta).ceil() as i64;
    let mut hi = (PI / delta).ceil() as i64 - 1;
    while (lo as f64) * delta < -PI {
        lo += 1;
    }
    while (hi as f64) * delta >= PI {
        hi -= 1;
    }
    while ((hi + 1) as f64) * delta < PI {
        hi += 1;
    }
    (lo as i32, hi as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeReport {
    pub bands: usize,
    pub worst_band: i32,
    pub min_ratio: f64,
    pub max_side_deviation_m: f64,
}

/// Regular grid over EPSG:3857 projected coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MercatorLayout {
    projected_cell_size: f64,
    radius: f64,
}

impl MercatorLayout {
    pub fn new(projected_cell_size: f64) -> Result<Self> {
        if !(projected_cell_size > 0.0 && projected_cell_size.is_finite()) {
            return Err(Error::Parameter(format!(
                "projected cell size must be > 0, got {projected_cell_size}"
            )));
        }
        Ok(Self {
            projected_cell_size,
            radius: WEB_MERCATOR_RADIUS_M,
        })
    }

    pub fn projected_cell_size(&self) -> f64 {
        self.projected_cell_size
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn project(&self, p: &GeoPoint) -> (f64, f64) {
        (
            self.radius * p.lon,
            self.radius * p.lat.tan().asinh(),
        )
    }

    pub fn unproject(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint::new(
            (y / self.radius).sinh().atan(),
            x / self.radius,
        )
    }

    /// Ground size of a cell edge at latitude `lat`.
    pub fn metric_cell_size(&self, lat: f64) -> f64 {
        self.projected_cell_size * lat.cos()
    }

    pub fn cell_of_point(&self, p: &GeoPoint) -> Result<CellIndex> {
        if !p.is_valid() || p.lat.abs() >= max_latitude() {
            return Err(Error::Range(format!(
                "latitude {:.6} deg outside the projection",
                p.lat.to_degrees()
            )));
        }
        let (x, y) = self.project(p);
        Ok(CellIndex::new(
            (y / self.projected_cell_size).floor() as i32,
            (x / self.projected_cell_size).floor() as i32,
        ))
    }

    pub fn cell_center(&self, cell: CellIndex) -> GeoPoint {
        self.unproject(
            (cell.step as f64 + 0.5) * self.projected_cell_size,
            (cell.band as f64 + 0.5) * self.projected_cell_size,
        )
    }
}

pub fn mercator_cell_metric_size(lat: f64, m: &MercatorLayout) -> f64 {
    m.metric_cell_size(lat)
}

/// Writes `band_i,step_j,lat_deg,lon_deg` rows with 9 decimals.
pub fn write_cells_csv<W: Write>(
    mut w: W,
    layout: &RegionLayout,
    cells: &[CellIndex],
) -> Result<()> {
    writeln!(w, "band_i,step_j,lat_deg,lon_deg")?;
    for &c in cells {
        let p = layout.cell_center(c)?;
        writeln!(w, "{},{},{:.9},{:.9}", c.band, c.step, p.lat_deg(), p.lon_deg())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> RegionLayout {
        RegionLayout::default()
    }

    #[test]
    fn band_latitude_examples() {
        let l = layout();
        assert_eq!(l.band_latitude(0).unwrap(), 0.0);
        assert_eq!(l.band_latitude(1).unwrap(), 30.0 / 6_371_000.0);
        let phi = l.band_latitude(100_000).unwrap();
        assert!((phi - 0.470_883_691_728_143_1).abs() < 1e-15);
        assert!((phi.to_degrees() - 26.98).abs() < 0.01);
        assert!(matches!(l.band_latitude(400_000), Err(Error::Range(_))));
        assert!(matches!(l.band_latitude(-400_000), Err(Error::Range(_))));
    }

    #[test]
    fn cell_center_examples() {
        let l = layout();
        assert_eq!(l.cell_center(CellIndex::new(0, 0)).unwrap(), GeoPoint::new(0.0, 0.0));
        let p = l.cell_center(CellIndex::new(0, 1)).unwrap();
        assert_eq!(p.lon, 30.0 / 6_371_000.0);

        // Pick a layout whose band 1 sits exactly at 60 degrees.
        let r = 6_371_000.0;
        let cell = r * std::f64::consts::FRAC_PI_3;
        let sixty = RegionLayout::new(cell, r).unwrap();
        let p = sixty.cell_center(CellIndex::new(1, 1)).unwrap();
        assert!((p.lat - std::f64::consts::FRAC_PI_3).abs() < 1e-15);
        assert!((p.lon - 2.0 * cell / r).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_step_wraps() {
        let l = layout();
        let (lo, hi) = l.step_range(10).unwrap();
        let n = hi - lo + 1;
        let c = l.canonical(CellIndex::new(10, hi + 1)).unwrap();
        assert_eq!(c, CellIndex::new(10, lo));
        let c = l.canonical(CellIndex::new(10, lo - 1 - n)).unwrap();
        assert_eq!(c, CellIndex::new(10, hi));
    }

    #[test]
    fn step_counts_match_circumference() {
        let l = layout();
        for band in [0, 1, 5_000, -77_777, 200_000, 315_000] {
            let phi = l.band_latitude(band).unwrap();
            let expect = (TAU * l.earth_radius() * phi.cos() / l.cell_size()).floor() as i64;
            let got = l.step_count(band).unwrap() as i64;
            assert!((got - expect).abs() <= 1, "band {band}: {got} vs {expect}");
        }
        // Rows are shifted against each other away from the equator.
        assert!(l.step_angle(1000).unwrap() != l.step_angle(1001).unwrap());
        assert!(l.step_count(200_000).unwrap() > l.step_count(200_001).unwrap());
    }

    #[test]
    fn polar_point_is_rejected() {
        let l = layout();
        let p = GeoPoint::from_degrees(86.0, 0.0);
        assert!(matches!(l.cell_of_point(&p), Err(Error::Range(_))));
    }

    #[test]
    fn boundaries_are_half_open() {
        let l = layout();
        let c = l.cell_center(CellIndex::new(3, 4)).unwrap();
        let half = 0.5 * l.band_angle();
        // The northern edge belongs to the next band.
        let north = GeoPoint::new(c.lat + half + 1e-15, c.lon);
        assert_eq!(l.cell_of_point(&north).unwrap().band, 4);
        let south = GeoPoint::new(c.lat - half + 1e-15, c.lon);
        assert_eq!(l.cell_of_point(&south).unwrap().band, 3);
    }

    #[test]
    fn antimeridian_point_maps_to_seam_cell() {
        let l = layout();
        for band in [0, 123, -4567, 250_000] {
            let (lo, hi) = l.step_range(band).unwrap();
            let phi = l.band_latitude(band).unwrap();
            let c = l.cell_of_point(&GeoPoint::new(phi, -PI)).unwrap();
            assert!(c.step == lo || c.step == hi);
            let c2 = l.cell_of_point(&GeoPoint::new(phi, PI - 1e-12)).unwrap();
            assert!(c2.step == lo || c2.step == hi);
        }
    }

    #[test]
    fn degenerate_box_is_one_cell() {
        let l = layout();
        for c in [CellIndex::new(0, 0), CellIndex::new(-12, 44), CellIndex::new(9000, -1)] {
            let p = l.cell_center(c).unwrap();
            assert_eq!(l.cells_in_box(&p, &p).unwrap(), vec![c]);
        }
    }

    #[test]
    fn inverted_box_is_empty() {
        let l = layout();
        let a = GeoPoint::from_degrees(1.0, 0.0);
        let b = GeoPoint::from_degrees(0.0, 1.0);
        assert!(l.cells_in_box(&a, &b).unwrap().is_empty());
    }

    #[test]
    fn distance_examples() {
        let a = GeoPoint::from_degrees(10.0, 20.0);
        assert_eq!(geodesic_distance(&a, &a, DEFAULT_EARTH_RADIUS_M), 0.0);
        let d = geodesic_distance(
            &GeoPoint::from_degrees(0.0, 0.0),
            &GeoPoint::from_degrees(1.0, 0.0),
            DEFAULT_EARTH_RADIUS_M,
        );
        assert!((d - PI * 6_371_000.0 / 180.0).abs() < 1e-6);
        assert!((d - 111_194.93).abs() < 0.01);
    }

    #[test]
    fn trapezoid_near_equator_is_square() {
        let l = layout();
        let k = l.trapezoid_ratio(0).unwrap();
        let expect = (30.0f64 / 6_371_000.0).cos();
        assert!((k - expect).abs() < 1e-15);
        assert!(k > 1.0 - 1e-10);
    }

    #[test]
    fn mercator_examples() {
        let m = MercatorLayout::new(100.0).unwrap();
        assert_eq!(m.metric_cell_size(0.0), 100.0);
        assert!((m.metric_cell_size(60f64.to_radians()) - 50.0).abs() < 1e-12);
        let ratio = m.metric_cell_size(42.3f64.to_radians()) / 100.0;
        assert!((ratio - 42.3f64.to_radians().cos()).abs() < 1e-15);
        assert!((ratio - 0.7396).abs() < 1e-4);
        assert_eq!(m.cell_of_point(&GeoPoint::new(0.0, 0.0)).unwrap(), CellIndex::new(0, 0));
        let c = CellIndex::new(-31, 77);
        assert_eq!(m.cell_of_point(&m.cell_center(c)).unwrap(), c);
        assert!(matches!(
            m.cell_of_point(&GeoPoint::from_degrees(-85.1, 0.0)),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn invalid_layouts_are_rejected() {
        assert!(RegionLayout::new(0.0, 1.0).is_err());
        assert!(RegionLayout::new(30.0, -1.0).is_err());
        assert!(MercatorLayout::new(f64::NAN).is_err());
    }

    #[test]
    fn wrap_lon_stays_half_open() {
        assert_eq!(wrap_lon(PI), -PI);
        assert_eq!(wrap_lon(-PI), -PI);
        assert!((wrap_lon(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert!(wrap_lon(-1e-18 - PI) < PI);
    }
}
