//! Georeferenced rasters, oriented multi-LOD patch extraction, and image I/O.

mod image;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use self::image::Image;
pub use self::synthetic::{synth_aerial, synth_street_view, SyntheticWorld};

use crate::error::{Error, Result};
use crate::geodesy::{wrap_lon, CellIndex, GeoPoint, RegionLayout, DEFAULT_EARTH_RADIUS_M};

/// North-up RGB8 raster with square pixels on a local equirectangular grid.
///
/// Pixel `(col, row)` has its center at `anchor` moved `col * resolution`
/// meters east and `row * resolution` meters south, with the east scale
/// taken at the anchor latitude.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoRaster {
    anchor: GeoPoint,
    resolution: f64,
    width: usize,
    height: usize,
    earth_radius: f64,
    data: Vec<u8>,
}

impl GeoRaster {
    pub fn new(
        anchor: GeoPoint,
        resolution: f64,
        width: usize,
        height: usize,
        data: Vec<u8>,
    ) -> Result<Self> {
        Self::with_radius(anchor, resolution, width, height, data, DEFAULT_EARTH_RADIUS_M)
    }

    pub fn with_radius(
        anchor: GeoPoint,
        resolution: f64,
        width: usize,
        height: usize,
        data: Vec<u8>,
        earth_radius: f64,
    ) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::Parameter(format!("raster resolution {resolution}")));
        }
        if !anchor.is_valid() {
            return Err(Error::Parameter("raster anchor is not a valid point".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "raster {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            anchor,
            resolution,
            width,
            height,
            earth_radius,
            data,
        })
    }

    pub fn anchor(&self) -> GeoPoint {
        self.anchor
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn earth_radius(&self) -> f64 {
        self.earth_radius
    }

    /// Angular size of one pixel as `(dlat, dlon)`.
    fn pixel_angles(&self) -> (f64, f64) {
        (
            self.resolution / self.earth_radius,
            self.resolution / (self.earth_radius * self.anchor.lat.cos()),
        )
    }

    pub fn pixel_to_geo(&self, col: f64, row: f64) -> GeoPoint {
        let (dlat, dlon) = self.pixel_angles();
        GeoPoint::new(self.anchor.lat - row * dlat, self.anchor.lon + col * dlon)
    }

    pub fn geo_to_pixel(&self, p: &GeoPoint) -> (f64, f64) {
        let (dlat, dlon) = self.pixel_angles();
        (
            wrap_lon(p.lon - self.anchor.lon) / dlon,
            (self.anchor.lat - p.lat) / dlat,
        )
    }

    pub fn pixel(&self, col: usize, row: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Bilinear sample at fractional pixel coordinates, `None` outside the
    /// hull of pixel centers.
    pub fn sample(&self, col: f64, row: f64) -> Option<[f64; 3]> {
        let col = snap(col);
        let row = snap(row);
        if !(col >= 0.0 && row >= 0.0)
            || col > (self.width - 1) as f64
            || row > (self.height - 1) as f64
        {
            return None;
        }
        let x0 = (col.floor() as usize).min(self.width - 1);
        let y0 = (row.floor() as usize).min(self.height - 1);
        let fx = col - x0 as f64;
        let fy = row - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let v = |p: [u8; 3]| p[c] as f64 / 255.0;
            let top = if fx == 0.0 { v(p00) } else { v(p00) + fx * (v(p10) - v(p00)) };
            let bot = if fx == 0.0 { v(p01) } else { v(p01) + fx * (v(p11) - v(p01)) };
            out[c] = if fy == 0.0 { top } else { top + fy * (bot - top) };
        }
        Some(out)
    }

    /// Writes the headerless RGB8 plane to `path` and its metadata to
    /// `path` + `.meta`.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.data)?;
        let meta = format!(
            "anchor_lat_deg = {}\nanchor_lon_deg = {}\nresolution_m = {}\nwidth = {}\nheight = {}\nearth_radius_m = {}\n",
            self.anchor.lat_deg(),
            self.anchor.lon_deg(),
            self.resolution,
            self.width,
            self.height,
            self.earth_radius
        );
        fs::write(sidecar_path(path), meta)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let meta_path = sidecar_path(path);
        let meta = fs::read_to_string(&meta_path)?;
        let kv = crate::config::parse_key_values(&meta)?;
        let get = |key: &str| -> Result<&str> {
            kv.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("{} lacks `{key}`", meta_path.display())))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("`{key}`: {e}")))
        };
        let int = |key: &str| -> Result<usize> {
            get(key)?
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("`{key}`: {e}")))
        };
        let radius = if kv.contains_key("earth_radius_m") {
            num("earth_radius_m")?
        } else {
            DEFAULT_EARTH_RADIUS_M
        };
        let data = fs::read(path)?;
        Self::with_radius(
            GeoPoint::from_degrees(num("anchor_lat_deg")?, num("anchor_lon_deg")?),
            num("resolution_m")?,
            int("width")?,
            int("height")?,
            data,
            radius,
        )
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Rounds coordinates that are within floating-point noise of a pixel center.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-6 {
        r
    } else {
        x
    }
}

/// A square, oriented, georeferenced window. `orientation` rotates the
/// patch counterclockwise; 0 is north-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSpec {
    pub center: GeoPoint,
    pub sidelength: f64,
    pub orientation: f64,
    pub pixels: usize,
}

impl PatchSpec {
    pub fn new(center: GeoPoint, sidelength: f64, orientation: f64, pixels: usize) -> Result<Self> {
        if !(sidelength > 0.0 && sidelength.is_finite()) {
            return Err(Error::Parameter(format!("patch sidelength {sidelength}")));
        }
        if pixels < 2 {
            return Err(Error::Parameter(format!("patch needs >= 2 pixels, got {pixels}")));
        }
        Ok(Self {
            center,
            sidelength,
            orientation,
            pixels,
        })
    }

    /// Ground resolution in meters per pixel.
    pub fn resolution(&self) -> f64 {
        self.sidelength / self.pixels as f64
    }
}

/// Number of aerial levels, sidelength of the finest level and pixel count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LodConfig {
    pub n: usize,
    pub d0: f64,
    pub pixels: usize,
}

impl Default for LodConfig {
    fn default() -> Self {
        Self {
            n: 4,
            d0: 76.8,
            pixels: 32,
        }
    }
}

impl LodConfig {
    /// Full-resolution patches: 384 px, so 0.2 m/px at the finest level.
    pub fn full_resolution() -> Self {
        Self {
            pixels: 384,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || !(self.d0 > 0.0) || self.pixels < 2 {
            return Err(Error::Parameter(format!("invalid LOD config {self}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for LodConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.n, self.d0, self.pixels)
    }
}

impl FromStr for LodConfig {
    type Err = Error;

    /// Parses `n,d0,pixels`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Parameter(format!("expected n,d0,pixels, got `{s}`")));
        }
        let bad = |e: &dyn std::fmt::Display| Error::Parameter(format!("`{s}`: {e}"));
        let cfg = LodConfig {
            n: parts[0].parse().map_err(|e| bad(&e))?,
            d0: parts[1].parse().map_err(|e| bad(&e))?,
            pixels: parts[2].parse().map_err(|e| bad(&e))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sidelengths `2^i * d0` for `i in 0..n`.
pub fn lod_sidelengths(n: usize, d0: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut d = d0;
    for _ in 0..n {
        out.push(d);
        d *= 2.0;
    }
    out
}

/// Concentric LOD patches around an arbitrary center.
pub fn patch_specs_at(center: GeoPoint, theta: f64, lod: &LodConfig) -> Vec<PatchSpec> {
    lod_sidelengths(lod.n, lod.d0)
        .into_iter()
        .map(|d| PatchSpec {
            center,
            sidelength: d,
            orientation: theta,
            pixels: lod.pixels,
        })
        .collect()
}

pub fn patch_specs_for_cell(
    cell: CellIndex,
    layout: &RegionLayout,
    lod: &LodConfig,
    theta: f64,
) -> Result<Vec<PatchSpec>> {
    lod.validate()?;
    Ok(patch_specs_at(layout.cell_center(cell)?, theta, lod))
}

/// Samples `spec` from `src`; returns the image and the fraction of output
/// pixels that fell inside the raster. Pixels outside are black.
pub fn extract_patch_with_coverage(src: &GeoRaster, spec: &PatchSpec) -> (Image, f64) {
    let p = spec.pixels;
    let res = spec.resolution();
    let (sin_t, cos_t) = spec.orientation.sin_cos();
    let r = src.earth_radius;
    let (dlat, dlon) = src.pixel_angles();
    // Output pixel (u, v) maps affinely onto raster pixel coordinates.
    let (col_c, row_c) = src.geo_to_pixel(&spec.center);
    let east_to_col = 1.0 / (r * spec.center.lat.cos() * dlon);
    let north_to_row = -1.0 / (r * dlat);
    let half = 0.5 * p as f64;
    let mut img = Image::new(p, p);
    let mut covered = 0usize;
    for v in 0..p {
        let n_local = -(v as f64 + 0.5 - half) * res;
        for u in 0..p {
            let e_local = (u as f64 + 0.5 - half) * res;
            let east = e_local * cos_t - n_local * sin_t;
            let north = e_local * sin_t + n_local * cos_t;
            let col = col_c + east * east_to_col;
            let row = row_c + north * north_to_row;
            if let Some(rgb) = src.sample(col, row) {
                img.set_pixel(u, v, rgb);
                covered += 1;
            }
        }
    }
    (img, covered as f64 / (p * p) as f64)
}

pub fn extract_patch(src: &GeoRaster, spec: &PatchSpec) -> Result<Image> {
    let (img, coverage) = extract_patch_with_coverage(src, spec);
    if coverage == 0.0 {
        return Err(Error::Coverage(format!(
            "patch at ({:.6}, {:.6}) deg does not intersect the raster",
            spec.center.lat_deg(),
            spec.center.lon_deg()
        )));
    }
    Ok(img)
}
