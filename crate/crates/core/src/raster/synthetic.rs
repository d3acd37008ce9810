//! Procedural stand-in for orthophotos and street-view captures.
//!
//! The aerial texture is multi-octave value noise, one independent field
//! per color channel. Street views are top-down crops of the same texture
//! ahead of the camera, rotated so the heading points up, with additive
//! photometric noise.

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{extract_patch_with_coverage, GeoRaster, Image, PatchSpec};
use crate::dataset::{ImageRef, PhotoRecord};
use crate::error::{Error, Result};
use crate::geodesy::{wrap_lon, GeoPoint, DEFAULT_EARTH_RADIUS_M};

const MAX_AREA_KM2: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub region_min: GeoPoint,
    pub region_max: GeoPoint,
    pub octaves: u32,
    pub base_wavelength_m: f64,
    /// Amplitude ratio between successive octaves.
    pub persistence: f64,
    /// Gain applied around mid-gray after octave summation.
    pub contrast: f64,
    pub photometric_noise_sigma: f64,
    pub resolution_m: f64,
    pub street_image_px: usize,
    pub street_footprint_m: f64,
    pub street_lookahead_m: f64,
    pub earth_radius: f64,
}

impl SyntheticWorld {
    /// A square region of `size_m` meters centered on `center`.
    pub fn centered(seed: u64, center: GeoPoint, size_m: f64) -> Self {
        let r = DEFAULT_EARTH_RADIUS_M;
        let half = 0.5 * size_m;
        Self {
            seed,
            region_min: center.offset_m(-half, -half, r),
            region_max: center.offset_m(half, half, r),
            octaves: 7,
            base_wavelength_m: 1280.0,
            persistence: 0.5,
            contrast: 2.0,
            photometric_noise_sigma: 0.03,
            resolution_m: 0.5,
            street_image_px: 32,
            street_footprint_m: 40.0,
            street_lookahead_m: 10.0,
            earth_radius: r,
        }
    }

    /// Metric `(east, north)` extent of the region.
    pub fn extent_m(&self) -> (f64, f64) {
        let dlon = wrap_lon(self.region_max.lon - self.region_min.lon);
        (
            dlon * self.earth_radius * self.region_max.lat.cos(),
            (self.region_max.lat - self.region_min.lat) * self.earth_radius,
        )
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        p.lat >= self.region_min.lat
            && p.lat <= self.region_max.lat
            && wrap_lon(p.lon - self.region_min.lon) >= 0.0
            && wrap_lon(p.lon - self.region_min.lon)
                <= wrap_lon(self.region_max.lon - self.region_min.lon)
    }

    fn validate(&self) -> Result<()> {
        let (e, n) = self.extent_m();
        if !(e > 0.0 && n > 0.0) {
            return Err(Error::Parameter("synthetic region is empty".into()));
        }
        if e * n / 1e6 > MAX_AREA_KM2 {
            return Err(Error::Resource(format!(
                "synthetic region of {:.1} km^2 exceeds {MAX_AREA_KM2} km^2",
                e * n / 1e6
            )));
        }
        if !(self.resolution_m > 0.0) || self.octaves == 0 || !(self.base_wavelength_m > 0.0) {
            return Err(Error::Parameter("invalid synthetic texture parameters".into()));
        }
        Ok(())
    }

    /// Texture value of one channel at metric position `(x, y)` (east, south
    /// of the region's north-west corner).
    pub fn texture(&self, x: f64, y: f64, channel: u32) -> f64 {
        let mut sum = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut wavelength = self.base_wavelength_m;
        for octave in 0..self.octaves {
            let key = self.octave_key(channel, octave);
            sum += amp * value_noise(key, x / wavelength, y / wavelength);
            norm += amp;
            amp *= self.persistence;
            wavelength *= 0.5;
        }
        (0.5 + self.contrast * (sum / norm - 0.5)).clamp(0.0, 1.0)
    }

    /// `key = value` text that [`SyntheticWorld::from_config_text`] reads back.
    pub fn to_config_text(&self) -> String {
        format!(
            "seed = {}\nmin_lat_deg = {}\nmin_lon_deg = {}\nmax_lat_deg = {}\nmax_lon_deg = {}\n\
             octaves = {}\nbase_wavelength_m = {}\npersistence = {}\ncontrast = {}\n\
             photometric_noise_sigma = {}\nresolution_m = {}\nstreet_image_px = {}\n\
             street_footprint_m = {}\nstreet_lookahead_m = {}\nearth_radius_m = {}\n",
            self.seed,
            self.region_min.lat_deg(),
            self.region_min.lon_deg(),
            self.region_max.lat_deg(),
            self.region_max.lon_deg(),
            self.octaves,
            self.base_wavelength_m,
            self.persistence,
            self.contrast,
            self.photometric_noise_sigma,
            self.resolution_m,
            self.street_image_px,
            self.street_footprint_m,
            self.street_lookahead_m,
            self.earth_radius,
        )
    }

    pub fn from_config_text(text: &str) -> Result<Self> {
        let kv = crate::config::parse_key_values(text)?;
        fn get<T: std::str::FromStr>(kv: &std::collections::BTreeMap<String, String>, key: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            let raw = kv
                .get(key)
                .ok_or_else(|| Error::Format(format!("world config lacks `{key}`")))?;
            raw.parse()
                .map_err(|e| Error::Format(format!("world config `{key}`: {e}")))
        }
        let world = Self {
            seed: get(&kv, "seed")?,
            region_min: GeoPoint::from_degrees(get(&kv, "min_lat_deg")?, get(&kv, "min_lon_deg")?),
            region_max: GeoPoint::from_degrees(get(&kv, "max_lat_deg")?, get(&kv, "max_lon_deg")?),
            octaves: get(&kv, "octaves")?,
            base_wavelength_m: get(&kv, "base_wavelength_m")?,
            persistence: get(&kv, "persistence")?,
            contrast: get(&kv, "contrast")?,
            photometric_noise_sigma: get(&kv, "photometric_noise_sigma")?,
            resolution_m: get(&kv, "resolution_m")?,
            street_image_px: get(&kv, "street_image_px")?,
            street_footprint_m: get(&kv, "street_footprint_m")?,
            street_lookahead_m: get(&kv, "street_lookahead_m")?,
            earth_radius: get(&kv, "earth_radius_m")?,
        };
        world.validate()?;
        Ok(world)
    }

    fn octave_key(&self, channel: u32, octave: u32) -> u64 {
        mix64(self.seed ^ mix64(((channel as u64) << 32) | octave as u64))
    }

    /// Random photos inside the region, at least `margin_m` from its edges.
    pub fn sample_photos<R: Rng>(
        &self,
        count: usize,
        margin_m: f64,
        id_prefix: &str,
        rng: &mut R,
    ) -> Vec<PhotoRecord> {
        let (e, n) = self.extent_m();
        let nw = GeoPoint::new(self.region_max.lat, self.region_min.lon);
        (0..count)
            .map(|k| {
                let east = rng.random_range(margin_m..(e - margin_m).max(margin_m + 1e-9));
                let south = rng.random_range(margin_m..(n - margin_m).max(margin_m + 1e-9));
                let pos = nw.offset_m(east, -south, self.earth_radius);
                let heading = rng.random_range(0.0..std::f64::consts::TAU);
                PhotoRecord {
                    id: format!("{id_prefix}{k:06}"),
                    location: pos,
                    captured_at: Some(random_timestamp(rng)),
                    image: ImageRef::Synthetic {
                        position: pos,
                        heading,
                    },
                }
            })
            .collect()
    }
}

fn random_timestamp<R: Rng>(rng: &mut R) -> DateTime<Utc> {
    let year = rng.random_range(2014..=2023);
    let day = rng.random_range(0..365i64);
    let hour = rng.random_range(0..24);
    let minute = rng.random_range(0..60);
    Utc.with_ymd_and_hms(year, 1, 1, hour, minute, 0)
        .single()
        .expect("valid timestamp")
        + chrono::Duration::days(day)
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(key: u64, ix: i64, iy: i64) -> f64 {
    let h = mix64(key ^ mix64((ix as u64).wrapping_mul(0x2545_f491_4f6c_dd1d) ^ iy as u64));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(key: u64, x: f64, y: f64) -> f64 {
    let (xf, yf) = (x.floor(), y.floor());
    let (ix, iy) = (xf as i64, yf as i64);
    let (tx, ty) = (smooth(x - xf), smooth(y - yf));
    let a = lattice(key, ix, iy);
    let b = lattice(key, ix + 1, iy);
    let c = lattice(key, ix, iy + 1);
    let d = lattice(key, ix + 1, iy + 1);
    let top = a + tx * (b - a);
    let bot = c + tx * (d - c);
    top + ty * (bot - top)
}

/// Renders the world's aerial raster. Deterministic in the world parameters.
pub fn synth_aerial(world: &SyntheticWorld) -> Result<GeoRaster> {
    world.validate()?;
    let (e, n) = world.extent_m();
    let res = world.resolution_m;
    let width = (e / res).ceil() as usize + 1;
    let height = (n / res).ceil() as usize + 1;
    let anchor = GeoPoint::new(world.region_max.lat, world.region_min.lon);
    let mut data = vec![0u8; width * height * 3];
    data.par_chunks_mut(width * 3)
        .enumerate()
        .for_each(|(row, out)| render_row(world, row, width, out));
    GeoRaster::with_radius(anchor, res, width, height, data, world.earth_radius)
}

fn render_row(world: &SyntheticWorld, row: usize, width: usize, out: &mut [u8]) {
    let res = world.resolution_m;
    let y = row as f64 * res;
    let mut acc = vec![0.0f64; width * 3];
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut wavelength = world.base_wavelength_m;
    for octave in 0..world.octaves {
        let gy = y / wavelength;
        let iy = gy.floor();
        let ty = smooth(gy - iy);
        let iy = iy as i64;
        let cells = ((width - 1) as f64 * res / wavelength).floor() as i64 + 2;
        for channel in 0..3u32 {
            let key = world.octave_key(channel, octave);
            // Lattice values along this row, interpolated vertically once.
            let column: Vec<f64> = (0..=cells)
                .map(|ix| {
                    let a = lattice(key, ix, iy);
                    let c = lattice(key, ix, iy + 1);
                    a + ty * (c - a)
                })
                .collect();
            for col in 0..width {
                let gx = col as f64 * res / wavelength;
                let ix = gx.floor();
                let tx = smooth(gx - ix);
                let ix = ix as usize;
                let v = column[ix] + tx * (column[ix + 1] - column[ix]);
                acc[col * 3 + channel as usize] += amp * v;
            }
        }
        norm += amp;
        amp *= world.persistence;
        wavelength *= 0.5;
    }
    for (o, a) in out.iter_mut().zip(&acc) {
        let v = (0.5 + world.contrast * (a / norm - 0.5)).clamp(0.0, 1.0);
        *o = (v * 255.0).round() as u8;
    }
}

/// Patch spec of the street-view crop for a camera pose.
pub fn street_view_spec(world: &SyntheticWorld, pos: GeoPoint, heading: f64) -> PatchSpec {
    let ahead = world.street_lookahead_m;
    PatchSpec {
        center: pos.offset_m(ahead * heading.sin(), ahead * heading.cos(), world.earth_radius),
        sidelength: world.street_footprint_m,
        orientation: -heading,
        pixels: world.street_image_px,
    }
}

/// Top-down street view for a camera at `pos` looking along `heading`
/// (clockwise from north).
pub fn synth_street_view(
    world: &SyntheticWorld,
    aerial: &GeoRaster,
    pos: GeoPoint,
    heading: f64,
    rng_seed: u64,
) -> Result<Image> {
    if !world.contains(&pos) {
        return Err(Error::Coverage(format!(
            "camera at ({:.6}, {:.6}) deg is outside the synthetic world",
            pos.lat_deg(),
            pos.lon_deg()
        )));
    }
    let spec = street_view_spec(world, pos, heading);
    let (mut img, _) = extract_patch_with_coverage(aerial, &spec);
    let sigma = world.photometric_noise_sigma;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| Error::Parameter(format!("photometric noise: {e}")))?;
        img.map_values(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0));
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::extract_patch;

    fn small_world(seed: u64) -> SyntheticWorld {
        let mut w = SyntheticWorld::centered(seed, GeoPoint::from_degrees(42.36, -71.06), 200.0);
        w.resolution_m = 1.0;
        w
    }

    fn mean_abs_diff(a: &GeoRaster, b: &GeoRaster) -> f64 {
        let sum: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).abs() / 255.0)
            .sum();
        sum / a.data().len() as f64
    }

    #[test]
    fn config_text_round_trip() {
        let mut w = small_world(9);
        w.contrast = 1.75;
        let back = SyntheticWorld::from_config_text(&w.to_config_text()).unwrap();
        assert_eq!(back.to_config_text(), w.to_config_text());
        assert!((back.region_min.lat - w.region_min.lat).abs() < 1e-15);
        assert_eq!(back.contrast, 1.75);
        assert!(SyntheticWorld::from_config_text("seed = 1\n").is_err());
    }

    #[test]
    fn same_seed_same_raster() {
        let a = synth_aerial(&small_world(3)).unwrap();
        let b = synth_aerial(&small_world(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = synth_aerial(&small_world(3)).unwrap();
        let b = synth_aerial(&small_world(4)).unwrap();
        let mad = mean_abs_diff(&a, &b);
        assert!(mad > 0.05, "{mad}");
    }

    #[test]
    fn long_wavelength_single_octave_is_flat() {
        let mut w = small_world(11);
        w.octaves = 1;
        w.base_wavelength_m = 1e6;
        let r = synth_aerial(&w).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> =
                r.data().iter().skip(c).step_by(3).map(|&v| v as f64 / 255.0).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(var.sqrt() < 0.1, "channel {c}: {}", var.sqrt());
        }
    }

    #[test]
    fn row_renderer_matches_pointwise_texture() {
        let w = small_world(5);
        let r = synth_aerial(&w).unwrap();
        for &(col, row) in &[(0usize, 0usize), (17, 93), (150, 4), (199, 199)] {
            let px = r.pixel(col, row);
            for c in 0..3 {
                let t = w.texture(col as f64 * w.resolution_m, row as f64 * w.resolution_m, c);
                assert!((px[c as usize] as f64 - (t * 255.0).round()).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn oversized_region_is_rejected() {
        let w = SyntheticWorld::centered(1, GeoPoint::from_degrees(0.0, 0.0), 11_000.0);
        assert!(matches!(synth_aerial(&w), Err(Error::Resource(_))));
    }

    #[test]
    fn noiseless_view_is_a_patch() {
        let mut w = small_world(8);
        w.photometric_noise_sigma = 0.0;
        let r = synth_aerial(&w).unwrap();
        let pos = GeoPoint::from_degrees(42.36, -71.06);
        let img = synth_street_view(&w, &r, pos, 0.0, 1).unwrap();
        let spec = PatchSpec::new(
            pos.offset_m(0.0, w.street_lookahead_m, w.earth_radius),
            w.street_footprint_m,
            0.0,
            w.street_image_px,
        )
        .unwrap();
        assert_eq!(img, extract_patch(&r, &spec).unwrap());
    }

    #[test]
    fn noise_is_bounded() {
        let mut w = small_world(9);
        w.photometric_noise_sigma = 0.02;
        let r = synth_aerial(&w).unwrap();
        let pos = GeoPoint::from_degrees(42.3601, -71.0601);
        let a = synth_street_view(&w, &r, pos, 1.0, 1).unwrap();
        let b = synth_street_view(&w, &r, pos, 1.0, 2).unwrap();
        assert_ne!(a, b);
        let within = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| (*x - *y).abs() <= 5.0 * w.photometric_noise_sigma)
            .count();
        assert!(within as f64 >= 0.99 * a.data().len() as f64);
    }

    #[test]
    fn reversed_heading_looks_behind() {
        let mut w = small_world(10);
        w.photometric_noise_sigma = 0.0;
        let r = synth_aerial(&w).unwrap();
        let pos = GeoPoint::from_degrees(42.3602, -71.0599);
        let h = 0.4;
        let img = synth_street_view(&w, &r, pos, h + std::f64::consts::PI, 0).unwrap();
        // Recompute the crop geometry directly: 10 m behind, rotated a half turn.
        let back = pos.offset_m(-10.0 * h.sin(), -10.0 * h.cos(), w.earth_radius);
        let spec = PatchSpec::new(back, 40.0, -h - std::f64::consts::PI, 32).unwrap();
        let expect = extract_patch(&r, &spec).unwrap();
        assert!(img.max_abs_diff(&expect) < 1e-9);
        // And it is the forward crop's opposite half-turn only when centered on
        // the same point, which it is not.
        let fwd = synth_street_view(&w, &r, pos, h, 0).unwrap();
        assert!(fwd.max_abs_diff(&img.rotate_180()) > 1e-3);
    }

    #[test]
    fn camera_outside_world_is_rejected() {
        let w = small_world(1);
        let r = synth_aerial(&w).unwrap();
        let far = GeoPoint::from_degrees(43.0, -71.06);
        assert!(matches!(
            synth_street_view(&w, &r, far, 0.0, 0),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn photos_fall_inside_region() {
        let w = small_world(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let photos = w.sample_photos(50, 10.0, "p", &mut rng);
        assert_eq!(photos.len(), 50);
        assert!(photos.iter().all(|p| w.contains(&p.location)));
    }
}
