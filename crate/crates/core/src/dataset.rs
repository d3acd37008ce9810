//! Photo manifests, 5 m dedup partitioning, batch sampling with pose
//! augmentation, and false-negative masking.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::{geodesic_distance, CellIndex, GeoPoint, RegionLayout};

/// Where the pixels of a street-view photo come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageRef {
    Path(PathBuf),
    /// Rendered from a synthetic world; `heading` is clockwise from north.
    Synthetic { position: GeoPoint, heading: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhotoRecord {
    pub id: String,
    pub location: GeoPoint,
    pub captured_at: Option<DateTime<Utc>>,
    pub image: ImageRef,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    lat: f64,
    lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    captured_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticPose>,
}

#[derive(Serialize, Deserialize)]
struct SyntheticPose {
    lat: f64,
    lon: f64,
    heading_deg: f64,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<PhotoRecord>,
    pub skipped: usize,
}

fn parse_line(line: &str, base: &Path) -> Option<PhotoRecord> {
    let raw: ManifestLine = serde_json::from_str(line).ok()?;
    let location = GeoPoint::from_degrees(raw.lat, raw.lon);
    if !location.is_valid() || raw.lat.abs() > 90.0 || raw.id.is_empty() {
        return None;
    }
    let captured_at = match raw.captured_at {
        Some(s) => Some(DateTime::parse_from_rfc3339(&s).ok()?.with_timezone(&Utc)),
        None => None,
    };
    let image = match (raw.image, raw.synthetic) {
        (Some(path), None) => {
            let p = PathBuf::from(path);
            ImageRef::Path(if p.is_absolute() { p } else { base.join(p) })
        }
        (None, Some(pose)) => {
            let position = GeoPoint::from_degrees(pose.lat, pose.lon);
            if !position.is_valid() || !pose.heading_deg.is_finite() {
                return None;
            }
            ImageRef::Synthetic {
                position,
                heading: pose.heading_deg.to_radians(),
            }
        }
        _ => return None,
    };
    Some(PhotoRecord {
        id: raw.id,
        location,
        captured_at,
        image,
    })
}

/// Reads a JSON-lines manifest. Relative image paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut skipped = 0;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, base) {
            Some(r) => records.push(r),
            None => skipped += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Validation(format!("duplicate photo id `{}`", r.id)));
        }
    }
    Ok(Manifest { records, skipped })
}

/// Decimal degrees rounded to 1e-9 (about 0.1 mm), so that a written file
/// reads back and rewrites byte-identically.
pub(crate) fn file_degrees(rad: f64) -> f64 {
    (rad.to_degrees() * 1e9).round() / 1e9
}

pub fn write_manifest<W: Write>(mut w: W, records: &[PhotoRecord]) -> Result<()> {
    for r in records {
        let mut line = ManifestLine {
            id: r.id.clone(),
            lat: file_degrees(r.location.lat),
            lon: file_degrees(r.location.lon),
            captured_at: r.captured_at.map(|t| t.to_rfc3339()),
            image: None,
            synthetic: None,
        };
        match &r.image {
            ImageRef::Path(p) => line.image = Some(p.to_string_lossy().into_owned()),
            ImageRef::Synthetic { position, heading } => {
                line.synthetic = Some(SyntheticPose {
                    lat: file_degrees(position.lat),
                    lon: file_degrees(position.lon),
                    heading_deg: file_degrees(*heading),
                })
            }
        }
        let json = serde_json::to_string(&line)
            .map_err(|e| Error::Format(format!("manifest record `{}`: {e}", r.id)))?;
        writeln!(w, "{json}")?;
    }
    Ok(())
}

/// Photos grouped by the small dedup cell they fall in, ordered by cell.
#[derive(Clone, Debug)]
pub struct DedupPartition {
    cells: Vec<(CellIndex, Vec<usize>)>,
}

impl DedupPartition {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// `(cell, indices into the photo slice)` pairs.
    pub fn cells(&self) -> &[(CellIndex, Vec<usize>)] {
        &self.cells
    }

    pub fn id_map(&self, photos: &[PhotoRecord]) -> BTreeMap<CellIndex, Vec<String>> {
        self.cells
            .iter()
            .map(|(c, idx)| (*c, idx.iter().map(|&i| photos[i].id.clone()).collect()))
            .collect()
    }
}

pub fn dedup_partition(photos: &[PhotoRecord], layout: &RegionLayout) -> Result<DedupPartition> {
    let mut map: BTreeMap<CellIndex, Vec<usize>> = BTreeMap::new();
    for (i, p) in photos.iter().enumerate() {
        map.entry(layout.cell_of_point(&p.location)?).or_default().push(i);
    }
    Ok(DedupPartition {
        cells: map.into_iter().collect(),
    })
}

/// `b` distinct dedup cells drawn uniformly, one uniformly chosen photo each.
/// Returns indices into the photo slice.
pub fn sample_batch<R: Rng + ?Sized>(
    rng: &mut R,
    partition: &DedupPartition,
    b: usize,
) -> Result<Vec<usize>> {
    if partition.len() < b {
        return Err(Error::InsufficientData {
            needed: b,
            available: partition.len(),
        });
    }
    let picks = rand::seq::index::sample(rng, partition.len(), b);
    Ok(picks
        .into_iter()
        .map(|c| {
            let members = &partition.cells[c].1;
            members[rng.random_range(0..members.len())]
        })
        .collect())
}

/// A photo and the randomly posed training cell that contains it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingPair {
    pub photo: usize,
    pub photo_location: GeoPoint,
    pub cell_center: GeoPoint,
    pub cell_theta: f64,
    /// Photo position in the rotated cell frame, meters.
    pub offset: [f64; 2],
}

pub fn max_offset(cell_size: f64, l_delta: f64) -> f64 {
    0.5 * cell_size - l_delta
}

/// Draws a cell orientation in `[0, 2pi)` and an offset in
/// `[-t_max, t_max]^2` (cell frame), then places the cell so that the photo
/// sits at that offset.
pub fn make_training_pair<R: Rng + ?Sized>(
    photo: usize,
    location: GeoPoint,
    rng: &mut R,
    cell_size: f64,
    l_delta: f64,
    earth_radius: f64,
) -> Result<TrainingPair> {
    if !(cell_size > 2.0 * l_delta) || l_delta < 0.0 {
        return Err(Error::Parameter(format!(
            "need cell size > 2 * l_delta, got {cell_size} and {l_delta}"
        )));
    }
    let t_max = max_offset(cell_size, l_delta);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let offset = [
        rng.random_range(-t_max..=t_max),
        rng.random_range(-t_max..=t_max),
    ];
    Ok(pair_with(photo, location, theta, offset, earth_radius))
}

/// Deterministic core of [`make_training_pair`].
pub fn pair_with(
    photo: usize,
    location: GeoPoint,
    theta: f64,
    offset: [f64; 2],
    earth_radius: f64,
) -> TrainingPair {
    let (s, c) = theta.sin_cos();
    let east = offset[0] * c - offset[1] * s;
    let north = offset[0] * s + offset[1] * c;
    TrainingPair {
        photo,
        photo_location: location,
        cell_center: location.offset_m(-east, -north, earth_radius),
        cell_theta: theta,
        offset,
    }
}

/// Position of `p` in the frame of a cell centered at `center` rotated by
/// `theta` counterclockwise.
pub fn cell_frame_coords(center: &GeoPoint, theta: f64, p: &GeoPoint, earth_radius: f64) -> [f64; 2] {
    let (east, north) = center.local_offset_m(p, earth_radius);
    let (s, c) = theta.sin_cos();
    [east * c + north * s, -east * s + north * c]
}

/// How photo-to-cell distance is measured for false-negative masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskDistance {
    #[default]
    Center,
    Boundary,
}

impl std::str::FromStr for MaskDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(MaskDistance::Center),
            "boundary" => Ok(MaskDistance::Boundary),
            _ => Err(Error::Parameter(format!("mask distance `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MaskConfig {
    pub radius_m: f64,
    pub distance: MaskDistance,
    pub cell_size: f64,
    pub earth_radius: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            radius_m: 100.0,
            distance: MaskDistance::Center,
            cell_size: 30.0,
            earth_radius: crate::geodesy::DEFAULT_EARTH_RADIUS_M,
        }
    }
}

/// `b x b` matrix; `true` where the pair takes part as a negative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchMask {
    size: usize,
    data: Vec<bool>,
}

impl BatchMask {
    /// Every off-diagonal entry active.
    pub fn full(size: usize) -> Self {
        let mut data = vec![true; size * size];
        for i in 0..size {
            data[i * size + i] = false;
        }
        Self { size, data }
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                data.push(i != j && f(i, j));
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, active: bool) {
        assert!(i != j || !active, "diagonal entries cannot be negatives");
        self.data[i * self.size + j] = active;
    }

    pub fn transposed(&self) -> BatchMask {
        BatchMask::from_fn(self.size, |i, j| self.get(j, i))
    }
}

pub fn photo_to_cell_distance(pair_i: &TrainingPair, pair_j: &TrainingPair, cfg: &MaskConfig) -> f64 {
    match cfg.distance {
        MaskDistance::Center => {
            geodesic_distance(&pair_i.photo_location, &pair_j.cell_center, cfg.earth_radius)
        }
        MaskDistance::Boundary => {
            let [x, y] = cell_frame_coords(
                &pair_j.cell_center,
                pair_j.cell_theta,
                &pair_i.photo_location,
                cfg.earth_radius,
            );
            let half = 0.5 * cfg.cell_size;
            (x.abs() - half).max(0.0).hypot((y.abs() - half).max(0.0))
        }
    }
}

/// Pairs whose photo lies within `radius_m` of another sample's cell are
/// not used as negatives.
pub fn negative_mask(pairs: &[TrainingPair], cfg: &MaskConfig) -> BatchMask {
    BatchMask::from_fn(pairs.len(), |i, j| {
        photo_to_cell_distance(&pairs[i], &pairs[j], cfg) >= cfg.radius_m
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn photo(id: &str, lat: f64, lon: f64) -> PhotoRecord {
        let p = GeoPoint::from_degrees(lat, lon);
        PhotoRecord {
            id: id.into(),
            location: p,
            captured_at: None,
            image: ImageRef::Synthetic {
                position: p,
                heading: 0.0,
            },
        }
    }

    fn write_tmp(content: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let (_d, path) = write_tmp("");
        assert!(matches!(load_manifest(&path), Err(Error::EmptyDataset)));
    }

    #[test]
    fn malformed_lines_are_counted() {
        let text = r#"{"id":"a","lat":1.0,"lon":2.0,"image":"a.ppm"}
{"id":"b","lat":1.0,"lon":2.0,"captured_at":"2020-05-01T13:00:00Z","image":"b.ppm"}
{"id":"c","lat":1.0,"lon":2.0,"synthetic":{"lat":1.0,"lon":2.0,"heading_deg":90}}
{"id":"d","lat":"oops"}
"#;
        let (_d, path) = write_tmp(text);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.skipped, 1);
        assert!(m.records[1].captured_at.is_some());
        assert!(matches!(m.records[0].image, ImageRef::Path(ref p) if p.is_absolute()));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = r#"{"id":"x","lat":1.0,"lon":2.0,"image":"a.ppm"}
{"id":"x","lat":1.5,"lon":2.0,"image":"b.ppm"}
"#;
        let (_d, path) = write_tmp(text);
        match load_manifest(&path) {
            Err(Error::Validation(msg)) => assert!(msg.contains("`x`")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io() {
        assert!(load_manifest(Path::new("/nonexistent/m.jsonl")).unwrap_err().is_io());
    }

    #[test]
    fn manifest_round_trip() {
        let mut photos = vec![photo("a", 10.0, 20.0), photo("b", -5.0, 179.9)];
        photos[0].captured_at = Some(
            DateTime::parse_from_rfc3339("2019-07-04T08:30:00Z").unwrap().with_timezone(&Utc),
        );
        photos[1].image = ImageRef::Path(PathBuf::from("/data/b.ppm"));
        let mut buf = Vec::new();
        write_manifest(&mut buf, &photos).unwrap();
        let (_d, path) = write_tmp(std::str::from_utf8(&buf).unwrap());
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.records.len(), 2);
        assert_eq!(back.records[0].captured_at, photos[0].captured_at);
        assert_eq!(back.records[1].image, photos[1].image);
        assert!((back.records[0].location.lat - photos[0].location.lat).abs() < 1e-15);
        let mut again = Vec::new();
        write_manifest(&mut again, &back.records).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn nearby_photos_share_dedup_cell() {
        let layout = RegionLayout::with_cell_size(5.0).unwrap();
        let c = layout.cell_center(CellIndex::new(0, 0)).unwrap();
        let a = c.offset_m(-0.5, 0.0, layout.earth_radius());
        let b = c.offset_m(0.5, 0.0, layout.earth_radius());
        let photos = vec![
            PhotoRecord {
                location: a,
                ..photo("a", 0.0, 0.0)
            },
            PhotoRecord {
                location: b,
                ..photo("b", 0.0, 0.0)
            },
            photo("far", 0.001, 0.0),
        ];
        let part = dedup_partition(&photos, &layout).unwrap();
        assert_eq!(
            layout.cell_of_point(&a).unwrap(),
            layout.cell_of_point(&b).unwrap()
        );
        assert_eq!(part.len(), 2);
        let ids = part.id_map(&photos);
        assert!(ids.values().any(|v| v == &vec!["a".to_string(), "b".to_string()]));
    }

    #[test]
    fn identical_locations_form_one_cell() {
        let layout = RegionLayout::with_cell_size(5.0).unwrap();
        let photos: Vec<_> = (0..7).map(|i| photo(&format!("p{i}"), 12.0, 34.0)).collect();
        let part = dedup_partition(&photos, &layout).unwrap();
        assert_eq!(part.len(), 1);
        assert_eq!(part.cells()[0].1.len(), 7);
    }

    #[test]
    fn batch_needs_enough_cells() {
        let layout = RegionLayout::with_cell_size(5.0).unwrap();
        let photos: Vec<_> = (0..3).map(|i| photo(&format!("p{i}"), i as f64 * 0.01, 0.0)).collect();
        let part = dedup_partition(&photos, &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_batch(&mut rng, &part, 4),
            Err(Error::InsufficientData { needed: 4, available: 3 })
        ));
        let mut got = sample_batch(&mut rng, &part, 3).unwrap();
        got.sort();
        assert_eq!(got, vec![0, 1, 2]);
    }

    #[test]
    fn crowded_cell_contributes_one_photo() {
        let layout = RegionLayout::with_cell_size(5.0).unwrap();
        let mut photos: Vec<_> = (0..10).map(|i| photo(&format!("dup{i}"), 1.0, 1.0)).collect();
        photos.extend((0..3).map(|i| photo(&format!("s{i}"), 2.0 + i as f64 * 0.01, 1.0)));
        let part = dedup_partition(&photos, &layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let batch = sample_batch(&mut rng, &part, 4).unwrap();
            assert_eq!(batch.iter().filter(|&&i| i < 10).count(), 1);
        }
    }

    #[test]
    fn offset_bound_and_zero_pose() {
        assert_eq!(max_offset(30.0, 5.0), 10.0);
        let loc = GeoPoint::from_degrees(40.0, -3.0);
        let pair = pair_with(0, loc, 0.0, [0.0, 0.0], 6_371_000.0);
        assert_eq!(pair.cell_center, loc);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_training_pair(0, loc, &mut rng, 10.0, 5.0, 6_371_000.0).is_err());
    }

    #[test]
    fn mask_excludes_nearby_cells() {
        let r = 6_371_000.0;
        let base = GeoPoint::from_degrees(0.0, 0.0);
        let far = |k: f64| base.offset_m(2000.0 * k, 0.0, r);
        let mut pairs: Vec<_> = (0..4)
            .map(|k| pair_with(k, far(k as f64), 0.0, [0.0, 0.0], r))
            .collect();
        let cfg = MaskConfig::default();
        let m = negative_mask(&pairs, &cfg);
        assert_eq!(m, BatchMask::full(4));
        // Cell of pair 1 placed 50 m from photo 0.
        pairs[1].cell_center = base.offset_m(50.0, 0.0, r);
        let m = negative_mask(&pairs, &cfg);
        assert!(!m.get(0, 1));
        assert!(m.get(1, 0));
        for i in 0..4 {
            assert!(!m.get(i, i));
        }
    }

    #[test]
    fn boundary_distance_is_shorter_than_center_distance() {
        let r = 6_371_000.0;
        let base = GeoPoint::from_degrees(0.0, 0.0);
        let a = pair_with(0, base, 0.0, [0.0, 0.0], r);
        let b = pair_with(1, base.offset_m(110.0, 0.0, r), 0.3, [0.0, 0.0], r);
        let center = MaskConfig::default();
        let boundary = MaskConfig {
            distance: MaskDistance::Boundary,
            ..center
        };
        let dc = photo_to_cell_distance(&a, &b, &center);
        let db = photo_to_cell_distance(&a, &b, &boundary);
        assert!(dc > 100.0 && db < 100.0 && db > 80.0, "{dc} {db}");
    }
}
