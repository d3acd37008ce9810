//! Cell embedding database, exact and graph search, and recall metrics.

mod hnsw;
mod queries;

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::{Datelike, Timelike};
use rayon::prelude::*;

pub use hnsw::{GraphIndex, GraphParams, DEFAULT_EF_SEARCH};
pub use queries::{read_queries, write_queries, QueryRecord};

use crate::dataset::PhotoRecord;
use crate::error::{Error, Result};
use crate::geodesy::{geodesic_distance, CellIndex, GeoPoint, RegionLayout};
use crate::model::{embed_cell, Embedding, ModelParams};
use crate::raster::{extract_patch_with_coverage, patch_specs_for_cell, GeoRaster, LodConfig};

pub const DB_MAGIC: &[u8; 4] = b"GCDB";
pub const DB_VERSION: u32 = 1;
/// Default "within" radius of the recall metric.
pub const RECALL_RADIUS_M: f64 = 50.0;
const DB_UNIT_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct DbRecord {
    pub cell: CellIndex,
    /// False when the raster did not reach any pixel of the finest patch.
    pub covered: bool,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDatabase {
    layout: RegionLayout,
    dim: usize,
    records: Vec<DbRecord>,
    lookup: HashMap<CellIndex, usize>,
}

impl EmbeddingDatabase {
    pub fn new(layout: RegionLayout, dim: usize) -> Self {
        Self {
            layout,
            dim,
            records: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn layout(&self) -> &RegionLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[DbRecord] {
        &self.records
    }

    pub fn get(&self, cell: CellIndex) -> Option<&DbRecord> {
        self.lookup.get(&cell).map(|&i| &self.records[i])
    }

    pub fn position(&self, cell: CellIndex) -> Option<usize> {
        self.lookup.get(&cell).copied()
    }

    pub fn push(&mut self, record: DbRecord) -> Result<()> {
        if record.embedding.len() != self.dim {
            return Err(Error::Validation(format!(
                "embedding of cell {} has dim {}, database dim is {}",
                record.cell,
                record.embedding.len(),
                self.dim
            )));
        }
        let norm = record
            .embedding
            .iter()
            .map(|&x| x as f64 * x as f64)
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > DB_UNIT_TOL {
            return Err(Error::Validation(format!(
                "embedding of cell {} has norm {norm}",
                record.cell
            )));
        }
        if self.lookup.contains_key(&record.cell) {
            return Err(Error::Validation(format!("duplicate cell {}", record.cell)));
        }
        self.lookup.insert(record.cell, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn center(&self, i: usize) -> Result<GeoPoint> {
        self.layout.cell_center(self.records[i].cell)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DB_MAGIC)?;
        w.write_all(&DB_VERSION.to_le_bytes())?;
        w.write_all(&self.layout.cell_size().to_le_bytes())?;
        w.write_all(&self.layout.earth_radius().to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&r.cell.band.to_le_bytes())?;
            w.write_all(&r.cell.step.to_le_bytes())?;
            w.write_all(&[r.covered as u8])?;
            for v in &r.embedding {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        if &b4 != DB_MAGIC {
            return Err(Error::Format("not an embedding database (bad magic)".into()));
        }
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != DB_VERSION {
            return Err(Error::Format(format!("unsupported database version {version}")));
        }
        r.read_exact(&mut b8)?;
        let cell_size = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let radius = f64::from_le_bytes(b8);
        let layout = RegionLayout::new(cell_size, radius)
            .map_err(|e| Error::Format(format!("database layout: {e}")))?;
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8);
        let mut db = Self::new(layout, dim);
        let mut emb = vec![0u8; dim * 4];
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let band = i32::from_le_bytes(b4);
            r.read_exact(&mut b4)?;
            let step = i32::from_le_bytes(b4);
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let covered = match flag[0] {
                0 => false,
                1 => true,
                x => return Err(Error::Format(format!("bad coverage flag {x}"))),
            };
            r.read_exact(&mut emb)?;
            let embedding = emb
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            db.push(DbRecord {
                cell: CellIndex::new(band, step),
                covered,
                embedding,
            })
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(db)
    }
}

/// Embeds every cell of the box from north-up LOD patches.
pub fn build_database(
    params: &ModelParams,
    layout: &RegionLayout,
    raster: &GeoRaster,
    min: &GeoPoint,
    max: &GeoPoint,
    lod: &LodConfig,
) -> Result<EmbeddingDatabase> {
    let cells = layout.cells_in_box(min, max)?;
    if cells.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let size = params.config.aerial_image_size;
    let records: Vec<DbRecord> = cells
        .par_iter()
        .map(|&cell| {
            let specs = patch_specs_for_cell(cell, layout, lod, 0.0)?;
            let mut covered = false;
            let images: Vec<_> = specs
                .iter()
                .enumerate()
                .map(|(k, spec)| {
                    let (img, cov) = extract_patch_with_coverage(raster, spec);
                    if k == 0 {
                        covered = cov > 0.0;
                    }
                    if img.width() == size {
                        img
                    } else {
                        img.resize(size, size)
                    }
                })
                .collect();
            let e = embed_cell(params, &images)?;
            Ok(DbRecord {
                cell,
                covered,
                embedding: e.to_f32(),
            })
        })
        .collect::<Result<_>>()?;
    let mut db = EmbeddingDatabase::new(*layout, params.config.embed_dim);
    for r in records {
        db.push(r)?;
    }
    Ok(db)
}

/// One retrieved cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub cell: CellIndex,
    pub score: f64,
}

/// Dot product of a stored vector with a query, accumulated in `f64` in
/// index order. Every search path scores through this function.
pub fn score(stored: &[f32], query: &[f64]) -> f64 {
    stored.iter().zip(query).map(|(&a, &b)| a as f64 * b).sum()
}

/// Descending score, then ascending `(band, step)`.
pub fn hit_order(a: &Hit, b: &Hit) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.cell.cmp(&b.cell))
}

/// Exact top-`n` by full scan. Returns fewer hits when the database is
/// smaller than `n`.
pub fn knn_exact(db: &EmbeddingDatabase, query: &Embedding, n: usize) -> Result<Vec<Hit>> {
    if n == 0 {
        return Err(Error::Parameter("N must be >= 1".into()));
    }
    if query.len() != db.dim() {
        return Err(Error::Shape(format!(
            "query dim {} vs database dim {}",
            query.len(),
            db.dim()
        )));
    }
    let q = query.as_slice();
    let mut hits: Vec<Hit> = db
        .records()
        .iter()
        .map(|r| Hit {
            cell: r.cell,
            score: score(&r.embedding, q),
        })
        .collect();
    let n = n.min(hits.len());
    if n < hits.len() {
        hits.select_nth_unstable_by(n - 1, hit_order);
        hits.truncate(n);
    }
    hits.sort_by(hit_order);
    Ok(hits)
}

/// Search backend for metric evaluation.
#[derive(Clone, Copy)]
pub enum Searcher<'a> {
    Exact,
    Graph { index: &'a GraphIndex, ef_search: usize },
}

pub fn search(
    db: &EmbeddingDatabase,
    searcher: Searcher,
    query: &Embedding,
    n: usize,
) -> Result<Vec<Hit>> {
    match searcher {
        Searcher::Exact => knn_exact(db, query, n),
        Searcher::Graph { index, ef_search } => index.search(db, query, n, ef_search),
    }
}

/// Whether any of the first `n` hits has its center strictly closer than
/// `radius_m` to `location`.
pub fn is_hit(db: &EmbeddingDatabase, hits: &[Hit], n: usize, location: &GeoPoint, radius_m: f64) -> Result<bool> {
    for h in hits.iter().take(n) {
        let c = db.layout().cell_center(h.cell)?;
        if geodesic_distance(&c, location, db.layout().earth_radius()) < radius_m {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Top-`n` hits for every query, in query order.
pub fn search_all(
    db: &EmbeddingDatabase,
    searcher: Searcher,
    queries: &[Embedding],
    n: usize,
) -> Result<Vec<Vec<Hit>>> {
    queries
        .par_iter()
        .map(|q| search(db, searcher, q, n))
        .collect()
}

/// R@N<radius over precomputed result lists (each at least `n` long or the
/// whole database).
pub fn recall_from_results(
    db: &EmbeddingDatabase,
    results: &[Vec<Hit>],
    locations: &[GeoPoint],
    n: usize,
    radius_m: f64,
) -> Result<f64> {
    if results.is_empty() || results.len() != locations.len() {
        return Err(Error::Validation(format!(
            "{} result lists for {} queries",
            results.len(),
            locations.len()
        )));
    }
    let mut hits = 0usize;
    for (r, loc) in results.iter().zip(locations) {
        if is_hit(db, r, n, loc, radius_m)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Fraction of queries with a top-`n` cell center within `radius_m`.
pub fn recall_at_n_within(
    db: &EmbeddingDatabase,
    searcher: Searcher,
    queries: &[(GeoPoint, Embedding)],
    n: usize,
    radius_m: f64,
) -> Result<f64> {
    let embs: Vec<Embedding> = queries.iter().map(|(_, e)| e.clone()).collect();
    let locs: Vec<GeoPoint> = queries.iter().map(|(p, _)| *p).collect();
    let results = search_all(db, searcher, &embs, n)?;
    recall_from_results(db, &results, &locs, n, radius_m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKey {
    Year,
    /// UTC hour of day.
    Hour,
}

impl std::str::FromStr for GroupKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "year" => Ok(Self::Year),
            "hour" => Ok(Self::Hour),
            _ => Err(Error::Parameter(format!("group key `{s}` (expected year or hour)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupRow {
    pub key: String,
    pub count: usize,
    pub recall: f64,
    /// Fewer than the minimum count; the recall is noisy.
    pub small: bool,
}

/// Recall per capture year or hour. Queries without a timestamp are
/// grouped under `unknown`.
pub fn grouped_recall(
    db: &EmbeddingDatabase,
    results: &[Vec<Hit>],
    queries: &[PhotoRecord],
    key: GroupKey,
    n: usize,
    radius_m: f64,
    min_count: usize,
) -> Result<Vec<GroupRow>> {
    if results.len() != queries.len() {
        return Err(Error::Validation(format!(
            "{} result lists for {} queries",
            results.len(),
            queries.len()
        )));
    }
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (r, q) in results.iter().zip(queries) {
        let k = match (&q.captured_at, key) {
            (None, _) => "unknown".to_owned(),
            (Some(t), GroupKey::Year) => format!("{}", t.year()),
            (Some(t), GroupKey::Hour) => format!("{:02}", t.hour()),
        };
        let hit = is_hit(db, r, n, &q.location, radius_m)?;
        let e = groups.entry(k).or_default();
        e.0 += 1;
        e.1 += hit as usize;
    }
    Ok(groups
        .into_iter()
        .map(|(key, (count, hits))| GroupRow {
            key,
            count,
            recall: hits as f64 / count as f64,
            small: count < min_count,
        })
        .collect())
}

pub fn write_grouped_csv<W: Write>(mut w: W, rows: &[GroupRow]) -> Result<()> {
    writeln!(w, "group,count,recall,small")?;
    for r in rows {
        writeln!(w, "{},{},{:.6},{}", r.key, r.count, r.recall, r.small)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridRow {
    pub cell: CellIndex,
    pub center: GeoPoint,
    pub score: f64,
}

/// Score of every database cell inside the box, in `(band, step)` order.
pub fn score_grid(
    db: &EmbeddingDatabase,
    query: &Embedding,
    min: &GeoPoint,
    max: &GeoPoint,
) -> Result<Vec<GridRow>> {
    let cells = db.layout().cells_in_box(min, max)?;
    let mut rows = Vec::new();
    for cell in cells {
        if let Some(r) = db.get(cell) {
            rows.push(GridRow {
                cell,
                center: db.layout().cell_center(cell)?,
                score: score(&r.embedding, query.as_slice()),
            });
        }
    }
    Ok(rows)
}

pub fn write_score_grid_csv<W: Write>(mut w: W, rows: &[GridRow]) -> Result<()> {
    writeln!(w, "band_i,step_j,lat_deg,lon_deg,score")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.9},{:.9},{:.9}",
            r.cell.band,
            r.cell.step,
            r.center.lat_deg(),
            r.center.lon_deg(),
            r.score
        )?;
    }
    Ok(())
}

/// Writes `query_id,rank,band_i,step_j,score,dist_m,hit` rows (rank from 1).
pub fn write_results_csv<W: Write>(
    mut w: W,
    db: &EmbeddingDatabase,
    queries: &[(String, GeoPoint)],
    results: &[Vec<Hit>],
    radius_m: f64,
) -> Result<()> {
    writeln!(w, "query_id,rank,band_i,step_j,score,dist_m,hit")?;
    for ((id, loc), hits) in queries.iter().zip(results) {
        for (rank, h) in hits.iter().enumerate() {
            let c = db.layout().cell_center(h.cell)?;
            let d = geodesic_distance(&c, loc, db.layout().earth_radius());
            writeln!(
                w,
                "{id},{},{},{},{:.9},{:.3},{}",
                rank + 1,
                h.cell.band,
                h.cell.step,
                h.score,
                d,
                (d < radius_m) as u8
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
