//! Quick property checks over every module, run by `cellgeo selftest`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::BatchMask;
use crate::error::Result;
use crate::geodesy::{CellIndex, GeoPoint, RegionLayout};
use crate::mining::{cluster_pool, MiningState};
use crate::model::gradcheck::{gradcheck, GradcheckConfig};
use crate::model::{init_params, read_checkpoint, write_checkpoint, Embedding, ModelConfig};
use crate::raster::{patch_specs_for_cell, LodConfig};
use crate::retrieval::{knn_exact, score, DbRecord, EmbeddingDatabase, GraphIndex, GraphParams, Searcher};
use crate::training::loss::dcl_loss;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(u64) -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("layout-round-trip", layout_round_trip),
    ("layout-shape-bound", layout_shape_bound),
    ("lod-geometry", lod_geometry),
    ("gradient", gradient),
    ("loss-unit-value", loss_unit_value),
    ("mining-partition", mining_partition),
    ("mining-schedule", mining_schedule),
    ("retrieval-oracle", retrieval_oracle),
    ("format-round-trip", format_round_trip),
];

/// Runs every check; a check that errors counts as failed.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| match f(seed) {
            Ok((passed, detail)) => CheckOutcome { name, passed, detail },
            Err(e) => CheckOutcome {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn layout_round_trip(seed: u64) -> Result<(bool, String)> {
    let layout = RegionLayout::default();
    let (lo, hi) = layout.band_range();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..10_000 {
        let band = rng.random_range(lo..=hi);
        let (s0, s1) = layout.step_range(band)?;
        let cell = CellIndex::new(band, rng.random_range(s0..=s1));
        if layout.cell_of_point(&layout.cell_center(cell)?)? != cell {
            failures += 1;
        }
    }
    Ok((failures == 0, format!("{failures} failures over 10000 cells")))
}

fn layout_shape_bound(_: u64) -> Result<(bool, String)> {
    let r = RegionLayout::default().shape_report();
    Ok((
        r.min_ratio > 1.0 - 6.3e-4 && r.max_side_deviation_m <= 0.019,
        format!("min k = {:.9}, max side deviation = {:.4} m", r.min_ratio, r.max_side_deviation_m),
    ))
}

fn lod_geometry(_: u64) -> Result<(bool, String)> {
    let layout = RegionLayout::default();
    let specs = patch_specs_for_cell(CellIndex::new(0, 0), &layout, &LodConfig::full_resolution(), 0.0)?;
    let sides: Vec<f64> = specs.iter().map(|s| s.sidelength).collect();
    let res: Vec<f64> = specs.iter().map(|s| s.resolution()).collect();
    let ok = sides == [76.8, 153.6, 307.2, 614.4]
        && res.iter().zip([0.2, 0.4, 0.8, 1.6]).all(|(a, b)| (a - b).abs() < 1e-12);
    Ok((ok, format!("sides {sides:?}, m/px {res:?}")))
}

fn gradient(seed: u64) -> Result<(bool, String)> {
    let report = gradcheck(seed, &GradcheckConfig::default())?;
    let err = report.max_rel_error();
    Ok((err < 1e-4, format!("max relative error {err:.3e}")))
}

fn loss_unit_value(_: u64) -> Result<(bool, String)> {
    let s = Array2::<f64>::eye(2);
    let loss = dcl_loss(&s, &BatchMask::full(2), 1.0, 0.0)?;
    Ok(((loss + 1.0).abs() < 1e-12, format!("loss {loss}")))
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Result<Embedding> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Embedding::normalized(v)
}

fn mining_partition(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..100 {
        let b = rng.random_range(1..=8);
        let n = b * rng.random_range(1..=8);
        let q: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, 8)).collect::<Result<_>>()?;
        let r: Vec<Embedding> = (0..n).map(|_| random_unit(&mut rng, 8)).collect::<Result<_>>()?;
        let batches = cluster_pool(&q, &r, b, &mut rng)?;
        let mut seen = vec![false; n];
        for batch in &batches {
            if batch.len() != b {
                return Ok((false, format!("trial {trial}: batch of {} for b={b}", batch.len())));
            }
            for &i in batch {
                if std::mem::replace(&mut seen[i], true) {
                    return Ok((false, format!("trial {trial}: index {i} repeated")));
                }
            }
        }
        if !seen.iter().all(|&s| s) {
            return Ok((false, format!("trial {trial}: not an exact cover")));
        }
    }
    Ok((true, "100 random pools".into()))
}

fn mining_schedule(_: u64) -> Result<(bool, String)> {
    let state = MiningState::new(30, 1 << 14)?;
    let ok = state.pool_size() == 30 && state.min_iters_per_increase() == 167 && state.cap() == 15_360;
    Ok((
        ok,
        format!(
            "s0 = {}, floor = {}, cap = {}",
            state.pool_size(),
            state.min_iters_per_increase(),
            state.cap()
        ),
    ))
}

fn retrieval_oracle(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = RegionLayout::default();
    let dim = 16;
    let mut db = EmbeddingDatabase::new(layout, dim);
    let origin = layout.cell_of_point(&GeoPoint::from_degrees(10.0, 20.0))?;
    for k in 0..2000 {
        let e = random_unit(&mut rng, dim)?;
        db.push(DbRecord {
            cell: CellIndex::new(origin.band + k / 50, origin.step + k % 50),
            covered: true,
            embedding: e.to_f32(),
        })?;
    }
    let index = GraphIndex::build(&db, GraphParams::default())?;
    let mut overlap = 0;
    for q in 0..100 {
        let query = random_unit(&mut rng, dim)?;
        let mut oracle: Vec<(f64, CellIndex)> = db
            .records()
            .iter()
            .map(|r| (score(&r.embedding, query.as_slice()), r.cell))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let exact = knn_exact(&db, &query, 10)?;
        if exact.iter().zip(&oracle).any(|(h, o)| h.cell != o.1) {
            return Ok((false, format!("query {q}: exact ranking disagrees with the scan")));
        }
        let approx = crate::retrieval::search(&db, Searcher::Graph { index: &index, ef_search: crate::retrieval::DEFAULT_EF_SEARCH }, &query, 10)?;
        overlap += approx.iter().filter(|h| exact.iter().any(|e| e.cell == h.cell)).count();
    }
    let ratio = overlap as f64 / 1000.0;
    Ok((ratio >= 0.95, format!("graph top-10 overlap {ratio:.3}")))
}

fn format_round_trip(seed: u64) -> Result<(bool, String)> {
    let cfg = ModelConfig {
        street_image_size: 16,
        aerial_image_size: 16,
        token_dim: 8,
        embed_dim: 8,
        heads: 2,
        n_lods: 2,
        ..ModelConfig::default()
    };
    let params = init_params(cfg, seed)?;
    let mut a = Vec::new();
    write_checkpoint(&params, &mut a)?;
    let mut b = Vec::new();
    write_checkpoint(&read_checkpoint(a.as_slice())?, &mut b)?;

    let layout = RegionLayout::default();
    let mut db = EmbeddingDatabase::new(layout, 2);
    let band = layout.cell_of_point(&GeoPoint::from_degrees(-33.0, 180.0))?.band;
    let (s0, s1) = layout.step_range(band)?;
    for (k, cell) in [CellIndex::new(band, s1), CellIndex::new(band, s0), CellIndex::new(-5, 0)]
        .into_iter()
        .enumerate()
    {
        let t = k as f32;
        db.push(DbRecord {
            cell,
            covered: k != 1,
            embedding: vec![t.cos(), t.sin()],
        })?;
    }
    let mut x = Vec::new();
    db.write(&mut x)?;
    let mut y = Vec::new();
    EmbeddingDatabase::read(x.as_slice())?.write(&mut y)?;
    Ok((a == b && x == y, format!("checkpoint {} B, database {} B", a.len(), x.len())))
}
