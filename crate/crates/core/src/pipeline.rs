//! End-to-end runs on a synthetic world: generate, train, index, evaluate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{dedup_partition, MaskConfig, PhotoRecord};
use crate::error::{Error, Result};
use crate::geodesy::{geodesic_distance, GeoPoint, RegionLayout};
use crate::model::{embed_street, init_params, Embedding, ModelConfig, ModelParams};
use crate::raster::{synth_aerial, GeoRaster, LodConfig, SyntheticWorld};
use crate::retrieval::{build_database, recall_from_results, search_all, EmbeddingDatabase, Hit, Searcher, RECALL_RADIUS_M};
use crate::training::{train, BatchPlan, MetricsRow, Renderer, SampleStream, TrainConfig};

/// Side of the dedup grid, meters.
pub const DEDUP_CELL_M: f64 = 5.0;
pub const DEFAULT_L_DELTA_M: f64 = 5.0;
pub const DEFAULT_S_MAX: usize = 1 << 14;

/// A world with its raster and photo splits.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub world: SyntheticWorld,
    pub raster: GeoRaster,
    pub train: Vec<PhotoRecord>,
    pub test: Vec<PhotoRecord>,
}

/// Renders the world and samples train and test photos `margin_m` away
/// from the region edges.
pub fn synthesize(
    world: SyntheticWorld,
    train_count: usize,
    test_count: usize,
    margin_m: f64,
    seed: u64,
) -> Result<SyntheticData> {
    let raster = synth_aerial(&world)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = world.sample_photos(train_count, margin_m, "train-", &mut rng);
    let test = world.sample_photos(test_count, margin_m, "test-", &mut rng);
    Ok(SyntheticData {
        world,
        raster,
        train,
        test,
    })
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub layout: RegionLayout,
    pub model: ModelConfig,
    pub lod: LodConfig,
    pub train: TrainConfig,
    /// `None` trains on random batches.
    pub s_max: Option<usize>,
    pub mask: MaskConfig,
    pub l_delta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            layout: RegionLayout::default(),
            model: ModelConfig::default(),
            lod: LodConfig::default(),
            train: TrainConfig::default(),
            s_max: Some(DEFAULT_S_MAX),
            mask: MaskConfig::default(),
            l_delta: DEFAULT_L_DELTA_M,
        }
    }
}

impl RunConfig {
    /// One LOD with the same pixel budget as the default `n` LODs: the
    /// patch has `sqrt(n)` times the pixels per side and covers twice the
    /// finest sidelength.
    pub fn single_lod(mut self) -> Result<Self> {
        let n = self.lod.n;
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(Error::Parameter(format!("{n} LODs have no square single-LOD equivalent")));
        }
        self.lod = LodConfig {
            n: 1,
            d0: 2.0 * self.lod.d0,
            pixels: self.lod.pixels * side,
        };
        self.model.n_lods = 1;
        self.model.aerial_image_size = self.lod.pixels;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lod.validate()?;
        self.train.validate()?;
        if self.model.n_lods != self.lod.n {
            return Err(Error::Parameter(format!(
                "model expects {} LODs, LOD config has {}",
                self.model.n_lods, self.lod.n
            )));
        }
        Ok(())
    }
}

/// Deterministic per-query photometric noise seed.
pub fn query_noise_seed(index: usize) -> u64 {
    0x7175_6572_7900_0000 ^ index as u64
}

/// Photos plus the imagery they are rendered from.
#[derive(Clone, Copy)]
pub struct Corpus<'a> {
    pub photos: &'a [PhotoRecord],
    pub aerial: &'a GeoRaster,
    /// Needed for photos with synthetic poses.
    pub world: Option<&'a SyntheticWorld>,
}

impl SyntheticData {
    pub fn train_corpus(&self) -> Corpus<'_> {
        Corpus {
            photos: &self.train,
            aerial: &self.raster,
            world: Some(&self.world),
        }
    }

    pub fn test_corpus(&self) -> Corpus<'_> {
        Corpus {
            photos: &self.test,
            aerial: &self.raster,
            world: Some(&self.world),
        }
    }
}

pub fn renderer<'a>(corpus: Corpus<'a>, cfg: &RunConfig) -> Renderer<'a> {
    Renderer {
        photos: corpus.photos,
        aerial: corpus.aerial,
        world: corpus.world,
        lod: cfg.lod,
        model: cfg.model,
    }
}

/// Trains a fresh model on the training split.
pub fn train_model(
    corpus: Corpus,
    cfg: &RunConfig,
    on_checkpoint: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, Vec<MetricsRow>)> {
    cfg.validate()?;
    let mut params = init_params(cfg.model, cfg.train.seed)?;
    let dedup = RegionLayout::new(DEDUP_CELL_M, cfg.layout.earth_radius())?;
    let partition = dedup_partition(corpus.photos, &dedup)?;
    let mut stream = SampleStream::new(
        corpus.photos,
        &partition,
        cfg.train.batch_b,
        &cfg.layout,
        cfg.l_delta,
        cfg.train.seed.wrapping_add(1),
    )?;
    let mask = MaskConfig {
        cell_size: cfg.layout.cell_size(),
        earth_radius: cfg.layout.earth_radius(),
        ..cfg.mask
    };
    let plan = match cfg.s_max {
        Some(s_max) => BatchPlan::Mined { s_max },
        None => BatchPlan::Random,
    };
    let r = renderer(corpus, cfg);
    let rows = train(&mut params, &r, &mut stream, &cfg.train, &mask, plan, on_checkpoint)?;
    Ok((params, rows))
}

/// Street embeddings of the corpus photos, in order.
pub fn embed_queries(corpus: Corpus, params: &ModelParams, cfg: &RunConfig) -> Result<Vec<Embedding>> {
    let r = renderer(corpus, cfg);
    (0..corpus.photos.len())
        .into_par_iter()
        .map(|k| embed_street(params, &r.street_image(k, query_noise_seed(k))?))
        .collect()
}

/// Database over every cell of the world region.
pub fn build_world_database(data: &SyntheticData, params: &ModelParams, cfg: &RunConfig) -> Result<EmbeddingDatabase> {
    build_database(
        params,
        &cfg.layout,
        &data.raster,
        &data.world.region_min,
        &data.world.region_max,
        &cfg.lod,
    )
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    /// Expected R@1 of a uniformly random cell.
    pub random_baseline: f64,
    pub results: Vec<Vec<Hit>>,
}

pub fn evaluate(
    db: &EmbeddingDatabase,
    queries: &[Embedding],
    photos: &[PhotoRecord],
    searcher: Searcher,
) -> Result<Evaluation> {
    let results = search_all(db, searcher, queries, 10)?;
    let locs: Vec<GeoPoint> = photos.iter().map(|p| p.location).collect();
    let recall_at_1 = recall_from_results(db, &results, &locs, 1, RECALL_RADIUS_M)?;
    let recall_at_10 = recall_from_results(db, &results, &locs, 10, RECALL_RADIUS_M)?;
    let random_baseline = random_baseline(db, &locs, RECALL_RADIUS_M)?;
    Ok(Evaluation {
        recall_at_1,
        recall_at_10,
        random_baseline,
        results,
    })
}

/// Mean fraction of database cells within `radius_m` of a query location.
pub fn random_baseline(db: &EmbeddingDatabase, locations: &[GeoPoint], radius_m: f64) -> Result<f64> {
    let centers: Vec<GeoPoint> = (0..db.len()).map(|i| db.center(i)).collect::<Result<_>>()?;
    let r = db.layout().earth_radius();
    let total: usize = locations
        .par_iter()
        .map(|p| centers.iter().filter(|c| geodesic_distance(c, p, r) < radius_m).count())
        .sum();
    Ok(total as f64 / (locations.len() as f64 * db.len() as f64))
}

/// Everything one end-to-end run produces.
pub struct RunOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRow>,
    pub database: EmbeddingDatabase,
    pub evaluation: Evaluation,
}

pub fn run(data: &SyntheticData, cfg: &RunConfig) -> Result<RunOutcome> {
    let (params, metrics) = train_model(data.train_corpus(), cfg, |_, _| Ok(()))?;
    let database = build_world_database(data, &params, cfg)?;
    let queries = embed_queries(data.test_corpus(), &params, cfg)?;
    let evaluation = evaluate(&database, &queries, &data.test, Searcher::Exact)?;
    Ok(RunOutcome {
        params,
        metrics,
        database,
        evaluation,
    })
}
