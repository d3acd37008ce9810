use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cellgeo::dataset::{load_manifest, write_manifest, MaskConfig, PhotoRecord};
use cellgeo::geodesy::write_cells_csv;
use cellgeo::model::gradcheck::{gradcheck, GradcheckConfig};
use cellgeo::model::{read_checkpoint, write_checkpoint, ModelParams};
use cellgeo::pipeline::{self, Corpus, RunConfig};
use cellgeo::raster::{GeoRaster, LodConfig, SyntheticWorld};
use cellgeo::retrieval::{
    build_database, grouped_recall, read_queries, recall_from_results, score_grid, search_all,
    write_grouped_csv, write_queries, write_results_csv, write_score_grid_csv, EmbeddingDatabase,
    GraphIndex, GraphParams, GroupKey, QueryRecord, Searcher,
};
use cellgeo::training::{write_metrics_csv, TrainConfig};
use cellgeo::{Error, GeoPoint, RegionLayout};

use crate::args::*;
use crate::CliError;

type CmdResult = Result<(), CliError>;

pub fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Layout(c) => layout(c),
        Command::Synth(c) => synth(c),
        Command::Train(c) => train(c),
        Command::BuildDb(c) => build_db(c),
        Command::EmbedQueries(c) => embed_queries(c),
        Command::Search(c) => search(c),
        Command::Eval(c) => eval(c),
        Command::Gradcheck(c) => run_gradcheck(c),
        Command::Selftest(c) => selftest(c),
    }
}

/// Attaches the path to an I/O error, keeping its kind.
fn with_path(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Same for I/O errors surfacing from library readers.
fn in_file(path: &Path) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => with_path(path)(io),
        other => other,
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Error> {
    Ok(BufReader::new(File::open(path).map_err(with_path(path))?))
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(with_path(path))
}

fn out_dir(common: &Common) -> Result<&Path, Error> {
    fs::create_dir_all(&common.out).map_err(with_path(&common.out))?;
    Ok(&common.out)
}

fn out_file(common: &Common, name: &str) -> Result<BufWriter<File>, Error> {
    let path = out_dir(common)?.join(name);
    Ok(BufWriter::new(File::create(&path).map_err(with_path(&path))?))
}

fn write_text(common: &Common, name: &str, text: &str) -> Result<(), Error> {
    let path = out_dir(common)?.join(name);
    fs::write(&path, text).map_err(with_path(&path))
}

fn region_layout(args: &LayoutArgs) -> Result<RegionLayout, Error> {
    RegionLayout::new(args.cell_size, args.earth_radius_m)
}

fn read_world(path: &Path) -> Result<SyntheticWorld, Error> {
    SyntheticWorld::from_config_text(&read_text(path)?)
}

fn read_params(path: &Path) -> Result<ModelParams, Error> {
    read_checkpoint(open(path)?)
}

fn read_db(path: &Path) -> Result<EmbeddingDatabase, Error> {
    EmbeddingDatabase::read(open(path)?)
}

fn read_query_file(path: &Path) -> Result<Vec<QueryRecord>, Error> {
    let q = read_queries(open(path)?)?;
    if q.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(q)
}

fn manifest_photos(path: &Path) -> Result<Vec<PhotoRecord>, Error> {
    let m = load_manifest(path).map_err(in_file(path))?;
    if m.skipped > 0 {
        eprintln!("warning: skipped {} malformed manifest lines", m.skipped);
    }
    if m.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(m.records)
}

fn layout(c: LayoutCmd) -> CmdResult {
    let layout = region_layout(&c.layout)?;
    let cells = layout.cells_in_box(&c.bbox.min, &c.bbox.max)?;
    write_cells_csv(out_file(&c.common, "cells.csv")?, &layout, &cells)?;
    let r = layout.shape_report();
    let report = format!(
        "cells = {}\ncell_size_m = {}\nbands = {}\nworst_band = {}\nmin_trapezoid_ratio = {:.12}\nmax_side_deviation_m = {:.6}\n",
        cells.len(),
        layout.cell_size(),
        r.bands,
        r.worst_band,
        r.min_ratio,
        r.max_side_deviation_m
    );
    write_text(&c.common, "layout.txt", &report)?;
    print!("{report}");
    Ok(())
}

fn synth(c: SynthCmd) -> CmdResult {
    let mut world = SyntheticWorld::centered(
        c.common.seed,
        GeoPoint::from_degrees(c.center_lat, c.center_lon),
        c.size_m,
    );
    world.octaves = c.octaves;
    world.base_wavelength_m = c.base_wavelength_m;
    world.persistence = c.persistence;
    world.contrast = c.contrast;
    world.photometric_noise_sigma = c.photometric_noise_sigma;
    world.resolution_m = c.resolution_m;
    let data = pipeline::synthesize(world, c.train_photos, c.test_photos, c.margin_m, c.common.seed)?;
    out_dir(&c.common)?;
    data.raster.write(&c.common.out.join("world.rgb"))?;
    write_text(&c.common, "world.conf", &data.world.to_config_text())?;
    let mut f = out_file(&c.common, "train.jsonl")?;
    write_manifest(&mut f, &data.train)?;
    f.flush().map_err(Error::from)?;
    let mut f = out_file(&c.common, "test.jsonl")?;
    write_manifest(&mut f, &data.test)?;
    f.flush().map_err(Error::from)?;
    println!(
        "world {}x{} px, {} train and {} test photos in {}",
        data.raster.width(),
        data.raster.height(),
        data.train.len(),
        data.test.len(),
        c.common.out.display()
    );
    Ok(())
}

fn save_checkpoint(path: PathBuf, params: &ModelParams) -> Result<(), Error> {
    let mut f = BufWriter::new(File::create(&path).map_err(with_path(&path))?);
    write_checkpoint(params, &mut f)?;
    f.flush()?;
    Ok(())
}

fn train(c: TrainCmd) -> CmdResult {
    let layout = region_layout(&c.layout)?;
    let photos = manifest_photos(&c.manifest)?;
    let raster = GeoRaster::read(&c.raster).map_err(in_file(&c.raster))?;
    let world = c.world.as_deref().map(read_world).transpose()?;
    let cfg = RunConfig {
        layout,
        model: c.model.model_config(),
        lod: c.model.lod_config(),
        train: TrainConfig {
            batch_b: c.batch_b,
            iterations: c.iterations,
            lr_peak: c.lr_peak,
            warmup_iters: c.warmup_iters,
            temperature_tau: c.temperature_tau,
            label_smoothing_eps: c.label_smoothing_eps,
            seed: c.common.seed,
            checkpoint_every: c.checkpoint_every,
        },
        s_max: c.mining.is_on().then_some(c.s_max),
        mask: MaskConfig {
            radius_m: c.mask_radius_m,
            ..MaskConfig::default()
        },
        l_delta: c.l_delta_m,
    };
    let corpus = Corpus {
        photos: &photos,
        aerial: &raster,
        world: world.as_ref(),
    };
    out_dir(&c.common)?;
    let out = c.common.out.clone();
    let (params, rows) = pipeline::train_model(corpus, &cfg, |done, params| {
        save_checkpoint(out.join(format!("checkpoint-{done:06}.gcm")), params)
    })?;
    save_checkpoint(out.join("model.gcm"), &params)?;
    let mut f = out_file(&c.common, "metrics.csv")?;
    write_metrics_csv(&mut f, &rows)?;
    f.flush().map_err(Error::from)?;
    if let Some(last) = rows.last() {
        println!(
            "{} iterations, final loss {:.6}, in-batch recall@1 {:.3}, pool size {}",
            rows.len(),
            last.loss,
            last.batch_recall_at1,
            last.pool_size_s
        );
    }
    Ok(())
}

fn build_db(c: BuildDbCmd) -> CmdResult {
    let layout = region_layout(&c.layout)?;
    let params = read_params(&c.checkpoint)?;
    let raster = GeoRaster::read(&c.raster).map_err(in_file(&c.raster))?;
    let (min, max) = match (c.bbox, &c.world) {
        (Some(b), _) => (b.min, b.max),
        (None, Some(w)) => {
            let w = read_world(w)?;
            (w.region_min, w.region_max)
        }
        (None, None) => {
            let se = raster.pixel_to_geo((raster.width() - 1) as f64, (raster.height() - 1) as f64);
            let nw = raster.anchor();
            (GeoPoint::new(se.lat, nw.lon), GeoPoint::new(nw.lat, se.lon))
        }
    };
    let lod = LodConfig {
        n: params.config.n_lods,
        d0: c.d0_m,
        pixels: params.config.aerial_image_size,
    };
    let db = build_database(&params, &layout, &raster, &min, &max, &lod)?;
    let mut f = out_file(&c.common, "db.gcdb")?;
    db.write(&mut f)?;
    f.flush().map_err(Error::from)?;
    let covered = db.records().iter().filter(|r| r.covered).count();
    println!("{} cells ({} covered), dim {}", db.len(), covered, db.dim());
    Ok(())
}

fn embed_queries(c: EmbedQueriesCmd) -> CmdResult {
    let params = read_params(&c.checkpoint)?;
    let photos = manifest_photos(&c.manifest)?;
    let raster = GeoRaster::read(&c.raster).map_err(in_file(&c.raster))?;
    let world = c.world.as_deref().map(read_world).transpose()?;
    let cfg = RunConfig {
        model: params.config,
        ..RunConfig::default()
    };
    let corpus = Corpus {
        photos: &photos,
        aerial: &raster,
        world: world.as_ref(),
    };
    let embs = pipeline::embed_queries(corpus, &params, &cfg)?;
    let records: Vec<QueryRecord> = photos
        .iter()
        .zip(embs)
        .map(|(p, e)| QueryRecord::new(p, e))
        .collect();
    let mut f = out_file(&c.common, "queries.jsonl")?;
    write_queries(&mut f, &records)?;
    f.flush().map_err(Error::from)?;
    println!("{} queries embedded", records.len());
    Ok(())
}

/// Runs every query through the configured searcher.
fn run_search(
    db: &EmbeddingDatabase,
    queries: &[QueryRecord],
    args: &SearchArgs,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<cellgeo::retrieval::Hit>>, Error> {
    let embs: Vec<_> = queries.iter().map(|q| q.embedding.clone()).collect();
    match args.index {
        IndexKind::Exact => search_all(db, Searcher::Exact, &embs, n),
        IndexKind::Graph => {
            let index = GraphIndex::build(
                db,
                GraphParams {
                    m: args.graph_m,
                    ef_construction: args.ef_construction,
                    seed,
                },
            )?;
            search_all(
                db,
                Searcher::Graph {
                    index: &index,
                    ef_search: args.ef_search,
                },
                &embs,
                n,
            )
        }
    }
}

fn search(c: SearchCmd) -> CmdResult {
    let db = read_db(&c.db)?;
    let queries = read_query_file(&c.queries)?;
    let results = run_search(&db, &queries, &c.search, c.top_n, c.common.seed)?;
    let ids: Vec<(String, GeoPoint)> = queries.iter().map(|q| (q.id.clone(), q.location)).collect();
    let mut f = out_file(&c.common, "results.csv")?;
    write_results_csv(&mut f, &db, &ids, &results, c.search.radius_m)?;
    f.flush().map_err(Error::from)?;
    println!("{} queries searched", queries.len());
    Ok(())
}

fn eval(c: EvalCmd) -> CmdResult {
    let db = read_db(&c.db)?;
    let queries = read_query_file(&c.queries)?;
    let top = c.top_n.max(1);
    let results = run_search(&db, &queries, &c.search, top, c.common.seed)?;
    let locations: Vec<GeoPoint> = queries.iter().map(|q| q.location).collect();
    let radius = c.search.radius_m;

    let mut ns: Vec<usize> = [1, 5, 10].into_iter().filter(|&n| n <= top).collect();
    if !ns.contains(&top) {
        ns.push(top);
    }
    let mut text = String::from("n,recall\n");
    for &n in &ns {
        let r = recall_from_results(&db, &results, &locations, n, radius)?;
        text.push_str(&format!("{n},{r:.6}\n"));
        println!("R@{n}<{radius}m = {r:.4}");
    }
    let baseline = pipeline::random_baseline(&db, &locations, radius)?;
    println!("random baseline R@1 = {baseline:.6}");
    write_text(&c.common, "recall.csv", &text)?;

    let photos: Vec<PhotoRecord> = queries.iter().map(QueryRecord::to_photo).collect();
    for (key, name) in [(GroupKey::Year, "grouped_year.csv"), (GroupKey::Hour, "grouped_hour.csv")] {
        let rows = grouped_recall(&db, &results, &photos, key, 1, radius, c.min_count)?;
        let mut f = out_file(&c.common, name)?;
        write_grouped_csv(&mut f, &rows)?;
        f.flush().map_err(Error::from)?;
    }

    if let Some(id) = &c.grid_query {
        let q = queries
            .iter()
            .find(|q| &q.id == id)
            .ok_or_else(|| Error::Validation(format!("no query with id `{id}`")))?;
        let r = db.layout().earth_radius();
        let h = c.grid_radius_m;
        let min = q.location.offset_m(-h, -h, r);
        let max = q.location.offset_m(h, h, r);
        let rows = score_grid(&db, &q.embedding, &min, &max)?;
        let mut f = out_file(&c.common, "score_grid.csv")?;
        write_score_grid_csv(&mut f, &rows)?;
        f.flush().map_err(Error::from)?;
    }
    Ok(())
}

fn run_gradcheck(c: GradcheckCmd) -> CmdResult {
    let cfg = GradcheckConfig::default();
    let mut worst = 0.0f64;
    let mut csv = String::from("seed,tensor,entries,max_rel_error\n");
    for seed in c.common.seed..c.common.seed + c.seeds.max(1) {
        let report = gradcheck(seed, &cfg)?;
        for t in &report.tensors {
            csv.push_str(&format!("{seed},{},{},{:.6e}\n", t.name, t.entries, t.max_rel_error));
        }
        let e = report.max_rel_error();
        println!("seed {seed}: max relative error {e:.3e} over {} tensors", report.tensors.len());
        worst = worst.max(e);
    }
    write_text(&c.common, "gradcheck.csv", &csv)?;
    println!("max relative error {worst:.3e}");
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed: {worst:.3e} >= 1e-4")))
    }
}

fn selftest(c: SelftestCmd) -> CmdResult {
    let outcomes = cellgeo::selftest::run_all(c.common.seed);
    let mut failed = 0;
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        failed += usize::from(!o.passed);
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{failed} of {} checks failed", outcomes.len())))
    }
}
