use cellgeo::pipeline::{run, synthesize, train_model, RunConfig, SyntheticData};
use cellgeo::raster::SyntheticWorld;
use cellgeo::training::TrainConfig;
use cellgeo::GeoPoint;

fn small_world() -> SyntheticData {
    let world = SyntheticWorld::centered(4, GeoPoint::from_degrees(-33.87, 151.21), 500.0);
    synthesize(world, 64, 12, 40.0, 2).unwrap()
}

fn small_config(iterations: usize, s_max: Option<usize>) -> RunConfig {
    RunConfig {
        train: TrainConfig {
            iterations,
            warmup_iters: 5,
            checkpoint_every: 0,
            seed: 8,
            ..TrainConfig::default()
        },
        s_max,
        ..RunConfig::default()
    }
}

#[test]
fn fifty_iterations_are_bit_identical() {
    let data = small_world();
    for s_max in [None, Some(32)] {
        let cfg = small_config(50, s_max);
        let (pa, ra) = train_model(data.train_corpus(), &cfg, |_, _| Ok(())).unwrap();
        let (pb, rb) = train_model(data.train_corpus(), &cfg, |_, _| Ok(())).unwrap();
        let bits = |rows: &[cellgeo::training::MetricsRow]| rows.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(ra.len(), 50);
        assert_eq!(bits(&ra), bits(&rb));
        assert_eq!(pa, pb);
    }
}

#[test]
fn training_seed_changes_the_trace() {
    let data = small_world();
    let a = small_config(10, None);
    let mut b = a.clone();
    b.train.seed += 1;
    let (_, ra) = train_model(data.train_corpus(), &a, |_, _| Ok(())).unwrap();
    let (_, rb) = train_model(data.train_corpus(), &b, |_, _| Ok(())).unwrap();
    assert_ne!(ra.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(), rb.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>());
}

#[test]
fn checkpoints_arrive_on_schedule() {
    let data = small_world();
    let mut cfg = small_config(20, None);
    cfg.train.checkpoint_every = 8;
    let mut seen = Vec::new();
    train_model(data.train_corpus(), &cfg, |done, _| {
        seen.push(done);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, [8, 16, 20]);
}

#[test]
fn small_run_end_to_end() {
    let data = small_world();
    let out = run(&data, &small_config(30, Some(32))).unwrap();
    let e = &out.evaluation;
    // About 17 x 17 cells of 30 m cover the 500 m world.
    assert!((250..=400).contains(&out.database.len()), "{} cells", out.database.len());
    assert_eq!(e.results.len(), data.test.len());
    assert!(e.results.iter().all(|r| r.len() == 10));
    assert!((0.0..=1.0).contains(&e.recall_at_1));
    assert!(e.recall_at_10 >= e.recall_at_1);
    assert!(e.random_baseline > 0.0 && e.random_baseline < 0.05);
}

#[test]
fn single_lod_keeps_the_pixel_budget() {
    let multi = RunConfig::default();
    let single = multi.clone().single_lod().unwrap();
    assert_eq!(single.lod.n, 1);
    assert_eq!(single.lod.pixels.pow(2), multi.lod.n * multi.lod.pixels.pow(2));
    assert_eq!(single.lod.d0, 2.0 * multi.lod.d0);
    single.validate().unwrap();
    let three = RunConfig {
        lod: cellgeo::raster::LodConfig { n: 3, ..multi.lod },
        ..multi
    };
    assert!(three.single_lod().is_err());
}
