use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cellgeo::{GeoPoint, RegionLayout};

fn cellgeo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellgeo"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn layout_emits_every_cell_of_the_box() {
    let dir = tempfile::tempdir().unwrap();
    // About 300 m on a side near Boston.
    let o = cellgeo(
        &["layout", "--bbox", "42.3600,-71.0600,42.3627,-71.0564", "--cell-size", "30", "--out", "lay"],
        dir.path(),
    );
    assert_ok(&o);
    let csv = fs::read_to_string(dir.path().join("lay/cells.csv")).unwrap();
    let expected = RegionLayout::default()
        .cells_in_box(
            &GeoPoint::from_degrees(42.36, -71.06),
            &GeoPoint::from_degrees(42.3627, -71.0564),
        )
        .unwrap();
    assert_eq!(csv.lines().count(), expected.len() + 1);
    assert!((90..=110).contains(&expected.len()), "{} cells", expected.len());
    let first = csv.lines().nth(1).unwrap();
    assert!(first.starts_with(&format!("{},{},", expected[0].band, expected[0].step)));
    assert!(stdout(&o).contains(&format!("cells = {}", expected.len())));
    assert!(stdout(&o).contains("min_trapezoid_ratio = 0.9999"));
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = cellgeo(&["train", "--help"], dir.path());
    assert_ok(&o);
    let h = stdout(&o);
    for needle in [
        "--cell-size <CELL_SIZE>",
        "[default: 30]",
        "--n-lods <N_LODS>",
        "[default: 4]",
        "[default: 1/36]",
        "[default: 0.1]",
        "[default: 76.8]",
        "--mining <MINING>",
        "--threads <THREADS>",
    ] {
        assert!(h.contains(needle), "missing `{needle}` in help:\n{h}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cellgeo(&["layout", "--bbox", "0,0,1,1", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(cellgeo(&["nonsense"], dir.path()).status.code(), Some(1));
    assert_eq!(cellgeo(&["layout", "--bbox", "1,0,0,1"], dir.path()).status.code(), Some(1));
    let missing = cellgeo(&["search", "--db", "none.gcdb", "--queries", "none.jsonl"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("none.gcdb"));

    fs::write(dir.path().join("bad.gcdb"), b"nope").unwrap();
    fs::write(dir.path().join("q.jsonl"), b"").unwrap();
    let bad = cellgeo(&["search", "--db", "bad.gcdb", "--queries", "q.jsonl"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn config_keys_apply_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.conf"),
        "# layout\ncell_size = 60\nbbox = 0,0,0.001,0.001\nout = from-config\n",
    )
    .unwrap();
    let o = cellgeo(&["layout", "--config", "run.conf", "--cell-size", "30"], dir.path());
    assert_ok(&o);
    assert!(stdout(&o).contains("cell_size_m = 30"));
    assert!(dir.path().join("from-config/cells.csv").exists());

    fs::write(dir.path().join("typo.conf"), "cell_sise = 60\n").unwrap();
    let o = cellgeo(&["layout", "--config", "typo.conf", "--bbox", "0,0,1e-3,1e-3"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = cellgeo(&["layout", "--config", "absent.conf", "--bbox", "0,0,1e-3,1e-3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_for_seed_7() {
    let dir = tempfile::tempdir().unwrap();
    let o = cellgeo(&["gradcheck", "--seed", "7", "--out", "g"], dir.path());
    assert_ok(&o);
    let line = stdout(&o).lines().last().unwrap().to_owned();
    let err: f64 = line.trim_start_matches("max relative error ").parse().unwrap();
    assert!(err < 1e-4, "{line}");
    let csv = fs::read_to_string(dir.path().join("g/gradcheck.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 17);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cellgeo(&["selftest"], dir.path());
    assert_ok(&o);
    let out = stdout(&o);
    assert!(!out.contains("FAIL"), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 9);
}

/// synth -> train -> build-db -> embed-queries -> search -> eval on a tiny
/// world, twice, with byte-identical artifacts.
#[test]
fn end_to_end_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("train.conf"),
        "iterations = 16\nwarmup_iters = 4\nbatch_b = 4\ncheckpoint_every = 8\ns_max = 16\n",
    )
    .unwrap();
    for run in ["a", "b"] {
        let w = format!("{run}/world");
        assert_ok(&cellgeo(
            &["synth", "--size-m", "400", "--train-photos", "48", "--test-photos", "8", "--margin-m", "40", "--seed", "3", "--out", &w],
            d,
        ));
        let t = format!("{run}/train");
        assert_ok(&cellgeo(
            &[
                "train", "--config", "train.conf", "--manifest", &format!("{w}/train.jsonl"),
                "--raster", &format!("{w}/world.rgb"), "--world", &format!("{w}/world.conf"),
                "--seed", "5", "--out", &t,
            ],
            d,
        ));
        assert_ok(&cellgeo(
            &[
                "build-db", "--checkpoint", &format!("{t}/model.gcm"), "--raster", &format!("{w}/world.rgb"),
                "--world", &format!("{w}/world.conf"), "--out", &format!("{run}/db"),
            ],
            d,
        ));
        assert_ok(&cellgeo(
            &[
                "embed-queries", "--checkpoint", &format!("{t}/model.gcm"), "--manifest", &format!("{w}/test.jsonl"),
                "--raster", &format!("{w}/world.rgb"), "--world", &format!("{w}/world.conf"), "--out", &format!("{run}/q"),
            ],
            d,
        ));
        let db = format!("{run}/db/db.gcdb");
        let q = format!("{run}/q/queries.jsonl");
        assert_ok(&cellgeo(&["search", "--db", &db, "--queries", &q, "--index", "graph", "--out", &format!("{run}/s")], d));
        assert_ok(&cellgeo(
            &["eval", "--db", &db, "--queries", &q, "--grid-query", "test-000000", "--out", &format!("{run}/e")],
            d,
        ));
    }
    for f in [
        "world/world.rgb",
        "world/train.jsonl",
        "train/metrics.csv",
        "train/checkpoint-000008.gcm",
        "train/model.gcm",
        "db/db.gcdb",
        "q/queries.jsonl",
        "s/results.csv",
        "e/recall.csv",
        "e/grouped_hour.csv",
        "e/score_grid.csv",
    ] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        let b = fs::read(d.join("b").join(f)).unwrap();
        assert!(!a.is_empty() && a == b, "{f} differs between runs");
    }
    let metrics = fs::read_to_string(d.join("a/train/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "iteration,lr,loss,batch_recall_at1,pool_size_s");
    assert_eq!(metrics.lines().count(), 17);
    let results = fs::read_to_string(d.join("a/s/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 8 * 10);
}
