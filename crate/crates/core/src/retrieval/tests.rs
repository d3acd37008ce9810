use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::hnsw::DEFAULT_EF_SEARCH;
use super::*;

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Database of `count` random unit vectors on consecutive cells of band 3.
fn random_db(count: usize, dim: usize, seed: u64) -> EmbeddingDatabase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut db = EmbeddingDatabase::new(RegionLayout::default(), dim);
    for k in 0..count {
        let e = random_unit(&mut rng, dim);
        db.push(DbRecord {
            cell: CellIndex::new(3, k as i32 - (count as i32) / 2),
            covered: true,
            embedding: e.iter().map(|&x| x as f32).collect(),
        })
        .unwrap();
    }
    db
}

/// Independent quadratic scan: repeatedly extract the best remaining entry.
fn naive_topn(db: &EmbeddingDatabase, q: &[f64], n: usize) -> Vec<(CellIndex, f64)> {
    let mut left: Vec<(CellIndex, f64)> = db
        .records()
        .iter()
        .map(|r| {
            let mut s = 0.0;
            for k in 0..r.embedding.len() {
                s += r.embedding[k] as f64 * q[k];
            }
            (r.cell, s)
        })
        .collect();
    let mut out = Vec::new();
    while out.len() < n && !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (c, s) = left[i];
            let (bc, bs) = left[best];
            if s > bs || (s == bs && c < bc) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

#[test]
fn exact_search_matches_quadratic_scan() {
    let db = random_db(400, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let q = Embedding::normalized(random_unit(&mut rng, 8)).unwrap();
        let got = knn_exact(&db, &q, 10).unwrap();
        let want = naive_topn(&db, q.as_slice(), 10);
        assert_eq!(got.len(), 10);
        for (g, (c, s)) in got.iter().zip(want) {
            assert_eq!(g.cell, c);
            assert_eq!(g.score, s);
        }
    }
}

#[test]
fn exact_search_edge_cases() {
    let db = random_db(20, 4, 3);
    let own = Embedding::from_unit(db.records()[7].embedding.iter().map(|&x| x as f64).collect());
    let top = knn_exact(&db, &own, 1).unwrap();
    assert_eq!(top[0].cell, db.records()[7].cell);
    assert!((top[0].score - 1.0).abs() < 1e-6);

    let all = knn_exact(&db, &own, 100).unwrap();
    assert_eq!(all.len(), 20);
    let mut cells: Vec<_> = all.iter().map(|h| h.cell).collect();
    cells.sort();
    let mut expected: Vec<_> = db.records().iter().map(|r| r.cell).collect();
    expected.sort();
    assert_eq!(cells, expected);
    assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(knn_exact(&db, &own, 0).is_err());
}

#[test]
fn exact_search_breaks_ties_by_cell() {
    let mut db = EmbeddingDatabase::new(RegionLayout::default(), 2);
    for (band, step) in [(2, 5), (-1, 9), (2, -4), (-1, 3)] {
        db.push(DbRecord {
            cell: CellIndex::new(band, step),
            covered: true,
            embedding: vec![1.0, 0.0],
        })
        .unwrap();
    }
    let q = Embedding::from_unit(vec![1.0, 0.0]);
    let cells: Vec<_> = knn_exact(&db, &q, 4).unwrap().iter().map(|h| h.cell).collect();
    assert_eq!(
        cells,
        vec![
            CellIndex::new(-1, 3),
            CellIndex::new(-1, 9),
            CellIndex::new(2, -4),
            CellIndex::new(2, 5)
        ]
    );
}

#[test]
fn database_rejects_bad_records() {
    let mut db = EmbeddingDatabase::new(RegionLayout::default(), 2);
    let rec = |c, e: Vec<f32>| DbRecord {
        cell: c,
        covered: true,
        embedding: e,
    };
    db.push(rec(CellIndex::new(0, 0), vec![1.0, 0.0])).unwrap();
    assert!(db.push(rec(CellIndex::new(0, 0), vec![0.0, 1.0])).is_err());
    assert!(db.push(rec(CellIndex::new(0, 1), vec![0.5, 0.0])).is_err());
    assert!(db.push(rec(CellIndex::new(0, 1), vec![1.0])).is_err());
}

#[test]
fn database_round_trip() {
    let mut db = random_db(30, 5, 9);
    // Antimeridian and southern cells.
    let layout = RegionLayout::default();
    let (lo, hi) = layout.step_range(-7).unwrap();
    for (i, step) in [lo, hi].into_iter().enumerate() {
        db.push(DbRecord {
            cell: CellIndex::new(-7, step),
            covered: i == 0,
            embedding: vec![0.6, 0.8, 0.0, 0.0, 0.0],
        })
        .unwrap();
    }
    let mut a = Vec::new();
    db.write(&mut a).unwrap();
    let back = EmbeddingDatabase::read(a.as_slice()).unwrap();
    assert_eq!(back, db);
    let mut b = Vec::new();
    back.write(&mut b).unwrap();
    assert_eq!(a, b);
    assert!(EmbeddingDatabase::read(&a[..a.len() - 1]).unwrap_err().is_io());
    let mut bad = a.clone();
    bad[0] = b'X';
    assert!(matches!(EmbeddingDatabase::read(bad.as_slice()), Err(Error::Format(_))));
}

/// Vectors around `clusters` random centers.
fn clustered_db(count: usize, dim: usize, clusters: usize, seed: u64) -> EmbeddingDatabase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..clusters).map(|_| random_unit(&mut rng, dim)).collect();
    let mut db = EmbeddingDatabase::new(RegionLayout::default(), dim);
    for k in 0..count {
        let c = &centers[rng.random_range(0..clusters)];
        let noise = random_unit(&mut rng, dim);
        let v: Vec<f64> = c.iter().zip(&noise).map(|(a, b)| a + 0.4 * b).collect();
        let e = Embedding::normalized(v).unwrap();
        db.push(DbRecord {
            cell: CellIndex::new(k as i32 / 1000, k as i32 % 1000),
            covered: true,
            embedding: e.to_f32(),
        })
        .unwrap();
    }
    db
}

#[test]
fn graph_respects_degree_and_reachability() {
    let db = clustered_db(2000, 16, 20, 4);
    let params = GraphParams {
        m: 8,
        ef_construction: 64,
        seed: 1,
    };
    let g = GraphIndex::build(&db, params).unwrap();
    assert!(g.is_connected());
    for node in 0..g.len() {
        for layer in 0..=g.max_level() {
            assert!(g.neighbors(node, layer).len() <= 8);
        }
    }
}

fn overlap(a: &[Hit], b: &[Hit]) -> f64 {
    let hits = a.iter().filter(|x| b.iter().any(|y| y.cell == x.cell)).count();
    hits as f64 / b.len() as f64
}

#[test]
fn graph_search_quality() {
    let db = clustered_db(3000, 16, 30, 5);
    let g = GraphIndex::build(&db, GraphParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut sums = [0.0; 4];
    let efs = [16, 64, DEFAULT_EF_SEARCH, db.len()];
    for _ in 0..100 {
        let q = Embedding::normalized(random_unit(&mut rng, 16)).unwrap();
        let exact = knn_exact(&db, &q, 10).unwrap();
        for (k, &ef) in efs.iter().enumerate() {
            let approx = g.search(&db, &q, 10, ef).unwrap();
            sums[k] += overlap(&approx, &exact);
            if ef == db.len() {
                assert_eq!(approx, exact);
            }
        }
    }
    assert!(sums[2] / 100.0 >= 0.95, "overlap {}", sums[2] / 100.0);
    assert!(sums.windows(2).all(|w| w[0] <= w[1] + 1e-12), "{sums:?}");
}

#[test]
fn graph_parameter_errors() {
    let db = random_db(10, 4, 1);
    let g = GraphIndex::build(&db, GraphParams::default()).unwrap();
    let q = Embedding::from_unit(vec![1.0, 0.0, 0.0, 0.0]);
    assert!(matches!(g.search(&db, &q, 10, 5), Err(Error::Parameter(_))));
    let empty = EmbeddingDatabase::new(RegionLayout::default(), 4);
    assert!(GraphIndex::build(&empty, GraphParams::default()).is_err());
}

/// Database over real cell centers near a point, with one-hot-ish vectors.
fn geo_db() -> (EmbeddingDatabase, Vec<GeoPoint>) {
    let layout = RegionLayout::default();
    let center = GeoPoint::from_degrees(42.0, -71.0);
    let min = center.offset_m(-60.0, -60.0, layout.earth_radius());
    let max = center.offset_m(60.0, 60.0, layout.earth_radius());
    let cells = layout.cells_in_box(&min, &max).unwrap();
    let dim = cells.len();
    let mut db = EmbeddingDatabase::new(layout, dim);
    let mut centers = Vec::new();
    for (k, &cell) in cells.iter().enumerate() {
        let mut e = vec![0.0f32; dim];
        e[k] = 1.0;
        db.push(DbRecord {
            cell,
            covered: true,
            embedding: e,
        })
        .unwrap();
        centers.push(layout.cell_center(cell).unwrap());
    }
    (db, centers)
}

fn one_hot(dim: usize, k: usize) -> Embedding {
    let mut v = vec![0.0; dim];
    v[k] = 1.0;
    Embedding::from_unit(v)
}

#[test]
fn own_cell_counts_as_hit_and_far_cells_do_not() {
    let (db, centers) = geo_db();
    let dim = db.dim();
    let queries: Vec<(GeoPoint, Embedding)> = (0..dim)
        .map(|k| {
            // Photo 12 m east of the center, still in its own cell.
            let p = centers[k].offset_m(12.0, 0.0, db.layout().earth_radius());
            (p, one_hot(dim, k))
        })
        .collect();
    assert_eq!(recall_at_n_within(&db, Searcher::Exact, &queries, 1, 50.0).unwrap(), 1.0);
    let far: Vec<(GeoPoint, Embedding)> = queries
        .iter()
        .map(|(p, e)| (p.offset_m(5000.0, 0.0, db.layout().earth_radius()), e.clone()))
        .collect();
    for n in [1, 5, dim] {
        assert_eq!(recall_at_n_within(&db, Searcher::Exact, &far, n, 50.0).unwrap(), 0.0);
    }
}

#[test]
fn recall_is_strict_and_matches_brute_force() {
    let (db, centers) = geo_db();
    let dim = db.dim();
    let r = db.layout().earth_radius();
    // Photo exactly 50 m north of the retrieved center is not a hit.
    let p = GeoPoint::new(centers[0].lat + 50.0 / r, centers[0].lon);
    let hits = knn_exact(&db, &one_hot(dim, 0), 1).unwrap();
    let d = geodesic_distance(&db.layout().cell_center(hits[0].cell).unwrap(), &p, r);
    assert!((d - 50.0).abs() < 1e-9);
    assert_eq!(is_hit(&db, &hits, 1, &p, 50.0).unwrap(), d < 50.0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let queries: Vec<(GeoPoint, Embedding)> = (0..40)
        .map(|_| {
            let p = centers[rng.random_range(0..dim)].offset_m(
                rng.random_range(-80.0..80.0),
                rng.random_range(-80.0..80.0),
                r,
            );
            (p, Embedding::normalized(random_unit(&mut rng, dim)).unwrap())
        })
        .collect();
    let mut prev = 0.0;
    for n in 1..=5 {
        let got = recall_at_n_within(&db, Searcher::Exact, &queries, n, 50.0).unwrap();
        let mut count = 0;
        for (p, e) in &queries {
            let top = naive_topn(&db, e.as_slice(), n);
            if top.iter().any(|(c, _)| {
                geodesic_distance(&db.layout().cell_center(*c).unwrap(), p, r) < 50.0
            }) {
                count += 1;
            }
        }
        assert_eq!(got, count as f64 / 40.0);
        assert!(got >= prev);
        prev = got;
        let wider = recall_at_n_within(&db, Searcher::Exact, &queries, n, 70.0).unwrap();
        assert!(wider >= got);
    }
}

#[test]
fn grouped_recall_rows() {
    use chrono::TimeZone;
    let (db, centers) = geo_db();
    let dim = db.dim();
    let r = db.layout().earth_radius();
    let mk = |k: usize, year: Option<i32>, far: bool| {
        let loc = if far {
            centers[k].offset_m(3000.0, 0.0, r)
        } else {
            centers[k]
        };
        PhotoRecord {
            id: format!("q{k}"),
            location: loc,
            captured_at: year.map(|y| chrono::Utc.with_ymd_and_hms(y, 6, 1, 14, 0, 0).unwrap()),
            image: crate::dataset::ImageRef::Path("x.ppm".into()),
        }
    };
    let queries = vec![
        mk(0, Some(2019), false),
        mk(1, Some(2019), true),
        mk(2, Some(2021), false),
        mk(3, None, false),
    ];
    let results: Vec<Vec<Hit>> = (0..4)
        .map(|k| knn_exact(&db, &one_hot(dim, k), 1).unwrap())
        .collect();
    let rows = grouped_recall(&db, &results, &queries, GroupKey::Year, 1, 50.0, 2).unwrap();
    let summary: Vec<_> = rows.iter().map(|g| (g.key.as_str(), g.count, g.recall, g.small)).collect();
    assert_eq!(
        summary,
        vec![("2019", 2, 0.5, false), ("2021", 1, 1.0, true), ("unknown", 1, 1.0, true)]
    );
    assert_eq!(rows.iter().map(|g| g.count).sum::<usize>(), 4);
    let hours = grouped_recall(&db, &results[..1], &queries[..1], GroupKey::Hour, 1, 50.0, 1).unwrap();
    assert_eq!(hours[0].key, "14");
    assert_eq!(hours[0].recall, 1.0);
}

#[test]
fn score_grid_rows() {
    let (db, _) = geo_db();
    let dim = db.dim();
    let q = one_hot(dim, 4);
    let layout = *db.layout();
    let c = GeoPoint::from_degrees(42.0, -71.0);
    let min = c.offset_m(-60.0, -60.0, layout.earth_radius());
    let max = c.offset_m(60.0, 60.0, layout.earth_radius());
    let rows = score_grid(&db, &q, &min, &max).unwrap();
    assert_eq!(rows.len(), db.len());
    let best = rows.iter().max_by(|a, b| a.score.total_cmp(&b.score)).unwrap();
    assert_eq!(best.cell, db.records()[4].cell);
    assert_eq!(best.score, 1.0);
    let full = knn_exact(&db, &q, db.len()).unwrap();
    for row in &rows {
        let h = full.iter().find(|h| h.cell == row.cell).unwrap();
        assert_eq!(h.score, row.score);
    }
    let mut out = Vec::new();
    write_score_grid_csv(&mut out, &rows).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), rows.len() + 1);
    assert!(text.starts_with("band_i,step_j,lat_deg,lon_deg,score\n"));
}

#[test]
fn results_csv_format() {
    let (db, centers) = geo_db();
    let q = one_hot(db.dim(), 0);
    let hits = knn_exact(&db, &q, 2).unwrap();
    let mut out = Vec::new();
    write_results_csv(&mut out, &db, &[("a".into(), centers[0])], &[hits], 50.0).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "query_id,rank,band_i,step_j,score,dist_m,hit");
    assert!(lines[1].starts_with("a,1,"));
    assert!(lines[1].ends_with(",0.000,1"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn query_file_round_trip() {
    use chrono::TimeZone;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let queries: Vec<QueryRecord> = (0..3)
        .map(|k| QueryRecord {
            id: format!("q{k}"),
            location: GeoPoint::from_degrees(-33.5 + k as f64, 179.9999),
            captured_at: (k != 1).then(|| chrono::Utc.with_ymd_and_hms(2019, 7, 4, 9, 30, 0).unwrap()),
            embedding: Embedding::normalized(random_unit(&mut rng, 6)).unwrap(),
        })
        .collect();
    let mut a = Vec::new();
    write_queries(&mut a, &queries).unwrap();
    let back = read_queries(a.as_slice()).unwrap();
    let mut b = Vec::new();
    write_queries(&mut b, &back).unwrap();
    assert_eq!(a, b);
    assert_eq!(back[1].captured_at, None);
    assert_eq!(back[0].embedding, queries[0].embedding);

    let bad = b"{\"id\":\"x\",\"lat\":1.0,\"lon\":2.0,\"embedding\":[0.5,0.5]}\n";
    assert!(matches!(read_queries(&bad[..]), Err(Error::Format(_))));
}
