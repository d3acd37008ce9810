//! Fixtures shared by the benchmarks.

use cellgeo::model::Embedding;
use cellgeo::raster::Image;
use cellgeo::retrieval::{DbRecord, EmbeddingDatabase};
use cellgeo::{CellIndex, RegionLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Embedding {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Embedding::normalized(v).expect("non-zero vector")
}

/// `count` random unit vectors on consecutive cells.
pub fn random_db(count: usize, dim: usize, seed: u64) -> EmbeddingDatabase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut db = EmbeddingDatabase::new(RegionLayout::default(), dim);
    for k in 0..count {
        db.push(DbRecord {
            cell: CellIndex::new(1000 + (k / 100) as i32, (k % 100) as i32),
            covered: true,
            embedding: random_unit(&mut rng, dim).to_f32(),
        })
        .expect("fresh cell");
    }
    db
}

pub fn random_image(rng: &mut impl Rng, size: usize) -> Image {
    let data = (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::from_data(size, size, data).expect("matching length")
}
