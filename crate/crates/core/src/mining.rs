//! Streaming hard-example mining.
//!
//! The next `s` samples of the stream are embedded with a frozen snapshot
//! of the current model and grouped into batches of mutually similar
//! samples. `s` starts at `b` and doubles after a consumed pool once enough
//! iterations have passed, up to a cap.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{embed_cell, embed_street, Embedding, ModelParams};
use crate::training::{Renderer, Sample, SampleStream};

/// Iterations over which the pool size may double at most once.
pub const ITERS_PER_INCREASE_NUMERATOR: usize = 5000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiningState {
    b: usize,
    s: usize,
    cap: usize,
    iterations_since_increase: usize,
    min_iters_per_increase: usize,
}

impl MiningState {
    /// Fails unless `b <= s_max`.
    pub fn new(b: usize, s_max: usize) -> Result<Self> {
        if b == 0 || s_max < b {
            return Err(Error::Parameter(format!("need 1 <= b <= s_max, got b={b}, s_max={s_max}")));
        }
        let mut cap = b;
        while cap * 2 <= s_max {
            cap *= 2;
        }
        Ok(Self {
            b,
            s: b,
            cap,
            iterations_since_increase: 0,
            min_iters_per_increase: ITERS_PER_INCREASE_NUMERATOR.div_ceil(b),
        })
    }

    pub fn pool_size(&self) -> usize {
        self.s
    }

    /// Largest `b * 2^k` not above `s_max`.
    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn min_iters_per_increase(&self) -> usize {
        self.min_iters_per_increase
    }

    pub fn iterations_since_increase(&self) -> usize {
        self.iterations_since_increase
    }

    pub fn record_iteration(&mut self) {
        self.iterations_since_increase += 1;
    }

    /// Called when a pool has been fully consumed. Returns the pool size to
    /// scan next.
    pub fn on_pool_consumed(&mut self) -> usize {
        if self.iterations_since_increase >= self.min_iters_per_increase && self.s < self.cap {
            self.s *= 2;
            self.iterations_since_increase = 0;
        }
        self.s
    }
}

/// Pool size to use after the current pool (does not mutate `state`).
pub fn next_pool_size(state: &MiningState) -> usize {
    state.clone().on_pool_consumed()
}

#[derive(Clone, Debug)]
pub struct MiningPool {
    pub samples: Vec<Sample>,
    pub query: Vec<Embedding>,
    pub reference: Vec<Embedding>,
}

impl MiningPool {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Takes the next `s` samples and embeds both sides with `params`.
pub fn scan_pool(
    params: &ModelParams,
    renderer: &Renderer,
    stream: &mut SampleStream,
    s: usize,
) -> Result<MiningPool> {
    let samples = stream.take_samples(s)?;
    let embedded: Vec<(Embedding, Embedding)> = samples
        .par_iter()
        .map(|sample| {
            let r = renderer.render(sample)?;
            Ok((embed_street(params, &r.street)?, embed_cell(params, &r.cell)?))
        })
        .collect::<Result<_>>()?;
    let (query, reference) = embedded.into_iter().unzip();
    Ok(MiningPool {
        samples,
        query,
        reference,
    })
}

/// Greedy centroid clustering into `len / b` batches of pool indices.
///
/// Each batch starts from a uniformly random remaining sample; then `b - 1`
/// times the remaining sample whose reference embedding has the largest dot
/// product with the mean query embedding of the current members is added.
/// Ties go to the lowest index.
pub fn cluster_pool<R: Rng + ?Sized>(
    query: &[Embedding],
    reference: &[Embedding],
    b: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let n = query.len();
    if reference.len() != n || b == 0 || !n.is_multiple_of(b) {
        return Err(Error::Parameter(format!(
            "pool of {n} queries and {} references cannot be split into batches of {b}",
            reference.len()
        )));
    }
    let dim = query.first().map_or(0, |e| e.len());
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut batches = Vec::with_capacity(n / b);
    while !remaining.is_empty() {
        let seed = remaining.remove(rng.random_range(0..remaining.len()));
        let mut batch = vec![seed];
        let mut sum: Vec<f64> = query[seed].as_slice().to_vec();
        for _ in 1..b {
            // The centroid is sum / |batch|; scaling does not change the argmax.
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (pos, &cand) in remaining.iter().enumerate() {
                let score: f64 = reference[cand]
                    .as_slice()
                    .iter()
                    .zip(&sum)
                    .map(|(a, c)| a * c)
                    .sum();
                if score > best_score {
                    best_score = score;
                    best = pos;
                }
            }
            let pick = remaining.remove(best);
            for k in 0..dim {
                sum[k] += query[pick].as_slice()[k];
            }
            batch.push(pick);
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Batch source for training with mining on.
pub struct MinedBatches {
    state: MiningState,
    rng: ChaCha8Rng,
    queue: VecDeque<Vec<Sample>>,
    scanned: usize,
}

impl MinedBatches {
    pub fn new(b: usize, s_max: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            state: MiningState::new(b, s_max)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: VecDeque::new(),
            scanned: 0,
        })
    }

    pub fn state(&self) -> &MiningState {
        &self.state
    }

    /// Total samples scanned so far.
    pub fn scanned(&self) -> usize {
        self.scanned
    }

    /// Next batch and the size of the pool it came from.
    pub fn next_batch(
        &mut self,
        params: &ModelParams,
        renderer: &Renderer,
        stream: &mut SampleStream,
    ) -> Result<(Vec<Sample>, usize)> {
        let b = self.state.b;
        if self.queue.is_empty() {
            if self.scanned > 0 {
                self.state.on_pool_consumed();
            }
            let s = self.state.pool_size();
            if s == b {
                // A single batch clusters to itself; skip the scan.
                self.queue.push_back(stream.take_samples(b)?);
            } else {
                let pool = scan_pool(params, renderer, stream, s)?;
                let batches = cluster_pool(&pool.query, &pool.reference, b, &mut self.rng)?;
                for batch in batches {
                    self.queue
                        .push_back(batch.into_iter().map(|k| pool.samples[k]).collect());
                }
            }
            self.scanned += s;
        }
        self.state.record_iteration();
        let batch = self.queue.pop_front().expect("queue was refilled");
        Ok((batch, self.state.pool_size()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn fresh_state_starts_at_b() {
        let st = MiningState::new(30, 1 << 14).unwrap();
        assert_eq!(st.pool_size(), 30);
        assert_eq!(st.min_iters_per_increase(), 167);
        assert_eq!(st.cap(), 15360);
        assert!(MiningState::new(8, 4).is_err());
    }

    #[test]
    fn doubling_needs_consumed_pool_and_enough_iterations() {
        let mut st = MiningState::new(30, 1 << 14).unwrap();
        for _ in 0..166 {
            st.record_iteration();
        }
        assert_eq!(st.on_pool_consumed(), 30);
        st.record_iteration();
        assert_eq!(next_pool_size(&st), 60);
        assert_eq!(st.on_pool_consumed(), 60);
        assert_eq!(st.iterations_since_increase(), 0);
    }

    #[test]
    fn single_batch_pool_is_identity() {
        let q = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = cluster_pool(&q, &q, 3, &mut rng).unwrap();
        assert_eq!(batches.len(), 1);
        let mut b = batches[0].clone();
        b.sort();
        assert_eq!(b, vec![0, 1, 2]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // Seed is forced (pool of one remaining after it); candidates tie.
        let q = vec![unit(&[1.0, 0.0]); 4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = cluster_pool(&q, &q, 2, &mut rng).unwrap();
        for batch in &batches {
            let seed = batch[0];
            let expected_pick = (0..4)
                .find(|k| {
                    *k != seed && !batches.iter().take_while(|x| *x != batch).flatten().any(|x| x == k)
                })
                .unwrap();
            assert_eq!(batch[1], expected_pick);
        }
    }

    #[test]
    fn rejects_indivisible_pool() {
        let q = vec![unit(&[1.0]); 5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(cluster_pool(&q, &q, 2, &mut rng).is_err());
    }
}
