//! Hierarchical navigable small-world graph over database embeddings.
//!
//! Every layer, including the base layer, keeps at most `m` out-links per
//! node. After construction the base layer is repaired until every node is
//! reachable from the entry point.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{hit_order, score, EmbeddingDatabase, Hit};
use crate::error::{Error, Result};
use crate::model::Embedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphParams {
    pub m: usize,
    pub ef_construction: usize,
    pub seed: u64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            m: 16,
            ef_construction: 200,
            seed: 0,
        }
    }
}

pub const DEFAULT_EF_SEARCH: usize = 256;

#[derive(Clone, Debug)]
pub struct GraphIndex {
    params: GraphParams,
    entry: usize,
    max_level: usize,
    /// `links[node][layer]`, present for layers `0..=level(node)`.
    links: Vec<Vec<Vec<u32>>>,
}

/// `(similarity, node)` ordered by similarity, ties toward the lower node.
#[derive(Clone, Copy, PartialEq)]
struct Scored(f64, u32);

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn sim(db: &EmbeddingDatabase, node: u32, q: &[f64]) -> f64 {
    score(&db.records()[node as usize].embedding, q)
}

fn as_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl GraphIndex {
    pub fn build(db: &EmbeddingDatabase, params: GraphParams) -> Result<Self> {
        if params.m < 2 || params.ef_construction == 0 {
            return Err(Error::Parameter(format!(
                "graph needs M >= 2 and ef_construction >= 1, got {} and {}",
                params.m, params.ef_construction
            )));
        }
        if db.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = 1.0 / (params.m as f64).ln();
        let mut index = Self {
            params,
            entry: 0,
            max_level: 0,
            links: Vec::with_capacity(db.len()),
        };
        for node in 0..db.len() {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let level = ((-u.ln() * ml).floor() as usize).min(16);
            index.insert(db, node as u32, level);
        }
        index.repair(db);
        Ok(index)
    }

    pub fn params(&self) -> GraphParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn entry_point(&self) -> usize {
        self.entry
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    /// Out-links of `node` on `layer` (empty above the node's level).
    pub fn neighbors(&self, node: usize, layer: usize) -> &[u32] {
        self.links[node].get(layer).map_or(&[], |v| v.as_slice())
    }

    fn insert(&mut self, db: &EmbeddingDatabase, node: u32, level: usize) {
        self.links.push(vec![Vec::new(); level + 1]);
        if node == 0 {
            self.entry = 0;
            self.max_level = level;
            return;
        }
        let q = as_f64(&db.records()[node as usize].embedding);
        let mut ep = Scored(sim(db, self.entry as u32, &q), self.entry as u32);
        for layer in (level + 1..=self.max_level).rev() {
            ep = self.greedy(db, &q, ep, layer);
        }
        let mut entries = vec![ep];
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(db, &q, &entries, self.params.ef_construction, layer);
            let chosen = self.select(db, &found, self.params.m);
            self.links[node as usize][layer] = chosen.iter().map(|s| s.1).collect();
            for s in &chosen {
                self.link(db, s.1, node, layer);
            }
            entries = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = node as usize;
        }
    }

    /// Adds `from -> to`, pruning `from` back to `m` links if needed.
    fn link(&mut self, db: &EmbeddingDatabase, from: u32, to: u32, layer: usize) {
        let list = &mut self.links[from as usize][layer];
        if list.contains(&to) {
            return;
        }
        list.push(to);
        if list.len() <= self.params.m {
            return;
        }
        let base = as_f64(&db.records()[from as usize].embedding);
        let mut cands: Vec<Scored> = list.iter().map(|&n| Scored(sim(db, n, &base), n)).collect();
        cands.sort_by(|a, b| b.cmp(a));
        let kept = self.select(db, &cands, self.params.m);
        self.links[from as usize][layer] = kept.iter().map(|s| s.1).collect();
    }

    /// Diversity heuristic: a candidate is kept only if it is closer to the
    /// base than to every neighbor kept so far. Remaining slots are filled
    /// with the best discarded candidates. `cands` is sorted best first.
    fn select(&self, db: &EmbeddingDatabase, cands: &[Scored], m: usize) -> Vec<Scored> {
        let mut kept: Vec<Scored> = Vec::with_capacity(m);
        let mut dropped = Vec::new();
        for &c in cands {
            if kept.len() == m {
                break;
            }
            let cv = as_f64(&db.records()[c.1 as usize].embedding);
            if kept.iter().all(|k| sim(db, k.1, &cv) < c.0) {
                kept.push(c);
            } else {
                dropped.push(c);
            }
        }
        for d in dropped {
            if kept.len() == m {
                break;
            }
            kept.push(d);
        }
        kept
    }

    fn greedy(&self, db: &EmbeddingDatabase, q: &[f64], mut best: Scored, layer: usize) -> Scored {
        loop {
            let mut improved = false;
            for &n in self.neighbors(best.1 as usize, layer) {
                let s = Scored(sim(db, n, q), n);
                if s > best {
                    best = s;
                    improved = true;
                }
            }
            if !improved {
                return best;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` nodes, best first.
    fn search_layer(
        &self,
        db: &EmbeddingDatabase,
        q: &[f64],
        entries: &[Scored],
        ef: usize,
        layer: usize,
    ) -> Vec<Scored> {
        let mut visited = vec![false; self.links.len()];
        let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
        for &e in entries {
            if !visited[e.1 as usize] {
                visited[e.1 as usize] = true;
                candidates.push(e);
                results.push(Reverse(e));
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().expect("results are non-empty").0;
            if c < worst && results.len() >= ef {
                break;
            }
            for &n in self.neighbors(c.1 as usize, layer) {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let s = Scored(sim(db, n, q), n);
                let worst = results.peek().expect("results are non-empty").0;
                if results.len() < ef || s > worst {
                    candidates.push(s);
                    results.push(Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.links.len()];
        let mut queue = VecDeque::from([self.entry]);
        seen[self.entry] = true;
        while let Some(u) = queue.pop_front() {
            for &v in self.neighbors(u, 0) {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    queue.push_back(v as usize);
                }
            }
        }
        seen
    }

    /// Links every unreachable base-layer node from its most similar
    /// reachable node, evicting a link whose target keeps another in-link.
    /// Gives up after a bounded number of rounds; [`GraphIndex::is_connected`]
    /// reports the outcome.
    fn repair(&mut self, db: &EmbeddingDatabase) {
        let m = self.params.m;
        for _ in 0..2 * self.links.len() {
            let seen = self.reachable();
            let Some(orphan) = seen.iter().position(|&s| !s) else {
                return;
            };
            let mut indegree = vec![0usize; self.links.len()];
            for node in &self.links {
                for &v in &node[0] {
                    indegree[v as usize] += 1;
                }
            }
            let q = as_f64(&db.records()[orphan].embedding);
            let entry = Scored(sim(db, self.entry as u32, &q), self.entry as u32);
            let cands = self.search_layer(db, &q, &[entry], self.params.ef_construction.max(m), 0);
            let mut placed = false;
            for c in cands.iter().filter(|c| seen[c.1 as usize]) {
                let list = &mut self.links[c.1 as usize][0];
                if list.len() < m {
                    list.push(orphan as u32);
                    placed = true;
                    break;
                }
                if let Some(pos) = list.iter().rposition(|&v| indegree[v as usize] >= 2) {
                    list[pos] = orphan as u32;
                    placed = true;
                    break;
                }
            }
            if !placed {
                // Every reachable node is saturated with sole in-links; fall
                // back to the entry point's weakest link.
                let list = &mut self.links[self.entry][0];
                let last = list.len() - 1;
                list[last] = orphan as u32;
            }
        }
    }

    /// Whether every node is reachable from the entry point on the base layer.
    pub fn is_connected(&self) -> bool {
        self.reachable().iter().all(|&s| s)
    }

    /// Approximate top-`n`. Requires `ef_search >= n`.
    pub fn search(
        &self,
        db: &EmbeddingDatabase,
        query: &Embedding,
        n: usize,
        ef_search: usize,
    ) -> Result<Vec<Hit>> {
        if self.is_empty() || db.len() != self.len() {
            return Err(Error::Validation("graph index is empty or does not match the database".into()));
        }
        if n == 0 || ef_search < n {
            return Err(Error::Parameter(format!("need 1 <= N <= ef_search, got N={n}, ef={ef_search}")));
        }
        let q = query.as_slice();
        let mut ep = Scored(sim(db, self.entry as u32, q), self.entry as u32);
        for layer in (1..=self.max_level).rev() {
            ep = self.greedy(db, q, ep, layer);
        }
        let found = self.search_layer(db, q, &[ep], ef_search, 0);
        let mut hits: Vec<Hit> = found
            .iter()
            .map(|s| Hit {
                cell: db.records()[s.1 as usize].cell,
                score: s.0,
            })
            .collect();
        hits.sort_by(hit_order);
        hits.truncate(n);
        Ok(hits)
    }
}
