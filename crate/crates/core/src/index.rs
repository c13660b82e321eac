//! Token-level maximum inner-product search over the document store.
//!
//! Every indexed entry remembers the document and token it came from, so
//! token hits trace back to documents. `Flat` scans every entry; `Ivf`
//! partitions entries into k-means cells and scans only the `nprobe` cells
//! whose centroids are closest to the query vector.
//!
//! MVIK sidecar layout (little-endian):
//!
//! ```text
//! "MVIK" | kind u32 (0 flat, 1 ivf) | nlist u32 | entry_count u64
//! | dim u32 | doc_count u64
//! | entries: entry_count × (doc u32, token u32)
//! | vectors: entry_count × dim × f32
//! | centroids: nlist × dim × f32
//! | lists: nlist × (len u32, len × entry u32)
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::dot;
use crate::error::{Error, Result};
use crate::salience::{check_ratio, prune_tokens, SalienceHead};
use crate::store::{Cursor, EmbeddingStore};

pub const MVIK_MAGIC: [u8; 4] = *b"MVIK";
pub const KMEANS_ITERS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Flat,
    Ivf,
}

/// One search result: the entry's origin and its inner product with the query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenHit {
    pub doc_ordinal: u32,
    pub token_ordinal: u32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenIndex {
    kind: IndexKind,
    dim: usize,
    doc_count: usize,
    /// Entries sorted by (doc, token).
    doc_ordinals: Vec<u32>,
    token_ordinals: Vec<u32>,
    vectors: Vec<f32>,
    /// `doc_offsets[d]..doc_offsets[d + 1]` are document `d`'s entries.
    doc_offsets: Vec<usize>,
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
}

/// Descending score, then ascending (doc, token).
fn hit_order(a: &TokenHit, b: &TokenHit) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.doc_ordinal.cmp(&b.doc_ordinal))
        .then(a.token_ordinal.cmp(&b.token_ordinal))
}

/// The `k` best hits in no particular order.
fn top_hits_unordered(mut hits: Vec<TokenHit>, k: usize) -> Vec<TokenHit> {
    if k == 0 {
        return Vec::new();
    }
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits
}

/// Token ordinals a document contributes to the index at ratio `beta_d`.
pub fn kept_tokens(
    store: &EmbeddingStore,
    ordinal: usize,
    head: Option<&SalienceHead>,
    beta_d: f64,
) -> Result<Vec<usize>> {
    prune_tokens(store.get(ordinal), head, beta_d)
}

impl TokenIndex {
    /// Indexes the salience-selected tokens of every document.
    pub fn build(
        store: &EmbeddingStore,
        head: Option<&SalienceHead>,
        beta_d: f64,
        kind: IndexKind,
        nlist: usize,
        seed: u64,
    ) -> Result<Self> {
        check_ratio("beta_d", beta_d)?;
        if let Some(h) = head {
            h.validate()?;
        }
        let dim = store.dim();
        let kept: Vec<Vec<usize>> = (0..store.len())
            .into_par_iter()
            .map(|d| kept_tokens(store, d, head, beta_d))
            .collect::<Result<_>>()?;

        let total: usize = kept.iter().map(Vec::len).sum();
        let mut index = TokenIndex {
            kind,
            dim,
            doc_count: store.len(),
            doc_ordinals: Vec::with_capacity(total),
            token_ordinals: Vec::with_capacity(total),
            vectors: Vec::with_capacity(total * dim),
            doc_offsets: Vec::with_capacity(store.len() + 1),
            centroids: Vec::new(),
            lists: Vec::new(),
        };
        index.doc_offsets.push(0);
        for (d, tokens) in kept.iter().enumerate() {
            let doc = store.get(d);
            for &t in tokens {
                index.doc_ordinals.push(d as u32);
                index.token_ordinals.push(t as u32);
                index.vectors.extend_from_slice(doc.row(t));
            }
            index.doc_offsets.push(index.doc_ordinals.len());
        }

        if kind == IndexKind::Ivf {
            if nlist == 0 || nlist > total {
                return Err(Error::Config(format!(
                    "nlist must lie in [1, {total}] (number of indexed tokens), got {nlist}"
                )));
            }
            let (centroids, assignment) = kmeans(&index.vectors, dim, nlist, seed);
            let mut lists = vec![Vec::new(); nlist];
            for (e, &c) in assignment.iter().enumerate() {
                lists[c].push(e as u32);
            }
            index.centroids = centroids;
            index.lists = lists;
        }
        Ok(index)
    }

    pub fn kind(&self) -> IndexKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.doc_ordinals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ordinals.is_empty()
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn list_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }

    pub fn entry(&self, e: usize) -> (u32, u32, &[f32]) {
        (
            self.doc_ordinals[e],
            self.token_ordinals[e],
            &self.vectors[e * self.dim..(e + 1) * self.dim],
        )
    }

    /// Token ordinals of document `doc` that were indexed, ascending.
    pub fn doc_tokens(&self, doc: usize) -> &[u32] {
        &self.token_ordinals[self.doc_offsets[doc]..self.doc_offsets[doc + 1]]
    }

    fn score_entries(
        &self,
        query: &[f32],
        entries: impl IndexedParallelIterator<Item = usize>,
    ) -> Vec<TokenHit> {
        entries
            .map(|e| TokenHit {
                doc_ordinal: self.doc_ordinals[e],
                token_ordinal: self.token_ordinals[e],
                score: dot(query, &self.vectors[e * self.dim..(e + 1) * self.dim]),
            })
            .collect()
    }

    /// Cells ordered by squared distance from `query` to their centroid.
    fn probe_order(&self, query: &[f32]) -> Vec<usize> {
        let dist: Vec<f64> = self
            .centroids
            .chunks_exact(self.dim)
            .map(|c| sq_dist(query, c))
            .collect();
        let mut cells: Vec<usize> = (0..dist.len()).collect();
        cells.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        cells
    }

    /// The `k_neighbors` entries with the largest inner product with `query`.
    /// `nprobe` is ignored by flat indexes and clamped to `nlist` otherwise.
    pub fn search_tokens(
        &self,
        query: &[f32],
        k_neighbors: usize,
        nprobe: usize,
    ) -> Result<Vec<TokenHit>> {
        let mut hits = self.search_unordered(query, k_neighbors, nprobe)?;
        hits.sort_unstable_by(hit_order);
        Ok(hits)
    }

    /// The same hit set as [`search_tokens`](Self::search_tokens), unsorted.
    pub fn search_unordered(
        &self,
        query: &[f32],
        k_neighbors: usize,
        nprobe: usize,
    ) -> Result<Vec<TokenHit>> {
        if query.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: query.len(),
            });
        }
        let hits = match self.kind {
            IndexKind::Flat => self.score_entries(query, (0..self.len()).into_par_iter()),
            IndexKind::Ivf => {
                let cells = self.probe_order(query);
                let mut entries: Vec<usize> = cells
                    .iter()
                    .take(nprobe.clamp(1, self.nlist()))
                    .flat_map(|&c| self.lists[c].iter().map(|&e| e as usize))
                    .collect();
                entries.sort_unstable();
                self.score_entries(query, entries.into_par_iter())
            }
        };
        Ok(top_hits_unordered(hits, k_neighbors))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut buf = Vec::with_capacity(
            40 + n * (8 + 4 * self.dim) + 4 * self.centroids.len() + 4 * (n + self.nlist()),
        );
        buf.extend_from_slice(&MVIK_MAGIC);
        let kind: u32 = match self.kind {
            IndexKind::Flat => 0,
            IndexKind::Ivf => 1,
        };
        buf.extend_from_slice(&kind.to_le_bytes());
        buf.extend_from_slice(&(self.nlist() as u32).to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.doc_count as u64).to_le_bytes());
        for e in 0..n {
            buf.extend_from_slice(&self.doc_ordinals[e].to_le_bytes());
            buf.extend_from_slice(&self.token_ordinals[e].to_le_bytes());
        }
        for v in self.vectors.iter().chain(&self.centroids) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for list in &self.lists {
            buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for e in list {
                buf.extend_from_slice(&e.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MVIK_MAGIC {
            return Err(Error::Format("missing MVIK magic".into()));
        }
        let mut cur = Cursor::new(bytes);
        cur.take(4, "magic")?;
        let kind = match cur.u32("kind")? {
            0 => IndexKind::Flat,
            1 => IndexKind::Ivf,
            other => return Err(Error::Format(format!("unknown index kind {other}"))),
        };
        let nlist = cur.u32("nlist")? as usize;
        let n = usize::try_from(cur.u64("entry_count")?)
            .map_err(|_| Error::Corruption("entry_count overflows".into()))?;
        let dim = cur.u32("dim")? as usize;
        let doc_count = usize::try_from(cur.u64("doc_count")?)
            .map_err(|_| Error::Corruption("doc_count overflows".into()))?;
        if dim == 0 {
            return Err(Error::Format("dimension must be positive".into()));
        }
        if (kind == IndexKind::Flat) != (nlist == 0) {
            return Err(Error::Corruption(format!(
                "{kind:?} index with nlist {nlist}"
            )));
        }
        if n.saturating_mul(8 + 4 * dim) > cur.remaining() {
            return Err(Error::Corruption("entry table is truncated".into()));
        }
        let pairs = cur.u32s(2 * n, "entries")?;
        let vectors = cur.f32s(n * dim, "vectors")?;
        let centroids = cur.f32s(nlist.saturating_mul(dim), "centroids")?;
        let mut lists = Vec::with_capacity(nlist);
        let mut seen = vec![false; n];
        for c in 0..nlist {
            let len = cur.u32("list length")? as usize;
            let list = cur.u32s(len, "posting list")?;
            for &e in &list {
                let e = e as usize;
                if e >= n || std::mem::replace(&mut seen[e], true) {
                    return Err(Error::Corruption(format!(
                        "posting list {c} has invalid entry {e}"
                    )));
                }
            }
            lists.push(list);
        }
        if nlist > 0 && seen.iter().any(|s| !s) {
            return Err(Error::Corruption(
                "posting lists do not cover every entry".into(),
            ));
        }
        if cur.remaining() != 0 {
            return Err(Error::Corruption(format!(
                "{} trailing bytes",
                cur.remaining()
            )));
        }

        let doc_ordinals: Vec<u32> = pairs.iter().step_by(2).copied().collect();
        let token_ordinals: Vec<u32> = pairs.iter().skip(1).step_by(2).copied().collect();
        let mut doc_offsets = vec![0usize; doc_count + 1];
        for e in 0..n {
            let d = doc_ordinals[e] as usize;
            if d >= doc_count {
                return Err(Error::Corruption(format!(
                    "entry {e} references document {d}"
                )));
            }
            if e > 0
                && (doc_ordinals[e - 1], token_ordinals[e - 1])
                    >= (doc_ordinals[e], token_ordinals[e])
            {
                return Err(Error::Corruption(
                    "entries are not sorted by (doc, token)".into(),
                ));
            }
            doc_offsets[d + 1] += 1;
        }
        for d in 0..doc_count {
            doc_offsets[d + 1] += doc_offsets[d];
        }
        Ok(TokenIndex {
            kind,
            dim,
            doc_count,
            doc_ordinals,
            token_ordinals,
            vectors,
            doc_offsets,
            centroids,
            lists,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks that the index was built over `store`.
    pub fn check_store(&self, store: &EmbeddingStore) -> Result<()> {
        if self.doc_count != store.len() || self.dim != store.dim() {
            return Err(Error::Config(format!(
                "index covers {} documents of dim {}, store has {} of dim {}",
                self.doc_count,
                self.dim,
                store.len(),
                store.dim()
            )));
        }
        Ok(())
    }
}

pub fn build_index(
    store: &EmbeddingStore,
    head: Option<&SalienceHead>,
    beta_d: f64,
    kind: IndexKind,
    nlist: usize,
    seed: u64,
) -> Result<TokenIndex> {
    TokenIndex::build(store, head, beta_d, kind, nlist, seed)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn nearest(x: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's k-means with seeded initial centroids drawn from the data. Each
/// round assigns every point, then recomputes all centroids. Cells left
/// empty take over the point farthest from its centroid.
fn kmeans(vectors: &[f32], dim: usize, nlist: usize, seed: u64) -> (Vec<f32>, Vec<usize>) {
    let n = vectors.len() / dim;
    let point = |i: usize| &vectors[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut centroids: Vec<f32> = order[..nlist]
        .iter()
        .flat_map(|&i| point(i).iter().copied())
        .collect();

    let assign = |centroids: &[f32]| -> Vec<(usize, f64)> {
        (0..n)
            .into_par_iter()
            .map(|i| nearest(point(i), centroids, dim))
            .collect()
    };
    let mut assignment = assign(&centroids);
    for _ in 0..KMEANS_ITERS {
        let mut sums = vec![0.0f64; nlist * dim];
        let mut counts = vec![0usize; nlist];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += f64::from(v);
            }
        }
        for c in 0..nlist {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = (s / counts[c] as f64) as f32;
                }
            }
        }
        repair_empty(&mut centroids, &mut assignment, &mut counts, vectors, dim);
        let next = assign(&centroids);
        let stable = next.iter().zip(&assignment).all(|(a, b)| a.0 == b.0);
        assignment = next;
        if stable {
            break;
        }
    }
    let mut counts = vec![0usize; nlist];
    for &(c, _) in &assignment {
        counts[c] += 1;
    }
    repair_empty(&mut centroids, &mut assignment, &mut counts, vectors, dim);
    (centroids, assignment.into_iter().map(|(c, _)| c).collect())
}

fn repair_empty(
    centroids: &mut [f32],
    assignment: &mut [(usize, f64)],
    counts: &mut [usize],
    vectors: &[f32],
    dim: usize,
) {
    for c in 0..counts.len() {
        if counts[c] > 0 {
            continue;
        }
        let donor = assignment
            .iter()
            .enumerate()
            .filter(|(_, &(cell, _))| counts[cell] > 1)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        let Some(i) = donor else { return };
        counts[assignment[i].0] -= 1;
        counts[c] += 1;
        assignment[i] = (c, 0.0);
        centroids[c * dim..(c + 1) * dim].copy_from_slice(&vectors[i * dim..(i + 1) * dim]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{DocumentRecord, TokenEmbeddings};

    fn store() -> EmbeddingStore {
        let docs = [
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.6, 0.8], vec![-1.0, 0.0], vec![0.8, -0.6]],
            vec![vec![0.0, -1.0]],
        ];
        EmbeddingStore::from_records(
            docs.iter()
                .enumerate()
                .map(|(i, rows)| {
                    let ids = (0..rows.len() as u32).collect();
                    DocumentRecord::new(
                        format!("d{i}"),
                        TokenEmbeddings::from_rows_normalized(rows, ids).unwrap(),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn flat_search_is_exact_and_ordered() {
        let index = build_index(&store(), None, 1.0, IndexKind::Flat, 0, 0).unwrap();
        assert_eq!(index.len(), 6);
        let hits = index.search_tokens(&[1.0, 0.0], 2, 1).unwrap();
        assert_eq!(
            (hits[0].doc_ordinal, hits[0].token_ordinal, hits[0].score),
            (0, 0, 1.0)
        );
        assert_eq!((hits[1].doc_ordinal, hits[1].token_ordinal), (1, 2));
        let all = index.search_tokens(&[1.0, 0.0], 100, 1).unwrap();
        assert_eq!(all.len(), 6);
        assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
        // Equal scores fall back to (doc, token) order.
        let tied = index.search_tokens(&[0.0, 0.0], 6, 1).unwrap();
        let order: Vec<(u32, u32)> = tied
            .iter()
            .map(|h| (h.doc_ordinal, h.token_ordinal))
            .collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (2, 0)]);
        assert!(index.search_tokens(&[1.0], 1, 1).is_err());
    }

    #[test]
    fn pruning_requires_salience() {
        let err = build_index(&store(), None, 0.5, IndexKind::Flat, 0, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let head = SalienceHead::new(crate::salience::Side::Document, vec![1.0, 0.0], 1.0);
        let index = build_index(&store(), Some(&head), 0.5, IndexKind::Flat, 0, 0).unwrap();
        // ceil(0.5 · m) per document: 1 + 2 + 1.
        assert_eq!(index.len(), 4);
        assert_eq!(index.doc_tokens(1), &[0, 2]);
    }

    #[test]
    fn ivf_single_cell_matches_flat() {
        let s = store();
        let flat = build_index(&s, None, 1.0, IndexKind::Flat, 0, 0).unwrap();
        let ivf = build_index(&s, None, 1.0, IndexKind::Ivf, 1, 3).unwrap();
        let q = [0.6f32, -0.8];
        assert_eq!(
            flat.search_tokens(&q, 4, 1).unwrap(),
            ivf.search_tokens(&q, 4, 1).unwrap()
        );
        assert!(build_index(&s, None, 1.0, IndexKind::Ivf, 7, 0).is_err());
    }

    #[test]
    fn kmeans_fills_every_cell() {
        let s = store();
        let ivf = build_index(&s, None, 1.0, IndexKind::Ivf, 6, 11).unwrap();
        assert!(ivf.list_sizes().iter().all(|&n| n == 1));
    }

    #[test]
    fn mvik_rejects_damage() {
        let ivf = build_index(&store(), None, 1.0, IndexKind::Ivf, 2, 5).unwrap();
        let bytes = ivf.to_bytes();
        assert_eq!(TokenIndex::from_bytes(&bytes).unwrap(), ivf);
        let mut bad = bytes.clone();
        bad[1] = b'Z';
        assert!(matches!(
            TokenIndex::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            TokenIndex::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::Corruption(_))
        ));
        let mut kind = bytes.clone();
        kind[4] = 7;
        assert!(matches!(
            TokenIndex::from_bytes(&kind),
            Err(Error::Format(_))
        ));
    }
}
