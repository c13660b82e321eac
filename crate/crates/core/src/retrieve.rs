//! Candidate generation by token search and trace-back, then refinement of
//! every candidate document with the configured alignment strategy.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{score_pair, AlignmentStrategy};
use crate::error::{Error, Result};
use crate::index::{IndexKind, TokenIndex};
use crate::salience::{prune_tokens, token_weights, SalienceConfig, SalienceHeads};
use crate::store::{EmbeddingStore, TokenView};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

/// Hits in descending score order, ties by ascending doc id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub hits: Vec<Hit>,
}

impl RankedList {
    pub fn empty(query_id: &str) -> Self {
        Self {
            query_id: query_id.to_string(),
            hits: Vec::new(),
        }
    }

    /// Sorts `scores` into ranking order and keeps the first `top_n`.
    pub fn from_scores(query_id: &str, mut scores: Vec<(String, f64)>, top_n: usize) -> Self {
        scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scores.truncate(top_n);
        Self {
            query_id: query_id.to_string(),
            hits: scores
                .into_iter()
                .map(|(doc_id, score)| Hit { doc_id, score })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    /// 1-based rank of `doc_id`.
    pub fn rank_of(&self, doc_id: &str) -> Option<usize> {
        self.hits
            .iter()
            .position(|h| h.doc_id == doc_id)
            .map(|i| i + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub strategy: AlignmentStrategy,
    /// Token neighbors fetched per kept query token.
    pub neighbors_per_token: usize,
    pub final_top_n: usize,
    /// IVF cells probed per query token; ignored by flat indexes.
    pub nprobe: usize,
    /// Divide by the alignment mass `Z`.
    pub normalize: bool,
    /// Refine against every stored document token instead of the indexed ones.
    pub full_store_refinement: bool,
    pub salience: SalienceConfig,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            strategy: AlignmentStrategy::COLBERT,
            neighbors_per_token: 4000,
            final_top_n: 1000,
            nprobe: 8,
            normalize: true,
            full_store_refinement: false,
            salience: SalienceConfig::default(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.salience.validate()?;
        if self.neighbors_per_token == 0 {
            return Err(Error::Config(
                "neighbors_per_token must be at least 1".into(),
            ));
        }
        if self.final_top_n == 0 {
            return Err(Error::Config("final_top_n must be at least 1".into()));
        }
        if self.nprobe == 0 {
            return Err(Error::Config("nprobe must be at least 1".into()));
        }
        Ok(())
    }
}

/// Refinement state shared by indexed and brute-force retrieval: the store,
/// optional heads and the gated document salience they imply.
struct Refiner<'a> {
    store: &'a EmbeddingStore,
    heads: Option<&'a SalienceHeads>,
    config: &'a RetrievalConfig,
    doc_weights: Option<Vec<Vec<f64>>>,
}

/// A query after pruning: kept token indices, their embeddings and weights.
struct PreparedQuery<'q> {
    full: TokenView<'q>,
    kept: Vec<usize>,
    pruned: Option<crate::store::TokenEmbeddings>,
    weights: Option<Vec<f64>>,
}

impl PreparedQuery<'_> {
    fn view(&self) -> TokenView<'_> {
        match &self.pruned {
            Some(p) => p.view(),
            None => self.full,
        }
    }
}

fn subset(values: &[f64], indices: &[usize]) -> Vec<f64> {
    indices.iter().map(|&i| values[i]).collect()
}

impl<'a> Refiner<'a> {
    fn new(
        store: &'a EmbeddingStore,
        heads: Option<&'a SalienceHeads>,
        config: &'a RetrievalConfig,
    ) -> Result<Self> {
        config.validate()?;
        let doc_weights = match heads {
            Some(h) => {
                h.validate()?;
                if h.document.dim != store.dim() {
                    return Err(Error::Dimension {
                        expected: store.dim(),
                        found: h.document.dim,
                    });
                }
                let s = &config.salience;
                Some(
                    (0..store.len())
                        .into_par_iter()
                        .map(|d| token_weights(store.get(d), &h.document, s.alpha_d, s.epsilon))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            None => None,
        };
        Ok(Self {
            store,
            heads,
            config,
            doc_weights,
        })
    }

    fn prepare<'q>(&self, query: TokenView<'q>) -> Result<PreparedQuery<'q>> {
        if query.dim() != self.store.dim() {
            return Err(Error::Dimension {
                expected: self.store.dim(),
                found: query.dim(),
            });
        }
        if query.is_empty() {
            return Err(Error::Config("query has no tokens".into()));
        }
        let s = &self.config.salience;
        let head = self.heads.map(|h| &h.query);
        let kept = prune_tokens(query, head, s.beta_q)?;
        let weights = head
            .map(|h| token_weights(query, h, s.alpha_q, s.epsilon))
            .transpose()?
            .map(|u| subset(&u, &kept));
        let pruned = (kept.len() < query.len()).then(|| query.select(&kept));
        Ok(PreparedQuery {
            full: query,
            kept,
            pruned,
            weights,
        })
    }

    /// Scores document `d` restricted to `tokens`, or all its tokens when `None`.
    fn score(&self, query: &PreparedQuery<'_>, d: usize, tokens: Option<&[usize]>) -> Result<f64> {
        let doc = self.store.get(d);
        let selected;
        let (view, keep) = match tokens {
            Some(t) if t.len() < doc.len() => {
                selected = doc.select(t);
                (selected.view(), Some(t))
            }
            _ => (doc, None),
        };
        let u_d = self.doc_weights.as_ref().map(|w| match keep {
            Some(t) => subset(&w[d], t),
            None => w[d].clone(),
        });
        let salience = match (&query.weights, &u_d) {
            (Some(u_q), Some(u_d)) => Some((u_q.as_slice(), u_d.as_slice())),
            _ => None,
        };
        let r = score_pair(
            query.view(),
            view,
            &self.config.strategy,
            self.config.normalize,
            salience,
        )?;
        if let AlignmentStrategy::TopP { p } = self.config.strategy {
            log::debug!(
                "doc {}: m = {}, top-p k_eff = {}",
                self.store.doc_id(d),
                view.len(),
                crate::align::topp_budget(p, view.len())
            );
        }
        Ok(r.score)
    }

    fn rank(&self, query_id: &str, scored: Vec<(usize, f64)>) -> RankedList {
        let scores = scored
            .into_iter()
            .map(|(d, s)| (self.store.doc_id(d).to_string(), s))
            .collect();
        RankedList::from_scores(query_id, scores, self.config.final_top_n)
    }
}

/// Index-backed retrieval with document salience weights computed once.
pub struct Retriever<'a> {
    index: &'a TokenIndex,
    refiner: Refiner<'a>,
}

impl<'a> Retriever<'a> {
    pub fn new(
        index: &'a TokenIndex,
        store: &'a EmbeddingStore,
        heads: Option<&'a SalienceHeads>,
        config: &'a RetrievalConfig,
    ) -> Result<Self> {
        index.check_store(store)?;
        if index.kind() == IndexKind::Ivf && config.nprobe > index.nlist() {
            return Err(Error::Config(format!(
                "nprobe {} exceeds nlist {}",
                config.nprobe,
                index.nlist()
            )));
        }
        Ok(Self {
            index,
            refiner: Refiner::new(store, heads, config)?,
        })
    }

    pub fn config(&self) -> &RetrievalConfig {
        self.refiner.config
    }

    /// Query token indices searched after pruning, ascending.
    pub fn kept_query_tokens(&self, query: TokenView<'_>) -> Result<Vec<usize>> {
        Ok(self.refiner.prepare(query)?.kept)
    }

    /// Sorted ordinals of every document reached by some kept query token.
    pub fn candidates(&self, query: TokenView<'_>) -> Result<Vec<usize>> {
        let prepared = self.refiner.prepare(query)?;
        self.gather(&prepared)
    }

    fn gather(&self, query: &PreparedQuery<'_>) -> Result<Vec<usize>> {
        let config = self.refiner.config;
        let per_token: Vec<Vec<u32>> = query
            .kept
            .par_iter()
            .map(|&i| {
                let hits = self.index.search_unordered(
                    query.full.row(i),
                    config.neighbors_per_token,
                    config.nprobe,
                )?;
                Ok(hits.into_iter().map(|h| h.doc_ordinal).collect())
            })
            .collect::<Result<_>>()?;
        let union: BTreeSet<u32> = per_token.into_iter().flatten().collect();
        Ok(union.into_iter().map(|d| d as usize).collect())
    }

    pub fn retrieve(&self, query_id: &str, query: TokenView<'_>) -> Result<RankedList> {
        let prepared = self.refiner.prepare(query)?;
        let candidates = self.gather(&prepared)?;
        self.refine_prepared(query_id, &prepared, &candidates)
    }

    /// Ranks the given candidate documents without searching the index, so
    /// one candidate set can be rescored under several strategies.
    pub fn refine(
        &self,
        query_id: &str,
        query: TokenView<'_>,
        candidates: &[usize],
    ) -> Result<RankedList> {
        if let Some(&d) = candidates.iter().find(|&&d| d >= self.refiner.store.len()) {
            return Err(Error::Config(format!(
                "candidate ordinal {d} is outside the store"
            )));
        }
        let prepared = self.refiner.prepare(query)?;
        self.refine_prepared(query_id, &prepared, candidates)
    }

    fn refine_prepared(
        &self,
        query_id: &str,
        prepared: &PreparedQuery<'_>,
        candidates: &[usize],
    ) -> Result<RankedList> {
        let full = self.refiner.config.full_store_refinement;
        let scored = candidates
            .par_iter()
            .map(|&d| {
                let stored: Vec<usize>;
                let tokens = if full {
                    None
                } else {
                    stored = self
                        .index
                        .doc_tokens(d)
                        .iter()
                        .map(|&t| t as usize)
                        .collect();
                    Some(stored.as_slice())
                };
                Ok((d, self.refiner.score(prepared, d, tokens)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.refiner.rank(query_id, scored))
    }
}

/// Searches `index` for `query` and refines the traced candidates.
pub fn retrieve(
    index: &TokenIndex,
    store: &EmbeddingStore,
    query_id: &str,
    query: TokenView<'_>,
    heads: Option<&SalienceHeads>,
    config: &RetrievalConfig,
) -> Result<RankedList> {
    Retriever::new(index, store, heads, config)?.retrieve(query_id, query)
}

/// Scores every document without an index, pruning documents at `beta_d`
/// exactly as index construction would.
pub fn brute_force_retrieve(
    store: &EmbeddingStore,
    query_id: &str,
    query: TokenView<'_>,
    heads: Option<&SalienceHeads>,
    config: &RetrievalConfig,
) -> Result<RankedList> {
    let refiner = Refiner::new(store, heads, config)?;
    let prepared = refiner.prepare(query)?;
    let beta_d = config.salience.beta_d;
    let doc_head = heads.map(|h| &h.document);
    let scored = (0..store.len())
        .into_par_iter()
        .map(|d| {
            let score = if config.full_store_refinement {
                refiner.score(&prepared, d, None)?
            } else {
                let kept = prune_tokens(store.get(d), doc_head, beta_d)?;
                refiner.score(&prepared, d, Some(&kept))?
            };
            Ok((d, score))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(refiner.rank(query_id, scored))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{align_topk, compute_similarity, score as eq_score};
    use crate::index::build_index;
    use crate::store::{DocumentRecord, TokenEmbeddings};

    fn emb(rows: &[Vec<f32>]) -> TokenEmbeddings {
        TokenEmbeddings::from_rows_normalized(rows, (0..rows.len() as u32).collect()).unwrap()
    }

    fn corpus() -> EmbeddingStore {
        EmbeddingStore::from_records(vec![
            DocumentRecord::new("a", emb(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]])),
            DocumentRecord::new("b", emb(&[vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]])),
        ])
        .unwrap()
    }

    #[test]
    fn ranked_list_ordering() {
        let list = RankedList::from_scores(
            "q",
            vec![("b".into(), 0.5), ("a".into(), 0.5), ("c".into(), 0.9)],
            2,
        );
        let ids: Vec<&str> = list.hits.iter().map(|h| h.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["c", "a"]);
        assert_eq!(list.rank_of("a"), Some(2));
    }

    #[test]
    fn singleton_corpus() {
        let store =
            EmbeddingStore::from_records(vec![DocumentRecord::new("d", emb(&[vec![0.0, 1.0]]))])
                .unwrap();
        let q = emb(&[vec![0.0, 1.0]]);
        let index = build_index(&store, None, 1.0, IndexKind::Flat, 0, 0).unwrap();
        let list = retrieve(
            &index,
            &store,
            "q",
            q.view(),
            None,
            &RetrievalConfig::default(),
        )
        .unwrap();
        assert_eq!(
            list.hits,
            vec![Hit {
                doc_id: "d".into(),
                score: 1.0
            }]
        );
    }

    #[test]
    fn brute_force_matches_hand_scores() {
        let store = corpus();
        let q = emb(&[vec![0.8, 0.6, 0.0], vec![0.0, 0.0, 1.0]]);
        let list =
            brute_force_retrieve(&store, "q", q.view(), None, &RetrievalConfig::default()).unwrap();
        // a: rows max 0.8 and 0.0 -> 0.4; b: 0.96 and 1.0 -> 0.98.
        assert_eq!(list.hits[0].doc_id, "b");
        assert!((list.hits[0].score - 0.98).abs() < 1e-6);
        assert!((list.hits[1].score - 0.4).abs() < 1e-6);
        for hit in &list.hits {
            let d = store.get_by_id(&hit.doc_id).unwrap();
            let s = compute_similarity(q.view(), d).unwrap();
            assert_eq!(eq_score(&s, &align_topk(&s, 1)).unwrap(), hit.score);
        }
    }

    #[test]
    fn exhaustive_index_equals_brute_force() {
        let store = corpus();
        let q = emb(&[vec![0.8, 0.6, 0.0]]);
        let index = build_index(&store, None, 1.0, IndexKind::Flat, 0, 0).unwrap();
        let config = RetrievalConfig {
            neighbors_per_token: index.len(),
            ..RetrievalConfig::default()
        };
        assert_eq!(
            retrieve(&index, &store, "q", q.view(), None, &config).unwrap(),
            brute_force_retrieve(&store, "q", q.view(), None, &config).unwrap()
        );
        // One neighbor reaches only document b.
        let narrow = RetrievalConfig {
            neighbors_per_token: 1,
            ..config
        };
        let list = retrieve(&index, &store, "q", q.view(), None, &narrow).unwrap();
        assert_eq!(list.len(), 1);
        assert_eq!(list.hits[0].doc_id, "b");
    }

    #[test]
    fn query_pruning_needs_salience() {
        let store = corpus();
        let q = emb(&[vec![0.8, 0.6, 0.0], vec![0.0, 0.0, 1.0]]);
        let config = RetrievalConfig {
            salience: SalienceConfig {
                beta_q: 0.5,
                ..SalienceConfig::default()
            },
            ..RetrievalConfig::default()
        };
        let err = brute_force_retrieve(&store, "q", q.view(), None, &config).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let index = build_index(&store, None, 1.0, IndexKind::Ivf, 2, 0).unwrap();
        let too_many = RetrievalConfig {
            nprobe: 3,
            ..RetrievalConfig::default()
        };
        assert!(Retriever::new(&index, &store, None, &too_many).is_err());
    }
}
