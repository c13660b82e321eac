//! Few-shot choice of the alignment strategy.
//!
//! Annotated queries are shuffled with a seed and cut into disjoint folds.
//! Each fold picks the grid strategy with the best nDCG@10 on its own queries
//! and is scored on every annotated query outside it. Token representations
//! and the index are never touched; only the refinement rule changes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::AlignmentStrategy;
use crate::error::{Error, Result};
use crate::eval::{mean, ndcg_at_k, Qrels};
use crate::retrieve::RankedList;

pub const DEFAULT_FOLD_SIZE: usize = 8;
pub const DEFAULT_GRID_K: [usize; 5] = [1, 2, 4, 6, 8];
pub const DEFAULT_GRID_P: [f64; 4] = [0.005, 0.01, 0.015, 0.02];

pub fn grid(ks: &[usize], ps: &[f64]) -> Vec<AlignmentStrategy> {
    ks.iter()
        .map(|&k| AlignmentStrategy::TopK { k })
        .chain(ps.iter().map(|&p| AlignmentStrategy::TopP { p }))
        .collect()
}

pub fn default_grid() -> Vec<AlignmentStrategy> {
    grid(&DEFAULT_GRID_K, &DEFAULT_GRID_P)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_queries: Vec<String>,
    pub heldout_queries: Vec<String>,
    pub chosen_strategy: AlignmentStrategy,
    pub train_ndcg10: f64,
    pub heldout_ndcg10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyScore {
    pub strategy: AlignmentStrategy,
    /// Mean nDCG@10 over every annotated query.
    pub ndcg10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub grid: Vec<AlignmentStrategy>,
    pub folds: Vec<FoldReport>,
    /// Mean of the per-fold held-out scores.
    pub mean: f64,
    /// Population standard deviation of the per-fold held-out scores.
    pub std: f64,
    /// Every grid strategy on the full annotated set, in grid order.
    pub exhaustive: Vec<StrategyScore>,
}

impl AdaptationReport {
    /// The exhaustive-grid winner (ties to the earlier grid entry).
    pub fn oracle(&self) -> &StrategyScore {
        first_argmax(self.exhaustive.iter().map(|s| s.ndcg10))
            .map(|i| &self.exhaustive[i])
            .expect("grid is non-empty")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per fold: `fold  strategy  train_ndcg10  heldout_ndcg10`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("fold\tstrategy\ttrain_ndcg10\theldout_ndcg10\n");
        for f in &self.folds {
            out += &format!(
                "{}\t{}\t{:.6}\t{:.6}\n",
                f.fold, f.chosen_strategy, f.train_ndcg10, f.heldout_ndcg10
            );
        }
        out
    }
}

fn first_argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mu = mean(values.iter().copied());
    (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Seeded shuffle of `query_ids` cut into `floor(n / fold_size)` disjoint folds.
/// Queries beyond the last full fold are only ever held out.
pub fn make_folds(query_ids: &[String], fold_size: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if fold_size == 0 {
        return Err(Error::Config("fold size must be at least 1".into()));
    }
    if query_ids.len() < fold_size {
        return Err(Error::InsufficientData(format!(
            "{} annotated queries, fold size {fold_size}",
            query_ids.len()
        )));
    }
    let mut order = query_ids.to_vec();
    order.sort();
    order.dedup();
    if order.len() != query_ids.len() {
        return Err(Error::Config("annotated query ids must be unique".into()));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks_exact(fold_size).map(|c| c.to_vec()).collect())
}

/// Runs the fold protocol. `retrieve_fn(query_id, strategy)` must rank the
/// collection for that query under that strategy.
pub fn adapt_alignment<F>(
    query_ids: &[String],
    qrels: &Qrels,
    grid: &[AlignmentStrategy],
    retrieve_fn: F,
    fold_size: usize,
    seed: u64,
) -> Result<AdaptationReport>
where
    F: Fn(&str, &AlignmentStrategy) -> Result<RankedList> + Sync,
{
    if grid.is_empty() {
        return Err(Error::Config("strategy grid is empty".into()));
    }
    for s in grid {
        s.validate()?;
    }
    let folds = make_folds(query_ids, fold_size, seed)?;

    // ndcg[q][g] for every annotated query and grid entry.
    let pairs: Vec<(usize, usize)> = (0..query_ids.len())
        .flat_map(|q| (0..grid.len()).map(move |g| (q, g)))
        .collect();
    let flat: Vec<f64> = pairs
        .par_iter()
        .map(|&(q, g)| {
            let qid = &query_ids[q];
            let mut ranked = retrieve_fn(qid, &grid[g])?;
            ranked.query_id.clone_from(qid);
            ndcg_at_k(&ranked, qrels, 10)
        })
        .collect::<Result<_>>()?;
    let ndcg = |q: usize, g: usize| flat[q * grid.len() + g];
    let position = |id: &str| {
        query_ids
            .iter()
            .position(|q| q == id)
            .expect("fold ids come from query_ids")
    };

    let mut reports = Vec::with_capacity(folds.len());
    for (f, fold) in folds.iter().enumerate() {
        let train: Vec<usize> = fold.iter().map(|id| position(id)).collect();
        let heldout: Vec<usize> = (0..query_ids.len())
            .filter(|q| !train.contains(q))
            .collect();
        let train_scores = (0..grid.len()).map(|g| mean(train.iter().map(|&q| ndcg(q, g))));
        let chosen = first_argmax(train_scores).expect("grid is non-empty");
        let report = FoldReport {
            fold: f,
            train_queries: fold.clone(),
            heldout_queries: heldout.iter().map(|&q| query_ids[q].clone()).collect(),
            chosen_strategy: grid[chosen],
            train_ndcg10: mean(train.iter().map(|&q| ndcg(q, chosen))),
            heldout_ndcg10: mean(heldout.iter().map(|&q| ndcg(q, chosen))),
        };
        log::info!(
            "fold {f}: chose {} (train {:.4}, held-out {:.4} on {} queries)",
            report.chosen_strategy,
            report.train_ndcg10,
            report.heldout_ndcg10,
            heldout.len()
        );
        reports.push(report);
    }

    let heldout: Vec<f64> = reports.iter().map(|r| r.heldout_ndcg10).collect();
    let exhaustive = grid
        .iter()
        .enumerate()
        .map(|(g, &strategy)| StrategyScore {
            strategy,
            ndcg10: mean((0..query_ids.len()).map(|q| ndcg(q, g))),
        })
        .collect();
    Ok(AdaptationReport {
        grid: grid.to_vec(),
        mean: mean(heldout.iter().copied()),
        std: population_std(&heldout),
        folds: reports,
        exhaustive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieve::Hit;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("q{i}")).collect()
    }

    fn qrels(n: usize) -> Qrels {
        let mut q = Qrels::new();
        for i in 0..n {
            q.insert(format!("q{i}"), "rel", 1);
        }
        q
    }

    /// Relevant doc at rank `1 + k` under `TopK { k }`.
    fn fake(qid: &str, s: &AlignmentStrategy) -> Result<RankedList> {
        let depth = match s {
            AlignmentStrategy::TopK { k } => *k,
            _ => 3,
        };
        let mut hits: Vec<Hit> = (0..depth)
            .map(|i| Hit {
                doc_id: format!("x{i}"),
                score: 10.0 - i as f64,
            })
            .collect();
        hits.push(Hit {
            doc_id: "rel".into(),
            score: 0.0,
        });
        Ok(RankedList {
            query_id: qid.into(),
            hits,
        })
    }

    #[test]
    fn folds_are_disjoint_and_seeded() {
        let folds = make_folds(&ids(20), 8, 1).unwrap();
        assert_eq!(folds.len(), 2);
        assert!(folds[0].iter().all(|q| !folds[1].contains(q)));
        assert_eq!(folds, make_folds(&ids(20), 8, 1).unwrap());
        assert!(matches!(
            make_folds(&ids(5), 8, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn picks_best_and_breaks_ties_forward() {
        let grid = vec![
            AlignmentStrategy::TopK { k: 2 },
            AlignmentStrategy::TopK { k: 1 },
        ];
        let report = adapt_alignment(&ids(16), &qrels(16), &grid, fake, 8, 0).unwrap();
        assert!(report.folds.iter().all(|f| f.chosen_strategy == grid[1]));
        assert!((report.mean - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(report.std, 0.0);
        for f in &report.folds {
            assert_eq!(f.heldout_queries.len(), 8);
            assert!(f
                .heldout_queries
                .iter()
                .all(|q| !f.train_queries.contains(q)));
        }

        let tied = vec![
            AlignmentStrategy::TopP { p: 0.5 },
            AlignmentStrategy::TopK { k: 3 },
        ];
        let report = adapt_alignment(&ids(8), &qrels(8), &tied, fake, 8, 0).unwrap();
        assert_eq!(report.folds[0].chosen_strategy, tied[0]);
        assert!(report.folds[0].heldout_queries.is_empty());
        assert_eq!(report.oracle().strategy, tied[0]);
    }

    #[test]
    fn std_is_population() {
        assert_eq!(population_std(&[1.0, 3.0]), 1.0);
        assert_eq!(population_std(&[]), 0.0);
        assert_eq!(default_grid().len(), 9);
    }
}
