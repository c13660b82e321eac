//! Relevance judgments, TREC run files and ranking metrics.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieve::{Hit, RankedList};

/// Graded relevance per query and document.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        query_id: impl Into<String>,
        doc_id: impl Into<String>,
        relevance: u32,
    ) {
        self.judgments
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), relevance);
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn relevance(&self, query_id: &str, doc_id: &str) -> u32 {
        self.get(query_id)
            .and_then(|docs| docs.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    /// Query ids in sorted order.
    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    /// Queries with at least one positive judgment.
    pub fn evaluable_query_ids(&self) -> Vec<String> {
        self.judgments
            .iter()
            .filter(|(_, docs)| docs.values().any(|&r| r > 0))
            .map(|(q, _)| q.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// Restricts to the given queries.
    pub fn subset<'a>(&self, query_ids: impl IntoIterator<Item = &'a str>) -> Qrels {
        let mut out = Qrels::new();
        for q in query_ids {
            if let Some(docs) = self.judgments.get(q) {
                out.judgments.insert(q.to_string(), docs.clone());
            }
        }
        out
    }

    /// Parses `qid 0 doc_id relevance` lines (tabs or spaces). Blank lines
    /// and `#` comments are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut qrels = Qrels::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |reason: String| Error::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                reason,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(parse_err(format!(
                    "expected 4 fields, found {}",
                    fields.len()
                )));
            }
            let rel: i64 = fields[3]
                .parse()
                .map_err(|_| parse_err(format!("relevance {:?} is not an integer", fields[3])))?;
            let rel = u32::try_from(rel)
                .map_err(|_| parse_err(format!("relevance {rel} must be >= 0")))?;
            qrels.insert(fields[0], fields[2], rel);
        }
        Ok(qrels)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// One `qid 0 doc_id rel` line per judgment, sorted by query then doc.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.judgments {
            for (d, rel) in docs {
                writeln!(out, "{q} 0 {d} {rel}").unwrap();
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_trec()).map_err(|e| Error::io(path, e))
    }
}

/// `qid Q0 doc_id rank score run_tag`, ranks starting at 1.
pub fn format_run<'a>(lists: impl IntoIterator<Item = &'a RankedList>, run_tag: &str) -> String {
    let mut out = String::new();
    for list in lists {
        for (rank, hit) in list.hits.iter().enumerate() {
            writeln!(
                out,
                "{} Q0 {} {} {:.6} {}",
                list.query_id,
                hit.doc_id,
                rank + 1,
                hit.score,
                run_tag
            )
            .unwrap();
        }
    }
    out
}

/// Parses a TREC run; hits are ordered by the rank column. Queries come out
/// sorted by id.
pub fn parse_run(text: &str, origin: &Path) -> Result<Vec<RankedList>> {
    let mut by_query: BTreeMap<String, Vec<(u64, Hit)>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(parse_err(format!(
                "expected 6 fields, found {}",
                fields.len()
            )));
        }
        let rank: u64 = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("rank {:?} is not an integer", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| parse_err(format!("score {:?} is not a finite number", fields[4])))?;
        by_query.entry(fields[0].to_string()).or_default().push((
            rank,
            Hit {
                doc_id: fields[2].to_string(),
                score,
            },
        ));
    }
    let mut lists = Vec::with_capacity(by_query.len());
    for (query_id, mut hits) in by_query {
        hits.sort_by_key(|(rank, _)| *rank);
        let mut seen = std::collections::HashSet::new();
        for (_, hit) in &hits {
            if !seen.insert(hit.doc_id.as_str()) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: 0,
                    reason: format!(
                        "document {:?} ranked twice for query {query_id:?}",
                        hit.doc_id
                    ),
                });
            }
        }
        lists.push(RankedList {
            query_id,
            hits: hits.into_iter().map(|(_, h)| h).collect(),
        });
    }
    Ok(lists)
}

pub fn read_run(path: impl AsRef<Path>) -> Result<Vec<RankedList>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run(&text, path)
}

fn judged<'a>(ranked: &RankedList, qrels: &'a Qrels) -> Result<&'a BTreeMap<String, u32>> {
    qrels
        .get(&ranked.query_id)
        .ok_or_else(|| Error::MissingQrels(ranked.query_id.clone()))
}

/// Linear-gain nDCG: `Σ rel_i / log2(i + 1)` over the top `k`, divided by the
/// same sum for the relevance-sorted judgments. 0 when nothing is relevant.
pub fn ndcg_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> Result<f64> {
    let docs = judged(ranked, qrels)?;
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .hits
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, h)| f64::from(docs.get(&h.doc_id).copied().unwrap_or(0)) * discount(i))
        .sum();
    let mut ideal: Vec<u32> = docs.values().copied().filter(|&r| r > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| f64::from(r) * discount(i))
        .sum();
    Ok(if idcg > 0.0 { dcg / idcg } else { 0.0 })
}

/// Reciprocal rank of the first relevant document within the top `k`.
pub fn mrr_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> Result<f64> {
    let docs = judged(ranked, qrels)?;
    Ok(ranked
        .hits
        .iter()
        .take(k)
        .position(|h| docs.get(&h.doc_id).is_some_and(|&r| r > 0))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64))
}

/// Fraction of relevant documents found in the top `k`.
pub fn recall_at_k(ranked: &RankedList, qrels: &Qrels, k: usize) -> Result<f64> {
    let docs = judged(ranked, qrels)?;
    let relevant = docs.values().filter(|&&r| r > 0).count();
    if relevant == 0 {
        return Ok(0.0);
    }
    let found = ranked
        .hits
        .iter()
        .take(k)
        .filter(|h| docs.get(&h.doc_id).is_some_and(|&r| r > 0))
        .count();
    Ok(found as f64 / relevant as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Ndcg(usize),
    Mrr(usize),
    Recall(usize),
}

impl Metric {
    pub fn compute(&self, ranked: &RankedList, qrels: &Qrels) -> Result<f64> {
        match *self {
            Metric::Ndcg(k) => ndcg_at_k(ranked, qrels, k),
            Metric::Mrr(k) => mrr_at_k(ranked, qrels, k),
            Metric::Recall(k) => recall_at_k(ranked, qrels, k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown metric {s:?} (expected ndcg@K, mrr@K or recall@K)"
            ))
        };
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().ok().filter(|&k| k > 0).ok_or_else(bad)?;
        match name.to_ascii_lowercase().as_str() {
            "ndcg" => Ok(Metric::Ndcg(k)),
            "mrr" => Ok(Metric::Mrr(k)),
            "recall" => Ok(Metric::Recall(k)),
            _ => Err(bad()),
        }
    }
}

/// Per-query scores over every query of `qrels` that has a positive
/// judgment. Queries missing from `runs` score as an empty ranking; runs for
/// unjudged queries are ignored.
pub fn evaluate_run(
    runs: &[RankedList],
    qrels: &Qrels,
    metric: Metric,
) -> Result<BTreeMap<String, f64>> {
    let by_id: BTreeMap<&str, &RankedList> =
        runs.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let mut out = BTreeMap::new();
    for q in qrels.evaluable_query_ids() {
        let value = match by_id.get(q.as_str()) {
            Some(list) => metric.compute(list, qrels)?,
            None => metric.compute(&RankedList::empty(&q), qrels)?,
        };
        out.insert(q, value);
    }
    Ok(out)
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
