//! Seeded synthetic corpora standing in for encoder output.
//!
//! [`synth_corpus`] plants, for every query, a relevant document holding
//! near-copies of the query's content tokens among background tokens.
//! Background tokens are drawn around a small set of shared prototypes that
//! all lean toward one common direction, like frequent function words: they
//! match every document about equally well and carry no relevance signal.
//!
//! [`synth_distributed`] builds a task whose evidence is spread over a fixed
//! fraction of each long relevant document, with distractor documents that
//! hold fewer but sharper matches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::store::{DocumentRecord, QueryRecord, TokenEmbeddings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub num_queries: usize,
    /// Tokens per query, content and background together.
    pub query_tokens: usize,
    /// Content tokens per query; each has one evidence copy in the planted doc.
    pub evidence_tokens: usize,
    /// Norm of the random perturbation added to each evidence copy.
    pub noise: f64,
    pub background_prototypes: usize,
    pub background_jitter: f64,
    /// Weight of the shared direction in every background token.
    pub background_bias: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            num_queries: 50,
            query_tokens: 8,
            evidence_tokens: 4,
            noise: 0.1,
            background_prototypes: 16,
            background_jitter: 1.0,
            background_bias: 1.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub docs: Vec<DocumentRecord>,
    pub queries: Vec<QueryRecord>,
    pub qrels: Qrels,
    /// Per document, which tokens are planted evidence.
    pub evidence_mask: Vec<Vec<bool>>,
    /// Per query, which tokens are content (as opposed to background).
    pub content_mask: Vec<Vec<bool>>,
}

pub fn doc_id(i: usize) -> String {
    format!("d{i:06}")
}

pub fn query_id(i: usize) -> String {
    format!("q{i:04}")
}

pub(crate) fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Unit vector with inner product exactly `c` with unit `q` (up to rounding).
fn at_similarity(rng: &mut impl Rng, q: &[f64], c: f64) -> Vec<f64> {
    let r = random_unit(rng, q.len());
    let proj: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
    let perp = normalized(
        &r.iter()
            .zip(q)
            .map(|(a, b)| a - proj * b)
            .collect::<Vec<_>>(),
    );
    let s = (1.0 - c * c).max(0.0).sqrt();
    q.iter().zip(&perp).map(|(a, b)| c * a + s * b).collect()
}

/// Planted rows of one document with their vocabulary ids.
type Planted = Vec<(Vec<f64>, u32)>;

fn embeddings(rows: Vec<Vec<f32>>, ids: Vec<u32>) -> TokenEmbeddings {
    TokenEmbeddings::from_rows_normalized(&rows, ids).expect("generated rows are well formed")
}

struct Background {
    shared: Vec<f64>,
    prototypes: Vec<Vec<f64>>,
    jitter: f64,
    bias: f64,
}

impl Background {
    fn new(rng: &mut impl Rng, dim: usize, spec: &PlantSpec) -> Self {
        let shared = random_unit(rng, dim);
        let prototypes = (0..spec.background_prototypes)
            .map(|_| random_unit(rng, dim))
            .collect();
        Self {
            shared,
            prototypes,
            jitter: spec.background_jitter,
            bias: spec.background_bias,
        }
    }

    /// A background token and its vocabulary id (the prototype index).
    fn token(&self, rng: &mut impl Rng) -> (Vec<f32>, u32) {
        let p = rng.random_range(0..self.prototypes.len());
        let g = random_unit(rng, self.shared.len());
        let v: Vec<f64> = (0..self.shared.len())
            .map(|j| self.bias * self.shared[j] + self.prototypes[p][j] + self.jitter * g[j])
            .collect();
        (to_f32(&normalized(&v)), p as u32)
    }
}

fn check_sizes(pairs: &[(&str, usize)]) -> Result<()> {
    for (name, v) in pairs {
        if *v == 0 {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
    }
    Ok(())
}

/// Planted-evidence corpus. Query `i` is relevant to exactly one document,
/// chosen by a seeded permutation, so `num_queries ≤ num_docs`.
pub fn synth_corpus(
    seed: u64,
    num_docs: usize,
    tokens_per_doc: usize,
    dim: usize,
    spec: &PlantSpec,
) -> Result<SynthCorpus> {
    check_sizes(&[
        ("num_docs", num_docs),
        ("tokens_per_doc", tokens_per_doc),
        ("dim", dim),
        ("num_queries", spec.num_queries),
        ("query_tokens", spec.query_tokens),
        ("evidence_tokens", spec.evidence_tokens),
        ("background_prototypes", spec.background_prototypes),
    ])?;
    if spec.num_queries > num_docs {
        return Err(Error::Config(format!(
            "{} queries need as many documents, got {num_docs}",
            spec.num_queries
        )));
    }
    if spec.evidence_tokens > spec.query_tokens || spec.evidence_tokens > tokens_per_doc {
        return Err(Error::Config(
            "evidence_tokens must not exceed query_tokens or tokens_per_doc".into(),
        ));
    }
    if !(spec.noise >= 0.0) || !(spec.background_jitter >= 0.0) || !spec.background_bias.is_finite()
    {
        return Err(Error::Config(
            "noise, jitter and bias must be finite and non-negative".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Background::new(&mut rng, dim, spec);
    let mut next_id = spec.background_prototypes as u32;

    let mut planted_doc: Vec<usize> = (0..num_docs).collect();
    planted_doc.shuffle(&mut rng);
    planted_doc.truncate(spec.num_queries);

    let mut queries = Vec::with_capacity(spec.num_queries);
    let mut content_mask = Vec::with_capacity(spec.num_queries);
    let mut evidence: Vec<Option<Planted>> = vec![None; num_docs];
    let mut qrels = Qrels::new();
    for (qi, &d) in planted_doc.iter().enumerate() {
        let mut positions: Vec<usize> = (0..spec.query_tokens).collect();
        positions.shuffle(&mut rng);
        let mut is_content = vec![false; spec.query_tokens];
        for &p in &positions[..spec.evidence_tokens] {
            is_content[p] = true;
        }
        let mut rows = Vec::with_capacity(spec.query_tokens);
        let mut ids = Vec::with_capacity(spec.query_tokens);
        let mut planted = Vec::with_capacity(spec.evidence_tokens);
        for &content in &is_content {
            if content {
                let q = random_unit(&mut rng, dim);
                rows.push(to_f32(&q));
                ids.push(next_id);
                planted.push((q, next_id));
                next_id += 1;
            } else {
                let (v, id) = background.token(&mut rng);
                rows.push(v);
                ids.push(id);
            }
        }
        queries.push(QueryRecord::new(query_id(qi), embeddings(rows, ids)));
        content_mask.push(is_content);
        evidence[d] = Some(planted);
        qrels.insert(query_id(qi), doc_id(d), 1);
    }

    let mut docs = Vec::with_capacity(num_docs);
    let mut evidence_mask = Vec::with_capacity(num_docs);
    for (d, planted) in evidence.into_iter().enumerate() {
        let mut mask = vec![false; tokens_per_doc];
        let mut slots: Vec<Option<(Vec<f32>, u32)>> = vec![None; tokens_per_doc];
        if let Some(planted) = planted {
            let mut positions: Vec<usize> = (0..tokens_per_doc).collect();
            positions.shuffle(&mut rng);
            for ((q, id), &p) in planted.into_iter().zip(&positions) {
                let v = if spec.noise == 0.0 {
                    q
                } else {
                    let r = random_unit(&mut rng, dim);
                    normalized(
                        &q.iter()
                            .zip(&r)
                            .map(|(a, b)| a + spec.noise * b)
                            .collect::<Vec<_>>(),
                    )
                };
                slots[p] = Some((to_f32(&v), id));
                mask[p] = true;
            }
        }
        let (rows, ids): (Vec<_>, Vec<_>) = slots
            .into_iter()
            .map(|slot| slot.unwrap_or_else(|| background.token(&mut rng)))
            .unzip();
        docs.push(DocumentRecord::new(doc_id(d), embeddings(rows, ids)));
        evidence_mask.push(mask);
    }

    Ok(SynthCorpus {
        docs,
        queries,
        qrels,
        evidence_mask,
        content_mask,
    })
}

/// A family of look-alike documents planted for every query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    /// Documents of this kind per query.
    pub per_query: usize,
    /// Sharp matches per query token.
    pub copies: usize,
    pub similarity: f64,
}

/// Layout of the distributed-evidence task.
///
/// Relevant documents vary in length and hold evidence in proportion to it.
/// Distractors are maximal-length documents with a fixed number of sharper
/// matches, so any fixed `k` is beaten by one of them while a rule that
/// scales `k` with length is not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributedSpec {
    pub num_queries: usize,
    pub query_tokens: usize,
    pub dim: usize,
    pub min_doc_tokens: usize,
    pub max_doc_tokens: usize,
    /// Each relevant document holds `max(floor(ratio·m), 1)` matches per query token.
    pub evidence_ratio: f64,
    pub evidence_similarity: f64,
    pub distractors: Vec<Distractor>,
    /// Documents with background tokens only.
    pub filler_docs: usize,
}

impl Default for DistributedSpec {
    fn default() -> Self {
        let d = |per_query, copies, similarity| Distractor {
            per_query,
            copies,
            similarity,
        };
        Self {
            num_queries: 48,
            query_tokens: 4,
            dim: 64,
            min_doc_tokens: 200,
            max_doc_tokens: 400,
            evidence_ratio: 0.015,
            evidence_similarity: 0.8,
            distractors: vec![d(2, 1, 0.95), d(2, 2, 0.85), d(2, 5, 0.85)],
            filler_docs: 100,
        }
    }
}

/// Distributed-evidence corpus; `evidence_mask` marks every planted match,
/// in relevant and distractor documents alike.
pub fn synth_distributed(seed: u64, spec: &DistributedSpec) -> Result<SynthCorpus> {
    check_sizes(&[
        ("num_queries", spec.num_queries),
        ("query_tokens", spec.query_tokens),
        ("dim", spec.dim),
        ("min_doc_tokens", spec.min_doc_tokens),
    ])?;
    if spec.max_doc_tokens < spec.min_doc_tokens {
        return Err(Error::Config(
            "max_doc_tokens must be at least min_doc_tokens".into(),
        ));
    }
    let per_doc_matches = (spec.max_doc_tokens as f64 * spec.evidence_ratio).floor() as usize;
    let most_copies = spec.distractors.iter().map(|d| d.copies).max().unwrap_or(0);
    if spec.query_tokens * per_doc_matches.max(1) > spec.min_doc_tokens
        || spec.query_tokens * most_copies > spec.max_doc_tokens
    {
        return Err(Error::Config(
            "documents are too short for the planted matches".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Plan {
        query: Option<usize>,
        relevant: bool,
        copies: usize,
        similarity: f64,
    }
    let mut plans = Vec::new();
    for q in 0..spec.num_queries {
        plans.push(Plan {
            query: Some(q),
            relevant: true,
            copies: 0,
            similarity: spec.evidence_similarity,
        });
        for d in &spec.distractors {
            for _ in 0..d.per_query {
                plans.push(Plan {
                    query: Some(q),
                    relevant: false,
                    copies: d.copies,
                    similarity: d.similarity,
                });
            }
        }
    }
    plans.extend((0..spec.filler_docs).map(|_| Plan {
        query: None,
        relevant: false,
        copies: 0,
        similarity: 0.0,
    }));
    plans.shuffle(&mut rng);

    let query_vectors: Vec<Vec<Vec<f64>>> = (0..spec.num_queries)
        .map(|_| {
            (0..spec.query_tokens)
                .map(|_| random_unit(&mut rng, spec.dim))
                .collect()
        })
        .collect();
    let content_id = |q: usize, t: usize| 1 + (q * spec.query_tokens + t) as u32;
    let queries = query_vectors
        .iter()
        .enumerate()
        .map(|(q, rows)| {
            let ids = (0..rows.len()).map(|t| content_id(q, t)).collect();
            QueryRecord::new(
                query_id(q),
                embeddings(rows.iter().map(|r| to_f32(r)).collect(), ids),
            )
        })
        .collect();
    let content_mask = vec![vec![true; spec.query_tokens]; spec.num_queries];

    let mut docs = Vec::with_capacity(plans.len());
    let mut evidence_mask = Vec::with_capacity(plans.len());
    let mut qrels = Qrels::new();
    for (d, plan) in plans.iter().enumerate() {
        let m = if plan.query.is_some() && !plan.relevant {
            spec.max_doc_tokens
        } else {
            rng.random_range(spec.min_doc_tokens..=spec.max_doc_tokens)
        };
        let mut slots: Vec<Option<(Vec<f32>, u32)>> = vec![None; m];
        let mut mask = vec![false; m];
        if let Some(q) = plan.query {
            let copies = if plan.relevant {
                crate::floor_budget(spec.evidence_ratio, m)
            } else {
                plan.copies
            };
            let mut positions: Vec<usize> = (0..m).collect();
            positions.shuffle(&mut rng);
            let mut free = positions.into_iter();
            for (t, qv) in query_vectors[q].iter().enumerate() {
                for _ in 0..copies {
                    let p = free.next().expect("length checked above");
                    slots[p] = Some((
                        to_f32(&at_similarity(&mut rng, qv, plan.similarity)),
                        content_id(q, t),
                    ));
                    mask[p] = true;
                }
            }
            if plan.relevant {
                qrels.insert(query_id(q), doc_id(d), 1);
            }
        }
        let (rows, ids): (Vec<_>, Vec<_>) = slots
            .into_iter()
            .map(|slot| slot.unwrap_or_else(|| (to_f32(&random_unit(&mut rng, spec.dim)), 0)))
            .unzip();
        docs.push(DocumentRecord::new(doc_id(d), embeddings(rows, ids)));
        evidence_mask.push(mask);
    }

    Ok(SynthCorpus {
        docs,
        queries,
        qrels,
        evidence_mask,
        content_mask,
    })
}
