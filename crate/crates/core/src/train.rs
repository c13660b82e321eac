//! Gradient training of the salience heads over frozen token embeddings.
//!
//! The loss is a softmax cross-entropy over `sim(Q, D) / τ` for one
//! positive and a fixed set of negatives per query, where `sim` is the
//! salience-factorized score with gated salience on both sides. Gradients
//! reach the head parameters through the factorized score, the sparsity
//! gate (via the solver's VJP) and the ReLU.

use std::collections::BTreeMap;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align, compute_similarity, AlignmentStrategy};
use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::salience::{check_ratio, gated_salience_with, SalienceHead, SalienceHeads};
use crate::solver::{vjp_from_result, SolverConfig, SolverResult, DEFAULT_EPSILON};
use crate::store::{EmbeddingStore, QueryRecord, TokenView};

/// Largest tolerated `|Σλ − k|` for a gate inside the loss.
pub const GATE_BUDGET_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_queries: usize,
    pub negatives_per_query: usize,
    pub epsilon: f64,
    pub alpha_q: f64,
    pub alpha_d: f64,
    /// Dual sweeps allowed per gate solve; gradients are taken at the result.
    pub unroll_iters: usize,
    pub seed: u64,
    pub temperature: f64,
    pub strategy: AlignmentStrategy,
    /// Standard deviation of the initial head weights; biases start at 1.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            steps: 500,
            batch_queries: 16,
            negatives_per_query: 7,
            epsilon: DEFAULT_EPSILON,
            alpha_q: 0.5,
            alpha_d: 0.4,
            unroll_iters: 8,
            seed: 0,
            temperature: 0.05,
            strategy: AlignmentStrategy::COLBERT,
            init_scale: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("temperature", self.temperature)?;
        check_ratio("alpha_q", self.alpha_q)?;
        check_ratio("alpha_d", self.alpha_d)?;
        if self.batch_queries == 0 || self.negatives_per_query == 0 || self.unroll_iters == 0 {
            return Err(Error::Config(
                "batch_queries, negatives_per_query and unroll_iters must be at least 1".into(),
            ));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be non-negative".into()));
        }
        self.strategy.validate()?;
        self.solver().validate()
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            max_iters: self.unroll_iters,
            ..SolverConfig::with_epsilon(self.epsilon)
        }
    }
}

/// `−log softmax(sims / τ)[0]`, with the positive at index 0.
pub fn loss_from_sims(sims: &[f64], temperature: f64) -> f64 {
    let logits: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[0]
}

/// Gradient of one head: `∂L/∂w` and `∂L/∂b`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl HeadGradient {
    fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    fn add(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        self.bias += scale * other.bias;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadsGradient {
    pub query: HeadGradient,
    pub document: HeadGradient,
}

impl HeadsGradient {
    fn zeros(dim: usize) -> Self {
        Self {
            query: HeadGradient::zeros(dim),
            document: HeadGradient::zeros(dim),
        }
    }

    fn add(&mut self, other: &Self, scale: f64) {
        self.query.add(&other.query, scale);
        self.document.add(&other.document, scale);
    }
}

/// Nonzero entries `(i, j, S_ij, Ã_ij)` of a query-document alignment.
type Alignment = Vec<(u32, u32, f64, f64)>;

fn pairwise(
    query: TokenView<'_>,
    doc: TokenView<'_>,
    strategy: &AlignmentStrategy,
) -> Result<Alignment> {
    let s = compute_similarity(query, doc)?;
    let a = align(&s, strategy, query.token_ids(), doc.token_ids())?;
    let mut entries = Vec::new();
    for i in 0..s.n() {
        for j in 0..s.m() {
            let w = a.get(i, j);
            if w != 0.0 {
                entries.push((i as u32, j as u32, s.get(i, j), w));
            }
        }
    }
    Ok(entries)
}

/// Forward state of one side: pre-activation, raw and gated salience, gate.
struct Gated {
    pre: Vec<f64>,
    raw: Vec<f64>,
    u: Vec<f64>,
    gate: SolverResult,
    k: usize,
}

fn gate(
    tokens: TokenView<'_>,
    head: &SalienceHead,
    alpha: f64,
    solver: &SolverConfig,
) -> Result<Gated> {
    let pre = head.affine(tokens)?;
    let raw: Vec<f64> = pre.iter().map(|z| z.max(0.0)).collect();
    let (u, gate) = gated_salience_with(&raw, alpha, solver)?;
    let k = crate::ceil_budget(alpha, raw.len());
    let mass: f64 = gate.lambda.iter().sum();
    if (mass - k as f64).abs() > GATE_BUDGET_TOLERANCE {
        return Err(Error::Convergence {
            iterations: gate.iterations_used,
            residual: (mass - k as f64).abs(),
        });
    }
    Ok(Gated {
        pre,
        raw,
        u,
        gate,
        k,
    })
}

/// Back-propagates `∂L/∂u` to the head parameters of one side.
fn backward(
    tokens: TokenView<'_>,
    g: &Gated,
    grad_u: &[f64],
    solver: &SolverConfig,
) -> Result<HeadGradient> {
    let through_gate: Vec<f64> = grad_u.iter().zip(&g.raw).map(|(gu, s)| gu * s).collect();
    let vjp = vjp_from_result(&g.raw, g.k, solver, &g.gate, &through_gate)?;
    let mut out = HeadGradient::zeros(tokens.dim());
    for (i, x) in tokens.rows().enumerate() {
        if g.pre[i] <= 0.0 {
            continue;
        }
        let gr = grad_u[i] * g.gate.lambda[i] + vjp[i];
        out.bias += gr;
        for (w, &xv) in out.weights.iter_mut().zip(x) {
            *w += gr * f64::from(xv);
        }
    }
    Ok(out)
}

/// A query with its positive (index 0) and negatives, alignments precomputed.
struct Example<'a> {
    query: TokenView<'a>,
    docs: Vec<TokenView<'a>>,
    alignments: Vec<Alignment>,
}

impl<'a> Example<'a> {
    fn new(
        query: TokenView<'a>,
        docs: Vec<TokenView<'a>>,
        strategy: &AlignmentStrategy,
    ) -> Result<Self> {
        let alignments = docs
            .iter()
            .map(|&d| pairwise(query, d, strategy))
            .collect::<Result<_>>()?;
        Ok(Self {
            query,
            docs,
            alignments,
        })
    }

    fn loss_and_gradient(
        &self,
        heads: &SalienceHeads,
        config: &TrainConfig,
        want_gradient: bool,
    ) -> Result<(f64, Option<HeadsGradient>)> {
        let solver = config.solver();
        let q = gate(self.query, &heads.query, config.alpha_q, &solver)?;
        let ds: Vec<Gated> = self
            .docs
            .iter()
            .map(|&d| gate(d, &heads.document, config.alpha_d, &solver))
            .collect::<Result<_>>()?;

        // (sim, Z) per document.
        let sims: Vec<(f64, f64)> = self
            .alignments
            .iter()
            .zip(&ds)
            .map(|(entries, d)| {
                let (mut num, mut z) = (0.0, 0.0);
                for &(i, j, s, a) in entries {
                    let w = a * q.u[i as usize] * d.u[j as usize];
                    num += s * w;
                    z += w;
                }
                (if z > 0.0 { num / z } else { 0.0 }, z)
            })
            .collect();
        let plain: Vec<f64> = sims.iter().map(|s| s.0).collect();
        let loss = loss_from_sims(&plain, config.temperature);
        if !want_gradient {
            return Ok((loss, None));
        }

        let logits: Vec<f64> = plain.iter().map(|s| s / config.temperature).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();

        let mut grad = HeadsGradient::zeros(self.query.dim());
        let mut grad_uq = vec![0.0; self.query.len()];
        for (c, ((entries, d), &(sim, z))) in self.alignments.iter().zip(&ds).zip(&sims).enumerate()
        {
            if z <= 0.0 {
                continue;
            }
            let target = if c == 0 { 1.0 } else { 0.0 };
            let coef = (exp[c] / total - target) / config.temperature;
            let mut grad_ud = vec![0.0; d.u.len()];
            for &(i, j, s, a) in entries {
                let (i, j) = (i as usize, j as usize);
                let common = coef * a * (s - sim) / z;
                grad_uq[i] += common * d.u[j];
                grad_ud[j] += common * q.u[i];
            }
            grad.document
                .add(&backward(self.docs[c], d, &grad_ud, &solver)?, 1.0);
        }
        grad.query = backward(self.query, &q, &grad_uq, &solver)?;
        Ok((loss, Some(grad)))
    }
}

/// Contrastive loss of one query against its positive and negatives.
pub fn contrastive_loss(
    query: TokenView<'_>,
    positive: TokenView<'_>,
    negatives: &[TokenView<'_>],
    heads: &SalienceHeads,
    config: &TrainConfig,
) -> Result<f64> {
    loss_and_gradient(query, positive, negatives, heads, config).map(|(l, _)| l)
}

/// [`contrastive_loss`] together with its gradient for both heads.
pub fn loss_and_gradient(
    query: TokenView<'_>,
    positive: TokenView<'_>,
    negatives: &[TokenView<'_>],
    heads: &SalienceHeads,
    config: &TrainConfig,
) -> Result<(f64, HeadsGradient)> {
    if negatives.is_empty() {
        return Err(Error::Config(
            "contrastive loss needs at least one negative".into(),
        ));
    }
    heads.validate()?;
    let docs = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .collect();
    let example = Example::new(query, docs, &config.strategy)?;
    let (loss, grad) = example.loss_and_gradient(heads, config, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Seeded initial heads: small Gaussian weights, unit bias.
pub fn initial_heads(dim: usize, config: &TrainConfig) -> SalienceHeads {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut heads = SalienceHeads::constant(dim, 1.0);
    if config.init_scale > 0.0 {
        let normal = Normal::new(0.0, config.init_scale).expect("finite scale");
        for w in heads
            .query
            .weights
            .iter_mut()
            .chain(heads.document.weights.iter_mut())
        {
            *w = normal.sample(&mut rng);
        }
    }
    heads
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub heads: SalienceHeads,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (step, loss) in self.losses.iter().enumerate() {
            out += &format!("{step},{loss:.9}\n");
        }
        out
    }
}

/// Annotated queries with seeded fixed negatives, ready for training.
pub struct TrainingSet<'a> {
    examples: Vec<Example<'a>>,
    query_ids: Vec<String>,
    dim: usize,
}

impl<'a> TrainingSet<'a> {
    /// The positive of each query is its most relevant judged document
    /// (ties to the smaller doc id); negatives are sampled once from the
    /// documents not judged relevant.
    pub fn new(
        store: &'a EmbeddingStore,
        queries: &'a [QueryRecord],
        qrels: &Qrels,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
        let mut examples = Vec::new();
        let mut query_ids = Vec::new();
        for query in queries {
            let Some(judged) = qrels.get(&query.doc_id) else {
                continue;
            };
            let positive = judged
                .iter()
                .filter(|(id, &rel)| rel > 0 && store.position(id).is_some())
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(id, _)| store.position(id).expect("filtered"));
            let Some(positive) = positive else { continue };
            let pool: Vec<usize> = (0..store.len())
                .filter(|&d| judged.get(store.doc_id(d)).copied().unwrap_or(0) == 0)
                .collect();
            if pool.len() < config.negatives_per_query {
                return Err(Error::InsufficientData(format!(
                    "query {:?} has {} candidate negatives, {} requested",
                    query.doc_id,
                    pool.len(),
                    config.negatives_per_query
                )));
            }
            let mut docs = vec![store.get(positive)];
            let mut picked: Vec<usize> =
                sample(&mut rng, pool.len(), config.negatives_per_query).into_vec();
            picked.sort_unstable();
            docs.extend(picked.into_iter().map(|i| store.get(pool[i])));
            examples.push(Example::new(
                query.embeddings.view(),
                docs,
                &config.strategy,
            )?);
            query_ids.push(query.doc_id.clone());
        }
        if examples.is_empty() {
            return Err(Error::InsufficientData(
                "no query has a judged relevant document in the store".into(),
            ));
        }
        Ok(Self {
            examples,
            query_ids,
            dim: store.dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn query_ids(&self) -> &[String] {
        &self.query_ids
    }

    /// Mean loss and gradient over the examples at `batch`.
    pub fn batch_loss(
        &self,
        batch: &[usize],
        heads: &SalienceHeads,
        config: &TrainConfig,
        want_gradient: bool,
    ) -> Result<(f64, Option<HeadsGradient>)> {
        let parts = batch
            .par_iter()
            .map(|&e| self.examples[e].loss_and_gradient(heads, config, want_gradient))
            .collect::<Result<Vec<_>>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = want_gradient.then(|| HeadsGradient::zeros(self.dim));
        for (l, g) in parts {
            loss += scale * l;
            if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
                acc.add(&g, scale);
            }
        }
        Ok((loss, grad))
    }
}

fn apply(heads: &mut SalienceHeads, grad: &HeadsGradient, lr: f64) {
    for (head, g) in [
        (&mut heads.query, &grad.query),
        (&mut heads.document, &grad.document),
    ] {
        for (w, gw) in head.weights.iter_mut().zip(&g.weights) {
            *w -= lr * gw;
        }
        head.bias -= lr * g.bias;
    }
}

/// Plain gradient descent from `initial_heads`. Batches walk a seeded
/// shuffle of the training queries, reshuffled each pass.
pub fn train_salience(
    store: &EmbeddingStore,
    queries: &[QueryRecord],
    qrels: &Qrels,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let set = TrainingSet::new(store, queries, qrels, config)?;
    train_on(&set, initial_heads(store.dim(), config), config)
}

/// Gradient descent on a prepared training set from the given heads.
pub fn train_on(
    set: &TrainingSet<'_>,
    mut heads: SalienceHeads,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    heads.validate()?;
    if heads.query.dim != set.dim {
        return Err(Error::Dimension {
            expected: set.dim,
            found: heads.query.dim,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let n = set.len();
    let batch_size = config.batch_queries.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<usize> = if batch_size == n {
            order.clone()
        } else {
            if cursor + batch_size > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += batch_size;
            order[cursor - batch_size..cursor].to_vec()
        };
        let (loss, grad) = set
            .batch_loss(&batch, &heads, config, true)
            .map_err(|e| match e {
                Error::Convergence { residual, .. } => Error::Numerical {
                    step,
                    what: format!("salience gate missed its budget by {residual:.3e}"),
                },
                other => other,
            })?;
        let grad = grad.expect("gradient requested");
        let finite = grad
            .query
            .weights
            .iter()
            .chain(&grad.document.weights)
            .chain([&grad.query.bias, &grad.document.bias])
            .all(|g| g.is_finite());
        if !loss.is_finite() || !finite {
            return Err(Error::Numerical {
                step,
                what: format!("loss {loss}"),
            });
        }
        log::debug!("step {step}: loss {loss:.6}");
        losses.push(loss);
        apply(&mut heads, &grad, config.learning_rate);
    }
    Ok(TrainOutcome { heads, losses })
}

/// Mean raw salience over the tokens selected by `mask`, per label.
pub fn salience_by_label(
    tokens: &[TokenView<'_>],
    masks: &[Vec<bool>],
    head: &SalienceHead,
) -> Result<BTreeMap<bool, f64>> {
    let mut sums: BTreeMap<bool, (f64, usize)> = BTreeMap::new();
    for (t, mask) in tokens.iter().zip(masks) {
        let s = crate::salience::raw_salience(*t, head)?;
        for (v, &label) in s.iter().zip(mask) {
            let e = sums.entry(label).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect())
}
