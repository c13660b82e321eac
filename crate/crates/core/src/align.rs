//! Token similarity matrices, pairwise alignment strategies and the
//! normalized alignment score.
//!
//! A query of `n` tokens and a document of `m` tokens give an `n × m`
//! similarity matrix `S`. An alignment matrix `A` with entries in `[0, 1]`
//! selects which pairs contribute, and the score is
//!
//! ```text
//! sim(Q, D) = Σ_ij S_ij·A_ij / Z,   Z = Σ_ij A_ij
//! ```
//!
//! With unary salience the alignment factorizes as `A = Ã ⊙ (u_q ⊗ u_d)`.
//! Single-vector (DPR), first-k (ME-BERT), sum-of-max (ColBERT, top-1) and
//! lexical exact match (COIL's token channel) are all particular choices of
//! `Ã`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{solve_relaxed_topk, SolverConfig};
use crate::store::TokenView;

/// Inner product accumulated in f64.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += f64::from(a[i]) * f64::from(b[i]);
        acc[1] += f64::from(a[i + 1]) * f64::from(b[i + 1]);
        acc[2] += f64::from(a[i + 2]) * f64::from(b[i + 2]);
        acc[3] += f64::from(a[i + 3]) * f64::from(b[i + 3]);
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += f64::from(a[i]) * f64::from(b[i]);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Inner product of f64 parameters with an f32 token row.
#[inline]
pub fn dot_f64(w: &[f64], x: &[f32]) -> f64 {
    debug_assert_eq!(w.len(), x.len());
    w.iter().zip(x).map(|(&a, &b)| a * f64::from(b)).sum()
}

/// Dense row-major `n × m` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            data: vec![0.0; n * m],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * m);
        for r in rows {
            if r.len() != m {
                return Err(Error::Dimension {
                    expected: m,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            n: rows.len(),
            m,
            data,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.m + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    fn same_shape(&self, other: &Matrix) -> Result<()> {
        if self.n != other.n || self.m != other.m {
            return Err(Error::Dimension {
                expected: self.n * self.m,
                found: other.n * other.m,
            });
        }
        Ok(())
    }
}

/// `S[i][j] = q_i · d_j`.
pub type SimilarityMatrix = Matrix;
/// Pairwise alignment `Ã` or full alignment `A`, entries in `[0, 1]`.
pub type AlignmentMatrix = Matrix;

pub fn compute_similarity(query: TokenView<'_>, doc: TokenView<'_>) -> Result<SimilarityMatrix> {
    if query.dim() != doc.dim() {
        return Err(Error::Dimension {
            expected: query.dim(),
            found: doc.dim(),
        });
    }
    let (n, m) = (query.len(), doc.len());
    let mut data = Vec::with_capacity(n * m);
    for q in query.rows() {
        data.extend(doc.rows().map(|d| dot(q, d)));
    }
    Ok(Matrix { n, m, data })
}

/// Pairwise alignment rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlignmentStrategy {
    /// DPR: only the first query token against the first document token.
    SingleVector,
    /// ME-BERT: first query token against the best of the first `k` document tokens.
    FirstK { k: usize },
    /// Every query token aligned with its `k` most similar document tokens.
    TopK { k: usize },
    /// Top-k with `k = max(floor(p·m), 1)` proportional to document length.
    TopP { p: f64 },
    /// Best document token sharing the query token's vocabulary id.
    ExactMatch,
    /// Entropy-regularized relaxation of top-k, row sums equal to `k`.
    Differentiable { k: usize, epsilon: f64 },
}

impl AlignmentStrategy {
    /// Top-1, the sum-of-max rule.
    pub const COLBERT: AlignmentStrategy = AlignmentStrategy::TopK { k: 1 };

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::FirstK { k } | Self::TopK { k } if k == 0 => {
                Err(Error::Config(format!("{self}: k must be at least 1")))
            }
            Self::TopP { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::Config(format!("{self}: p must lie in (0, 1]")))
            }
            Self::Differentiable { k, epsilon } if k == 0 || !(epsilon > 0.0) => Err(
                Error::Config(format!("{self}: needs k >= 1 and epsilon > 0")),
            ),
            _ => Ok(()),
        }
    }

    /// Whether the strategy produces a binary alignment.
    pub fn is_hard(&self) -> bool {
        !matches!(self, Self::Differentiable { .. })
    }
}

impl fmt::Display for AlignmentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SingleVector => write!(f, "dpr"),
            Self::FirstK { k } => write!(f, "me-bert:{k}"),
            Self::TopK { k } => write!(f, "top-k:{k}"),
            Self::TopP { p } => write!(f, "top-p:{p}"),
            Self::ExactMatch => write!(f, "exact-match"),
            Self::Differentiable { k, epsilon } => write!(f, "da:{k}:{epsilon}"),
        }
    }
}

impl FromStr for AlignmentStrategy {
    type Err = Error;

    /// Parses the [`Display`](fmt::Display) form, e.g. `top-k:4`, `top-p:0.015`,
    /// `dpr`, `me-bert:3`, `exact-match`, `da:2:0.002`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown alignment strategy {s:?}"));
        let mut parts = s.trim().split(':');
        let name = parts.next().ok_or_else(bad)?;
        let mut next_usize =
            || -> Result<usize> { parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad) };
        let strategy = match name {
            "dpr" | "single-vector" => Self::SingleVector,
            "me-bert" | "first-k" => Self::FirstK { k: next_usize()? },
            "top-k" => Self::TopK { k: next_usize()? },
            "colbert" => Self::COLBERT,
            "top-p" => Self::TopP {
                p: parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            },
            "exact-match" | "coil" => Self::ExactMatch,
            "da" | "differentiable" => {
                let k = next_usize()?;
                let epsilon = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                Self::Differentiable { k, epsilon }
            }
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Indices of the `k` largest entries, ties toward the lower index.
fn top_indices(row: &[f64], k: usize) -> Vec<usize> {
    let order = |&i: &usize, &j: &usize| row[j].total_cmp(&row[i]).then(i.cmp(&j));
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx
}

/// First index of the maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Each row keeps ones at its `min(k, m)` largest columns.
pub fn align_topk(s: &SimilarityMatrix, k: usize) -> AlignmentMatrix {
    let k = k.max(1).min(s.m);
    let mut a = Matrix::zeros(s.n, s.m);
    for i in 0..s.n {
        let row = s.row(i);
        let out = a.row_mut(i);
        if k == s.m {
            out.fill(1.0);
        } else if k == 1 {
            out[argmax(row)] = 1.0;
        } else {
            for j in top_indices(row, k) {
                out[j] = 1.0;
            }
        }
    }
    a
}

/// Effective `k` of top-p on a document of `m` tokens.
pub fn topp_budget(p: f64, m: usize) -> usize {
    crate::floor_budget(p, m)
}

pub fn align_topp(s: &SimilarityMatrix, p: f64) -> AlignmentMatrix {
    align_topk(s, topp_budget(p, s.m))
}

/// Row `i` has a single one at the most similar column among those sharing
/// the query token's id, or no ones when none match.
pub fn align_exact_match(
    s: &SimilarityMatrix,
    query_ids: &[u32],
    doc_ids: &[u32],
) -> Result<AlignmentMatrix> {
    if query_ids.len() != s.n || doc_ids.len() != s.m {
        return Err(Error::Dimension {
            expected: s.n * s.m,
            found: query_ids.len() * doc_ids.len(),
        });
    }
    let mut a = Matrix::zeros(s.n, s.m);
    for (i, &qid) in query_ids.iter().enumerate() {
        let row = s.row(i);
        let best = doc_ids
            .iter()
            .enumerate()
            .filter(|&(_, &did)| did == qid)
            .map(|(j, _)| j)
            .reduce(|best, j| if row[j] > row[best] { j } else { best });
        if let Some(j) = best {
            a.set(i, j, 1.0);
        }
    }
    Ok(a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SingleVectorKind {
    Dpr,
    MeBert,
}

/// DPR aligns `(0, 0)` only; ME-BERT aligns query token 0 with the best of
/// the first `k` document tokens.
pub fn align_single_vector(
    s: &SimilarityMatrix,
    kind: SingleVectorKind,
    k: usize,
) -> AlignmentMatrix {
    let mut a = Matrix::zeros(s.n, s.m);
    if s.n == 0 || s.m == 0 {
        return a;
    }
    let col = match kind {
        SingleVectorKind::Dpr => 0,
        SingleVectorKind::MeBert => argmax(&s.row(0)[..k.max(1).min(s.m)]),
    };
    a.set(0, col, 1.0);
    a
}

/// Each row is the relaxed top-k gate of that row of `S`.
pub fn align_differentiable(
    s: &SimilarityMatrix,
    k: usize,
    epsilon: f64,
) -> Result<AlignmentMatrix> {
    let k = k.max(1).min(s.m);
    let config = SolverConfig::with_epsilon(epsilon);
    let mut a = Matrix::zeros(s.n, s.m);
    for i in 0..s.n {
        let r = solve_relaxed_topk(s.row(i), k, &config)?;
        if !r.converged {
            return Err(Error::Convergence {
                iterations: r.iterations_used,
                residual: r.residual,
            });
        }
        a.row_mut(i).copy_from_slice(&r.lambda);
    }
    Ok(a)
}

/// Pairwise alignment for any strategy. Token ids are only read by
/// [`AlignmentStrategy::ExactMatch`].
pub fn align(
    s: &SimilarityMatrix,
    strategy: &AlignmentStrategy,
    query_ids: &[u32],
    doc_ids: &[u32],
) -> Result<AlignmentMatrix> {
    strategy.validate()?;
    Ok(match *strategy {
        AlignmentStrategy::SingleVector => align_single_vector(s, SingleVectorKind::Dpr, 1),
        AlignmentStrategy::FirstK { k } => align_single_vector(s, SingleVectorKind::MeBert, k),
        AlignmentStrategy::TopK { k } => align_topk(s, k),
        AlignmentStrategy::TopP { p } => align_topp(s, p),
        AlignmentStrategy::ExactMatch => align_exact_match(s, query_ids, doc_ids)?,
        AlignmentStrategy::Differentiable { k, epsilon } => align_differentiable(s, k, epsilon)?,
    })
}

/// `(Σ S⊙A, Σ A)`, both accumulated row-major.
fn weighted_sums(s: &SimilarityMatrix, a: &AlignmentMatrix) -> Result<(f64, f64)> {
    s.same_shape(a)?;
    let mut num = 0.0;
    let mut z = 0.0;
    for (sv, av) in s.data.iter().zip(&a.data) {
        num += sv * av;
        z += av;
    }
    Ok((num, z))
}

/// Normalized alignment score; 0 when the alignment is empty.
pub fn score(s: &SimilarityMatrix, a: &AlignmentMatrix) -> Result<f64> {
    let (num, z) = weighted_sums(s, a)?;
    Ok(if z > 0.0 { num / z } else { 0.0 })
}

/// `Σ S⊙A` without the normalizer.
pub fn score_unnormalized(s: &SimilarityMatrix, a: &AlignmentMatrix) -> Result<f64> {
    weighted_sums(s, a).map(|(num, _)| num)
}

/// `A = Ã ⊙ (u_q ⊗ u_d)`.
pub fn salience_weighted(
    pairwise: &AlignmentMatrix,
    u_q: &[f64],
    u_d: &[f64],
) -> Result<AlignmentMatrix> {
    if u_q.len() != pairwise.n {
        return Err(Error::Dimension {
            expected: pairwise.n,
            found: u_q.len(),
        });
    }
    if u_d.len() != pairwise.m {
        return Err(Error::Dimension {
            expected: pairwise.m,
            found: u_d.len(),
        });
    }
    let mut a = pairwise.clone();
    for (i, &uq) in u_q.iter().enumerate() {
        for (v, &ud) in a.row_mut(i).iter_mut().zip(u_d) {
            *v *= uq * ud;
        }
    }
    Ok(a)
}

/// Salience-factorized score, normalized by the weighted `Z = Σ A`.
pub fn score_full(
    s: &SimilarityMatrix,
    pairwise: &AlignmentMatrix,
    u_q: &[f64],
    u_d: &[f64],
) -> Result<f64> {
    score(s, &salience_weighted(pairwise, u_q, u_d)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentResult {
    pub pairwise: AlignmentMatrix,
    /// `Z`, the sum of the full alignment matrix.
    pub normalizer: f64,
    pub score: f64,
}

/// Scores one query-document pair end to end.
///
/// `salience`, when given, holds `(u_q, u_d)` for the factorized form. With
/// `normalize = false` the raw weighted sum is returned.
pub fn score_pair(
    query: TokenView<'_>,
    doc: TokenView<'_>,
    strategy: &AlignmentStrategy,
    normalize: bool,
    salience: Option<(&[f64], &[f64])>,
) -> Result<AlignmentResult> {
    let s = compute_similarity(query, doc)?;
    let pairwise = align(&s, strategy, query.token_ids(), doc.token_ids())?;
    let (num, z) = match salience {
        Some((u_q, u_d)) => weighted_sums(&s, &salience_weighted(&pairwise, u_q, u_d)?)?,
        None => weighted_sums(&s, &pairwise)?,
    };
    let score = if !normalize {
        num
    } else if z > 0.0 {
        num / z
    } else {
        0.0
    };
    Ok(AlignmentResult {
        pairwise,
        normalizer: z,
        score,
    })
}
