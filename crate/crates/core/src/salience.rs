//! Unary token salience: an affine + ReLU head per side, a relaxed top-k
//! sparsity gate, and ratio-based token pruning.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::dot_f64;
use crate::error::{Error, Result};
use crate::solver::{solve_relaxed_topk, SolverConfig, SolverResult, DEFAULT_EPSILON};
use crate::store::TokenView;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Document,
}

/// `s_i = max(0, w · x_i + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalienceHead {
    pub side: Side,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl SalienceHead {
    pub fn new(side: Side, weights: Vec<f64>, bias: f64) -> Self {
        Self {
            side,
            dim: weights.len(),
            weights,
            bias,
        }
    }

    /// Zero weights with a constant bias, so every token starts equally salient.
    pub fn constant(side: Side, dim: usize, bias: f64) -> Self {
        Self::new(side, vec![0.0; dim], bias)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: self.weights.len(),
            });
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config(
                "salience head has non-finite parameters".into(),
            ));
        }
        Ok(())
    }

    /// Pre-activation `w · x + b` of every token.
    pub fn affine(&self, tokens: TokenView<'_>) -> Result<Vec<f64>> {
        if tokens.dim() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: tokens.dim(),
            });
        }
        Ok(tokens
            .rows()
            .map(|x| dot_f64(&self.weights, x) + self.bias)
            .collect())
    }
}

/// Query and document heads, trained and applied together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalienceHeads {
    pub query: SalienceHead,
    pub document: SalienceHead,
}

impl SalienceHeads {
    pub fn constant(dim: usize, bias: f64) -> Self {
        Self {
            query: SalienceHead::constant(Side::Query, dim, bias),
            document: SalienceHead::constant(Side::Document, dim, bias),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.query.validate()?;
        self.document.validate()?;
        if self.query.side != Side::Query || self.document.side != Side::Document {
            return Err(Error::Config("salience heads have swapped sides".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("heads serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let heads: Self = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("salience heads: {e}")))?;
        heads.validate()?;
        Ok(heads)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalienceConfig {
    /// Training-time gate budget ratio for queries.
    pub alpha_q: f64,
    /// Training-time gate budget ratio for documents.
    pub alpha_d: f64,
    pub epsilon: f64,
    /// Fraction of query tokens searched at retrieval time.
    pub beta_q: f64,
    /// Fraction of document tokens kept in the index.
    pub beta_d: f64,
}

impl Default for SalienceConfig {
    fn default() -> Self {
        Self {
            alpha_q: 0.5,
            alpha_d: 0.4,
            epsilon: DEFAULT_EPSILON,
            beta_q: 1.0,
            beta_d: 1.0,
        }
    }
}

pub(crate) fn check_ratio(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")))
    }
}

impl SalienceConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio("alpha_q", self.alpha_q)?;
        check_ratio("alpha_d", self.alpha_d)?;
        check_ratio("beta_q", self.beta_q)?;
        check_ratio("beta_d", self.beta_d)?;
        SolverConfig::with_epsilon(self.epsilon).validate()
    }
}

/// Salience before the sparsity gate.
pub fn raw_salience(tokens: TokenView<'_>, head: &SalienceHead) -> Result<Vec<f64>> {
    Ok(head
        .affine(tokens)?
        .into_iter()
        .map(|z| z.max(0.0))
        .collect())
}

/// `u_i = λ_i · s_i` with `λ` the relaxed top-`ceil(α·m)` gate of `s`.
pub fn gated_salience(s: &[f64], alpha: f64, epsilon: f64) -> Result<Vec<f64>> {
    gated_salience_with(s, alpha, &SolverConfig::with_epsilon(epsilon)).map(|(u, _)| u)
}

/// [`gated_salience`] with an explicit solver configuration, also returning
/// the gate so callers can differentiate through it.
pub fn gated_salience_with(
    s: &[f64],
    alpha: f64,
    config: &SolverConfig,
) -> Result<(Vec<f64>, SolverResult)> {
    check_ratio("alpha", alpha)?;
    let k = crate::ceil_budget(alpha, s.len());
    let gate = solve_relaxed_topk(s, k, config)?;
    if !gate.converged {
        log::warn!(
            "salience gate did not converge (residual {:.3e} after {} iterations)",
            gate.residual,
            gate.iterations_used
        );
    }
    let u = gate.lambda.iter().zip(s).map(|(l, v)| l * v).collect();
    Ok((u, gate))
}

/// Indices of the `ceil(β·m)` most salient tokens, ties toward the lower
/// index, returned in ascending order.
pub fn prune_select(salience: &[f64], beta: f64) -> Vec<usize> {
    let m = salience.len();
    if m == 0 {
        return Vec::new();
    }
    let keep = crate::ceil_budget(beta.clamp(f64::MIN_POSITIVE, 1.0), m);
    let mut idx: Vec<usize> = (0..m).collect();
    if keep < m {
        idx.sort_by(|&i, &j| salience[j].total_cmp(&salience[i]).then(i.cmp(&j)));
        idx.truncate(keep);
        idx.sort_unstable();
    }
    idx
}

/// Token indices kept at ratio `beta`, ranked by `head` when given and by the
/// persisted salience otherwise. Pruning with neither is a configuration
/// error; `beta = 1` keeps everything without consulting salience.
pub fn prune_tokens(
    tokens: TokenView<'_>,
    head: Option<&SalienceHead>,
    beta: f64,
) -> Result<Vec<usize>> {
    check_ratio("beta", beta)?;
    if beta >= 1.0 {
        return Ok((0..tokens.len()).collect());
    }
    let salience = match (head, tokens.salience()) {
        (Some(h), _) => raw_salience(tokens, h)?,
        (None, Some(s)) => s.iter().map(|&v| f64::from(v)).collect(),
        (None, None) => {
            return Err(Error::Config(format!(
                "pruning at beta = {beta} needs a salience head or stored salience"
            )))
        }
    };
    Ok(prune_select(&salience, beta))
}

/// Gated salience of every token, the `u` vector used by the factorized score.
pub fn token_weights(
    tokens: TokenView<'_>,
    head: &SalienceHead,
    alpha: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    gated_salience(&raw_salience(tokens, head)?, alpha, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::TokenEmbeddings;

    #[test]
    fn raw_salience_examples() {
        let x =
            TokenEmbeddings::from_rows_normalized(&[vec![0.2, 0.9], vec![-0.6, 0.8]], vec![0, 1])
                .unwrap();
        let zero = SalienceHead::constant(Side::Document, 2, 0.0);
        assert_eq!(raw_salience(x.view(), &zero).unwrap(), vec![0.0, 0.0]);

        let head = SalienceHead::new(Side::Document, vec![1.0, 0.0], 0.5);
        let s = raw_salience(x.view(), &head).unwrap();
        let x0 = f64::from(x.row(0)[0]);
        assert!((s[0] - (x0 + 0.5)).abs() < 1e-12);

        let dead = SalienceHead::new(Side::Document, vec![1.0, 1.0], -10.0);
        assert_eq!(raw_salience(x.view(), &dead).unwrap(), vec![0.0, 0.0]);

        let wrong = SalienceHead::constant(Side::Document, 3, 1.0);
        assert!(raw_salience(x.view(), &wrong).is_err());
    }

    #[test]
    fn raw_salience_hand_value() {
        // An exactly representable row: affine value 0.2 + 0.5.
        let x = TokenEmbeddings::new(2, vec![0.2, 0.9797959], vec![0], None).unwrap();
        let head = SalienceHead::new(Side::Document, vec![1.0, 0.0], 0.5);
        assert!((raw_salience(x.view(), &head).unwrap()[0] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn gated_salience_examples() {
        let u = gated_salience(&[4.0, 3.0, 2.0, 1.0], 0.5, 1e-4).unwrap();
        for (got, want) in u.iter().zip([4.0, 3.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-2, "{u:?}");
        }
        let s = [0.3, 0.1, 0.7];
        assert_eq!(gated_salience(&s, 1.0, 0.002).unwrap(), s.to_vec());
        let u = gated_salience(&[0.8, 0.8], 0.5, 0.002).unwrap();
        assert!(u.iter().all(|v| (v - 0.4).abs() < 1e-12));
        assert!(gated_salience(&s, 0.0, 0.002).is_err());
    }

    #[test]
    fn prune_select_examples() {
        assert_eq!(prune_select(&[0.9, 0.1, 0.5, 0.0], 0.5), vec![0, 2]);
        assert_eq!(prune_select(&[0.9, 0.1, 0.5, 0.0], 1.0), vec![0, 1, 2, 3]);
        assert_eq!(prune_select(&[0.1, 0.2, 0.3, 0.4, 0.5], 0.1), vec![4]);
        assert_eq!(prune_select(&[0.5, 0.5, 0.5], 0.5), vec![0, 1]);
    }

    #[test]
    fn heads_json_roundtrip() {
        let heads = SalienceHeads {
            query: SalienceHead::new(Side::Query, vec![0.5, -1.25], 0.1),
            document: SalienceHead::new(Side::Document, vec![0.0, 2.0], -0.3),
        };
        let text = heads.to_json();
        assert!(text.contains("\"side\": \"query\""));
        assert_eq!(SalienceHeads::from_json(&text).unwrap(), heads);
        assert!(SalienceHeads::from_json("{}").is_err());
        let mut swapped = heads.clone();
        std::mem::swap(&mut swapped.query, &mut swapped.document);
        assert!(SalienceHeads::from_json(&swapped.to_json()).is_err());
    }
}
