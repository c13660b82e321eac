//! Multi-vector retrieval scored as sparse token alignment.
//!
//! A query and a document are both sets of unit-normalized token vectors.
//! Their similarity is a normalized sum over an alignment matrix that selects
//! which token pairs interact ([`align`]), optionally weighted by learned
//! per-token salience ([`salience`]). Salience is sparsified by a relaxed
//! top-k gate computed with an entropy-regularized LP solver ([`solver`]).
//!
//! The retrieval pipeline ([`index`], [`retrieve`]) searches a token-level
//! index, traces hits back to documents and refines candidates with the full
//! alignment score. [`eval`] and [`adapt`] cover ranking metrics and few-shot
//! selection of the alignment strategy; [`train`] fits the salience heads.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod align;
pub mod error;
pub mod eval;
pub mod index;
pub mod retrieve;
pub mod salience;
pub mod solver;
pub mod store;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Number of items kept when a ratio in (0, 1] is applied to `m` items:
/// `ceil(ratio * m)`, never less than one.
///
/// A small slack absorbs representation error so that e.g. `0.2 * 100`
/// keeps exactly 20 items.
pub fn ceil_budget(ratio: f64, m: usize) -> usize {
    let raw = (ratio * m as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(m.max(1))
}

/// `max(floor(p * m), 1)`, with the same slack as [`ceil_budget`].
pub fn floor_budget(ratio: f64, m: usize) -> usize {
    let raw = (ratio * m as f64 + 1e-9).floor();
    (raw.max(1.0) as usize).min(m.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets_round_as_documented() {
        assert_eq!(ceil_budget(0.2, 100), 20);
        assert_eq!(ceil_budget(0.1, 5), 1);
        assert_eq!(ceil_budget(0.5, 4), 2);
        assert_eq!(ceil_budget(0.4, 32), 13);
        assert_eq!(ceil_budget(1.0, 7), 7);
        assert_eq!(floor_budget(0.01, 300), 3);
        assert_eq!(floor_budget(0.005, 50), 1);
        assert_eq!(floor_budget(0.02, 256), 5);
        assert_eq!(floor_budget(0.57, 100), 57);
    }
}
