//! Choosing which masked positions to commit in an iteration.

use serde::{Deserialize, Serialize};

use crate::model::TokenId;
use crate::tensor::softmax_in_place;

/// A masked position with its greedy token and that token's probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub position: usize,
    pub token: TokenId,
    pub confidence: f32,
}

/// Suppresses EOS while the last output position is still masked. The last
/// position itself is never guarded: once it is being unmasked the condition
/// no longer describes a dangling mask.
pub fn eos_guard(row: &mut [f32], eos: TokenId, active: bool) {
    if active {
        row[eos as usize] = f32::NEG_INFINITY;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy (temperature 0) choice for one position. The mask id is never a
/// valid output, so its logit is always suppressed.
pub fn greedy_candidate(position: usize, logits: &[f32], mask: TokenId, eos: TokenId, guard: bool) -> Candidate {
    let mut p = logits.to_vec();
    p[mask as usize] = f32::NEG_INFINITY;
    eos_guard(&mut p, eos, guard);
    softmax_in_place(&mut p);
    let token = argmax(&p);
    Candidate {
        position,
        token: token as TokenId,
        confidence: p[token],
    }
}

fn by_confidence(pool: &[Candidate]) -> Vec<Candidate> {
    let mut v = pool.to_vec();
    v.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.position.cmp(&b.position))
    });
    v
}

/// The `n` most confident candidates (ties to the lower position), returned
/// in position order.
pub fn select_unmask(pool: &[Candidate], n: usize) -> Vec<Candidate> {
    let mut chosen: Vec<Candidate> = by_confidence(pool).into_iter().take(n.max(1)).collect();
    chosen.sort_by_key(|c| c.position);
    chosen
}

/// Every candidate at or above `threshold`; if none qualifies, the single
/// most confident one.
pub fn parallel_unmask(pool: &[Candidate], threshold: f64) -> Vec<Candidate> {
    let mut chosen: Vec<Candidate> = pool
        .iter()
        .filter(|c| c.confidence as f64 >= threshold)
        .copied()
        .collect();
    if chosen.is_empty() {
        chosen.extend(by_confidence(pool).into_iter().take(1));
    }
    chosen.sort_by_key(|c| c.position);
    chosen
}
