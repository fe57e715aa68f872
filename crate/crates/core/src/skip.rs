//! Importance scoring and top-k position selection for early skipping.
//!
//! The importance of position `i` at a skip layer blends the confidence it
//! had in the previous iteration with how much its indicator tensor moved:
//!
//! ```text
//! I_i = α · c_i + (1 − α) · ‖h_i − h'_i‖₁ / (√d · ‖h'_i‖₂)
//! ```
//!
//! where `h'` is the cached indicator from the previous iteration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;
use crate::{Error, PositionSet, Result};

/// Tensor whose change between iterations feeds the importance score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Indicator {
    #[default]
    Hidden,
    Query,
    Key,
    Value,
}

impl Indicator {
    pub const ALL: [Indicator; 4] = [Self::Hidden, Self::Query, Self::Key, Self::Value];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hidden => "hidden",
            Self::Query => "query",
            Self::Key => "key",
            Self::Value => "value",
        }
    }
}

impl std::str::FromStr for Indicator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| Error::config(format!("unknown indicator '{s}'")))
    }
}

fn default_alpha() -> f64 {
    0.5
}

/// Per-layer skip ratios plus the importance-score parameters.
///
/// A ratio `r` at layer `l` means the top `(1 − r)` fraction of the positions
/// that went through layer `l` continue to layer `l + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipSchedule {
    #[serde(deserialize_with = "layer_keyed")]
    pub ratios: BTreeMap<usize, f64>,
    #[serde(default)]
    pub indicator: Indicator,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl SkipSchedule {
    /// Ratio 0.5 at 1/8 and 1/4 of the depth, hidden-state indicator, α = 0.5.
    pub fn default_for(num_layers: usize) -> Self {
        let ratios = [num_layers / 8, num_layers / 4]
            .into_iter()
            .map(|l| (l, 0.5))
            .collect();
        Self {
            ratios,
            indicator: Indicator::Hidden,
            alpha: 0.5,
        }
    }

    /// No skipping anywhere.
    pub fn none() -> Self {
        Self {
            ratios: BTreeMap::new(),
            indicator: Indicator::Hidden,
            alpha: 0.5,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        for (&l, &r) in &self.ratios {
            if l >= num_layers {
                return Err(Error::config(format!(
                    "skip layer {l} out of range for {num_layers} layers"
                )));
            }
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("skip ratio {r} at layer {l} not in [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        Ok(())
    }

    pub fn ratio(&self, layer: usize) -> f64 {
        self.ratios.get(&layer).copied().unwrap_or(0.0)
    }

    /// Layers holding an indicator cache.
    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.ratios.keys().copied()
    }

    pub fn is_noop(&self) -> bool {
        self.ratios.values().all(|&r| r == 0.0)
    }

    /// Continuous fraction of the block still active in each layer.
    pub fn active_fractions(&self, num_layers: usize) -> Vec<f64> {
        let mut frac = 1.0;
        (0..num_layers)
            .map(|l| {
                let here = frac;
                frac *= 1.0 - self.ratio(l);
                here
            })
            .collect()
    }

    /// Predicted layer-FLOP proportion relative to running the whole block
    /// through every layer, under a cost model linear in the active count.
    pub fn closed_form_proportion(&self, num_layers: usize) -> f64 {
        self.active_fractions(num_layers).iter().sum::<f64>() / num_layers as f64
    }

    /// Exact active counts per layer for a block of `block_len` positions.
    pub fn active_counts(&self, num_layers: usize, block_len: usize) -> Vec<usize> {
        let mut n = block_len;
        (0..num_layers)
            .map(|l| {
                let here = n;
                n = keep_count(self.ratio(l), n);
                here
            })
            .collect()
    }
}

/// JSON object keys are strings; accept `"4"` as layer 4 even when the
/// surrounding structure is buffered (as with flattened fields).
fn layer_keyed<'de, D: serde::Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
    let raw = BTreeMap::<String, f64>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| {
            k.trim()
                .parse::<usize>()
                .map(|l| (l, v))
                .map_err(|_| serde::de::Error::custom(format!("skip layer key '{k}' is not a layer index")))
        })
        .collect()
}

/// Importance scores defined on an active position set.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub positions: PositionSet,
    pub scores: Vec<f64>,
}

/// `‖now − prev‖₁ / (√d · ‖prev‖₂)`, or 0 when `prev` is the zero vector.
pub fn variation_term(now: &[f32], prev: &[f32]) -> f64 {
    debug_assert_eq!(now.len(), prev.len());
    let d = now.len() as f64;
    let mut l1 = 0.0f64;
    let mut sq = 0.0f64;
    for (&a, &b) in now.iter().zip(prev) {
        l1 += (a as f64 - b as f64).abs();
        sq += b as f64 * b as f64;
    }
    let denom = d.sqrt() * sq.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        l1 / denom
    }
}

/// Row-wise variation terms between two aligned indicator matrices.
pub fn variation_terms(now: &Matrix, prev: &Matrix) -> Result<Vec<f64>> {
    if now.shape() != prev.shape() {
        return Err(Error::config(format!(
            "indicator shapes disagree: {:?} vs {:?}",
            now.shape(),
            prev.shape()
        )));
    }
    Ok((0..now.rows())
        .map(|i| variation_term(now.row(i), prev.row(i)))
        .collect())
}

/// Blends previous confidences with precomputed variation terms.
pub fn blend(conf_prev: &[f32], variation: &[f64], alpha: f64) -> Vec<f64> {
    conf_prev
        .iter()
        .zip(variation)
        .map(|(&c, &v)| alpha * c as f64 + (1.0 - alpha) * v)
        .collect()
}

/// Importance of every position in `positions`; the confidence slice and
/// both indicator matrices are aligned row-for-row with the set.
pub fn importance_scores(
    positions: &PositionSet,
    conf_prev: &[f32],
    indicator_now: &Matrix,
    indicator_prev: &Matrix,
    alpha: f64,
) -> Result<ImportanceVector> {
    if conf_prev.len() != positions.len() || indicator_now.rows() != positions.len() {
        return Err(Error::config(format!(
            "importance inputs not aligned: {} positions, {} confidences, {} indicator rows",
            positions.len(),
            conf_prev.len(),
            indicator_now.rows()
        )));
    }
    let variation = variation_terms(indicator_now, indicator_prev)?;
    Ok(ImportanceVector {
        positions: positions.clone(),
        scores: blend(conf_prev, &variation, alpha),
    })
}

/// Number of positions that survive a skip ratio: `max(1, round((1 − r)·n))`.
pub fn keep_count(ratio: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    (((1.0 - ratio) * n as f64).round() as usize).clamp(1, n)
}

/// The `keep_count(ratio, |S|)` highest-scoring positions, ties going to the
/// lower position, returned in ascending position order.
pub fn select_topk(scores: &ImportanceVector, ratio: f64) -> PositionSet {
    let n = scores.positions.len();
    let k = keep_count(ratio, n);
    if k == n {
        return scores.positions.clone();
    }
    let pos = scores.positions.as_slice();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .total_cmp(&scores.scores[a])
            .then(pos[a].cmp(&pos[b]))
    });
    let mut kept: Vec<usize> = order[..k].iter().map(|&i| pos[i]).collect();
    kept.sort_unstable();
    PositionSet::new(kept).expect("subset of a valid set")
}
