//! Per-session cache: post-rotary K/V for every layer and position, indicator
//! tensors at skip layers, the last-known confidence of every position, and
//! the refresh schedule that bounds how stale any of it can get.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{FullForward, Model, TokenId};
use crate::skip::Indicator;
use crate::tensor::{softmax_in_place, FlopCounter, Matrix};
use crate::{Error, PositionSet, Result};

pub const CACHE_DUMP_MAGIC: [u8; 4] = *b"ESDC";
pub const CACHE_DUMP_VERSION: u32 = 1;

/// Maximum softmax probability of a logits row.
pub fn confidence(logits: &[f32]) -> f32 {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p.into_iter().fold(0.0, f32::max)
}

/// Cache bytes held per token: K and V at every layer plus one indicator row
/// per skip layer.
pub fn cache_bytes_per_token(num_layers: u64, dim: u64, skip_layers: u64, elem_bytes: u64) -> u64 {
    2 * num_layers * dim * elem_bytes + skip_layers * dim * elem_bytes
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheSet {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    indicator: Indicator,
    indicators: BTreeMap<usize, Matrix>,
    conf: Vec<f32>,
    stamps: Vec<Vec<u64>>,
    iteration: u64,
}

#[derive(Serialize, Deserialize)]
struct DumpSidecar {
    iteration: u64,
    indicator: Indicator,
    indicator_layers: Vec<usize>,
    stamps: Vec<Vec<u64>>,
}

fn pick(ff: &FullForward, indicator: Indicator, layer: usize) -> &Matrix {
    match indicator {
        Indicator::Hidden => &ff.hidden[layer],
        Indicator::Query => &ff.queries[layer],
        Indicator::Key => &ff.keys[layer],
        Indicator::Value => &ff.values[layer],
    }
}

impl CacheSet {
    /// Seeds every cache entry from one full forward.
    pub fn from_full_forward(
        ff: &FullForward,
        indicator: Indicator,
        indicator_layers: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let n = ff.logits.rows();
        let num_layers = ff.keys.len();
        let mut indicators = BTreeMap::new();
        for l in indicator_layers {
            if l >= num_layers {
                return Err(Error::config(format!("indicator layer {l} out of range")));
            }
            indicators.insert(l, pick(ff, indicator, l).clone());
        }
        Ok(Self {
            keys: ff.keys.clone(),
            values: ff.values.clone(),
            indicator,
            indicators,
            conf: (0..n).map(|i| confidence(ff.logits.row(i))).collect(),
            stamps: vec![vec![0; n]; num_layers],
            iteration: 0,
        })
    }

    /// Runs a full forward over `tokens` (prompt followed by masks) and seeds
    /// the cache from it. The forward result is returned for its logits.
    pub fn init(
        model: &Model,
        tokens: &[TokenId],
        indicator: Indicator,
        indicator_layers: impl IntoIterator<Item = usize>,
        counter: &mut FlopCounter,
    ) -> Result<(Self, FullForward)> {
        let ff = model.full_forward(tokens, counter)?;
        let cache = Self::from_full_forward(&ff, indicator, indicator_layers)?;
        Ok((cache, ff))
    }

    /// Overwrites every row from a fresh full forward and stamps it with the
    /// current iteration.
    pub fn rebuild(&mut self, ff: &FullForward) -> Result<()> {
        if ff.keys.len() != self.keys.len() || ff.logits.rows() != self.len() {
            return Err(Error::contract("full forward shape differs from cache"));
        }
        self.keys.clone_from(&ff.keys);
        self.values.clone_from(&ff.values);
        for (&l, m) in self.indicators.iter_mut() {
            m.clone_from(pick(ff, self.indicator, l));
        }
        for (i, c) in self.conf.iter_mut().enumerate() {
            *c = confidence(ff.logits.row(i));
        }
        let t = self.iteration;
        for s in &mut self.stamps {
            s.fill(t);
        }
        Ok(())
    }

    /// Number of sequence positions.
    pub fn len(&self) -> usize {
        self.conf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conf.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn dim(&self) -> usize {
        self.keys.first().map_or(0, Matrix::cols)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Stamp applied to subsequent writes. Stamps never go backwards.
    pub fn set_iteration(&mut self, t: u64) -> Result<()> {
        if t < self.iteration {
            return Err(Error::contract(format!(
                "iteration stamp {t} behind current {}",
                self.iteration
            )));
        }
        self.iteration = t;
        Ok(())
    }

    pub fn keys(&self, layer: usize) -> &Matrix {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Matrix {
        &self.values[layer]
    }

    pub fn indicator(&self) -> Indicator {
        self.indicator
    }

    pub fn indicator_cache(&self, layer: usize) -> Option<&Matrix> {
        self.indicators.get(&layer)
    }

    pub fn indicator_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.indicators.keys().copied()
    }

    pub fn confidences(&self) -> &[f32] {
        &self.conf
    }

    pub fn stamps(&self, layer: usize) -> &[u64] {
        &self.stamps[layer]
    }

    fn check_rows(&self, positions: &PositionSet, m: &Matrix, what: &str) -> Result<()> {
        if let Some(max) = positions.max() {
            if max >= self.len() {
                return Err(Error::contract(format!(
                    "position {max} out of range for cache of {} rows",
                    self.len()
                )));
            }
        }
        if m.rows() != positions.len() || m.cols() != self.dim() {
            return Err(Error::contract(format!(
                "{what} update of shape {:?} for {} positions of width {}",
                m.shape(),
                positions.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Replaces exactly the rows in `positions` of the layer's K and V (and
    /// indicator, when given); every other row is left untouched.
    pub fn scatter_update(
        &mut self,
        layer: usize,
        positions: &PositionSet,
        k_new: &Matrix,
        v_new: &Matrix,
        h_new: Option<&Matrix>,
    ) -> Result<()> {
        if layer >= self.num_layers() {
            return Err(Error::contract(format!("layer {layer} out of range")));
        }
        self.check_rows(positions, k_new, "key")?;
        self.check_rows(positions, v_new, "value")?;
        if let Some(h) = h_new {
            self.check_rows(positions, h, "indicator")?;
            if !self.indicators.contains_key(&layer) {
                return Err(Error::contract(format!("layer {layer} has no indicator cache")));
            }
        }
        scatter_rows(&mut self.keys[layer], positions, k_new);
        scatter_rows(&mut self.values[layer], positions, v_new);
        if let Some(h) = h_new {
            scatter_rows(self.indicators.get_mut(&layer).unwrap(), positions, h);
        }
        self.stamp(layer, positions);
        Ok(())
    }

    /// Replaces the indicator rows of `layer` at `positions`.
    pub fn scatter_indicator(&mut self, layer: usize, positions: &PositionSet, h_new: &Matrix) -> Result<()> {
        self.check_rows(positions, h_new, "indicator")?;
        let cache = self
            .indicators
            .get_mut(&layer)
            .ok_or_else(|| Error::contract(format!("layer {layer} has no indicator cache")))?;
        scatter_rows(cache, positions, h_new);
        self.stamp(layer, positions);
        Ok(())
    }

    /// Overwrites cached confidences at `positions`.
    pub fn update_confidence(&mut self, positions: &PositionSet, conf: &[f32]) -> Result<()> {
        if conf.len() != positions.len() {
            return Err(Error::contract("confidence update not aligned with positions"));
        }
        if positions.max().is_some_and(|m| m >= self.len()) {
            return Err(Error::contract("confidence position out of range"));
        }
        if let Some(c) = conf.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::contract(format!("confidence {c} outside [0, 1]")));
        }
        for (p, &c) in positions.iter().zip(conf) {
            self.conf[p] = c;
        }
        Ok(())
    }

    fn stamp(&mut self, layer: usize, positions: &PositionSet) {
        let t = self.iteration;
        for p in positions.iter() {
            self.stamps[layer][p] = t;
        }
    }

    /// f32 cache bytes held per token.
    pub fn bytes_per_token(&self) -> u64 {
        cache_bytes_per_token(
            self.num_layers() as u64,
            self.dim() as u64,
            self.indicators.len() as u64,
            4,
        )
    }

    /// Writes the cache as raw tensors plus a JSON sidecar holding the
    /// freshness stamps. Returns the sidecar path.
    ///
    /// Binary layout (little-endian): magic "ESDC", version u32, num_layers,
    /// rows, dim, indicator-layer count (u32 each), the indicator layer
    /// indices (u32 each), then K and V for every layer, every indicator
    /// matrix in layer order and finally the confidence vector, all raw f32.
    pub fn dump(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&CACHE_DUMP_MAGIC)?;
        let layers: Vec<usize> = self.indicator_layers().collect();
        for v in [
            CACHE_DUMP_VERSION,
            self.num_layers() as u32,
            self.len() as u32,
            self.dim() as u32,
            layers.len() as u32,
        ]
        .into_iter()
        .chain(layers.iter().map(|&l| l as u32))
        {
            w.write_all(&v.to_le_bytes())?;
        }
        for (k, v) in self.keys.iter().zip(&self.values) {
            crate::model::write_f32s(&mut w, k.data())?;
            crate::model::write_f32s(&mut w, v.data())?;
        }
        for m in self.indicators.values() {
            crate::model::write_f32s(&mut w, m.data())?;
        }
        crate::model::write_f32s(&mut w, &self.conf)?;
        w.flush()?;

        let sidecar = path.with_extension("json");
        let meta = DumpSidecar {
            iteration: self.iteration,
            indicator: self.indicator,
            indicator_layers: layers,
            stamps: self.stamps.clone(),
        };
        std::fs::write(&sidecar, serde_json::to_vec_pretty(&meta)?)?;
        Ok(sidecar)
    }

    /// Reads back a [`dump`](Self::dump).
    pub fn load_dump(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CACHE_DUMP_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad cache dump magic".into(),
            });
        }
        let mut word = || -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = word()?;
        if version != CACHE_DUMP_VERSION as usize {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported cache dump version {version}"),
            });
        }
        let (num_layers, rows, dim, n_ind) = (word()?, word()?, word()?, word()?);
        let ind_layers = (0..n_ind).map(|_| word()).collect::<Result<Vec<_>>>()?;
        let meta: DumpSidecar = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
        if meta.indicator_layers != ind_layers {
            return Err(Error::input("cache dump sidecar does not match binary"));
        }
        let mut mat = || -> Result<Matrix> {
            Matrix::from_vec(rows, dim, crate::model::read_f32s(&mut r, rows * dim)?)
        };
        let mut keys = Vec::with_capacity(num_layers);
        let mut values = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            keys.push(mat()?);
            values.push(mat()?);
        }
        let mut indicators = BTreeMap::new();
        for &l in &ind_layers {
            indicators.insert(l, mat()?);
        }
        let conf = crate::model::read_f32s(&mut r, rows)?;
        Ok(Self {
            keys,
            values,
            indicator: meta.indicator,
            indicators,
            conf,
            stamps: meta.stamps,
            iteration: meta.iteration,
        })
    }
}

fn scatter_rows(dst: &mut Matrix, positions: &PositionSet, src: &Matrix) {
    for (i, p) in positions.iter().enumerate() {
        dst.row_mut(p).copy_from_slice(src.row(i));
    }
}

/// Refresh periods in iterations. `u64::MAX` disables a refresh kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshPolicy {
    pub context_period: u64,
    pub block_period: u64,
}

impl RefreshPolicy {
    pub const NEVER: u64 = u64::MAX;

    /// The schedule DualCache follows implicitly: context at every block
    /// boundary, the whole block every iteration.
    pub fn dualcache(block_length: usize) -> Self {
        Self {
            context_period: block_length as u64,
            block_period: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_period == 0 || self.block_period == 0 {
            return Err(Error::config("refresh periods must be at least 1"));
        }
        Ok(())
    }
}

/// What the next iteration recomputes without skipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshAction {
    /// Normal iteration: current block with early skipping.
    None,
    /// Whole current block, every layer, no skipping.
    BlockRefresh,
    /// Whole sequence, every layer, no skipping.
    ContextRefresh,
}

/// Iterations since the last refresh of each kind. A fresh counter reports a
/// context refresh as due, which is how the cache gets initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefreshCounters {
    pub since_context: u64,
    pub since_block: u64,
}

impl Default for RefreshCounters {
    fn default() -> Self {
        Self {
            since_context: u64::MAX,
            since_block: u64::MAX,
        }
    }
}

impl RefreshCounters {
    /// Records that an iteration ran with `action`.
    pub fn advance(&mut self, action: RefreshAction) {
        match action {
            RefreshAction::ContextRefresh => {
                self.since_context = 1;
                self.since_block = 1;
            }
            RefreshAction::BlockRefresh => {
                self.since_context = self.since_context.saturating_add(1);
                self.since_block = 1;
            }
            RefreshAction::None => {
                self.since_context = self.since_context.saturating_add(1);
                self.since_block = self.since_block.saturating_add(1);
            }
        }
    }
}

pub fn refresh_due(counters: &RefreshCounters, policy: &RefreshPolicy) -> RefreshAction {
    if counters.since_context >= policy.context_period {
        RefreshAction::ContextRefresh
    } else if counters.since_block >= policy.block_period {
        RefreshAction::BlockRefresh
    } else {
        RefreshAction::None
    }
}
