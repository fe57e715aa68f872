use std::collections::BTreeMap;

use super::config::{GenerationConfig, Strategy};
use super::trace::{GenerationTrace, IterationRecord, TraceSummary, UnmaskEvent, VariationRecord};
use super::unmask::{self, Candidate};
use crate::cache::{self, refresh_due, CacheSet, RefreshAction, RefreshCounters, RefreshPolicy};
use crate::model::{FullForward, Model, TokenId};
use crate::skip::{self, ImportanceVector, Indicator, SkipSchedule};
use crate::tensor::{FlopCounter, Matrix};
use crate::{Error, PositionSet, Result, ENGINE_VERSION};

/// What one iteration computed and committed.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub iteration: u64,
    pub block: usize,
    pub action: RefreshAction,
    /// Rows of `logits`, in order. For full-sequence iterations this is the
    /// whole sequence; otherwise the positions that survived every layer.
    pub positions: PositionSet,
    pub logits: Matrix,
    pub unmasked: Vec<UnmaskEvent>,
}

struct BlockPass {
    survivors: PositionSet,
    logits: Matrix,
    active_per_layer: Vec<usize>,
    variations: Vec<VariationRecord>,
}

/// One generation run. Owns its sequence, cache and FLOP counter; the model
/// is shared read-only.
pub struct DecodeSession<'m> {
    model: &'m Model,
    cfg: GenerationConfig,
    skip: SkipSchedule,
    policy: RefreshPolicy,
    prompt_len: usize,
    sequence: Vec<TokenId>,
    cache: Option<CacheSet>,
    counters: RefreshCounters,
    flops: FlopCounter,
    iteration: u64,
    block: usize,
    iter_in_block: usize,
    probes: BTreeMap<(usize, Indicator), Matrix>,
    records: Vec<IterationRecord>,
    unmask_order: Vec<usize>,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m Model, prompt: &[TokenId], cfg: GenerationConfig) -> Result<Self> {
        cfg.validate(&model.config)?;
        if prompt.is_empty() {
            return Err(Error::input("prompt must not be empty"));
        }
        let mc = &model.config;
        if let Some(&t) = prompt
            .iter()
            .find(|&&t| t >= mc.vocab_size || t == mc.mask_token_id)
        {
            return Err(Error::input(format!(
                "prompt token {t} is out of range or the mask token"
            )));
        }
        let mut sequence = prompt.to_vec();
        sequence.resize(prompt.len() + cfg.gen_length, mc.mask_token_id);
        Ok(Self {
            model,
            skip: cfg.effective_skip(model.config.layers()),
            policy: cfg.effective_refresh(),
            cfg,
            prompt_len: prompt.len(),
            sequence,
            cache: None,
            counters: RefreshCounters::default(),
            flops: FlopCounter::new(),
            iteration: 0,
            block: 0,
            iter_in_block: 0,
            probes: BTreeMap::new(),
            records: Vec::new(),
            unmask_order: Vec::new(),
        })
    }

    pub fn sequence(&self) -> &[TokenId] {
        &self.sequence
    }

    pub fn output(&self) -> &[TokenId] {
        &self.sequence[self.prompt_len..]
    }

    pub fn cache(&self) -> Option<&CacheSet> {
        self.cache.as_ref()
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn records(&self) -> &[IterationRecord] {
        &self.records
    }

    pub fn is_done(&self) -> bool {
        !self.sequence[self.prompt_len..].contains(&self.mask())
    }

    fn mask(&self) -> TokenId {
        self.model.config.mask_token_id
    }

    fn block_positions(&self, b: usize) -> PositionSet {
        let start = self.prompt_len + b * self.cfg.block_length;
        PositionSet::range(start, start + self.cfg.block_length)
    }

    fn is_masked(&self, p: usize) -> bool {
        self.sequence[p] == self.mask()
    }

    /// Runs iterations until every output position is unmasked.
    pub fn run(&mut self) -> Result<()> {
        while self.step()?.is_some() {}
        Ok(())
    }

    /// One denoising iteration. Returns `None` once generation is complete.
    pub fn step(&mut self) -> Result<Option<StepReport>> {
        while self.block < self.cfg.num_blocks()
            && !self.block_positions(self.block).iter().any(|p| self.is_masked(p))
        {
            self.block += 1;
            self.iter_in_block = 0;
        }
        if self.block >= self.cfg.num_blocks() {
            return Ok(None);
        }
        let block = self.block_positions(self.block);
        let flops_before = self.flops.total();
        let layer_flops_before = self.flops.layers_total();
        if let Some(c) = self.cache.as_mut() {
            c.set_iteration(self.iteration)?;
        }

        let action = match self.cfg.strategy {
            Strategy::Vanilla => RefreshAction::ContextRefresh,
            Strategy::Dualcache if self.iter_in_block == 0 => RefreshAction::ContextRefresh,
            Strategy::Dualcache => RefreshAction::BlockRefresh,
            Strategy::EsDllm => refresh_due(&self.counters, &self.policy),
        };

        let n_layers = self.model.config.layers();
        let (rows, logits, active_per_layer, mut variations) = match action {
            RefreshAction::ContextRefresh => {
                let ff = self.model.full_forward(&self.sequence, &mut self.flops)?;
                let variations = self.probe(&ff)?;
                match self.cfg.strategy {
                    Strategy::Vanilla => {}
                    _ => self.refresh_context(&ff)?,
                }
                let n = self.sequence.len();
                (PositionSet::range(0, n), ff.logits, vec![n; n_layers], variations)
            }
            RefreshAction::BlockRefresh | RefreshAction::None => {
                let pass = self.forward_block(&block, action == RefreshAction::None)?;
                (pass.survivors, pass.logits, pass.active_per_layer, pass.variations)
            }
        };
        self.counters.advance(action);

        let conf: Vec<f32> = (0..rows.len()).map(|i| cache::confidence(logits.row(i))).collect();

        let mut pool = self.candidates(&rows, &logits, &block);
        let mut fallback = false;
        if pool.is_empty() {
            // Only reachable under early skipping: no masked position made it
            // through every layer.
            let p = self.fallback_position(&block)?;
            let pass = self.forward_block(&PositionSet::new(vec![p])?, false)?;
            variations.extend(pass.variations);
            pool = self.candidates(&pass.survivors, &pass.logits, &block);
            fallback = true;
        }
        let chosen = match self.cfg.parallel_threshold {
            Some(tau) => unmask::parallel_unmask(&pool, tau),
            None => unmask::select_unmask(&pool, self.cfg.tokens_per_step),
        };
        let unmasked: Vec<UnmaskEvent> = chosen
            .iter()
            .map(|c| UnmaskEvent {
                position: c.position,
                token: c.token,
                confidence: c.confidence,
            })
            .collect();
        if unmasked.is_empty() {
            return Err(Error::contract(format!("iteration {} unmasked nothing", self.iteration)));
        }
        for e in &unmasked {
            self.sequence[e.position] = e.token;
            self.unmask_order.push(e.position);
        }

        self.records.push(IterationRecord {
            iteration: self.iteration,
            block: self.block,
            action,
            fallback,
            flops: self.flops.total() - flops_before,
            layer_flops: self.flops.layers_total() - layer_flops_before,
            active_per_layer,
            conf_positions: rows.as_slice().to_vec(),
            confidences: conf,
            unmasked: unmasked.clone(),
            variations,
        });
        let report = StepReport {
            iteration: self.iteration,
            block: self.block,
            action,
            positions: rows,
            logits,
            unmasked,
        };
        self.iteration += 1;
        self.iter_in_block += 1;
        Ok(Some(report))
    }

    fn refresh_context(&mut self, ff: &FullForward) -> Result<()> {
        match self.cache.as_mut() {
            Some(c) => c.rebuild(ff),
            None => {
                let mut c = CacheSet::from_full_forward(ff, self.skip.indicator, self.skip.layers())?;
                c.set_iteration(self.iteration)?;
                self.cache = Some(c);
                Ok(())
            }
        }
    }

    /// Tensor-variation logging for full-sequence iterations.
    fn probe(&mut self, ff: &FullForward) -> Result<Vec<VariationRecord>> {
        let mut out = Vec::new();
        let all: Vec<usize> = (0..self.sequence.len()).collect();
        for &layer in &self.cfg.probe_layers {
            for ind in Indicator::ALL {
                let now = match ind {
                    Indicator::Hidden => &ff.hidden[layer],
                    Indicator::Query => &ff.queries[layer],
                    Indicator::Key => &ff.keys[layer],
                    Indicator::Value => &ff.values[layer],
                };
                if let Some(prev) = self.probes.get(&(layer, ind)) {
                    out.push(VariationRecord {
                        layer,
                        indicator: ind,
                        positions: all.clone(),
                        values: skip::variation_terms(now, prev)?,
                    });
                }
                self.probes.insert((layer, ind), now.clone());
            }
        }
        Ok(out)
    }

    /// Forward of a subset of the current block against the cached K/V of
    /// every other position. With `skipping`, the active set is pruned at
    /// each scheduled layer.
    fn forward_block(&mut self, positions: &PositionSet, skipping: bool) -> Result<BlockPass> {
        let model = self.model;
        let cache = self
            .cache
            .as_mut()
            .ok_or_else(|| Error::contract("block forward before cache initialization"))?;
        let tokens: Vec<TokenId> = positions.iter().map(|p| self.sequence[p]).collect();
        let mut x = model.embed(&tokens)?;
        let mut active = positions.clone();
        let mut active_per_layer = Vec::with_capacity(model.config.layers());
        let mut variations = Vec::new();

        for layer in 0..model.config.layers() {
            active_per_layer.push(active.len());
            let p = model.project(layer, &x, active.as_slice(), &mut self.flops)?;
            cache.scatter_update(layer, &active, &p.key, &p.value, None)?;
            let h = model.complete(
                layer,
                &x,
                &p.query,
                cache.keys(layer),
                cache.values(layer),
                &mut self.flops,
            )?;

            let mut next = None;
            if let Some(prev_all) = cache.indicator_cache(layer) {
                let now = match cache.indicator() {
                    Indicator::Hidden => &h,
                    Indicator::Query => &p.query,
                    Indicator::Key => &p.key,
                    Indicator::Value => &p.value,
                };
                if skipping {
                    let prev = prev_all.gather_rows(active.as_slice());
                    let terms = skip::variation_terms(now, &prev)?;
                    let conf: Vec<f32> = active.iter().map(|i| cache.confidences()[i]).collect();
                    let scores = ImportanceVector {
                        positions: active.clone(),
                        scores: skip::blend(&conf, &terms, self.skip.alpha),
                    };
                    variations.push(VariationRecord {
                        layer,
                        indicator: cache.indicator(),
                        positions: active.as_slice().to_vec(),
                        values: terms,
                    });
                    let kept = skip::select_topk(&scores, self.skip.ratio(layer));
                    if kept.len() < active.len() {
                        next = Some(kept);
                    }
                }
                cache.scatter_indicator(layer, &active, now)?;
            }

            match next {
                Some(kept) => {
                    let rows: Vec<usize> = kept
                        .iter()
                        .map(|p| active.rank_of(p).expect("survivors are a subset"))
                        .collect();
                    x = h.gather_rows(&rows);
                    active = kept;
                }
                None => x = h,
            }
        }

        let logits = model.logits(&x, &mut self.flops)?;
        let conf: Vec<f32> = (0..logits.rows())
            .map(|i| cache::confidence(logits.row(i)))
            .collect();
        cache.update_confidence(&active, &conf)?;
        Ok(BlockPass {
            survivors: active,
            logits,
            active_per_layer,
            variations,
        })
    }

    /// Greedy candidates for the masked rows of `rows` inside `block`.
    fn candidates(&self, rows: &PositionSet, logits: &Matrix, block: &PositionSet) -> Vec<Candidate> {
        let last = self.sequence.len() - 1;
        let last_masked = self.is_masked(last);
        let (mask, eos) = (self.mask(), self.model.config.eos_token_id);
        rows.iter()
            .enumerate()
            .filter(|&(_, p)| block.contains(p) && self.is_masked(p))
            .map(|(i, p)| unmask::greedy_candidate(p, logits.row(i), mask, eos, last_masked && p != last))
            .collect()
    }

    /// Masked block position with the highest cached confidence.
    fn fallback_position(&self, block: &PositionSet) -> Result<usize> {
        let cache = self.cache.as_ref().ok_or_else(|| Error::contract("no cache"))?;
        let conf = cache.confidences();
        block
            .iter()
            .filter(|&p| self.is_masked(p))
            .fold(None, |best: Option<usize>, p| match best {
                Some(b) if conf[b] >= conf[p] => Some(b),
                _ => Some(p),
            })
            .ok_or_else(|| Error::contract("fallback requested on a completed block"))
    }

    pub fn into_trace(self) -> GenerationTrace {
        let strategy = self.cfg.strategy;
        GenerationTrace {
            summary: TraceSummary {
                label: strategy.name().to_string(),
                engine_version: ENGINE_VERSION.to_string(),
                model: self.model.config.clone(),
                prompt_len: self.prompt_len,
                total_flops: self.flops.total(),
                iterations: self.iteration,
                unmask_order: self.unmask_order,
                tokens: self.sequence[self.prompt_len..].to_vec(),
                full_confidence: strategy == Strategy::Vanilla,
                per_strategy_config: self.cfg,
            },
            records: self.records,
        }
    }
}

/// Runs a whole generation and returns the output tokens with the trace.
pub fn generate(
    model: &Model,
    prompt: &[TokenId],
    cfg: GenerationConfig,
) -> Result<(Vec<TokenId>, GenerationTrace)> {
    let mut s = DecodeSession::new(model, prompt, cfg)?;
    s.run()?;
    let tokens = s.output().to_vec();
    Ok((tokens, s.into_trace()))
}
