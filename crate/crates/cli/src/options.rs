use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use esdllm::cache::RefreshPolicy;
use esdllm::decoder::{GenerationConfig, Strategy};
use esdllm::model::{Model, ModelConfig, TokenId};
use esdllm::skip::{Indicator, SkipSchedule};

use crate::manifest::sha256_file;

#[derive(Args, Debug, Clone)]
pub struct PromptArgs {
    /// Comma-separated prompt token ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "random_prompt")]
    pub prompt_tokens: Option<Vec<TokenId>>,
    /// Draw this many prompt ids from the seeded generator instead.
    #[arg(long)]
    pub random_prompt: Option<usize>,
    /// Seed for `--random-prompt` (recorded in the manifest).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl PromptArgs {
    pub fn resolve(&self, cfg: &ModelConfig) -> Result<Vec<TokenId>> {
        match (&self.prompt_tokens, self.random_prompt) {
            (Some(t), _) => Ok(t.clone()),
            (None, Some(n)) => Ok(cfg.random_prompt(n, self.seed)),
            (None, None) => bail!("one of --prompt-tokens or --random-prompt is required"),
        }
    }
}

pub struct LoadedModel {
    pub model: Model,
    pub path: PathBuf,
    pub sha256: String,
}

pub fn load_model(path: &PathBuf) -> Result<LoadedModel> {
    let model = Model::load(path).with_context(|| format!("loading model {}", path.display()))?;
    Ok(LoadedModel {
        model,
        sha256: sha256_file(path)?,
        path: path.clone(),
    })
}

/// `ctx,blk`; either side may be `inf`.
pub fn parse_refresh(s: &str) -> Result<RefreshPolicy> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [ctx, blk] = parts.as_slice() else {
        bail!("--refresh expects 'context,block', got '{s}'");
    };
    let period = |p: &str| -> Result<u64> {
        if p.eq_ignore_ascii_case("inf") {
            Ok(RefreshPolicy::NEVER)
        } else {
            p.parse().with_context(|| format!("bad refresh period '{p}'"))
        }
    };
    Ok(RefreshPolicy {
        context_period: period(ctx)?,
        block_period: period(blk)?,
    })
}

/// Layer → ratio map as JSON object, e.g. `{"4":0.5,"8":0.5}`.
pub fn parse_skip_ratios(s: &str) -> Result<BTreeMap<usize, f64>> {
    serde_json::from_str(s).with_context(|| format!("--skip expects a JSON object of layer: ratio, got '{s}'"))
}

#[derive(Args, Debug, Clone)]
pub struct DecodeArgs {
    /// vanilla, dualcache or es_dllm.
    #[arg(long)]
    pub strategy: Strategy,
    #[arg(long)]
    pub gen_len: usize,
    #[arg(long)]
    pub block_len: usize,
    /// Skip ratios per layer as JSON (es_dllm only), e.g. '{"4":0.5,"8":0.5}'.
    #[arg(long)]
    pub skip: Option<String>,
    /// Variation indicator for the importance score (es_dllm only).
    #[arg(long)]
    pub indicator: Option<Indicator>,
    /// Weight of previous confidence in the importance score (es_dllm only).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Refresh periods 'context,block' (es_dllm only); 'inf' disables one.
    #[arg(long)]
    pub refresh: Option<String>,
    /// Unmask every candidate above this confidence each iteration.
    #[arg(long)]
    pub parallel_threshold: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub tokens_per_step: usize,
    /// Layers whose tensor variation is logged (vanilla only).
    #[arg(long, value_delimiter = ',')]
    pub probe_layers: Vec<usize>,
}

impl DecodeArgs {
    pub fn to_config(&self, model: &ModelConfig, seed: u64) -> Result<GenerationConfig> {
        let is_es = self.strategy == Strategy::EsDllm;
        if !is_es && (self.skip.is_some() || self.indicator.is_some() || self.alpha.is_some() || self.refresh.is_some()) {
            bail!(
                "--skip, --indicator, --alpha and --refresh only apply to es_dllm, not {}",
                self.strategy.name()
            );
        }
        let mut cfg = GenerationConfig::new(self.strategy, self.gen_len, self.block_len);
        cfg.tokens_per_step = self.tokens_per_step;
        cfg.parallel_threshold = self.parallel_threshold;
        cfg.probe_layers = self.probe_layers.clone();
        cfg.seed = seed;
        if is_es {
            let mut skip = match &self.skip {
                Some(s) => SkipSchedule {
                    ratios: parse_skip_ratios(s)?,
                    ..SkipSchedule::none()
                },
                None => SkipSchedule::default_for(model.layers()),
            };
            if let Some(i) = self.indicator {
                skip.indicator = i;
            }
            if let Some(a) = self.alpha {
                skip.alpha = a;
            }
            cfg.skip = Some(skip);
            cfg.refresh = Some(match &self.refresh {
                Some(r) => parse_refresh(r)?,
                None => cfg.effective_refresh(),
            });
        }
        cfg.validate(model)?;
        Ok(cfg)
    }
}

/// Rayon pool capped by `ESDLLM_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("ESDLLM_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("ESDLLM_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            bail!("ESDLLM_THREADS must be at least 1");
        }
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}
