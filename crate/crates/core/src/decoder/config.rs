use serde::{Deserialize, Serialize};

use crate::cache::RefreshPolicy;
use crate::model::ModelConfig;
use crate::skip::SkipSchedule;
use crate::{Error, Result};

pub const DEFAULT_BLOCK_PERIOD: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Full-sequence recomputation every iteration.
    Vanilla,
    /// Out-of-block K/V cached at block boundaries; block recomputed each iteration.
    Dualcache,
    /// DualCache plus importance-driven early skipping and periodic refresh.
    EsDllm,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Dualcache => "dualcache",
            Self::EsDllm => "es_dllm",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "dualcache" => Ok(Self::Dualcache),
            "es_dllm" | "es-dllm" | "es" => Ok(Self::EsDllm),
            _ => Err(Error::config(format!("unknown strategy '{s}'"))),
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub gen_length: usize,
    pub block_length: usize,
    #[serde(default = "one")]
    pub tokens_per_step: usize,
    /// es_dllm only; absent means the default schedule for the model depth.
    #[serde(default)]
    pub skip: Option<SkipSchedule>,
    /// es_dllm only; absent means see [`GenerationConfig::effective_refresh`].
    #[serde(default)]
    pub refresh: Option<RefreshPolicy>,
    /// Confidence-aware parallel decoding; overrides `tokens_per_step`.
    #[serde(default)]
    pub parallel_threshold: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Layers whose hidden/query/key/value variation is logged on every
    /// full-sequence iteration (vanilla only).
    #[serde(default)]
    pub probe_layers: Vec<usize>,
}

impl GenerationConfig {
    pub fn new(strategy: Strategy, gen_length: usize, block_length: usize) -> Self {
        Self {
            strategy,
            gen_length,
            block_length,
            tokens_per_step: 1,
            skip: None,
            refresh: None,
            parallel_threshold: None,
            seed: 0,
            probe_layers: Vec::new(),
        }
    }

    pub fn with_skip(mut self, skip: SkipSchedule) -> Self {
        self.skip = Some(skip);
        self
    }

    pub fn with_refresh(mut self, context_period: u64, block_period: u64) -> Self {
        self.refresh = Some(RefreshPolicy {
            context_period,
            block_period,
        });
        self
    }

    pub fn with_parallel_threshold(mut self, tau: f64) -> Self {
        self.parallel_threshold = Some(tau);
        self
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.gen_length == 0 || self.block_length == 0 {
            return Err(Error::config("gen_length and block_length must be positive"));
        }
        if !self.gen_length.is_multiple_of(self.block_length) {
            return Err(Error::config(format!(
                "gen_length {} not divisible by block_length {}",
                self.gen_length, self.block_length
            )));
        }
        if self.tokens_per_step == 0 {
            return Err(Error::config("tokens_per_step must be at least 1"));
        }
        if let Some(tau) = self.parallel_threshold {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::config(format!("parallel threshold {tau} not in (0, 1]")));
            }
        }
        if self.strategy != Strategy::EsDllm && (self.skip.is_some() || self.refresh.is_some()) {
            return Err(Error::config(format!(
                "skip schedule and refresh policy only apply to es_dllm, not {}",
                self.strategy.name()
            )));
        }
        if let Some(s) = &self.skip {
            s.validate(model.layers())?;
        }
        if let Some(r) = &self.refresh {
            r.validate()?;
        }
        if !self.probe_layers.is_empty() && self.strategy != Strategy::Vanilla {
            return Err(Error::config("probe layers require the vanilla strategy"));
        }
        if let Some(&l) = self.probe_layers.iter().find(|&&l| l >= model.layers()) {
            return Err(Error::config(format!("probe layer {l} out of range")));
        }
        Ok(())
    }

    pub fn effective_skip(&self, num_layers: usize) -> SkipSchedule {
        match (&self.skip, self.strategy) {
            (Some(s), _) => s.clone(),
            (None, Strategy::EsDllm) => SkipSchedule::default_for(num_layers),
            (None, _) => SkipSchedule::none(),
        }
    }

    /// Explicit periods if given. Otherwise DualCache's implicit schedule for
    /// the cached baseline, and a context refresh per block with a block
    /// refresh every [`DEFAULT_BLOCK_PERIOD`] iterations for early skipping.
    pub fn effective_refresh(&self) -> RefreshPolicy {
        self.refresh.unwrap_or_else(|| match self.strategy {
            Strategy::EsDllm => RefreshPolicy {
                context_period: self.block_length as u64,
                block_period: DEFAULT_BLOCK_PERIOD,
            },
            _ => RefreshPolicy::dualcache(self.block_length),
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.gen_length / self.block_length
    }
}
