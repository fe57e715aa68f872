use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Result};
use esdllm::decoder::{summary_path, DecodeSession};
use esdllm::model::TokenId;

use crate::manifest::{manifest_path_for, sha256_tokens, LabeledConfig, RunManifest};
use crate::options::{load_model, DecodeArgs, LoadedModel, PromptArgs};
use crate::Outcome;

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Trace output (JSON lines); a summary and a manifest are written beside it.
    #[arg(long)]
    pub trace: PathBuf,
    /// Label stored in the trace summary (defaults to the strategy name).
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(clap::Args, Debug)]
pub struct ReplayArgs {
    /// Manifest written by `generate`.
    pub manifest: PathBuf,
    /// Where to write the new trace.
    #[arg(long)]
    pub trace: PathBuf,
    /// Use this weight file instead of the recorded path (hash must match).
    #[arg(long)]
    pub model: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<Outcome> {
    let loaded = load_model(&args.model)?;
    let prompt = args.prompt.resolve(&loaded.model.config)?;
    let config = args.decode.to_config(&loaded.model.config, args.prompt.seed)?;
    let label = args.label.unwrap_or_else(|| config.strategy.name().to_string());
    execute(&loaded, &prompt, LabeledConfig { label, config }, &args.trace)
}

pub fn replay(args: ReplayArgs) -> Result<Outcome> {
    let recorded = RunManifest::load(&args.manifest)?;
    if recorded.command != "generate" {
        bail!("manifest records '{}', not a generate run", recorded.command);
    }
    let Some(path) = args.model.or(recorded.model_path.clone()) else {
        bail!("manifest has no model path; pass --model");
    };
    let loaded = load_model(&path)?;
    if recorded.model_sha256.as_deref() != Some(loaded.sha256.as_str()) {
        bail!("weight file {} does not match the recorded hash", path.display());
    }
    let [labeled] = recorded.configs.as_slice() else {
        bail!("generate manifest must hold exactly one configuration");
    };
    execute(&loaded, &recorded.prompt, labeled.clone(), &args.trace)
}

fn execute(loaded: &LoadedModel, prompt: &[TokenId], labeled: LabeledConfig, trace_path: &Path) -> Result<Outcome> {
    let start = Instant::now();
    let mut session = DecodeSession::new(&loaded.model, prompt, labeled.config.clone())?;
    session.run()?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let mut trace = session.into_trace();
    trace.summary.label = labeled.label.clone();
    trace.save(trace_path)?;

    let s = &trace.summary;
    let tokens: Vec<String> = s.tokens.iter().map(u32::to_string).collect();
    println!("tokens: {}", tokens.join(","));
    println!("tokens_sha256: {}", sha256_tokens(&s.tokens));
    println!("iterations: {}", s.iterations);
    println!("total_flops: {}", s.total_flops);

    let mut m = RunManifest::new("generate");
    m.model_path = Some(loaded.path.clone());
    m.model_sha256 = Some(loaded.sha256.clone());
    m.model = Some(loaded.model.config.clone());
    m.seed = labeled.config.seed;
    m.prompt = prompt.to_vec();
    m.configs = vec![labeled];
    m.outputs = vec![trace_path.to_path_buf(), summary_path(trace_path)];
    m.timings_ms.insert("generate".into(), elapsed);
    m.save(&manifest_path_for(trace_path))?;
    Ok(Outcome::Ok)
}
