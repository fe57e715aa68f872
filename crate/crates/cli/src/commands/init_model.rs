use std::path::PathBuf;

use anyhow::{Context, Result};
use esdllm::model::{Model, ModelConfig};

use crate::manifest::{manifest_path_for, sha256_file, RunManifest};
use crate::Outcome;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Model configuration JSON; missing fields take the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<Outcome> {
    let config: ModelConfig = match &args.config {
        Some(p) => {
            let body = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&body).with_context(|| format!("parsing model config {}", p.display()))?
        }
        None => ModelConfig::default(),
    };
    let model = Model::init_toy(config, args.seed)?;
    model.save(&args.out)?;
    let hash = sha256_file(&args.out)?;
    println!("parameters: {}", model.param_count());
    println!("sha256: {hash}");
    println!("wrote {}", args.out.display());

    let mut m = RunManifest::new("init-model");
    m.model_path = Some(args.out.clone());
    m.model_sha256 = Some(hash);
    m.model = Some(model.config.clone());
    m.seed = args.seed;
    m.outputs = vec![args.out.clone()];
    m.save(&manifest_path_for(&args.out))?;
    Ok(Outcome::Ok)
}
