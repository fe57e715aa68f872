use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use esdllm::analysis;
use esdllm::decoder::GenerationTrace;

use crate::manifest::RunManifest;
use crate::Outcome;

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Glob matching trace files (`.jsonl`); summaries are found beside them.
    #[arg(long)]
    pub traces: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Confidence-change threshold for the exceedance series.
    #[arg(long, default_value_t = analysis::DEFAULT_EXCEEDANCE_THRESHOLD)]
    pub threshold: f64,
}

pub fn run(args: Args) -> Result<Outcome> {
    let mut paths: Vec<PathBuf> = glob::glob(&args.traces)
        .with_context(|| format!("bad glob '{}'", args.traces))?
        .collect::<Result<_, _>>()?;
    paths.retain(|p| {
        let name = p.to_string_lossy();
        !(name.ends_with(".summary.json") || name.ends_with(".manifest.json"))
    });
    paths.sort();
    if paths.is_empty() {
        bail!("no trace files match '{}'", args.traces);
    }
    let traces = paths
        .iter()
        .map(|p| GenerationTrace::load(p).with_context(|| format!("loading trace {}", p.display())))
        .collect::<Result<Vec<_>>>()?;

    let written = analysis::write_all(&traces, &args.out, args.threshold)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    let mut m = RunManifest::new("analyze");
    m.outputs = written;
    m.notes.insert("inputs".into(), paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","));
    m.notes.insert("threshold".into(), args.threshold.to_string());
    m.notes.insert(
        "probability_change".into(),
        "absolute change in max softmax probability between a position's consecutive logged iterations".into(),
    );
    m.notes.insert(
        "histogram".into(),
        "50 log-spaced bins over [1e-6, 1]; underflow bin below 1e-6 including zeros; overflow above 1".into(),
    );
    m.save(&args.out.join("analyze.manifest.json"))?;
    Ok(Outcome::Ok)
}
