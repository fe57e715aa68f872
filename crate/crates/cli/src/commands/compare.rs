use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use esdllm::analysis;
use esdllm::cache::RefreshPolicy;
use esdllm::decoder::{generate, GenerationConfig, GenerationTrace, Strategy};
use esdllm::model::ModelConfig;
use rayon::prelude::*;
use serde::Deserialize;

use crate::manifest::{sha256_tokens, LabeledConfig, RunManifest};
use crate::options::{load_model, thread_pool, PromptArgs};
use crate::Outcome;

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// JSON file: a list of labeled configurations, or an object with
    /// `configs` and optional `equivalences` (pairs of labels).
    #[arg(long)]
    pub configs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    configs: Vec<LabeledConfig>,
    #[serde(default)]
    equivalences: Vec<(String, String)>,
}

fn parse_config_file(body: &str) -> serde_json::Result<ConfigFile> {
    let v: serde_json::Value = serde_json::from_str(body)?;
    if v.is_array() {
        Ok(ConfigFile {
            configs: serde_json::from_value(v)?,
            equivalences: Vec::new(),
        })
    } else {
        serde_json::from_value(v)
    }
}

fn same_lengths(a: &GenerationConfig, b: &GenerationConfig) -> bool {
    a.gen_length == b.gen_length
        && a.block_length == b.block_length
        && a.tokens_per_step == b.tokens_per_step
        && a.parallel_threshold == b.parallel_threshold
}

/// The baseline an early-skip configuration must reproduce exactly, if its
/// schedule skips nothing and its refresh periods mirror that baseline.
fn implied_baseline(c: &GenerationConfig, model: &ModelConfig) -> Option<Strategy> {
    if c.strategy != Strategy::EsDllm || !c.effective_skip(model.layers()).is_noop() {
        return None;
    }
    let r = c.effective_refresh();
    if r == RefreshPolicy::dualcache(c.block_length) {
        Some(Strategy::Dualcache)
    } else if r.context_period == 1 {
        Some(Strategy::Vanilla)
    } else {
        None
    }
}

fn equivalence_pairs(entries: &[LabeledConfig], explicit: &[(String, String)], model: &ModelConfig) -> Vec<(String, String)> {
    let mut pairs: BTreeSet<(String, String)> = explicit.iter().cloned().collect();
    for e in entries {
        if let Some(base) = implied_baseline(&e.config, model) {
            for b in entries
                .iter()
                .filter(|b| b.config.strategy == base && same_lengths(&b.config, &e.config))
            {
                pairs.insert((e.label.clone(), b.label.clone()));
            }
        }
    }
    pairs.into_iter().collect()
}

fn check_labels(entries: &[LabeledConfig]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for e in entries {
        let ok = !e.label.is_empty()
            && e
                .label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
        if !ok {
            bail!("label '{}' must be non-empty and use only [A-Za-z0-9_.-]", e.label);
        }
        if !seen.insert(e.label.as_str()) {
            bail!("duplicate label '{}'", e.label);
        }
    }
    Ok(())
}

pub fn run(args: Args) -> Result<Outcome> {
    let loaded = load_model(&args.model)?;
    let mc = &loaded.model.config;
    let prompt = args.prompt.resolve(mc)?;
    let body = std::fs::read_to_string(&args.configs)
        .with_context(|| format!("reading {}", args.configs.display()))?;
    let ConfigFile {
        configs: entries,
        equivalences: explicit,
    } = parse_config_file(&body).with_context(|| format!("parsing configs {}", args.configs.display()))?;
    if entries.is_empty() {
        bail!("no configurations in {}", args.configs.display());
    }
    check_labels(&entries)?;
    for (a, b) in &explicit {
        for l in [a, b] {
            if !entries.iter().any(|e| &e.label == l) {
                bail!("equivalence refers to unknown label '{l}'");
            }
        }
    }
    for e in &entries {
        e.config
            .validate(mc)
            .with_context(|| format!("configuration '{}'", e.label))?;
    }
    std::fs::create_dir_all(&args.out)?;

    let start = Instant::now();
    let model = &loaded.model;
    let results: Vec<Result<GenerationTrace>> = thread_pool()?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let (_, mut t) = generate(model, &prompt, e.config.clone())
                    .with_context(|| format!("session '{}'", e.label))?;
                t.summary.label = e.label.clone();
                Ok(t)
            })
            .collect()
    });
    let elapsed = start.elapsed().as_secs_f64() * 1e3;

    let mut manifest = RunManifest::new("compare");
    manifest.model_path = Some(loaded.path.clone());
    manifest.model_sha256 = Some(loaded.sha256.clone());
    manifest.model = Some(mc.clone());
    manifest.seed = args.prompt.seed;
    manifest.prompt = prompt.clone();
    manifest.configs = entries.clone();
    manifest.timings_ms.insert("sessions".into(), elapsed);

    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(t) => {
                let path = args.out.join(format!("{}.jsonl", e.label));
                let summary = t.save(&path)?;
                manifest.outputs.extend([path, summary]);
                traces.push(t);
            }
            Err(err) => failures.push(format!("{err:#}")),
        }
    }

    let (flop_rows, _) = analysis::flop_report_all(&traces)?;
    let mut csv = String::from("config,iterations,total_flops,flop_ratio_vs_dualcache,tokens_hash\n");
    for t in &traces {
        let ratio = flop_rows
            .iter()
            .find(|r| r.config == t.summary.label)
            .map(|r| r.measured.to_string())
            .unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{},{}",
            t.summary.label,
            t.summary.iterations,
            t.summary.total_flops,
            ratio,
            sha256_tokens(&t.summary.tokens)
        )?;
    }
    let compare_csv = args.out.join("compare.csv");
    std::fs::write(&compare_csv, csv)?;
    let flops_path = args.out.join("flops.csv");
    std::fs::write(&flops_path, analysis::flops_csv(&flop_rows))?;
    manifest.outputs.extend([compare_csv, flops_path]);

    let mut report = String::new();
    let mut all_pass = true;
    for (a, b) in equivalence_pairs(&entries, &explicit, mc) {
        let find = |l: &str| traces.iter().find(|t| t.summary.label == l);
        let verdict = match (find(&a), find(&b)) {
            (Some(x), Some(y)) if x.summary.tokens == y.summary.tokens => "PASS",
            (Some(_), Some(_)) => "FAIL",
            _ => "FAIL (missing trace)",
        };
        all_pass &= verdict == "PASS";
        writeln!(report, "{verdict} {a} == {b}")?;
    }
    print!("{report}");
    let report_path = args.out.join("equivalence.txt");
    std::fs::write(&report_path, &report)?;
    manifest.outputs.push(report_path);

    let manifest_path = args.out.join("compare.manifest.json");
    manifest.save(&manifest_path)?;

    for t in &traces {
        println!(
            "{}: iterations {} total_flops {}",
            t.summary.label, t.summary.iterations, t.summary.total_flops
        );
    }
    if !failures.is_empty() {
        bail!("{} session(s) failed:\n{}", failures.len(), failures.join("\n"));
    }
    Ok(if all_pass {
        Outcome::Ok
    } else {
        Outcome::EquivalenceFailed
    })
}
