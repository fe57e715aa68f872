//! Generation-dynamics statistics computed from traces: how much confidence
//! and intermediate tensors move between iterations, how those movements
//! correlate, and how much each strategy spends in FLOPs.
//!
//! CSV schemas (all with a header row):
//!
//! | file | columns |
//! |------|---------|
//! | `conf_variation.csv` | `iteration,position,delta` |
//! | `conf_histogram.csv` | `lower,upper,count` |
//! | `exceedance.csv` | `iteration,fraction` |
//! | `tensor_variation_L{l}.csv` | `indicator,iteration,position,variation` |
//! | `correlation.csv` | `layer,indicator,samples,r` (`r` empty when undefined) |
//! | `flops.csv` | `config,measured,closed_form,total_measured` |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::cache::RefreshAction;
use crate::decoder::{GenerationTrace, Strategy};
use crate::skip::Indicator;
use crate::{Error, Result};

pub const HIST_BINS: usize = 50;
pub const HIST_MIN: f64 = 1e-6;
pub const HIST_MAX: f64 = 1.0;
pub const DEFAULT_EXCEEDANCE_THRESHOLD: f64 = 0.05;

/// 50 log-spaced bins over `[1e-6, 1]`. Values below `1e-6` (exact zeros
/// included) go to `underflow`, values above 1 to `overflow`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn log_spaced<I: IntoIterator<Item = f64>>(values: I) -> Self {
        let (lo, hi) = (HIST_MIN.log10(), HIST_MAX.log10());
        let edges = (0..=HIST_BINS)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / HIST_BINS as f64))
            .collect();
        let mut h = Self {
            edges,
            counts: vec![0; HIST_BINS],
            underflow: 0,
            overflow: 0,
        };
        for v in values {
            if v < HIST_MIN {
                h.underflow += 1;
            } else if v > HIST_MAX {
                h.overflow += 1;
            } else {
                let idx = ((v.log10() - lo) / (hi - lo) * HIST_BINS as f64).floor() as usize;
                h.counts[idx.min(HIST_BINS - 1)] += 1;
            }
        }
        h
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lower,upper,count\n");
        writeln!(s, "0,{},{}", HIST_MIN, self.underflow).unwrap();
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(s, "{},{},{}", self.edges[i], self.edges[i + 1], c).unwrap();
        }
        writeln!(s, "{},inf,{}", HIST_MAX, self.overflow).unwrap();
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationSample {
    pub iteration: u64,
    pub position: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceVariation {
    pub threshold: f64,
    /// `|c(t) − c(t−1)|` per output position, in trace order.
    pub deltas: Vec<VariationSample>,
    pub histogram: Histogram,
    /// Fraction of deltas strictly above `threshold`, per iteration.
    pub exceedance: Vec<(u64, f64)>,
}

fn conf_map(positions: &[usize], conf: &[f32]) -> BTreeMap<usize, f32> {
    positions.iter().copied().zip(conf.iter().copied()).collect()
}

/// Confidence deltas between consecutive iterations. Only traces that logged
/// every position every iteration (vanilla) are accepted.
pub fn confidence_variation(traces: &[GenerationTrace], threshold: f64) -> Result<ConfidenceVariation> {
    if traces.is_empty() {
        return Err(Error::input("no traces"));
    }
    let mut deltas = Vec::new();
    let mut per_iter: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for t in traces {
        if !t.summary.full_confidence {
            return Err(Error::input(format!(
                "trace '{}' ({}) lacks full-confidence logging; use the vanilla strategy",
                t.summary.label,
                t.strategy().name()
            )));
        }
        let out = t.output_range();
        for pair in t.records.windows(2) {
            let prev = conf_map(&pair[0].conf_positions, &pair[0].confidences);
            let it = pair[1].iteration;
            for (&p, &c) in pair[1].conf_positions.iter().zip(&pair[1].confidences) {
                if !out.contains(&p) {
                    continue;
                }
                if let Some(&c0) = prev.get(&p) {
                    let d = (c as f64 - c0 as f64).abs();
                    let e = per_iter.entry(it).or_default();
                    e.0 += 1;
                    e.1 += u64::from(d > threshold);
                    deltas.push(VariationSample {
                        iteration: it,
                        position: p,
                        value: d,
                    });
                }
            }
        }
    }
    Ok(ConfidenceVariation {
        threshold,
        histogram: Histogram::log_spaced(deltas.iter().map(|d| d.value)),
        deltas,
        exceedance: per_iter
            .into_iter()
            .map(|(it, (n, k))| (it, k as f64 / n as f64))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorVariation {
    pub layer: usize,
    pub indicator: Indicator,
    /// Raw variation terms for every logged position.
    pub samples: Vec<VariationSample>,
    /// Output positions only, values above 1 clipped to 1.
    pub histogram: Histogram,
}

/// Variation terms logged for `indicator` at `layer`.
pub fn tensor_variation(traces: &[GenerationTrace], layer: usize, indicator: Indicator) -> Result<TensorVariation> {
    let mut samples = Vec::new();
    let mut clipped = Vec::new();
    let mut found = false;
    for t in traces {
        let out = t.output_range();
        for r in &t.records {
            for v in r
                .variations
                .iter()
                .filter(|v| v.layer == layer && v.indicator == indicator)
            {
                found = true;
                for (&p, &x) in v.positions.iter().zip(&v.values) {
                    samples.push(VariationSample {
                        iteration: r.iteration,
                        position: p,
                        value: x,
                    });
                    if out.contains(&p) {
                        clipped.push(x.min(1.0));
                    }
                }
            }
        }
    }
    if !found {
        return Err(Error::input(format!(
            "layer {layer} ({}) was not logged in any trace",
            indicator.name()
        )));
    }
    Ok(TensorVariation {
        layer,
        indicator,
        samples,
        histogram: Histogram::log_spaced(clipped),
    })
}

/// Every (layer, indicator) pair with logged variation.
pub fn logged_layers(traces: &[GenerationTrace]) -> BTreeSet<(usize, Indicator)> {
    traces
        .iter()
        .flat_map(|t| &t.records)
        .flat_map(|r| &r.variations)
        .map(|v| (v.layer, v.indicator))
        .collect()
}

/// Pearson correlation coefficient (two-pass). `None` when fewer than two
/// samples or either variable has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    pub layer: usize,
    pub indicator: Indicator,
    pub samples: usize,
    pub r: Option<f64>,
}

/// Paired (variation term, |max-probability change|) samples for positions
/// that were still masked when the iteration started.
pub fn correlation_pairs(
    traces: &[GenerationTrace],
    layer: usize,
    indicator: Indicator,
) -> (Vec<f64>, Vec<f64>) {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for t in traces {
        let out = t.output_range();
        let unmasked_at = t.unmask_iterations();
        let mut last_conf: BTreeMap<usize, f32> = BTreeMap::new();
        for r in &t.records {
            let now = conf_map(&r.conf_positions, &r.confidences);
            for v in r
                .variations
                .iter()
                .filter(|v| v.layer == layer && v.indicator == indicator)
            {
                for (&p, &x) in v.positions.iter().zip(&v.values) {
                    if !out.contains(&p) {
                        continue;
                    }
                    let masked = unmasked_at[p - out.start].is_none_or(|u| u >= r.iteration);
                    if let (true, Some(&c1), Some(&c0)) = (masked, now.get(&p), last_conf.get(&p)) {
                        xs.push(x);
                        ys.push((c1 as f64 - c0 as f64).abs());
                    }
                }
            }
            last_conf.extend(now);
        }
    }
    (xs, ys)
}

/// Pearson r between variation and confidence change, per logged
/// (layer, indicator). `layers` empty means every logged layer.
pub fn variation_confidence_correlation(
    traces: &[GenerationTrace],
    layers: &[usize],
) -> Result<Vec<CorrelationRow>> {
    let logged = logged_layers(traces);
    let wanted: Vec<(usize, Indicator)> = logged
        .iter()
        .copied()
        .filter(|(l, _)| layers.is_empty() || layers.contains(l))
        .collect();
    if let Some(l) = layers.iter().find(|l| !logged.iter().any(|(x, _)| x == *l)) {
        return Err(Error::input(format!("layer {l} was not logged in any trace")));
    }
    Ok(wanted
        .into_iter()
        .map(|(layer, indicator)| {
            let (xs, ys) = correlation_pairs(traces, layer, indicator);
            CorrelationRow {
                layer,
                indicator,
                samples: xs.len(),
                r: pearson(&xs, &ys),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopRow {
    pub config: String,
    /// Mean steady-state layer FLOPs per iteration relative to DualCache.
    pub measured: f64,
    /// Prediction from the skip schedule, or sequence/block length when every
    /// iteration is a full-sequence forward.
    pub closed_form: f64,
    /// Whole-run FLOPs relative to DualCache.
    pub total_measured: f64,
}

/// Mean layer FLOPs over the iterations that represent a strategy's steady
/// state: every iteration for vanilla, block iterations for DualCache and
/// non-refresh, non-fallback iterations for early skipping.
pub fn steady_state_layer_flops(trace: &GenerationTrace) -> f64 {
    let pick = |f: &dyn Fn(&crate::decoder::IterationRecord) -> bool| -> Vec<u64> {
        trace.records.iter().filter(|r| f(r)).map(|r| r.layer_flops).collect()
    };
    let mut sel = match trace.strategy() {
        Strategy::Vanilla => pick(&|_| true),
        Strategy::Dualcache => pick(&|r| r.action == RefreshAction::BlockRefresh),
        Strategy::EsDllm => pick(&|r| r.action == RefreshAction::None && !r.fallback),
    };
    if sel.is_empty() {
        sel = pick(&|r| r.action != RefreshAction::ContextRefresh);
    }
    if sel.is_empty() {
        sel = pick(&|_| true);
    }
    if sel.is_empty() {
        return 0.0;
    }
    sel.iter().sum::<u64>() as f64 / sel.len() as f64
}

fn same_shape(a: &GenerationTrace, b: &GenerationTrace) -> bool {
    let (ca, cb) = (&a.summary.per_strategy_config, &b.summary.per_strategy_config);
    a.summary.model == b.summary.model
        && a.summary.prompt_len == b.summary.prompt_len
        && ca.gen_length == cb.gen_length
        && ca.block_length == cb.block_length
}

pub fn closed_form_proportion(trace: &GenerationTrace) -> f64 {
    let cfg = &trace.summary.per_strategy_config;
    match cfg.strategy {
        Strategy::Vanilla => (trace.summary.prompt_len + cfg.gen_length) as f64 / cfg.block_length as f64,
        Strategy::Dualcache => 1.0,
        Strategy::EsDllm => {
            let refresh = cfg.effective_refresh();
            if refresh.context_period == 1 {
                (trace.summary.prompt_len + cfg.gen_length) as f64 / cfg.block_length as f64
            } else if refresh.block_period == 1 {
                1.0
            } else {
                cfg.effective_skip(trace.summary.model.layers())
                    .closed_form_proportion(trace.summary.model.layers())
            }
        }
    }
}

/// FLOP proportions of `traces` against a DualCache `baseline` of the same
/// model and lengths.
pub fn flop_report(baseline: &GenerationTrace, traces: &[&GenerationTrace]) -> Result<Vec<FlopRow>> {
    if baseline.strategy() != Strategy::Dualcache {
        return Err(Error::input("FLOP baseline must be a dualcache trace"));
    }
    let base = steady_state_layer_flops(baseline);
    if base == 0.0 {
        return Err(Error::input("baseline trace has no iterations"));
    }
    traces
        .iter()
        .map(|t| {
            if !same_shape(t, baseline) {
                return Err(Error::input(format!(
                    "trace '{}' differs in model or lengths from baseline '{}'",
                    t.summary.label, baseline.summary.label
                )));
            }
            Ok(FlopRow {
                config: t.summary.label.clone(),
                measured: steady_state_layer_flops(t) / base,
                closed_form: closed_form_proportion(t),
                total_measured: t.summary.total_flops as f64 / baseline.summary.total_flops as f64,
            })
        })
        .collect()
}

/// Groups traces by shape and reports each against the first DualCache trace
/// of its group. Traces without such a baseline are returned by label.
pub fn flop_report_all(traces: &[GenerationTrace]) -> Result<(Vec<FlopRow>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    for t in traces {
        match traces
            .iter()
            .find(|b| b.strategy() == Strategy::Dualcache && same_shape(b, t))
        {
            Some(b) => rows.extend(flop_report(b, &[t])?),
            None => unmatched.push(t.summary.label.clone()),
        }
    }
    Ok((rows, unmatched))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn conf_variation_csv(cv: &ConfidenceVariation) -> String {
    let mut s = String::from("iteration,position,delta\n");
    for d in &cv.deltas {
        writeln!(s, "{},{},{}", d.iteration, d.position, d.value).unwrap();
    }
    s
}

pub fn exceedance_csv(cv: &ConfidenceVariation) -> String {
    let mut s = String::from("iteration,fraction\n");
    for (it, f) in &cv.exceedance {
        writeln!(s, "{it},{f}").unwrap();
    }
    s
}

/// Rows for every indicator logged at one layer.
pub fn tensor_variation_csv(tvs: &[TensorVariation]) -> String {
    let mut s = String::from("indicator,iteration,position,variation\n");
    for tv in tvs {
        for d in &tv.samples {
            writeln!(s, "{},{},{},{}", tv.indicator.name(), d.iteration, d.position, d.value).unwrap();
        }
    }
    s
}

pub fn correlation_csv(rows: &[CorrelationRow]) -> String {
    let mut s = String::from("layer,indicator,samples,r\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.layer, r.indicator.name(), r.samples, fmt_opt(r.r)).unwrap();
    }
    s
}

pub fn flops_csv(rows: &[FlopRow]) -> String {
    let mut s = String::from("config,measured,closed_form,total_measured\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.config, r.measured, r.closed_form, r.total_measured).unwrap();
    }
    s
}

/// Output of [`write_all`]: paths written, in order.
pub type Written = Vec<std::path::PathBuf>;

/// Runs every analysis over `traces` and writes the CSVs into `dir`.
pub fn write_all(traces: &[GenerationTrace], dir: &Path, threshold: f64) -> Result<Written> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };

    let full: Vec<GenerationTrace> = traces
        .iter()
        .filter(|t| t.summary.full_confidence)
        .cloned()
        .collect();
    let cv = if full.is_empty() {
        ConfidenceVariation {
            threshold,
            deltas: Vec::new(),
            histogram: Histogram::log_spaced(std::iter::empty()),
            exceedance: Vec::new(),
        }
    } else {
        confidence_variation(&full, threshold)?
    };
    put("conf_variation.csv".into(), conf_variation_csv(&cv))?;
    put("conf_histogram.csv".into(), cv.histogram.to_csv())?;
    put("exceedance.csv".into(), exceedance_csv(&cv))?;

    let logged = logged_layers(traces);
    let layers: BTreeSet<usize> = logged.iter().map(|(l, _)| *l).collect();
    for &layer in &layers {
        let tvs = logged
            .iter()
            .filter(|(l, _)| *l == layer)
            .map(|&(l, ind)| tensor_variation(traces, l, ind))
            .collect::<Result<Vec<_>>>()?;
        put(format!("tensor_variation_L{layer}.csv"), tensor_variation_csv(&tvs))?;
    }

    let corr = variation_confidence_correlation(traces, &[])?;
    put("correlation.csv".into(), correlation_csv(&corr))?;

    let (rows, _) = flop_report_all(traces)?;
    put("flops.csv".into(), flops_csv(&rows))?;
    Ok(written)
}
