//! The generate / run / eval subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use linkreg_core::datagen::{self, BuiltinExperiment, GenSpec};
use linkreg_core::eval::compute_metrics_from_pairs;
use linkreg_core::partition::RecordId;
use linkreg_core::sampler::{self, IterationSample, Mode, PosteriorSamples};

use crate::config::RunConfig;
use crate::formats::{self, Histogram, Schema, SchemaFeature};

/// Errors that should exit with the usage/config code rather than the
/// runtime code.
#[derive(Debug)]
pub struct UsageError(pub anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(err: anyhow::Error) -> Result<T> {
    Err(anyhow::Error::new(UsageError(err)))
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub struct GenerateArgs {
    pub experiment: Option<String>,
    pub spec: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut spec: GenSpec = match (&args.experiment, &args.spec) {
        (Some(name), None) => {
            let which: BuiltinExperiment = match name.parse() {
                Ok(w) => w,
                Err(e) => return usage(anyhow::anyhow!("{e}")),
            };
            datagen::builtin_experiment(which)
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            match serde_json::from_str(&text) {
                Ok(spec) => spec,
                Err(e) => return usage(anyhow::anyhow!("parsing {}: {e}", path.display())),
            }
        }
        _ => {
            return usage(anyhow::anyhow!(
                "exactly one of --experiment or --spec is required"
            ))
        }
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (corpus, truth) = match datagen::generate_corpus(&spec) {
        Ok(pair) => pair,
        Err(e) => return usage(anyhow::anyhow!("{e}")),
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let schema = Schema {
        features: spec
            .features
            .iter()
            .enumerate()
            .map(|(l, f)| SchemaFeature {
                name: format!("f{}", l + 1),
                cardinality: f.cardinality,
                theta: None,
            })
            .collect(),
        covariates: corpus.regression().map(|r| r.n_covariates).unwrap_or(0),
    };
    formats::write_corpus(&args.out.join("corpus.csv"), &corpus)?;
    formats::write_truth(&args.out.join("truth.csv"), &truth)?;
    schema.write(&args.out.join("schema.json"))?;
    let entities: std::collections::BTreeSet<u64> = truth.entities().iter().copied().collect();
    println!(
        "wrote {} records in {} databases ({} entities, {} true pairs) to {}",
        corpus.n_records(),
        corpus.layout().n_databases(),
        entities.len(),
        truth.true_pair_count(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct ScalarSummary {
    mean: f64,
    q05: f64,
    q50: f64,
    q95: f64,
}

fn scalar_summary(values: &[f64]) -> ScalarSummary {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        if sorted.is_empty() {
            return f64::NAN;
        }
        let idx = p * (sorted.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let w = idx - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    };
    ScalarSummary {
        mean: values.iter().sum::<f64>() / values.len().max(1) as f64,
        q05: q(0.05),
        q50: q(0.50),
        q95: q(0.95),
    }
}

#[derive(Debug, Serialize)]
struct RunSummary {
    mode: Mode,
    chains: usize,
    kept_samples: usize,
    k_mode: usize,
    k: ScalarSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    t: Option<ScalarSummary>,
    alpha: Vec<ScalarSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<Vec<ScalarSummary>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    var_y: Option<ScalarSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    var_x: Option<Vec<ScalarSummary>>,
}

fn summarize(all_kept: &[&IterationSample], mode: Mode, chains: usize) -> RunSummary {
    let ks: Vec<f64> = all_kept.iter().map(|s| s.k as f64).collect();
    let ts: Vec<f64> = all_kept
        .iter()
        .filter_map(|s| s.t.map(|t| t as f64))
        .collect();
    let p = all_kept.first().map(|s| s.alpha.len()).unwrap_or(0);
    let alpha = (0..p)
        .map(|l| scalar_summary(&all_kept.iter().map(|s| s.alpha[l]).collect::<Vec<f64>>()))
        .collect();
    let reg_dims = all_kept
        .first()
        .and_then(|s| s.regression.as_ref())
        .map(|r| r.beta.len());
    let (beta, var_y, var_x) = match reg_dims {
        Some(q) => {
            let beta = (0..q)
                .map(|j| {
                    scalar_summary(
                        &all_kept
                            .iter()
                            .map(|s| s.regression.as_ref().unwrap().beta[j])
                            .collect::<Vec<f64>>(),
                    )
                })
                .collect();
            let var_y = scalar_summary(
                &all_kept
                    .iter()
                    .map(|s| s.regression.as_ref().unwrap().var_y)
                    .collect::<Vec<f64>>(),
            );
            let var_x = (0..q)
                .map(|j| {
                    scalar_summary(
                        &all_kept
                            .iter()
                            .map(|s| s.regression.as_ref().unwrap().var_x[j])
                            .collect::<Vec<f64>>(),
                    )
                })
                .collect();
            (Some(beta), Some(var_y), Some(var_x))
        }
        None => (None, None, None),
    };
    let mode_k = {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for s in all_kept {
            *counts.entry(s.k).or_insert(0) += 1;
        }
        counts
            .into_iter()
            .max_by_key(|&(k, c)| (c, std::cmp::Reverse(k)))
            .map(|(k, _)| k)
            .unwrap_or(0)
    };
    RunSummary {
        mode,
        chains,
        kept_samples: all_kept.len(),
        k_mode: mode_k,
        k: scalar_summary(&ks),
        t: if ts.is_empty() {
            None
        } else {
            Some(scalar_summary(&ts))
        },
        alpha,
        beta,
        var_y,
        var_x,
    }
}

pub struct RunArgs {
    pub config: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: Option<String>,
    pub prior: Option<String>,
    pub constrained: bool,
    pub iterations: Option<u64>,
    pub burn_in: Option<u64>,
    pub thin: Option<u64>,
    pub seed: Option<u64>,
    pub chains: Option<usize>,
}

pub fn resolve_run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => match RunConfig::from_file(path) {
            Ok(cfg) => cfg,
            Err(e) => return usage(e),
        },
        None => RunConfig::default(),
    };
    if let Some(corpus) = &args.corpus {
        cfg.corpus = Some(corpus.clone());
    }
    if let Some(schema) = &args.schema {
        cfg.schema = Some(schema.clone());
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    if let Some(mode) = &args.mode {
        cfg.mode = match mode.as_str() {
            "joint" => Mode::Joint,
            "linkage-only" => Mode::LinkageOnly,
            other => return usage(anyhow::anyhow!("unknown mode `{other}`")),
        };
    }
    if let Some(prior) = &args.prior {
        cfg.prior = match crate::config::parse_prior(prior) {
            Ok(p) => p,
            Err(e) => return usage(e),
        };
    }
    if args.constrained {
        cfg.constrained = true;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.burn_in {
        cfg.burn_in = v;
    }
    if let Some(v) = args.thin {
        cfg.thin = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.chains {
        cfg.chains = v;
    }
    if cfg.corpus.is_none() || cfg.schema.is_none() || cfg.out.is_none() {
        return usage(anyhow::anyhow!(
            "--corpus, --schema, and --out are required (flags or config file)"
        ));
    }
    if cfg.chains == 0 {
        return usage(anyhow::anyhow!("--chains must be at least 1"));
    }
    if cfg.burn_in >= cfg.iterations {
        return usage(anyhow::anyhow!(
            "burn-in {} must be smaller than iterations {}",
            cfg.burn_in,
            cfg.iterations
        ));
    }
    Ok(cfg)
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = resolve_run_config(args)?;
    let schema_path = cfg.schema.clone().expect("checked");
    let corpus_path = cfg.corpus.clone().expect("checked");
    let out = cfg.out.clone().expect("checked");

    let schema = match Schema::read(&schema_path) {
        Ok(s) => s,
        Err(e) => return usage(e),
    };
    let mut corpus = match formats::read_corpus(&corpus_path, &schema) {
        Ok(c) => c,
        Err(e) => return usage(e),
    };
    if let Some(truth_path) = &cfg.truth {
        let truth = match formats::read_truth(truth_path) {
            Ok(t) => t,
            Err(e) => return usage(e),
        };
        if truth.layout().db_sizes() != corpus.layout().db_sizes() {
            return usage(anyhow::anyhow!(
                "truth file covers databases {:?} but the corpus has {:?}",
                truth.layout().db_sizes(),
                corpus.layout().db_sizes()
            ));
        }
    }
    if cfg.mode == Mode::LinkageOnly && corpus.regression().is_some() {
        eprintln!("warning: linkage-only mode ignores the regression columns");
        corpus = corpus.without_regression();
    }
    let model = match crate::model::build_model_spec(&corpus, &schema, &cfg) {
        Ok(m) => m,
        Err(e) => return usage(e),
    };
    let sampler_cfg = cfg.sampler_config();

    let chains = sampler::run_chains(&corpus, &model, &sampler_cfg, cfg.chains)
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_run_outputs(&out, &cfg, &corpus, &chains, &mut written);
    if result.is_err() {
        // no partial outputs on failure
        for path in written {
            let _ = std::fs::remove_file(path);
        }
    }
    result?;
    println!(
        "run complete: {} chains, {} kept samples, outputs in {}",
        chains.len(),
        chains.iter().map(|c| c.n_kept()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn write_run_outputs(
    out: &Path,
    cfg: &RunConfig,
    corpus: &linkreg_core::corpus::Corpus,
    chains: &[PosteriorSamples],
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    let n_features = corpus.n_features();
    for (i, samples) in chains.iter().enumerate() {
        let trace_path = if i == 0 {
            out.join("trace.csv")
        } else {
            out.join(format!("trace.chain{}.csv", i + 1))
        };
        formats::write_trace(&trace_path, samples, n_features)?;
        written.push(trace_path);
    }
    let linksets = out.join("linksets.csv");
    for (i, samples) in chains.iter().enumerate() {
        formats::write_linksets(&linksets, i + 1, samples, i > 0)?;
    }
    written.push(linksets.clone());

    // pooled pairwise probabilities
    let total_kept: usize = chains.iter().map(|c| c.n_kept()).sum();
    let mut counts: BTreeMap<(RecordId, RecordId), u64> = BTreeMap::new();
    for samples in chains {
        for (&pair, &c) in &samples.pair_counts {
            *counts.entry(pair).or_insert(0) += c as u64;
        }
    }
    let probabilities: BTreeMap<(RecordId, RecordId), f64> = counts
        .into_iter()
        .map(|(pair, c)| (pair, c as f64 / total_kept.max(1) as f64))
        .collect();
    let pairs_path = out.join("pairs.csv");
    formats::write_pairs(&pairs_path, &probabilities)?;
    written.push(pairs_path);

    let all_kept: Vec<&IterationSample> = chains.iter().flat_map(|c| c.kept.iter()).collect();
    let summary = summarize(&all_kept, cfg.mode, chains.len());
    let summary_path = out.join("summary.json");
    formats::write_json(&summary_path, &summary)?;
    written.push(summary_path);
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub struct EvalArgs {
    pub run: PathBuf,
    pub truth: PathBuf,
    pub out: Option<PathBuf>,
    pub plugin: Option<PathBuf>,
    pub bins: usize,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    kept_samples: usize,
    k_mode: usize,
    k: ScalarSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    t: Option<ScalarSummary>,
    fnr: ScalarSummary,
    fdr: ScalarSummary,
    alpha: Vec<ScalarSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<Vec<ScalarSummary>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    var_y: Option<ScalarSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    var_x: Option<Vec<ScalarSummary>>,
}

#[derive(Debug, Serialize)]
struct TraceMeans {
    beta: Vec<f64>,
    var_y: f64,
    var_x: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct Comparison {
    joint: TraceMeans,
    plugin: TraceMeans,
    delta_beta: Vec<f64>,
    delta_var_y: f64,
    delta_var_x: Vec<f64>,
}

fn trace_means(kept: &[IterationSample]) -> Result<TraceMeans> {
    let q = kept
        .first()
        .and_then(|s| s.regression.as_ref())
        .map(|r| r.beta.len())
        .context("trace has no regression columns")?;
    let n = kept.len() as f64;
    let mut beta = vec![0.0; q];
    let mut var_y = 0.0;
    let mut var_x = vec![0.0; q];
    for s in kept {
        let reg = s
            .regression
            .as_ref()
            .context("regression columns missing")?;
        for j in 0..q {
            beta[j] += reg.beta[j];
            var_x[j] += reg.var_x[j];
        }
        var_y += reg.var_y;
    }
    for j in 0..q {
        beta[j] /= n;
        var_x[j] /= n;
    }
    Ok(TraceMeans {
        beta,
        var_y: var_y / n,
        var_x,
    })
}

fn read_all_traces(dir: &Path) -> Result<Vec<IterationSample>> {
    let mut kept = formats::read_trace(&dir.join("trace.csv"))?;
    for i in 2.. {
        let path = dir.join(format!("trace.chain{i}.csv"));
        if !path.exists() {
            break;
        }
        kept.extend(formats::read_trace(&path)?);
    }
    Ok(kept)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    let truth = match formats::read_truth(&args.truth) {
        Ok(t) => t,
        Err(e) => return usage(e),
    };
    let kept = match read_all_traces(&args.run) {
        Ok(k) => k,
        Err(e) => return usage(e),
    };
    let linksets = match formats::read_linksets(&args.run.join("linksets.csv")) {
        Ok(l) => l,
        Err(e) => return usage(e),
    };
    // the truth must cover every record named in the link sets
    for (_, _, pairs) in &linksets {
        for &(a, b) in pairs {
            if truth.layout().flat(a).is_none() || truth.layout().flat(b).is_none() {
                return usage(anyhow::anyhow!(
                    "link sets reference records outside the truth file"
                ));
            }
        }
    }
    std::fs::create_dir_all(&out)?;

    let metrics: Vec<(u64, linkreg_core::eval::LinkageMetrics)> = linksets
        .iter()
        .map(|(_, iteration, pairs)| (*iteration, compute_metrics_from_pairs(pairs, &truth)))
        .collect();
    formats::write_metrics(&out.join("metrics.csv"), &metrics)?;

    let mut histograms: Vec<Histogram> = Vec::new();
    histograms.push(formats::histogram_integers(
        "k",
        kept.iter().map(|s| s.k as i64),
    ));
    if kept.iter().any(|s| s.t.is_some()) {
        histograms.push(formats::histogram_integers(
            "t",
            kept.iter().filter_map(|s| s.t.map(|t| t as i64)),
        ));
    }
    let p = kept.first().map(|s| s.alpha.len()).unwrap_or(0);
    for l in 0..p {
        let values: Vec<f64> = kept.iter().map(|s| s.alpha[l]).collect();
        histograms.push(formats::histogram_reals(
            &format!("alpha_{}", l + 1),
            &values,
            args.bins,
        ));
    }
    if let Some(q) = kept
        .first()
        .and_then(|s| s.regression.as_ref())
        .map(|r| r.beta.len())
    {
        for j in 0..q {
            let values: Vec<f64> = kept
                .iter()
                .map(|s| s.regression.as_ref().unwrap().beta[j])
                .collect();
            histograms.push(formats::histogram_reals(
                &format!("beta_{}", j + 1),
                &values,
                args.bins,
            ));
        }
        let values: Vec<f64> = kept
            .iter()
            .map(|s| s.regression.as_ref().unwrap().var_y)
            .collect();
        histograms.push(formats::histogram_reals("var_y", &values, args.bins));
        for j in 0..q {
            let values: Vec<f64> = kept
                .iter()
                .map(|s| s.regression.as_ref().unwrap().var_x[j])
                .collect();
            histograms.push(formats::histogram_reals(
                &format!("var_x_{}", j + 1),
                &values,
                args.bins,
            ));
        }
    }
    formats::write_histograms(&out.join("histograms.csv"), &histograms)?;

    // posterior summary of the run plus the metric series
    {
        let refs: Vec<&IterationSample> = kept.iter().collect();
        let run_summary = summarize(&refs, Mode::LinkageOnly, 1);
        let fnrs: Vec<f64> = metrics.iter().map(|(_, m)| m.fnr).collect();
        let fdrs: Vec<f64> = metrics.iter().map(|(_, m)| m.fdr).collect();
        let summary = EvalSummary {
            kept_samples: kept.len(),
            k_mode: run_summary.k_mode,
            k: run_summary.k,
            t: run_summary.t,
            fnr: scalar_summary(&fnrs),
            fdr: scalar_summary(&fdrs),
            alpha: run_summary.alpha,
            beta: run_summary.beta,
            var_y: run_summary.var_y,
            var_x: run_summary.var_x,
        };
        formats::write_json(&out.join("eval_summary.json"), &summary)?;
    }

    if let Some(plugin_dir) = &args.plugin {
        let plugin_kept = match read_all_traces(plugin_dir) {
            Ok(k) => k,
            Err(e) => return usage(e),
        };
        let joint = trace_means(&kept)?;
        let plugin = trace_means(&plugin_kept)?;
        let q = joint.beta.len();
        if q != plugin.beta.len() {
            bail!("joint and plug-in traces disagree on the covariate count");
        }
        let comparison = Comparison {
            delta_beta: (0..q).map(|j| joint.beta[j] - plugin.beta[j]).collect(),
            delta_var_y: joint.var_y - plugin.var_y,
            delta_var_x: (0..q).map(|j| joint.var_x[j] - plugin.var_x[j]).collect(),
            joint,
            plugin,
        };
        formats::write_json(&out.join("comparison.json"), &comparison)?;
    }
    println!(
        "eval complete: {} kept samples, {} metric rows, outputs in {}",
        kept.len(),
        metrics.len(),
        out.display()
    );
    Ok(())
}
