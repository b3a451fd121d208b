//! File formats: corpus/truth/schema inputs and trace/pairs/metric outputs.
//!
//! CSV files always carry a header row. Real numbers are written with 17
//! significant digits in scientific notation so round-trips are exact and
//! locale-independent. Database and record ids are one-based in files and
//! zero-based in memory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use linkreg_core::corpus::{Corpus, RegressionData};
use linkreg_core::eval::{GroundTruth, LinkageMetrics};
use linkreg_core::partition::RecordId;
use linkreg_core::sampler::{IterationSample, PosteriorSamples, RegressionSample};

/// 17 significant digits, locale-independent.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

// ---------------------------------------------------------------------------
// schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaFeature {
    pub name: String,
    pub cardinality: usize,
    /// Optional frequency override; empirical frequencies are used when
    /// absent.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub features: Vec<SchemaFeature>,
    /// Number of regression covariate columns (0 = no regression columns).
    #[serde(default)]
    pub covariates: usize,
}

impl Schema {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading schema {}", path.display()))?;
        let schema: Schema = serde_json::from_str(&text)
            .with_context(|| format!("parsing schema {}", path.display()))?;
        for f in &schema.features {
            if let Some(theta) = &f.theta {
                if theta.len() != f.cardinality {
                    bail!(
                        "schema feature {} declares {} frequencies for cardinality {}",
                        f.name,
                        theta.len(),
                        f.cardinality
                    );
                }
            }
        }
        Ok(schema)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")
            .with_context(|| format!("writing schema {}", path.display()))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// corpus and truth
// ---------------------------------------------------------------------------

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let p = corpus.n_features();
    let reg = corpus.regression();
    let q = reg.map(|r| r.n_covariates).unwrap_or(0);
    let mut header = vec!["db_id".to_string(), "rec_id".to_string()];
    for l in 0..p {
        header.push(format!("f{}", l + 1));
    }
    if reg.is_some() {
        header.push("y".to_string());
        for j in 0..q {
            header.push(format!("x{}", j + 1));
        }
    }
    w.write_record(&header)?;
    let layout = corpus.layout();
    for (flat, id) in layout.record_ids().enumerate() {
        let mut row = vec![(id.db + 1).to_string(), (id.pos + 1).to_string()];
        for l in 0..p {
            row.push(corpus.codes()[l][flat].to_string());
        }
        if let Some(reg) = reg {
            row.push(reg.y[flat].map(fmt_float).unwrap_or_default());
            for j in 0..q {
                row.push(reg.x[flat][j].map(fmt_float).unwrap_or_default());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path, schema: &Schema) -> Result<Corpus> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading corpus {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let db_col = col("db_id").context("corpus missing db_id column")?;
    let rec_col = col("rec_id").context("corpus missing rec_id column")?;
    let p = schema.features.len();
    let mut feature_cols = Vec::with_capacity(p);
    for (l, f) in schema.features.iter().enumerate() {
        let c = col(&f.name)
            .or_else(|| col(&format!("f{}", l + 1)))
            .with_context(|| format!("corpus missing feature column {}", f.name))?;
        feature_cols.push(c);
    }
    let q = schema.covariates;
    let y_col = col("y");
    let mut x_cols = Vec::new();
    for j in 0..q {
        x_cols.push(col(&format!("x{}", j + 1)));
    }
    if q > 0 && (y_col.is_none() || x_cols.iter().any(|c| c.is_none())) {
        bail!("schema declares {q} covariates but the corpus lacks y/x columns");
    }

    struct Row {
        db: usize,
        rec: usize,
        codes: Vec<u32>,
        y: Option<f64>,
        x: Vec<Option<f64>>,
    }
    let mut rows: Vec<Row> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let db: usize = record[db_col]
            .trim()
            .parse()
            .with_context(|| format!("line {line}: db_id"))?;
        let rec: usize = record[rec_col]
            .trim()
            .parse()
            .with_context(|| format!("line {line}: rec_id"))?;
        if db == 0 || rec == 0 {
            bail!("line {line}: db_id and rec_id are one-based");
        }
        let mut codes = Vec::with_capacity(p);
        for (l, &c) in feature_cols.iter().enumerate() {
            let code: u32 = record[c]
                .trim()
                .parse()
                .with_context(|| format!("line {line}: feature {}", schema.features[l].name))?;
            codes.push(code);
        }
        let parse_opt = |field: &str| -> Result<Option<f64>> {
            let t = field.trim();
            if t.is_empty() {
                Ok(None)
            } else {
                Ok(Some(t.parse::<f64>()?))
            }
        };
        let y = match y_col {
            Some(c) if q > 0 => parse_opt(&record[c]).with_context(|| format!("line {line}: y"))?,
            _ => None,
        };
        let mut x = Vec::with_capacity(q);
        for (j, c) in x_cols.iter().enumerate() {
            let v = parse_opt(&record[c.expect("checked")])
                .with_context(|| format!("line {line}: x{}", j + 1))?;
            x.push(v);
        }
        rows.push(Row {
            db: db - 1,
            rec: rec - 1,
            codes,
            y,
            x,
        });
    }
    if rows.is_empty() {
        bail!("corpus {} holds no records", path.display());
    }
    let n_dbs = rows.iter().map(|r| r.db).max().unwrap() + 1;
    let mut db_sizes = vec![0usize; n_dbs];
    for r in &rows {
        db_sizes[r.db] = db_sizes[r.db].max(r.rec + 1);
    }
    let n: usize = db_sizes.iter().sum();
    if n != rows.len() {
        bail!(
            "corpus ids are not contiguous: {} rows but ids span {} records",
            rows.len(),
            n
        );
    }
    rows.sort_by_key(|r| (r.db, r.rec));
    let mut codes = vec![Vec::with_capacity(n); p];
    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    for row in &rows {
        for l in 0..p {
            codes[l].push(row.codes[l]);
        }
        y.push(row.y);
        x.push(row.x.clone());
    }
    let regression = (q > 0).then_some(RegressionData {
        n_covariates: q,
        y,
        x,
    });
    let cardinalities = schema.features.iter().map(|f| f.cardinality).collect();
    Corpus::new(&db_sizes, cardinalities, codes, regression).map_err(|e| anyhow::anyhow!("{e}"))
}

pub fn write_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["db_id", "rec_id", "entity_id"])?;
    for (flat, id) in truth.layout().record_ids().enumerate() {
        w.write_record(&[
            (id.db + 1).to_string(),
            (id.pos + 1).to_string(),
            truth.entities()[flat].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading truth {}", path.display()))?;
    let mut rows: Vec<(usize, usize, u64)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let db: usize = record[0].trim().parse()?;
        let rec: usize = record[1].trim().parse()?;
        let entity: u64 = record[2].trim().parse()?;
        if db == 0 || rec == 0 {
            bail!("truth ids are one-based");
        }
        rows.push((db - 1, rec - 1, entity));
    }
    let n_dbs = rows.iter().map(|r| r.0).max().context("empty truth")? + 1;
    let mut db_sizes = vec![0usize; n_dbs];
    for r in &rows {
        db_sizes[r.0] = db_sizes[r.0].max(r.1 + 1);
    }
    let n: usize = db_sizes.iter().sum();
    if n != rows.len() {
        bail!("truth ids are not contiguous");
    }
    rows.sort_unstable();
    Ok(GroundTruth::new(
        &db_sizes,
        rows.into_iter().map(|r| r.2).collect(),
    ))
}

// ---------------------------------------------------------------------------
// run outputs
// ---------------------------------------------------------------------------

pub fn write_trace(path: &Path, samples: &PosteriorSamples, n_features: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let reg_dims = samples
        .kept
        .first()
        .and_then(|s| s.regression.as_ref())
        .map(|r| r.beta.len());
    let mut header = vec!["iteration".to_string(), "k".to_string(), "t".to_string()];
    for l in 0..n_features {
        header.push(format!("alpha_{}", l + 1));
    }
    if let Some(q) = reg_dims {
        for j in 0..q {
            header.push(format!("beta_{}", j + 1));
        }
        header.push("var_y".to_string());
        for j in 0..q {
            header.push(format!("var_x_{}", j + 1));
        }
    }
    w.write_record(&header)?;
    for s in &samples.kept {
        let mut row = vec![
            s.iteration.to_string(),
            s.k.to_string(),
            s.t.map(|t| t.to_string()).unwrap_or_default(),
        ];
        for a in &s.alpha {
            row.push(fmt_float(*a));
        }
        if let Some(reg) = &s.regression {
            for b in &reg.beta {
                row.push(fmt_float(*b));
            }
            row.push(fmt_float(reg.var_y));
            for v in &reg.var_x {
                row.push(fmt_float(*v));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace file back into iteration samples.
pub fn read_trace(path: &Path) -> Result<Vec<IterationSample>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading trace {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let alpha_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("alpha_"))
        .map(|(i, _)| i)
        .collect();
    let beta_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("beta_"))
        .map(|(i, _)| i)
        .collect();
    let var_x_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("var_x_"))
        .map(|(i, _)| i)
        .collect();
    let var_y_col = headers.iter().position(|h| h == "var_y");
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let iteration: u64 = record[0].parse()?;
        let k: usize = record[1].parse()?;
        let t: Option<usize> = {
            let t = record[2].trim();
            if t.is_empty() {
                None
            } else {
                Some(t.parse()?)
            }
        };
        let alpha: Vec<f64> = alpha_cols
            .iter()
            .map(|&c| record[c].parse::<f64>())
            .collect::<Result<_, _>>()?;
        let regression = if let Some(vy) = var_y_col {
            Some(RegressionSample {
                beta: beta_cols
                    .iter()
                    .map(|&c| record[c].parse::<f64>())
                    .collect::<Result<_, _>>()?,
                var_y: record[vy].parse()?,
                var_x: var_x_cols
                    .iter()
                    .map(|&c| record[c].parse::<f64>())
                    .collect::<Result<_, _>>()?,
            })
        } else {
            None
        };
        out.push(IterationSample {
            iteration,
            k,
            t,
            alpha,
            regression,
        });
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, probabilities: &BTreeMap<(RecordId, RecordId), f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["db_a", "rec_a", "db_b", "rec_b", "probability"])?;
    for (&(a, b), &p) in probabilities {
        w.write_record(&[
            (a.db + 1).to_string(),
            (a.pos + 1).to_string(),
            (b.db + 1).to_string(),
            (b.pos + 1).to_string(),
            fmt_float(p),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-kept-iteration link sets: one row per co-clustered pair.
pub fn write_linksets(
    path: &Path,
    chain: usize,
    samples: &PosteriorSamples,
    append: bool,
) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if !append {
        w.write_record(["chain", "iteration", "db_a", "rec_a", "db_b", "rec_b"])?;
    }
    let sets = samples
        .pair_sets
        .as_ref()
        .context("link sets were not retained")?;
    for (s, links) in samples.kept.iter().zip(sets) {
        for &(a, b) in links {
            w.write_record(&[
                chain.to_string(),
                s.iteration.to_string(),
                (a.db + 1).to_string(),
                (a.pos + 1).to_string(),
                (b.db + 1).to_string(),
                (b.pos + 1).to_string(),
            ])?;
        }
        // marker row so iterations with zero links are still recoverable
        w.write_record(&[
            chain.to_string(),
            s.iteration.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Link sets read back as per-iteration pair lists, tagged with the chain
/// and iteration they came from.
pub fn read_linksets(path: &Path) -> Result<Vec<(u64, u64, Vec<(RecordId, RecordId)>)>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading link sets {}", path.display()))?;
    let mut out: Vec<(u64, u64, Vec<(RecordId, RecordId)>)> = Vec::new();
    let mut current: Option<(u64, u64)> = None;
    let mut pairs: Vec<(RecordId, RecordId)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let chain: u64 = record[0].parse()?;
        let iteration: u64 = record[1].parse()?;
        if current != Some((chain, iteration)) {
            if let Some((c, i)) = current {
                out.push((c, i, std::mem::take(&mut pairs)));
            }
            current = Some((chain, iteration));
        }
        if record[2].trim().is_empty() {
            continue;
        }
        let a = RecordId::new(
            record[2].parse::<usize>()? - 1,
            record[3].parse::<usize>()? - 1,
        );
        let b = RecordId::new(
            record[4].parse::<usize>()? - 1,
            record[5].parse::<usize>()? - 1,
        );
        pairs.push((a, b));
    }
    if let Some((c, i)) = current {
        out.push((c, i, pairs));
    }
    Ok(out)
}

pub fn write_metrics(path: &Path, metrics: &[(u64, LinkageMetrics)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "fnr", "fdr"])?;
    for (iteration, m) in metrics {
        w.write_record(&[iteration.to_string(), fmt_float(m.fnr), fmt_float(m.fdr)])?;
    }
    w.flush()?;
    Ok(())
}

/// One histogram row per bin: `param,bin_lo,bin_hi,count`.
pub struct Histogram {
    pub param: String,
    pub bins: Vec<(f64, f64, u64)>,
}

pub fn histogram_integers(param: &str, values: impl Iterator<Item = i64>) -> Histogram {
    let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_insert(0) += 1;
    }
    Histogram {
        param: param.to_string(),
        bins: counts
            .into_iter()
            .map(|(v, c)| (v as f64 - 0.5, v as f64 + 0.5, c))
            .collect(),
    }
}

pub fn histogram_reals(param: &str, values: &[f64], n_bins: usize) -> Histogram {
    assert!(n_bins >= 1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / n_bins as f64
    } else {
        1.0
    };
    let mut counts = vec![0u64; n_bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[idx] += 1;
    }
    Histogram {
        param: param.to_string(),
        bins: counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
            .collect(),
    }
}

pub fn write_histograms(path: &Path, histograms: &[Histogram]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["param", "bin_lo", "bin_hi", "count"])?;
    for h in histograms {
        for &(lo, hi, count) in &h.bins {
            w.write_record(&[
                h.param.clone(),
                fmt_float(lo),
                fmt_float(hi),
                count.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let text = serde_json::to_string_pretty(value)?;
    writeln!(file, "{text}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_round_trips() {
        for &x in &[0.1, 1.0 / 3.0, 2.5e-300, 85.0, -9.01] {
            let parsed: f64 = fmt_float(x).parse().unwrap();
            assert_eq!(parsed.to_bits(), x.to_bits());
        }
    }

    #[test]
    fn integer_histogram_bins_are_unit() {
        let h = histogram_integers("k", [3i64, 3, 4, 7].into_iter());
        assert_eq!(h.bins.len(), 3);
        assert_eq!(h.bins[0], (2.5, 3.5, 2));
        let total: u64 = h.bins.iter().map(|b| b.2).sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn real_histogram_counts_sum() {
        let values: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let h = histogram_reals("beta", &values, 12);
        let total: u64 = h.bins.iter().map(|b| b.2).sum();
        assert_eq!(total, 100);
        assert_eq!(h.bins.len(), 12);
    }
}
