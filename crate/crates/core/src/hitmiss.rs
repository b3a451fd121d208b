//! Hit-and-miss measurement model for categorical features.
//!
//! A record copies its entity's latent category with probability `1 - alpha`
//! and otherwise redraws from the category frequencies. The latent values are
//! integrated out analytically, so cluster likelihoods are exact marginals.
//! Evaluation splits the category sum into the codes observed in the cluster
//! plus one closed-form remainder for all unobserved codes, costing
//! `O(distinct observed codes)` rather than `O(cardinality)`.

use thiserror::Error;

use crate::numeric::logsumexp;
use crate::partition::LinkageState;

#[derive(Debug, Error, PartialEq)]
pub enum HitMissError {
    #[error("feature needs at least two categories, got {0}")]
    TooFewCategories(usize),
    #[error("category frequencies must be positive and sum to one (sum = {0})")]
    BadFrequencies(f64),
    #[error("cluster marginal of an empty cluster is undefined")]
    EmptyCluster,
    #[error("feature count mismatch: {expected} expected, {got} given")]
    FeatureMismatch { expected: usize, got: usize },
}

/// Frequency table for a single categorical feature.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    theta: Vec<f64>,
    ln_theta: Vec<f64>,
}

impl FeatureTable {
    pub fn new(theta: Vec<f64>) -> Result<Self, HitMissError> {
        if theta.len() < 2 {
            return Err(HitMissError::TooFewCategories(theta.len()));
        }
        let sum: f64 = theta.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || theta.iter().any(|&t| t <= 0.0) {
            return Err(HitMissError::BadFrequencies(sum));
        }
        let ln_theta = theta.iter().map(|t| t.ln()).collect();
        Ok(FeatureTable { theta, ln_theta })
    }

    /// Builds a table from raw non-negative weights, flooring zeros at `floor`
    /// and renormalizing.
    pub fn from_weights(weights: &[f64], floor: f64) -> Result<Self, HitMissError> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(HitMissError::BadFrequencies(total));
        }
        let mut theta: Vec<f64> = weights.iter().map(|&w| (w / total).max(floor)).collect();
        let sum: f64 = theta.iter().sum();
        for t in &mut theta {
            *t /= sum;
        }
        FeatureTable::new(theta)
    }

    pub fn cardinality(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn ln_theta(&self) -> &[f64] {
        &self.ln_theta
    }
}

/// Frequency tables for all overlapping features.
#[derive(Debug, Clone)]
pub struct FeatureSpec {
    tables: Vec<FeatureTable>,
}

impl FeatureSpec {
    pub fn new(tables: Vec<FeatureTable>) -> Self {
        FeatureSpec { tables }
    }

    /// Empirical relative frequencies of the pooled observed records, with a
    /// small floor so unseen codes keep positive mass.
    pub fn from_empirical(
        columns: &[Vec<u32>],
        cardinalities: &[usize],
    ) -> Result<Self, HitMissError> {
        let mut tables = Vec::with_capacity(columns.len());
        for (column, &m) in columns.iter().zip(cardinalities) {
            let mut counts = vec![0.0f64; m];
            for &code in column {
                counts[code as usize] += 1.0;
            }
            tables.push(FeatureTable::from_weights(&counts, 1e-9)?);
        }
        Ok(FeatureSpec { tables })
    }

    pub fn n_features(&self) -> usize {
        self.tables.len()
    }

    pub fn table(&self, l: usize) -> &FeatureTable {
        &self.tables[l]
    }

    pub fn tables(&self) -> &[FeatureTable] {
        &self.tables
    }
}

/// Beta prior shared by all per-feature distortion probabilities.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BetaPrior {
    pub f: f64,
    pub g: f64,
}

impl Default for BetaPrior {
    fn default() -> Self {
        BetaPrior { f: 1.0, g: 1.0 }
    }
}

impl BetaPrior {
    pub fn log_kernel(&self, alpha: f64) -> f64 {
        if !(0.0..=1.0).contains(&alpha) {
            return f64::NEG_INFINITY;
        }
        let mut lp = 0.0;
        if self.f != 1.0 {
            lp += (self.f - 1.0) * alpha.ln();
        }
        if self.g != 1.0 {
            lp += (self.g - 1.0) * (1.0 - alpha).ln();
        }
        lp
    }
}

/// Per-feature distortion probabilities plus their shared prior.
#[derive(Debug, Clone)]
pub struct DistortionParams {
    pub alpha: Vec<f64>,
    pub beta_prior: BetaPrior,
}

/// Log marginal of one feature over a cluster of observed codes, with the
/// latent population value integrated out.
pub fn cluster_feature_log_marginal(
    codes: &[u32],
    alpha: f64,
    table: &FeatureTable,
) -> Result<f64, HitMissError> {
    if codes.is_empty() {
        return Err(HitMissError::EmptyCluster);
    }
    let theta = table.theta();
    let ln_theta = table.ln_theta();
    if alpha == 0.0 {
        // undistorted: the cluster must agree exactly
        let v = codes[0];
        return Ok(if codes.iter().all(|&c| c == v) {
            ln_theta[v as usize]
        } else {
            f64::NEG_INFINITY
        });
    }
    let ln_alpha = alpha.ln();
    // distinct codes with multiplicities; clusters are small
    let mut distinct: Vec<(u32, u32)> = Vec::with_capacity(codes.len());
    for &c in codes {
        match distinct.iter_mut().find(|(d, _)| *d == c) {
            Some((_, count)) => *count += 1,
            None => distinct.push((c, 1)),
        }
    }
    // log of the all-miss product over the whole cluster
    let mut ln_miss = 0.0;
    let mut observed_mass = 0.0;
    for &(code, count) in &distinct {
        ln_miss += count as f64 * (ln_alpha + ln_theta[code as usize]);
        observed_mass += theta[code as usize];
    }
    let mut terms: Vec<f64> = Vec::with_capacity(distinct.len() + 1);
    for &(code, count) in &distinct {
        let u = code as usize;
        let hit = 1.0 - alpha + alpha * theta[u];
        terms.push(
            ln_theta[u] + count as f64 * hit.ln() + ln_miss
                - count as f64 * (ln_alpha + ln_theta[u]),
        );
    }
    let unobserved = 1.0 - observed_mass;
    if unobserved > 0.0 {
        terms.push(unobserved.ln() + ln_miss);
    }
    Ok(logsumexp(&terms))
}

/// Linear-space counterpart of [`cluster_feature_log_marginal`].
pub fn cluster_feature_marginal(
    codes: &[u32],
    alpha: f64,
    table: &FeatureTable,
) -> Result<f64, HitMissError> {
    cluster_feature_log_marginal(codes, alpha, table).map(f64::exp)
}

/// Direct linear-space evaluation of the split sum, without logarithms. Used
/// by the sampler's cluster cache; may underflow to zero for large clusters,
/// which callers detect and route to the log version.
pub fn cluster_feature_marginal_fast(codes: &[u32], alpha: f64, table: &FeatureTable) -> f64 {
    let theta = table.theta();
    if alpha == 0.0 {
        let v = codes[0];
        return if codes.iter().all(|&c| c == v) {
            theta[v as usize]
        } else {
            0.0
        };
    }
    let mut distinct: [(u32, u32); 8] = [(0, 0); 8];
    let mut n_distinct = 0usize;
    let mut spill: Vec<(u32, u32)> = Vec::new();
    'outer: for &c in codes {
        for slot in distinct.iter_mut().take(n_distinct) {
            if slot.0 == c {
                slot.1 += 1;
                continue 'outer;
            }
        }
        if n_distinct < distinct.len() {
            distinct[n_distinct] = (c, 1);
            n_distinct += 1;
        } else {
            match spill.iter_mut().find(|(d, _)| *d == c) {
                Some(slot) => slot.1 += 1,
                None => spill.push((c, 1)),
            }
        }
    }
    let mut miss_prod = 1.0f64;
    let mut observed_mass = 0.0f64;
    for &(code, count) in distinct.iter().take(n_distinct).chain(spill.iter()) {
        let t = theta[code as usize];
        let f = alpha * t;
        let mut pow = 1.0;
        for _ in 0..count {
            pow *= f;
        }
        miss_prod *= pow;
        observed_mass += t;
    }
    let mut total = (1.0 - observed_mass).max(0.0) * miss_prod;
    for &(code, count) in distinct.iter().take(n_distinct).chain(spill.iter()) {
        let t = theta[code as usize];
        let hit = 1.0 - alpha + alpha * t;
        let miss = alpha * t;
        let mut term = t * miss_prod;
        for _ in 0..count {
            term *= hit / miss;
        }
        total += term;
    }
    total
}

/// Log marginal of a whole cluster across all features, assuming conditional
/// independence between features given the latent entity.
pub fn cluster_log_marginal(
    columns: &[Vec<u32>],
    members: &[u32],
    alpha: &[f64],
    spec: &FeatureSpec,
) -> Result<f64, HitMissError> {
    if members.is_empty() {
        return Err(HitMissError::EmptyCluster);
    }
    if columns.len() != spec.n_features() || alpha.len() != spec.n_features() {
        return Err(HitMissError::FeatureMismatch {
            expected: spec.n_features(),
            got: columns.len().min(alpha.len()),
        });
    }
    let mut codes = Vec::with_capacity(members.len());
    let mut total = 0.0;
    for l in 0..spec.n_features() {
        codes.clear();
        codes.extend(members.iter().map(|&m| columns[l][m as usize]));
        total += cluster_feature_log_marginal(&codes, alpha[l], spec.table(l))?;
    }
    Ok(total)
}

/// Change in the corpus log likelihood from adding record `r_flat` to the
/// cluster holding `base_members` (which may be empty: the record then opens
/// a new cluster and the ratio is its prior predictive mass).
pub fn log_ratio_add_record(
    columns: &[Vec<u32>],
    base_members: &[u32],
    r_flat: usize,
    alpha: &[f64],
    spec: &FeatureSpec,
) -> Result<f64, HitMissError> {
    if columns.len() != spec.n_features() || alpha.len() != spec.n_features() {
        return Err(HitMissError::FeatureMismatch {
            expected: spec.n_features(),
            got: columns.len().min(alpha.len()),
        });
    }
    let mut total = 0.0;
    let mut codes = Vec::with_capacity(base_members.len());
    for l in 0..spec.n_features() {
        let table = spec.table(l);
        let v = columns[l][r_flat] as usize;
        if base_members.is_empty() {
            total += table.ln_theta()[v];
            continue;
        }
        codes.clear();
        codes.extend(base_members.iter().map(|&m| columns[l][m as usize]));
        let base = cluster_feature_log_marginal(&codes, alpha[l], table)?;
        total += feature_add_log_ratio(&codes, v, alpha[l], table, base);
    }
    Ok(total)
}

/// Incremental per-feature add ratio given the cached base log marginal:
/// `theta_v * (alpha + (1 - alpha) * prod_g / p(base))`, where `prod_g`
/// multiplies the hit-or-miss factors of the base members against the
/// incoming code.
pub fn feature_add_log_ratio(
    base_codes: &[u32],
    v: usize,
    alpha: f64,
    table: &FeatureTable,
    base_log_marginal: f64,
) -> f64 {
    let theta = table.theta();
    if alpha >= 1.0 {
        return table.ln_theta()[v];
    }
    if alpha == 0.0 {
        return if base_codes.iter().all(|&c| c as usize == v) {
            0.0
        } else {
            f64::NEG_INFINITY
        };
    }
    let mut ln_prod = 0.0;
    for &c in base_codes {
        let g = if c as usize == v {
            1.0 - alpha + alpha * theta[v]
        } else {
            alpha * theta[c as usize]
        };
        ln_prod += g.ln();
    }
    table.ln_theta()[v] + (alpha + (1.0 - alpha) * (ln_prod - base_log_marginal).exp()).ln()
}

/// Unnormalized log posterior density of one distortion probability given the
/// partition and the observed codes.
pub fn alpha_conditional_log_density(
    feature: usize,
    alpha_l: f64,
    state: &LinkageState,
    columns: &[Vec<u32>],
    spec: &FeatureSpec,
    beta_prior: BetaPrior,
) -> f64 {
    if !(0.0..=1.0).contains(&alpha_l) {
        return f64::NEG_INFINITY;
    }
    let table = spec.table(feature);
    let column = &columns[feature];
    let mut lp = beta_prior.log_kernel(alpha_l);
    let mut codes: Vec<u32> = Vec::new();
    for label in state.cluster_labels() {
        let members = state.members(label).expect("active label");
        codes.clear();
        codes.extend(members.iter().map(|&m| column[m as usize]));
        match cluster_feature_log_marginal(&codes, alpha_l, table) {
            Ok(l) => lp += l,
            Err(_) => return f64::NEG_INFINITY,
        }
    }
    lp
}
