//! Metropolis-within-Gibbs engine over the joint posterior of the linkage
//! structure, the distortion probabilities, and (in joint mode) the
//! regression parameters.
//!
//! Each iteration runs a systematic sweep: every record's cluster assignment
//! is redrawn from its full conditional, then each distortion probability
//! takes a random-walk Metropolis step on the logit scale, then (joint mode)
//! the regression parameters take component-wise random-walk steps. Chains
//! are deterministic given their seed.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use thiserror::Error;

use crate::corpus::{Corpus, RegressionData};
use crate::hitmiss::{self, BetaPrior, FeatureSpec};
use crate::partition::{Constraint, LinkageState, MoveTarget, RecordId};
use crate::priors::{AllocTarget, PartitionPrior, PriorError};
use crate::regression::{RegressionParams, DIAGONAL_JITTER};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("burn-in {burn_in} must be smaller than the iteration count {iterations}")]
    BadIterationPlan { iterations: u64, burn_in: u64 },
    #[error("thinning interval must be positive")]
    ZeroThin,
    #[error("joint mode requires regression columns and a regression model")]
    MissingRegression,
    #[error("feature spec covers {spec} features but the corpus has {corpus}")]
    FeatureMismatch { spec: usize, corpus: usize },
    #[error("regression model has {model} covariates but the corpus has {corpus}")]
    CovariateMismatch { model: usize, corpus: usize },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("constrained prior requires exactly two databases")]
    NotBipartite,
    #[error("all allocation weights vanished for record ({db}, {pos})")]
    NoTarget { db: usize, pos: usize },
    #[error("alpha_init must hold one value or one per feature")]
    BadAlphaInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    LinkageOnly,
    Joint,
}

/// Prior for a variance parameter: flat on the log scale, or an inverse-gamma
/// parametrized by its mode and a strength (shape).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum VariancePrior {
    FlatLog,
    Informative { mean: f64, strength: f64 },
}

impl VariancePrior {
    /// Log target contribution on the log-variance scale, Jacobian included.
    fn log_density_u(&self, u: f64) -> f64 {
        match *self {
            VariancePrior::FlatLog => 0.0,
            VariancePrior::Informative { mean, strength } => {
                -strength * u - mean * (strength + 1.0) * (-u).exp()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegressionModelSpec {
    /// Initial coefficient and variance values; the latent covariate
    /// covariance block stays fixed for the whole run.
    pub init: RegressionParams,
    pub var_y_prior: VariancePrior,
    pub var_x_prior: VariancePrior,
}

/// Everything the chain needs besides the corpus: priors and initial values.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub prior: PartitionPrior,
    pub constraint: Constraint,
    pub features: FeatureSpec,
    pub beta_prior: BetaPrior,
    /// Initial distortion probabilities: one value per feature, or a single
    /// value broadcast to all features.
    pub alpha_init: Vec<f64>,
    pub regression: Option<RegressionModelSpec>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub seed: u64,
    pub mode: Mode,
    pub proposal_sd_alpha: f64,
    pub proposal_sd_beta: f64,
    pub proposal_sd_logvar: f64,
    /// Scale proposals during burn-in toward a 0.25-0.45 acceptance band,
    /// frozen afterwards.
    pub adapt: bool,
    /// Visit records in random order instead of db-major order.
    pub random_scan: bool,
    /// Retain the per-iteration link sets (needed for posterior metric
    /// traces).
    pub keep_link_sets: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            iterations: 2000,
            burn_in: 500,
            thin: 1,
            seed: 1,
            mode: Mode::LinkageOnly,
            proposal_sd_alpha: 0.5,
            proposal_sd_beta: 0.25,
            proposal_sd_logvar: 0.5,
            adapt: true,
            random_scan: false,
            keep_link_sets: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSample {
    pub beta: Vec<f64>,
    pub var_y: f64,
    pub var_x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationSample {
    pub iteration: u64,
    pub k: usize,
    pub t: Option<usize>,
    pub alpha: Vec<f64>,
    pub regression: Option<RegressionSample>,
}

/// Post-burn-in acceptance rates; `None` when a parameter took no proposals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AcceptanceReport {
    pub alpha: Vec<Option<f64>>,
    pub beta: Vec<Option<f64>>,
    pub var_y: Option<f64>,
    pub var_x: Vec<Option<f64>>,
}

/// Thinned post-burn-in chain output.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub kept: Vec<IterationSample>,
    /// Co-clustering counts over kept iterations.
    pub pair_counts: BTreeMap<(RecordId, RecordId), u32>,
    /// Per-kept-iteration link sets, when retained.
    pub pair_sets: Option<Vec<Vec<(RecordId, RecordId)>>>,
    pub acceptance: AcceptanceReport,
    /// Final partition labels (db-major flat order).
    pub final_labels: Vec<usize>,
}

impl PosteriorSamples {
    pub fn n_kept(&self) -> usize {
        self.kept.len()
    }

    /// Posterior co-clustering probability per pair.
    pub fn pair_probabilities(&self) -> BTreeMap<(RecordId, RecordId), f64> {
        let n = self.kept.len().max(1) as f64;
        self.pair_counts
            .iter()
            .map(|(&pair, &count)| (pair, count as f64 / n))
            .collect()
    }
}

/// Reference full-conditional log-weights for moving the detached record `r`:
/// prior allocation weight plus hit-and-miss ratio plus (when given) the
/// regression ratio. The prior's new-cluster mass is spread per unused label
/// and summed back over them, so the aggregate `New` entry carries no net
/// division. This is the slow module-backed route used for verification; the
/// chain's cached path must agree with it.
pub fn gibbs_log_weights(
    corpus: &Corpus,
    model: &ModelSpec,
    state: &LinkageState,
    r: RecordId,
    alpha: &[f64],
    reg_params: Option<&RegressionParams>,
) -> Result<Vec<(AllocTarget, f64)>, SamplerError> {
    let mut weights = model.prior.predictive_alloc(state, r)?;
    let flat = state.layout().flat(r).expect("record in range");
    for (target, w) in weights.iter_mut() {
        if !w.is_finite() {
            continue;
        }
        let hm = match target {
            AllocTarget::Existing(label) => {
                let members = state.members(*label).expect("active label");
                hitmiss::log_ratio_add_record(corpus.codes(), members, flat, alpha, &model.features)
                    .expect("valid codes")
            }
            AllocTarget::New => {
                hitmiss::log_ratio_add_record(corpus.codes(), &[], flat, alpha, &model.features)
                    .expect("valid codes")
            }
        };
        *w += hm;
        if let (Some(params), Some(data)) = (reg_params, corpus.regression()) {
            let delta = match target {
                AllocTarget::Existing(label) => {
                    let members = state.members(*label).expect("active label");
                    let mut with: Vec<u32> = members.to_vec();
                    with.push(flat as u32);
                    cluster_lik(state, data, params, &with)
                        - cluster_lik(state, data, params, members)
                }
                AllocTarget::New => cluster_lik(state, data, params, &[flat as u32]),
            };
            *w += delta;
        }
    }
    Ok(weights)
}

fn cluster_lik(
    state: &LinkageState,
    data: &RegressionData,
    params: &RegressionParams,
    members: &[u32],
) -> f64 {
    match crate::regression::ClusterObsPattern::from_cluster(state.layout(), data, members) {
        Some((pattern, values)) => {
            crate::regression::cluster_regression_log_lik(&pattern, &values, params)
                .expect("valid covariance")
        }
        None => 0.0,
    }
}

// ---------------------------------------------------------------------------
// small flat-matrix helpers (no allocation in the candidate loop)
// ---------------------------------------------------------------------------

/// In-place Cholesky of a symmetric `n x n` matrix in row-major storage.
fn chol_in_place(a: &mut [f64], n: usize) -> bool {
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return false;
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    true
}

/// Solves `L L' x = b` in place given the factor from `chol_in_place`.
fn chol_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * b[k];
        }
        b[i] = sum / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in (i + 1)..n {
            sum -= l[k * n + i] * b[k];
        }
        b[i] = sum / l[i * n + i];
    }
}

fn chol_ln_det(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

// ---------------------------------------------------------------------------
// per-record and per-cluster regression caches
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct RecObs {
    comps: Vec<u8>,
    values: Vec<f64>,
    /// jittered noise block, row-major m x m
    d_block: Vec<f64>,
    /// contribution to the cluster posterior precision, p x p
    t_mat: Vec<f64>,
    /// contribution to the cluster posterior shift, p
    h_vec: Vec<f64>,
    /// m ln 2pi + ln det D + v' D^-1 v
    c_term: f64,
    /// linear-space evidence of the singleton cluster {r}; zero if
    /// underflowed, which routes the update to the log fallback
    single_lik_lin: f64,
}

#[derive(Debug, Clone)]
struct RegCluster {
    lambda: Vec<f64>,
    h: Vec<f64>,
    sum_c: f64,
    n_obs: usize,
    // derived quantities for the candidate loop
    v: Vec<f64>,
    mean: Vec<f64>,
    v_beta: Vec<f64>,
    beta_v_beta: f64,
    beta_mean: f64,
    ln_lik: f64,
}

struct RegCtx {
    params: RegressionParams,
    var_y_prior: VariancePrior,
    var_x_prior: VariancePrior,
    rec: Vec<Option<RecObs>>,
    cluster: Vec<Option<RegCluster>>,
    total_ln_lik: f64,
}

impl RegCtx {
    fn new(
        corpus: &Corpus,
        state: &LinkageState,
        spec: &RegressionModelSpec,
    ) -> Result<Self, SamplerError> {
        let data = corpus.regression().ok_or(SamplerError::MissingRegression)?;
        if data.n_covariates != spec.init.n_covariates() {
            return Err(SamplerError::CovariateMismatch {
                model: spec.init.n_covariates(),
                corpus: data.n_covariates,
            });
        }
        let mut ctx = RegCtx {
            params: spec.init.clone(),
            var_y_prior: spec.var_y_prior,
            var_x_prior: spec.var_x_prior,
            rec: Vec::new(),
            cluster: Vec::new(),
            total_ln_lik: 0.0,
        };
        ctx.rebuild(corpus, state);
        Ok(ctx)
    }

    /// Recompute every per-record and per-cluster quantity for the current
    /// parameter values and partition.
    fn rebuild(&mut self, corpus: &Corpus, state: &LinkageState) {
        let data = corpus.regression().expect("regression data");
        let n = corpus.n_records();
        self.rec = (0..n)
            .map(|flat| build_rec_obs(data, flat, &self.params))
            .collect();
        self.cluster = vec![None; n];
        self.total_ln_lik = 0.0;
        for label in state.cluster_labels() {
            let members = state.members(label).expect("active label");
            let cl = self.build_cluster(members);
            self.total_ln_lik += cl.ln_lik;
            self.cluster[label] = Some(cl);
        }
    }

    fn build_cluster(&self, members: &[u32]) -> RegCluster {
        let p = self.params.n_covariates();
        let mut cl = RegCluster {
            lambda: self.params.prec_x_true().as_slice().to_vec(),
            h: vec![0.0; p],
            sum_c: 0.0,
            n_obs: 0,
            v: vec![0.0; p * p],
            mean: vec![0.0; p],
            v_beta: vec![0.0; p],
            beta_v_beta: 0.0,
            beta_mean: 0.0,
            ln_lik: 0.0,
        };
        for &m in members {
            if let Some(rec) = &self.rec[m as usize] {
                for i in 0..p * p {
                    cl.lambda[i] += rec.t_mat[i];
                }
                for i in 0..p {
                    cl.h[i] += rec.h_vec[i];
                }
                cl.sum_c += rec.c_term;
                cl.n_obs += 1;
            }
        }
        self.finish_cluster(&mut cl);
        cl
    }

    /// Derive the posterior covariance, mean, and evidence from the
    /// accumulated precision and shift.
    fn finish_cluster(&self, cl: &mut RegCluster) {
        let p = self.params.n_covariates();
        if cl.n_obs == 0 {
            cl.ln_lik = 0.0;
            return;
        }
        let mut l = cl.lambda.clone();
        let ok = chol_in_place(&mut l, p);
        assert!(ok, "cluster posterior precision must be positive definite");
        let ln_det_lambda = chol_ln_det(&l, p);
        cl.mean.copy_from_slice(&cl.h);
        chol_solve(&l, p, &mut cl.mean);
        // V = Lambda^-1, column by column
        for j in 0..p {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            chol_solve(&l, p, &mut e);
            for i in 0..p {
                cl.v[i * p + j] = e[i];
            }
        }
        let beta = self.params.beta();
        for i in 0..p {
            let mut acc = 0.0;
            for j in 0..p {
                acc += cl.v[i * p + j] * beta[j];
            }
            cl.v_beta[i] = acc;
        }
        cl.beta_v_beta = (0..p).map(|i| beta[i] * cl.v_beta[i]).sum();
        cl.beta_mean = (0..p).map(|i| beta[i] * cl.mean[i]).sum();
        let quad: f64 = (0..p).map(|i| cl.h[i] * cl.mean[i]).sum();
        cl.ln_lik = -0.5 * (cl.sum_c + self.params.ln_det_cov_x_true() + ln_det_lambda - quad);
    }

    fn detach(&mut self, flat: usize, old_label: usize, emptied: bool) {
        let p = self.params.n_covariates();
        if emptied {
            if let Some(cl) = self.cluster[old_label].take() {
                self.total_ln_lik -= cl.ln_lik;
            }
            return;
        }
        if self.rec[flat].is_none() {
            return;
        }
        let mut cl = self.cluster[old_label].take().expect("cached cluster");
        self.total_ln_lik -= cl.ln_lik;
        let rec = self.rec[flat].as_ref().expect("checked above");
        for i in 0..p * p {
            cl.lambda[i] -= rec.t_mat[i];
        }
        for i in 0..p {
            cl.h[i] -= rec.h_vec[i];
        }
        cl.sum_c -= rec.c_term;
        cl.n_obs -= 1;
        self.finish_cluster(&mut cl);
        self.total_ln_lik += cl.ln_lik;
        self.cluster[old_label] = Some(cl);
    }

    fn attach(&mut self, flat: usize, label: usize, state: &LinkageState) {
        let p = self.params.n_covariates();
        let members = state.members(label).expect("active label");
        if members.len() == 1 {
            let cl = self.build_cluster(members);
            self.total_ln_lik += cl.ln_lik;
            self.cluster[label] = Some(cl);
            return;
        }
        if self.rec[flat].is_none() {
            return;
        }
        let mut cl = self.cluster[label].take().expect("cached cluster");
        self.total_ln_lik -= cl.ln_lik;
        let rec = self.rec[flat].as_ref().expect("checked above");
        for i in 0..p * p {
            cl.lambda[i] += rec.t_mat[i];
        }
        for i in 0..p {
            cl.h[i] += rec.h_vec[i];
        }
        cl.sum_c += rec.c_term;
        cl.n_obs += 1;
        self.finish_cluster(&mut cl);
        self.total_ln_lik += cl.ln_lik;
        self.cluster[label] = Some(cl);
    }

    /// Linear-space predictive density; `1.0` when the record carries no
    /// regression observations. Dimensions up to three avoid factorization.
    fn predictive_density(&self, flat: usize, label: usize, scratch: &mut RegScratch) -> f64 {
        let Some(rec) = self.rec[flat].as_ref() else {
            return 1.0;
        };
        let cl = match self.cluster[label].as_ref() {
            Some(cl) if cl.n_obs > 0 => cl,
            // cluster without regression observations: the record's block is
            // independent of it
            _ => return rec.single_lik_lin,
        };
        let p = self.params.n_covariates();
        let m = rec.comps.len();
        let cov = &mut scratch.cov;
        let z = &mut scratch.vec;
        for a in 0..m {
            let ca = rec.comps[a] as usize;
            let mean_a = if ca == 0 {
                cl.beta_mean
            } else {
                cl.mean[ca - 1]
            };
            z[a] = rec.values[a] - mean_a;
            for b in 0..=a {
                let cb = rec.comps[b] as usize;
                let g = match (ca, cb) {
                    (0, 0) => cl.beta_v_beta,
                    (0, j) => cl.v_beta[j - 1],
                    (i, 0) => cl.v_beta[i - 1],
                    (i, j) => cl.v[(i - 1) * p + (j - 1)],
                };
                let val = g + rec.d_block[a * m + b];
                cov[a * m + b] = val;
                cov[b * m + a] = val;
            }
        }
        const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
        match m {
            1 => {
                let var = cov[0];
                (-0.5 * z[0] * z[0] / var).exp() / (TWO_PI * var).sqrt()
            }
            2 => {
                let (a, b, d) = (cov[0], cov[1], cov[3]);
                let det = a * d - b * b;
                let quad = (d * z[0] * z[0] - 2.0 * b * z[0] * z[1] + a * z[1] * z[1]) / det;
                (-0.5 * quad).exp() / (TWO_PI * det.sqrt())
            }
            3 => {
                let (a, b, c) = (cov[0], cov[1], cov[2]);
                let (d, e, f) = (cov[4], cov[5], cov[8]);
                // symmetric 3x3: inverse via cofactors
                let c00 = d * f - e * e;
                let c01 = c * e - b * f;
                let c02 = b * e - c * d;
                let det = a * c00 + b * c01 + c * c02;
                let c11 = a * f - c * c;
                let c12 = b * c - a * e;
                let c22 = a * d - b * b;
                let quad = (z[0] * (c00 * z[0] + c01 * z[1] + c02 * z[2])
                    + z[1] * (c01 * z[0] + c11 * z[1] + c12 * z[2])
                    + z[2] * (c02 * z[0] + c12 * z[1] + c22 * z[2]))
                    / det;
                (-0.5 * quad).exp() / (TWO_PI.powf(1.5) * det.sqrt())
            }
            _ => {
                let ok = chol_in_place(&mut cov[..m * m], m);
                assert!(ok, "predictive covariance must be positive definite");
                let ln_det = chol_ln_det(&cov[..m * m], m);
                let quad = {
                    let zq = &mut scratch.vec2;
                    zq[..m].copy_from_slice(&z[..m]);
                    chol_solve(&cov[..m * m], m, &mut zq[..m]);
                    (0..m).map(|a| z[a] * zq[a]).sum::<f64>()
                };
                (-0.5 * (m as f64 * LN_2PI + ln_det + quad)).exp()
            }
        }
    }

    /// Total corpus regression log likelihood under trial parameters, without
    /// touching the caches.
    fn total_under(&self, corpus: &Corpus, state: &LinkageState, params: &RegressionParams) -> f64 {
        let data = corpus.regression().expect("regression data");
        let p = params.n_covariates();
        let mut total = 0.0;
        let mut lambda = vec![0.0; p * p];
        let mut h = vec![0.0; p];
        for label in state.cluster_labels() {
            let members = state.members(label).expect("active label");
            lambda.copy_from_slice(params.prec_x_true().as_slice());
            h.iter_mut().for_each(|x| *x = 0.0);
            let mut sum_c = 0.0;
            let mut n_obs = 0;
            for &m in members {
                if let Some(rec) = build_rec_obs(data, m as usize, params) {
                    for i in 0..p * p {
                        lambda[i] += rec.t_mat[i];
                    }
                    for i in 0..p {
                        h[i] += rec.h_vec[i];
                    }
                    sum_c += rec.c_term;
                    n_obs += 1;
                }
            }
            if n_obs == 0 {
                continue;
            }
            let ok = chol_in_place(&mut lambda, p);
            assert!(ok, "cluster posterior precision must be positive definite");
            let ln_det_lambda = chol_ln_det(&lambda, p);
            let mut u = h.clone();
            chol_solve(&lambda, p, &mut u);
            let quad: f64 = (0..p).map(|i| h[i] * u[i]).sum();
            total += -0.5 * (sum_c + params.ln_det_cov_x_true() + ln_det_lambda - quad);
        }
        total
    }
}

fn build_rec_obs(data: &RegressionData, flat: usize, params: &RegressionParams) -> Option<RecObs> {
    let comps = data.observed_components(flat);
    if comps.is_empty() {
        return None;
    }
    let p = params.n_covariates();
    let m = comps.len();
    let values: Vec<f64> = comps
        .iter()
        .map(|&c| data.component_value(flat, c))
        .collect();
    // jittered noise block restricted to the observed components
    let mut d_block = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..m {
            let (ca, cb) = (comps[a], comps[b]);
            d_block[a * m + b] = if ca == 0 || cb == 0 {
                if ca == cb {
                    params.var_y_given_x()
                } else {
                    0.0
                }
            } else {
                params.cov_x_given_x()[(ca - 1, cb - 1)]
            };
        }
        d_block[a * m + a] += DIAGONAL_JITTER;
    }
    let mut d_chol = d_block.clone();
    let ok = chol_in_place(&mut d_chol, m);
    assert!(ok, "noise block must be positive definite");
    let ln_det_d = chol_ln_det(&d_chol, m);
    let mut dinv_v = values.clone();
    chol_solve(&d_chol, m, &mut dinv_v);
    let beta = params.beta();
    // coupling rows: component 0 -> beta', component j -> e_{j-1}'
    let a_entry = |row: usize, col: usize| -> f64 {
        let c = comps[row];
        if c == 0 {
            beta[col]
        } else if c - 1 == col {
            1.0
        } else {
            0.0
        }
    };
    let mut dinv_a = vec![0.0; m * p];
    for col in 0..p {
        let mut column: Vec<f64> = (0..m).map(|row| a_entry(row, col)).collect();
        chol_solve(&d_chol, m, &mut column);
        for row in 0..m {
            dinv_a[row * p + col] = column[row];
        }
    }
    let mut t_mat = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            let mut acc = 0.0;
            for row in 0..m {
                acc += a_entry(row, i) * dinv_a[row * p + j];
            }
            t_mat[i * p + j] = acc;
        }
    }
    let mut h_vec = vec![0.0; p];
    for i in 0..p {
        h_vec[i] = (0..m).map(|row| a_entry(row, i) * dinv_v[row]).sum();
    }
    let quad_v: f64 = (0..m).map(|row| values[row] * dinv_v[row]).sum();
    let c_term = m as f64 * LN_2PI + ln_det_d + quad_v;
    // singleton evidence
    let mut lambda = params.prec_x_true().as_slice().to_vec();
    for i in 0..p * p {
        lambda[i] += t_mat[i];
    }
    let ok = chol_in_place(&mut lambda, p);
    assert!(ok, "singleton precision must be positive definite");
    let ln_det_lambda = chol_ln_det(&lambda, p);
    let mut u = h_vec.clone();
    chol_solve(&lambda, p, &mut u);
    let quad_h: f64 = (0..p).map(|i| h_vec[i] * u[i]).sum();
    let single_ln_lik = -0.5 * (c_term + params.ln_det_cov_x_true() + ln_det_lambda - quad_h);
    Some(RecObs {
        comps: comps.iter().map(|&c| c as u8).collect(),
        values,
        d_block,
        t_mat,
        h_vec,
        c_term,
        single_lik_lin: single_ln_lik.exp(),
    })
}

struct RegScratch {
    cov: Vec<f64>,
    vec: Vec<f64>,
    vec2: Vec<f64>,
}

// ---------------------------------------------------------------------------
// adaptive proposal bookkeeping
// ---------------------------------------------------------------------------

struct AdaptiveScale {
    sd: f64,
    window_accepts: u32,
    window_total: u32,
    post_accepts: u64,
    post_total: u64,
}

impl AdaptiveScale {
    fn new(sd: f64) -> Self {
        AdaptiveScale {
            sd,
            window_accepts: 0,
            window_total: 0,
            post_accepts: 0,
            post_total: 0,
        }
    }

    fn record(&mut self, accepted: bool, in_burn_in: bool, adapt: bool) {
        if in_burn_in {
            if !adapt {
                return;
            }
            self.window_accepts += u32::from(accepted);
            self.window_total += 1;
            if self.window_total == 50 {
                let rate = self.window_accepts as f64 / 50.0;
                if rate < 0.25 {
                    self.sd *= 0.8;
                } else if rate > 0.45 {
                    self.sd *= 1.25;
                }
                self.sd = self.sd.clamp(1e-3, 20.0);
                self.window_accepts = 0;
                self.window_total = 0;
            }
        } else {
            self.post_accepts += u64::from(accepted);
            self.post_total += 1;
        }
    }

    fn rate(&self) -> Option<f64> {
        if self.post_total == 0 {
            None
        } else {
            Some(self.post_accepts as f64 / self.post_total as f64)
        }
    }
}

// ---------------------------------------------------------------------------
// the chain
// ---------------------------------------------------------------------------

struct Chain<'a> {
    corpus: &'a Corpus,
    model: &'a ModelSpec,
    cfg: &'a SamplerConfig,
    state: LinkageState,
    alpha: Vec<f64>,
    /// per-cluster, per-feature linear marginals
    hm_cache: Vec<Option<Vec<f64>>>,
    reg: Option<RegCtx>,
    rng: ChaCha8Rng,
    scan: Vec<RecordId>,
    weight_buf: Vec<f64>,
    target_buf: Vec<AllocTarget>,
    reg_scratch: RegScratch,
    alpha_scales: Vec<AdaptiveScale>,
    beta_scales: Vec<AdaptiveScale>,
    var_y_scale: AdaptiveScale,
    var_x_scales: Vec<AdaptiveScale>,
}

impl<'a> Chain<'a> {
    fn new(
        corpus: &'a Corpus,
        model: &'a ModelSpec,
        cfg: &'a SamplerConfig,
        initial: Option<&LinkageState>,
        fixed_lambda: bool,
    ) -> Result<Self, SamplerError> {
        if cfg.burn_in >= cfg.iterations {
            return Err(SamplerError::BadIterationPlan {
                iterations: cfg.iterations,
                burn_in: cfg.burn_in,
            });
        }
        if cfg.thin == 0 {
            return Err(SamplerError::ZeroThin);
        }
        if model.features.n_features() != corpus.n_features() {
            return Err(SamplerError::FeatureMismatch {
                spec: model.features.n_features(),
                corpus: corpus.n_features(),
            });
        }
        model.prior.validate_for(corpus.n_records())?;
        if matches!(model.prior, PartitionPrior::ConstrainedPyp(_))
            && corpus.layout().n_databases() != 2
        {
            return Err(SamplerError::NotBipartite);
        }
        let state = match initial {
            Some(s) => s.clone(),
            None => LinkageState::all_singletons(corpus.layout().db_sizes(), model.constraint),
        };
        let reg = match (cfg.mode, &model.regression) {
            (Mode::Joint, Some(spec)) => Some(RegCtx::new(corpus, &state, spec)?),
            (Mode::Joint, None) => return Err(SamplerError::MissingRegression),
            (Mode::LinkageOnly, _) => None,
        };
        let n = corpus.n_records();
        let p_feat = corpus.n_features();
        let scan: Vec<RecordId> = if fixed_lambda {
            Vec::new()
        } else if matches!(model.prior, PartitionPrior::ConstrainedPyp(_)) {
            // first-database records anchor the constrained construction
            (0..corpus.layout().db_sizes()[1])
                .map(|pos| RecordId::new(1, pos))
                .collect()
        } else {
            corpus.layout().record_ids().collect()
        };
        let alpha = if model.alpha_init.len() == p_feat {
            model.alpha_init.clone()
        } else if model.alpha_init.len() == 1 {
            vec![model.alpha_init[0]; p_feat]
        } else if p_feat == 0 {
            Vec::new()
        } else {
            return Err(SamplerError::BadAlphaInit);
        };
        let max_block = corpus.regression().map(|d| d.n_covariates + 1).unwrap_or(1);
        let mut chain = Chain {
            corpus,
            model,
            cfg,
            state,
            alpha,
            hm_cache: vec![None; n.max(1)],
            reg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            scan,
            weight_buf: Vec::with_capacity(n + 1),
            target_buf: Vec::with_capacity(n + 1),
            reg_scratch: RegScratch {
                cov: vec![0.0; max_block * max_block],
                vec: vec![0.0; max_block],
                vec2: vec![0.0; max_block],
            },
            alpha_scales: (0..p_feat)
                .map(|_| AdaptiveScale::new(cfg.proposal_sd_alpha))
                .collect(),
            beta_scales: Vec::new(),
            var_y_scale: AdaptiveScale::new(cfg.proposal_sd_logvar),
            var_x_scales: Vec::new(),
        };
        if let Some(reg) = &chain.reg {
            let p = reg.params.n_covariates();
            chain.beta_scales = (0..p)
                .map(|_| AdaptiveScale::new(cfg.proposal_sd_beta))
                .collect();
            chain.var_x_scales = (0..p)
                .map(|_| AdaptiveScale::new(cfg.proposal_sd_logvar))
                .collect();
        }
        chain.rebuild_hm_cache();
        Ok(chain)
    }

    fn rebuild_hm_cache(&mut self) {
        for slot in self.hm_cache.iter_mut() {
            *slot = None;
        }
        let labels: Vec<usize> = self.state.cluster_labels().collect();
        for label in labels {
            self.refresh_cluster_marginals(label);
        }
    }

    fn refresh_cluster_marginals(&mut self, label: usize) {
        let members = self.state.members(label).expect("active label");
        let p = self.corpus.n_features();
        let mut lin = vec![0.0; p];
        let mut codes: Vec<u32> = Vec::with_capacity(members.len());
        for (l, slot) in lin.iter_mut().enumerate() {
            codes.clear();
            codes.extend(members.iter().map(|&m| self.corpus.codes()[l][m as usize]));
            *slot = hitmiss::cluster_feature_marginal_fast(
                &codes,
                self.alpha[l],
                self.model.features.table(l),
            );
        }
        self.hm_cache[label] = Some(lin);
    }

    /// Hit-and-miss likelihood ratio for adding record `flat` to `label`,
    /// linear in the cluster size. Falls back to the log-space module path
    /// when a cached marginal has underflowed.
    fn hm_ratio_linear(&self, flat: usize, label: usize) -> f64 {
        let members = self.state.members(label).expect("active label");
        let cache = self.hm_cache[label].as_ref().expect("cached marginals");
        let p = self.corpus.n_features();
        let mut ratio = 1.0f64;
        for l in 0..p {
            let table = self.model.features.table(l);
            let theta = table.theta();
            let alpha = self.alpha[l];
            let v = self.corpus.codes()[l][flat] as usize;
            let base = cache[l];
            if base < 1e-250 {
                let log_ratio = hitmiss::log_ratio_add_record(
                    self.corpus.codes(),
                    members,
                    flat,
                    &self.alpha,
                    &self.model.features,
                )
                .expect("valid codes");
                return log_ratio.exp();
            }
            if alpha == 0.0 {
                let all_match = members
                    .iter()
                    .all(|&m| self.corpus.codes()[l][m as usize] as usize == v);
                if !all_match {
                    return 0.0;
                }
                continue;
            }
            let mut gprod = 1.0;
            let column = &self.corpus.codes()[l];
            for &m in members {
                let c = column[m as usize] as usize;
                gprod *= if c == v {
                    1.0 - alpha + alpha * theta[v]
                } else {
                    alpha * theta[c]
                };
            }
            ratio *= theta[v] * (alpha + (1.0 - alpha) * gprod / base);
        }
        ratio
    }

    fn new_cluster_hm_weight_linear(&self, flat: usize) -> f64 {
        (0..self.corpus.n_features())
            .map(|l| {
                let v = self.corpus.codes()[l][flat] as usize;
                self.model.features.table(l).theta()[v]
            })
            .product()
    }

    /// Remove `r` from its cluster and keep the caches consistent.
    fn detach_record(&mut self, r: RecordId) -> usize {
        let flat = self.state.layout().flat(r).expect("record in range");
        let old_label = self.state.detach(r).expect("assigned record");
        let emptied = self.state.cluster_size(old_label) == 0;
        if emptied {
            self.hm_cache[old_label] = None;
        } else {
            self.refresh_cluster_marginals(old_label);
        }
        if let Some(reg) = self.reg.as_mut() {
            reg.detach(flat, old_label, emptied);
        }
        flat
    }

    /// Fill `target_buf`/`weight_buf` with unnormalized conditional weights
    /// of the detached record `r`, in linear space; disallowed targets are
    /// omitted and factors shared by every target (prior denominators) are
    /// dropped. Returns the weight total; a zero or non-finite total signals
    /// the caller to use the log fallback.
    fn fill_weights_linear(&mut self, r: RecordId, flat: usize) -> f64 {
        self.weight_buf.clear();
        self.target_buf.clear();
        let constrained = self.state.constraint() == Constraint::NoWithinDbDuplicates;
        match self.model.prior {
            PartitionPrior::Pyp(p) => {
                for label in self.state.cluster_labels() {
                    if constrained && self.state.cluster_holds_db(label, r.db, None) {
                        continue;
                    }
                    let size = self.state.cluster_size(label);
                    self.target_buf.push(AllocTarget::Existing(label));
                    self.weight_buf.push(size as f64 - p.discount);
                }
                self.target_buf.push(AllocTarget::New);
                self.weight_buf
                    .push(self.state.k() as f64 * p.discount + p.strength);
            }
            PartitionPrior::UniformLabels { n_pop } => {
                for label in self.state.cluster_labels() {
                    if constrained && self.state.cluster_holds_db(label, r.db, None) {
                        continue;
                    }
                    self.target_buf.push(AllocTarget::Existing(label));
                    self.weight_buf.push(1.0);
                }
                self.target_buf.push(AllocTarget::New);
                self.weight_buf
                    .push(n_pop.saturating_sub(self.state.k()) as f64);
            }
            PartitionPrior::UniformPartitions { n_pop } => {
                for label in self.state.cluster_labels() {
                    if constrained && self.state.cluster_holds_db(label, r.db, None) {
                        continue;
                    }
                    self.target_buf.push(AllocTarget::Existing(label));
                    self.weight_buf.push(1.0);
                }
                self.target_buf.push(AllocTarget::New);
                self.weight_buf
                    .push(if self.state.k() < n_pop { 1.0 } else { 0.0 });
            }
            PartitionPrior::ConstrainedPyp(p) => {
                let layout = self.state.layout();
                let n1 = layout.db_sizes()[0];
                let n2 = layout.db_sizes()[1];
                for label in self.state.cluster_labels() {
                    let members = self.state.members(label).expect("active label");
                    if members.len() == 1 && layout.db_of_flat(members[0] as usize) == 0 {
                        self.target_buf.push(AllocTarget::Existing(label));
                        self.weight_buf.push(1.0 - p.discount);
                    }
                }
                // correction product over the later scan positions
                let base_flat = layout.flat(RecordId::new(1, 0)).expect("db 1 present");
                let mut count = 0usize;
                for pos in 0..r.pos {
                    if let Some(label) = self.state.labels_ref()[base_flat + pos] {
                        count += usize::from(self.state.cluster_size(label) == 1);
                    }
                }
                let mut correction = 1.0f64;
                let mut running = count;
                for l in (r.pos + 1)..n2 {
                    let k_2l = (n1 + running) as f64;
                    let base = k_2l - l as f64 * (1.0 - p.discount) + p.strength;
                    correction *= base / (base + 1.0);
                    if let Some(label) = self.state.labels_ref()[base_flat + l] {
                        running += usize::from(self.state.cluster_size(label) == 1);
                    }
                }
                self.target_buf.push(AllocTarget::New);
                self.weight_buf
                    .push((self.state.k() as f64 * p.discount + p.strength) * correction);
            }
        }

        let mut total = 0.0;
        for i in 0..self.target_buf.len() {
            let factor = match self.target_buf[i] {
                AllocTarget::Existing(label) => {
                    let mut w = self.hm_ratio_linear(flat, label);
                    if let Some(reg) = self.reg.as_ref() {
                        w *= reg.predictive_density(flat, label, &mut self.reg_scratch);
                    }
                    w
                }
                AllocTarget::New => {
                    let mut w = self.new_cluster_hm_weight_linear(flat);
                    if let Some(reg) = self.reg.as_ref() {
                        w *= reg.rec[flat].as_ref().map_or(1.0, |r| r.single_lik_lin);
                    }
                    w
                }
            };
            self.weight_buf[i] *= factor;
            total += self.weight_buf[i];
        }
        total
    }

    /// Log-space fallback via the module-backed reference weights, for the
    /// rare updates where every linear weight underflows.
    fn fill_weights_log(&mut self, r: RecordId) -> Result<(), SamplerError> {
        let reference = gibbs_log_weights(
            self.corpus,
            self.model,
            &self.state,
            r,
            &self.alpha,
            self.reg.as_ref().map(|reg| &reg.params),
        )?;
        self.weight_buf.clear();
        self.target_buf.clear();
        for (target, w) in reference {
            if w == f64::NEG_INFINITY {
                continue;
            }
            self.target_buf.push(target);
            self.weight_buf.push(w);
        }
        // shift and exponentiate in place
        let max = self
            .weight_buf
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        for w in self.weight_buf.iter_mut() {
            *w = (*w - max).exp();
        }
        Ok(())
    }

    /// One full-conditional draw for record `r`.
    fn update_record(&mut self, r: RecordId) -> Result<(), SamplerError> {
        let flat = self.detach_record(r);
        let mut total = self.fill_weights_linear(r, flat);
        if !(total > 0.0) || !total.is_finite() {
            self.fill_weights_log(r)?;
            total = self.weight_buf.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                return Err(SamplerError::NoTarget {
                    db: r.db,
                    pos: r.pos,
                });
            }
        }
        let u: f64 = self.rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = self.target_buf.len() - 1;
        for (i, w) in self.weight_buf.iter().enumerate() {
            acc += w;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let target = match self.target_buf[chosen] {
            AllocTarget::Existing(label) => MoveTarget::Existing(label),
            AllocTarget::New => MoveTarget::New,
        };
        let new_label = self.state.attach(r, target).expect("valid target");
        self.refresh_cluster_marginals(new_label);
        if let Some(reg) = self.reg.as_mut() {
            reg.attach(flat, new_label, &self.state);
        }
        Ok(())
    }

    fn sweep_alpha(&mut self, in_burn_in: bool) {
        for l in 0..self.corpus.n_features() {
            let current = self.alpha[l];
            let current_logit = (current / (1.0 - current)).ln();
            let sd = self.alpha_scales[l].sd;
            let noise: f64 = standard_normal(&mut self.rng);
            let proposal_logit = current_logit + sd * noise;
            let proposal = 1.0 / (1.0 + (-proposal_logit).exp());
            let accepted = if proposal <= 0.0 || proposal >= 1.0 {
                false
            } else {
                let target = |a: f64| {
                    hitmiss::alpha_conditional_log_density(
                        l,
                        a,
                        &self.state,
                        self.corpus.codes(),
                        &self.model.features,
                        self.model.beta_prior,
                    )
                };
                let log_ratio = target(proposal) - target(current)
                    + (proposal * (1.0 - proposal)).ln()
                    - (current * (1.0 - current)).ln();
                log_ratio >= 0.0 || self.rng.random::<f64>() < log_ratio.exp()
            };
            if accepted {
                self.alpha[l] = proposal;
                let labels: Vec<usize> = self.state.cluster_labels().collect();
                for label in labels {
                    self.refresh_cluster_marginals(label);
                }
            }
            self.alpha_scales[l].record(accepted, in_burn_in, self.cfg.adapt);
        }
    }

    fn sweep_regression(&mut self, in_burn_in: bool) {
        let Some(reg) = self.reg.as_mut() else {
            return;
        };
        let p = reg.params.n_covariates();
        let mut lik = reg.total_ln_lik;
        let mut accepted_any = false;
        for j in 0..p {
            let sd = self.beta_scales[j].sd;
            let step = sd * standard_normal(&mut self.rng);
            let mut beta: Vec<f64> = reg.params.beta().iter().copied().collect();
            beta[j] += step;
            let proposal = RegressionParams::new(
                beta,
                reg.params.var_y_given_x(),
                reg.params.cov_x_given_x().clone(),
                reg.params.cov_x_true().clone(),
            )
            .expect("same covariances");
            let prop_lik = reg.total_under(self.corpus, &self.state, &proposal);
            let log_ratio = prop_lik - lik;
            let accepted = log_ratio >= 0.0 || self.rng.random::<f64>() < log_ratio.exp();
            if accepted {
                reg.params = proposal;
                lik = prop_lik;
                accepted_any = true;
            }
            self.beta_scales[j].record(accepted, in_burn_in, self.cfg.adapt);
        }
        {
            let sd = self.var_y_scale.sd;
            let u = reg.params.var_y_given_x().ln();
            let u_prop = u + sd * standard_normal(&mut self.rng);
            let proposal = RegressionParams::new(
                reg.params.beta().iter().copied().collect(),
                u_prop.exp(),
                reg.params.cov_x_given_x().clone(),
                reg.params.cov_x_true().clone(),
            )
            .expect("same covariances");
            let prop_lik = reg.total_under(self.corpus, &self.state, &proposal);
            let log_ratio = prop_lik - lik + reg.var_y_prior.log_density_u(u_prop)
                - reg.var_y_prior.log_density_u(u);
            let accepted = log_ratio >= 0.0 || self.rng.random::<f64>() < log_ratio.exp();
            if accepted {
                reg.params = proposal;
                lik = prop_lik;
                accepted_any = true;
            }
            self.var_y_scale
                .record(accepted, in_burn_in, self.cfg.adapt);
        }
        for j in 0..p {
            let sd = self.var_x_scales[j].sd;
            let u = reg.params.cov_x_given_x()[(j, j)].ln();
            let u_prop = u + sd * standard_normal(&mut self.rng);
            let mut cov = reg.params.cov_x_given_x().clone();
            cov[(j, j)] = u_prop.exp();
            let proposal = RegressionParams::new(
                reg.params.beta().iter().copied().collect(),
                reg.params.var_y_given_x(),
                cov,
                reg.params.cov_x_true().clone(),
            );
            // off-diagonal mass can make a shrunk diagonal indefinite
            let accepted = match proposal {
                Ok(proposal) => {
                    let prop_lik = reg.total_under(self.corpus, &self.state, &proposal);
                    let log_ratio = prop_lik - lik + reg.var_x_prior.log_density_u(u_prop)
                        - reg.var_x_prior.log_density_u(u);
                    let ok = log_ratio >= 0.0 || self.rng.random::<f64>() < log_ratio.exp();
                    if ok {
                        reg.params = proposal;
                        lik = prop_lik;
                        accepted_any = true;
                    }
                    ok
                }
                Err(_) => false,
            };
            self.var_x_scales[j].record(accepted, in_burn_in, self.cfg.adapt);
        }
        let _ = lik;
        if accepted_any {
            reg.rebuild(self.corpus, &self.state);
        }
    }

    fn assert_constraint(&self) {
        if self.state.constraint() != Constraint::NoWithinDbDuplicates {
            return;
        }
        for label in self.state.cluster_labels() {
            let members = self.state.members(label).expect("active label");
            for i in 0..members.len() {
                for j in (i + 1)..members.len() {
                    let a = self.state.layout().db_of_flat(members[i] as usize);
                    let b = self.state.layout().db_of_flat(members[j] as usize);
                    assert_ne!(a, b, "constrained chain visited a violating state");
                }
            }
        }
    }

    fn run(&mut self) -> Result<PosteriorSamples, SamplerError> {
        let mut kept = Vec::new();
        let mut pair_counts: BTreeMap<(RecordId, RecordId), u32> = BTreeMap::new();
        let mut pair_sets = self.cfg.keep_link_sets.then(Vec::new);
        let mut scan = self.scan.clone();
        for iter in 0..self.cfg.iterations {
            let in_burn_in = iter < self.cfg.burn_in;
            if self.cfg.random_scan {
                for i in (1..scan.len()).rev() {
                    let j = self.rng.random_range(0..=i);
                    scan.swap(i, j);
                }
            }
            for &r in &scan {
                self.update_record(r)?;
            }
            self.sweep_alpha(in_burn_in);
            if self.cfg.mode == Mode::Joint {
                self.sweep_regression(in_burn_in);
            }
            self.assert_constraint();
            if !in_burn_in && (iter - self.cfg.burn_in) % self.cfg.thin == 0 {
                let summary = self.state.summary();
                let regression = self.reg.as_ref().map(|reg| RegressionSample {
                    beta: reg.params.beta().iter().copied().collect(),
                    var_y: reg.params.var_y_given_x(),
                    var_x: (0..reg.params.n_covariates())
                        .map(|j| reg.params.cov_x_given_x()[(j, j)])
                        .collect(),
                });
                kept.push(IterationSample {
                    iteration: iter,
                    k: summary.k,
                    t: summary.t,
                    alpha: self.alpha.clone(),
                    regression,
                });
                let links = self.state.pairwise_links();
                for &pair in &links {
                    *pair_counts.entry(pair).or_insert(0) += 1;
                }
                if let Some(sets) = pair_sets.as_mut() {
                    sets.push(links);
                }
            }
        }
        Ok(PosteriorSamples {
            kept,
            pair_counts,
            pair_sets,
            acceptance: AcceptanceReport {
                alpha: self.alpha_scales.iter().map(|s| s.rate()).collect(),
                beta: self.beta_scales.iter().map(|s| s.rate()).collect(),
                var_y: self.var_y_scale.rate(),
                var_x: self.var_x_scales.iter().map(|s| s.rate()).collect(),
            },
            final_labels: self.state.labels_vec(),
        })
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Conditional log-weights the chain's cached path would use for record `r`
/// in `state`. Exposed so tests can hold it against [`gibbs_log_weights`];
/// disallowed targets are omitted, and the weights may differ from the
/// reference by a common shift because per-update constants are dropped.
pub fn conditional_log_weights(
    corpus: &Corpus,
    model: &ModelSpec,
    cfg: &SamplerConfig,
    state: &LinkageState,
    r: RecordId,
) -> Result<Vec<(AllocTarget, f64)>, SamplerError> {
    let mut chain = Chain::new(corpus, model, cfg, Some(state), false)?;
    let flat = chain.detach_record(r);
    let total = chain.fill_weights_linear(r, flat);
    if !(total > 0.0) || !total.is_finite() {
        chain.fill_weights_log(r)?;
    }
    Ok(chain
        .target_buf
        .iter()
        .copied()
        .zip(chain.weight_buf.iter().map(|w| w.ln()))
        .collect())
}

/// Runs one chain from the all-singletons state.
pub fn run_chain(
    corpus: &Corpus,
    model: &ModelSpec,
    cfg: &SamplerConfig,
) -> Result<PosteriorSamples, SamplerError> {
    Chain::new(corpus, model, cfg, None, false)?.run()
}

/// Runs one chain starting from a given state.
pub fn run_chain_from(
    corpus: &Corpus,
    model: &ModelSpec,
    cfg: &SamplerConfig,
    initial: &LinkageState,
) -> Result<PosteriorSamples, SamplerError> {
    Chain::new(corpus, model, cfg, Some(initial), false)?.run()
}

/// Runs a regression-only chain with the linkage structure frozen at
/// `fixed`: only the regression parameters are updated.
pub fn run_regression_chain(
    corpus: &Corpus,
    model: &ModelSpec,
    cfg: &SamplerConfig,
    fixed: &LinkageState,
) -> Result<PosteriorSamples, SamplerError> {
    let mut cfg = cfg.clone();
    cfg.mode = Mode::Joint;
    Chain::new(corpus, model, &cfg, Some(fixed), true)?.run()
}

/// Runs `n_chains` independent chains with seeds `cfg.seed + i`, in parallel.
pub fn run_chains(
    corpus: &Corpus,
    model: &ModelSpec,
    cfg: &SamplerConfig,
    n_chains: usize,
) -> Result<Vec<PosteriorSamples>, SamplerError> {
    let mut results: Vec<Option<Result<PosteriorSamples, SamplerError>>> =
        (0..n_chains).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for i in 0..n_chains {
            let mut chain_cfg = cfg.clone();
            chain_cfg.seed = cfg.seed.wrapping_add(i as u64);
            handles.push(scope.spawn(move || run_chain(corpus, model, &chain_cfg)));
        }
        for (i, handle) in handles.into_iter().enumerate() {
            results[i] = Some(handle.join().expect("chain thread"));
        }
    });
    results.into_iter().map(|r| r.expect("joined")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hitmiss::FeatureTable;

    fn tiny_corpus(codes: Vec<Vec<u32>>, cardinalities: Vec<usize>, n: usize) -> Corpus {
        Corpus::new(&[n], cardinalities, codes, None).unwrap()
    }

    fn tiny_model(prior: PartitionPrior, theta: Vec<Vec<f64>>) -> ModelSpec {
        ModelSpec {
            prior,
            constraint: Constraint::Unconstrained,
            features: FeatureSpec::new(
                theta
                    .into_iter()
                    .map(|t| FeatureTable::new(t).unwrap())
                    .collect(),
            ),
            beta_prior: BetaPrior::default(),
            alpha_init: vec![0.1],
            regression: None,
        }
    }

    #[test]
    fn config_validation() {
        let corpus = tiny_corpus(vec![vec![0, 1]], vec![2], 2);
        let model = tiny_model(PartitionPrior::pyp(1.0, 0.5).unwrap(), vec![vec![0.5, 0.5]]);
        let cfg = SamplerConfig {
            iterations: 10,
            burn_in: 10,
            ..SamplerConfig::default()
        };
        assert!(matches!(
            run_chain(&corpus, &model, &cfg),
            Err(SamplerError::BadIterationPlan { .. })
        ));
    }

    #[test]
    fn single_kept_sample() {
        let corpus = tiny_corpus(vec![vec![0, 1]], vec![2], 2);
        let model = tiny_model(PartitionPrior::pyp(1.0, 0.5).unwrap(), vec![vec![0.5, 0.5]]);
        let cfg = SamplerConfig {
            iterations: 6,
            burn_in: 5,
            thin: 1,
            ..SamplerConfig::default()
        };
        let samples = run_chain(&corpus, &model, &cfg).unwrap();
        assert_eq!(samples.n_kept(), 1);
    }

    #[test]
    fn identical_seeds_identical_samples() {
        let corpus = tiny_corpus(vec![vec![0, 1, 0], vec![1, 1, 0]], vec![2, 2], 3);
        let model = tiny_model(
            PartitionPrior::pyp(1.0, 0.5).unwrap(),
            vec![vec![0.5, 0.5], vec![0.4, 0.6]],
        );
        let cfg = SamplerConfig {
            iterations: 200,
            burn_in: 50,
            seed: 99,
            ..SamplerConfig::default()
        };
        let a = run_chain(&corpus, &model, &cfg).unwrap();
        let b = run_chain(&corpus, &model, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gibbs_weights_normalize() {
        let corpus = tiny_corpus(vec![vec![0, 0, 1]], vec![2], 3);
        let model = tiny_model(PartitionPrior::pyp(1.0, 0.5).unwrap(), vec![vec![0.5, 0.5]]);
        let mut state = LinkageState::all_singletons(&[3], Constraint::Unconstrained);
        let r = RecordId::new(0, 2);
        state.detach(r).unwrap();
        let weights = gibbs_log_weights(&corpus, &model, &state, r, &[0.1], None).unwrap();
        let logs: Vec<f64> = weights.iter().map(|&(_, w)| w).collect();
        let lse = crate::numeric::logsumexp(&logs);
        let total: f64 = logs.iter().map(|w| (w - lse).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prior_only_weights_without_features() {
        // no features: the draw follows the prior allocation weights alone
        let corpus = Corpus::new(&[3], vec![], vec![], None).unwrap();
        let model = tiny_model(PartitionPrior::uniform_labels(10), vec![]);
        let mut state = LinkageState::all_singletons(&[3], Constraint::Unconstrained);
        let r = RecordId::new(0, 1);
        state.detach(r).unwrap();
        let weights = gibbs_log_weights(&corpus, &model, &state, r, &[], None).unwrap();
        let prior = model.prior.predictive_alloc(&state, r).unwrap();
        for ((_, w), (_, pw)) in weights.iter().zip(prior.iter()) {
            assert_eq!(w, pw);
        }
    }
}
