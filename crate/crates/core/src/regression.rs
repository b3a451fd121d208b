//! Cluster-wise marginal Gaussian likelihoods for the downstream regression.
//!
//! Records in one cluster share a latent covariate vector; conditional on the
//! cluster the stacked `(y, x)` blocks are zero-mean multivariate normal with
//! covariance `J_n (x) R + I_n (x) D`, where `R = A Sigma_xtrue A'` couples the
//! blocks through the latent covariates and `D` holds the residual and
//! measurement-error variances. Missing components are marginalized by plain
//! row/column selection.
//!
//! Two evaluation routes are provided: a dense assembled-covariance Cholesky
//! for small clusters, and a low-rank route that factorizes only `p x p`
//! matrices by integrating the latent covariates directly. Both regularize
//! the observed covariance with the same `1e-10` diagonal jitter, so they
//! agree to floating-point accuracy.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::corpus::RegressionData;
use crate::partition::{DbLayout, LinkageState, MoveTarget, RecordId};

/// Diagonal regularization applied to the observed covariance before any
/// factorization, identically on both evaluation routes.
pub const DIAGONAL_JITTER: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum RegressionError {
    #[error("{context}: matrix of dim {dim} is not positive definite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveDefinite {
        context: &'static str,
        dim: usize,
        min_eigenvalue: f64,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("record is not assigned to a cluster")]
    DetachedRecord,
}

fn spd_error(context: &'static str, m: &DMatrix<f64>) -> RegressionError {
    let min_eigenvalue = m
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    RegressionError::NotPositiveDefinite {
        context,
        dim: m.nrows(),
        min_eigenvalue,
    }
}

fn check_spd(context: &'static str, m: &DMatrix<f64>) -> Result<(), RegressionError> {
    if m.nrows() != m.ncols() {
        return Err(RegressionError::DimensionMismatch(format!(
            "{context}: {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let sym_err = (m - m.transpose()).abs().max();
    if sym_err > 1e-10 {
        return Err(RegressionError::DimensionMismatch(format!(
            "{context}: asymmetric by {sym_err:.3e}"
        )));
    }
    if Cholesky::new(m.clone()).is_none() {
        return Err(spd_error(context, m));
    }
    Ok(())
}

/// Coefficients and covariance blocks of the regression layer.
#[derive(Debug, Clone)]
pub struct RegressionParams {
    beta: DVector<f64>,
    var_y_given_x: f64,
    cov_x_given_x: DMatrix<f64>,
    cov_x_true: DMatrix<f64>,
    // cached for the structured route
    prec_x_true: DMatrix<f64>,
    ln_det_cov_x_true: f64,
    dense_cutoff: usize,
}

impl RegressionParams {
    pub fn new(
        beta: Vec<f64>,
        var_y_given_x: f64,
        cov_x_given_x: DMatrix<f64>,
        cov_x_true: DMatrix<f64>,
    ) -> Result<Self, RegressionError> {
        let p = beta.len();
        if cov_x_given_x.nrows() != p || cov_x_true.nrows() != p {
            return Err(RegressionError::DimensionMismatch(format!(
                "beta has {} coefficients, covariance blocks are {}x{} and {}x{}",
                p,
                cov_x_given_x.nrows(),
                cov_x_given_x.ncols(),
                cov_x_true.nrows(),
                cov_x_true.ncols()
            )));
        }
        if var_y_given_x <= 0.0 {
            return Err(RegressionError::DimensionMismatch(format!(
                "response variance must be positive, got {var_y_given_x}"
            )));
        }
        check_spd("measurement covariance", &cov_x_given_x)?;
        check_spd("latent covariate covariance", &cov_x_true)?;
        let chol = Cholesky::new(cov_x_true.clone()).expect("checked above");
        let ln_det_cov_x_true = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let prec_x_true = chol.inverse();
        Ok(RegressionParams {
            beta: DVector::from_vec(beta),
            var_y_given_x,
            cov_x_given_x,
            cov_x_true,
            prec_x_true,
            ln_det_cov_x_true,
            dense_cutoff: 3,
        })
    }

    /// Single-covariate shorthand.
    pub fn simple(
        beta: f64,
        var_y_given_x: f64,
        var_x_given_x: f64,
        var_x_true: f64,
    ) -> Result<Self, RegressionError> {
        RegressionParams::new(
            vec![beta],
            var_y_given_x,
            DMatrix::from_element(1, 1, var_x_given_x),
            DMatrix::from_element(1, 1, var_x_true),
        )
    }

    /// Cluster sizes at or above this use the low-rank route.
    pub fn with_dense_cutoff(mut self, cutoff: usize) -> Self {
        self.dense_cutoff = cutoff.max(1);
        self
    }

    pub fn n_covariates(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    pub fn var_y_given_x(&self) -> f64 {
        self.var_y_given_x
    }

    pub fn cov_x_given_x(&self) -> &DMatrix<f64> {
        &self.cov_x_given_x
    }

    pub fn cov_x_true(&self) -> &DMatrix<f64> {
        &self.cov_x_true
    }

    pub(crate) fn prec_x_true(&self) -> &DMatrix<f64> {
        &self.prec_x_true
    }

    pub(crate) fn ln_det_cov_x_true(&self) -> f64 {
        self.ln_det_cov_x_true
    }

    /// `A = [beta'; I_p]`: maps the latent covariates to the mean of one
    /// record's `(y, x)` block.
    pub fn coupling(&self) -> DMatrix<f64> {
        let p = self.n_covariates();
        let mut a = DMatrix::zeros(p + 1, p);
        for j in 0..p {
            a[(0, j)] = self.beta[j];
            a[(j + 1, j)] = 1.0;
        }
        a
    }

    /// `D = diag(var_y, Sigma_x_given_x)`: the per-record noise block.
    pub fn noise_block(&self) -> DMatrix<f64> {
        let p = self.n_covariates();
        let mut d = DMatrix::zeros(p + 1, p + 1);
        d[(0, 0)] = self.var_y_given_x;
        d.view_mut((1, 1), (p, p)).copy_from(&self.cov_x_given_x);
        d
    }

    /// Cross-record coupling block `R = A Sigma_xtrue A'`.
    pub fn coupling_block(&self) -> DMatrix<f64> {
        let a = self.coupling();
        &a * &self.cov_x_true * a.transpose()
    }
}

/// Which components of the `(y, x_1..x_p)` block each cluster member reports.
/// Component 0 is the response; component `j` is covariate `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterObsPattern {
    entries: Vec<(RecordId, Vec<usize>)>,
}

impl ClusterObsPattern {
    pub fn new(entries: Vec<(RecordId, Vec<usize>)>) -> Self {
        ClusterObsPattern { entries }
    }

    /// Pattern and stacked observed values for a cluster; records without any
    /// observed component are dropped. Returns `None` when nothing remains.
    pub fn from_cluster(
        layout: &DbLayout,
        data: &RegressionData,
        members: &[u32],
    ) -> Option<(Self, Vec<f64>)> {
        let mut entries = Vec::new();
        let mut values = Vec::new();
        for &m in members {
            let flat = m as usize;
            let comps = data.observed_components(flat);
            if comps.is_empty() {
                continue;
            }
            for &c in &comps {
                values.push(data.component_value(flat, c));
            }
            entries.push((layout.record_id(flat), comps));
        }
        if entries.is_empty() {
            None
        } else {
            Some((ClusterObsPattern { entries }, values))
        }
    }

    pub fn entries(&self) -> &[(RecordId, Vec<usize>)] {
        &self.entries
    }

    pub fn n_records(&self) -> usize {
        self.entries.len()
    }

    pub fn total_components(&self) -> usize {
        self.entries.iter().map(|(_, c)| c.len()).sum()
    }
}

/// Full `(n(p+1)) x (n(p+1))` covariance of a size-`n` cluster with all
/// components observed: `J_n (x) R + I_n (x) D`.
pub fn build_full_covariance(n: usize, params: &RegressionParams) -> DMatrix<f64> {
    assert!(n >= 1, "cluster size must be at least 1");
    let b = params.n_covariates() + 1;
    let r = params.coupling_block();
    let d = params.noise_block();
    let mut cov = DMatrix::zeros(n * b, n * b);
    for i in 0..n {
        for j in 0..n {
            let mut view = cov.view_mut((i * b, j * b), (b, b));
            view.copy_from(&r);
            if i == j {
                view += &d;
            }
        }
    }
    cov
}

/// Observed-submatrix covariance for a pattern (the raw model covariance,
/// before jitter).
pub fn observed_covariance(pattern: &ClusterObsPattern, params: &RegressionParams) -> DMatrix<f64> {
    let b = params.n_covariates() + 1;
    let full = build_full_covariance(pattern.n_records(), params);
    let mut idx = Vec::with_capacity(pattern.total_components());
    for (i, (_, comps)) in pattern.entries.iter().enumerate() {
        for &c in comps {
            idx.push(i * b + c);
        }
    }
    DMatrix::from_fn(idx.len(), idx.len(), |a, c| full[(idx[a], idx[c])])
}

/// Dense route: assemble the observed covariance, jitter, factorize.
pub fn log_lik_dense(
    pattern: &ClusterObsPattern,
    values: &[f64],
    params: &RegressionParams,
) -> Result<f64, RegressionError> {
    if pattern.entries.is_empty() {
        return Ok(0.0);
    }
    let m = pattern.total_components();
    if values.len() != m {
        return Err(RegressionError::DimensionMismatch(format!(
            "{} values for {} observed components",
            values.len(),
            m
        )));
    }
    let mut cov = observed_covariance(pattern, params);
    for i in 0..m {
        cov[(i, i)] += DIAGONAL_JITTER;
    }
    let chol = Cholesky::new(cov.clone()).ok_or_else(|| spd_error("observed covariance", &cov))?;
    let ln_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let v = DVector::from_column_slice(values);
    let solved = chol.solve(&v);
    Ok(-0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det + v.dot(&solved)))
}

/// Low-rank route: integrate the latent covariates directly, factorizing only
/// per-record noise blocks and one `p x p` posterior precision.
pub fn log_lik_structured(
    pattern: &ClusterObsPattern,
    values: &[f64],
    params: &RegressionParams,
) -> Result<f64, RegressionError> {
    if pattern.entries.is_empty() {
        return Ok(0.0);
    }
    let p = params.n_covariates();
    let m_total = pattern.total_components();
    if values.len() != m_total {
        return Err(RegressionError::DimensionMismatch(format!(
            "{} values for {} observed components",
            values.len(),
            m_total
        )));
    }
    let noise = params.noise_block();
    let mut lambda = params.prec_x_true().clone();
    let mut h = DVector::zeros(p);
    let mut ln_det_noise = 0.0;
    let mut quad_noise = 0.0;
    let mut offset = 0;
    for (_, comps) in &pattern.entries {
        let m = comps.len();
        let v = DVector::from_column_slice(&values[offset..offset + m]);
        offset += m;
        // noise block restricted to the observed components, jittered
        let mut d = DMatrix::from_fn(m, m, |a, b| noise[(comps[a], comps[b])]);
        for i in 0..m {
            d[(i, i)] += DIAGONAL_JITTER;
        }
        let chol = Cholesky::new(d.clone()).ok_or_else(|| spd_error("noise block", &d))?;
        ln_det_noise += 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        // coupling rows for the observed components
        let mut a = DMatrix::zeros(m, p);
        for (row, &c) in comps.iter().enumerate() {
            if c == 0 {
                for j in 0..p {
                    a[(row, j)] = params.beta[j];
                }
            } else {
                a[(row, c - 1)] = 1.0;
            }
        }
        let dinv_v = chol.solve(&v);
        quad_noise += v.dot(&dinv_v);
        let dinv_a = chol.solve(&a);
        lambda += a.transpose() * &dinv_a;
        h += a.transpose() * dinv_v;
    }
    let chol =
        Cholesky::new(lambda.clone()).ok_or_else(|| spd_error("latent precision", &lambda))?;
    let ln_det_lambda = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let u = chol.solve(&h);
    Ok(-0.5
        * (m_total as f64 * (2.0 * std::f64::consts::PI).ln()
            + ln_det_noise
            + quad_noise
            + params.ln_det_cov_x_true()
            + ln_det_lambda
            - h.dot(&u)))
}

/// Marginal log likelihood of one cluster's observed regression components,
/// routed by cluster size.
pub fn cluster_regression_log_lik(
    pattern: &ClusterObsPattern,
    values: &[f64],
    params: &RegressionParams,
) -> Result<f64, RegressionError> {
    if pattern.n_records() < params.dense_cutoff {
        log_lik_dense(pattern, values, params)
    } else {
        log_lik_structured(pattern, values, params)
    }
}

/// Sum of cluster marginals over the whole partition; clusters without any
/// observed regression component contribute zero.
pub fn corpus_regression_log_lik(
    state: &LinkageState,
    data: &RegressionData,
    params: &RegressionParams,
) -> Result<f64, RegressionError> {
    let mut total = 0.0;
    for label in state.cluster_labels() {
        let members = state.members(label).expect("active label");
        if let Some((pattern, values)) =
            ClusterObsPattern::from_cluster(state.layout(), data, members)
        {
            total += cluster_regression_log_lik(&pattern, &values, params)?;
        }
    }
    Ok(total)
}

fn cluster_log_lik_of_members(
    state: &LinkageState,
    data: &RegressionData,
    params: &RegressionParams,
    members: &[u32],
) -> Result<f64, RegressionError> {
    match ClusterObsPattern::from_cluster(state.layout(), data, members) {
        Some((pattern, values)) => cluster_regression_log_lik(&pattern, &values, params),
        None => Ok(0.0),
    }
}

/// Change in the corpus regression log likelihood if record `r` moved from
/// its current cluster to `target`. Equals the full recomputation difference.
pub fn log_ratio_move_regression(
    state: &LinkageState,
    r: RecordId,
    target: MoveTarget,
    data: &RegressionData,
    params: &RegressionParams,
) -> Result<f64, RegressionError> {
    let from = state
        .cluster_of(r)
        .map_err(|_| RegressionError::DetachedRecord)?
        .ok_or(RegressionError::DetachedRecord)?;
    if target == MoveTarget::Existing(from) {
        return Ok(0.0);
    }
    let flat = state.layout().flat(r).expect("record in range") as u32;
    let from_members = state.members(from).expect("active label").to_vec();
    let from_without: Vec<u32> = from_members
        .iter()
        .copied()
        .filter(|&m| m != flat)
        .collect();
    if from_without.is_empty() && target == MoveTarget::New {
        return Ok(0.0);
    }
    let mut delta = cluster_log_lik_of_members(state, data, params, &from_without)?
        - cluster_log_lik_of_members(state, data, params, &from_members)?;
    match target {
        MoveTarget::New => {
            delta += cluster_log_lik_of_members(state, data, params, &[flat])?;
        }
        MoveTarget::Existing(to) => {
            let to_members = state.members(to).expect("target label").to_vec();
            let mut to_with = to_members.clone();
            to_with.push(flat);
            delta += cluster_log_lik_of_members(state, data, params, &to_with)?
                - cluster_log_lik_of_members(state, data, params, &to_members)?;
        }
    }
    Ok(delta)
}
