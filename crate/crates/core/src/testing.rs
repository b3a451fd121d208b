//! Brute-force oracles and statistical helpers used by the test suites.
//!
//! Everything here is deliberately independent of the production evaluation
//! paths: densities go through LU factorizations instead of Cholesky, cluster
//! marginals are direct sums over the latent support, and partitions are
//! enumerated rather than sampled.

use nalgebra::{DMatrix, DVector};

use crate::corpus::{Corpus, RegressionData};
use crate::hitmiss::{BetaPrior, FeatureSpec, FeatureTable};
use crate::numeric::{ln_gamma, logsumexp};
use crate::partition::{Constraint, LinkageState};
use crate::priors::PartitionPrior;
use crate::regression::{
    observed_covariance, ClusterObsPattern, RegressionParams, DIAGONAL_JITTER,
};
use crate::sampler::{self, Mode, ModelSpec, RegressionModelSpec, SamplerConfig, VariancePrior};

/// All set partitions of `n` items as label vectors (restricted growth
/// strings). `set_partitions(4).len() == 15`.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut labels = vec![0usize; n];
    fn recurse(pos: usize, max_used: usize, labels: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pos == labels.len() {
            out.push(labels.clone());
            return;
        }
        for label in 0..=max_used + 1 {
            labels[pos] = label;
            recurse(pos + 1, max_used.max(label), labels, out);
        }
    }
    if n == 0 {
        out.push(Vec::new());
        return out;
    }
    labels[0] = 0;
    recurse(1, 0, &mut labels, &mut out);
    out
}

/// Zero-mean multivariate normal log density evaluated through an LU
/// decomposition, independent of the Cholesky-based production path.
pub fn dense_mvn_log_pdf(cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = cov.nrows();
    let lu = cov.clone().lu();
    let det = lu.determinant();
    assert!(det > 0.0, "oracle covariance must be positive definite");
    let solved = lu.solve(x).expect("solvable system");
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + x.dot(&solved))
}

/// Naive evaluation of the single-feature cluster marginal: direct sum over
/// the full category support.
pub fn naive_cluster_feature_marginal(codes: &[u32], alpha: f64, theta: &[f64]) -> f64 {
    let mut total = 0.0;
    for (s, &theta_s) in theta.iter().enumerate() {
        let mut prod = theta_s;
        for &v in codes {
            let hit = if v as usize == s { 1.0 - alpha } else { 0.0 };
            prod *= hit + alpha * theta[v as usize];
        }
        total += prod;
    }
    total
}

/// Exhaustive multi-feature cluster marginal: enumerates the joint latent
/// population value over all features and sums the generative probabilities.
pub fn exhaustive_cluster_log_marginal(
    codes_by_feature: &[Vec<u32>],
    alpha: &[f64],
    theta: &[Vec<f64>],
) -> f64 {
    let p = codes_by_feature.len();
    let mut latent = vec![0usize; p];
    let mut total = 0.0f64;
    loop {
        let mut prob = 1.0;
        for l in 0..p {
            prob *= theta[l][latent[l]];
            for &v in &codes_by_feature[l] {
                let hit = if v as usize == latent[l] {
                    1.0 - alpha[l]
                } else {
                    0.0
                };
                prob *= hit + alpha[l] * theta[l][v as usize];
            }
        }
        total += prob;
        // odometer over the latent supports
        let mut l = 0;
        loop {
            if l == p {
                return total.ln();
            }
            latent[l] += 1;
            if latent[l] < theta[l].len() {
                break;
            }
            latent[l] = 0;
            l += 1;
        }
    }
}

/// How the exact-posterior oracle treats the distortion probabilities.
pub enum AlphaOracle<'a> {
    /// Condition on fixed values.
    Fixed(&'a [f64]),
    /// Integrate each probability against its Beta prior by quadrature
    /// (exact: the integrand is polynomial in each alpha).
    Integrated { f: f64, g: f64 },
}

/// Exact posterior over all partitions of a micro corpus, by enumeration.
///
/// Likelihoods go through the exhaustive latent-enumeration marginal and the
/// LU-based density oracle, so the only production code exercised is the
/// partition prior. Partitions violating `constraint` are excluded. Returns
/// canonical (restricted-growth) label vectors with normalized posterior
/// probabilities.
pub fn micro_exact_posterior(
    corpus: &Corpus,
    theta: &[Vec<f64>],
    prior: &PartitionPrior,
    constraint: Constraint,
    alpha: &AlphaOracle,
    reg: Option<&RegressionParams>,
) -> Vec<(Vec<usize>, f64)> {
    let n = corpus.n_records();
    let mut entries: Vec<(Vec<usize>, f64)> = Vec::new();
    let quad = gauss_legendre_unit(64);
    for labels in set_partitions(n) {
        let Ok(state) = LinkageState::from_labels(corpus.layout().db_sizes(), &labels, constraint)
        else {
            continue;
        };
        let lp_prior = match prior.partition_log_prob(&state) {
            Ok(lp) => lp,
            Err(_) => continue,
        };
        if lp_prior == f64::NEG_INFINITY {
            continue;
        }
        let mut lp = lp_prior;
        lp += oracle_categorical_log_lik(corpus, theta, &state, alpha, &quad);
        if let Some(params) = reg {
            lp += oracle_regression_log_lik(corpus, &state, params);
        }
        entries.push((labels, lp));
    }
    let total = logsumexp(&entries.iter().map(|(_, lp)| *lp).collect::<Vec<f64>>());
    entries
        .into_iter()
        .map(|(labels, lp)| (labels, (lp - total).exp()))
        .collect()
}

fn oracle_categorical_log_lik(
    corpus: &Corpus,
    theta: &[Vec<f64>],
    state: &LinkageState,
    alpha: &AlphaOracle,
    quad: &[(f64, f64)],
) -> f64 {
    match alpha {
        AlphaOracle::Fixed(values) => {
            let mut lp = 0.0;
            for label in state.cluster_labels() {
                let members = state.members(label).expect("active label");
                let codes_by_feature: Vec<Vec<u32>> = (0..corpus.n_features())
                    .map(|l| {
                        members
                            .iter()
                            .map(|&m| corpus.codes()[l][m as usize])
                            .collect()
                    })
                    .collect();
                lp += exhaustive_cluster_log_marginal(&codes_by_feature, values, theta);
            }
            lp
        }
        AlphaOracle::Integrated { f, g } => {
            let ln_beta_norm = ln_gamma(*f) + ln_gamma(*g) - ln_gamma(f + g);
            let mut lp = 0.0;
            for l in 0..corpus.n_features() {
                let mut integral = 0.0;
                for &(x, w) in quad {
                    let mut prod = w * x.powf(f - 1.0) * (1.0 - x).powf(g - 1.0);
                    for label in state.cluster_labels() {
                        let members = state.members(label).expect("active label");
                        let codes: Vec<u32> = members
                            .iter()
                            .map(|&m| corpus.codes()[l][m as usize])
                            .collect();
                        prod *= naive_cluster_feature_marginal(&codes, x, &theta[l]);
                    }
                    integral += prod;
                }
                lp += integral.ln() - ln_beta_norm;
            }
            lp
        }
    }
}

fn oracle_regression_log_lik(
    corpus: &Corpus,
    state: &LinkageState,
    params: &RegressionParams,
) -> f64 {
    let Some(data) = corpus.regression() else {
        return 0.0;
    };
    let mut lp = 0.0;
    for label in state.cluster_labels() {
        let members = state.members(label).expect("active label");
        if let Some((pattern, values)) =
            ClusterObsPattern::from_cluster(state.layout(), data, members)
        {
            let mut cov = observed_covariance(&pattern, params);
            for i in 0..cov.nrows() {
                cov[(i, i)] += DIAGONAL_JITTER;
            }
            lp += dense_mvn_log_pdf(&cov, &DVector::from_column_slice(&values));
        }
    }
    lp
}

/// Canonical restricted-growth form of a label vector.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut remap: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            *remap.entry(l).or_insert_with(|| {
                let v = next;
                next += 1;
                v
            })
        })
        .collect()
}

/// Rebuild canonical labels from an unordered link list.
pub fn labels_from_links(
    n: usize,
    links: &[(crate::partition::RecordId, crate::partition::RecordId)],
    layout: &crate::partition::DbLayout,
) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (a, b) in links {
        let fa = layout.flat(*a).expect("in range");
        let fb = layout.flat(*b).expect("in range");
        let ra = find(&mut parent, fa);
        let rb = find(&mut parent, fb);
        if ra != rb {
            parent[rb] = ra;
        }
    }
    let flat: Vec<usize> = (0..n).map(|f| find(&mut parent, f)).collect();
    canonical_labels(&flat)
}

/// A micro corpus with everything needed to enumerate its posterior and run
/// the chain against it.
pub struct MicroCase {
    pub name: &'static str,
    pub corpus: Corpus,
    pub theta: Vec<Vec<f64>>,
    pub prior: PartitionPrior,
    pub constraint: Constraint,
    /// fixed alpha values, or `None` to integrate against the Beta prior
    pub fixed_alpha: Option<Vec<f64>>,
    pub beta_prior: BetaPrior,
    pub alpha_init: f64,
    pub reg: Option<RegressionParams>,
}

fn simple_reg(beta: f64, var_y: f64, var_x: f64, var_xt: f64) -> RegressionParams {
    RegressionParams::simple(beta, var_y, var_x, var_xt).expect("admissible")
}

/// Fixed battery of two- and three-record corpora covering all four prior
/// regimes, fixed and integrated distortion, and complete and broken
/// regression blocks.
pub fn micro_battery() -> Vec<MicroCase> {
    let mut cases = Vec::new();

    cases.push(MicroCase {
        name: "two-identical",
        corpus: Corpus::new(&[2], vec![2], vec![vec![0, 0]], None).unwrap(),
        theta: vec![vec![0.5, 0.5]],
        prior: PartitionPrior::pyp(1.0, 0.5).unwrap(),
        constraint: Constraint::Unconstrained,
        fixed_alpha: Some(vec![0.01]),
        beta_prior: BetaPrior::default(),
        alpha_init: 0.01,
        reg: None,
    });

    cases.push(MicroCase {
        name: "two-differing-integrated",
        corpus: Corpus::new(
            &[2],
            vec![3],
            vec![vec![0, 1]],
            Some(RegressionData {
                n_covariates: 1,
                y: vec![Some(2.1), Some(2.6)],
                x: vec![vec![Some(1.2)], vec![Some(0.9)]],
            }),
        )
        .unwrap(),
        theta: vec![vec![0.5, 0.3, 0.2]],
        prior: PartitionPrior::pyp(0.8, 0.3).unwrap(),
        constraint: Constraint::Unconstrained,
        fixed_alpha: None,
        beta_prior: BetaPrior { f: 1.0, g: 1.0 },
        alpha_init: 0.2,
        reg: Some(simple_reg(1.5, 1.0, 0.25, 4.0)),
    });

    cases.push(MicroCase {
        name: "three-uniform-labels-broken",
        corpus: Corpus::new(
            &[3],
            vec![3],
            vec![vec![0, 0, 2]],
            Some(RegressionData {
                n_covariates: 1,
                y: vec![Some(3.1), None, Some(-0.4)],
                x: vec![vec![None], vec![Some(0.9)], vec![None]],
            }),
        )
        .unwrap(),
        theta: vec![vec![0.6, 0.25, 0.15]],
        prior: PartitionPrior::uniform_labels(6),
        constraint: Constraint::Unconstrained,
        fixed_alpha: Some(vec![0.15]),
        beta_prior: BetaPrior::default(),
        alpha_init: 0.15,
        reg: Some(simple_reg(3.0, 4.0, 0.01, 9.0)),
    });

    cases.push(MicroCase {
        name: "three-uniform-partitions-integrated",
        corpus: Corpus::new(&[3], vec![2], vec![vec![0, 1, 0]], None).unwrap(),
        theta: vec![vec![0.7, 0.3]],
        prior: PartitionPrior::uniform_partitions(5),
        constraint: Constraint::Unconstrained,
        fixed_alpha: None,
        beta_prior: BetaPrior { f: 2.0, g: 3.0 },
        alpha_init: 0.3,
        reg: None,
    });

    cases.push(MicroCase {
        name: "bipartite-constrained",
        corpus: Corpus::new(
            &[2, 1],
            vec![2],
            vec![vec![0, 1, 0]],
            Some(RegressionData {
                n_covariates: 1,
                y: vec![Some(2.8), Some(-1.0), None],
                x: vec![vec![None], vec![None], vec![Some(1.1)]],
            }),
        )
        .unwrap(),
        theta: vec![vec![0.55, 0.45]],
        prior: PartitionPrior::constrained_pyp(1.0, 0.5).unwrap(),
        constraint: Constraint::NoWithinDbDuplicates,
        fixed_alpha: Some(vec![0.2]),
        beta_prior: BetaPrior::default(),
        alpha_init: 0.2,
        reg: Some(simple_reg(3.0, 4.0, 0.01, 9.0)),
    });

    cases.push(MicroCase {
        name: "three-two-features-complete",
        corpus: Corpus::new(
            &[3],
            vec![2, 3],
            vec![vec![0, 0, 1], vec![2, 2, 0]],
            Some(RegressionData {
                n_covariates: 1,
                y: vec![Some(1.9), Some(2.3), Some(-3.5)],
                x: vec![vec![Some(0.7)], vec![Some(0.8)], vec![Some(-1.2)]],
            }),
        )
        .unwrap(),
        theta: vec![vec![0.5, 0.5], vec![0.2, 0.3, 0.5]],
        prior: PartitionPrior::pyp(1.2, 0.4).unwrap(),
        constraint: Constraint::Unconstrained,
        fixed_alpha: Some(vec![0.1, 0.05]),
        beta_prior: BetaPrior::default(),
        alpha_init: 0.1,
        reg: Some(simple_reg(2.0, 1.0, 0.04, 4.0)),
    });

    cases
}

/// Model specification the chain should use for a battery case.
pub fn micro_model(case: &MicroCase, mode: Mode) -> ModelSpec {
    ModelSpec {
        prior: case.prior,
        constraint: case.constraint,
        features: FeatureSpec::new(
            case.theta
                .iter()
                .map(|t| FeatureTable::new(t.clone()).unwrap())
                .collect(),
        ),
        beta_prior: case.beta_prior,
        alpha_init: case
            .fixed_alpha
            .clone()
            .unwrap_or_else(|| vec![case.alpha_init]),
        regression: match mode {
            Mode::Joint => case.reg.as_ref().map(|params| RegressionModelSpec {
                init: params.clone(),
                var_y_prior: VariancePrior::FlatLog,
                var_x_prior: VariancePrior::FlatLog,
            }),
            Mode::LinkageOnly => None,
        },
    }
}

/// Runs a battery case in one mode and asserts that the empirical partition
/// frequencies match the enumerated posterior within three Monte Carlo
/// standard errors (batch means). Regression parameters and, for fixed-alpha
/// cases, the distortion probabilities are frozen so the enumeration is
/// exact.
pub fn check_micro_case(case: &MicroCase, mode: Mode, sweeps: u64, seed: u64) {
    let model = micro_model(case, mode);
    let alpha_oracle = match &case.fixed_alpha {
        Some(values) => AlphaOracle::Fixed(values),
        None => AlphaOracle::Integrated {
            f: case.beta_prior.f,
            g: case.beta_prior.g,
        },
    };
    let reg_oracle = if mode == Mode::Joint {
        case.reg.as_ref()
    } else {
        None
    };
    let exact = micro_exact_posterior(
        &case.corpus,
        &case.theta,
        &case.prior,
        case.constraint,
        &alpha_oracle,
        reg_oracle,
    );

    let cfg = SamplerConfig {
        iterations: sweeps + 200,
        burn_in: 200,
        thin: 1,
        seed,
        mode,
        proposal_sd_alpha: if case.fixed_alpha.is_some() { 0.0 } else { 2.0 },
        proposal_sd_beta: 0.0,
        proposal_sd_logvar: 0.0,
        adapt: false,
        random_scan: false,
        keep_link_sets: true,
    };
    let samples = sampler::run_chain(&case.corpus, &model, &cfg).expect("chain runs");
    let sets = samples.pair_sets.as_ref().unwrap();
    let n = case.corpus.n_records();
    let layout = case.corpus.layout();
    let keys: Vec<Vec<usize>> = sets
        .iter()
        .map(|links| labels_from_links(n, links, layout))
        .collect();

    let n_kept = keys.len() as f64;
    for (labels, p_exact) in &exact {
        let canon = canonical_labels(labels);
        let indicator: Vec<f64> = keys
            .iter()
            .map(|k| if *k == canon { 1.0 } else { 0.0 })
            .collect();
        let freq = indicator.iter().sum::<f64>() / n_kept;
        let se = batch_means_se(&indicator, 20).max(2e-4);
        assert!(
            (freq - p_exact).abs() <= 3.0 * se,
            "{} [{mode:?}] partition {canon:?}: freq {freq:.5} vs exact {p_exact:.5} (se {se:.5})",
            case.name
        );
    }
    let support: std::collections::HashSet<Vec<usize>> = exact
        .iter()
        .map(|(labels, _)| canonical_labels(labels))
        .collect();
    for k in &keys {
        assert!(support.contains(k), "{}: chain visited {k:?}", case.name);
    }
}

/// Batch-means standard error of the mean of a (possibly autocorrelated)
/// chain trace.
pub fn batch_means_se(xs: &[f64], n_batches: usize) -> f64 {
    let n = xs.len();
    assert!(n >= 2 * n_batches, "trace too short for batch means");
    let batch_len = n / n_batches;
    let used = batch_len * n_batches;
    let grand = xs[..used].iter().sum::<f64>() / used as f64;
    let mut var = 0.0;
    for b in 0..n_batches {
        let mean = xs[b * batch_len..(b + 1) * batch_len].iter().sum::<f64>() / batch_len as f64;
        var += (mean - grand).powi(2);
    }
    var /= (n_batches - 1) as f64;
    (var / n_batches as f64).sqrt()
}

/// Kolmogorov-Smirnov statistic of `samples` against a cdf.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let c = cdf(x);
        d = d.max((c - i as f64 / n).abs());
        d = d.max(((i as f64 + 1.0) / n - c).abs());
    }
    d
}

/// Gauss-Legendre nodes and weights on `[0, 1]`. Exact for polynomials of
/// degree `2n - 1`, which covers the Beta-polynomial integrands in the exact
/// posterior oracles.
pub fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        // initial guess (Chebyshev) then Newton on P_n
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_and_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes.push(((x + 1.0) / 2.0, w / 2.0));
    }
    nodes.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    nodes
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bell_numbers() {
        assert_eq!(set_partitions(1).len(), 1);
        assert_eq!(set_partitions(3).len(), 5);
        assert_eq!(set_partitions(4).len(), 15);
        assert_eq!(set_partitions(8).len(), 4140);
    }

    #[test]
    fn mvn_oracle_matches_univariate() {
        let cov = DMatrix::from_element(1, 1, 4.0);
        let x = DVector::from_element(1, 1.0);
        let expected = crate::numeric::ln_normal_pdf(1.0, 4.0);
        assert!((dense_mvn_log_pdf(&cov, &x) - expected).abs() < 1e-12);
    }

    #[test]
    fn quadrature_integrates_polynomials() {
        let nodes = gauss_legendre_unit(16);
        // integral of x^5 over [0,1] = 1/6
        let integral: f64 = nodes.iter().map(|&(x, w)| w * x.powi(5)).sum();
        assert!((integral - 1.0 / 6.0).abs() < 1e-13);
        let total: f64 = nodes.iter().map(|&(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-13);
    }

    #[test]
    fn ks_of_uniform_grid_is_small() {
        let mut xs: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let d = ks_statistic(&mut xs, |x| x);
        assert!(d < 0.001);
    }
}
