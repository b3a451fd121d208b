//! Behavior of the plug-in (fixed-linkage) regression chain in
//! information-poor settings: without duplicated covariates the
//! measurement-error variance posterior should track its prior.

use linkreg_core::corpus::{Corpus, RegressionData};
use linkreg_core::datagen::{
    generate_corpus, FeatureGenSpec, GenSpec, GeneratingRegression, RegressionPlan,
};
use linkreg_core::eval::plugin_regression;
use linkreg_core::hitmiss::{BetaPrior, FeatureSpec, FeatureTable};
use linkreg_core::partition::{Constraint, LinkageState};
use linkreg_core::regression::RegressionParams;
use linkreg_core::sampler::{Mode, ModelSpec, RegressionModelSpec, SamplerConfig, VariancePrior};
use linkreg_core::testing::ks_statistic;

use nalgebra::DMatrix;

fn informative() -> VariancePrior {
    VariancePrior::Informative {
        mean: 0.01,
        strength: 3.0,
    }
}

fn model_with(init: RegressionParams) -> ModelSpec {
    ModelSpec {
        prior: linkreg_core::priors::PartitionPrior::pyp(1.0, 0.5).unwrap(),
        constraint: Constraint::Unconstrained,
        features: FeatureSpec::new(vec![FeatureTable::new(vec![0.5, 0.5]).unwrap()]),
        beta_prior: BetaPrior::default(),
        alpha_init: vec![0.1],
        regression: Some(RegressionModelSpec {
            init,
            var_y_prior: VariancePrior::FlatLog,
            var_x_prior: informative(),
        }),
    }
}

fn var_x_draws(corpus: &Corpus, model: &ModelSpec, seed: u64) -> Vec<f64> {
    let state = LinkageState::all_singletons(corpus.layout().db_sizes(), Constraint::Unconstrained);
    let cfg = SamplerConfig {
        iterations: 20_500,
        burn_in: 500,
        thin: 2,
        seed,
        mode: Mode::Joint,
        adapt: true,
        keep_link_sets: false,
        ..SamplerConfig::default()
    };
    let samples = plugin_regression(corpus, &state, model, &cfg).unwrap();
    samples
        .kept
        .iter()
        .map(|s| s.regression.as_ref().unwrap().var_x[0])
        .collect()
}

#[test]
fn variance_posterior_tracks_prior_without_duplicated_covariates() {
    // broken layout, no duplicated entities: y lives in the first database,
    // x in the second, and every entity has one record
    let spec = GenSpec {
        db_count: 2,
        entities: (0..120)
            .map(|i| if i < 60 { vec![1, 0] } else { vec![0, 1] })
            .collect(),
        features: vec![FeatureGenSpec {
            cardinality: 2,
            zipf_exponent: 0.0,
        }],
        alpha_gen: vec![0.0],
        confusable_pairs: 0,
        regression: RegressionPlan::BrokenSimple,
        reg_params: Some(GeneratingRegression {
            beta: vec![3.0],
            var_y: 4.0,
            var_x: vec![0.01],
            var_x_true: vec![9.0],
        }),
        seed: 77,
    };
    let (corpus, _) = generate_corpus(&spec).unwrap();
    let cov_x_true = DMatrix::from_element(1, 1, 9.0);
    let init = RegressionParams::new(
        vec![0.0],
        4.0,
        DMatrix::from_element(1, 1, 0.05),
        cov_x_true,
    )
    .unwrap();
    let model = model_with(init.clone());
    let mut posterior = var_x_draws(&corpus, &model, 91);

    // reference prior draws: the same chain on a corpus whose regression
    // cells are all missing samples the prior exactly
    let empty = Corpus::new(
        &[4],
        vec![2],
        vec![vec![0, 1, 0, 1]],
        Some(RegressionData {
            n_covariates: 1,
            y: vec![None; 4],
            x: vec![vec![None]; 4],
        }),
    )
    .unwrap();
    let mut prior = var_x_draws(&empty, &model_with(init), 92);

    // compare the two samples through the empirical cdf of the prior draws
    prior.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cdf = |x: f64| {
        let idx = prior.partition_point(|&v| v <= x);
        idx as f64 / prior.len() as f64
    };
    let d = ks_statistic(&mut posterior, cdf);
    assert!(
        d < 0.12,
        "variance posterior drifted from its prior: KS = {d:.3}"
    );
    let post_mean = posterior.iter().sum::<f64>() / posterior.len() as f64;
    let prior_mean = prior.iter().sum::<f64>() / prior.len() as f64;
    assert!(
        (post_mean - prior_mean).abs() < 0.5 * prior_mean,
        "posterior mean {post_mean:.4} vs prior mean {prior_mean:.4}"
    );
}
