//! Assembles the model specification from the corpus, schema, and run
//! configuration: empirical frequency tables (unless the schema overrides
//! them), the empirical latent covariate covariance, and initial parameter
//! values.

use anyhow::{bail, Result};
use nalgebra::DMatrix;

use linkreg_core::corpus::Corpus;
use linkreg_core::hitmiss::{FeatureSpec, FeatureTable};
use linkreg_core::partition::Constraint;
use linkreg_core::priors::PartitionPrior;
use linkreg_core::regression::RegressionParams;
use linkreg_core::sampler::{Mode, ModelSpec, RegressionModelSpec};

use crate::config::RunConfig;
use crate::formats::Schema;

pub fn build_feature_spec(corpus: &Corpus, schema: &Schema) -> Result<FeatureSpec> {
    let mut tables = Vec::with_capacity(schema.features.len());
    for (l, f) in schema.features.iter().enumerate() {
        let table = match &f.theta {
            Some(theta) => {
                FeatureTable::from_weights(theta, 1e-9).map_err(|e| anyhow::anyhow!("{e}"))?
            }
            None => {
                let mut counts = vec![0.0f64; f.cardinality];
                for &code in &corpus.codes()[l] {
                    counts[code as usize] += 1.0;
                }
                FeatureTable::from_weights(&counts, 1e-9).map_err(|e| anyhow::anyhow!("{e}"))?
            }
        };
        tables.push(table);
    }
    Ok(FeatureSpec::new(tables))
}

/// Empirical covariance of the observed covariate columns, pairwise
/// complete, ridged until positive definite.
pub fn empirical_cov_x(corpus: &Corpus) -> Result<DMatrix<f64>> {
    let data = corpus.regression().expect("regression columns present");
    let p = data.n_covariates;
    let mut means = vec![0.0f64; p];
    let mut counts = vec![0usize; p];
    for row in &data.x {
        for (j, v) in row.iter().enumerate() {
            if let Some(v) = v {
                means[j] += v;
                counts[j] += 1;
            }
        }
    }
    for j in 0..p {
        if counts[j] < 2 {
            bail!("covariate {} has fewer than two observed values", j + 1);
        }
        means[j] /= counts[j] as f64;
    }
    let mut cov = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let mut acc = 0.0;
            let mut n = 0usize;
            for row in &data.x {
                if let (Some(a), Some(b)) = (row[i], row[j]) {
                    acc += (a - means[i]) * (b - means[j]);
                    n += 1;
                }
            }
            let value = if n >= 2 { acc / (n - 1) as f64 } else { 0.0 };
            cov[(i, j)] = value;
            cov[(j, i)] = value;
        }
    }
    // pairwise-complete covariances need not be positive definite; escalate
    // a diagonal ridge geometrically until factorization succeeds
    let scale = (cov.trace() / p as f64).max(1e-12);
    let mut ridge = 1e-8 * scale;
    for _ in 0..64 {
        if nalgebra::Cholesky::new(cov.clone()).is_some() {
            return Ok(cov);
        }
        for j in 0..p {
            cov[(j, j)] += ridge;
        }
        ridge *= 4.0;
    }
    bail!("covariate covariance could not be made positive definite");
}

fn empirical_var_y(corpus: &Corpus) -> f64 {
    let data = corpus.regression().expect("regression columns present");
    let ys: Vec<f64> = data.y.iter().flatten().copied().collect();
    if ys.len() < 2 {
        return 1.0;
    }
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (ys.len() - 1) as f64
}

pub fn build_model_spec(corpus: &Corpus, schema: &Schema, cfg: &RunConfig) -> Result<ModelSpec> {
    let features = build_feature_spec(corpus, schema)?;
    let constrained = cfg.constrained || matches!(cfg.prior, PartitionPrior::ConstrainedPyp(_));
    let constraint = if constrained {
        Constraint::NoWithinDbDuplicates
    } else {
        Constraint::Unconstrained
    };
    let regression = if cfg.mode == Mode::Joint {
        let Some(data) = corpus.regression() else {
            bail!("joint mode requires regression columns in the corpus");
        };
        let p = data.n_covariates;
        let cov_x_true = match &cfg.cov_x_true {
            Some(rows) => {
                if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                    bail!("cov_x_true must be {p}x{p}");
                }
                DMatrix::from_fn(p, p, |i, j| rows[i][j])
            }
            None => empirical_cov_x(corpus)?,
        };
        let init = RegressionParams::new(
            vec![0.0; p],
            empirical_var_y(corpus),
            DMatrix::identity(p, p) * 0.1,
            cov_x_true,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        Some(RegressionModelSpec {
            init,
            var_y_prior: cfg.var_y_prior,
            var_x_prior: cfg.var_x_prior,
        })
    } else {
        None
    };
    Ok(ModelSpec {
        prior: cfg.prior,
        constraint,
        features,
        beta_prior: cfg.beta_prior,
        alpha_init: cfg.alpha_init.clone(),
        regression,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use linkreg_core::corpus::RegressionData;

    #[test]
    fn empirical_covariance_handles_disjoint_masks() {
        let corpus = Corpus::new(
            &[4],
            vec![2],
            vec![vec![0, 1, 0, 1]],
            Some(RegressionData {
                n_covariates: 2,
                y: vec![None; 4],
                x: vec![
                    vec![Some(1.0), Some(2.0)],
                    vec![Some(3.0), None],
                    vec![Some(-1.0), Some(0.5)],
                    vec![None, Some(1.5)],
                ],
            }),
        )
        .unwrap();
        let cov = empirical_cov_x(&corpus).unwrap();
        assert_eq!(cov.nrows(), 2);
        assert!(cov[(0, 0)] > 0.0);
        assert!(cov[(1, 1)] > 0.0);
    }

    #[test]
    fn schema_theta_override_wins() {
        let corpus = Corpus::new(&[3], vec![2], vec![vec![0, 0, 0]], None).unwrap();
        let schema = Schema {
            features: vec![crate::formats::SchemaFeature {
                name: "f1".into(),
                cardinality: 2,
                theta: Some(vec![0.25, 0.75]),
            }],
            covariates: 0,
        };
        let spec = build_feature_spec(&corpus, &schema).unwrap();
        assert!((spec.table(0).theta()[1] - 0.75).abs() < 1e-12);
        // without the override, the empirical table is floored, not zero
        let schema_emp = Schema {
            features: vec![crate::formats::SchemaFeature {
                name: "f1".into(),
                cardinality: 2,
                theta: None,
            }],
            covariates: 0,
        };
        let spec = build_feature_spec(&corpus, &schema_emp).unwrap();
        assert!(spec.table(0).theta()[1] > 0.0);
        assert!(spec.table(0).theta()[1] < 1e-6);
    }
}
