//! Synthetic corpus generator: distorted categorical records with known
//! ground truth, plus optional regression columns.
//!
//! Generation mirrors the measurement model itself: each entity draws latent
//! category values from the frequency tables, each record copies them and
//! redraws a value with the per-feature distortion probability. Regression
//! columns come from one latent covariate vector per entity with per-record
//! measurement noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use thiserror::Error;

use crate::corpus::{Corpus, RegressionData};
use crate::eval::GroundTruth;

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error(
        "entity {entity} places records in database {db}, but the plan has {db_count} databases"
    )]
    BadPlacement {
        entity: usize,
        db: usize,
        db_count: usize,
    },
    #[error("regression plan {0:?} requires exactly two databases")]
    BrokenNeedsTwoDatabases(RegressionPlan),
    #[error("regression plan set but no generating parameters given")]
    MissingRegressionParams,
    #[error("feature {0} needs a cardinality of at least 2")]
    BadFeature(usize),
    #[error("cannot form {requested} confusable pairs from {available} singleton entities")]
    TooFewSingletons { requested: usize, available: usize },
    #[error("confusable pairs need at least two features")]
    ConfusablesNeedFeatures,
    #[error("unknown built-in experiment `{0}`")]
    UnknownExperiment(String),
}

/// Which regression columns are generated and how they are masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionPlan {
    None,
    /// Response and covariate present on every record.
    CompleteSimple,
    /// Response only in the first database, covariate only in the second.
    BrokenSimple,
    /// Two covariates; response only in the first database, covariates only
    /// in the second.
    BrokenMultiple,
}

/// Generating values for the regression columns.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratingRegression {
    pub beta: Vec<f64>,
    pub var_y: f64,
    pub var_x: Vec<f64>,
    pub var_x_true: Vec<f64>,
}

/// One categorical feature's generator: support size and a Zipf-like
/// frequency profile (`theta_s` proportional to `s^-exponent`).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureGenSpec {
    pub cardinality: usize,
    pub zipf_exponent: f64,
}

impl FeatureGenSpec {
    pub fn theta(&self) -> Vec<f64> {
        let raw: Vec<f64> = (1..=self.cardinality)
            .map(|s| (s as f64).powf(-self.zipf_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

/// Full description of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenSpec {
    pub db_count: usize,
    /// Per entity: number of record copies placed in each database.
    pub entities: Vec<Vec<usize>>,
    pub features: Vec<FeatureGenSpec>,
    /// Per-feature distortion probability used during generation.
    pub alpha_gen: Vec<f64>,
    /// Number of entity pairs made ambiguous: the two entities share latent
    /// values on every feature except the last. Pairs are drawn from
    /// singleton entities, across databases when the plan allows.
    #[serde(default)]
    pub confusable_pairs: usize,
    pub regression: RegressionPlan,
    pub reg_params: Option<GeneratingRegression>,
    pub seed: u64,
}

impl GenSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn n_records(&self) -> usize {
        self.entities.iter().map(|e| e.iter().sum::<usize>()).sum()
    }

    pub fn db_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.db_count];
        for plan in &self.entities {
            for (db, &copies) in plan.iter().enumerate() {
                if db < self.db_count {
                    sizes[db] += copies;
                }
            }
        }
        sizes
    }

    fn validate(&self) -> Result<(), GenError> {
        for (entity, plan) in self.entities.iter().enumerate() {
            if plan.len() != self.db_count {
                return Err(GenError::BadPlacement {
                    entity,
                    db: plan.len(),
                    db_count: self.db_count,
                });
            }
        }
        for (l, f) in self.features.iter().enumerate() {
            if f.cardinality < 2 {
                return Err(GenError::BadFeature(l));
            }
        }
        if self.confusable_pairs > 0 {
            if self.features.len() < 2 {
                return Err(GenError::ConfusablesNeedFeatures);
            }
            let singles = self
                .entities
                .iter()
                .filter(|plan| plan.iter().sum::<usize>() == 1)
                .count();
            if singles < 2 * self.confusable_pairs {
                return Err(GenError::TooFewSingletons {
                    requested: self.confusable_pairs,
                    available: singles,
                });
            }
        }
        match self.regression {
            RegressionPlan::None => Ok(()),
            RegressionPlan::CompleteSimple => {
                self.reg_params
                    .as_ref()
                    .ok_or(GenError::MissingRegressionParams)?;
                Ok(())
            }
            plan @ (RegressionPlan::BrokenSimple | RegressionPlan::BrokenMultiple) => {
                self.reg_params
                    .as_ref()
                    .ok_or(GenError::MissingRegressionParams)?;
                if self.db_count != 2 {
                    return Err(GenError::BrokenNeedsTwoDatabases(plan));
                }
                Ok(())
            }
        }
    }
}

/// The experiment corpora shipped with the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BuiltinExperiment {
    /// Two databases of 250 with duplicates in and across: 28 cross-database
    /// pairs, 9 pairs inside the first database, 13 inside the second.
    Rl500Dedup,
    /// Two databases of 250 sharing 50 entities, no within-database
    /// duplicates, categorical features only.
    Rl500Bipartite,
    /// Complete simple regression in a single 500-record database with 50
    /// duplicated entities.
    ExpI,
    /// Broken simple regression on the dedup layout.
    ExpII,
    /// Broken multiple regression (two covariates) on the bipartite layout.
    ExpIII,
}

impl std::str::FromStr for BuiltinExperiment {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "RL500-dedup" => Ok(BuiltinExperiment::Rl500Dedup),
            "RL500-bipartite" => Ok(BuiltinExperiment::Rl500Bipartite),
            "ExpI" => Ok(BuiltinExperiment::ExpI),
            "ExpII" => Ok(BuiltinExperiment::ExpII),
            "ExpIII" => Ok(BuiltinExperiment::ExpIII),
            other => Err(GenError::UnknownExperiment(other.to_string())),
        }
    }
}

impl std::fmt::Display for BuiltinExperiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BuiltinExperiment::Rl500Dedup => "RL500-dedup",
            BuiltinExperiment::Rl500Bipartite => "RL500-bipartite",
            BuiltinExperiment::ExpI => "ExpI",
            BuiltinExperiment::ExpII => "ExpII",
            BuiltinExperiment::ExpIII => "ExpIII",
        };
        f.write_str(s)
    }
}

/// Name-and-date-of-birth-like schema: two high-cardinality name fields and
/// two date fields, with heavy-tailed frequencies.
pub fn default_features() -> Vec<FeatureGenSpec> {
    [(1000, 0.6), (1000, 0.6), (100, 0.2), (31, 0.1)]
        .into_iter()
        .map(|(cardinality, zipf_exponent)| FeatureGenSpec {
            cardinality,
            zipf_exponent,
        })
        .collect()
}

fn repeat_plans(groups: &[(usize, &[usize])]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for &(count, plan) in groups {
        for _ in 0..count {
            out.push(plan.to_vec());
        }
    }
    out
}

/// Canonical generator spec for a built-in experiment.
pub fn builtin_experiment(which: BuiltinExperiment) -> GenSpec {
    let alpha_gen = vec![0.0075; 4];
    let simple = GeneratingRegression {
        beta: vec![3.0],
        var_y: 4.0,
        var_x: vec![0.01],
        var_x_true: vec![9.0],
    };
    match which {
        BuiltinExperiment::Rl500Dedup => GenSpec {
            db_count: 2,
            entities: repeat_plans(&[
                (28, &[1, 1]),
                (9, &[2, 0]),
                (13, &[0, 2]),
                (204, &[1, 0]),
                (196, &[0, 1]),
            ]),
            features: default_features(),
            alpha_gen,
            confusable_pairs: 3,
            regression: RegressionPlan::None,
            reg_params: None,
            seed: 0,
        },
        BuiltinExperiment::Rl500Bipartite => GenSpec {
            db_count: 2,
            entities: repeat_plans(&[(50, &[1, 1]), (200, &[1, 0]), (200, &[0, 1])]),
            features: default_features(),
            alpha_gen,
            confusable_pairs: 3,
            regression: RegressionPlan::None,
            reg_params: None,
            seed: 0,
        },
        BuiltinExperiment::ExpI => GenSpec {
            db_count: 1,
            entities: repeat_plans(&[(50, &[2]), (400, &[1])]),
            features: default_features(),
            alpha_gen,
            confusable_pairs: 0,
            regression: RegressionPlan::CompleteSimple,
            reg_params: Some(simple),
            seed: 0,
        },
        BuiltinExperiment::ExpII => GenSpec {
            db_count: 2,
            entities: repeat_plans(&[
                (28, &[1, 1]),
                (9, &[2, 0]),
                (13, &[0, 2]),
                (204, &[1, 0]),
                (196, &[0, 1]),
            ]),
            features: default_features(),
            alpha_gen,
            confusable_pairs: 3,
            regression: RegressionPlan::BrokenSimple,
            reg_params: Some(simple),
            seed: 0,
        },
        BuiltinExperiment::ExpIII => GenSpec {
            db_count: 2,
            entities: repeat_plans(&[(50, &[1, 1]), (200, &[1, 0]), (200, &[0, 1])]),
            features: default_features(),
            alpha_gen,
            confusable_pairs: 3,
            regression: RegressionPlan::BrokenMultiple,
            reg_params: Some(GeneratingRegression {
                beta: vec![2.0, 4.0],
                var_y: 4.0,
                var_x: vec![0.01, 0.01],
                var_x_true: vec![9.0, 9.0],
            }),
            seed: 0,
        },
    }
}

fn draw_categorical<R: Rng + ?Sized>(cumulative: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    match cumulative.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
        Ok(i) => (i + 1).min(cumulative.len() - 1) as u32,
        Err(i) => i.min(cumulative.len() - 1) as u32,
    }
}

/// Copies the latent feature values of one entity onto another for every
/// feature except the last, which is resampled until it differs. Pair
/// members come from singleton entities, matched across the two largest
/// placement groups so broken plans produce cross-database ambiguity.
fn apply_confusables<R: Rng + ?Sized>(
    spec: &GenSpec,
    latent_codes: &mut [Vec<u32>],
    cumulatives: &[Vec<f64>],
    rng: &mut R,
) {
    let mut by_db: Vec<Vec<usize>> = vec![Vec::new(); spec.db_count];
    for (e, plan) in spec.entities.iter().enumerate() {
        if plan.iter().sum::<usize>() == 1 {
            let db = plan.iter().position(|&c| c > 0).expect("one copy");
            by_db[db].push(e);
        }
    }
    let mut order: Vec<usize> = (0..spec.db_count).collect();
    order.sort_by_key(|&db| std::cmp::Reverse(by_db[db].len()));
    let first = &by_db[order[0]];
    let second: &[usize] = order.get(1).map(|&db| by_db[db].as_slice()).unwrap_or(&[]);
    // cross-database pairs first, then consecutive pairs from the leftovers
    let cross = spec.confusable_pairs.min(first.len()).min(second.len());
    let mut pairs: Vec<(usize, usize)> = (0..cross).map(|i| (first[i], second[i])).collect();
    let mut leftover: Vec<usize> = first[cross..]
        .iter()
        .chain(second[cross..].iter())
        .copied()
        .collect();
    for db in order.iter().skip(2) {
        leftover.extend(by_db[*db].iter().copied());
    }
    while pairs.len() < spec.confusable_pairs {
        let b = leftover.pop().expect("validated singleton count");
        let a = leftover.pop().expect("validated singleton count");
        pairs.push((a, b));
    }
    let p = spec.features.len();
    let last = p - 1;
    for &(a, b) in &pairs {
        for l in 0..last {
            latent_codes[l][b] = latent_codes[l][a];
        }
        // final feature must differ so the pair is ambiguous, not identical
        for _ in 0..64 {
            if latent_codes[last][b] != latent_codes[last][a] {
                break;
            }
            latent_codes[last][b] = draw_categorical(&cumulatives[last], rng);
        }
        if latent_codes[last][b] == latent_codes[last][a] {
            latent_codes[last][b] =
                (latent_codes[last][a] + 1) % spec.features[last].cardinality as u32;
        }
    }
}

/// Generates a corpus and its ground truth from a spec.
pub fn generate_corpus(spec: &GenSpec) -> Result<(Corpus, GroundTruth), GenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let thetas: Vec<Vec<f64>> = spec.features.iter().map(|f| f.theta()).collect();
    let cumulatives: Vec<Vec<f64>> = thetas
        .iter()
        .map(|t| {
            let mut acc = 0.0;
            t.iter()
                .map(|&w| {
                    acc += w;
                    acc
                })
                .collect()
        })
        .collect();
    let n_entities = spec.entities.len();
    let p_feat = spec.features.len();

    // latent entity values
    let mut latent_codes = vec![vec![0u32; n_entities]; p_feat];
    for l in 0..p_feat {
        for e in 0..n_entities {
            latent_codes[l][e] = draw_categorical(&cumulatives[l], &mut rng);
        }
    }
    if spec.confusable_pairs > 0 {
        apply_confusables(spec, &mut latent_codes, &cumulatives, &mut rng);
    }
    let reg = spec.reg_params.as_ref();
    let p_reg = reg.map(|r| r.beta.len()).unwrap_or(0);
    let mut latent_x = vec![vec![0.0f64; p_reg]; n_entities];
    if let Some(reg) = reg {
        if spec.regression != RegressionPlan::None {
            for x in latent_x.iter_mut() {
                for (j, slot) in x.iter_mut().enumerate() {
                    let sd = reg.var_x_true[j].sqrt();
                    let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    *slot = sd * z;
                }
            }
        }
    }

    // per-database record lists, shuffled
    let mut per_db: Vec<Vec<usize>> = vec![Vec::new(); spec.db_count];
    for (e, plan) in spec.entities.iter().enumerate() {
        for (db, &copies) in plan.iter().enumerate() {
            for _ in 0..copies {
                per_db[db].push(e);
            }
        }
    }
    for records in per_db.iter_mut() {
        for i in (1..records.len()).rev() {
            let j = rng.random_range(0..=i);
            records.swap(i, j);
        }
    }
    let db_sizes: Vec<usize> = per_db.iter().map(|r| r.len()).collect();
    let n_records: usize = db_sizes.iter().sum();

    let mut codes: Vec<Vec<u32>> = (0..p_feat).map(|_| Vec::with_capacity(n_records)).collect();
    let mut entity_of = Vec::with_capacity(n_records);
    let mut y_col: Vec<Option<f64>> = Vec::with_capacity(n_records);
    let mut x_cols: Vec<Vec<Option<f64>>> = Vec::with_capacity(n_records);
    for (db, records) in per_db.iter().enumerate() {
        for &e in records {
            entity_of.push(e as u64);
            for l in 0..p_feat {
                let miss = rng.random::<f64>() < spec.alpha_gen[l];
                let code = if miss {
                    draw_categorical(&cumulatives[l], &mut rng)
                } else {
                    latent_codes[l][e]
                };
                codes[l].push(code);
            }
            if let Some(reg) = reg {
                if spec.regression != RegressionPlan::None {
                    let mean_y: f64 = reg.beta.iter().zip(&latent_x[e]).map(|(b, x)| b * x).sum();
                    let zy: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    let y = mean_y + reg.var_y.sqrt() * zy;
                    let x: Vec<f64> = (0..p_reg)
                        .map(|j| {
                            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                            latent_x[e][j] + reg.var_x[j].sqrt() * z
                        })
                        .collect();
                    let (keep_y, keep_x) = match spec.regression {
                        RegressionPlan::CompleteSimple => (true, true),
                        RegressionPlan::BrokenSimple | RegressionPlan::BrokenMultiple => {
                            (db == 0, db == 1)
                        }
                        RegressionPlan::None => unreachable!(),
                    };
                    y_col.push(keep_y.then_some(y));
                    x_cols.push(x.into_iter().map(|v| keep_x.then_some(v)).collect());
                }
            }
        }
    }

    let regression = (spec.regression != RegressionPlan::None).then_some(RegressionData {
        n_covariates: p_reg,
        y: y_col,
        x: x_cols,
    });
    let cardinalities: Vec<usize> = spec.features.iter().map(|f| f.cardinality).collect();
    let corpus = Corpus::new(&db_sizes, cardinalities, codes, regression)
        .expect("generated corpus is valid");
    let truth = GroundTruth::new(&db_sizes, entity_of);
    Ok((corpus, truth))
}
