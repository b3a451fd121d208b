//! Linkage-quality metrics, point-estimate extraction, and the plug-in
//! regression comparator.
//!
//! Error rates are pairwise: the false negative rate is the fraction of true
//! co-referent pairs the estimate misses, and the false discovery rate is the
//! fraction of declared pairs that are wrong.

use std::collections::BTreeMap;

use crate::corpus::Corpus;
use crate::partition::{Constraint, DbLayout, LinkageState, RecordId};
use crate::sampler::{self, ModelSpec, PosteriorSamples, SamplerConfig, SamplerError};

/// Entity assignment for every record in the corpus.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    layout: DbLayout,
    entity: Vec<u64>,
}

impl GroundTruth {
    pub fn new(db_sizes: &[usize], entity: Vec<u64>) -> Self {
        let layout = DbLayout::new(db_sizes);
        assert_eq!(
            layout.n_records(),
            entity.len(),
            "truth must cover every record"
        );
        GroundTruth { layout, entity }
    }

    pub fn layout(&self) -> &DbLayout {
        &self.layout
    }

    pub fn entity_of(&self, r: RecordId) -> u64 {
        self.entity[self.layout.flat(r).expect("record in range")]
    }

    pub fn entities(&self) -> &[u64] {
        &self.entity
    }

    /// Number of true co-referent pairs.
    pub fn true_pair_count(&self) -> u64 {
        let mut sizes: BTreeMap<u64, u64> = BTreeMap::new();
        for &e in &self.entity {
            *sizes.entry(e).or_insert(0) += 1;
        }
        sizes.values().map(|&n| n * (n - 1) / 2).sum()
    }

    /// The true partition as a linkage state.
    pub fn as_state(&self, constraint: Constraint) -> LinkageState {
        let mut remap: BTreeMap<u64, usize> = BTreeMap::new();
        let mut next = 0;
        let labels: Vec<usize> = self
            .entity
            .iter()
            .map(|&e| {
                *remap.entry(e).or_insert_with(|| {
                    let l = next;
                    next += 1;
                    l
                })
            })
            .collect();
        LinkageState::from_labels(self.layout.db_sizes(), &labels, constraint)
            .expect("truth respects the constraint")
    }
}

/// Pairwise linkage error rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkageMetrics {
    pub fnr: f64,
    pub fdr: f64,
    pub true_pairs: u64,
    pub declared_pairs: u64,
    pub true_positive_pairs: u64,
}

/// Metrics of a declared pair set against the truth.
pub fn compute_metrics_from_pairs(
    pairs: &[(RecordId, RecordId)],
    truth: &GroundTruth,
) -> LinkageMetrics {
    let true_pairs = truth.true_pair_count();
    let declared_pairs = pairs.len() as u64;
    let true_positive_pairs = pairs
        .iter()
        .filter(|(a, b)| truth.entity_of(*a) == truth.entity_of(*b))
        .count() as u64;
    let fnr = if true_pairs == 0 {
        0.0
    } else {
        1.0 - true_positive_pairs as f64 / true_pairs as f64
    };
    let fdr = if declared_pairs == 0 {
        0.0
    } else {
        (declared_pairs - true_positive_pairs) as f64 / declared_pairs as f64
    };
    LinkageMetrics {
        fnr,
        fdr,
        true_pairs,
        declared_pairs,
        true_positive_pairs,
    }
}

/// Metrics of an estimated partition against the truth.
pub fn compute_metrics(state: &LinkageState, truth: &GroundTruth) -> LinkageMetrics {
    compute_metrics_from_pairs(&state.pairwise_links(), truth)
}

/// Per-kept-iteration metric series from retained link sets.
pub fn posterior_metric_trace(
    samples: &PosteriorSamples,
    truth: &GroundTruth,
) -> Option<Vec<LinkageMetrics>> {
    samples.pair_sets.as_ref().map(|sets| {
        sets.iter()
            .map(|pairs| compute_metrics_from_pairs(pairs, truth))
            .collect()
    })
}

/// Partition point estimate: keep pairs whose posterior co-clustering
/// probability reaches 0.5 and take the transitive closure. Under the
/// bipartite constraint, pairs are admitted in decreasing probability and a
/// pair that would force two same-database records together is dropped.
pub fn point_estimate_linkage(
    samples: &PosteriorSamples,
    layout: &DbLayout,
    constraint: Constraint,
) -> LinkageState {
    let n = layout.n_records();
    let probs = samples.pair_probabilities();
    let mut candidates: Vec<((RecordId, RecordId), f64)> =
        probs.into_iter().filter(|&(_, p)| p >= 0.5).collect();
    // decreasing probability, ties broken by record order for determinism
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    // union-find with per-component database multiset under the constraint
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut dbs: Vec<Vec<usize>> = (0..n).map(|f| vec![layout.db_of_flat(f)]).collect();
    for ((a, b), _) in candidates {
        let fa = layout.flat(a).expect("record in range");
        let fb = layout.flat(b).expect("record in range");
        let ra = find(&mut parent, fa);
        let rb = find(&mut parent, fb);
        if ra == rb {
            continue;
        }
        if constraint == Constraint::NoWithinDbDuplicates
            && dbs[ra].iter().any(|d| dbs[rb].contains(d))
        {
            continue;
        }
        parent[rb] = ra;
        let moved = std::mem::take(&mut dbs[rb]);
        dbs[ra].extend(moved);
    }
    let labels: Vec<usize> = (0..n).map(|f| find(&mut parent, f)).collect();
    LinkageState::from_labels(layout.db_sizes(), &labels, constraint)
        .expect("closure respects the constraint")
}

/// Regression posterior conditional on a fixed linkage estimate.
pub fn plugin_regression(
    corpus: &Corpus,
    fixed: &LinkageState,
    model: &ModelSpec,
    cfg: &SamplerConfig,
) -> Result<PosteriorSamples, SamplerError> {
    sampler::run_regression_chain(corpus, model, cfg, fixed)
}
