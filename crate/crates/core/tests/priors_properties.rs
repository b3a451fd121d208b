//! Exchangeability, normalization, and elicitation properties of the
//! partition priors, checked against enumeration and simulation.

use linkreg_core::numeric::logsumexp;
use linkreg_core::partition::{Constraint, LinkageState, RecordId};
use linkreg_core::priors::{hypergeometric_t_log_pmf, AllocTarget, PartitionPrior};
use linkreg_core::testing::set_partitions;

use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;

/// Log probability of building `full_labels` by allocating records one at a
/// time in `order`, multiplying normalized predictive weights.
fn sequential_log_prob(prior: &PartitionPrior, full_labels: &[usize], order: &[usize]) -> f64 {
    let n = full_labels.len();
    let mut total = 0.0;
    for j in 0..n {
        let mut labels: Vec<usize> = (0..=j).map(|i| full_labels[order[i]]).collect();
        let fresh = labels.iter().max().unwrap() + 1;
        labels[j] = fresh;
        let mut state =
            LinkageState::from_labels(&[j + 1], &labels, Constraint::Unconstrained).unwrap();
        let r = RecordId::new(0, j);
        state.detach(r).unwrap();
        let weights = prior.predictive_alloc(&state, r).unwrap();
        let lse = logsumexp(&weights.iter().map(|&(_, w)| w).collect::<Vec<f64>>());
        let partner = (0..j).find(|&i| full_labels[order[i]] == full_labels[order[j]]);
        let target = match partner {
            Some(i) => {
                AllocTarget::Existing(state.cluster_of(RecordId::new(0, i)).unwrap().unwrap())
            }
            None => AllocTarget::New,
        };
        let w = weights
            .iter()
            .find(|&&(t, _)| t == target)
            .expect("realized target present")
            .1;
        total += w - lse;
    }
    total
}

#[test]
fn pyp_sequential_product_equals_eppf() {
    let prior = PartitionPrior::pyp(0.9, 0.35).unwrap();
    for n in 1..=6usize {
        for labels in set_partitions(n) {
            let state =
                LinkageState::from_labels(&[n], &labels, Constraint::Unconstrained).unwrap();
            let eppf = prior
                .pyp_eppf_log_prob(&state.summary().cluster_sizes)
                .unwrap();
            let forward: Vec<usize> = (0..n).collect();
            let seq = sequential_log_prob(&prior, &labels, &forward);
            assert!(
                (seq - eppf).abs() < 1e-10,
                "n={n} labels={labels:?}: sequential {seq} vs eppf {eppf}"
            );
            // exchangeability: a reversed insertion order gives the same mass
            let reversed: Vec<usize> = (0..n).rev().collect();
            let seq_rev = sequential_log_prob(&prior, &labels, &reversed);
            assert!((seq_rev - eppf).abs() < 1e-10);
        }
    }
}

#[test]
fn eppf_normalizes_up_to_n8() {
    for &(s, d) in &[(1.0, 0.5), (0.4, 0.98), (2.5, 0.0), (1.5, -0.5)] {
        let prior = PartitionPrior::pyp(s, d).unwrap();
        for n in 1..=8usize {
            let logs: Vec<f64> = set_partitions(n)
                .iter()
                .map(|labels| {
                    let state =
                        LinkageState::from_labels(&[n], labels, Constraint::Unconstrained).unwrap();
                    prior
                        .pyp_eppf_log_prob(&state.summary().cluster_sizes)
                        .unwrap()
                })
                .collect();
            let total = logsumexp(&logs);
            assert!(total.abs() < 1e-10, "({s},{d}) n={n}: sum {}", total.exp());
        }
    }
}

/// Sequential construction over the second database of a bipartite state.
fn constrained_sequential_log_prob(prior: &PartitionPrior, full: &LinkageState) -> f64 {
    let n1 = full.layout().db_sizes()[0];
    let n2 = full.layout().db_sizes()[1];
    let full_label_of = |r: RecordId| full.cluster_of(r).unwrap().unwrap();
    let mut total = 0.0;
    for j in 0..n2 {
        let mut labels: Vec<usize> = (0..n1)
            .map(|pos| full_label_of(RecordId::new(0, pos)))
            .collect();
        for pos in 0..j {
            labels.push(full_label_of(RecordId::new(1, pos)));
        }
        let fresh = labels.iter().max().unwrap() + n1 + n2 + 1;
        labels.push(fresh);
        let mut state =
            LinkageState::from_labels(&[n1, j + 1], &labels, Constraint::NoWithinDbDuplicates)
                .unwrap();
        let r = RecordId::new(1, j);
        state.detach(r).unwrap();
        let weights = prior.predictive_alloc(&state, r).unwrap();
        let lse = logsumexp(&weights.iter().map(|&(_, w)| w).collect::<Vec<f64>>());
        // realized: the first-database partner in the full state, if any
        let full_cluster = full.members(full_label_of(r)).unwrap();
        let partner = full_cluster
            .iter()
            .map(|&m| full.layout().record_id(m as usize))
            .find(|id| id.db == 0);
        let target = match partner {
            Some(p) => AllocTarget::Existing(state.cluster_of(p).unwrap().unwrap()),
            None => AllocTarget::New,
        };
        let w = weights
            .iter()
            .find(|&&(t, _)| t == target)
            .expect("realized target present")
            .1;
        total += w - lse;
    }
    total
}

#[test]
fn constrained_joint_equals_sequential_products() {
    let prior = PartitionPrior::constrained_pyp(1.1, 0.62).unwrap();
    // enumerate all bipartite matchings for several shapes with n2 <= 6
    for &(n1, n2) in &[(2usize, 2usize), (3, 2), (2, 3), (4, 3), (3, 6)] {
        let mut count = 0;
        // assignment vector: for each second-db record, Some(first-db pos) or None
        let mut assignment: Vec<Option<usize>> = vec![None; n2];
        loop {
            // build the state if the assignment is injective
            let mut used = std::collections::HashSet::new();
            let injective = assignment.iter().flatten().all(|&q| used.insert(q));
            if injective {
                let mut state =
                    LinkageState::all_singletons(&[n1, n2], Constraint::NoWithinDbDuplicates);
                for (pos, q) in assignment.iter().enumerate() {
                    if let Some(q) = q {
                        let target = state.cluster_of(RecordId::new(0, *q)).unwrap().unwrap();
                        state
                            .move_record(
                                RecordId::new(1, pos),
                                linkreg_core::partition::MoveTarget::Existing(target),
                            )
                            .unwrap();
                    }
                }
                let joint = prior.constrained_pyp_joint_log_prob(&state).unwrap();
                let seq = constrained_sequential_log_prob(&prior, &state);
                assert!(
                    (joint - seq).abs() < 1e-10,
                    "({n1},{n2}) {assignment:?}: joint {joint} vs sequential {seq}"
                );
                count += 1;
            }
            // odometer over assignments
            let mut pos = 0;
            loop {
                if pos == n2 {
                    break;
                }
                assignment[pos] = match assignment[pos] {
                    None => Some(0),
                    Some(q) if q + 1 < n1 => Some(q + 1),
                    Some(_) => {
                        assignment[pos] = None;
                        pos += 1;
                        continue;
                    }
                };
                break;
            }
            if pos == n2 {
                break;
            }
        }
        assert!(count > 0);
    }
}

#[test]
fn moments_match_monte_carlo() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
    for &(s, d, n) in &[(1.0, 0.5, 50usize), (0.4, 0.9, 200), (3.0, 0.25, 120)] {
        let prior = PartitionPrior::pyp(s, d).unwrap();
        let m = prior.pyp_moments(n).unwrap();
        let reps = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..reps {
            let mut k = 1.0f64;
            for i in 1..n {
                let p_new = (k * d + s) / (i as f64 + s);
                if rng.random::<f64>() < p_new {
                    k += 1.0;
                }
            }
            sum += k;
            sumsq += k * k;
        }
        let mc_mean = sum / reps as f64;
        let mc_var = sumsq / reps as f64 - mc_mean * mc_mean;
        let se = (mc_var / reps as f64).sqrt();
        assert!(
            (m.expected_k - mc_mean).abs() < 3.0 * se,
            "({s},{d},{n}): formula {} vs MC {mc_mean} (se {se})",
            m.expected_k
        );
        // sample variance of k has standard error ~ var * sqrt(2/(reps-1))
        let var_se = mc_var * (2.0 / (reps as f64 - 1.0)).sqrt();
        assert!(
            (m.var_k - mc_var).abs() < 4.0 * var_se,
            "({s},{d},{n}): formula var {} vs MC {mc_var}",
            m.var_k
        );
    }
}

#[test]
fn hypergeometric_normalizes_for_all_small_sizes() {
    for n_pop in 1..=30usize {
        for n1 in 0..=n_pop {
            for n2 in 0..=n_pop {
                let logs: Vec<f64> = (0..=n1.min(n2))
                    .map(|t| hypergeometric_t_log_pmf(n_pop, n1, n2, t).unwrap())
                    .filter(|l| l.is_finite())
                    .collect();
                let total = logsumexp(&logs);
                assert!(
                    total.abs() < 1e-12,
                    "n_pop={n_pop} n1={n1} n2={n2}: sum {}",
                    total.exp()
                );
            }
        }
    }
}

#[test]
fn bipartite_match_sampler_agrees_with_joint_enumeration() {
    // small enough to enumerate the T distribution exactly from the joint
    let prior = PartitionPrior::constrained_pyp(1.0, 0.4).unwrap();
    let (n1, n2) = (3usize, 3usize);
    let mut log_by_t = vec![Vec::new(); n2 + 1];
    let mut assignment: Vec<Option<usize>> = vec![None; n2];
    loop {
        let mut used = std::collections::HashSet::new();
        if assignment.iter().flatten().all(|&q| used.insert(q)) {
            let mut state =
                LinkageState::all_singletons(&[n1, n2], Constraint::NoWithinDbDuplicates);
            let mut t = 0;
            for (pos, q) in assignment.iter().enumerate() {
                if let Some(q) = q {
                    let target = state.cluster_of(RecordId::new(0, *q)).unwrap().unwrap();
                    state
                        .move_record(
                            RecordId::new(1, pos),
                            linkreg_core::partition::MoveTarget::Existing(target),
                        )
                        .unwrap();
                    t += 1;
                }
            }
            log_by_t[t].push(prior.constrained_pyp_joint_log_prob(&state).unwrap());
        }
        let mut pos = 0;
        loop {
            if pos == n2 {
                break;
            }
            assignment[pos] = match assignment[pos] {
                None => Some(0),
                Some(q) if q + 1 < n1 => Some(q + 1),
                Some(_) => {
                    assignment[pos] = None;
                    pos += 1;
                    continue;
                }
            };
            break;
        }
        if pos == n2 {
            break;
        }
    }
    let all: Vec<f64> = log_by_t.iter().flatten().copied().collect();
    let total = logsumexp(&all);
    assert!(
        total.abs() < 1e-10,
        "joint must normalize, got {}",
        total.exp()
    );
    let exact: Vec<f64> = log_by_t
        .iter()
        .map(|logs| (logsumexp(logs) - total).exp())
        .collect();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let reps = 200_000;
    let mut counts = vec![0usize; n2 + 1];
    for _ in 0..reps {
        let t = prior
            .sample_bipartite_match_count(n1, n2, &mut rng)
            .unwrap();
        counts[t] += 1;
    }
    for t in 0..=n2 {
        let freq = counts[t] as f64 / reps as f64;
        let se = (exact[t] * (1.0 - exact[t]) / reps as f64).sqrt().max(1e-4);
        assert!(
            (freq - exact[t]).abs() < 4.0 * se,
            "t={t}: freq {freq} vs exact {}",
            exact[t]
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predictive_weights_are_normalizable(
        n in 2..8usize,
        seed in 0..1000u64,
        variant in 0..4usize,
        strength in 0.1..5.0f64,
        discount in 0.0..0.95f64,
    ) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (prior, constraint, sizes) = match variant {
            0 => (PartitionPrior::uniform_labels(n + 5), Constraint::Unconstrained, vec![n]),
            1 => (PartitionPrior::uniform_partitions(n + 5), Constraint::Unconstrained, vec![n]),
            2 => (PartitionPrior::pyp(strength, discount).unwrap(), Constraint::Unconstrained, vec![n]),
            _ => (
                PartitionPrior::constrained_pyp(strength, discount).unwrap(),
                Constraint::NoWithinDbDuplicates,
                vec![n, n.max(2) - 1],
            ),
        };
        let mut state = LinkageState::all_singletons(&sizes, constraint);
        // randomize the state with a few valid moves
        let scan: Vec<RecordId> = if matches!(prior, PartitionPrior::ConstrainedPyp(_)) {
            (0..sizes[1]).map(|p| RecordId::new(1, p)).collect()
        } else {
            state.layout().record_ids().collect()
        };
        for _ in 0..20 {
            let r = scan[rng.random_range(0..scan.len())];
            let labels: Vec<usize> = state.cluster_labels().collect();
            let target = labels[rng.random_range(0..labels.len())];
            let _ = state.move_record(r, linkreg_core::partition::MoveTarget::Existing(target));
        }
        let r = scan[rng.random_range(0..scan.len())];
        state.detach(r).unwrap();
        let weights = prior.predictive_alloc(&state, r).unwrap();
        let logs: Vec<f64> = weights.iter().map(|&(_, w)| w).collect();
        let lse = logsumexp(&logs);
        prop_assert!(lse.is_finite(), "weights must be normalizable");
        let total: f64 = logs.iter().map(|w| (w - lse).exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        // non-negativity in linear space is automatic; check no NaN
        prop_assert!(logs.iter().all(|w| !w.is_nan()));
    }
}
