//! Server-side combination rules: the detection-driven weighted aggregate
//! plus the FedAvg, Krum, Multi-Krum, and geometric-median baselines.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::detection::DetectionReport;
use crate::error::{Error, Result};
use crate::vectors::{euclidean_distance, norm, ParameterVector};

/// Smoothing floor for Weiszfeld denominators when an iterate lands on an
/// input point.
const WEISZFELD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct AggregationOutcome {
    #[serde(skip)]
    pub aggregated_delta: ParameterVector,
    pub included_clients: BTreeSet<usize>,
    pub downweighted_clients: BTreeSet<usize>,
    pub excluded_clients: BTreeSet<usize>,
    pub beta: f64,
}

fn check_roster(updates: &[ParameterVector], shard_sizes: &[usize]) -> Result<usize> {
    let Some(first) = updates.first() else {
        return Err(Error::EmptyRoster);
    };
    if updates.len() != shard_sizes.len() {
        return Err(Error::DimensionMismatch {
            expected: updates.len(),
            got: shard_sizes.len(),
        });
    }
    let p = first.len();
    for u in updates {
        if u.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: u.len(),
            });
        }
    }
    Ok(p)
}

/// Shard-size-weighted mean: weights `|D_i| / sum |D_j|`.
pub fn fedavg(updates: &[ParameterVector], shard_sizes: &[usize]) -> Result<ParameterVector> {
    let p = check_roster(updates, shard_sizes)?;
    let total: usize = shard_sizes.iter().sum();
    if total == 0 {
        return Err(Error::EmptyRoster);
    }
    let mut acc = ParameterVector::zeros(p);
    for (u, &size) in updates.iter().zip(shard_sizes) {
        acc.scaled_add(size as f64 / total as f64, u)?;
    }
    Ok(acc)
}

/// Detection-aware aggregation: flagged attackers contribute nothing,
/// unreliable clients contribute down-weighted by `beta`, everyone else at
/// full weight. The normalizing data total runs over included clients only,
/// so exclusions do not shrink the effective step.
pub fn minedetect_aggregate(
    updates: &[ParameterVector],
    shard_sizes: &[usize],
    report: &DetectionReport,
    beta: f64,
) -> Result<AggregationOutcome> {
    let p = check_roster(updates, shard_sizes)?;
    assert!(beta > 0.0 && beta <= 1.0, "beta must lie in (0, 1]");

    let excluded = report.excluded();
    let included: BTreeSet<usize> = (0..updates.len()).filter(|i| !excluded.contains(i)).collect();
    if included.is_empty() {
        return Err(Error::DefenseExhausted);
    }
    let downweighted: BTreeSet<usize> = report
        .unreliable_set
        .intersection(&included)
        .copied()
        .collect();

    let total: usize = included.iter().map(|&i| shard_sizes[i]).sum();
    if total == 0 {
        return Err(Error::EmptyRoster);
    }
    let mut acc = ParameterVector::zeros(p);
    for &i in &included {
        let mut weight = shard_sizes[i] as f64 / total as f64;
        if downweighted.contains(&i) {
            weight *= beta;
        }
        acc.scaled_add(weight, &updates[i])?;
    }
    Ok(AggregationOutcome {
        aggregated_delta: acc,
        included_clients: included,
        downweighted_clients: downweighted,
        excluded_clients: excluded,
        beta,
    })
}

/// Server step: `w_prev - eta * delta`.
pub fn apply_server_update(
    w_prev: &ParameterVector,
    aggregated_delta: &ParameterVector,
    eta: f64,
) -> Result<ParameterVector> {
    let mut next = w_prev.clone();
    next.scaled_add(-eta, aggregated_delta)?;
    Ok(next)
}

/// Krum: score each update by the sum of squared distances to its
/// `n - f - 2` nearest peers; return the argmin index (ties to the lowest
/// index) along with all scores.
pub fn krum(updates: &[ParameterVector], f: usize) -> Result<(usize, Vec<f64>)> {
    let n = updates.len();
    if n < f + 3 {
        return Err(Error::KrumInfeasible { needed: f + 3, got: n });
    }
    let neighbors = n - f - 2;

    let mut sq = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let d = euclidean_distance(&updates[i], &updates[j])?;
            sq[i * n + j] = d * d;
            sq[j * n + i] = d * d;
        }
    }

    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq[i * n + j]).collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distance"));
        scores.push(dists[..neighbors].iter().sum());
    }
    let mut best = 0;
    for i in 1..n {
        if scores[i] < scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

/// Multi-Krum: mean of the `m` updates with the lowest Krum scores
/// (ties to the lower index).
pub fn multi_krum(updates: &[ParameterVector], f: usize, m: usize) -> Result<ParameterVector> {
    let (_, scores) = krum(updates, f)?;
    let n = updates.len();
    if m == 0 || m > n - f {
        return Err(Error::MultiKrumSelection { m, max: n - f });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("finite score")
            .then(a.cmp(&b))
    });
    let p = updates[0].len();
    let mut acc = ParameterVector::zeros(p);
    for &i in &order[..m] {
        acc.scaled_add(1.0 / m as f64, &updates[i])?;
    }
    Ok(acc)
}

/// Sum of distances from `y` to every input point: the objective the
/// geometric median minimizes.
pub fn geomed_objective(points: &[ParameterVector], y: &ParameterVector) -> f64 {
    points
        .iter()
        .map(|u| euclidean_distance(y, u).expect("equal lengths"))
        .sum()
}

/// One Weiszfeld fixed-point step from `current`, with denominators floored
/// at a small epsilon so iterates sitting on an input point stay put.
pub fn weiszfeld_step(points: &[ParameterVector], current: &ParameterVector) -> ParameterVector {
    let p = current.len();
    let mut weighted = vec![0.0; p];
    let mut weight_sum = 0.0;
    for u in points {
        let d = euclidean_distance(current, u)
            .expect("equal lengths")
            .max(WEISZFELD_EPS);
        let w = 1.0 / d;
        weight_sum += w;
        for (acc, x) in weighted.iter_mut().zip(u.as_slice()) {
            *acc += w * x;
        }
    }
    for v in &mut weighted {
        *v /= weight_sum;
    }
    ParameterVector::new(weighted)
}

/// Geometric median via Weiszfeld iteration, started from the
/// coordinate-wise mean. Stops when the step norm drops below `tolerance`
/// or after `max_iters` steps.
pub fn geomed(
    updates: &[ParameterVector],
    tolerance: f64,
    max_iters: usize,
) -> Result<ParameterVector> {
    if updates.is_empty() {
        return Err(Error::EmptyRoster);
    }
    assert!(tolerance > 0.0, "tolerance must be positive");
    let p = updates[0].len();
    for u in updates {
        if u.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: u.len(),
            });
        }
    }

    let mut current = ParameterVector::zeros(p);
    for u in updates {
        current.scaled_add(1.0 / updates.len() as f64, u)?;
    }
    for _ in 0..max_iters {
        let next = weiszfeld_step(updates, &current);
        let step = euclidean_distance(&next, &current)?;
        current = next;
        if step < tolerance {
            break;
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::DetectionReport;
    use proptest::prelude::*;

    fn pv(values: &[f64]) -> ParameterVector {
        ParameterVector::new(values.to_vec())
    }

    fn report_with(
        sign_flip: &[usize],
        additive_noise: &[usize],
        unreliable: &[usize],
        n: usize,
    ) -> DetectionReport {
        let mut r = DetectionReport::empty(n);
        r.sign_flip_set = sign_flip.iter().copied().collect();
        r.additive_noise_set = additive_noise.iter().copied().collect();
        r.unreliable_set = unreliable.iter().copied().collect();
        r
    }

    #[test]
    fn fedavg_size_weighted() {
        let out = fedavg(&[pv(&[1.0, 1.0]), pv(&[3.0, 3.0])], &[1, 3]).unwrap();
        assert_eq!(out.as_slice(), &[2.5, 2.5]);
    }

    #[test]
    fn fedavg_equal_sizes_is_plain_mean() {
        let out = fedavg(&[pv(&[1.0]), pv(&[3.0]), pv(&[8.0])], &[5, 5, 5]).unwrap();
        assert!((out.as_slice()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn fedavg_single_client_passthrough() {
        let out = fedavg(&[pv(&[7.0, -2.0])], &[13]).unwrap();
        assert_eq!(out.as_slice(), &[7.0, -2.0]);
    }

    #[test]
    fn fedavg_rejects_empty_roster() {
        assert!(matches!(fedavg(&[], &[]), Err(Error::EmptyRoster)));
    }

    #[test]
    fn weighted_aggregate_downweights_unreliable() {
        // benign [2] size 1, unreliable [4] size 1, beta 0.5:
        // 0.5*2 + 0.5*0.5*4 = 2.0
        let report = report_with(&[], &[], &[1], 2);
        let out = minedetect_aggregate(&[pv(&[2.0]), pv(&[4.0])], &[1, 1], &report, 0.5).unwrap();
        assert!((out.aggregated_delta.as_slice()[0] - 2.0).abs() < 1e-12);
        assert_eq!(out.downweighted_clients, BTreeSet::from([1]));
        assert_eq!(out.included_clients, BTreeSet::from([0, 1]));
    }

    #[test]
    fn weighted_aggregate_reduces_to_fedavg() {
        let updates = vec![pv(&[1.0, 2.0]), pv(&[5.0, -1.0]), pv(&[0.0, 0.5])];
        let sizes = vec![2, 7, 4];
        let report = report_with(&[], &[], &[], 3);
        let out = minedetect_aggregate(&updates, &sizes, &report, 1.0).unwrap();
        let reference = fedavg(&updates, &sizes).unwrap();
        assert_eq!(out.aggregated_delta, reference);
    }

    #[test]
    fn weighted_aggregate_excludes_attackers_entirely() {
        // one flagged client among 10 equal ones: identical to fedavg of the 9.
        let mut updates: Vec<ParameterVector> = (0..9).map(|i| pv(&[i as f64])).collect();
        updates.push(pv(&[1e6]));
        let sizes = vec![3; 10];
        let report = report_with(&[9], &[], &[], 10);
        let out = minedetect_aggregate(&updates, &sizes, &report, 0.5).unwrap();
        let reference = fedavg(&updates[..9], &sizes[..9]).unwrap();
        assert_eq!(out.aggregated_delta, reference);
        assert_eq!(out.excluded_clients, BTreeSet::from([9]));
    }

    #[test]
    fn weighted_aggregate_weight_identity() {
        // with beta = 1 and nothing excluded, weights sum to exactly 1:
        // aggregating identical updates returns that update.
        let updates = vec![pv(&[3.0, -1.0]); 6];
        let sizes = vec![1, 2, 3, 4, 5, 6];
        let report = report_with(&[], &[], &[2, 4], 6);
        let out = minedetect_aggregate(&updates, &sizes, &report, 1.0).unwrap();
        for (a, b) in out.aggregated_delta.as_slice().iter().zip(&[3.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_aggregate_defense_exhausted() {
        let report = report_with(&[0], &[1], &[], 2);
        assert!(matches!(
            minedetect_aggregate(&[pv(&[1.0]), pv(&[2.0])], &[1, 1], &report, 0.5),
            Err(Error::DefenseExhausted)
        ));
    }

    #[test]
    fn server_update_examples() {
        let next = apply_server_update(&pv(&[1.0, 1.0]), &pv(&[0.1, -0.1]), 1.0).unwrap();
        assert!((next.as_slice()[0] - 0.9).abs() < 1e-12);
        assert!((next.as_slice()[1] - 1.1).abs() < 1e-12);

        let unchanged = apply_server_update(&pv(&[2.0]), &pv(&[0.0]), 1.0).unwrap();
        assert_eq!(unchanged.as_slice(), &[2.0]);
        let frozen = apply_server_update(&pv(&[2.0]), &pv(&[5.0]), 0.0).unwrap();
        assert_eq!(frozen.as_slice(), &[2.0]);
    }

    #[test]
    fn krum_hand_scored_fixture() {
        // updates [0], [0.1], [0.2], [10] with f = 1: one neighbor each.
        let updates = vec![pv(&[0.0]), pv(&[0.1]), pv(&[0.2]), pv(&[10.0])];
        let (selected, scores) = krum(&updates, 1).unwrap();
        assert_eq!(selected, 0, "tie broken toward the lowest index");
        let expected = [0.01, 0.01, 0.01, 96.04];
        for (s, e) in scores.iter().zip(&expected) {
            assert!((s - e).abs() < 1e-9, "{s} vs {e}");
        }
    }

    #[test]
    fn krum_identical_updates_score_zero() {
        let updates = vec![pv(&[2.0, 2.0]); 5];
        let (selected, scores) = krum(&updates, 1).unwrap();
        assert_eq!(selected, 0);
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn krum_translation_invariant() {
        let updates = vec![pv(&[0.0, 1.0]), pv(&[0.2, 1.1]), pv(&[0.1, 0.9]), pv(&[4.0, -3.0])];
        let (sel_a, _) = krum(&updates, 1).unwrap();
        let shifted: Vec<ParameterVector> = updates
            .iter()
            .map(|u| {
                let mut s = u.clone();
                s.scaled_add(1.0, &pv(&[100.0, -50.0])).unwrap();
                s
            })
            .collect();
        let (sel_b, _) = krum(&shifted, 1).unwrap();
        assert_eq!(sel_a, sel_b);
    }

    #[test]
    fn krum_infeasible_when_roster_too_small() {
        let updates = vec![pv(&[0.0]), pv(&[1.0]), pv(&[2.0])];
        assert!(matches!(
            krum(&updates, 1),
            Err(Error::KrumInfeasible { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn multi_krum_reductions() {
        let updates = vec![pv(&[0.0]), pv(&[0.1]), pv(&[0.2]), pv(&[10.0])];
        // m = 1 equals the krum selection
        let one = multi_krum(&updates, 1, 1).unwrap();
        let (sel, _) = krum(&updates, 1).unwrap();
        assert_eq!(one, updates[sel]);
        // m = 2 averages [0] and [0.1]
        let two = multi_krum(&updates, 1, 2).unwrap();
        assert!((two.as_slice()[0] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn multi_krum_full_roster_is_plain_mean() {
        let updates = vec![pv(&[0.0]), pv(&[1.0]), pv(&[2.0]), pv(&[3.0])];
        let out = multi_krum(&updates, 0, 4).unwrap();
        assert!((out.as_slice()[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn multi_krum_rejects_bad_m() {
        let updates = vec![pv(&[0.0]), pv(&[1.0]), pv(&[2.0]), pv(&[3.0])];
        assert!(matches!(
            multi_krum(&updates, 1, 4),
            Err(Error::MultiKrumSelection { m: 4, max: 3 })
        ));
    }

    #[test]
    fn geomed_one_dimension_is_the_median() {
        let points = vec![pv(&[0.0]), pv(&[0.0]), pv(&[10.0])];
        let out = geomed(&points, 1e-10, 200).unwrap();
        assert!(out.as_slice()[0].abs() < 1e-6, "got {}", out.as_slice()[0]);
    }

    #[test]
    fn geomed_equilateral_triangle_centroid() {
        let h = 3.0f64.sqrt() / 2.0;
        let points = vec![pv(&[0.0, 0.0]), pv(&[1.0, 0.0]), pv(&[0.5, h])];
        let out = geomed(&points, 1e-12, 500).unwrap();
        let centroid = [0.5, h / 3.0];
        for (a, b) in out.as_slice().iter().zip(&centroid) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn geomed_identical_points_returned_exactly() {
        let points = vec![pv(&[1.5, -2.0]); 4];
        let out = geomed(&points, 1e-9, 100).unwrap();
        assert_eq!(out.as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn geomed_never_worse_than_best_input() {
        let points = vec![pv(&[0.0, 0.0]), pv(&[3.0, 1.0]), pv(&[-2.0, 4.0]), pv(&[1.0, 1.0])];
        let out = geomed(&points, 1e-9, 200).unwrap();
        let best_input = points
            .iter()
            .map(|u| geomed_objective(&points, u))
            .fold(f64::INFINITY, f64::min);
        assert!(geomed_objective(&points, &out) <= best_input + 1e-9);
    }

    #[test]
    fn weiszfeld_objective_is_non_increasing() {
        let points = vec![
            pv(&[0.3, 1.2]),
            pv(&[-2.0, 0.4]),
            pv(&[5.0, -1.0]),
            pv(&[0.0, 0.0]),
            pv(&[1.0, 1.0]),
        ];
        let mut current = pv(&[10.0, 10.0]);
        let mut objective = geomed_objective(&points, &current);
        for _ in 0..50 {
            current = weiszfeld_step(&points, &current);
            let next = geomed_objective(&points, &current);
            assert!(next <= objective + 1e-12, "{next} > {objective}");
            objective = next;
        }
    }

    proptest! {
        #[test]
        fn krum_is_permutation_equivariant(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 2), 4..7),
            rotation in 0usize..6,
        ) {
            let updates: Vec<ParameterVector> = rows.iter().map(|r| pv(r)).collect();
            let n = updates.len();
            let (sel, _) = krum(&updates, 1).unwrap();

            let shift = rotation % n;
            let permuted: Vec<ParameterVector> =
                (0..n).map(|i| updates[(i + shift) % n].clone()).collect();
            let (sel_p, _) = krum(&permuted, 1).unwrap();
            // permuted[j] = updates[(j + shift) % n]; equivariance up to tie-breaks
            prop_assume!(distinct_scores(&updates, 1));
            prop_assert_eq!((sel_p + shift) % n, sel);
        }
    }

    fn distinct_scores(updates: &[ParameterVector], f: usize) -> bool {
        let (_, scores) = krum(updates, f).unwrap();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.windows(2).all(|w| (w[1] - w[0]).abs() > 1e-12)
    }
}
