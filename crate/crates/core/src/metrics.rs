//! Spike matching within a radius, Jaccard index and RMSE over matches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DiracMeasure;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub gt: usize,
    pub rec: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub pairs: Vec<MatchedPair>,
    pub n_tp: usize,
    pub n_fp: usize,
    pub n_fn: usize,
    pub delta: f64,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pairs ground-truth and reconstructed spikes at Euclidean distance
/// `≤ delta`.
///
/// Candidate pairs are taken greedily by increasing distance (ties by
/// `(gt, rec)` index order); augmenting paths then complete the greedy
/// matching to a maximum-cardinality one, so no admissible pairing yields
/// more true positives.
pub fn match_spikes(gt: &DiracMeasure, rec: &DiracMeasure, delta: f64) -> Result<MatchReport> {
    if !(delta > 0.0) {
        return Err(Error::NonPositiveInput {
            name: "delta",
            value: delta,
        });
    }
    if !gt.is_empty() && !rec.is_empty() && gt.dim() != rec.dim() {
        return Err(Error::DimensionMismatch {
            expected: gt.dim(),
            found: rec.dim(),
        });
    }
    let (n_gt, n_rec) = (gt.len(), rec.len());
    let mut candidates = Vec::new();
    let mut adjacency = vec![Vec::new(); n_gt];
    for i in 0..n_gt {
        for j in 0..n_rec {
            let d = distance(gt.position(i), rec.position(j));
            if d <= delta {
                candidates.push((d, i, j));
                adjacency[i].push(j);
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut gt_mate: Vec<Option<usize>> = vec![None; n_gt];
    let mut rec_mate: Vec<Option<usize>> = vec![None; n_rec];
    for &(_, i, j) in &candidates {
        if gt_mate[i].is_none() && rec_mate[j].is_none() {
            gt_mate[i] = Some(j);
            rec_mate[j] = Some(i);
        }
    }
    for i in 0..n_gt {
        if gt_mate[i].is_none() {
            let mut seen = vec![false; n_rec];
            augment(i, &adjacency, &mut gt_mate, &mut rec_mate, &mut seen);
        }
    }

    let pairs: Vec<MatchedPair> = gt_mate
        .iter()
        .enumerate()
        .filter_map(|(i, m)| {
            m.map(|j| MatchedPair {
                gt: i,
                rec: j,
                distance: distance(gt.position(i), rec.position(j)),
            })
        })
        .collect();
    let n_tp = pairs.len();
    Ok(MatchReport {
        pairs,
        n_tp,
        n_fp: n_rec - n_tp,
        n_fn: n_gt - n_tp,
        delta,
    })
}

fn augment(
    i: usize,
    adjacency: &[Vec<usize>],
    gt_mate: &mut [Option<usize>],
    rec_mate: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    for &j in &adjacency[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        let free = match rec_mate[j] {
            None => true,
            Some(k) => augment(k, adjacency, gt_mate, rec_mate, seen),
        };
        if free {
            gt_mate[i] = Some(j);
            rec_mate[j] = Some(i);
            return true;
        }
    }
    false
}

/// `TP / (TP + FP + FN)`.
pub fn jaccard(report: &MatchReport) -> Result<f64> {
    let denom = report.n_tp + report.n_fp + report.n_fn;
    if denom == 0 {
        return Err(Error::EmptyComparison);
    }
    Ok(report.n_tp as f64 / denom as f64)
}

pub fn rmse_positions(report: &MatchReport, gt: &DiracMeasure, rec: &DiracMeasure) -> Result<f64> {
    rmse(report, |p| distance(gt.position(p.gt), rec.position(p.rec)))
}

pub fn rmse_amplitudes(report: &MatchReport, gt: &DiracMeasure, rec: &DiracMeasure) -> Result<f64> {
    rmse(report, |p| gt.amplitudes()[p.gt] - rec.amplitudes()[p.rec])
}

fn rmse(report: &MatchReport, err: impl Fn(&MatchedPair) -> f64) -> Result<f64> {
    if report.pairs.is_empty() {
        return Err(Error::NoMatches);
    }
    let ss: f64 = report.pairs.iter().map(|p| err(p).powi(2)).sum();
    Ok((ss / report.pairs.len() as f64).sqrt())
}

/// Flat summary `{delta, tp, fp, fn, jaccard, rmse_x, rmse_a}`; undefined
/// entries are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub delta: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub jaccard: Option<f64>,
    pub rmse_x: Option<f64>,
    pub rmse_a: Option<f64>,
}

pub fn summarize(gt: &DiracMeasure, rec: &DiracMeasure, delta: f64) -> Result<MetricsSummary> {
    let report = match_spikes(gt, rec, delta)?;
    Ok(MetricsSummary {
        delta,
        tp: report.n_tp,
        fp: report.n_fp,
        fn_: report.n_fn,
        jaccard: jaccard(&report).ok(),
        rmse_x: rmse_positions(&report, gt, rec).ok(),
        rmse_a: rmse_amplitudes(&report, gt, rec).ok(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m1(xs: &[f64], amps: &[f64]) -> DiracMeasure {
        DiracMeasure::new(1, xs.to_vec(), amps.to_vec()).unwrap()
    }

    /// Maximum matching size by exhaustive search over assignments.
    pub(crate) fn brute_force_max_matching(gt: &DiracMeasure, rec: &DiracMeasure, delta: f64) -> usize {
        fn go(i: usize, gt: &DiracMeasure, rec: &DiracMeasure, delta: f64, used: &mut Vec<bool>) -> usize {
            if i == gt.len() {
                return 0;
            }
            let mut best = go(i + 1, gt, rec, delta, used);
            for j in 0..rec.len() {
                if !used[j] && distance(gt.position(i), rec.position(j)) <= delta {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, gt, rec, delta, used));
                    used[j] = false;
                }
            }
            best
        }
        go(0, gt, rec, delta, &mut vec![false; rec.len()])
    }

    #[test]
    fn identical_measures_match_perfectly() {
        let gt = m1(&[0.1, 0.4, 0.9], &[1.0, 0.5, 2.0]);
        let r = match_spikes(&gt, &gt, 0.05).unwrap();
        assert_eq!((r.n_tp, r.n_fp, r.n_fn), (3, 0, 0));
        assert_eq!(jaccard(&r).unwrap(), 1.0);
        assert_eq!(rmse_positions(&r, &gt, &gt).unwrap(), 0.0);
        assert_eq!(rmse_amplitudes(&r, &gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn hand_enumerated_example() {
        let gt = m1(&[0.2, 0.5, 0.8], &[1.0; 3]);
        let rec = m1(&[0.21, 0.79, 0.95], &[1.0; 3]);
        let r = match_spikes(&gt, &rec, 0.05).unwrap();
        assert_eq!((r.n_tp, r.n_fp, r.n_fn), (2, 1, 1));
        assert_eq!(jaccard(&r).unwrap(), 0.5);
    }

    #[test]
    fn empty_reconstruction() {
        let gt = m1(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &[1.0; 6]);
        let r = match_spikes(&gt, &DiracMeasure::empty(1), 0.05).unwrap();
        assert_eq!((r.n_tp, r.n_fp, r.n_fn), (0, 0, 6));
        assert_eq!(jaccard(&r).unwrap(), 0.0);
        assert!(matches!(
            rmse_positions(&r, &gt, &DiracMeasure::empty(1)),
            Err(Error::NoMatches)
        ));
        let both = match_spikes(&DiracMeasure::empty(1), &DiracMeasure::empty(1), 0.05).unwrap();
        assert!(matches!(jaccard(&both), Err(Error::EmptyComparison)));
    }

    #[test]
    fn single_pair_rmse() {
        let gt = m1(&[0.50], &[1.0]);
        let rec = m1(&[0.51], &[1.2]);
        let r = match_spikes(&gt, &rec, 0.05).unwrap();
        assert!((rmse_positions(&r, &gt, &rec).unwrap() - 0.01).abs() < 1e-12);
        assert!((rmse_amplitudes(&r, &gt, &rec).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn greedy_blocking_pair_is_repaired() {
        // nearest-first alone pairs (0.07, 0.04) and strands 0.0 and 0.115
        let gt = m1(&[0.0, 0.07], &[1.0; 2]);
        let rec = m1(&[0.04, 0.115], &[1.0; 2]);
        let r = match_spikes(&gt, &rec, 0.05).unwrap();
        assert_eq!(r.n_tp, 2);
    }

    #[test]
    fn summary_serializes_with_fn_key() {
        let gt = m1(&[0.5], &[1.0]);
        let v = serde_json::to_value(summarize(&gt, &gt, 0.05).unwrap()).unwrap();
        for key in ["delta", "tp", "fp", "fn", "jaccard", "rmse_x", "rmse_a"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    fn measure_strategy(dim: usize, max_len: usize) -> impl Strategy<Value = DiracMeasure> {
        prop::collection::vec(prop::collection::vec(0.0..1.0f64, dim), 0..=max_len).prop_map(move |pts| {
            let n = pts.len();
            DiracMeasure::new(dim, pts.concat(), vec![1.0; n]).unwrap()
        })
    }

    proptest! {
        #[test]
        fn matcher_is_maximum(gt in measure_strategy(2, 6), rec in measure_strategy(2, 6), delta in 0.05..0.5f64) {
            let r = match_spikes(&gt, &rec, delta).unwrap();
            prop_assert_eq!(r.n_tp, brute_force_max_matching(&gt, &rec, delta));
            prop_assert!(r.pairs.iter().all(|p| p.distance <= delta));
        }

        #[test]
        fn report_invariants(gt in measure_strategy(1, 8), rec in measure_strategy(1, 8), delta in 0.01..0.3f64) {
            let r = match_spikes(&gt, &rec, delta).unwrap();
            prop_assert!(r.n_tp <= gt.len().min(rec.len()));
            prop_assert_eq!(r.n_fp, rec.len() - r.n_tp);
            prop_assert_eq!(r.n_fn, gt.len() - r.n_tp);
            let mut g: Vec<usize> = r.pairs.iter().map(|p| p.gt).collect();
            let mut q: Vec<usize> = r.pairs.iter().map(|p| p.rec).collect();
            g.dedup();
            q.sort();
            q.dedup();
            prop_assert_eq!(g.len(), r.n_tp);
            prop_assert_eq!(q.len(), r.n_tp);
            if let Ok(j) = jaccard(&r) {
                prop_assert!((0.0..=1.0).contains(&j));
            }
        }

        #[test]
        fn tp_monotone_in_delta(gt in measure_strategy(1, 6), rec in measure_strategy(1, 6), d1 in 0.01..0.2f64, extra in 0.0..0.2f64) {
            let small = match_spikes(&gt, &rec, d1).unwrap();
            let large = match_spikes(&gt, &rec, d1 + extra).unwrap();
            prop_assert!(large.n_tp >= small.n_tp);
        }

        #[test]
        fn rmse_is_order_invariant(pts in prop::collection::vec((0.0..1.0f64, 0.5..1.5f64), 1..6), noise in 0.0..0.01f64) {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let amps: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let gt = m1(&xs, &amps);
            let rec_x: Vec<f64> = xs.iter().map(|x| x + noise).collect();
            let rec = m1(&rec_x, &amps);
            let rev = m1(&rec_x.iter().rev().copied().collect::<Vec<_>>(), &amps.iter().rev().copied().collect::<Vec<_>>());
            let a = match_spikes(&gt, &rec, 0.05).unwrap();
            let b = match_spikes(&gt, &rev, 0.05).unwrap();
            prop_assert_eq!(a.n_tp, b.n_tp);
            if a.n_tp > 0 {
                let ra = rmse_positions(&a, &gt, &rec).unwrap();
                let rb = rmse_positions(&b, &gt, &rev).unwrap();
                prop_assert!((ra - rb).abs() < 1e-12);
            }
        }
    }
}
