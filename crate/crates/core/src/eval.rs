//! Ranking metrics over next-POI predictions.
//!
//! Every test sample is scored against the full POI universe; the target's
//! rank (best = 1, ties broken by ascending POI index) drives hit rates at
//! fixed cutoffs and the mean reciprocal rank. The next-new variants apply
//! the same metrics to the subset of samples whose target never appears in
//! the user's training history.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cutoffs reported by every evaluation.
pub const ACC_CUTOFFS: [usize; 4] = [1, 5, 10, 20];

/// One scored test sample, reduced to the only fact the metrics need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedSample {
    pub user: usize,
    pub target: usize,
    /// 1-based rank of the target in the predicted ordering.
    pub rank: usize,
}

/// Hit rates at the fixed cutoffs plus mean reciprocal rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub acc_at: BTreeMap<usize, f64>,
    pub mrr: f64,
}

/// Full evaluation output. `n2` is `None` when no test sample has an
/// unseen target, which keeps 0/0 out of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricSet,
    pub sample_count: usize,
    pub n2: Option<MetricSet>,
    pub n2_sample_count: usize,
}

/// Rank of `target` within one score row: one plus the number of entries
/// that outrank it, where a tie outranks only at a lower index.
pub fn target_rank(scores: &[f64], target: usize) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::InvalidTarget {
            target,
            classes: scores.len(),
        });
    }
    let t = scores[target];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if s > t || (s == t && j < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Fraction of samples whose target ranks within the top `k`.
pub fn acc_at_k(samples: &[RankedSample], k: usize) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples.iter().filter(|s| s.rank <= k).count();
    hits as f64 / samples.len() as f64
}

/// Mean reciprocal rank over the samples. Reciprocals are accumulated per
/// distinct rank in ascending order, so the result is exactly invariant to
/// the order samples arrive in.
pub fn mrr(samples: &[RankedSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.rank).or_insert(0) += 1;
    }
    let total: f64 = counts.iter().map(|(&r, &c)| c as f64 / r as f64).sum();
    total / samples.len() as f64
}

/// Samples whose target the user never visited during training.
pub fn next_new_filter(
    samples: &[RankedSample],
    train_history: &BTreeMap<usize, BTreeSet<usize>>,
) -> Vec<RankedSample> {
    samples
        .iter()
        .filter(|s| {
            train_history
                .get(&s.user)
                .is_none_or(|seen| !seen.contains(&s.target))
        })
        .copied()
        .collect()
}

fn metric_set(samples: &[RankedSample]) -> MetricSet {
    MetricSet {
        acc_at: ACC_CUTOFFS
            .iter()
            .map(|&k| (k, acc_at_k(samples, k)))
            .collect(),
        mrr: mrr(samples),
    }
}

/// Builds the standard and next-new metric sets in one pass.
pub fn build_report(
    samples: &[RankedSample],
    train_history: &BTreeMap<usize, BTreeSet<usize>>,
) -> EvalReport {
    let n2_samples = next_new_filter(samples, train_history);
    EvalReport {
        metrics: metric_set(samples),
        sample_count: samples.len(),
        n2: if n2_samples.is_empty() {
            None
        } else {
            Some(metric_set(&n2_samples))
        },
        n2_sample_count: n2_samples.len(),
    }
}

impl EvalReport {
    /// One metric per line, fixed order, for terminal output and the text
    /// report file.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for &k in &ACC_CUTOFFS {
            out.push_str(&format!("acc@{k} {:.6}\n", self.metrics.acc_at[&k]));
        }
        out.push_str(&format!("mrr {:.6}\n", self.metrics.mrr));
        out.push_str(&format!("samples {}\n", self.sample_count));
        match &self.n2 {
            Some(n2) => {
                for &k in &ACC_CUTOFFS {
                    out.push_str(&format!("n2_acc@{k} {:.6}\n", n2.acc_at[&k]));
                }
                out.push_str(&format!("n2_mrr {:.6}\n", n2.mrr));
            }
            None => out.push_str("n2 undefined\n"),
        }
        out.push_str(&format!("n2_samples {}\n", self.n2_sample_count));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::derive_rng;
    use rand::Rng;

    fn history(entries: &[(usize, &[usize])]) -> BTreeMap<usize, BTreeSet<usize>> {
        entries
            .iter()
            .map(|&(u, pois)| (u, pois.iter().copied().collect()))
            .collect()
    }

    #[test]
    fn rank_counts_strictly_better_and_lower_index_ties() {
        // Target index 2 scores 0.3; one strictly better, one equal at a
        // lower index, one equal at a higher index (does not count).
        let scores = [0.9, 0.3, 0.3, 0.3, 0.1];
        assert_eq!(target_rank(&scores, 2).unwrap(), 3);
        assert_eq!(target_rank(&scores, 1).unwrap(), 2);
        assert_eq!(target_rank(&scores, 0).unwrap(), 1);
        assert_eq!(target_rank(&scores, 4).unwrap(), 5);
    }

    #[test]
    fn rank_rejects_out_of_universe_target() {
        assert!(matches!(
            target_rank(&[0.1, 0.2], 2),
            Err(Error::InvalidTarget {
                target: 2,
                classes: 2
            })
        ));
    }

    fn sample(rank: usize) -> RankedSample {
        RankedSample {
            user: 0,
            target: 0,
            rank,
        }
    }

    #[test]
    fn acc_worked_examples() {
        let always_first = vec![sample(1), sample(1)];
        for k in ACC_CUTOFFS {
            assert_eq!(acc_at_k(&always_first, k), 1.0);
        }
        let rank_seven = vec![sample(7)];
        assert_eq!(acc_at_k(&rank_seven, 5), 0.0);
        assert_eq!(acc_at_k(&rank_seven, 10), 1.0);
    }

    #[test]
    fn mrr_worked_examples() {
        assert_eq!(mrr(&[sample(4)]), 0.25);
        assert_eq!(mrr(&[sample(1), sample(2)]), 0.75);
    }

    #[test]
    fn acc_is_monotone_in_k_and_mrr_at_least_acc1() {
        let mut rng = derive_rng(50, "eval-mono", 0, 0);
        let samples: Vec<RankedSample> = (0..200)
            .map(|_| sample(rng.random_range(1..30)))
            .collect();
        let report = build_report(&samples, &BTreeMap::new());
        let mut prev = 0.0;
        for &k in &ACC_CUTOFFS {
            let v = report.metrics.acc_at[&k];
            assert!(v >= prev);
            prev = v;
        }
        assert!(report.metrics.mrr >= report.metrics.acc_at[&1]);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut rng = derive_rng(51, "eval-perm", 0, 0);
        let samples: Vec<RankedSample> = (0..50)
            .map(|i| RankedSample {
                user: i % 7,
                target: i % 11,
                rank: rng.random_range(1..25),
            })
            .collect();
        let mut reversed = samples.clone();
        reversed.reverse();
        let h = history(&[(0, &[11, 3]), (3, &[1])]);
        assert_eq!(build_report(&samples, &h), build_report(&reversed, &h));
    }

    /// Brute-force oracle: full sort by (score desc, index asc), then scan
    /// for the target's position.
    fn sort_and_scan_rank(scores: &[f64], target: usize) -> usize {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        order.iter().position(|&j| j == target).unwrap() + 1
    }

    #[test]
    fn rank_matches_sort_and_scan_on_random_matrices() {
        let mut rng = derive_rng(52, "eval-oracle", 0, 0);
        for _ in 0..100 {
            let n = rng.random_range(2..20);
            // Coarse grid of score values forces plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..5) as f64) / 5.0)
                .collect();
            let target = rng.random_range(0..n);
            assert_eq!(
                target_rank(&scores, target).unwrap(),
                sort_and_scan_rank(&scores, target),
                "scores {scores:?} target {target}"
            );
        }
    }

    #[test]
    fn next_new_drops_targets_seen_in_training() {
        let samples = vec![
            RankedSample {
                user: 1,
                target: 5,
                rank: 2,
            },
            RankedSample {
                user: 1,
                target: 6,
                rank: 1,
            },
            RankedSample {
                user: 2,
                target: 5,
                rank: 3,
            },
        ];
        let h = history(&[(1, &[5, 9]), (2, &[7])]);
        let kept = next_new_filter(&samples, &h);
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|s| !(s.user == 1 && s.target == 5)));
    }

    #[test]
    fn next_new_matches_membership_scan_on_mixed_corpus() {
        let mut rng = derive_rng(53, "eval-n2", 0, 0);
        let mut h: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for u in 0..10 {
            for _ in 0..rng.random_range(0..6) {
                h.entry(u).or_default().insert(rng.random_range(0..15));
            }
        }
        let samples: Vec<RankedSample> = (0..80)
            .map(|_| RankedSample {
                user: rng.random_range(0..10),
                target: rng.random_range(0..15),
                rank: rng.random_range(1..10),
            })
            .collect();
        let kept = next_new_filter(&samples, &h);
        let expected = samples
            .iter()
            .filter(|s| !h.get(&s.user).map(|set| set.contains(&s.target)).unwrap_or(false))
            .count();
        assert_eq!(kept.len(), expected);
    }

    #[test]
    fn all_unseen_user_has_equal_standard_and_n2_metrics() {
        let samples = vec![
            RankedSample {
                user: 4,
                target: 2,
                rank: 1,
            },
            RankedSample {
                user: 4,
                target: 3,
                rank: 4,
            },
        ];
        let h = history(&[(4, &[0, 1])]);
        let report = build_report(&samples, &h);
        assert_eq!(report.n2_sample_count, report.sample_count);
        assert_eq!(report.n2.as_ref().unwrap(), &report.metrics);
    }

    #[test]
    fn empty_next_new_subset_is_flagged_not_zero() {
        let samples = vec![RankedSample {
            user: 0,
            target: 3,
            rank: 1,
        }];
        let h = history(&[(0, &[3])]);
        let report = build_report(&samples, &h);
        assert!(report.n2.is_none());
        assert_eq!(report.n2_sample_count, 0);
        assert!(report.render_text().contains("n2 undefined"));
    }

    #[test]
    fn report_text_lists_every_metric_once() {
        let samples = vec![
            RankedSample {
                user: 0,
                target: 1,
                rank: 2,
            },
            RankedSample {
                user: 0,
                target: 2,
                rank: 6,
            },
        ];
        let report = build_report(&samples, &BTreeMap::new());
        let text = report.render_text();
        for key in ["acc@1", "acc@5", "acc@10", "acc@20", "mrr", "samples"] {
            let hits = text
                .lines()
                .filter(|l| l.split_whitespace().next() == Some(key))
                .count();
            assert_eq!(hits, 1, "{key}");
        }
        assert!(text.contains("acc@5 0.500000"));
        assert!(text.contains("acc@10 1.000000"));
    }
}
