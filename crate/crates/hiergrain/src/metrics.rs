//! Hierarchy-aware evaluation: top-1 accuracy, mistake severity, mean
//! top-k tree distance, and mistake-distance histograms.
//!
//! All distances are LCA levels read from a [`DistanceMatrix`]. Severity
//! averages only over mistaken samples and is therefore undefined when
//! every prediction is correct; that case is an explicit `None`, never a
//! silent zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::DistanceMatrix;

/// The k values reported for the mean top-k tree distance, clipped per
/// level to the class count.
pub const HIER_DIST_KS: [usize; 3] = [1, 5, 20];

/// Class indices sorted by descending score; equal scores keep the smaller
/// index first.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    idx
}

fn check_paired(preds: usize, truths: usize) -> Result<()> {
    if preds != truths {
        return Err(Error::LengthMismatch {
            left_name: "predictions",
            left: preds,
            right_name: "truths",
            right: truths,
        });
    }
    if preds == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Fraction of samples where the prediction equals the truth.
pub fn top1(preds: &[usize], truths: &[usize]) -> Result<f64> {
    check_paired(preds.len(), truths.len())?;
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean tree distance between prediction and truth over mistaken samples
/// only; `None` when every prediction is correct.
pub fn mistake_severity(
    preds: &[usize],
    truths: &[usize],
    d: &DistanceMatrix,
) -> Result<Option<f64>> {
    check_paired(preds.len(), truths.len())?;
    let mut sum = 0.0;
    let mut mistakes = 0usize;
    for (&p, &t) in preds.iter().zip(truths) {
        if p != t {
            sum += d.get(p, t) as f64;
            mistakes += 1;
        }
    }
    Ok(if mistakes == 0 {
        None
    } else {
        Some(sum / mistakes as f64)
    })
}

/// Mean over samples of the average tree distance from the truth to each
/// of the sample's top-k predicted classes.
///
/// Every prediction list must hold exactly `k` distinct classes and
/// `k <= classes`.
pub fn hier_dist_at_k(
    topk: &[Vec<usize>],
    truths: &[usize],
    d: &DistanceMatrix,
    k: usize,
) -> Result<f64> {
    check_paired(topk.len(), truths.len())?;
    let classes = d.size();
    if k == 0 || k > classes {
        return Err(Error::BadK {
            k,
            classes,
            detail: "k must be in 1..=classes".to_string(),
        });
    }
    let mut total = 0.0;
    for (list, &t) in topk.iter().zip(truths) {
        if list.len() != k {
            return Err(Error::BadK {
                k,
                classes,
                detail: format!("prediction list holds {} entries", list.len()),
            });
        }
        let mut seen = vec![false; classes];
        let mut sum = 0.0;
        for &p in list {
            if p >= classes {
                return Err(Error::IndexOutOfRange {
                    what: "class",
                    index: p,
                    bound: classes,
                });
            }
            if seen[p] {
                return Err(Error::BadK {
                    k,
                    classes,
                    detail: format!("class {p} repeated in a top-k list"),
                });
            }
            seen[p] = true;
            sum += d.get(p, t) as f64;
        }
        total += sum / k as f64;
    }
    Ok(total / topk.len() as f64)
}

/// Empirical distribution of prediction-to-truth tree distances over
/// mistaken samples.
pub fn mistake_histogram(
    preds: &[usize],
    truths: &[usize],
    d: &DistanceMatrix,
) -> Result<BTreeMap<usize, f64>> {
    check_paired(preds.len(), truths.len())?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (&p, &t) in preds.iter().zip(truths) {
        if p != t {
            *counts.entry(d.get(p, t)).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::NoMistakes);
    }
    let total: usize = counts.values().sum();
    Ok(counts
        .into_iter()
        .map(|(dist, n)| (dist, n as f64 / total as f64))
        .collect())
}

/// `distance,probability` rows for plotting, distances ascending.
pub fn histogram_csv(hist: &BTreeMap<usize, f64>) -> String {
    let mut out = String::from("distance,probability\n");
    for (dist, p) in hist {
        out.push_str(&format!("{dist},{p}\n"));
    }
    out
}

/// Metrics for one level under one decision rule.
///
/// `hier_dist` maps each reported k to the mean top-k tree distance; the
/// histogram is empty when there are no mistakes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub classes: usize,
    pub top1: f64,
    pub mistake_severity: Option<f64>,
    pub hier_dist: BTreeMap<usize, f64>,
    pub histogram: BTreeMap<usize, f64>,
}

/// Full per-sample rankings for one level distilled into a [`LevelReport`].
///
/// `rankings[i]` must order all classes for sample `i`, best first, as
/// produced by [`rank_descending`] or one of the cost-aware rank
/// functions. k values beyond the class count are skipped.
pub fn level_report(
    level: usize,
    rankings: &[Vec<usize>],
    truths: &[usize],
    d: &DistanceMatrix,
) -> Result<LevelReport> {
    check_paired(rankings.len(), truths.len())?;
    let classes = d.size();
    let preds: Vec<usize> = rankings
        .iter()
        .map(|r| r.first().copied().ok_or(Error::EmptyInput))
        .collect::<Result<_>>()?;
    let mut hier_dist = BTreeMap::new();
    for k in HIER_DIST_KS {
        if k > classes {
            continue;
        }
        let topk: Vec<Vec<usize>> = rankings.iter().map(|r| r[..k].to_vec()).collect();
        hier_dist.insert(k, hier_dist_at_k(&topk, truths, d, k)?);
    }
    let histogram = match mistake_histogram(&preds, truths, d) {
        Ok(h) => h,
        Err(Error::NoMistakes) => BTreeMap::new(),
        Err(e) => return Err(e),
    };
    Ok(LevelReport {
        level,
        classes,
        top1: top1(&preds, truths)?,
        mistake_severity: mistake_severity(&preds, truths, d)?,
        hier_dist,
        histogram,
    })
}

/// Metrics for every level under one decision rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleReport {
    pub rule: String,
    pub levels: Vec<LevelReport>,
}

/// Evaluation of one split under every decision rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub rules: Vec<RuleReport>,
}

impl EvalReport {
    /// The report for a named rule, if present.
    pub fn rule(&self, name: &str) -> Option<&RuleReport> {
        self.rules.iter().find(|r| r.rule == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::LabelTree;
    use proptest::prelude::*;

    /// Balanced 4-leaf tree: distances 1 inside a group, 2 across.
    fn four_leaf() -> DistanceMatrix {
        let tree = LabelTree::parse("g1/a\ng1/b\ng2/c\ng2/d\n").unwrap();
        tree.distance_matrix(2).unwrap()
    }

    #[test]
    fn test_top1_counts_exact_matches() {
        assert_eq!(top1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(top1(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(top1(&[1, 1, 2, 2], &[0, 1, 2, 3]).unwrap(), 0.5);
    }

    #[test]
    fn test_top1_input_validation() {
        assert!(matches!(
            top1(&[0], &[0, 1]).unwrap_err(),
            Error::LengthMismatch { .. }
        ));
        assert!(matches!(top1(&[], &[]).unwrap_err(), Error::EmptyInput));
    }

    #[test]
    fn test_mistake_severity_averages_over_mistakes_only() {
        let d = four_leaf();
        assert_eq!(mistake_severity(&[0, 1], &[0, 1], &d).unwrap(), None);
        // Mistakes at samples 0 and 3, both within-group distance 1.
        assert_eq!(
            mistake_severity(&[1, 1, 2, 2], &[0, 1, 2, 3], &d).unwrap(),
            Some(1.0)
        );
        // Single cross-group mistake.
        assert_eq!(mistake_severity(&[2], &[0], &d).unwrap(), Some(2.0));
    }

    #[test]
    fn test_hier_dist_at_one_examples() {
        let d = four_leaf();
        let exact: Vec<Vec<usize>> = vec![vec![0], vec![1]];
        assert_eq!(hier_dist_at_k(&exact, &[0, 1], &d, 1).unwrap(), 0.0);
        let mixed: Vec<Vec<usize>> = vec![vec![1], vec![1], vec![2], vec![2]];
        let truths = [0, 1, 2, 3];
        let h1 = hier_dist_at_k(&mixed, &truths, &d, 1).unwrap();
        assert_eq!(h1, 0.5);
        let preds: Vec<usize> = mixed.iter().map(|r| r[0]).collect();
        let sev = mistake_severity(&preds, &truths, &d).unwrap().unwrap();
        let acc = top1(&preds, &truths).unwrap();
        assert!((h1 - sev * (1.0 - acc)).abs() <= 1e-12);
    }

    #[test]
    fn test_hier_dist_at_full_k_ignores_ranking() {
        let d = four_leaf();
        let truths = [0, 3, 1];
        let ranking_a: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3]; 3];
        let ranking_b: Vec<Vec<usize>> = vec![vec![3, 2, 1, 0]; 3];
        let a = hier_dist_at_k(&ranking_a, &truths, &d, 4).unwrap();
        let b = hier_dist_at_k(&ranking_b, &truths, &d, 4).unwrap();
        assert_eq!(a, b);
        let expected: f64 = truths
            .iter()
            .map(|&t| (0..4).map(|c| d.get(c, t) as f64).sum::<f64>() / 4.0)
            .sum::<f64>()
            / 3.0;
        assert!((a - expected).abs() <= 1e-12);
    }

    #[test]
    fn test_hier_dist_rejects_bad_lists() {
        let d = four_leaf();
        assert!(matches!(
            hier_dist_at_k(&[vec![0]], &[0], &d, 5).unwrap_err(),
            Error::BadK { .. }
        ));
        assert!(matches!(
            hier_dist_at_k(&[vec![0, 0]], &[0], &d, 2).unwrap_err(),
            Error::BadK { .. }
        ));
        assert!(matches!(
            hier_dist_at_k(&[vec![0]], &[0], &d, 0).unwrap_err(),
            Error::BadK { .. }
        ));
        assert!(matches!(
            hier_dist_at_k(&[vec![7, 0]], &[0], &d, 2).unwrap_err(),
            Error::IndexOutOfRange { .. }
        ));
    }

    #[test]
    fn test_mistake_histogram_counts() {
        let d = four_leaf();
        let hist = mistake_histogram(&[1, 0], &[0, 1], &d).unwrap();
        assert_eq!(hist, BTreeMap::from([(1, 1.0)]));
        // Mistakes at distances 1, 1, 2 plus one correct sample.
        let hist = mistake_histogram(&[1, 0, 2, 3], &[0, 1, 0, 3], &d).unwrap();
        assert_eq!(hist, BTreeMap::from([(1, 2.0 / 3.0), (2, 1.0 / 3.0)]));
        assert!((hist.values().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(matches!(
            mistake_histogram(&[0], &[0], &d).unwrap_err(),
            Error::NoMistakes
        ));
    }

    #[test]
    fn test_histogram_csv_layout() {
        let hist = BTreeMap::from([(1, 0.5), (2, 0.25), (3, 0.25)]);
        assert_eq!(
            histogram_csv(&hist),
            "distance,probability\n1,0.5\n2,0.25\n3,0.25\n"
        );
    }

    #[test]
    fn test_rank_descending_breaks_ties_by_index() {
        assert_eq!(rank_descending(&[0.2, 0.5, 0.5, 0.1]), vec![1, 2, 0, 3]);
        assert_eq!(rank_descending(&[1.0, 1.0, 1.0]), vec![0, 1, 2]);
        assert_eq!(rank_descending(&[]), Vec::<usize>::new());
    }

    #[test]
    fn test_level_report_clips_k_to_class_count() {
        let d = four_leaf();
        let rankings: Vec<Vec<usize>> = vec![vec![1, 0, 2, 3], vec![1, 2, 0, 3]];
        let report = level_report(2, &rankings, &[0, 1], &d).unwrap();
        assert_eq!(report.classes, 4);
        assert_eq!(report.hier_dist.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(report.top1, 0.5);
        assert_eq!(report.mistake_severity, Some(1.0));
        assert_eq!(report.histogram, BTreeMap::from([(1, 1.0)]));
    }

    #[test]
    fn test_level_report_no_mistakes_has_empty_histogram() {
        let d = four_leaf();
        let rankings: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3], vec![1, 0, 2, 3]];
        let report = level_report(2, &rankings, &[0, 1], &d).unwrap();
        assert_eq!(report.top1, 1.0);
        assert_eq!(report.mistake_severity, None);
        assert!(report.histogram.is_empty());
        assert_eq!(report.hier_dist[&1], 0.0);
    }

    #[test]
    fn test_eval_report_round_trips_through_json() {
        let d = four_leaf();
        let rankings: Vec<Vec<usize>> = vec![vec![1, 0, 2, 3], vec![2, 0, 1, 3]];
        let level = level_report(2, &rankings, &[0, 0], &d).unwrap();
        let report = EvalReport {
            split: "test".to_string(),
            rules: vec![RuleReport {
                rule: "argmax".to_string(),
                levels: vec![level],
            }],
        };
        let json = serde_json::to_string_pretty(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(back.rule("argmax").is_some());
        assert!(back.rule("crm").is_none());
    }

    /// Three-level tree with 8 leaves for randomized identity checks.
    fn eight_leaf() -> DistanceMatrix {
        let paths: Vec<String> = (0..8)
            .map(|i| format!("a{}/b{}/c{}", i / 4, i / 2, i))
            .collect();
        let tree = LabelTree::parse(&paths.join("\n")).unwrap();
        tree.distance_matrix(3).unwrap()
    }

    proptest! {
        #[test]
        fn prop_hier_dist_identity(
            pairs in prop::collection::vec((0usize..8, 0usize..8), 1..40),
        ) {
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let truths: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let d = eight_leaf();
            let topk: Vec<Vec<usize>> = preds.iter().map(|&p| vec![p]).collect();
            let h1 = hier_dist_at_k(&topk, &truths, &d, 1).unwrap();
            let sev = mistake_severity(&preds, &truths, &d).unwrap();
            let acc = top1(&preds, &truths).unwrap();
            let rebuilt = match sev {
                None => 0.0,
                Some(s) => {
                    prop_assert!((1.0..=3.0).contains(&s));
                    s * (1.0 - acc)
                }
            };
            prop_assert!((h1 - rebuilt).abs() <= 1e-12);
        }

        #[test]
        fn prop_metrics_invariant_under_sample_permutation(
            pairs in prop::collection::vec((0usize..8, 0usize..8), 2..30),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let d = eight_leaf();
            let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let truths: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let preds_p: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
            let truths_p: Vec<usize> = order.iter().map(|&i| truths[i]).collect();
            prop_assert_eq!(top1(&preds, &truths).unwrap(), top1(&preds_p, &truths_p).unwrap());
            let a = mistake_severity(&preds, &truths, &d).unwrap();
            let b = mistake_severity(&preds_p, &truths_p, &d).unwrap();
            match (a, b) {
                (None, None) => {}
                (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12),
                _ => prop_assert!(false, "sentinel changed under permutation"),
            }
        }
    }
}
