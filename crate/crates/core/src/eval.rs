//! Average precision over ranked (instance, class) scores, the constant
//! ZeroR baseline and the long-tail frequency-bin report.

use serde::{Deserialize, Serialize};

use crate::corpus::{ClassBinning, EncodedInstance, LabelVocab};
use crate::error::{Error, Result};
use crate::model::{ClessModel, ScoreStats};

/// Scores and ground truth of `n_instances x n_classes` pairs, row-major,
/// columns in class-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n_instances: usize,
    n_classes: usize,
    scores: Vec<f64>,
    truth: Vec<bool>,
}

impl ScoreMatrix {
    pub fn new(n_instances: usize, n_classes: usize, scores: Vec<f64>, truth: Vec<bool>) -> Result<Self> {
        let n = n_instances * n_classes;
        if scores.len() != n || truth.len() != n {
            return Err(Error::shape(format!(
                "{n_instances}x{n_classes} matrix needs {n} cells, got {} scores and {} truths",
                scores.len(),
                truth.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::NonFinite(format!("score {bad} outside [0, 1]")));
        }
        Ok(ScoreMatrix {
            n_instances,
            n_classes,
            scores,
            truth,
        })
    }

    pub fn from_rows(scores: Vec<Vec<f64>>, truth: Vec<Vec<bool>>) -> Result<Self> {
        let n_instances = scores.len();
        let n_classes = scores.first().map_or(0, Vec::len);
        if truth.len() != n_instances
            || scores.iter().any(|r| r.len() != n_classes)
            || truth.iter().any(|r| r.len() != n_classes)
        {
            return Err(Error::shape("ragged score or truth rows"));
        }
        Self::new(
            n_instances,
            n_classes,
            scores.into_iter().flatten().collect(),
            truth.into_iter().flatten().collect(),
        )
    }

    pub fn n_instances(&self) -> usize {
        self.n_instances
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn truth(&self) -> &[bool] {
        &self.truth
    }

    pub fn score_row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn truth_row(&self, i: usize) -> &[bool] {
        &self.truth[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn column(&self, c: usize) -> (Vec<f64>, Vec<bool>) {
        (0..self.n_instances)
            .map(|i| {
                let at = i * self.n_classes + c;
                (self.scores[at], self.truth[at])
            })
            .unzip()
    }

    /// Keeps only the given class columns, in the given order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<ScoreMatrix> {
        if let Some(&c) = classes.iter().find(|&&c| c >= self.n_classes) {
            return Err(Error::Index {
                index: c,
                len: self.n_classes,
            });
        }
        let mut scores = Vec::with_capacity(self.n_instances * classes.len());
        let mut truth = Vec::with_capacity(scores.capacity());
        for i in 0..self.n_instances {
            for &c in classes {
                scores.push(self.scores[i * self.n_classes + c]);
                truth.push(self.truth[i * self.n_classes + c]);
            }
        }
        ScoreMatrix::new(self.n_instances, classes.len(), scores, truth)
    }

    pub fn positives(&self) -> usize {
        self.truth.iter().filter(|&&t| t).count()
    }

    /// Fraction of positive cells.
    pub fn prevalence(&self) -> f64 {
        self.positives() as f64 / self.truth.len() as f64
    }

    /// `instance,class,score,truth` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance,class,score,truth\n");
        for i in 0..self.n_instances {
            for c in 0..self.n_classes {
                let at = i * self.n_classes + c;
                out.push_str(&format!("{i},{c},{},{}\n", self.scores[at], u8::from(self.truth[at])));
            }
        }
        out
    }
}

/// `Σ (R_n - R_{n-1}) P_n` over the thresholds of a descending ranking.
///
/// Tied scores form one threshold, so precision and recall are only taken
/// at the boundaries between distinct scores. Returns `None` when there
/// are no positives.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Result<Option<f64>> {
    if scores.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} truth values",
            scores.len(),
            truth.len()
        )));
    }
    let total_pos = truth.iter().filter(|&&t| t).count();
    if total_pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut seen, mut tp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut start = 0;
    while start < order.len() {
        let score = scores[order[start]];
        let mut end = start;
        while end < order.len() && scores[order[end]].total_cmp(&score).is_eq() {
            tp += usize::from(truth[order[end]]);
            end += 1;
        }
        seen += end - start;
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
        start = end;
    }
    Ok(Some(ap))
}

/// Average precision over all (instance, class) pairs.
pub fn ap_micro(m: &ScoreMatrix) -> Result<f64> {
    average_precision(&m.scores, &m.truth)?
        .ok_or_else(|| Error::Data("no positive pairs; micro AP is undefined".into()))
}

/// Average precision of every class column; `None` for columns without
/// positives.
pub fn per_class_ap(m: &ScoreMatrix) -> Vec<Option<f64>> {
    (0..m.n_classes)
        .map(|c| {
            let (s, t) = m.column(c);
            average_precision(&s, &t).expect("columns have equal length")
        })
        .collect()
}

/// Mean of the per-class APs over classes with at least one positive.
pub fn ap_macro(m: &ScoreMatrix) -> Result<f64> {
    mean_defined(&per_class_ap(m))
        .ok_or_else(|| Error::Data("no class has a positive; macro AP is undefined".into()))
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub ap_micro: f64,
    pub ap_macro: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes with at least one positive.
    pub n_classes_evaluated: usize,
}

pub fn ap_report(m: &ScoreMatrix) -> Result<APReport> {
    let per_class = per_class_ap(m);
    let ap_macro = mean_defined(&per_class)
        .ok_or_else(|| Error::Data("no class has a positive; macro AP is undefined".into()))?;
    Ok(APReport {
        ap_micro: ap_micro(m)?,
        ap_macro,
        n_classes_evaluated: per_class.iter().flatten().count(),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    /// Micro AP per bin, head first; `None` when the bin has no positives.
    pub bin_ap: Vec<Option<f64>>,
    /// Mean over the evaluable bins.
    pub mean: Option<f64>,
    pub class_counts: Vec<usize>,
    /// Positive pairs per bin in the evaluated matrix.
    pub positives: Vec<usize>,
}

impl BinReport {
    pub fn n_evaluable(&self) -> usize {
        self.bin_ap.iter().flatten().count()
    }

    pub fn tail(&self) -> Option<f64> {
        self.bin_ap.last().copied().flatten()
    }
}

/// Micro AP restricted to the classes of each frequency bin.
pub fn longtail_report(m: &ScoreMatrix, binning: &ClassBinning) -> Result<BinReport> {
    if binning.bin_of.len() != m.n_classes {
        return Err(Error::shape(format!(
            "binning covers {} classes, matrix has {}",
            binning.bin_of.len(),
            m.n_classes
        )));
    }
    let mut report = BinReport {
        bin_ap: Vec::new(),
        mean: None,
        class_counts: binning.class_count.clone(),
        positives: Vec::new(),
    };
    for bin in 0..binning.n_bins() {
        let sub = m.select_classes(&binning.classes_in(bin))?;
        report.positives.push(sub.positives());
        let ap = if sub.n_classes() == 0 {
            None
        } else {
            average_precision(&sub.scores, &sub.truth)?
        };
        if ap.is_none() {
            log::warn!("frequency bin {bin} has no positives and is left out of the mean");
        }
        report.bin_ap.push(ap);
    }
    report.mean = mean_defined(&report.bin_ap);
    Ok(report)
}

/// Constant baseline: every cell scores the overall training label
/// prevalence, so the whole matrix is one tie group and its micro AP is
/// the prevalence of the evaluated truth.
pub fn zeror_scores(train_class_counts: &[usize], n_train: usize, eval_truth: &[Vec<bool>]) -> Result<ScoreMatrix> {
    let n_classes = train_class_counts.len();
    if n_train == 0 || n_classes == 0 {
        return Err(Error::Data("ZeroR needs training instances and classes".into()));
    }
    let prevalence =
        train_class_counts.iter().sum::<usize>() as f64 / (n_train as f64 * n_classes as f64);
    let scores = vec![vec![prevalence; n_classes]; eval_truth.len()];
    ScoreMatrix::from_rows(scores, eval_truth.to_vec())
}

/// Ground-truth rows of encoded instances over `n_classes` classes.
pub fn truth_matrix(instances: &[&EncodedInstance], n_classes: usize) -> Vec<Vec<bool>> {
    instances
        .iter()
        .map(|inst| {
            let mut row = vec![false; n_classes];
            for &c in &inst.label_ids {
                row[c] = true;
            }
            row
        })
        .collect()
}

/// Scores every instance against every class of `labels`.
pub fn score_model(
    model: &ClessModel,
    instances: &[&EncodedInstance],
    labels: &LabelVocab,
) -> Result<(ScoreMatrix, ScoreStats)> {
    let (rows, stats) = model.score_texts(
        instances.iter().map(|i| i.token_ids.as_slice()),
        &labels.word_lists(),
    )?;
    let matrix = ScoreMatrix::from_rows(rows, truth_matrix(instances, labels.len()))?;
    Ok((matrix, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::bin_classes;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Enumerates every distinct score as a threshold and counts the
    /// confusion matrix of `score >= threshold` directly.
    fn brute_force_ap(scores: &[f64], truth: &[bool]) -> Option<f64> {
        let positives = truth.iter().filter(|&&t| t).count();
        if positives == 0 {
            return None;
        }
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for th in thresholds {
            let (mut tp, mut fp) = (0, 0);
            for (s, &t) in scores.iter().zip(truth) {
                if *s >= th {
                    if t {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let recall = tp as f64 / positives as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        Some(ap)
    }

    #[test]
    fn hand_worked_example() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap().unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking_and_no_positives() {
        let ap = average_precision(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]).unwrap();
        assert_eq!(ap, Some(1.0));
        assert_eq!(average_precision(&[0.3, 0.2], &[false, false]).unwrap(), None);
        assert!(average_precision(&[0.3], &[true, false]).is_err());
    }

    #[test]
    fn all_tied_scores_give_prevalence() {
        let truth = [true, false, false, true, false, false, false, false];
        let ap = average_precision(&[0.5; 8], &truth).unwrap().unwrap();
        assert_eq!(ap, 0.25);
    }

    #[test]
    fn matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let levels = rng.gen_range(1..6);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / 5.0).collect();
            let truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            let got = average_precision(&scores, &truth).unwrap();
            let want = brute_force_ap(&scores, &truth);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-9, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    fn matrix(scores: &[&[f64]], truth: &[&[u8]]) -> ScoreMatrix {
        ScoreMatrix::from_rows(
            scores.iter().map(|r| r.to_vec()).collect(),
            truth.iter().map(|r| r.iter().map(|&t| t == 1).collect()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn micro_and_macro() {
        let m = matrix(&[&[0.9, 0.1, 0.3], &[0.2, 0.8, 0.4]], &[&[1, 0, 0], &[0, 1, 0]]);
        assert_eq!(ap_micro(&m).unwrap(), 1.0);
        let r = ap_report(&m).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.n_classes_evaluated, 2);
        assert_eq!(r.ap_macro, 1.0);

        let single = matrix(&[&[0.3], &[0.7], &[0.5]], &[&[1], &[0], &[1]]);
        let (s, t) = single.column(0);
        assert_eq!(ap_micro(&single).unwrap(), average_precision(&s, &t).unwrap().unwrap());
        assert_eq!(ap_macro(&single).unwrap(), ap_micro(&single).unwrap());

        let none = matrix(&[&[0.3, 0.2]], &[&[0, 0]]);
        assert!(ap_micro(&none).is_err());
        assert!(ap_macro(&none).is_err());
    }

    #[test]
    fn macro_is_mean_of_class_aps() {
        // class 0: ranking 1,0,0,1 -> AP 0.5*1 + 0.5*0.5 = 0.75
        // class 1: ranking 0,1 -> AP 0.5
        let m = matrix(
            &[&[0.9, 0.2], &[0.8, 0.9], &[0.7, 0.1], &[0.6, 0.0]],
            &[&[1, 1], &[0, 0], &[0, 0], &[1, 0]],
        );
        assert!((ap_macro(&m).unwrap() - 0.625).abs() < 1e-12);
    }

    #[test]
    fn zeror_is_constant_prevalence() {
        let truth = vec![vec![true, false], vec![false, false], vec![true, true]];
        let z = zeror_scores(&[1, 0], 10, &truth).unwrap();
        assert!(z.scores().iter().all(|&s| s == 0.05));
        let single = zeror_scores(&[3], 30, &[vec![true]]).unwrap();
        assert_eq!(single.scores(), &[0.1]);
        assert_eq!(ap_micro(&z).unwrap(), 0.5);
    }

    #[test]
    fn single_bin_equals_global_micro() {
        let m = matrix(&[&[0.9, 0.1, 0.3], &[0.2, 0.8, 0.4]], &[&[1, 0, 1], &[0, 1, 0]]);
        let binning = bin_classes(&[1, 1, 1], 1).unwrap();
        let r = longtail_report(&m, &binning).unwrap();
        assert_eq!(r.bin_ap, vec![Some(ap_micro(&m).unwrap())]);
        assert_eq!(r.mean, r.bin_ap[0]);
    }

    #[test]
    fn empty_bins_are_excluded_from_the_mean() {
        // classes 0..5 with one per bin; class 4 has no test positive
        let m = matrix(
            &[&[0.9, 0.1, 0.3, 0.5, 0.5], &[0.2, 0.8, 0.4, 0.1, 0.6]],
            &[&[1, 0, 1, 0, 0], &[0, 1, 0, 1, 0]],
        );
        let binning = bin_classes(&[5, 4, 3, 2, 1], 5).unwrap();
        let r = longtail_report(&m, &binning).unwrap();
        assert_eq!(r.n_evaluable(), 4);
        assert_eq!(r.bin_ap[4], None);
        let defined: Vec<f64> = r.bin_ap.iter().flatten().copied().collect();
        assert_eq!(r.mean, Some(defined.iter().sum::<f64>() / 4.0));
    }

    proptest! {
        #[test]
        fn ap_is_in_unit_range_and_rank_invariant(
            cells in prop::collection::vec((0u8..10, any::<bool>()), 1..60)
        ) {
            let scores: Vec<f64> = cells.iter().map(|c| c.0 as f64 / 10.0).collect();
            let truth: Vec<bool> = cells.iter().map(|c| c.1).collect();
            if let Some(ap) = average_precision(&scores, &truth).unwrap() {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
                let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() / 100.0).collect();
                let again = average_precision(&squashed, &truth).unwrap().unwrap();
                prop_assert!((ap - again).abs() < 1e-12);
            }
        }

        #[test]
        fn micro_ignores_instance_order(
            rows in prop::collection::vec(prop::collection::vec((0u8..5, any::<bool>()), 3), 2..12),
            seed in any::<u64>(),
        ) {
            let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|c| c.0 as f64 / 5.0).collect()).collect();
            let truth: Vec<Vec<bool>> = rows.iter().map(|r| r.iter().map(|c| c.1).collect()).collect();
            let m = ScoreMatrix::from_rows(scores.clone(), truth.clone()).unwrap();
            prop_assume!(m.positives() > 0);
            let mut order: Vec<usize> = (0..rows.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
            let p = ScoreMatrix::from_rows(
                order.iter().map(|&i| scores[i].clone()).collect(),
                order.iter().map(|&i| truth[i].clone()).collect(),
            ).unwrap();
            prop_assert!((ap_micro(&m).unwrap() - ap_micro(&p).unwrap()).abs() < 1e-12);
        }
    }
}
