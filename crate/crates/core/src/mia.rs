//! Reconstruction-loss membership inference and ROC evaluation.
//!
//! A sample is scored by the per-pixel mean absolute error between the
//! model's output and its ground truth. Lower scores look like members: the
//! attack predicts "member" when `score < tau`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{AttackEvalSet, PairedSample};
use crate::nets::Translator;
use crate::rng::RngState;
use crate::tensor::ImageTensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub sample_id: String,
    pub score: f64,
    pub is_member: bool,
}

/// ROC curve swept over every distinct score.
///
/// Point `i` predicts "member" for scores `<= thresholds[i]`; the curve
/// implicitly starts at `(0, 0)` and ends at `(1, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// Mean over `n_draws` noise draws of `mean|G(z,x) - y|`.
pub fn reconstruction_loss(
    g: &dyn Translator,
    x: &ImageTensor,
    y: &ImageTensor,
    noise: &mut RngState,
    n_draws: usize,
) -> Result<f64> {
    if n_draws == 0 {
        return Err(Error::Config("n_draws must be at least 1".into()));
    }
    let mut total = 0.0;
    for _ in 0..n_draws {
        let out = g.translate(x, noise)?;
        total += out.mean_abs_diff(y)?;
    }
    Ok(total / n_draws as f64)
}

fn score_sample(g: &dyn Translator, s: &PairedSample, base: &RngState, n_draws: usize, is_member: bool) -> Result<AttackRecord> {
    let y = s.labeled_y()?;
    // Stream keyed by sample id so a record does not depend on list order.
    let tag = s.id().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut noise = base.split(tag);
    Ok(AttackRecord {
        sample_id: s.id().into(),
        score: reconstruction_loss(g, s.x(), y, &mut noise, n_draws)?,
        is_member,
    })
}

/// Scores every member and non-member with `n_draws` queries each.
pub fn attack_scores_with(g: &dyn Translator, set: &AttackEvalSet, seed: u64, n_draws: usize) -> Result<Vec<AttackRecord>> {
    let base = RngState::new(seed).split(0x006d_6961);
    let members = set.members.iter().map(|s| score_sample(g, s, &base, n_draws, true));
    let nonmembers = set.nonmembers.iter().map(|s| score_sample(g, s, &base, n_draws, false));
    members.chain(nonmembers).collect()
}

/// Scores every member and non-member with a single query each.
pub fn attack_scores(g: &dyn Translator, set: &AttackEvalSet, seed: u64) -> Result<Vec<AttackRecord>> {
    attack_scores_with(g, set, seed, 1)
}

/// Applies the threshold rule `score < tau => member`.
pub fn threshold_predict(records: &[AttackRecord], tau: f64) -> Result<Vec<(String, bool)>> {
    if tau.is_nan() {
        return Err(Error::Invalid("threshold must not be NaN".into()));
    }
    Ok(records.iter().map(|r| (r.sample_id.clone(), r.score < tau)).collect())
}

/// AUCROC of the threshold attack.
///
/// Equals `P(member score < non-member score) + P(tie) / 2`. Area is
/// accumulated in integer counts, so the result matches pair counting
/// exactly up to one final division.
pub fn auc_roc(records: &[AttackRecord]) -> Result<RocResult> {
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Invalid(format!("non-finite score for `{}`", r.sample_id)));
    }
    let n_pos = records.iter().filter(|r| r.is_member).count();
    let n_neg = records.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(format!(
            "ROC needs both classes, got {n_pos} members and {n_neg} non-members"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = records.iter().map(|r| (r.score, r.is_member)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (mut thresholds, mut tpr, mut fpr) = (Vec::new(), Vec::new(), Vec::new());
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let (prev_tp, prev_fp) = (tp, fp);
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // Trapezoid between consecutive thresholds, scaled by 2 * n_pos * n_neg.
        twice_area += (fp - prev_fp) as u128 * (tp + prev_tp) as u128;
        thresholds.push(t);
        tpr.push(tp as f64 / n_pos as f64);
        fpr.push(fp as f64 / n_neg as f64);
    }
    let auc = twice_area as f64 / (2.0 * n_pos as f64 * n_neg as f64);
    Ok(RocResult { thresholds, tpr, fpr, auc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn rec(id: usize, score: f64, m: bool) -> AttackRecord {
        AttackRecord { sample_id: format!("s{id}"), score, is_member: m }
    }

    fn records(members: &[f64], nonmembers: &[f64]) -> Vec<AttackRecord> {
        let mut v: Vec<AttackRecord> = members.iter().enumerate().map(|(i, &s)| rec(i, s, true)).collect();
        v.extend(nonmembers.iter().enumerate().map(|(i, &s)| rec(1000 + i, s, false)));
        v
    }

    /// O(n*m) pair counting.
    fn pair_count_auc(r: &[AttackRecord]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for a in r.iter().filter(|r| r.is_member) {
            for b in r.iter().filter(|r| !r.is_member) {
                den += 1.0;
                if a.score < b.score {
                    num += 1.0;
                } else if a.score == b.score {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_separation() {
        let r = auc_roc(&records(&[0.1, 0.2], &[0.3, 0.4])).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(*r.tpr.last().unwrap(), 1.0);
        assert_eq!(*r.fpr.last().unwrap(), 1.0);
    }

    #[test]
    fn identical_multisets_give_half() {
        let r = auc_roc(&records(&[0.1, 0.5, 0.5, 0.9], &[0.9, 0.5, 0.1, 0.5])).unwrap();
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(auc_roc(&records(&[0.1, 0.2], &[])).is_err());
        assert!(auc_roc(&records(&[], &[0.1])).is_err());
    }

    #[test]
    fn threshold_rule_is_strict() {
        let r = records(&[0.1, 0.2], &[0.2, 0.4]);
        assert!(threshold_predict(&r, -1.0).unwrap().iter().all(|(_, m)| !m));
        assert!(threshold_predict(&r, f64::INFINITY).unwrap().iter().all(|(_, m)| *m));
        let at = threshold_predict(&r, 0.2).unwrap();
        assert_eq!(at.iter().filter(|(_, m)| *m).count(), 1);
        assert!(threshold_predict(&r, f64::NAN).is_err());
    }

    #[test]
    fn median_threshold_matches_rank_count() {
        let scores = [0.7, 0.1, 0.4, 0.9, 0.3, 0.5, 0.2, 0.8];
        let r = records(&scores[..4], &scores[4..]);
        let mut s = scores.to_vec();
        s.sort_by(f64::total_cmp);
        let median = s[4];
        let predicted = threshold_predict(&r, median).unwrap().iter().filter(|(_, m)| *m).count();
        let rank = s.iter().filter(|v| **v < median).count();
        assert_eq!(predicted, rank);
        assert_eq!(predicted, 4);
    }

    #[test]
    fn reconstruction_loss_basics() {
        struct Const(f64);
        impl Translator for Const {
            fn translate(&self, x: &ImageTensor, _: &mut RngState) -> Result<ImageTensor> {
                ImageTensor::constant(x.channels(), x.height(), x.width(), self.0)
            }
        }
        let x = ImageTensor::constant(3, 4, 4, 0.0).unwrap();
        let y1 = ImageTensor::constant(3, 4, 4, 1.0).unwrap();
        let mut r = RngState::new(0);
        assert_eq!(reconstruction_loss(&Const(0.0), &x, &y1, &mut r, 1).unwrap(), 1.0);
        assert_eq!(reconstruction_loss(&Const(1.0), &x, &y1, &mut r, 3).unwrap(), 0.0);
        assert!(reconstruction_loss(&Const(1.0), &x, &y1, &mut r, 0).is_err());
    }

    proptest! {
        #[test]
        fn sweep_equals_pair_count(
            m in prop::collection::vec(0u8..20, 1..60),
            n in prop::collection::vec(0u8..20, 1..60),
        ) {
            let r = records(
                &m.iter().map(|v| *v as f64 / 10.0).collect::<Vec<_>>(),
                &n.iter().map(|v| *v as f64 / 10.0).collect::<Vec<_>>(),
            );
            let auc = auc_roc(&r).unwrap().auc;
            prop_assert!((auc - pair_count_auc(&r)).abs() <= 1e-12);
        }

        #[test]
        fn invariant_under_monotone_transform(
            m in prop::collection::vec(0.0f64..1.0, 1..40),
            n in prop::collection::vec(0.0f64..1.0, 1..40),
        ) {
            let r = records(&m, &n);
            let t: Vec<AttackRecord> = r.iter().map(|a| AttackRecord { score: (3.0 * a.score).exp() + 1.0, ..a.clone() }).collect();
            prop_assert_eq!(auc_roc(&r).unwrap().auc, auc_roc(&t).unwrap().auc);
        }

        #[test]
        fn flipping_labels_complements_auc(
            m in prop::collection::vec(0u8..10, 1..40),
            n in prop::collection::vec(0u8..10, 1..40),
        ) {
            let r = records(&m.iter().map(|v| *v as f64).collect::<Vec<_>>(), &n.iter().map(|v| *v as f64).collect::<Vec<_>>());
            let flipped: Vec<AttackRecord> = r.iter().map(|a| AttackRecord { is_member: !a.is_member, ..a.clone() }).collect();
            let a = auc_roc(&r).unwrap().auc;
            let b = auc_roc(&flipped).unwrap().auc;
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn roc_is_monotone(
            m in prop::collection::vec(0.0f64..1.0, 1..30),
            n in prop::collection::vec(0.0f64..1.0, 1..30),
        ) {
            let roc = auc_roc(&records(&m, &n)).unwrap();
            prop_assert!(roc.tpr.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(roc.fpr.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(roc.thresholds.windows(2).all(|w| w[0] < w[1]));
            prop_assert!((0.0..=1.0).contains(&roc.auc));
        }
    }

    #[test]
    fn random_scores_sit_near_half() {
        // i.i.d. scores regardless of label: AUC ~ 0.5 within a 3-sigma band.
        let n = 200usize;
        let mut rng = RngState::new(12);
        let mut aucs = vec![];
        for _ in 0..20 {
            let m: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let nm: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            aucs.push(auc_roc(&records(&m, &nm)).unwrap().auc);
        }
        // Mann-Whitney null std: sqrt((n+m+1)/(12 n m)).
        let sd = ((2 * n + 1) as f64 / (12.0 * (n * n) as f64)).sqrt();
        for a in aucs {
            assert!((a - 0.5).abs() < 3.0 * sd + 1e-3, "{a}");
        }
    }
}
