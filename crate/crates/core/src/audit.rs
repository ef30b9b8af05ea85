//! Proxy-leakage audit: attack a distilled student with its own proxy set as
//! the "members".
//!
//! A student that learned nothing specific to its proxy inputs scores an AUC
//! near 0.5 here. The attack runs through the same functions as
//! [`crate::mia`].

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{AttackEvalSet, DatasetSplits, PairedSample};
use crate::mia::{attack_scores, auc_roc};
use crate::nets::Translator;
use crate::rng::RngState;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum AuditOutcome {
    Completed { auc: f64, n_members: usize, n_nonmembers: usize },
    Skipped { reason: String },
}

impl AuditOutcome {
    pub fn auc(&self) -> Option<f64> {
        match self {
            AuditOutcome::Completed { auc, .. } => Some(*auc),
            AuditOutcome::Skipped { .. } => None,
        }
    }
}

/// Re-pairs proxy inputs with their quarantined ground truths and draws as
/// many test samples as non-members (or trims the proxy side when the test
/// split is smaller).
pub fn proxy_audit_set(splits: &DatasetSplits, seed: u64) -> Option<AttackEvalSet> {
    let members: Vec<PairedSample> = splits.proxy.iter().filter_map(|s| splits.vault.relabel(s)).collect();
    let n = members.len().min(splits.test.len());
    if n == 0 {
        return None;
    }
    let mut rng = RngState::new(seed).split(0x7072_6f78);
    let mut pick = |v: &[PairedSample]| -> Vec<PairedSample> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        rng.shuffle(&mut order);
        let mut chosen: Vec<usize> = order[..n].to_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| v[i].clone()).collect()
    };
    let members = pick(&members);
    let nonmembers = pick(&splits.test);
    AttackEvalSet::new(members, nonmembers).ok()
}

pub fn proxy_leakage_auc(student: &dyn Translator, splits: &DatasetSplits, seed: u64) -> Result<AuditOutcome> {
    if splits.proxy.is_empty() {
        return Ok(AuditOutcome::Skipped { reason: "proxy split is empty".into() });
    }
    let Some(set) = proxy_audit_set(splits, seed) else {
        return Ok(AuditOutcome::Skipped {
            reason: "no proxy ground truths or no test samples available".into(),
        });
    };
    let records = attack_scores(student, &set, seed)?;
    let roc = auc_roc(&records)?;
    Ok(AuditOutcome::Completed {
        auc: roc.auc,
        n_members: set.members.len(),
        n_nonmembers: set.nonmembers.len(),
    })
}
