//! AUC, per-user AUC (UAUC) and impression-weighted per-user AUC (GAUC).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank-statistic AUC; tied scores share their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidValue("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 averaged
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One user's scored impressions.
#[derive(Clone, Debug, PartialEq)]
pub struct UserGroup {
    pub user: String,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub impressions: usize,
}

impl UserGroup {
    pub fn new(user: impl Into<String>, scores: Vec<f64>, labels: Vec<u8>) -> Self {
        let impressions = scores.len();
        Self {
            user: user.into(),
            scores,
            labels,
            impressions,
        }
    }

    fn eligible(&self) -> bool {
        self.labels.contains(&0) && self.labels.contains(&1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserAuc {
    pub user: String,
    pub impressions: usize,
    /// `None` when the user lacks one of the classes.
    pub auc: Option<f64>,
}

fn per_user(groups: &[UserGroup]) -> Result<Vec<UserAuc>> {
    groups
        .iter()
        .map(|g| {
            Ok(UserAuc {
                user: g.user.clone(),
                impressions: g.impressions,
                auc: if g.eligible() { Some(auc(&g.scores, &g.labels)?) } else { None },
            })
        })
        .collect()
}

/// Weights are rescaled by the first weight so that equal weights reduce to
/// the plain mean bit for bit.
fn weighted_mean(values: &[(f64, f64)]) -> Result<f64> {
    let Some(&(_, w0)) = values.first() else {
        return Err(Error::Degenerate("no user has both classes".into()));
    };
    let (mut num, mut den) = (0.0, 0.0);
    for &(v, w) in values {
        let w = w / w0;
        num += w * v;
        den += w;
    }
    Ok(num / den)
}

fn eligible_pairs(rows: &[UserAuc], weighted: bool) -> Vec<(f64, f64)> {
    rows.iter()
        .filter_map(|r| r.auc.map(|a| (a, if weighted { r.impressions as f64 } else { 1.0 })))
        .collect()
}

/// Mean per-user AUC over users with both classes.
pub fn uauc(groups: &[UserGroup]) -> Result<f64> {
    weighted_mean(&eligible_pairs(&per_user(groups)?, false))
}

/// `Σ impressions_i · auc_i / Σ impressions_i` over users with both classes.
pub fn gauc(groups: &[UserGroup]) -> Result<f64> {
    weighted_mean(&eligible_pairs(&per_user(groups)?, true))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub uauc: f64,
    pub gauc: f64,
    pub samples: usize,
    pub eligible_users: usize,
    pub excluded_users: usize,
    pub per_user: Vec<UserAuc>,
}

impl MetricsReport {
    /// Groups `(user, score, label)` triples by user.
    pub fn compute<'a>(rows: impl IntoIterator<Item = (&'a str, f64, u8)>) -> Result<Self> {
        let mut by_user: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
        let (mut all_s, mut all_l) = (Vec::new(), Vec::new());
        for (u, s, l) in rows {
            let e = by_user.entry(u).or_default();
            e.0.push(s);
            e.1.push(l);
            all_s.push(s);
            all_l.push(l);
        }
        let groups: Vec<UserGroup> = by_user.into_iter().map(|(u, (s, l))| UserGroup::new(u, s, l)).collect();
        let per_user = per_user(&groups)?;
        let eligible = per_user.iter().filter(|r| r.auc.is_some()).count();
        Ok(Self {
            auc: auc(&all_s, &all_l)?,
            uauc: weighted_mean(&eligible_pairs(&per_user, false))?,
            gauc: weighted_mean(&eligible_pairs(&per_user, true))?,
            samples: all_s.len(),
            eligible_users: eligible,
            excluded_users: per_user.len() - eligible,
            per_user,
        })
    }
}
