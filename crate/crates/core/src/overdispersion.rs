//! Moment estimation of the Dirichlet-multinomial concentration `alpha` from
//! replicate samples that share one composition.
//!
//! The estimator works with the intra-class correlation `theta = 1/(alpha+1)`
//! through a one-way ANOVA decomposition of the replicate proportions, pooled
//! over components and weighted by sequencing depth.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::error::{Error, Result};

/// Upper clamp for `theta`; keeps `alpha` strictly positive.
pub const THETA_MAX: f64 = 1.0 - 1e-12;

/// Rows of a count table that are replicates of one subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicateGroup {
    pub group_id: String,
    pub member_rows: Vec<usize>,
}

impl ReplicateGroup {
    pub fn new(group_id: impl Into<String>, member_rows: Vec<usize>) -> Self {
        Self { group_id: group_id.into(), member_rows }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    pub group_id: String,
    #[serde(with = "crate::serde_inf")]
    pub alpha_hat: f64,
    pub theta_hat: f64,
    /// Raw moment ratio before clamping.
    pub theta_raw: f64,
    pub replicates: usize,
    pub total_reads: u64,
}

/// Maps a clamped `theta` to `alpha = (1 - theta)/theta`, infinite at zero.
pub fn alpha_from_theta(theta: f64) -> f64 {
    if theta <= 0.0 {
        f64::INFINITY
    } else {
        (1.0 - theta) / theta
    }
}

/// One-way ANOVA moment estimator of `theta` and `alpha` for one group.
pub fn estimate_alpha_mom(counts: &CountMatrix, group: &ReplicateGroup) -> Result<AlphaEstimate> {
    let rows = &group.member_rows;
    let j = rows.len();
    if j < 2 {
        return Err(Error::InsufficientReplicates { group: group.group_id.clone(), found: j });
    }
    let mut seen = rows.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != j {
        return Err(Error::invalid(format!("group {} repeats a row", group.group_id)));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= counts.nrows()) {
        return Err(Error::invalid(format!("group {} names row {r} out of range", group.group_id)));
    }
    let totals: Vec<f64> = rows.iter().map(|&r| counts.row_totals()[r] as f64).collect();
    if let Some(k) = totals.iter().position(|&t| t == 0.0) {
        return Err(Error::invalid(format!(
            "group {}: sample row {} has zero reads",
            group.group_id, rows[k]
        )));
    }
    let n_sum: f64 = totals.iter().sum();
    let n_sq: f64 = totals.iter().map(|t| t * t).sum();
    let jf = j as f64;
    let n_c = (n_sum - n_sq / n_sum) / (jf - 1.0);

    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for comp in 0..counts.ncols() {
        let w: Vec<f64> = rows.iter().map(|&r| counts.get(r, comp) as f64).collect();
        let pooled = w.iter().sum::<f64>() / n_sum;
        let mut between = 0.0;
        let mut within = 0.0;
        for (wr, nr) in w.iter().zip(&totals) {
            let prop = wr / nr;
            between += nr * (prop - pooled).powi(2);
            within += nr * prop * (1.0 - prop);
        }
        let msb = between / (jf - 1.0);
        let msw = within / (n_sum - jf);
        numerator += msb - msw;
        denominator += msb + (n_c - 1.0) * msw;
    }
    // no spread at all (every read in one component): nothing to detect
    let theta_raw = if denominator > 0.0 { numerator / denominator } else { 0.0 };
    let theta_hat = if theta_raw.is_nan() { 0.0 } else { theta_raw.clamp(0.0, THETA_MAX) };
    Ok(AlphaEstimate {
        group_id: group.group_id.clone(),
        alpha_hat: alpha_from_theta(theta_hat),
        theta_hat,
        theta_raw,
        replicates: j,
        total_reads: n_sum as u64,
    })
}

/// Per-row `alpha`: each grouped row gets its group's estimate, other rows
/// get `+inf` (the multinomial correction).
pub fn estimate_alpha_all(counts: &CountMatrix, groups: &[ReplicateGroup]) -> Result<(Vec<f64>, Vec<AlphaEstimate>)> {
    let mut owner: HashMap<usize, &str> = HashMap::new();
    for g in groups {
        for &r in &g.member_rows {
            if let Some(prev) = owner.insert(r, &g.group_id) {
                return Err(Error::invalid(format!(
                    "row {r} belongs to both group {prev} and group {}",
                    g.group_id
                )));
            }
        }
    }
    let estimates: Vec<AlphaEstimate> = groups
        .par_iter()
        .map(|g| estimate_alpha_mom(counts, g))
        .collect::<Result<_>>()?;
    let mut alpha = vec![f64::INFINITY; counts.nrows()];
    for (g, est) in groups.iter().zip(&estimates) {
        for &r in &g.member_rows {
            alpha[r] = est.alpha_hat;
        }
    }
    Ok((alpha, estimates))
}

/// Groups rows `i` and `i + n/2` (the paired simulation layout).
pub fn pair_halves(n: usize) -> Result<Vec<ReplicateGroup>> {
    if n % 2 != 0 || n == 0 {
        return Err(Error::invalid(format!("pairing halves needs an even row count, got {n}")));
    }
    let half = n / 2;
    Ok((0..half)
        .map(|i| ReplicateGroup::new(format!("pair{}", i + 1), vec![i, i + half]))
        .collect())
}

/// Builds groups from `(sample_id, group_id)` pairs, in first-appearance order.
pub fn groups_from_labels(sample_ids: &[String], assignments: &[(String, String)]) -> Result<Vec<ReplicateGroup>> {
    let index: HashMap<&str, usize> = sample_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut order: Vec<String> = Vec::new();
    let mut members: HashMap<String, Vec<usize>> = HashMap::new();
    for (sample, group) in assignments {
        let row = *index
            .get(sample.as_str())
            .ok_or_else(|| Error::invalid(format!("unknown sample id {sample:?} in group file")))?;
        if !members.contains_key(group) {
            order.push(group.clone());
        }
        members.entry(group.clone()).or_default().push(row);
    }
    Ok(order
        .into_iter()
        .map(|g| {
            let rows = members.remove(&g).unwrap_or_default();
            ReplicateGroup::new(g, rows)
        })
        .collect())
}

/// Per-row group label (`None` for ungrouped rows), used for group-aware
/// resampling and fold assignment.
pub fn row_labels(n: usize, groups: &[ReplicateGroup]) -> Vec<Option<usize>> {
    let mut labels = vec![None; n];
    for (k, g) in groups.iter().enumerate() {
        for &r in &g.member_rows {
            if r < n {
                labels[r] = Some(k);
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_replicates_give_infinite_alpha() {
        let counts = CountMatrix::from_rows(&[vec![10, 20, 30], vec![10, 20, 30]]).unwrap();
        let est = estimate_alpha_mom(&counts, &ReplicateGroup::new("g", vec![0, 1])).unwrap();
        assert!(est.theta_raw < 0.0);
        assert_eq!(est.theta_hat, 0.0);
        assert!(est.alpha_hat.is_infinite());
    }

    #[test]
    fn scaled_identical_replicates_stay_infinite() {
        for k in [1u64, 3, 10] {
            let counts = CountMatrix::from_rows(&[vec![10 * k, 20 * k, 30 * k], vec![10 * k, 20 * k, 30 * k]]).unwrap();
            let est = estimate_alpha_mom(&counts, &ReplicateGroup::new("g", vec![0, 1])).unwrap();
            assert!(est.alpha_hat.is_infinite());
        }
    }

    #[test]
    fn spread_replicates_give_finite_alpha() {
        let counts = CountMatrix::from_rows(&[vec![100, 900], vec![900, 100]]).unwrap();
        let est = estimate_alpha_mom(&counts, &ReplicateGroup::new("g", vec![0, 1])).unwrap();
        assert!(est.theta_hat > 0.5);
        assert!((est.alpha_hat - (1.0 - est.theta_hat) / est.theta_hat).abs() < 1e-12);
    }

    #[test]
    fn moment_identity_on_expected_mean_squares() {
        // Replace the random mean squares by their beta-binomial expectations:
        // E[MSB] = pi(1-pi)(1+(N-1)theta), E[MSW] = pi(1-pi)(1-theta) for equal N.
        // The ratio must return theta exactly.
        let (n, theta) = (500.0f64, 0.02f64);
        let pi = [0.2, 0.3, 0.5];
        let (mut num, mut den) = (0.0, 0.0);
        for q in pi {
            let v = q * (1.0 - q);
            let msb = v * (1.0 + (n - 1.0) * theta);
            let msw = v * (1.0 - theta);
            num += msb - msw;
            den += msb + (n - 1.0) * msw;
        }
        assert!((num / den - theta).abs() < 1e-14);
    }

    #[test]
    fn errors() {
        let counts = CountMatrix::from_rows(&[vec![1, 2], vec![0, 0], vec![3, 4]]).unwrap();
        assert!(matches!(
            estimate_alpha_mom(&counts, &ReplicateGroup::new("g", vec![0])),
            Err(Error::InsufficientReplicates { found: 1, .. })
        ));
        assert!(estimate_alpha_mom(&counts, &ReplicateGroup::new("g", vec![0, 1])).is_err());
        let overlap = vec![ReplicateGroup::new("a", vec![0, 2]), ReplicateGroup::new("b", vec![2, 1])];
        assert!(estimate_alpha_all(&counts, &overlap).is_err());
    }

    #[test]
    fn assignment_contract() {
        let counts =
            CountMatrix::from_rows(&[vec![100, 900], vec![900, 100], vec![5, 5], vec![6, 4]]).unwrap();
        let (alpha, est) = estimate_alpha_all(&counts, &[]).unwrap();
        assert!(est.is_empty());
        assert!(alpha.iter().all(|a| a.is_infinite()));
        let (alpha, est) = estimate_alpha_all(&counts, &[ReplicateGroup::new("g", vec![0, 1])]).unwrap();
        assert_eq!(alpha[0], est[0].alpha_hat);
        assert_eq!(alpha[1], est[0].alpha_hat);
        assert!(alpha[0].is_finite());
        assert!(alpha[2].is_infinite() && alpha[3].is_infinite());
    }

    #[test]
    fn paired_layout() {
        let groups = pair_halves(6).unwrap();
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[1].member_rows, vec![1, 4]);
        assert!(groups.iter().all(|g| g.member_rows.len() == 2));
        assert!(pair_halves(5).is_err());
    }

    #[test]
    fn labels_to_groups() {
        let ids: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let pairs = vec![
            ("a".to_string(), "x".to_string()),
            ("c".to_string(), "y".to_string()),
            ("b".to_string(), "x".to_string()),
        ];
        let g = groups_from_labels(&ids, &pairs).unwrap();
        assert_eq!(g[0], ReplicateGroup::new("x", vec![0, 1]));
        assert_eq!(g[1], ReplicateGroup::new("y", vec![2]));
        assert!(groups_from_labels(&ids, &[("zz".into(), "x".into())]).is_err());
    }
}
