use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TIE_BREAK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApConfig {
    pub damping: f64,
    /// Self-similarity of every point; the median off-diagonal similarity
    /// when unset.
    pub preference: Option<f64>,
    pub max_iter: usize,
    /// Iterations the exemplar set must stay unchanged to stop.
    pub convergence_iter: usize,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            preference: None,
            max_iter: 1000,
            convergence_iter: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// Cluster index per point, numbered by exemplar order.
    pub labels: Vec<usize>,
    pub exemplars: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

/// Median of the off-diagonal entries of a square matrix (mean of the two
/// middle values when their count is even).
pub fn median_off_diagonal(s: &[f64], n: usize) -> f64 {
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| s[i * n + k]))
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        (v[m / 2 - 1] + v[m / 2]) / 2.0
    }
}

/// Exemplar clustering by responsibility/availability message passing on a
/// row-major `n x n` similarity matrix.
pub fn affinity_propagation(similarities: &[f64], n: usize, config: &ApConfig) -> Result<ApResult> {
    if similarities.len() != n * n {
        return Err(Error::shape(
            "affinity_propagation",
            format!("{} entries for {n} points", similarities.len()),
        ));
    }
    if similarities.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            op: "affinity_propagation",
        });
    }
    if !(0.5..1.0).contains(&config.damping) {
        return Err(Error::Invalid(format!(
            "damping {} outside [0.5, 1)",
            config.damping
        )));
    }
    if n == 0 {
        return Ok(ApResult {
            labels: vec![],
            exemplars: vec![],
            converged: true,
            iterations: 0,
        });
    }
    if n == 1 {
        return Ok(ApResult {
            labels: vec![0],
            exemplars: vec![0],
            converged: true,
            iterations: 0,
        });
    }
    let pref = config
        .preference
        .unwrap_or_else(|| median_off_diagonal(similarities, n));
    let mut s = similarities.to_vec();
    for i in 0..n {
        s[i * n + i] = pref;
    }
    // Exactly tied configurations otherwise oscillate forever; a bonus far
    // below any real difference settles them on the lowest-index exemplar.
    let off = (0..n).flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| (i, k)));
    let (lo, hi) = off.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (i, k)| {
        (
            lo.min(similarities[i * n + k]),
            hi.max(similarities[i * n + k]),
        )
    });
    let unit = TIE_BREAK * (hi - lo).max(pref.abs()).max(f64::MIN_POSITIVE);
    let msg: Vec<f64> = (0..n * n)
        .map(|ik| s[ik] + unit * (n - ik % n) as f64 / n as f64)
        .collect();
    let lam = config.damping;
    let mut r = vec![0.0; n * n];
    let mut a = vec![0.0; n * n];
    let mut last: Vec<bool> = vec![false; n];
    let mut stable = 0;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..config.max_iter {
        iterations = it + 1;
        for i in 0..n {
            let row = i * n;
            let (mut best, mut best_k, mut second) = (f64::NEG_INFINITY, 0, f64::NEG_INFINITY);
            for k in 0..n {
                let v = a[row + k] + msg[row + k];
                if v > best {
                    second = best;
                    best = v;
                    best_k = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let other = if k == best_k { second } else { best };
                r[row + k] = lam * r[row + k] + (1.0 - lam) * (msg[row + k] - other);
            }
        }
        for k in 0..n {
            let pos_sum: f64 = (0..n)
                .filter(|&i| i != k)
                .map(|i| r[i * n + k].max(0.0))
                .sum();
            for i in 0..n {
                let new = if i == k {
                    pos_sum
                } else {
                    (r[k * n + k] + pos_sum - r[i * n + k].max(0.0)).min(0.0)
                };
                a[i * n + k] = lam * a[i * n + k] + (1.0 - lam) * new;
            }
        }
        let current: Vec<bool> = (0..n).map(|k| a[k * n + k] + r[k * n + k] > 0.0).collect();
        if current == last && current.iter().any(|&e| e) {
            stable += 1;
            if stable >= config.convergence_iter {
                converged = true;
                break;
            }
        } else {
            stable = 1;
            last = current;
        }
    }
    let mut exemplars: Vec<usize> = (0..n)
        .filter(|&k| a[k * n + k] + r[k * n + k] > 0.0)
        .collect();
    if exemplars.is_empty() {
        let k = (0..n).fold(0, |b, k| {
            if a[k * n + k] + r[k * n + k] > a[b * n + b] + r[b * n + b] {
                k
            } else {
                b
            }
        });
        exemplars.push(k);
    }
    if !converged {
        warn!(
            "affinity propagation did not converge in {} iterations",
            config.max_iter
        );
    }
    let labels = (0..n)
        .map(|i| {
            if let Some(c) = exemplars.iter().position(|&e| e == i) {
                return c;
            }
            (0..exemplars.len()).fold(0, |b, c| {
                if s[i * n + exemplars[c]] > s[i * n + exemplars[b]] {
                    c
                } else {
                    b
                }
            })
        })
        .collect();
    Ok(ApResult {
        labels,
        exemplars,
        converged,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub nmi: f64,
    pub homogeneity: f64,
    pub completeness: f64,
    pub num_clusters: usize,
    pub num_classes: usize,
}

fn dense<L: Ord + Clone>(labels: &[L]) -> (Vec<usize>, usize) {
    let ids: BTreeMap<L, usize> = labels.iter().cloned().map(|l| (l, 0)).collect();
    let ids: BTreeMap<L, usize> = ids.into_keys().enumerate().map(|(i, l)| (l, i)).collect();
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

/// Homogeneity, completeness, and NMI (mutual information over the
/// arithmetic mean of the two entropies), natural logarithms.
pub fn cluster_metrics<A: Ord + Clone, B: Ord + Clone>(
    predicted: &[A],
    truth: &[B],
) -> Result<ClusterReport> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::shape(
            "cluster_metrics",
            format!("{} predictions for {} labels", predicted.len(), truth.len()),
        ));
    }
    let (c, nc) = dense(truth);
    let (k, nk) = dense(predicted);
    let n = truth.len() as f64;
    let mut cont = vec![0usize; nc * nk];
    for (&ci, &ki) in c.iter().zip(&k) {
        cont[ci * nk + ki] += 1;
    }
    let a: Vec<usize> = (0..nc)
        .map(|ci| (0..nk).map(|ki| cont[ci * nk + ki]).sum())
        .collect();
    let b: Vec<usize> = (0..nk)
        .map(|ki| (0..nc).map(|ci| cont[ci * nk + ki]).sum())
        .collect();
    let entropy = |counts: &[usize]| -> f64 {
        -counts
            .iter()
            .filter(|&&x| x > 0)
            .map(|&x| (x as f64 / n) * (x as f64 / n).ln())
            .sum::<f64>()
    };
    let (h_c, h_k) = (entropy(&a), entropy(&b));
    let (mut h_c_given_k, mut h_k_given_c, mut mi) = (0.0, 0.0, 0.0);
    for ci in 0..nc {
        for ki in 0..nk {
            let x = cont[ci * nk + ki];
            if x == 0 {
                continue;
            }
            let p = x as f64 / n;
            h_c_given_k -= p * (x as f64 / b[ki] as f64).ln();
            h_k_given_c -= p * (x as f64 / a[ci] as f64).ln();
            mi += p * ((n * x as f64) / (a[ci] as f64 * b[ki] as f64)).ln();
        }
    }
    let homogeneity = if h_c == 0.0 {
        1.0
    } else {
        1.0 - h_c_given_k / h_c
    };
    let completeness = if h_k == 0.0 {
        1.0
    } else {
        1.0 - h_k_given_c / h_k
    };
    let nmi = if h_c == 0.0 && h_k == 0.0 {
        1.0
    } else {
        2.0 * mi / (h_c + h_k)
    };
    let clip = |x: f64| x.clamp(0.0, 1.0);
    Ok(ClusterReport {
        nmi: clip(nmi),
        homogeneity: clip(homogeneity),
        completeness: clip(completeness),
        num_clusters: nk,
        num_classes: nc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neg_sq(points: &[f64]) -> Vec<f64> {
        points
            .iter()
            .flat_map(|&x| points.iter().map(move |&y| -(x - y) * (x - y)))
            .collect()
    }

    #[test]
    fn three_points_two_clusters() {
        let s = neg_sq(&[0.0, 0.1, 10.0]);
        assert_eq!(median_off_diagonal(&s, 3), s[1 * 3 + 2]);
        let r = affinity_propagation(&s, 3, &ApConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.labels[0], r.labels[1]);
        assert_ne!(r.labels[0], r.labels[2]);
    }

    #[test]
    fn single_point() {
        let r = affinity_propagation(&[0.0], 1, &ApConfig::default()).unwrap();
        assert_eq!((r.labels, r.exemplars), (vec![0], vec![0]));
    }

    #[test]
    fn non_square_is_error() {
        assert!(affinity_propagation(&[0.0; 5], 2, &ApConfig::default()).is_err());
    }

    #[test]
    fn metric_fixtures() {
        let perfect = cluster_metrics(&[3, 3, 7, 7, 1], &["a", "a", "b", "b", "c"]).unwrap();
        assert_eq!(
            (perfect.nmi, perfect.homogeneity, perfect.completeness),
            (1.0, 1.0, 1.0)
        );
        let single = cluster_metrics(&[0, 0, 0, 0], &[0, 1, 2, 2]).unwrap();
        assert_eq!(
            (single.homogeneity, single.completeness, single.nmi),
            (0.0, 1.0, 0.0)
        );
        let indep = cluster_metrics(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(
            (indep.nmi, indep.homogeneity, indep.completeness),
            (0.0, 0.0, 0.0)
        );
        assert!(cluster_metrics(&[0], &[0, 1]).is_err());
    }
}
