//! Independent reimplementations of the ranking and clustering metrics, and
//! the Gaussian blob fixture.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const KS: [usize; 6] = [1, 2, 4, 8, 16, 32];

/// Sorts targets by descending similarity with the true target placed after
/// every tie, then reads off its position.
pub fn oracle_ranks(sims: &[f64], targets: usize, truth: &[usize]) -> Vec<usize> {
    truth
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            let row = &sims[q * targets..(q + 1) * targets];
            let mut order: Vec<usize> = (0..targets).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap()
                    .then((a == t).cmp(&(b == t)))
            });
            1 + order.iter().position(|&j| j == t).unwrap()
        })
        .collect()
}

pub fn oracle_report(ranks: &[usize]) -> (f64, usize, Vec<f64>) {
    let n = ranks.len();
    let mut mrr = 0.0;
    for &r in ranks {
        mrr += 1.0 / r as f64;
    }
    mrr /= n as f64;
    let need = n.div_ceil(2);
    let mr = (1..)
        .find(|&v| ranks.iter().filter(|&&r| r <= v).count() >= need)
        .unwrap();
    let recall = KS
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64)
        .collect();
    (mrr, mr, recall)
}

fn entropy_of(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| c as f64 / n)
        .map(|p| -p * p.ln())
        .sum()
}

/// Homogeneity, completeness, NMI from joint and marginal entropies.
pub fn oracle_cluster(pred: &[usize], truth: &[usize]) -> (f64, f64, f64) {
    let n = pred.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pc: HashMap<usize, usize> = HashMap::new();
    let mut pk: HashMap<usize, usize> = HashMap::new();
    for (&k, &c) in pred.iter().zip(truth) {
        *joint.entry((c, k)).or_default() += 1;
        *pc.entry(c).or_default() += 1;
        *pk.entry(k).or_default() += 1;
    }
    let hc = entropy_of(pc.values().copied(), n);
    let hk = entropy_of(pk.values().copied(), n);
    let hck = entropy_of(joint.values().copied(), n);
    let mi = hc + hk - hck;
    let h = if hc == 0.0 {
        1.0
    } else {
        1.0 - (hck - hk) / hc
    };
    let c = if hk == 0.0 {
        1.0
    } else {
        1.0 - (hck - hc) / hk
    };
    let nmi = if hc == 0.0 && hk == 0.0 {
        1.0
    } else {
        2.0 * mi / (hc + hk)
    };
    (h.clamp(0.0, 1.0), c.clamp(0.0, 1.0), nmi.clamp(0.0, 1.0))
}

pub fn neg_sq_dist(points: &[(f64, f64)]) -> Vec<f64> {
    points
        .iter()
        .flat_map(|a| {
            points
                .iter()
                .map(move |b| -((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)))
        })
        .collect()
}

pub fn blobs(seed: u64) -> (Vec<(f64, f64)>, Vec<usize>) {
    let centers = [(0.0, 0.0), (10.0, 0.0), (5.0, 8.66)];
    let sizes = [17, 17, 16];
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (c, (&(x, y), &m)) in centers.iter().zip(&sizes).enumerate() {
        for _ in 0..m {
            points.push((x + noise.sample(&mut rng), y + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    (points, labels)
}
