//! Open-world ranking, clustering, and pair verification over episode
//! embeddings.

mod cluster;
mod verify;

pub use cluster::{
    affinity_propagation, cluster_metrics, median_off_diagonal, ApConfig, ApResult, ClusterReport,
};
pub use verify::{verify_pairs, PairSet, VerifyConfig, VerifyMethod, VerifyReport};

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{chronological_split, Corpus, Episode, UserHistory};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::objectives::{similarity_matrix, Metric};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{EncodedAction, Tokenizer};

pub const DEFAULT_KS: [usize; 6] = [1, 2, 4, 8, 16, 32];
const EMBED_CHUNK: usize = 256;

/// Eval-mode embeddings, one row per episode, order preserved. Episodes may
/// have different lengths.
pub fn embed_all<T: Scalar>(
    encoder: &Encoder<T>,
    episodes: &[Vec<EncodedAction>],
) -> Result<Tensor<T>> {
    let d = encoder.config.d_out;
    let mut out = vec![T::zero(); episodes.len() * d];
    let mut by_len: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, e) in episodes.iter().enumerate() {
        by_len.entry(e.len()).or_default().push(i);
    }
    let mut lens: Vec<_> = by_len.into_iter().collect();
    lens.sort();
    for (_, idx) in lens {
        for chunk in idx.chunks(EMBED_CHUNK) {
            let refs: Vec<&[EncodedAction]> =
                chunk.iter().map(|&i| episodes[i].as_slice()).collect();
            let z = encoder.embed(&refs)?;
            for (r, &i) in chunk.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(z.row(r));
            }
        }
    }
    Tensor::new(vec![episodes.len(), d], out)
}

/// Tokenizes then embeds raw episodes.
pub fn embed_episodes<T: Scalar>(
    encoder: &Encoder<T>,
    tokenizer: &Tokenizer,
    episodes: &[Episode],
) -> Result<Tensor<T>> {
    let enc: Vec<Vec<EncodedAction>> = episodes
        .iter()
        .map(|e| tokenizer.encode_actions(&e.actions))
        .collect();
    embed_all(encoder, &enc)
}

/// Queries and candidate targets; each query's author owns exactly one
/// target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingTask {
    pub queries: Vec<Episode>,
    pub targets: Vec<Episode>,
}

impl RankingTask {
    /// Index of each query's true target.
    pub fn truth(&self) -> Result<Vec<usize>> {
        let mut index = HashMap::new();
        for (j, t) in self.targets.iter().enumerate() {
            if index.insert(t.user_id.as_str(), j).is_some() {
                return Err(Error::Invalid(format!(
                    "author {} owns more than one target",
                    t.user_id
                )));
            }
        }
        self.queries
            .iter()
            .map(|q| {
                index.get(q.user_id.as_str()).copied().ok_or_else(|| {
                    Error::Invalid(format!("no target for query author {}", q.user_id))
                })
            })
            .collect()
    }

    /// Keeps only queries by the given authors; targets are unchanged.
    pub fn restrict_queries<'a>(&self, authors: impl IntoIterator<Item = &'a str>) -> RankingTask {
        let keep: std::collections::HashSet<&str> = authors.into_iter().collect();
        RankingTask {
            queries: self
                .queries
                .iter()
                .filter(|q| keep.contains(q.user_id.as_str()))
                .cloned()
                .collect(),
            targets: self.targets.clone(),
        }
    }
}

/// Rank of the true target in each row of a `[Q, T]` similarity matrix:
/// one plus the number of other targets scoring at least as high, so ties
/// count against the query.
pub fn rank_from_similarities(
    sims: &[f64],
    num_targets: usize,
    truth: &[usize],
) -> Result<Vec<usize>> {
    if sims.len() != truth.len() * num_targets {
        return Err(Error::shape(
            "rank",
            format!(
                "{} similarities for {} queries x {num_targets} targets",
                sims.len(),
                truth.len()
            ),
        ));
    }
    truth
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            if t >= num_targets {
                return Err(Error::Invalid(format!("true target {t} out of range")));
            }
            let row = &sims[q * num_targets..(q + 1) * num_targets];
            if row.iter().any(|s| s.is_nan()) {
                return Err(Error::NonFinite { op: "rank" });
            }
            let s = row[t];
            Ok(1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &x)| j != t && x >= s)
                .count())
        })
        .collect()
}

/// Ranks for a task whose query and target embeddings are already computed.
pub fn rank<T: Scalar>(
    task: &RankingTask,
    queries: &Tensor<T>,
    targets: &Tensor<T>,
    metric: Metric,
) -> Result<Vec<usize>> {
    if queries.shape()[0] != task.queries.len() || targets.shape()[0] != task.targets.len() {
        return Err(Error::shape("rank", "embedding rows do not match the task"));
    }
    let truth = task.truth()?;
    let sims = similarity_matrix(queries, targets, metric)?;
    rank_from_similarities(&sims, task.targets.len(), &truth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub mrr: f64,
    /// Lower median of the ranks.
    pub mr: usize,
    pub recall: Vec<RecallAt>,
    pub num_queries: usize,
    pub ranks: Vec<usize>,
}

impl RankingReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.k == k).map(|r| r.recall)
    }
}

pub fn ranking_metrics(ranks: &[usize], ks: &[usize]) -> Result<RankingReport> {
    if ranks.is_empty() {
        return Err(Error::Invalid("no ranks to summarize".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Invalid("ranks start at 1".into()));
    }
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let mr = sorted[(sorted.len() - 1) / 2];
    let recall = ks
        .iter()
        .map(|&k| RecallAt {
            k,
            recall: ranks.iter().filter(|&&r| r <= k).count() as f64 / n,
        })
        .collect();
    Ok(RankingReport {
        mrr,
        mr,
        recall,
        num_queries: ranks.len(),
        ranks: ranks.to_vec(),
    })
}

/// Per-query ranks as `query_index<TAB>author<TAB>rank` lines.
pub fn write_ranks_tsv(
    task: &RankingTask,
    ranks: &[usize],
    mut out: impl Write,
) -> std::io::Result<()> {
    writeln!(out, "query\tauthor\trank")?;
    for (i, (q, r)) in task.queries.iter().zip(ranks).enumerate() {
        writeln!(out, "{i}\t{}\t{r}", q.user_id)?;
    }
    Ok(())
}

/// Embeds both sides and ranks.
pub fn evaluate_ranking<T: Scalar>(
    encoder: &Encoder<T>,
    tokenizer: &Tokenizer,
    task: &RankingTask,
    metric: Metric,
) -> Result<RankingReport> {
    let q = embed_episodes(encoder, tokenizer, &task.queries)?;
    let t = embed_episodes(encoder, tokenizer, &task.targets)?;
    ranking_metrics(&rank(task, &q, &t, metric)?, &DEFAULT_KS)
}

/// How held-out activity is divided into query and target sides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub query_len: usize,
    pub target_len: usize,
    /// Fraction of each history used for training; the rest is held out.
    pub train_fraction: f64,
    /// Epoch second dividing the held-out window into query and target
    /// sides; halved by count when unset.
    pub query_target_boundary: Option<i64>,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            query_len: 16,
            target_len: 16,
            train_fraction: 0.75,
            query_target_boundary: None,
            seed: 17,
        }
    }
}

/// Held-out window of each history divided into the query side and the
/// target side, by count or at the configured boundary.
pub fn held_out_halves(
    history: &UserHistory,
    config: &TaskConfig,
) -> Result<(UserHistory, UserHistory)> {
    let (_, held) = chronological_split(history, config.train_fraction)?;
    match config.query_target_boundary {
        None => chronological_split(&held, 0.5),
        Some(b) => {
            let cut = held.actions.partition_point(|a| a.timestamp < b);
            let side = |actions: &[crate::corpus::Action]| UserHistory {
                user_id: held.user_id.clone(),
                actions: actions.to_vec(),
            };
            Ok((side(&held.actions[..cut]), side(&held.actions[cut..])))
        }
    }
}

fn window<R: Rng>(h: &UserHistory, len: usize, rng: &mut R) -> Result<Episode> {
    crate::corpus::sample_episode(h, len, rng)
}

/// One query per listed author (from the early held-out half) and one target
/// per corpus author (from the late half).
pub fn build_ranking_task<R: Rng>(
    corpus: &Corpus,
    query_authors: &[&str],
    config: &TaskConfig,
    rng: &mut R,
) -> Result<RankingTask> {
    let mut targets = Vec::with_capacity(corpus.len());
    let mut early = HashMap::new();
    for h in corpus.users() {
        let (q, t) = held_out_halves(h, config)?;
        targets.push(window(&t, config.target_len, rng)?);
        early.insert(h.user_id.as_str(), q);
    }
    let queries = query_authors
        .iter()
        .map(|a| {
            let h = early
                .get(a)
                .ok_or_else(|| Error::Invalid(format!("query author {a} not in corpus")))?;
            window(h, config.query_len, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankingTask { queries, targets })
}

/// `count` non-overlapping episodes of length `len`: the history is cut into
/// `count` equal segments and one window is drawn inside each.
pub fn disjoint_episodes<R: Rng>(
    history: &UserHistory,
    count: usize,
    len: usize,
    rng: &mut R,
) -> Result<Vec<Episode>> {
    let seg = if count == 0 { 0 } else { history.len() / count };
    if count == 0 || seg < len {
        return Err(Error::HistoryTooShort {
            user: history.user_id.clone(),
            len: history.len(),
            needed: count * len,
        });
    }
    (0..count)
        .map(|i| {
            let start = i * seg + rng.gen_range(0..=seg - len);
            Ok(Episode {
                user_id: history.user_id.clone(),
                actions: history.actions[start..start + len].to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_ranks() {
        assert_eq!(
            rank_from_similarities(&[0.9, 0.5, 0.1], 3, &[1]).unwrap(),
            vec![2]
        );
        assert_eq!(
            rank_from_similarities(&[0.2, 0.9, 0.1], 3, &[1]).unwrap(),
            vec![1]
        );
        assert_eq!(
            rank_from_similarities(&[0.3; 10], 10, &[4]).unwrap(),
            vec![10]
        );
        assert!(rank_from_similarities(&[0.3; 3], 3, &[3]).is_err());
    }

    #[test]
    fn hand_metrics() {
        let r = ranking_metrics(&[1, 2, 4], &DEFAULT_KS).unwrap();
        assert_eq!(r.mrr, (1.0 + 0.5 + 0.25) / 3.0);
        assert!((r.mrr - 0.58333).abs() < 1e-5);
        assert_eq!(r.mr, 2);
        assert_eq!(r.recall_at(1), Some(1.0 / 3.0));
        assert_eq!(r.recall_at(2), Some(2.0 / 3.0));
        assert_eq!(r.recall_at(4), Some(1.0));
        let ones = ranking_metrics(&[1; 7], &DEFAULT_KS).unwrap();
        assert_eq!((ones.mrr, ones.mr), (1.0, 1));
        assert!(ones.recall.iter().all(|r| r.recall == 1.0));
        assert!(ranking_metrics(&[], &DEFAULT_KS).is_err());
    }

    #[test]
    fn lower_median_on_even_counts() {
        assert_eq!(ranking_metrics(&[5, 1, 3, 9], &[1]).unwrap().mr, 3);
    }

    #[test]
    fn task_truth_requires_unique_targets() {
        let ep = |u: &str| Episode {
            user_id: u.into(),
            actions: vec![],
        };
        let task = RankingTask {
            queries: vec![ep("b"), ep("a")],
            targets: vec![ep("a"), ep("b")],
        };
        assert_eq!(task.truth().unwrap(), vec![1, 0]);
        let dup = RankingTask {
            queries: vec![ep("a")],
            targets: vec![ep("a"), ep("a")],
        };
        assert!(dup.truth().is_err());
        let missing = RankingTask {
            queries: vec![ep("c")],
            targets: vec![ep("a")],
        };
        assert!(missing.truth().is_err());
    }

    #[test]
    fn held_out_window_splits_by_count_or_time() {
        let h = UserHistory::new(
            "u",
            (0..20)
                .map(|i| crate::corpus::Action::new(i * 10, "x", "c"))
                .collect(),
        );
        let (q, t) = held_out_halves(&h, &TaskConfig::default()).unwrap();
        assert_eq!((q.actions[0].timestamp, q.len(), t.len()), (150, 3, 2));
        let cfg = TaskConfig {
            query_target_boundary: Some(185),
            ..TaskConfig::default()
        };
        let (q, t) = held_out_halves(&h, &cfg).unwrap();
        assert_eq!((q.len(), t.actions[0].timestamp), (4, 190));
    }
}
