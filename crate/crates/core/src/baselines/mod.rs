//! Classical comparison methods: TF-IDF episode vectors and character n-gram
//! profile intersection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Episode;
use crate::error::{Error, Result};
use crate::evaluation::{
    rank_from_similarities, ranking_metrics, RankingReport, RankingTask, DEFAULT_KS,
};

pub const SCAP_PROFILE_LEN: usize = 64;
pub const SCAP_DEFAULT_N: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TfidfMode {
    Word,
    CharTrigram,
    ContextBag,
}

fn episode_text(e: &Episode) -> String {
    e.actions
        .iter()
        .map(|a| a.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Character n-grams of `text`, over Unicode scalar values.
pub fn char_ngrams(text: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    if n == 0 || chars.len() < n {
        return Vec::new();
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

impl TfidfMode {
    /// The episode viewed as one document of terms.
    pub fn terms(self, e: &Episode) -> Vec<String> {
        match self {
            TfidfMode::Word => e
                .actions
                .iter()
                .flat_map(|a| a.text.split_whitespace().map(str::to_string))
                .collect(),
            TfidfMode::CharTrigram => char_ngrams(&episode_text(e), 3),
            TfidfMode::ContextBag => e.actions.iter().map(|a| a.context.clone()).collect(),
        }
    }
}

/// Sparse L2-normalized weights keyed by term.
pub type SparseVec = BTreeMap<String, f64>;

pub fn sparse_dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small
        .iter()
        .filter_map(|(t, w)| large.get(t).map(|v| w * v))
        .sum()
}

/// Document frequencies over a fitted collection; `idf = ln((1+N)/(1+df)) + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TfidfIndex {
    pub mode: TfidfMode,
    pub num_docs: usize,
    df: HashMap<String, usize>,
}

impl TfidfIndex {
    pub fn fit(mode: TfidfMode, docs: &[Episode]) -> Self {
        let mut df = HashMap::new();
        for d in docs {
            let uniq: BTreeSet<String> = mode.terms(d).into_iter().collect();
            for t in uniq {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        Self {
            mode,
            num_docs: docs.len(),
            df,
        }
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        ((1.0 + self.num_docs as f64) / (1.0 + self.df(term) as f64)).ln() + 1.0
    }

    /// Raw counts times idf, L2-normalized. An empty document gives an empty
    /// vector.
    pub fn vectorize_terms(&self, terms: &[String]) -> SparseVec {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in terms {
            *tf.entry(t.clone()).or_insert(0.0) += 1.0;
        }
        for (t, w) in tf.iter_mut() {
            *w *= self.idf(t);
        }
        let norm = tf.values().map(|w| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            tf.values_mut().for_each(|w| *w /= norm);
        }
        tf
    }

    pub fn vectorize(&self, e: &Episode) -> SparseVec {
        self.vectorize_terms(&self.mode.terms(e))
    }
}

/// The `len` most frequent character n-grams, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScapProfile {
    pub n: usize,
    pub grams: BTreeSet<String>,
}

pub fn scap_profile(text: &str, n: usize, len: usize) -> ScapProfile {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for g in char_ngrams(text, n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ScapProfile {
        n,
        grams: ranked.into_iter().take(len).map(|(g, _)| g).collect(),
    }
}

pub fn scap_similarity(a: &ScapProfile, b: &ScapProfile) -> usize {
    a.grams.intersection(&b.grams).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    TfidfWord,
    TfidfChar3,
    TfidfContext,
    Scap,
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMethod::TfidfWord => "tfidf-word",
            BaselineMethod::TfidfChar3 => "tfidf-char3",
            BaselineMethod::TfidfContext => "tfidf-context",
            BaselineMethod::Scap => "scap",
        })
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfidf-word" => Ok(BaselineMethod::TfidfWord),
            "tfidf-char3" => Ok(BaselineMethod::TfidfChar3),
            "tfidf-context" => Ok(BaselineMethod::TfidfContext),
            "scap" => Ok(BaselineMethod::Scap),
            _ => Err(Error::Invalid(format!("unknown baseline {s:?}"))),
        }
    }
}

impl BaselineMethod {
    /// Human-readable statement of the weighting used.
    pub fn describe(self, scap_n: usize) -> String {
        match self {
            BaselineMethod::Scap => format!(
                "char {scap_n}-gram profiles of length {SCAP_PROFILE_LEN}, intersection size"
            ),
            _ => "raw tf x (ln((1+N)/(1+df)) + 1), L2-normalized, cosine; idf fitted on targets"
                .into(),
        }
    }
}

/// `[Q, T]` similarities between task queries and targets.
pub fn baseline_similarities(
    task: &RankingTask,
    method: BaselineMethod,
    scap_n: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(task.queries.len() * task.targets.len());
    match method {
        BaselineMethod::Scap => {
            let prof = |e: &Episode| scap_profile(&episode_text(e), scap_n, SCAP_PROFILE_LEN);
            let targets: Vec<ScapProfile> = task.targets.iter().map(prof).collect();
            for q in &task.queries {
                let qp = prof(q);
                out.extend(targets.iter().map(|t| scap_similarity(&qp, t) as f64));
            }
        }
        _ => {
            let mode = match method {
                BaselineMethod::TfidfWord => TfidfMode::Word,
                BaselineMethod::TfidfChar3 => TfidfMode::CharTrigram,
                _ => TfidfMode::ContextBag,
            };
            let index = TfidfIndex::fit(mode, &task.targets);
            let targets: Vec<SparseVec> = task.targets.iter().map(|t| index.vectorize(t)).collect();
            for q in &task.queries {
                let qv = index.vectorize(q);
                out.extend(targets.iter().map(|t| sparse_dot(&qv, t)));
            }
        }
    }
    out
}

/// Ranks a task with a baseline similarity through the shared metric code.
pub fn baseline_rank(
    task: &RankingTask,
    method: BaselineMethod,
    scap_n: usize,
) -> Result<RankingReport> {
    let truth = task.truth()?;
    let sims = baseline_similarities(task, method, scap_n);
    ranking_metrics(
        &rank_from_similarities(&sims, task.targets.len(), &truth)?,
        &DEFAULT_KS,
    )
}
