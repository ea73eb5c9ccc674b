//! Deterministic synthetic corpora with controllable per-author signal.
//!
//! Every author owns a signature: a private word distribution, a preferred
//! block of hours, and a preferred set of contexts. With probability
//! `signature_strength` each word, timestamp, and context of an action is
//! drawn from the signature, otherwise from a background shared by everyone.
//! At strength 0 all authors are statistically identical.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{hour_of_day, Action, Corpus, UserHistory};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_authors: usize,
    pub actions_per_author: usize,
    pub signature_strength: f64,
    /// Size of the pool signature words are drawn from.
    pub signature_vocab_size: usize,
    /// Number of signature words each author uses.
    pub signature_support: usize,
    /// Give every author its own block of the signature pool.
    pub disjoint_signatures: bool,
    pub background_vocab_size: usize,
    /// Inclusive range of words per action.
    pub words_per_action: [usize; 2],
    pub num_contexts: usize,
    pub contexts_per_author: usize,
    pub hour_band_width: usize,
    /// Partition the day into `24 / hour_band_width` slots and assign authors
    /// to slots round-robin, so bands of different slots never overlap.
    pub disjoint_hour_bands: bool,
    pub mean_gap_secs: f64,
    pub start_epoch: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_authors: 300,
            actions_per_author: 200,
            signature_strength: 0.8,
            signature_vocab_size: 120,
            signature_support: 60,
            disjoint_signatures: false,
            background_vocab_size: 400,
            words_per_action: [1, 3],
            num_contexts: 60,
            contexts_per_author: 4,
            hour_band_width: 6,
            disjoint_hour_bands: false,
            mean_gap_secs: 4.0 * 3600.0,
            // 2016-08-01T00:00:00Z
            start_epoch: 1_470_009_600,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(0.0..=1.0).contains(&self.signature_strength) {
            return bad(format!(
                "signature_strength {} outside [0, 1]",
                self.signature_strength
            ));
        }
        if self.num_authors < 2 {
            return bad("num_authors must be at least 2".into());
        }
        if self.actions_per_author == 0 {
            return bad("actions_per_author must be positive".into());
        }
        if self.signature_support == 0 || self.signature_support > self.signature_vocab_size {
            return bad("signature_support must be in [1, signature_vocab_size]".into());
        }
        if self.disjoint_signatures
            && self.num_authors * self.signature_support > self.signature_vocab_size
        {
            return bad(format!(
                "disjoint signatures need {} words, pool has {}",
                self.num_authors * self.signature_support,
                self.signature_vocab_size
            ));
        }
        if self.background_vocab_size == 0 {
            return bad("background_vocab_size must be positive".into());
        }
        let [lo, hi] = self.words_per_action;
        if lo == 0 || lo > hi {
            return bad(format!("words_per_action [{lo}, {hi}] invalid"));
        }
        if self.num_contexts == 0
            || self.contexts_per_author == 0
            || self.contexts_per_author > self.num_contexts
        {
            return bad("contexts_per_author must be in [1, num_contexts]".into());
        }
        if self.hour_band_width == 0 || self.hour_band_width > 24 || 24 % self.hour_band_width != 0
        {
            return bad(format!(
                "hour_band_width {} must divide 24",
                self.hour_band_width
            ));
        }
        if !(self.mean_gap_secs.is_finite() && self.mean_gap_secs > 0.0) {
            return bad("mean_gap_secs must be positive".into());
        }
        if self.start_epoch < 0 {
            return bad("start_epoch must be non-negative".into());
        }
        Ok(())
    }
}

/// A categorical distribution sampled through its cumulative weights.
struct Categorical {
    cdf: Vec<f64>,
}

impl Categorical {
    fn new(weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Self { cdf }
    }

    fn zipf(n: usize) -> Self {
        let w: Vec<f64> = (1..=n).map(|r| 1.0 / r as f64).collect();
        Self::new(&w)
    }

    /// Flat-Dirichlet weights.
    fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        Self::new(&w)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        self.cdf
            .partition_point(|&c| c <= u)
            .min(self.cdf.len() - 1)
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "tr", "pl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

fn make_words<R: Rng>(count: usize, seen: &mut HashSet<String>, rng: &mut R) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.gen_range(1..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        if rng.gen_bool(0.3) {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Signature {
    words: Vec<usize>,
    word_dist: Categorical,
    contexts: Vec<usize>,
    context_dist: Categorical,
    band_start: usize,
}

fn exp_gap<R: Rng>(mean: f64, rng: &mut R) -> i64 {
    (-(1.0 - rng.gen::<f64>()).ln() * mean).round().max(1.0) as i64
}

fn in_band(ts: i64, start: usize, width: usize) -> bool {
    (hour_of_day(ts) + 24 - start) % 24 < width
}

/// Generates a corpus from `config`; identical configs give identical corpora.
pub fn synth_corpus(config: &SynthConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut seen = HashSet::new();
    let signature_words = make_words(config.signature_vocab_size, &mut seen, &mut rng);
    let background_words = make_words(config.background_vocab_size, &mut seen, &mut rng);
    let background = Categorical::zipf(config.background_vocab_size);
    let contexts: Vec<String> = (0..config.num_contexts)
        .map(|i| format!("forum{i:03}"))
        .collect();
    let background_contexts = Categorical::zipf(config.num_contexts);
    let slots = 24 / config.hour_band_width;
    let sigma = config.signature_strength;

    let signatures: Vec<Signature> = (0..config.num_authors)
        .map(|a| {
            let k = config.signature_support;
            let words = if config.disjoint_signatures {
                (a * k..(a + 1) * k).collect()
            } else {
                sample(&mut rng, config.signature_vocab_size, k).into_vec()
            };
            let word_dist = Categorical::random(k, &mut rng);
            let ctx = sample(&mut rng, config.num_contexts, config.contexts_per_author).into_vec();
            let context_dist = Categorical::random(ctx.len(), &mut rng);
            let band_start = if config.disjoint_hour_bands {
                (a % slots) * config.hour_band_width
            } else {
                rng.gen_range(0..24)
            };
            Signature {
                words,
                word_dist,
                contexts: ctx,
                context_dist,
                band_start,
            }
        })
        .collect();

    let mut histories = Vec::with_capacity(config.num_authors);
    for (a, sig) in signatures.iter().enumerate() {
        let mut ts = config.start_epoch + rng.gen_range(0..86_400);
        let mut actions = Vec::with_capacity(config.actions_per_author);
        for _ in 0..config.actions_per_author {
            let mut next = ts + exp_gap(config.mean_gap_secs, &mut rng);
            if rng.gen::<f64>() < sigma {
                let mut tries = 0;
                while !in_band(next, sig.band_start, config.hour_band_width) && tries < 200 {
                    next = ts + exp_gap(config.mean_gap_secs, &mut rng);
                    tries += 1;
                }
                if !in_band(next, sig.band_start, config.hour_band_width) {
                    // jump to the next occurrence of the band
                    let day = next - next.rem_euclid(86_400);
                    let mut start = day + sig.band_start as i64 * 3600;
                    if start < next {
                        start += 86_400;
                    }
                    next = start + rng.gen_range(0..config.hour_band_width as i64 * 3600);
                }
            }
            ts = next;
            let n_words = rng.gen_range(config.words_per_action[0]..=config.words_per_action[1]);
            let words: Vec<&str> = (0..n_words)
                .map(|_| {
                    if rng.gen::<f64>() < sigma {
                        signature_words[sig.words[sig.word_dist.sample(&mut rng)]].as_str()
                    } else {
                        background_words[background.sample(&mut rng)].as_str()
                    }
                })
                .collect();
            let context = if rng.gen::<f64>() < sigma {
                &contexts[sig.contexts[sig.context_dist.sample(&mut rng)]]
            } else {
                &contexts[background_contexts.sample(&mut rng)]
            };
            actions.push(Action::new(ts, words.join(" "), context.clone()));
        }
        histories.push(UserHistory::new(format!("author{a:04}"), actions));
    }
    Ok(Corpus::from_histories(histories))
}
