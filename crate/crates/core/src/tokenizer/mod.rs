//! Byte-level pair-merge subword vocabulary, context vocabulary, and the
//! fixed-length encoding of actions.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{hour_of_day, Action, Corpus, UNK_CONTEXT};
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
/// Id of byte `b` is `BYTE_OFFSET + b`.
pub const BYTE_OFFSET: u32 = 2;
/// Reserved ids plus the 256 single-byte tokens.
pub const BASE_VOCAB: usize = 258;
pub const NUM_HOURS: usize = 24;
pub const UNK_CONTEXT_ID: u32 = 0;

const VOCAB_FILE_VERSION: u32 = 1;

/// Hour-of-day feature id of an epoch timestamp.
pub fn time_feature(timestamp: i64) -> u32 {
    hour_of_day(timestamp) as u32
}

/// Splits raw text into pieces of leading whitespace followed by a run of
/// non-whitespace. Merges never cross piece boundaries.
fn pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn byte_ids(piece: &str) -> Vec<u32> {
    piece.bytes().map(|b| BYTE_OFFSET + b as u32).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordVocab {
    merges: Vec<(u32, u32)>,
    /// Byte string of each id; empty for the reserved ids.
    tokens: Vec<Vec<u8>>,
    /// Merge pair to (rank, resulting id).
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl SubwordVocab {
    fn base() -> Self {
        let mut tokens = vec![Vec::new(), Vec::new()];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        Self {
            merges: Vec::new(),
            tokens,
            ranks: HashMap::new(),
        }
    }

    /// Replays a merge list on the byte alphabet.
    pub fn from_merges(merges: &[(u32, u32)]) -> Result<Self> {
        let mut v = Self::base();
        let mut by_bytes: HashMap<Vec<u8>, u32> = v
            .tokens
            .iter()
            .enumerate()
            .skip(BYTE_OFFSET as usize)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for &(a, b) in merges {
            if a < BYTE_OFFSET
                || b < BYTE_OFFSET
                || a as usize >= v.tokens.len()
                || b as usize >= v.tokens.len()
            {
                return Err(Error::Invalid(format!(
                    "merge ({a}, {b}) refers to an unknown id"
                )));
            }
            v.push_merge(a, b, &mut by_bytes)?;
        }
        Ok(v)
    }

    fn push_merge(&mut self, a: u32, b: u32, by_bytes: &mut HashMap<Vec<u8>, u32>) -> Result<u32> {
        if self.ranks.contains_key(&(a, b)) {
            return Err(Error::Invalid(format!("duplicate merge ({a}, {b})")));
        }
        let mut bytes = self.tokens[a as usize].clone();
        bytes.extend_from_slice(&self.tokens[b as usize]);
        let id = *by_bytes.entry(bytes.clone()).or_insert_with(|| {
            self.tokens.push(bytes);
            (self.tokens.len() - 1) as u32
        });
        self.ranks.insert((a, b), (self.merges.len(), id));
        self.merges.push((a, b));
        Ok(id)
    }

    /// Number of distinct ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    fn apply_merges(&self, mut ids: Vec<u32>) -> Vec<u32> {
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])))
                .min_by_key(|&&(rank, _)| rank)
                .copied();
            let Some((rank, new_id)) = best else {
                return ids;
            };
            let pair = self.merges[rank];
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
    }

    /// Subword ids of `text` without eos, truncation, or padding.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        pieces(text)
            .into_iter()
            .flat_map(|p| self.apply_merges(byte_ids(p)))
            .collect()
    }

    /// Exactly `max_len` ids: subwords, then eos, truncated, then padded.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = self.tokenize(text);
        ids.push(EOS_ID);
        ids.truncate(max_len);
        ids.resize(max_len, PAD_ID);
        ids
    }

    /// Concatenates token bytes, skipping reserved ids.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| id >= BYTE_OFFSET)
            .flat_map(|&id| {
                self.tokens
                    .get(id as usize)
                    .map(Vec::as_slice)
                    .unwrap_or(&[])
                    .iter()
                    .copied()
            })
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Learns merges greedily: the most frequent adjacent pair is merged until the
/// vocabulary holds `size` ids or no pair occurs twice. Frequency ties go to
/// the lexicographically smallest `(left bytes, right bytes)`.
pub fn learn_bpe<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    size: usize,
) -> Result<SubwordVocab> {
    if size < BASE_VOCAB {
        return Err(Error::Invalid(format!(
            "vocabulary size {size} below the byte alphabet plus reserved ids ({BASE_VOCAB})"
        )));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut any = false;
    for t in texts {
        any = true;
        for p in pieces(t) {
            *counts.entry(p).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Invalid(
            "cannot learn a vocabulary from an empty sample".into(),
        ));
    }
    let mut words: Vec<(Vec<u32>, usize)> =
        counts.into_iter().map(|(p, c)| (byte_ids(p), c)).collect();
    let mut vocab = SubwordVocab::base();
    let mut by_bytes: HashMap<Vec<u8>, u32> = vocab
        .tokens
        .iter()
        .enumerate()
        .skip(BYTE_OFFSET as usize)
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();

    while vocab.len() < size {
        let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += c;
            }
        }
        let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((a, b), c)) = best else { break };
        if c < 2 {
            break;
        }
        let id = vocab.push_merge(a, b, &mut by_bytes)?;
        for (w, _) in &mut words {
            if w.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    out.push(id);
                    i += 2;
                } else {
                    out.push(w[i]);
                    i += 1;
                }
            }
            *w = out;
        }
    }
    Ok(vocab)
}

/// The `K` most frequent contexts get ids `1..=K`; everything else, including
/// the literal unknown label, maps to 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextVocab {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl ContextVocab {
    pub fn from_labels(labels: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if l == UNK_CONTEXT || index.insert(l.clone(), i as u32 + 1).is_some() {
                return Err(Error::Invalid(format!(
                    "context label {l:?} repeated or reserved"
                )));
            }
        }
        Ok(Self { labels, index })
    }

    /// Ranks by frequency, ties broken by label.
    pub fn learn<'a>(contexts: impl IntoIterator<Item = &'a str>, top_k: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for c in contexts {
            if c != UNK_CONTEXT {
                *counts.entry(c).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let labels = ranked
            .into_iter()
            .take(top_k)
            .map(|(l, _)| l.to_string())
            .collect();
        Self::from_labels(labels).expect("ranked labels are distinct")
    }

    pub fn id(&self, context: &str) -> u32 {
        self.index.get(context).copied().unwrap_or(UNK_CONTEXT_ID)
    }

    /// Number of ids, unk included.
    pub fn len(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedAction {
    pub text_ids: Vec<u32>,
    pub hour_id: u32,
    pub context_id: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub max_contexts: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            max_tokens: 32,
            max_contexts: 2048,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Reserved {
    pad: u32,
    eos: u32,
    byte_offset: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    version: u32,
    reserved: Reserved,
    max_tokens: usize,
    merges: Vec<(u32, u32)>,
    contexts: Vec<String>,
}

/// Everything needed to turn an action into model inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub subwords: SubwordVocab,
    pub contexts: ContextVocab,
    pub max_tokens: usize,
}

impl Tokenizer {
    /// Learns both vocabularies from every action in `corpus`.
    pub fn learn(corpus: &Corpus, config: &TokenizerConfig) -> Result<Self> {
        if config.max_tokens == 0 {
            return Err(Error::Invalid("max_tokens must be positive".into()));
        }
        let actions = || corpus.users().flat_map(|h| h.actions.iter());
        let subwords = learn_bpe(actions().map(|a| a.text.as_str()), config.vocab_size)?;
        let contexts =
            ContextVocab::learn(actions().map(|a| a.context.as_str()), config.max_contexts);
        Ok(Self {
            subwords,
            contexts,
            max_tokens: config.max_tokens,
        })
    }

    pub fn encode_action(&self, action: &Action) -> EncodedAction {
        EncodedAction {
            text_ids: self.subwords.encode(&action.text, self.max_tokens),
            hour_id: time_feature(action.timestamp),
            context_id: self.contexts.id(&action.context),
        }
    }

    pub fn encode_actions(&self, actions: &[Action]) -> Vec<EncodedAction> {
        actions.iter().map(|a| self.encode_action(a)).collect()
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_FILE_VERSION,
            reserved: Reserved {
                pad: PAD_ID,
                eos: EOS_ID,
                byte_offset: BYTE_OFFSET,
            },
            max_tokens: self.max_tokens,
            merges: self.subwords.merges.clone(),
            contexts: self.contexts.labels.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile =
            serde_json::from_str(s).map_err(|e| Error::Parse(format!("vocab file: {e}")))?;
        if f.version != VOCAB_FILE_VERSION {
            return Err(Error::Parse(format!(
                "vocab file version {} unsupported",
                f.version
            )));
        }
        if (f.reserved.pad, f.reserved.eos, f.reserved.byte_offset) != (PAD_ID, EOS_ID, BYTE_OFFSET)
        {
            return Err(Error::Parse(
                "vocab file reserved ids differ from this build".into(),
            ));
        }
        if f.max_tokens == 0 {
            return Err(Error::Parse("vocab file max_tokens is 0".into()));
        }
        Ok(Self {
            subwords: SubwordVocab::from_merges(&f.merges)?,
            contexts: ContextVocab::from_labels(f.contexts)?,
            max_tokens: f.max_tokens,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Hex sha256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(c: u8) -> u32 {
        BYTE_OFFSET + c as u32
    }

    #[test]
    fn first_merge_of_aaaa() {
        let v = learn_bpe(["aaaa"], BASE_VOCAB + 1).unwrap();
        assert_eq!(v.merges(), &[(tok(b'a'), tok(b'a'))]);
        assert_eq!(v.tokenize("aaaa"), vec![258, 258]);
    }

    #[test]
    fn base_size_means_no_merges() {
        let v = learn_bpe(["hello hello hello"], BASE_VOCAB).unwrap();
        assert!(v.merges().is_empty());
        assert!(learn_bpe(["x"], BASE_VOCAB - 1).is_err());
        assert!(learn_bpe(std::iter::empty::<&str>(), 300).is_err());
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        // "ab" and "cd" both occur twice; "ab" wins
        let v = learn_bpe(["cd", "ab", "cd", "ab"], BASE_VOCAB + 1).unwrap();
        assert_eq!(v.merges(), &[(tok(b'a'), tok(b'b'))]);
    }

    #[test]
    fn stops_when_nothing_repeats() {
        let v = learn_bpe(["abcdef"], 4000).unwrap();
        assert!(v.merges().is_empty());
    }

    #[test]
    fn pieces_keep_leading_whitespace() {
        assert_eq!(pieces("  hi there\n"), vec!["  hi", " there", "\n"]);
        assert_eq!(pieces(""), Vec::<&str>::new());
    }

    #[test]
    fn encode_pads_and_truncates() {
        let v = learn_bpe(["the cat the hat"], 300).unwrap();
        assert_eq!(v.encode("", 4), vec![EOS_ID, PAD_ID, PAD_ID, PAD_ID]);
        let long = v.encode("zq zq zq zq zq zq zq zq", 5);
        assert_eq!(long.len(), 5);
        assert!(!long.contains(&PAD_ID) && !long.contains(&EOS_ID));
    }

    #[test]
    fn duplicate_byte_strings_share_an_id() {
        let mut by_bytes = HashMap::new();
        let mut v = SubwordVocab::base();
        for (i, t) in v.tokens.iter().enumerate().skip(2) {
            by_bytes.insert(t.clone(), i as u32);
        }
        let ab = v.push_merge(tok(b'a'), tok(b'b'), &mut by_bytes).unwrap();
        let bc = v.push_merge(tok(b'b'), tok(b'c'), &mut by_bytes).unwrap();
        let abc1 = v.push_merge(ab, tok(b'c'), &mut by_bytes).unwrap();
        let abc2 = v.push_merge(tok(b'a'), bc, &mut by_bytes).unwrap();
        assert_eq!(abc1, abc2);
        assert_eq!(v.len(), BASE_VOCAB + 3);
    }

    #[test]
    fn context_vocab_ranking() {
        let v = ContextVocab::learn(["b", "a", "c", "c", "unk", "unk", "unk", "d"], 2);
        assert_eq!(v.labels(), &["c".to_string(), "a".to_string()]);
        assert_eq!(v.id("c"), 1);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), UNK_CONTEXT_ID);
        assert_eq!(v.id("never seen"), UNK_CONTEXT_ID);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn hour_boundaries() {
        assert_eq!(time_feature(1_473_922_980), 7);
        assert_eq!(time_feature(0), 0);
        assert_eq!(time_feature(86_399), 23);
        assert_eq!(time_feature(1_473_922_980 + 86_400), 7);
    }
}
