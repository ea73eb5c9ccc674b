//! Actions, user histories, episodes, and the sampling that turns a corpus
//! into training batches.

mod synth;

pub use synth::{synth_corpus, SynthConfig};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::DateTime;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Context label used when an action carries none.
pub const UNK_CONTEXT: &str = "unk";

const SECONDS_PER_DAY: i64 = 86_400;

/// One user event: when, what was written, and where.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub text: String,
    pub context: String,
}

impl Action {
    pub fn new(timestamp: i64, text: impl Into<String>, context: impl Into<String>) -> Self {
        let context = context.into();
        let context = if context.is_empty() {
            UNK_CONTEXT.to_string()
        } else {
            context
        };
        Self {
            timestamp,
            text: text.into(),
            context,
        }
    }

    /// UTC hour of day, 0..24.
    pub fn hour(&self) -> usize {
        hour_of_day(self.timestamp)
    }
}

/// UTC hour of day of an epoch timestamp.
pub fn hour_of_day(timestamp: i64) -> usize {
    (timestamp.rem_euclid(SECONDS_PER_DAY) / 3600) as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: String,
    /// Sorted by timestamp, non-decreasing.
    pub actions: Vec<Action>,
}

impl UserHistory {
    /// Builds a history, sorting actions stably by timestamp.
    pub fn new(user_id: impl Into<String>, mut actions: Vec<Action>) -> Self {
        actions.sort_by_key(|a| a.timestamp);
        Self {
            user_id: user_id.into(),
            actions,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// A contiguous, chronologically ordered window of one user's actions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub user_id: String,
    pub actions: Vec<Action>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// All user histories, keyed (and iterated) by user id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    users: BTreeMap<String, UserHistory>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_histories(histories: impl IntoIterator<Item = UserHistory>) -> Self {
        Self {
            users: histories
                .into_iter()
                .map(|h| (h.user_id.clone(), h))
                .collect(),
        }
    }

    pub fn insert(&mut self, history: UserHistory) {
        self.users.insert(history.user_id.clone(), history);
    }

    pub fn get(&self, user_id: &str) -> Option<&UserHistory> {
        self.users.get(user_id)
    }

    pub fn users(&self) -> impl Iterator<Item = &UserHistory> {
        self.users.values()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.users.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.users.values().map(UserHistory::len).sum()
    }

    /// Keeps only the named users.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Corpus {
        Corpus::from_histories(ids.into_iter().filter_map(|id| self.users.get(id).cloned()))
    }

    /// Applies `f` to every history.
    pub fn map_histories(&self, f: impl Fn(&UserHistory) -> UserHistory) -> Corpus {
        Corpus::from_histories(self.users.values().map(f))
    }
}

/// Activity bounds and chronological split used to prepare a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub min_actions: usize,
    pub max_actions: usize,
    /// When set, held-out queries come from before this epoch second and
    /// targets from at or after it; otherwise the held-out window is halved
    /// by count.
    pub query_target_boundary: Option<i64>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.75,
            min_actions: 100,
            max_actions: 500,
            query_target_boundary: None,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Invalid(format!(
                "train_fraction {} not in (0, 1)",
                self.train_fraction
            )));
        }
        if self.min_actions == 0 || self.min_actions > self.max_actions {
            return Err(Error::Invalid(format!(
                "activity bounds [{}, {}] invalid",
                self.min_actions, self.max_actions
            )));
        }
        Ok(())
    }
}

/// Outcome of reading a JSONL corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub lines: usize,
    pub actions: usize,
    pub malformed: usize,
    pub users: usize,
}

fn parse_ts(v: &Value) -> std::result::Result<i64, String> {
    match v {
        Value::Number(n) => n
            .as_i64()
            .ok_or_else(|| format!("ts {n} is not an integer")),
        Value::String(s) => DateTime::parse_from_rfc3339(s)
            .map(|d| d.timestamp())
            .map_err(|e| format!("ts {s:?}: {e}")),
        other => Err(format!("ts has unsupported type: {other}")),
    }
}

/// Parses one JSONL record `{user_id, ts, text, context}`.
pub fn parse_action_line(line: &str) -> std::result::Result<(String, Action), String> {
    let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("line is not a JSON object")?;
    let user = match obj.get("user_id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err("missing user_id".into()),
    };
    let ts = parse_ts(obj.get("ts").ok_or("missing ts")?)?;
    if ts < 0 {
        return Err(format!("negative ts {ts}"));
    }
    let text = match obj.get("text") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("text is not a string".into()),
    };
    let context = match obj.get("context") {
        None | Some(Value::Null) => UNK_CONTEXT.to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err("context is not a string".into()),
    };
    Ok((user, Action::new(ts, text, context)))
}

/// Reads a JSONL corpus. Malformed lines are skipped with a warning, or are
/// fatal when `strict` is set.
pub fn ingest_jsonl(path: impl AsRef<Path>, strict: bool) -> Result<(Corpus, IngestReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = IngestReport::default();
    let mut grouped: BTreeMap<String, Vec<Action>> = BTreeMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        match parse_action_line(&line) {
            Ok((user, action)) => {
                grouped.entry(user).or_default().push(action);
                report.actions += 1;
            }
            Err(msg) if strict => {
                return Err(Error::Parse(format!(
                    "{}:{}: {msg}",
                    path.display(),
                    lineno + 1
                )));
            }
            Err(msg) => {
                log::warn!(
                    "{}:{}: skipping malformed line: {msg}",
                    path.display(),
                    lineno + 1
                );
                report.malformed += 1;
            }
        }
    }
    let corpus = Corpus::from_histories(grouped.into_iter().map(|(u, a)| UserHistory::new(u, a)));
    report.users = corpus.len();
    Ok((corpus, report))
}

#[derive(Serialize)]
struct ActionRecord<'a> {
    user_id: &'a str,
    ts: i64,
    text: &'a str,
    context: &'a str,
}

/// Writes the corpus as JSONL, users in id order and actions chronologically.
pub fn write_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for h in corpus.users() {
        for a in &h.actions {
            let rec = ActionRecord {
                user_id: &h.user_id,
                ts: a.timestamp,
                text: &a.text,
                context: &a.context,
            };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Keeps exactly the users with `min_actions <= |actions| <= max_actions`.
pub fn filter_users(corpus: &Corpus, min_actions: usize, max_actions: usize) -> Corpus {
    Corpus::from_histories(
        corpus
            .users()
            .filter(|h| (min_actions..=max_actions).contains(&h.len()))
            .cloned(),
    )
}

/// Splits a history into its first `ceil(fraction * n)` actions and the rest.
pub fn chronological_split(
    history: &UserHistory,
    fraction: f64,
) -> Result<(UserHistory, UserHistory)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "split fraction {fraction} not in (0, 1)"
        )));
    }
    let n = history.len();
    let cut = ((fraction * n as f64).ceil() as usize).min(n);
    let early = history.actions[..cut].to_vec();
    let late = history.actions[cut..].to_vec();
    Ok((
        UserHistory {
            user_id: history.user_id.clone(),
            actions: early,
        },
        UserHistory {
            user_id: history.user_id.clone(),
            actions: late,
        },
    ))
}

/// Uniform start of a length-`len` window in a history of `n` actions.
pub(crate) fn sample_window_start<R: Rng + ?Sized>(n: usize, len: usize, rng: &mut R) -> usize {
    rng.gen_range(0..=n - len)
}

/// Draws the contiguous window `[i, i+len)` with `i` uniform over all valid
/// starts.
pub fn sample_episode<R: Rng + ?Sized>(
    history: &UserHistory,
    len: usize,
    rng: &mut R,
) -> Result<Episode> {
    if len == 0 {
        return Err(Error::Invalid("episode length must be positive".into()));
    }
    if history.len() < len {
        return Err(Error::HistoryTooShort {
            user: history.user_id.clone(),
            len: history.len(),
            needed: len,
        });
    }
    let start = sample_window_start(history.len(), len, rng);
    Ok(Episode {
        user_id: history.user_id.clone(),
        actions: history.actions[start..start + len].to_vec(),
    })
}

/// Draws `batch` `(user index, window start)` pairs: users uniformly with
/// replacement among those with at least `len` actions, then a uniform window.
pub fn sample_windows<R: Rng + ?Sized>(
    lengths: &[usize],
    batch: usize,
    len: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if batch == 0 {
        return Ok(Vec::new());
    }
    let eligible: Vec<usize> = (0..lengths.len()).filter(|&i| lengths[i] >= len).collect();
    if eligible.is_empty() {
        return Err(Error::Invalid(format!(
            "no user has at least {len} actions"
        )));
    }
    Ok((0..batch)
        .map(|_| {
            let u = eligible[rng.gen_range(0..eligible.len())];
            (u, sample_window_start(lengths[u], len, rng))
        })
        .collect())
}

/// A batch of `(episode, author label)` pairs. Labels are dense indices over
/// the corpus users in id order.
pub fn make_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    batch: usize,
    len: usize,
    rng: &mut R,
) -> Result<Vec<(Episode, usize)>> {
    let histories: Vec<&UserHistory> = corpus.users().collect();
    let lengths: Vec<usize> = histories.iter().map(|h| h.len()).collect();
    let windows = sample_windows(&lengths, batch, len, rng)?;
    Ok(windows
        .into_iter()
        .map(|(u, start)| {
            let h = histories[u];
            (
                Episode {
                    user_id: h.user_id.clone(),
                    actions: h.actions[start..start + len].to_vec(),
                },
                u,
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn history(n: usize) -> UserHistory {
        UserHistory::new(
            "u",
            (0..n)
                .map(|i| Action::new(i as i64 * 60, format!("t{i}"), "c"))
                .collect(),
        )
    }

    #[test]
    fn out_of_order_lines_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(
            &p,
            "{\"user_id\":\"u1\",\"ts\":200,\"text\":\"b\",\"context\":\"x\"}\n\
             {\"user_id\":\"u1\",\"ts\":100,\"text\":\"a\",\"context\":\"x\"}\n",
        )
        .unwrap();
        let (c, r) = ingest_jsonl(&p, true).unwrap();
        let h = c.get("u1").unwrap();
        assert_eq!(
            h.actions.iter().map(|a| a.timestamp).collect::<Vec<_>>(),
            vec![100, 200]
        );
        assert_eq!(r.malformed, 0);
    }

    #[test]
    fn missing_context_defaults_to_unk() {
        let (_, a) = parse_action_line(r#"{"user_id":"u","ts":5,"text":"hi"}"#).unwrap();
        assert_eq!(a.context, UNK_CONTEXT);
    }

    #[test]
    fn rfc3339_timestamp_gives_hour() {
        let (_, a) =
            parse_action_line(r#"{"user_id":"u","ts":"2016-09-15T07:03:00Z","text":""}"#).unwrap();
        assert_eq!(a.hour(), 7);
    }

    #[test]
    fn malformed_lines_are_counted_or_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(
            &p,
            "{\"user_id\":\"u\",\"ts\":1,\"text\":\"a\"}\nnot json\n{\"ts\":3}\n",
        )
        .unwrap();
        let (c, r) = ingest_jsonl(&p, false).unwrap();
        assert_eq!((r.lines, r.actions, r.malformed, c.len()), (3, 1, 2, 1));
        assert!(matches!(ingest_jsonl(&p, true), Err(Error::Parse(_))));
        assert!(matches!(
            ingest_jsonl(dir.path().join("missing"), false),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let c = Corpus::from_histories([
            UserHistory::new("b", vec![Action::new(3, "x \"q\"\n", "r1")]),
            UserHistory::new(
                "a",
                vec![Action::new(9, "", "unk"), Action::new(1, "héllo", "r2")],
            ),
        ]);
        write_jsonl(&c, &p).unwrap();
        let (back, _) = ingest_jsonl(&p, true).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn filter_bounds_are_inclusive() {
        let c = Corpus::from_histories(
            [("u1", 50), ("u2", 100), ("u3", 500), ("u4", 501)]
                .iter()
                .map(|&(u, n)| UserHistory {
                    user_id: u.into(),
                    actions: history(n).actions,
                }),
        );
        let kept: Vec<_> = filter_users(&c, 100, 500)
            .user_ids()
            .map(String::from)
            .collect();
        assert_eq!(kept, vec!["u2", "u3"]);
        assert_eq!(filter_users(&c, 1, usize::MAX), c);
        assert!(filter_users(&Corpus::new(), 100, 500).is_empty());
    }

    #[test]
    fn split_uses_ceiling() {
        for (n, f, e, l) in [(100, 0.75, 75, 25), (1, 0.75, 1, 0), (4, 0.5, 2, 2)] {
            let h = history(n);
            let (early, late) = chronological_split(&h, f).unwrap();
            assert_eq!((early.len(), late.len()), (e, l));
            let joined: Vec<_> = early.actions.iter().chain(&late.actions).cloned().collect();
            assert_eq!(joined, h.actions);
        }
        assert!(chronological_split(&history(3), 1.0).is_err());
    }

    #[test]
    fn full_window_is_the_only_window() {
        let h = history(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_episode(&h, 5, &mut rng).unwrap().actions, h.actions);
        }
    }

    #[test]
    fn short_history_error_names_user() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_episode(&history(3), 4, &mut rng)
            .unwrap_err()
            .to_string();
        assert!(err.contains("user u") && err.contains('3'), "{err}");
    }

    #[test]
    fn episodes_are_contiguous_and_seeded() {
        let h = history(100);
        let a = sample_episode(&h, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_episode(&h, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let start = h.actions.iter().position(|x| x == &a.actions[0]).unwrap();
        assert_eq!(&h.actions[start..start + 16], a.actions.as_slice());
    }

    #[test]
    fn batch_edge_cases() {
        let c = Corpus::from_histories([history(20)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = make_batch(&c, 2, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].1, b[1].1);
        assert!(make_batch(&c, 0, 4, &mut rng).unwrap().is_empty());
        assert!(make_batch(&c, 3, 21, &mut rng).is_err());
    }
}
