//! `persona`: batch experiments over episode embeddings.
//!
//! Every command writes its outputs plus a run record (tool, version,
//! resolved settings). On failure nothing it started writing is left behind,
//! a JSON error object goes to stderr, and the exit code is nonzero (2 when an
//! input is missing).

mod config;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use persona::baselines::{baseline_rank, BaselineMethod};
use persona::corpus::{
    chronological_split, filter_users, ingest_jsonl, synth_corpus, write_jsonl, Corpus, Episode,
};
use persona::encoder::InputDims;
use persona::evaluation::{
    affinity_propagation, build_ranking_task, cluster_metrics, disjoint_episodes, embed_episodes,
    rank, ranking_metrics, verify_pairs, write_ranks_tsv, PairSet, RankingReport, RankingTask,
    VerifyMethod, DEFAULT_KS,
};
use persona::objectives::{similarity_matrix, Metric};
use persona::tensor::Tensor;
use persona::tokenizer::{Tokenizer, TokenizerConfig};
use persona::trainer::{train, Checkpoint, EncodedCorpus, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use config::{ExperimentConfig, RunRecord};

const TOOL: &str = "persona";
const VERSION: &str = env!("CARGO_PKG_VERSION");
const EMBEDDING_MAGIC: &[u8; 8] = b"PRSNEMB1";
const RUN_FILE: &str = "run.json";
const LOG_FILE: &str = "train_log.jsonl";

#[derive(Parser)]
#[command(
    name = "persona",
    version,
    about = "Episode embeddings for open-world author identification"
)]
struct Cli {
    /// Worker threads used to embed episodes.
    #[arg(long, global = true, env = "PERSONA_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic corpus as JSONL.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn subword and context vocabularies from the training side of a corpus.
    Vocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder; writes a checkpoint directory with a JSONL log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `corpus.path` from the config.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Use this vocabulary instead of learning one.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write query and target episodes for ranking.
    MakeTask {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Queries come from the held-out (novel) authors only.
        #[arg(long)]
        novel_only: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Embed episodes; writes a binary matrix and a `.labels` sidecar.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank targets for every query. With `--ckpt`, queries and targets are
    /// episode files; without it they are embedding files from `embed`.
    Rank {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        /// Similarity for precomputed embeddings.
        #[arg(long, default_value = "cosine")]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster several disjoint episodes per user with affinity propagation.
    Cluster {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Restrict to the user ids listed one per line.
        #[arg(long)]
        users: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        episodes_per_user: usize,
        #[arg(long, default_value_t = 16)]
        episode_len: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write same/different-author episode pairs split into train/val/test
    /// by author.
    MakePairs {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_split: usize,
        #[arg(long, default_value_t = 16)]
        episode_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Same-author verification on episode pairs.
    Verify {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        method: VerifyMethod,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank with a text baseline instead of a model.
    Baseline {
        #[arg(long)]
        method: BaselineMethod,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = persona::baselines::SCAP_DEFAULT_N)]
        scap_n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and rank at several episode lengths; writes `episode_len,recall_at_8,mrr` CSV.
    SweepLength {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        lengths: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// An input that does not exist.
#[derive(Debug)]
struct Missing(PathBuf);

impl std::fmt::Display for Missing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} not found", self.0.display())
    }
}

impl std::error::Error for Missing {}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Missing(path.to_path_buf()).into())
    }
}

/// Paths this run created; removed on drop unless the run succeeded.
#[derive(Default)]
struct Outputs {
    paths: Vec<PathBuf>,
    done: bool,
}

impl Outputs {
    fn file(&mut self, path: &Path) -> Result<PathBuf> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            self.dir(parent)?;
        }
        self.paths.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    fn dir(&mut self, path: &Path) -> Result<PathBuf> {
        if !path.exists() {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                self.dir(parent)?;
            }
            fs::create_dir(path).with_context(|| format!("creating {}", path.display()))?;
            self.paths.push(path.to_path_buf());
        }
        Ok(path.to_path_buf())
    }

    fn write(&mut self, path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.file(path)?;
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    fn json<S: Serialize>(&mut self, path: &Path, value: &S) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(path, text)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        for p in self.paths.iter().rev() {
            let _ = if p.is_dir() {
                fs::remove_dir_all(p)
            } else {
                fs::remove_file(p)
            };
        }
    }
}

/// `<out>.run.json` for a file output.
fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn record<C: Serialize>(
    outputs: &mut Outputs,
    path: &Path,
    command: &str,
    config: &C,
) -> Result<()> {
    outputs.json(
        path,
        &RunRecord {
            tool: TOOL,
            version: VERSION,
            command,
            config,
        },
    )
}

/// A corpus after activity filtering, with users split into training and
/// novel authors.
struct Prepared {
    corpus: Corpus,
    train_ids: Vec<String>,
    novel_ids: Vec<String>,
}

impl Prepared {
    fn load(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Self> {
        let raw = match path.or(cfg.corpus.path.as_deref()) {
            Some(p) => {
                require(p)?;
                let (corpus, report) = ingest_jsonl(p, cfg.corpus.strict)?;
                info!(
                    "read {}: {} users, {} actions, {} malformed lines",
                    p.display(),
                    report.users,
                    report.actions,
                    report.malformed
                );
                corpus
            }
            None => synth_corpus(&cfg.corpus.synth)?,
        };
        let split = &cfg.corpus.split;
        let corpus = filter_users(&raw, split.min_actions, split.max_actions);
        if corpus.len() < raw.len() {
            info!(
                "kept {} of {} users with {}..={} actions",
                corpus.len(),
                raw.len(),
                split.min_actions,
                split.max_actions
            );
        }
        let ids: Vec<String> = corpus.user_ids().map(str::to_string).collect();
        if cfg.corpus.novel_authors >= ids.len() {
            bail!(
                "corpus.novel_authors {} leaves no training authors among {}",
                cfg.corpus.novel_authors,
                ids.len()
            );
        }
        let cut = ids.len() - cfg.corpus.novel_authors;
        Ok(Self {
            train_ids: ids[..cut].to_vec(),
            novel_ids: ids[cut..].to_vec(),
            corpus,
        })
    }

    /// Early part of every training author's history.
    fn training_corpus(&self, train_fraction: f64) -> Result<Corpus> {
        let histories = self
            .train_ids
            .iter()
            .map(|id| {
                Ok(chronological_split(
                    self.corpus.get(id).expect("id from corpus"),
                    train_fraction,
                )?
                .0)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus::from_histories(histories))
    }

    fn task(&self, cfg: &ExperimentConfig, novel_only: bool) -> Result<RankingTask> {
        let queries: Vec<&str> = if novel_only {
            self.novel_ids.iter().map(String::as_str).collect()
        } else {
            self.corpus
                .user_ids()
                .step_by(cfg.eval.query_every)
                .collect()
        };
        let task_cfg = cfg.task();
        Ok(build_ranking_task(
            &self.corpus,
            &queries,
            &task_cfg,
            &mut ChaCha8Rng::seed_from_u64(task_cfg.seed),
        )?)
    }
}

fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    require(path)?;
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Episode =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if e.is_empty() {
            bail!("{}:{}: episode has no actions", path.display(), i + 1);
        }
        out.push(e);
    }
    Ok(out)
}

fn write_lines<S: Serialize>(
    outputs: &mut Outputs,
    path: &Path,
    items: impl IntoIterator<Item = S>,
) -> Result<()> {
    let p = outputs.file(path)?;
    let mut w =
        BufWriter::new(fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint<f32>> {
    require(dir)?;
    Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

/// Embeds in `threads` contiguous chunks.
fn embed(ckpt: &Checkpoint<f32>, episodes: &[Episode], threads: usize) -> Result<Tensor<f32>> {
    let threads = threads.max(1).min(episodes.len().max(1));
    if threads == 1 {
        return Ok(embed_episodes(&ckpt.encoder, &ckpt.tokenizer, episodes)?);
    }
    let chunk = episodes.len().div_ceil(threads);
    let parts = std::thread::scope(|s| {
        let handles: Vec<_> = episodes
            .chunks(chunk)
            .map(|part| s.spawn(move || embed_episodes(&ckpt.encoder, &ckpt.tokenizer, part)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("embedding worker panicked"))
            .collect::<Vec<_>>()
    });
    let d = ckpt.encoder.config.d_out;
    let mut data = Vec::with_capacity(episodes.len() * d);
    for part in parts {
        data.extend_from_slice(part?.data());
    }
    Ok(Tensor::new(vec![episodes.len(), d], data)?)
}

fn write_embeddings(
    outputs: &mut Outputs,
    path: &Path,
    z: &Tensor<f32>,
    labels: &[String],
) -> Result<()> {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let mut bytes = Vec::with_capacity(24 + 4 * z.len());
    bytes.extend_from_slice(EMBEDDING_MAGIC);
    bytes.extend_from_slice(&(n as u64).to_le_bytes());
    bytes.extend_from_slice(&(d as u64).to_le_bytes());
    for x in z.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    outputs.write(path, bytes)?;
    let mut text = labels.join("\n");
    text.push('\n');
    outputs.write(&sidecar(path, ".labels"), text)
}

/// Reads an embedding matrix and its labels.
fn read_embeddings(path: &Path) -> Result<(Tensor<f32>, Vec<String>)> {
    require(path)?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < 24 || &bytes[..8] != EMBEDDING_MAGIC {
        bail!("{} is not an embedding file", path.display());
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap()) as usize;
    let (n, d) = (word(8), word(16));
    if bytes.len() != 24 + 4 * n * d {
        bail!(
            "{}: {} bytes for a {n}x{d} matrix",
            path.display(),
            bytes.len()
        );
    }
    let data = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let labels_path = sidecar(path, ".labels");
    require(&labels_path)?;
    let labels: Vec<String> = fs::read_to_string(&labels_path)?
        .lines()
        .map(str::to_string)
        .collect();
    if labels.len() != n {
        bail!(
            "{}: {} labels for {n} rows",
            labels_path.display(),
            labels.len()
        );
    }
    Ok((Tensor::new(vec![n, d], data)?, labels))
}

fn placeholder_episodes(labels: &[String]) -> Vec<Episode> {
    labels
        .iter()
        .map(|l| Episode {
            user_id: l.clone(),
            actions: Vec::new(),
        })
        .collect()
}

#[derive(Serialize)]
struct RankOutput<'a> {
    kind: &'static str,
    scorer: String,
    metric: String,
    ties: &'static str,
    median: &'static str,
    num_targets: usize,
    #[serde(flatten)]
    report: &'a RankingReport,
}

fn write_rank_report(
    outputs: &mut Outputs,
    out: &Path,
    task: &RankingTask,
    report: &RankingReport,
    scorer: String,
    metric: String,
) -> Result<()> {
    let doc = RankOutput {
        kind: "ranking",
        scorer,
        metric,
        ties: "pessimistic: tied targets rank above the truth",
        median: "lower median on even counts",
        num_targets: task.targets.len(),
        report,
    };
    outputs.json(out, &doc)?;
    let tsv = outputs.file(&out.with_extension("ranks.tsv"))?;
    let mut w = BufWriter::new(fs::File::create(&tsv)?);
    write_ranks_tsv(task, &report.ranks, &mut w)?;
    w.flush()?;
    Ok(())
}

fn train_model(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    tokenizer: Tokenizer,
    train_cfg: &TrainConfig,
    mut on_log: impl FnMut(&persona::trainer::LogRecord) -> Result<()>,
) -> Result<Checkpoint<f32>> {
    let training = prepared.training_corpus(cfg.corpus.split.train_fraction)?;
    let data = EncodedCorpus::new(&training, &tokenizer);
    info!(
        "training on {} authors, {} actions",
        training.len(),
        training.num_actions()
    );
    let mut failure = None;
    let out = train::<f32>(
        &data,
        InputDims::of(&tokenizer),
        &cfg.model,
        train_cfg,
        |r| {
            info!(
                "iter {} lr {} loss {:.4} acc {:.3}",
                r.iter, r.lr, r.loss, r.aux_acc
            );
            if failure.is_none() {
                failure = on_log(r).err();
            }
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(Checkpoint::new(
        tokenizer,
        out.encoder,
        out.head,
        out.velocity,
        train_cfg.clone(),
        train_cfg.total_iters,
    ))
}

fn learn_vocab(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    tok_cfg: &TokenizerConfig,
) -> Result<Tokenizer> {
    let training = prepared.training_corpus(cfg.corpus.split.train_fraction)?;
    Ok(Tokenizer::learn(&training, tok_cfg)?)
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    split: String,
    same: bool,
    a: Episode,
    b: Episode,
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn make_pairs(corpus: &Corpus, per_split: usize, len: usize, seed: u64) -> Result<Vec<PairRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<&str> = corpus.user_ids().collect();
    ids.shuffle(&mut rng);
    let n = ids.len();
    if n < 10 {
        bail!("need at least 10 users for pair splits, have {n}");
    }
    let bounds = [0, n * 3 / 5, n * 4 / 5, n];
    let mut out = Vec::new();
    for (s, name) in SPLITS.iter().enumerate() {
        let pool = &ids[bounds[s]..bounds[s + 1]];
        for i in 0..per_split {
            let same = i % 2 == 0;
            let (a, b) = if same {
                let u = corpus.get(pool[rng.gen_range(0..pool.len())]).unwrap();
                let mut eps = disjoint_episodes(u, 2, len, &mut rng)?;
                let b = eps.pop().unwrap();
                (eps.pop().unwrap(), b)
            } else {
                let picked: Vec<&&str> = pool.choose_multiple(&mut rng, 2).collect();
                let a =
                    disjoint_episodes(corpus.get(picked[0]).unwrap(), 1, len, &mut rng)?.remove(0);
                let b =
                    disjoint_episodes(corpus.get(picked[1]).unwrap(), 1, len, &mut rng)?.remove(0);
                (a, b)
            };
            out.push(PairRecord {
                split: name.to_string(),
                same,
                a,
                b,
            });
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let mut outputs = Outputs::default();
    let threads = cli.threads;
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            let corpus = synth_corpus(&cfg.corpus.synth)?;
            outputs.file(&out)?;
            write_jsonl(&corpus, &out)?;
            record(
                &mut outputs,
                &sidecar(&out, ".run.json"),
                "synth",
                &cfg.corpus.synth,
            )?;
            info!(
                "wrote {} users, {} actions to {}",
                corpus.len(),
                corpus.num_actions(),
                out.display()
            );
        }
        Command::Vocab {
            corpus,
            size,
            config,
            out,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            let prepared = Prepared::load(&cfg, Some(&corpus))?;
            let tok_cfg = TokenizerConfig {
                vocab_size: size.unwrap_or(cfg.tokenizer.vocab_size),
                ..cfg.tokenizer.clone()
            };
            let tok = learn_vocab(&cfg, &prepared, &tok_cfg)?;
            outputs.file(&out)?;
            tok.save(&out)?;
            let resolved = ExperimentConfig {
                tokenizer: tok_cfg,
                ..cfg
            };
            record(
                &mut outputs,
                &sidecar(&out, ".run.json"),
                "vocab",
                &resolved,
            )?;
        }
        Command::Train {
            config,
            corpus,
            vocab,
            out,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            let prepared = Prepared::load(&cfg, corpus.as_deref())?;
            let tokenizer = match &vocab {
                Some(p) => {
                    require(p)?;
                    Tokenizer::load(p)?
                }
                None => learn_vocab(&cfg, &prepared, &cfg.tokenizer)?,
            };
            outputs.dir(&out)?;
            let log_path = outputs.file(&out.join(LOG_FILE))?;
            let mut log = BufWriter::new(fs::File::create(&log_path)?);
            let ckpt = train_model(&cfg, &prepared, tokenizer, &cfg.train, |r| {
                serde_json::to_writer(&mut log, r)?;
                log.write_all(b"\n")?;
                Ok(())
            })?;
            log.flush()?;
            for f in [
                persona::trainer::MANIFEST_FILE,
                persona::trainer::PARAMS_FILE,
                persona::trainer::VOCAB_FILE,
            ] {
                outputs.file(&out.join(f))?;
            }
            ckpt.save(&out)?;
            let mut resolved = cfg.clone();
            if let Some(c) = corpus {
                resolved.corpus.path = Some(c);
            }
            record(&mut outputs, &out.join(RUN_FILE), "train", &resolved)?;
        }
        Command::MakeTask {
            config,
            corpus,
            novel_only,
            out_dir,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            let prepared = Prepared::load(&cfg, corpus.as_deref())?;
            let task = prepared.task(&cfg, novel_only)?;
            outputs.dir(&out_dir)?;
            write_lines(&mut outputs, &out_dir.join("queries.jsonl"), &task.queries)?;
            write_lines(&mut outputs, &out_dir.join("targets.jsonl"), &task.targets)?;
            record(
                &mut outputs,
                &out_dir.join(RUN_FILE),
                if novel_only {
                    "make-task --novel-only"
                } else {
                    "make-task"
                },
                &cfg,
            )?;
        }
        Command::Embed {
            ckpt,
            episodes,
            out,
        } => {
            let ckpt_data = load_checkpoint(&ckpt)?;
            let eps = read_episodes(&episodes)?;
            let z = embed(&ckpt_data, &eps, threads)?;
            let labels: Vec<String> = eps.iter().map(|e| e.user_id.clone()).collect();
            write_embeddings(&mut outputs, &out, &z, &labels)?;
            record(
                &mut outputs,
                &sidecar(&out, ".run.json"),
                "embed",
                &ckpt_data.manifest,
            )?;
        }
        Command::Rank {
            ckpt,
            queries,
            targets,
            metric,
            out,
        } => {
            let (task, q, t, metric, scorer) = match &ckpt {
                Some(dir) => {
                    let c = load_checkpoint(dir)?;
                    let task = RankingTask {
                        queries: read_episodes(&queries)?,
                        targets: read_episodes(&targets)?,
                    };
                    let q = embed(&c, &task.queries, threads)?;
                    let t = embed(&c, &task.targets, threads)?;
                    (
                        task,
                        q,
                        t,
                        c.manifest.metric,
                        format!("checkpoint {}", dir.display()),
                    )
                }
                None => {
                    let (q, ql) = read_embeddings(&queries)?;
                    let (t, tl) = read_embeddings(&targets)?;
                    let task = RankingTask {
                        queries: placeholder_episodes(&ql),
                        targets: placeholder_episodes(&tl),
                    };
                    (task, q, t, metric, "precomputed embeddings".to_string())
                }
            };
            let report = ranking_metrics(&rank(&task, &q, &t, metric)?, &DEFAULT_KS)?;
            write_rank_report(
                &mut outputs,
                &out,
                &task,
                &report,
                scorer,
                metric.to_string(),
            )?;
            #[derive(Serialize)]
            struct Inputs<'a> {
                ckpt: &'a Option<PathBuf>,
                queries: &'a Path,
                targets: &'a Path,
                metric: String,
            }
            let inputs = Inputs {
                ckpt: &ckpt,
                queries: &queries,
                targets: &targets,
                metric: metric.to_string(),
            };
            record(&mut outputs, &sidecar(&out, ".run.json"), "rank", &inputs)?;
        }
        Command::Cluster {
            ckpt,
            corpus,
            users,
            episodes_per_user,
            episode_len,
            config,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            let c = load_checkpoint(&ckpt)?;
            require(&corpus)?;
            let (all, _) = ingest_jsonl(&corpus, cfg.corpus.strict)?;
            let ids: Vec<String> = match &users {
                Some(p) => {
                    require(p)?;
                    fs::read_to_string(p)?
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(|l| l.trim().to_string())
                        .collect()
                }
                None => all.user_ids().map(str::to_string).collect(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut episodes = Vec::new();
            for id in &ids {
                let h = all
                    .get(id)
                    .ok_or_else(|| anyhow!("user {id} not in {}", corpus.display()))?;
                episodes.extend(disjoint_episodes(
                    h,
                    episodes_per_user,
                    episode_len,
                    &mut rng,
                )?);
            }
            let z = embed(&c, &episodes, threads)?;
            let s = similarity_matrix(&z, &z, c.manifest.metric)?;
            let ap = affinity_propagation(&s, episodes.len(), &cfg.eval.affinity)?;
            let truth: Vec<&str> = episodes.iter().map(|e| e.user_id.as_str()).collect();
            let metrics = cluster_metrics(&ap.labels, &truth)?;
            #[derive(Serialize)]
            struct ClusterOutput<'a> {
                kind: &'static str,
                nmi_normalization: &'static str,
                similarity: String,
                episodes: usize,
                episodes_per_user: usize,
                episode_len: usize,
                converged: bool,
                iterations: usize,
                #[serde(flatten)]
                metrics: &'a persona::evaluation::ClusterReport,
                labels: &'a [usize],
            }
            let doc = ClusterOutput {
                kind: "clustering",
                nmi_normalization: "arithmetic mean of entropies",
                similarity: c.manifest.metric.to_string(),
                episodes: episodes.len(),
                episodes_per_user,
                episode_len,
                converged: ap.converged,
                iterations: ap.iterations,
                metrics: &metrics,
                labels: &ap.labels,
            };
            if !ap.converged {
                log::warn!(
                    "affinity propagation did not converge in {} iterations",
                    ap.iterations
                );
            }
            outputs.json(&out, &doc)?;
            record(
                &mut outputs,
                &sidecar(&out, ".run.json"),
                "cluster",
                &cfg.eval.affinity,
            )?;
        }
        Command::MakePairs {
            corpus,
            per_split,
            episode_len,
            seed,
            out,
        } => {
            require(&corpus)?;
            let (all, _) = ingest_jsonl(&corpus, false)?;
            let pairs = make_pairs(&all, per_split, episode_len, seed)?;
            write_lines(&mut outputs, &out, &pairs)?;
            #[derive(Serialize)]
            struct Settings {
                per_split: usize,
                episode_len: usize,
                seed: u64,
            }
            record(
                &mut outputs,
                &sidecar(&out, ".run.json"),
                "make-pairs",
                &Settings {
                    per_split,
                    episode_len,
                    seed,
                },
            )?;
        }
        Command::Verify {
            ckpt,
            pairs,
            method,
            config,
            out,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            let c = load_checkpoint(&ckpt)?;
            require(&pairs)?;
            let text = fs::read_to_string(&pairs)?;
            let records: Vec<PairRecord> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| {
                    serde_json::from_str(l)
                        .with_context(|| format!("{}:{}", pairs.display(), i + 1))
                })
                .collect::<Result<_>>()?;
            let mut sets = Vec::new();
            for name in SPLITS {
                let part: Vec<&PairRecord> = records.iter().filter(|r| r.split == name).collect();
                let a: Vec<Episode> = part.iter().map(|r| r.a.clone()).collect();
                let b: Vec<Episode> = part.iter().map(|r| r.b.clone()).collect();
                let (za, zb) = if part.is_empty() {
                    let d = c.encoder.config.d_out;
                    (Tensor::zeros(&[0, d]), Tensor::zeros(&[0, d]))
                } else {
                    (
                        embed(&c, &a, threads)?.cast::<f64>(),
                        embed(&c, &b, threads)?.cast::<f64>(),
                    )
                };
                sets.push(PairSet {
                    a: za,
                    b: zb,
                    same: part.iter().map(|r| r.same).collect(),
                });
            }
            let report = verify_pairs(&sets[0], &sets[1], &sets[2], method, &cfg.eval.verify)?;
            outputs.json(&out, &report)?;
            record(
                &mut outputs,
                &sidecar(&out, ".run.json"),
                "verify",
                &cfg.eval.verify,
            )?;
        }
        Command::Baseline {
            method,
            queries,
            targets,
            scap_n,
            out,
        } => {
            let task = RankingTask {
                queries: read_episodes(&queries)?,
                targets: read_episodes(&targets)?,
            };
            let report = baseline_rank(&task, method, scap_n)?;
            write_rank_report(
                &mut outputs,
                &out,
                &task,
                &report,
                method.describe(scap_n),
                "baseline".into(),
            )?;
            #[derive(Serialize)]
            struct Settings {
                method: String,
                scap_n: usize,
            }
            record(
                &mut outputs,
                &sidecar(&out, ".run.json"),
                "baseline",
                &Settings {
                    method: method.to_string(),
                    scap_n,
                },
            )?;
        }
        Command::SweepLength {
            config,
            corpus,
            lengths,
            out,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            if lengths.is_empty() || lengths.contains(&0) {
                bail!("--lengths must list positive episode lengths");
            }
            let prepared = Prepared::load(&cfg, corpus.as_deref())?;
            let tokenizer = learn_vocab(&cfg, &prepared, &cfg.tokenizer)?;
            let mut csv = String::from("episode_len,recall_at_8,mrr\n");
            for &len in &lengths {
                let mut at_len = cfg.clone();
                at_len.train.episode_len = len;
                at_len.eval.query_len = len;
                at_len.eval.target_len = len;
                let ckpt =
                    train_model(&at_len, &prepared, tokenizer.clone(), &at_len.train, |_| {
                        Ok(())
                    })?;
                let task = prepared.task(&at_len, false)?;
                let q = embed(&ckpt, &task.queries, threads)?;
                let t = embed(&ckpt, &task.targets, threads)?;
                let report =
                    ranking_metrics(&rank(&task, &q, &t, ckpt.manifest.metric)?, &DEFAULT_KS)?;
                let r8 = report.recall_at(8).unwrap_or(f64::NAN);
                info!("L={len}: R@8 {r8:.4}, MRR {:.4}", report.mrr);
                csv.push_str(&format!("{len},{r8},{}\n", report.mrr));
            }
            outputs.write(&out, csv)?;
            record(
                &mut outputs,
                &sidecar(&out, ".run.json"),
                "sweep-length",
                &cfg,
            )?;
        }
    }
    outputs.done = true;
    Ok(())
}

fn error_json(err: &anyhow::Error) -> (serde_json::Value, u8) {
    let missing = err.chain().find_map(|e| e.downcast_ref::<Missing>());
    let not_found = err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound)
            || matches!(e.downcast_ref::<persona::Error>(), Some(persona::Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound)
    });
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    let mut body = serde_json::json!({
        "kind": if missing.is_some() || not_found { "not_found" } else { "failed" },
        "message": err.to_string(),
        "causes": chain[1..],
    });
    if let Some(Missing(p)) = missing {
        body["path"] = serde_json::Value::String(p.display().to_string());
    }
    let code = if missing.is_some() || not_found { 2 } else { 1 };
    (serde_json::json!({ "error": body }), code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (json, code) = error_json(&e);
            eprintln!("{json}");
            ExitCode::from(code)
        }
    }
}
