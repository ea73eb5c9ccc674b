//! Joint training of encoder and head with momentum SGD.

mod checkpoint;

pub use checkpoint::{
    Checkpoint, Manifest, TensorEntry, TensorKind, CHECKPOINT_VERSION, MANIFEST_FILE, PARAMS_FILE,
    VOCAB_FILE,
};

use std::collections::BTreeMap;

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_windows, Corpus};
use crate::encoder::{Encoder, InputDims, ModelConfig};
use crate::error::{Error, Result};
use crate::objectives::{Head, HeadConfig};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Mode, ParamStore, Tensor};
use crate::tokenizer::{EncodedAction, Tokenizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    pub episode_len: usize,
    pub lr_initial: f64,
    /// Iterations at which the rate is divided by `lr_drop_factor`.
    pub lr_drops: Vec<usize>,
    pub lr_drop_factor: f64,
    /// Linear ramp from `lr_initial / warmup_iters` over the first iterations.
    pub warmup_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
    pub head: HeadConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_total(20_000)
    }
}

impl TrainConfig {
    /// Desk schedule of `total` iterations with drops at 50% and 75%.
    pub fn with_total(total: usize) -> Self {
        Self {
            total_iters: total,
            batch_size: 64,
            episode_len: 16,
            lr_initial: 0.1,
            lr_drops: vec![total / 2, total * 3 / 4],
            lr_drop_factor: 10.0,
            warmup_iters: 0,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: None,
            head: HeadConfig::default(),
            seed: 1,
            log_every: 100,
        }
    }

    /// 200k iterations with drops at 100k and 150k.
    pub fn full_scale() -> Self {
        Self {
            lr_drops: vec![100_000, 150_000],
            ..Self::with_total(200_000)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.total_iters == 0 || self.batch_size == 0 || self.episode_len == 0 {
            return bad("total_iters, batch_size and episode_len must be positive".into());
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "lr_drops {:?} not strictly increasing",
                self.lr_drops
            ));
        }
        if self.lr_drops.last().is_some_and(|&d| d >= self.total_iters) {
            return bad(format!("lr drop beyond total_iters {}", self.total_iters));
        }
        if !(self.lr_initial > 0.0) || !(self.lr_drop_factor >= 1.0) {
            return bad("lr_initial must be positive and lr_drop_factor at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        self.head.validate()
    }
}

/// Rate at `iter`: divided once per drop point at or before `iter`.
pub fn lr_at(config: &TrainConfig, iter: usize) -> f64 {
    let drops = config.lr_drops.iter().filter(|&&d| iter >= d).count();
    let mut lr = config.lr_initial / config.lr_drop_factor.powi(drops as i32);
    if iter < config.warmup_iters {
        lr *= (iter + 1) as f64 / config.warmup_iters as f64;
    }
    lr
}

/// Classic momentum: `v <- μv + g`, `p <- p - lr·v`. Any non-finite gradient
/// aborts the step before anything is modified.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    velocity: &mut BTreeMap<String, Tensor<T>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!("{name}: grad {:?} vs {:?}", g.shape(), p.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: "sgd_momentum_step",
            });
        }
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let v = velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Every history of a corpus encoded once, in user id order.
#[derive(Clone, Debug)]
pub struct EncodedCorpus {
    pub user_ids: Vec<String>,
    pub histories: Vec<Vec<EncodedAction>>,
}

impl EncodedCorpus {
    pub fn new(corpus: &Corpus, tokenizer: &Tokenizer) -> Self {
        let (user_ids, histories) = corpus
            .users()
            .map(|h| (h.user_id.clone(), tokenizer.encode_actions(&h.actions)))
            .unzip();
        Self {
            user_ids,
            histories,
        }
    }

    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    /// Mean loss over the iterations since the previous record.
    pub loss: f64,
    /// Top-1 accuracy of the head over the same iterations.
    pub aux_acc: f64,
}

pub struct TrainOutcome<T> {
    pub encoder: Encoder<T>,
    pub head: Head<T>,
    pub velocity: BTreeMap<String, Tensor<T>>,
    pub log: Vec<LogRecord>,
    /// Per-iteration `(loss, batch accuracy)`.
    pub history: Vec<(f64, f64)>,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
}

/// Trains on every user of `data`; labels are user indices. `on_log` sees
/// each record as it is produced.
pub fn train<T: Scalar>(
    data: &EncodedCorpus,
    dims: InputDims,
    model: &ModelConfig,
    config: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let l = config.episode_len;
    if let Some(i) = data.histories.iter().position(|h| h.len() < l) {
        return Err(Error::HistoryTooShort {
            user: data.user_ids[i].clone(),
            len: data.histories[i].len(),
            needed: l,
        });
    }
    let mut encoder = Encoder::<T>::new(model.clone(), dims, config.seed)?;
    let mut head = Head::<T>::new(
        config.head.clone(),
        data.len(),
        model.d_out,
        config.seed.wrapping_add(1),
    )?;
    let mut velocity = BTreeMap::new();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xba7c_4e11);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd20f_0a7e);
    let lengths: Vec<usize> = data.histories.iter().map(Vec::len).collect();
    let mut log = Vec::new();
    let mut history = Vec::with_capacity(config.total_iters);
    let (mut win_loss, mut win_acc, mut win_n) = (0.0, 0.0, 0usize);

    for iter in 0..config.total_iters {
        let lr = lr_at(config, iter);
        let windows = sample_windows(&lengths, config.batch_size, l, &mut batch_rng)?;
        let labels: Vec<usize> = windows.iter().map(|&(u, _)| u).collect();
        let episodes: Vec<&[EncodedAction]> = windows
            .iter()
            .map(|&(u, s)| &data.histories[u][s..s + l])
            .collect();
        let diverged = |detail: String| Error::Diverged {
            iter,
            lr,
            detail: format!(
                "{detail}; batch users {:?}",
                labels
                    .iter()
                    .map(|&u| &data.user_ids[u])
                    .collect::<Vec<_>>()
            ),
        };

        let mut g = Graph::new(Mode::Train, dropout_rng.next_u64());
        let step = (|| {
            let out = encoder.forward(&mut g, &episodes)?;
            let ho = head.loss(&mut g, out.z, &labels)?;
            Ok::<_, Error>((out.bn_updates, ho))
        })();
        let (bn_updates, ho) = step.map_err(|e| diverged(e.to_string()))?;
        let loss = g.value(ho.loss).data()[0].to_f64_lossy();
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}")));
        }
        let scores = g.value(ho.scores);
        let y = scores.last_dim();
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &lab)| argmax(&scores.data()[i * y..(i + 1) * y]) == lab)
            .count();
        let acc = correct as f64 / labels.len() as f64;

        let mut grads = g.backward(ho.loss)?.param_grads(&g);
        if let Some(clip) = config.clip_norm {
            let norm = grads
                .values()
                .flat_map(|t| t.data().iter())
                .map(|x| x.to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = T::of(clip / norm);
                for t in grads.values_mut() {
                    t.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        let (enc_grads, head_grads): (BTreeMap<_, _>, BTreeMap<_, _>) = grads
            .into_iter()
            .partition(|(k, _)| encoder.params.contains(k));
        sgd_momentum_step(
            &mut encoder.params,
            &enc_grads,
            &mut velocity,
            lr,
            config.momentum,
            config.weight_decay,
        )
        .map_err(|e| diverged(e.to_string()))?;
        sgd_momentum_step(
            &mut head.params,
            &head_grads,
            &mut velocity,
            lr,
            config.momentum,
            config.weight_decay,
        )
        .map_err(|e| diverged(e.to_string()))?;
        encoder.apply_bn_updates(&bn_updates)?;

        history.push((loss, acc));
        win_loss += loss;
        win_acc += acc;
        win_n += 1;
        if (iter + 1) % config.log_every == 0 || iter + 1 == config.total_iters {
            let rec = LogRecord {
                iter: iter + 1,
                lr,
                loss: win_loss / win_n as f64,
                aux_acc: win_acc / win_n as f64,
            };
            info!(
                "iter {} lr {:.4} loss {:.4} acc {:.3}",
                rec.iter, rec.lr, rec.loss, rec.aux_acc
            );
            on_log(&rec);
            log.push(rec);
            (win_loss, win_acc, win_n) = (0.0, 0.0, 0);
        }
    }
    Ok(TrainOutcome {
        encoder,
        head,
        velocity,
        log,
        history,
    })
}
