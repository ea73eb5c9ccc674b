use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::glorot;
use crate::error::{Error, Result};
use crate::objectives::{similarity, Metric};
use crate::tensor::{Graph, Mode, ParamStore, Tensor};
use crate::trainer::sgd_momentum_step;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyMethod {
    CosineThreshold,
    Mlp,
}

impl fmt::Display for VerifyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerifyMethod::CosineThreshold => "cosine",
            VerifyMethod::Mlp => "mlp",
        })
    }
}

impl FromStr for VerifyMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" | "cosine_threshold" => Ok(VerifyMethod::CosineThreshold),
            "mlp" => Ok(VerifyMethod::Mlp),
            _ => Err(Error::Invalid(format!("unknown verification method {s:?}"))),
        }
    }
}

/// Embedded episode pairs: row `i` of `a` and `b`, labelled same author or not.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub a: Tensor<f64>,
    pub b: Tensor<f64>,
    pub same: Vec<bool>,
}

impl PairSet {
    fn validate(&self, split: &str) -> Result<()> {
        if self.same.is_empty() {
            return Err(Error::Invalid(format!("{split} split is empty")));
        }
        if self.a.shape() != self.b.shape()
            || self.a.ndim() != 2
            || self.a.shape()[0] != self.same.len()
        {
            return Err(Error::shape(
                "verify_pairs",
                format!("{split}: {:?} vs {:?}", self.a.shape(), self.b.shape()),
            ));
        }
        Ok(())
    }

    fn cosines(&self) -> Result<Vec<f64>> {
        (0..self.same.len())
            .map(|i| similarity(self.a.row(i), self.b.row(i), Metric::Cosine))
            .collect()
    }

    /// `[|a − b|, a ⊙ b, cos(a, b)]` per pair.
    pub fn features(&self) -> Result<Tensor<f64>> {
        let d = self.a.shape()[1];
        let cos = self.cosines()?;
        let mut data = Vec::with_capacity(self.same.len() * (2 * d + 1));
        for (i, c) in cos.iter().enumerate() {
            let (x, y) = (self.a.row(i), self.b.row(i));
            data.extend(x.iter().zip(y).map(|(p, q)| (p - q).abs()));
            data.extend(x.iter().zip(y).map(|(p, q)| p * q));
            data.push(*c);
        }
        Tensor::new(vec![self.same.len(), 2 * d + 1], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 100,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub method: VerifyMethod,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub threshold: Option<f64>,
    /// Epoch whose parameters were kept (MLP only).
    pub best_epoch: Option<usize>,
    pub sizes: [usize; 3],
}

fn accuracy(pred: &[bool], truth: &[bool]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

fn threshold_predict(cos: &[f64], thr: f64) -> Vec<bool> {
    cos.iter().map(|&c| c >= thr).collect()
}

/// Candidate cuts between consecutive distinct values, plus one below all.
fn best_threshold(cos: &[f64], same: &[bool]) -> f64 {
    let mut vals = cos.to_vec();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    let mut cands = vec![vals[0] - 1.0];
    cands.extend(vals.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    cands.push(vals[vals.len() - 1] + 1.0);
    let mut best = (f64::NEG_INFINITY, cands[0]);
    for t in cands {
        let acc = accuracy(&threshold_predict(cos, t), same);
        if acc > best.0 {
            best = (acc, t);
        }
    }
    best.1
}

struct Mlp {
    params: ParamStore<f64>,
}

impl Mlp {
    fn new(inputs: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert(
            "verify.fc1.weight",
            glorot(&[inputs, hidden], inputs, hidden, &mut rng),
            true,
        );
        params.insert("verify.fc1.bias", Tensor::zeros(&[hidden]), true);
        params.insert(
            "verify.fc2.weight",
            glorot(&[hidden, 1], hidden, 1, &mut rng),
            true,
        );
        params.insert("verify.fc2.bias", Tensor::zeros(&[1]), true);
        Self { params }
    }

    fn logits(&self, g: &mut Graph<f64>, x: Tensor<f64>) -> Result<crate::tensor::Var> {
        let p = |g: &mut Graph<f64>, n: &str| g.param(&self.params, n);
        let x = g.constant(x);
        let (w1, b1) = (p(g, "verify.fc1.weight")?, p(g, "verify.fc1.bias")?);
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h)?;
        let (w2, b2) = (p(g, "verify.fc2.weight")?, p(g, "verify.fc2.bias")?);
        g.linear(h, w2, b2)
    }

    fn predict(&self, x: &Tensor<f64>) -> Result<Vec<bool>> {
        let mut g = Graph::new(Mode::Eval, 0);
        let l = self.logits(&mut g, x.clone())?;
        Ok(g.value(l).data().iter().map(|&v| v > 0.0).collect())
    }
}

fn rows(x: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let d = x.shape()[1];
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), d], data).expect("shape matches")
}

/// Fits the chosen same-author classifier on `train`, selects on `val`, and
/// reports accuracy on all three splits.
pub fn verify_pairs(
    train: &PairSet,
    val: &PairSet,
    test: &PairSet,
    method: VerifyMethod,
    config: &VerifyConfig,
) -> Result<VerifyReport> {
    train.validate("train")?;
    val.validate("validation")?;
    test.validate("test")?;
    let sizes = [train.same.len(), val.same.len(), test.same.len()];
    match method {
        VerifyMethod::CosineThreshold => {
            let (ct, cv, cs) = (train.cosines()?, val.cosines()?, test.cosines()?);
            let thr = best_threshold(&cv, &val.same);
            Ok(VerifyReport {
                method,
                train_accuracy: accuracy(&threshold_predict(&ct, thr), &train.same),
                val_accuracy: accuracy(&threshold_predict(&cv, thr), &val.same),
                test_accuracy: accuracy(&threshold_predict(&cs, thr), &test.same),
                threshold: Some(thr),
                best_epoch: None,
                sizes,
            })
        }
        VerifyMethod::Mlp => {
            if config.hidden == 0 || config.batch_size == 0 || config.epochs == 0 {
                return Err(Error::Invalid(
                    "verification MLP needs positive hidden, batch_size, epochs".into(),
                ));
            }
            let (xt, xv, xs) = (train.features()?, val.features()?, test.features()?);
            let mut mlp = Mlp::new(xt.shape()[1], config.hidden, config.seed);
            let mut velocity = BTreeMap::new();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
            let mut order: Vec<usize> = (0..train.same.len()).collect();
            let mut best = (
                accuracy(&mlp.predict(&xv)?, &val.same),
                mlp.params.clone(),
                0,
            );
            for epoch in 1..=config.epochs {
                order.shuffle(&mut rng);
                for batch in order.chunks(config.batch_size) {
                    let targets: Vec<f64> = batch
                        .iter()
                        .map(|&i| if train.same[i] { 1.0 } else { 0.0 })
                        .collect();
                    let mut g = Graph::new(Mode::Train, 0);
                    let l = mlp.logits(&mut g, rows(&xt, batch))?;
                    let loss = g.bce_with_logits(l, &targets)?;
                    let grads = g.backward(loss)?.param_grads(&g);
                    sgd_momentum_step(
                        &mut mlp.params,
                        &grads,
                        &mut velocity,
                        config.lr,
                        config.momentum,
                        0.0,
                    )?;
                }
                let acc = accuracy(&mlp.predict(&xv)?, &val.same);
                if acc > best.0 {
                    best = (acc, mlp.params.clone(), epoch);
                }
            }
            mlp.params = best.1;
            Ok(VerifyReport {
                method,
                train_accuracy: accuracy(&mlp.predict(&xt)?, &train.same),
                val_accuracy: best.0,
                test_accuracy: accuracy(&mlp.predict(&xs)?, &test.same),
                threshold: None,
                best_epoch: Some(best.2),
                sizes,
            })
        }
    }
}
