//! Training heads (softmax and additive angular margin) and the similarity
//! functions used to compare embeddings once the head is dropped.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::glorot;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Mode, ParamStore, Tensor, Var};

pub const HEAD_WEIGHT: &str = "head.weight";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Sm,
    Am,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl LossKind {
    /// The comparison an embedding trained with this loss is meant for.
    pub fn metric(self) -> Metric {
        match self {
            LossKind::Sm => Metric::Euclidean,
            LossKind::Am => Metric::Cosine,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Sm => "sm",
            LossKind::Am => "am",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sm" => Ok(LossKind::Sm),
            "am" => Ok(LossKind::Am),
            _ => Err(Error::Invalid(format!(
                "unknown loss {s:?}, expected sm or am"
            ))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            _ => Err(Error::Invalid(format!(
                "unknown metric {s:?}, expected cosine or euclidean"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub loss: LossKind,
    /// Additive angle in radians (AM only).
    pub margin: f64,
    /// Logit scale (AM only).
    pub scale: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Am,
            margin: 0.5,
            scale: 64.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loss == LossKind::Am && !(self.margin >= 0.0 && self.scale > 0.0) {
            return Err(Error::Invalid(format!(
                "AM head needs margin >= 0 and scale > 0, got {} and {}",
                self.margin, self.scale
            )));
        }
        Ok(())
    }
}

/// Per-class weight matrix `W [Y, D]` plus the loss it feeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub config: HeadConfig,
    pub params: ParamStore<T>,
}

pub struct HeadOutput {
    pub loss: Var,
    /// Margin-free class scores `[B, Y]`, for auxiliary accuracy.
    pub scores: Var,
}

impl<T: Scalar> Head<T> {
    pub fn new(config: HeadConfig, classes: usize, dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::Invalid(format!(
                "a head needs at least 2 classes, got {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert(
            HEAD_WEIGHT,
            glorot(&[classes, dim], dim, classes, &mut rng),
            true,
        );
        Ok(Self { config, params })
    }

    pub fn from_weight(config: HeadConfig, weight: Tensor<T>) -> Result<Self> {
        config.validate()?;
        if weight.ndim() != 2 || weight.shape()[0] < 2 {
            return Err(Error::Invalid(format!(
                "head weight shape {:?}",
                weight.shape()
            )));
        }
        let mut params = ParamStore::new();
        params.insert(HEAD_WEIGHT, weight, true);
        Ok(Self { config, params })
    }

    pub fn classes(&self) -> usize {
        self.weight().shape()[0]
    }

    pub fn weight(&self) -> &Tensor<T> {
        self.params.get(HEAD_WEIGHT).expect("head weight present")
    }

    /// Logits fed to the cross-entropy: `zWᵀ` for SM, `s·w′` for AM.
    pub fn logits(&self, g: &mut Graph<T>, z: Var, labels: &[usize]) -> Result<(Var, Var)> {
        let w = g.param(&self.params, HEAD_WEIGHT)?;
        match self.config.loss {
            LossKind::Sm => {
                let l = g.matmul_ex(z, w, true)?;
                Ok((l, l))
            }
            LossKind::Am => {
                let zn = g.l2_normalize_rows(z)?;
                let wn = g.l2_normalize_rows(w)?;
                let cos = g.matmul_ex(zn, wn, true)?;
                let m = g.angular_margin(cos, labels, T::of(self.config.margin))?;
                let l = g.scale(m, T::of(self.config.scale))?;
                Ok((l, cos))
            }
        }
    }

    pub fn loss(&self, g: &mut Graph<T>, z: Var, labels: &[usize]) -> Result<HeadOutput> {
        let (logits, scores) = self.logits(g, z, labels)?;
        let loss = g.cross_entropy(logits, labels)?;
        Ok(HeadOutput { loss, scores })
    }

    /// Loss value on fixed embeddings, without recording gradients.
    pub fn loss_value(&self, z: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let mut g = Graph::new(Mode::Eval, 0);
        let zv = g.constant(z.clone());
        let out = self.loss(&mut g, zv, labels)?;
        Ok(g.value(out.loss).data()[0])
    }

    /// Logits on fixed embeddings, without recording gradients.
    pub fn logits_value(&self, z: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new(Mode::Eval, 0);
        let zv = g.constant(z.clone());
        let (l, _) = self.logits(&mut g, zv, labels)?;
        Ok(g.value(l).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Head<U> {
        Head {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// `cos(θ + m)` from `cos θ`, using `sin θ = sqrt(1 − cos²θ)` after clamping
/// to `[-1, 1]`.
pub fn margin_cosine(cos_theta: f64, margin: f64) -> f64 {
    let c = cos_theta.clamp(-1.0, 1.0);
    c * margin.cos() - (1.0 - c * c).sqrt() * margin.sin()
}

/// Higher is more similar under both metrics: cosine similarity, or the
/// negated Euclidean distance.
pub fn similarity<T: Scalar>(a: &[T], b: &[T], metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "similarity",
            format!("{} vs {} dims", a.len(), b.len()),
        ));
    }
    let a = a.iter().map(|x| x.to_f64_lossy());
    let b = b.iter().map(|x| x.to_f64_lossy());
    match metric {
        Metric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Invalid("cosine similarity of a zero vector".into()));
            }
            Ok(dot / (na.sqrt() * nb.sqrt()))
        }
        Metric::Euclidean => Ok(-a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
    }
}

/// Row-major `[queries, targets]` similarities between two `[N, D]` matrices.
pub fn similarity_matrix<T: Scalar>(
    queries: &Tensor<T>,
    targets: &Tensor<T>,
    metric: Metric,
) -> Result<Vec<f64>> {
    if queries.ndim() != 2 || targets.ndim() != 2 || queries.shape()[1] != targets.shape()[1] {
        return Err(Error::shape(
            "similarity_matrix",
            format!("{:?} vs {:?}", queries.shape(), targets.shape()),
        ));
    }
    let mut out = Vec::with_capacity(queries.rows() * targets.rows());
    for i in 0..queries.rows() {
        for j in 0..targets.rows() {
            out.push(similarity(queries.row(i), targets.row(j), metric)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_weights_give_log_y() {
        let head = Head::<f64>::from_weight(
            HeadConfig {
                loss: LossKind::Sm,
                ..HeadConfig::default()
            },
            Tensor::zeros(&[5, 3]),
        )
        .unwrap();
        let z = Tensor::matrix(&[&[1.0, -2.0, 0.5], &[0.3, 0.3, 0.3]]).unwrap();
        let l = head.loss_value(&z, &[0, 4]).unwrap();
        assert!(close(l, 5f64.ln(), 1e-12));
    }

    #[test]
    fn sm_two_class_saturated() {
        let w = Tensor::matrix(&[&[10.0], &[-10.0]]).unwrap();
        let head = Head::<f64>::from_weight(
            HeadConfig {
                loss: LossKind::Sm,
                ..HeadConfig::default()
            },
            w,
        )
        .unwrap();
        let l = head
            .loss_value(&Tensor::matrix(&[&[1.0]]).unwrap(), &[0])
            .unwrap();
        // -ln sigmoid(20) = ln(1 + e^-20)
        assert!(close(l, (-20f64).exp().ln_1p(), 1e-18));
        assert!(close(l, 2.06e-9, 1e-11));
    }

    #[test]
    fn footnote_identity_values() {
        assert!(close(margin_cosine(1.0, 0.5), 0.877583, 1e-6));
        assert!(close(margin_cosine(0.6, 0.5), 0.143009, 1e-6));
        assert!(close(margin_cosine(1.0, 0.5), 0.5f64.cos(), 1e-15));
        assert_eq!(margin_cosine(0.3, 0.0), 0.3);
    }

    #[test]
    fn am_aligned_two_class() {
        let w = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let head = Head::<f64>::from_weight(HeadConfig::default(), w).unwrap();
        let z = Tensor::matrix(&[&[3.0, 0.0]]).unwrap();
        let logits = head.logits_value(&z, &[0]).unwrap();
        assert!(close(logits.data()[0], 64.0 * 0.877583, 64.0 * 1e-6));
        assert_eq!(logits.data()[1], 0.0);
        let l = head.loss_value(&z, &[0]).unwrap();
        let expect = (-(64.0 * 0.5f64.cos())).exp().ln_1p();
        assert!(close(l, expect, 1e-30) && l < 1e-24);
    }

    #[test]
    fn zero_embedding_is_an_error_for_am() {
        let head = Head::<f64>::new(HeadConfig::default(), 3, 2, 0).unwrap();
        assert!(head.loss_value(&Tensor::zeros(&[1, 2]), &[0]).is_err());
        assert!(head
            .loss_value(&Tensor::matrix(&[&[1.0, 0.0]]).unwrap(), &[3])
            .is_err());
    }

    #[test]
    fn similarity_examples() {
        assert!(close(
            similarity(&[1.0, 0.0], &[0.0, 1.0], Metric::Cosine).unwrap(),
            0.0,
            0.0
        ));
        assert!(close(
            similarity(&[1.0, 0.0], &[0.0, 1.0], Metric::Euclidean).unwrap(),
            -2f64.sqrt(),
            1e-15
        ));
        assert!(close(
            similarity(&[0.3, -2.0], &[0.3, -2.0], Metric::Cosine).unwrap(),
            1.0,
            1e-15
        ));
        assert!(similarity(&[0.0, 0.0], &[1.0, 0.0], Metric::Cosine).is_err());
        assert!(similarity(&[0.0], &[1.0, 0.0], Metric::Euclidean).is_err());
    }

    #[test]
    fn metric_follows_loss() {
        assert_eq!(LossKind::Am.metric(), Metric::Cosine);
        assert_eq!(LossKind::Sm.metric(), Metric::Euclidean);
        assert_eq!("AM".parse::<LossKind>().unwrap(), LossKind::Am);
        assert!("triplet".parse::<LossKind>().is_err());
    }
}
