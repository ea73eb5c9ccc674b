use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, RunningStats, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Train mode enables dropout and batch statistics; eval mode makes both
/// deterministic functions of the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is 1-D and matches the last axis of lhs
    Row,
    /// rhs holds a single value
    Scalar,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Sub {
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Mul {
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Scale {
        a: Var,
        c: T,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Relu {
        a: Var,
    },
    MaxOverTime {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanOverTime {
        x: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    L2NormalizeRows {
        a: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    AngularMargin {
        cos: Var,
        dcos: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Result of a batch-norm op. In train mode the batch statistics are returned
/// so the owner of the running state can fold them in.
pub struct BatchNormOutput<T> {
    pub out: Var,
    pub batch_mean: Option<Vec<T>>,
    /// Unbiased batch variance, for the running estimate.
    pub batch_var: Option<Vec<T>>,
}

/// A tape of recorded tensor operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
    bound: HashMap<String, Var>,
    bound_order: Vec<(String, Var)>,
}

impl<T: Scalar> Graph<T> {
    /// New empty graph; `seed` drives dropout masks.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: HashMap::new(),
            bound_order: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter as a leaf. Binding the same name twice returns
    /// the same node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = store
            .param(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        let v = self.leaf(p.value.clone(), p.trainable);
        self.bound.insert(name.to_string(), v);
        self.bound_order.push((name.to_string(), v));
        Ok(v)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        value.check_finite(op_name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward ops ---------------------------------------------------

    /// `a [.., K] x b [K, N] -> [.., N]`, or `a x bᵀ` with `b [N, K]` when
    /// `trans_b` is set.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.ndim() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("rhs must be 2-D, got {:?}", bv.shape()),
            ));
        }
        let k = av.last_dim();
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != bk {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?} x {:?}{}",
                    av.shape(),
                    bv.shape(),
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let m = av.rows();
        let mut out = vec![T::zero(); m * n];
        let bm = MatRef::row_major(bv.data(), bv.shape()[0], bv.shape()[1]);
        gemm(
            MatRef::row_major(av.data(), m, k),
            if trans_b { bm.t() } else { bm },
            &mut out,
            0,
            n,
            false,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "matmul",
            Tensor::new(shape, out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    fn bcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            Ok(Bcast::Same)
        } else if bv.ndim() == 1 && bv.len() == av.last_dim() {
            Ok(Bcast::Row)
        } else if bv.len() == 1 {
            Ok(Bcast::Scalar)
        } else {
            Err(Error::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Bcast)> {
        let bcast = self.bcast_kind(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let bd = bv.data();
        let d = bd.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bcast {
                    Bcast::Same => bd[i],
                    Bcast::Row => bd[i % d],
                    Bcast::Scalar => bd[0],
                };
                f(x, y)
            })
            .collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, bcast))
    }

    /// Elementwise sum; `b` may also be a row vector or a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bcast) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", t, Op::Add { a, b, bcast }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bcast) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", t, Op::Sub { a, b, bcast }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bcast) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", t, Op::Mul { a, b, bcast }, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push("scale", t, Op::Scale { a, c }, rg)
    }

    /// `x W + b` for `W [K, N]`, `b [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{base:?} vs {s:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Row lookup: `table [V, d]` at `ids` -> `prefix ++ [d]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(Error::shape(
                "embedding_gather",
                format!("table {:?}", tv.shape()),
            ));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        if prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "embedding_gather",
                format!("{} ids for prefix {prefix:?}", ids.len()),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Invalid(format!(
                    "embedding_gather: id {id} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        self.push(
            "embedding_gather",
            Tensor::new(shape, data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Valid (unpadded, stride 1) convolution along time:
    /// `x [N, S, d]`, `kernel [w, d, F]`, `bias [F]` -> `[N, S-w+1, F]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        if xv.ndim() != 3
            || kv.ndim() != 3
            || kv.shape()[1] != xv.shape()[2]
            || bv.shape() != [kv.shape()[2]]
        {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "x {:?}, kernel {:?}, bias {:?}",
                    xv.shape(),
                    kv.shape(),
                    bv.shape()
                ),
            ));
        }
        let (n, s, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (w, f) = (kv.shape()[0], kv.shape()[2]);
        if s < w {
            return Err(Error::shape(
                "conv1d",
                format!("sequence length {s} shorter than width {w}"),
            ));
        }
        let p = s - w + 1;
        // One gemm over the whole batch treated as a single stream; windows
        // straddling two sequences are computed and dropped.
        let stream_rows = n * s - w + 1;
        let mut full = vec![T::zero(); stream_rows * f];
        let a = MatRef {
            data: xv.data(),
            offset: 0,
            rows: stream_rows,
            cols: w * d,
            row_stride: d,
            col_stride: 1,
        };
        gemm(
            a,
            MatRef::row_major(kv.data(), w * d, f),
            &mut full,
            0,
            f,
            false,
        );
        let mut out = Vec::with_capacity(n * p * f);
        let bias_data = bv.data();
        for i in 0..n {
            for t in 0..p {
                let r = i * s + t;
                out.extend(
                    full[r * f..(r + 1) * f]
                        .iter()
                        .zip(bias_data)
                        .map(|(&v, &b)| v + b),
                );
            }
        }
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        self.push(
            "conv1d",
            Tensor::new(vec![n, p, f], out)?,
            Op::Conv1d { x, kernel, bias },
            rg,
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push("relu", t, Op::Relu { a }, rg)
    }

    /// `[N, P, F] -> [N, F]`, componentwise max over the middle axis.
    pub fn max_over_time(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 3 || xv.shape()[1] == 0 {
            return Err(Error::shape("max_over_time", format!("{:?}", xv.shape())));
        }
        let (n, p, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let xd = xv.data();
        let mut out = vec![T::zero(); n * f];
        let mut argmax = vec![0usize; n * f];
        for i in 0..n {
            for c in 0..f {
                let mut best = xd[i * p * f + c];
                let mut arg = 0;
                for t in 1..p {
                    let v = xd[(i * p + t) * f + c];
                    if v > best {
                        best = v;
                        arg = t;
                    }
                }
                out[i * f + c] = best;
                argmax[i * f + c] = arg;
            }
        }
        let rg = self.rg(x);
        self.push(
            "max_over_time",
            Tensor::new(vec![n, f], out)?,
            Op::MaxOverTime { x, argmax },
            rg,
        )
    }

    /// `[N, P, F] -> [N, F]`, mean over the middle axis.
    pub fn mean_over_time(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 3 || xv.shape()[1] == 0 {
            return Err(Error::shape("mean_over_time", format!("{:?}", xv.shape())));
        }
        let (n, p, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let xd = xv.data();
        let inv = T::one() / T::of(p as f64);
        let mut out = vec![T::zero(); n * f];
        for i in 0..n {
            for t in 0..p {
                for c in 0..f {
                    out[i * f + c] += xd[(i * p + t) * f + c];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(x);
        self.push(
            "mean_over_time",
            Tensor::new(vec![n, f], out)?,
            Op::MeanOverTime { x },
            rg,
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.ndim() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} for {:?}", av.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(av.shape(), axis);
        let mut out = av.data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mx = (0..n).map(|i| out[idx(i)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for i in 0..n {
                    let e = (out[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..n {
                    out[idx(i)] /= z;
                }
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(
            "softmax",
            Tensor::new(shape, out)?,
            Op::Softmax { a, axis },
            rg,
        )
    }

    /// Normalizes each row over the last axis to zero mean and unit variance
    /// (no scale/shift; compose with `mul`/`add` for the affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let rows = xv.rows();
        let eps = T::of(LAYER_NORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, inv_std },
            rg,
        )
    }

    /// Batch normalization of `x [N, C]` over the batch axis with affine
    /// `gamma`, `beta`. Train mode normalizes with batch statistics; eval mode
    /// with `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
    ) -> Result<BatchNormOutput<T>> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("input {:?}", xv.shape()),
            ));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("affine {:?} for {c} channels", self.shape(v)),
                ));
            }
        }
        if running.mean.shape() != [c] || running.var.shape() != [c] {
            return Err(Error::shape("batch_norm", "running statistics width"));
        }
        if n == 0 {
            return Err(Error::shape("batch_norm", "empty batch"));
        }
        let eps = T::of(BATCH_NORM_EPS);
        let xd = xv.data();
        let train = self.mode == Mode::Train;
        let (mean, var) = if train {
            let inv_n = T::one() / T::of(n as f64);
            let mut mean = vec![T::zero(); c];
            for i in 0..n {
                for j in 0..c {
                    mean[j] += xd[i * c + j];
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_n);
            let mut var = vec![T::zero(); c];
            for i in 0..n {
                for j in 0..c {
                    let dv = xd[i * c + j] - mean[j];
                    var[j] += dv * dv;
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_n);
            (mean, var)
        } else {
            (running.mean.data().to_vec(), running.var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                let h = (xd[i * c + j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let (batch_mean, batch_var) = if train {
            let corr = if n > 1 {
                T::of(n as f64 / (n as f64 - 1.0))
            } else {
                T::one()
            };
            let unbiased = var.iter().map(|&v| v * corr).collect();
            (Some(mean), Some(unbiased))
        } else {
            (None, None)
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push(
            "batch_norm",
            Tensor::new(vec![n, c], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        )?;
        Ok(BatchNormOutput {
            out,
            batch_mean,
            batch_var,
        })
    }

    /// Inverted dropout in train mode; identity (same node) in eval mode.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let len = self.value(a).len();
        let mask: Vec<T> = (0..len)
            .map(|_| {
                if self.rng.gen::<f64>() >= rate {
                    keep
                } else {
                    T::zero()
                }
            })
            .collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push("dropout", t, Op::Dropout { a, mask }, rg)
    }

    /// Multi-head scaled dot-product attention over `[B, L, H]` inputs that
    /// are already projected; heads split the last axis evenly.
    pub fn scaled_dot_product_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3
            || self.shape(k) != shape.as_slice()
            || self.shape(v) != shape.as_slice()
        {
            return Err(Error::shape(
                "scaled_dot_product_attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    shape,
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        let (b, l, h) = (shape[0], shape[1], shape[2]);
        if heads == 0 || h % heads != 0 {
            return Err(Error::shape(
                "scaled_dot_product_attention",
                format!("width {h} not divisible by {heads} heads"),
            ));
        }
        let dh = h / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); b * heads * l * l];
        let mut out = vec![T::zero(); b * l * h];
        for bi in 0..b {
            for hi in 0..heads {
                let off = bi * l * h + hi * dh;
                let view = |d| MatRef {
                    data: d,
                    offset: off,
                    rows: l,
                    cols: dh,
                    row_stride: h,
                    col_stride: 1,
                };
                let p_off = (bi * heads + hi) * l * l;
                let p = &mut probs[p_off..p_off + l * l];
                gemm(view(qd), view(kd).t(), p, 0, l, false);
                for row in p.chunks_mut(l) {
                    let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x * scale));
                    let mut z = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x * scale - mx).exp();
                        z += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= z);
                }
                gemm(
                    MatRef::row_major(p, l, l),
                    view(vd),
                    &mut out,
                    off,
                    h,
                    false,
                );
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            "scaled_dot_product_attention",
            Tensor::new(shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push("reshape", t, Op::Reshape { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push("sum", t, Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let t = Tensor::scalar(av.sum() / T::of(av.len() as f64));
        let rg = self.rg(a);
        self.push("mean", t, Op::Mean { a }, rg)
    }

    /// Divides each row (last axis) by its Euclidean norm. A zero row is an
    /// error: its direction is undefined.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = av.last_dim();
        let mut out = av.data().to_vec();
        let mut norms = Vec::with_capacity(av.rows());
        for (r, row) in out.chunks_mut(d).enumerate() {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(Error::Invalid(format!(
                    "l2_normalize_rows: row {r} has zero norm"
                )));
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(a);
        self.push(
            "l2_normalize_rows",
            Tensor::new(shape, out)?,
            Op::L2NormalizeRows { a, norms },
            rg,
        )
    }

    /// Mean over rows of `-log softmax(logits)[label]` for `logits [B, Y]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} with {} labels", lv.shape(), labels.len()),
            ));
        }
        let y = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= y) {
            return Err(Error::Invalid(format!(
                "cross_entropy: label {bad} out of range for {y} classes"
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(y).zip(labels) {
            let top = (0..y).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            let mx = row[top];
            // ln Σ exp(x - mx) = ln(1 + rest); ln_1p keeps tiny losses exact
            let rest = (0..y)
                .filter(|&j| j != top)
                .map(|j| (row[j] - mx).exp())
                .sum::<T>();
            let lse = mx + rest.ln_1p();
            total += (mx - row[label]) + rest.ln_1p();
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let loss = total / T::of(labels.len() as f64);
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Angular-margin modification of a cosine matrix `[B, Y]`: every entry
    /// is clamped to `[-1, 1]`, and the entry at each row's label becomes
    /// `cosθ·cos m − sinθ·sin m` with `sinθ = sqrt(1 − cos²θ)`.
    pub fn angular_margin(&mut self, cos: Var, labels: &[usize], margin: T) -> Result<Var> {
        let cv = self.value(cos);
        if cv.ndim() != 2 || cv.shape()[0] != labels.len() {
            return Err(Error::shape(
                "angular_margin",
                format!("{:?} with {} labels", cv.shape(), labels.len()),
            ));
        }
        let y = cv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= y) {
            return Err(Error::Invalid(format!(
                "angular_margin: label {bad} out of range for {y} classes"
            )));
        }
        let (cm, sm) = (margin.cos(), margin.sin());
        let one = T::one();
        let mut out = cv.data().to_vec();
        let mut dcos = vec![T::zero(); out.len()];
        for (r, &label) in labels.iter().enumerate() {
            for j in 0..y {
                let i = r * y + j;
                let raw = out[i];
                let c = raw.max(-one).min(one);
                let inside = raw > -one && raw < one;
                if j == label {
                    let s = (one - c * c).sqrt();
                    out[i] = c * cm - s * sm;
                    dcos[i] = if inside { cm + c / s * sm } else { T::zero() };
                } else {
                    out[i] = c;
                    dcos[i] = if inside { one } else { T::zero() };
                }
            }
        }
        let shape = cv.shape().to_vec();
        let rg = self.rg(cos);
        self.push(
            "angular_margin",
            Tensor::new(shape, out)?,
            Op::AngularMargin { cos, dcos },
            rg,
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        let targets: Vec<T> = targets.iter().map(|&t| T::of(t)).collect();
        let mut total = T::zero();
        for (&x, &t) in lv.data().iter().zip(&targets) {
            total += x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
        }
        let loss = total / T::of(targets.len() as f64);
        let rg = self.rg(logits);
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets },
            rg,
        )
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Every node is visited at most once,
    /// in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Grads {
            grads,
            params: self.bound_order.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor {
            shape: self.shape(v).to_vec(),
            data,
        }
    }

    fn reduce_bcast(&self, b: Var, bcast: Bcast, g: &[T]) -> Tensor<T> {
        match bcast {
            Bcast::Same => self.like(b, g.to_vec()),
            Bcast::Row => {
                let d = self.value(b).len();
                let mut out = vec![T::zero(); d];
                for (i, &x) in g.iter().enumerate() {
                    out[i % d] += x;
                }
                self.like(b, out)
            }
            Bcast::Scalar => self.like(b, vec![g.iter().copied().sum()]),
        }
    }

    fn bcast_at(&self, b: Var, bcast: Bcast, i: usize) -> T {
        let bd = self.value(b).data();
        match bcast {
            Bcast::Same => bd[i],
            Bcast::Row => bd[i % bd.len()],
            Bcast::Scalar => bd[0],
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.last_dim();
                let m = av.rows();
                let n = g.last_dim();
                let bm = MatRef::row_major(bv.data(), bv.shape()[0], bv.shape()[1]);
                let gm = MatRef::row_major(gd, m, n);
                if self.rg(*a) {
                    // dA = G Bᵀ  (or G B when B was used transposed)
                    let mut da = vec![T::zero(); m * k];
                    gemm(gm, if *trans_b { bm } else { bm.t() }, &mut da, 0, k, false);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.rg(*b) {
                    let am = MatRef::row_major(av.data(), m, k);
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        gemm(gm.t(), am, &mut db, 0, k, false);
                    } else {
                        gemm(am.t(), gm, &mut db, 0, n, false);
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Add { a, b, bcast } => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let db = self.reduce_bcast(*b, *bcast, gd);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Sub { a, b, bcast } => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let neg: Vec<T> = gd.iter().map(|&x| -x).collect();
                    let db = self.reduce_bcast(*b, *bcast, &neg);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul { a, b, bcast } => {
                if self.rg(*a) {
                    let da = gd
                        .iter()
                        .enumerate()
                        .map(|(j, &x)| x * self.bcast_at(*b, *bcast, j))
                        .collect();
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data();
                    let prod: Vec<T> = gd.iter().zip(ad).map(|(&x, &y)| x * y).collect();
                    let db = self.reduce_bcast(*b, *bcast, &prod);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { a, c } => {
                self.accumulate(grads, *a, g.map(|x| x * *c));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = g.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut start = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + start..o * total + start + chunk]);
                        }
                        self.accumulate(grads, v, self.like(v, d));
                    }
                    start += chunk;
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = vec![T::zero(); tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += gd[r * d + c];
                    }
                }
                self.accumulate(grads, *table, self.like(*table, dt));
            }
            Op::Conv1d { x, kernel, bias } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let (n, s, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (w, f) = (kv.shape()[0], kv.shape()[2]);
                let p = s - w + 1;
                let stream_rows = n * s - w + 1;
                let mut full = vec![T::zero(); stream_rows * f];
                for bi in 0..n {
                    for t in 0..p {
                        let r = bi * s + t;
                        let src = (bi * p + t) * f;
                        full[r * f..(r + 1) * f].copy_from_slice(&gd[src..src + f]);
                    }
                }
                let gm = MatRef::row_major(&full, stream_rows, f);
                if self.rg(*kernel) {
                    let a = MatRef {
                        data: xv.data(),
                        offset: 0,
                        rows: stream_rows,
                        cols: w * d,
                        row_stride: d,
                        col_stride: 1,
                    };
                    let mut dk = vec![T::zero(); w * d * f];
                    gemm(a.t(), gm, &mut dk, 0, f, false);
                    self.accumulate(grads, *kernel, self.like(*kernel, dk));
                }
                if self.rg(*bias) {
                    let mut db = vec![T::zero(); f];
                    for row in gd.chunks(f) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, self.like(*bias, db));
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * s * d];
                    for j in 0..w {
                        // rows of kernel slice j form a [d, F] block; use it transposed
                        let kj = MatRef {
                            data: kv.data(),
                            offset: j * d * f,
                            rows: f,
                            cols: d,
                            row_stride: 1,
                            col_stride: f,
                        };
                        gemm(gm, kj, &mut dx, j * d, d, true);
                    }
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
            }
            Op::Relu { a } => {
                let av = self.value(*a).data();
                let da = gd
                    .iter()
                    .zip(av)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::MaxOverTime { x, argmax } => {
                let xs = self.shape(*x);
                let (n, p, f) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![T::zero(); n * p * f];
                for bi in 0..n {
                    for c in 0..f {
                        let t = argmax[bi * f + c];
                        dx[(bi * p + t) * f + c] = gd[bi * f + c];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::MeanOverTime { x } => {
                let xs = self.shape(*x);
                let (n, p, f) = (xs[0], xs[1], xs[2]);
                let inv = T::one() / T::of(p as f64);
                let mut dx = vec![T::zero(); n * p * f];
                for bi in 0..n {
                    for t in 0..p {
                        for c in 0..f {
                            dx[(bi * p + t) * f + c] = gd[bi * f + c] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Softmax { a, axis } => {
                let y = self.nodes[i].value.data();
                let (outer, n, inner) = split_axis(g.shape(), *axis);
                let mut da = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + j;
                        let dot: T = (0..n).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            da[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = self.nodes[i].value.data();
                let d = g.last_dim();
                let inv_d = T::one() / T::of(d as f64);
                let mut dx = vec![T::zero(); y.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let mg = gr.iter().copied().sum::<T>() * inv_d;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for c in 0..d {
                        dx[r * d + c] = is * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..n {
                    for j in 0..c {
                        dgamma[j] += gd[r * c + j] * xhat[r * c + j];
                        dbeta[j] += gd[r * c + j];
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * c];
                    if *train {
                        let nn = T::of(n as f64);
                        for j in 0..c {
                            // sums of dxhat and dxhat*xhat, with dxhat = g*gamma
                            let s1 = dbeta[j] * gam[j];
                            let s2 = dgamma[j] * gam[j];
                            for r in 0..n {
                                let dxh = gd[r * c + j] * gam[j];
                                dx[r * c + j] =
                                    inv_std[j] / nn * (nn * dxh - s1 - xhat[r * c + j] * s2);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..c {
                                dx[r * c + j] = gd[r * c + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                self.accumulate(grads, *gamma, self.like(*gamma, dgamma));
                self.accumulate(grads, *beta, self.like(*beta, dbeta));
            }
            Op::Dropout { a, mask } => {
                let da = gd.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let shape = g.shape();
                let (b, l, h) = (shape[0], shape[1], shape[2]);
                let dh = h / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![T::zero(); b * l * h];
                let mut dk = vec![T::zero(); b * l * h];
                let mut dv = vec![T::zero(); b * l * h];
                let mut dp = vec![T::zero(); l * l];
                for bi in 0..b {
                    for hi in 0..*heads {
                        let off = bi * l * h + hi * dh;
                        let view = |d| MatRef {
                            data: d,
                            offset: off,
                            rows: l,
                            cols: dh,
                            row_stride: h,
                            col_stride: 1,
                        };
                        let p_off = (bi * heads + hi) * l * l;
                        let p = &probs[p_off..p_off + l * l];
                        let pm = MatRef::row_major(p, l, l);
                        // dV = Pᵀ dO
                        gemm(pm.t(), view(gd), &mut dv, off, h, false);
                        // dP = dO Vᵀ, then through the row softmax and the scale
                        gemm(view(gd), view(vd).t(), &mut dp, 0, l, false);
                        for r in 0..l {
                            let pr = &p[r * l..(r + 1) * l];
                            let dr = &mut dp[r * l..(r + 1) * l];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                        let dsm = MatRef::row_major(&dp, l, l);
                        gemm(dsm, view(kd), &mut dq, off, h, false);
                        gemm(dsm.t(), view(qd), &mut dk, off, h, false);
                    }
                }
                self.accumulate(grads, *q, self.like(*q, dq));
                self.accumulate(grads, *k, self.like(*k, dk));
                self.accumulate(grads, *v, self.like(*v, dv));
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, self.like(*a, gd.to_vec()));
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0]; n]));
            }
            Op::Mean { a } => {
                let n = self.value(*a).len();
                let v = gd[0] / T::of(n as f64);
                self.accumulate(grads, *a, self.like(*a, vec![v; n]));
            }
            Op::L2NormalizeRows { a, norms } => {
                let y = self.nodes[i].value.data();
                let d = g.last_dim();
                let mut da = vec![T::zero(); y.len()];
                for (r, &nr) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..d {
                        da[r * d + c] = (gr[c] - yr[c] * dot) / nr;
                    }
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let y = self.shape(*logits)[1];
                let scale = gd[0] / T::of(labels.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    dl[r * y + label] -= scale;
                }
                self.accumulate(grads, *logits, self.like(*logits, dl));
            }
            Op::AngularMargin { cos, dcos } => {
                let dc = gd.iter().zip(dcos).map(|(&g, &d)| g * d).collect();
                self.accumulate(grads, *cos, self.like(*cos, dc));
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits).data();
                let scale = gd[0] / T::of(targets.len() as f64);
                let dl = lv
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| (T::one() / (T::one() + (-x).exp()) - t) * scale)
                    .collect();
                self.accumulate(grads, *logits, self.like(*logits, dl));
            }
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, or zeros of `shape` if nothing flowed.
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Gradients of every parameter bound with [`Graph::param`] that is
    /// trainable, keyed by parameter name. Parameters that received no
    /// gradient map to zeros.
    pub fn param_grads(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter(|(_, v)| graph.rg(*v))
            .map(|(name, v)| (name.clone(), self.wrt(*v, graph.shape(*v))))
            .collect()
    }
}
