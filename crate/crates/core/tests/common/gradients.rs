//! Gradient checks shared by the gradient tests and the acceptance suite.
//! Each primitive is compared against central differences at ten random
//! points; composites run the encoder with each head on a micro batch.

#![allow(dead_code)]

use persona::encoder::{Encoder, InputDims, ModelConfig};
use persona::objectives::{Head, HeadConfig, LossKind, HEAD_WEIGHT};
use persona::tensor::{
    grad_check, grad_check_params, Graph, Mode, ParamStore, RunningStats, Tensor, Var,
};
use persona::tokenizer::EncodedAction;
use persona::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

/// Name of the check and its worst relative error.
pub type Case = (&'static str, f64);

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// Contracts `out` with a fixed random tensor so every output coordinate
/// contributes to the scalar being checked.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = random(g.value(out).shape(), &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn check<F>(name: &'static str, shape: &[usize], build: F) -> Case
where
    F: Fn(&mut Graph<f64>, Var, &mut ChaCha8Rng) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = random(shape, &mut rng);
        let report = grad_check(
            |g, x| {
                let mut frng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let out = build(g, x, &mut frng)?;
                if g.value(out).len() == 1 {
                    Ok(out)
                } else {
                    project(g, out, seed)
                }
            },
            &point,
            H,
        )
        .unwrap();
        worst = worst.max(report.max_rel_err);
    }
    (name, worst)
}

pub fn matmul_both_sides() -> Vec<Case> {
    vec![
        check("matmul lhs", &[3, 4], |g, x, r| {
            let b = g.constant(random(&[4, 2], r));
            g.matmul(x, b)
        }),
        check("matmul rhs", &[4, 2], |g, x, r| {
            let a = g.constant(random(&[2, 3, 4], r));
            g.matmul(a, x)
        }),
        check("matmul rhs transposed", &[5, 4], |g, x, r| {
            let a = g.constant(random(&[3, 4], r));
            g.matmul_ex(a, x, true)
        }),
    ]
}

pub fn elementwise_with_broadcast() -> Vec<Case> {
    vec![
        check("add row", &[3], |g, x, r| {
            let a = g.constant(random(&[2, 3], r));
            g.add(a, x)
        }),
        check("sub", &[2, 3], |g, x, r| {
            let a = g.constant(random(&[2, 3], r));
            g.sub(a, x)
        }),
        check("mul row", &[3], |g, x, r| {
            let a = g.constant(random(&[4, 3], r));
            g.mul(a, x)
        }),
        check("mul lhs", &[4, 3], |g, x, r| {
            let b = g.constant(random(&[3], r));
            g.mul(x, b)
        }),
        check("scale", &[5], |g, x, _| g.scale(x, -2.5)),
    ]
}

pub fn concat_axes() -> Vec<Case> {
    vec![
        check("concat axis 1", &[2, 3], |g, x, r| {
            let a = g.constant(random(&[2, 2], r));
            g.concat(&[a, x, a], 1)
        }),
        check("concat axis 0", &[2, 3], |g, x, r| {
            let a = g.constant(random(&[1, 3], r));
            g.concat(&[x, a], 0)
        }),
    ]
}

pub fn embedding_gather() -> Vec<Case> {
    vec![check("gather", &[5, 3], |g, x, _| {
        g.embedding_gather(x, &[0, 4, 4, 2, 0, 1], &[2, 3])
    })]
}

pub fn conv1d_all_inputs() -> Vec<Case> {
    vec![
        check("conv1d x", &[2, 6, 3], |g, x, r| {
            let k = g.constant(random(&[3, 3, 4], r));
            let b = g.constant(random(&[4], r));
            g.conv1d(x, k, b)
        }),
        check("conv1d kernel", &[2, 3, 4], |g, x, r| {
            let input = g.constant(random(&[3, 5, 3], r));
            let b = g.constant(random(&[4], r));
            g.conv1d(input, x, b)
        }),
        check("conv1d bias", &[4], |g, x, r| {
            let input = g.constant(random(&[2, 5, 3], r));
            let k = g.constant(random(&[2, 3, 4], r));
            g.conv1d(input, k, x)
        }),
    ]
}

pub fn pointwise_and_pooling() -> Vec<Case> {
    vec![
        check("relu", &[3, 4], |g, x, _| g.relu(x)),
        check("max_over_time", &[2, 5, 3], |g, x, _| g.max_over_time(x)),
        check("mean_over_time", &[2, 5, 3], |g, x, _| g.mean_over_time(x)),
        check("reshape", &[2, 6], |g, x, _| g.reshape(x, &[3, 4])),
        check("mean", &[2, 6], |g, x, _| g.mean(x)),
    ]
}

pub fn softmax_each_axis() -> Vec<Case> {
    vec![
        check("softmax last", &[3, 4], |g, x, _| g.softmax(x, 1)),
        check("softmax first", &[3, 4], |g, x, _| g.softmax(x, 0)),
        check("softmax middle", &[2, 3, 2], |g, x, _| g.softmax(x, 1)),
    ]
}

pub fn normalization_layers() -> Vec<Case> {
    vec![
        check("layer_norm", &[3, 5], |g, x, _| g.layer_norm(x)),
        check("batch_norm x", &[6, 3], |g, x, r| {
            let gamma = g.constant(random(&[3], r));
            let beta = g.constant(random(&[3], r));
            Ok(g.batch_norm(x, gamma, beta, &RunningStats::new(3))?.out)
        }),
        check("batch_norm gamma", &[3], |g, x, r| {
            let input = g.constant(random(&[5, 3], r));
            let beta = g.constant(random(&[3], r));
            Ok(g.batch_norm(input, x, beta, &RunningStats::new(3))?.out)
        }),
        check("batch_norm beta", &[3], |g, x, r| {
            let input = g.constant(random(&[5, 3], r));
            let gamma = g.constant(random(&[3], r));
            Ok(g.batch_norm(input, gamma, x, &RunningStats::new(3))?.out)
        }),
        check("l2_normalize_rows", &[3, 4], |g, x, _| {
            g.l2_normalize_rows(x)
        }),
    ]
}

pub fn dropout_with_fixed_mask() -> Vec<Case> {
    vec![check("dropout", &[4, 5], |g, x, _| g.dropout(x, 0.3))]
}

pub fn attention_all_inputs() -> Vec<Case> {
    vec![
        check("attention q", &[2, 3, 4], |g, x, r| {
            let k = g.constant(random(&[2, 3, 4], r));
            let v = g.constant(random(&[2, 3, 4], r));
            g.scaled_dot_product_attention(x, k, v, 2)
        }),
        check("attention k", &[2, 3, 4], |g, x, r| {
            let q = g.constant(random(&[2, 3, 4], r));
            let v = g.constant(random(&[2, 3, 4], r));
            g.scaled_dot_product_attention(q, x, v, 2)
        }),
        check("attention v", &[2, 3, 4], |g, x, r| {
            let q = g.constant(random(&[2, 3, 4], r));
            let k = g.constant(random(&[2, 3, 4], r));
            g.scaled_dot_product_attention(q, k, x, 1)
        }),
        check("self attention", &[1, 4, 6], |g, x, _| {
            g.scaled_dot_product_attention(x, x, x, 3)
        }),
    ]
}

pub fn losses() -> Vec<Case> {
    vec![
        check("cross_entropy", &[3, 4], |g, x, _| {
            g.cross_entropy(x, &[0, 3, 1])
        }),
        check("angular_margin", &[3, 4], |g, x, _| {
            // keep cosines strictly inside (-0.99, 0.99)
            let c = g.scale(x, 0.6)?;
            g.angular_margin(c, &[2, 0, 3], 0.5)
        }),
        check("bce_with_logits", &[5], |g, x, _| {
            g.bce_with_logits(x, &[1.0, 0.0, 0.0, 1.0, 1.0])
        }),
    ]
}

pub fn all_primitives() -> Vec<Case> {
    [
        matmul_both_sides(),
        elementwise_with_broadcast(),
        concat_axes(),
        embedding_gather(),
        conv1d_all_inputs(),
        pointwise_and_pooling(),
        softmax_each_axis(),
        normalization_layers(),
        dropout_with_fixed_mask(),
        attention_all_inputs(),
        losses(),
    ]
    .concat()
}

/// Magnitude floor for the relative error. Central differences on a loss of
/// size |f| carry roundoff near |f|·2⁻⁵²/h, about 1e-9 here, so coordinates
/// whose true gradient is zero need an absolute scale.
const FLOOR: f64 = 1e-4;

fn micro_config() -> (ModelConfig, InputDims) {
    let config = ModelConfig {
        d_embed: 4,
        conv_widths: vec![2, 3],
        filters_per_conv: 3,
        attn_layers: 2,
        attn_heads: 2,
        d_hidden: 4,
        d_out: 5,
        dropout_rate: 0.1,
        use_time: true,
        use_context: true,
        use_positional: true,
    };
    (
        config,
        InputDims {
            symbols: 12,
            contexts: 3,
            max_tokens: 5,
        },
    )
}

fn episodes(rng: &mut ChaCha8Rng, b: usize, l: usize, dims: &InputDims) -> Vec<Vec<EncodedAction>> {
    (0..b)
        .map(|_| {
            (0..l)
                .map(|_| EncodedAction {
                    text_ids: (0..dims.max_tokens)
                        .map(|_| rng.gen_range(2..dims.symbols as u32))
                        .collect(),
                    hour_id: rng.gen_range(0..24),
                    context_id: rng.gen_range(0..dims.contexts as u32),
                })
                .collect()
        })
        .collect()
}

fn split(store: &ParamStore<f64>) -> ParamStore<f64> {
    let mut enc = ParamStore::new();
    for p in store.iter().filter(|p| p.name.starts_with("encoder.")) {
        enc.insert(p.name.clone(), p.value.clone(), p.trainable);
    }
    enc
}

fn max_cos(encoder: &Encoder<f64>, head: &Head<f64>, batch: &[&[EncodedAction]]) -> f64 {
    let mut g = Graph::new(Mode::Train, 0x5eed);
    let z = encoder.forward(&mut g, batch).unwrap().z;
    let (_, cos) = Head {
        config: HeadConfig {
            loss: LossKind::Am,
            ..head.config.clone()
        },
        params: head.params.clone(),
    }
    .logits(&mut g, z, &vec![0; batch.len()])
    .unwrap();
    g.value(cos)
        .data()
        .iter()
        .fold(0.0f64, |m, c| m.max(c.abs()))
}

pub fn composite(loss: LossKind, seed: u64) -> f64 {
    let (config, dims) = micro_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = episodes(&mut rng, 4, 3, &dims);
    let batch: Vec<&[EncodedAction]> = eps.iter().map(Vec::as_slice).collect();
    let labels = vec![0, 2, 1, 2];
    let encoder = Encoder::<f64>::new(config.clone(), dims, seed).unwrap();
    let head = Head::<f64>::new(
        HeadConfig {
            loss,
            margin: 0.5,
            scale: 64.0,
        },
        3,
        config.d_out,
        seed + 1,
    )
    .unwrap();
    assert!(
        max_cos(&encoder, &head, &batch) <= 0.99,
        "fixture too close to the clamp"
    );

    let mut store = encoder.params.clone();
    store.extend(head.params.clone());
    let report = grad_check_params(
        &store,
        &[],
        |g, s| {
            let enc = Encoder::from_params(config.clone(), dims, split(s))?;
            let head = Head::from_weight(head.config.clone(), s.get(HEAD_WEIGHT)?.clone())?;
            let out = enc.forward(g, &batch)?;
            Ok(head.loss(g, out.z, &labels)?.loss)
        },
        1e-5,
        1,
    )
    .unwrap();
    report
        .per_coord
        .iter()
        .map(|&(a, n, _)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}
