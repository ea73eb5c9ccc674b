//! Action encoder (time, text convolutions, context) and the self-attention
//! episode encoder that maps an episode to a single vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Mode, ParamStore, RunningStats, Tensor, Var};
use crate::tokenizer::{EncodedAction, Tokenizer, NUM_HOURS};

/// Weight on the old running statistics in each batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_embed: usize,
    pub conv_widths: Vec<usize>,
    pub filters_per_conv: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub dropout_rate: f64,
    pub use_time: bool,
    pub use_context: bool,
    pub use_positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_embed: 256,
            conv_widths: vec![2, 3, 4, 5],
            filters_per_conv: 256,
            attn_layers: 2,
            attn_heads: 4,
            d_hidden: 512,
            d_out: 512,
            dropout_rate: 0.1,
            use_time: true,
            use_context: true,
            use_positional: false,
        }
    }
}

impl ModelConfig {
    /// A small model that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            d_embed: 64,
            conv_widths: vec![2, 3, 4],
            filters_per_conv: 32,
            attn_layers: 1,
            attn_heads: 4,
            d_hidden: 64,
            d_out: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self, dims: &InputDims) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.d_embed == 0 || self.filters_per_conv == 0 || self.d_hidden == 0 || self.d_out == 0
        {
            return bad("model widths must be positive".into());
        }
        if self.conv_widths.is_empty() {
            return bad("at least one convolution width is required".into());
        }
        if let Some(&w) = self
            .conv_widths
            .iter()
            .find(|&&w| w == 0 || w > dims.max_tokens)
        {
            return bad(format!(
                "convolution width {w} outside [1, {}]",
                dims.max_tokens
            ));
        }
        if self.attn_layers == 0 {
            return bad("at least one attention layer is required".into());
        }
        if self.attn_heads == 0 || self.d_hidden % self.attn_heads != 0 {
            return bad(format!(
                "d_hidden {} not divisible by {} heads",
                self.d_hidden, self.attn_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if dims.symbols < 2 || dims.contexts == 0 {
            return bad(format!("vocabulary sizes {dims:?} too small"));
        }
        Ok(())
    }

    /// Width of one action vector.
    pub fn action_width(&self) -> usize {
        let mut w = self.filters_per_conv * self.conv_widths.len();
        if self.use_time {
            w += self.d_embed;
        }
        if self.use_context {
            w += self.d_embed;
        }
        w
    }
}

/// Input vocabulary sizes fixed by the tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub symbols: usize,
    pub contexts: usize,
    pub max_tokens: usize,
}

impl InputDims {
    pub fn of(tok: &Tokenizer) -> Self {
        Self {
            symbols: tok.subwords.len(),
            contexts: tok.contexts.len(),
            max_tokens: tok.max_tokens,
        }
    }
}

/// Batch statistics a train-mode forward pass produced for one batch-norm
/// layer, to be folded into its running state after the step.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub layer: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct EncoderOutput<T> {
    /// `[B, D]` episode embeddings.
    pub z: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect(),
    )
    .expect("shape matches")
}

const BN_LAYERS: [&str; 2] = ["encoder.bn_in", "encoder.bn_out"];

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Fresh parameters, deterministic in `seed`.
    pub fn new(config: ModelConfig, dims: InputDims, seed: u64) -> Result<Self> {
        config.validate(&dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let (e, h) = (c.d_embed, c.d_hidden);
        p.insert(
            "encoder.embed.symbol",
            glorot(&[dims.symbols, e], dims.symbols, e, &mut rng),
            true,
        );
        if c.use_time {
            p.insert(
                "encoder.embed.hour",
                glorot(&[NUM_HOURS, e], NUM_HOURS, e, &mut rng),
                true,
            );
        }
        if c.use_context {
            p.insert(
                "encoder.embed.context",
                glorot(&[dims.contexts, e], dims.contexts, e, &mut rng),
                true,
            );
        }
        for &w in &c.conv_widths {
            let f = c.filters_per_conv;
            p.insert(
                format!("encoder.conv.w{w}.kernel"),
                glorot(&[w, e, f], w * e, f, &mut rng),
                true,
            );
            p.insert(format!("encoder.conv.w{w}.bias"), Tensor::zeros(&[f]), true);
        }
        let mut linear = |p: &mut ParamStore<T>, name: &str, i: usize, o: usize| {
            p.insert(
                format!("{name}.weight"),
                glorot(&[i, o], i, o, &mut rng),
                true,
            );
            p.insert(format!("{name}.bias"), Tensor::zeros(&[o]), true);
        };
        linear(&mut p, "encoder.proj", c.action_width(), h);
        for l in 0..c.attn_layers {
            for part in ["q", "k", "v", "o", "ff1", "ff2"] {
                linear(&mut p, &format!("encoder.attn{l}.{part}"), h, h);
            }
        }
        let pooled = h * c.attn_layers;
        linear(&mut p, "encoder.mlp.fc1", pooled, h);
        linear(&mut p, "encoder.mlp.fc2", h, c.d_out);
        for (layer, width) in BN_LAYERS.iter().zip([pooled, c.d_out]) {
            p.insert(
                format!("{layer}.gamma"),
                Tensor::full(&[width], T::one()),
                true,
            );
            p.insert(format!("{layer}.beta"), Tensor::zeros(&[width]), true);
            p.insert(
                format!("{layer}.running_mean"),
                Tensor::zeros(&[width]),
                false,
            );
            p.insert(
                format!("{layer}.running_var"),
                Tensor::full(&[width], T::one()),
                false,
            );
        }
        Ok(Self {
            config,
            dims,
            params: p,
        })
    }

    pub fn from_params(
        config: ModelConfig,
        dims: InputDims,
        params: ParamStore<T>,
    ) -> Result<Self> {
        let reference = Encoder::<T>::new(config.clone(), dims, 0)?;
        for r in reference.params.iter() {
            let got = params
                .param(&r.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", r.name)))?;
            if got.value.shape() != r.value.shape() || got.trainable != r.trainable {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    r.name,
                    got.value.shape(),
                    r.value.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint(
                "unexpected extra encoder parameters".into(),
            ));
        }
        Ok(Self {
            config,
            dims,
            params,
        })
    }

    pub fn running_stats(&self, layer: &str) -> Result<RunningStats<T>> {
        Ok(RunningStats {
            mean: self.params.get(&format!("{layer}.running_mean"))?.clone(),
            var: self.params.get(&format!("{layer}.running_var"))?.clone(),
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) -> Result<()> {
        for u in updates {
            let mut rs = self.running_stats(&u.layer)?;
            rs.update(&u.mean, &u.var, T::of(BN_MOMENTUM));
            *self.params.get_mut(&format!("{}.running_mean", u.layer))? = rs.mean;
            *self.params.get_mut(&format!("{}.running_var", u.layer))? = rs.var;
        }
        Ok(())
    }

    fn check_ids(&self, a: &EncodedAction) -> Result<()> {
        if a.text_ids.len() != self.dims.max_tokens {
            return Err(Error::shape(
                "encode_action",
                format!(
                    "{} text ids, expected {}",
                    a.text_ids.len(),
                    self.dims.max_tokens
                ),
            ));
        }
        if let Some(&id) = a
            .text_ids
            .iter()
            .find(|&&id| id as usize >= self.dims.symbols)
        {
            return Err(Error::Invalid(format!(
                "symbol id {id} out of range for {}",
                self.dims.symbols
            )));
        }
        if a.hour_id as usize >= NUM_HOURS {
            return Err(Error::Invalid(format!(
                "hour id {} out of range",
                a.hour_id
            )));
        }
        if a.context_id as usize >= self.dims.contexts {
            return Err(Error::Invalid(format!(
                "context id {} out of range for {}",
                a.context_id, self.dims.contexts
            )));
        }
        Ok(())
    }

    /// Encodes `N` actions into `[N, action_width]`.
    pub fn encode_actions(&self, g: &mut Graph<T>, actions: &[&EncodedAction]) -> Result<Var> {
        if actions.is_empty() {
            return Err(Error::Invalid("no actions to encode".into()));
        }
        for a in actions {
            self.check_ids(a)?;
        }
        let c = &self.config;
        let n = actions.len();
        let t = self.dims.max_tokens;
        let ids: Vec<usize> = actions
            .iter()
            .flat_map(|a| a.text_ids.iter().map(|&i| i as usize))
            .collect();
        let table = g.param(&self.params, "encoder.embed.symbol")?;
        let symbols = g.embedding_gather(table, &ids, &[n, t])?;
        let mut text = Vec::with_capacity(c.conv_widths.len());
        for &w in &c.conv_widths {
            let k = g.param(&self.params, &format!("encoder.conv.w{w}.kernel"))?;
            let b = g.param(&self.params, &format!("encoder.conv.w{w}.bias"))?;
            let conv = g.conv1d(symbols, k, b)?;
            let act = g.relu(conv)?;
            text.push(g.max_over_time(act)?);
        }
        let text = g.concat(&text, 1)?;
        let text = g.dropout(text, c.dropout_rate)?;
        let mut parts = Vec::with_capacity(3);
        if c.use_time {
            let table = g.param(&self.params, "encoder.embed.hour")?;
            let hours: Vec<usize> = actions.iter().map(|a| a.hour_id as usize).collect();
            parts.push(g.embedding_gather(table, &hours, &[n])?);
        }
        parts.push(text);
        if c.use_context {
            let table = g.param(&self.params, "encoder.embed.context")?;
            let ctx: Vec<usize> = actions.iter().map(|a| a.context_id as usize).collect();
            parts.push(g.embedding_gather(table, &ctx, &[n])?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts, 1)
        }
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
        let w = g.param(&self.params, &format!("{name}.weight"))?;
        let b = g.param(&self.params, &format!("{name}.bias"))?;
        g.linear(x, w, b)
    }

    fn batch_norm(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layer: &str,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let gamma = g.param(&self.params, &format!("{layer}.gamma"))?;
        let beta = g.param(&self.params, &format!("{layer}.beta"))?;
        let out = g.batch_norm(x, gamma, beta, &self.running_stats(layer)?)?;
        if let (Some(mean), Some(var)) = (out.batch_mean, out.batch_var) {
            updates.push(BnUpdate {
                layer: layer.to_string(),
                mean,
                var,
            });
        }
        Ok(out.out)
    }

    fn attention_block(&self, g: &mut Graph<T>, x: Var, layer: usize) -> Result<Var> {
        let name = |part: &str| format!("encoder.attn{layer}.{part}");
        let normed = g.layer_norm(x)?;
        let q = self.linear(g, normed, &name("q"))?;
        let k = self.linear(g, normed, &name("k"))?;
        let v = self.linear(g, normed, &name("v"))?;
        let att = g.scaled_dot_product_attention(q, k, v, self.config.attn_heads)?;
        let att = self.linear(g, att, &name("o"))?;
        let x = g.add(x, att)?;
        let normed = g.layer_norm(x)?;
        let ff = self.linear(g, normed, &name("ff1"))?;
        let ff = g.relu(ff)?;
        let ff = self.linear(g, ff, &name("ff2"))?;
        g.add(x, ff)
    }

    /// Embeds `B` episodes of a common length `L` into `[B, D]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        episodes: &[&[EncodedAction]],
    ) -> Result<EncoderOutput<T>> {
        let b = episodes.len();
        let l = episodes.first().map_or(0, |e| e.len());
        if b == 0 || l == 0 {
            return Err(Error::Invalid("empty batch or empty episode".into()));
        }
        if episodes.iter().any(|e| e.len() != l) {
            return Err(Error::shape(
                "encode_episode",
                "episodes in a batch must share a length",
            ));
        }
        let c = &self.config;
        let h = c.d_hidden;
        let actions: Vec<&EncodedAction> = episodes.iter().flat_map(|e| e.iter()).collect();
        let acts = self.encode_actions(g, &actions)?;
        let x = self.linear(g, acts, "encoder.proj")?;
        let mut x = g.reshape(x, &[b, l, h])?;
        if c.use_positional {
            let pe = g.constant(positional_encoding(b, l, h));
            x = g.add(x, pe)?;
        }
        let mut pooled = Vec::with_capacity(c.attn_layers);
        for layer in 0..c.attn_layers {
            x = self.attention_block(g, x, layer)?;
            pooled.push(g.mean_over_time(x)?);
        }
        let pooled = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat(&pooled, 1)?
        };
        let mut updates = Vec::new();
        let y = self.batch_norm(g, pooled, BN_LAYERS[0], &mut updates)?;
        let y = self.linear(g, y, "encoder.mlp.fc1")?;
        let y = g.relu(y)?;
        let y = self.linear(g, y, "encoder.mlp.fc2")?;
        let z = self.batch_norm(g, y, BN_LAYERS[1], &mut updates)?;
        Ok(EncoderOutput {
            z,
            bn_updates: updates,
        })
    }

    /// Eval-mode embeddings of episodes of one length, as a `[B, D]` tensor.
    pub fn embed(&self, episodes: &[&[EncodedAction]]) -> Result<Tensor<T>> {
        let mut g = Graph::new(Mode::Eval, 0);
        let out = self.forward(&mut g, episodes)?;
        Ok(g.value(out.z).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            dims: self.dims,
            params: self.params.cast(),
        }
    }
}

/// Sinusoidal position code broadcast over a batch: `[B, L, H]`.
pub fn positional_encoding<T: Scalar>(b: usize, l: usize, h: usize) -> Tensor<T> {
    let mut one = vec![T::zero(); l * h];
    for pos in 0..l {
        for i in 0..h {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / h as f64);
            let angle = pos as f64 / rate;
            one[pos * h + i] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    let data = one.iter().copied().cycle().take(b * l * h).collect();
    Tensor::new(vec![b, l, h], data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> InputDims {
        InputDims {
            symbols: 40,
            contexts: 5,
            max_tokens: 6,
        }
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_embed: 4,
            conv_widths: vec![2, 3],
            filters_per_conv: 3,
            attn_layers: 2,
            attn_heads: 2,
            d_hidden: 4,
            d_out: 3,
            dropout_rate: 0.0,
            ..ModelConfig::default()
        }
    }

    fn action(seed: u32) -> EncodedAction {
        EncodedAction {
            text_ids: (0..6).map(|i| (seed * 7 + i * 3) % 40).collect(),
            hour_id: seed % 24,
            context_id: seed % 5,
        }
    }

    #[test]
    fn action_width_at_defaults() {
        let c = ModelConfig::default();
        assert_eq!(c.action_width(), 256 + 1024 + 256);
        let no_time = ModelConfig {
            use_time: false,
            ..c
        };
        assert_eq!(no_time.action_width(), 1024 + 256);
    }

    #[test]
    fn default_output_width() {
        let d = InputDims {
            symbols: 300,
            contexts: 10,
            max_tokens: 8,
        };
        let enc = Encoder::<f32>::new(
            ModelConfig {
                d_embed: 16,
                filters_per_conv: 8,
                ..ModelConfig::default()
            },
            d,
            1,
        )
        .unwrap();
        let eps: Vec<Vec<EncodedAction>> = (0..2)
            .map(|u| {
                (0..16)
                    .map(|i| EncodedAction {
                        text_ids: vec![(u * 16 + i) as u32 + 2; 8],
                        hour_id: i as u32,
                        context_id: u as u32,
                    })
                    .collect()
            })
            .collect();
        let refs: Vec<&[EncodedAction]> = eps.iter().map(Vec::as_slice).collect();
        let z = enc.embed(&refs).unwrap();
        assert_eq!(z.shape(), &[2, 512]);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = Encoder::<f64>::new(tiny(), dims(), 3).unwrap();
        let b = Encoder::<f64>::new(tiny(), dims(), 3).unwrap();
        let c = Encoder::<f64>::new(tiny(), dims(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in a
            .params
            .iter()
            .filter(|p| p.name.ends_with(".bias") || p.name.ends_with(".beta"))
        {
            assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.attn_heads = 3;
        assert!(Encoder::<f64>::new(c, dims(), 0).is_err());
        let mut c = tiny();
        c.conv_widths = vec![7];
        assert!(Encoder::<f64>::new(c, dims(), 0).is_err());
    }

    #[test]
    fn out_of_range_ids_are_errors() {
        let enc = Encoder::<f64>::new(tiny(), dims(), 0).unwrap();
        let mut a = action(1);
        a.text_ids[0] = 40;
        assert!(enc.embed(&[&[a]]).is_err());
        let mut a = action(1);
        a.context_id = 5;
        assert!(enc.embed(&[&[a]]).is_err());
        assert!(enc.embed(&[&[]]).is_err());
    }

    #[test]
    fn identical_actions_identical_vectors() {
        let enc = Encoder::<f64>::new(tiny(), dims(), 0).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let (a, b) = (action(5), action(5));
        let v = enc.encode_actions(&mut g, &[&a, &b]).unwrap();
        let out = g.value(v);
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.shape(), &[2, 4 + 6 + 4]);
    }

    #[test]
    fn train_forward_reports_batch_stats() {
        let enc = Encoder::<f64>::new(tiny(), dims(), 0).unwrap();
        let eps: Vec<Vec<EncodedAction>> = (0..3)
            .map(|u| (0..4).map(|i| action(u * 4 + i)).collect())
            .collect();
        let refs: Vec<&[EncodedAction]> = eps.iter().map(Vec::as_slice).collect();
        let mut g = Graph::new(Mode::Train, 0);
        let out = enc.forward(&mut g, &refs).unwrap();
        assert_eq!(out.bn_updates.len(), 2);
        let mut enc2 = enc.clone();
        enc2.apply_bn_updates(&out.bn_updates).unwrap();
        assert_ne!(
            enc2.params.get("encoder.bn_out.running_mean").unwrap(),
            enc.params.get("encoder.bn_out.running_mean").unwrap()
        );
    }
}
