//! Transformer encoder-decoder generator.
//!
//! Pre-norm blocks with sinusoidal positions. The encoder reads the story
//! context; the decoder is causal, cross-attends to the encoder output and
//! ends in a linear LM head. Adapters (see [`crate::adapters`]) hook into the
//! decoder at fixed sites and are no-ops until their up-projections move away
//! from zero.
//!
//! The decoder can also run against [`Source::Null`]: every cross-attention
//! sublayer then contributes exactly zero, the residual stream passes through
//! untouched, and the decoder is a plain language model with unchanged
//! parameter shapes.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterConfig, AdapterVariant, Site};
use crate::autograd::{AttnSpec, Var};
use crate::checkpoint::{self, FORMAT_MODEL};
use crate::params::{Binder, ParamStore, ParameterGroup};
use crate::tensor::{sinusoidal_positions, Tensor};
use crate::textpipe::{Batch, PAD};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
    /// Keep parameters in full `f64` (no `f32` rounding) and disable dropout.
    /// Used by gradient checks.
    #[serde(default)]
    pub high_precision: bool,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            model_dim: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            ffn_dim: 256,
            max_positions: 128,
            dropout: 0.0,
            seed,
            high_precision: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Scalar count implied by the layer shapes, without allocating.
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.model_dim, self.ffn_dim);
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let ln = 2 * d;
        let enc = v * d + self.n_enc_layers * (2 * ln + attn + ffn) + ln;
        let dec = v * d + self.n_dec_layers * (3 * ln + 2 * attn + ffn) + ln;
        let head = d * v + v;
        enc + dec + head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub adapter: Option<AdapterConfig>,
    pub store: ParamStore,
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

fn add_ln(store: &mut ParamStore, prefix: &str, d: usize, group: ParameterGroup) {
    store.insert(format!("{prefix}.g"), group, Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.b"), group, Tensor::zeros(&[d]));
}

fn add_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    group: ParameterGroup,
) {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), group, gaussian(rng, &[fan_in, fan_out], std));
    store.insert(format!("{prefix}.b"), group, Tensor::zeros(&[fan_out]));
}

fn add_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, group: ParameterGroup) {
    for p in ["q", "k", "v", "o"] {
        add_linear(store, rng, &format!("{prefix}.{p}"), d, d, group);
    }
}

pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (v, d, f) = (config.vocab_size, config.model_dim, config.ffn_dim);
    let mut s = ParamStore::new();
    let enc = ParameterGroup::Encoder;
    s.insert("enc.tok", enc, gaussian(&mut rng, &[v, d], 1.0));
    for l in 0..config.n_enc_layers {
        add_ln(&mut s, &format!("enc.{l}.ln1"), d, enc);
        add_attention(&mut s, &mut rng, &format!("enc.{l}.attn"), d, enc);
        add_ln(&mut s, &format!("enc.{l}.ln2"), d, enc);
        add_linear(&mut s, &mut rng, &format!("enc.{l}.ffn1"), d, f, enc);
        add_linear(&mut s, &mut rng, &format!("enc.{l}.ffn2"), f, d, enc);
    }
    add_ln(&mut s, "enc.ln_f", d, enc);

    let dec = ParameterGroup::DecoderBase;
    s.insert("dec.tok", dec, gaussian(&mut rng, &[v, d], 1.0));
    for l in 0..config.n_dec_layers {
        add_ln(&mut s, &format!("dec.{l}.ln1"), d, dec);
        add_attention(&mut s, &mut rng, &format!("dec.{l}.self"), d, dec);
        add_ln(&mut s, &format!("dec.{l}.ln2"), d, dec);
        add_attention(&mut s, &mut rng, &format!("dec.{l}.cross"), d, dec);
        add_ln(&mut s, &format!("dec.{l}.ln3"), d, dec);
        add_linear(&mut s, &mut rng, &format!("dec.{l}.ffn1"), d, f, dec);
        add_linear(&mut s, &mut rng, &format!("dec.{l}.ffn2"), f, d, dec);
    }
    add_ln(&mut s, "dec.ln_f", d, dec);
    add_linear(&mut s, &mut rng, "lm", d, v, ParameterGroup::LmHead);

    if !config.high_precision {
        s.round_to_f32();
    }
    Ok(ModelParams {
        config: config.clone(),
        adapter: None,
        store: s,
    })
}

/// Encoder output for a batch: `[batch * len, d]` plus the source mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEmbeddings {
    pub values: Tensor,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl ContextEmbeddings {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.len, self.values.cols())
    }
}

/// What the decoder's cross-attention reads.
#[derive(Clone, Copy, Debug)]
pub enum Source<'a> {
    Null,
    Tokens(&'a Batch),
    Embedded(&'a ContextEmbeddings),
}

/// Next-token distributions, one row per prefix position: `[batch*len, vocab]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDistribution {
    pub probs: Tensor,
    pub batch: usize,
    pub len: usize,
}

impl StepDistribution {
    pub fn at(&self, b: usize, t: usize) -> &[f64] {
        self.probs.row(b * self.len + t)
    }
}

/// Seeded inverted dropout; `None` disables it.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: (rate > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub(crate) fn apply(&mut self, b: &mut Binder, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else { return x };
        let keep = 1.0 - self.rate;
        let n = b.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        b.tape.dropout(x, mask)
    }
}

fn check_ids(config: &ModelConfig, batch: &Batch) -> Result<()> {
    if let Some(id) = batch.ids.iter().find(|&&i| i >= config.vocab_size) {
        return Err(Error::Data(format!(
            "token id {id} out of range for vocabulary of {}",
            config.vocab_size
        )));
    }
    if batch.max_len > config.max_positions {
        return Err(Error::Data(format!(
            "sequence length {} exceeds max_positions {}",
            batch.max_len, config.max_positions
        )));
    }
    Ok(())
}

pub(crate) fn linear(b: &mut Binder, x: Var, prefix: &str) -> Var {
    let w = b.p(&format!("{prefix}.w"));
    let bias = b.p(&format!("{prefix}.b"));
    let y = b.tape.matmul(x, w);
    b.tape.add_bias(y, bias)
}

pub(crate) fn layer_norm(b: &mut Binder, x: Var, prefix: &str) -> Var {
    let g = b.p(&format!("{prefix}.g"));
    let bias = b.p(&format!("{prefix}.b"));
    b.tape.layer_norm(x, g, bias)
}

fn multi_head(b: &mut Binder, prefix: &str, xq: Var, xkv: Var, spec: AttnSpec) -> Var {
    let q = linear(b, xq, &format!("{prefix}.q"));
    let k = linear(b, xkv, &format!("{prefix}.k"));
    let v = linear(b, xkv, &format!("{prefix}.v"));
    let a = b.tape.attention(q, k, v, spec);
    linear(b, a, &format!("{prefix}.o"))
}

fn feed_forward(b: &mut Binder, x: Var, prefix: &str, drop: &mut Dropout) -> Var {
    let h = linear(b, x, &format!("{prefix}.ffn1"));
    let h = b.tape.gelu(h);
    let h = drop.apply(b, h);
    linear(b, h, &format!("{prefix}.ffn2"))
}

fn embed(b: &mut Binder, table: &str, batch: &Batch) -> Var {
    let t = b.p(table);
    b.tape.embedding(t, &batch.ids)
}

fn add_positions(b: &mut Binder, x: Var, batch: &Batch, d: usize) -> Var {
    let table = sinusoidal_positions(batch.max_len, d);
    let mut data = Vec::with_capacity(batch.batch * batch.max_len * d);
    for _ in 0..batch.batch {
        data.extend_from_slice(table.data());
    }
    let pos = b.tape.constant(Tensor::from_vec(&[batch.batch * batch.max_len, d], data));
    b.tape.add(x, pos)
}

/// Encoder stack on the tape; output `[batch*len, d]`.
pub(crate) fn encoder_var(b: &mut Binder, m: &ModelParams, src: &Batch, drop: &mut Dropout) -> Var {
    let cfg = &m.config;
    let d = cfg.model_dim;
    let x = embed(b, "enc.tok", src);
    let x = add_positions(b, x, src, d);
    let mut h = drop.apply(b, x);
    let spec = AttnSpec {
        batch: src.batch,
        q_len: src.max_len,
        k_len: src.max_len,
        heads: cfg.n_heads,
        causal: false,
        key_mask: src.mask.clone(),
    };
    let enc_adapters = m.adapter.as_ref().filter(|a| a.inject_encoder);
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc.{l}");
        let x = layer_norm(b, h, &format!("{p}.ln1"));
        let a = multi_head(b, &format!("{p}.attn"), x, x, spec.clone());
        let a = drop.apply(b, a);
        h = b.tape.add(h, a);
        if let Some(ac) = enc_adapters {
            h = adapters::apply_site(b, ac, &Site::enc(l, "attn"), h);
        }
        let x = layer_norm(b, h, &format!("{p}.ln2"));
        let f = feed_forward(b, x, &p, drop);
        let f = drop.apply(b, f);
        h = b.tape.add(h, f);
        if let Some(ac) = enc_adapters {
            h = adapters::apply_parallel(b, ac, &Site::enc(l, "par"), x, h);
            h = adapters::apply_site(b, ac, &Site::enc(l, "ffn"), h);
        }
    }
    layer_norm(b, h, "enc.ln_f")
}

/// Decoder stack through the LM head; output logits `[batch*len, vocab]`.
pub(crate) fn decoder_var(
    b: &mut Binder,
    m: &ModelParams,
    ctx: Option<(Var, &[bool], usize)>,
    prefix: &Batch,
    drop: &mut Dropout,
) -> Var {
    let cfg = &m.config;
    let d = cfg.model_dim;
    let ad = m.adapter.as_ref();
    let mut x = embed(b, "dec.tok", prefix);
    if let Some(ac) = ad {
        x = adapters::invertible_forward(b, ac, x);
    }
    let x = add_positions(b, x, prefix, d);
    let mut h = drop.apply(b, x);
    let self_spec = AttnSpec {
        batch: prefix.batch,
        q_len: prefix.max_len,
        k_len: prefix.max_len,
        heads: cfg.n_heads,
        causal: true,
        key_mask: prefix.mask.clone(),
    };
    for l in 0..cfg.n_dec_layers {
        let p = format!("dec.{l}");
        let x = layer_norm(b, h, &format!("{p}.ln1"));
        let a = multi_head(b, &format!("{p}.self"), x, x, self_spec.clone());
        let a = drop.apply(b, a);
        h = b.tape.add(h, a);
        if let Some(ac) = ad {
            h = adapters::apply_site(b, ac, &Site::dec(l, "attn"), h);
        }
        if let Some((ctx_var, src_mask, src_len)) = ctx {
            let x = layer_norm(b, h, &format!("{p}.ln2"));
            let spec = AttnSpec {
                batch: prefix.batch,
                q_len: prefix.max_len,
                k_len: src_len,
                heads: cfg.n_heads,
                causal: false,
                key_mask: src_mask.to_vec(),
            };
            let c = multi_head(b, &format!("{p}.cross"), x, ctx_var, spec);
            let c = drop.apply(b, c);
            h = b.tape.add(h, c);
        }
        let x = layer_norm(b, h, &format!("{p}.ln3"));
        let f = feed_forward(b, x, &p, drop);
        let f = drop.apply(b, f);
        h = b.tape.add(h, f);
        if let Some(ac) = ad {
            h = adapters::apply_parallel(b, ac, &Site::dec(l, "par"), x, h);
            h = adapters::apply_site(b, ac, &Site::dec(l, "ffn"), h);
        }
    }
    let mut h = layer_norm(b, h, "dec.ln_f");
    if let Some(ac) = ad {
        h = adapters::invertible_inverse(b, ac, h);
    }
    linear(b, h, "lm")
}

/// Builds the full graph for `src` → logits over `prefix`.
pub(crate) fn logits_var(
    b: &mut Binder,
    m: &ModelParams,
    src: Source,
    prefix: &Batch,
    drop: &mut Dropout,
) -> Result<Var> {
    check_ids(&m.config, prefix)?;
    let logits = match src {
        Source::Null => decoder_var(b, m, None, prefix, drop),
        Source::Tokens(batch) => {
            check_ids(&m.config, batch)?;
            check_batch_match(batch.batch, prefix.batch)?;
            let enc = encoder_var(b, m, batch, drop);
            decoder_var(b, m, Some((enc, &batch.mask, batch.max_len)), prefix, drop)
        }
        Source::Embedded(ctx) => {
            check_batch_match(ctx.batch, prefix.batch)?;
            if ctx.values.cols() != m.config.model_dim {
                return Err(Error::Shape(format!(
                    "context width {} does not match model_dim {}",
                    ctx.values.cols(),
                    m.config.model_dim
                )));
            }
            let c = b.tape.constant(ctx.values.clone());
            decoder_var(b, m, Some((c, &ctx.mask, ctx.len)), prefix, drop)
        }
    };
    Ok(logits)
}

fn check_batch_match(src: usize, tgt: usize) -> Result<()> {
    if src != tgt {
        return Err(Error::Shape(format!("source batch {src} vs target batch {tgt}")));
    }
    Ok(())
}

pub fn encode_context(params: &ModelParams, batch: &Batch) -> Result<ContextEmbeddings> {
    check_ids(&params.config, batch)?;
    let frozen = crate::params::frozen;
    let mut b = Binder::new(&params.store, &frozen);
    let out = encoder_var(&mut b, params, batch, &mut Dropout::off());
    Ok(ContextEmbeddings {
        values: b.tape.value(out).clone().reshape(&[batch.batch * batch.max_len, params.config.model_dim]),
        mask: batch.mask.clone(),
        batch: batch.batch,
        len: batch.max_len,
    })
}

/// Raw logits for every prefix position, no dropout.
pub fn decoder_logits(params: &ModelParams, src: Source, prefix: &Batch) -> Result<Tensor> {
    let frozen = crate::params::frozen;
    let mut b = Binder::new(&params.store, &frozen);
    let logits = logits_var(&mut b, params, src, prefix, &mut Dropout::off())?;
    Ok(b.tape.value(logits).clone())
}

pub fn decoder_forward(params: &ModelParams, src: Source, prefix: &Batch) -> Result<StepDistribution> {
    let mut probs = decoder_logits(params, src, prefix)?;
    let v = probs.cols();
    for row in probs.data_mut().chunks_mut(v) {
        crate::autograd::softmax_in_place(row);
    }
    Ok(StepDistribution {
        probs,
        batch: prefix.batch,
        len: prefix.max_len,
    })
}

/// Decoder inputs and per-position labels from a padded `BOS … EOS` batch.
pub fn shift_targets(target: &Batch) -> Result<(Batch, Vec<Option<usize>>)> {
    if target.max_len < 2 {
        return Err(Error::Data("target batch needs at least two positions".into()));
    }
    let t = target.max_len - 1;
    let mut ids = Vec::with_capacity(target.batch * t);
    let mut mask = Vec::with_capacity(target.batch * t);
    let mut labels = Vec::with_capacity(target.batch * t);
    for r in 0..target.batch {
        let row = target.row(r);
        let m = target.mask_row(r);
        ids.extend_from_slice(&row[..t]);
        mask.extend_from_slice(&m[..t]);
        for i in 0..t {
            labels.push((m[i + 1] && row[i + 1] != PAD).then_some(row[i + 1]));
        }
    }
    if labels.iter().all(Option::is_none) {
        return Err(Error::Data("target batch has no non-PAD positions".into()));
    }
    let lengths = target.lengths.iter().map(|l| l.saturating_sub(1).max(1).min(t)).collect();
    Ok((
        Batch {
            ids,
            mask,
            lengths,
            batch: target.batch,
            max_len: t,
        },
        labels,
    ))
}

/// Mean negative log-likelihood of the gold next token over non-PAD
/// target positions, with teacher forcing.
pub fn teacher_forcing_loss(params: &ModelParams, src: Source, target: &Batch) -> Result<f64> {
    let (inputs, labels) = shift_targets(target)?;
    let frozen = crate::params::frozen;
    let mut b = Binder::new(&params.store, &frozen);
    let logits = logits_var(&mut b, params, src, &inputs, &mut Dropout::off())?;
    let loss = b.tape.cross_entropy(logits, &labels);
    Ok(b.tape.value(loss).item())
}

/// Decoder-only language-model loss: the same objective against the null
/// context.
pub fn lm_loss(params: &ModelParams, text: &Batch) -> Result<f64> {
    teacher_forcing_loss(params, Source::Null, text)
}

/// Loss and gradients for every parameter whose group is in `trainable`.
pub fn loss_and_grads(
    params: &ModelParams,
    src: Source,
    target: &Batch,
    trainable: &BTreeSet<ParameterGroup>,
    drop: &mut Dropout,
) -> Result<(f64, Vec<(usize, Tensor)>)> {
    let (inputs, labels) = shift_targets(target)?;
    let is_trainable = |g: ParameterGroup| trainable.contains(&g);
    let mut b = Binder::new(&params.store, &is_trainable);
    let logits = logits_var(&mut b, params, src, &inputs, drop)?;
    let loss = b.tape.cross_entropy(logits, &labels);
    let value = b.tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let grads = b.tape.backward(loss);
    Ok((value, b.tape.param_grads(&grads)))
}

impl ModelParams {
    pub fn variant(&self) -> Option<AdapterVariant> {
        self.adapter.as_ref().map(|a| a.variant)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    adapter: Option<AdapterConfig>,
}

/// Writes every tensor, adapters included, as an `STLR1` checkpoint.
pub fn save_model(params: &ModelParams, dir: &Path) -> Result<()> {
    let meta = ModelMeta {
        config: params.config.clone(),
        adapter: params.adapter.clone(),
    };
    checkpoint::write_checkpoint(dir, FORMAT_MODEL, serde_json::to_value(meta)?, params.store.entries())
}

pub fn load_model(dir: &Path) -> Result<ModelParams> {
    let (manifest, tensors) = checkpoint::read_checkpoint(dir, FORMAT_MODEL)?;
    let meta: ModelMeta = serde_json::from_value(manifest.meta)?;
    let base = init_model(&meta.config)?;
    let mut model = match &meta.adapter {
        Some(a) => adapters::inject_adapters(&base, a)?,
        None => base,
    };
    if tensors.len() != model.store.len() {
        return Err(Error::Shape(format!(
            "{}: {} tensors on disk, config implies {}",
            dir.display(),
            tensors.len(),
            model.store.len()
        )));
    }
    for t in tensors {
        let i = model
            .store
            .index_of(&t.name)
            .ok_or_else(|| Error::Shape(format!("unexpected tensor {}", t.name)))?;
        let slot = model.store.entry_mut(i);
        if slot.tensor.shape() != t.tensor.shape() || slot.group != t.group {
            return Err(Error::Shape(format!("tensor {} does not match the config", t.name)));
        }
        slot.tensor = t.tensor;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::param_stats;
    use crate::textpipe::{pad_batch, BOS, EOS};

    pub(crate) fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            model_dim: 8,
            n_enc_layers: 1,
            n_dec_layers: 2,
            n_heads: 2,
            ffn_dim: 12,
            max_positions: 16,
            dropout: 0.0,
            seed,
            high_precision: true,
        }
    }

    #[test]
    fn init_is_deterministic_and_partitioned() {
        let a = init_model(&tiny(3)).unwrap();
        let b = init_model(&tiny(3)).unwrap();
        assert_eq!(a, b);
        let groups = a.store.groups();
        assert!(!groups.contains(&ParameterGroup::Adapter));
        assert_eq!(groups.len(), 3);
        assert_eq!(a.store.scalar_count(), a.config.param_count());
        let stats = param_stats(&a.store);
        assert_eq!(stats[3].1.scalars, 0);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = tiny(1);
        c.n_heads = 3;
        assert!(init_model(&c).is_err());
        c.n_heads = 0;
        assert!(init_model(&c).is_err());
    }

    #[test]
    fn default_precision_rounds_through_f32() {
        let mut c = tiny(1);
        c.high_precision = false;
        let m = init_model(&c).unwrap();
        for e in m.store.entries() {
            assert!(e.tensor.data().iter().all(|v| (*v as f32 as f64) == *v));
        }
    }

    #[test]
    fn out_of_range_ids_are_errors() {
        let m = init_model(&tiny(1)).unwrap();
        let bad = pad_batch(&[vec![BOS, 40, EOS]], 3);
        assert!(matches!(lm_loss(&m, &bad), Err(Error::Data(_))));
        assert!(encode_context(&m, &bad).is_err());
    }

    #[test]
    fn all_pad_target_is_an_error() {
        let m = init_model(&tiny(1)).unwrap();
        let t = Batch {
            ids: vec![PAD; 3],
            mask: vec![false; 3],
            lengths: vec![0],
            batch: 1,
            max_len: 3,
        };
        assert!(lm_loss(&m, &t).is_err());
    }

    #[test]
    fn checkpoint_round_trip_keeps_loss() {
        let mut c = tiny(4);
        c.high_precision = false;
        let m = init_model(&c).unwrap();
        let m = adapters::inject_adapters(&m, &AdapterConfig::new(AdapterVariant::Pfeiffer, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&m, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, m);
        let t = pad_batch(&[vec![BOS, 5, 6, EOS]], 4);
        assert_eq!(lm_loss(&m, &t).unwrap(), lm_loss(&back, &t).unwrap());
    }
}
