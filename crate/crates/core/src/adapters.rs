//! Bottleneck adapters for the decoder and the machinery to freeze
//! everything else.
//!
//! Six variants are supported. All of them start as the exact identity:
//! up-projections (and the coupling nets' output layers) are zero at
//! injection.
//!
//! | variant      | placement                                                    |
//! |--------------|--------------------------------------------------------------|
//! | `plain`      | after the FFN residual, `h + U·relu(D·h + b1) + b2`           |
//! | `pfeiffer`   | as plain, with a layer norm on the adapter input              |
//! | `houlsby`    | after the self-attention residual and after the FFN residual  |
//! | `parallel`   | beside the FFN, reading the same normalized input             |
//! | `invertible` | pfeiffer sites plus an additive coupling on token embeddings, |
//! |              | inverted again just before the LM head                        |
//! | `compacter`  | as plain, with `D` and `U` built from sums of Kronecker       |
//! |              | products whose small factors are shared across layers         |

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::{self, FORMAT_ADAPTER};
use crate::params::{Binder, NamedTensor, ParamStore, ParameterGroup};
use crate::seq2seq::{gaussian, layer_norm, ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterVariant {
    Plain,
    Houlsby,
    Pfeiffer,
    Parallel,
    Invertible,
    Compacter,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 6] = [
        AdapterVariant::Plain,
        AdapterVariant::Houlsby,
        AdapterVariant::Pfeiffer,
        AdapterVariant::Parallel,
        AdapterVariant::Invertible,
        AdapterVariant::Compacter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterVariant::Plain => "plain",
            AdapterVariant::Houlsby => "houlsby",
            AdapterVariant::Pfeiffer => "pfeiffer",
            AdapterVariant::Parallel => "parallel",
            AdapterVariant::Invertible => "invertible",
            AdapterVariant::Compacter => "compacter",
        }
    }

    fn site_kinds(self) -> &'static [&'static str] {
        match self {
            AdapterVariant::Houlsby => &["attn", "ffn"],
            AdapterVariant::Parallel => &["par"],
            _ => &["ffn"],
        }
    }

    fn site_norm(self) -> bool {
        matches!(self, AdapterVariant::Pfeiffer | AdapterVariant::Invertible)
    }
}

impl fmt::Display for AdapterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdapterVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter variant '{s}'")))
    }
}

fn default_init_scale() -> f64 {
    1.0
}

fn default_compacter_n() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub variant: AdapterVariant,
    pub bottleneck: usize,
    /// Down-projection std is `init_scale / sqrt(d)`.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default = "default_compacter_n")]
    pub compacter_n: usize,
    /// Decoder layers to adapt; all of them when absent.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    /// Also adapt every encoder layer.
    #[serde(default)]
    pub inject_encoder: bool,
    #[serde(default)]
    pub seed: u64,
}

impl AdapterConfig {
    pub fn new(variant: AdapterVariant, bottleneck: usize) -> Self {
        Self {
            variant,
            bottleneck,
            init_scale: default_init_scale(),
            compacter_n: default_compacter_n(),
            layers: None,
            inject_encoder: false,
            seed: 0,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let (d, b) = (model.model_dim, self.bottleneck);
        if b == 0 || b >= d {
            return Err(Error::Config(format!(
                "adapter bottleneck {b} must satisfy 1 <= b < model_dim {d}"
            )));
        }
        if let Some(layers) = &self.layers {
            if let Some(l) = layers.iter().find(|&&l| l >= model.n_dec_layers) {
                return Err(Error::Config(format!(
                    "adapter layer {l} out of range for {} decoder layers",
                    model.n_dec_layers
                )));
            }
        }
        match self.variant {
            AdapterVariant::Compacter => {
                let n = self.compacter_n;
                if n == 0 || d % n != 0 || b % n != 0 {
                    return Err(Error::Config(format!(
                        "compacter factor count {n} must divide model_dim {d} and bottleneck {b}"
                    )));
                }
            }
            AdapterVariant::Invertible if d % 2 != 0 => {
                return Err(Error::Config(format!(
                    "invertible adapters need an even model_dim, got {d}"
                )));
            }
            _ => {}
        }
        Ok(())
    }

    fn sites(&self, model: &ModelConfig) -> Vec<Site> {
        let mut out = Vec::new();
        let kinds = self.variant.site_kinds();
        if self.inject_encoder {
            for l in 0..model.n_enc_layers {
                for k in kinds {
                    out.push(Site::enc(l, k));
                }
            }
        }
        let layers: Vec<usize> = match &self.layers {
            Some(l) => l.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
            None => (0..model.n_dec_layers).collect(),
        };
        for l in layers {
            for k in kinds {
                out.push(Site::dec(l, k));
            }
        }
        out
    }

    /// Adapter scalars this config adds to a model of shape `model`.
    pub fn scalar_count(&self, model: &ModelConfig) -> usize {
        let (d, b) = (model.model_dim, self.bottleneck);
        let n_sites = self.sites(model).len();
        let per_site = match self.variant {
            AdapterVariant::Compacter => 2 * d * b / self.compacter_n + b + d,
            _ => 2 * d * b + b + d,
        };
        let norm = if self.variant.site_norm() { 2 * d } else { 0 };
        let shared = match self.variant {
            AdapterVariant::Compacter => 2 * self.compacter_n.pow(3),
            // two coupling nets, each d/2 -> b -> d/2
            AdapterVariant::Invertible => 2 * (d * b + b + d / 2),
            _ => 0,
        };
        n_sites * (per_site + norm) + shared
    }
}

/// One adapter insertion point, e.g. `ad.dec.1.ffn`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Site(String);

impl Site {
    pub fn dec(layer: usize, kind: &str) -> Self {
        Site(format!("ad.dec.{layer}.{kind}"))
    }

    pub fn enc(layer: usize, kind: &str) -> Self {
        Site(format!("ad.enc.{layer}.{kind}"))
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

const INV_NETS: [&str; 2] = ["ad.inv.f", "ad.inv.g"];

fn insert_bottleneck(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    b: usize,
    d_out: usize,
    init_scale: f64,
) {
    let g = ParameterGroup::Adapter;
    let std = init_scale / (d_in as f64).sqrt();
    store.insert(format!("{prefix}.down.w"), g, gaussian(rng, &[d_in, b], std));
    store.insert(format!("{prefix}.b1"), g, Tensor::zeros(&[b]));
    store.insert(format!("{prefix}.up.w"), g, Tensor::zeros(&[b, d_out]));
    store.insert(format!("{prefix}.b2"), g, Tensor::zeros(&[d_out]));
}

/// Adds adapter tensors for `config`; base tensors are left untouched.
pub fn inject_adapters(params: &ModelParams, config: &AdapterConfig) -> Result<ModelParams> {
    if params.adapter.is_some() || params.store.has_group(ParameterGroup::Adapter) {
        return Err(Error::Config("adapters are already injected into this model".into()));
    }
    let model = &params.config;
    config.validate(model)?;
    let (d, b) = (model.model_dim, config.bottleneck);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xada9_7e45);
    let mut store = params.store.clone();
    let g = ParameterGroup::Adapter;
    let n = config.compacter_n;

    if config.variant == AdapterVariant::Compacter {
        for dir in ["down", "up"] {
            for i in 0..n {
                let a = gaussian(&mut rng, &[n, n], 1.0 / (n as f64).sqrt());
                store.insert(format!("ad.compacter.{dir}.a{i}"), g, a);
            }
        }
    }
    for site in config.sites(model) {
        let p = site.name();
        if config.variant.site_norm() {
            store.insert(format!("{p}.ln.g"), g, Tensor::full(&[d], 1.0));
            store.insert(format!("{p}.ln.b"), g, Tensor::zeros(&[d]));
        }
        if config.variant == AdapterVariant::Compacter {
            let std = config.init_scale / (d as f64).sqrt();
            for i in 0..n {
                store.insert(format!("{p}.down.k{i}"), g, gaussian(&mut rng, &[d / n, b / n], std));
            }
            store.insert(format!("{p}.b1"), g, Tensor::zeros(&[b]));
            for i in 0..n {
                store.insert(format!("{p}.up.k{i}"), g, Tensor::zeros(&[b / n, d / n]));
            }
            store.insert(format!("{p}.b2"), g, Tensor::zeros(&[d]));
        } else {
            insert_bottleneck(&mut store, &mut rng, p, d, b, d, config.init_scale);
        }
    }
    if config.variant == AdapterVariant::Invertible {
        for net in INV_NETS {
            insert_bottleneck(&mut store, &mut rng, net, d / 2, b, d / 2, config.init_scale);
        }
    }
    if !model.high_precision {
        store.round_to_f32();
    }
    Ok(ModelParams {
        config: model.clone(),
        adapter: Some(config.clone()),
        store,
    })
}

/// The base model with every adapter tensor removed.
pub fn strip_adapters(params: &ModelParams) -> ModelParams {
    let mut store = params.store.clone();
    store.remove_group(ParameterGroup::Adapter);
    ModelParams {
        config: params.config.clone(),
        adapter: None,
        store,
    }
}

fn projection(b: &mut Binder, site: &str, dir: &str, n: usize) -> Var {
    if b.store().contains(&format!("{site}.{dir}.w")) {
        return b.p(&format!("{site}.{dir}.w"));
    }
    // compacter: Σ_i A_i ⊗ K_i
    let mut acc: Option<Var> = None;
    for i in 0..n {
        let a = b.p(&format!("ad.compacter.{dir}.a{i}"));
        let k = b.p(&format!("{site}.{dir}.k{i}"));
        let term = b.tape.kron(a, k);
        acc = Some(match acc {
            Some(s) => b.tape.add(s, term),
            None => term,
        });
    }
    acc.expect("compacter has at least one factor")
}

fn bottleneck(b: &mut Binder, site: &str, x: Var, n: usize) -> Var {
    let down = projection(b, site, "down", n);
    let b1 = b.p(&format!("{site}.b1"));
    let up = projection(b, site, "up", n);
    let b2 = b.p(&format!("{site}.b2"));
    let h = b.tape.matmul(x, down);
    let h = b.tape.add_bias(h, b1);
    let h = b.tape.relu(h);
    let h = b.tape.matmul(h, up);
    b.tape.add_bias(h, b2)
}

/// Residual adapter at `site`; identity when the model has none there.
pub(crate) fn apply_site(b: &mut Binder, cfg: &AdapterConfig, site: &Site, h: Var) -> Var {
    let p = site.name();
    if !b.store().contains(&format!("{p}.b1")) {
        return h;
    }
    let x = if b.store().contains(&format!("{p}.ln.g")) {
        layer_norm(b, h, &format!("{p}.ln"))
    } else {
        h
    };
    let delta = bottleneck(b, p, x, cfg.compacter_n);
    b.tape.add(h, delta)
}

/// Parallel adapter: adds `adapter(x)` to the stream `h` that already holds
/// the sublayer output computed from the same `x`.
pub(crate) fn apply_parallel(b: &mut Binder, cfg: &AdapterConfig, site: &Site, x: Var, h: Var) -> Var {
    if !b.store().contains(&format!("{}.b1", site.name())) {
        return h;
    }
    let delta = bottleneck(b, site.name(), x, cfg.compacter_n);
    b.tape.add(h, delta)
}

fn has_coupling(b: &Binder) -> bool {
    b.store().contains("ad.inv.f.b1")
}

/// `y1 = h1 + F(h2); y2 = h2 + G(y1)` on the token embeddings.
pub(crate) fn invertible_forward(b: &mut Binder, cfg: &AdapterConfig, x: Var) -> Var {
    if !has_coupling(b) {
        return x;
    }
    let half = b.tape.value(x).cols() / 2;
    let h1 = b.tape.slice_cols(x, 0, half);
    let h2 = b.tape.slice_cols(x, half, half);
    let f = bottleneck(b, INV_NETS[0], h2, cfg.compacter_n);
    let y1 = b.tape.add(h1, f);
    let g = bottleneck(b, INV_NETS[1], y1, cfg.compacter_n);
    let y2 = b.tape.add(h2, g);
    b.tape.concat_cols(&[y1, y2])
}

/// Exact inverse of [`invertible_forward`].
pub(crate) fn invertible_inverse(b: &mut Binder, cfg: &AdapterConfig, y: Var) -> Var {
    if !has_coupling(b) {
        return y;
    }
    let half = b.tape.value(y).cols() / 2;
    let y1 = b.tape.slice_cols(y, 0, half);
    let y2 = b.tape.slice_cols(y, half, half);
    let g = bottleneck(b, INV_NETS[1], y1, cfg.compacter_n);
    let g = b.tape.scale(g, -1.0);
    let h2 = b.tape.add(y2, g);
    let f = bottleneck(b, INV_NETS[0], h2, cfg.compacter_n);
    let f = b.tape.scale(f, -1.0);
    let h1 = b.tape.add(y1, f);
    b.tape.concat_cols(&[h1, h2])
}

fn adapter_config(params: &ModelParams) -> Result<&AdapterConfig> {
    params
        .adapter
        .as_ref()
        .ok_or_else(|| Error::Config("model has no adapters".into()))
}

fn eval_with<F>(params: &ModelParams, hidden: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Binder, &AdapterConfig, Var) -> Var,
{
    let cfg = adapter_config(params)?;
    if hidden.cols() != params.config.model_dim {
        return Err(Error::Shape(format!(
            "hidden width {} does not match model_dim {}",
            hidden.cols(),
            params.config.model_dim
        )));
    }
    let frozen = crate::params::frozen;
    let mut b = Binder::new(&params.store, &frozen);
    let x = b.tape.constant(hidden.clone());
    let y = f(&mut b, cfg, x);
    Ok(b.tape.value(y).clone())
}

/// Applies the adapter at `site` to a `[n, d]` batch of hidden vectors.
/// Parallel sites return `h + adapter(h)`.
pub fn adapter_transform(params: &ModelParams, site: &Site, hidden: &Tensor) -> Result<Tensor> {
    if !params.store.contains(&format!("{}.b1", site.name())) {
        return Err(Error::Config(format!("no adapter at site {}", site.name())));
    }
    eval_with(params, hidden, |b, cfg, x| {
        if site.name().ends_with(".par") {
            apply_parallel(b, cfg, site, x, x)
        } else {
            apply_site(b, cfg, site, x)
        }
    })
}

pub fn invertible_transform(params: &ModelParams, hidden: &Tensor) -> Result<Tensor> {
    eval_with(params, hidden, invertible_forward)
}

pub fn invertible_inverse_transform(params: &ModelParams, hidden: &Tensor) -> Result<Tensor> {
    eval_with(params, hidden, invertible_inverse)
}

/// The groups an optimizer may update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainMask(BTreeSet<ParameterGroup>);

impl TrainMask {
    pub fn groups(&self) -> &BTreeSet<ParameterGroup> {
        &self.0
    }

    pub fn allows(&self, g: ParameterGroup) -> bool {
        self.0.contains(&g)
    }
}

pub fn set_trainable(params: &ModelParams, groups: &[ParameterGroup]) -> Result<TrainMask> {
    if groups.is_empty() {
        return Err(Error::Config("at least one trainable group is required".into()));
    }
    let present = params.store.groups();
    if let Some(g) = groups.iter().find(|g| !present.contains(g)) {
        return Err(Error::Config(format!("group '{g}' has no tensors in this model")));
    }
    Ok(TrainMask(groups.iter().copied().collect()))
}

#[derive(Serialize, Deserialize)]
struct SidecarMeta {
    adapter: AdapterConfig,
    model_dim: usize,
    n_dec_layers: usize,
    n_enc_layers: usize,
}

/// Writes only the adapter group as an `STLR1-A` sidecar.
pub fn save_sidecar(params: &ModelParams, dir: &Path) -> Result<()> {
    let cfg = adapter_config(params)?;
    let meta = SidecarMeta {
        adapter: cfg.clone(),
        model_dim: params.config.model_dim,
        n_dec_layers: params.config.n_dec_layers,
        n_enc_layers: params.config.n_enc_layers,
    };
    let tensors: Vec<NamedTensor> = params.store.group_entries(ParameterGroup::Adapter).cloned().collect();
    checkpoint::write_checkpoint(dir, FORMAT_ADAPTER, serde_json::to_value(meta)?, &tensors)
}

/// Plugs a sidecar into an adapter-free base model.
pub fn attach_sidecar(base: &ModelParams, dir: &Path) -> Result<ModelParams> {
    let (manifest, tensors) = checkpoint::read_checkpoint(dir, FORMAT_ADAPTER)?;
    let meta: SidecarMeta = serde_json::from_value(manifest.meta)?;
    let base = if base.adapter.is_some() { strip_adapters(base) } else { base.clone() };
    if meta.model_dim != base.config.model_dim
        || meta.n_dec_layers != base.config.n_dec_layers
        || meta.n_enc_layers != base.config.n_enc_layers
    {
        return Err(Error::Shape(format!(
            "sidecar built for d={} with {}+{} layers, base has d={} with {}+{}",
            meta.model_dim,
            meta.n_enc_layers,
            meta.n_dec_layers,
            base.config.model_dim,
            base.config.n_enc_layers,
            base.config.n_dec_layers
        )));
    }
    let mut model = inject_adapters(&base, &meta.adapter)?;
    load_adapter_tensors(&mut model, tensors)?;
    Ok(model)
}

/// Overwrites the adapter tensors of `model`, requiring an exact name and
/// shape match.
pub fn load_adapter_tensors(model: &mut ModelParams, tensors: Vec<NamedTensor>) -> Result<()> {
    let expected = model.store.group_entries(ParameterGroup::Adapter).count();
    if tensors.len() != expected {
        return Err(Error::Shape(format!(
            "sidecar has {} adapter tensors, model expects {expected}",
            tensors.len()
        )));
    }
    for t in tensors {
        let idx = model
            .store
            .index_of(&t.name)
            .ok_or_else(|| Error::Shape(format!("model has no adapter tensor {}", t.name)))?;
        let slot = model.store.entry_mut(idx);
        if slot.group != ParameterGroup::Adapter || slot.tensor.shape() != t.tensor.shape() {
            return Err(Error::Shape(format!(
                "adapter tensor {} has shape {:?}, model expects {:?}",
                t.name,
                t.tensor.shape(),
                slot.tensor.shape()
            )));
        }
        slot.tensor = t.tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::{decoder_forward, init_model, Source};
    use crate::textpipe::{pad_batch, BOS};

    fn cfg(d: usize, dec: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            model_dim: d,
            n_enc_layers: 1,
            n_dec_layers: dec,
            n_heads: 2,
            ffn_dim: 2 * d,
            max_positions: 16,
            dropout: 0.0,
            seed: 5,
            high_precision: true,
        }
    }

    #[test]
    fn plain_count_matches_worked_example() {
        let a = AdapterConfig::new(AdapterVariant::Plain, 8);
        assert_eq!(a.scalar_count(&cfg(64, 2)), 2192);
    }

    #[test]
    fn injection_errors() {
        let m = init_model(&cfg(8, 2)).unwrap();
        assert!(inject_adapters(&m, &AdapterConfig::new(AdapterVariant::Plain, 8)).is_err());
        let once = inject_adapters(&m, &AdapterConfig::new(AdapterVariant::Plain, 2)).unwrap();
        assert!(inject_adapters(&once, &AdapterConfig::new(AdapterVariant::Plain, 2)).is_err());
        let mut c = AdapterConfig::new(AdapterVariant::Compacter, 3);
        c.compacter_n = 2;
        assert!(inject_adapters(&m, &c).is_err());
        let mut l = AdapterConfig::new(AdapterVariant::Plain, 2);
        l.layers = Some(vec![5]);
        assert!(inject_adapters(&m, &l).is_err());
    }

    #[test]
    fn set_trainable_rejects_empty_and_absent_groups() {
        let m = init_model(&cfg(8, 1)).unwrap();
        assert!(set_trainable(&m, &[]).is_err());
        assert!(set_trainable(&m, &[ParameterGroup::Adapter]).is_err());
        let mask = set_trainable(&m, &[ParameterGroup::Encoder]).unwrap();
        assert!(mask.allows(ParameterGroup::Encoder));
        assert!(!mask.allows(ParameterGroup::LmHead));
    }

    #[test]
    fn every_variant_starts_as_identity() {
        let m = init_model(&cfg(8, 2)).unwrap();
        let prefix = pad_batch(&[vec![BOS, 5, 6, 7]], 4);
        let before = decoder_forward(&m, Source::Null, &prefix).unwrap();
        for v in AdapterVariant::ALL {
            let a = inject_adapters(&m, &AdapterConfig::new(v, 4)).unwrap();
            let after = decoder_forward(&a, Source::Null, &prefix).unwrap();
            assert!(before.probs.max_abs_diff(&after.probs) <= 1e-6, "{v}");
        }
    }

    #[test]
    fn sidecar_rejects_mismatched_base() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(8, 2);
        c.high_precision = false;
        let m = init_model(&c).unwrap();
        let a = inject_adapters(&m, &AdapterConfig::new(AdapterVariant::Houlsby, 2)).unwrap();
        save_sidecar(&a, dir.path()).unwrap();
        let other = init_model(&ModelConfig { n_dec_layers: 1, ..c }).unwrap();
        assert!(matches!(attach_sidecar(&other, dir.path()), Err(Error::Shape(_))));
        let back = attach_sidecar(&m, dir.path()).unwrap();
        assert_eq!(back.store, a.store);
    }
}
