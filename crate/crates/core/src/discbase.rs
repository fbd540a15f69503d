//! TextCNN classifiers and the discriminator-loss style baseline.
//!
//! The CNN embeds tokens, runs ReLU convolutions of widths 2, 3 and 4,
//! max-pools each filter over the valid windows and feeds the concatenation
//! to a linear head. The head starts at zero, so training on flipped labels
//! mirrors the head exactly and predicts `1 - p`.
//!
//! The baseline generator is trained on teacher forcing plus `lambda` times
//! a frozen discriminator's loss on the soft-embedded output distributions.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softmax_in_place, Tape, Var};
use crate::checkpoint::{self, FORMAT_MODEL};
use crate::optim::{Adam, AdamConfig};
use crate::params::{all_trainable, Binder, ParamStore, ParameterGroup};
use crate::seq2seq::{gaussian, logits_var, shift_targets, Dropout, ModelParams, Source};
use crate::tensor::Tensor;
use crate::textpipe::{pad_batch, Batch, PAD};
use crate::trainer::{epoch_order, Objective, PhasePlan, TrainData};
use crate::{Error, Result};

fn default_windows() -> Vec<usize> {
    vec![2, 3, 4]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub embed_dim: usize,
    pub n_filters: usize,
    #[serde(default = "default_windows")]
    pub windows: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    pub max_len: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            n_filters: 16,
            windows: default_windows(),
            epochs: 8,
            batch_size: 16,
            lr: 5e-3,
            seed: 0,
            max_len: 64,
        }
    }
}

impl CnnConfig {
    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.n_filters == 0
            || self.windows.is_empty()
            || self.windows.contains(&0)
            || self.batch_size == 0
            || self.lr <= 0.0
            || self.max_len < self.max_window()
        {
            return Err(Error::Config(format!("invalid CNN settings {self:?}")));
        }
        Ok(())
    }

    fn max_window(&self) -> usize {
        self.windows.iter().copied().max().unwrap_or(1)
    }
}

/// A trained (or freshly initialized) text CNN. `n_classes == 1` is a
/// binary classifier with a single logit.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCnn {
    pub config: CnnConfig,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub store: ParamStore,
}

struct CnnVars {
    emb: Var,
    convs: Vec<(usize, Var, Var)>,
    head_w: Var,
    head_b: Var,
}

const G: ParameterGroup = ParameterGroup::Encoder;

impl TextCnn {
    pub fn init(config: &CnnConfig, vocab_size: usize, n_classes: usize) -> Result<Self> {
        config.validate()?;
        if n_classes == 0 {
            return Err(Error::Config("a classifier needs at least one output".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc22);
        let (e, f) = (config.embed_dim, config.n_filters);
        let mut s = ParamStore::new();
        s.insert("cnn.emb", G, gaussian(&mut rng, &[vocab_size, e], 1.0));
        for &w in &config.windows {
            let std = 1.0 / ((w * e) as f64).sqrt();
            s.insert(format!("cnn.conv{w}.w"), G, gaussian(&mut rng, &[w * e, f], std));
            s.insert(format!("cnn.conv{w}.b"), G, Tensor::zeros(&[f]));
        }
        let feat = f * config.windows.len();
        s.insert("cnn.head.w", G, Tensor::zeros(&[feat, n_classes]));
        s.insert("cnn.head.b", G, Tensor::zeros(&[n_classes]));
        s.round_to_f32();
        Ok(Self {
            config: config.clone(),
            vocab_size,
            n_classes,
            store: s,
        })
    }

    pub fn embedding_table(&self) -> &Tensor {
        self.store.get("cnn.emb")
    }

    fn bind_trainable(&self, b: &mut Binder) -> CnnVars {
        CnnVars {
            emb: b.p("cnn.emb"),
            convs: self
                .config
                .windows
                .iter()
                .map(|&w| (w, b.p(&format!("cnn.conv{w}.w")), b.p(&format!("cnn.conv{w}.b"))))
                .collect(),
            head_w: b.p("cnn.head.w"),
            head_b: b.p("cnn.head.b"),
        }
    }

    fn bind_frozen(&self, tape: &mut Tape) -> CnnVars {
        let mut c = |n: &str| tape.constant(self.store.get(n).clone());
        CnnVars {
            emb: c("cnn.emb"),
            convs: self
                .config
                .windows
                .iter()
                .map(|&w| (w, c(&format!("cnn.conv{w}.w")), c(&format!("cnn.conv{w}.b"))))
                .collect(),
            head_w: c("cnn.head.w"),
            head_b: c("cnn.head.b"),
        }
    }

    /// Pads or truncates to the CNN's working length, at least the widest
    /// window.
    fn batch(&self, seqs: &[Vec<usize>]) -> Batch {
        let fixed: Vec<Vec<usize>> = seqs
            .iter()
            .map(|s| if s.is_empty() { vec![PAD] } else { s.clone() })
            .collect();
        let longest = fixed.iter().map(Vec::len).max().unwrap_or(1);
        pad_batch(&fixed, longest.clamp(self.config.max_window(), self.config.max_len))
    }

    fn features(&self, tape: &mut Tape, v: &CnnVars, x: Var, batch: usize, len: usize, lengths: &[usize]) -> Var {
        let mut pooled = Vec::new();
        for &(w, cw, cb) in &v.convs {
            let u = tape.unfold(x, batch, len, w);
            let h = tape.matmul(u, cw);
            let h = tape.add_bias(h, cb);
            let h = tape.relu(h);
            let windows = len - w + 1;
            let valid: Vec<usize> = lengths.iter().map(|&l| (l.max(w) - w + 1).min(windows)).collect();
            pooled.push(tape.max_pool_time(h, windows, &valid));
        }
        tape.concat_cols(&pooled)
    }

    fn logits(&self, tape: &mut Tape, v: &CnnVars, x: Var, batch: usize, len: usize, lengths: &[usize]) -> Var {
        let feat = self.features(tape, v, x, batch, len, lengths);
        let out = tape.matmul(feat, v.head_w);
        tape.add_bias(out, v.head_b)
    }

    fn pooled_features(&self, seqs: &[Vec<usize>]) -> Tensor {
        let batch = self.batch(seqs);
        let mut tape = Tape::new();
        let v = self.bind_frozen(&mut tape);
        let x = tape.embedding(v.emb, &batch.ids);
        let feat = self.features(&mut tape, &v, x, batch.batch, batch.max_len, &batch.lengths);
        tape.value(feat).clone()
    }

    /// Raw logits `[n, n_classes]`.
    pub fn predict_logits(&self, seqs: &[Vec<usize>]) -> Tensor {
        if seqs.is_empty() {
            return Tensor::zeros(&[0, self.n_classes]);
        }
        let batch = self.batch(seqs);
        let mut tape = Tape::new();
        let v = self.bind_frozen(&mut tape);
        let x = tape.embedding(v.emb, &batch.ids);
        let out = self.logits(&mut tape, &v, x, batch.batch, batch.max_len, &batch.lengths);
        tape.value(out).clone()
    }

    /// Positive-class probability per sequence (binary models).
    pub fn predict_proba(&self, seqs: &[Vec<usize>]) -> Vec<f64> {
        assert_eq!(self.n_classes, 1, "predict_proba is for binary models");
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            out.extend(self.predict_logits(chunk).data().iter().map(|&z| sigmoid(z)));
        }
        out
    }

    /// Class distribution per sequence (multi-class models).
    pub fn predict_dist(&self, seqs: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let t = self.predict_logits(chunk);
            for r in 0..t.rows() {
                let mut row = t.row(r).to_vec();
                softmax_in_place(&mut row);
                out.push(row);
            }
        }
        out
    }

    /// Mean of pooled CNN features over `seqs`.
    pub fn mean_features(&self, seqs: &[Vec<usize>]) -> Vec<f64> {
        let f = self.pooled_features(seqs);
        let cols = f.cols();
        let mut mean = vec![0.0; cols];
        for r in 0..f.rows() {
            for (m, v) in mean.iter_mut().zip(f.row(r)) {
                *m += v / f.rows() as f64;
            }
        }
        mean
    }

    pub fn save(&self, dir: &Path, kind: &str, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "judge_type": kind,
            "cnn": self.config,
            "vocab_size": self.vocab_size,
            "n_classes": self.n_classes,
            "extra": extra,
        });
        checkpoint::write_checkpoint(dir, FORMAT_MODEL, meta, self.store.entries())
    }

    /// Loads a CNN and returns it with its `judge_type` tag and extra meta.
    pub fn load(dir: &Path) -> Result<(Self, String, serde_json::Value)> {
        let (manifest, tensors) = checkpoint::read_checkpoint(dir, FORMAT_MODEL)?;
        let meta = manifest.meta;
        let kind = meta["judge_type"]
            .as_str()
            .ok_or_else(|| Error::Data(format!("{} is not a judge checkpoint", dir.display())))?
            .to_string();
        let config: CnnConfig = serde_json::from_value(meta["cnn"].clone())?;
        let num = |k: &str| {
            meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Data(format!("judge meta lacks {k}")))
        };
        let mut cnn = TextCnn::init(&config, num("vocab_size")?, num("n_classes")?)?;
        if tensors.len() != cnn.store.len() {
            return Err(Error::Shape("judge tensor count does not match its config".into()));
        }
        for t in tensors {
            let i = cnn
                .store
                .index_of(&t.name)
                .ok_or_else(|| Error::Shape(format!("unexpected judge tensor {}", t.name)))?;
            if cnn.store.entries()[i].tensor.shape() != t.tensor.shape() {
                return Err(Error::Shape(format!("judge tensor {} has the wrong shape", t.name)));
            }
            cnn.store.entry_mut(i).tensor = t.tensor;
        }
        Ok((cnn, kind, meta["extra"].clone()))
    }
}

/// Trains a CNN on `(sequence, label)` pairs. Binary models (`n_classes ==
/// 1`) take labels 0/1.
pub fn train_cnn(config: &CnnConfig, vocab_size: usize, n_classes: usize, seqs: &[Vec<usize>], labels: &[usize]) -> Result<TextCnn> {
    if seqs.len() != labels.len() || seqs.is_empty() {
        return Err(Error::Data("CNN training needs aligned, non-empty data".into()));
    }
    let mut cnn = TextCnn::init(config, vocab_size, n_classes)?;
    let classes = n_classes.max(2);
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
    }
    if let Some(id) = seqs.iter().flatten().find(|&&t| t >= vocab_size) {
        return Err(Error::Data(format!("token id {id} out of range for {vocab_size}")));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), cnn.store.len());
    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, seqs.len());
        for chunk in order.chunks(config.batch_size) {
            let batch_seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let batch = cnn.batch(&batch_seqs);
            let store = cnn.store.clone();
            let mut b = Binder::new(&store, &all_trainable);
            let v = cnn.bind_trainable(&mut b);
            let x = b.tape.embedding(v.emb, &batch.ids);
            let logits = cnn.logits(&mut b.tape, &v, x, batch.batch, batch.max_len, &batch.lengths);
            let loss = if n_classes == 1 {
                let y: Vec<f64> = chunk.iter().map(|&i| labels[i] as f64).collect();
                b.tape.bce_with_logits(logits, &y)
            } else {
                let y: Vec<Option<usize>> = chunk.iter().map(|&i| Some(labels[i])).collect();
                b.tape.cross_entropy(logits, &y)
            };
            let value = b.tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("classifier loss is {value}")));
            }
            let grads = b.tape.backward(loss);
            let pg = b.tape.param_grads(&grads);
            adam.update(&mut cnn.store, &pg, true)?;
        }
    }
    Ok(cnn)
}

/// Seeded, class-stratified 80/20 split of `(items, labels)` into train and
/// held-out index lists.
pub(crate) fn stratified_split(labels: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5917);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n_held = if idx.len() >= 2 { (idx.len() / 5).max(1) } else { 0 };
        held.extend_from_slice(&idx[..n_held]);
        train.extend_from_slice(&idx[n_held..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

pub fn binary_accuracy(cnn: &TextCnn, seqs: &[Vec<usize>], labels: &[usize]) -> f64 {
    if seqs.is_empty() {
        return f64::NAN;
    }
    let p = cnn.predict_proba(seqs);
    let hits = p.iter().zip(labels).filter(|(p, &l)| (**p > 0.5) == (l == 1)).count();
    hits as f64 / seqs.len() as f64
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub cnn: TextCnn,
    pub heldout_accuracy: f64,
    pub n_train: usize,
    pub n_heldout: usize,
}

/// Binary style discriminator: `positives` are style texts, `negatives` are
/// story endings. Accuracy is measured on a stratified 20% hold-out.
pub fn train_discriminator(
    positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
    config: &CnnConfig,
    vocab_size: usize,
) -> Result<TrainedClassifier> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Data("discriminator training needs both classes".into()));
    }
    let seqs: Vec<Vec<usize>> = positives.iter().chain(negatives).cloned().collect();
    let labels: Vec<usize> = (0..seqs.len()).map(|i| usize::from(i < positives.len())).collect();
    let (tr, ho) = stratified_split(&labels, config.seed);
    let pick = |idx: &[usize]| -> (Vec<Vec<usize>>, Vec<usize>) { idx.iter().map(|&i| (seqs[i].clone(), labels[i])).unzip() };
    let (xs, ys) = pick(&tr);
    let (hx, hy) = pick(&ho);
    let cnn = train_cnn(config, vocab_size, 1, &xs, &ys)?;
    Ok(TrainedClassifier {
        heldout_accuracy: binary_accuracy(&cnn, &hx, &hy),
        n_train: xs.len(),
        n_heldout: hx.len(),
        cnn,
    })
}

/// Distribution-weighted average of embedding rows: `dist · table`.
pub fn soft_embed(dist: &Tensor, table: &Tensor) -> Result<Tensor> {
    if dist.cols() != table.rows() {
        return Err(Error::Shape(format!(
            "distribution width {} vs {} embedding rows",
            dist.cols(),
            table.rows()
        )));
    }
    for r in 0..dist.rows() {
        let row = dist.row(r);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| *p < -1e-12) || (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Numeric(format!("row {r} is not a distribution (sum {sum})")));
        }
    }
    let (n, v, e) = (dist.rows(), dist.cols(), table.cols());
    let mut out = vec![0.0; n * e];
    crate::tensor::gemm_nn(dist.data(), table.data(), &mut out, n, v, e);
    Ok(Tensor::from_vec(&[n, e], out))
}

#[derive(Clone, Debug)]
pub struct AugmentedLoss {
    pub total: f64,
    pub teacher_forcing: f64,
    pub disc: f64,
    pub grads: Vec<(usize, Tensor)>,
}

fn widen(target: &Batch, min_len: usize) -> Batch {
    if target.max_len >= min_len {
        return target.clone();
    }
    let rows: Vec<Vec<usize>> = (0..target.batch).map(|b| target.row(b)[..target.lengths[b]].to_vec()).collect();
    pad_batch(&rows, min_len)
}

/// Teacher forcing plus `lambda` times the frozen discriminator's negative
/// log-probability of the style class on the soft-embedded per-step output
/// distributions. Only the generator groups in `trainable` get gradients.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_augmented_step(
    generator: &ModelParams,
    src: &Batch,
    target: &Batch,
    disc: &TextCnn,
    lambda: f64,
    temperature: f64,
    trainable: &BTreeSet<ParameterGroup>,
    drop: &mut Dropout,
) -> Result<AugmentedLoss> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("style weight must be non-negative, got {lambda}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if disc.n_classes != 1 || disc.vocab_size != generator.config.vocab_size {
        return Err(Error::Shape("discriminator must be binary over the generator vocabulary".into()));
    }
    let target = widen(target, disc.config.max_window() + 1);
    let (inputs, labels) = shift_targets(&target)?;
    let is_trainable = |g: ParameterGroup| trainable.contains(&g);
    let mut b = Binder::new(&generator.store, &is_trainable);
    let logits = logits_var(&mut b, generator, Source::Tokens(src), &inputs, drop)?;
    let tf = b.tape.cross_entropy(logits, &labels);

    let scaled = b.tape.scale(logits, 1.0 / temperature);
    let dist = b.tape.softmax(scaled);
    let v = disc.bind_frozen(&mut b.tape);
    let x = b.tape.matmul(dist, v.emb);
    let len = inputs.max_len;
    let lengths: Vec<usize> = (0..inputs.batch)
        .map(|r| labels[r * len..(r + 1) * len].iter().filter(|l| l.is_some()).count().max(1))
        .collect();
    let dl = disc.logits(&mut b.tape, &v, x, inputs.batch, len, &lengths);
    let disc_loss = b.tape.bce_with_logits(dl, &vec![1.0; inputs.batch]);
    let weighted = b.tape.scale(disc_loss, lambda);
    let total = b.tape.add(tf, weighted);

    let out = AugmentedLoss {
        total: b.tape.value(total).item(),
        teacher_forcing: b.tape.value(tf).item(),
        disc: b.tape.value(disc_loss).item(),
        grads: Vec::new(),
    };
    if !out.total.is_finite() {
        return Err(Error::Numeric(format!("augmented loss is {}", out.total)));
    }
    let grads = b.tape.backward(total);
    Ok(AugmentedLoss {
        grads: b.tape.param_grads(&grads),
        ..out
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscStep {
    pub step: usize,
    pub total: f64,
    pub teacher_forcing: f64,
    pub disc: f64,
}

/// Trains a fresh generator on story endings with the augmented loss, using
/// the given phase-1 plan for budget and optimizer.
pub fn train_disc_baseline(
    plan: &PhasePlan,
    model: &ModelParams,
    train: &TrainData,
    disc: &TextCnn,
    lambda: f64,
    temperature: f64,
) -> Result<(ModelParams, Vec<DiscStep>)> {
    plan.validate()?;
    if plan.objective != Objective::StoryEnding {
        return Err(Error::Config("the discriminator baseline trains on story endings".into()));
    }
    let sources = train
        .sources
        .as_ref()
        .ok_or_else(|| Error::Data("story objective needs contexts".into()))?;
    let frozen_disc = disc.store.clone();
    let groups: BTreeSet<_> = plan.trainable.iter().copied().collect();
    let mut params = model.clone();
    let mut adam = Adam::new(plan.optimizer.clone(), params.store.len());
    let spe = plan.steps_per_epoch(train.len());
    let total = plan.total_steps(train.len());
    let cap = params.config.max_positions;
    let mut log = Vec::with_capacity(total);
    let mut order = Vec::new();
    for step in 0..total {
        if step % spe == 0 {
            order = epoch_order(plan.seed, step / spe, train.len());
        }
        let i = step % spe;
        let idx = &order[i * plan.batch_size..((i + 1) * plan.batch_size).min(train.len())];
        let src = crate::textpipe::pad_tight(&idx.iter().map(|&k| sources[k].clone()).collect::<Vec<_>>(), cap);
        let tgt = crate::textpipe::pad_tight(&idx.iter().map(|&k| train.targets[k].clone()).collect::<Vec<_>>(), cap);
        let mut drop = Dropout::new(params.config.dropout, crate::trainer::mix(plan.seed ^ 0xd15c, step as u64));
        let r = discriminator_augmented_step(&params, &src, &tgt, disc, lambda, temperature, &groups, &mut drop)?;
        adam.update(&mut params.store, &r.grads, !params.config.high_precision)?;
        log.push(DiscStep {
            step: step + 1,
            total: r.total,
            teacher_forcing: r.teacher_forcing,
            disc: r.disc,
        });
    }
    debug_assert_eq!(disc.store, frozen_disc);
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable(n: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        // class 1 uses ids 5..8, class 0 uses 8..11, shared filler 11
        let pos = (0..n).map(|i| vec![11, 5 + i % 3, 11, 5 + (i + 1) % 3, 11]).collect();
        let neg = (0..n).map(|i| vec![11, 8 + i % 3, 11, 8 + (i + 2) % 3]).collect();
        (pos, neg)
    }

    fn cfg() -> CnnConfig {
        CnnConfig {
            embed_dim: 6,
            n_filters: 4,
            epochs: 6,
            batch_size: 8,
            lr: 1e-2,
            seed: 3,
            max_len: 16,
            ..CnnConfig::default()
        }
    }

    #[test]
    fn separable_discriminator_is_accurate() {
        let (p, n) = separable(60);
        let r = train_discriminator(&p, &n, &cfg(), 12).unwrap();
        assert!(r.heldout_accuracy >= 0.95, "{}", r.heldout_accuracy);
        let probs = r.cnn.predict_proba(&p);
        assert!(probs.iter().filter(|&&x| x > 0.5).count() as f64 >= 0.9 * p.len() as f64);
        assert!(train_discriminator(&p, &[], &cfg(), 12).is_err());
    }

    #[test]
    fn flipped_labels_flip_probabilities() {
        let (p, n) = separable(20);
        let seqs: Vec<Vec<usize>> = p.iter().chain(&n).cloned().collect();
        let y: Vec<usize> = (0..seqs.len()).map(|i| usize::from(i < p.len())).collect();
        let flipped: Vec<usize> = y.iter().map(|l| 1 - l).collect();
        let a = train_cnn(&cfg(), 12, 1, &seqs, &y).unwrap();
        let b = train_cnn(&cfg(), 12, 1, &seqs, &flipped).unwrap();
        for (pa, pb) in a.predict_proba(&seqs).iter().zip(b.predict_proba(&seqs)) {
            assert!((pa + pb - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn soft_embed_contract() {
        let table = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let one_hot = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]);
        assert_eq!(soft_embed(&one_hot, &table).unwrap().data(), &[3.0, 4.0]);
        let uniform = Tensor::from_vec(&[1, 3], vec![1.0 / 3.0; 3]);
        let m = soft_embed(&uniform, &table).unwrap();
        assert!((m.data()[0] - 3.0).abs() < 1e-12 && (m.data()[1] - 4.0).abs() < 1e-12);
        let bad = Tensor::from_vec(&[1, 3], vec![0.5, 0.2, 0.2]);
        assert!(soft_embed(&bad, &table).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let (p, n) = separable(10);
        let r = train_discriminator(&p, &n, &cfg(), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.cnn.save(dir.path(), "style", serde_json::json!({"threshold": 0.5})).unwrap();
        let (back, kind, extra) = TextCnn::load(dir.path()).unwrap();
        assert_eq!(back, r.cnn);
        assert_eq!(kind, "style");
        assert_eq!(extra["threshold"], 0.5);
    }
}
