//! The three training phases and the loop they share.
//!
//! Batch order depends only on `(seed, epoch)` and dropout masks only on
//! `(seed, step)`, so a [`TrainState`] of parameters, optimizer moments and
//! the step counter is all that is needed to resume a run exactly.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterConfig};
use crate::checkpoint::{self, Dtype};
use crate::corpus::{StoryExample, StyleCaption};
use crate::decoding::{self, DecodeSettings};
use crate::evalsuite;
use crate::judges::StyleJudge;
use crate::optim::{changed_groups, Adam, AdamConfig};
use crate::params::{NamedTensor, ParamStore, ParameterGroup};
use crate::seq2seq::{self, loss_and_grads, Dropout, ModelParams, Source};
use crate::textpipe::{pad_tight, Batch, Vocabulary};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Teacher forcing with the story context on the encoder.
    StoryEnding,
    /// Teacher forcing against the null context.
    StyleLm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StopCondition {
    Fixed,
    ValPlateau { patience: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub phase_id: u8,
    pub objective: Objective,
    pub trainable: Vec<ParameterGroup>,
    pub epochs: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    /// Steps between validation passes; 0 means once per epoch.
    #[serde(default)]
    pub eval_every: usize,
    pub stop: StopCondition,
    #[serde(default)]
    pub seed: u64,
    /// Phase-3 snapshot interval; 10% of the phase's steps when absent.
    #[serde(default)]
    pub snapshot_every: Option<usize>,
}

impl PhasePlan {
    pub fn phase1() -> Self {
        Self {
            phase_id: 1,
            objective: Objective::StoryEnding,
            trainable: vec![ParameterGroup::Encoder, ParameterGroup::DecoderBase, ParameterGroup::LmHead],
            epochs: 3,
            max_steps: None,
            optimizer: AdamConfig::default(),
            batch_size: 16,
            eval_every: 0,
            stop: StopCondition::Fixed,
            seed: 0,
            snapshot_every: None,
        }
    }

    pub fn phase2() -> Self {
        Self {
            phase_id: 2,
            objective: Objective::StyleLm,
            trainable: vec![ParameterGroup::Adapter],
            epochs: 20,
            stop: StopCondition::ValPlateau { patience: 3 },
            ..Self::phase1()
        }
    }

    pub fn phase3() -> Self {
        Self {
            phase_id: 3,
            objective: Objective::StoryEnding,
            trainable: vec![ParameterGroup::Adapter],
            epochs: 1,
            ..Self::phase1()
        }
    }

    /// Phase 3 with the encoder trained alongside the adapters.
    pub fn phase3_with_encoder() -> Self {
        Self {
            trainable: vec![ParameterGroup::Adapter, ParameterGroup::Encoder],
            ..Self::phase3()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let groups: BTreeSet<ParameterGroup> = self.trainable.iter().copied().collect();
        let adapter_only: BTreeSet<_> = [ParameterGroup::Adapter].into();
        let ok = match self.phase_id {
            1 => groups.len() == 3 && !groups.contains(&ParameterGroup::Adapter) && self.objective == Objective::StoryEnding,
            2 => groups == adapter_only && self.objective == Objective::StyleLm,
            3 => {
                (groups == adapter_only
                    || groups == [ParameterGroup::Adapter, ParameterGroup::Encoder].into())
                    && self.objective == Objective::StoryEnding
            }
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "phase {} cannot train {:?} with objective {:?}",
                self.phase_id, self.trainable, self.objective
            )));
        }
        if self.batch_size == 0 || (self.epochs == 0 && self.max_steps.is_none()) {
            return Err(Error::Config(format!("phase {} has an empty budget", self.phase_id)));
        }
        if let StopCondition::ValPlateau { patience: 0 } = self.stop {
            return Err(Error::Config("plateau patience must be at least 1".into()));
        }
        self.optimizer.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let by_epochs = self.epochs * self.steps_per_epoch(n);
        self.max_steps.map_or(by_epochs, |m| if self.epochs == 0 { m } else { m.min(by_epochs) })
    }

    pub fn snapshot_interval(&self, n: usize) -> usize {
        self.snapshot_every
            .unwrap_or_else(|| (self.total_steps(n) as f64 * 0.1).round() as usize)
            .max(1)
    }
}

/// Encoded training examples. `sources` is absent for the LM objective.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub sources: Option<Vec<Vec<usize>>>,
    pub targets: Vec<Vec<usize>>,
}

impl TrainData {
    pub fn stories(vocab: &Vocabulary, stories: &[StoryExample]) -> Self {
        let (sources, targets) = stories.iter().map(|s| vocab.encode_story(s)).unzip();
        Self {
            sources: Some(sources),
            targets,
        }
    }

    pub fn captions(vocab: &Vocabulary, captions: &[StyleCaption]) -> Self {
        Self {
            sources: None,
            targets: captions.iter().map(|c| vocab.encode_target(&c.text)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn check(&self, objective: Objective) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("training data is empty".into()));
        }
        match (objective, &self.sources) {
            (Objective::StoryEnding, None) => Err(Error::Data("story objective needs contexts".into())),
            (Objective::StoryEnding, Some(s)) if s.len() != self.targets.len() => {
                Err(Error::Data("contexts and endings differ in count".into()))
            }
            _ => Ok(()),
        }
    }

    fn batch(&self, idx: &[usize], cap: usize) -> (Option<Batch>, Batch) {
        let tgt: Vec<Vec<usize>> = idx.iter().map(|&i| self.targets[i].clone()).collect();
        let src = self
            .sources
            .as_ref()
            .map(|s| pad_tight(&idx.iter().map(|&i| s[i].clone()).collect::<Vec<_>>(), cap));
        (src, pad_tight(&tgt, cap))
    }
}

/// Mean per-token teacher-forcing loss over a data set.
pub fn eval_loss(params: &ModelParams, data: &TrainData, objective: Objective, batch_size: usize) -> Result<f64> {
    data.check(objective)?;
    let cap = params.config.max_positions;
    let (mut total, mut count) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (src, tgt) = data.batch(chunk, cap);
        let n = seq2seq::shift_targets(&tgt)?.1.iter().filter(|l| l.is_some()).count();
        let source = match (&src, objective) {
            (Some(s), Objective::StoryEnding) => Source::Tokens(s),
            _ => Source::Null,
        };
        total += seq2seq::teacher_forcing_loss(params, source, &tgt)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

/// Everything needed to continue a phase where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: Adam,
    pub step: usize,
    pub history: Vec<LossRecord>,
    pub best_val: Option<f64>,
    pub best_store: Option<ParamStore>,
    pub bad_evals: usize,
    pub finished: bool,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: usize,
    adam_step: u64,
    optimizer: AdamConfig,
    history: Vec<LossRecord>,
    best_val: Option<f64>,
    bad_evals: usize,
    finished: bool,
    model: serde_json::Value,
}

const FORMAT_STATE: &str = "STLR1-S";

impl TrainState {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut tensors: Vec<NamedTensor> = self
            .params
            .store
            .entries()
            .iter()
            .map(|e| NamedTensor {
                name: format!("p.{}", e.name),
                ..e.clone()
            })
            .collect();
        tensors.extend(self.adam.export(&self.params.store).into_iter().map(|t| NamedTensor {
            name: format!("o.{}", t.name),
            ..t
        }));
        if let Some(best) = &self.best_store {
            tensors.extend(best.entries().iter().map(|e| NamedTensor {
                name: format!("b.{}", e.name),
                ..e.clone()
            }));
        }
        let meta = StateMeta {
            step: self.step,
            adam_step: self.adam.step,
            optimizer: self.adam.config.clone(),
            history: self.history.clone(),
            best_val: self.best_val,
            bad_evals: self.bad_evals,
            finished: self.finished,
            model: serde_json::json!({
                "config": self.params.config,
                "adapter": self.params.adapter,
            }),
        };
        checkpoint::write_checkpoint_as(dir, FORMAT_STATE, serde_json::to_value(meta)?, &tensors, Dtype::F64)
    }

    /// Restores a state saved for a model shaped like `template`.
    pub fn load(dir: &Path, template: &ModelParams) -> Result<Self> {
        let (manifest, tensors) = checkpoint::read_checkpoint(dir, FORMAT_STATE)
            .map_err(|e| Error::Resume(format!("cannot read training state: {e}")))?;
        let meta: StateMeta = serde_json::from_value(manifest.meta)?;
        let expect = serde_json::json!({"config": template.config, "adapter": template.adapter});
        if meta.model != expect {
            return Err(Error::Resume("saved state belongs to a different model configuration".into()));
        }
        let mut params = template.clone();
        let mut best = template.store.clone();
        let mut has_best = false;
        let mut moments = Vec::new();
        for t in tensors {
            let (tag, name) = t.name.split_once('.').unwrap_or(("", ""));
            let name = name.to_string();
            match tag {
                "p" | "b" => {
                    let store = if tag == "p" { &mut params.store } else { &mut best };
                    has_best |= tag == "b";
                    let i = store
                        .index_of(&name)
                        .ok_or_else(|| Error::Resume(format!("unknown tensor {name} in state")))?;
                    if store.entries()[i].tensor.shape() != t.tensor.shape() {
                        return Err(Error::Resume(format!("shape mismatch for {name}")));
                    }
                    store.entry_mut(i).tensor = t.tensor;
                }
                "o" => moments.push(NamedTensor { name, ..t }),
                _ => return Err(Error::Resume(format!("unexpected entry {}", t.name))),
            }
        }
        let adam = Adam::import(meta.optimizer, meta.adam_step, &params.store, moments)?;
        Ok(Self {
            params,
            adam,
            step: meta.step,
            history: meta.history,
            best_val: meta.best_val,
            best_store: has_best.then_some(best),
            bad_evals: meta.bad_evals,
            finished: meta.finished,
        })
    }
}

pub(crate) fn mix(seed: u64, a: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ a.wrapping_add(0x2545_f491_4f6c_dd1d).rotate_left(17)
}

pub(crate) fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
    order
}

/// Per-step callbacks and an optional early halt for resume testing.
#[derive(Default)]
pub struct LoopControl<'a> {
    /// Called with the step count before any training and after every step.
    pub on_step: Option<&'a mut dyn FnMut(usize, &ModelParams) -> Result<()>>,
    /// Stop (without finishing) once this many steps are done.
    pub halt_after: Option<usize>,
}

/// Runs (or continues) a phase. The returned state is `finished` unless
/// `halt_after` cut it short.
pub fn train_loop(
    plan: &PhasePlan,
    model: &ModelParams,
    train: &TrainData,
    val: &TrainData,
    resume: Option<TrainState>,
    ctl: &mut LoopControl,
) -> Result<TrainState> {
    plan.validate()?;
    train.check(plan.objective)?;
    val.check(plan.objective)?;
    let mask = adapters::set_trainable(model, &plan.trainable)?;
    let groups = mask.groups().clone();
    let round = !model.config.high_precision;
    let cap = model.config.max_positions;

    let mut st = match resume {
        Some(s) => {
            if s.params.store.len() != model.store.len() {
                return Err(Error::Resume("state does not match the model".into()));
            }
            s
        }
        None => {
            let v0 = eval_loss(model, val, plan.objective, plan.batch_size)?;
            TrainState {
                params: model.clone(),
                adam: Adam::new(plan.optimizer.clone(), model.store.len()),
                step: 0,
                history: vec![LossRecord {
                    step: 0,
                    epoch: 0,
                    train_loss: None,
                    val_loss: Some(v0),
                }],
                best_val: Some(v0),
                best_store: matches!(plan.stop, StopCondition::ValPlateau { .. }).then(|| model.store.clone()),
                bad_evals: 0,
                finished: false,
            }
        }
    };
    if st.finished {
        return Ok(st);
    }
    let spe = plan.steps_per_epoch(train.len());
    let total = plan.total_steps(train.len());
    if st.step == 0 {
        if let Some(f) = ctl.on_step.as_mut() {
            f(0, &st.params)?;
        }
    }
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    while st.step < total {
        if ctl.halt_after.is_some_and(|h| st.step >= h) {
            return Ok(st);
        }
        let epoch = st.step / spe;
        if epoch != order_epoch {
            order = epoch_order(plan.seed, epoch, train.len());
            order_epoch = epoch;
        }
        let i = st.step % spe;
        let idx = &order[i * plan.batch_size..((i + 1) * plan.batch_size).min(train.len())];
        let (src, tgt) = train.batch(idx, cap);
        let source = match (&src, plan.objective) {
            (Some(s), Objective::StoryEnding) => Source::Tokens(s),
            _ => Source::Null,
        };
        let mut drop = Dropout::new(st.params.config.dropout, mix(plan.seed ^ 0xd509, st.step as u64));
        let (loss, grads) = loss_and_grads(&st.params, source, &tgt, &groups, &mut drop).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("phase {} step {}: {m}", plan.phase_id, st.step)),
            other => other,
        })?;
        st.adam.update(&mut st.params.store, &grads, round)?;
        st.step += 1;
        let end_of_epoch = st.step % spe == 0;
        let eval_now = st.step == total
            || if plan.eval_every == 0 {
                end_of_epoch
            } else {
                st.step % plan.eval_every == 0
            };
        let mut rec = LossRecord {
            step: st.step,
            epoch: (st.step - 1) / spe,
            train_loss: Some(loss),
            val_loss: None,
        };
        let mut stop = false;
        if eval_now {
            let v = eval_loss(&st.params, val, plan.objective, plan.batch_size)?;
            rec.val_loss = Some(v);
            if let StopCondition::ValPlateau { patience } = plan.stop {
                if st.best_val.is_none_or(|b| v < b) {
                    st.best_val = Some(v);
                    st.best_store = Some(st.params.store.clone());
                    st.bad_evals = 0;
                } else {
                    st.bad_evals += 1;
                    stop = st.bad_evals >= patience;
                }
            }
        }
        st.history.push(rec);
        if let Some(f) = ctl.on_step.as_mut() {
            f(st.step, &st.params)?;
        }
        if stop {
            break;
        }
    }
    if let StopCondition::ValPlateau { .. } = plan.stop {
        if let Some(best) = st.best_store.take() {
            st.params.store = best;
        }
    }
    st.finished = true;
    Ok(st)
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["step", "epoch", "train_loss", "val_loss"])
        .and_then(|_| {
            for r in history {
                let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                w.write_record([r.step.to_string(), r.epoch.to_string(), f(r.train_loss), f(r.val_loss)])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn check_frozen(before: &ModelParams, after: &ModelParams, allowed: &[ParameterGroup]) -> Result<()> {
    let leaked: Vec<_> = changed_groups(&before.store, &after.store)
        .into_iter()
        .filter(|g| !allowed.contains(g))
        .collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("frozen groups changed during training: {leaked:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub params: ModelParams,
    pub history: Vec<LossRecord>,
    /// Validation loss before the first step.
    pub initial_val: f64,
    pub final_val: f64,
    pub steps: usize,
}

impl PhaseOutcome {
    /// `final_val` is the restored best under a plateau stop and the last
    /// evaluation otherwise.
    fn from_state(st: TrainState, params: ModelParams, plan: &PhasePlan) -> Self {
        let initial_val = st.history[0].val_loss.unwrap_or(f64::NAN);
        let last = st.history.iter().rev().find_map(|r| r.val_loss);
        let final_val = match plan.stop {
            StopCondition::ValPlateau { .. } => st.best_val.or(last),
            StopCondition::Fixed => last,
        }
        .unwrap_or(f64::NAN);
        Self {
            params,
            initial_val,
            final_val,
            steps: st.step,
            history: st.history,
        }
    }
}

/// Full fine-tune of a fresh (adapter-free) model on story endings.
pub fn run_phase1(
    plan: &PhasePlan,
    model: &ModelParams,
    train: &TrainData,
    val: &TrainData,
    out: Option<&Path>,
) -> Result<PhaseOutcome> {
    if plan.phase_id != 1 {
        return Err(Error::Config("run_phase1 needs a phase-1 plan".into()));
    }
    if model.store.has_group(ParameterGroup::Adapter) {
        return Err(Error::Config("phase 1 expects a model without adapters".into()));
    }
    let st = train_loop(plan, model, train, val, None, &mut LoopControl::default())?;
    let params = st.params.clone();
    let mut outcome = PhaseOutcome::from_state(st, params, plan);
    outcome.final_val = eval_loss(&outcome.params, val, plan.objective, plan.batch_size)?;
    if let Some(dir) = out {
        seq2seq::save_model(&outcome.params, dir)?;
        write_loss_csv(&dir.join("loss.csv"), &outcome.history)?;
    }
    Ok(outcome)
}

/// Injects adapters into the phase-1 model and trains only them as a style
/// language model. Writes the adapter sidecar when `out` is given.
pub fn run_phase2(
    plan: &PhasePlan,
    base: &ModelParams,
    adapter: &AdapterConfig,
    train: &TrainData,
    val: &TrainData,
    out: Option<&Path>,
) -> Result<PhaseOutcome> {
    if plan.phase_id != 2 {
        return Err(Error::Config("run_phase2 needs a phase-2 plan".into()));
    }
    let injected = adapters::inject_adapters(base, adapter)?;
    let st = train_loop(plan, &injected, train, val, None, &mut LoopControl::default())?;
    check_frozen(&injected, &st.params, &[ParameterGroup::Adapter])?;
    let params = st.params.clone();
    let outcome = PhaseOutcome::from_state(st, params, plan);
    if let Some(dir) = out {
        adapters::save_sidecar(&outcome.params, dir)?;
        write_loss_csv(&dir.join("loss.csv"), &outcome.history)?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct Phase3Outcome {
    pub phase: PhaseOutcome,
    /// `(step, adapter tensors)` at step 0 and every K steps.
    pub snapshots: Vec<(usize, Vec<NamedTensor>)>,
}

/// Retrains the phase-2 adapters on story endings.
pub fn run_phase3(
    plan: &PhasePlan,
    styled: &ModelParams,
    train: &TrainData,
    val: &TrainData,
    out: Option<&Path>,
) -> Result<Phase3Outcome> {
    if plan.phase_id != 3 {
        return Err(Error::Config("run_phase3 needs a phase-3 plan".into()));
    }
    if !styled.store.has_group(ParameterGroup::Adapter) {
        return Err(Error::Shape("phase 3 needs a model with phase-2 adapters".into()));
    }
    let k = plan.snapshot_interval(train.len());
    let mut snapshots = Vec::new();
    let mut on_step = |step: usize, m: &ModelParams| -> Result<()> {
        if step.is_multiple_of(k) {
            snapshots.push((step, m.store.group_entries(ParameterGroup::Adapter).cloned().collect()));
        }
        Ok(())
    };
    let mut ctl = LoopControl {
        on_step: Some(&mut on_step),
        halt_after: None,
    };
    let st = train_loop(plan, styled, train, val, None, &mut ctl)?;
    check_frozen(styled, &st.params, &plan.trainable)?;
    let params = st.params.clone();
    let phase = PhaseOutcome::from_state(st, params, plan);
    if let Some(dir) = out {
        seq2seq::save_model(&phase.params, dir)?;
        adapters::save_sidecar(&phase.params, &dir.join("adapter"))?;
        write_loss_csv(&dir.join("loss.csv"), &phase.history)?;
    }
    Ok(Phase3Outcome { phase, snapshots })
}

/// Model with the adapter tensors of one snapshot swapped in.
pub fn snapshot_model(styled: &ModelParams, tensors: &[NamedTensor]) -> Result<ModelParams> {
    let mut m = styled.clone();
    adapters::load_adapter_tensors(&mut m, tensors.to_vec())?;
    Ok(m)
}

pub fn write_snapshots(dir: &Path, styled: &ModelParams, snapshots: &[(usize, Vec<NamedTensor>)]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (step, tensors) in snapshots {
        let p = dir.join(format!("step_{step:06}"));
        adapters::save_sidecar(&snapshot_model(styled, tensors)?, &p)?;
        out.push(p);
    }
    Ok(out)
}

/// Everything the three phases need.
pub struct LlrInputs<'a> {
    pub model: &'a ModelParams,
    pub adapter: &'a AdapterConfig,
    pub plans: [&'a PhasePlan; 3],
    pub stories_train: &'a TrainData,
    pub stories_val: &'a TrainData,
    pub style_train: &'a TrainData,
    pub style_val: &'a TrainData,
    /// Recorded in the manifest.
    pub data_hashes: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub plan: Option<PhasePlan>,
    pub checkpoint_hash: Option<String>,
    pub completed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LlrManifest {
    pub data_hashes: serde_json::Value,
    pub adapter: Option<AdapterConfig>,
    pub phase1: PhaseEntry,
    pub phase2: PhaseEntry,
    pub phase3: PhaseEntry,
}

impl LlrManifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join("manifest.json");
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&p, e))
    }
}

pub struct LlrResult {
    pub phase1: ModelParams,
    pub phase2: ModelParams,
    pub phase3: ModelParams,
    pub snapshots: Vec<(usize, Vec<NamedTensor>)>,
    pub manifest: LlrManifest,
}

/// Runs the three phases into `dir`, skipping phases the manifest already
/// marks complete. A manifest written for different plans or data is a
/// resume conflict.
pub fn run_llr(inputs: &LlrInputs, dir: &Path) -> Result<LlrResult> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut man = match LlrManifest::load(dir)? {
        Some(m) => {
            if m.data_hashes != inputs.data_hashes || m.adapter.as_ref() != Some(inputs.adapter) {
                return Err(Error::Resume(format!(
                    "{} holds a run with different data or adapters",
                    dir.display()
                )));
            }
            for (e, p) in [&m.phase1, &m.phase2, &m.phase3].into_iter().zip(inputs.plans) {
                if e.completed && e.plan.as_ref() != Some(p) {
                    return Err(Error::Resume(format!("phase {} was run with a different plan", p.phase_id)));
                }
            }
            m
        }
        None => LlrManifest {
            data_hashes: inputs.data_hashes.clone(),
            adapter: Some(inputs.adapter.clone()),
            ..Default::default()
        },
    };
    man.save(dir)?;

    let p1_dir = dir.join("phase1");
    let phase1 = if man.phase1.completed {
        seq2seq::load_model(&p1_dir)?
    } else {
        let o = run_phase1(inputs.plans[0], inputs.model, inputs.stories_train, inputs.stories_val, Some(&p1_dir))?;
        man.phase1 = PhaseEntry {
            plan: Some(inputs.plans[0].clone()),
            checkpoint_hash: Some(checkpoint::checkpoint_hash(&p1_dir)?),
            completed: true,
        };
        man.save(dir)?;
        o.params
    };

    let p2_dir = dir.join("phase2");
    let phase2 = if man.phase2.completed {
        adapters::attach_sidecar(&phase1, &p2_dir)?
    } else {
        let o = run_phase2(
            inputs.plans[1],
            &phase1,
            inputs.adapter,
            inputs.style_train,
            inputs.style_val,
            Some(&p2_dir),
        )?;
        man.phase2 = PhaseEntry {
            plan: Some(inputs.plans[1].clone()),
            checkpoint_hash: Some(checkpoint::checkpoint_hash(&p2_dir)?),
            completed: true,
        };
        man.save(dir)?;
        o.params
    };

    let p3_dir = dir.join("phase3");
    let snap_dir = dir.join("snapshots");
    let (phase3, snapshots) = if man.phase3.completed {
        let p3 = seq2seq::load_model(&p3_dir)?;
        let mut snaps = Vec::new();
        let mut entries: Vec<_> = fs::read_dir(&snap_dir)
            .map_err(|e| Error::io(&snap_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            let step = p
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step_"))
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| Error::Resume(format!("unexpected snapshot {}", p.display())))?;
            let m = adapters::attach_sidecar(&phase1, &p)?;
            snaps.push((step, m.store.group_entries(ParameterGroup::Adapter).cloned().collect()));
        }
        (p3, snaps)
    } else {
        let o = run_phase3(inputs.plans[2], &phase2, inputs.stories_train, inputs.stories_val, Some(&p3_dir))?;
        if snap_dir.exists() {
            fs::remove_dir_all(&snap_dir).map_err(|e| Error::io(&snap_dir, e))?;
        }
        write_snapshots(&snap_dir, &phase2, &o.snapshots)?;
        man.phase3 = PhaseEntry {
            plan: Some(inputs.plans[2].clone()),
            checkpoint_hash: Some(checkpoint::checkpoint_hash(&p3_dir)?),
            completed: true,
        };
        man.save(dir)?;
        (o.phase.params, o.snapshots)
    };
    Ok(LlrResult {
        phase1,
        phase2,
        phase3,
        snapshots,
        manifest: man,
    })
}

/// RIS of the endings each snapshot generates for the validation contexts.
pub fn monitor_forgetting<S: AsRef<str>>(
    styled: &ModelParams,
    snapshots: &[(usize, Vec<NamedTensor>)],
    judge: Option<&StyleJudge>,
    contexts: &[Vec<S>],
    settings: &DecodeSettings,
) -> Result<Vec<(usize, f64)>> {
    let judge = judge.ok_or_else(|| Error::Config("the forgetting monitor needs a style judge".into()))?;
    if snapshots.len() < 2 {
        return Err(Error::Data(format!("the forgetting curve needs at least 2 snapshots, got {}", snapshots.len())));
    }
    let ids: Vec<Vec<usize>> = contexts.iter().map(|c| judge.vocab.encode_context(c)).collect();
    snapshots
        .iter()
        .map(|(step, tensors)| {
            let m = snapshot_model(styled, tensors)?;
            let endings = decoding::generate_batch(&m, &ids, settings)?
                .iter()
                .map(|o| judge.vocab.decode(o))
                .collect::<Result<Vec<_>>>()?;
            Ok((*step, evalsuite::ris(&endings, judge)?))
        })
        .collect()
}

pub fn forgetting_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("step,ris\n");
    for (step, ris) in curve {
        let _ = writeln!(s, "{step},{ris}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterVariant;
    use crate::seq2seq::{init_model, ModelConfig};

    fn toy() -> (ModelParams, TrainData) {
        let cfg = ModelConfig {
            vocab_size: 12,
            model_dim: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            max_positions: 16,
            dropout: 0.1,
            seed: 2,
            high_precision: false,
        };
        let sources = (0..12).map(|i| vec![5 + i % 6, 3, 6 + i % 5]).collect();
        let targets = (0..12).map(|i| vec![1, 5 + i % 6, 2]).collect();
        (
            init_model(&cfg).unwrap(),
            TrainData {
                sources: Some(sources),
                targets,
            },
        )
    }

    fn plan1() -> PhasePlan {
        PhasePlan {
            epochs: 4,
            batch_size: 4,
            optimizer: AdamConfig::with_lr(1e-2),
            ..PhasePlan::phase1()
        }
    }

    #[test]
    fn plan_invariants() {
        assert!(PhasePlan::phase1().validate().is_ok());
        assert!(PhasePlan::phase2().validate().is_ok());
        assert!(PhasePlan::phase3().validate().is_ok());
        assert!(PhasePlan::phase3_with_encoder().validate().is_ok());
        let bad = PhasePlan {
            trainable: vec![ParameterGroup::Adapter, ParameterGroup::LmHead],
            ..PhasePlan::phase2()
        };
        assert!(bad.validate().is_err());
        let p = PhasePlan::phase3();
        assert_eq!(p.total_steps(40), 3);
        assert_eq!(PhasePlan { epochs: 10, ..p }.snapshot_interval(40), 3);
    }

    #[test]
    fn phase1_lowers_val_loss_and_is_deterministic() {
        let (m, d) = toy();
        let a = run_phase1(&plan1(), &m, &d, &d, None).unwrap();
        let b = run_phase1(&plan1(), &m, &d, &d, None).unwrap();
        assert!(a.final_val < a.initial_val);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn resume_reproduces_losses() {
        let (m, d) = toy();
        let full = train_loop(&plan1(), &m, &d, &d, None, &mut LoopControl::default()).unwrap();
        let mut ctl = LoopControl {
            on_step: None,
            halt_after: Some(5),
        };
        let half = train_loop(&plan1(), &m, &d, &d, None, &mut ctl).unwrap();
        assert!(!half.finished);
        let dir = tempfile::tempdir().unwrap();
        half.save(dir.path()).unwrap();
        let back = TrainState::load(dir.path(), &m).unwrap();
        assert_eq!(back, half);
        let done = train_loop(&plan1(), &m, &d, &d, Some(back), &mut LoopControl::default()).unwrap();
        assert_eq!(done.history, full.history);
        assert_eq!(done.params, full.params);
    }

    #[test]
    fn adapter_phases_keep_base_bits_and_snapshot() {
        let (m, d) = toy();
        let base = run_phase1(&plan1(), &m, &d, &d, None).unwrap().params;
        let lm = TrainData {
            sources: None,
            targets: d.targets.clone(),
        };
        let p2 = PhasePlan {
            epochs: 3,
            batch_size: 4,
            optimizer: AdamConfig::with_lr(1e-2),
            ..PhasePlan::phase2()
        };
        let styled = run_phase2(&p2, &base, &AdapterConfig::new(AdapterVariant::Plain, 2), &lm, &lm, None).unwrap();
        let groups: BTreeSet<_> = [ParameterGroup::Adapter].into();
        assert!(styled.params.store.frozen_equal(&adapters::inject_adapters(&base, &AdapterConfig::new(AdapterVariant::Plain, 2)).unwrap().store, &groups));
        let p3 = PhasePlan {
            epochs: 4,
            batch_size: 2,
            snapshot_every: Some(5),
            optimizer: AdamConfig::with_lr(1e-2),
            ..PhasePlan::phase3()
        };
        let o = run_phase3(&p3, &styled.params, &d, &d, None).unwrap();
        assert_eq!(o.snapshots.len(), 24 / 5 + 1);
        assert!(o.phase.params.store.frozen_equal(&styled.params.store, &groups));
    }
}
