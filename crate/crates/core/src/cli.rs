//! Experiment configuration, stage orchestration and the subcommands of the
//! `stlr` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterConfig, AdapterVariant};
use crate::checkpoint::{bytes_hash, checkpoint_hash};
use crate::corpus::{
    self, generate_synthetic, load_grouping, load_story_corpus, load_style_corpus, make_splits, split_story, write_captions,
    write_story_corpus, Splits, StoryExample, StoryFormat, StoryRecord, StyleCaption, SyntheticSpec,
};
use crate::decoding::{self, DecodeSettings, Strategy};
use crate::discbase::{self, CnnConfig};
use crate::evalsuite::{self, EvalInputs, EvalReport};
use crate::judges::{self, ClozeJudge, Cut, Distance, JudgeMetrics, Linkage, Pooling, StyleJudge};
use crate::params::ParameterGroup;
use crate::seq2seq::{self, init_model, ModelConfig, ModelParams};
use crate::textpipe::Vocabulary;
use crate::trainer::{self, LlrInputs, PhasePlan, StopCondition, TrainData};
use crate::{Error, Result};

/// `STLR_REFERENCE_MODE=1` keeps every stage on one thread.
pub fn reference_mode() -> bool {
    std::env::var("STLR_REFERENCE_MODE").is_ok_and(|v| v == "1")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub model_dim: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelShape {
    pub fn desk() -> Self {
        let c = ModelConfig::desk(1, 0);
        Self {
            model_dim: c.model_dim,
            n_enc_layers: c.n_enc_layers,
            n_dec_layers: c.n_dec_layers,
            n_heads: c.n_heads,
            ffn_dim: c.ffn_dim,
            max_positions: c.max_positions,
            dropout: c.dropout,
        }
    }

    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            model_dim: self.model_dim,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_positions: self.max_positions,
            dropout: self.dropout,
            seed,
            high_precision: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSources {
    pub stories: PathBuf,
    pub captions: PathBuf,
    pub grouping: PathBuf,
    #[serde(default)]
    pub story_format: Option<StoryFormat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files(FileSources),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub stories: [f64; 3],
    pub captions: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            stories: [0.8, 0.1, 0.1],
            captions: [0.9, 0.1, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_freq: 1,
            max_size: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phases {
    pub phase1: PhasePlan,
    pub phase2: PhasePlan,
    pub phase3: PhasePlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeConfigs {
    pub style: CnnConfig,
    pub cloze: CnnConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub discriminator: CnnConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfigs {
    #[serde(default)]
    pub fusion: Option<FusionConfig>,
    #[serde(default)]
    pub disc: Option<DiscConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Cap on evaluated test stories; all when absent.
    #[serde(default)]
    pub max_samples: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Target style; phase 2 and the style judge use its captions.
    pub style: String,
    pub data: DataSource,
    #[serde(default)]
    pub splits: SplitConfig,
    #[serde(default)]
    pub vocab: VocabConfig,
    pub model: ModelShape,
    pub adapter: AdapterConfig,
    pub phases: Phases,
    #[serde(default)]
    pub decode: DecodeSettings,
    pub judges: JudgeConfigs,
    #[serde(default)]
    pub baselines: BaselineConfigs,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Small model and budgets that run the whole pipeline in about a minute
    /// on one CPU core.
    pub fn desk(seed: u64) -> Self {
        let plan = |mut p: PhasePlan, lr: f64| {
            p.optimizer.lr = lr;
            p.seed = seed;
            p
        };
        let mut phase1 = plan(PhasePlan::phase1(), 3e-3);
        phase1.epochs = 2;
        let phase2 = plan(PhasePlan::phase2(), 3e-3);
        let mut phase3 = plan(PhasePlan::phase3(), 8e-5);
        phase3.epochs = 0;
        phase3.max_steps = Some(200);
        let cnn = CnnConfig {
            seed,
            ..CnnConfig::default()
        };
        let mut adapter = AdapterConfig::new(AdapterVariant::Plain, 16);
        adapter.seed = seed;
        Self {
            name: "synthetic".into(),
            seed,
            style: "negative".into(),
            data: DataSource::Synthetic(SyntheticSpec::desk_default(seed)),
            splits: SplitConfig::default(),
            vocab: VocabConfig::default(),
            model: ModelShape::desk(),
            adapter,
            phases: Phases { phase1, phase2, phase3 },
            decode: DecodeSettings::default(),
            judges: JudgeConfigs {
                style: cnn.clone(),
                cloze: cnn.clone(),
            },
            baselines: BaselineConfigs {
                fusion: Some(FusionConfig { lambda: 1.0 }),
                disc: Some(DiscConfig {
                    lambda: 1.0,
                    temperature: 1.0,
                    discriminator: cnn,
                }),
            },
            eval: EvalConfig {
                max_samples: None,
                seed,
            },
        }
    }

    /// Full-size hyperparameters for real story and caption files.
    pub fn paper_scale(stories: PathBuf, captions: PathBuf, grouping: PathBuf) -> Self {
        let mut c = Self::desk(0);
        c.name = "paper-scale".into();
        c.data = DataSource::Files(FileSources {
            stories,
            captions,
            grouping,
            story_format: None,
        });
        c.vocab = VocabConfig {
            min_freq: 2,
            max_size: 30000,
        };
        c.model = ModelShape {
            model_dim: 768,
            n_enc_layers: 12,
            n_dec_layers: 12,
            n_heads: 12,
            ffn_dim: 3072,
            max_positions: 512,
            dropout: 0.1,
        };
        c.adapter = AdapterConfig::new(AdapterVariant::Plain, 48);
        c.phases = Phases {
            phase1: PhasePlan::phase1(),
            phase2: PhasePlan::phase2(),
            phase3: PhasePlan::phase3(),
        };
        c.baselines = BaselineConfigs::default();
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn hash(&self) -> Result<String> {
        Ok(bytes_hash(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.style.trim().is_empty() {
            return Err(Error::Config("style must be named".into()));
        }
        for (what, r) in [("stories", self.splits.stories), ("captions", self.splits.captions)] {
            if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 || r.iter().any(|&x| x < 0.0) {
                return Err(Error::Config(format!("{what} split ratios {r:?} must be non-negative and sum to 1")));
            }
        }
        if self.splits.stories[2] == 0.0 {
            return Err(Error::Config("the story test split is empty".into()));
        }
        if self.vocab.max_size <= crate::textpipe::SPECIALS.len() {
            return Err(Error::Config("vocab.max_size leaves no room for words".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if !spec.style_lexicons.contains_key(&self.style) {
                return Err(Error::Config(format!("synthetic spec has no style '{}'", self.style)));
            }
        }
        let probe = self.model.config(self.vocab.max_size, self.seed);
        probe.validate()?;
        self.adapter.validate(&probe)?;
        for (id, p) in [(1, &self.phases.phase1), (2, &self.phases.phase2), (3, &self.phases.phase3)] {
            if p.phase_id != id {
                return Err(Error::Config(format!("phases.phase{id} declares phase_id {}", p.phase_id)));
            }
            p.validate()?;
        }
        self.decode.validate()?;
        if let Some(d) = &self.baselines.disc {
            if d.lambda < 0.0 || d.temperature <= 0.0 {
                return Err(Error::Config("disc baseline needs lambda ≥ 0 and temperature > 0".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Prepared data

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub stories: Splits<StoryExample>,
    /// Captions of every style; filter by `style` where needed.
    pub captions: Splits<StyleCaption>,
    pub hashes: serde_json::Value,
}

impl PreparedData {
    pub fn style_captions(&self, split: &[StyleCaption], style: &str) -> Vec<StyleCaption> {
        split.iter().filter(|c| c.style == style).cloned().collect()
    }

    pub fn test_set(&self, max: Option<usize>) -> (Vec<Vec<String>>, Vec<String>) {
        let n = max.unwrap_or(usize::MAX).min(self.stories.test.len());
        self.stories.test[..n]
            .iter()
            .map(|s| (s.context.clone(), s.ending.clone()))
            .unzip()
    }
}

fn tuple(r: [f64; 3]) -> (f64, f64, f64) {
    (r[0], r[1], r[2])
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn read_captions_file(path: &Path) -> Result<Vec<StyleCaption>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        match (v["text"].as_str(), v["persona"].as_str()) {
            (Some(t), Some(p)) => out.push(StyleCaption {
                text: t.to_string(),
                style: p.to_string(),
            }),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "caption rows need text and persona".into(),
                })
            }
        }
    }
    Ok(out)
}

fn write_prepared(dir: &Path, data: &PreparedData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let st = [&data.stories.train, &data.stories.val, &data.stories.test];
    let ca = [&data.captions.train, &data.captions.val, &data.captions.test];
    for ((name, s), c) in SPLITS.iter().zip(st).zip(ca) {
        let recs: Vec<StoryRecord> = s.iter().map(StoryExample::to_record).collect();
        write_story_corpus(&dir.join(format!("stories_{name}.jsonl")), &recs)?;
        write_captions(&dir.join(format!("captions_{name}.jsonl")), c)?;
    }
    data.vocab.save(&dir.join("vocab.json"))
}

fn hash_prepared(dir: &Path) -> Result<serde_json::Value> {
    let mut m = serde_json::Map::new();
    let mut names: Vec<String> = SPLITS
        .iter()
        .flat_map(|s| [format!("stories_{s}.jsonl"), format!("captions_{s}.jsonl")])
        .collect();
    names.push("vocab.json".into());
    names.sort();
    for n in names {
        let p = dir.join(&n);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        m.insert(n, bytes_hash(&bytes).into());
    }
    Ok(serde_json::Value::Object(m))
}

/// Builds splits and the vocabulary from the configured source and writes
/// them to `dir`.
pub fn prepare(cfg: &ExperimentConfig, dir: &Path) -> Result<PreparedData> {
    let (records, captions) = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let c = generate_synthetic(spec)?;
            corpus::write_synthetic(&dir.join("raw"), &c)?;
            (c.stories, c.captions)
        }
        DataSource::Files(f) => {
            let fmt = f.story_format.unwrap_or_else(|| StoryFormat::from_path(&f.stories));
            let grouping = load_grouping(&f.grouping)?;
            (load_story_corpus(&f.stories, fmt)?, load_style_corpus(&f.captions, &grouping)?.captions)
        }
    };
    if !captions.iter().any(|c| c.style == cfg.style) {
        return Err(Error::Data(format!("no captions carry the style '{}'", cfg.style)));
    }
    let stories: Vec<StoryExample> = records.iter().map(split_story).collect();
    let stories = make_splits(&stories, tuple(cfg.splits.stories), cfg.seed)?;
    let captions = make_splits(&captions, tuple(cfg.splits.captions), cfg.seed ^ 0xca9)?;
    if stories.train.len() < 2 || stories.val.is_empty() || stories.test.len() < 2 {
        return Err(Error::Data("story splits are too small".into()));
    }
    let mut texts: Vec<&str> = stories
        .train
        .iter()
        .flat_map(|s| s.context.iter().map(String::as_str).chain([s.ending.as_str()]))
        .collect();
    texts.extend(captions.train.iter().map(|c| c.text.as_str()));
    let vocab = Vocabulary::build(&texts, cfg.vocab.min_freq, cfg.vocab.max_size)?;
    let mut data = PreparedData {
        vocab,
        stories,
        captions,
        hashes: serde_json::Value::Null,
    };
    write_prepared(dir, &data)?;
    data.hashes = hash_prepared(dir)?;
    Ok(data)
}

pub fn load_prepared(dir: &Path) -> Result<PreparedData> {
    let mut st = Vec::new();
    let mut ca = Vec::new();
    for name in SPLITS {
        let recs = load_story_corpus(&dir.join(format!("stories_{name}.jsonl")), StoryFormat::Jsonl)?;
        st.push(recs.iter().map(split_story).collect::<Vec<_>>());
        ca.push(read_captions_file(&dir.join(format!("captions_{name}.jsonl")))?);
    }
    let (mut st, mut ca) = (st.into_iter(), ca.into_iter());
    let mut next = || (st.next().unwrap_or_default(), ca.next().unwrap_or_default());
    let ((s_tr, c_tr), (s_va, c_va), (s_te, c_te)) = (next(), next(), next());
    Ok(PreparedData {
        vocab: Vocabulary::load(&dir.join("vocab.json"))?,
        stories: Splits {
            train: s_tr,
            val: s_va,
            test: s_te,
        },
        captions: Splits {
            train: c_tr,
            val: c_va,
            test: c_te,
        },
        hashes: hash_prepared(dir)?,
    })
}

pub struct PhaseData {
    pub stories_train: TrainData,
    pub stories_val: TrainData,
    pub style_train: TrainData,
    pub style_val: TrainData,
}

pub fn phase_data(cfg: &ExperimentConfig, data: &PreparedData) -> Result<PhaseData> {
    let st = data.style_captions(&data.captions.train, &cfg.style);
    let mut sv = data.style_captions(&data.captions.val, &cfg.style);
    if st.is_empty() {
        return Err(Error::Data(format!("no training captions for style '{}'", cfg.style)));
    }
    if sv.is_empty() {
        sv = st.clone();
    }
    Ok(PhaseData {
        stories_train: TrainData::stories(&data.vocab, &data.stories.train),
        stories_val: TrainData::stories(&data.vocab, &data.stories.val),
        style_train: TrainData::captions(&data.vocab, &st),
        style_val: TrainData::captions(&data.vocab, &sv),
    })
}

pub fn fresh_model(cfg: &ExperimentConfig, data: &PreparedData) -> Result<ModelParams> {
    init_model(&cfg.model.config(data.vocab.len(), cfg.seed))
}

// ---------------------------------------------------------------------------
// Judges

#[derive(Clone, Debug)]
pub struct Judges {
    pub style: StyleJudge,
    pub cloze: ClozeJudge,
    pub style_hash: String,
    pub cloze_hash: String,
    pub metrics: BTreeMap<String, JudgeMetrics>,
}

/// Style judge: target-style captions against human story endings. Cloze
/// judge: true against borrowed endings.
pub fn train_judges(cfg: &ExperimentConfig, data: &PreparedData, dir: &Path) -> Result<Judges> {
    let pos: Vec<String> = data
        .style_captions(&data.captions.train, &cfg.style)
        .into_iter()
        .map(|c| c.text)
        .collect();
    let neg: Vec<&str> = data.stories.train.iter().map(|s| s.ending.as_str()).collect();
    let (style, sm) = judges::train_style_judge(&cfg.style, &pos, &neg, &data.vocab, &cfg.judges.style)?;
    let (cloze, cm) = judges::train_cloze_judge(&data.stories.train, &data.vocab, &cfg.judges.cloze)?;
    style.save(&dir.join("style"))?;
    cloze.save(&dir.join("cloze"))?;
    let metrics: BTreeMap<String, JudgeMetrics> = [("cloze".to_string(), cm), ("style".to_string(), sm)].into();
    let p = dir.join("metrics.json");
    fs::write(&p, serde_json::to_string_pretty(&metrics)? + "\n").map_err(|e| Error::io(&p, e))?;
    load_judges(dir)
}

pub fn load_judges(dir: &Path) -> Result<Judges> {
    let p = dir.join("metrics.json");
    let metrics = match fs::read_to_string(&p) {
        Ok(t) => serde_json::from_str(&t)?,
        Err(_) => BTreeMap::new(),
    };
    Ok(Judges {
        style: StyleJudge::load(&dir.join("style"))?,
        cloze: ClozeJudge::load(&dir.join("cloze"))?,
        style_hash: checkpoint_hash(&dir.join("style"))?,
        cloze_hash: checkpoint_hash(&dir.join("cloze"))?,
        metrics,
    })
}

// ---------------------------------------------------------------------------
// Generation and evaluation

pub fn generate_endings<S: AsRef<str>>(
    model: &ModelParams,
    vocab: &Vocabulary,
    contexts: &[Vec<S>],
    settings: &DecodeSettings,
) -> Result<Vec<String>> {
    let ids: Vec<Vec<usize>> = contexts.iter().map(|c| vocab.encode_context(c)).collect();
    decoding::generate_batch(model, &ids, settings)?
        .iter()
        .map(|o| vocab.decode(o))
        .collect()
}

pub fn fusion_endings<S: AsRef<str>>(
    s2s: &ModelParams,
    lm: &ModelParams,
    vocab: &Vocabulary,
    contexts: &[Vec<S>],
    max_new_tokens: usize,
    lambda: f64,
) -> Result<Vec<String>> {
    let ids: Vec<Vec<usize>> = contexts.iter().map(|c| vocab.encode_context(c)).collect();
    decoding::fusion_generate(s2s, lm, &ids, max_new_tokens, lambda)?
        .iter()
        .map(|o| vocab.decode(o))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndingRow {
    pub context: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub ending: String,
}

pub fn write_endings(path: &Path, rows: &[EndingRow]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_endings(path: &Path) -> Result<Vec<EndingRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Contexts from JSONL rows holding either `context` (4 sentences) or
/// `sentences` (5, the last taken as reference).
pub fn read_contexts(path: &Path) -> Result<Vec<(Vec<String>, Option<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let err = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m,
        };
        let v: serde_json::Value = serde_json::from_str(l).map_err(|e| err(e.to_string()))?;
        let strings = |k: &str| -> Option<Vec<String>> {
            v.get(k)?.as_array()?.iter().map(|s| s.as_str().map(str::to_string)).collect()
        };
        if let Some(c) = strings("context") {
            let reference = v
                .get("reference")
                .or_else(|| v.get("ending"))
                .and_then(|e| e.as_str())
                .map(str::to_string);
            out.push((c, reference));
        } else if let Some(s) = strings("sentences") {
            let ex = split_story(&StoryRecord::new(&s).map_err(|e| err(e.to_string()))?);
            out.push((ex.context, Some(ex.ending)));
        } else {
            return Err(err("rows need a context or sentences array".into()));
        }
    }
    Ok(out)
}

/// The models of the results table, keyed by display name.
pub const ENCDEC: &str = "encoder-decoder";
pub const STAGE2: &str = "stage2";
pub const LLR: &str = "llr";
pub const FUSION: &str = "s2s+lm";
pub const DISC: &str = "disc";

fn map_models<F>(names: &[&str], f: F) -> Result<Vec<Vec<String>>>
where
    F: Fn(&str) -> Result<Vec<String>> + Sync,
{
    if reference_mode() || names.len() < 2 {
        return names.iter().map(|n| f(n)).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = names.iter().map(|n| s.spawn(|| f(n))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numeric("generation thread panicked".into()))))
            .collect()
    })
}

pub struct ModelSet<'a> {
    pub phase1: &'a ModelParams,
    pub phase2: &'a ModelParams,
    pub phase3: &'a ModelParams,
    pub disc: Option<&'a ModelParams>,
}

/// Decodes the test contexts with every model in the set.
pub fn generate_all(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    models: &ModelSet,
    contexts: &[Vec<String>],
) -> Result<BTreeMap<String, Vec<String>>> {
    let mut names = vec![ENCDEC, STAGE2, LLR];
    if cfg.baselines.fusion.is_some() {
        names.push(FUSION);
    }
    if models.disc.is_some() {
        names.push(DISC);
    }
    let run = |name: &str| -> Result<Vec<String>> {
        match name {
            ENCDEC => generate_endings(models.phase1, vocab, contexts, &cfg.decode),
            STAGE2 => generate_endings(models.phase2, vocab, contexts, &cfg.decode),
            LLR => generate_endings(models.phase3, vocab, contexts, &cfg.decode),
            FUSION => {
                let lambda = cfg.baselines.fusion.as_ref().map_or(1.0, |f| f.lambda);
                fusion_endings(models.phase1, models.phase2, vocab, contexts, cfg.decode.max_new_tokens, lambda)
            }
            _ => generate_endings(models.disc.expect("disc model"), vocab, contexts, &cfg.decode),
        }
    };
    let outs = map_models(&names, run)?;
    Ok(names.iter().map(|n| n.to_string()).zip(outs).collect())
}

/// One report per model; the encoder-decoder is the RBAE baseline.
pub fn evaluate_all(
    cfg: &ExperimentConfig,
    judges: &Judges,
    contexts: &[Vec<String>],
    references: &[String],
    endings: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<EvalReport>> {
    let config_hash = cfg.hash()?;
    let baseline = endings
        .get(ENCDEC)
        .ok_or_else(|| Error::Data("encoder-decoder endings are missing".into()))?;
    let order = [ENCDEC, FUSION, DISC, STAGE2, LLR];
    let mut out = Vec::new();
    for name in order {
        let Some(e) = endings.get(name) else { continue };
        let mut r = evalsuite::full_report(&EvalInputs {
            model: name,
            contexts,
            endings: e,
            baseline_endings: (name != ENCDEC).then_some(baseline.as_slice()),
            references,
            style_judge: &judges.style,
            cloze_judge: &judges.cloze,
            style_judge_hash: &judges.style_hash,
            cloze_judge_hash: &judges.cloze_hash,
            config_hash: &config_hash,
            seed: cfg.eval.seed,
        })?;
        if name == STAGE2 || name == LLR {
            r.adapter = Some(cfg.adapter.variant.to_string());
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config_hash: String,
    pub style: String,
    pub adapter: String,
    pub judges: BTreeMap<String, JudgeMetrics>,
    pub models: Vec<EvalReport>,
    pub forgetting: Vec<(usize, f64)>,
}

impl RunReport {
    pub fn model(&self, name: &str) -> Option<&EvalReport> {
        self.models.iter().find(|r| r.model == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn quadrants_csv(reports: &[EvalReport]) -> Result<String> {
    let rows: Vec<&EvalReport> = reports.iter().filter(|r| r.adapter.is_some() && r.model != STAGE2).collect();
    if rows.is_empty() {
        return Err(Error::Data("no adapter model reports to tabulate".into()));
    }
    let mut s = String::from("adapter_type,q_tt,q_tf,q_ft,q_ff\n");
    for r in rows {
        let q = r.quadrants;
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.adapter.as_deref().unwrap_or_default(),
            q.tt,
            q.tf,
            q.ft,
            q.ff
        ));
    }
    Ok(s)
}

// ---------------------------------------------------------------------------
// The full run

pub const STAGES: [&str; 5] = ["prepare", "llr", "judges", "baselines", "evaluate"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct StageLog {
    config_hash: String,
    completed: Vec<String>,
}

impl StageLog {
    fn path(out: &Path) -> PathBuf {
        out.join("stages.json")
    }

    fn done(&self, stage: &str) -> bool {
        self.completed.iter().any(|s| s == stage)
    }

    fn mark(&mut self, out: &Path, stage: &str) -> Result<()> {
        if !self.done(stage) {
            self.completed.push(stage.to_string());
        }
        let p = Self::path(out);
        fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&p, e))
    }
}

/// What `run` will do, one line per stage.
pub fn stage_plan(cfg: &ExperimentConfig, out: &Path) -> Vec<String> {
    let p1 = &cfg.phases.phase1;
    let p2 = &cfg.phases.phase2;
    let p3 = &cfg.phases.phase3;
    let budget = |p: &PhasePlan| match (p.max_steps, &p.stop) {
        (Some(m), _) if p.epochs == 0 => format!("{m} steps"),
        (_, StopCondition::ValPlateau { patience }) => format!("≤{} epochs, plateau patience {patience}", p.epochs),
        _ => format!("{} epochs", p.epochs),
    };
    let mut lines = vec![
        format!("prepare    -> {}", out.join("data").display()),
        format!("phase1     -> {} ({}, lr {})", out.join("phase1").display(), budget(p1), p1.optimizer.lr),
        format!(
            "phase2     -> {} ({} adapter b={}, {}, lr {})",
            out.join("phase2").display(),
            cfg.adapter.variant,
            cfg.adapter.bottleneck,
            budget(p2),
            p2.optimizer.lr
        ),
        format!("phase3     -> {} ({}, lr {})", out.join("phase3").display(), budget(p3), p3.optimizer.lr),
        format!("judges     -> {}", out.join("judges").display()),
    ];
    if cfg.baselines.disc.is_some() {
        lines.push(format!("baselines  -> {}", out.join("baselines/disc").display()));
    }
    lines.push(format!("evaluate   -> {}", out.join("report.json").display()));
    lines
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub dir: PathBuf,
}

/// prepare → phase 1-3 → judges → baselines → evaluate, resuming from the
/// stages recorded in `stages.json`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hash = cfg.hash()?;
    let mut log = match fs::read_to_string(StageLog::path(out)) {
        Ok(t) => {
            let l: StageLog = serde_json::from_str(&t)?;
            if l.config_hash != hash {
                return Err(Error::Resume(format!("{} was started with a different config", out.display())));
            }
            l
        }
        Err(_) => StageLog {
            config_hash: hash,
            completed: Vec::new(),
        },
    };
    let cp = out.join("config.json");
    fs::write(&cp, cfg.to_json()?).map_err(|e| Error::io(&cp, e))?;

    let data_dir = out.join("data");
    let data = if log.done("prepare") {
        load_prepared(&data_dir)?
    } else {
        let d = prepare(cfg, &data_dir)?;
        log.mark(out, "prepare")?;
        d
    };
    let pd = phase_data(cfg, &data)?;
    let model = fresh_model(cfg, &data)?;
    let llr = trainer::run_llr(
        &LlrInputs {
            model: &model,
            adapter: &cfg.adapter,
            plans: [&cfg.phases.phase1, &cfg.phases.phase2, &cfg.phases.phase3],
            stories_train: &pd.stories_train,
            stories_val: &pd.stories_val,
            style_train: &pd.style_train,
            style_val: &pd.style_val,
            data_hashes: data.hashes.clone(),
        },
        out,
    )?;
    log.mark(out, "llr")?;

    let judge_dir = out.join("judges");
    let judges = if log.done("judges") {
        load_judges(&judge_dir)?
    } else {
        let j = train_judges(cfg, &data, &judge_dir)?;
        log.mark(out, "judges")?;
        j
    };

    let disc_dir = out.join("baselines").join("disc");
    let disc = match &cfg.baselines.disc {
        None => None,
        Some(_) if log.done("baselines") => Some(seq2seq::load_model(&disc_dir)?),
        Some(d) => {
            let m = train_disc(cfg, d, &data, &pd, &disc_dir)?;
            log.mark(out, "baselines")?;
            Some(m)
        }
    };

    let report_path = out.join("report.json");
    if log.done("evaluate") {
        return Ok(RunOutcome {
            report: RunReport::load(&report_path)?,
            dir: out.to_path_buf(),
        });
    }
    let (contexts, references) = data.test_set(cfg.eval.max_samples);
    let endings = generate_all(
        cfg,
        &data.vocab,
        &ModelSet {
            phase1: &llr.phase1,
            phase2: &llr.phase2,
            phase3: &llr.phase3,
            disc: disc.as_ref(),
        },
        &contexts,
    )?;
    let end_dir = out.join("endings");
    fs::create_dir_all(&end_dir).map_err(|e| Error::io(&end_dir, e))?;
    for (name, e) in &endings {
        let rows: Vec<EndingRow> = contexts
            .iter()
            .zip(&references)
            .zip(e)
            .map(|((c, r), e)| EndingRow {
                context: c.clone(),
                reference: Some(r.clone()),
                ending: e.clone(),
            })
            .collect();
        write_endings(&end_dir.join(format!("{name}.jsonl")), &rows)?;
    }
    let reports = evaluate_all(cfg, &judges, &contexts, &references, &endings)?;
    let val_contexts: Vec<Vec<String>> = data.stories.val.iter().map(|s| s.context.clone()).collect();
    let forgetting = trainer::monitor_forgetting(&llr.phase2, &llr.snapshots, Some(&judges.style), &val_contexts, &cfg.decode)?;
    write_text(&out.join("forgetting.csv"), &trainer::forgetting_csv(&forgetting))?;
    write_text(&out.join("quadrants.csv"), &quadrants_csv(&reports)?)?;
    write_text(&out.join("table.csv"), &evalsuite::comparison_csv(&reports)?)?;
    write_text(&out.join("table.md"), &evalsuite::comparison_markdown(&reports))?;
    let report = RunReport {
        name: cfg.name.clone(),
        config_hash: cfg.hash()?,
        style: cfg.style.clone(),
        adapter: cfg.adapter.variant.to_string(),
        judges: judges.metrics.clone(),
        models: reports,
        forgetting,
    };
    write_text(&report_path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    log.mark(out, "evaluate")?;
    Ok(RunOutcome {
        report,
        dir: out.to_path_buf(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fresh generator trained on story endings plus a frozen style
/// discriminator's loss, with the phase-1 budget.
pub fn train_disc(
    cfg: &ExperimentConfig,
    d: &DiscConfig,
    data: &PreparedData,
    pd: &PhaseData,
    dir: &Path,
) -> Result<ModelParams> {
    let pos: Vec<Vec<usize>> = pd.style_train.targets.clone();
    let neg: Vec<Vec<usize>> = data.stories.train.iter().map(|s| data.vocab.encode_target(&s.ending)).collect();
    let disc = discbase::train_discriminator(&pos, &neg, &d.discriminator, data.vocab.len())?;
    let model = fresh_model(cfg, data)?;
    let (params, steps) = discbase::train_disc_baseline(&cfg.phases.phase1, &model, &pd.stories_train, &disc.cnn, d.lambda, d.temperature)?;
    seq2seq::save_model(&params, dir)?;
    disc.cnn.save(&dir.join("discriminator"), "discriminator", serde_json::json!({"heldout_accuracy": disc.heldout_accuracy}))?;
    let mut s = String::from("step,total,teacher_forcing,disc\n");
    for r in &steps {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.total, r.teacher_forcing, r.disc));
    }
    write_text(&dir.join("loss.csv"), &s)?;
    Ok(params)
}

// ---------------------------------------------------------------------------
// Adapter comparison

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub adapter_type: String,
    pub report: EvalReport,
}

/// Phase 1 once, then phases 2-3 and evaluation per adapter variant.
pub fn adapter_sweep(cfg: &ExperimentConfig, variants: &[AdapterVariant], out: &Path) -> Result<Vec<VariantRow>> {
    cfg.validate()?;
    let data = prepare(cfg, &out.join("data"))?;
    let pd = phase_data(cfg, &data)?;
    let model = fresh_model(cfg, &data)?;
    let p1 = trainer::run_phase1(&cfg.phases.phase1, &model, &pd.stories_train, &pd.stories_val, Some(&out.join("phase1")))?;
    let judges = train_judges(cfg, &data, &out.join("judges"))?;
    let (contexts, references) = data.test_set(cfg.eval.max_samples);
    let baseline = generate_endings(&p1.params, &data.vocab, &contexts, &cfg.decode)?;
    let mut rows = Vec::new();
    for &v in variants {
        let mut ad = cfg.adapter.clone();
        ad.variant = v;
        let vdir = out.join(v.as_str());
        let p2 = trainer::run_phase2(&cfg.phases.phase2, &p1.params, &ad, &pd.style_train, &pd.style_val, Some(&vdir.join("phase2")))?;
        let p3 = trainer::run_phase3(&cfg.phases.phase3, &p2.params, &pd.stories_train, &pd.stories_val, Some(&vdir.join("phase3")))?;
        let endings = generate_endings(&p3.phase.params, &data.vocab, &contexts, &cfg.decode)?;
        let mut r = evalsuite::full_report(&EvalInputs {
            model: LLR,
            contexts: &contexts,
            endings: &endings,
            baseline_endings: Some(&baseline),
            references: &references,
            style_judge: &judges.style,
            cloze_judge: &judges.cloze,
            style_judge_hash: &judges.style_hash,
            cloze_judge_hash: &judges.cloze_hash,
            config_hash: &cfg.hash()?,
            seed: cfg.eval.seed,
        })?;
        r.adapter = Some(v.to_string());
        rows.push(VariantRow {
            adapter_type: v.to_string(),
            report: r,
        });
    }
    write_text(&out.join("variants.csv"), &variants_csv(&rows))?;
    let reports: Vec<EvalReport> = rows.iter().map(|r| r.report.clone()).collect();
    write_text(&out.join("quadrants.csv"), &quadrants_csv(&reports)?)?;
    Ok(rows)
}

pub fn variants_csv(rows: &[VariantRow]) -> String {
    let mut s = String::from("adapter_type,bleu1,cider,rougeL,ris,rbae,rbar\n");
    for r in rows {
        let e = &r.report;
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{},{:.4}\n",
            r.adapter_type,
            e.bleu1,
            e.cider,
            e.rouge_l,
            e.ris,
            e.rbae.map_or("NA".to_string(), |x| format!("{x:.4}")),
            e.rbar
        ));
    }
    s
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Parser, Debug)]
#[command(name = "stlr", about = "Stylistic story-ending generation with adapter relearning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct ConfigData {
    /// Experiment config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Prepared data directory (from prepare-data or run).
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum BaselineKind {
    /// Generator trained with teacher forcing plus a style discriminator loss.
    Disc {
        #[command(flatten)]
        io: ConfigData,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print a ready-made experiment config.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        profile: Profile,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split story and caption files and build the vocabulary.
    PrepareData {
        #[arg(long)]
        stories: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        grouping: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config supplying style, split ratios and vocabulary limits.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic corpus from a SyntheticSpec JSON file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full fine-tune of a fresh model on story endings.
    TrainPhase1 {
        #[command(flatten)]
        io: ConfigData,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapter-only style language modelling on the phase-1 model.
    TrainPhase2 {
        #[command(flatten)]
        io: ConfigData,
        /// Phase-1 checkpoint.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapter-only relearning of story endings, with snapshots.
    TrainPhase3 {
        #[command(flatten)]
        io: ConfigData,
        /// Phase-1 checkpoint.
        #[arg(long)]
        base: PathBuf,
        /// Phase-2 adapter sidecar.
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train the encoder together with the adapters.
        #[arg(long)]
        also_train_encoder: bool,
    },
    /// All three phases into one directory, resuming from its manifest.
    TrainLlr {
        #[command(flatten)]
        io: ConfigData,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a comparison baseline.
    #[command(subcommand)]
    TrainBaseline(BaselineKind),
    /// Style judge and cloze judge used by evaluation.
    TrainJudges {
        #[command(flatten)]
        io: ConfigData,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode endings for a JSONL file of contexts.
    Generate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        /// Label recorded for the adapter's style.
        #[arg(long)]
        style: Option<String>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// greedy, beam:K or topk:K:TEMPERATURE
        #[arg(long, default_value = "greedy")]
        strategy: String,
        #[arg(long, default_value_t = 32)]
        max_new_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score an endings file against references and a baseline.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        judges: PathBuf,
        #[arg(long)]
        endings: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Results table from report files.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forgetting curve and quadrant tables for an experiment directory.
    PlotData {
        #[arg(long)]
        exp: PathBuf,
    },
    /// Persona embeddings and agglomerative clustering.
    ClusterStyles {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value = "average")]
        linkage: LinkageArg,
        #[arg(long, value_enum, default_value = "cosine")]
        distance: DistanceArg,
        #[arg(long, value_enum, default_value = "head-rows")]
        pooling: PoolingArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Phase 1 once, then phases 2-3 for each adapter variant.
    AdapterSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// The whole pipeline into one experiment directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LinkageArg {
    Single,
    Complete,
    Average,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DistanceArg {
    Cosine,
    Euclidean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolingArg {
    HeadRows,
    MeanCaption,
}

pub fn parse_strategy(s: &str) -> Result<Strategy> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::Config(format!("unknown decoding strategy '{s}'"));
    let num = |x: &str| x.parse::<usize>().map_err(|_| bad());
    match parts.as_slice() {
        ["greedy"] => Ok(Strategy::Greedy),
        ["beam", k] => Ok(Strategy::Beam { k: num(k)? }),
        ["topk", k, t] => Ok(Strategy::TopK {
            k: num(k)?,
            temperature: t.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

fn load_cd(io: &ConfigData) -> Result<(ExperimentConfig, PreparedData)> {
    Ok((ExperimentConfig::load(&io.config)?, load_prepared(&io.data)?))
}

fn say(line: impl AsRef<str>) {
    println!("{}", line.as_ref());
}

/// Executes one parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { profile, seed } => {
            let c = match profile {
                Profile::Desk => ExperimentConfig::desk(seed),
                Profile::Paper => ExperimentConfig::paper_scale(
                    "data/stories.csv".into(),
                    "data/captions.jsonl".into(),
                    "data/grouping.json".into(),
                ),
            };
            print!("{}", c.to_json()?);
        }
        Command::PrepareData {
            stories,
            captions,
            grouping,
            out,
            config,
        } => {
            let groups = load_grouping(&grouping)?;
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => {
                    let mut c = ExperimentConfig::desk(0);
                    c.style = groups
                        .keys()
                        .next()
                        .cloned()
                        .ok_or_else(|| Error::Config("the grouping file names no styles".into()))?;
                    c
                }
            };
            if !groups.contains_key(&cfg.style) {
                return Err(Error::Config(format!("the grouping file has no style '{}'", cfg.style)));
            }
            cfg.data = DataSource::Files(FileSources {
                stories,
                captions,
                grouping,
                story_format: None,
            });
            let d = prepare(&cfg, &out)?;
            say(format!(
                "{} train / {} val / {} test stories, {} captions, vocabulary {}",
                d.stories.train.len(),
                d.stories.val.len(),
                d.stories.test.len(),
                d.captions.train.len() + d.captions.val.len() + d.captions.test.len(),
                d.vocab.len()
            ));
        }
        Command::Synth { spec, out } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let s: SyntheticSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let c = generate_synthetic(&s)?;
            corpus::write_synthetic(&out, &c)?;
            say(format!("{} stories, {} captions -> {}", c.stories.len(), c.captions.len(), out.display()));
        }
        Command::TrainPhase1 { io, out } => {
            let (cfg, data) = load_cd(&io)?;
            let pd = phase_data(&cfg, &data)?;
            let o = trainer::run_phase1(&cfg.phases.phase1, &fresh_model(&cfg, &data)?, &pd.stories_train, &pd.stories_val, Some(&out))?;
            say(format!("phase 1: val loss {:.4} -> {:.4} in {} steps", o.initial_val, o.final_val, o.steps));
        }
        Command::TrainPhase2 { io, base, out } => {
            let (cfg, data) = load_cd(&io)?;
            let pd = phase_data(&cfg, &data)?;
            let b = seq2seq::load_model(&base)?;
            let o = trainer::run_phase2(&cfg.phases.phase2, &b, &cfg.adapter, &pd.style_train, &pd.style_val, Some(&out))?;
            say(format!("phase 2: style LM val loss {:.4} -> {:.4} in {} steps", o.initial_val, o.final_val, o.steps));
        }
        Command::TrainPhase3 {
            io,
            base,
            adapter,
            out,
            also_train_encoder,
        } => {
            let (cfg, data) = load_cd(&io)?;
            let pd = phase_data(&cfg, &data)?;
            let styled = adapters::attach_sidecar(&seq2seq::load_model(&base)?, &adapter)?;
            let mut plan = cfg.phases.phase3.clone();
            if also_train_encoder {
                plan.trainable = vec![ParameterGroup::Adapter, ParameterGroup::Encoder];
            }
            let o = trainer::run_phase3(&plan, &styled, &pd.stories_train, &pd.stories_val, Some(&out))?;
            let snaps = trainer::write_snapshots(&out.join("snapshots"), &styled, &o.snapshots)?;
            say(format!(
                "phase 3: val loss {:.4} -> {:.4} in {} steps, {} snapshots",
                o.phase.initial_val,
                o.phase.final_val,
                o.phase.steps,
                snaps.len()
            ));
        }
        Command::TrainLlr { io, out } => {
            let (cfg, data) = load_cd(&io)?;
            let pd = phase_data(&cfg, &data)?;
            let r = trainer::run_llr(
                &LlrInputs {
                    model: &fresh_model(&cfg, &data)?,
                    adapter: &cfg.adapter,
                    plans: [&cfg.phases.phase1, &cfg.phases.phase2, &cfg.phases.phase3],
                    stories_train: &pd.stories_train,
                    stories_val: &pd.stories_val,
                    style_train: &pd.style_train,
                    style_val: &pd.style_val,
                    data_hashes: data.hashes.clone(),
                },
                &out,
            )?;
            say(format!("three phases done, {} snapshots in {}", r.snapshots.len(), out.display()));
        }
        Command::TrainBaseline(BaselineKind::Disc { io, out }) => {
            let (cfg, data) = load_cd(&io)?;
            let d = cfg
                .baselines
                .disc
                .clone()
                .ok_or_else(|| Error::Config("config has no baselines.disc section".into()))?;
            let pd = phase_data(&cfg, &data)?;
            train_disc(&cfg, &d, &data, &pd, &out)?;
            say(format!("discriminator baseline -> {}", out.display()));
        }
        Command::TrainJudges { io, out } => {
            let (cfg, data) = load_cd(&io)?;
            let j = train_judges(&cfg, &data, &out)?;
            for (k, m) in &j.metrics {
                say(format!("{k} judge: held-out accuracy {:.3} ({} train)", m.heldout_accuracy, m.n_train));
                for w in &m.warnings {
                    eprintln!("warning: {k} judge: {w}");
                }
            }
        }
        Command::Generate {
            base,
            adapter,
            vocab,
            style,
            input,
            out,
            strategy,
            max_new_tokens,
            seed,
        } => {
            let model = decoding::load_generator(&base, adapter.as_deref())?;
            let vocab = Vocabulary::load(&vocab)?;
            if vocab.len() != model.config.vocab_size {
                return Err(Error::Shape(format!(
                    "vocabulary has {} entries, model expects {}",
                    vocab.len(),
                    model.config.vocab_size
                )));
            }
            let settings = DecodeSettings {
                strategy: parse_strategy(&strategy)?,
                max_new_tokens,
                seed,
            };
            settings.validate()?;
            let rows = read_contexts(&input)?;
            let contexts: Vec<Vec<String>> = rows.iter().map(|r| r.0.clone()).collect();
            let endings = generate_endings(&model, &vocab, &contexts, &settings)?;
            let out_rows: Vec<EndingRow> = rows
                .into_iter()
                .zip(endings)
                .map(|((context, reference), ending)| EndingRow {
                    context,
                    reference,
                    ending,
                })
                .collect();
            write_endings(&out, &out_rows)?;
            let label = style.unwrap_or_else(|| if adapter.is_some() { "styled".into() } else { "none".into() });
            say(format!("{} endings ({label}) -> {}", out_rows.len(), out.display()));
        }
        Command::Evaluate {
            config,
            judges: jdir,
            endings,
            baseline,
            model,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let j = load_judges(&jdir)?;
            let rows = read_endings(&endings)?;
            let contexts: Vec<Vec<String>> = rows.iter().map(|r| r.context.clone()).collect();
            let refs: Vec<String> = rows
                .iter()
                .map(|r| r.reference.clone().ok_or_else(|| Error::Data("endings rows need a reference".into())))
                .collect::<Result<_>>()?;
            let ends: Vec<String> = rows.iter().map(|r| r.ending.clone()).collect();
            let base: Option<Vec<String>> = match baseline {
                Some(p) => Some(read_endings(&p)?.into_iter().map(|r| r.ending).collect()),
                None => None,
            };
            let report = evalsuite::full_report(&EvalInputs {
                model: &model,
                contexts: &contexts,
                endings: &ends,
                baseline_endings: base.as_deref(),
                references: &refs,
                style_judge: &j.style,
                cloze_judge: &j.cloze,
                style_judge_hash: &j.style_hash,
                cloze_judge_hash: &j.cloze_hash,
                config_hash: &cfg.hash()?,
                seed: cfg.eval.seed,
            })?;
            report.save(&out)?;
            print!("{}", evalsuite::comparison_markdown(std::slice::from_ref(&report)));
        }
        Command::Compare { reports, out } => {
            let mut all = Vec::new();
            for p in &reports {
                all.extend(load_reports(p)?);
            }
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_text(&out.join("comparison.csv"), &evalsuite::comparison_csv(&all)?)?;
            let md = evalsuite::comparison_markdown(&all);
            write_text(&out.join("comparison.md"), &md)?;
            print!("{md}");
        }
        Command::PlotData { exp } => {
            let files = plot_data(&exp)?;
            for f in files {
                say(f.display().to_string());
            }
        }
        Command::ClusterStyles {
            captions,
            out,
            k,
            linkage,
            distance,
            pooling,
            seed,
        } => {
            let caps = read_captions_file(&captions)?;
            let texts: Vec<&str> = caps.iter().map(|c| c.text.as_str()).collect();
            let personas: Vec<String> = caps.iter().map(|c| c.style.clone()).collect();
            let vocab = Vocabulary::build(&texts, 1, 4096)?;
            let cnn = CnnConfig {
                seed,
                ..CnnConfig::default()
            };
            let pooling = match pooling {
                PoolingArg::HeadRows => Pooling::HeadRows,
                PoolingArg::MeanCaption => Pooling::MeanCaption,
            };
            let emb = judges::train_style_embedder(&texts, &personas, &vocab, &cnn, pooling)?;
            let linkage = match linkage {
                LinkageArg::Single => Linkage::Single,
                LinkageArg::Complete => Linkage::Complete,
                LinkageArg::Average => Linkage::Average,
            };
            let distance = match distance {
                DistanceArg::Cosine => Distance::Cosine,
                DistanceArg::Euclidean => Distance::Euclidean,
            };
            let r = judges::cluster_styles(&emb.embeddings, &emb.styles, linkage, distance, Cut::K(k))?;
            r.write(&out)?;
            say(format!("persona classifier held-out accuracy {:.3}", emb.heldout_accuracy));
            for g in &r.groups {
                say(g.iter().map(|&i| r.labels[i].as_str()).collect::<Vec<_>>().join(" "));
            }
        }
        Command::AdapterSweep { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rows = adapter_sweep(&cfg, &AdapterVariant::ALL, &out)?;
            print!("{}", variants_csv(&rows));
        }
        Command::Run { config, out, dry_run } => {
            let cfg = ExperimentConfig::load(&config)?;
            if dry_run {
                for l in stage_plan(&cfg, &out) {
                    say(l);
                }
                return Ok(());
            }
            let r = cmd_run(&cfg, &out)?;
            print!("{}", evalsuite::comparison_markdown(&r.report.models));
            say(format!("report -> {}", r.dir.join("report.json").display()));
        }
    }
    Ok(())
}

/// Reports from either a single-model report or a run's report.json.
pub fn load_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    if v.get("models").is_some() {
        Ok(serde_json::from_value::<RunReport>(v)?.models)
    } else {
        Ok(vec![serde_json::from_value(v)?])
    }
}

/// Rebuilds `plots/forgetting.csv` from the snapshots and `plots/quadrants.csv`
/// from the run report.
pub fn plot_data(exp: &Path) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::load(&exp.join("config.json"))?;
    let snap_dir = exp.join("snapshots");
    let mut dirs: Vec<PathBuf> = match fs::read_dir(&snap_dir) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect(),
        Err(_) => Vec::new(),
    };
    if dirs.is_empty() {
        return Err(Error::Data(format!("{} holds no phase-3 snapshots", snap_dir.display())));
    }
    dirs.sort();
    let base = seq2seq::load_model(&exp.join("phase1"))?;
    let styled = adapters::attach_sidecar(&base, &exp.join("phase2"))?;
    let mut snaps = Vec::new();
    for d in &dirs {
        let step = d
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Data(format!("unexpected snapshot {}", d.display())))?;
        let m = adapters::attach_sidecar(&base, d)?;
        snaps.push((step, m.store.group_entries(ParameterGroup::Adapter).cloned().collect()));
    }
    let data = load_prepared(&exp.join("data"))?;
    let judges = load_judges(&exp.join("judges"))?;
    let val: Vec<Vec<String>> = data.stories.val.iter().map(|s| s.context.clone()).collect();
    let curve = trainer::monitor_forgetting(&styled, &snaps, Some(&judges.style), &val, &cfg.decode)?;
    let plots = exp.join("plots");
    let f = plots.join("forgetting.csv");
    write_text(&f, &trainer::forgetting_csv(&curve))?;
    let q = plots.join("quadrants.csv");
    write_text(&q, &quadrants_csv(&RunReport::load(&exp.join("report.json"))?.models)?)?;
    Ok(vec![f, q])
}
