//! Story and style corpora: loading, validation, splitting, and a seeded
//! synthetic generator that stands in for the real datasets.
//!
//! Stories are five sentences; the first four are the context and the fifth
//! is the ending to generate. Style captions are free text carrying a persona
//! label, optionally folded into umbrella styles through a grouping map.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const STORY_LEN: usize = 5;
pub const CONTEXT_LEN: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StoryRecord {
    sentences: Vec<String>,
}

impl StoryRecord {
    /// Trims each sentence and checks the five-sentence shape.
    pub fn new<S: AsRef<str>>(sentences: &[S]) -> Result<Self> {
        if sentences.len() != STORY_LEN {
            return Err(Error::Data(format!(
                "story has {} sentences, expected {STORY_LEN}",
                sentences.len()
            )));
        }
        let sentences: Vec<String> = sentences.iter().map(|s| s.as_ref().trim().to_string()).collect();
        if let Some(i) = sentences.iter().position(|s| s.is_empty()) {
            return Err(Error::Data(format!("sentence {} is empty", i + 1)));
        }
        Ok(Self { sentences })
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StoryExample {
    pub context: Vec<String>,
    pub ending: String,
}

impl StoryExample {
    pub fn to_record(&self) -> StoryRecord {
        let mut s = self.context.clone();
        s.push(self.ending.clone());
        StoryRecord { sentences: s }
    }

    pub fn context_text(&self) -> String {
        self.context.join(" ")
    }
}

pub fn split_story(record: &StoryRecord) -> StoryExample {
    StoryExample {
        context: record.sentences[..CONTEXT_LEN].to_vec(),
        ending: record.sentences[CONTEXT_LEN].clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleCaption {
    pub text: String,
    pub style: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoryFormat {
    Jsonl,
    Csv5col,
}

impl StoryFormat {
    /// Guess from the file extension; anything that is not `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => StoryFormat::Csv5col,
            _ => StoryFormat::Jsonl,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StoryRow {
    sentences: Vec<String>,
}

fn with_line(path: &Path, line: usize) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: match e {
            Error::Data(m) => m,
            other => other.to_string(),
        },
    }
}

pub fn load_story_corpus(path: &Path, format: StoryFormat) -> Result<Vec<StoryRecord>> {
    match format {
        StoryFormat::Jsonl => load_story_jsonl(path),
        StoryFormat::Csv5col => load_story_csv(path),
    }
}

fn load_story_jsonl(path: &Path) -> Result<Vec<StoryRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: StoryRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(StoryRecord::new(&row.sentences).map_err(with_line(path, i + 1))?);
    }
    Ok(out)
}

/// Either headerless five-column rows, or a ROC-style file whose header names
/// `sentence1` .. `sentence5` (extra columns such as ids and titles ignored).
fn load_story_csv(path: &Path) -> Result<Vec<StoryRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut columns: Option<Vec<usize>> = None;
    for (i, row) in reader.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if i == 0 {
            let lower: Vec<String> = row.iter().map(|c| c.trim().to_ascii_lowercase()).collect();
            let found: Option<Vec<usize>> = (1..=STORY_LEN)
                .map(|k| lower.iter().position(|c| *c == format!("sentence{k}")))
                .collect();
            if let Some(cols) = found {
                columns = Some(cols);
                continue;
            }
        }
        let fields: Vec<&str> = match &columns {
            Some(cols) => cols.iter().filter_map(|&c| row.get(c)).collect(),
            None => row.iter().collect(),
        };
        out.push(StoryRecord::new(&fields).map_err(with_line(path, line))?);
    }
    Ok(out)
}

/// Canonical JSONL: one `{"sentences": [...]}` object per line.
pub fn write_story_corpus(path: &Path, records: &[StoryRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct CaptionRow {
    text: String,
    persona: String,
}

/// Captions as `{"text", "persona"}` JSONL with the style in `persona`.
pub fn write_captions(path: &Path, captions: &[StyleCaption]) -> Result<()> {
    let mut buf = Vec::new();
    for c in captions {
        serde_json::to_writer(
            &mut buf,
            &CaptionRow {
                text: c.text.clone(),
                persona: c.style.clone(),
            },
        )?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Umbrella style → fine persona labels.
pub type StyleGrouping = BTreeMap<String, Vec<String>>;

pub fn load_grouping(path: &Path) -> Result<StyleGrouping> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleCorpus {
    pub captions: Vec<StyleCaption>,
    pub dropped: usize,
}

pub fn load_style_corpus(path: &Path, grouping: &StyleGrouping) -> Result<StyleCorpus> {
    let mut persona_to_style: HashMap<&str, &str> = HashMap::new();
    for (style, personas) in grouping {
        for p in personas {
            if let Some(prev) = persona_to_style.insert(p, style) {
                if prev != style {
                    return Err(Error::Config(format!(
                        "persona '{p}' is assigned to both '{prev}' and '{style}'"
                    )));
                }
            }
        }
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut captions = Vec::new();
    let mut dropped = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: CaptionRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let text = row.text.trim();
        match persona_to_style.get(row.persona.trim()) {
            Some(style) if !text.is_empty() => captions.push(StyleCaption {
                text: text.to_string(),
                style: style.to_string(),
            }),
            _ => dropped += 1,
        }
    }
    if captions.is_empty() {
        return Err(Error::Data(format!(
            "{}: no captions left after applying the style grouping ({dropped} dropped)",
            path.display()
        )));
    }
    Ok(StyleCorpus { captions, dropped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateParams {
    pub min_len: usize,
    pub max_len: usize,
    /// Leading entries of the base vocabulary used as protagonist names.
    pub n_names: usize,
    /// The remaining non-punctuation base words are cut into this many topics.
    pub n_topics: usize,
    /// Chance that a caption slot holds a style marker instead of a topic word.
    pub style_rate: f64,
    /// Trailing topics reserved for captions, so the style corpus talks about
    /// other things than the stories do.
    #[serde(default)]
    pub n_caption_topics: usize,
    /// Whether captions open with a protagonist name like story sentences.
    #[serde(default = "yes")]
    pub caption_names: bool,
}

fn yes() -> bool {
    true
}

impl Default for TemplateParams {
    fn default() -> Self {
        Self {
            min_len: 3,
            max_len: 5,
            n_names: 8,
            n_topics: 6,
            style_rate: 0.4,
            n_caption_topics: 0,
            caption_names: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_stories: usize,
    pub n_captions_per_style: usize,
    pub style_lexicons: BTreeMap<String, Vec<String>>,
    pub base_vocab: Vec<String>,
    #[serde(default)]
    pub template: TemplateParams,
}

pub const TERMINATOR: &str = ".";

impl SyntheticSpec {
    /// A small closed world: 8 names, 6 story topics and 2 caption topics of
    /// 8 words each, and one negative style lexicon.
    pub fn desk_default(seed: u64) -> Self {
        let names = ["amy", "ben", "cal", "dee", "eli", "fay", "gus", "hal"];
        let topics = [
            ["bake", "bread", "oven", "flour", "cake", "kitchen", "dough", "sugar"],
            ["hike", "trail", "hill", "boots", "map", "forest", "river", "camp"],
            ["swim", "pool", "lake", "towel", "goggles", "lap", "dive", "splash"],
            ["paint", "canvas", "brush", "color", "easel", "sketch", "gallery", "frame"],
            ["shop", "store", "cart", "price", "coupon", "aisle", "receipt", "bag"],
            ["study", "exam", "book", "notes", "class", "teacher", "grade", "library"],
            ["sunset", "beach", "sky", "cloud", "wave", "sand", "shell", "breeze"],
            ["puppy", "kitten", "leash", "collar", "bark", "paw", "fur", "treat"],
        ];
        let mut base_vocab: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        for t in topics {
            base_vocab.extend(t.iter().map(|s| s.to_string()));
        }
        base_vocab.push(TERMINATOR.into());
        let mut style_lexicons = BTreeMap::new();
        style_lexicons.insert(
            "negative".to_string(),
            ["sadly", "awful", "gloomy", "miserable", "terrible", "bitter"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        Self {
            seed,
            n_stories: 600,
            n_captions_per_style: 600,
            style_lexicons,
            base_vocab,
            template: TemplateParams {
                n_topics: 8,
                n_caption_topics: 2,
                ..TemplateParams::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.template;
        if t.min_len == 0 || t.min_len > t.max_len {
            return Err(Error::Config(format!(
                "sentence length range [{}, {}] is invalid",
                t.min_len, t.max_len
            )));
        }
        if !(0.0..=1.0).contains(&t.style_rate) {
            return Err(Error::Config("style_rate must lie in [0, 1]".into()));
        }
        if !self.base_vocab.iter().any(|w| w == TERMINATOR) {
            return Err(Error::Config(format!(
                "base_vocab must contain the terminator '{TERMINATOR}'"
            )));
        }
        let base: BTreeSet<&str> = self.base_vocab.iter().map(String::as_str).collect();
        if base.len() != self.base_vocab.len() {
            return Err(Error::Config("base_vocab has duplicate tokens".into()));
        }
        let words = self.base_vocab.len() - 1;
        if t.n_names == 0 || t.n_topics == 0 || words < t.n_names + 2 * t.n_topics {
            return Err(Error::Config(format!(
                "base_vocab of {words} words cannot hold {} names and {} topics of ≥2 words",
                t.n_names, t.n_topics
            )));
        }
        if t.n_caption_topics >= t.n_topics {
            return Err(Error::Config(format!(
                "{} caption topics leave no topic for stories out of {}",
                t.n_caption_topics, t.n_topics
            )));
        }
        if self.style_lexicons.is_empty() {
            return Err(Error::Config("at least one style lexicon is required".into()));
        }
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (style, lex) in &self.style_lexicons {
            if lex.is_empty() {
                return Err(Error::Config(format!("style '{style}' has an empty lexicon")));
            }
            for w in lex {
                if base.contains(w.as_str()) {
                    return Err(Error::Config(format!(
                        "style marker '{w}' of '{style}' also appears in base_vocab"
                    )));
                }
                if let Some(other) = seen.insert(w, style) {
                    if other != style {
                        return Err(Error::Config(format!(
                            "style marker '{w}' is shared by '{other}' and '{style}'"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.words().into_iter().take(self.template.n_names).collect()
    }

    /// Topic word blocks; the last block absorbs any remainder.
    pub fn topics(&self) -> Vec<Vec<&str>> {
        let rest: Vec<&str> = self.words().into_iter().skip(self.template.n_names).collect();
        let n = self.template.n_topics;
        let per = rest.len() / n;
        (0..n)
            .map(|k| {
                let end = if k + 1 == n { rest.len() } else { (k + 1) * per };
                rest[k * per..end].to_vec()
            })
            .collect()
    }

    fn words(&self) -> Vec<&str> {
        self.base_vocab
            .iter()
            .map(String::as_str)
            .filter(|w| *w != TERMINATOR)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub stories: Vec<StoryRecord>,
    pub captions: Vec<StyleCaption>,
}

fn sentence(name: &str, words: &[&str]) -> String {
    let mut s = String::from(name);
    for w in words {
        s.push(' ');
        s.push_str(w);
    }
    s.push(' ');
    s.push_str(TERMINATOR);
    s
}

/// Template stories and style captions, fully determined by `spec`.
///
/// Every sentence of a story is `<name> <topic words> .` with one name and
/// one topic for the whole story. Captions share that shape but draw each
/// slot either from a random topic or from the style's marker lexicon, with at
/// least one marker per caption. Style markers never appear in stories.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let names = spec.names();
    let topics = spec.topics();
    let t = &spec.template;
    let (story_topics, caption_topics) = if t.n_caption_topics == 0 {
        (&topics[..], &topics[..])
    } else {
        topics.split_at(topics.len() - t.n_caption_topics)
    };

    let mut stories = Vec::with_capacity(spec.n_stories);
    for _ in 0..spec.n_stories {
        let name = names[rng.gen_range(0..names.len())];
        let topic = &story_topics[rng.gen_range(0..story_topics.len())];
        let sentences: Vec<String> = (0..STORY_LEN)
            .map(|_| {
                let len = rng.gen_range(t.min_len..=t.max_len);
                let words: Vec<&str> = (0..len).map(|_| topic[rng.gen_range(0..topic.len())]).collect();
                sentence(name, &words)
            })
            .collect();
        stories.push(StoryRecord { sentences });
    }

    let mut captions = Vec::new();
    for (style, lexicon) in &spec.style_lexicons {
        for _ in 0..spec.n_captions_per_style {
            let name = names[rng.gen_range(0..names.len())];
            let topic = &caption_topics[rng.gen_range(0..caption_topics.len())];
            let len = rng.gen_range(t.min_len..=t.max_len);
            let mut words: Vec<&str> = Vec::with_capacity(len);
            let mut marked = false;
            for _ in 0..len {
                if rng.gen_bool(t.style_rate) {
                    words.push(&lexicon[rng.gen_range(0..lexicon.len())]);
                    marked = true;
                } else {
                    words.push(topic[rng.gen_range(0..topic.len())]);
                }
            }
            if !marked {
                let slot = rng.gen_range(0..len);
                words[slot] = &lexicon[rng.gen_range(0..lexicon.len())];
            }
            captions.push(StyleCaption {
                text: if t.caption_names {
                    sentence(name, &words)
                } else {
                    sentence(words[0], &words[1..])
                },
                style: style.clone(),
            });
        }
    }
    Ok(SyntheticCorpus { stories, captions })
}

/// Writes `stories.jsonl`, `captions.jsonl` and an identity `grouping.json`.
pub fn write_synthetic(dir: &Path, corpus: &SyntheticCorpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_story_corpus(&dir.join("stories.jsonl"), &corpus.stories)?;
    write_captions(&dir.join("captions.jsonl"), &corpus.captions)?;
    let styles: BTreeSet<&str> = corpus.captions.iter().map(|c| c.style.as_str()).collect();
    let grouping: StyleGrouping = styles
        .into_iter()
        .map(|s| (s.to_string(), vec![s.to_string()]))
        .collect();
    let path = dir.join("grouping.json");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&grouping)?).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then cut by `ratios`; the test split takes the remainder.
pub fn make_splits<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<Splits<T>> {
    let (a, b, c) = ratios;
    if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::Config(format!(
            "split ratios ({a}, {b}, {c}) must be non-negative and sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = items.len();
    let n_train = ((n as f64 * a).round() as usize).min(n);
    let n_val = ((n as f64 * b).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    Ok(Splits {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}
