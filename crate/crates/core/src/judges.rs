//! Classifier judges behind the evaluation metrics, the persona embedder and
//! agglomerative style clustering.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::StoryExample;
use crate::discbase::{binary_accuracy, stratified_split, train_cnn, CnnConfig, TextCnn};
use crate::tensor::Tensor;
use crate::textpipe::{Vocabulary, SEP};
use crate::{Error, Result};

pub const MIN_JUDGE_CLASS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeMetrics {
    pub heldout_accuracy: f64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub warnings: Vec<String>,
}

/// Binary "is this text in the target style" classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleJudge {
    pub cnn: TextCnn,
    pub vocab: Vocabulary,
    pub style: String,
    pub threshold: f64,
}

impl StyleJudge {
    pub fn probability<S: AsRef<str>>(&self, texts: &[S]) -> Vec<f64> {
        let ids: Vec<Vec<usize>> = texts.iter().map(|t| self.vocab.encode(t.as_ref())).collect();
        self.cnn.predict_proba(&ids)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.cnn.save(
            dir,
            "style",
            serde_json::json!({"style": self.style, "threshold": self.threshold}),
        )?;
        self.vocab.save(&dir.join("vocab.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (cnn, kind, extra) = TextCnn::load(dir)?;
        if kind != "style" {
            return Err(Error::Data(format!("{} holds a {kind} judge, not a style judge", dir.display())));
        }
        Ok(Self {
            cnn,
            vocab: Vocabulary::load(&dir.join("vocab.json"))?,
            style: extra["style"].as_str().unwrap_or_default().to_string(),
            threshold: extra["threshold"].as_f64().unwrap_or(0.5),
        })
    }

    pub fn hash(dir: &Path) -> Result<String> {
        checkpoint::checkpoint_hash(dir)
    }
}

fn class_checks(n_pos: usize, n_neg: usize) -> Result<Vec<String>> {
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("judge training needs both classes".into()));
    }
    if n_pos < MIN_JUDGE_CLASS || n_neg < MIN_JUDGE_CLASS {
        return Err(Error::Data(format!(
            "judge classes need at least {MIN_JUDGE_CLASS} examples each, got {n_pos} and {n_neg}"
        )));
    }
    let ratio = n_pos.max(n_neg) as f64 / n_pos.min(n_neg) as f64;
    Ok(if ratio > 100.0 {
        vec![format!("class imbalance {ratio:.0}:1 exceeds 100:1")]
    } else {
        Vec::new()
    })
}

fn fit_binary(
    config: &CnnConfig,
    vocab_size: usize,
    pos: Vec<Vec<usize>>,
    neg: Vec<Vec<usize>>,
    warnings: Vec<String>,
) -> Result<(TextCnn, JudgeMetrics)> {
    let seqs: Vec<Vec<usize>> = pos.iter().chain(&neg).cloned().collect();
    let labels: Vec<usize> = (0..seqs.len()).map(|i| usize::from(i < pos.len())).collect();
    let (tr, ho) = stratified_split(&labels, config.seed);
    let pick = |idx: &[usize]| -> (Vec<Vec<usize>>, Vec<usize>) { idx.iter().map(|&i| (seqs[i].clone(), labels[i])).unzip() };
    let (xs, ys) = pick(&tr);
    let (hx, hy) = pick(&ho);
    let cnn = train_cnn(config, vocab_size, 1, &xs, &ys)?;
    let metrics = JudgeMetrics {
        heldout_accuracy: binary_accuracy(&cnn, &hx, &hy),
        n_train: xs.len(),
        n_heldout: hx.len(),
        warnings,
    };
    Ok((cnn, metrics))
}

/// Style texts against non-style texts (typically human story endings).
pub fn train_style_judge<S: AsRef<str>, T: AsRef<str>>(
    style: &str,
    positives: &[S],
    negatives: &[T],
    vocab: &Vocabulary,
    config: &CnnConfig,
) -> Result<(StyleJudge, JudgeMetrics)> {
    let warnings = class_checks(positives.len(), negatives.len())?;
    let pos = positives.iter().map(|t| vocab.encode(t.as_ref())).collect();
    let neg = negatives.iter().map(|t| vocab.encode(t.as_ref())).collect();
    let (cnn, metrics) = fit_binary(config, vocab.len(), pos, neg, warnings)?;
    Ok((
        StyleJudge {
            cnn,
            vocab: vocab.clone(),
            style: style.to_string(),
            threshold: 0.5,
        },
        metrics,
    ))
}

/// Scores how well an ending closes a context. Only meaningful in pairwise
/// comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct ClozeJudge {
    pub cnn: TextCnn,
    pub vocab: Vocabulary,
}

/// `context SEP ending` with the context sentences run together.
pub fn cloze_input<S: AsRef<str>>(vocab: &Vocabulary, context: &[S], ending: &str) -> Vec<usize> {
    let mut ids = Vec::new();
    for s in context {
        ids.extend(vocab.encode(s.as_ref()));
    }
    ids.push(SEP);
    ids.extend(vocab.encode(ending));
    assert_eq!(ids.iter().filter(|&&t| t == SEP).count(), 1, "cloze input must hold exactly one SEP");
    ids
}

impl ClozeJudge {
    pub fn score<S: AsRef<str>>(&self, context: &[S], ending: &str) -> f64 {
        self.cnn.predict_proba(&[cloze_input(&self.vocab, context, ending)])[0]
    }

    pub fn score_batch<S: AsRef<str>, E: AsRef<str>>(&self, contexts: &[Vec<S>], endings: &[E]) -> Vec<f64> {
        let ids: Vec<Vec<usize>> = contexts
            .iter()
            .zip(endings)
            .map(|(c, e)| cloze_input(&self.vocab, c, e.as_ref()))
            .collect();
        self.cnn.predict_proba(&ids)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.cnn.save(dir, "cloze", serde_json::Value::Null)?;
        self.vocab.save(&dir.join("vocab.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (cnn, kind, _) = TextCnn::load(dir)?;
        if kind != "cloze" {
            return Err(Error::Data(format!("{} holds a {kind} judge, not a cloze judge", dir.display())));
        }
        Ok(Self {
            cnn,
            vocab: Vocabulary::load(&dir.join("vocab.json"))?,
        })
    }
}

/// For each story, the index of a different story whose ending serves as
/// its negative.
pub fn shuffled_partners(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Data("need at least two stories to build mismatched endings".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc10e);
    Ok((0..n).map(|i| (i + rng.gen_range(1..n)) % n).collect())
}

/// True endings against endings borrowed from other stories.
pub fn train_cloze_judge(stories: &[StoryExample], vocab: &Vocabulary, config: &CnnConfig) -> Result<(ClozeJudge, JudgeMetrics)> {
    let partners = shuffled_partners(stories.len(), config.seed)?;
    let warnings = class_checks(stories.len(), stories.len())?;
    let pos = stories.iter().map(|s| cloze_input(vocab, &s.context, &s.ending)).collect();
    let neg = stories
        .iter()
        .zip(&partners)
        .map(|(s, &j)| cloze_input(vocab, &s.context, &stories[j].ending))
        .collect();
    let (cnn, metrics) = fit_binary(config, vocab.len(), pos, neg, warnings)?;
    Ok((
        ClozeJudge {
            cnn,
            vocab: vocab.clone(),
        },
        metrics,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// The classifier head's weight column for each style.
    #[default]
    HeadRows,
    /// Mean pooled CNN features over each style's captions.
    MeanCaption,
}

#[derive(Clone, Debug)]
pub struct StyleEmbedder {
    pub cnn: TextCnn,
    pub styles: Vec<String>,
    /// `[n_styles, dim]`.
    pub embeddings: Tensor,
    pub heldout_accuracy: f64,
}

/// Multi-class persona classifier whose per-style vectors feed clustering.
pub fn train_style_embedder<S: AsRef<str>>(
    texts: &[S],
    personas: &[String],
    vocab: &Vocabulary,
    config: &CnnConfig,
    pooling: Pooling,
) -> Result<StyleEmbedder> {
    if texts.len() != personas.len() {
        return Err(Error::Data("texts and persona labels differ in count".into()));
    }
    let styles: Vec<String> = personas
        .iter()
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if styles.len() < 2 {
        return Err(Error::Data("the style embedder needs at least two personas".into()));
    }
    let index: BTreeMap<&str, usize> = styles.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let labels: Vec<usize> = personas.iter().map(|p| index[p.as_str()]).collect();
    let seqs: Vec<Vec<usize>> = texts.iter().map(|t| vocab.encode(t.as_ref())).collect();
    let (tr, ho) = stratified_split(&labels, config.seed);
    let xs: Vec<Vec<usize>> = tr.iter().map(|&i| seqs[i].clone()).collect();
    let ys: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
    let cnn = train_cnn(config, vocab.len(), styles.len(), &xs, &ys)?;
    let dists = cnn.predict_dist(&ho.iter().map(|&i| seqs[i].clone()).collect::<Vec<_>>());
    let hits = ho
        .iter()
        .zip(&dists)
        .filter(|(&i, d)| crate::decoding::argmax(d) == labels[i])
        .count();
    let heldout_accuracy = if ho.is_empty() { f64::NAN } else { hits as f64 / ho.len() as f64 };
    let embeddings = match pooling {
        Pooling::HeadRows => {
            let w = cnn.store.get("cnn.head.w");
            let (feat, c) = (w.rows(), w.cols());
            Tensor::from_vec(&[c, feat], crate::tensor::transpose(w.data(), feat, c))
        }
        Pooling::MeanCaption => {
            let mut rows = Vec::new();
            for k in 0..styles.len() {
                let own: Vec<Vec<usize>> = (0..seqs.len()).filter(|&i| labels[i] == k).map(|i| seqs[i].clone()).collect();
                rows.extend(cnn.mean_features(&own));
            }
            let dim = rows.len() / styles.len();
            Tensor::from_vec(&[styles.len(), dim], rows)
        }
    };
    Ok(StyleEmbedder {
        cnn,
        styles,
        embeddings,
        heldout_accuracy,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linkage {
    Single,
    Complete,
    #[default]
    Average,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Cut {
    K(usize),
    Height(f64),
}

/// One merge. Leaves are `0..n`; the cluster formed by merge `i` is `n + i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge(pub usize, pub usize, pub f64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleClusterResult {
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
    /// Flat groups as sorted leaf indices, ordered by their smallest member.
    pub groups: Vec<Vec<usize>>,
}

impl StyleClusterResult {
    pub fn dendrogram_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "labels": self.labels,
            "merges": self.merges.iter().map(|m| (m.0, m.1, m.2)).collect::<Vec<_>>(),
        }))? + "\n")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("dendrogram.json");
        fs::write(&p, self.dendrogram_json()?).map_err(|e| Error::io(&p, e))?;
        let named: Vec<Vec<&str>> = self
            .groups
            .iter()
            .map(|g| g.iter().map(|&i| self.labels[i].as_str()).collect())
            .collect();
        let p = dir.join("groups.json");
        fs::write(&p, serde_json::to_string_pretty(&named)? + "\n").map_err(|e| Error::io(&p, e))
    }
}

fn pair_distance(a: &[f64], b: &[f64], d: Distance) -> f64 {
    match d {
        Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        Distance::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return if na == nb { 0.0 } else { 1.0 };
            }
            (1.0 - dot / (na * nb)).max(0.0)
        }
    }
}

/// Agglomerative clustering of the rows of `embeddings`.
pub fn cluster_styles(
    embeddings: &Tensor,
    labels: &[String],
    linkage: Linkage,
    distance: Distance,
    cut: Cut,
) -> Result<StyleClusterResult> {
    let n = embeddings.rows();
    if n < 2 || labels.len() != n {
        return Err(Error::Data("clustering needs at least two labelled styles".into()));
    }
    if let Cut::K(k) = cut {
        if k == 0 || k > n {
            return Err(Error::Config(format!("cannot cut {n} styles into {k} groups")));
        }
    }
    let base: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| pair_distance(embeddings.row(i), embeddings.row(j), distance)).collect())
        .collect();
    // active clusters: (id, members)
    let mut active: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let link = |a: &[usize], b: &[usize]| -> f64 {
        let ds = a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j))).map(|(i, j)| base[i][j]);
        match linkage {
            Linkage::Single => ds.fold(f64::INFINITY, f64::min),
            Linkage::Complete => ds.fold(0.0, f64::max),
            Linkage::Average => ds.sum::<f64>() / (a.len() * b.len()) as f64,
        }
    };
    let mut merges = Vec::with_capacity(n - 1);
    let mut snapshots = vec![active.clone()];
    while active.len() > 1 {
        let mut best = (f64::INFINITY, 0, 1);
        for x in 0..active.len() {
            for y in x + 1..active.len() {
                let d = link(&active[x].1, &active[y].1);
                if d < best.0 {
                    best = (d, x, y);
                }
            }
        }
        let (h, x, y) = best;
        let (ia, ma) = active[x].clone();
        let (ib, mb) = active.remove(y);
        let mut members = ma;
        members.extend(mb);
        members.sort_unstable();
        let (lo, hi) = (ia.min(ib), ia.max(ib));
        merges.push(Merge(lo, hi, h));
        active[x] = (n + merges.len() - 1, members);
        snapshots.push(active.clone());
    }
    let level = match cut {
        Cut::K(k) => n - k,
        Cut::Height(t) => merges.iter().take_while(|m| m.2 <= t).count(),
    };
    let mut groups: Vec<Vec<usize>> = snapshots[level].iter().map(|(_, m)| m.clone()).collect();
    groups.sort();
    Ok(StyleClusterResult {
        labels: labels.to_vec(),
        merges,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn identical_rows_merge_first_at_zero() {
        let e = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.2, 1.0, 1.0, 0.0]);
        let r = cluster_styles(&e, &names(3), Linkage::Average, Distance::Cosine, Cut::K(2)).unwrap();
        assert_eq!(r.merges[0], Merge(0, 2, 0.0));
        assert_eq!(r.merges.len(), 2);
        assert_eq!(r.groups, vec![vec![0, 2], vec![1]]);
        let all = cluster_styles(&e, &names(3), Linkage::Average, Distance::Cosine, Cut::K(3)).unwrap();
        assert_eq!(all.groups, vec![vec![0], vec![1], vec![2]]);
        assert!(cluster_styles(&e, &names(3), Linkage::Average, Distance::Cosine, Cut::K(4)).is_err());
    }

    #[test]
    fn height_cut() {
        let e = Tensor::from_vec(&[4, 1], vec![0.0, 0.1, 5.0, 5.2]);
        let r = cluster_styles(&e, &names(4), Linkage::Single, Distance::Euclidean, Cut::Height(1.0)).unwrap();
        assert_eq!(r.groups, vec![vec![0, 1], vec![2, 3]]);
        let json: serde_json::Value = serde_json::from_str(&r.dendrogram_json().unwrap()).unwrap();
        assert_eq!(json["merges"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn partners_never_self() {
        let p = shuffled_partners(10, 4).unwrap();
        assert!(p.iter().enumerate().all(|(i, &j)| i != j && j < 10));
        assert!(shuffled_partners(1, 0).is_err());
    }

    #[test]
    fn cloze_format_has_one_sep() {
        let v = Vocabulary::build(&["a b c ."], 1, 10).unwrap();
        let ids = cloze_input(&v, &["a b .", "c ."], "b .");
        assert_eq!(ids.iter().filter(|&&t| t == SEP).count(), 1);
        assert_eq!(v.decode(&ids).unwrap(), "a b . c . <sep> b .");
    }
}
