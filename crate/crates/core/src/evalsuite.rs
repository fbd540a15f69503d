//! Overlap metrics, judge-based ratios and the assembled evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::judges::{ClozeJudge, StyleJudge};
use crate::textpipe::tokenize;
use crate::{Error, Result};

fn aligned(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!("{what}: {a} items against {b}")));
    }
    if a == 0 {
        return Err(Error::Data(format!("{what}: empty input")));
    }
    Ok(())
}

fn counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level clipped unigram precision times the brevity penalty.
pub fn bleu1<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    aligned(hypotheses.len(), references.len(), "bleu1")?;
    let (mut clipped, mut hyp_len, mut ref_len) = (0usize, 0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (tokenize(h.as_ref()), tokenize(r.as_ref()));
        let rc = counts(&r, 1);
        clipped += counts(&h, 1).iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        hyp_len += h.len();
        ref_len += r.len();
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * clipped as f64 / hyp_len as f64)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Mean per-pair LCS F1.
pub fn rouge_l<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    aligned(hypotheses.len(), references.len(), "rouge_l")?;
    let total: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| {
            let (h, r) = (tokenize(h.as_ref()), tokenize(r.as_ref()));
            let l = lcs_len(&h, &r);
            if l == 0 {
                return 0.0;
            }
            let (p, rec) = (l as f64 / h.len() as f64, l as f64 / r.len() as f64);
            2.0 * p * rec / (p + rec)
        })
        .sum();
    Ok(total / hypotheses.len() as f64)
}

/// TF-IDF n-gram cosine for n = 1..=4, averaged over the orders the
/// reference has, times 10. Document frequencies come from the references,
/// with `idf = ln((1 + N) / (1 + df)) + 1`.
pub fn cider<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    aligned(hypotheses.len(), references.len(), "cider")?;
    let hyps: Vec<Vec<String>> = hypotheses.iter().map(|h| tokenize(h.as_ref())).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r.as_ref())).collect();
    let n_docs = refs.len() as f64;
    let df: Vec<BTreeMap<&[String], usize>> = (1..=4)
        .map(|n| {
            let mut df = BTreeMap::new();
            for doc in &refs {
                for g in counts(doc, n).into_keys() {
                    *df.entry(g).or_insert(0) += 1;
                }
            }
            df
        })
        .collect();
    let mut total = 0.0;
    for (h, r) in hyps.iter().zip(&refs) {
        let mut sum = 0.0;
        let mut orders = 0;
        for n in 1..=4 {
            let rc = counts(r, n);
            if rc.is_empty() {
                continue;
            }
            orders += 1;
            let idf = |g: &[String]| ((1.0 + n_docs) / (1.0 + *df[n - 1].get(g).unwrap_or(&0) as f64)).ln() + 1.0;
            let weights = |c: &BTreeMap<&[String], usize>| -> BTreeMap<Vec<String>, f64> {
                let len: usize = c.values().sum();
                c.iter().map(|(g, &k)| (g.to_vec(), k as f64 / len as f64 * idf(g))).collect()
            };
            let (vh, vr) = (weights(&counts(h, n)), weights(&rc));
            let dot: f64 = vh.iter().filter_map(|(g, x)| vr.get(g).map(|y| x * y)).sum();
            let nh = vh.values().map(|x| x * x).sum::<f64>().sqrt();
            let nr = vr.values().map(|x| x * x).sum::<f64>().sqrt();
            if nh > 0.0 && nr > 0.0 {
                sum += dot / (nh * nr);
            }
        }
        if orders > 0 {
            total += sum / orders as f64;
        }
    }
    Ok(10.0 * total / hyps.len() as f64)
}

pub fn ris_from_scores(scores: &[f64], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Data("ris: no endings".into()));
    }
    Ok(scores.iter().filter(|&&p| p > threshold).count() as f64 / scores.len() as f64)
}

/// Fraction of endings the judge places in its style.
pub fn ris<S: AsRef<str>>(endings: &[S], judge: &StyleJudge) -> Result<f64> {
    ris_from_scores(&judge.probability(endings), judge.threshold)
}

/// Strictly-better fraction. Ties are not better.
pub fn better_ratio(model_scores: &[f64], other_scores: &[f64]) -> Result<f64> {
    aligned(model_scores.len(), other_scores.len(), "pairwise comparison")?;
    Ok(model_scores.iter().zip(other_scores).filter(|(m, o)| m > o).count() as f64 / model_scores.len() as f64)
}

pub fn rbae<C: AsRef<str>, M: AsRef<str>, B: AsRef<str>>(
    contexts: &[Vec<C>],
    model_endings: &[M],
    baseline_endings: &[B],
    judge: &ClozeJudge,
) -> Result<f64> {
    aligned(contexts.len(), model_endings.len(), "rbae")?;
    aligned(contexts.len(), baseline_endings.len(), "rbae")?;
    better_ratio(&judge.score_batch(contexts, model_endings), &judge.score_batch(contexts, baseline_endings))
}

/// For each context `i`, a seeded pick of a pool ending from a different
/// story. `pool[i]` is context `i`'s own gold ending.
pub fn random_pairing<P: AsRef<str>>(n_contexts: usize, pool: &[P], seed: u64) -> Result<Vec<usize>> {
    if n_contexts == 0 {
        return Err(Error::Data("rbar: no contexts".into()));
    }
    if pool.len() < n_contexts || pool.len() < 2 {
        return Err(Error::Data(format!(
            "rbar: human ending pool of {} is smaller than {n_contexts} contexts",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ba7);
    (0..n_contexts)
        .map(|i| {
            let own = pool[i].as_ref();
            let choices: Vec<usize> = (0..pool.len()).filter(|&j| j != i && pool[j].as_ref() != own).collect();
            if choices.is_empty() {
                return Err(Error::Data("rbar: every pool ending equals the gold ending".into()));
            }
            let j = choices[rng.gen_range(0..choices.len())];
            assert_ne!(pool[j].as_ref(), own);
            Ok(j)
        })
        .collect()
}

pub fn rbar<C: AsRef<str>, M: AsRef<str>, P: AsRef<str>>(
    contexts: &[Vec<C>],
    model_endings: &[M],
    pool: &[P],
    judge: &ClozeJudge,
    seed: u64,
) -> Result<f64> {
    aligned(contexts.len(), model_endings.len(), "rbar")?;
    let pick = random_pairing(contexts.len(), pool, seed)?;
    let others: Vec<&str> = pick.iter().map(|&j| pool[j].as_ref()).collect();
    better_ratio(&judge.score_batch(contexts, model_endings), &judge.score_batch(contexts, &others))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quadrants {
    /// styled and valid
    pub tt: usize,
    /// styled, not valid
    pub tf: usize,
    /// valid, not styled
    pub ft: usize,
    pub ff: usize,
}

impl Quadrants {
    pub fn total(&self) -> usize {
        self.tt + self.tf + self.ft + self.ff
    }

    pub fn p_valid_given_styled(&self) -> Option<f64> {
        let s = self.tt + self.tf;
        (s > 0).then(|| self.tt as f64 / s as f64)
    }

    pub fn p_styled_given_valid(&self) -> Option<f64> {
        let v = self.tt + self.ft;
        (v > 0).then(|| self.tt as f64 / v as f64)
    }
}

pub fn quadrants(style: &[bool], valid: &[bool]) -> Result<Quadrants> {
    if style.len() != valid.len() {
        return Err(Error::Data(format!("quadrants: {} style flags against {} validity flags", style.len(), valid.len())));
    }
    let mut q = Quadrants::default();
    for (&s, &v) in style.iter().zip(valid) {
        match (s, v) {
            (true, true) => q.tt += 1,
            (true, false) => q.tf += 1,
            (false, true) => q.ft += 1,
            (false, false) => q.ff += 1,
        }
    }
    Ok(q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub bleu1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    pub ris: f64,
    /// Absent when the model is the baseline itself.
    pub rbae: Option<f64>,
    pub rbar: f64,
    pub quadrants: Quadrants,
    pub p_valid_given_styled: Option<f64>,
    pub p_styled_given_valid: Option<f64>,
    pub n_samples: usize,
    pub config_hash: String,
    pub style_judge_hash: String,
    pub cloze_judge_hash: String,
    pub idf_corpus: String,
    /// Adapter variant of adapter-based models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub struct EvalInputs<'a> {
    pub model: &'a str,
    pub contexts: &'a [Vec<String>],
    pub endings: &'a [String],
    /// `None` when evaluating the baseline against itself.
    pub baseline_endings: Option<&'a [String]>,
    pub references: &'a [String],
    pub style_judge: &'a StyleJudge,
    pub cloze_judge: &'a ClozeJudge,
    pub style_judge_hash: &'a str,
    pub cloze_judge_hash: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
}

/// All metrics for one model. The validity flag is the pairwise win against
/// the baseline, or against a random human ending when no baseline is given.
pub fn full_report(inp: &EvalInputs) -> Result<EvalReport> {
    let n = inp.endings.len();
    aligned(inp.contexts.len(), n, "report contexts")?;
    aligned(inp.references.len(), n, "report references")?;
    let style_p = inp.style_judge.probability(inp.endings);
    let styled: Vec<bool> = style_p.iter().map(|&p| p > inp.style_judge.threshold).collect();
    let model_scores = inp.cloze_judge.score_batch(inp.contexts, inp.endings);
    let pick = random_pairing(n, inp.references, inp.seed)?;
    let random: Vec<&str> = pick.iter().map(|&j| inp.references[j].as_str()).collect();
    let random_scores = inp.cloze_judge.score_batch(inp.contexts, &random);
    let baseline_scores = match inp.baseline_endings {
        Some(b) => {
            aligned(b.len(), n, "report baseline")?;
            Some(inp.cloze_judge.score_batch(inp.contexts, b))
        }
        None => None,
    };
    let against = baseline_scores.as_ref().unwrap_or(&random_scores);
    let valid: Vec<bool> = model_scores.iter().zip(against).map(|(m, o)| m > o).collect();
    let q = quadrants(&styled, &valid)?;
    Ok(EvalReport {
        model: inp.model.to_string(),
        bleu1: bleu1(inp.endings, inp.references)?,
        rouge_l: rouge_l(inp.endings, inp.references)?,
        cider: cider(inp.endings, inp.references)?,
        ris: ris_from_scores(&style_p, inp.style_judge.threshold)?,
        rbae: baseline_scores.as_ref().map(|b| better_ratio(&model_scores, b)).transpose()?,
        rbar: better_ratio(&model_scores, &random_scores)?,
        p_valid_given_styled: q.p_valid_given_styled(),
        p_styled_given_valid: q.p_styled_given_valid(),
        quadrants: q,
        n_samples: n,
        config_hash: inp.config_hash.to_string(),
        style_judge_hash: inp.style_judge_hash.to_string(),
        cloze_judge_hash: inp.cloze_judge_hash.to_string(),
        idf_corpus: "evaluation references".into(),
        adapter: None,
    })
}

pub const TABLE_COLUMNS: [&str; 7] = ["model", "bleu1", "cider", "rougeL", "ris", "rbae", "rbar"];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

fn table_rows(reports: &[EvalReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                cell(Some(r.bleu1)),
                cell(Some(r.cider)),
                cell(Some(r.rouge_l)),
                cell(Some(r.ris)),
                cell(r.rbae),
                cell(Some(r.rbar)),
            ]
        })
        .collect()
}

/// One row per report in the results-table column order.
pub fn comparison_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(TABLE_COLUMNS).map_err(io)?;
    for row in table_rows(reports) {
        w.write_record(&row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

pub fn comparison_markdown(reports: &[EvalReport]) -> String {
    let mut s = format!("| {} |\n|{}\n", TABLE_COLUMNS.join(" | "), "---|".repeat(TABLE_COLUMNS.len()));
    for row in table_rows(reports) {
        let _ = writeln!(s, "| {} |", row.join(" | "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu1(&["a b c"], &["a b d"]).unwrap(), 2.0 / 3.0);
        assert_eq!(bleu1(&["a b"], &["a b"]).unwrap(), 1.0);
        assert_eq!(bleu1(&[""], &["a b"]).unwrap(), 0.0);
        assert!(bleu1::<&str, &str>(&[], &[]).is_err());
        // brevity: one of two tokens, clipped precision 1
        assert!((bleu1(&["a"], &["a b"]).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rouge_examples() {
        assert!((rouge_l(&["a c"], &["a b c"]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l(&["x y"], &["a b"]).unwrap(), 0.0);
        assert_eq!(rouge_l(&["a b"], &["a b"]).unwrap(), 1.0);
    }

    #[test]
    fn cider_examples() {
        assert!((cider(&["a b c d e"], &["a b c d e"]).unwrap() - 10.0).abs() < 1e-12);
        assert!((cider(&["a b", "c d e"], &["a b", "c d e"]).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(cider(&["x y z"], &["a b c"]).unwrap(), 0.0);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(ris_from_scores(&[0.9, 0.9], 0.5).unwrap(), 1.0);
        assert_eq!(ris_from_scores(&[0.1], 0.5).unwrap(), 0.0);
        assert_eq!(ris_from_scores(&[0.9, 0.4, 0.6], 0.5).unwrap(), 2.0 / 3.0);
        assert!(ris_from_scores(&[], 0.5).is_err());
        assert_eq!(better_ratio(&[0.8, 0.3, 0.5], &[0.2, 0.7, 0.5]).unwrap(), 1.0 / 3.0);
        assert_eq!(better_ratio(&[0.4, 0.4], &[0.4, 0.4]).unwrap(), 0.0);
        assert!(better_ratio(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn pairing_excludes_own_story() {
        let pool: Vec<String> = (0..8).map(|i| format!("end {}", i % 4)).collect();
        let a = random_pairing(8, &pool, 3).unwrap();
        assert_eq!(a, random_pairing(8, &pool, 3).unwrap());
        for (i, &j) in a.iter().enumerate() {
            assert_ne!(pool[i], pool[j]);
        }
        assert!(random_pairing(9, &pool, 3).is_err());
    }

    #[test]
    fn quadrant_examples() {
        let q = quadrants(&[true, true, false], &[true, false, true]).unwrap();
        assert_eq!(q, Quadrants { tt: 1, tf: 1, ft: 1, ff: 0 });
        assert_eq!(q.p_valid_given_styled(), Some(0.5));
        let all = quadrants(&[true; 4], &[true; 4]).unwrap();
        assert_eq!((all.tt, all.total()), (4, 4));
        assert!(quadrants(&[true], &[]).is_err());
    }
}
