//! Ending generation: greedy, beam and top-k sampling, plus the shallow
//! fusion baseline that sums a story model's and a style LM's next-token
//! probabilities.
//!
//! PAD, BOS, SEP and UNK are never generated. Greedy and fusion break ties
//! toward the lowest token id.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters;
use crate::autograd::softmax_in_place;
use crate::seq2seq::{self, decoder_logits, encode_context, ContextEmbeddings, ModelParams, Source};
use crate::textpipe::{pad_batch, pad_tight, Vocabulary, BOS, EOS, PAD, SEP, UNK};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Strategy {
    Greedy,
    Beam { k: usize },
    TopK { k: usize, temperature: f64 },
}

fn default_max_new() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSettings {
    pub strategy: Strategy,
    #[serde(default = "default_max_new")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_new_tokens: default_max_new(),
            seed: 0,
        }
    }
}

impl DecodeSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_new_tokens >= 1
            && match self.strategy {
                Strategy::Greedy => true,
                Strategy::Beam { k } => k >= 1,
                Strategy::TopK { k, temperature } => k >= 1 && temperature > 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid decode settings {self:?}")))
        }
    }
}

const BANNED: [usize; 4] = [PAD, BOS, SEP, UNK];

fn mask_logits(row: &mut [f64]) {
    for &b in &BANNED {
        if b < row.len() {
            row[b] = f64::NEG_INFINITY;
        }
    }
}

/// Lowest index among the maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Base checkpoint plus an optional adapter sidecar.
pub fn load_generator(base: &Path, sidecar: Option<&Path>) -> Result<ModelParams> {
    let m = seq2seq::load_model(base)?;
    match sidecar {
        Some(p) => adapters::attach_sidecar(&m, p),
        None => Ok(m),
    }
}

/// Masked last-position logits for each row of a same-length prefix batch.
fn next_logits(params: &ModelParams, ctx: Option<&ContextEmbeddings>, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let len = prefixes[0].len();
    let batch = pad_batch(prefixes, len);
    let src = ctx.map_or(Source::Null, Source::Embedded);
    let logits = decoder_logits(params, src, &batch)?;
    Ok((0..prefixes.len())
        .map(|b| {
            let mut row = logits.row(b * len + len - 1).to_vec();
            mask_logits(&mut row);
            row
        })
        .collect())
}

fn probs(mut row: Vec<f64>) -> Vec<f64> {
    softmax_in_place(&mut row);
    row
}

fn strip(mut ids: Vec<usize>) -> Vec<usize> {
    ids.remove(0);
    if let Some(p) = ids.iter().position(|&t| t == EOS) {
        ids.truncate(p);
    }
    ids
}

fn encode_batch(params: &ModelParams, contexts: &[Vec<usize>]) -> Result<ContextEmbeddings> {
    encode_context(params, &pad_tight(contexts, params.config.max_positions))
}

fn select_rows(ctx: &ContextEmbeddings, rows: &[usize]) -> ContextEmbeddings {
    let d = ctx.values.cols();
    let mut values = Vec::with_capacity(rows.len() * ctx.len * d);
    let mut mask = Vec::with_capacity(rows.len() * ctx.len);
    for &r in rows {
        values.extend_from_slice(&ctx.values.data()[r * ctx.len * d..(r + 1) * ctx.len * d]);
        mask.extend_from_slice(&ctx.mask[r * ctx.len..(r + 1) * ctx.len]);
    }
    ContextEmbeddings {
        values: crate::tensor::Tensor::from_vec(&[rows.len() * ctx.len, d], values),
        mask,
        batch: rows.len(),
        len: ctx.len,
    }
}

fn step_budget(params: &ModelParams, settings: &DecodeSettings) -> usize {
    settings.max_new_tokens.min(params.config.max_positions - 1)
}

/// Generates one ending per encoded context; ids exclude BOS and EOS.
pub fn generate_batch(
    params: &ModelParams,
    contexts: &[Vec<usize>],
    settings: &DecodeSettings,
) -> Result<Vec<Vec<usize>>> {
    settings.validate()?;
    if contexts.is_empty() {
        return Ok(Vec::new());
    }
    let ctx = encode_batch(params, contexts)?;
    match settings.strategy {
        Strategy::Greedy => sample_batch(params, Some(&ctx), contexts.len(), settings, None),
        Strategy::TopK { k, temperature } => {
            sample_batch(params, Some(&ctx), contexts.len(), settings, Some((k, temperature)))
        }
        Strategy::Beam { k } => (0..contexts.len())
            .map(|i| beam_one(params, &select_rows(&ctx, &[i]), k, step_budget(params, settings)))
            .collect(),
    }
}

/// Unconditional samples from the decoder as a language model.
pub fn generate_unconditional(params: &ModelParams, n: usize, settings: &DecodeSettings) -> Result<Vec<Vec<usize>>> {
    settings.validate()?;
    let topk = match settings.strategy {
        Strategy::TopK { k, temperature } => Some((k, temperature)),
        _ => None,
    };
    sample_batch(params, None, n, settings, topk)
}

fn sample_batch(
    params: &ModelParams,
    ctx: Option<&ContextEmbeddings>,
    n: usize,
    settings: &DecodeSettings,
    topk: Option<(usize, f64)>,
) -> Result<Vec<Vec<usize>>> {
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| ChaCha8Rng::seed_from_u64(settings.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
        .collect();
    let mut seqs = vec![vec![BOS]; n];
    let mut done = vec![false; n];
    for _ in 0..step_budget(params, settings) {
        let rows = next_logits(params, ctx, &seqs)?;
        for (i, row) in rows.into_iter().enumerate() {
            let tok = if done[i] {
                EOS
            } else {
                match topk {
                    None => argmax(&row),
                    Some((k, t)) => sample_top_k(&row, k, t, &mut rngs[i]),
                }
            };
            done[i] |= tok == EOS;
            seqs[i].push(tok);
        }
        if done.iter().all(|d| *d) {
            break;
        }
    }
    Ok(seqs.into_iter().map(strip).collect())
}

fn sample_top_k(row: &[f64], k: usize, temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&i| row[i].is_finite()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    let mut w: Vec<f64> = idx.iter().map(|&i| row[i] / temperature).collect();
    softmax_in_place(&mut w);
    let mut u: f64 = rng.gen();
    for (j, p) in w.iter().enumerate() {
        if u < *p {
            return idx[j];
        }
        u -= p;
    }
    idx[idx.len() - 1]
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn beam_one(params: &ModelParams, ctx: &ContextEmbeddings, k: usize, steps: usize) -> Result<Vec<usize>> {
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..steps {
        let rep = select_rows(ctx, &vec![0; live.len()]);
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(s, _)| s.clone()).collect();
        let rows = next_logits(params, Some(&rep), &prefixes)?;
        let mut cand: Vec<(usize, usize, f64)> = Vec::new();
        for (b, row) in rows.iter().enumerate() {
            for (v, lp) in log_softmax(row).into_iter().enumerate() {
                if lp.is_finite() {
                    cand.push((b, v, live[b].1 + lp));
                }
            }
        }
        cand.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
        let mut next = Vec::new();
        for (b, v, score) in cand.into_iter().take(k) {
            let mut s = live[b].0.clone();
            s.push(v);
            if v == EOS {
                finished.push((s, score));
            } else {
                next.push((s, score));
            }
        }
        let best_done = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        if next.is_empty() || next.iter().all(|n| n.1 <= best_done) {
            live = next;
            break;
        }
        live = next;
    }
    finished.extend(live);
    let best = finished
        .into_iter()
        .reduce(|a, b| if b.1 > a.1 { b } else { a })
        .expect("beam keeps at least one hypothesis");
    Ok(strip(best.0))
}

/// Decodes the ending for one context given as sentences.
pub fn generate_ending<S: AsRef<str>>(
    params: &ModelParams,
    vocab: &Vocabulary,
    context: &[S],
    settings: &DecodeSettings,
) -> Result<String> {
    let ids = vocab.encode_context(context);
    let out = generate_batch(params, &[ids], settings)?;
    vocab.decode(&out[0])
}

/// `argmax_v p_task[v] + lambda * p_style[v]`, lowest id on ties.
pub fn fuse_step(p_task: &[f64], p_style: &[f64], lambda: f64) -> usize {
    let sum: Vec<f64> = p_task.iter().zip(p_style).map(|(a, b)| a + lambda * b).collect();
    argmax(&sum)
}

/// Shallow fusion of a story model with a style language model run against
/// the null context.
pub fn fusion_generate(
    s2s: &ModelParams,
    lm: &ModelParams,
    contexts: &[Vec<usize>],
    max_new_tokens: usize,
    lambda: f64,
) -> Result<Vec<Vec<usize>>> {
    if s2s.config.vocab_size != lm.config.vocab_size {
        return Err(Error::Shape(format!(
            "vocabulary sizes differ: {} vs {}",
            s2s.config.vocab_size, lm.config.vocab_size
        )));
    }
    if contexts.is_empty() {
        return Ok(Vec::new());
    }
    let ctx = encode_batch(s2s, contexts)?;
    let n = contexts.len();
    let mut seqs = vec![vec![BOS]; n];
    let mut done = vec![false; n];
    let steps = max_new_tokens.min(s2s.config.max_positions - 1).min(lm.config.max_positions - 1);
    for _ in 0..steps {
        let task = next_logits(s2s, Some(&ctx), &seqs)?;
        let style = next_logits(lm, None, &seqs)?;
        for i in 0..n {
            let tok = if done[i] {
                EOS
            } else {
                fuse_step(&probs(task[i].clone()), &probs(style[i].clone()), lambda)
            };
            done[i] |= tok == EOS;
            seqs[i].push(tok);
        }
        if done.iter().all(|d| *d) {
            break;
        }
    }
    Ok(seqs.into_iter().map(strip).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq2seq::{init_model, ModelConfig};

    fn model(seed: u64) -> ModelParams {
        init_model(&ModelConfig {
            vocab_size: 14,
            model_dim: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            ffn_dim: 16,
            max_positions: 12,
            dropout: 0.0,
            seed,
            high_precision: false,
        })
        .unwrap()
    }

    fn contexts() -> Vec<Vec<usize>> {
        (0..6).map(|i| vec![5 + i % 4, SEP, 7 + i % 5, 9]).collect()
    }

    #[test]
    fn eos_first_gives_empty_ending() {
        let mut m = model(1);
        m.store.get_mut("lm.b").data_mut()[EOS] = 1e6;
        let out = generate_batch(&m, &contexts(), &DecodeSettings::default()).unwrap();
        assert!(out.iter().all(|o| o.is_empty()));
    }

    #[test]
    fn greedy_repeats_and_avoids_specials() {
        let m = model(2);
        let s = DecodeSettings {
            max_new_tokens: 8,
            ..Default::default()
        };
        let a = generate_batch(&m, &contexts(), &s).unwrap();
        assert_eq!(a, generate_batch(&m, &contexts(), &s).unwrap());
        assert!(a.iter().flatten().all(|t| !BANNED.contains(t) && *t != EOS));
        assert!(a.iter().all(|o| o.len() <= 8));
    }

    #[test]
    fn beam_one_matches_greedy() {
        let m = model(3);
        let g = DecodeSettings {
            max_new_tokens: 6,
            ..Default::default()
        };
        let b = DecodeSettings {
            strategy: Strategy::Beam { k: 1 },
            ..g.clone()
        };
        assert_eq!(generate_batch(&m, &contexts(), &g).unwrap(), generate_batch(&m, &contexts(), &b).unwrap());
    }

    #[test]
    fn sampling_is_seeded() {
        let m = model(4);
        let s = DecodeSettings {
            strategy: Strategy::TopK { k: 3, temperature: 1.0 },
            max_new_tokens: 6,
            seed: 9,
        };
        assert_eq!(generate_batch(&m, &contexts(), &s).unwrap(), generate_batch(&m, &contexts(), &s).unwrap());
    }

    #[test]
    fn fusion_hand_arithmetic() {
        assert_eq!(fuse_step(&[0.5, 0.3, 0.2], &[0.1, 0.5, 0.4], 1.0), 1);
        assert_eq!(fuse_step(&[0.2, 0.5, 0.3], &[1.0 / 3.0; 3], 1.0), 1);
        let p = [0.1, 0.2, 0.4, 0.3];
        assert_eq!(fuse_step(&p, &p, 1.0), argmax(&p));
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn fusion_with_itself_is_greedy() {
        let m = model(5);
        let g = generate_batch(
            &m,
            &contexts(),
            &DecodeSettings {
                max_new_tokens: 6,
                ..Default::default()
            },
        )
        .unwrap();
        // a null-context LM that is flat: zero LM head
        let mut flat = model(6);
        flat.store.get_mut("lm.w").data_mut().fill(0.0);
        flat.store.get_mut("lm.b").data_mut().fill(0.0);
        assert_eq!(fusion_generate(&m, &flat, &contexts(), 6, 1.0).unwrap(), g);
        assert!(fusion_generate(&m, &model(7), &contexts(), 6, 1.0).is_ok());
        let mut other = model(8);
        other.config.vocab_size = 3;
        assert!(fusion_generate(&m, &other, &contexts(), 6, 1.0).is_err());
    }
}
