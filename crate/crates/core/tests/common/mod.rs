//! Independent oracles and criterion checks shared by the integration tests
//! and the acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stlr::adapters::{self, AdapterConfig, AdapterVariant};
use stlr::cli::{self, ExperimentConfig, RunReport, DISC, ENCDEC, FUSION, LLR, STAGE2};
use stlr::decoding::{self, DecodeSettings};
use stlr::discbase::{self, CnnConfig, TextCnn};
use stlr::evalsuite;
use stlr::judges::{self, Cut, Distance, Linkage};
use stlr::params::ParameterGroup;
use stlr::seq2seq::{self, init_model, ModelConfig, ModelParams, Source};
use stlr::tensor::Tensor;
use stlr::textpipe::{pad_batch, Batch};
use stlr::trainer::{self, PhasePlan};

/// Outcome of one criterion or sub-claim.
#[derive(Clone, Debug)]
pub struct Check {
    pub ok: bool,
    pub detail: String,
}

impl Check {
    pub fn new(ok: bool, detail: impl Into<String>) -> Self {
        Self { ok, detail: detail.into() }
    }

    pub fn all(parts: Vec<(&str, Check)>) -> Self {
        let ok = parts.iter().all(|(_, c)| c.ok);
        let detail = parts
            .iter()
            .map(|(n, c)| format!("{n} {} ({})", if c.ok { "ok" } else { "FAILED" }, c.detail))
            .collect::<Vec<_>>()
            .join("; ");
        Self { ok, detail }
    }

    pub fn assert(&self) {
        println!("{}", self.detail);
        assert!(self.ok, "{}", self.detail);
    }
}

// ---------------------------------------------------------------------------
// Metric oracles. Tokens are lowercase words separated by single spaces.

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngrams<'a>(t: &[&'a str], n: usize) -> Vec<Vec<&'a str>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn count_of<T: PartialEq>(items: &[T], x: &T) -> usize {
    items.iter().filter(|y| *y == x).count()
}

pub fn oracle_bleu1(hyps: &[String], refs: &[String]) -> f64 {
    let mut matched = 0usize;
    let mut c = 0usize;
    let mut r = 0usize;
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (toks(h), toks(rf));
        let mut seen: Vec<&str> = Vec::new();
        for w in &h {
            if seen.contains(w) {
                continue;
            }
            seen.push(w);
            matched += count_of(&h, w).min(count_of(&rf, w));
        }
        c += h.len();
        r += rf.len();
    }
    if c == 0 {
        return 0.0;
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * matched as f64 / c as f64
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn oracle_lcs(a: &[&str], b: &[&str]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&str> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        let mut it = b.iter();
        if sub.iter().all(|w| it.any(|x| x == w)) {
            best = best.max(sub.len());
        }
    }
    best
}

pub fn oracle_rouge_l(hyps: &[String], refs: &[String]) -> f64 {
    let mut total = 0.0;
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (toks(h), toks(rf));
        let l = oracle_lcs(&h, &rf) as f64;
        if l > 0.0 {
            let (p, r) = (l / h.len() as f64, l / rf.len() as f64);
            total += 2.0 * p * r / (p + r);
        }
    }
    total / hyps.len() as f64
}

pub fn oracle_cider(hyps: &[String], refs: &[String]) -> f64 {
    let n_docs = refs.len() as f64;
    let mut total = 0.0;
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (toks(h), toks(rf));
        let mut sum = 0.0;
        let mut orders = 0;
        for n in 1..=4 {
            let rg = ngrams(&rf, n);
            if rg.is_empty() {
                continue;
            }
            orders += 1;
            let hg = ngrams(&h, n);
            let idf = |g: &Vec<&str>| {
                let df = refs.iter().filter(|d| ngrams(&toks(d), n).contains(g)).count() as f64;
                ((1.0 + n_docs) / (1.0 + df)).ln() + 1.0
            };
            let vec_of = |grams: &[Vec<&str>]| -> BTreeMap<String, f64> {
                let mut m = BTreeMap::new();
                for g in grams {
                    let tf = count_of(grams, g) as f64 / grams.len() as f64;
                    m.insert(g.join(" "), tf * idf(g));
                }
                m
            };
            let (vh, vr) = (vec_of(&hg), vec_of(&rg));
            let dot: f64 = vh.iter().map(|(k, x)| x * vr.get(k).copied().unwrap_or(0.0)).sum();
            let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let (nh, nr) = (norm(&vh), norm(&vr));
            if nh > 0.0 && nr > 0.0 {
                sum += dot / (nh * nr);
            }
        }
        if orders > 0 {
            total += sum / orders as f64;
        }
    }
    10.0 * total / hyps.len() as f64
}

/// Random micro-cases of at most six tokens over a four-word alphabet.
pub fn micro_cases(seed: u64, n: usize) -> Vec<(Vec<String>, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["a", "b", "c", "d"];
    let sentence = |rng: &mut ChaCha8Rng, min: usize| -> String {
        let len = rng.gen_range(min..=6);
        (0..len).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
    };
    (0..n)
        .map(|_| {
            let pairs = rng.gen_range(1..=3);
            let hyps = (0..pairs).map(|_| sentence(&mut rng, 0)).collect();
            let refs = (0..pairs).map(|_| sentence(&mut rng, 1)).collect();
            (hyps, refs)
        })
        .collect()
}

pub fn check_metric_oracles() -> Check {
    let mut worst: f64 = 0.0;
    for (h, r) in micro_cases(20, 20) {
        let pairs = [
            (evalsuite::bleu1(&h, &r).unwrap(), oracle_bleu1(&h, &r)),
            (evalsuite::rouge_l(&h, &r).unwrap(), oracle_rouge_l(&h, &r)),
            (evalsuite::cider(&h, &r).unwrap(), oracle_cider(&h, &r)),
        ];
        for (a, b) in pairs {
            worst = worst.max((a - b).abs());
        }
    }
    let overlap = Check::new(worst <= 1e-9, format!("20 micro-cases, max |diff| {worst:.2e}"));

    let ris = [
        (vec![0.9, 0.9, 0.9], 1.0),
        (vec![0.1, 0.1], 0.0),
        (vec![0.9, 0.4, 0.6], 2.0 / 3.0),
    ]
    .iter()
    .all(|(s, want)| evalsuite::ris_from_scores(s, 0.5).unwrap() == *want);
    let rbae = evalsuite::better_ratio(&[0.8, 0.3, 0.5], &[0.2, 0.7, 0.5]).unwrap() == 1.0 / 3.0
        && evalsuite::better_ratio(&[0.4, 0.4], &[0.4, 0.4]).unwrap() == 0.0
        && evalsuite::better_ratio(&[0.9, 0.8], &[0.1, 0.2]).unwrap() == 1.0;
    let pool: Vec<String> = (0..6).map(|i| format!("ending {i}")).collect();
    let p1 = evalsuite::random_pairing(6, &pool, 3).unwrap();
    let p2 = evalsuite::random_pairing(6, &pool, 3).unwrap();
    let rbar = p1 == p2 && p1.iter().enumerate().all(|(i, &j)| pool[j] != pool[i]);
    let quads = {
        let q = evalsuite::quadrants(&[true, true, false], &[true, false, true]).unwrap();
        (q.tt, q.tf, q.ft, q.ff) == (1, 1, 1, 0) && q.p_valid_given_styled() == Some(0.5)
    };
    Check::all(vec![
        ("overlap metrics", overlap),
        ("ris", Check::new(ris, "three worked examples")),
        ("rbae", Check::new(rbae, "ties and arithmetic")),
        ("rbar pairing", Check::new(rbar, "seeded, never own story")),
        ("quadrants", Check::new(quads, "worked example")),
    ])
}

// ---------------------------------------------------------------------------
// Gradient checks

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        model_dim: 8,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        ffn_dim: 16,
        max_positions: 16,
        dropout: 0.0,
        seed,
        high_precision: true,
    }
}

pub fn tiny_batches(seed: u64) -> (Batch, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = |min: usize, max: usize| -> Vec<usize> {
        let len = rng.gen_range(min..=max);
        (0..len).map(|_| rng.gen_range(4..12)).collect()
    };
    let src: Vec<Vec<usize>> = (0..2).map(|_| seq(3, 6)).collect();
    let tgt: Vec<Vec<usize>> = (0..2)
        .map(|_| {
            let mut t = vec![stlr::textpipe::BOS];
            t.extend(seq(2, 4));
            t.push(stlr::textpipe::EOS);
            t
        })
        .collect();
    (pad_batch(&src, 8), pad_batch(&tgt, 8))
}

/// Perturbs a random subset of each gradient tensor's coordinates and
/// compares central differences with the analytic values. Returns the worst
/// relative error.
pub fn gradcheck<F>(params: &ModelParams, grads: &[(usize, Tensor)], per_tensor: usize, seed: u64, loss: F) -> f64
where
    F: Fn(&ModelParams) -> f64,
{
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (idx, g) in grads {
        let n = g.len();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in coords {
            let mut plus = params.clone();
            plus.store.entry_mut(*idx).tensor.data_mut()[j] += h;
            let mut minus = params.clone();
            minus.store.entry_mut(*idx).tensor.data_mut()[j] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = g.data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn all_groups(p: &ModelParams) -> BTreeSet<ParameterGroup> {
    p.store.groups()
}

/// Randomizes adapter tensors so gradients flow through every path.
pub fn perturb_adapters(p: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..p.store.len() {
        let e = p.store.entry_mut(i);
        if e.group == ParameterGroup::Adapter {
            for x in e.tensor.data_mut() {
                *x += rng.gen_range(-0.3..0.3);
            }
        }
    }
}

pub fn tiny_discriminator(vocab: usize, seed: u64) -> TextCnn {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<usize>> = (0..24).map(|_| (0..5).map(|_| rng.gen_range(4..vocab)).collect()).collect();
    let labels: Vec<usize> = (0..24).map(|i| i % 2).collect();
    let cfg = CnnConfig {
        embed_dim: 6,
        n_filters: 4,
        epochs: 2,
        seed,
        ..CnnConfig::default()
    };
    discbase::train_cnn(&cfg, vocab, 1, &seqs, &labels).unwrap()
}

pub fn check_gradients() -> Check {
    let params = init_model(&tiny_config(5)).unwrap();
    let (src, tgt) = tiny_batches(6);
    let groups = all_groups(&params);
    let per = 6;

    let (_, g) = seq2seq::loss_and_grads(&params, Source::Tokens(&src), &tgt, &groups, &mut seq2seq::Dropout::off()).unwrap();
    let tf = gradcheck(&params, &g, per, 1, |p| seq2seq::teacher_forcing_loss(p, Source::Tokens(&src), &tgt).unwrap());

    let (_, g) = seq2seq::loss_and_grads(&params, Source::Null, &tgt, &groups, &mut seq2seq::Dropout::off()).unwrap();
    let lm = gradcheck(&params, &g, per, 2, |p| seq2seq::lm_loss(p, &tgt).unwrap());

    let disc = tiny_discriminator(12, 7);
    let step = |p: &ModelParams| {
        discbase::discriminator_augmented_step(p, &src, &tgt, &disc, 1.0, 1.0, &groups, &mut seq2seq::Dropout::off()).unwrap()
    };
    let g = step(&params).grads;
    let da = gradcheck(&params, &g, per, 3, |p| step(p).total);

    let mut worst_adapter: f64 = 0.0;
    for v in AdapterVariant::ALL {
        let mut cfg = AdapterConfig::new(v, 4);
        cfg.seed = 9;
        let mut m = adapters::inject_adapters(&params, &cfg).unwrap();
        perturb_adapters(&mut m, 11);
        let only: BTreeSet<ParameterGroup> = [ParameterGroup::Adapter].into();
        let (_, g) = seq2seq::loss_and_grads(&m, Source::Tokens(&src), &tgt, &only, &mut seq2seq::Dropout::off()).unwrap();
        worst_adapter = worst_adapter.max(gradcheck(&m, &g, 4, 4, |p| {
            seq2seq::teacher_forcing_loss(p, Source::Tokens(&src), &tgt).unwrap()
        }));
    }
    let c = |x: f64| Check::new(x <= 1e-3, format!("max rel err {x:.2e}"));
    Check::all(vec![
        ("teacher_forcing_loss", c(tf)),
        ("lm_loss", c(lm)),
        ("discriminator_augmented_step", c(da)),
        ("adapter variants", c(worst_adapter)),
    ])
}

// ---------------------------------------------------------------------------
// Adapter properties

/// Adapter scalars from first principles: per site a d→b→d bottleneck with
/// biases (Kronecker factors for compacter), site layer norms for the
/// pfeiffer-style variants, plus shared tensors.
pub fn closed_form_adapter_count(cfg: &AdapterConfig, m: &ModelConfig) -> usize {
    let (d, b, n) = (m.model_dim, cfg.bottleneck, cfg.compacter_n);
    let dec_layers = match &cfg.layers {
        Some(l) => l.iter().collect::<BTreeSet<_>>().len(),
        None => m.n_dec_layers,
    };
    let layers = dec_layers + if cfg.inject_encoder { m.n_enc_layers } else { 0 };
    let per_layer_sites = if cfg.variant == AdapterVariant::Houlsby { 2 } else { 1 };
    let sites = layers * per_layer_sites;
    let weights = match cfg.variant {
        AdapterVariant::Compacter => 2 * n * (d / n) * (b / n),
        _ => 2 * d * b,
    };
    let norm = match cfg.variant {
        AdapterVariant::Pfeiffer | AdapterVariant::Invertible => 2 * d,
        _ => 0,
    };
    let shared = match cfg.variant {
        AdapterVariant::Compacter => 2 * n * n * n,
        AdapterVariant::Invertible => 2 * ((d / 2) * b + b + b * (d / 2) + d / 2),
        _ => 0,
    };
    sites * (weights + b + d + norm) + shared
}

pub fn check_adapter_properties() -> Check {
    let base = init_model(&ModelConfig {
        high_precision: false,
        ..tiny_config(3)
    })
    .unwrap();
    let (src, tgt) = tiny_batches(4);
    let base_logits = seq2seq::decoder_logits(&base, Source::Tokens(&src), &tgt).unwrap();
    let mut drift: f64 = 0.0;
    for v in AdapterVariant::ALL {
        let m = adapters::inject_adapters(&base, &AdapterConfig::new(v, 4)).unwrap();
        let l = seq2seq::decoder_logits(&m, Source::Tokens(&src), &tgt).unwrap();
        drift = drift.max(l.max_abs_diff(&base_logits));
    }

    let hp = init_model(&tiny_config(3)).unwrap();
    let mut inv = adapters::inject_adapters(&hp, &AdapterConfig::new(AdapterVariant::Invertible, 4)).unwrap();
    perturb_adapters(&mut inv, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = Tensor::from_vec(&[5, 8], (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let fwd = adapters::invertible_transform(&inv, &h).unwrap();
    let back = adapters::invertible_inverse_transform(&inv, &fwd).unwrap();
    let round_trip = back.max_abs_diff(&h);
    let moved = fwd.max_abs_diff(&h);

    let mut mismatches = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for v in AdapterVariant::ALL {
        for _ in 0..3 {
            let n_dec = rng.gen_range(1..=3);
            let mc = ModelConfig {
                model_dim: [8, 12, 16][rng.gen_range(0..3)],
                n_enc_layers: rng.gen_range(1..=2),
                n_dec_layers: n_dec,
                n_heads: 2,
                ffn_dim: 16,
                ..tiny_config(rng.gen())
            };
            let mut cfg = AdapterConfig::new(v, [2, 4][rng.gen_range(0..2)]);
            cfg.inject_encoder = rng.gen_bool(0.5);
            if rng.gen_bool(0.5) {
                cfg.layers = Some(vec![n_dec - 1]);
            }
            let m = adapters::inject_adapters(&init_model(&mc).unwrap(), &cfg).unwrap();
            let actual: usize = m.store.group_entries(ParameterGroup::Adapter).map(|e| e.tensor.len()).sum();
            let want = closed_form_adapter_count(&cfg, &mc);
            if actual != want || cfg.scalar_count(&mc) != want {
                mismatches.push(format!("{v} d={} b={}: {actual} vs {want}", mc.model_dim, cfg.bottleneck));
            }
        }
    }
    Check::all(vec![
        ("identity at injection", Check::new(drift <= 1e-6, format!("max logit drift {drift:.2e}"))),
        (
            "invertible round trip",
            Check::new(round_trip <= 1e-5 && moved > 1e-3, format!("error {round_trip:.2e}, transform moved {moved:.2e}")),
        ),
        (
            "parameter counts",
            Check::new(mismatches.is_empty(), format!("18 configs, mismatches {mismatches:?}")),
        ),
    ])
}

// ---------------------------------------------------------------------------
// Fusion

pub fn check_fusion() -> Check {
    let hand = decoding::fuse_step(&[0.5, 0.3, 0.2], &[0.1, 0.5, 0.4], 1.0) == 1;

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut shift_ok = true;
    for _ in 0..200 {
        let n = rng.gen_range(2..8);
        let p: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let c = rng.gen_range(-5.0..5.0);
        let base = decoding::fuse_step(&p, &q, 1.0);
        let ps: Vec<f64> = p.iter().map(|x| x + c).collect();
        let qs: Vec<f64> = q.iter().map(|x| x + c).collect();
        shift_ok &= decoding::fuse_step(&ps, &q, 1.0) == base && decoding::fuse_step(&p, &qs, 1.0) == base;
    }

    let s2s = init_model(&ModelConfig {
        high_precision: false,
        ..tiny_config(17)
    })
    .unwrap();
    let mut uniform = init_model(&ModelConfig {
        high_precision: false,
        ..tiny_config(18)
    })
    .unwrap();
    for name in ["lm.w", "lm.b"] {
        for x in uniform.store.get_mut(name).data_mut() {
            *x = 0.0;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let contexts: Vec<Vec<usize>> = (0..20).map(|_| (0..6).map(|_| rng.gen_range(4..12)).collect()).collect();
    let greedy = decoding::generate_batch(&s2s, &contexts, &DecodeSettings::default()).unwrap();
    let max_new = DecodeSettings::default().max_new_tokens;
    let with_uniform = decoding::fusion_generate(&s2s, &uniform, &contexts, max_new, 1.0).unwrap();
    // Zero cross-attention output: the decoder ignores its source, so the
    // story distribution equals the null-source LM distribution.
    let mut blind = s2s.clone();
    for name in ["dec.0.cross.o.w", "dec.0.cross.o.b"] {
        for x in blind.store.get_mut(name).data_mut() {
            *x = 0.0;
        }
    }
    let blind_greedy = decoding::generate_batch(&blind, &contexts, &DecodeSettings::default()).unwrap();
    let with_self = decoding::fusion_generate(&blind, &blind, &contexts, max_new, 1.0).unwrap();
    Check::all(vec![
        ("uniform LM", Check::new(with_uniform == greedy, "20 contexts equal greedy s2s")),
        ("identical distribution", Check::new(with_self == blind_greedy, "20 contexts equal greedy s2s")),
        ("hand arithmetic", Check::new(hand, "(0.5,0.3,0.2)+(0.1,0.5,0.4) picks token 1")),
        ("constant shift", Check::new(shift_ok, "200 random shifts")),
    ])
}

// ---------------------------------------------------------------------------
// Judges and clustering

/// Four orthogonal blocks of three styles each, shuffled, with small noise.
pub fn planted_blocks(seed: u64) -> (Tensor, Vec<String>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 8;
    let mut order: Vec<usize> = (0..12).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut block = Vec::new();
    for &i in &order {
        let b = i / 3;
        for j in 0..dim {
            let base = if j / 2 == b { 1.0 } else { 0.0 };
            data.push(base + rng.gen_range(-0.05..0.05));
        }
        labels.push(format!("style{i}"));
        block.push(b);
    }
    (Tensor::from_vec(&[12, dim], data), labels, block)
}

pub fn check_planted_clustering() -> Check {
    let mut failures = Vec::new();
    for seed in 0..5 {
        let (emb, labels, block) = planted_blocks(seed);
        for (linkage, distance) in [
            (Linkage::Average, Distance::Cosine),
            (Linkage::Complete, Distance::Euclidean),
            (Linkage::Single, Distance::Cosine),
        ] {
            let r = judges::cluster_styles(&emb, &labels, linkage, distance, Cut::K(4)).unwrap();
            let recovered = r.groups.len() == 4
                && r.groups.iter().all(|g| g.iter().all(|&i| block[i] == block[g[0]]) && g.len() == 3)
                && r.merges.len() == 11;
            if !recovered {
                failures.push(format!("seed {seed} {linkage:?}/{distance:?}"));
            }
        }
    }
    Check::new(failures.is_empty(), format!("5 seeds x 3 settings, failures {failures:?}"))
}

// ---------------------------------------------------------------------------
// Pipeline runs

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub report: RunReport,
    pub seconds: f64,
}

impl SeedRun {
    pub fn model(&self, name: &str) -> &stlr::evalsuite::EvalReport {
        self.report.model(name).unwrap_or_else(|| panic!("no {name} report"))
    }
}

pub fn run_seed(seed: u64, root: &Path) -> SeedRun {
    let cfg = ExperimentConfig::desk(seed);
    let dir = root.join(format!("seed{seed}"));
    let t = Instant::now();
    let out = cli::cmd_run(&cfg, &dir).unwrap();
    SeedRun {
        seed,
        dir,
        report: out.report,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Phase 3 rerun from the saved phase-2 adapters with `factor` times the
/// nominal budget. Returns the extended forgetting curve.
pub fn extended_forgetting(run: &SeedRun, factor: usize) -> (Vec<(usize, f64)>, ModelParams, ModelParams) {
    let cfg = ExperimentConfig::desk(run.seed);
    let data = cli::load_prepared(&run.dir.join("data")).unwrap();
    let pd = cli::phase_data(&cfg, &data).unwrap();
    let base = seq2seq::load_model(&run.dir.join("phase1")).unwrap();
    let styled = adapters::attach_sidecar(&base, &run.dir.join("phase2")).unwrap();
    let mut plan: PhasePlan = cfg.phases.phase3.clone();
    plan.max_steps = plan.max_steps.map(|m| m * factor);
    plan.snapshot_every = Some(cfg.phases.phase3.snapshot_interval(pd.stories_train.len()));
    let out = trainer::run_phase3(&plan, &styled, &pd.stories_train, &pd.stories_val, None).unwrap();
    let judges = cli::load_judges(&run.dir.join("judges")).unwrap();
    let val: Vec<Vec<String>> = data.stories.val.iter().map(|s| s.context.clone()).collect();
    let curve = trainer::monitor_forgetting(&styled, &out.snapshots, Some(&judges.style), &val, &cfg.decode).unwrap();
    (curve, base, out.phase.params)
}

/// Names of every non-adapter tensor whose bits differ between two models.
pub fn changed_base_tensors(a: &ModelParams, b: &ModelParams) -> (usize, Vec<String>) {
    let mut total = 0;
    let mut changed = Vec::new();
    for e in a.store.entries() {
        if e.group == ParameterGroup::Adapter {
            continue;
        }
        total += 1;
        let same = b.store.contains(&e.name)
            && e.tensor.shape() == b.store.get(&e.name).shape()
            && e.tensor
                .data()
                .iter()
                .zip(b.store.get(&e.name).data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            changed.push(e.name.clone());
        }
    }
    (total, changed)
}

pub const TABLE_MODELS: [&str; 5] = [ENCDEC, FUSION, DISC, STAGE2, LLR];

pub fn summarize(run: &SeedRun) -> String {
    TABLE_MODELS
        .iter()
        .filter_map(|m| run.report.model(m))
        .map(|r| format!("{} ris {:.3} rbae {} rbar {:.3} bleu1 {:.3}", r.model, r.ris, r.rbae.map_or("NA".into(), |x| format!("{x:.3}")), r.rbar, r.bleu1))
        .collect::<Vec<_>>()
        .join(" | ")
}

/// `holds` of `n` seeds pass when at least four do.
pub fn directional(results: &[(u64, bool, String)]) -> Check {
    let holds = results.iter().filter(|r| r.1).count();
    let detail = results
        .iter()
        .map(|(s, ok, d)| format!("seed {s} {} {d}", if *ok { "holds" } else { "misses" }))
        .collect::<Vec<_>>()
        .join("; ");
    Check::new(holds >= 4, format!("{holds}/{} seeds: {detail}", results.len()))
}

pub fn cnn_default(seed: u64) -> CnnConfig {
    CnnConfig {
        seed,
        ..CnnConfig::default()
    }
}
