//! Greedy, beam and top-k decoding plus shallow fusion with a style LM,
//! using the checkpoints written by the `train_llr` example.
//!
//! cargo run --release --example train_llr
//! cargo run --release --example decoding_strategies

use std::path::Path;

use stlr::cli;
use stlr::decoding::{self, DecodeSettings, Strategy};
use stlr::textpipe::Vocabulary;

fn main() -> stlr::Result<()> {
    let dir = Path::new("target/llr_example");
    let vocab = Vocabulary::load(&dir.join("data/vocab.json"))?;
    let base = decoding::load_generator(&dir.join("phase1"), None)?;
    let styled = decoding::load_generator(&dir.join("phase1"), Some(&dir.join("phase3/adapter")))?;
    let lm = decoding::load_generator(&dir.join("phase1"), Some(&dir.join("phase2")))?;
    let data = cli::load_prepared(&dir.join("data"))?;
    let contexts: Vec<Vec<String>> = data.stories.test.iter().take(3).map(|s| s.context.clone()).collect();
    for strategy in [Strategy::Greedy, Strategy::Beam { k: 3 }, Strategy::TopK { k: 5, temperature: 0.8 }] {
        let s = DecodeSettings {
            strategy,
            ..DecodeSettings::default()
        };
        println!("{strategy:?}");
        println!("  plain : {:?}", cli::generate_endings(&base, &vocab, &contexts, &s)?);
        println!("  styled: {:?}", cli::generate_endings(&styled, &vocab, &contexts, &s)?);
    }
    println!("fusion: {:?}", cli::fusion_endings(&base, &lm, &vocab, &contexts, 32, 1.0)?);
    Ok(())
}
