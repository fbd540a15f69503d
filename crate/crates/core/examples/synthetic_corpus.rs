//! Generates the bundled synthetic corpus and prints a few rows.
//!
//! cargo run --release --example synthetic_corpus -- [out_dir]

use stlr::corpus::{self, SyntheticSpec};

fn main() -> stlr::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/synthetic".into());
    let spec = SyntheticSpec::desk_default(1);
    let c = corpus::generate_synthetic(&spec)?;
    corpus::write_synthetic(out.as_ref(), &c)?;
    println!("{} stories, {} captions -> {out}", c.stories.len(), c.captions.len());
    for s in c.stories.iter().take(2) {
        println!("story: {}", s.sentences().join(" "));
    }
    for cap in c.captions.iter().take(3) {
        println!("caption [{}]: {}", cap.style, cap.text);
    }
    Ok(())
}
