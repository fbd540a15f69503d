//! Vocabulary building, context encoding and padded batches.

use stlr::textpipe::{pad_batch, tokenize, Vocabulary};

fn main() -> stlr::Result<()> {
    let texts = ["Amy baked bread.", "Ben hiked the trail!", "Amy hiked, too."];
    let vocab = Vocabulary::build(&texts, 1, 64)?;
    println!("tokens of '{}': {:?}", texts[2], tokenize(texts[2]));
    println!("vocabulary ({}): {:?}", vocab.len(), vocab.tokens());
    let ctx = vocab.encode_context(&["Amy baked bread .", "Ben hiked ."]);
    println!("context ids with SEP: {ctx:?}");
    let target = vocab.encode_target("Amy hiked too .");
    println!("target ids: {target:?} -> '{}'", vocab.decode(&target)?);
    let batch = pad_batch(&[ctx, target], 12);
    for b in 0..batch.batch {
        println!("row {b}: {:?} mask {:?}", batch.row(b), batch.mask_row(b));
    }
    Ok(())
}
