//! Injects every adapter variant into one model and reports the adapter
//! parameter share and the output drift at injection.

use stlr::adapters::{self, AdapterConfig, AdapterVariant};
use stlr::params::{param_stats, ParameterGroup};
use stlr::seq2seq::{self, init_model, ModelConfig, Source};
use stlr::textpipe::pad_batch;

fn main() -> stlr::Result<()> {
    let base = init_model(&ModelConfig::desk(200, 0))?;
    let src = pad_batch(&[vec![5, 6, 7, 3, 8, 9]], 8);
    let tgt = pad_batch(&[vec![1, 10, 11, 2]], 8);
    let before = seq2seq::decoder_logits(&base, Source::Tokens(&src), &tgt)?;
    println!("{:<11} {:>9} {:>8} {:>10}", "variant", "scalars", "share", "drift");
    for v in AdapterVariant::ALL {
        let m = adapters::inject_adapters(&base, &AdapterConfig::new(v, 16))?;
        let after = seq2seq::decoder_logits(&m, Source::Tokens(&src), &tgt)?;
        let share = param_stats(&m.store)
            .into_iter()
            .find(|(g, _)| *g == ParameterGroup::Adapter)
            .map_or(0.0, |(_, s)| s.fraction);
        let count: usize = m.store.group_entries(ParameterGroup::Adapter).map(|e| e.tensor.len()).sum();
        println!("{:<11} {:>9} {:>7.2}% {:>10.1e}", v.as_str(), count, 100.0 * share, after.max_abs_diff(&before));
    }
    Ok(())
}
