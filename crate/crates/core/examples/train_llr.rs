//! The three training phases on a small synthetic corpus: full fine-tune,
//! adapter-only style language modelling, adapter-only relearning. Prints
//! validation losses and the style ratio of phase-3 snapshots.

use stlr::cli::{self, ExperimentConfig};
use stlr::trainer::{self, LlrInputs};

fn main() -> stlr::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/llr_example".into());
    let out = std::path::Path::new(&out);
    let _ = std::fs::remove_dir_all(out);
    let cfg = ExperimentConfig::desk(1);
    let data = cli::prepare(&cfg, &out.join("data"))?;
    let pd = cli::phase_data(&cfg, &data)?;
    let model = cli::fresh_model(&cfg, &data)?;
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
    let m = &llr.manifest;
    for (name, e) in [("phase1", &m.phase1), ("phase2", &m.phase2), ("phase3", &m.phase3)] {
        println!("{name}: completed {} checkpoint {}", e.completed, e.checkpoint_hash.as_deref().unwrap_or("-"));
    }
    let judges = cli::train_judges(&cfg, &data, &out.join("judges"))?;
    let val: Vec<Vec<String>> = data.stories.val.iter().map(|s| s.context.clone()).collect();
    let curve = trainer::monitor_forgetting(&llr.phase2, &llr.snapshots, Some(&judges.style), &val, &cfg.decode)?;
    print!("{}", trainer::forgetting_csv(&curve));
    let sample = cli::generate_endings(&llr.phase3, &data.vocab, &val[..3], &cfg.decode)?;
    for (c, e) in val.iter().zip(sample) {
        println!("{} => {e}", c.join(" "));
    }
    Ok(())
}
