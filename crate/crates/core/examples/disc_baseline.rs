//! Trains the style discriminator and a generator with the combined
//! teacher-forcing and discriminator loss, printing the loss trace.

use stlr::cli::{self, ExperimentConfig};
use stlr::discbase;

fn main() -> stlr::Result<()> {
    let dir = tempfile_dir("target/disc_example");
    let mut cfg = ExperimentConfig::desk(2);
    cfg.phases.phase1.epochs = 1;
    let data = cli::prepare(&cfg, &dir.join("data"))?;
    let pd = cli::phase_data(&cfg, &data)?;
    let neg: Vec<Vec<usize>> = data.stories.train.iter().map(|s| data.vocab.encode_target(&s.ending)).collect();
    let d = cfg.baselines.disc.clone().expect("desk profile has a disc baseline");
    let disc = discbase::train_discriminator(&pd.style_train.targets, &neg, &d.discriminator, data.vocab.len())?;
    println!("discriminator held-out accuracy {:.3}", disc.heldout_accuracy);
    let model = cli::fresh_model(&cfg, &data)?;
    let (params, steps) = discbase::train_disc_baseline(&cfg.phases.phase1, &model, &pd.stories_train, &disc.cnn, d.lambda, d.temperature)?;
    for s in steps.iter().step_by((steps.len() / 8).max(1)) {
        println!("step {:>4} total {:.3} tf {:.3} disc {:.3}", s.step, s.total, s.teacher_forcing, s.disc);
    }
    let ctx: Vec<Vec<String>> = data.stories.test.iter().take(3).map(|s| s.context.clone()).collect();
    println!("{:?}", cli::generate_endings(&params, &data.vocab, &ctx, &cfg.decode)?);
    Ok(())
}

fn tempfile_dir(p: &str) -> std::path::PathBuf {
    let _ = std::fs::remove_dir_all(p);
    p.into()
}
