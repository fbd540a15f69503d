//! Trains the style judge and the cloze judge on the synthetic corpus and
//! probes them.

use stlr::cli::{self, ExperimentConfig};

fn main() -> stlr::Result<()> {
    let dir = std::path::Path::new("target/judges_example");
    let _ = std::fs::remove_dir_all(dir);
    let cfg = ExperimentConfig::desk(1);
    let data = cli::prepare(&cfg, &dir.join("data"))?;
    let j = cli::train_judges(&cfg, &data, &dir.join("judges"))?;
    for (k, m) in &j.metrics {
        println!("{k}: held-out accuracy {:.3} on {} examples", m.heldout_accuracy, m.n_heldout);
    }
    let probes = ["sadly the cake was awful .", "amy baked bread ."];
    for (t, p) in probes.iter().zip(j.style.probability(&probes)) {
        println!("style p={p:.3}  {t}");
    }
    let s = &data.stories.test[0];
    let other = &data.stories.test[1].ending;
    println!("context: {}", s.context.join(" "));
    println!("cloze {:.3}  true ending: {}", j.cloze.score(&s.context, &s.ending), s.ending);
    println!("cloze {:.3}  other ending: {other}", j.cloze.score(&s.context, other));
    Ok(())
}
