//! The whole experiment from the bundled config: data, three phases,
//! judges, baselines and the results table.
//!
//! cargo run --release --example full_pipeline -- [config] [out_dir]

use stlr::cli::{self, ExperimentConfig};
use stlr::evalsuite;

fn main() -> stlr::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/examples/synthetic.json").into());
    let out = args.next().unwrap_or_else(|| "target/pipeline_example".into());
    let cfg = ExperimentConfig::load(config.as_ref())?;
    for line in cli::stage_plan(&cfg, out.as_ref()) {
        println!("{line}");
    }
    let r = cli::cmd_run(&cfg, out.as_ref())?;
    print!("{}", evalsuite::comparison_markdown(&r.report.models));
    for (step, ris) in &r.report.forgetting {
        println!("phase-3 step {step:>4}: RIS {ris:.3}");
    }
    Ok(())
}
