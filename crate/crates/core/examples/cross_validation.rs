//! Five-fold training on synthetic data, written to a run directory.
//!
//!     cargo run --release --example cross_validation -- /tmp/raa-run

use raa_mil::dataio::{holdout_split, synthesize_bags, Dataset, SynthConfig};
use raa_mil::trainer::{plan_folds, run_cv, TrainConfig};

fn main() -> raa_mil::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-run".into());
    let synth = SynthConfig {
        patients_per_class: 20,
        rows: 6,
        cols: 6,
        dim: 16,
        motif_strength: 2.5,
        ..SynthConfig::default()
    };
    let data = Dataset::from_bags(synthesize_bags(&synth)?)?;
    let cfg = TrainConfig {
        max_epochs: 15,
        attention_hidden: 16,
        classifier_hidden: 16,
        lr: 1e-3,
        test_ids: holdout_split(&data.labels(), 5, 0)?,
        ..TrainConfig::default()
    };
    let plan = plan_folds(&data, &cfg)?;
    let run = run_cv(&data, &plan, &cfg, Some(out.as_ref()))?;
    for f in &run.report.folds {
        println!("{f:?}");
    }
    for line in &run.report.summary {
        println!("{line}");
    }
    println!("run directory: {out}");
    Ok(())
}
