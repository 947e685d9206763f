//! Train RAA-MIL and the vanilla baseline, ensemble each over folds on the
//! held-out patients, and print the comparison tables.

use raa_mil::dataio::{holdout_split, synthesize_bags, Dataset, SynthConfig, TokenBag, CLASS_NAMES};
use raa_mil::metrics::{ensemble_sets, format_per_class_table, format_summary_table, MetricsReport, ModelRow};
use raa_mil::trainer::{plan_folds, predict, run_cv, TrainConfig};

fn evaluate(data: &Dataset, test: &[String], raa: bool) -> raa_mil::Result<MetricsReport> {
    let cfg = TrainConfig {
        raa,
        max_epochs: 15,
        attention_hidden: 16,
        classifier_hidden: 16,
        lr: 1e-3,
        test_ids: test.to_vec(),
        ..TrainConfig::default()
    };
    let run = run_cv(data, &plan_folds(data, &cfg)?, &cfg, None)?;
    let models: Vec<_> = run.folds.into_iter().map(|r| (r.fold, r.model)).collect();
    let bags: Vec<&TokenBag> = test.iter().filter_map(|id| data.bag(id)).collect();
    let ens = ensemble_sets(&predict(&models, &bags)?)?;
    MetricsReport::evaluate(&ens.probs(), &ens.labels()?)
}

fn main() -> raa_mil::Result<()> {
    let data = Dataset::from_bags(synthesize_bags(&SynthConfig {
        patients_per_class: 20,
        rows: 6,
        cols: 6,
        dim: 16,
        motif_strength: 1.5,
        ..SynthConfig::default()
    })?)?;
    let test = holdout_split(&data.labels(), 5, 0)?;
    let raa = evaluate(&data, &test, true)?;
    let vanilla = evaluate(&data, &test, false)?;
    let rows = [
        ModelRow {
            model: "Vanilla MIL",
            report: &vanilla,
        },
        ModelRow {
            model: "RAA-MIL",
            report: &raa,
        },
    ];
    print!("{}\n{}", format_summary_table(&rows), format_per_class_table(&rows));
    println!("RAA-MIL confusion (rows = truth):");
    for (name, row) in CLASS_NAMES.iter().zip(&raa.confusion) {
        println!("{name:>8} {row:?}");
    }
    Ok(())
}
