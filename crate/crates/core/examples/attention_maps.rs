//! Export attention heatmaps (PGM + CSV) for one synthetic patient.
//!
//!     cargo run --example attention_maps -- /tmp/raa-maps

use raa_mil::dataio::{synthesize_bags, SynthConfig};
use raa_mil::metrics::export_attention_map;
use raa_mil::mil::{MilConfig, Model, ModelSpec};
use raa_mil::rng::{self, Stream};

fn main() -> raa_mil::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-maps".into());
    let bags = synthesize_bags(&SynthConfig {
        patients_per_class: 1,
        dim: 16,
        ..SynthConfig::default()
    })?;
    let spec = ModelSpec {
        dim: 16,
        raa: None,
        mil: MilConfig {
            attention_hidden: 8,
            classifier_hidden: 8,
            ..MilConfig::default()
        },
    };
    let model = Model::init(&spec, &mut rng::stream(0, Stream::Init, 0))?;
    let bag = &bags[2];
    let files = export_attention_map(bag, &model.forward(bag)?, &out, 224)?;
    for p in files.images.iter().chain(&files.csvs) {
        println!("{}", p.display());
    }
    Ok(())
}
