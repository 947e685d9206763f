//! Forward one bag through the full model and inspect the attention weights.

use raa_mil::dataio::{synthesize_bags, SynthConfig, CLASS_NAMES};
use raa_mil::mil::{MilConfig, Model, ModelSpec};
use raa_mil::raa::RaaConfig;
use raa_mil::rng::{self, Stream};

fn main() -> raa_mil::Result<()> {
    let bags = synthesize_bags(&SynthConfig {
        patients_per_class: 1,
        rows: 6,
        cols: 6,
        dim: 12,
        ..SynthConfig::default()
    })?;
    let bag = &bags[3];
    let spec = ModelSpec {
        dim: 12,
        raa: Some(RaaConfig::default()),
        mil: MilConfig {
            attention_hidden: 16,
            classifier_hidden: 16,
            ..MilConfig::default()
        },
    };
    let model = Model::init(&spec, &mut rng::stream(0, Stream::Init, 0))?;
    println!("{} parameters", model.parameter_count());

    let fwd = model.forward(bag)?;
    let cells = bag.grids[0].cells();
    for (p, w) in fwd.weights.chunks(cells).enumerate() {
        println!("patch {p}: attention mass {:.3}", w.iter().sum::<f64>());
    }
    println!("embedding dim {}", fwd.embedding.len());
    for (name, p) in CLASS_NAMES.iter().zip(fwd.probs.values()) {
        println!("{name:>8}: {p:.4}");
    }
    Ok(())
}
