//! Save a model to the checkpoint format and load it back.

use raa_mil::mil::{load_checkpoint, save_checkpoint, Model, ModelSpec};
use raa_mil::rng::{self, Stream};
use raa_mil::trainer::TrainConfig;
use serde_json::json;

fn main() -> raa_mil::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "target/example.raac".into());
    let spec: ModelSpec = TrainConfig::default().model_spec(384);
    let model = Model::init(&spec, &mut rng::stream(0, Stream::Init, 0))?;
    save_checkpoint(&model, &json!({"note": "fresh init"}), &path)?;
    let back = load_checkpoint(&path)?;
    assert_eq!(back.model.spec(), spec);
    let same = model
        .named()
        .iter()
        .zip(back.model.named())
        .all(|((_, a), (_, b))| a.data() == b.data());
    println!(
        "{path}: {} parameters, round trip exact: {same}, meta {}",
        model.parameter_count(),
        back.meta
    );
    Ok(())
}
