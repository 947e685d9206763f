//! Compare reverse-mode gradients of the full training loss with central
//! finite differences, parameter by parameter.

use raa_mil::dataio::{synthesize_bags, SynthConfig};
use raa_mil::mil::{MilConfig, Model, ModelSpec};
use raa_mil::objective::{focal_loss_graph, LossConfig};
use raa_mil::raa::RaaConfig;
use raa_mil::rng::{self, Stream};
use raa_mil::tensor::{finite_diff_grad, relative_error};
use rand::Rng as _;

fn main() -> raa_mil::Result<()> {
    let bag = synthesize_bags(&SynthConfig {
        patients_per_class: 1,
        min_patches: 2,
        max_patches: 2,
        rows: 4,
        cols: 4,
        dim: 8,
        ..SynthConfig::default()
    })?
    .remove(0);
    let spec = ModelSpec {
        dim: 8,
        raa: Some(RaaConfig::default()),
        mil: MilConfig {
            attention_hidden: 8,
            classifier_hidden: 8,
            ..MilConfig::default()
        },
    };
    let mut rng = rng::stream(0, Stream::Init, 0);
    let mut model = Model::init(&spec, &mut rng)?;
    // Move the gate off zero so the affinity path carries gradient.
    for (_, t) in model.named_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let cfg = LossConfig::default();
    let loss = |m: &Model| -> raa_mil::Result<(f64, std::collections::BTreeMap<String, raa_mil::tensor::Tensor>)> {
        let mut bg = m.bag_graph(&bag, None)?;
        let l = focal_loss_graph(&mut bg.graph, bg.logits, bag.label, &cfg)?;
        bg.graph.output("loss", l);
        let out = bg.graph.forward(&bg.inputs)?;
        Ok((out["loss"].item(), bg.graph.backward(l)?))
    };
    let (value, grads) = loss(&model)?;
    println!("loss {value:.6}");
    for (name, point) in model.named() {
        let fd = finite_diff_grad(
            |t| {
                let mut m = model.clone();
                *m.named_mut()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .expect("known name")
                    .1 = t.clone();
                Ok(loss(&m)?.0)
            },
            point,
            1e-5,
        )?;
        println!("{name:>14}: relative error {:.2e}", relative_error(&grads[name], &fd));
    }
    Ok(())
}
