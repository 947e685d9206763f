//! AdamW on a quadratic, with the plateau schedule and early stopping driven
//! by a synthetic validation curve.

use std::collections::BTreeMap;

use raa_mil::optim::{AdamWConfig, AdamWState, EarlyStopState, PlateauConfig, PlateauState, StopDecision};
use raa_mil::tensor::Tensor;

fn main() -> raa_mil::Result<()> {
    let mut theta = Tensor::row(&[3.0, -2.0]);
    let mut adam = AdamWState::new(AdamWConfig {
        lr: 0.1,
        ..AdamWConfig::default()
    })?;
    for _ in 0..200 {
        let grads = BTreeMap::from([(
            "theta".to_string(),
            Tensor::row(&[2.0 * theta.data()[0], 2.0 * theta.data()[1]]),
        )]);
        adam.step([("theta", &mut theta)], &grads, 0.1)?;
    }
    println!("after {} steps: theta = {:.4?}", adam.t, theta.data());

    let mut plateau = PlateauState::new(PlateauConfig::default(), 1e-3);
    let mut stop = EarlyStopState::new(15, 1e-4)?;
    let curve = |e: usize| if e < 10 { 0.3 + 0.05 * e as f64 } else { 0.75 };
    for epoch in 1..=100 {
        let f1 = curve(epoch);
        let lr = plateau.update(f1);
        if let StopDecision::Stop = stop.update(epoch, f1) {
            println!(
                "stopped at epoch {epoch}, best epoch {:?}, lr {lr:.2e}",
                stop.best_epoch
            );
            break;
        }
    }
    Ok(())
}
