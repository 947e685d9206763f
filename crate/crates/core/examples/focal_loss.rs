//! Smoothed, class-weighted focal loss against plain cross-entropy.

use raa_mil::objective::{class_weights_from_counts, focal_loss, LossConfig};

fn main() -> raa_mil::Result<()> {
    let ce = LossConfig {
        gamma: 0.0,
        smoothing: 0.0,
        ..LossConfig::default()
    };
    let focal = LossConfig::default();
    println!("{:>14} {:>10} {:>10}", "true logit", "CE", "focal");
    for z in [-2.0, 0.0, 2.0, 4.0, 8.0] {
        let logits = [z, 0.0, 0.0, 0.0];
        println!(
            "{z:>14} {:>10.4} {:>10.4}",
            focal_loss(&logits, 0, &ce)?,
            focal_loss(&logits, 0, &focal)?
        );
    }

    let weights = class_weights_from_counts(&[40, 4, 28, 34])?;
    println!("class weights for counts [40, 4, 28, 34]: {weights:.3?}");
    println!("smoothed target for class 2: {:?}", focal.target(2)?);
    Ok(())
}
