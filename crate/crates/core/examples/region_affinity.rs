//! Neighborhood refinement of one token grid: affinity weights, and the
//! effect of the residual gate.

use raa_mil::dataio::GridTokens;
use raa_mil::raa::{
    affinity_weights, pairwise_neighbor_distances, refine_tokens, NeighborhoodIndex, RaaConfig, RaaParams,
};
use raa_mil::rng::{self, Stream};
use raa_mil::tensor::Tensor;
use rand::Rng as _;

fn main() -> raa_mil::Result<()> {
    let mut rng = rng::stream(1, Stream::Init, 0);
    let (rows, cols, dim) = (4, 4, 6);
    let grid = GridTokens::new(
        rows,
        cols,
        dim,
        (0..rows * cols * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let mut params = RaaParams::init(dim, RaaConfig::default(), &mut rng)?;

    let idx = NeighborhoodIndex::for_params(rows, cols, &params)?;
    let alpha = affinity_weights(&pairwise_neighbor_distances(&grid, &idx)?, &params, &idx)?;
    println!(
        "corner cell attends to {} neighbors, interior cell to {}",
        idx.neighbors(0).len(),
        idx.neighbors(5).len()
    );
    println!("corner weights: {:.3?}", &alpha[..idx.neighbors(0).len()]);

    // A fresh gate is zero, so refinement starts as the identity.
    assert_eq!(refine_tokens(&grid, &params)?, grid);

    for (name, t) in params.named_mut() {
        if name.ends_with("gamma") {
            *t = Tensor::scalar(0.5);
        }
    }
    let refined = refine_tokens(&grid, &params)?;
    let moved: f64 = refined
        .values
        .iter()
        .zip(&grid.values)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / grid.values.len() as f64;
    println!("gamma {}: mean absolute token change {moved:.4}", params.gamma());
    Ok(())
}
