//! Region-affinity attention: each token is refined by an affinity-weighted
//! average of its `k x k` grid neighborhood, behind a scalar residual gate.
//!
//! For token `z_i` with neighbors `N(i)` (window clipped at the grid border,
//! `i` itself included by default):
//!
//! ```text
//! d_ij   = |z_i - z_j|^2 / D
//! a_ij   = softmax_{j in N(i)} f(d_ij)          f: 1 -> H -> 1, tanh hidden
//! z'_i   = z_i + gamma * (LN(sum_j a_ij z_j) - z_i)
//! ```
//!
//! `gamma` starts at exactly zero, so a freshly initialized module is the
//! identity map. Patches are refined independently.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataio::GridTokens;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Segments, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaaConfig {
    /// Side of the neighborhood window (odd).
    pub window: usize,
    /// Width of the affinity MLP's hidden layer.
    pub hidden: usize,
    pub include_self: bool,
    /// Learnable scale/shift in the layer norm.
    pub ln_affine: bool,
}

impl Default for RaaConfig {
    fn default() -> Self {
        Self {
            window: 3,
            hidden: 16,
            include_self: true,
            ln_affine: true,
        }
    }
}

impl RaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window must be odd and >= 1, got {}",
                self.window
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("affinity MLP needs at least one hidden unit".into()));
        }
        if self.window == 1 && !self.include_self {
            return Err(Error::Config("a 1x1 window without the center is empty".into()));
        }
        Ok(())
    }
}

/// Learnable state of the refinement step.
#[derive(Clone, Debug, PartialEq)]
pub struct RaaParams {
    pub config: RaaConfig,
    /// `[1, H]`
    pub affinity_w1: Tensor,
    /// `[1, H]`
    pub affinity_b1: Tensor,
    /// `[H, 1]`
    pub affinity_w2: Tensor,
    /// `[1, 1]`
    pub affinity_b2: Tensor,
    /// `[1, 1]`, the residual gate.
    pub gamma: Tensor,
    /// `[1, D]`
    pub ln_scale: Tensor,
    /// `[1, D]`
    pub ln_shift: Tensor,
}

impl RaaParams {
    /// Fresh parameters: MLP weights uniform in `±1/sqrt(fan_in)`, biases
    /// and the gate zero, layer norm at unit scale and zero shift.
    pub fn init(dim: usize, config: RaaConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w1 = uniform(h, 1);
        let w2 = uniform(h, h);
        Ok(Self {
            config,
            affinity_w1: Tensor::row(&w1),
            affinity_b1: Tensor::zeros(&[1, h]),
            affinity_w2: Tensor::column(&w2),
            affinity_b2: Tensor::zeros(&[1, 1]),
            gamma: Tensor::scalar(0.0),
            ln_scale: Tensor::full(&[1, dim], 1.0),
            ln_shift: Tensor::zeros(&[1, dim]),
        })
    }

    pub fn dim(&self) -> usize {
        self.ln_scale.cols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.item()
    }

    /// Trainable tensors with their registry names. The layer-norm affine
    /// pair is only listed when enabled.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("raa.affinity.w1", &self.affinity_w1),
            ("raa.affinity.b1", &self.affinity_b1),
            ("raa.affinity.w2", &self.affinity_w2),
            ("raa.affinity.b2", &self.affinity_b2),
            ("raa.gamma", &self.gamma),
        ];
        if self.config.ln_affine {
            v.push(("raa.ln.scale", &self.ln_scale));
            v.push(("raa.ln.shift", &self.ln_shift));
        }
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v = vec![
            ("raa.affinity.w1", &mut self.affinity_w1),
            ("raa.affinity.b1", &mut self.affinity_b1),
            ("raa.affinity.w2", &mut self.affinity_w2),
            ("raa.affinity.b2", &mut self.affinity_b2),
            ("raa.gamma", &mut self.gamma),
        ];
        if self.config.ln_affine {
            v.push(("raa.ln.scale", &mut self.ln_scale));
            v.push(("raa.ln.shift", &mut self.ln_shift));
        }
        v
    }

    /// Scalar affinity `f(d)`.
    pub fn affinity(&self, d: f64) -> f64 {
        let w1 = self.affinity_w1.data();
        let b1 = self.affinity_b1.data();
        let w2 = self.affinity_w2.data();
        let mut out = self.affinity_b2.item();
        for j in 0..w1.len() {
            out += w2[j] * (w1[j] * d + b1[j]).tanh();
        }
        out
    }
}

/// Graph handles for [`RaaParams`].
#[derive(Clone, Copy, Debug)]
pub struct RaaNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    gamma: NodeId,
    ln_scale: Option<NodeId>,
    ln_shift: Option<NodeId>,
}

impl RaaNodes {
    /// Register the parameters as trainable leaves of `g`.
    pub fn register(g: &mut Graph, params: &RaaParams) -> Self {
        let affine = params.config.ln_affine;
        Self {
            w1: g.param("raa.affinity.w1"),
            b1: g.param("raa.affinity.b1"),
            w2: g.param("raa.affinity.w2"),
            b2: g.param("raa.affinity.b2"),
            gamma: g.param("raa.gamma"),
            ln_scale: affine.then(|| g.param("raa.ln.scale")),
            ln_shift: affine.then(|| g.param("raa.ln.shift")),
        }
    }
}

/// Valid neighbors of every cell of a `rows x cols` grid, in CSR layout.
/// Windows are clipped at the border rather than padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborhoodIndex {
    pub rows: usize,
    pub cols: usize,
    pub window: usize,
    pub include_self: bool,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl NeighborhoodIndex {
    pub fn new(rows: usize, cols: usize, window: usize, include_self: bool) -> Result<Self> {
        RaaConfig {
            window,
            include_self,
            ..RaaConfig::default()
        }
        .validate()?;
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid("empty grid".into()));
        }
        let half = (window / 2) as isize;
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                for dr in -half..=half {
                    for dc in -half..=half {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                            continue;
                        }
                        if dr == 0 && dc == 0 && !include_self {
                            continue;
                        }
                        neighbors.push(nr as usize * cols + nc as usize);
                    }
                }
                if neighbors.len() == *offsets.last().unwrap() {
                    return Err(Error::Invalid(format!("cell ({r}, {c}) has no neighbors")));
                }
                offsets.push(neighbors.len());
            }
        }
        Ok(Self {
            rows,
            cols,
            window,
            include_self,
            offsets,
            neighbors,
        })
    }

    pub fn for_params(rows: usize, cols: usize, params: &RaaParams) -> Result<Self> {
        Self::new(rows, cols, params.config.window, params.config.include_self)
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Total number of `(i, j)` pairs.
    pub fn pairs(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, cell: usize) -> &[usize] {
        &self.neighbors[self.offsets[cell]..self.offsets[cell + 1]]
    }

    /// Pair ranges per cell.
    pub fn segments(&self) -> Segments {
        Segments::from_offsets(self.offsets.clone()).expect("every cell has a neighbor")
    }

    /// Center and neighbor row indices for `patches` grids stacked in one
    /// `[patches * cells, D]` matrix, plus the per-cell pair segments.
    pub fn tiled(&self, patches: usize) -> (Arc<[usize]>, Arc<[usize]>, Segments) {
        let n = self.cells();
        let mut centers = Vec::with_capacity(patches * self.pairs());
        let mut neighbors = Vec::with_capacity(patches * self.pairs());
        let mut offsets = Vec::with_capacity(patches * n + 1);
        offsets.push(0);
        for p in 0..patches {
            for cell in 0..n {
                for &j in self.neighbors(cell) {
                    centers.push(p * n + cell);
                    neighbors.push(p * n + j);
                }
                offsets.push(neighbors.len());
            }
        }
        (
            centers.into(),
            neighbors.into(),
            Segments::from_offsets(offsets).expect("non-empty neighborhoods"),
        )
    }
}

/// `d_ij` for every pair of `idx`, in index order.
pub fn pairwise_neighbor_distances(grid: &GridTokens, idx: &NeighborhoodIndex) -> Result<Vec<f64>> {
    if (grid.rows, grid.cols) != (idx.rows, idx.cols) {
        return Err(Error::Invalid(format!(
            "grid is {}x{}, index is {}x{}",
            grid.rows, grid.cols, idx.rows, idx.cols
        )));
    }
    let inv_d = 1.0 / grid.dim as f64;
    let mut out = Vec::with_capacity(idx.pairs());
    for i in 0..idx.cells() {
        let zi = grid.token(i);
        for &j in idx.neighbors(i) {
            let sq: f64 = zi.iter().zip(grid.token(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            out.push(sq * inv_d);
        }
    }
    Ok(out)
}

/// Neighborhood softmax of `f(d_ij)`, aligned with `distances`.
pub fn affinity_weights(distances: &[f64], params: &RaaParams, idx: &NeighborhoodIndex) -> Result<Vec<f64>> {
    if distances.len() != idx.pairs() {
        return Err(Error::Invalid(format!(
            "{} distances for {} neighbor pairs",
            distances.len(),
            idx.pairs()
        )));
    }
    let mut logits = Vec::with_capacity(distances.len());
    for (k, &d) in distances.iter().enumerate() {
        let f = params.affinity(d);
        if !f.is_finite() {
            return Err(Error::Invalid(format!(
                "affinity MLP produced {f} for pair {k} (d = {d})"
            )));
        }
        logits.push(f);
    }
    let segs = idx.segments();
    for cell in 0..segs.count() {
        crate::tensor::softmax_in_place(&mut logits[segs.range(cell)]);
    }
    Ok(logits)
}

/// Append the refinement of `tokens` (`[patches * cells, D]`) to `g`.
pub fn refine_graph(
    g: &mut Graph,
    tokens: NodeId,
    nodes: &RaaNodes,
    idx: &NeighborhoodIndex,
    patches: usize,
    dim: usize,
) -> NodeId {
    let (centers, neighbors, segs) = idx.tiled(patches);

    let zc = g.gather(tokens, centers);
    let zn = g.gather(tokens, neighbors);
    let diff = g.sub(zc, zn);
    let sq = g.mul(diff, diff);
    let sq = g.sum_cols(sq);
    let dist = g.scale(sq, 1.0 / dim as f64);

    let h = g.matmul(dist, nodes.w1);
    let h = g.add_row(h, nodes.b1);
    let h = g.tanh(h);
    let f = g.matmul(h, nodes.w2);
    let f = g.add_row(f, nodes.b2);
    let alpha = g.softmax(f, segs.clone());

    let weighted = g.scale_rows(zn, alpha);
    let agg = g.segment_sum(weighted, segs);
    let ln = g.layer_norm(agg, nodes.ln_scale, nodes.ln_shift, LN_EPS);
    let update = g.sub(ln, tokens);
    let gated = g.scale_by(update, nodes.gamma);
    g.add(tokens, gated)
}

pub(crate) fn bind_params(params: &RaaParams, inputs: &mut HashMap<String, Tensor>) {
    for (name, t) in params.named() {
        inputs.insert(name.to_string(), t.clone());
    }
}

/// Refine one patch.
pub fn refine_tokens(grid: &GridTokens, params: &RaaParams) -> Result<GridTokens> {
    if grid.dim != params.dim() {
        return Err(Error::Invalid(format!(
            "grid dim {} but parameters are for dim {}",
            grid.dim,
            params.dim()
        )));
    }
    let idx = NeighborhoodIndex::for_params(grid.rows, grid.cols, params)?;
    let mut g = Graph::new();
    let tokens = g.input("tokens");
    let nodes = RaaNodes::register(&mut g, params);
    let out = refine_graph(&mut g, tokens, &nodes, &idx, 1, grid.dim);
    g.output("refined", out);

    let mut inputs = HashMap::new();
    inputs.insert("tokens".to_string(), grid.to_tensor());
    bind_params(params, &mut inputs);
    let refined = g.forward(&inputs)?.remove("refined").unwrap();
    GridTokens::from_tensor(grid.rows, grid.cols, refined)
}

#[cfg(test)]
// Oracles are plain index loops on purpose.
#[allow(clippy::needless_range_loop)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::rng::{self, Stream};

    fn random_grid(rng: &mut Rng, r: usize, c: usize, d: usize) -> GridTokens {
        GridTokens::new(r, c, d, (0..r * c * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn random_params(rng: &mut Rng, dim: usize) -> RaaParams {
        let mut p = RaaParams::init(dim, RaaConfig::default(), rng).unwrap();
        for (_, t) in p.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
        p
    }

    /// Straight-line reimplementation without the graph.
    fn refine_oracle(grid: &GridTokens, p: &RaaParams) -> Vec<f64> {
        let idx = NeighborhoodIndex::for_params(grid.rows, grid.cols, p).unwrap();
        let d = grid.dim;
        let mut out = Vec::with_capacity(grid.values.len());
        for i in 0..grid.cells() {
            let zi = grid.token(i);
            let nbrs = idx.neighbors(i);
            let logits: Vec<f64> = nbrs
                .iter()
                .map(|&j| {
                    let mut s = 0.0;
                    for t in 0..d {
                        let diff = zi[t] - grid.token(j)[t];
                        s += diff * diff;
                    }
                    p.affinity(s / d as f64)
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let tot: f64 = ex.iter().sum();
            let mut agg = vec![0.0; d];
            for (k, &j) in nbrs.iter().enumerate() {
                for t in 0..d {
                    agg[t] += ex[k] / tot * grid.token(j)[t];
                }
            }
            let mean = agg.iter().sum::<f64>() / d as f64;
            let var = agg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let gamma = p.gamma();
            for t in 0..d {
                let ln = (agg[t] - mean) / (var + LN_EPS).sqrt() * p.ln_scale.data()[t] + p.ln_shift.data()[t];
                out.push(zi[t] + gamma * (ln - zi[t]));
            }
        }
        out
    }

    #[test]
    fn neighborhood_geometry() {
        let idx = NeighborhoodIndex::new(14, 14, 3, true).unwrap();
        assert_eq!(idx.neighbors(0).len(), 4);
        assert_eq!(idx.neighbors(14 + 1).len(), 9);
        assert_eq!(idx.neighbors(13).len(), 4);
        assert_eq!(idx.neighbors(5).len(), 6);
        for i in 0..idx.cells() {
            assert!(idx.neighbors(i).contains(&i));
            assert!(idx.neighbors(i).iter().all(|&j| j < 196));
        }
        let no_self = NeighborhoodIndex::new(4, 4, 3, false).unwrap();
        assert_eq!(no_self.neighbors(0), &[1, 4, 5]);
        assert!(NeighborhoodIndex::new(4, 4, 1, false).is_err());
        assert!(NeighborhoodIndex::new(4, 4, 2, true).is_err());
        assert_eq!(NeighborhoodIndex::new(3, 3, 1, true).unwrap().neighbors(4), &[4]);
    }

    #[test]
    fn distance_examples() {
        let g = GridTokens::new(1, 2, 4, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let idx = NeighborhoodIndex::new(1, 2, 3, true).unwrap();
        let d = pairwise_neighbor_distances(&g, &idx).unwrap();
        // cell 0: (0,0) then (0,1); cell 1: (1,0) then (1,1)
        assert_eq!(d, vec![0.0, 1.0, 1.0, 0.0]);
        let wrong = NeighborhoodIndex::new(2, 2, 3, true).unwrap();
        assert!(pairwise_neighbor_distances(&g, &wrong).is_err());
    }

    #[test]
    fn distances_match_double_loop() {
        let mut rng = rng::stream(4, Stream::Init, 0);
        let g = random_grid(&mut rng, 4, 4, 8);
        let idx = NeighborhoodIndex::new(4, 4, 3, true).unwrap();
        let d = pairwise_neighbor_distances(&g, &idx).unwrap();
        let mut k = 0;
        for r in 0..4i32 {
            for c in 0..4i32 {
                for nr in (r - 1).max(0)..=(r + 1).min(3) {
                    for nc in (c - 1).max(0)..=(c + 1).min(3) {
                        let (i, j) = ((r * 4 + c) as usize, (nr * 4 + nc) as usize);
                        let mut s = 0.0;
                        for t in 0..8 {
                            s += (g.values[i * 8 + t] - g.values[j * 8 + t]).powi(2);
                        }
                        assert!((d[k] - s / 8.0).abs() < 1e-12);
                        k += 1;
                    }
                }
            }
        }
        assert_eq!(k, d.len());
        // symmetry and zero self-distance
        for i in 0..16 {
            for (a, &j) in idx.neighbors(i).iter().enumerate() {
                let dij = d[idx.segments().range(i).start + a];
                if i == j {
                    assert_eq!(dij, 0.0);
                }
                let b = idx.neighbors(j).iter().position(|&x| x == i).unwrap();
                assert_eq!(dij, d[idx.segments().range(j).start + b]);
            }
        }
    }

    #[test]
    fn constant_distances_give_uniform_affinity() {
        let mut rng = rng::stream(5, Stream::Init, 0);
        let p = random_params(&mut rng, 4);
        let idx = NeighborhoodIndex::new(5, 5, 3, true).unwrap();
        let alpha = affinity_weights(&vec![0.7; idx.pairs()], &p, &idx).unwrap();
        for i in 0..idx.cells() {
            let r = idx.segments().range(i);
            let n = r.len() as f64;
            for k in r {
                assert!((alpha[k] - 1.0 / n).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decreasing_affinity_map_orders_weights() {
        // f(d) = -10 tanh(0.1 d) ~ -d: strictly decreasing in d.
        let mut p = RaaParams::init(
            8,
            RaaConfig {
                hidden: 1,
                ..RaaConfig::default()
            },
            &mut rng::stream(0, Stream::Init, 0),
        )
        .unwrap();
        p.affinity_w1 = Tensor::row(&[0.1]);
        p.affinity_w2 = Tensor::column(&[-10.0]);
        for probe in [0.0, 0.5, 1.0, 2.0, 4.0] {
            assert!((p.affinity(probe) + probe).abs() < 0.06 * probe.max(1.0));
        }
        let mut rng = rng::stream(6, Stream::Init, 0);
        for _ in 0..5 {
            let g = random_grid(&mut rng, 6, 6, 8);
            let idx = NeighborhoodIndex::for_params(6, 6, &p).unwrap();
            let d = pairwise_neighbor_distances(&g, &idx).unwrap();
            let a = affinity_weights(&d, &p, &idx).unwrap();
            let segs = idx.segments();
            for i in 0..idx.cells() {
                for x in segs.range(i) {
                    for y in segs.range(i) {
                        if d[x] > d[y] {
                            assert!(a[x] < a[y]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gate_at_zero_is_identity_and_at_one_is_layer_norm() {
        let mut rng = rng::stream(7, Stream::Init, 0);
        let g = random_grid(&mut rng, 4, 4, 8);
        let mut p = random_params(&mut rng, 8);
        p.gamma = Tensor::scalar(0.0);
        let out = refine_tokens(&g, &p).unwrap();
        assert_eq!(out, g);

        p.gamma = Tensor::scalar(1.0);
        let out = refine_tokens(&g, &p).unwrap();
        let expected = refine_oracle(&g, &p);
        for (a, b) in out.values.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn refine_matches_scalar_oracle() {
        let mut rng = rng::stream(8, Stream::Init, 0);
        for _ in 0..5 {
            let g = random_grid(&mut rng, 4, 4, 8);
            let p = random_params(&mut rng, 8);
            let out = refine_tokens(&g, &p).unwrap();
            assert_eq!((out.rows, out.cols, out.dim), (4, 4, 8));
            for (a, b) in out.values.iter().zip(refine_oracle(&g, &p)) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn affinity_rows_sum_to_one_at_borders() {
        let mut rng = rng::stream(9, Stream::Init, 0);
        let g = random_grid(&mut rng, 14, 14, 8);
        let p = random_params(&mut rng, 8);
        let idx = NeighborhoodIndex::for_params(14, 14, &p).unwrap();
        let a = affinity_weights(&pairwise_neighbor_distances(&g, &idx).unwrap(), &p, &idx).unwrap();
        let segs = idx.segments();
        for i in 0..idx.cells() {
            let s: f64 = a[segs.range(i)].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(a[segs.range(i)].iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn init_gate_is_zero() {
        let p = RaaParams::init(16, RaaConfig::default(), &mut rng::stream(1, Stream::Init, 0)).unwrap();
        assert_eq!(p.gamma().to_bits(), 0.0f64.to_bits());
        assert_eq!(p.affinity_b2.item(), 0.0);
        assert!(p.affinity_w1.data().iter().all(|v| v.abs() <= 1.0));
        assert!(p.affinity_w2.data().iter().all(|v| v.abs() <= 0.25));
    }
}
