//! Gated attention pooling over every token of a bag and the patient-level
//! classifier head.
//!
//! With refined tokens `X` (`M x D`):
//!
//! ```text
//! a = tanh(X W_a^T)      b = sigmoid(X W_b^T)      u = (a * b) W_c
//! w = softmax(u)         m = w^T X                 logits = Phi(m)
//! ```
//!
//! The softmax spans all `M = P * rows * cols` tokens of the bag jointly.
//! Running the same head without the refinement step gives the vanilla
//! baseline.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataio::{TokenBag, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::raa::{self, NeighborhoodIndex, RaaConfig, RaaNodes, RaaParams};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Segments, Tensor};

pub const SIMPLEX_TOL: f64 = 1e-12;

/// A point on the probability simplex over the four classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; NUM_CLASSES]", into = "[f64; NUM_CLASSES]")]
pub struct ProbVector([f64; NUM_CLASSES]);

impl ProbVector {
    /// Accepts vectors that are nonnegative and sum to 1 within `SIMPLEX_TOL`.
    pub fn new(p: [f64; NUM_CLASSES]) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Invalid(format!("{p:?} is not a probability vector")));
        }
        Ok(Self(p))
    }

    pub fn uniform() -> Self {
        Self([1.0 / NUM_CLASSES as f64; NUM_CLASSES])
    }

    pub fn values(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<[f64; NUM_CLASSES]> for ProbVector {
    type Error = Error;

    fn try_from(p: [f64; NUM_CLASSES]) -> Result<Self> {
        Self::new(p)
    }
}

impl From<ProbVector> for [f64; NUM_CLASSES] {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilConfig {
    /// Width `L` of the attention branches.
    pub attention_hidden: usize,
    /// Hidden width of the classifier head.
    pub classifier_hidden: usize,
    /// Dropout on the bag embedding, training only.
    pub dropout: f64,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            attention_hidden: 128,
            classifier_hidden: 128,
            dropout: 0.25,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attention_hidden == 0 || self.classifier_hidden == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilParams {
    pub config: MilConfig,
    /// `[L, D]`
    pub w_a: Tensor,
    /// `[L, D]`
    pub w_b: Tensor,
    /// `[L, 1]`
    pub w_c: Tensor,
    /// `[D, H]`
    pub head_w1: Tensor,
    /// `[1, H]`
    pub head_b1: Tensor,
    /// `[H, 4]`
    pub head_w2: Tensor,
    /// `[1, 4]`
    pub head_b2: Tensor,
}

fn uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape matches count")
}

impl MilParams {
    pub fn init(dim: usize, config: MilConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (l, h) = (config.attention_hidden, config.classifier_hidden);
        Ok(Self {
            w_a: uniform(rng, &[l, dim], dim),
            w_b: uniform(rng, &[l, dim], dim),
            w_c: uniform(rng, &[l, 1], l),
            head_w1: uniform(rng, &[dim, h], dim),
            head_b1: Tensor::zeros(&[1, h]),
            head_w2: uniform(rng, &[h, NUM_CLASSES], h),
            head_b2: Tensor::zeros(&[1, NUM_CLASSES]),
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_a.cols()
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("mil.w_a", &self.w_a),
            ("mil.w_b", &self.w_b),
            ("mil.w_c", &self.w_c),
            ("mil.head.w1", &self.head_w1),
            ("mil.head.b1", &self.head_b1),
            ("mil.head.w2", &self.head_w2),
            ("mil.head.b2", &self.head_b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("mil.w_a", &mut self.w_a),
            ("mil.w_b", &mut self.w_b),
            ("mil.w_c", &mut self.w_c),
            ("mil.head.w1", &mut self.head_w1),
            ("mil.head.b1", &mut self.head_b1),
            ("mil.head.w2", &mut self.head_w2),
            ("mil.head.b2", &mut self.head_b2),
        ]
    }

    fn bind(&self, inputs: &mut HashMap<String, Tensor>) {
        for (name, t) in self.named() {
            inputs.insert(name.to_string(), t.clone());
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct MilNodes {
    w_a: NodeId,
    w_b: NodeId,
    w_c: NodeId,
    head_w1: NodeId,
    head_b1: NodeId,
    head_w2: NodeId,
    head_b2: NodeId,
}

impl MilNodes {
    fn register(g: &mut Graph) -> Self {
        Self {
            w_a: g.param("mil.w_a"),
            w_b: g.param("mil.w_b"),
            w_c: g.param("mil.w_c"),
            head_w1: g.param("mil.head.w1"),
            head_b1: g.param("mil.head.b1"),
            head_w2: g.param("mil.head.w2"),
            head_b2: g.param("mil.head.b2"),
        }
    }
}

fn attention_graph(g: &mut Graph, tokens: NodeId, n: &MilNodes, instances: usize) -> NodeId {
    let wa_t = g.transpose(n.w_a);
    let wb_t = g.transpose(n.w_b);
    let a = g.matmul(tokens, wa_t);
    let a = g.tanh(a);
    let b = g.matmul(tokens, wb_t);
    let b = g.sigmoid(b);
    let ab = g.mul(a, b);
    let u = g.matmul(ab, n.w_c);
    g.softmax(u, Segments::single(instances))
}

fn pool_graph(g: &mut Graph, tokens: NodeId, weights: NodeId) -> NodeId {
    let wt = g.transpose(weights);
    g.matmul(wt, tokens)
}

fn head_graph(g: &mut Graph, embedding: NodeId, n: &MilNodes) -> NodeId {
    let h = g.matmul(embedding, n.head_w1);
    let h = g.add_row(h, n.head_b1);
    let h = g.relu(h);
    let logits = g.matmul(h, n.head_w2);
    g.add_row(logits, n.head_b2)
}

/// Instance weights `w` for an `[M, D]` token matrix.
pub fn gated_attention_weights(tokens: &Tensor, params: &MilParams) -> Result<Vec<f64>> {
    check_tokens(tokens, params.dim())?;
    let mut g = Graph::new();
    let x = g.input("tokens");
    let nodes = MilNodes::register(&mut g);
    let w = attention_graph(&mut g, x, &nodes, tokens.rows());
    g.output("w", w);
    let mut inputs = HashMap::from([("tokens".to_string(), tokens.clone())]);
    params.bind(&mut inputs);
    Ok(g.forward(&inputs)?.remove("w").unwrap().into_data())
}

/// Bag embedding `m = sum_i w_i x_i`.
pub fn pool_bag(tokens: &Tensor, weights: &[f64]) -> Result<Vec<f64>> {
    if tokens.shape().len() != 2 || tokens.rows() != weights.len() {
        return Err(Error::Invalid(format!(
            "{} weights for tokens of shape {:?}",
            weights.len(),
            tokens.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.input("tokens");
    let w = g.input("w");
    let m = pool_graph(&mut g, x, w);
    g.output("m", m);
    let inputs = HashMap::from([
        ("tokens".to_string(), tokens.clone()),
        ("w".to_string(), Tensor::column(weights)),
    ]);
    Ok(g.forward(&inputs)?.remove("m").unwrap().into_data())
}

/// Classifier head: logits and their softmax.
pub fn classify(embedding: &[f64], params: &MilParams) -> Result<([f64; NUM_CLASSES], ProbVector)> {
    if embedding.len() != params.dim() {
        return Err(Error::Invalid(format!(
            "embedding has {} values, head expects {}",
            embedding.len(),
            params.dim()
        )));
    }
    let mut g = Graph::new();
    let m = g.input("m");
    let nodes = MilNodes::register(&mut g);
    let logits = head_graph(&mut g, m, &nodes);
    let probs = g.softmax(logits, Segments::single(NUM_CLASSES));
    g.output("logits", logits);
    g.output("probs", probs);
    let mut inputs = HashMap::from([("m".to_string(), Tensor::row(embedding))]);
    params.bind(&mut inputs);
    let out = g.forward(&inputs)?;
    Ok((to_array(&out["logits"]), ProbVector(to_array(&out["probs"]))))
}

fn check_tokens(tokens: &Tensor, dim: usize) -> Result<()> {
    if tokens.shape().len() != 2 || tokens.cols() != dim || tokens.rows() == 0 {
        return Err(Error::Invalid(format!(
            "tokens of shape {:?} for a head of dim {dim}",
            tokens.shape()
        )));
    }
    Ok(())
}

fn to_array(t: &Tensor) -> [f64; NUM_CLASSES] {
    t.data().try_into().expect("four classes")
}

/// Everything one forward pass produces for a bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagForward {
    /// Instance weights over all `M` tokens, patch-major.
    pub weights: Vec<f64>,
    pub embedding: Vec<f64>,
    pub logits: [f64; NUM_CLASSES],
    pub probs: ProbVector,
}

/// Model configuration recorded alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dim: usize,
    /// `None` for the vanilla baseline.
    pub raa: Option<RaaConfig>,
    pub mil: MilConfig,
}

/// Region-affinity refinement (optional) followed by the gated MIL head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub raa: Option<RaaParams>,
    pub mil: MilParams,
}

/// A bag's computation graph with its bound inputs.
pub struct BagGraph {
    pub graph: Graph,
    pub inputs: HashMap<String, Tensor>,
    pub weights: NodeId,
    pub embedding: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

impl Model {
    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Result<Self> {
        let raa = spec
            .raa
            .clone()
            .map(|cfg| RaaParams::init(spec.dim, cfg, rng))
            .transpose()?;
        let mil = MilParams::init(spec.dim, spec.mil.clone(), rng)?;
        Ok(Self { raa, mil })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            dim: self.mil.dim(),
            raa: self.raa.as_ref().map(|r| r.config.clone()),
            mil: self.mil.config.clone(),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = self.raa.as_ref().map(RaaParams::named).unwrap_or_default();
        v.extend(self.mil.named());
        v
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v = self.raa.as_mut().map(RaaParams::named_mut).unwrap_or_default();
        v.extend(self.mil.named_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Build the forward graph for `bag`. `dropout_mask`, when given, is a
    /// `[1, D]` multiplier applied to the bag embedding.
    pub fn bag_graph(&self, bag: &TokenBag, dropout_mask: Option<Tensor>) -> Result<BagGraph> {
        bag.validate()?;
        let (rows, cols, dim) = bag.grid_shape();
        if dim != self.mil.dim() {
            return Err(Error::Invalid(format!(
                "bag `{}` has dim {dim}, model expects {}",
                bag.patient_id,
                self.mil.dim()
            )));
        }
        let mut g = Graph::new();
        let mut inputs = HashMap::new();
        let mut x = g.input("tokens");
        inputs.insert("tokens".to_string(), bag.tokens());

        if let Some(raa) = &self.raa {
            let idx = NeighborhoodIndex::for_params(rows, cols, raa)?;
            let nodes = RaaNodes::register(&mut g, raa);
            x = raa::refine_graph(&mut g, x, &nodes, &idx, bag.patches(), dim);
            raa::bind_params(raa, &mut inputs);
        }

        let nodes = MilNodes::register(&mut g);
        self.mil.bind(&mut inputs);
        let weights = attention_graph(&mut g, x, &nodes, bag.instances());
        let embedding = pool_graph(&mut g, x, weights);
        let head_in = match dropout_mask {
            Some(mask) => {
                let mask = g.constant(mask);
                g.mul(embedding, mask)
            }
            None => embedding,
        };
        let logits = head_graph(&mut g, head_in, &nodes);
        let probs = g.softmax(logits, Segments::single(NUM_CLASSES));
        g.output("weights", weights);
        g.output("embedding", embedding);
        g.output("logits", logits);
        g.output("probs", probs);
        Ok(BagGraph {
            graph: g,
            inputs,
            weights,
            embedding,
            logits,
            probs,
        })
    }

    /// Inference pass (no dropout).
    pub fn forward(&self, bag: &TokenBag) -> Result<BagForward> {
        let mut bg = self.bag_graph(bag, None)?;
        let mut out = bg.graph.forward(&bg.inputs)?;
        Ok(BagForward {
            weights: out.remove("weights").unwrap().into_data(),
            embedding: out.remove("embedding").unwrap().into_data(),
            logits: to_array(&out["logits"]),
            probs: ProbVector(to_array(&out["probs"])),
        })
    }
}

/// Forward one bag through optional refinement and the MIL head.
pub fn forward_bag(bag: &TokenBag, raa: Option<&RaaParams>, mil: &MilParams) -> Result<BagForward> {
    Model {
        raa: raa.cloned(),
        mil: mil.clone(),
    }
    .forward(bag)
}

#[cfg(test)]
mod tests;
