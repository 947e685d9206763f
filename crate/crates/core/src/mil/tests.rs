// Oracles are plain index loops on purpose.
#![allow(clippy::needless_range_loop)]

use rand::Rng as _;
use serde_json::json;

use super::*;
use crate::dataio::GridTokens;
use crate::rng::{self, Stream};
use crate::tensor::{finite_diff_grad, relative_error};

fn small_config() -> MilConfig {
    MilConfig {
        attention_hidden: 6,
        classifier_hidden: 5,
        dropout: 0.25,
    }
}

fn random_bag(rng: &mut Rng, patches: usize, r: usize, c: usize, d: usize) -> TokenBag {
    let grids = (0..patches)
        .map(|_| GridTokens::new(r, c, d, (0..r * c * d).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap())
        .collect();
    TokenBag::new("p", 1, grids).unwrap()
}

fn spec(dim: usize, raa: bool) -> ModelSpec {
    ModelSpec {
        dim,
        raa: raa.then(|| RaaConfig {
            hidden: 4,
            ..RaaConfig::default()
        }),
        mil: small_config(),
    }
}

/// Perturb every parameter so gates and biases are away from their init.
fn jitter(model: &mut Model, rng: &mut Rng) {
    for (_, t) in model.named_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loop-level reference for the attention weights.
fn oracle_weights(x: &Tensor, p: &MilParams) -> Vec<f64> {
    let l = p.config.attention_hidden;
    let u: Vec<f64> = (0..x.rows())
        .map(|i| {
            let xi = x.row_slice(i);
            (0..l)
                .map(|k| {
                    let a = dot(p.w_a.row_slice(k), xi).tanh();
                    let b = 1.0 / (1.0 + (-dot(p.w_b.row_slice(k), xi)).exp());
                    a * b * p.w_c.data()[k]
                })
                .sum()
        })
        .collect();
    let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn oracle_head(m: &[f64], p: &MilParams) -> [f64; NUM_CLASSES] {
    let h = p.config.classifier_hidden;
    let hidden: Vec<f64> = (0..h)
        .map(|j| {
            let z: f64 = (0..m.len()).map(|i| m[i] * p.head_w1.get(i, j)).sum::<f64>() + p.head_b1.data()[j];
            z.max(0.0)
        })
        .collect();
    let mut out = [0.0; NUM_CLASSES];
    for (c, o) in out.iter_mut().enumerate() {
        *o = (0..h).map(|j| hidden[j] * p.head_w2.get(j, c)).sum::<f64>() + p.head_b2.data()[c];
    }
    out
}

#[test]
fn attention_matches_loop_oracle() {
    let mut rng = rng::stream(1, Stream::Init, 0);
    let mut model = Model::init(&spec(7, false), &mut rng).unwrap();
    jitter(&mut model, &mut rng);
    let bag = random_bag(&mut rng, 2, 3, 4, 7);
    let x = bag.tokens();
    let w = gated_attention_weights(&x, &model.mil).unwrap();
    let want = oracle_weights(&x, &model.mil);
    for (a, b) in w.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let m = pool_bag(&x, &w).unwrap();
    for d in 0..7 {
        let want: f64 = (0..x.rows()).map(|i| w[i] * x.get(i, d)).sum();
        assert!((m[d] - want).abs() < 1e-12);
    }

    let (logits, probs) = classify(&m, &model.mil).unwrap();
    let want = oracle_head(&m, &model.mil);
    for c in 0..NUM_CLASSES {
        assert!((logits[c] - want[c]).abs() < 1e-12);
    }
    assert!((probs.sum() - 1.0).abs() < 1e-12);

    let full = model.forward(&bag).unwrap();
    assert_eq!(full.weights, w);
    assert_eq!(full.embedding, m);
    assert_eq!(full.logits, logits);
}

#[test]
fn pooling_ignores_token_order() {
    let mut rng = rng::stream(2, Stream::Init, 0);
    let mut model = Model::init(&spec(5, false), &mut rng).unwrap();
    jitter(&mut model, &mut rng);
    let x = random_bag(&mut rng, 3, 2, 3, 5).tokens();
    let n = x.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row_slice(i).to_vec()).collect();
    let xp = Tensor::from_rows(&rows).unwrap();

    let w = gated_attention_weights(&x, &model.mil).unwrap();
    let wp = gated_attention_weights(&xp, &model.mil).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert!((wp[k] - w[i]).abs() < 1e-12);
    }
    let m = pool_bag(&x, &w).unwrap();
    let mp = pool_bag(&xp, &wp).unwrap();
    for (a, b) in m.iter().zip(&mp) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn single_token_gets_all_weight() {
    let mut rng = rng::stream(3, Stream::Init, 0);
    let model = Model::init(&spec(4, false), &mut rng).unwrap();
    let bag = random_bag(&mut rng, 1, 1, 1, 4);
    let out = model.forward(&bag).unwrap();
    assert_eq!(out.weights, vec![1.0]);
    assert_eq!(out.embedding, bag.grids[0].values);
}

#[test]
fn identical_tokens_get_uniform_weight() {
    let mut rng = rng::stream(4, Stream::Init, 0);
    let model = Model::init(&spec(4, false), &mut rng).unwrap();
    let tok = [0.3, -1.0, 2.0, 0.5];
    let grid = GridTokens::new(2, 3, 4, tok.repeat(6)).unwrap();
    let bag = TokenBag::new("same", 0, vec![grid.clone(), grid]).unwrap();
    let out = model.forward(&bag).unwrap();
    for w in &out.weights {
        assert!((w - 1.0 / 12.0).abs() < 1e-15);
    }
    for (a, b) in out.embedding.iter().zip(tok) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn fresh_refinement_does_not_change_predictions() {
    let mut rng = rng::stream(5, Stream::Init, 0);
    let with = Model::init(&spec(6, true), &mut rng).unwrap();
    let without = Model {
        raa: None,
        mil: with.mil.clone(),
    };
    let bag = random_bag(&mut rng, 2, 4, 4, 6);
    assert_eq!(with.forward(&bag).unwrap(), without.forward(&bag).unwrap());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = rng::stream(6, Stream::Init, 0);
    let mut model = Model::init(&spec(5, true), &mut rng).unwrap();
    jitter(&mut model, &mut rng);
    let bag = random_bag(&mut rng, 2, 3, 3, 5);
    let probe: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.random_range(-1.0..1.0)).collect();

    let loss_of = |m: &Model| -> Result<(f64, Option<BTreeMapGrads>)> {
        let mut bg = m.bag_graph(&bag, None)?;
        let w = bg.graph.constant(Tensor::row(&probe));
        let z = bg.graph.mul(bg.probs, w);
        let loss = bg.graph.sum(z);
        bg.graph.output("loss", loss);
        let out = bg.graph.forward(&bg.inputs)?;
        let grads = bg.graph.backward(loss)?;
        Ok((out["loss"].item(), Some(grads)))
    };
    let (_, grads) = loss_of(&model).unwrap();
    let grads = grads.unwrap();

    let names: Vec<&str> = model.named().iter().map(|(n, _)| *n).collect();
    assert_eq!(grads.len(), names.len());
    for name in names {
        let point = model.named().into_iter().find(|(n, _)| *n == name).unwrap().1.clone();
        let fd = finite_diff_grad(
            |t| {
                let mut m = model.clone();
                *m.named_mut().into_iter().find(|(n, _)| *n == name).unwrap().1 = t.clone();
                Ok(loss_of(&m)?.0)
            },
            &point,
            1e-5,
        )
        .unwrap();
        let err = relative_error(&grads[name], &fd);
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

type BTreeMapGrads = std::collections::BTreeMap<String, Tensor>;

#[test]
fn dropout_mask_scales_embedding_before_head() {
    let mut rng = rng::stream(7, Stream::Init, 0);
    let model = Model::init(&spec(4, false), &mut rng).unwrap();
    let bag = random_bag(&mut rng, 1, 2, 2, 4);
    let mut bg = model.bag_graph(&bag, Some(Tensor::zeros(&[1, 4]))).unwrap();
    let out = bg.graph.forward(&bg.inputs).unwrap();
    let (logits, _) = classify(&[0.0; 4], &model.mil).unwrap();
    assert_eq!(out["logits"].data(), &logits);
}

#[test]
fn rejects_dimension_mismatch() {
    let mut rng = rng::stream(8, Stream::Init, 0);
    let model = Model::init(&spec(4, false), &mut rng).unwrap();
    let bag = random_bag(&mut rng, 1, 2, 2, 3);
    assert!(model.forward(&bag).is_err());
}

#[test]
fn prob_vector_validation_and_argmax() {
    assert!(ProbVector::new([0.25; 4]).is_ok());
    assert!(ProbVector::new([0.5, 0.5, 0.5, -0.5]).is_err());
    assert!(ProbVector::new([0.3, 0.3, 0.3, 0.3]).is_err());
    assert_eq!(ProbVector::new([0.1, 0.4, 0.4, 0.1]).unwrap().argmax(), 1);
    assert_eq!(ProbVector::uniform().argmax(), 0);
    assert_eq!(argmax(&[0.0, 3.0, 1.0, 3.0]), 1);
    let p: ProbVector = serde_json::from_str("[0.1,0.2,0.3,0.4]").unwrap();
    assert_eq!(p.argmax(), 3);
    assert!(serde_json::from_str::<ProbVector>("[1.0,1.0,0.0,0.0]").is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng::stream(9, Stream::Init, 0);
    for raa in [false, true] {
        let mut model = Model::init(&spec(5, raa), &mut rng).unwrap();
        jitter(&mut model, &mut rng);
        let path = dir.path().join(format!("m{raa}.raac"));
        let meta = json!({"fold": 2, "epoch": 7});
        save_checkpoint(&model, &meta, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.meta, meta);
    }
}

#[test]
fn checkpoint_rejects_damage() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng::stream(10, Stream::Init, 0);
    let model = Model::init(&spec(5, true), &mut rng).unwrap();
    let path = dir.path().join("m.raac");
    save_checkpoint(&model, &json!(null), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Truncated { .. })));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

    let mut extra = bytes;
    extra.extend_from_slice(&[0; 8]);
    std::fs::write(&path, &extra).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn zero_head_gives_uniform_probs() {
    let mut rng = rng::stream(11, Stream::Init, 0);
    let mut model = Model::init(&spec(4, false), &mut rng).unwrap();
    for (_, t) in model.mil.named_mut() {
        t.data_mut().fill(0.0);
    }
    let (logits, probs) = classify(&[1.0, -2.0, 0.5, 3.0], &model.mil).unwrap();
    assert_eq!(logits, [0.0; 4]);
    assert_eq!(probs, ProbVector::uniform());
}

#[test]
fn logit_shift_leaves_probs_unchanged() {
    let mut rng = rng::stream(12, Stream::Init, 0);
    let mut model = Model::init(&spec(4, false), &mut rng).unwrap();
    jitter(&mut model, &mut rng);
    let m = [0.2, -0.4, 1.1, 0.0];
    let (_, p) = classify(&m, &model.mil).unwrap();
    model.mil.head_b2.data_mut().iter_mut().for_each(|v| *v += 7.5);
    let (_, q) = classify(&m, &model.mil).unwrap();
    for (a, b) in p.values().iter().zip(q.values()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn one_hot_weights_select_a_token() {
    let mut rng = rng::stream(13, Stream::Init, 0);
    let x = random_bag(&mut rng, 1, 2, 2, 3).tokens();
    let mut w = vec![0.0; 4];
    w[2] = 1.0;
    assert_eq!(pool_bag(&x, &w).unwrap(), x.row_slice(2));
    assert!(pool_bag(&x, &w[..3]).is_err());
}
