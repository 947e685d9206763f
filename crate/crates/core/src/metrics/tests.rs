use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::dataio::{GridTokens, TokenBag};
use crate::mil::BagForward;
use crate::rng::{self, Rng, Stream};

fn pv(p: [f64; 4]) -> ProbVector {
    ProbVector::new(p).unwrap()
}

fn random_probs(rng: &mut Rng, n: usize, levels: Option<u32>) -> Vec<ProbVector> {
    (0..n)
        .map(|_| {
            let raw: [f64; 4] = std::array::from_fn(|_| match levels {
                Some(k) => f64::from(rng.random_range(1..=k)),
                None => rng.random_range(0.01..1.0),
            });
            let s: f64 = raw.iter().sum();
            let mut p = raw.map(|v| v / s);
            p[3] = 1.0 - p[0] - p[1] - p[2];
            pv(p)
        })
        .collect()
}

fn pairwise_auc(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                pairs += 1;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

fn enumerated_ap(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let npos = pos.iter().filter(|&&p| p).count();
    if npos == 0 {
        return None;
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let tp = (0..scores.len()).filter(|&i| scores[i] >= t && pos[i]).count();
        let k = scores.iter().filter(|&&s| s >= t).count();
        let recall = tp as f64 / npos as f64;
        ap += (recall - prev_recall) * (tp as f64 / k as f64);
        prev_recall = recall;
    }
    Some(ap)
}

#[test]
fn confusion_examples() {
    let c = confusion_and_f1(&[0, 0, 1, 1], &[0, 1, 1, 0], 2).unwrap();
    assert_eq!(c.accuracy, 0.5);
    assert_eq!(c.per_class[0].f1, 0.5);
    assert_eq!(c.per_class[1].f1, 0.5);
    assert_eq!(c.weighted_f1, 0.5);
    assert_eq!(c.matrix, vec![vec![1, 1], vec![1, 1]]);

    let perfect = confusion_and_f1(&[0, 1, 2, 3, 3], &[0, 1, 2, 3, 3], 4).unwrap();
    assert_eq!((perfect.accuracy, perfect.weighted_f1), (1.0, 1.0));

    let absent = confusion_and_f1(&[0, 0, 2], &[0, 2, 2], 4).unwrap();
    assert_eq!(absent.per_class[1].f1, 0.0);
    assert_eq!(absent.per_class[1].support, 0);
    assert!((absent.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
    assert!((absent.per_class[2].f1 - 2.0 / 3.0).abs() < 1e-15);
    assert!((absent.weighted_f1 - 2.0 / 3.0).abs() < 1e-15);

    assert!(confusion_and_f1(&[0, 4], &[0, 1], 4).is_err());
    assert!(confusion_and_f1(&[], &[], 4).is_err());
    assert!(confusion_and_f1(&[0], &[0, 1], 4).is_err());
}

#[test]
fn ranking_matches_oracles_on_random_instances() {
    let mut rng = rng::stream(3, Stream::Synth, 0);
    for k in 0..200 {
        let n = rng.random_range(1..=20);
        let probs = random_probs(&mut rng, n, (k % 2 == 0).then_some(3));
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let roc = one_vs_rest(&probs, &truth, binary_roc_auc).unwrap();
        let pr = pr_auc_per_class(&probs, &truth).unwrap();
        for c in 0..4 {
            let s: Vec<f64> = probs.iter().map(|p| p.values()[c]).collect();
            let y: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            match (roc.per_class[c], pairwise_auc(&s, &y)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                (a, b) => assert_eq!(a, b),
            }
            match (pr.per_class[c], enumerated_ap(&s, &y)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }
}

#[test]
fn roc_weighting_skips_ineligible_classes() {
    let probs = vec![
        pv([0.7, 0.1, 0.1, 0.1]),
        pv([0.2, 0.6, 0.1, 0.1]),
        pv([0.6, 0.2, 0.1, 0.1]),
    ];
    let truth = [0, 1, 0];
    let roc = roc_auc_ovr_weighted(&probs, &truth).unwrap();
    assert_eq!(roc.per_class[2], None);
    assert_eq!(roc.per_class[0], Some(1.0));
    assert_eq!(roc.weighted, Some(1.0));

    let all_one = vec![pv([0.25; 4]); 3];
    assert!(roc_auc_ovr_weighted(&all_one, &[2, 2, 2]).is_err());
}

#[test]
fn report_serializes_undefined_as_null() {
    let probs = vec![
        pv([0.7, 0.1, 0.1, 0.1]),
        pv([0.1, 0.1, 0.1, 0.7]),
        pv([0.5, 0.2, 0.2, 0.1]),
    ];
    let r = MetricsReport::evaluate(&probs, &[0, 3, 0]).unwrap();
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    assert!(json["classes"][1]["pr_auc"].is_null());
    assert!(json["classes"][1]["roc_auc"].is_null());
    assert_eq!(json["classes"][1]["f1"], 0.0);
    assert_eq!(r.accuracy, 1.0);
    for (c, row) in r.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), r.classes[c].support);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    r.save(&path).unwrap();
    assert_eq!(MetricsReport::load(&path).unwrap(), r);
}

#[test]
fn tables_list_every_model_and_class() {
    let probs = vec![pv([0.7, 0.1, 0.1, 0.1]), pv([0.1, 0.1, 0.1, 0.7])];
    let r = MetricsReport::evaluate(&probs, &[0, 3]).unwrap();
    let rows = [
        ModelRow {
            model: "vanilla",
            report: &r,
        },
        ModelRow {
            model: "raa",
            report: &r,
        },
    ];
    let summary = format_summary_table(&rows);
    assert!(summary.contains("Accuracy") && summary.contains("raa") && summary.contains("1.0000"));
    let per_class = format_per_class_table(&rows);
    for name in CLASS_NAMES {
        assert!(per_class.contains(name));
    }
    assert!(per_class.contains("n/a"));
}

fn bag_and_forward(weights: Vec<f64>, patches: usize) -> (TokenBag, BagForward) {
    let grids = (0..patches)
        .map(|_| GridTokens::new(2, 3, 1, vec![0.0; 6]).unwrap())
        .collect();
    let bag = TokenBag::new("pt", 0, grids).unwrap();
    let fwd = BagForward {
        weights,
        embedding: vec![0.0],
        logits: [0.0; 4],
        probs: ProbVector::uniform(),
    };
    (bag, fwd)
}

fn read_csv(path: &std::path::Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn uniform_attention_is_mid_gray() {
    let dir = tempfile::tempdir().unwrap();
    let (bag, fwd) = bag_and_forward(vec![1.0 / 12.0; 12], 2);
    let files = export_attention_map(&bag, &fwd, dir.path(), 8).unwrap();
    assert_eq!(files.images.len(), 2);
    let bytes = std::fs::read(&files.images[0]).unwrap();
    let header = b"P5\n8 8\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert!(bytes[header.len()..].iter().all(|&b| b == 128));
    assert_eq!(bytes.len(), header.len() + 64);
}

#[test]
fn one_hot_attention_peaks_at_its_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = vec![0.0; 12];
    w[6 + 4] = 1.0;
    let (bag, fwd) = bag_and_forward(w, 2);
    let files = export_attention_map(&bag, &fwd, dir.path(), 6).unwrap();
    let grid = read_csv(&files.csvs[1]);
    assert_eq!(grid.len(), 2);
    assert_eq!(grid[1][1], 1.0);
    let bytes = std::fs::read(&files.images[1]).unwrap();
    let px = &bytes[bytes.len() - 36..];
    let peak = (0..36).max_by_key(|&i| (px[i], std::cmp::Reverse(i))).unwrap();
    let (y, x) = (peak / 6, peak % 6);
    assert!((3..6).contains(&y) && (2..4).contains(&x), "peak at ({y}, {x})");
    assert!(std::fs::read(&files.images[0]).unwrap()[bytes.len() - 36..]
        .iter()
        .all(|&b| b == 0));
}

#[test]
fn csv_sums_to_patch_share() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng::stream(0, Stream::Synth, 7);
    let raw: Vec<f64> = (0..18).map(|_| rng.random_range(0.0..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let (bag, fwd) = bag_and_forward(w.clone(), 3);
    let files = export_attention_map(&bag, &fwd, dir.path(), 4).unwrap();
    for (p, csv) in files.csvs.iter().enumerate() {
        let total: f64 = read_csv(csv).iter().flatten().sum();
        let share: f64 = w[p * 6..(p + 1) * 6].iter().sum();
        assert!((total - share).abs() < 1e-15);
    }
    assert!(export_attention_map(&bag, &bag_and_forward(vec![0.1; 5], 1).1, dir.path(), 4).is_err());
}

#[test]
fn bilinear_keeps_constant_and_corners() {
    assert!(bilinear_upsample(&[0.3; 6], 2, 3, 7, 5)
        .iter()
        .all(|&v| (v - 0.3).abs() < 1e-15));
    let up = bilinear_upsample(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
    assert_eq!(up[0], 0.0);
    assert_eq!(up[15], 3.0);
    assert_eq!(
        bilinear_upsample(&[0.0, 1.0, 2.0, 3.0], 2, 2, 2, 2),
        vec![0.0, 1.0, 2.0, 3.0]
    );
}

proptest! {
    #[test]
    fn roc_invariant_under_monotone_transform(
        scores in prop::collection::vec(0.0f64..1.0, 2..20),
        labels in prop::collection::vec(any::<bool>(), 2..20),
    ) {
        let n = scores.len().min(labels.len());
        let (s, y) = (&scores[..n], &labels[..n]);
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(binary_roc_auc(s, y), binary_roc_auc(&t, y));
    }

    #[test]
    fn ensemble_is_simplex_and_order_free(seed in 0u64..1000, folds in 1usize..6, n in 1usize..10) {
        let mut rng = rng::stream(seed, Stream::Synth, 1);
        let sets: Vec<(usize, Vec<ProbVector>)> = (0..folds).map(|f| (f, random_probs(&mut rng, n, None))).collect();
        let a = ensemble_average(&sets).unwrap();
        let mut rev = sets.clone();
        rev.reverse();
        let b = ensemble_average(&rev).unwrap();
        prop_assert_eq!(&a, &b);
        for p in &a.probs {
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_f1_is_bounded(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40)) {
        let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let c = confusion_and_f1(&p, &t, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&c.weighted_f1));
        let trace: usize = (0..4).map(|k| c.matrix[k][k]).sum();
        prop_assert_eq!(c.accuracy, trace as f64 / t.len() as f64);
    }
}
