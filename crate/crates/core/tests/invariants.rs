use pgan_core::eval::average_precision;
use pgan_core::losses::{batch_hard_triplet, euclidean};
use pgan_core::pam::{attention_weights, compose_part_feature, mgap, Psi};
use pgan_core::proposals::{apply_mask, rasterize_mask, select_top_d};
use pgan_core::rng::rng_for;
use pgan_core::{AttentionWeights, FeatureMap, Matrix, PartBox};
use proptest::collection::vec;
use proptest::prelude::*;

const FEAT: (usize, usize) = (8, 8);
const IMG: (usize, usize) = (64, 64);

fn boxes(max: usize) -> impl Strategy<Value = Vec<PartBox>> {
    vec((0.0f64..60.0, 0.0f64..60.0, 1.0f64..40.0, 1.0f64..40.0, 0.0f64..1.0), 0..max).prop_map(|v| {
        v.into_iter().map(|(x, y, w, h, c)| PartBox::new(x, y, (x + w).min(64.0), (y + h).min(64.0), c)).collect()
    })
}

fn feature_map(c: usize) -> impl Strategy<Value = FeatureMap> {
    vec(-3.0f64..3.0, FEAT.0 * FEAT.1 * c).prop_map(move |v| FeatureMap::from_hwc(FEAT.0, FEAT.1, c, &v).unwrap())
}

proptest! {
    #[test]
    fn softmax_weights_lie_on_the_simplex(scores in vec(-50.0f64..50.0, 1..16)) {
        let w = AttentionWeights::from_scores(&scores);
        let sum: f64 = w.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(w.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(AttentionWeights::new(w.into_vec()).is_ok());
    }

    #[test]
    fn mgap_matches_a_direct_loop(fm in feature_map(3), b in boxes(2)) {
        let b = b.first().copied().unwrap_or_else(|| PartBox::full_frame(IMG.0, IMG.1));
        let mask = rasterize_mask(&b, IMG, FEAT);
        let got = mgap(&fm, &mask).unwrap();
        for ch in 0..3 {
            let mut sum = 0.0;
            let mut n = 0;
            for y in 0..FEAT.0 {
                for x in 0..FEAT.1 {
                    if mask.contains(y, x) {
                        sum += fm.at(y, x, ch);
                        n += 1;
                    }
                }
            }
            prop_assert!(n > 0);
            prop_assert!((got[ch] - sum / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn part_feature_amplifies_at_most_twofold(fg in feature_map(4), dets in boxes(12), d in 1usize..10, seed in 0u64..1000) {
        let chosen = select_top_d(&dets, d, IMG);
        prop_assert_eq!(chosen.len(), d);
        let masks: Vec<_> = chosen.iter().map(|b| rasterize_mask(b, IMG, FEAT)).collect();
        let parts: Vec<_> = masks.iter().map(|m| apply_mask(&fg, m).unwrap()).collect();
        let pooled: Vec<_> = parts.iter().zip(&masks).map(|(p, m)| mgap(p, m).unwrap()).collect();
        let psi = Psi::new(4, &mut rng_for(seed, &[]));
        let w = attention_weights(&pooled, &psi).unwrap();
        let fp = compose_part_feature(&fg, &parts, &w).unwrap();
        for (y, x) in (0..FEAT.0).flat_map(|y| (0..FEAT.1).map(move |x| (y, x))) {
            let gain: f64 = masks.iter().zip(w.as_slice()).filter(|(m, _)| m.contains(y, x)).map(|(_, wi)| wi).sum();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&gain));
            for ch in 0..4 {
                let g = fg.at(y, x, ch);
                prop_assert!((fp.at(y, x, ch) - g * (1.0 + gain)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn average_precision_matches_the_definition(rel in vec(any::<bool>(), 1..30)) {
        let total = rel.iter().filter(|&&r| r).count();
        let got = average_precision(&rel, total);
        if total == 0 {
            prop_assert!(got.is_none());
        } else {
            let mut expect = 0.0;
            for k in 0..rel.len() {
                if rel[k] {
                    let hits = rel[..=k].iter().filter(|&&r| r).count();
                    expect += hits as f64 / (k + 1) as f64;
                }
            }
            let got = got.unwrap();
            prop_assert!((got - expect / total as f64).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn batch_hard_triplet_matches_exhaustive_search(data in vec(-2.0f64..2.0, 6 * 3), margin in 0.0f64..1.0) {
        let labels = [0usize, 0, 1, 1, 2, 2];
        let x = Matrix::from_vec(6, 3, data).unwrap();
        let out = batch_hard_triplet(&x, &labels, margin).unwrap();
        let mut expect = 0.0;
        for a in 0..6 {
            let mut worst = f64::NEG_INFINITY;
            for p in (0..6).filter(|&p| p != a && labels[p] == labels[a]) {
                for n in (0..6).filter(|&n| labels[n] != labels[a]) {
                    let h = margin + euclidean(x.row(a), x.row(p)) - euclidean(x.row(a), x.row(n));
                    worst = worst.max(h);
                }
            }
            expect += worst.max(0.0);
        }
        prop_assert!(out.loss >= 0.0);
        prop_assert!((out.loss - expect / 6.0).abs() < 1e-12);
    }
}
