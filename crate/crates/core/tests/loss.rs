use contour_saliency::gradcheck::{relative_error, STEP};
use contour_saliency::loss::{
    bce, combined_loss, contour_loss, objective, stack_masks, stack_weight_maps, weighted_total,
    LossWeights, PredictionSet,
};
use contour_saliency::maps::{BinaryMask, Plane, SaliencyMap};
use contour_saliency::morphology::{contour_weight_map, gradient_band, StructuringElement, WeightMap, WeightMapConfig};
use contour_saliency::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_pred(r: &mut ChaCha8Rng, h: usize, w: usize) -> SaliencyMap {
    SaliencyMap::from_fn(h, w, |_, _| r.gen_range(0.01..0.99)).unwrap()
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    // a random rectangle, so the weight map has a band
    let (y0, x0) = (r.gen_range(0..h / 2), r.gen_range(0..w / 2));
    let (y1, x1) = (r.gen_range(y0 + 1..=h), r.gen_range(x0 + 1..=w));
    BinaryMask::from_fn(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x))
}

fn bce_oracle(p: &SaliencyMap, y: &BinaryMask, m: Option<&WeightMap>) -> f64 {
    let mut total = 0.0;
    for i in 0..p.data().len() {
        let pi = p.data()[i].clamp(1e-7, 1.0 - 1e-7);
        let yi = y.data()[i] as f64;
        let wi = m.map_or(1.0, |m| m.data()[i]);
        total += wi * -(yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln());
    }
    total
}

#[test]
fn perfect_prediction_costs_almost_nothing() {
    let y = BinaryMask::from_fn(6, 5, |yy, x| (yy + x) % 3 == 0);
    let p = SaliencyMap::new(y.to_plane()).unwrap();
    assert!(bce(&p, &y).unwrap() <= 30.0 * 1e-6);
}

#[test]
#[allow(clippy::approx_constant)]
fn single_pixel_values() {
    let y = BinaryMask::new(1, 1, vec![1]).unwrap();
    let p = SaliencyMap::new(Plane::full(1, 1, 0.5)).unwrap();
    assert!((bce(&p, &y).unwrap() - 0.693147).abs() < 1e-6);
    let m = WeightMap::new(Plane::full(1, 1, 6.0)).unwrap();
    assert!((contour_loss(&p, &y, &m).unwrap() - 4.158883).abs() < 1e-6);
}

#[test]
fn random_4x4_matches_direct_sum() {
    let mut r = rng(1);
    for _ in 0..20 {
        let p = random_pred(&mut r, 4, 4);
        let y = BinaryMask::from_fn(4, 4, |_, _| r.gen_bool(0.5));
        assert!((bce(&p, &y).unwrap() - bce_oracle(&p, &y, None)).abs() < 1e-12);
    }
}

#[test]
fn unit_weight_map_reduces_to_cross_entropy() {
    let mut r = rng(2);
    for _ in 0..100 {
        let p = random_pred(&mut r, 16, 16);
        let y = BinaryMask::from_fn(16, 16, |_, _| r.gen_bool(0.3));
        let ones = WeightMap::ones(16, 16);
        assert_eq!(contour_loss(&p, &y, &ones).unwrap(), bce(&p, &y).unwrap());
    }
}

#[test]
fn random_8x8_contour_loss_matches_weighted_sum() {
    let mut r = rng(3);
    for _ in 0..20 {
        let p = random_pred(&mut r, 8, 8);
        let y = random_mask(&mut r, 8, 8);
        let m = contour_weight_map(&y, &WeightMapConfig::default()).unwrap();
        let got = contour_loss(&p, &y, &m).unwrap();
        assert!((got - bce_oracle(&p, &y, Some(&m))).abs() < 1e-12);
    }
}

/// Contour loss of `sigmoid(z)` on the tape, its value, and its gradient in `z`.
fn logit_loss(z: &Tensor<f64>, y: &BinaryMask, m: &WeightMap) -> (f64, Tensor<f64>) {
    let mut g = Graph::new();
    let zv = g.leaf(z.clone());
    let p = g.sigmoid(zv);
    let target = stack_masks::<f64>(std::slice::from_ref(y)).unwrap();
    let weight = stack_weight_maps::<f64>(std::slice::from_ref(m)).unwrap();
    let l = g.bce(p, &target, Some(&weight)).unwrap();
    g.backward(l).unwrap();
    (g.value(l).data()[0], g.grad(zv).unwrap().clone())
}

#[test]
fn logit_gradient_is_weighted_residual() {
    let mut r = rng(4);
    for _ in 0..5 {
        let y = random_mask(&mut r, 8, 8);
        let m = contour_weight_map(&y, &WeightMapConfig::default()).unwrap();
        // logits well inside the clamp
        let z = Tensor::from_fn([1, 1, 8, 8], |_| r.gen_range(-3.0..3.0));
        let (_, grad) = logit_loss(&z, &y, &m);
        for i in 0..64 {
            let p = 1.0 / (1.0 + (-z.data()[i]).exp());
            let identity = m.data()[i] * (p - y.data()[i] as f64);
            assert!((grad.data()[i] - identity).abs() < 1e-10);

            let mut zp = z.clone();
            zp.data_mut()[i] += STEP;
            let mut zm = z.clone();
            zm.data_mut()[i] -= STEP;
            let numeric = (logit_loss(&zp, &y, &m).0 - logit_loss(&zm, &y, &m).0) / (2.0 * STEP);
            assert!(relative_error(grad.data()[i], numeric) < 1e-6, "pixel {i}");
        }
    }
}

#[test]
fn stub_losses_weighted_by_schedule() {
    let total = weighted_total(&[1.0; 5], Some(1.0), &LossWeights::default()).unwrap();
    assert!((total - 4.1).abs() < 1e-12);
}

#[test]
fn single_unit_weight_selects_finest_output() {
    let mut r = rng(5);
    let y = random_mask(&mut r, 8, 8);
    let preds = PredictionSet {
        hierarchical: (0..5).map(|_| random_pred(&mut r, 8, 8)).collect(),
        final_p: None,
    };
    let w = LossWeights {
        per_level: vec![0.0, 0.0, 0.0, 0.0, 1.0],
        final_p: 0.0,
    };
    let cfg = WeightMapConfig::default();
    let got = combined_loss(&preds, &y, &w, false, &cfg).unwrap();
    assert_eq!(got, bce(&preds.hierarchical[4], &y).unwrap());
}

#[test]
fn combined_loss_matches_recomposition() {
    let mut r = rng(6);
    let cfg = WeightMapConfig::default();
    let w = LossWeights::default();
    for _ in 0..10 {
        let y = random_mask(&mut r, 12, 12);
        let preds = PredictionSet {
            hierarchical: (0..5).map(|_| random_pred(&mut r, 12, 12)).collect(),
            final_p: Some(random_pred(&mut r, 12, 12)),
        };
        let m = contour_weight_map(&y, &cfg).unwrap();
        let mut want = 0.0;
        for (p, wt) in preds.hierarchical.iter().zip(&w.per_level) {
            want += wt * bce_oracle(p, &y, Some(&m));
        }
        want += bce_oracle(preds.final_p.as_ref().unwrap(), &y, Some(&m));
        let got = combined_loss(&preds, &y, &w, true, &cfg).unwrap();
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn batch_objective_averages_per_sample_losses() {
    let mut r = rng(7);
    let cfg = WeightMapConfig::default();
    let w = LossWeights::for_levels(2).unwrap();
    let masks: Vec<BinaryMask> = (0..3).map(|_| random_mask(&mut r, 8, 8)).collect();
    let sets: Vec<PredictionSet<SaliencyMap>> = (0..3)
        .map(|_| PredictionSet {
            hierarchical: (0..2).map(|_| random_pred(&mut r, 8, 8)).collect(),
            final_p: Some(random_pred(&mut r, 8, 8)),
        })
        .collect();
    let want: f64 = sets
        .iter()
        .zip(&masks)
        .map(|(s, y)| combined_loss(s, y, &w, true, &cfg).unwrap())
        .sum::<f64>()
        / 3.0;

    let stack = |pick: &dyn Fn(&PredictionSet<SaliencyMap>) -> &SaliencyMap| {
        let planes: Vec<Plane> = sets.iter().map(|s| pick(s).plane().clone()).collect();
        let data: Vec<f64> = planes.iter().flat_map(|p| p.data().to_vec()).collect();
        Tensor::new([3, 1, 8, 8], data).unwrap()
    };
    let mut g = Graph::new();
    let preds = PredictionSet {
        hierarchical: (0..2).map(|i| g.input(stack(&|s| &s.hierarchical[i]))).collect(),
        final_p: Some(g.input(stack(&|s| s.final_p.as_ref().unwrap()))),
    };
    let maps: Vec<WeightMap> = masks.iter().map(|y| contour_weight_map(y, &cfg).unwrap()).collect();
    let targets = stack_masks(&masks).unwrap();
    let weights = stack_weight_maps(&maps).unwrap();
    let obj = objective(&mut g, &preds, &targets, Some(&weights), &w).unwrap();
    assert!((g.value(obj.total).data()[0] - want).abs() < 1e-9);
    assert_eq!(obj.terms.len(), 2);
}

#[test]
fn weight_maps_below_one_are_rejected() {
    let bad = WeightMap::new(Plane::new(1, 2, vec![1.0, 0.5]).unwrap());
    assert!(matches!(bad, Err(Error::CorruptWeightMap { index: 1, .. })));
}

#[test]
fn mismatched_dims_are_rejected() {
    let p = SaliencyMap::new(Plane::full(2, 2, 0.5)).unwrap();
    let y = BinaryMask::zeros(2, 3);
    assert!(matches!(bce(&p, &y), Err(Error::ShapeMismatch { .. })));
    assert!(LossWeights::default().validate(4).is_err());
    assert!(LossWeights::for_levels(6).is_err());
    assert_eq!(LossWeights::for_levels(4).unwrap().per_level, vec![0.4, 0.6, 0.8, 1.0]);
}

fn instance() -> impl Strategy<Value = (SaliencyMap, BinaryMask)> {
    (any::<u64>()).prop_map(|seed| {
        let mut r = rng(seed);
        (random_pred(&mut r, 16, 16), random_mask(&mut r, 16, 16))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contour_loss_dominates_cross_entropy((p, y) in instance()) {
        let m = contour_weight_map(&y, &WeightMapConfig::default()).unwrap();
        let band = gradient_band(&y, StructuringElement::square(5).unwrap());
        let c = contour_loss(&p, &y, &m).unwrap();
        let b = bce(&p, &y).unwrap();
        prop_assert!(c >= b);
        if band.count_ones() > 0 {
            prop_assert!(c > b);
        }
    }

    #[test]
    fn emphasis_grows_with_k((p, y) in instance(), k1 in 0.0f64..10.0, dk in 0.0f64..5.0) {
        let cfg = |k| WeightMapConfig { k, ..Default::default() };
        let lo = contour_loss(&p, &y, &contour_weight_map(&y, &cfg(k1)).unwrap()).unwrap();
        let hi = contour_loss(&p, &y, &contour_weight_map(&y, &cfg(k1 + dk)).unwrap()).unwrap();
        prop_assert!(hi >= lo);
    }
}
