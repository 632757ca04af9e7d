mod common;

use contour_saliency::attention::{global_contrast_attention, guide, hgam_step, AttentionConfig, HgamLevel};
use contour_saliency::gradcheck::check_function;
use contour_saliency::params::{Group, ParamStore};
use contour_saliency::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn attend(f: &Tensor<f64>, cfg: &AttentionConfig) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.input(f.clone());
    let a = global_contrast_attention(&mut g, v, cfg).unwrap();
    g.value(a).clone()
}

fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(-2.0..2.0))
}

#[test]
fn constant_input_gives_lambda() {
    let cfg = AttentionConfig::default();
    for (c, v) in [(1, 0.0), (3, 5.0), (7, -123.25)] {
        let a = attend(&Tensor::full([2, c, 5, 4], v), &cfg);
        assert!(a.data().iter().all(|&x| x == 0.1));
    }
}

#[test]
fn constants_with_inexact_means_still_give_lambda() {
    // sum/n of these rounds away from the constant itself
    let cfg = AttentionConfig::default();
    for v in [0.1, 1.0 / 3.0, -7.3, 1e-3] {
        for (h, w) in [(3, 7), (5, 5), (9, 11)] {
            let a = attend(&Tensor::full([1, 2, h, w], v), &cfg);
            assert!(a.data().iter().all(|&x| x == 0.1), "{v} on {h}×{w}");
        }
    }
}

#[test]
fn two_by_two_standardization() {
    let f = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut g = Graph::new();
    let v = g.input(f.clone());
    let z = g.standardize_spatial(v, 0.0).unwrap();
    let want: [f64; 4] = [-1.3416, -0.4472, 0.4472, 1.3416];
    for (a, b) in g.value(z).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-4);
    }
    let a = attend(&f, &AttentionConfig { lambda: 0.1, epsilon: 1e-300 });
    for (a, b) in a.data().iter().zip([0.1f64, 0.1, 0.5472, 1.4416]) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn matches_direct_evaluation() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let cfg = AttentionConfig::default();
    for _ in 0..10 {
        let f = random(&mut r, &[2, 3, 6, 5]);
        common::assert_close(&attend(&f, &cfg), &common::attention(&f, 0.1, 1e-5), 1e-12);
    }
}

#[test]
fn degenerate_channel_contributes_zero() {
    // channel 1 is constant: its standardized plane is 0, halving channel 0's share
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let varying = random(&mut r, &[1, 1, 4, 4]);
    let both = Tensor::new(
        [1, 2, 4, 4],
        varying.data().iter().cloned().chain(std::iter::repeat(3.0).take(16)).collect(),
    )
    .unwrap();
    let cfg = AttentionConfig { lambda: 0.0, epsilon: 1e-5 };
    let single = attend(&varying, &cfg);
    let mixed = attend(&both, &cfg);
    for (s, m) in single.data().iter().zip(mixed.data()) {
        assert!((s / 2.0 - m).abs() < 1e-12);
    }
}

#[test]
fn guide_examples_and_gradients() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let res = random(&mut r, &[2, 3, 4, 4]);
    let run = |a: Tensor<f64>| {
        let mut g = Graph::new();
        let (a, x) = (g.input(a), g.input(res.clone()));
        let y = guide(&mut g, x, a).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(Tensor::full([2, 1, 4, 4], 1.0)), res);
    assert_eq!(run(Tensor::full([2, 1, 4, 4], 0.1)), res.map(|v| 0.1 * v));
    let att = Tensor::from_fn([2, 1, 4, 4], |_| r.gen_range(0.1..2.0));
    let out = run(att.clone());
    common::assert_close(&out, &common::broadcast(&att, &res), 1e-12);
    // attention ≥ 0 never flips a sign
    for (o, x) in out.data().iter().zip(res.data()) {
        assert!(o * x >= 0.0);
    }
    let row = check_function("guide", &[att, res.clone()], &|g, v| guide(g, v[1], v[0])).unwrap();
    assert!(row.max_rel_err < 1e-6, "{row:?}");
}

#[test]
fn guide_rejects_grid_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::zeros([1, 1, 4, 4]));
    let x = g.input(Tensor::zeros([1, 2, 4, 3]));
    assert!(guide(&mut g, x, a).is_err());
}

/// Builds one attention level's parameters and returns them as plain tensors too.
fn level(store: &mut ParamStore<f64>, seed: u64, name: &str, c_u: usize, c_e: usize, m: usize, top: bool) -> HgamLevel {
    let mut conv = |part: &str, c_in, c_out, k| {
        store.conv(seed, &format!("{name}.{part}"), Group::Rest, c_in, c_out, k).unwrap()
    };
    HgamLevel {
        h1: conv("h1", c_u, m, 3),
        h2: conv("h2", c_u, m, 3),
        h3: conv("h3", c_e, m, 1),
        h4: conv("h4", if top { c_e } else { m }, m, 3),
        fuse: conv("fuse", 4 * m, m, 1),
        top,
    }
}

fn randomize_biases(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.name.ends_with(".bias") {
            p.value = Tensor::from_fn(p.value.shape(), |_| r.gen_range(-0.5..0.5));
        }
    }
}

/// Two-level chain computed by the library and by straight-line oracles.
#[test]
fn chain_matches_recomposition() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (c_u, c_e, m, full) = (3, 4, 5, 16);
    let mut store = ParamStore::<f64>::new();
    let top = level(&mut store, 9, "top", c_u, c_e, m, true);
    let low = level(&mut store, 9, "low", c_u, c_e, m, false);
    randomize_biases(&mut store, &mut r);
    let e_top = random(&mut r, &[2, c_e, 4, 4]);
    let e_low = random(&mut r, &[2, c_e, 8, 8]);
    let u_top = random(&mut r, &[2, c_u, full, full]);
    let u_low = random(&mut r, &[2, c_u, full, full]);
    let cfg = AttentionConfig::default();

    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let vars: Vec<_> = [&e_top, &e_low, &u_top, &u_low].iter().map(|t| g.input((*t).clone())).collect();
    let s_top = hgam_step(&mut g, &b, &top, vars[0], vars[2], None, &cfg).unwrap();
    let s_low = hgam_step(&mut g, &b, &low, vars[1], vars[3], Some(s_top.message), &cfg).unwrap();

    let conv = |l: &contour_saliency::params::ConvLayer, x: &Tensor<f64>| {
        common::conv_same(x, &store.get(l.weight).value, &store.get(l.bias).value)
    };
    let oracle = |lvl: &HgamLevel, e: &Tensor<f64>, u: &Tensor<f64>, prev: Option<&Tensor<f64>>| {
        let (h, w) = (e.shape()[2], e.shape()[3]);
        let h1 = conv(&lvl.h1, &common::max_pool(u, h, w));
        let h2 = conv(&lvl.h2, &common::avg_pool(u, h, w));
        let h3 = conv(&lvl.h3, e);
        let h4 = match prev {
            None => common::upsample(&common::relu(&conv(&lvl.h4, &common::max_pool(e, h / 2, w / 2))), h, w),
            Some(p) => common::relu(&conv(&lvl.h4, &common::upsample(p, h, w))),
        };
        let msg = conv(&lvl.fuse, &common::concat(&[&h1, &h2, &h3, &h4]));
        let att = common::attention(&msg, 0.1, 1e-5);
        (msg, att)
    };
    let (m_top, a_top) = oracle(&top, &e_top, &u_top, None);
    let (m_low, a_low) = oracle(&low, &e_low, &u_low, Some(&m_top));
    common::assert_close(g.value(s_top.message), &m_top, 1e-10);
    common::assert_close(g.value(s_top.attention), &a_top, 1e-10);
    common::assert_close(g.value(s_low.message), &m_low, 1e-10);
    common::assert_close(g.value(s_low.attention), &a_low, 1e-10);
    // each message doubles its predecessor's grid
    assert_eq!(g.shape(s_top.message), &[2, m, 4, 4]);
    assert_eq!(g.shape(s_low.message), &[2, m, 8, 8]);
    assert_eq!(g.shape(s_low.attention), &[2, 1, 8, 8]);
}

#[test]
fn zero_parameters_collapse_to_lambda() {
    let mut store = ParamStore::<f64>::new();
    let top = level(&mut store, 1, "top", 2, 3, 4, true);
    for p in store.iter_mut() {
        p.value.fill(0.0);
    }
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let e = g.input(random(&mut r, &[1, 3, 4, 4]));
    let u = g.input(random(&mut r, &[1, 2, 16, 16]));
    let s = hgam_step(&mut g, &b, &top, e, u, None, &AttentionConfig::default()).unwrap();
    assert!(g.value(s.message).data().iter().all(|&v| v == 0.0));
    assert!(g.value(s.attention).data().iter().all(|&v| v == 0.1));
}

#[test]
fn chain_preconditions() {
    let mut store = ParamStore::<f64>::new();
    let top = level(&mut store, 1, "top", 2, 3, 4, true);
    let low = level(&mut store, 1, "low", 2, 3, 4, false);
    let cfg = AttentionConfig::default();
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let e = g.input(Tensor::zeros([1, 3, 4, 4]));
    let u = g.input(Tensor::zeros([1, 2, 16, 16]));
    let odd = g.input(Tensor::zeros([1, 3, 3, 3]));
    let wrong_prev = g.input(Tensor::zeros([1, 4, 3, 3]));
    assert!(hgam_step(&mut g, &b, &low, e, u, None, &cfg).is_err());
    assert!(hgam_step(&mut g, &b, &top, e, u, Some(e), &cfg).is_err());
    assert!(hgam_step(&mut g, &b, &top, odd, u, None, &cfg).is_err());
    assert!(hgam_step(&mut g, &b, &low, e, u, Some(wrong_prev), &cfg).is_err());
    assert!(AttentionConfig { lambda: -0.1, epsilon: 1e-5 }.validate().is_err());
    assert!(AttentionConfig { lambda: 0.1, epsilon: 0.0 }.validate().is_err());
}

fn feature() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..4, 2usize..7, 2usize..7, any::<u64>()).prop_map(|(c, h, w, seed)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, c, h, w], |_| r.gen_range(-10.0..10.0))
    })
}

fn min_variance(f: &Tensor<f64>) -> f64 {
    let c = f.shape()[1];
    (0..c)
        .map(|ch| {
            let p = f.plane(0, ch);
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p.len() as f64
        })
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn never_below_lambda(f in feature()) {
        let a = attend(&f, &AttentionConfig::default());
        prop_assert!(a.data().iter().all(|&v| v >= 0.1));
    }

    #[test]
    fn positive_affine_invariance(f in feature(), scale in 0.5f64..10.0, shift in -20.0f64..20.0) {
        // the output moves by about z·ε·|1 − 1/a²|/(2σ²), which is below 1e-6
        // only once σ² is around 10⁶·ε
        prop_assume!(min_variance(&f) > 1e6 * 1e-5);
        let cfg = AttentionConfig::default();
        let a = attend(&f, &cfg);
        let b = attend(&f.map(|v| scale * v + shift), &cfg);
        prop_assert!(a.max_abs_diff(&b) < 1e-6);
    }
}
