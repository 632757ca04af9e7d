use contour_saliency::data::{Dataset, DatasetSpec};
use contour_saliency::model::ModelConfig;
use contour_saliency::params::{Group, ParamStore};
use contour_saliency::trainer::{
    history_csv, loss_csv, sgd_step, train, Ablation, SgdState, TrainConfig,
};
use contour_saliency::{Error, Tensor};

fn scalar_store(w: f64, g: f64, group: Group) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let id = store.insert("w", group, Tensor::from_f64([1], &[w]).unwrap()).unwrap();
    store.get_mut(id).grad = Some(Tensor::from_f64([1], &[g]).unwrap());
    store
}

fn value(store: &ParamStore<f64>) -> f64 {
    store.by_name("w").unwrap().value.data()[0]
}

#[test]
fn single_plain_step() {
    let cfg = TrainConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0, ..Default::default() };
    let mut store = scalar_store(1.0, 1.0, Group::Rest);
    sgd_step(&mut store, &mut SgdState::default(), &cfg, 0).unwrap();
    assert!((value(&store) - 0.9).abs() < 1e-15);
    // gradients are consumed by the step
    assert!(store.by_name("w").unwrap().grad.is_none());
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
    let mut store = scalar_store(0.37, 0.0, Group::Encoder);
    sgd_step(&mut store, &mut SgdState::default(), &cfg, 3).unwrap();
    assert_eq!(value(&store), 0.37);
}

#[test]
fn missing_gradient_is_an_error() {
    let cfg = TrainConfig::default();
    let mut store = scalar_store(1.0, 1.0, Group::Rest);
    store.iter_mut().for_each(|p| p.grad = None);
    assert!(sgd_step(&mut store, &mut SgdState::default(), &cfg, 0).is_err());
}

#[test]
fn three_steps_follow_the_momentum_recursion() {
    let cfg = TrainConfig {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 1e-4,
        encoder_lr_scale: 0.05,
        lr_step_epochs: 2,
        lr_decay: 0.5,
        ..Default::default()
    };
    let grads = [0.8, -0.3, 1.7];
    for group in [Group::Rest, Group::Encoder] {
        let scale = if group == Group::Encoder { 0.05 } else { 1.0 };
        let mut store = scalar_store(2.0, grads[0], group);
        let mut state = SgdState::default();
        let (mut w, mut v) = (2.0f64, 0.0f64);
        for (epoch, &g) in grads.iter().enumerate() {
            if epoch > 0 {
                store.iter_mut().for_each(|p| p.grad = Some(Tensor::from_f64([1], &[g]).unwrap()));
            }
            sgd_step(&mut store, &mut state, &cfg, epoch).unwrap();
            let lr = 0.05 * 0.5f64.powi((epoch / 2) as i32) * scale;
            v = 0.9 * v + g + 1e-4 * w;
            w -= lr * v;
            assert!((value(&store) - w).abs() < 1e-12);
        }
    }
}

#[test]
fn schedule_steps_every_interval() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), cfg.lr);
    assert_eq!(cfg.lr_at(9), cfg.lr);
    assert_eq!(cfg.lr_at(10), cfg.lr * 0.5);
    assert_eq!(cfg.lr_at(39), cfg.lr * 0.125);
    let literal = TrainConfig { lr_decay: 0.05, ..Default::default() };
    assert!((literal.lr_at(20) - cfg.lr * 0.0025).abs() < 1e-18);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lr: f64::NAN, ..Default::default() }.validate().is_err());
    assert_eq!("b+c+h".parse::<Ablation>().unwrap(), Ablation::BCH);
    assert!(Ablation::BC.use_contour() && !Ablation::BC.hgam());
}

fn tiny_data(seed: u64) -> Dataset {
    Dataset::generate(&DatasetSpec {
        count: 12,
        test_count: 4,
        base_size: 18,
        crop_size: 16,
        seed,
    })
    .unwrap()
}

fn tiny_cfg(ablation: Ablation) -> TrainConfig {
    TrainConfig {
        lr: 1e-4,
        encoder_lr_scale: 1.0,
        batch_size: 4,
        epochs: 3,
        seed: 5,
        ablation,
        base_size: 18,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let data = tiny_data(1);
    let cfg = TrainConfig { lr: 0.0, ..tiny_cfg(Ablation::BCH) };
    let out = train::<f32>(&ModelConfig::tiny(), &data, &cfg, |_| {}).unwrap();
    let init = contour_saliency::model::Network::<f32>::new(ModelConfig::tiny(), 5).unwrap();
    for p in init.params().iter() {
        assert_eq!(out.last.params().by_name(&p.name).unwrap().value, p.value, "{}", p.name);
    }
}

#[test]
fn same_seed_same_history() {
    let data = tiny_data(2);
    for ablation in Ablation::ALL {
        let cfg = tiny_cfg(ablation);
        let a = train::<f32>(&ModelConfig::tiny(), &data, &cfg, |_| {}).unwrap();
        let b = train::<f32>(&ModelConfig::tiny(), &data, &cfg, |_| {}).unwrap();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.history, b.history);
    }
}

#[test]
fn history_is_independent_of_thread_count() {
    let data = tiny_data(3);
    let cfg = tiny_cfg(Ablation::BCH);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train::<f32>(&ModelConfig::tiny(), &data, &cfg, |_| {}).unwrap().history)
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn history_rows_and_callbacks() {
    let data = tiny_data(4);
    let cfg = tiny_cfg(Ablation::BCH);
    let mut seen = Vec::new();
    let out = train::<f32>(&ModelConfig::tiny(), &data, &cfg, |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    let best = out.history.iter().map(|r| r.max_fbeta).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.history[out.best_epoch - 1].max_fbeta, best);
    for r in &out.history {
        assert!(r.loss.is_finite());
        // three hierarchical outputs plus the guided one
        assert_eq!(r.terms.len(), 4);
        assert!((0.0..=1.0).contains(&r.max_fbeta) && (0.0..=1.0).contains(&r.mae));
    }
    let csv = history_csv(&out.history);
    assert!(csv.starts_with("epoch,loss,max_fbeta,mae,boundary_mae\n1,"));
    let losses = loss_csv(&out.history, 3);
    assert!(losses.starts_with("epoch,total,p3,p2,p1,p\n"));
}

#[test]
fn diverging_run_names_the_bad_tensor() {
    let data = tiny_data(5);
    let cfg = TrainConfig { lr: 1e12, epochs: 5, ..tiny_cfg(Ablation::BC) };
    match train::<f32>(&ModelConfig::tiny(), &data, &cfg, |_| {}) {
        Err(Error::NonFinite { tensor, .. }) => assert!(tensor.contains('#') || tensor.starts_with("parameter "), "{tensor}"),
        other => panic!("expected a non-finite error, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn empty_splits_are_rejected() {
    let mut data = tiny_data(6);
    data.test.clear();
    assert!(train::<f32>(&ModelConfig::tiny(), &data, &tiny_cfg(Ablation::B), |_| {}).is_err());
}
