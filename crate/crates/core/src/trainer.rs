//! Mini-batch SGD with momentum, per-epoch evaluation, and the four
//! ablation variants.
//!
//! Every random choice (shuffling, augmentation) comes from a stream keyed by
//! the training seed and the epoch, so a run is reproducible from its
//! configuration alone.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data::{augment, batch_images, Dataset, Sample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{objective, stack_masks, stack_weight_maps, LossWeights};
use crate::maps::SaliencyMap;
use crate::metrics::{evaluate, EvalReport, MetricsConfig};
use crate::model::{ModelConfig, Network};
use crate::morphology::{contour_weight_map, WeightMapConfig};
use crate::params::{stream, Group, ParamStore};
use crate::tensor::{Element, Tensor};

/// Which contributions are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Baseline: cross entropy, no attention.
    B,
    /// Contour loss only.
    BC,
    /// Attention only.
    BH,
    /// Both.
    BCH,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::B, Ablation::BC, Ablation::BH, Ablation::BCH];

    pub fn use_contour(self) -> bool {
        matches!(self, Ablation::BC | Ablation::BCH)
    }

    pub fn hgam(self) -> bool {
        matches!(self, Ablation::BH | Ablation::BCH)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::B => "B",
            Ablation::BC => "B+C",
            Ablation::BH => "B+H",
            Ablation::BCH => "B+C+H",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid("ablation", format!("`{s}` is not one of B, B+C, B+H, B+C+H")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for encoder parameters.
    pub encoder_lr_scale: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_step_epochs: usize,
    /// Factor applied to the learning rate every `lr_step_epochs`.
    pub lr_decay: f64,
    pub seed: u64,
    pub ablation: Ablation,
    /// `None` picks the default schedule for the model's depth.
    pub loss_weights: Option<LossWeights>,
    pub weight_map: WeightMapConfig,
    pub metrics: MetricsConfig,
    /// Training crops are taken from images resized to this size.
    pub base_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            encoder_lr_scale: 0.05,
            batch_size: 8,
            epochs: 40,
            lr_step_epochs: 10,
            lr_decay: 0.5,
            seed: 0,
            ablation: Ablation::BCH,
            loss_weights: None,
            weight_map: WeightMapConfig::default(),
            metrics: MetricsConfig::default(),
            base_size: 72,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("encoder_lr_scale", self.encoder_lr_scale),
            ("lr_decay", self.lr_decay),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("train config", format!("{name} = {v} must be ≥ 0")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "train config",
                "momentum must be in [0, 1) and weight decay ≥ 0",
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lr_step_epochs == 0 {
            return Err(Error::invalid(
                "train config",
                "batch size, epochs and lr step must be positive",
            ));
        }
        self.weight_map.validate()?;
        self.metrics.validate()
    }

    /// Learning rate during 0-based `epoch`, before the group multiplier.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
    }

    pub fn weights_for(&self, levels: usize) -> Result<LossWeights> {
        match &self.loss_weights {
            Some(w) => {
                w.validate(levels)?;
                Ok(w.clone())
            }
            None => LossWeights::for_levels(levels),
        }
    }
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, Default)]
pub struct SgdState<E: Element> {
    velocity: Vec<Tensor<E>>,
}

/// `v ← μ·v + g + λ·w`, `w ← w − lr_eff·v`, then clears the gradients.
/// `lr_eff` includes the step schedule and the encoder multiplier.
pub fn sgd_step<E: Element>(
    params: &mut ParamStore<E>,
    state: &mut SgdState<E>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    }
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::invalid("sgd_step", format!("no gradient for `{}`", p.name)));
    }
    let base = cfg.lr_at(epoch);
    let mu = E::from_f64(cfg.momentum);
    let wd = E::from_f64(cfg.weight_decay);
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        let scale = match p.group {
            Group::Encoder => cfg.encoder_lr_scale,
            Group::Rest => 1.0,
        };
        let lr = E::from_f64(base * scale);
        let g = p.grad.take().expect("checked above");
        for ((w, v), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = mu * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch objective.
    pub loss: f64,
    /// Mean unweighted loss per output: hierarchical (coarsest first), then
    /// `P` when present.
    pub terms: Vec<f64>,
    pub max_fbeta: f64,
    pub mae: f64,
    pub boundary_mae: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,max_fbeta,mae,boundary_mae\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.loss, r.max_fbeta, r.mae, r.boundary_mae
        ));
    }
    s
}

/// `epoch,total,…` with one column per output.
pub fn loss_csv(history: &[EpochRecord], levels: usize) -> String {
    let mut s = String::from("epoch,total");
    for i in (1..=levels).rev() {
        s.push_str(&format!(",p{i}"));
    }
    if history.first().is_some_and(|r| r.terms.len() > levels) {
        s.push_str(",p");
    }
    s.push('\n');
    for r in history {
        s.push_str(&format!("{},{}", r.epoch, r.loss));
        for t in &r.terms {
            s.push_str(&format!(",{t}"));
        }
        s.push('\n');
    }
    s
}

pub struct TrainOutcome<E: Element> {
    pub last: Network<E>,
    /// Parameters from the epoch with the highest max F-beta (earliest on
    /// ties).
    pub best: Network<E>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Resizes `samples` for evaluation and returns predictions with their
/// masks.
pub fn predict_eval<E: Element>(
    net: &Network<E>,
    samples: &[Sample],
    batch_size: usize,
) -> Result<(Vec<SaliencyMap>, Vec<crate::maps::BinaryMask>)> {
    let size = net.config().input_size;
    let mut rng = stream(0, "eval");
    let prepared: Vec<Sample> = samples
        .iter()
        .map(|s| augment(s, false, &mut rng, size, size))
        .collect();
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in prepared.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        preds.extend(net.predict(&batch_images::<E>(&refs)?)?);
    }
    Ok((preds, prepared.into_iter().map(|s| s.mask).collect()))
}

/// Metrics of `net` on `samples`. Predictions are snapped to bytes first, so
/// the numbers equal an evaluation of the written saliency files.
pub fn evaluate_network<E: Element>(
    net: &Network<E>,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let (preds, masks) = predict_eval(net, samples, cfg.batch_size)?;
    let preds: Vec<SaliencyMap> = preds.iter().map(SaliencyMap::snapped).collect();
    evaluate(&preds, &masks, &cfg.metrics)
}

/// Trains from a fresh seeded initialization. `on_epoch` sees each history
/// row as soon as it is complete.
pub fn train<E: Element>(
    model: &ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<E>> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Dataset("need nonempty train and test splits".into()));
    }
    let model = model.clone().with_hgam(cfg.ablation.hgam());
    let weights = cfg.weights_for(model.levels)?;
    let mut net = Network::<E>::new(model.clone(), cfg.seed)?;
    let mut state = SgdState::default();
    let crop = model.input_size;
    if cfg.base_size < crop {
        return Err(Error::invalid("train", format!("base size {} below input size {crop}", cfg.base_size)));
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = net.clone();
    let mut best_epoch = 0;
    let mut best_f = f64::NEG_INFINITY;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &format!("shuffle.{epoch}")));
        let mut aug_rng = stream(cfg.seed, &format!("augment.{epoch}"));
        let mut loss_sum = 0.0;
        let mut term_sums: Vec<f64> = Vec::new();
        let mut batches = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| augment(&data.train[i], true, &mut aug_rng, cfg.base_size, crop))
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let images = batch_images::<E>(&refs)?;
            let masks: Vec<_> = batch.iter().map(|s| s.mask.clone()).collect();
            let targets = stack_masks::<E>(&masks)?;
            let weight_maps = if cfg.ablation.use_contour() {
                let maps = masks
                    .iter()
                    .map(|m| contour_weight_map(m, &cfg.weight_map))
                    .collect::<Result<Vec<_>>>()?;
                Some(stack_weight_maps::<E>(&maps)?)
            } else {
                None
            };

            let mut g = Graph::new();
            let bound = net.params().bind(&mut g);
            let img = g.input(images);
            let acts = net.forward(&mut g, &bound, img)?;
            let obj = objective(&mut g, &acts.predictions, &targets, weight_maps.as_ref(), &weights)?;
            let loss = g.value(obj.total).data()[0].as_f64();
            if !loss.is_finite() {
                let culprit = g
                    .first_non_finite()
                    .map(|v| g.describe(v))
                    .unwrap_or_else(|| "loss".into());
                return Err(Error::NonFinite {
                    tensor: culprit,
                    epoch: epoch + 1,
                    step: step + 1,
                });
            }
            g.backward(obj.total)?;
            net.params_mut().accumulate_grads(&g, &bound)?;
            sgd_step(net.params_mut(), &mut state, cfg, epoch)?;
            if let Some(p) = net.params().iter().find(|p| !p.value.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: format!("parameter {} {:?}", p.name, p.value.shape()),
                    epoch: epoch + 1,
                    step: step + 1,
                });
            }

            let terms = obj.terms.iter().chain(obj.final_term.iter());
            let terms: Vec<f64> = terms.map(|&t| g.value(t).data()[0].as_f64()).collect();
            term_sums.resize(terms.len(), 0.0);
            term_sums.iter_mut().zip(&terms).for_each(|(s, t)| *s += t);
            loss_sum += loss;
            batches += 1;
        }

        let report = evaluate_network(&net, &data.test, cfg)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: cfg.lr_at(epoch),
            loss: loss_sum / batches as f64,
            terms: term_sums.iter().map(|s| s / batches as f64).collect(),
            max_fbeta: report.max_fbeta,
            mae: report.mae,
            boundary_mae: report.boundary_mae,
        };
        if record.max_fbeta > best_f {
            best_f = record.max_fbeta;
            best_epoch = record.epoch;
            best = net.clone();
        }
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        last: net,
        best,
        best_epoch,
        history,
    })
}
