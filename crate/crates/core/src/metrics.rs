//! Saliency evaluation: precision/recall sweeps, max F-beta, MAE, and MAE on
//! the boundary band.
//!
//! Predictions are quantized to bytes (`round(255·v)`) before thresholding,
//! so evaluating in memory and evaluating written graymaps agree exactly.
//! Precision and recall are micro-averaged: pixel counts are pooled over the
//! whole set before dividing.
//!
//! Empty denominators: precision is 1 when nothing is predicted positive,
//! recall is 1 when the ground truth has no positives, and F-beta is 0 when
//! precision and recall are both 0.

use crate::error::{Error, Result};
use crate::maps::{quantize, BinaryMask, SaliencyMap};
use crate::morphology::{gradient_band, StructuringElement};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsConfig {
    pub beta_sq: f64,
    /// Byte thresholds, sorted ascending; a pixel is positive when its byte
    /// is `≥ t`.
    pub thresholds: Vec<u8>,
    pub boundary_band_radius: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            beta_sq: 0.3,
            thresholds: (0..=255).collect(),
            boundary_band_radius: 2,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_sq > 0.0) {
            return Err(Error::invalid("metrics", format!("β² = {} must be positive", self.beta_sq)));
        }
        if self.thresholds.is_empty() || self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("metrics", "thresholds must be nonempty and strictly ascending"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: u8,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pr_curve: Vec<PrPoint>,
    pub max_fbeta: f64,
    pub best_threshold: u8,
    pub mae: f64,
    pub boundary_mae: f64,
    pub sample_count: usize,
}

fn check_pairs(preds: &[SaliencyMap], gts: &[BinaryMask]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::invalid("metrics", "no samples"));
    }
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "metrics",
            format!("{} predictions for {} masks", preds.len(), gts.len()),
        ));
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.dims() != g.dims() {
            let (a, b) = (p.dims(), g.dims());
            return Err(Error::shape("metrics", &[a.0, a.1], &[b.0, b.1]));
        }
    }
    Ok(())
}

/// Per-byte histograms of foreground and background pixels.
struct Histogram {
    fg: [u64; 256],
    bg: [u64; 256],
}

impl Histogram {
    fn build(preds: &[SaliencyMap], gts: &[BinaryMask]) -> Self {
        let mut h = Histogram {
            fg: [0; 256],
            bg: [0; 256],
        };
        for (p, g) in preds.iter().zip(gts) {
            for (&v, &t) in p.data().iter().zip(g.data()) {
                let b = quantize(v) as usize;
                if t == 1 {
                    h.fg[b] += 1;
                } else {
                    h.bg[b] += 1;
                }
            }
        }
        h
    }

    /// `(TP, FP, FN)` at every threshold `t`, as suffix sums.
    fn confusion(&self) -> Vec<(u64, u64, u64)> {
        let fg_total: u64 = self.fg.iter().sum();
        let mut out = vec![(0, 0, 0); 256];
        let (mut tp, mut fp) = (0, 0);
        for t in (0..256).rev() {
            tp += self.fg[t];
            fp += self.bg[t];
            out[t] = (tp, fp, fg_total - tp);
        }
        out
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn pr(tp: u64, fp: u64, fn_: u64) -> (f64, f64) {
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

pub fn fbeta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let den = beta_sq * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / den
    }
}

/// Micro-averaged `(precision, recall)` with pixels positive at byte `≥ t`.
pub fn pr_at_threshold(preds: &[SaliencyMap], gts: &[BinaryMask], t: u8) -> Result<(f64, f64)> {
    check_pairs(preds, gts)?;
    let (tp, fp, fn_) = Histogram::build(preds, gts).confusion()[t as usize];
    Ok(pr(tp, fp, fn_))
}

pub fn pr_curve(preds: &[SaliencyMap], gts: &[BinaryMask], cfg: &MetricsConfig) -> Result<Vec<PrPoint>> {
    check_pairs(preds, gts)?;
    cfg.validate()?;
    let conf = Histogram::build(preds, gts).confusion();
    Ok(cfg
        .thresholds
        .iter()
        .map(|&t| {
            let (tp, fp, fn_) = conf[t as usize];
            let (precision, recall) = pr(tp, fp, fn_);
            PrPoint {
                threshold: t,
                precision,
                recall,
            }
        })
        .collect())
}

fn best(curve: &[PrPoint], beta_sq: f64) -> (u8, f64) {
    curve.iter().fold((curve[0].threshold, f64::NEG_INFINITY), |acc, p| {
        let f = fbeta(p.precision, p.recall, beta_sq);
        if f > acc.1 {
            (p.threshold, f)
        } else {
            acc
        }
    })
}

/// `(best_threshold, F_β)`; ties go to the lowest threshold.
pub fn max_fbeta(preds: &[SaliencyMap], gts: &[BinaryMask], cfg: &MetricsConfig) -> Result<(u8, f64)> {
    let curve = pr_curve(preds, gts, cfg)?;
    Ok(best(&curve, cfg.beta_sq))
}

/// Neumaier-compensated sum.
#[derive(Default)]
struct Accumulator {
    sum: f64,
    carry: f64,
}

impl Accumulator {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Mean over samples of the per-pixel mean absolute error.
pub fn mae(preds: &[SaliencyMap], gts: &[BinaryMask]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let mut outer = Accumulator::default();
    for (p, g) in preds.iter().zip(gts) {
        let mut inner = Accumulator::default();
        for (&v, &t) in p.data().iter().zip(g.data()) {
            inner.add((v - t as f64).abs());
        }
        outer.add(inner.total() / p.data().len() as f64);
    }
    Ok(outer.total() / preds.len() as f64)
}

/// MAE restricted to each mask's boundary band; samples without a band are
/// skipped.
pub fn boundary_mae(preds: &[SaliencyMap], gts: &[BinaryMask], cfg: &MetricsConfig) -> Result<f64> {
    check_pairs(preds, gts)?;
    let se = StructuringElement::square(2 * cfg.boundary_band_radius + 1)?;
    let mut outer = Accumulator::default();
    let mut used = 0;
    for (p, g) in preds.iter().zip(gts) {
        let band = gradient_band(g, se);
        let mut inner = Accumulator::default();
        let mut count = 0;
        for ((&v, &t), &b) in p.data().iter().zip(g.data()).zip(band.data()) {
            if b == 1 {
                inner.add((v - t as f64).abs());
                count += 1;
            }
        }
        if count > 0 {
            outer.add(inner.total() / count as f64);
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::invalid("boundary_mae", "no sample has a boundary band"));
    }
    Ok(outer.total() / used as f64)
}

pub fn evaluate(preds: &[SaliencyMap], gts: &[BinaryMask], cfg: &MetricsConfig) -> Result<EvalReport> {
    let pr_curve = pr_curve(preds, gts, cfg)?;
    let (best_threshold, max_fbeta) = best(&pr_curve, cfg.beta_sq);
    Ok(EvalReport {
        pr_curve,
        max_fbeta,
        best_threshold,
        mae: mae(preds, gts)?,
        boundary_mae: boundary_mae(preds, gts, cfg)?,
        sample_count: preds.len(),
    })
}

impl EvalReport {
    /// `threshold,precision,recall` lines with a header.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for p in &self.pr_curve {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
        }
        s
    }

    /// `key=value` summary lines.
    pub fn summary(&self) -> String {
        format!(
            "max_fbeta={}\nbest_threshold={}\nmae={}\nboundary_mae={}\nsamples={}\n",
            self.max_fbeta, self.best_threshold, self.mae, self.boundary_mae, self.sample_count
        )
    }
}
