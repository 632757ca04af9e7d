//! Cross entropy, the contour-weighted cross entropy, and the weighted
//! multi-output objective.
//!
//! Everything is sum-reduced over pixels. Batches are averaged over the
//! sample axis only, in [`objective`].

use crate::error::{Error, Result};
use crate::graph::{Graph, Var, BCE_CLAMP};
use crate::maps::{BinaryMask, SaliencyMap};
use crate::morphology::{contour_weight_map, WeightMap, WeightMapConfig};
use crate::tensor::{Element, Tensor};

/// Output weights of the hierarchical objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// One weight per hierarchical output, coarsest first; the last entry
    /// weighs `P_1`.
    pub per_level: Vec<f64>,
    /// Weight of the guided prediction `P`, when present.
    pub final_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            per_level: vec![0.3, 0.4, 0.6, 0.8, 1.0],
            final_p: 1.0,
        }
    }
}

impl LossWeights {
    /// Default weights for a pyramid of `levels` outputs: the finest
    /// `levels` entries of the five-level schedule.
    pub fn for_levels(levels: usize) -> Result<Self> {
        let full = Self::default();
        if levels == 0 || levels > full.per_level.len() {
            return Err(Error::invalid(
                "loss weights",
                format!("no default schedule for {levels} levels (1..=5)"),
            ));
        }
        Ok(LossWeights {
            per_level: full.per_level[full.per_level.len() - levels..].to_vec(),
            final_p: full.final_p,
        })
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.per_level.len() != levels {
            return Err(Error::invalid(
                "loss weights",
                format!("{} weights for {levels} outputs", self.per_level.len()),
            ));
        }
        let all = self.per_level.iter().chain(std::iter::once(&self.final_p));
        if let Some(w) = all.into_iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::invalid("loss weights", format!("weight {w} must be finite and ≥ 0")));
        }
        Ok(())
    }
}

/// Hierarchical predictions (coarsest first, the last is `P_1`) plus the
/// optional guided prediction `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<T> {
    pub hierarchical: Vec<T>,
    pub final_p: Option<T>,
}

impl<T> PredictionSet<T> {
    /// The map used at inference: `P` when present, else `P_1`.
    pub fn output(&self) -> Option<&T> {
        self.final_p.as_ref().or(self.hierarchical.last())
    }

    pub fn len(&self) -> usize {
        self.hierarchical.len() + self.final_p.is_some() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn check_dims(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, &[a.0, a.1], &[b.0, b.1]));
    }
    Ok(())
}

/// `−Σ [y·ln p + (1−y)·ln(1−p)]` with `p` clamped into `[1e-7, 1 − 1e-7]`.
pub fn bce(pred: &SaliencyMap, y: &BinaryMask) -> Result<f64> {
    check_dims("bce", pred.dims(), y.dims())?;
    Ok(pred
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &t)| bce_term(p, t as f64))
        .sum())
}

/// Cross entropy weighted per pixel by `m`.
pub fn contour_loss(pred: &SaliencyMap, y: &BinaryMask, m: &WeightMap) -> Result<f64> {
    check_dims("contour_loss", pred.dims(), y.dims())?;
    check_dims("contour_loss", pred.dims(), m.dims())?;
    if let Some(index) = m.data().iter().position(|v| !(*v >= 1.0)) {
        return Err(Error::CorruptWeightMap {
            index,
            value: m.data()[index],
        });
    }
    Ok(pred
        .data()
        .iter()
        .zip(y.data())
        .zip(m.data())
        .map(|((&p, &t), &w)| w * bce_term(p, t as f64))
        .sum())
}

/// `Σ wᵢ·termᵢ + final_p·final` — the weighting shared by every objective.
pub fn weighted_total(terms: &[f64], final_term: Option<f64>, w: &LossWeights) -> Result<f64> {
    if terms.is_empty() && final_term.is_none() {
        return Err(Error::invalid("combined_loss", "no predictions"));
    }
    w.validate(terms.len())?;
    let hierarchical: f64 = terms.iter().zip(&w.per_level).map(|(t, w)| t * w).sum();
    Ok(hierarchical + final_term.map_or(0.0, |t| w.final_p * t))
}

/// Weighted loss over every output of one sample. With `use_contour` each
/// output uses [`contour_loss`] against a single weight map built from `y`;
/// otherwise plain [`bce`].
pub fn combined_loss(
    preds: &PredictionSet<SaliencyMap>,
    y: &BinaryMask,
    w: &LossWeights,
    use_contour: bool,
    map_cfg: &WeightMapConfig,
) -> Result<f64> {
    let m = if use_contour {
        Some(contour_weight_map(y, map_cfg)?)
    } else {
        None
    };
    let loss = |p: &SaliencyMap| match &m {
        Some(m) => contour_loss(p, y, m),
        None => bce(p, y),
    };
    let terms = preds.hierarchical.iter().map(loss).collect::<Result<Vec<_>>>()?;
    let final_term = preds.final_p.as_ref().map(loss).transpose()?;
    weighted_total(&terms, final_term, w)
}

/// Recorded objective for a batch.
pub struct Objective {
    /// Batch-averaged weighted total; the backward root.
    pub total: Var,
    /// Batch-averaged unweighted loss of each output, in prediction order.
    pub terms: Vec<Var>,
    pub final_term: Option<Var>,
}

/// Builds a batch objective on `g`. `targets` and `weights` are N×1×H×W;
/// `weights` is the stacked contour map, or `None` for plain cross entropy.
pub fn objective<E: Element>(
    g: &mut Graph<E>,
    preds: &PredictionSet<Var>,
    targets: &Tensor<E>,
    weights: Option<&Tensor<E>>,
    w: &LossWeights,
) -> Result<Objective> {
    let (n, ..) = targets.dims4()?;
    w.validate(preds.hierarchical.len())?;
    let inv_n = E::from_f64(1.0 / n as f64);
    let term = |g: &mut Graph<E>, p: Var| -> Result<Var> {
        let l = g.bce(p, targets, weights)?;
        Ok(g.scale(l, inv_n))
    };
    let terms = preds
        .hierarchical
        .iter()
        .map(|&p| term(g, p))
        .collect::<Result<Vec<_>>>()?;
    let final_term = preds.final_p.map(|p| term(g, p)).transpose()?;
    let mut weighted: Vec<(Var, E)> = terms
        .iter()
        .zip(&w.per_level)
        .map(|(&t, &wt)| (t, E::from_f64(wt)))
        .collect();
    if let Some(t) = final_term {
        weighted.push((t, E::from_f64(w.final_p)));
    }
    let total = g.linear_combination(&weighted)?;
    Ok(Objective {
        total,
        terms,
        final_term,
    })
}

/// Stacks per-sample weight maps into an N×1×H×W tensor.
pub fn stack_weight_maps<E: Element>(maps: &[WeightMap]) -> Result<Tensor<E>> {
    stack_planes(maps.iter().map(|m| (m.dims(), m.data())))
}

/// Stacks masks into an N×1×H×W tensor of 0/1 values.
pub fn stack_masks<E: Element>(masks: &[BinaryMask]) -> Result<Tensor<E>> {
    let planes: Vec<Vec<f64>> = masks
        .iter()
        .map(|m| m.data().iter().map(|&v| v as f64).collect())
        .collect();
    stack_planes(masks.iter().zip(&planes).map(|(m, p)| (m.dims(), p.as_slice())))
}

fn stack_planes<'a, E: Element>(
    planes: impl Iterator<Item = ((usize, usize), &'a [f64])>,
) -> Result<Tensor<E>> {
    let mut dims = None;
    let mut data = Vec::new();
    let mut n = 0;
    for (d, values) in planes {
        if *dims.get_or_insert(d) != d {
            let first = dims.unwrap_or(d);
            return Err(Error::shape("stack", &[first.0, first.1], &[d.0, d.1]));
        }
        data.extend(values.iter().map(|&v| E::from_f64(v)));
        n += 1;
    }
    let (h, w) = dims.ok_or_else(|| Error::invalid("stack", "empty batch"))?;
    Tensor::new([n, 1, h, w], data)
}
