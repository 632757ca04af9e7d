//! Global-contrast attention and the hierarchical attention chain.
//!
//! The attention map marks where a feature is unusually strong relative to
//! its own spatial statistics: each channel is standardized over the plane,
//! the channels are averaged, negatives are cut, and a floor `λ` keeps every
//! pixel partially open:
//!
//! ```text
//! A = relu(mean_c((F_c − μ_c) / √(σ²_c + ε))) + λ
//! ```
//!
//! One [`HgamLevel`] per pyramid level fuses four branches into a message:
//! max- and average-pooled summaries of the level's full-resolution feature,
//! a compressed encoder feature, and the upsampled message from the level
//! above. The chain runs coarse to fine.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ConvLayer};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            lambda: 0.1,
            epsilon: 1e-5,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::invalid(
                "attention",
                format!("need λ ≥ 0 and ε > 0, got {} and {}", self.lambda, self.epsilon),
            ));
        }
        Ok(())
    }
}

/// N×C×H×W feature → N×1×H×W attention map, every value ≥ λ.
pub fn global_contrast_attention<E: Element>(
    g: &mut Graph<E>,
    f: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let z = g.standardize_spatial(f, E::from_f64(cfg.epsilon))?;
    let m = g.mean_channels(z)?;
    let r = g.relu(m);
    Ok(g.add_scalar(r, E::from_f64(cfg.lambda)))
}

/// Multiplies every channel of `res` by the single-channel `attention`.
pub fn guide<E: Element>(g: &mut Graph<E>, res: Var, attention: Var) -> Result<Var> {
    g.broadcast_mul(attention, res)
}

/// Message and attention map produced at one level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HgamState {
    pub message: Var,
    pub attention: Var,
}

/// Branch convolutions of one attention level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HgamLevel {
    /// 3×3 over the max-pooled full-resolution feature.
    pub h1: ConvLayer,
    /// 3×3 over the average-pooled full-resolution feature.
    pub h2: ConvLayer,
    /// 1×1 channel compression of the encoder feature.
    pub h3: ConvLayer,
    /// 3×3 + ReLU over the incoming message (or the pooled encoder feature
    /// at the top level).
    pub h4: ConvLayer,
    /// 1×1 fusion of the four concatenated branches.
    pub fuse: ConvLayer,
    pub top: bool,
}

/// Runs one attention level. `e` is the encoder feature on the level grid,
/// `u` the level's full-resolution feature, `prev` the message from the level
/// above (absent only at the top).
pub fn hgam_step<E: Element>(
    g: &mut Graph<E>,
    b: &Bound,
    level: &HgamLevel,
    e: Var,
    u: Var,
    prev: Option<Var>,
    cfg: &AttentionConfig,
) -> Result<HgamState> {
    let (_, _, h, w) = g.value(e).dims4()?;
    let pooled_max = g.max_pool2d(u, h, w)?;
    let h1 = level.h1.apply(g, b, pooled_max)?;
    let pooled_avg = g.avg_pool2d(u, h, w)?;
    let h2 = level.h2.apply(g, b, pooled_avg)?;
    let h3 = level.h3.apply(g, b, e)?;
    let h4 = match (level.top, prev) {
        (true, None) => {
            if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid(
                    "hgam_step",
                    format!("top grid {h}×{w} cannot be halved"),
                ));
            }
            let half = g.max_pool2d(e, h / 2, w / 2)?;
            let c = level.h4.apply_relu(g, b, half)?;
            g.upsample_bilinear(c, h, w)?
        }
        (false, Some(prev)) => {
            let (_, _, ph, pw) = g.value(prev).dims4()?;
            if (2 * ph, 2 * pw) != (h, w) {
                return Err(Error::invalid(
                    "hgam_step",
                    format!("message grid {ph}×{pw} does not double to {h}×{w}"),
                ));
            }
            let up = g.upsample_bilinear(prev, h, w)?;
            level.h4.apply_relu(g, b, up)?
        }
        (true, Some(_)) => {
            return Err(Error::invalid("hgam_step", "top level takes no incoming message"))
        }
        (false, None) => return Err(Error::invalid("hgam_step", "missing incoming message")),
    };
    let cat = g.concat_channels(&[h1, h2, h3, h4])?;
    let message = level.fuse.apply(g, b, cat)?;
    let attention = global_contrast_attention(g, message, cfg)?;
    Ok(HgamState { message, attention })
}
