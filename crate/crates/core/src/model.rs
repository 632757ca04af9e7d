//! The pyramid network: encoder, residual decoder, per-level heads, and the
//! optional attention chain with its guided output head.
//!
//! Level `i` (1 = finest) works on an `S/2^(i−1)` grid for input size `S`.
//! Per-level vectors in [`Activations`] are indexed by `i − 1`; the
//! hierarchical predictions follow the loss-weight order, coarsest first.

use crate::attention::{guide, hgam_step, AttentionConfig, HgamLevel};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::PredictionSet;
use crate::maps::{Plane, SaliencyMap};
use crate::params::{Bound, ConvLayer, Group, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub levels: usize,
    pub input_size: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    /// Width of the full-resolution `U_i` features.
    pub head_channels: usize,
    pub hgam_enabled: bool,
    pub msg_channels: usize,
    pub attention: AttentionConfig,
}

impl ModelConfig {
    /// Four levels on 64×64 input.
    pub fn toy() -> Self {
        ModelConfig {
            levels: 4,
            input_size: 64,
            encoder_channels: vec![16, 32, 64, 128],
            decoder_channels: vec![16, 32, 32, 32],
            head_channels: 16,
            hgam_enabled: true,
            msg_channels: 32,
            attention: AttentionConfig::default(),
        }
    }

    /// The toy pyramid at half width, sized for single-core training runs.
    pub fn desk() -> Self {
        ModelConfig {
            encoder_channels: vec![8, 16, 32, 64],
            decoder_channels: vec![8, 16, 16, 16],
            head_channels: 8,
            msg_channels: 8,
            ..Self::toy()
        }
    }

    /// Five levels on 224×224 input.
    pub fn full() -> Self {
        ModelConfig {
            levels: 5,
            input_size: 224,
            encoder_channels: vec![64, 128, 256, 512, 512],
            decoder_channels: vec![64, 64, 64, 64, 64],
            head_channels: 64,
            hgam_enabled: true,
            msg_channels: 32,
            attention: AttentionConfig::default(),
        }
    }

    /// Three levels on 16×16 input; small enough for finite differences.
    pub fn tiny() -> Self {
        ModelConfig {
            levels: 3,
            input_size: 16,
            encoder_channels: vec![3, 4, 5],
            decoder_channels: vec![3, 4, 4],
            head_channels: 3,
            hgam_enabled: true,
            msg_channels: 3,
            attention: AttentionConfig::default(),
        }
    }

    pub fn with_hgam(mut self, on: bool) -> Self {
        self.hgam_enabled = on;
        self
    }

    /// Grid side of level `i` (1-based).
    pub fn grid(&self, i: usize) -> usize {
        self.input_size >> (i - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model config", msg));
        if self.levels < 2 {
            return bad(format!("need at least 2 levels, got {}", self.levels));
        }
        if self.encoder_channels.len() != self.levels || self.decoder_channels.len() != self.levels {
            return bad(format!(
                "{} levels need {} encoder and decoder widths",
                self.levels, self.levels
            ));
        }
        let widths = self.encoder_channels.iter().chain(&self.decoder_channels);
        if widths.chain([&self.head_channels]).any(|&c| c == 0)
            || (self.hgam_enabled && self.msg_channels == 0)
        {
            return bad("channel widths must be positive".into());
        }
        let step = 1usize << (self.levels - 1);
        if self.input_size == 0 || self.input_size % step != 0 {
            return bad(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size,
                self.levels - 1
            ));
        }
        if self.hgam_enabled && self.grid(self.levels) % 2 != 0 {
            return bad(format!(
                "attention needs an even top grid, got {}",
                self.grid(self.levels)
            ));
        }
        self.attention.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    /// 1×1 projection when input and output widths differ.
    pub skip: Option<ConvLayer>,
}

impl ResBlock {
    /// `relu(conv2(relu(conv1(x))) + skip(x))`.
    pub fn apply<E: Element>(&self, g: &mut Graph<E>, b: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.apply_relu(g, b, x)?;
        let h = self.conv2.apply(g, b, h)?;
        let s = match self.skip {
            Some(proj) => proj.apply(g, b, x)?,
            None => x,
        };
        let sum = g.add(h, s)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug)]
struct Attention {
    levels: Vec<HgamLevel>,
    final_u: ConvLayer,
    final_p: ConvLayer,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<(ConvLayer, ConvLayer)>,
    decoder: Vec<ResBlock>,
    u_heads: Vec<ConvLayer>,
    p_heads: Vec<ConvLayer>,
    attention: Option<Attention>,
}

/// Recorded intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    pub encoded: Vec<Var>,
    pub residual: Vec<Var>,
    pub upsampled: Vec<Var>,
    /// Empty when attention is disabled.
    pub guided: Vec<Var>,
    pub attention: Vec<Var>,
    pub messages: Vec<Var>,
    pub predictions: PredictionSet<Var>,
}

#[derive(Clone, Debug)]
pub struct Network<E: Element = f32> {
    config: ModelConfig,
    params: ParamStore<E>,
    layout: Layout,
}

fn build<E: Element>(cfg: &ModelConfig, seed: u64, store: &mut ParamStore<E>) -> Result<Layout> {
    let l = cfg.levels;
    let enc = &cfg.encoder_channels;
    let dec = &cfg.decoder_channels;
    let mut encoder = Vec::with_capacity(l);
    for i in 0..l {
        let c_in = if i == 0 { 3 } else { enc[i - 1] };
        let g = Group::Encoder;
        let c1 = store.conv(seed, &format!("enc.{}.conv1", i + 1), g, c_in, enc[i], 3)?;
        let c2 = store.conv(seed, &format!("enc.{}.conv2", i + 1), g, enc[i], enc[i], 3)?;
        encoder.push((c1, c2));
    }
    let mut decoder = Vec::with_capacity(l);
    for i in 0..l {
        let c_in = if i + 1 == l { enc[i] } else { dec[i + 1] + enc[i] };
        let name = format!("dec.{}", i + 1);
        let g = Group::Rest;
        let conv1 = store.conv(seed, &format!("{name}.conv1"), g, c_in, dec[i], 3)?;
        let conv2 = store.conv(seed, &format!("{name}.conv2"), g, dec[i], dec[i], 3)?;
        let skip = (c_in != dec[i])
            .then(|| store.conv(seed, &format!("{name}.skip"), g, c_in, dec[i], 1))
            .transpose()?;
        decoder.push(ResBlock { conv1, conv2, skip });
    }
    let hc = cfg.head_channels;
    let mut u_heads = Vec::with_capacity(l);
    let mut p_heads = Vec::with_capacity(l);
    for i in 0..l {
        u_heads.push(store.conv(seed, &format!("head.u.{}", i + 1), Group::Rest, dec[i], hc, 1)?);
        p_heads.push(store.conv(seed, &format!("head.p.{}", i + 1), Group::Rest, hc, 1, 1)?);
    }
    let attention = if cfg.hgam_enabled {
        let m = cfg.msg_channels;
        let mut levels = Vec::with_capacity(l);
        for i in 0..l {
            let top = i + 1 == l;
            let name = format!("hgam.{}", i + 1);
            let conv = |store: &mut ParamStore<E>, part: &str, c_in, c_out, k| {
                store.conv(seed, &format!("{name}.{part}"), Group::Rest, c_in, c_out, k)
            };
            levels.push(HgamLevel {
                h1: conv(store, "h1", hc, m, 3)?,
                h2: conv(store, "h2", hc, m, 3)?,
                h3: conv(store, "h3", enc[i], m, 1)?,
                h4: conv(store, "h4", if top { enc[i] } else { m }, m, 3)?,
                fuse: conv(store, "fuse", 4 * m, m, 1)?,
                top,
            });
        }
        Some(Attention {
            levels,
            final_u: store.conv(seed, "final.u", Group::Rest, dec[0], hc, 1)?,
            final_p: store.conv(seed, "final.p", Group::Rest, hc, 1, 1)?,
        })
    } else {
        None
    };
    Ok(Layout {
        encoder,
        decoder,
        u_heads,
        p_heads,
        attention,
    })
}

/// `relu(conv1x1(up(x)))` computed as `relu(up(conv1x1(x)))`: a pointwise
/// convolution commutes with bilinear resampling (the taps sum to 1), so the
/// convolution runs on the coarse grid.
fn upsampled_head<E: Element>(
    g: &mut Graph<E>,
    b: &Bound,
    conv: &ConvLayer,
    x: Var,
    size: usize,
) -> Result<Var> {
    let c = conv.apply(g, b, x)?;
    let up = g.upsample_bilinear(c, size, size)?;
    Ok(g.relu(up))
}

impl<E: Element> Network<E> {
    /// Fresh network with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build(&config, seed, &mut params)?;
        Ok(Network {
            config,
            params,
            layout,
        })
    }

    /// Network with the given parameter values; names and shapes must match
    /// what `config` builds.
    pub fn from_params(config: ModelConfig, values: ParamStore<E>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if values.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                net.params.len(),
                values.len()
            )));
        }
        for p in net.params.iter_mut() {
            let src = values
                .by_name(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    /// Same network in another element type.
    pub fn cast<F: Element>(&self) -> Network<F> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_input(&self, g: &Graph<E>, img: Var) -> Result<()> {
        let (_, c, h, w) = g.value(img).dims4()?;
        let s = self.config.input_size;
        if (c, h, w) != (3, s, s) {
            return Err(Error::invalid(
                "encode",
                format!("expected N×3×{s}×{s} input, got {:?}", g.shape(img)),
            ));
        }
        Ok(())
    }

    /// `E_1..E_L`: two conv+ReLU layers per level, max pooling between.
    pub fn encode(&self, g: &mut Graph<E>, b: &Bound, img: Var) -> Result<Vec<Var>> {
        self.check_input(g, img)?;
        let mut out = Vec::with_capacity(self.config.levels);
        let mut x = img;
        for (i, (c1, c2)) in self.layout.encoder.iter().enumerate() {
            if i > 0 {
                let side = self.config.grid(i + 1);
                x = g.max_pool2d(x, side, side)?;
            }
            x = c1.apply_relu(g, b, x)?;
            x = c2.apply_relu(g, b, x)?;
            out.push(x);
        }
        Ok(out)
    }

    /// `Res_L = δ(E_L)`, `Res_i = δ(up×2(Res_{i+1}) ⊕ E_i)`.
    pub fn decode(&self, g: &mut Graph<E>, b: &Bound, encoded: &[Var]) -> Result<Vec<Var>> {
        let l = self.config.levels;
        if encoded.len() != l {
            return Err(Error::invalid("decode", format!("{} features for {l} levels", encoded.len())));
        }
        let mut res = vec![encoded[0]; l];
        for i in (0..l).rev() {
            let input = if i + 1 == l {
                encoded[i]
            } else {
                let side = self.config.grid(i + 1);
                let up = g.upsample_bilinear(res[i + 1], side, side)?;
                g.concat_channels(&[up, encoded[i]])?
            };
            res[i] = self.layout.decoder[i].apply(g, b, input)?;
        }
        Ok(res)
    }

    /// `U_i = relu(conv(up(Res_i)))` at full resolution and
    /// `P_i = sigmoid(conv(U_i))`, both indexed by level.
    pub fn heads(&self, g: &mut Graph<E>, b: &Bound, residual: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        let s = self.config.input_size;
        let mut us = Vec::with_capacity(residual.len());
        let mut ps = Vec::with_capacity(residual.len());
        for (i, &r) in residual.iter().enumerate() {
            let u = upsampled_head(g, b, &self.layout.u_heads[i], r, s)?;
            let logit = self.layout.p_heads[i].apply(g, b, u)?;
            us.push(u);
            ps.push(g.sigmoid(logit));
        }
        Ok((us, ps))
    }

    pub fn forward(&self, g: &mut Graph<E>, b: &Bound, img: Var) -> Result<Activations> {
        let encoded = self.encode(g, b, img)?;
        let residual = self.decode(g, b, &encoded)?;
        let (upsampled, ps) = self.heads(g, b, &residual)?;
        let mut acts = Activations {
            predictions: PredictionSet {
                hierarchical: ps.into_iter().rev().collect(),
                final_p: None,
            },
            encoded,
            residual,
            upsampled,
            guided: Vec::new(),
            attention: Vec::new(),
            messages: Vec::new(),
        };
        let Some(att) = &self.layout.attention else {
            return Ok(acts);
        };
        let l = self.config.levels;
        let mut guided = vec![img; l];
        let mut attention = vec![img; l];
        let mut messages = vec![img; l];
        let mut prev = None;
        for i in (0..l).rev() {
            let state = hgam_step(
                g,
                b,
                &att.levels[i],
                acts.encoded[i],
                acts.upsampled[i],
                prev,
                &self.config.attention,
            )?;
            guided[i] = guide(g, acts.residual[i], state.attention)?;
            attention[i] = state.attention;
            messages[i] = state.message;
            prev = Some(state.message);
        }
        let u = upsampled_head(g, b, &att.final_u, guided[0], self.config.input_size)?;
        let logit = att.final_p.apply(g, b, u)?;
        acts.predictions.final_p = Some(g.sigmoid(logit));
        acts.guided = guided;
        acts.attention = attention;
        acts.messages = messages;
        Ok(acts)
    }

    /// Inference on an N×3×S×S batch: one map per sample (`P` when attention
    /// is on, else `P_1`).
    pub fn predict(&self, images: &Tensor<E>) -> Result<Vec<SaliencyMap>> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let img = g.input(images.clone());
        let acts = self.forward(&mut g, &b, img)?;
        let out = *acts.predictions.output().expect("at least one head");
        let n = images.shape()[0];
        (0..n)
            .map(|s| SaliencyMap::new(Plane::from_tensor(g.value(out), s, 0)?))
            .collect()
    }

    /// Attention maps `A_1..A_L` of every sample; `result[s][i−1]` is level
    /// `i` of sample `s`.
    pub fn attention_maps(&self, images: &Tensor<E>) -> Result<Vec<Vec<Plane>>> {
        if self.layout.attention.is_none() {
            return Err(Error::invalid("attention_maps", "attention is disabled in this model"));
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let img = g.input(images.clone());
        let acts = self.forward(&mut g, &b, img)?;
        let n = images.shape()[0];
        (0..n)
            .map(|s| {
                acts.attention
                    .iter()
                    .map(|&a| Plane::from_tensor(g.value(a), s, 0))
                    .collect()
            })
            .collect()
    }
}
