//! Finite-difference verification of reverse-mode gradients.
//!
//! Each check compares the analytic gradient of a scalar function with the
//! central difference `(f(x + h) − f(x − h)) / 2h` at `h = 1e-5`, in `f64`.
//! Non-scalar outputs are first projected onto a fixed random direction.
//!
//! A probe whose `±h` evaluations take a different branch than the base point
//! (a ReLU input changing sign, a pooling argmax switching, a cross-entropy
//! input crossing the clamp) sits on a non-differentiable seam; it is
//! skipped and, for sampled checks, redrawn.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{global_contrast_attention, AttentionConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{objective, stack_masks, stack_weight_maps, LossWeights};
use crate::maps::BinaryMask;
use crate::model::{ModelConfig, Network};
use crate::morphology::{contour_weight_map, WeightMapConfig};
use crate::ops::Padding;
use crate::params::stream;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Magnitude below which gradients are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub probes: usize,
    /// Coordinates skipped because a probe crossed a seam.
    pub skipped: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.max_rel_err < TOLERANCE
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Records `build` on fresh leaves and reduces it to a scalar.
fn scalar(
    inputs: &[Tensor<f64>],
    build: &Build<'_>,
    projection: &mut Option<Tensor<f64>>,
    rng_seed: u64,
) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let root = if g.value(out).numel() == 1 {
        out
    } else {
        let r = projection.get_or_insert_with(|| {
            let mut rng = stream(rng_seed, "projection");
            Tensor::from_fn(g.shape(out), |_| rng.gen_range(-1.0..1.0))
        });
        let r = g.input(r.clone());
        let prod = g.mul(out, r)?;
        g.sum(prod)
    };
    Ok((g, vars, root))
}

/// Compares every coordinate of every input.
pub fn check_function(name: &str, inputs: &[Tensor<f64>], build: &Build<'_>) -> Result<CheckRow> {
    let seed = crate::params::stream(0, name).gen();
    let mut projection = None;
    let (mut g, vars, root) = scalar(inputs, build, &mut projection, seed)?;
    let base_sig = g.branch_signature();
    g.backward(root)?;
    let mut row = CheckRow {
        name: name.to_string(),
        max_rel_err: 0.0,
        probes: 0,
        skipped: 0,
    };
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let mut eval = |delta: f64| -> Result<(f64, u64)> {
                let mut probe = inputs.to_vec();
                probe[i].data_mut()[j] += delta;
                let (g, _, root) = scalar(&probe, build, &mut projection, seed)?;
                Ok((g.value(root).data()[0], g.branch_signature()))
            };
            let (fp, sp) = eval(STEP)?;
            let (fm, sm) = eval(-STEP)?;
            if sp != base_sig || sm != base_sig {
                row.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * STEP);
            row.max_rel_err = row.max_rel_err.max(relative_error(analytic.data()[j], numeric));
            row.probes += 1;
        }
    }
    Ok(row)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Distinct values at least `gap` apart, shuffled; keeps pooling windows
/// free of near-ties.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).expect("shape")
}

/// Every differentiable primitive plus the attention and loss composites.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = stream(seed, "primitives");
    let r = &mut rng;
    let mut rows = Vec::new();

    let x = uniform(r, &[2, 3, 5, 5], -1.0, 1.0);
    let w = uniform(r, &[4, 3, 3, 3], -0.5, 0.5);
    let b = uniform(r, &[4], -0.5, 0.5);
    rows.push(check_function("conv2d (3x3, same)", &[x, w, b], &|g, v| {
        g.conv2d(v[0], v[1], v[2], 1, Padding::Same)
    })?);
    let x = uniform(r, &[1, 2, 6, 7], -1.0, 1.0);
    let w = uniform(r, &[3, 2, 3, 3], -0.5, 0.5);
    let b = uniform(r, &[3], -0.5, 0.5);
    rows.push(check_function("conv2d (3x3, stride 2, pad 1)", &[x, w, b], &|g, v| {
        g.conv2d(v[0], v[1], v[2], 2, Padding::Explicit(1))
    })?);
    let x = uniform(r, &[2, 3, 4, 4], -1.0, 1.0);
    let w = uniform(r, &[2, 3, 1, 1], -0.5, 0.5);
    let b = uniform(r, &[2], -0.5, 0.5);
    rows.push(check_function("conv2d (1x1)", &[x, w, b], &|g, v| {
        g.conv2d(v[0], v[1], v[2], 1, Padding::Same)
    })?);

    let x = uniform(r, &[2, 3, 4, 4], -1.0, 1.0);
    rows.push(check_function("relu", &[x], &|g, v| Ok(g.relu(v[0])))?);
    let x = uniform(r, &[2, 2, 3, 3], -4.0, 4.0);
    rows.push(check_function("sigmoid", &[x], &|g, v| Ok(g.sigmoid(v[0])))?);

    let x = separated(r, &[1, 2, 6, 6], 0.02);
    rows.push(check_function("maxpool2d (6x6 -> 2x3)", &[x], &|g, v| g.max_pool2d(v[0], 2, 3))?);
    let x = separated(r, &[2, 1, 5, 7], 0.02);
    rows.push(check_function("maxpool2d (5x7 -> 3x4)", &[x], &|g, v| g.max_pool2d(v[0], 3, 4))?);
    let x = uniform(r, &[1, 2, 6, 6], -1.0, 1.0);
    rows.push(check_function("avgpool2d (6x6 -> 3x2)", &[x], &|g, v| g.avg_pool2d(v[0], 3, 2))?);
    let x = uniform(r, &[2, 1, 5, 7], -1.0, 1.0);
    rows.push(check_function("avgpool2d (5x7 -> 2x3)", &[x], &|g, v| g.avg_pool2d(v[0], 2, 3))?);

    let x = uniform(r, &[1, 2, 2, 3], -1.0, 1.0);
    rows.push(check_function("upsample_bilinear (2x3 -> 4x6)", &[x], &|g, v| {
        g.upsample_bilinear(v[0], 4, 6)
    })?);
    let x = uniform(r, &[2, 1, 5, 5], -1.0, 1.0);
    rows.push(check_function("upsample_bilinear (5x5 -> 3x7)", &[x], &|g, v| {
        g.upsample_bilinear(v[0], 3, 7)
    })?);

    let parts = [
        uniform(r, &[2, 1, 3, 3], -1.0, 1.0),
        uniform(r, &[2, 2, 3, 3], -1.0, 1.0),
        uniform(r, &[2, 3, 3, 3], -1.0, 1.0),
    ];
    rows.push(check_function("concat_channels", &parts, &|g, v| g.concat_channels(v))?);

    let a = uniform(r, &[1, 2, 3, 3], -1.0, 1.0);
    let c = uniform(r, &[1, 2, 3, 3], -1.0, 1.0);
    rows.push(check_function("add", &[a.clone(), c.clone()], &|g, v| g.add(v[0], v[1]))?);
    rows.push(check_function("mul", &[a.clone(), c.clone()], &|g, v| g.mul(v[0], v[1]))?);
    rows.push(check_function("scale / add_scalar", &[a.clone()], &|g, v| {
        let s = g.scale(v[0], -1.7);
        Ok(g.add_scalar(s, 0.3))
    })?);
    rows.push(check_function("linear_combination", &[a.clone(), c], &|g, v| {
        g.linear_combination(&[(v[0], 0.4), (v[1], -2.5)])
    })?);
    rows.push(check_function("sum", &[a], &|g, v| Ok(g.sum(v[0])))?);

    let att = uniform(r, &[2, 1, 3, 4], 0.1, 2.0);
    let x = uniform(r, &[2, 3, 3, 4], -1.0, 1.0);
    rows.push(check_function("broadcast_mul", &[att, x], &|g, v| g.broadcast_mul(v[0], v[1]))?);
    let x = uniform(r, &[2, 3, 4, 4], -1.0, 1.0);
    rows.push(check_function("standardize_spatial", &[x], &|g, v| {
        g.standardize_spatial(v[0], 1e-5)
    })?);
    let x = uniform(r, &[2, 3, 3, 3], -1.0, 1.0);
    rows.push(check_function("mean_channels", &[x], &|g, v| g.mean_channels(v[0]))?);

    let p = uniform(r, &[2, 1, 4, 4], 0.05, 0.95);
    let y = Tensor::from_fn([2, 1, 4, 4], |_| r.gen_range(0..2) as f64);
    let m = uniform(r, &[2, 1, 4, 4], 1.0, 6.0);
    rows.push(check_function("bce", &[p.clone()], &|g, v| g.bce(v[0], &y, None))?);
    rows.push(check_function("bce (weighted)", &[p], &|g, v| g.bce(v[0], &y, Some(&m)))?);

    let f = uniform(r, &[2, 3, 4, 4], -1.0, 1.0);
    let cfg = AttentionConfig::default();
    rows.push(check_function("global_contrast_attention", &[f], &|g, v| {
        global_contrast_attention(g, v[0], &cfg)
    })?);

    let mask = BinaryMask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..5).contains(&x));
    let wm = contour_weight_map(&mask, &WeightMapConfig::default())?;
    let target = mask.to_tensor::<f64>();
    let weights = wm.plane().to_tensor::<f64>();
    let z = uniform(r, &[1, 1, 8, 8], -3.0, 3.0);
    rows.push(check_function("contour_loss (through sigmoid)", &[z], &|g, v| {
        let p = g.sigmoid(v[0]);
        g.bce(p, &target, Some(&weights))
    })?);
    Ok(rows)
}

/// Gradient of the full objective (contour loss, attention on) of the tiny
/// model on one 16×16 sample, at `probes` randomly drawn parameter entries.
pub fn model_check(seed: u64, probes: usize) -> Result<CheckRow> {
    let cfg = ModelConfig::tiny();
    let net = Network::<f64>::new(cfg.clone(), seed)?;
    let mut rng = stream(seed, "model-check");
    let s = cfg.input_size;
    let image = uniform(&mut rng, &[1, 3, s, s], 0.0, 1.0);
    let (cy, cx, r) = (rng.gen_range(5.0..11.0), rng.gen_range(5.0..11.0), rng.gen_range(3.0..5.0));
    let mask = BinaryMask::from_fn(s, s, |y, x| {
        (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2) <= r * r
    });
    let target = stack_masks::<f64>(std::slice::from_ref(&mask))?;
    let wmap = stack_weight_maps::<f64>(&[contour_weight_map(&mask, &WeightMapConfig::default())?])?;
    let weights = LossWeights::for_levels(cfg.levels)?;

    let run = |net: &Network<f64>, backward: bool| -> Result<(Graph<f64>, crate::params::Bound, Var)> {
        let mut g = Graph::new();
        let b = net.params().bind(&mut g);
        let img = g.input(image.clone());
        let acts = net.forward(&mut g, &b, img)?;
        let obj = objective(&mut g, &acts.predictions, &target, Some(&wmap), &weights)?;
        if backward {
            g.backward(obj.total)?;
        }
        Ok((g, b, obj.total))
    };
    let (g, bound, _) = run(&net, true)?;
    let base_sig = g.branch_signature();
    let mut analytic = net.clone();
    analytic.params_mut().accumulate_grads(&g, &bound)?;

    let mut row = CheckRow {
        name: format!("model ({}x{}, {} levels, {} probes)", s, s, cfg.levels, probes),
        max_rel_err: 0.0,
        probes: 0,
        skipped: 0,
    };
    let count = net.params().len();
    let mut attempts = 0;
    while row.probes < probes {
        attempts += 1;
        if attempts > 50 * probes {
            return Err(Error::invalid("model_check", "too many probes landed on seams"));
        }
        let pi = rng.gen_range(0..count);
        let param = analytic.params().iter().nth(pi).expect("index in range");
        let j = rng.gen_range(0..param.value.numel());
        let a = param.grad.as_ref().map_or(0.0, |t| t.data()[j]);
        let eval = |delta: f64| -> Result<(f64, u64)> {
            let mut probe = net.clone();
            let p = probe.params_mut().iter_mut().nth(pi).expect("index in range");
            p.value.data_mut()[j] += delta;
            let (g, _, total) = run(&probe, false)?;
            Ok((g.value(total).data()[0], g.branch_signature()))
        };
        let (fp, sp) = eval(STEP)?;
        let (fm, sm) = eval(-STEP)?;
        if sp != base_sig || sm != base_sig {
            row.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        row.max_rel_err = row.max_rel_err.max(relative_error(a, numeric));
        row.probes += 1;
    }
    Ok(row)
}
