//! Central finite-difference verification of every differentiable op and
//! layer, in `f64`.
//!
//! Each check draws a random instance (shapes, inputs, parameters), reduces
//! the output with a fixed random projection `L = sum(r * y)`, and compares
//! the reverse-mode gradient of `L` against `(L(x + h) - L(x - h)) / 2h` at
//! sampled coordinates of every input and parameter tensor.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BinaryOp, Var};
use crate::error::{Error, Result};
use crate::nn::{
    AttentionBlock, AttnMode, Builder, Conv, ConvKind, ConvStage, Downsample, Forward, Init, Linear, ParamStore,
    Pointwise, ResBlock, TimeEmbed, Upsample,
};
use crate::tensor::Tensor;
use crate::unet::{ModelConfig, UNet, Variant};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
pub const MIN_INSTANCES: usize = 5;
/// Gradient magnitudes below this are compared absolutely (relative error
/// is meaningless near zero).
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

/// Every op the suite knows, in run order.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "mul_scalar",
    "add_channel",
    "sqrt",
    "exp",
    "silu",
    "matmul",
    "softmax",
    "reshape",
    "permute",
    "concat",
    "slice",
    "sum_axis",
    "mean_all",
    "group_norm",
    "upsample_nearest",
    "avg_pool",
    "dropout",
    "embedding",
    "conv1d",
    "conv2d",
    "conv3d",
    "dwt",
    "iwt",
    "linear",
    "pointwise",
    "conv",
    "spatial_stage",
    "spatfreq_stage",
    "full3d_stage",
    "spatial_attention",
    "frequency_attention",
    "all_attention",
    "resblock",
    "time_embed",
    "downsample",
    "upsample",
    "unet",
];

type ForwardFn = Box<dyn Fn(&mut Forward<'_, f64>, &[Var]) -> Result<Var>>;

/// One random instance: parameters, inputs and the computation under test.
pub struct Case {
    pub params: ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    pub forward: ForwardFn,
    /// Coordinates sampled per tensor.
    pub coords: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub op: String,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.instances >= MIN_INSTANCES && self.max_rel_err < TOLERANCE
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(MAGNITUDE_FLOOR)
}

const DROPOUT_SEED: u64 = 0x5eed;

fn run(case: &Case, params: &ParamStore<f64>, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
    let mut f = Forward::train(params, Some(&mut rng));
    let vars: Vec<Var> = inputs.iter().map(|t| f.graph.constant(t.clone())).collect();
    let y = (case.forward)(&mut f, &vars)?;
    let yv = f.graph.value(y);
    Ok(yv.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

/// Checks one instance; returns `(coordinates checked, max relative error)`.
pub fn check_case<R: Rng>(case: &Case, rng: &mut R) -> Result<(usize, f64)> {
    // Analytic pass.
    let mut drop_rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
    let mut f = Forward::train(&case.params, Some(&mut drop_rng));
    let vars: Vec<Var> = case.inputs.iter().map(|t| f.graph.leaf(t.clone(), true)).collect();
    let y = (case.forward)(&mut f, &vars)?;
    let proj = Tensor::<f64>::randn(f.graph.shape(y), rng);
    let r = f.graph.constant(proj.clone());
    let prod = f.graph.mul(y, r)?;
    let loss = f.graph.sum_all(prod);
    f.graph.backward(loss)?;
    let input_grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| f.graph.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let param_grads: Vec<Tensor<f64>> = f
        .param_grads()
        .into_iter()
        .zip(case.params.tensors())
        .map(|(g, t)| g.unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(f);

    let mut worst = 0.0f64;
    let mut checked = 0;
    let pick = |n: usize, rng: &mut R| -> Vec<usize> {
        if n <= case.coords {
            (0..n).collect()
        } else {
            sample(rng, n, case.coords).into_vec()
        }
    };
    for (i, grad) in input_grads.iter().enumerate() {
        for k in pick(grad.numel(), rng) {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[k] += STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[k] -= STEP;
            let fd = (run(case, &case.params, &plus, &proj)? - run(case, &case.params, &minus, &proj)?)
                / (2.0 * STEP);
            worst = worst.max(rel_err(fd, grad.data()[k]));
            checked += 1;
        }
    }
    for (i, grad) in param_grads.iter().enumerate() {
        for k in pick(grad.numel(), rng) {
            let mut plus = case.params.clone();
            plus.tensors_mut()[i].data_mut()[k] += STEP;
            let mut minus = case.params.clone();
            minus.tensors_mut()[i].data_mut()[k] -= STEP;
            let fd = (run(case, &plus, &case.inputs, &proj)? - run(case, &minus, &case.inputs, &proj)?)
                / (2.0 * STEP);
            worst = worst.max(rel_err(fd, grad.data()[k]));
            checked += 1;
        }
    }
    Ok((checked, worst))
}

/// Runs `instances` random instances of `op`.
pub fn check_op(op: &str, instances: usize, seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report {
        op: op.to_string(),
        instances: 0,
        checked: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..instances {
        let case = make_case(op, &mut rng)?;
        let (n, err) = check_case(&case, &mut rng)?;
        report.instances += 1;
        report.checked += n;
        report.max_rel_err = report.max_rel_err.max(err);
    }
    Ok(report)
}

/// Runs every op in [`OPS`].
pub fn check_all(instances: usize, seed: u64) -> Result<Vec<Report>> {
    OPS.iter()
        .enumerate()
        .map(|(i, op)| check_op(op, instances, seed.wrapping_add(i as u64)))
        .collect()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

fn primitive(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Forward<'_, f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        params: ParamStore::new(),
        inputs,
        forward: Box::new(f),
        coords: 16,
    }
}

/// Builds a layer into a fresh store, then randomizes every parameter so
/// that zero-initialized projections do not hide gradient paths.
fn layer<L: 'static>(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor<f64>>,
    build: impl FnOnce(&mut Builder<'_, f64, ChaCha8Rng>) -> Result<L>,
    f: impl Fn(&L, &mut Forward<'_, f64>, &[Var]) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut params = ParamStore::new();
    let built = build(&mut Builder::new(&mut params, rng))?;
    for t in params.tensors_mut() {
        *t = Tensor::rand_uniform(t.shape(), -0.5, 0.5, rng);
    }
    Ok(Case {
        params,
        inputs,
        forward: Box::new(move |fw, v| f(&built, fw, v)),
        coords: 6,
    })
}

fn binary(op: BinaryOp, rng: &mut ChaCha8Rng) -> Case {
    let rank = rng.random_range(1..=4);
    let shape = dims(rng, rank, 1, 4);
    let a = randn(&shape, rng);
    let b = if op == BinaryOp::Div {
        uniform(&shape, 0.5, 2.0, rng).map(|v| if v > 1.25 { -v } else { v })
    } else {
        randn(&shape, rng)
    };
    primitive(vec![a, b], move |f, v| f.graph.binary(op, v[0], v[1]))
}

pub fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let case = match op {
        "add" => binary(BinaryOp::Add, rng),
        "sub" => binary(BinaryOp::Sub, rng),
        "mul" => binary(BinaryOp::Mul, rng),
        "div" => binary(BinaryOp::Div, rng),
        "add_scalar" => {
            let s: f64 = rng.random_range(-2.0..2.0);
            let shape = dims(rng, 3, 1, 4);
            primitive(vec![randn(&shape, rng)], move |f, v| Ok(f.graph.add_scalar(v[0], s)))
        }
        "mul_scalar" => {
            let s: f64 = rng.random_range(-2.0..2.0);
            let shape = dims(rng, 3, 1, 4);
            primitive(vec![randn(&shape, rng)], move |f, v| Ok(f.graph.mul_scalar(v[0], s)))
        }
        "add_channel" => {
            let shape = dims(rng, 4, 1, 4);
            let per_batch = rng.random_bool(0.5);
            let b = if per_batch {
                randn(&shape[..2], rng)
            } else {
                randn(&shape[1..2], rng)
            };
            primitive(vec![randn(&shape, rng), b], |f, v| f.graph.add_channel(v[0], v[1]))
        }
        "sqrt" => {
            let shape = dims(rng, 2, 1, 5);
            primitive(vec![uniform(&shape, 0.5, 3.0, rng)], |f, v| Ok(f.graph.sqrt(v[0])))
        }
        "exp" => {
            let shape = dims(rng, 2, 1, 5);
            primitive(vec![randn(&shape, rng)], |f, v| Ok(f.graph.exp(v[0])))
        }
        "silu" => {
            let shape = dims(rng, 3, 1, 4);
            primitive(vec![randn(&shape, rng).map(|v| 3.0 * v)], |f, v| Ok(f.graph.silu(v[0])))
        }
        "matmul" => {
            let d = dims(rng, 4, 1, 5);
            let a = randn(&[d[0], d[1], d[2]], rng);
            let b = randn(&[d[0], d[2], d[3]], rng);
            primitive(vec![a, b], |f, v| f.graph.matmul(v[0], v[1]))
        }
        "softmax" => {
            let shape = dims(rng, 3, 1, 5);
            let axis = rng.random_range(0..3);
            primitive(vec![randn(&shape, rng).map(|v| 2.0 * v)], move |f, v| f.graph.softmax(v[0], axis))
        }
        "reshape" => {
            let shape = dims(rng, 3, 1, 4);
            let flat: usize = shape.iter().product();
            primitive(vec![randn(&shape, rng)], move |f, v| {
                let y = f.graph.reshape(v[0], &[flat])?;
                let sq = f.graph.mul(y, y)?;
                f.graph.reshape(sq, &[1, flat])
            })
        }
        "permute" => {
            let shape = dims(rng, 4, 1, 4);
            let mut perm: Vec<usize> = (0..4).collect();
            for i in (1..4).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            primitive(vec![randn(&shape, rng)], move |f, v| {
                let p = f.graph.permute(v[0], &perm)?;
                f.graph.mul(p, p)
            })
        }
        "concat" => {
            let axis = rng.random_range(0..3);
            let base = dims(rng, 3, 1, 4);
            let mut other = base.clone();
            other[axis] = rng.random_range(1..=4);
            primitive(vec![randn(&base, rng), randn(&other, rng)], move |f, v| {
                let c = f.graph.concat(&[v[0], v[1]], axis)?;
                f.graph.mul(c, c)
            })
        }
        "slice" => {
            let shape = dims(rng, 3, 2, 5);
            let axis = rng.random_range(0..3);
            let start = rng.random_range(0..shape[axis] - 1);
            let len = rng.random_range(1..=shape[axis] - start);
            primitive(vec![randn(&shape, rng)], move |f, v| {
                let s = f.graph.slice(v[0], axis, start, len)?;
                f.graph.mul(s, s)
            })
        }
        "sum_axis" => {
            let shape = dims(rng, 3, 1, 4);
            let axis = rng.random_range(0..3);
            let mean = rng.random_bool(0.5);
            primitive(vec![randn(&shape, rng)], move |f, v| {
                let sq = f.graph.mul(v[0], v[0])?;
                if mean {
                    f.graph.mean_axis(sq, axis)
                } else {
                    f.graph.sum_axis(sq, axis)
                }
            })
        }
        "mean_all" => {
            let shape = dims(rng, 3, 1, 4);
            primitive(vec![randn(&shape, rng)], |f, v| {
                let sq = f.graph.mul(v[0], v[0])?;
                Ok(f.graph.mean_all(sq))
            })
        }
        "group_norm" => {
            let groups = rng.random_range(1..=3);
            let ch = groups * rng.random_range(1..=3);
            let mut shape = vec![rng.random_range(1..=2), ch];
            let rank = rng.random_range(1..=3);
            shape.extend(dims(rng, rank, 1, 3));
            let spatial: usize = shape[2..].iter().product();
            if spatial * ch / groups < 2 {
                shape.push(2);
            }
            let x = randn(&shape, rng);
            let gamma = randn(&[ch], rng);
            let beta = randn(&[ch], rng);
            primitive(vec![x, gamma, beta], move |f, v| f.graph.group_norm(v[0], v[1], v[2], groups, 1e-5))
        }
        "upsample_nearest" => {
            let shape = dims(rng, 4, 1, 3);
            primitive(vec![randn(&shape, rng)], |f, v| f.graph.upsample_nearest2(v[0]))
        }
        "avg_pool" => {
            let mut shape = dims(rng, 4, 1, 3);
            shape[2] *= 2;
            shape[3] *= 2;
            primitive(vec![randn(&shape, rng)], |f, v| f.graph.avg_pool2(v[0]))
        }
        "dropout" => {
            let shape = dims(rng, 3, 2, 5);
            let p: f64 = rng.random_range(0.1..0.6);
            let seed: u64 = rng.random();
            primitive(vec![randn(&shape, rng)], move |f, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
                f.graph.dropout(v[0], p, &mut mask_rng)
            })
        }
        "embedding" => {
            let (rows, dim) = (rng.random_range(2..=6), rng.random_range(1..=4));
            let idx: Vec<usize> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..rows)).collect();
            primitive(vec![randn(&[rows, dim], rng)], move |f, v| {
                let e = f.graph.embedding(v[0], &idx)?;
                f.graph.mul(e, e)
            })
        }
        "conv1d" => {
            let (b, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
            let k = rng.random_range(1..=3);
            let pad = rng.random_range(0..=k / 2 + 1).min(k - 1);
            let stride = rng.random_range(1..=2);
            let len = rng.random_range(k..=k + 5);
            let inputs = vec![randn(&[b, ci, len], rng), randn(&[co, ci, k], rng), randn(&[co], rng)];
            primitive(inputs, move |f, v| f.graph.conv1d(v[0], v[1], Some(v[2]), stride, pad))
        }
        "conv2d" => {
            let (b, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
            let k = rng.random_range(1..=3);
            let pad = rng.random_range(0..k);
            let stride = rng.random_range(1..=2);
            let (h, w) = (rng.random_range(k..=k + 3), rng.random_range(k..=k + 3));
            let inputs = vec![randn(&[b, ci, h, w], rng), randn(&[co, ci, k, k], rng), randn(&[co], rng)];
            primitive(inputs, move |f, v| f.graph.conv2d(v[0], v[1], Some(v[2]), stride, pad))
        }
        "conv3d" => {
            let (b, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
            let k: [usize; 3] = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
            let pad = k.map(|k| rng.random_range(0..k).min(1));
            let stride = [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2)];
            let size = k.map(|k| rng.random_range(k..=k + 2));
            let bias = rng.random_bool(0.7);
            let inputs = vec![
                randn(&[b, ci, size[0], size[1], size[2]], rng),
                randn(&[co, ci, k[0], k[1], k[2]], rng),
                randn(&[co], rng),
            ];
            primitive(inputs, move |f, v| {
                f.graph
                    .conv3d(v[0], v[1], if bias { Some(v[2]) } else { None }, stride, pad)
            })
        }
        "dwt" => {
            let shape = [rng.random_range(1..=2), rng.random_range(1..=3), 2 * rng.random_range(1..=3), 2 * rng.random_range(1..=3)];
            primitive(vec![randn(&shape, rng)], |f, v| {
                let u = f.graph.dwt(v[0])?;
                f.graph.mul(u, u)
            })
        }
        "iwt" => {
            let shape = [rng.random_range(1..=2), rng.random_range(1..=3), 4, rng.random_range(1..=3), rng.random_range(1..=3)];
            primitive(vec![randn(&shape, rng)], |f, v| {
                let x = f.graph.iwt(v[0])?;
                f.graph.mul(x, x)
            })
        }
        "linear" => {
            let (b, di, d_o) = (rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=5));
            let x = randn(&[b, di], rng);
            layer(rng, vec![x], |bd| Linear::build(bd, di, d_o), |l, f, v| l.forward(f, v[0]))?
        }
        "pointwise" => {
            let (b, ci, co, len) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=5));
            let x = randn(&[b, ci, len], rng);
            layer(rng, vec![x], |bd| Pointwise::build(bd, ci, co, Init::FanIn), |l, f, v| l.forward(f, v[0]))?
        }
        "conv" => {
            let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let kernel = [[1, 3, 3], [3, 1, 1], [3, 3, 3], [1, 1, 1]][rng.random_range(0..4)];
            let stride = if rng.random_bool(0.5) { [1, 2, 2] } else { [1, 1, 1] };
            let x = randn(&[1, ci, 4, 4, 4], rng);
            layer(rng, vec![x], |bd| Conv::build(bd, ci, co, kernel, stride, Init::FanIn), |l, f, v| l.forward(f, v[0]))?
        }
        "spatial_stage" | "spatfreq_stage" | "full3d_stage" => {
            let kind = match op {
                "spatial_stage" => ConvKind::Spatial,
                "spatfreq_stage" => ConvKind::SpatFreq,
                _ => ConvKind::Full3d,
            };
            let (ci, co) = (2 * rng.random_range(1..=2), 2 * rng.random_range(1..=2));
            let x = randn(&[2, ci, 4, 3, 3], rng);
            let dropout = if rng.random_bool(0.5) { 0.2 } else { 0.0 };
            layer(
                rng,
                vec![x],
                |bd| ConvStage::build(bd, kind, ci, co, false),
                move |l, f, v| l.forward(f, v[0], dropout),
            )?
        }
        "spatial_attention" | "frequency_attention" | "all_attention" => {
            let mode = match op {
                "spatial_attention" => AttnMode::Spatial,
                "frequency_attention" => AttnMode::Frequency,
                _ => AttnMode::All,
            };
            let heads = rng.random_range(1..=2);
            let ch = 2 * heads * rng.random_range(1..=2);
            let x = randn(&[rng.random_range(1..=2), ch, 4, rng.random_range(1..=3), rng.random_range(1..=3)], rng);
            layer(
                rng,
                vec![x],
                |bd| AttentionBlock::build(bd, mode, ch, heads),
                |l, f, v| l.forward(f, v[0]),
            )?
        }
        "resblock" => {
            let kind = [ConvKind::Spatial, ConvKind::SpatFreq, ConvKind::Full3d][rng.random_range(0..3)];
            let (ci, co) = (2 * rng.random_range(1..=2), 2 * rng.random_range(1..=2));
            let emb_dim = rng.random_range(2..=5);
            let x = randn(&[2, ci, 4, 2, 3], rng);
            let emb = randn(&[2, emb_dim], rng);
            layer(
                rng,
                vec![x, emb],
                |bd| ResBlock::build(bd, kind, ci, co, emb_dim, 0.1),
                |l, f, v| l.forward(f, v[0], v[1]),
            )?
        }
        "time_embed" => {
            let dim = 2 * rng.random_range(1..=4);
            let out = rng.random_range(2..=6);
            let ts: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=1000)).collect();
            layer(rng, Vec::new(), |bd| TimeEmbed::build(bd, dim, out), move |l, f, _| l.forward(f, &ts))?
        }
        "downsample" | "upsample" => {
            let kind = [ConvKind::Spatial, ConvKind::Full3d][rng.random_range(0..2)];
            let ch = rng.random_range(1..=3);
            let x = randn(&[1, ch, 4, 2, 2], rng);
            if op == "downsample" {
                layer(rng, vec![x], |bd| Downsample::build(bd, kind, ch), |l, f, v| l.forward(f, v[0]))?
            } else {
                layer(rng, vec![x], |bd| Upsample::build(bd, kind, ch), |l, f, v| l.forward(f, v[0]))?
            }
        }
        "unet" => {
            let variant = Variant::ALL[rng.random_range(0..Variant::ALL.len())];
            let mut cfg = ModelConfig::toy(variant);
            cfg.image_size = 8;
            cfg.base_channels = 4;
            cfg.attention_resolutions = [cfg.layout().feature_size(8) / 2].into();
            let x = randn(&cfg.input_shape(2), rng);
            let ts = [rng.random_range(1..=1000), rng.random_range(1..=1000)];
            let mut case = layer(rng, vec![x], |bd| UNet::build(bd, &cfg), move |net, f, v| net.forward(f, v[0], &ts))?;
            case.coords = 1;
            case
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown gradcheck op {other}; known: {}",
                OPS.join(", ")
            )))
        }
    };
    Ok(case)
}
