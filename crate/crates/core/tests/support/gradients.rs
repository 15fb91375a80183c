//! Finite-difference checks for every differentiable op and every loss.

use agc_core::losses::{
    attribute_loss, contrastive_pair_loss, coupling_loss, discriminator_loss, generator_adversarial_loss,
    perceptual_attribute_loss, perceptual_loss, reconstruction_loss, total_loss, LossTerms, LossWeights, PairLabel,
    Reduction,
};
use agc_core::nets::{AttributePredictor, FeatureConfig, FeatureNet, PredictorConfig};
use agc_core::tensor::{Graph, Result, Tensor, Var};
use agc_core::testing::{check_gradients, random_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Rng8 = ChaCha8Rng;

pub struct GradResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

/// Values bounded away from zero, for ops with a kink there.
fn off_kink(shape: &[usize], rng: &mut Rng8) -> Tensor<f64> {
    let t = random_tensor(shape, 1.0, rng);
    t.map(|v| v.signum() * (0.05 + v.abs()))
}

/// Reduces a non-scalar node to a scalar with fixed random weights.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng8::seed_from_u64(seed);
    let w = random_tensor(g.shape(x), 1.0, &mut rng);
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    g.sum(y)
}

fn dims(rng: &mut Rng8, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn labels(n: usize, rng: &mut Rng8) -> Vec<PairLabel> {
    (0..n)
        .map(|_| if rng.random_bool(0.5) { PairLabel::Genuine } else { PairLabel::Impostor })
        .collect()
}

fn binary(shape: &[usize], rng: &mut Rng8) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
}

/// One random instance of the named check; returns its worst relative error.
fn instance(name: &str, rng: &mut Rng8) -> f64 {
    let ps = rng.random::<u64>();
    let (n, c, h) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 2, 5));
    let shape = [n, c, h, h];
    macro_rules! unary {
        ($x:expr, $op:expr) => {{
            let x = $x;
            check_gradients(&[x], |g, v| {
                let y = $op(g, v[0])?;
                project(g, y, ps)
            })
        }};
    }
    macro_rules! binary_op {
        ($a:expr, $b:expr, $op:expr) => {{
            let (a, b) = ($a, $b);
            check_gradients(&[a, b], |g, v| {
                let y = $op(g, v[0], v[1])?;
                project(g, y, ps)
            })
        }};
    }
    match name {
        "add" => binary_op!(random_tensor(&shape, 1.0, rng), random_tensor(&shape, 1.0, rng), |g: &mut Graph<f64>, a, b| g.add(a, b)),
        "sub" => binary_op!(random_tensor(&shape, 1.0, rng), random_tensor(&shape, 1.0, rng), |g: &mut Graph<f64>, a, b| g.sub(a, b)),
        "mul" => binary_op!(random_tensor(&shape, 1.0, rng), random_tensor(&shape, 1.0, rng), |g: &mut Graph<f64>, a, b| g.mul(a, b)),
        "scale" => {
            let k = rng.random_range(-2.0..2.0);
            unary!(random_tensor(&shape, 1.0, rng), |g: &mut Graph<f64>, a| g.scale(a, k))
        }
        "add_scalar" => {
            let k = rng.random_range(-2.0..2.0);
            unary!(random_tensor(&shape, 1.0, rng), |g: &mut Graph<f64>, a| g.add_scalar(a, k))
        }
        "square" => unary!(random_tensor(&shape, 1.0, rng), |g: &mut Graph<f64>, a| g.square(a)),
        "abs" => unary!(off_kink(&shape, rng), |g: &mut Graph<f64>, a| g.abs(a)),
        "relu" => unary!(off_kink(&shape, rng), |g: &mut Graph<f64>, a| g.relu(a)),
        "leaky_relu" => unary!(off_kink(&shape, rng), |g: &mut Graph<f64>, a| g.leaky_relu(a, 0.2)),
        "sigmoid" => unary!(random_tensor(&shape, 2.0, rng), |g: &mut Graph<f64>, a| g.sigmoid(a)),
        "tanh" => unary!(random_tensor(&shape, 2.0, rng), |g: &mut Graph<f64>, a| g.tanh(a)),
        "softplus" => unary!(random_tensor(&shape, 3.0, rng), |g: &mut Graph<f64>, a| g.softplus(a)),
        "conv2d" => {
            let (cout, k) = (dims(rng, 1, 3), dims(rng, 1, 3));
            let stride = dims(rng, 1, 2);
            let pad = rng.random_range(0..k);
            let hh = h + k + 1;
            let x = random_tensor(&[n, c, hh, hh], 1.0, rng);
            let w = random_tensor(&[cout, c, k, k], 0.5, rng);
            binary_op!(x, w, |g: &mut Graph<f64>, a, b| g.conv2d(a, b, stride, pad))
        }
        "conv_transpose2d" => {
            let (cout, k) = (dims(rng, 1, 3), dims(rng, 2, 4));
            let stride = dims(rng, 1, 2);
            let pad = rng.random_range(0..k.min(2));
            let x = random_tensor(&shape, 1.0, rng);
            let w = random_tensor(&[c, cout, k, k], 0.5, rng);
            binary_op!(x, w, |g: &mut Graph<f64>, a, b| g.conv_transpose2d(a, b, stride, pad))
        }
        "add_channel_bias" => binary_op!(random_tensor(&shape, 1.0, rng), random_tensor(&[c], 1.0, rng), |g: &mut Graph<f64>, a, b| g
            .add_channel_bias(a, b)),
        "add_row" => binary_op!(random_tensor(&[n, h], 1.0, rng), random_tensor(&[h], 1.0, rng), |g: &mut Graph<f64>, a, b| g
            .add_row(a, b)),
        "mul_row" => binary_op!(random_tensor(&[n, h], 1.0, rng), random_tensor(&[h], 1.0, rng), |g: &mut Graph<f64>, a, b| g
            .mul_row(a, b)),
        "instance_norm" => unary!(random_tensor(&shape, 1.0, rng), |g: &mut Graph<f64>, a| g.instance_norm(a, 1e-5)),
        "concat_channels" => {
            let c2 = dims(rng, 1, 3);
            binary_op!(
                random_tensor(&shape, 1.0, rng),
                random_tensor(&[n, c2, h, h], 1.0, rng),
                |g: &mut Graph<f64>, a, b| g.concat_channels(a, b)
            )
        }
        "global_avg_pool" => unary!(random_tensor(&shape, 1.0, rng), |g: &mut Graph<f64>, a| g.global_avg_pool(a)),
        "matmul" => {
            let (m, k, p) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
            binary_op!(random_tensor(&[m, k], 1.0, rng), random_tensor(&[k, p], 1.0, rng), |g: &mut Graph<f64>, a, b| g
                .matmul(a, b))
        }
        "reshape" => unary!(random_tensor(&shape, 1.0, rng), |g: &mut Graph<f64>, a| g.reshape(a, &[n * c, h * h])),
        "sum" => unary!(random_tensor(&shape, 1.0, rng), |g: &mut Graph<f64>, a| g.sum(a)),
        "mean" => unary!(random_tensor(&shape, 1.0, rng), |g: &mut Graph<f64>, a| g.mean(a)),
        "sum_last" => unary!(random_tensor(&shape, 1.0, rng), |g: &mut Graph<f64>, a| g.sum_last(a)),
        "contrastive_pair_loss" => {
            let d = dims(rng, 1, 6);
            let label = labels(1, rng)[0];
            let m = rng.random_range(0.5..3.0);
            check_gradients(&[random_tensor(&[d], 0.5, rng), random_tensor(&[d], 0.5, rng)], |g, v| {
                contrastive_pair_loss(g, v[0], v[1], label, m).map_err(into_tensor_err)
            })
        }
        "coupling_loss" => {
            let (b, d) = (dims(rng, 1, 6), dims(rng, 1, 6));
            let ls = labels(b, rng);
            let m = rng.random_range(0.5..3.0);
            check_gradients(&[random_tensor(&[b, d], 0.5, rng), random_tensor(&[b, d], 0.5, rng)], |g, v| {
                coupling_loss(g, v[0], v[1], &ls, m).map_err(into_tensor_err)
            })
        }
        "attribute_loss" => {
            let y = binary(&[n, 10], rng);
            check_gradients(&[random_tensor(&[n, 10], 2.0, rng)], |g, v| {
                attribute_loss(g, v[0], &y).map_err(into_tensor_err)
            })
        }
        "discriminator_loss" => check_gradients(
            &[random_tensor(&[n, 1, h, h], 2.0, rng), random_tensor(&[n, 1, h, h], 2.0, rng)],
            |g, v| discriminator_loss(g, v[0], v[1]).map_err(into_tensor_err),
        ),
        "generator_adversarial_loss" => check_gradients(&[random_tensor(&[n, 1, h, h], 2.0, rng)], |g, v| {
            generator_adversarial_loss(g, v[0]).map_err(into_tensor_err)
        }),
        "reconstruction_loss" => {
            let red = if rng.random_bool(0.5) { Reduction::Mean } else { Reduction::Sum };
            check_gradients(&[random_tensor(&shape, 1.0, rng), random_tensor(&shape, 1.0, rng)], |g, v| {
                reconstruction_loss(g, v[0], v[1], red).map_err(into_tensor_err)
            })
        }
        "perceptual_loss" => {
            let cfg = FeatureConfig { in_channels: 1, base_width: 2, blocks: 2 };
            let v_net = FeatureNet::<f64>::new(cfg, rng).unwrap();
            // The target side is detached by design, so only the synthesis is checked.
            let target = random_tensor(&[n, 1, 8, 8], 1.0, rng);
            check_gradients(&[random_tensor(&[n, 1, 8, 8], 1.0, rng)], |g, v| {
                let t = g.constant(target.clone());
                perceptual_loss(g, v[0], t, &v_net).map_err(into_tensor_err)
            })
        }
        "perceptual_attribute_loss" => {
            let a = small_predictor(rng);
            let targets: Vec<_> = (0..2).map(|_| random_tensor(&[n, 1, 8, 8], 1.0, rng)).collect();
            let xs: Vec<_> = (0..2).map(|_| random_tensor(&[n, 1, 8, 8], 1.0, rng)).collect();
            check_gradients(&xs, |g, v| {
                let t0 = g.constant(targets[0].clone());
                let t1 = g.constant(targets[1].clone());
                perceptual_attribute_loss(g, v[0], t0, v[1], t1, &a).map_err(into_tensor_err)
            })
        }
        "total_loss" => {
            let w = LossWeights {
                lambda1: rng.random_range(0.0..2.0),
                lambda2: rng.random_range(0.0..2.0),
                lambda3: rng.random_range(0.0..2.0),
                lambda4: rng.random_range(0.0..2.0),
                lambda5: rng.random_range(0.0..2.0),
                margin: 1.0,
            };
            let xs: Vec<_> = (0..6).map(|_| random_tensor(&[1], 1.0, rng)).collect();
            check_gradients(&xs, |g, v| {
                let s: Vec<Var> = v.iter().map(|&x| g.sum(x)).collect::<Result<_>>()?;
                let terms = LossTerms {
                    coupling: Some(s[0]),
                    reconstruction: Some(s[1]),
                    adversarial: Some(s[2]),
                    attribute: Some(s[3]),
                    perceptual: Some(s[4]),
                    perceptual_attribute: Some(s[5]),
                };
                total_loss(g, &terms, &w).map_err(into_tensor_err)
            })
        }
        other => panic!("no gradient check named {other}"),
    }
}

pub fn small_predictor(rng: &mut Rng8) -> AttributePredictor<f64> {
    let cfg = PredictorConfig {
        in_channels: 1,
        base_width: 2,
        blocks: 2,
        attributes: 10,
        height: 8,
        width: 8,
    };
    let mut a = AttributePredictor::<f64>::new(cfg, rng).unwrap();
    // Larger head weights than the default init so the sigmoid is not flat.
    let store = a.params_mut().unwrap();
    let k = store.names().iter().position(|n| n == "head.weight").unwrap();
    let w = &mut store.tensors_mut()[k];
    *w = random_tensor(w.shape(), 0.5, rng);
    a.freeze();
    a
}

fn into_tensor_err(e: agc_core::Error) -> agc_core::tensor::TensorError {
    match e {
        agc_core::Error::Tensor(t) => t,
        other => panic!("loss failed: {other}"),
    }
}

pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "square",
    "abs",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "softplus",
    "conv2d",
    "conv_transpose2d",
    "add_channel_bias",
    "add_row",
    "mul_row",
    "instance_norm",
    "concat_channels",
    "global_avg_pool",
    "matmul",
    "reshape",
    "sum",
    "mean",
    "sum_last",
];

pub const LOSSES: &[&str] = &[
    "contrastive_pair_loss",
    "coupling_loss",
    "attribute_loss",
    "discriminator_loss",
    "generator_adversarial_loss",
    "reconstruction_loss",
    "perceptual_loss",
    "perceptual_attribute_loss",
    "total_loss",
];

pub fn gradient_suite(instances: usize, seed: u64) -> Vec<GradResult> {
    OPS.iter()
        .chain(LOSSES)
        .enumerate()
        .map(|(k, &name)| {
            let mut rng = Rng8::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let worst = (0..instances).map(|_| instance(name, &mut rng)).fold(0.0, f64::max);
            GradResult { name, instances, worst }
        })
        .collect()
}
