//! Plain-loop reimplementations of every loss, compared against the graph versions.

use agc_core::losses::{
    attribute_loss, contrastive_pair_loss, coupling_loss, discriminator_loss, generator_adversarial_loss,
    perceptual_attribute_loss, perceptual_loss, reconstruction_loss, total_loss, LossTerms, LossWeights, PairLabel,
    Reduction,
};
use agc_core::nets::{AttributePredictor, FeatureConfig, FeatureNet, ParamStore};
use agc_core::tensor::{Graph, Tensor};
use agc_core::testing::random_tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradients::small_predictor;

pub struct OracleResult {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
}

pub fn rel(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn neg_log_sigmoid(x: f64) -> f64 {
    -sigmoid(x).ln()
}

fn neg_log_one_minus_sigmoid(x: f64) -> f64 {
    -(1.0 - sigmoid(x)).ln()
}

pub fn contrastive(z1: &[f64], z2: &[f64], impostor: bool, m: f64) -> f64 {
    let d2: f64 = z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum();
    if impostor {
        0.5 * (m - d2).max(0.0)
    } else {
        0.5 * d2
    }
}

pub fn coupling(z1: &[f64], z2: &[f64], d: usize, impostor: &[bool], m: f64) -> f64 {
    let n = impostor.len();
    (0..n)
        .map(|i| contrastive(&z1[i * d..(i + 1) * d], &z2[i * d..(i + 1) * d], impostor[i], m))
        .sum::<f64>()
        / n as f64
}

pub fn attribute(logits: &[f64], labels: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for (&x, &y) in logits.iter().zip(labels) {
        let p = sigmoid(x);
        s -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    s / n as f64
}

pub fn discriminator(real: &[f64], fake: &[f64]) -> f64 {
    let r: f64 = real.iter().map(|&x| neg_log_sigmoid(x)).sum::<f64>() / real.len() as f64;
    let f: f64 = fake.iter().map(|&x| neg_log_one_minus_sigmoid(x)).sum::<f64>() / fake.len() as f64;
    r + f
}

pub fn generator_adversarial(fake: &[f64]) -> f64 {
    fake.iter().map(|&x| neg_log_sigmoid(x)).sum::<f64>() / fake.len() as f64
}

pub fn reconstruction(a: &[f64], b: &[f64], n: usize, mean: bool) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    if mean {
        s / a.len() as f64
    } else {
        s / n as f64
    }
}

/// Naive 4x4 / stride 2 / pad 1 convolution with bias, then ReLU.
fn conv_relu(x: &[f64], c: usize, h: usize, w: &Tensor<f64>, b: &Tensor<f64>) -> (Vec<f64>, usize, usize) {
    let s = w.shape();
    let (o, k) = (s[0], s[2]);
    let ho = (h + 2 - k) / 2 + 1;
    let mut out = vec![0.0; o * ho * ho];
    for oc in 0..o {
        for i in 0..ho {
            for j in 0..ho {
                let mut acc = b.data()[oc];
                for ic in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let (y, x0) = ((2 * i + ki) as isize - 1, (2 * j + kj) as isize - 1);
                            if y < 0 || x0 < 0 || y >= h as isize || x0 >= h as isize {
                                continue;
                            }
                            let xv = x[(ic * h + y as usize) * h + x0 as usize];
                            acc += xv * w.data()[((oc * c + ic) * k + ki) * k + kj];
                        }
                    }
                }
                out[(oc * ho + i) * ho + j] = acc.max(0.0);
            }
        }
    }
    (out, o, ho)
}

fn trunk(params: &ParamStore<f64>, blocks: usize, img: &[f64], h: usize) -> Vec<f64> {
    let (mut x, mut c, mut hh) = (img.to_vec(), 1, h);
    for i in 0..blocks {
        let w = params.get(&format!("trunk{i}.weight")).unwrap();
        let b = params.get(&format!("trunk{i}.bias")).unwrap();
        let (y, co, ho) = conv_relu(&x, c, hh, w, b);
        x = y;
        c = co;
        hh = ho;
    }
    x
}

pub fn perceptual(v: &FeatureNet<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let plane = s[1] * s[2] * s[3];
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..s[0] {
        let fa = trunk(v.params(), v.config().blocks, &a.data()[i * plane..(i + 1) * plane], s[2]);
        let fb = trunk(v.params(), v.config().blocks, &b.data()[i * plane..(i + 1) * plane], s[2]);
        total += fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum::<f64>();
        count += fa.len();
    }
    total / count as f64
}

pub fn predictor_probs(a: &AttributePredictor<f64>, img: &[f64], h: usize) -> Vec<f64> {
    let p = a.params();
    let feats = trunk(p, a.config().blocks, img, h);
    let w = p.get("head.weight").unwrap();
    let b = p.get("head.bias").unwrap();
    let t = a.config().attributes;
    (0..t)
        .map(|j| {
            let z = b.data()[j] + feats.iter().enumerate().map(|(i, f)| f * w.data()[i * t + j]).sum::<f64>();
            sigmoid(z)
        })
        .collect()
}

pub fn perceptual_attribute(a: &AttributePredictor<f64>, imgs: [&Tensor<f64>; 4]) -> f64 {
    let s = imgs[0].shape();
    let (n, plane) = (s[0], s[1] * s[2] * s[3]);
    let dist = |x: &Tensor<f64>, y: &Tensor<f64>| {
        (0..n)
            .map(|i| {
                let px = predictor_probs(a, &x.data()[i * plane..(i + 1) * plane], s[2]);
                let py = predictor_probs(a, &y.data()[i * plane..(i + 1) * plane], s[2]);
                px.iter().zip(&py).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()
            })
            .sum::<f64>()
            / n as f64
    };
    dist(imgs[0], imgs[1]) + dist(imgs[2], imgs[3])
}

fn eval(f: impl FnOnce(&mut Graph<f64>) -> agc_core::Result<agc_core::tensor::Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).expect("loss evaluation");
    g.value(v).item()
}

fn label(imp: bool) -> PairLabel {
    if imp {
        PairLabel::Impostor
    } else {
        PairLabel::Genuine
    }
}

fn case(name: &str, rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..=4);
    match name {
        "contrastive_pair_loss" => {
            let d = rng.random_range(1..=8);
            let (z1, z2) = (random_tensor(&[d], 0.6, rng), random_tensor(&[d], 0.6, rng));
            let imp = rng.random_bool(0.5);
            let m = rng.random_range(0.2..4.0);
            let got = eval(|g| {
                let (a, b) = (g.constant(z1.clone()), g.constant(z2.clone()));
                contrastive_pair_loss(g, a, b, label(imp), m)
            });
            rel(got, contrastive(z1.data(), z2.data(), imp, m))
        }
        "coupling_loss" => {
            let d = rng.random_range(1..=8);
            let (z1, z2) = (random_tensor(&[n, d], 0.6, rng), random_tensor(&[n, d], 0.6, rng));
            let imp: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let m = rng.random_range(0.2..4.0);
            let labels: Vec<_> = imp.iter().map(|&b| label(b)).collect();
            let got = eval(|g| {
                let (a, b) = (g.constant(z1.clone()), g.constant(z2.clone()));
                coupling_loss(g, a, b, &labels, m)
            });
            rel(got, coupling(z1.data(), z2.data(), d, &imp, m))
        }
        "attribute_loss" => {
            let logits = random_tensor(&[n, 10], 3.0, rng);
            let y = Tensor::from_fn(&[n, 10], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            let got = eval(|g| {
                let l = g.constant(logits.clone());
                attribute_loss(g, l, &y)
            });
            rel(got, attribute(logits.data(), y.data(), n))
        }
        "discriminator_loss" => {
            let h = rng.random_range(1..=6);
            let (r, f) = (random_tensor(&[n, 1, h, h], 4.0, rng), random_tensor(&[n, 1, h, h], 4.0, rng));
            let got = eval(|g| {
                let (a, b) = (g.constant(r.clone()), g.constant(f.clone()));
                discriminator_loss(g, a, b)
            });
            rel(got, discriminator(r.data(), f.data()))
        }
        "generator_adversarial_loss" => {
            let h = rng.random_range(1..=6);
            let f = random_tensor(&[n, 1, h, h], 4.0, rng);
            let got = eval(|g| {
                let a = g.constant(f.clone());
                generator_adversarial_loss(g, a)
            });
            rel(got, generator_adversarial(f.data()))
        }
        "reconstruction_loss" => {
            let (c, h) = (rng.random_range(1..=3), rng.random_range(1..=8));
            let (a, b) = (random_tensor(&[n, c, h, h], 1.0, rng), random_tensor(&[n, c, h, h], 1.0, rng));
            let mean = rng.random_bool(0.5);
            let red = if mean { Reduction::Mean } else { Reduction::Sum };
            let got = eval(|g| {
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                reconstruction_loss(g, x, y, red)
            });
            rel(got, reconstruction(a.data(), b.data(), n, mean))
        }
        "perceptual_loss" => {
            let cfg = FeatureConfig { in_channels: 1, base_width: rng.random_range(1..=3), blocks: rng.random_range(1..=2) };
            let v = FeatureNet::<f64>::new(cfg, rng).unwrap();
            let (a, b) = (random_tensor(&[n, 1, 8, 8], 1.0, rng), random_tensor(&[n, 1, 8, 8], 1.0, rng));
            let got = eval(|g| {
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                perceptual_loss(g, x, y, &v)
            });
            rel(got, perceptual(&v, &a, &b))
        }
        "perceptual_attribute_loss" => {
            let a = small_predictor(rng);
            let xs: Vec<_> = (0..4).map(|_| random_tensor(&[n, 1, 8, 8], 1.0, rng)).collect();
            let got = eval(|g| {
                let v: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
                perceptual_attribute_loss(g, v[0], v[1], v[2], v[3], &a)
            });
            rel(got, perceptual_attribute(&a, [&xs[0], &xs[1], &xs[2], &xs[3]]))
        }
        "total_loss" => {
            let c: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..5.0)).collect();
            let on: Vec<bool> = (0..6).map(|_| rng.random_bool(0.8)).collect();
            let on = if on.iter().any(|&b| b) { on } else { vec![true; 6] };
            let w = LossWeights {
                lambda1: rng.random_range(0.0..2.0),
                lambda2: rng.random_range(0.0..2.0),
                lambda3: rng.random_range(0.0..2.0),
                lambda4: rng.random_range(0.0..2.0),
                lambda5: rng.random_range(0.0..2.0),
                margin: 1.0,
            };
            let lambdas = [1.0, w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5];
            let expected: f64 = (0..6).filter(|&k| on[k]).map(|k| lambdas[k] * c[k]).sum();
            let got = eval(|g| {
                let v: Vec<_> = (0..6)
                    .map(|k| on[k].then(|| g.constant(Tensor::scalar(c[k]))))
                    .collect();
                let terms = LossTerms {
                    coupling: v[0],
                    reconstruction: v[1],
                    adversarial: v[2],
                    attribute: v[3],
                    perceptual: v[4],
                    perceptual_attribute: v[5],
                };
                total_loss(g, &terms, &w)
            });
            rel(got, expected)
        }
        other => panic!("no oracle named {other}"),
    }
}

pub fn loss_oracle_suite(cases: usize, seed: u64) -> Vec<OracleResult> {
    super::gradients::LOSSES
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 * k as u64));
            let worst = (0..cases).map(|_| case(name, &mut rng)).fold(0.0, f64::max);
            OracleResult { name, cases, worst }
        })
        .collect()
}

/// `(description, library value, hand value)`.
pub fn worked_values() -> Vec<(&'static str, f64, f64)> {
    let ln2 = std::f64::consts::LN_2;
    let genuine = eval(|g| {
        let a = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        contrastive_pair_loss(g, a, b, PairLabel::Genuine, 1.0)
    });
    let impostor = eval(|g| {
        let a = g.constant(Tensor::new(&[1], vec![0.5]).unwrap());
        let b = g.constant(Tensor::new(&[1], vec![0.0]).unwrap());
        contrastive_pair_loss(g, a, b, PairLabel::Impostor, 1.0)
    });
    let batch = eval(|g| {
        let a = g.constant(Tensor::new(&[2, 1], vec![1.0, 0.5]).unwrap());
        let b = g.constant(Tensor::new(&[2, 1], vec![0.0, 0.0]).unwrap());
        coupling_loss(g, a, b, &[PairLabel::Genuine, PairLabel::Impostor], 1.0)
    });
    let attr = eval(|g| {
        let l = g.constant(Tensor::zeros(&[1, 10]));
        attribute_loss(g, l, &Tensor::from_fn(&[1, 10], |i| (i % 2) as f64))
    });
    let disc = eval(|g| {
        let r = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let f = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        discriminator_loss(g, r, f)
    });
    let gen = eval(|g| {
        let f = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        generator_adversarial_loss(g, f)
    });
    vec![
        ("contrastive genuine d^2=1", genuine, 0.5),
        ("contrastive impostor d^2=0.25, m=1", impostor, 0.375),
        ("coupling {0.5, 0.375}", batch, 0.4375),
        ("attribute at p=0.5", attr, 10.0 * ln2),
        ("discriminator at logit 0", disc, 2.0 * ln2),
        ("generator adversarial at logit 0", gen, ln2),
    ]
}
