//! Difference-of-Gaussians band-pass filtering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sampled Gaussian of radius `ceil(3σ)`, normalized to unit sum.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur_1d(src: &[f64], dst: &mut [f64], len: usize, stride: usize, lines: usize, line_stride: usize, k: &[f64]) {
    let r = (k.len() / 2) as isize;
    for l in 0..lines {
        let base = l * line_stride;
        for i in 0..len {
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let idx = reflect(i as isize + j as isize - r, len);
                acc += kv * src[base + idx * stride];
            }
            dst[base + i * stride] = acc;
        }
    }
}

/// Separable Gaussian blur of one `h x w` plane with reflective borders.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let mut tmp = vec![0.0; plane.len()];
    let mut out = vec![0.0; plane.len()];
    blur_1d(plane, &mut tmp, w, 1, h, w, &k);
    blur_1d(&tmp, &mut out, h, w, w, 1, &k);
    out
}

fn check_sigmas(sigma1: f64, sigma2: f64) -> Result<()> {
    if !(sigma1 > 0.0 && sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "DoG sigmas must be positive, got {sigma1} and {sigma2}"
        )));
    }
    if sigma1 >= sigma2 {
        return Err(Error::InvalidArgument(format!(
            "DoG requires sigma1 < sigma2, got {sigma1} >= {sigma2}"
        )));
    }
    Ok(())
}

/// Per-channel `G(σ1) * img − G(σ2) * img` of a `(C, H, W)` image.
pub fn dog_filter(image: &Tensor<f32>, sigma1: f64, sigma2: f64) -> Result<Tensor<f32>> {
    check_sigmas(sigma1, sigma2)?;
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Mismatch(format!("dog_filter expects (C, H, W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = Vec::with_capacity(image.numel());
    for plane in image.data().chunks(h * w) {
        let p: Vec<f64> = plane.iter().map(|&v| v as f64).collect();
        let a = gaussian_blur(&p, h, w, sigma1);
        let b = gaussian_blur(&p, h, w, sigma2);
        out.extend(a.iter().zip(&b).map(|(x, y)| (x - y) as f32));
    }
    Ok(Tensor::new(s, out)?)
}

/// Scales each channel by its maximum absolute value, mapping it into `[-1, 1]`.
/// All-zero channels are left unchanged.
pub fn normalize_max_abs(image: &mut Tensor<f32>) {
    let s = image.shape().to_vec();
    let plane = s[s.len() - 2..].iter().product();
    for chunk in image.data_mut().chunks_mut(plane) {
        let m = chunk.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        if m > 0.0 {
            chunk.iter_mut().for_each(|v| *v /= m);
        }
    }
}

/// Preprocessing applied to both modalities before training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub dog: bool,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            dog: true,
            sigma1: 1.0,
            sigma2: 2.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dog {
            check_sigmas(self.sigma1, self.sigma2)?;
        }
        Ok(())
    }

    pub fn apply(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !self.dog {
            return Ok(image.clone());
        }
        let mut out = dog_filter(image, self.sigma1, self.sigma2)?;
        normalize_max_abs(&mut out);
        Ok(out)
    }
}
