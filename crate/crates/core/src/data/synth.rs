//! Procedural paired visible / polarimetric face-like images.
//!
//! Each identity owns a latent description (face outline, a handful of soft
//! blobs and ten attribute bits). An attribute that is present adds an
//! oriented Gabor patch at its own location, orientation and period, so every
//! bit is visible in the image. Samples of the same identity differ by a small
//! shift, a brightness change and pixel noise.
//!
//! The polarimetric triple is derived from the clean visible image: `S0` is a
//! smoothed nonlinear intensity transform and `S1`, `S2` are horizontal and
//! vertical gradient fields. A cross-modal mapping therefore exists, and it is
//! local enough for a small U-Net to learn.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dog::gaussian_blur;
use super::{Dataset, DatasetManifest, PairedSample, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const NUM_ATTRIBUTES: usize = 10;

pub const ATTRIBUTE_NAMES: [&str; NUM_ATTRIBUTES] = [
    "Arched_Eyebrows",
    "Big_Lips",
    "Big_Nose",
    "Bushy_Eyebrows",
    "Bald",
    "Mustache",
    "Narrow_Eyes",
    "Beard",
    "Mouth_Slightly_Open",
    "Young",
];

/// Attribute patch layout in normalized coordinates: `(x, y, orientation in
/// degrees, period)`. Periods are in units of 1/32 of the image side, i.e.
/// pixels at 64x64.
const PATCHES: [(f64, f64, f64, f64); NUM_ATTRIBUTES] = [
    (-0.35, -0.30, 0.0, 5.0),
    (-0.35, 0.40, 90.0, 7.0),
    (0.0, 0.05, 45.0, 5.0),
    (0.35, -0.30, 90.0, 5.0),
    (0.0, -0.65, 0.0, 7.0),
    (0.0, 0.35, 135.0, 5.0),
    (-0.38, 0.05, 135.0, 7.0),
    (0.0, 0.70, 45.0, 7.0),
    (0.35, 0.40, 0.0, 9.0),
    (0.38, 0.05, 90.0, 9.0),
];
const PATCH_SIGMA: f64 = 0.13;
const PATCH_AMP: f64 = 0.35;
const BLOBS: usize = 5;
const BACKGROUND: f64 = -0.6;
const GRADIENT_GAIN: f64 = 2.5;
const S0_BLUR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub samples_per_identity: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Gaussian blur sigma (pixels) applied to the polarimetric channels; 0 disables.
    pub degradation: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Maximum per-sample shift in pixels; also scales brightness variation.
    pub jitter: f64,
    /// Fraction of identities assigned to the test split.
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 20,
            samples_per_identity: 6,
            height: 64,
            width: 64,
            seed: 0,
            degradation: 0.0,
            noise: 0.03,
            jitter: 1.0,
            test_fraction: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 identities, got {}",
                self.identities
            )));
        }
        if self.identities > u32::MAX as usize {
            return Err(Error::InvalidArgument("too many identities".into()));
        }
        if self.samples_per_identity == 0 {
            return Err(Error::InvalidArgument("samples_per_identity must be positive".into()));
        }
        for (name, d) in [("height", self.height), ("width", self.width)] {
            if d < 32 || !d.is_power_of_two() || d > u16::MAX as usize {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a power of two between 32 and 32768, got {d}"
                )));
            }
        }
        for (name, v) in [("degradation", self.degradation), ("noise", self.noise), ("jitter", self.jitter)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub amp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityLatent {
    pub face_rx: f64,
    pub face_ry: f64,
    pub face_level: f64,
    pub blobs: Vec<Blob>,
    pub attributes: u16,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleVariation {
    /// Shift in normalized units.
    pub dx: f64,
    pub dy: f64,
    pub gain: f64,
    pub offset: f64,
}

pub fn identity_latent(config: &SynthConfig, identity: u32) -> IdentityLatent {
    let mut rng = stream_rng(config.seed, Stream::Data, identity as u64);
    let face_rx = rng.random_range(0.62..0.75);
    let face_ry = rng.random_range(0.80..0.92);
    let face_level = rng.random_range(-0.1..0.2);
    let blobs = (0..BLOBS)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            Blob {
                cx: rng.random_range(-0.5..0.5),
                cy: rng.random_range(-0.6..0.6),
                rx: rng.random_range(0.08..0.22),
                ry: rng.random_range(0.08..0.22),
                amp: sign * rng.random_range(0.25..0.5),
            }
        })
        .collect();
    let attributes = rng.random::<u16>() & ((1 << NUM_ATTRIBUTES) - 1);
    IdentityLatent {
        face_rx,
        face_ry,
        face_level,
        blobs,
        attributes,
    }
}

pub fn sample_variation(config: &SynthConfig, identity: u32, k: usize) -> SampleVariation {
    let index = (1u64 << 63) | ((identity as u64) << 24) | k as u64;
    let mut rng = stream_rng(config.seed, Stream::Data, index);
    let j = config.jitter;
    let mut u = || rng.random_range(-1.0..=1.0);
    SampleVariation {
        dx: u() * j * 2.0 / config.width as f64,
        dy: u() * j * 2.0 / config.height as f64,
        gain: 1.0 + 0.05 * j * u(),
        offset: 0.03 * j * u(),
    }
}

fn soft_step(x: f64, edge: f64) -> f64 {
    1.0 / (1.0 + (-x / edge).exp())
}

fn gabor(t: usize, x: f64, y: f64) -> f64 {
    let (px, py, deg, period) = PATCHES[t];
    let (dx, dy) = (x - px, y - py);
    let r2 = dx * dx + dy * dy;
    if r2 > 16.0 * PATCH_SIGMA * PATCH_SIGMA {
        return 0.0;
    }
    let th = deg.to_radians();
    let along = dx * th.cos() + dy * th.sin();
    let period = period / 32.0;
    PATCH_AMP * (-r2 / (2.0 * PATCH_SIGMA * PATCH_SIGMA)).exp() * (std::f64::consts::TAU * along / period).cos()
}

/// Noise-free visible image with the given attribute bits, clamped to
/// `[-1, 1]`, along with the soft face mask. Both are `h * w` row-major.
pub fn render_visible(
    latent: &IdentityLatent,
    var: &SampleVariation,
    attributes: u16,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut img = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = 2.0 * (i as f64 + 0.5) / h as f64 - 1.0 - var.dy;
        for j in 0..w {
            let x = 2.0 * (j as f64 + 0.5) / w as f64 - 1.0 - var.dx;
            let rho = ((x / latent.face_rx).powi(2) + (y / latent.face_ry).powi(2)).sqrt();
            let m = soft_step(1.0 - rho, 0.05);
            let mut v = latent.face_level;
            for b in &latent.blobs {
                let r = (((x - b.cx) / b.rx).powi(2) + ((y - b.cy) / b.ry).powi(2)).sqrt();
                v += b.amp * soft_step(1.0 - r, 0.08);
            }
            for t in 0..NUM_ATTRIBUTES {
                if attributes >> t & 1 == 1 {
                    v += gabor(t, x, y);
                }
            }
            let v = BACKGROUND + (v - BACKGROUND) * m;
            img.push((var.gain * v + var.offset).clamp(-1.0, 1.0));
            mask.push(m);
        }
    }
    (img, mask)
}

/// Clean polarimetric planes `S0`, `S1`, `S2` derived from a clean visible image.
pub fn render_polar(visible: &[f64], mask: &[f64], h: usize, w: usize, degradation: f64) -> [Vec<f64>; 3] {
    let s0_raw: Vec<f64> = visible
        .iter()
        .zip(mask)
        .map(|(&v, &m)| 0.5 * m + 0.7 * v * v - 0.45)
        .collect();
    let s0 = gaussian_blur(&s0_raw, h, w, S0_BLUR);
    let smooth = gaussian_blur(visible, h, w, 0.7);
    let at = |i: isize, j: isize| {
        let i = i.clamp(0, h as isize - 1) as usize;
        let j = j.clamp(0, w as isize - 1) as usize;
        smooth[i * w + j]
    };
    let mut s1 = vec![0.0; h * w];
    let mut s2 = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let k = i as usize * w + j as usize;
            s1[k] = GRADIENT_GAIN * 0.5 * (at(i, j + 1) - at(i, j - 1));
            s2[k] = GRADIENT_GAIN * 0.5 * (at(i + 1, j) - at(i - 1, j));
        }
    }
    let mut planes = [s0, s1, s2];
    if degradation > 0.0 {
        for p in planes.iter_mut() {
            *p = gaussian_blur(p, h, w, degradation);
        }
    }
    planes
}

fn render_sample(config: &SynthConfig, latent: &IdentityLatent, identity: u32, k: usize) -> Result<PairedSample> {
    let (h, w) = (config.height, config.width);
    let var = sample_variation(config, identity, k);
    let (vis, mask) = render_visible(latent, &var, latent.attributes, h, w);
    let polar = render_polar(&vis, &mask, h, w, config.degradation);
    let noise = Normal::new(0.0, config.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let index = (1u64 << 62) | ((identity as u64) << 24) | k as u64;
    let mut rng = stream_rng(config.seed, Stream::Data, index);
    let mut finish = |p: &[f64]| -> Vec<f32> {
        p.iter()
            .map(|&v| {
                let n = if config.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (v + n).clamp(-1.0, 1.0) as f32
            })
            .collect()
    };
    let visible = finish(&vis);
    let mut pol = Vec::with_capacity(3 * h * w);
    for p in &polar {
        pol.extend(finish(p));
    }
    Ok(PairedSample {
        identity,
        attributes: latent.attributes,
        visible: Tensor::new(&[1, h, w], visible)?,
        polar: Tensor::new(&[3, h, w], pol)?,
    })
}

/// Disjoint train/test identity split drawn from the split stream.
pub fn split_identities(identities: usize, test_fraction: f64, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut ids: Vec<u32> = (0..identities as u32).collect();
    let mut rng = stream_rng(seed, Stream::Split, 0);
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n_test = ((identities as f64 * test_fraction).round() as usize).clamp(1, identities - 1);
    let mut test = ids[..n_test].to_vec();
    let mut train = ids[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Renders the full dataset. Samples are stored identity-major, so sample
/// `k` of identity `i` sits at index `i * samples_per_identity + k`.
pub fn generate_synthetic_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let latents: Vec<IdentityLatent> = (0..config.identities as u32)
        .map(|i| identity_latent(config, i))
        .collect();
    let per = config.samples_per_identity;
    let samples = par::try_map(config.identities * per, |n| {
        let id = (n / per) as u32;
        render_sample(config, &latents[id as usize], id, n % per)
    })?;
    let (train, test) = split_identities(config.identities, config.test_fraction, config.seed);
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        samples: samples.len(),
        height: config.height,
        width: config.width,
        identities: config.identities,
        identity_counts: vec![per; config.identities],
        attributes: ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(),
        train_identities: train,
        test_identities: test,
        generator: Some(config.clone()),
    };
    let ds = Dataset { manifest, samples };
    ds.validate()?;
    Ok(ds)
}

/// Bayes decision for every attribute bit of every sample, using the
/// generator's own latents: each bit is flipped in turn and the rendering
/// closer to the observed visible image wins. Returns the mean accuracy.
///
/// Under isotropic Gaussian pixel noise and equal priors this is the
/// maximum-a-posteriori decision given the remaining latents.
pub fn oracle_attribute_accuracy(ds: &Dataset) -> Result<f64> {
    let config = ds
        .manifest
        .generator
        .as_ref()
        .ok_or_else(|| Error::Missing("generator parameters in manifest".into()))?;
    let (h, w) = (config.height, config.width);
    let per = config.samples_per_identity;
    let correct = par::map(ds.samples.len(), |n| {
        let s = &ds.samples[n];
        let latent = identity_latent(config, s.identity);
        let var = sample_variation(config, s.identity, n % per);
        let obs = s.visible.data();
        let dist = |bits: u16| {
            let (img, _) = render_visible(&latent, &var, bits, h, w);
            img.iter().zip(obs).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>()
        };
        (0..NUM_ATTRIBUTES)
            .filter(|&t| {
                let on = dist(latent.attributes | (1 << t));
                let off = dist(latent.attributes & !(1 << t));
                let predicted = on < off;
                predicted == (s.attributes >> t & 1 == 1)
            })
            .count()
    });
    let total: usize = correct.iter().sum();
    Ok(total as f64 / (ds.samples.len() * NUM_ATTRIBUTES) as f64)
}
