//! Network families: coupled U-net generators, conditional patch
//! discriminators, the frozen perceptual feature network and the attribute
//! predictor.

mod discriminator;
mod feature;
mod generator;

pub use discriminator::{DiscriminatorConfig, DiscriminatorNet};
pub use feature::{AttributePredictor, FeatureConfig, FeatureNet, PredictorConfig};
pub use generator::{GeneratorConfig, GeneratorNet, GeneratorOutput, Mode};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Instance-norm epsilon used by every normalized block.
pub const NORM_EPS: f64 = 1e-5;

/// Named parameter tensors of one network, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Inserts every parameter into `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Replaces all tensors with same-named, same-shaped ones from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Mismatch(format!(
                "parameter names differ ({} vs {} entries)",
                self.names.len(),
                other.names.len()
            )));
        }
        for (i, (mine, theirs)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if mine.shape() != theirs.shape() {
                return Err(Error::Mismatch(format!(
                    "parameter {} has shape {:?}, found {:?}",
                    self.names[i],
                    mine.shape(),
                    theirs.shape()
                )));
            }
        }
        self.tensors = other.tensors.clone();
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// How freshly built weights are drawn.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Zero-mean normal with a fixed standard deviation.
    Normal(f64),
    /// Zero-mean normal with `sqrt(2 / fan_in)` standard deviation.
    He,
}

pub(crate) fn init_tensor<T: Float>(shape: &[usize], fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor<T> {
    let std = match init {
        Init::Normal(s) => s,
        Init::He => (2.0 / fan_in.max(1) as f64).sqrt(),
    };
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    Tensor::from_fn(shape, |_| T::from_f(dist.sample(rng)))
}

/// A convolution (or transposed convolution) with optional bias.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
    transposed: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn build<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        transposed: bool,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = if transposed {
            [cin, cout, kernel, kernel]
        } else {
            [cout, cin, kernel, kernel]
        };
        let weight = store.push(
            format!("{name}.weight"),
            init_tensor(&shape, cin * kernel * kernel, init, rng),
        );
        let bias = bias.then(|| store.push(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad,
            transposed,
        }
    }

    pub(crate) fn forward<T: Float>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = if self.transposed {
            g.conv_transpose2d(x, p[self.weight], self.stride, self.pad)?
        } else {
            g.conv2d(x, p[self.weight], self.stride, self.pad)?
        };
        Ok(match self.bias {
            Some(b) => g.add_channel_bias(y, p[b])?,
            None => y,
        })
    }

    pub(crate) fn weight_index(&self) -> usize {
        self.weight
    }

    pub(crate) fn bias_index(&self) -> Option<usize> {
        self.bias
    }
}

/// `(N, in) -> (N, out)` affine map.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    pub(crate) fn build<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.push(
            format!("{name}.weight"),
            init_tensor(&[fan_in, fan_out], fan_in, init, rng),
        );
        let bias = store.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub(crate) fn forward<T: Float>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        Ok(g.add_row(y, p[self.bias])?)
    }

    pub(crate) fn indices(&self) -> (usize, usize) {
        (self.weight, self.bias)
    }
}

pub(crate) fn check_image(op: &str, shape: &[usize], channels: usize, multiple: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::Mismatch(format!(
            "{op}: expected (N, {channels}, H, W) input, got {shape:?}"
        )));
    }
    if shape[2] == 0 || shape[3] == 0 || !shape[2].is_multiple_of(multiple) || !shape[3].is_multiple_of(multiple) {
        return Err(Error::Mismatch(format!(
            "{op}: spatial dims {}x{} must be nonzero multiples of {multiple}",
            shape[2], shape[3]
        )));
    }
    Ok(())
}
