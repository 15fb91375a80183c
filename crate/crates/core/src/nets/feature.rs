use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_image, Conv, Init, Linear, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Strided 4x4 conv + ReLU stack shared by the feature network and the trunk
/// of the attribute predictor. Widths are `base_width * 2^i`.
fn build_trunk<T: Float>(
    params: &mut ParamStore<T>,
    in_channels: usize,
    base_width: usize,
    blocks: usize,
    rng: &mut impl Rng,
) -> Vec<Conv> {
    let mut cin = in_channels;
    (0..blocks)
        .map(|i| {
            let c = base_width << i;
            let conv = Conv::build(params, &format!("trunk{i}"), cin, c, 4, 2, 1, false, true, Init::He, rng);
            cin = c;
            conv
        })
        .collect()
}

fn trunk_forward<T: Float>(trunk: &[Conv], g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
    let mut h = x;
    for conv in trunk {
        h = conv.forward(g, p, h)?;
        h = g.relu(h)?;
    }
    Ok(h)
}

fn trunk_param_count(in_channels: usize, base_width: usize, blocks: usize) -> usize {
    let mut cin = in_channels;
    (0..blocks)
        .map(|i| {
            let c = base_width << i;
            let n = 16 * cin * c + c;
            cin = c;
            n
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub blocks: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 16,
            blocks: 3,
        }
    }
}

impl FeatureConfig {
    pub fn param_count(&self) -> usize {
        trunk_param_count(self.in_channels, self.base_width, self.blocks)
    }

    /// `(C_p, H_p, W_p)` of the feature map for an `h x w` input.
    pub fn feature_dims(&self, h: usize, w: usize) -> (usize, usize, usize) {
        (self.base_width << (self.blocks - 1), h >> self.blocks, w >> self.blocks)
    }
}

/// Frozen perceptual feature network. Weights are fixed at construction and
/// only ever enter a graph as constants.
#[derive(Debug, Clone)]
pub struct FeatureNet<T> {
    config: FeatureConfig,
    params: ParamStore<T>,
    trunk: Vec<Conv>,
}

impl<T: Float> FeatureNet<T> {
    pub fn new(config: FeatureConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.blocks == 0 || config.base_width == 0 || config.in_channels == 0 {
            return Err(Error::InvalidArgument("feature net: empty configuration".into()));
        }
        let mut params = ParamStore::new();
        let trunk = build_trunk(&mut params, config.in_channels, config.base_width, config.blocks, rng);
        Ok(Self { config, params, trunk })
    }

    /// Builds the feature net from the first `config.blocks` trunk layers of a
    /// trained attribute predictor.
    pub fn from_predictor(config: FeatureConfig, predictor: &AttributePredictor<T>) -> Result<Self> {
        let pc = predictor.config();
        if pc.in_channels != config.in_channels || pc.base_width != config.base_width || pc.blocks < config.blocks {
            return Err(Error::Mismatch(format!(
                "feature net {config:?} cannot be taken from predictor trunk {pc:?}"
            )));
        }
        let mut params = ParamStore::new();
        let mut trunk = Vec::with_capacity(config.blocks);
        for conv in predictor.trunk.iter().take(config.blocks) {
            let (w, b) = (conv.weight_index(), conv.bias_index().expect("trunk convs have bias"));
            let names = predictor.params.names();
            let tensors = predictor.params.tensors();
            let mut c = conv.clone();
            c.reindex(params.len(), Some(params.len() + 1));
            params.push(names[w].clone(), tensors[w].clone());
            params.push(names[b].clone(), tensors[b].clone());
            trunk.push(c);
        }
        Ok(Self { config, params, trunk })
    }

    /// Rebuilds a feature net around stored parameters (checkpoint restore).
    pub fn with_params(config: FeatureConfig, stored: &ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::new(config, rng)?;
        net.params.load_from(stored)?;
        Ok(net)
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Feature map `(N, C_p, H_p, W_p)`; parameters enter `g` as constants.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        check_image("feature net", g.shape(x), self.config.in_channels, 1 << self.config.blocks)?;
        let p = self.params.bind(g, false);
        trunk_forward(&self.trunk, g, &p, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub blocks: usize,
    pub attributes: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 16,
            blocks: 4,
            attributes: 10,
            height: 64,
            width: 64,
        }
    }
}

impl PredictorConfig {
    fn flat_features(&self) -> usize {
        (self.base_width << (self.blocks - 1)) * (self.height >> self.blocks) * (self.width >> self.blocks)
    }

    pub fn param_count(&self) -> usize {
        trunk_param_count(self.in_channels, self.base_width, self.blocks)
            + self.flat_features() * self.attributes
            + self.attributes
    }
}

/// Attribute predictor: strided conv trunk, flatten, one logit per attribute.
/// Flattening (rather than pooling) keeps where in the image a feature fired.
#[derive(Debug, Clone)]
pub struct AttributePredictor<T> {
    config: PredictorConfig,
    params: ParamStore<T>,
    trunk: Vec<Conv>,
    head: Linear,
    frozen: bool,
}

impl<T: Float> AttributePredictor<T> {
    pub fn new(config: PredictorConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.blocks == 0 || config.base_width == 0 || config.attributes == 0 {
            return Err(Error::InvalidArgument("attribute predictor: empty configuration".into()));
        }
        let m = 1 << config.blocks;
        if !config.height.is_multiple_of(m) || !config.width.is_multiple_of(m) || config.height == 0 || config.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "attribute predictor: {}x{} input is not a multiple of {m}",
                config.height, config.width
            )));
        }
        let mut params = ParamStore::new();
        let trunk = build_trunk(&mut params, config.in_channels, config.base_width, config.blocks, rng);
        let head = Linear::build(&mut params, "head", config.flat_features(), config.attributes, Init::Normal(0.01), rng);
        Ok(Self {
            config,
            params,
            trunk,
            head,
            frozen: false,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mutable parameters; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore<T>> {
        if self.frozen {
            return Err(Error::InvalidArgument("attribute predictor is frozen".into()));
        }
        Ok(&mut self.params)
    }

    /// Sets the final layer to zero, making every output exactly 0.5.
    pub fn zero_head(&mut self) -> Result<()> {
        let (w, b) = self.head.indices();
        let params = self.params_mut()?;
        for i in [w, b] {
            let shape = params.tensors()[i].shape().to_vec();
            params.tensors_mut()[i] = Tensor::zeros(&shape);
        }
        Ok(())
    }

    /// Attribute logits `(N, T)`. Pass `trainable = false` bindings (or use
    /// [`AttributePredictor::probabilities`]) to keep the weights out of the gradient.
    pub fn logits(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let c = &self.config;
        let s = g.shape(x).to_vec();
        check_image("attribute predictor", &s, c.in_channels, 1)?;
        if s[2] != c.height || s[3] != c.width {
            return Err(Error::Mismatch(format!(
                "attribute predictor expects {}x{} images, got {}x{}",
                c.height, c.width, s[2], s[3]
            )));
        }
        let h = trunk_forward(&self.trunk, g, p, x)?;
        let flat = g.reshape(h, &[s[0], c.flat_features()])?;
        self.head.forward(g, p, flat)
    }

    /// Attribute probabilities `(N, T)` with the weights as constants.
    pub fn probabilities(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let p = self.params.bind(g, false);
        let logits = self.logits(g, &p, x)?;
        Ok(g.sigmoid(logits)?)
    }

    /// Probabilities for a batch of images, outside of any caller graph.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let p = self.probabilities(&mut g, x)?;
        Ok(g.value(p).clone())
    }

    /// Unfrozen copy accepting `in_channels` input channels. The existing
    /// first-layer kernel moves to `source_channel`; other channels start at
    /// zero, so the copy initially computes the same function of that channel.
    pub fn adapt_input(&self, in_channels: usize, source_channel: usize) -> Result<Self> {
        if self.config.in_channels != 1 || source_channel >= in_channels {
            return Err(Error::InvalidArgument(format!(
                "cannot adapt a {}-channel predictor to channel {source_channel} of {in_channels}",
                self.config.in_channels
            )));
        }
        let w_idx = self.trunk[0].weight_index();
        let old = &self.params.tensors()[w_idx];
        let s = old.shape().to_vec();
        let plane = s[2] * s[3];
        let mut w = Tensor::zeros(&[s[0], in_channels, s[2], s[3]]);
        for o in 0..s[0] {
            let dst = (o * in_channels + source_channel) * plane;
            w.data_mut()[dst..dst + plane].copy_from_slice(&old.data()[o * plane..(o + 1) * plane]);
        }
        let mut copy = self.clone();
        copy.config.in_channels = in_channels;
        copy.params.tensors_mut()[w_idx] = w;
        copy.frozen = false;
        Ok(copy)
    }

    /// Rebuilds a predictor around stored parameters (checkpoint restore).
    pub fn with_params(config: PredictorConfig, stored: &ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::new(config, rng)?;
        net.params.load_from(stored)?;
        Ok(net)
    }
}

impl Conv {
    pub(crate) fn reindex(&mut self, weight: usize, bias: Option<usize>) {
        self.weight = weight;
        self.bias = bias;
    }
}
