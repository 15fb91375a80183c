use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_image, Conv, Init, ParamStore, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{conv2d_output_size, Float, Graph, Var};

/// Conditional patch discriminator.
///
/// The condition and candidate images are concatenated on the channel axis
/// and passed through `blocks` strided 4x4 convolutions (stride 2, pad 1,
/// leaky ReLU, instance norm after the first) and a final
/// `final_kernel`x`final_kernel` convolution to one logit channel. For a
/// `H x W` input the logit map is `(H / 2^blocks - final_kernel + 1)` on a
/// side, so 64x64 inputs with the defaults give a 6x6 map. Each logit sees
/// a square patch of [`DiscriminatorConfig::receptive_field`] pixels (38 for
/// the defaults).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub cond_channels: usize,
    pub candidate_channels: usize,
    pub base_width: usize,
    pub blocks: usize,
    pub final_kernel: usize,
    pub slope: f64,
    pub instance_norm: bool,
    pub init_std: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            cond_channels: 1,
            candidate_channels: 1,
            base_width: 32,
            blocks: 3,
            final_kernel: 3,
            slope: 0.2,
            instance_norm: true,
            init_std: 0.02,
        }
    }
}

impl DiscriminatorConfig {
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let mut s = input;
        for _ in 0..self.blocks {
            s = conv2d_output_size(s, 4, 2, 1)?;
        }
        conv2d_output_size(s, self.final_kernel, 1, 0)
    }

    pub fn receptive_field(&self) -> usize {
        (0..self.blocks).fold(self.final_kernel, |r, _| (r - 1) * 2 + 4)
    }

    fn widths(&self) -> Vec<usize> {
        (0..self.blocks).map(|i| self.base_width << i).collect()
    }

    pub fn param_count(&self) -> usize {
        let mut cin = self.cond_channels + self.candidate_channels;
        let mut n = 0;
        for (i, c) in self.widths().into_iter().enumerate() {
            let bias = !(i > 0 && self.instance_norm);
            n += 16 * cin * c + if bias { c } else { 0 };
            cin = c;
        }
        n + self.final_kernel * self.final_kernel * cin + 1
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorNet<T> {
    config: DiscriminatorConfig,
    params: ParamStore<T>,
    blocks: Vec<Conv>,
    head: Conv,
}

impl<T: Float> DiscriminatorNet<T> {
    pub fn new(config: DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.blocks == 0 || config.base_width == 0 || config.final_kernel == 0 {
            return Err(Error::InvalidArgument(
                "discriminator: blocks, width and final kernel must be positive".into(),
            ));
        }
        let init = Init::Normal(config.init_std);
        let mut params = ParamStore::new();
        let mut cin = config.cond_channels + config.candidate_channels;
        let mut blocks = Vec::new();
        for (i, c) in config.widths().into_iter().enumerate() {
            let bias = !(i > 0 && config.instance_norm);
            blocks.push(Conv::build(&mut params, &format!("block{i}"), cin, c, 4, 2, 1, false, bias, init, rng));
            cin = c;
        }
        let head = Conv::build(&mut params, "head", cin, 1, config.final_kernel, 1, 0, false, true, init, rng);
        Ok(Self {
            config,
            params,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Patch logits `(N, 1, h, w)` for `candidate` conditioned on `cond`.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], cond: Var, candidate: Var) -> Result<Var> {
        let c = &self.config;
        let (cs, ks) = (g.shape(cond).to_vec(), g.shape(candidate).to_vec());
        check_image("discriminator condition", &cs, c.cond_channels, 1)?;
        check_image("discriminator candidate", &ks, c.candidate_channels, 1)?;
        if cs[0] != ks[0] || cs[2..] != ks[2..] {
            return Err(Error::Mismatch(format!(
                "discriminator: condition {cs:?} and candidate {ks:?} differ"
            )));
        }
        if c.output_size(cs[2]).is_none() || c.output_size(cs[3]).is_none() {
            return Err(Error::Mismatch(format!(
                "discriminator: input {}x{} too small for {} blocks",
                cs[2], cs[3], c.blocks
            )));
        }
        let mut h = g.concat_channels(cond, candidate)?;
        for (i, conv) in self.blocks.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            if i > 0 && c.instance_norm {
                h = g.instance_norm(h, NORM_EPS)?;
            }
            h = g.leaky_relu(h, c.slope)?;
        }
        self.head.forward(g, p, h)
    }
}
