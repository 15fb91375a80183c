//! U-net generator with a bottleneck embedding and per-attribute heads.
//!
//! Layout for `depth = D`, base width `w`, encoder widths `e_i = w * 2^i`:
//!
//! | block        | op                                  | out channels | spatial    |
//! |--------------|-------------------------------------|--------------|------------|
//! | enc 0        | conv 4/2/1, ReLU (no norm)          | e_0          | H/2        |
//! | enc i (1..D-1)| conv 4/2/1, IN, ReLU               | e_i          | H/2^(i+1)  |
//! | enc D-1      | conv 4/2/1, ReLU (no norm)          | e_{D-1}      | H/2^D      |
//! | dec 0        | convT 4/2/1 of enc D-1, IN, ReLU    | e_{D-2}      | H/2^(D-1)  |
//! | dec j        | concat skip, convT, IN, ReLU        | e_{D-2-j}    | H/2^(D-1-j)|
//! | dec D-1      | concat enc 0, convT, tanh (no norm) | 1            | H          |
//!
//! The first `dropout_blocks` decoder blocks apply dropout, which is the
//! generator's noise source. The embedding is a linear map of the globally
//! average-pooled deepest encoder map, which is left unnormalized so that
//! pooling keeps each channel's mean response; each attribute head `t` is a dedicated
//! hidden layer `relu(z W_t + b_t)` followed by a scalar logit.
//!
//! With base width 32 and depth 4 the encoder produces 32/64/128/256 channels
//! and the decoder inputs are 256, 256, 128, 64 channels (skip concatenation
//! doubles every input after the first).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_image, Conv, Init, Linear, ParamStore, NORM_EPS};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Float, Graph, Tensor, Var};

const KERNEL: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub attributes: usize,
    pub head_width: usize,
    pub dropout: f64,
    pub dropout_blocks: usize,
    pub instance_norm: bool,
    /// Keep dropout active in eval mode, with masks drawn from the eval seed.
    pub eval_dropout: bool,
    pub init_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 1,
            base_width: 32,
            depth: 4,
            embed_dim: 128,
            attributes: 10,
            head_width: 16,
            dropout: 0.5,
            dropout_blocks: 2,
            instance_norm: true,
            eval_dropout: false,
            init_std: 0.02,
        }
    }
}

impl GeneratorConfig {
    pub fn encoder_widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_width << i).collect()
    }

    /// `(in, out)` channels of each decoder block, deepest first.
    pub fn decoder_channels(&self) -> Vec<(usize, usize)> {
        let e = self.encoder_widths();
        let d = self.depth;
        (0..d)
            .map(|j| {
                let cin = if j == 0 { e[d - 1] } else { 2 * e[d - 1 - j] };
                let cout = if j == d - 1 { self.out_channels } else { e[d - 2 - j] };
                (cin, cout)
            })
            .collect()
    }

    /// Instance norm follows every encoder block except the first and the innermost.
    fn encoder_normalized(&self, i: usize) -> bool {
        i > 0 && i + 1 < self.depth
    }

    fn conv_has_bias(&self, normalized: bool) -> bool {
        !(normalized && self.instance_norm)
    }

    /// Closed-form parameter count (4x4 kernels; a bias only where no norm follows).
    pub fn param_count(&self) -> usize {
        let k2 = KERNEL * KERNEL;
        let e = self.encoder_widths();
        let mut n = 0;
        let mut cin = self.in_channels;
        for (i, &c) in e.iter().enumerate() {
            n += k2 * cin * c + if self.conv_has_bias(self.encoder_normalized(i)) { c } else { 0 };
            cin = c;
        }
        for (j, (ci, co)) in self.decoder_channels().into_iter().enumerate() {
            n += k2 * ci * co + if self.conv_has_bias(j + 1 < self.depth) { co } else { 0 };
        }
        let (d, t, h) = (self.embed_dim, self.attributes, self.head_width);
        n + e[self.depth - 1] * d + d + t * h * (d + 2) + t
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("generator: {m}")));
        if self.depth == 0 || self.base_width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("depth, width and channel counts must be positive");
        }
        if self.embed_dim == 0 || self.head_width == 0 {
            return bad("embedding and head widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout rate must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Forward-pass mode. Train mode always draws dropout masks from the seed;
/// eval mode does so only when `eval_dropout` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval { seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorOutput {
    /// `(N, out_channels, H, W)` synthesized image in `[-1, 1]`.
    pub image: Var,
    /// `(N, embed_dim)` bottleneck embedding.
    pub embedding: Var,
    /// `(N, attributes)` attribute logits.
    pub attr_logits: Var,
}

#[derive(Debug, Clone)]
pub struct GeneratorNet<T> {
    config: GeneratorConfig,
    params: ParamStore<T>,
    encoder: Vec<Conv>,
    decoder: Vec<Conv>,
    embed: Linear,
    heads_hidden: Linear,
    heads_out: usize,
    heads_bias: usize,
}

impl<T: Float> GeneratorNet<T> {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let init = Init::Normal(config.init_std);
        let mut params = ParamStore::new();
        let e = config.encoder_widths();
        let mut cin = config.in_channels;
        let mut encoder = Vec::with_capacity(config.depth);
        for (i, &c) in e.iter().enumerate() {
            let bias = config.conv_has_bias(config.encoder_normalized(i));
            encoder.push(Conv::build(&mut params, &format!("enc{i}"), cin, c, KERNEL, 2, 1, false, bias, init, rng));
            cin = c;
        }
        let mut decoder = Vec::with_capacity(config.depth);
        for (j, (ci, co)) in config.decoder_channels().into_iter().enumerate() {
            let bias = config.conv_has_bias(j + 1 < config.depth);
            decoder.push(Conv::build(&mut params, &format!("dec{j}"), ci, co, KERNEL, 2, 1, true, bias, init, rng));
        }
        let (d, t, h) = (config.embed_dim, config.attributes, config.head_width);
        // Dense layers use He init; at std 0.02 the stacked embedding and
        // head weights start with vanishing gradients.
        let embed = Linear::build(&mut params, "embed", e[config.depth - 1], d, Init::He, rng);
        let heads_hidden = Linear::build(&mut params, "heads.hidden", d, t * h, Init::He, rng);
        let heads_out = params.push(
            "heads.out.weight",
            super::init_tensor(&[t * h], h, Init::He, rng),
        );
        let heads_bias = params.push("heads.out.bias", Tensor::zeros(&[t]));
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            embed,
            heads_hidden,
            heads_out,
            heads_bias,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Indices of the output-layer parameters (final transposed conv).
    pub fn output_layer(&self) -> (usize, Option<usize>) {
        let last = self.decoder.last().expect("depth >= 1");
        (last.weight_index(), last.bias_index())
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
        let keep = 1.0 - self.config.dropout;
        let scale = T::from_f(1.0 / keep);
        let mask = Tensor::from_fn(g.shape(x), |_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        let m = g.constant(mask);
        Ok(g.mul(x, m)?)
    }

    /// Runs the U-net on a `(N, in_channels, H, W)` condition image.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], cond: Var, mode: Mode) -> Result<GeneratorOutput> {
        let c = &self.config;
        check_image("generator", g.shape(cond), c.in_channels, 1 << c.depth)?;
        let mut noise = match mode {
            Mode::Train { seed } => Some(stream_rng(seed, Stream::Dropout, 0)),
            Mode::Eval { seed } if c.eval_dropout => Some(stream_rng(seed, Stream::Dropout, 1)),
            Mode::Eval { .. } => None,
        };
        let mut skips = Vec::with_capacity(c.depth);
        let mut h = cond;
        for (i, conv) in self.encoder.iter().enumerate() {
            h = conv.forward(g, p, h)?;
            if c.encoder_normalized(i) && c.instance_norm {
                h = g.instance_norm(h, NORM_EPS)?;
            }
            h = g.relu(h)?;
            skips.push(h);
        }
        let pooled = g.global_avg_pool(h)?;
        let embedding = self.embed.forward(g, p, pooled)?;

        let mut d = h;
        for (j, conv) in self.decoder.iter().enumerate() {
            if j > 0 {
                d = g.concat_channels(d, skips[c.depth - 1 - j])?;
            }
            d = conv.forward(g, p, d)?;
            if j + 1 == c.depth {
                d = g.tanh(d)?;
                break;
            }
            if c.instance_norm {
                d = g.instance_norm(d, NORM_EPS)?;
            }
            if j < c.dropout_blocks && c.dropout > 0.0 {
                if let Some(rng) = noise.as_mut() {
                    d = self.dropout(g, d, rng)?;
                }
            }
            d = g.relu(d)?;
        }

        let n = g.shape(cond)[0];
        let hidden = self.heads_hidden.forward(g, p, embedding)?;
        let hidden = g.relu(hidden)?;
        let scaled = g.mul_row(hidden, p[self.heads_out])?;
        let per_head = g.reshape(scaled, &[n, c.attributes, c.head_width])?;
        let logits = g.sum_last(per_head)?;
        let attr_logits = g.add_row(logits, p[self.heads_bias])?;
        Ok(GeneratorOutput {
            image: d,
            embedding,
            attr_logits,
        })
    }

    /// Forward pass on a detached copy of the parameters; returns
    /// `(image, embedding, attr_logits)` values.
    pub fn infer(&self, cond: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(cond.clone());
        let out = self.forward(&mut g, &p, x, mode)?;
        Ok((
            g.value(out.image).clone(),
            g.value(out.embedding).clone(),
            g.value(out.attr_logits).clone(),
        ))
    }
}
