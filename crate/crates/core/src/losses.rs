//! Loss terms of the coupled objective, each a differentiable scalar node.
//!
//! All adversarial and cross-entropy terms are computed from logits through
//! `softplus`, using `-ln σ(x) = softplus(-x)` and `-ln(1 - σ(x)) = softplus(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{AttributePredictor, FeatureNet};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Weights of the total objective. The coupling term always has weight one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Reconstruction.
    pub lambda1: f64,
    /// Generator-side adversarial.
    pub lambda2: f64,
    /// Attribute prediction.
    pub lambda3: f64,
    /// Perceptual (Pol-GAN only).
    pub lambda4: f64,
    /// Perceptual attribute.
    pub lambda5: f64,
    /// Contrastive margin, applied to the squared embedding distance.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 0.5,
            lambda5: 0.5,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be finite and nonnegative".into()));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::InvalidArgument("contrastive margin must be positive".into()));
        }
        Ok(())
    }
}

/// `0` for a genuine (same identity) pair, `1` for an impostor pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairLabel {
    Genuine,
    Impostor,
}

impl PairLabel {
    pub fn from_identities(a: u32, b: u32) -> Self {
        if a == b {
            PairLabel::Genuine
        } else {
            PairLabel::Impostor
        }
    }

    pub fn y_cont(self) -> u8 {
        match self {
            PairLabel::Genuine => 0,
            PairLabel::Impostor => 1,
        }
    }
}

/// Reduction of the squared reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Mean over all elements (image-size invariant).
    #[default]
    Mean,
    /// Sum over elements, averaged over the batch.
    Sum,
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Mismatch(format!("{op}: shapes {a:?} and {b:?} differ"))
}

/// Per-pair contrastive loss for `(N, D)` embeddings, returned as an `(N)` vector:
/// genuine `½‖z1 − z2‖²`, impostor `½·max(0, m − ‖z1 − z2‖²)`.
pub fn contrastive_terms<T: Float>(
    g: &mut Graph<T>,
    z1: Var,
    z2: Var,
    labels: &[PairLabel],
    margin: f64,
) -> Result<Var> {
    let (s1, s2) = (g.shape(z1).to_vec(), g.shape(z2).to_vec());
    if s1 != s2 || s1.len() != 2 {
        return Err(mismatch("contrastive loss", &s1, &s2));
    }
    if labels.len() != s1[0] {
        return Err(Error::Mismatch(format!(
            "contrastive loss: {} labels for {} pairs",
            labels.len(),
            s1[0]
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument("contrastive margin must be positive".into()));
    }
    let diff = g.sub(z1, z2)?;
    let sq = g.square(diff)?;
    let d2 = g.sum_last(sq)?;
    let genuine = g.scale(d2, 0.5)?;
    let neg = g.scale(d2, -1.0)?;
    let slack = g.add_scalar(neg, margin)?;
    let hinge = g.relu(slack)?;
    let impostor = g.scale(hinge, 0.5)?;
    let n = labels.len();
    let is_imp: Vec<T> = labels.iter().map(|l| T::from_f(l.y_cont() as f64)).collect();
    let is_gen: Vec<T> = is_imp.iter().map(|&y| T::one() - y).collect();
    let gm = g.constant(Tensor::new(&[n], is_gen)?);
    let im = g.constant(Tensor::new(&[n], is_imp)?);
    let a = g.mul(genuine, gm)?;
    let b = g.mul(impostor, im)?;
    Ok(g.add(a, b)?)
}

/// Contrastive loss of a single pair of `(D)` (or `(1, D)`) embeddings.
pub fn contrastive_pair_loss<T: Float>(
    g: &mut Graph<T>,
    z1: Var,
    z2: Var,
    label: PairLabel,
    margin: f64,
) -> Result<Var> {
    let (s1, s2) = (g.shape(z1).to_vec(), g.shape(z2).to_vec());
    if s1 != s2 {
        return Err(mismatch("contrastive loss", &s1, &s2));
    }
    let d = *s1.last().unwrap_or(&0);
    let a = g.reshape(z1, &[1, d])?;
    let b = g.reshape(z2, &[1, d])?;
    let per = contrastive_terms(g, a, b, &[label], margin)?;
    Ok(g.sum(per)?)
}

/// Mean contrastive loss over a batch of sampled pairs.
///
/// The per-pair values are summed in ascending order of value, so the result
/// is bitwise independent of the order of pairs in the batch.
pub fn coupling_loss<T: Float>(
    g: &mut Graph<T>,
    z1: Var,
    z2: Var,
    labels: &[PairLabel],
    margin: f64,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("coupling loss over an empty batch".into()));
    }
    let per = contrastive_terms(g, z1, z2, labels, margin)?;
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let vals = g.value(per).data().to_vec();
    order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).expect("finite").then(a.cmp(&b)));
    // Selecting the pairs in sorted order via a permutation matrix keeps the
    // reduction differentiable.
    let mut perm = vec![T::zero(); n * n];
    for (row, &src) in order.iter().enumerate() {
        perm[src * n + row] = T::one();
    }
    let p = g.constant(Tensor::new(&[n, n], perm)?);
    let col = g.reshape(per, &[1, n])?;
    let sorted = g.matmul(col, p)?;
    Ok(g.mean(sorted)?)
}

/// Binary cross-entropy over `T` independent attribute logits, summed over
/// attributes and averaged over the batch. `labels` holds 0/1 targets, `(N, T)`.
pub fn attribute_loss<T: Float>(g: &mut Graph<T>, logits: Var, labels: &Tensor<T>) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s != labels.shape() || s.len() != 2 {
        return Err(mismatch("attribute loss", &s, labels.shape()));
    }
    // softplus(x) - y * x
    let y = g.constant(labels.clone());
    let sp = g.softplus(logits)?;
    let yx = g.mul(logits, y)?;
    let per = g.sub(sp, yx)?;
    let total = g.sum(per)?;
    Ok(g.scale(total, 1.0 / s[0] as f64)?)
}

/// Discriminator loss `mean(-ln σ(real)) + mean(-ln(1 - σ(fake)))`.
pub fn discriminator_loss<T: Float>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let (sr, sf) = (g.shape(real).to_vec(), g.shape(fake).to_vec());
    if sr != sf {
        return Err(mismatch("discriminator loss", &sr, &sf));
    }
    let neg = g.scale(real, -1.0)?;
    let r = g.softplus(neg)?;
    let r = g.mean(r)?;
    let f = g.softplus(fake)?;
    let f = g.mean(f)?;
    Ok(g.add(r, f)?)
}

/// Non-saturating generator loss `mean(-ln σ(fake))`.
pub fn generator_adversarial_loss<T: Float>(g: &mut Graph<T>, fake: Var) -> Result<Var> {
    let neg = g.scale(fake, -1.0)?;
    let sp = g.softplus(neg)?;
    Ok(g.mean(sp)?)
}

/// Squared error between synthesized and target images.
pub fn reconstruction_loss<T: Float>(g: &mut Graph<T>, synth: Var, target: Var, reduction: Reduction) -> Result<Var> {
    let (a, b) = (g.shape(synth).to_vec(), g.shape(target).to_vec());
    if a != b || a.is_empty() {
        return Err(mismatch("reconstruction loss", &a, &b));
    }
    let diff = g.sub(synth, target)?;
    let sq = g.square(diff)?;
    Ok(match reduction {
        Reduction::Mean => g.mean(sq)?,
        Reduction::Sum => {
            let s = g.sum(sq)?;
            g.scale(s, 1.0 / a[0] as f64)?
        }
    })
}

/// Mean absolute difference of frozen features `V(synth)` and `V(target)`
/// over all `C_p · H_p · W_p` elements (and the batch). The target side is
/// evaluated detached.
pub fn perceptual_loss<T: Float>(g: &mut Graph<T>, synth: Var, target: Var, v: &FeatureNet<T>) -> Result<Var> {
    let (a, b) = (g.shape(synth).to_vec(), g.shape(target).to_vec());
    if a != b {
        return Err(mismatch("perceptual loss", &a, &b));
    }
    let target = g.detach(target);
    let fs = v.forward(g, synth)?;
    let ft = v.forward(g, target)?;
    let ft = g.detach(ft);
    let diff = g.sub(fs, ft)?;
    let ad = g.abs(diff)?;
    Ok(g.mean(ad)?)
}

/// `‖A(synth) − A(target)‖²` on attribute probabilities, averaged over the batch.
pub fn attribute_distance<T: Float>(
    g: &mut Graph<T>,
    synth: Var,
    target: Var,
    a: &AttributePredictor<T>,
) -> Result<Var> {
    let (s, t) = (g.shape(synth).to_vec(), g.shape(target).to_vec());
    if s != t {
        return Err(mismatch("perceptual attribute loss", &s, &t));
    }
    let target = g.detach(target);
    let ps = a.probabilities(g, synth)?;
    let pt = a.probabilities(g, target)?;
    let pt = g.detach(pt);
    let diff = g.sub(ps, pt)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    Ok(g.scale(total, 1.0 / s[0] as f64)?)
}

/// `‖A(G_vis) − A(x_i)‖² + ‖A(G_pol) − A(x_j)‖²`.
pub fn perceptual_attribute_loss<T: Float>(
    g: &mut Graph<T>,
    synth_vis: Var,
    target_vis: Var,
    synth_pol: Var,
    target_pol: Var,
    a: &AttributePredictor<T>,
) -> Result<Var> {
    let v = attribute_distance(g, synth_vis, target_vis, a)?;
    let p = attribute_distance(g, synth_pol, target_pol, a)?;
    Ok(g.add(v, p)?)
}

/// The six generator-side terms; `None` marks a term switched off.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub coupling: Option<Var>,
    pub reconstruction: Option<Var>,
    pub adversarial: Option<Var>,
    pub attribute: Option<Var>,
    pub perceptual: Option<Var>,
    pub perceptual_attribute: Option<Var>,
}

impl LossTerms {
    /// `(name, term, weight)` in objective order.
    pub fn weighted(&self, w: &LossWeights) -> [(&'static str, Option<Var>, f64); 6] {
        [
            ("cpl", self.coupling, 1.0),
            ("e", self.reconstruction, w.lambda1),
            ("gan", self.adversarial, w.lambda2),
            ("a", self.attribute, w.lambda3),
            ("ppol", self.perceptual, w.lambda4),
            ("pa", self.perceptual_attribute, w.lambda5),
        ]
    }
}

/// `L_cpl + λ1 L_E + λ2 L_GAN + λ3 L_a + λ4 L_Ppol + λ5 L_pa` over the active terms.
pub fn total_loss<T: Float>(g: &mut Graph<T>, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (_, term, w) in terms.weighted(weights) {
        let Some(t) = term else { continue };
        let scaled = g.scale(t, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("total loss with no active terms".into()))
}
