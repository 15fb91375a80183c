//! Training state, the joint step and the step loop.

use std::fmt::Write as _;
use std::path::Path;

use log::info;

use super::pretrain::{pretrain_attribute_predictor, pretrain_dataset, PretrainReport};
use super::{save_checkpoint, LossMask, TrainConfig};
use crate::binio::write_atomic;
use crate::data::{Dataset, PairBatch, PairSampler, Split};
use crate::error::{Error, Result};
use crate::losses::{
    attribute_loss, coupling_loss, discriminator_loss, generator_adversarial_loss, perceptual_attribute_loss,
    perceptual_loss, reconstruction_loss, total_loss, LossTerms,
};
use crate::nets::{AttributePredictor, DiscriminatorNet, FeatureNet, GeneratorNet, Mode};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::{adam_step, AdamState, Graph, Tensor, TensorError, Var};

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: u64,
    pub config: TrainConfig,
    pub g_vis: GeneratorNet<f32>,
    pub g_pol: GeneratorNet<f32>,
    pub d_vis: DiscriminatorNet<f32>,
    pub d_pol: DiscriminatorNet<f32>,
    pub v: FeatureNet<f32>,
    pub a: AttributePredictor<f32>,
    pub opt_g_vis: AdamState<f32>,
    pub opt_g_pol: AdamState<f32>,
    pub opt_d_vis: AdamState<f32>,
    pub opt_d_pol: AdamState<f32>,
}

impl TrainState {
    /// Fresh networks for `config`, around a pretrained (frozen) predictor.
    pub fn new(config: TrainConfig, mut a: AttributePredictor<f32>) -> Result<Self> {
        config.validate()?;
        a.freeze();
        let seed = config.seed;
        let g_vis = GeneratorNet::new(config.generator_for(1), &mut stream_rng(seed, Stream::Init, 0))?;
        let g_pol = GeneratorNet::new(config.generator_for(3), &mut stream_rng(seed, Stream::Init, 1))?;
        let d_vis = DiscriminatorNet::new(config.discriminator_for(1), &mut stream_rng(seed, Stream::Init, 2))?;
        let d_pol = DiscriminatorNet::new(config.discriminator_for(3), &mut stream_rng(seed, Stream::Init, 3))?;
        let v = if config.feature_from_predictor {
            FeatureNet::from_predictor(config.feature_config(), &a)?
        } else {
            FeatureNet::new(config.feature_config(), &mut stream_rng(seed, Stream::Init, 4))?
        };
        Ok(Self {
            step: 0,
            opt_g_vis: AdamState::new(config.adam, g_vis.params().tensors()),
            opt_g_pol: AdamState::new(config.adam, g_pol.params().tensors()),
            opt_d_vis: AdamState::new(config.disc_adam, d_vis.params().tensors()),
            opt_d_pol: AdamState::new(config.disc_adam, d_pol.params().tensors()),
            config,
            g_vis,
            g_pol,
            d_vis,
            d_pol,
            v,
            a,
        })
    }

    /// Runs `steps` further steps on the training split of `ds` (already
    /// preprocessed). With `out`, appends to the loss CSV and writes
    /// checkpoints at the configured cadence and after the last step.
    pub fn run(&mut self, ds: &Dataset, steps: u64, out: Option<&Path>) -> Result<Vec<StepRecord>> {
        let sampler = PairSampler::new(ds, Split::Train)?;
        let mask = self.config.mask();
        let mut history = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let mut rng = stream_rng(self.config.seed, Stream::Sampler, self.step);
            let batch = sampler.sample(self.config.batch_size, &mut rng)?;
            let rec = train_step(self, ds, &batch)?;
            if rec.step % 50 == 0 || rec.step == 1 {
                info!("step {} total {:.5}", rec.step, rec.total);
            }
            history.push(rec);
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) {
                    save_checkpoint(&dir.join(checkpoint_name(self.step)), self)?;
                }
            }
        }
        if let Some(dir) = out {
            write_atomic(&dir.join("loss_history.csv"), loss_csv(&mask, &history).as_bytes())?;
            let last = dir.join(checkpoint_name(self.step));
            if !last.exists() {
                save_checkpoint(&last, self)?;
            }
        }
        Ok(history)
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.agck")
}

/// Logged values of one step. `terms` follows [`LossMask::NAMES`]; inactive
/// terms are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub terms: [Option<f64>; 6],
    pub total: f64,
    pub d_vis: Option<f64>,
    pub d_pol: Option<f64>,
}

/// `step, loss_<term>..., [d_vis, d_pol,] total` with only active terms.
pub fn loss_csv(mask: &LossMask, history: &[StepRecord]) -> String {
    let mut s = String::from("step");
    for name in mask.active_names() {
        let _ = write!(s, ",loss_{name}");
    }
    if mask.gan {
        s.push_str(",d_vis,d_pol");
    }
    s.push_str(",total\n");
    for r in history {
        let _ = write!(s, "{}", r.step);
        for (on, v) in mask.flags().iter().zip(&r.terms) {
            if *on {
                let _ = write!(s, ",{}", v.unwrap_or(f64::NAN));
            }
        }
        if mask.gan {
            let _ = write!(s, ",{},{}", r.d_vis.unwrap_or(f64::NAN), r.d_pol.unwrap_or(f64::NAN));
        }
        let _ = writeln!(s, ",{}", r.total);
    }
    s
}

fn name_nonfinite(term: &str, step: u64) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFinite {
            term: term.to_string(),
            step,
        },
        e => e,
    }
}

#[cfg(debug_assertions)]
fn snapshot(stores: &[&crate::nets::ParamStore<f32>]) -> Vec<Tensor<f32>> {
    stores.iter().flat_map(|s| s.tensors().iter().cloned()).collect()
}

/// One discriminator update on real `(cond, real)` against detached `(cond, fake)`.
fn discriminator_update(
    d: &mut DiscriminatorNet<f32>,
    opt: &mut AdamState<f32>,
    cond: &Tensor<f32>,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = d.params().bind(&mut g, true);
    let c = g.constant(cond.clone());
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let lr = d.forward(&mut g, &p, c, r)?;
    let lf = d.forward(&mut g, &p, c, f)?;
    let loss = discriminator_loss(&mut g, lr, lf)?;
    g.backward(loss)?;
    let grads: Vec<_> = p.iter().map(|&v| g.grad(v)).collect();
    adam_step(d.params_mut().tensors_mut(), &grads, opt)?;
    Ok(g.value(loss).item() as f64)
}

fn clipped(g: &Graph<f32>, vars: &[Var], clip: Option<f64>) -> Vec<Option<Tensor<f32>>> {
    let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| g.grad(v).cloned()).collect();
    let Some(max) = clip else { return grads };
    let norm = grads
        .iter()
        .flatten()
        .map(|t| t.data().iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm <= max {
        return grads;
    }
    let s = (max / norm) as f32;
    grads.into_iter().map(|t| t.map(|t| t.map(|x| x * s))).collect()
}

/// One joint step: a discriminator update per sub-network (when the
/// adversarial term is active), then one update of both generators on the
/// weighted sum of the active terms.
pub fn train_step(state: &mut TrainState, ds: &Dataset, batch: &PairBatch) -> Result<StepRecord> {
    let step = state.step + 1;
    let cfg = state.config.clone();
    let mask = cfg.mask();
    let w = cfg.weights;
    let (vi, pj) = (batch.visible_indices(), batch.polar_indices());
    let x_i = ds.visible_batch(&vi)?;
    let y_pol = ds.polar_batch(&pj)?;
    let x_j = ds.visible_batch(&pj)?;
    let labels = batch.labels();

    let mut g = Graph::new();
    let pv = state.g_vis.params().bind(&mut g, true);
    let pp = state.g_pol.params().bind(&mut g, true);
    let cond_v = g.constant(x_i.clone());
    let cond_p = g.constant(y_pol.clone());
    let target_j = g.constant(x_j.clone());
    let seed_v = derive_seed(cfg.seed, Stream::Dropout, 2 * step);
    let seed_p = derive_seed(cfg.seed, Stream::Dropout, 2 * step + 1);
    let ov = state
        .g_vis
        .forward(&mut g, &pv, cond_v, Mode::Train { seed: seed_v })
        .map_err(name_nonfinite("g_vis", step))?;
    let op = state
        .g_pol
        .forward(&mut g, &pp, cond_p, Mode::Train { seed: seed_p })
        .map_err(name_nonfinite("g_pol", step))?;

    // Test builds check bitwise that each update touches only its own networks.
    #[cfg(debug_assertions)]
    let generators_before = snapshot(&[state.g_vis.params(), state.g_pol.params()]);

    let (mut d_vis, mut d_pol) = (None, None);
    if mask.gan {
        let fake_v = g.value(ov.image).clone();
        let fake_p = g.value(op.image).clone();
        d_vis = Some(
            discriminator_update(&mut state.d_vis, &mut state.opt_d_vis, &x_i, &x_i, &fake_v)
                .map_err(name_nonfinite("d_vis", step))?,
        );
        d_pol = Some(
            discriminator_update(&mut state.d_pol, &mut state.opt_d_pol, &y_pol, &x_j, &fake_p)
                .map_err(name_nonfinite("d_pol", step))?,
        );
    }

    #[cfg(debug_assertions)]
    {
        assert!(
            generators_before == snapshot(&[state.g_vis.params(), state.g_pol.params()]),
            "discriminator update modified a generator"
        );
    }
    #[cfg(debug_assertions)]
    let others_before = snapshot(&[state.d_vis.params(), state.d_pol.params(), state.v.params(), state.a.params()]);

    let mut terms = LossTerms::default();
    if mask.cpl {
        terms.coupling =
            Some(coupling_loss(&mut g, ov.embedding, op.embedding, &labels, w.margin).map_err(name_nonfinite("cpl", step))?);
    }
    if mask.e {
        let r = (|| {
            let a = reconstruction_loss(&mut g, ov.image, cond_v, cfg.reduction)?;
            let b = reconstruction_loss(&mut g, op.image, target_j, cfg.reduction)?;
            Ok(g.add(a, b)?)
        })();
        terms.reconstruction = Some(r.map_err(name_nonfinite("e", step))?);
    }
    if mask.gan {
        let r = (|| {
            let dv = state.d_vis.params().bind(&mut g, false);
            let lv = state.d_vis.forward(&mut g, &dv, cond_v, ov.image)?;
            let a = generator_adversarial_loss(&mut g, lv)?;
            let dp = state.d_pol.params().bind(&mut g, false);
            let lp = state.d_pol.forward(&mut g, &dp, cond_p, op.image)?;
            let b = generator_adversarial_loss(&mut g, lp)?;
            Ok(g.add(a, b)?)
        })();
        terms.adversarial = Some(r.map_err(name_nonfinite("gan", step))?);
    }
    if mask.a {
        let r = (|| {
            let a = attribute_loss(&mut g, ov.attr_logits, &ds.attribute_batch(&vi)?)?;
            let b = attribute_loss(&mut g, op.attr_logits, &ds.attribute_batch(&pj)?)?;
            Ok(g.add(a, b)?)
        })();
        terms.attribute = Some(r.map_err(name_nonfinite("a", step))?);
    }
    if mask.ppol {
        terms.perceptual =
            Some(perceptual_loss(&mut g, op.image, target_j, &state.v).map_err(name_nonfinite("ppol", step))?);
    }
    if mask.pa {
        terms.perceptual_attribute = Some(
            perceptual_attribute_loss(&mut g, ov.image, cond_v, op.image, target_j, &state.a)
                .map_err(name_nonfinite("pa", step))?,
        );
    }

    let mut values = [None; 6];
    for (k, (name, term, _)) in terms.weighted(&w).into_iter().enumerate() {
        if let Some(t) = term {
            let v = g.value(t).item() as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term: name.to_string(),
                    step,
                });
            }
            values[k] = Some(v);
        }
    }
    let total = total_loss(&mut g, &terms, &w).map_err(name_nonfinite("total", step))?;
    g.backward(total).map_err(|e| name_nonfinite("backward", step)(e.into()))?;
    let gv = clipped(&g, &pv, cfg.grad_clip);
    let gp = clipped(&g, &pp, cfg.grad_clip);
    let refs_v: Vec<_> = gv.iter().map(Option::as_ref).collect();
    let refs_p: Vec<_> = gp.iter().map(Option::as_ref).collect();
    adam_step(state.g_vis.params_mut().tensors_mut(), &refs_v, &mut state.opt_g_vis)?;
    adam_step(state.g_pol.params_mut().tensors_mut(), &refs_p, &mut state.opt_g_pol)?;
    #[cfg(debug_assertions)]
    {
        assert!(
            others_before == snapshot(&[state.d_vis.params(), state.d_pol.params(), state.v.params(), state.a.params()]),
            "generator update modified a discriminator or a frozen network"
        );
    }
    let total = g.value(total).item() as f64;
    state.step = step;
    Ok(StepRecord {
        step,
        terms: values,
        total,
        d_vis,
        d_pol,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<StepRecord>,
    pub pretrain: PretrainReport,
    /// The preprocessed dataset training ran on.
    pub prepared: Dataset,
}

/// Copies the dataset geometry into `config` and validates the result.
pub fn resolve_config(raw: &Dataset, config: &TrainConfig) -> Result<TrainConfig> {
    let mut config = config.clone();
    config.predictor.height = raw.manifest.height;
    config.predictor.width = raw.manifest.width;
    config.validate()?;
    if raw.manifest.train_identities.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 train identities, dataset has {}",
            raw.manifest.train_identities.len()
        )));
    }
    Ok(config)
}

/// Pretrains the attribute predictor for a resolved `config`, holding out the
/// test split of `prepared`. The ablation setting plays no part, so one
/// predictor can serve every ablation of a seed.
pub fn pretrain_for(
    raw: &Dataset,
    prepared: &Dataset,
    config: &TrainConfig,
) -> Result<(AttributePredictor<f32>, PretrainReport)> {
    let train_idx = prepared.split_indices(Split::Train);
    let test_idx = prepared.split_indices(Split::Test);
    let (pre_ds, pre_idx) = pretrain_dataset(raw, &train_idx, &config.pretrain, &config.preprocess, config.seed)?;
    let (a, report) = pretrain_attribute_predictor(
        (&pre_ds, &pre_idx),
        (prepared, &test_idx),
        &config.predictor,
        &config.pretrain,
        config.seed,
    )?;
    info!("attribute predictor held-out mean accuracy {:.4}", report.held_out_mean);
    Ok((a, report))
}

/// Pretrains the attribute predictor, then runs `config.steps` joint steps.
pub fn train(raw: &Dataset, config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let config = resolve_config(raw, config)?;
    let prepared = raw.preprocess(&config.preprocess)?;
    let (a, report) = pretrain_for(raw, &prepared, &config)?;
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        write_atomic(&dir.join("pretrain_report.json"), json.as_bytes())?;
    }
    let mut state = TrainState::new(config.clone(), a)?;
    let history = state.run(&prepared, config.steps, out)?;
    Ok(TrainOutcome {
        state,
        history,
        pretrain: report,
        prepared,
    })
}
