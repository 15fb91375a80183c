//! Test-phase synthesis, identification and verification metrics, attribute
//! prediction scenarios and embedding export.

mod metrics;

pub use metrics::{cmc, euclidean, match_gallery, rank_of, verification_roc, Match, Roc};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::data::{Dataset, Split, ATTRIBUTE_NAMES};
use crate::error::{Error, Result};
use crate::nets::{AttributePredictor, GeneratorNet, Mode};
use crate::par;
use crate::rng::{derive_seed, Stream};
use crate::tensor::Tensor;
use crate::train::{attribute_accuracy, fit_predictor, predict_indices, TrainState};

const CHUNK: usize = 16;

/// Gallery and probe sample indices drawn from the test split: the first
/// sample of every test identity goes to the gallery, the rest are probes.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryProbeSet {
    pub gallery: Vec<usize>,
    pub probes: Vec<usize>,
}

impl GalleryProbeSet {
    pub fn from_test_split(ds: &Dataset) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let (mut gallery, mut probes) = (Vec::new(), Vec::new());
        for i in ds.split_indices(Split::Test) {
            if seen.insert(ds.samples[i].identity) {
                gallery.push(i);
            } else {
                probes.push(i);
            }
        }
        if probes.is_empty() {
            return Err(Error::InvalidArgument(
                "test split has no probes (every identity needs at least 2 samples)".into(),
            ));
        }
        Ok(Self { gallery, probes })
    }

    pub fn gallery_identities(&self, ds: &Dataset) -> usize {
        let mut ids: Vec<u32> = self.gallery.iter().map(|&i| ds.samples[i].identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    /// `(N, 1, H, W)`
    pub images: Tensor<f32>,
    /// `(N, D)`
    pub embeddings: Tensor<f32>,
    /// `(N, T)`
    pub logits: Tensor<f32>,
}

/// Runs a generator in eval mode over `inputs` `(N, C, H, W)` in chunks.
pub fn synthesize(g: &GeneratorNet<f32>, inputs: &Tensor<f32>, seed: u64) -> Result<Synthesis> {
    let n = inputs.shape()[0];
    let (mut img, mut emb, mut log) = (Vec::new(), Vec::new(), Vec::new());
    let mut start = 0;
    while start < n {
        let count = CHUNK.min(n - start);
        let x = inputs.slice_outer(start, count)?;
        let (i, e, l) = g.infer(&x, Mode::Eval { seed })?;
        img.push(i);
        emb.push(e);
        log.push(l);
        start += count;
    }
    let cat = |v: Vec<Tensor<f32>>| -> Result<Tensor<f32>> {
        let mut shape = v[0].shape().to_vec();
        shape[0] = n;
        Ok(Tensor::new(&shape, v.into_iter().flat_map(Tensor::into_data).collect())?)
    };
    if n == 0 {
        return Err(Error::InvalidArgument("nothing to synthesize".into()));
    }
    Ok(Synthesis {
        images: cat(img)?,
        embeddings: cat(emb)?,
        logits: cat(log)?,
    })
}

fn rows(t: &Tensor<f32>) -> Vec<&[f32]> {
    let n = t.shape()[0];
    if n == 0 {
        return vec![];
    }
    t.data().chunks(t.numel() / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    /// True-identity rank of every probe.
    pub ranks: Vec<usize>,
    pub cmc: Vec<f64>,
    pub roc: Roc,
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// Identification (CMC up to `k`, defaulting to the gallery size) and
/// verification over all probe/gallery cross pairs.
pub fn identify(
    probes: &[&[f32]],
    probe_ids: &[u32],
    gallery: &[(u32, &[f32])],
    k: Option<usize>,
) -> Result<Identification> {
    if probes.len() != probe_ids.len() {
        return Err(Error::Mismatch(format!("{} probes, {} labels", probes.len(), probe_ids.len())));
    }
    let n_ids = {
        let mut ids: Vec<u32> = gallery.iter().map(|g| g.0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    for id in probe_ids {
        if !gallery.iter().any(|g| g.0 == *id) {
            return Err(Error::Missing(format!("gallery entry for probe identity {id}")));
        }
    }
    let per_probe = par::try_map(probes.len(), |i| {
        let m = match_gallery(probes[i], gallery)?;
        let rank = rank_of(&m, probe_ids[i]).expect("identity checked above");
        let dists: Vec<(bool, f64)> = gallery
            .iter()
            .map(|&(id, g)| (id == probe_ids[i], euclidean(probes[i], g)))
            .collect();
        Ok::<_, Error>((rank, dists))
    })?;
    let ranks: Vec<usize> = per_probe.iter().map(|p| p.0).collect();
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for (_, d) in &per_probe {
        for &(same, dist) in d {
            if same {
                genuine.push(dist);
            } else {
                impostor.push(dist);
            }
        }
    }
    Ok(Identification {
        cmc: cmc(&ranks, n_ids, k.unwrap_or(n_ids))?,
        roc: verification_roc(&genuine, &impostor)?,
        ranks,
        genuine,
        impostor,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAccuracy {
    pub scenario: u8,
    pub name: String,
    pub per_attribute: Vec<f64>,
    pub mean: f64,
}

impl ScenarioAccuracy {
    fn new(scenario: u8, name: &str, per_attribute: Vec<f64>) -> Self {
        let mean = per_attribute.iter().sum::<f64>() / per_attribute.len().max(1) as f64;
        Self {
            scenario,
            name: name.to_string(),
            per_attribute,
            mean,
        }
    }
}

fn s0_batch(ds: &Dataset, idx: &[usize]) -> Result<Tensor<f32>> {
    let (h, w) = (ds.manifest.height, ds.manifest.width);
    let data = idx
        .iter()
        .flat_map(|&i| ds.samples[i].polar.data()[..h * w].iter().copied())
        .collect();
    Ok(Tensor::new(&[idx.len(), 1, h, w], data)?)
}

/// Attribute accuracy on the test split in four settings:
/// 1. the predictor on visible images,
/// 2. the predictor on the `S0` channel of the polarimetric triple,
/// 3. a 3-channel copy of the predictor fine-tuned on training-split triples,
/// 4. the polarimetric generator's own attribute heads.
pub fn attribute_scenarios(state: &TrainState, ds: &Dataset, seed: u64) -> Result<Vec<ScenarioAccuracy>> {
    let test = ds.split_indices(Split::Test);
    let train = ds.split_indices(Split::Train);
    if test.is_empty() {
        return Err(Error::InvalidArgument("attribute scenarios need test samples".into()));
    }
    let labels = ds.attribute_batch(&test)?;
    let a = &state.a;
    let s1 = attribute_accuracy(&predict_indices(a, &test, |b| ds.visible_batch(b))?, &labels)?;
    let s2 = attribute_accuracy(&predict_indices(a, &test, |b| s0_batch(ds, b))?, &labels)?;

    let pc = &state.config.pretrain;
    let mut tuned: AttributePredictor<f32> = a.adapt_input(3, 0)?;
    fit_predictor(
        &mut tuned,
        ds,
        &train,
        |b| ds.polar_batch(b),
        pc.finetune_steps,
        pc.batch_size,
        pc.adam,
        derive_seed(seed, Stream::Eval, 3),
    )?;
    let s3 = attribute_accuracy(&predict_indices(&tuned, &test, |b| ds.polar_batch(b))?, &labels)?;

    let syn = synthesize(&state.g_pol, &ds.polar_batch(&test)?, seed)?;
    let probs = syn.logits.map(|x| 1.0 / (1.0 + (-x).exp()));
    let s4 = attribute_accuracy(&probs, &labels)?;
    Ok(vec![
        ScenarioAccuracy::new(1, "predictor-on-visible", s1),
        ScenarioAccuracy::new(2, "predictor-on-polar-s0", s2),
        ScenarioAccuracy::new(3, "predictor-finetuned-on-polar", s3),
        ScenarioAccuracy::new(4, "pol-gan-heads", s4),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    /// Match in embedding space (polar embedding vs visible embedding)
    /// instead of on synthesized pixels.
    pub embedding_matching: bool,
    /// Largest CMC rank; the gallery size when unset.
    pub max_rank: Option<usize>,
    pub attribute_scenarios: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            embedding_matching: false,
            max_rank: None,
            attribute_scenarios: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub step: u64,
    pub seed: u64,
    pub ablation: String,
    pub matching: String,
    pub gallery_identities: usize,
    pub probes: usize,
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub roc: Roc,
    pub auc: f64,
    pub attributes: Vec<ScenarioAccuracy>,
}

/// Full test-phase evaluation of a training state on a preprocessed dataset.
pub fn evaluate(state: &TrainState, ds: &Dataset, config: &EvalConfig) -> Result<MetricReport> {
    let set = GalleryProbeSet::from_test_split(ds)?;
    let probe_ids: Vec<u32> = set.probes.iter().map(|&i| ds.samples[i].identity).collect();
    let polar = ds.polar_batch(&set.probes)?;
    let syn = synthesize(&state.g_pol, &polar, config.seed)?;
    let gallery_vis = ds.visible_batch(&set.gallery)?;
    let (probe_feats, gallery_feats) = if config.embedding_matching {
        let z1 = synthesize(&state.g_vis, &gallery_vis, config.seed)?.embeddings;
        (syn.embeddings, z1)
    } else {
        (syn.images, gallery_vis)
    };
    let gallery: Vec<(u32, &[f32])> = set
        .gallery
        .iter()
        .map(|&i| ds.samples[i].identity)
        .zip(rows(&gallery_feats))
        .collect();
    let id = identify(&rows(&probe_feats), &probe_ids, &gallery, config.max_rank)?;
    let attributes = if config.attribute_scenarios {
        attribute_scenarios(state, ds, config.seed)?
    } else {
        vec![]
    };
    Ok(MetricReport {
        step: state.step,
        seed: config.seed,
        ablation: state.config.ablation.name().to_string(),
        matching: if config.embedding_matching { "embedding" } else { "pixel" }.into(),
        gallery_identities: set.gallery_identities(ds),
        probes: set.probes.len(),
        rank1: id.cmc[0],
        cmc: id.cmc,
        auc: id.roc.auc,
        roc: id.roc,
        attributes,
    })
}

/// Writes `cmc_*.csv`, `roc_*.csv`, `attrs_*.csv` and `summary_*.txt`, each
/// suffixed with the checkpoint step and evaluation seed.
pub fn write_report(dir: &Path, r: &MetricReport) -> Result<Vec<PathBuf>> {
    let tag = format!("step{}_seed{}", r.step, r.seed);
    let mut cmc_csv = String::from("rank,rate\n");
    for (k, v) in r.cmc.iter().enumerate() {
        let _ = writeln!(cmc_csv, "{},{}", k + 1, v);
    }
    let mut roc_csv = String::from("fpr,tpr\n");
    for (f, t) in &r.roc.points {
        let _ = writeln!(roc_csv, "{f},{t}");
    }
    let mut attrs = String::from("scenario,attribute,accuracy\n");
    for s in &r.attributes {
        for (name, acc) in ATTRIBUTE_NAMES.iter().zip(&s.per_attribute) {
            let _ = writeln!(attrs, "{},{},{}", s.scenario, name, acc);
        }
    }
    let mut summary = String::new();
    let _ = writeln!(summary, "step: {}", r.step);
    let _ = writeln!(summary, "seed: {}", r.seed);
    let _ = writeln!(summary, "ablation: {}", r.ablation);
    let _ = writeln!(summary, "matching: {}", r.matching);
    let _ = writeln!(summary, "gallery_identities: {}", r.gallery_identities);
    let _ = writeln!(summary, "probes: {}", r.probes);
    let _ = writeln!(summary, "rank1: {}", r.rank1);
    let _ = writeln!(summary, "auc: {}", r.auc);
    for s in &r.attributes {
        let _ = writeln!(summary, "attributes.scenario{}.{}: {}", s.scenario, s.name, s.mean);
    }
    let files = [
        (format!("cmc_{tag}.csv"), cmc_csv),
        (format!("roc_{tag}.csv"), roc_csv),
        (format!("attrs_{tag}.csv"), attrs),
        (format!("summary_{tag}.txt"), summary),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub identity: u32,
    pub modality: &'static str,
    pub sample: usize,
    pub z: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn to_csv(&self) -> String {
        let d = self.rows.first().map_or(0, |r| r.z.len());
        let mut s = String::from("identity,modality,sample");
        for k in 0..d {
            let _ = write!(s, ",z{k}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", r.identity, r.modality, r.sample);
            for v in &r.z {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Mean cross-modal distance `(genuine, impostor)` between every visible
    /// and every polarimetric embedding.
    pub fn mean_cross_modal_distances(&self) -> (f64, f64) {
        let vis: Vec<&EmbeddingRow> = self.rows.iter().filter(|r| r.modality == "visible").collect();
        let pol: Vec<&EmbeddingRow> = self.rows.iter().filter(|r| r.modality == "polar").collect();
        let (mut g, mut ng, mut i, mut ni) = (0.0, 0usize, 0.0, 0usize);
        for a in &vis {
            for b in &pol {
                let d = euclidean(&a.z, &b.z);
                if a.identity == b.identity {
                    g += d;
                    ng += 1;
                } else {
                    i += d;
                    ni += 1;
                }
            }
        }
        (g / ng.max(1) as f64, i / ni.max(1) as f64)
    }
}

/// Visible (`G_vis`) and polarimetric (`G_pol`) embeddings of every test sample.
pub fn export_embeddings(state: &TrainState, ds: &Dataset, seed: u64) -> Result<EmbeddingTable> {
    let test = ds.split_indices(Split::Test);
    if test.is_empty() {
        return Err(Error::InvalidArgument("no test samples to embed".into()));
    }
    let z1 = synthesize(&state.g_vis, &ds.visible_batch(&test)?, seed)?.embeddings;
    let z2 = synthesize(&state.g_pol, &ds.polar_batch(&test)?, seed)?.embeddings;
    let mut out = Vec::with_capacity(2 * test.len());
    for (modality, z) in [("visible", &z1), ("polar", &z2)] {
        for (&i, row) in test.iter().zip(rows(z)) {
            out.push(EmbeddingRow {
                identity: ds.samples[i].identity,
                modality,
                sample: i,
                z: row.to_vec(),
            });
        }
    }
    Ok(EmbeddingTable { rows: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthConfig};

    fn noiseless() -> Dataset {
        generate_synthetic_dataset(&SynthConfig {
            identities: 8,
            samples_per_identity: 3,
            height: 32,
            width: 32,
            noise: 0.0,
            jitter: 0.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn gallery_protocol() {
        let ds = noiseless();
        let set = GalleryProbeSet::from_test_split(&ds).unwrap();
        assert_eq!(set.gallery.len(), ds.manifest.test_identities.len());
        assert_eq!(set.probes.len(), 2 * set.gallery.len());
        for &p in &set.probes {
            assert!(ds.manifest.test_identities.contains(&ds.samples[p].identity));
        }
    }

    #[test]
    fn copy_oracle_is_perfect() {
        let ds = noiseless();
        let set = GalleryProbeSet::from_test_split(&ds).unwrap();
        // The oracle "synthesizes" each probe's ground-truth visible image.
        let probes: Vec<&[f32]> = set.probes.iter().map(|&i| ds.samples[i].visible.data()).collect();
        let ids: Vec<u32> = set.probes.iter().map(|&i| ds.samples[i].identity).collect();
        let gallery: Vec<(u32, &[f32])> = set
            .gallery
            .iter()
            .map(|&i| (ds.samples[i].identity, ds.samples[i].visible.data()))
            .collect();
        let r = identify(&probes, &ids, &gallery, None).unwrap();
        assert_eq!(r.cmc[0], 1.0);
        assert_eq!(r.roc.auc, 1.0);
        assert!(r.genuine.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn missing_gallery_identity() {
        let a = [0.0f32];
        let gallery: Vec<(u32, &[f32])> = vec![(1, &a)];
        assert!(matches!(identify(&[&a], &[2], &gallery, None), Err(Error::Missing(_))));
    }
}
