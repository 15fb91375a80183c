//! Brute-force identification and verification metrics.

use agc_core::data::{generate_synthetic_dataset, SynthConfig};
use agc_core::eval::{identify, GalleryProbeSet, Identification};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub probes: Vec<Vec<f32>>,
    pub probe_ids: Vec<u32>,
    pub gallery: Vec<(u32, Vec<f32>)>,
}

/// `probes` probes over `identities` identities with one or two gallery
/// images each. Small integer coordinates make distance ties common.
pub fn random_instance(probes: usize, identities: u32, rng: &mut ChaCha8Rng) -> Instance {
    let dim = rng.random_range(1..=4);
    let point = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.random_range(-3..=3) as f32).collect::<Vec<f32>>();
    let mut gallery = Vec::new();
    for id in 0..identities {
        for _ in 0..rng.random_range(1..=2) {
            gallery.push((id, point(rng)));
        }
    }
    // Shuffle so gallery order carries no information.
    for i in (1..gallery.len()).rev() {
        let j = rng.random_range(0..=i);
        gallery.swap(i, j);
    }
    let probe_ids = (0..probes).map(|_| rng.random_range(0..identities)).collect();
    let probes = (0..probes).map(|_| point(rng)).collect();
    Instance {
        probes,
        probe_ids,
        gallery,
    }
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

pub struct BruteForce {
    pub ranks: Vec<usize>,
    pub cmc: Vec<f64>,
    pub roc: Vec<(f64, f64)>,
    pub auc: f64,
}

pub fn brute_force(inst: &Instance) -> BruteForce {
    let mut ids: Vec<u32> = inst.gallery.iter().map(|g| g.0).collect();
    ids.sort();
    ids.dedup();
    let score = |p: &[f32], id: u32| {
        inst.gallery
            .iter()
            .filter(|g| g.0 == id)
            .map(|g| dist(p, &g.1))
            .fold(f64::INFINITY, f64::min)
    };
    let ranks: Vec<usize> = inst
        .probes
        .iter()
        .zip(&inst.probe_ids)
        .map(|(p, &t)| {
            let dt = score(p, t);
            1 + ids
                .iter()
                .filter(|&&id| {
                    let d = score(p, id);
                    id != t && (d < dt || (d == dt && id < t))
                })
                .count()
        })
        .collect();
    let n = ranks.len() as f64;
    let cmc = (1..=ids.len())
        .map(|k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect();

    let (mut gen, mut imp) = (Vec::new(), Vec::new());
    for (p, &t) in inst.probes.iter().zip(&inst.probe_ids) {
        for (id, g) in &inst.gallery {
            if *id == t {
                gen.push(dist(p, g));
            } else {
                imp.push(dist(p, g));
            }
        }
    }
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut roc = vec![(0.0, 0.0)];
    for t in thresholds {
        let fpr = imp.iter().filter(|&&d| d <= t).count() as f64 / imp.len() as f64;
        let tpr = gen.iter().filter(|&&d| d <= t).count() as f64 / gen.len() as f64;
        roc.push((fpr, tpr));
    }
    let mut auc = 0.0;
    for w in roc.windows(2) {
        auc += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0;
    }
    BruteForce { ranks, cmc, roc, auc }
}

pub fn run(inst: &Instance) -> Identification {
    let probes: Vec<&[f32]> = inst.probes.iter().map(|p| p.as_slice()).collect();
    let gallery: Vec<(u32, &[f32])> = inst.gallery.iter().map(|(id, g)| (*id, g.as_slice())).collect();
    identify(&probes, &inst.probe_ids, &gallery, None).unwrap()
}

/// Number of instances (out of `count`) where the library and the brute
/// force disagree anywhere.
pub fn metrics_mismatches(count: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .filter(|_| {
            let inst = random_instance(20, 10, &mut rng);
            let lib = run(&inst);
            let bf = brute_force(&inst);
            lib.ranks != bf.ranks || lib.cmc != bf.cmc || lib.roc.points != bf.roc || lib.roc.auc != bf.auc
        })
        .count()
}

/// `(rank-1, AUC)` when every probe is "synthesized" as its own ground-truth
/// visible image, on a noiseless benchmark-sized split.
pub fn copy_generator_scores(seed: u64) -> (f64, f64) {
    let ds = generate_synthetic_dataset(&SynthConfig {
        seed,
        noise: 0.0,
        jitter: 0.0,
        ..Default::default()
    })
    .unwrap();
    let set = GalleryProbeSet::from_test_split(&ds).unwrap();
    let inst = Instance {
        probes: set.probes.iter().map(|&i| ds.samples[i].visible.data().to_vec()).collect(),
        probe_ids: set.probes.iter().map(|&i| ds.samples[i].identity).collect(),
        gallery: set
            .gallery
            .iter()
            .map(|&i| (ds.samples[i].identity, ds.samples[i].visible.data().to_vec()))
            .collect(),
    };
    let r = run(&inst);
    (r.cmc[0], r.roc.auc)
}
