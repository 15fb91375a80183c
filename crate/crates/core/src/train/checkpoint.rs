//! Checkpoint file: magic `AGCK`, u16 version, a JSON metadata record and a
//! table of named `f32` tensors, each record followed by its CRC32.
//! A standalone attribute predictor uses the same layout under magic `AGCP`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::binio::{read_file, write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::nets::{AttributePredictor, DiscriminatorNet, FeatureNet, GeneratorNet, ParamStore, PredictorConfig};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{AdamState, Tensor};

pub const CHECKPOINT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"AGCK";
const PREDICTOR_MAGIC: &[u8; 4] = b"AGCP";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    step: u64,
    /// All randomness is keyed by `(seed, stream, step)`, so the seed and the
    /// step counter are the complete RNG state.
    seed: u64,
    config: TrainConfig,
    predictor_frozen: bool,
    adam_t: [u64; 4],
}

const GROUPS: [&str; 6] = ["g_vis", "g_pol", "d_vis", "d_pol", "v", "a"];
const OPTS: [&str; 4] = ["g_vis", "g_pol", "d_vis", "d_pol"];

fn stores(s: &TrainState) -> [&ParamStore<f32>; 6] {
    [
        s.g_vis.params(),
        s.g_pol.params(),
        s.d_vis.params(),
        s.d_pol.params(),
        s.v.params(),
        s.a.params(),
    ]
}

fn opts(s: &TrainState) -> [&AdamState<f32>; 4] {
    [&s.opt_g_vis, &s.opt_g_pol, &s.opt_d_vis, &s.opt_d_pol]
}

fn put_tensor(w: &mut Writer, name: &str, t: &Tensor<f32>) {
    let start = w.buf.len();
    w.str(name);
    w.u8(t.shape().len() as u8);
    for &d in t.shape() {
        w.u32(d as u32);
    }
    w.f32s(t.data());
    w.crc_since(start);
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let meta = Meta {
        step: state.step,
        seed: state.config.seed,
        config: state.config.clone(),
        predictor_frozen: state.a.is_frozen(),
        adam_t: opts(state).map(|o| o.t),
    };
    let mut entries: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (group, store) in GROUPS.iter().zip(stores(state)) {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            entries.push((format!("{group}/{name}"), t));
        }
    }
    for ((group, opt), store) in OPTS.iter().zip(opts(state)).zip(stores(state)) {
        for (k, name) in store.names().iter().enumerate() {
            entries.push((format!("opt.{group}.m/{name}"), &opt.m[k]));
            entries.push((format!("opt.{group}.v/{name}"), &opt.v[k]));
        }
    }
    write_file(path, MAGIC, &meta, &entries)
}

fn write_file<M: Serialize>(path: &Path, magic: &[u8; 4], meta: &M, entries: &[(String, &Tensor<f32>)]) -> Result<()> {
    let json = serde_json::to_string(meta).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut w = Writer::default();
    w.bytes(magic);
    w.u16(CHECKPOINT_VERSION);
    let start = w.buf.len();
    w.str(&json);
    w.crc_since(start);
    w.u32(entries.len() as u32);
    for (name, t) in entries {
        put_tensor(&mut w, name, t);
    }
    write_atomic(path, &w.buf)
}

fn read_file_table<M: for<'de> Deserialize<'de>>(path: &Path, magic: &[u8; 4]) -> Result<(M, Table)> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(path, &bytes);
    r.magic(magic)?;
    r.version(CHECKPOINT_VERSION)?;
    let start = r.pos;
    let json = r.str("metadata")?;
    r.check_crc(start, "metadata")?;
    let meta: M = serde_json::from_str(&json).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        what: "metadata".into(),
        msg: e.to_string(),
    })?;
    let count = r.u32("tensor table")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let what = format!("tensor {i}");
        let start = r.pos;
        let name = r.str(&what)?;
        let nd = r.u8(&what)? as usize;
        let mut shape = Vec::with_capacity(nd);
        for _ in 0..nd {
            shape.push(r.u32(&what)? as usize);
        }
        let n = shape.iter().product();
        let data = r.f32s(n, &what)?;
        r.check_crc(start, &format!("tensor {i} ({name})"))?;
        entries.push((name, Tensor::new(&shape, data)?));
    }
    if r.remaining() > 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            what: "tensor table".into(),
            msg: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok((meta, Table { entries }))
}

struct Table {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Table {
    fn group(&self, prefix: &str) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let p = format!("{prefix}/");
        for (name, t) in &self.entries {
            if let Some(rest) = name.strip_prefix(&p) {
                store.push(rest, t.clone());
            }
        }
        store
    }
}

fn restore<T>(what: &str, path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Mismatch(m) => Error::Mismatch(format!("{}: {what}: {m}", path.display())),
        e => e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let (meta, table): (Meta, Table) = read_file_table(path, MAGIC)?;
    let config = meta.config;
    let mut rng = stream_rng(meta.seed, Stream::Init, u64::MAX);

    let mut g_vis = GeneratorNet::new(config.generator_for(1), &mut rng)?;
    restore("g_vis", path, g_vis.params_mut().load_from(&table.group("g_vis")))?;
    let mut g_pol = GeneratorNet::new(config.generator_for(3), &mut rng)?;
    restore("g_pol", path, g_pol.params_mut().load_from(&table.group("g_pol")))?;
    let mut d_vis = DiscriminatorNet::new(config.discriminator_for(1), &mut rng)?;
    restore("d_vis", path, d_vis.params_mut().load_from(&table.group("d_vis")))?;
    let mut d_pol = DiscriminatorNet::new(config.discriminator_for(3), &mut rng)?;
    restore("d_pol", path, d_pol.params_mut().load_from(&table.group("d_pol")))?;
    let v = restore("v", path, FeatureNet::with_params(config.feature_config(), &table.group("v"), &mut rng))?;
    let mut a = restore(
        "a",
        path,
        AttributePredictor::with_params(config.predictor.clone(), &table.group("a"), &mut rng),
    )?;
    if meta.predictor_frozen {
        a.freeze();
    }

    let mut opt_states = Vec::with_capacity(4);
    let adam = [config.adam, config.adam, config.disc_adam, config.disc_adam];
    let params = [g_vis.params(), g_pol.params(), d_vis.params(), d_pol.params()];
    for (k, group) in OPTS.iter().enumerate() {
        let mut st = AdamState::new(adam[k], params[k].tensors());
        let m = table.group(&format!("opt.{group}.m"));
        let v = table.group(&format!("opt.{group}.v"));
        let mut ms = ParamStore::new();
        let mut vs = ParamStore::new();
        for (name, t) in params[k].names().iter().zip(params[k].tensors()) {
            ms.push(name.clone(), Tensor::zeros(t.shape()));
            vs.push(name.clone(), Tensor::zeros(t.shape()));
        }
        restore(&format!("opt.{group}"), path, ms.load_from(&m))?;
        restore(&format!("opt.{group}"), path, vs.load_from(&v))?;
        st.m = ms.tensors().to_vec();
        st.v = vs.tensors().to_vec();
        st.t = meta.adam_t[k];
        opt_states.push(st);
    }
    let mut it = opt_states.into_iter();
    Ok(TrainState {
        step: meta.step,
        config,
        g_vis,
        g_pol,
        d_vis,
        d_pol,
        v,
        a,
        opt_g_vis: it.next().unwrap(),
        opt_g_pol: it.next().unwrap(),
        opt_d_vis: it.next().unwrap(),
        opt_d_pol: it.next().unwrap(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictorMeta {
    config: PredictorConfig,
}

/// Writes a pretrained attribute predictor on its own.
pub fn save_predictor(path: &Path, a: &AttributePredictor<f32>) -> Result<()> {
    let meta = PredictorMeta {
        config: a.config().clone(),
    };
    let store = a.params();
    let entries: Vec<(String, &Tensor<f32>)> = store.names().iter().cloned().zip(store.tensors()).collect();
    write_file(path, PREDICTOR_MAGIC, &meta, &entries)
}

/// Reads a predictor written by [`save_predictor`]; it comes back frozen.
pub fn load_predictor(path: &Path) -> Result<AttributePredictor<f32>> {
    let (meta, table): (PredictorMeta, Table) = read_file_table(path, PREDICTOR_MAGIC)?;
    let mut store = ParamStore::new();
    for (name, t) in table.entries {
        store.push(name, t);
    }
    let mut rng = stream_rng(0, Stream::Init, u64::MAX);
    let mut a = restore("a", path, AttributePredictor::with_params(meta.config, &store, &mut rng))?;
    a.freeze();
    Ok(a)
}
