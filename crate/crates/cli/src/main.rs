//! `agcgan`: dataset generation, training, evaluation and export.
//!
//! Settings resolve in three layers: built-in defaults (the benchmark preset),
//! then the JSON file given with `--config`, then command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agc_core::data::{
    generate_synthetic_dataset, load_dataset, save_dataset, write_atomic, Dataset, Split, SynthConfig,
    ATTRIBUTE_NAMES,
};
use agc_core::eval::{evaluate, export_embeddings, synthesize, write_report, EvalConfig};
use agc_core::train::{
    load_checkpoint, load_predictor, pretrain_for, resolve_config, save_predictor, train, Ablation, TrainConfig,
    TrainState,
};
use agc_core::Error;
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Parser, Debug)]
#[command(name = "agcgan", version, about = "Attribute-guided coupled GAN for polarimetric-to-visible face matching")]
struct Cli {
    /// Master seed; every random sub-stream derives from it [default: 0, or the config file's]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file with optional "seed", "data", "train" and "eval" sections
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads for data-parallel kernels; 0 uses every core
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic paired visible/polarimetric dataset
    GenData(GenData),
    /// Pretrain the attribute predictor on visible images
    PretrainAttr(PretrainAttr),
    /// Train the coupled generators
    Train(TrainCmd),
    /// Identification, verification and attribute metrics of a checkpoint
    Eval(EvalCmd),
    /// Per-image attribute probabilities from the Pol-GAN heads
    PredictAttrs(PredictAttrs),
    /// Visible and polarimetric embeddings of every test sample
    ExportEmbeddings(ExportEmbeddings),
}

#[derive(Args, Debug)]
struct GenData {
    /// Number of identities [default: 20]
    #[arg(long)]
    identities: Option<usize>,
    /// Samples per identity [default: 6]
    #[arg(long)]
    per_id: Option<usize>,
    /// Image side in pixels, a power of two >= 32 [default: 64]
    #[arg(long)]
    size: Option<usize>,
    /// Additive noise standard deviation [default: 0.03]
    #[arg(long)]
    noise: Option<f64>,
    /// Polarimetric degradation strength, 0 for none [default: 0]
    #[arg(long)]
    degradation: Option<f64>,
    /// Fraction of identities held out for testing [default: 0.5]
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset file [default: <out>/dataset.agcd]
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainAttr {
    #[command(flatten)]
    data: DataArg,
    /// Pretraining steps [default: 300]
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArg,
    /// Loss setting: full, no-attr or cpl-e [default: full]
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Training steps [default: 400]
    #[arg(long)]
    steps: Option<u64>,
    /// Write a checkpoint every N steps, 0 for the final one only [default: 0]
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<u64>,
    /// Pretrained attribute predictor from pretrain-attr; pretrains one when absent
    #[arg(long, value_name = "FILE")]
    predictor: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckpointArg {
    /// Checkpoint file written by train
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArg,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[command(flatten)]
    input: CheckpointArg,
    /// Match polar embeddings against visible embeddings instead of pixels
    #[arg(long)]
    embedding_matching: bool,
    /// Skip the four attribute-prediction scenarios
    #[arg(long)]
    no_attributes: bool,
    /// Largest CMC rank [default: gallery size]
    #[arg(long, value_name = "K")]
    max_rank: Option<usize>,
}

#[derive(Args, Debug)]
struct PredictAttrs {
    #[command(flatten)]
    input: CheckpointArg,
    /// Split to predict: train or test [default: test]
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
}

#[derive(Args, Debug)]
struct ExportEmbeddings {
    #[command(flatten)]
    input: CheckpointArg,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}, expected train or test")),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    data: SynthConfig,
    train: TrainConfig,
    eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SynthConfig::default(),
            train: TrainConfig::benchmark(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    let mut value = serde_json::to_value(RunConfig::default()).map_err(|e| invalid(e.to_string()))?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: p.to_path_buf(),
            what: "config".into(),
            msg: e.to_string(),
        })?;
        merge(&mut value, file);
    }
    serde_json::from_value(value).map_err(|e| Error::Malformed {
        path: path.map(Path::to_path_buf).unwrap_or_default(),
        what: "config".into(),
        msg: e.to_string(),
    })
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), Error> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| invalid(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

struct Ctx {
    out: PathBuf,
    config: RunConfig,
}

impl Ctx {
    fn data_path(&self, arg: &DataArg) -> PathBuf {
        arg.data.clone().unwrap_or_else(|| self.out.join("dataset.agcd"))
    }

    fn snapshot(&self, command: &str, extra: Value) -> Result<(), Error> {
        let mut v = serde_json::to_value(&self.config).map_err(|e| invalid(e.to_string()))?;
        if let Value::Object(m) = &mut v {
            m.insert("command".into(), Value::String(command.into()));
            m.insert("arguments".into(), extra);
        }
        write_json(&self.out.join(format!("{command}.config.json")), &v)
    }
}

/// Loads a checkpoint and the dataset preprocessed the way it was trained.
fn checkpoint_and_data(ctx: &Ctx, input: &CheckpointArg) -> Result<(TrainState, Dataset), Error> {
    let state = load_checkpoint(&input.checkpoint)?;
    let raw = load_dataset(&ctx.data_path(&input.data))?;
    let ds = raw.preprocess(&state.config.preprocess)?;
    let want = (state.config.predictor.height, state.config.predictor.width);
    if (ds.manifest.height, ds.manifest.width) != want {
        return Err(Error::Mismatch(format!(
            "{}: checkpoint was trained on {}x{} images, dataset has {}x{}",
            input.checkpoint.display(),
            want.0,
            want.1,
            ds.manifest.height,
            ds.manifest.width
        )));
    }
    Ok((state, ds))
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.data.seed = config.seed;
    config.train.seed = config.seed;
    config.eval.seed = config.seed;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::Io {
        path: cli.out.clone(),
        source: e,
    })?;
    let mut ctx = Ctx { out: cli.out, config };

    match cli.command {
        Command::GenData(a) => {
            let d = &mut ctx.config.data;
            if let Some(v) = a.identities {
                d.identities = v;
            }
            if let Some(v) = a.per_id {
                d.samples_per_identity = v;
            }
            if let Some(v) = a.size {
                d.height = v;
                d.width = v;
            }
            if let Some(v) = a.noise {
                d.noise = v;
            }
            if let Some(v) = a.degradation {
                d.degradation = v;
            }
            if let Some(v) = a.test_fraction {
                d.test_fraction = v;
            }
            ctx.snapshot("gen-data", Value::Null)?;
            let ds = generate_synthetic_dataset(&ctx.config.data)?;
            let path = ctx.out.join("dataset.agcd");
            save_dataset(&path, &ds)?;
            println!(
                "wrote {} ({} identities, {} samples)",
                path.display(),
                ds.manifest.identities,
                ds.manifest.samples
            );
        }
        Command::PretrainAttr(a) => {
            if let Some(v) = a.steps {
                ctx.config.train.pretrain.steps = v;
            }
            let data = ctx.data_path(&a.data);
            ctx.snapshot("pretrain-attr", serde_json::json!({ "data": path_value(&data) }))?;
            let raw = load_dataset(&data)?;
            let cfg = resolve_config(&raw, &ctx.config.train)?;
            let prepared = raw.preprocess(&cfg.preprocess)?;
            let (a, report) = pretrain_for(&raw, &prepared, &cfg)?;
            let path = ctx.out.join("predictor.agcp");
            save_predictor(&path, &a)?;
            write_json(&ctx.out.join("pretrain_report.json"), &report)?;
            println!("wrote {} (held-out mean accuracy {:.4})", path.display(), report.held_out_mean);
        }
        Command::Train(a) => {
            let t = &mut ctx.config.train;
            if let Some(v) = a.ablation {
                t.ablation = v;
            }
            if let Some(v) = a.steps {
                t.steps = v;
            }
            if let Some(v) = a.checkpoint_every {
                t.checkpoint_every = v;
            }
            let data = ctx.data_path(&a.data);
            ctx.snapshot(
                "train",
                serde_json::json!({
                    "data": path_value(&data),
                    "predictor": a.predictor.as_deref().map(path_value),
                }),
            )?;
            let raw = load_dataset(&data)?;
            let state = match &a.predictor {
                None => train(&raw, &ctx.config.train, Some(&ctx.out))?.state,
                Some(p) => {
                    let cfg = resolve_config(&raw, &ctx.config.train)?;
                    let pred = load_predictor(p)?;
                    if pred.config() != &cfg.predictor {
                        return Err(Error::Mismatch(format!(
                            "{}: predictor configuration {:?} differs from the training configuration {:?}",
                            p.display(),
                            pred.config(),
                            cfg.predictor
                        )));
                    }
                    let prepared = raw.preprocess(&cfg.preprocess)?;
                    let mut state = TrainState::new(cfg.clone(), pred)?;
                    state.run(&prepared, cfg.steps, Some(&ctx.out))?;
                    state
                }
            };
            println!(
                "trained {} steps ({}), checkpoints and loss_history.csv in {}",
                state.step,
                state.config.ablation,
                ctx.out.display()
            );
        }
        Command::Eval(a) => {
            let e = &mut ctx.config.eval;
            if a.embedding_matching {
                e.embedding_matching = true;
            }
            if a.no_attributes {
                e.attribute_scenarios = false;
            }
            if a.max_rank.is_some() {
                e.max_rank = a.max_rank;
            }
            let data = ctx.data_path(&a.input.data);
            ctx.snapshot(
                "eval",
                serde_json::json!({ "checkpoint": path_value(&a.input.checkpoint), "data": path_value(&data) }),
            )?;
            let (state, ds) = checkpoint_and_data(&ctx, &a.input)?;
            let report = evaluate(&state, &ds, &ctx.config.eval)?;
            for p in write_report(&ctx.out, &report)? {
                info!("wrote {}", p.display());
            }
            println!("rank-1 {:.4}  AUC {:.4}", report.rank1, report.auc);
            for s in &report.attributes {
                println!("scenario {} ({}): mean attribute accuracy {:.4}", s.scenario, s.name, s.mean);
            }
        }
        Command::PredictAttrs(a) => {
            let split = a.split.unwrap_or(Split::Test);
            let data = ctx.data_path(&a.input.data);
            ctx.snapshot(
                "predict-attrs",
                serde_json::json!({
                    "checkpoint": path_value(&a.input.checkpoint),
                    "data": path_value(&data),
                    "split": if split == Split::Train { "train" } else { "test" },
                }),
            )?;
            let (state, ds) = checkpoint_and_data(&ctx, &a.input)?;
            let idx = ds.split_indices(split);
            let syn = synthesize(&state.g_pol, &ds.polar_batch(&idx)?, ctx.config.eval.seed)?;
            let t = ATTRIBUTE_NAMES.len();
            let mut csv = String::from("sample,identity");
            for n in ATTRIBUTE_NAMES {
                let _ = write!(csv, ",{n}");
            }
            csv.push('\n');
            for (row, &i) in idx.iter().enumerate() {
                let _ = write!(csv, "{},{}", i, ds.samples[i].identity);
                for &x in &syn.logits.data()[row * t..(row + 1) * t] {
                    let _ = write!(csv, ",{}", 1.0 / (1.0 + (-x).exp()));
                }
                csv.push('\n');
            }
            let path = ctx.out.join("attribute_probabilities.csv");
            write_atomic(&path, csv.as_bytes())?;
            println!("wrote {} ({} images)", path.display(), idx.len());
        }
        Command::ExportEmbeddings(a) => {
            let data = ctx.data_path(&a.input.data);
            ctx.snapshot(
                "export-embeddings",
                serde_json::json!({ "checkpoint": path_value(&a.input.checkpoint), "data": path_value(&data) }),
            )?;
            let (state, ds) = checkpoint_and_data(&ctx, &a.input)?;
            let table = export_embeddings(&state, &ds, ctx.config.eval.seed)?;
            let path = ctx.out.join("embeddings.csv");
            write_atomic(&path, table.to_csv().as_bytes())?;
            let (g, i) = table.mean_cross_modal_distances();
            println!(
                "wrote {} ({} rows); mean genuine distance {g:.4}, impostor {i:.4}",
                path.display(),
                table.rows.len()
            );
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: kind=invalid-argument msg={}", one_line(&e.to_string()));
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
