//! Command-line front end.
//!
//! Every subcommand resolves its settings from an optional TOML file and
//! then applies command-line flags on top; flag names mirror the file keys
//! with `-` in place of `_`. The resolved settings are echoed to stdout and
//! written next to the outputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::write_atomic;
use crate::corpus::{generate, io, Corpus, GenConfig, Split};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::inference;
use crate::metrics::{self, ExternalEmbeddings, IdentityEmbedder, OracleEmbedder, PlanConfig, ScoredPair};
use crate::model::ModelConfig;
use crate::tensor::Matrix;
use crate::trainer::{self, load_model, TrainConfig, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) => EXIT_USAGE,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Shape(_) | Error::Data { .. } | Error::Io { .. } | Error::Json { .. } | Error::Checkpoint(_) => EXIT_DATA,
    }
}

#[derive(Parser, Debug)]
#[command(name = "muteswap", version, about = "Silent-face voice conversion on synthetic audio-visual corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData(GenDataArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Synthesize a mel from an utterance's video and its own (or given) faces.
    Synthesize(InferArgs),
    /// Convert an utterance to another speaker's identity.
    Convert(InferArgs),
    /// Interpolate between the source and target identities.
    Interpolate(InferArgs),
    /// Run the pair-based conversion evaluation.
    Evaluate(EvalArgs),
    /// Recompute EER and the DET curve from scored pairs.
    DetCurve(DetArgs),
    /// Render a mel file as a PGM image.
    PlotMel(PlotArgs),
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// TOML file with the same keys as the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long = "utts-per-speaker", alias = "utts")]
    pub utts_per_speaker: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub min_hold: Option<usize>,
    #[arg(long)]
    pub max_hold: Option<usize>,
    #[arg(long)]
    pub min_faces: Option<usize>,
    #[arg(long)]
    pub max_faces: Option<usize>,
    #[arg(long)]
    pub mel_bins: Option<usize>,
    #[arg(long)]
    pub mel_per_video_frame: Option<usize>,
    #[arg(long)]
    pub video_dim: Option<usize>,
    #[arg(long)]
    pub face_dim: Option<usize>,
    #[arg(long)]
    pub sigma_v: Option<f64>,
    #[arg(long)]
    pub sigma_f: Option<f64>,
    #[arg(long)]
    pub sigma_m: Option<f64>,
    #[arg(long)]
    pub tilt_scale: Option<f64>,
    #[arg(long)]
    pub identity_leak: Option<f64>,
    #[arg(long = "holdout-per-speaker", alias = "holdout")]
    pub holdout_per_speaker: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write a checkpoint every this many steps (0: only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Disable data parallelism.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sequential: Option<bool>,
    #[arg(long)]
    pub lambda_clip: Option<f64>,
    #[arg(long)]
    pub lambda_mi: Option<f64>,
    #[arg(long)]
    pub theta_lr: Option<f64>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub final_lr: Option<f64>,
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    #[arg(long)]
    pub hold_frac: Option<f64>,
    #[arg(long)]
    pub decay_frac: Option<f64>,
    #[arg(long)]
    pub total_updates: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub e_steps: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub freeze_encoders: Option<bool>,
    #[arg(long)]
    pub max_images: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Model width (`model.d` in the file).
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub blender_layers: Option<usize>,
    #[arg(long)]
    pub upsample: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training checkpoint or inference export.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Utterance providing the content (and the source identity).
    #[arg(long, alias = "utt")]
    pub source: Option<String>,
    /// Utterance providing the target identity.
    #[arg(long)]
    pub target: Option<String>,
    /// Face-feature `.f32` file (`K x D_f`) providing the target identity.
    #[arg(long)]
    pub target_faces: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Also write `mel.pgm`.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub pgm: Option<bool>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long = "n-sources", alias = "sources")]
    pub n_sources: Option<usize>,
    #[arg(long = "n-targets", alias = "targets")]
    pub n_targets: Option<usize>,
    /// Pairs per label.
    #[arg(long = "n-pairs", alias = "pairs")]
    pub n_pairs: Option<usize>,
    /// JSON-lines file of externally computed embeddings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sequential: Option<bool>,
}

#[derive(Args, Debug, Default)]
pub struct DetArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scored pairs as JSON lines.
    #[arg(long)]
    pub scored: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct PlotArgs {
    #[command(flatten)]
    pub common: Common,
    /// Mel `.f32` file with its shape sidecar.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

type Table = toml::Table;

fn read_table(path: Option<&Path>) -> Result<Table> {
    let Some(path) = path else { return Ok(Table::new()) };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    text.parse::<Table>().map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn set<T: Serialize>(t: &mut Table, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        t.insert(key.to_string(), toml::Value::try_from(v).expect("flag values serialize"));
    }
}

fn from_table<T: DeserializeOwned>(t: Table, what: &str) -> Result<T> {
    toml::Value::Table(t).try_into().map_err(|e| Error::Config(format!("{what}: {e}")))
}

fn common_table(c: &Common) -> Result<Table> {
    let mut t = read_table(c.config.as_deref())?;
    set(&mut t, "seed", &c.seed);
    set(&mut t, "out", &c.out.as_ref().map(|p| p.display().to_string()));
    Ok(t)
}

fn echo<T: Serialize>(command: &str, resolved: &T, out: &Path) -> Result<()> {
    let text = toml::to_string(resolved).map_err(|e| Error::Config(e.to_string()))?;
    println!("# muteswap {command}: resolved configuration\n{text}");
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(format!("{command}.config.toml")), text.as_bytes())
}

fn exec_mode(sequential: bool) -> ExecMode {
    if sequential {
        ExecMode::Sequential
    } else {
        ExecMode::available()
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Synthesize(a) => infer("synthesize", &a),
        Command::Convert(a) => infer("convert", &a),
        Command::Interpolate(a) => infer("interpolate", &a),
        Command::Evaluate(a) => evaluate(&a),
        Command::DetCurve(a) => det_curve(&a),
        Command::PlotMel(a) => plot_mel(&a),
    }
}

#[derive(Serialize, Deserialize)]
struct GenRun {
    out: PathBuf,
    #[serde(flatten)]
    gen: GenConfig,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut t = common_table(&a.common)?;
    set(&mut t, "speakers", &a.speakers);
    set(&mut t, "utts_per_speaker", &a.utts_per_speaker);
    set(&mut t, "vocab", &a.vocab);
    set(&mut t, "min_frames", &a.min_frames);
    set(&mut t, "max_frames", &a.max_frames);
    set(&mut t, "min_hold", &a.min_hold);
    set(&mut t, "max_hold", &a.max_hold);
    set(&mut t, "min_faces", &a.min_faces);
    set(&mut t, "max_faces", &a.max_faces);
    set(&mut t, "mel_bins", &a.mel_bins);
    set(&mut t, "mel_per_video_frame", &a.mel_per_video_frame);
    set(&mut t, "video_dim", &a.video_dim);
    set(&mut t, "face_dim", &a.face_dim);
    set(&mut t, "sigma_v", &a.sigma_v);
    set(&mut t, "sigma_f", &a.sigma_f);
    set(&mut t, "sigma_m", &a.sigma_m);
    set(&mut t, "tilt_scale", &a.tilt_scale);
    set(&mut t, "identity_leak", &a.identity_leak);
    set(&mut t, "holdout_per_speaker", &a.holdout_per_speaker);
    let run: GenRun = from_table(t, "gen-data")?;
    run.gen.validate()?;
    echo("gen-data", &run, &run.out)?;
    let corpus = generate(&run.gen)?;
    corpus.write(&run.out)?;
    eprintln!("wrote {} utterances of {} speakers to {}", corpus.utterances.len(), corpus.speakers.len(), run.out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrainRun {
    out: PathBuf,
    corpus: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resume: Option<PathBuf>,
    #[serde(default)]
    checkpoint_every: u64,
    #[serde(default = "default_log_every")]
    log_every: u64,
    #[serde(default)]
    sequential: bool,
}

fn default_log_every() -> u64 {
    50
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    #[serde(flatten)]
    run: &'a TrainRun,
    #[serde(flatten)]
    train: &'a TrainConfig,
    model: &'a ModelConfig,
}

const RUN_KEYS: [&str; 6] = ["out", "corpus", "resume", "checkpoint_every", "log_every", "sequential"];

fn train(a: &TrainArgs) -> Result<()> {
    let mut t = common_table(&a.common)?;
    set(&mut t, "corpus", &a.corpus.as_ref().map(|p| p.display().to_string()));
    set(&mut t, "resume", &a.resume.as_ref().map(|p| p.display().to_string()));
    set(&mut t, "checkpoint_every", &a.checkpoint_every);
    set(&mut t, "log_every", &a.log_every);
    set(&mut t, "sequential", &a.sequential);
    set(&mut t, "lambda_clip", &a.lambda_clip);
    set(&mut t, "lambda_mi", &a.lambda_mi);
    set(&mut t, "theta_lr", &a.theta_lr);
    set(&mut t, "peak_lr", &a.peak_lr);
    set(&mut t, "final_lr", &a.final_lr);
    set(&mut t, "warmup_frac", &a.warmup_frac);
    set(&mut t, "hold_frac", &a.hold_frac);
    set(&mut t, "decay_frac", &a.decay_frac);
    set(&mut t, "total_updates", &a.total_updates);
    set(&mut t, "batch_size", &a.batch_size);
    set(&mut t, "beta1", &a.beta1);
    set(&mut t, "beta2", &a.beta2);
    set(&mut t, "weight_decay", &a.weight_decay);
    set(&mut t, "grad_clip", &a.grad_clip);
    set(&mut t, "e_steps", &a.e_steps);
    set(&mut t, "freeze_encoders", &a.freeze_encoders);
    set(&mut t, "max_images", &a.max_images);
    set(&mut t, "temperature", &a.temperature);

    let mut model_t = match t.remove("model") {
        Some(toml::Value::Table(m)) => m,
        Some(_) => return Err(Error::Config("`model` must be a table".into())),
        None => Table::new(),
    };
    set(&mut model_t, "d", &a.d);
    set(&mut model_t, "heads", &a.heads);
    set(&mut model_t, "blender_layers", &a.blender_layers);
    set(&mut model_t, "upsample", &a.upsample);
    let mut run_t = Table::new();
    for k in RUN_KEYS {
        if let Some(v) = t.remove(k) {
            run_t.insert(k.to_string(), v);
        }
    }
    let run: TrainRun = from_table(run_t, "train")?;
    let cfg: TrainConfig = from_table(t, "train")?;
    cfg.validate()?;

    let corpus = Corpus::load(&run.corpus)?;
    let m = &corpus.manifest;
    for (key, value) in [
        ("video_dim", m.video_dim),
        ("face_dim", m.face_dim),
        ("mel_bins", m.mel_bins),
        ("mel_per_video_frame", m.mel_per_video_frame),
    ] {
        match model_t.get(key).and_then(toml::Value::as_integer) {
            Some(v) if v as usize != value => {
                return Err(Error::Config(format!("model.{key} = {v} but the corpus has {value}")));
            }
            _ => {
                model_t.insert(key.to_string(), toml::Value::Integer(value as i64));
            }
        }
    }
    let model_cfg: ModelConfig = from_table(model_t, "model")?;
    model_cfg.validate()?;
    echo("train", &TrainEcho { run: &run, train: &cfg, model: &model_cfg }, &run.out)?;

    let mut state = match &run.resume {
        Some(p) => {
            let s = TrainState::load(p, Some(&model_cfg))?;
            if s.config != cfg {
                return Err(Error::Config("resumed checkpoint was trained with a different configuration".into()));
            }
            s
        }
        None => TrainState::new(model_cfg, cfg)?,
    };
    let indices = corpus.manifest.indices(Split::Train);
    let mode = exec_mode(run.sequential);
    let metrics_path = run.out.join("metrics.jsonl");
    let ckpt = run.out.join("checkpoint.bin");
    let total = state.config.total_updates;
    trainer::train_until(&mut state, &corpus.utterances, &indices, total, mode, |s, m| {
        trainer::append_metrics(&metrics_path, m)?;
        if run.log_every > 0 && (m.step % run.log_every == 0 || m.step + 1 == total) {
            eprintln!(
                "step {:>6}  total {:.4}  rec {:.4}  afclip {:.4}  mi {:.4}  e_step {:.4}  lr {:.2e}",
                m.step, m.total, m.rec, m.afclip, m.mi, m.e_step, m.lr_phi
            );
        }
        if run.checkpoint_every > 0 && s.step % run.checkpoint_every == 0 {
            s.save(&ckpt)?;
        }
        Ok(())
    })?;
    state.save(&ckpt)?;
    state.export_inference(&run.out.join("model.bin"))?;
    eprintln!("saved {} and {}", ckpt.display(), run.out.join("model.bin").display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct InferRun {
    out: PathBuf,
    checkpoint: PathBuf,
    corpus: PathBuf,
    source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_faces: Option<PathBuf>,
    #[serde(default)]
    alpha: f64,
    #[serde(default)]
    pgm: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// Reads a `.f32` array addressed by its file path.
pub fn read_matrix_file(path: &Path) -> Result<Matrix> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.strip_suffix(".f32").unwrap_or(n))
        .ok_or_else(|| Error::data(path, "not a file name"))?;
    io::read_matrix(dir, name)
}

fn infer(command: &str, a: &InferArgs) -> Result<()> {
    let mut t = common_table(&a.common)?;
    set(&mut t, "checkpoint", &a.checkpoint.as_ref().map(|p| p.display().to_string()));
    set(&mut t, "corpus", &a.corpus.as_ref().map(|p| p.display().to_string()));
    set(&mut t, "source", &a.source);
    set(&mut t, "target", &a.target);
    set(&mut t, "target_faces", &a.target_faces.as_ref().map(|p| p.display().to_string()));
    set(&mut t, "alpha", &a.alpha);
    set(&mut t, "pgm", &a.pgm);
    let run: InferRun = from_table(t, command)?;
    echo(command, &run, &run.out)?;

    let model = load_model(&run.checkpoint)?;
    let corpus = Corpus::load(&run.corpus)?;
    let utt = |id: &str| {
        corpus
            .manifest
            .find(id)
            .map(|i| &corpus.utterances[i])
            .ok_or_else(|| Error::Invalid(format!("utterance {id} is not in the corpus")))
    };
    let source = utt(&run.source)?;
    let target_faces = match (&run.target, &run.target_faces) {
        (Some(_), Some(_)) => return Err(Error::Invalid("give either target or target_faces, not both".into())),
        (Some(id), None) => Some(utt(id)?.faces.clone()),
        (None, Some(p)) => Some(read_matrix_file(p)?),
        (None, None) => None,
    };
    let mel = match (command, target_faces) {
        ("synthesize", None) => inference::synthesize(&model, &source.video, &source.faces)?,
        ("synthesize", Some(f)) | ("convert", Some(f)) => inference::convert(&model, &source.video, &f)?,
        ("interpolate", Some(f)) => inference::interpolate(&model, &source.video, &source.faces, &f, run.alpha)?,
        _ => return Err(Error::Invalid(format!("{command} needs a target identity (target or target_faces)"))),
    };
    write_outputs(&run.out, &mel, run.pgm)
}

fn write_outputs(out: &Path, mel: &Matrix, pgm: bool) -> Result<()> {
    inference::write_mel(out, "mel", mel)?;
    if pgm {
        write_atomic(&out.join("mel.pgm"), &inference::render_pgm(mel))?;
    }
    eprintln!("wrote {}", io::array_path(out, "mel").display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalRun {
    out: PathBuf,
    checkpoint: PathBuf,
    corpus: PathBuf,
    #[serde(default = "default_sources")]
    n_sources: usize,
    #[serde(default = "default_targets")]
    n_targets: usize,
    #[serde(default = "default_pairs")]
    n_pairs: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embeddings: Option<PathBuf>,
    #[serde(default)]
    sequential: bool,
}

fn default_sources() -> usize {
    PlanConfig::default().n_sources
}
fn default_targets() -> usize {
    PlanConfig::default().n_targets
}
fn default_pairs() -> usize {
    PlanConfig::default().n_pairs
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Directory of cached conversions for a checkpoint and pair plan.
pub fn cache_dir(out: &Path, checkpoint_bytes: &[u8], plan_jsonl: &str) -> PathBuf {
    let key = format!("{}-{}", &sha256_hex(checkpoint_bytes)[..16], &sha256_hex(plan_jsonl.as_bytes())[..16]);
    out.join("cache").join(key)
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let mut t = common_table(&a.common)?;
    set(&mut t, "checkpoint", &a.checkpoint.as_ref().map(|p| p.display().to_string()));
    set(&mut t, "corpus", &a.corpus.as_ref().map(|p| p.display().to_string()));
    set(&mut t, "n_sources", &a.n_sources);
    set(&mut t, "n_targets", &a.n_targets);
    set(&mut t, "n_pairs", &a.n_pairs);
    set(&mut t, "embeddings", &a.embeddings.as_ref().map(|p| p.display().to_string()));
    set(&mut t, "sequential", &a.sequential);
    let run: EvalRun = from_table(t, "evaluate")?;
    echo("evaluate", &run, &run.out)?;
    let mode = exec_mode(run.sequential);

    let ckpt_bytes = fs::read(&run.checkpoint).map_err(|e| Error::io(&run.checkpoint, e))?;
    let model = load_model(&run.checkpoint)?;
    let corpus = Corpus::load(&run.corpus)?;
    let plan_cfg = PlanConfig { n_sources: run.n_sources, n_targets: run.n_targets, n_pairs: run.n_pairs, seed: run.seed };
    let plan = metrics::sample_pairs(&corpus.manifest, &plan_cfg)?;
    let plan_text = plan.to_jsonl();
    write_atomic(&run.out.join("plan.jsonl"), plan_text.as_bytes())?;

    let keys = plan.conversions();
    let cache = cache_dir(&run.out, &ckpt_bytes, &plan_text);
    fs::create_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;
    let names: Vec<String> = (0..keys.len()).map(|i| format!("conv_{i:06}")).collect();
    let missing: Vec<usize> = (0..keys.len()).filter(|i| !io::array_path(&cache, &names[*i]).exists()).collect();
    let todo: Vec<_> = missing.iter().map(|i| keys[*i].clone()).collect();
    let fresh = metrics::run_conversions(&model, &corpus.manifest, &corpus.utterances, &todo, mode)?;
    for (i, mel) in missing.iter().zip(&fresh) {
        io::write_matrix(&cache, &names[*i], mel)?;
    }
    eprintln!("{} conversions ({} cached)", keys.len(), keys.len() - missing.len());
    // Reading everything back from the cache keeps results identical whether
    // or not the conversions were cached.
    let mels = names.iter().map(|n| io::read_matrix(&cache, n)).collect::<Result<Vec<_>>>()?;

    let external = run.embeddings.as_deref().map(ExternalEmbeddings::load).transpose()?;
    let oracle = OracleEmbedder { manifest: &corpus.manifest };
    let embedder: &dyn IdentityEmbedder = match &external {
        Some(e) => e,
        None => &oracle,
    };
    let ev = metrics::evaluate_mels(&plan, keys, mels, embedder, Some((&corpus.manifest, &corpus.speakers)), mode)?;
    write_atomic(&run.out.join("scored.jsonl"), metrics::to_jsonl(&ev.scored).as_bytes())?;
    write_atomic(&run.out.join("det.csv"), ev.det.to_csv().as_bytes())?;
    io::write_json(&run.out.join("summary.json"), &ev.summary)?;
    println!("{}", serde_json::to_string_pretty(&ev.summary).expect("summary serializes"));
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DetRun {
    out: PathBuf,
    scored: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

fn det_curve(a: &DetArgs) -> Result<()> {
    let mut t = common_table(&a.common)?;
    set(&mut t, "scored", &a.scored.as_ref().map(|p| p.display().to_string()));
    let run: DetRun = from_table(t, "det-curve")?;
    echo("det-curve", &run, &run.out)?;
    let text = fs::read_to_string(&run.scored).map_err(|e| Error::io(&run.scored, e))?;
    let scored = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str::<ScoredPair>(l).map_err(|e| Error::data(&run.scored, format!("line {}: {e}", n + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (summary, det) = metrics::summarize(&scored)?;
    write_atomic(&run.out.join("det.csv"), det.to_csv().as_bytes())?;
    let report: BTreeMap<&str, f64> = [("eer", summary.eer), ("psh", summary.psh), ("psd", summary.psd)].into();
    io::write_json(&run.out.join("eer.json"), &report)?;
    println!("eer {:.6}", summary.eer);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PlotRun {
    out: PathBuf,
    input: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

fn plot_mel(a: &PlotArgs) -> Result<()> {
    let mut t = common_table(&a.common)?;
    set(&mut t, "input", &a.input.as_ref().map(|p| p.display().to_string()));
    let run: PlotRun = from_table(t, "plot-mel")?;
    echo("plot-mel", &run, &run.out)?;
    let mel = read_matrix_file(&run.input)?;
    let stem = run.input.file_stem().and_then(|s| s.to_str()).unwrap_or("mel");
    let path = run.out.join(format!("{stem}.pgm"));
    write_atomic(&path, &inference::render_pgm(&mel))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}
