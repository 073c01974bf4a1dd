//! Alternating optimization: an E-step fits the estimator (theta) to
//! detached content/identity pairs, then an M-step updates every other block
//! (phi') under reconstruction + weighted contrastive + weighted MI terms.
//!
//! Each utterance gets its own graph so the per-item forward and backward
//! passes run under [`ExecMode`]; the batch-coupled terms live in a small
//! second graph over stacked embeddings whose input gradients are seeded back
//! into the per-item graphs. Gradients are reduced in batch order, so
//! sequential and parallel runs are bit-identical.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Container, DType};
use crate::corpus::loader::{iter_batches, mix_seed, Batch};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::exec::{map_slice, ExecMode};
use crate::losses::{self, check_nonzero_rows};
use crate::miest;
use crate::model::{self, Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Block, GradStore, ParamStore, Tape};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_clip: f64,
    pub lambda_mi: f64,
    /// Constant estimator learning rate.
    pub theta_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_frac: f64,
    pub hold_frac: f64,
    pub decay_frac: f64,
    pub total_updates: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip for the M-step; `0` disables clipping.
    pub grad_clip: f64,
    pub e_steps: usize,
    pub freeze_encoders: bool,
    /// Face images per utterance per step.
    pub max_images: usize,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_clip: 0.1,
            lambda_mi: 0.01,
            theta_lr: 1e-3,
            peak_lr: 1e-4,
            final_lr: 5e-6,
            warmup_frac: 0.05,
            hold_frac: 0.10,
            decay_frac: 0.85,
            total_updates: 2000,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            e_steps: 1,
            freeze_encoders: false,
            max_images: 16,
            temperature: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_clip >= 0.0 && self.lambda_mi >= 0.0) {
            return bad(format!("loss weights must be >= 0 (lambda_clip={}, lambda_mi={})", self.lambda_clip, self.lambda_mi));
        }
        let fracs = [self.warmup_frac, self.hold_frac, self.decay_frac];
        if fracs.iter().any(|f| !(*f >= 0.0)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("schedule fractions {fracs:?} must be non-negative and sum to 1"));
        }
        if self.total_updates == 0 {
            return bad("total_updates must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.batch_size < 2 && (self.lambda_clip > 0.0 || self.lambda_mi > 0.0) {
            return bad("batch_size must be at least 2 when lambda_clip or lambda_mi is positive".into());
        }
        for (name, v) in [("theta_lr", self.theta_lr), ("peak_lr", self.peak_lr), ("final_lr", self.final_lr)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment coefficients must lie in [0, 1)".into());
        }
        if self.max_images == 0 {
            return bad("max_images must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if self.e_steps == 0 {
            return bad("e_steps must be at least 1".into());
        }
        Ok(())
    }

    fn stage_steps(&self) -> (u64, u64) {
        let t = self.total_updates as f64;
        let warm = (self.warmup_frac * t).round() as u64;
        let hold = (self.hold_frac * t).round() as u64;
        (warm.min(self.total_updates), hold.min(self.total_updates - warm.min(self.total_updates)))
    }
}

/// Learning rate of phi' at `step`: linear ramp from 0 to the peak, a hold,
/// then linear decay that reaches the final rate at `total_updates`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step >= cfg.total_updates {
        return Err(Error::Invalid(format!("step {step} outside schedule of {} updates", cfg.total_updates)));
    }
    let (warm, hold) = cfg.stage_steps();
    if step < warm {
        return Ok(cfg.peak_lr * step as f64 / warm as f64);
    }
    if step < warm + hold {
        return Ok(cfg.peak_lr);
    }
    let decay = cfg.total_updates - warm - hold;
    let progress = (step - warm - hold) as f64 / decay as f64;
    Ok(cfg.peak_lr + (cfg.final_lr - cfg.peak_lr) * progress)
}

/// JSON has no NaN; values that were not computed are written as `null`.
mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One line of the metrics stream. Components that were not computed in a
/// step are NaN in memory and `null` on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(with = "nullable")]
    pub total: f64,
    #[serde(with = "nullable")]
    pub rec: f64,
    #[serde(with = "nullable")]
    pub afclip: f64,
    #[serde(with = "nullable")]
    pub mi: f64,
    /// Estimator loss before its update.
    #[serde(with = "nullable")]
    pub e_step: f64,
    pub lr_phi: f64,
    pub lr_theta: f64,
    /// Pre-clip global gradient norm of the M-step.
    #[serde(with = "nullable")]
    pub grad_norm: f64,
}

/// Which halves of a step run; both in normal training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepParts {
    pub e_step: bool,
    pub m_step: bool,
}

impl StepParts {
    pub const BOTH: StepParts = StepParts { e_step: true, m_step: true };
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub config: TrainConfig,
    pub theta_opt: AdamW,
    pub phi_opt: AdamW,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepMetrics>,
}

fn phi_trainable(freeze_encoders: bool) -> impl Fn(Block) -> bool {
    move |b: Block| !b.is_theta() && !(freeze_encoders && b.is_encoder())
}

impl TrainState {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, config.seed)?;
        let theta_cfg = AdamWConfig {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            clip_norm: None,
        };
        let phi_cfg = AdamWConfig { clip_norm: (config.grad_clip > 0.0).then_some(config.grad_clip), ..theta_cfg };
        let theta_ids = model.params.ids_where(Block::is_theta);
        let phi_ids = model.params.ids_where(phi_trainable(config.freeze_encoders));
        let theta_opt = AdamW::new(theta_cfg, &model.params, theta_ids);
        let phi_opt = AdamW::new(phi_cfg, &model.params, phi_ids);
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x7EA1]));
        Ok(Self { model, config, theta_opt, phi_opt, step: 0, rng, history: Vec::new() })
    }

    pub fn params(&self) -> &ParamStore {
        &self.model.params
    }

    /// One E-step followed by one M-step on `batch`.
    pub fn train_step(&mut self, batch: &Batch, mode: ExecMode) -> Result<StepMetrics> {
        self.train_step_parts(batch, mode, StepParts::BOTH)
    }

    /// Like [`train_step`](Self::train_step) with either half optionally
    /// disabled; a disabled half computes nothing and leaves its parameters
    /// untouched.
    pub fn train_step_parts(&mut self, batch: &Batch, mode: ExecMode, parts: StepParts) -> Result<StepMetrics> {
        if batch.len() != self.config.batch_size {
            return Err(Error::Invalid(format!(
                "batch has {} utterances, configuration expects {}",
                batch.len(),
                self.config.batch_size
            )));
        }
        if self.step >= self.config.total_updates {
            return Err(Error::Invalid(format!("training already finished {} updates", self.step)));
        }
        let step = self.step;
        let lr_phi = lr_at(step, &self.config)?;
        let lr_theta = self.config.theta_lr;
        let negatives = miest::sample_negatives(batch.len(), &mut self.rng);
        let nonfinite = |component: &str| Error::NonFinite { component: component.to_string(), step };

        let mut e_loss = f64::NAN;
        if parts.e_step {
            let detached = detached_pairs(&self.model, batch, mode);
            for _ in 0..self.config.e_steps {
                let (loss, grads) = e_step_grads(&self.model, &detached, mode);
                if !loss.is_finite() {
                    return Err(nonfinite("e_step"));
                }
                if e_loss.is_nan() {
                    e_loss = loss;
                }
                self.theta_opt.update(&mut self.model.params, &grads, lr_theta);
            }
        }

        let mut out = StepMetrics {
            step,
            total: f64::NAN,
            rec: f64::NAN,
            afclip: f64::NAN,
            mi: f64::NAN,
            e_step: e_loss,
            lr_phi,
            lr_theta,
            grad_norm: f64::NAN,
        };
        if parts.m_step {
            let m = m_step_grads(&self.model, &self.config, batch, &negatives, mode)?;
            out.rec = m.rec;
            out.afclip = m.afclip;
            out.mi = m.mi;
            out.total = m.total;
            for (name, v) in [("rec", m.rec), ("afclip", m.afclip), ("mi", m.mi), ("total", m.total)] {
                let active = match name {
                    "afclip" => self.config.lambda_clip > 0.0,
                    "mi" => self.config.lambda_mi > 0.0,
                    _ => true,
                };
                if active && !v.is_finite() {
                    return Err(nonfinite(name));
                }
            }
            let norm = m.grads.norm(&self.phi_opt.ids);
            if !norm.is_finite() {
                return Err(nonfinite("gradient"));
            }
            out.grad_norm = self.phi_opt.update(&mut self.model.params, &m.grads, lr_phi);
        }
        self.step += 1;
        self.history.push(out.clone());
        Ok(out)
    }

    pub fn theta_ids(&self) -> &[usize] {
        &self.theta_opt.ids
    }

    pub fn phi_ids(&self) -> &[usize] {
        &self.phi_opt.ids
    }

    /// Full training state in double precision.
    pub fn to_container(&self) -> Result<Container> {
        let p = &self.model.params;
        let names = |ids: &[usize]| ids.iter().map(|i| p.name(*i).to_string()).collect::<Vec<_>>();
        let meta = serde_json::json!({
            "kind": "train",
            "model_config": self.model.config,
            "train_config": self.config,
            "step": self.step,
            "rng": self.rng,
            "history": self.history,
            "theta_opt": {"step": self.theta_opt.step, "ids": names(&self.theta_opt.ids), "config": self.theta_opt.config},
            "phi_opt": {"step": self.phi_opt.step, "ids": names(&self.phi_opt.ids), "config": self.phi_opt.config},
        });
        let mut blocks: Vec<(String, Matrix)> = p.iter().map(|(n, m)| (format!("param/{n}"), m.clone())).collect();
        for (tag, opt) in [("theta", &self.theta_opt), ("phi", &self.phi_opt)] {
            for (slot, id) in opt.ids.iter().enumerate() {
                blocks.push((format!("{tag}.m/{}", p.name(*id)), opt.m[slot].clone()));
                blocks.push((format!("{tag}.v/{}", p.name(*id)), opt.v[slot].clone()));
            }
        }
        Ok(Container { meta, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path, DType::F64)
    }

    /// Restores a training checkpoint. When `expected` is given the stored
    /// model configuration must equal it.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        Self::from_container(&Container::read(path)?, expected)
    }

    pub fn from_container(c: &Container, expected: Option<&ModelConfig>) -> Result<Self> {
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("train") {
            return Err(Error::Checkpoint("not a training checkpoint".into()));
        }
        let field = |name: &str| {
            c.meta.get(name).cloned().ok_or_else(|| Error::Checkpoint(format!("checkpoint header lacks {name}")))
        };
        let parse_err = |e: serde_json::Error| Error::Checkpoint(format!("corrupt checkpoint header: {e}"));
        let model_config: ModelConfig = serde_json::from_value(field("model_config")?).map_err(parse_err)?;
        if let Some(want) = expected {
            if *want != model_config {
                return Err(Error::Checkpoint("checkpoint model configuration differs from the requested one".into()));
            }
        }
        let config: TrainConfig = serde_json::from_value(field("train_config")?).map_err(parse_err)?;
        let mut state = TrainState::new(model_config, config)?;
        let params = restore_params(&state.model.params, c, "param/")?;
        state.model.params = params;
        state.step = serde_json::from_value(field("step")?).map_err(parse_err)?;
        state.rng = serde_json::from_value(field("rng")?).map_err(parse_err)?;
        state.history = serde_json::from_value(field("history")?).map_err(parse_err)?;
        for (tag, opt) in [("theta", &mut state.theta_opt), ("phi", &mut state.phi_opt)] {
            let meta = field(&format!("{tag}_opt"))?;
            let ids: Vec<String> =
                serde_json::from_value(meta.get("ids").cloned().unwrap_or_default()).map_err(parse_err)?;
            let p = &state.model.params;
            if ids.iter().map(String::as_str).ne(opt.ids.iter().map(|i| p.name(*i))) {
                return Err(Error::Checkpoint(format!("{tag} optimizer covers a different parameter set")));
            }
            opt.step = serde_json::from_value(meta.get("step").cloned().unwrap_or_default()).map_err(parse_err)?;
            for (slot, name) in ids.iter().enumerate() {
                for (kind, dst) in [("m", &mut opt.m[slot]), ("v", &mut opt.v[slot])] {
                    let key = format!("{tag}.{kind}/{name}");
                    let src = c.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing block {key}")))?;
                    if src.shape() != dst.shape() {
                        return Err(Error::Checkpoint(format!("block {key} has shape {:?}", src.shape())));
                    }
                    *dst = src.clone();
                }
            }
        }
        Ok(state)
    }

    /// Writes the single-precision inference export, which omits the
    /// estimator and the speech path.
    pub fn export_inference(&self, path: &Path) -> Result<()> {
        export_inference(&self.model, path)
    }
}

fn restore_params(template: &ParamStore, c: &Container, prefix: &str) -> Result<ParamStore> {
    let mut out = template.clone();
    for id in 0..template.len() {
        let key = format!("{prefix}{}", template.name(id));
        let src = c.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing block {key}")))?;
        if src.shape() != template.value(id).shape() {
            return Err(Error::Checkpoint(format!("block {key} has shape {:?}", src.shape())));
        }
        *out.value_mut(id) = src.clone();
    }
    Ok(out)
}

fn inference_block(b: Block) -> bool {
    !matches!(b, Block::Estimator | Block::Speech | Block::AdapterA)
}

pub fn export_inference(model: &Model, path: &Path) -> Result<()> {
    let meta = serde_json::json!({"kind": "inference", "model_config": model.config});
    let blocks = model
        .params
        .iter()
        .filter(|(n, _)| Block::of(n).is_some_and(inference_block))
        .map(|(n, m)| (format!("param/{n}"), m.clone()))
        .collect();
    Container { meta, blocks }.write(path, DType::F32)
}

/// Loads a model from either a training checkpoint or an inference export.
/// Exports lack the estimator and speech path.
pub fn load_model(path: &Path) -> Result<Model> {
    let c = Container::read(path)?;
    let config: ModelConfig = serde_json::from_value(c.meta.get("model_config").cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint header: {e}")))?;
    config.validate()?;
    let template = config.init_params(0)?;
    let params = match c.meta.get("kind").and_then(|k| k.as_str()) {
        Some("train") => restore_params(&template, &c, "param/")?,
        Some("inference") => restore_params(&template.filtered(inference_block), &c, "param/")?,
        _ => return Err(Error::Checkpoint("unknown checkpoint kind".into())),
    };
    Ok(Model { config, params })
}

struct Detached {
    content: Matrix,
    identity: Matrix,
}

fn detached_pairs(model: &Model, batch: &Batch, mode: ExecMode) -> Vec<Detached> {
    map_slice(mode, &batch.items, |item| {
        let mut t = Tape::new(&model.params, |_| false);
        let v = t.g.constant(item.utt.video.clone());
        let c = model::encode_content(&mut t, &model.config, v);
        let f = t.g.constant(item.faces.clone());
        let e = model::encode_faces(&mut t, f);
        Detached { content: t.g.value(c).clone(), identity: t.g.value(e).clone() }
    })
}

/// Estimator loss `-(1/N) sum loglik` and its theta gradient.
fn e_step_grads(model: &Model, pairs: &[Detached], mode: ExecMode) -> (f64, GradStore) {
    let n = pairs.len() as f64;
    let per_item = map_slice(mode, pairs, |pair| {
        let mut t = Tape::new(&model.params, Block::is_theta);
        let c = t.g.constant(pair.content.clone());
        let (mu, lv) = miest::condition(&mut t, &model.config.estimator, c);
        let y = t.g.constant(pair.identity.clone());
        let ll = miest::loglik_rows(&mut t.g, y, mu, lv);
        let value = t.g.value(ll).item();
        let grads = t.g.backward_seeded(&[(ll, Matrix::scalar(-1.0 / n))]);
        (value, t.param_grads(&grads))
    });
    let mut total = GradStore::empty(model.params.len());
    let mut ll_sum = 0.0;
    for (v, g) in &per_item {
        ll_sum += v;
        total.merge(g);
    }
    (-ll_sum / n, total)
}

struct ItemGraph<'a> {
    tape: Tape<'a>,
    rec: Var,
    audio: Var,
    face: Var,
    mu: Var,
    lv: Var,
}

struct MStep {
    rec: f64,
    afclip: f64,
    mi: f64,
    total: f64,
    grads: GradStore,
}

fn item_graph<'a>(model: &'a Model, freeze: bool, video: &Matrix, faces: &Matrix, mel: &Matrix) -> ItemGraph<'a> {
    let cfg = &model.config;
    let mut t = Tape::new(&model.params, phi_trainable(freeze));
    let v = t.g.constant(video.clone());
    let content = model::encode_content(&mut t, cfg, v);
    let f = t.g.constant(faces.clone());
    let face = model::encode_faces(&mut t, f);
    let m = t.g.constant(mel.clone());
    let audio = model::encode_speech(&mut t, cfg, m);
    let fused = model::fuse(&mut t, content, face);
    let pred = model::blend(&mut t, cfg, fused);
    let rec = losses::reconstruction(&mut t.g, pred, m);
    let (mu, lv) = miest::condition(&mut t, &cfg.estimator, content);
    ItemGraph { tape: t, rec, audio, face, mu, lv }
}

fn stack(items: &[ItemGraph], pick: impl Fn(&ItemGraph) -> Var) -> Matrix {
    let rows: Vec<&Matrix> = items.iter().map(|it| it.tape.g.value(pick(it))).collect();
    Matrix::vstack(&rows)
}

fn m_step_grads(model: &Model, cfg: &TrainConfig, batch: &Batch, negatives: &[usize], mode: ExecMode) -> Result<MStep> {
    let n = batch.len();
    let items = map_slice(mode, &batch.items, |item| {
        item_graph(model, cfg.freeze_encoders, &item.utt.video, &item.faces, &item.utt.mel)
    });

    let recs = stack(&items, |it| it.rec);
    let audio = stack(&items, |it| it.audio);
    let face = stack(&items, |it| it.face);
    let mu = stack(&items, |it| it.mu);
    let lv = stack(&items, |it| it.lv);

    let mut g = Graph::new();
    let r = g.leaf(recs, true);
    let a = g.leaf(audio.clone(), true);
    let f = g.leaf(face.clone(), true);
    let muv = g.leaf(mu, true);
    let lvv = g.leaf(lv, true);
    let rec = g.mean(r);
    let mut total = rec;

    let afclip_value;
    if cfg.lambda_clip > 0.0 {
        check_nonzero_rows(&audio, "audio embedding")?;
        check_nonzero_rows(&face, "facial embedding")?;
        let nodes = losses::afclip(&mut g, a, f, cfg.temperature);
        afclip_value = g.value(nodes.total).item();
        let w = g.scale(nodes.total, cfg.lambda_clip);
        total = g.add(total, w);
    } else {
        afclip_value = losses::afclip_loss(&audio, &face, cfg.temperature).map(|l| l.total).unwrap_or(f64::NAN);
    }

    let mi_node = miest::mi_bound(&mut g, f, muv, lvv, negatives);
    let mi_value = g.value(mi_node).item();
    if cfg.lambda_mi > 0.0 {
        let w = g.scale(mi_node, cfg.lambda_mi);
        total = g.add(total, w);
    }
    let rec_value = g.value(rec).item();
    let total_value = g.value(total).item();

    let mut grads = g.backward(total);
    let take = |grads: &mut crate::autograd::Grads, v: Var, cols: usize| {
        grads.take(v).unwrap_or_else(|| Matrix::zeros(n, cols))
    };
    let d = model.config.d;
    let dr = take(&mut grads, r, 1);
    let da = take(&mut grads, a, d);
    let df = take(&mut grads, f, d);
    let dmu = take(&mut grads, muv, d);
    let dlv = take(&mut grads, lvv, d);
    let uses_audio = cfg.lambda_clip > 0.0;
    let uses_estimator = cfg.lambda_mi > 0.0;

    let pieces: Vec<(usize, ItemGraph)> = items.into_iter().enumerate().collect();
    let per_item = map_slice(mode, &pieces, |(i, it)| {
        let row = |m: &Matrix| Matrix::row_vector(m.row(*i));
        let mut seeds = vec![(it.rec, row(&dr))];
        if uses_audio {
            seeds.push((it.audio, row(&da)));
        }
        if uses_audio || uses_estimator {
            seeds.push((it.face, row(&df)));
        }
        if uses_estimator {
            seeds.push((it.mu, row(&dmu)));
            seeds.push((it.lv, row(&dlv)));
        }
        let grads = it.tape.g.backward_seeded(&seeds);
        it.tape.param_grads(&grads)
    });
    let mut total_grads = GradStore::empty(model.params.len());
    for gs in &per_item {
        total_grads.merge(gs);
    }
    Ok(MStep { rec: rec_value, afclip: afclip_value, mi: mi_value, total: total_value, grads: total_grads })
}

/// Number of full batches per epoch; trailing utterances that do not fill a
/// batch are skipped for that epoch.
pub fn batches_per_epoch(num_utterances: usize, batch_size: usize) -> usize {
    num_utterances / batch_size
}

/// The batch consumed at `step`, so a resumed run sees the same data as an
/// uninterrupted one.
pub fn batch_for_step<'a>(
    utterances: &'a [Utterance],
    indices: &[usize],
    cfg: &TrainConfig,
    step: u64,
) -> Result<Batch<'a>> {
    let per_epoch = batches_per_epoch(indices.len(), cfg.batch_size) as u64;
    if per_epoch == 0 {
        return Err(Error::Config(format!(
            "training split has {} utterances, fewer than batch_size {}",
            indices.len(),
            cfg.batch_size
        )));
    }
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    Ok(iter_batches(utterances, indices, cfg.batch_size, cfg.max_images, cfg.seed, epoch)
        .nth(pos)
        .expect("position within epoch"))
}

/// Runs steps until `until` (capped at `total_updates`), calling `on_step`
/// after each one.
pub fn train_until(
    state: &mut TrainState,
    utterances: &[Utterance],
    indices: &[usize],
    until: u64,
    mode: ExecMode,
    mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<()>,
) -> Result<()> {
    let until = until.min(state.config.total_updates);
    while state.step < until {
        let batch = batch_for_step(utterances, indices, &state.config, state.step)?;
        let m = state.train_step(&batch, mode)?;
        on_step(state, &m)?;
    }
    Ok(())
}

/// Appends one JSON object per line.
pub fn append_metrics(path: &Path, m: &StepMetrics) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(m).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
