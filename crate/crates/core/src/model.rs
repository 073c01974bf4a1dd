//! The trainable graph: content, facial and speech paths with their adapters,
//! identity pooling, broadcast fusion and the blender.
//!
//! Graph-building functions take a [`Tape`] so the same code serves training
//! (gradients on) and inference (plain values through [`Model`]).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Padding, Var};
use crate::error::{Error, Result};
use crate::miest::{self, EstimatorConfig};
use crate::params::{init_weight, Block, ParamStore, Tape};
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    /// Repeat each fused frame `r` times before the blender stack.
    Repeat,
    /// Run the blender at video rate and project each frame to `r` Mel rows.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Shared embedding width of content and identity embeddings.
    pub d: usize,
    pub blender_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub blender_kernel: usize,
    pub content_layers: usize,
    pub content_kernel: usize,
    /// Half-width of the content mixer's local attention window; 0 disables
    /// the mixer.
    pub mixer_window: usize,
    pub speech_kernel: usize,
    pub video_dim: usize,
    pub face_dim: usize,
    pub mel_bins: usize,
    pub mel_per_video_frame: usize,
    pub upsample: Upsample,
    pub estimator: EstimatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            blender_layers: 2,
            heads: 4,
            ff_mult: 2,
            blender_kernel: 3,
            content_layers: 2,
            content_kernel: 3,
            mixer_window: 2,
            speech_kernel: 3,
            video_dim: 32,
            face_dim: 32,
            mel_bins: 80,
            mel_per_video_frame: 4,
            upsample: Upsample::Repeat,
            estimator: EstimatorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("width d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.mel_per_video_frame == 0 {
            return bad("mel_per_video_frame must be at least 1".into());
        }
        for (name, k) in [
            ("content_kernel", self.content_kernel),
            ("speech_kernel", self.speech_kernel),
            ("blender_kernel", self.blender_kernel),
        ] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if self.content_layers == 0 || self.video_dim == 0 || self.face_dim == 0 || self.mel_bins == 0 {
            return bad("content_layers, video_dim, face_dim and mel_bins must be positive".into());
        }
        self.estimator.validate()
    }

    /// Frames on either side of `t` that can influence content row `t`.
    pub fn content_receptive_radius(&self) -> usize {
        self.content_layers * (self.content_kernel / 2) + self.mixer_window
    }

    /// Randomly initialized parameters for every block including the estimator.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = self.d;
        let zeros = |c| Matrix::zeros(1, c);
        let ones = |c| Matrix::filled(1, c, 1.0);

        for l in 0..self.content_layers {
            let fan_in = self.content_kernel * if l == 0 { self.video_dim } else { d };
            p.insert(format!("content.conv{l}.w"), init_weight(&mut rng, fan_in, d));
            p.insert(format!("content.conv{l}.b"), zeros(d));
        }
        if self.mixer_window > 0 {
            p.insert("content.mix.ln_g", ones(d));
            p.insert("content.mix.ln_b", zeros(d));
            p.insert("content.mix.wqkv", init_weight(&mut rng, d, 3 * d));
            p.insert("content.mix.wo", init_weight(&mut rng, d, d));
        }
        p.insert("adapter_v.w", init_weight(&mut rng, d, d));
        p.insert("adapter_v.b", zeros(d));

        p.insert("face.l1.w", init_weight(&mut rng, self.face_dim, d));
        p.insert("face.l1.b", zeros(d));
        p.insert("face.l2.w", init_weight(&mut rng, d, d));
        p.insert("face.l2.b", zeros(d));
        p.insert("adapter_f.w", init_weight(&mut rng, d, d));
        p.insert("adapter_f.b", zeros(d));

        p.insert("speech.conv.w", init_weight(&mut rng, self.speech_kernel * self.mel_bins, d));
        p.insert("speech.conv.b", zeros(d));
        p.insert("adapter_a.w", init_weight(&mut rng, d, d));
        p.insert("adapter_a.b", zeros(d));

        let ff = self.ff_mult * d;
        for l in 0..self.blender_layers {
            let n = |s: &str| format!("blender.layer{l}.{s}");
            for ln in ["ln1", "ln2", "ln3"] {
                p.insert(n(&format!("{ln}_g")), ones(d));
                p.insert(n(&format!("{ln}_b")), zeros(d));
            }
            p.insert(n("wqkv"), init_weight(&mut rng, d, 3 * d));
            p.insert(n("wo"), init_weight(&mut rng, d, d));
            p.insert(n("conv_w"), init_weight(&mut rng, self.blender_kernel * d, d));
            p.insert(n("conv_b"), zeros(d));
            p.insert(n("ff1_w"), init_weight(&mut rng, d, ff));
            p.insert(n("ff1_b"), zeros(ff));
            p.insert(n("ff2_w"), init_weight(&mut rng, ff, d));
            p.insert(n("ff2_b"), zeros(d));
        }
        let out_cols = match self.upsample {
            Upsample::Repeat => self.mel_bins,
            Upsample::Learned => self.mel_per_video_frame * self.mel_bins,
        };
        p.insert("blender.out_ln_g", ones(d));
        p.insert("blender.out_ln_b", zeros(d));
        p.insert("blender.out.w", init_weight(&mut rng, d, out_cols));
        p.insert("blender.out.b", zeros(out_cols));

        miest::init_params(&mut p, &self.estimator, d, &mut rng);
        Ok(p)
    }
}

fn offsets(kernel: usize) -> Vec<isize> {
    let h = (kernel / 2) as isize;
    (-h..=h).collect()
}

fn layer_norm(t: &mut Tape, x: Var, prefix: &str) -> Var {
    let g = t.p(&format!("{prefix}_g"));
    let b = t.p(&format!("{prefix}_b"));
    let n = t.g.layer_norm(x, LN_EPS);
    let s = t.g.mul_row(n, g);
    t.g.add_row(s, b)
}

/// Multi-head self-attention. `window` restricts row `i` to keys within
/// `|i - j| <= window`.
fn self_attention(t: &mut Tape, x: Var, wqkv: &str, wo: &str, heads: usize, window: Option<usize>) -> Var {
    let d = t.g.value(x).cols();
    let len = t.g.value(x).rows();
    let dh = d / heads;
    let wqkv = t.p(wqkv);
    let wo = t.p(wo);
    let qkv = t.g.matmul(x, wqkv);
    let mask = window.filter(|&w| w + 1 < len).map(|w| {
        let m = Matrix::from_fn(len, len, |i, j| if i.abs_diff(j) <= w { 0.0 } else { -1e30 });
        t.g.constant(m)
    });
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = t.g.slice_cols(qkv, h * dh, dh);
        let k = t.g.slice_cols(qkv, d + h * dh, dh);
        let v = t.g.slice_cols(qkv, 2 * d + h * dh, dh);
        let s = t.g.matmul_t(q, k);
        let mut s = t.g.scale(s, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            s = t.g.add(s, m);
        }
        let a = t.g.softmax(s);
        outs.push(t.g.matmul(a, v));
    }
    let cat = if heads == 1 { outs[0] } else { t.g.concat_cols(&outs) };
    t.g.matmul(cat, wo)
}

/// `T_v x D_v` video features to the `T_v x d` content sequence `E_C`.
pub fn encode_content(t: &mut Tape, cfg: &ModelConfig, video: Var) -> Var {
    let off = offsets(cfg.content_kernel);
    let mut x = video;
    for l in 0..cfg.content_layers {
        let cols = t.g.im2col(x, &off, Padding::Zero);
        let w = t.p(&format!("content.conv{l}.w"));
        let b = t.p(&format!("content.conv{l}.b"));
        let y = t.g.linear(cols, w, b);
        let y = t.g.tanh(y);
        x = if l == 0 { y } else { t.g.add(x, y) };
    }
    if cfg.mixer_window > 0 {
        let h = layer_norm(t, x, "content.mix.ln");
        let a = self_attention(t, h, "content.mix.wqkv", "content.mix.wo", cfg.heads, Some(cfg.mixer_window));
        x = t.g.add(x, a);
    }
    let w = t.p("adapter_v.w");
    let b = t.p("adapter_v.b");
    t.g.linear(x, w, b)
}

/// Per-image adapter-F embeddings, `K x d`.
pub fn face_embeddings(t: &mut Tape, faces: Var) -> Var {
    let (w1, b1) = (t.p("face.l1.w"), t.p("face.l1.b"));
    let h = t.g.linear(faces, w1, b1);
    let h = t.g.tanh(h);
    let (w2, b2) = (t.p("face.l2.w"), t.p("face.l2.b"));
    let e = t.g.linear(h, w2, b2);
    let (wa, ba) = (t.p("adapter_f.w"), t.p("adapter_f.b"));
    t.g.linear(e, wa, ba)
}

/// `K x D_f` face features to the pooled `1 x d` facial identity `E_I_f`.
pub fn encode_faces(t: &mut Tape, faces: Var) -> Var {
    let per_image = face_embeddings(t, faces);
    t.g.mean_rows_exact(per_image)
}

/// `T_m x mel_bins` spectrogram to the `1 x d` audio identity `E_I_a`.
///
/// The time convolution wraps circularly, so a constant spectrogram and an
/// utterance concatenated with itself pool to the same embedding as the
/// original.
pub fn encode_speech(t: &mut Tape, cfg: &ModelConfig, mel: Var) -> Var {
    let cols = t.g.im2col(mel, &offsets(cfg.speech_kernel), Padding::Circular);
    let (w, b) = (t.p("speech.conv.w"), t.p("speech.conv.b"));
    let h = t.g.linear(cols, w, b);
    let h = t.g.tanh(h);
    let pooled = t.g.mean_rows(h);
    let (wa, ba) = (t.p("adapter_a.w"), t.p("adapter_a.b"));
    t.g.linear(pooled, wa, ba)
}

/// Broadcast-adds the identity row to every content frame.
pub fn fuse(t: &mut Tape, content: Var, identity: Var) -> Var {
    t.g.add_row(content, identity)
}

/// Fused `T_v x d` sequence to a `(r * T_v) x mel_bins` log-Mel spectrogram.
pub fn blend(t: &mut Tape, cfg: &ModelConfig, fused: Var) -> Var {
    let frames = t.g.value(fused).rows();
    let mut x = match cfg.upsample {
        Upsample::Repeat => t.g.repeat_rows(fused, cfg.mel_per_video_frame),
        Upsample::Learned => fused,
    };
    let conv_off = offsets(cfg.blender_kernel);
    for l in 0..cfg.blender_layers {
        let n = |s: &str| format!("blender.layer{l}.{s}");
        let h = layer_norm(t, x, &n("ln1"));
        let a = self_attention(t, h, &n("wqkv"), &n("wo"), cfg.heads, None);
        x = t.g.add(x, a);

        let h = layer_norm(t, x, &n("ln2"));
        let cols = t.g.im2col(h, &conv_off, Padding::Zero);
        let (cw, cb) = (t.p(&n("conv_w")), t.p(&n("conv_b")));
        let c = t.g.linear(cols, cw, cb);
        let c = t.g.silu(c);
        x = t.g.add(x, c);

        let h = layer_norm(t, x, &n("ln3"));
        let (w1, b1) = (t.p(&n("ff1_w")), t.p(&n("ff1_b")));
        let f = t.g.linear(h, w1, b1);
        let f = t.g.silu(f);
        let (w2, b2) = (t.p(&n("ff2_w")), t.p(&n("ff2_b")));
        let f = t.g.linear(f, w2, b2);
        x = t.g.add(x, f);
    }
    let h = layer_norm(t, x, "blender.out_ln");
    let (w, b) = (t.p("blender.out.w"), t.p("blender.out.b"));
    let y = t.g.linear(h, w, b);
    match cfg.upsample {
        Upsample::Repeat => y,
        Upsample::Learned => t.g.reshape(y, frames * cfg.mel_per_video_frame, cfg.mel_bins),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContentSequence(pub Matrix);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Facial,
    Audio,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedding {
    pub values: Vec<f64>,
    pub modality: Modality,
}

impl IdentityEmbedding {
    pub fn as_row(&self) -> Matrix {
        Matrix::row_vector(&self.values)
    }
}

/// Configuration plus parameters, for value-level forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    fn tape(&self) -> Tape<'_> {
        Tape::new(&self.params, |_| false)
    }

    pub fn encode_content(&self, video: &Matrix) -> Result<ContentSequence> {
        if video.rows() == 0 {
            return Err(Error::Shape("video must contain at least one frame".into()));
        }
        if video.cols() != self.config.video_dim {
            return Err(Error::Shape(format!("video width {} != configured {}", video.cols(), self.config.video_dim)));
        }
        let mut t = self.tape();
        let v = t.g.constant(video.clone());
        let e = encode_content(&mut t, &self.config, v);
        Ok(ContentSequence(t.g.value(e).clone()))
    }

    pub fn face_embeddings(&self, faces: &Matrix) -> Result<Matrix> {
        self.check_faces(faces)?;
        let mut t = self.tape();
        let f = t.g.constant(faces.clone());
        let e = face_embeddings(&mut t, f);
        Ok(t.g.value(e).clone())
    }

    fn check_faces(&self, faces: &Matrix) -> Result<()> {
        if faces.rows() == 0 {
            return Err(Error::Shape("at least one face image is required".into()));
        }
        if faces.cols() != self.config.face_dim {
            return Err(Error::Shape(format!("face width {} != configured {}", faces.cols(), self.config.face_dim)));
        }
        Ok(())
    }

    pub fn encode_faces(&self, faces: &Matrix) -> Result<IdentityEmbedding> {
        self.check_faces(faces)?;
        let mut t = self.tape();
        let f = t.g.constant(faces.clone());
        let e = encode_faces(&mut t, f);
        Ok(IdentityEmbedding { values: t.g.value(e).data().to_vec(), modality: Modality::Facial })
    }

    pub fn encode_speech(&self, mel: &Matrix) -> Result<IdentityEmbedding> {
        if self.params.get("speech.conv.w").is_none() {
            return Err(Error::Invalid("this model has no speech encoder (inference export)".into()));
        }
        if mel.rows() == 0 {
            return Err(Error::Shape("spectrogram must contain at least one frame".into()));
        }
        if mel.cols() != self.config.mel_bins {
            return Err(Error::Shape(format!("mel width {} != configured {}", mel.cols(), self.config.mel_bins)));
        }
        let mut t = self.tape();
        let m = t.g.constant(mel.clone());
        let e = encode_speech(&mut t, &self.config, m);
        Ok(IdentityEmbedding { values: t.g.value(e).data().to_vec(), modality: Modality::Audio })
    }

    pub fn fuse(&self, content: &ContentSequence, identity: &IdentityEmbedding) -> Result<ContentSequence> {
        fuse_values(content, identity)
    }

    pub fn blend(&self, fused: &ContentSequence) -> Result<Matrix> {
        if fused.0.rows() == 0 || fused.0.cols() != self.config.d {
            return Err(Error::Shape(format!("fused sequence {:?} must be T x {}", fused.0.shape(), self.config.d)));
        }
        let mut t = self.tape();
        let x = t.g.constant(fused.0.clone());
        let y = blend(&mut t, &self.config, x);
        Ok(t.g.value(y).clone())
    }

    /// Parameters of one block, for inspection.
    pub fn block_params(&self, block: Block) -> Vec<(&str, &Matrix)> {
        self.params.iter().filter(|(n, _)| Block::of(n) == Some(block)).collect()
    }
}

/// `out[t] = content[t] + identity` for every frame.
pub fn fuse_values(content: &ContentSequence, identity: &IdentityEmbedding) -> Result<ContentSequence> {
    let c = &content.0;
    if c.cols() != identity.values.len() {
        return Err(Error::Shape(format!("content width {} != identity width {}", c.cols(), identity.values.len())));
    }
    let mut out = c.clone();
    for r in 0..out.rows() {
        for (o, v) in out.row_mut(r).iter_mut().zip(&identity.values) {
            *o += v;
        }
    }
    Ok(ContentSequence(out))
}
