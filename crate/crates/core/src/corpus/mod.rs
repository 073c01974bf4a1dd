//! Synthetic multi-speaker audio-visual corpus.
//!
//! Every speaker owns an additive log-Mel tilt and a face code. Utterances are
//! hold-walks over a token vocabulary; each token has a Mel pattern and a
//! video embedding. Because identity enters the Mel grid additively, the
//! speaker tilt of any spectrogram can be read back analytically, which is
//! what the evaluation oracle relies on.

pub mod io;
pub mod loader;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use loader::{epoch_order, iter_batches, load_utterance, sample_faces, Batch, BatchItem};

pub const MANIFEST_VERSION: u32 = 1;
const TILT_WINDOW: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub speakers: usize,
    pub utts_per_speaker: usize,
    pub vocab: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_hold: usize,
    pub max_hold: usize,
    pub min_faces: usize,
    pub max_faces: usize,
    pub mel_bins: usize,
    pub mel_per_video_frame: usize,
    pub video_dim: usize,
    pub face_dim: usize,
    pub sigma_v: f64,
    pub sigma_f: f64,
    pub sigma_m: f64,
    pub tilt_scale: f64,
    /// Strength of a speaker-dependent term added to every video frame
    /// (`leak * L * face_code` for a fixed random `L`). Zero reproduces the
    /// plain generation rule; positive values model lips that betray identity.
    pub identity_leak: f64,
    /// Trailing utterances of each speaker marked as the `eval` split.
    pub holdout_per_speaker: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            speakers: 20,
            utts_per_speaker: 50,
            vocab: 16,
            min_frames: 30,
            max_frames: 60,
            min_hold: 2,
            max_hold: 5,
            min_faces: 4,
            max_faces: 24,
            mel_bins: 80,
            mel_per_video_frame: 4,
            video_dim: 32,
            face_dim: 32,
            sigma_v: 0.1,
            sigma_f: 0.1,
            sigma_m: 0.05,
            tilt_scale: 1.0,
            identity_leak: 0.0,
            holdout_per_speaker: 0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.speakers < 2 {
            return bad("need at least 2 speakers");
        }
        if self.vocab < 2 {
            return bad("token vocabulary must hold at least 2 tokens");
        }
        if self.utts_per_speaker == 0 {
            return bad("utts_per_speaker must be positive");
        }
        if self.mel_bins == 0 || self.video_dim == 0 || self.face_dim == 0 || self.mel_per_video_frame == 0 {
            return bad("mel_bins, video_dim, face_dim and mel_per_video_frame must be positive");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("frame range must satisfy 1 <= min_frames <= max_frames");
        }
        if self.min_hold == 0 || self.min_hold > self.max_hold {
            return bad("hold range must satisfy 1 <= min_hold <= max_hold");
        }
        if self.min_faces == 0 || self.min_faces > self.max_faces {
            return bad("face range must satisfy 1 <= min_faces <= max_faces");
        }
        if self.holdout_per_speaker >= self.utts_per_speaker {
            return bad("holdout_per_speaker must leave at least one training utterance per speaker");
        }
        for (name, v) in [
            ("sigma_v", self.sigma_v),
            ("sigma_f", self.sigma_f),
            ("sigma_m", self.sigma_m),
            ("tilt_scale", self.tilt_scale),
            ("identity_leak", self.identity_leak),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub tilt: Vec<f64>,
    pub face_code: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub frames: usize,
    pub faces: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub mel_bins: usize,
    pub mel_per_video_frame: usize,
    pub video_dim: usize,
    pub face_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_pattern_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
    pub utterances: Vec<UttEntry>,
}

impl CorpusManifest {
    pub fn is_synthetic(&self) -> bool {
        self.token_pattern_mean.is_some()
    }

    pub fn speaker_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for u in &self.utterances {
            if !ids.contains(&u.speaker_id) {
                ids.push(u.speaker_id.clone());
            }
        }
        ids
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.utterances.len()).filter(|&i| self.utterances[i].split == split).collect()
    }

    pub fn find(&self, utt_id: &str) -> Option<usize> {
        self.utterances.iter().position(|u| u.utt_id == utt_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: String,
    /// `T_v x D_v`
    pub video: Matrix,
    /// `K x D_f`
    pub faces: Matrix,
    /// `(r * T_v) x mel_bins`
    pub mel: Matrix,
    pub tokens: Option<Vec<usize>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.video.rows()
    }
}

/// Ground truth kept in memory after generation.
#[derive(Clone, Debug)]
pub struct SyntheticTruth {
    /// `V x mel_bins`
    pub token_patterns: Matrix,
    /// `V x D_v`
    pub token_video: Matrix,
    /// `D_v x D_f`
    pub leak_map: Matrix,
}

/// A corpus held in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub speakers: BTreeMap<String, SpeakerProfile>,
    pub utterances: Vec<Utterance>,
    pub truth: Option<SyntheticTruth>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn noise(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        sigma * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Token sequence where each token is held for a uniform `min_hold..=max_hold`
/// frames (the final hold is truncated to fit `frames`).
pub fn hold_walk(rng: &mut impl Rng, frames: usize, vocab: usize, min_hold: usize, max_hold: usize) -> Vec<usize> {
    let mut seq = Vec::with_capacity(frames);
    while seq.len() < frames {
        let token = rng.random_range(0..vocab);
        let hold = rng.random_range(min_hold..=max_hold);
        for _ in 0..hold.min(frames - seq.len()) {
            seq.push(token);
        }
    }
    seq
}

/// Valid-mode moving average of width [`TILT_WINDOW`] over `n + 4` draws.
fn smooth_tilt(rng: &mut ChaCha8Rng, bins: usize, scale: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..bins + TILT_WINDOW - 1).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    (0..bins).map(|f| scale * raw[f..f + TILT_WINDOW].iter().sum::<f64>() / TILT_WINDOW as f64).collect()
}

/// Generates a corpus in memory. Deterministic for a fixed `cfg.seed`. All
/// stored matrices hold f32-representable values so disk round-trips are exact.
pub fn generate(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bins = cfg.mel_bins;
    let r = cfg.mel_per_video_frame;

    let token_patterns = normal_matrix(&mut rng, cfg.vocab, bins);
    let token_video = normal_matrix(&mut rng, cfg.vocab, cfg.video_dim);
    let leak_map = normal_matrix(&mut rng, cfg.video_dim, cfg.face_dim).map(|v| v / (cfg.face_dim as f64).sqrt());

    let mut speakers = BTreeMap::new();
    let mut order = Vec::with_capacity(cfg.speakers);
    for s in 0..cfg.speakers {
        let speaker_id = format!("spk{s:03}");
        let tilt = smooth_tilt(&mut rng, bins, cfg.tilt_scale);
        let face_code: Vec<f64> = (0..cfg.face_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        order.push(speaker_id.clone());
        speakers.insert(speaker_id.clone(), SpeakerProfile { speaker_id, tilt, face_code });
    }

    let mut utterances = Vec::new();
    let mut entries = Vec::new();
    let mut pattern_sum = vec![0.0; bins];
    let mut frame_count = 0usize;
    for (s, speaker_id) in order.iter().enumerate() {
        let prof = &speakers[speaker_id];
        let leak_row: Vec<f64> = (0..cfg.video_dim)
            .map(|i| cfg.identity_leak * (0..cfg.face_dim).map(|j| leak_map.get(i, j) * prof.face_code[j]).sum::<f64>())
            .collect();
        for u in 0..cfg.utts_per_speaker {
            let utt_id = format!("s{s:03}_u{u:03}");
            let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);
            let tokens = hold_walk(&mut rng, frames, cfg.vocab, cfg.min_hold, cfg.max_hold);
            let mut video = Matrix::zeros(frames, cfg.video_dim);
            for (t, &z) in tokens.iter().enumerate() {
                for c in 0..cfg.video_dim {
                    let v = token_video.get(z, c) + leak_row[c] + noise(&mut rng, cfg.sigma_v);
                    video.set(t, c, v);
                }
            }
            let k = rng.random_range(cfg.min_faces..=cfg.max_faces);
            let mut faces = Matrix::zeros(k, cfg.face_dim);
            for i in 0..k {
                for c in 0..cfg.face_dim {
                    faces.set(i, c, prof.face_code[c] + noise(&mut rng, cfg.sigma_f));
                }
            }
            let mut mel = Matrix::zeros(r * frames, bins);
            for (t, &z) in tokens.iter().enumerate() {
                for j in 0..r {
                    for f in 0..bins {
                        let v = token_patterns.get(z, f) + prof.tilt[f] + noise(&mut rng, cfg.sigma_m);
                        mel.set(r * t + j, f, v);
                    }
                }
                for (acc, p) in pattern_sum.iter_mut().zip(token_patterns.row(z)) {
                    *acc += p;
                }
                frame_count += 1;
            }
            io::round_f32(&mut video);
            io::round_f32(&mut faces);
            io::round_f32(&mut mel);
            let split = if u + cfg.holdout_per_speaker >= cfg.utts_per_speaker { Split::Eval } else { Split::Train };
            entries.push(UttEntry { utt_id: utt_id.clone(), speaker_id: speaker_id.clone(), frames, faces: k, split });
            utterances.push(Utterance { utt_id, speaker_id: speaker_id.clone(), video, faces, mel, tokens: Some(tokens) });
        }
    }
    let token_pattern_mean = pattern_sum.iter().map(|v| v / frame_count as f64).collect();
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        mel_bins: bins,
        mel_per_video_frame: r,
        video_dim: cfg.video_dim,
        face_dim: cfg.face_dim,
        token_pattern_mean: Some(token_pattern_mean),
        generator: Some(cfg.clone()),
        utterances: entries,
    };
    Ok(Corpus { manifest, speakers, utterances, truth: Some(SyntheticTruth { token_patterns, token_video, leak_map }) })
}

pub fn utt_dir(root: &Path, utt_id: &str) -> PathBuf {
    root.join("utt").join(utt_id)
}

impl Corpus {
    /// Writes `manifest.json`, `speakers.json` and every utterance directory.
    pub fn write(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        io::write_json(&root.join("manifest.json"), &self.manifest)?;
        if !self.speakers.is_empty() {
            io::write_json(&root.join("speakers.json"), &self.speakers)?;
        }
        for u in &self.utterances {
            let dir = utt_dir(root, &u.utt_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            io::write_matrix(&dir, "video", &u.video)?;
            io::write_matrix(&dir, "mel", &u.mel)?;
            for k in 0..u.faces.rows() {
                io::write_array(&dir, &format!("face_{k}"), &[u.faces.cols()], u.faces.row(k))?;
            }
            if let Some(tokens) = &u.tokens {
                io::write_json(&dir.join("tokens.json"), tokens)?;
            }
        }
        Ok(())
    }

    /// Loads a corpus directory, validating every file against the manifest.
    pub fn load(root: &Path) -> Result<Corpus> {
        let manifest: CorpusManifest = io::read_json(&root.join("manifest.json"))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::data(
                root.join("manifest.json"),
                format!("unsupported manifest version {}", manifest.version),
            ));
        }
        let sp = root.join("speakers.json");
        let speakers = if sp.exists() { io::read_json(&sp)? } else { BTreeMap::new() };
        let utterances = manifest
            .utterances
            .iter()
            .map(|e| load_utterance(&utt_dir(root, &e.utt_id), e, &manifest))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { manifest, speakers, utterances, truth: None })
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerProfile> {
        self.speakers.get(id)
    }

    /// Mean log-Mel frame over the selected utterances.
    pub fn mean_mel(&self, indices: &[usize]) -> Vec<f64> {
        let bins = self.manifest.mel_bins;
        let mut acc = vec![0.0; bins];
        let mut n = 0usize;
        for &i in indices {
            let mel = &self.utterances[i].mel;
            for r in 0..mel.rows() {
                for (a, v) in acc.iter_mut().zip(mel.row(r)) {
                    *a += v;
                }
            }
            n += mel.rows();
        }
        acc.iter().map(|v| v / n as f64).collect()
    }
}
