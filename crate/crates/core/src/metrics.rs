//! Conversion evaluation: pair plans, oracle identity vectors, PSH/PSD and
//! EER with its detection-error-tradeoff curve.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, SpeakerProfile, Split, Utterance};
use crate::error::{Error, Result};
use crate::exec::{map_slice, ExecMode};
use crate::inference;
use crate::model::Model;
use crate::tensor::Matrix;

/// Time-averaged mel minus the corpus-wide token pattern mean. On a
/// synthetic corpus this recovers the speaker's spectral tilt up to
/// token-frequency sampling error.
pub fn oracle_identity(mel: &Matrix, manifest: &CorpusManifest) -> Result<Vec<f64>> {
    let mean = manifest
        .token_pattern_mean
        .as_ref()
        .ok_or_else(|| Error::Invalid("corpus has no token_pattern_mean; oracle identity needs a synthetic corpus".into()))?;
    if mel.cols() != mean.len() || mel.rows() == 0 {
        return Err(Error::Shape(format!("mel {:?} vs {} bins", mel.shape(), mean.len())));
    }
    Ok(mel.mean_rows().data().iter().zip(mean).map(|(a, b)| a - b).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

/// Two conversions of the same source utterance. Positive pairs use two
/// utterances of one target speaker; negative pairs use two speakers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedPair {
    pub label: Label,
    pub source: String,
    pub target_a: String,
    pub target_b: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub similarity: f64,
    pub label: Label,
    pub source: String,
    pub target_a: String,
    pub target_b: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub n_sources: usize,
    pub n_targets: usize,
    /// Pairs per label.
    pub n_pairs: usize,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self { n_sources: 4, n_targets: 8, n_pairs: 1600, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPlan {
    pub source_speakers: Vec<String>,
    pub target_speakers: Vec<String>,
    pub pairs: Vec<PlannedPair>,
}

/// Key of one conversion: content from `source`, identity from `target`.
pub type ConversionKey = (String, String);

impl PairPlan {
    /// Distinct conversions needed to score every pair, in sorted order.
    pub fn conversions(&self) -> Vec<ConversionKey> {
        let set: BTreeSet<ConversionKey> = self
            .pairs
            .iter()
            .flat_map(|p| [(p.source.clone(), p.target_a.clone()), (p.source.clone(), p.target_b.clone())])
            .collect();
        set.into_iter().collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.pairs.iter().filter(|p| p.label == label).count()
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.pairs)
    }
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        let _ = writeln!(out, "{}", serde_json::to_string(it).expect("serializable"));
    }
    out
}

/// Utterances eligible for evaluation: the held-out split when the corpus
/// has one, otherwise everything.
pub fn evaluation_indices(manifest: &CorpusManifest) -> Vec<usize> {
    let eval = manifest.indices(Split::Eval);
    if eval.is_empty() {
        (0..manifest.utterances.len()).collect()
    } else {
        eval
    }
}

/// Draws a deterministic pair plan. Source and target speakers are disjoint.
pub fn sample_pairs(manifest: &CorpusManifest, cfg: &PlanConfig) -> Result<PairPlan> {
    let pool = evaluation_indices(manifest);
    let mut by_speaker: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for &i in &pool {
        let u = &manifest.utterances[i];
        by_speaker.entry(u.speaker_id.as_str()).or_default().push(u.utt_id.as_str());
    }
    if cfg.n_sources == 0 || cfg.n_targets < 2 {
        return Err(Error::Invalid("need at least one source and two target speakers".into()));
    }
    if by_speaker.len() < cfg.n_sources + cfg.n_targets {
        return Err(Error::Invalid(format!(
            "{} speakers available, {} sources + {} targets requested",
            by_speaker.len(),
            cfg.n_sources,
            cfg.n_targets
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut speakers: Vec<&str> = by_speaker.keys().copied().collect();
    speakers.shuffle(&mut rng);
    let sources = &speakers[..cfg.n_sources];
    let targets = &speakers[cfg.n_sources..cfg.n_sources + cfg.n_targets];
    if let Some(t) = targets.iter().find(|t| by_speaker[**t].len() < 2) {
        return Err(Error::Invalid(format!("target speaker {t} has fewer than two utterances")));
    }
    let source_utts: Vec<&str> = sources.iter().flat_map(|s| by_speaker[*s].iter().copied()).collect();
    let pick = |rng: &mut ChaCha8Rng, v: &[&str]| v[rng.random_range(0..v.len())].to_string();

    let mut pairs = Vec::with_capacity(2 * cfg.n_pairs);
    for _ in 0..cfg.n_pairs {
        let source = pick(&mut rng, &source_utts);
        let spk = targets[rng.random_range(0..targets.len())];
        let utts = &by_speaker[spk];
        let a = rng.random_range(0..utts.len());
        let mut b = rng.random_range(0..utts.len() - 1);
        if b >= a {
            b += 1;
        }
        pairs.push(PlannedPair {
            label: Label::Positive,
            source,
            target_a: utts[a].to_string(),
            target_b: utts[b].to_string(),
        });
    }
    for _ in 0..cfg.n_pairs {
        let source = pick(&mut rng, &source_utts);
        let j = rng.random_range(0..targets.len());
        let mut k = rng.random_range(0..targets.len() - 1);
        if k >= j {
            k += 1;
        }
        let target_a = pick(&mut rng, &by_speaker[targets[j]]);
        let target_b = pick(&mut rng, &by_speaker[targets[k]]);
        pairs.push(PlannedPair { label: Label::Negative, source, target_a, target_b });
    }
    Ok(PairPlan {
        source_speakers: sources.iter().map(|s| s.to_string()).collect(),
        target_speakers: targets.iter().map(|s| s.to_string()).collect(),
        pairs,
    })
}

fn mean_of(scores: &[f64], what: &str) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Invalid(format!("{what} needs at least one score")));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean similarity over positive pairs; higher is better.
pub fn psh(positive_scores: &[f64]) -> Result<f64> {
    mean_of(positive_scores, "PSH")
}

/// Mean similarity over negative pairs; lower is better.
pub fn psd(negative_scores: &[f64]) -> Result<f64> {
    mean_of(negative_scores, "PSD")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub fnr: f64,
}

/// Error rates at increasing thresholds. A pair is accepted as positive when
/// its score is at least the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

impl DetCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,fnr\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.fnr);
        }
        out
    }

    pub fn is_monotone(&self) -> bool {
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        self.points.iter().all(|p| in_range(p.fpr) && in_range(p.fnr))
            && self.points.windows(2).all(|w| {
                w[0].threshold < w[1].threshold && w[1].fpr <= w[0].fpr && w[1].fnr >= w[0].fnr
            })
    }
}

/// Equal error rate over `(score, is_positive)` pairs.
///
/// Thresholds sweep every distinct score plus one value above the maximum,
/// so the curve runs from (fpr 1, fnr 0) to (fpr 0, fnr 1). The EER is read
/// where `fpr - fnr` changes sign, interpolating linearly between the two
/// neighbouring sweep points when the crossing falls between them.
pub fn eer(scores: &[(f64, bool)]) -> Result<(f64, DetCurve)> {
    if scores.iter().any(|(s, _)| !s.is_finite()) {
        return Err(Error::Invalid("scores must be finite".into()));
    }
    let n_pos = scores.iter().filter(|(_, p)| *p).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("EER needs at least one positive and one negative score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    // Counts of scores strictly below the current threshold.
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        points.push(DetPoint {
            threshold,
            fpr: (n_neg - neg_below) as f64 / n_neg as f64,
            fnr: pos_below as f64 / n_pos as f64,
        });
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    let top = sorted[sorted.len() - 1].0;
    points.push(DetPoint { threshold: top + top.abs().max(1.0), fpr: 0.0, fnr: 1.0 });

    let d: Vec<f64> = points.iter().map(|p| p.fpr - p.fnr).collect();
    let k = d.iter().position(|v| *v <= 0.0).expect("last point has fpr < fnr");
    let value = if d[k] == 0.0 {
        points[k].fpr
    } else {
        let (a, b) = (&points[k - 1], &points[k]);
        let t = d[k - 1] / (d[k - 1] - d[k]);
        a.fpr + t * (b.fpr - a.fpr)
    };
    Ok((value, DetCurve { points }))
}

/// Maps a converted mel to an identity vector.
pub trait IdentityEmbedder: Sync {
    fn embed(&self, key: &ConversionKey, mel: &Matrix) -> Result<Vec<f64>>;
}

/// The synthetic corpus's analytic identity.
pub struct OracleEmbedder<'a> {
    pub manifest: &'a CorpusManifest,
}

impl IdentityEmbedder for OracleEmbedder<'_> {
    fn embed(&self, _key: &ConversionKey, mel: &Matrix) -> Result<Vec<f64>> {
        oracle_identity(mel, self.manifest)
    }
}

/// Embeddings computed elsewhere, one JSON object per line:
/// `{"source": ..., "target": ..., "embedding": [...]}`.
#[derive(Clone, Debug, Default)]
pub struct ExternalEmbeddings {
    pub table: BTreeMap<ConversionKey, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ExternalLine {
    source: String,
    target: String,
    embedding: Vec<f64>,
}

impl ExternalEmbeddings {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ExternalLine =
                serde_json::from_str(line).map_err(|e| Error::data(path, format!("line {}: {e}", n + 1)))?;
            table.insert((e.source, e.target), e.embedding);
        }
        Ok(Self { table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

impl IdentityEmbedder for ExternalEmbeddings {
    fn embed(&self, key: &ConversionKey, _mel: &Matrix) -> Result<Vec<f64>> {
        self.table
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("no external embedding for {} -> {}", key.0, key.1)))
    }
}

pub fn score_pairs(plan: &PairPlan, embeddings: &BTreeMap<ConversionKey, Vec<f64>>) -> Result<Vec<ScoredPair>> {
    let get = |s: &str, t: &str| {
        embeddings
            .get(&(s.to_string(), t.to_string()))
            .ok_or_else(|| Error::Invalid(format!("missing conversion {s} -> {t}")))
    };
    plan.pairs
        .iter()
        .map(|p| {
            let similarity = cosine(get(&p.source, &p.target_a)?, get(&p.source, &p.target_b)?);
            Ok(ScoredPair {
                similarity,
                label: p.label,
                source: p.source.clone(),
                target_a: p.target_a.clone(),
                target_b: p.target_b.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub psh: f64,
    pub psd: f64,
    pub eer: f64,
    pub positives: usize,
    pub negatives: usize,
    pub conversions: usize,
    /// Fraction of conversions whose oracle identity is closer (cosine) to
    /// the target speaker's tilt than to the source speaker's. Only on
    /// synthetic corpora with speaker profiles.
    pub tilt_accuracy: Option<f64>,
}

pub fn summarize(scored: &[ScoredPair]) -> Result<(EvalSummary, DetCurve)> {
    let pos: Vec<f64> = scored.iter().filter(|s| s.label == Label::Positive).map(|s| s.similarity).collect();
    let neg: Vec<f64> = scored.iter().filter(|s| s.label == Label::Negative).map(|s| s.similarity).collect();
    let labelled: Vec<(f64, bool)> = scored.iter().map(|s| (s.similarity, s.label == Label::Positive)).collect();
    let (e, det) = eer(&labelled)?;
    let summary = EvalSummary {
        psh: psh(&pos)?,
        psd: psd(&neg)?,
        eer: e,
        positives: pos.len(),
        negatives: neg.len(),
        conversions: 0,
        tilt_accuracy: None,
    };
    Ok((summary, det))
}

/// Runs every conversion of `plan` using all face images of each target.
pub fn run_conversions(
    model: &Model,
    manifest: &CorpusManifest,
    utterances: &[Utterance],
    keys: &[ConversionKey],
    mode: ExecMode,
) -> Result<Vec<Matrix>> {
    let find = |id: &str| {
        manifest.find(id).map(|i| &utterances[i]).ok_or_else(|| Error::Invalid(format!("unknown utterance {id}")))
    };
    map_slice(mode, keys, |(s, t)| inference::convert(model, &find(s)?.video, &find(t)?.faces)).into_iter().collect()
}

/// Fraction of conversions whose identity vector is closer to the target
/// speaker's tilt than to the source speaker's.
pub fn tilt_accuracy(
    keys: &[ConversionKey],
    identities: &[Vec<f64>],
    manifest: &CorpusManifest,
    speakers: &BTreeMap<String, SpeakerProfile>,
) -> Result<f64> {
    let tilt = |utt: &str| -> Result<&[f64]> {
        let i = manifest.find(utt).ok_or_else(|| Error::Invalid(format!("unknown utterance {utt}")))?;
        let spk = &manifest.utterances[i].speaker_id;
        speakers.get(spk).map(|p| p.tilt.as_slice()).ok_or_else(|| Error::Invalid(format!("no profile for {spk}")))
    };
    let mut hits = 0usize;
    for ((s, t), id) in keys.iter().zip(identities) {
        if cosine(id, tilt(t)?) > cosine(id, tilt(s)?) {
            hits += 1;
        }
    }
    Ok(hits as f64 / keys.len().max(1) as f64)
}

/// Full evaluation output.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub summary: EvalSummary,
    pub det: DetCurve,
    pub scored: Vec<ScoredPair>,
    pub keys: Vec<ConversionKey>,
    pub mels: Vec<Matrix>,
}

/// Scores converted mels with `embedder` and summarizes. Tilt accuracy is
/// reported when `speakers` is given.
pub fn evaluate_mels(
    plan: &PairPlan,
    keys: Vec<ConversionKey>,
    mels: Vec<Matrix>,
    embedder: &dyn IdentityEmbedder,
    oracle: Option<(&CorpusManifest, &BTreeMap<String, SpeakerProfile>)>,
    mode: ExecMode,
) -> Result<Evaluation> {
    let pieces: Vec<(&ConversionKey, &Matrix)> = keys.iter().zip(&mels).collect();
    let ids: Vec<Vec<f64>> =
        map_slice(mode, &pieces, |(k, m)| embedder.embed(k, m)).into_iter().collect::<Result<_>>()?;
    let table: BTreeMap<ConversionKey, Vec<f64>> = keys.iter().cloned().zip(ids.iter().cloned()).collect();
    let scored = score_pairs(plan, &table)?;
    let (mut summary, det) = summarize(&scored)?;
    summary.conversions = keys.len();
    if let Some((manifest, speakers)) = oracle {
        if !speakers.is_empty() && manifest.is_synthetic() {
            let oracle_ids: Vec<Vec<f64>> =
                mels.iter().map(|m| oracle_identity(m, manifest)).collect::<Result<_>>()?;
            summary.tilt_accuracy = Some(tilt_accuracy(&keys, &oracle_ids, manifest, speakers)?);
        }
    }
    Ok(Evaluation { summary, det, scored, keys, mels })
}
