//! Reconstruction and audio-facial contrastive losses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn scalar(total: f64) -> Self {
        Self { total, components: BTreeMap::new() }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.components.insert(name.to_string(), value);
        self
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }
}

/// Mean absolute difference, as a graph node.
pub fn reconstruction(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let a = g.abs(d);
    g.mean(a)
}

pub fn reconstruction_loss(pred: &Matrix, target: &Matrix) -> Result<LossValue> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    let l = reconstruction(&mut g, p, t);
    Ok(LossValue::scalar(g.value(l).item()))
}

/// Nodes of the bidirectional contrastive loss.
#[derive(Clone, Copy, Debug)]
pub struct AfClipNodes {
    pub total: Var,
    pub audio_to_face: Var,
    pub face_to_audio: Var,
}

/// Rejects zero rows, for which the cosine is undefined.
pub fn check_nonzero_rows(m: &Matrix, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        if m.row(r).iter().all(|v| *v == 0.0) {
            return Err(Error::Invalid(format!("{what} row {r} has zero norm; cosine similarity is undefined")));
        }
    }
    Ok(())
}

/// Bidirectional contrastive loss over paired rows of `audio` and `face`
/// (`N x d` each). Logits are cosine similarities divided by `temperature`.
///
/// The caller is responsible for rejecting zero-norm rows.
pub fn afclip(g: &mut Graph, audio: Var, face: Var, temperature: f64) -> AfClipNodes {
    let n = g.value(audio).rows();
    let na = g.l2_normalize_rows(audio);
    let nf = g.l2_normalize_rows(face);
    let sim = g.matmul_t(na, nf);
    let sim = if temperature == 1.0 { sim } else { g.scale(sim, 1.0 / temperature) };
    let diag: Vec<usize> = (0..n).collect();

    let la = g.log_softmax(sim);
    let pa = g.pick(la, diag.clone());
    let ma = g.mean(pa);
    let audio_to_face = g.scale(ma, -1.0);

    let sim_t = g.transpose(sim);
    let lf = g.log_softmax(sim_t);
    let pf = g.pick(lf, diag);
    let mf = g.mean(pf);
    let face_to_audio = g.scale(mf, -1.0);

    let s = g.add(audio_to_face, face_to_audio);
    let total = g.scale(s, 0.5);
    AfClipNodes { total, audio_to_face, face_to_audio }
}

pub fn afclip_loss(audio: &Matrix, face: &Matrix, temperature: f64) -> Result<LossValue> {
    if audio.shape() != face.shape() || audio.rows() == 0 {
        return Err(Error::Shape(format!("paired embeddings {:?} vs {:?}", audio.shape(), face.shape())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    check_nonzero_rows(audio, "audio embedding")?;
    check_nonzero_rows(face, "facial embedding")?;
    let mut g = Graph::new();
    let (a, f) = (g.constant(audio.clone()), g.constant(face.clone()));
    let nodes = afclip(&mut g, a, f, temperature);
    Ok(LossValue::scalar(g.value(nodes.total).item())
        .with("a2v", g.value(nodes.audio_to_face).item())
        .with("v2a", g.value(nodes.face_to_audio).item()))
}

/// Smallest value the contrastive loss can take for `n >= 2` paired rows
/// (positives at cosine 1, negatives at -1).
pub fn afclip_lower_bound(n: usize) -> f64 {
    let e = std::f64::consts::E;
    -(e / (e + (n as f64 - 1.0) / e)).ln()
}
