//! Utterance loading, epoch shuffling and face sub-sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{io, CorpusManifest, Utterance, UttEntry};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Loads one utterance directory and checks every shape against the manifest.
pub fn load_utterance(dir: &Path, entry: &UttEntry, manifest: &CorpusManifest) -> Result<Utterance> {
    let check = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
        if m.shape() != (rows, cols) {
            return Err(Error::data(
                io::array_path(dir, name),
                format!("shape {:?} does not match manifest ({rows}, {cols})", m.shape()),
            ));
        }
        Ok(())
    };
    let video = io::read_matrix(dir, "video")?;
    check("video", &video, entry.frames, manifest.video_dim)?;
    let mel = io::read_matrix(dir, "mel")?;
    check("mel", &mel, entry.frames * manifest.mel_per_video_frame, manifest.mel_bins)?;
    if entry.faces == 0 {
        return Err(Error::data(dir, "utterance declares zero face images"));
    }
    let mut face_rows = Vec::with_capacity(entry.faces);
    for k in 0..entry.faces {
        let name = format!("face_{k}");
        let f = io::read_matrix(dir, &name)?;
        check(&name, &f, 1, manifest.face_dim)?;
        face_rows.push(f);
    }
    let refs: Vec<&Matrix> = face_rows.iter().collect();
    let faces = Matrix::vstack(&refs);
    let tp = dir.join("tokens.json");
    let tokens: Option<Vec<usize>> = if tp.exists() { Some(io::read_json(&tp)?) } else { None };
    if let Some(t) = &tokens {
        if t.len() != entry.frames {
            return Err(Error::data(tp, format!("{} tokens for {} frames", t.len(), entry.frames)));
        }
    }
    Ok(Utterance { utt_id: entry.utt_id.clone(), speaker_id: entry.speaker_id.clone(), video, faces, mel, tokens })
}

/// Picks `max_images` face rows out of `k` available.
///
/// With `k >= max_images` this is a draw without replacement. Otherwise every
/// row is used `max_images / k` times and the remainder is drawn without
/// replacement, e.g. 5 faces for 16 slots gives three full passes plus one
/// resampled row.
pub fn sample_faces(k: usize, max_images: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(k >= 1 && max_images >= 1);
    let mut all: Vec<usize> = (0..k).collect();
    if k >= max_images {
        all.shuffle(rng);
        all.truncate(max_images);
        return all;
    }
    let mut out = Vec::with_capacity(max_images);
    for _ in 0..max_images / k {
        out.extend(0..k);
    }
    all.shuffle(rng);
    out.extend(&all[..max_images % k]);
    out
}

/// splitmix64-style mixing of several words into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Shuffled visiting order of `indices` for one epoch.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, 0xB47C])));
    order
}

#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub index: usize,
    pub utt: &'a Utterance,
    /// Sub-sampled face rows, `max_images x D_f`.
    pub faces: Matrix,
}

#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub epoch: u64,
    pub items: Vec<BatchItem<'a>>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Face rows for utterance `index` in a given epoch, deterministic in
/// `(seed, epoch, index)`.
pub fn faces_for(utt: &Utterance, index: usize, max_images: usize, seed: u64, epoch: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, index as u64, 0xFACE]));
    let rows = sample_faces(utt.faces.rows(), max_images, &mut rng);
    utt.faces.select_rows(&rows)
}

/// Batches of `batch_size` distinct utterances covering `indices` exactly once
/// (the last batch may be short). Order depends only on `(seed, epoch)`.
pub fn iter_batches<'a>(
    utterances: &'a [Utterance],
    indices: &[usize],
    batch_size: usize,
    max_images: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Batch<'a>> + 'a {
    assert!(batch_size >= 1);
    let order = epoch_order(indices, seed, epoch);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |chunk| Batch {
        epoch,
        items: chunk
            .into_iter()
            .map(|i| BatchItem {
                index: i,
                utt: &utterances[i],
                faces: faces_for(&utterances[i], i, max_images, seed, epoch),
            })
            .collect(),
    })
}
