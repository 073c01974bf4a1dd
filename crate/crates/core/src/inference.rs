//! Synthesis, zero-shot conversion and identity interpolation from a trained
//! model, plus spectrogram output helpers.

use std::path::Path;

use crate::corpus::io;
use crate::error::{Error, Result};
use crate::model::{ContentSequence, IdentityEmbedding, Model, Modality};
use crate::tensor::Matrix;

/// Mel from a content video and an already pooled identity embedding.
pub fn synthesize_from_embedding(model: &Model, video: &Matrix, identity: &IdentityEmbedding) -> Result<Matrix> {
    let content = model.encode_content(video)?;
    blend_with(model, &content, identity)
}

fn blend_with(model: &Model, content: &ContentSequence, identity: &IdentityEmbedding) -> Result<Matrix> {
    let fused = model.fuse(content, identity)?;
    model.blend(&fused)
}

/// Mel for `video` spoken with the identity pooled from `faces`. Using the
/// video's own faces gives plain synthesis.
pub fn synthesize(model: &Model, video: &Matrix, faces: &Matrix) -> Result<Matrix> {
    let identity = model.encode_faces(faces)?;
    synthesize_from_embedding(model, video, &identity)
}

/// Same pipeline as [`synthesize`] with a target speaker's faces.
pub fn convert(model: &Model, video: &Matrix, target_faces: &Matrix) -> Result<Matrix> {
    synthesize(model, video, target_faces)
}

/// `(1 - alpha) * a + alpha * b`, returning the endpoints unchanged at 0 and 1.
pub fn mix_embeddings(a: &IdentityEmbedding, b: &IdentityEmbedding, alpha: f64) -> Result<IdentityEmbedding> {
    check_alpha(alpha)?;
    if a.values.len() != b.values.len() {
        return Err(Error::Shape(format!("embedding widths {} and {}", a.values.len(), b.values.len())));
    }
    let values = if alpha == 0.0 {
        a.values.clone()
    } else if alpha == 1.0 {
        b.values.clone()
    } else {
        a.values.iter().zip(&b.values).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect()
    };
    Ok(IdentityEmbedding { values, modality: Modality::Facial })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Interpolates between the pooled identities of `source_faces` and
/// `target_faces`.
pub fn interpolate(model: &Model, video: &Matrix, source_faces: &Matrix, target_faces: &Matrix, alpha: f64) -> Result<Matrix> {
    check_alpha(alpha)?;
    let a = model.encode_faces(source_faces)?;
    let b = model.encode_faces(target_faces)?;
    synthesize_from_embedding(model, video, &mix_embeddings(&a, &b, alpha)?)
}

/// One conversion job. `secondary` is required when `alpha` is strictly
/// between 0 and 1.
#[derive(Clone, Debug)]
pub struct ConversionRequest {
    pub video: Matrix,
    pub identity: Matrix,
    pub secondary: Option<Matrix>,
    pub alpha: f64,
}

impl ConversionRequest {
    pub fn run(&self, model: &Model) -> Result<Matrix> {
        check_alpha(self.alpha)?;
        match &self.secondary {
            Some(other) => interpolate(model, &self.video, &self.identity, other, self.alpha),
            None if self.alpha == 0.0 => synthesize(model, &self.video, &self.identity),
            None => Err(Error::Invalid("interpolation needs a second identity source".into())),
        }
    }
}

/// Sweeps `alpha` over `alphas` reusing the content encoding.
pub fn interpolation_sweep(
    model: &Model,
    video: &Matrix,
    source_faces: &Matrix,
    target_faces: &Matrix,
    alphas: &[f64],
) -> Result<Vec<Matrix>> {
    let content = model.encode_content(video)?;
    let a = model.encode_faces(source_faces)?;
    let b = model.encode_faces(target_faces)?;
    alphas.iter().map(|&al| blend_with(model, &content, &mix_embeddings(&a, &b, al)?)).collect()
}

/// Writes `mel` as `<name>.f32` with its shape sidecar.
pub fn write_mel(dir: &Path, name: &str, mel: &Matrix) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_matrix(dir, name, mel)
}

/// 8-bit binary PGM: time runs left to right, the lowest Mel bin is the
/// bottom row. Values are min-max scaled per image; a constant image is black.
pub fn render_pgm(mel: &Matrix) -> Vec<u8> {
    let (frames, bins) = mel.shape();
    let lo = mel.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mel.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{frames} {bins}\n255\n").into_bytes();
    for b in (0..bins).rev() {
        for t in 0..frames {
            let v = if span > 0.0 { (mel.get(t, b) - lo) / span } else { 0.0 };
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::miest::EstimatorConfig;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model {
        let cfg = ModelConfig {
            d: 8,
            blender_layers: 1,
            heads: 2,
            content_layers: 1,
            video_dim: 6,
            face_dim: 5,
            mel_bins: 80,
            mel_per_video_frame: 3,
            estimator: EstimatorConfig { hidden: 4, ..Default::default() },
            ..Default::default()
        };
        Model::new(cfg, 3).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let t = rng.random_range(1..20);
            let (v, f) = (random(&mut rng, t, 6), random(&mut rng, 4, 5));
            let a = synthesize(&m, &v, &f).unwrap();
            assert_eq!(a.shape(), (3 * t, 80));
            assert_eq!(a, synthesize(&m, &v, &f).unwrap());
        }
    }

    #[test]
    fn conversion_with_own_faces_is_synthesis() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (v, f) = (random(&mut rng, 7, 6), random(&mut rng, 3, 5));
        assert_eq!(convert(&m, &v, &f).unwrap(), synthesize(&m, &v, &f).unwrap());
    }

    #[test]
    fn endpoints_are_bit_exact() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (v, fi, fj) = (random(&mut rng, 9, 6), random(&mut rng, 3, 5), random(&mut rng, 6, 5));
        assert_eq!(interpolate(&m, &v, &fi, &fj, 0.0).unwrap(), synthesize(&m, &v, &fi).unwrap());
        assert_eq!(interpolate(&m, &v, &fi, &fj, 1.0).unwrap(), convert(&m, &v, &fj).unwrap());
        let sweep = interpolation_sweep(&m, &v, &fi, &fj, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(sweep[0], synthesize(&m, &v, &fi).unwrap());
        assert_eq!(sweep[1], interpolate(&m, &v, &fi, &fj, 0.5).unwrap());
        assert!(interpolate(&m, &v, &fi, &fj, 1.5).is_err());
        assert!(interpolate(&m, &v, &fi, &fj, -0.1).is_err());
    }

    #[test]
    fn output_depends_on_faces_only_through_pooled_embedding() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = random(&mut rng, 5, 6);
        let f = random(&mut rng, 4, 5);
        let g = f.select_rows(&[3, 1, 0, 2]);
        assert_eq!(m.encode_faces(&f).unwrap(), m.encode_faces(&g).unwrap());
        assert_eq!(convert(&m, &v, &f).unwrap(), convert(&m, &v, &g).unwrap());
        // Duplicating every row keeps the mean up to rounding.
        let h = f.select_rows(&[3, 1, 0, 2, 2, 0, 1, 3]);
        assert!(convert(&m, &v, &f).unwrap().max_abs_diff(&convert(&m, &v, &h).unwrap()) < 1e-12);
    }

    #[test]
    fn request_validation() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let req = ConversionRequest { video: random(&mut rng, 4, 6), identity: random(&mut rng, 2, 5), secondary: None, alpha: 0.5 };
        assert!(req.run(&m).is_err());
        let ok = ConversionRequest { alpha: 0.0, ..req };
        assert_eq!(ok.run(&m).unwrap(), synthesize(&m, &ok.video, &ok.identity).unwrap());
        let empty = ConversionRequest { identity: Matrix::zeros(0, 5), ..ok };
        assert!(empty.run(&m).is_err());
    }

    #[test]
    fn pgm_layout() {
        // Two frames, three bins; bin 2 is the top row.
        let mel = Matrix::from_rows(&[vec![0.0, 1.2, 2.0], vec![3.6, 4.0, 6.0]]);
        let img = render_pgm(&mel);
        let header = b"P5\n2 3\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(&img[header.len()..], &[85, 255, 51, 170, 0, 153]);
        let flat = render_pgm(&Matrix::filled(2, 2, 7.0));
        assert!(flat[flat.len() - 4..].iter().all(|b| *b == 0));
    }
}
