//! Fréchet distance over codec-encoder features and caption-loss reranking.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::log_sum_exp;
use crate::checkpoint::Checkpoint;
use crate::dataset::{self, encode_caption, Layout, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::lm::{self, Lm};
use crate::vq_codec::{CodebookGrid, VqCodec};

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `F x F`.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Unbiased mean/covariance of row vectors (two-pass, fp64).
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: features.len(),
            });
        }
        let f = features[0].len();
        if features.iter().any(|r| r.len() != f) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; f];
        for r in features {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = DMatrix::<f64>::zeros(f, f);
        for r in features {
            let c = DVector::from_iterator(f, r.iter().zip(&mean).map(|(v, m)| v - m));
            cov.ger(1.0, &c, &c, 1.0);
        }
        cov /= n - 1.0;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self {
            mean,
            covariance: cov.transpose().as_slice().to_vec(),
            count: features.len(),
        })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }

    /// Smallest covariance eigenvalue (PSD check).
    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.cov_matrix())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Encoder features of every image (resized to the codec input if needed).
pub fn encoder_features(images: &[ImageBuffer], codec: &VqCodec<f32>) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|img| {
            let x = dataset::preprocess(img, codec.config.input_side)?;
            codec.features(&x)
        })
        .collect()
}

pub fn summarize_features(images: &[ImageBuffer], codec: &VqCodec<f32>) -> Result<GaussianSummary> {
    if images.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: images.len(),
        });
    }
    GaussianSummary::from_features(&encoder_features(images, codec)?)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// `Tr((S_a S_b)^(1/2))` is evaluated as the trace of the square root of the
/// symmetric `S_a^(1/2) S_b S_a^(1/2)` (same eigenvalues), with negative
/// eigenvalues clamped to zero.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "summary dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ra = psd_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    Ok((mean + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

// ------------------------------------------------------------------ caption loss

/// Mean cross-entropy of the caption's text tokens given the image prefix,
/// with the softmax restricted to the text vocabulary.
pub fn caption_loss(
    inverse: &Lm<f32>,
    vocab: &Vocabulary,
    grid: &CodebookGrid,
    caption: &str,
) -> Result<f64> {
    let spec = inverse.config.spec;
    if spec.layout != Layout::ImageFirst {
        return Err(Error::Config(
            "caption loss needs an image-first model".into(),
        ));
    }
    if vocab.size() != spec.text_vocab {
        return Err(Error::Config("vocabulary does not match the model".into()));
    }
    let text = encode_caption(vocab, caption, spec.t_text);
    let seq = TokenSequence::build(&spec, &text, &grid.indices)?;
    let logits = inverse.forward(&seq)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, target) in seq.targets().iter().enumerate() {
        if let Some(y) = *target {
            if spec.is_image_id(y) {
                continue;
            }
            let row = logits.row(t);
            let text_logits = row.iter().take(spec.text_vocab).map(|&v| f64::from(v));
            total += log_sum_exp(text_logits) - f64::from(row[y]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedLoss);
    }
    Ok(total / count as f64)
}

/// An inverse (image-first) model that has been trained.
#[derive(Clone, Debug)]
pub struct CaptionScorer {
    pub model: Lm<f32>,
    pub vocab: Vocabulary,
}

impl CaptionScorer {
    pub fn new(model: Lm<f32>, trained_steps: u64, vocab: Vocabulary) -> Result<Self> {
        if model.config.spec.layout != Layout::ImageFirst {
            return Err(Error::Config(
                "caption scorer needs an image-first model".into(),
            ));
        }
        if trained_steps == 0 {
            return Err(Error::Config("inverse model is untrained".into()));
        }
        Ok(Self { model, vocab })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = Lm::from_checkpoint(ck)?;
        let vocab_json = ck.metadata["vocab"]
            .as_str()
            .ok_or_else(|| Error::Config("checkpoint carries no vocabulary".into()))?;
        Self::new(
            model,
            lm::checkpoint_trained_steps(ck),
            Vocabulary::from_json(vocab_json)?,
        )
    }

    pub fn loss(&self, grid: &CodebookGrid, caption: &str) -> Result<f64> {
        caption_loss(&self.model, &self.vocab, grid, caption)
    }

    /// Orders `grids` by ascending caption loss; ties by grid hash.
    /// Returns `(input index, loss)` pairs.
    pub fn rerank(&self, grids: &[CodebookGrid], caption: &str) -> Result<Vec<(usize, f64)>> {
        let losses: Vec<f64> = grids
            .par_iter()
            .map(|g| self.loss(g, caption))
            .collect::<Result<_>>()?;
        Ok(rerank_by(grids, &losses))
    }
}

/// Stable ascending sort of grids by `losses`, tie-broken by [`grid_hash`].
pub fn rerank_by(grids: &[CodebookGrid], losses: &[f64]) -> Vec<(usize, f64)> {
    let mut order: Vec<(usize, f64, u64)> = grids
        .iter()
        .zip(losses)
        .enumerate()
        .map(|(i, (g, &l))| (i, l, grid_hash(g)))
        .collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.cmp(&b.2)));
    order.into_iter().map(|(i, l, _)| (i, l)).collect()
}

/// First 8 bytes of the SHA-256 of the grid's little-endian u32 indices.
pub fn grid_hash(g: &CodebookGrid) -> u64 {
    let mut h = Sha256::new();
    for &i in &g.indices {
        h.update((i as u32).to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SequenceSpec;
    use crate::lm::LmConfig;
    use crate::rng::DetRng;
    use crate::vq_codec::CodecConfig;

    fn summary(mean: Vec<f64>, cov: Vec<f64>) -> GaussianSummary {
        GaussianSummary {
            mean,
            covariance: cov,
            count: 10,
        }
    }

    fn random_summary(r: &mut DetRng, f: usize, n: usize) -> GaussianSummary {
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..f).map(|_| r.normal()).collect())
            .collect();
        GaussianSummary::from_features(&feats).unwrap()
    }

    #[test]
    fn frechet_closed_forms() {
        let mut r = DetRng::new(1);
        let a = random_summary(&mut r, 6, 40);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
        let mut shifted = a.clone();
        let d = [0.5, -1.0, 0.0, 2.0, 0.1, 0.3];
        for (m, dv) in shifted.mean.iter_mut().zip(d) {
            *m += dv;
        }
        let want: f64 = d.iter().map(|v| v * v).sum();
        assert!((frechet_distance(&a, &shifted).unwrap() - want).abs() < 1e-9);
        // 1-D: (mu_a - mu_b)^2 + (sigma_a - sigma_b)^2
        let x = summary(vec![1.0], vec![4.0]);
        let y = summary(vec![-0.5], vec![0.25]);
        let want = 1.5f64.powi(2) + (2.0f64 - 0.5).powi(2);
        assert!((frechet_distance(&x, &y).unwrap() - want).abs() < 1e-12);
        let b = random_summary(&mut r, 6, 30);
        let (ab, ba) = (
            frechet_distance(&a, &b).unwrap(),
            frechet_distance(&b, &a).unwrap(),
        );
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-9);
        assert!(matches!(
            frechet_distance(&a, &summary(vec![0.0], vec![1.0])),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn summary_oracle_and_psd() {
        let mut r = DetRng::new(2);
        let feats: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..5).map(|_| r.normal() * 3.0 + 1.0).collect())
            .collect();
        let s = GaussianSummary::from_features(&feats).unwrap();
        for i in 0..5 {
            let m: f64 = feats.iter().map(|f| f[i]).sum::<f64>() / 50.0;
            assert!((s.mean[i] - m).abs() < 1e-10);
            for j in 0..5 {
                let mj: f64 = feats.iter().map(|f| f[j]).sum::<f64>() / 50.0;
                let c: f64 = feats.iter().map(|f| (f[i] - m) * (f[j] - mj)).sum::<f64>() / 49.0;
                assert!((s.covariance[i * 5 + j] - c).abs() < 1e-10);
            }
        }
        assert!(s.min_eigenvalue() >= -1e-8);
        let dup = vec![vec![1.0, 2.0]; 4];
        assert!(GaussianSummary::from_features(&dup)
            .unwrap()
            .covariance
            .iter()
            .all(|&v| v == 0.0));
        assert!(matches!(
            GaussianSummary::from_features(&dup[..1]),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn summarize_is_order_invariant() {
        let codec = VqCodec::<f32>::init(
            CodecConfig {
                input_side: 8,
                codebook_size: 4,
                code_dim: 3,
                enc_channels: 2,
                dec_channels: [2, 2],
                logit_scale: 1.0,
            },
            1,
        )
        .unwrap();
        let mut r = DetRng::new(3);
        let imgs: Vec<ImageBuffer> = (0..5)
            .map(|_| {
                ImageBuffer::from_fn(8, 8, 3, |_, _| [r.below(256) as u8, 40, 200, 0]).unwrap()
            })
            .collect();
        let a = summarize_features(&imgs, &codec).unwrap();
        let mut rev = imgs.clone();
        rev.reverse();
        let b = summarize_features(&rev, &codec).unwrap();
        assert_eq!(a.mean.len(), 3);
        for (x, y) in a
            .mean
            .iter()
            .zip(&b.mean)
            .chain(a.covariance.iter().zip(&b.covariance))
        {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn inverse_model(vocab: &Vocabulary) -> Lm<f32> {
        Lm::init(
            LmConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 8,
                spec: SequenceSpec {
                    t_text: 6,
                    t_image: 4,
                    text_vocab: vocab.size(),
                    image_vocab: 5,
                    layout: Layout::ImageFirst,
                },
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn uniform_model_gives_log_vocab() {
        let vocab = dataset::build_vocab(["кот", "пёс"]);
        let mut m = inverse_model(&vocab);
        for name in ["head.weight", "head.bias"] {
            m.params.get_mut(name).unwrap().fill(0.0);
        }
        let grid = CodebookGrid::new(2, vec![0, 4, 2, 1], 5).unwrap();
        let l = caption_loss(&m, &vocab, &grid, "кот").unwrap();
        assert!((l - (vocab.size() as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn scorer_rejects_untrained_and_reranks_stably() {
        let vocab = dataset::build_vocab(["ab"]);
        let m = inverse_model(&vocab);
        assert!(matches!(
            CaptionScorer::new(m.clone(), 0, vocab.clone()),
            Err(Error::Config(_))
        ));
        let scorer = CaptionScorer::new(m, 5, vocab).unwrap();
        let grids: Vec<CodebookGrid> = (0..6)
            .map(|i| CodebookGrid::new(2, vec![i % 5, (i + 1) % 5, 0, i % 2], 5).unwrap())
            .collect();
        let ranked = scorer.rerank(&grids, "ab").unwrap();
        let mut idx: Vec<usize> = ranked.iter().map(|r| r.0).collect();
        assert!(ranked.windows(2).all(|w| w[0].1 <= w[1].1));
        let mut rev = grids.clone();
        rev.reverse();
        let ranked_rev = scorer.rerank(&rev, "ab").unwrap();
        let a: Vec<&CodebookGrid> = ranked.iter().map(|r| &grids[r.0]).collect();
        let b: Vec<&CodebookGrid> = ranked_rev.iter().map(|r| &rev[r.0]).collect();
        assert_eq!(a, b);
        idx.sort();
        assert_eq!(idx, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn equal_losses_fall_back_to_hash() {
        let grids: Vec<CodebookGrid> = (0..4)
            .map(|i| CodebookGrid::new(1, vec![i], 4).unwrap())
            .collect();
        let ranked = rerank_by(&grids, &[1.0; 4]);
        let hashes: Vec<u64> = ranked.iter().map(|r| grid_hash(&grids[r.0])).collect();
        assert!(hashes.windows(2).all(|w| w[0] <= w[1]));
    }
}
