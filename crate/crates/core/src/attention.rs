// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-head cross-attention layer with an erasure hook on the value path.
//!
//! Shapes:
//!
//! - latent `z`: `HW x D_z`
//! - text embedding `C`: `l x D_c`
//! - `Q = z W_Q` (`HW x d`), `K = C W_K` (`l x d`), `V = C W_V` (`l x d`)
//! - `A = softmax(Q K^T / sqrt(d))` (`HW x l`)
//! - output `(A V) W_out` (`HW x D_z`)
//!
//! Erasure only ever replaces `V`; the attention map is always computed from
//! the unmodified keys.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::eraser::{
    compute_values, erase_multi, erase_single, ShiftConfig, ShiftMode, TargetBasis, ValueMatrix,
    ValueProjector,
};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::tokens::EmbeddingMatrix;

/// Latent image features, one row per spatial position.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeatures(Mat);

impl LatentFeatures {
    pub fn new(tokens: Mat) -> Self {
        Self(tokens)
    }

    pub fn matrix(&self) -> &Mat {
        &self.0
    }

    pub fn into_matrix(self) -> Mat {
        self.0
    }

    pub fn positions(&self) -> usize {
        self.0.rows()
    }

    pub fn channels(&self) -> usize {
        self.0.cols()
    }

    /// Mean over spatial positions.
    pub fn pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.channels()];
        for r in self.0.row_iter() {
            linalg::axpy(1.0, r, &mut out);
        }
        let n = self.positions() as f64;
        out.iter_mut().for_each(|x| *x /= n);
        out
    }
}

/// Layer dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    /// Text embedding width `D_c`.
    pub embed: usize,
    /// Head dimension `d`.
    pub head: usize,
    /// Latent channel count `D_z`.
    pub latent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CALayer {
    query: Mat,
    key: Mat,
    value: ValueProjector,
    output: Mat,
}

/// What to erase in [`forward_erased`].
#[derive(Debug, Clone, Copy)]
pub enum ErasureTarget<'a> {
    Single(&'a ValueMatrix),
    Multi(&'a TargetBasis),
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows {
        for x in m.row_mut(i) {
            let g: f64 = StandardNormal.sample(rng);
            *x = g * scale;
        }
    }
    m
}

impl CALayer {
    pub fn new(query: Mat, key: Mat, value: ValueProjector, output: Mat) -> Result<Self> {
        let d = query.cols();
        let expect = |want: usize, got: usize| {
            if want == got {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    expected: want,
                    found: got,
                })
            }
        };
        expect(d, key.cols())?;
        expect(d, value.output_dim())?;
        expect(key.rows(), value.input_dim())?;
        expect(d, output.rows())?;
        expect(query.rows(), output.cols())?;
        if !(query.is_finite() && key.is_finite() && output.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            query,
            key,
            value,
            output,
        })
    }

    /// Seeded random layer.
    ///
    /// When `D_c <= d` the value projector has orthonormal rows, so inner
    /// products between text embeddings carry over unchanged into the value
    /// space. Otherwise it is a scaled Gaussian matrix.
    pub fn seeded(dims: LayerDims, seed: u64) -> Result<Self> {
        let LayerDims {
            embed,
            head,
            latent,
        } = dims;
        if embed == 0 || head == 0 || latent == 0 {
            return Err(Error::Empty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query = gaussian(&mut rng, latent, head, 1.0 / (latent as f64).sqrt());
        let key = gaussian(&mut rng, embed, head, 1.0);
        let value = if embed <= head {
            loop {
                let raw = gaussian(&mut rng, embed, head, 1.0);
                let rows: Vec<&[f64]> = raw.row_iter().collect();
                if let Ok(set) = linalg::gram_schmidt(&rows, linalg::DEFAULT_DEP_TOL) {
                    break Mat::from_rows(set.basis())?;
                }
            }
        } else {
            gaussian(&mut rng, embed, head, 1.0 / (embed as f64).sqrt())
        };
        let output = gaussian(&mut rng, head, latent, 1.0 / (head as f64).sqrt());
        Self::new(query, key, ValueProjector::new(value)?, output)
    }

    pub fn head_dim(&self) -> usize {
        self.query.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.query.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.key.rows()
    }

    pub fn value_projector(&self) -> &ValueProjector {
        &self.value
    }

    pub fn query(&self) -> &Mat {
        &self.query
    }

    pub fn key(&self) -> &Mat {
        &self.key
    }

    pub fn output(&self) -> &Mat {
        &self.output
    }

    fn check_inputs(&self, z: &LatentFeatures, emb: &EmbeddingMatrix) -> Result<()> {
        if z.channels() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                found: z.channels(),
            });
        }
        if emb.dim() != self.embed_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.embed_dim(),
                found: emb.dim(),
            });
        }
        Ok(())
    }
}

/// Row-stochastic `HW x l` attention map.
pub fn attention_map(z: &LatentFeatures, emb: &EmbeddingMatrix, layer: &CALayer) -> Result<Mat> {
    layer.check_inputs(z, emb)?;
    let q = z.matrix().matmul(&layer.query)?;
    let k = emb.matrix().matmul(&layer.key)?;
    let scale = 1.0 / (layer.head_dim() as f64).sqrt();
    let mut a = Mat::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        let row = a.row_mut(i);
        for (j, x) in row.iter_mut().enumerate() {
            *x = linalg::dot(qi, k.row(j)) * scale;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(a)
}

/// Layer output for an explicit value matrix: `(A V) W_out`.
pub fn forward_with_values(
    z: &LatentFeatures,
    emb: &EmbeddingMatrix,
    values: &ValueMatrix,
    layer: &CALayer,
) -> Result<LatentFeatures> {
    if values.shape() != (emb.len(), layer.head_dim()) {
        return Err(Error::ShapeMismatch {
            left: (emb.len(), layer.head_dim()),
            right: values.shape(),
        });
    }
    let a = attention_map(z, emb, layer)?;
    let av = a.matmul(values.matrix())?;
    Ok(LatentFeatures(av.matmul(&layer.output)?))
}

pub fn forward(
    z: &LatentFeatures,
    emb: &EmbeddingMatrix,
    layer: &CALayer,
) -> Result<LatentFeatures> {
    let v = compute_values(emb, &layer.value)?;
    forward_with_values(z, emb, &v, layer)
}

/// Forward pass with the prompt values replaced by their erased version.
/// Returns the output and the erased values.
pub fn forward_erased(
    z: &LatentFeatures,
    emb: &EmbeddingMatrix,
    layer: &CALayer,
    target: ErasureTarget<'_>,
    cfg: &ShiftConfig,
    mode: ShiftMode,
) -> Result<(LatentFeatures, ValueMatrix)> {
    let fp = layer.value.fingerprint();
    let target_fp = match target {
        ErasureTarget::Single(v) => v.projector(),
        ErasureTarget::Multi(b) => b.projector(),
    };
    if target_fp.is_some_and(|t| t != fp) {
        return Err(Error::BasisLayerMismatch);
    }
    let v = compute_values(emb, &layer.value)?;
    let erased = match target {
        ErasureTarget::Single(t) => erase_single(&v, t, cfg, mode)?,
        ErasureTarget::Multi(b) => erase_multi(&v, b, cfg, mode)?,
    };
    let out = forward_with_values(z, emb, &erased, layer)?;
    Ok((out, erased))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::{tokenize, Provenance, TextEncoder};

    fn dims() -> LayerDims {
        LayerDims {
            embed: 8,
            head: 8,
            latent: 5,
        }
    }

    fn latent(hw: usize, dz: usize, seed: u64) -> LatentFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentFeatures::new(gaussian(&mut rng, hw, dz, 1.0))
    }

    #[test]
    fn uniform_logits_give_uniform_map() {
        let mut layer = CALayer::seeded(dims(), 1).unwrap();
        layer.query = Mat::zeros(5, 8);
        let enc = TextEncoder::new(0, 8).unwrap();
        let emb = enc.encode(&tokenize("a cat", 6).unwrap()).unwrap();
        let a = attention_map(&latent(3, 5, 2), &emb, &layer).unwrap();
        assert!(a.as_slice().iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn rows_are_stochastic() {
        let layer = CALayer::seeded(dims(), 4).unwrap();
        let enc = TextEncoder::new(0, 8).unwrap();
        let emb = enc.encode(&tokenize("a red cat", 10).unwrap()).unwrap();
        let a = attention_map(&latent(7, 5, 3), &emb, &layer).unwrap();
        for r in a.row_iter() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn dominant_logit_saturates() {
        // one key aligned with the query scaled so its logit leads by exactly 50
        let d = 2;
        let query = Mat::identity(d);
        let key = Mat::identity(d);
        let value = ValueProjector::new(Mat::identity(d)).unwrap();
        let layer = CALayer::new(query, key, value, Mat::identity(d)).unwrap();
        let lead = 50.0 * (d as f64).sqrt();
        let z = LatentFeatures::new(Mat::from_rows(&[[lead, 0.0]]).unwrap());
        let emb = EmbeddingMatrix::new(Mat::identity(2), Provenance::Prompt);
        let a = attention_map(&z, &emb, &layer).unwrap();
        // scalar oracle: 1 / (1 + e^{-50})
        let oracle = 1.0 / (1.0 + (-50.0f64).exp());
        assert!(a[(0, 0)] > 1.0 - 1e-15);
        assert_eq!(a[(0, 0)], oracle);
    }

    #[test]
    fn zero_embeddings_give_zero_output() {
        let layer = CALayer::seeded(dims(), 5).unwrap();
        let emb = EmbeddingMatrix::new(Mat::zeros(4, 8), Provenance::Prompt);
        let out = forward(&latent(3, 5, 1), &emb, &layer).unwrap();
        assert!(out.matrix().as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn degenerate_shapes() {
        let layer = CALayer::seeded(dims(), 5).unwrap();
        let emb = EmbeddingMatrix::new(Mat::from_rows(&[[0.5; 8]]).unwrap(), Provenance::Prompt);
        let z = latent(1, 5, 9);
        let out = forward(&z, &emb, &layer).unwrap();
        let v = compute_values(&emb, layer.value_projector()).unwrap();
        let expect = layer.output().left_mul(v.row(0)).unwrap();
        assert_eq!(out.matrix().row(0), expect.as_slice());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_triple_loop_oracle() {
        let layer = CALayer::seeded(dims(), 11).unwrap();
        let enc = TextEncoder::new(2, 8).unwrap();
        let emb = enc
            .encode(&tokenize("an old red barn", 9).unwrap())
            .unwrap();
        let z = latent(6, 5, 12);
        let out = forward(&z, &emb, &layer).unwrap();

        let (hw, l, d, dz, dc) = (6, 9, 8, 5, 8);
        let c = emb.matrix();
        let m = |a: &Mat, i, j| a[(i, j)];
        let mut q = vec![vec![0.0; d]; hw];
        for i in 0..hw {
            for k in 0..d {
                q[i][k] = (0..dz)
                    .map(|c2| m(z.matrix(), i, c2) * m(layer.query(), c2, k))
                    .sum();
            }
        }
        let proj = |w: &Mat| -> Vec<Vec<f64>> {
            (0..l)
                .map(|j| {
                    (0..d)
                        .map(|k| (0..dc).map(|e| m(c, j, e) * m(w, e, k)).sum())
                        .collect()
                })
                .collect()
        };
        let kk = proj(layer.key());
        let vv = proj(layer.value_projector().matrix());
        for i in 0..hw {
            let logits: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|k| q[i][k] * kk[j][k]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for o in 0..dz {
                let mut acc = 0.0;
                for j in 0..l {
                    for k in 0..d {
                        acc += e[j] / s * vv[j][k] * m(layer.output(), k, o);
                    }
                }
                assert!((acc - out.matrix()[(i, o)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_linear_in_values() {
        let layer = CALayer::seeded(dims(), 13).unwrap();
        let enc = TextEncoder::new(2, 8).unwrap();
        let emb = enc.encode(&tokenize("a dog", 5).unwrap()).unwrap();
        let z = latent(4, 5, 14);
        let v = compute_values(&emb, layer.value_projector()).unwrap();
        let scaled = ValueMatrix::new(v.matrix().scale(2.5), v.kind());
        let a = forward_with_values(&z, &emb, &v, &layer).unwrap();
        let b = forward_with_values(&z, &emb, &scaled, &layer).unwrap();
        for (x, y) in a.matrix().as_slice().iter().zip(b.matrix().as_slice()) {
            assert!((2.5 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormal_value_projector_when_it_fits() {
        let layer = CALayer::seeded(dims(), 21).unwrap();
        let w = layer.value_projector().matrix();
        let g = w.matmul(&w.transpose()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_checks() {
        let layer = CALayer::seeded(dims(), 1).unwrap();
        let emb = EmbeddingMatrix::new(Mat::zeros(3, 7), Provenance::Prompt);
        assert!(matches!(
            forward(&latent(2, 5, 0), &emb, &layer),
            Err(Error::DimensionMismatch { .. })
        ));
        let emb = EmbeddingMatrix::new(Mat::zeros(3, 8), Provenance::Prompt);
        assert!(matches!(
            forward(&latent(2, 4, 0), &emb, &layer),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
