// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy tokenizer and causal text encoder.
//!
//! Words are lower-cased runs of ASCII alphanumerics. Each word hashes onto a
//! stable 31-bit id space; the encoder turns every id into a seeded unit
//! vector and mixes earlier positions into later ones with geometric decay,
//! so the last content token "sees" the whole prompt.
//!
//! Words of the form `axis<k>` are reserved: they map to the coordinate
//! vector `e_{k+1}` of the embedding space, and `[EOT]` maps to `e_0`. Prompts
//! built only from axis words are exactly orthogonal to one another, which
//! the pipeline uses to construct non-target prompts with known geometry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{axpy, norm, Mat};

/// Fixed prompt length used by CLIP text encoders.
pub const DEFAULT_TOKEN_LENGTH: usize = 77;

/// Weight applied per step of distance in the causal mix.
pub const CAUSAL_DECAY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const SOT: TokenId = TokenId(1);
    pub const EOT: TokenId = TokenId(2);
    const AXIS_FLAG: u32 = 0x8000_0000;
    const FIRST_WORD: u32 = 3;

    /// Id of a single (already normalized) word.
    pub fn for_word(word: &str) -> TokenId {
        if let Some(axis) = parse_axis(word) {
            return TokenId(Self::AXIS_FLAG | axis);
        }
        let span = Self::AXIS_FLAG - Self::FIRST_WORD;
        TokenId(Self::FIRST_WORD + fnv1a32(word.as_bytes()) % span)
    }

    /// Coordinate index for reserved axis words.
    pub fn axis(self) -> Option<u32> {
        (self.0 & Self::AXIS_FLAG != 0).then_some(self.0 & !Self::AXIS_FLAG)
    }
}

fn parse_axis(word: &str) -> Option<u32> {
    let digits = word.strip_prefix("axis")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits
        .parse::<u32>()
        .ok()
        .filter(|&k| k < TokenId::AXIS_FLAG)
}

fn fnv1a32(bytes: &[u8]) -> u32 {
    bytes.iter().fold(0x811c_9dc5u32, |h, &b| {
        (h ^ u32::from(b)).wrapping_mul(0x0100_0193)
    })
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// A fixed-length, padded token sequence: `[SOT] w_1 .. w_k [EOT] .. [EOT]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    words: Vec<String>,
    content_len: usize,
}

impl TokenSequence {
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn sot_index(&self) -> usize {
        0
    }

    /// Number of real-word tokens.
    pub fn content_len(&self) -> usize {
        self.content_len
    }

    /// Index of the first `[EOT]`.
    pub fn eot_start(&self) -> usize {
        self.content_len + 1
    }

    /// Position of the last subject token (the last word).
    pub fn last_subject(&self) -> Option<usize> {
        (self.content_len > 0).then_some(self.content_len)
    }

    /// The normalized prompt text, words joined by single spaces.
    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Split `text` into words and pad to `length` tokens.
pub fn tokenize(text: &str, length: usize) -> Result<TokenSequence> {
    let words: Vec<String> = text
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_ascii_lowercase)
        .collect();
    if words.is_empty() {
        return Err(Error::PromptTooShort);
    }
    let max = length.saturating_sub(2);
    if words.len() > max {
        return Err(Error::PromptTooLong {
            words: words.len(),
            max,
        });
    }
    let mut ids = Vec::with_capacity(length);
    ids.push(TokenId::SOT);
    ids.extend(words.iter().map(|w| TokenId::for_word(w)));
    ids.resize(length, TokenId::EOT);
    Ok(TokenSequence {
        ids,
        content_len: words.len(),
        words,
    })
}

/// Where an embedding matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Prompt,
    TargetRaw,
    TargetPreprocessed,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Prompt => "prompt",
            Provenance::TargetRaw => "target-raw",
            Provenance::TargetPreprocessed => "target-preprocessed",
        }
    }
}

/// `l x D_c` token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Mat,
    provenance: Provenance,
}

impl EmbeddingMatrix {
    pub fn new(rows: Mat, provenance: Provenance) -> Self {
        Self { rows, provenance }
    }

    pub fn matrix(&self) -> &Mat {
        &self.rows
    }

    pub fn into_matrix(self) -> Mat {
        self.rows
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.rows.row(j)
    }

    /// Number of pairwise distinct rows (exact comparison).
    pub fn distinct_rows(&self) -> usize {
        let mut seen: Vec<&[f64]> = Vec::new();
        for r in self.rows.row_iter() {
            if !seen.contains(&r) {
                seen.push(r);
            }
        }
        seen.len()
    }
}

/// Seeded causal toy encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEncoder {
    seed: u64,
    dim: usize,
}

impl TextEncoder {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty);
        }
        Ok(Self { seed, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Unit base vector for a token id.
    pub fn base(&self, id: TokenId) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let axis = match id {
            TokenId::EOT => Some(0),
            _ => id.axis().map(|k| k as usize + 1),
        };
        if let Some(a) = axis {
            if a >= self.dim {
                return Err(Error::AxisOutOfRange {
                    axis: id.axis().unwrap_or(0),
                    dim: self.dim,
                });
            }
            v[a] = 1.0;
            return Ok(v);
        }
        let mut key = self.seed.to_le_bytes().to_vec();
        key.extend_from_slice(&id.0.to_le_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&key));
        loop {
            v.iter_mut()
                .for_each(|x| *x = StandardNormal.sample(&mut rng));
            let n = norm(&v);
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                return Ok(v);
            }
        }
    }

    /// Encode with the causal mix: row 0 is the `[SOT]` base vector, and for
    /// `j >= 1` row `j` is the normalized `sum_{1 <= i <= j} decay^{j-i} base(id_i)`.
    ///
    /// `[SOT]` is kept out of the mix so content rows carry no shared prefix
    /// direction.
    pub fn encode(&self, tokens: &TokenSequence) -> Result<EmbeddingMatrix> {
        let bases = self.bases(tokens)?;
        self.encode_bases(&bases)
    }

    /// Base vector for every position of `tokens`.
    pub fn bases(&self, tokens: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        tokens.ids().iter().map(|&id| self.base(id)).collect()
    }

    /// Causal mix over explicit per-position base vectors (position 0 is
    /// `[SOT]`). Lets callers build concepts with a prescribed geometry.
    pub fn encode_bases(&self, bases: &[Vec<f64>]) -> Result<EmbeddingMatrix> {
        let l = bases.len();
        if l == 0 {
            return Err(Error::Empty);
        }
        for b in bases {
            if b.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    found: b.len(),
                });
            }
            crate::linalg::check_finite(b)?;
        }
        let mut rows = Mat::zeros(l, self.dim);
        rows.row_mut(0).copy_from_slice(&bases[0]);
        let mut acc = vec![0.0; self.dim];
        for (j, base) in bases.iter().enumerate().skip(1) {
            acc.iter_mut().for_each(|x| *x *= CAUSAL_DECAY);
            axpy(1.0, base, &mut acc);
            let n = norm(&acc);
            let row = rows.row_mut(j);
            if n > 0.0 {
                row.iter_mut().zip(&acc).for_each(|(r, a)| *r = a / n);
            }
        }
        Ok(EmbeddingMatrix::new(rows, Provenance::Prompt))
    }
}

/// Duplicate the last subject token over every position except `[SOT]`.
///
/// Accepts raw target embeddings (and already-preprocessed ones, which it
/// leaves unchanged). Prompt embeddings are rejected.
pub fn preprocess_target(emb: &EmbeddingMatrix, tokens: &TokenSequence) -> Result<EmbeddingMatrix> {
    match emb.provenance() {
        Provenance::TargetRaw | Provenance::TargetPreprocessed => {}
        other => {
            return Err(Error::WrongProvenance {
                expected: Provenance::TargetRaw.name(),
                found: other.name(),
            })
        }
    }
    if emb.len() != tokens.len() {
        return Err(Error::DimensionMismatch {
            expected: tokens.len(),
            found: emb.len(),
        });
    }
    let k = tokens.last_subject().ok_or(Error::NoContentToken)?;
    let subject = emb.row(k).to_vec();
    let mut rows = emb.matrix().clone();
    for j in 1..rows.rows() {
        rows.row_mut(j).copy_from_slice(&subject);
    }
    Ok(EmbeddingMatrix::new(rows, Provenance::TargetPreprocessed))
}
