// SPDX-License-Identifier: MIT OR Apache-2.0

//! Orthogonal value decomposition with an adaptive erasing shift.
//!
//! For every token position `j >= 1` the prompt value vector `v` is moved
//! towards the orthogonal complement of the target value vectors at the same
//! position. With the shift disabled the move is the exact complement
//! projection. With the shift enabled each target direction is scaled by a
//! sigmoid of its cosine with `v`, so weakly related tokens are left almost
//! untouched. Position 0 (`[SOT]`) is never modified.
//!
//! Multi-concept erasure orthonormalizes the targets with Gram-Schmidt and
//! keeps the triangular weights `W` (`[v_1 .. v_n] W = [o_1 .. o_n]`) so the
//! shifted update can be written in terms of the raw target vectors:
//!
//! ```text
//! v_r = v - sum_h delta(v_t^h, v) * (sum_k w_hk <o_k, v>) * v_t^h
//! ```

use crate::error::{Error, Result};
use crate::linalg::{self, axpy, dot, norm, Mat, OrthonormalSet};
use crate::tokens::{EmbeddingMatrix, Provenance};

/// Stable fingerprint of a value projector, used to detect a basis being
/// applied to the wrong layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub u64);

impl Fingerprint {
    fn of(m: &Mat) -> Self {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let dims = [m.rows() as u64, m.cols() as u64];
        for word in dims
            .into_iter()
            .chain(m.as_slice().iter().map(|v| v.to_bits()))
        {
            for b in word.to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        Fingerprint(h)
    }
}

/// The `D_c x d` value projection `W_V` of one cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueProjector {
    matrix: Mat,
    fingerprint: Fingerprint,
}

impl ValueProjector {
    pub fn new(matrix: Mat) -> Result<Self> {
        if !matrix.is_finite() {
            return Err(Error::NonFinite);
        }
        let fingerprint = Fingerprint::of(&matrix);
        Ok(Self {
            matrix,
            fingerprint,
        })
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.matrix.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueKind {
    Original,
    TargetModified,
    Erased,
}

impl ValueKind {
    fn name(self) -> &'static str {
        match self {
            ValueKind::Original => "original",
            ValueKind::TargetModified => "target-modified",
            ValueKind::Erased => "erased",
        }
    }
}

/// `l x d` per-token value vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMatrix {
    rows: Mat,
    kind: ValueKind,
    projector: Option<Fingerprint>,
}

impl ValueMatrix {
    /// Wrap raw values, e.g. to inject values directly into a layer.
    pub fn new(rows: Mat, kind: ValueKind) -> Self {
        Self {
            rows,
            kind,
            projector: None,
        }
    }

    pub fn matrix(&self) -> &Mat {
        &self.rows
    }

    pub fn kind(&self) -> ValueKind {
        self.kind
    }

    /// Fingerprint of the projector the values came from, if known.
    pub fn projector(&self) -> Option<Fingerprint> {
        self.projector
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

    pub fn shape(&self) -> (usize, usize) {
        self.rows.shape()
    }
}

/// Sigmoid shift-factor hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftConfig {
    /// Factor scale; the shift lies in `(0, s)`.
    pub s: f64,
    /// Steepness of the sigmoid.
    pub p: f64,
    /// Cosine threshold at which the shift equals `s / 2`.
    pub epsilon: f64,
    /// Norms below this are treated as zero.
    pub zero_tol: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            s: 2.0,
            p: 100.0,
            epsilon: 0.93,
            zero_tol: linalg::DEFAULT_ZERO_TOL,
        }
    }
}

impl ShiftConfig {
    pub fn new(s: f64, p: f64, epsilon: f64) -> Result<Self> {
        let cfg = Self {
            s,
            p,
            epsilon,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s.is_finite() && self.s > 0.0) {
            return Err(Error::InvalidShift(format!(
                "s must be > 0, got {}",
                self.s
            )));
        }
        if !(self.p.is_finite() && self.p > 0.0) {
            return Err(Error::InvalidShift(format!(
                "p must be > 0, got {}",
                self.p
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidShift(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if !(self.zero_tol.is_finite() && self.zero_tol >= 0.0) {
            return Err(Error::InvalidShift(format!(
                "zero_tol must be >= 0, got {}",
                self.zero_tol
            )));
        }
        Ok(())
    }

    /// The sigmoid evaluated at a given cosine.
    pub fn factor_at(&self, cos: f64) -> f64 {
        self.s / (1.0 + (-self.p * (cos - self.epsilon)).exp())
    }
}

/// How strongly each target direction is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ShiftMode {
    /// Exact complement projection.
    Off,
    /// Sigmoid-of-cosine shift per target direction.
    #[default]
    Adaptive,
    /// The shifted formula with every factor pinned to 1. Must agree with
    /// [`ShiftMode::Off`]; exists so both code paths can be checked
    /// against each other.
    Unit,
}

impl From<bool> for ShiftMode {
    fn from(adaptive: bool) -> Self {
        if adaptive {
            ShiftMode::Adaptive
        } else {
            ShiftMode::Off
        }
    }
}

/// Row-wise `emb * W_V`.
pub fn compute_values(emb: &EmbeddingMatrix, proj: &ValueProjector) -> Result<ValueMatrix> {
    if emb.dim() != proj.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: proj.input_dim(),
            found: emb.dim(),
        });
    }
    let rows = emb.matrix().matmul(proj.matrix())?;
    let kind = match emb.provenance() {
        Provenance::Prompt => ValueKind::Original,
        Provenance::TargetRaw | Provenance::TargetPreprocessed => ValueKind::TargetModified,
    };
    Ok(ValueMatrix {
        rows,
        kind,
        projector: Some(proj.fingerprint()),
    })
}

/// Target values from a preprocessed target embedding, with the `[SOT]` row
/// zeroed.
pub fn make_target_values(emb_pre: &EmbeddingMatrix, proj: &ValueProjector) -> Result<ValueMatrix> {
    if emb_pre.provenance() != Provenance::TargetPreprocessed {
        return Err(Error::WrongProvenance {
            expected: Provenance::TargetPreprocessed.name(),
            found: emb_pre.provenance().name(),
        });
    }
    let mut values = compute_values(emb_pre, proj)?;
    values.rows.row_mut(0).iter_mut().for_each(|x| *x = 0.0);
    values.kind = ValueKind::TargetModified;
    Ok(values)
}

/// Sigmoid shift factor for a target vector `vt` and a prompt vector `v`.
///
/// A zero-norm input counts as cosine 0.
pub fn shift_factor(vt: &[f64], v: &[f64], cfg: &ShiftConfig) -> f64 {
    let cos = linalg::cosine(vt, v, cfg.zero_tol).unwrap_or(0.0);
    cfg.factor_at(cos)
}

fn expect_kind(v: &ValueMatrix, kind: ValueKind) -> Result<()> {
    if v.kind == kind {
        Ok(())
    } else {
        Err(Error::WrongProvenance {
            expected: kind.name(),
            found: v.kind.name(),
        })
    }
}

/// Single-concept erasure.
pub fn erase_single(
    v_orig: &ValueMatrix,
    v_target: &ValueMatrix,
    cfg: &ShiftConfig,
    mode: ShiftMode,
) -> Result<ValueMatrix> {
    expect_kind(v_orig, ValueKind::Original)?;
    expect_kind(v_target, ValueKind::TargetModified)?;
    if v_orig.shape() != v_target.shape() {
        return Err(Error::ShapeMismatch {
            left: v_orig.shape(),
            right: v_target.shape(),
        });
    }
    let mut out = v_orig.rows.clone();
    for j in 1..out.rows() {
        let vt = v_target.row(j);
        let v = out.row_mut(j);
        let tt = dot(vt, vt);
        if tt.sqrt() < cfg.zero_tol || norm(v) < cfg.zero_tol {
            continue;
        }
        let delta = match mode {
            ShiftMode::Off => 1.0,
            ShiftMode::Unit => 1.0,
            ShiftMode::Adaptive => shift_factor(vt, v, cfg),
        };
        let coef = delta * dot(vt, v) / tt;
        axpy(-coef, vt, v);
    }
    Ok(ValueMatrix {
        rows: out,
        kind: ValueKind::Erased,
        projector: v_orig.projector,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct PositionBasis {
    raw: Vec<Vec<f64>>,
    set: OrthonormalSet,
}

/// Per-position orthonormal bases (positions `1..l`) for `n` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBasis {
    length: usize,
    dim: usize,
    projector: Option<Fingerprint>,
    dep_tol: f64,
    // index j - 1 holds token position j
    positions: Vec<PositionBasis>,
}

impl TargetBasis {
    /// A basis for no targets yet.
    pub fn empty(length: usize, dim: usize, dep_tol: f64) -> Self {
        Self {
            length,
            dim,
            projector: None,
            dep_tol,
            positions: (1..length)
                .map(|_| PositionBasis {
                    raw: Vec::new(),
                    set: OrthonormalSet::empty(dim, dep_tol),
                })
                .collect(),
        }
    }

    /// Number of targets.
    pub fn len(&self) -> usize {
        self.positions.first().map_or(0, |p| p.raw.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.length, self.dim)
    }

    pub fn projector(&self) -> Option<Fingerprint> {
        self.projector
    }

    /// Orthonormal set at token position `j`; `None` for position 0.
    pub fn at(&self, j: usize) -> Option<&OrthonormalSet> {
        j.checked_sub(1)
            .and_then(|i| self.positions.get(i))
            .map(|p| &p.set)
    }

    /// Raw target vectors at token position `j`.
    pub fn raw_at(&self, j: usize) -> Option<&[Vec<f64>]> {
        j.checked_sub(1)
            .and_then(|i| self.positions.get(i))
            .map(|p| p.raw.as_slice())
    }

    /// Add one more target. The basis is unchanged on error.
    pub fn push(&mut self, target: &ValueMatrix) -> Result<()> {
        expect_kind(target, ValueKind::TargetModified)?;
        if target.shape() != (self.length, self.dim) {
            return Err(Error::ShapeMismatch {
                left: (self.length, self.dim),
                right: target.shape(),
            });
        }
        if let (Some(a), Some(b)) = (self.projector, target.projector) {
            if a != b {
                return Err(Error::BasisLayerMismatch);
            }
        }
        let index = self.len();
        let mut next = self.positions.clone();
        for (i, pos) in next.iter_mut().enumerate() {
            let v = target.row(i + 1);
            pos.set.push(v).map_err(|e| match e {
                Error::LinearlyDependent { index } => Error::LinearlyDependentConcepts {
                    position: i + 1,
                    index,
                },
                other => other,
            })?;
            pos.raw.push(v.to_vec());
        }
        debug_assert!(next.iter().all(|p| p.raw.len() == index + 1));
        self.positions = next;
        if self.projector.is_none() {
            self.projector = target.projector;
        }
        Ok(())
    }
}

/// Gram-Schmidt over the targets at every position `j >= 1`.
pub fn build_target_basis(targets: &[ValueMatrix]) -> Result<TargetBasis> {
    build_target_basis_with_tol(targets, linalg::DEFAULT_DEP_TOL)
}

pub fn build_target_basis_with_tol(targets: &[ValueMatrix], dep_tol: f64) -> Result<TargetBasis> {
    let first = targets.first().ok_or(Error::Empty)?;
    let (length, dim) = first.shape();
    let mut basis = TargetBasis::empty(length, dim, dep_tol);
    for t in targets {
        basis.push(t)?;
    }
    Ok(basis)
}

/// Multi-concept erasure against a prebuilt basis.
pub fn erase_multi(
    v_orig: &ValueMatrix,
    basis: &TargetBasis,
    cfg: &ShiftConfig,
    mode: ShiftMode,
) -> Result<ValueMatrix> {
    expect_kind(v_orig, ValueKind::Original)?;
    if v_orig.shape() != basis.shape() {
        return Err(Error::ShapeMismatch {
            left: v_orig.shape(),
            right: basis.shape(),
        });
    }
    let mut out = v_orig.rows.clone();
    let n = basis.len();
    let mut proj = vec![0.0; n];
    for (i, pos) in basis.positions.iter().enumerate() {
        let v = out.row_mut(i + 1);
        if n == 0 || norm(v) < cfg.zero_tol {
            continue;
        }
        match mode {
            ShiftMode::Off => {
                let r = linalg::project_complement_basis(v, &pos.set)?;
                v.copy_from_slice(&r);
            }
            ShiftMode::Unit | ShiftMode::Adaptive => {
                for (p, o) in proj.iter_mut().zip(pos.set.basis()) {
                    *p = dot(o, v);
                }
                let original = v.to_vec();
                for (h, vt) in pos.raw.iter().enumerate() {
                    // W is upper triangular: w_hk = 0 for k < h
                    let coef: f64 = (h..n).map(|k| pos.set.weight(h, k) * proj[k]).sum();
                    let delta = match mode {
                        ShiftMode::Adaptive => shift_factor(vt, &original, cfg),
                        _ => 1.0,
                    };
                    axpy(-delta * coef, vt, v);
                }
            }
        }
    }
    Ok(ValueMatrix {
        rows: out,
        kind: ValueKind::Erased,
        projector: v_orig.projector,
    })
}

/// `v - v_r` row by row.
pub fn erased_component(v_orig: &ValueMatrix, v_erased: &ValueMatrix) -> Result<Mat> {
    if v_orig.shape() != v_erased.shape() {
        return Err(Error::ShapeMismatch {
            left: v_orig.shape(),
            right: v_erased.shape(),
        });
    }
    let data = v_orig
        .rows
        .as_slice()
        .iter()
        .zip(v_erased.rows.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    Mat::from_vec(v_orig.len(), v_orig.dim(), data)
}
