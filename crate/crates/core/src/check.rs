// SPDX-License-Identifier: MIT OR Apache-2.0

//! Randomized invariant suite.
//!
//! Every trial draws a fresh instance from its own seed, so a failure can be
//! replayed from the seed alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::eraser::{
    erase_multi, erase_single, ShiftConfig, ShiftMode, TargetBasis, ValueKind, ValueMatrix,
};
use crate::error::Result;
use crate::linalg::{self, Mat, OrthonormalSet};

pub const DEFAULT_TRIALS: usize = 200;

/// Projection oracle tolerance.
pub const ORACLE_TOL: f64 = 1e-8;
/// Orthogonality, idempotence and reduction tolerance.
pub const EXACT_TOL: f64 = 1e-10;

pub const MAX_TARGETS: usize = 8;
pub const MAX_DIM: usize = 64;
pub const MAX_GRAM_COND: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Property {
    OracleEquivalence,
    Orthogonality,
    Idempotence,
    SingleMultiReduction,
    UnitShiftReduction,
    SotPreserved,
}

impl Property {
    pub const ALL: [Property; 6] = [
        Property::OracleEquivalence,
        Property::Orthogonality,
        Property::Idempotence,
        Property::SingleMultiReduction,
        Property::UnitShiftReduction,
        Property::SotPreserved,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::OracleEquivalence => "oracle_equivalence",
            Property::Orthogonality => "orthogonality",
            Property::Idempotence => "idempotence",
            Property::SingleMultiReduction => "single_multi_reduction",
            Property::UnitShiftReduction => "unit_shift_reduction",
            Property::SotPreserved => "sot_preserved",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Property::OracleEquivalence => ORACLE_TOL,
            Property::SotPreserved => 0.0,
            _ => EXACT_TOL,
        }
    }
}

/// Deliberate corruption of one property's computation.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Skip the last basis vector in the basis-form projection.
    DropBasisVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyOutcome {
    pub property: Property,
    pub trials: usize,
    pub failures: usize,
    /// Largest error seen, compared against the property's tolerance.
    pub worst: f64,
    pub first_failing_seed: Option<u64>,
}

impl PropertyOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    /// `property=<name> status=<pass|fail> ...` on one line.
    pub fn summary(&self) -> String {
        let status = if self.passed() { "pass" } else { "fail" };
        let mut line = format!(
            "property={} status={status} trials={} failures={} worst={:e} tol={:e}",
            self.property.name(),
            self.trials,
            self.failures,
            self.worst,
            self.property.tolerance()
        );
        if let Some(seed) = self.first_failing_seed {
            line.push_str(&format!(" seed={seed}"));
        }
        line
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub outcomes: Vec<PropertyOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(PropertyOutcome::passed)
    }
}

/// Seed of trial `trial` under suite seed `seed`.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    let mut x = seed ^ (trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn orthonormal<R: Rng>(rng: &mut R, d: usize, n: usize) -> Vec<Vec<f64>> {
    loop {
        let raw: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(rng, d)).collect();
        if let Ok(set) = linalg::gram_schmidt(&raw, linalg::DEFAULT_DEP_TOL) {
            return set.basis().to_vec();
        }
    }
}

/// `n` random vectors in `d` dimensions whose Gram matrix has condition
/// number `gram_cond`, with a random overall scale in `[0.1, 10)`.
pub fn spanning_with_condition<R: Rng>(
    rng: &mut R,
    d: usize,
    n: usize,
    gram_cond: f64,
) -> Vec<Vec<f64>> {
    let left = orthonormal(rng, d, n);
    let right = orthonormal(rng, n, n);
    let scale: f64 = rng.gen_range(0.1..10.0);
    let sigma: Vec<f64> = (0..n)
        .map(|i| {
            let t = if n == 1 {
                0.0
            } else {
                i as f64 / (n - 1) as f64
            };
            scale * gram_cond.sqrt().powf(-t)
        })
        .collect();
    (0..n)
        .map(|h| {
            let mut col = vec![0.0; d];
            for i in 0..n {
                linalg::axpy(sigma[i] * right[i][h], &left[i], &mut col);
            }
            col
        })
        .collect()
}

/// Random prompt values and targets of shape `l x d` with `n` targets,
/// every target row 0 zeroed.
#[derive(Debug, Clone)]
pub struct ErasureInstance {
    pub values: ValueMatrix,
    pub targets: Vec<ValueMatrix>,
}

impl ErasureInstance {
    /// Dimensions are drawn so that `n < d`, keeping the complement nonempty.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let l = rng.gen_range(2..=6);
        let d = rng.gen_range(2..=MAX_DIM);
        let n = rng.gen_range(1..=MAX_TARGETS.min(d - 1));
        Self::with_shape(rng, l, d, n)
    }

    pub fn with_shape<R: Rng>(rng: &mut R, l: usize, d: usize, n: usize) -> Self {
        let mut rows = |zero_sot: bool| {
            let mut m = Mat::zeros(l, d);
            for j in usize::from(zero_sot)..l {
                m.row_mut(j).copy_from_slice(&gaussian_vec(rng, d));
            }
            m
        };
        let values = ValueMatrix::new(rows(false), ValueKind::Original);
        let targets = (0..n)
            .map(|_| ValueMatrix::new(rows(true), ValueKind::TargetModified))
            .collect();
        Self { values, targets }
    }

    pub fn basis(&self) -> Result<TargetBasis> {
        let (l, d) = self.values.shape();
        let mut b = TargetBasis::empty(l, d, linalg::DEFAULT_DEP_TOL);
        for t in &self.targets {
            b.push(t)?;
        }
        Ok(b)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn reopen(v: &ValueMatrix) -> ValueMatrix {
    ValueMatrix::new(v.matrix().clone(), ValueKind::Original)
}

/// Error measure of one trial; the trial passes when it is `<= tol`.
fn trial(property: Property, rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Result<f64> {
    let shift = ShiftConfig::default();
    match property {
        Property::OracleEquivalence => {
            let d = rng.gen_range(1..=MAX_DIM);
            let n = rng.gen_range(1..=MAX_TARGETS.min(d));
            let cond = 10f64.powf(rng.gen_range(0.0..=MAX_GRAM_COND.log10()));
            let span = spanning_with_condition(rng, d, n, cond);
            let v = gaussian_vec(rng, d);
            let mut set = OrthonormalSet::empty(d, linalg::DEFAULT_DEP_TOL);
            let keep = match fault {
                Some(Fault::DropBasisVector) => n - 1,
                None => n,
            };
            for s in &span[..keep] {
                set.push(s)?;
            }
            let a = linalg::project_complement_basis(&v, &set)?;
            let b = linalg::project_complement_inverse(
                &v,
                &Mat::from_columns(&span)?,
                linalg::DEFAULT_COND_MAX,
            )?;
            Ok(max_abs_diff(&a, &b))
        }
        Property::Orthogonality => {
            let inst = ErasureInstance::random(rng);
            let r = erase_multi(&inst.values, &inst.basis()?, &shift, ShiftMode::Off)?;
            let mut worst = 0.0f64;
            for t in &inst.targets {
                for j in 1..r.len() {
                    let c = linalg::cosine(r.row(j), t.row(j), linalg::DEFAULT_ZERO_TOL)?;
                    worst = worst.max(c.abs());
                }
            }
            Ok(worst)
        }
        Property::Idempotence => {
            let inst = ErasureInstance::random(rng);
            let basis = inst.basis()?;
            let once = erase_multi(&inst.values, &basis, &shift, ShiftMode::Off)?;
            let twice = erase_multi(&reopen(&once), &basis, &shift, ShiftMode::Off)?;
            Ok(max_abs_diff(
                once.matrix().as_slice(),
                twice.matrix().as_slice(),
            ))
        }
        Property::SingleMultiReduction => {
            let l = rng.gen_range(2..=6);
            let d = rng.gen_range(2..=MAX_DIM);
            let inst = ErasureInstance::with_shape(rng, l, d, 1);
            // pull one token toward the target so the shift is not saturated at 0
            let mut values = inst.values.matrix().clone();
            let t = inst.targets[0].row(1).to_vec();
            linalg::axpy(3.0, &t, values.row_mut(1));
            let values = ValueMatrix::new(values, ValueKind::Original);
            let basis = inst.basis()?;
            let mut worst = 0.0f64;
            for mode in [ShiftMode::Off, ShiftMode::Unit, ShiftMode::Adaptive] {
                let a = erase_single(&values, &inst.targets[0], &shift, mode)?;
                let b = erase_multi(&values, &basis, &shift, mode)?;
                worst = worst.max(max_abs_diff(a.matrix().as_slice(), b.matrix().as_slice()));
            }
            Ok(worst)
        }
        Property::UnitShiftReduction => {
            let inst = ErasureInstance::random(rng);
            let basis = inst.basis()?;
            let a = erase_multi(&inst.values, &basis, &shift, ShiftMode::Unit)?;
            let b = erase_multi(&inst.values, &basis, &shift, ShiftMode::Off)?;
            Ok(max_abs_diff(a.matrix().as_slice(), b.matrix().as_slice()))
        }
        Property::SotPreserved => {
            let inst = ErasureInstance::random(rng);
            let basis = inst.basis()?;
            let mut worst = 0.0f64;
            for mode in [ShiftMode::Off, ShiftMode::Unit, ShiftMode::Adaptive] {
                let r = erase_multi(&inst.values, &basis, &shift, mode)?;
                worst = worst.max(max_abs_diff(r.row(0), inst.values.row(0)));
                let r = erase_single(&inst.values, &inst.targets[0], &shift, mode)?;
                worst = worst.max(max_abs_diff(r.row(0), inst.values.row(0)));
            }
            Ok(worst)
        }
    }
}

/// Run `trials` instances of one property.
pub fn run_property(
    property: Property,
    trials: usize,
    seed: u64,
    fault: Option<Fault>,
) -> PropertyOutcome {
    let mut out = PropertyOutcome {
        property,
        trials,
        failures: 0,
        worst: 0.0,
        first_failing_seed: None,
    };
    for t in 0..trials {
        let s = trial_seed(seed, t);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let err = match trial(property, &mut rng, fault) {
            Ok(e) if e.is_finite() => e,
            _ => f64::INFINITY,
        };
        out.worst = out.worst.max(err);
        if err > property.tolerance() {
            out.failures += 1;
            out.first_failing_seed.get_or_insert(s);
        }
    }
    out
}

pub fn run_suite(trials: usize, seed: u64) -> SuiteReport {
    run_suite_with_fault(trials, seed, None)
}

#[doc(hidden)]
pub fn run_suite_with_fault(trials: usize, seed: u64, fault: Option<Fault>) -> SuiteReport {
    SuiteReport {
        outcomes: Property::ALL
            .iter()
            .map(|&p| run_property(p, trials, seed, fault))
            .collect(),
    }
}
