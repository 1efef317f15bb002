// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance criteria, one line each. Exits nonzero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::{
    columns, gaussian_vec, max_abs_diff, orthogonal_pair, rng, small_config,
    spanning_with_condition,
};
use orthoerase::avde;
use orthoerase::check::ErasureInstance;
use orthoerase::cli::{self, Context};
use orthoerase::eraser::{
    erase_multi, erase_single, ShiftConfig, ShiftMode, ValueKind, ValueMatrix,
};
use orthoerase::linalg::{self, Mat};
use orthoerase::pipeline::{fid_analog, Concept, Pipeline, PipelineConfig, ScenarioRow};
use orthoerase::tokens::{preprocess_target, tokenize, Provenance, TextEncoder};
use orthoerase::viz;
use orthoerase::Error;
use rand::Rng;

/// Floor on target-prompt over orthogonal-prompt component norm. Orthogonal
/// components are exactly zero by construction.
const NORM_RATIO_MIN: f64 = 10.0;
const ORTHOGONAL_FID_MAX: f64 = 1e-6;
const SAMPLES: usize = 3;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for t in 0..1000u64 {
        let mut r = rng(0xC1 ^ (t << 8));
        let d = r.gen_range(1..=64);
        let n = r.gen_range(1..=d.min(8));
        let cond = 10f64.powf(r.gen_range(0.0..=6.0));
        let span = spanning_with_condition(&mut r, d, n, cond);
        let v = gaussian_vec(&mut r, d);
        let set =
            linalg::gram_schmidt(&span, linalg::DEFAULT_DEP_TOL).map_err(|e| e.to_string())?;
        let a = linalg::project_complement_basis(&v, &set).map_err(|e| e.to_string())?;
        let b = linalg::project_complement_inverse(&v, &columns(&span), linalg::DEFAULT_COND_MAX)
            .map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(&a, &b));
    }
    let took = start.elapsed();
    ensure(
        worst < 1e-8 && took < Duration::from_secs(5),
        format!(
            "1000 instances max_diff={worst:.3e} (<1e-8) time={:.2}s (<5s)",
            took.as_secs_f64()
        ),
    )
}

fn reopen(v: &ValueMatrix) -> ValueMatrix {
    ValueMatrix::new(v.matrix().clone(), ValueKind::Original)
}

fn c2_orthogonality_idempotence() -> Outcome {
    let cfg = ShiftConfig::default();
    let (mut worst_cos, mut worst_idem) = (0.0f64, 0.0f64);
    for t in 0..500u64 {
        let inst = ErasureInstance::random(&mut rng(0xC2 ^ (t << 8)));
        let basis = inst.basis().map_err(|e| e.to_string())?;
        let once =
            erase_multi(&inst.values, &basis, &cfg, ShiftMode::Off).map_err(|e| e.to_string())?;
        for target in &inst.targets {
            for j in 1..once.len() {
                let c = linalg::cosine(once.row(j), target.row(j), 1e-300)
                    .map_err(|e| e.to_string())?;
                worst_cos = worst_cos.max(c.abs());
            }
        }
        let twice =
            erase_multi(&reopen(&once), &basis, &cfg, ShiftMode::Off).map_err(|e| e.to_string())?;
        worst_idem = worst_idem.max(max_abs_diff(
            once.matrix().as_slice(),
            twice.matrix().as_slice(),
        ));
    }
    ensure(
        worst_cos < 1e-10 && worst_idem < 1e-10,
        format!("500 instances max|cos|={worst_cos:.3e} idempotence={worst_idem:.3e} (<1e-10)"),
    )
}

fn c3_reduction_ladder() -> Outcome {
    let cfg = ShiftConfig::default();
    let (mut single_multi, mut unit_off) = (0.0f64, 0.0f64);
    for t in 0..500u64 {
        let mut r = rng(0xC3 ^ (t << 8));
        let l = r.gen_range(2..=6);
        let d = r.gen_range(2..=64);
        let one = ErasureInstance::with_shape(&mut r, l, d, 1);
        // one token near the target so the adaptive factor is not vanishing
        let mut vals = one.values.matrix().clone();
        linalg::axpy(3.0, one.targets[0].row(1), vals.row_mut(1));
        let vals = ValueMatrix::new(vals, ValueKind::Original);
        let basis = one.basis().map_err(|e| e.to_string())?;
        for mode in [ShiftMode::Off, ShiftMode::Unit, ShiftMode::Adaptive] {
            let a = erase_single(&vals, &one.targets[0], &cfg, mode).map_err(|e| e.to_string())?;
            let b = erase_multi(&vals, &basis, &cfg, mode).map_err(|e| e.to_string())?;
            single_multi =
                single_multi.max(max_abs_diff(a.matrix().as_slice(), b.matrix().as_slice()));
        }
        let many = ErasureInstance::random(&mut r);
        let basis = many.basis().map_err(|e| e.to_string())?;
        let a =
            erase_multi(&many.values, &basis, &cfg, ShiftMode::Unit).map_err(|e| e.to_string())?;
        let b =
            erase_multi(&many.values, &basis, &cfg, ShiftMode::Off).map_err(|e| e.to_string())?;
        unit_off = unit_off.max(max_abs_diff(a.matrix().as_slice(), b.matrix().as_slice()));
    }
    ensure(
        single_multi < 1e-10 && unit_off < 1e-10,
        format!("500 instances single_vs_multi={single_multi:.3e} unit_vs_unshifted={unit_off:.3e} (<1e-10)"),
    )
}

fn c4_shift_anchors() -> Outcome {
    let cfg = ShiftConfig::default();
    let at_eps = cfg.factor_at(0.93);
    let at_one = cfg.factor_at(1.0);
    let at_065 = cfg.factor_at(0.65);
    // same anchors through vectors with the prescribed cosine
    let vec_at =
        |c: f64| orthoerase::eraser::shift_factor(&[1.0, 0.0], &[c, (1.0 - c * c).sqrt()], &cfg);
    let ok = (at_eps - 1.0).abs() <= 1e-12
        && at_one > 1.998
        && at_one < 2.0
        && at_065 < 1e-11
        && (vec_at(0.93) - 1.0).abs() <= 1e-12
        && vec_at(1.0) > 1.998
        && vec_at(0.65) < 1e-11;
    ensure(
        ok,
        format!("delta(0.93)={at_eps:.15} delta(1)={at_one:.12} delta(0.65)={at_065:.3e}"),
    )
}

fn c5_sot_contract() -> Outcome {
    let enc = TextEncoder::new(1, 24).map_err(|e| e.to_string())?;
    let mut max_distinct = 0;
    for text in [
        "snoopy",
        "van gogh",
        "a photo of a cat",
        "the starry night by van gogh",
        "axis3 axis7",
    ] {
        let tokens = tokenize(text, 20).map_err(|e| e.to_string())?;
        let raw = enc
            .encode(&tokens)
            .map_err(|e| e.to_string())?
            .with_provenance(Provenance::TargetRaw);
        let pre = preprocess_target(&raw, &tokens).map_err(|e| e.to_string())?;
        max_distinct = max_distinct.max(pre.distinct_rows());
    }
    // every pipeline run asserts row 0 internally and fails otherwise
    let mut runs = 0;
    let mut sot_component = 0.0f64;
    for (seed, mode) in [
        (0, ShiftMode::Adaptive),
        (1, ShiftMode::Off),
        (2, ShiftMode::Unit),
    ] {
        let p = Pipeline::new(PipelineConfig {
            mode,
            ..small_config(seed)
        })
        .map_err(|e| e.to_string())?;
        for targets in [vec!["snoopy"], vec!["snoopy", "van gogh", "a cat"]] {
            let out = p
                .run("snoopy and a cat by van gogh", &targets)
                .map_err(|e| e.to_string())?;
            for c in &out.report.components {
                sot_component = sot_component.max(linalg::norm(c.component.row(0)));
            }
            runs += 1;
        }
    }
    ensure(
        max_distinct <= 2 && sot_component == 0.0,
        format!("max distinct preprocessed rows={max_distinct} (<=2) row0 component max={sot_component:e} over {runs} runs"),
    )
}

fn final_sets(
    p: &Pipeline,
    prompt: &Concept,
    plan: &orthoerase::pipeline::ErasurePlan,
) -> Result<(f64, f64), Error> {
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut norm = 0.0;
    for s in 0..SAMPLES {
        let out = p.run_concept(prompt, plan, s as u64)?;
        norm += out.report.mean_component_norm() / SAMPLES as f64;
        before.push(out.features_before().clone());
        after.push(out.features_after().clone());
    }
    Ok((norm, fid_analog(&before, &after)?))
}

fn c6_interpretability() -> Outcome {
    let mut min_ratio = f64::INFINITY;
    let mut max_fid = 0.0f64;
    for seed in 0..20u64 {
        let (target, other) = orthogonal_pair(seed);
        let p = Pipeline::new(PipelineConfig {
            seed,
            ..PipelineConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let t = p.concept(&target).map_err(|e| e.to_string())?;
        let o = p.concept(&other).map_err(|e| e.to_string())?;
        let plan = p
            .plan(std::slice::from_ref(&t))
            .map_err(|e| e.to_string())?;
        let (norm_t, _) = final_sets(&p, &t, &plan).map_err(|e| e.to_string())?;
        let (norm_o, fid_o) = final_sets(&p, &o, &plan).map_err(|e| e.to_string())?;
        min_ratio = min_ratio.min(norm_t / norm_o);
        max_fid = max_fid.max(fid_o);
    }
    ensure(
        min_ratio >= NORM_RATIO_MIN && max_fid < ORTHOGONAL_FID_MAX,
        format!("20 instances min norm ratio={min_ratio:e} (>=10) orthogonal fid max={max_fid:.3e} (<1e-6)"),
    )
}

fn c7_sweep_structure() -> Outcome {
    let p = Pipeline::new(PipelineConfig::default()).map_err(|e| e.to_string())?;
    let target = p.concept("snoopy").map_err(|e| e.to_string())?;
    let related = p
        .related_concept(&target, "mickey", 0.65)
        .map_err(|e| e.to_string())?;
    let grid = orthoerase::pipeline::SweepGrid::default();
    let rows = p
        .sweep(&target, &related, &grid, SAMPLES)
        .map_err(|e| e.to_string())?;
    let fid_at = |s: f64| -> Vec<f64> {
        grid.epsilon
            .iter()
            .map(|&e| {
                rows.iter()
                    .find(|r| r.s == s && r.epsilon == e)
                    .expect("grid row")
                    .fid_nontarget
            })
            .collect()
    };
    // epsilon is listed in decreasing order
    let fids = fid_at(2.0);
    let fid_ok = fids.windows(2).all(|w| w[1] >= w[0]);
    let cs_ok = grid.epsilon.iter().all(|&e| {
        let drop = |s: f64| {
            rows.iter()
                .find(|r| r.s == s && r.epsilon == e)
                .expect("grid row")
                .cs_drop_target
        };
        drop(2.0) >= drop(1.0)
    });
    let fmt: Vec<String> = fids.iter().map(|f| format!("{f:.2e}")).collect();
    ensure(
        fid_ok && cs_ok,
        format!("fid(eps 0.93..0.6, s=2)=[{}] non-decreasing={fid_ok} cs_drop(s=1)<=cs_drop(s=2)={cs_ok}", fmt.join(", ")),
    )
}

fn scenario(
    p: &Pipeline,
    prompts: &[Concept],
    targets: &[Concept],
) -> Result<Vec<ScenarioRow>, Error> {
    p.scenario_multi(prompts, targets, SAMPLES)
}

fn c8_multi_concept_scaling() -> Outcome {
    let start = Instant::now();
    let p = Pipeline::new(small_config(8)).map_err(|e| e.to_string())?;
    let targets = (0..40)
        .map(|i| p.concept(&format!("axis{i} axis{}", (i + 1) % 40)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let prompts = vec![
        targets[0].clone(),
        p.concept("axis45 axis50").map_err(|e| e.to_string())?,
        p.concept("axis55").map_err(|e| e.to_string())?,
    ];
    let rows = scenario(&p, &prompts, &targets).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let again = scenario(&p, &prompts, &targets).map_err(|e| e.to_string())?;

    let mut by_n: BTreeMap<usize, Vec<&ScenarioRow>> = BTreeMap::new();
    for r in &rows {
        by_n.entry(r.n_targets).or_default().push(r);
    }
    let mut min_ratio = f64::INFINITY;
    let mut max_fid = 0.0f64;
    for (n, rs) in by_n.range(1..) {
        let own = rs
            .iter()
            .find(|r| r.prompt == prompts[0].label())
            .ok_or(format!("missing row n={n}"))?;
        for r in rs.iter().filter(|r| r.prompt != own.prompt) {
            min_ratio = min_ratio.min(own.mean_component_norm / r.mean_component_norm);
            max_fid = max_fid.max(r.fid_analog);
        }
    }
    let mut plan = p.plan(&targets[..3]).map_err(|e| e.to_string())?;
    let dup = matches!(
        p.extend_plan(&mut plan, &targets[1]),
        Err(Error::LinearlyDependentConcepts { .. })
    );
    ensure(
        rows == again
            && by_n.len() == 41
            && took < Duration::from_secs(30)
            && min_ratio >= NORM_RATIO_MIN
            && max_fid < ORTHOGONAL_FID_MAX
            && dup,
        format!(
            "n=1..40 deterministic={} time={:.2}s (<30s) min ratio={min_ratio:e} orthogonal fid max={max_fid:.3e} duplicate_rejected={dup}",
            rows == again,
            took.as_secs_f64()
        ),
    )
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).expect("report dir") {
        let e = e.expect("entry");
        out.insert(
            e.file_name().to_string_lossy().into_owned(),
            fs::read(e.path()).expect("file"),
        );
    }
    out
}

fn c9_io_bit_exactness() -> Outcome {
    let mut r = rng(0xC9);
    let mut roundtrip = true;
    for _ in 0..50 {
        let (rows, cols) = (r.gen_range(1..20), r.gen_range(1..20));
        let mut data: Vec<f64> = (0..rows * cols)
            .map(|_| f64::from_bits(r.gen::<u64>()))
            .collect();
        data.iter_mut()
            .filter(|x| !x.is_finite())
            .for_each(|x| *x = -0.0);
        data[0] = f64::MIN_POSITIVE / 3.0;
        let m = Mat::from_vec(rows, cols, data).map_err(|e| e.to_string())?;
        let back = avde::decode(&avde::encode(&m)).map_err(|e| e.to_string())?;
        roundtrip &= back.shape() == m.shape()
            && back
                .as_slice()
                .iter()
                .zip(m.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let pgm = viz::pgm(&Mat::zeros(77, 64)).map_err(|e| e.to_string())?;
    let golden = pgm.starts_with(b"P5\n77 64\n255\n") && pgm.len() == 13 + 4928;

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut dumps = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let out_s = out.to_string_lossy().into_owned();
        let args = [
            "orthoerase",
            "erase",
            "a snoopy by van gogh",
            "--target",
            "snoopy",
            "--target",
            "van gogh",
            "--out",
            &out_s,
        ];
        let code = cli::run_with(args, &Context::default(), &mut Vec::new(), &mut Vec::new());
        if code != 0 {
            return Err(format!("erase exited {code}"));
        }
        dumps.push(dir_bytes(&out));
    }
    let identical = dumps[0] == dumps[1] && !dumps[0].is_empty();
    ensure(
        roundtrip && golden && identical,
        format!(
            "avde round-trip={roundtrip} pgm golden={golden} erase twice identical={identical} ({} files)",
            dumps[0].len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("oracle equivalence", c1_oracle_equivalence),
        (
            "orthogonality and idempotence",
            c2_orthogonality_idempotence,
        ),
        ("reduction ladder", c3_reduction_ladder),
        ("shift-factor anchors", c4_shift_anchors),
        ("SOT contract", c5_sot_contract),
        ("interpretability analog", c6_interpretability),
        ("sweep structure", c7_sweep_structure),
        ("multi-concept scaling", c8_multi_concept_scaling),
        ("I/O bit-exactness", c9_io_bit_exactness),
    ];
    let total = Instant::now();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (status, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {} {name}: {status} [{:.2}s] {detail}",
            i + 1,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed, {:.2}s total",
        criteria.len() - failed,
        total.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
