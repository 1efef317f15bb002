// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic generation harness.
//!
//! A stack of seeded cross-attention layers stands in for the denoiser. Each
//! synthetic step passes the current latent through the stack twice, once
//! plain and once with erasure, and records per layer the erased component
//! `v - v_r` of every token. Two desk-scale metrics summarize a run:
//!
//! - `cs_analog`: cosine between mean-pooled output features and a concept's
//!   pooled embedding pushed through the last layer's `W_V W_out`.
//! - `fid_analog`: Frechet distance between Gaussian fits of pooled features
//!   from two sets of samples.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{
    forward, forward_erased, CALayer, ErasureTarget, LatentFeatures, LayerDims,
};
use crate::avde;
use crate::eraser::{
    compute_values, erased_component, make_target_values, ShiftConfig, ShiftMode, TargetBasis,
    ValueMatrix,
};
use crate::error::{Error, Result};
use crate::linalg::{self, GaussianStats, Mat};
use crate::tokens::{
    preprocess_target, tokenize, EmbeddingMatrix, Provenance, TextEncoder, TokenSequence,
    DEFAULT_TOKEN_LENGTH,
};

/// Blend weight of the previous latent when advancing one synthetic step.
const STEP_RETAIN: f64 = 0.5;

/// How the erased pass picks its input latent at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Trajectory {
    /// Both passes start every step from the plain trajectory's latent, so
    /// any difference comes from that step's erasure alone.
    #[default]
    Twin,
    /// The erased pass follows its own latent trajectory.
    Divergent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub layers: usize,
    pub steps: usize,
    /// Prompt length `l`.
    pub token_length: usize,
    /// Text embedding width `D_c`.
    pub embed_dim: usize,
    /// Attention head width `d`.
    pub head_dim: usize,
    /// Latent channels `D_z`.
    pub latent_dim: usize,
    /// Spatial positions `HW`.
    pub positions: usize,
    pub seed: u64,
    pub shift: ShiftConfig,
    pub mode: ShiftMode,
    pub trajectory: Trajectory,
    /// Erase only during the first `k` steps when set.
    pub erase_steps: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            steps: 5,
            token_length: DEFAULT_TOKEN_LENGTH,
            embed_dim: 64,
            head_dim: 64,
            latent_dim: 16,
            positions: 16,
            seed: 0,
            shift: ShiftConfig::default(),
            mode: ShiftMode::Adaptive,
            trajectory: Trajectory::Twin,
            erase_steps: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("steps", self.steps),
            ("embed_dim", self.embed_dim),
            ("head_dim", self.head_dim),
            ("latent_dim", self.latent_dim),
            ("positions", self.positions),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.token_length < 3 {
            return Err(Error::Config(format!(
                "token_length must be >= 3, got {}",
                self.token_length
            )));
        }
        self.shift.validate()
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn derive_seed(seed: u64, domain: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ domain.rotate_left(32)) ^ index)
}

const LAYER_DOMAIN: u64 = 0x4c41_5945;
const LATENT_DOMAIN: u64 = 0x4c41_544e;

/// An encoded prompt or target concept.
#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    label: String,
    tokens: TokenSequence,
    embedding: EmbeddingMatrix,
}

impl Concept {
    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn tokens(&self) -> &TokenSequence {
        &self.tokens
    }

    pub fn embedding(&self) -> &EmbeddingMatrix {
        &self.embedding
    }

    /// Mean of all embedding rows.
    pub fn pooled(&self) -> Vec<f64> {
        let l = self.embedding.len();
        let mut out = vec![0.0; self.embedding.dim()];
        for j in 0..l {
            linalg::axpy(1.0 / l as f64, self.embedding.row(j), &mut out);
        }
        out
    }
}

/// Per-layer erasure targets for a fixed set of concepts.
#[derive(Debug, Clone)]
pub struct ErasurePlan {
    labels: Vec<String>,
    // per layer, the target values of every concept in push order
    values: Vec<Vec<ValueMatrix>>,
    bases: Vec<TargetBasis>,
    probes: Vec<Vec<f64>>,
}

impl ErasurePlan {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn basis(&self, layer: usize) -> &TargetBasis {
        &self.bases[layer]
    }

    pub fn target_values(&self, layer: usize) -> &[ValueMatrix] {
        &self.values[layer]
    }

    fn target(&self, layer: usize) -> ErasureTarget<'_> {
        if self.len() == 1 {
            ErasureTarget::Single(&self.values[layer][0])
        } else {
            ErasureTarget::Multi(&self.bases[layer])
        }
    }
}

/// Erased components of one layer at one step (`l x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerComponents {
    pub step: usize,
    pub layer: usize,
    pub component: Mat,
}

impl LayerComponents {
    pub fn norms(&self) -> Vec<f64> {
        self.component.row_iter().map(linalg::norm).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptFlag {
    pub label: String,
    /// Largest cosine between any prompt token value and the target value
    /// at the same position, over all layers.
    pub max_cosine: f64,
    /// Whether some token reached the shift threshold (`cos >= epsilon`).
    pub engaged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErasureReport {
    pub prompt: String,
    pub n_targets: usize,
    /// One entry per (step, layer), step-major.
    pub components: Vec<LayerComponents>,
    /// `cs_analog` of each step's plain output.
    pub cs_before: Vec<f64>,
    /// `cs_analog` of each step's erased output.
    pub cs_after: Vec<f64>,
    /// `fid_analog` between per-step plain and erased outputs; NaN for a
    /// single step.
    pub fid: f64,
    pub concepts: Vec<ConceptFlag>,
}

pub const REPORT_HEADER: [&str; 9] = [
    "prompt",
    "n_targets",
    "step",
    "layer",
    "token",
    "component_norm",
    "cs_before",
    "cs_after",
    "fid",
];

/// Scientific notation with 17 significant digits; parses back bit-exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl ErasureReport {
    pub fn mean_component_norm(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for c in &self.components {
            for n in c.norms() {
                sum += n;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    pub fn max_component_norm(&self) -> f64 {
        self.components
            .iter()
            .flat_map(|c| c.norms())
            .fold(0.0, f64::max)
    }

    /// cs of the final plain output minus cs of the final erased output.
    pub fn cs_drop(&self) -> f64 {
        match (self.cs_before.last(), self.cs_after.last()) {
            (Some(b), Some(a)) => b - a,
            _ => 0.0,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let to_io = |e: csv::Error| Error::Format(format!("csv: {e}"));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(REPORT_HEADER).map_err(to_io)?;
        for c in &self.components {
            for (token, norm) in c.norms().into_iter().enumerate() {
                w.write_record([
                    self.prompt.clone(),
                    self.n_targets.to_string(),
                    c.step.to_string(),
                    c.layer.to_string(),
                    token.to_string(),
                    fmt_f64(norm),
                    fmt_f64(self.cs_before[c.step]),
                    fmt_f64(self.cs_after[c.step]),
                    fmt_f64(self.fid),
                ])
                .map_err(to_io)?;
            }
        }
        w.flush().map_err(|e| Error::Format(format!("csv: {e}")))?;
        Ok(())
    }
}

/// Everything a single run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Plain stack output at every step.
    pub before: Vec<LatentFeatures>,
    /// Erased stack output at every step.
    pub after: Vec<LatentFeatures>,
    pub report: ErasureReport,
}

pub fn component_file_name(step: usize, layer: usize) -> String {
    format!("component_s{step}_l{layer}.avde")
}

pub fn features_file_name(which: &str, step: usize) -> String {
    format!("features_{which}_s{step}.avde")
}

pub const REPORT_FILE: &str = "report.csv";

impl RunOutput {
    pub fn features_before(&self) -> &LatentFeatures {
        self.before.last().expect("at least one step")
    }

    pub fn features_after(&self) -> &LatentFeatures {
        self.after.last().expect("at least one step")
    }

    /// Write `report.csv`, one component dump per (step, layer) and the
    /// per-step features into an existing directory.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let mut csv_bytes = Vec::new();
        self.report.write_csv(&mut csv_bytes)?;
        avde::write_atomic(&dir.join(REPORT_FILE), &csv_bytes)?;
        for c in &self.report.components {
            avde::write(
                &dir.join(component_file_name(c.step, c.layer)),
                &c.component,
            )?;
        }
        for (step, (b, a)) in self.before.iter().zip(&self.after).enumerate() {
            avde::write(&dir.join(features_file_name("before", step)), b.matrix())?;
            avde::write(&dir.join(features_file_name("after", step)), a.matrix())?;
        }
        Ok(())
    }
}

/// Mean-pool each sample, fit a Gaussian per set and return the Frechet
/// distance between the fits.
pub fn fid_analog(set_a: &[LatentFeatures], set_b: &[LatentFeatures]) -> Result<f64> {
    for set in [set_a, set_b] {
        if set.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                found: set.len(),
            });
        }
    }
    let pooled = |s: &[LatentFeatures]| s.iter().map(LatentFeatures::pooled).collect::<Vec<_>>();
    let a = GaussianStats::fit(&pooled(set_a))?;
    let b = GaussianStats::fit(&pooled(set_b))?;
    linalg::frechet_gaussian(&a, &b)
}

/// One row of [`Pipeline::scenario_multi`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRow {
    pub prompt: String,
    pub n_targets: usize,
    /// `cs_analog` of the erased output against the prompt itself.
    pub cs_analog: f64,
    /// `fid_analog` between plain and erased outputs across samples.
    pub fid_analog: f64,
    pub mean_component_norm: f64,
}

/// Hyperparameter grid for [`Pipeline::sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub s: Vec<f64>,
    pub p: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            s: vec![1.0, 2.0],
            p: vec![100.0],
            epsilon: vec![0.93, 0.8, 0.7, 0.6],
        }
    }
}

impl SweepGrid {
    pub fn points(&self) -> Result<Vec<ShiftConfig>> {
        if self.s.is_empty() || self.p.is_empty() || self.epsilon.is_empty() {
            return Err(Error::Config("empty sweep grid".into()));
        }
        let mut out = Vec::new();
        for &s in &self.s {
            for &p in &self.p {
                for &e in &self.epsilon {
                    out.push(ShiftConfig::new(s, p, e)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub s: f64,
    pub p: f64,
    pub epsilon: f64,
    /// Mean cs drop of the target prompt.
    pub cs_drop_target: f64,
    /// `fid_analog` of the non-target prompt, plain vs erased.
    pub fid_nontarget: f64,
}

/// Seeded layer stack plus encoder.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    encoder: TextEncoder,
    layers: Vec<CALayer>,
    probe: Mat,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = LayerDims {
            embed: cfg.embed_dim,
            head: cfg.head_dim,
            latent: cfg.latent_dim,
        };
        let layers = (0..cfg.layers)
            .map(|i| CALayer::seeded(dims, derive_seed(cfg.seed, LAYER_DOMAIN, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let last = layers.last().expect("layers >= 1");
        let probe = last.value_projector().matrix().matmul(last.output())?;
        Ok(Self {
            encoder: TextEncoder::new(cfg.seed, cfg.embed_dim)?,
            cfg,
            layers,
            probe,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[CALayer] {
        &self.layers
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    /// Same layers, different shift settings.
    pub fn with_shift(&self, shift: ShiftConfig, mode: ShiftMode) -> Result<Self> {
        shift.validate()?;
        let mut p = self.clone();
        p.cfg.shift = shift;
        p.cfg.mode = mode;
        Ok(p)
    }

    pub fn concept(&self, text: &str) -> Result<Concept> {
        let tokens = tokenize(text, self.cfg.token_length)?;
        let embedding = self.encoder.encode(&tokens)?;
        Ok(Concept {
            label: tokens.text(),
            tokens,
            embedding,
        })
    }

    /// A prompt built from `text` whose last word's base vector is replaced
    /// so that it has exactly the given cosine with the base vector of
    /// `target`'s last subject token.
    pub fn related_concept(&self, target: &Concept, text: &str, cosine: f64) -> Result<Concept> {
        if !(-1.0..=1.0).contains(&cosine) {
            return Err(Error::Config(format!("cosine {cosine} outside [-1, 1]")));
        }
        let tokens = tokenize(text, self.cfg.token_length)?;
        let k = tokens.last_subject().ok_or(Error::NoContentToken)?;
        let tk = target.tokens.last_subject().ok_or(Error::NoContentToken)?;
        let anchor = self.encoder.base(target.tokens.ids()[tk])?;
        let mut bases = self.encoder.bases(&tokens)?;
        let mut other = bases[k].clone();
        linalg::axpy(-linalg::dot(&other, &anchor), &anchor, &mut other);
        let n = linalg::norm(&other);
        if n < 1e-8 {
            return Err(Error::Config(format!(
                "'{text}' is parallel to '{}'",
                target.label
            )));
        }
        let sine = (1.0 - cosine * cosine).max(0.0).sqrt();
        bases[k] = anchor
            .iter()
            .zip(&other)
            .map(|(a, o)| cosine * a + sine * o / n)
            .collect();
        let embedding = self.encoder.encode_bases(&bases)?;
        Ok(Concept {
            label: tokens.text(),
            tokens,
            embedding,
        })
    }

    pub fn empty_plan(&self) -> ErasurePlan {
        let (l, d) = (self.cfg.token_length, self.cfg.head_dim);
        ErasurePlan {
            labels: Vec::new(),
            values: vec![Vec::new(); self.layers.len()],
            bases: self
                .layers
                .iter()
                .map(|_| TargetBasis::empty(l, d, linalg::DEFAULT_DEP_TOL))
                .collect(),
            probes: Vec::new(),
        }
    }

    /// Append one target concept to a plan. The plan is unchanged on error.
    pub fn extend_plan(&self, plan: &mut ErasurePlan, target: &Concept) -> Result<()> {
        let raw = target
            .embedding
            .clone()
            .with_provenance(Provenance::TargetRaw);
        let pre = preprocess_target(&raw, &target.tokens)?;
        if pre.distinct_rows() > 2 {
            return Err(Error::Invariant(format!(
                "preprocessed target '{}' has {} distinct rows",
                target.label,
                pre.distinct_rows()
            )));
        }
        let mut values = Vec::with_capacity(self.layers.len());
        let mut bases = plan.bases.clone();
        for (layer, basis) in self.layers.iter().zip(bases.iter_mut()) {
            let v = make_target_values(&pre, layer.value_projector())?;
            basis.push(&v)?;
            values.push(v);
        }
        plan.bases = bases;
        for (per_layer, v) in plan.values.iter_mut().zip(values) {
            per_layer.push(v);
        }
        plan.labels.push(target.label.clone());
        plan.probes.push(self.probe_of(target)?);
        Ok(())
    }

    pub fn plan(&self, targets: &[Concept]) -> Result<ErasurePlan> {
        let mut plan = self.empty_plan();
        for t in targets {
            self.extend_plan(&mut plan, t)?;
        }
        Ok(plan)
    }

    fn probe_of(&self, concept: &Concept) -> Result<Vec<f64>> {
        self.probe.left_mul(&concept.pooled())
    }

    /// Seeded initial latent for sample `sample`.
    pub fn initial_latent(&self, sample: u64) -> LatentFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, LATENT_DOMAIN, sample));
        let mut m = Mat::zeros(self.cfg.positions, self.cfg.latent_dim);
        for i in 0..m.rows() {
            for x in m.row_mut(i) {
                *x = StandardNormal.sample(&mut rng);
            }
        }
        LatentFeatures::new(m)
    }

    /// Cosine between mean-pooled features and the concept's probe vector;
    /// 0 when either is zero.
    pub fn cs_analog(&self, features: &LatentFeatures, concept: &Concept) -> Result<f64> {
        let probe = self.probe_of(concept)?;
        Ok(cosine_or_zero(&features.pooled(), &probe))
    }

    /// Run `prompt` against `targets` for sample 0.
    pub fn run(&self, prompt: &str, targets: &[&str]) -> Result<RunOutput> {
        let prompt = self.concept(prompt)?;
        let targets = targets
            .iter()
            .map(|t| self.concept(t))
            .collect::<Result<Vec<_>>>()?;
        let plan = self.plan(&targets)?;
        self.run_concept(&prompt, &plan, 0)
    }

    pub fn run_concept(
        &self,
        prompt: &Concept,
        plan: &ErasurePlan,
        sample: u64,
    ) -> Result<RunOutput> {
        let cfg = &self.cfg;
        let emb = &prompt.embedding;
        let values = self
            .layers
            .iter()
            .map(|layer| compute_values(emb, layer.value_projector()))
            .collect::<Result<Vec<_>>>()?;
        let references: Vec<Vec<f64>> = if plan.is_empty() {
            vec![self.probe_of(prompt)?]
        } else {
            plan.probes.clone()
        };
        let cs = |f: &LatentFeatures| -> f64 {
            let pooled = f.pooled();
            references
                .iter()
                .map(|r| cosine_or_zero(&pooled, r))
                .sum::<f64>()
                / references.len() as f64
        };

        let mut z_plain = self.initial_latent(sample);
        let mut z_erased = z_plain.clone();
        let mut before = Vec::with_capacity(cfg.steps);
        let mut after = Vec::with_capacity(cfg.steps);
        let mut components = Vec::with_capacity(cfg.steps * cfg.layers);
        let (mut cs_before, mut cs_after) = (Vec::new(), Vec::new());

        for step in 0..cfg.steps {
            let erase_now = !plan.is_empty() && cfg.erase_steps.is_none_or(|k| step < k);

            let mut x = z_plain.clone();
            for layer in &self.layers {
                x = forward(&x, emb, layer)?;
            }

            let mut y = match cfg.trajectory {
                Trajectory::Twin => z_plain.clone(),
                Trajectory::Divergent => z_erased.clone(),
            };
            for (li, layer) in self.layers.iter().enumerate() {
                let component = if erase_now {
                    let (out, erased) =
                        forward_erased(&y, emb, layer, plan.target(li), &cfg.shift, cfg.mode)?;
                    if erased.row(0) != values[li].row(0) {
                        return Err(Error::Invariant(format!(
                            "[SOT] value changed at step {step}, layer {li}"
                        )));
                    }
                    y = out;
                    erased_component(&values[li], &erased)?
                } else {
                    y = forward(&y, emb, layer)?;
                    Mat::zeros(values[li].len(), values[li].dim())
                };
                components.push(LayerComponents {
                    step,
                    layer: li,
                    component,
                });
            }

            cs_before.push(cs(&x));
            cs_after.push(cs(&y));
            z_plain = advance(&z_plain, &x);
            z_erased = match cfg.trajectory {
                Trajectory::Twin => z_plain.clone(),
                Trajectory::Divergent => advance(&z_erased, &y),
            };
            before.push(x);
            after.push(y);
        }

        let fid = if cfg.steps >= 2 {
            fid_analog(&before, &after)?
        } else {
            f64::NAN
        };
        let concepts = self.concept_flags(&values, plan);
        Ok(RunOutput {
            before,
            after,
            report: ErasureReport {
                prompt: prompt.label.clone(),
                n_targets: plan.len(),
                components,
                cs_before,
                cs_after,
                fid,
                concepts,
            },
        })
    }

    fn concept_flags(&self, values: &[ValueMatrix], plan: &ErasurePlan) -> Vec<ConceptFlag> {
        plan.labels
            .iter()
            .enumerate()
            .map(|(h, label)| {
                let mut max_cosine = f64::NEG_INFINITY;
                for (li, v) in values.iter().enumerate() {
                    let t = &plan.values[li][h];
                    for j in 1..v.len() {
                        max_cosine = max_cosine.max(cosine_or_zero(v.row(j), t.row(j)));
                    }
                }
                ConceptFlag {
                    label: label.clone(),
                    max_cosine,
                    engaged: max_cosine >= self.cfg.shift.epsilon,
                }
            })
            .collect()
    }

    /// Runs `samples` seeded samples and returns the final plain outputs,
    /// final erased outputs and mean component norm.
    fn sample_set(
        &self,
        prompt: &Concept,
        plan: &ErasurePlan,
        samples: usize,
    ) -> Result<(Vec<LatentFeatures>, Vec<LatentFeatures>, Vec<ErasureReport>)> {
        let mut before = Vec::with_capacity(samples);
        let mut after = Vec::with_capacity(samples);
        let mut reports = Vec::with_capacity(samples);
        for s in 0..samples {
            let mut out = self.run_concept(prompt, plan, s as u64)?;
            before.push(out.before.pop().expect("steps >= 1"));
            after.push(out.after.pop().expect("steps >= 1"));
            reports.push(out.report);
        }
        Ok((before, after, reports))
    }

    /// Cumulative multi-concept erasure: for `n = 0 ..= targets.len()` erase
    /// the first `n` targets from every prompt.
    pub fn scenario_multi(
        &self,
        prompts: &[Concept],
        targets: &[Concept],
        samples: usize,
    ) -> Result<Vec<ScenarioRow>> {
        if samples < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                found: samples,
            });
        }
        let mut rows = Vec::with_capacity((targets.len() + 1) * prompts.len());
        let mut plan = self.empty_plan();
        for n in 0..=targets.len() {
            if n > 0 {
                self.extend_plan(&mut plan, &targets[n - 1])?;
            }
            let per_prompt: Vec<Result<ScenarioRow>> = std::thread::scope(|scope| {
                let handles: Vec<_> = prompts
                    .iter()
                    .map(|prompt| {
                        let plan = &plan;
                        scope.spawn(move || -> Result<ScenarioRow> {
                            let (before, after, reports) =
                                self.sample_set(prompt, plan, samples)?;
                            let cs = after
                                .iter()
                                .map(|f| self.cs_analog(f, prompt))
                                .sum::<Result<f64>>()?
                                / samples as f64;
                            let norm = reports.iter().map(|r| r.mean_component_norm()).sum::<f64>()
                                / samples as f64;
                            Ok(ScenarioRow {
                                prompt: prompt.label.clone(),
                                n_targets: n,
                                cs_analog: cs,
                                fid_analog: fid_analog(&before, &after)?,
                                mean_component_norm: norm,
                            })
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("scenario worker panicked"))
                    .collect()
            });
            for r in per_prompt {
                rows.push(r?);
            }
        }
        Ok(rows)
    }

    /// Grid over shift hyperparameters with one target and one non-target
    /// prompt; the target prompt is the target concept itself.
    pub fn sweep(
        &self,
        target: &Concept,
        nontarget: &Concept,
        grid: &SweepGrid,
        samples: usize,
    ) -> Result<Vec<SweepRow>> {
        let points = grid.points()?;
        if samples < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                found: samples,
            });
        }
        let plan = self.plan(std::slice::from_ref(target))?;
        let rows: Vec<Result<SweepRow>> = std::thread::scope(|scope| {
            let handles: Vec<_> = points
                .iter()
                .map(|&shift| {
                    let plan = &plan;
                    scope.spawn(move || -> Result<SweepRow> {
                        let p = self.with_shift(shift, ShiftMode::Adaptive)?;
                        let (_, _, reports) = p.sample_set(target, plan, samples)?;
                        let cs_drop = reports.iter().map(ErasureReport::cs_drop).sum::<f64>()
                            / samples as f64;
                        let (b, a, _) = p.sample_set(nontarget, plan, samples)?;
                        Ok(SweepRow {
                            s: shift.s,
                            p: shift.p,
                            epsilon: shift.epsilon,
                            cs_drop_target: cs_drop,
                            fid_nontarget: fid_analog(&b, &a)?,
                        })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        });
        rows.into_iter().collect()
    }
}

fn cosine_or_zero(x: &[f64], y: &[f64]) -> f64 {
    linalg::cosine(x, y, linalg::DEFAULT_ZERO_TOL).unwrap_or(0.0)
}

fn advance(z: &LatentFeatures, out: &LatentFeatures) -> LatentFeatures {
    let data = z
        .matrix()
        .as_slice()
        .iter()
        .zip(out.matrix().as_slice())
        .map(|(a, b)| STEP_RETAIN * a + (1.0 - STEP_RETAIN) * b)
        .collect();
    LatentFeatures::new(
        Mat::from_vec(z.positions(), z.channels(), data).expect("same shape as the latent"),
    )
}

/// Write scenario rows as CSV.
pub fn write_scenario_csv<W: Write>(rows: &[ScenarioRow], out: W) -> Result<()> {
    let to_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "prompt",
        "n_targets",
        "cs_analog",
        "fid_analog",
        "mean_component_norm",
    ])
    .map_err(to_err)?;
    for r in rows {
        w.write_record([
            r.prompt.clone(),
            r.n_targets.to_string(),
            fmt_f64(r.cs_analog),
            fmt_f64(r.fid_analog),
            fmt_f64(r.mean_component_norm),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(())
}

/// Write sweep rows as CSV.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let to_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s", "p", "epsilon", "cs_drop_target", "fid_nontarget"])
        .map_err(to_err)?;
    for r in rows {
        w.write_record([
            fmt_f64(r.s),
            fmt_f64(r.p),
            fmt_f64(r.epsilon),
            fmt_f64(r.cs_drop_target),
            fmt_f64(r.fid_nontarget),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PipelineConfig {
        PipelineConfig {
            layers: 2,
            steps: 3,
            token_length: 12,
            embed_dim: 16,
            head_dim: 16,
            latent_dim: 6,
            positions: 5,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn empty_targets_is_a_noop() {
        let p = Pipeline::new(small()).unwrap();
        let out = p.run("a red barn", &[]).unwrap();
        assert_eq!(out.before, out.after);
        assert_eq!(out.report.max_component_norm(), 0.0);
        assert_eq!(out.report.components.len(), 2 * 3);
        assert_eq!(out.report.fid, 0.0);
    }

    #[test]
    fn self_erasure_is_orthogonal_when_unshifted() {
        let cfg = PipelineConfig {
            mode: ShiftMode::Off,
            ..small()
        };
        let p = Pipeline::new(cfg).unwrap();
        let prompt = p.concept("snoopy").unwrap();
        let plan = p.plan(std::slice::from_ref(&prompt)).unwrap();
        for (li, layer) in p.layers().iter().enumerate() {
            let v = compute_values(prompt.embedding(), layer.value_projector()).unwrap();
            let t = &plan.target_values(li)[0];
            let r = crate::eraser::erase_single(&v, t, &p.config().shift, ShiftMode::Off).unwrap();
            for j in 1..v.len() {
                let c = linalg::cosine(r.row(j), t.row(j), 1e-12).unwrap_or(0.0);
                assert!(c.abs() < 1e-10, "layer {li} token {j}: {c:e}");
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let p = Pipeline::new(small()).unwrap();
        let a = p.run("van gogh painting", &["van gogh"]).unwrap();
        let b = Pipeline::new(small())
            .unwrap()
            .run("van gogh painting", &["van gogh"])
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn related_concept_has_requested_cosine() {
        let p = Pipeline::new(small()).unwrap();
        let t = p.concept("snoopy").unwrap();
        let r = p.related_concept(&t, "mickey", 0.65).unwrap();
        let c = linalg::cosine(r.embedding().row(1), t.embedding().row(1), 1e-12).unwrap();
        assert!((c - 0.65).abs() < 1e-12);
    }

    #[test]
    fn cs_analog_zero_and_scale() {
        let p = Pipeline::new(small()).unwrap();
        let c = p.concept("snoopy").unwrap();
        let zero = LatentFeatures::new(Mat::zeros(5, 6));
        assert_eq!(p.cs_analog(&zero, &c).unwrap(), 0.0);
        let f = p.run("snoopy", &[]).unwrap().features_before().clone();
        let scaled = LatentFeatures::new(f.matrix().scale(3.0));
        let (a, b) = (
            p.cs_analog(&f, &c).unwrap(),
            p.cs_analog(&scaled, &c).unwrap(),
        );
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn fid_analog_needs_two_samples() {
        let f = LatentFeatures::new(Mat::zeros(2, 2));
        assert!(matches!(
            fid_analog(std::slice::from_ref(&f), &[f.clone(), f.clone()]),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(Pipeline::new(PipelineConfig {
            layers: 0,
            ..small()
        })
        .is_err());
        assert!(Pipeline::new(PipelineConfig {
            token_length: 2,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn sweep_grid_rejects_empty_and_invalid() {
        let g = SweepGrid {
            s: vec![],
            ..SweepGrid::default()
        };
        assert!(matches!(g.points(), Err(Error::Config(_))));
        let g = SweepGrid {
            s: vec![0.0],
            ..SweepGrid::default()
        };
        assert!(matches!(g.points(), Err(Error::InvalidShift(_))));
        assert_eq!(SweepGrid::default().points().unwrap().len(), 8);
    }

    #[test]
    fn report_csv_layout() {
        let p = Pipeline::new(PipelineConfig {
            steps: 2,
            ..small()
        })
        .unwrap();
        let out = p.run("a, cat", &["cat"]).unwrap();
        let mut buf = Vec::new();
        out.report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "prompt,n_targets,step,layer,token,component_norm,cs_before,cs_after,fid"
        );
        assert_eq!(lines.count(), 2 * 2 * 12);
        for field in text.lines().nth(1).unwrap().split(',').skip(5) {
            let x: f64 = field.parse().unwrap();
            assert_eq!(fmt_f64(x), field);
        }
    }
}
