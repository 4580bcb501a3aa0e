//! Staged training: two warmup stages distill frozen teachers into the pre
//! and post decoders, three alignment stages graft the connectors onto the
//! frozen base, and a final unified stage trains everything jointly.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::MaskSlice;
use crate::connectors::apply_prescaler;
use crate::data::{distillation_loss, identity_loss, Sample, SyntheticDataset, TeacherBundle};
use crate::diffusion::{diffusion_loss, forward_noise};
use crate::error::HaploError;
use crate::language::ntp_loss;
use crate::masking::{build_mask, TokenType, TokenTypeSequence};
use crate::model::{generation_plan, understanding_plan, ModelBundle};
use crate::param::Parameter;
use crate::tensor::{Scalar, Tensor};

pub const GRAD_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageId {
    WarmupPre,
    WarmupPost,
    Align1,
    Align2,
    Align3,
    Unified,
}

impl StageId {
    pub const ALL: [StageId; 6] = [
        StageId::WarmupPre,
        StageId::WarmupPost,
        StageId::Align1,
        StageId::Align2,
        StageId::Align3,
        StageId::Unified,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageId::WarmupPre => "warmup-pre",
            StageId::WarmupPost => "warmup-post",
            StageId::Align1 => "align-1",
            StageId::Align2 => "align-2",
            StageId::Align3 => "align-3",
            StageId::Unified => "unified",
        }
    }

    pub fn parse(s: &str) -> Result<Self, HaploError> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| HaploError::Argument(format!("unknown stage '{s}'")))
    }

    /// Stages that must have completed before this one may run.
    pub fn prerequisites(self) -> &'static [StageId] {
        match self {
            StageId::WarmupPre => &[],
            StageId::WarmupPost => &[],
            StageId::Align1 => &[StageId::WarmupPre, StageId::WarmupPost],
            StageId::Align2 => &[StageId::Align1],
            StageId::Align3 => &[StageId::Align2],
            StageId::Unified => &[StageId::Align3],
        }
    }
}

/// Which data and objectives a stage consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StageKind {
    /// Pre decoder alone: feature identity on text rows, teacher
    /// distillation on vision rows.
    WarmupPre,
    /// Post decoder alone with timestep conditioning: identity on text rows,
    /// teacher distillation on predicted noise.
    WarmupPost,
    /// Full understanding forward, next-token loss.
    Understanding,
    /// Full generation forward, noise-prediction loss.
    Generation,
    /// Both objectives on a mixed batch.
    Mixed,
}

impl StageId {
    fn kind(self) -> StageKind {
        match self {
            StageId::WarmupPre => StageKind::WarmupPre,
            StageId::WarmupPost => StageKind::WarmupPost,
            StageId::Align1 => StageKind::Understanding,
            StageId::Align2 => StageKind::Generation,
            StageId::Align3 => StageKind::Mixed,
            StageId::Unified => StageKind::Mixed,
        }
    }
}

/// Hyperparameters and trainable-set for one stage.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub stage: StageId,
    /// Parameter-name globs whose matches are trainable.
    pub trainable: Vec<String>,
    /// Part-way unfreezing: at (step, globs), extend the trainable set.
    pub relax: Option<(usize, Vec<String>)>,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Linear learning-rate ramp over this many initial steps.
    pub warmup_steps: usize,
    /// Calibrate the pre-scalers at stage start if not yet calibrated.
    pub prescale: bool,
    pub weight_decay: f64,
}

impl StagePlan {
    pub fn default_for(stage: StageId) -> Self {
        let globs = |gs: &[&str]| gs.iter().map(|g| g.to_string()).collect::<Vec<_>>();
        let (trainable, relax, lr, steps) = match stage {
            StageId::WarmupPre => (globs(&["pre.*"]), None, 1e-4, 500),
            StageId::WarmupPost => (globs(&["post.*", "heads.noise"]), None, 2e-4, 500),
            StageId::Align1 => (globs(&["connectors.pre.*"]), None, 1e-5, 300),
            StageId::Align2 => (
                globs(&["connectors.post.*"]),
                Some((100, globs(&["post.*"]))),
                1e-4,
                300,
            ),
            StageId::Align3 => (
                globs(&["connectors.pre.*", "connectors.post.*", "post.*"]),
                None,
                1e-4,
                300,
            ),
            StageId::Unified => (globs(&["*"]), None, 2e-5, 1000),
        };
        StagePlan {
            stage,
            trainable,
            relax,
            lr,
            batch_size: 8,
            steps,
            warmup_steps: steps / 10,
            prescale: true,
            weight_decay: 0.0,
        }
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Glob over parameter names: `*` matches any run of characters.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let mut rest = name;
    // First literal must be a prefix, last must be a suffix, the rest must
    // appear in order.
    if !rest.starts_with(parts[0]) {
        return false;
    }
    rest = &rest[parts[0].len()..];
    let last = parts[parts.len() - 1];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    rest.ends_with(last) && rest.len() >= last.len()
}

pub fn matches_any(globs: &[String], name: &str) -> bool {
    globs.iter().any(|g| glob_match(g, name))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Decoupled weight-decay Adam with a global gradient-norm clip applied at
/// each step. Moment buffers are keyed by parameter name, so parameters that
/// unfreeze mid-stage start with fresh state.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, AdamState>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Update every trainable parameter in place; returns the pre-clip
    /// global gradient norm.
    pub fn step<T: Scalar>(&mut self, params: &[Parameter<T>], lr: f64, clip: f64) -> f64 {
        let mut sq = 0.0;
        for p in params.iter().filter(|p| p.trainable()) {
            for g in p.tensor.grad() {
                let g = g.to_f64();
                sq += g * g;
            }
        }
        let norm = sq.sqrt();
        let factor = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };
        for p in params.iter().filter(|p| p.trainable()) {
            let grad: Vec<f64> = p.tensor.grad().iter().map(|g| g.to_f64() * factor).collect();
            let st = self.state.entry(p.name.clone()).or_insert_with(|| AdamState {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - self.beta1.powi(st.step as i32);
            let bc2 = 1.0 - self.beta2.powi(st.step as i32);
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            let mut i = 0;
            p.tensor.map_data(|w| {
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * grad[i];
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * grad[i] * grad[i];
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                let x = w.to_f64();
                *w = T::from_f64(x - lr * (m_hat / (v_hat.sqrt() + eps) + wd * x));
                i += 1;
            });
        }
        norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: StageId,
    pub step: usize,
    pub loss_total: f64,
    pub loss_ntp: f64,
    pub loss_diff: f64,
    pub loss_id: f64,
    pub loss_distill: f64,
    pub lr: f64,
    pub seed: u64,
}

/// Running per-objective sum with the number of contributing samples, so
/// mixed batches average each term over its own examples.
struct Slot<T: Scalar> {
    sum: Option<Tensor<T>>,
    count: usize,
}

impl<T: Scalar> Slot<T> {
    fn empty() -> Self {
        Slot {
            sum: None,
            count: 0,
        }
    }

    fn accumulate(&mut self, term: Tensor<T>) {
        self.sum = Some(match self.sum.take() {
            Some(t) => t.add(&term),
            None => term,
        });
        self.count += 1;
    }

    /// Replace the sum by the per-sample mean.
    fn normalize(&mut self) {
        if let Some(t) = self.sum.take() {
            self.sum = Some(t.scale(T::from_f64(1.0 / self.count as f64)));
        }
    }

    fn value(&self) -> f64 {
        self.sum.as_ref().map_or(0.0, |t| t.item().to_f64())
    }
}

/// Per-step objective values as graph nodes; missing terms report as zero.
struct LossParts<T: Scalar> {
    ntp: Slot<T>,
    diff: Slot<T>,
    id: Slot<T>,
    distill: Slot<T>,
}

impl<T: Scalar> LossParts<T> {
    fn empty() -> Self {
        LossParts {
            ntp: Slot::empty(),
            diff: Slot::empty(),
            id: Slot::empty(),
            distill: Slot::empty(),
        }
    }

    fn normalize(&mut self) {
        for slot in [&mut self.ntp, &mut self.diff, &mut self.id, &mut self.distill] {
            slot.normalize();
        }
    }

    /// Unit-weighted sum of the present objective means.
    fn total(&self) -> Tensor<T> {
        let mut total: Option<Tensor<T>> = None;
        for part in [&self.ntp, &self.diff, &self.id, &self.distill]
            .iter()
            .filter_map(|s| s.sum.as_ref())
        {
            total = Some(match total {
                Some(t) => t.add(part),
                None => part.clone(),
            });
        }
        total.expect("every stage has at least one objective")
    }
}

fn rows_of_type(types: &TokenTypeSequence, want: TokenType) -> Vec<usize> {
    types
        .tags()
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == want)
        .map(|(i, _)| i)
        .collect()
}

fn pick<'a, T: Scalar, R: Rng>(pool: &'a [Sample<T>], rng: &mut R) -> &'a Sample<T> {
    &pool[rng.gen_range(0..pool.len())]
}

fn und_loss<T: Scalar, R: Rng>(
    bundle: &ModelBundle<T>,
    data: &SyntheticDataset<T>,
    rng: &mut R,
) -> Result<Tensor<T>, HaploError> {
    let sample = pick(&data.understanding, rng);
    let latents = data.latents(sample, &bundle.cfg);
    let plan = understanding_plan(&bundle.cfg, latents, &sample.caption)?;
    let logits = bundle.forward_understanding(&plan)?;
    ntp_loss(&logits, &plan.ntp_targets, &plan.ntp_mask)
}

fn gen_loss<T: Scalar, R: Rng>(
    bundle: &ModelBundle<T>,
    data: &SyntheticDataset<T>,
    rng: &mut R,
) -> Result<Tensor<T>, HaploError> {
    let sample = pick(&data.generation, rng);
    let latents = data.latents(sample, &bundle.cfg);
    let plan = generation_plan(&bundle.cfg, &sample.caption)?;
    let t = rng.gen_range(1..=bundle.cfg.t_max);
    let batch = forward_noise(&bundle.sched, &latents, t, rng)?;
    let eps_hat = bundle.forward_generation(&plan, &batch.x_t, t)?;
    Ok(diffusion_loss(&eps_hat, &batch.eps))
}

/// Pre-decoder warmup: run only the pre stack, keep text features fixed and
/// pull vision features toward the frozen teacher.
fn warmup_pre_losses<T: Scalar, R: Rng>(
    bundle: &ModelBundle<T>,
    teachers: &TeacherBundle<T>,
    data: &SyntheticDataset<T>,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>), HaploError> {
    let sample = pick(&data.understanding, rng);
    let latents = data.latents(sample, &bundle.cfg);
    let plan = understanding_plan(&bundle.cfg, latents.clone(), &sample.caption)?;
    let h0 = bundle.embed_sequence(&plan, None, None)?;
    let h0 = apply_prescaler(&bundle.prescaler_pre, &h0, &plan.types);
    let mask = build_mask(&plan.types);
    let slice = MaskSlice::full(&mask);
    let h1 = bundle
        .pre
        .forward(&h0, &slice, &plan.rope, &bundle.null_embedding(), None);
    let id = identity_loss(
        &h1.select_rows(&plan.text_rows),
        &h0.select_rows(&plan.text_rows).detach(),
    )?;
    let vision_rows = rows_of_type(&plan.types, TokenType::Vision);
    let distill = distillation_loss(
        &h1.select_rows(&vision_rows),
        &teachers.pre_features(&latents),
    )?;
    Ok((id, distill))
}

/// Post-decoder warmup: run only the post stack under real timestep
/// conditioning; the noise head chases the frozen teacher's epsilon.
fn warmup_post_losses<T: Scalar, R: Rng>(
    bundle: &ModelBundle<T>,
    teachers: &TeacherBundle<T>,
    data: &SyntheticDataset<T>,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>), HaploError> {
    let sample = pick(&data.generation, rng);
    let latents = data.latents(sample, &bundle.cfg);
    let plan = generation_plan(&bundle.cfg, &sample.caption)?;
    let t = rng.gen_range(1..=bundle.cfg.t_max);
    let batch = forward_noise(&bundle.sched, &latents, t, rng)?;
    let h0 = bundle.embed_sequence(&plan, Some(&batch.x_t), Some(t))?;
    let h0 = apply_prescaler(&bundle.prescaler_post, &h0, &plan.types);
    let mask = build_mask(&plan.types);
    let slice = MaskSlice::full(&mask);
    let h1 = bundle
        .post
        .forward(&h0, &slice, &plan.rope, &bundle.time_embedding(t), None);
    let id = identity_loss(
        &h1.select_rows(&plan.text_rows),
        &h0.select_rows(&plan.text_rows).detach(),
    )?;
    let eps_hat = h1
        .select_rows(&plan.noise_rows)
        .matmul(&bundle.head_noise.tensor);
    let distill = distillation_loss(&eps_hat, &teachers.post_eps(&batch.x_t))?;
    Ok((id, distill))
}

/// Calibrate the amplitude pre-scalers from a few embedded batches of both
/// sequence layouts.
fn calibrate_from_data<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    data: &SyntheticDataset<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(), HaploError> {
    let mut stream = Vec::new();
    for sample in data.understanding.iter().take(4) {
        let latents = data.latents(sample, &bundle.cfg);
        let plan = understanding_plan(&bundle.cfg, latents, &sample.caption)?;
        let h = bundle.embed_sequence(&plan, None, None)?.detach();
        stream.push((h, plan.types));
    }
    for sample in data.generation.iter().take(4) {
        let latents = data.latents(sample, &bundle.cfg);
        let plan = generation_plan(&bundle.cfg, &sample.caption)?;
        let t = (bundle.cfg.t_max / 2).max(1);
        let batch = forward_noise(&bundle.sched, &latents, t, rng)?;
        let h = bundle.embed_sequence(&plan, Some(&batch.x_t), Some(t))?.detach();
        stream.push((h, plan.types));
    }
    bundle.calibrate_prescalers(&stream, &[TokenType::Text, TokenType::Vision])
}

/// Derive the per-stage RNG stream from the run seed and the stage's
/// position, so stages are reproducible independently of each other.
fn stage_rng(seed: u64, stage: StageId) -> ChaCha8Rng {
    let idx = StageId::ALL.iter().position(|&s| s == stage).unwrap() as u64;
    ChaCha8Rng::seed_from_u64(seed ^ (idx.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

pub fn run_stage<T: Scalar>(
    plan: &StagePlan,
    bundle: &mut ModelBundle<T>,
    data: &SyntheticDataset<T>,
    teachers: &TeacherBundle<T>,
    completed: &[StageId],
    seed: u64,
) -> Result<Vec<StepRecord>, HaploError> {
    for pre in plan.stage.prerequisites() {
        if !completed.contains(pre) {
            return Err(HaploError::Sequencing(format!(
                "stage {} requires {} to have completed",
                plan.stage.name(),
                pre.name()
            )));
        }
    }
    if plan.steps == 0 || plan.batch_size == 0 {
        return Err(HaploError::Argument(
            "stage needs at least one step and a nonempty batch".into(),
        ));
    }
    let mut rng = stage_rng(seed, plan.stage);
    if plan.prescale && !bundle.prescaler_pre.calibrated {
        // A separate stream keeps the training batches identical whether or
        // not calibration ran, so prescaling comparisons are like-for-like.
        let mut cal_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCA11_B8A7E);
        calibrate_from_data(bundle, data, &mut cal_rng)?;
    }

    let params = bundle.parameters();
    for p in &params {
        p.set_trainable(matches_any(&plan.trainable, &p.name));
    }
    // Parameters that will never train this stage (not even after the relax
    // point) must come out byte-identical.
    let relax_globs = plan.relax.as_ref().map(|(_, g)| g.as_slice()).unwrap_or(&[]);
    let frozen: Vec<&Parameter<T>> = params
        .iter()
        .filter(|p| !p.trainable() && !matches_any(relax_globs, &p.name))
        .collect();
    let frozen_digests: Vec<[u8; 32]> = frozen.iter().map(|p| p.byte_digest()).collect();

    let mut opt = AdamW::new(plan.weight_decay);
    let mut records = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        if let Some((relax_step, globs)) = &plan.relax {
            if step == *relax_step {
                for p in &params {
                    if matches_any(globs, &p.name) {
                        p.set_trainable(true);
                    }
                }
            }
        }
        let lr = plan.lr_at(step);
        let mut parts = LossParts::empty();
        let kind = plan.stage.kind();
        for i in 0..plan.batch_size {
            match kind {
                StageKind::WarmupPre => {
                    let (id, distill) = warmup_pre_losses(bundle, teachers, data, &mut rng)?;
                    parts.id.accumulate(id);
                    parts.distill.accumulate(distill);
                }
                StageKind::WarmupPost => {
                    let (id, distill) = warmup_post_losses(bundle, teachers, data, &mut rng)?;
                    parts.id.accumulate(id);
                    parts.distill.accumulate(distill);
                }
                StageKind::Understanding => {
                    parts.ntp.accumulate(und_loss(bundle, data, &mut rng)?);
                }
                StageKind::Generation => {
                    parts.diff.accumulate(gen_loss(bundle, data, &mut rng)?);
                }
                StageKind::Mixed => {
                    if i % 2 == 0 {
                        parts.ntp.accumulate(und_loss(bundle, data, &mut rng)?);
                    } else {
                        parts.diff.accumulate(gen_loss(bundle, data, &mut rng)?);
                    }
                }
            }
        }
        parts.normalize();
        let total = parts.total();
        let loss_total = total.item().to_f64();
        if !loss_total.is_finite() {
            return Err(HaploError::Divergence {
                step,
                detail: format!("total loss is {loss_total}"),
            });
        }
        for p in &params {
            p.tensor.zero_grad();
        }
        total.backward();
        opt.step(&params, lr, GRAD_CLIP);
        records.push(StepRecord {
            stage: plan.stage,
            step,
            loss_total,
            loss_ntp: parts.ntp.value(),
            loss_diff: parts.diff.value(),
            loss_id: parts.id.value(),
            loss_distill: parts.distill.value(),
            lr,
            seed,
        });
    }

    for (p, digest) in frozen.iter().zip(&frozen_digests) {
        assert_eq!(
            &p.byte_digest(),
            digest,
            "frozen parameter {} changed during stage {}",
            p.name,
            plan.stage.name()
        );
    }
    Ok(records)
}

/// CSV metrics with a commented header echoing the stage hyperparameters.
pub fn write_metrics_csv(
    path: &Path,
    plan: &StagePlan,
    seed: u64,
    records: &[StepRecord],
) -> Result<(), HaploError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "# stage={} lr={:?} batch={} steps={} seed={}",
        plan.stage.name(),
        plan.lr,
        plan.batch_size,
        plan.steps,
        seed
    )?;
    writeln!(
        f,
        "stage,step,loss_total,loss_ntp,loss_diff,loss_id,loss_distill,lr,seed"
    )?;
    for r in records {
        writeln!(
            f,
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{}",
            r.stage.name(),
            r.step,
            r.loss_total,
            r.loss_ntp,
            r.loss_diff,
            r.loss_id,
            r.loss_distill,
            r.lr,
            r.seed
        )?;
    }
    Ok(())
}
