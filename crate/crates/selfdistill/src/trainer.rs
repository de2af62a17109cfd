//! The on-policy training loop: rollout, teacher construction (conditioned
//! snapshot or EMA), auxiliary-view scoring, reliability weighting, loss
//! assembly, optimizer step, and EMA update. Baselines (SFT, SDFT-style,
//! GKD-like) are configurations of the same loop.
//!
//! Determinism contract: given (config, dataset), every rollout, batch
//! shuffle, and context draw comes from named seeded streams consumed in a
//! fixed order, and all reductions run left-to-right, so repeated runs are
//! bit-identical.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agreement::{
    score_views, sequence_disagreement, token_disagreement, weights_from_disagreement,
    Disagreement, Granularity,
};
use crate::autodiff::{ParamTape, Tape};
use crate::corpus::{build_contexts, render_primary, ContextSet, Example, TaskDataset};
use crate::model::{build_scoring_graph, ArchConfig};
use crate::objectives::{DistillConfig, DivergenceKind, TokenLossBreakdown};
use crate::params::{ema_update, fnv1a, PolicyParameters};
use crate::policy::{init_policy, rollout_prefix, sample_completion, score_distributions, Trajectory};
use crate::scalar::Scalar;
use crate::tokens::{Vocab, EOS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Off-policy cross-entropy on gold completions.
    Sft,
    /// On-policy distillation toward the demonstration-conditioned snapshot,
    /// forward KL, no reliability machinery.
    Sdft,
    /// On-policy weighted-JSD distillation, no reliability machinery.
    GkdLike,
    /// The configurable framework: component flags taken as given.
    Distill,
    /// Every component enabled: agreement, EMA teacher, contrastive,
    /// feature matching, and clipping.
    Integrated,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sft => "sft",
            Mode::Sdft => "sdft",
            Mode::GkdLike => "gkd_like",
            Mode::Distill => "distill",
            Mode::Integrated => "integrated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: Mode,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::optimizer")]
    pub optimizer: OptimizerKind,
    pub steps: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    #[serde(default = "defaults::max_completion")]
    pub max_completion: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub arch: ArchConfig,
}

mod defaults {
    use super::OptimizerKind;
    pub fn learning_rate() -> f64 {
        3e-4
    }
    pub fn optimizer() -> OptimizerKind {
        OptimizerKind::Adam
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn temperature() -> f64 {
        0.7
    }
    pub fn max_completion() -> usize {
        16
    }
}

/// Clip threshold forced on by the integrated mode when none is configured.
pub const INTEGRATED_DEFAULT_KAPPA: f64 = 0.65;

impl TrainerConfig {
    /// Applies the component flags each mode fixes and returns the fully
    /// resolved configuration. `distill` (the freeform mode) passes flags
    /// through unchanged.
    pub fn resolve(&self) -> TrainerConfig {
        let mut cfg = self.clone();
        match cfg.mode {
            Mode::Sft => {
                cfg.distill.divergence = DivergenceKind::ForwardKl;
                cfg.distill.kappa = None;
                cfg.distill.use_ema = false;
                cfg.distill.contrast_enabled = false;
                cfg.distill.feat_enabled = false;
                cfg.distill.agreement.enabled = false;
            }
            Mode::Sdft => {
                cfg.distill.divergence = DivergenceKind::ForwardKl;
                cfg.distill.kappa = None;
                cfg.distill.use_ema = false;
                cfg.distill.contrast_enabled = false;
                cfg.distill.feat_enabled = false;
                cfg.distill.agreement.enabled = false;
            }
            Mode::GkdLike => {
                cfg.distill.divergence = DivergenceKind::WeightedJsd;
                cfg.distill.kappa = None;
                cfg.distill.use_ema = false;
                cfg.distill.contrast_enabled = false;
                cfg.distill.feat_enabled = false;
                cfg.distill.agreement.enabled = false;
            }
            Mode::Distill => {}
            Mode::Integrated => {
                cfg.distill.divergence = DivergenceKind::WeightedJsd;
                cfg.distill.use_ema = true;
                cfg.distill.contrast_enabled = true;
                cfg.distill.feat_enabled = true;
                cfg.distill.agreement.enabled = true;
                if cfg.distill.kappa.is_none() {
                    cfg.distill.kappa = Some(INTEGRATED_DEFAULT_KAPPA);
                }
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("trainer.steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("trainer.batch_size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("trainer.learning_rate must be >= 0".into()));
        }
        if self.temperature < 0.0 {
            return Err(Error::Config("trainer.temperature must be >= 0".into()));
        }
        if self.max_completion == 0 {
            return Err(Error::Config("trainer.max_completion must be >= 1".into()));
        }
        self.arch.validate()?;
        self.distill.validate()
    }
}

/// Canonical baseline configurations.
pub fn make_baseline_config(mode: Mode) -> TrainerConfig {
    TrainerConfig {
        mode,
        distill: DistillConfig::default(),
        learning_rate: defaults::learning_rate(),
        optimizer: defaults::optimizer(),
        steps: 2000,
        batch_size: defaults::batch_size(),
        temperature: defaults::temperature(),
        max_completion: defaults::max_completion(),
        seed: 0,
        arch: ArchConfig::default(),
    }
    .resolve()
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    fn new(n: usize) -> Self {
        OptimizerState {
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            step: 0,
        }
    }

    fn apply(
        &mut self,
        kind: OptimizerKind,
        lr: f64,
        params: &mut [T],
        grad: &[T],
    ) {
        self.step += 1;
        let lr = T::from_f64(lr);
        match kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p = *p - lr * g;
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::from_f64(0.9);
                let b2 = T::from_f64(0.999);
                let eps = T::from_f64(1e-8);
                let c1 = T::one() - T::from_f64(0.9f64.powi(self.step as i32));
                let c2 = T::one() - T::from_f64(0.999f64.powi(self.step as i32));
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first_moment[i] = b1 * self.first_moment[i] + (T::one() - b1) * g;
                    self.second_moment[i] = b2 * self.second_moment[i] + (T::one() - b2) * g * g;
                    let mhat = self.first_moment[i] / c1;
                    let vhat = self.second_moment[i] / c2;
                    params[i] = params[i] - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Train state
// ---------------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Seed for a named stream derived from the run seed.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ fnv1a(name.as_bytes()))
}

#[derive(Debug)]
pub struct RngStreams {
    pub rollout: ChaCha8Rng,
    pub data: ChaCha8Rng,
    pub contexts: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            rollout: ChaCha8Rng::seed_from_u64(stream_seed(seed, "rollout")),
            data: ChaCha8Rng::seed_from_u64(stream_seed(seed, "data")),
            contexts: ChaCha8Rng::seed_from_u64(stream_seed(seed, "contexts")),
        }
    }
}

pub struct TrainState<T: Scalar> {
    pub student: PolicyParameters<T>,
    pub ema_teacher: Option<PolicyParameters<T>>,
    pub base_snapshot: PolicyParameters<T>,
    pub optimizer_state: OptimizerState<T>,
    pub step: usize,
    pub rngs: RngStreams,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state from the resolved config: the student, a frozen copy as
    /// the base snapshot, and (when EMA is on) an EMA teacher initialized to
    /// the student.
    pub fn init(config: &TrainerConfig) -> Result<TrainState<T>> {
        let student = init_policy::<T>(&config.arch, stream_seed(config.seed, "init"))?;
        let base_snapshot = student.clone();
        let ema_teacher = config.distill.use_ema.then(|| student.clone());
        let n = student.len();
        Ok(TrainState {
            student,
            ema_teacher,
            base_snapshot,
            optimizer_state: OptimizerState::new(n),
            step: 0,
            rngs: RngStreams::new(config.seed),
        })
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub breakdown: TokenLossBreakdown,
    pub mean_weight: f64,
    pub clip_fraction: f64,
    pub mean_rollout_len: f64,
    pub skipped: bool,
    pub skip_reason: Option<String>,
}

struct PreparedExample<T> {
    trajectory: Trajectory,
    teacher_logprobs: Option<Vec<T>>, // T x V, primary teacher under c*
    teacher_hidden: Option<Vec<T>>,
    pos_scores: Option<Vec<T>>,
    neg_scores: Option<Vec<T>>,
    token_weights: Vec<f64>,
    sequence_weight: f64,
}

fn gold_trajectory(example: &Example) -> Result<Trajectory> {
    let v = Vocab::reference();
    let prefix = rollout_prefix(&example.prompt)?;
    let mut completion = v.encode(&example.gold)?;
    completion.push(EOS);
    Ok(Trajectory::forced(prefix, completion))
}

/// One optimizer step over a batch. Degenerate weights and non-finite
/// losses skip the step (optimizer and EMA untouched) and report it in the
/// stats; training continues.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[(Example, ContextSet)],
    config: &TrainerConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let cfg = &config.distill;
    let skipped = |reason: String| StepStats {
        breakdown: TokenLossBreakdown::default(),
        mean_weight: 0.0,
        clip_fraction: 0.0,
        mean_rollout_len: 0.0,
        skipped: true,
        skip_reason: Some(reason),
    };

    // ---- plain (gradient-free) preparation -------------------------------
    let mut prepared = Vec::with_capacity(batch.len());
    for (example, contexts) in batch {
        let trajectory = if config.mode == Mode::Sft {
            gold_trajectory(example)?
        } else {
            let prefix = rollout_prefix(&example.prompt)?;
            let seed = state.rngs.rollout.next_u64();
            sample_completion(
                &state.student,
                &prefix,
                config.temperature,
                config.max_completion,
                seed,
            )?
        };
        let t = trajectory.len();

        let mut item = PreparedExample {
            trajectory,
            teacher_logprobs: None,
            teacher_hidden: None,
            pos_scores: None,
            neg_scores: None,
            token_weights: vec![1.0; t],
            sequence_weight: 1.0,
        };

        if config.mode != Mode::Sft {
            // the EMA teacher when enabled, else the frozen base snapshot
            // conditioned on the demonstration; the same teacher serves the
            // primary signal, the auxiliary views, and both contrastive
            // conditions
            let teacher = state.ema_teacher.as_ref().unwrap_or(&state.base_snapshot);
            let trace = score_distributions(teacher, &contexts.primary, &item.trajectory)?;
            // the primary condition embeds the gold demonstration, so the
            // positive-conditioned scores coincide with the primary trace
            item.pos_scores = Some(trace.gather(&item.trajectory.completion));
            item.teacher_hidden = Some(trace.hidden.clone());
            item.teacher_logprobs = Some(trace.logprobs);

            if cfg.agreement.enabled {
                let views = score_views(teacher, contexts, &item.trajectory)?;
                match cfg.agreement.granularity {
                    Granularity::Token => {
                        let delta = token_disagreement(&views, cfg.agreement.statistic)?;
                        item.token_weights = weights_from_disagreement(
                            &Disagreement::PerToken(delta),
                            cfg.agreement.agree_gamma,
                            t,
                        )?;
                    }
                    Granularity::Sequence => {
                        // broadcast weights cancel inside the per-example
                        // ratio, so sequence-level agreement acts at batch
                        // aggregation instead
                        let delta = sequence_disagreement(&views, cfg.agreement.statistic)?;
                        item.sequence_weight =
                            (-cfg.agreement.agree_gamma * delta).exp();
                    }
                }
            }

            if cfg.contrast_enabled {
                let negative = example.negative.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "example {} lacks a negative; contrastive learning needs one",
                        example.id
                    ))
                })?;
                let neg_condition = render_primary(negative);
                let neg =
                    crate::policy::score_tokens(teacher, &neg_condition, &item.trajectory)?;
                item.neg_scores = Some(neg);
            }
        }
        prepared.push(item);
    }

    // ---- differentiable batch graph ---------------------------------------
    let mut tape = Tape::new();
    let mut pt = ParamTape::attach(&mut tape, &state.student);
    let mut example_totals = Vec::with_capacity(prepared.len());
    let mut distill_vals = Vec::with_capacity(prepared.len());
    let mut contrast_vals = Vec::with_capacity(prepared.len());
    let mut feat_vals = Vec::with_capacity(prepared.len());
    let mut per_token_clipped = Vec::new();
    let mut clipped_count = 0usize;
    let mut token_count = 0usize;

    for item in &prepared {
        let traj = &item.trajectory;
        let t = traj.len();
        let (tokens, start) = crate::policy::compose_sequence(&[], traj, config.arch.window)?;
        let (logprobs, hidden) = build_scoring_graph(&mut pt, &tokens, start - 1..start - 1 + t)?;
        let mask_f: Vec<f64> = traj.mask.iter().map(|&m| m as f64).collect();

        let distill_node = if config.mode == Mode::Sft {
            // masked cross-entropy over the gold completion
            let cols: Vec<usize> = traj.completion.iter().map(|&c| c as usize).collect();
            let picked = pt.tape.gather_row_cols(logprobs, &cols);
            let m_total: f64 = mask_f.iter().sum();
            let coeff: Vec<T> =
                mask_f.iter().map(|&m| T::from_f64(-m / m_total)).collect();
            let node = pt.tape.dot_const(picked, &coeff);
            per_token_clipped.extend(
                pt.tape
                    .value(picked)
                    .iter()
                    .map(|lp| -lp.as_f64()),
            );
            token_count += t;
            node
        } else {
            let teacher_logp = item.teacher_logprobs.as_ref().expect("teacher trace");
            let div = pt.tape.divergence_rows(
                logprobs,
                teacher_logp,
                cfg.divergence,
                T::from_f64(cfg.alpha),
            );
            let clipped = match cfg.kappa {
                Some(kappa) => {
                    for &d in pt.tape.value(div) {
                        if d.as_f64() > kappa {
                            clipped_count += 1;
                        }
                    }
                    pt.tape.clip_rows(div, T::from_f64(kappa))
                }
                None => div,
            };
            token_count += t;
            per_token_clipped.extend(pt.tape.value(clipped).iter().map(|d| d.as_f64()));
            let denom: f64 = mask_f
                .iter()
                .zip(&item.token_weights)
                .map(|(&m, &w)| m * w)
                .sum();
            if denom <= 0.0 {
                return Ok(skipped(format!("masked weight total {denom}")));
            }
            let coeff: Vec<T> = mask_f
                .iter()
                .zip(&item.token_weights)
                .map(|(&m, &w)| T::from_f64(m * w / denom))
                .collect();
            pt.tape.dot_const(clipped, &coeff)
        };
        distill_vals.push(pt.tape.scalar(distill_node).as_f64());

        let mut parts = vec![(distill_node, T::one())];

        let contrast_node = if cfg.contrast_enabled && config.mode != Mode::Sft {
            let cols: Vec<usize> = traj.completion.iter().map(|&c| c as usize).collect();
            let student_scores = pt.tape.gather_row_cols(logprobs, &cols);
            let pos = item.pos_scores.as_ref().expect("positive scores");
            let neg = item.neg_scores.as_ref().expect("negative scores");
            let mask_t: Vec<T> = mask_f.iter().map(|&m| T::from_f64(m)).collect();
            let node = pt.tape.hinge_sum(
                student_scores,
                pos,
                neg,
                &mask_t,
                T::from_f64(cfg.margin_gamma),
            );
            parts.push((node, T::from_f64(cfg.lambda_aux)));
            Some(node)
        } else {
            None
        };
        contrast_vals.push(contrast_node.map_or(0.0, |n| pt.tape.scalar(n).as_f64()));

        let feat_node = if cfg.feat_enabled && config.mode != Mode::Sft {
            let teacher_hidden = item.teacher_hidden.as_ref().expect("teacher hidden");
            let mask_t: Vec<T> = mask_f.iter().map(|&m| T::from_f64(m)).collect();
            let node = pt.tape.squared_diff_masked_sum(hidden, teacher_hidden, &mask_t);
            parts.push((node, T::from_f64(cfg.lambda_feat)));
            Some(node)
        } else {
            None
        };
        feat_vals.push(feat_node.map_or(0.0, |n| pt.tape.scalar(n).as_f64()));

        example_totals.push(pt.tape.affine(&parts, T::zero()));
    }

    // batch aggregation with sequence-level reliability weights
    let seq_total: f64 = prepared.iter().map(|p| p.sequence_weight).sum();
    if seq_total <= 0.0 {
        return Ok(skipped(format!("sequence weight total {seq_total}")));
    }
    let batch_parts: Vec<_> = example_totals
        .iter()
        .zip(&prepared)
        .map(|(&node, p)| (node, T::from_f64(p.sequence_weight / seq_total)))
        .collect();
    let batch_loss = pt.tape.affine(&batch_parts, T::zero());
    let loss_value = pt.tape.scalar(batch_loss).as_f64();
    if !loss_value.is_finite() {
        return Ok(skipped(format!("non-finite loss {loss_value}")));
    }

    let grads = pt.tape.backward(batch_loss);
    let flat = pt.flat_grad(&grads);
    if flat.iter().any(|g| !g.is_finite()) {
        return Ok(skipped("non-finite gradient".into()));
    }

    // ---- update ------------------------------------------------------------
    state
        .optimizer_state
        .apply(config.optimizer, config.learning_rate, &mut state.student.values, &flat);
    if let Some(ema) = state.ema_teacher.take() {
        state.ema_teacher = Some(ema_update(&ema, &state.student, cfg.beta)?);
    }
    state.step += 1;

    // ---- stats --------------------------------------------------------------
    let agg = |vals: &[f64]| -> f64 {
        vals.iter()
            .zip(&prepared)
            .map(|(&v, p)| v * p.sequence_weight / seq_total)
            .sum()
    };
    let distill = agg(&distill_vals);
    let contrastive = agg(&contrast_vals);
    let feature = agg(&feat_vals);
    let mean_weight = {
        let mut acc = 0.0;
        let mut n = 0.0;
        for p in &prepared {
            for (&m, &w) in p.trajectory.mask.iter().zip(&p.token_weights) {
                if m == 1 {
                    acc += w * p.sequence_weight;
                    n += 1.0;
                }
            }
        }
        if n > 0.0 {
            acc / n
        } else {
            0.0
        }
    };
    let mean_rollout_len =
        prepared.iter().map(|p| p.trajectory.len() as f64).sum::<f64>() / prepared.len() as f64;

    Ok(StepStats {
        breakdown: TokenLossBreakdown {
            per_token_divergence: per_token_clipped,
            distill,
            contrastive,
            feature,
            total: loss_value,
        },
        mean_weight,
        clip_fraction: if token_count > 0 {
            clipped_count as f64 / token_count as f64
        } else {
            0.0
        },
        mean_rollout_len,
        skipped: false,
        skip_reason: None,
    })
}

/// Builds the per-example contexts a batch needs. The primary condition is
/// always the example's own demonstration; auxiliaries exist only while
/// agreement is enabled.
pub fn batch_contexts<T: Scalar>(
    examples: &[Example],
    pool: &TaskDataset,
    config: &TrainerConfig,
    rngs: &mut RngStreams,
    _marker: std::marker::PhantomData<T>,
) -> Result<Vec<(Example, ContextSet)>> {
    let cfg = &config.distill.agreement;
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        let ctx = if cfg.enabled && config.mode != Mode::Sft {
            build_contexts(ex, pool, cfg.strategy, cfg.k, rngs.contexts.next_u64())?
        } else {
            ContextSet {
                primary: render_primary(&ex.gold),
                auxiliaries: Vec::new(),
                strategy: cfg.strategy,
            }
        };
        out.push((ex.clone(), ctx));
    }
    Ok(out)
}

/// Completed run: final state plus the full per-step metric history.
pub struct TrainingRun<T: Scalar> {
    pub state: TrainState<T>,
    pub step_stats: Vec<StepStats>,
    pub skipped_steps: usize,
    pub healthy: bool,
}

/// Runs `config.steps` optimizer steps over seeded shuffled batches,
/// invoking `on_step` after each. A run with more than 10% skipped steps is
/// flagged unhealthy.
pub fn run_training<T: Scalar, F>(
    config: &TrainerConfig,
    train: &TaskDataset,
    mut on_step: F,
) -> Result<TrainingRun<T>>
where
    F: FnMut(usize, &StepStats, &TrainState<T>) -> Result<()>,
{
    let config = config.resolve();
    config.validate()?;
    if train.examples.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if config.distill.contrast_enabled
        && config.mode != Mode::Sft
        && train.examples.iter().any(|e| e.negative.is_none())
    {
        return Err(Error::Config(
            "contrastive learning enabled but dataset lacks negatives".into(),
        ));
    }

    let mut state = TrainState::<T>::init(&config)?;
    let mut queue: Vec<usize> = Vec::new();
    let mut step_stats = Vec::with_capacity(config.steps);
    let mut skipped_steps = 0usize;

    for step in 0..config.steps {
        let mut picks = Vec::with_capacity(config.batch_size);
        while picks.len() < config.batch_size {
            if queue.is_empty() {
                let mut idx: Vec<usize> = (0..train.examples.len()).collect();
                // Fisher-Yates from the data stream
                for i in (1..idx.len()).rev() {
                    let j = state.rngs.data.random_range(0..=i);
                    idx.swap(i, j);
                }
                queue = idx;
            }
            picks.push(queue.pop().expect("refilled queue"));
        }
        let examples: Vec<Example> =
            picks.iter().map(|&i| train.examples[i].clone()).collect();
        let batch = batch_contexts::<T>(
            &examples,
            train,
            &config,
            &mut state.rngs,
            std::marker::PhantomData,
        )?;
        let stats = train_step(&mut state, &batch, &config)?;
        if stats.skipped {
            skipped_steps += 1;
        }
        on_step(step, &stats, &state)?;
        step_stats.push(stats);
    }

    let healthy = (skipped_steps as f64) <= 0.10 * config.steps as f64;
    Ok(TrainingRun { state, step_stats, skipped_steps, healthy })
}
