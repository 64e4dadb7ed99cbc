//! Asynchronous advantage actor-critic training with n-step returns for both
//! the value and the successor features.
//!
//! Each worker repeats: snapshot the shared parameters, roll the policy out
//! for up to `t_max` steps, bootstrap the returns from the last state,
//! assemble the combined loss
//!
//! ```text
//! total = λ_π L_π + λ_V L_V + λ_ψ L_ψ + β L_KL − w_H entropy
//! ```
//!
//! on one tape, update its per-worker β by dual ascent on the goal KL, run
//! backward, clip by global norm and apply the shared RMSProp update.
//!
//! Return targets are evaluated deterministically (`z = μ`) on the worker's
//! snapshot and treated as constants; gradients flow only through the
//! predictions. The ψ recursion increments by φ(s_{i+1}) and the value
//! recursion by r_i; the `alg1_literal` flag switches both increments to the
//! snapshot's per-step ψ predictions instead, for comparison runs only.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::grid::{
    self, Action, Cell, EnvConfig, GoalSpec, GridError, Observation, SceneSet, World,
};
use crate::model::{Mode, Model, ModelError};
use crate::noise::{NoiseSource, RngNoise, ZeroNoise};
use crate::optim::{RmsPropConfig, SharedNet};
use crate::tape::{sample_categorical, NodeId, Tape, TapeError};
use crate::tensor::{clip_global_norm, ParamSet, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint sidecar io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid hyperparameters: {0}")]
    BadHyper(String),
    #[error("no training goals supplied")]
    NoGoals,
    #[error("worker thread panicked")]
    WorkerPanic,
}

/// Training hyperparameters. The loss weights and the KL budget follow the
/// defaults table; discounting, segment length, optimizer and clipping
/// values are declared here.
#[derive(Debug, Clone)]
pub struct Hyper {
    pub gamma: f64,
    /// Rollout segment length.
    pub t_max: usize,
    pub lambda_pi: f64,
    pub lambda_v: f64,
    pub lambda_psi: f64,
    /// KL budget for the bottleneck.
    pub i_c: f64,
    /// β dual-ascent step size.
    pub alpha_beta: f64,
    /// Global environment-step budget.
    pub total_steps: u64,
    pub workers: usize,
    pub entropy_weight: f64,
    pub lr: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub clip_norm: f64,
    /// Use the literal per-step increments ψ(s_i) / ψ(s_i)ᵀω in the return
    /// recursions instead of φ(s_{i+1}) / r_i.
    pub alg1_literal: bool,
    /// Write a checkpoint every this many global steps (0 = only final).
    pub checkpoint_interval: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            t_max: 5,
            lambda_pi: 1.0,
            lambda_v: 0.5,
            lambda_psi: 0.0005,
            i_c: 0.2,
            alpha_beta: 1e-4,
            total_steps: 150_000,
            workers: 8,
            entropy_weight: 0.01,
            lr: 7e-4,
            rms_decay: 0.99,
            rms_eps: 1e-10,
            clip_norm: 40.0,
            alg1_literal: false,
            checkpoint_interval: 0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::BadHyper(msg));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("gamma = {} must be in (0, 1)", self.gamma));
        }
        if self.t_max == 0 {
            return fail("t_max must be at least 1".into());
        }
        if self.workers == 0 {
            return fail("workers must be at least 1".into());
        }
        for (name, v) in [
            ("lambda_pi", self.lambda_pi),
            ("lambda_v", self.lambda_v),
            ("lambda_psi", self.lambda_psi),
            ("entropy_weight", self.entropy_weight),
            ("alpha_beta", self.alpha_beta),
        ] {
            if v < 0.0 || !v.is_finite() {
                return fail(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if self.i_c <= 0.0 {
            return fail(format!("i_c = {} must be > 0", self.i_c));
        }
        if self.lr <= 0.0 || self.clip_norm <= 0.0 {
            return fail("lr and clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn rms_config(&self) -> RmsPropConfig {
        RmsPropConfig {
            lr: self.lr,
            decay: self.rms_decay,
            eps: self.rms_eps,
        }
    }
}

/// Per-worker Lagrangian multiplier for the KL constraint.
#[derive(Debug, Clone, Copy, Default)]
pub struct BetaState {
    pub beta: f64,
}

/// Dual ascent on the KL constraint: β ← max(0, β + α_β (KL − I_c)).
pub fn update_beta(beta: BetaState, observed_kl: f64, hyper: &Hyper) -> BetaState {
    BetaState {
        beta: (beta.beta + hyper.alpha_beta * (observed_kl - hyper.i_c)).max(0.0),
    }
}

/// One transition of a rollout, with the forward outputs the worker saw when
/// it acted.
#[derive(Debug, Clone)]
pub struct SegmentStep {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    pub policy: Vec<f64>,
    pub value: f64,
}

/// Up to `t_max` consecutive transitions toward one goal.
#[derive(Debug, Clone)]
pub struct RolloutSegment {
    pub scene_id: usize,
    pub goal: GoalSpec,
    pub goal_obs: Observation,
    pub steps: Vec<SegmentStep>,
    pub terminal: bool,
}

/// Bootstrapped targets for one segment, aligned with its steps.
#[derive(Debug, Clone)]
pub struct Returns {
    /// ψ targets; empty for the GVF baseline.
    pub r_psi: Vec<Tensor>,
    pub r_v: Vec<f64>,
    pub advantage: Vec<f64>,
}

/// Loss values of one segment. `total` is exactly the weighted sum of the
/// terms (checked every iteration in debug builds).
#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub l_pi: f64,
    pub l_v: f64,
    pub l_psi: f64,
    pub l_kl: f64,
    /// KL of the goal encoding alone — the quantity β ascends on.
    pub kl_goal: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Tape handles for the loss terms, so callers can backward from any of them.
pub struct LossNodes {
    pub l_pi: NodeId,
    pub l_v: NodeId,
    pub l_psi: Option<NodeId>,
    pub l_kl: Option<NodeId>,
    pub entropy: NodeId,
    pub total: NodeId,
}

/// A worker's current episode.
pub struct EpisodeRunner {
    pub goal: GoalSpec,
    pub goal_obs: Observation,
    pub state: grid::EpisodeState,
}

impl EpisodeRunner {
    /// Begin an episode toward `goal` from a uniformly random free start.
    pub fn start<R: Rng>(
        scenes: &SceneSet,
        env_cfg: &EnvConfig,
        goal: GoalSpec,
        rng: &mut R,
    ) -> Result<Self, TrainError> {
        let scene = scenes.scene(goal.scene_id)?;
        let start = loop {
            let c = scene.free_cells()[rng.gen_range(0..scene.free_count())];
            if c != goal.cell {
                break c;
            }
        };
        let state = grid::reset(scene, start, &goal, env_cfg)?;
        let goal_obs = scenes.goal_observation(&goal)?;
        Ok(Self {
            goal,
            goal_obs,
            state,
        })
    }

    pub fn done(&self, env_cfg: &EnvConfig) -> bool {
        self.state.agent_cell == self.goal.cell || self.state.step_count >= env_cfg.episode_cap
    }
}

/// Which goal a worker trains on for its n-th episode: the (scene, goal)
/// pairs cycle across workers so every pair is covered round-robin.
pub fn pair_for(worker: usize, episode: usize, workers: usize, num_pairs: usize) -> usize {
    (worker + episode * workers) % num_pairs
}

/// Roll the current policy out for up to `t_max` steps (or to episode end).
pub fn collect_segment<R: Rng>(
    scenes: &SceneSet,
    env_cfg: &EnvConfig,
    model: &Model,
    params: &ParamSet,
    runner: &mut EpisodeRunner,
    hyper: &Hyper,
    rng: &mut R,
) -> Result<RolloutSegment, TrainError> {
    let scene = scenes.scene(runner.goal.scene_id)?;
    let mut tape = Tape::new();
    // Policy inputs are mean vectors in train mode, so collection can use
    // zero noise without changing the action distribution.
    let goal_enc = model.encode(
        &mut tape,
        params,
        runner.goal_obs.as_slice(),
        Mode::Train,
        &mut ZeroNoise,
    )?;
    let omega = model.omega(&mut tape, params, &goal_enc)?;

    let mut steps = Vec::with_capacity(hyper.t_max);
    let mut terminal = false;
    for _ in 0..hyper.t_max {
        let obs = scenes.observe(&runner.state)?;
        let out = model.forward_with_goal(
            &mut tape,
            params,
            &goal_enc,
            omega,
            obs.as_slice(),
            runner.goal.scene_id,
            Mode::Train,
            &mut ZeroNoise,
        )?;
        let action_idx = sample_categorical(&out.policy, rng)?;
        let transition = grid::step(
            scene,
            &runner.state,
            Action::from_index(action_idx),
            &runner.goal,
            env_cfg,
        )?;
        let next_obs = scenes.observe(&transition.next)?;
        steps.push(SegmentStep {
            obs,
            action: action_idx,
            reward: transition.reward,
            next_obs,
            done: transition.done,
            policy: out.policy,
            value: out.value,
        });
        runner.state = transition.next;
        if transition.done {
            terminal = true;
            break;
        }
    }
    Ok(RolloutSegment {
        scene_id: runner.goal.scene_id,
        goal: runner.goal,
        goal_obs: runner.goal_obs.clone(),
        steps,
        terminal,
    })
}

/// Bootstrap and accumulate the n-step returns of a segment against a fixed
/// parameter snapshot. Everything here is a constant to the optimizer.
///
/// Terminal segments bootstrap from zero; non-terminal segments bootstrap
/// R_ψ from ψ(s_last, g) and R_V from V(s_last, g). The backward recursion
/// then adds φ(s_{i+1}) (resp. r_i) per step.
pub fn compute_returns(
    model: &Model,
    params: &ParamSet,
    segment: &RolloutSegment,
    hyper: &Hyper,
) -> Result<Returns, TrainError> {
    assert!(!segment.steps.is_empty(), "segment must be nonempty");
    let uses_usf = model.config().variant.uses_usf();
    let n = segment.steps.len();

    let mut tape = Tape::new();
    let goal_enc = model.encode(
        &mut tape,
        params,
        segment.goal_obs.as_slice(),
        Mode::Train,
        &mut ZeroNoise,
    )?;
    let omega = model.omega(&mut tape, params, &goal_enc)?;

    let mut values = Vec::with_capacity(n);
    let mut psis: Vec<Option<Tensor>> = Vec::with_capacity(n);
    for step in &segment.steps {
        let enc = model.encode(
            &mut tape,
            params,
            step.obs.as_slice(),
            Mode::Train,
            &mut ZeroNoise,
        )?;
        let refs = model.heads(
            &mut tape,
            params,
            &enc,
            &goal_enc,
            omega,
            segment.scene_id,
            None,
        )?;
        values.push(tape.value(refs.value).item());
        psis.push(refs.psi.map(|id| tape.value(id).clone()));
    }

    let mut phi_next = Vec::with_capacity(n);
    if uses_usf {
        for step in &segment.steps {
            let enc = model.encode(
                &mut tape,
                params,
                step.next_obs.as_slice(),
                Mode::Train,
                &mut ZeroNoise,
            )?;
            phi_next.push(tape.value(enc.mu).clone());
        }
    }

    let (boot_v, boot_psi) = if segment.terminal {
        (0.0, Tensor::zeros(vec![model.config().embed_dim]))
    } else {
        let last = segment.steps.last().expect("nonempty");
        let enc = model.encode(
            &mut tape,
            params,
            last.next_obs.as_slice(),
            Mode::Train,
            &mut ZeroNoise,
        )?;
        let refs = model.heads(
            &mut tape,
            params,
            &enc,
            &goal_enc,
            omega,
            segment.scene_id,
            None,
        )?;
        let v = tape.value(refs.value).item();
        let psi = refs
            .psi
            .map(|id| tape.value(id).clone())
            .unwrap_or_else(|| Tensor::zeros(vec![model.config().embed_dim]));
        (v, psi)
    };

    let mut r_v = vec![0.0; n];
    let mut advantage = vec![0.0; n];
    let mut acc_v = boot_v;
    for i in (0..n).rev() {
        let increment = if hyper.alg1_literal && uses_usf {
            values[i]
        } else {
            segment.steps[i].reward
        };
        acc_v = increment + hyper.gamma * acc_v;
        r_v[i] = acc_v;
        advantage[i] = acc_v - values[i];
    }

    let mut r_psi = Vec::new();
    if uses_usf {
        let mut targets = vec![Tensor::zeros(vec![0]); n];
        let mut acc = boot_psi;
        for i in (0..n).rev() {
            let increment = if hyper.alg1_literal {
                psis[i].as_ref().expect("usf implies psi").clone()
            } else {
                phi_next[i].clone()
            };
            let mut next = increment;
            for (t, a) in next.data_mut().iter_mut().zip(acc.iter()) {
                *t += hyper.gamma * a;
            }
            targets[i] = next.clone();
            acc = next;
        }
        r_psi = targets;
    }

    Ok(Returns {
        r_psi,
        r_v,
        advantage,
    })
}

/// The paper-form KL penalty of one Gaussian encoding against the standard
/// normal: Σ_dims (μ² + σ² − log σ² − 1). Zero iff μ = 0, σ = 1. Note the
/// conventional ½ factor is absent; it is absorbed into β and α_β.
pub fn kl_penalty_node(tape: &mut Tape, mu: NodeId, log_var: NodeId) -> Result<NodeId, TapeError> {
    let dim = tape.value(mu).len() as f64;
    let mu_sq = tape.mul(mu, mu)?;
    let s_mu = tape.sum(mu_sq);
    let var = tape.exp(log_var);
    let s_var = tape.sum(var);
    let s_lv = tape.sum(log_var);
    let a = tape.add(s_mu, s_var)?;
    let b = tape.sub(a, s_lv)?;
    Ok(tape.affine(b, 1.0, -dim))
}

fn mean_of(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId, TapeError> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t)?;
    }
    Ok(tape.affine(acc, 1.0 / terms.len() as f64, 0.0))
}

/// Build the four-term loss of a segment on `tape`.
///
/// Forward passes run in train mode: ψ and the policy read mean vectors, ω
/// reads the reparameterized goal embedding, and SFDP conditioning passes
/// through a stopped gradient. Advantages and return targets are constants.
/// The KL term averages the goal encoding and every state encoding; the
/// goal's own KL is additionally reported for the β update.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses(
    model: &Model,
    params: &ParamSet,
    segment: &RolloutSegment,
    returns: &Returns,
    hyper: &Hyper,
    beta: f64,
    tape: &mut Tape,
    noise: &mut dyn NoiseSource,
) -> Result<(Losses, LossNodes), TrainError> {
    let n = segment.steps.len();
    assert_eq!(returns.r_v.len(), n, "returns misaligned with segment");
    let variant = model.config().variant;

    let goal_enc = model.encode(tape, params, segment.goal_obs.as_slice(), Mode::Train, noise)?;
    let omega = model.omega(tape, params, &goal_enc)?;

    let mut kl_terms = Vec::new();
    let mut kl_goal_value = 0.0;
    if variant.is_variational() {
        let kl = kl_penalty_node(tape, goal_enc.mu, goal_enc.log_var.expect("vusfa"))?;
        kl_goal_value = tape.value(kl).item();
        kl_terms.push(kl);
    }

    let mut pi_terms = Vec::with_capacity(n);
    let mut v_terms = Vec::with_capacity(n);
    let mut psi_terms = Vec::with_capacity(n);
    let mut entropy_terms = Vec::with_capacity(n);

    for (i, step) in segment.steps.iter().enumerate() {
        let state_enc = model.encode(tape, params, step.obs.as_slice(), Mode::Train, noise)?;
        if variant.is_variational() {
            let kl = kl_penalty_node(tape, state_enc.mu, state_enc.log_var.expect("vusfa"))?;
            kl_terms.push(kl);
        }
        let refs = model.heads(
            tape,
            params,
            &state_enc,
            &goal_enc,
            omega,
            segment.scene_id,
            None,
        )?;

        // L_ψ: ‖R_ψ,i − ψ(s_i, g)‖².
        if let Some(psi) = refs.psi {
            let target = tape.constant(returns.r_psi[i].clone());
            let diff = tape.sub(target, psi)?;
            psi_terms.push(tape.dot(diff, diff)?);
        }

        // L_V: (R_V,i − V(s_i, g))², where V is ψᵀω for USF variants. This
        // is the loss that teaches ω.
        let target_v = tape.constant(Tensor::scalar(returns.r_v[i]));
        let diff_v = tape.sub(target_v, refs.value)?;
        v_terms.push(tape.mul(diff_v, diff_v)?);

        // L_π: −A_i · log π(a_i); the advantage is a constant coefficient.
        let lp_action = tape.index(refs.log_policy, step.action);
        pi_terms.push(tape.affine(lp_action, -returns.advantage[i], 0.0));

        // Entropy bonus: −Σ_a π log π.
        let p_lp = tape.mul(refs.policy, refs.log_policy)?;
        let s = tape.sum(p_lp);
        entropy_terms.push(tape.affine(s, -1.0, 0.0));
    }

    let l_pi = mean_of(tape, &pi_terms)?;
    let l_v = mean_of(tape, &v_terms)?;
    let entropy = mean_of(tape, &entropy_terms)?;
    let l_psi = if psi_terms.is_empty() {
        None
    } else {
        Some(mean_of(tape, &psi_terms)?)
    };
    let l_kl = if kl_terms.is_empty() {
        None
    } else {
        Some(mean_of(tape, &kl_terms)?)
    };

    // total = λ_π L_π + λ_V L_V + λ_ψ L_ψ + β L_KL − w_H entropy, folded in
    // exactly this order so the scalar recomposition matches bitwise.
    let mut total = tape.affine(l_pi, hyper.lambda_pi, 0.0);
    let t_v = tape.affine(l_v, hyper.lambda_v, 0.0);
    total = tape.add(total, t_v)?;
    if let Some(lp) = l_psi {
        let t = tape.affine(lp, hyper.lambda_psi, 0.0);
        total = tape.add(total, t)?;
    }
    if let Some(lk) = l_kl {
        let t = tape.affine(lk, beta, 0.0);
        total = tape.add(total, t)?;
    }
    let t_ent = tape.affine(entropy, -hyper.entropy_weight, 0.0);
    total = tape.add(total, t_ent)?;

    let losses = Losses {
        l_pi: tape.value(l_pi).item(),
        l_v: tape.value(l_v).item(),
        l_psi: l_psi.map(|id| tape.value(id).item()).unwrap_or(0.0),
        l_kl: l_kl.map(|id| tape.value(id).item()).unwrap_or(0.0),
        kl_goal: kl_goal_value,
        entropy: tape.value(entropy).item(),
        total: tape.value(total).item(),
    };
    debug_assert_eq!(
        losses.total.to_bits(),
        recompose_total(&losses, hyper, beta, l_psi.is_some(), l_kl.is_some()).to_bits(),
        "loss composition invariant violated"
    );

    Ok((
        losses,
        LossNodes {
            l_pi,
            l_v,
            l_psi,
            l_kl,
            entropy,
            total,
        },
    ))
}

/// Recompute the weighted sum with the same association order as the tape.
pub fn recompose_total(l: &Losses, hyper: &Hyper, beta: f64, has_psi: bool, has_kl: bool) -> f64 {
    let mut total = hyper.lambda_pi * l.l_pi;
    total += hyper.lambda_v * l.l_v;
    if has_psi {
        total += hyper.lambda_psi * l.l_psi;
    }
    if has_kl {
        total += beta * l.l_kl;
    }
    total += -hyper.entropy_weight * l.entropy;
    total
}

/// Outcome of one worker iteration.
pub struct IterationOutcome {
    /// None when a non-finite loss forced the segment to be discarded.
    pub losses: Option<Losses>,
    pub segment_len: u64,
    pub terminal: bool,
}

/// One full worker iteration: snapshot → collect → returns → losses →
/// β update (variational only) → backward → clipped shared apply.
#[allow(clippy::too_many_arguments)]
pub fn worker_iteration<R: Rng>(
    scenes: &SceneSet,
    env_cfg: &EnvConfig,
    model: &Model,
    net: &SharedNet,
    runner: &mut EpisodeRunner,
    beta: &mut BetaState,
    hyper: &Hyper,
    rng: &mut R,
) -> Result<IterationOutcome, TrainError> {
    let params = net.snapshot();
    let segment = collect_segment(scenes, env_cfg, model, &params, runner, hyper, rng)?;
    let segment_len = segment.steps.len() as u64;
    let terminal = segment.terminal;

    let returns = compute_returns(model, &params, &segment, hyper)?;
    let mut tape = Tape::new();
    let mut noise = RngNoise::new(rng);
    let (losses, nodes) = compute_losses(
        model, &params, &segment, &returns, hyper, beta.beta, &mut tape, &mut noise,
    )?;
    if !losses.total.is_finite() {
        // Discard the segment; the next iteration resynchronizes anyway.
        return Ok(IterationOutcome {
            losses: None,
            segment_len,
            terminal,
        });
    }
    if model.config().variant.is_variational() {
        *beta = update_beta(*beta, losses.kl_goal, hyper);
    }
    tape.backward(nodes.total)?;
    let mut grads = tape.param_grads(&params);
    clip_global_norm(&mut grads, hyper.clip_norm);
    net.apply(&grads);
    Ok(IterationOutcome {
        losses: Some(losses),
        segment_len,
        terminal,
    })
}

/// One row of the training log; written when an episode completes.
#[derive(Debug, Clone)]
pub struct EpisodeRow {
    pub global_step: u64,
    pub worker_id: usize,
    pub scene: usize,
    pub goal: Cell,
    pub episode_length: u32,
    pub l_pi: f64,
    pub l_v: f64,
    pub l_psi: f64,
    pub l_kl: f64,
    pub beta: f64,
}

pub const TRAIN_LOG_HEADER: &str =
    "global_step,worker_id,scene,goal_x,goal_y,episode_length,L_pi,L_V,L_psi,L_KL,beta";

pub fn write_train_log(path: &Path, rows: &[EpisodeRow]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{TRAIN_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.global_step,
            r.worker_id,
            r.scene,
            r.goal.0,
            r.goal.1,
            r.episode_length,
            r.l_pi,
            r.l_v,
            r.l_psi,
            r.l_kl,
            r.beta
        )?;
    }
    f.flush()
}

/// Everything `train` produces.
pub struct TrainOutput {
    pub params: ParamSet,
    pub opt_sq: Vec<Tensor>,
    pub steps: u64,
    pub log: Vec<EpisodeRow>,
    pub discarded_segments: u64,
    pub rejected_blocks: u64,
}

/// Optional starting point (resume / fine-tune).
pub struct InitState {
    pub params: ParamSet,
    pub opt_sq: Option<Vec<Tensor>>,
}

/// Where periodic checkpoints go.
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub model_cfg_text: String,
}

struct WorkerShared<'a> {
    net: &'a SharedNet,
    global_step: &'a AtomicU64,
    next_ckpt: &'a AtomicU64,
    log: &'a Mutex<Vec<EpisodeRow>>,
    discarded: &'a AtomicU64,
    failed: &'a Mutex<Option<TrainError>>,
}

#[allow(clippy::too_many_arguments)]
fn worker_loop(
    worker_id: usize,
    scenes: &SceneSet,
    env_cfg: &EnvConfig,
    model: &Model,
    goals: &[GoalSpec],
    hyper: &Hyper,
    base_seed: u64,
    workers: usize,
    sink: Option<&CheckpointSink<'_>>,
    shared: &WorkerShared<'_>,
) -> Result<(), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(worker_id as u64));
    let mut beta = BetaState::default();
    let mut episode_index = 0usize;
    let mut runner = EpisodeRunner::start(
        scenes,
        env_cfg,
        goals[pair_for(worker_id, episode_index, workers, goals.len())],
        &mut rng,
    )?;

    while shared.global_step.load(Ordering::SeqCst) < hyper.total_steps {
        if shared.failed.lock().unwrap().is_some() {
            return Ok(());
        }
        let outcome = worker_iteration(
            scenes, env_cfg, model, shared.net, &mut runner, &mut beta, hyper, &mut rng,
        )?;
        let now = shared
            .global_step
            .fetch_add(outcome.segment_len, Ordering::SeqCst)
            + outcome.segment_len;

        if let Some(sink) = sink {
            maybe_checkpoint(sink, shared, hyper, now)?;
        }

        let losses = match outcome.losses {
            Some(l) => l,
            None => {
                shared.discarded.fetch_add(1, Ordering::Relaxed);
                continue;
            }
        };

        if outcome.terminal {
            shared.log.lock().unwrap().push(EpisodeRow {
                global_step: now,
                worker_id,
                scene: runner.goal.scene_id,
                goal: runner.goal.cell,
                episode_length: runner.state.step_count,
                l_pi: losses.l_pi,
                l_v: losses.l_v,
                l_psi: losses.l_psi,
                l_kl: losses.l_kl,
                beta: beta.beta,
            });
            episode_index += 1;
            runner = EpisodeRunner::start(
                scenes,
                env_cfg,
                goals[pair_for(worker_id, episode_index, workers, goals.len())],
                &mut rng,
            )?;
        }
    }
    Ok(())
}

fn maybe_checkpoint(
    sink: &CheckpointSink<'_>,
    shared: &WorkerShared<'_>,
    hyper: &Hyper,
    now: u64,
) -> Result<(), TrainError> {
    if hyper.checkpoint_interval == 0 {
        return Ok(());
    }
    let boundary = shared.next_ckpt.load(Ordering::SeqCst);
    if now >= boundary
        && shared
            .next_ckpt
            .compare_exchange(
                boundary,
                boundary + hyper.checkpoint_interval,
                Ordering::SeqCst,
                Ordering::SeqCst,
            )
            .is_ok()
    {
        let (params, sq) = shared.net.export();
        let path = sink.dir.join(format!("checkpoint_{boundary}.ckpt"));
        checkpoint::save(&path, &params, &sq, now)?;
        std::fs::write(path.with_extension("cfg"), &sink.model_cfg_text)?;
    }
    Ok(())
}

/// Train a model on a world with asynchronous workers.
///
/// In strict mode exactly one worker runs and the whole pipeline is
/// deterministic given `base_seed`; otherwise `hyper.workers` threads share
/// the global network with per-block locking.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &Model,
    hyper: &Hyper,
    world: &World,
    env_cfg: &EnvConfig,
    base_seed: u64,
    strict: bool,
    init: Option<InitState>,
    sink: Option<CheckpointSink<'_>>,
) -> Result<TrainOutput, TrainError> {
    hyper.validate()?;
    if world.trained_goals.is_empty() {
        return Err(TrainError::NoGoals);
    }
    for g in &world.trained_goals {
        let scene = world.scenes.scene(g.scene_id)?;
        if !scene.is_free(g.cell) {
            return Err(GridError::NotFree(g.cell.0, g.cell.1).into());
        }
    }

    let workers = if strict { 1 } else { hyper.workers };
    let (init_params, init_sq) = match init {
        Some(s) => (s.params, s.opt_sq),
        None => (model.build_params(base_seed), None),
    };
    let net = match init_sq {
        Some(sq) => SharedNet::with_stats(init_params, sq, hyper.rms_config(), strict),
        None => SharedNet::new(init_params, hyper.rms_config(), strict),
    };

    let global_step = AtomicU64::new(0);
    let next_ckpt = AtomicU64::new(hyper.checkpoint_interval.max(1));
    let log = Mutex::new(Vec::new());
    let discarded = AtomicU64::new(0);
    let failed: Mutex<Option<TrainError>> = Mutex::new(None);
    let shared = WorkerShared {
        net: &net,
        global_step: &global_step,
        next_ckpt: &next_ckpt,
        log: &log,
        discarded: &discarded,
        failed: &failed,
    };

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for worker_id in 0..workers {
            let shared = &shared;
            let sink = sink.as_ref();
            handles.push(scope.spawn(move || {
                let result = worker_loop(
                    worker_id,
                    &world.scenes,
                    env_cfg,
                    model,
                    &world.trained_goals,
                    hyper,
                    base_seed,
                    workers,
                    sink,
                    shared,
                );
                if let Err(e) = result {
                    let mut slot = shared.failed.lock().unwrap();
                    if slot.is_none() {
                        *slot = Some(e);
                    }
                }
            }));
        }
        for h in handles {
            h.join().map_err(|_| TrainError::WorkerPanic)?;
        }
        Ok::<(), TrainError>(())
    })?;

    if let Some(e) = failed.into_inner().unwrap() {
        return Err(e);
    }

    let (params, opt_sq) = net.export();
    Ok(TrainOutput {
        params,
        opt_sq,
        steps: global_step.into_inner(),
        log: log.into_inner().unwrap(),
        discarded_segments: discarded.into_inner(),
        rejected_blocks: net.rejected_updates(),
    })
}

/// Sort a multi-worker log into global-step order (workers push rows as
/// episodes finish, so interleavings vary).
pub fn sort_log(log: &mut [EpisodeRow]) {
    log.sort_by_key(|r| r.global_step);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{default_world, load_scene};
    use crate::model::{ModelConfig, Variant};

    fn tiny_world() -> World {
        let scene = load_scene(&(".....\n".repeat(5)), 0, "open5").unwrap();
        World {
            scenes: SceneSet::new(vec![scene]),
            trained_goals: vec![GoalSpec {
                scene_id: 0,
                cell: (4, 4),
            }],
        }
    }

    fn tiny_model(world: &World, variant: Variant) -> Model {
        let mut cfg = ModelConfig::new(variant, world.scenes.obs_dim(), world.scenes.len());
        cfg.embed_dim = 8;
        cfg.hidden_dim = 16;
        cfg.enc_hidden = 24;
        Model::new(cfg)
    }

    fn collect_one(
        world: &World,
        variant: Variant,
        hyper: &Hyper,
        seed: u64,
    ) -> (Model, ParamSet, RolloutSegment) {
        let model = tiny_model(world, variant);
        let params = model.build_params(seed);
        let env_cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut runner =
            EpisodeRunner::start(&world.scenes, &env_cfg, world.trained_goals[0], &mut rng)
                .unwrap();
        let segment = collect_segment(
            &world.scenes,
            &env_cfg,
            &model,
            &params,
            &mut runner,
            hyper,
            &mut rng,
        )
        .unwrap();
        (model, params, segment)
    }

    #[test]
    fn beta_update_cases() {
        let hyper = Hyper {
            alpha_beta: 0.01,
            i_c: 0.2,
            ..Hyper::default()
        };
        // Fixed point at KL = I_c.
        let b = update_beta(BetaState { beta: 0.3 }, 0.2, &hyper);
        assert_eq!(b.beta, 0.3);
        // Clamp at zero.
        let b = update_beta(BetaState { beta: 0.0 }, 0.05, &hyper);
        assert_eq!(b.beta, 0.0);
        // Arithmetic: 0.5 + 0.01 * 1.0 = 0.51.
        let b = update_beta(BetaState { beta: 0.5 }, 1.2, &hyper);
        assert!((b.beta - 0.51).abs() < 1e-15);
    }

    #[test]
    fn beta_stays_zero_below_budget() {
        let hyper = Hyper::default();
        let mut beta = BetaState::default();
        for kl in [0.0, 0.1, 0.19, 0.05, 0.0, 0.15] {
            beta = update_beta(beta, kl, &hyper);
            assert_eq!(beta.beta, 0.0);
        }
    }

    #[test]
    fn kl_penalty_standard_normal_is_zero_and_shifted_mean_is_dim() {
        let mut tape = Tape::new();
        let d = 7;
        let mu0 = tape.constant(Tensor::zeros(vec![d]));
        let lv0 = tape.constant(Tensor::zeros(vec![d]));
        let kl = kl_penalty_node(&mut tape, mu0, lv0).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);

        let mu1 = tape.constant(Tensor::vector(vec![1.0; d]));
        let lv1 = tape.constant(Tensor::zeros(vec![d]));
        let kl = kl_penalty_node(&mut tape, mu1, lv1).unwrap();
        assert_eq!(tape.value(kl).item(), d as f64);
    }

    #[test]
    fn segment_respects_t_max_and_terminal() {
        let world = tiny_world();
        let hyper = Hyper::default();
        let (_, _, segment) = collect_one(&world, Variant::Usfa, &hyper, 3);
        assert!(segment.steps.len() <= hyper.t_max);
        if segment.terminal {
            assert!(segment.steps.last().unwrap().done);
        } else {
            assert_eq!(segment.steps.len(), hyper.t_max);
        }
    }

    #[test]
    fn collect_is_deterministic_under_fixed_seed() {
        let world = tiny_world();
        let hyper = Hyper::default();
        let (_, _, a) = collect_one(&world, Variant::Vusfa, &hyper, 11);
        let (_, _, b) = collect_one(&world, Variant::Vusfa, &hyper, 11);
        assert_eq!(a.steps.len(), b.steps.len());
        for (sa, sb) in a.steps.iter().zip(b.steps.iter()) {
            assert_eq!(sa.action, sb.action);
            assert_eq!(sa.reward, sb.reward);
            assert_eq!(sa.policy, sb.policy);
        }
    }

    #[test]
    fn returns_single_terminal_transition() {
        // An agent one step from the goal: R_V = goal reward with zero
        // bootstrap, R_psi = phi(s_next) exactly, A = R_V - V(s).
        let world = tiny_world();
        let env_cfg = EnvConfig::default();
        let hyper = Hyper::default();
        let model = tiny_model(&world, Variant::Usfa);
        let params = model.build_params(5);
        let goal = world.trained_goals[0];
        let scene = world.scenes.scene(0).unwrap();

        let state = grid::reset(scene, (3, 4), &goal, &env_cfg).unwrap();
        let t = grid::step(scene, &state, Action::East, &goal, &env_cfg).unwrap();
        assert!(t.done);
        let obs = world.scenes.observe(&state).unwrap();
        let next_obs = world.scenes.observe(&t.next).unwrap();
        let segment = RolloutSegment {
            scene_id: 0,
            goal,
            goal_obs: world.scenes.goal_observation(&goal).unwrap(),
            steps: vec![SegmentStep {
                obs: obs.clone(),
                action: Action::East.index(),
                reward: t.reward,
                next_obs: next_obs.clone(),
                done: true,
                policy: vec![0.25; 4],
                value: 0.0,
            }],
            terminal: true,
        };
        let returns = compute_returns(&model, &params, &segment, &hyper).unwrap();
        assert_eq!(returns.r_v, vec![10.0]);

        let phi = model.phi_of(&params, next_obs.as_slice()).unwrap();
        assert_eq!(returns.r_psi[0].data(), phi.data());

        // The advantage subtracts the snapshot's value estimate.
        let mut tape = Tape::new();
        let out = model
            .forward(
                &mut tape,
                &params,
                obs.as_slice(),
                segment.goal_obs.as_slice(),
                0,
                Mode::Train,
                &mut ZeroNoise,
            )
            .unwrap();
        assert!((returns.advantage[0] - (10.0 - out.value)).abs() < 1e-15);
    }

    #[test]
    fn returns_hand_recursion_two_steps() {
        // Two non-terminal steps with gamma = 0.9 and rewards -0.01 each:
        // R_V(first) = -0.019 + 0.81 * bootstrap.
        let world = tiny_world();
        let env_cfg = EnvConfig::default();
        let hyper = Hyper {
            gamma: 0.9,
            t_max: 2,
            ..Hyper::default()
        };
        let model = tiny_model(&world, Variant::Usfa);
        let params = model.build_params(6);
        let goal = world.trained_goals[0];
        let scene = world.scenes.scene(0).unwrap();

        // Walk west from the far corner: never reaches (4, 4).
        let s0 = grid::reset(scene, (2, 0), &goal, &env_cfg).unwrap();
        let t0 = grid::step(scene, &s0, Action::West, &goal, &env_cfg).unwrap();
        let t1 = grid::step(scene, &t0.next, Action::West, &goal, &env_cfg).unwrap();
        let goal_obs = world.scenes.goal_observation(&goal).unwrap();
        let mk = |st: &grid::EpisodeState, tr: &grid::Transition| SegmentStep {
            obs: world.scenes.observe(st).unwrap(),
            action: Action::West.index(),
            reward: tr.reward,
            next_obs: world.scenes.observe(&tr.next).unwrap(),
            done: tr.done,
            policy: vec![0.25; 4],
            value: 0.0,
        };
        let segment = RolloutSegment {
            scene_id: 0,
            goal,
            goal_obs: goal_obs.clone(),
            steps: vec![mk(&s0, &t0), mk(&t0.next, &t1)],
            terminal: false,
        };
        let returns = compute_returns(&model, &params, &segment, &hyper).unwrap();

        // Bootstrap = V(s_last) on the same snapshot.
        let mut tape = Tape::new();
        let out = model
            .forward(
                &mut tape,
                &params,
                world.scenes.observe(&t1.next).unwrap().as_slice(),
                goal_obs.as_slice(),
                0,
                Mode::Train,
                &mut ZeroNoise,
            )
            .unwrap();
        let b = out.value;
        assert!((returns.r_v[1] - (-0.01 + 0.9 * b)).abs() < 1e-12);
        assert!((returns.r_v[0] - (-0.019 + 0.81 * b)).abs() < 1e-12);
    }

    #[test]
    fn losses_compose_exactly_and_gvf_gates_terms() {
        let world = tiny_world();
        let hyper = Hyper::default();
        for variant in Variant::ALL {
            let (model, params, segment) = collect_one(&world, variant, &hyper, 7);
            let returns = compute_returns(&model, &params, &segment, &hyper).unwrap();
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut noise = RngNoise::new(&mut rng);
            let beta = 0.37;
            let (losses, nodes) = compute_losses(
                &model, &params, &segment, &returns, &hyper, beta, &mut tape, &mut noise,
            )
            .unwrap();
            let expect = recompose_total(
                &losses,
                &hyper,
                beta,
                nodes.l_psi.is_some(),
                nodes.l_kl.is_some(),
            );
            assert_eq!(losses.total.to_bits(), expect.to_bits(), "{variant}");
            if variant == Variant::Gvf {
                assert_eq!(losses.l_psi, 0.0);
                assert_eq!(losses.l_kl, 0.0);
                assert!(nodes.l_psi.is_none() && nodes.l_kl.is_none());
            }
            if variant == Variant::Vusfa {
                assert!(losses.kl_goal >= 0.0);
            }
        }
    }

    #[test]
    fn psi_loss_zero_when_predictions_match_targets() {
        // Feed the model's own psi outputs back as targets.
        let world = tiny_world();
        let hyper = Hyper::default();
        let (model, params, segment) = collect_one(&world, Variant::Usfa, &hyper, 9);
        let mut returns = compute_returns(&model, &params, &segment, &hyper).unwrap();
        // Replace targets with the current predictions.
        let goal_obs = segment.goal_obs.clone();
        for (i, step) in segment.steps.iter().enumerate() {
            let mut tape = Tape::new();
            let out = model
                .forward(
                    &mut tape,
                    &params,
                    step.obs.as_slice(),
                    goal_obs.as_slice(),
                    0,
                    Mode::Train,
                    &mut ZeroNoise,
                )
                .unwrap();
            returns.r_psi[i] = out.psi.unwrap();
        }
        let mut tape = Tape::new();
        let (losses, _) = compute_losses(
            &model,
            &params,
            &segment,
            &returns,
            &hyper,
            0.0,
            &mut tape,
            &mut ZeroNoise,
        )
        .unwrap();
        assert_eq!(losses.l_psi, 0.0);
    }

    #[test]
    fn policy_only_hyper_reduces_to_plain_actor_critic_gradients() {
        // lambda_v = lambda_psi = 0 and beta = 0: the update direction must
        // equal that of a manually built policy-gradient + entropy loss.
        let world = tiny_world();
        let hyper = Hyper {
            lambda_v: 0.0,
            lambda_psi: 0.0,
            ..Hyper::default()
        };
        let (model, params, segment) = collect_one(&world, Variant::Usfa, &hyper, 13);
        let returns = compute_returns(&model, &params, &segment, &hyper).unwrap();

        let mut tape = Tape::new();
        let (_, nodes) = compute_losses(
            &model,
            &params,
            &segment,
            &returns,
            &hyper,
            0.0,
            &mut tape,
            &mut ZeroNoise,
        )
        .unwrap();
        tape.backward(nodes.total).unwrap();
        let grads_full = tape.param_grads(&params);

        // Manual plain A3C policy loss on a fresh tape.
        let mut tape2 = Tape::new();
        let goal_enc = model
            .encode(
                &mut tape2,
                &params,
                segment.goal_obs.as_slice(),
                Mode::Train,
                &mut ZeroNoise,
            )
            .unwrap();
        let omega = model.omega(&mut tape2, &params, &goal_enc).unwrap();
        let mut pi_terms = Vec::new();
        let mut ent_terms = Vec::new();
        for (i, step) in segment.steps.iter().enumerate() {
            let enc = model
                .encode(&mut tape2, &params, step.obs.as_slice(), Mode::Train, &mut ZeroNoise)
                .unwrap();
            let refs = model
                .heads(&mut tape2, &params, &enc, &goal_enc, omega, 0, None)
                .unwrap();
            let lp = tape2.index(refs.log_policy, step.action);
            pi_terms.push(tape2.affine(lp, -returns.advantage[i], 0.0));
            let plp = tape2.mul(refs.policy, refs.log_policy).unwrap();
            let s = tape2.sum(plp);
            ent_terms.push(tape2.affine(s, -1.0, 0.0));
        }
        let l_pi = mean_of(&mut tape2, &pi_terms).unwrap();
        let ent = mean_of(&mut tape2, &ent_terms).unwrap();
        let a = tape2.affine(l_pi, hyper.lambda_pi, 0.0);
        let b = tape2.affine(ent, -hyper.entropy_weight, 0.0);
        let total = tape2.add(a, b).unwrap();
        tape2.backward(total).unwrap();
        let grads_manual = tape2.param_grads(&params);

        for (i, (name, _)) in params.iter().enumerate() {
            assert_eq!(
                grads_full.get(i).data(),
                grads_manual.get(i).data(),
                "gradient mismatch on {name}"
            );
        }
    }

    #[test]
    fn pair_assignment_covers_all_goals() {
        let workers = 4;
        let pairs = 20;
        let mut seen = std::collections::HashSet::new();
        for w in 0..workers {
            for e in 0..pairs {
                seen.insert(pair_for(w, e, workers, pairs));
            }
        }
        assert_eq!(seen.len(), pairs);
        // And the cycle rule itself.
        assert_eq!(pair_for(1, 0, 4, 20), 1);
        assert_eq!(pair_for(1, 1, 4, 20), 5);
        assert_eq!(pair_for(3, 5, 4, 20), 3);
    }

    #[test]
    fn zero_budget_returns_initial_checkpoint_and_empty_log() {
        let world = tiny_world();
        let model = tiny_model(&world, Variant::Vusfa);
        let hyper = Hyper {
            total_steps: 0,
            ..Hyper::default()
        };
        let out = train(
            &model,
            &hyper,
            &world,
            &EnvConfig::default(),
            42,
            true,
            None,
            None,
        )
        .unwrap();
        assert_eq!(out.steps, 0);
        assert!(out.log.is_empty());
        let init = model.build_params(42);
        for ((n, a), (_, b)) in out.params.iter().zip(init.iter()) {
            assert_eq!(a.data(), b.data(), "{n} changed without training");
        }
    }

    #[test]
    fn strict_mode_is_bitwise_reproducible() {
        let world = tiny_world();
        let model = tiny_model(&world, Variant::Vusfa);
        let hyper = Hyper {
            total_steps: 400,
            ..Hyper::default()
        };
        let run = || {
            train(
                &model,
                &hyper,
                &world,
                &EnvConfig::default(),
                7,
                true,
                None,
                None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            crate::checkpoint::params_sha256(&a.params),
            crate::checkpoint::params_sha256(&b.params)
        );
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.log.len(), b.log.len());
    }

    #[test]
    fn multi_worker_training_runs_on_default_world() {
        let world = default_world();
        let mut cfg = ModelConfig::new(Variant::Usfa, world.scenes.obs_dim(), world.scenes.len());
        cfg.embed_dim = 8;
        cfg.hidden_dim = 16;
        cfg.enc_hidden = 32;
        let model = Model::new(cfg);
        let hyper = Hyper {
            total_steps: 600,
            workers: 2,
            ..Hyper::default()
        };
        let out = train(
            &model,
            &hyper,
            &world,
            &EnvConfig::default(),
            1,
            false,
            None,
            None,
        )
        .unwrap();
        assert!(out.steps >= 600);
        assert_eq!(out.rejected_blocks, 0);
    }
}
