//! Transfer-evaluation protocols: zero-shot success tables and fine-tuning
//! adaptation curves, plus a random-walk reference floor.
//!
//! Zero-shot: for every goal in the evaluation set, run `trials_per_goal`
//! episodes from uniformly random start cells, sampling actions from the
//! policy, and count an episode as a success when the goal is reached within
//! the step cap. No parameter ever changes during evaluation.
//!
//! Seed discipline: the (goal, trial) → start-cell sequence is derived from
//! the evaluation seed alone (never from the policy's own draws), so
//! different models evaluated under the same seed face byte-identical
//! episode sequences. The per-episode logs exist precisely so this can be
//! diffed.
//!
//! Fine-tuning: resume full training from a checkpoint on a disjoint set of
//! new goals and record how quickly episode lengths fall. Curves are
//! smoothed over a 100-episode window; the raw series is kept alongside.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{
    self, Action, Cell, EnvConfig, GoalDistance, GoalSpec, GridError, SceneSet, World,
};
use crate::model::{Mode, Model, ModelError};
use crate::noise::RngNoise;
use crate::tape::{sample_categorical, Tape, TapeError};
use crate::tensor::{ParamSet, Tensor};
use crate::trainer::{self, Hyper, InitState, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("fine-tune goals overlap trained goals: scene {0} cell ({1}, {2})")]
    GoalOverlap(usize, usize, usize),
    #[error("evaluation goal set is empty")]
    NoGoals,
}

/// Evaluation protocol parameters.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Episodes per goal in the zero-shot protocol.
    pub trials_per_goal: usize,
    /// Episodes per goal when measuring the fine-tune starting point, and
    /// goal-resampling repetitions (one per seed).
    pub finetune_trials: usize,
    pub step_cap: u32,
    /// Distance bucket for sampling fine-tune goals.
    pub goal_distance: GoalDistance,
    /// Seeds shared by every compared model.
    pub seeds: Vec<u64>,
    /// Worker threads for evaluation episodes (they are independent).
    pub eval_threads: usize,
    /// Training budget of one fine-tune run.
    pub finetune_budget: u64,
    /// New goals sampled per scene for fine-tuning.
    pub new_goals_per_scene: usize,
    /// Episode window for curve smoothing.
    pub smoothing_window: usize,
    /// Bins for the cross-seed aggregate curve.
    pub curve_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials_per_goal: 10,
            finetune_trials: 5,
            step_cap: 500,
            goal_distance: GoalDistance::Random,
            seeds: vec![1, 2, 3, 4, 5],
            eval_threads: 4,
            finetune_budget: 30_000,
            new_goals_per_scene: 5,
            smoothing_window: 100,
            curve_bins: 50,
        }
    }
}

/// The controller being evaluated.
pub enum EvalPolicy<'a> {
    Model { model: &'a Model, params: &'a ParamSet },
    UniformRandom,
    /// Greedy descent of the BFS distance field — the success upper bound.
    ShortestPathOracle,
    /// Always the same action; a lower-bound probe for tests.
    FixedAction(Action),
}

/// One evaluated episode; start cells are logged so seed discipline can be
/// checked by diffing.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub scene_id: usize,
    pub goal: Cell,
    pub trial: usize,
    pub start: Cell,
    pub success: bool,
    pub steps: u32,
}

/// Per-scene success counts for one model. Rates are exact rationals
/// `successes / episodes`; the aggregate row is the episode-weighted mean.
#[derive(Debug, Clone)]
pub struct SceneCounts {
    pub scene_id: usize,
    pub scene_name: String,
    pub trained_states: usize,
    pub total_states: usize,
    pub successes: u64,
    pub episodes: u64,
}

impl SceneCounts {
    pub fn rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuccessTable {
    pub model: String,
    pub rows: Vec<SceneCounts>,
}

impl SuccessTable {
    pub fn total_successes(&self) -> u64 {
        self.rows.iter().map(|r| r.successes).sum()
    }

    pub fn total_episodes(&self) -> u64 {
        self.rows.iter().map(|r| r.episodes).sum()
    }

    /// Episode-weighted aggregate success rate.
    pub fn aggregate_rate(&self) -> f64 {
        let episodes = self.total_episodes();
        if episodes == 0 {
            0.0
        } else {
            self.total_successes() as f64 / episodes as f64
        }
    }
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(h << 6)
        .wrapping_add(h >> 2);
    h.wrapping_mul(0x2545_f491_4f6c_dd1d)
}

/// Deterministic per-episode seed from the evaluation seed and the episode's
/// identity; `stream` separates the start-cell draw from the policy draws.
fn episode_seed(eval_seed: u64, goal: &GoalSpec, trial: usize, stream: u64) -> u64 {
    let mut h = eval_seed ^ 0x5851_f42d_4c95_7f2d;
    h = mix(h, goal.scene_id as u64);
    h = mix(h, goal.cell.0 as u64);
    h = mix(h, goal.cell.1 as u64);
    h = mix(h, trial as u64);
    mix(h, stream)
}

fn draw_start(scenes: &SceneSet, goal: &GoalSpec, eval_seed: u64, trial: usize) -> Cell {
    let scene = scenes.scene(goal.scene_id).expect("validated goal");
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(eval_seed, goal, trial, 0));
    loop {
        let c = scene.free_cells()[rng.gen_range(0..scene.free_count())];
        if c != goal.cell {
            return c;
        }
    }
}

fn run_episode(
    scenes: &SceneSet,
    policy: &EvalPolicy<'_>,
    goal: &GoalSpec,
    start: Cell,
    cap: u32,
    rng: &mut ChaCha8Rng,
) -> Result<(bool, u32), EvalError> {
    let scene = scenes.scene(goal.scene_id)?;
    let env_cfg = EnvConfig {
        episode_cap: cap,
        ..EnvConfig::default()
    };
    let mut state = grid::reset(scene, start, goal, &env_cfg)?;

    // The oracle walks down the BFS distance field.
    let dist_to_goal = match policy {
        EvalPolicy::ShortestPathOracle => {
            let mut map = std::collections::HashMap::new();
            for &c in scene.free_cells() {
                map.insert(c, grid::shortest_path(scene, c, goal.cell)?);
            }
            Some(map)
        }
        _ => None,
    };

    // Goal embeddings do not change within an episode.
    let mut goal_ctx = None;
    if let EvalPolicy::Model { model, params } = policy {
        let mut tape = Tape::new();
        let goal_obs = scenes.goal_observation(goal)?;
        let mut noise = RngNoise::new(rng);
        let enc = model.encode(&mut tape, params, goal_obs.as_slice(), Mode::Infer, &mut noise)?;
        let omega = model.omega(&mut tape, params, &enc)?;
        goal_ctx = Some((tape, enc, omega));
    }

    loop {
        let action = match policy {
            EvalPolicy::UniformRandom => Action::from_index(rng.gen_range(0..4)),
            EvalPolicy::FixedAction(a) => *a,
            EvalPolicy::ShortestPathOracle => {
                let map = dist_to_goal.as_ref().expect("oracle map");
                let here = map[&state.agent_cell];
                *Action::ALL
                    .iter()
                    .find(|a| {
                        let next = scene.apply_move(state.agent_cell, **a);
                        next != state.agent_cell && map[&next] < here
                    })
                    .expect("connected scene always has a descending move")
            }
            EvalPolicy::Model { model, params } => {
                let (tape, goal_enc, omega) = goal_ctx.as_mut().expect("model ctx");
                let obs = scenes.observe(&state)?;
                let mut noise = RngNoise::new(rng);
                let out = model.forward_with_goal(
                    tape,
                    params,
                    goal_enc,
                    *omega,
                    obs.as_slice(),
                    goal.scene_id,
                    Mode::Infer,
                    &mut noise,
                )?;
                Action::from_index(sample_categorical(&out.policy, rng)?)
            }
        };
        let t = grid::step(scene, &state, action, goal, &env_cfg)?;
        state = t.next;
        if t.done {
            let success = state.agent_cell == goal.cell;
            return Ok((success, state.step_count));
        }
    }
}

fn run_episode_batch(
    scenes: &SceneSet,
    policy: &EvalPolicy<'_>,
    specs: &[(GoalSpec, usize)],
    cfg: &EvalConfig,
    eval_seed: u64,
) -> Result<Vec<EpisodeRecord>, EvalError> {
    let mut out = Vec::with_capacity(specs.len());
    for (goal, trial) in specs {
        let start = draw_start(scenes, goal, eval_seed, *trial);
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(eval_seed, goal, *trial, 1));
        let (success, steps) = run_episode(scenes, policy, goal, start, cfg.step_cap, &mut rng)?;
        out.push(EpisodeRecord {
            scene_id: goal.scene_id,
            goal: goal.cell,
            trial: *trial,
            start,
            success,
            steps,
        });
    }
    Ok(out)
}

/// Run the zero-shot protocol for one policy over a goal set.
///
/// Returns the per-scene table plus the raw episode log. Evaluation never
/// mutates parameters: the policy only ever reads them.
pub fn zero_shot(
    label: &str,
    policy: &EvalPolicy<'_>,
    scenes: &SceneSet,
    goal_set: &[GoalSpec],
    trained_goals: &[GoalSpec],
    cfg: &EvalConfig,
    eval_seed: u64,
) -> Result<(SuccessTable, Vec<EpisodeRecord>), EvalError> {
    if goal_set.is_empty() {
        return Err(EvalError::NoGoals);
    }
    for g in goal_set {
        let scene = scenes.scene(g.scene_id)?;
        if !scene.is_free(g.cell) {
            return Err(GridError::NotFree(g.cell.0, g.cell.1).into());
        }
    }

    let specs: Vec<(GoalSpec, usize)> = goal_set
        .iter()
        .flat_map(|&g| (0..cfg.trials_per_goal).map(move |t| (g, t)))
        .collect();

    let threads = cfg.eval_threads.max(1).min(specs.len().max(1));
    let chunk_size = specs.len().div_ceil(threads);
    let chunks: Vec<&[(GoalSpec, usize)]> = specs.chunks(chunk_size).collect();

    let mut records = Vec::with_capacity(specs.len());
    let results: Vec<Result<Vec<EpisodeRecord>, EvalError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || run_episode_batch(scenes, policy, chunk, cfg, eval_seed))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval thread")).collect()
    });
    for r in results {
        records.extend(r?);
    }

    let mut rows: Vec<SceneCounts> = scenes
        .scenes()
        .iter()
        .map(|s| SceneCounts {
            scene_id: s.scene_id,
            scene_name: s.name.clone(),
            trained_states: trained_goals
                .iter()
                .filter(|g| g.scene_id == s.scene_id)
                .count(),
            total_states: s.free_count(),
            successes: 0,
            episodes: 0,
        })
        .collect();
    for r in &records {
        let row = &mut rows[r.scene_id];
        row.episodes += 1;
        row.successes += u64::from(r.success);
    }
    rows.retain(|r| r.episodes > 0);

    Ok((
        SuccessTable {
            model: label.to_string(),
            rows,
        },
        records,
    ))
}

/// The uniform-random floor under the same protocol.
pub fn random_baseline(
    scenes: &SceneSet,
    goal_set: &[GoalSpec],
    trained_goals: &[GoalSpec],
    cfg: &EvalConfig,
    eval_seed: u64,
) -> Result<(SuccessTable, Vec<EpisodeRecord>), EvalError> {
    zero_shot(
        "random",
        &EvalPolicy::UniformRandom,
        scenes,
        goal_set,
        trained_goals,
        cfg,
        eval_seed,
    )
}

/// One seed's fine-tuning curve.
#[derive(Debug, Clone)]
pub struct SeedCurve {
    pub seed: u64,
    pub new_goals: Vec<GoalSpec>,
    /// Mean / std episode length on the new goals before any update.
    pub initial_mean: f64,
    pub initial_std: f64,
    /// (global_step, episode_length) per completed training episode.
    pub raw: Vec<(u64, u32)>,
    /// (global_step, windowed mean, windowed std) per episode.
    pub smoothed: Vec<(u64, f64, f64)>,
}

/// Fine-tuning curves for one model across seeds.
#[derive(Debug, Clone)]
pub struct CurveSeries {
    pub model: String,
    pub curves: Vec<SeedCurve>,
    /// Cross-seed mean/std of episode length, binned over the step budget.
    pub aggregate: Vec<(u64, f64, f64)>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

fn smooth(raw: &[(u64, u32)], window: usize) -> Vec<(u64, f64, f64)> {
    let mut out = Vec::with_capacity(raw.len());
    for (i, &(step, _)) in raw.iter().enumerate() {
        let lo = i + 1 - window.min(i + 1);
        let (mean, std) = mean_std(raw[lo..=i].iter().map(|&(_, l)| l as f64));
        out.push((step, mean, std));
    }
    out
}

/// Fine-tune a checkpoint on one set of new goals.
///
/// The new goals must be disjoint from the trained ones. A zero budget
/// yields just the initial evaluation point.
#[allow(clippy::too_many_arguments)]
pub fn finetune_once(
    model: &Model,
    init_params: &ParamSet,
    init_sq: Option<&[Tensor]>,
    scenes: &SceneSet,
    trained_goals: &[GoalSpec],
    new_goals: &[GoalSpec],
    cfg: &EvalConfig,
    hyper: &Hyper,
    env_cfg: &EnvConfig,
    seed: u64,
    strict: bool,
) -> Result<SeedCurve, EvalError> {
    if new_goals.is_empty() {
        return Err(EvalError::NoGoals);
    }
    for g in new_goals {
        if trained_goals.contains(g) {
            return Err(EvalError::GoalOverlap(g.scene_id, g.cell.0, g.cell.1));
        }
    }

    // Starting point: how the checkpoint behaves on the new goals untouched.
    let policy = EvalPolicy::Model {
        model,
        params: init_params,
    };
    let eval_cfg = EvalConfig {
        trials_per_goal: cfg.finetune_trials,
        ..cfg.clone()
    };
    let (_, records) = zero_shot(
        "init",
        &policy,
        scenes,
        new_goals,
        trained_goals,
        &eval_cfg,
        seed,
    )?;
    let (initial_mean, initial_std) = mean_std(records.iter().map(|r| r.steps as f64));

    let mut raw = Vec::new();
    if hyper.total_steps > 0 {
        let world = World {
            scenes: scenes.clone(),
            trained_goals: new_goals.to_vec(),
        };
        let out = trainer::train(
            model,
            hyper,
            &world,
            env_cfg,
            seed,
            strict,
            Some(InitState {
                params: init_params.clone(),
                opt_sq: init_sq.map(<[Tensor]>::to_vec),
            }),
            None,
        )?;
        let mut log = out.log;
        trainer::sort_log(&mut log);
        raw = log
            .iter()
            .map(|r| (r.global_step, r.episode_length))
            .collect();
    }

    let smoothed = smooth(&raw, cfg.smoothing_window);
    Ok(SeedCurve {
        seed,
        new_goals: new_goals.to_vec(),
        initial_mean,
        initial_std,
        raw,
        smoothed,
    })
}

/// The full fine-tuning protocol: per seed, sample fresh new goals at the
/// configured distance bucket and fine-tune the checkpoint on them; then
/// aggregate across seeds.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    label: &str,
    model: &Model,
    init_params: &ParamSet,
    init_sq: Option<&[Tensor]>,
    world: &World,
    cfg: &EvalConfig,
    hyper: &Hyper,
    env_cfg: &EnvConfig,
) -> Result<CurveSeries, EvalError> {
    let mut curves = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut goal_rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xF17E));
        let mut new_goals = Vec::new();
        for scene in world.scenes.scenes() {
            new_goals.extend(grid::sample_goals_at_distance(
                scene,
                &world.trained_goals,
                cfg.goal_distance,
                cfg.new_goals_per_scene,
                &mut goal_rng,
            )?);
        }
        let run_hyper = Hyper {
            total_steps: cfg.finetune_budget,
            ..hyper.clone()
        };
        curves.push(finetune_once(
            model,
            init_params,
            init_sq,
            &world.scenes,
            &world.trained_goals,
            &new_goals,
            cfg,
            &run_hyper,
            env_cfg,
            seed,
            false,
        )?);
    }

    let aggregate = bin_curves(&curves, cfg.finetune_budget, cfg.curve_bins);
    Ok(CurveSeries {
        model: label.to_string(),
        curves,
        aggregate,
    })
}

fn bin_curves(curves: &[SeedCurve], budget: u64, bins: usize) -> Vec<(u64, f64, f64)> {
    if budget == 0 || bins == 0 {
        return Vec::new();
    }
    let bin_width = (budget / bins as u64).max(1);
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for c in curves {
        for &(step, len) in &c.raw {
            let b = ((step / bin_width) as usize).min(bins - 1);
            buckets[b].push(len as f64);
        }
    }
    buckets
        .iter()
        .enumerate()
        .filter(|(_, b)| !b.is_empty())
        .map(|(i, b)| {
            let (mean, std) = mean_std(b.iter().copied());
            (i as u64 * bin_width + bin_width / 2, mean, std)
        })
        .collect()
}

/// Write one or more success tables as a combined CSV shaped like the
/// zero-shot results table: one row per scene plus an `All` aggregate, one
/// rate column per model.
pub fn write_success_csv(path: &Path, tables: &[SuccessTable]) -> Result<(), EvalError> {
    use std::io::Write;
    assert!(!tables.is_empty());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "Environment,#Trained,Total,%Trained")?;
    for t in tables {
        write!(f, ",{}", t.model)?;
    }
    writeln!(f)?;
    let base = &tables[0];
    for (i, row) in base.rows.iter().enumerate() {
        write!(
            f,
            "{},{},{},{:.2}%",
            row.scene_name,
            row.trained_states,
            row.total_states,
            100.0 * row.trained_states as f64 / row.total_states as f64
        )?;
        for t in tables {
            let r = &t.rows[i];
            debug_assert_eq!(r.scene_id, row.scene_id, "tables must share scene order");
            write!(f, ",{:.2}%", 100.0 * r.rate())?;
        }
        writeln!(f)?;
    }
    let trained: usize = base.rows.iter().map(|r| r.trained_states).sum();
    let total: usize = base.rows.iter().map(|r| r.total_states).sum();
    write!(
        f,
        "All,{},{},{:.2}%",
        trained,
        total,
        100.0 * trained as f64 / total as f64
    )?;
    for t in tables {
        write!(f, ",{:.2}%", 100.0 * t.aggregate_rate())?;
    }
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Long-form smoothed curves: `model,seed,step,mean_len,std`, with the
/// cross-seed aggregate under seed `mean` and the pre-training point at the
/// step the checkpoint was resumed from (0 in these runs).
pub fn write_curves_csv(path: &Path, series: &[CurveSeries]) -> Result<(), EvalError> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "model,seed,step,mean_len,std")?;
    for s in series {
        for c in &s.curves {
            writeln!(f, "{},{},0,{},{}", s.model, c.seed, c.initial_mean, c.initial_std)?;
            for &(step, mean, std) in &c.smoothed {
                writeln!(f, "{},{},{},{},{}", s.model, c.seed, step, mean, std)?;
            }
        }
        for &(step, mean, std) in &s.aggregate {
            writeln!(f, "{},mean,{},{},{}", s.model, step, mean, std)?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Raw per-episode fine-tuning series: `model,seed,step,episode_len`.
pub fn write_curves_raw_csv(path: &Path, series: &[CurveSeries]) -> Result<(), EvalError> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "model,seed,step,episode_len")?;
    for s in series {
        for c in &s.curves {
            for &(step, len) in &c.raw {
                writeln!(f, "{},{},{},{}", s.model, c.seed, step, len)?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

/// Zero-shot episode log: `model,scene,goal_x,goal_y,trial,start_x,start_y,success,steps`.
pub fn write_episodes_csv(
    path: &Path,
    model: &str,
    records: &[EpisodeRecord],
) -> Result<(), EvalError> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "model,scene,goal_x,goal_y,trial,start_x,start_y,success,steps")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            model,
            r.scene_id,
            r.goal.0,
            r.goal.1,
            r.trial,
            r.start.0,
            r.start.1,
            u8::from(r.success),
            r.steps
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::params_sha256;
    use crate::grid::load_scene;
    use crate::model::{ModelConfig, Variant};

    fn small_world() -> World {
        let scene = load_scene(&(".....\n".repeat(5)), 0, "open5").unwrap();
        World {
            scenes: SceneSet::new(vec![scene]),
            trained_goals: vec![GoalSpec {
                scene_id: 0,
                cell: (4, 4),
            }],
        }
    }

    fn small_model(world: &World, variant: Variant) -> (Model, ParamSet) {
        let mut cfg = ModelConfig::new(variant, world.scenes.obs_dim(), world.scenes.len());
        cfg.embed_dim = 8;
        cfg.hidden_dim = 16;
        cfg.enc_hidden = 24;
        let model = Model::new(cfg);
        let params = model.build_params(99);
        (model, params)
    }

    fn goals(cells: &[Cell]) -> Vec<GoalSpec> {
        cells
            .iter()
            .map(|&cell| GoalSpec { scene_id: 0, cell })
            .collect()
    }

    #[test]
    fn oracle_policy_reaches_everything() {
        let world = small_world();
        let cfg = EvalConfig {
            trials_per_goal: 3,
            step_cap: 50,
            eval_threads: 2,
            ..EvalConfig::default()
        };
        let (table, records) = zero_shot(
            "oracle",
            &EvalPolicy::ShortestPathOracle,
            &world.scenes,
            &goals(&[(0, 0), (2, 3), (4, 4)]),
            &world.trained_goals,
            &cfg,
            7,
        )
        .unwrap();
        assert_eq!(table.aggregate_rate(), 1.0);
        assert!(records.iter().all(|r| r.success));
    }

    #[test]
    fn fixed_north_policy_fails_for_non_north_goals() {
        let world = small_world();
        let cfg = EvalConfig {
            trials_per_goal: 4,
            step_cap: 30,
            eval_threads: 1,
            ..EvalConfig::default()
        };
        // Goal at the bottom edge: pushing north can never reach it unless
        // the start is already below... there is no below — successes must
        // be zero except when the start shares the goal column north-path.
        let (_, records) = zero_shot(
            "north",
            &EvalPolicy::FixedAction(Action::North),
            &world.scenes,
            &goals(&[(2, 4)]),
            &world.trained_goals,
            &cfg,
            3,
        )
        .unwrap();
        for r in records {
            // Moving north only decreases y; the goal has the maximum y, so
            // it is reachable only if the start is the goal itself, which
            // the protocol excludes.
            assert!(!r.success);
        }
    }

    #[test]
    fn random_baseline_with_one_step_cap_fails_non_adjacent_goals() {
        let world = small_world();
        let cfg = EvalConfig {
            trials_per_goal: 8,
            step_cap: 1,
            eval_threads: 1,
            ..EvalConfig::default()
        };
        let (table, records) = random_baseline(
            &world.scenes,
            &goals(&[(2, 2)]),
            &world.trained_goals,
            &cfg,
            11,
        )
        .unwrap();
        for r in &records {
            let manhattan = r.start.0.abs_diff(2) + r.start.1.abs_diff(2);
            if manhattan > 1 {
                assert!(!r.success);
            }
        }
        assert_eq!(
            table.total_episodes(),
            records.len() as u64,
            "counts must match the log"
        );
    }

    #[test]
    fn random_baseline_hits_sometimes_with_generous_cap() {
        let world = small_world();
        let cfg = EvalConfig {
            trials_per_goal: 20,
            step_cap: 200,
            eval_threads: 2,
            ..EvalConfig::default()
        };
        let (table, _) = random_baseline(
            &world.scenes,
            &goals(&[(2, 2), (0, 4)]),
            &world.trained_goals,
            &cfg,
            5,
        )
        .unwrap();
        assert!(table.aggregate_rate() > 0.0);
    }

    #[test]
    fn seed_discipline_start_sequences_match_across_policies() {
        let world = small_world();
        let cfg = EvalConfig {
            trials_per_goal: 5,
            step_cap: 20,
            eval_threads: 2,
            ..EvalConfig::default()
        };
        let gs = goals(&[(1, 1), (3, 0)]);
        let (_, random_records) =
            random_baseline(&world.scenes, &gs, &world.trained_goals, &cfg, 21).unwrap();
        let (model, params) = small_model(&world, Variant::Vusfa);
        let (_, model_records) = zero_shot(
            "vusfa",
            &EvalPolicy::Model {
                model: &model,
                params: &params,
            },
            &world.scenes,
            &gs,
            &world.trained_goals,
            &cfg,
            21,
        )
        .unwrap();
        let key = |r: &EpisodeRecord| (r.scene_id, r.goal, r.trial, r.start);
        assert_eq!(
            random_records.iter().map(key).collect::<Vec<_>>(),
            model_records.iter().map(key).collect::<Vec<_>>(),
            "same seed must give identical (goal, trial, start) sequences"
        );
    }

    #[test]
    fn zero_shot_never_mutates_parameters() {
        let world = small_world();
        let (model, params) = small_model(&world, Variant::Vusfa);
        let before = params_sha256(&params);
        let cfg = EvalConfig {
            trials_per_goal: 3,
            step_cap: 40,
            eval_threads: 2,
            ..EvalConfig::default()
        };
        let _ = zero_shot(
            "vusfa",
            &EvalPolicy::Model {
                model: &model,
                params: &params,
            },
            &world.scenes,
            &goals(&[(0, 0), (2, 2)]),
            &world.trained_goals,
            &cfg,
            1,
        )
        .unwrap();
        assert_eq!(params_sha256(&params), before);
    }

    #[test]
    fn table_rates_recompute_from_raw_log() {
        let world = small_world();
        let cfg = EvalConfig {
            trials_per_goal: 6,
            step_cap: 60,
            eval_threads: 2,
            ..EvalConfig::default()
        };
        let (table, records) = random_baseline(
            &world.scenes,
            &goals(&[(1, 3), (4, 0)]),
            &world.trained_goals,
            &cfg,
            13,
        )
        .unwrap();
        let successes = records.iter().filter(|r| r.success).count() as u64;
        assert_eq!(table.total_successes(), successes);
        assert_eq!(table.total_episodes(), records.len() as u64);
        assert_eq!(
            table.aggregate_rate(),
            successes as f64 / records.len() as f64
        );
    }

    #[test]
    fn finetune_zero_budget_gives_single_initial_point() {
        let world = small_world();
        let (model, params) = small_model(&world, Variant::Usfa);
        let cfg = EvalConfig {
            finetune_trials: 2,
            step_cap: 30,
            eval_threads: 1,
            ..EvalConfig::default()
        };
        let hyper = Hyper {
            total_steps: 0,
            ..Hyper::default()
        };
        let curve = finetune_once(
            &model,
            &params,
            None,
            &world.scenes,
            &world.trained_goals,
            &goals(&[(0, 1)]),
            &cfg,
            &hyper,
            &EnvConfig::default(),
            3,
            true,
        )
        .unwrap();
        assert!(curve.raw.is_empty());
        assert!(curve.smoothed.is_empty());
        assert!(curve.initial_mean > 0.0);
    }

    #[test]
    fn finetune_rejects_goal_overlap() {
        let world = small_world();
        let (model, params) = small_model(&world, Variant::Usfa);
        let cfg = EvalConfig::default();
        let hyper = Hyper::default();
        let err = finetune_once(
            &model,
            &params,
            None,
            &world.scenes,
            &world.trained_goals,
            &world.trained_goals.clone(),
            &cfg,
            &hyper,
            &EnvConfig::default(),
            3,
            true,
        );
        assert!(matches!(err, Err(EvalError::GoalOverlap(0, 4, 4))));
    }

    #[test]
    fn finetune_strict_same_seed_is_identical() {
        let world = small_world();
        let (model, params) = small_model(&world, Variant::Usfa);
        let cfg = EvalConfig {
            finetune_trials: 2,
            step_cap: 50,
            eval_threads: 1,
            smoothing_window: 10,
            ..EvalConfig::default()
        };
        let env = EnvConfig {
            episode_cap: 50,
            ..EnvConfig::default()
        };
        let hyper = Hyper {
            total_steps: 300,
            ..Hyper::default()
        };
        let run = || {
            finetune_once(
                &model,
                &params,
                None,
                &world.scenes,
                &world.trained_goals,
                &goals(&[(0, 2)]),
                &cfg,
                &hyper,
                &env,
                17,
                true,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.raw, b.raw);
        assert_eq!(a.initial_mean, b.initial_mean);
        assert_eq!(a.smoothed, b.smoothed);
    }

    #[test]
    fn smoothing_window_and_bins_behave() {
        let raw: Vec<(u64, u32)> = (0..10).map(|i| (i * 5, (10 - i) as u32)).collect();
        let s = smooth(&raw, 3);
        assert_eq!(s.len(), raw.len());
        // First point is its own window.
        assert_eq!(s[0].1, 10.0);
        // Later points average the last three.
        assert!((s[9].1 - (1.0 + 2.0 + 3.0) / 3.0).abs() < 1e-12);

        let curves = vec![SeedCurve {
            seed: 0,
            new_goals: vec![],
            initial_mean: 0.0,
            initial_std: 0.0,
            raw: raw.clone(),
            smoothed: s,
        }];
        let bins = bin_curves(&curves, 50, 5);
        assert!(!bins.is_empty());
        assert!(bins.iter().all(|&(_, m, _)| (1.0..=10.0).contains(&m)));
    }

    #[test]
    fn csv_writers_produce_documented_schemas() {
        let dir = tempfile::tempdir().unwrap();
        let world = small_world();
        let cfg = EvalConfig {
            trials_per_goal: 2,
            step_cap: 10,
            eval_threads: 1,
            ..EvalConfig::default()
        };
        let (table, records) = random_baseline(
            &world.scenes,
            &goals(&[(2, 2)]),
            &world.trained_goals,
            &cfg,
            1,
        )
        .unwrap();

        let table_path = dir.path().join("success.csv");
        write_success_csv(&table_path, std::slice::from_ref(&table)).unwrap();
        let text = std::fs::read_to_string(&table_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "Environment,#Trained,Total,%Trained,random");
        assert!(text.lines().last().unwrap().starts_with("All,"));

        let ep_path = dir.path().join("episodes.csv");
        write_episodes_csv(&ep_path, "random", &records).unwrap();
        let text = std::fs::read_to_string(&ep_path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "model,scene,goal_x,goal_y,trial,start_x,start_y,success,steps"
        );
        assert_eq!(text.lines().count(), 1 + records.len());
    }
}
