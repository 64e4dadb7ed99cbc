//! Deterministic multi-scene gridworld with goal-conditioned episodes.
//!
//! Scenes are small occupancy grids loaded from plain text (`#` wall, `.`
//! free). An episode walks one agent through one scene toward a goal cell of
//! the same scene; every reward is either a step penalty or the goal reward,
//! and episodes cap out at a fixed step budget. Observations stack the four
//! most recent agent cells as one-hot frames, and goals are presented as the
//! goal cell's frame repeated four times.
//!
//! All operations are pure given their inputs; the only randomness is in
//! explicit generators passed to the sampling helpers, so scene data can be
//! shared freely across worker threads.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

/// Grid coordinates as (x, y), with y growing downward.
pub type Cell = (usize, usize);

pub const FRAME_STACK: usize = 4;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("scene text is empty")]
    EmptyScene,
    #[error("ragged rows: line {line} has width {got}, expected {expected}")]
    RaggedRows {
        line: usize,
        got: usize,
        expected: usize,
    },
    #[error("unknown character {ch:?} at line {line}")]
    UnknownChar { line: usize, ch: char },
    #[error("free region is disconnected: {reachable} of {total} free cells reachable")]
    Disconnected { reachable: usize, total: usize },
    #[error("cell ({0}, {1}) is not a free cell")]
    NotFree(usize, usize),
    #[error("start and goal coincide at ({0}, {1})")]
    StartEqualsGoal(usize, usize),
    #[error("episode is already finished")]
    EpisodeFinished,
    #[error("requested {requested} goals but only {available} candidates at distance {distance}")]
    InsufficientGoals {
        requested: usize,
        available: usize,
        distance: String,
    },
    #[error("scene id {0} out of range")]
    BadSceneId(usize),
    #[error("manifest io error: {0}")]
    ManifestIo(#[from] std::io::Error),
    #[error("manifest parse error at line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
}

/// One of the four grid moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    North = 0,
    South = 1,
    East = 2,
    West = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::North, Action::South, Action::East, Action::West];

    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::North => (0, -1),
            Action::South => (0, 1),
            Action::East => (1, 0),
            Action::West => (-1, 0),
        }
    }

    pub fn from_index(i: usize) -> Action {
        Self::ALL[i]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// An immutable scene: grid dimensions, wall mask and the derived free-cell
/// list (row-major order, which fixes the one-hot encoding).
#[derive(Debug, Clone)]
pub struct GridScene {
    pub scene_id: usize,
    pub name: String,
    pub width: usize,
    pub height: usize,
    wall: Vec<bool>,
    free_cells: Vec<Cell>,
    free_index: HashMap<Cell, usize>,
}

impl GridScene {
    pub fn is_free(&self, cell: Cell) -> bool {
        cell.0 < self.width && cell.1 < self.height && !self.wall[cell.1 * self.width + cell.0]
    }

    pub fn free_cells(&self) -> &[Cell] {
        &self.free_cells
    }

    pub fn free_count(&self) -> usize {
        self.free_cells.len()
    }

    /// Index of a free cell in the scene's one-hot encoding.
    pub fn free_index(&self, cell: Cell) -> Option<usize> {
        self.free_index.get(&cell).copied()
    }

    /// Where a move lands: walls and boundaries leave the agent in place.
    pub fn apply_move(&self, cell: Cell, action: Action) -> Cell {
        let (dx, dy) = action.delta();
        let nx = cell.0 as i64 + dx;
        let ny = cell.1 as i64 + dy;
        if nx < 0 || ny < 0 {
            return cell;
        }
        let next = (nx as usize, ny as usize);
        if self.is_free(next) {
            next
        } else {
            cell
        }
    }
}

/// A goal: one free cell of one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GoalSpec {
    pub scene_id: usize,
    pub cell: Cell,
}

/// Reward and episode-length constants.
#[derive(Debug, Clone, Copy)]
pub struct EnvConfig {
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub episode_cap: u32,
    pub frame_stack: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            step_penalty: -0.01,
            goal_reward: 10.0,
            episode_cap: 500,
            frame_stack: FRAME_STACK,
        }
    }
}

/// The agent's situation inside an episode. `history` holds the last four
/// agent cells, most recent last, padded by repeating the start cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeState {
    pub scene_id: usize,
    pub agent_cell: Cell,
    pub step_count: u32,
    pub history: [Cell; FRAME_STACK],
}

/// One environment step.
#[derive(Debug, Clone)]
pub struct Transition {
    pub prev: EpisodeState,
    pub action: Action,
    pub next: EpisodeState,
    pub reward: f64,
    pub done: bool,
}

/// A stacked-frame feature vector (see [`SceneSet::observe`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    data: Vec<f64>,
}

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Parse a scene from text: `#` wall, `.` free, one row per line.
///
/// Rejects ragged rows, unknown characters and maps whose free region is not
/// connected under the four-move set.
pub fn load_scene(text: &str, scene_id: usize, name: &str) -> Result<GridScene, GridError> {
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.is_empty() {
        return Err(GridError::EmptyScene);
    }
    let width = rows[0].chars().count();
    let height = rows.len();
    let mut wall = vec![false; width * height];
    for (y, row) in rows.iter().enumerate() {
        let got = row.chars().count();
        if got != width {
            return Err(GridError::RaggedRows {
                line: y + 1,
                got,
                expected: width,
            });
        }
        for (x, ch) in row.chars().enumerate() {
            match ch {
                '#' => wall[y * width + x] = true,
                '.' => {}
                other => {
                    return Err(GridError::UnknownChar {
                        line: y + 1,
                        ch: other,
                    })
                }
            }
        }
    }

    let mut free_cells = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !wall[y * width + x] {
                free_cells.push((x, y));
            }
        }
    }
    if free_cells.is_empty() {
        return Err(GridError::EmptyScene);
    }

    let scene = GridScene {
        scene_id,
        name: name.to_string(),
        width,
        height,
        wall,
        free_index: free_cells
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect(),
        free_cells,
    };

    let reachable = bfs_distances(&scene, scene.free_cells[0])
        .values()
        .count();
    if reachable != scene.free_cells.len() {
        return Err(GridError::Disconnected {
            reachable,
            total: scene.free_cells.len(),
        });
    }
    Ok(scene)
}

fn bfs_distances(scene: &GridScene, from: Cell) -> HashMap<Cell, usize> {
    let mut dist = HashMap::new();
    dist.insert(from, 0);
    let mut queue = VecDeque::new();
    queue.push_back(from);
    while let Some(cell) = queue.pop_front() {
        let d = dist[&cell];
        for action in Action::ALL {
            let next = scene.apply_move(cell, action);
            if next != cell && !dist.contains_key(&next) {
                dist.insert(next, d + 1);
                queue.push_back(next);
            }
        }
    }
    dist
}

/// Exact breadth-first-search distance between two free cells.
pub fn shortest_path(scene: &GridScene, a: Cell, b: Cell) -> Result<usize, GridError> {
    if !scene.is_free(a) {
        return Err(GridError::NotFree(a.0, a.1));
    }
    if !scene.is_free(b) {
        return Err(GridError::NotFree(b.0, b.1));
    }
    let dist = bfs_distances(scene, a);
    Ok(*dist.get(&b).expect("scene connectivity is validated on load"))
}

/// Start a fresh episode. The start must differ from the goal and both must
/// be free cells of the scene.
pub fn reset(
    scene: &GridScene,
    start: Cell,
    goal: &GoalSpec,
    _cfg: &EnvConfig,
) -> Result<EpisodeState, GridError> {
    if !scene.is_free(start) {
        return Err(GridError::NotFree(start.0, start.1));
    }
    if !scene.is_free(goal.cell) {
        return Err(GridError::NotFree(goal.cell.0, goal.cell.1));
    }
    if start == goal.cell {
        return Err(GridError::StartEqualsGoal(start.0, start.1));
    }
    Ok(EpisodeState {
        scene_id: scene.scene_id,
        agent_cell: start,
        step_count: 0,
        history: [start; FRAME_STACK],
    })
}

/// Advance one step. Moving into a wall or boundary leaves the agent in
/// place and still costs the step penalty. The episode ends when the agent
/// reaches the goal cell or the step cap is hit.
pub fn step(
    scene: &GridScene,
    state: &EpisodeState,
    action: Action,
    goal: &GoalSpec,
    cfg: &EnvConfig,
) -> Result<Transition, GridError> {
    if state.step_count >= cfg.episode_cap || state.agent_cell == goal.cell {
        return Err(GridError::EpisodeFinished);
    }
    let next_cell = scene.apply_move(state.agent_cell, action);
    let mut history = state.history;
    history.rotate_left(1);
    history[FRAME_STACK - 1] = next_cell;
    let next = EpisodeState {
        scene_id: state.scene_id,
        agent_cell: next_cell,
        step_count: state.step_count + 1,
        history,
    };
    let at_goal = next_cell == goal.cell;
    let reward = if at_goal {
        cfg.goal_reward
    } else {
        cfg.step_penalty
    };
    let done = at_goal || next.step_count >= cfg.episode_cap;
    Ok(Transition {
        prev: state.clone(),
        action,
        next,
        reward,
        done,
    })
}

/// Sampling bucket for transfer goals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalDistance {
    Steps(usize),
    Random,
}

impl std::fmt::Display for GoalDistance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GoalDistance::Steps(d) => write!(f, "{d}"),
            GoalDistance::Random => write!(f, "random"),
        }
    }
}

/// Sample `count` untrained goals at an exact BFS distance from the nearest
/// trained goal (or uniformly over all untrained free cells for `Random`).
pub fn sample_goals_at_distance<R: Rng>(
    scene: &GridScene,
    trained: &[GoalSpec],
    distance: GoalDistance,
    count: usize,
    rng: &mut R,
) -> Result<Vec<GoalSpec>, GridError> {
    let trained_cells: HashSet<Cell> = trained
        .iter()
        .filter(|g| g.scene_id == scene.scene_id)
        .map(|g| g.cell)
        .collect();

    let mut candidates: Vec<Cell> = match distance {
        GoalDistance::Random => scene
            .free_cells()
            .iter()
            .copied()
            .filter(|c| !trained_cells.contains(c))
            .collect(),
        GoalDistance::Steps(d) => {
            // Multi-source BFS from the trained goals gives the distance to
            // the nearest one.
            let mut dist: HashMap<Cell, usize> =
                trained_cells.iter().map(|&c| (c, 0)).collect();
            let mut queue: VecDeque<Cell> = trained_cells.iter().copied().collect();
            while let Some(cell) = queue.pop_front() {
                let cur = dist[&cell];
                for action in Action::ALL {
                    let next = scene.apply_move(cell, action);
                    if next != cell && !dist.contains_key(&next) {
                        dist.insert(next, cur + 1);
                        queue.push_back(next);
                    }
                }
            }
            scene
                .free_cells()
                .iter()
                .copied()
                .filter(|c| !trained_cells.contains(c) && dist.get(c) == Some(&d))
                .collect()
        }
    };

    if candidates.len() < count {
        return Err(GridError::InsufficientGoals {
            requested: count,
            available: candidates.len(),
            distance: distance.to_string(),
        });
    }
    candidates.shuffle(rng);
    candidates.truncate(count);
    Ok(candidates
        .into_iter()
        .map(|cell| GoalSpec {
            scene_id: scene.scene_id,
            cell,
        })
        .collect())
}

/// The scene collection an agent is trained over. Fixes the observation
/// encoding: each frame is a one-hot over the scene's free cells (padded to
/// the largest scene) concatenated with a one-hot scene id.
#[derive(Debug, Clone)]
pub struct SceneSet {
    scenes: Vec<GridScene>,
    max_free: usize,
}

impl SceneSet {
    pub fn new(scenes: Vec<GridScene>) -> Self {
        let max_free = scenes.iter().map(|s| s.free_count()).max().unwrap_or(0);
        Self { scenes, max_free }
    }

    pub fn scenes(&self) -> &[GridScene] {
        &self.scenes
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene(&self, id: usize) -> Result<&GridScene, GridError> {
        self.scenes.get(id).ok_or(GridError::BadSceneId(id))
    }

    pub fn frame_dim(&self) -> usize {
        self.max_free + self.scenes.len()
    }

    pub fn obs_dim(&self) -> usize {
        FRAME_STACK * self.frame_dim()
    }

    fn frame_into(&self, scene: &GridScene, cell: Cell, out: &mut Vec<f64>) {
        let base = out.len();
        out.resize(base + self.frame_dim(), 0.0);
        let idx = scene
            .free_index(cell)
            .expect("observed cells are free by construction");
        out[base + idx] = 1.0;
        out[base + self.max_free + scene.scene_id] = 1.0;
    }

    /// Stacked observation of an episode state: the four history frames,
    /// oldest first.
    pub fn observe(&self, state: &EpisodeState) -> Result<Observation, GridError> {
        let scene = self.scene(state.scene_id)?;
        let mut data = Vec::with_capacity(self.obs_dim());
        for &cell in &state.history {
            self.frame_into(scene, cell, &mut data);
        }
        Ok(Observation { data })
    }

    /// Goal observation: the goal cell's frame repeated four times.
    pub fn goal_observation(&self, goal: &GoalSpec) -> Result<Observation, GridError> {
        let scene = self.scene(goal.scene_id)?;
        if !scene.is_free(goal.cell) {
            return Err(GridError::NotFree(goal.cell.0, goal.cell.1));
        }
        let mut data = Vec::with_capacity(self.obs_dim());
        for _ in 0..FRAME_STACK {
            self.frame_into(scene, goal.cell, &mut data);
        }
        Ok(Observation { data })
    }
}

/// A scene set plus its training goals — everything the trainer needs.
#[derive(Debug, Clone)]
pub struct World {
    pub scenes: SceneSet,
    pub trained_goals: Vec<GoalSpec>,
}

/// Parse a scene manifest.
///
/// ```text
/// [scene]
/// file = rooms.txt
/// goals = 1,1 8,1 1,8 8,8 5,3
/// ```
///
/// Scene files are resolved relative to the manifest. Scene ids follow
/// manifest order; scene names are the file stems.
pub fn load_manifest(path: &Path) -> Result<World, GridError> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));

    struct Entry {
        file: Option<(String, usize)>,
        goals: Option<(Vec<Cell>, usize)>,
    }
    let mut entries: Vec<Entry> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "[scene]" {
            entries.push(Entry {
                file: None,
                goals: None,
            });
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(GridError::ManifestParse {
            line: line_no,
            msg: format!("expected `key = value`, got {line:?}"),
        })?;
        let entry = entries.last_mut().ok_or(GridError::ManifestParse {
            line: line_no,
            msg: "key outside a [scene] section".to_string(),
        })?;
        match key.trim() {
            "file" => entry.file = Some((value.trim().to_string(), line_no)),
            "goals" => {
                let mut cells = Vec::new();
                for tok in value.split_whitespace() {
                    let (x, y) = tok.split_once(',').ok_or(GridError::ManifestParse {
                        line: line_no,
                        msg: format!("goal {tok:?} is not x,y"),
                    })?;
                    let parse = |s: &str| {
                        s.parse::<usize>().map_err(|_| GridError::ManifestParse {
                            line: line_no,
                            msg: format!("goal coordinate {s:?} is not an integer"),
                        })
                    };
                    cells.push((parse(x)?, parse(y)?));
                }
                entry.goals = Some((cells, line_no));
            }
            other => {
                return Err(GridError::ManifestParse {
                    line: line_no,
                    msg: format!("unknown key {other:?}"),
                })
            }
        }
    }

    let mut scenes = Vec::new();
    let mut trained_goals = Vec::new();
    for (scene_id, entry) in entries.into_iter().enumerate() {
        let (file, file_line) = entry.file.ok_or(GridError::ManifestParse {
            line: 0,
            msg: format!("scene {scene_id} has no `file` key"),
        })?;
        let scene_path = dir.join(&file);
        let scene_text = std::fs::read_to_string(&scene_path)?;
        let name = Path::new(&file)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("scene_{scene_id}"));
        let scene = load_scene(&scene_text, scene_id, &name)?;
        if let Some((cells, line)) = entry.goals {
            for cell in cells {
                if !scene.is_free(cell) {
                    return Err(GridError::ManifestParse {
                        line,
                        msg: format!("goal ({}, {}) is not free in {file}", cell.0, cell.1),
                    });
                }
                trained_goals.push(GoalSpec { scene_id, cell });
            }
        } else {
            return Err(GridError::ManifestParse {
                line: file_line,
                msg: format!("scene {file} has no `goals` key"),
            });
        }
        scenes.push(scene);
    }
    if scenes.is_empty() {
        return Err(GridError::ManifestParse {
            line: 0,
            msg: "manifest declares no scenes".to_string(),
        });
    }
    Ok(World {
        scenes: SceneSet::new(scenes),
        trained_goals,
    })
}

const ROOMS: &str = include_str!("../../../scenes/rooms.txt");
const CORRIDORS: &str = include_str!("../../../scenes/corridors.txt");
const CLUTTER: &str = include_str!("../../../scenes/clutter.txt");
const RING: &str = include_str!("../../../scenes/ring.txt");

/// The default desk-scale world: four 10×10 scenes with distinct wall
/// layouts and five training goals each (the same content `scenes/` ships
/// as files for the CLI).
pub fn default_world() -> World {
    let specs: [(&str, &str, [Cell; 5]); 4] = [
        ("rooms", ROOMS, [(1, 1), (8, 1), (1, 8), (8, 8), (5, 3)]),
        ("corridors", CORRIDORS, [(0, 0), (4, 5), (8, 2), (2, 9), (6, 0)]),
        ("clutter", CLUTTER, [(0, 0), (9, 9), (5, 3), (2, 7), (7, 1)]),
        ("ring", RING, [(0, 0), (9, 9), (4, 4), (2, 2), (7, 7)]),
    ];
    let mut scenes = Vec::new();
    let mut trained_goals = Vec::new();
    for (scene_id, (name, text, goals)) in specs.into_iter().enumerate() {
        let scene = load_scene(text, scene_id, name).expect("default scenes are valid");
        for cell in goals {
            debug_assert!(scene.is_free(cell), "{name} goal {cell:?} on a wall");
            trained_goals.push(GoalSpec { scene_id, cell });
        }
        scenes.push(scene);
    }
    World {
        scenes: SceneSet::new(scenes),
        trained_goals,
    }
}
