//! Four-rooms gridworld with a doorless source task and a locked-door/key
//! target task.
//!
//! Coordinates are `(x, y)` with `y` growing downwards, so "top" rooms have
//! `y < side / 2`.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Number of one-hot channel planes in an [`Observation`].
pub const CHANNELS: usize = 6;

const WALL: usize = 0;
const LOCKED_DOOR: usize = 1;
const OPEN_DOOR: usize = 2;
const KEY: usize = 3;
const GOAL: usize = 4;
const AGENT: usize = 5;

/// Per-step penalty applied in dense mode when a move takes the agent
/// further from its current subgoal.
pub const DENSE_PENALTY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No doors; agent spawns in a top room, goal in a bottom room.
    Source,
    /// One locked door and one key between the agent and the goal.
    Target,
    /// No doors; agent spawns in a bottom room, goal in a top room.
    SourceFlipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub variant: Variant,
    pub reward_mode: RewardMode,
    pub grid_side: usize,
    pub max_steps: usize,
    pub rng_seed: u64,
}

impl TaskSpec {
    pub fn new(variant: Variant, reward_mode: RewardMode) -> Self {
        Self {
            variant,
            reward_mode,
            grid_side: 13,
            max_steps: 300,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 9 {
            return Err(Error::config("grid_side", format!("{} is smaller than 9", self.grid_side)));
        }
        if self.grid_side.is_multiple_of(2) {
            return Err(Error::config("grid_side", format!("{} is not odd", self.grid_side)));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps", "must be positive"));
        }
        Ok(())
    }

    /// Length of the observation vector for this grid size.
    pub fn observation_len(&self) -> usize {
        observation_len(self.grid_side)
    }
}

pub fn observation_len(grid_side: usize) -> usize {
    CHANNELS * grid_side * grid_side + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Pickup,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Pickup];

    pub fn from_index(index: usize) -> Option<Action> {
        Self::ALL.get(index).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
            Action::Pickup => "pickup",
        }
    }
}

/// Full mutable state of one episode.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GridState {
    pub agent_pos: Pos,
    pub goal_pos: Pos,
    pub key_pos: Option<Pos>,
    pub has_key: bool,
    pub door_pos: Option<Pos>,
    pub door_locked: bool,
    pub step_count: usize,
    /// Gap closed off in the target variant so the door is the only way in.
    pub sealed_gap: Option<Pos>,
    pub done: bool,
}

/// Binary feature vector: six flattened one-hot planes plus a has-key flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f32>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.features
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.features.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: GridState,
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// Room quadrant, numbered row-major: 0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right.
type Room = usize;

/// A gridworld task: the fixed four-rooms layout plus the task rules.
#[derive(Debug, Clone)]
pub struct GridWorld {
    spec: TaskSpec,
    walls: Vec<bool>,
    /// Gaps in the inner walls: [top vertical, bottom vertical, left horizontal, right horizontal].
    gaps: [Pos; 4],
}

impl GridWorld {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.validate()?;
        let side = spec.grid_side;
        let mid = side / 2;
        let gaps = [
            Pos::new(mid, mid / 2),
            Pos::new(mid, mid + 1 + (side - 2 - mid) / 2),
            Pos::new(mid / 2, mid),
            Pos::new(mid + 1 + (side - 2 - mid) / 2, mid),
        ];
        let mut walls = vec![false; side * side];
        for y in 0..side {
            for x in 0..side {
                let border = x == 0 || y == 0 || x == side - 1 || y == side - 1;
                if border || x == mid || y == mid {
                    walls[y * side + x] = true;
                }
            }
        }
        for g in &gaps {
            walls[g.y * side + g.x] = false;
        }
        Ok(Self { spec, walls, gaps })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn side(&self) -> usize {
        self.spec.grid_side
    }

    pub fn observation_len(&self) -> usize {
        self.spec.observation_len()
    }

    pub fn gaps(&self) -> [Pos; 4] {
        self.gaps
    }

    /// Wall test on the base layout (ignores per-episode sealed gaps).
    pub fn is_layout_wall(&self, p: Pos) -> bool {
        self.walls[p.y * self.side() + p.x]
    }

    pub fn is_wall(&self, state: &GridState, p: Pos) -> bool {
        self.is_layout_wall(p) || state.sealed_gap == Some(p)
    }

    fn room_of(&self, p: Pos) -> Option<Room> {
        let mid = self.side() / 2;
        if p.x == mid || p.y == mid || self.is_layout_wall(p) {
            return None;
        }
        Some(usize::from(p.x > mid) + 2 * usize::from(p.y > mid))
    }

    fn room_cells(&self, room: Room) -> Vec<Pos> {
        let side = self.side();
        let mid = side / 2;
        let (xs, ys) = match room {
            0 => (1..mid, 1..mid),
            1 => (mid + 1..side - 1, 1..mid),
            2 => (1..mid, mid + 1..side - 1),
            _ => (mid + 1..side - 1, mid + 1..side - 1),
        };
        ys.flat_map(|y| xs.clone().map(move |x| Pos::new(x, y))).collect()
    }

    /// Gaps bordering a room, in the order of `self.gaps`.
    fn room_gaps(&self, room: Room) -> [Pos; 2] {
        let [tv, bv, lh, rh] = self.gaps;
        match room {
            0 => [tv, lh],
            1 => [tv, rh],
            2 => [bv, lh],
            _ => [bv, rh],
        }
    }

    fn spawn_rooms(&self) -> ([Room; 2], [Room; 2]) {
        match self.spec.variant {
            Variant::Source | Variant::Target => ([0, 1], [2, 3]),
            Variant::SourceFlipped => ([2, 3], [0, 1]),
        }
    }

    /// Start a new episode.
    pub fn reset(&self, rng: &mut Rng) -> (GridState, Observation) {
        let (agent_rooms, goal_rooms) = self.spawn_rooms();
        let agent_cells: Vec<Pos> = agent_rooms.iter().flat_map(|&r| self.room_cells(r)).collect();
        let goal_cells: Vec<Pos> = goal_rooms.iter().flat_map(|&r| self.room_cells(r)).collect();
        let agent_pos = agent_cells[rng.random_range(0..agent_cells.len())];
        let goal_pos = goal_cells[rng.random_range(0..goal_cells.len())];

        let mut state = GridState {
            agent_pos,
            goal_pos,
            key_pos: None,
            has_key: false,
            door_pos: None,
            door_locked: false,
            step_count: 0,
            sealed_gap: None,
            done: false,
        };

        if self.spec.variant == Variant::Target {
            self.place_door_and_key(&mut state, rng);
        }
        debug_assert!(self.is_solvable(&state));
        let obs = self.observe(&state);
        (state, obs)
    }

    fn place_door_and_key(&self, state: &mut GridState, rng: &mut Rng) {
        let agent_room = self.room_of(state.agent_pos).expect("agent spawns inside a room");
        let goal_room = self.room_of(state.goal_pos).expect("goal spawns inside a room");
        if agent_room == goal_room {
            state.door_pos = Some(self.room_gaps(goal_room)[0]);
        } else {
            // Entrance to the goal room on the shortest agent->goal path.
            let path = self.shortest_path(state, state.agent_pos, state.goal_pos);
            let [a, b] = self.room_gaps(goal_room);
            let door = path
                .iter()
                .rev()
                .copied()
                .find(|p| *p == a || *p == b)
                .expect("path into the goal room crosses one of its gaps");
            state.door_pos = Some(door);
            state.sealed_gap = Some(if door == a { b } else { a });
        }
        state.door_locked = true;
        // The key starts in the agent's own room, on its side of the door.
        let key_cells: Vec<Pos> = self
            .room_cells(agent_room)
            .into_iter()
            .filter(|&p| p != state.agent_pos && p != state.goal_pos)
            .collect();
        state.key_pos = Some(key_cells[rng.random_range(0..key_cells.len())]);
    }

    fn passable(&self, state: &GridState, p: Pos) -> bool {
        if self.is_wall(state, p) {
            return false;
        }
        !(state.door_locked && state.door_pos == Some(p) && !state.has_key)
    }

    fn neighbours(&self, p: Pos) -> impl Iterator<Item = Pos> + '_ {
        let side = self.side();
        let candidates = [
            (p.y > 0).then(|| Pos::new(p.x, p.y - 1)),
            (p.y + 1 < side).then(|| Pos::new(p.x, p.y + 1)),
            (p.x > 0).then(|| Pos::new(p.x - 1, p.y)),
            (p.x + 1 < side).then(|| Pos::new(p.x + 1, p.y)),
        ];
        candidates.into_iter().flatten()
    }

    fn bfs(&self, state: &GridState, from: Pos) -> Vec<Option<(u32, Pos)>> {
        let side = self.side();
        let mut seen: Vec<Option<(u32, Pos)>> = vec![None; side * side];
        let mut queue = VecDeque::new();
        seen[from.y * side + from.x] = Some((0, from));
        queue.push_back(from);
        while let Some(p) = queue.pop_front() {
            let (d, _) = seen[p.y * side + p.x].unwrap();
            for n in self.neighbours(p) {
                let idx = n.y * side + n.x;
                if seen[idx].is_none() && self.passable(state, n) {
                    seen[idx] = Some((d + 1, p));
                    queue.push_back(n);
                }
            }
        }
        seen
    }

    /// BFS path length; a locked door is passable only while holding the key.
    pub fn shortest_distance(&self, state: &GridState, from: Pos, to: Pos) -> Option<u32> {
        self.bfs(state, from)[to.y * self.side() + to.x].map(|(d, _)| d)
    }

    fn shortest_path(&self, state: &GridState, from: Pos, to: Pos) -> Vec<Pos> {
        let side = self.side();
        let seen = self.bfs(state, from);
        let mut path = Vec::new();
        let mut cur = to;
        while let Some((d, prev)) = seen[cur.y * side + cur.x] {
            path.push(cur);
            if d == 0 {
                break;
            }
            cur = prev;
        }
        path.reverse();
        path
    }

    /// True when the goal can be reached, picking up the key first if needed.
    pub fn is_solvable(&self, state: &GridState) -> bool {
        match state.key_pos {
            Some(key) if !state.has_key => {
                let with_key = GridState {
                    has_key: true,
                    ..state.clone()
                };
                self.shortest_distance(state, state.agent_pos, key).is_some()
                    && self.shortest_distance(&with_key, key, state.goal_pos).is_some()
            }
            _ => self.shortest_distance(state, state.agent_pos, state.goal_pos).is_some(),
        }
    }

    fn subgoal(state: &GridState) -> Pos {
        match state.key_pos {
            Some(key) if !state.has_key => key,
            _ => state.goal_pos,
        }
    }

    pub fn observe(&self, state: &GridState) -> Observation {
        let side = self.side();
        let plane = side * side;
        let mut features = vec![0.0f32; self.observation_len()];
        let mut set = |channel: usize, p: Pos| features[channel * plane + p.y * side + p.x] = 1.0;
        for y in 0..side {
            for x in 0..side {
                let p = Pos::new(x, y);
                if self.is_wall(state, p) {
                    set(WALL, p);
                }
            }
        }
        if let Some(door) = state.door_pos {
            set(if state.door_locked { LOCKED_DOOR } else { OPEN_DOOR }, door);
        }
        if let Some(key) = state.key_pos {
            set(KEY, key);
        }
        set(GOAL, state.goal_pos);
        set(AGENT, state.agent_pos);
        if state.has_key {
            features[CHANNELS * plane] = 1.0;
        }
        Observation { features }
    }

    fn sparse_reward(&self, step_count: usize) -> f64 {
        1.0 - 0.9 * (step_count as f64 / self.spec.max_steps as f64)
    }

    pub fn step(&self, state: &GridState, action: Action) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::Usage("step called on a terminal state".into()));
        }
        let mut next = state.clone();
        next.step_count += 1;
        let subgoal = Self::subgoal(state);

        match action {
            Action::Pickup => {
                if state.key_pos == Some(state.agent_pos) {
                    next.has_key = true;
                    next.key_pos = None;
                }
            }
            _ => {
                let p = state.agent_pos;
                let target = match action {
                    Action::Up => Pos::new(p.x, p.y.saturating_sub(1)),
                    Action::Down => Pos::new(p.x, (p.y + 1).min(self.side() - 1)),
                    Action::Left => Pos::new(p.x.saturating_sub(1), p.y),
                    Action::Right => Pos::new((p.x + 1).min(self.side() - 1), p.y),
                    Action::Pickup => unreachable!(),
                };
                if !self.is_wall(state, target) {
                    let is_locked_door = state.door_locked && state.door_pos == Some(target);
                    if !is_locked_door {
                        next.agent_pos = target;
                    } else if state.has_key {
                        next.door_locked = false;
                        next.agent_pos = target;
                    }
                }
            }
        }

        let mut reward = 0.0;
        if self.spec.reward_mode == RewardMode::Dense {
            let before = self.shortest_distance(state, state.agent_pos, subgoal);
            let after = self.shortest_distance(&next, next.agent_pos, subgoal);
            if let (Some(b), Some(a)) = (before, after) {
                if a > b {
                    reward -= DENSE_PENALTY;
                }
            }
        }
        if next.agent_pos == next.goal_pos {
            reward += self.sparse_reward(next.step_count);
            next.done = true;
        } else if next.step_count >= self.spec.max_steps {
            next.done = true;
        }
        let observation = self.observe(&next);
        let done = next.done;
        Ok(StepOutcome {
            state: next,
            observation,
            reward,
            done,
        })
    }

    /// ASCII rendering: `#` wall, `A` agent, `G` goal, `K` key, `D` locked
    /// door, `d` open door, `.` floor.
    pub fn render(&self, state: &GridState) -> String {
        let side = self.side();
        let mut out = String::with_capacity(side * (side + 1));
        for y in 0..side {
            for x in 0..side {
                let p = Pos::new(x, y);
                let c = if p == state.agent_pos {
                    'A'
                } else if p == state.goal_pos {
                    'G'
                } else if state.key_pos == Some(p) {
                    'K'
                } else if state.door_pos == Some(p) {
                    if state.door_locked {
                        'D'
                    } else {
                        'd'
                    }
                } else if self.is_wall(state, p) {
                    '#'
                } else {
                    '.'
                };
                out.push(c);
            }
            out.push('\n');
        }
        out
    }

    /// Wall cells of the base layout, for renderers.
    pub fn layout_walls(&self) -> Vec<Pos> {
        let side = self.side();
        (0..side)
            .flat_map(|y| (0..side).map(move |x| Pos::new(x, y)))
            .filter(|&p| self.is_layout_wall(p))
            .collect()
    }
}
