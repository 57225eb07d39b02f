//! Seedable discrete-control environments and the fixed probe batch.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    CartPole,
    GridRoom,
}

impl EnvId {
    pub fn obs_dim(self) -> usize {
        match self {
            EnvId::CartPole => 4,
            EnvId::GridRoom => GRID_OBS_DIM,
        }
    }

    pub fn num_actions(self) -> usize {
        match self {
            EnvId::CartPole => 2,
            EnvId::GridRoom => 7,
        }
    }

    pub fn probe_size(self) -> usize {
        match self {
            EnvId::CartPole => 1024,
            EnvId::GridRoom => 512,
        }
    }

    pub fn hidden_sizes(self) -> [usize; 2] {
        [64, 64]
    }

    pub fn make(self, seed: u64) -> Env {
        match self {
            EnvId::CartPole => Env::CartPole(CartPole::new(seed)),
            EnvId::GridRoom => Env::GridRoom(GridRoom::new(seed)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::CartPole => "cartpole",
            EnvId::GridRoom => "gridroom",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cartpole" | "cartpole-v1" => Ok(EnvId::CartPole),
            "gridroom" | "gridroom-8x8" => Ok(EnvId::GridRoom),
            other => Err(LabError::Config(format!("unknown environment '{other}'"))),
        }
    }
}

pub type Observation = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Closed set of environments, dispatched without boxing.
#[derive(Debug, Clone)]
pub enum Env {
    CartPole(CartPole),
    GridRoom(GridRoom),
}

impl Env {
    pub fn reset(&mut self) -> Observation {
        match self {
            Env::CartPole(e) => e.reset(),
            Env::GridRoom(e) => e.reset(),
        }
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        match self {
            Env::CartPole(e) => e.step(action),
            Env::GridRoom(e) => e.step(action),
        }
    }
}

// ---------------------------------------------------------------- cart-pole

pub const CARTPOLE_GRAVITY: f64 = 9.8;
pub const CARTPOLE_CART_MASS: f64 = 1.0;
pub const CARTPOLE_POLE_MASS: f64 = 0.1;
pub const CARTPOLE_HALF_LENGTH: f64 = 0.5;
pub const CARTPOLE_FORCE: f64 = 10.0;
pub const CARTPOLE_TAU: f64 = 0.02;
pub const CARTPOLE_X_LIMIT: f64 = 2.4;
pub const CARTPOLE_THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
pub const CARTPOLE_MAX_STEPS: u32 = 500;

/// State `(x, ẋ, θ, θ̇)`.
pub type CartPoleState = [f64; 4];

/// One explicit Euler step of the classic cart-pole equations.
pub fn cartpole_dynamics(state: CartPoleState, action: usize) -> Result<CartPoleState> {
    contract!(action < 2, "cart-pole action must be 0 or 1, got {action}");
    let [x, x_dot, theta, theta_dot] = state;
    let force = if action == 1 { CARTPOLE_FORCE } else { -CARTPOLE_FORCE };
    let total_mass = CARTPOLE_CART_MASS + CARTPOLE_POLE_MASS;
    let pole_mass_length = CARTPOLE_POLE_MASS * CARTPOLE_HALF_LENGTH;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + pole_mass_length * theta_dot * theta_dot * sin) / total_mass;
    let theta_acc = (CARTPOLE_GRAVITY * sin - cos * temp)
        / (CARTPOLE_HALF_LENGTH * (4.0 / 3.0 - CARTPOLE_POLE_MASS * cos * cos / total_mass));
    let x_acc = temp - pole_mass_length * theta_acc * cos / total_mass;
    Ok([
        x + CARTPOLE_TAU * x_dot,
        x_dot + CARTPOLE_TAU * x_acc,
        theta + CARTPOLE_TAU * theta_dot,
        theta_dot + CARTPOLE_TAU * theta_acc,
    ])
}

pub fn cartpole_failed(state: &CartPoleState) -> bool {
    state[0].abs() > CARTPOLE_X_LIMIT || state[2].abs() > CARTPOLE_THETA_LIMIT
}

#[derive(Debug, Clone)]
pub struct CartPole {
    state: CartPoleState,
    steps: u32,
    rng: ChaCha8Rng,
}

impl CartPole {
    pub fn new(seed: u64) -> Self {
        Self {
            state: [0.0; 4],
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> CartPoleState {
        self.state
    }

    pub fn set_state(&mut self, state: CartPoleState) {
        self.state = state;
    }

    pub fn reset(&mut self) -> Observation {
        for s in self.state.iter_mut() {
            *s = self.rng.gen_range(-0.05..=0.05);
        }
        self.steps = 0;
        self.state.to_vec()
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        self.state = cartpole_dynamics(self.state, action)?;
        self.steps += 1;
        let terminated = cartpole_failed(&self.state);
        Ok(StepResult {
            observation: self.state.to_vec(),
            reward: 1.0,
            terminated,
            truncated: !terminated && self.steps >= CARTPOLE_MAX_STEPS,
        })
    }
}

/// Initial observation drawn for `seed`.
pub fn cartpole_reset(seed: u64) -> Observation {
    CartPole::new(seed).reset()
}

// ---------------------------------------------------------------- grid room

pub const GRID_SIZE: i32 = 8;
pub const GRID_VIEW: i32 = 5;
pub const GRID_MAX_STEPS: u32 = 256;
const GRID_CELL_KINDS: usize = 4;
pub const GRID_OBS_DIM: usize = (GRID_VIEW * GRID_VIEW) as usize * GRID_CELL_KINDS + 4;
const GRID_START: (i32, i32) = (1, 1);
const GRID_GOAL: (i32, i32) = (GRID_SIZE - 2, GRID_SIZE - 2);

pub const GRID_TURN_LEFT: usize = 0;
pub const GRID_TURN_RIGHT: usize = 1;
pub const GRID_FORWARD: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Empty = 0,
    Wall = 1,
    Goal = 2,
    OutOfBounds = 3,
}

fn cell_at(x: i32, y: i32) -> Cell {
    if !(0..GRID_SIZE).contains(&x) || !(0..GRID_SIZE).contains(&y) {
        Cell::OutOfBounds
    } else if x == 0 || y == 0 || x == GRID_SIZE - 1 || y == GRID_SIZE - 1 {
        Cell::Wall
    } else if (x, y) == GRID_GOAL {
        Cell::Goal
    } else {
        Cell::Empty
    }
}

/// Heading 0 = east, 1 = south, 2 = west, 3 = north.
fn heading_vector(heading: u8) -> (i32, i32) {
    match heading % 4 {
        0 => (1, 0),
        1 => (0, 1),
        2 => (-1, 0),
        _ => (0, -1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridState {
    pub x: i32,
    pub y: i32,
    pub heading: u8,
}

/// 8×8 walled room with the goal in the far corner, observed through a
/// 5×5 egocentric one-hot window (agent at the bottom centre, facing up).
#[derive(Debug, Clone)]
pub struct GridRoom {
    state: GridState,
    steps: u32,
}

impl GridRoom {
    /// The start pose is fixed, so `seed` does not influence the episode.
    pub fn new(_seed: u64) -> Self {
        Self {
            state: Self::start(),
            steps: 0,
        }
    }

    pub fn start() -> GridState {
        GridState {
            x: GRID_START.0,
            y: GRID_START.1,
            heading: 0,
        }
    }

    pub fn state(&self) -> GridState {
        self.state
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn reset(&mut self) -> Observation {
        self.state = Self::start();
        self.steps = 0;
        grid_observation(&self.state)
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        let (next, reached) = grid_transition(self.state, action)?;
        self.state = next;
        self.steps += 1;
        let reward = if reached {
            1.0 - 0.9 * (self.steps as f64 / GRID_MAX_STEPS as f64)
        } else {
            0.0
        };
        Ok(StepResult {
            observation: grid_observation(&self.state),
            reward,
            terminated: reached,
            truncated: !reached && self.steps >= GRID_MAX_STEPS,
        })
    }
}

/// Pure transition; the flag reports whether the goal was entered.
pub fn grid_transition(state: GridState, action: usize) -> Result<(GridState, bool)> {
    contract!(action < 7, "grid action must be in 0..7, got {action}");
    let mut next = state;
    match action {
        GRID_TURN_LEFT => next.heading = (state.heading + 3) % 4,
        GRID_TURN_RIGHT => next.heading = (state.heading + 1) % 4,
        GRID_FORWARD => {
            let (dx, dy) = heading_vector(state.heading);
            let (nx, ny) = (state.x + dx, state.y + dy);
            match cell_at(nx, ny) {
                Cell::Empty | Cell::Goal => {
                    next.x = nx;
                    next.y = ny;
                }
                Cell::Wall | Cell::OutOfBounds => {}
            }
        }
        _ => {}
    }
    let reached = cell_at(next.x, next.y) == Cell::Goal;
    Ok((next, reached))
}

pub fn grid_observation(state: &GridState) -> Observation {
    let mut obs = vec![0.0; GRID_OBS_DIM];
    let (fx, fy) = heading_vector(state.heading);
    let (rx, ry) = heading_vector(state.heading + 1);
    for row in 0..GRID_VIEW {
        let ahead = GRID_VIEW - 1 - row;
        for col in 0..GRID_VIEW {
            let lateral = col - GRID_VIEW / 2;
            let x = state.x + ahead * fx + lateral * rx;
            let y = state.y + ahead * fy + lateral * ry;
            let cell = (row * GRID_VIEW + col) as usize;
            obs[cell * GRID_CELL_KINDS + cell_at(x, y) as usize] = 1.0;
        }
    }
    obs[GRID_OBS_DIM - 4 + state.heading as usize] = 1.0;
    obs
}

pub fn gridroom_reset(seed: u64) -> Observation {
    GridRoom::new(seed).reset()
}

// ---------------------------------------------------------------- probe batch

const PROBE_MAGIC: &[u8; 4] = b"OUIP";
const PROBE_VERSION: u32 = 1;
const PROBE_HEADER_LEN: usize = 16;

/// Fixed observation set on which activation masks are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBatch {
    observations: Array2<f64>,
    source_env: EnvId,
    /// Generation seed; unknown for batches read back from disk.
    seed: Option<u64>,
}

impl ProbeBatch {
    pub fn new(observations: Array2<f64>, source_env: EnvId, seed: Option<u64>) -> Result<Self> {
        contract!(observations.nrows() > 0, "probe batch is empty");
        contract!(
            observations.iter().all(|v| v.is_finite()),
            "probe batch contains non-finite values"
        );
        Ok(Self {
            observations,
            source_env,
            seed,
        })
    }

    pub fn observations(&self) -> &Array2<f64> {
        &self.observations
    }

    pub fn source_env(&self) -> EnvId {
        self.source_env
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.nrows() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.ncols()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PROBE_HEADER_LEN + self.observations.len() * 8);
        out.extend_from_slice(PROBE_MAGIC);
        out.extend_from_slice(&PROBE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.obs_dim() as u32).to_le_bytes());
        for v in self.observations.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source_env: EnvId) -> Result<Self> {
        if bytes.len() < PROBE_HEADER_LEN || &bytes[..4] != PROBE_MAGIC {
            return Err(LabError::Data("not a probe batch file (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != PROBE_VERSION {
            return Err(LabError::Data(format!("unsupported probe version {version}")));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        if bytes.len() != PROBE_HEADER_LEN + rows * cols * 8 {
            return Err(LabError::Data(format!(
                "probe payload is {} bytes, header promises {rows}×{cols} values",
                bytes.len() - PROBE_HEADER_LEN
            )));
        }
        if cols != source_env.obs_dim() {
            return Err(LabError::Data(format!(
                "probe width {cols} does not match {source_env} observations ({})",
                source_env.obs_dim()
            )));
        }
        let values = bytes[PROBE_HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let observations = Array2::from_shape_vec((rows, cols), values).map_err(|e| LabError::Data(e.to_string()))?;
        Self::new(observations, source_env, None).map_err(|e| LabError::Data(e.to_string()))
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, source_env: EnvId) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, source_env)
    }
}

/// Rolls a uniform-random policy from `seed` and keeps the observation acted on at each
/// step until `size` rows are collected, resetting whenever an episode ends.
pub fn make_probe_batch(env_id: EnvId, size: usize, seed: u64) -> Result<ProbeBatch> {
    if size == 0 {
        return Err(LabError::Config("probe batch size must be positive".into()));
    }
    let mut env = env_id.make(seed);
    let mut policy_rng = ChaCha8Rng::seed_from_u64(seed);
    policy_rng.set_stream(1);
    let mut rows = Vec::with_capacity(size * env_id.obs_dim());
    let mut obs = env.reset();
    for _ in 0..size {
        rows.extend_from_slice(&obs);
        let action = policy_rng.gen_range(0..env_id.num_actions());
        let step = env.step(action)?;
        obs = if step.done() { env.reset() } else { step.observation };
    }
    let observations =
        Array2::from_shape_vec((size, env_id.obs_dim()), rows).map_err(|e| LabError::Contract(e.to_string()))?;
    ProbeBatch::new(observations, env_id, Some(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashSet, VecDeque};

    #[test]
    fn cartpole_reset_is_seeded_and_bounded() {
        assert_eq!(cartpole_reset(3), cartpole_reset(3));
        let mut seen = HashSet::new();
        for seed in 0..100 {
            let obs = cartpole_reset(seed);
            assert!(obs.iter().all(|v| v.abs() <= 0.05));
            seen.insert(obs.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn cartpole_push_from_rest() {
        let next = cartpole_dynamics([0.0; 4], 1).unwrap();
        // force 10 on a 1.1 kg system: ẍ = 9.7561, θ̈ = −14.634, one step of τ = 0.02
        assert_eq!(next[0], 0.0);
        assert!((next[1] - 0.195122).abs() < 1e-5);
        assert_eq!(next[2], 0.0);
        assert!((next[3] + 0.292683).abs() < 1e-5);
    }

    #[test]
    fn cartpole_mirror_symmetry() {
        let s = [0.3, -0.2, 0.05, 0.4];
        let m = s.map(|v| -v);
        for a in 0..2 {
            let fwd = cartpole_dynamics(s, a).unwrap();
            let mir = cartpole_dynamics(m, 1 - a).unwrap();
            for i in 0..4 {
                assert_eq!(fwd[i], -mir[i]);
            }
        }
    }

    #[test]
    fn cartpole_termination_and_truncation() {
        let mut env = CartPole::new(0);
        env.reset();
        env.set_state([2.4, 0.5, 0.0, 0.0]);
        let step = env.step(1).unwrap();
        assert!(step.observation[0] > 2.4);
        assert!(step.terminated && !step.truncated);
        assert!(env.step(2).is_err());

        // hold the pole up with a bang-bang controller until the time limit
        let mut env = CartPole::new(1);
        let mut obs = env.reset();
        let mut total = 0.0;
        loop {
            let action = usize::from(obs[2] + 0.5 * obs[3] > 0.0);
            let step = env.step(action).unwrap();
            total += step.reward;
            if step.done() {
                assert!(step.truncated, "controller should survive to the limit");
                break;
            }
            obs = step.observation;
        }
        assert_eq!(total, CARTPOLE_MAX_STEPS as f64);
    }

    #[test]
    fn grid_blocked_move_and_turns() {
        let wall_facing = GridState { x: 1, y: 1, heading: 3 };
        let (next, reached) = grid_transition(wall_facing, GRID_FORWARD).unwrap();
        assert_eq!(next, wall_facing);
        assert!(!reached);

        let mut s = GridRoom::start();
        for _ in 0..4 {
            s = grid_transition(s, GRID_TURN_LEFT).unwrap().0;
        }
        assert_eq!(s, GridRoom::start());
        for a in 3..7 {
            assert_eq!(grid_transition(s, a).unwrap().0, s);
        }
        assert!(grid_transition(s, 7).is_err());
    }

    #[test]
    fn grid_wall_bump_gives_no_reward() {
        let mut env = GridRoom::new(0);
        env.reset();
        env.step(GRID_TURN_LEFT).unwrap();
        let step = env.step(GRID_FORWARD).unwrap();
        assert_eq!(env.state(), GridState { x: 1, y: 1, heading: 3 });
        assert_eq!(step.reward, 0.0);
        assert!(!step.done());
    }

    /// Breadth-first search over (x, y, heading) returning the shortest action sequence.
    fn bfs_plan() -> Vec<usize> {
        let start = GridRoom::start();
        let mut prev = std::collections::HashMap::new();
        let mut queue = VecDeque::from([start]);
        prev.insert(start, None);
        while let Some(s) = queue.pop_front() {
            for a in 0..3 {
                let (n, reached) = grid_transition(s, a).unwrap();
                if prev.contains_key(&n) {
                    continue;
                }
                prev.insert(n, Some((s, a)));
                if reached {
                    let mut plan = vec![];
                    let mut cur = n;
                    while let Some(Some((p, a))) = prev.get(&cur) {
                        plan.push(*a);
                        cur = *p;
                    }
                    plan.reverse();
                    return plan;
                }
                queue.push_back(n);
            }
        }
        panic!("goal unreachable")
    }

    #[test]
    fn grid_shortest_path_reaches_goal() {
        let plan = bfs_plan();
        assert_eq!(plan.len(), 11);
        let mut env = GridRoom::new(0);
        env.reset();
        let mut last = None;
        for &a in &plan {
            last = Some(env.step(a).unwrap());
        }
        let last = last.unwrap();
        assert!(last.terminated);
        assert!(last.reward > 0.5);
        assert!((last.reward - (1.0 - 0.9 * 11.0 / 256.0)).abs() < 1e-12);
    }

    #[test]
    fn grid_truncates_at_limit() {
        let mut env = GridRoom::new(0);
        env.reset();
        for i in 1..=GRID_MAX_STEPS {
            let step = env.step(3).unwrap();
            assert_eq!(step.truncated, i == GRID_MAX_STEPS);
            assert!(!step.terminated);
        }
    }

    #[test]
    fn grid_observation_is_one_hot() {
        let mut seen = HashSet::new();
        for x in 1..GRID_SIZE - 1 {
            for y in 1..GRID_SIZE - 1 {
                for heading in 0..4 {
                    let obs = grid_observation(&GridState { x, y, heading });
                    assert_eq!(obs.len(), GRID_OBS_DIM);
                    assert!(obs.iter().all(|&v| v == 0.0 || v == 1.0));
                    assert_eq!(obs.iter().sum::<f64>(), 26.0);
                    seen.insert(obs.iter().map(|&v| v as u8).collect::<Vec<_>>());
                }
            }
        }
        assert!(seen.len() > 50);
        // at the start the wall is directly to the left of the agent's cell
        let obs = grid_observation(&GridRoom::start());
        let left_of_agent = (4 * GRID_VIEW + 1) as usize;
        assert_eq!(obs[left_of_agent * GRID_CELL_KINDS + Cell::Wall as usize], 1.0);
    }

    #[test]
    fn probe_batch_shape_and_determinism() {
        let a = make_probe_batch(EnvId::CartPole, 1024, 0).unwrap();
        assert_eq!(a.observations().dim(), (1024, 4));
        let b = make_probe_batch(EnvId::CartPole, 1024, 0).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.content_hash(), b.content_hash());
        let xs = a.observations().column(0);
        assert!(xs.iter().any(|&x| x > 0.0) && xs.iter().any(|&x| x < 0.0));

        let g = make_probe_batch(EnvId::GridRoom, 512, 0).unwrap();
        assert_eq!(g.observations().dim(), (512, GRID_OBS_DIM));
        assert!(make_probe_batch(EnvId::CartPole, 0, 0).is_err());
    }

    #[test]
    fn probe_file_layout() {
        let p = make_probe_batch(EnvId::CartPole, 3, 5).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"OUIP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(bytes.len(), 16 + 3 * 4 * 8);
        let first = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        assert_eq!(first, p.observations()[[0, 0]]);

        let back = ProbeBatch::from_bytes(&bytes, EnvId::CartPole).unwrap();
        assert_eq!(back.observations(), p.observations());
        assert!(ProbeBatch::from_bytes(&bytes, EnvId::GridRoom).is_err());
        assert!(ProbeBatch::from_bytes(&bytes[..40], EnvId::CartPole).is_err());
        assert!(ProbeBatch::from_bytes(b"NOPE", EnvId::CartPole).is_err());
    }
}
