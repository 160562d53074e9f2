//! Discretized Numpad: an n×n pad grid hides a self-avoiding, Moore-adjacent
//! pad sequence. Pressing the next pad in the sequence pays +1 (once per pad
//! per pass); pressing a wrong pad clears all activated pads and the agent
//! must rebuild the prefix; completing the sequence resets the board so the
//! whole sequence can be repeated for more reward. Episodes run a fixed
//! number of steps.
//!
//! Actions are cardinal moves (1 cell, pressing the landing pad) and jumps
//! (2 cells, pressing only the landing pad). Off-grid attempts are no-ops.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUMPAD_ACTIONS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumpadAction {
    MoveNorth,
    MoveSouth,
    MoveEast,
    MoveWest,
    JumpNorth,
    JumpSouth,
    JumpEast,
    JumpWest,
}

impl NumpadAction {
    pub const ALL: [NumpadAction; NUMPAD_ACTIONS] = [
        NumpadAction::MoveNorth,
        NumpadAction::MoveSouth,
        NumpadAction::MoveEast,
        NumpadAction::MoveWest,
        NumpadAction::JumpNorth,
        NumpadAction::JumpSouth,
        NumpadAction::JumpEast,
        NumpadAction::JumpWest,
    ];

    pub fn from_index(i: usize) -> Option<NumpadAction> {
        Self::ALL.get(i).copied()
    }

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|a| a == self).expect("listed")
    }

    /// (row delta, col delta) per unit of distance.
    fn direction(&self) -> (isize, isize) {
        match self {
            NumpadAction::MoveNorth | NumpadAction::JumpNorth => (-1, 0),
            NumpadAction::MoveSouth | NumpadAction::JumpSouth => (1, 0),
            NumpadAction::MoveEast | NumpadAction::JumpEast => (0, 1),
            NumpadAction::MoveWest | NumpadAction::JumpWest => (0, -1),
        }
    }

    fn distance(&self) -> isize {
        match self {
            NumpadAction::JumpNorth
            | NumpadAction::JumpSouth
            | NumpadAction::JumpEast
            | NumpadAction::JumpWest => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NumpadConfig {
    /// Pad grid side length.
    pub n: usize,
    /// Hidden sequence length; 0 means the full n² maximum.
    #[serde(default)]
    pub k: usize,
    /// Fixed episode length.
    #[serde(default = "default_episode_limit")]
    pub episode_limit: usize,
    /// When true, pressing an already-activated pad counts as a wrong press
    /// instead of a no-op.
    #[serde(default)]
    pub clear_on_reactivation: bool,
}

fn default_episode_limit() -> usize {
    500
}

impl NumpadConfig {
    pub fn new(n: usize) -> Self {
        NumpadConfig { n, k: 0, episode_limit: 500, clear_on_reactivation: false }
    }

    pub fn seq_len(&self) -> usize {
        if self.k == 0 {
            self.n * self.n
        } else {
            self.k
        }
    }

    pub fn observation_len(&self) -> usize {
        2 * self.n * self.n + NUMPAD_ACTIONS + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("numpad: grid side must be positive"));
        }
        let k = self.seq_len();
        if k < 1 || k > self.n * self.n {
            return Err(Error::config(format!(
                "numpad: sequence length {} outside 1..={}",
                k,
                self.n * self.n
            )));
        }
        if self.episode_limit == 0 {
            return Err(Error::config("numpad: episode limit must be positive"));
        }
        Ok(())
    }
}

/// Flat observation: one-hot agent position ++ activated bitmask ++
/// previous-action one-hot ++ previous reward.
pub type Observation = Vec<f64>;

fn moore_neighbors(n: usize, cell: usize) -> Vec<usize> {
    let (r, c) = (cell / n, cell % n);
    let mut out = Vec::with_capacity(8);
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let nr = r as isize + dr;
            let nc = c as isize + dc;
            if nr >= 0 && nr < n as isize && nc >= 0 && nc < n as isize {
                out.push(nr as usize * n + nc as usize);
            }
        }
    }
    out
}

fn dfs_path(
    n: usize,
    k: usize,
    path: &mut Vec<usize>,
    visited: &mut Vec<bool>,
    rng: &mut ChaCha8Rng,
) -> bool {
    if path.len() == k {
        return true;
    }
    let mut next = moore_neighbors(n, *path.last().expect("non-empty"));
    next.shuffle(rng);
    for cell in next {
        if visited[cell] {
            continue;
        }
        visited[cell] = true;
        path.push(cell);
        if dfs_path(n, k, path, visited, rng) {
            return true;
        }
        path.pop();
        visited[cell] = false;
    }
    false
}

/// Sample a self-avoiding king-move path of length `k` on the n×n grid via
/// backtracking DFS with shuffled start cell and neighbor order. A path
/// exists for every k ≤ n² (boustrophedon order), so this always succeeds.
pub fn generate_sequence(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(k >= 1 && k <= n * n, "sequence length out of range");
    let mut starts: Vec<usize> = (0..n * n).collect();
    starts.shuffle(rng);
    for start in starts {
        let mut visited = vec![false; n * n];
        visited[start] = true;
        let mut path = vec![start];
        if dfs_path(n, k, &mut path, &mut visited, rng) {
            return path;
        }
    }
    unreachable!("a path of length k ≤ n² always exists");
}

/// Validity check used by tests and the generator contract: self-avoiding
/// and king-move adjacent.
pub fn sequence_is_valid(n: usize, seq: &[usize]) -> bool {
    if seq.is_empty() || seq.iter().any(|&p| p >= n * n) {
        return false;
    }
    let mut seen = vec![false; n * n];
    for &p in seq {
        if seen[p] {
            return false;
        }
        seen[p] = true;
    }
    seq.windows(2).all(|w| moore_neighbors(n, w[0]).contains(&w[1]))
}

/// Full mutable episode state.
#[derive(Debug, Clone)]
pub struct NumpadState {
    pub sequence: Vec<usize>,
    pub progress: usize,
    pub activated: Vec<bool>,
    /// Pads already credited in the current pass cycle; a pad pays out once
    /// per cycle even if the prefix is rebuilt after a clearing press.
    pub rewarded: Vec<bool>,
    pub agent: usize,
    pub step: usize,
    pub done: bool,
    pub completed_passes: usize,
    prev_action: Option<usize>,
    prev_reward: f64,
}

impl NumpadState {
    pub fn rewarded_count(&self) -> usize {
        self.rewarded.iter().filter(|&&b| b).count()
    }
}

pub struct NumpadEnv {
    config: NumpadConfig,
    rng: ChaCha8Rng,
    state: NumpadState,
    total_reward: f64,
}

impl NumpadEnv {
    pub fn new(config: NumpadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut env = NumpadEnv {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: NumpadState {
                sequence: vec![],
                progress: 0,
                activated: vec![],
                rewarded: vec![],
                agent: 0,
                step: 0,
                done: false,
                completed_passes: 0,
                prev_action: None,
                prev_reward: 0.0,
            },
            total_reward: 0.0,
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &NumpadConfig {
        &self.config
    }

    pub fn state(&self) -> &NumpadState {
        &self.state
    }

    pub fn episode_reward(&self) -> f64 {
        self.total_reward
    }

    pub fn reset(&mut self) -> Observation {
        let n = self.config.n;
        let k = self.config.seq_len();
        self.state = NumpadState {
            sequence: generate_sequence(n, k, &mut self.rng),
            progress: 0,
            activated: vec![false; n * n],
            rewarded: vec![false; n * n],
            agent: self.rng.gen_range(0..n * n),
            step: 0,
            done: false,
            completed_passes: 0,
            prev_action: None,
            prev_reward: 0.0,
        };
        self.total_reward = 0.0;
        self.observation()
    }

    pub fn observation(&self) -> Observation {
        let n2 = self.config.n * self.config.n;
        let mut obs = vec![0.0; self.config.observation_len()];
        obs[self.state.agent] = 1.0;
        for (i, &a) in self.state.activated.iter().enumerate() {
            if a {
                obs[n2 + i] = 1.0;
            }
        }
        if let Some(a) = self.state.prev_action {
            obs[2 * n2 + a] = 1.0;
        }
        obs[2 * n2 + NUMPAD_ACTIONS] = self.state.prev_reward;
        obs
    }

    /// Advance one step. Errors if the episode is already done.
    pub fn step(&mut self, action: NumpadAction) -> Result<(Observation, f64, bool)> {
        if self.state.done {
            return Err(Error::contract("numpad: step called on a finished episode"));
        }
        let n = self.config.n as isize;
        let (r, c) = (self.state.agent as isize / n, self.state.agent as isize % n);
        let (dr, dc) = action.direction();
        let dist = action.distance();
        let (nr, nc) = (r + dr * dist, c + dc * dist);

        let mut reward = 0.0;
        if nr >= 0 && nr < n && nc >= 0 && nc < n {
            self.state.agent = (nr * n + nc) as usize;
            reward = self.press(self.state.agent);
        }
        self.state.step += 1;
        self.state.done = self.state.step >= self.config.episode_limit;
        self.state.prev_action = Some(action.index());
        self.state.prev_reward = reward;
        self.total_reward += reward;
        Ok((self.observation(), reward, self.state.done))
    }

    fn press(&mut self, pad: usize) -> f64 {
        let st = &mut self.state;
        if st.activated[pad] {
            if self.config.clear_on_reactivation {
                st.activated.iter_mut().for_each(|a| *a = false);
                st.progress = 0;
            }
            return 0.0;
        }
        if pad == st.sequence[st.progress] {
            st.progress += 1;
            st.activated[pad] = true;
            let reward = if st.rewarded[pad] {
                0.0
            } else {
                st.rewarded[pad] = true;
                1.0
            };
            if st.progress == st.sequence.len() {
                // full pass: board resets and every pad can pay out again
                st.completed_passes += 1;
                st.progress = 0;
                st.activated.iter_mut().for_each(|a| *a = false);
                st.rewarded.iter_mut().for_each(|r| *r = false);
            }
            reward
        } else {
            st.activated.iter_mut().for_each(|a| *a = false);
            st.progress = 0;
            0.0
        }
    }

    /// One action of a sequence-aware reference policy: walk toward the next
    /// target pad, preferring safe landings (the target itself or an
    /// already-activated pad). Used as a baseline and by tests.
    pub fn scripted_action(&self) -> NumpadAction {
        let n = self.config.n as isize;
        let st = &self.state;
        let target = st.sequence[st.progress] as isize;
        let (tr, tc) = (target / n, target % n);
        let (ar, ac) = (st.agent as isize / n, st.agent as isize % n);

        let mut best: Option<(i32, isize)> = None; // (priority, chebyshev)
        let mut best_action = NumpadAction::MoveNorth;
        for action in NumpadAction::ALL {
            let (dr, dc) = action.direction();
            let dist = action.distance();
            let (nr, nc) = (ar + dr * dist, ac + dc * dist);
            if nr < 0 || nr >= n || nc < 0 || nc >= n {
                continue;
            }
            let pad = (nr * n + nc) as usize;
            let cheb = (nr - tr).abs().max((nc - tc).abs());
            let priority = if pad as isize == target {
                3
            } else if st.activated[pad] {
                2
            } else if st.agent as isize == target {
                // standing on the unpressed target: step anywhere and return
                1
            } else {
                0
            };
            let better = match best {
                None => true,
                Some((bp, bd)) => priority > bp || (priority == bp && cheb < bd),
            };
            if better {
                best = Some((priority, cheb));
                best_action = action;
            }
        }
        best_action
    }
}

#[cfg(test)]
#[path = "numpad_tests.rs"]
mod tests;
