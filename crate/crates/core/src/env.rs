//! Episodic environment around the axis model.
//!
//! The agent sees position, velocity, the five latest deflection samples and
//! the goal position; it commands a velocity. Reward is sparse: `0` while
//! the combined position and vibration error is inside the goal band, `-1`
//! otherwise. Episodes run for a fixed horizon.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, AxisParams, SystemState};
use crate::error::{Error, Result};

/// Deflection samples carried in each observation.
pub const HISTORY_LEN: usize = 5;
/// Length of [`Observation::features`].
pub const OBS_DIM: usize = HISTORY_LEN + 5;
/// Saturation scale of the fine goal-error feature, mm.
pub const FINE_ERROR_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: f64,
    pub v: f64,
    /// Oldest first.
    pub y_hist: [f64; HISTORY_LEN],
    pub x_g: f64,
}

impl Observation {
    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.v.is_finite()
            && self.x_g.is_finite()
            && self.y_hist.iter().all(|y| y.is_finite())
    }

    /// Scaled network input: positions by travel span (centered), velocity by
    /// `v_max`, deflections by `y_ref`, then the goal error at two scales
    /// (travel span, and saturating at a few mm for precise settling).
    pub fn features(&self, params: &AxisParams, y_ref: f64) -> [f64; OBS_DIM] {
        let center = 0.5 * (params.x_min + params.x_max);
        let span = params.travel_span();
        let mut f = [0.0; OBS_DIM];
        f[0] = (self.x - center) / span;
        f[1] = self.v / params.v_max;
        for (dst, y) in f[2..2 + HISTORY_LEN].iter_mut().zip(&self.y_hist) {
            *dst = y / y_ref;
        }
        f[2 + HISTORY_LEN] = (self.x_g - center) / span;
        let err = self.x_g - self.x;
        f[3 + HISTORY_LEN] = err / span;
        f[4 + HISTORY_LEN] = (err / FINE_ERROR_SCALE).tanh();
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    /// Target position (mm).
    pub x_g: f64,
    /// Desired vibration amplitude (mm); 0 for compensation.
    pub y_hat_g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PositionError {
    /// `|x - x_g| / |x_g|`.
    Relative,
    /// `|x - x_g| / scale`.
    Absolute { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub threshold: f64,
    /// Normalization amplitude for the vibration term (mm).
    pub y_ref: f64,
    pub in_band_reward: f64,
    pub out_of_band_reward: f64,
    pub position_error: PositionError,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            threshold: 0.01,
            y_ref: 1.0,
            in_band_reward: 0.0,
            out_of_band_reward: -1.0,
            position_error: PositionError::Relative,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(Error::Config(format!("reward.threshold must be > 0, got {}", self.threshold)));
        }
        if !(self.y_ref.is_finite() && self.y_ref > 0.0) {
            return Err(Error::Config(format!("reward.y_ref must be > 0, got {}", self.y_ref)));
        }
        if let PositionError::Absolute { scale } = self.position_error {
            if !(scale.is_finite() && scale > 0.0) {
                return Err(Error::Config(format!("absolute error scale must be > 0, got {scale}")));
            }
        }
        Ok(())
    }

    /// Combined normalized error compared against `threshold`.
    pub fn band_error(&self, x: f64, y_hat: f64, goal: &GoalSpec) -> f64 {
        let pos = match self.position_error {
            PositionError::Relative => (x - goal.x_g).abs() / goal.x_g.abs(),
            PositionError::Absolute { scale } => (x - goal.x_g).abs() / scale,
        };
        pos + (y_hat - goal.y_hat_g).abs() / self.y_ref
    }
}

/// Sparse goal-band reward.
pub fn reward(state: &SystemState, y_hat: f64, goal: &GoalSpec, cfg: &RewardConfig) -> Result<f64> {
    if !state.is_finite() || !y_hat.is_finite() || !goal.x_g.is_finite() || !goal.y_hat_g.is_finite() {
        return Err(Error::Model("non-finite reward input".into()));
    }
    if cfg.position_error == PositionError::Relative && goal.x_g == 0.0 {
        return Err(Error::Config(
            "relative position error is undefined for x_g = 0; use the absolute mode".into(),
        ));
    }
    Ok(if cfg.band_error(state.x, y_hat, goal) < cfg.threshold {
        cfg.in_band_reward
    } else {
        cfg.out_of_band_reward
    })
}

/// Summed squared distance of the states to the goal, `(x - x_g)^2 + (y - y_g)^2`.
pub fn trajectory_loss(states: &[SystemState], goal: &GoalSpec) -> f64 {
    states
        .iter()
        .map(|s| {
            let dx = s.x - goal.x_g;
            let dy = s.y - goal.y_hat_g;
            dx * dx + dy * dy
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Steps per episode.
    pub horizon: usize,
    /// Start position is drawn uniformly from this range, at rest. Spanning
    /// the travel keeps early exploration from sitting against an end stop.
    pub start_range: [f64; 2],
    /// Goal position is drawn uniformly from this range.
    pub goal_range: [f64; 2],
    /// Desired vibration amplitude (mm).
    pub y_hat_g: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            horizon: 500,
            start_range: [0.0, 500.0],
            goal_range: [100.0, 400.0],
            y_hat_g: 0.0,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self, params: &AxisParams) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("episode.horizon must be >= 1".into()));
        }
        for (name, [lo, hi]) in [("goal_range", self.goal_range), ("start_range", self.start_range)] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::Config(format!("episode.{name} [{lo}, {hi}] is not a valid range")));
            }
            if lo < params.x_min || hi > params.x_max {
                return Err(Error::Config(format!(
                    "episode.{name} [{lo}, {hi}] leaves travel [{}, {}]",
                    params.x_min, params.x_max
                )));
            }
        }
        if !(self.y_hat_g.is_finite() && self.y_hat_g >= 0.0) {
            return Err(Error::Config("episode.y_hat_g must be >= 0".into()));
        }
        Ok(())
    }
}

/// Deterministic random stream for one episode of one environment instance.
pub fn episode_rng(seed: u64, episode_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode_index);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draw the goal of an episode. Zero goals are redrawn when the reward uses
/// relative position error.
pub fn sample_goal(cfg: &EpisodeConfig, reward: &RewardConfig, episode_index: u64) -> Result<GoalSpec> {
    draw_goal(&mut episode_rng(cfg.seed, episode_index), cfg, reward)
}

fn draw_goal(rng: &mut ChaCha8Rng, cfg: &EpisodeConfig, reward: &RewardConfig) -> Result<GoalSpec> {
    let relative = reward.position_error == PositionError::Relative;
    if relative && cfg.goal_range == [0.0, 0.0] {
        return Err(Error::Config(
            "goal range [0, 0] with relative position error has no valid goal".into(),
        ));
    }
    let mut x_g = uniform(rng, cfg.goal_range);
    while relative && x_g == 0.0 {
        x_g = uniform(rng, cfg.goal_range);
    }
    Ok(GoalSpec {
        x_g,
        y_hat_g: cfg.y_hat_g,
    })
}

/// Result of one environment step.
#[derive(Debug, Clone, Copy)]
pub struct Transition {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub state: SystemState,
    /// Vibration amplitude estimate used by the reward.
    pub y_hat: f64,
    /// Command after clamping to the velocity limit.
    pub action: f64,
}

#[derive(Debug, Clone)]
pub struct VibrationEnv {
    params: AxisParams,
    episode: EpisodeConfig,
    reward_cfg: RewardConfig,
    state: SystemState,
    goal: GoalSpec,
    y_hist: [f64; HISTORY_LEN],
    envelope_window: VecDeque<f64>,
    window_len: usize,
    t: usize,
    active: bool,
    next_episode: u64,
}

impl VibrationEnv {
    pub fn new(params: AxisParams, episode: EpisodeConfig, reward_cfg: RewardConfig) -> Result<Self> {
        params.validate()?;
        episode.validate(&params)?;
        reward_cfg.validate()?;
        let window_len = dynamics::window_len(&params, params.dt_control);
        Ok(Self {
            params,
            episode,
            reward_cfg,
            state: SystemState::default(),
            goal: GoalSpec { x_g: 0.0, y_hat_g: 0.0 },
            y_hist: [0.0; HISTORY_LEN],
            envelope_window: VecDeque::with_capacity(window_len),
            window_len,
            t: 0,
            active: false,
            next_episode: 0,
        })
    }

    pub fn params(&self) -> &AxisParams {
        &self.params
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward_cfg
    }

    pub fn episode_config(&self) -> &EpisodeConfig {
        &self.episode
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn goal(&self) -> &GoalSpec {
        &self.goal
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Index the next call to [`reset`](Self::reset) will use.
    pub fn next_episode_index(&self) -> u64 {
        self.next_episode
    }

    /// Start the next episode from the environment's own episode counter.
    pub fn reset(&mut self) -> Result<(Observation, GoalSpec)> {
        let index = self.next_episode;
        self.reset_episode(index)
    }

    /// Start episode `index` of this environment's seeded stream.
    pub fn reset_episode(&mut self, index: u64) -> Result<(Observation, GoalSpec)> {
        let mut rng = episode_rng(self.episode.seed, index);
        let goal = draw_goal(&mut rng, &self.episode, &self.reward_cfg)?;
        let x0 = uniform(&mut rng, self.episode.start_range);
        self.reset_with(goal, SystemState::at_rest(x0))?;
        self.next_episode = index + 1;
        Ok((self.observation(), goal))
    }

    /// Start an episode from an explicit goal and initial state.
    pub fn reset_with(&mut self, goal: GoalSpec, state: SystemState) -> Result<Observation> {
        if !state.is_finite() {
            return Err(Error::Model(format!("non-finite initial state {state:?}")));
        }
        if self.reward_cfg.position_error == PositionError::Relative && goal.x_g == 0.0 {
            return Err(Error::Config("x_g = 0 requires the absolute position-error mode".into()));
        }
        self.goal = goal;
        self.state = state;
        self.y_hist = [state.y; HISTORY_LEN];
        self.envelope_window.clear();
        self.envelope_window.extend(std::iter::repeat_n(state.y, self.window_len));
        self.t = 0;
        self.active = true;
        Ok(self.observation())
    }

    pub fn observation(&self) -> Observation {
        Observation {
            x: self.state.x,
            v: self.state.v,
            y_hist: self.y_hist,
            x_g: self.goal.x_g,
        }
    }

    pub fn features(&self, obs: &Observation) -> [f64; OBS_DIM] {
        obs.features(&self.params, self.reward_cfg.y_ref)
    }

    /// Current vibration amplitude estimate.
    pub fn envelope(&self) -> f64 {
        self.envelope_window.iter().fold(0.0_f64, |m, y| m.max(y.abs()))
    }

    pub fn step(&mut self, action: f64) -> Result<Transition> {
        if !self.active {
            return Err(Error::Protocol("step called on a finished or unstarted episode; call reset".into()));
        }
        let action = action.clamp(-self.params.v_max, self.params.v_max);
        self.state = dynamics::step(&self.state, action, &self.params)?;

        self.y_hist.rotate_left(1);
        self.y_hist[HISTORY_LEN - 1] = self.state.y;
        if self.envelope_window.len() == self.window_len {
            self.envelope_window.pop_front();
        }
        self.envelope_window.push_back(self.state.y);
        let y_hat = self.envelope();

        let reward = reward(&self.state, y_hat, &self.goal, &self.reward_cfg)?;
        self.t += 1;
        let done = self.t >= self.episode.horizon;
        if done {
            self.active = false;
        }
        Ok(Transition {
            obs: self.observation(),
            reward,
            done,
            state: self.state,
            y_hat,
            action,
        })
    }
}

/// One row of an exported episode trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub v: f64,
    pub y: f64,
    pub y_hat: f64,
    pub action: f64,
    pub reward: f64,
}

impl From<&Transition> for TraceRow {
    fn from(tr: &Transition) -> Self {
        Self {
            t: tr.state.t,
            x: tr.state.x,
            v: tr.state.v,
            y: tr.state.y,
            y_hat: tr.y_hat,
            action: tr.action,
            reward: tr.reward,
        }
    }
}

pub fn write_trace_csv<W: std::io::Write>(mut w: W, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "t,x,v,y,y_hat,action,reward")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{},{}", r.t, r.x, r.v, r.y, r.y_hat, r.action, r.reward)?;
    }
    Ok(())
}
