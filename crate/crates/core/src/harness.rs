//! Run orchestration: configuration, training runs, deterministic evaluation,
//! input-shaping baselines and open-loop simulation. Every command writes
//! plain CSV/JSON artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, AxisParams, SystemState};
use crate::env::{self, EpisodeConfig, GoalSpec, RewardConfig, TraceRow, VibrationEnv, OBS_DIM};
use crate::error::{Error, Result};
use crate::neural::checkpoint::{self, Checkpoint};
use crate::neural::{Network, NetworkSpec, ParamSet, StepCache};
use crate::ppo::{self, PpoConfig, Trainer};
use crate::shapers::{self, ShaperKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Seeds network init, goal sampling, action sampling and minibatch order.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Save a checkpoint every this many updates; 0 keeps only the initial and final ones.
    pub checkpoint_every: u64,
    /// Episodes of the final deterministic evaluation written by `train`.
    pub eval_episodes: usize,
    /// Goal of the probe episode as a fraction of the travel span.
    pub probe_goal_fraction: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 25,
            eval_episodes: 50,
            probe_goal_fraction: 0.6,
        }
    }
}

/// Point-to-point move used by the baseline comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub shapers: Vec<ShaperKind>,
    pub start_x: f64,
    /// Signed move length (mm).
    pub distance: f64,
    /// Cruise velocity (mm/s).
    pub v_peak: f64,
    /// Acceleration of the trapezoid ramps (mm/s^2).
    pub accel: f64,
    /// Shapers are designed for `omega_n * design_omega_scale` to probe modeling error.
    pub design_omega_scale: f64,
    /// Zero-command time simulated after the shaped command ends (s).
    pub settle_time: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            shapers: vec![ShaperKind::None, ShaperKind::Zv, ShaperKind::Zvd],
            start_x: 50.0,
            distance: 200.0,
            v_peak: 400.0,
            accel: 20_000.0,
            design_omega_scale: 1.0,
            settle_time: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub axis: AxisParams,
    pub episode: EpisodeConfig,
    pub reward: RewardConfig,
    pub network: NetworkSpec,
    pub ppo: PpoConfig,
    pub baseline: BaselineConfig,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form section.key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

impl RunConfig {
    /// Defaults, then the optional TOML file, then `section.key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, file);
        }
        for o in overrides {
            let (path, value) = parse_override(o)?;
            let mut node = &mut table;
            for seg in &path[..path.len() - 1] {
                node = match node
                    .entry(seg.clone())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                {
                    toml::Value::Table(t) => t,
                    _ => return Err(Error::Config(format!("override '{o}': '{seg}' is not a section"))),
                };
            }
            node.insert(path[path.len() - 1].clone(), value);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        cfg.resolved()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.resolved()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// Propagate shared values (seed, action bound, observation width) and validate.
    pub fn resolved(mut self) -> Result<Self> {
        self.episode.seed = self.run.seed;
        self.ppo.seed = self.run.seed;
        self.network.action_scale = self.axis.v_max;
        self.network.obs_dim = OBS_DIM;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.axis.validate().map_err(|e| Error::Config(format!("axis: {e}")))?;
        self.episode.validate(&self.axis)?;
        self.reward.validate()?;
        self.network.validate()?;
        self.ppo.validate()?;
        if !(0.0..=1.0).contains(&self.run.probe_goal_fraction) {
            return Err(Error::Config("run.probe_goal_fraction must be in [0, 1]".into()));
        }
        let b = &self.baseline;
        if !(b.design_omega_scale > 0.0 && b.settle_time >= 0.0) {
            return Err(Error::Config("baseline.design_omega_scale must be > 0, settle_time >= 0".into()));
        }
        if b.shapers.is_empty() {
            return Err(Error::Config("baseline.shapers is empty".into()));
        }
        Ok(())
    }

    pub fn network(&self) -> Result<Network> {
        Network::new(self.network.clone())
    }

    pub fn probe_goal(&self) -> GoalSpec {
        GoalSpec {
            x_g: self.axis.x_min + self.run.probe_goal_fraction * self.axis.travel_span(),
            y_hat_g: self.episode.y_hat_g,
        }
    }

    /// Episode settings for evaluation: same distribution, separate goal stream.
    pub fn eval_episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            seed: ppo::env_seed(self.run.seed, 1 << 20),
            ..self.episode.clone()
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub const METRICS_HEADER: &str = "step,mean_episode_reward,episodes,entropy,clip_fraction,approx_kl,loss,policy_loss,value_loss,learning_rate,entropy_coef,grad_norm,minibatches,stopped_early";

pub fn metrics_row(m: &ppo::IterationMetrics) -> String {
    let u = &m.update;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        m.step,
        opt(m.mean_episode_reward),
        m.episodes,
        u.entropy,
        u.clip_fraction,
        u.approx_kl,
        u.loss,
        u.policy_loss,
        u.value_loss,
        u.learning_rate,
        u.entropy_coef,
        u.grad_norm,
        u.minibatches_run,
        u.stopped_early as u8
    )
}

/// Run the policy mean (no sampling) through one episode.
pub fn run_deterministic_episode(
    net: &Network,
    params: &ParamSet,
    env: &mut VibrationEnv,
) -> Result<(Vec<env::Transition>, Vec<SystemState>)> {
    let mut obs = env.observation();
    let mut state = net.zero_state();
    let mut cache = StepCache::default();
    let mut transitions = Vec::with_capacity(env.episode_config().horizon);
    let mut states = Vec::with_capacity(env.episode_config().horizon);
    loop {
        let features = env.features(&obs);
        net.step(params, &features, &mut state, &mut cache);
        if cache.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite {
                node: "policy mean during evaluation".into(),
            });
        }
        let tr = env.step(cache.mean[0])?;
        obs = tr.obs;
        states.push(tr.state);
        let done = tr.done;
        transitions.push(tr);
        if done {
            return Ok((transitions, states));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub episode: usize,
    pub goal: f64,
    pub final_position_error: f64,
    pub residual_envelope: f64,
    /// First step after which the reward stays 0 until the end.
    pub settling_step: Option<usize>,
    pub episode_return: f64,
    pub trajectory_loss: f64,
    /// Fraction of the last (up to) 100 steps in the goal band.
    pub in_band_fraction_tail: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_final_position_error: f64,
    pub mean_residual_envelope: f64,
    pub mean_in_band_fraction_tail: f64,
    /// Fraction of episodes with at least 60% of the tail in band.
    pub fraction_episodes_tail_in_band: f64,
    pub fraction_settled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeEval>,
    pub summary: EvalSummary,
}

pub const TAIL_STEPS: usize = 100;
pub const TAIL_IN_BAND_REQUIRED: f64 = 0.6;

pub fn settling_step(rewards: &[f64], in_band_reward: f64) -> Option<usize> {
    let last_bad = rewards.iter().rposition(|&r| r != in_band_reward);
    match last_bad {
        None if rewards.is_empty() => None,
        None => Some(0),
        Some(i) if i + 1 < rewards.len() => Some(i + 1),
        Some(_) => None,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Deterministic evaluation over `n_episodes` goals drawn from the eval stream.
pub fn evaluate(cfg: &RunConfig, net: &Network, params: &ParamSet, n_episodes: usize) -> Result<EvalReport> {
    let mut env = VibrationEnv::new(cfg.axis, cfg.eval_episode_config(), cfg.reward)?;
    let in_band = cfg.reward.in_band_reward;
    let mut episodes = Vec::with_capacity(n_episodes);
    for k in 0..n_episodes {
        let (_, goal) = env.reset_episode(k as u64)?;
        let (trs, states) = run_deterministic_episode(net, params, &mut env)?;
        let rewards: Vec<f64> = trs.iter().map(|t| t.reward).collect();
        let tail = &rewards[rewards.len().saturating_sub(TAIL_STEPS)..];
        let last = trs.last().expect("horizon >= 1");
        episodes.push(EpisodeEval {
            episode: k,
            goal: goal.x_g,
            final_position_error: (last.state.x - goal.x_g).abs(),
            residual_envelope: last.y_hat,
            settling_step: settling_step(&rewards, in_band),
            episode_return: rewards.iter().sum(),
            trajectory_loss: env::trajectory_loss(&states, &goal),
            in_band_fraction_tail: tail.iter().filter(|&&r| r == in_band).count() as f64 / tail.len() as f64,
        });
    }
    let summary = EvalSummary {
        episodes: episodes.len(),
        mean_return: mean(episodes.iter().map(|e| e.episode_return)),
        mean_final_position_error: mean(episodes.iter().map(|e| e.final_position_error)),
        mean_residual_envelope: mean(episodes.iter().map(|e| e.residual_envelope)),
        mean_in_band_fraction_tail: mean(episodes.iter().map(|e| e.in_band_fraction_tail)),
        fraction_episodes_tail_in_band: mean(
            episodes
                .iter()
                .map(|e| (e.in_band_fraction_tail >= TAIL_IN_BAND_REQUIRED) as u8 as f64),
        ),
        fraction_settled: mean(episodes.iter().map(|e| e.settling_step.is_some() as u8 as f64)),
    };
    Ok(EvalReport { episodes, summary })
}

pub fn write_eval(dir: &Path, report: &EvalReport) -> Result<()> {
    let mut csv = String::from(
        "episode,goal,final_position_error,residual_envelope,settling_step,episode_return,trajectory_loss,in_band_fraction_tail\n",
    );
    for e in &report.episodes {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            e.episode,
            e.goal,
            e.final_position_error,
            e.residual_envelope,
            e.settling_step.map_or_else(String::new, |s| s.to_string()),
            e.episode_return,
            e.trajectory_loss,
            e.in_band_fraction_tail
        );
    }
    write_file(&dir.join("eval.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&report.summary)
        .map_err(|e| Error::Config(format!("serializing summary: {e}")))?;
    write_file(&dir.join("summary.json"), &(json + "\n"))
}

/// Probe episode at the fixed probe goal, deterministic policy.
pub fn probe_trace(cfg: &RunConfig, net: &Network, params: &ParamSet) -> Result<Vec<TraceRow>> {
    let mut env = VibrationEnv::new(cfg.axis, cfg.episode.clone(), cfg.reward)?;
    env.reset_with(cfg.probe_goal(), SystemState::at_rest(cfg.episode.start_range[0]))?;
    let (trs, _) = run_deterministic_episode(net, params, &mut env)?;
    Ok(trs.iter().map(TraceRow::from).collect())
}

fn trace_csv(rows: &[TraceRow]) -> String {
    let mut buf = Vec::new();
    env::write_trace_csv(&mut buf, rows).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

fn save_checkpoint(path: &Path, cfg: &RunConfig, params: &ParamSet, step: u64) -> Result<()> {
    checkpoint::save(
        path,
        &Checkpoint {
            spec: cfg.network.clone(),
            seed: cfg.run.seed,
            step,
            params: params.clone(),
        },
    )
}

/// Train from scratch into `cfg.run.output_dir`; returns the run directory.
pub fn cmd_train(cfg: &RunConfig, mut progress: impl FnMut(&ppo::IterationMetrics)) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.run.output_dir.clone();
    let ckpt_dir = dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_file(&dir.join("config.toml"), &cfg.to_toml_string()?)?;

    let net = cfg.network()?;
    let params = net.init_params(cfg.run.seed);
    save_checkpoint(&ckpt_dir.join("step_0.ckpt"), cfg, &params, 0)?;
    let mut trainer = Trainer::new(cfg.ppo.clone(), net, params, cfg.axis, &cfg.episode, cfg.reward)?;

    let metrics_path = dir.join("metrics.csv");
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut entropy = String::from("step,entropy\n");
    write_file(&metrics_path, &metrics)?;
    let mut iteration = 0u64;
    while !trainer.finished() {
        let m = trainer.iterate()?;
        iteration += 1;
        metrics.push_str(&metrics_row(&m));
        metrics.push('\n');
        let _ = writeln!(entropy, "{},{}", m.step, m.update.entropy);
        progress(&m);
        if cfg.run.checkpoint_every > 0 && iteration % cfg.run.checkpoint_every == 0 {
            write_file(&metrics_path, &metrics)?;
            save_checkpoint(
                &ckpt_dir.join(format!("step_{}.ckpt", m.step)),
                cfg,
                &trainer.params,
                m.step,
            )?;
        }
    }
    write_file(&metrics_path, &metrics)?;
    write_file(&dir.join("entropy.csv"), &entropy)?;
    save_checkpoint(&dir.join("final.ckpt"), cfg, &trainer.params, trainer.steps_done())?;

    let mut episodes = String::from("episode,env,env_episode,episode_return,moving_average\n");
    let done = trainer.completed_episodes();
    for (k, e) in done.iter().enumerate() {
        let window = &done[(k + 1).saturating_sub(ppo::RETURN_WINDOW)..=k];
        let avg = mean(window.iter().map(|e| e.episode_return));
        let _ = writeln!(episodes, "{k},{},{},{},{avg}", e.env, e.episode, e.episode_return);
    }
    write_file(&dir.join("episode_rewards.csv"), &episodes)?;

    let probe = probe_trace(cfg, &trainer.net, &trainer.params)?;
    write_file(&dir.join("probe_trace.csv"), &trace_csv(&probe))?;
    let mut deflection = String::from("t,y,y_hat\n");
    let mut actions = String::from("t,action\n");
    for r in &probe {
        let _ = writeln!(deflection, "{},{},{}", r.t, r.y, r.y_hat);
        let _ = writeln!(actions, "{},{}", r.t, r.action);
    }
    write_file(&dir.join("deflection.csv"), &deflection)?;
    write_file(&dir.join("actions.csv"), &actions)?;

    if cfg.run.eval_episodes > 0 {
        let report = evaluate(cfg, &trainer.net, &trainer.params, cfg.run.eval_episodes)?;
        write_eval(&dir, &report)?;
    }
    Ok(dir)
}

/// Evaluate a checkpoint; writes `eval.csv` and `summary.json` into `out_dir`.
pub fn cmd_eval(checkpoint_path: &Path, cfg: &RunConfig, n_episodes: usize, out_dir: &Path) -> Result<EvalReport> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    ckpt.spec.check_compatible(&cfg.network)?;
    let net = cfg.network()?;
    net.check_params(&ckpt.params)?;
    let report = evaluate(cfg, &net, &ckpt.params, n_episodes)?;
    create_dir(out_dir)?;
    write_eval(out_dir, &report)?;
    Ok(report)
}

/// Velocity samples of a trapezoidal (or triangular) move. Each sample is the
/// mean velocity over its control period, so the samples integrate exactly to
/// the move distance.
pub fn trapezoid_command(distance: f64, v_peak: f64, accel: f64, dt: f64, v_max: f64) -> Result<Vec<f64>> {
    if !(distance.is_finite() && v_peak.is_finite() && accel.is_finite()) || v_peak <= 0.0 || accel <= 0.0 {
        return Err(Error::InfeasibleMove(format!(
            "need finite distance and positive v_peak/accel, got {distance}, {v_peak}, {accel}"
        )));
    }
    if v_peak > v_max {
        return Err(Error::InfeasibleMove(format!(
            "cruise velocity {v_peak} mm/s exceeds v_max {v_max} mm/s"
        )));
    }
    let d = distance.abs();
    if d == 0.0 {
        return Ok(Vec::new());
    }
    let sign = distance.signum();
    let (v, t_acc, t_cruise) = if d >= v_peak * v_peak / accel {
        (v_peak, v_peak / accel, (d - v_peak * v_peak / accel) / v_peak)
    } else {
        let v = (d * accel).sqrt();
        (v, v / accel, 0.0)
    };
    let total = 2.0 * t_acc + t_cruise;
    let pos = |t: f64| -> f64 {
        let t = t.clamp(0.0, total);
        if t <= t_acc {
            0.5 * accel * t * t
        } else if t <= t_acc + t_cruise {
            0.5 * v * t_acc + v * (t - t_acc)
        } else {
            let r = total - t;
            d - 0.5 * accel * r * r
        }
    };
    let n = (total / dt - 1e-9).ceil() as usize;
    Ok((0..n)
        .map(|k| sign * (pos((k + 1) as f64 * dt) - pos(k as f64 * dt)) / dt)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub scheme: ShaperKind,
    pub design_omega: f64,
    /// Peak |y| over one damped period after the command (and the velocity lag) has settled.
    pub residual_envelope: f64,
    /// Length of the shaped command (s).
    pub move_duration: f64,
    pub trajectory_loss: f64,
    pub final_position: f64,
}

/// Simulate the configured point-to-point move under each selected shaper.
pub fn cmd_baseline(cfg: &RunConfig) -> Result<Vec<BaselineRow>> {
    let axis = &cfg.axis;
    let b = &cfg.baseline;
    let dt = axis.dt_control;
    let command = trapezoid_command(b.distance, b.v_peak, b.accel, dt, axis.v_max)?;
    let goal = GoalSpec {
        x_g: b.start_x + b.distance,
        y_hat_g: 0.0,
    };
    if goal.x_g < axis.x_min || goal.x_g > axis.x_max || b.start_x < axis.x_min || b.start_x > axis.x_max {
        return Err(Error::InfeasibleMove(format!(
            "move {} -> {} leaves travel [{}, {}]",
            b.start_x, goal.x_g, axis.x_min, axis.x_max
        )));
    }
    let design_omega = axis.omega_n * b.design_omega_scale;
    let settle_steps = (b.settle_time / dt).ceil() as usize;
    // residual is measured once the velocity loop has settled after the command
    let lag_steps = (5.0 * axis.tau_v / dt).ceil() as usize;
    let window = dynamics::window_len(axis, axis.dt_physics);

    let mut rows = Vec::with_capacity(b.shapers.len());
    for &kind in &b.shapers {
        let seq = kind.build(design_omega, axis.xi).map_err(|e| Error::Config(format!("{e}")))?;
        let shaped = shapers::shape_command(&seq, &command, dt)?;
        let mut state = SystemState::at_rest(b.start_x);
        let mut control_states = Vec::with_capacity(shaped.len() + settle_steps);
        let mut fine = Vec::new();
        let total = shaped.len() + settle_steps.max(lag_steps + window.div_ceil(axis.substeps()) + 1);
        for k in 0..total {
            let u = shaped.get(k).copied().unwrap_or(0.0);
            state = dynamics::step_traced(&state, u, axis, &mut fine)?;
            control_states.push(state);
        }
        let start = (shaped.len() + lag_steps) * axis.substeps();
        let ys: Vec<f64> = fine[start..start + window].iter().map(|s| s.y).collect();
        rows.push(BaselineRow {
            scheme: kind,
            design_omega,
            residual_envelope: dynamics::envelope_sampled(&ys, axis.dt_physics, axis)?,
            move_duration: shaped.len() as f64 * dt,
            trajectory_loss: env::trajectory_loss(&control_states, &goal),
            final_position: state.x,
        });
    }
    Ok(rows)
}

pub fn baseline_csv(rows: &[BaselineRow]) -> String {
    let mut csv = String::from("scheme,design_omega,residual_envelope,move_duration,trajectory_loss,final_position\n");
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.scheme.name(),
            r.design_omega,
            r.residual_envelope,
            r.move_duration,
            r.trajectory_loss,
            r.final_position
        );
    }
    csv
}

/// Baseline table plus per-shaper sensitivity curves (0.5x to 1.5x the design frequency).
pub fn write_baseline(dir: &Path, cfg: &RunConfig, rows: &[BaselineRow]) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("baseline.csv"), &baseline_csv(rows))?;
    for r in rows.iter().filter(|r| r.scheme != ShaperKind::None) {
        let seq = r.scheme.build(r.design_omega, cfg.axis.xi)?;
        let grid: Vec<f64> = (0..=100).map(|i| r.design_omega * (0.5 + i as f64 / 100.0)).collect();
        let curve = shapers::sensitivity_curve(&seq, &grid)?;
        let path = dir.join(format!("sensitivity_{}.csv", r.scheme.name()));
        let mut buf = Vec::new();
        shapers::write_sensitivity_csv(&mut buf, &curve).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// One velocity command per line; blank lines and `#` comments are skipped.
pub fn parse_commands(text: &str, path: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected a velocity command, got '{line}'"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("non-finite velocity command '{line}'"),
            });
        }
        out.push(v);
    }
    Ok(out)
}

/// Open-loop simulation from rest at the episode start position; one state per command.
pub fn simulate_commands(cfg: &RunConfig, commands: &[f64]) -> Result<Vec<SystemState>> {
    let mut state = SystemState::at_rest(cfg.episode.start_range[0]);
    commands
        .iter()
        .map(|&u| {
            state = dynamics::step(&state, u, &cfg.axis)?;
            Ok(state)
        })
        .collect()
}

pub fn cmd_simulate(cfg: &RunConfig, command_file: &Path) -> Result<String> {
    let text = fs::read_to_string(command_file).map_err(|e| Error::io(command_file, e))?;
    let commands = parse_commands(&text, command_file)?;
    let states = simulate_commands(cfg, &commands)?;
    let mut csv = String::from("t,x,v,y\n");
    for s in &states {
        let _ = writeln!(csv, "{},{},{},{}", s.t, s.x, s.v, s.y);
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settling_step_cases() {
        assert_eq!(settling_step(&[-1.0, -1.0, 0.0, 0.0], 0.0), Some(2));
        assert_eq!(settling_step(&[0.0, 0.0], 0.0), Some(0));
        assert_eq!(settling_step(&[0.0, -1.0], 0.0), None);
        assert_eq!(settling_step(&[], 0.0), None);
        assert_eq!(settling_step(&[-1.0, 0.0, -1.0, 0.0], 0.0), Some(3));
    }

    #[test]
    fn trapezoid_integrates_to_distance() {
        for (d, v, a) in [(200.0, 400.0, 20_000.0), (5.0, 400.0, 20_000.0), (-120.0, 300.0, 5_000.0)] {
            let cmd = trapezoid_command(d, v, a, 0.01, 400.0).unwrap();
            let sum: f64 = cmd.iter().sum::<f64>() * 0.01;
            assert!((sum - d).abs() < 1e-9, "{sum} vs {d}");
            assert!(cmd.iter().all(|c| c.abs() <= v + 1e-9));
        }
        assert!(matches!(
            trapezoid_command(100.0, 500.0, 1000.0, 0.01, 400.0),
            Err(Error::InfeasibleMove(_))
        ));
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::load(None, &["ppo.total_steps=0".into(), "run.seed=9".into()]).unwrap();
        assert_eq!(cfg.ppo.total_steps, 0);
        assert_eq!(cfg.ppo.seed, 9);
        assert_eq!(cfg.episode.seed, 9);
        assert!(RunConfig::load(None, &["ppo.nonsense=1".into()]).is_err());
        assert!(RunConfig::load(None, &["no_equals".into()]).is_err());
        let s = RunConfig::load(None, &["baseline.shapers=[\"zvd\"]".into()]).unwrap();
        assert_eq!(s.baseline.shapers, vec![ShaperKind::Zvd]);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default().resolved().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let p = Path::new("cmds.txt");
        assert_eq!(parse_commands("1\n\n# c\n-2.5\n", p).unwrap(), vec![1.0, -2.5]);
        match parse_commands("1\n2\nabc\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_commands("", p).unwrap().is_empty());
    }
}
