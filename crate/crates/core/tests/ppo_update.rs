use feeddrive::dynamics::AxisParams;
use feeddrive::env::{EpisodeConfig, RewardConfig, OBS_DIM};
use feeddrive::neural::{self, Network, NetworkSpec, ParamSet};
use feeddrive::ppo::{
    self, collect_rollout, ppo_loss, EnvPool, LossCoefs, OptimizerKind, PpoConfig, PreparedRollout,
};

struct Setup {
    net: Network,
    params: ParamSet,
    rollout: PreparedRollout,
}

fn setup() -> Setup {
    let mut spec = NetworkSpec::tiny(OBS_DIM);
    spec.mean_head_gain = 0.5;
    spec.log_std_init = Some(3.0);
    let net = Network::new(spec).unwrap();
    let params = net.init_params(11);
    let episode = EpisodeConfig {
        horizon: 12,
        seed: 2,
        ..EpisodeConfig::default()
    };
    let mut pool = EnvPool::new(2, AxisParams::default(), &episode, RewardConfig::default(), 3, 9).unwrap();
    let traj = collect_rollout(&mut pool, &net, &params, 30, 8, 100.0).unwrap();
    let mut rollout = PreparedRollout::truncated(traj, 0.99, 0.95).unwrap();
    // keep advantages of both signs and away from zero
    for (e, adv) in rollout.advantages.iter_mut().enumerate() {
        for (t, a) in adv.iter_mut().enumerate() {
            *a = ((e * 31 + t) as f64 * 0.7).sin() + 0.1;
        }
    }
    Setup { net, params, rollout }
}

fn grad(s: &Setup, params: &ParamSet, coefs: LossCoefs) -> ParamSet {
    let mut g = params.zeros_like();
    ppo_loss(&s.net, params, &s.rollout, &s.rollout.sequences(), coefs, Some(&mut g)).unwrap();
    g
}

fn coefs(clip_eps: f64, value_coef: f64, entropy_coef: f64) -> LossCoefs {
    LossCoefs {
        clip_eps,
        value_coef,
        entropy_coef,
        value_scale: 100.0,
    }
}

/// `-mean(A log pi(a|s))` evaluated directly from forward passes.
fn pg_objective(s: &Setup, params: &ParamSet) -> f64 {
    let traj = &s.rollout.trajectory;
    let log_std = s.net.log_std(params).to_vec();
    let mut total = 0.0;
    let mut n = 0;
    for seq in s.rollout.sequences() {
        let env = &traj.envs[seq.env];
        let steps = &env.steps[seq.start..seq.start + seq.len];
        let obs: Vec<Vec<f64>> = steps.iter().map(|st| st.features.clone()).collect();
        let resets: Vec<bool> = steps.iter().map(|st| st.episode_start).collect();
        let init = &env.seq_states[seq.start / traj.seq_len];
        let (out, _) = s.net.forward(params, &obs, &resets, init).unwrap();
        for (k, st) in steps.iter().enumerate() {
            let lp = neural::log_prob(&st.action, &out.means[k..k + 1], &log_std);
            total -= s.rollout.advantages[seq.env][seq.start + k] * lp;
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn surrogate_gradient_at_sampling_point_is_vanilla_policy_gradient() {
    let s = setup();
    let g = grad(&s, &s.params, coefs(0.2, 0.0, 0.0));
    // the clip range is irrelevant while every ratio is exactly 1
    let unclipped = grad(&s, &s.params, coefs(1e9, 0.0, 0.0));
    assert_eq!(g, unclipped);

    let mut worst: f64 = 0.0;
    for i in 0..s.params.len() {
        let h = 1e-5 * s.params.data[i].abs().max(1.0);
        let mut p = s.params.clone();
        p.data[i] += h;
        let up = pg_objective(&s, &p);
        p.data[i] -= 2.0 * h;
        let down = pg_objective(&s, &p);
        let fd = (up - down) / (2.0 * h);
        let err = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-5);
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn sgd_update_moves_params_by_learning_rate_times_gradient() {
    let s = setup();
    let cfg = PpoConfig {
        optimizer: OptimizerKind::Sgd,
        epochs: 1,
        minibatches: 1,
        max_grad_norm: None,
        max_kl: None,
        learning_rate: 1e-3,
        learning_rate_final: 1e-3,
        entropy_coef: 0.01,
        entropy_coef_final: 0.01,
        ..PpoConfig::default()
    };
    let mut rollout = s.rollout.clone();
    let mut normalized = s.rollout.clone();
    normalized.normalize_advantages();
    let reference = Setup {
        net: s.net.clone(),
        params: s.params.clone(),
        rollout: normalized,
    };
    let g = grad(&reference, &s.params, coefs(cfg.clip_eps, cfg.value_coef, 0.01));

    let mut params = s.params.clone();
    let mut opt = ppo::Optimizer::new(&cfg, s.net.n_params());
    let stats = ppo::update(&s.net, &mut params, &mut opt, &mut rollout, &cfg, 0, 0).unwrap();
    assert_eq!(stats.minibatches_run, 1);
    for i in 0..params.len() {
        let expected = s.params.data[i] - 1e-3 * g.data[i];
        assert!(
            (params.data[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
            "{}: {} vs {expected}",
            params.name_of(i),
            params.data[i]
        );
    }
}

#[test]
fn entropy_bonus_pushes_log_std_up() {
    let s = setup();
    let off = s.net.log_std_offset();
    let base = grad(&s, &s.params, coefs(0.2, 0.5, 0.0));
    for c in [0.001, 0.01, 0.1] {
        let g = grad(&s, &s.params, coefs(0.2, 0.5, c));
        // descent on -c*H raises log_std by exactly c per unit step
        assert!((base.data[off] - g.data[off] - c).abs() < 1e-12);
        for i in (0..s.params.len()).filter(|&i| i != off) {
            assert_eq!(g.data[i], base.data[i]);
        }
    }
}

#[test]
fn value_coefficient_scales_only_the_value_path() {
    let s = setup();
    let a = grad(&s, &s.params, coefs(0.2, 0.0, 0.0));
    let b = grad(&s, &s.params, coefs(0.2, 1.0, 0.0));
    let vw = s.params.arrays.iter().find(|a| a.name == "value_head.weight").unwrap().range();
    let mw = s.params.arrays.iter().find(|a| a.name == "mean_head.weight").unwrap().range();
    assert!(vw.clone().all(|i| a.data[i] == 0.0));
    assert!(vw.clone().any(|i| b.data[i] != 0.0));
    for i in mw {
        assert_eq!(a.data[i], b.data[i]);
    }
}
