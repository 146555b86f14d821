"""Acceptance suite: one test per release criterion, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to get an explicit
ACCEPTANCE pass line per criterion in addition to pytest's own report. The
desk-scale learning-trend check (criterion 8) trains 3 seeds for 300 iterations
and takes the bulk of the suite's runtime.
"""

import math
import time

import numpy as np
import pytest

from qpong import cli, policy, ppo, qsim, runtime
from qpong.cli import inspect_report, parse_and_validate
from qpong.policy import ModelSpec, PolicyNetwork
from qpong.pong import CoopPong, EnvConfig
from qpong.ppo import (
    PPOConfig,
    TrainBatch,
    Trajectory,
    adam_update,
    clip_global_norm,
    compute_gae,
    ppo_loss,
    ppo_loss_and_grad,
)
from qpong.qsim import AnsatzConfig, apply_gate, new_state
from qpong.runtime import evaluate, init_run, train_iteration
from qpong.strategies import StrategySpec, act, make_policies

from oracles import central_difference, dense_vqc, discounted_returns, gae_by_hand
from test_qsim import _random_gates
from test_runtime import read_metrics_without_walltime, tiny_config


def _report(num: int, label: str) -> None:
    print(f"\nACCEPTANCE {num:02d} PASS - {label}")


def test_criterion_1_quantum_kernel_vs_dense_oracle():
    """run_vqc matches a dense-unitary brute force within 1e-10; 200 cases, <10 s."""
    rng = np.random.default_rng(2024)
    start = time.monotonic()
    for case in range(200):
        n = int(rng.integers(1, 5))
        layers = int(rng.integers(1, 5))
        ent = qsim.STRONG if case % 2 == 0 else qsim.BASIC
        cfg = AnsatzConfig(n, layers, ent)
        feats = rng.uniform(-np.pi, np.pi, n)
        params = rng.uniform(-np.pi, np.pi, cfg.n_params)
        fast = qsim.run_vqc(feats, params, cfg)
        oracle = dense_vqc(feats, params, cfg)
        assert np.allclose(fast, oracle, atol=1e-10), f"case {case}: {fast} vs {oracle}"
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"took {elapsed:.1f}s"
    _report(1, f"200 randomized circuits vs dense oracle at 1e-10 in {elapsed:.2f}s")


def test_criterion_2_parameter_shift_gradient_fidelity():
    """Shift rule vs central differences (h=1e-4) within 1e-5, 50 random circuits."""
    rng = np.random.default_rng(77)
    for case in range(50):
        n = int(rng.integers(1, 7))
        layers = int(rng.integers(1, 5))
        ent = qsim.STRONG if case % 2 == 0 else qsim.BASIC
        cfg = AnsatzConfig(n, layers, ent)
        feats = rng.uniform(-np.pi, np.pi, n)
        params = rng.uniform(-np.pi, np.pi, cfg.n_params)
        upstream = rng.uniform(-1, 1, n)
        grad = qsim.parameter_shift_gradient(feats, params, cfg, upstream)
        fd = central_difference(
            lambda p: float(upstream @ qsim.run_vqc(feats, p, cfg)), params, h=1e-4
        )
        assert np.max(np.abs(grad - fd)) <= 1e-5, f"case {case}"
    _report(2, "50 random circuits: shift rule within 1e-5 of finite differences")


def test_criterion_2_end_to_end_loss_gradient():
    """Full hybrid-model loss gradient within 1e-4 relative on 2 qubits, batch 8."""
    spec = ModelSpec(
        kind=policy.QUANTUM, obs_shape=(3, 3), n_actions=3,
        ansatz=AnsatzConfig(2, 1, qsim.STRONG), n_hybrid_layers=1, hidden_dims=(4,),
    )
    net = PolicyNetwork(spec)
    rng = np.random.default_rng(88)
    params_old = net.init_params(rng) + rng.normal(0, 0.05, net.n_params)
    obs = rng.uniform(0, 1, (8, 3, 3))
    logits, values, _ = net.forward_batch(params_old, obs)
    probs = policy.softmax(logits)
    actions = np.array([rng.choice(3, p=p) for p in probs])
    logp = policy.log_softmax(logits)[np.arange(8), actions]
    adv = rng.normal(size=8)
    batch = TrainBatch(
        obs=obs, actions=actions, log_probs_old=logp, probs_old=probs,
        advantages=(adv - adv.mean()) / adv.std(), returns=rng.normal(size=8),
    )
    cfg = PPOConfig(batch_size=8)
    params = params_old + rng.normal(0, 0.02, net.n_params)
    _, _, grad = ppo_loss_and_grad(net, params, batch, cfg)
    fd = central_difference(lambda p: ppo_loss(net, p, batch, cfg)[0], params, h=1e-4)
    assert np.allclose(grad, fd, rtol=1e-4, atol=1e-6)
    _report(2, "end-to-end loss gradient within 1e-4 relative (2 qubits, batch 8)")


def test_criterion_3_norm_conservation():
    """1000-gate random sequences keep the statevector norm within 1e-12; 100 trials."""
    rng = np.random.default_rng(99)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        state = new_state(n)
        for g in _random_gates(rng, n, 1000):
            apply_gate(state, g)
        assert abs(state.norm() ** 2 - 1.0) <= 1e-12
    _report(3, "100 trials x 1000 random gates: norm drift <= 1e-12")


def test_criterion_4_gae_recursion_oracle():
    """compute_gae equals the hand recursion to 1e-12 on 100 random trajectories."""
    rng = np.random.default_rng(123)
    for _ in range(100):
        T = int(rng.integers(1, 33))
        rewards = rng.normal(size=T)
        values = rng.normal(size=T)
        terminal = bool(rng.random() < 0.5)
        dones = np.array([False] * (T - 1) + [terminal])
        bootstrap = 0.0 if terminal else float(rng.normal())
        gamma = float(rng.uniform(0.5, 0.999))
        lam = float(rng.uniform(0.0, 1.0))
        cfg = PPOConfig(gamma=gamma, gae_lambda=lam)
        traj = Trajectory(
            obs=np.zeros((T, 1, 1)), actions=np.zeros(T, dtype=int), rewards=rewards,
            log_probs_old=np.full(T, -1.0), value_preds=values, dones=dones,
            bootstrap_value=bootstrap, probs_old=np.full((T, 3), 1 / 3),
        )
        got = compute_gae(traj, cfg)
        adv, ret = gae_by_hand(rewards, values, dones, bootstrap, gamma, lam)
        assert np.max(np.abs(got.advantages - adv)) <= 1e-12
        assert np.max(np.abs(got.returns - ret)) <= 1e-12

    # lambda = 1, zero values: exactly the discounted reward-to-go
    rewards = np.random.default_rng(5).normal(size=16)
    traj = Trajectory(
        obs=np.zeros((16, 1, 1)), actions=np.zeros(16, dtype=int), rewards=rewards,
        log_probs_old=np.full(16, -1.0), value_preds=np.zeros(16),
        dones=np.array([False] * 15 + [True]), probs_old=np.full((16, 3), 1 / 3),
    )
    got = compute_gae(traj, PPOConfig(gamma=0.95, gae_lambda=1.0))
    assert np.array_equal(got.advantages, discounted_returns(rewards, 0.95))
    _report(4, "100 random trajectories match the hand recursion at 1e-12; lambda=1 exact")


class _TwoArmedBandit:
    """Stateless one-step environment: arm 0 pays 1, arm 1 pays 0."""

    def __init__(self):
        self.obs = np.random.default_rng(7).uniform(0.2, 0.8, (8, 8))

    def pull(self, action: int) -> float:
        return 1.0 if action == 0 else 0.0


def test_criterion_5_ppo_bandit_sanity():
    """Classical policy reaches Pr(arm 0) >= 0.95 within 200 iterations, 3/3 seeds, <1 min."""
    start = time.monotonic()
    spec = ModelSpec(kind=policy.CLASSICAL, obs_shape=(8, 8), n_actions=2, hidden_dims=(8,))
    cfg = PPOConfig(
        gamma=0.95, clip_eps=0.2, lr=0.05, gae_lambda=0.95, vf_coef=0.5,
        entropy_coef=0.01, kl_coef=0.0, batch_size=64, epochs_per_iter=1,
    )
    solved_at = {}
    for seed in (11, 22, 33):
        bandit = _TwoArmedBandit()
        net = PolicyNetwork(spec)
        rng = np.random.default_rng(seed)
        params = net.init_params(rng)
        adam = ppo.AdamState.zeros(net.n_params)
        obs_batch = np.repeat(bandit.obs[None], 64, axis=0)
        for iteration in range(200):
            logits, values, _ = net.forward_batch(params, obs_batch)
            probs = policy.softmax(logits)
            actions = np.array([rng.choice(2, p=p) for p in probs])
            rewards = np.array([bandit.pull(a) for a in actions])
            logp = policy.log_softmax(logits)[np.arange(64), actions]
            adv = rewards - values  # one-step episodes: A = r - V
            centered = adv - adv.mean()
            std = centered.std()
            batch = TrainBatch(
                obs=obs_batch, actions=actions, log_probs_old=logp, probs_old=probs,
                advantages=centered / std if std > 1e-12 else centered, returns=rewards,
            )
            _, _, grad = ppo_loss_and_grad(net, params, batch, cfg)
            params, adam = adam_update(params, clip_global_norm(grad, cfg.max_grad_norm), adam, cfg)
            p_arm0 = policy.softmax(net.forward(params, bandit.obs).logits)[0]
            if p_arm0 >= 0.95:
                solved_at[seed] = iteration + 1
                break
        assert seed in solved_at, f"seed {seed} never reached Pr(arm 0) >= 0.95"
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    _report(5, f"bandit solved in {solved_at} iterations ({elapsed:.1f}s)")


def test_criterion_6_factorization_identity():
    """Independent strategy: joint log-prob equals the bitwise sum, 1000 steps."""
    env_cfg = EnvConfig.desk()
    model = ModelSpec(
        kind=policy.QUANTUM, obs_shape=(16, 16), n_actions=3,
        ansatz=AnsatzConfig(2, 1, qsim.STRONG), n_hybrid_layers=1, hidden_dims=(4,),
    )
    policies = make_policies(StrategySpec("independent"), model, seed=6)
    env = CoopPong(env_cfg)
    rng = np.random.default_rng(60)
    _, obs = env.reset(seed=61)
    for _ in range(1000):
        res = act(policies, obs, rng)
        assert res.joint_log_prob == res.stream_log_probs[0] + res.stream_log_probs[1]
        tr = env.step(res.env_actions)
        obs = tr.observations if not tr.done else env.reset()[1]
    _report(6, "1000 rollout steps: joint log-prob is the exact per-agent sum")


def test_criterion_7_metrics_determinism(tmp_path):
    """Identical (RunConfig, seed) -> bit-identical metrics CSV minus wall_time_s."""
    cfg_a = tiny_config(output_dir=str(tmp_path / "a"), ppo={"total_iterations": 3})
    cfg_b = tiny_config(output_dir=str(tmp_path / "b"), ppo={"total_iterations": 3})
    runtime.train(cfg_a)
    runtime.train(cfg_b)
    rows_a = read_metrics_without_walltime(tmp_path / "a" / "metrics.csv")
    rows_b = read_metrics_without_walltime(tmp_path / "b" / "metrics.csv")
    assert rows_a == rows_b
    _report(7, "two identical runs: metrics CSVs bit-identical (wall_time_s excluded)")


def test_criterion_7_serial_vs_parallel_rollouts():
    """Pool of 1 vs pool of 4 over the same 4 seeded streams: identical batches."""
    base = tiny_config(n_workers=4, max_parallel_workers=4)
    state = init_run(base)
    parallel = runtime.run_rollouts(base, state.policies, iteration=0)
    serial = runtime.run_rollouts(
        tiny_config(n_workers=4, max_parallel_workers=1), state.policies, iteration=0
    )
    for a, b in zip(parallel, serial):
        for field in ("obs0", "obs1", "stream_actions", "stream_log_probs",
                      "stream_probs", "values", "rewards", "dones", "bootstrap"):
            assert np.array_equal(getattr(a, field), getattr(b, field)), field
    _report(7, "serial (1) vs parallel (4) execution: merged batches bit-identical")


def test_criterion_8_desk_learning_trend():
    """Desk preset, independent quantum: >= 2x episode-length gain in >= 2/3 seeds."""
    start = time.monotonic()
    results = {}
    for seed in (101, 202, 303):
        _, cfg = parse_and_validate(["train", "--desk", "--seed", str(seed)])
        state = init_run(cfg)
        baseline = evaluate(cfg, state.policies, n_episodes=100)
        for _ in range(300):
            train_iteration(cfg, state)
        final = evaluate(cfg, state.policies, n_episodes=100)
        results[seed] = (baseline.mean_episode_len, final.mean_episode_len)
        print(
            f"\n  seed {seed}: baseline {baseline.mean_episode_len:.1f} -> "
            f"final {final.mean_episode_len:.1f} "
            f"({final.mean_episode_len / baseline.mean_episode_len:.2f}x, "
            f"{time.monotonic() - start:.0f}s elapsed)"
        )
    successes = sum(1 for b, f in results.values() if f >= 2.0 * b)
    elapsed = time.monotonic() - start
    assert successes >= 2, f"only {successes}/3 seeds doubled the baseline: {results}"
    _report(
        8,
        f"{successes}/3 seeds reached >= 2x episode length after 300 iterations "
        f"({elapsed / 60:.1f} min total)",
    )


def test_criterion_9_parameter_accounting():
    """Inspect counts satisfy the closed form; the 1170 figure is flagged."""
    cases = [
        (4, 2, qsim.STRONG, 3), (4, 3, qsim.BASIC, 3), (6, 4, qsim.STRONG, 2),
        (13, 9, qsim.STRONG, 3),
    ]
    for qubits, layers, ent, blocks in cases:
        ansatz = AnsatzConfig(qubits, layers, ent)
        spec = ModelSpec(
            kind=policy.QUANTUM, obs_shape=(16, 16), n_actions=3,
            ansatz=ansatz, n_hybrid_layers=blocks, hidden_dims=(8,) * blocks,
        )
        net = PolicyNetwork(spec)
        _, quantum = net.count_parameters()
        expected = blocks * qubits * layers * ansatz.rotations_per_qubit_layer
        assert quantum == expected

    _, ref_cfg = parse_and_validate(["inspect"])  # 13 qubits x 9 layers default
    report = inspect_report(ref_cfg)
    assert "1170" in report and "702" in report
    _report(9, "closed-form counts exact; 13x9 layout (702) flagged against the 1170 figure")


def test_criterion_10_ball_speed_invariant():
    """Speed magnitude preserved within 1e-9 across 10,000 reflection events."""
    env = CoopPong(EnvConfig.desk())
    rng = np.random.default_rng(1010)
    events = 0
    env.reset(seed=0)
    while events < 10_000:
        state, _ = env.reset(seed=int(rng.integers(1 << 31)))
        phi = rng.uniform(np.pi / 6, np.pi / 3)
        if events % 2 == 0:  # guaranteed top-wall bounce
            state.ball_pos = (8.0, 0.9)
            state.ball_vel = (math.cos(phi), -math.sin(phi))
        else:  # guaranteed wedge-paddle hit (stresses the deflection renormalization)
            state.ball_pos = (14.3, float(rng.uniform(6.0, 10.0)))
            state.ball_vel = (math.cos(phi), math.copysign(math.sin(phi), rng.normal()))
        before = state.ball_vel
        env.step((0, 0))
        assert env.state.ball_vel != before  # a reflection actually happened
        speed = math.hypot(*env.state.ball_vel)
        assert abs(speed - env.config.ball_speed) <= 1e-9
        events += 1
    _report(10, "10,000 reflections: speed drift <= 1e-9")


def test_criterion_10_observation_disjointness():
    """The two observation crops share no source pixels; 1000 random states."""
    env = CoopPong(EnvConfig.desk())
    rng = np.random.default_rng(2020)
    split = env.config.arena_w // 2
    for _ in range(1000):
        state, _ = env.reset(seed=int(rng.integers(1 << 31)))
        state.ball_pos = (float(rng.uniform(0, 16)), float(rng.uniform(0, 16)))
        state.paddle_pos = [float(rng.uniform(2.5, 13.5)), float(rng.uniform(2.5, 13.5))]
        frame = env._frame()
        scrambled = frame.copy()
        scrambled[:, split:] = rng.random((16, split))
        assert np.array_equal(
            env._downscale(scrambled[:, :split]), env._downscale(frame[:, :split])
        )
        scrambled = frame.copy()
        scrambled[:, :split] = rng.random((16, split))
        assert np.array_equal(
            env._downscale(scrambled[:, split:]), env._downscale(frame[:, split:])
        )
    _report(10, "1000 random states: observation halves pixel-disjoint")


def test_criterion_10_termination_reasons():
    """Episodes end only on a left/right exit or at max_cycles."""
    env = CoopPong(EnvConfig.desk())
    rng = np.random.default_rng(3030)
    for episode in range(30):
        state, _ = env.reset(seed=episode)
        steps = 0
        while not state.done:
            tr = env.step((int(rng.choice([-1, 0, 1])), int(rng.choice([-1, 0, 1]))))
            steps += 1
            if not tr.done:
                assert 0.0 <= env.state.ball_pos[0] <= env.config.arena_w
        assert steps <= env.config.max_cycles
        x = env.state.ball_pos[0]
        assert x < 0.0 or x > env.config.arena_w or env.state.t == env.config.max_cycles
    _report(10, "termination only via left/right exit or the cycle cap")
