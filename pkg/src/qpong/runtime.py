"""Training orchestration: seeded rollout streams, learner updates, checkpoints.

Each iteration, every rollout stream runs a fresh environment seeded from
(seed, iteration, stream index) against an immutable parameter snapshot; the
merged batch (stream order, independent of completion order) is routed to the
strategy's learners, which update at the iteration barrier. This makes
iterations self-contained: a checkpoint is just parameters + optimizer state +
the next iteration index, and resuming reproduces the run bit-exactly.

``n_workers`` fixes the number of seeded streams (and therefore the data);
``max_parallel_workers`` only bounds how many execute concurrently.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import policy as policy_mod
from .policy import ModelSpec, PolicyNetwork
from .pong import CoopPong, EnvConfig
from .ppo import (
    AdamState,
    PPOConfig,
    TrainBatch,
    adam_update,
    clip_global_norm,
    compute_gae,
    gae_advantages,
    ppo_loss_and_grad,
    value_loss_and_grad,
)
from .strategies import (
    INDEPENDENT,
    JOINT,
    SHARED,
    PolicyEntry,
    PolicySet,
    RolloutSegment,
    StrategySpec,
    act,
    bootstrap_values,
    full_frame,
    make_policies,
    route_experience,
)

MANIFEST_VERSION = 1
METRICS_HEADER = (
    "iteration,mean_reward,std_reward,mean_episode_len,"
    "policy_loss,value_loss,entropy,kl,wall_time_s"
)

# seed-stream tags so training, evaluation and shuffling never collide
_TAG_ENV, _TAG_ACT, _TAG_SHUFFLE, _TAG_EVAL = 0xE01, 0xAC2, 0x5F3, 0xEB4


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig
    strategy: StrategySpec
    model: ModelSpec
    ppo: PPOConfig
    n_workers: int = 4
    steps_per_worker_per_iter: int = 256
    seed: int = 0
    eval_every: int = 0
    eval_episodes: int = 100
    checkpoint_every: int = 0
    output_dir: str | None = None
    max_parallel_workers: int | None = None

    def __post_init__(self):
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        if self.steps_per_worker_per_iter < 1:
            raise ValueError("steps_per_worker_per_iter must be >= 1")
        if self.n_workers * self.steps_per_worker_per_iter < self.ppo.batch_size:
            raise ValueError("workers x steps per iteration must cover one batch")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "strategy": {"kind": self.strategy.kind, "n_agents": self.strategy.n_agents},
            "model": self.model.to_dict(),
            "ppo": self.ppo.to_dict(),
            "n_workers": self.n_workers,
            "steps_per_worker_per_iter": self.steps_per_worker_per_iter,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "eval_episodes": self.eval_episodes,
            "checkpoint_every": self.checkpoint_every,
            "output_dir": self.output_dir,
            "max_parallel_workers": self.max_parallel_workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            env=EnvConfig.from_dict(d["env"]),
            strategy=StrategySpec(**d["strategy"]),
            model=ModelSpec.from_dict(d["model"]),
            ppo=PPOConfig.from_dict(d["ppo"]),
            n_workers=int(d["n_workers"]),
            steps_per_worker_per_iter=int(d["steps_per_worker_per_iter"]),
            seed=int(d["seed"]),
            eval_every=int(d.get("eval_every", 0)),
            eval_episodes=int(d.get("eval_episodes", 100)),
            checkpoint_every=int(d.get("checkpoint_every", 0)),
            output_dir=d.get("output_dir"),
            max_parallel_workers=d.get("max_parallel_workers"),
        )


@dataclass
class IterationMetrics:
    iteration: int
    mean_reward: float
    std_reward: float
    mean_episode_len: float
    policy_loss: float
    value_loss: float
    entropy: float
    kl: float
    wall_time_s: float

    def csv_row(self) -> str:
        vals = [
            self.mean_reward, self.std_reward, self.mean_episode_len,
            self.policy_loss, self.value_loss, self.entropy, self.kl, self.wall_time_s,
        ]
        return ",".join([str(self.iteration)] + [repr(float(v)) for v in vals])


@dataclass
class EvalResult:
    mean_episode_len: float
    mean_return: float


@dataclass
class RunState:
    policies: PolicySet
    adam: dict[str, AdamState]
    iteration: int = 0


def init_run(config: RunConfig) -> RunState:
    policies = make_policies(config.strategy, config.model, seed=config.seed)
    adam = {e.name: AdamState.zeros(e.params.size) for e in policies.trainable_entries()}
    return RunState(policies=policies, adam=adam, iteration=0)


# -- rollouts ---------------------------------------------------------------


def collect_segment(
    config: RunConfig, policies: PolicySet, iteration: int, worker: int
) -> RolloutSegment:
    """Run one seeded stream for a fixed number of steps (episodes auto-reset)."""
    env = CoopPong(config.env)
    action_rng = np.random.default_rng([config.seed, _TAG_ACT, iteration, worker])
    _, obs = env.reset(seed=[config.seed, _TAG_ENV, iteration, worker])

    T = config.steps_per_worker_per_iter
    kind = config.strategy.kind
    n_streams = 1 if kind == JOINT else 2
    n_values = 2 if kind == INDEPENDENT else 1
    n_actions = config.model.n_actions
    size = config.env.obs_size

    obs0 = np.zeros((T, size, size))
    obs1 = np.zeros((T, size, size))
    stream_actions = np.zeros((T, n_streams), dtype=np.int64)
    stream_log_probs = np.zeros((T, n_streams))
    stream_probs = np.zeros((T, n_streams, n_actions))
    values = np.zeros((T, n_values))
    rewards = np.zeros((T, 2))
    dones = np.zeros(T, dtype=bool)

    episode_returns: list[float] = []
    episode_lengths: list[int] = []
    ep_ret, ep_len = 0.0, 0

    for t in range(T):
        obs0[t], obs1[t] = obs
        res = act(policies, obs, action_rng)
        stream_actions[t] = res.stream_actions
        stream_log_probs[t] = res.stream_log_probs
        stream_probs[t] = np.stack(res.stream_probs)
        values[t] = res.values
        tr = env.step(res.env_actions)
        rewards[t] = tr.rewards
        dones[t] = tr.done
        ep_ret += tr.rewards[0]
        ep_len += 1
        if tr.done:
            episode_returns.append(ep_ret)
            episode_lengths.append(ep_len)
            ep_ret, ep_len = 0.0, 0
            _, obs = env.reset()
        else:
            obs = tr.observations

    bootstrap = np.zeros(n_values) if dones[-1] else bootstrap_values(policies, obs)
    return RolloutSegment(
        obs0=obs0, obs1=obs1, stream_actions=stream_actions,
        stream_log_probs=stream_log_probs, stream_probs=stream_probs,
        values=values, rewards=rewards, dones=dones, bootstrap=bootstrap,
        episode_returns=episode_returns, episode_lengths=episode_lengths,
        partial_return=ep_ret, partial_length=ep_len,
    )


def run_rollouts(config: RunConfig, policies: PolicySet, iteration: int) -> list[RolloutSegment]:
    """Collect every stream; merge in stream order regardless of completion order.

    A failed iteration of collection is retried once; a second failure is a run
    error.
    """

    def _collect_all() -> list[RolloutSegment]:
        pool = config.max_parallel_workers or config.n_workers
        if pool <= 1:
            return [collect_segment(config, policies, iteration, w) for w in range(config.n_workers)]
        with ThreadPoolExecutor(max_workers=pool) as ex:
            futures = [
                ex.submit(collect_segment, config, policies, iteration, w)
                for w in range(config.n_workers)
            ]
            return [f.result() for f in futures]

    try:
        return _collect_all()
    except Exception:
        try:
            return _collect_all()
        except Exception as exc:
            raise RuntimeError(f"rollout collection failed twice: {exc}") from exc


# -- learners -----------------------------------------------------------------


def _normalize(adv: np.ndarray, enabled: bool) -> np.ndarray:
    if not enabled or len(adv) < 2:
        return adv
    centered = adv - adv.mean()
    std = centered.std()
    return centered / std if std > 1e-12 else centered


def _flatten(routed_trajs, cfg: PPOConfig):
    batches = [compute_gae(t, cfg) for t in routed_trajs]
    adv = _normalize(np.concatenate([b.advantages for b in batches]), cfg.normalize_advantages)
    ret = np.concatenate([b.returns for b in batches])
    obs = np.concatenate([t.obs for t in routed_trajs])
    actions = np.concatenate([t.actions for t in routed_trajs]).astype(int)
    logp = np.concatenate([t.log_probs_old for t in routed_trajs])
    probs = np.concatenate([t.probs_old for t in routed_trajs])
    return obs, actions, logp, probs, adv, ret


def _minibatches(n: int, batch_size: int, epochs: int, rng: np.random.Generator):
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start : start + batch_size]


def _update_policy_learner(entry: PolicyEntry, trajs, cfg: PPOConfig, rng, adam: AdamState):
    obs, actions, logp, probs, adv, ret = _flatten(trajs, cfg)
    params = entry.params
    sums = {"policy": 0.0, "value": 0.0, "entropy": 0.0, "kl": 0.0}
    n_updates = 0
    for idx in _minibatches(len(actions), cfg.batch_size, cfg.epochs_per_iter, rng):
        batch = TrainBatch(
            obs=obs[idx], actions=actions[idx], log_probs_old=logp[idx],
            probs_old=probs[idx], advantages=adv[idx], returns=ret[idx],
        )
        _, comp, grad = ppo_loss_and_grad(entry.net, params, batch, cfg)
        grad = clip_global_norm(grad, cfg.max_grad_norm)
        params, adam = adam_update(params, grad, adam, cfg)
        for key in sums:
            sums[key] += comp[key]
        n_updates += 1
    means = {k: v / n_updates for k, v in sums.items()}
    return params, adam, means


def _update_shared_learner(policies: PolicySet, trajs, cfg: PPOConfig, rng, adam: dict):
    """Shared actor on both agents' streams; centralized critic on full frames."""
    actor = policies.actors[0]
    critic = policies.critic
    adv_parts, ret_parts = [], []
    for t in trajs:
        adv, ret = gae_advantages(t.rewards, t.values, t.dones, t.bootstrap_value, cfg)
        adv_parts.append(adv)
        ret_parts.append(ret)
    adv = _normalize(np.concatenate(adv_parts), cfg.normalize_advantages)
    ret = np.concatenate(ret_parts)

    # actor samples: both agents share the centrally-estimated advantages
    obs = np.concatenate([t.obs0 for t in trajs] + [t.obs1 for t in trajs])
    actions = np.concatenate(
        [t.actions[:, 0] for t in trajs] + [t.actions[:, 1] for t in trajs]
    ).astype(int)
    logp = np.concatenate([t.log_probs[:, 0] for t in trajs] + [t.log_probs[:, 1] for t in trajs])
    probs = np.concatenate([t.probs[:, 0] for t in trajs] + [t.probs[:, 1] for t in trajs])
    adv2 = np.concatenate([adv, adv])
    ret2 = np.concatenate([ret, ret])

    actor_cfg = replace(cfg, vf_coef=0.0)  # the actor's own value head is unused
    params = actor.params
    actor_adam = adam[actor.name]
    sums = {"policy": 0.0, "value": 0.0, "entropy": 0.0, "kl": 0.0}
    n_updates = 0
    for idx in _minibatches(len(actions), cfg.batch_size, cfg.epochs_per_iter, rng):
        batch = TrainBatch(
            obs=obs[idx], actions=actions[idx], log_probs_old=logp[idx],
            probs_old=probs[idx], advantages=adv2[idx], returns=ret2[idx],
        )
        _, comp, grad = ppo_loss_and_grad(actor.net, params, batch, actor_cfg)
        grad = clip_global_norm(grad, cfg.max_grad_norm)
        params, actor_adam = adam_update(params, grad, actor_adam, cfg)
        for key in ("policy", "entropy", "kl"):
            sums[key] += comp[key]
        n_updates += 1

    frames = np.concatenate([full_frame(t.obs0, t.obs1) for t in trajs])
    cparams = critic.params
    critic_adam = adam[critic.name]
    value_sum, value_updates = 0.0, 0
    for idx in _minibatches(len(ret), cfg.batch_size, cfg.epochs_per_iter, rng):
        loss, grad = value_loss_and_grad(critic.net, cparams, frames[idx], ret[idx], cfg)
        grad = clip_global_norm(grad, cfg.max_grad_norm)
        cparams, critic_adam = adam_update(cparams, grad, critic_adam, cfg)
        value_sum += loss / max(cfg.vf_coef, 1e-12)
        value_updates += 1

    means = {k: v / n_updates for k, v in sums.items()}
    means["value"] = value_sum / value_updates
    return (params, actor_adam), (cparams, critic_adam), means


# -- iteration ----------------------------------------------------------------


def train_iteration(config: RunConfig, state: RunState) -> IterationMetrics:
    t0 = time.perf_counter()
    iteration = state.iteration
    segments = run_rollouts(config, state.policies, iteration)
    routed = route_experience(config.strategy, segments)

    new_params: dict[str, np.ndarray] = {}
    comps_acc: list[dict] = []
    if config.strategy.kind == SHARED:
        rng = np.random.default_rng([config.seed, _TAG_SHUFFLE, iteration, 0])
        (aparams, aadam), (cparams, cadam), means = _update_shared_learner(
            state.policies, routed["shared"], config.ppo, rng, state.adam
        )
        actor, critic = state.policies.actors[0], state.policies.critic
        new_params[actor.name] = aparams
        new_params[critic.name] = cparams
        state.adam[actor.name] = aadam
        state.adam[critic.name] = cadam
        comps_acc.append(means)
    else:
        for li, (name, trajs) in enumerate(sorted(routed.items())):
            entry = next(e for e in state.policies.actors if e.name == name)
            rng = np.random.default_rng([config.seed, _TAG_SHUFFLE, iteration, li])
            params, adam, means = _update_policy_learner(entry, trajs, config.ppo, rng, state.adam[name])
            new_params[name] = params
            state.adam[name] = adam
            comps_acc.append(means)

    # barrier: swap the snapshot only after every learner finished
    for entry in state.policies.trainable_entries():
        if entry.name in new_params:
            entry.params = new_params[entry.name]
    state.iteration += 1

    returns = [r for seg in segments for r in seg.episode_returns]
    lengths = [l for seg in segments for l in seg.episode_lengths]
    if not returns:  # nothing completed: fall back to the truncated tails
        returns = [getattr(seg, "partial_return", 0.0) for seg in segments]
        lengths = [getattr(seg, "partial_length", 0) for seg in segments]
    comp_mean = {k: float(np.mean([c[k] for c in comps_acc])) for k in comps_acc[0]}
    return IterationMetrics(
        iteration=iteration,
        mean_reward=float(np.mean(returns)),
        std_reward=float(np.std(returns)),
        mean_episode_len=float(np.mean(lengths)),
        policy_loss=comp_mean["policy"],
        value_loss=comp_mean["value"],
        entropy=comp_mean["entropy"],
        kl=comp_mean["kl"],
        wall_time_s=time.perf_counter() - t0,
    )


# -- evaluation ----------------------------------------------------------------


def evaluate(config: RunConfig, policies: PolicySet, n_episodes: int | None = None) -> EvalResult:
    """Greedy policy over seeded episodes disjoint from every training stream."""
    n_episodes = n_episodes or config.eval_episodes
    env = CoopPong(config.env)
    rng = np.random.default_rng(0)  # unused in greedy mode, kept for the act() signature
    lengths, returns = [], []
    for ep in range(n_episodes):
        _, obs = env.reset(seed=[config.seed, _TAG_EVAL, ep])
        total, steps = 0.0, 0
        done = False
        while not done:
            res = act(policies, obs, rng, greedy=True)
            tr = env.step(res.env_actions)
            total += tr.rewards[0]
            steps += 1
            done = tr.done
            obs = tr.observations
        lengths.append(steps)
        returns.append(total)
    return EvalResult(mean_episode_len=float(np.mean(lengths)), mean_return=float(np.mean(returns)))


# -- persistence ----------------------------------------------------------------


class MetricsWriter:
    """Append-only CSV with a fixed, versioned schema (see METRICS_HEADER)."""

    def __init__(self, path, resume: bool = False):
        self.path = Path(path)
        if not resume or not self.path.exists():
            self.path.write_text(METRICS_HEADER + "\n")

    def append(self, metrics: IterationMetrics) -> None:
        with open(self.path, "a") as fh:
            fh.write(metrics.csv_row() + "\n")


def write_manifest(config: RunConfig) -> None:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "metrics_schema": METRICS_HEADER,
        "config": config.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def save_run_checkpoint(path, config: RunConfig, state: RunState) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for e in state.policies.trainable_entries():
        adam = state.adam[e.name]
        policy_mod.save_checkpoint(
            path / f"{e.name}.npz",
            e.net.spec,
            e.params,
            extras={"adam_m": adam.m, "adam_v": adam.v, "adam_step": np.int64(adam.step)},
        )
    meta = {
        "format_version": MANIFEST_VERSION,
        "iteration": state.iteration,
        "config": config.to_dict(),
        "entries": [
            {
                "name": e.name,
                "owned_agents": list(e.owned_agents),
                "value_only": e.net.value_only,
            }
            for e in state.policies.trainable_entries()
        ],
    }
    # metadata last: a readable checkpoint.json implies the arrays are complete
    (path / "checkpoint.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_run_checkpoint(path) -> tuple[RunConfig, RunState]:
    path = Path(path)
    meta_path = path / "checkpoint.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint metadata at {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported checkpoint version in {meta_path}")
    config = RunConfig.from_dict(meta["config"])
    actors, critic = [], None
    adam: dict[str, AdamState] = {}
    for entry_meta in meta["entries"]:
        name = entry_meta["name"]
        spec, params, extras = policy_mod.load_checkpoint(path / f"{name}.npz")
        net = PolicyNetwork(spec, value_only=bool(entry_meta["value_only"]))
        entry = PolicyEntry(name, net, params, tuple(entry_meta["owned_agents"]))
        adam[name] = AdamState(
            m=extras["adam_m"], v=extras["adam_v"], step=int(extras["adam_step"])
        )
        if entry.net.value_only:
            critic = entry
        else:
            actors.append(entry)
    policies = PolicySet(config.strategy, actors, critic=critic)
    return config, RunState(policies=policies, adam=adam, iteration=int(meta["iteration"]))


# -- full loop -------------------------------------------------------------------


def _eval_log_path(config: RunConfig) -> Path:
    return Path(config.output_dir) / "eval_log.csv"


def _append_eval(config: RunConfig, label: str, result: EvalResult, n_episodes: int) -> None:
    path = _eval_log_path(config)
    if not path.exists():
        path.write_text("label,episodes,mean_episode_len,mean_return\n")
    with open(path, "a") as fh:
        fh.write(f"{label},{n_episodes},{result.mean_episode_len!r},{result.mean_return!r}\n")


def train(
    config: RunConfig,
    resume_from: str | None = None,
    on_iteration=None,
) -> list[IterationMetrics]:
    """Run the training loop to total_iterations; returns per-iteration metrics.

    With an output_dir set, writes manifest.json, metrics.csv (append on
    resume), periodic checkpoints under checkpoints/, and eval_log.csv when
    eval_every is nonzero.
    """
    if resume_from is not None:
        # the caller-provided config wins; only parameters/optimizer/iteration load
        _, state = load_run_checkpoint(resume_from)
    else:
        state = init_run(config)

    writer = None
    if config.output_dir:
        write_manifest(config)
        writer = MetricsWriter(Path(config.output_dir) / "metrics.csv", resume=state.iteration > 0)
        if config.eval_every > 0 and state.iteration == 0:
            baseline = evaluate(config, state.policies)
            _append_eval(config, "iter_0", baseline, config.eval_episodes)

    history: list[IterationMetrics] = []
    while state.iteration < config.ppo.total_iterations:
        metrics = train_iteration(config, state)
        history.append(metrics)
        if writer is not None:
            writer.append(metrics)
        if on_iteration is not None:
            on_iteration(metrics, state)
        done_iter = state.iteration
        if config.output_dir and config.checkpoint_every > 0 and (
            done_iter % config.checkpoint_every == 0 or done_iter == config.ppo.total_iterations
        ):
            save_run_checkpoint(
                Path(config.output_dir) / "checkpoints" / f"iter_{done_iter:06d}", config, state
            )
        if config.output_dir and config.eval_every > 0 and (
            done_iter % config.eval_every == 0 or done_iter == config.ppo.total_iterations
        ):
            result = evaluate(config, state.policies)
            _append_eval(config, f"iter_{done_iter}", result, config.eval_episodes)

    if config.output_dir:
        save_run_checkpoint(Path(config.output_dir) / "checkpoints" / "final", config, state)
        _write_summary(config, history, state)
    return history


def saturation_iteration(mean_rewards: list[float], window: int = 50) -> int | None:
    """First iteration whose trailing moving average reaches 95% of the final one.

    Own metric: the trailing window is min(window, t+1) wide; None when the run
    never stabilizes (fewer than two iterations or a non-positive final level).
    """
    if len(mean_rewards) < 2:
        return None
    arr = np.asarray(mean_rewards, dtype=np.float64)
    ma = np.array([arr[max(0, t - window + 1) : t + 1].mean() for t in range(len(arr))])
    target = 0.95 * ma[-1]
    if ma[-1] <= 0:
        return None
    hits = np.flatnonzero(ma >= target)
    return int(hits[0]) if len(hits) else None


def _write_summary(config: RunConfig, history: list[IterationMetrics], state: RunState) -> None:
    rewards = [m.mean_reward for m in history]
    entries = []
    for e in state.policies.trainable_entries():
        classical, quantum = e.net.count_parameters()
        entries.append(
            {
                "name": e.name,
                "owned_agents": list(e.owned_agents),
                "classical_params": classical,
                "quantum_params": quantum,
            }
        )
    summary = {
        "strategy": config.strategy.kind,
        "iterations_run": len(history),
        "final_mean_reward": rewards[-1] if rewards else None,
        "saturation_iteration": saturation_iteration(rewards),
        "saturation_definition": (
            "own metric: first iteration where the 50-iteration moving average of "
            "mean_reward reaches 95% of its final value"
        ),
        "parameter_counts": entries,
        "joint_log_prob": (
            "sum of per-agent log probabilities (exact product factorization)"
            if config.strategy.kind == INDEPENDENT
            else config.strategy.kind
        ),
        "total_wall_time_s": float(sum(m.wall_time_s for m in history)),
    }
    (Path(config.output_dir) / "run_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
