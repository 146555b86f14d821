"""Policy-ownership and experience-routing plans for the two-agent game.

Three strategies:

* ``joint`` -- one policy over the full frame with a 9-way head (both paddles'
  moves encoded as one mixed-radix action).
* ``independent`` -- one policy per agent, trained only on its own half-frame
  observation, action and reward; the joint policy factorizes as the product of
  the locals, so the reported joint log-probability is the exact sum of the
  per-agent log-probabilities.
* ``shared`` -- both agents act through one shared parameter set on their own
  half frames, while a centralized critic reads both observations side by side
  and supplies the value estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .policy import ModelSpec, PolicyNetwork, sample_action, softmax
from .ppo import Trajectory

JOINT = "joint"
SHARED = "shared"
INDEPENDENT = "independent"
STRATEGY_KINDS = (JOINT, SHARED, INDEPENDENT)

ACTION_VALUES = (-1, 0, 1)
N_AGENT_ACTIONS = len(ACTION_VALUES)


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    n_agents: int = 2

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"strategy must be one of {STRATEGY_KINDS}")
        if self.n_agents != 2:
            raise ValueError("exactly two agents are supported")

    @property
    def n_policy_actions(self) -> int:
        return N_AGENT_ACTIONS**self.n_agents if self.kind == JOINT else N_AGENT_ACTIONS


def encode_joint_action(idx0: int, idx1: int) -> int:
    return N_AGENT_ACTIONS * idx0 + idx1


def decode_joint_action(k: int) -> tuple[int, int]:
    if not 0 <= k < N_AGENT_ACTIONS**2:
        raise ValueError(f"joint action index {k} out of range")
    return k // N_AGENT_ACTIONS, k % N_AGENT_ACTIONS


@dataclass
class PolicyEntry:
    """One trainable parameter vector and the agents it acts for."""

    name: str
    net: PolicyNetwork
    params: np.ndarray
    owned_agents: tuple[int, ...]


@dataclass
class PolicySet:
    strategy: StrategySpec
    actors: list[PolicyEntry]
    critic: PolicyEntry | None = None

    def __post_init__(self):
        owned = [a for e in self.actors for a in e.owned_agents]
        if sorted(owned) != list(range(self.strategy.n_agents)):
            raise ValueError(f"agents must be owned exactly once, got {owned}")

    def entry_for_agent(self, agent: int) -> PolicyEntry:
        for entry in self.actors:
            if agent in entry.owned_agents:
                return entry
        raise KeyError(agent)

    def trainable_entries(self) -> list[PolicyEntry]:
        return self.actors + ([self.critic] if self.critic is not None else [])


def _init_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0xA11, stream])


def make_policies(strategy: StrategySpec, model: ModelSpec, seed: int = 0) -> PolicySet:
    """Construct and initialize the parameter sets a strategy owns."""
    if model.n_actions != strategy.n_policy_actions:
        raise ValueError(
            f"{strategy.kind} strategy needs {strategy.n_policy_actions} actions, "
            f"model has {model.n_actions}"
        )
    if strategy.kind == INDEPENDENT:
        actors = []
        for agent in range(strategy.n_agents):
            net = PolicyNetwork(model)
            actors.append(
                PolicyEntry(f"agent{agent}", net, net.init_params(_init_rng(seed, agent)), (agent,))
            )
        return PolicySet(strategy, actors)
    if strategy.kind == JOINT:
        net = PolicyNetwork(model)
        entry = PolicyEntry("joint", net, net.init_params(_init_rng(seed, 0)), (0, 1))
        return PolicySet(strategy, [entry])
    # shared: one actor parameter vector serving both agents + centralized critic
    net = PolicyNetwork(model)
    actor = PolicyEntry("shared_actor", net, net.init_params(_init_rng(seed, 0)), (0, 1))
    h, w = model.obs_shape
    critic_spec = ModelSpec(
        kind=model.kind,
        obs_shape=(h, 2 * w),
        n_actions=model.n_actions,
        ansatz=model.ansatz,
        n_hybrid_layers=model.n_hybrid_layers,
        hidden_dims=model.hidden_dims,
    )
    critic_net = PolicyNetwork(critic_spec, value_only=True)
    critic = PolicyEntry("shared_critic", critic_net, critic_net.init_params(_init_rng(seed, 1)), ())
    return PolicySet(strategy, [actor], critic=critic)


@dataclass
class ActResult:
    """Everything a rollout worker records about one decision point."""

    env_actions: tuple[int, int]
    stream_actions: tuple[int, ...]
    stream_log_probs: tuple[float, ...]
    stream_probs: tuple[np.ndarray, ...]
    values: tuple[float, ...]
    joint_log_prob: float


def full_frame(obs0: np.ndarray, obs1: np.ndarray) -> np.ndarray:
    """The two half-frame observations side by side (left | right).

    Works on single grids and on (T, H, W) stacks alike.
    """
    return np.concatenate([obs0, obs1], axis=-1)


def act(
    policies: PolicySet,
    observations: tuple[np.ndarray, np.ndarray],
    rng: np.random.Generator,
    greedy: bool = False,
) -> ActResult:
    obs0, obs1 = observations
    kind = policies.strategy.kind
    if kind == JOINT:
        entry = policies.actors[0]
        out = entry.net.forward(entry.params, full_frame(obs0, obs1))
        k, logp = sample_action(out, rng, greedy=greedy)
        i0, i1 = decode_joint_action(k)
        return ActResult(
            env_actions=(ACTION_VALUES[i0], ACTION_VALUES[i1]),
            stream_actions=(k,),
            stream_log_probs=(logp,),
            stream_probs=(softmax(out.logits),),
            values=(out.value,),
            joint_log_prob=logp,
        )

    actions, logps, probs, values = [], [], [], []
    for agent, obs in enumerate((obs0, obs1)):
        entry = policies.entry_for_agent(agent)
        out = entry.net.forward(entry.params, obs)
        a, logp = sample_action(out, rng, greedy=greedy)
        actions.append(a)
        logps.append(logp)
        probs.append(softmax(out.logits))
        values.append(out.value)

    if kind == SHARED:
        critic = policies.critic
        central = critic.net.forward(critic.params, full_frame(obs0, obs1))
        values = [central.value]

    return ActResult(
        env_actions=(ACTION_VALUES[actions[0]], ACTION_VALUES[actions[1]]),
        stream_actions=tuple(actions),
        stream_log_probs=tuple(logps),
        stream_probs=tuple(probs),
        values=tuple(values),
        joint_log_prob=logps[0] + logps[1],
    )


def bootstrap_values(
    policies: PolicySet, observations: tuple[np.ndarray, np.ndarray]
) -> np.ndarray:
    """Critic estimates used past a truncated rollout tail."""
    obs0, obs1 = observations
    kind = policies.strategy.kind
    if kind == JOINT:
        entry = policies.actors[0]
        return np.array([entry.net.forward(entry.params, full_frame(obs0, obs1)).value])
    if kind == SHARED:
        critic = policies.critic
        return np.array([critic.net.forward(critic.params, full_frame(obs0, obs1)).value])
    return np.array(
        [
            policies.entry_for_agent(agent).net.forward(
                policies.entry_for_agent(agent).params, obs
            ).value
            for agent, obs in enumerate((obs0, obs1))
        ]
    )


@dataclass
class RolloutSegment:
    """One worker's fixed-length slice of experience (may span episodes)."""

    obs0: np.ndarray
    obs1: np.ndarray
    stream_actions: np.ndarray
    stream_log_probs: np.ndarray
    stream_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray
    episode_returns: list[float] = field(default_factory=list)
    episode_lengths: list[int] = field(default_factory=list)
    # truncated tail, for metric fallback when nothing completed this iteration
    partial_return: float = 0.0
    partial_length: int = 0

    def __len__(self) -> int:
        return len(self.dones)


@dataclass
class SharedTrajectory:
    """Both agents' streams over one episode plus the centralized critic view."""

    obs0: np.ndarray
    obs1: np.ndarray
    actions: np.ndarray  # (T, 2)
    log_probs: np.ndarray  # (T, 2)
    probs: np.ndarray  # (T, 2, A)
    rewards: np.ndarray  # (T,)
    values: np.ndarray  # (T,) centralized
    dones: np.ndarray
    bootstrap_value: float = 0.0

    def __len__(self) -> int:
        return len(self.rewards)


def _episode_slices(dones: np.ndarray) -> list[tuple[int, int]]:
    bounds = list(np.flatnonzero(dones) + 1)
    if not bounds or bounds[-1] != len(dones):
        bounds.append(len(dones))
    out, start = [], 0
    for end in bounds:
        out.append((start, end))
        start = end
    return out


def route_experience(strategy: StrategySpec, segments: list[RolloutSegment]) -> dict:
    """Split worker segments into per-learner episode trajectories.

    Independent: learner i sees (s_i, a_i, r_i). Joint: a single learner sees the
    full frame and the 9-way action. Shared: one learner receives both agents'
    streams with value targets from the centralized critic.
    """
    routed: dict[str, list] = {}
    if strategy.kind == INDEPENDENT:
        routed = {"agent0": [], "agent1": []}
        for seg in segments:
            for start, end in _episode_slices(seg.dones):
                truncated = not seg.dones[end - 1]
                for agent, obs in ((0, seg.obs0), (1, seg.obs1)):
                    routed[f"agent{agent}"].append(
                        Trajectory(
                            obs=obs[start:end],
                            actions=seg.stream_actions[start:end, agent],
                            rewards=seg.rewards[start:end, agent],
                            log_probs_old=seg.stream_log_probs[start:end, agent],
                            value_preds=seg.values[start:end, agent],
                            dones=seg.dones[start:end],
                            bootstrap_value=float(seg.bootstrap[agent]) if truncated else 0.0,
                            probs_old=seg.stream_probs[start:end, agent],
                        )
                    )
        return routed
    if strategy.kind == JOINT:
        routed = {"joint": []}
        for seg in segments:
            frames = full_frame(seg.obs0, seg.obs1)
            for start, end in _episode_slices(seg.dones):
                truncated = not seg.dones[end - 1]
                routed["joint"].append(
                    Trajectory(
                        obs=frames[start:end],
                        actions=seg.stream_actions[start:end, 0],
                        rewards=seg.rewards[start:end, 0],
                        log_probs_old=seg.stream_log_probs[start:end, 0],
                        value_preds=seg.values[start:end, 0],
                        dones=seg.dones[start:end],
                        bootstrap_value=float(seg.bootstrap[0]) if truncated else 0.0,
                        probs_old=seg.stream_probs[start:end, 0],
                    )
                )
        return routed
    routed = {"shared": []}
    for seg in segments:
        for start, end in _episode_slices(seg.dones):
            truncated = not seg.dones[end - 1]
            routed["shared"].append(
                SharedTrajectory(
                    obs0=seg.obs0[start:end],
                    obs1=seg.obs1[start:end],
                    actions=seg.stream_actions[start:end],
                    log_probs=seg.stream_log_probs[start:end],
                    probs=seg.stream_probs[start:end],
                    rewards=seg.rewards[start:end, 0],
                    values=seg.values[start:end, 0],
                    dones=seg.dones[start:end],
                    bootstrap_value=float(seg.bootstrap[0]) if truncated else 0.0,
                )
            )
    return routed
