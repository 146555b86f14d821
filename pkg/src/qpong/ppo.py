"""Clipped-surrogate policy optimization: advantage estimation, loss, Adam.

The learner minimizes

    total = -mean(min(ratio*A, clip(ratio, 1-eps, 1+eps)*A))
            + vf_coef * mean((V - returns)^2)
            - entropy_coef * mean(entropy)
            + kl_coef * mean(KL(pi_old || pi_new))

with ratio = exp(logpi_new - logpi_old), i.e. gradient descent on -J plus the
penalty terms. Gradients reach the networks through hand-derived upstream
gradients w.r.t. logits and value, then PolicyNetwork.backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import PolicyNetwork, log_softmax, softmax


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.95
    clip_eps: float = 0.3
    lr: float = 1e-4
    gae_lambda: float = 0.95
    vf_coef: float = 1.0
    entropy_coef: float = 0.5
    kl_coef: float = 0.2
    batch_size: int = 512
    epochs_per_iter: int = 4
    total_iterations: int = 15000
    normalize_advantages: bool = True
    max_grad_norm: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.clip_eps <= 0.0:
            raise ValueError("clip_eps must be > 0")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        for name in ("vf_coef", "entropy_coef", "kl_coef"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")
        if self.lr <= 0.0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.epochs_per_iter < 1 or self.total_iterations < 1:
            raise ValueError("batch_size, epochs_per_iter and total_iterations must be >= 1")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma, "clip_eps": self.clip_eps, "lr": self.lr,
            "gae_lambda": self.gae_lambda, "vf_coef": self.vf_coef,
            "entropy_coef": self.entropy_coef, "kl_coef": self.kl_coef,
            "batch_size": self.batch_size, "epochs_per_iter": self.epochs_per_iter,
            "total_iterations": self.total_iterations,
            "normalize_advantages": self.normalize_advantages,
            "max_grad_norm": self.max_grad_norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        return cls(**d)


@dataclass
class Trajectory:
    """One (possibly truncated) episode of a single learner stream.

    ``dones`` may contain at most one True, and only at the final step;
    ``bootstrap_value`` is the critic's estimate past the truncation point and
    is ignored when the trajectory ends in a terminal step.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs_old: np.ndarray
    value_preds: np.ndarray
    dones: np.ndarray
    bootstrap_value: float = 0.0
    probs_old: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    def validate(self) -> None:
        T = len(self.rewards)
        if T == 0:
            raise ValueError("empty trajectory")
        for name in ("actions", "log_probs_old", "value_preds", "dones"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"{name} length does not match rewards")
        if np.any(np.asarray(self.log_probs_old) > 0.0):
            raise ValueError("log probabilities must be <= 0")
        done_idx = np.flatnonzero(self.dones)
        if len(done_idx) > 1 or (len(done_idx) == 1 and done_idx[0] != T - 1):
            raise ValueError("at most one done, and only at the final step")


@dataclass
class AdvantageBatch:
    advantages: np.ndarray
    returns: np.ndarray
    normalized: bool = False


def gae_advantages(rewards, values, dones, bootstrap: float, cfg: PPOConfig):
    """Core recursion over raw arrays; returns (advantages, value targets).

    delta_t = r_t + gamma*V_{t+1}*(1-done_t) - V_t
    A_t     = delta_t + gamma*lambda*(1-done_t)*A_{t+1}
    returns_t = A_t + V_t, the regression target for the value head.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    nonterminal = 1.0 - np.asarray(dones, dtype=np.float64)
    T = len(rewards)
    advantages = np.zeros(T)
    running = 0.0
    for t in reversed(range(T)):
        next_value = bootstrap if t == T - 1 else values[t + 1]
        delta = rewards[t] + cfg.gamma * next_value * nonterminal[t] - values[t]
        running = delta + cfg.gamma * cfg.gae_lambda * nonterminal[t] * running
        advantages[t] = running
    return advantages, advantages + values


def compute_gae(traj: Trajectory, cfg: PPOConfig) -> AdvantageBatch:
    """Exponentially weighted advantage estimate over one trajectory."""
    traj.validate()
    advantages, returns = gae_advantages(
        traj.rewards, traj.value_preds, traj.dones, traj.bootstrap_value, cfg
    )
    return AdvantageBatch(advantages=advantages, returns=returns)


def normalize_advantages(batch: AdvantageBatch) -> AdvantageBatch:
    """Center and scale to unit variance; exact division so std lands on 1.0."""
    adv = batch.advantages
    centered = adv - adv.mean()
    std = centered.std()
    if std > 1e-12:
        centered = centered / std
    return AdvantageBatch(advantages=centered, returns=batch.returns, normalized=True)


def clipped_surrogate(ratio, advantage, eps: float):
    """min(ratio*A, clip(ratio, 1-eps, 1+eps)*A); never exceeds ratio*A."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


@dataclass
class TrainBatch:
    """Flattened minibatch for one gradient step."""

    obs: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    probs_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def _entropy_terms(logp: np.ndarray, probs: np.ndarray) -> np.ndarray:
    terms = np.where(probs > 0.0, probs * logp, 0.0)
    return -terms.sum(axis=1)


def _stats(net: PolicyNetwork, params: np.ndarray, batch: TrainBatch):
    logits, values, cache = net.forward_batch(params, batch.obs)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    idx = np.arange(len(batch))
    logp_taken = logp_all[idx, batch.actions]
    ratio = np.exp(logp_taken - batch.log_probs_old)
    entropy = _entropy_terms(logp_all, probs)
    old = batch.probs_old
    kl = np.sum(np.where(old > 0.0, old * (np.log(np.where(old > 0.0, old, 1.0)) - logp_all), 0.0), axis=1)
    return logits, values, cache, probs, logp_all, ratio, entropy, kl


def _loss_components(values, ratio, entropy, kl, batch: TrainBatch, cfg: PPOConfig):
    policy_term = -float(np.mean(clipped_surrogate(ratio, batch.advantages, cfg.clip_eps)))
    value_term = float(np.mean((values - batch.returns) ** 2))
    entropy_term = float(np.mean(entropy))
    kl_term = float(np.mean(kl))
    total = (
        policy_term
        + cfg.vf_coef * value_term
        - cfg.entropy_coef * entropy_term
        + cfg.kl_coef * kl_term
    )
    components = {
        "policy": policy_term,
        "value": value_term,
        "entropy": entropy_term,
        "kl": kl_term,
    }
    return total, components


def ppo_loss(net: PolicyNetwork, params: np.ndarray, batch: TrainBatch, cfg: PPOConfig):
    """Total loss and its components on one batch (no gradient)."""
    _, values, _, _, _, ratio, entropy, kl = _stats(net, params, batch)
    total, components = _loss_components(values, ratio, entropy, kl, batch, cfg)
    if not np.isfinite(total):
        raise RuntimeError(f"non-finite loss: {components}")
    return total, components


def ppo_loss_and_grad(net: PolicyNetwork, params: np.ndarray, batch: TrainBatch, cfg: PPOConfig):
    """Loss, components, and the exact gradient w.r.t. the flat parameters."""
    logits, values, cache, probs, logp_all, ratio, entropy, kl = _stats(net, params, batch)
    total, components = _loss_components(values, ratio, entropy, kl, batch, cfg)
    if not np.isfinite(total):
        raise RuntimeError(f"non-finite loss: {components}")

    B = len(batch)
    adv = batch.advantages
    # the unclipped branch carries gradient unless the ratio is outside the
    # clip window on the side where clipping binds
    active = np.where(adv >= 0.0, ratio <= 1.0 + cfg.clip_eps, ratio >= 1.0 - cfg.clip_eps)
    dl_dlogp_taken = -(adv * ratio * active) / B

    onehot = np.zeros_like(probs)
    onehot[np.arange(B), batch.actions] = 1.0
    up_logits = dl_dlogp_taken[:, None] * (onehot - probs)
    # entropy bonus: d(-c*H)/dlogits = c * p * (logp + H)
    up_logits += cfg.entropy_coef / B * probs * (logp_all + entropy[:, None])
    # KL penalty: dKL/dlogits = p_new - p_old
    up_logits += cfg.kl_coef / B * (probs - batch.probs_old)

    up_value = cfg.vf_coef * 2.0 * (values - batch.returns) / B
    grad = net.backward(cache, up_logits, up_value)
    return total, components, grad


def value_loss_and_grad(
    net: PolicyNetwork, params: np.ndarray, obs: np.ndarray, returns: np.ndarray, cfg: PPOConfig
):
    """Standalone critic regression, used by the centralized-critic strategy."""
    _, values, cache = net.forward_batch(params, obs)
    loss = cfg.vf_coef * float(np.mean((values - returns) ** 2))
    if not np.isfinite(loss):
        raise RuntimeError("non-finite value loss")
    up_value = cfg.vf_coef * 2.0 * (values - returns) / len(returns)
    return loss, net.backward(cache, None, up_value)


def clip_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if max_norm > 0.0 and norm > max_norm:
        return grad * (max_norm / norm)
    return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), step=0)


def adam_update(
    params: np.ndarray, grad: np.ndarray, state: AdamState, cfg: PPOConfig
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step descending on the loss gradient."""
    if grad.shape != params.shape:
        raise ValueError("gradient layout does not match parameters")
    if not np.all(np.isfinite(grad)):
        raise RuntimeError("non-finite gradient: aborting update")
    step = state.step + 1
    m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grad
    v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grad**2
    m_hat = m / (1.0 - cfg.adam_beta1**step)
    v_hat = v / (1.0 - cfg.adam_beta2**step)
    new_params = params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return new_params, AdamState(m=m, v=v, step=step)
