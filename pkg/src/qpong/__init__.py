"""Distributed multi-agent reinforcement learning with hybrid quantum-classical policies.

Subpackages:
  qsim        statevector simulation of the variational circuits and their gradients
  policy      hybrid quantum-classical and CNN actor-critic networks, manual backprop
  pong        the deterministic two-paddle cooperative environment
  ppo         advantage estimation, clipped-surrogate loss, Adam
  strategies  joint / shared / independent policy-distribution plans
  runtime     rollout workers, training loop, metrics, checkpoints
  cli         the `qpong` command (train / eval / inspect / plot)
"""

__version__ = "0.1.0"

from .policy import ModelSpec, PolicyNetwork, PolicyOutput, sample_action
from .pong import CoopPong, EnvConfig
from .ppo import PPOConfig, Trajectory
from .qsim import AnsatzConfig, GateOp, StateVector, new_state, run_vqc
from .runtime import RunConfig, evaluate, train
from .strategies import PolicySet, StrategySpec, act, make_policies, route_experience

__all__ = [
    "AnsatzConfig", "CoopPong", "EnvConfig", "GateOp", "ModelSpec", "PPOConfig",
    "PolicyNetwork", "PolicyOutput", "PolicySet", "RunConfig", "StateVector",
    "StrategySpec", "Trajectory", "act", "evaluate", "make_policies", "new_state",
    "route_experience", "run_vqc", "sample_action", "train",
]
