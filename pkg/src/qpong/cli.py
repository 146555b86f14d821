"""Command-line entry point: train, eval, inspect and plot subcommands.

Settings resolve in precedence order: built-in defaults, then a flat key=value
config file (--config), then the --desk preset, then explicit flags. The
effective configuration is echoed verbatim into the run manifest so every run
is reproducible from its output directory alone.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, policy, qsim, runtime
from .policy import ModelSpec
from .pong import EnvConfig
from .ppo import PPOConfig
from .runtime import RunConfig, load_run_checkpoint
from .strategies import StrategySpec, make_policies

# defaults for the full-scale setup; --desk swaps in the test-scale preset
DEFAULTS = {
    "strategy": "independent",
    "model": "quantum",
    "entanglement": qsim.STRONG,
    "qubits": 13,
    "layers": 9,
    "n_hybrid_layers": 3,
    "hidden_dim": 32,
    "gamma": 0.95,
    "clip_eps": 0.3,
    "lr": 1e-4,
    "gae_lambda": 0.95,
    "vf_coef": 1.0,
    "entropy_coef": 0.5,
    "kl_coef": 0.2,
    "batch_size": 512,
    "epochs_per_iter": 4,
    "iterations": 15000,
    "workers": 4,
    "steps_per_worker": 256,
    "seed": 0,
    "eval_every": 0,
    "eval_episodes": 100,
    "checkpoint_every": 0,
    "output_dir": None,
    "arena_w": 960,
    "arena_h": 560,
    "paddle_w": 16.0,
    "paddle_h": 120.0,
    "ball_size": 12.0,
    "ball_speed": 10.0,
    "paddle_speed": 12.0,
    "max_cycles": 900,
    "obs_size": 64,
}

DESK_PRESET = {
    "qubits": 4,
    "layers": 2,
    "arena_w": 16,
    "arena_h": 16,
    "paddle_w": 1.0,
    "paddle_h": 5.0,
    "ball_size": 1.0,
    "ball_speed": 1.0,
    "paddle_speed": 1.5,
    "max_cycles": 300,
    "obs_size": 16,
    "iterations": 300,
    "batch_size": 128,
    "workers": 2,
    "steps_per_worker": 330,
    "lr": 4e-3,
    "gamma": 0.98,
    "entropy_coef": 0.02,
    "kl_coef": 0.05,
}

_SCHEMA: dict[str, type] = {
    "strategy": str, "model": str, "entanglement": str,
    "qubits": int, "layers": int, "n_hybrid_layers": int, "hidden_dim": int,
    "gamma": float, "clip_eps": float, "lr": float, "gae_lambda": float,
    "vf_coef": float, "entropy_coef": float, "kl_coef": float,
    "batch_size": int, "epochs_per_iter": int, "iterations": int,
    "workers": int, "steps_per_worker": int, "seed": int,
    "eval_every": int, "eval_episodes": int, "checkpoint_every": int,
    "output_dir": str,
    "arena_w": int, "arena_h": int, "paddle_w": float, "paddle_h": float,
    "ball_size": float, "ball_speed": float, "paddle_speed": float,
    "max_cycles": int, "obs_size": int,
}


def read_config_file(path: str) -> dict:
    """Flat ``key = value`` file; '#' comments; unknown keys are rejected."""
    settings = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            settings[key] = _SCHEMA[key](value)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return settings


def build_run_config(settings: dict) -> RunConfig:
    env = EnvConfig(
        arena_w=settings["arena_w"], arena_h=settings["arena_h"],
        paddle_w=settings["paddle_w"], paddle_h=settings["paddle_h"],
        ball_size=settings["ball_size"], ball_speed=settings["ball_speed"],
        paddle_speed=settings["paddle_speed"], max_cycles=settings["max_cycles"],
        obs_size=settings["obs_size"],
    )
    strategy = StrategySpec(settings["strategy"])
    obs = settings["obs_size"]
    obs_shape = (obs, 2 * obs) if strategy.kind == "joint" else (obs, obs)
    if settings["model"] == "quantum":
        model = ModelSpec(
            kind=policy.QUANTUM,
            obs_shape=obs_shape,
            n_actions=strategy.n_policy_actions,
            ansatz=qsim.AnsatzConfig(settings["qubits"], settings["layers"], settings["entanglement"]),
            n_hybrid_layers=settings["n_hybrid_layers"],
            hidden_dims=(settings["hidden_dim"],) * settings["n_hybrid_layers"],
        )
    elif settings["model"] == "classical":
        model = ModelSpec(
            kind=policy.CLASSICAL,
            obs_shape=obs_shape,
            n_actions=strategy.n_policy_actions,
            hidden_dims=(settings["hidden_dim"],),
        )
    else:
        raise ValueError(f"model must be 'quantum' or 'classical', got {settings['model']!r}")
    ppo = PPOConfig(
        gamma=settings["gamma"], clip_eps=settings["clip_eps"], lr=settings["lr"],
        gae_lambda=settings["gae_lambda"], vf_coef=settings["vf_coef"],
        entropy_coef=settings["entropy_coef"], kl_coef=settings["kl_coef"],
        batch_size=settings["batch_size"], epochs_per_iter=settings["epochs_per_iter"],
        total_iterations=settings["iterations"],
    )
    return RunConfig(
        env=env, strategy=strategy, model=model, ppo=ppo,
        n_workers=settings["workers"],
        steps_per_worker_per_iter=settings["steps_per_worker"],
        seed=settings["seed"], eval_every=settings["eval_every"],
        eval_episodes=settings["eval_episodes"],
        checkpoint_every=settings["checkpoint_every"],
        output_dir=settings["output_dir"],
    )


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="flat key=value settings file")
    p.add_argument("--strategy", choices=["joint", "shared", "independent"])
    p.add_argument("--model", choices=["classical", "quantum"])
    p.add_argument("--entanglement", choices=[qsim.BASIC, qsim.STRONG])
    p.add_argument("--qubits", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--steps-per-worker", type=int, dest="steps_per_worker")
    p.add_argument("--gamma", type=float)
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--episodes", type=int, dest="eval_episodes", help="evaluation episode count")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--desk", action="store_true",
                   help="test-scale preset: 4 qubits, 2 layers, 16x16 arena, 300 max cycles")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpong", description=__doc__)
    parser.add_argument("--version", action="version", version=f"qpong {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    _add_common_flags(p_train)
    p_train.add_argument("--resume", metavar="CHECKPOINT", help="resume from a checkpoint directory")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    _add_common_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint directory to load")

    p_inspect = sub.add_parser("inspect", help="print the model/parameter breakdown")
    _add_common_flags(p_inspect)

    p_plot = sub.add_parser("plot", help="render the learning curve from a metrics CSV")
    _add_common_flags(p_plot)
    p_plot.add_argument("--metrics", metavar="CSV", help="metrics file (default: <output-dir>/metrics.csv)")
    return parser


def parse_and_validate(argv) -> tuple[argparse.Namespace, RunConfig]:
    parser = make_parser()
    args = parser.parse_args(argv)
    settings = dict(DEFAULTS)
    try:
        if args.config:
            settings.update(read_config_file(args.config))
        if args.desk:
            settings.update(DESK_PRESET)
        for key in _SCHEMA:
            flag_value = getattr(args, key, None)
            if flag_value is not None:
                settings[key] = flag_value
        config = build_run_config(settings)
    except (ValueError, OSError) as exc:
        parser.error(str(exc))
    return args, config


# -- subcommands ---------------------------------------------------------------


def moving_average(values: np.ndarray, window: int = 5) -> np.ndarray:
    """Trailing mean: row k averages rows max(0, k-window+1)..k."""
    out = np.empty(len(values))
    for k in range(len(values)):
        out[k] = values[max(0, k - window + 1) : k + 1].mean()
    return out


def write_learning_curve(metrics_csv, out_path, window: int = 5) -> None:
    """Self-contained vector plot: window-5 smoothed mean reward, +-1 std band."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(metrics_csv) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"no metrics rows in {metrics_csv}")
    iters = np.array([int(r["iteration"]) for r in rows])
    mean = moving_average(np.array([float(r["mean_reward"]) for r in rows]), window)
    std = moving_average(np.array([float(r["std_reward"]) for r in rows]), window)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iters, mean, label=f"mean reward (window-{window} moving average)")
    ax.fill_between(iters, mean - std, mean + std, alpha=0.25, label="+-1 std")
    ax.set_xlabel("iteration")
    ax.set_ylabel("reward")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def cmd_train(args, config: RunConfig) -> int:
    total = config.ppo.total_iterations
    log_every = max(1, total // 50)

    def progress(metrics, _state):
        if metrics.iteration % log_every == 0 or metrics.iteration == total - 1:
            print(
                f"iter {metrics.iteration:5d}  reward {metrics.mean_reward:9.5f}  "
                f"ep_len {metrics.mean_episode_len:7.2f}  kl {metrics.kl:8.5f}  "
                f"({metrics.wall_time_s:.2f}s)"
            )

    runtime.train(config, resume_from=args.resume, on_iteration=progress)
    if config.output_dir:
        out = Path(config.output_dir)
        write_learning_curve(out / "metrics.csv", out / "learning_curve.svg")
        print(f"run artifacts in {out}")
    return 0


def cmd_eval(args, config: RunConfig) -> int:
    ckpt = Path(args.checkpoint)
    saved_config, state = load_run_checkpoint(ckpt)
    # environment/strategy/model come from the checkpoint; episode count and
    # seed may be overridden on the command line
    eval_config = saved_config
    if args.eval_episodes is not None or args.seed is not None:
        eval_config = replace(
            saved_config,
            eval_episodes=(
                args.eval_episodes if args.eval_episodes is not None
                else saved_config.eval_episodes
            ),
            seed=args.seed if args.seed is not None else saved_config.seed,
        )
    result = runtime.evaluate(eval_config, state.policies)
    print(
        f"checkpoint {ckpt}: mean_episode_len={result.mean_episode_len!r} "
        f"mean_return={result.mean_return!r} over {eval_config.eval_episodes} episodes"
    )
    report_dir = args.output_dir or (
        ckpt.parent.parent if ckpt.parent.name == "checkpoints" else ckpt
    )
    report = Path(report_dir) / "eval_log.csv"
    if not report.exists():
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text("label,episodes,mean_episode_len,mean_return\n")
    with open(report, "a") as fh:
        fh.write(
            f"{ckpt},{eval_config.eval_episodes},"
            f"{result.mean_episode_len!r},{result.mean_return!r}\n"
        )
    return 0


REFERENCE_VQC_QUOTE = 1170  # headline figure quoted for the 13-qubit, 9-layer setup


def inspect_report(config: RunConfig) -> str:
    policies = make_policies(config.strategy, config.model, seed=config.seed)
    lines = [f"strategy: {config.strategy.kind}"]
    lines.append("agent ownership:")
    for agent in range(config.strategy.n_agents):
        lines.append(f"  agent {agent} -> {policies.entry_for_agent(agent).name}")
    grand_classical = grand_quantum = 0
    for entry in policies.trainable_entries():
        lines.append(f"policy '{entry.name}' ({entry.net.spec.kind}):")
        lines.append(f"  {'layer':<16}{'shape':<16}{'params':>8}  kind")
        for e in entry.net.layout.entries:
            lines.append(f"  {e.name:<16}{str(e.shape):<16}{e.size:>8}  {e.kind}")
        classical, quantum = entry.net.count_parameters()
        grand_classical += classical
        grand_quantum += quantum
        lines.append(f"  subtotal: classical={classical} quantum={quantum}")
    lines.append(f"total: classical={grand_classical} quantum={grand_quantum}")
    model = config.model
    if model.kind == policy.QUANTUM:
        a = model.ansatz
        per_vqc = a.n_params
        lines.append(
            f"per-model VQC parameters: {model.n_hybrid_layers} x ({a.n_qubits} x "
            f"{a.n_layers} x {a.rotations_per_qubit_layer}) = {model.n_hybrid_layers * per_vqc}"
        )
        if a.n_qubits == 13 and a.n_layers == 9:
            lines.append(
                f"note: the 13-qubit x 9-layer setup is sometimes quoted with "
                f"{REFERENCE_VQC_QUOTE} VQC parameters; this ring-entangler layout "
                f"counts {model.n_hybrid_layers * per_vqc} "
                f"({model.n_hybrid_layers} x {per_vqc}), which does not factor to "
                f"{REFERENCE_VQC_QUOTE}."
            )
    return "\n".join(lines)


def cmd_inspect(args, config: RunConfig) -> int:
    print(inspect_report(config))
    return 0


def cmd_plot(args, config: RunConfig) -> int:
    metrics = args.metrics or (config.output_dir and str(Path(config.output_dir) / "metrics.csv"))
    if not metrics:
        print("plot needs --metrics or --output-dir", file=sys.stderr)
        return 1
    out = Path(metrics).with_name("learning_curve.svg")
    write_learning_curve(metrics, out)
    print(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    args, config = parse_and_validate(argv if argv is not None else sys.argv[1:])
    handlers = {"train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect, "plot": cmd_plot}
    try:
        return handlers[args.command](args, config)
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
