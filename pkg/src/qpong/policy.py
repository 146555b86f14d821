"""Actor-critic function approximators with fully analytic backpropagation.

Two trunk families share one flat-parameter representation:

* ``quantum`` — a stack of hybrid blocks, each
  flatten -> linear(-> n_qubits) -> pi*tanh -> VQC -> relu -> linear -> relu.
  Gradients flow through the circuits via the parameter-shift rule (both the
  trainable angles and the encoding inputs).
* ``classical`` — two conv/relu layers, a dense layer, same heads.

Both end in a policy head (logits) and a value head sharing the trunk. All
parameters live in one float64 vector described by a ParamLayout, which is what
the optimizer and the checkpoint format operate on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import qsim
from .qsim import AnsatzConfig

CLASSICAL = "classical"
QUANTUM = "quantum"

# Baseline CNN stack: (channels, kernel, stride) per conv layer.
CONV_STACK = ((4, 4, 2), (8, 3, 2))


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; hashable and JSON round-trippable."""

    kind: str
    obs_shape: tuple[int, int]
    n_actions: int
    ansatz: AnsatzConfig | None = None
    n_hybrid_layers: int = 3
    hidden_dims: tuple[int, ...] = (32, 32, 32)

    def __post_init__(self):
        if self.kind not in (CLASSICAL, QUANTUM):
            raise ValueError(f"model kind must be {CLASSICAL!r} or {QUANTUM!r}")
        if self.n_actions < 2:
            raise ValueError("n_actions must be >= 2")
        if len(self.obs_shape) != 2 or min(self.obs_shape) < 1:
            raise ValueError(f"bad obs_shape {self.obs_shape}")
        object.__setattr__(self, "obs_shape", tuple(int(d) for d in self.obs_shape))
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.kind == QUANTUM:
            if self.ansatz is None:
                raise ValueError("quantum model requires an ansatz config")
            if self.n_hybrid_layers < 1:
                raise ValueError("n_hybrid_layers must be >= 1")
            if len(self.hidden_dims) != self.n_hybrid_layers:
                raise ValueError("need one hidden dim per hybrid layer")
        elif not self.hidden_dims:
            raise ValueError("classical model needs at least one hidden dim")

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "obs_shape": list(self.obs_shape),
            "n_actions": self.n_actions,
            "n_hybrid_layers": self.n_hybrid_layers,
            "hidden_dims": list(self.hidden_dims),
            "ansatz": None,
        }
        if self.ansatz is not None:
            d["ansatz"] = {
                "n_qubits": self.ansatz.n_qubits,
                "n_layers": self.ansatz.n_layers,
                "entanglement": self.ansatz.entanglement,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        ansatz = AnsatzConfig(**d["ansatz"]) if d.get("ansatz") else None
        return cls(
            kind=d["kind"],
            obs_shape=tuple(d["obs_shape"]),
            n_actions=int(d["n_actions"]),
            ansatz=ansatz,
            n_hybrid_layers=int(d.get("n_hybrid_layers", 3)),
            hidden_dims=tuple(d.get("hidden_dims", (32, 32, 32))),
        )


@dataclass
class PolicyOutput:
    logits: np.ndarray
    value: float


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int
    kind: str  # "classical" or "quantum"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamLayout:
    """Maps named tensors to disjoint, exhaustive slices of one flat vector."""

    def __init__(self, entries: list[LayoutEntry]):
        self.entries = entries
        self.total = sum(e.size for e in entries)
        self._by_name = {e.name: e for e in entries}

    def view(self, params: np.ndarray, name: str) -> np.ndarray:
        e = self._by_name[name]
        return params[e.offset : e.offset + e.size].reshape(e.shape)

    def counts(self) -> tuple[int, int]:
        classical = sum(e.size for e in self.entries if e.kind == "classical")
        quantum = sum(e.size for e in self.entries if e.kind == "quantum")
        return classical, quantum


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def sample_action(
    output: PolicyOutput, rng: np.random.Generator, greedy: bool = False
) -> tuple[int, float]:
    """Draw an action from softmax(logits); greedy picks the argmax instead."""
    if not np.all(np.isfinite(output.logits)):
        raise ValueError("non-finite logits")
    logp = log_softmax(output.logits)
    if greedy:
        action = int(np.argmax(output.logits))
    else:
        action = int(rng.choice(len(logp), p=np.exp(logp)))
    return action, float(logp[action])


def _conv_out(size: int, kernel: int, stride: int) -> int:
    out = (size - kernel) // stride + 1
    if out < 1:
        raise ValueError(f"observation dimension {size} too small for the conv stack")
    return out


def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # x: (B, H, W, C) -> (B, OH*OW, kernel*kernel*C), patch order (kh, kw, c)
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, OH, OW, C, kh, kw)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    b, oh, ow = win.shape[:3]
    return np.ascontiguousarray(win).reshape(b, oh * ow, kernel * kernel * x.shape[3])


def _col2im(dcols: np.ndarray, x_shape: tuple, kernel: int, stride: int, oh: int, ow: int) -> np.ndarray:
    dx = np.zeros(x_shape)
    dcols = dcols.reshape(x_shape[0], oh, ow, kernel, kernel, x_shape[3])
    for kh in range(kernel):
        for kw in range(kernel):
            hs = slice(kh, kh + (oh - 1) * stride + 1, stride)
            ws = slice(kw, kw + (ow - 1) * stride + 1, stride)
            dx[:, hs, ws, :] += dcols[:, :, :, kh, kw, :]
    return dx


class PolicyNetwork:
    """Feed-forward actor-critic over one flat parameter vector.

    ``forward_batch`` returns an explicit cache object; ``backward`` consumes it.
    Nothing is stored on the instance, so a single network object can serve many
    concurrent rollout workers against an immutable parameter snapshot.
    """

    def __init__(self, spec: ModelSpec, value_only: bool = False):
        self.spec = spec
        self.value_only = value_only
        self.layout = self._build_layout()

    # -- layout ----------------------------------------------------------

    def _build_layout(self) -> ParamLayout:
        entries: list[LayoutEntry] = []
        offset = 0

        def add(name, shape, kind="classical"):
            nonlocal offset
            entries.append(LayoutEntry(name, tuple(shape), offset, kind))
            offset += int(np.prod(shape))

        h, w = self.spec.obs_shape
        if self.spec.kind == QUANTUM:
            nq = self.spec.ansatz.n_qubits
            in_dim = h * w
            for i in range(self.spec.n_hybrid_layers):
                add(f"block{i}.w", (in_dim, nq))
                add(f"block{i}.b", (nq,))
                add(f"block{i}.theta", (self.spec.ansatz.n_params,), kind="quantum")
                hidden = self.spec.hidden_dims[i]
                add(f"block{i}.v", (nq, hidden))
                add(f"block{i}.c", (hidden,))
                in_dim = hidden
            trunk_out = in_dim
        else:
            cin = 1
            oh, ow = h, w
            for i, (cout, kernel, stride) in enumerate(CONV_STACK):
                oh = _conv_out(oh, kernel, stride)
                ow = _conv_out(ow, kernel, stride)
                add(f"conv{i}.w", (kernel, kernel, cin, cout))
                add(f"conv{i}.b", (cout,))
                cin = cout
            hidden = self.spec.hidden_dims[-1]
            add("dense.w", (oh * ow * cin, hidden))
            add("dense.b", (hidden,))
            trunk_out = hidden
        if not self.value_only:
            add("pi.w", (trunk_out, self.spec.n_actions))
            add("pi.b", (self.spec.n_actions,))
        add("vf.w", (trunk_out, 1))
        add("vf.b", (1,))
        return ParamLayout(entries)

    @property
    def n_params(self) -> int:
        return self.layout.total

    def count_parameters(self) -> tuple[int, int]:
        """(classical, quantum) parameter counts, exact from the layout."""
        return self.layout.counts()

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        params = np.zeros(self.layout.total)
        for e in self.layout.entries:
            view = self.layout.view(params, e.name)
            if e.kind == "quantum":
                view[...] = rng.normal(0.0, 0.1, e.shape)
            elif e.name.endswith(".b") or e.name.endswith(".c"):
                pass  # biases start at zero
            else:
                fan_in = int(np.prod(e.shape[:-1]))
                bound = 1.0 / np.sqrt(fan_in)
                view[...] = rng.uniform(-bound, bound, e.shape)
        return params

    # -- forward / backward ----------------------------------------------

    def _check_obs(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 2:
            obs = obs[None]
        if obs.ndim != 3 or obs.shape[1:] != self.spec.obs_shape:
            raise ValueError(
                f"observation shape {obs.shape[1:]} does not match {self.spec.obs_shape}"
            )
        if not np.all(np.isfinite(obs)):
            raise ValueError("non-finite values in observation")
        return obs

    def forward(self, params: np.ndarray, obs: np.ndarray) -> PolicyOutput:
        """Single-observation forward pass; deterministic in (params, obs)."""
        logits, values, _ = self.forward_batch(params, obs)
        if self.value_only:
            return PolicyOutput(logits=None, value=float(values[0]))
        return PolicyOutput(logits=logits[0], value=float(values[0]))

    def forward_batch(self, params: np.ndarray, obs: np.ndarray):
        """Returns (logits (B, A) or None, values (B,), cache for backward)."""
        obs = self._check_obs(obs)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.layout.total,):
            raise ValueError(f"expected {self.layout.total} parameters, got {params.shape}")
        cache: dict = {"params": params, "batch": obs.shape[0]}
        if self.spec.kind == QUANTUM:
            x = self._hybrid_forward(params, obs, cache)
        else:
            x = self._cnn_forward(params, obs, cache)
        cache["trunk_out"] = x
        values = (x @ self.layout.view(params, "vf.w"))[:, 0] + self.layout.view(params, "vf.b")[0]
        logits = None
        if not self.value_only:
            logits = x @ self.layout.view(params, "pi.w") + self.layout.view(params, "pi.b")
        return logits, values, cache

    def _hybrid_forward(self, params, obs, cache):
        x = obs.reshape(obs.shape[0], -1)
        blocks = []
        for i in range(self.spec.n_hybrid_layers):
            w = self.layout.view(params, f"block{i}.w")
            b = self.layout.view(params, f"block{i}.b")
            theta = self.layout.view(params, f"block{i}.theta")
            v = self.layout.view(params, f"block{i}.v")
            c = self.layout.view(params, f"block{i}.c")
            z = x @ w + b
            t = np.tanh(z)
            angles = np.pi * t
            q = qsim.run_vqc(angles, theta, self.spec.ansatz)
            r = _relu(q)
            s = r @ v + c
            blocks.append({"x": x, "t": t, "angles": angles, "q": q, "r": r, "s": s})
            x = _relu(s)
        cache["blocks"] = blocks
        return x

    def _cnn_forward(self, params, obs, cache):
        x = obs[..., None]
        convs = []
        for i, (cout, kernel, stride) in enumerate(CONV_STACK):
            w = self.layout.view(params, f"conv{i}.w")
            b = self.layout.view(params, f"conv{i}.b")
            oh = _conv_out(x.shape[1], kernel, stride)
            ow = _conv_out(x.shape[2], kernel, stride)
            cols = _im2col(x, kernel, stride)
            pre = cols @ w.reshape(-1, cout) + b
            pre = pre.reshape(x.shape[0], oh, ow, cout)
            convs.append({"x_shape": x.shape, "cols": cols, "pre": pre, "oh": oh, "ow": ow})
            x = _relu(pre)
        flat = x.reshape(x.shape[0], -1)
        dpre = flat @ self.layout.view(params, "dense.w") + self.layout.view(params, "dense.b")
        cache["convs"] = convs
        cache["flat"] = flat
        cache["dense_pre"] = dpre
        return _relu(dpre)

    def backward(self, cache, upstream_logits, upstream_value) -> np.ndarray:
        """Exact gradient of sum_b (upstream_logits_b . logits_b + upstream_value_b * value_b).

        Quantum slices come from the circuit's analytic adjoint sweep (the same
        values as the parameter-shift rule); everything else is the plain chain
        rule over the cached activations.
        """
        if cache is None:
            raise RuntimeError("backward called without a forward cache")
        params = cache["params"]
        batch = cache["batch"]
        grad = np.zeros(self.layout.total)
        x = cache["trunk_out"]

        up_v = np.asarray(upstream_value, dtype=np.float64).reshape(-1)
        if up_v.size == 1 and batch != 1:
            up_v = np.full(batch, up_v[0])
        if up_v.shape != (batch,):
            raise ValueError(f"upstream_value must have {batch} entries")
        self.layout.view(grad, "vf.w")[...] = x.T @ up_v[:, None]
        self.layout.view(grad, "vf.b")[...] = np.sum(up_v)
        g_x = up_v[:, None] * self.layout.view(params, "vf.w")[:, 0][None, :]

        if not self.value_only:
            up_l = np.asarray(upstream_logits, dtype=np.float64)
            if up_l.ndim == 1:
                up_l = up_l[None, :]
            if up_l.shape != (batch, self.spec.n_actions):
                raise ValueError(
                    f"upstream_logits must have shape ({batch}, {self.spec.n_actions})"
                )
            self.layout.view(grad, "pi.w")[...] = x.T @ up_l
            self.layout.view(grad, "pi.b")[...] = up_l.sum(axis=0)
            g_x = g_x + up_l @ self.layout.view(params, "pi.w").T
        elif upstream_logits is not None:
            raise ValueError("value-only network takes no logits gradient")

        if self.spec.kind == QUANTUM:
            self._hybrid_backward(cache, g_x, grad)
        else:
            self._cnn_backward(cache, g_x, grad)
        return grad

    def _hybrid_backward(self, cache, g_x, grad):
        params = cache["params"]
        for i in reversed(range(self.spec.n_hybrid_layers)):
            blk = cache["blocks"][i]
            g_s = g_x * (blk["s"] > 0)
            self.layout.view(grad, f"block{i}.v")[...] = blk["r"].T @ g_s
            self.layout.view(grad, f"block{i}.c")[...] = g_s.sum(axis=0)
            g_r = g_s @ self.layout.view(params, f"block{i}.v").T
            g_q = g_r * (blk["q"] > 0)
            theta = self.layout.view(params, f"block{i}.theta")
            g_theta, g_angles = qsim.adjoint_gradients(
                blk["angles"], theta, self.spec.ansatz, g_q
            )
            self.layout.view(grad, f"block{i}.theta")[...] = g_theta
            g_z = g_angles * np.pi * (1.0 - blk["t"] ** 2)
            self.layout.view(grad, f"block{i}.w")[...] = blk["x"].T @ g_z
            self.layout.view(grad, f"block{i}.b")[...] = g_z.sum(axis=0)
            g_x = g_z @ self.layout.view(params, f"block{i}.w").T

    def _cnn_backward(self, cache, g_x, grad):
        params = cache["params"]
        g_dpre = g_x * (cache["dense_pre"] > 0)
        self.layout.view(grad, "dense.w")[...] = cache["flat"].T @ g_dpre
        self.layout.view(grad, "dense.b")[...] = g_dpre.sum(axis=0)
        g = g_dpre @ self.layout.view(params, "dense.w").T
        last = cache["convs"][-1]
        g = g.reshape(last["pre"].shape)
        for i in reversed(range(len(CONV_STACK))):
            conv = cache["convs"][i]
            cout, kernel, stride = CONV_STACK[i]
            g_pre = g * (conv["pre"] > 0)
            flat_up = g_pre.reshape(g_pre.shape[0], -1, cout)
            w = self.layout.view(params, f"conv{i}.w")
            dw = np.einsum("bpk,bpc->kc", conv["cols"], flat_up)
            self.layout.view(grad, f"conv{i}.w")[...] = dw.reshape(w.shape)
            self.layout.view(grad, f"conv{i}.b")[...] = g_pre.sum(axis=(0, 1, 2))
            if i > 0:
                # relu mask for the layer below is applied at the top of its own pass
                dcols = flat_up @ w.reshape(-1, cout).T
                g = _col2im(dcols, conv["x_shape"], kernel, stride, conv["oh"], conv["ow"])
        # gradient w.r.t. the input image is not needed


CHECKPOINT_VERSION = 1


def save_checkpoint(path, spec: ModelSpec, params: np.ndarray, extras: dict | None = None) -> None:
    """Versioned single-model dump; float64 arrays round-trip bit-exactly."""
    arrays = {"params": np.asarray(params, dtype=np.float64)}
    for key, value in (extras or {}).items():
        arrays[f"extra_{key}"] = np.asarray(value)
    np.savez(
        path,
        format_version=np.int64(CHECKPOINT_VERSION),
        spec_json=np.frombuffer(json.dumps(spec.to_dict()).encode(), dtype=np.uint8),
        **arrays,
    )


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as data:
            version = int(data["format_version"])
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version} in {path}")
            spec = ModelSpec.from_dict(json.loads(bytes(data["spec_json"]).decode()))
            params = data["params"].copy()
            extras = {
                k[len("extra_") :]: data[k].copy() for k in data.files if k.startswith("extra_")
            }
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt checkpoint file {path}: {exc}") from exc
    return spec, params, extras
