"""Statevector simulation of the variational circuits used by the hybrid policies.

Qubit ``i`` corresponds to bit ``i`` of the amplitude index (little-endian), so
basis state ``b`` has qubit ``i`` excited iff ``(b >> i) & 1``. All arithmetic is
64-bit complex; expectations are exact (no shot sampling).

Gate kernels accept an optional leading batch axis on the amplitude array and
broadcast rotation angles per batch element. Gradients come in two flavors with
identical values: the two-point parameter-shift rule (the reference, also the
way encoding inputs are differentiated) and an adjoint sweep that produces the
whole vector-Jacobian product in O(gates) work for minibatch training.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_QUBITS = 24

BASIC = "basic"
STRONG = "strong"

_ROTATIONS = {BASIC: ("rx",), STRONG: ("rx", "rz")}


@dataclass
class StateVector:
    """A pure n-qubit state: 2**n_qubits complex amplitudes with unit norm."""

    n_qubits: int
    amplitudes: np.ndarray

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


@dataclass(frozen=True)
class GateOp:
    """One gate application: rx/rz carry an angle, cnot carries a control."""

    kind: str
    target: int
    control: int | None = None
    angle: float = 0.0

    def __post_init__(self):
        if self.kind not in ("rx", "rz", "cnot"):
            raise ValueError(f"unknown gate kind {self.kind!r}")
        if self.kind == "cnot":
            if self.control is None:
                raise ValueError("cnot requires a control qubit")
            if self.control == self.target:
                raise ValueError("cnot control and target must differ")
        elif self.control is not None:
            raise ValueError(f"{self.kind} takes no control qubit")


@dataclass(frozen=True)
class AnsatzConfig:
    """Shape of the trainable circuit: rotation blocks plus CNOT rings.

    ``basic`` layers use one Rx per qubit and a range-1 ring; ``strong`` layers
    use Rx then Rz per qubit and a ring whose reach cycles through
    1..n_qubits-1 across layers. A single-qubit config emits no ring.
    """

    n_qubits: int
    n_layers: int
    entanglement: str = STRONG

    def __post_init__(self):
        if self.entanglement not in _ROTATIONS:
            raise ValueError(f"entanglement must be one of {sorted(_ROTATIONS)}")
        if self.n_qubits < 1:
            raise ValueError("n_qubits must be >= 1")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")

    @property
    def rotations_per_qubit_layer(self) -> int:
        return len(_ROTATIONS[self.entanglement])

    @property
    def n_params(self) -> int:
        return self.n_qubits * self.n_layers * self.rotations_per_qubit_layer


def new_state(n_qubits: int) -> StateVector:
    """Return |0...0> on ``n_qubits`` wires. Capped at MAX_QUBITS (memory guard)."""
    if not 1 <= n_qubits <= MAX_QUBITS:
        raise ValueError(f"n_qubits must be in [1, {MAX_QUBITS}], got {n_qubits}")
    amps = np.zeros(2**n_qubits, dtype=np.complex128)
    amps[0] = 1.0
    return StateVector(n_qubits, amps)


@lru_cache(maxsize=None)
def _cnot_perm(n_qubits: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(2**n_qubits)
    flipped = np.where((idx >> control) & 1 == 1, idx ^ (1 << target), idx)
    return flipped


@lru_cache(maxsize=None)
def _z_signs(n_qubits: int) -> np.ndarray:
    # signs[i, b] = +1 if bit i of b is 0 else -1
    idx = np.arange(2**n_qubits)
    bits = (idx[None, :] >> np.arange(n_qubits)[:, None]) & 1
    return 1.0 - 2.0 * bits


def _bit_axes(n_qubits: int, qubit: int) -> tuple[int, int]:
    # reshape (..., 2**n) -> (..., hi, 2, lo): bit `qubit` lands on the middle axis
    return 2 ** (n_qubits - 1 - qubit), 2**qubit


def _apply_rx(amps: np.ndarray, n_qubits: int, qubit: int, angle) -> np.ndarray:
    hi, lo = _bit_axes(n_qubits, qubit)
    v = amps.reshape(amps.shape[:-1] + (hi, 2, lo))
    half = np.multiply(angle, 0.5)
    c = np.cos(half)
    s = -1j * np.sin(half)
    if np.ndim(angle) == 1:
        # per-batch angle (used by the encoder): broadcast over (hi, lo)
        c = c[:, None, None]
        s = s[:, None, None]
    a0 = v[..., 0, :].copy()
    a1 = v[..., 1, :]
    v[..., 0, :] = c * a0 + s * a1
    v[..., 1, :] = s * a0 + c * a1
    return amps


def _apply_rz(amps: np.ndarray, n_qubits: int, qubit: int, angle) -> np.ndarray:
    hi, lo = _bit_axes(n_qubits, qubit)
    v = amps.reshape(amps.shape[:-1] + (hi, 2, lo))
    half = np.multiply(angle, 0.5)
    p0 = np.exp(-1j * half)
    p1 = np.exp(1j * half)
    if np.ndim(angle) == 1:
        p0 = p0[:, None, None]
        p1 = p1[:, None, None]
    v[..., 0, :] *= p0
    v[..., 1, :] *= p1
    return amps


def _apply_cnot(amps: np.ndarray, n_qubits: int, control: int, target: int) -> np.ndarray:
    perm = _cnot_perm(n_qubits, control, target)
    amps[...] = amps[..., perm]
    return amps


def apply_gate(state: StateVector, gate: GateOp) -> StateVector:
    """Apply one gate in place; Rx(t)=exp(-i t X/2), Rz(t)=exp(-i t Z/2)."""
    n = state.n_qubits
    if not 0 <= gate.target < n:
        raise IndexError(f"target {gate.target} out of range for {n} qubits")
    if gate.kind == "cnot":
        if not 0 <= gate.control < n:
            raise IndexError(f"control {gate.control} out of range for {n} qubits")
        _apply_cnot(state.amplitudes, n, gate.control, gate.target)
    elif gate.kind == "rx":
        _apply_rx(state.amplitudes, n, gate.target, gate.angle)
    else:
        _apply_rz(state.amplitudes, n, gate.target, gate.angle)
    return state


def apply_gates(state: StateVector, gates) -> StateVector:
    for g in gates:
        apply_gate(state, g)
    return state


def encode_angles(state: StateVector, features: np.ndarray) -> StateVector:
    """Angle encoding: Rx(features[i]) on qubit i. Caller scales into [-pi, pi]."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (state.n_qubits,):
        raise ValueError(
            f"expected {state.n_qubits} encoding angles, got shape {features.shape}"
        )
    for q in range(state.n_qubits):
        _apply_rx(state.amplitudes, state.n_qubits, q, features[q])
    return state


def build_ansatz(config: AnsatzConfig, params: np.ndarray) -> list[GateOp]:
    """Build the trainable gate sequence for ``config``.

    Parameter order is layer-major, then qubit, then rotation kind. Each layer is
    a rotation block followed by a CNOT ring CNOT(i, (i+r) mod n) for all i; the
    ring range is r = (layer mod (n-1)) + 1 for strong entanglement and always 1
    for basic.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (config.n_params,):
        raise ValueError(
            f"ansatz expects {config.n_params} parameters, got shape {params.shape}"
        )
    rotations = _ROTATIONS[config.entanglement]
    n = config.n_qubits
    gates: list[GateOp] = []
    k = 0
    for layer in range(config.n_layers):
        for q in range(n):
            for kind in rotations:
                gates.append(GateOp(kind, q, angle=float(params[k])))
                k += 1
        if n >= 2:
            if config.entanglement == STRONG:
                r = (layer % (n - 1)) + 1
            else:
                r = 1
            for i in range(n):
                gates.append(GateOp("cnot", (i + r) % n, control=i))
    return gates


def expectations_z(state: StateVector) -> np.ndarray:
    """Exact <Z_i> for every qubit; each value lies in [-1, 1]."""
    probs = np.abs(state.amplitudes) ** 2
    return probs @ _z_signs(state.n_qubits).T


def _apply_ansatz(amps: np.ndarray, config: AnsatzConfig, angles) -> None:
    """Apply the ansatz directly from an angle lookup (same order as build_ansatz).

    ``angles[k]`` may be a scalar or a per-row array, which is what lets the
    shift-rule evaluate every displaced circuit in one batched pass.
    """
    n = config.n_qubits
    strong = config.entanglement == STRONG
    k = 0
    for layer in range(config.n_layers):
        for q in range(n):
            _apply_rx(amps, n, q, angles[k])
            k += 1
            if strong:
                _apply_rz(amps, n, q, angles[k])
                k += 1
        if n >= 2:
            r = (layer % (n - 1)) + 1 if strong else 1
            for i in range(n):
                _apply_cnot(amps, n, i, (i + r) % n)


def _vqc_expectations(features: np.ndarray, params: np.ndarray, config: AnsatzConfig) -> np.ndarray:
    """Batched core: features (B, n) -> <Z> (B, n)."""
    n = config.n_qubits
    batch = features.shape[0]
    amps = np.zeros((batch, 2**n), dtype=np.complex128)
    amps[:, 0] = 1.0
    for q in range(n):
        _apply_rx(amps, n, q, features[:, q])
    _apply_ansatz(amps, config, params)
    probs = np.abs(amps) ** 2
    return probs @ _z_signs(n).T


# below this size the circuit is applied as one cached unitary contraction,
# which makes single-observation policy forwards cheap during rollouts
_FAST_PATH_MAX_QUBITS = 8


@lru_cache(maxsize=16)
def _ansatz_transposed_unitary(config: AnsatzConfig, params_bytes: bytes) -> np.ndarray:
    params = np.frombuffer(params_bytes, dtype=np.float64)
    basis = np.eye(2**config.n_qubits, dtype=np.complex128)  # row j becomes U|j>
    _apply_ansatz(basis, config, params)
    return basis


def _encoded_product_state(features: np.ndarray) -> np.ndarray:
    """|psi> after Rx(features[q]) on |0...0>, built as an outer product."""
    half = features * 0.5
    c = np.cos(half)
    s = -1j * np.sin(half)
    batch, n = features.shape
    out = np.ones((batch, 1), dtype=np.complex128)
    for q in reversed(range(n)):
        pair = np.stack([c[:, q], s[:, q]], axis=1)
        out = (out[:, :, None] * pair[:, None, :]).reshape(batch, -1)
    return out


def run_vqc(features: np.ndarray, params: np.ndarray, config: AnsatzConfig) -> np.ndarray:
    """Full circuit evaluation: encode, apply the ansatz, measure <Z> per qubit.

    Pure function of its inputs. ``features`` may be a single vector of length
    n_qubits or a (batch, n_qubits) array; the output matches.
    """
    if config.n_qubits > MAX_QUBITS:
        raise ValueError(f"n_qubits must be <= {MAX_QUBITS}")
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    if single:
        features = features[None, :]
    if features.ndim != 2 or features.shape[1] != config.n_qubits:
        raise ValueError(
            f"expected features with {config.n_qubits} entries, got shape "
            f"{features.shape if not single else features.shape[1:]}"
        )
    params = np.ascontiguousarray(params, dtype=np.float64)
    if config.n_qubits <= _FAST_PATH_MAX_QUBITS:
        if params.shape != (config.n_params,):
            raise ValueError(
                f"ansatz expects {config.n_params} parameters, got shape {params.shape}"
            )
        psi = _encoded_product_state(features) @ _ansatz_transposed_unitary(
            config, params.tobytes()
        )
        out = np.abs(psi) ** 2 @ _z_signs(config.n_qubits).T
    else:
        out = _vqc_expectations(features, params, config)
    return out[0] if single else out


def _check_upstream(upstream: np.ndarray, batch: int, n_qubits: int) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        upstream = upstream[None, :]
    if upstream.shape != (batch, n_qubits):
        raise ValueError(
            f"upstream gradient must have shape ({batch}, {n_qubits}), got {upstream.shape}"
        )
    return upstream


def parameter_shift_gradient(
    features: np.ndarray,
    params: np.ndarray,
    config: AnsatzConfig,
    upstream: np.ndarray,
) -> np.ndarray:
    """Gradient of sum_b upstream_b . <Z>_b with respect to the ansatz parameters.

    Uses the exact shift rule for rotation gates,
    d<Z_i>/dp = (f(p + pi/2) - f(p - pi/2)) / 2, two circuit evaluations per
    parameter, each batched over all feature rows. For a single feature vector
    this is upstream^T times the parameter Jacobian.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[None, :]
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (config.n_params,):
        raise ValueError(
            f"ansatz expects {config.n_params} parameters, got shape {params.shape}"
        )
    upstream = _check_upstream(upstream, features.shape[0], config.n_qubits)
    grad = np.zeros(config.n_params)
    shifted = params.copy()
    for k in range(config.n_params):
        orig = shifted[k]
        shifted[k] = orig + np.pi / 2
        plus = _vqc_expectations(features, shifted, config)
        shifted[k] = orig - np.pi / 2
        minus = _vqc_expectations(features, shifted, config)
        shifted[k] = orig
        grad[k] = np.sum(upstream * (plus - minus)) * 0.5
    return grad


@lru_cache(maxsize=None)
def _x_perm(n_qubits: int, qubit: int) -> np.ndarray:
    return np.arange(2**n_qubits) ^ (1 << qubit)


def _pauli_x_overlap(lam: np.ndarray, ket: np.ndarray, n_qubits: int, qubit: int) -> np.ndarray:
    return np.sum(np.conj(lam) * ket[..., _x_perm(n_qubits, qubit)], axis=-1).imag


def _pauli_z_overlap(lam: np.ndarray, ket: np.ndarray, n_qubits: int, qubit: int) -> np.ndarray:
    return np.sum(np.conj(lam) * ket * _z_signs(n_qubits)[qubit], axis=-1).imag


def adjoint_gradients(
    features: np.ndarray,
    params: np.ndarray,
    config: AnsatzConfig,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients for all angles in one forward plus one adjoint sweep.

    Computes the same analytic values as the shift rule (both agree with it to
    float precision; the tests pin this), but as a vector-Jacobian product:
    d(U)/d(angle) = -(i/2) P U for a rotation about Pauli P, so each angle's
    gradient is Im(<lam|P_q|ket>) evaluated while un-applying the circuit from
    the measured state. Work is O(gates) state updates instead of the shift
    rule's two full evaluations for every parameter, which is what makes
    minibatch training tractable. Returns (d/dparams summed over the batch,
    d/dfeatures per sample).
    """
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    if single:
        features = features[None, :]
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (config.n_params,):
        raise ValueError(
            f"ansatz expects {config.n_params} parameters, got shape {params.shape}"
        )
    upstream = _check_upstream(upstream, features.shape[0], config.n_qubits)

    n = config.n_qubits
    batch = features.shape[0]
    ket = np.zeros((batch, 2**n), dtype=np.complex128)
    ket[:, 0] = 1.0
    for q in range(n):
        _apply_rx(ket, n, q, features[:, q])
    _apply_ansatz(ket, config, params)

    # lam = O|psi> for the effective observable O = sum_i upstream_i Z_i (diagonal)
    lam = (upstream @ _z_signs(n)) * ket
    grad_params = np.zeros(config.n_params)
    grad_features = np.zeros_like(features)
    strong = config.entanglement == STRONG

    k = config.n_params
    for layer in reversed(range(config.n_layers)):
        if n >= 2:
            r = (layer % (n - 1)) + 1 if strong else 1
            for i in reversed(range(n)):
                _apply_cnot(ket, n, i, (i + r) % n)
                _apply_cnot(lam, n, i, (i + r) % n)
        for q in reversed(range(n)):
            if strong:
                k -= 1
                grad_params[k] = _pauli_z_overlap(lam, ket, n, q).sum()
                _apply_rz(ket, n, q, -params[k])
                _apply_rz(lam, n, q, -params[k])
            k -= 1
            grad_params[k] = _pauli_x_overlap(lam, ket, n, q).sum()
            _apply_rx(ket, n, q, -params[k])
            _apply_rx(lam, n, q, -params[k])
    for q in reversed(range(n)):
        grad_features[:, q] = _pauli_x_overlap(lam, ket, n, q)
        _apply_rx(ket, n, q, -features[:, q])
        _apply_rx(lam, n, q, -features[:, q])
    return grad_params, (grad_features[0] if single else grad_features)


def parameter_shift_input_gradient(
    features: np.ndarray,
    params: np.ndarray,
    config: AnsatzConfig,
    upstream: np.ndarray,
) -> np.ndarray:
    """Same shift rule applied to the encoding angles; returns d/dfeatures.

    The encoder is made of Rx gates, so each feature obeys the identical
    two-point rule. Output shape matches ``features`` (per-sample gradients:
    encoding angles are not shared across the batch).
    """
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    if single:
        features = features[None, :]
    upstream = _check_upstream(upstream, features.shape[0], config.n_qubits)
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(features)
    for j in range(config.n_qubits):
        shift = np.zeros(config.n_qubits)
        shift[j] = np.pi / 2
        plus = _vqc_expectations(features + shift, params, config)
        minus = _vqc_expectations(features - shift, params, config)
        grad[:, j] = np.sum(upstream * (plus - minus), axis=1) * 0.5
    return grad[0] if single else grad
