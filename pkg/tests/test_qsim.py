import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpong import qsim
from qpong.qsim import AnsatzConfig, GateOp, apply_gate, build_ansatz, encode_angles, new_state

from oracles import central_difference, dense_vqc


class TestNewState:
    def test_single_qubit_is_ket_zero(self):
        assert np.array_equal(new_state(1).amplitudes, [1.0, 0.0])

    def test_two_qubits(self):
        assert np.array_equal(new_state(2).amplitudes, [1.0, 0.0, 0.0, 0.0])

    @pytest.mark.parametrize("n", [0, 25, -3])
    def test_capacity_guard(self, n):
        with pytest.raises(ValueError):
            new_state(n)


class TestApplyGate:
    def test_rx_pi_flips_to_minus_i_ket_one(self):
        state = apply_gate(new_state(1), GateOp("rx", 0, angle=np.pi))
        assert np.allclose(state.amplitudes, [0.0, -1j], atol=1e-15)

    def test_cnot_truth_table(self):
        # |10> in bit order (qubit 0 = 1, qubit 1 = 0) sits at index 1
        state = new_state(2)
        state.amplitudes[:] = [0.0, 1.0, 0.0, 0.0]
        apply_gate(state, GateOp("cnot", target=1, control=0))
        assert np.array_equal(state.amplitudes, [0.0, 0.0, 0.0, 1.0])

    def test_rz_is_pure_phase_on_ket_zero(self):
        state = apply_gate(new_state(1), GateOp("rz", 0, angle=0.7))
        assert np.allclose(state.amplitudes[0], np.exp(-1j * 0.35))
        assert state.norm() == pytest.approx(1.0, abs=1e-15)

    def test_index_errors(self):
        with pytest.raises(IndexError):
            apply_gate(new_state(2), GateOp("rx", 2, angle=0.1))
        with pytest.raises(IndexError):
            apply_gate(new_state(2), GateOp("cnot", target=0, control=5))

    def test_gateop_validation(self):
        with pytest.raises(ValueError):
            GateOp("cnot", target=1, control=1)
        with pytest.raises(ValueError):
            GateOp("hadamard", 0)
        with pytest.raises(ValueError):
            GateOp("rx", 0, control=1)


class TestEncodeAngles:
    def test_zero_features_are_identity(self):
        state = encode_angles(new_state(3), np.zeros(3))
        assert np.allclose(state.amplitudes, new_state(3).amplitudes)

    def test_half_pi_gives_zero_expectation(self):
        state = encode_angles(new_state(1), [np.pi / 2])
        assert qsim.expectations_z(state)[0] == pytest.approx(0.0, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            encode_angles(new_state(4), np.zeros(3))


class TestBuildAnsatz:
    def test_strong_ring_ranges_cycle(self):
        cfg = AnsatzConfig(4, 3, qsim.STRONG)
        assert cfg.n_params == 24
        gates = build_ansatz(cfg, np.zeros(24))
        rings = []
        ring = []
        for g in gates:
            if g.kind == "cnot":
                ring.append((g.control, g.target))
            elif ring:
                rings.append(ring)
                ring = []
        rings.append(ring)
        ranges = [{(t - c) % 4 for c, t in ring} for ring in rings]
        assert ranges == [{1}, {2}, {3}]

    def test_basic_always_range_one(self):
        cfg = AnsatzConfig(4, 3, qsim.BASIC)
        assert cfg.n_params == 12
        gates = build_ansatz(cfg, np.zeros(12))
        assert all((g.target - g.control) % 4 == 1 for g in gates if g.kind == "cnot")

    def test_paper_scale_parameter_count(self):
        assert AnsatzConfig(13, 9, qsim.STRONG).n_params == 234

    def test_parameter_order_is_layer_qubit_rotation(self):
        cfg = AnsatzConfig(2, 2, qsim.STRONG)
        gates = [g for g in build_ansatz(cfg, np.arange(8.0)) if g.kind != "cnot"]
        seen = [(g.angle, g.target, g.kind) for g in gates]
        assert seen == [
            (0.0, 0, "rx"), (1.0, 0, "rz"), (2.0, 1, "rx"), (3.0, 1, "rz"),
            (4.0, 0, "rx"), (5.0, 0, "rz"), (6.0, 1, "rx"), (7.0, 1, "rz"),
        ]

    def test_param_count_mismatch(self):
        with pytest.raises(ValueError):
            build_ansatz(AnsatzConfig(3, 2, qsim.BASIC), np.zeros(5))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AnsatzConfig(0, 1)
        with pytest.raises(ValueError):
            AnsatzConfig(2, 0)
        with pytest.raises(ValueError):
            AnsatzConfig(2, 1, "medium")


class TestExpectationsZ:
    def test_all_zero_state(self):
        assert np.array_equal(qsim.expectations_z(new_state(3)), [1.0, 1.0, 1.0])

    def test_ket_one(self):
        state = new_state(1)
        state.amplitudes[:] = [0.0, 1.0]
        assert np.array_equal(qsim.expectations_z(state), [-1.0])

    def test_rx_third_pi(self):
        state = apply_gate(new_state(1), GateOp("rx", 0, angle=np.pi / 3))
        assert qsim.expectations_z(state)[0] == pytest.approx(0.5, abs=1e-15)


class TestRunVqc:
    def test_identity_circuit_gives_ones(self):
        cfg = AnsatzConfig(3, 2, qsim.STRONG)
        out = qsim.run_vqc(np.zeros(3), np.zeros(cfg.n_params), cfg)
        assert np.allclose(out, 1.0, atol=1e-15)

    def test_deterministic(self):
        cfg = AnsatzConfig(3, 2, qsim.BASIC)
        rng = np.random.default_rng(7)
        feats = rng.uniform(-np.pi, np.pi, 3)
        params = rng.uniform(-np.pi, np.pi, cfg.n_params)
        a = qsim.run_vqc(feats, params, cfg)
        b = qsim.run_vqc(feats, params, cfg)
        assert np.array_equal(a, b)

    def test_matches_dense_oracle(self):
        cfg = AnsatzConfig(2, 1, qsim.STRONG)
        rng = np.random.default_rng(11)
        feats = rng.uniform(-np.pi, np.pi, 2)
        params = rng.uniform(-np.pi, np.pi, cfg.n_params)
        fast = qsim.run_vqc(feats, params, cfg)
        assert np.allclose(fast, dense_vqc(feats, params, cfg), atol=1e-10)

    def test_batched_rows_match_single_calls(self):
        cfg = AnsatzConfig(3, 2, qsim.STRONG)
        rng = np.random.default_rng(3)
        feats = rng.uniform(-np.pi, np.pi, (5, 3))
        params = rng.uniform(-np.pi, np.pi, cfg.n_params)
        batched = qsim.run_vqc(feats, params, cfg)
        for b in range(5):
            # BLAS may order the final contraction differently per shape
            assert np.allclose(batched[b], qsim.run_vqc(feats[b], params, cfg), atol=1e-13)

    def test_shape_error(self):
        cfg = AnsatzConfig(4, 1, qsim.BASIC)
        with pytest.raises(ValueError):
            qsim.run_vqc(np.zeros(3), np.zeros(cfg.n_params), cfg)

    @pytest.mark.parametrize("entanglement", [qsim.BASIC, qsim.STRONG])
    def test_unitary_fast_path_matches_gate_path(self, entanglement):
        # the cached-unitary contraction must agree with gate-by-gate application
        cfg = AnsatzConfig(5, 3, entanglement)
        rng = np.random.default_rng(41)
        feats = rng.uniform(-np.pi, np.pi, (7, 5))
        params = rng.uniform(-np.pi, np.pi, cfg.n_params)
        fast = qsim.run_vqc(feats, params, cfg)
        gate = qsim._vqc_expectations(feats, params, cfg)
        assert np.allclose(fast, gate, atol=1e-12)


class TestParameterShift:
    def test_single_rx_matches_analytic_sine(self):
        # one qubit, one basic layer: <Z> = cos(theta), d<Z>/dtheta = -sin(theta)
        cfg = AnsatzConfig(1, 1, qsim.BASIC)
        grad = qsim.parameter_shift_gradient(
            np.zeros(1), np.array([np.pi / 3]), cfg, np.ones(1)
        )
        assert grad[0] == pytest.approx(-np.sin(np.pi / 3), abs=1e-12)

    def test_zero_upstream_gives_zero_gradient(self):
        cfg = AnsatzConfig(3, 2, qsim.STRONG)
        rng = np.random.default_rng(5)
        grad = qsim.parameter_shift_gradient(
            rng.uniform(-1, 1, 3), rng.uniform(-np.pi, np.pi, cfg.n_params), cfg, np.zeros(3)
        )
        assert np.array_equal(grad, np.zeros(cfg.n_params))

    def test_matches_finite_differences(self):
        cfg = AnsatzConfig(4, 2, qsim.STRONG)
        rng = np.random.default_rng(17)
        feats = rng.uniform(-np.pi, np.pi, 4)
        params = rng.uniform(-np.pi, np.pi, cfg.n_params)
        upstream = rng.uniform(-1, 1, 4)
        grad = qsim.parameter_shift_gradient(feats, params, cfg, upstream)
        fd = central_difference(lambda p: float(upstream @ qsim.run_vqc(feats, p, cfg)), params)
        assert np.allclose(grad, fd, atol=1e-5)

    def test_input_gradient_matches_finite_differences(self):
        cfg = AnsatzConfig(3, 2, qsim.BASIC)
        rng = np.random.default_rng(23)
        feats = rng.uniform(-np.pi, np.pi, 3)
        params = rng.uniform(-np.pi, np.pi, cfg.n_params)
        upstream = rng.uniform(-1, 1, 3)
        grad = qsim.parameter_shift_input_gradient(feats, params, cfg, upstream)
        fd = central_difference(lambda f: float(upstream @ qsim.run_vqc(f, params, cfg)), feats)
        assert np.allclose(grad, fd, atol=1e-5)

    def test_batched_gradient_sums_over_rows(self):
        cfg = AnsatzConfig(2, 1, qsim.STRONG)
        rng = np.random.default_rng(29)
        feats = rng.uniform(-np.pi, np.pi, (4, 2))
        params = rng.uniform(-np.pi, np.pi, cfg.n_params)
        upstream = rng.uniform(-1, 1, (4, 2))
        batched = qsim.parameter_shift_gradient(feats, params, cfg, upstream)
        summed = sum(
            qsim.parameter_shift_gradient(feats[b], params, cfg, upstream[b]) for b in range(4)
        )
        assert np.allclose(batched, summed, atol=1e-12)

    def test_upstream_shape_error(self):
        cfg = AnsatzConfig(3, 1, qsim.BASIC)
        with pytest.raises(ValueError):
            qsim.parameter_shift_gradient(np.zeros(3), np.zeros(3), cfg, np.zeros(2))

    @pytest.mark.parametrize("entanglement", [qsim.BASIC, qsim.STRONG])
    def test_adjoint_matches_shift_rule(self, entanglement):
        # the adjoint training path must agree with the two-call shift rule
        cfg = AnsatzConfig(3, 2, entanglement)
        rng = np.random.default_rng(31)
        feats = rng.uniform(-np.pi, np.pi, (5, 3))
        params = rng.uniform(-np.pi, np.pi, cfg.n_params)
        upstream = rng.uniform(-1, 1, (5, 3))
        g_par, g_feat = qsim.adjoint_gradients(feats, params, cfg, upstream)
        assert np.allclose(g_par, qsim.parameter_shift_gradient(feats, params, cfg, upstream), atol=1e-12)
        assert np.allclose(
            g_feat, qsim.parameter_shift_input_gradient(feats, params, cfg, upstream), atol=1e-12
        )

    def test_adjoint_single_sample(self):
        cfg = AnsatzConfig(2, 1, qsim.STRONG)
        rng = np.random.default_rng(37)
        feats = rng.uniform(-np.pi, np.pi, 2)
        params = rng.uniform(-np.pi, np.pi, cfg.n_params)
        upstream = rng.uniform(-1, 1, 2)
        g_par, g_feat = qsim.adjoint_gradients(feats, params, cfg, upstream)
        assert g_feat.shape == (2,)
        assert np.allclose(g_par, qsim.parameter_shift_gradient(feats, params, cfg, upstream), atol=1e-12)


def _random_gates(rng: np.random.Generator, n_qubits: int, count: int) -> list[GateOp]:
    gates = []
    for _ in range(count):
        kind = rng.choice(["rx", "rz", "cnot"])
        if kind == "cnot" and n_qubits >= 2:
            c, t = rng.choice(n_qubits, size=2, replace=False)
            gates.append(GateOp("cnot", int(t), control=int(c)))
        else:
            kind = "rx" if kind == "cnot" else kind
            gates.append(GateOp(str(kind), int(rng.integers(n_qubits)), angle=float(rng.uniform(-np.pi, np.pi))))
    return gates


class TestInvariants:
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 5))
    @settings(max_examples=25, deadline=None)
    def test_norm_preserved_by_random_sequences(self, seed, n):
        rng = np.random.default_rng(seed)
        state = qsim.apply_gates(new_state(n), _random_gates(rng, n, 200))
        assert abs(state.norm() ** 2 - 1.0) <= 1e-12

    @given(angle=st.floats(-10, 10, allow_nan=False), n=st.integers(1, 4))
    @settings(max_examples=50, deadline=None)
    def test_rx_inverse_restores_state(self, angle, n):
        rng = np.random.default_rng(0)
        state = qsim.apply_gates(new_state(n), _random_gates(rng, n, 20))
        before = state.amplitudes.copy()
        apply_gate(state, GateOp("rx", 0, angle=angle))
        apply_gate(state, GateOp("rx", 0, angle=-angle))
        assert np.allclose(state.amplitudes, before, atol=1e-12)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_expectations_bounded(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 5))
        state = qsim.apply_gates(new_state(n), _random_gates(rng, n, 50))
        z = qsim.expectations_z(state)
        assert np.all(z >= -1.0 - 1e-12) and np.all(z <= 1.0 + 1e-12)
