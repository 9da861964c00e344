"""Adapters: delta math, invocation location, policies, file round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alora import (AdapterSpec, LowRankDelta, build_policy, delta_apply,
                   find_invocation, load_adapter, random_adapter, save_adapter)
from alora.adapters import (ActivationPoint, MODE_ALORA, MODE_LORA,
                            VERDICT_ADAPTED, VERDICT_BASE)
from alora.errors import (ConfigurationError, ContractViolationError,
                          FormatError, NotInvokedError)


class TestDeltaApply:
    def test_zero_b_is_plain_matmul(self, rng):
        d, r = 8, 3
        x = rng.standard_normal(d).astype(np.float32)
        w = rng.standard_normal((d, d)).astype(np.float32)
        delta = LowRankDelta(a=rng.standard_normal((d, r)).astype(np.float32),
                             b=np.zeros((r, d), dtype=np.float32),
                             rank=r, alpha=6.0)
        assert np.array_equal(delta_apply(x, w, delta), x @ w)

    def test_full_rank_identity_shift(self, rng):
        # alpha = r and A @ B = I, so the result is x @ (W + I)
        d = 4
        x = rng.standard_normal(d).astype(np.float32)
        w = rng.standard_normal((d, d)).astype(np.float32)
        delta = LowRankDelta(a=np.eye(d, dtype=np.float32),
                             b=np.eye(d, dtype=np.float32), rank=d, alpha=float(d))
        assert np.allclose(delta_apply(x, w, delta), x @ (w + np.eye(d)),
                           atol=1e-6)

    def test_rank_one_hand_computed(self):
        x = np.array([1.0, 1.0], dtype=np.float32)
        w = np.eye(2, dtype=np.float32)
        delta = LowRankDelta(a=np.array([[1.0], [0.0]], dtype=np.float32),
                             b=np.array([[2.0, 0.0]], dtype=np.float32),
                             rank=1, alpha=1.0)
        assert np.allclose(delta_apply(x, w, delta), [3.0, 1.0])

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), r=st.integers(1, 8))
    def test_low_rank_first_matches_dense_oracle(self, seed, r):
        rng = np.random.default_rng(seed)
        d = 16
        x = rng.standard_normal(d).astype(np.float32)
        w = rng.standard_normal((d, d)).astype(np.float32)
        a = rng.standard_normal((d, r)).astype(np.float32)
        b = rng.standard_normal((r, d)).astype(np.float32)
        delta = LowRankDelta(a=a, b=b, rank=r, alpha=2.0 * r)
        dense = x @ (w + (2.0 * r / r) * (a @ b))
        assert np.allclose(delta_apply(x, w, delta), dense, atol=1e-4)

    def test_shape_mismatch_rejected(self, rng):
        delta = LowRankDelta(a=rng.standard_normal((8, 2)).astype(np.float32),
                             b=rng.standard_normal((2, 8)).astype(np.float32),
                             rank=2, alpha=1.0)
        with pytest.raises(ConfigurationError):
            delta_apply(np.zeros(4, dtype=np.float32),
                        np.zeros((4, 4), dtype=np.float32), delta)

    def test_rank_above_width_rejected(self, rng):
        with pytest.raises(ConfigurationError):
            LowRankDelta(a=rng.standard_normal((4, 8)).astype(np.float32),
                         b=rng.standard_normal((8, 4)).astype(np.float32),
                         rank=8, alpha=1.0)


def _alora(inv, n_layers=1, d=8, rank=2):
    return random_adapter(d, n_layers, rank=rank, alpha=4.0, mode=MODE_ALORA,
                          adapter_id="t", seed=0, invocation_sequence=inv)


class TestFindInvocation:
    def test_single_occurrence(self):
        spec = _alora((7, 7))
        assert find_invocation([5, 9, 7, 7, 2], spec).t_invoke == 3

    def test_last_occurrence_wins(self):
        spec = _alora((7, 7))
        assert find_invocation([7, 7, 1, 7, 7], spec).t_invoke == 4

    def test_absent_raises(self):
        spec = _alora((9,))
        with pytest.raises(NotInvokedError):
            find_invocation([1, 2, 3], spec)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), inv_len=st.integers(1, 3))
    def test_matches_substring_scan_oracle(self, seed, inv_len):
        rng = np.random.default_rng(seed)
        tokens = rng.integers(0, 4, size=20).tolist()
        inv = tuple(rng.integers(0, 4, size=inv_len).tolist())
        spec = _alora(inv)
        # oracle: exhaustive scan over every window, keep the last hit
        hits = [s for s in range(len(tokens) - inv_len + 1)
                if tuple(tokens[s:s + inv_len]) == inv]
        if hits:
            assert find_invocation(tokens, spec).t_invoke == hits[-1] + 1
        else:
            with pytest.raises(NotInvokedError):
                find_invocation(tokens, spec)


class TestBuildPolicy:
    def test_activation_zero_equals_classic_everywhere(self):
        spec = _alora((7,))
        policy = build_policy(spec, ActivationPoint(0))
        lora = AdapterSpec(adapter_id="l", mode=MODE_LORA, deltas=spec.deltas)
        classic = build_policy(lora, None)
        for p in range(10):
            assert policy.verdict(p) == classic.verdict(p) == VERDICT_ADAPTED

    def test_activation_at_sequence_end(self):
        spec = _alora((7,))
        policy = build_policy(spec, ActivationPoint(6))
        assert [policy.verdict(p) for p in range(6)] == [VERDICT_BASE] * 6
        assert policy.verdict(6) == VERDICT_ADAPTED

    def test_verdict_pattern(self):
        spec = _alora((7,))
        policy = build_policy(spec, ActivationPoint(5))
        verdicts = [policy.verdict(p) for p in range(8)]
        assert verdicts == [VERDICT_BASE] * 5 + [VERDICT_ADAPTED] * 3

    def test_activation_rule_property(self, rng):
        spec = _alora((7,))
        for _ in range(20):
            t = int(rng.integers(0, 40))
            policy = build_policy(spec, ActivationPoint(t))
            for p in rng.integers(0, 60, size=10):
                assert (policy.verdict(int(p)) == VERDICT_ADAPTED) == (p >= t)

    def test_alora_requires_activation(self):
        with pytest.raises(ContractViolationError):
            build_policy(_alora((7,)), None)

    def test_lora_forbids_activation(self):
        lora = AdapterSpec(adapter_id="l", mode=MODE_LORA, deltas={})
        with pytest.raises(ContractViolationError):
            build_policy(lora, ActivationPoint(0))

    def test_policy_building_does_not_mutate_spec(self):
        spec = _alora((7,), n_layers=2)
        before = {k: (d.a.copy(), d.b.copy()) for k, d in spec.deltas.items()}
        build_policy(spec, ActivationPoint(3))
        for k, (a, b) in before.items():
            assert np.array_equal(spec.deltas[k].a, a)
            assert np.array_equal(spec.deltas[k].b, b)


class TestAdapterFiles:
    def test_round_trip_bitwise(self, tmp_path, rng):
        spec = random_adapter(16, 2, rank=4, alpha=32.0, mode=MODE_ALORA,
                              adapter_id="rt", seed=5,
                              invocation_sequence=(2, 3, 4))
        path = tmp_path / "adapter.alad"
        save_adapter(spec, path)
        loaded = load_adapter(path, d_model=16)
        assert loaded.adapter_id == "rt"
        assert loaded.mode == MODE_ALORA
        assert loaded.invocation_sequence == (2, 3, 4)
        for key, delta in spec.deltas.items():
            assert np.array_equal(loaded.deltas[key].a, delta.a)
            assert np.array_equal(loaded.deltas[key].b, delta.b)

    def test_truncated_file_rejected(self, tmp_path):
        spec = random_adapter(16, 1, rank=2, alpha=8.0, mode=MODE_LORA,
                              adapter_id="x", seed=1)
        path = tmp_path / "adapter.alad"
        save_adapter(spec, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 20])
        with pytest.raises(FormatError):
            load_adapter(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.alad"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_adapter(path)

    def test_rank_within_width_loads_above_rejected(self, tmp_path):
        ok = random_adapter(64, 1, rank=32, alpha=32.0, mode=MODE_LORA,
                            adapter_id="ok", seed=2)
        path = tmp_path / "ok.alad"
        save_adapter(ok, path)
        assert load_adapter(path, d_model=64).deltas[(0, "q")].rank == 32
        # an oversized rank is blocked at delta construction already
        with pytest.raises(ConfigurationError):
            random_adapter(64, 1, rank=128, alpha=32.0, mode=MODE_LORA,
                           adapter_id="bad", seed=3)
