import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evstream.coding import (
    CodedVector,
    complex_max,
    complex_max_fold,
    compose_code,
    temporal_code,
    to_real_pairs,
)

TAU = 32000


def vec(mags, phases):
    return CodedVector(np.asarray(mags, dtype=np.float64),
                       np.asarray(phases, dtype=np.float64))


def rand_vec(rng, k):
    return CodedVector(rng.uniform(0, 1, k), rng.uniform(0, 2 * np.pi, k))


class TestTemporalCode:
    def test_identity_at_zero_dt(self):
        z = vec([0.8], [0.0])
        out = temporal_code(z, 0, TAU)
        assert out.magnitude[0] == 0.8
        assert out.phase[0] == 0.0

    def test_full_decay_at_tau(self):
        out = temporal_code(vec([0.5], [0.0]), TAU, TAU)
        assert out.magnitude[0] == 0.0
        assert out.phase[0] == 0.0

    def test_quarter_window(self):
        # 0.9 - 0.25 = 0.65; phase -pi/2 wraps to 3*pi/2
        out = temporal_code(vec([0.9], [0.0]), TAU // 4, TAU)
        assert out.magnitude[0] == pytest.approx(0.65, abs=1e-15)
        assert out.phase[0] == pytest.approx(3 * np.pi / 2, abs=1e-12)

    def test_zero_magnitude_gets_canonical_phase(self):
        out = temporal_code(vec([0.1, 0.9], [1.0, 1.0]), TAU // 2, TAU)
        assert out.magnitude[0] == 0.0
        assert out.phase[0] == 0.0
        assert out.magnitude[1] > 0
        assert out.phase[1] != 0.0

    def test_negative_dt_rejected(self):
        with pytest.raises(ValueError):
            temporal_code(vec([0.5], [0.0]), -1, TAU)

    def test_beyond_tau_is_exactly_zero(self):
        # Integer expiry guard: no floating-point residue at/after the edge.
        for dt in (TAU, TAU + 1, 10 * TAU):
            out = temporal_code(vec([0.999999], [2.0]), dt, TAU)
            assert out.magnitude[0] == 0.0
            assert out.phase[0] == 0.0


class TestComposeCode:
    def test_zero_zero_identity(self):
        z = vec([0.7], [1.5])
        out = compose_code(z, 0, 0, TAU)
        assert out.magnitude[0] == 0.7
        assert out.phase[0] == 1.5

    def test_two_half_windows_fully_decay(self):
        out = compose_code(vec([1.0], [0.0]), TAU // 2, TAU // 2, TAU)
        assert out.magnitude[0] == 0.0
        assert out.phase[0] == 0.0

    def test_matches_single_step(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            z = rand_vec(rng, 32)
            a, b = (int(v) for v in rng.integers(0, TAU // 2, 2))
            two = compose_code(z, a, b, TAU)
            one = temporal_code(z, a + b, TAU)
            assert np.max(np.abs(to_real_pairs(two) - to_real_pairs(one))) < 1e-12


class TestComplexMax:
    def test_larger_magnitude_wins(self):
        out = complex_max(vec([0.3], [0.0]), vec([0.7], [np.pi]))
        assert out.magnitude[0] == 0.7
        assert out.phase[0] == np.pi

    def test_tie_selects_newer(self):
        out = complex_max(vec([0.5], [0.1]), vec([0.5], [2.0]))
        assert out.phase[0] == 2.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            complex_max(vec([0.5], [0.0]), vec([0.5, 0.5], [0.0, 0.0]))

    def test_fold_matches_brute_argmax(self):
        rng = np.random.default_rng(3)
        vectors = [rand_vec(rng, 8) for _ in range(100)]
        folded = complex_max_fold(vectors)
        mags = np.stack([v.magnitude for v in vectors])
        phases = np.stack([v.phase for v in vectors])
        for k in range(8):
            # newest among maxima wins
            col = mags[:, k]
            winner = len(col) - 1 - int(np.argmax(col[::-1]))
            assert folded.magnitude[k] == col[winner]
            assert folded.phase[k] == phases[winner, k]

    def test_fold_empty_rejected(self):
        with pytest.raises(ValueError):
            complex_max_fold([])


class TestToRealPairs:
    def test_unit_phase_zero(self):
        out = to_real_pairs(vec([1.0], [0.0]))
        assert np.array_equal(out, [1.0, 0.0])

    def test_quarter_turn(self):
        out = to_real_pairs(vec([1.0], [np.pi / 2]))
        assert abs(out[0]) < 1e-15
        assert out[1] == pytest.approx(1.0, abs=1e-15)

    def test_zero_vector(self):
        out = to_real_pairs(CodedVector.zeros(5))
        assert np.array_equal(out, np.zeros(10))

    def test_interleaving(self):
        out = to_real_pairs(vec([0.5, 0.25], [0.0, np.pi]))
        assert out[0] == 0.5 and out[2] == pytest.approx(-0.25)


class TestFromReal:
    def test_sign_to_phase(self):
        v = CodedVector.from_real(np.array([0.5, -0.25, 0.0]))
        assert np.array_equal(v.magnitude, [0.5, 0.25, 0.0])
        assert np.array_equal(v.phase, [0.0, np.pi, 0.0])
        v.validate()


class TestInvariants:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, TAU), st.integers(0, TAU), st.integers(1, 64),
           st.integers(0, 2**32 - 1))
    def test_composition_law(self, a, b, k, seed):
        z = rand_vec(np.random.default_rng(seed), k)
        two = compose_code(z, a, b, TAU)
        one = temporal_code(z, a + b, TAU)
        assert np.max(np.abs(to_real_pairs(two) - to_real_pairs(one))) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, TAU - 1), st.integers(0, 2**32 - 1))
    def test_shared_decay_preserves_ordering(self, dt, seed):
        # argmax-by-magnitude commutes with decaying both sides equally
        rng = np.random.default_rng(seed)
        a, b = rand_vec(rng, 16), rand_vec(rng, 16)
        before = complex_max(a, b).magnitude
        da, db = temporal_code(a, dt, TAU), temporal_code(b, dt, TAU)
        after = complex_max(da, db).magnitude
        assert np.array_equal(after, temporal_code(complex_max(a, b), dt, TAU).magnitude)
        assert np.all(after <= before)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_expired_channel_never_wins(self, seed):
        rng = np.random.default_rng(seed)
        live = rand_vec(rng, 8)
        dead = temporal_code(rand_vec(rng, 8), TAU, TAU)
        out = complex_max(dead, live)
        # ties at zero magnitude still take the newer (live) operand
        assert np.array_equal(out.magnitude, live.magnitude)
        assert np.array_equal(out.phase, live.phase)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 3 * TAU), st.integers(0, 2**32 - 1))
    def test_output_ranges(self, dt, seed):
        z = rand_vec(np.random.default_rng(seed), 16)
        out = temporal_code(z, dt, TAU)
        out.validate()

    def test_validate_rejects_bad_vectors(self):
        with pytest.raises(ValueError):
            vec([1.5], [0.0]).validate()
        with pytest.raises(ValueError):
            vec([0.5], [7.0]).validate()
        with pytest.raises(ValueError):
            vec([0.0], [1.0]).validate()
