import numpy as np
import pytest
from hypothesis import given, strategies as st

from semvc.agents import TrainConfig
from semvc.baselines import (
    SHAPES,
    HandcraftedScheme,
    fixed_qp_sweep,
    handcrafted_mode,
    handcrafted_qp_map,
    rate_control_anchor,
    train_flat_rl,
)
from semvc.codec_env import SyntheticEnv, encode, gen_model
from semvc.errors import ContractError
from semvc.mode_space import ModeSpace, enumerate_modes

from conftest import make_model, uniform_model


class TestFixedQp:
    def test_four_points(self, default_model):
        curve, results = fixed_qp_sweep(default_model, [22, 27, 32, 37])
        assert [qp for qp, _ in results] == [22, 27, 32, 37]
        rates = [out.total_rate for _, out in results]
        fids = [out.fidelity for _, out in results]
        assert all(a > b for a, b in zip(rates, rates[1:]))
        assert all(a >= b for a, b in zip(fids, fids[1:]))
        assert list(curve.rates) == sorted(rates)

    def test_matches_direct_encode(self, default_model):
        _, results = fixed_qp_sweep(default_model, [30])
        assert results[0][1] == encode(default_model, np.full(default_model.shape, 30))

    def test_validation(self, default_model):
        with pytest.raises(ContractError):
            fixed_qp_sweep(default_model, [])
        with pytest.raises(ContractError):
            fixed_qp_sweep(default_model, [52])


class TestRateControl:
    def test_fixed_point_homogeneous(self):
        m = uniform_model()
        target = encode(m, np.full(m.shape, 32)).total_rate
        q, _ = rate_control_anchor(m, target)
        assert np.all(q == 32)

    def test_fixed_point_generated(self, default_model):
        q, out = rate_control_anchor(default_model, default_model.ref_rate)
        assert np.all(q == 32)
        assert out.total_rate == pytest.approx(default_model.ref_rate)

    def test_tiny_target_clamps(self, default_model):
        q, _ = rate_control_anchor(default_model, 1e-9)
        assert np.all(q == 51)

    def test_hand_inversion(self):
        # budgets 3000 * (1500, 500) / 2000 = (2250, 750)
        # frame 0: 1500 * 2**((32 - q) / 6) -> q=29 gives 2121.3 (q=28: 2381.1)
        # frame 1: 500 * 2**((32 - q) / 3) -> q=30 gives 793.7 (q=31: 630.0)
        m = make_model([[(1000.0, 1.0, 0.5, 30.0, 3.0)], [(500.0, 2.0, 0.5, 30.0, 3.0)]], gop_size=2)
        q, _ = rate_control_anchor(m, 3000.0)
        assert q.ravel().tolist() == [29, 30]

    def test_positive_target(self, default_model):
        with pytest.raises(ContractError):
            rate_control_anchor(default_model, 0.0)


class TestHandcrafted:
    @pytest.mark.parametrize("shape", SHAPES)
    def test_endpoints(self, shape):
        s = HandcraftedScheme(shape)
        assert s.offsets([0.0, 1.0]).tolist() == [3, -3]

    def test_pinned_offsets(self):
        assert HandcraftedScheme("linear").offsets(0.5) == 0
        # square: 3 (1 - 2 * 0.0625) = 2.625; sqrt: 3 (1 - 2 * 0.5) = 0
        assert HandcraftedScheme("square").offsets(0.25) == 3
        assert HandcraftedScheme("sqrt").offsets(0.25) == 0
        # log: 3 (1 - 2 ln 3 / ln 5) = -1.096; exponential: 3 (1 - 2 (e^2 - 1) / (e^4 - 1)) = 2.285
        assert HandcraftedScheme("log").offsets(0.5) == -1
        assert HandcraftedScheme("exponential").offsets(0.5) == 2

    def test_halves_round_up(self):
        assert HandcraftedScheme("linear").offsets([0.25, 0.75]).tolist() == [2, -1]

    @pytest.mark.parametrize("shape", SHAPES)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, shape, a, b):
        lo, hi = min(a, b), max(a, b)
        s = HandcraftedScheme(shape)
        assert s.offsets(hi) <= s.offsets(lo)

    def test_qp_map(self, default_model):
        scheme = HandcraftedScheme("linear")
        q = handcrafted_qp_map(default_model, 27, scheme)
        expected = 27 + np.floor(3 * (1 - 2 * default_model.mask) + 0.5)
        np.testing.assert_array_equal(q, expected)
        q2, out = handcrafted_mode(default_model, 27, scheme)
        assert np.array_equal(q, q2) and out == encode(default_model, q)

    def test_clamped(self, default_model):
        q = handcrafted_qp_map(default_model, 51, HandcraftedScheme("linear"))
        assert q.max() == 51 and q.shape == default_model.shape

    @pytest.mark.parametrize("kw", [dict(shape="cubic"), dict(curvature=0.0), dict(delta_span=0)])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            HandcraftedScheme(**kw)


def test_flat_rl_logs_budget():
    space = ModeSpace()
    env = SyntheticEnv(gen_model(0), space)
    policy, log, mode = train_flat_rl(env, space, TrainConfig(calib_samples=16), encode_budget=316)
    assert log.total_encodes == 316
    assert mode in enumerate_modes(space)
