import math

import numpy as np
import pytest

from semvc import agents
from semvc.agents import (
    CHILD,
    FLAT,
    PARENT,
    AgentPolicy,
    TrainConfig,
    Trajectory,
    a2c_update,
    build_state,
    calibrate_alpha,
    calibration_modes,
    greedy_mode,
    load_policy,
    new_policy,
    parent_greedy,
    policy_forward,
    reward_ctu,
    reward_frame,
    save_policy,
    state_layout,
    train_flat,
    train_hierarchical,
)
from semvc.codec_env import EncodeOutcome, SyntheticEnv, gen_model
from semvc.errors import ContractError, FormatError, TrainingError
from semvc.mode_space import ModeSelection, ModeSpace
from semvc.nn import init_mlp

from conftest import make_model, uniform_model


def outcome(fidelity, normalized_rate):
    return EncodeOutcome((1.0,), 1.0, fidelity, normalized_rate)


@pytest.fixture(scope="module")
def small_model():
    # c = 100 (t + 1) + 10 i, kappa = 1 + 0.1 i, S fixed per column, mu = 30 + i
    S = [0.0, 0.2, 0.5, 1.0]
    return make_model(
        [[(100.0 * (t + 1) + 10.0 * i, 1.0 + 0.1 * i, S[i], 30.0 + i, 3.0) for i in range(4)] for t in range(4)],
        grid=(2, 2))


class TestState:
    def test_parent_hand_computed(self, small_model):
        ref = 1.5 * 460 + 860 + 1260 + 1660
        assert small_model.ref_rate == ref
        common = [0.425, 1.0]
        tail = [1.15, 31.5 / 51, 0.5]
        s0 = build_state(small_model, 0, PARENT, None, 0.4)
        np.testing.assert_allclose(s0, common + [215 / ref] + tail + [1, 0, 0.4], rtol=1e-14)
        s1 = build_state(small_model, 1, PARENT, None, 0.4)
        np.testing.assert_allclose(s1, common + [315 / ref] + tail + [0, 1, 0.4], rtol=1e-14)

    def test_child_hand_computed(self, small_model):
        ref = small_model.ref_rate
        s = build_state(small_model, 1, CHILD, (22, 27), 0.1)
        expected = [0.425, 1.0, 215 / ref, 1.15, 31.5 / 51, 0.5, 0, 1, 0.1, 22 / 51, 27 / 51]
        np.testing.assert_allclose(s, expected, rtol=1e-14)
        assert len(s) == len(state_layout(CHILD, 2))

    def test_threshold_changes_related_fraction(self, small_model):
        s = build_state(small_model, 0, PARENT, None, 0.0, threshold=0.1)
        assert s[5] == 0.75

    def test_background(self):
        s = build_state(uniform_model(s=0.0), 0, PARENT)
        assert s[0] == 0.0 and s[1] == 0.0 and s[5] == 0.0

    def test_deterministic(self, default_model):
        a = build_state(default_model, 1, CHILD, (27, 32), 0.2)
        b = build_state(default_model, 1, CHILD, (27, 32), 0.2)
        assert np.array_equal(a, b)

    def test_child_sees_parent_choice(self, default_model):
        a = build_state(default_model, 0, CHILD, (22, 27), 0.2)
        b = build_state(default_model, 0, CHILD, (32, 27), 0.2)
        assert not np.array_equal(a, b)

    def test_contracts(self, default_model):
        with pytest.raises(ContractError):
            build_state(default_model, 0, CHILD)
        with pytest.raises(ContractError):
            build_state(default_model, 0, PARENT, (22, 22))
        with pytest.raises(ContractError):
            build_state(default_model, 2, PARENT)
        with pytest.raises(ContractError):
            build_state(default_model, 0, "boss")

    def test_normalized_entries(self):
        for seed in range(5):
            m = gen_model(seed)
            s = build_state(m, 1, CHILD, (37, 37), 1.0)
            assert np.all(np.isfinite(s))
            normalized = s[[0, 1, 2, 4, 5, 9, 10]]
            assert np.all((normalized >= 0) & (normalized <= 1))


class TestRewards:
    def test_zero_lambda(self):
        assert reward_frame(outcome(0.83, 2.0), 0.0, 0.0) == 0.83

    def test_arithmetic(self):
        assert reward_frame(outcome(0.9, 0.5), 0.4, 0.6) == pytest.approx(0.1, abs=1e-15)

    def test_centering(self):
        outs = [outcome(0.83, 2.0), outcome(0.9, 0.5)]
        alpha = sum(reward_frame(o, 0.0) for o in outs) / 2
        assert sum(reward_frame(o, 0.0, alpha) for o in outs) == pytest.approx(0.0, abs=1e-15)

    def test_ctu_matches_frame(self):
        o = outcome(0.7, 1.3)
        assert reward_ctu(o, 0.2, 0.1) == reward_frame(o, 0.2, 0.1)

    def test_monotone_in_lambda(self):
        o = outcome(0.7, 1.3)
        vals = [reward_frame(o, lam) for lam in np.linspace(0, 2, 21)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestCalibration:
    def test_centering_exact(self, default_model, default_space):
        env = SyntheticEnv(default_model, default_space)
        alpha = calibrate_alpha(env, default_space, PARENT, 0.4, 256, 3)
        rewards = [reward_frame(env.encode_mode(m), 0.4, alpha)
                   for m in calibration_modes(default_space, PARENT, 256, 3)]
        assert abs(math.fsum(rewards) / 256) <= 1e-12

    def test_single_sample(self, default_model, default_space):
        env = SyntheticEnv(default_model, default_space)
        [mode] = calibration_modes(default_space, CHILD, 1, 0, parent_choice=(27, 27))
        assert calibrate_alpha(env, default_space, CHILD, 0.1, 1, 0, parent_choice=(27, 27)) == \
            reward_ctu(env.encode_mode(mode), 0.1)

    def test_seeds(self, default_model, default_space):
        env = SyntheticEnv(default_model, default_space)
        a = [calibrate_alpha(env, default_space, PARENT, 0.4, 16, s) for s in (1, 2, 1)]
        assert a[0] == a[2] and a[0] != a[1]

    def test_mode_shapes(self, default_space):
        parent = calibration_modes(default_space, PARENT, 50, 0)
        assert all(m.dqp_related == 0 and m.dqp_unrelated == 0 for m in parent)
        child = calibration_modes(default_space, CHILD, 50, 0, parent_choice=(32, 22))
        assert all(m.frame_qps == (32, 22) for m in child)
        assert len({(m.dqp_related, m.dqp_unrelated) for m in child}) > 10
        with pytest.raises(ContractError):
            calibration_modes(default_space, CHILD, 5, 0)
        with pytest.raises(ContractError):
            calibration_modes(default_space, PARENT, 0, 0)


class TestPolicy:
    def test_zero_weights_uniform(self):
        p = new_policy(PARENT, (22, 27, 32, 37), state_layout(PARENT, 2), seed=0)
        probs, value = policy_forward(p, np.ones(len(p.layout)))
        np.testing.assert_array_equal(probs, [0.25] * 4)
        assert value == 0.0

    def test_random_weights_normalized(self):
        rng = np.random.default_rng(0)
        p = new_policy(CHILD, range(7), state_layout(CHILD, 2), hidden=(16, 16))
        p.actor = init_mlp(rng, (11, 16, 16, 14), zero_head=False)
        for _ in range(20):
            s = rng.normal(size=11)
            probs, value = policy_forward(p, s)
            assert abs(probs.sum() - 1.0) < 1e-9 and np.all(probs > 0) and math.isfinite(value)

    def test_hand_computed_two_unit(self):
        layout = ("x", "pos0")
        actor = [np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2), np.eye(2), np.zeros(2),
                 np.array([[2.0, 0.0], [0.0, 1.0]]), np.zeros(2)]
        critic = [np.eye(2), np.zeros(2), np.eye(2), np.zeros(2), np.array([[1.0], [1.0]]), np.array([0.5])]
        p = AgentPolicy(PARENT, (0, 1), layout, actor, critic)
        probs, value = policy_forward(p, [0.3, 1.0])
        h = [math.tanh(math.tanh(0.3)), math.tanh(math.tanh(1.0))]
        z = [2 * h[0], h[1]]
        expected = [math.exp(z[0]) / (math.exp(z[0]) + math.exp(z[1]))]
        assert probs[0] == pytest.approx(expected[0], rel=1e-14)
        assert value == pytest.approx(h[0] + h[1] + 0.5, rel=1e-14)

    def test_shape_checked(self):
        p = new_policy(PARENT, (22, 27), state_layout(PARENT, 2))
        with pytest.raises(ContractError):
            policy_forward(p, np.zeros(3))

    def test_greedy_ties_go_low(self, default_model, default_space):
        env = SyntheticEnv(default_model, default_space)
        parent = new_policy(PARENT, default_space.frame_qp_set, state_layout(PARENT, 2))
        child = new_policy(CHILD, default_space.delta_qp_set, state_layout(CHILD, 2))
        assert greedy_mode(parent, child, env, default_space, 0.3) == ModeSelection(22, 22, -3, -3)

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        p = new_policy(CHILD, (-3, -2, -1, 0, 1, 2, 3), state_layout(CHILD, 2), seed=4)
        p.actor[-2] = rng.normal(size=p.actor[-2].shape) * 1e-3
        save_policy(p, tmp_path / "p.txt")
        q = load_policy(tmp_path / "p.txt")
        assert q == p and q.role == CHILD and q.actions == p.actions

    def test_file_errors(self, tmp_path):
        p = new_policy(PARENT, (22, 27), state_layout(PARENT, 2), hidden=(4, 4))
        path = tmp_path / "p.txt"
        save_policy(p, path)
        text = path.read_text()
        for bad in (text.replace("format_version=1", "format_version=2"),
                    text.replace("state_layout_hash=", "state_layout_hash=0"),
                    text.replace("layer_dims=9,4,4,4", "layer_dims=9,4,4,5"),
                    text.replace("role=parent\n", "")):
            path.write_text(bad)
            with pytest.raises(FormatError):
                load_policy(path)


class TestUpdate:
    def test_bandit_converges(self):
        rewards = np.array([0.0, 1.0, 0.3])
        policy = new_policy(FLAT, (0, 1, 2), ("pos0",), hidden=(16, 16), seed=0)
        cfg = TrainConfig(lr_parent=0.05, entropy_coef=0.01)
        rng = np.random.default_rng(0)
        state = np.array([1.0])
        for _ in range(2000):
            probs, _ = policy_forward(policy, state)
            acts = rng.choice(3, size=16, p=probs)
            batch = [Trajectory((state,), (int(a),), (0.0,), (0.0,), float(rewards[a])) for a in acts]
            policy, _ = a2c_update(policy, batch, cfg)
        assert agents._greedy_index(policy, state) == 1

    def test_non_finite_aborts(self):
        policy = new_policy(FLAT, (0, 1), ("pos0",), hidden=(4, 4))
        batch = [Trajectory((np.array([1.0]),), (0,), (0.0,), (0.0,), float("inf"))]
        with pytest.raises(TrainingError):
            a2c_update(policy, batch, TrainConfig())

    def test_empty_batch(self):
        with pytest.raises(ContractError):
            a2c_update(new_policy(FLAT, (0, 1), ("pos0",)), [], TrainConfig())

    def test_discounted_returns(self):
        np.testing.assert_allclose(agents.step_returns(2.0, 2, 0.5), [1.0, 2.0])
        np.testing.assert_array_equal(agents.step_returns(2.0, 2, 1.0), [2.0, 2.0])


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [dict(gamma=0.0), dict(batch_size=0), dict(lr_child=0.0), dict(iterations=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            TrainConfig(**kw)

    def test_round_trip(self):
        cfg = TrainConfig(iterations=5, hidden=(8, 4), lam=0.3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestTraining:
    def test_deterministic_and_budgeted(self, default_model, default_space):
        env = SyntheticEnv(default_model, default_space)
        cfg = TrainConfig(iterations=50, lam=0.2, seed=9, calib_samples=32)
        p1, c1, log1 = train_hierarchical(env, default_space, cfg)
        p2, c2, log2 = train_hierarchical(env, default_space, cfg)
        assert p1 == p2 and c1 == c2
        assert log1.mean_reward == log2.mean_reward
        assert log1.total_encodes == 2 * 32 + 2 * 50 * 30
        assert log1.stage == [PARENT] * 50 + [CHILD] * 50

    def test_seed_matters(self, default_model, default_space):
        env = SyntheticEnv(default_model, default_space)
        a = train_hierarchical(env, default_space, TrainConfig(iterations=20, seed=1))[0]
        b = train_hierarchical(env, default_space, TrainConfig(iterations=20, seed=2))[0]
        assert a != b

    def test_zero_lambda_parent_picks_min(self, default_space):
        env = SyntheticEnv(gen_model(3), default_space)
        parent, _, _ = train_hierarchical(env, default_space, TrainConfig(iterations=1500, lam=0.0))
        assert parent_greedy(parent, env.model, default_space, 0.0) == (22, 22)

    def test_flat_budget(self, default_model, default_space):
        env = SyntheticEnv(default_model, default_space)
        cfg = TrainConfig(lam=0.2, calib_samples=40, batch_size=30)
        policy, log = train_flat(env, default_space, cfg, encode_budget=1000)
        assert log.total_encodes == 40 + 30 * 32
        assert policy.actions == tuple(range(784))

    def test_flat_singleton_space(self, default_model):
        space = ModeSpace(frame_qp_set=(27,), delta_qp_set=(0,))
        env = SyntheticEnv(default_model, space)
        policy, _ = train_flat(env, space, TrainConfig(iterations=3))
        assert agents.flat_greedy_mode(policy, env, space, 0.0) == ModeSelection(27, 27, 0, 0)
