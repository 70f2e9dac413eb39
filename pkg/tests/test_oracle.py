import math

import numpy as np
import pytest

from semvc.agents import CHILD, PARENT, new_policy, objective, state_layout
from semvc.codec_env import SyntheticEnv, gen_model, load_trace, write_trace
from semvc.errors import CapExceededError
from semvc.mode_space import ModeSelection, ModeSpace, mode_key
from semvc.oracle import exhaustive_search, mode_gap, policy_gap

from conftest import uniform_model


def reference_objective(model, q1, q2, d_rel, d_unrel, lam, theta=0.25, offsets=(2, 1)):
    """Straight-line loops over frames and CTUs, independent of the vectorized code."""
    total = 0.0
    weighted = 0.0
    mask_sum = 0.0
    prev = 0.0
    for t, frame in enumerate(model.frames):
        base = q1 if t % model.gop_size == 0 else q2 if t % model.gop_size == 1 else q2 + offsets[t % model.gop_size - 2]
        eff = []
        for ctu in frame.ctus:
            q = base + (d_rel if ctu.mask_ratio >= theta else d_unrel)
            q = min(51, max(0, q))
            bits = ctu.complexity * 2 ** (ctu.rate_sensitivity * (32 - q) / 6)
            total += bits * (model.intra_factor if frame.is_intra else 1.0)
            d = 1 / (1 + math.exp(-(q - ctu.degrade_midpoint) / ctu.degrade_steepness))
            e = d if frame.is_intra else min(1.0, d + model.prop_decay * prev)
            eff.append(e)
            weighted += ctu.mask_ratio * e
            mask_sum += ctu.mask_ratio
        frame_mask = sum(c.mask_ratio for c in frame.ctus)
        prev = sum(c.mask_ratio * e for c, e in zip(frame.ctus, eff)) / max(frame_mask, 1e-9)
    ref = sum(c.complexity * (model.intra_factor if f.is_intra else 1.0) for f in model.frames for c in f.ctus)
    fidelity = 1 - weighted / max(mask_sum, 1e-9)
    return (1 - fidelity) + lam * total / ref


@pytest.mark.parametrize("lam", [0.0, 0.15, 0.6])
def test_matches_independent_double_loop(lam, default_space):
    model = gen_model(2)
    res = exhaustive_search(SyntheticEnv(model, default_space), default_space, lam, keep_table=True)
    assert len(res.table) == 784
    best_key, best_j = None, math.inf
    for q1 in (22, 27, 32, 37):
        for q2 in (22, 27, 32, 37):
            for dr in range(-3, 4):
                for du in range(-3, 4):
                    j = reference_objective(model, q1, q2, dr, du, lam)
                    key = mode_key(ModeSelection(q1, q2, dr, du))
                    assert res.table[key][0] == pytest.approx(j, rel=1e-12, abs=1e-14)
                    if j < best_j - 1e-12:
                        best_key, best_j = key, j
    assert mode_key(res.best_mode) == best_key
    assert res.best_objective == min(j for j, _ in res.table.values())


@pytest.mark.parametrize("seed", range(3))
def test_degenerate_lambdas(seed, default_space):
    env = SyntheticEnv(gen_model(seed), default_space)
    assert exhaustive_search(env, default_space, 0.0).best_mode == ModeSelection(22, 22, -3, -3)
    assert exhaustive_search(env, default_space, 100.0).best_mode == ModeSelection(37, 37, 3, 3)


def test_ties_follow_enumeration_order(default_space):
    env = SyntheticEnv(uniform_model(s=0.0), default_space)
    res = exhaustive_search(env, default_space, 0.0)
    assert res.best_mode == ModeSelection(22, 22, -3, -3) and res.spread == 0.0


def test_cap(default_space, default_model):
    with pytest.raises(CapExceededError):
        exhaustive_search(SyntheticEnv(default_model, default_space), default_space, 0.1, cap=783)


def test_trace_export_reproduces_search(tmp_path, default_model, default_space):
    env = SyntheticEnv(default_model, default_space)
    res = exhaustive_search(env, default_space, 0.3, keep_table=True)
    write_trace(tmp_path / "t.csv", [(k, out) for k, (_, out) in res.table.items()], default_model.ref_rate)
    trace = load_trace(tmp_path / "t.csv", model=default_model)
    again = exhaustive_search(trace, default_space, 0.3)
    assert again.best_mode == res.best_mode and again.best_objective == res.best_objective


def test_gaps(default_model, default_space):
    env = SyntheticEnv(default_model, default_space)
    res = exhaustive_search(env, default_space, 0.2)
    assert mode_gap(res.best_mode, env, res).gap == 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        mode = ModeSelection(*(int(rng.choice(a)) for a in (default_space.frame_qp_set,) * 2),
                             *(int(rng.choice(default_space.delta_qp_set)) for _ in range(2)))
        g = mode_gap(mode, env, res)
        assert g.gap >= 0 and 0 <= g.relative_gap <= 1
        assert g.objective == objective(env.encode_mode(mode), 0.2)


def test_policy_gap_untrained(default_model, default_space):
    env = SyntheticEnv(default_model, default_space)
    parent = new_policy(PARENT, default_space.frame_qp_set, state_layout(PARENT, 2))
    child = new_policy(CHILD, default_space.delta_qp_set, state_layout(CHILD, 2))
    g = policy_gap(parent, child, env, default_space, 0.2)
    assert g.mode == ModeSelection(22, 22, -3, -3) and g.gap >= 0
