"""Exhaustive search over the simplified mode space."""

from __future__ import annotations

from dataclasses import dataclass

from semvc.agents import objective
from semvc.errors import CapExceededError
from semvc.mode_space import ModeSelection, ModeSpace, enumerate_modes, mode_key

DEFAULT_CAP = 10**6


@dataclass(frozen=True)
class OracleResult:
    best_mode: ModeSelection
    best_objective: float
    lam: float
    worst_objective: float
    table: dict | None = None

    @property
    def spread(self) -> float:
        return self.worst_objective - self.best_objective


def exhaustive_search(env, space: ModeSpace, lam: float, keep_table: bool = False, cap: int = DEFAULT_CAP) -> OracleResult:
    """Minimize ``(1 - fidelity) + lam * normalized_rate`` over every mode.

    Ties go to the earliest mode in enumeration order. With ``keep_table``
    the result maps every mode key to ``(objective, outcome)``.
    """
    gop = env.model.gop_size if getattr(env, "model", None) is not None else None
    count = space.size if not space.per_frame_deltas else len(space.frame_qp_set) ** 2 * len(space.delta_qp_set) ** (2 * gop)
    if count > cap:
        raise CapExceededError(f"mode space has {count} modes, cap is {cap}")
    best = None
    best_j = float("inf")
    worst_j = float("-inf")
    table = {} if keep_table else None
    for mode in enumerate_modes(space, gop):
        out = env.encode_mode(mode)
        j = objective(out, lam)
        if j < best_j:
            best, best_j = mode, j
        worst_j = max(worst_j, j)
        if table is not None:
            table[mode_key(mode)] = (j, out)
    return OracleResult(best_mode=best, best_objective=best_j, lam=lam, worst_objective=worst_j, table=table)


@dataclass(frozen=True)
class GapReport:
    mode: ModeSelection
    objective: float
    oracle_objective: float
    gap: float
    relative_gap: float


def mode_gap(mode: ModeSelection, env, oracle: OracleResult) -> GapReport:
    """Gap of one mode against the oracle, relative to the objective spread."""
    j = objective(env.encode_mode(mode), oracle.lam)
    gap = max(0.0, j - oracle.best_objective)
    rel = gap / oracle.spread if oracle.spread > 0 else 0.0
    return GapReport(mode, j, oracle.best_objective, gap, rel)


def policy_gap(parent, child, env, space: ModeSpace, lam: float, oracle: OracleResult | None = None) -> GapReport:
    from semvc.agents import greedy_mode

    if oracle is None:
        oracle = exhaustive_search(env, space, lam)
    return mode_gap(greedy_mode(parent, child, env, space, lam), env, oracle)
