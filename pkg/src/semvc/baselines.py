"""Comparison methods: fixed-QP anchor, rate-controlled anchor, hand-crafted mask-ratio
mappings and the flat single-agent RL ablation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from semvc.agents import TrainConfig, flat_greedy_mode, train_flat
from semvc.codec_env import QP_MAX, QP_MIN, QP_REF, EncodeOutcome, VideoModel, encode
from semvc.errors import ContractError
from semvc.metrics import RdCurve, RdPoint

SHAPES = ("linear", "exponential", "square", "log", "sqrt")


def _check_qp(qp):
    if not (isinstance(qp, (int, np.integer)) and QP_MIN <= qp <= QP_MAX):
        raise ContractError(f"QP must be an integer in [{QP_MIN}, {QP_MAX}], got {qp!r}")


def uniform_qp_map(model: VideoModel, qp: int) -> np.ndarray:
    return np.full(model.shape, qp, dtype=np.int64)


def fixed_qp_sweep(model: VideoModel, qps, label: str = "anchor") -> tuple[RdCurve, list]:
    """Flat anchor: every CTU of every frame at the same QP, one point per QP.

    Returns the curve (sorted by rate) and the ``(qp, outcome)`` pairs in input order.
    """
    qps = list(qps)
    if not qps:
        raise ContractError("fixed_qp_sweep needs at least one QP")
    results = []
    for qp in qps:
        _check_qp(qp)
        results.append((qp, encode(model, uniform_qp_map(model, qp))))
    points = sorted(RdPoint(out.total_rate, out.fidelity) for _, out in results)
    return RdCurve(label, tuple(points)), results


def _predicted_frame_rate(model: VideoModel, t: int, qp: int) -> float:
    factor = model.intra_factor if model.intra[t] else 1.0
    return float(np.sum(model.complexity[t] * np.exp2(model.kappa[t] * (QP_REF - qp) / 6.0))) * factor


def rate_control_anchor(model: VideoModel, target_bits: float) -> tuple[np.ndarray, EncodeOutcome]:
    """Frame-level rate control by exact inversion of the rate model.

    Each frame's budget is proportional to its predicted rate at the reference
    QP (complexity sum, intra frames weighted by ``intra_factor``). The frame
    QP is the legal integer whose predicted rate is closest to that budget,
    ties going to the lower QP.
    """
    if not target_bits > 0:
        raise ContractError(f"target_bits must be positive, got {target_bits}")
    weights = np.array([_predicted_frame_rate(model, t, QP_REF) for t in range(model.num_frames)])
    budgets = target_bits * weights / weights.sum()
    qp_map = np.empty(model.shape, dtype=np.int64)
    for t, budget in enumerate(budgets):
        errors = [abs(_predicted_frame_rate(model, t, qp) - budget) for qp in range(QP_MIN, QP_MAX + 1)]
        qp_map[t] = QP_MIN + int(np.argmin(errors))
    return qp_map, encode(model, qp_map)


@dataclass(frozen=True)
class HandcraftedScheme:
    shape: str = "linear"
    curvature: float = 4.0
    delta_span: int = 3

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ContractError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if not self.curvature > 0:
            raise ContractError("curvature must be positive")
        if not (isinstance(self.delta_span, int) and 0 < self.delta_span <= QP_MAX):
            raise ContractError("delta_span must be a positive integer QP offset")

    def importance(self, s):
        """Map mask ratio in [0, 1] to importance in [0, 1]; 0 and 1 are fixed points."""
        s = np.asarray(s, dtype=float)
        a = self.curvature
        if self.shape == "linear":
            return s
        if self.shape == "exponential":
            return np.expm1(a * s) / math.expm1(a)
        if self.shape == "square":
            return s * s
        if self.shape == "log":
            return np.log1p(a * s) / math.log1p(a)
        return np.sqrt(s)

    def offsets(self, s) -> np.ndarray:
        """QP offsets ``round(span * (1 - 2 g(S)))``, rounding halves up."""
        raw = self.delta_span * (1.0 - 2.0 * self.importance(s))
        return np.floor(raw + 0.5).astype(np.int64)


def handcrafted_qp_map(model: VideoModel, frame_qp: int, scheme: HandcraftedScheme) -> np.ndarray:
    _check_qp(frame_qp)
    return np.clip(frame_qp + scheme.offsets(model.mask), QP_MIN, QP_MAX)


def handcrafted_mode(model: VideoModel, frame_qp: int, scheme: HandcraftedScheme) -> tuple[np.ndarray, EncodeOutcome]:
    """Uniform frame QP with per-CTU offsets from the mask ratio: more mask, lower QP."""
    qp_map = handcrafted_qp_map(model, frame_qp, scheme)
    return qp_map, encode(model, qp_map)


def train_flat_rl(env, space, config: TrainConfig, encode_budget: int | None = None):
    """Flat single-agent ablation; returns ``(policy, log, greedy mode)``."""
    policy, log = train_flat(env, space, config, encode_budget)
    return policy, log, flat_greedy_mode(policy, env, space, config.lam)
