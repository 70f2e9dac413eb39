"""Simplified hierarchical action space and its expansion to per-CTU QP maps.

The parent decides the QPs of the first two frames of every GOP; later GOP
frames follow fixed offsets from the second. The child decides one delta-QP
for the semantic-related region and one for the rest.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from semvc.codec_env import QP_MAX, QP_MIN, VideoModel
from semvc.errors import ContractError, FormatError

Delta = Union[int, tuple]


@dataclass(frozen=True)
class ModeSpace:
    frame_qp_set: tuple[int, ...] = (22, 27, 32, 37)
    delta_qp_set: tuple[int, ...] = (-3, -2, -1, 0, 1, 2, 3)
    gop_offsets: tuple[int, ...] = (2, 1)
    region_threshold: float = 0.25
    # one (related, unrelated) delta pair per GOP position instead of per GOP
    per_frame_deltas: bool = False

    def __post_init__(self):
        for name in ("frame_qp_set", "delta_qp_set", "gop_offsets"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        for name in ("frame_qp_set", "delta_qp_set"):
            values = getattr(self, name)
            if not values:
                raise ContractError(f"{name} must be non-empty")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ContractError(f"{name} must be strictly increasing, got {values}")
        if not 0.0 <= self.region_threshold <= 1.0:
            raise ContractError(f"region_threshold must lie in [0, 1], got {self.region_threshold}")

    def check_gop(self, gop_size: int) -> None:
        need = max(gop_size - 2, 0)
        if len(self.gop_offsets) != need:
            raise ContractError(
                f"gop_offsets has {len(self.gop_offsets)} entries, GOP size {gop_size} needs {need}"
            )

    @property
    def size(self) -> int:
        return len(self.frame_qp_set) ** 2 * len(self.delta_qp_set) ** 2

    def to_dict(self) -> dict:
        return {
            "frame_qp_set": list(self.frame_qp_set),
            "delta_qp_set": list(self.delta_qp_set),
            "gop_offsets": list(self.gop_offsets),
            "region_threshold": self.region_threshold,
            "per_frame_deltas": self.per_frame_deltas,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModeSpace":
        return cls(**data)


@dataclass(frozen=True)
class ModeSelection:
    """Frame QPs of the two decided frames plus the two region deltas.

    Under per-frame granularity the deltas are tuples indexed by GOP position.
    """

    qp_frame1: int
    qp_frame2: int
    dqp_related: Delta = 0
    dqp_unrelated: Delta = 0

    @property
    def frame_qps(self) -> tuple[int, int]:
        return (self.qp_frame1, self.qp_frame2)


def _deltas_at(value: Delta, k: int) -> int:
    return value[k] if isinstance(value, tuple) else value


def validate_mode(mode: ModeSelection, space: ModeSpace, gop_size: int | None = None) -> None:
    for qp in mode.frame_qps:
        if qp not in space.frame_qp_set:
            raise ContractError(f"frame QP {qp} not in {space.frame_qp_set}")
    for value in (mode.dqp_related, mode.dqp_unrelated):
        values = value if isinstance(value, tuple) else (value,)
        if isinstance(value, tuple) != space.per_frame_deltas:
            raise ContractError("delta granularity does not match the mode space")
        if gop_size is not None and isinstance(value, tuple) and len(value) != gop_size:
            raise ContractError(f"per-frame deltas need {gop_size} entries, got {len(value)}")
        for d in values:
            if d not in space.delta_qp_set:
                raise ContractError(f"delta QP {d} not in {space.delta_qp_set}")


def partition_regions(model: VideoModel, space: ModeSpace) -> np.ndarray:
    """Boolean ``(frames, ctus)`` flags: related iff ``mask_ratio >= region_threshold``."""
    flags = model.mask >= space.region_threshold
    flags.setflags(write=False)
    return flags


def expand_mode(mode: ModeSelection, model: VideoModel, space: ModeSpace, partition=None) -> np.ndarray:
    """Per-frame, per-CTU QP map of ``mode``, clamped to the legal QP range."""
    space.check_gop(model.gop_size)
    validate_mode(mode, space, model.gop_size)
    if partition is None:
        partition = partition_regions(model, space)
    partition = np.asarray(partition, dtype=bool)
    if partition.shape != model.shape:
        raise ContractError(f"partition shape {partition.shape} does not match model {model.shape}")

    qp = np.empty(model.shape, dtype=np.int64)
    for gop in model.gops():
        for k, t in enumerate(gop):
            if k == 0:
                base = mode.qp_frame1
            elif k == 1:
                base = mode.qp_frame2
            else:
                base = mode.qp_frame2 + space.gop_offsets[k - 2]
            rel = base + _deltas_at(mode.dqp_related, k)
            unrel = base + _deltas_at(mode.dqp_unrelated, k)
            qp[t] = np.where(partition[t], rel, unrel)
    np.clip(qp, QP_MIN, QP_MAX, out=qp)
    return qp


def enumerate_modes(space: ModeSpace, gop_size: int | None = None) -> list[ModeSelection]:
    """All modes in lexicographic order of (qp1, qp2, related delta, unrelated delta)."""
    if space.per_frame_deltas:
        if gop_size is None:
            raise ContractError("per-frame enumeration needs the GOP size")
        deltas = list(itertools.product(space.delta_qp_set, repeat=gop_size))
    else:
        deltas = list(space.delta_qp_set)
    return [
        ModeSelection(q1, q2, dr, du)
        for q1, q2, dr, du in itertools.product(space.frame_qp_set, space.frame_qp_set, deltas, deltas)
    ]


def _fmt_delta(value: Delta) -> str:
    if isinstance(value, tuple):
        return ",".join(f"{d:+d}" for d in value)
    return f"{value:+d}"


def mode_key(mode: ModeSelection) -> str:
    """Canonical string, e.g. ``f22-27_r-1_u+3``."""
    return f"f{mode.qp_frame1}-{mode.qp_frame2}_r{_fmt_delta(mode.dqp_related)}_u{_fmt_delta(mode.dqp_unrelated)}"


_KEY_RE = re.compile(r"^f(\d+)-(\d+)_r([+-]\d+(?:,[+-]\d+)*)_u([+-]\d+(?:,[+-]\d+)*)$")


def parse_mode_key(key: str) -> ModeSelection:
    m = _KEY_RE.match(key)
    if m is None:
        raise FormatError(f"not a mode key: {key!r}")

    def delta(text):
        parts = tuple(int(p) for p in text.split(","))
        return parts if "," in text else parts[0]

    return ModeSelection(int(m.group(1)), int(m.group(2)), delta(m.group(3)), delta(m.group(4)))
