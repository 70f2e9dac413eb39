"""Codec environments: a mode goes in, per-CTU rates and a semantic fidelity come out.

Two implementations share the ``encode_mode`` contract:

* :class:`SyntheticEnv` evaluates the analytic model (:func:`encode`) on a
  :class:`VideoModel`.
* :class:`TraceEnv` answers from a table of externally measured outcomes
  (see :func:`load_trace`).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from semvc.errors import ContractError, FormatError, UnknownModeError

QP_MIN = 0
QP_MAX = 51
QP_REF = 32
EPS_MASK = 1e-9
MODEL_FORMAT_VERSION = 1
TRACE_HEADER = ("mode_key", "total_rate", "fidelity", "frame_rates")


@dataclass(frozen=True)
class CtuModel:
    complexity: float
    rate_sensitivity: float
    mask_ratio: float
    degrade_midpoint: float
    degrade_steepness: float

    def __post_init__(self):
        if not self.complexity > 0:
            raise ContractError(f"complexity must be > 0, got {self.complexity}")
        if not self.rate_sensitivity > 0:
            raise ContractError(f"rate_sensitivity must be > 0, got {self.rate_sensitivity}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ContractError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if not self.degrade_steepness > 0:
            raise ContractError(f"degrade_steepness must be > 0, got {self.degrade_steepness}")


@dataclass(frozen=True)
class FrameModel:
    ctus: tuple[CtuModel, ...]
    is_intra: bool = False


@dataclass(frozen=True)
class VideoModel:
    """Synthetic sequence: GOP layout plus per-CTU rate and semantic parameters.

    Dense ``(frames, ctus)`` arrays of every parameter are built once at
    construction and exposed as read-only attributes (``complexity``,
    ``kappa``, ``mask``, ``midpoint``, ``steepness``).
    """

    frames: tuple[FrameModel, ...]
    gop_size: int
    ctu_grid: tuple[int, int]
    intra_factor: float = 1.5
    prop_decay: float = 0.3
    complexity: np.ndarray = field(init=False, repr=False, compare=False)
    kappa: np.ndarray = field(init=False, repr=False, compare=False)
    mask: np.ndarray = field(init=False, repr=False, compare=False)
    midpoint: np.ndarray = field(init=False, repr=False, compare=False)
    steepness: np.ndarray = field(init=False, repr=False, compare=False)
    intra: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "ctu_grid", tuple(int(v) for v in self.ctu_grid))
        rows, cols = self.ctu_grid
        if not self.frames:
            raise ContractError("a model needs at least one frame")
        if rows <= 0 or cols <= 0:
            raise ContractError(f"ctu_grid must be positive, got {self.ctu_grid}")
        if self.gop_size <= 0:
            raise ContractError(f"gop_size must be positive, got {self.gop_size}")
        if self.intra_factor < 1.0:
            raise ContractError(f"intra_factor must be >= 1, got {self.intra_factor}")
        if not 0.0 <= self.prop_decay < 1.0:
            raise ContractError(f"prop_decay must lie in [0, 1), got {self.prop_decay}")
        for t, frame in enumerate(self.frames):
            if len(frame.ctus) != rows * cols:
                raise ContractError(
                    f"frame {t} has {len(frame.ctus)} CTUs, grid needs {rows * cols}"
                )
            if frame.is_intra != (t == 0):
                raise ContractError("exactly one intra frame is allowed, at index 0")

        def dense(attr):
            arr = np.array([[getattr(c, attr) for c in f.ctus] for f in self.frames], dtype=float)
            arr.setflags(write=False)
            return arr

        object.__setattr__(self, "complexity", dense("complexity"))
        object.__setattr__(self, "kappa", dense("rate_sensitivity"))
        object.__setattr__(self, "mask", dense("mask_ratio"))
        object.__setattr__(self, "midpoint", dense("degrade_midpoint"))
        object.__setattr__(self, "steepness", dense("degrade_steepness"))
        intra = np.array([f.is_intra for f in self.frames])
        intra.setflags(write=False)
        object.__setattr__(self, "intra", intra)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def num_ctus(self) -> int:
        return self.ctu_grid[0] * self.ctu_grid[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_frames, self.num_ctus)

    @property
    def ref_rate(self) -> float:
        """Total bits of the whole model with every CTU at ``QP_REF``."""
        factors = np.where(self.intra, self.intra_factor, 1.0)
        return float(np.sum(self.complexity * factors[:, None]))

    def gops(self) -> list[range]:
        """Frame index ranges of each GOP; the last one may be short."""
        return [
            range(start, min(start + self.gop_size, self.num_frames))
            for start in range(0, self.num_frames, self.gop_size)
        ]


@dataclass(frozen=True)
class EncodeOutcome:
    """Rates and semantic fidelity of one encode.

    ``ctu_rates`` is ``None`` for trace-backed outcomes, which only record
    per-frame totals.
    """

    frame_rates: tuple[float, ...]
    total_rate: float
    fidelity: float
    normalized_rate: float
    ctu_rates: np.ndarray | None = field(default=None, compare=False, repr=False)


def _check_qp(qp):
    arr = np.asarray(qp)
    if arr.size and (np.any(arr < QP_MIN) or np.any(arr > QP_MAX)):
        raise ContractError(f"QP outside [{QP_MIN}, {QP_MAX}]: {qp!r}")


def ctu_rate(ctu: CtuModel, qp: int, is_intra: bool = False, intra_factor: float = 1.5) -> float:
    """Bits of one CTU: ``c * 2**(kappa * (QP_REF - qp) / 6)``, scaled for intra frames."""
    _check_qp(qp)
    bits = ctu.complexity * 2.0 ** (ctu.rate_sensitivity * (QP_REF - qp) / 6.0)
    return bits * intra_factor if is_intra else bits


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def encode(model: VideoModel, qp_map) -> EncodeOutcome:
    """Evaluate rates and semantic fidelity of a per-frame, per-CTU QP map.

    Each CTU degrades by ``logistic((q - mu) / tau)``. Inter frames inherit
    ``prop_decay`` times the mask-weighted mean degradation of the previous
    frame, clipped at 1. Fidelity is one minus the mask-weighted mean
    degradation over the sequence.
    """
    q = np.asarray(qp_map)
    if q.shape != model.shape:
        raise ContractError(f"qp_map shape {q.shape} does not match model {model.shape}")
    if not np.issubdtype(q.dtype, np.integer):
        if not np.all(np.equal(np.mod(q, 1), 0)):
            raise ContractError("qp_map must hold integer QPs")
    _check_qp(q)
    q = q.astype(float)

    factors = np.where(model.intra, model.intra_factor, 1.0)
    rates = model.complexity * np.exp2(model.kappa * (QP_REF - q) / 6.0) * factors[:, None]
    frame_rates = rates.sum(axis=1)
    total = float(frame_rates.sum())

    local = _logistic((q - model.midpoint) / model.steepness)
    mask = model.mask
    frame_mask = mask.sum(axis=1)
    eff = np.empty_like(local)
    prev_mean = 0.0
    for t in range(model.num_frames):
        if model.intra[t]:
            eff[t] = np.minimum(1.0, local[t])
        else:
            eff[t] = np.minimum(1.0, local[t] + model.prop_decay * prev_mean)
        prev_mean = float(mask[t] @ eff[t]) / max(float(frame_mask[t]), EPS_MASK)
    weighted = float(np.sum(mask * eff))
    fidelity = 1.0 - weighted / max(float(mask.sum()), EPS_MASK)
    fidelity = min(1.0, max(0.0, fidelity))

    rates.setflags(write=False)
    return EncodeOutcome(
        frame_rates=tuple(float(r) for r in frame_rates),
        total_rate=total,
        fidelity=fidelity,
        normalized_rate=total / model.ref_rate,
        ctu_rates=rates,
    )


# --------------------------------------------------------------------------- generation


@dataclass(frozen=True)
class GenSpec:
    """Parameter ranges for :func:`gen_model`; every range is sampled uniformly.

    Each CTU position is background (``mask_ratio == 0`` in every frame) with
    probability ``1 - semantic_fraction``. Per-frame values jitter around the
    position's base draw: complexity by a relative ``complexity_jitter`` and
    mask ratio by an absolute ``mask_jitter`` (semantic CTUs stay above zero).
    """

    frames: int = 4
    rows: int = 4
    cols: int = 4
    gop_size: int = 4
    intra_factor: float = 1.5
    prop_decay: float = 0.3
    complexity: tuple[float, float] = (400.0, 1600.0)
    rate_sensitivity: tuple[float, float] = (0.8, 1.25)
    mask_ratio: tuple[float, float] = (0.0, 1.0)
    degrade_midpoint: tuple[float, float] = (28.0, 40.0)
    degrade_steepness: tuple[float, float] = (2.5, 5.0)
    semantic_fraction: float = 0.6
    complexity_jitter: float = 0.1
    mask_jitter: float = 0.05

    def validate(self):
        if min(self.frames, self.rows, self.cols, self.gop_size) <= 0:
            raise ContractError("frames, rows, cols and gop_size must be positive")
        for name in ("complexity", "rate_sensitivity", "mask_ratio", "degrade_midpoint", "degrade_steepness"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ContractError(f"empty range for {name}: ({lo}, {hi})")
        if self.complexity[0] <= 0 or self.rate_sensitivity[0] <= 0 or self.degrade_steepness[0] <= 0:
            raise ContractError("complexity, rate_sensitivity and steepness ranges must be positive")
        if not (0.0 <= self.mask_ratio[0] and self.mask_ratio[1] <= 1.0):
            raise ContractError("mask_ratio range must lie within [0, 1]")
        if not 0.0 <= self.semantic_fraction <= 1.0:
            raise ContractError("semantic_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "GenSpec":
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs)


def gen_model(seed: int, spec: GenSpec = GenSpec()) -> VideoModel:
    """Draw a deterministic synthetic model for ``(seed, spec)``."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = spec.rows * spec.cols
    T = spec.frames

    def uniform(bounds, size):
        return rng.uniform(bounds[0], bounds[1], size=size)

    c_base = uniform(spec.complexity, n)
    kappa = uniform(spec.rate_sensitivity, n)
    mid = uniform(spec.degrade_midpoint, n)
    steep = uniform(spec.degrade_steepness, n)
    semantic = rng.random(n) < spec.semantic_fraction
    s_base = uniform(spec.mask_ratio, n)
    c_jit = uniform((-spec.complexity_jitter, spec.complexity_jitter), (T, n))
    s_jit = uniform((-spec.mask_jitter, spec.mask_jitter), (T, n))

    complexity = np.maximum(c_base * (1.0 + c_jit), 1e-6)
    lo = max(spec.mask_ratio[0], 1e-3)
    mask = np.where(semantic, np.clip(s_base + s_jit, lo, spec.mask_ratio[1]), 0.0)

    frames = []
    for t in range(T):
        ctus = tuple(
            CtuModel(
                complexity=float(complexity[t, i]),
                rate_sensitivity=float(kappa[i]),
                mask_ratio=float(mask[t, i]),
                degrade_midpoint=float(mid[i]),
                degrade_steepness=float(steep[i]),
            )
            for i in range(n)
        )
        frames.append(FrameModel(ctus=ctus, is_intra=(t == 0)))
    return VideoModel(
        frames=tuple(frames),
        gop_size=spec.gop_size,
        ctu_grid=(spec.rows, spec.cols),
        intra_factor=spec.intra_factor,
        prop_decay=spec.prop_decay,
    )


# --------------------------------------------------------------------------- model files


def model_to_dict(model: VideoModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "gop_size": model.gop_size,
        "ctu_grid": list(model.ctu_grid),
        "intra_factor": model.intra_factor,
        "prop_decay": model.prop_decay,
        "frames": [
            {
                "is_intra": f.is_intra,
                "ctus": [
                    [c.complexity, c.rate_sensitivity, c.mask_ratio, c.degrade_midpoint, c.degrade_steepness]
                    for c in f.ctus
                ],
            }
            for f in model.frames
        ],
    }


def model_from_dict(data: dict) -> VideoModel:
    version = data.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format_version {version!r}")
    try:
        frames = tuple(
            FrameModel(ctus=tuple(CtuModel(*map(float, row)) for row in f["ctus"]), is_intra=bool(f["is_intra"]))
            for f in data["frames"]
        )
        return VideoModel(
            frames=frames,
            gop_size=int(data["gop_size"]),
            ctu_grid=tuple(data["ctu_grid"]),
            intra_factor=float(data["intra_factor"]),
            prop_decay=float(data["prop_decay"]),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed model file: {exc}") from exc


def save_model(model: VideoModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> VideoModel:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return model_from_dict(data)


# --------------------------------------------------------------------------- environments


class SyntheticEnv:
    """Analytic environment: expands a mode over ``model`` and runs :func:`encode`."""

    def __init__(self, model: VideoModel, space):
        from semvc.mode_space import partition_regions

        space.check_gop(model.gop_size)
        self.model = model
        self.space = space
        self.partition = partition_regions(model, space)
        self.ref_rate = model.ref_rate

    def qp_map(self, mode) -> np.ndarray:
        from semvc.mode_space import expand_mode

        return expand_mode(mode, self.model, self.space, self.partition)

    def encode_mode(self, mode) -> EncodeOutcome:
        return encode(self.model, self.qp_map(mode))

    def encode_qp_map(self, qp_map) -> EncodeOutcome:
        return encode(self.model, qp_map)


class TraceEnv:
    """Lookup environment over recorded outcomes keyed by canonical mode string.

    ``model`` is optional and only used by agents for state features.
    """

    def __init__(self, table: dict[str, EncodeOutcome], ref_rate: float, model: VideoModel | None = None):
        self.table = dict(table)
        self.ref_rate = ref_rate
        self.model = model

    def encode_key(self, key: str) -> EncodeOutcome:
        try:
            return self.table[key]
        except KeyError:
            raise UnknownModeError(f"unknown mode {key!r}") from None

    def encode_mode(self, mode) -> EncodeOutcome:
        from semvc.mode_space import mode_key

        return self.encode_key(mode_key(mode))

    def __len__(self):
        return len(self.table)


def write_trace(path, rows: Sequence[tuple[str, EncodeOutcome]], ref_rate: float | None = None) -> None:
    """Write outcomes in the trace CSV format with round-trip float precision."""
    buf = io.StringIO()
    if ref_rate is not None:
        buf.write(f"# ref_rate={ref_rate!r}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for key, out in rows:
        writer.writerow([key, repr(out.total_rate), repr(out.fidelity), ";".join(repr(r) for r in out.frame_rates)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_trace(path, ref_rate: float | None = None, model: VideoModel | None = None) -> TraceEnv:
    """Parse a trace CSV into a :class:`TraceEnv`.

    A ``# ref_rate=<bits>`` comment supplies the rate normalization unless
    ``ref_rate`` is passed explicitly; without either, the largest recorded
    total rate is used.
    """
    table: dict[str, EncodeOutcome] = {}
    header_seen = False
    file_ref = None
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                body = text[1:].strip()
                if body.startswith("ref_rate="):
                    try:
                        file_ref = float(body.split("=", 1)[1])
                    except ValueError:
                        raise FormatError(f"{path}:{lineno}: bad ref_rate comment") from None
                continue
            fields = next(csv.reader([text]))
            if not header_seen:
                if tuple(fields) != TRACE_HEADER:
                    raise FormatError(f"{path}:{lineno}: missing header {','.join(TRACE_HEADER)}")
                header_seen = True
                continue
            if len(fields) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
            key = fields[0]
            if key in table:
                raise FormatError(f"{path}:{lineno}: duplicate mode key {key!r}")
            try:
                total = float(fields[1])
                fid = float(fields[2])
                frames = tuple(float(v) for v in fields[3].split(";")) if fields[3] else ()
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            table[key] = (total, fid, frames)
    if not header_seen:
        raise FormatError(f"{path}: missing header {','.join(TRACE_HEADER)}")
    ref = ref_rate if ref_rate is not None else file_ref
    if ref is None:
        ref = max((v[0] for v in table.values()), default=1.0)
    if not ref > 0 or not math.isfinite(ref):
        raise FormatError(f"{path}: ref_rate must be positive")
    outcomes = {
        key: EncodeOutcome(frame_rates=frames, total_rate=total, fidelity=fid, normalized_rate=total / ref)
        for key, (total, fid, frames) in table.items()
    }
    return TraceEnv(outcomes, ref_rate=ref, model=model)
