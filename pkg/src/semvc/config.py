"""Run configuration: every knob of a run in one versioned JSON document."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from semvc.agents import TrainConfig
from semvc.baselines import SHAPES
from semvc.codec_env import GenSpec
from semvc.errors import ContractError, FormatError
from semvc.mode_space import ModeSpace

CONFIG_FORMAT_VERSION = 1
DEFAULT_LAMBDAS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.4, 0.6, 0.8, 1.0)
BD_VARIANTS = ("classic",)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    gen: GenSpec = field(default_factory=GenSpec)
    space: ModeSpace = field(default_factory=ModeSpace)
    train: TrainConfig = field(default_factory=TrainConfig)
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    anchor_qps: tuple[int, ...] = (22, 27, 32, 37)
    handcrafted_shapes: tuple[str, ...] = SHAPES
    curvature: float = 4.0
    delta_span: int = 3
    # None: the flat agent gets exactly as many encodes as hierarchical training used
    flat_budget: int | None = None
    bd_variant: str = "classic"

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        object.__setattr__(self, "anchor_qps", tuple(int(v) for v in self.anchor_qps))
        object.__setattr__(self, "handcrafted_shapes", tuple(self.handcrafted_shapes))
        if not self.lambdas or any(v < 0 for v in self.lambdas):
            raise ContractError("lambdas must be a non-empty list of non-negative values")
        if len(set(self.lambdas)) != len(self.lambdas):
            raise ContractError("lambdas must be distinct")
        if not self.anchor_qps:
            raise ContractError("anchor_qps must be non-empty")
        bad = [s for s in self.handcrafted_shapes if s not in SHAPES]
        if bad:
            raise ContractError(f"unknown hand-crafted shapes {bad}")
        if self.bd_variant not in BD_VARIANTS:
            raise ContractError(f"bd_variant must be one of {BD_VARIANTS}")
        if self.flat_budget is not None and self.flat_budget <= 0:
            raise ContractError("flat_budget must be positive")
        self.gen.validate()
        self.space.check_gop(self.gen.gop_size)

    def train_config(self, lam: float) -> TrainConfig:
        """Training settings for one λ; the run seed always wins over ``train.seed``."""
        return replace(self.train, lam=float(lam), seed=self.seed)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return {
            "format_version": CONFIG_FORMAT_VERSION,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "gen": self.gen.to_dict(),
            "space": self.space.to_dict(),
            "train": self.train.to_dict(),
            "lambdas": list(self.lambdas),
            "anchor_qps": list(self.anchor_qps),
            "handcrafted_shapes": list(self.handcrafted_shapes),
            "curvature": self.curvature,
            "delta_span": self.delta_span,
            "flat_budget": self.flat_budget,
            "bd_variant": self.bd_variant,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        version = data.pop("format_version", None)
        if version != CONFIG_FORMAT_VERSION:
            raise FormatError(f"config format_version {version!r} is not {CONFIG_FORMAT_VERSION}")
        try:
            return cls(
                gen=GenSpec.from_dict(data.pop("gen", {})),
                space=ModeSpace.from_dict(data.pop("space", {})),
                train=TrainConfig.from_dict(data.pop("train", {})),
                **data,
            )
        except TypeError as exc:
            raise FormatError(f"bad config: {exc}") from None


def dumps(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


def config_hash(config: RunConfig) -> str:
    """Digest of everything that affects results; the output directory does not."""
    data = config.to_dict()
    data.pop("out_dir")
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(dumps(config), encoding="utf-8")


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: top level must be an object")
    return RunConfig.from_dict(data)
