"""Parent (frame QP) and child (region delta-QP) actor-critic agents.

Episodes cover one mode decision: the parent takes two steps (QP of the
first and second GOP frame), the child two more (related delta, unrelated
delta) and the episode's only reward arrives at the end.

Randomness: every batch draws from
``default_rng(SeedSequence(seed, spawn_key=(stream, iteration)))`` where
``stream`` identifies the stage (see the ``STREAM_*`` constants), so a batch's
samples depend only on the master seed and its own index.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from semvc.codec_env import EncodeOutcome, VideoModel
from semvc.errors import ContractError, FormatError, TrainingError
from semvc.mode_space import ModeSelection, ModeSpace, enumerate_modes
from semvc.nn import a2c_loss_and_grads, gated_logits, init_mlp, log_softmax, mlp_forward

PARENT = "parent"
CHILD = "child"
FLAT = "flat"
ROLES = (PARENT, CHILD, FLAT)

STREAM_INIT = 0
STREAM_PARENT_CALIB = 1
STREAM_PARENT = 2
STREAM_CHILD_CALIB = 3
STREAM_CHILD = 4
STREAM_FLAT_CALIB = 5
STREAM_FLAT = 6

POLICY_FORMAT_VERSION = 1
CONTENT_FEATURES = ("mask_mean", "mask_max", "complexity_mean", "kappa_mean", "midpoint_mean", "related_frac")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10000
    batch_size: int = 30
    lr_parent: float = 1e-3
    lr_child: float = 1e-4
    gamma: float = 1.0
    entropy_coef: float = 0.01
    lam: float = 0.0
    calib_samples: int = 256
    seed: int = 0
    hidden: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.iterations < 0 or self.batch_size <= 0 or self.calib_samples <= 0:
            raise ContractError("iterations must be >= 0; batch_size and calib_samples positive")
        if not (self.lr_parent > 0 and self.lr_child > 0):
            raise ContractError("learning rates must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in (0, 1], got {self.gamma}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


# --------------------------------------------------------------------------- state


def decisions_per_gop(role: str, space: ModeSpace, gop_size: int) -> int:
    if role == CHILD and space.per_frame_deltas:
        return 2 * gop_size
    if role == FLAT:
        return 1
    return 2


def state_layout(role: str, n_decisions: int) -> tuple[str, ...]:
    names = list(CONTENT_FEATURES) + [f"pos{k}" for k in range(n_decisions)] + ["lambda"]
    if role == CHILD:
        names += ["parent_qp1", "parent_qp2"]
    return tuple(names)


def layout_hash(layout) -> str:
    return hashlib.sha256(",".join(layout).encode()).hexdigest()[:16]


def _anchor_frame(role: str, position: int, per_frame: bool) -> int:
    if role == PARENT:
        return position
    if role == CHILD:
        return position // 2 if per_frame else 0
    return 0


def build_state(
    model: VideoModel | None,
    position: int,
    role: str,
    parent_choice=None,
    lam: float = 0.0,
    *,
    n_decisions: int = 2,
    threshold: float = 0.25,
    per_frame: bool = False,
) -> np.ndarray:
    """Engineered state vector for one decision step.

    Content features aggregate the CTUs of a three-frame window starting at
    the decision's anchor frame in every GOP (clipped at the sequence end):
    mean and max mask ratio, mean complexity over ``ref_rate``, mean rate
    sensitivity, mean degradation midpoint over 51 and the related-CTU
    fraction. A one-hot decision index and ``lam`` follow; the child also
    sees the parent's two QPs over 51. Without a model the content features
    are zero.
    """
    if role not in ROLES:
        raise ContractError(f"unknown role {role!r}")
    if (parent_choice is not None) != (role == CHILD):
        raise ContractError("parent_choice is required for the child and only for the child")
    if not 0 <= position < n_decisions:
        raise ContractError(f"decision index {position} outside [0, {n_decisions})")

    content = np.zeros(len(CONTENT_FEATURES))
    if model is not None:
        anchor = _anchor_frame(role, position, per_frame)
        frames = []
        for gop in model.gops():
            start = gop.start + anchor
            if start < model.num_frames:
                frames.extend(range(start, min(start + 3, model.num_frames)))
        if frames:
            idx = np.array(sorted(set(frames)))
            S = model.mask[idx]
            content = np.array([
                S.mean(),
                S.max(),
                model.complexity[idx].mean() / model.ref_rate,
                model.kappa[idx].mean(),
                model.midpoint[idx].mean() / 51.0,
                float(np.mean(S >= threshold)),
            ])
    onehot = np.zeros(n_decisions)
    onehot[position] = 1.0
    parts = [content, onehot, [lam]]
    if role == CHILD:
        parts.append(np.asarray(parent_choice, dtype=float) / 51.0)
    return np.concatenate(parts)


# --------------------------------------------------------------------------- policies


@dataclass
class AgentPolicy:
    """Actor and critic MLPs of one agent.

    The actor's output layer holds one block of logits per decision index;
    a state selects its block through its own ``pos*`` one-hot entries.
    """

    role: str
    actions: tuple
    layout: tuple[str, ...]
    actor: list = field(repr=False)
    critic: list = field(repr=False)

    @property
    def input_dim(self) -> int:
        return self.actor[0].shape[0]

    @property
    def n_heads(self) -> int:
        return sum(1 for name in self.layout if name.startswith("pos"))

    def heads(self, states) -> np.ndarray:
        cols = [i for i, name in enumerate(self.layout) if name.startswith("pos")]
        return np.argmax(np.asarray(states)[:, cols], axis=1)

    def logits(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        out, _ = gated_logits(self.actor, states, self.heads(states), len(self.actions))
        return out

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.actor[0].shape[0],) + tuple(self.actor[i].shape[1] for i in range(0, len(self.actor), 2))

    def copy(self) -> "AgentPolicy":
        return replace(self, actor=[p.copy() for p in self.actor], critic=[p.copy() for p in self.critic])

    def __eq__(self, other):
        if not isinstance(other, AgentPolicy):
            return NotImplemented
        return (
            self.role == other.role
            and self.actions == other.actions
            and self.layout == other.layout
            and all(np.array_equal(a, b) for a, b in zip(self.actor + self.critic, other.actor + other.critic))
        )


def new_policy(role: str, actions, layout, hidden=(64, 64), seed: int = 0) -> AgentPolicy:
    rng = _rng(seed, STREAM_INIT, ROLES.index(role))
    d = len(layout)
    n_heads = sum(1 for name in layout if name.startswith("pos"))
    actor = init_mlp(rng, (d, *hidden, len(actions) * n_heads))
    critic = init_mlp(rng, (d, *hidden, 1))
    return AgentPolicy(role=role, actions=tuple(actions), layout=tuple(layout), actor=actor, critic=critic)


def policy_forward(policy: AgentPolicy, state) -> tuple[np.ndarray, float]:
    """Action distribution and state value for a single state."""
    x = np.asarray(state, dtype=float)
    if x.shape != (policy.input_dim,):
        raise ContractError(f"state has shape {x.shape}, policy expects ({policy.input_dim},)")
    logits = policy.logits(x[None])
    value, _ = mlp_forward(policy.critic, x[None])
    return np.exp(log_softmax(logits))[0], float(value[0, 0])


def _greedy_index(policy: AgentPolicy, state) -> int:
    return int(np.argmax(policy.logits(np.asarray(state, dtype=float)[None])[0]))


# --------------------------------------------------------------------------- rewards


def reward_frame(outcome: EncodeOutcome, lam: float, alpha: float = 0.0) -> float:
    """Frame-level reward: fidelity minus weighted normalized rate minus offset."""
    return outcome.fidelity - lam * outcome.normalized_rate - alpha


def reward_ctu(outcome: EncodeOutcome, lam: float, alpha: float = 0.0) -> float:
    """CTU-level reward for the full (parent, child) mode; same form as :func:`reward_frame`."""
    return outcome.fidelity - lam * outcome.normalized_rate - alpha


def objective(outcome: EncodeOutcome, lam: float) -> float:
    """Semantic RD cost ``(1 - fidelity) + lam * normalized_rate``."""
    return (1.0 - outcome.fidelity) + lam * outcome.normalized_rate


class EncodeCounter:
    """Memoizing front for an environment that counts every encode request."""

    def __init__(self, env):
        self.env = env
        self.calls = 0
        self._memo: dict = {}

    def __call__(self, mode: ModeSelection) -> EncodeOutcome:
        self.calls += 1
        out = self._memo.get(mode)
        if out is None:
            out = self._memo[mode] = self.env.encode_mode(mode)
        return out


def _identity_delta(space: ModeSpace, gop_size: int):
    d = min(space.delta_qp_set, key=lambda v: (abs(v), v))
    return (d,) * gop_size if space.per_frame_deltas else d


def _gop_size(env) -> int:
    model = getattr(env, "model", None)
    return model.gop_size if model is not None else 4


def calibration_modes(space: ModeSpace, role: str, samples: int, seed: int, parent_choice=None, gop_size: int = 4):
    """The uniformly random modes used to calibrate the reward offset of ``role``."""
    if samples < 1:
        raise ContractError("calibration needs at least one sample")
    Q, D = space.frame_qp_set, space.delta_qp_set
    if role == PARENT:
        rng = _rng(seed, STREAM_PARENT_CALIB)
        idx = rng.integers(0, len(Q), size=(samples, 2))
        zero = _identity_delta(space, gop_size)
        return [ModeSelection(Q[a], Q[b], zero, zero) for a, b in idx]
    if role == CHILD:
        if parent_choice is None:
            raise ContractError("child calibration needs the parent's greedy choice")
        rng = _rng(seed, STREAM_CHILD_CALIB)
        width = gop_size if space.per_frame_deltas else 1
        idx = rng.integers(0, len(D), size=(samples, 2, width))
        modes = []
        for row in idx:
            rel, unrel = (tuple(D[i] for i in r) for r in row)
            if not space.per_frame_deltas:
                rel, unrel = rel[0], unrel[0]
            modes.append(ModeSelection(parent_choice[0], parent_choice[1], rel, unrel))
        return modes
    if role == FLAT:
        rng = _rng(seed, STREAM_FLAT_CALIB)
        joint = enumerate_modes(space, gop_size)
        return [joint[i] for i in rng.integers(0, len(joint), size=samples)]
    raise ContractError(f"unknown role {role!r}")


def calibrate_alpha(env, space: ModeSpace, role: str, lam: float, samples: int = 256, seed: int = 0,
                    parent_choice=None, encoder=None) -> float:
    """Mean pre-offset reward over random modes, so the offset reward starts near zero."""
    encoder = encoder or EncodeCounter(env)
    modes = calibration_modes(space, role, samples, seed, parent_choice, _gop_size(env))
    rewards = [reward_frame(encoder(m), lam) for m in modes]
    return math.fsum(rewards) / len(rewards)


# --------------------------------------------------------------------------- A2C


@dataclass(frozen=True)
class Trajectory:
    states: tuple
    actions: tuple[int, ...]
    log_probs: tuple[float, ...]
    values: tuple[float, ...]
    reward: float


def step_returns(reward: float, n_steps: int, gamma: float) -> np.ndarray:
    """Return of each step when the only reward arrives after the last step."""
    return reward * gamma ** np.arange(n_steps - 1, -1, -1, dtype=float)


def _apply_update(policy: AgentPolicy, states, actions, returns, lr: float, entropy_coef: float,
                  state_index=None, heads=None):
    if heads is None:
        heads = policy.heads(states)
    with np.errstate(invalid="ignore", over="ignore"):
        report, ga, gc = a2c_loss_and_grads(policy.actor, policy.critic, states, actions, returns, entropy_coef,
                                            heads=heads, n_actions=len(policy.actions), state_index=state_index)
    if not math.isfinite(report.total):
        raise TrainingError(
            f"non-finite A2C loss for {policy.role} policy: policy={report.policy} "
            f"value={report.value} entropy={report.entropy}"
        )
    actor = [p - lr * g for p, g in zip(policy.actor, ga)]
    critic = [p - lr * g for p, g in zip(policy.critic, gc)]
    return replace(policy, actor=actor, critic=critic), report


def a2c_update(policy: AgentPolicy, trajectories, config: TrainConfig, lr: float | None = None):
    """One plain gradient step on a batch of finished trajectories."""
    if not trajectories:
        raise ContractError("a2c_update needs a non-empty batch")
    if lr is None:
        lr = config.lr_child if policy.role == CHILD else config.lr_parent
    states, actions, returns = [], [], []
    for traj in trajectories:
        states.extend(traj.states)
        actions.extend(traj.actions)
        returns.extend(step_returns(traj.reward, len(traj.actions), config.gamma))
    unique, index = np.unique(np.array(states, dtype=float), axis=0, return_inverse=True)
    return _apply_update(policy, unique, actions, returns, lr, config.entropy_coef, state_index=index.ravel())


# --------------------------------------------------------------------------- training


@dataclass
class TrainLog:
    stage: list = field(default_factory=list)
    iteration: list = field(default_factory=list)
    mean_reward: list = field(default_factory=list)
    policy_loss: list = field(default_factory=list)
    value_loss: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    encodes: list = field(default_factory=list)
    alphas: dict = field(default_factory=dict)

    def record(self, stage, it, rewards, report, encodes):
        self.stage.append(stage)
        self.iteration.append(it)
        self.mean_reward.append(float(np.mean(rewards)))
        self.policy_loss.append(report.policy)
        self.value_loss.append(report.value)
        self.entropy.append(report.entropy)
        self.encodes.append(encodes)

    @property
    def total_encodes(self) -> int:
        return self.encodes[-1] if self.encodes else 0

    def rows(self):
        return zip(self.stage, self.iteration, self.mean_reward, self.policy_loss,
                   self.value_loss, self.entropy, self.encodes)


def _sample(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling; ``probs`` is (steps, K), ``u`` is (batch, steps)."""
    cdf = np.cumsum(probs, axis=1)
    idx = (u[:, :, None] >= cdf[None, :, :]).sum(axis=2)
    return np.minimum(idx, probs.shape[1] - 1)


def _run_stage(policy, step_states, make_mode, reward_fn, encoder, config, lr, stream, stage_name, log):
    n_steps = len(step_states)
    step_index = np.tile(np.arange(n_steps), config.batch_size)
    heads = policy.heads(step_states)
    discounts = config.gamma ** np.arange(n_steps - 1, -1, -1, dtype=float)
    rewards_by_row: dict = {}
    for it in range(config.iterations):
        rng = _rng(config.seed, stream, it)
        logits = policy.logits(step_states)
        probs = np.exp(log_softmax(logits))
        acts = _sample(probs, rng.random((config.batch_size, n_steps)))
        rewards = np.empty(config.batch_size)
        for b, row in enumerate(acts.tolist()):
            key = tuple(row)
            r = rewards_by_row.get(key)
            if r is None:
                r = rewards_by_row[key] = reward_fn(encoder(make_mode(row)))
            else:
                encoder.calls += 1
            rewards[b] = r
        returns = (rewards[:, None] * discounts[None, :]).ravel()
        policy, report = _apply_update(policy, step_states, acts.ravel(), returns, lr, config.entropy_coef,
                                       state_index=step_index, heads=heads)
        log.record(stage_name, it, rewards, report, encoder.calls)
    return policy


def _parent_states(model, space, lam, gop_size):
    n = decisions_per_gop(PARENT, space, gop_size)
    return np.array([
        build_state(model, k, PARENT, None, lam, n_decisions=n, threshold=space.region_threshold)
        for k in range(n)
    ])


def _child_states(model, space, lam, gop_size, parent_choice):
    n = decisions_per_gop(CHILD, space, gop_size)
    return np.array([
        build_state(model, k, CHILD, parent_choice, lam, n_decisions=n,
                    threshold=space.region_threshold, per_frame=space.per_frame_deltas)
        for k in range(n)
    ])


def _child_mode(space, parent_choice, row):
    D = space.delta_qp_set
    if space.per_frame_deltas:
        rel = tuple(D[i] for i in row[0::2])
        unrel = tuple(D[i] for i in row[1::2])
    else:
        rel, unrel = D[row[0]], D[row[1]]
    return ModeSelection(parent_choice[0], parent_choice[1], rel, unrel)


def parent_greedy(parent: AgentPolicy, model, space: ModeSpace, lam: float, gop_size: int = 4) -> tuple[int, int]:
    states = _parent_states(model, space, lam, gop_size)
    Q = space.frame_qp_set
    return tuple(Q[_greedy_index(parent, s)] for s in states)


def greedy_mode(parent: AgentPolicy, child: AgentPolicy, env, space: ModeSpace, lam: float) -> ModeSelection:
    """Deterministic inference: argmax at every step, ties to the lower action index."""
    model = getattr(env, "model", None)
    gop = _gop_size(env)
    choice = parent_greedy(parent, model, space, lam, gop)
    states = _child_states(model, space, lam, gop, choice)
    row = np.array([_greedy_index(child, s) for s in states])
    return _child_mode(space, choice, row)


def train_hierarchical(env, space: ModeSpace, config: TrainConfig):
    """Staged training: parent with identity child, then child under the frozen greedy parent.

    Returns ``(parent, child, log)``; ``log.total_encodes`` counts every
    environment request including reward calibration.
    """
    model = getattr(env, "model", None)
    gop = _gop_size(env)
    lam = config.lam
    encoder = EncodeCounter(env)
    log = TrainLog()
    Q = space.frame_qp_set
    zero = _identity_delta(space, gop)

    n_parent = decisions_per_gop(PARENT, space, gop)
    parent = new_policy(PARENT, Q, state_layout(PARENT, n_parent), config.hidden, config.seed)
    alpha_f = calibrate_alpha(env, space, PARENT, lam, config.calib_samples, config.seed, encoder=encoder)
    log.alphas["alpha_f"] = alpha_f
    parent = _run_stage(
        parent,
        _parent_states(model, space, lam, gop),
        lambda row: ModeSelection(Q[row[0]], Q[row[1]], zero, zero),
        lambda out: reward_frame(out, lam, alpha_f),
        encoder, config, config.lr_parent, STREAM_PARENT, PARENT, log,
    )

    choice = parent_greedy(parent, model, space, lam, gop)
    n_child = decisions_per_gop(CHILD, space, gop)
    child = new_policy(CHILD, space.delta_qp_set, state_layout(CHILD, n_child), config.hidden, config.seed)
    alpha_c = calibrate_alpha(env, space, CHILD, lam, config.calib_samples, config.seed,
                              parent_choice=choice, encoder=encoder)
    log.alphas["alpha_c"] = alpha_c
    child = _run_stage(
        child,
        _child_states(model, space, lam, gop, choice),
        lambda row: _child_mode(space, choice, row),
        lambda out: reward_ctu(out, lam, alpha_c),
        encoder, config, config.lr_child, STREAM_CHILD, CHILD, log,
    )
    return parent, child, log


def flat_state(model, space: ModeSpace, lam: float) -> np.ndarray:
    return build_state(model, 0, FLAT, None, lam, n_decisions=1, threshold=space.region_threshold)


def train_flat(env, space: ModeSpace, config: TrainConfig, encode_budget: int | None = None):
    """Single agent over the joint mode alphabet with one-step episodes.

    With ``encode_budget`` the iteration count is chosen so the total number
    of environment requests (calibration included) does not exceed it.
    """
    model = getattr(env, "model", None)
    gop = _gop_size(env)
    joint = enumerate_modes(space, gop)
    lam = config.lam
    encoder = EncodeCounter(env)
    log = TrainLog()
    policy = new_policy(FLAT, range(len(joint)), state_layout(FLAT, 1), config.hidden, config.seed)
    alpha = calibrate_alpha(env, space, FLAT, lam, config.calib_samples, config.seed, encoder=encoder)
    log.alphas["alpha"] = alpha
    if encode_budget is not None:
        config = replace(config, iterations=max(0, (encode_budget - encoder.calls) // config.batch_size))
    policy = _run_stage(
        policy,
        flat_state(model, space, lam)[None],
        lambda row: joint[row[0]],
        lambda out: reward_ctu(out, lam, alpha),
        encoder, config, config.lr_parent, STREAM_FLAT, FLAT, log,
    )
    return policy, log


def flat_greedy_mode(policy: AgentPolicy, env, space: ModeSpace, lam: float) -> ModeSelection:
    joint = enumerate_modes(space, _gop_size(env))
    return joint[_greedy_index(policy, flat_state(getattr(env, "model", None), space, lam))]


# --------------------------------------------------------------------------- persistence


def save_policy(policy: AgentPolicy, path) -> None:
    """Versioned text file; floats are written with ``repr`` so loading is bit-exact."""
    lines = [
        f"format_version={POLICY_FORMAT_VERSION}",
        f"role={policy.role}",
        "layer_dims=" + ",".join(str(d) for d in policy.layer_dims),
        "actions=" + ",".join(str(a) for a in policy.actions),
        "state_layout=" + ",".join(policy.layout),
        f"state_layout_hash={layout_hash(policy.layout)}",
    ]
    for net, params in (("actor", policy.actor), ("critic", policy.critic)):
        for i, p in enumerate(params):
            shape = "x".join(str(s) for s in p.shape)
            lines.append(f"tensor {net}.{i} {shape}")
            lines.append(" ".join(repr(float(v)) for v in p.ravel()))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_policy(path) -> AgentPolicy:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header: dict[str, str] = {}
    i = 0
    while i < len(lines) and not lines[i].startswith("tensor "):
        key, sep, value = lines[i].partition("=")
        if not sep:
            raise FormatError(f"{path}:{i + 1}: expected key=value")
        header[key] = value
        i += 1
    for key in ("format_version", "role", "layer_dims", "actions", "state_layout", "state_layout_hash"):
        if key not in header:
            raise FormatError(f"{path}: missing header key {key!r}")
    if header["format_version"] != str(POLICY_FORMAT_VERSION):
        raise FormatError(f"{path}: unsupported format_version {header['format_version']!r}")
    layout = tuple(header["state_layout"].split(","))
    if layout_hash(layout) != header["state_layout_hash"]:
        raise FormatError(f"{path}: state layout hash mismatch")
    tensors: dict[str, list] = {"actor": [], "critic": []}
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) != 3 or parts[0] != "tensor" or i + 1 >= len(lines):
            raise FormatError(f"{path}:{i + 1}: malformed tensor header")
        net, _, _ = parts[1].partition(".")
        shape = tuple(int(s) for s in parts[2].split("x"))
        try:
            data = np.array([float(v) for v in lines[i + 1].split()], dtype=float)
            tensors[net].append(data.reshape(shape))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}:{i + 2}: {exc}") from None
        i += 2
    actions = tuple(int(a) for a in header["actions"].split(","))
    policy = AgentPolicy(header["role"], actions, layout, tensors["actor"], tensors["critic"])
    dims = ",".join(str(d) for d in policy.layer_dims)
    if dims != header["layer_dims"]:
        raise FormatError(f"{path}: layer_dims {header['layer_dims']} do not match tensors ({dims})")
    return policy
