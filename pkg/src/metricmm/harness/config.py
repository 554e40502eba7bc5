"""Run configuration.

Config files are INI-style: ``[section]`` headers and ``key = value`` lines,
read with :mod:`configparser`. Unknown keys are rejected so typos surface as
usage errors. Example::

    [run]
    env = pendulum
    estimator = metricmm
    seeds = 0, 1, 2
    total_steps = 30000

    [sac]
    batch_size = 128

    [eval]
    corruptions = failure:0.9:1:1, gaussian:0.9:1:0
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from metricmm.corrupt import CorruptionKind, CorruptionSpec
from metricmm.errors import ConfigurationError
from metricmm.sac import SacConfig

ESTIMATORS = ("metricmm", "linearcomb", "concat", "metricmm_no_inv", "metricmm_no_metric")
ENVIRONMENTS = ("pendulum", "gridworld")


@dataclass
class TrainConfig:
    env: str = "pendulum"
    estimator: str = "metricmm"
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs/default"
    deterministic: bool = True
    # pendulum / RL
    total_steps: int = 100_000
    warmup_steps: int = 1_000
    eval_every: int = 5_000
    eval_episodes: int = 10
    joint_gradients: bool = False
    sigma: float = 0.0
    episode_length: int = 200
    # representation
    d_z: int = 16
    hidden: tuple[int, ...] = (64, 64)
    transition_hidden: tuple[int, ...] = (64, 64)
    lambda_positive: float = 1.0
    lambda_negative: float = 1.0
    lambda_invariance: float = 1.0
    delta: float = 1e-5
    repr_lr: float = 1e-3
    # gridworld representation-only training
    map_path: str | None = None
    dataset_transitions: int = 50_000
    gradient_steps: int = 5_000
    repr_batch_size: int = 256
    walk_length: int = 100
    sac: SacConfig = field(default_factory=SacConfig)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.transition_hidden = tuple(int(h) for h in self.transition_hidden)
        self.validate()

    def validate(self) -> None:
        if self.env not in ENVIRONMENTS:
            raise ConfigurationError(f"env: unknown environment {self.env!r}")
        if self.estimator not in ESTIMATORS:
            raise ConfigurationError(f"estimator: unknown estimator {self.estimator!r}")
        if self.env == "gridworld" and not self.estimator.startswith("metricmm"):
            raise ConfigurationError("estimator: gridworld supports only metricmm variants (no RL)")
        if not self.seeds:
            raise ConfigurationError("seeds: seed list must be non-empty")
        for name in ("total_steps", "warmup_steps", "dataset_transitions", "gradient_steps"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name}: must be >= 0")
        for name in ("eval_every", "eval_episodes", "d_z", "repr_batch_size", "walk_length", "episode_length"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be >= 1")

    def loss_weights(self):
        """Loss weights with the estimator variant applied."""
        from metricmm.model import LossWeights

        lp, ln, li = self.lambda_positive, self.lambda_negative, self.lambda_invariance
        if self.estimator == "metricmm_no_inv":
            li = 0.0
        elif self.estimator == "metricmm_no_metric":
            lp = ln = 0.0
        return LossWeights(lp, ln, li)

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sac"] = dataclasses.asdict(self.sac)
        return d


@dataclass
class EvalSpec:
    checkpoints: tuple[str, ...]
    corruptions: tuple[CorruptionSpec, ...] = ()
    episodes: int = 50
    out_path: str = "eval.csv"
    deterministic_actions: bool = True
    bank_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigurationError("episodes: must be >= 1")
        if not self.checkpoints:
            raise ConfigurationError("checkpoint: at least one checkpoint is required")


_RUN_KEYS = {
    "env": str, "estimator": str, "out_dir": str, "out": str, "deterministic": bool,
    "total_steps": int, "warmup_steps": int, "eval_every": int, "eval_episodes": int,
    "joint_gradients": bool, "sigma": float, "episode_length": int, "seeds": "ints",
}
_MODEL_KEYS = {
    "d_z": int, "hidden": "ints", "transition_hidden": "ints", "lambda_positive": float,
    "lambda_negative": float, "lambda_invariance": float, "delta": float, "repr_lr": float,
}
_GRID_KEYS = {
    "map_path": str, "dataset_transitions": int, "gradient_steps": int,
    "repr_batch_size": int, "walk_length": int,
}
_SAC_KEYS = {
    "gamma": float, "tau": float, "actor_lr": float, "critic_lr": float, "alpha_lr": float,
    "buffer_capacity": int, "batch_size": int, "init_alpha": float, "n_critics": int,
    "target_entropy": float, "hidden": "ints", "workers": int, "encoder_tau": float,
}


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind == "ints":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigurationError(f"[{section}] {key}: cannot parse {raw!r}") from None


def parse_corruption(text: str) -> CorruptionSpec:
    """``kind:p[:K[:targets]]`` with targets separated by ``+`` (e.g. ``failure:0.9:1:0+1``)."""
    parts = text.strip().split(":")
    if len(parts) < 2:
        raise ConfigurationError(f"corruptions: expected kind:p[:K[:targets]], got {text!r}")
    kind = CorruptionKind.parse(parts[0])
    try:
        p = float(parts[1])
        K = int(parts[2]) if len(parts) > 2 and parts[2] else 1
        targets = tuple(int(t) for t in parts[3].split("+")) if len(parts) > 3 else (0,)
    except ValueError:
        raise ConfigurationError(f"corruptions: cannot parse {text!r}") from None
    return CorruptionSpec(kind, p, K, targets)


def format_corruption(spec: CorruptionSpec) -> str:
    return f"{spec.kind.value}:{spec.p!r}:{spec.K}:{'+'.join(map(str, spec.targets))}"


def read_config_file(path) -> tuple[TrainConfig, list[CorruptionSpec]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def parse_config_text(text: str) -> tuple[TrainConfig, list[CorruptionSpec]]:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config syntax error: {exc}") from None
    known = {"run": _RUN_KEYS, "model": _MODEL_KEYS, "gridworld": _GRID_KEYS, "sac": _SAC_KEYS, "eval": {"corruptions": str}}
    train, sac, corruptions = {}, {}, []
    for section in cp.sections():
        if section not in known:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in known[section]:
                raise ConfigurationError(f"[{section}] {key}: unknown key")
            if section == "eval":
                corruptions = [parse_corruption(c) for c in raw.split(",") if c.strip()]
                continue
            value = _convert(section, key, raw, known[section][key])
            if section == "sac":
                sac[key] = value
            else:
                train["out_dir" if key == "out" else key] = value
    train["sac"] = SacConfig(**sac)
    return TrainConfig(**train), corruptions


def format_config(cfg: TrainConfig, corruptions=()) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        return str(v)

    lines = ["[run]"]
    for k in _RUN_KEYS:
        if k != "out":
            lines.append(f"{k} = {fmt(getattr(cfg, k))}")
    lines.append("\n[model]")
    lines += [f"{k} = {fmt(getattr(cfg, k))}" for k in _MODEL_KEYS]
    lines.append("\n[gridworld]")
    lines += [f"{k} = {fmt(getattr(cfg, k))}" for k in _GRID_KEYS if getattr(cfg, k) is not None]
    lines.append("\n[sac]")
    lines += [f"{k} = {fmt(getattr(cfg.sac, k))}" for k in _SAC_KEYS if getattr(cfg.sac, k) is not None]
    if corruptions:
        lines.append("\n[eval]")
        lines.append("corruptions = " + ", ".join(format_corruption(c) for c in corruptions))
    return "\n".join(lines) + "\n"
