"""Test-time observation corruptions with per-step probability and sticky persistence.

Corruptions act on the (frame-stacked) observation vector of one modality.
Image modalities are described by ``(frames, height, width)``; spatial
corruptions (patches, puzzle, texture) use the same geometry on every frame
of the stack.
"""

from __future__ import annotations

import contextlib
import enum
import itertools
import math
import threading
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from metricmm.errors import ConfigurationError


class CorruptionKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    SALT_PEPPER = "salt_pepper"
    PATCHES = "patches"
    PUZZLE = "puzzle"
    TEXTURE = "texture"
    FAILURE = "failure"
    HALLUCINATION = "hallucination"

    @classmethod
    def parse(cls, name) -> CorruptionKind:
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"saltpepper": "salt_pepper", "salt_and_pepper": "salt_pepper", "patch": "patches"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(f"unknown corruption kind {name!r}") from None


IMAGE_ONLY = frozenset({CorruptionKind.PATCHES, CorruptionKind.PUZZLE, CorruptionKind.TEXTURE})


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    p: float
    K: int = 1
    targets: tuple[int, ...] = (0,)
    gaussian_sigma: tuple[float, ...] | None = None  # per target modality; None -> defaults
    flip_fraction: float = 0.3
    patch_fraction: float = 0.3
    puzzle_grid: int = 3
    texture_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", CorruptionKind.parse(self.kind))
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"corruption probability must be in [0, 1], got {self.p}")
        if self.K < 1:
            raise ConfigurationError(f"persistence K must be >= 1, got {self.K}")
        if not self.targets:
            raise ConfigurationError("corruption needs at least one target modality")
        if not 0.0 <= self.flip_fraction <= 1.0:
            raise ConfigurationError("flip_fraction must be in [0, 1]")
        if not 0.0 < self.patch_fraction < 1.0:
            raise ConfigurationError("patch_fraction must be in (0, 1)")


@dataclass
class ModalityInfo:
    """What corruptions need to know about one modality."""

    image_shape: tuple[int, int, int] | None = None  # (frames, height, width)
    value_range: tuple[float, float] = (0.0, 1.0)
    scale: float = 1.0

    @property
    def is_image(self) -> bool:
        return self.image_shape is not None


@dataclass
class CorruptionContext:
    modalities: Sequence[ModalityInfo]
    rng: np.random.Generator
    bank: Sequence[np.ndarray] | None = None  # per modality, shape (n, dim)
    image_sigma: float = 0.5
    vector_sigma_rel: float = 0.1


def default_sigma(info: ModalityInfo, context: CorruptionContext) -> float:
    return context.image_sigma if info.is_image else context.vector_sigma_rel * info.scale


def validate_spec(spec: CorruptionSpec, context: CorruptionContext) -> None:
    n = len(context.modalities)
    for t in spec.targets:
        if not 0 <= t < n:
            raise ConfigurationError(f"target modality {t} out of range for {n} modalities")
        if spec.kind in IMAGE_ONLY and not context.modalities[t].is_image:
            raise ConfigurationError(f"{spec.kind.value} applies only to image modalities (target {t})")
        if spec.kind is CorruptionKind.HALLUCINATION:
            if context.bank is None or len(context.bank[t]) == 0:
                raise ConfigurationError("hallucination needs a non-empty observation bank")
    if spec.gaussian_sigma is not None and len(spec.gaussian_sigma) != len(spec.targets):
        raise ConfigurationError("gaussian_sigma needs one entry per target modality")


# ---------------------------------------------------------------- scheduling


def schedule_corruption(spec: CorruptionSpec, rng: np.random.Generator, step_index: int, counters: np.ndarray) -> np.ndarray:
    """Active flags for every modality at ``step_index``; updates ``counters`` in place.

    ``counters[i]`` is the number of further steps modality ``i`` stays
    corrupted. A trigger at step t corrupts steps t..t+K-1. Step 0 is never
    corrupted. One uniform draw is consumed per target modality per step
    regardless of state, which keeps streams aligned across settings.
    """
    n = len(counters)
    active = np.zeros(n, dtype=bool)
    if step_index == 0:
        counters[:] = 0
        return active
    draws = rng.random(len(spec.targets))
    for draw, i in zip(draws, spec.targets):
        if counters[i] > 0:
            active[i] = True
            counters[i] -= 1
        elif draw < spec.p:
            active[i] = True
            counters[i] = spec.K - 1
    return active


# ---------------------------------------------------------------- kinds


def patch_shape(height: int, width: int, fraction: float) -> tuple[int, int]:
    """Integer rectangle with area closest to ``fraction`` of the image, aspect <= 2."""
    target = fraction * height * width
    best = None
    for h in range(1, height + 1):
        for w in range(1, width + 1):
            if max(h, w) > 2 * min(h, w):
                continue
            key = (abs(h * w - target), abs(h - w), h)
            if best is None or key < best[0]:
                best = (key, (h, w))
    return best[1]


def puzzle_permute(images: np.ndarray, perm: Sequence[int], grid: int = 3) -> np.ndarray:
    """Rearrange ``grid x grid`` blocks: output block k is input block ``perm[k]``.

    ``images`` has shape ``(..., H, W)`` with H and W divisible by ``grid``.
    """
    h, w = images.shape[-2:]
    bh, bw = h // grid, w // grid
    blocks = images.reshape(images.shape[:-2] + (grid, bh, grid, bw))
    blocks = np.moveaxis(blocks, -3, -2).reshape(images.shape[:-2] + (grid * grid, bh, bw))
    out = blocks[..., list(perm), :, :]
    out = out.reshape(images.shape[:-2] + (grid, grid, bh, bw))
    return np.moveaxis(out, -2, -3).reshape(images.shape)


def inverse_permutation(perm: Sequence[int]) -> np.ndarray:
    inv = np.empty(len(perm), dtype=np.int64)
    inv[np.asarray(perm)] = np.arange(len(perm))
    return inv


def random_nonidentity_permutation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation of ``range(n)`` excluding the identity."""
    while True:
        perm = rng.permutation(n)
        if np.any(perm != np.arange(n)):
            return perm


def texture_pattern(height: int, width: int, seed: int) -> np.ndarray:
    """Fixed background pattern: low-frequency stripes plus seeded speckle, in [0, 1)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    fx, fy, phase = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0, 2 * math.pi)
    stripes = 0.5 + 0.25 * np.sin(fx * xx + fy * yy + phase)
    speckle = rng.uniform(-0.25, 0.25, size=(height, width))
    return np.clip(stripes + speckle, 0.0, 0.999)


def apply_corruption(
    x: np.ndarray,
    kind: CorruptionKind,
    spec: CorruptionSpec,
    context: CorruptionContext,
    modality: int = 0,
) -> np.ndarray:
    """Return a corrupted copy of one modality's observation vector."""
    _check_not_training()
    kind = CorruptionKind.parse(kind)
    info = context.modalities[modality]
    if kind in IMAGE_ONLY and not info.is_image:
        raise ConfigurationError(f"{kind.value} applies only to image modalities (modality {modality})")
    x = np.asarray(x, dtype=np.float64)
    rng = context.rng

    if kind is CorruptionKind.FAILURE:
        return np.zeros_like(x)

    if kind is CorruptionKind.GAUSSIAN:
        sigma = default_sigma(info, context)
        if spec.gaussian_sigma is not None and modality in spec.targets:
            sigma = spec.gaussian_sigma[spec.targets.index(modality)]
        if sigma == 0:
            return x.copy()
        return x + rng.normal(0.0, sigma, size=x.shape)

    if kind is CorruptionKind.SALT_PEPPER:
        lo, hi = info.value_range
        out = x.copy()
        flip = rng.random(x.shape) < spec.flip_fraction
        high = rng.random(x.shape) < 0.5
        out[flip & high] = hi
        out[flip & ~high] = lo
        return out

    if kind is CorruptionKind.HALLUCINATION:
        if context.bank is None or len(context.bank[modality]) == 0:
            raise ConfigurationError("hallucination needs a non-empty observation bank")
        bank = context.bank[modality]
        return np.array(bank[rng.integers(len(bank))], dtype=np.float64)

    frames, h, w = info.image_shape
    img = x.reshape(frames, h, w)

    if kind is CorruptionKind.PATCHES:
        ph, pw = patch_shape(h, w, spec.patch_fraction)
        if rng.random() < 0.5:
            ph, pw = pw, ph
        r0 = rng.integers(0, h - ph + 1)
        c0 = rng.integers(0, w - pw + 1)
        out = img.copy()
        out[:, r0 : r0 + ph, c0 : c0 + pw] = 0.0
        return out.ravel()

    if kind is CorruptionKind.PUZZLE:
        g = spec.puzzle_grid
        if h % g or w % g:
            raise ConfigurationError(f"image {h}x{w} not divisible into a {g}x{g} grid")
        perm = random_nonidentity_permutation(g * g, rng)
        return puzzle_permute(img, perm, g).ravel()

    if kind is CorruptionKind.TEXTURE:
        pattern = texture_pattern(h, w, spec.texture_seed)
        out = img.copy()
        bg = out == 0.0
        out[bg] = np.broadcast_to(pattern, out.shape)[bg]
        return out.ravel()

    raise ConfigurationError(f"unhandled corruption kind {kind}")


class ObservationCorruptor:
    """Per-episode driver: schedules and applies one spec to multimodal observations."""

    def __init__(self, spec: CorruptionSpec, context: CorruptionContext):
        validate_spec(spec, context)
        self.spec = spec
        self.context = context
        self.counters = np.zeros(len(context.modalities), dtype=np.int64)
        self.last_active = np.zeros(len(context.modalities), dtype=bool)

    def reset(self) -> None:
        self.counters[:] = 0

    def __call__(self, obs: Sequence[np.ndarray], step_index: int) -> tuple[np.ndarray, ...]:
        active = schedule_corruption(self.spec, self.context.rng, step_index, self.counters)
        self.last_active = active
        out = []
        for i, o in enumerate(obs):
            out.append(apply_corruption(o, self.spec.kind, self.spec, self.context, i) if active[i] else o)
        return tuple(out)


# ---------------------------------------------------------------- training guard

_guard = threading.local()


class CorruptionDuringTraining(RuntimeError):
    pass


@contextlib.contextmanager
def forbid_corruption():
    """Within this block any call to :func:`apply_corruption` raises."""
    depth = getattr(_guard, "depth", 0)
    _guard.depth = depth + 1
    try:
        yield
    finally:
        _guard.depth = depth


def _check_not_training() -> None:
    if getattr(_guard, "depth", 0) > 0:
        raise CorruptionDuringTraining("observation corruption invoked on a training path")


def run_lengths(flags: Sequence[bool]) -> list[int]:
    """Lengths of maximal runs of True."""
    return [len(list(g)) for v, g in itertools.groupby(flags) if v]
