"""1-D torque-controlled pendulum with image and Doppler-sound modalities.

Angles are measured from the upright position (theta = 0 is the swing-up
target). Tip position is ``(l sin theta, l cos theta)`` with the pivot at the
origin.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from metricmm.envs.frames import FrameStacker
from metricmm.errors import ConfigurationError, NumericalError


@dataclass(frozen=True)
class PendulumState:
    theta: float
    theta_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.theta_dot])


@dataclass(frozen=True)
class PendulumParams:
    g: float = 10.0
    length: float = 1.0
    mass: float = 1.0
    dt: float = 0.05
    sigma: float = 0.0  # dynamics noise std
    max_torque: float = 2.0
    max_speed: float = 8.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be > 0, got {self.dt}")
        if not self.max_torque > 0:
            raise ConfigurationError(f"max_torque must be > 0, got {self.max_torque}")
        if self.sigma < 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma}")


def _receivers_on_circle(radius=2.0, angles_deg=(90.0, 210.0, 330.0)):
    return tuple(
        (radius * math.cos(math.radians(a)), radius * math.sin(math.radians(a))) for a in angles_deg
    )


@dataclass(frozen=True)
class SoundConfig:
    receivers: tuple[tuple[float, float], ...] = field(default_factory=_receivers_on_circle)
    f0: float = 440.0
    c: float = 343.0
    a0: float = 1.0
    r_min: float = 0.1

    def validate(self, params: PendulumParams) -> None:
        pts = [tuple(map(float, r)) for r in self.receivers]
        if len(pts) != 3:
            raise ConfigurationError("exactly 3 receivers are required")
        if len(set(pts)) != len(pts):
            raise ConfigurationError("receivers must be distinct")
        if any(math.hypot(*p) == 0.0 for p in pts):
            raise ConfigurationError("a receiver sits on the pivot")
        if not self.c > params.length * params.max_speed:
            raise ConfigurationError("sound speed must exceed the maximum tip speed")


@dataclass(frozen=True)
class RenderConfig:
    size: int = 24
    rod_pixels: float = 10.0
    samples: int = 32


def wrap_angle(theta: float) -> float:
    """Map to (-pi, pi]."""
    w = math.fmod(theta + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def angular_acceleration(theta: float, action: float, params: PendulumParams) -> float:
    g, l, m = params.g, params.length, params.mass
    return 3.0 * g / (2.0 * l) * math.sin(theta) + 3.0 / (m * l * l) * action


def pendulum_step(
    state: PendulumState, action: float, params: PendulumParams = PendulumParams(), noise: float = 0.0
) -> PendulumState:
    """Semi-implicit Euler: velocity first (clamped), then angle with the new velocity.

    ``noise`` is the caller-drawn acceleration perturbation (0 when sigma = 0).
    """
    if not (math.isfinite(state.theta) and math.isfinite(state.theta_dot)):
        raise NumericalError(f"non-finite pendulum state {state}")
    if not (math.isfinite(action) and math.isfinite(noise)):
        raise NumericalError(f"non-finite action {action} or noise {noise}")
    a = min(max(action, -params.max_torque), params.max_torque)
    acc = angular_acceleration(state.theta, a, params)
    vel = state.theta_dot + (acc + noise) * params.dt
    vel = min(max(vel, -params.max_speed), params.max_speed)
    return PendulumState(state.theta + vel * params.dt, vel)


def pendulum_reward(state: PendulumState, action: float) -> float:
    th = wrap_angle(state.theta)
    return -(th * th + 0.1 * state.theta_dot**2 + 0.001 * action * action)


def tip_kinematics(state: PendulumState, params: PendulumParams):
    l = params.length
    s, c = math.sin(state.theta), math.cos(state.theta)
    pos = np.array([l * s, l * c])
    vel = l * state.theta_dot * np.array([c, -s])
    return pos, vel


def sound_observe(
    state: PendulumState, params: PendulumParams = PendulumParams(), sound: SoundConfig = SoundConfig()
) -> np.ndarray:
    """Doppler-shifted frequency and inverse-square amplitude at each receiver.

    Returns ``(f1, A1, f2, A2, f3, A3)``.
    """
    pos, vel = tip_kinematics(state, params)
    out = np.empty(2 * len(sound.receivers))
    for k, r in enumerate(sound.receivers):
        diff = np.asarray(r, dtype=np.float64) - pos
        dist = float(np.hypot(*diff))
        v_r = float(vel @ diff) / dist if dist > 0 else 0.0
        if sound.c <= v_r:
            raise ConfigurationError("radial speed reached the speed of sound")
        out[2 * k] = sound.f0 * sound.c / (sound.c - v_r)
        out[2 * k + 1] = sound.a0 / max(dist, sound.r_min) ** 2
    return out


def sound_features(raw: np.ndarray, params: PendulumParams = PendulumParams(), sound: SoundConfig = SoundConfig()) -> np.ndarray:
    """Rescale raw sound readings to O(1) network inputs.

    Frequency becomes ``(f/f0 - 1) * c / (l * max_speed)`` (about [-1, 1]);
    amplitude becomes ``A / A0``.
    """
    out = np.array(raw, dtype=np.float64)
    out[0::2] = (out[0::2] / sound.f0 - 1.0) * sound.c / (params.length * params.max_speed)
    out[1::2] = out[1::2] / sound.a0
    return out


def image_observe(state: PendulumState, render: RenderConfig = RenderConfig()) -> np.ndarray:
    """Binary ``size x size`` rendering of the rod, flattened row-major."""
    n = render.size
    canvas = np.zeros((n, n))
    centre = n / 2.0
    t = np.linspace(0.0, 1.0, render.samples)
    cols = centre + render.rod_pixels * math.sin(state.theta) * t
    rows = centre - render.rod_pixels * math.cos(state.theta) * t
    ci = np.clip(np.floor(cols).astype(int), 0, n - 1)
    ri = np.clip(np.floor(rows).astype(int), 0, n - 1)
    canvas[ri, ci] = 1.0
    return canvas.ravel()


def previous_state(state: PendulumState, params: PendulumParams = PendulumParams()) -> PendulumState:
    """Exact inverse of an unclamped, zero-torque, noise-free step."""
    theta_prev = state.theta - state.theta_dot * params.dt
    vel_prev = state.theta_dot - angular_acceleration(theta_prev, 0.0, params) * params.dt
    return PendulumState(theta_prev, vel_prev)


class PendulumEnv:
    """Swing-up task with two frame-stacked modalities: image (0) and sound (1)."""

    action_dim = 1
    image_modalities = (0,)

    def __init__(
        self,
        params: PendulumParams = PendulumParams(),
        sound: SoundConfig = SoundConfig(),
        render: RenderConfig = RenderConfig(),
        frames: int = 3,
        episode_length: int = 200,
    ):
        sound.validate(params)
        self.params = params
        self.sound = sound
        self.render = render
        self.frames = frames
        self.episode_length = episode_length
        self.max_action = params.max_torque
        self.state: PendulumState | None = None
        self.t = 0
        self._stacker = FrameStacker(frames)
        self._rng = np.random.default_rng(0)

    @property
    def modality_dims(self) -> tuple[int, int]:
        return (self.frames * self.render.size**2, self.frames * 2 * len(self.sound.receivers))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.frames, self.render.size, self.render.size)

    def modality_ranges(self) -> tuple[tuple[float, float], ...]:
        return ((0.0, 1.0), (-1.0, 1.0))

    def frame(self, state: PendulumState) -> tuple[np.ndarray, np.ndarray]:
        raw = sound_observe(state, self.params, self.sound)
        return image_observe(state, self.render), sound_features(raw, self.params, self.sound)

    def reset(self, rng: np.random.Generator, state: PendulumState | None = None):
        self._rng = rng
        if state is None:
            state = PendulumState(rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0))
        self.state = state
        self.t = 0
        return self._stacker.reset(self.frame(state))

    def step(self, action: float):
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -self.max_action, self.max_action))
        reward = pendulum_reward(self.state, a)
        noise = self._rng.normal(0.0, self.params.sigma) if self.params.sigma > 0 else 0.0
        self.state = pendulum_step(self.state, a, self.params, noise)
        self.t += 1
        obs = self._stacker.push(self.frame(self.state))
        return obs, reward, self.t >= self.episode_length


TRAJECTORY_COLUMNS = ("episode", "t", "theta", "theta_dot", "action", "reward")


def write_trajectory_csv(path, rows) -> None:
    """Rows are ``(episode, t, theta, theta_dot, action, reward)`` tuples."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for r in rows:
            w.writerow([int(r[0]), int(r[1])] + [repr(float(v)) for v in r[2:]])


def read_trajectory_csv(path) -> list[tuple]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != TRAJECTORY_COLUMNS:
            raise ConfigurationError(f"unexpected trajectory header {header}")
        return [(int(r[0]), int(r[1])) + tuple(float(v) for v in r[2:]) for r in rd]
