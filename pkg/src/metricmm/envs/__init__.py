from metricmm.envs.frames import FrameStacker, stack_frames
from metricmm.envs.gridworld import (
    UNREACHABLE,
    GridWorld,
    GridWorldEnv,
    default_walls,
    grid_bfs_distance,
    grid_observe,
    grid_step,
    load_map,
    parse_map,
)
from metricmm.envs.pendulum import (
    PendulumEnv,
    PendulumParams,
    PendulumState,
    RenderConfig,
    SoundConfig,
    image_observe,
    pendulum_reward,
    pendulum_step,
    sound_observe,
    wrap_angle,
)

__all__ = [
    "UNREACHABLE", "FrameStacker", "GridWorld", "GridWorldEnv", "PendulumEnv", "PendulumParams",
    "PendulumState", "RenderConfig", "SoundConfig", "default_walls", "grid_bfs_distance",
    "grid_observe", "grid_step", "image_observe", "load_map", "make_env", "parse_map",
    "pendulum_reward", "pendulum_step", "sound_observe", "stack_frames", "wrap_angle",
]


def make_env(name: str, **kwargs):
    from metricmm.errors import ConfigurationError

    if name == "pendulum":
        return PendulumEnv(**kwargs)
    if name == "gridworld":
        return GridWorldEnv(**kwargs)
    raise ConfigurationError(f"unknown environment {name!r}")
