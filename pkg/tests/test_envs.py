import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metricmm.envs import make_env
from metricmm.envs.frames import FrameStacker, stack_frames
from metricmm.envs.gridworld import (
    UNREACHABLE,
    GridWorld,
    GridWorldEnv,
    all_pairs_distances,
    default_walls,
    format_map,
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
    SoundConfig,
    image_observe,
    pendulum_reward,
    pendulum_step,
    previous_state,
    read_trajectory_csv,
    sound_features,
    sound_observe,
    wrap_angle,
    write_trajectory_csv,
)
from metricmm.errors import ConfigurationError, NumericalError

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
OPEN5 = np.zeros((5, 5), dtype=bool)


# ---------------------------------------------------------------- gridworld


def test_grid_moves():
    w = GridWorld(OPEN5, 2, 2)
    assert grid_step(w, RIGHT).position == (3, 2)
    assert grid_step(w, UP).position == (2, 1)
    assert grid_step(GridWorld(OPEN5, 0, 3), LEFT).position == (0, 3)
    walls = OPEN5.copy()
    walls[2, 3] = True
    assert grid_step(GridWorld(walls, 2, 2), RIGHT).position == (2, 2)


def test_agent_cannot_start_on_wall():
    walls = OPEN5.copy()
    walls[1, 1] = True
    with pytest.raises(ConfigurationError):
        GridWorld(walls, 1, 1)
    with pytest.raises(ConfigurationError):
        GridWorld(OPEN5, 5, 0)


def test_bfs_examples():
    w = GridWorld(OPEN5, 0, 0)
    assert grid_bfs_distance(w, (1, 1), (1, 1)) == 0
    assert grid_bfs_distance(w, (1, 1), (1, 2)) == 1
    walls = parse_map(
        """
        ..#..
        ..#..
        ..#..
        ..#..
        .....
        """
    )
    # vertical wall at x=2 with a gap at y=4: down 4, across 2, up 4
    assert grid_bfs_distance(GridWorld(walls, 0, 0), (1, 0), (3, 0)) == 10


def test_bfs_unreachable():
    walls = parse_map("..#..\n..#..\n..#..")
    assert grid_bfs_distance(GridWorld(walls, 0, 0), (0, 0), (4, 0)) == UNREACHABLE


def test_bfs_metric_axioms_exhaustive():
    walls = default_walls()
    dist = all_pairs_distances(walls)
    cells = list(dist)
    d = lambda a, b: dist[a][b[1], b[0]]
    for a, b in itertools.product(cells, cells):
        assert d(a, b) == d(b, a)
        assert (d(a, b) == 0) == (a == b)
    rng = np.random.default_rng(0)
    for _ in range(5000):
        a, b, c = (cells[i] for i in rng.integers(len(cells), size=3))
        assert d(a, c) <= d(a, b) + d(b, c)


def test_grid_observe():
    a, b = grid_observe(GridWorld(np.zeros((4, 4), bool), 0, 0))
    assert a[0] == 1 and a.sum() == 1 and a.shape == (16,)
    np.testing.assert_array_equal(b, [0.0, 0.0])
    a, b = grid_observe(GridWorld(np.zeros((4, 4), bool), 3, 3))
    np.testing.assert_array_equal(b, [1.0, 1.0])
    env = GridWorldEnv()
    rng = np.random.default_rng(0)
    env.reset(rng)
    for _ in range(100):
        (a, b), _, _ = env.step(int(rng.integers(4)))
        assert a.sum() == 1


def test_default_map_and_io(tmp_path):
    walls = default_walls()
    assert walls.shape == (10, 10) and walls.sum() > 0
    path = tmp_path / "map.txt"
    path.write_text(format_map(walls))
    np.testing.assert_array_equal(load_map(path), walls)
    with pytest.raises(ConfigurationError):
        parse_map("..x\n...")
    with pytest.raises(ConfigurationError):
        parse_map("...\n..")


def test_grid_env_episode_length():
    env = GridWorldEnv(episode_length=7)
    env.reset(np.random.default_rng(1))
    dones = [env.step(0)[2] for _ in range(7)]
    assert dones == [False] * 6 + [True]
    assert isinstance(make_env("gridworld"), GridWorldEnv)
    with pytest.raises(ConfigurationError):
        make_env("cartpole")


# ---------------------------------------------------------------- pendulum dynamics


def test_pendulum_equilibrium():
    s = pendulum_step(PendulumState(0.0, 0.0), 0.0)
    assert (s.theta, s.theta_dot) == (0.0, 0.0)


@pytest.mark.parametrize("action, acc", [(0.0, 15.0), (1.0, 18.0)])
def test_pendulum_hand_examples(action, acc):
    s = pendulum_step(PendulumState(math.pi / 2, 0.0), action)
    assert abs(s.theta_dot - acc * 0.05) <= 1e-12
    assert abs(s.theta - (math.pi / 2 + acc * 0.05 * 0.05)) <= 1e-12


def test_pendulum_clamps():
    s = pendulum_step(PendulumState(math.pi / 2, 7.9), 2.0)
    assert s.theta_dot == 8.0
    # torque beyond the limit is clipped to 2
    assert pendulum_step(PendulumState(0.0, 0.0), 50.0) == pendulum_step(PendulumState(0.0, 0.0), 2.0)
    with pytest.raises(NumericalError):
        pendulum_step(PendulumState(float("nan"), 0.0), 0.0)


def _rk4_reference(theta, omega, action, steps, params=PendulumParams(), substeps=100):
    """Independent RK4 integration of the continuous dynamics at dt/substeps."""
    h = params.dt / substeps
    k = 3 * params.g / (2 * params.length)
    b = 3 / (params.mass * params.length**2)

    def f(y):
        return np.array([y[1], k * math.sin(y[0]) + b * action])

    y = np.array([theta, omega])
    out = []
    for _ in range(steps):
        for _ in range(substeps):
            k1 = f(y)
            k2 = f(y + h / 2 * k1)
            k3 = f(y + h / 2 * k2)
            k4 = f(y + h * k3)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(y.copy())
    return np.array(out)


@pytest.mark.parametrize("theta, omega, action", [(math.pi - 0.3, 0.0, 0.0), (2.0, 0.5, 0.0), (3.0, 0.0, 1.0)])
def test_pendulum_matches_fine_integration(theta, omega, action):
    ref = _rk4_reference(theta, omega, action, 20)
    s = PendulumState(theta, omega)
    for t in range(20):
        s = pendulum_step(s, action)
        err = np.linalg.norm(s.as_array() - ref[t]) / np.linalg.norm(ref[t])
        assert err < 0.05


def test_reward_examples():
    assert pendulum_reward(PendulumState(0.0, 0.0), 0.0) == 0.0
    assert pendulum_reward(PendulumState(math.pi, 0.0), 0.0) == pytest.approx(-9.8696, abs=1e-4)
    assert pendulum_reward(PendulumState(math.pi, 1.0), 2.0) == pytest.approx(-9.9736, abs=1e-4)
    # wrapping: one full turn costs nothing extra
    assert pendulum_reward(PendulumState(2 * math.pi, 0.0), 0.0) == pytest.approx(0.0, abs=1e-20)


@given(st.floats(-50, 50))
def test_wrap_angle_range(theta):
    w = wrap_angle(theta)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(theta), abs_tol=1e-9)


def test_previous_state_inverts_step():
    s = PendulumState(0.7, -1.3)
    back = pendulum_step(previous_state(s), 0.0)
    assert back.theta == pytest.approx(s.theta, abs=1e-12)
    assert back.theta_dot == pytest.approx(s.theta_dot, abs=1e-12)


def test_pendulum_deterministic_without_noise():
    env = PendulumEnv()
    runs = []
    for _ in range(2):
        obs = env.reset(np.random.default_rng(5))
        traj = [obs]
        for a in np.linspace(-2, 2, 30):
            traj.append(env.step(a)[0])
        runs.append(np.concatenate([np.concatenate(o) for o in traj]))
    assert runs[0].tobytes() == runs[1].tobytes()


# ---------------------------------------------------------------- sound


def test_sound_static_pendulum_has_no_shift():
    for th in np.linspace(-3, 3, 13):
        out = sound_observe(PendulumState(th, 0.0))
        np.testing.assert_array_equal(out[0::2], 440.0)


def test_sound_upright_by_hand():
    cfg = SoundConfig()
    out = sound_observe(PendulumState(0.0, 3.0), sound=cfg)
    # receiver 0 sits at (0, 2), the tip at (0, 1) moving along +x
    assert cfg.receivers[0] == pytest.approx((0.0, 2.0))
    assert out[0] == pytest.approx(440.0, abs=1e-9)
    assert out[1] == pytest.approx(1.0, abs=1e-12)


def test_sound_doppler_sign():
    # at theta = pi/2 the tip is at (1, 0) moving along -y with theta_dot > 0;
    # the receiver at 330 degrees lies below-right and is approached
    out = sound_observe(PendulumState(math.pi / 2, 4.0))
    assert out[4] > 440.0
    assert np.all(out[0::2] > 0)


def test_sound_config_validation():
    with pytest.raises(ConfigurationError):
        SoundConfig(c=5.0).validate(PendulumParams())
    with pytest.raises(ConfigurationError):
        SoundConfig(receivers=((0.0, 0.0), (1.0, 1.0), (2.0, 2.0))).validate(PendulumParams())


def test_sound_features_bounded():
    for th, om in itertools.product(np.linspace(-3, 3, 9), np.linspace(-8, 8, 9)):
        f = sound_features(sound_observe(PendulumState(th, om)))
        assert np.all(np.abs(f[0::2]) <= 1.1)
        assert np.all((f[1::2] > 0) & (f[1::2] <= 1.0 + 1e-12))


# ---------------------------------------------------------------- images and frames


def test_image_properties():
    for th in np.linspace(-math.pi, math.pi, 37):
        img = image_observe(PendulumState(th, 0.0)).reshape(24, 24)
        assert img[12, 12] == 1.0
        assert set(np.unique(img)) <= {0.0, 1.0}
        flipped = image_observe(PendulumState(th + math.pi, 0.0)).reshape(24, 24)
        assert np.sum(img != flipped) >= 5
    a = image_observe(PendulumState(0.3, 0.0))
    assert a.tobytes() == image_observe(PendulumState(0.3, 0.0)).tobytes()
    up = image_observe(PendulumState(0.0, 0.0)).reshape(24, 24)
    assert up[2, 12] == 1.0 and up[20, 12] == 0.0


def test_stack_frames():
    x = [np.array([1.0]), np.array([10.0])]
    obs, hist = stack_frames(None, x, 3)
    np.testing.assert_array_equal(obs[0], [1, 1, 1])
    for v in (2.0, 3.0, 4.0):
        obs, hist = stack_frames(hist, [np.array([v]), np.array([10 * v])], 3)
    np.testing.assert_array_equal(obs[0], [2, 3, 4])
    np.testing.assert_array_equal(obs[1], [20, 30, 40])
    fs = FrameStacker(4)
    assert len(fs.reset([np.zeros(5)])[0]) == 20


def test_env_modalities():
    env = PendulumEnv()
    obs = env.reset(np.random.default_rng(0))
    assert [len(o) for o in obs] == list(env.modality_dims) == [1728, 18]
    obs, r, done = env.step(np.array([0.5]))
    assert not done and r <= 0


def _stacked(state: PendulumState, env: PendulumEnv) -> np.ndarray:
    frames = [state]
    for _ in range(env.frames - 1):
        frames.insert(0, previous_state(frames[0], env.params))
    per = [env.frame(s) for s in frames]
    return np.concatenate([np.concatenate([p[0] for p in per]), np.concatenate([p[1] for p in per])])


def test_observation_determines_state():
    """Nearest-neighbour decoding over a 72 x 41 (theta, theta_dot) grid."""
    env = PendulumEnv()
    thetas = -math.pi + (np.arange(72) + 0.5) * (2 * math.pi / 72)
    speeds = np.linspace(-7.0, 7.0, 41)
    grid = [(i, j) for i in range(72) for j in range(41)]
    db = np.array([_stacked(PendulumState(thetas[i], speeds[j]), env) for i, j in grid])
    rng = np.random.default_rng(0)
    hits = 0
    n = 400
    for _ in range(n):
        i, j = int(rng.integers(72)), int(rng.integers(41))
        # jitter inside the cell so the query is not a database entry
        th = thetas[i] + rng.uniform(-0.2, 0.2) * (2 * math.pi / 72)
        om = speeds[j] + rng.uniform(-0.2, 0.2) * (14.0 / 40)
        q = _stacked(PendulumState(th, om), env)
        k = int(np.argmin(np.sum((db - q) ** 2, axis=1)))
        di, dj = grid[k]
        if min(abs(di - i), 72 - abs(di - i)) <= 1 and abs(dj - j) <= 1:
            hits += 1
    assert hits / n >= 0.95


def test_trajectory_csv_round_trip(tmp_path):
    rows = [(0, t, 0.1 * t, -0.2 * t, 1.5, -3.25) for t in range(4)]
    write_trajectory_csv(tmp_path / "traj.csv", rows)
    back = read_trajectory_csv(tmp_path / "traj.csv")
    assert back == rows


@settings(max_examples=50, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-8, 8), st.floats(-2, 2))
def test_step_keeps_speed_bound(theta, omega, action):
    s = pendulum_step(PendulumState(theta, omega), action)
    assert abs(s.theta_dot) <= 8.0
    assert math.isfinite(s.theta)
